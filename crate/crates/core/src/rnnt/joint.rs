use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::tensor::{ParamStore, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointConfig {
    pub enc_dim: usize,
    pub pred_dim: usize,
    pub hidden: usize,
    /// Output symbols including blank.
    pub symbols: usize,
}

/// `log_softmax(W_o · tanh(W_h·h_t + W_g·g_u))` for every `(t, u)`.
#[derive(Clone, Debug)]
pub struct Joint {
    pub cfg: JointConfig,
    pub enc: Linear,
    pub pred: Linear,
    pub out: Linear,
}

impl Joint {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, cfg: JointConfig, rng: &mut R) -> Self {
        Self {
            enc: Linear::fan_in(store, &format!("{prefix}.enc"), cfg.enc_dim, cfg.hidden, rng),
            pred: Linear::fan_in(store, &format!("{prefix}.pred"), cfg.pred_dim, cfg.hidden, rng),
            out: Linear::fan_in(store, &format!("{prefix}.out"), cfg.hidden, cfg.symbols, rng),
            cfg,
        }
    }

    /// Lattice `[T, U+1, symbols]` of log-probabilities from encoder output
    /// `h: [T, enc_dim]` and prediction output `g: [U+1, pred_dim]`.
    pub fn forward<'t>(&self, p: &[Var<'t>], h: &Var<'t>, g: &Var<'t>) -> Result<Var<'t>> {
        let (hs, gs) = (h.shape(), g.shape());
        if hs.len() != 2 || gs.len() != 2 {
            return Err(Error::dim("joint", &hs, &gs));
        }
        let (t, u1, j) = (hs[0], gs[0], self.cfg.hidden);
        let a = self.enc.forward(p, h)?;
        let b = self.pred.forward(p, g)?;
        let rows: Vec<usize> = (0..t).flat_map(|i| std::iter::repeat_n(i, u1)).collect();
        let z = a.gather_rows(rows)?.reshape([t, u1, j])?.add_broadcast(&b)?.tanh();
        let logits = self.out.forward(p, &z.reshape([t * u1, j])?)?;
        logits.log_softmax()?.reshape([t, u1, self.cfg.symbols])
    }

    /// Log-probabilities `[1, symbols]` from pre-projected rows `[1, hidden]`.
    pub fn step<'t>(&self, p: &[Var<'t>], enc_proj: &Var<'t>, pred_proj: &Var<'t>) -> Result<Var<'t>> {
        self.out.forward(p, &enc_proj.add(pred_proj)?.tanh())?.log_softmax()
    }
}

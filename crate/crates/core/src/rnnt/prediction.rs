use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{LabelSequence, BLANK};
use crate::error::{Error, Result};
use crate::nn::{fan_in_std, Linear};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionConfig {
    /// Non-blank symbols; the embedding has `vocab + 1` rows, row 0 being the
    /// learned start embedding.
    pub vocab: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub out_dim: usize,
}

impl PredictionConfig {
    pub fn full() -> Self {
        Self {
            vocab: super::VOCAB_SIZE,
            embed_dim: 128,
            hidden: 2048,
            layers: 2,
            out_dim: 640,
        }
    }
}

#[derive(Clone, Debug)]
struct LstmLayer {
    wx: ParamId,
    wh: ParamId,
    b: ParamId,
    hidden: usize,
}

impl LstmLayer {
    /// Gates in `i, f, g, o` order.
    fn cell<'t>(&self, p: &[Var<'t>], xw: &Var<'t>, h: &Var<'t>, c: &Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let n = self.hidden;
        let gates = xw.add(&h.matmul(&self.wh.of(p))?)?;
        let i = gates.narrow(1, 0, n)?.sigmoid();
        let f = gates.narrow(1, n, n)?.sigmoid();
        let g = gates.narrow(1, 2 * n, n)?.tanh();
        let o = gates.narrow(1, 3 * n, n)?.sigmoid();
        let c = f.mul(c)?.add(&i.mul(&g)?)?;
        let h = o.mul(&c.tanh())?;
        Ok((h, c))
    }
}

/// Per-layer `(h, c)`, each `[1, hidden]`.
#[derive(Clone, Debug)]
pub struct LstmState<'t> {
    pub h: Vec<Var<'t>>,
    pub c: Vec<Var<'t>>,
}

/// Label-history encoder: embedding, stacked LSTM, output projection.
#[derive(Clone, Debug)]
pub struct PredictionNet {
    pub cfg: PredictionConfig,
    pub embedding: ParamId,
    layers: Vec<LstmLayer>,
    pub proj: Linear,
}

impl PredictionNet {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, cfg: PredictionConfig, rng: &mut R) -> Result<Self> {
        if cfg.layers == 0 || cfg.hidden == 0 {
            return Err(Error::Config("prediction network needs at least one non-empty layer".into()));
        }
        let embedding = store.trunc_normal(format!("{prefix}.embedding"), &[cfg.vocab + 1, cfg.embed_dim], 1.0, rng);
        let mut input = cfg.embed_dim;
        let layers = (0..cfg.layers)
            .map(|i| {
                let h = cfg.hidden;
                let layer = LstmLayer {
                    wx: store.trunc_normal(format!("{prefix}.lstm{i}.wx"), &[input, 4 * h], fan_in_std(input), rng),
                    wh: store.trunc_normal(format!("{prefix}.lstm{i}.wh"), &[h, 4 * h], fan_in_std(h), rng),
                    b: store.zeros(format!("{prefix}.lstm{i}.b"), &[4 * h]),
                    hidden: h,
                };
                input = h;
                layer
            })
            .collect();
        let proj = Linear::fan_in(store, &format!("{prefix}.proj"), cfg.hidden, cfg.out_dim, rng);
        Ok(Self {
            cfg,
            embedding,
            layers,
            proj,
        })
    }

    pub fn zero_state<'t>(&self, tape: &'t Tape) -> LstmState<'t> {
        let z = || tape.constant(Tensor::zeros([1, self.cfg.hidden]));
        LstmState {
            h: self.layers.iter().map(|_| z()).collect(),
            c: self.layers.iter().map(|_| z()).collect(),
        }
    }

    /// `[(U+1), out_dim]`: row 0 is the start state, row `u` has read `u` labels.
    pub fn forward<'t>(&self, tape: &'t Tape, p: &[Var<'t>], labels: &LabelSequence) -> Result<Var<'t>> {
        let vocab = self.cfg.vocab;
        if let Some(&bad) = labels.tokens().iter().find(|&&t| t == BLANK || t > vocab) {
            return Err(Error::Vocabulary { token: bad, max: vocab });
        }
        let ids: Vec<usize> = std::iter::once(BLANK).chain(labels.tokens().iter().copied()).collect();
        let steps = ids.len();
        let mut x = self.embedding.of(p).gather_rows(ids)?;
        let state = self.zero_state(tape);
        for (l, layer) in self.layers.iter().enumerate() {
            let xw = x.matmul(&layer.wx.of(p))?.add_broadcast(&layer.b.of(p))?;
            let (mut h, mut c) = (state.h[l], state.c[l]);
            let mut outs = Vec::with_capacity(steps);
            for t in 0..steps {
                (h, c) = layer.cell(p, &xw.narrow(0, t, 1)?, &h, &c)?;
                outs.push(h);
            }
            x = tape.concat(&outs, 0)?;
        }
        self.proj.forward(p, &x)
    }

    /// One step: feeds `token` (`BLANK` for the start symbol) and returns
    /// `[1, out_dim]` plus the advanced state.
    pub fn step<'t>(&self, p: &[Var<'t>], state: &LstmState<'t>, token: usize) -> Result<(Var<'t>, LstmState<'t>)> {
        if token > self.cfg.vocab {
            return Err(Error::Vocabulary {
                token,
                max: self.cfg.vocab,
            });
        }
        let mut x = self.embedding.of(p).gather_rows(vec![token])?;
        let mut next = LstmState {
            h: Vec::with_capacity(self.layers.len()),
            c: Vec::with_capacity(self.layers.len()),
        };
        for (l, layer) in self.layers.iter().enumerate() {
            let xw = x.matmul(&layer.wx.of(p))?.add_broadcast(&layer.b.of(p))?;
            let (h, c) = layer.cell(p, &xw, &state.h[l], &state.c[l])?;
            next.h.push(h);
            next.c.push(c);
            x = h;
        }
        Ok((self.proj.forward(p, &x)?, next))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net() -> (ParamStore, PredictionNet) {
        let mut store = ParamStore::new();
        let cfg = PredictionConfig {
            vocab: 5,
            embed_dim: 4,
            hidden: 6,
            layers: 2,
            out_dim: 3,
        };
        let net = PredictionNet::new(&mut store, "pred", cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        (store, net)
    }

    #[test]
    fn shapes() {
        let (store, net) = net();
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        let empty = LabelSequence::new(vec![], 5).unwrap();
        assert_eq!(net.forward(&tape, &p, &empty).unwrap().shape(), vec![1, 3]);
        let three = LabelSequence::new(vec![2, 5, 1], 5).unwrap();
        assert_eq!(net.forward(&tape, &p, &three).unwrap().shape(), vec![4, 3]);
        let bad = LabelSequence::new(vec![6], 9).unwrap();
        assert!(matches!(net.forward(&tape, &p, &bad), Err(Error::Vocabulary { token: 6, max: 5 })));
    }

    #[test]
    fn stepping_matches_sequence_forward() {
        let (store, net) = net();
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        let labels = LabelSequence::new(vec![3, 1, 4], 5).unwrap();
        let full = net.forward(&tape, &p, &labels).unwrap().value();
        let mut state = net.zero_state(&tape);
        for (u, &tok) in std::iter::once(&BLANK).chain(labels.tokens()).enumerate() {
            let (g, s) = net.step(&p, &state, tok).unwrap();
            state = s;
            for (a, b) in g.value().data().iter().zip(full.row(u)) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }
}

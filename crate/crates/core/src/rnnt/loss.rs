//! Transducer loss: `−ln Σ` over all monotonic alignments, by forward DP in
//! log space, with the forward–backward gradient.

use super::{LabelSequence, RnntLattice, BLANK};
use crate::error::{Error, Result};
use crate::tensor::{log_add_exp, CustomOp, Tensor, Var};

/// Largest `T + U` the enumeration oracle accepts.
pub const BRUTEFORCE_MAX_EVENTS: usize = 12;

fn check(shape: &[usize], labels: &LabelSequence) -> Result<(usize, usize, usize)> {
    if shape.len() != 3 || shape[0] == 0 || shape[1] != labels.len() + 1 {
        return Err(Error::dim("rnnt_loss", shape, &[0, labels.len() + 1, 0]));
    }
    let k = shape[2];
    if let Some(&bad) = labels.tokens().iter().find(|&&y| y >= k) {
        return Err(Error::Vocabulary { token: bad, max: k - 1 });
    }
    Ok((shape[0], shape[1], k))
}

struct Dp {
    alpha: Vec<f64>,
    beta: Vec<f64>,
    log_p: f64,
}

fn dp(lp: &[f64], t_len: usize, u1: usize, k: usize, y: &[usize]) -> Dp {
    let at = |t: usize, u: usize, s: usize| lp[(t * u1 + u) * k + s];
    let ix = |t: usize, u: usize| t * u1 + u;
    let mut alpha = vec![f64::NEG_INFINITY; t_len * u1];
    alpha[0] = 0.0;
    for t in 0..t_len {
        for u in 0..u1 {
            if t == 0 && u == 0 {
                continue;
            }
            let from_blank = if t > 0 { alpha[ix(t - 1, u)] + at(t - 1, u, BLANK) } else { f64::NEG_INFINITY };
            let from_label = if u > 0 { alpha[ix(t, u - 1)] + at(t, u - 1, y[u - 1]) } else { f64::NEG_INFINITY };
            alpha[ix(t, u)] = log_add_exp(from_blank, from_label);
        }
    }
    let mut beta = vec![f64::NEG_INFINITY; t_len * u1];
    for t in (0..t_len).rev() {
        for u in (0..u1).rev() {
            beta[ix(t, u)] = if t == t_len - 1 && u == u1 - 1 {
                at(t, u, BLANK)
            } else {
                let by_blank = if t + 1 < t_len { beta[ix(t + 1, u)] + at(t, u, BLANK) } else { f64::NEG_INFINITY };
                let by_label = if u + 1 < u1 { beta[ix(t, u + 1)] + at(t, u, y[u]) } else { f64::NEG_INFINITY };
                log_add_exp(by_blank, by_label)
            };
        }
    }
    let log_p = alpha[ix(t_len - 1, u1 - 1)] + at(t_len - 1, u1 - 1, BLANK);
    Dp { alpha, beta, log_p }
}

/// Loss value for a plain lattice (no tape).
pub fn rnnt_loss_value(lattice: &RnntLattice, labels: &LabelSequence) -> Result<f64> {
    let (t, u1, k) = check(lattice.log_probs.shape(), labels)?;
    Ok(-dp(lattice.log_probs.data(), t, u1, k, labels.tokens()).log_p)
}

/// Differentiable loss on a `[T, U+1, V+1]` log-probability lattice.
pub fn rnnt_loss<'t>(log_probs: &Var<'t>, labels: &LabelSequence) -> Result<Var<'t>> {
    let v = log_probs.value();
    let (t, u1, k) = check(v.shape(), labels)?;
    let loss = -dp(v.data(), t, u1, k, labels.tokens()).log_p;
    if !loss.is_finite() {
        return Err(Error::NonFinite("rnnt_loss".into()));
    }
    Ok(log_probs.tape().custom(
        &[*log_probs],
        Tensor::scalar(loss),
        Box::new(RnntLossOp {
            labels: labels.tokens().to_vec(),
        }),
    ))
}

struct RnntLossOp {
    labels: Vec<usize>,
}

impl CustomOp for RnntLossOp {
    fn name(&self) -> &'static str {
        "rnnt_loss"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        if !needs[0] {
            return vec![None];
        }
        let lp = inputs[0].data();
        let s = inputs[0].shape();
        let (t_len, u1, k) = (s[0], s[1], s[2]);
        let y = &self.labels;
        let Dp { alpha, beta, log_p } = dp(lp, t_len, u1, k, y);
        let g = grad[0];
        let mut out = vec![0.0; lp.len()];
        for t in 0..t_len {
            for u in 0..u1 {
                let a = alpha[t * u1 + u];
                let base = (t * u1 + u) * k;
                let next_blank = if t + 1 < t_len {
                    beta[(t + 1) * u1 + u]
                } else if u + 1 == u1 {
                    0.0
                } else {
                    f64::NEG_INFINITY
                };
                out[base + BLANK] = -g * (a + lp[base + BLANK] + next_blank - log_p).exp();
                if u + 1 < u1 {
                    out[base + y[u]] = -g * (a + lp[base + y[u]] + beta[t * u1 + u + 1] - log_p).exp();
                }
            }
        }
        vec![Some(out)]
    }
}

/// Number of monotonic alignments of `U` labels over `T` frames:
/// `C(T − 1 + U, U)`.
pub fn count_paths(t: usize, u: usize) -> u128 {
    let (n, r) = ((t - 1 + u) as u128, u as u128);
    (0..r).fold(1u128, |acc, i| acc * (n - i) / (i + 1))
}

/// Reference loss by explicit enumeration of every alignment.
pub fn rnnt_loss_bruteforce(lattice: &RnntLattice, labels: &LabelSequence) -> Result<f64> {
    let (t_len, u1, _) = check(lattice.log_probs.shape(), labels)?;
    if t_len + u1 - 1 > BRUTEFORCE_MAX_EVENTS {
        return Err(Error::Size(format!(
            "T + U = {} exceeds {BRUTEFORCE_MAX_EVENTS}",
            t_len + u1 - 1
        )));
    }
    let y = labels.tokens();
    let mut total = f64::NEG_INFINITY;
    // Depth-first over (t, u, accumulated log-prob).
    let mut stack = vec![(0usize, 0usize, 0.0f64)];
    while let Some((t, u, acc)) = stack.pop() {
        if u < u1 - 1 {
            stack.push((t, u + 1, acc + lattice.at(t, u, y[u])));
        }
        let b = acc + lattice.at(t, u, BLANK);
        if t + 1 < t_len {
            stack.push((t + 1, u, b));
        } else if u == u1 - 1 {
            total = log_add_exp(total, b);
        }
    }
    Ok(-total)
}

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compares tape gradients with central finite differences.
///
/// The relative error of one element is `|analytic − numeric| / max(|analytic|, |numeric|, floor)`.
/// The floor keeps elements whose true gradient is ~0 from turning rounding
/// noise into a large ratio.
/// The default floor of `1e-5` sits well above the ~`1e-10` cancellation noise
/// of central differences at `eps = 1e-5` on objectives of moderate size.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub eps: f64,
    pub floor: f64,
    /// Check at most this many elements per input, chosen at random.
    pub probes: Option<usize>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, element index)` of the worst element.
    pub worst: (usize, usize),
    pub checked: usize,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            floor: 1e-5,
            probes: None,
            seed: 0,
        }
    }
}

impl GradCheck {
    pub fn new(eps: f64) -> Self {
        Self { eps, ..Self::default() }
    }

    pub fn probes(mut self, n: usize) -> Self {
        self.probes = Some(n);
        self
    }

    pub fn floor(mut self, floor: f64) -> Self {
        self.floor = floor;
        self
    }

    pub fn run<F>(&self, f: F, inputs: &[Tensor]) -> Result<GradCheckReport>
    where
        F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
    {
        let eval = |values: &[Tensor]| -> Result<f64> {
            let tape = Tape::new();
            let vars: Vec<Var<'_>> = values.iter().map(|v| tape.constant(v.clone())).collect();
            let y = f(&tape, &vars)?.item();
            if !y.is_finite() {
                return Err(Error::NonFinite("grad_check objective".into()));
            }
            Ok(y)
        };

        let analytic: Vec<Tensor> = {
            let tape = Tape::new();
            let vars: Vec<Var<'_>> = inputs.iter().map(|v| tape.var(v.clone())).collect();
            let y = f(&tape, &vars)?;
            if !y.item().is_finite() {
                return Err(Error::NonFinite("grad_check objective".into()));
            }
            let grads = tape.backward(y)?;
            vars.iter().map(|&v| grads.get(v)).collect()
        };

        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut work: Vec<Tensor> = inputs.to_vec();
        let mut report = GradCheckReport {
            max_rel_error: 0.0,
            worst: (0, 0),
            checked: 0,
        };
        for (i, input) in inputs.iter().enumerate() {
            let n = input.len();
            let elems: Vec<usize> = match self.probes {
                Some(p) if p < n => sample(&mut rng, n, p).into_vec(),
                _ => (0..n).collect(),
            };
            for e in elems {
                let x0 = input.data()[e];
                work[i].data_mut()[e] = x0 + self.eps;
                let plus = eval(&work)?;
                work[i].data_mut()[e] = x0 - self.eps;
                let minus = eval(&work)?;
                work[i].data_mut()[e] = x0;
                let numeric = (plus - minus) / (2.0 * self.eps);
                let a = analytic[i].data()[e];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(self.floor);
                report.checked += 1;
                if err > report.max_rel_error {
                    report.max_rel_error = err;
                    report.worst = (i, e);
                }
            }
        }
        Ok(report)
    }
}

/// Worst relative error between tape gradients of scalar `f` and central
/// finite differences with step `eps`, over every element of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    Ok(GradCheck::new(eps).run(f, inputs)?.max_rel_error)
}

use super::{Joint, LabelSequence, PredictionNet, BLANK};
use crate::error::Result;
use crate::tensor::{ParamStore, Tape, Tensor};

/// Emission cap per frame that prevents livelock.
pub const DEFAULT_MAX_SYMBOLS: usize = 10;

/// Greedy transducer search over `frames` steps. `scores(t, prefix)` returns
/// the symbol scores at frame `t` after emitting `prefix`; the argmax is
/// emitted if non-blank, otherwise decoding moves to the next frame.
pub fn greedy_decode_with<F>(frames: usize, max_symbols: usize, mut scores: F) -> Result<Vec<usize>>
where
    F: FnMut(usize, &[usize]) -> Result<Vec<f64>>,
{
    let mut out = Vec::new();
    for t in 0..frames {
        for _ in 0..max_symbols {
            let s = scores(t, &out)?;
            let best = s
                .iter()
                .enumerate()
                .fold((BLANK, f64::NEG_INFINITY), |acc, (k, &v)| if v > acc.1 { (k, v) } else { acc })
                .0;
            if best == BLANK {
                break;
            }
            out.push(best);
        }
    }
    Ok(out)
}

/// Greedy decoding of encoder output `h: [T, enc_dim]`.
pub fn greedy_decode(
    store: &ParamStore,
    pred: &PredictionNet,
    joint: &Joint,
    h: &Tensor,
    max_symbols: usize,
) -> Result<LabelSequence> {
    let tape = Tape::new();
    let p = store.bind_frozen(&tape);
    let enc = joint.enc.forward(&p, &tape.constant(h.clone()))?;
    let frames = h.shape()[0];
    let (g0, s0) = pred.step(&p, &pred.zero_state(&tape), BLANK)?;
    let mut state = s0;
    let mut pred_proj = joint.pred.forward(&p, &g0)?;
    let mut emitted = 0;
    let tokens = greedy_decode_with(frames, max_symbols, |t, prefix| {
        if prefix.len() > emitted {
            let (g, s) = pred.step(&p, &state, prefix[emitted])?;
            state = s;
            pred_proj = joint.pred.forward(&p, &g)?;
            emitted = prefix.len();
        }
        let lp = joint.step(&p, &enc.narrow(0, t, 1)?, &pred_proj)?;
        let v = lp.value().data().to_vec();
        Ok(v)
    })?;
    LabelSequence::new(tokens, pred.cfg.vocab)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn always_blank_emits_nothing() {
        let out = greedy_decode_with(5, 10, |_, _| Ok(vec![0.0, -1.0, -2.0])).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn rule_trace() {
        // a, blank | b, blank | blank
        let script = [(0, 1), (0, 0), (1, 2), (1, 0), (2, 0)];
        let mut i = 0;
        let out = greedy_decode_with(3, 10, |t, _| {
            let (tt, k) = script[i];
            assert_eq!(t, tt);
            i += 1;
            let mut s = vec![-5.0; 3];
            s[k] = 0.0;
            Ok(s)
        })
        .unwrap();
        assert_eq!(out, vec![1, 2]);
        assert_eq!(i, script.len());
    }

    #[test]
    fn emission_cap_bounds_output() {
        let out = greedy_decode_with(3, 4, |_, _| Ok(vec![-1.0, 0.0])).unwrap();
        assert_eq!(out.len(), 12);
    }
}

//! RNN-T transducer: prediction and joint networks, the alignment-summed
//! loss, greedy decoding and word error rate.

mod decode;
mod joint;
mod loss;
mod prediction;
mod wer;

pub use decode::{greedy_decode, greedy_decode_with, DEFAULT_MAX_SYMBOLS};
pub use joint::{Joint, JointConfig};
pub use loss::{count_paths, rnnt_loss, rnnt_loss_bruteforce, rnnt_loss_value, BRUTEFORCE_MAX_EVENTS};
pub use prediction::{LstmState, PredictionConfig, PredictionNet};
pub use wer::{edit_distance, wer, wer_text, WerTally};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BLANK: usize = 0;
/// Non-blank symbols: `a`–`z`, space, apostrophe.
pub const VOCAB_SIZE: usize = 28;

pub fn char_to_id(c: char) -> Option<usize> {
    match c {
        'a'..='z' => Some(c as usize - 'a' as usize + 1),
        ' ' => Some(27),
        '\'' => Some(28),
        _ => None,
    }
}

pub fn id_to_char(id: usize) -> Option<char> {
    match id {
        1..=26 => Some((b'a' + (id - 1) as u8) as char),
        27 => Some(' '),
        28 => Some('\''),
        _ => None,
    }
}

/// Non-blank token ids.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct LabelSequence {
    tokens: Vec<usize>,
}

impl LabelSequence {
    /// Validates every id against `1..=vocab`.
    pub fn new(tokens: Vec<usize>, vocab: usize) -> Result<Self> {
        if let Some(&bad) = tokens.iter().find(|&&t| t == BLANK || t > vocab) {
            return Err(Error::Vocabulary { token: bad, max: vocab });
        }
        Ok(Self { tokens })
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let tokens = text
            .chars()
            .map(|c| char_to_id(c.to_ascii_lowercase()).ok_or_else(|| Error::Format(format!("character {c:?} is not in the vocabulary"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { tokens })
    }

    pub fn to_text(&self) -> String {
        self.tokens.iter().filter_map(|&t| id_to_char(t)).collect()
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// `[T, U+1, V+1]` log-probabilities; every `(t, u)` slice is normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct RnntLattice {
    pub log_probs: Tensor,
}

impl RnntLattice {
    pub fn new(log_probs: Tensor) -> Result<Self> {
        let s = log_probs.shape();
        if s.len() != 3 || s[0] == 0 || s[1] == 0 || s[2] < 2 {
            return Err(Error::dim("RnntLattice", s, &[1, 1, 2]));
        }
        for (i, slice) in log_probs.data().chunks_exact(s[2]).enumerate() {
            let z = crate::tensor::logsumexp_slice(slice);
            if !(z.abs() <= 1e-9) {
                return Err(Error::Domain {
                    op: "RnntLattice",
                    reason: format!("slice {i} has log-normalizer {z}"),
                });
            }
        }
        Ok(Self { log_probs })
    }

    /// Uniform distribution over `symbols` at every node.
    pub fn uniform(t: usize, u: usize, symbols: usize) -> Self {
        Self {
            log_probs: Tensor::full([t, u + 1, symbols], -(symbols as f64).ln()),
        }
    }

    /// `(T, U+1, V+1)`
    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.log_probs.shape();
        (s[0], s[1], s[2])
    }

    pub fn at(&self, t: usize, u: usize, k: usize) -> f64 {
        let (_, u1, kk) = self.dims();
        self.log_probs.data()[(t * u1 + u) * kk + k]
    }
}

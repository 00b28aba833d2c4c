use crate::error::{Error, Result};

/// Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Word edit distance over reference length. May exceed 1.
pub fn wer<S: AsRef<str>>(reference: &[S], hypothesis: &[S]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::UndefinedMetric("WER of an empty reference".into()));
    }
    let r: Vec<&str> = reference.iter().map(AsRef::as_ref).collect();
    let h: Vec<&str> = hypothesis.iter().map(AsRef::as_ref).collect();
    Ok(edit_distance(&r, &h) as f64 / r.len() as f64)
}

/// [`wer`] on whitespace-separated text.
pub fn wer_text(reference: &str, hypothesis: &str) -> Result<f64> {
    let r: Vec<&str> = reference.split_whitespace().collect();
    let h: Vec<&str> = hypothesis.split_whitespace().collect();
    wer(&r, &h)
}

/// Corpus-level accumulator: total edits over total reference words.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct WerTally {
    pub edits: usize,
    pub words: usize,
}

impl WerTally {
    pub fn add(&mut self, reference: &str, hypothesis: &str) {
        let r: Vec<&str> = reference.split_whitespace().collect();
        let h: Vec<&str> = hypothesis.split_whitespace().collect();
        self.edits += edit_distance(&r, &h);
        self.words += r.len();
    }

    pub fn rate(&self) -> Result<f64> {
        if self.words == 0 {
            return Err(Error::UndefinedMetric("WER with no reference words".into()));
        }
        Ok(self.edits as f64 / self.words as f64)
    }
}

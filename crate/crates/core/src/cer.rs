//! Character error rate from a unit-cost Levenshtein alignment.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Edit counts of one aligned pair (or of a whole test set).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditCounts {
    pub insertions: usize,
    pub deletions: usize,
    pub substitutions: usize,
    pub ref_len: usize,
}

impl EditCounts {
    pub fn errors(&self) -> usize {
        self.insertions + self.deletions + self.substitutions
    }

    /// `(I + D + S) / N`. May exceed 1.
    pub fn cer(&self) -> f64 {
        if self.ref_len == 0 {
            return 0.0;
        }
        self.errors() as f64 / self.ref_len as f64
    }
}

impl core::ops::Add for EditCounts {
    type Output = EditCounts;
    fn add(self, o: EditCounts) -> EditCounts {
        EditCounts {
            insertions: self.insertions + o.insertions,
            deletions: self.deletions + o.deletions,
            substitutions: self.substitutions + o.substitutions,
            ref_len: self.ref_len + o.ref_len,
        }
    }
}

impl core::iter::Sum for EditCounts {
    fn sum<I: Iterator<Item = EditCounts>>(iter: I) -> Self {
        iter.fold(EditCounts::default(), |a, b| a + b)
    }
}

/// Aligns `hypothesis` to `reference` with minimum unit-cost edits.
///
/// Among optimal alignments the backtrace from the end prefers the diagonal
/// (match or substitution), then deletion, then insertion.
pub fn cer<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<EditCounts> {
    if reference.is_empty() {
        return Err(Error::EmptyReference);
    }
    let (n, m) = (reference.len(), hypothesis.len());
    let w = m + 1;
    let mut dist = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        dist[i * w] = i;
    }
    for (j, d) in dist.iter_mut().enumerate().take(m + 1) {
        *d = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let diag = dist[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            let del = dist[(i - 1) * w + j] + 1;
            let ins = dist[i * w + j - 1] + 1;
            dist[i * w + j] = diag.min(del).min(ins);
        }
    }

    let mut counts = EditCounts {
        ref_len: n,
        ..EditCounts::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = dist[i * w + j];
        if i > 0 && j > 0 {
            let sub = usize::from(reference[i - 1] != hypothesis[j - 1]);
            if dist[(i - 1) * w + j - 1] + sub == here {
                counts.substitutions += sub;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && dist[(i - 1) * w + j] + 1 == here {
            counts.deletions += 1;
            i -= 1;
        } else {
            counts.insertions += 1;
            j -= 1;
        }
    }
    Ok(counts)
}

/// Per-utterance counts plus their aggregate.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CerReport {
    pub total: EditCounts,
    pub per_utt: Vec<EditCounts>,
}

impl CerReport {
    pub fn from_counts(per_utt: Vec<EditCounts>) -> Self {
        let total = per_utt.iter().copied().sum();
        Self { total, per_utt }
    }

    pub fn cer(&self) -> f64 {
        self.total.cer()
    }
}

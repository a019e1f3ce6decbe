//! Levenshtein alignment counts and error rates.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditCounts {
    pub distance: usize,
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub reference_len: usize,
}

impl EditCounts {
    pub fn add(&mut self, other: &EditCounts) {
        self.distance += other.distance;
        self.substitutions += other.substitutions;
        self.insertions += other.insertions;
        self.deletions += other.deletions;
        self.reference_len += other.reference_len;
    }

    /// `distance / reference length`.
    pub fn rate(&self) -> Result<f64> {
        if self.reference_len == 0 {
            return Err(invalid("error rate of an empty reference"));
        }
        Ok(self.distance as f64 / self.reference_len as f64)
    }
}

/// Unit-cost edit distance of `hyp` against `reference`. Among optimal
/// alignments the backtrace prefers match/substitution, then deletion, then
/// insertion.
pub fn edit_distance<T: PartialEq>(hyp: &[T], reference: &[T]) -> EditCounts {
    let (n, m) = (reference.len(), hyp.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        d[i * w] = i;
        for j in 1..=m {
            let sub = d[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hyp[j - 1]);
            let del = d[(i - 1) * w + j] + 1;
            let ins = d[i * w + j - 1] + 1;
            d[i * w + j] = sub.min(del).min(ins);
        }
    }
    let mut c = EditCounts {
        distance: d[n * w + m],
        reference_len: n,
        ..Default::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let same = reference[i - 1] == hyp[j - 1];
            if here == d[(i - 1) * w + j - 1] + usize::from(!same) {
                c.substitutions += usize::from(!same);
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && here == d[(i - 1) * w + j] + 1 {
            c.deletions += 1;
            i -= 1;
        } else {
            c.insertions += 1;
            j -= 1;
        }
    }
    c
}

pub fn words(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}

/// Characters with whitespace removed.
pub fn chars(text: &str) -> Vec<char> {
    text.chars().filter(|c| !c.is_whitespace()).collect()
}

pub fn word_errors(hyp: &str, reference: &str) -> EditCounts {
    edit_distance(&words(hyp), &words(reference))
}

pub fn char_errors(hyp: &str, reference: &str) -> EditCounts {
    edit_distance(&chars(hyp), &chars(reference))
}

//! Levenshtein scoring of token sequences.

use serde::Serialize;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EditOp {
    Match { reference: usize, hypothesis: usize },
    Substitute { reference: usize, hypothesis: usize },
    Delete { reference: usize },
    Insert { hypothesis: usize },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct ErrorCounts {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub reference_len: usize,
}

impl ErrorCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    /// Error rate in percent; an empty reference scores 0 only if nothing
    /// was inserted.
    pub fn rate(&self) -> f64 {
        if self.reference_len == 0 {
            return if self.insertions == 0 { 0.0 } else { 100.0 };
        }
        100.0 * self.errors() as f64 / self.reference_len as f64
    }

    pub fn merge(&mut self, other: &ErrorCounts) {
        self.substitutions += other.substitutions;
        self.deletions += other.deletions;
        self.insertions += other.insertions;
        self.reference_len += other.reference_len;
    }
}

/// Minimum-edit alignment of `hyp` against `reference`, in order.
pub fn align<T: PartialEq>(reference: &[T], hyp: &[T]) -> Vec<EditOp> {
    let (n, m) = (reference.len(), hyp.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        d[i * w] = i;
    }
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hyp[j - 1]);
            d[i * w + j] = sub.min(d[(i - 1) * w + j] + 1).min(d[i * w + j - 1] + 1);
        }
    }
    let mut ops = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let same = reference[i - 1] == hyp[j - 1];
            if d[i * w + j] == d[(i - 1) * w + j - 1] + usize::from(!same) {
                ops.push(if same {
                    EditOp::Match { reference: i - 1, hypothesis: j - 1 }
                } else {
                    EditOp::Substitute { reference: i - 1, hypothesis: j - 1 }
                });
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[i * w + j] == d[(i - 1) * w + j] + 1 {
            ops.push(EditOp::Delete { reference: i - 1 });
            i -= 1;
        } else {
            ops.push(EditOp::Insert { hypothesis: j - 1 });
            j -= 1;
        }
    }
    ops.reverse();
    ops
}

pub fn wer<T: PartialEq>(reference: &[T], hyp: &[T]) -> ErrorCounts {
    let mut c = ErrorCounts {
        reference_len: reference.len(),
        ..Default::default()
    };
    for op in align(reference, hyp) {
        match op {
            EditOp::Match { .. } => {}
            EditOp::Substitute { .. } => c.substitutions += 1,
            EditOp::Delete { .. } => c.deletions += 1,
            EditOp::Insert { .. } => c.insertions += 1,
        }
    }
    c
}

/// For each reference position, whether the alignment matches it exactly.
pub fn matched_positions<T: PartialEq>(reference: &[T], hyp: &[T]) -> Vec<bool> {
    let mut hit = vec![false; reference.len()];
    for op in align(reference, hyp) {
        if let EditOp::Match { reference: r, .. } = op {
            hit[r] = true;
        }
    }
    hit
}

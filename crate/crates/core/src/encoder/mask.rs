/// Boolean query×key visibility matrix. Keys are laid out as
/// `[context columns; current frames]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    pub rows: usize,
    pub cols: usize,
    pub allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn full(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            allowed: vec![true; rows * cols],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.allowed[row * self.cols + col]
    }

    pub fn is_full(&self) -> bool {
        self.allowed.iter().all(|&a| a)
    }
}

/// Streaming visibility for `frames` queries over `context` cached columns
/// followed by the same `frames` keys: context is always visible, current
/// key `s` is visible from query `t` iff `s <= t + lookahead`.
pub fn build_streaming_mask(frames: usize, context: usize, lookahead: usize) -> AttentionMask {
    let cols = context + frames;
    let mut allowed = vec![false; frames * cols];
    for t in 0..frames {
        let row = &mut allowed[t * cols..(t + 1) * cols];
        row[..context].fill(true);
        let last = (t + lookahead).min(frames - 1);
        row[context..=context + last].fill(true);
    }
    AttentionMask {
        rows: frames,
        cols,
        allowed,
    }
}

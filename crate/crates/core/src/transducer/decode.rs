use super::loss::BLANK;
use crate::error::Result;

pub const DEFAULT_MAX_SYMBOLS: usize = 10;

/// What greedy search needs from a model: output scores at a frame given a
/// label-history state, and the state after emitting a label.
pub trait GreedyModel {
    type State;

    fn scores(&mut self, frame: usize, state: &Self::State) -> Result<Vec<f64>>;
    fn advance(&mut self, state: &Self::State, label: usize) -> Result<Self::State>;
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Frame-synchronous greedy search: emit the argmax until it is blank or
/// `max_symbols` labels were emitted at this frame, then move on.
pub fn greedy_decode<M: GreedyModel>(
    model: &mut M,
    frames: usize,
    max_symbols: usize,
    initial: M::State,
) -> Result<(Vec<usize>, M::State)> {
    let mut hyp = Vec::new();
    let mut state = initial;
    for t in 0..frames {
        for _ in 0..max_symbols {
            let k = argmax(&model.scores(t, &state)?);
            if k == BLANK {
                break;
            }
            state = model.advance(&state, k)?;
            hyp.push(k);
        }
    }
    Ok((hyp, state))
}

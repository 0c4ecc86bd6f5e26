//! Clip-aware minibatch planning: every batch slot works through whole
//! clips in start-time order, so the cached context of a slot is always the
//! true preceding utterance.

use serde::{Deserialize, Serialize};

use super::corpus::Corpus;
use crate::error::{Error, Result};
use crate::numerics::Rng;

/// RNG stream for per-epoch clip shuffling.
const PLAN_STREAM: u64 = 1 << 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotStep {
    pub utterance: usize,
    pub clip: usize,
    /// First utterance of a clip in this slot: its context must be cleared.
    pub reset: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchPlan {
    pub batch_size: usize,
    /// `steps[k][slot]`; `None` is padding.
    pub steps: Vec<Vec<Option<SlotStep>>>,
}

impl BatchPlan {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// The sequence of assignments one slot receives.
    pub fn slot(&self, slot: usize) -> impl Iterator<Item = SlotStep> + '_ {
        self.steps.iter().filter_map(move |s| s[slot])
    }
}

/// Plans clips given as lists of utterance indices (already in start-time
/// order). Clips are taken longest first, ties broken by a shuffled order.
pub fn plan_clips(clips: &[Vec<usize>], batch_size: usize, rng: &mut Rng) -> Result<BatchPlan> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if clips.iter().all(|c| c.is_empty()) {
        return Err(Error::EmptyCorpus);
    }
    let mut order: Vec<usize> = (0..clips.len()).filter(|&c| !clips[c].is_empty()).collect();
    rng.shuffle(&mut order);
    // Stable sort keeps the shuffled order among equal lengths.
    order.sort_by(|&a, &b| clips[b].len().cmp(&clips[a].len()));
    let mut queue = order.into_iter();
    let mut active: Vec<Option<(usize, usize)>> = vec![None; batch_size];
    let mut steps = Vec::new();
    loop {
        let mut row = vec![None; batch_size];
        let mut any = false;
        for (slot, state) in active.iter_mut().enumerate() {
            let mut reset = false;
            if state.is_none_or(|(c, pos)| pos >= clips[c].len()) {
                *state = queue.next().map(|c| (c, 0));
                reset = true;
            }
            if let Some((c, pos)) = state {
                row[slot] = Some(SlotStep {
                    utterance: clips[*c][*pos],
                    clip: *c,
                    reset,
                });
                *pos += 1;
                any = true;
            }
        }
        if !any {
            break;
        }
        steps.push(row);
    }
    Ok(BatchPlan { batch_size, steps })
}

/// Plan for one epoch of `corpus`; clip order is reshuffled every epoch.
pub fn serialize(corpus: &Corpus, batch_size: usize, seed: u64, epoch: u64) -> Result<BatchPlan> {
    if corpus.utterances.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let clips: Vec<Vec<usize>> = corpus.clips().into_iter().map(|c| c.utterances).collect();
    let mut rng = Rng::new(seed).fork(PLAN_STREAM + epoch);
    plan_clips(&clips, batch_size, &mut rng)
}

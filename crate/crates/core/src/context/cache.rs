use std::collections::VecDeque;

use crate::numerics::Tensor;

/// One previous utterance as seen by later utterances of the same clip.
#[derive(Clone, Debug, PartialEq)]
pub struct CacheEntry {
    pub clip_id: String,
    /// Per context layer: block outputs `[T×D]` for frame-level context or
    /// pooled `[L×D]` snapshots for pooled context.
    pub layers: Vec<Tensor>,
    /// Raw block outputs kept next to pooled snapshots so training can pool
    /// them again under the current parameters.
    pub frames: Option<Vec<Tensor>>,
    /// Final predictor hidden state `[1×P]`.
    pub predictor_state: Option<Tensor>,
}

impl CacheEntry {
    /// Number of values held per layer in `layers`.
    pub fn values_per_layer(&self) -> Vec<usize> {
        self.layers.iter().map(Tensor::numel).collect()
    }
}

/// Per batch-slot ring of at most `n_prev` previous utterances.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextCache {
    n_prev: usize,
    slots: Vec<VecDeque<CacheEntry>>,
}

impl ContextCache {
    pub fn new(batch_size: usize, n_prev: usize) -> Self {
        Self {
            n_prev,
            slots: vec![VecDeque::new(); batch_size],
        }
    }

    pub fn n_prev(&self) -> usize {
        self.n_prev
    }

    pub fn num_slots(&self) -> usize {
        self.slots.len()
    }

    /// Stores `entry`, evicting the oldest entries beyond `n_prev`. Entries
    /// of a different clip are dropped first since they can never be served.
    pub fn update(&mut self, slot: usize, entry: CacheEntry) {
        if self.n_prev == 0 {
            return;
        }
        let q = &mut self.slots[slot];
        q.retain(|e| e.clip_id == entry.clip_id);
        q.push_back(entry);
        while q.len() > self.n_prev {
            q.pop_front();
        }
    }

    /// Entries of `clip_id`, oldest first; anything from another clip is
    /// never returned.
    pub fn read(&self, slot: usize, clip_id: &str) -> Vec<&CacheEntry> {
        self.slots[slot].iter().filter(|e| e.clip_id == clip_id).collect()
    }

    pub fn clear(&mut self, slot: usize) {
        self.slots[slot].clear();
    }

    pub fn clear_all(&mut self) {
        for s in &mut self.slots {
            s.clear();
        }
    }

    pub fn entries(&self, slot: usize) -> impl Iterator<Item = &CacheEntry> {
        self.slots[slot].iter()
    }

    pub fn entries_mut(&mut self, slot: usize) -> impl Iterator<Item = &mut CacheEntry> {
        self.slots[slot].iter_mut()
    }

    /// Rebuilds a cache from checkpointed slot contents.
    pub fn from_slots(n_prev: usize, slots: Vec<Vec<CacheEntry>>) -> Self {
        Self {
            n_prev,
            slots: slots.into_iter().map(VecDeque::from).collect(),
        }
    }
}

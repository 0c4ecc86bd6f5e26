use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Optional per-label annotations carried by synthetic corpora.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotations {
    /// Raw-frame span `[start, end)` of every label.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alignment: Option<Vec<[usize; 2]>>,
    /// Label positions whose identity is only recoverable from the
    /// previous utterance.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub dependent: Vec<usize>,
    /// Label positions that disambiguate the next utterance.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub cues: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub clip_id: String,
    /// Seconds from the start of the clip.
    pub start_time: f64,
    /// `[T×F]`.
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub annotations: Annotations,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pub id: String,
    /// Utterance indices sorted by start time.
    pub utterances: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    /// Token strings; id 0 is blank.
    pub vocab: Vec<String>,
    pub utterances: Vec<Utterance>,
}

impl Corpus {
    pub fn feature_dim(&self) -> Option<usize> {
        self.utterances.first().map(|u| u.features.cols())
    }

    /// Clips in order of first appearance, each sorted by start time.
    pub fn clips(&self) -> Vec<Clip> {
        let mut clips: Vec<Clip> = Vec::new();
        let mut index = std::collections::HashMap::new();
        for (i, u) in self.utterances.iter().enumerate() {
            let k = *index.entry(u.clip_id.clone()).or_insert_with(|| {
                clips.push(Clip {
                    id: u.clip_id.clone(),
                    utterances: Vec::new(),
                });
                clips.len() - 1
            });
            clips[k].utterances.push(i);
        }
        for c in &mut clips {
            c.utterances
                .sort_by(|&a, &b| self.utterances[a].start_time.total_cmp(&self.utterances[b].start_time));
        }
        clips
    }

    /// Checks that every utterance is usable by a model with `feature_dim`
    /// inputs and `vocab_size` outputs.
    pub fn validate(&self, feature_dim: usize, vocab_size: usize) -> Result<()> {
        if self.utterances.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        if self.vocab.len() > vocab_size {
            return Err(Error::Config(format!(
                "corpus vocabulary has {} tokens but the model outputs {vocab_size}",
                self.vocab.len()
            )));
        }
        for u in &self.utterances {
            if u.features.cols() != feature_dim {
                return Err(Error::Config(format!(
                    "utterance in clip {} has feature dim {}, model expects {feature_dim}",
                    u.clip_id,
                    u.features.cols()
                )));
            }
            if let Some(i) = u.labels.iter().position(|&y| y == 0) {
                return Err(Error::BlankInLabels(i));
            }
            if let Some(&y) = u.labels.iter().find(|&&y| y >= vocab_size) {
                return Err(Error::Index {
                    what: "label",
                    index: y,
                    size: vocab_size,
                });
            }
        }
        Ok(())
    }

    /// Drops utterances shorter than `min_frames`; returns how many went.
    pub fn drop_short(&mut self, min_frames: usize) -> usize {
        let before = self.utterances.len();
        self.utterances.retain(|u| u.features.rows() >= min_frames);
        before - self.utterances.len()
    }
}

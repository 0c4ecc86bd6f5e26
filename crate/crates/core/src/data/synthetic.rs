//! Synthetic clips with a controllable cross-utterance dependency.
//!
//! Every utterance holds filler words and exactly one cue word `cue_j`.
//! With probability `dependency_prob` a later utterance also holds a
//! dependent word `dep_j` whose index equals the previous utterance's cue.
//! All dependent words share one acoustic template, so the previous
//! utterance is the only evidence for which one was said.

use serde::{Deserialize, Serialize};

use super::corpus::{Annotations, Corpus, Utterance};
use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

const TEMPLATE_STREAM: u64 = 11;
const CONTENT_STREAM: u64 = 12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub clips: usize,
    pub min_utterances: usize,
    pub max_utterances: usize,
    pub fillers: usize,
    /// Number of cue/dependent pairs, i.e. confusable alternatives.
    pub confusables: usize,
    pub dependency_prob: f64,
    pub min_fillers: usize,
    pub max_fillers: usize,
    pub min_token_frames: usize,
    pub max_token_frames: usize,
    /// Silence frames between tokens are drawn from `1..=max_gap_frames`.
    pub max_gap_frames: usize,
    pub feature_dim: usize,
    pub noise: f64,
    /// Frames per second, used for start times.
    pub frame_rate: f64,
    /// Seeds the token templates, independently of the content seed, so
    /// corpora drawn with different seeds share one acoustic inventory.
    pub template_seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            clips: 120,
            min_utterances: 3,
            max_utterances: 6,
            fillers: 6,
            confusables: 2,
            dependency_prob: 0.5,
            min_fillers: 1,
            max_fillers: 3,
            min_token_frames: 8,
            max_token_frames: 12,
            max_gap_frames: 2,
            feature_dim: 16,
            noise: 0.3,
            frame_rate: 100.0,
            template_seed: 0,
        }
    }
}

/// Token id layout of a synthetic vocabulary.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SyntheticVocab {
    pub fillers: usize,
    pub confusables: usize,
}

impl SyntheticVocab {
    pub fn size(&self) -> usize {
        1 + self.fillers + 2 * self.confusables
    }

    pub fn filler(&self, i: usize) -> usize {
        1 + i
    }

    pub fn cue(&self, j: usize) -> usize {
        1 + self.fillers + j
    }

    pub fn dependent(&self, j: usize) -> usize {
        1 + self.fillers + self.confusables + j
    }

    pub fn cue_index(&self, id: usize) -> Option<usize> {
        let base = 1 + self.fillers;
        (base..base + self.confusables).contains(&id).then(|| id - base)
    }

    pub fn dependent_index(&self, id: usize) -> Option<usize> {
        let base = 1 + self.fillers + self.confusables;
        (base..base + self.confusables).contains(&id).then(|| id - base)
    }

    pub fn tokens(&self) -> Vec<String> {
        let mut v = vec!["<blank>".to_string()];
        v.extend((0..self.fillers).map(|i| format!("w{i}")));
        v.extend((0..self.confusables).map(|j| format!("cue{j}")));
        v.extend((0..self.confusables).map(|j| format!("dep{j}")));
        v
    }

    /// Recovers the layout from a vocabulary written by [`generate`].
    pub fn from_tokens(tokens: &[String]) -> Option<Self> {
        let count = |p: &str| tokens.iter().filter(|t| t.starts_with(p)).count();
        let v = Self {
            fillers: count("w"),
            confusables: count("cue"),
        };
        (v.tokens() == tokens).then_some(v)
    }
}

impl SyntheticSpec {
    pub fn vocab(&self) -> SyntheticVocab {
        SyntheticVocab {
            fillers: self.fillers,
            confusables: self.confusables,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("synthetic corpus: {m}")));
        if self.clips == 0 || self.min_utterances == 0 || self.min_utterances > self.max_utterances {
            return fail("need clips >= 1 and 1 <= min_utterances <= max_utterances");
        }
        if self.fillers < 2 || self.confusables == 0 {
            return fail("need at least two fillers and one confusable pair");
        }
        if self.min_fillers > self.max_fillers || self.min_token_frames == 0 || self.min_token_frames > self.max_token_frames {
            return fail("inconsistent filler or token-length ranges");
        }
        if self.max_gap_frames == 0 || self.feature_dim == 0 || self.frame_rate <= 0.0 {
            return fail("gap frames, feature dim and frame rate must be positive");
        }
        if !(0.0..=1.0).contains(&self.dependency_prob) || self.noise < 0.0 {
            return fail("dependency_prob must be in [0, 1] and noise non-negative");
        }
        Ok(())
    }

    /// One template per token id; all dependent tokens share a template.
    pub fn templates(&self) -> Vec<Vec<f64>> {
        let v = self.vocab();
        let mut rng = Rng::new(self.template_seed).fork(TEMPLATE_STREAM);
        let mut t: Vec<Vec<f64>> = (0..v.size())
            .map(|_| (0..self.feature_dim).map(|_| rng.normal()).collect())
            .collect();
        t[0] = vec![0.0; self.feature_dim];
        let shared = t[v.dependent(0)].clone();
        for j in 1..self.confusables {
            t[v.dependent(j)] = shared.clone();
        }
        t
    }
}

/// Deterministic corpus for `seed`; the seed picks content, not templates.
pub fn generate(spec: &SyntheticSpec, seed: u64) -> Result<Corpus> {
    spec.validate()?;
    let v = spec.vocab();
    let templates = spec.templates();
    let mut rng = Rng::new(seed).fork(CONTENT_STREAM);
    let mut utterances = Vec::new();
    for c in 0..spec.clips {
        let clip_id = format!("clip{c:04}");
        let n = rng.range(spec.min_utterances, spec.max_utterances);
        let mut prev_cue: Option<usize> = None;
        let mut clock = 0usize;
        for _ in 0..n {
            let mut tokens = Vec::new();
            let fillers = rng.range(spec.min_fillers, spec.max_fillers);
            for _ in 0..fillers {
                tokens.push(v.filler(rng.below(spec.fillers)));
            }
            let cue = rng.below(spec.confusables);
            tokens.insert(rng.range(0, tokens.len()), v.cue(cue));
            if let Some(p) = prev_cue {
                if rng.bernoulli(spec.dependency_prob) {
                    tokens.insert(rng.range(0, tokens.len()), v.dependent(p));
                }
            }
            // Adjacent duplicates would be indistinguishable from one long token.
            for i in 1..tokens.len() {
                if tokens[i] == tokens[i - 1] {
                    let f = v.filler(0);
                    tokens[i] = if tokens[i] == f { v.filler(1) } else { f };
                }
            }
            let mut frames: Vec<f64> = Vec::new();
            let mut alignment = Vec::with_capacity(tokens.len());
            let push_frames = |frames: &mut Vec<f64>, rng: &mut Rng, id: usize, count: usize| {
                for _ in 0..count {
                    for &m in &templates[id] {
                        frames.push(((m + spec.noise * rng.normal()) as f32) as f64);
                    }
                }
            };
            let lead = rng.range(1, spec.max_gap_frames);
            push_frames(&mut frames, &mut rng, 0, lead);
            for &id in &tokens {
                let start = frames.len() / spec.feature_dim;
                let len = rng.range(spec.min_token_frames, spec.max_token_frames);
                push_frames(&mut frames, &mut rng, id, len);
                alignment.push([start, start + len]);
                let gap = rng.range(1, spec.max_gap_frames);
                push_frames(&mut frames, &mut rng, 0, gap);
            }
            let t = frames.len() / spec.feature_dim;
            let annotations = Annotations {
                alignment: Some(alignment),
                dependent: tokens.iter().enumerate().filter(|(_, &y)| v.dependent_index(y).is_some()).map(|(i, _)| i).collect(),
                cues: tokens.iter().enumerate().filter(|(_, &y)| v.cue_index(y).is_some()).map(|(i, _)| i).collect(),
            };
            utterances.push(Utterance {
                clip_id: clip_id.clone(),
                start_time: clock as f64 / spec.frame_rate,
                features: Tensor::matrix(t, spec.feature_dim, frames),
                labels: tokens,
                annotations,
            });
            clock += t + rng.range(10, 50);
            prev_cue = Some(cue);
        }
    }
    Ok(Corpus {
        vocab: v.tokens(),
        utterances,
    })
}

//! Greedy-decoding evaluation in clip order with the decoded history
//! feeding the context cache.

use serde::{Deserialize, Serialize};

use crate::context::ContextCache;
use crate::data::Corpus;
use crate::encoder::ContextMode;
use crate::error::{Error, Result};
use crate::transducer::{align, EditOp, ErrorCounts, Transducer};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EvalOptions {
    /// Empty the cache before every utterance (context ablation).
    pub clear_cache: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TokenStats {
    pub total: usize,
    pub correct: usize,
    pub substituted: usize,
    pub deleted: usize,
    /// Percent of `total` decoded exactly.
    pub accuracy: f64,
}

impl TokenStats {
    fn finish(&mut self) {
        self.accuracy = if self.total == 0 {
            0.0
        } else {
            100.0 * self.correct as f64 / self.total as f64
        };
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub context_mode: ContextMode,
    pub cleared_cache: bool,
    pub clips: usize,
    pub utterances: usize,
    /// Token error rate in percent.
    pub wer: f64,
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub tokens: TokenStats,
    /// Tokens annotated as depending on the previous utterance.
    pub dependent: TokenStats,
    pub cues: TokenStats,
}

pub fn evaluate(model: &Transducer, corpus: &Corpus, opts: EvalOptions) -> Result<EvalReport> {
    if corpus.utterances.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let clips = corpus.clips();
    let mut errors = ErrorCounts::default();
    let mut tokens = TokenStats::default();
    let mut dependent = TokenStats::default();
    let mut cues = TokenStats::default();
    for clip in &clips {
        let mut cache = ContextCache::new(1, model.config.context.n_prev);
        for &u in &clip.utterances {
            let utt = &corpus.utterances[u];
            if opts.clear_cache {
                cache.clear(0);
            }
            let decoded = model.decode(&utt.features, &cache.read(0, &clip.id), Some(&utt.labels))?;
            let entry = model.cache_entry(&clip.id, &decoded.layers, Some(decoded.predictor_state), false)?;
            cache.update(0, entry);
            let ops = align(&utt.labels, &decoded.hypothesis);
            let mut outcome = vec![Outcome::Deleted; utt.labels.len()];
            errors.reference_len += utt.labels.len();
            for op in ops {
                match op {
                    EditOp::Match { reference, .. } => outcome[reference] = Outcome::Correct,
                    EditOp::Substitute { reference, .. } => {
                        outcome[reference] = Outcome::Substituted;
                        errors.substitutions += 1;
                    }
                    EditOp::Delete { .. } => errors.deletions += 1,
                    EditOp::Insert { .. } => errors.insertions += 1,
                }
            }
            for (i, o) in outcome.iter().enumerate() {
                tokens.add(*o);
                if utt.annotations.dependent.contains(&i) {
                    dependent.add(*o);
                }
                if utt.annotations.cues.contains(&i) {
                    cues.add(*o);
                }
            }
        }
    }
    for s in [&mut tokens, &mut dependent, &mut cues] {
        s.finish();
    }
    Ok(EvalReport {
        context_mode: model.mode(),
        cleared_cache: opts.clear_cache,
        clips: clips.len(),
        utterances: corpus.utterances.len(),
        wer: errors.rate(),
        substitutions: errors.substitutions,
        deletions: errors.deletions,
        insertions: errors.insertions,
        tokens,
        dependent,
        cues,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Outcome {
    Correct,
    Substituted,
    Deleted,
}

impl TokenStats {
    fn add(&mut self, o: Outcome) {
        self.total += 1;
        match o {
            Outcome::Correct => self.correct += 1,
            Outcome::Substituted => self.substituted += 1,
            Outcome::Deleted => self.deleted += 1,
        }
    }
}

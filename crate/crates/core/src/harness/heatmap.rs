//! Pooling weights of every utterance in a clip, as served to the next
//! utterance, exported as CSV (rows: pooled slots, columns: frames).

use std::fmt::Write as _;

use crate::context::ContextCache;
use crate::data::Corpus;
use crate::encoder::ContextMode;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::transducer::Transducer;

/// Raw frames per encoder frame.
const STRIDE: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub clip_id: String,
    /// Position of the pooled utterance within its clip.
    pub utterance: usize,
    /// Index into the context layers.
    pub layer: usize,
    /// `[L×T]`, each row sums to one.
    pub weights: Tensor,
    /// Token under each column, `""` for silence; present when the corpus
    /// has alignments.
    pub tokens: Option<Vec<String>>,
    /// Reference position of the token under each column.
    pub positions: Option<Vec<Option<usize>>>,
}

impl Heatmap {
    /// CSV text: a header of frame indices, an optional token row, then one
    /// row per pooled slot.
    pub fn to_csv(&self) -> String {
        let w = &self.weights;
        let mut s = String::from("slot");
        for t in 0..w.cols() {
            let _ = write!(s, ",{t}");
        }
        s.push('\n');
        if let Some(tokens) = &self.tokens {
            s.push_str("token");
            for t in tokens {
                let _ = write!(s, ",{t}");
            }
            s.push('\n');
        }
        for l in 0..w.rows() {
            let _ = write!(s, "{l}");
            for v in w.row(l) {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }

    pub fn file_name(&self) -> String {
        format!("{}_utt{}_layer{}.csv", self.clip_id, self.utterance, self.layer)
    }

    /// Summed weight over the columns of each reference token.
    pub fn token_mass(&self, num_tokens: usize) -> Option<Vec<f64>> {
        let positions = self.positions.as_ref()?;
        let mut mass = vec![0.0; num_tokens];
        for l in 0..self.weights.rows() {
            for (t, &w) in self.weights.row(l).iter().enumerate() {
                if let Some(p) = positions[t] {
                    mass[p] += w;
                }
            }
        }
        Some(mass)
    }
}

/// Reference token position under encoder frame `t`, judged by the raw
/// frame at the centre of its receptive field.
fn column_position(alignment: &[[usize; 2]], t: usize) -> Option<usize> {
    let centre = STRIDE * t;
    alignment.iter().position(|&[s, e]| s <= centre && centre < e)
}

/// Decodes the clip in order (so each utterance sees its true context) and
/// returns the pooling weights of every utterance for every context layer.
pub fn export_heatmaps(model: &Transducer, corpus: &Corpus, clip_id: &str) -> Result<Vec<Heatmap>> {
    if model.mode() != ContextMode::Pooled {
        return Err(Error::Config(format!(
            "heatmaps need the pooled context mode, model uses {}",
            model.mode()
        )));
    }
    let clip = corpus
        .clips()
        .into_iter()
        .find(|c| c.id == clip_id)
        .ok_or_else(|| Error::Config(format!("no clip named {clip_id:?}")))?;
    let blocks = model.context_blocks();
    let mut cache = ContextCache::new(1, model.config.context.n_prev);
    let mut out = Vec::new();
    for (i, &u) in clip.utterances.iter().enumerate() {
        let utt = &corpus.utterances[u];
        let decoded = model.decode(&utt.features, &cache.read(0, clip_id), Some(&utt.labels))?;
        for (k, &b) in blocks.iter().enumerate() {
            let (_, weights) = model.pool_history(k, &decoded.layers[b])?;
            let alignment = utt.annotations.alignment.as_deref();
            let positions: Option<Vec<Option<usize>>> =
                alignment.map(|a| (0..weights.cols()).map(|t| column_position(a, t)).collect());
            let tokens = positions.as_ref().map(|p| {
                p.iter()
                    .map(|p| match p {
                        Some(j) => corpus
                            .vocab
                            .get(utt.labels[*j])
                            .cloned()
                            .unwrap_or_else(|| utt.labels[*j].to_string()),
                        None => String::new(),
                    })
                    .collect()
            });
            out.push(Heatmap {
                clip_id: clip_id.to_string(),
                utterance: i,
                layer: k,
                weights,
                tokens,
                positions,
            });
        }
        let entry = model.cache_entry(clip_id, &decoded.layers, Some(decoded.predictor_state), false)?;
        cache.update(0, entry);
    }
    Ok(out)
}

/// Fraction of utterances with a cue whose cue columns carry the largest
/// summed weight, per the annotations. Returns `(localized, total)`.
pub fn cue_localization(heatmaps: &[Heatmap], corpus: &Corpus) -> (usize, usize) {
    let clips = corpus.clips();
    let mut hit = 0;
    let mut total = 0;
    for h in heatmaps {
        let Some(clip) = clips.iter().find(|c| c.id == h.clip_id) else { continue };
        let utt = &corpus.utterances[clip.utterances[h.utterance]];
        let Some(&cue) = utt.annotations.cues.first() else { continue };
        let Some(mass) = h.token_mass(utt.labels.len()) else { continue };
        total += 1;
        let best = mass
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(j, _)| j);
        if best == Some(cue) {
            hit += 1;
        }
    }
    (hit, total)
}

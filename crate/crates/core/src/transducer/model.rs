use serde::{Deserialize, Serialize};

use super::decode::{greedy_decode, GreedyModel, DEFAULT_MAX_SYMBOLS};
use super::joint::Joint;
use super::loss::rnnt_loss;
use crate::context::{context_rows, AttentionPool, CacheEntry};
use crate::encoder::{ContextMode, Encoder, EncoderConfig, EncoderTrace};
use crate::error::{Error, Result};
use crate::numerics::layers::LstmState;
use crate::numerics::{Ctx, ParamStore, Rng, Tensor, Var};
use crate::predictor::{Predictor, PredictorConfig};

/// RNG stream reserved for parameter initialisation.
const INIT_STREAM: u64 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContextConfig {
    /// Previous utterances kept per batch slot.
    pub n_prev: usize,
    /// Rows `L` of each pooled context block.
    pub pool_slots: usize,
    /// One pooling projection for all context layers instead of one each.
    pub shared_pooling: bool,
    /// During training, pool the cached block outputs with the current
    /// pooling parameters so the projection receives gradient; evaluation
    /// always serves the stored snapshot.
    pub repool_in_training: bool,
    /// Carry the predictor state computed from reference labels rather than
    /// from the decoded hypothesis during evaluation.
    pub eval_reference_labels: bool,
}

impl Default for ContextConfig {
    fn default() -> Self {
        Self {
            n_prev: 1,
            pool_slots: 4,
            shared_pooling: false,
            repool_in_training: true,
            eval_reference_labels: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub predictor: PredictorConfig,
    pub joint_dim: usize,
    pub context: ContextConfig,
    /// Output classes including blank.
    pub vocab_size: usize,
    pub max_symbols_per_frame: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    pub fn paper() -> Self {
        Self {
            encoder: EncoderConfig::paper(),
            predictor: PredictorConfig::paper(),
            joint_dim: 512,
            context: ContextConfig {
                pool_slots: 16,
                ..ContextConfig::default()
            },
            vocab_size: 5000,
            max_symbols_per_frame: DEFAULT_MAX_SYMBOLS,
        }
    }

    pub fn desk() -> Self {
        Self {
            encoder: EncoderConfig::desk(),
            predictor: PredictorConfig::desk(),
            joint_dim: 32,
            context: ContextConfig::default(),
            vocab_size: 16,
            max_symbols_per_frame: DEFAULT_MAX_SYMBOLS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.vocab_size < 2 {
            return Err(Error::Config("vocab_size must include blank and one token".into()));
        }
        if self.joint_dim == 0 || self.predictor.hidden == 0 || self.predictor.embed_dim == 0 {
            return Err(Error::Config("joint and predictor sizes must be positive".into()));
        }
        if self.encoder.context_mode != ContextMode::None && self.context.n_prev == 0 {
            return Err(Error::Config("context mode needs n_prev >= 1".into()));
        }
        if self.context.pool_slots == 0 {
            return Err(Error::Config("pool_slots must be positive".into()));
        }
        if self.max_symbols_per_frame == 0 {
            return Err(Error::Config("max_symbols_per_frame must be positive".into()));
        }
        Ok(())
    }
}

/// How cached tensors enter the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CacheInput {
    /// A gradient-recording leaf followed by a stop-gradient, so a probe
    /// can confirm that nothing flows back into the cache.
    Detached,
    /// Plain constants.
    Constant,
}

/// Context inputs of one utterance.
pub struct UtteranceContext {
    /// Per encoder block.
    pub layers: Vec<Option<Var>>,
    pub predictor: Option<Var>,
    /// Leaves created for cached tensors (empty for [`CacheInput::Constant`]).
    pub leaves: Vec<Var>,
    /// Pooling weights computed on the tape, per context layer per entry.
    pub pool_weights: Vec<Vec<Var>>,
}

pub struct BatchItem<'a> {
    pub features: &'a Tensor,
    pub labels: &'a [usize],
    /// Cached entries this utterance may use, oldest first.
    pub entries: Vec<&'a CacheEntry>,
}

pub struct BatchForward {
    /// Sum of utterance losses divided by the total label count.
    pub loss: Var,
    pub utterance_losses: Vec<f64>,
    pub total_labels: usize,
    pub traces: Vec<EncoderTrace>,
    pub predictor_final: Vec<Var>,
    pub contexts: Vec<UtteranceContext>,
}

pub struct Decoded {
    pub hypothesis: Vec<usize>,
    /// Output of every encoder block.
    pub layers: Vec<Tensor>,
    pub predictor_state: Tensor,
}

#[derive(Clone, Debug)]
pub struct Transducer {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub pools: Vec<AttentionPool>,
    pub predictor: Predictor,
    pub joint: Joint,
}

impl Transducer {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = Rng::new(seed).fork(INIT_STREAM);
        let encoder = Encoder::new(&mut store, &mut rng, &config.encoder)?;
        let n_pools = if config.context.shared_pooling {
            1
        } else {
            config.encoder.context_blocks().len()
        };
        let d = config.encoder.dim;
        let pools = (0..n_pools)
            .map(|k| AttentionPool::new(&mut store, &mut rng, &format!("context.pool{k}"), config.context.pool_slots, d))
            .collect::<Result<_>>()?;
        let predictor = Predictor::new(&mut store, &mut rng, config.vocab_size, &config.predictor)?;
        let joint = Joint::new(
            &mut store,
            &mut rng,
            d,
            config.predictor.hidden,
            config.joint_dim,
            config.vocab_size,
        )?;
        Ok(Self {
            config,
            store,
            encoder,
            pools,
            predictor,
            joint,
        })
    }

    pub fn mode(&self) -> ContextMode {
        self.config.encoder.context_mode
    }

    pub fn context_blocks(&self) -> Vec<usize> {
        self.config.encoder.context_blocks()
    }

    /// Pooling layer used for the `k`-th context layer.
    pub fn pool(&self, k: usize) -> &AttentionPool {
        if self.config.context.shared_pooling {
            &self.pools[0]
        } else {
            &self.pools[k]
        }
    }

    fn cache_leaf(ctx: &mut Ctx, t: &Tensor, input: CacheInput, leaves: &mut Vec<Var>) -> Var {
        match input {
            CacheInput::Constant => ctx.graph.constant(t.clone()),
            CacheInput::Detached => {
                let leaf = ctx.graph.input(t.clone());
                leaves.push(leaf);
                ctx.graph.stop_gradient(leaf)
            }
        }
    }

    /// Turns cached entries into per-block context rows and the predictor
    /// carry input, for every utterance of a batch.
    pub fn build_contexts(
        &self,
        ctx: &mut Ctx,
        entries: &[Vec<&CacheEntry>],
        input: CacheInput,
    ) -> Result<Vec<UtteranceContext>> {
        let blocks = self.context_blocks();
        let num_blocks = self.config.encoder.num_blocks;
        let mode = self.mode();
        let mut out: Vec<UtteranceContext> = entries
            .iter()
            .map(|_| UtteranceContext {
                layers: vec![None; num_blocks],
                predictor: None,
                leaves: Vec::new(),
                pool_weights: vec![Vec::new(); blocks.len()],
            })
            .collect();
        if mode == ContextMode::None {
            return Ok(out);
        }
        let live = ctx.training && self.config.context.repool_in_training && mode == ContextMode::Pooled;
        for (k, &block) in blocks.iter().enumerate() {
            // Rows per utterance in entry order, filled in two passes so that
            // live pooling can normalise over the whole batch at once.
            let mut rows: Vec<Vec<Option<Var>>> = entries.iter().map(|e| vec![None; e.len()]).collect();
            let mut live_inputs = Vec::new();
            let mut live_index = Vec::new();
            for (i, list) in entries.iter().enumerate() {
                for (j, entry) in list.iter().enumerate() {
                    let stored = entry.layers.get(k).ok_or_else(|| {
                        Error::Config(format!("cache entry has {} layers, need {}", entry.layers.len(), blocks.len()))
                    })?;
                    match entry.frames.as_ref().and_then(|f| f.get(k)).filter(|_| live) {
                        Some(frames) => {
                            let v = Self::cache_leaf(ctx, frames, input, &mut out[i].leaves);
                            live_inputs.push(v);
                            live_index.push((i, j));
                        }
                        None => {
                            let v = Self::cache_leaf(ctx, stored, input, &mut out[i].leaves);
                            rows[i][j] = Some(v);
                        }
                    }
                }
            }
            if !live_inputs.is_empty() {
                let pooled = self.pool(k).forward_many(ctx, &live_inputs)?;
                for (p, (i, j)) in pooled.into_iter().zip(live_index) {
                    rows[i][j] = Some(p.pooled);
                    out[i].pool_weights[k].push(p.weights);
                }
            }
            for (i, r) in rows.into_iter().enumerate() {
                let r: Vec<Var> = r.into_iter().map(|v| v.expect("every entry filled")).collect();
                out[i].layers[block] = context_rows(&mut ctx.graph, &r)?;
            }
        }
        if self.config.predictor.carry_state {
            for (i, list) in entries.iter().enumerate() {
                if let Some(state) = list.last().and_then(|e| e.predictor_state.as_ref()) {
                    let v = Self::cache_leaf(ctx, state, input, &mut out[i].leaves);
                    out[i].predictor = Some(v);
                }
            }
        }
        Ok(out)
    }

    /// Loss of a batch of utterances, each with its own cached context.
    pub fn forward_batch(&self, ctx: &mut Ctx, items: &[BatchItem], input: CacheInput) -> Result<BatchForward> {
        if items.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let entries: Vec<Vec<&CacheEntry>> = items.iter().map(|it| it.entries.clone()).collect();
        let contexts = self.build_contexts(ctx, &entries, input)?;
        let features: Vec<&Tensor> = items.iter().map(|it| it.features).collect();
        let layer_ctx: Vec<Vec<Option<Var>>> = contexts.iter().map(|c| c.layers.clone()).collect();
        let traces = self.encoder.encode_many(ctx, &features, &layer_ctx)?;
        let mut total = None;
        let mut utterance_losses = Vec::with_capacity(items.len());
        let mut predictor_final = Vec::with_capacity(items.len());
        let mut total_labels = 0;
        for ((item, trace), c) in items.iter().zip(&traces).zip(&contexts) {
            let pred = self.predictor.predict_sequence(ctx, item.labels, c.predictor)?;
            let h = trace.output();
            let frames = ctx.graph.value(h).rows();
            let logits = self.joint.forward(ctx, h, pred.outputs)?;
            let (loss, lattice) = rnnt_loss(&mut ctx.graph, logits, frames, item.labels)?;
            utterance_losses.push(lattice.loss());
            total_labels += item.labels.len();
            predictor_final.push(pred.final_hidden);
            total = Some(match total {
                None => loss,
                Some(t) => ctx.graph.add(t, loss)?,
            });
        }
        let total = total.expect("non-empty batch");
        let loss = ctx.graph.scale(total, 1.0 / total_labels.max(1) as f64);
        Ok(BatchForward {
            loss,
            utterance_losses,
            total_labels,
            traces,
            predictor_final,
            contexts,
        })
    }

    /// Eval-mode pooling of one history through the `k`-th context layer's
    /// pool. Returns `(pooled [L×D], weights [L×T])`.
    pub fn pool_history(&self, k: usize, h: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut ctx = Ctx::eval(&self.store);
        let v = ctx.graph.constant(h.clone());
        let p = self.pool(k).forward(&mut ctx, v)?;
        Ok((ctx.graph.value(p.pooled).clone(), ctx.graph.value(p.weights).clone()))
    }

    /// Packs one utterance's block outputs into a cache entry for the
    /// current context mode. Pooled snapshots use the current parameters.
    pub fn cache_entry(
        &self,
        clip_id: &str,
        block_outputs: &[Tensor],
        predictor_state: Option<Tensor>,
        keep_frames: bool,
    ) -> Result<CacheEntry> {
        let blocks = self.context_blocks();
        let raw: Vec<Tensor> = blocks
            .iter()
            .map(|&b| {
                block_outputs
                    .get(b)
                    .cloned()
                    .ok_or_else(|| Error::Config(format!("missing output of block {b}")))
            })
            .collect::<Result<_>>()?;
        let (layers, frames) = match self.mode() {
            ContextMode::None => (Vec::new(), None),
            ContextMode::FrameConcat => (raw, None),
            ContextMode::Pooled => {
                let pooled = raw
                    .iter()
                    .enumerate()
                    .map(|(k, h)| Ok(self.pool_history(k, h)?.0))
                    .collect::<Result<_>>()?;
                (pooled, keep_frames.then_some(raw))
            }
        };
        Ok(CacheEntry {
            clip_id: clip_id.to_string(),
            layers,
            frames,
            predictor_state,
        })
    }

    /// Greedy decoding of one utterance given its cached context.
    pub fn decode(&self, features: &Tensor, entries: &[&CacheEntry], reference: Option<&[usize]>) -> Result<Decoded> {
        let mut ctx = Ctx::eval(&self.store);
        let contexts = self.build_contexts(&mut ctx, &[entries.to_vec()], CacheInput::Constant)?;
        let c = &contexts[0];
        let trace = self.encoder.encode(&mut ctx, features, &c.layers)?;
        let h = trace.output();
        let frames = ctx.graph.value(h).rows();
        let enc = self.joint.enc.forward(&mut ctx, h)?;
        let carry = self.predictor.carry(&mut ctx, c.predictor);
        let layers = trace.layers.iter().map(|&v| ctx.graph.value(v).clone()).collect();
        let mut search = Search {
            ctx: &mut ctx,
            model: self,
            enc,
            carry,
        };
        let start = search.start()?;
        let (hypothesis, last) = greedy_decode(&mut search, frames, self.config.max_symbols_per_frame, start)?;
        let predictor_state = match reference {
            Some(labels) if self.config.context.eval_reference_labels => {
                let out = self.predictor.predict_sequence(&mut ctx, labels, Some(carry))?;
                ctx.graph.value(out.final_hidden).clone()
            }
            _ => ctx.graph.value(last.0.h).clone(),
        };
        Ok(Decoded {
            hypothesis,
            layers,
            predictor_state,
        })
    }
}

struct Search<'c, 'p> {
    ctx: &'c mut Ctx<'p>,
    model: &'c Transducer,
    enc: Var,
    carry: Var,
}

impl Search<'_, '_> {
    fn start(&mut self) -> Result<(LstmState, Var)> {
        let p = &self.model.predictor;
        let s0 = p.initial_state(self.ctx);
        let s = p.step(self.ctx, None, self.carry, s0)?;
        let proj = self.model.joint.pred.forward(self.ctx, s.h)?;
        Ok((s, proj))
    }
}

impl GreedyModel for Search<'_, '_> {
    type State = (LstmState, Var);

    fn scores(&mut self, frame: usize, state: &Self::State) -> Result<Vec<f64>> {
        let a = self.ctx.graph.slice_rows(self.enc, frame, 1)?;
        let logits = self.model.joint.combine(self.ctx, a, state.1)?;
        Ok(self.ctx.graph.value(logits).data().to_vec())
    }

    fn advance(&mut self, state: &Self::State, label: usize) -> Result<Self::State> {
        let s = self.model.predictor.step(self.ctx, Some(label), self.carry, state.0)?;
        let proj = self.model.joint.pred.forward(self.ctx, s.h)?;
        Ok((s, proj))
    }
}

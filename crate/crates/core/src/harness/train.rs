//! Serialized training: cache read, forward, backward, cache update,
//! optimizer step, with bit-exact checkpoint and resume.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::ExperimentConfig;
use crate::context::{CacheEntry, ContextCache};
use crate::data::{serialize, BatchPlan, Corpus};
use crate::encoder::{ContextMode, MIN_FRAMES};
use crate::error::{Error, Result};
use crate::numerics::layers::{apply_bn_updates, BnUpdate};
use crate::numerics::optim::{learning_rate, Adam, Optimizer, OptimizerKind};
use crate::numerics::{Ctx, Rng, RngState, Tensor};
use crate::transducer::{BatchItem, CacheInput, Transducer};

/// RNG stream for dropout masks.
const DROPOUT_STREAM: u64 = 2;

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub wall_ms: Option<f64>,
}

/// Gradients of one batch, before any optimizer sees them.
pub struct BatchGradients {
    pub loss: f64,
    /// Per parameter, in store order.
    pub params: Vec<Tensor>,
    /// Gradient reaching each cached-tensor leaf (`None`: nothing arrived).
    pub cache_leaves: Vec<Option<Tensor>>,
    /// Block outputs per item, for the cache.
    pub block_outputs: Vec<Vec<Tensor>>,
    /// Final predictor hidden state per item.
    pub predictor_final: Vec<Tensor>,
    pub bn_updates: Vec<BnUpdate>,
    pub rng: Option<Rng>,
}

/// Forward and backward of one batch in training mode. Parameter gradients
/// are returned rather than written to the store.
pub fn batch_gradients(
    model: &Transducer,
    items: &[BatchItem],
    input: CacheInput,
    dropout_rng: Option<Rng>,
) -> Result<BatchGradients> {
    let mut ctx = Ctx::train(&model.store, model.config.encoder.dropout, dropout_rng);
    let fwd = model.forward_batch(&mut ctx, items, input)?;
    let loss = ctx.graph.value(fwd.loss).data()[0];
    if !loss.is_finite() {
        return Err(Error::NonFinite("training loss"));
    }
    ctx.graph.backward(fwd.loss)?;
    let block_outputs = fwd
        .traces
        .iter()
        .map(|t| t.layers.iter().map(|&v| ctx.graph.value(v).clone()).collect())
        .collect();
    let predictor_final = fwd.predictor_final.iter().map(|&v| ctx.graph.value(v).clone()).collect();
    let leaves: Vec<_> = fwd.contexts.iter().flat_map(|c| c.leaves.iter().copied()).collect();
    let (graph, bn_updates, rng) = ctx.finish();
    let cache_leaves = leaves.iter().map(|&v| graph.grad(v).cloned()).collect();
    let mut scratch = model.store.clone();
    scratch.zero_grad();
    graph.accumulate_param_grads(&mut scratch);
    Ok(BatchGradients {
        loss,
        params: scratch.iter().map(|p| p.grad.clone()).collect(),
        cache_leaves,
        block_outputs,
        predictor_final,
        bn_updates,
        rng,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CacheMeta {
    clip_id: String,
    layers: usize,
    frames: bool,
    predictor: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainHeader {
    pub config: ExperimentConfig,
    pub vocab: Vec<String>,
    pub step: u64,
    pub epoch: u64,
    pub step_in_epoch: usize,
    pub rng: RngState,
    pub optimizer: OptimizerKind,
    pub adam_step: u64,
    cache: Vec<Vec<CacheMeta>>,
}

pub struct Trainer {
    pub config: ExperimentConfig,
    pub vocab: Vec<String>,
    pub model: Transducer,
    pub optimizer: Optimizer,
    pub cache: ContextCache,
    pub rng: Rng,
    /// Optimizer steps taken so far.
    pub step: u64,
    pub epoch: u64,
    pub step_in_epoch: usize,
    plan: Option<(u64, BatchPlan)>,
}

impl Trainer {
    pub fn new(config: ExperimentConfig, vocab: Vec<String>) -> Result<Self> {
        config.validate()?;
        let model = Transducer::new(config.model.clone(), config.seed)?;
        let optimizer = Optimizer::new(config.train.optimizer, &model.store);
        Ok(Self {
            cache: ContextCache::new(config.train.batch_size, config.model.context.n_prev),
            rng: Rng::new(config.seed).fork(DROPOUT_STREAM),
            config,
            vocab,
            model,
            optimizer,
            step: 0,
            epoch: 0,
            step_in_epoch: 0,
            plan: None,
        })
    }

    /// Drops utterances the subsampler cannot handle and checks the rest
    /// against the model. Returns how many were dropped.
    pub fn prepare(&self, corpus: &mut Corpus) -> Result<usize> {
        let dropped = corpus.drop_short(MIN_FRAMES);
        corpus.validate(self.config.model.encoder.input_dim, self.config.model.vocab_size)?;
        Ok(dropped)
    }

    fn finished(&self) -> bool {
        self.epoch >= self.config.train.epochs || self.config.train.max_steps.is_some_and(|m| self.step >= m)
    }

    fn current_row(&mut self, corpus: &Corpus) -> Result<Option<Vec<Option<crate::data::SlotStep>>>> {
        loop {
            if self.finished() {
                return Ok(None);
            }
            if self.plan.as_ref().is_none_or(|(e, _)| *e != self.epoch) {
                let plan = serialize(corpus, self.config.train.batch_size, self.config.seed, self.epoch)?;
                self.plan = Some((self.epoch, plan));
            }
            let plan = &self.plan.as_ref().expect("plan set").1;
            if self.step_in_epoch < plan.len() {
                return Ok(Some(plan.steps[self.step_in_epoch].clone()));
            }
            self.epoch += 1;
            self.step_in_epoch = 0;
        }
    }

    /// `(slot, utterance)` pairs of the next minibatch, with the cache of
    /// every slot that starts a new clip already cleared. Calling it again
    /// before the step runs returns the same pairs.
    pub fn next_assignments(&mut self, corpus: &Corpus) -> Result<Option<Vec<(usize, usize)>>> {
        let Some(row) = self.current_row(corpus)? else {
            return Ok(None);
        };
        for (slot, s) in row.iter().enumerate() {
            if s.is_some_and(|s| s.reset) {
                self.cache.clear(slot);
            }
        }
        Ok(Some(
            row.iter()
                .enumerate()
                .filter_map(|(slot, s)| s.map(|s| (slot, s.utterance)))
                .collect(),
        ))
    }

    /// Runs the next planned minibatch; `None` once training is complete.
    pub fn train_step(&mut self, corpus: &Corpus) -> Result<Option<StepRecord>> {
        let start = Instant::now();
        let Some(active) = self.next_assignments(corpus)? else {
            return Ok(None);
        };
        let grads = {
            let items: Vec<BatchItem> = active
                .iter()
                .map(|&(slot, u)| {
                    let utt = &corpus.utterances[u];
                    BatchItem {
                        features: &utt.features,
                        labels: &utt.labels,
                        entries: self.cache.read(slot, &utt.clip_id),
                    }
                })
                .collect();
            batch_gradients(&self.model, &items, CacheInput::Constant, Some(self.rng.clone()))?
        };
        if let Some(rng) = grads.rng.clone() {
            self.rng = rng;
        }
        apply_bn_updates(&mut self.model.store, &grads.bn_updates);
        let keep_frames =
            self.model.mode() == ContextMode::Pooled && self.model.config.context.repool_in_training;
        for (i, &(slot, u)) in active.iter().enumerate() {
            let clip = &corpus.utterances[u].clip_id;
            let entry = self.model.cache_entry(
                clip,
                &grads.block_outputs[i],
                Some(grads.predictor_final[i].clone()),
                keep_frames,
            )?;
            self.cache.update(slot, entry);
        }
        let store = &mut self.model.store;
        for (p, g) in store.iter_mut().zip(grads.params) {
            p.grad = g;
        }
        if let Some(max) = self.config.train.clip_norm {
            store.clip_grad_norm(max);
        }
        let lr = learning_rate(self.config.train.learning_rate, self.config.train.warmup_steps, self.step);
        self.optimizer.update(store, lr);
        self.step += 1;
        self.step_in_epoch += 1;
        let wall_ms = self
            .config
            .train
            .log_wall_time
            .then(|| start.elapsed().as_secs_f64() * 1e3);
        Ok(Some(StepRecord {
            step: self.step,
            loss: grads.loss,
            lr,
            wall_ms,
        }))
    }

    /// Trains to completion, writing one JSON line per step to `metrics`
    /// and a checkpoint every `checkpoint_every` steps if `checkpoint` is set.
    pub fn run(
        &mut self,
        corpus: &Corpus,
        metrics: &mut dyn Write,
        checkpoint: Option<&Path>,
        mut on_step: impl FnMut(&StepRecord),
    ) -> Result<()> {
        while let Some(rec) = self.train_step(corpus)? {
            let line = serde_json::to_string(&rec)?;
            writeln!(metrics, "{line}").map_err(|e| Error::io("metrics log", e))?;
            on_step(&rec);
            if let (Some(path), Some(every)) = (checkpoint, self.config.train.checkpoint_every) {
                if every > 0 && self.step % every == 0 {
                    self.checkpoint()?.save(path)?;
                }
            }
        }
        metrics.flush().map_err(|e| Error::io("metrics log", e))?;
        if let Some(path) = checkpoint {
            self.checkpoint()?.save(path)?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Result<Checkpoint<TrainHeader>> {
        let mut tensors = Vec::new();
        for p in self.model.store.iter() {
            tensors.push((format!("param/{}", p.name), p.value.clone()));
        }
        for b in self.model.store.buffers() {
            tensors.push((format!("buffer/{}", b.name), b.value.clone()));
        }
        let adam_step = match &self.optimizer {
            Optimizer::Adam(a) => {
                for (p, (m, v)) in self.model.store.iter().zip(a.m.iter().zip(&a.v)) {
                    tensors.push((format!("adam.m/{}", p.name), m.clone()));
                    tensors.push((format!("adam.v/{}", p.name), v.clone()));
                }
                a.step
            }
            Optimizer::Sgd => 0,
        };
        let mut cache = Vec::with_capacity(self.cache.num_slots());
        for slot in 0..self.cache.num_slots() {
            let mut metas = Vec::new();
            for (j, e) in self.cache.entries(slot).enumerate() {
                let prefix = format!("cache/{slot}/{j}");
                for (k, t) in e.layers.iter().enumerate() {
                    tensors.push((format!("{prefix}/layer{k}"), t.clone()));
                }
                if let Some(frames) = &e.frames {
                    for (k, t) in frames.iter().enumerate() {
                        tensors.push((format!("{prefix}/frames{k}"), t.clone()));
                    }
                }
                if let Some(p) = &e.predictor_state {
                    tensors.push((format!("{prefix}/predictor"), p.clone()));
                }
                metas.push(CacheMeta {
                    clip_id: e.clip_id.clone(),
                    layers: e.layers.len(),
                    frames: e.frames.is_some(),
                    predictor: e.predictor_state.is_some(),
                });
            }
            cache.push(metas);
        }
        Ok(Checkpoint {
            header: TrainHeader {
                config: self.config.clone(),
                vocab: self.vocab.clone(),
                step: self.step,
                epoch: self.epoch,
                step_in_epoch: self.step_in_epoch,
                rng: self.rng.state(),
                optimizer: self.config.train.optimizer,
                adam_step,
                cache,
            },
            tensors,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint<TrainHeader>) -> Result<Self> {
        let h = &ck.header;
        let mut t = Self::new(h.config.clone(), h.vocab.clone())?;
        let names: Vec<String> = t.model.store.iter().map(|p| p.name.clone()).collect();
        let buffers: Vec<String> = t.model.store.buffers().map(|b| b.name.clone()).collect();
        for n in &names {
            t.model.store.set_value(n, ck.tensor(&format!("param/{n}"))?.clone())?;
        }
        for n in &buffers {
            t.model.store.set_value(n, ck.tensor(&format!("buffer/{n}"))?.clone())?;
        }
        if let Optimizer::Adam(a) = &mut t.optimizer {
            *a = Adam {
                step: h.adam_step,
                m: names.iter().map(|n| ck.tensor(&format!("adam.m/{n}")).cloned()).collect::<Result<_>>()?,
                v: names.iter().map(|n| ck.tensor(&format!("adam.v/{n}")).cloned()).collect::<Result<_>>()?,
                ..Adam::new(&t.model.store)
            };
        }
        if h.cache.len() != t.config.train.batch_size {
            return Err(Error::Checkpoint("cache slot count differs from batch size".into()));
        }
        let mut slots = Vec::with_capacity(h.cache.len());
        for (slot, metas) in h.cache.iter().enumerate() {
            let mut entries = Vec::with_capacity(metas.len());
            for (j, m) in metas.iter().enumerate() {
                let prefix = format!("cache/{slot}/{j}");
                let get = |k: String| ck.tensor(&k).cloned();
                entries.push(CacheEntry {
                    clip_id: m.clip_id.clone(),
                    layers: (0..m.layers).map(|k| get(format!("{prefix}/layer{k}"))).collect::<Result<_>>()?,
                    frames: if m.frames {
                        Some((0..m.layers).map(|k| get(format!("{prefix}/frames{k}"))).collect::<Result<_>>()?)
                    } else {
                        None
                    },
                    predictor_state: if m.predictor { Some(get(format!("{prefix}/predictor"))?) } else { None },
                });
            }
            slots.push(entries);
        }
        t.cache = ContextCache::from_slots(t.config.model.context.n_prev, slots);
        t.rng = Rng::from_state(h.rng);
        t.step = h.step;
        t.epoch = h.epoch;
        t.step_in_epoch = h.step_in_epoch;
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

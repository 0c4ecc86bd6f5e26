//! LSTM label predictor with the previous utterance's final hidden state
//! appended to every input.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::layers::{Embedding, Linear, LstmCell, LstmState};
use crate::numerics::params::Init;
use crate::numerics::{Ctx, ParamId, ParamStore, Rng, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorConfig {
    pub embed_dim: usize,
    pub hidden: usize,
    /// Feed the previous utterance's final hidden state into every step.
    /// Only has an effect when a context mode is active.
    pub carry_state: bool,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl PredictorConfig {
    pub fn paper() -> Self {
        Self {
            embed_dim: 256,
            hidden: 300,
            carry_state: true,
        }
    }

    pub fn desk() -> Self {
        Self {
            embed_dim: 16,
            hidden: 16,
            carry_state: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Predictor {
    /// Rows for non-blank tokens only: token `id` lives in row `id - 1`.
    pub embedding: Embedding,
    pub start: ParamId,
    pub input: Linear,
    pub lstm: LstmCell,
    pub vocab_size: usize,
    pub hidden: usize,
}

pub struct PredictorOutput {
    /// `[(U+1)×P]`: row `u` has seen labels `1..=u`.
    pub outputs: Var,
    /// Hidden state after the last label, the value cached for the next utterance.
    pub final_hidden: Var,
}

impl Predictor {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, vocab_size: usize, cfg: &PredictorConfig) -> Result<Self> {
        if vocab_size < 2 {
            return Err(Error::Config("vocabulary needs blank plus at least one token".into()));
        }
        let e = cfg.embed_dim;
        let p = cfg.hidden;
        let start_init = Init::Xavier {
            fan_in: 1,
            fan_out: e,
            gain: 1.0,
        };
        Ok(Self {
            embedding: Embedding::new(store, rng, "predictor.embedding", vocab_size - 1, e)?,
            start: store.init("predictor.start", &[1, e], start_init, rng)?,
            input: Linear::new(store, rng, "predictor.input", e + p, e, true)?,
            lstm: LstmCell::new(store, rng, "predictor.lstm", e, p)?,
            vocab_size,
            hidden: p,
        })
    }

    pub fn check_labels(&self, labels: &[usize]) -> Result<()> {
        for (i, &y) in labels.iter().enumerate() {
            if y == 0 {
                return Err(Error::BlankInLabels(i));
            }
            if y >= self.vocab_size {
                return Err(Error::Index {
                    what: "label",
                    index: y,
                    size: self.vocab_size,
                });
            }
        }
        Ok(())
    }

    /// Context vector for the carry-over input: the cached state or zeros.
    pub fn carry(&self, ctx: &mut Ctx, prev: Option<Var>) -> Var {
        prev.unwrap_or_else(|| ctx.graph.constant(Tensor::zeros(&[1, self.hidden])))
    }

    pub fn initial_state(&self, ctx: &mut Ctx) -> LstmState {
        self.lstm.zero_state(ctx)
    }

    /// One recurrence step. `label == None` feeds the start vector.
    pub fn step(&self, ctx: &mut Ctx, label: Option<usize>, carry: Var, state: LstmState) -> Result<LstmState> {
        let emb = match label {
            None => ctx.p(self.start),
            Some(y) => {
                self.check_labels(&[y])?;
                self.embedding.forward(ctx, &[y - 1])?
            }
        };
        let x = ctx.graph.concat_cols(&[emb, carry])?;
        let x = self.input.forward(ctx, x)?;
        self.lstm.step(ctx, x, state)
    }

    pub fn predict_sequence(&self, ctx: &mut Ctx, labels: &[usize], prev: Option<Var>) -> Result<PredictorOutput> {
        self.check_labels(labels)?;
        let carry = self.carry(ctx, prev);
        let mut state = self.initial_state(ctx);
        let mut rows = Vec::with_capacity(labels.len() + 1);
        state = self.step(ctx, None, carry, state)?;
        rows.push(state.h);
        for &y in labels {
            state = self.step(ctx, Some(y), carry, state)?;
            rows.push(state.h);
        }
        let outputs = if rows.len() == 1 { rows[0] } else { ctx.graph.concat_rows(&rows)? };
        Ok(PredictorOutput {
            outputs,
            final_hidden: state.h,
        })
    }
}

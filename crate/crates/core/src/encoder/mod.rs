//! Conformer encoder with streaming masks and per-block context inputs.

pub mod block;
pub mod config;
pub mod infer;
pub mod mask;
pub mod subsample;

pub use block::{BlockTrace, ConformerBlock, TimeMode};
pub use config::{ContextMode, EncoderConfig};
pub use mask::{build_streaming_mask, AttentionMask};
pub use subsample::{Subsampler, MIN_FRAMES, SUBSAMPLE_MARGIN};

use crate::error::{Error, Result};
use crate::numerics::layers::Embedding;
use crate::numerics::{Ctx, ParamStore, Rng, Tensor, Var};

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub subsampler: Subsampler,
    pub positions: Embedding,
    pub blocks: Vec<ConformerBlock>,
}

/// Everything one utterance produced on its way through the encoder.
pub struct EncoderTrace {
    /// Output of every block, in order; the last one is the encoder output.
    pub layers: Vec<Var>,
    /// Attention probabilities per block, per head.
    pub attention: Vec<Vec<Var>>,
}

impl EncoderTrace {
    pub fn output(&self) -> Var {
        *self.layers.last().expect("encoder has at least one block")
    }
}

impl Encoder {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let subsampler = Subsampler::new(store, rng, "encoder.subsample", config)?;
        let positions = Embedding::new(store, rng, "encoder.positions", config.max_frames, config.dim)?;
        let blocks = (0..config.num_blocks)
            .map(|l| ConformerBlock::new(store, rng, &format!("encoder.block{l}"), config))
            .collect::<Result<_>>()?;
        Ok(Self {
            config: config.clone(),
            subsampler,
            positions,
            blocks,
        })
    }

    /// Subsampling plus positional embeddings: the input of block 0.
    pub fn embed(&self, ctx: &mut Ctx, features: &Tensor) -> Result<Var> {
        if features.cols() != self.config.input_dim {
            return Err(Error::shape("encoder input", &[features.rows(), self.config.input_dim], features.shape()));
        }
        let x = self.subsampler.forward(ctx, features)?;
        let t = ctx.graph.value(x).rows();
        if t > self.config.max_frames {
            return Err(Error::TooLong {
                frames: t,
                max: self.config.max_frames,
            });
        }
        let ids: Vec<usize> = (0..t).collect();
        let pos = self.positions.forward(ctx, &ids)?;
        ctx.graph.add(x, pos)
    }

    /// Encodes several utterances in lockstep (batch statistics span all of
    /// them). `contexts[i][l]` are the detached context rows utterance `i`
    /// sees at block `l`; blocks outside the configured context layers
    /// ignore them.
    pub fn encode_many(
        &self,
        ctx: &mut Ctx,
        features: &[&Tensor],
        contexts: &[Vec<Option<Var>>],
    ) -> Result<Vec<EncoderTrace>> {
        let n = features.len();
        if contexts.len() != n {
            return Err(Error::shape("encoder contexts", &[n], &[contexts.len()]));
        }
        let time = TimeMode::from_config(&self.config);
        let use_context = self.config.context_mode != ContextMode::None;
        let enabled = self.config.context_blocks();
        let mut xs = features
            .iter()
            .map(|f| self.embed(ctx, f))
            .collect::<Result<Vec<_>>>()?;
        let mut traces: Vec<EncoderTrace> = (0..n)
            .map(|_| EncoderTrace {
                layers: Vec::new(),
                attention: Vec::new(),
            })
            .collect();
        for (l, block) in self.blocks.iter().enumerate() {
            let ctx_rows: Vec<Option<Var>> = contexts
                .iter()
                .map(|c| {
                    if use_context && enabled.contains(&l) {
                        c.get(l).copied().flatten()
                    } else {
                        None
                    }
                })
                .collect();
            let outs = block.forward_many(ctx, &xs, &ctx_rows, time)?;
            for (i, o) in outs.into_iter().enumerate() {
                xs[i] = o.out;
                traces[i].layers.push(o.out);
                traces[i].attention.push(o.attention);
            }
        }
        Ok(traces)
    }

    pub fn encode(&self, ctx: &mut Ctx, features: &Tensor, context: &[Option<Var>]) -> Result<EncoderTrace> {
        Ok(self.encode_many(ctx, &[features], &[context.to_vec()])?.remove(0))
    }
}

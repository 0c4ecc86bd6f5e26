use super::config::EncoderConfig;
use crate::error::{Error, Result};
use crate::numerics::layers::{Conv2d, Linear};
use crate::numerics::{Ctx, ParamStore, Rng, Tensor, Var};

/// Two stacked 3-wide stride-2 convolutions span this many input frames.
pub const MIN_FRAMES: usize = 7;

/// Output frame `t` only reads input frames `<= 4t + SUBSAMPLE_MARGIN`.
pub const SUBSAMPLE_MARGIN: usize = 3;

/// Two 3×3 stride-2 convolutions with ReLU, then a linear map to the
/// encoder width: `[T×F] -> [⌈T/4⌉×D]`.
#[derive(Clone, Debug)]
pub struct Subsampler {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub proj: Linear,
}

impl Subsampler {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, cfg: &EncoderConfig) -> Result<Self> {
        let c = cfg.subsample_channels;
        Ok(Self {
            conv1: Conv2d::new(store, rng, &format!("{name}.conv1"), 1, c, 3, 2, 1)?,
            conv2: Conv2d::new(store, rng, &format!("{name}.conv2"), c, c, 3, 2, 1)?,
            proj: Linear::new(store, rng, &format!("{name}.proj"), c * cfg.subsampled_width(), cfg.dim, true)?,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, features: &Tensor) -> Result<Var> {
        let (t, f) = (features.rows(), features.cols());
        if t < MIN_FRAMES {
            return Err(Error::TooShort {
                frames: t,
                min: MIN_FRAMES,
            });
        }
        let x = ctx.graph.constant(features.clone().reshape(vec![1, t, f])?);
        let y = self.conv1.forward(ctx, x)?;
        let y = ctx.graph.relu(y);
        let y = self.conv2.forward(ctx, y)?;
        let y = ctx.graph.relu(y);
        let y = ctx.graph.channels_to_frames(y)?;
        self.proj.forward(ctx, y)
    }
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextMode {
    #[default]
    None,
    FrameConcat,
    Pooled,
}

impl std::str::FromStr for ContextMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "frame_concat" => Ok(Self::FrameConcat),
            "pooled" => Ok(Self::Pooled),
            other => Err(Error::Config(format!(
                "unknown context mode {other:?} (expected none, frame_concat or pooled)"
            ))),
        }
    }
}

impl std::fmt::Display for ContextMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::FrameConcat => "frame_concat",
            Self::Pooled => "pooled",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Feature dimension of the input frames.
    pub input_dim: usize,
    pub num_blocks: usize,
    pub heads: usize,
    pub dim: usize,
    pub ffn_dim: usize,
    /// Depth-wise convolution width inside each block.
    pub kernel: usize,
    /// Channels of the two stride-2 subsampling convolutions.
    pub subsample_channels: usize,
    pub streaming: bool,
    pub lookahead: usize,
    pub context_mode: ContextMode,
    /// Blocks that receive cross-utterance context; `None` means all.
    pub context_layers: Option<Vec<usize>>,
    /// Size of the positional embedding table (post-subsampling frames).
    pub max_frames: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl EncoderConfig {
    pub fn paper() -> Self {
        Self {
            input_dim: 80,
            num_blocks: 12,
            heads: 8,
            dim: 512,
            ffn_dim: 2048,
            kernel: 31,
            subsample_channels: 512,
            streaming: false,
            lookahead: 1,
            context_mode: ContextMode::None,
            context_layers: None,
            max_frames: 1024,
            dropout: 0.1,
        }
    }

    pub fn desk() -> Self {
        Self {
            input_dim: 16,
            num_blocks: 2,
            heads: 2,
            dim: 32,
            ffn_dim: 64,
            kernel: 7,
            subsample_channels: 8,
            streaming: false,
            lookahead: 1,
            context_mode: ContextMode::None,
            context_layers: None,
            max_frames: 256,
            dropout: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_blocks == 0 || self.dim == 0 || self.heads == 0 || self.input_dim == 0 {
            return fail("encoder sizes must be positive".into());
        }
        if self.dim % self.heads != 0 {
            return fail(format!("dim {} not divisible by {} heads", self.dim, self.heads));
        }
        if self.kernel % 2 == 0 {
            return fail(format!("depth-wise kernel width {} must be odd", self.kernel));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if let Some(layers) = &self.context_layers {
            if let Some(&bad) = layers.iter().find(|&&l| l >= self.num_blocks) {
                return fail(format!("context layer {bad} >= num_blocks {}", self.num_blocks));
            }
        }
        Ok(())
    }

    /// Sorted, de-duplicated list of blocks that take context.
    pub fn context_blocks(&self) -> Vec<usize> {
        match &self.context_layers {
            None => (0..self.num_blocks).collect(),
            Some(l) => {
                let mut l = l.clone();
                l.sort_unstable();
                l.dedup();
                l
            }
        }
    }

    /// Frames after the ×4 subsampler.
    pub fn subsampled_len(raw: usize) -> usize {
        raw.div_ceil(2).div_ceil(2)
    }

    pub fn subsampled_width(&self) -> usize {
        self.input_dim.div_ceil(2).div_ceil(2)
    }
}

use super::config::EncoderConfig;
use super::mask::{build_streaming_mask, AttentionMask};
use crate::context::fuse_frame_concat;
use crate::error::{Error, Result};
use crate::numerics::layers::{BatchNorm, DepthwiseConv1d, LayerNorm, Linear};
use crate::numerics::{Ctx, Padding, ParamStore, Rng, Var};

/// `Linear(D→H) · swish · Linear(H→D)` with dropout after each stage.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            inner: Linear::new(store, rng, &format!("{name}.inner"), dim, hidden, true)?,
            outer: Linear::new(store, rng, &format!("{name}.outer"), hidden, dim, true)?,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let h = self.inner.forward(ctx, x)?;
        let h = ctx.graph.swish(h);
        let h = ctx.dropout(h)?;
        let y = self.outer.forward(ctx, h)?;
        ctx.dropout(y)
    }
}

/// Multi-head attention whose keys and values may carry extra context rows
/// in front of the current frames; queries come from the current frames only.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
}

pub struct AttentionOutput {
    pub out: Var,
    /// One `[T×(C+T)]` probability matrix per head.
    pub weights: Vec<Var>,
}

impl SelfAttention {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            query: Linear::new(store, rng, &format!("{name}.wq"), dim, dim, true)?,
            key: Linear::new(store, rng, &format!("{name}.wk"), dim, dim, true)?,
            value: Linear::new(store, rng, &format!("{name}.wv"), dim, dim, true)?,
            out: Linear::new(store, rng, &format!("{name}.wo"), dim, dim, true)?,
            heads,
        })
    }

    pub fn forward(
        &self,
        ctx: &mut Ctx,
        x: Var,
        context: Option<Var>,
        mask: Option<&AttentionMask>,
    ) -> Result<AttentionOutput> {
        let (t, d) = (ctx.graph.value(x).rows(), ctx.graph.value(x).cols());
        let cached: &[Var] = match &context {
            Some(c) => std::slice::from_ref(c),
            None => &[],
        };
        let source = fuse_frame_concat(&mut ctx.graph, x, cached)?;
        let s = ctx.graph.value(source).rows();
        if let Some(m) = mask {
            if m.rows != t || m.cols != s {
                return Err(Error::shape("attention mask", &[t, s], &[m.rows, m.cols]));
            }
        }
        let allowed = mask.filter(|m| !m.is_full()).map(|m| m.allowed.as_slice());
        let q = self.query.forward(ctx, x)?;
        let k = self.key.forward(ctx, source)?;
        let v = self.value.forward(ctx, source)?;
        let dk = d / self.heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let g = &mut ctx.graph;
            let qh = g.slice_cols(q, h * dk, dk)?;
            let kh = g.slice_cols(k, h * dk, dk)?;
            let vh = g.slice_cols(v, h * dk, dk)?;
            let scores = g.matmul_nt(qh, kh)?;
            let scores = g.scale(scores, scale);
            let p = g.softmax_rows(scores, allowed)?;
            heads.push(g.matmul(p, vh)?);
            weights.push(p);
        }
        let joined = if heads.len() == 1 { heads[0] } else { ctx.graph.concat_cols(&heads)? };
        let out = self.out.forward(ctx, joined)?;
        let out = ctx.dropout(out)?;
        Ok(AttentionOutput { out, weights })
    }
}

/// Point-wise, GLU, point-wise, depth-wise, batch norm, swish, point-wise.
#[derive(Clone, Debug)]
pub struct ConvModule {
    pub expand: Linear,
    pub mix: Linear,
    pub depthwise: DepthwiseConv1d,
    pub norm: BatchNorm,
    pub project: Linear,
}

impl ConvModule {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, dim: usize, kernel: usize) -> Result<Self> {
        Ok(Self {
            expand: Linear::new(store, rng, &format!("{name}.pw1"), dim, 2 * dim, true)?,
            mix: Linear::new(store, rng, &format!("{name}.pw2"), dim, dim, true)?,
            depthwise: DepthwiseConv1d::new(store, rng, &format!("{name}.dw"), dim, kernel)?,
            norm: BatchNorm::new(store, rng, &format!("{name}.bn"), dim)?,
            project: Linear::new(store, rng, &format!("{name}.pw3"), dim, dim, true)?,
        })
    }

    /// Runs several sequences together so batch statistics span all of them.
    pub fn forward_many(&self, ctx: &mut Ctx, xs: &[Var], padding: Padding) -> Result<Vec<Var>> {
        let mut pre = Vec::with_capacity(xs.len());
        for &x in xs {
            let h = self.expand.forward(ctx, x)?;
            let h = ctx.graph.glu(h)?;
            let h = self.mix.forward(ctx, h)?;
            pre.push(self.depthwise.forward(ctx, h, padding)?);
        }
        let normed = self.norm.forward_many(ctx, &pre)?;
        let mut out = Vec::with_capacity(xs.len());
        for h in normed {
            let h = ctx.graph.swish(h);
            let h = self.project.forward(ctx, h)?;
            out.push(ctx.dropout(h)?);
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct ConformerBlock {
    pub ffn1: FeedForward,
    pub attention: SelfAttention,
    pub conv: ConvModule,
    pub ffn2: FeedForward,
    pub norm: LayerNorm,
}

/// Per-sequence result of one block.
pub struct BlockTrace {
    pub out: Var,
    pub attention: Vec<Var>,
}

/// How a block treats time: streaming lookahead (if any) and conv padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TimeMode {
    pub lookahead: Option<usize>,
    pub padding: Padding,
}

impl TimeMode {
    pub fn from_config(cfg: &EncoderConfig) -> Self {
        if cfg.streaming {
            Self {
                lookahead: Some(cfg.lookahead),
                padding: Padding::Causal,
            }
        } else {
            Self {
                lookahead: None,
                padding: Padding::Same,
            }
        }
    }
}

impl ConformerBlock {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, cfg: &EncoderConfig) -> Result<Self> {
        let d = cfg.dim;
        Ok(Self {
            ffn1: FeedForward::new(store, rng, &format!("{name}.ffn1"), d, cfg.ffn_dim)?,
            attention: SelfAttention::new(store, rng, &format!("{name}.mhsa"), d, cfg.heads)?,
            conv: ConvModule::new(store, rng, &format!("{name}.conv"), d, cfg.kernel)?,
            ffn2: FeedForward::new(store, rng, &format!("{name}.ffn2"), d, cfg.ffn_dim)?,
            norm: LayerNorm::new(store, rng, &format!("{name}.ln"), d)?,
        })
    }

    /// Applies the block to each sequence in `xs`; `contexts[i]` are extra
    /// key/value rows for sequence `i` and must already be detached.
    pub fn forward_many(
        &self,
        ctx: &mut Ctx,
        xs: &[Var],
        contexts: &[Option<Var>],
        time: TimeMode,
    ) -> Result<Vec<BlockTrace>> {
        if contexts.len() != xs.len() {
            return Err(Error::shape("block contexts", &[xs.len()], &[contexts.len()]));
        }
        let mut mids = Vec::with_capacity(xs.len());
        let mut attention = Vec::with_capacity(xs.len());
        for (&x, &c) in xs.iter().zip(contexts) {
            let f = self.ffn1.forward(ctx, x)?;
            let f = ctx.graph.scale(f, 0.5);
            let x0 = ctx.graph.add(x, f)?;
            let mask = time.lookahead.map(|w| {
                let t = ctx.graph.value(x).rows();
                let c = c.map_or(0, |c| ctx.graph.value(c).rows());
                build_streaming_mask(t, c, w)
            });
            let a = self.attention.forward(ctx, x0, c, mask.as_ref())?;
            mids.push(ctx.graph.add(x0, a.out)?);
            attention.push(a.weights);
        }
        let convs = self.conv.forward_many(ctx, &mids, time.padding)?;
        let mut out = Vec::with_capacity(xs.len());
        for ((x1, c), attention) in mids.into_iter().zip(convs).zip(attention) {
            let x2 = ctx.graph.add(x1, c)?;
            let f = self.ffn2.forward(ctx, x2)?;
            let f = ctx.graph.scale(f, 0.5);
            let y = ctx.graph.add(x2, f)?;
            let out_v = self.norm.forward(ctx, y)?;
            out.push(BlockTrace { out: out_v, attention });
        }
        Ok(out)
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var, context: Option<Var>, time: TimeMode) -> Result<BlockTrace> {
        Ok(self.forward_many(ctx, &[x], &[context], time)?.remove(0))
    }
}

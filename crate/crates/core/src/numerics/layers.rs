//! Parameterised building blocks on top of the tape.

use super::graph::{Graph, Padding, Var};
use super::params::{BufferId, Init, ParamId, ParamStore};
use super::rng::Rng;
use super::tensor::Tensor;
use crate::error::Result;

pub const NORM_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Running-statistics update produced by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub mean: BufferId,
    pub var: BufferId,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

/// Everything a forward pass needs: the tape, read-only parameters, the
/// train/eval switch and the dropout stream.
pub struct Ctx<'a> {
    pub graph: Graph,
    pub params: &'a ParamStore,
    pub training: bool,
    pub dropout: f64,
    rng: Option<Rng>,
    bn_updates: Vec<BnUpdate>,
}

impl<'a> Ctx<'a> {
    /// Evaluation: running statistics, no dropout, no gradient tracking.
    pub fn eval(params: &'a ParamStore) -> Self {
        Self {
            graph: Graph::no_grad(),
            params,
            training: false,
            dropout: 0.0,
            rng: None,
            bn_updates: Vec::new(),
        }
    }

    /// Training: batch statistics and gradient tracking; dropout is drawn
    /// from `rng` when `dropout > 0`.
    pub fn train(params: &'a ParamStore, dropout: f64, rng: Option<Rng>) -> Self {
        Self {
            graph: Graph::new(),
            params,
            training: true,
            dropout,
            rng,
            bn_updates: Vec::new(),
        }
    }

    /// Evaluation-mode layers on a gradient-tracking tape.
    pub fn eval_with_grad(params: &'a ParamStore) -> Self {
        Self {
            graph: Graph::new(),
            ..Self::eval(params)
        }
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        self.graph.param(self.params, id)
    }

    pub fn dropout(&mut self, x: Var) -> Result<Var> {
        if !self.training || self.dropout <= 0.0 {
            return Ok(x);
        }
        let Some(rng) = self.rng.as_mut() else {
            return Ok(x);
        };
        let keep = 1.0 - self.dropout;
        let n = self.graph.value(x).numel();
        let mask = (0..n)
            .map(|_| if rng.bernoulli(keep) { 1.0 / keep } else { 0.0 })
            .collect();
        self.graph.dropout(x, mask)
    }

    pub fn finish(self) -> (Graph, Vec<BnUpdate>, Option<Rng>) {
        (self.graph, self.bn_updates, self.rng)
    }
}

/// Applies running-statistic updates collected during a training forward.
pub fn apply_bn_updates(store: &mut ParamStore, updates: &[BnUpdate]) {
    for u in updates {
        let m = store.buffer_mut(u.mean);
        for (r, b) in m.data_mut().iter_mut().zip(&u.batch_mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
        let v = store.buffer_mut(u.var);
        for (r, b) in v.data_mut().iter_mut().zip(&u.batch_var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
    }
}

fn xavier(fan_in: usize, fan_out: usize) -> Init {
    Init::Xavier {
        fan_in,
        fan_out,
        gain: 1.0,
    }
}

/// `x · W + b` with `W: [in×out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, input: usize, output: usize, bias: bool) -> Result<Self> {
        let weight = store.init(format!("{name}.weight"), &[input, output], xavier(input, output), rng)?;
        let bias = if bias {
            Some(store.init(format!("{name}.bias"), &[1, output], Init::Zeros, rng)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let w = ctx.p(self.weight);
        let y = ctx.graph.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = ctx.p(b);
                ctx.graph.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: store.init(format!("{name}.gain"), &[1, dim], Init::Ones, rng)?,
            bias: store.init(format!("{name}.bias"), &[1, dim], Init::Zeros, rng)?,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let (g, b) = (ctx.p(self.gain), ctx.p(self.bias));
        ctx.graph.layer_norm(x, g, b, NORM_EPS)
    }
}

/// Batch normalisation over the columns (channels) of `[N×C]` matrices.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gain: store.init(format!("{name}.gain"), &[1, channels], Init::Ones, rng)?,
            bias: store.init(format!("{name}.bias"), &[1, channels], Init::Zeros, rng)?,
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[1, channels]))?,
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::full(&[1, channels], 1.0))?,
        })
    }

    /// Normalises several matrices that share channels. In training mode
    /// the statistics are pooled over every row of every input.
    pub fn forward_many(&self, ctx: &mut Ctx, xs: &[Var]) -> Result<Vec<Var>> {
        let (g, b) = (ctx.p(self.gain), ctx.p(self.bias));
        if !ctx.training {
            let mean = ctx.params.buffer(self.running_mean).data().to_vec();
            let var = ctx.params.buffer(self.running_var).data().to_vec();
            return xs
                .iter()
                .map(|&x| ctx.graph.normalize_fixed(x, &mean, &var, g, b, NORM_EPS))
                .collect();
        }
        let joined = if xs.len() == 1 { xs[0] } else { ctx.graph.concat_rows(xs)? };
        let (y, batch_mean, batch_var) = ctx.graph.batch_norm(joined, g, b, NORM_EPS)?;
        ctx.bn_updates.push(BnUpdate {
            mean: self.running_mean,
            var: self.running_var,
            batch_mean,
            batch_var,
        });
        if xs.len() == 1 {
            return Ok(vec![y]);
        }
        let mut out = Vec::with_capacity(xs.len());
        let mut start = 0;
        for &x in xs {
            let rows = ctx.graph.value(x).rows();
            out.push(ctx.graph.slice_rows(y, start, rows)?);
            start += rows;
        }
        Ok(out)
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        Ok(self.forward_many(ctx, &[x])?.remove(0))
    }
}

/// Depth-wise 1-D convolution over time with per-channel kernels `[K×C]`.
#[derive(Clone, Debug)]
pub struct DepthwiseConv1d {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub width: usize,
}

impl DepthwiseConv1d {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, channels: usize, width: usize) -> Result<Self> {
        Ok(Self {
            kernel: store.init(format!("{name}.kernel"), &[width, channels], xavier(width, width), rng)?,
            bias: store.init(format!("{name}.bias"), &[1, channels], Init::Zeros, rng)?,
            width,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var, padding: Padding) -> Result<Var> {
        let (k, b) = (ctx.p(self.kernel), ctx.p(self.bias));
        ctx.graph.depthwise_conv1d(x, k, b, padding)
    }
}

/// Point-wise 1-D convolution is a per-frame linear map.
pub type PointwiseConv1d = Linear;

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let area = kernel * kernel;
        Ok(Self {
            weight: store.init(
                format!("{name}.weight"),
                &[out_channels, in_channels, kernel, kernel],
                xavier(in_channels * area, out_channels * area),
                rng,
            )?,
            bias: store.init(format!("{name}.bias"), &[1, out_channels], Init::Zeros, rng)?,
            stride,
            pad,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let (w, b) = (ctx.p(self.weight), ctx.p(self.bias));
        ctx.graph.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// Row lookup table.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
}

impl Embedding {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, rows: usize, dim: usize) -> Result<Self> {
        Ok(Self {
            table: store.init(format!("{name}.table"), &[rows, dim], xavier(rows, dim), rng)?,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, ids: &[usize]) -> Result<Var> {
        let t = ctx.p(self.table);
        ctx.graph.gather_rows(t, ids)
    }
}

/// Hidden and cell state of an LSTM, each `[1×P]`.
#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

/// Single-layer LSTM cell with gate order input, forget, cell, output.
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, input: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            w_ih: store.init(format!("{name}.w_ih"), &[input, 4 * hidden], xavier(input, 4 * hidden), rng)?,
            w_hh: store.init(format!("{name}.w_hh"), &[hidden, 4 * hidden], xavier(hidden, 4 * hidden), rng)?,
            bias: store.init(format!("{name}.bias"), &[1, 4 * hidden], Init::Zeros, rng)?,
            hidden,
        })
    }

    pub fn zero_state(&self, ctx: &mut Ctx) -> LstmState {
        LstmState {
            h: ctx.graph.constant(Tensor::zeros(&[1, self.hidden])),
            c: ctx.graph.constant(Tensor::zeros(&[1, self.hidden])),
        }
    }

    pub fn step(&self, ctx: &mut Ctx, x: Var, state: LstmState) -> Result<LstmState> {
        let (w_ih, w_hh, b) = (ctx.p(self.w_ih), ctx.p(self.w_hh), ctx.p(self.bias));
        let g = &mut ctx.graph;
        let xi = g.matmul(x, w_ih)?;
        let hh = g.matmul(state.h, w_hh)?;
        let pre = g.add(xi, hh)?;
        let pre = g.add_row(pre, b)?;
        let p = self.hidden;
        let i = g.slice_cols(pre, 0, p)?;
        let f = g.slice_cols(pre, p, p)?;
        let c_in = g.slice_cols(pre, 2 * p, p)?;
        let o = g.slice_cols(pre, 3 * p, p)?;
        let (i, f, o) = (g.sigmoid(i), g.sigmoid(f), g.sigmoid(o));
        let c_in = g.tanh(c_in);
        let keep = g.mul(f, state.c)?;
        let write = g.mul(i, c_in)?;
        let c = g.add(keep, write)?;
        let tc = g.tanh(c);
        let h = g.mul(o, tc)?;
        Ok(LstmState { h, c })
    }
}

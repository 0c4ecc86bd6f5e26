use num_traits::Float;

use crate::error::{Error, Result};
use crate::numerics::dense::Mat;
use crate::numerics::layers::{BatchNorm, NORM_EPS};
use crate::numerics::params::Init;
use crate::numerics::{Ctx, ParamId, ParamStore, Rng, Var};

/// Initial scale of the pooling projection; small so an untrained pool
/// spreads its weight almost evenly over time.
const PROJECTION_GAIN: f64 = 0.2;

/// Compresses a `[T×D]` history into `[L×D]`: each of the `L` rows is a
/// softmax-over-time weighted average of the history frames.
#[derive(Clone, Debug)]
pub struct AttentionPool {
    /// `[L×D]` projection.
    pub projection: ParamId,
    /// Normalises the `L` score channels.
    pub norm: BatchNorm,
    pub slots: usize,
    pub dim: usize,
}

pub struct PoolOutput {
    /// `[L×D]` pooled rows.
    pub pooled: Var,
    /// `[L×T]` row-stochastic weights.
    pub weights: Var,
}

impl AttentionPool {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, slots: usize, dim: usize) -> Result<Self> {
        if slots == 0 {
            return Err(Error::Config("pooling needs at least one slot".into()));
        }
        let init = Init::Xavier {
            fan_in: dim,
            fan_out: slots,
            gain: PROJECTION_GAIN,
        };
        Ok(Self {
            projection: store.init(format!("{name}.projection"), &[slots, dim], init, rng)?,
            norm: BatchNorm::new(store, rng, &format!("{name}.bn"), slots)?,
            slots,
            dim,
        })
    }

    /// Pools each history in `hs`. In training mode the score normalisation
    /// uses statistics across all histories and all their frames.
    pub fn forward_many(&self, ctx: &mut Ctx, hs: &[Var]) -> Result<Vec<PoolOutput>> {
        let e = ctx.p(self.projection);
        let mut scores = Vec::with_capacity(hs.len());
        for &h in hs {
            let s = ctx.graph.shape(h);
            if s.len() != 2 || s[1] != self.dim || s[0] == 0 {
                return Err(Error::shape("attention_pool", &[self.slots, self.dim], s));
            }
            let sc = ctx.graph.matmul_nt(e, h)?;
            let sc = ctx.graph.relu(sc);
            scores.push(ctx.graph.transpose(sc)?);
        }
        let normed = self.norm.forward_many(ctx, &scores)?;
        let mut out = Vec::with_capacity(hs.len());
        for (n, &h) in normed.into_iter().zip(hs) {
            let n = ctx.graph.transpose(n)?;
            let weights = ctx.graph.softmax_rows(n, None)?;
            let pooled = ctx.graph.matmul(weights, h)?;
            out.push(PoolOutput { pooled, weights });
        }
        Ok(out)
    }

    pub fn forward(&self, ctx: &mut Ctx, h: Var) -> Result<PoolOutput> {
        Ok(self.forward_many(ctx, &[h])?.remove(0))
    }
}

/// Eval-mode pooling without the tape, generic over the float type.
#[derive(Clone, Debug)]
pub struct DensePool<T> {
    pub projection: Mat<T>,
    pub scale: Vec<T>,
    pub shift: Vec<T>,
}

impl<T: Float> DensePool<T> {
    pub fn load(store: &ParamStore, pool: &AttentionPool) -> Self {
        let bn = &pool.norm;
        let mean = store.buffer(bn.running_mean).data();
        let var = store.buffer(bn.running_var).data();
        let gain = store.value(bn.gain).data();
        let bias = store.value(bn.bias).data();
        let mut scale = Vec::with_capacity(pool.slots);
        let mut shift = Vec::with_capacity(pool.slots);
        for c in 0..pool.slots {
            let s = gain[c] / (var[c] + NORM_EPS).sqrt();
            scale.push(T::from(s).unwrap());
            shift.push(T::from(bias[c] - mean[c] * s).unwrap());
        }
        Self {
            projection: Mat::from_tensor(store.value(pool.projection)),
            scale,
            shift,
        }
    }

    /// Returns `(pooled [L×D], weights [L×T])`.
    pub fn pool(&self, h: &Mat<T>) -> (Mat<T>, Mat<T>) {
        let mut w = self.projection.matmul_nt(h);
        for l in 0..w.rows {
            let (s, b) = (self.scale[l], self.shift[l]);
            for v in w.row_mut(l) {
                *v = v.max(T::zero()) * s + b;
            }
        }
        w.softmax_rows_where(|_, _| true);
        (w.matmul(h), w)
    }
}

//! Tape-free evaluation of a conformer block, generic over the float type.
//! Used by the fusion benchmark (f32) and checked against the tape in f64.

use num_traits::Float;

use super::block::{ConformerBlock, FeedForward, TimeMode};
use crate::numerics::dense::{sigmoid, swish, Mat};
use crate::numerics::layers::{Linear, NORM_EPS};
use crate::numerics::{Padding, ParamStore};

#[derive(Clone, Debug)]
pub struct DenseLinear<T> {
    pub weight: Mat<T>,
    pub bias: Option<Vec<T>>,
}

impl<T: Float> DenseLinear<T> {
    pub fn load(store: &ParamStore, l: &Linear) -> Self {
        Self {
            weight: Mat::from_tensor(store.value(l.weight)),
            bias: l.bias.map(|b| Mat::<T>::from_tensor(store.value(b)).data),
        }
    }

    pub fn apply(&self, x: &Mat<T>) -> Mat<T> {
        let mut y = x.matmul(&self.weight);
        if let Some(b) = &self.bias {
            y.add_row(b);
        }
        y
    }
}

fn row_param<T: Float>(store: &ParamStore, id: crate::numerics::ParamId) -> Vec<T> {
    Mat::<T>::from_tensor(store.value(id)).data
}

#[derive(Clone, Debug)]
pub struct DenseFeedForward<T> {
    pub inner: DenseLinear<T>,
    pub outer: DenseLinear<T>,
}

impl<T: Float> DenseFeedForward<T> {
    fn load(store: &ParamStore, f: &FeedForward) -> Self {
        Self {
            inner: DenseLinear::load(store, &f.inner),
            outer: DenseLinear::load(store, &f.outer),
        }
    }

    pub fn apply(&self, x: &Mat<T>) -> Mat<T> {
        let mut h = self.inner.apply(x);
        h.map(swish);
        self.outer.apply(&h)
    }
}

/// Eval-mode weights of one conformer block.
#[derive(Clone, Debug)]
pub struct DenseBlock<T> {
    pub ffn1: DenseFeedForward<T>,
    pub wq: DenseLinear<T>,
    pub wk: DenseLinear<T>,
    pub wv: DenseLinear<T>,
    pub wo: DenseLinear<T>,
    pub heads: usize,
    pub pw1: DenseLinear<T>,
    pub pw2: DenseLinear<T>,
    pub dw_kernel: Mat<T>,
    pub dw_bias: Vec<T>,
    pub bn_scale: Vec<T>,
    pub bn_shift: Vec<T>,
    pub pw3: DenseLinear<T>,
    pub ffn2: DenseFeedForward<T>,
    pub ln_gain: Vec<T>,
    pub ln_bias: Vec<T>,
}

impl<T: Float> DenseBlock<T> {
    pub fn load(store: &ParamStore, b: &ConformerBlock) -> Self {
        let bn = &b.conv.norm;
        let mean = store.buffer(bn.running_mean).data();
        let var = store.buffer(bn.running_var).data();
        let gain = store.value(bn.gain).data();
        let bias = store.value(bn.bias).data();
        // Fold the fixed statistics into one affine map per channel.
        let mut bn_scale = Vec::with_capacity(mean.len());
        let mut bn_shift = Vec::with_capacity(mean.len());
        for c in 0..mean.len() {
            let s = gain[c] / (var[c] + NORM_EPS).sqrt();
            bn_scale.push(T::from(s).unwrap());
            bn_shift.push(T::from(bias[c] - mean[c] * s).unwrap());
        }
        Self {
            ffn1: DenseFeedForward::load(store, &b.ffn1),
            wq: DenseLinear::load(store, &b.attention.query),
            wk: DenseLinear::load(store, &b.attention.key),
            wv: DenseLinear::load(store, &b.attention.value),
            wo: DenseLinear::load(store, &b.attention.out),
            heads: b.attention.heads,
            pw1: DenseLinear::load(store, &b.conv.expand),
            pw2: DenseLinear::load(store, &b.conv.mix),
            dw_kernel: Mat::from_tensor(store.value(b.conv.depthwise.kernel)),
            dw_bias: row_param(store, b.conv.depthwise.bias),
            bn_scale,
            bn_shift,
            pw3: DenseLinear::load(store, &b.conv.project),
            ffn2: DenseFeedForward::load(store, &b.ffn2),
            ln_gain: row_param(store, b.norm.gain),
            ln_bias: row_param(store, b.norm.bias),
        }
    }

    /// The fusion step: key/value assembly over `[context; x]` followed by
    /// multi-head attention with queries from `x` only.
    pub fn attend(&self, x: &Mat<T>, context: Option<&Mat<T>>, lookahead: Option<usize>) -> Mat<T> {
        let source_owned;
        let source = match context {
            Some(c) => {
                source_owned = Mat::concat_rows(&[c, x]);
                &source_owned
            }
            None => x,
        };
        let c_rows = source.rows - x.rows;
        let q = self.wq.apply(x);
        let k = self.wk.apply(source);
        let v = self.wv.apply(source);
        let d = x.cols;
        let dk = d / self.heads;
        let scale = T::from(1.0 / (dk as f64).sqrt()).unwrap();
        let mut joined = Mat::zeros(x.rows, d);
        let mut qh = Mat::zeros(x.rows, dk);
        let mut kh = Mat::zeros(source.rows, dk);
        let mut vh = Mat::zeros(source.rows, dk);
        for h in 0..self.heads {
            let cols = h * dk..(h + 1) * dk;
            for r in 0..x.rows {
                qh.row_mut(r).copy_from_slice(&q.row(r)[cols.clone()]);
            }
            for r in 0..source.rows {
                kh.row_mut(r).copy_from_slice(&k.row(r)[cols.clone()]);
                vh.row_mut(r).copy_from_slice(&v.row(r)[cols.clone()]);
            }
            let mut p = qh.matmul_nt(&kh);
            p.scale(scale);
            match lookahead {
                Some(w) => p.softmax_rows_where(|t, s| s < c_rows || s - c_rows <= t + w),
                None => p.softmax_rows_where(|_, _| true),
            }
            let o = p.matmul(&vh);
            for r in 0..x.rows {
                joined.row_mut(r)[cols.clone()].copy_from_slice(o.row(r));
            }
        }
        self.wo.apply(&joined)
    }

    fn conv(&self, x: &Mat<T>, padding: Padding) -> Mat<T> {
        let h = self.pw1.apply(x);
        let d = x.cols;
        let mut g = Mat::zeros(x.rows, d);
        for r in 0..x.rows {
            let (a, b) = h.row(r).split_at(d);
            for (o, (&a, &b)) in g.row_mut(r).iter_mut().zip(a.iter().zip(b)) {
                *o = a * sigmoid(b);
            }
        }
        let g = self.pw2.apply(&g);
        let k = self.dw_kernel.rows;
        let pad_left = match padding {
            Padding::Same => (k - 1) / 2,
            Padding::Causal => k - 1,
            Padding::Valid => 0,
        };
        let mut y = Mat::zeros(x.rows, d);
        for t in 0..x.rows {
            for c in 0..d {
                let mut s = self.dw_bias[c];
                for j in 0..k {
                    let src = (t + j) as isize - pad_left as isize;
                    if src >= 0 && (src as usize) < x.rows {
                        s = s + self.dw_kernel.data[j * d + c] * g.data[src as usize * d + c];
                    }
                }
                let s = s * self.bn_scale[c] + self.bn_shift[c];
                y.data[t * d + c] = swish(s);
            }
        }
        self.pw3.apply(&y)
    }

    fn layer_norm(&self, x: &mut Mat<T>) {
        let n = T::from(x.cols).unwrap();
        let eps = T::from(NORM_EPS).unwrap();
        for r in 0..x.rows {
            let row = x.row_mut(r);
            let mean = row.iter().fold(T::zero(), |a, &b| a + b) / n;
            let var = row.iter().fold(T::zero(), |a, &b| a + (b - mean) * (b - mean)) / n;
            let inv = T::one() / (var + eps).sqrt();
            for (c, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv * self.ln_gain[c] + self.ln_bias[c];
            }
        }
    }

    pub fn forward(&self, x: &Mat<T>, context: Option<&Mat<T>>, time: TimeMode) -> Mat<T> {
        let half = T::from(0.5).unwrap();
        let mut f = self.ffn1.apply(x);
        f.scale(half);
        f.add(x);
        let x0 = f;
        let mut x1 = self.attend(&x0, context, time.lookahead);
        x1.add(&x0);
        let mut x2 = self.conv(&x1, time.padding);
        x2.add(&x1);
        let mut y = self.ffn2.apply(&x2);
        y.scale(half);
        y.add(&x2);
        self.layer_norm(&mut y);
        y
    }
}

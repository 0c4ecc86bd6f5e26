//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value; node ids are
//! therefore a topological order and the backward pass is a single reverse
//! sweep. Values are matrices unless stated otherwise.

use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::tensor::{matmul_into, matmul_nt_into, matmul_tn_into, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Swish(Var),
    Glu(Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    BatchNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    FixedNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, std: Vec<f64> },
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    Depthwise { x: Var, kernel: Var, bias: Var, pad_left: usize },
    Conv2d { x: Var, weight: Var, bias: Var, stride: usize, pad: usize },
    ChannelsToFrames(Var),
    Gather { table: Var, ids: Vec<usize> },
    OuterSum(Var, Var),
    SumAll(Var),
    Dropout { x: Var, mask: Vec<f64> },
    /// Scalar loss whose gradient w.r.t. `x` was computed during the forward pass.
    Precomputed { x: Var, grad: Tensor },
    StopGradient,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Padding applied to a 1-D convolution along time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// No padding: output length `T - K + 1`.
    Valid,
    /// `(K-1)/2` zeros on both sides, output length `T`.
    Same,
    /// `K-1` zeros on the left only, output length `T`.
    Causal,
}

/// The tape. Build it with the op methods, then call [`Graph::backward`].
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    params: HashMap<ParamId, Var>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: HashMap::new(),
            grad_enabled: true,
        }
    }

    /// A tape that only evaluates; nothing is tracked for gradients.
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Gradient of the last `backward` root w.r.t. `v`, if any reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let tracked = self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].tracked);
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    /// A constant: never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is recorded (used by gradient checks and probes).
    pub fn input(&mut self, value: Tensor) -> Var {
        let tracked = self.grad_enabled;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf for a model parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let tracked = self.grad_enabled;
        self.nodes.push(Node {
            value: store.value(id).clone(),
            op: Op::Param,
            tracked,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    /// Identity in the forward pass; blocks all gradient flow to `x`.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.nodes.push(Node {
            value,
            op: Op::StopGradient,
            tracked: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn check_2d(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::InvalidShape {
                op,
                msg: format!("expected a matrix, got shape {s:?}"),
            });
        }
        Ok((s[0], s[1]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.check_2d("matmul", a)?;
        let (k2, n) = self.check_2d("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::matrix(m, n, out), Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.check_2d("matmul_nt", a)?;
        let (n, k2) = self.check_2d("matmul_nt", b)?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        matmul_nt_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::matrix(m, n, out), Op::MatMulNT(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.check_2d("transpose", x)?;
        let value = self.value(x).transpose();
        Ok(self.push(value, Op::Transpose(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    fn row_broadcast(&self, op: &'static str, x: Var, row: Var) -> Result<(usize, usize)> {
        let (m, n) = self.check_2d(op, x)?;
        if self.shape(row) != [1, n] {
            return Err(Error::shape(op, self.shape(x), self.shape(row)));
        }
        Ok((m, n))
    }

    /// `x + row`, broadcasting a `[1×n]` row over every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (m, n) = self.row_broadcast("add_row", x, row)?;
        let (vx, vr) = (self.value(x).data(), self.value(row).data());
        let data = (0..m * n).map(|i| vx[i] + vr[i % n]).collect();
        Ok(self.push(Tensor::matrix(m, n, data), Op::AddRow(x, row), &[x, row]))
    }

    /// `x ⊙ row`, broadcasting a `[1×n]` row over every row of `x`.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (m, n) = self.row_broadcast("mul_row", x, row)?;
        let (vx, vr) = (self.value(x).data(), self.value(row).data());
        let data = (0..m * n).map(|i| vx[i] * vr[i % n]).collect();
        Ok(self.push(Tensor::matrix(m, n, data), Op::MulRow(x, row), &[x, row]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v * c);
        self.push(value, Op::Scale(x, c), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(value, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        self.push(value, Op::Sigmoid(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::tanh);
        self.push(value, Op::Tanh(x), &[x])
    }

    pub fn swish(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * sigmoid(v));
        self.push(value, Op::Swish(x), &[x])
    }

    /// Gated linear unit: splits the last axis into `[a | b]`, returns `a ⊙ σ(b)`.
    pub fn glu(&mut self, x: Var) -> Result<Var> {
        let (m, n2) = self.check_2d("glu", x)?;
        if n2 % 2 != 0 {
            return Err(Error::InvalidShape {
                op: "glu",
                msg: format!("last axis must be even, got {n2}"),
            });
        }
        let n = n2 / 2;
        let vx = self.value(x).data();
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            for c in 0..n {
                data.push(vx[r * n2 + c] * sigmoid(vx[r * n2 + n + c]));
            }
        }
        Ok(self.push(Tensor::matrix(m, n, data), Op::Glu(x), &[x]))
    }

    /// Row-wise softmax. Columns where `mask` is false get probability exactly
    /// zero and never influence the result.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let (m, n) = self.check_2d("softmax", x)?;
        if let Some(mask) = mask {
            if mask.len() != m * n {
                return Err(Error::shape("softmax mask", &[m, n], &[mask.len()]));
            }
        }
        let vx = self.value(x).data();
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &vx[r * n..(r + 1) * n];
            let allowed = |c: usize| mask.is_none_or(|mk| mk[r * n + c]);
            let mut max = f64::NEG_INFINITY;
            for (c, &v) in row.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::NonFinite("softmax"));
                }
                if allowed(c) && v > max {
                    max = v;
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::InvalidShape {
                    op: "softmax",
                    msg: format!("row {r} has no allowed column"),
                });
            }
            let mut sum = 0.0;
            for c in 0..n {
                if allowed(c) {
                    let e = (row[c] - max).exp();
                    out[r * n + c] = e;
                    sum += e;
                }
            }
            for c in 0..n {
                out[r * n + c] /= sum;
            }
        }
        Ok(self.push(Tensor::matrix(m, n, out), Op::Softmax(x), &[x]))
    }

    /// Per-row normalisation to zero mean / unit variance, then `gain ⊙ · + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.row_broadcast("layer_norm", x, gain)?;
        self.row_broadcast("layer_norm", x, bias)?;
        let (vx, vg, vb) = (self.value(x).data(), self.value(gain).data(), self.value(bias).data());
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &vx[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let std = (var + eps).sqrt();
            inv_std[r] = 1.0 / std;
            for c in 0..n {
                let h = (row[c] - mean) / std;
                xhat[r * n + c] = h;
                out[r * n + c] = h * vg[c] + vb[c];
            }
        }
        let op = Op::LayerNorm { x, gain, bias, xhat, inv_std };
        Ok(self.push(Tensor::matrix(m, n, out), op, &[x, gain, bias]))
    }

    /// Batch normalisation with batch statistics: each column is normalised
    /// over all rows, then scaled by `gain` and shifted by `bias`.
    /// Also returns the per-column batch mean and (population) variance.
    pub fn batch_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let (m, n) = self.row_broadcast("batch_norm", x, gain)?;
        self.row_broadcast("batch_norm", x, bias)?;
        let (vx, vg, vb) = (self.value(x).data(), self.value(gain).data(), self.value(bias).data());
        let mut means = vec![0.0; n];
        let mut vars = vec![0.0; n];
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; n];
        let mut out = vec![0.0; m * n];
        for c in 0..n {
            let mut sum = 0.0;
            for r in 0..m {
                sum += vx[r * n + c];
            }
            let mean = sum / m as f64;
            let mut sq = 0.0;
            for r in 0..m {
                let d = vx[r * n + c] - mean;
                sq += d * d;
            }
            let var = sq / m as f64;
            let std = (var + eps).sqrt();
            means[c] = mean;
            vars[c] = var;
            inv_std[c] = 1.0 / std;
            for r in 0..m {
                let h = (vx[r * n + c] - mean) / std;
                xhat[r * n + c] = h;
                out[r * n + c] = h * vg[c] + vb[c];
            }
        }
        let op = Op::BatchNorm { x, gain, bias, xhat, inv_std };
        let y = self.push(Tensor::matrix(m, n, out), op, &[x, gain, bias]);
        Ok((y, means, vars))
    }

    /// Column-wise normalisation with fixed statistics (batch norm in
    /// evaluation mode): `(x - mean) / sqrt(var + eps) ⊙ gain + bias`.
    pub fn normalize_fixed(&mut self, x: Var, mean: &[f64], var: &[f64], gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.row_broadcast("normalize_fixed", x, gain)?;
        self.row_broadcast("normalize_fixed", x, bias)?;
        if mean.len() != n || var.len() != n {
            return Err(Error::shape("normalize_fixed", &[n], &[mean.len(), var.len()]));
        }
        let std: Vec<f64> = var.iter().map(|v| (v + eps).sqrt()).collect();
        let (vx, vg, vb) = (self.value(x).data(), self.value(gain).data(), self.value(bias).data());
        let mut xhat = vec![0.0; m * n];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            for c in 0..n {
                let h = (vx[r * n + c] - mean[c]) / std[c];
                xhat[r * n + c] = h;
                out[r * n + c] = h * vg[c] + vb[c];
            }
        }
        let op = Op::FixedNorm { x, gain, bias, xhat, std };
        Ok(self.push(Tensor::matrix(m, n, out), op, &[x, gain, bias]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::concat_rows(&refs)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let rows = self.value(x).rows();
        if start + len > rows {
            return Err(Error::Index {
                what: "rows",
                index: start + len,
                size: rows,
            });
        }
        let value = self.value(x).slice_rows(start, len);
        Ok(self.push(value, Op::SliceRows { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = parts.first().map_or(0, |&p| self.value(p).rows());
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.check_2d("concat_cols", p)?;
            if r != m {
                return Err(Error::shape("concat_cols", &[m], &[r]));
            }
            total += c;
        }
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        Ok(self.push(Tensor::matrix(m, total, data), Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.check_2d("slice_cols", x)?;
        if start + len > n {
            return Err(Error::Index {
                what: "cols",
                index: start + len,
                size: n,
            });
        }
        let vx = self.value(x).data();
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&vx[r * n + start..r * n + start + len]);
        }
        Ok(self.push(Tensor::matrix(m, len, data), Op::SliceCols { x, start }, &[x]))
    }

    /// Depth-wise 1-D convolution over time. `x: [T×C]`, `kernel: [K×C]`,
    /// `bias: [1×C]`.
    pub fn depthwise_conv1d(&mut self, x: Var, kernel: Var, bias: Var, padding: Padding) -> Result<Var> {
        let (t_in, c) = self.check_2d("depthwise_conv1d", x)?;
        let (k, ck) = self.check_2d("depthwise_conv1d", kernel)?;
        if ck != c {
            return Err(Error::shape("depthwise_conv1d", self.shape(x), self.shape(kernel)));
        }
        self.row_broadcast("depthwise_conv1d", x, bias)?;
        let (pad_left, pad_right) = match padding {
            Padding::Valid => (0, 0),
            Padding::Same => ((k - 1) / 2, k / 2),
            Padding::Causal => (k - 1, 0),
        };
        let padded = t_in + pad_left + pad_right;
        if k > padded {
            return Err(Error::InvalidShape {
                op: "depthwise_conv1d",
                msg: format!("kernel width {k} exceeds padded input length {padded}"),
            });
        }
        let t_out = padded - k + 1;
        let (vx, vk, vb) = (self.value(x).data(), self.value(kernel).data(), self.value(bias).data());
        let mut out = vec![0.0; t_out * c];
        for t in 0..t_out {
            for ch in 0..c {
                let mut s = vb[ch];
                for j in 0..k {
                    let src = (t + j) as isize - pad_left as isize;
                    if src >= 0 && (src as usize) < t_in {
                        s += vk[j * c + ch] * vx[src as usize * c + ch];
                    }
                }
                out[t * c + ch] = s;
            }
        }
        let op = Op::Depthwise { x, kernel, bias, pad_left };
        Ok(self.push(Tensor::matrix(t_out, c, out), op, &[x, kernel, bias]))
    }

    /// 2-D convolution. `x: [C_in, H, W]`, `weight: [C_out, C_in, kh, kw]`,
    /// `bias: [1×C_out]`; zero padding `pad` on all sides.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] || self.shape(bias) != [1, ws[0]] {
            return Err(Error::shape("conv2d", &xs, &ws));
        }
        let (ci, h, w) = (xs[0], xs[1], xs[2]);
        let (co, kh, kw) = (ws[0], ws[2], ws[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::InvalidShape {
                op: "conv2d",
                msg: format!("kernel {kh}x{kw} exceeds padded input {}x{}", h + 2 * pad, w + 2 * pad),
            });
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        let (vx, vw, vb) = (self.value(x).data(), self.value(weight).data(), self.value(bias).data());
        let mut out = vec![0.0; co * ho * wo];
        for o in 0..co {
            for i in 0..ho {
                for j in 0..wo {
                    let mut s = vb[o];
                    for c in 0..ci {
                        for a in 0..kh {
                            let src_i = (i * stride + a) as isize - pad as isize;
                            if src_i < 0 || src_i as usize >= h {
                                continue;
                            }
                            for b in 0..kw {
                                let src_j = (j * stride + b) as isize - pad as isize;
                                if src_j < 0 || src_j as usize >= w {
                                    continue;
                                }
                                s += vw[((o * ci + c) * kh + a) * kw + b]
                                    * vx[(c * h + src_i as usize) * w + src_j as usize];
                            }
                        }
                    }
                    out[(o * ho + i) * wo + j] = s;
                }
            }
        }
        let value = Tensor::new(vec![co, ho, wo], out)?;
        let op = Op::Conv2d { x, weight, bias, stride, pad };
        Ok(self.push(value, op, &[x, weight, bias]))
    }

    /// `[C, T, F] -> [T, C·F]`.
    pub fn channels_to_frames(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::InvalidShape {
                op: "channels_to_frames",
                msg: format!("expected [C, T, F], got {s:?}"),
            });
        }
        let (c, t, f) = (s[0], s[1], s[2]);
        let vx = self.value(x).data();
        let mut out = vec![0.0; t * c * f];
        for ch in 0..c {
            for ti in 0..t {
                for fi in 0..f {
                    out[ti * c * f + ch * f + fi] = vx[(ch * t + ti) * f + fi];
                }
            }
        }
        Ok(self.push(Tensor::matrix(t, c * f, out), Op::ChannelsToFrames(x), &[x]))
    }

    /// Row lookup `table[ids]`; the backward pass scatters into the looked-up rows.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, e) = self.check_2d("gather_rows", table)?;
        let vt = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * e);
        for &id in ids {
            if id >= v {
                return Err(Error::Index {
                    what: "embedding table",
                    index: id,
                    size: v,
                });
            }
            data.extend_from_slice(&vt[id * e..(id + 1) * e]);
        }
        let op = Op::Gather { table, ids: ids.to_vec() };
        Ok(self.push(Tensor::matrix(ids.len(), e, data), op, &[table]))
    }

    /// `out[t·U + u] = a[t] + b[u]` for `a: [T×J]`, `b: [U×J]`.
    pub fn outer_sum(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, j) = self.check_2d("outer_sum", a)?;
        let (u, j2) = self.check_2d("outer_sum", b)?;
        if j != j2 {
            return Err(Error::shape("outer_sum", self.shape(a), self.shape(b)));
        }
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(t * u * j);
        for ti in 0..t {
            for ui in 0..u {
                for k in 0..j {
                    out.push(va[ti * j + k] + vb[ui * j + k]);
                }
            }
        }
        Ok(self.push(Tensor::matrix(t * u, j, out), Op::OuterSum(a, b), &[a, b]))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::SumAll(x), &[x])
    }

    /// Inverted dropout with a pre-drawn keep mask (entries are 0 or 1/(1-p)).
    pub fn dropout(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        if mask.len() != self.value(x).numel() {
            return Err(Error::shape("dropout", self.shape(x), &[mask.len()]));
        }
        let vx = self.value(x);
        let data = vx.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Dropout { x, mask }, &[x]))
    }

    /// Records a scalar whose gradient with respect to `x` is already known.
    pub fn precomputed_scalar(&mut self, x: Var, value: f64, grad: Tensor) -> Result<Var> {
        if grad.shape() != self.shape(x) {
            return Err(Error::shape("precomputed_scalar", self.shape(x), grad.shape()));
        }
        Ok(self.push(Tensor::scalar(value), Op::Precomputed { x, grad }, &[x]))
    }

    /// Reverse sweep from a scalar root. Gradients are kept on the graph
    /// until the next call.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(Error::InvalidShape {
                op: "backward",
                msg: format!("root must be a scalar, got {:?}", self.shape(root)),
            });
        }
        let n = self.nodes.len();
        self.grads = (0..n).map(|_| None).collect();
        if !self.nodes[root.0].tracked {
            return Ok(());
        }
        self.grads[root.0] = Some(Tensor::full(self.shape(root), 1.0));
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        for i in (0..=root.0).rev() {
            if !nodes[i].tracked {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            backprop_node(nodes, grads, i, &gy);
            grads[i] = Some(gy);
        }
        Ok(())
    }

    /// Adds the gradients reaching parameter leaves into the store.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for (&id, &v) in &self.params {
            if let Some(g) = self.grad(v) {
                for (acc, &x) in store.get_mut(id).grad.data_mut().iter_mut().zip(g.data()) {
                    *acc += x;
                }
            }
        }
    }
}

/// Accumulates into the gradient slot of `v` if it is tracked.
fn acc(nodes: &[Node], grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
    if !nodes[v.0].tracked {
        return;
    }
    let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(nodes[v.0].value.shape()));
    f(slot.data_mut());
}

fn backprop_node(nodes: &[Node], grads: &mut [Option<Tensor>], i: usize, gy: &Tensor) {
    let node = &nodes[i];
    let y = node.value.data();
    let dy = gy.data();
    let val = |v: Var| &nodes[v.0].value;
    match &node.op {
        Op::Leaf | Op::Param | Op::StopGradient => {}
        Op::MatMul(a, b) => {
            let (m, k) = (val(*a).rows(), val(*a).cols());
            let n = val(*b).cols();
            acc(nodes, grads, *a, |g| matmul_nt_into(dy, val(*b).data(), g, m, n, k));
            acc(nodes, grads, *b, |g| matmul_tn_into(val(*a).data(), dy, g, m, k, n));
        }
        Op::MatMulNT(a, b) => {
            let (m, k) = (val(*a).rows(), val(*a).cols());
            let n = val(*b).rows();
            acc(nodes, grads, *a, |g| matmul_into(dy, val(*b).data(), g, m, n, k));
            acc(nodes, grads, *b, |g| matmul_tn_into(dy, val(*a).data(), g, m, n, k));
        }
        Op::Transpose(x) => {
            let t = gy.transpose();
            acc(nodes, grads, *x, |g| add_into(g, t.data()));
        }
        Op::Reshape(x) => {
            acc(nodes, grads, *x, |g| add_into(g, dy));
        }
        Op::SumAll(x) => {
            let d = dy[0];
            acc(nodes, grads, *x, |g| g.iter_mut().for_each(|v| *v += d));
        }
        Op::Add(a, b) => {
            acc(nodes, grads, *a, |g| add_into(g, dy));
            acc(nodes, grads, *b, |g| add_into(g, dy));
        }
        Op::Sub(a, b) => {
            acc(nodes, grads, *a, |g| add_into(g, dy));
            acc(nodes, grads, *b, |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g -= d));
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a).data(), val(*b).data());
            acc(nodes, grads, *a, |g| {
                for k in 0..g.len() {
                    g[k] += dy[k] * vb[k];
                }
            });
            acc(nodes, grads, *b, |g| {
                for k in 0..g.len() {
                    g[k] += dy[k] * va[k];
                }
            });
        }
        Op::AddRow(x, row) => {
            let n = val(*row).numel();
            acc(nodes, grads, *x, |g| add_into(g, dy));
            acc(nodes, grads, *row, |g| {
                for (k, d) in dy.iter().enumerate() {
                    g[k % n] += d;
                }
            });
        }
        Op::MulRow(x, row) => {
            let n = val(*row).numel();
            let (vx, vr) = (val(*x).data(), val(*row).data());
            acc(nodes, grads, *x, |g| {
                for k in 0..g.len() {
                    g[k] += dy[k] * vr[k % n];
                }
            });
            acc(nodes, grads, *row, |g| {
                for (k, d) in dy.iter().enumerate() {
                    g[k % n] += d * vx[k];
                }
            });
        }
        Op::Scale(x, c) => {
            acc(nodes, grads, *x, |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += c * d));
        }
        Op::Relu(x) => {
            let vx = val(*x).data();
            acc(nodes, grads, *x, |g| {
                for k in 0..g.len() {
                    if vx[k] > 0.0 {
                        g[k] += dy[k];
                    }
                }
            });
        }
        Op::Sigmoid(x) => {
            acc(nodes, grads, *x, |g| {
                for k in 0..g.len() {
                    g[k] += dy[k] * y[k] * (1.0 - y[k]);
                }
            });
        }
        Op::Tanh(x) => {
            acc(nodes, grads, *x, |g| {
                for k in 0..g.len() {
                    g[k] += dy[k] * (1.0 - y[k] * y[k]);
                }
            });
        }
        Op::Swish(x) => {
            let vx = val(*x).data();
            acc(nodes, grads, *x, |g| {
                for k in 0..g.len() {
                    let s = sigmoid(vx[k]);
                    g[k] += dy[k] * (s + vx[k] * s * (1.0 - s));
                }
            });
        }
        Op::Glu(x) => {
            let vx = val(*x).data();
            let n2 = val(*x).cols();
            let n = n2 / 2;
            let m = val(*x).rows();
            acc(nodes, grads, *x, |g| {
                for r in 0..m {
                    for c in 0..n {
                        let a = vx[r * n2 + c];
                        let s = sigmoid(vx[r * n2 + n + c]);
                        let d = dy[r * n + c];
                        g[r * n2 + c] += d * s;
                        g[r * n2 + n + c] += d * a * s * (1.0 - s);
                    }
                }
            });
        }
        Op::Softmax(x) => {
            let (m, n) = (node.value.rows(), node.value.cols());
            acc(nodes, grads, *x, |g| {
                for r in 0..m {
                    let yr = &y[r * n..(r + 1) * n];
                    let dr = &dy[r * n..(r + 1) * n];
                    let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                    for c in 0..n {
                        g[r * n + c] += yr[c] * (dr[c] - dot);
                    }
                }
            });
        }
        Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
            let (m, n) = (node.value.rows(), node.value.cols());
            let vg = val(*gain).data();
            acc(nodes, grads, *gain, |g| {
                for k in 0..m * n {
                    g[k % n] += dy[k] * xhat[k];
                }
            });
            acc(nodes, grads, *bias, |g| {
                for k in 0..m * n {
                    g[k % n] += dy[k];
                }
            });
            acc(nodes, grads, *x, |g| {
                let mut dxhat = vec![0.0; n];
                for r in 0..m {
                    let mut sum = 0.0;
                    let mut dot = 0.0;
                    for c in 0..n {
                        let d = dy[r * n + c] * vg[c];
                        dxhat[c] = d;
                        sum += d;
                        dot += d * xhat[r * n + c];
                    }
                    let nf = n as f64;
                    for c in 0..n {
                        g[r * n + c] += inv_std[r] / nf * (nf * dxhat[c] - sum - xhat[r * n + c] * dot);
                    }
                }
            });
        }
        Op::BatchNorm { x, gain, bias, xhat, inv_std } => {
            let (m, n) = (node.value.rows(), node.value.cols());
            let vg = val(*gain).data();
            acc(nodes, grads, *gain, |g| {
                for k in 0..m * n {
                    g[k % n] += dy[k] * xhat[k];
                }
            });
            acc(nodes, grads, *bias, |g| {
                for k in 0..m * n {
                    g[k % n] += dy[k];
                }
            });
            acc(nodes, grads, *x, |g| {
                let mf = m as f64;
                for c in 0..n {
                    let mut sum = 0.0;
                    let mut dot = 0.0;
                    for r in 0..m {
                        let d = dy[r * n + c] * vg[c];
                        sum += d;
                        dot += d * xhat[r * n + c];
                    }
                    for r in 0..m {
                        let d = dy[r * n + c] * vg[c];
                        g[r * n + c] += inv_std[c] / mf * (mf * d - sum - xhat[r * n + c] * dot);
                    }
                }
            });
        }
        Op::FixedNorm { x, gain, bias, xhat, std } => {
            let n = node.value.cols();
            let vg = val(*gain).data();
            acc(nodes, grads, *gain, |g| {
                for (k, d) in dy.iter().enumerate() {
                    g[k % n] += d * xhat[k];
                }
            });
            acc(nodes, grads, *bias, |g| {
                for (k, d) in dy.iter().enumerate() {
                    g[k % n] += d;
                }
            });
            acc(nodes, grads, *x, |g| {
                for (k, d) in dy.iter().enumerate() {
                    g[k] += d * vg[k % n] / std[k % n];
                }
            });
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let len = val(p).numel();
                acc(nodes, grads, p, |g| add_into(g, &dy[offset..offset + len]));
                offset += len;
            }
        }
        Op::SliceRows { x, start } => {
            let c = val(*x).cols();
            let off = start * c;
            acc(nodes, grads, *x, |g| add_into(&mut g[off..off + dy.len()], dy));
        }
        Op::ConcatCols(parts) => {
            let (m, total) = (node.value.rows(), node.value.cols());
            let mut offset = 0;
            for &p in parts {
                let c = val(p).cols();
                acc(nodes, grads, p, |g| {
                    for r in 0..m {
                        add_into(&mut g[r * c..(r + 1) * c], &dy[r * total + offset..r * total + offset + c]);
                    }
                });
                offset += c;
            }
        }
        Op::SliceCols { x, start } => {
            let (m, len) = (node.value.rows(), node.value.cols());
            let n = val(*x).cols();
            acc(nodes, grads, *x, |g| {
                for r in 0..m {
                    add_into(&mut g[r * n + start..r * n + start + len], &dy[r * len..(r + 1) * len]);
                }
            });
        }
        Op::Depthwise { x, kernel, bias, pad_left } => {
            let (t_in, c) = (val(*x).rows(), val(*x).cols());
            let k = val(*kernel).rows();
            let t_out = node.value.rows();
            let (vx, vk) = (val(*x).data(), val(*kernel).data());
            let src = |t: usize, j: usize| -> Option<usize> {
                let s = (t + j) as isize - *pad_left as isize;
                (s >= 0 && (s as usize) < t_in).then_some(s as usize)
            };
            acc(nodes, grads, *x, |g| {
                for t in 0..t_out {
                    for j in 0..k {
                        if let Some(s) = src(t, j) {
                            for ch in 0..c {
                                g[s * c + ch] += dy[t * c + ch] * vk[j * c + ch];
                            }
                        }
                    }
                }
            });
            acc(nodes, grads, *kernel, |g| {
                for t in 0..t_out {
                    for j in 0..k {
                        if let Some(s) = src(t, j) {
                            for ch in 0..c {
                                g[j * c + ch] += dy[t * c + ch] * vx[s * c + ch];
                            }
                        }
                    }
                }
            });
            acc(nodes, grads, *bias, |g| {
                for t in 0..t_out {
                    for ch in 0..c {
                        g[ch] += dy[t * c + ch];
                    }
                }
            });
        }
        Op::Conv2d { x, weight, bias, stride, pad } => {
            let xs = val(*x).shape();
            let ws = val(*weight).shape();
            let (ci, h, w) = (xs[0], xs[1], xs[2]);
            let (co, kh, kw) = (ws[0], ws[2], ws[3]);
            let os = node.value.shape();
            let (ho, wo) = (os[1], os[2]);
            let (vx, vw) = (val(*x).data(), val(*weight).data());
            let (stride, pad) = (*stride, *pad);
            let mut gx = vec![0.0; vx.len()];
            let mut gw = vec![0.0; vw.len()];
            let mut gb = vec![0.0; co];
            for o in 0..co {
                for i in 0..ho {
                    for j in 0..wo {
                        let d = dy[(o * ho + i) * wo + j];
                        if d == 0.0 {
                            continue;
                        }
                        gb[o] += d;
                        for c in 0..ci {
                            for a in 0..kh {
                                let si = (i * stride + a) as isize - pad as isize;
                                if si < 0 || si as usize >= h {
                                    continue;
                                }
                                for b in 0..kw {
                                    let sj = (j * stride + b) as isize - pad as isize;
                                    if sj < 0 || sj as usize >= w {
                                        continue;
                                    }
                                    let xi = (c * h + si as usize) * w + sj as usize;
                                    let wi = ((o * ci + c) * kh + a) * kw + b;
                                    gx[xi] += d * vw[wi];
                                    gw[wi] += d * vx[xi];
                                }
                            }
                        }
                    }
                }
            }
            acc(nodes, grads, *x, |g| add_into(g, &gx));
            acc(nodes, grads, *weight, |g| add_into(g, &gw));
            acc(nodes, grads, *bias, |g| add_into(g, &gb));
        }
        Op::ChannelsToFrames(x) => {
            let s = val(*x).shape();
            let (c, t, f) = (s[0], s[1], s[2]);
            acc(nodes, grads, *x, |g| {
                for ch in 0..c {
                    for ti in 0..t {
                        for fi in 0..f {
                            g[(ch * t + ti) * f + fi] += dy[ti * c * f + ch * f + fi];
                        }
                    }
                }
            });
        }
        Op::Gather { table, ids } => {
            let e = val(*table).cols();
            acc(nodes, grads, *table, |g| {
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut g[id * e..(id + 1) * e], &dy[r * e..(r + 1) * e]);
                }
            });
        }
        Op::OuterSum(a, b) => {
            let (t, j) = (val(*a).rows(), val(*a).cols());
            let u = val(*b).rows();
            acc(nodes, grads, *a, |g| {
                for ti in 0..t {
                    for ui in 0..u {
                        add_into(&mut g[ti * j..(ti + 1) * j], &dy[(ti * u + ui) * j..(ti * u + ui + 1) * j]);
                    }
                }
            });
            acc(nodes, grads, *b, |g| {
                for ti in 0..t {
                    for ui in 0..u {
                        add_into(&mut g[ui * j..(ui + 1) * j], &dy[(ti * u + ui) * j..(ti * u + ui + 1) * j]);
                    }
                }
            });
        }
        Op::Dropout { x, mask } => {
            acc(nodes, grads, *x, |g| {
                for k in 0..g.len() {
                    g[k] += dy[k] * mask[k];
                }
            });
        }
        Op::Precomputed { x, grad } => {
            let d = dy[0];
            acc(nodes, grads, *x, |g| {
                g.iter_mut().zip(grad.data()).for_each(|(g, v)| *g += d * v);
            });
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

//! Independent oracles and end-to-end probes shared by the acceptance run
//! and the integration tests. Nothing here reuses the library's arithmetic
//! when checking that arithmetic.

#![allow(dead_code)]

use crossutt::context::{AttentionPool, CacheEntry};
use crossutt::data::{serialize, Annotations, Corpus, Utterance};
use crossutt::encoder::ContextMode;
use crossutt::harness::train::TrainHeader;
use crossutt::harness::{batch_gradients, Checkpoint, ExperimentConfig, Trainer};
use crossutt::numerics::gradcheck::{check_gradients, relative_error, weighted_sum, FD_STEP};
use crossutt::numerics::layers::NORM_EPS;
use crossutt::numerics::{Ctx, Graph, Padding, ParamStore, Rng, Tensor, Var};
use crossutt::transducer::{rnnt_loss, BatchItem, CacheInput, Lattice, ModelConfig, Transducer};

/// `Ok(detail)` on success, `Err(reason)` on failure.
pub type Outcome = Result<String, String>;

pub fn random_tensor(rng: &mut Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| scale * rng.normal()).collect()).unwrap()
}

fn same_bits(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
}

// ---------------------------------------------------------------------------
// Finite differences for every tape operation and for the whole model.

type Build = Box<dyn Fn(&mut Graph, &[Var]) -> crossutt::Result<Var>>;

struct OpCase {
    name: &'static str,
    inputs: Vec<Tensor>,
    build: Build,
    /// The op already yields a scalar loss.
    scalar: bool,
}

fn op(name: &'static str, inputs: Vec<Tensor>, build: Build) -> OpCase {
    OpCase {
        name,
        inputs,
        build,
        scalar: false,
    }
}

fn op_cases(rng: &mut Rng) -> Vec<OpCase> {
    let mut r = |shape: &[usize]| random_tensor(rng, shape, 1.0);
    let (a34, b34, c24, b42) = (r(&[3, 4]), r(&[3, 4]), r(&[2, 4]), r(&[4, 2]));
    let (row4, row4b, table) = (r(&[1, 4]), r(&[1, 4]), r(&[5, 4]));
    let (seq, kern, bias2) = (r(&[7, 2]), r(&[3, 2]), r(&[1, 2]));
    let (img, wt, bias3) = (r(&[2, 7, 5]), r(&[3, 2, 3, 3]), r(&[1, 3]));
    let logits = r(&[3 * 3, 4]);
    let mut mrng = Rng::new(404);
    let keep: Vec<f64> = (0..12).map(|_| if mrng.bernoulli(0.8) { 1.0 / 0.8 } else { 0.0 }).collect();
    let mask: Vec<bool> = (0..12).map(|i| i % 4 != 1 || i == 5).collect();
    let fixed_mean = vec![0.1, -0.3, 0.2, 0.0];
    let fixed_var = vec![1.5, 0.4, 2.0, 0.9];
    vec![
        op("matmul", vec![a34.clone(), b42.clone()], Box::new(|g, v| g.matmul(v[0], v[1]))),
        op("matmul_nt", vec![a34.clone(), c24.clone()], Box::new(|g, v| g.matmul_nt(v[0], v[1]))),
        op("transpose", vec![a34.clone()], Box::new(|g, v| g.transpose(v[0]))),
        op("reshape", vec![a34.clone()], Box::new(|g, v| g.reshape(v[0], vec![2, 6]))),
        op("add", vec![a34.clone(), b34.clone()], Box::new(|g, v| g.add(v[0], v[1]))),
        op("sub", vec![a34.clone(), b34.clone()], Box::new(|g, v| g.sub(v[0], v[1]))),
        op("mul", vec![a34.clone(), b34.clone()], Box::new(|g, v| g.mul(v[0], v[1]))),
        op("add_row", vec![a34.clone(), row4.clone()], Box::new(|g, v| g.add_row(v[0], v[1]))),
        op("mul_row", vec![a34.clone(), row4.clone()], Box::new(|g, v| g.mul_row(v[0], v[1]))),
        op("scale", vec![a34.clone()], Box::new(|g, v| Ok(g.scale(v[0], -1.7)))),
        op("relu", vec![a34.clone()], Box::new(|g, v| Ok(g.relu(v[0])))),
        op("sigmoid", vec![a34.clone()], Box::new(|g, v| Ok(g.sigmoid(v[0])))),
        op("tanh", vec![a34.clone()], Box::new(|g, v| Ok(g.tanh(v[0])))),
        op("swish", vec![a34.clone()], Box::new(|g, v| Ok(g.swish(v[0])))),
        op("glu", vec![a34.clone()], Box::new(|g, v| g.glu(v[0]))),
        op("softmax_rows", vec![a34.clone()], Box::new(|g, v| g.softmax_rows(v[0], None))),
        op(
            "softmax_rows_masked",
            vec![a34.clone()],
            Box::new(move |g, v| g.softmax_rows(v[0], Some(&mask))),
        ),
        op(
            "layer_norm",
            vec![a34.clone(), row4.clone(), row4b.clone()],
            Box::new(|g, v| g.layer_norm(v[0], v[1], v[2], NORM_EPS)),
        ),
        op(
            "batch_norm",
            vec![a34.clone(), row4.clone(), row4b.clone()],
            Box::new(|g, v| Ok(g.batch_norm(v[0], v[1], v[2], NORM_EPS)?.0)),
        ),
        op(
            "normalize_fixed",
            vec![a34.clone(), row4.clone(), row4b.clone()],
            Box::new(move |g, v| g.normalize_fixed(v[0], &fixed_mean, &fixed_var, v[1], v[2], NORM_EPS)),
        ),
        op(
            "concat_rows",
            vec![a34.clone(), c24.clone()],
            Box::new(|g, v| g.concat_rows(&[v[0], v[1], v[0]])),
        ),
        op("slice_rows", vec![a34.clone()], Box::new(|g, v| g.slice_rows(v[0], 1, 2))),
        op("concat_cols", vec![a34.clone(), b42.clone()], Box::new(|g, v| {
            let t = g.transpose(v[1])?;
            let t = g.slice_rows(t, 0, 1)?;
            let t = g.reshape(t, vec![4, 1])?;
            let s = g.slice_rows(t, 0, 3)?;
            g.concat_cols(&[v[0], s])
        })),
        op("slice_cols", vec![a34.clone()], Box::new(|g, v| g.slice_cols(v[0], 1, 2))),
        op(
            "depthwise_conv1d_same",
            vec![seq.clone(), kern.clone(), bias2.clone()],
            Box::new(|g, v| g.depthwise_conv1d(v[0], v[1], v[2], Padding::Same)),
        ),
        op(
            "depthwise_conv1d_causal",
            vec![seq.clone(), kern.clone(), bias2.clone()],
            Box::new(|g, v| g.depthwise_conv1d(v[0], v[1], v[2], Padding::Causal)),
        ),
        op(
            "depthwise_conv1d_valid",
            vec![seq, kern, bias2],
            Box::new(|g, v| g.depthwise_conv1d(v[0], v[1], v[2], Padding::Valid)),
        ),
        op(
            "conv2d_channels_to_frames",
            vec![img, wt, bias3],
            Box::new(|g, v| {
                let y = g.conv2d(v[0], v[1], v[2], 2, 1)?;
                g.channels_to_frames(y)
            }),
        ),
        op("gather_rows", vec![table], Box::new(|g, v| g.gather_rows(v[0], &[4, 0, 4, 2]))),
        op("outer_sum", vec![a34.clone(), c24], Box::new(|g, v| g.outer_sum(v[0], v[1]))),
        op("dropout", vec![a34.clone()], Box::new(move |g, v| g.dropout(v[0], keep.clone()))),
        OpCase {
            name: "sum_all",
            inputs: vec![a34],
            build: Box::new(|g, v| {
                let t = g.tanh(v[0]);
                Ok(g.sum_all(t))
            }),
            scalar: true,
        },
        OpCase {
            name: "transducer_loss",
            inputs: vec![logits],
            build: Box::new(|g, v| Ok(rnnt_loss(g, v[0], 3, &[2, 1])?.0)),
            scalar: true,
        },
    ]
}

/// Central differences for every differentiable tape op. Returns
/// `(op, max relative error)` per op; stop-gradient is checked separately
/// since its defined gradient is zero by construction.
pub fn op_gradient_errors(seed: u64) -> crossutt::Result<Vec<(&'static str, f64)>> {
    let mut rng = Rng::new(seed);
    let cases = op_cases(&mut rng);
    let mut out = Vec::with_capacity(cases.len() + 1);
    for case in cases {
        let report = if case.scalar {
            check_gradients(&case.inputs, FD_STEP, |g, v| (case.build)(g, v))?
        } else {
            let mut g = Graph::no_grad();
            let vars: Vec<Var> = case.inputs.iter().map(|t| g.constant(t.clone())).collect();
            let y = (case.build)(&mut g, &vars)?;
            let w = random_tensor(&mut rng, g.shape(y), 1.0);
            check_gradients(&case.inputs, FD_STEP, |g, v| {
                let y = (case.build)(g, v)?;
                weighted_sum(g, y, &w)
            })?
        };
        out.push((case.name, report.max_rel_err));
    }
    // stop_gradient: identity forward, nothing backward.
    let x = random_tensor(&mut rng, &[2, 3], 1.0);
    let mut g = Graph::new();
    let v = g.input(x.clone());
    let s = g.stop_gradient(v);
    let w = random_tensor(&mut rng, &[2, 3], 1.0);
    let l = weighted_sum(&mut g, s, &w)?;
    g.backward(l)?;
    let forward_ok = g.value(s) == &x;
    let grad_zero = g.grad(v).is_none_or(|t| t.data().iter().all(|&d| d == 0.0));
    out.push(("stop_gradient", if forward_ok && grad_zero { 0.0 } else { f64::INFINITY }));
    Ok(out)
}

/// Desk-sized model with context, dropout off, for gradient checks.
pub fn gradcheck_model(mode: ContextMode, streaming: bool, seed: u64) -> crossutt::Result<Transducer> {
    let mut cfg = ModelConfig::desk();
    cfg.encoder.dropout = 0.0;
    cfg.encoder.context_mode = mode;
    cfg.encoder.streaming = streaming;
    cfg.vocab_size = 6;
    let mut model = Transducer::new(cfg, seed)?;
    // Move batch-norm affine terms and running statistics off their
    // identity initialisation so every parameter has a generic gradient.
    let mut rng = Rng::new(seed ^ 0x5eed);
    let names: Vec<(String, Vec<usize>)> = model
        .store
        .iter()
        .filter(|p| p.name.contains(".bn."))
        .map(|p| (p.name.clone(), p.value.shape().to_vec()))
        .collect();
    for (name, shape) in names {
        let base = if name.ends_with("gain") { 1.0 } else { 0.0 };
        let t = random_tensor(&mut rng, &shape, 0.2).map(|v| v + base);
        model.store.set_value(&name, t)?;
    }
    Ok(model)
}

/// A cache entry built from a random earlier utterance, with raw frames and
/// predictor state, as the trainer would store it.
pub fn make_entry(model: &Transducer, clip: &str, raw_frames: usize, rng: &mut Rng) -> crossutt::Result<CacheEntry> {
    let features = random_tensor(rng, &[raw_frames, model.config.encoder.input_dim], 1.0);
    let decoded = model.decode(&features, &[], None)?;
    model.cache_entry(clip, &decoded.layers, Some(decoded.predictor_state), true)
}

pub struct ModelGradCheck {
    pub checked: usize,
    pub tensors: usize,
    pub max_rel_err: f64,
    pub worst: String,
    /// Norm of the analytic gradient on the pooling parameters.
    pub pool_grad_norm: f64,
}

/// Central differences of the full training loss (encoder, fusion,
/// pooling, predictor with carry-over, joint, transducer loss) against the
/// tape, on `per_tensor` sampled coordinates of every parameter tensor
/// (all coordinates of tensors that small).
pub fn model_gradient_check(
    mode: ContextMode,
    streaming: bool,
    per_tensor: usize,
    seed: u64,
) -> crossutt::Result<ModelGradCheck> {
    let model = gradcheck_model(mode, streaming, seed)?;
    let mut rng = Rng::new(seed.wrapping_add(1));
    let input_dim = model.config.encoder.input_dim;
    // 24 and 21 raw frames both give 6 encoder frames.
    let f1 = random_tensor(&mut rng, &[24, input_dim], 1.0);
    let f2 = random_tensor(&mut rng, &[21, input_dim], 1.0);
    let (l1, l2) = (vec![3, 1, 5], vec![2, 4]);
    let e1 = make_entry(&model, "a", 19, &mut rng)?;
    let e2 = make_entry(&model, "b", 13, &mut rng)?;
    let context = mode != ContextMode::None;
    let items = || {
        vec![
            BatchItem {
                features: &f1,
                labels: &l1,
                entries: if context { vec![&e1] } else { vec![] },
            },
            BatchItem {
                features: &f2,
                labels: &l2,
                entries: if context { vec![&e2] } else { vec![] },
            },
        ]
    };
    let analytic = batch_gradients(&model, &items(), CacheInput::Constant, None)?;
    let loss_at = |store: &ParamStore| -> crossutt::Result<f64> {
        let mut ctx = Ctx::train(store, 0.0, None);
        let fwd = model.forward_batch(&mut ctx, &items(), CacheInput::Constant)?;
        Ok(ctx.graph.value(fwd.loss).data()[0])
    };
    let mut store = model.store.clone();
    let ids: Vec<_> = store.ids().collect();
    let mut report = ModelGradCheck {
        checked: 0,
        tensors: ids.len(),
        max_rel_err: 0.0,
        worst: String::new(),
        pool_grad_norm: 0.0,
    };
    for (pi, &id) in ids.iter().enumerate() {
        if store.get(id).name.starts_with("context.pool") {
            report.pool_grad_norm = report.pool_grad_norm.hypot(analytic.params[pi].norm());
        }
        let n = store.value(id).numel();
        let coords: Vec<usize> = if n <= per_tensor {
            (0..n).collect()
        } else {
            (0..per_tensor).map(|_| rng.below(n)).collect()
        };
        for k in coords {
            let orig = store.value(id).data()[k];
            store.get_mut(id).value.data_mut()[k] = orig + FD_STEP;
            let plus = loss_at(&store)?;
            store.get_mut(id).value.data_mut()[k] = orig - FD_STEP;
            let minus = loss_at(&store)?;
            store.get_mut(id).value.data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic.params[pi].data()[k];
            let e = relative_error(a, numeric);
            report.checked += 1;
            if e > report.max_rel_err || report.worst.is_empty() {
                report.max_rel_err = report.max_rel_err.max(e);
                report.worst = format!("{}[{k}]: tape {a:.6e} vs fd {numeric:.6e}", store.get(id).name);
            }
        }
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Transducer loss by exhaustive path enumeration.

fn log_softmax_row(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = z.iter().map(|v| (v - m).exp()).sum();
    z.iter().map(|v| v - m - s.ln()).collect()
}

/// Every alignment path through the `T×(U+1)` lattice as the list of
/// `(t, u, emitted)` steps, the final blank included.
pub fn alignment_paths(frames: usize, labels: &[usize]) -> Vec<Vec<(usize, usize, usize)>> {
    fn walk(
        t: usize,
        u: usize,
        frames: usize,
        labels: &[usize],
        path: &mut Vec<(usize, usize, usize)>,
        out: &mut Vec<Vec<(usize, usize, usize)>>,
    ) {
        let n = labels.len();
        if t == frames - 1 && u == n {
            path.push((t, u, 0));
            out.push(path.clone());
            path.pop();
            return;
        }
        if t + 1 < frames {
            path.push((t, u, 0));
            walk(t + 1, u, frames, labels, path, out);
            path.pop();
        }
        if u < n {
            path.push((t, u, labels[u]));
            walk(t, u + 1, frames, labels, path, out);
            path.pop();
        }
    }
    let mut out = Vec::new();
    walk(0, 0, frames, labels, &mut Vec::new(), &mut out);
    out
}

/// `(loss, ∂loss/∂logits)` by summing over every path. Logit row
/// `t·(U+1)+u` holds the distribution at lattice node `(t, u)`.
pub fn enumerated_loss(logits: &Tensor, frames: usize, labels: &[usize]) -> (f64, Tensor) {
    let v = logits.cols();
    let width = labels.len() + 1;
    let lp: Vec<Vec<f64>> = (0..logits.rows()).map(|r| log_softmax_row(logits.row(r))).collect();
    let paths = alignment_paths(frames, labels);
    let probs: Vec<f64> = paths
        .iter()
        .map(|p| p.iter().map(|&(t, u, k)| lp[t * width + u][k]).sum::<f64>().exp())
        .collect();
    let total: f64 = probs.iter().sum();
    let mut grad = vec![0.0; logits.numel()];
    for (path, &pp) in paths.iter().zip(&probs) {
        let w = pp / total;
        for &(t, u, e) in path {
            let row = t * width + u;
            for k in 0..v {
                let indicator = if k == e { 1.0 } else { 0.0 };
                grad[row * v + k] -= w * (indicator - lp[row][k].exp());
            }
        }
    }
    (-total.ln(), Tensor::matrix(logits.rows(), v, grad))
}

fn label_sequences(len: usize, vocab: usize) -> Vec<Vec<usize>> {
    if len == 0 {
        return vec![vec![]];
    }
    if vocab < 2 {
        return vec![];
    }
    let mut out = Vec::new();
    for prefix in label_sequences(len - 1, vocab) {
        for y in 1..vocab {
            let mut s = prefix.clone();
            s.push(y);
            out.push(s);
        }
    }
    out
}

pub struct LossOracleReport {
    pub cases: usize,
    pub max_loss_err: f64,
    pub max_grad_err: f64,
}

/// Compares the lattice loss and its gradient (directly and through the
/// tape) with enumeration for every `T ≤ max_t`, `U ≤ max_u`, `V ≤ max_v`
/// and every label sequence, with `draws` random logit tensors each.
pub fn transducer_oracle(max_t: usize, max_u: usize, max_v: usize, draws: usize, seed: u64) -> crossutt::Result<LossOracleReport> {
    let mut rng = Rng::new(seed);
    let mut rep = LossOracleReport {
        cases: 0,
        max_loss_err: 0.0,
        max_grad_err: 0.0,
    };
    for t in 1..=max_t {
        for u in 0..=max_u {
            for v in 1..=max_v {
                for labels in label_sequences(u, v) {
                    for _ in 0..draws {
                        let logits = random_tensor(&mut rng, &[t * (u + 1), v], 2.0);
                        let (want, want_grad) = enumerated_loss(&logits, t, &labels);
                        let lat = Lattice::from_logits(&logits, t, &labels)?;
                        let mut g = Graph::new();
                        let z = g.input(logits.clone());
                        let (l, _) = rnnt_loss(&mut g, z, t, &labels)?;
                        g.backward(l)?;
                        let tape_grad = g.grad(z).cloned().unwrap_or_else(|| Tensor::zeros(logits.shape()));
                        rep.cases += 1;
                        rep.max_loss_err = rep
                            .max_loss_err
                            .max((lat.loss() - want).abs())
                            .max((g.value(l).data()[0] - want).abs())
                            .max((lat.log_likelihood_backward() + want).abs());
                        rep.max_grad_err = rep
                            .max_grad_err
                            .max(lat.grad_logits().max_abs_diff(&want_grad))
                            .max(tape_grad.max_abs_diff(&want_grad));
                    }
                }
            }
        }
    }
    Ok(rep)
}

// ---------------------------------------------------------------------------
// Attention pooling, written out as plain loops.

pub struct PoolParams {
    /// `[L×D]`.
    pub projection: Tensor,
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl PoolParams {
    pub fn random(rng: &mut Rng, slots: usize, dim: usize) -> Self {
        Self {
            projection: random_tensor(rng, &[slots, dim], 0.7),
            gain: (0..slots).map(|_| rng.uniform(0.5, 2.0)).collect(),
            bias: (0..slots).map(|_| 0.3 * rng.normal()).collect(),
            running_mean: (0..slots).map(|_| 0.2 * rng.normal()).collect(),
            running_var: (0..slots).map(|_| rng.uniform(0.3, 2.0)).collect(),
        }
    }

    /// A store holding one pooling layer with these values.
    pub fn install(&self) -> crossutt::Result<(ParamStore, AttentionPool)> {
        let (l, d) = (self.projection.rows(), self.projection.cols());
        let mut store = ParamStore::new();
        let pool = AttentionPool::new(&mut store, &mut Rng::new(0), "pool", l, d)?;
        store.set_value("pool.projection", self.projection.clone())?;
        store.set_value("pool.bn.gain", Tensor::row_vector(self.gain.clone()))?;
        store.set_value("pool.bn.bias", Tensor::row_vector(self.bias.clone()))?;
        store.set_value("pool.bn.running_mean", Tensor::row_vector(self.running_mean.clone()))?;
        store.set_value("pool.bn.running_var", Tensor::row_vector(self.running_var.clone()))?;
        Ok((store, pool))
    }
}

/// `relu(E hᵀ)`, `[L×T]`.
fn oracle_scores(p: &PoolParams, h: &Tensor) -> Vec<Vec<f64>> {
    let (slots, dim) = (p.projection.rows(), p.projection.cols());
    let mut s = vec![vec![0.0; h.rows()]; slots];
    for l in 0..slots {
        for t in 0..h.rows() {
            let mut acc = 0.0;
            for d in 0..dim {
                acc += p.projection.get(l, d) * h.get(t, d);
            }
            s[l][t] = (0.0 + acc).max(0.0);
        }
    }
    s
}

/// Softmax over time, then the weighted average of the frames.
fn oracle_finish(normed: Vec<Vec<f64>>, h: &Tensor) -> (Tensor, Tensor) {
    let (slots, frames, dim) = (normed.len(), h.rows(), h.cols());
    let mut w = vec![0.0; slots * frames];
    let mut pooled = vec![0.0; slots * dim];
    for l in 0..slots {
        let max = normed[l].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for t in 0..frames {
            let e = (normed[l][t] - max).exp();
            w[l * frames + t] = e;
            sum += e;
        }
        for t in 0..frames {
            w[l * frames + t] /= sum;
        }
        for t in 0..frames {
            let wt = w[l * frames + t];
            for d in 0..dim {
                pooled[l * dim + d] += wt * h.get(t, d);
            }
        }
    }
    (Tensor::matrix(slots, dim, pooled), Tensor::matrix(slots, frames, w))
}

/// Evaluation-mode pooling with running statistics: `(pooled, weights)`.
pub fn oracle_pool_eval(p: &PoolParams, h: &Tensor) -> (Tensor, Tensor) {
    let mut s = oracle_scores(p, h);
    for (l, row) in s.iter_mut().enumerate() {
        let std = (p.running_var[l] + NORM_EPS).sqrt();
        for v in row.iter_mut() {
            *v = (*v - p.running_mean[l]) / std * p.gain[l] + p.bias[l];
        }
    }
    oracle_finish(s, h)
}

/// Training-mode pooling of several histories, with score statistics taken
/// over every frame of every history.
pub fn oracle_pool_train(p: &PoolParams, hs: &[Tensor]) -> Vec<(Tensor, Tensor)> {
    let scores: Vec<Vec<Vec<f64>>> = hs.iter().map(|h| oracle_scores(p, h)).collect();
    let slots = p.projection.rows();
    let m: usize = hs.iter().map(Tensor::rows).sum();
    let mut stats = Vec::with_capacity(slots);
    for l in 0..slots {
        let mut sum = 0.0;
        for s in &scores {
            for &v in &s[l] {
                sum += v;
            }
        }
        let mean = sum / m as f64;
        let mut sq = 0.0;
        for s in &scores {
            for &v in &s[l] {
                sq += (v - mean) * (v - mean);
            }
        }
        stats.push((mean, (sq / m as f64 + NORM_EPS).sqrt()));
    }
    scores
        .into_iter()
        .zip(hs)
        .map(|(mut s, h)| {
            for (l, row) in s.iter_mut().enumerate() {
                let (mean, std) = stats[l];
                for v in row.iter_mut() {
                    *v = (*v - mean) / std * p.gain[l] + p.bias[l];
                }
            }
            oracle_finish(s, h)
        })
        .collect()
}

pub fn library_pool_eval(p: &PoolParams, h: &Tensor) -> crossutt::Result<(Tensor, Tensor)> {
    let (store, pool) = p.install()?;
    let mut ctx = Ctx::eval(&store);
    let v = ctx.graph.constant(h.clone());
    let out = pool.forward(&mut ctx, v)?;
    Ok((ctx.graph.value(out.pooled).clone(), ctx.graph.value(out.weights).clone()))
}

pub fn library_pool_train(p: &PoolParams, hs: &[Tensor]) -> crossutt::Result<Vec<(Tensor, Tensor)>> {
    let (store, pool) = p.install()?;
    let mut ctx = Ctx::train(&store, 0.0, None);
    let vs: Vec<Var> = hs.iter().map(|h| ctx.graph.constant(h.clone())).collect();
    let outs = pool.forward_many(&mut ctx, &vs)?;
    Ok(outs
        .iter()
        .map(|o| (ctx.graph.value(o.pooled).clone(), ctx.graph.value(o.weights).clone()))
        .collect())
}

fn f32_round(t: Tensor) -> Tensor {
    t.map(|v| v as f32 as f64)
}

/// All pooling properties: exact agreement with the loop oracle on
/// `instances` random cases in both modes, row-stochastic weights, and the
/// single-frame and constant-history cases.
pub fn pooling_oracle(instances: usize, seed: u64) -> Outcome {
    let mut rng = Rng::new(seed);
    let mut worst_row = 0.0f64;
    for i in 0..instances {
        let (slots, dim, frames) = (rng.range(1, 7), rng.range(1, 9), rng.range(1, 21));
        let p = PoolParams::random(&mut rng, slots, dim);
        let h = random_tensor(&mut rng, &[frames, dim], 1.0);
        let got = library_pool_eval(&p, &h).map_err(|e| e.to_string())?;
        let want = oracle_pool_eval(&p, &h);
        if got.0 != want.0 || got.1 != want.1 {
            return Err(format!(
                "eval instance {i} (L={slots} D={dim} T={frames}) differs by {:.3e}/{:.3e}",
                got.0.max_abs_diff(&want.0),
                got.1.max_abs_diff(&want.1)
            ));
        }
        let hs: Vec<Tensor> = (0..rng.range(1, 4))
            .map(|_| {
                let t = rng.range(1, 21);
                random_tensor(&mut rng, &[t, dim], 1.0)
            })
            .collect();
        let got = library_pool_train(&p, &hs).map_err(|e| e.to_string())?;
        let want = oracle_pool_train(&p, &hs);
        for (j, (g, w)) in got.iter().zip(&want).enumerate() {
            if g.0 != w.0 || g.1 != w.1 {
                return Err(format!("train instance {i} history {j} differs from the oracle"));
            }
        }
        for w in std::iter::once(&want_weights(&p, &h)).chain(got.iter().map(|g| &g.1)) {
            for l in 0..w.rows() {
                let s: f64 = w.row(l).iter().sum();
                worst_row = worst_row.max((s - 1.0).abs());
                if w.row(l).iter().any(|&x| x < 0.0) {
                    return Err(format!("instance {i}: negative weight"));
                }
            }
        }
    }
    if worst_row > 1e-9 {
        return Err(format!("row sums off by {worst_row:.3e}"));
    }
    // One frame: weight exactly one, output exactly the frame.
    for _ in 0..20 {
        let (slots, dim) = (rng.range(1, 7), rng.range(1, 9));
        let p = PoolParams::random(&mut rng, slots, dim);
        let h = random_tensor(&mut rng, &[1, dim], 3.0);
        let (pooled, w) = library_pool_eval(&p, &h).map_err(|e| e.to_string())?;
        let train = library_pool_train(&p, std::slice::from_ref(&h)).map_err(|e| e.to_string())?;
        for (pooled, w) in [(pooled, w), train[0].clone()] {
            if w.data().iter().any(|&x| x != 1.0) || (0..slots).any(|l| pooled.row(l) != h.row(0)) {
                return Err("single-frame history is not passed through unchanged".into());
            }
        }
    }
    // Constant history: uniform weights, output the repeated frame. Frames
    // are f32-representable and T a power of two, so the average is exact.
    for k in 0..30 {
        let (slots, dim) = (rng.range(1, 7), rng.range(1, 9));
        let frames = 1 << (k % 6);
        let p = PoolParams::random(&mut rng, slots, dim);
        let frame = f32_round(random_tensor(&mut rng, &[1, dim], 2.0));
        let rows: Vec<&Tensor> = (0..frames).map(|_| &frame).collect();
        let h = Tensor::concat_rows(&rows).map_err(|e| e.to_string())?;
        let (pooled, w) = library_pool_eval(&p, &h).map_err(|e| e.to_string())?;
        let train = library_pool_train(&p, std::slice::from_ref(&h)).map_err(|e| e.to_string())?;
        let uniform = 1.0 / frames as f64;
        for (pooled, w) in [(pooled, w), train[0].clone()] {
            if w.data().iter().any(|&x| x != uniform) {
                return Err(format!("constant history of {frames} frames: weights not uniform"));
            }
            if (0..slots).any(|l| pooled.row(l) != frame.row(0)) {
                return Err(format!("constant history of {frames} frames: output differs from the frame"));
            }
        }
    }
    Ok(format!(
        "{instances} random instances exact in eval and train mode, max row-sum error {worst_row:.1e}, degenerate cases exact"
    ))
}

fn want_weights(p: &PoolParams, h: &Tensor) -> Tensor {
    oracle_pool_eval(p, h).1
}

// ---------------------------------------------------------------------------
// Training-loop probes.

/// Small synthetic setup for training-loop checks.
pub fn small_experiment(mode: ContextMode, seed: u64) -> (ExperimentConfig, Corpus) {
    let mut cfg = ExperimentConfig::default();
    cfg.seed = seed;
    cfg.model.encoder.context_mode = mode;
    cfg.train.batch_size = 4;
    cfg.train.warmup_steps = 5;
    cfg.train.log_wall_time = false;
    cfg.corpus.clips = 10;
    let corpus = crossutt::data::generate(&cfg.corpus, seed + 100).expect("corpus");
    (cfg, corpus)
}

fn batch_items<'a>(trainer: &'a Trainer, corpus: &'a Corpus, active: &[(usize, usize)]) -> Vec<BatchItem<'a>> {
    active
        .iter()
        .map(|&(slot, u)| {
            let utt = &corpus.utterances[u];
            BatchItem {
                features: &utt.features,
                labels: &utt.labels,
                entries: trainer.cache.read(slot, &utt.clip_id),
            }
        })
        .collect()
}

/// After a training step has filled the cache: runs the next batch with
/// recording leaves behind a stop-gradient and again with plain constants
/// under the same dropout masks. Gradients on the cache must be zero and
/// the parameter gradients identical to the bit.
pub fn stop_gradient_probe(mode: ContextMode, seed: u64) -> Outcome {
    let (cfg, mut corpus) = small_experiment(mode, seed);
    let mut trainer = Trainer::new(cfg, corpus.vocab.clone()).map_err(|e| e.to_string())?;
    trainer.prepare(&mut corpus).map_err(|e| e.to_string())?;
    let mut probed = 0;
    let mut leaves = 0;
    while probed < 3 {
        trainer.train_step(&corpus).map_err(|e| e.to_string())?.ok_or("training ended before the probe")?;
        let active = trainer
            .next_assignments(&corpus)
            .map_err(|e| e.to_string())?
            .ok_or("training ended before the probe")?;
        let items = batch_items(&trainer, &corpus, &active);
        if items.iter().all(|it| it.entries.is_empty()) {
            continue;
        }
        let rng = Some(trainer.rng.clone());
        let model = &trainer.model;
        let detached = batch_gradients(model, &items, CacheInput::Detached, rng.clone()).map_err(|e| e.to_string())?;
        let constant = batch_gradients(model, &items, CacheInput::Constant, rng).map_err(|e| e.to_string())?;
        if detached.cache_leaves.is_empty() {
            return Err("context active but no cached tensor entered the tape".into());
        }
        for g in detached.cache_leaves.iter().flatten() {
            if g.data().iter().any(|&v| v != 0.0) {
                return Err("non-zero gradient reached a cached tensor".into());
            }
        }
        if detached.loss.to_bits() != constant.loss.to_bits() {
            return Err("loss differs between detached and constant cache".into());
        }
        for (k, (a, b)) in detached.params.iter().zip(&constant.params).enumerate() {
            if !same_bits(a, b) {
                let name = &trainer.model.store.iter().nth(k).expect("param").name;
                return Err(format!("parameter gradient {name} differs between detached and constant cache"));
            }
        }
        leaves += detached.cache_leaves.len();
        probed += 1;
    }
    Ok(format!("{mode}: 3 steps probed, {leaves} cached tensors with zero gradient, parameter gradients bit-identical"))
}

/// Metrics log of a fresh run.
pub fn metrics_log(cfg: &ExperimentConfig, corpus: &Corpus, steps: u64) -> crossutt::Result<Vec<u8>> {
    let mut cfg = cfg.clone();
    cfg.train.max_steps = Some(steps);
    cfg.train.log_wall_time = false;
    let mut corpus = corpus.clone();
    let mut trainer = Trainer::new(cfg, corpus.vocab.clone())?;
    trainer.prepare(&mut corpus)?;
    let mut log = Vec::new();
    trainer.run(&corpus, &mut log, None, |_| {})?;
    Ok(log)
}

/// Identical seeds give identical logs; a checkpoint taken mid-epoch
/// reproduces the following steps exactly, both in memory and via a file.
pub fn determinism_check(mode: ContextMode, seed: u64) -> Outcome {
    let err = |e: crossutt::Error| e.to_string();
    let (cfg, corpus) = small_experiment(mode, seed);
    let a = metrics_log(&cfg, &corpus, 25).map_err(err)?;
    let b = metrics_log(&cfg, &corpus, 25).map_err(err)?;
    if a.is_empty() || a != b {
        return Err("metrics logs differ between identical runs".into());
    }
    let mut other = cfg.clone();
    other.seed += 1;
    if metrics_log(&other, &corpus, 25).map_err(err)? == a {
        return Err("a different seed produced the same log".into());
    }
    let mut corpus = corpus;
    let mut trainer = Trainer::new(cfg, corpus.vocab.clone()).map_err(err)?;
    trainer.prepare(&mut corpus).map_err(err)?;
    for _ in 0..13 {
        trainer.train_step(&corpus).map_err(err)?;
    }
    let bytes = trainer.checkpoint().and_then(|c| c.to_bytes()).map_err(err)?;
    let restored = Checkpoint::<TrainHeader>::from_bytes(&bytes).and_then(|c| Trainer::from_checkpoint(&c));
    let mut restored = restored.map_err(err)?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("resume.ctxc");
    trainer.checkpoint().and_then(|c| c.save(&path)).map_err(err)?;
    let mut from_file = Trainer::load(&path).map_err(err)?;
    for k in 0..5 {
        let want = trainer.train_step(&corpus).map_err(err)?.ok_or("run ended")?;
        for (name, t) in [("memory", &mut restored), ("file", &mut from_file)] {
            let got = t.train_step(&corpus).map_err(err)?.ok_or("resumed run ended")?;
            if got.loss.to_bits() != want.loss.to_bits() || got.lr.to_bits() != want.lr.to_bits() {
                return Err(format!(
                    "resume from {name}: step {} loss {} vs {}",
                    13 + k + 1,
                    got.loss,
                    want.loss
                ));
            }
        }
    }
    Ok(format!(
        "{mode}: identical {}-byte logs, resume after step 13 matches 5 further steps bit-exactly",
        a.len()
    ))
}

// ---------------------------------------------------------------------------
// Streaming causality.

/// Encoder outputs for `features` given one cached entry.
fn encoder_output(model: &Transducer, features: &Tensor, entry: Option<&CacheEntry>) -> crossutt::Result<Tensor> {
    let entries: Vec<&CacheEntry> = entry.into_iter().collect();
    let d = model.decode(features, &entries, None)?;
    Ok(d.layers.last().expect("blocks").clone())
}

/// For every encoder frame `t`, perturbs every raw frame beyond
/// `4(t + w·B) + 3` and requires row `t` of the encoder output to stay
/// bit-identical. Returns `(frames checked, rows that did react to the
/// first frame past the bound)`.
pub fn causality_check(lookahead: usize, mode: ContextMode, seed: u64) -> Result<(usize, usize), String> {
    let err = |e: crossutt::Error| e.to_string();
    let mut cfg = ModelConfig::desk();
    cfg.encoder.streaming = true;
    cfg.encoder.lookahead = lookahead;
    cfg.encoder.context_mode = mode;
    let model = Transducer::new(cfg, seed).map_err(err)?;
    let mut rng = Rng::new(seed + 7);
    let entry = if mode == ContextMode::None {
        None
    } else {
        Some(make_entry(&model, "c", 29, &mut rng).map_err(err)?)
    };
    let raw = 48;
    let input_dim = model.config.encoder.input_dim;
    let x = random_tensor(&mut rng, &[raw, input_dim], 1.0);
    let base = encoder_output(&model, &x, entry.as_ref()).map_err(err)?;
    let blocks = model.config.encoder.num_blocks;
    let mut checked = 0;
    let mut sensitive = 0;
    for t in 0..base.rows() {
        let bound = 4 * (t + lookahead * blocks) + 3;
        if bound + 1 >= raw {
            break;
        }
        let mut y = x.clone();
        for r in bound + 1..raw {
            for c in 0..input_dim {
                y.data_mut()[r * input_dim + c] += 5.0 * rng.normal();
            }
        }
        let out = encoder_output(&model, &y, entry.as_ref()).map_err(err)?;
        if !out.row(t).iter().zip(base.row(t)).all(|(a, b)| a.to_bits() == b.to_bits()) {
            return Err(format!("w={lookahead}: output frame {t} changed when frames after {bound} were perturbed"));
        }
        checked += 1;
        // The bound should be tight: touching the frame at it moves row t.
        let mut z = x.clone();
        for c in 0..input_dim {
            z.data_mut()[bound * input_dim + c] += 1.0;
        }
        let out = encoder_output(&model, &z, entry.as_ref()).map_err(err)?;
        if out.row(t) != base.row(t) {
            sensitive += 1;
        }
    }
    Ok((checked, sensitive))
}

// ---------------------------------------------------------------------------
// Serialization.

/// A corpus with the given clip sizes, utterances stored in a scrambled
/// order with random start times.
pub fn scrambled_corpus(clip_sizes: &[usize], seed: u64, feature_dim: usize) -> Corpus {
    let mut rng = Rng::new(seed);
    let mut utterances = Vec::new();
    for (c, &n) in clip_sizes.iter().enumerate() {
        let mut starts: Vec<f64> = (0..n).map(|_| rng.uniform(0.0, 100.0)).collect();
        starts.sort_by(f64::total_cmp);
        starts.dedup();
        for (i, &start_time) in starts.iter().enumerate() {
            let frames = rng.range(7, 12);
            utterances.push(Utterance {
                clip_id: format!("clip{c}"),
                start_time,
                features: random_tensor(&mut rng, &[frames, feature_dim], 1.0),
                labels: vec![1 + (c + i) % 3],
                annotations: Annotations::default(),
            });
        }
    }
    rng.shuffle(&mut utterances);
    Corpus {
        vocab: ["<blank>", "a", "b", "c"].map(String::from).to_vec(),
        utterances,
    }
}

/// Structural properties of one epoch plan.
pub fn check_plan(corpus: &Corpus, batch_size: usize, seed: u64, epoch: u64) -> Result<(), String> {
    let plan = serialize(corpus, batch_size, seed, epoch).map_err(|e| e.to_string())?;
    let n = corpus.utterances.len();
    let mut seen = vec![0usize; n];
    let mut owner: std::collections::HashMap<&str, usize> = Default::default();
    for slot in 0..batch_size {
        let mut prev: Option<usize> = None;
        for s in plan.slot(slot) {
            seen[s.utterance] += 1;
            let utt = &corpus.utterances[s.utterance];
            if *owner.entry(&utt.clip_id).or_insert(slot) != slot {
                return Err(format!("clip {} split across slots", utt.clip_id));
            }
            let clip_changed = prev.is_none_or(|p| corpus.utterances[p].clip_id != utt.clip_id);
            if s.reset != clip_changed {
                return Err(format!("reset marker {} at a clip change of {clip_changed}", s.reset));
            }
            if let Some(p) = prev.filter(|_| !clip_changed) {
                if corpus.utterances[p].start_time >= utt.start_time {
                    return Err(format!("clip {} out of start-time order in slot {slot}", utt.clip_id));
                }
            }
            prev = Some(s.utterance);
        }
    }
    // Clips must also be complete runs: the first utterance of each clip is
    // the earliest one.
    for clip in corpus.clips() {
        let first = plan
            .steps
            .iter()
            .flatten()
            .flatten()
            .find(|s| corpus.utterances[s.utterance].clip_id == clip.id)
            .expect("clip planned");
        if first.utterance != clip.utterances[0] || !first.reset {
            return Err(format!("clip {} does not start at its earliest utterance", clip.id));
        }
    }
    if let Some(u) = seen.iter().position(|&c| c != 1) {
        return Err(format!("utterance {u} planned {} times", seen[u]));
    }
    Ok(())
}

/// Tiny model for end-to-end serialization runs.
pub fn tiny_config(batch_size: usize, seed: u64, feature_dim: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.seed = seed;
    let enc = &mut cfg.model.encoder;
    enc.input_dim = feature_dim;
    enc.num_blocks = 1;
    enc.heads = 1;
    enc.dim = 8;
    enc.ffn_dim = 8;
    enc.kernel = 3;
    enc.subsample_channels = 2;
    enc.context_mode = ContextMode::Pooled;
    cfg.model.predictor.embed_dim = 4;
    cfg.model.predictor.hidden = 4;
    cfg.model.joint_dim = 4;
    cfg.model.vocab_size = 4;
    cfg.model.context.pool_slots = 2;
    cfg.train.batch_size = batch_size;
    cfg.train.epochs = 1;
    cfg.train.log_wall_time = false;
    cfg
}

/// Trains one epoch and checks, before every step, what each utterance
/// reads from the cache: nothing for the first utterance of a clip, the
/// preceding utterance of the same clip otherwise.
pub fn check_training_contexts(corpus: &Corpus, batch_size: usize, seed: u64) -> Result<(), String> {
    let err = |e: crossutt::Error| e.to_string();
    let dim = corpus.feature_dim().expect("non-empty");
    let mut corpus = corpus.clone();
    let mut trainer = Trainer::new(tiny_config(batch_size, seed, dim), corpus.vocab.clone()).map_err(err)?;
    trainer.prepare(&mut corpus).map_err(err)?;
    let first: std::collections::HashSet<usize> = corpus.clips().iter().map(|c| c.utterances[0]).collect();
    let mut processed = 0;
    while let Some(active) = trainer.next_assignments(&corpus).map_err(err)? {
        for (slot, u) in active {
            let clip = &corpus.utterances[u].clip_id;
            let all: Vec<&CacheEntry> = trainer.cache.entries(slot).collect();
            let visible = trainer.cache.read(slot, clip);
            if first.contains(&u) && !all.is_empty() {
                return Err(format!("first utterance of {clip} sees a non-empty cache"));
            }
            if !first.contains(&u) && (visible.len() != 1 || all.len() != 1) {
                return Err(format!("utterance of {clip} sees {} entries, expected its predecessor", visible.len()));
            }
            processed += 1;
        }
        trainer.train_step(&corpus).map_err(err)?;
    }
    if processed != corpus.utterances.len() {
        return Err(format!("processed {processed} of {} utterances", corpus.utterances.len()));
    }
    Ok(())
}

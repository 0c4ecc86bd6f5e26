//! Transducer loss by forward-backward over the `T×(U+1)` alignment lattice.

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

pub const BLANK: usize = 0;

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Log-probabilities over the lattice plus the forward and backward tables.
#[derive(Clone, Debug)]
pub struct Lattice {
    pub frames: usize,
    pub labels: Vec<usize>,
    pub vocab: usize,
    /// `[T×(U+1)×V]`.
    pub log_probs: Vec<f64>,
    /// `[T×(U+1)]`.
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

impl Lattice {
    /// Builds the lattice from unnormalised joint outputs, row `t·(U+1)+u`.
    pub fn from_logits(logits: &Tensor, frames: usize, labels: &[usize]) -> Result<Self> {
        let vocab = logits.cols();
        let mut log_probs = Vec::with_capacity(logits.numel());
        for r in 0..logits.rows() {
            let row = logits.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if !max.is_finite() {
                return Err(Error::NonFinite("joint logits"));
            }
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            log_probs.extend(row.iter().map(|z| z - lse));
        }
        Self::from_log_probs(log_probs, frames, labels, vocab)
    }

    pub fn from_log_probs(log_probs: Vec<f64>, frames: usize, labels: &[usize], vocab: usize) -> Result<Self> {
        if frames == 0 {
            return Err(Error::ImpossibleAlignment {
                frames,
                labels: labels.len(),
            });
        }
        if let Some(i) = labels.iter().position(|&y| y == BLANK) {
            return Err(Error::BlankInLabels(i));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= vocab) {
            return Err(Error::Index {
                what: "label",
                index: y,
                size: vocab,
            });
        }
        let cells = frames * (labels.len() + 1);
        if log_probs.len() != cells * vocab {
            return Err(Error::shape("lattice", &[frames, labels.len() + 1, vocab], &[log_probs.len()]));
        }
        let mut lat = Self {
            frames,
            labels: labels.to_vec(),
            vocab,
            log_probs,
            alpha: vec![f64::NEG_INFINITY; cells],
            beta: vec![f64::NEG_INFINITY; cells],
        };
        lat.forward();
        lat.backward();
        Ok(lat)
    }

    fn width(&self) -> usize {
        self.labels.len() + 1
    }

    fn cell(&self, t: usize, u: usize) -> usize {
        t * self.width() + u
    }

    pub fn lp(&self, t: usize, u: usize, k: usize) -> f64 {
        self.log_probs[self.cell(t, u) * self.vocab + k]
    }

    fn forward(&mut self) {
        let n = self.labels.len();
        for t in 0..self.frames {
            for u in 0..=n {
                let c = self.cell(t, u);
                if t == 0 && u == 0 {
                    self.alpha[c] = 0.0;
                    continue;
                }
                let mut a = f64::NEG_INFINITY;
                if t > 0 {
                    a = self.alpha[self.cell(t - 1, u)] + self.lp(t - 1, u, BLANK);
                }
                if u > 0 {
                    a = log_add(a, self.alpha[self.cell(t, u - 1)] + self.lp(t, u - 1, self.labels[u - 1]));
                }
                self.alpha[c] = a;
            }
        }
    }

    fn backward(&mut self) {
        let n = self.labels.len();
        let last = self.frames - 1;
        for t in (0..self.frames).rev() {
            for u in (0..=n).rev() {
                let c = self.cell(t, u);
                if t == last && u == n {
                    self.beta[c] = self.lp(t, u, BLANK);
                    continue;
                }
                let mut b = f64::NEG_INFINITY;
                if t < last {
                    b = self.beta[self.cell(t + 1, u)] + self.lp(t, u, BLANK);
                }
                if u < n {
                    b = log_add(b, self.beta[self.cell(t, u + 1)] + self.lp(t, u, self.labels[u]));
                }
                self.beta[c] = b;
            }
        }
    }

    /// `log P(y|x)` from the forward table.
    pub fn log_likelihood(&self) -> f64 {
        let n = self.labels.len();
        let last = self.frames - 1;
        self.alpha[self.cell(last, n)] + self.lp(last, n, BLANK)
    }

    /// `log P(y|x)` from the backward table.
    pub fn log_likelihood_backward(&self) -> f64 {
        self.beta[0]
    }

    pub fn loss(&self) -> f64 {
        -self.log_likelihood()
    }

    /// Posterior probability that an alignment passes through `(t, u)`.
    pub fn occupancy(&self, t: usize, u: usize) -> f64 {
        let c = self.cell(t, u);
        (self.alpha[c] + self.beta[c] - self.log_likelihood()).exp()
    }

    /// `∂loss/∂log_probs`, same layout as `log_probs`.
    pub fn grad_log_probs(&self) -> Vec<f64> {
        let n = self.labels.len();
        let last = self.frames - 1;
        let ll = self.log_likelihood();
        let mut g = vec![0.0; self.log_probs.len()];
        for t in 0..self.frames {
            for u in 0..=n {
                let c = self.cell(t, u);
                let a = self.alpha[c];
                if a == f64::NEG_INFINITY {
                    continue;
                }
                let next_blank = if t < last {
                    self.beta[self.cell(t + 1, u)]
                } else if u == n {
                    0.0
                } else {
                    f64::NEG_INFINITY
                };
                if next_blank > f64::NEG_INFINITY {
                    g[c * self.vocab + BLANK] = -(a + self.lp(t, u, BLANK) + next_blank - ll).exp();
                }
                if u < n {
                    let y = self.labels[u];
                    g[c * self.vocab + y] = -(a + self.lp(t, u, y) + self.beta[self.cell(t, u + 1)] - ll).exp();
                }
            }
        }
        g
    }

    /// `∂loss/∂logits` through the row-wise log-softmax.
    pub fn grad_logits(&self) -> Tensor {
        let glp = self.grad_log_probs();
        let v = self.vocab;
        let mut out = vec![0.0; glp.len()];
        for r in 0..glp.len() / v {
            let row = &glp[r * v..(r + 1) * v];
            let total: f64 = row.iter().sum();
            for k in 0..v {
                let p = self.log_probs[r * v + k].exp();
                out[r * v + k] = row[k] - p * total;
            }
        }
        Tensor::matrix(glp.len() / v, v, out)
    }
}

/// Records the transducer loss of `logits` on the tape. Returns the scalar
/// loss node and the lattice it was computed from.
pub fn rnnt_loss(g: &mut Graph, logits: Var, frames: usize, labels: &[usize]) -> Result<(Var, Lattice)> {
    let lattice = Lattice::from_logits(g.value(logits), frames, labels)?;
    let loss = g.precomputed_scalar(logits, lattice.loss(), lattice.grad_logits())?;
    Ok((loss, lattice))
}

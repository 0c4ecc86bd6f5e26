//! Central finite-difference gradient checking.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::Result;

pub const FD_STEP: f64 = 1e-5;

/// Relative error with a small floor so that gradients that are zero up to
/// round-off do not divide by zero.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-4);
    (analytic - numeric).abs() / denom
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// (input index, element index, analytic, numeric) of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    fn record(&mut self, input: usize, elem: usize, a: f64, n: f64) {
        self.checked += 1;
        let e = relative_error(a, n);
        if e > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = self.max_rel_err.max(e);
            if e >= self.max_rel_err {
                self.worst = Some((input, elem, a, n));
            }
        }
    }
}

/// Compares the tape gradient of a scalar function of `inputs` against
/// central differences with step `h`. `build` must be deterministic.
pub fn check_gradients<F>(inputs: &[Tensor], h: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|&v| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(v))))
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut g = Graph::no_grad();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        Ok(g.value(out).data()[0])
    };

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: None,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for i in 0..inputs.len() {
        for k in 0..inputs[i].numel() {
            let orig = work[i].data()[k];
            work[i].data_mut()[k] = orig + h;
            let plus = eval(&work)?;
            work[i].data_mut()[k] = orig - h;
            let minus = eval(&work)?;
            work[i].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            report.record(i, k, analytic[i].data()[k], numeric);
        }
    }
    Ok(report)
}

/// Weighted sum `Σ w ⊙ x` with fixed weights; turns any tensor output into a
/// scalar whose gradient exercises every element.
pub fn weighted_sum(g: &mut Graph, x: Var, weights: &Tensor) -> Result<Var> {
    let w = g.constant(weights.clone());
    let p = g.mul(x, w)?;
    Ok(g.sum_all(p))
}

//! Central finite-difference gradient checking for 64-bit graphs.

use alloc::vec::Vec;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;
#[cfg(not(feature = "std"))]
use num_traits::Float as _;

/// Outcome of [`check_gradients`].
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `||analytic - numeric|| / max(||analytic||, ||numeric||, floor)` per input.
    pub rel_err: Vec<f64>,
    /// Largest absolute componentwise difference per input.
    pub max_abs_err: Vec<f64>,
    /// Norm of the analytic gradient per input.
    pub analytic_norm: Vec<f64>,
}

impl GradCheckReport {
    pub fn worst_rel_err(&self) -> f64 {
        self.rel_err.iter().copied().fold(0.0, f64::max)
    }
}

const NORM_FLOOR: f64 = 1e-8;

/// Compare the tape gradient of the scalar `f(inputs)` against central
/// differences with step `eps`, input by input. `f` must build the same
/// computation for any input values.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut report = GradCheckReport {
        rel_err: Vec::new(),
        max_abs_err: Vec::new(),
        analytic_norm: Vec::new(),
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(&g, v);
        let mut diff2 = 0.0;
        let mut a2 = 0.0;
        let mut n2 = 0.0;
        let mut max_abs = 0.0f64;
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - eps;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.data()[j];
            diff2 += (a - numeric) * (a - numeric);
            a2 += a * a;
            n2 += numeric * numeric;
            max_abs = max_abs.max((a - numeric).abs());
        }
        let denom = a2.sqrt().max(n2.sqrt()).max(NORM_FLOOR);
        report.rel_err.push(diff2.sqrt() / denom);
        report.max_abs_err.push(max_abs);
        report.analytic_norm.push(a2.sqrt());
    }
    Ok(report)
}

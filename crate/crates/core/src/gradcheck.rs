//! Central finite-difference checks for graph gradients.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Settings for a finite-difference comparison.
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    /// Central-difference step.
    pub step: f64,
    /// Lower bound on the denominator of the relative error, so that
    /// gradients at the finite-difference noise floor are compared absolutely.
    pub floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck { step: 1e-5, floor: 1e-3 }
    }
}

/// Outcome of checking one function against finite differences.
#[derive(Clone, Debug)]
pub struct CheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Number of scalar partial derivatives compared.
    pub checked: usize,
    /// `(input, element)` where the worst relative error occurred.
    pub worst: (usize, usize),
}

impl CheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

impl GradCheck {
    /// Compares the reverse-mode gradient of `f` with respect to every
    /// element of every input against central differences.
    ///
    /// `f` must build a scalar loss from the given input vars and be a pure
    /// function of their values.
    pub fn check<S, F>(&self, inputs: &[Tensor<S>], f: F) -> Result<CheckReport>
    where
        S: Scalar,
        F: Fn(&mut Graph<S>, &[Var]) -> Result<Var>,
    {
        let mut graph = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| graph.param(t.clone())).collect();
        let loss = f(&mut graph, &vars)?;
        let grads = graph.backward(loss)?;
        let analytic: Vec<Tensor<S>> = vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| grads.get_or_zeros(v, t.shape()))
            .collect();

        let eval = |values: &[Tensor<S>]| -> Result<f64> {
            let mut g = Graph::new();
            let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
            let loss = f(&mut g, &vars)?;
            Ok(g.value(loss).item().as_f64())
        };

        let h = S::lit(self.step);
        let mut report = CheckReport { max_rel_error: 0.0, max_abs_error: 0.0, checked: 0, worst: (0, 0) };
        let mut work: Vec<Tensor<S>> = inputs.to_vec();
        for (i, input) in inputs.iter().enumerate() {
            for j in 0..input.numel() {
                let orig = input.data()[j];
                work[i].data_mut()[j] = orig + h;
                let plus = eval(&work)?;
                work[i].data_mut()[j] = orig - h;
                let minus = eval(&work)?;
                work[i].data_mut()[j] = orig;
                // Divide by the step actually represented in S.
                let span = ((orig + h) - (orig - h)).as_f64();
                let numeric = (plus - minus) / span;
                let a = analytic[i].data()[j].as_f64();
                let rel = relative_error(a, numeric, self.floor);
                report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
                if rel > report.max_rel_error || rel.is_nan() {
                    report.max_rel_error = if rel.is_nan() { f64::INFINITY } else { rel };
                    report.worst = (i, j);
                }
                report.checked += 1;
            }
        }
        Ok(report)
    }
}

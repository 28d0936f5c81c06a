//! Central finite-difference gradient checking.
//!
//! The numerical side only ever calls the forward closure on fresh graphs,
//! so it stays independent of the backward code it is checking.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Outcome of a gradient check over all inputs.
#[derive(Clone, Debug)]
pub struct GradReport {
    /// ‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂) per input.
    pub relative_errors: Vec<f64>,
    pub analytic: Vec<Tensor<f64>>,
    pub numeric: Vec<Tensor<f64>>,
}

impl GradReport {
    pub fn max_relative_error(&self) -> f64 {
        self.relative_errors.iter().copied().fold(0.0, f64::max)
    }
}

/// Relative error between two gradient vectors; 0 when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-300 {
        0.0
    } else {
        diff / scale
    }
}

/// Compares the backward pass of `f` against central differences with `step`.
///
/// `f` receives a graph and one parameter leaf per input tensor and must
/// return a scalar.
pub fn check<F>(inputs: &[Tensor<f64>], step: f64, f: F) -> Result<GradReport>
where
    F: Fn(&Graph<f64>, &[Var]) -> Result<Var>,
{
    let graph = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| graph.param(t.clone())).collect();
    let loss = f(&graph, &vars)?;
    graph.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| graph.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let g = Graph::new();
        let vs: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&g, &vs)?;
        g.scalar(out)
    };

    let mut numeric = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (idx, input) in inputs.iter().enumerate() {
        let mut grad = vec![0.0; input.numel()];
        for (k, g) in grad.iter_mut().enumerate() {
            let orig = input.data()[k];
            work[idx].data_mut()[k] = orig + step;
            let plus = eval(&work)?;
            work[idx].data_mut()[k] = orig - step;
            let minus = eval(&work)?;
            work[idx].data_mut()[k] = orig;
            *g = (plus - minus) / (2.0 * step);
        }
        numeric.push(Tensor::new(input.shape().to_vec(), grad)?);
    }

    let relative_errors = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(a.data(), n.data()))
        .collect();
    Ok(GradReport { relative_errors, analytic, numeric })
}

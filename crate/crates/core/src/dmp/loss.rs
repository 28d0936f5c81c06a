//! Weighted composition of the base, sequential and parallel losses.

use mpa_autodiff::{Graph, Real, Var};
use serde::{Deserialize, Serialize};

use crate::error::{MpaError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_bs: f64,
    pub lambda_seq: f64,
    pub lambda_s_par: f64,
    pub lambda_q_par: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_bs: 0.2, lambda_seq: 0.1, lambda_s_par: 0.4, lambda_q_par: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_bs, self.lambda_seq, self.lambda_s_par, self.lambda_q_par];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(MpaError::config(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }
}

/// Recorded loss terms of one step.
///
/// `q_seq`/`s_seq` hold views 2..N (the first view's sequential terms
/// coincide with the parallel ones and are left out); `q_par`/`s_par`
/// hold views 1..N.
#[derive(Clone, Debug, Default)]
pub struct LossTerms {
    pub l_bs: Option<Var>,
    pub q_seq: Vec<Var>,
    pub s_seq: Vec<Var>,
    pub q_par: Vec<Var>,
    pub s_par: Vec<Var>,
}

/// Scalar values of every term and the weighted total.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_bs: f64,
    pub l_q_seq: Vec<f64>,
    pub l_s_seq: Vec<f64>,
    pub l_q_par: Vec<f64>,
    pub l_s_par: Vec<f64>,
    pub total: f64,
}

impl LossBreakdown {
    /// Total from the component values, summed in the same order as
    /// [`assemble_total`].
    pub fn compose(&self, w: &LossWeights) -> f64 {
        let seq: f64 = self.l_q_seq.iter().zip(&self.l_s_seq).map(|(q, s)| q + s).sum();
        let s_par: f64 = self.l_s_par.iter().sum();
        let q_par: f64 = self.l_q_par.iter().sum();
        w.lambda_bs * self.l_bs + w.lambda_seq * seq + w.lambda_s_par * s_par + w.lambda_q_par * q_par
    }
}

/// Records `λ_bs·l_bs + λ_seq·Σ(q_seq + s_seq) + λ_s_par·Σ s_par + λ_q_par·Σ q_par`.
pub fn assemble_total<T: Real>(g: &Graph<T>, terms: &LossTerms, w: &LossWeights) -> Result<(Var, LossBreakdown)> {
    if terms.q_seq.len() != terms.s_seq.len() || terms.q_par.len() != terms.s_par.len() {
        return Err(MpaError::invalid("query and support loss lists differ in length"));
    }
    let mut parts = Vec::new();
    if let Some(bs) = terms.l_bs {
        parts.push(g.scale(bs, T::of(w.lambda_bs))?);
    }
    let pairs: Vec<Var> =
        terms.q_seq.iter().zip(&terms.s_seq).map(|(&q, &s)| g.add(q, s)).collect::<Result<_, _>>()?;
    if let Some(seq) = g.add_all(&pairs)? {
        parts.push(g.scale(seq, T::of(w.lambda_seq))?);
    }
    if let Some(s) = g.add_all(&terms.s_par)? {
        parts.push(g.scale(s, T::of(w.lambda_s_par))?);
    }
    if let Some(q) = g.add_all(&terms.q_par)? {
        parts.push(g.scale(q, T::of(w.lambda_q_par))?);
    }
    let total = match g.add_all(&parts)? {
        Some(t) => t,
        None => g.constant(mpa_autodiff::Tensor::scalar(T::zero())),
    };
    let read = |vs: &[Var]| -> Result<Vec<f64>> { vs.iter().map(|&v| Ok(g.scalar(v)?.to_f64c())).collect() };
    let breakdown = LossBreakdown {
        l_bs: match terms.l_bs {
            Some(v) => g.scalar(v)?.to_f64c(),
            None => 0.0,
        },
        l_q_seq: read(&terms.q_seq)?,
        l_s_seq: read(&terms.s_seq)?,
        l_q_par: read(&terms.q_par)?,
        l_s_par: read(&terms.s_par)?,
        total: g.scalar(total)?.to_f64c(),
    };
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use mpa_autodiff::Tensor;

    fn unit_terms(g: &Graph<f64>, n: usize, value: f64) -> LossTerms {
        let c = |_| g.param(Tensor::scalar(value));
        LossTerms {
            l_bs: Some(g.param(Tensor::scalar(value))),
            q_seq: (1..n).map(c).collect(),
            s_seq: (1..n).map(c).collect(),
            q_par: (0..n).map(c).collect(),
            s_par: (0..n).map(c).collect(),
        }
    }

    #[test]
    fn two_views_with_unit_losses_total_3_2() {
        let g = Graph::new();
        let (total, b) = assemble_total(&g, &unit_terms(&g, 2, 1.0), &LossWeights::default()).unwrap();
        assert!((g.scalar(total).unwrap() - 3.2).abs() < 1e-12);
        assert_eq!(b.l_q_seq.len(), 1);
        assert_eq!(b.l_q_par.len(), 2);
        assert_eq!(b.total, b.compose(&LossWeights::default()));
    }

    #[test]
    fn zero_components_give_zero_total() {
        let g = Graph::new();
        let (total, _) = assemble_total(&g, &unit_terms(&g, 3, 0.0), &LossWeights::default()).unwrap();
        assert_eq!(g.scalar(total).unwrap(), 0.0);
    }

    #[test]
    fn single_view_has_no_sequential_contribution() {
        let g = Graph::new();
        let (total, b) = assemble_total(&g, &unit_terms(&g, 1, 1.0), &LossWeights::default()).unwrap();
        assert!(b.l_q_seq.is_empty() && b.l_s_seq.is_empty());
        assert!((g.scalar(total).unwrap() - 1.6).abs() < 1e-12);
    }

    #[test]
    fn doubling_query_weight_doubles_only_its_term() {
        let g = Graph::new();
        let terms = unit_terms(&g, 3, 0.7);
        let w = LossWeights::default();
        let w2 = LossWeights { lambda_q_par: 2.0 * w.lambda_q_par, ..w };
        let (a, _) = assemble_total(&g, &terms, &w).unwrap();
        let (b, _) = assemble_total(&g, &terms, &w2).unwrap();
        let q_part = w.lambda_q_par * 3.0 * 0.7;
        let diff = g.scalar(b).unwrap() - g.scalar(a).unwrap();
        assert!((diff - q_part).abs() < 1e-12);
    }

    #[test]
    fn gradients_equal_the_weights() {
        let g = Graph::new();
        let terms = unit_terms(&g, 2, 1.0);
        let w = LossWeights::default();
        let (total, _) = assemble_total(&g, &terms, &w).unwrap();
        g.backward(total).unwrap();
        assert_eq!(g.grad(terms.l_bs.unwrap()).unwrap().item().unwrap(), w.lambda_bs);
        assert_eq!(g.grad(terms.q_seq[0]).unwrap().item().unwrap(), w.lambda_seq);
        assert_eq!(g.grad(terms.s_par[1]).unwrap().item().unwrap(), w.lambda_s_par);
        assert_eq!(g.grad(terms.q_par[0]).unwrap().item().unwrap(), w.lambda_q_par);
    }

    #[test]
    fn negative_weights_are_rejected() {
        assert!(LossWeights { lambda_seq: -0.1, ..Default::default() }.validate().is_err());
        assert!(LossWeights::default().validate().is_ok());
    }
}

//! First-order parameter updates.

use mpa_autodiff::{Real, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{MpaError, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    #[default]
    Sgd,
    Momentum { beta: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |b: f64| (0.0..1.0).contains(&b);
        let ok = match *self {
            OptimizerConfig::Sgd => true,
            OptimizerConfig::Momentum { beta } => unit(beta),
            OptimizerConfig::Adam { beta1, beta2, eps } => unit(beta1) && unit(beta2) && eps > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(MpaError::config(format!("invalid optimizer settings: {self:?}")))
        }
    }
}

/// Per-parameter state, in the order the parameters are passed to [`Optimizer::step`].
#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    config: OptimizerConfig,
    lr: T,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
    steps: i32,
}

impl<T: Real> Optimizer<T> {
    pub fn new(config: OptimizerConfig, lr: f64) -> Self {
        Optimizer { config, lr: T::of(lr), first: Vec::new(), second: Vec::new(), steps: 0 }
    }

    /// Updates `params` in place; a missing gradient leaves its parameter unchanged.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Option<Tensor<T>>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(MpaError::invalid("parameter and gradient counts differ"));
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            self.second = self.first.clone();
        }
        self.steps += 1;
        let lr = self.lr;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            if g.shape() != p.shape() {
                return Err(MpaError::invalid(format!("gradient shape {:?} vs parameter {:?}", g.shape(), p.shape())));
            }
            match self.config {
                OptimizerConfig::Sgd => {
                    for (x, &d) in p.data_mut().iter_mut().zip(g.data()) {
                        *x = *x - lr * d;
                    }
                }
                OptimizerConfig::Momentum { beta } => {
                    let beta = T::of(beta);
                    let v = self.first[i].data_mut();
                    for ((x, &d), v) in p.data_mut().iter_mut().zip(g.data()).zip(v) {
                        *v = beta * *v + d;
                        *x = *x - lr * *v;
                    }
                }
                OptimizerConfig::Adam { beta1, beta2, eps } => {
                    let (b1, b2, eps) = (T::of(beta1), T::of(beta2), T::of(eps));
                    let c1 = T::one() - b1.powi(self.steps);
                    let c2 = T::one() - b2.powi(self.steps);
                    let m = self.first[i].data_mut();
                    let v = self.second[i].data_mut();
                    for (((x, &d), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                        *m = b1 * *m + (T::one() - b1) * d;
                        *v = b2 * *v + (T::one() - b2) * d * d;
                        *x = *x - lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimise(config: OptimizerConfig, lr: f64, steps: usize) -> f64 {
        // f(x) = (x - 3)^2
        let mut x = Tensor::scalar(0.0f64);
        let mut opt = Optimizer::new(config, lr);
        for _ in 0..steps {
            let g = Tensor::scalar(2.0 * (x.data()[0] - 3.0));
            opt.step(&mut [&mut x], &[Some(g)]).unwrap();
        }
        x.data()[0]
    }

    #[test]
    fn sgd_takes_one_plain_step() {
        assert!((minimise(OptimizerConfig::Sgd, 0.25, 1) - 1.5).abs() < 1e-15);
    }

    #[test]
    fn every_variant_converges_on_a_quadratic() {
        assert!((minimise(OptimizerConfig::Sgd, 0.1, 200) - 3.0).abs() < 1e-6);
        assert!((minimise(OptimizerConfig::Momentum { beta: 0.9 }, 0.01, 2000) - 3.0).abs() < 1e-4);
        let adam = OptimizerConfig::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 };
        assert!((minimise(adam, 0.05, 2000) - 3.0).abs() < 1e-2);
    }

    #[test]
    fn missing_gradients_leave_parameters_alone() {
        let mut x = Tensor::scalar(1.0f64);
        Optimizer::new(OptimizerConfig::Sgd, 0.1).step(&mut [&mut x], &[None]).unwrap();
        assert_eq!(x.data()[0], 1.0);
    }

    #[test]
    fn bad_betas_are_rejected() {
        assert!(OptimizerConfig::Momentum { beta: 1.0 }.validate().is_err());
        assert!(OptimizerConfig::Adam { beta1: 0.9, beta2: 0.999, eps: 0.0 }.validate().is_err());
    }
}

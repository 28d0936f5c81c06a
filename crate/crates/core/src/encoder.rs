//! Small convolutional feature extractor shared by support and query images.

use mpa_autodiff::{Graph, Real, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{MpaError, Result};

/// Smallest accepted input side.
pub const MIN_INPUT_SIDE: usize = 16;

/// Conv stack layout: one 3×3 (by default) block per entry of `widths`,
/// ReLU after every block but the last.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
    pub kernel: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { in_channels: 3, widths: vec![16, 32, 64, 64], strides: vec![1, 2, 2, 1], kernel: 3 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(MpaError::invalid("encoder needs at least one input channel"));
        }
        if self.widths.is_empty() {
            return Err(MpaError::invalid("encoder needs at least one block"));
        }
        if self.widths.contains(&0) {
            return Err(MpaError::invalid(format!("encoder widths must be positive: {:?}", self.widths)));
        }
        if self.strides.len() != self.widths.len() {
            return Err(MpaError::invalid(format!(
                "{} strides given for {} blocks",
                self.strides.len(),
                self.widths.len()
            )));
        }
        if self.strides.iter().any(|&s| s == 0 || s > 2) {
            return Err(MpaError::invalid(format!("strides must be 1 or 2: {:?}", self.strides)));
        }
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return Err(MpaError::invalid(format!("kernel size must be odd, got {}", self.kernel)));
        }
        Ok(())
    }

    /// Total downsampling factor of the stack.
    pub fn reduction(&self) -> usize {
        self.strides.iter().product()
    }

    pub fn out_channels(&self) -> usize {
        *self.widths.last().expect("validated non-empty")
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let r = self.reduction();
        if h < MIN_INPUT_SIDE || w < MIN_INPUT_SIDE || !h.is_multiple_of(r) || !w.is_multiple_of(r) {
            return Err(MpaError::invalid(format!(
                "image {h}×{w} must be at least {MIN_INPUT_SIDE} per side and divisible by {r}"
            )));
        }
        Ok(())
    }

    /// Feature-map size for an `h×w` input.
    pub fn feature_dims(&self, h: usize, w: usize) -> Result<(usize, usize, usize)> {
        self.check_input(h, w)?;
        let r = self.reduction();
        Ok((self.out_channels(), h / r, w / r))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<T> {
    pub config: EncoderConfig,
    pub layers: Vec<ConvLayer<T>>,
    pub seed: u64,
}

/// Encoder parameters recorded on one graph.
#[derive(Clone, Debug)]
pub struct EncoderVars {
    layers: Vec<(Var, Var)>,
}

impl EncoderVars {
    /// Wraps `(weight, bias)` vars already on a graph, one pair per layer.
    pub fn from_layers(layers: Vec<(Var, Var)>) -> Self {
        EncoderVars { layers }
    }

    pub fn layers(&self) -> &[(Var, Var)] {
        &self.layers
    }
}

/// He-normal weights (std = sqrt(2 / fan_in)) and zero biases.
pub fn init_encoder<T: Real>(seed: u64, config: &EncoderConfig) -> Result<EncoderParams<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut c_in = config.in_channels;
    let k = config.kernel;
    let mut layers = Vec::with_capacity(config.widths.len());
    for &c_out in &config.widths {
        let fan_in = (c_in * k * k) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        let weight = Tensor::from_fn(&[c_out, c_in, k, k], |_| T::of(normal.sample(&mut rng)));
        layers.push(ConvLayer { weight, bias: Tensor::zeros(&[c_out]) });
        c_in = c_out;
    }
    Ok(EncoderParams { config: config.clone(), layers, seed })
}

impl<T: Real> EncoderParams<T> {
    /// Records the parameters as trainable leaves.
    pub fn register(&self, g: &Graph<T>) -> EncoderVars {
        EncoderVars {
            layers: self.layers.iter().map(|l| (g.param(l.weight.clone()), g.param(l.bias.clone()))).collect(),
        }
    }

    /// Records the parameters as constants (inference).
    pub fn freeze(&self, g: &Graph<T>) -> EncoderVars {
        EncoderVars {
            layers: self
                .layers
                .iter()
                .map(|l| (g.constant(l.weight.clone()), g.constant(l.bias.clone())))
                .collect(),
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.layers.iter().map(|l| l.weight.numel() + l.bias.numel()).sum()
    }

    /// Copy at another precision.
    pub fn cast<U: Real>(&self) -> EncoderParams<U> {
        EncoderParams {
            config: self.config.clone(),
            layers: self.layers.iter().map(|l| ConvLayer { weight: l.weight.cast(), bias: l.bias.cast() }).collect(),
            seed: self.seed,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weight.all_finite() && l.bias.all_finite())
    }
}

/// Runs the conv stack on a 3×H×W image recorded on `g`.
pub fn encode<T: Real>(g: &Graph<T>, config: &EncoderConfig, vars: &EncoderVars, image: Var) -> Result<Var> {
    let shape = g.shape(image)?;
    let [c, h, w] = shape[..] else {
        return Err(MpaError::invalid(format!("image must be C×H×W, got {shape:?}")));
    };
    if c != config.in_channels {
        return Err(MpaError::invalid(format!("image has {c} channels, encoder expects {}", config.in_channels)));
    }
    config.check_input(h, w)?;
    let pad = config.kernel / 2;
    let last = vars.layers.len() - 1;
    let mut x = image;
    for (i, (&(wt, b), &stride)) in vars.layers.iter().zip(&config.strides).enumerate() {
        x = g.conv2d(x, wt, b, stride, pad)?;
        if i != last {
            x = g.relu(x)?;
        }
    }
    Ok(x)
}

/// Forward-only convenience: features of one image.
pub fn encode_image<T: Real>(params: &EncoderParams<T>, image: &Tensor<f64>) -> Result<Tensor<T>> {
    let g = Graph::new();
    let vars = params.freeze(&g);
    let x = g.constant(image.cast());
    let f = encode(&g, &params.config, &vars, x)?;
    Ok(g.value(f)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_output_shape_is_64x8x8() {
        let p = init_encoder::<f64>(0, &EncoderConfig::default()).unwrap();
        let f = encode_image(&p, &Tensor::full(&[3, 32, 32], 0.5)).unwrap();
        assert_eq!(f.shape(), &[64, 8, 8]);
    }

    #[test]
    fn same_seed_gives_identical_parameters() {
        let a = init_encoder::<f32>(7, &EncoderConfig::default()).unwrap();
        let b = init_encoder::<f32>(7, &EncoderConfig::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn different_seeds_differ() {
        let a = init_encoder::<f64>(1, &EncoderConfig::default()).unwrap();
        let b = init_encoder::<f64>(2, &EncoderConfig::default()).unwrap();
        assert!(a.layers.iter().zip(&b.layers).any(|(x, y)| x.weight != y.weight));
    }

    #[test]
    fn first_layer_variance_matches_he_scale() {
        let cfg = EncoderConfig::default();
        let mut samples = Vec::new();
        for seed in 0..24 {
            let p = init_encoder::<f64>(seed, &cfg).unwrap();
            samples.extend_from_slice(p.layers[0].weight.data());
        }
        assert!(samples.len() >= 10_000);
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let target = 2.0 / 27.0;
        assert!((var - target).abs() / target < 0.2, "variance {var} vs {target}");
    }

    #[test]
    fn zero_image_and_zero_biases_give_zero_features() {
        let p = init_encoder::<f64>(3, &EncoderConfig::default()).unwrap();
        let f = encode_image(&p, &Tensor::zeros(&[3, 32, 32])).unwrap();
        assert!(f.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encode_is_pure_across_calls() {
        let p = init_encoder::<f64>(4, &EncoderConfig::default()).unwrap();
        let img = Tensor::from_fn(&[3, 16, 24], |i| ((i * 31) % 17) as f64 / 17.0);
        assert_eq!(encode_image(&p, &img).unwrap(), encode_image(&p, &img).unwrap());
        assert_eq!(encode_image(&p, &img).unwrap().shape(), &[64, 4, 6]);
    }

    #[test]
    fn undersized_or_indivisible_images_are_rejected() {
        let p = init_encoder::<f64>(5, &EncoderConfig::default()).unwrap();
        assert!(encode_image(&p, &Tensor::zeros(&[3, 12, 32])).is_err());
        assert!(encode_image(&p, &Tensor::zeros(&[3, 18, 32])).is_err());
        assert!(encode_image(&p, &Tensor::zeros(&[1, 32, 32])).is_err());
    }

    #[test]
    fn inconsistent_configs_are_rejected() {
        let mut cfg = EncoderConfig::default();
        cfg.strides.pop();
        assert!(init_encoder::<f64>(0, &cfg).is_err());
        let cfg = EncoderConfig { widths: vec![16, 0], strides: vec![1, 1], ..Default::default() };
        assert!(init_encoder::<f64>(0, &cfg).is_err());
        let cfg = EncoderConfig { kernel: 2, ..Default::default() };
        assert!(init_encoder::<f64>(0, &cfg).is_err());
    }

    #[test]
    fn layer_shapes_chain_channel_counts() {
        let p = init_encoder::<f64>(0, &EncoderConfig::default()).unwrap();
        let mut c_in = 3;
        for l in &p.layers {
            assert_eq!(l.weight.shape()[1], c_in);
            c_in = l.weight.shape()[0];
            assert_eq!(l.bias.shape(), &[c_in]);
        }
    }
}

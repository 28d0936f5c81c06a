//! Forward kernels and vector-Jacobian products for every recorded op.
//!
//! Each forward is a pure function of its input values and the op's
//! parameters; this is what lets a graph be replayed from its leaves.

use crate::conv;
use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tensor::Tensor;

/// Norm floor used by [`Op::CosineMap`].
pub const NORM_EPS: f64 = 1e-8;
/// Probability clamp used by [`Op::Bce`].
pub const BCE_EPS: f64 = 1e-7;
/// Denominator floor used by [`Op::MaskedAvg`].
pub const MASK_EPS: f64 = 1e-8;

#[derive(Clone, Debug)]
pub(crate) enum Op<T> {
    Leaf,
    Conv2d { stride: usize, padding: usize },
    Relu,
    CosineMap,
    FgBgSoftmax { temperature: T },
    Bce { target: Tensor<T> },
    MaskedAvg,
    Channel { index: usize },
    Add,
    Sub,
    Mul,
    Affine { scale: T, shift: T },
    MulConst { factor: Tensor<T> },
    Sum,
    Mean,
    /// Saved state dropped by a non-retaining backward.
    Freed,
}

impl<T> Op<T> {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu => "relu",
            Op::CosineMap => "cosine_map",
            Op::FgBgSoftmax { .. } => "fgbg_softmax",
            Op::Bce { .. } => "bce_loss",
            Op::MaskedAvg => "masked_avg",
            Op::Channel { .. } => "channel",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Affine { .. } => "affine",
            Op::MulConst { .. } => "mul_const",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::Freed => "freed",
        }
    }
}

fn features_dims(shape: &[usize], what: &str) -> Result<(usize, usize)> {
    match *shape {
        [c, h, w] => Ok((c, h * w)),
        _ => Err(TensorError::invalid(format!("{what} expects C×H×W features, got {shape:?}"))),
    }
}

pub(crate) fn forward<T: Real>(op: &Op<T>, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    match op {
        Op::Leaf | Op::Freed => Err(TensorError::invalid("op has no forward")),
        Op::Conv2d { stride, padding } => {
            conv::forward(inputs[0], inputs[1], inputs[2], *stride, *padding)
        }
        Op::Relu => Ok(inputs[0].map(|x| if x > T::zero() { x } else { T::zero() })),
        Op::CosineMap => cosine_forward(inputs[0], inputs[1]),
        Op::FgBgSoftmax { temperature } => softmax_forward(inputs[0], inputs[1], *temperature),
        Op::Bce { target } => bce_forward(inputs[0], target),
        Op::MaskedAvg => masked_avg_forward(inputs[0], inputs[1]),
        Op::Channel { index } => {
            let x = inputs[0];
            let Some((&d0, rest)) = x.shape().split_first() else {
                return Err(TensorError::invalid("channel() on a scalar"));
            };
            if *index >= d0 {
                return Err(TensorError::invalid(format!("channel {index} out of range {d0}")));
            }
            let n: usize = rest.iter().product();
            Tensor::new(rest.to_vec(), x.data()[index * n..(index + 1) * n].to_vec())
        }
        Op::Add => inputs[0].zip_map(inputs[1], |a, b| a + b),
        Op::Sub => inputs[0].zip_map(inputs[1], |a, b| a - b),
        Op::Mul => inputs[0].zip_map(inputs[1], |a, b| a * b),
        Op::Affine { scale, shift } => Ok(inputs[0].map(|x| *scale * x + *shift)),
        Op::MulConst { factor } => inputs[0].zip_map(factor, |a, b| a * b),
        Op::Sum => Ok(Tensor::scalar(inputs[0].sum())),
        Op::Mean => {
            let n = inputs[0].numel();
            if n == 0 {
                return Err(TensorError::invalid("mean of an empty tensor"));
            }
            Ok(Tensor::scalar(inputs[0].sum() / T::of(n as f64)))
        }
    }
}

/// Gradients for each input; `None` where `needs[i]` is false.
pub(crate) fn backward<T: Real>(
    op: &Op<T>,
    inputs: &[&Tensor<T>],
    output: &Tensor<T>,
    gout: &Tensor<T>,
    needs: &[bool],
) -> Result<Vec<Option<Tensor<T>>>> {
    let want = |i: usize| needs.get(i).copied().unwrap_or(false);
    let grads = match op {
        Op::Leaf | Op::Freed => return Err(TensorError::GraphFreed),
        Op::Conv2d { stride, padding } => {
            let [gx, gw, gb] = conv::backward(
                inputs[0],
                inputs[1],
                inputs[2],
                *stride,
                *padding,
                gout,
                [want(0), want(1), want(2)],
            )?;
            vec![gx, gw, gb]
        }
        Op::Relu => vec![Some(inputs[0].zip_map(gout, |x, g| {
            if x > T::zero() {
                g
            } else {
                T::zero()
            }
        })?)],
        Op::CosineMap => {
            let (gf, gp) = cosine_backward(inputs[0], inputs[1], output, gout, want(0), want(1));
            vec![gf, gp]
        }
        Op::FgBgSoftmax { temperature } => {
            let hw = output.numel() / 2;
            let (p0, p1) = output.data().split_at(hw);
            let (g0, g1) = gout.data().split_at(hw);
            let ga: Vec<T> =
                (0..hw).map(|i| (g0[i] - g1[i]) * p0[i] * p1[i] * *temperature).collect();
            let gb = ga.iter().map(|&v| -v).collect();
            let shape = inputs[0].shape().to_vec();
            vec![Some(Tensor::new(shape.clone(), ga)?), Some(Tensor::new(shape, gb)?)]
        }
        Op::Bce { target } => {
            let n = T::of(inputs[0].numel() as f64);
            let eps = T::of(BCE_EPS);
            let g = gout.data()[0];
            let grad = inputs[0].zip_map(target, |p, t| {
                if p < eps || p > T::one() - eps {
                    T::zero()
                } else {
                    g * (-t / p + (T::one() - t) / (T::one() - p)) / n
                }
            })?;
            vec![Some(grad)]
        }
        Op::MaskedAvg => {
            let (gf, gm) = masked_avg_backward(inputs[0], inputs[1], output, gout, want(0), want(1));
            vec![gf, gm]
        }
        Op::Channel { index } => {
            let mut g = Tensor::zeros(inputs[0].shape());
            let n = gout.numel();
            g.data_mut()[index * n..(index + 1) * n].copy_from_slice(gout.data());
            vec![Some(g)]
        }
        Op::Add => vec![Some(gout.clone()), Some(gout.clone())],
        Op::Sub => vec![Some(gout.clone()), Some(gout.map(|g| -g))],
        Op::Mul => vec![
            want(0).then(|| gout.zip_map(inputs[1], |g, b| g * b)).transpose()?,
            want(1).then(|| gout.zip_map(inputs[0], |g, a| g * a)).transpose()?,
        ],
        Op::Affine { scale, .. } => vec![Some(gout.map(|g| g * *scale))],
        Op::MulConst { factor } => vec![Some(gout.zip_map(factor, |g, f| g * f)?)],
        Op::Sum => {
            let g = gout.data()[0];
            vec![Some(Tensor::full(inputs[0].shape(), g))]
        }
        Op::Mean => {
            let g = gout.data()[0] / T::of(inputs[0].numel() as f64);
            vec![Some(Tensor::full(inputs[0].shape(), g))]
        }
    };
    Ok(grads.into_iter().enumerate().map(|(i, g)| if want(i) { g } else { None }).collect())
}

fn cosine_forward<T: Real>(features: &Tensor<T>, proto: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, hw) = features_dims(features.shape(), "cosine_map")?;
    if proto.shape() != [c] {
        return Err(TensorError::invalid(format!(
            "cosine_map prototype has shape {:?}, features have {c} channels",
            proto.shape()
        )));
    }
    let eps = T::of(NORM_EPS);
    let f = features.data();
    let p = proto.data();
    let np = p.iter().map(|&v| v * v).sum::<T>().sqrt().max(eps);
    let mut out = vec![T::zero(); hw];
    for (q, o) in out.iter_mut().enumerate() {
        let mut dot = T::zero();
        let mut nn = T::zero();
        for ch in 0..c {
            let v = f[ch * hw + q];
            dot = dot + v * p[ch];
            nn = nn + v * v;
        }
        *o = dot / (nn.sqrt().max(eps) * np);
    }
    Tensor::new(features.shape()[1..].to_vec(), out)
}

fn cosine_backward<T: Real>(
    features: &Tensor<T>,
    proto: &Tensor<T>,
    output: &Tensor<T>,
    gout: &Tensor<T>,
    need_f: bool,
    need_p: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let c = features.shape()[0];
    let hw = output.numel();
    let eps = T::of(NORM_EPS);
    let f = features.data();
    let p = proto.data();
    let o = output.data();
    let g = gout.data();
    let p_raw = p.iter().map(|&v| v * v).sum::<T>().sqrt();
    let np = p_raw.max(eps);

    let mut gf = need_f.then(|| vec![T::zero(); c * hw]);
    let mut gp = need_p.then(|| vec![T::zero(); c]);
    for q in 0..hw {
        if g[q] == T::zero() {
            continue;
        }
        let f_raw = (0..c).map(|ch| f[ch * hw + q] * f[ch * hw + q]).sum::<T>().sqrt();
        let nf = f_raw.max(eps);
        let inv = T::one() / (nf * np);
        if let Some(gf) = gf.as_mut() {
            // d out / dF = P/(nf·np) − out·F/nf² (norm term only above the floor)
            let fcoef = if f_raw > eps { o[q] / (nf * nf) } else { T::zero() };
            for ch in 0..c {
                gf[ch * hw + q] = g[q] * (p[ch] * inv - fcoef * f[ch * hw + q]);
            }
        }
        if let Some(gp) = gp.as_mut() {
            let pcoef = if p_raw > eps { o[q] / (np * np) } else { T::zero() };
            for ch in 0..c {
                gp[ch] = gp[ch] + g[q] * (f[ch * hw + q] * inv - pcoef * p[ch]);
            }
        }
    }
    (
        gf.map(|d| Tensor::new(features.shape().to_vec(), d).expect("shape preserved")),
        gp.map(|d| Tensor::new(vec![c], d).expect("shape preserved")),
    )
}

fn softmax_forward<T: Real>(fg: &Tensor<T>, bg: &Tensor<T>, temperature: T) -> Result<Tensor<T>> {
    fg.expect_shape(bg.shape())?;
    if !(temperature > T::zero()) {
        return Err(TensorError::invalid("softmax temperature must be positive"));
    }
    let hw = fg.numel();
    let mut out = vec![T::zero(); 2 * hw];
    for i in 0..hw {
        let a = temperature * fg.data()[i];
        let b = temperature * bg.data()[i];
        let m = a.max(b);
        let ea = (a - m).exp();
        let eb = (b - m).exp();
        let s = ea + eb;
        out[i] = ea / s;
        out[hw + i] = eb / s;
    }
    let mut shape = vec![2];
    shape.extend_from_slice(fg.shape());
    Tensor::new(shape, out)
}

fn bce_forward<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    pred.expect_shape(target.shape())?;
    if pred.numel() == 0 {
        return Err(TensorError::invalid("bce_loss on an empty tensor"));
    }
    let eps = T::of(BCE_EPS);
    let total: T = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let p = p.max(eps).min(T::one() - eps);
            -(t * p.ln() + (T::one() - t) * (T::one() - p).ln())
        })
        .sum();
    Ok(Tensor::scalar(total / T::of(pred.numel() as f64)))
}

fn masked_avg_forward<T: Real>(features: &Tensor<T>, mask: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, hw) = features_dims(features.shape(), "masked_avg")?;
    if mask.shape() != &features.shape()[1..] {
        return Err(TensorError::invalid(format!(
            "mask {:?} does not match feature map {:?}",
            mask.shape(),
            &features.shape()[1..]
        )));
    }
    let m = mask.data();
    let denom = m.iter().copied().sum::<T>().max(T::of(MASK_EPS));
    let f = features.data();
    let out = (0..c)
        .map(|ch| {
            let row = &f[ch * hw..(ch + 1) * hw];
            row.iter().zip(m).map(|(&v, &w)| v * w).sum::<T>() / denom
        })
        .collect();
    Tensor::new(vec![c], out)
}

fn masked_avg_backward<T: Real>(
    features: &Tensor<T>,
    mask: &Tensor<T>,
    output: &Tensor<T>,
    gout: &Tensor<T>,
    need_f: bool,
    need_m: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let c = features.shape()[0];
    let hw = mask.numel();
    let m = mask.data();
    let raw = m.iter().copied().sum::<T>();
    let eps = T::of(MASK_EPS);
    let denom = raw.max(eps);
    let g = gout.data();
    let f = features.data();

    let gf = need_f.then(|| {
        let mut d = vec![T::zero(); c * hw];
        for ch in 0..c {
            for q in 0..hw {
                d[ch * hw + q] = g[ch] * m[q] / denom;
            }
        }
        Tensor::new(features.shape().to_vec(), d).expect("shape preserved")
    });
    let gm = need_m.then(|| {
        // d out_c / d m_q = (F[c,q] − out_c)/S above the floor, F[c,q]/ε below it
        let offset: T = if raw > eps {
            g.iter().zip(output.data()).map(|(&a, &b)| a * b).sum()
        } else {
            T::zero()
        };
        let d = (0..hw)
            .map(|q| ((0..c).map(|ch| g[ch] * f[ch * hw + q]).sum::<T>() - offset) / denom)
            .collect();
        Tensor::new(mask.shape().to_vec(), d).expect("shape preserved")
    });
    (gf, gm)
}

//! Single-image 2-D convolution lowered to GEMM via im2col.

use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(
        input: &[usize],
        weight: &[usize],
        bias: &[usize],
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let [c_in, h, w] = *input else {
            return Err(TensorError::invalid(format!("conv2d input must be C×H×W, got {input:?}")));
        };
        let [c_out, wc_in, kh, kw] = *weight else {
            return Err(TensorError::invalid(format!(
                "conv2d weights must be Cout×Cin×k×k, got {weight:?}"
            )));
        };
        if wc_in != c_in {
            return Err(TensorError::invalid(format!(
                "conv2d channel mismatch: input has {c_in}, weights expect {wc_in}"
            )));
        }
        if kh != kw || kh == 0 {
            return Err(TensorError::invalid(format!("conv2d kernel must be square, got {kh}×{kw}")));
        }
        if bias != [c_out] {
            return Err(TensorError::invalid(format!(
                "conv2d bias must have shape [{c_out}], got {bias:?}"
            )));
        }
        if stride == 0 {
            return Err(TensorError::invalid("conv2d stride must be positive"));
        }
        let k = kh;
        if k > h + 2 * padding || k > w + 2 * padding {
            return Err(TensorError::invalid(format!(
                "conv2d kernel {k} exceeds padded input {}×{}",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        Ok(ConvGeom {
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            padding,
            h_out: (h + 2 * padding - k) / stride + 1,
            w_out: (w + 2 * padding - k) / stride + 1,
        })
    }

    fn rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.h_out * self.w_out
    }

    /// Input coordinate for an output position and kernel tap, if inside.
    #[inline]
    fn source(&self, o: usize, tap: usize, limit: usize) -> Option<usize> {
        let pos = (o * self.stride + tap) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < limit).then_some(pos as usize)
    }
}

fn im2col<T: Real>(g: &ConvGeom, x: &[T]) -> Vec<T> {
    let cols = g.cols();
    let mut col = vec![T::zero(); g.rows() * cols];
    for c in 0..g.c_in {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oh in 0..g.h_out {
                    let Some(ih) = g.source(oh, ki, g.h) else { continue };
                    let src = &x[(c * g.h + ih) * g.w..(c * g.h + ih + 1) * g.w];
                    for ow in 0..g.w_out {
                        if let Some(iw) = g.source(ow, kj, g.w) {
                            dst[oh * g.w_out + ow] = src[iw];
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im<T: Real>(g: &ConvGeom, col: &[T]) -> Vec<T> {
    let cols = g.cols();
    let mut x = vec![T::zero(); g.c_in * g.h * g.w];
    for c in 0..g.c_in {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &col[row * cols..(row + 1) * cols];
                for oh in 0..g.h_out {
                    let Some(ih) = g.source(oh, ki, g.h) else { continue };
                    let base = (c * g.h + ih) * g.w;
                    for ow in 0..g.w_out {
                        if let Some(iw) = g.source(ow, kj, g.w) {
                            x[base + iw] = x[base + iw] + src[oh * g.w_out + ow];
                        }
                    }
                }
            }
        }
    }
    x
}

pub(crate) fn forward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(x.shape(), weight.shape(), bias.shape(), stride, padding)?;
    let cols = g.cols();
    let col = im2col(&g, x.data());
    let mut out = vec![T::zero(); g.c_out * cols];
    for (o, &b) in bias.data().iter().enumerate() {
        out[o * cols..(o + 1) * cols].fill(b);
    }
    let rows = g.rows();
    T::gemm(
        g.c_out,
        rows,
        cols,
        weight.data(),
        rows as isize,
        1,
        &col,
        cols as isize,
        1,
        T::one(),
        &mut out,
        cols as isize,
        1,
    );
    Tensor::new(vec![g.c_out, g.h_out, g.w_out], out)
}

/// Gradients w.r.t. (input, weight, bias) for the requested inputs.
pub(crate) fn backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
    gout: &Tensor<T>,
    needs: [bool; 3],
) -> Result<[Option<Tensor<T>>; 3]> {
    let g = ConvGeom::new(x.shape(), weight.shape(), bias.shape(), stride, padding)?;
    let rows = g.rows();
    let cols = g.cols();
    let go = gout.data();

    let gx = if needs[0] {
        let mut gcol = vec![T::zero(); rows * cols];
        // gcol = Wᵀ · gout
        T::gemm(
            rows,
            g.c_out,
            cols,
            weight.data(),
            1,
            rows as isize,
            go,
            cols as isize,
            1,
            T::zero(),
            &mut gcol,
            cols as isize,
            1,
        );
        Some(Tensor::new(x.shape().to_vec(), col2im(&g, &gcol))?)
    } else {
        None
    };

    let gw = if needs[1] {
        let col = im2col(&g, x.data());
        let mut gw = vec![T::zero(); g.c_out * rows];
        // gW = gout · colᵀ
        T::gemm(
            g.c_out,
            cols,
            rows,
            go,
            cols as isize,
            1,
            &col,
            1,
            cols as isize,
            T::zero(),
            &mut gw,
            rows as isize,
            1,
        );
        Some(Tensor::new(weight.shape().to_vec(), gw)?)
    } else {
        None
    };

    let gb = if needs[2] {
        let sums = (0..g.c_out).map(|o| go[o * cols..(o + 1) * cols].iter().copied().sum()).collect();
        Some(Tensor::new(vec![g.c_out], sums)?)
    } else {
        None
    };

    Ok([gx, gw, gb])
}

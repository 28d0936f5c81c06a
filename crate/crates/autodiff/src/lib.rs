//! Dense tensors and tape-based reverse-mode differentiation.
//!
//! Only the handful of ops the prototype-segmentation pipeline needs are
//! provided: convolution, ReLU, per-pixel cosine similarity, a two-way
//! softmax, binary cross entropy, masked average pooling and a few
//! elementwise helpers. No broadcasting.

mod conv;
mod error;
mod graph;
pub mod gradcheck;
mod ops;
mod real;
mod tensor;

pub use error::{Result, TensorError};
pub use graph::{Graph, Var};
pub use ops::{BCE_EPS, MASK_EPS, NORM_EPS};
pub use real::Real;
pub use tensor::Tensor;

/// Area-average pooling of a (soft or binary) mask to a smaller grid.
///
/// Output cell `(i, j)` averages the source pixels whose centres fall in
/// the cell's footprint, with fractional overlap weights when the sizes
/// do not divide evenly. Masks are constants, so this is not recorded.
pub fn downsample_mask<T: Real>(mask: &Tensor<T>, target_h: usize, target_w: usize) -> Result<Tensor<T>> {
    let [h, w] = *mask.shape() else {
        return Err(TensorError::InvalidArgument(format!("mask must be H×W, got {:?}", mask.shape())));
    };
    if target_h == 0 || target_w == 0 {
        return Err(TensorError::InvalidArgument("target dimensions must be positive".into()));
    }
    if target_h > h || target_w > w {
        return Err(TensorError::InvalidArgument(format!(
            "cannot downsample {h}×{w} to larger {target_h}×{target_w}"
        )));
    }
    let rows = overlap_weights(h, target_h);
    let cols = overlap_weights(w, target_w);
    let src = mask.data();
    let mut out = vec![T::zero(); target_h * target_w];
    for (i, row_w) in rows.iter().enumerate() {
        for (j, col_w) in cols.iter().enumerate() {
            let mut acc = 0.0;
            let mut area = 0.0;
            for &(y, wy) in row_w {
                for &(x, wx) in col_w {
                    acc += src[y * w + x].to_f64c() * wy * wx;
                    area += wy * wx;
                }
            }
            out[i * target_w + j] = T::of(acc / area);
        }
    }
    Tensor::new(vec![target_h, target_w], out)
}

/// For each output cell, the overlapping source indices and overlap lengths.
fn overlap_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let lo = i as f64 * scale;
            let hi = lo + scale;
            (lo.floor() as usize..(hi.ceil() as usize).min(src))
                .filter_map(|s| {
                    let overlap = (hi.min(s as f64 + 1.0) - lo.max(s as f64)).max(0.0);
                    (overlap > 1e-12).then_some((s, overlap))
                })
                .collect()
        })
        .collect()
}

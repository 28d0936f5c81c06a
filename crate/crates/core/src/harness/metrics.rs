use mpa_autodiff::Tensor;

use crate::error::{MpaError, Result};

/// Foreground intersection over union of two binary masks.
///
/// Two empty masks score 1; exactly one empty mask scores 0.
pub fn fg_iou(pred: &Tensor<f64>, gt: &Tensor<f64>) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(MpaError::invalid(format!("mask shapes differ: {:?} vs {:?}", pred.shape(), gt.shape())));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let (p, g) = (p >= 0.5, g >= 0.5);
        inter += usize::from(p && g);
        union += usize::from(p || g);
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Mean and sample standard deviation; `(0, 0)` for an empty slice.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Element-wise mean of equally long rows, ignoring missing entries.
pub fn column_means(rows: &[Vec<Option<f64>>], width: usize) -> Vec<Option<f64>> {
    (0..width)
        .map(|c| {
            let vals: Vec<f64> = rows.iter().filter_map(|r| r.get(c).copied().flatten()).collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(bits: &[u8]) -> Tensor<f64> {
        Tensor::new(vec![1, bits.len()], bits.iter().map(|&b| f64::from(b)).collect()).unwrap()
    }

    #[test]
    fn identical_masks_score_one() {
        assert_eq!(fg_iou(&mask(&[1, 0, 1]), &mask(&[1, 0, 1])).unwrap(), 1.0);
    }

    #[test]
    fn disjoint_masks_score_zero() {
        assert_eq!(fg_iou(&mask(&[1, 0, 0]), &mask(&[0, 1, 1])).unwrap(), 0.0);
    }

    #[test]
    fn half_coverage_scores_half() {
        assert_eq!(fg_iou(&mask(&[1, 1, 0, 0]), &mask(&[1, 1, 1, 1])).unwrap(), 0.5);
    }

    #[test]
    fn empty_mask_conventions() {
        assert_eq!(fg_iou(&mask(&[0, 0]), &mask(&[0, 0])).unwrap(), 1.0);
        assert_eq!(fg_iou(&mask(&[0, 0]), &mask(&[0, 1])).unwrap(), 0.0);
        assert_eq!(fg_iou(&mask(&[1, 0]), &mask(&[0, 0])).unwrap(), 0.0);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        assert!(fg_iou(&mask(&[1, 0]), &mask(&[1, 0, 0])).is_err());
    }

    #[test]
    fn mean_std_of_known_values() {
        let (m, s) = mean_std(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]);
        assert_eq!(m, 5.0);
        assert!((s - (32.0f64 / 7.0).sqrt()).abs() < 1e-12);
        assert_eq!(mean_std(&[]), (0.0, 0.0));
    }

    #[test]
    fn column_means_skip_missing() {
        let rows = vec![vec![Some(1.0), None], vec![Some(3.0), Some(4.0)]];
        assert_eq!(column_means(&rows, 3), vec![Some(2.0), Some(4.0), None]);
    }
}

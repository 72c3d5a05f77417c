//! Shared numeric kernels.
//!
//! Both the plain (inference) forward passes and the tape ops call into these
//! functions, so the two paths produce bit-identical values for the same
//! inputs.

use ndarray::{Array1, Array2};

pub const LN_EPS: f64 = 1e-5;

/// Row-wise softmax with max subtraction. `-inf` entries map to exactly 0.
pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Row-wise layer norm with affine parameters (population variance).
pub fn layer_norm_rows(x: &Array2<f64>, gamma: &Array1<f64>, beta: &Array1<f64>) -> Array2<f64> {
    let n = x.ncols() as f64;
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let mean = row.sum() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv_std = 1.0 / (var + LN_EPS).sqrt();
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * inv_std * gamma[j] + beta[j];
        }
    }
    out
}

/// QuickGELU: `x * sigmoid(1.702 x)`.
pub fn quick_gelu(x: f64) -> f64 {
    x * sigmoid(1.702 * x)
}

pub fn quick_gelu_grad(x: f64) -> f64 {
    let s = sigmoid(1.702 * x);
    s + x * 1.702 * s * (1.0 - s)
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn quick_gelu_array(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(quick_gelu)
}

/// Normalize each row to unit L2 norm.
pub fn l2_normalize_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
    }
    out
}

pub fn l2_norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    #[test]
    fn softmax_rows_sum_to_one_and_handle_neg_inf() {
        let x = array![[1.0, 2.0, 3.0], [f64::NEG_INFINITY, 0.0, 0.0]];
        let p = softmax_rows(&x);
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        assert_eq!(p[(1, 0)], 0.0);
    }

    #[test]
    fn layer_norm_standardizes_rows() {
        let x = array![[1.0, 2.0, 3.0, 4.0]];
        let gamma = ndarray::Array1::ones(4);
        let beta = ndarray::Array1::zeros(4);
        let y = layer_norm_rows(&x, &gamma, &beta);
        let mean: f64 = y.row(0).sum() / 4.0;
        let var: f64 = y.row(0).iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn l2_normalize_rows_unit_norm() {
        let x = Array2::from_shape_fn((3, 5), |(i, j)| (i * 5 + j) as f64 + 1.0);
        let y = l2_normalize_rows(&x);
        for row in y.rows() {
            let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn quick_gelu_matches_definition() {
        for x in [-3.0, -0.5, 0.0, 0.5, 3.0] {
            let expected = x * sigmoid(1.702 * x);
            assert_eq!(quick_gelu(x), expected);
        }
    }
}

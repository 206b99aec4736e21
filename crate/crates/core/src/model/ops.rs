//! Elementwise and row-wise building blocks shared by inference and training.

use crate::linalg::Matrix;

pub const RMS_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

/// Row-wise RMS normalization with a `1 x d` gain. Returns the output and
/// the per-row inverse RMS.
pub fn rms_norm(x: &Matrix, gain: &Matrix) -> (Matrix, Vec<f64>) {
    let d = x.cols();
    let g = gain.data();
    let mut out = Matrix::zeros(x.rows(), d);
    let mut inv = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let s = 1.0 / (ms + RMS_EPS).sqrt();
        inv.push(s);
        for ((o, &v), &gi) in out.row_mut(r).iter_mut().zip(row).zip(g) {
            *o = v * s * gi;
        }
    }
    (out, inv)
}

/// tanh-approximated GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + GELU_A * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_derivative_matches_finite_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn rms_norm_unit_rms() {
        let x = Matrix::from_rows(&[vec![3.0, -4.0]]);
        let g = Matrix::from_rows(&[vec![1.0, 1.0]]);
        let (y, _) = rms_norm(&x, &g);
        let rms = (y.row(0).iter().map(|v| v * v).sum::<f64>() / 2.0).sqrt();
        assert!((rms - 1.0).abs() < 1e-6);
    }
}

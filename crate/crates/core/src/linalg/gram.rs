use super::Matrix;
use crate::error::{invalid, Result};

/// Running sum of `XᵀX` over row blocks, plus the number of rows seen.
///
/// Only the upper triangle is written during accumulation; [`sum`](Self::sum)
/// mirrors it, so the materialized matrix is exactly symmetric. Two
/// accumulators over disjoint rows [`merge`](Self::merge) by addition.
#[derive(Debug, Clone, PartialEq)]
pub struct GramAccumulator {
    dim: usize,
    // Row-major dim x dim, upper triangle authoritative.
    upper: Vec<f64>,
    token_count: u64,
}

impl GramAccumulator {
    pub fn new(dim: usize) -> Self {
        Self { dim, upper: vec![0.0; dim * dim], token_count: 0 }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn token_count(&self) -> u64 {
        self.token_count
    }

    /// Adds `XᵀX` and counts `X.rows()` tokens.
    pub fn accumulate(&mut self, x: &Matrix) -> Result<()> {
        if x.cols() != self.dim {
            return Err(invalid(format!(
                "gram dimension mismatch: accumulator {}, input has {} columns",
                self.dim,
                x.cols()
            )));
        }
        if !x.is_finite() {
            return Err(invalid("gram input contains non-finite entries"));
        }
        for r in 0..x.rows() {
            self.accumulate_row_unchecked(x.row(r));
        }
        self.token_count += x.rows() as u64;
        Ok(())
    }

    /// Adds the outer product of a single row.
    pub fn accumulate_row(&mut self, row: &[f64]) -> Result<()> {
        if row.len() != self.dim {
            return Err(invalid(format!(
                "gram dimension mismatch: accumulator {}, row has {}",
                self.dim,
                row.len()
            )));
        }
        self.accumulate_row_unchecked(row);
        self.token_count += 1;
        Ok(())
    }

    fn accumulate_row_unchecked(&mut self, row: &[f64]) {
        let n = self.dim;
        for i in 0..n {
            let xi = row[i];
            if xi == 0.0 {
                continue;
            }
            let dst = &mut self.upper[i * n + i..(i + 1) * n];
            for (d, &xj) in dst.iter_mut().zip(&row[i..]) {
                *d += xi * xj;
            }
        }
    }

    pub fn merge(&mut self, other: &GramAccumulator) -> Result<()> {
        if other.dim != self.dim {
            return Err(invalid(format!("cannot merge grams of dim {} and {}", self.dim, other.dim)));
        }
        for (a, b) in self.upper.iter_mut().zip(&other.upper) {
            *a += b;
        }
        self.token_count += other.token_count;
        Ok(())
    }

    /// The symmetric accumulated matrix.
    pub fn sum(&self) -> Matrix {
        let n = self.dim;
        Matrix::from_fn(n, n, |i, j| if i <= j { self.upper[i * n + j] } else { self.upper[j * n + i] })
    }

    /// Upper triangle in row-major order (`i <= j`).
    pub fn upper_triangle(&self) -> Vec<f64> {
        let n = self.dim;
        let mut out = Vec::with_capacity(n * (n + 1) / 2);
        for i in 0..n {
            out.extend_from_slice(&self.upper[i * n + i..(i + 1) * n]);
        }
        out
    }

    pub fn from_upper_triangle(dim: usize, tri: &[f64], token_count: u64) -> Result<Self> {
        if tri.len() != dim * (dim + 1) / 2 {
            return Err(invalid(format!(
                "upper triangle of dim {dim} needs {} values, got {}",
                dim * (dim + 1) / 2,
                tri.len()
            )));
        }
        let mut upper = vec![0.0; dim * dim];
        let mut at = 0;
        for i in 0..dim {
            let len = dim - i;
            upper[i * dim + i..(i + 1) * dim].copy_from_slice(&tri[at..at + len]);
            at += len;
        }
        Ok(Self { dim, upper, token_count })
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self.upper[i * self.dim + i]).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_by_two_example() {
        let mut acc = GramAccumulator::new(2);
        acc.accumulate(&Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]])).unwrap();
        assert_eq!(acc.sum(), Matrix::from_rows(&[vec![10.0, 14.0], vec![14.0, 20.0]]));
        assert_eq!(acc.token_count(), 2);
    }

    #[test]
    fn zero_rows_only_count() {
        let mut acc = GramAccumulator::new(3);
        acc.accumulate(&Matrix::from_rows(&[vec![1.0, -1.0, 2.0]])).unwrap();
        let before = acc.sum();
        acc.accumulate(&Matrix::zeros(5, 3)).unwrap();
        assert_eq!(acc.sum(), before);
        assert_eq!(acc.token_count(), 6);
    }

    #[test]
    fn split_equals_single_shot() {
        let mut a = GramAccumulator::new(2);
        a.accumulate(&Matrix::from_rows(&[vec![1.0, 2.0]])).unwrap();
        a.accumulate(&Matrix::from_rows(&[vec![3.0, 4.0]])).unwrap();
        let mut b = GramAccumulator::new(2);
        b.accumulate(&Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let mut acc = GramAccumulator::new(3);
        assert!(acc.accumulate(&Matrix::zeros(1, 2)).is_err());
        assert!(acc.merge(&GramAccumulator::new(2)).is_err());
    }

    proptest! {
        #[test]
        fn streaming_matches_batch(
            vals in proptest::collection::vec(-10.0f64..10.0, 4 * 12),
            cuts in proptest::collection::vec(0usize..12, 0..4),
        ) {
            let x = Matrix::from_vec(12, 4, vals).unwrap();
            let batch = x.t_matmul(&x).unwrap();
            let mut cuts = cuts;
            cuts.push(0);
            cuts.push(12);
            cuts.sort_unstable();
            let mut acc = GramAccumulator::new(4);
            for w in cuts.windows(2) {
                acc.accumulate(&x.row_block(w[0]..w[1])).unwrap();
            }
            let rel = acc.sum().sub(&batch).unwrap().frobenius_norm() / batch.frobenius_norm().max(1e-300);
            prop_assert!(rel < 1e-9);
            prop_assert_eq!(acc.token_count(), 12);
            let tri = acc.upper_triangle();
            prop_assert_eq!(GramAccumulator::from_upper_triangle(4, &tri, 12).unwrap(), acc);
        }
    }
}

use super::{dot, Matrix};
use crate::error::{invalid, Error, Result};

const MAX_SWEEPS: usize = 100;
const OFF_DIAGONAL_TOL: f64 = 1e-12;
const SIGN_THRESHOLD: f64 = 1e-12;

/// Eigenvalues in descending order; row `j` of `eigenvectors` is the unit
/// eigenvector for `eigenvalues[j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenDecomposition {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Matrix,
}

impl EigenDecomposition {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    /// `Vᵀ diag(λ) V`.
    pub fn reconstruct(&self) -> Matrix {
        let n = self.dim();
        let mut scaled = self.eigenvectors.clone();
        for (j, &l) in self.eigenvalues.iter().enumerate() {
            scaled.row_mut(j).iter_mut().for_each(|x| *x *= l);
        }
        let mut out = self.eigenvectors.t_matmul(&scaled).expect("square");
        // Symmetrize away the last-ulp asymmetry of the product.
        for i in 0..n {
            for j in i + 1..n {
                let m = 0.5 * (out[(i, j)] + out[(j, i)]);
                out[(i, j)] = m;
                out[(j, i)] = m;
            }
        }
        out
    }

    /// Eigenvalues with round-off negatives clamped to zero.
    pub fn clamped_eigenvalues(&self) -> Vec<f64> {
        self.eigenvalues.iter().map(|&l| l.max(0.0)).collect()
    }
}

/// Orthonormal rank-k basis, one basis vector per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub basis: Matrix,
}

impl Projection {
    pub fn new(basis: Matrix) -> Self {
        Self { basis }
    }

    pub fn k(&self) -> usize {
        self.basis.rows()
    }

    pub fn dim(&self) -> usize {
        self.basis.cols()
    }

    /// `max |P Pᵀ - I|`.
    pub fn orthonormality_defect(&self) -> f64 {
        let g = self.basis.matmul_t(&self.basis).expect("square");
        g.max_abs_diff(&Matrix::identity(self.k()))
    }
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
///
/// Converges when the off-diagonal Frobenius norm drops below
/// `1e-12 * ‖S‖_F`, with at most 100 sweeps. Eigenvectors are sign-normalized
/// so that their first entry above `1e-12` in magnitude is positive; ties in
/// eigenvalue keep their original diagonal order.
pub fn sym_eig(s: &Matrix) -> Result<EigenDecomposition> {
    let n = s.rows();
    if s.cols() != n {
        return Err(invalid(format!("sym_eig needs a square matrix, got {:?}", s.shape())));
    }
    if !s.is_finite() {
        return Err(invalid("sym_eig input contains non-finite entries"));
    }
    let norm = s.frobenius_norm();
    let asym = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .map(|(i, j)| (s[(i, j)] - s[(j, i)]).abs())
        .fold(0.0, f64::max);
    if asym > 1e-9 * norm.max(f64::MIN_POSITIVE) {
        return Err(invalid(format!("sym_eig input is not symmetric (max asymmetry {asym:.3e})")));
    }

    let mut a = s.clone();
    // Columns of v accumulate the rotations.
    let mut v = Matrix::identity(n);
    let tol = OFF_DIAGONAL_TOL * norm;
    let mut converged = norm == 0.0;
    let mut off = 0.0;
    for _sweep in 0..MAX_SWEEPS {
        off = off_diagonal_norm(&a);
        if off <= tol {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                rotate(&mut a, &mut v, p, q, c, sn, t);
            }
        }
    }
    if !converged {
        off = off_diagonal_norm(&a);
        if off > tol {
            return Err(Error::Numerical(format!(
                "Jacobi eigensolver did not converge in {MAX_SWEEPS} sweeps (off-diagonal residual {off:.3e}, tolerance {tol:.3e})"
            )));
        }
    }
    let _ = off;

    let mut order: Vec<usize> = (0..n).collect();
    // Stable: equal eigenvalues keep index order.
    order.sort_by(|&i, &j| a[(j, j)].partial_cmp(&a[(i, i)]).expect("finite"));

    let eigenvalues = order.iter().map(|&i| a[(i, i)]).collect();
    let mut eigenvectors = Matrix::zeros(n, n);
    for (row, &col) in order.iter().enumerate() {
        let dst = eigenvectors.row_mut(row);
        for k in 0..n {
            dst[k] = v[(k, col)];
        }
        if let Some(first) = dst.iter().copied().find(|x| x.abs() > SIGN_THRESHOLD) {
            if first < 0.0 {
                dst.iter_mut().for_each(|x| *x = -*x);
            }
        }
    }
    Ok(EigenDecomposition { eigenvalues, eigenvectors })
}

fn off_diagonal_norm(a: &Matrix) -> f64 {
    let n = a.rows();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += a[(i, j)] * a[(i, j)];
            }
        }
    }
    s.sqrt()
}

#[allow(clippy::too_many_arguments)]
fn rotate(a: &mut Matrix, v: &mut Matrix, p: usize, q: usize, c: f64, s: f64, t: f64) {
    let n = a.rows();
    let apq = a[(p, q)];
    let app = a[(p, p)];
    let aqq = a[(q, q)];
    a[(p, p)] = app - t * apq;
    a[(q, q)] = aqq + t * apq;
    a[(p, q)] = 0.0;
    a[(q, p)] = 0.0;
    for k in 0..n {
        if k == p || k == q {
            continue;
        }
        let akp = a[(k, p)];
        let akq = a[(k, q)];
        let nkp = c * akp - s * akq;
        let nkq = s * akp + c * akq;
        a[(k, p)] = nkp;
        a[(p, k)] = nkp;
        a[(k, q)] = nkq;
        a[(q, k)] = nkq;
    }
    for k in 0..n {
        let vkp = v[(k, p)];
        let vkq = v[(k, q)];
        v[(k, p)] = c * vkp - s * vkq;
        v[(k, q)] = s * vkp + c * vkq;
    }
}

/// Top-`k` eigenvector rows.
pub fn rank_k_projection(eig: &EigenDecomposition, k: usize) -> Result<Projection> {
    let n = eig.dim();
    if k == 0 || k > n {
        return Err(invalid(format!("rank {k} out of range 1..={n}")));
    }
    Ok(Projection::new(eig.eigenvectors.row_block(0..k)))
}

/// Fraction of (clamped) spectral mass in the top `k` eigenvalues. An all-zero
/// spectrum counts as fully retained.
pub fn energy_ratio(eigenvalues: &[f64], k: usize) -> Result<f64> {
    let n = eigenvalues.len();
    if k > n {
        return Err(invalid(format!("rank {k} out of range 0..={n}")));
    }
    let total: f64 = eigenvalues.iter().map(|l| l.max(0.0)).sum();
    if total == 0.0 {
        return Ok(1.0);
    }
    if k == n {
        return Ok(1.0);
    }
    let kept: f64 = eigenvalues[..k].iter().map(|l| l.max(0.0)).sum();
    Ok((kept / total).clamp(0.0, 1.0))
}

/// `‖X - X Pᵀ P‖_F`.
pub fn projection_error(x: &Matrix, p: &Projection) -> Result<f64> {
    if x.cols() != p.dim() {
        return Err(invalid(format!(
            "projection dimension {} does not match data width {}",
            p.dim(),
            x.cols()
        )));
    }
    let mut err = 0.0;
    let mut coef = vec![0.0; p.k()];
    for r in 0..x.rows() {
        let row = x.row(r);
        for (j, c) in coef.iter_mut().enumerate() {
            *c = dot(row, p.basis.row(j));
        }
        for (col, &xv) in row.iter().enumerate() {
            let recon: f64 = coef.iter().enumerate().map(|(j, c)| c * p.basis[(j, col)]).sum();
            let d = xv - recon;
            err += d * d;
        }
    }
    Ok(err.sqrt())
}

//! Small dense linear algebra on row-major `D×D` slices.

use nalgebra::DMatrix;

/// `Σ = a1·U·Uᵀ + a2·I`, row-major.
pub fn sigma_from_factors(u: &[f64], a1: f64, a2: f64, d: usize) -> Vec<f64> {
    let mut s = vec![0.0; d * d];
    for r in 0..d {
        for c in 0..d {
            let dot: f64 = (0..d).map(|k| u[r * d + k] * u[c * d + k]).sum();
            s[r * d + c] = a1 * dot + if r == c { a2 } else { 0.0 };
        }
    }
    s
}

/// `(Σ + Σᵀ)/2`.
pub fn symmetrize(m: &[f64], d: usize) -> Vec<f64> {
    let mut s = vec![0.0; d * d];
    for r in 0..d {
        for c in 0..d {
            s[r * d + c] = 0.5 * (m[r * d + c] + m[c * d + r]);
        }
    }
    s
}

/// Inverse and log-determinant of an SPD matrix via Cholesky.
///
/// Panics if the matrix is not positive definite; callers construct `Σ`
/// with a strictly positive isotropic term.
pub fn spd_inverse_logdet(m: &[f64], d: usize) -> (Vec<f64>, f64) {
    let sym = DMatrix::from_row_slice(d, d, &symmetrize(m, d));
    let chol = sym.cholesky().expect("matrix is not positive definite");
    let logdet = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let inv = chol.inverse();
    let mut out = vec![0.0; d * d];
    for r in 0..d {
        for c in 0..d {
            out[r * d + c] = inv[(r, c)];
        }
    }
    (out, logdet)
}

/// Eigenvalues (descending) and matching unit eigenvectors of a symmetric
/// matrix. Eigenvectors are returned as rows.
pub fn sym_eigen(m: &[f64], d: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let sym = DMatrix::from_row_slice(d, d, &symmetrize(m, d));
    let eig = sym.symmetric_eigen();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = order.iter().map(|&i| eig.eigenvectors.column(i).iter().copied().collect()).collect();
    (values, vectors)
}

/// `ln det` computed from the eigenvalues of the symmetrized matrix.
pub fn logdet_sym(m: &[f64], d: usize) -> f64 {
    sym_eigen(m, d).0.iter().map(|v| v.ln()).sum()
}

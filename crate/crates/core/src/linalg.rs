//! Small dense helpers shared by the identification and set-fitting code.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Least-squares solution of `a x = b` via Householder QR (`a` tall, full
/// column rank).
pub fn lstsq(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.nrows() != b.nrows() {
        return Err(Error::Dimension(format!(
            "lstsq: {} rows vs {} rows",
            a.nrows(),
            b.nrows()
        )));
    }
    if a.nrows() < a.ncols() {
        return Err(Error::InsufficientData {
            needed: a.ncols(),
            got: a.nrows(),
        });
    }
    let qr = a.clone().qr();
    let r = qr.r();
    let scale = r.diagonal().abs().max();
    if scale == 0.0 || r.diagonal().iter().any(|d| d.abs() <= 1e-13 * scale) {
        return Err(Error::RankDeficient {
            singular_values: r.diagonal().iter().map(|d| d.abs()).collect(),
        });
    }
    let qtb = qr.q().transpose() * b;
    r.solve_upper_triangular(&qtb)
        .ok_or_else(|| Error::RankDeficient { singular_values: vec![] })
}

/// Moore-Penrose pseudo-inverse with singular values below
/// `rel_tol * sigma_max` treated as zero.
pub fn pinv(a: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let u = svd.u.expect("u requested");
    let v_t = svd.v_t.expect("v_t requested");
    let mut s_inv = DMatrix::zeros(v_t.nrows(), u.ncols());
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s > rel_tol * smax && s > 0.0 {
            s_inv[(i, i)] = 1.0 / s;
        }
    }
    v_t.transpose() * s_inv * u.transpose()
}

/// Symmetric square root of a symmetric positive semi-definite matrix.
pub fn sqrtm_spd(a: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = a.clone().symmetric_eigen();
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
    let v = &eig.eigenvectors;
    let s = v * d * v.transpose();
    (&s + s.transpose()) * 0.5
}

//! Latent safe-set estimation and the detector-threshold bound.
//!
//! The latent trajectory obtained by replaying the logged data through the
//! identified model is covered either by its minimum-volume enclosing
//! ellipse, `h(z) = 1 - ||Q z - v||^2`, or by its convex hull in half-plane
//! form, `h(z) = min_j (b_j - a_j^T z)`.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::defender::DetectorNorm;
use crate::error::{Error, Result};
use crate::linalg::sqrtm_spd;
use crate::log::DataLog;
use crate::sysid::{predict_sequence, LinearSsModel, PredictMode};

/// Samples dropped from the start of a latent trajectory before fitting.
pub const DEFAULT_BURN_IN: usize = 100;

/// Replays `log` through `model` from `z_0 = 0` and returns the latent states
/// after `burn_in` samples as an `n_z x (N - burn_in)` matrix.
pub fn latent_trajectory(
    model: &LinearSsModel,
    log: &DataLog,
    mode: PredictMode,
    burn_in: usize,
) -> Result<DMatrix<f64>> {
    let pred = predict_sequence(model, &log.inputs(), &log.outputs(), mode)?;
    let n = pred.z.ncols();
    if burn_in >= n {
        return Err(Error::InsufficientData {
            needed: burn_in + 1,
            got: n,
        });
    }
    Ok(pred.z.columns(burn_in, n - burn_in).into_owned())
}

/// Ellipse `{z : ||Q z - v||^2 <= 1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct EllipsoidCover {
    pub q: DMatrix<f64>,
    pub v: DVector<f64>,
}

impl EllipsoidCover {
    pub fn dim(&self) -> usize {
        self.v.len()
    }

    pub fn center(&self) -> Option<DVector<f64>> {
        self.q.clone().lu().solve(&self.v)
    }

    pub fn value(&self, z: &DVector<f64>) -> f64 {
        1.0 - (&self.q * z - &self.v).norm_squared()
    }

    /// `2 Q^T (v - Q z)`.
    pub fn gradient(&self, z: &DVector<f64>) -> DVector<f64> {
        self.q.transpose() * (&self.v - &self.q * z) * 2.0
    }
}

/// Intersection of half-planes `a_j^T z <= b_j` with unit normals `a_j`,
/// ordered counter-clockwise.
#[derive(Debug, Clone, PartialEq)]
pub struct HullCover {
    pub halfplanes: Vec<([f64; 2], f64)>,
}

impl HullCover {
    pub fn value(&self, z: &DVector<f64>) -> f64 {
        self.halfplanes
            .iter()
            .map(|(a, b)| b - a[0] * z[0] - a[1] * z[1])
            .fold(f64::INFINITY, f64::min)
    }

    /// `-a_j*` of the active facet; ties average the tied normals.
    pub fn gradient(&self, z: &DVector<f64>) -> DVector<f64> {
        let value = self.value(z);
        let tie_tol = 1e-12 * (1.0 + value.abs());
        let mut g = [0.0, 0.0];
        for (a, b) in &self.halfplanes {
            if b - a[0] * z[0] - a[1] * z[1] <= value + tie_tol {
                g[0] -= a[0];
                g[1] -= a[1];
            }
        }
        let norm = (g[0] * g[0] + g[1] * g[1]).sqrt();
        if norm > 0.0 {
            DVector::from_vec(vec![g[0] / norm, g[1] / norm])
        } else {
            DVector::zeros(2)
        }
    }

    pub fn vertices(&self) -> Vec<[f64; 2]> {
        let n = self.halfplanes.len();
        (0..n)
            .map(|k| {
                let (a1, b1) = self.halfplanes[(k + n - 1) % n];
                let (a2, b2) = self.halfplanes[k];
                let det = a1[0] * a2[1] - a1[1] * a2[0];
                [(b1 * a2[1] - b2 * a1[1]) / det, (a1[0] * b2 - a2[0] * b1) / det]
            })
            .collect()
    }
}

/// Latent safe set `Z = {z : h(z) >= 0}`.
#[derive(Debug, Clone, PartialEq)]
pub enum Cover {
    Ellipse(EllipsoidCover),
    Hull(HullCover),
}

impl Cover {
    /// Margin `h(z)` and its gradient.
    pub fn h_tilde(&self, z: &DVector<f64>) -> (f64, DVector<f64>) {
        match self {
            Cover::Ellipse(e) => (e.value(z), e.gradient(z)),
            Cover::Hull(h) => (h.value(z), h.gradient(z)),
        }
    }

    pub fn value(&self, z: &DVector<f64>) -> f64 {
        match self {
            Cover::Ellipse(e) => e.value(z),
            Cover::Hull(h) => h.value(z),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let v = match self {
            Cover::Ellipse(e) => CoverJson::Ellipse {
                q: e.q.row_iter().map(|r| r.iter().copied().collect()).collect(),
                v: e.v.iter().copied().collect(),
            },
            Cover::Hull(h) => CoverJson::Hull {
                halfplanes: h.halfplanes.iter().map(|(a, b)| [a[0], a[1], *b]).collect(),
            },
        };
        Ok(serde_json::to_string_pretty(&v)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        match serde_json::from_str::<CoverJson>(text)? {
            CoverJson::Ellipse { q, v } => {
                let n = v.len();
                if q.len() != n || q.iter().any(|r| r.len() != n) {
                    return Err(Error::Dimension("ellipse Q must be n x n with n = len(v)".into()));
                }
                Ok(Cover::Ellipse(EllipsoidCover {
                    q: DMatrix::from_fn(n, n, |r, c| q[r][c]),
                    v: DVector::from_vec(v),
                }))
            }
            CoverJson::Hull { halfplanes } => Ok(Cover::Hull(HullCover {
                halfplanes: halfplanes.into_iter().map(|[a1, a2, b]| ([a1, a2], b)).collect(),
            })),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum CoverJson {
    Ellipse {
        #[serde(rename = "Q")]
        q: Vec<Vec<f64>>,
        v: Vec<f64>,
    },
    Hull {
        halfplanes: Vec<[f64; 3]>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CoverKind {
    #[default]
    Ellipse,
    Hull,
}

/// Diagnostics of a Khachiyan run.
#[derive(Debug, Clone)]
pub struct KhachiyanReport {
    pub iterations: usize,
    /// Final relative optimality gap.
    pub gap: f64,
    /// `log det` of the lifted moment matrix after each iteration.
    pub dual_objective: Vec<f64>,
    /// Uniform inflation factor applied to `||Q z - v||^2` for containment.
    pub inflation: f64,
}

pub const DEFAULT_MVEE_TOL: f64 = 1e-7;
const MVEE_MAX_ITER: usize = 100_000;
const REFRESH_EVERY: usize = 50;

/// Minimum-volume enclosing ellipsoid of the columns of `points` (`d x N`).
pub fn fit_min_ellipse(points: &DMatrix<f64>, tol: f64) -> Result<EllipsoidCover> {
    fit_min_ellipse_traced(points, tol).map(|(e, _)| e)
}

/// Khachiyan's barycentric ascent on the lifted points `q_i = [z_i; 1]` with
/// Todd-Yildirim away steps, started from a Kumar-Yildirim core set.
pub fn fit_min_ellipse_traced(points: &DMatrix<f64>, tol: f64) -> Result<(EllipsoidCover, KhachiyanReport)> {
    let (d, n) = points.shape();
    if d == 0 || n < d + 1 {
        return Err(Error::DegeneratePoints(format!("need at least {} points in {d} dimensions, got {n}", d + 1)));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("ellipse fit points"));
    }
    check_affine_rank(points)?;

    let dl = d + 1;
    let lifted = {
        let mut q = DMatrix::from_element(dl, n, 1.0);
        q.rows_mut(0, d).copy_from(points);
        q
    };

    let mut u = vec![0.0; n];
    let core = initial_core_set(points);
    for &k in &core {
        u[k] += 1.0 / core.len() as f64;
    }

    let dlf = dl as f64;
    let mut history = Vec::new();
    let mut gap = f64::INFINITY;
    let mut iterations = 0;
    let mut m = vec![0.0; n];
    let mut x_inv = DMatrix::zeros(dl, dl);
    let mut log_det = 0.0;
    let mut fresh = false;
    while iterations < MVEE_MAX_ITER {
        // exact refresh at intervals and before accepting convergence; rank-one
        // updates in between
        if !fresh && (iterations % REFRESH_EVERY == 0 || gap <= tol) {
            let chol = moment(&lifted, &u)
                .cholesky()
                .ok_or_else(|| Error::DegeneratePoints("moment matrix lost definiteness".into()))?;
            log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
            // m_k = q_k^T X^-1 q_k = ||L^-1 q_k||^2
            let y = chol.l().solve_lower_triangular(&lifted).expect("Cholesky factor is invertible");
            for (mk, col) in m.iter_mut().zip(y.column_iter()) {
                *mk = col.norm_squared();
            }
            x_inv = chol.inverse();
            fresh = true;
        }
        if history.is_empty() {
            history.push(log_det);
        }
        let (j_up, &m_up) = m
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .expect("non-empty");
        let (j_dn, &m_dn) = m
            .iter()
            .enumerate()
            .filter(|(k, _)| u[*k] > 0.0)
            .min_by(|a, b| a.1.total_cmp(b.1))
            .expect("some positive weight");
        let eps_up = m_up / dlf - 1.0;
        let eps_dn = 1.0 - m_dn / dlf;
        gap = eps_up.max(eps_dn);
        if gap <= tol {
            if fresh {
                break;
            }
            continue;
        }
        iterations += 1;
        // u <- (1 - tau) u + tau e_j; tau < 0 is an away step
        let (j, tau) = if eps_up >= eps_dn {
            (j_up, (m_up - dlf) / (dlf * (m_up - 1.0)))
        } else {
            // capped so the weight stays non-negative
            let step = ((dlf - m_dn) / (dlf * (m_dn - 1.0))).min(u[j_dn] / (1.0 - u[j_dn]));
            (j_dn, -step)
        };
        u.iter_mut().for_each(|w| *w *= 1.0 - tau);
        u[j] += tau;
        if u[j] < 1e-15 {
            u[j] = 0.0;
        }
        // Sherman-Morrison update of X^-1 and all m_k
        let wj = &x_inv * lifted.column(j);
        let g = lifted.tr_mul(&wj);
        let denom = 1.0 - tau + tau * m[j];
        for (mk, gk) in m.iter_mut().zip(g.iter()) {
            *mk = (*mk - tau * gk * gk / denom) / (1.0 - tau);
        }
        x_inv = (x_inv - &wj * wj.transpose() * (tau / denom)) / (1.0 - tau);
        log_det += dlf * (1.0 - tau).ln() + (denom / (1.0 - tau)).ln();
        history.push(log_det);
        fresh = false;
    }

    // center and shape from the weights
    let w = DVector::from_vec(u);
    let center = points * &w;
    let mut second = DMatrix::zeros(d, d);
    for (k, &wk) in w.iter().enumerate() {
        if wk > 0.0 {
            let z = points.column(k);
            second += z * z.transpose() * wk;
        }
    }
    let cov = second - &center * center.transpose();
    let shape = cov
        .try_inverse()
        .ok_or_else(|| Error::DegeneratePoints("weighted covariance is singular".into()))?
        / d as f64;
    let shape = (&shape + shape.transpose()) * 0.5;
    let mut q = sqrtm_spd(&shape);
    let mut v = &q * &center;

    let worst = (0..n)
        .map(|k| (&q * points.column(k) - &v).norm_squared())
        .fold(0.0, f64::max);
    let inflation = worst.max(1.0);
    if inflation > 1.0 {
        let s = 1.0 / inflation.sqrt();
        q *= s;
        v *= s;
    }
    Ok((
        EllipsoidCover { q, v },
        KhachiyanReport {
            iterations,
            gap,
            dual_objective: history,
            inflation,
        },
    ))
}

fn moment(lifted: &DMatrix<f64>, u: &[f64]) -> DMatrix<f64> {
    let dl = lifted.nrows();
    let mut x = DMatrix::zeros(dl, dl);
    for (k, &w) in u.iter().enumerate() {
        if w > 0.0 {
            let q = lifted.column(k);
            x.ger(w, &q, &q, 1.0);
        }
    }
    x
}

fn check_affine_rank(points: &DMatrix<f64>) -> Result<()> {
    let (d, n) = points.shape();
    let mean = points.column_mean();
    let mut centered = points.clone();
    for k in 0..n {
        let mut c = centered.column_mut(k);
        c -= &mean;
    }
    let svd = (&centered * centered.transpose()).symmetric_eigen();
    let max = svd.eigenvalues.max();
    let (idx, min) = svd
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, v)| (i, *v))
        .expect("d > 0");
    if !(max > 0.0) || min <= 1e-12 * max {
        let dir: Vec<f64> = svd.eigenvectors.column(idx).iter().copied().collect();
        return Err(Error::DegeneratePoints(format!(
            "point cloud has no extent along direction {dir:?} (rank < {d})"
        )));
    }
    Ok(())
}

/// Kumar-Yildirim initial core set: the extreme points along `d` mutually
/// orthogonal directions.
fn initial_core_set(points: &DMatrix<f64>) -> Vec<usize> {
    let (d, n) = points.shape();
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut core = Vec::new();
    for axis in 0..d {
        let mut dir = DVector::zeros(d);
        dir[axis] = 1.0;
        for b in &basis {
            let proj = dir.dot(b);
            dir -= b * proj;
        }
        if dir.norm() < 1e-12 {
            continue;
        }
        let proj: Vec<f64> = (0..n).map(|k| points.column(k).dot(&dir)).collect();
        let hi = (0..n).max_by(|&a, &b| proj[a].total_cmp(&proj[b])).expect("n > 0");
        let lo = (0..n).min_by(|&a, &b| proj[a].total_cmp(&proj[b])).expect("n > 0");
        core.push(hi);
        core.push(lo);
        let mut e = points.column(hi) - points.column(lo);
        for b in &basis {
            let p = e.dot(b);
            e -= b * p;
        }
        let norm = e.norm();
        if norm > 0.0 {
            basis.push(e / norm);
        }
    }
    core.sort_unstable();
    core.dedup();
    // the core set must span the affine hull; otherwise fall back to uniform
    if core.len() < d + 1 {
        return (0..n).collect();
    }
    core
}

/// Convex hull (Andrew's monotone chain) in half-plane form.
pub fn fit_convex_hull(points: &DMatrix<f64>) -> Result<HullCover> {
    if points.nrows() != 2 {
        return Err(Error::Dimension(format!("convex hull needs 2-D points, got {}", points.nrows())));
    }
    let mut pts: Vec<[f64; 2]> = points.column_iter().map(|c| [c[0], c[1]]).collect();
    if pts.iter().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
        return Err(Error::NonFinite("hull points"));
    }
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 3 {
        return Err(Error::DegeneratePoints("fewer than 3 distinct points".into()));
    }
    let cross = |o: [f64; 2], a: [f64; 2], b: [f64; 2]| (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]);
    let mut hull: Vec<[f64; 2]> = Vec::with_capacity(2 * pts.len());
    for &p in pts.iter() {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    let lower = hull.len() + 1;
    for &p in pts.iter().rev().skip(1) {
        while hull.len() >= lower && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    if hull.len() < 3 {
        return Err(Error::DegeneratePoints("points are collinear".into()));
    }
    let halfplanes = (0..hull.len())
        .map(|k| {
            let p = hull[k];
            let q = hull[(k + 1) % hull.len()];
            let (dx, dy) = (q[0] - p[0], q[1] - p[1]);
            let len = (dx * dx + dy * dy).sqrt();
            let a = [dy / len, -dx / len];
            let b = (a[0] * p[0] + a[1] * p[1]).max(a[0] * q[0] + a[1] * q[1]);
            (a, b)
        })
        .collect();
    let cover = HullCover { halfplanes };
    // round-off in the offsets can leave input points marginally outside
    let slack = (0..points.ncols())
        .map(|k| -cover.value(&points.column(k).into_owned()))
        .fold(0.0, f64::max);
    if slack > 0.0 {
        let halfplanes = cover.halfplanes.into_iter().map(|(a, b)| (a, b + slack)).collect();
        return Ok(HullCover { halfplanes });
    }
    Ok(cover)
}

/// Fits the configured cover kind.
pub fn fit_cover(points: &DMatrix<f64>, kind: CoverKind, tol: f64) -> Result<Cover> {
    match kind {
        CoverKind::Ellipse => fit_min_ellipse(points, tol).map(Cover::Ellipse),
        CoverKind::Hull => fit_convex_hull(points).map(Cover::Hull),
    }
}

/// Lower bound on the detector threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdBound {
    pub delta_tilde: f64,
    pub gamma: f64,
}

impl ThresholdBound {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// `delta_tilde = gamma * max ||y - yhat||` over an alarm-free log.
pub fn bound_threshold(log: &DataLog, gamma: f64, norm: DetectorNorm) -> Result<ThresholdBound> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::InvalidParameter(format!("gamma must lie in (0, 1], got {gamma}")));
    }
    if log.is_empty() {
        return Err(Error::EmptyLog);
    }
    let max = log
        .rows
        .iter()
        .map(|r| norm.eval(&[r.y_sent - r.yhat]))
        .fold(0.0, f64::max);
    Ok(ThresholdBound {
        delta_tilde: gamma * max,
        gamma,
    })
}

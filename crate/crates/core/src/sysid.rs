//! Offline identification of a linear innovation-form model
//!
//! ```text
//! z+   = A z + Bu u + By y + K eps
//! yhat = C z + eps
//! ```
//!
//! mapping the observer inputs `w = [u; y]` to its output `yhat`. The
//! identification is a combined deterministic-stochastic subspace method:
//! LQ factorization of the stacked block-Hankel data, oblique projection of
//! future outputs onto past data along future inputs, SVD for the order and
//! state sequence, then least squares for the system matrices.

use std::path::Path;

use nalgebra::{Complex, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{lstsq, pinv};
use crate::log::DataLog;

/// Identified model together with identification metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSsModel {
    pub a: DMatrix<f64>,
    pub bu: DMatrix<f64>,
    pub by: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub meta: ModelMeta,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub horizon: usize,
    pub data_hash: String,
    pub singular_values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ModelJson {
    n_z: usize,
    n_u: usize,
    n_y: usize,
    #[serde(rename = "A")]
    a: Vec<f64>,
    #[serde(rename = "Bu")]
    bu: Vec<f64>,
    #[serde(rename = "By")]
    by: Vec<f64>,
    #[serde(rename = "K")]
    k: Vec<f64>,
    #[serde(rename = "C")]
    c: Vec<f64>,
    meta: ModelMeta,
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

fn from_row_major(rows: usize, cols: usize, data: &[f64], name: &str) -> Result<DMatrix<f64>> {
    if data.len() != rows * cols {
        return Err(Error::Dimension(format!(
            "{name}: expected {rows}x{cols} = {} entries, got {}",
            rows * cols,
            data.len()
        )));
    }
    Ok(DMatrix::from_row_slice(rows, cols, data))
}

impl LinearSsModel {
    pub fn n_z(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_u(&self) -> usize {
        self.bu.ncols()
    }

    pub fn n_y(&self) -> usize {
        self.c.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let (n, nu, ny) = (self.n_z(), self.n_u(), self.n_y());
        let ok = self.a.shape() == (n, n)
            && self.bu.shape() == (n, nu)
            && self.by.shape() == (n, ny)
            && self.k.shape() == (n, ny)
            && self.c.shape() == (ny, n);
        if !ok {
            return Err(Error::Dimension("model matrices have inconsistent shapes".into()));
        }
        let all = [&self.a, &self.bu, &self.by, &self.k, &self.c];
        if all.iter().any(|m| m.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite("model matrices"));
        }
        Ok(())
    }

    /// `[Bu By]`.
    pub fn b(&self) -> DMatrix<f64> {
        let mut b = DMatrix::zeros(self.n_z(), self.n_u() + self.n_y());
        b.columns_mut(0, self.n_u()).copy_from(&self.bu);
        b.columns_mut(self.n_u(), self.n_y()).copy_from(&self.by);
        b
    }

    /// First `count` Markov parameters `C A^k [Bu By]`.
    pub fn markov_parameters(&self, count: usize) -> Vec<DMatrix<f64>> {
        let b = self.b();
        let mut power = DMatrix::identity(self.n_z(), self.n_z());
        (0..count)
            .map(|_| {
                let m = &self.c * &power * &b;
                power = &self.a * &power;
                m
            })
            .collect()
    }

    pub fn eigenvalues(&self) -> Vec<Complex<f64>> {
        self.a.complex_eigenvalues().iter().copied().collect()
    }

    /// Equivalent model in the coordinates `z' = T z`.
    pub fn transformed(&self, t: &DMatrix<f64>) -> Result<Self> {
        let t_inv = t
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::InvalidParameter("similarity transform is singular".into()))?;
        Ok(Self {
            a: t * &self.a * &t_inv,
            bu: t * &self.bu,
            by: t * &self.by,
            k: t * &self.k,
            c: &self.c * &t_inv,
            meta: self.meta.clone(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        let j = ModelJson {
            n_z: self.n_z(),
            n_u: self.n_u(),
            n_y: self.n_y(),
            a: row_major(&self.a),
            bu: row_major(&self.bu),
            by: row_major(&self.by),
            k: row_major(&self.k),
            c: row_major(&self.c),
            meta: self.meta.clone(),
        };
        Ok(serde_json::to_string_pretty(&j)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let j: ModelJson = serde_json::from_str(text)?;
        let m = Self {
            a: from_row_major(j.n_z, j.n_z, &j.a, "A")?,
            bu: from_row_major(j.n_z, j.n_u, &j.bu, "Bu")?,
            by: from_row_major(j.n_z, j.n_y, &j.by, "By")?,
            k: from_row_major(j.n_z, j.n_y, &j.k, "K")?,
            c: from_row_major(j.n_y, j.n_z, &j.c, "C")?,
            meta: j.meta,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Block-Hankel matrix with `block_rows` block rows and `cols` columns from
/// a `d x N` sample sequence: block `(r, c)` is sample `r + c`.
pub fn build_hankel(seq: &DMatrix<f64>, block_rows: usize, cols: usize) -> Result<DMatrix<f64>> {
    hankel_from(seq, 0, block_rows, cols)
}

fn hankel_from(seq: &DMatrix<f64>, start: usize, block_rows: usize, cols: usize) -> Result<DMatrix<f64>> {
    let d = seq.nrows();
    let needed = start + block_rows + cols - 1;
    if block_rows == 0 || cols == 0 || seq.ncols() < needed {
        return Err(Error::InsufficientData {
            needed,
            got: seq.ncols(),
        });
    }
    Ok(DMatrix::from_fn(d * block_rows, cols, |row, c| {
        let (r, a) = (row / d, row % d);
        seq[(a, start + r + c)]
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SysIdOptions {
    /// Model order `n_z`.
    pub order: usize,
    /// Number of block rows `i` of the past/future Hankel matrices.
    pub horizon: usize,
    /// Fraction of the log used for identification; the rest is held out.
    pub train_fraction: f64,
}

impl Default for SysIdOptions {
    fn default() -> Self {
        Self {
            order: 2,
            horizon: 10,
            train_fraction: 0.8,
        }
    }
}

/// Result of a subspace identification run.
#[derive(Debug, Clone)]
pub struct Identification {
    pub model: LinearSsModel,
    /// Singular values of the oblique projection.
    pub singular_values: Vec<f64>,
    /// Recovered state sequence (`n_z x j`), column `c` at time `horizon + c`.
    pub states: DMatrix<f64>,
}

/// Relative threshold below which singular values count as zero.
const RANK_TOL: f64 = 1e-9;

/// Subspace identification from exogenous inputs `w` (`(n_u + n_y) x N`,
/// first `n_u` rows are `u`) and outputs `o` (`n_y x N`).
pub fn subspace_identify(
    w: &DMatrix<f64>,
    o: &DMatrix<f64>,
    n_u: usize,
    order: usize,
    horizon: usize,
) -> Result<Identification> {
    let (m, l, n) = (w.nrows(), o.nrows(), w.ncols());
    if o.ncols() != n {
        return Err(Error::Dimension("inputs and outputs differ in length".into()));
    }
    if n_u > m || m - n_u != l {
        return Err(Error::Dimension(format!(
            "input has {m} rows; expected n_u + n_y = {n_u} + {l}"
        )));
    }
    if order == 0 || horizon <= order {
        return Err(Error::InvalidParameter(format!(
            "need 1 <= order < horizon, got order {order}, horizon {horizon}"
        )));
    }
    let i = horizon;
    let rows = 2 * (m + l) * i;
    if n < 2 * i {
        return Err(Error::InsufficientData { needed: 2 * i + rows, got: n });
    }
    let j = n - 2 * i + 1;
    if j < rows {
        return Err(Error::InsufficientData { needed: 2 * i + rows, got: n });
    }

    let u_p = hankel_from(w, 0, i, j)?;
    let u_f = hankel_from(w, i, i, j)?;
    let y_p = hankel_from(o, 0, i, j)?;
    let y_f = hankel_from(o, i, i, j)?;

    // H = [U_f; U_p; Y_p; Y_f] / sqrt(j) = L Q^T, L lower triangular
    let scale = 1.0 / (j as f64).sqrt();
    let mut ht = DMatrix::zeros(j, rows);
    let blocks = [&u_f, &u_p, &y_p, &y_f];
    let mut col = 0;
    for b in blocks {
        ht.columns_mut(col, b.nrows()).copy_from(&(b.transpose() * scale));
        col += b.nrows();
    }
    let l_factor = ht.qr().r().transpose();

    let p = 2 * m * i + l * i;
    let l_w = l_factor.view((0, 0), (p, p)).into_owned();
    let l_4 = l_factor.view((p, 0), (l * i, p)).into_owned();
    // projection of Y_f on the row space of [U_f; W_p]
    let coef = &l_4 * pinv(&l_w, 1e-12);
    let coef_wp = coef.columns(m * i, p - m * i).into_owned();

    let mut w_p = DMatrix::zeros(p - m * i, j);
    w_p.rows_mut(0, m * i).copy_from(&u_p);
    w_p.rows_mut(m * i, l * i).copy_from(&y_p);
    let oblique = &coef_wp * &w_p;

    let svd = oblique.clone().svd(true, false);
    let mut order_idx: Vec<usize> = (0..svd.singular_values.len()).collect();
    order_idx.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let sv: Vec<f64> = order_idx.iter().map(|&k| svd.singular_values[k]).collect();
    let s0 = sv.first().copied().unwrap_or(0.0);
    let data_scale = o.abs().max().max(w.abs().max());
    if !(s0 > 1e-12 * data_scale) || data_scale == 0.0 {
        return Err(Error::RankDeficient { singular_values: sv });
    }
    let rank = sv.iter().filter(|&&s| s > RANK_TOL * s0).count();
    if order > rank {
        return Err(Error::OrderExceedsRank {
            order,
            rank,
            singular_values: sv,
        });
    }

    let u_svd = svd.u.expect("u requested");
    let mut u1 = DMatrix::zeros(l * i, order);
    for (c, &k) in order_idx.iter().take(order).enumerate() {
        let s = sv[c];
        // Gamma^+ = S^-1/2 U1^T
        u1.set_column(c, &(u_svd.column(k) / s.sqrt()));
    }
    let states = u1.transpose() * &oblique;

    let w_aligned = w.columns(i, j).into_owned();
    let o_aligned = o.columns(i, j).into_owned();
    let mut model = fit_from_states(&states, &w_aligned, &o_aligned, n_u)?;
    model.meta.horizon = horizon;
    model.meta.singular_values = sv.clone();
    Ok(Identification {
        model,
        singular_values: sv,
        states,
    })
}

/// Least-squares system matrices from a state sequence `states` (`n_z x J`)
/// aligned column-by-column with inputs `w` and outputs `o`. Direct
/// feedthrough is fixed to zero; `K` regresses the state-equation residual on
/// the output residual.
pub fn fit_from_states(
    states: &DMatrix<f64>,
    w: &DMatrix<f64>,
    o: &DMatrix<f64>,
    n_u: usize,
) -> Result<LinearSsModel> {
    let (nz, jj) = states.shape();
    let (m, l) = (w.nrows(), o.nrows());
    if w.ncols() != jj || o.ncols() != jj || jj < nz + m + 2 {
        return Err(Error::Dimension("state, input and output sequences misaligned".into()));
    }
    let t = jj - 1;
    let mut phi_t = DMatrix::zeros(t, nz + m);
    phi_t.columns_mut(0, nz).copy_from(&states.columns(0, t).transpose());
    phi_t.columns_mut(nz, m).copy_from(&w.columns(0, t).transpose());
    let next_t = states.columns(1, t).transpose();
    let ab = lstsq(&phi_t, &next_t)?.transpose();
    let a = ab.columns(0, nz).into_owned();
    let b = ab.columns(nz, m).into_owned();

    let c = lstsq(&states.transpose(), &o.transpose())?.transpose();

    let rho_w = states.columns(1, t) - &ab * phi_t.transpose();
    let rho_v = o.columns(0, t) - &c * states.columns(0, t);
    let k = if rho_v.norm() <= 1e-10 * o.norm().max(f64::MIN_POSITIVE) {
        DMatrix::zeros(nz, l)
    } else {
        match lstsq(&rho_v.transpose(), &rho_w.transpose()) {
            Ok(kt) => kt.transpose(),
            Err(_) => DMatrix::zeros(nz, l),
        }
    };
    let k = stable_gain_or_zero(&a, &c, k);

    let model = LinearSsModel {
        a,
        bu: b.columns(0, n_u).into_owned(),
        by: b.columns(n_u, m - n_u).into_owned(),
        k,
        c,
        meta: ModelMeta::default(),
    };
    model.validate()?;
    Ok(model)
}

/// Keeps `k` only if the predictor `A - K C` is stable. When the output
/// residual is model mismatch rather than innovation, the regressed gain can
/// destabilize the predictor; the open-loop model is used instead.
fn stable_gain_or_zero(a: &DMatrix<f64>, c: &DMatrix<f64>, k: DMatrix<f64>) -> DMatrix<f64> {
    let rho = (a - &k * c)
        .complex_eigenvalues()
        .iter()
        .map(|v| v.norm())
        .fold(0.0, f64::max);
    if rho < 1.0 {
        k
    } else {
        DMatrix::zeros(k.nrows(), k.ncols())
    }
}

/// Identifies the observer model from the first `train_fraction` of `log`.
pub fn identify(log: &DataLog, opts: &SysIdOptions) -> Result<Identification> {
    if log.is_empty() {
        return Err(Error::EmptyLog);
    }
    if !(opts.train_fraction > 0.0 && opts.train_fraction <= 1.0) {
        return Err(Error::InvalidParameter("train_fraction must lie in (0, 1]".into()));
    }
    let n_train = ((log.len() as f64) * opts.train_fraction).floor() as usize;
    let w = log.inputs().columns(0, n_train).into_owned();
    let o = log.outputs().columns(0, n_train).into_owned();
    let mut id = subspace_identify(&w, &o, 1, opts.order, opts.horizon)?;
    id.model.meta.data_hash = log.data_hash();
    Ok(id)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PredictMode {
    /// Pure simulation `z+ = A z + B w` with no output correction.
    Simulation,
    /// Innovation predictor `z+ = A z + B w + K (yhat - C z)`.
    #[default]
    Innovation,
}

#[derive(Debug, Clone)]
pub struct Prediction {
    /// Latent trajectory `z_0..z_{N-1}` (`n_z x N`).
    pub z: DMatrix<f64>,
    /// Model output `ytilde = C z`.
    pub ytilde: DMatrix<f64>,
    /// `eps = yhat - ytilde`.
    pub eps: DMatrix<f64>,
}

const DIVERGENCE_NORM: f64 = 1e9;

/// Runs the model over logged inputs `w` and outputs `yhat` from `z_0 = 0`.
pub fn predict_sequence(
    model: &LinearSsModel,
    w: &DMatrix<f64>,
    yhat: &DMatrix<f64>,
    mode: PredictMode,
) -> Result<Prediction> {
    let (nz, ny, n) = (model.n_z(), model.n_y(), w.ncols());
    if w.nrows() != model.n_u() + ny || yhat.nrows() != ny || yhat.ncols() != n {
        return Err(Error::Dimension("model dimensions do not match the data".into()));
    }
    let b = model.b();
    let mut z = DVector::zeros(nz);
    let mut zs = DMatrix::zeros(nz, n);
    let mut ytilde = DMatrix::zeros(ny, n);
    for k in 0..n {
        zs.set_column(k, &z);
        let yt = &model.c * &z;
        ytilde.set_column(k, &yt);
        let mut next = &model.a * &z + &b * w.column(k);
        if mode == PredictMode::Innovation {
            next += &model.k * (yhat.column(k) - &yt);
        }
        let norm = next.norm();
        if !(norm <= DIVERGENCE_NORM) {
            return Err(Error::Divergence { step: k, norm });
        }
        z = next;
    }
    let eps = yhat - &ytilde;
    Ok(Prediction { z: zs, ytilde, eps })
}

/// RMSE of `ytilde - yhat` over the samples at or after `from`.
pub fn held_out_rmse(prediction: &Prediction, from: usize) -> f64 {
    let n = prediction.eps.ncols();
    if from >= n {
        return f64::NAN;
    }
    let tail = prediction.eps.columns(from, n - from);
    (tail.norm_squared() / tail.len() as f64).sqrt()
}

/// Held-out one-step RMSE of the innovation predictor over the last
/// `1 - train_fraction` of the log.
pub fn validation_rmse(model: &LinearSsModel, log: &DataLog, train_fraction: f64) -> Result<f64> {
    let pred = predict_sequence(model, &log.inputs(), &log.outputs(), PredictMode::Innovation)?;
    let from = ((log.len() as f64) * train_fraction).floor() as usize;
    Ok(held_out_rmse(&pred, from))
}

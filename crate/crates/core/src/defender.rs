//! The victim's estimation and monitoring stack: linearized model, static
//! Kalman gain, observer, residual detector and the nominal controller.

use nalgebra::{DMatrix, Matrix2, RowVector2, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plant::{PlantParams, PlantState};

/// Zero-order-hold discretization of the pendulum linearized at the origin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscreteLinearModel {
    pub a: Matrix2<f64>,
    pub b: Vector2<f64>,
    pub c: RowVector2<f64>,
}

/// Continuous-time linearization at the upright equilibrium.
pub fn linearize(params: &PlantParams) -> (Matrix2<f64>, Vector2<f64>, RowVector2<f64>) {
    let a = Matrix2::new(0.0, 1.0, params.g / params.l, 0.0);
    let b = Vector2::new(0.0, params.input_gain());
    (a, b, RowVector2::new(1.0, 0.0))
}

/// Exact ZOH discretization. For `A_c = [[0, 1], [w^2, 0]]` the matrix
/// exponential is `[[cosh, sinh / w], [w sinh, cosh]]` evaluated at `w dt`.
pub fn linearize_and_discretize(params: &PlantParams) -> DiscreteLinearModel {
    let (_, _, c) = linearize(params);
    let w = (params.g / params.l).sqrt();
    let (ch, sh) = ((w * params.dt).cosh(), (w * params.dt).sinh());
    let a = Matrix2::new(ch, sh / w, w * sh, ch);
    let beta = params.input_gain();
    let b = Vector2::new(beta * (ch - 1.0) / (w * w), beta * sh / w);
    DiscreteLinearModel { a, b, c }
}

/// Stationary (predictor-form) Kalman gain `K = A P C^T (C P C^T + R)^-1`,
/// with `P` the fixed point of the Riccati recursion started from `Qn`.
pub fn stationary_kalman_gain(
    a: &DMatrix<f64>,
    c: &DMatrix<f64>,
    qn: &DMatrix<f64>,
    rn: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let (p, _) = riccati_fixed_point(a, c, qn, rn)?;
    predictor_gain(a, c, &p, rn)
}

pub(crate) fn predictor_gain(
    a: &DMatrix<f64>,
    c: &DMatrix<f64>,
    p: &DMatrix<f64>,
    rn: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let s = c * p * c.transpose() + rn;
    let s_inv = s
        .try_inverse()
        .ok_or_else(|| Error::InvalidParameter("innovation covariance is singular".into()))?;
    Ok(a * p * c.transpose() * s_inv)
}

/// One step of the filter Riccati recursion.
pub fn riccati_step(
    a: &DMatrix<f64>,
    c: &DMatrix<f64>,
    qn: &DMatrix<f64>,
    rn: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let k = predictor_gain(a, c, p, rn)?;
    let next = a * p * a.transpose() - &k * c * p * a.transpose() + qn;
    // keep the iterate symmetric
    Ok((&next + next.transpose()) * 0.5)
}

const RICCATI_TOL: f64 = 1e-12;
const RICCATI_MAX_ITER: usize = 100_000;

/// Iterates the Riccati recursion until `max |P_{k+1} - P_k|` drops below
/// `1e-12 * min(1, max |P|)`.
/// Returns the fixed point and the iteration count.
pub fn riccati_fixed_point(
    a: &DMatrix<f64>,
    c: &DMatrix<f64>,
    qn: &DMatrix<f64>,
    rn: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, usize)> {
    let n = a.nrows();
    if a.ncols() != n || c.ncols() != n || qn.shape() != (n, n) || rn.shape() != (c.nrows(), c.nrows()) {
        return Err(Error::Dimension("Riccati matrices have inconsistent shapes".into()));
    }
    let mut p = qn.clone();
    let mut last_change = f64::INFINITY;
    for iter in 1..=RICCATI_MAX_ITER {
        let next = riccati_step(a, c, qn, rn, &p)?;
        last_change = (&next - &p).abs().max();
        p = next;
        if !last_change.is_finite() {
            break;
        }
        if last_change <= RICCATI_TOL * p.abs().max().min(1.0) {
            return Ok((p, iter));
        }
    }
    Err(Error::RiccatiNoConvergence {
        iterations: RICCATI_MAX_ITER,
        last_change,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ObserverMode {
    /// RK4 prediction through the nonlinear dynamics.
    #[default]
    NonlinearPredict,
    /// Prediction through the discrete linearization.
    LinearPredict,
}

/// Observer `x+ = f(x, u) + K (y - h(x))` with a static gain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObserverConfig {
    pub k: Vector2<f64>,
    pub model: DiscreteLinearModel,
    pub mode: ObserverMode,
    pub plant: PlantParams,
}

impl ObserverConfig {
    /// Builds the observer with the stationary Kalman gain of the linearized
    /// model. `qn` is the process covariance, `rn` the measurement variance.
    pub fn kalman(plant: PlantParams, qn: Matrix2<f64>, rn: f64, mode: ObserverMode) -> Result<Self> {
        plant.validate()?;
        let model = linearize_and_discretize(&plant);
        let a = DMatrix::from_column_slice(2, 2, model.a.as_slice());
        let c = DMatrix::from_row_slice(1, 2, &[model.c[0], model.c[1]]);
        let q = DMatrix::from_column_slice(2, 2, qn.as_slice());
        let r = DMatrix::from_element(1, 1, rn);
        let k = stationary_kalman_gain(&a, &c, &q, &r)?;
        let cfg = Self {
            k: Vector2::new(k[(0, 0)], k[(1, 0)]),
            model,
            mode,
            plant,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Error dynamics matrix `A_d - K C_d`.
    pub fn error_dynamics(&self) -> Matrix2<f64> {
        self.model.a - self.k * self.model.c
    }

    pub fn validate(&self) -> Result<()> {
        if !self.k.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidParameter("observer gain is not finite".into()));
        }
        let rho = spectral_radius2(&self.error_dynamics());
        if rho >= 1.0 {
            return Err(Error::InvalidParameter(format!(
                "observer error dynamics not stable (spectral radius {rho})"
            )));
        }
        Ok(())
    }

    /// Observer update from the prior estimate, applied input and received
    /// measurement.
    pub fn step(&self, s: EstimatorState, u: f64, y: f64) -> Result<EstimatorState> {
        let innovation = y - s.yhat();
        let predicted = match self.mode {
            ObserverMode::NonlinearPredict => self.plant.step(s.xhat, u)?.to_vector(),
            ObserverMode::LinearPredict => self.model.a * s.xhat.to_vector() + self.model.b * u,
        };
        let next = predicted + self.k * innovation;
        let next = PlantState::from_vector(&next);
        if !next.is_finite() {
            return Err(Error::NonFinite("observer step"));
        }
        Ok(EstimatorState { xhat: next })
    }
}

/// Spectral radius of a real 2x2 matrix.
pub fn spectral_radius2(m: &Matrix2<f64>) -> f64 {
    let tr = m.trace();
    let det = m.determinant();
    let disc = tr * tr / 4.0 - det;
    if disc >= 0.0 {
        let s = disc.sqrt();
        (tr / 2.0 + s).abs().max((tr / 2.0 - s).abs())
    } else {
        det.sqrt()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EstimatorState {
    pub xhat: PlantState,
}

impl EstimatorState {
    pub fn new(xhat: PlantState) -> Self {
        Self { xhat }
    }

    /// Predicted measurement `h(x_hat)`.
    pub fn yhat(&self) -> f64 {
        self.xhat.theta
    }
}

/// Residual `r = y - y_hat`.
pub fn residual(s: &EstimatorState, y: f64) -> f64 {
    y - s.yhat()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DetectorNorm {
    Two,
    Inf,
    #[default]
    Abs,
}

impl DetectorNorm {
    pub fn eval(self, r: &[f64]) -> f64 {
        match self {
            DetectorNorm::Two => r.iter().map(|v| v * v).sum::<f64>().sqrt(),
            DetectorNorm::Inf | DetectorNorm::Abs => r.iter().fold(0.0, |m, v| m.max(v.abs())),
        }
    }
}

/// Norm detector: alarm iff `||r|| > delta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub delta: f64,
    pub norm: DetectorNorm,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            delta: 5e-3,
            norm: DetectorNorm::Abs,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0) {
            return Err(Error::InvalidParameter(format!("delta must be > 0, got {}", self.delta)));
        }
        Ok(())
    }

    pub fn alarm(&self, r: &[f64]) -> bool {
        self.norm.eval(r) > self.delta
    }
}

/// Exact-linearizing LQR: `u_c = -m l g sin(theta) - k1 theta - k2 theta_dot`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LqrController {
    pub gains: [f64; 2],
    /// Use the true angle in the gravity-compensation term instead of the
    /// estimate.
    pub use_true_theta_ff: bool,
}

impl Default for LqrController {
    fn default() -> Self {
        Self {
            gains: [1.5, 1.5],
            use_true_theta_ff: false,
        }
    }
}

impl LqrController {
    /// Desired control from the estimate. `theta_ref` shifts the angle target
    /// (excitation); `x_true` is only read when `use_true_theta_ff` is set.
    pub fn control(&self, s: &EstimatorState, x_true: Option<PlantState>, params: &PlantParams, theta_ref: f64) -> f64 {
        let theta_ff = match (self.use_true_theta_ff, x_true) {
            (true, Some(x)) => x.theta,
            _ => s.xhat.theta,
        };
        -params.m * params.l * params.g * theta_ff.sin()
            - self.gains[0] * (s.xhat.theta - theta_ref)
            - self.gains[1] * s.xhat.theta_dot
    }
}

/// `u_c` from the estimate with default gains and no excitation.
pub fn lqr_control(s: &EstimatorState, params: &PlantParams) -> f64 {
    LqrController::default().control(s, None, params, 0.0)
}

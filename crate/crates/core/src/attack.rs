//! Online false-data injection on the measurement channel.
//!
//! The adversary runs its identified model alongside the defender, forwards
//! measurements untouched during a warm-up, and afterwards replaces them with
//! the stealthy measurement that pushes the latent state, and with it the
//! defender's estimate, deeper into the latent safe set.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::defender::{EstimatorState, ObserverConfig};
use crate::error::{Error, Result};
use crate::filter::SafeSetCbf;
use crate::safeset::Cover;
use crate::sysid::LinearSsModel;

/// Norm of the stealth constraint `||y_a - C z|| <= delta`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AttackNorm {
    Two,
    #[default]
    Inf,
}

/// Maximizer of `g^T o` over `||o|| <= delta`.
pub fn optimal_offset(g: &DVector<f64>, delta: f64, norm: AttackNorm) -> DVector<f64> {
    match norm {
        AttackNorm::Two => {
            let n = g.norm();
            if n > 0.0 {
                g * (delta / n)
            } else {
                DVector::zeros(g.len())
            }
        }
        AttackNorm::Inf => g.map(|v| if v > 0.0 { delta } else if v < 0.0 { -delta } else { 0.0 }),
    }
}

const DIVERGENCE_NORM: f64 = 1e9;

#[derive(Debug, Clone)]
pub struct AttackState {
    pub z: DVector<f64>,
    pub model: LinearSsModel,
    pub cover: Cover,
    pub delta_tilde: f64,
    pub norm: AttackNorm,
    /// Spoofing is enabled once `steps >= warmup_steps`.
    pub active: bool,
    pub warmup_steps: usize,
    /// Number of `advance` calls so far.
    pub steps: usize,
}

impl AttackState {
    pub fn new(model: LinearSsModel, cover: Cover, delta_tilde: f64, norm: AttackNorm, warmup_steps: usize) -> Result<Self> {
        model.validate()?;
        if !(delta_tilde >= 0.0) || !delta_tilde.is_finite() {
            return Err(Error::InvalidParameter(format!("delta_tilde must be finite and >= 0, got {delta_tilde}")));
        }
        let dim = match &cover {
            Cover::Ellipse(e) => e.dim(),
            Cover::Hull(_) => 2,
        };
        if dim != model.n_z() {
            return Err(Error::Dimension(format!("cover dimension {dim} vs latent dimension {}", model.n_z())));
        }
        Ok(Self {
            z: DVector::zeros(model.n_z()),
            model,
            cover,
            delta_tilde,
            norm,
            active: true,
            warmup_steps,
            steps: 0,
        })
    }

    /// Whether the next transmitted measurement is spoofed.
    pub fn is_spoofing(&self) -> bool {
        self.active && self.steps >= self.warmup_steps
    }

    /// Model output `C z`.
    pub fn ytilde(&self) -> DVector<f64> {
        &self.model.c * &self.z
    }

    /// Latent margin at the current state.
    pub fn margin(&self) -> f64 {
        self.cover.value(&self.z)
    }

    /// `B_y^T grad h(z_eval)`.
    pub fn direction_at(&self, z_eval: &DVector<f64>) -> DVector<f64> {
        let (_, grad) = self.cover.h_tilde(z_eval);
        self.model.by.transpose() * grad
    }

    /// Ascent direction at the current latent state.
    pub fn direction(&self) -> DVector<f64> {
        self.direction_at(&self.z)
    }

    /// Spoofed measurement `y_a = C z + delta * dir(g)`.
    pub fn attack_measurement(&self) -> DVector<f64> {
        self.ytilde() + optimal_offset(&self.direction(), self.delta_tilde, self.norm)
    }

    /// Latent successor `A z + B_u u + B_y y + K (yhat - C z)` without
    /// mutating the state.
    pub fn successor(&self, u: &DVector<f64>, y_sent: &DVector<f64>, yhat: &DVector<f64>) -> DVector<f64> {
        let m = &self.model;
        &m.a * &self.z + &m.bu * u + &m.by * y_sent + &m.k * (yhat - &m.c * &self.z)
    }

    pub fn advance(&mut self, u: &DVector<f64>, y_sent: &DVector<f64>, yhat: &DVector<f64>) -> Result<()> {
        let next = self.successor(u, y_sent, yhat);
        let norm = next.norm();
        if !(norm <= DIVERGENCE_NORM) {
            return Err(Error::Divergence { step: self.steps, norm });
        }
        self.z = next;
        self.steps += 1;
        Ok(())
    }

    /// Measurement placed on the channel: `y` itself while not spoofing.
    pub fn transmit(&self, y: &DVector<f64>) -> DVector<f64> {
        if self.is_spoofing() {
            self.attack_measurement()
        } else {
            y.clone()
        }
    }

    /// Scalar-channel convenience wrappers.
    pub fn transmit_scalar(&self, y: f64) -> f64 {
        if self.is_spoofing() {
            self.attack_measurement()[0]
        } else {
            y
        }
    }

    pub fn advance_scalar(&mut self, u: f64, y_sent: f64, yhat: f64) -> Result<()> {
        self.advance(&DVector::from_element(1, u), &DVector::from_element(1, y_sent), &DVector::from_element(1, yhat))
    }
}

/// Full-knowledge attack: `g = K^T grad h_S(xhat)`, `y_a = thetahat + delta sign(g)`.
pub fn ideal_attack(xhat: &EstimatorState, observer: &ObserverConfig, cbf: &SafeSetCbf, delta: f64) -> f64 {
    let g = observer.k.dot(&cbf.gradient(xhat.xhat));
    let offset = optimal_offset(&DVector::from_element(1, g), delta, AttackNorm::Two)[0];
    xhat.yhat() + offset
}

//! Scenario configuration, read from a sectioned TOML file.
//!
//! Every key is optional; missing keys take the defaults below.

use std::path::Path;

use nalgebra::Matrix2;
use serde::{Deserialize, Serialize};

use crate::attack::AttackNorm;
use crate::defender::{DetectorConfig, LqrController, ObserverConfig, ObserverMode};
use crate::error::{Error, Result};
use crate::filter::{SafeSetCbf, SafetyFilter};
use crate::plant::{PlantParams, PlantState};
use crate::safeset::{CoverKind, DEFAULT_BURN_IN, DEFAULT_MVEE_TOL};
use crate::sysid::{PredictMode, SysIdOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObserverSection {
    pub mode: ObserverMode,
    /// Diagonal of the process noise covariance (theta, theta_dot).
    pub qn: [f64; 2],
    /// Measurement noise variance.
    pub rn: f64,
}

impl Default for ObserverSection {
    fn default() -> Self {
        Self {
            mode: ObserverMode::NonlinearPredict,
            qn: [1e-8, 1e-6],
            rn: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Waveform {
    None,
    #[default]
    Square,
    Sine,
}

/// Reference offset added to the controller's angle target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Excitation {
    pub waveform: Waveform,
    pub amplitude: f64,
    pub period: f64,
}

impl Default for Excitation {
    fn default() -> Self {
        Self {
            waveform: Waveform::Square,
            amplitude: 0.1,
            period: 10.0,
        }
    }
}

impl Excitation {
    pub const NONE: Self = Self {
        waveform: Waveform::None,
        amplitude: 0.0,
        period: 1.0,
    };

    pub fn at(&self, t: f64) -> f64 {
        match self.waveform {
            Waveform::None => 0.0,
            Waveform::Square => {
                let phase = (t / self.period).rem_euclid(1.0);
                if phase < 0.5 {
                    self.amplitude
                } else {
                    -self.amplitude
                }
            }
            Waveform::Sine => self.amplitude * (std::f64::consts::TAU * t / self.period).sin(),
        }
    }
}

/// Closed-loop controller. Gains are in torque units per (rad, rad/s); the
/// default is `[1.5, 1.5]` applied to the linearized acceleration, i.e.
/// scaled by `m l^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerSection {
    pub gains: [f64; 2],
    /// Use the true angle in the gravity-cancelling term.
    pub use_true_theta_ff: bool,
}

impl Default for ControllerSection {
    fn default() -> Self {
        Self {
            gains: [3.0, 3.0],
            use_true_theta_ff: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CollectSection {
    pub duration: f64,
    pub seed: u64,
    pub x0: [f64; 2],
    pub xhat0: [f64; 2],
    pub excitation: Excitation,
}

impl Default for CollectSection {
    fn default() -> Self {
        Self {
            duration: 100.0,
            seed: 1,
            x0: [0.0, 0.0],
            xhat0: [0.0, 0.0],
            excitation: Excitation::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SafesetSection {
    pub cover: CoverKind,
    /// Latent replay used to build the point cloud.
    pub latent_mode: PredictMode,
    pub burn_in: usize,
    pub tol: f64,
    /// Threshold-bound scale `delta_tilde = gamma * max |r|`.
    pub gamma: f64,
}

impl Default for SafesetSection {
    fn default() -> Self {
        Self {
            cover: CoverKind::Ellipse,
            latent_mode: PredictMode::Simulation,
            burn_in: DEFAULT_BURN_IN,
            tol: DEFAULT_MVEE_TOL,
            gamma: 0.9,
        }
    }
}

/// Which outcomes count as a successful attack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuccessPredicate {
    pub require_exit: bool,
    pub require_no_alarm: bool,
    pub require_estimate_safe: bool,
}

impl Default for SuccessPredicate {
    fn default() -> Self {
        Self {
            require_exit: true,
            require_no_alarm: true,
            require_estimate_safe: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    pub enabled: bool,
    pub start_time: f64,
    pub duration: f64,
    pub norm: AttackNorm,
    pub seed: u64,
    pub x0: [f64; 2],
    /// Initial estimate; defaults to `x0`.
    pub xhat0: Option<[f64; 2]>,
    pub success: SuccessPredicate,
}

impl Default for AttackSection {
    fn default() -> Self {
        Self {
            enabled: true,
            start_time: 1.0,
            duration: 3.0,
            norm: AttackNorm::Inf,
            seed: 1,
            x0: [-0.2, 0.5],
            xhat0: None,
            success: SuccessPredicate::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub plant: PlantParams,
    pub observer: ObserverSection,
    pub detector: DetectorConfig,
    pub filter: SafeSetCbf,
    pub controller: ControllerSection,
    pub collect: CollectSection,
    pub identify: SysIdOptions,
    pub safeset: SafesetSection,
    pub attack: AttackSection,
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidParameter(format!("config serialization: {e}")))
    }

    /// Sets both the collection and the attack seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.collect.seed = seed;
        self.attack.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.plant.validate()?;
        self.detector.validate()?;
        self.filter.validate()?;
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if !(self.collect.duration > 0.0) {
            return bad(format!("collect.duration must be > 0, got {}", self.collect.duration));
        }
        if !(self.attack.duration > 0.0) {
            return bad(format!("attack.duration must be > 0, got {}", self.attack.duration));
        }
        if !(self.attack.start_time >= 0.0) {
            return bad(format!("attack.start_time must be >= 0, got {}", self.attack.start_time));
        }
        if !(self.safeset.gamma > 0.0 && self.safeset.gamma <= 1.0) {
            return bad(format!("safeset.gamma must lie in (0, 1], got {}", self.safeset.gamma));
        }
        if !(self.safeset.tol > 0.0) {
            return bad(format!("safeset.tol must be > 0, got {}", self.safeset.tol));
        }
        if self.collect.excitation.waveform != Waveform::None && !(self.collect.excitation.period > 0.0) {
            return bad("excitation period must be > 0".into());
        }
        if !(self.observer.rn > 0.0) || self.observer.qn.iter().any(|q| !(*q >= 0.0)) {
            return bad("observer noise covariances must be non-negative with rn > 0".into());
        }
        let o = &self.identify;
        if o.order == 0 || o.horizon == 0 || !(o.train_fraction > 0.0 && o.train_fraction <= 1.0) {
            return bad("identify: order and horizon must be >= 1 and train_fraction in (0, 1]".into());
        }
        Ok(())
    }

    pub fn observer(&self) -> Result<ObserverConfig> {
        let [q1, q2] = self.observer.qn;
        ObserverConfig::kalman(self.plant, Matrix2::new(q1, 0.0, 0.0, q2), self.observer.rn, self.observer.mode)
    }

    pub fn safety_filter(&self) -> SafetyFilter {
        SafetyFilter::new(self.filter, self.plant)
    }

    pub fn controller(&self) -> LqrController {
        LqrController {
            gains: self.controller.gains,
            use_true_theta_ff: self.controller.use_true_theta_ff,
        }
    }

    pub fn collect_steps(&self) -> usize {
        (self.collect.duration / self.plant.dt).round() as usize
    }

    pub fn attack_steps(&self) -> usize {
        (self.attack.duration / self.plant.dt).round() as usize
    }

    pub fn warmup_steps(&self) -> usize {
        (self.attack.start_time / self.plant.dt).round() as usize
    }

    pub fn attack_initial_states(&self) -> (PlantState, PlantState) {
        let [a, b] = self.attack.x0;
        let [c, d] = self.attack.xhat0.unwrap_or(self.attack.x0);
        (PlantState::new(a, b), PlantState::new(c, d))
    }
}

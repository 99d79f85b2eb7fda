//! Closed-loop simulation, the offline pipeline and run metrics.
//!
//! One simulation step, in order: measure, pass the measurement through the
//! channel (where the adversary may sit), evaluate residual and alarm, compute
//! the desired control from the estimate, filter it, log, let the adversary
//! observe, then advance the plant and the observer.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attack::AttackState;
use crate::config::{Excitation, ScenarioConfig, SuccessPredicate};
use crate::defender::{residual, EstimatorState};
use crate::error::{Error, Result};
use crate::log::{DataLog, LogRow};
use crate::plant::{NoiseSource, PlantState};
use crate::safeset::{bound_threshold, fit_cover, latent_trajectory, Cover, ThresholdBound};
use crate::sysid::{identify, validation_rmse, LinearSsModel};

pub const COLLECT_CSV: &str = "collect.csv";
pub const MODEL_JSON: &str = "model.json";
pub const COVER_JSON: &str = "cover.json";
pub const THRESHOLD_JSON: &str = "threshold.json";
pub const ATTACK_CSV: &str = "attack.csv";
pub const METRICS_JSON: &str = "metrics.json";

/// Initial conditions and drive of one closed-loop run.
#[derive(Debug, Clone, Copy)]
pub struct RunSpec {
    pub x0: PlantState,
    pub xhat0: PlantState,
    pub steps: usize,
    pub excitation: Excitation,
    pub seed: u64,
}

/// Simulates the closed loop, optionally with an adversary on the
/// measurement channel.
pub fn simulate(cfg: &ScenarioConfig, run: &RunSpec, mut adversary: Option<&mut AttackState>) -> Result<DataLog> {
    let plant = cfg.plant;
    let observer = cfg.observer()?;
    let filter = cfg.safety_filter();
    let controller = cfg.controller();
    let detector = cfg.detector;
    let mut noise = NoiseSource::new(run.seed);
    let mut x = run.x0;
    let mut est = EstimatorState::new(run.xhat0);
    let mut rows = Vec::with_capacity(run.steps);
    for k in 0..run.steps {
        let t = k as f64 * plant.dt;
        let y_true = plant.measure(x, &mut noise);
        let y_sent = match adversary.as_deref() {
            Some(a) => a.transmit_scalar(y_true),
            None => y_true,
        };
        let yhat = est.yhat();
        let r = residual(&est, y_sent);
        let alarm = detector.alarm(&[r]);
        let u_c = controller.control(&est, Some(x), &plant, run.excitation.at(t));
        let u = filter.filter(u_c, est.xhat).u;
        rows.push(LogRow {
            t,
            u_c,
            u,
            y_true,
            y_sent,
            yhat,
            theta: x.theta,
            thetadot: x.theta_dot,
            xhat1: est.xhat.theta,
            xhat2: est.xhat.theta_dot,
            r,
            alarm: alarm as u8,
            hs_x: filter.cbf.value(x),
            hs_xhat: filter.cbf.value(est.xhat),
            hs_z: adversary.as_deref().map_or(f64::NAN, |a| a.margin()),
            deactivated: filter.is_deactivated(x, est.xhat) as u8,
        });
        if let Some(a) = adversary.as_deref_mut() {
            a.advance_scalar(u, y_sent, yhat)?;
        }
        x = plant.step(x, u)?;
        est = observer.step(est, u, y_sent)?;
    }
    Ok(DataLog::new(rows))
}

pub fn collect_spec(cfg: &ScenarioConfig) -> RunSpec {
    let [a, b] = cfg.collect.x0;
    let [c, d] = cfg.collect.xhat0;
    RunSpec {
        x0: PlantState::new(a, b),
        xhat0: PlantState::new(c, d),
        steps: cfg.collect_steps(),
        excitation: cfg.collect.excitation,
        seed: cfg.collect.seed,
    }
}

pub fn attack_spec(cfg: &ScenarioConfig) -> RunSpec {
    let (x0, xhat0) = cfg.attack_initial_states();
    RunSpec {
        x0,
        xhat0,
        steps: cfg.attack_steps(),
        excitation: Excitation::NONE,
        seed: cfg.attack.seed,
    }
}

/// Nominal data collection. Any alarm invalidates the log.
pub fn run_collect(cfg: &ScenarioConfig) -> Result<DataLog> {
    cfg.validate()?;
    let log = simulate(cfg, &collect_spec(cfg), None)?;
    if let Some(row) = log.rows.iter().find(|r| r.alarm != 0) {
        return Err(Error::AlarmDuringCollection { t: row.t, residual: row.r });
    }
    Ok(log)
}

/// Output of the offline phase.
#[derive(Debug, Clone)]
pub struct OfflineArtifacts {
    pub model: LinearSsModel,
    pub cover: Cover,
    pub bound: ThresholdBound,
    /// Held-out one-step RMSE of the identified predictor.
    pub id_rmse: f64,
}

impl OfflineArtifacts {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.model.save(&dir.join(MODEL_JSON))?;
        self.cover.save(&dir.join(COVER_JSON))?;
        self.bound.save(&dir.join(THRESHOLD_JSON))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Ok(Self {
            model: LinearSsModel::load(&dir.join(MODEL_JSON))?,
            cover: Cover::load(&dir.join(COVER_JSON))?,
            bound: ThresholdBound::load(&dir.join(THRESHOLD_JSON))?,
            id_rmse: f64::NAN,
        })
    }
}

/// Identification, latent cover and threshold bound from a collected log.
/// Artifacts are written to `out` when given.
pub fn run_offline(cfg: &ScenarioConfig, log: &DataLog, out: Option<&Path>) -> Result<OfflineArtifacts> {
    log.dt()?;
    let id = identify(log, &cfg.identify)?;
    let id_rmse = validation_rmse(&id.model, log, cfg.identify.train_fraction)?;
    let z = latent_trajectory(&id.model, log, cfg.safeset.latent_mode, cfg.safeset.burn_in)?;
    let cover = fit_cover(&z, cfg.safeset.cover, cfg.safeset.tol)?;
    let bound = bound_threshold(log, cfg.safeset.gamma, cfg.detector.norm)?;
    let artifacts = OfflineArtifacts {
        model: id.model,
        cover,
        bound,
        id_rmse,
    };
    if let Some(dir) = out {
        artifacts.save(dir)?;
    }
    Ok(artifacts)
}

/// Closed loop with the adversary on the channel; with `attack.enabled`
/// false the adversary only listens.
pub fn run_attack(cfg: &ScenarioConfig, artifacts: &OfflineArtifacts) -> Result<(DataLog, RunMetrics)> {
    cfg.validate()?;
    let mut adversary = AttackState::new(
        artifacts.model.clone(),
        artifacts.cover.clone(),
        artifacts.bound.delta_tilde,
        cfg.attack.norm,
        cfg.warmup_steps(),
    )?;
    adversary.active = cfg.attack.enabled;
    let log = simulate(cfg, &attack_spec(cfg), Some(&mut adversary))?;
    let start = cfg.attack.enabled.then_some(cfg.attack.start_time);
    let mut metrics = RunMetrics::from_log(&log, start, Some(artifacts.bound.delta_tilde))?;
    metrics.id_rmse = artifacts.id_rmse.is_finite().then_some(artifacts.id_rmse);
    Ok((log, metrics))
}

mod inf_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub steps: usize,
    pub min_hs_x: f64,
    pub min_hs_xhat: f64,
    /// First time with `h_S(x) < 0`; infinite when the state never leaves.
    #[serde(with = "inf_as_null")]
    pub first_exit_time: f64,
    pub alarm_count: usize,
    pub max_abs_r: f64,
    /// Steps at which the estimate deactivates the filter.
    pub deactivation_count: usize,
    pub id_rmse: Option<f64>,
    pub attack_start: Option<f64>,
    pub delta_tilde: Option<f64>,
    /// Largest excess of `|r|` over `delta_tilde` during spoofing.
    pub eps_model: Option<f64>,
}

impl RunMetrics {
    pub fn from_log(log: &DataLog, attack_start: Option<f64>, delta_tilde: Option<f64>) -> Result<Self> {
        if log.is_empty() {
            return Err(Error::EmptyLog);
        }
        let rows = &log.rows;
        let min = |f: fn(&LogRow) -> f64| rows.iter().map(f).fold(f64::INFINITY, f64::min);
        let eps_model = match (attack_start, delta_tilde) {
            (Some(start), Some(d)) => Some(
                rows.iter()
                    .filter(|r| r.t >= start - 1e-9)
                    .map(|r| r.r.abs() - d)
                    .fold(0.0, f64::max),
            ),
            _ => None,
        };
        Ok(Self {
            steps: rows.len(),
            min_hs_x: min(|r| r.hs_x),
            min_hs_xhat: min(|r| r.hs_xhat),
            first_exit_time: rows.iter().find(|r| r.hs_x < 0.0).map_or(f64::INFINITY, |r| r.t),
            alarm_count: log.alarm_count(),
            max_abs_r: rows.iter().map(|r| r.r.abs()).fold(0.0, f64::max),
            deactivation_count: rows.iter().filter(|r| r.deactivated != 0).count(),
            id_rmse: None,
            attack_start,
            delta_tilde,
            eps_model,
        })
    }

    pub fn is_success(&self, predicate: &SuccessPredicate) -> bool {
        (!predicate.require_exit || self.first_exit_time.is_finite())
            && (!predicate.require_no_alarm || self.alarm_count == 0)
            && (!predicate.require_estimate_safe || self.min_hs_xhat >= 0.0)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write_table<W: Write>(&self, mut w: W) -> Result<()> {
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.6e}"));
        let exit = if self.first_exit_time.is_finite() {
            format!("{:.2} s", self.first_exit_time)
        } else {
            "never".to_string()
        };
        let lines = [
            ("steps", self.steps.to_string()),
            ("min h_S(x)", format!("{:.6}", self.min_hs_x)),
            ("min h_S(xhat)", format!("{:.6}", self.min_hs_xhat)),
            ("first exit", exit),
            ("alarms", self.alarm_count.to_string()),
            ("max |r|", format!("{:.6e}", self.max_abs_r)),
            ("deactivated steps", self.deactivation_count.to_string()),
            ("id RMSE", opt(self.id_rmse)),
            ("attack start", self.attack_start.map_or("-".to_string(), |t| format!("{t:.2} s"))),
            ("delta_tilde", opt(self.delta_tilde)),
            ("eps_model", opt(self.eps_model)),
        ];
        writeln!(w, "{:<20} value", "metric")?;
        writeln!(w, "{:-<20} {:-<16}", "", "")?;
        for (name, value) in lines {
            writeln!(w, "{name:<20} {value}")?;
        }
        Ok(())
    }
}

/// Writes the run log as CSV and the metrics as a table; returns the success
/// predicate.
pub fn report<W: Write>(
    log: &DataLog,
    metrics: &RunMetrics,
    csv_path: &Path,
    predicate: &SuccessPredicate,
    out: W,
) -> Result<bool> {
    if log.is_empty() {
        return Err(Error::EmptyLog);
    }
    log.save(csv_path)?;
    metrics.write_table(out)?;
    Ok(metrics.is_success(predicate))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::AttackNorm;
    use crate::safeset::EllipsoidCover;
    use nalgebra::{DMatrix, DVector};

    fn short_cfg() -> ScenarioConfig {
        let mut cfg = ScenarioConfig::default();
        cfg.collect.duration = 2.0;
        cfg.attack.duration = 2.0;
        cfg
    }

    fn dummy_artifacts() -> OfflineArtifacts {
        OfflineArtifacts {
            model: LinearSsModel {
                a: DMatrix::from_row_slice(2, 2, &[0.9, 0.0, 0.0, 0.8]),
                bu: DMatrix::from_element(2, 1, 0.01),
                by: DMatrix::from_element(2, 1, 0.1),
                k: DMatrix::zeros(2, 1),
                c: DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
                meta: Default::default(),
            },
            cover: Cover::Ellipse(EllipsoidCover { q: DMatrix::identity(2, 2), v: DVector::zeros(2) }),
            bound: ThresholdBound { delta_tilde: 1e-3, gamma: 0.9 },
            id_rmse: f64::NAN,
        }
    }

    #[test]
    fn collection_shape() {
        let log = run_collect(&short_cfg()).unwrap();
        assert_eq!(log.len(), 200);
        assert!((log.dt().unwrap() - 0.01).abs() < 1e-12);
        assert!(log.rows.iter().all(|r| r.hs_z.is_nan() && r.y_sent == r.y_true));
    }

    #[test]
    fn equilibrium_without_noise_or_excitation_is_all_zero() {
        let mut cfg = short_cfg();
        cfg.plant.noise_std = 0.0;
        cfg.collect.excitation = Excitation::NONE;
        let log = run_collect(&cfg).unwrap();
        for r in &log.rows {
            assert_eq!((r.u_c, r.u, r.y_true, r.y_sent, r.yhat, r.theta, r.thetadot, r.xhat1, r.xhat2, r.r), Default::default());
        }
    }

    #[test]
    fn inactive_adversary_is_transparent() {
        let mut cfg = short_cfg();
        cfg.attack.enabled = false;
        let spec = RunSpec { excitation: cfg.collect.excitation, ..attack_spec(&cfg) };
        let plain = simulate(&cfg, &spec, None).unwrap();
        let mut adv = AttackState::new(dummy_artifacts().model, dummy_artifacts().cover, 1e-3, AttackNorm::Inf, 0).unwrap();
        adv.active = false;
        let tapped = simulate(&cfg, &spec, Some(&mut adv)).unwrap();
        for (a, b) in plain.rows.iter().zip(&tapped.rows) {
            let mut b = *b;
            assert!(b.hs_z.is_finite());
            b.hs_z = f64::NAN;
            assert_eq!(format!("{a:?}"), format!("{b:?}"));
        }
    }

    #[test]
    fn runs_are_deterministic_per_seed() {
        let cfg = short_cfg();
        let a = run_collect(&cfg).unwrap();
        let b = run_collect(&cfg).unwrap();
        // hS_z is NaN without an adversary, so compare the printed form
        assert_eq!(format!("{a:?}"), format!("{b:?}"));
        let c = run_collect(&cfg.clone().with_seed(99)).unwrap();
        assert_ne!(a.data_hash(), c.data_hash());
        let (la, ma) = run_attack(&cfg, &dummy_artifacts()).unwrap();
        let (lb, mb) = run_attack(&cfg, &dummy_artifacts()).unwrap();
        assert_eq!(ma, mb);
        assert_eq!(la.data_hash(), lb.data_hash());
    }

    #[test]
    fn collection_alarm_is_an_error() {
        let mut cfg = short_cfg();
        cfg.detector.delta = 1e-4;
        assert!(matches!(run_collect(&cfg), Err(Error::AlarmDuringCollection { .. })));
    }

    #[test]
    fn metrics_from_synthetic_log() {
        let rows = [(0.5, 0.4, 0.001, 0u8, 0u8), (0.1, 0.3, -0.004, 1, 1), (-0.2, 0.2, 0.002, 0, 1), (0.3, 0.5, 0.0, 0, 0)];
        let log = DataLog::new(
            rows.iter()
                .enumerate()
                .map(|(k, &(hx, hxh, r, alarm, deact))| LogRow {
                    t: k as f64 * 0.5,
                    hs_x: hx,
                    hs_xhat: hxh,
                    r,
                    alarm,
                    deactivated: deact,
                    ..Default::default()
                })
                .collect(),
        );
        let m = RunMetrics::from_log(&log, Some(0.5), Some(0.003)).unwrap();
        assert_eq!(m.steps, 4);
        assert_eq!(m.min_hs_x, -0.2);
        assert_eq!(m.min_hs_xhat, 0.2);
        assert_eq!(m.first_exit_time, 1.0);
        assert_eq!(m.alarm_count, 1);
        assert_eq!(m.max_abs_r, 0.004);
        assert_eq!(m.deactivation_count, 2);
        assert!((m.eps_model.unwrap() - 0.001).abs() < 1e-15);
        assert!(!m.is_success(&SuccessPredicate::default()));
        assert!(m.is_success(&SuccessPredicate { require_no_alarm: false, ..Default::default() }));
        assert!(matches!(RunMetrics::from_log(&DataLog::default(), None, None), Err(Error::EmptyLog)));
    }

    #[test]
    fn never_exiting_serializes_as_null() {
        let log = DataLog::new(vec![LogRow { hs_x: 1.0, hs_xhat: 1.0, ..Default::default() }]);
        let m = RunMetrics::from_log(&log, None, None).unwrap();
        assert!(m.first_exit_time.is_infinite());
        let json: serde_json::Value = serde_json::from_str(&m.to_json().unwrap()).unwrap();
        assert!(json["first_exit_time"].is_null());
        let back: RunMetrics = serde_json::from_str(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn report_writes_csv_and_table() {
        let dir = tempfile::tempdir().unwrap();
        let (log, m) = run_attack(&short_cfg(), &dummy_artifacts()).unwrap();
        let mut table = Vec::new();
        let path = dir.path().join(ATTACK_CSV);
        report(&log, &m, &path, &SuccessPredicate::default(), &mut table).unwrap();
        assert_eq!(DataLog::load(&path).unwrap().len(), m.steps);
        assert!(String::from_utf8(table).unwrap().contains("min h_S(x)"));
        assert!(matches!(
            report(&DataLog::default(), &m, &path, &SuccessPredicate::default(), Vec::new()),
            Err(Error::EmptyLog)
        ));
    }
}

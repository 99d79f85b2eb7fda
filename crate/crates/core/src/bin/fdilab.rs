use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fdilab::harness::{
    report, run_attack, run_collect, run_offline, OfflineArtifacts, RunMetrics, ATTACK_CSV, COLLECT_CSV, COVER_JSON,
    METRICS_JSON, MODEL_JSON, THRESHOLD_JSON,
};
use fdilab::safeset::{bound_threshold, fit_cover, latent_trajectory, Cover, ThresholdBound};
use fdilab::sysid::{identify, validation_rmse, LinearSsModel};
use fdilab::{DataLog, Result, ScenarioConfig};

#[derive(Parser)]
#[command(name = "fdilab", version, about = "Stealthy sensor spoofing against a safety-filtered pendulum")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Scenario file (TOML sections); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for both the collection and the attack run.
    #[arg(long)]
    seed: Option<u64>,
    /// Artifact directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate nominal operation and log (u, y, yhat).
    Collect(Common),
    /// Identify the latent observer model from the collected log.
    Identify(Common),
    /// Fit the latent safe-set cover.
    Safeset(Common),
    /// Bound the detector threshold from the collected residuals.
    Threshold(Common),
    /// Run the attack scenario with the stored artifacts.
    Attack(Common),
    /// Recompute metrics from a stored attack log.
    Report(Common),
    /// Collect, fit all artifacts and attack.
    RunAll(Common),
}

impl Common {
    fn config(&self) -> Result<ScenarioConfig> {
        let cfg = match &self.config {
            Some(path) => ScenarioConfig::load(path)?,
            None => ScenarioConfig::default(),
        };
        Ok(match self.seed {
            Some(seed) => cfg.with_seed(seed),
            None => cfg,
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Collect(c) => {
            let cfg = c.config()?;
            std::fs::create_dir_all(&c.out)?;
            let log = run_collect(&cfg)?;
            log.save(&c.path(COLLECT_CSV))?;
            println!("collected {} samples into {}", log.len(), c.path(COLLECT_CSV).display());
        }
        Command::Identify(c) => {
            let cfg = c.config()?;
            let log = DataLog::load(&c.path(COLLECT_CSV))?;
            let id = identify(&log, &cfg.identify)?;
            id.model.save(&c.path(MODEL_JSON))?;
            let rmse = validation_rmse(&id.model, &log, cfg.identify.train_fraction)?;
            println!("singular values: {:?}", id.singular_values);
            println!("held-out RMSE:   {rmse:.6e}");
            println!("eigenvalues:     {:?}", id.model.eigenvalues());
        }
        Command::Safeset(c) => {
            let cfg = c.config()?;
            let log = DataLog::load(&c.path(COLLECT_CSV))?;
            let model = LinearSsModel::load(&c.path(MODEL_JSON))?;
            let z = latent_trajectory(&model, &log, cfg.safeset.latent_mode, cfg.safeset.burn_in)?;
            let cover = fit_cover(&z, cfg.safeset.cover, cfg.safeset.tol)?;
            cover.save(&c.path(COVER_JSON))?;
            println!("fitted {:?} cover over {} latent points", cfg.safeset.cover, z.ncols());
        }
        Command::Threshold(c) => {
            let cfg = c.config()?;
            let log = DataLog::load(&c.path(COLLECT_CSV))?;
            let bound = bound_threshold(&log, cfg.safeset.gamma, cfg.detector.norm)?;
            bound.save(&c.path(THRESHOLD_JSON))?;
            println!("delta_tilde = {:.6e} (gamma = {})", bound.delta_tilde, bound.gamma);
        }
        Command::Attack(c) => {
            let cfg = c.config()?;
            let artifacts = OfflineArtifacts::load(&c.out)?;
            return attack_and_report(&cfg, &artifacts, &c.out);
        }
        Command::Report(c) => {
            let cfg = c.config()?;
            let log = DataLog::load(&c.path(ATTACK_CSV))?;
            let delta_tilde = ThresholdBound::load(&c.path(THRESHOLD_JSON)).ok().map(|b| b.delta_tilde);
            let start = cfg.attack.enabled.then_some(cfg.attack.start_time);
            let metrics = RunMetrics::from_log(&log, start, delta_tilde)?;
            std::fs::write(c.path(METRICS_JSON), metrics.to_json()?)?;
            let ok = report(&log, &metrics, &c.path(ATTACK_CSV), &cfg.attack.success, std::io::stdout())?;
            return Ok(exit(ok));
        }
        Command::RunAll(c) => {
            let cfg = c.config()?;
            std::fs::create_dir_all(&c.out)?;
            let log = run_collect(&cfg)?;
            log.save(&c.path(COLLECT_CSV))?;
            let artifacts = run_offline(&cfg, &log, Some(&c.out))?;
            if let Cover::Ellipse(e) = &artifacts.cover {
                println!("latent ellipse center: {:?}", e.center().map(|v| v.as_slice().to_vec()));
            }
            return attack_and_report(&cfg, &artifacts, &c.out);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn attack_and_report(cfg: &ScenarioConfig, artifacts: &OfflineArtifacts, out: &Path) -> Result<ExitCode> {
    let (log, metrics) = run_attack(cfg, artifacts)?;
    std::fs::write(out.join(METRICS_JSON), metrics.to_json()?)?;
    let ok = report(&log, &metrics, &out.join(ATTACK_CSV), &cfg.attack.success, std::io::stdout())?;
    Ok(exit(ok))
}

fn exit(success: bool) -> ExitCode {
    if success {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

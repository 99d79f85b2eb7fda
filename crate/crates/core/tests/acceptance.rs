//! Acceptance suite for the pendulum attack scenario. Prints one
//! `criterion N: PASS|FAIL` line per criterion and exits non-zero if any
//! criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use fdilab::attack::{optimal_offset, AttackNorm, AttackState};
use fdilab::defender::ObserverMode;
use fdilab::harness::{attack_spec, run_attack, run_collect, run_offline, simulate};
use fdilab::plant::PlantState;
use fdilab::safeset::{
    fit_convex_hull, fit_min_ellipse, latent_trajectory, Cover, EllipsoidCover, HullCover, DEFAULT_MVEE_TOL,
};
use fdilab::sysid::{identify, subspace_identify, validation_rmse, LinearSsModel, ModelMeta};
use fdilab::ScenarioConfig;
use nalgebra::{Complex, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const DETECTOR_DELTA: f64 = 5e-3;

/// Outcome of one criterion: pass flag and a one-line summary.
type Outcome = (bool, String);
type Criterion = (&'static str, fn() -> Outcome);

fn main() -> ExitCode {
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let criteria: [Criterion; 10] = [
        ("criterion 1", end_to_end_attack),
        ("criterion 2", nominal_safety),
        ("criterion 3", identification_quality),
        ("criterion 4", synthetic_markov_parameters),
        ("criterion 5", mvee_correctness),
        ("criterion 6", closed_form_optimality),
        ("criterion 7", filter_exactness),
        ("criterion 8", threshold_bound),
        ("criterion 9", gradient_checks),
        ("warm-up contract", warmup_contract),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let (ok, detail) = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            (false, format!("panicked: {msg}"))
        });
        println!("{name}: {} ({detail})", if ok { "PASS" } else { "FAIL" });
        failed += usize::from(!ok);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn end_to_end_attack() -> Outcome {
    let start = Instant::now();
    let mut successes = 0;
    let mut notes = Vec::new();
    for seed in 1..=10u64 {
        let cfg = ScenarioConfig::default().with_seed(seed);
        let outcome = run_collect(&cfg)
            .and_then(|log| run_offline(&cfg, &log, None))
            .and_then(|art| run_attack(&cfg, &art));
        match outcome {
            Ok((_, m)) => {
                let ok = m.first_exit_time <= 3.0
                    && m.min_hs_xhat >= 0.0
                    && m.alarm_count == 0
                    && m.max_abs_r <= DETECTOR_DELTA;
                successes += usize::from(ok);
                if !ok {
                    notes.push(format!(
                        "seed {seed}: exit {:.2} s, min hS(xhat) {:.3}, alarms {}",
                        m.first_exit_time, m.min_hs_xhat, m.alarm_count
                    ));
                }
            }
            Err(e) => notes.push(format!("seed {seed}: {e}")),
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let ok = successes >= 8 && secs <= 10.0;
    let mut detail = format!("{successes}/10 runs succeed, {secs:.2} s total");
    if !notes.is_empty() {
        detail.push_str("; ");
        detail.push_str(&notes.join("; "));
    }
    (ok, detail)
}

fn nominal_safety() -> Outcome {
    let mut worst = f64::INFINITY;
    let mut safe = 0;
    for seed in 1..=10u64 {
        let mut cfg = ScenarioConfig::default().with_seed(seed);
        cfg.attack.enabled = false;
        cfg.attack.duration = 30.0;
        let log = simulate(&cfg, &attack_spec(&cfg), None).expect("nominal run");
        let min = log.rows.iter().map(|r| r.hs_x).fold(f64::INFINITY, f64::min);
        worst = worst.min(min);
        safe += usize::from(min >= -0.01);
    }
    (safe == 10, format!("{safe}/10 seeds safe, worst min hS(x) = {worst:.4}"))
}

/// Relative errors between eigenvalue lists paired after sorting by
/// imaginary then real part.
fn paired_eig_errors(mut a: Vec<Complex<f64>>, mut b: Vec<Complex<f64>>) -> Vec<f64> {
    let key = |x: &Complex<f64>, y: &Complex<f64>| x.im.total_cmp(&y.im).then(x.re.total_cmp(&y.re));
    a.sort_by(key);
    b.sort_by(key);
    a.iter().zip(&b).map(|(x, y)| (x - y).norm() / y.norm()).collect()
}

fn identification_quality() -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for (mode, bound) in [(ObserverMode::NonlinearPredict, 0.10), (ObserverMode::LinearPredict, 0.01)] {
        let mut cfg = ScenarioConfig::default();
        cfg.observer.mode = mode;
        let log = run_collect(&cfg).expect("collection");
        let id = identify(&log, &cfg.identify).expect("identification");
        let rmse = validation_rmse(&id.model, &log, cfg.identify.train_fraction).expect("rmse");
        let oracle = cfg.observer().expect("observer").error_dynamics();
        let oracle_eigs: Vec<Complex<f64>> = oracle.complex_eigenvalues().iter().copied().collect();
        let err = paired_eig_errors(id.model.eigenvalues(), oracle_eigs)
            .into_iter()
            .fold(0.0, f64::max);
        ok &= rmse <= 5e-3 && err <= bound;
        parts.push(format!("{mode:?}: RMSE {rmse:.3e}, eig rel err {err:.3e} (bound {bound})"));
    }
    (ok, parts.join("; "))
}

fn synthetic_markov_parameters() -> Outcome {
    let truth = LinearSsModel {
        a: DMatrix::from_row_slice(2, 2, &[0.85, 0.25, -0.15, 0.75]),
        bu: DMatrix::from_row_slice(2, 1, &[0.4, -0.2]),
        by: DMatrix::from_row_slice(2, 1, &[0.1, 0.6]),
        k: DMatrix::from_row_slice(2, 1, &[0.3, -0.1]),
        c: DMatrix::from_row_slice(1, 2, &[1.0, 0.5]),
        meta: ModelMeta::default(),
    };
    let n = 2000;
    let mut r = rng(40);
    let w = DMatrix::from_fn(2, n, |_, _| gauss(&mut r));
    // noiseless: the innovation is identically zero
    let mut z = DVector::zeros(2);
    let mut o = DMatrix::zeros(1, n);
    for k in 0..n {
        o.set_column(k, &(&truth.c * &z));
        z = &truth.a * &z + truth.b() * w.column(k);
    }
    let id = subspace_identify(&w, &o, 1, 2, 10).expect("identification");
    let err = id
        .model
        .markov_parameters(10)
        .iter()
        .zip(truth.markov_parameters(10))
        .map(|(x, y)| (x - &y).norm() / y.norm())
        .fold(0.0, f64::max);
    (err <= 1e-6, format!("max relative Markov error {err:.3e}"))
}

fn mvee_correctness() -> Outcome {
    let square = DMatrix::from_row_slice(2, 4, &[1.0, 1.0, -1.0, -1.0, 1.0, -1.0, 1.0, -1.0]);
    let e = fit_min_ellipse(&square, DEFAULT_MVEE_TOL).expect("square fit");
    let expected = DMatrix::identity(2, 2) / 2f64.sqrt();
    let square_err = (&e.q - expected).abs().max().max(e.v.abs().max());

    let mut cfg = ScenarioConfig::default();
    cfg.safeset.burn_in = 0;
    let log = run_collect(&cfg).expect("collection");
    let id = identify(&log, &cfg.identify).expect("identification");
    let z = latent_trajectory(&id.model, &log, cfg.safeset.latent_mode, 0).expect("latent");
    let t0 = Instant::now();
    let cover = fit_min_ellipse(&z, cfg.safeset.tol).expect("latent fit");
    let latent_secs = t0.elapsed().as_secs_f64();
    let worst = z
        .column_iter()
        .map(|c| cover.value(&c.into_owned()))
        .fold(f64::INFINITY, f64::min);

    let mut r = rng(50);
    let cloud = DMatrix::from_fn(2, 10_000, |_, _| gauss(&mut r));
    let t0 = Instant::now();
    fit_min_ellipse(&cloud, DEFAULT_MVEE_TOL).expect("cloud fit");
    let cloud_secs = t0.elapsed().as_secs_f64();

    let ok = square_err <= 1e-6 && worst >= -1e-8 && latent_secs < 1.0 && cloud_secs < 1.0;
    (
        ok,
        format!(
            "square err {square_err:.2e}; {} latent points, min margin {worst:.2e}; fit times {latent_secs:.3} s latent, {cloud_secs:.3} s gaussian",
            z.ncols()
        ),
    )
}

fn random_model(r: &mut ChaCha8Rng, ny: usize) -> LinearSsModel {
    LinearSsModel {
        a: DMatrix::from_fn(2, 2, |_, _| 0.4 * gauss(r)),
        bu: DMatrix::from_fn(2, 1, |_, _| gauss(r)),
        by: DMatrix::from_fn(2, ny, |_, _| gauss(r)),
        k: DMatrix::from_fn(2, ny, |_, _| 0.1 * gauss(r)),
        c: DMatrix::from_fn(ny, 2, |_, _| gauss(r)),
        meta: ModelMeta::default(),
    }
}

fn random_ellipse(r: &mut ChaCha8Rng) -> EllipsoidCover {
    let m = DMatrix::from_fn(2, 2, |_, _| gauss(r));
    EllipsoidCover {
        q: &m * m.transpose() + DMatrix::identity(2, 2) * 0.5,
        v: DVector::from_fn(2, |_, _| gauss(r)),
    }
}

fn random_hull(r: &mut ChaCha8Rng) -> HullCover {
    let pts = DMatrix::from_fn(2, 30, |_, _| 2.0 * gauss(r));
    fit_convex_hull(&pts).expect("hull")
}

/// A random point on the boundary of the constraint set of radius `delta`.
fn boundary_sample(r: &mut ChaCha8Rng, n: usize, delta: f64, norm: AttackNorm) -> DVector<f64> {
    match norm {
        AttackNorm::Two => {
            let d = DVector::from_fn(n, |_, _| gauss(r));
            d.normalize() * delta
        }
        AttackNorm::Inf => {
            let mut d = DVector::from_fn(n, |_, _| r.random_range(-delta..=delta));
            let face = r.random_range(0..n);
            d[face] = if r.random_bool(0.5) { delta } else { -delta };
            d
        }
    }
}

fn closed_form_optimality() -> Outcome {
    let mut r = rng(60);
    let mut worst = f64::NEG_INFINITY;
    for norm in [AttackNorm::Two, AttackNorm::Inf] {
        for _ in 0..100 {
            let model = random_model(&mut r, 3);
            let cover = Cover::Ellipse(random_ellipse(&mut r));
            let delta = r.random_range(1e-3..1.0);
            let mut s = AttackState::new(model, cover, delta, norm, 0).expect("attack state");
            s.z = DVector::from_fn(2, |_, _| gauss(&mut r));
            let g = s.direction();
            let ytilde = s.ytilde();
            let best = g.dot(&s.attack_measurement());
            assert!((g.dot(&(&ytilde + optimal_offset(&g, delta, norm))) - best).abs() < 1e-12);
            for _ in 0..10_000 {
                let sample = &ytilde + boundary_sample(&mut r, 3, delta, norm);
                worst = worst.max(g.dot(&sample) - best);
            }
        }
    }
    (worst <= 1e-9, format!("largest sample excess over closed form {worst:.2e}"))
}

fn filter_exactness() -> Outcome {
    const GRID: usize = 100_000;
    let cfg = ScenarioConfig::default();
    let filter = cfg.safety_filter();
    let p = cfg.plant;
    let u_max = p.u_max;
    let step = 2.0 * u_max / (GRID - 1) as f64;
    let grid: Vec<f64> = (0..GRID).map(|i| -u_max + step * i as f64).collect();
    // Euler one-step margin, written out independently of the filter
    let margin = |x: PlantState, u: f64| {
        let acc = (p.g / p.l) * x.theta.sin() + u / (p.m * p.l * p.l);
        let next = PlantState::new(x.theta + p.dt * x.theta_dot, x.theta_dot + p.dt * acc);
        filter.cbf.value(next)
    };
    let mut r = rng(70);
    let (mut worst, mut infeasible, mut fallback_bad, mut passthrough_bad) = (0.0f64, 0, 0, 0);
    for _ in 0..1000 {
        let x = PlantState::new(r.random_range(-0.35..0.35), r.random_range(-0.7..0.7));
        let u_c = r.random_range(-4.0..4.0);
        let out = filter.filter(u_c, x);
        let feasible: Vec<f64> = grid.iter().copied().filter(|&u| margin(x, u) >= 0.0).collect();
        if feasible.is_empty() {
            infeasible += 1;
            let best = grid.iter().map(|&u| margin(x, u)).fold(f64::NEG_INFINITY, f64::max);
            // the fallback must be at least as good as the best grid input
            fallback_bad += usize::from(!out.infeasible || margin(x, out.u) < best - 1e-12);
            continue;
        }
        let oracle = feasible
            .iter()
            .copied()
            .min_by(|a, b| (a - u_c).abs().total_cmp(&(b - u_c).abs()))
            .unwrap();
        worst = worst.max((out.u - oracle).abs());
        if u_c.abs() <= u_max && margin(x, u_c) >= 0.0 && out.u != u_c {
            passthrough_bad += 1;
        }
    }
    let ok = worst <= step && fallback_bad == 0 && passthrough_bad == 0;
    (
        ok,
        format!(
            "max deviation from grid oracle {worst:.2e} (grid step {step:.2e}); {infeasible} infeasible states ({fallback_bad} bad fallbacks); {passthrough_bad} altered feasible inputs"
        ),
    )
}

fn threshold_bound() -> Outcome {
    let (mut runs, mut seed, mut skipped) = (0, 1000u64, 0);
    let mut largest = 0.0f64;
    let mut violations = 0;
    while runs < 50 {
        let mut cfg = ScenarioConfig::default().with_seed(seed);
        let mut r = rng(seed);
        cfg.collect.excitation.amplitude = r.random_range(0.02..0.1);
        cfg.collect.excitation.period = r.random_range(4.0..12.0);
        cfg.safeset.gamma = r.random_range(0.5..=1.0);
        seed += 1;
        let log = match run_collect(&cfg) {
            Ok(log) => log,
            Err(_) => {
                skipped += 1;
                continue;
            }
        };
        let bound = fdilab::safeset::bound_threshold(&log, cfg.safeset.gamma, cfg.detector.norm).expect("bound");
        largest = largest.max(bound.delta_tilde);
        violations += usize::from(bound.delta_tilde > cfg.detector.delta);
        runs += 1;
    }
    (
        violations == 0,
        format!("50 alarm-free runs ({skipped} alarmed runs discarded), largest delta_tilde {largest:.3e}"),
    )
}

fn central_diff<F: Fn(&DVector<f64>) -> f64>(f: F, x: &DVector<f64>) -> DVector<f64> {
    let h = 1e-6;
    DVector::from_fn(x.len(), |i, _| {
        let mut p = x.clone();
        let mut m = x.clone();
        p[i] += h;
        m[i] -= h;
        (f(&p) - f(&m)) / (2.0 * h)
    })
}

/// True when `z` lies within `eps` of a crease of the hull margin.
fn near_hull_crease(hull: &HullCover, z: &DVector<f64>, eps: f64) -> bool {
    let mut vals: Vec<f64> = hull
        .halfplanes
        .iter()
        .map(|(a, b)| b - a[0] * z[0] - a[1] * z[1])
        .collect();
    vals.sort_by(f64::total_cmp);
    vals.len() > 1 && vals[1] - vals[0] < eps
}

fn gradient_checks() -> Outcome {
    let mut r = rng(90);
    let (mut ellipse_err, mut hull_err, mut chain_err) = (0.0f64, 0.0f64, 0.0f64);
    let mut points = [0usize; 3];
    while points[0] < 100 {
        let e = random_ellipse(&mut r);
        let z = DVector::from_fn(2, |_, _| gauss(&mut r));
        let fd = central_diff(|p| e.value(p), &z);
        ellipse_err = ellipse_err.max((e.gradient(&z) - fd).abs().max());
        points[0] += 1;
    }
    while points[1] < 100 {
        let hull = random_hull(&mut r);
        let z = DVector::from_fn(2, |_, _| 2.0 * gauss(&mut r));
        if near_hull_crease(&hull, &z, 1e-4) {
            continue;
        }
        let fd = central_diff(|p| hull.value(p), &z);
        hull_err = hull_err.max((hull.gradient(&z) - fd).abs().max());
        points[1] += 1;
    }
    while points[2] < 100 {
        let cover = if points[2] % 2 == 0 {
            Cover::Ellipse(random_ellipse(&mut r))
        } else {
            Cover::Hull(random_hull(&mut r))
        };
        let mut s = AttackState::new(random_model(&mut r, 2), cover, 0.01, AttackNorm::Two, 0).expect("state");
        s.z = DVector::from_fn(2, |_, _| gauss(&mut r));
        let u = DVector::from_element(1, gauss(&mut r));
        let y = DVector::from_fn(2, |_, _| gauss(&mut r));
        let drift = &s.model.a * &s.z + &s.model.bu * &u;
        let succ = &drift + &s.model.by * &y;
        if let Cover::Hull(h) = &s.cover {
            if near_hull_crease(h, &succ, 1e-3) {
                continue;
            }
        }
        let fd = central_diff(|yv| s.cover.value(&(&drift + &s.model.by * yv)), &y);
        chain_err = chain_err.max((s.direction_at(&succ) - fd).abs().max());
        points[2] += 1;
    }
    let worst = ellipse_err.max(hull_err).max(chain_err);
    (
        worst <= 1e-6,
        format!("max abs error: ellipse {ellipse_err:.2e}, hull {hull_err:.2e}, chain rule {chain_err:.2e}"),
    )
}

fn warmup_contract() -> Outcome {
    let cfg = ScenarioConfig::default();
    let log = run_collect(&cfg).expect("collection");
    let art = run_offline(&cfg, &log, None).expect("offline");
    let n = cfg.warmup_steps();
    let listener = || {
        let mut a = AttackState::new(art.model.clone(), art.cover.clone(), art.bound.delta_tilde, cfg.attack.norm, n)
            .expect("state");
        a.active = false;
        a
    };
    let mut adversary = listener();
    let mut spec = attack_spec(&cfg);
    spec.steps = n;
    simulate(&cfg, &spec, Some(&mut adversary)).expect("warm-up");
    let ytilde = adversary.ytilde()[0];
    spec.steps = n + 1;
    let yhat = simulate(&cfg, &spec, Some(&mut listener())).expect("warm-up").rows[n].yhat;
    let gap = (ytilde - yhat).abs();
    (gap <= 2e-3, format!("|C z - yhat| = {gap:.3e} after {n} steps"))
}

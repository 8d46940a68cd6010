//! Acceptance run: every criterion at its stated tolerance and runtime
//! budget, one PASS/FAIL line each. Exits non-zero if any criterion fails.

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use shellflow::experiments::config::ExperimentConfig;
use shellflow::experiments::data::make_samples;
use shellflow::experiments::dd::run_double_descent;
use shellflow::experiments::micro::{run_micro, MicroRun};
use shellflow::experiments::pde::{run_pde, run_tail};
use shellflow::experiments::regimes::{critical_track, floor_arrival};
use shellflow::modes::{amplitudes, coupling_matrix, ModeState};
use shellflow::netlab::{error_vector, gradient_flow_step_with, init_network, jacobian, Integrator};
use shellflow::operator::{eigensystem, gram_operator, DerivativeMethod, GramOperator, OperatorDerivative};
use shellflow::shells::{build_ledger, flux_asymmetry, global_flux_imbalance};
use shellflow::transport::{effective_time, CSchedule, DriftSpec};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn cfg(text: &str) -> ExperimentConfig {
    ExperimentConfig::from_toml(text, None).expect("acceptance config resolves")
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn random_orthogonal(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| normal(rng));
    a.qr().q()
}

fn identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(20240601);
    let (mut omega_worst, mut internal_worst, mut action_worst, mut global_worst) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..100 {
        let n = rng.random_range(3..=24);
        let q = random_orthogonal(n, &mut rng);
        let spectrum = DVector::from_fn(n, |_, _| 10f64.powf(rng.random_range(-4.0..1.0)));
        let m = &q * DMatrix::from_diagonal(&spectrum) * q.transpose();
        let m = (&m + m.transpose()) * 0.5;
        let snap = eigensystem(&GramOperator { matrix: m, timestamp: 0.0 }, 1e-12).unwrap();
        let raw = DMatrix::from_fn(n, n, |_, _| normal(&mut rng));
        let mdot = OperatorDerivative { matrix: (&raw + raw.transpose()) * 0.5, timestamp: 0.0, method: DerivativeMethod::Directional };
        let lmax = snap.lambda_max;
        let omega = coupling_matrix(&snap, &mdot, 1e-8 * lmax).unwrap();
        let r = snap.rank();
        let g = ModeState { timestamp: 0.0, amplitudes: DVector::from_fn(r, |_, _| normal(&mut rng)) };

        let scale = omega.entries.amax().max(f64::MIN_POSITIVE);
        omega_worst = omega_worst.max((&omega.entries + omega.entries.transpose()).amax() / scale);

        let lambda0 = 10f64.powf(rng.random_range(-3.0..0.0));
        let qq = rng.random_range(1.5..4.0);
        let ledger = build_ledger(&g, &snap, Some(&omega), lambda0, qq, None).unwrap();
        internal_worst = internal_worst.max(ledger.internal.max_relative());
        action_worst = action_worst.max(flux_asymmetry(&ledger.flux));
        global_worst = global_worst.max(global_flux_imbalance(&ledger.flux));
    }
    let worst = omega_worst.max(internal_worst).max(action_worst).max(global_worst);
    outcome(
        worst <= 1e-12,
        format!(
            "100 instances: antisymmetry {omega_worst:.1e}, internal {internal_worst:.1e}, action-reaction {action_worst:.1e}, global {global_worst:.1e} (tol 1e-12)"
        ),
    )
}

fn frozen_operator() -> Outcome {
    let base = "experiment = \"shell-audit\"\nmodel_kind = \"random-features\"\nlayer_widths = [1, 1]\nfeature_count = 32\n";
    let probe = cfg(&format!("{base}steps = 2\nstride = 1\n"));
    let seed = 0;
    let (samples, _) = make_samples(&probe, seed).unwrap();
    let mut net = init_network(&probe.model_spec(seed, probe.feature_count)).unwrap();
    let w = samples.weights.clone();
    let snap = eigensystem(&gram_operator(&jacobian(&net, &samples).unwrap(), &w, 0.0).unwrap(), 1e-12).unwrap();
    let lmax = snap.lambda_max;

    // Amplitudes against g_u(0)·exp(−λ_u t) over [0, 5/λmax].
    let g0 = amplitudes(&error_vector(&net, &samples, 0.0).unwrap(), &snap, &w).unwrap();
    let dt = 1e-3 / lmax;
    let mut worst_amp = 0.0f64;
    for k in 1..=5000 {
        net = gradient_flow_step_with(&net, &samples, dt, Integrator::Rk4).unwrap().0;
        if k % 50 == 0 {
            let t = k as f64 * dt;
            let g = amplitudes(&error_vector(&net, &samples, t).unwrap(), &snap, &w).unwrap();
            let exact = DVector::from_fn(g0.amplitudes.len(), |u, _| g0.amplitudes[u] * (-snap.eigenvalues[u] * t).exp());
            worst_amp = worst_amp.max((&g.amplitudes - &exact).norm() / exact.norm());
        }
    }

    // Shell balance with the same model; λmax·dt = 1e-4 keeps the central
    // difference below the tolerance.
    let dt = 1e-4 / lmax;
    let audit = cfg(&format!("{base}dt = {dt:e}\nsteps = 50000\nstride = 500\n"));
    let run = run_micro(&audit, seed, true).unwrap();
    let balance = run.balance.as_ref().map_or(f64::INFINITY, |b| b.max_relative_to_dissipation);
    outcome(
        worst_amp <= 1e-6 && balance <= 1e-8,
        format!("amplitude error {worst_amp:.2e} (tol 1e-6), balance residual {balance:.2e} of max D (tol 1e-8)"),
    )
}

fn micro_pair() -> (MicroRun, MicroRun) {
    let coarse = cfg("experiment = \"shell-audit\"\ndt = 1e-3\nsteps = 5000\nstride = 50\n");
    let fine = cfg("experiment = \"shell-audit\"\ndt = 5e-4\nsteps = 10000\nstride = 100\n");
    (run_micro(&coarse, 0, true).unwrap(), run_micro(&fine, 0, true).unwrap())
}

fn convergence(pair: &(MicroRun, MicroRun)) -> Outcome {
    let (a, b) = pair;
    let (ra, rb) = (a.residual.as_ref().unwrap(), b.residual.as_ref().unwrap());
    let ratio = ra.rms_relative / rb.rms_relative;
    let usable = a.usable_fraction.min(b.usable_fraction);
    outcome(
        ratio >= 3.5 && usable >= 0.8,
        format!(
            "rms {:.3e} -> {:.3e}, ratio {ratio:.2} (need >= 3.5), usable {:.0}% (need >= 80%)",
            ra.rms_relative,
            rb.rms_relative,
            100.0 * usable
        ),
    )
}

fn shell_balance(pair: &(MicroRun, MicroRun)) -> Outcome {
    let (a, b) = pair;
    let (ba, bb) = (a.balance.as_ref().unwrap(), b.balance.as_ref().unwrap());
    let worst = ba.max_relative_to_dissipation.max(bb.max_relative_to_dissipation);
    let increase = a.max_loss_increase.max(b.max_loss_increase);
    outcome(
        worst <= 1e-4 && increase <= 1e-10,
        format!(
            "balance {worst:.2e} of max D (tol 1e-4; {} + {} stencils, {} flagged), max loss increase {increase:.2e} (tol 1e-10)",
            ba.evaluated_steps,
            bb.evaluated_steps,
            ba.flagged_steps + bb.flagged_steps
        ),
    )
}

fn tail() -> Outcome {
    let c = cfg("experiment = \"pde-scaling\"\ndrift_b = 3.0\n");
    let t = run_tail(&c, &c.drift().unwrap()).unwrap();
    outcome(
        (t.fit.slope + 3.0).abs() <= 0.3 && t.budget_error <= 1e-6,
        format!(
            "slope {:.4} on [{:.3e}, {:.3e}] ({} cells; need -3 +/- 0.3), mass budget error {:.1e} (tol 1e-6)",
            t.fit.slope, t.fit.window.0, t.fit.window.1, t.fit.points, t.budget_error
        ),
    )
}

fn frontier(b3: &shellflow::experiments::pde::PdeRun) -> Outcome {
    let b2 = run_pde(&cfg("experiment = \"pde-scaling\"\ndrift_b = 2.0\nrefine_factor = 1\n")).unwrap();
    let e3 = b3.frontier_exponent.map_or(f64::NAN, |e| e.exponent);
    let e2 = b2.frontier_exponent.map_or(f64::NAN, |e| e.exponent);
    outcome(
        (e3 + 0.5).abs() <= 0.05 && (e2 + 1.0).abs() <= 0.1,
        format!("b=3 exponent {e3:.4} (need -0.5 +/- 0.05), b=2 exponent {e2:.4} (need -1 +/- 0.1), tau in [1, 100]"),
    )
}

fn grsd(b3: &shellflow::experiments::pde::PdeRun) -> Outcome {
    let r2 = b3.snapshots.iter().filter_map(|s| s.goodness).fold(f64::INFINITY, f64::min);
    let last = b3.snapshots.last().unwrap();
    let k = b3.refinement.as_ref().map_or(f64::INFINITY, |r| r.max_relative_change);
    let (lo, hi) = last.fit_window.unwrap_or((f64::NAN, f64::NAN));
    outcome(
        r2 >= 0.95 && k <= 0.1,
        format!(
            "min R^2 {r2:.4} over snapshots (need >= 0.95; final window [{lo:.3e}, {hi:.3e}]), K change 64->128 cells/decade {:.1}% (tol 10%)",
            100.0 * k
        ),
    )
}

fn loss_oracle(b3: &shellflow::experiments::pde::PdeRun) -> Outcome {
    let l = b3.loss_exponent.map_or(f64::NAN, |e| e.exponent);
    let o = b3.oracle_exponent.map_or(f64::NAN, |e| e.exponent);
    let closed = b3.closed_form_loss_exponent.unwrap_or(f64::NAN);
    outcome(
        (l - o).abs() <= 0.05,
        format!(
            "PDE exponent {l:.4}, quadrature oracle {o:.4} (tol 0.05); closed form {closed:.4}, discrepancy {:.4} (reported)",
            l - closed
        ),
    )
}

fn regimes() -> Outcome {
    let c = cfg("experiment = \"regimes\"\n");
    let f = floor_arrival(&c, 0.5).unwrap();
    let t = critical_track(&c).unwrap();
    let ok_floor = (f.measured - f.predicted).abs() <= f.cell_crossing_time;
    outcome(
        ok_floor && t.max_deviation_cells <= 2.0,
        format!(
            "b=0.5 arrival tau {:.4} vs {:.4} (tol {:.4}), b=1 centroid within {:.2} cells (tol 2)",
            f.measured, f.predicted, f.cell_crossing_time, t.max_deviation_cells
        ),
    )
}

fn double_descent() -> Outcome {
    let c = cfg("experiment = \"double-descent\"\n");
    let sweep = run_double_descent(&c).unwrap();
    let monotone = sweep.runs.iter().filter(|r| r.train_monotone).count();
    let identity = sweep.runs.iter().map(|r| r.identity_max_relative).fold(0.0, f64::max);
    let at_one = sweep.summary.iter().find(|s| s.ratio == 1.0).map_or(0, |s| s.with_local_max);
    outcome(
        monotone == sweep.runs.len() && sweep.runs.len() == 15 && identity <= 1e-12 && at_one >= 3,
        format!(
            "train monotone {monotone}/{}, identity {identity:.1e} (tol 1e-12), rise-then-fall at ratio 1: {at_one}/5 (need >= 3)",
            sweep.runs.len()
        ),
    )
}

fn effective_time_check() -> Outcome {
    let c0 = 50.0;
    let d = DriftSpec::new(2.0, CSchedule::Power { c0, alpha: 2.0 }).unwrap();
    let ts = [1.0, 10.0, 100.0, 1000.0];
    let exact = ts.iter().all(|&t| effective_time(&d, t) == c0 * t * t / 2.0);
    let ratios: Vec<f64> = ts.iter().map(|&t| effective_time(&d, t) / (t * t)).collect();
    let spread = ratios.iter().map(|r| (r / ratios[0] - 1.0).abs()).fold(0.0, f64::max);
    outcome(exact && spread == 0.0, format!("tau = c0 t^2/2 exactly: {exact}; tau/t^2 spread over t in [1, 1000]: {spread:e}"))
}

fn main() {
    let mut failed = 0;
    let mut report = |id: usize, name: &str, budget: Duration, shared: Duration, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let o = f();
        let elapsed = start.elapsed() + shared;
        let passed = o.passed && elapsed <= budget;
        if !passed {
            failed += 1;
        }
        println!(
            "criterion {id:>2} {} {name}: {} [{:.1} s of {} s]",
            if passed { "PASS" } else { "FAIL" },
            o.detail,
            elapsed.as_secs_f64(),
            budget.as_secs()
        );
    };
    let min = |m: u64| Duration::from_secs(60 * m);

    report(1, "exact identities", min(1), Duration::ZERO, &mut identities);
    report(2, "frozen-operator oracle", min(1), Duration::ZERO, &mut frozen_operator);

    let start = Instant::now();
    let pair = micro_pair();
    let shared = start.elapsed();
    report(3, "mode-ODE convergence", min(10), shared, &mut || convergence(&pair));
    report(4, "shell balance audit", min(10), shared, &mut || shell_balance(&pair));
    report(5, "transport-only tail", min(5), Duration::ZERO, &mut tail);

    let start = Instant::now();
    let b3 = run_pde(&cfg("experiment = \"pde-scaling\"\ndrift_b = 3.0\n")).unwrap();
    let shared = start.elapsed();
    report(6, "frontier scaling", min(5), shared, &mut || frontier(&b3));
    report(7, "GRSD template fit", min(5), shared, &mut || grsd(&b3));
    report(8, "loss-exponent oracle", min(5), shared, &mut || loss_oracle(&b3));
    report(9, "regime map", min(5), Duration::ZERO, &mut regimes);
    report(10, "double descent", min(15), Duration::ZERO, &mut double_descent);
    report(11, "effective time", Duration::from_secs(1), Duration::ZERO, &mut effective_time_check);

    println!("{} of 11 criteria passed", 11 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

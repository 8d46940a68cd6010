//! End-to-end experiment recipes and their packaging into report tables.

pub mod config;
pub mod data;
pub mod dd;
pub mod micro;
pub mod pde;
pub mod regimes;
pub mod report;

use serde_json::json;

use crate::error::{Error, Result};
use config::{ExperimentConfig, ExperimentKind};
use report::{Artifacts, Cell, Check, Table};

/// Tolerance for identities that hold by construction (roundoff only).
pub const IDENTITY_TOL: f64 = 1e-12;

/// One output unit: `seed` is set when the experiment runs per seed and the
/// config lists several, in which case the unit gets its own subdirectory.
#[derive(Debug, Clone)]
pub struct Unit {
    pub seed: Option<u64>,
    pub artifacts: Artifacts,
}

/// Run every unit the config asks for.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<Unit>> {
    match cfg.experiment {
        ExperimentKind::OdeVerify | ExperimentKind::ShellAudit => {
            let many = cfg.seeds.len() > 1;
            cfg.seeds
                .iter()
                .map(|&s| Ok(Unit { seed: many.then_some(s), artifacts: micro_artifacts(cfg, s)? }))
                .collect()
        }
        ExperimentKind::PdeScaling => Ok(vec![Unit { seed: None, artifacts: pde_artifacts(cfg)? }]),
        ExperimentKind::DoubleDescent => Ok(vec![Unit { seed: None, artifacts: dd_artifacts(cfg)? }]),
        ExperimentKind::Regimes => Ok(vec![Unit { seed: None, artifacts: regime_artifacts(cfg)? }]),
    }
}

fn max_of(values: impl Iterator<Item = f64>) -> f64 {
    values.fold(0.0, f64::max)
}

pub fn micro_artifacts(cfg: &ExperimentConfig, seed: u64) -> Result<Artifacts> {
    let audit = cfg.experiment == ExperimentKind::ShellAudit;
    let run = micro::run_micro(cfg, seed, audit)?;
    let residual = run.residual.clone().ok_or(Error::AllStepsFlagged)?;

    let mut series = Table::new(
        "series",
        &[
            "step", "t", "loss", "lambda_max", "rank", "min_gap", "min_overlap", "usable", "masked_pairs",
            "coupling_power_rel", "internal_rel", "flux_asymmetry", "global_imbalance", "energy_sum_rel",
            "balance_rel", "crossing",
        ],
    );
    for r in &run.rows {
        series.push(vec![
            r.step.into(),
            r.t.into(),
            r.loss.into(),
            r.lambda_max.into(),
            r.rank.into(),
            r.min_gap.into(),
            r.min_overlap.into(),
            r.usable.into(),
            r.masked_pairs.into(),
            r.coupling_power_rel.into(),
            r.internal_rel.into(),
            r.flux_asymmetry.into(),
            r.global_imbalance.into(),
            r.energy_sum_rel.into(),
            r.balance_rel.into(),
            r.crossing.into(),
        ]);
    }

    let mut modes = Table::new("modes", &["mode", "rms_relative"]);
    for (u, v) in residual.per_mode.iter().enumerate() {
        modes.push(vec![u.into(), (*v).into()]);
    }
    let mut ledgers = vec![modes];

    let coupling_power = max_of(run.rows.iter().map(|r| r.coupling_power_rel));
    let mut checks = vec![
        Check::at_most("coupling_power_rel", coupling_power, 1e-10, true),
        Check::at_least("usable_fraction", run.usable_fraction, 0.8, false),
    ];
    let mut results = json!({
        "seed": seed,
        "residual": residual,
        "usable_fraction": run.usable_fraction,
        "max_loss_increase": run.max_loss_increase,
        "final_loss": run.losses.last().copied(),
    });

    if audit {
        let balance = run.balance.clone().ok_or(Error::AllStepsFlagged)?;
        let audited: Vec<_> = run.rows.iter().filter(|r| r.usable).collect();
        checks.extend([
            Check::at_most("internal_cancellation_rel", max_of(audited.iter().map(|r| r.internal_rel)), IDENTITY_TOL, true),
            Check::at_most("flux_antisymmetry_rel", max_of(audited.iter().map(|r| r.flux_asymmetry)), IDENTITY_TOL, true),
            Check::at_most("global_conservation_rel", max_of(audited.iter().map(|r| r.global_imbalance)), IDENTITY_TOL, true),
            Check::at_most("energy_partition_rel", max_of(audited.iter().map(|r| r.energy_sum_rel)), IDENTITY_TOL, true),
            Check::at_most("balance_rel_to_dissipation", balance.max_relative_to_dissipation, 1e-4, false),
            Check::at_most("max_loss_increase", run.max_loss_increase, 1e-10, false),
        ]);

        let mut shells = Table::new("shells", &["t", "alpha", "energy", "dissipation", "cumulative_flux", "net_inflow"]);
        let mut flux = Table::new("flux", &["t", "from", "to", "value"]);
        for l in &run.ledgers {
            for (i, a) in l.partition.alphas().enumerate() {
                shells.push(vec![
                    l.timestamp.into(),
                    a.into(),
                    l.energies[i].into(),
                    l.dissipations[i].into(),
                    l.cumulative[i].into(),
                    l.flux.net_inflow(a).into(),
                ]);
            }
            for (from, to, v) in l.flux.triplets() {
                flux.push(vec![l.timestamp.into(), from.into(), to.into(), v.into()]);
            }
        }
        let mut renorm = Table::new("renormalizability", &["alpha", "ratio"]);
        for (a, r) in &run.renormalizability {
            renorm.push(vec![(*a).into(), (*r).into()]);
        }
        ledgers.extend([shells, flux, renorm]);
        results["balance"] = json!(balance);
        results["lambda0"] = json!(run.lambda0);
        results["renormalizability"] = json!(run
            .renormalizability
            .iter()
            .map(|(a, r)| json!({"alpha": a, "ratio": r}))
            .collect::<Vec<_>>());
    }
    Ok(Artifacts { results, checks, series, ledgers })
}

pub fn pde_artifacts(cfg: &ExperimentConfig) -> Result<Artifacts> {
    let run = pde::run_pde(cfg)?;
    let mut series = Table::new(
        "series",
        &["tau", "t", "loss", "oracle_loss", "frontier", "a", "k", "goodness", "upper_edge", "mass", "outflow", "dissipated"],
    );
    for s in &run.snapshots {
        series.push(vec![
            s.tau.into(),
            s.time.into(),
            s.loss.into(),
            s.oracle_loss.into(),
            s.frontier.into(),
            s.a.into(),
            s.k.into(),
            s.goodness.into(),
            s.upper_edge.into(),
            s.mass.into(),
            s.ledger.outflow.into(),
            s.ledger.dissipated.into(),
        ]);
    }
    let mut density = Table::new("density", &["tau", "lambda", "epsilon"]);
    for f in &run.fields {
        for (l, e) in f.grid.centers.iter().zip(&f.values) {
            density.push(vec![f.tau.into(), (*l).into(), (*e).into()]);
        }
    }
    let mut ledgers = vec![density];

    let mut checks = vec![Check::at_most("mass_budget_rel", run.max_budget_error, 1e-10, true)];
    let mut results = json!({
        "regime": run.regime.label(),
        "drift": run.drift,
        "courant": run.courant,
        "dtau": run.dtau,
        "max_budget_error": run.max_budget_error,
    });

    if let (Some(fit), Some(pred)) = (run.frontier_exponent, run.frontier_predicted) {
        checks.push(Check::at_most("frontier_exponent_rel_error", ((fit.exponent - pred) / pred).abs(), 0.1, false));
    }
    results["frontier_exponent"] = json!(run.frontier_exponent);
    results["frontier_predicted"] = json!(run.frontier_predicted);
    if let Some(last) = run.snapshots.iter().rev().find(|s| s.goodness.is_some()) {
        checks.push(Check::at_least("grsd_goodness", last.goodness, 0.95, false));
        results["grsd"] = json!({"tau": last.tau, "a": last.a, "k": last.k, "goodness": last.goodness, "window": last.fit_window});
    }
    if let (Some(l), Some(o)) = (run.loss_exponent, run.oracle_exponent) {
        checks.push(Check::at_most("loss_exponent_vs_oracle", (l.exponent - o.exponent).abs(), 0.05, false));
    }
    results["loss_exponent"] = json!(run.loss_exponent);
    results["oracle_loss_exponent"] = json!(run.oracle_exponent);
    results["closed_form_loss_exponent"] = json!(run.closed_form_loss_exponent);
    results["loss_exponent_discrepancy_vs_closed_form"] =
        json!(run.loss_exponent.zip(run.closed_form_loss_exponent).map(|(l, c)| l.exponent - c));
    results["edge_shift_rate"] = json!(run.edge_shift_rate);

    if let Some(t) = &run.tail {
        checks.push(Check::at_most("tail_mass_budget_rel", t.budget_error, 1e-10, true));
        checks.push(Check::at_most("tail_slope_rel_error", ((t.fit.slope - t.predicted) / t.predicted).abs(), 0.1, false));
        results["tail"] = json!({
            "slope": t.fit.slope, "stderr": t.fit.stderr, "window": t.fit.window, "points": t.fit.points,
            "predicted": t.predicted, "tau": t.tau, "front": t.front, "ledger": t.ledger, "budget_error": t.budget_error,
        });
        let mut tail = Table::new("tail", &["lambda", "epsilon"]);
        for (l, e) in t.field.grid.centers.iter().zip(&t.field.values) {
            tail.push(vec![(*l).into(), (*e).into()]);
        }
        ledgers.push(tail);
    }
    if let Some(r) = &run.refinement {
        checks.push(Check::at_most("k_refinement_rel_change", r.max_relative_change, 0.1, false));
        let mut t = Table::new("refinement", &["tau", "k_coarse", "k_fine"]);
        for &(tau, c, f) in &r.k {
            t.push(vec![tau.into(), c.into(), f.into()]);
        }
        ledgers.push(t);
        results["refinement"] = json!(r);
    }
    Ok(Artifacts { results, checks, series, ledgers })
}

pub fn dd_artifacts(cfg: &ExperimentConfig) -> Result<Artifacts> {
    let sweep = dd::run_double_descent(cfg)?;
    let mut series = Table::new(
        "series",
        &["seed", "ratio", "features", "step", "t", "train_loss", "test_loss", "correction", "tail_energy"],
    );
    let mut runs = Table::new(
        "runs",
        &[
            "seed", "ratio", "features", "dt", "lambda_max", "steps", "train_monotone", "max_train_increase",
            "identity_max_rel", "local_max_t", "local_max_value", "tail_correction_corr",
        ],
    );
    for r in &sweep.runs {
        for row in &r.rows {
            series.push(vec![
                r.seed.into(),
                r.ratio.into(),
                r.feature_count.into(),
                row.step.into(),
                row.t.into(),
                row.train_loss.into(),
                row.test_loss.into(),
                row.correction.into(),
                row.tail_energy.into(),
            ]);
        }
        runs.push(vec![
            r.seed.into(),
            r.ratio.into(),
            r.feature_count.into(),
            r.dt.into(),
            r.lambda_max.into(),
            r.steps.into(),
            r.train_monotone.into(),
            r.max_train_increase.into(),
            r.identity_max_relative.into(),
            r.test_local_max.map(|m| m.t).into(),
            r.test_local_max.map(|m| m.value).into(),
            r.tail_correction_correlation.into(),
        ]);
    }
    let mut checks = vec![
        Check::at_most("mismatch_identity_rel", max_of(sweep.runs.iter().map(|r| r.identity_max_relative)), IDENTITY_TOL, true),
        Check::at_most(
            "max_train_increase",
            sweep.runs.iter().map(|r| r.max_train_increase).fold(f64::NEG_INFINITY, f64::max),
            dd::MONOTONE_SLACK,
            true,
        ),
    ];
    if let Some(s) = sweep.summary.iter().find(|s| s.ratio == 1.0) {
        checks.push(Check::at_least("interpolation_local_max_seeds", s.with_local_max as f64, 3.0, false));
    }
    let per_run: Vec<_> = sweep
        .runs
        .iter()
        .map(|r| {
            json!({
                "seed": r.seed, "ratio": r.ratio, "feature_count": r.feature_count, "dt": r.dt,
                "lambda_max": r.lambda_max, "steps": r.steps, "train_monotone": r.train_monotone,
                "max_train_increase": r.max_train_increase, "identity_max_relative": r.identity_max_relative,
                "test_local_max": r.test_local_max, "tail_correction_correlation": r.tail_correction_correlation,
            })
        })
        .collect();
    let results = json!({ "summary": sweep.summary, "runs": per_run });
    Ok(Artifacts { results, checks, series, ledgers: vec![runs] })
}

pub fn regime_artifacts(cfg: &ExperimentConfig) -> Result<Artifacts> {
    let map = regimes::run_regimes(cfg)?;
    let mut series = Table::new(
        "series",
        &["regime", "b", "quantity", "measured", "predicted", "tolerance", "passed", "classification"],
    );
    let mut checks = Vec::new();
    for r in &map.rows {
        series.push(vec![
            r.regime.label().into(),
            r.b.into(),
            Cell::from(r.quantity.as_str()),
            r.measured.into(),
            r.predicted.into(),
            r.tolerance.into(),
            r.passed.into(),
            Cell::from(r.classification.as_str()),
        ]);
        let name = match r.b {
            Some(b) => format!("{}_b{b}", r.regime.label()),
            None => r.regime.label().to_string(),
        };
        // The lazy decay rate is an exact integrating-factor identity.
        let gating = r.regime == pde::DriftRegime::Lazy;
        checks.push(Check::at_most(&name, (r.measured - r.predicted).abs(), r.tolerance, gating));
    }
    let mut ledgers = Vec::new();
    if !map.floor.is_empty() {
        let mut t = Table::new("floor_outflow", &["b", "tau", "outflow_fraction"]);
        for f in &map.floor {
            for &(tau, frac) in &f.outflow {
                t.push(vec![f.b.into(), tau.into(), frac.into()]);
            }
        }
        ledgers.push(t);
    }
    if let Some(c) = &map.critical {
        let mut t = Table::new("critical_track", &["tau", "log_centroid", "predicted"]);
        for &(tau, m, p) in &c.track {
            t.push(vec![tau.into(), m.into(), p.into()]);
        }
        ledgers.push(t);
    }
    if let Some(l) = &map.lazy {
        let mut t = Table::new("lazy_rates", &["lambda", "rate", "predicted"]);
        for &(lam, m, p) in &l.rates {
            t.push(vec![lam.into(), m.into(), p.into()]);
        }
        ledgers.push(t);
    }
    let floor: Vec<_> = map
        .floor
        .iter()
        .map(|f| {
            json!({
                "b": f.b, "lambda0": f.lambda0, "measured": f.measured, "predicted": f.predicted,
                "predicted_at_grid_floor": f.predicted_at_grid_floor, "cell_crossing_time": f.cell_crossing_time,
            })
        })
        .collect();
    let results = json!({
        "rows": map.rows,
        "floor_arrival": floor,
        "critical_max_deviation_cells": map.critical.as_ref().map(|c| c.max_deviation_cells),
        "lazy_max_relative_error": map.lazy.as_ref().map(|l| l.max_relative_error),
    });
    Ok(Artifacts { results, checks, series, ledgers })
}

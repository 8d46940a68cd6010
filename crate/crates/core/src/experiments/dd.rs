//! Train/test mismatch sweep: gradient flow of a random-features model
//! with the feature count swept around `n_train`.
//!
//! `L_te = L_tr + ½⟨e, Δe⟩` with `⟨e, Δe⟩ = ‖e‖²_te − ‖e‖²_tr`; `Δ` itself is
//! never formed.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::data::make_samples;
use super::micro::default_lambda0;
use crate::error::{Error, Result};
use crate::modes::amplitudes;
use crate::netlab::{error_vector, gradient_flow_step_with, init_network, jacobian, weighted_inner, Integrator, SampleSet};
use crate::operator::{eigensystem, gram_operator, SpectralSnapshot};
use crate::shells::shell_index;
use crate::stats::{geomspace, pearson};

/// Environment variable selecting the sweep's worker count.
pub const THREADS_ENV: &str = "SHELLFLOW_THREADS";

/// Absolute per-step slack on train-loss monotonicity (roundoff only).
pub const MONOTONE_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MismatchRow {
    pub step: usize,
    pub t: f64,
    pub train_loss: f64,
    pub test_loss: f64,
    /// `½⟨e, Δe⟩`
    pub correction: f64,
    /// `Σ_{α ≥ α₀} E_α` in the train geometry.
    pub tail_energy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalMax {
    pub row: usize,
    pub t: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MismatchReport {
    pub seed: u64,
    pub ratio: f64,
    pub feature_count: usize,
    pub dt: f64,
    pub lambda_max: f64,
    pub steps: usize,
    pub rows: Vec<MismatchRow>,
    pub train_monotone: bool,
    /// Largest `L_{k+1} − L_k` over every step (not just recorded rows).
    pub max_train_increase: f64,
    /// Largest `|L_te − L_tr − ½⟨e,Δe⟩| / L_te` over rows.
    pub identity_max_relative: f64,
    pub test_local_max: Option<LocalMax>,
    pub tail_correction_correlation: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioSummary {
    pub ratio: f64,
    pub runs: usize,
    pub monotone: usize,
    pub with_local_max: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DdSweep {
    pub runs: Vec<MismatchReport>,
    pub summary: Vec<RatioSummary>,
}

/// First interior local maximum that rises at least `prominence·L` above
/// the smallest earlier value and falls at least as much afterwards.
pub fn rise_then_fall(values: &[f64], prominence: f64) -> Option<usize> {
    (1..values.len().saturating_sub(1)).find(|&i| {
        let v = values[i];
        if !(v >= values[i - 1] && v >= values[i + 1]) {
            return false;
        }
        let before = values[..i].iter().copied().fold(f64::INFINITY, f64::min);
        let after = values[i + 1..].iter().copied().fold(f64::INFINITY, f64::min);
        v - before > prominence * v && v - after > prominence * v
    })
}

/// Steps at which rows are recorded: 0 plus `count` log-spaced steps.
pub fn record_steps(steps: usize, count: usize) -> Vec<usize> {
    let mut out = vec![0];
    if steps == 0 {
        return out;
    }
    for s in geomspace(1.0, steps as f64, count) {
        let k = (s.round() as usize).clamp(1, steps);
        if *out.last().unwrap() != k {
            out.push(k);
        }
    }
    out
}

fn tail_energy(e: &crate::netlab::ErrorVector, snap: &SpectralSnapshot, samples: &SampleSet, lambda0: f64, q: f64, alpha0: i64) -> Result<f64> {
    let g = amplitudes(e, snap, &samples.weights)?;
    Ok(snap
        .eigenvalues
        .iter()
        .zip(g.amplitudes.iter())
        .filter(|(l, _)| shell_index(**l, lambda0, q) >= alpha0)
        .map(|(_, a)| 0.5 * a * a)
        .sum())
}

fn snapshot_of(net: &crate::netlab::NetworkState, train: &SampleSet, rank_tol: f64) -> Result<SpectralSnapshot> {
    eigensystem(&gram_operator(&jacobian(net, train)?, &train.weights, 0.0)?, rank_tol)
}

/// One `(seed, feature ratio)` run.
pub fn run_mismatch(cfg: &ExperimentConfig, seed: u64, ratio: f64) -> Result<MismatchReport> {
    let feature_count = ((ratio * cfg.n_train as f64).round() as usize).max(1);
    let (train, test) = make_samples(cfg, seed)?;
    let test = test.ok_or_else(|| Error::Config("double-descent needs n_test ≥ 1".into()))?;
    let mut net = init_network(&cfg.model_spec(seed, feature_count))?;
    if cfg.zero_init {
        net = net.with_params(nalgebra::DVector::zeros(net.params.len()))?;
    }
    let frozen = net.spec.kind == crate::netlab::ModelKind::RandomFeatures;
    let mut snap = snapshot_of(&net, &train, cfg.rank_tol)?;
    let lambda_max = snap.lambda_max;
    if !(lambda_max > 0.0) {
        return Err(Error::InvalidArgument("Gram operator vanishes".into()));
    }
    let lambda0 = cfg.shell_lambda0.unwrap_or_else(|| default_lambda0(&snap, cfg.shell_q));
    let dt = cfg.dt_factor / lambda_max;
    let steps = (cfg.horizon / cfg.dt_factor).ceil() as usize;
    let records = record_steps(steps, cfg.record_points);

    let mut rows = Vec::with_capacity(records.len());
    let mut next_record = 0;
    let mut prev_loss = error_vector(&net, &train, 0.0)?.loss(&train.weights);
    let mut max_train_increase = f64::NEG_INFINITY;
    for k in 0..=steps {
        if k > 0 {
            let (n, l) = gradient_flow_step_with(&net, &train, dt, Integrator::Euler).map_err(|e| match e {
                Error::Divergence { reason, .. } => Error::Divergence { step: k, reason },
                other => other,
            })?;
            max_train_increase = max_train_increase.max(l - prev_loss);
            prev_loss = l;
            net = n;
        }
        if next_record < records.len() && records[next_record] == k {
            next_record += 1;
            let t = k as f64 * dt;
            let e_tr = error_vector(&net, &train, t)?;
            let e_te = error_vector(&net, &test, t)?;
            let train_loss = e_tr.loss(&train.weights);
            let test_loss = e_te.loss(&test.weights);
            let correction =
                0.5 * (weighted_inner(&e_te.values, &e_te.values, &test.weights) - weighted_inner(&e_tr.values, &e_tr.values, &train.weights));
            if !frozen {
                snap = snapshot_of(&net, &train, cfg.rank_tol)?;
            }
            let tail = tail_energy(&e_tr, &snap, &train, lambda0, cfg.shell_q, cfg.tail_alpha0)?;
            rows.push(MismatchRow { step: k, t, train_loss, test_loss, correction, tail_energy: tail });
        }
    }

    let identity_max_relative = rows
        .iter()
        .map(|r| (r.test_loss - r.train_loss - r.correction).abs() / r.test_loss.abs().max(f64::MIN_POSITIVE))
        .fold(0.0, f64::max);
    let test: Vec<f64> = rows.iter().map(|r| r.test_loss).collect();
    let test_local_max = rise_then_fall(&test, cfg.prominence).map(|i| LocalMax { row: i, t: rows[i].t, value: rows[i].test_loss });
    let tails: Vec<f64> = rows.iter().map(|r| r.tail_energy).collect();
    let corr: Vec<f64> = rows.iter().map(|r| r.correction).collect();
    Ok(MismatchReport {
        seed,
        ratio,
        feature_count,
        dt,
        lambda_max,
        steps,
        train_monotone: max_train_increase <= MONOTONE_SLACK,
        max_train_increase: if steps == 0 { 0.0 } else { max_train_increase },
        identity_max_relative,
        test_local_max,
        tail_correction_correlation: pearson(&tails, &corr),
        rows,
    })
}

fn thread_count() -> Option<usize> {
    std::env::var(THREADS_ENV).ok()?.trim().parse().ok().filter(|&n: &usize| n > 0)
}

/// All `(seed, ratio)` runs, in seed-major order regardless of scheduling.
pub fn run_double_descent(cfg: &ExperimentConfig) -> Result<DdSweep> {
    let jobs: Vec<(u64, f64)> = cfg.seeds.iter().flat_map(|&s| cfg.feature_ratios.iter().map(move |&r| (s, r))).collect();
    let work = || jobs.par_iter().map(|&(s, r)| run_mismatch(cfg, s, r)).collect::<Result<Vec<_>>>();
    let runs = match thread_count() {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("{THREADS_ENV}: {e}")))?
            .install(work)?,
        None => work()?,
    };
    let summary = cfg
        .feature_ratios
        .iter()
        .map(|&ratio| {
            let of: Vec<&MismatchReport> = runs.iter().filter(|r| r.ratio == ratio).collect();
            RatioSummary {
                ratio,
                runs: of.len(),
                monotone: of.iter().filter(|r| r.train_monotone).count(),
                with_local_max: of.iter().filter(|r| r.test_local_max.is_some()).count(),
            }
        })
        .collect();
    Ok(DdSweep { runs, summary })
}

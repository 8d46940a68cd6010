//! Microscopic runs: gradient flow of a small model with eigenbasis
//! tracking, mode-ODE residuals and (optionally) shell ledgers.
//!
//! Every `stride` steps the run analyses a three-point stencil
//! `(k−1, k, k+1)`: `Ṁ` by central difference, snapshots at all three points
//! aligned to the centre's basis, Kato coupling at the centre.

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::data::make_samples;
use crate::error::{Error, Result};
use crate::modes::{amplitudes, coupling_matrix, ResidualAccumulator, ResidualReport, TrajectoryPoint};
use crate::netlab::{error_vector, gradient_flow_step_with, init_network, jacobian, loss, NetworkState, SampleSet};
use crate::operator::{align_snapshots_with, eigensystem, gram_operator, operator_derivative, GramOperator, SpectralSnapshot};
use crate::shells::{
    build_ledger, flux_asymmetry, global_flux_imbalance, renormalizability_ratios, shell_index, BalanceAccumulator,
    BalanceReport, ShellLedger,
};

/// Per-stencil diagnostics (one row of `series.csv`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StencilRow {
    pub step: usize,
    pub t: f64,
    pub loss: f64,
    pub lambda_max: f64,
    pub rank: usize,
    pub min_gap: f64,
    pub min_overlap: f64,
    pub usable: bool,
    pub masked_pairs: usize,
    pub coupling_power_rel: f64,
    pub internal_rel: f64,
    pub flux_asymmetry: f64,
    pub global_imbalance: f64,
    pub energy_sum_rel: f64,
    pub balance_rel: f64,
    pub crossing: bool,
}

#[derive(Debug, Clone)]
pub struct MicroRun {
    pub seed: u64,
    pub residual: Option<ResidualReport>,
    pub balance: Option<BalanceReport>,
    pub rows: Vec<StencilRow>,
    /// Loss after every step, index 0 = initial.
    pub losses: Vec<f64>,
    pub ledgers: Vec<ShellLedger>,
    pub lambda0: f64,
    pub usable_fraction: f64,
    /// Largest `L_{k+1} − L_k` over all steps.
    pub max_loss_increase: f64,
    pub renormalizability: Vec<(i64, Option<f64>)>,
}

struct PointData {
    gram: GramOperator,
    snap: SpectralSnapshot,
    error: crate::netlab::ErrorVector,
}

fn point(net: &NetworkState, samples: &SampleSet, t: f64, rank_tol: f64) -> Result<PointData> {
    let j = jacobian(net, samples)?;
    let gram = gram_operator(&j, &samples.weights, t)?;
    let snap = eigensystem(&gram, rank_tol)?;
    Ok(PointData { gram, snap, error: error_vector(net, samples, t)? })
}

/// Run gradient flow and analyse stencils; `audit` adds shell ledgers.
pub fn run_micro(cfg: &ExperimentConfig, seed: u64, audit: bool) -> Result<MicroRun> {
    let (samples, _) = make_samples(cfg, seed)?;
    let mut net = init_network(&cfg.model_spec(seed, cfg.feature_count))?;
    let dt = cfg.dt;
    let w = samples.weights.clone();

    let mut losses = Vec::with_capacity(cfg.steps + 1);
    losses.push(loss(&net, &samples)?);
    let mut prev: Option<NetworkState> = None;
    let mut residual = ResidualAccumulator::new(cfg.residual_floor);
    let mut balance = BalanceAccumulator::new();
    let mut rows = Vec::new();
    let mut ledgers = Vec::new();
    let mut lambda0 = cfg.shell_lambda0;

    for k in 0..cfg.steps {
        let (next, l) = gradient_flow_step_with(&net, &samples, dt, cfg.integrator)
            .map_err(|e| match e {
                Error::Divergence { reason, .. } => Error::Divergence { step: k + 1, reason },
                other => other,
            })?;
        losses.push(l);

        if k >= 1 && k % cfg.stride == 0 {
            let before = prev.as_ref().expect("previous state kept from step k−1");
            let t = k as f64 * dt;
            let pc = point(&net, &samples, t, cfg.rank_tol)?;
            let pb = point(before, &samples, t - dt, cfg.rank_tol)?;
            let pa = point(&next, &samples, t + dt, cfg.rank_tol)?;
            let mdot = operator_derivative(&pb.gram, &pa.gram, dt)?;

            let r = pc.snap.rank();
            let align = |p: &PointData| -> Option<SpectralSnapshot> {
                if p.snap.rank() != r {
                    return None;
                }
                align_snapshots_with(&pc.snap, &p.snap, cfg.overlap_floor).ok()
            };
            let sb = align(&pb);
            let sa = align(&pa);
            let min_overlap = [&sb, &sa]
                .iter()
                .map(|s| s.as_ref().and_then(|s| s.alignment.as_ref()).map_or(0.0, |a| a.min_overlap))
                .fold(f64::INFINITY, f64::min);
            let usable = sb.is_some() && sa.is_some();

            let gap_floor = cfg.gap_floor_rel * pc.snap.lambda_max;
            let omega = coupling_matrix(&pc.snap, &mdot, gap_floor)?;
            let gc = amplitudes(&pc.error, &pc.snap, &w)?;
            let energy_scale: f64 = pc.snap.eigenvalues.iter().zip(gc.amplitudes.iter()).map(|(l, g)| l * g * g).sum();
            let coupling_power_rel = crate::modes::coupling_power(&gc, &omega).abs() / energy_scale.max(f64::MIN_POSITIVE);

            let mut row = StencilRow {
                step: k,
                t,
                loss: losses[k],
                lambda_max: pc.snap.lambda_max,
                rank: r,
                min_gap: pc.snap.min_gap,
                min_overlap,
                usable,
                masked_pairs: omega.masked_pairs(),
                coupling_power_rel,
                internal_rel: 0.0,
                flux_asymmetry: 0.0,
                global_imbalance: 0.0,
                energy_sum_rel: 0.0,
                balance_rel: f64::NAN,
                crossing: false,
            };

            if let (Some(sb), Some(sa)) = (sb, sa) {
                let gb = amplitudes(&pb.error, &sb, &w)?;
                let ga = amplitudes(&pa.error, &sa, &w)?;
                let centre = TrajectoryPoint {
                    error: pc.error.clone(),
                    snapshot: pc.snap.clone(),
                    modes: gc.clone(),
                    coupling: Some(omega.clone()),
                    usable: true,
                };
                let tb = TrajectoryPoint { error: pb.error.clone(), snapshot: sb.clone(), modes: gb.clone(), coupling: None, usable: true };
                let ta = TrajectoryPoint { error: pa.error.clone(), snapshot: sa.clone(), modes: ga.clone(), coupling: None, usable: true };
                residual.add_stencil(&tb, &centre, &ta, dt);

                if audit {
                    let l0 = *lambda0.get_or_insert_with(|| default_lambda0(&pc.snap, cfg.shell_q));
                    let mut range = build_ledger(&gc, &pc.snap, None, l0, cfg.shell_q, None)?.partition;
                    for (g, s) in [(&gb, &sb), (&ga, &sa)] {
                        range = range.union(&build_ledger(g, s, None, l0, cfg.shell_q, None)?.partition);
                    }
                    let lb = build_ledger(&gb, &sb, None, l0, cfg.shell_q, Some(&range))?;
                    let la = build_ledger(&ga, &sa, None, l0, cfg.shell_q, Some(&range))?;
                    let lc = build_ledger(&gc, &pc.snap, Some(&omega), l0, cfg.shell_q, Some(&range))?;
                    row.internal_rel = lc.internal.max_relative();
                    row.flux_asymmetry = flux_asymmetry(&lc.flux);
                    row.global_imbalance = global_flux_imbalance(&lc.flux);
                    let half = gc.energy();
                    row.energy_sum_rel = if half > 0.0 { (lc.total_energy() - half).abs() / half } else { lc.total_energy() };
                    match balance.add_stencil(&lb, &lc, &la, dt) {
                        Some(res) => {
                            let worst = res.iter().map(|(_, r)| r.abs()).fold(0.0, f64::max);
                            let dmax = lc.max_dissipation();
                            row.balance_rel = if dmax > 0.0 { worst / dmax } else { worst };
                        }
                        None => row.crossing = true,
                    }
                    ledgers.push(lc);
                }
            } else {
                residual.exclude_step();
                if audit {
                    // A stencil with a basis discontinuity cannot be audited.
                    row.crossing = true;
                }
            }
            rows.push(row);
        }
        prev = Some(net);
        net = next;
    }

    let total = rows.len();
    let usable = rows.iter().filter(|r| r.usable).count();
    let max_loss_increase = losses.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max);
    let residual = residual.finish(dt).ok();
    let balance = if audit { balance.finish(dt).ok() } else { None };
    let renormalizability = if audit { renormalizability_ratios(&ledgers) } else { Vec::new() };
    Ok(MicroRun {
        seed,
        residual,
        balance,
        rows,
        losses,
        ledgers,
        lambda0: lambda0.unwrap_or(f64::NAN),
        usable_fraction: if total > 0 { usable as f64 / total as f64 } else { 0.0 },
        max_loss_increase,
        renormalizability,
    })
}

/// Median retained eigenvalue snapped down to the `q`-power grid.
pub fn default_lambda0(snap: &SpectralSnapshot, q: f64) -> f64 {
    let mut v: Vec<f64> = snap.eigenvalues.iter().copied().collect();
    if v.is_empty() {
        return 1.0;
    }
    v.sort_by(f64::total_cmp);
    let median = v[v.len() / 2];
    q.powi(shell_index(median, 1.0, q) as i32)
}

/// Loss at every step, for callers that only need the trajectory.
pub fn loss_trajectory(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<f64>> {
    let (samples, _) = make_samples(cfg, seed)?;
    let mut net = init_network(&cfg.model_spec(seed, cfg.feature_count))?;
    let mut out = vec![loss(&net, &samples)?];
    for _ in 0..cfg.steps {
        let (n, l) = gradient_flow_step_with(&net, &samples, cfg.dt, cfg.integrator)?;
        out.push(l);
        net = n;
    }
    Ok(out)
}

//! Density runs: GRSD fits, frontier and loss scaling, the transport-only
//! tail, and grid-refinement stability of the fitted cutoff constant.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::stats::{geomspace, ols};
use crate::transport::{
    adaptive_simpson, characteristic, fit_scaling_exponent, fit_tail_exponent, frontier_crossing, frontier_estimate,
    loss_from_density, DensityField, DensitySolver, DriftSpec, ExponentFit, LogGrid, MassLedger, Source, TailFit,
};

/// Qualitative drift class, decided by `b` alone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DriftRegime {
    /// `b < 1`: characteristics reach `λ = 0` in finite `τ`.
    Subcritical,
    /// `b = 1`: uniform exponential shrinkage, no resolution hierarchy.
    Critical,
    /// `b > 1`: power-law frontier `λ* ∝ τ^{−1/(b−1)}`.
    Supercritical,
    /// `v ≡ 0`.
    Lazy,
}

impl DriftRegime {
    pub fn of(drift: &DriftSpec) -> Self {
        if drift.is_off() {
            DriftRegime::Lazy
        } else if drift.b < 1.0 {
            DriftRegime::Subcritical
        } else if drift.b == 1.0 {
            DriftRegime::Critical
        } else {
            DriftRegime::Supercritical
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            DriftRegime::Subcritical => "subcritical",
            DriftRegime::Critical => "critical",
            DriftRegime::Supercritical => "supercritical",
            DriftRegime::Lazy => "lazy",
        }
    }
}

/// One recorded snapshot of the main run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdeSnapshot {
    pub tau: f64,
    pub time: f64,
    pub loss: f64,
    /// Template quadrature with this snapshot's fitted `(A, K)`.
    pub oracle_loss: Option<f64>,
    pub frontier: Option<f64>,
    pub a: Option<f64>,
    pub k: Option<f64>,
    pub goodness: Option<f64>,
    pub fit_window: Option<(f64, f64)>,
    /// Upper edge of the transported plateau (`b ≤ 1` runs).
    pub upper_edge: Option<f64>,
    pub ledger: MassLedger,
    pub mass: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TailRun {
    pub fit: TailFit,
    pub predicted: f64,
    pub tau: f64,
    /// Characteristic position at `tau` of the source centre.
    pub front: f64,
    pub ledger: MassLedger,
    pub mass: f64,
    /// `|M − (M₀ + injected − outflow)| / M`
    pub budget_error: f64,
    pub field: DensityField,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementCheck {
    pub cells_per_decade: (usize, usize),
    /// `(τ, K_coarse, K_fine)` for every snapshot where both fits exist.
    pub k: Vec<(f64, f64, f64)>,
    pub max_relative_change: f64,
}

#[derive(Debug, Clone)]
pub struct PdeRun {
    pub drift: DriftSpec,
    pub regime: DriftRegime,
    pub snapshots: Vec<PdeSnapshot>,
    pub fields: Vec<DensityField>,
    pub frontier_exponent: Option<ExponentFit>,
    pub frontier_predicted: Option<f64>,
    pub loss_exponent: Option<ExponentFit>,
    pub oracle_exponent: Option<ExponentFit>,
    /// The closed-form loss exponent `−(b−2)/(b−1)`, reported only.
    pub closed_form_loss_exponent: Option<f64>,
    /// `d ln(upper edge)/dτ` for `b ≤ 1`; `−1` expected at `b = 1`.
    pub edge_shift_rate: Option<f64>,
    pub max_budget_error: f64,
    pub courant: f64,
    pub dtau: f64,
    pub tail: Option<TailRun>,
    pub refinement: Option<RefinementCheck>,
}

fn budget_error(mass: f64, ledger: &MassLedger) -> f64 {
    let expected = ledger.expected();
    let scale = mass.abs().max(ledger.initial).max(ledger.injected).max(f64::MIN_POSITIVE);
    (mass - expected).abs() / scale
}

/// `∫ A λ^{−b} exp(−K λ^{b−1} τ) dλ` over `[lo, hi]`, integrated in `ln λ`.
pub fn template_loss(a: f64, k: f64, b: f64, tau: f64, lo: f64, hi: f64) -> f64 {
    let f = |u: f64| {
        let l = u.exp();
        a * l.powf(1.0 - b) * (-k * l.powf(b - 1.0) * tau).exp()
    };
    let (u0, u1) = (lo.ln(), hi.ln());
    let scale = f(u0).abs().max(f(u1).abs()).max(f(0.5 * (u0 + u1)).abs()) * (u1 - u0);
    adaptive_simpson(&f, u0, u1, 1e-12 * scale.max(f64::MIN_POSITIVE))
}

/// Initial condition of the scaling runs: the transport steady state `λ^{−b}`.
pub fn power_law_field(grid: Arc<LogGrid>, b: f64, tau: f64) -> Result<DensityField> {
    DensityField::from_fn(grid, tau, |l| l.powf(-b))
}

fn snapshot_taus(cfg: &ExperimentConfig) -> Vec<f64> {
    geomspace(cfg.tau_min, cfg.tau_max, cfg.snapshots)
}

struct Evolved {
    fields: Vec<DensityField>,
    ledgers: Vec<MassLedger>,
    courant: f64,
    dtau: f64,
}

fn evolve(cfg: &ExperimentConfig, drift: &DriftSpec, cells_per_decade: usize, taus: &[f64]) -> Result<Evolved> {
    let grid = Arc::new(LogGrid::per_decade(cfg.grid_lo, cfg.grid_hi, cells_per_decade)?);
    let b = drift.b;
    let dtau = if drift.is_off() {
        // Only the exact dissipation factor acts; any step is stable.
        taus.first().copied().unwrap_or(1.0)
    } else {
        DensitySolver::stable_dtau(&grid, b, cfg.cfl_safety)
    };
    let init = power_law_field(grid, b, 0.0)?;
    let mut solver = DensitySolver::new(init, *drift, dtau, cfg.dissipation)?;
    let mut fields = Vec::with_capacity(taus.len());
    let mut ledgers = Vec::with_capacity(taus.len());
    for &tau in taus {
        solver.advance_to(tau)?;
        fields.push(solver.field().clone());
        ledgers.push(solver.ledger());
    }
    Ok(Evolved { fields, ledgers, courant: solver.courant(), dtau })
}

/// Upper edge of the plateau `ε λ^b`: the drop crossing relative to the
/// plateau maximum.
fn upper_edge(field: &DensityField, b: f64, drop: f64) -> Option<f64> {
    let a = field
        .values
        .iter()
        .zip(&field.grid.centers)
        .map(|(e, l)| e * l.powf(b))
        .fold(0.0, f64::max);
    if !(a > 0.0) {
        return None;
    }
    frontier_crossing(field, b, a, drop).ok()
}

fn analyse_snapshot(cfg: &ExperimentConfig, drift: &DriftSpec, field: &DensityField, ledger: MassLedger) -> PdeSnapshot {
    let b = drift.b;
    let regime = DriftRegime::of(drift);
    let mut s = PdeSnapshot {
        tau: field.tau,
        time: field.time,
        loss: loss_from_density(field),
        oracle_loss: None,
        frontier: None,
        a: None,
        k: None,
        goodness: None,
        fit_window: None,
        upper_edge: None,
        ledger,
        mass: field.mass(),
    };
    match regime {
        DriftRegime::Supercritical => {
            if let Ok(est) = frontier_estimate(field, b, cfg.frontier_drop) {
                if !est.at_grid_top {
                    s.frontier = Some(est.lambda);
                }
                s.a = Some(est.fit.a);
                s.k = Some(est.fit.k);
                s.goodness = Some(est.fit.goodness);
                s.fit_window = Some(est.fit.window);
                s.oracle_loss = Some(template_loss(est.fit.a, est.fit.k, b, field.tau, cfg.grid_lo, cfg.grid_hi));
            }
        }
        DriftRegime::Critical | DriftRegime::Subcritical => s.upper_edge = upper_edge(field, b, cfg.frontier_drop),
        DriftRegime::Lazy => {}
    }
    s
}

fn exponent_of(series: &[(f64, f64)], window: (f64, f64)) -> Option<ExponentFit> {
    fit_scaling_exponent(series, window).ok()
}

/// Transport-only tail: constant-rate localized source, dissipation off.
pub fn run_tail(cfg: &ExperimentConfig, drift: &DriftSpec) -> Result<TailRun> {
    let grid = Arc::new(LogGrid::per_decade(cfg.grid_lo, cfg.tail_grid_hi, cfg.grid_cells_per_decade)?);
    let b = drift.b;
    let dtau = DensitySolver::stable_dtau(&grid, b, cfg.cfl_safety);
    let init = DensityField::new(grid.clone(), vec![0.0; grid.len()], 0.0)?;
    let source = Source { center: cfg.tail_source_center, log_width: cfg.tail_source_width, rate: 1.0 };
    let mut solver = DensitySolver::new(init, *drift, dtau, false)?.with_source(source)?;
    solver.advance_to(cfg.tail_tau)?;
    let field = solver.field().clone();
    let front = characteristic(cfg.tail_source_center, drift, cfg.tail_tau)
        .lambda()
        .ok_or_else(|| Error::InvalidArgument("tail source drained to the floor; the tail needs b > 1".into()))?;
    // Between the swept front and the source, three-fold margins on each side.
    let window = (3.0 * front, cfg.tail_source_center / 3.0);
    if !(window.0 < window.1) {
        return Err(Error::DegenerateWindow(format!("tail window [{}, {}] is empty", window.0, window.1)));
    }
    let fit = fit_tail_exponent(&field, window)?;
    let ledger = solver.ledger();
    let mass = field.mass();
    Ok(TailRun { fit, predicted: -b, tau: cfg.tail_tau, front, ledger, mass, budget_error: budget_error(mass, &ledger), field })
}

pub fn run_pde(cfg: &ExperimentConfig) -> Result<PdeRun> {
    let drift = cfg.drift()?;
    let regime = DriftRegime::of(&drift);
    let b = drift.b;
    let taus = snapshot_taus(cfg);
    let ev = evolve(cfg, &drift, cfg.grid_cells_per_decade, &taus)?;

    let snapshots: Vec<PdeSnapshot> =
        ev.fields.iter().zip(&ev.ledgers).map(|(f, l)| analyse_snapshot(cfg, &drift, f, *l)).collect();
    let max_budget_error = snapshots.iter().map(|s| budget_error(s.mass, &s.ledger)).fold(0.0, f64::max);
    let window = (cfg.tau_min, cfg.tau_max);

    let mut frontier_exponent = None;
    let mut oracle_exponent = None;
    let mut loss_exponent = None;
    let mut edge_shift_rate = None;
    let mut refinement = None;
    let mut tail = None;
    let mut fitted = drift;

    match regime {
        DriftRegime::Supercritical => {
            let fr: Vec<(f64, f64)> = snapshots.iter().filter_map(|s| s.frontier.map(|l| (s.tau, l))).collect();
            frontier_exponent = exponent_of(&fr, window);
            let oracle: Vec<(f64, f64)> =
                snapshots.iter().filter_map(|s| s.oracle_loss.map(|l| (s.tau, l))).collect();
            oracle_exponent = exponent_of(&oracle, window);
            if let Some(k) = snapshots.last().and_then(|s| s.k) {
                if k >= 0.0 {
                    fitted = drift.with_k(k);
                }
            }
            if cfg.refine_factor > 1 {
                let fine_cpd = cfg.grid_cells_per_decade * cfg.refine_factor;
                let fine = evolve(cfg, &drift, fine_cpd, &taus)?;
                let mut k = Vec::new();
                for (s, f) in snapshots.iter().zip(&fine.fields) {
                    if let (Some(kc), Ok(est)) = (s.k, frontier_estimate(f, b, cfg.frontier_drop)) {
                        k.push((s.tau, kc, est.fit.k));
                    }
                }
                let max_relative_change =
                    k.iter().map(|&(_, c, f)| ((f - c) / c).abs()).fold(0.0, f64::max);
                refinement = Some(RefinementCheck {
                    cells_per_decade: (cfg.grid_cells_per_decade, fine_cpd),
                    k,
                    max_relative_change,
                });
            }
            if cfg.experiment == super::config::ExperimentKind::PdeScaling {
                tail = Some(run_tail(cfg, &DriftSpec::new(b, drift.schedule)?)?);
            }
        }
        DriftRegime::Critical | DriftRegime::Subcritical => {
            // Edges within a decade of the absorbing floor are boundary-dominated.
            let pts: Vec<(f64, f64)> = snapshots
                .iter()
                .filter_map(|s| s.upper_edge.filter(|&e| e > 10.0 * cfg.grid_lo).map(|e| (s.tau, e.ln())))
                .collect();
            if pts.len() >= 2 {
                let (x, y): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
                edge_shift_rate = ols(&x, &y).ok().map(|f| f.slope);
            }
        }
        DriftRegime::Lazy => {}
    }
    // Only the supercritical loss has a power-law form to fit.
    if regime == DriftRegime::Supercritical {
        let losses: Vec<(f64, f64)> = snapshots.iter().map(|s| (s.tau, s.loss)).collect();
        loss_exponent = exponent_of(&losses, window);
    }

    Ok(PdeRun {
        drift: fitted,
        regime,
        frontier_predicted: (regime == DriftRegime::Supercritical).then(|| -1.0 / (b - 1.0)),
        closed_form_loss_exponent: (regime == DriftRegime::Supercritical).then(|| -(b - 2.0) / (b - 1.0)),
        snapshots,
        fields: ev.fields,
        frontier_exponent,
        loss_exponent,
        oracle_exponent,
        edge_shift_rate,
        max_budget_error,
        courant: ev.courant,
        dtau: ev.dtau,
        tail,
        refinement,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn template_loss_matches_closed_form_at_zero_tau() {
        // ∫ λ^{−3} dλ on [1, 2] = (1 − 1/4)/2
        let v = template_loss(1.0, 5.0, 3.0, 0.0, 1.0, 2.0);
        assert!((v - 0.375).abs() < 1e-12);
    }

    #[test]
    fn regime_classes() {
        assert_eq!(DriftRegime::of(&DriftSpec::constant(0.5, 1.0).unwrap()), DriftRegime::Subcritical);
        assert_eq!(DriftRegime::of(&DriftSpec::constant(1.0, 1.0).unwrap()), DriftRegime::Critical);
        assert_eq!(DriftRegime::of(&DriftSpec::constant(3.0, 1.0).unwrap()), DriftRegime::Supercritical);
        assert_eq!(DriftRegime::of(&DriftSpec::off()), DriftRegime::Lazy);
    }
}

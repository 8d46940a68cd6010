use serde::{Deserialize, Serialize};

use super::{DensityField, DriftSpec};
use crate::error::{Error, Result};
use crate::stats::{ols, LineFit};

/// Cells below this fraction of the field maximum count as empty.
pub const DENSITY_FLOOR_REL: f64 = 1e-14;
pub const MIN_FIT_POINTS: usize = 8;
/// Frontier-anchored GRSD window: `[λ*·10^lo, λ*·10^hi]` (decades).
pub const ANCHOR_DECADES: (f64, f64) = (-1.25, -0.5);

/// `A·λ^{−b}·exp(−K λ^{b−1} τ)`
pub fn grsd_template(lambda: f64, a: f64, drift: &DriftSpec, tau: f64) -> Result<f64> {
    let k = drift.k.ok_or(Error::MissingK)?;
    let b = drift.b;
    Ok(a * lambda.powf(-b) * (-k * lambda.powf(b - 1.0) * tau).exp())
}

/// RMS amplitude form `√(2ε)`.
pub fn grsd_amplitude(lambda: f64, a: f64, drift: &DriftSpec, tau: f64) -> Result<f64> {
    Ok((2.0 * grsd_template(lambda, a, drift, tau)?).sqrt())
}

fn floor_of(field: &DensityField) -> f64 {
    DENSITY_FLOOR_REL * field.values.iter().copied().fold(0.0, f64::max)
}

/// Index range `[first, last]` of cells above the density floor.
pub fn usable_range(field: &DensityField) -> Option<(usize, usize)> {
    let floor = floor_of(field);
    let first = field.values.iter().position(|&v| v > floor)?;
    let last = field.values.iter().rposition(|&v| v > floor)?;
    Some((first, last))
}

/// Central 60% (in `ln λ`) of the usable range, two cells trimmed at each end.
pub fn default_window(field: &DensityField) -> Result<(f64, f64)> {
    let (first, last) = usable_range(field).ok_or_else(|| Error::DegenerateWindow("field is empty".into()))?;
    if last < first + 4 {
        return Err(Error::InsufficientSupport { needed: MIN_FIT_POINTS, found: last + 1 - first });
    }
    let c = &field.grid.centers;
    let (a, b) = (c[first + 2].ln(), c[last - 2].ln());
    let span = b - a;
    Ok(((a + 0.2 * span).exp(), (a + 0.8 * span).exp()))
}

fn window_cells(field: &DensityField, window: (f64, f64)) -> Vec<usize> {
    let floor = floor_of(field);
    let (lo, hi) = window;
    // Small relative slack so windows computed from cell centres include them.
    let (lo, hi) = (lo * (1.0 - 1e-12), hi * (1.0 + 1e-12));
    (0..field.grid.len())
        .filter(|&i| {
            let l = field.grid.centers[i];
            l >= lo && l <= hi && field.values[i] > floor
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailFit {
    pub slope: f64,
    pub stderr: f64,
    pub window: (f64, f64),
    pub points: usize,
}

/// Least-squares slope of `ln ε` against `ln λ` over `window`.
pub fn fit_tail_exponent(field: &DensityField, window: (f64, f64)) -> Result<TailFit> {
    let cells = window_cells(field, window);
    if cells.len() < MIN_FIT_POINTS {
        return Err(Error::InsufficientSupport { needed: MIN_FIT_POINTS, found: cells.len() });
    }
    let x: Vec<f64> = cells.iter().map(|&i| field.grid.centers[i].ln()).collect();
    let y: Vec<f64> = cells.iter().map(|&i| field.values[i].ln()).collect();
    let f = ols(&x, &y)?;
    Ok(TailFit { slope: f.slope, stderr: f.slope_stderr, window, points: cells.len() })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrsdFit {
    pub a: f64,
    pub k: f64,
    /// R² of the transformed-coordinate regression.
    pub goodness: f64,
    pub window: (f64, f64),
    pub points: usize,
}

/// Regress `ln ε + b ln λ` on `λ^{b−1} τ`: intercept `ln A`, slope `−K`.
/// `window = None` uses [`default_window`].
pub fn fit_grsd(field: &DensityField, b: f64, window: Option<(f64, f64)>) -> Result<GrsdFit> {
    let window = match window {
        Some(w) => w,
        None => default_window(field)?,
    };
    let cells = window_cells(field, window);
    if cells.len() < 3 {
        return Err(Error::DegenerateWindow(format!("{} usable cells in window", cells.len())));
    }
    let x: Vec<f64> = cells.iter().map(|&i| field.grid.centers[i].powf(b - 1.0) * field.tau).collect();
    let y: Vec<f64> = cells
        .iter()
        .map(|&i| field.values[i].ln() + b * field.grid.centers[i].ln())
        .collect();
    let LineFit { intercept, slope, r2, .. } = ols(&x, &y)?;
    Ok(GrsdFit { a: intercept.exp(), k: -slope, goodness: r2, window, points: cells.len() })
}

/// Largest `λ` where `ε/(A λ^{−b}) ≥ drop`, interpolated between cell
/// centres linearly in `(ln λ, ln(−ln ratio))` — exact for the template.
pub fn frontier_crossing(field: &DensityField, b: f64, a: f64, drop: f64) -> Result<f64> {
    let c = &field.grid.centers;
    let ratio: Vec<f64> = (0..c.len()).map(|i| field.values[i] * c[i].powf(b) / a).collect();
    let i = ratio.iter().rposition(|&r| r >= drop).ok_or(Error::NoCrossing)?;
    if i + 1 == c.len() {
        return Ok(c[i]);
    }
    let (r0, r1) = (ratio[i], ratio[i + 1]);
    let (x0, x1) = (c[i].ln(), c[i + 1].ln());
    let s = if r0 < 1.0 && r1 > 0.0 {
        let f = |r: f64| (-r.ln()).ln();
        (f(drop) - f(r0)) / (f(r1) - f(r0))
    } else if r1 > 0.0 {
        (drop.ln() - r0.ln()) / (r1.ln() - r0.ln())
    } else {
        0.0
    };
    Ok((x0 + s.clamp(0.0, 1.0) * (x1 - x0)).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrontierEstimate {
    pub lambda: f64,
    /// GRSD fit on the frontier-anchored window that produced `A`.
    pub fit: GrsdFit,
    pub at_grid_top: bool,
}

/// Frontier with `A` from a below-frontier GRSD fit. Starting from the
/// default window, the fit window is re-anchored on the current estimate
/// (`ANCHOR_DECADES` below `λ*`) until `λ*` settles.
pub fn frontier_estimate(field: &DensityField, b: f64, drop: f64) -> Result<FrontierEstimate> {
    if !(drop > 0.0 && drop < 1.0) {
        return Err(Error::InvalidArgument(format!("drop must lie in (0,1), got {drop}")));
    }
    let top = *field.grid.centers.last().unwrap();
    let mut fit = fit_grsd(field, b, None)?;
    let mut lambda = frontier_crossing(field, b, fit.a, drop)?;
    for _ in 0..6 {
        let window = (lambda * 10f64.powf(ANCHOR_DECADES.0), lambda * 10f64.powf(ANCHOR_DECADES.1));
        let refit = match fit_grsd(field, b, Some(window)) {
            Ok(f) if f.points >= MIN_FIT_POINTS => f,
            _ => break,
        };
        let next = frontier_crossing(field, b, refit.a, drop)?;
        fit = refit;
        let settled = (next / lambda - 1.0).abs() < 1e-12;
        lambda = next;
        if settled {
            break;
        }
    }
    Ok(FrontierEstimate { lambda, fit, at_grid_top: lambda >= top })
}

/// `λ*` only; see [`frontier_estimate`].
pub fn frontier(field: &DensityField, b: f64, drop: f64) -> Result<f64> {
    Ok(frontier_estimate(field, b, drop)?.lambda)
}

/// `Σ ε_i Δλ_i`
pub fn loss_from_density(field: &DensityField) -> f64 {
    field.mass()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExponentFit {
    pub exponent: f64,
    pub stderr: f64,
    pub window: (f64, f64),
    pub goodness: f64,
    pub points: usize,
}

/// Log-log slope of `value` against `tau` for points with `tau ∈ window`.
pub fn fit_scaling_exponent(series: &[(f64, f64)], window: (f64, f64)) -> Result<ExponentFit> {
    let pts: Vec<(f64, f64)> = series.iter().copied().filter(|&(t, _)| t >= window.0 && t <= window.1).collect();
    if pts.len() < MIN_FIT_POINTS {
        return Err(Error::InsufficientSupport { needed: MIN_FIT_POINTS, found: pts.len() });
    }
    if let Some(&(t, v)) = pts.iter().find(|&&(t, v)| !(v > 0.0) || !(t > 0.0)) {
        return Err(Error::NonPositiveValue { at: t, value: v });
    }
    let x: Vec<f64> = pts.iter().map(|p| p.0.ln()).collect();
    let y: Vec<f64> = pts.iter().map(|p| p.1.ln()).collect();
    let f = ols(&x, &y)?;
    Ok(ExponentFit { exponent: f.slope, stderr: f.slope_stderr, window, goodness: f.r2, points: pts.len() })
}

/// Per-snapshot row of a scaling run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub tau: f64,
    pub loss: f64,
    pub frontier: f64,
    pub a: f64,
    pub k: f64,
    pub goodness: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub series: Vec<ScalingPoint>,
    pub frontier_exponent: Option<ExponentFit>,
    pub loss_exponent: Option<ExponentFit>,
}

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{physical_time, DriftSpec};
use crate::error::{Error, Result};

/// Log-uniform finite-volume grid on `[lo, hi]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogGrid {
    pub edges: Vec<f64>,
    /// Geometric cell centres `√(λ_i λ_{i+1})`.
    pub centers: Vec<f64>,
    pub widths: Vec<f64>,
    /// Constant `ln(λ_{i+1}/λ_i)`.
    pub log_step: f64,
}

impl LogGrid {
    pub fn new(lo: f64, hi: f64, cells: usize) -> Result<Self> {
        if !(lo > 0.0) || !(hi > lo) || !hi.is_finite() {
            return Err(Error::InvalidArgument(format!("grid needs 0 < lo < hi, got [{lo}, {hi}]")));
        }
        if cells < 2 {
            return Err(Error::InvalidArgument("grid needs at least 2 cells".into()));
        }
        let (a, b) = (lo.ln(), hi.ln());
        let h = (b - a) / cells as f64;
        let mut edges: Vec<f64> = (0..=cells).map(|i| (a + h * i as f64).exp()).collect();
        edges[0] = lo;
        edges[cells] = hi;
        let centers = edges.windows(2).map(|w| (w[0] * w[1]).sqrt()).collect();
        let widths = edges.windows(2).map(|w| w[1] - w[0]).collect();
        Ok(LogGrid { edges, centers, widths, log_step: h })
    }

    /// `round(decades · cells_per_decade)` cells.
    pub fn per_decade(lo: f64, hi: f64, cells_per_decade: usize) -> Result<Self> {
        if !(lo > 0.0) || !(hi > lo) {
            return Err(Error::InvalidArgument(format!("grid needs 0 < lo < hi, got [{lo}, {hi}]")));
        }
        let cells = ((hi / lo).log10() * cells_per_decade as f64).round() as usize;
        LogGrid::new(lo, hi, cells)
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn lo(&self) -> f64 {
        self.edges[0]
    }

    pub fn hi(&self) -> f64 {
        *self.edges.last().unwrap()
    }

    /// Cell containing `lambda` (left-closed), if inside the grid.
    pub fn locate(&self, lambda: f64) -> Option<usize> {
        if !(lambda >= self.lo() && lambda < self.hi()) {
            return None;
        }
        let mut i = (((lambda / self.lo()).ln() / self.log_step).floor() as usize).min(self.len() - 1);
        while i > 0 && lambda < self.edges[i] {
            i -= 1;
        }
        while i + 1 < self.len() && lambda >= self.edges[i + 1] {
            i += 1;
        }
        Some(i)
    }
}

/// Energy density per cell at effective time `tau` (physical time `time`).
#[derive(Debug, Clone, PartialEq)]
pub struct DensityField {
    pub grid: Arc<LogGrid>,
    pub values: Vec<f64>,
    pub tau: f64,
    pub time: f64,
}

impl DensityField {
    pub fn new(grid: Arc<LogGrid>, values: Vec<f64>, tau: f64) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::DimensionMismatch { what: "density values", expected: grid.len(), found: values.len() });
        }
        if let Some((i, &v)) = values.iter().enumerate().find(|(_, v)| !(**v >= 0.0) || !v.is_finite()) {
            return Err(Error::NegativeDensity { cell: i, value: v });
        }
        Ok(DensityField { grid, values, tau, time: 0.0 })
    }

    /// Sample `f` at the cell centres.
    pub fn from_fn(grid: Arc<LogGrid>, tau: f64, f: impl Fn(f64) -> f64) -> Result<Self> {
        let values = grid.centers.iter().map(|&l| f(l)).collect();
        DensityField::new(grid, values, tau)
    }

    /// `Σ ε_i Δλ_i`
    pub fn mass(&self) -> f64 {
        self.values.iter().zip(&self.grid.widths).map(|(e, w)| e * w).sum()
    }

    /// Mass-weighted mean of `ln λ` (pulse centre), `None` if empty.
    pub fn log_centroid(&self) -> Option<f64> {
        let mut m = 0.0;
        let mut s = 0.0;
        for i in 0..self.grid.len() {
            let w = self.values[i] * self.grid.widths[i];
            m += w;
            s += w * self.grid.centers[i].ln();
        }
        (m > 0.0).then(|| s / m)
    }
}

/// Localized constant-rate injection, Gaussian in `ln λ`, normalized so the
/// total injected mass per unit `τ` equals `rate`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Source {
    pub center: f64,
    pub log_width: f64,
    pub rate: f64,
}

impl Source {
    fn density_rates(&self, grid: &LogGrid) -> Result<Vec<f64>> {
        if !(self.center > 0.0) || !(self.log_width > 0.0) || !(self.rate >= 0.0) {
            return Err(Error::InvalidArgument("source needs positive centre/width and nonnegative rate".into()));
        }
        let lc = self.center.ln();
        let shape: Vec<f64> = grid
            .centers
            .iter()
            .map(|l| (-0.5 * ((l.ln() - lc) / self.log_width).powi(2)).exp())
            .collect();
        let mass: f64 = shape.iter().zip(&grid.widths).map(|(s, w)| s * w).sum();
        if !(mass > 0.0) {
            return Err(Error::InvalidArgument("source does not overlap the grid".into()));
        }
        Ok(shape.iter().map(|s| self.rate * s / mass).collect())
    }
}

/// Mass bookkeeping of a PDE run; all quantities cumulative.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MassLedger {
    pub initial: f64,
    /// Through the absorbing boundary at `λ_min`.
    pub outflow: f64,
    /// Through `λ_max`; zero by construction, logged for completeness.
    pub inflow: f64,
    pub injected: f64,
    pub dissipated: f64,
}

impl MassLedger {
    /// Mass the field should hold if the scheme is conservative.
    pub fn expected(&self) -> f64 {
        self.initial + self.inflow + self.injected - self.outflow - self.dissipated
    }
}

/// First-order upwind transport in `τ` with exact integrating factor for the
/// dissipation `−2λε`. For a frozen drift the step is physical time.
#[derive(Debug, Clone)]
pub struct DensitySolver {
    field: DensityField,
    drift: DriftSpec,
    dtau: f64,
    dissipation: bool,
    /// `|v|/c = λ^b` at each edge.
    edge_speed: Vec<f64>,
    source: Option<Vec<f64>>,
    ledger: MassLedger,
    steps: usize,
    courant: f64,
}

impl DensitySolver {
    pub fn new(init: DensityField, drift: DriftSpec, dtau: f64, dissipation: bool) -> Result<Self> {
        drift.validate()?;
        if !(dtau > 0.0) || !dtau.is_finite() {
            return Err(Error::InvalidArgument(format!("dtau must be positive, got {dtau}")));
        }
        let grid = init.grid.clone();
        let edge_speed: Vec<f64> = if drift.is_off() {
            vec![0.0; grid.edges.len()]
        } else {
            grid.edges.iter().map(|l| l.powf(drift.b)).collect()
        };
        // Each cell loses mass through its lower edge only.
        let courant = (0..grid.len()).map(|i| edge_speed[i] * dtau / grid.widths[i]).fold(0.0, f64::max);
        if courant > 1.0 {
            return Err(Error::Cfl { courant });
        }
        let mut field = init;
        if !drift.is_off() {
            field.time = physical_time(&drift, field.tau).unwrap_or(0.0);
        }
        let ledger = MassLedger { initial: field.mass(), ..Default::default() };
        Ok(DensitySolver { field, drift, dtau, dissipation, edge_speed, source: None, ledger, steps: 0, courant })
    }

    /// Largest stable `dtau` for this grid and drift, scaled by `safety`.
    pub fn stable_dtau(grid: &LogGrid, b: f64, safety: f64) -> f64 {
        let worst = (0..grid.len()).map(|i| grid.edges[i].powf(b) / grid.widths[i]).fold(0.0, f64::max);
        safety / worst
    }

    pub fn with_source(mut self, source: Source) -> Result<Self> {
        self.source = Some(source.density_rates(&self.field.grid)?);
        Ok(self)
    }

    pub fn field(&self) -> &DensityField {
        &self.field
    }

    pub fn ledger(&self) -> MassLedger {
        self.ledger
    }

    pub fn courant(&self) -> f64 {
        self.courant
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn step(&mut self) -> Result<()> {
        let h = self.dtau;
        self.step_by(h)
    }

    /// Advance by `h ≤ dtau` (shorter final steps land exactly on targets).
    pub fn step_by(&mut self, h: f64) -> Result<()> {
        if !(h > 0.0) || h > self.dtau * (1.0 + 1e-12) {
            return Err(Error::InvalidArgument(format!("step {h} outside (0, dtau]")));
        }
        let grid = self.field.grid.clone();
        let n = grid.len();
        let eps = &mut self.field.values;

        let dt_phys = if self.drift.is_off() {
            h
        } else {
            let t0 = self.field.time;
            let t1 = physical_time(&self.drift, self.field.tau + h).unwrap();
            t1 - t0
        };

        if !self.drift.is_off() {
            // Downward flux magnitude through lower edge of each cell.
            let out: Vec<f64> = (0..n).map(|i| self.edge_speed[i] * eps[i]).collect();
            self.ledger.outflow += h * out[0];
            for i in 0..n {
                let gain = if i + 1 < n { out[i + 1] } else { 0.0 };
                // Written as a sum of nonnegative terms (Courant ≤ 1) so
                // roundoff cannot produce negative densities.
                eps[i] = eps[i] * (1.0 - h * self.edge_speed[i] / grid.widths[i]) + h / grid.widths[i] * gain;
            }
        }
        if let Some(src) = &self.source {
            for i in 0..n {
                eps[i] += h * src[i];
                self.ledger.injected += h * src[i] * grid.widths[i];
            }
        }
        if self.dissipation {
            let mut lost = 0.0;
            for i in 0..n {
                let before = eps[i];
                eps[i] *= (-2.0 * grid.centers[i] * dt_phys).exp();
                lost += (before - eps[i]) * grid.widths[i];
            }
            self.ledger.dissipated += lost;
        }
        for (i, &v) in eps.iter().enumerate() {
            if v < 0.0 || !v.is_finite() {
                return Err(Error::NegativeDensity { cell: i, value: v });
            }
        }
        if self.drift.is_off() {
            self.field.time += h;
        } else {
            self.field.tau += h;
            self.field.time += dt_phys;
        }
        self.steps += 1;
        Ok(())
    }

    /// Current clock: `τ` for an active drift, `t` for a frozen one.
    pub fn clock(&self) -> f64 {
        if self.drift.is_off() {
            self.field.time
        } else {
            self.field.tau
        }
    }

    /// Step until the clock reaches `target`, shortening the last step.
    pub fn advance_to(&mut self, target: f64) -> Result<()> {
        while self.clock() < target {
            let remaining = target - self.clock();
            if remaining <= 1e-12 * target.abs().max(1.0) {
                break;
            }
            self.step_by(remaining.min(self.dtau))?;
        }
        if self.drift.is_off() {
            self.field.time = target.max(self.field.time);
        } else {
            self.field.tau = target.max(self.field.tau);
        }
        Ok(())
    }
}

/// Run `steps` steps, recording the field every `record_every` steps (and
/// always after the last one).
pub fn evolve_density(
    init: DensityField,
    drift: &DriftSpec,
    dtau: f64,
    steps: usize,
    dissipation: bool,
    record_every: usize,
) -> Result<Vec<DensityField>> {
    let mut solver = DensitySolver::new(init, *drift, dtau, dissipation)?;
    let every = record_every.max(1);
    let mut out = Vec::new();
    for k in 1..=steps {
        solver.step()?;
        if k % every == 0 || k == steps {
            out.push(solver.field().clone());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_is_log_uniform() {
        let g = LogGrid::per_decade(1e-4, 10.0, 64).unwrap();
        assert_eq!(g.len(), 320);
        for w in g.edges.windows(3) {
            let r1 = w[1] / w[0];
            let r2 = w[2] / w[1];
            assert!((r1 - r2).abs() < 1e-12 * r1);
        }
        assert_eq!(g.locate(1e-4), Some(0));
        assert_eq!(g.locate(10.0), None);
        assert_eq!(g.locate(g.edges[17]), Some(17));
    }

    #[test]
    fn unit_density_on_unit_interval() {
        let g = Arc::new(LogGrid::new(0.5, 1.5, 40).unwrap());
        let f = DensityField::from_fn(g, 0.0, |_| 1.0).unwrap();
        assert!((f.mass() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn frozen_drift_decays_exactly() {
        let g = Arc::new(LogGrid::per_decade(1e-2, 10.0, 16).unwrap());
        let init = DensityField::from_fn(g.clone(), 0.0, |l| l.powi(-2)).unwrap();
        let out = evolve_density(init.clone(), &DriftSpec::off(), 0.01, 50, true, 50).unwrap();
        let last = out.last().unwrap();
        for i in 0..g.len() {
            let mut e = init.values[i];
            for _ in 0..50 {
                e *= (-2.0 * g.centers[i] * 0.01).exp();
            }
            assert_eq!(last.values[i], e);
        }
    }

    #[test]
    fn cfl_is_enforced() {
        let g = Arc::new(LogGrid::per_decade(1e-2, 10.0, 16).unwrap());
        let init = DensityField::from_fn(g.clone(), 0.0, |_| 1.0).unwrap();
        let d = DriftSpec::constant(2.0, 1.0).unwrap();
        let ok = DensitySolver::stable_dtau(&g, 2.0, 0.9);
        assert!(DensitySolver::new(init.clone(), d, ok, false).is_ok());
        assert!(matches!(DensitySolver::new(init, d, 2.0 * ok, false), Err(Error::Cfl { .. })));
    }

    #[test]
    fn negative_initial_density_rejected() {
        let g = Arc::new(LogGrid::new(1.0, 2.0, 4).unwrap());
        assert!(DensityField::new(g, vec![1.0, -1.0, 0.0, 0.0], 0.0).is_err());
    }
}

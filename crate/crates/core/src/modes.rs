//! Mode amplitudes, Kato coupling and the exact coupled mode ODE
//!
//! `∂_t g_u = −λ_u g_u − Σ_{v≠u} g_v Ω_{v→u}`,
//! `Ω_{v→u} = ⟨φ_u, Ṁ φ_v⟩ / (λ_v − λ_u)`,
//!
//! plus a residual check of recorded trajectories against it.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netlab::ErrorVector;
use crate::operator::{OperatorDerivative, SpectralSnapshot};

pub const DEFAULT_RESIDUAL_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct ModeState {
    pub timestamp: f64,
    pub amplitudes: DVector<f64>,
}

impl ModeState {
    /// `½ Σ g_u²`
    pub fn energy(&self) -> f64 {
        0.5 * self.amplitudes.norm_squared()
    }
}

/// `entries[(u, v)] = Ω_{v→u}`; masked (near-degenerate) pairs hold zero.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingMatrix {
    pub entries: DMatrix<f64>,
    mask: Vec<bool>,
}

impl CouplingMatrix {
    pub fn zeros(r: usize) -> Self {
        CouplingMatrix { entries: DMatrix::zeros(r, r), mask: vec![false; r * r] }
    }

    /// Build from raw entries and a row-major mask; masked entries are zeroed.
    pub fn from_parts(mut entries: DMatrix<f64>, mask: Vec<bool>) -> Result<Self> {
        let r = entries.nrows();
        if entries.ncols() != r || mask.len() != r * r {
            return Err(Error::DimensionMismatch { what: "coupling matrix", expected: r * r, found: mask.len() });
        }
        for u in 0..r {
            entries[(u, u)] = 0.0;
            for v in 0..r {
                if mask[u * r + v] {
                    entries[(u, v)] = 0.0;
                }
            }
        }
        Ok(CouplingMatrix { entries, mask })
    }

    pub fn rank(&self) -> usize {
        self.entries.nrows()
    }

    /// `Ω_{v→u}`
    pub fn omega(&self, v: usize, u: usize) -> f64 {
        self.entries[(u, v)]
    }

    pub fn is_masked(&self, u: usize, v: usize) -> bool {
        self.mask[u * self.rank() + v]
    }

    pub fn masked_pairs(&self) -> usize {
        let r = self.rank();
        (0..r).flat_map(|u| (u + 1..r).map(move |v| (u, v))).filter(|&(u, v)| self.is_masked(u, v)).count()
    }

    /// Modes touching at least one masked pair.
    pub fn masked_modes(&self) -> Vec<bool> {
        let r = self.rank();
        (0..r).map(|u| (0..r).any(|v| self.is_masked(u, v))).collect()
    }
}

/// `g_u = ⟨e, φ_u⟩_w = ψ_uᵀ D^{1/2} e`
pub fn amplitudes(e: &ErrorVector, snap: &SpectralSnapshot, weights: &DVector<f64>) -> Result<ModeState> {
    let n = snap.dim();
    if e.values.len() != n {
        return Err(Error::DimensionMismatch { what: "error vector", expected: n, found: e.values.len() });
    }
    if weights.len() != n {
        return Err(Error::DimensionMismatch { what: "weights", expected: n, found: weights.len() });
    }
    let scaled = DVector::from_fn(n, |i, _| weights[i].sqrt() * e.values[i]);
    Ok(ModeState { timestamp: e.timestamp, amplitudes: snap.eigenvectors.tr_mul(&scaled) })
}

/// Kato coupling with pairs closer than `gap_floor` masked.
///
/// The numerator is symmetrized once per pair, so `Ω_{v→u} = −Ω_{u→v}` holds
/// bit-for-bit on unmasked pairs.
pub fn coupling_matrix(snap: &SpectralSnapshot, mdot: &OperatorDerivative, gap_floor: f64) -> Result<CouplingMatrix> {
    let n = snap.dim();
    if mdot.matrix.nrows() != n || mdot.matrix.ncols() != n {
        return Err(Error::DimensionMismatch { what: "operator derivative", expected: n, found: mdot.matrix.nrows() });
    }
    let r = snap.rank();
    let psi = &snap.eigenvectors;
    let projected = psi.transpose() * &mdot.matrix * psi;
    let lam = &snap.eigenvalues;
    let mut entries = DMatrix::zeros(r, r);
    let mut mask = vec![false; r * r];
    for u in 0..r {
        for v in u + 1..r {
            let gap = lam[v] - lam[u];
            if gap.abs() < gap_floor {
                mask[u * r + v] = true;
                mask[v * r + u] = true;
                continue;
            }
            let p = 0.5 * (projected[(u, v)] + projected[(v, u)]);
            let w = p / gap;
            entries[(u, v)] = w;
            entries[(v, u)] = -w;
        }
    }
    Ok(CouplingMatrix { entries, mask })
}

/// `∂_t g_u = −λ_u g_u − Σ_v g_v Ω_{v→u}` over unmasked pairs.
pub fn mode_ode_rhs(g: &ModeState, snap: &SpectralSnapshot, omega: &CouplingMatrix) -> DVector<f64> {
    let coupling = &omega.entries * &g.amplitudes;
    DVector::from_fn(g.amplitudes.len(), |u, _| -snap.eigenvalues[u] * g.amplitudes[u] - coupling[u])
}

/// `Σ_u g_u Σ_v g_v Ω_{v→u}`: the coupling's net effect on total energy (zero).
pub fn coupling_power(g: &ModeState, omega: &CouplingMatrix) -> f64 {
    g.amplitudes.dot(&(&omega.entries * &g.amplitudes))
}

/// One recorded point of a trajectory, indexed consistently with its
/// neighbours. `coupling` is needed only at stencil centres.
#[derive(Debug, Clone)]
pub struct TrajectoryPoint {
    pub error: ErrorVector,
    pub snapshot: SpectralSnapshot,
    pub modes: ModeState,
    pub coupling: Option<CouplingMatrix>,
    pub usable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    /// RMS normalized residual per mode index.
    pub per_mode: Vec<f64>,
    pub max_relative: f64,
    pub rms_relative: f64,
    pub max_raw: f64,
    pub rms_raw: f64,
    pub evaluated_steps: usize,
    pub excluded_steps: usize,
    /// Mode evaluations skipped because the mode touches a masked pair.
    pub masked_evaluations: usize,
    pub dt: f64,
}

/// Streaming accumulator so residuals from separate stencils can be merged.
#[derive(Debug, Clone, Default)]
pub struct ResidualAccumulator {
    sum_sq: Vec<f64>,
    count: Vec<usize>,
    max_rel: f64,
    max_raw: f64,
    raw_sum_sq: f64,
    total: usize,
    evaluated: usize,
    excluded: usize,
    masked: usize,
    floor: f64,
}

impl ResidualAccumulator {
    pub fn new(floor: f64) -> Self {
        ResidualAccumulator { floor, ..Default::default() }
    }

    pub fn exclude_step(&mut self) {
        self.excluded += 1;
    }

    /// Score the centre of a three-point stencil spaced by `dt`.
    pub fn add_stencil(&mut self, before: &TrajectoryPoint, centre: &TrajectoryPoint, after: &TrajectoryPoint, dt: f64) {
        let omega = match (&centre.coupling, before.usable && centre.usable && after.usable) {
            (Some(o), true) => o,
            _ => {
                self.excluded += 1;
                return;
            }
        };
        let r = centre.modes.amplitudes.len();
        if before.modes.amplitudes.len() != r || after.modes.amplitudes.len() != r || omega.rank() != r {
            self.excluded += 1;
            return;
        }
        if self.sum_sq.len() < r {
            self.sum_sq.resize(r, 0.0);
            self.count.resize(r, 0);
        }
        let rhs = mode_ode_rhs(&centre.modes, &centre.snapshot, omega);
        let g = &centre.modes.amplitudes;
        let gnorm = g.norm();
        let masked = omega.masked_modes();
        for u in 0..r {
            if masked[u] {
                self.masked += 1;
                continue;
            }
            let dg = (after.modes.amplitudes[u] - before.modes.amplitudes[u]) / (2.0 * dt);
            let raw = (dg - rhs[u]).abs();
            let row = omega.entries.row(u).norm();
            let scale = (centre.snapshot.eigenvalues[u] * g[u]).abs() + gnorm * row + self.floor;
            let rel = raw / scale;
            self.sum_sq[u] += rel * rel;
            self.count[u] += 1;
            self.max_rel = self.max_rel.max(rel);
            self.max_raw = self.max_raw.max(raw);
            self.raw_sum_sq += raw * raw;
            self.total += 1;
        }
        self.evaluated += 1;
    }

    pub fn evaluated_steps(&self) -> usize {
        self.evaluated
    }

    pub fn finish(&self, dt: f64) -> Result<ResidualReport> {
        if self.evaluated == 0 {
            return Err(Error::TooFewSteps { needed: 3, found: 0 });
        }
        let per_mode: Vec<f64> = self
            .sum_sq
            .iter()
            .zip(&self.count)
            .map(|(s, &c)| if c > 0 { (s / c as f64).sqrt() } else { 0.0 })
            .collect();
        let total = self.total.max(1) as f64;
        Ok(ResidualReport {
            rms_relative: (self.sum_sq.iter().sum::<f64>() / total).sqrt(),
            rms_raw: (self.raw_sum_sq / total).sqrt(),
            per_mode,
            max_relative: self.max_rel,
            max_raw: self.max_raw,
            evaluated_steps: self.evaluated,
            excluded_steps: self.excluded,
            masked_evaluations: self.masked,
            dt,
        })
    }
}

/// Compare central-difference `dg/dt` with the ODE right-hand side at every
/// interior point of a trajectory sampled every `dt`.
pub fn ode_residual(trajectory: &[TrajectoryPoint], dt: f64) -> Result<ResidualReport> {
    ode_residual_with(trajectory, dt, DEFAULT_RESIDUAL_FLOOR)
}

pub fn ode_residual_with(trajectory: &[TrajectoryPoint], dt: f64, floor: f64) -> Result<ResidualReport> {
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
    }
    let usable = trajectory.iter().filter(|p| p.usable).count();
    if trajectory.len() < 3 || usable < 3 {
        return Err(Error::TooFewSteps { needed: 3, found: usable });
    }
    let mut acc = ResidualAccumulator::new(floor);
    for w in trajectory.windows(3) {
        acc.add_stencil(&w[0], &w[1], &w[2], dt);
    }
    acc.finish(dt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operator::{eigensystem, DerivativeMethod, GramOperator};

    fn diag_snapshot(values: &[f64]) -> SpectralSnapshot {
        let m = DMatrix::from_diagonal(&DVector::from_column_slice(values));
        eigensystem(&GramOperator { matrix: m, timestamp: 0.0 }, 0.0).unwrap()
    }

    fn mdot(m: DMatrix<f64>) -> OperatorDerivative {
        OperatorDerivative { matrix: m, timestamp: 0.0, method: DerivativeMethod::CentralDiff }
    }

    #[test]
    fn two_by_two_worked_case() {
        let snap = diag_snapshot(&[2.0, 1.0]);
        let om = coupling_matrix(&snap, &mdot(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0])), 1e-12).unwrap();
        assert_eq!(om.omega(1, 0), -1.0);
        assert_eq!(om.omega(0, 1), 1.0);
        let g = ModeState { timestamp: 0.0, amplitudes: DVector::from_vec(vec![1.0, 1.0]) };
        let rhs = mode_ode_rhs(&g, &snap, &om);
        assert_eq!(rhs.as_slice(), &[-1.0, -2.0]);
    }

    #[test]
    fn zero_derivative_gives_zero_coupling() {
        let snap = diag_snapshot(&[3.0, 2.0, 1.0]);
        let om = coupling_matrix(&snap, &mdot(DMatrix::zeros(3, 3)), 1e-12).unwrap();
        assert_eq!(om.entries.amax(), 0.0);
        let g = ModeState { timestamp: 0.0, amplitudes: DVector::from_vec(vec![1.0, -2.0, 0.5]) };
        let rhs = mode_ode_rhs(&g, &snap, &om);
        assert_eq!(rhs.as_slice(), &[-3.0, 4.0, -0.5]);
    }

    #[test]
    fn zero_amplitudes_give_zero_rhs() {
        let snap = diag_snapshot(&[3.0, 2.0]);
        let om = coupling_matrix(&snap, &mdot(DMatrix::from_element(2, 2, 0.7)), 1e-12).unwrap();
        let g = ModeState { timestamp: 0.0, amplitudes: DVector::zeros(2) };
        assert_eq!(mode_ode_rhs(&g, &snap, &om).amax(), 0.0);
    }

    #[test]
    fn degenerate_pairs_are_masked() {
        let snap = diag_snapshot(&[2.0, 2.0, 1.0]);
        let om = coupling_matrix(&snap, &mdot(DMatrix::from_element(3, 3, 1.0)), 1e-8).unwrap();
        assert_eq!(om.masked_pairs(), 1);
        assert!(om.is_masked(0, 1) && om.is_masked(1, 0));
        assert_eq!(om.masked_modes(), vec![true, true, false]);
        assert_eq!(om.omega(0, 1), 0.0);
    }

    #[test]
    fn amplitude_of_scaled_eigenvector() {
        let snap = diag_snapshot(&[3.0, 2.0, 1.0]);
        let w = DVector::from_element(3, 1.0 / 3.0);
        let phi = snap.weighted_eigenvector(1, &w);
        let e = ErrorVector { values: phi * 3.0, timestamp: 0.0 };
        let g = amplitudes(&e, &snap, &w).unwrap();
        assert!((g.amplitudes[0]).abs() < 1e-15);
        assert!((g.amplitudes[1] - 3.0).abs() < 1e-14);
        assert!((g.amplitudes[2]).abs() < 1e-15);
    }

    #[test]
    fn constant_error_with_zero_operator_has_zero_residual() {
        let snap = diag_snapshot(&[0.0, 0.0]);
        // rank-0 snapshot: no modes, nothing to score but every stencil counts
        let e = ErrorVector { values: DVector::from_vec(vec![1.0, 1.0]), timestamp: 0.0 };
        let point = TrajectoryPoint {
            modes: ModeState { timestamp: 0.0, amplitudes: DVector::zeros(snap.rank()) },
            coupling: Some(CouplingMatrix::zeros(snap.rank())),
            error: e,
            snapshot: snap,
            usable: true,
        };
        let rep = ode_residual(&[point.clone(), point.clone(), point], 0.1).unwrap();
        assert_eq!(rep.max_relative, 0.0);
        assert_eq!(rep.evaluated_steps, 1);
    }

    #[test]
    fn too_few_steps() {
        let snap = diag_snapshot(&[1.0]);
        let point = TrajectoryPoint {
            error: ErrorVector { values: DVector::zeros(1), timestamp: 0.0 },
            modes: ModeState { timestamp: 0.0, amplitudes: DVector::zeros(1) },
            coupling: None,
            snapshot: snap,
            usable: true,
        };
        assert!(matches!(ode_residual(&[point.clone(), point], 0.1), Err(Error::TooFewSteps { .. })));
    }
}

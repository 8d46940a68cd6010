//! Logarithmic spectral shells and exact quadratic-energy bookkeeping.
//!
//! Shell `α` holds the modes with `λ_u ∈ [λ_0 q^α, λ_0 q^{α+1})`. Per-shell
//! vectors are indexed by `α − alpha_min`; empty shells inside the range are
//! kept as zeros so cumulative boundary fluxes stay well defined.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modes::{CouplingMatrix, ModeState};
use crate::operator::SpectralSnapshot;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShellPartition {
    pub lambda0: f64,
    pub q: f64,
    pub alpha_min: i64,
    /// Inclusive; `alpha_max < alpha_min` means no occupied shell.
    pub alpha_max: i64,
}

impl ShellPartition {
    pub fn new(lambda0: f64, q: f64, alpha_min: i64, alpha_max: i64) -> Result<Self> {
        if !(lambda0 > 0.0) || !lambda0.is_finite() {
            return Err(Error::InvalidArgument(format!("lambda0 must be positive, got {lambda0}")));
        }
        if !(q > 1.0) || !q.is_finite() {
            return Err(Error::InvalidArgument(format!("q must exceed 1, got {q}")));
        }
        Ok(ShellPartition { lambda0, q, alpha_min, alpha_max })
    }

    pub fn len(&self) -> usize {
        (self.alpha_max - self.alpha_min + 1).max(0) as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn boundary(&self, alpha: i64) -> f64 {
        self.lambda0 * self.q.powi(alpha as i32)
    }

    pub fn index(&self, alpha: i64) -> Option<usize> {
        (alpha >= self.alpha_min && alpha <= self.alpha_max).then(|| (alpha - self.alpha_min) as usize)
    }

    pub fn alphas(&self) -> impl Iterator<Item = i64> {
        self.alpha_min..=self.alpha_max
    }

    /// Widen the range to cover `other` as well.
    pub fn union(&self, other: &ShellPartition) -> ShellPartition {
        if self.is_empty() {
            return *other;
        }
        if other.is_empty() {
            return *self;
        }
        ShellPartition {
            alpha_min: self.alpha_min.min(other.alpha_min),
            alpha_max: self.alpha_max.max(other.alpha_max),
            ..*self
        }
    }
}

/// `⌊log_q(λ/λ_0)⌋` with the left-closed convention enforced exactly.
pub fn shell_index(lambda: f64, lambda0: f64, q: f64) -> i64 {
    let mut a = ((lambda / lambda0).ln() / q.ln()).floor() as i64;
    while lambda0 * q.powi((a + 1) as i32) <= lambda {
        a += 1;
    }
    while lambda0 * q.powi(a as i32) > lambda {
        a -= 1;
    }
    a
}

/// Largest power of `q` not exceeding `lambda`.
pub fn snap_to_grid(lambda: f64, q: f64) -> f64 {
    q.powi(shell_index(lambda, 1.0, q) as i32)
}

/// Mode → shell map; `membership[u] = α`.
pub type Membership = Vec<i64>;

pub fn partition(snap: &SpectralSnapshot, lambda0: f64, q: f64) -> Result<(ShellPartition, Membership)> {
    ShellPartition::new(lambda0, q, 0, -1)?;
    let mut membership = Vec::with_capacity(snap.rank());
    for (u, &l) in snap.eigenvalues.iter().enumerate() {
        if !(l > 0.0) {
            return Err(Error::NonPositiveEigenvalue { index: u, value: l });
        }
        membership.push(shell_index(l, lambda0, q));
    }
    let (lo, hi) = match (membership.iter().min(), membership.iter().max()) {
        (Some(&lo), Some(&hi)) => (lo, hi),
        _ => (0, -1),
    };
    Ok((ShellPartition::new(lambda0, q, lo, hi)?, membership))
}

/// `E_α = ½ Σ_{u∈S_α} g_u²`
pub fn shell_energies(g: &ModeState, membership: &Membership, part: &ShellPartition) -> Vec<f64> {
    let mut e = vec![0.0; part.len()];
    for (u, &a) in membership.iter().enumerate() {
        if let Some(i) = part.index(a) {
            e[i] += 0.5 * g.amplitudes[u] * g.amplitudes[u];
        }
    }
    e
}

/// `D_α = Σ_{u∈S_α} λ_u g_u²`
pub fn dissipation(g: &ModeState, snap: &SpectralSnapshot, membership: &Membership, part: &ShellPartition) -> Vec<f64> {
    let mut d = vec![0.0; part.len()];
    for (u, &a) in membership.iter().enumerate() {
        if let Some(i) = part.index(a) {
            d[i] += snap.eigenvalues[u] * g.amplitudes[u] * g.amplitudes[u];
        }
    }
    d
}

/// Inter-shell fluxes; `values[(α, β)] = F_{β→α}` (indices offset by
/// `alpha_min`), diagonal unused.
#[derive(Debug, Clone, PartialEq)]
pub struct FluxMatrix {
    pub alpha_min: i64,
    pub values: DMatrix<f64>,
}

impl FluxMatrix {
    pub fn zeros(part: &ShellPartition) -> Self {
        FluxMatrix { alpha_min: part.alpha_min, values: DMatrix::zeros(part.len(), part.len()) }
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn idx(&self, alpha: i64) -> Option<usize> {
        let i = alpha - self.alpha_min;
        (i >= 0 && (i as usize) < self.len()).then_some(i as usize)
    }

    /// `F_{β→α}`; zero outside the range.
    pub fn get(&self, beta: i64, alpha: i64) -> f64 {
        match (self.idx(alpha), self.idx(beta)) {
            (Some(a), Some(b)) if a != b => self.values[(a, b)],
            _ => 0.0,
        }
    }

    /// `Σ_{β≠α} F_{β→α}`: net coupling inflow into shell `α`.
    pub fn net_inflow(&self, alpha: i64) -> f64 {
        match self.idx(alpha) {
            Some(a) => (0..self.len()).filter(|&b| b != a).map(|b| self.values[(a, b)]).sum(),
            None => 0.0,
        }
    }

    /// Nonzero off-diagonal entries as `(from β, to α, F_{β→α})`.
    pub fn triplets(&self) -> Vec<(i64, i64, f64)> {
        let mut out = Vec::new();
        for a in 0..self.len() {
            for b in 0..self.len() {
                if a != b && self.values[(a, b)] != 0.0 {
                    out.push((self.alpha_min + b as i64, self.alpha_min + a as i64, self.values[(a, b)]));
                }
            }
        }
        out
    }
}

/// `F_{β→α} = −Σ_{u∈S_α, v∈S_β} g_v g_u Ω_{v→u}`.
///
/// Each unordered mode pair is evaluated once and added with opposite signs
/// to the two directed entries, so action–reaction holds exactly.
pub fn intershell_flux(g: &ModeState, omega: &CouplingMatrix, membership: &Membership, part: &ShellPartition) -> FluxMatrix {
    let mut flux = FluxMatrix::zeros(part);
    let r = membership.len();
    for u in 0..r {
        let Some(a) = part.index(membership[u]) else { continue };
        for v in u + 1..r {
            let Some(b) = part.index(membership[v]) else { continue };
            if a == b {
                continue;
            }
            let t = -(g.amplitudes[u] * g.amplitudes[v]) * omega.omega(v, u);
            flux.values[(a, b)] += t;
            flux.values[(b, a)] -= t;
        }
    }
    flux
}

/// Per-shell internal coupling `Σ_{u,v∈S_α, v≠u} g_v g_u Ω_{v→u}` and the
/// matching gross sum `Σ |g_v g_u Ω_{v→u}|`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InternalSums {
    pub sums: Vec<f64>,
    pub gross: Vec<f64>,
}

impl InternalSums {
    /// Largest `|sum| / gross` over shells (0 for shells with no coupling).
    pub fn max_relative(&self) -> f64 {
        self.sums
            .iter()
            .zip(&self.gross)
            .map(|(s, g)| if *g > 0.0 { s.abs() / g } else { s.abs() })
            .fold(0.0, f64::max)
    }
}

/// Summed over every ordered pair directly, so the check exercises the stored
/// antisymmetry rather than assuming it.
pub fn internal_coupling_sum(g: &ModeState, omega: &CouplingMatrix, membership: &Membership, part: &ShellPartition) -> InternalSums {
    let mut sums = vec![0.0; part.len()];
    let mut gross = vec![0.0; part.len()];
    let r = membership.len();
    for u in 0..r {
        let Some(a) = part.index(membership[u]) else { continue };
        for v in 0..r {
            if v == u || membership[v] != membership[u] {
                continue;
            }
            let term = g.amplitudes[v] * g.amplitudes[u] * omega.omega(v, u);
            sums[a] += term;
            gross[a] += term.abs();
        }
    }
    InternalSums { sums, gross }
}

/// `J_{≤α} = Σ_{β>α} Σ_{γ≤α} F_{β→γ}`
pub fn cumulative_flux(flux: &FluxMatrix, alpha: i64) -> f64 {
    let n = flux.len() as i64;
    let mut total = 0.0;
    for b in 0..n {
        let beta = flux.alpha_min + b;
        if beta <= alpha {
            continue;
        }
        for c in 0..n {
            let gamma = flux.alpha_min + c;
            if gamma <= alpha {
                total += flux.get(beta, gamma);
            }
        }
    }
    total
}

/// Relative global conservation `|Σ_α Σ_{β≠α} F_{β→α}| / Σ |F|`.
pub fn global_flux_imbalance(flux: &FluxMatrix) -> f64 {
    let mut sum = 0.0;
    let mut gross = 0.0;
    for a in 0..flux.len() {
        for b in 0..flux.len() {
            if a != b {
                sum += flux.values[(a, b)];
                gross += flux.values[(a, b)].abs();
            }
        }
    }
    if gross > 0.0 {
        sum.abs() / gross
    } else {
        sum.abs()
    }
}

/// Largest `|F_{β→α} + F_{α→β}|` relative to the largest flux magnitude.
pub fn flux_asymmetry(flux: &FluxMatrix) -> f64 {
    let scale = flux.values.amax();
    let mut worst = 0.0f64;
    for a in 0..flux.len() {
        for b in a + 1..flux.len() {
            worst = worst.max((flux.values[(a, b)] + flux.values[(b, a)]).abs());
        }
    }
    if scale > 0.0 {
        worst / scale
    } else {
        worst
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShellLedger {
    pub timestamp: f64,
    pub partition: ShellPartition,
    pub energies: Vec<f64>,
    pub dissipations: Vec<f64>,
    pub flux: FluxMatrix,
    /// `J_{≤α}` for each `α` in the partition range.
    pub cumulative: Vec<f64>,
    pub membership: Membership,
    pub internal: InternalSums,
    /// Whether fluxes were evaluated (a coupling matrix was supplied).
    pub has_flux: bool,
}

impl ShellLedger {
    pub fn total_energy(&self) -> f64 {
        self.energies.iter().sum()
    }

    pub fn total_dissipation(&self) -> f64 {
        self.dissipations.iter().sum()
    }

    pub fn energy(&self, alpha: i64) -> f64 {
        self.partition.index(alpha).map_or(0.0, |i| self.energies[i])
    }

    pub fn dissipation(&self, alpha: i64) -> f64 {
        self.partition.index(alpha).map_or(0.0, |i| self.dissipations[i])
    }

    pub fn max_dissipation(&self) -> f64 {
        self.dissipations.iter().copied().fold(0.0, f64::max)
    }
}

/// Assemble the full ledger for one timestep; `range` optionally widens the
/// partition (e.g. to a trajectory-wide α range).
pub fn build_ledger(
    g: &ModeState,
    snap: &SpectralSnapshot,
    omega: Option<&CouplingMatrix>,
    lambda0: f64,
    q: f64,
    range: Option<&ShellPartition>,
) -> Result<ShellLedger> {
    let (mut part, membership) = partition(snap, lambda0, q)?;
    if let Some(r) = range {
        part = part.union(r);
    }
    let energies = shell_energies(g, &membership, &part);
    let dissipations = dissipation(g, snap, &membership, &part);
    let (flux, internal) = match omega {
        Some(o) => (
            intershell_flux(g, o, &membership, &part),
            internal_coupling_sum(g, o, &membership, &part),
        ),
        None => (
            FluxMatrix::zeros(&part),
            InternalSums { sums: vec![0.0; part.len()], gross: vec![0.0; part.len()] },
        ),
    };
    let cumulative = part.alphas().map(|a| cumulative_flux(&flux, a)).collect();
    Ok(ShellLedger {
        timestamp: g.timestamp,
        partition: part,
        energies,
        dissipations,
        flux,
        cumulative,
        membership,
        internal,
        has_flux: omega.is_some(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShellResidual {
    pub alpha: i64,
    pub max_abs: f64,
    pub rms: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub shells: Vec<ShellResidual>,
    pub max_abs: f64,
    /// `max_k max_α |residual| / max_α D_α` over evaluated stencils.
    pub max_relative_to_dissipation: f64,
    pub rms_relative_to_dissipation: f64,
    pub evaluated_steps: usize,
    pub flagged_steps: usize,
    /// Centre timestamps of stencils where some mode changed shell.
    pub crossing_times: Vec<f64>,
    pub dt: f64,
}

/// Streaming version of [`balance_audit`] for stencils that are not adjacent
/// in a single recorded sequence.
#[derive(Debug, Clone, Default)]
pub struct BalanceAccumulator {
    per_shell: std::collections::BTreeMap<i64, (f64, f64, usize)>,
    max_abs: f64,
    max_rel: f64,
    rel_sum_sq: f64,
    evaluated: usize,
    flagged: usize,
    crossings: Vec<f64>,
}

impl BalanceAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns per-shell residuals for this stencil, or `None` when flagged.
    pub fn add_stencil(
        &mut self,
        before: &ShellLedger,
        centre: &ShellLedger,
        after: &ShellLedger,
        dt: f64,
    ) -> Option<Vec<(i64, f64)>> {
        if before.membership != centre.membership || after.membership != centre.membership || !centre.has_flux {
            self.flagged += 1;
            self.crossings.push(centre.timestamp);
            return None;
        }
        let dmax = centre.max_dissipation();
        let mut out = Vec::with_capacity(centre.partition.len());
        let mut worst = 0.0f64;
        for alpha in centre.partition.alphas() {
            let de = (after.energy(alpha) - before.energy(alpha)) / (2.0 * dt);
            let res = de + centre.dissipation(alpha) - centre.flux.net_inflow(alpha);
            let entry = self.per_shell.entry(alpha).or_insert((0.0, 0.0, 0));
            entry.0 = entry.0.max(res.abs());
            entry.1 += res * res;
            entry.2 += 1;
            worst = worst.max(res.abs());
            out.push((alpha, res));
        }
        self.max_abs = self.max_abs.max(worst);
        let rel = if dmax > 0.0 { worst / dmax } else { worst };
        self.max_rel = self.max_rel.max(rel);
        self.rel_sum_sq += rel * rel;
        self.evaluated += 1;
        Some(out)
    }

    pub fn finish(&self, dt: f64) -> Result<BalanceReport> {
        if self.evaluated == 0 {
            return Err(Error::AllStepsFlagged);
        }
        Ok(BalanceReport {
            shells: self
                .per_shell
                .iter()
                .map(|(&alpha, &(m, s, c))| ShellResidual { alpha, max_abs: m, rms: (s / c as f64).sqrt(), samples: c })
                .collect(),
            max_abs: self.max_abs,
            max_relative_to_dissipation: self.max_rel,
            rms_relative_to_dissipation: (self.rel_sum_sq / self.evaluated as f64).sqrt(),
            evaluated_steps: self.evaluated,
            flagged_steps: self.flagged,
            crossing_times: self.crossings.clone(),
            dt,
        })
    }
}

/// `residual_α = dE_α/dt + D_α − Σ_{β≠α} F_{β→α}` at interior ledgers of a
/// sequence spaced by `dt`; stencils whose membership changes are flagged.
pub fn balance_audit(ledgers: &[ShellLedger], dt: f64) -> Result<BalanceReport> {
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
    }
    if ledgers.len() < 3 {
        return Err(Error::TooFewSteps { needed: 3, found: ledgers.len() });
    }
    let mut acc = BalanceAccumulator::new();
    for w in ledgers.windows(3) {
        acc.add_stencil(&w[0], &w[1], &w[2], dt);
    }
    acc.finish(dt)
}

/// `∫|J_{≤α}| dt / ∫ D_α dt` per shell (trapezoid rule over the ledger
/// timestamps); `None` where the shell never dissipates.
pub fn renormalizability_ratios(ledgers: &[ShellLedger]) -> Vec<(i64, Option<f64>)> {
    let mut range: Option<ShellPartition> = None;
    for l in ledgers {
        range = Some(match range {
            Some(r) => r.union(&l.partition),
            None => l.partition,
        });
    }
    let Some(range) = range else { return Vec::new() };
    range
        .alphas()
        .map(|alpha| {
            let mut num = 0.0;
            let mut den = 0.0;
            for w in ledgers.windows(2) {
                let h = w[1].timestamp - w[0].timestamp;
                let j = |l: &ShellLedger| l.partition.index(alpha).map_or(0.0, |i| l.cumulative[i].abs());
                num += 0.5 * h * (j(&w[0]) + j(&w[1]));
                den += 0.5 * h * (w[0].dissipation(alpha) + w[1].dissipation(alpha));
            }
            (alpha, (den > 0.0).then(|| num / den))
        })
        .collect()
}

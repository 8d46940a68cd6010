//! The empirical operator `M = J J*` in the weighted sample geometry, its
//! eigendecomposition, eigenbasis tracking and the central-difference `Ṁ`.
//!
//! Everything lives in the symmetrized basis `ẽ = D^{1/2} e`, where weighted
//! self-adjointness becomes plain symmetry: `S = D^{1/2} J Jᵀ D^{1/2}`.
//! Eigenvectors `ψ_u` of `S` map back to weighted-orthonormal functions
//! `φ_u = D^{-1/2} ψ_u`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_RANK_TOL: f64 = 1e-12;
pub const DEFAULT_OVERLAP_FLOOR: f64 = 0.5;
pub const DEFAULT_GAP_FLOOR_REL: f64 = 1e-8;
const PSD_TOL: f64 = 1e-10;
// Eigenvalues closer than this (relative to λ_max) are treated as one
// degenerate eigenspace during alignment.
const DEGENERATE_REL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct GramOperator {
    pub matrix: DMatrix<f64>,
    pub timestamp: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DerivativeMethod {
    CentralDiff,
    Directional,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OperatorDerivative {
    pub matrix: DMatrix<f64>,
    pub timestamp: f64,
    pub method: DerivativeMethod,
}

/// How the columns of a snapshot were reordered to follow its predecessor.
/// `permutation[new] = old` column index; `signs[new]` is the applied flip.
#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    pub permutation: Vec<usize>,
    pub signs: Vec<f64>,
    pub min_overlap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralSnapshot {
    pub timestamp: f64,
    /// Retained eigenvalues; descending unless an alignment reordered them.
    pub eigenvalues: DVector<f64>,
    /// `n × r` orthonormal columns `ψ_u` in the symmetrized basis.
    pub eigenvectors: DMatrix<f64>,
    pub lambda_max: f64,
    /// Smallest eigenvalue before truncation (PSD diagnostic).
    pub min_eigenvalue: f64,
    pub min_gap: f64,
    pub alignment: Option<Alignment>,
}

impl SpectralSnapshot {
    pub fn rank(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn dim(&self) -> usize {
        self.eigenvectors.nrows()
    }

    /// `φ_u = D^{-1/2} ψ_u`, orthonormal under `⟨·,·⟩_w`.
    pub fn weighted_eigenvector(&self, u: usize, weights: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.dim(), |i, _| self.eigenvectors[(i, u)] / weights[i].sqrt())
    }

    /// `Σ_u λ_u ψ_u ψ_uᵀ`
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let scaled = DMatrix::from_fn(self.dim(), self.rank(), |i, u| {
            self.eigenvectors[(i, u)] * self.eigenvalues[u]
        });
        scaled * self.eigenvectors.transpose()
    }
}

fn symmetric_from_lower(n: usize, f: impl Fn(usize, usize) -> f64) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = f(i, j);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

/// `S = D^{1/2} J Jᵀ D^{1/2}`, exactly symmetric.
pub fn gram_operator(j: &DMatrix<f64>, weights: &DVector<f64>, t: f64) -> Result<GramOperator> {
    let n = j.nrows();
    if weights.len() != n {
        return Err(Error::DimensionMismatch { what: "weights", expected: n, found: weights.len() });
    }
    let sw: Vec<f64> = weights.iter().map(|w| w.sqrt()).collect();
    let a = DMatrix::from_fn(n, j.ncols(), |i, k| sw[i] * j[(i, k)]);
    let matrix = symmetric_from_lower(n, |r, c| a.row(r).dot(&a.row(c)));
    Ok(GramOperator { matrix, timestamp: t })
}

fn relative_asymmetry(m: &DMatrix<f64>) -> f64 {
    let scale = m.amax();
    if scale == 0.0 {
        return 0.0;
    }
    (m - m.transpose()).amax() / scale
}

/// Flip each column so its largest-magnitude entry is positive (deterministic
/// representative of the sign-ambiguous eigenvector).
fn canonical_signs(v: &mut DMatrix<f64>) {
    for mut col in v.column_iter_mut() {
        let mut best = 0.0f64;
        let mut sign = 1.0;
        for &x in col.iter() {
            if x.abs() > best {
                best = x.abs();
                sign = x.signum();
            }
        }
        if sign < 0.0 {
            col.neg_mut();
        }
    }
}

fn min_gap(values: &DVector<f64>) -> f64 {
    let mut sorted: Vec<f64> = values.iter().copied().collect();
    sorted.sort_by(|a, b| b.total_cmp(a));
    sorted.windows(2).map(|w| w[0] - w[1]).fold(f64::INFINITY, f64::min)
}

/// Full symmetric eigendecomposition, descending, truncated below
/// `rank_tol · λ_max`.
pub fn eigensystem(m: &GramOperator, rank_tol: f64) -> Result<SpectralSnapshot> {
    let n = m.matrix.nrows();
    if m.matrix.ncols() != n {
        return Err(Error::DimensionMismatch { what: "operator columns", expected: n, found: m.matrix.ncols() });
    }
    if !(rank_tol >= 0.0) {
        return Err(Error::InvalidArgument(format!("rank-tol must be nonnegative, got {rank_tol}")));
    }
    if m.matrix.iter().any(|x| !x.is_finite()) {
        return Err(Error::EigenNonConvergence);
    }
    let asym = relative_asymmetry(&m.matrix);
    if asym > 1e-12 {
        return Err(Error::InvalidArgument(format!("operator asymmetric to {asym:.2e} relative")));
    }
    let sym = (&m.matrix + m.matrix.transpose()) * 0.5;
    let eig = SymmetricEigen::try_new(sym, f64::EPSILON, 1000 * n.max(1)).ok_or(Error::EigenNonConvergence)?;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let lambda_max = if n > 0 { eig.eigenvalues[order[0]] } else { 0.0 };
    let min_eigenvalue = if n > 0 { eig.eigenvalues[order[n - 1]] } else { 0.0 };
    let radius = lambda_max.abs().max(min_eigenvalue.abs());
    if min_eigenvalue < -PSD_TOL * radius {
        return Err(Error::NotPsd { min: min_eigenvalue, radius });
    }
    let cut = rank_tol * lambda_max;
    let kept: Vec<usize> = order
        .into_iter()
        .filter(|&k| eig.eigenvalues[k] > 0.0 && eig.eigenvalues[k] >= cut)
        .collect();
    let eigenvalues = DVector::from_iterator(kept.len(), kept.iter().map(|&k| eig.eigenvalues[k]));
    let mut eigenvectors = DMatrix::from_fn(n, kept.len(), |i, c| eig.eigenvectors[(i, kept[c])]);
    canonical_signs(&mut eigenvectors);
    Ok(SpectralSnapshot {
        timestamp: m.timestamp,
        min_gap: min_gap(&eigenvalues),
        eigenvalues,
        eigenvectors,
        lambda_max: lambda_max.max(0.0),
        min_eigenvalue,
        alignment: None,
    })
}

/// Within each (numerically) degenerate eigenspace of `cur`, rotate the basis
/// to best match `prev` (orthogonal Procrustes). Any orthonormal basis of an
/// exact eigenspace is valid, so this only removes the solver's arbitrariness.
fn rotate_degenerate_blocks(prev: &SpectralSnapshot, cur: &mut SpectralSnapshot) {
    let r = cur.rank();
    let tol = DEGENERATE_REL * cur.lambda_max;
    let mut start = 0;
    while start < r {
        let mut end = start + 1;
        while end < r && (cur.eigenvalues[end - 1] - cur.eigenvalues[end]).abs() <= tol {
            end += 1;
        }
        let size = end - start;
        if size > 1 && prev.rank() >= size {
            let block = cur.eigenvectors.columns(start, size).into_owned();
            // Pick the `size` prev columns best represented in this eigenspace.
            let proj = block.transpose() * &prev.eigenvectors;
            let mut idx: Vec<usize> = (0..prev.rank()).collect();
            idx.sort_by(|&a, &b| proj.column(b).norm().total_cmp(&proj.column(a).norm()).then(a.cmp(&b)));
            idx.truncate(size);
            idx.sort_unstable();
            let target = DMatrix::from_fn(size, size, |i, j| proj[(i, idx[j])]);
            let svd = target.svd(true, true);
            if let (Some(u), Some(vt)) = (svd.u, svd.v_t) {
                let rotated = &block * (u * vt);
                cur.eigenvectors.columns_mut(start, size).copy_from(&rotated);
            }
        }
        start = end;
    }
}

/// Greedy maximal-overlap matching of `cur` columns onto `prev`, with sign
/// fixing so that every matched overlap is nonnegative.
pub fn align_snapshots(prev: &SpectralSnapshot, cur: &SpectralSnapshot) -> Result<SpectralSnapshot> {
    align_snapshots_with(prev, cur, DEFAULT_OVERLAP_FLOOR)
}

pub fn align_snapshots_with(
    prev: &SpectralSnapshot,
    cur: &SpectralSnapshot,
    overlap_floor: f64,
) -> Result<SpectralSnapshot> {
    if prev.dim() != cur.dim() {
        return Err(Error::DimensionMismatch { what: "snapshot dimension", expected: prev.dim(), found: cur.dim() });
    }
    let mut work = cur.clone();
    rotate_degenerate_blocks(prev, &mut work);
    let (rp, rc) = (prev.rank(), work.rank());
    let overlap = prev.eigenvectors.transpose() * &work.eigenvectors; // rp × rc

    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(rp * rc);
    for i in 0..rp {
        for j in 0..rc {
            pairs.push((overlap[(i, j)].abs(), i, j));
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut prev_to_cur = vec![usize::MAX; rp];
    let mut cur_taken = vec![false; rc];
    for (_, i, j) in pairs {
        if prev_to_cur[i] == usize::MAX && !cur_taken[j] {
            prev_to_cur[i] = j;
            cur_taken[j] = true;
        }
    }

    let mut permutation = Vec::with_capacity(rc);
    let mut signs = Vec::with_capacity(rc);
    let mut min_overlap = f64::INFINITY;
    for (i, &j) in prev_to_cur.iter().enumerate() {
        if j == usize::MAX {
            continue;
        }
        let o = overlap[(i, j)];
        min_overlap = min_overlap.min(o.abs());
        permutation.push(j);
        signs.push(if o < 0.0 { -1.0 } else { 1.0 });
    }
    for (j, taken) in cur_taken.iter().enumerate() {
        if !taken {
            permutation.push(j);
            signs.push(1.0);
        }
    }
    if !min_overlap.is_finite() {
        min_overlap = if rc == 0 { 1.0 } else { 0.0 };
    }

    let n = work.dim();
    let eigenvectors = DMatrix::from_fn(n, rc, |i, c| signs[c] * work.eigenvectors[(i, permutation[c])]);
    let eigenvalues = DVector::from_fn(rc, |c, _| work.eigenvalues[permutation[c]]);
    if min_overlap < overlap_floor {
        return Err(Error::BasisDiscontinuity { min_overlap, floor: overlap_floor });
    }
    Ok(SpectralSnapshot {
        timestamp: work.timestamp,
        eigenvalues,
        eigenvectors,
        lambda_max: work.lambda_max,
        min_eigenvalue: work.min_eigenvalue,
        min_gap: work.min_gap,
        alignment: Some(Alignment { permutation, signs, min_overlap }),
    })
}

/// Central difference `(M_next − M_prev)/(2 dt)` stamped at the midpoint.
pub fn operator_derivative(m_prev: &GramOperator, m_next: &GramOperator, dt: f64) -> Result<OperatorDerivative> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
    }
    if m_prev.matrix.shape() != m_next.matrix.shape() {
        return Err(Error::DimensionMismatch {
            what: "operator shape",
            expected: m_prev.matrix.nrows(),
            found: m_next.matrix.nrows(),
        });
    }
    let span = m_next.timestamp - m_prev.timestamp;
    let scale = 1.0f64.max(m_prev.timestamp.abs()).max(m_next.timestamp.abs());
    if (span - 2.0 * dt).abs() > 1e-9 * scale {
        return Err(Error::InvalidArgument(format!(
            "stencil spans {span}, expected 2·dt = {}",
            2.0 * dt
        )));
    }
    let n = m_prev.matrix.nrows();
    let inv = 1.0 / (2.0 * dt);
    let matrix = symmetric_from_lower(n, |i, j| (m_next.matrix[(i, j)] - m_prev.matrix[(i, j)]) * inv);
    Ok(OperatorDerivative {
        matrix,
        timestamp: 0.5 * (m_prev.timestamp + m_next.timestamp),
        method: DerivativeMethod::CentralDiff,
    })
}

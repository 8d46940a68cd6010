//! Macroscopic engine: drift schedules and effective time, closed-form
//! characteristics, the transport–dissipation PDE on a log grid, and the
//! tail / frontier / scaling estimators built on it.
//!
//! The PDE is `∂_t ε + ∂_λ(v ε) = −2λε` with `v = −c(t) λ^b`. Writing
//! `τ = ∫c dt` makes the drift autonomous, so the solver marches in `τ`.

mod density;
mod fit;

pub use density::*;
pub use fit::*;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Drift amplitude `c(t)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CSchedule {
    Constant { c0: f64 },
    /// `c(t) = c0·t^(alpha−1)`, so `τ = c0·t^alpha/alpha`.
    Power { c0: f64, alpha: f64 },
    /// `v ≡ 0`: frozen spectrum, no transport (lazy regime).
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftSpec {
    pub b: f64,
    pub schedule: CSchedule,
    /// Cutoff constant of the GRSD template, when known.
    pub k: Option<f64>,
}

impl DriftSpec {
    pub fn new(b: f64, schedule: CSchedule) -> Result<Self> {
        let d = DriftSpec { b, schedule, k: None };
        d.validate()?;
        Ok(d)
    }

    pub fn constant(b: f64, c0: f64) -> Result<Self> {
        DriftSpec::new(b, CSchedule::Constant { c0 })
    }

    pub fn off() -> Self {
        DriftSpec { b: 1.0, schedule: CSchedule::Off, k: None }
    }

    pub fn with_k(mut self, k: f64) -> Self {
        self.k = Some(k);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.b > 0.0) || !self.b.is_finite() {
            return Err(Error::InvalidArgument(format!("drift exponent b must be positive, got {}", self.b)));
        }
        match self.schedule {
            CSchedule::Constant { c0 } | CSchedule::Power { c0, .. } if !(c0 > 0.0) || !c0.is_finite() => {
                return Err(Error::InvalidArgument(format!("c0 must be positive, got {c0}")));
            }
            CSchedule::Power { alpha, .. } if !(alpha > 0.0) || !alpha.is_finite() => {
                return Err(Error::InvalidArgument(format!("schedule exponent must be positive, got {alpha}")));
            }
            _ => {}
        }
        if let Some(k) = self.k {
            if !(k >= 0.0) || !k.is_finite() {
                return Err(Error::InvalidArgument(format!("K must be nonnegative, got {k}")));
            }
        }
        Ok(())
    }

    pub fn is_off(&self) -> bool {
        matches!(self.schedule, CSchedule::Off)
    }

    /// `c(t)`
    pub fn amplitude(&self, t: f64) -> f64 {
        match self.schedule {
            CSchedule::Constant { c0 } => c0,
            CSchedule::Power { c0, alpha } => c0 * t.powf(alpha - 1.0),
            CSchedule::Off => 0.0,
        }
    }
}

/// `τ(t) = ∫₀ᵗ c(s) ds` in closed form.
pub fn effective_time(drift: &DriftSpec, t: f64) -> f64 {
    match drift.schedule {
        CSchedule::Constant { c0 } => c0 * t,
        CSchedule::Power { c0, alpha } => c0 * t.powf(alpha) / alpha,
        CSchedule::Off => 0.0,
    }
}

/// Inverse of [`effective_time`]; `None` for a frozen drift.
pub fn physical_time(drift: &DriftSpec, tau: f64) -> Option<f64> {
    match drift.schedule {
        CSchedule::Constant { c0 } => Some(tau / c0),
        CSchedule::Power { c0, alpha } => Some((alpha * tau / c0).powf(1.0 / alpha)),
        CSchedule::Off => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum CharacteristicPoint {
    At(f64),
    /// The characteristic reached `λ = 0` (subcritical drift only).
    HitFloor,
}

impl CharacteristicPoint {
    pub fn lambda(self) -> Option<f64> {
        match self {
            CharacteristicPoint::At(l) => Some(l),
            CharacteristicPoint::HitFloor => None,
        }
    }
}

/// Position at effective time `τ` of the characteristic started at `λ_0`.
pub fn characteristic(lambda0: f64, drift: &DriftSpec, tau: f64) -> CharacteristicPoint {
    if drift.is_off() || tau <= 0.0 {
        return CharacteristicPoint::At(lambda0);
    }
    let b = drift.b;
    if b == 1.0 {
        return CharacteristicPoint::At(lambda0 * (-tau).exp());
    }
    if b < 1.0 && tau >= lambda0.powf(1.0 - b) / (1.0 - b) {
        return CharacteristicPoint::HitFloor;
    }
    let base = lambda0.powf(1.0 - b) + (b - 1.0) * tau;
    if base <= 0.0 {
        return CharacteristicPoint::HitFloor;
    }
    CharacteristicPoint::At(base.powf(1.0 / (1.0 - b)))
}

/// `τ_hit = λ_0^{1−b}/(1−b)` for `0 < b < 1`.
pub fn subcritical_hit_time(lambda0: f64, b: f64) -> Result<f64> {
    if !(b > 0.0 && b < 1.0) {
        return Err(Error::InvalidArgument(format!("hit time needs 0 < b < 1, got {b}")));
    }
    if !(lambda0 > 0.0) {
        return Err(Error::InvalidArgument(format!("lambda0 must be positive, got {lambda0}")));
    }
    Ok(lambda0.powf(1.0 - b) / (1.0 - b))
}

fn simpson(f: &impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let n = n + n % 2;
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        let x = a + h * i as f64;
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(x);
    }
    s * h / 3.0
}

/// Composite Simpson with step doubling until successive estimates agree to
/// `1e-10` relative; returns the Richardson-extrapolated value.
fn refined_simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, steps: usize) -> f64 {
    if b <= a {
        return 0.0;
    }
    let mut n = steps;
    let mut coarse = simpson(&f, a, b, n);
    for _ in 0..24 {
        n *= 2;
        let fine = simpson(&f, a, b, n);
        let diff = fine - coarse;
        if diff.abs() <= 1e-10 * fine.abs() || fine == 0.0 {
            return fine + diff / 15.0;
        }
        coarse = fine;
    }
    coarse
}

/// `Φ(t) = ∫₀ᵗ 2λ(s) ds` along the closed-form characteristic from `λ_0`.
pub fn dissipation_action(lambda0: f64, drift: &DriftSpec, t: f64, steps: usize) -> Result<f64> {
    if steps < 100 {
        return Err(Error::InvalidArgument(format!("quadrature needs at least 100 steps, got {steps}")));
    }
    if !(t >= 0.0) || !(lambda0 > 0.0) {
        return Err(Error::InvalidArgument("action needs t ≥ 0 and λ0 > 0".into()));
    }
    if drift.is_off() {
        return Ok(2.0 * lambda0 * t);
    }
    // Past the floor hit the integrand vanishes; stop there to keep the
    // integrand smooth on the quadrature interval.
    let mut upper = t;
    if drift.b < 1.0 {
        let tau_hit = subcritical_hit_time(lambda0, drift.b)?;
        if let Some(t_hit) = physical_time(drift, tau_hit) {
            upper = upper.min(t_hit);
        }
    }
    let integrand = |s: f64| match characteristic(lambda0, drift, effective_time(drift, s)) {
        CharacteristicPoint::At(l) => 2.0 * l,
        CharacteristicPoint::HitFloor => 0.0,
    };
    Ok(refined_simpson(integrand, 0.0, upper, steps))
}

/// Adaptive Simpson quadrature of `f` on `[a, b]` to absolute tolerance `tol`.
pub fn adaptive_simpson(f: &impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn rec(f: &impl Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        rec(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1) + rec(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
    }
    let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    rec(f, a, b, fa, fm, fb, whole, tol, 48)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn effective_time_closed_forms() {
        assert_eq!(effective_time(&DriftSpec::constant(2.0, 2.0).unwrap(), 3.0), 6.0);
        let p = DriftSpec::new(2.0, CSchedule::Power { c0: 1.0, alpha: 2.0 }).unwrap();
        assert_eq!(effective_time(&p, 3.0), 4.5);
        let t = physical_time(&p, 4.5).unwrap();
        assert!((t - 3.0).abs() < 1e-15);
    }

    #[test]
    fn characteristic_examples() {
        let d2 = DriftSpec::constant(2.0, 1.0).unwrap();
        assert_eq!(characteristic(1.0, &d2, 1.0), CharacteristicPoint::At(0.5));
        let d1 = DriftSpec::constant(1.0, 1.0).unwrap();
        let l = characteristic(1.0, &d1, 2f64.ln()).lambda().unwrap();
        assert!((l - 0.5).abs() < 1e-15);
        let dh = DriftSpec::constant(0.5, 1.0).unwrap();
        assert_eq!(characteristic(1.0, &dh, 2.0), CharacteristicPoint::HitFloor);
        assert!(characteristic(1.0, &dh, 2.0 - 1e-6).lambda().unwrap() > 0.0);
    }

    #[test]
    fn hit_time_examples() {
        assert_eq!(subcritical_hit_time(1.0, 0.5).unwrap(), 2.0);
        assert_eq!(subcritical_hit_time(4.0, 0.5).unwrap(), 4.0);
        assert!(subcritical_hit_time(1.0, 1.0).is_err());
        assert!(subcritical_hit_time(1.0, 1.5).is_err());
    }

    #[test]
    fn frozen_action_is_linear() {
        let phi = dissipation_action(0.7, &DriftSpec::off(), 3.0, 100).unwrap();
        assert!((phi - 4.2).abs() < 1e-14);
    }

    #[test]
    fn action_for_b2_matches_log() {
        let d = DriftSpec::constant(2.0, 1.0).unwrap();
        for t in [0.5, 1.0, 10.0] {
            let phi = dissipation_action(1.0, &d, t, 100).unwrap();
            assert!((phi - 2.0 * (1.0 + t).ln()).abs() < 1e-8 * phi);
        }
        assert!(dissipation_action(1.0, &d, 1.0, 99).is_err());
    }

    #[test]
    fn rejects_bad_drift() {
        assert!(DriftSpec::constant(0.0, 1.0).is_err());
        assert!(DriftSpec::constant(1.0, -1.0).is_err());
        assert!(DriftSpec::new(2.0, CSchedule::Power { c0: 1.0, alpha: 0.0 }).is_err());
    }

    #[test]
    fn adaptive_quadrature_of_polynomial() {
        let v = adaptive_simpson(&|x: f64| x * x * x, 0.0, 2.0, 1e-12);
        assert!((v - 4.0).abs() < 1e-12);
    }
}

//! Library results against independent computations: finite differences,
//! SVD, closed forms and direct quadrature.

use std::sync::Arc;

use approx::assert_relative_eq;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use shellflow::modes::{amplitudes, coupling_matrix, ode_residual, TrajectoryPoint};
use shellflow::netlab::{error_vector, ErrorVector, forward, init_network, jacobian, Activation, ModelSpec, SampleSet};
use shellflow::operator::{align_snapshots, eigensystem, gram_operator, operator_derivative, GramOperator};
use shellflow::shells::build_ledger;
use shellflow::transport::{
    characteristic, dissipation_action, fit_tail_exponent, loss_from_density, DensityField, DensitySolver,
    DriftSpec, LogGrid, Source,
};

fn samples(n: usize, d: usize, seed: u64) -> SampleSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = DMatrix::from_fn(n, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let y = DVector::from_fn(n, |i, _| (x[(i, 0)] * 1.7).sin());
    let w = DVector::from_fn(n, |_, _| rng.random_range(0.5..1.5));
    let w = &w / w.sum();
    SampleSet::new(x, y, w).unwrap()
}

#[test]
fn jacobian_matches_central_differences() {
    let s = samples(7, 2, 1);
    for spec in [
        ModelSpec::mlp(vec![2, 6, 4, 1], Activation::Tanh, 1.0, 3),
        ModelSpec::random_features(2, 9, Activation::Tanh, 1.0, 3),
    ] {
        let net = init_network(&spec).unwrap();
        let j = jacobian(&net, &s).unwrap();
        let h = 1e-6;
        for k in 0..net.params.len() {
            let mut up = net.params.clone();
            let mut dn = net.params.clone();
            up[k] += h;
            dn[k] -= h;
            let fd = (forward(&net.with_params(up).unwrap(), &s).unwrap() - forward(&net.with_params(dn).unwrap(), &s).unwrap()) / (2.0 * h);
            for i in 0..s.len() {
                assert!((fd[i] - j[(i, k)]).abs() < 1e-7, "param {k} sample {i}: {} vs {}", fd[i], j[(i, k)]);
            }
        }
    }
}

#[test]
fn eigenvalues_are_squared_singular_values() {
    let s = samples(10, 2, 2);
    let net = init_network(&ModelSpec::mlp(vec![2, 8, 1], Activation::Tanh, 1.0, 5)).unwrap();
    let j = jacobian(&net, &s).unwrap();
    let snap = eigensystem(&gram_operator(&j, &s.weights, 0.0).unwrap(), 0.0).unwrap();
    let a = DMatrix::from_fn(s.len(), j.ncols(), |i, k| s.weights[i].sqrt() * j[(i, k)]);
    let mut sv: Vec<f64> = a.singular_values().iter().map(|x| x * x).collect();
    sv.sort_by(|x, y| y.total_cmp(x));
    assert_eq!(snap.rank(), 10);
    for (u, l) in snap.eigenvalues.iter().enumerate() {
        assert_relative_eq!(*l, sv[u], max_relative = 1e-10, epsilon = 1e-12 * sv[0]);
    }
}

#[test]
fn snapshot_reconstructs_operator_and_is_orthonormal() {
    let s = samples(12, 1, 3);
    let net = init_network(&ModelSpec::random_features(1, 40, Activation::Tanh, 1.0, 2)).unwrap();
    let m = gram_operator(&jacobian(&net, &s).unwrap(), &s.weights, 0.0).unwrap();
    let snap = eigensystem(&m, 0.0).unwrap();
    let err = (snap.reconstruct() - &m.matrix).amax() / m.matrix.amax();
    assert!(err < 1e-12, "reconstruction {err:e}");
    let gram = snap.eigenvectors.transpose() * &snap.eigenvectors;
    assert!((gram - DMatrix::identity(snap.rank(), snap.rank())).amax() < 1e-12);
}

#[test]
fn full_rank_amplitudes_satisfy_parseval_and_dissipation_form() {
    let s = samples(8, 1, 4);
    let net = init_network(&ModelSpec::random_features(1, 32, Activation::Tanh, 1.0, 9)).unwrap();
    let j = jacobian(&net, &s).unwrap();
    let snap = eigensystem(&gram_operator(&j, &s.weights, 0.0).unwrap(), 0.0).unwrap();
    assert_eq!(snap.rank(), s.len());
    let e = error_vector(&net, &s, 0.0).unwrap();
    let g = amplitudes(&e, &snap, &s.weights).unwrap();
    let norm2: f64 = (0..s.len()).map(|i| s.weights[i] * e.values[i] * e.values[i]).sum();
    assert_relative_eq!(g.amplitudes.norm_squared(), norm2, max_relative = 1e-12);

    // Σ D_α = ‖Jᵀ W e‖² = −dL/dt.
    let ledger = build_ledger(&g, &snap, None, 1e-2, 2.0, None).unwrap();
    let grad = j.tr_mul(&e.values.component_mul(&s.weights));
    assert_relative_eq!(ledger.total_dissipation(), grad.norm_squared(), max_relative = 1e-10);
    assert_relative_eq!(ledger.total_energy(), e.loss(&s.weights), max_relative = 1e-12);
}

#[test]
fn density_mass_matches_closed_form_integral() {
    let g = Arc::new(LogGrid::per_decade(1e-3, 10.0, 400).unwrap());
    let f = DensityField::from_fn(g, 0.0, |l| l.powf(-1.5)).unwrap();
    let exact = 2.0 * (1e-3f64.powf(-0.5) - 10f64.powf(-0.5));
    assert_relative_eq!(loss_from_density(&f), exact, max_relative = 1e-4);
}

/// Characteristic against RK4 on `dλ/dτ = −λ^b`.
#[test]
fn characteristics_match_direct_integration() {
    for b in [0.5, 1.0, 2.0, 3.0] {
        let d = DriftSpec::constant(b, 1.0).unwrap();
        let (l0, tau) = (1.0, 0.8);
        let n = 10_000;
        let h = tau / n as f64;
        let rhs = |l: f64| -l.max(0.0).powf(b);
        let mut l = l0;
        for _ in 0..n {
            let k1 = rhs(l);
            let k2 = rhs(l + 0.5 * h * k1);
            let k3 = rhs(l + 0.5 * h * k2);
            let k4 = rhs(l + h * k3);
            l += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        let c = characteristic(l0, &d, tau).lambda().unwrap();
        assert_relative_eq!(c, l, max_relative = 1e-9);
    }
    // b < 1 reaches the floor in finite τ.
    let d = DriftSpec::constant(0.5, 1.0).unwrap();
    assert!(characteristic(1.0, &d, 2.0 + 1e-9).lambda().is_none());
}

#[test]
fn dissipation_action_matches_closed_form() {
    // b = 2, c = c0: λ(t) = λ0/(1 + λ0 c0 t), so Φ = (2/c0) ln(1 + λ0 c0 t).
    let (c0, l0, t) = (3.0, 0.7, 5.0);
    let d = DriftSpec::constant(2.0, c0).unwrap();
    let phi = dissipation_action(l0, &d, t, 200).unwrap();
    assert_relative_eq!(phi, 2.0 / c0 * (1.0 + l0 * c0 * t).ln(), max_relative = 1e-9);
    assert_relative_eq!(dissipation_action(l0, &DriftSpec::off(), t, 200).unwrap(), 2.0 * l0 * t, max_relative = 1e-15);
}

#[test]
fn transport_conserves_mass_to_roundoff() {
    let g = Arc::new(LogGrid::per_decade(1e-4, 10.0, 64).unwrap());
    let init = DensityField::from_fn(g.clone(), 0.0, |l| (-(l.ln() + 1.0).powi(2)).exp() / l).unwrap();
    let d = DriftSpec::constant(1.5, 1.0).unwrap();
    let dtau = DensitySolver::stable_dtau(&g, 1.5, 0.9);
    let mut s = DensitySolver::new(init, d, dtau, true)
        .unwrap()
        .with_source(Source { center: 0.5, log_width: 0.3, rate: 2.0 })
        .unwrap();
    s.advance_to(3.0).unwrap();
    let ledger = s.ledger();
    assert!(ledger.outflow > 0.0 && ledger.dissipated > 0.0 && ledger.injected > 0.0);
    let err = (s.field().mass() - ledger.expected()).abs() / ledger.initial.max(ledger.injected);
    assert!(err < 1e-12, "budget error {err:e}");
}

#[test]
fn frozen_drift_decays_each_cell_exactly() {
    let g = Arc::new(LogGrid::per_decade(1e-3, 1.0, 16).unwrap());
    let init = DensityField::from_fn(g.clone(), 0.0, |l| 1.0 / l).unwrap();
    let mut s = DensitySolver::new(init.clone(), DriftSpec::off(), 0.37, true).unwrap();
    s.advance_to(4.0).unwrap();
    for i in 0..g.len() {
        let exact = init.values[i] * (-2.0 * g.centers[i] * 4.0).exp();
        assert_relative_eq!(s.field().values[i], exact, max_relative = 1e-12);
    }
}

/// Steady tail under constant injection and pure drift: `ε ∝ λ^{−b}` below
/// the source, independent of resolution.
#[test]
fn steady_tail_is_resolution_independent() {
    let b = 2.0;
    let slope = |cpd: usize| {
        let g = Arc::new(LogGrid::per_decade(1e-3, 10.0, cpd).unwrap());
        let init = DensityField::new(g.clone(), vec![0.0; g.len()], 0.0).unwrap();
        let dtau = DensitySolver::stable_dtau(&g, b, 0.9);
        let mut s = DensitySolver::new(init, DriftSpec::constant(b, 1.0).unwrap(), dtau, false)
            .unwrap()
            .with_source(Source { center: 2.0, log_width: 0.1, rate: 1.0 })
            .unwrap();
        s.advance_to(2e3).unwrap();
        fit_tail_exponent(s.field(), (1e-2, 0.3)).unwrap().slope
    };
    let (coarse, fine) = (slope(32), slope(64));
    assert!((coarse + b).abs() < 0.02, "coarse {coarse}");
    assert!((fine + b).abs() < 0.02, "fine {fine}");
    assert!((coarse - fine).abs() < 0.01);
}

/// Analytic operator `R(t) diag(3+t, 1.5−t², 0.5+t³) R(t)ᵀ` with `R` the
/// exponential of a skew matrix cubic in t; `e` solves `ė = −M e` by fine
/// RK4. The stencil residual must fall as dt².
#[test]
fn mode_ode_residual_is_second_order_for_cubic_operator() {
    let k1 = DMatrix::from_row_slice(3, 3, &[0.0, 0.4, -0.2, -0.4, 0.0, 0.3, 0.2, -0.3, 0.0]);
    let k3 = DMatrix::from_row_slice(3, 3, &[0.0, -0.1, 0.5, 0.1, 0.0, 0.2, -0.5, -0.2, 0.0]);
    let op = |t: f64| {
        let r = (&k1 * t + &k3 * t.powi(3)).exp();
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0 + t, 1.5 - t * t, 0.5 + t.powi(3)]));
        let m = &r * d * r.transpose();
        (&m + m.transpose()) * 0.5
    };
    let error_at = |t: f64| {
        let h = 1e-4;
        let n = (t / h).round() as usize;
        let mut e = DVector::from_vec(vec![1.0, -0.5, 0.8]);
        for k in 0..n {
            let s = k as f64 * h;
            let f = |s: f64, e: &DVector<f64>| -(op(s) * e);
            let a = f(s, &e);
            let b = f(s + 0.5 * h, &(&e + &a * (0.5 * h)));
            let c = f(s + 0.5 * h, &(&e + &b * (0.5 * h)));
            let d = f(s + h, &(&e + &c * h));
            e += (a + b * 2.0 + c * 2.0 + d) * (h / 6.0);
        }
        e
    };
    let w = DVector::from_element(3, 1.0);
    let residual = |dt: f64| {
        let tc = 0.5;
        let ops: Vec<GramOperator> = [-1.0, 0.0, 1.0].iter().map(|k| GramOperator { matrix: op(tc + k * dt), timestamp: tc + k * dt }).collect();
        let centre = eigensystem(&ops[1], 0.0).unwrap();
        let mdot = operator_derivative(&ops[0], &ops[2], dt).unwrap();
        let omega = coupling_matrix(&centre, &mdot, 1e-8).unwrap();
        let points: Vec<TrajectoryPoint> = ops
            .iter()
            .enumerate()
            .map(|(i, m)| {
                let snap = if i == 1 { centre.clone() } else { align_snapshots(&centre, &eigensystem(m, 0.0).unwrap()).unwrap() };
                let error = ErrorVector { values: error_at(m.timestamp), timestamp: m.timestamp };
                let modes = amplitudes(&error, &snap, &w).unwrap();
                TrajectoryPoint { error, snapshot: snap, modes, coupling: (i == 1).then(|| omega.clone()), usable: true }
            })
            .collect();
        ode_residual(&points, dt).unwrap().rms_relative
    };
    let (coarse, fine) = (residual(0.02), residual(0.01));
    let ratio = coarse / fine;
    assert!((ratio - 4.0).abs() < 0.3, "residuals {coarse:e} -> {fine:e}, ratio {ratio}");
}

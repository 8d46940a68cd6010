//! Tiny differentiable models, the weighted sample geometry, and explicit
//! gradient-flow integration.
//!
//! Parameters of an MLP are laid out layer by layer as `W_l` (row-major,
//! `d_{l+1} × d_l`) followed by `b_l`. The output layer is linear and scalar.
//! A random-features model has a frozen hidden layer drawn from the seed and
//! trains only the linear head.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Mlp,
    RandomFeatures,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Architecture and initialization recipe.
///
/// For `RandomFeatures`, `layer_widths[0]` is the input dimension and the
/// remaining entries are ignored; the model is `f(x) = θ·φ(x)` with
/// `φ_k(x) = act(w_k·x + c_k)/√p`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    pub feature_count: usize,
    pub init_scale: f64,
    pub seed: u64,
}

impl ModelSpec {
    pub fn mlp(layer_widths: Vec<usize>, activation: Activation, init_scale: f64, seed: u64) -> Self {
        ModelSpec {
            kind: ModelKind::Mlp,
            layer_widths,
            activation,
            feature_count: 0,
            init_scale,
            seed,
        }
    }

    pub fn random_features(
        input_dim: usize,
        feature_count: usize,
        activation: Activation,
        init_scale: f64,
        seed: u64,
    ) -> Self {
        ModelSpec {
            kind: ModelKind::RandomFeatures,
            layer_widths: vec![input_dim, 1],
            activation,
            feature_count,
            init_scale,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.init_scale > 0.0) || !self.init_scale.is_finite() {
            return Err(Error::InvalidSpec(format!(
                "init-scale must be positive and finite, got {}",
                self.init_scale
            )));
        }
        if self.layer_widths.is_empty() || self.layer_widths[0] == 0 {
            return Err(Error::InvalidSpec("input dimension must be at least 1".into()));
        }
        match self.kind {
            ModelKind::Mlp => {
                if self.layer_widths.len() < 2 {
                    return Err(Error::InvalidSpec(
                        "mlp needs at least an input and an output width".into(),
                    ));
                }
                if self.layer_widths.contains(&0) {
                    return Err(Error::InvalidSpec("layer widths must be positive".into()));
                }
                if *self.layer_widths.last().unwrap() != 1 {
                    return Err(Error::InvalidSpec("mlp output width must be 1".into()));
                }
            }
            ModelKind::RandomFeatures => {
                if self.feature_count == 0 {
                    return Err(Error::InvalidSpec("feature-count must be at least 1".into()));
                }
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn param_count(&self) -> usize {
        match self.kind {
            ModelKind::Mlp => self
                .layer_widths
                .windows(2)
                .map(|w| w[0] * w[1] + w[1])
                .sum(),
            ModelKind::RandomFeatures => self.feature_count,
        }
    }
}

/// Frozen hidden layer of a random-features model.
#[derive(Debug, Clone, PartialEq)]
struct FeatureMap {
    weights: DMatrix<f64>, // p × d
    bias: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkState {
    pub params: DVector<f64>,
    pub spec: ModelSpec,
    features: Option<FeatureMap>,
}

/// Weighted empirical sample: the stand-in for `L²(p)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub inputs: DMatrix<f64>,
    pub targets: DVector<f64>,
    pub weights: DVector<f64>,
}

impl SampleSet {
    pub fn new(inputs: DMatrix<f64>, targets: DVector<f64>, weights: DVector<f64>) -> Result<Self> {
        let n = inputs.nrows();
        if n == 0 {
            return Err(Error::InvalidArgument("sample set is empty".into()));
        }
        if targets.len() != n {
            return Err(Error::DimensionMismatch { what: "targets", expected: n, found: targets.len() });
        }
        if weights.len() != n {
            return Err(Error::DimensionMismatch { what: "weights", expected: n, found: weights.len() });
        }
        if weights.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
            return Err(Error::InvalidArgument("weights must be strictly positive".into()));
        }
        let total: f64 = weights.sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!("weights sum to {total}, not 1")));
        }
        if targets.iter().any(|t| !t.is_finite()) || inputs.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument("inputs and targets must be finite".into()));
        }
        Ok(SampleSet { inputs, targets, weights })
    }

    /// Uniform weights `1/n`.
    pub fn uniform(inputs: DMatrix<f64>, targets: DVector<f64>) -> Result<Self> {
        let n = inputs.nrows();
        let w = DVector::from_element(n, 1.0 / n.max(1) as f64);
        SampleSet::new(inputs, targets, w)
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.nrows() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorVector {
    pub values: DVector<f64>,
    pub timestamp: f64,
}

impl ErrorVector {
    /// `½ Σ w_i e_i²`
    pub fn loss(&self, weights: &DVector<f64>) -> f64 {
        0.5 * weighted_inner(&self.values, &self.values, weights)
    }
}

/// `⟨f, g⟩_w = Σ w_i f_i g_i`
pub fn weighted_inner(f: &DVector<f64>, g: &DVector<f64>, weights: &DVector<f64>) -> f64 {
    f.iter().zip(g.iter()).zip(weights.iter()).map(|((a, b), w)| w * a * b).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Integrator {
    #[default]
    Euler,
    Rk4,
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn init_network(spec: &ModelSpec) -> Result<NetworkState> {
    spec.validate()?;
    // Stream 0 draws trainable parameters, stream 1 the frozen features.
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(0);
    let mut params = DVector::zeros(spec.param_count());
    let mut features = None;
    match spec.kind {
        ModelKind::Mlp => {
            let mut offset = 0;
            for w in spec.layer_widths.windows(2) {
                let scale = spec.init_scale / (w[0] as f64).sqrt();
                let len = w[0] * w[1] + w[1];
                for k in 0..len {
                    params[offset + k] = scale * standard_normal(&mut rng);
                }
                offset += len;
            }
        }
        ModelKind::RandomFeatures => {
            let p = spec.feature_count;
            let d = spec.input_dim();
            let scale = spec.init_scale / (p as f64).sqrt();
            for k in 0..p {
                params[k] = scale * standard_normal(&mut rng);
            }
            let mut frng = ChaCha8Rng::seed_from_u64(spec.seed);
            frng.set_stream(1);
            let inv_sqrt_d = 1.0 / (d as f64).sqrt();
            let weights = DMatrix::from_fn(p, d, |_, _| inv_sqrt_d * standard_normal(&mut frng));
            let bias = DVector::from_fn(p, |_, _| standard_normal(&mut frng));
            features = Some(FeatureMap { weights, bias });
        }
    }
    Ok(NetworkState { params, spec: spec.clone(), features })
}

impl NetworkState {
    /// Replace the parameter vector, keeping architecture and frozen features.
    pub fn with_params(&self, params: DVector<f64>) -> Result<Self> {
        if params.len() != self.spec.param_count() {
            return Err(Error::DimensionMismatch {
                what: "params",
                expected: self.spec.param_count(),
                found: params.len(),
            });
        }
        Ok(NetworkState { params, spec: self.spec.clone(), features: self.features.clone() })
    }

    fn check_inputs(&self, samples: &SampleSet) -> Result<()> {
        if samples.input_dim() != self.spec.input_dim() {
            return Err(Error::DimensionMismatch {
                what: "input dimension",
                expected: self.spec.input_dim(),
                found: samples.input_dim(),
            });
        }
        Ok(())
    }

    /// Feature row `φ(x)` of a random-features model.
    fn features_of(&self, x: &[f64], out: &mut [f64]) {
        let fm = self.features.as_ref().expect("random-features state carries its feature map");
        let p = self.spec.feature_count;
        let norm = 1.0 / (p as f64).sqrt();
        for k in 0..p {
            let mut z = fm.bias[k];
            for (j, xj) in x.iter().enumerate() {
                z += fm.weights[(k, j)] * xj;
            }
            out[k] = norm * self.spec.activation.apply(z);
        }
    }

    /// Layer pre-activations and activations for one input.
    fn mlp_pass(&self, x: &[f64]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let widths = &self.spec.layer_widths;
        let depth = widths.len() - 1;
        let act = self.spec.activation;
        let mut pre = Vec::with_capacity(depth);
        let mut post = Vec::with_capacity(depth + 1);
        post.push(x.to_vec());
        let mut offset = 0;
        for l in 0..depth {
            let (din, dout) = (widths[l], widths[l + 1]);
            let w = &self.params.as_slice()[offset..offset + din * dout];
            let b = &self.params.as_slice()[offset + din * dout..offset + din * dout + dout];
            let a = &post[l];
            let z: Vec<f64> = (0..dout)
                .map(|i| b[i] + (0..din).map(|j| w[i * din + j] * a[j]).sum::<f64>())
                .collect();
            let next = if l + 1 < depth { z.iter().map(|&v| act.apply(v)).collect() } else { z.clone() };
            pre.push(z);
            post.push(next);
            offset += din * dout + dout;
        }
        (pre, post)
    }

    fn forward_one(&self, x: &[f64], scratch: &mut Vec<f64>) -> f64 {
        match self.spec.kind {
            ModelKind::Mlp => {
                let (_, post) = self.mlp_pass(x);
                post.last().unwrap()[0]
            }
            ModelKind::RandomFeatures => {
                scratch.resize(self.spec.feature_count, 0.0);
                self.features_of(x, scratch);
                scratch.iter().zip(self.params.iter()).map(|(a, b)| a * b).sum()
            }
        }
    }

    /// Gradient of the scalar output with respect to all parameters.
    fn gradient_one(&self, x: &[f64], out: &mut [f64]) {
        match self.spec.kind {
            ModelKind::RandomFeatures => self.features_of(x, out),
            ModelKind::Mlp => {
                let widths = &self.spec.layer_widths;
                let depth = widths.len() - 1;
                let act = self.spec.activation;
                let (pre, post) = self.mlp_pass(x);
                let mut offsets = Vec::with_capacity(depth);
                let mut o = 0;
                for l in 0..depth {
                    offsets.push(o);
                    o += widths[l] * widths[l + 1] + widths[l + 1];
                }
                // δ for the linear scalar output layer.
                let mut delta = vec![1.0];
                for l in (0..depth).rev() {
                    let (din, dout) = (widths[l], widths[l + 1]);
                    let off = offsets[l];
                    let a = &post[l];
                    for i in 0..dout {
                        for j in 0..din {
                            out[off + i * din + j] = delta[i] * a[j];
                        }
                        out[off + din * dout + i] = delta[i];
                    }
                    if l > 0 {
                        let w = &self.params.as_slice()[off..off + din * dout];
                        delta = (0..din)
                            .map(|j| {
                                let back: f64 = (0..dout).map(|i| w[i * din + j] * delta[i]).sum();
                                back * act.derivative(pre[l - 1][j])
                            })
                            .collect();
                    }
                }
            }
        }
    }
}

pub fn forward(net: &NetworkState, samples: &SampleSet) -> Result<DVector<f64>> {
    net.check_inputs(samples)?;
    let mut scratch = Vec::new();
    let mut x = vec![0.0; samples.input_dim()];
    Ok(DVector::from_fn(samples.len(), |i, _| {
        for (j, xj) in x.iter_mut().enumerate() {
            *xj = samples.inputs[(i, j)];
        }
        net.forward_one(&x, &mut scratch)
    }))
}

/// `n × N` matrix whose row `i` is `∇_θ f_θ(x_i)`.
pub fn jacobian(net: &NetworkState, samples: &SampleSet) -> Result<DMatrix<f64>> {
    net.check_inputs(samples)?;
    let n = samples.len();
    let np = net.spec.param_count();
    let mut jac = DMatrix::zeros(n, np);
    let mut x = vec![0.0; samples.input_dim()];
    let mut row = vec![0.0; np];
    for i in 0..n {
        for (j, xj) in x.iter_mut().enumerate() {
            *xj = samples.inputs[(i, j)];
        }
        net.gradient_one(&x, &mut row);
        for k in 0..np {
            jac[(i, k)] = row[k];
        }
    }
    Ok(jac)
}

pub fn error_vector(net: &NetworkState, samples: &SampleSet, t: f64) -> Result<ErrorVector> {
    let f = forward(net, samples)?;
    Ok(ErrorVector { values: &samples.targets - f, timestamp: t })
}

pub fn loss(net: &NetworkState, samples: &SampleSet) -> Result<f64> {
    Ok(error_vector(net, samples, 0.0)?.loss(&samples.weights))
}

/// Parameter velocity `θ̇ = −∇L = Jᵀ W e`.
fn flow_field(net: &NetworkState, samples: &SampleSet) -> Result<DVector<f64>> {
    let e = error_vector(net, samples, 0.0)?.values;
    let we = e.component_mul(&samples.weights);
    Ok(jacobian(net, samples)?.tr_mul(&we))
}

/// One explicit Euler step of gradient flow; returns the post-step loss.
pub fn gradient_flow_step(net: &NetworkState, samples: &SampleSet, dt: f64) -> Result<(NetworkState, f64)> {
    gradient_flow_step_with(net, samples, dt, Integrator::Euler)
}

pub fn gradient_flow_step_with(
    net: &NetworkState,
    samples: &SampleSet,
    dt: f64,
    integrator: Integrator,
) -> Result<(NetworkState, f64)> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
    }
    let theta = &net.params;
    let next = match integrator {
        Integrator::Euler => {
            let k1 = flow_field(net, samples)?;
            theta + dt * k1
        }
        Integrator::Rk4 => {
            let k1 = flow_field(net, samples)?;
            let k2 = flow_field(&net.with_params(theta + 0.5 * dt * &k1)?, samples)?;
            let k3 = flow_field(&net.with_params(theta + 0.5 * dt * &k2)?, samples)?;
            let k4 = flow_field(&net.with_params(theta + dt * &k3)?, samples)?;
            theta + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        }
    };
    if next.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence { step: 0, reason: "non-finite gradient".into() });
    }
    let stepped = net.with_params(next)?;
    let l = loss(&stepped, samples)?;
    if !l.is_finite() {
        return Err(Error::Divergence { step: 0, reason: "non-finite loss".into() });
    }
    Ok((stepped, l))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line_samples(n: usize) -> SampleSet {
        let xs = DMatrix::from_fn(n, 1, |i, _| -1.0 + 2.0 * i as f64 / (n - 1) as f64);
        let ys = DVector::from_fn(n, |i, _| (std::f64::consts::PI * xs[(i, 0)]).sin());
        SampleSet::uniform(xs, ys).unwrap()
    }

    #[test]
    fn parameter_counts() {
        let mlp = init_network(&ModelSpec::mlp(vec![1, 8, 1], Activation::Tanh, 1.0, 7)).unwrap();
        assert_eq!(mlp.params.len(), 25);
        let rf = init_network(&ModelSpec::random_features(2, 40, Activation::Tanh, 1.0, 7)).unwrap();
        assert_eq!(rf.params.len(), 40);
    }

    #[test]
    fn init_is_deterministic() {
        let spec = ModelSpec::mlp(vec![2, 5, 3, 1], Activation::Relu, 0.7, 99);
        let a = init_network(&spec).unwrap();
        let b = init_network(&spec).unwrap();
        assert_eq!(a.params.as_slice(), b.params.as_slice());
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(init_network(&ModelSpec::mlp(vec![3], Activation::Tanh, 1.0, 0)).is_err());
        assert!(init_network(&ModelSpec::mlp(vec![1, 4, 1], Activation::Tanh, 0.0, 0)).is_err());
        assert!(init_network(&ModelSpec::random_features(2, 0, Activation::Tanh, 1.0, 0)).is_err());
    }

    #[test]
    fn zero_params_give_zero_output() {
        let net = init_network(&ModelSpec::mlp(vec![1, 8, 1], Activation::Tanh, 1.0, 3)).unwrap();
        let net = net.with_params(DVector::zeros(25)).unwrap();
        let f = forward(&net, &line_samples(9)).unwrap();
        assert!(f.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_single_layer_is_affine() {
        let net = init_network(&ModelSpec::mlp(vec![2, 1], Activation::Identity, 1.0, 5)).unwrap();
        let x = DMatrix::from_row_slice(3, 2, &[0.5, -1.0, 2.0, 0.25, 0.0, 0.0]);
        let s = SampleSet::uniform(x.clone(), DVector::zeros(3)).unwrap();
        let f = forward(&net, &s).unwrap();
        let p = &net.params;
        for i in 0..3 {
            let expect = p[0] * x[(i, 0)] + p[1] * x[(i, 1)] + p[2];
            assert!((f[i] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn input_dimension_is_checked() {
        let net = init_network(&ModelSpec::mlp(vec![2, 4, 1], Activation::Tanh, 1.0, 1)).unwrap();
        assert!(matches!(forward(&net, &line_samples(4)), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn zero_input_zero_bias_kills_output_weight_gradient() {
        let net = init_network(&ModelSpec::mlp(vec![1, 4, 1], Activation::Tanh, 1.0, 2)).unwrap();
        let mut p = net.params.clone();
        for k in 4..8 {
            p[k] = 0.0; // hidden biases
        }
        let net = net.with_params(p).unwrap();
        let s = SampleSet::uniform(DMatrix::zeros(1, 1), DVector::zeros(1)).unwrap();
        let j = jacobian(&net, &s).unwrap();
        for k in 8..12 {
            assert_eq!(j[(0, k)], 0.0);
        }
        assert_eq!(j[(0, 12)], 1.0);
    }

    #[test]
    fn zero_error_leaves_params_fixed() {
        let net = init_network(&ModelSpec::mlp(vec![1, 6, 1], Activation::Tanh, 1.0, 4)).unwrap();
        let mut s = line_samples(8);
        s.targets = forward(&net, &s).unwrap();
        let (next, l) = gradient_flow_step(&net, &s, 0.1).unwrap();
        assert_eq!(next.params, net.params);
        assert_eq!(l, 0.0);
    }

    #[test]
    fn error_vector_matches_targets_minus_outputs() {
        let net = init_network(&ModelSpec::mlp(vec![1, 3, 1], Activation::Tanh, 1.0, 4)).unwrap();
        let net = net.with_params(DVector::zeros(10)).unwrap();
        let xs = DMatrix::from_fn(5, 1, |i, _| i as f64);
        let s = SampleSet::uniform(xs, DVector::from_element(5, 1.0)).unwrap();
        let e = error_vector(&net, &s, 2.5).unwrap();
        assert!(e.values.iter().all(|&v| v == 1.0));
        assert_eq!(e.timestamp, 2.5);
        assert!((e.loss(&s.weights) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn euler_displacement_is_linear_in_dt() {
        let net = init_network(&ModelSpec::mlp(vec![1, 6, 1], Activation::Tanh, 1.0, 4)).unwrap();
        let s = line_samples(8);
        let (a, _) = gradient_flow_step(&net, &s, 1e-3).unwrap();
        let (b, _) = gradient_flow_step(&net, &s, 5e-4).unwrap();
        let da = (&a.params - &net.params).norm();
        let db = (&b.params - &net.params).norm();
        assert!((da / db - 2.0).abs() < 1e-12);
    }

    #[test]
    fn weights_must_be_positive() {
        let x = DMatrix::zeros(2, 1);
        let r = SampleSet::new(x, DVector::zeros(2), DVector::from_vec(vec![1.0, 0.0]));
        assert!(r.is_err());
    }
}

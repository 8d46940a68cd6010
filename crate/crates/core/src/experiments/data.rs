//! Seeded sample generation: inputs from a declared distribution, targets
//! from a teacher function.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{ExperimentConfig, InputDistribution, TeacherKind};
use crate::error::Result;
use crate::netlab::{forward, init_network, ModelSpec, NetworkState, SampleSet};

pub const TRAIN_STREAM: u64 = 2;
pub const TEST_STREAM: u64 = 3;

/// Target function `f*`.
pub enum Teacher {
    Sine { frequency: f64 },
    Network(NetworkState),
}

impl Teacher {
    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self> {
        Ok(match cfg.teacher {
            TeacherKind::Sine => Teacher::Sine { frequency: cfg.teacher_frequency },
            TeacherKind::RandomMlp => Teacher::Network(init_network(&ModelSpec::mlp(
                cfg.teacher_widths.clone(),
                cfg.activation,
                1.0,
                cfg.teacher_seed,
            ))?),
        })
    }

    pub fn evaluate(&self, inputs: &DMatrix<f64>) -> Result<DVector<f64>> {
        match self {
            Teacher::Sine { frequency } => Ok(DVector::from_fn(inputs.nrows(), |i, _| {
                let s: f64 = inputs.row(i).iter().sum();
                (std::f64::consts::PI * frequency * s).sin()
            })),
            Teacher::Network(net) => {
                let probe = SampleSet::uniform(inputs.clone(), DVector::zeros(inputs.nrows()))?;
                forward(net, &probe)
            }
        }
    }
}

/// Draw `n` inputs. Streams 0 and 1 of a seed belong to the model
/// initialisation, so data uses [`TRAIN_STREAM`] and [`TEST_STREAM`].
pub fn draw_inputs(
    n: usize,
    dim: usize,
    dist: InputDistribution,
    low: f64,
    high: f64,
    seed: u64,
    stream: u64,
) -> DMatrix<f64> {
    match dist {
        InputDistribution::Grid => DMatrix::from_fn(n, dim, |i, _| {
            if n == 1 {
                0.5 * (low + high)
            } else {
                low + (high - low) * i as f64 / (n - 1) as f64
            }
        }),
        InputDistribution::UniformBox => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream);
            let mut m = DMatrix::zeros(n, dim);
            for i in 0..n {
                for j in 0..dim {
                    m[(i, j)] = low + (high - low) * rng.random::<f64>();
                }
            }
            m
        }
    }
}

/// Train and (optionally empty) test sets for one seed, uniform weights.
pub fn make_samples(cfg: &ExperimentConfig, seed: u64) -> Result<(SampleSet, Option<SampleSet>)> {
    let teacher = Teacher::from_config(cfg)?;
    let dim = cfg.layer_widths[0];
    let xs = draw_inputs(cfg.n_train, dim, cfg.input_distribution, cfg.input_low, cfg.input_high, seed, TRAIN_STREAM);
    let train = SampleSet::uniform(xs.clone(), teacher.evaluate(&xs)?)?;
    let test = if cfg.n_test > 0 {
        let xt = draw_inputs(cfg.n_test, dim, InputDistribution::UniformBox, cfg.input_low, cfg.input_high, seed, TEST_STREAM);
        Some(SampleSet::uniform(xt.clone(), teacher.evaluate(&xt)?)?)
    } else {
        None
    };
    Ok((train, test))
}

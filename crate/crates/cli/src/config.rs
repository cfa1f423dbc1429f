//! Training configuration file.

use std::path::{Path, PathBuf};

use critembed::experiment::{two_stage_dataset, Target};
use critembed::network::{forward, Activation, Dataset, NetShape, ParamTuple};
use critembed::numerics::seeded_rng;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::CliError;
use crate::io::{read_json, relative_to};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub shape: NetShape,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default = "default_loss")]
    pub loss: String,
    pub dataset: DatasetSource,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
    #[serde(default)]
    pub seed: u64,
    /// Embedding spec applied to the trained parameters, written next to them.
    #[serde(default)]
    pub embedding: Option<PathBuf>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn default_activation() -> Activation {
    Activation::Tanh
}

fn default_loss() -> String {
    "mse".into()
}

fn default_init_scale() -> f64 {
    1.0
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSource {
    Path(PathBuf),
    Synthetic(SyntheticSpec),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyntheticKind {
    /// Targets from a random teacher network of the configured shape.
    Teacher,
    /// Equally spaced 1-D inputs on `[-3, 3]` labelled by the two-stage target.
    TwoBump,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub n: usize,
    #[serde(default)]
    pub noise: f64,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Gd,
    /// Levenberg–Marquardt on the Gauss–Newton matrix.
    Lm,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub method: Method,
    pub lr: f64,
    pub max_iters: usize,
    pub grad_tol: f64,
    pub polish_steps: usize,
    pub trace_every: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            method: Method::Gd,
            lr: 0.05,
            max_iters: 20_000,
            grad_tol: 1e-8,
            polish_steps: 30,
            trace_every: 10,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let mut cfg: ExperimentConfig = read_json(path)?;
        if let DatasetSource::Path(p) = &cfg.dataset {
            cfg.dataset = DatasetSource::Path(relative_to(path, p));
        }
        cfg.embedding = cfg.embedding.map(|p| relative_to(path, &p));
        cfg.output_dir = cfg.output_dir.map(|p| relative_to(path, &p));
        Ok(cfg)
    }

    pub fn dataset(&self) -> Result<Dataset, CliError> {
        let data = match &self.dataset {
            DatasetSource::Path(p) => read_json::<Dataset>(p)?,
            DatasetSource::Synthetic(spec) => synthetic(&self.shape, self.activation, spec)?,
        };
        data.validate()
            .map_err(|e| CliError::Usage(format!("invalid dataset: {e}")))?;
        if data.input_dim() != self.shape.input_dim()
            || data.output_dim() != self.shape.output_dim()
        {
            return Err(CliError::Usage(format!(
                "dataset dimensions ({}, {}) do not match shape {}",
                data.input_dim(),
                data.output_dim(),
                self.shape
            )));
        }
        Ok(data)
    }
}

/// Teacher and noise draws use their own stream so that equal data and
/// training seeds do not start the student at the teacher.
const DATA_STREAM: u64 = 0x5eed_da7a;

fn synthetic(
    shape: &NetShape,
    sigma: Activation,
    spec: &SyntheticSpec,
) -> Result<Dataset, CliError> {
    let mut rng = seeded_rng(spec.seed ^ DATA_STREAM);
    let noisy = |v: f64, rng: &mut _| {
        let z: f64 = StandardNormal.sample(rng);
        v + spec.noise * z
    };
    let data = match spec.kind {
        SyntheticKind::Teacher => {
            let teacher = ParamTuple::random_normal(shape, 1.0, &mut rng);
            let inputs: Vec<Vec<f64>> = (0..spec.n)
                .map(|_| {
                    (0..shape.input_dim())
                        .map(|_| rng.random_range(-2.0..2.0))
                        .collect()
                })
                .collect();
            let mut targets = Vec::with_capacity(spec.n);
            for x in &inputs {
                let y = forward(&teacher, sigma, x)?;
                targets.push(y.into_iter().map(|v| noisy(v, &mut rng)).collect());
            }
            Dataset::new(inputs, targets)?
        }
        SyntheticKind::TwoBump => {
            if shape.input_dim() != 1 || shape.output_dim() != 1 {
                return Err(CliError::Usage(
                    "two-bump data need a 1-D input and output".into(),
                ));
            }
            let mut data = two_stage_dataset(&Target::default(), spec.n, -3.0, 3.0);
            for y in &mut data.targets {
                y[0] = noisy(y[0], &mut rng);
            }
            data
        }
    };
    Ok(data)
}

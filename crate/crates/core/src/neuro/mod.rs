//! Evolvable multilayer perceptrons for the inverse map from a flattened
//! price surface to Heston parameters.

mod mlp;
mod stats;
mod variation;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use mlp::{
    batch_loss_and_gradient, evaluate_mse, fit, train_epochs, AdamState, EpochLoss, Layer,
    MlpGenome, Network,
};
pub use stats::{architecture_stats, sample_rows, ArchitectureStats, SampleRow, ARCH_STATS_HEADER, SAMPLES_HEADER};
pub use variation::{
    hybrid_crossover, mutate_architecture, mutate_weights, weight_crossover, ArchMutationKind,
    ADD_WIDTHS, MODIFY_WIDTHS,
};

#[derive(Debug, Error, PartialEq)]
pub enum NeuroError {
    #[error("input has length {got}, network expects {expected}")]
    InputShape { got: usize, expected: usize },
    #[error("malformed genome: {0}")]
    Genome(String),
    #[error("architectures differ")]
    ArchitectureMismatch,
    #[error("non-finite training loss")]
    NonFiniteLoss,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Activation {
    #[serde(rename = "ReLU")]
    Relu,
    Tanh,
    #[serde(rename = "LeakyReLU")]
    LeakyRelu,
    #[serde(rename = "ELU")]
    Elu,
}

impl Activation {
    pub const ALL: [Activation; 4] = [
        Activation::Relu,
        Activation::Tanh,
        Activation::LeakyRelu,
        Activation::Elu,
    ];

    pub const LEAKY_SLOPE: f64 = 0.01;

    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::LeakyRelu => {
                if z > 0.0 {
                    z
                } else {
                    Self::LEAKY_SLOPE * z
                }
            }
            Activation::Elu => {
                if z > 0.0 {
                    z
                } else {
                    z.exp_m1()
                }
            }
        }
    }

    /// Derivative at pre-activation `z` given the output `a = apply(z)`.
    #[inline]
    pub fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
            Activation::LeakyRelu => {
                if z > 0.0 {
                    1.0
                } else {
                    Self::LEAKY_SLOPE
                }
            }
            Activation::Elu => {
                if z > 0.0 {
                    1.0
                } else {
                    a + 1.0
                }
            }
        }
    }

    /// Tanh uses Xavier-uniform initialization, the ReLU family He-uniform.
    pub fn init_limit(self, fan_in: usize, fan_out: usize) -> f64 {
        match self {
            Activation::Tanh => (6.0 / (fan_in + fan_out) as f64).sqrt(),
            _ => (6.0 / fan_in as f64).sqrt(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "ReLU",
            Activation::Tanh => "Tanh",
            Activation::LeakyRelu => "LeakyReLU",
            Activation::Elu => "ELU",
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Activation::ALL
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown activation `{s}`"))
    }
}

/// Neuro-evolution and training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NeuroConfig {
    pub population_size: usize,
    pub survive_fraction: f64,
    pub weight_mut_prob: f64,
    pub weight_mut_std: f64,
    pub arch_mut_prob: f64,
    pub p_add: f64,
    pub p_remove: f64,
    pub p_modify: f64,
    pub p_activation: f64,
    pub epochs_per_gen: usize,
    /// Extra epochs on the newest elite increment each generation.
    pub feedback_epochs: usize,
    pub learning_rate: f64,
    /// Learning-rate multiplier applied after every epoch of a training call.
    pub lr_decay: f64,
    pub batch_size: usize,
    pub train_ratio: f64,
    pub initial_widths: Vec<usize>,
    pub initial_activation: Activation,
}

impl Default for NeuroConfig {
    fn default() -> Self {
        Self {
            population_size: 20,
            survive_fraction: 0.2,
            weight_mut_prob: 0.1,
            weight_mut_std: 0.02,
            arch_mut_prob: 0.05,
            p_add: 0.3,
            p_remove: 0.3,
            p_modify: 0.5,
            p_activation: 0.2,
            epochs_per_gen: 5,
            feedback_epochs: 2,
            learning_rate: 0.001,
            lr_decay: 0.9,
            batch_size: 64,
            train_ratio: 0.7,
            initial_widths: vec![128, 64],
            initial_activation: Activation::Relu,
        }
    }
}

impl NeuroConfig {
    pub fn validate(&self) -> Result<(), String> {
        let prob = |v: f64| (0.0..=1.0).contains(&v);
        if self.population_size < 1 {
            return Err("population_size must be positive".into());
        }
        if !(self.survive_fraction > 0.0 && self.survive_fraction <= 1.0) {
            return Err("survive_fraction must lie in (0, 1]".into());
        }
        if !prob(self.weight_mut_prob) || !prob(self.arch_mut_prob) || !prob(self.train_ratio) {
            return Err("probabilities must lie in [0, 1]".into());
        }
        let kinds = [self.p_add, self.p_remove, self.p_modify, self.p_activation];
        if kinds.iter().any(|p| *p < 0.0 || !p.is_finite()) || kinds.iter().sum::<f64>() <= 0.0 {
            return Err("architecture mutation weights must be non-negative, not all zero".into());
        }
        if self.batch_size == 0 || self.initial_widths.is_empty() || self.initial_widths.contains(&0) {
            return Err("batch size and initial widths must be positive".into());
        }
        if !(self.learning_rate > 0.0) || !(self.lr_decay > 0.0) || self.weight_mut_std < 0.0 {
            return Err("learning rate, decay and weight noise must be positive".into());
        }
        Ok(())
    }
}

/// Input and output scaling of the inverse networks.
///
/// Inputs are divided by the spot and standardized per feature with a frozen
/// shift and scale. Outputs live in the unit cube of the parameter box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationSpec {
    pub spot: f64,
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl NormalizationSpec {
    /// Per-feature scale floor, in units of the spot.
    pub const MIN_SCALE: f64 = 1e-2;

    pub fn identity(spot: f64, dim: usize) -> Self {
        Self {
            spot,
            shift: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    /// Mean and standard deviation of `surfaces / spot`, scale floored at
    /// [`Self::MIN_SCALE`].
    pub fn fit<'a>(spot: f64, surfaces: impl IntoIterator<Item = &'a [f64]>) -> Self {
        let rows: Vec<&[f64]> = surfaces.into_iter().collect();
        let dim = rows.first().map_or(0, |r| r.len());
        if rows.is_empty() {
            return Self::identity(spot, dim);
        }
        let n = rows.len() as f64;
        let mut shift = vec![0.0; dim];
        for r in &rows {
            for (s, x) in shift.iter_mut().zip(r.iter()) {
                *s += x / spot / n;
            }
        }
        let mut var = vec![0.0; dim];
        for r in &rows {
            for ((v, x), m) in var.iter_mut().zip(r.iter()).zip(&shift) {
                let d = x / spot - m;
                *v += d * d / n;
            }
        }
        let scale = var.iter().map(|v| v.sqrt().max(Self::MIN_SCALE)).collect();
        Self { spot, shift, scale }
    }

    pub fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(
            x.iter()
                .zip(self.shift.iter().zip(&self.scale))
                .map(|(v, (m, s))| (v / self.spot - m) / s),
        );
    }

    pub fn dim(&self) -> usize {
        self.shift.len()
    }
}

#[inline]
pub(crate) fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

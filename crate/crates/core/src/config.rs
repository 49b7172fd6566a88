//! Experiment configuration: a TOML file with one section per component,
//! every field defaulted.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::LbfgsConfig;
use crate::coevo::{CoevoConfig, InjectionConfig};
use crate::datasets::OverfitConfig;
use crate::ga::GaConfig;
use crate::market::MarketContext;
use crate::neuro::NeuroConfig;
use crate::params::{sample_uniform, HestonParams, ParamBox};
use crate::pricing::{Pricer, QuadratureSpec, SurfaceError, SurfaceGrid};
use crate::rng::{self, streams};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Grid(#[from] SurfaceError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub strikes: usize,
    pub maturities: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            strikes: 8,
            maturities: 5,
        }
    }
}

/// Market used for synthetic targets: fixed spot, a flat rate drawn per
/// scenario from `[0, max_rate]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub spot: f64,
    pub max_rate: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            spot: 100.0,
            max_rate: 0.10,
        }
    }
}

/// Experiment sizes for the multi-trial commands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSizes {
    pub trials: usize,
    /// Generation budget for time-to-threshold runs.
    pub ttt_max_generations: usize,
    /// Generations at which architecture snapshots are written.
    pub checkpoints: Vec<usize>,
    /// Genomes listed per checkpoint.
    pub samples_per_checkpoint: usize,
}

impl Default for ExperimentSizes {
    fn default() -> Self {
        Self {
            trials: 20,
            ttt_max_generations: 300,
            checkpoints: vec![20, 40, 60, 80, 100],
            samples_per_checkpoint: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub threads: usize,
    pub strict_quadrature: bool,
    pub grid: GridConfig,
    pub synthetic: SyntheticConfig,
    pub quadrature: QuadratureSpec,
    pub ga: GaConfig,
    pub nn: NeuroConfig,
    pub injection: InjectionConfig,
    pub lbfgs: LbfgsConfig,
    pub overfit: OverfitConfig,
    pub experiment: ExperimentSizes,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            threads: 0,
            strict_quadrature: false,
            grid: GridConfig::default(),
            synthetic: SyntheticConfig::default(),
            quadrature: QuadratureSpec::default(),
            ga: GaConfig::default(),
            nn: NeuroConfig::default(),
            injection: InjectionConfig::default(),
            lbfgs: LbfgsConfig::default(),
            overfit: OverfitConfig::default(),
            experiment: ExperimentSizes::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.coevo().validate().map_err(ConfigError::Invalid)?;
        self.lbfgs.validate().map_err(ConfigError::Invalid)?;
        self.quadrature
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.grid.strikes == 0 || self.grid.maturities == 0 {
            return Err(ConfigError::Invalid("grid must be at least 1x1".into()));
        }
        if !(self.synthetic.spot > 0.0) || !(self.synthetic.max_rate >= 0.0) {
            return Err(ConfigError::Invalid("spot must be positive, max_rate non-negative".into()));
        }
        Ok(())
    }

    pub fn coevo(&self) -> CoevoConfig {
        CoevoConfig {
            ga: self.ga,
            nn: self.nn.clone(),
            injection: self.injection,
        }
    }

    pub fn pricer(&self) -> Pricer {
        Pricer::new(self.quadrature).strict(self.strict_quadrature)
    }

    pub fn synthetic_grid(&self) -> Result<SurfaceGrid, ConfigError> {
        Ok(SurfaceGrid::synthetic(
            self.synthetic.spot,
            self.grid.strikes,
            self.grid.maturities,
        )?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Ground truth and market of synthetic trial `trial`: parameters uniform in
/// the box, flat rate uniform in `[0, max_rate]`.
pub fn synthetic_scenario(
    bounds: &ParamBox,
    synthetic: &SyntheticConfig,
    seed: u64,
    trial: u64,
) -> (HestonParams, MarketContext) {
    let mut r = rng::stream(rng::trial_seed(seed, trial), streams::TARGET);
    let truth = sample_uniform(bounds, 1, &mut r)[0];
    let rate = r.random::<f64>() * synthetic.max_rate;
    (truth, MarketContext::flat(synthetic.spot, rate))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = ExperimentConfig::from_toml_str("").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(c.ga.population_size, 50);
        assert_eq!(c.nn.population_size, 20);
        assert_eq!(c.injection.inject_fraction, 0.2);
    }

    #[test]
    fn sections_override_fields() {
        let c = ExperimentConfig::from_toml_str(
            "seed = 7\n[ga]\npopulation_size = 30\n[nn]\ninitial_activation = \"Tanh\"\n[grid]\nstrikes = 6\nmaturities = 4\n",
        )
        .unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.ga.population_size, 30);
        assert_eq!(c.ga.elite_fraction, 0.2);
        assert_eq!(c.nn.initial_activation, crate::neuro::Activation::Tanh);
        assert_eq!(c.synthetic_grid().unwrap().size(), 24);
    }

    #[test]
    fn malformed_and_invalid_configs_are_rejected() {
        assert!(matches!(
            ExperimentConfig::from_toml_str("[ga]\npopulation_size = \"many\""),
            Err(ConfigError::Parse(_))
        ));
        assert!(matches!(
            ExperimentConfig::from_toml_str("[ga]\nunknown_key = 1"),
            Err(ConfigError::Parse(_))
        ));
        assert!(matches!(
            ExperimentConfig::from_toml_str("[ga]\nelite_fraction = 1.5"),
            Err(ConfigError::Invalid(_))
        ));
    }

    #[test]
    fn scenarios_are_reproducible_and_in_range() {
        let b = ParamBox::standard();
        let s = SyntheticConfig::default();
        let (t1, c1) = synthetic_scenario(&b, &s, 3, 0);
        let (t2, c2) = synthetic_scenario(&b, &s, 3, 0);
        assert_eq!((t1, c1.rate(1.0)), (t2, c2.rate(1.0)));
        let (t3, _) = synthetic_scenario(&b, &s, 3, 1);
        assert_ne!(t1, t3);
        for trial in 0..50 {
            let (t, c) = synthetic_scenario(&b, &s, 9, trial);
            assert!(b.contains(&t));
            assert!((0.0..=0.10).contains(&c.rate(0.5)));
        }
    }
}

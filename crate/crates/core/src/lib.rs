//! Heston model calibration by co-evolution.
//!
//! A genetic algorithm searches the five-dimensional Heston parameter box
//! while a population of evolvable multilayer perceptrons learns the inverse
//! map from flattened price surfaces to parameters. Elite GA candidates
//! generate the networks' training data, and the best networks inject
//! parameter seeds back into the GA.
//!
//! The crate also carries the reference machinery used by the experiments:
//! a Fourier-inversion pricer with a Monte Carlo oracle, a plain-GA and
//! projected L-BFGS baseline, Latin hypercube datasets and file-based
//! option-chain ingestion.

// `!(x > 0.0)` style checks are used on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod coevo;
pub mod config;
pub mod datasets;
pub mod ga;
pub mod market;
pub mod neuro;
pub mod params;
pub mod pricing;
pub mod rng;

pub use baselines::{run_lbfgs, run_plain_ga, time_to_threshold, LbfgsConfig, LbfgsResult};
pub use coevo::{run_coevolution, CalibrationProblem, CoevoConfig, CoevoState, CoevoTelemetry, InjectionConfig};
pub use config::ExperimentConfig;
pub use datasets::DataPair;
pub use ga::{GaConfig, GaIndividual, GaPopulation, GaTelemetryRow};
pub use market::{MarketContext, RateCurve};
pub use neuro::{Activation, MlpGenome, NeuroConfig, NormalizationSpec};
pub use params::{HestonParams, ParamBox};
pub use pricing::{
    CalibrationTarget, PriceSurface, Pricer, PricingError, QuadratureSpec, SurfaceGrid,
};

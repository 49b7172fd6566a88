//! Training data for the inverse networks: space-filling LHS datasets, GA
//! elite histories, splitting, serialization and the overfitting
//! diagnostic that compares the two.

use std::io;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::run_plain_ga;
use crate::coevo::{run_coevolution, CalibrationProblem, CoevoConfig, CoevoError};
use crate::market::MarketContext;
use crate::neuro::{fit, EpochLoss, MlpGenome, Network, NeuroConfig, NeuroError, NormalizationSpec};
use crate::params::{lhs_point_in_cell, lhs_strata, HestonParams, ParamBox, DIM, NAMES};
use crate::pricing::{price_surface, Pricer, SurfaceGrid};
use crate::rng::{self, streams};

/// A flattened (row-major) model surface and the parameters that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataPair {
    pub surface: Vec<f64>,
    pub params: HestonParams,
}

/// Prices `params` on the grid, dropping those whose pricing fails.
pub fn price_pairs(
    params: &[HestonParams],
    ctx: &MarketContext,
    grid: &SurfaceGrid,
    pricer: &Pricer,
) -> Vec<Option<DataPair>> {
    params
        .par_iter()
        .map(|p| match price_surface(p, ctx, grid, pricer) {
            Ok(s) => Some(DataPair {
                surface: s.flatten().to_vec(),
                params: *p,
            }),
            Err(e) => {
                log::debug!("pricing {p} failed: {e}");
                None
            }
        })
        .collect()
}

/// `n` Latin hypercube draws priced on the grid. A draw whose pricing fails
/// is redrawn inside the same stratum cell, so stratification survives.
/// Returns the dataset and the number of redraws.
pub fn build_lhs_dataset<R: Rng + ?Sized>(
    bounds: &ParamBox,
    n: usize,
    ctx: &MarketContext,
    grid: &SurfaceGrid,
    pricer: &Pricer,
    rng: &mut R,
) -> (Vec<DataPair>, usize) {
    const MAX_REDRAWS: usize = 1000;
    let strata = lhs_strata(n, rng);
    let cells: Vec<[usize; DIM]> = (0..n)
        .map(|j| std::array::from_fn(|d| strata[d][j]))
        .collect();
    let draws: Vec<HestonParams> = cells
        .iter()
        .map(|c| lhs_point_in_cell(bounds, n, *c, rng))
        .collect();
    let priced = price_pairs(&draws, ctx, grid, pricer);
    let mut redraws = 0;
    let mut out = Vec::with_capacity(n);
    for (cell, pair) in cells.iter().zip(priced) {
        let mut pair = pair;
        while pair.is_none() {
            redraws += 1;
            assert!(redraws <= MAX_REDRAWS * n.max(1), "pricing fails across the box");
            let p = lhs_point_in_cell(bounds, n, *cell, rng);
            pair = price_pairs(&[p], ctx, grid, pricer).pop().flatten();
        }
        out.extend(pair);
    }
    if redraws > 0 {
        log::info!("LHS dataset: {redraws} redraws after pricing failures");
    }
    (out, redraws)
}

/// Concatenation of per-generation elite increments, duplicates retained.
pub fn build_ga_history_dataset(increments: &[Vec<DataPair>]) -> Vec<DataPair> {
    increments.iter().flatten().cloned().collect()
}

/// Shuffles and cuts at `ceil(ratio * n)`; returns `(train, validation)`.
pub fn split<T: Clone, R: Rng + ?Sized>(data: &[T], ratio: f64, rng: &mut R) -> (Vec<T>, Vec<T>) {
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(rng);
    let cut = ((ratio * data.len() as f64).ceil() as usize).min(data.len());
    if cut == data.len() && !data.is_empty() {
        log::debug!("split of {} items leaves no validation data", data.len());
    }
    let pick = |ix: &[usize]| ix.iter().map(|&i| data[i].clone()).collect::<Vec<T>>();
    (pick(&idx[..cut]), pick(&idx[cut..]))
}

/// Per-parameter standard deviation in unit-cube coordinates.
pub fn dispersion(pairs: &[DataPair], bounds: &ParamBox) -> [f64; DIM] {
    if pairs.is_empty() {
        return [f64::NAN; DIM];
    }
    let n = pairs.len() as f64;
    let units: Vec<[f64; DIM]> = pairs.iter().map(|p| bounds.to_unit(&p.params)).collect();
    std::array::from_fn(|d| {
        let mean = units.iter().map(|u| u[d]).sum::<f64>() / n;
        (units.iter().map(|u| (u[d] - mean).powi(2)).sum::<f64>() / n).sqrt()
    })
}

/// One row per pair: the five parameters followed by the surface.
pub fn write_dataset_csv<W: io::Write>(w: W, pairs: &[DataPair]) -> csv::Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let width = pairs.first().map_or(0, |p| p.surface.len());
    let mut header: Vec<String> = NAMES.iter().map(|s| s.to_string()).collect();
    header.extend((0..width).map(|i| format!("p{i}")));
    wr.write_record(&header)?;
    for p in pairs {
        let row = p
            .params
            .to_array()
            .into_iter()
            .chain(p.surface.iter().copied())
            .map(|v| v.to_string());
        wr.write_record(row)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_dataset_csv<R: io::Read>(r: R) -> csv::Result<Vec<DataPair>> {
    let mut rd = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for rec in rd.deserialize::<Vec<f64>>() {
        let row = rec?;
        out.push(DataPair {
            params: HestonParams::from_slice(&row[..DIM]),
            surface: row[DIM..].to_vec(),
        });
    }
    Ok(out)
}

/// Sidecar describing how a dataset file was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub strikes: Vec<f64>,
    pub maturities: Vec<f64>,
    pub lower: HestonParams,
    pub upper: HestonParams,
    pub seed: u64,
    pub mode: String,
    pub size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Lhs,
    GaHistory,
}

/// Whether the GA history comes from the coevolution loop with injection
/// (`Seeded`) or from a plain GA (`Unseeded`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedingMode {
    Seeded,
    Unseeded,
}

impl DataSource {
    pub fn name(self) -> &'static str {
        match self {
            DataSource::Lhs => "lhs",
            DataSource::GaHistory => "ga_history",
        }
    }
}

impl SeedingMode {
    pub fn name(self) -> &'static str {
        match self {
            SeedingMode::Seeded => "seeded",
            SeedingMode::Unseeded => "unseeded",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OverfitConfig {
    pub lhs_size: usize,
    pub test_bed_size: usize,
    /// Total training epochs for every network.
    pub epochs: usize,
    /// Generations of the run that produces the GA history.
    pub generations: usize,
    pub widths: Vec<usize>,
}

impl Default for OverfitConfig {
    fn default() -> Self {
        Self {
            lhs_size: 2000,
            test_bed_size: 200,
            epochs: 50,
            generations: 50,
            widths: vec![128, 64],
        }
    }
}

/// Learning curve and generalization figures of one trained network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverfitOutcome {
    pub mode: SeedingMode,
    pub source: DataSource,
    pub dataset_size: usize,
    pub curve: Vec<EpochLoss>,
    pub train_mse: f64,
    /// MSE on the held-out part of the network's own dataset.
    pub val_mse: f64,
    /// MSE on the common fresh-LHS test bed.
    pub held_out_mse: f64,
    pub dispersion: [f64; DIM],
}

impl OverfitOutcome {
    /// Held-out minus training MSE.
    pub fn gap(&self) -> f64 {
        self.held_out_mse - self.train_mse
    }

    /// In-distribution validation minus training MSE.
    pub fn split_gap(&self) -> f64 {
        self.val_mse - self.train_mse
    }
}

/// GA elite history for the overfitting study, produced by either the
/// coevolution loop or a plain GA on `problem`.
pub fn ga_history(
    problem: &CalibrationProblem,
    coevo: &CoevoConfig,
    mode: SeedingMode,
    generations: usize,
    seed: u64,
) -> Result<Vec<DataPair>, CoevoError> {
    match mode {
        SeedingMode::Seeded => {
            Ok(run_coevolution(problem, coevo, generations, seed)?.dataset)
        }
        SeedingMode::Unseeded => {
            let run = run_plain_ga(problem, &coevo.ga, generations, seed, true);
            Ok(build_ga_history_dataset(&run.history))
        }
    }
}

/// Common held-out test bed: fresh LHS surfaces drawn from the test-bed
/// stream of `seed`.
pub fn test_bed(problem: &CalibrationProblem, n: usize, seed: u64) -> Vec<DataPair> {
    let mut r = rng::stream(seed, streams::TEST_BED);
    build_lhs_dataset(&problem.bounds, n, &problem.ctx, &problem.grid, &problem.pricer, &mut r).0
}

/// A trained fixed-architecture network with its input normalization and
/// train/validation split.
#[derive(Debug, Clone)]
pub struct MatchedNetwork {
    pub genome: MlpGenome,
    pub norm: NormalizationSpec,
    pub curve: Vec<EpochLoss>,
    pub train: Vec<DataPair>,
    pub val: Vec<DataPair>,
}

impl MatchedNetwork {
    pub fn predict(&self, problem: &CalibrationProblem) -> Result<HestonParams, NeuroError> {
        self.genome.forward(&problem.input, &self.norm, &problem.bounds)
    }
}

/// Trains a `cfg.widths` ReLU network on `dataset` for `cfg.epochs` epochs.
/// Training runs in rounds of `nn.epochs_per_gen` epochs, the learning-rate
/// schedule restarting each round as it does inside the coevolution loop.
/// The initial weights depend only on `seed`, so networks trained on
/// different datasets start equal.
pub fn fit_matched_network(
    problem: &CalibrationProblem,
    nn: &NeuroConfig,
    cfg: &OverfitConfig,
    dataset: &[DataPair],
    seed: u64,
) -> Result<MatchedNetwork, NeuroError> {
    let mut split_rng = rng::stream(seed, streams::DATASET);
    let (train, val) = split(dataset, nn.train_ratio, &mut split_rng);
    let norm = NormalizationSpec::fit(problem.ctx.spot, train.iter().map(|p| p.surface.as_slice()));
    let genome = MlpGenome::random(
        problem.grid.size(),
        &cfg.widths,
        crate::neuro::Activation::Relu,
        &mut rng::stream(seed, streams::NETWORKS),
    );
    let mut net = Network::new(0, genome);
    let mut train_rng = rng::stream(seed, streams::TRAINING);
    let round = nn.epochs_per_gen.max(1);
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut done = 0;
    while done < cfg.epochs {
        let e = round.min(cfg.epochs - done);
        let part = fit(&mut net, &train, &val, e, nn, &norm, &problem.bounds, &mut train_rng)?;
        curve.extend(part.into_iter().map(|mut l| {
            l.epoch += done;
            l
        }));
        done += e;
    }
    Ok(MatchedNetwork {
        genome: net.genome,
        norm,
        curve,
        train,
        val,
    })
}

/// [`fit_matched_network`], evaluated on its own split and on `test_bed`.
#[allow(clippy::too_many_arguments)]
pub fn train_matched_network(
    problem: &CalibrationProblem,
    nn: &NeuroConfig,
    cfg: &OverfitConfig,
    dataset: &[DataPair],
    test_bed: &[DataPair],
    seed: u64,
    mode: SeedingMode,
    source: DataSource,
) -> Result<OverfitOutcome, NeuroError> {
    let m = fit_matched_network(problem, nn, cfg, dataset, seed)?;
    let eval = |d: &[DataPair]| crate::neuro::evaluate_mse(&m.genome, d, &m.norm, &problem.bounds);
    Ok(OverfitOutcome {
        mode,
        source,
        dataset_size: dataset.len(),
        train_mse: eval(&m.train),
        val_mse: eval(&m.val),
        held_out_mse: eval(test_bed),
        dispersion: dispersion(dataset, &problem.bounds),
        curve: m.curve,
    })
}

/// One cell of the seeding-mode by data-source study.
pub fn overfitting_experiment(
    problem: &CalibrationProblem,
    coevo: &CoevoConfig,
    cfg: &OverfitConfig,
    mode: SeedingMode,
    source: DataSource,
    seed: u64,
) -> Result<OverfitOutcome, CoevoError> {
    let bed = test_bed(problem, cfg.test_bed_size, seed);
    let dataset = match source {
        DataSource::Lhs => {
            let mut r = rng::stream(seed, streams::DATASET);
            build_lhs_dataset(&problem.bounds, cfg.lhs_size, &problem.ctx, &problem.grid, &problem.pricer, &mut r).0
        }
        DataSource::GaHistory => ga_history(problem, coevo, mode, cfg.generations, seed)?,
    };
    Ok(train_matched_network(problem, &coevo.nn, cfg, &dataset, &bed, seed, mode, source)?)
}

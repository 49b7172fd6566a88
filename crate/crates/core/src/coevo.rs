//! The coevolution loop: a GA over Heston parameters feeds its elite
//! surfaces to a population of inverse networks, which in turn propose
//! seeds for the GA.

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::{price_pairs, split, DataPair};
use crate::ga::{fraction_count, rank, GaConfig, GaPopulation, GaTelemetryRow};
use crate::market::{MarketContext, MarketTarget};
use crate::neuro::{
    architecture_stats, evaluate_mse, fit, hybrid_crossover, mutate_architecture, mutate_weights,
    weight_crossover, ArchitectureStats, EpochLoss, MlpGenome, Network, NeuroConfig, NeuroError,
    NormalizationSpec,
};
use crate::params::{clamp, HestonParams, ParamBox};
use crate::pricing::{price_surface, CalibrationTarget, Pricer, PricingError, SurfaceGrid};
use crate::rng::{self, streams, ExperimentRng};

#[derive(Debug, Error)]
pub enum CoevoError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Neuro(#[from] NeuroError),
    #[error(transparent)]
    Pricing(#[from] PricingError),
}

/// Everything the calibrators need about one target: the loss target, the
/// fixed-width network input on `grid`, the market and the search box.
#[derive(Debug, Clone)]
pub struct CalibrationProblem {
    pub target: CalibrationTarget,
    /// Flattened row-major surface on `grid`, fed to the networks.
    pub input: Vec<f64>,
    pub ctx: MarketContext,
    pub grid: SurfaceGrid,
    pub bounds: ParamBox,
    pub pricer: Pricer,
}

impl CalibrationProblem {
    /// Target surface generated by `truth` on `grid`.
    pub fn synthetic(
        truth: &HestonParams,
        ctx: MarketContext,
        grid: SurfaceGrid,
        bounds: ParamBox,
        pricer: Pricer,
    ) -> Result<Self, PricingError> {
        let surface = price_surface(truth, &ctx, &grid, &pricer)?;
        Ok(Self {
            target: CalibrationTarget::from_surface(&surface, &ctx),
            input: surface.flatten().to_vec(),
            ctx,
            grid,
            bounds,
            pricer,
        })
    }

    /// Scattered market cells for the loss, interpolated onto `grid` for the
    /// network input.
    pub fn from_market(market: &MarketTarget, grid: SurfaceGrid, bounds: ParamBox, pricer: Pricer) -> Self {
        Self {
            target: market.calibration_target(),
            input: market.interpolate_to_grid(&grid).flatten().to_vec(),
            ctx: market.ctx.clone(),
            grid,
            bounds,
            pricer,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InjectionConfig {
    pub inject_fraction: f64,
    /// Seed noise std as a fraction of each parameter's box range.
    pub inject_noise_std: f64,
}

impl Default for InjectionConfig {
    fn default() -> Self {
        Self {
            inject_fraction: 0.2,
            inject_noise_std: 0.01,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoevoConfig {
    pub ga: GaConfig,
    pub nn: NeuroConfig,
    pub injection: InjectionConfig,
}

impl CoevoConfig {
    pub fn validate(&self) -> Result<(), String> {
        self.ga.validate()?;
        self.nn.validate()?;
        let inj = &self.injection;
        if !(0.0..=1.0).contains(&inj.inject_fraction) || !(inj.inject_noise_std >= 0.0) {
            return Err("injection fraction must lie in [0, 1], noise must be non-negative".into());
        }
        Ok(())
    }
}

/// A network with its latest scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetRecord {
    pub net: Network,
    /// Unit-cube parameter MSE on the latest elite increment; NaN before the
    /// first non-empty increment.
    pub surrogate_mse: f64,
    /// Calibration loss of the network's prediction for the target.
    pub direct_score: f64,
    pub prediction: Option<HestonParams>,
}

impl NetRecord {
    fn fresh(net: Network) -> Self {
        Self {
            net,
            surrogate_mse: f64::NAN,
            direct_score: f64::INFINITY,
            prediction: None,
        }
    }
}

/// Network ranking: direct score, then surrogate MSE (NaN last), then
/// position.
pub fn rank_networks(nets: &[NetRecord]) -> Vec<usize> {
    let key = |v: f64| if v.is_nan() { f64::INFINITY } else { v };
    let mut idx: Vec<usize> = (0..nets.len()).collect();
    idx.sort_by(|&a, &b| {
        key(nets[a].direct_score)
            .total_cmp(&key(nets[b].direct_score))
            .then(key(nets[a].surrogate_mse).total_cmp(&key(nets[b].surrogate_mse)))
            .then(a.cmp(&b))
    });
    idx
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetScore {
    pub id: u64,
    pub surrogate_mse: f64,
    pub direct_score: f64,
}

/// Per-generation record of both populations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoevoTelemetry {
    pub generation: usize,
    /// GA population after the generation's reproduction step.
    pub ga: GaTelemetryRow,
    pub best_so_far_mse: f64,
    pub ga_population_size: usize,
    pub nn_population_size: usize,
    pub increment_size: usize,
    pub skipped_elites: usize,
    pub dataset_size: usize,
    pub injected: usize,
    /// Current GA elites among the replaced individuals; zero by construction.
    pub elites_displaced: usize,
    pub net_scores: Vec<NetScore>,
    pub curves: Vec<(u64, Vec<EpochLoss>)>,
    pub arch: ArchitectureStats,
}

/// Both populations, the cumulative elite dataset and telemetry.
#[derive(Debug, Clone)]
pub struct CoevoState {
    pub ga: GaPopulation,
    pub nets: Vec<NetRecord>,
    pub dataset: Vec<DataPair>,
    /// Parallel to `dataset`: whether the pair was assigned to training.
    pub in_train: Vec<bool>,
    pub increments: Vec<usize>,
    pub norm: Option<NormalizationSpec>,
    pub generation: usize,
    pub telemetry: Vec<CoevoTelemetry>,
    next_id: u64,
    ga_rng: ExperimentRng,
    net_rng: ExperimentRng,
    train_rng: ExperimentRng,
}

/// Prices the GA elites on the grid. Returns the increment and the number of
/// elites skipped after pricing failures.
pub fn build_elite_dataset(
    ga: &GaPopulation,
    elite_fraction: f64,
    ctx: &MarketContext,
    grid: &SurfaceGrid,
    pricer: &Pricer,
) -> (Vec<DataPair>, usize) {
    let elites: Vec<HestonParams> = crate::ga::select_elites(&ga.individuals, elite_fraction)
        .iter()
        .map(|e| e.params)
        .collect();
    let priced = price_pairs(&elites, ctx, grid, pricer);
    let skipped = priced.iter().filter(|p| p.is_none()).count();
    if skipped > 0 {
        log::warn!("{skipped} elite surfaces skipped after pricing failures");
    }
    (priced.into_iter().flatten().collect(), skipped)
}

/// Surrogate MSE on the increment (`None` when it is empty) and the direct
/// calibration score of the network's prediction.
pub fn score_network(
    genome: &MlpGenome,
    problem: &CalibrationProblem,
    increment: &[DataPair],
    norm: &NormalizationSpec,
) -> (Option<f64>, f64, Option<HestonParams>) {
    let surrogate = (!increment.is_empty()).then(|| evaluate_mse(genome, increment, norm, &problem.bounds));
    match genome.forward(&problem.input, norm, &problem.bounds) {
        Ok(p) => (surrogate, problem.target.loss(&p, &problem.pricer), Some(p)),
        Err(e) => {
            log::warn!("network forward failed: {e}");
            (surrogate, f64::INFINITY, None)
        }
    }
}

/// Replaces the `k` worst individuals with noisy copies of `predictions`
/// (cycled), clamped into the box. `k` never exceeds the number of
/// non-elites. Returns the number injected.
pub fn inject_seeds<R: Rng + ?Sized>(
    ga: &mut GaPopulation,
    predictions: &[HestonParams],
    cfg: &InjectionConfig,
    elite_fraction: f64,
    problem: &CalibrationProblem,
    rng: &mut R,
) -> usize {
    let n = ga.len();
    let elites = fraction_count(elite_fraction, n).max(1);
    let k = fraction_count(cfg.inject_fraction, n).min(n - elites);
    if k == 0 || predictions.is_empty() {
        return 0;
    }
    let ranges = problem.bounds.ranges();
    let seeds: Vec<HestonParams> = (0..k)
        .map(|i| {
            let mut v = predictions[i % predictions.len()].to_array();
            if cfg.inject_noise_std > 0.0 {
                for (x, r) in v.iter_mut().zip(ranges) {
                    let std = cfg.inject_noise_std * r;
                    if std > 0.0 {
                        *x += Normal::new(0.0, std).expect("finite std").sample(rng);
                    }
                }
            }
            clamp(&HestonParams::from_array(v), &problem.bounds)
        })
        .collect();
    let evaluated = crate::ga::evaluate_all(&seeds, &problem.target, &problem.pricer);
    let order = rank(&ga.individuals);
    for (slot, ind) in order[n - k..].iter().zip(evaluated) {
        ga.individuals[*slot] = ind;
    }
    k
}

impl CoevoState {
    /// Initial GA population and network population.
    pub fn new(problem: &CalibrationProblem, cfg: &CoevoConfig, seed: u64) -> Result<Self, CoevoError> {
        cfg.validate().map_err(CoevoError::Config)?;
        if problem.input.len() != problem.grid.size() {
            return Err(CoevoError::Neuro(NeuroError::InputShape {
                got: problem.input.len(),
                expected: problem.grid.size(),
            }));
        }
        let mut ga_rng = rng::stream(seed, streams::GA);
        let mut net_rng = rng::stream(seed, streams::NETWORKS);
        let ga = GaPopulation::initialize(&cfg.ga, &problem.bounds, &problem.target, &problem.pricer, &mut ga_rng);
        let nets = (0..cfg.nn.population_size)
            .map(|i| {
                let g = MlpGenome::random(
                    problem.grid.size(),
                    &cfg.nn.initial_widths,
                    cfg.nn.initial_activation,
                    &mut net_rng,
                );
                NetRecord::fresh(Network::new(i as u64, g))
            })
            .collect();
        Ok(Self {
            ga,
            nets,
            dataset: Vec::new(),
            in_train: Vec::new(),
            increments: Vec::new(),
            norm: None,
            generation: 0,
            telemetry: Vec::new(),
            next_id: cfg.nn.population_size as u64,
            ga_rng,
            net_rng,
            train_rng: rng::stream(seed, streams::TRAINING),
        })
    }

    pub fn best_so_far_mse(&self) -> f64 {
        self.telemetry
            .last()
            .map_or(self.ga.best().fitness, |t| t.best_so_far_mse)
    }

    /// Pairs of the cumulative dataset assigned to training / validation.
    pub fn train_val(&self) -> (Vec<DataPair>, Vec<DataPair>) {
        let mut tr = Vec::new();
        let mut va = Vec::new();
        for (p, t) in self.dataset.iter().zip(&self.in_train) {
            if *t {
                tr.push(p.clone());
            } else {
                va.push(p.clone());
            }
        }
        (tr, va)
    }

    /// One full generation: elite dataset, network training and scoring,
    /// network evolution, seed injection and the GA reproduction step.
    pub fn step(&mut self, problem: &CalibrationProblem, cfg: &CoevoConfig) {
        let prev_best = self.best_so_far_mse();

        // Elite increment, split on arrival.
        let (increment, skipped) = build_elite_dataset(
            &self.ga,
            cfg.ga.elite_fraction,
            &problem.ctx,
            &problem.grid,
            &problem.pricer,
        );
        let (inc_train, inc_val) = split(&increment, cfg.nn.train_ratio, &mut self.train_rng);
        for p in &inc_train {
            self.dataset.push(p.clone());
            self.in_train.push(true);
        }
        for p in &inc_val {
            self.dataset.push(p.clone());
            self.in_train.push(false);
        }
        self.increments.push(increment.len());
        if self.norm.is_none() && !inc_train.is_empty() {
            self.norm = Some(NormalizationSpec::fit(
                problem.ctx.spot,
                inc_train.iter().map(|p| p.surface.as_slice()),
            ));
        }
        let norm = self
            .norm
            .clone()
            .unwrap_or_else(|| NormalizationSpec::identity(problem.ctx.spot, problem.grid.size()));

        // Training and scoring, one independent generator per network.
        let (cum_train, cum_val) = self.train_val();
        let seeds: Vec<u64> = self.nets.iter().map(|_| self.train_rng.random()).collect();
        let nn = &cfg.nn;
        let curves: Vec<(u64, Vec<EpochLoss>)> = self
            .nets
            .par_iter_mut()
            .zip(seeds)
            .map(|(rec, s)| {
                let mut r = ExperimentRng::seed_from_u64(s);
                let trained = fit(&mut rec.net, &cum_train, &cum_val, nn.epochs_per_gen, nn, &norm, &problem.bounds, &mut r)
                    .and_then(|mut c| {
                        let fb = fit(&mut rec.net, &inc_train, &inc_val, nn.feedback_epochs, nn, &norm, &problem.bounds, &mut r)?;
                        c.extend(fb);
                        Ok(c)
                    });
                match trained {
                    Ok(curve) => {
                        let (sur, direct, pred) = score_network(&rec.net.genome, problem, &increment, &norm);
                        if let Some(s) = sur {
                            rec.surrogate_mse = s;
                        }
                        rec.direct_score = direct;
                        rec.prediction = pred;
                        (rec.net.id, curve)
                    }
                    Err(e) => {
                        log::warn!("network {} training aborted: {e}", rec.net.id);
                        rec.surrogate_mse = f64::INFINITY;
                        rec.direct_score = f64::INFINITY;
                        rec.prediction = None;
                        (rec.net.id, Vec::new())
                    }
                }
            })
            .collect();

        let order = rank_networks(&self.nets);
        let net_scores = self
            .nets
            .iter()
            .map(|r| NetScore {
                id: r.net.id,
                surrogate_mse: r.surrogate_mse,
                direct_score: r.direct_score,
            })
            .collect();
        let predictions: Vec<HestonParams> = order
            .iter()
            .filter_map(|&i| self.nets[i].prediction)
            .take(fraction_count(cfg.injection.inject_fraction, self.ga.len()))
            .collect();

        self.evolve_networks(&order, nn);

        // Injection never touches the current elites.
        let n = self.ga.len();
        let elite_set: Vec<usize> = rank(&self.ga.individuals)[..fraction_count(cfg.ga.elite_fraction, n).max(1)].to_vec();
        let elite_params: Vec<HestonParams> = elite_set.iter().map(|&i| self.ga.individuals[i].params).collect();
        let injected = inject_seeds(
            &mut self.ga,
            &predictions,
            &cfg.injection,
            cfg.ga.elite_fraction,
            problem,
            &mut self.net_rng,
        );
        let elites_displaced = elite_set
            .iter()
            .zip(&elite_params)
            .filter(|(&i, p)| self.ga.individuals[i].params != **p)
            .count();

        self.ga.step(&cfg.ga, &problem.bounds, &problem.target, &problem.pricer, &mut self.ga_rng);
        self.generation += 1;

        let ga_row = self.ga.telemetry();
        let arch = architecture_stats(self.nets.iter().map(|r| &r.net.genome));
        log::debug!(
            "generation {}: best mse {:.4e}, dataset {}, injected {}, avg nodes {:.1}",
            self.generation,
            ga_row.best_mse,
            self.dataset.len(),
            injected,
            arch.avg_nodes
        );
        self.telemetry.push(CoevoTelemetry {
            generation: self.generation,
            best_so_far_mse: prev_best.min(ga_row.best_mse),
            ga: ga_row,
            ga_population_size: self.ga.len(),
            nn_population_size: self.nets.len(),
            increment_size: increment.len(),
            skipped_elites: skipped,
            dataset_size: self.dataset.len(),
            injected,
            elites_displaced,
            net_scores,
            curves,
            arch,
        });
    }

    /// Top `ceil(eps * M)` networks survive with their scores; offspring of
    /// two uniformly drawn survivors fill the rest.
    fn evolve_networks(&mut self, order: &[usize], nn: &NeuroConfig) {
        let m = nn.population_size;
        let keep = fraction_count(nn.survive_fraction, m).max(1);
        let survivors: Vec<NetRecord> = order[..keep].iter().map(|&i| self.nets[i].clone()).collect();
        let mut next = survivors.clone();
        while next.len() < m {
            let a = &survivors[self.net_rng.random_range(0..keep)].net.genome;
            let b = &survivors[self.net_rng.random_range(0..keep)].net.genome;
            let child = match weight_crossover(a, b) {
                Ok(c) => c,
                Err(_) => hybrid_crossover(a, b, &mut self.net_rng),
            };
            let child = mutate_weights(&child, nn.weight_mut_prob, nn.weight_mut_std, &mut self.net_rng);
            let (child, _) = mutate_architecture(&child, nn, &mut self.net_rng);
            next.push(NetRecord::fresh(Network::new(self.next_id, child)));
            self.next_id += 1;
        }
        self.nets = next;
    }
}

/// Runs `generations` coevolution generations from a fresh state.
pub fn run_coevolution(
    problem: &CalibrationProblem,
    cfg: &CoevoConfig,
    generations: usize,
    seed: u64,
) -> Result<CoevoState, CoevoError> {
    let mut state = CoevoState::new(problem, cfg, seed)?;
    for _ in 0..generations {
        state.step(problem, cfg);
    }
    Ok(state)
}

/// Checks the per-generation invariants of a run: non-increasing best-so-far
/// and GA best, constant population sizes, no displaced elites, a growing
/// dataset.
pub fn validate_telemetry(rows: &[CoevoTelemetry]) -> Result<(), String> {
    for (i, r) in rows.iter().enumerate() {
        if r.generation != i + 1 {
            return Err(format!("row {i} has generation {}", r.generation));
        }
        if r.elites_displaced != 0 {
            return Err(format!("generation {}: {} elites displaced", r.generation, r.elites_displaced));
        }
        if r.best_so_far_mse > r.ga.best_mse {
            return Err(format!("generation {}: best-so-far above current best", r.generation));
        }
    }
    for w in rows.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        if b.best_so_far_mse > a.best_so_far_mse || b.ga.best_mse > a.ga.best_mse {
            return Err(format!("generation {}: best MSE increased", b.generation));
        }
        if a.ga_population_size != b.ga_population_size || a.nn_population_size != b.nn_population_size {
            return Err(format!("generation {}: population size changed", b.generation));
        }
        if b.dataset_size != a.dataset_size + b.increment_size {
            return Err(format!("generation {}: dataset did not grow by the increment", b.generation));
        }
    }
    Ok(())
}

//! Experiments behind each subcommand. The `*_study`/`*_trial` functions
//! return in-memory results; the `cmd_*` functions write them out.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use heston_coevo::baselines::{run_lbfgs_multistart, run_plain_ga, time_to_threshold, TttRecord};
use heston_coevo::coevo::{validate_telemetry, CalibrationProblem, CoevoState, CoevoTelemetry};
use heston_coevo::config::synthetic_scenario;
use heston_coevo::datasets::{
    build_lhs_dataset, fit_matched_network, ga_history, test_bed, train_matched_network, DataSource,
    OverfitOutcome, SeedingMode,
};
use heston_coevo::market::{
    assemble_target, load_chain, synthesize_chain, write_chain, LoadReport, MarketTarget, QuoteFilter,
};
use heston_coevo::neuro::{sample_rows, ArchitectureStats, SampleRow, ARCH_STATS_HEADER, SAMPLES_HEADER};
use heston_coevo::params::{HestonParams, ParamBox, DIM, NAMES};
use heston_coevo::pricing::{price_surface, SurfaceGrid};
use heston_coevo::rng::{self, streams};
use heston_coevo::{ExperimentConfig, MarketContext, RateCurve};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::output::{num, opt, Output};
use crate::{read_text, CliError, Command};

/// Parameters priced by `price` when no file is given.
pub const DEFAULT_PARAMS: HestonParams = HestonParams {
    kappa: 1.5,
    lambda: 0.08,
    sigma: 0.5,
    rho: -0.6,
    v0: 0.06,
};

/// Parameters behind the bundled chain.
pub const CHAIN_PARAMS: HestonParams = HestonParams {
    kappa: 2.0,
    lambda: 0.06,
    sigma: 0.5,
    rho: -0.7,
    v0: 0.04,
};

pub fn dispatch(cmd: &Command, cfg: &ExperimentConfig, bounds: &ParamBox, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let files = match cmd {
        Command::Price { params, rate } => {
            let p = match params {
                Some(path) => read_params(path)?,
                None => DEFAULT_PARAMS,
            };
            cmd_price(cfg, &p, *rate, out)?
        }
        Command::Convergence { trials } => cmd_convergence(cfg, bounds, *trials, out)?,
        Command::Ttt {
            trials,
            max_generations,
        } => cmd_ttt(
            cfg,
            bounds,
            trials.unwrap_or(cfg.experiment.trials),
            max_generations.unwrap_or(cfg.experiment.ttt_max_generations),
            out,
        )?,
        Command::Overfit { seeds } => cmd_overfit(cfg, bounds, *seeds, out)?,
        Command::Archstats { checkpoints } => {
            let cps = checkpoints.clone().unwrap_or_else(|| cfg.experiment.checkpoints.clone());
            cmd_archstats(cfg, bounds, &cps, out)?
        }
        Command::CalibrateReal {
            chain,
            spot,
            rates,
            truth,
            checkpoints,
        } => {
            let truth = truth.as_deref().map(read_params).transpose()?;
            let curve = match rates {
                Some(p) => RateCurve::load(p).with_context(|| format!("reading {}", p.display()))?,
                None => RateCurve::default(),
            };
            let cps = checkpoints.clone().unwrap_or_else(|| cfg.experiment.checkpoints.clone());
            cmd_calibrate_real(cfg, bounds, chain, *spot, &curve, truth, &cps, out)?
        }
        Command::SynthChain {
            params,
            spot,
            expiries,
            min_moneyness,
            max_moneyness,
            strikes,
            half_spread,
            strike_step,
            min_price,
        } => {
            let p = match params {
                Some(path) => read_params(path)?,
                None => CHAIN_PARAMS,
            };
            let grid = ChainGrid {
                expiries: expiries.clone(),
                min_moneyness: *min_moneyness,
                max_moneyness: *max_moneyness,
                strikes: *strikes,
                half_spread: *half_spread,
                strike_step: *strike_step,
                min_price: *min_price,
            };
            cmd_synth_chain(cfg, &p, *spot, &grid, out)?
        }
    };
    Ok(files)
}

/// Reads `kappa = ...` style TOML. A missing file is a run error, a
/// malformed one a usage error.
pub fn read_params(path: &Path) -> Result<HestonParams, CliError> {
    let text = read_text(path)?;
    toml::from_str::<HestonParams>(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn params_cells(p: &HestonParams) -> Vec<String> {
    p.to_array().iter().map(|&x| num(x)).collect()
}

fn header<'a>(fixed: &[&'a str], tail: &[&'a str]) -> Vec<&'a str> {
    fixed.iter().chain(tail).copied().collect()
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v: Vec<f64> = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    match v.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => v[n / 2],
        n => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

/// Synthetic calibration problem of trial `trial`.
pub fn synthetic_problem(cfg: &ExperimentConfig, bounds: &ParamBox, trial: u64) -> Result<(HestonParams, CalibrationProblem)> {
    let (truth, ctx) = synthetic_scenario(bounds, &cfg.synthetic, cfg.seed, trial);
    let problem = CalibrationProblem::synthetic(&truth, ctx, cfg.synthetic_grid()?, *bounds, cfg.pricer())?;
    Ok((truth, problem))
}

// ---------------------------------------------------------------- price

pub fn cmd_price(cfg: &ExperimentConfig, p: &HestonParams, rate: f64, out: &Path) -> Result<Vec<PathBuf>> {
    let grid = cfg.synthetic_grid()?;
    let ctx = MarketContext::flat(cfg.synthetic.spot, rate);
    let surface = price_surface(p, &ctx, &grid, &cfg.pricer())?;
    let mut o = Output::new(out, "price", json!({ "params": p, "rate": rate }), cfg)?;
    let mut buf = Vec::new();
    surface.write_csv(&mut buf)?;
    o.text("surface.csv", std::str::from_utf8(&buf)?)?;
    let mut js = surface.to_json()?;
    js.push('\n');
    o.text("surface.json", &js)?;
    Ok(o.into_written())
}

// ---------------------------------------------------------- convergence

/// Plain GA and coevolution on one synthetic target with equal budgets.
#[derive(Debug, Clone)]
pub struct ConvergenceTrial {
    pub trial: usize,
    pub truth: HestonParams,
    /// Best RMSE after each generation, from generation 1.
    pub plain_rmse: Vec<f64>,
    pub coevo_rmse: Vec<f64>,
    pub coevo: Vec<CoevoTelemetry>,
}

impl ConvergenceTrial {
    pub fn plain_final(&self) -> f64 {
        *self.plain_rmse.last().unwrap_or(&f64::NAN)
    }

    pub fn coevo_final(&self) -> f64 {
        *self.coevo_rmse.last().unwrap_or(&f64::NAN)
    }

    /// Generations each method needs to reach the plain GA's final RMSE;
    /// `None` when the budget ends first.
    pub fn reach(&self) -> (Option<usize>, Option<usize>) {
        let t = self.plain_final();
        (time_to_threshold(&self.plain_rmse, t), time_to_threshold(&self.coevo_rmse, t))
    }
}

pub fn convergence_trial(cfg: &ExperimentConfig, bounds: &ParamBox, trial: usize) -> Result<ConvergenceTrial> {
    let (truth, problem) = synthetic_problem(cfg, bounds, trial as u64)?;
    let seed = rng::trial_seed(cfg.seed, trial as u64);
    let g = cfg.ga.generations;
    let plain = run_plain_ga(&problem, &cfg.ga, g, seed, false);
    let coevo = heston_coevo::run_coevolution(&problem, &cfg.coevo(), g, seed)?;
    validate_telemetry(&coevo.telemetry).map_err(|e| anyhow!("trial {trial}: {e}"))?;
    Ok(ConvergenceTrial {
        trial,
        truth,
        plain_rmse: plain.telemetry.iter().map(|r| r.best_rmse).collect(),
        coevo_rmse: coevo.telemetry.iter().map(|t| t.ga.best_rmse).collect(),
        coevo: coevo.telemetry,
    })
}

pub fn convergence_study(cfg: &ExperimentConfig, bounds: &ParamBox, trials: usize) -> Result<Vec<ConvergenceTrial>> {
    (0..trials)
        .into_par_iter()
        .map(|t| convergence_trial(cfg, bounds, t))
        .collect()
}

pub fn cmd_convergence(cfg: &ExperimentConfig, bounds: &ParamBox, trials: usize, out: &Path) -> Result<Vec<PathBuf>> {
    let runs = convergence_study(cfg, bounds, trials)?;
    let mut o = Output::new(out, "convergence", json!({ "trials": trials }), cfg)?;

    let mut rows = Vec::new();
    for r in &runs {
        for (method, curve) in [("plain_ga", &r.plain_rmse), ("coevolution", &r.coevo_rmse)] {
            for (g, v) in curve.iter().enumerate() {
                rows.push(vec![r.trial.to_string(), method.into(), (g + 1).to_string(), num(*v)]);
            }
        }
    }
    o.csv("convergence.csv", &["trial", "method", "generation", "best_rmse"], rows)?;

    let mut fitness = Vec::new();
    let mut curves = Vec::new();
    let mut log = Vec::new();
    for r in &runs {
        for t in &r.coevo {
            for s in &t.net_scores {
                fitness.push(vec![
                    r.trial.to_string(),
                    t.generation.to_string(),
                    s.id.to_string(),
                    num(s.surrogate_mse),
                    num(s.direct_score),
                ]);
            }
            for (id, c) in &t.curves {
                for e in c {
                    curves.push(vec![
                        r.trial.to_string(),
                        t.generation.to_string(),
                        id.to_string(),
                        e.epoch.to_string(),
                        num(e.train_mse),
                        num(e.val_mse),
                    ]);
                }
            }
            log.push(vec![
                r.trial.to_string(),
                t.generation.to_string(),
                t.increment_size.to_string(),
                t.skipped_elites.to_string(),
                t.dataset_size.to_string(),
                t.injected.to_string(),
                t.elites_displaced.to_string(),
            ]);
        }
    }
    o.csv(
        "nn_fitness.csv",
        &["trial", "generation", "net_id", "surrogate_mse", "direct_score"],
        fitness,
    )?;
    o.csv(
        "learning_curves.csv",
        &["trial", "generation", "net_id", "epoch", "train_mse", "val_mse"],
        curves,
    )?;
    o.csv(
        "dataset_log.csv",
        &["trial", "generation", "increment_size", "skipped_elites", "dataset_size", "injected", "elites_displaced"],
        log,
    )?;
    let summary = runs.iter().map(|r| {
        let (p, c) = r.reach();
        vec![
            r.trial.to_string(),
            num(r.plain_final()),
            num(r.coevo_final()),
            opt(p),
            opt(c),
        ]
    });
    o.csv(
        "convergence_summary.csv",
        &["trial", "plain_final_rmse", "coevo_final_rmse", "plain_reach_generation", "coevo_reach_generation"],
        summary,
    )?;
    Ok(o.into_written())
}

// ------------------------------------------------------------------ ttt

/// L-BFGS reference, then coevolution until its best MSE matches the
/// reference or the budget runs out.
pub fn ttt_trial(cfg: &ExperimentConfig, bounds: &ParamBox, trial: usize, max_generations: usize) -> Result<TttRecord> {
    let (_, problem) = synthetic_problem(cfg, bounds, trial as u64)?;
    let seed = rng::trial_seed(cfg.seed, trial as u64);
    let reference = run_lbfgs_multistart(
        &problem.target,
        &problem.pricer,
        bounds,
        &cfg.lbfgs,
        &mut rng::stream(seed, streams::LBFGS),
    );
    let coevo = cfg.coevo();
    let mut state = CoevoState::new(&problem, &coevo, seed)?;
    let mut best = Vec::with_capacity(max_generations);
    while best.len() < max_generations {
        state.step(&problem, &coevo);
        best.push(state.best_so_far_mse());
        if *best.last().unwrap() <= reference.final_mse {
            break;
        }
    }
    Ok(TttRecord {
        trial,
        lbfgs_mse: reference.final_mse,
        lbfgs_start_mse: reference.start_mse,
        lbfgs_iters: reference.iters,
        generation: time_to_threshold(&best, reference.final_mse),
        max_generations,
    })
}

pub fn ttt_study(cfg: &ExperimentConfig, bounds: &ParamBox, trials: usize, max_generations: usize) -> Result<Vec<TttRecord>> {
    (0..trials)
        .into_par_iter()
        .map(|t| ttt_trial(cfg, bounds, t, max_generations))
        .collect()
}

pub fn cmd_ttt(
    cfg: &ExperimentConfig,
    bounds: &ParamBox,
    trials: usize,
    max_generations: usize,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    let recs = ttt_study(cfg, bounds, trials, max_generations)?;
    let mut o = Output::new(
        out,
        "ttt",
        json!({ "trials": trials, "max_generations": max_generations }),
        cfg,
    )?;
    let rows = recs.iter().map(|r| {
        vec![
            r.trial.to_string(),
            num(r.lbfgs_mse),
            r.lbfgs_iters.to_string(),
            opt(r.generation),
            r.generation.is_none().to_string(),
            num(r.lbfgs_start_mse),
            r.max_generations.to_string(),
        ]
    });
    o.csv(
        "ttt.csv",
        &["trial_id", "lbfgs_mse", "lbfgs_iters", "ttt_generation", "censored", "lbfgs_start_mse", "max_generations"],
        rows,
    )?;
    Ok(o.into_written())
}

// -------------------------------------------------------------- overfit

/// The four cells of the study for one seed. The LHS network does not
/// depend on the seeding mode and is trained once.
pub fn overfit_seed(cfg: &ExperimentConfig, bounds: &ParamBox, index: usize) -> Result<Vec<OverfitOutcome>> {
    let (_, problem) = synthetic_problem(cfg, bounds, index as u64)?;
    let seed = rng::trial_seed(cfg.seed, index as u64);
    let ov = &cfg.overfit;
    let bed = test_bed(&problem, ov.test_bed_size, seed);
    let (lhs, _) = build_lhs_dataset(
        bounds,
        ov.lhs_size,
        &problem.ctx,
        &problem.grid,
        &problem.pricer,
        &mut rng::stream(seed, streams::DATASET),
    );
    let lhs_out = train_matched_network(&problem, &cfg.nn, ov, &lhs, &bed, seed, SeedingMode::Seeded, DataSource::Lhs)?;
    let mut outcomes = Vec::with_capacity(4);
    for mode in [SeedingMode::Seeded, SeedingMode::Unseeded] {
        let history = ga_history(&problem, &cfg.coevo(), mode, ov.generations, seed)?;
        let ga = train_matched_network(&problem, &cfg.nn, ov, &history, &bed, seed, mode, DataSource::GaHistory)?;
        outcomes.push(ga);
        outcomes.push(OverfitOutcome {
            mode,
            ..lhs_out.clone()
        });
    }
    Ok(outcomes)
}

pub fn overfit_study(cfg: &ExperimentConfig, bounds: &ParamBox, seeds: usize) -> Result<Vec<Vec<OverfitOutcome>>> {
    (0..seeds)
        .into_par_iter()
        .map(|s| overfit_seed(cfg, bounds, s))
        .collect()
}

/// Median held-out MSE and gaps per (mode, source) cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OverfitMedians {
    pub mode: SeedingMode,
    pub source: DataSource,
    pub held_out_mse: f64,
    pub gap: f64,
    pub split_gap: f64,
}

pub fn overfit_medians(study: &[Vec<OverfitOutcome>]) -> Vec<OverfitMedians> {
    let mut res = Vec::new();
    for mode in [SeedingMode::Seeded, SeedingMode::Unseeded] {
        for source in [DataSource::GaHistory, DataSource::Lhs] {
            let cell: Vec<&OverfitOutcome> = study
                .iter()
                .flatten()
                .filter(|o| o.mode == mode && o.source == source)
                .collect();
            let m = |f: fn(&OverfitOutcome) -> f64| median(&cell.iter().map(|o| f(o)).collect::<Vec<_>>());
            res.push(OverfitMedians {
                mode,
                source,
                held_out_mse: m(|o| o.held_out_mse),
                gap: m(|o| o.gap()),
                split_gap: m(|o| o.split_gap()),
            });
        }
    }
    res
}

pub fn cmd_overfit(cfg: &ExperimentConfig, bounds: &ParamBox, seeds: usize, out: &Path) -> Result<Vec<PathBuf>> {
    let study = overfit_study(cfg, bounds, seeds)?;
    let mut o = Output::new(out, "overfit", json!({ "seeds": seeds }), cfg)?;
    let mut curves = Vec::new();
    let mut summary = Vec::new();
    for (s, cells) in study.iter().enumerate() {
        for c in cells {
            for e in &c.curve {
                curves.push(vec![
                    s.to_string(),
                    c.mode.name().into(),
                    c.source.name().into(),
                    e.epoch.to_string(),
                    num(e.train_mse),
                    num(e.val_mse),
                ]);
            }
            let mut row = vec![
                s.to_string(),
                c.mode.name().into(),
                c.source.name().into(),
                c.dataset_size.to_string(),
                num(c.train_mse),
                num(c.val_mse),
                num(c.held_out_mse),
                num(c.gap()),
                num(c.split_gap()),
            ];
            row.extend(c.dispersion.iter().map(|&d| num(d)));
            summary.push(row);
        }
    }
    o.csv(
        "learning_curves.csv",
        &["seed", "mode", "source", "epoch", "train_mse", "val_mse"],
        curves,
    )?;
    let disp: Vec<String> = NAMES.iter().map(|n| format!("dispersion_{n}")).collect();
    let disp: Vec<&str> = disp.iter().map(String::as_str).collect();
    o.csv(
        "overfit_summary.csv",
        &header(
            &["seed", "mode", "source", "dataset_size", "train_mse", "val_mse", "held_out_mse", "gap", "split_gap"],
            &disp,
        ),
        summary,
    )?;
    let med = overfit_medians(&study).into_iter().map(|m| {
        vec![
            m.mode.name().into(),
            m.source.name().into(),
            num(m.held_out_mse),
            num(m.gap),
            num(m.split_gap),
        ]
    });
    o.csv(
        "overfit_medians.csv",
        &["mode", "source", "median_held_out_mse", "median_gap", "median_split_gap"],
        med,
    )?;
    Ok(o.into_written())
}

// ------------------------------------------------------------ archstats

#[derive(Debug, Clone)]
pub struct ArchCheckpoint {
    pub generation: usize,
    pub stats: ArchitectureStats,
    pub samples: Vec<SampleRow>,
}

/// Coevolution on synthetic trial 0 with architecture snapshots after the
/// given generations.
pub fn archstats_run(cfg: &ExperimentConfig, bounds: &ParamBox, checkpoints: &[usize]) -> Result<(CoevoState, Vec<ArchCheckpoint>)> {
    let mut cps: Vec<usize> = checkpoints.iter().copied().filter(|&g| g > 0).collect();
    cps.sort_unstable();
    cps.dedup();
    let (_, problem) = synthetic_problem(cfg, bounds, 0)?;
    let coevo = cfg.coevo();
    let mut state = CoevoState::new(&problem, &coevo, rng::trial_seed(cfg.seed, 0))?;
    let mut pick = rng::stream(cfg.seed, streams::REPORTING);
    let mut snaps = Vec::with_capacity(cps.len());
    for &g in &cps {
        while state.generation < g {
            state.step(&problem, &coevo);
        }
        let nets: Vec<_> = state.nets.iter().map(|r| r.net.clone()).collect();
        let k = cfg.experiment.samples_per_checkpoint.min(nets.len());
        let mut idx = rand::seq::index::sample(&mut pick, nets.len(), k).into_vec();
        idx.sort_unstable();
        let chosen: Vec<_> = idx.iter().map(|&i| nets[i].clone()).collect();
        snaps.push(ArchCheckpoint {
            generation: g,
            stats: heston_coevo::neuro::architecture_stats(nets.iter().map(|n| &n.genome)),
            samples: sample_rows(&chosen),
        });
    }
    Ok((state, snaps))
}

pub fn cmd_archstats(cfg: &ExperimentConfig, bounds: &ParamBox, checkpoints: &[usize], out: &Path) -> Result<Vec<PathBuf>> {
    let (state, snaps) = archstats_run(cfg, bounds, checkpoints)?;
    let mut o = Output::new(out, "archstats", json!({ "checkpoints": checkpoints }), cfg)?;
    let mut table = format!("{ARCH_STATS_HEADER}\n");
    for s in &snaps {
        table.push_str(&s.stats.csv_row(s.generation));
        table.push('\n');
    }
    o.text("arch_stats.csv", &table)?;
    for s in &snaps {
        let mut t = format!("{SAMPLES_HEADER}\n");
        for r in &s.samples {
            t.push_str(&r.csv_row());
            t.push('\n');
        }
        o.text(&format!("samples_gen{}.csv", s.generation), &t)?;
    }
    let mut curves = Vec::new();
    for t in &state.telemetry {
        if !snaps.iter().any(|s| s.generation == t.generation) {
            continue;
        }
        for (id, c) in &t.curves {
            for e in c {
                curves.push(vec![
                    t.generation.to_string(),
                    id.to_string(),
                    e.epoch.to_string(),
                    num(e.train_mse),
                    num(e.val_mse),
                ]);
            }
        }
    }
    o.csv(
        "learning_curves.csv",
        &["generation", "net_id", "epoch", "train_mse", "val_mse"],
        curves,
    )?;
    Ok(o.into_written())
}

// ------------------------------------------------------- calibrate-real

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProgressRow {
    pub generation: usize,
    pub best_mse: f64,
    pub params: HestonParams,
    /// Relative errors against the supplied ground truth.
    pub rel_errors: Option<[f64; DIM]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SliceRow {
    pub strike: f64,
    pub log_moneyness: f64,
    pub market: f64,
    pub ga_history_model: f64,
    pub lhs_model: f64,
    pub ga_best_model: f64,
}

#[derive(Debug, Clone)]
pub struct RealCalibration {
    pub progress: Vec<ProgressRow>,
    pub ga_best: HestonParams,
    pub ga_history_net: HestonParams,
    pub lhs_net: HestonParams,
    pub slice_tau: f64,
    pub slice: Vec<SliceRow>,
    pub cells: usize,
}

/// Loads, filters and assembles a chain into a calibration target.
pub fn load_market(chain: &Path, spot: f64, curve: &RateCurve) -> Result<(MarketTarget, LoadReport, usize)> {
    let (quotes, report) = load_chain(chain, spot).with_context(|| format!("reading {}", chain.display()))?;
    let kept = QuoteFilter::default().apply(&quotes, spot);
    let dropped = quotes.len() - kept.len();
    let target = assemble_target(&kept, spot, curve)?;
    Ok((target, report, dropped))
}

/// Maturity with the most cells; the shortest on ties.
fn slice_maturity(market: &MarketTarget) -> f64 {
    let mut taus: Vec<f64> = market.cells.iter().map(|c| c.tau).collect();
    taus.sort_by(|a, b| a.total_cmp(b));
    taus.dedup();
    let count = |t: f64| market.cells.iter().filter(|c| c.tau == t).count();
    taus.iter()
        .copied()
        .fold((f64::NAN, 0), |(bt, bn), t| {
            let n = count(t);
            if n > bn { (t, n) } else { (bt, bn) }
        })
        .0
}

/// Network input grid for a chain: the synthetic strikes, maturities evenly
/// spaced over the quoted range.
pub fn market_grid(market: &MarketTarget, n_strikes: usize, n_maturities: usize) -> Result<SurfaceGrid> {
    let base = SurfaceGrid::synthetic(market.ctx.spot, n_strikes, n_maturities)?;
    let lo = market.cells.iter().map(|c| c.tau).fold(f64::INFINITY, f64::min);
    let hi = market.cells.iter().map(|c| c.tau).fold(f64::NEG_INFINITY, f64::max);
    let mats = match n_maturities {
        1 => vec![0.5 * (lo + hi)],
        n => (0..n).map(|j| lo + (hi - lo) * j as f64 / (n - 1) as f64).collect(),
    };
    Ok(SurfaceGrid::new(base.strikes().to_vec(), mats)?)
}

pub fn calibrate_real(
    cfg: &ExperimentConfig,
    bounds: &ParamBox,
    market: &MarketTarget,
    truth: Option<HestonParams>,
    checkpoints: &[usize],
) -> Result<RealCalibration> {
    let grid = market_grid(market, cfg.grid.strikes, cfg.grid.maturities)?;
    let problem = CalibrationProblem::from_market(market, grid, *bounds, cfg.pricer());
    let coevo = cfg.coevo();
    let mut cps: Vec<usize> = checkpoints.iter().copied().filter(|&g| g > 0).collect();
    cps.sort_unstable();
    cps.dedup();
    let mut state = CoevoState::new(&problem, &coevo, cfg.seed)?;
    let mut progress = Vec::with_capacity(cps.len());
    for &g in &cps {
        while state.generation < g {
            state.step(&problem, &coevo);
        }
        let best = state.ga.best();
        progress.push(ProgressRow {
            generation: g,
            best_mse: state.best_so_far_mse(),
            params: best.params,
            rel_errors: truth.map(|t| best.params.relative_errors(&t)),
        });
    }
    let ga_best = state.ga.best().params;

    let ov = &cfg.overfit;
    let history = fit_matched_network(&problem, &cfg.nn, ov, &state.dataset, cfg.seed)?;
    let (lhs, _) = build_lhs_dataset(
        bounds,
        ov.lhs_size,
        &problem.ctx,
        &problem.grid,
        &problem.pricer,
        &mut rng::stream(cfg.seed, streams::DATASET),
    );
    let lhs = fit_matched_network(&problem, &cfg.nn, ov, &lhs, cfg.seed)?;
    let ga_history_net = history.predict(&problem)?;
    let lhs_net = lhs.predict(&problem)?;

    let tau = slice_maturity(market);
    let cells: Vec<_> = market.cells.iter().filter(|c| c.tau == tau).collect();
    let strikes: Vec<f64> = cells.iter().map(|c| c.strike).collect();
    let rate = cells.first().map_or(0.0, |c| c.rate);
    let spot = market.ctx.spot;
    let model = |p: &HestonParams| problem.pricer.call_slice(p, spot, rate, tau, &strikes);
    let (h, l, b) = (model(&ga_history_net)?, model(&lhs_net)?, model(&ga_best)?);
    let slice = cells
        .iter()
        .enumerate()
        .map(|(i, c)| SliceRow {
            strike: c.strike,
            log_moneyness: (c.strike / spot).ln(),
            market: c.call_price,
            ga_history_model: h[i],
            lhs_model: l[i],
            ga_best_model: b[i],
        })
        .collect();
    Ok(RealCalibration {
        progress,
        ga_best,
        ga_history_net,
        lhs_net,
        slice_tau: tau,
        slice,
        cells: market.len(),
    })
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_calibrate_real(
    cfg: &ExperimentConfig,
    bounds: &ParamBox,
    chain: &Path,
    spot: f64,
    curve: &RateCurve,
    truth: Option<HestonParams>,
    checkpoints: &[usize],
    out: &Path,
) -> Result<Vec<PathBuf>> {
    let (market, report, filtered) = load_market(chain, spot, curve)?;
    log::info!("{} cells ({} rows read, {} outside the envelope)", market.len(), report.rows, filtered);
    let res = calibrate_real(cfg, bounds, &market, truth, checkpoints)?;
    let args = json!({
        "chain": chain,
        "spot": spot,
        "rate_curve": curve,
        "truth": truth,
        "checkpoints": checkpoints,
    });
    let mut o = Output::new(out, "calibrate-real", args, cfg)?;
    o.json(
        "target.json",
        &json!({ "load_report": report, "outside_envelope": filtered, "market": market }),
    )?;

    let err_cols: Vec<String> = NAMES.iter().map(|n| format!("{n}_rel_err_pct")).collect();
    let mut cols: Vec<&str> = vec!["generation", "loss"];
    cols.extend(NAMES.iter().copied());
    cols.extend(err_cols.iter().map(String::as_str));
    let rows = res.progress.iter().map(|r| {
        let mut row = vec![r.generation.to_string(), num(r.best_mse)];
        row.extend(params_cells(&r.params));
        match r.rel_errors {
            Some(e) => row.extend(e.iter().map(|x| num(100.0 * x))),
            None => row.extend(std::iter::repeat_n(String::new(), DIM)),
        }
        row
    });
    o.csv("progress.csv", &cols, rows)?;

    let rows = res.slice.iter().map(|r| {
        vec![
            num(r.strike),
            num(r.log_moneyness),
            num(r.market),
            num(r.ga_history_model),
            num(r.lhs_model),
            num(r.ga_best_model),
        ]
    });
    o.csv(
        "slice.csv",
        &["strike", "log_moneyness", "market", "ga_history_model", "lhs_model", "ga_best_model"],
        rows,
    )?;

    let mut cols = vec!["model"];
    cols.extend(NAMES.iter().copied());
    let rows = [
        ("ga_best", res.ga_best),
        ("ga_history_net", res.ga_history_net),
        ("lhs_net", res.lhs_net),
    ]
    .into_iter()
    .map(|(name, p)| {
        let mut row = vec![name.to_string()];
        row.extend(params_cells(&p));
        row
    });
    o.csv("estimates.csv", &cols, rows)?;
    Ok(o.into_written())
}

// ---------------------------------------------------------- synth-chain

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChainGrid {
    pub expiries: Vec<u32>,
    pub min_moneyness: f64,
    pub max_moneyness: f64,
    pub strikes: usize,
    pub half_spread: f64,
    pub strike_step: f64,
    pub min_price: f64,
}

impl ChainGrid {
    /// Strikes evenly spaced in log-moneyness, rounded to multiples of
    /// `strike_step` when it is positive.
    pub fn strikes(&self, spot: f64) -> Vec<f64> {
        let m: Vec<f64> = match self.strikes {
            0 => Vec::new(),
            1 => vec![self.min_moneyness],
            n => (0..n)
                .map(|i| self.min_moneyness + (self.max_moneyness - self.min_moneyness) * i as f64 / (n - 1) as f64)
                .collect(),
        };
        let mut k: Vec<f64> = m.iter().map(|x| spot * x.exp()).collect();
        if self.strike_step > 0.0 {
            for v in &mut k {
                *v = (*v / self.strike_step).round() * self.strike_step;
            }
            k.dedup();
        }
        k
    }
}

pub fn cmd_synth_chain(cfg: &ExperimentConfig, p: &HestonParams, spot: f64, grid: &ChainGrid, out: &Path) -> Result<Vec<PathBuf>> {
    let curve = RateCurve::default();
    let rows = synthesize_chain(
        p,
        spot,
        &curve,
        &grid.expiries,
        &grid.strikes(spot),
        grid.half_spread,
        &cfg.pricer(),
    )?;
    let rows: Vec<_> = rows.into_iter().filter(|(q, _, _)| q.mid_price >= grid.min_price).collect();
    let mut o = Output::new(out, "synth-chain", json!({ "params": p, "spot": spot, "grid": grid }), cfg)?;
    let mut buf = Vec::new();
    write_chain(&mut buf, &rows)?;
    o.text("chain.csv", std::str::from_utf8(&buf)?)?;
    o.csv(
        "rates.csv",
        &["weeks", "rate_percent"],
        curve.knots().iter().map(|(w, r)| vec![w.to_string(), r.to_string()]),
    )?;
    o.text("truth.toml", &toml::to_string(p)?)?;
    Ok(o.into_written())
}

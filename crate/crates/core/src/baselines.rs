//! Reference calibrators: a plain GA without network seeding and a
//! projected L-BFGS on finite-difference gradients.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::coevo::{build_elite_dataset, CalibrationProblem};
use crate::datasets::DataPair;
use crate::ga::{GaConfig, GaPopulation, GaTelemetryRow};
use crate::params::{HestonParams, ParamBox, DIM};
use crate::pricing::{CalibrationTarget, Pricer};
use crate::rng::{self, streams};

/// Result of a plain GA run.
#[derive(Debug, Clone, PartialEq)]
pub struct PlainGaRun {
    pub population: GaPopulation,
    /// One row per generation, numbered from 1.
    pub telemetry: Vec<GaTelemetryRow>,
    /// Elite surface increments per generation, when requested.
    pub history: Vec<Vec<DataPair>>,
}

/// The GA alone, drawing from the same stream as the GA inside the
/// coevolution loop so both start from the same population.
pub fn run_plain_ga(
    problem: &CalibrationProblem,
    cfg: &GaConfig,
    generations: usize,
    seed: u64,
    record_history: bool,
) -> PlainGaRun {
    let mut r = rng::stream(seed, streams::GA);
    let mut pop = GaPopulation::initialize(cfg, &problem.bounds, &problem.target, &problem.pricer, &mut r);
    let mut telemetry = Vec::with_capacity(generations);
    let mut history = Vec::new();
    for _ in 0..generations {
        if record_history {
            let (inc, _) = build_elite_dataset(&pop, cfg.elite_fraction, &problem.ctx, &problem.grid, &problem.pricer);
            history.push(inc);
        }
        pop.step(cfg, &problem.bounds, &problem.target, &problem.pricer, &mut r);
        telemetry.push(pop.telemetry());
    }
    PlainGaRun {
        population: pop,
        telemetry,
        history,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LbfgsConfig {
    pub max_iters: usize,
    pub memory: usize,
    /// Finite-difference step as a fraction of each parameter's range.
    pub fd_step: f64,
    pub c1: f64,
    pub c2: f64,
    pub grad_tol: f64,
    pub step_tol: f64,
    /// Number of starts: the box midpoint, then uniform draws.
    pub starts: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self {
            max_iters: 200,
            memory: 10,
            fd_step: 1e-5,
            c1: 1e-4,
            c2: 0.9,
            grad_tol: 1e-8,
            step_tol: 1e-10,
            starts: 1,
        }
    }
}

impl LbfgsConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.memory < 1 || self.starts < 1 {
            return Err("memory and starts must be at least 1".into());
        }
        if !(0.0 < self.c1 && self.c1 < self.c2 && self.c2 < 1.0) {
            return Err("need 0 < c1 < c2 < 1".into());
        }
        if !(self.fd_step > 0.0) {
            return Err("fd_step must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LbfgsResult {
    pub params: HestonParams,
    pub start_mse: f64,
    pub final_mse: f64,
    pub iters: usize,
    pub evaluations: usize,
}

/// Loss in unit-cube coordinates of the box.
struct UnitObjective<'a> {
    target: &'a CalibrationTarget,
    pricer: &'a Pricer,
    bounds: &'a ParamBox,
    evaluations: usize,
}

impl UnitObjective<'_> {
    fn value(&mut self, x: &[f64; DIM]) -> f64 {
        self.evaluations += 1;
        self.target.loss(&self.bounds.from_unit(x), self.pricer)
    }

    /// Central differences with step `h`, shortened to stay inside the cube.
    fn gradient(&mut self, x: &[f64; DIM], h: f64) -> [f64; DIM] {
        let mut g = [0.0; DIM];
        for i in 0..DIM {
            let (lo, hi) = ((x[i] - h).max(0.0), (x[i] + h).min(1.0));
            if hi <= lo {
                continue;
            }
            let mut a = *x;
            let mut b = *x;
            a[i] = lo;
            b[i] = hi;
            let d = self.value(&b) - self.value(&a);
            g[i] = if d.is_finite() { d / (hi - lo) } else { 0.0 };
        }
        g
    }
}

fn dot(a: &[f64; DIM], b: &[f64; DIM]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn project(x: &[f64; DIM]) -> [f64; DIM] {
    std::array::from_fn(|i| x[i].clamp(0.0, 1.0))
}

/// Gradient with components zeroed where a bound blocks descent.
fn projected_gradient(x: &[f64; DIM], g: &[f64; DIM]) -> [f64; DIM] {
    std::array::from_fn(|i| {
        if (x[i] <= 0.0 && g[i] > 0.0) || (x[i] >= 1.0 && g[i] < 0.0) {
            0.0
        } else {
            g[i]
        }
    })
}

/// Direction with components zeroed where a bound blocks movement.
fn feasible_direction(x: &[f64; DIM], d: &[f64; DIM]) -> [f64; DIM] {
    std::array::from_fn(|i| {
        if (x[i] <= 0.0 && d[i] < 0.0) || (x[i] >= 1.0 && d[i] > 0.0) {
            0.0
        } else {
            d[i]
        }
    })
}

/// Two-loop recursion for `-H g`.
fn direction(g: &[f64; DIM], memory: &VecDeque<([f64; DIM], [f64; DIM])>) -> [f64; DIM] {
    let mut q = *g;
    let mut alphas = Vec::with_capacity(memory.len());
    for (s, y) in memory.iter().rev() {
        let a = dot(s, &q) / dot(y, s);
        for i in 0..DIM {
            q[i] -= a * y[i];
        }
        alphas.push(a);
    }
    let gamma = memory.back().map_or(1.0, |(s, y)| dot(s, y) / dot(y, y));
    let mut r: [f64; DIM] = std::array::from_fn(|i| gamma * q[i]);
    for ((s, y), a) in memory.iter().zip(alphas.into_iter().rev()) {
        let b = dot(y, &r) / dot(y, s);
        for i in 0..DIM {
            r[i] += s[i] * (a - b);
        }
    }
    std::array::from_fn(|i| -r[i])
}

/// Projected L-BFGS in the unit cube of `bounds`. Steps come from the
/// two-loop recursion and a halving Armijo search; iterates are clamped to
/// the box and curvature pairs are stored only when they satisfy the weak
/// Wolfe condition.
pub fn run_lbfgs(
    target: &CalibrationTarget,
    pricer: &Pricer,
    start: &HestonParams,
    bounds: &ParamBox,
    cfg: &LbfgsConfig,
) -> LbfgsResult {
    const MAX_HALVINGS: usize = 60;
    let mut obj = UnitObjective {
        target,
        pricer,
        bounds,
        evaluations: 0,
    };
    let mut x = project(&bounds.to_unit(start));
    let mut f = obj.value(&x);
    let start_mse = f;
    let mut g = obj.gradient(&x, cfg.fd_step);
    let mut memory: VecDeque<([f64; DIM], [f64; DIM])> = VecDeque::new();
    let mut iters = 0;

    while iters < cfg.max_iters && f.is_finite() {
        let pg = projected_gradient(&x, &g);
        if dot(&pg, &pg).sqrt() < cfg.grad_tol {
            break;
        }
        let mut d = feasible_direction(&x, &direction(&pg, &memory));
        if dot(&d, &pg) >= 0.0 {
            memory.clear();
            d = pg.map(|v| -v);
        }
        if memory.is_empty() {
            let norm = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            d = d.map(|v| 0.1 * v / norm);
        }

        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let trial = project(&std::array::from_fn(|i| x[i] + alpha * d[i]));
            let ft = obj.value(&trial);
            let moved: [f64; DIM] = std::array::from_fn(|i| trial[i] - x[i]);
            if ft.is_finite() && ft <= f + cfg.c1 * dot(&pg, &moved).min(0.0) {
                accepted = Some((trial, ft));
                break;
            }
            alpha *= 0.5;
            if alpha * d.iter().fold(0.0f64, |m, v| m.max(v.abs())) < cfg.step_tol {
                break;
            }
        }
        iters += 1;
        let Some((xn, fnew)) = accepted else {
            break;
        };
        let gn = obj.gradient(&xn, cfg.fd_step);
        let s: [f64; DIM] = std::array::from_fn(|i| xn[i] - x[i]);
        let y: [f64; DIM] = std::array::from_fn(|i| gn[i] - g[i]);
        let step = dot(&s, &s).sqrt();
        if dot(&s, &y) > 1e-300 && dot(&gn, &s) >= cfg.c2 * dot(&g, &s) {
            memory.push_back((s, y));
            if memory.len() > cfg.memory {
                memory.pop_front();
            }
        }
        x = xn;
        f = fnew;
        g = gn;
        if step < cfg.step_tol {
            break;
        }
    }
    LbfgsResult {
        params: crate::params::clamp(&bounds.from_unit(&x), bounds),
        start_mse,
        final_mse: f,
        iters,
        evaluations: obj.evaluations,
    }
}

/// Best of `cfg.starts` runs: the midpoint first, then uniform draws.
pub fn run_lbfgs_multistart<R: Rng + ?Sized>(
    target: &CalibrationTarget,
    pricer: &Pricer,
    bounds: &ParamBox,
    cfg: &LbfgsConfig,
    rng: &mut R,
) -> LbfgsResult {
    let mut starts = vec![bounds.midpoint()];
    starts.extend(crate::params::sample_uniform(bounds, cfg.starts.saturating_sub(1), rng));
    starts
        .iter()
        .map(|s| run_lbfgs(target, pricer, s, bounds, cfg))
        .min_by(|a, b| a.final_mse.total_cmp(&b.final_mse))
        .expect("at least one start")
}

/// First 1-based generation whose best-so-far MSE is at most `reference`.
pub fn time_to_threshold(best_mse: &[f64], reference: f64) -> Option<usize> {
    let mut best = f64::INFINITY;
    for (g, &m) in best_mse.iter().enumerate() {
        best = best.min(m);
        if best <= reference {
            return Some(g + 1);
        }
    }
    None
}

/// Time-to-threshold record of one trial.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TttRecord {
    pub trial: usize,
    pub lbfgs_mse: f64,
    pub lbfgs_start_mse: f64,
    pub lbfgs_iters: usize,
    /// `None` when the threshold was not reached within the budget.
    pub generation: Option<usize>,
    pub max_generations: usize,
}

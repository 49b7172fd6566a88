//! Elitist real-valued genetic algorithm over the Heston parameter box.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::params::{self, clamp, feller_satisfied, HestonParams, ParamBox};
use crate::pricing::{CalibrationTarget, Pricer};

/// Population member with its calibration loss (MSE, `+inf` when pricing
/// failed).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaIndividual {
    pub params: HestonParams,
    pub fitness: f64,
    pub feller_flag: bool,
}

impl GaIndividual {
    pub fn evaluate(params: HestonParams, target: &CalibrationTarget, pricer: &Pricer) -> Self {
        Self {
            params,
            fitness: target.loss(&params, pricer),
            feller_flag: feller_satisfied(&params),
        }
    }

    pub fn rmse(&self) -> f64 {
        self.fitness.sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaConfig {
    pub population_size: usize,
    pub generations: usize,
    pub elite_fraction: f64,
    /// Per-component probability inside a fired mutation.
    pub mutation_prob_per_param: f64,
    pub crossover_prob: f64,
    /// Probability that the mutation operator fires on an offspring.
    pub mutation_prob: f64,
    /// Mutation standard deviation as a fraction of each component's range.
    pub mutation_scale: f64,
    /// Latin hypercube instead of uniform initialization.
    pub lhs_init: bool,
}

impl Default for GaConfig {
    fn default() -> Self {
        Self {
            population_size: 50,
            generations: 10,
            elite_fraction: 0.2,
            mutation_prob_per_param: 0.1,
            crossover_prob: 0.3,
            mutation_prob: 0.2,
            mutation_scale: 0.05,
            lhs_init: false,
        }
    }
}

impl GaConfig {
    pub fn validate(&self) -> Result<(), String> {
        let prob = |v: f64| (0.0..=1.0).contains(&v);
        if self.population_size < 2 {
            return Err("population_size must be at least 2".into());
        }
        if !(self.elite_fraction > 0.0 && self.elite_fraction < 1.0) {
            return Err("elite_fraction must lie in (0, 1)".into());
        }
        if !prob(self.mutation_prob_per_param) || !prob(self.crossover_prob) || !prob(self.mutation_prob) {
            return Err("probabilities must lie in [0, 1]".into());
        }
        if !(self.mutation_scale >= 0.0 && self.mutation_scale.is_finite()) {
            return Err("mutation_scale must be non-negative".into());
        }
        Ok(())
    }

    pub fn elite_count(&self) -> usize {
        fraction_count(self.elite_fraction, self.population_size)
    }
}

/// `ceil(fraction * n)`, immune to representation error in the product.
pub fn fraction_count(fraction: f64, n: usize) -> usize {
    let raw = fraction * n as f64;
    let rounded = raw.round();
    let c = if (raw - rounded).abs() < 1e-9 {
        rounded
    } else {
        raw.ceil()
    };
    (c.max(0.0) as usize).min(n)
}

/// Orders individuals by fitness, ties by position. Returns indices.
pub fn rank(pop: &[GaIndividual]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..pop.len()).collect();
    idx.sort_by(|&a, &b| pop[a].fitness.total_cmp(&pop[b].fitness).then(a.cmp(&b)));
    idx
}

/// The `ceil(eps * N)` fittest individuals, ascending by fitness.
pub fn select_elites(pop: &[GaIndividual], elite_fraction: f64) -> Vec<GaIndividual> {
    let k = fraction_count(elite_fraction, pop.len()).max(1);
    rank(pop).into_iter().take(k).map(|i| pop[i]).collect()
}

/// Arithmetic crossover, clamped into the box.
pub fn crossover(a: &HestonParams, b: &HestonParams, bounds: &ParamBox) -> HestonParams {
    let (x, y) = (a.to_array(), b.to_array());
    clamp(
        &HestonParams::from_array(std::array::from_fn(|i| 0.5 * (x[i] + y[i]))),
        bounds,
    )
}

/// Gaussian mutation: each component moves with probability
/// `per_param_prob` by noise of std `scale * range`; the result is clamped.
pub fn mutate<R: Rng + ?Sized>(
    p: &HestonParams,
    bounds: &ParamBox,
    per_param_prob: f64,
    scale: f64,
    rng: &mut R,
) -> HestonParams {
    let ranges = bounds.ranges();
    let mut v = p.to_array();
    for (i, x) in v.iter_mut().enumerate() {
        if rng.random::<f64>() < per_param_prob {
            let std = scale * ranges[i];
            if std > 0.0 {
                *x += Normal::new(0.0, std).expect("finite std").sample(rng);
            }
        }
    }
    clamp(&HestonParams::from_array(v), bounds)
}

/// Evaluates a batch of candidates in parallel, preserving order.
pub fn evaluate_all(
    candidates: &[HestonParams],
    target: &CalibrationTarget,
    pricer: &Pricer,
) -> Vec<GaIndividual> {
    candidates
        .par_iter()
        .map(|p| GaIndividual::evaluate(*p, target, pricer))
        .collect()
}

/// One row of per-generation convergence telemetry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaTelemetryRow {
    pub generation: usize,
    pub best_mse: f64,
    pub best_rmse: f64,
    pub mean_rmse: f64,
    pub best_params: HestonParams,
    pub feller_flag: bool,
}

pub const TELEMETRY_HEADER: [&str; 10] = [
    "generation",
    "best_mse",
    "best_rmse",
    "mean_rmse",
    "kappa",
    "lambda",
    "sigma",
    "rho",
    "v0",
    "feller_flag",
];

impl GaTelemetryRow {
    pub fn record(&self) -> Vec<String> {
        let mut r = vec![
            self.generation.to_string(),
            format!("{:e}", self.best_mse),
            format!("{:e}", self.best_rmse),
            format!("{:e}", self.mean_rmse),
        ];
        r.extend(self.best_params.to_array().iter().map(|v| format!("{v}")));
        r.push(self.feller_flag.to_string());
        r
    }
}

/// GA population with its generation counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaPopulation {
    pub individuals: Vec<GaIndividual>,
    pub generation: usize,
}

impl GaPopulation {
    /// Draws and evaluates the initial population.
    pub fn initialize<R: Rng + ?Sized>(
        cfg: &GaConfig,
        bounds: &ParamBox,
        target: &CalibrationTarget,
        pricer: &Pricer,
        rng: &mut R,
    ) -> Self {
        let candidates = if cfg.lhs_init {
            params::sample_lhs(bounds, cfg.population_size, rng)
        } else {
            params::sample_uniform(bounds, cfg.population_size, rng)
        };
        Self {
            individuals: evaluate_all(&candidates, target, pricer),
            generation: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.individuals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.individuals.is_empty()
    }

    pub fn best(&self) -> &GaIndividual {
        let i = rank(&self.individuals)[0];
        &self.individuals[i]
    }

    pub fn telemetry(&self) -> GaTelemetryRow {
        let best = *self.best();
        let finite: Vec<f64> = self
            .individuals
            .iter()
            .filter(|i| i.fitness.is_finite())
            .map(|i| i.rmse())
            .collect();
        let mean_rmse = if finite.is_empty() {
            f64::INFINITY
        } else {
            finite.iter().sum::<f64>() / finite.len() as f64
        };
        GaTelemetryRow {
            generation: self.generation,
            best_mse: best.fitness,
            best_rmse: best.rmse(),
            mean_rmse,
            best_params: best.params,
            feller_flag: best.feller_flag,
        }
    }

    /// Elites carried over unchanged; the remaining slots are children of
    /// two uniformly drawn elites (crossover with prob `p_x`, else a copy of
    /// the first), mutated with prob `p_m`.
    pub fn step<R: Rng + ?Sized>(
        &mut self,
        cfg: &GaConfig,
        bounds: &ParamBox,
        target: &CalibrationTarget,
        pricer: &Pricer,
        rng: &mut R,
    ) {
        let n = self.individuals.len();
        let elites = select_elites(&self.individuals, cfg.elite_fraction);
        let children: Vec<HestonParams> = (elites.len()..n)
            .map(|_| {
                let a = &elites[rng.random_range(0..elites.len())].params;
                let b = &elites[rng.random_range(0..elites.len())].params;
                let mut child = if rng.random::<f64>() < cfg.crossover_prob {
                    crossover(a, b, bounds)
                } else {
                    *a
                };
                if rng.random::<f64>() < cfg.mutation_prob {
                    child = mutate(
                        &child,
                        bounds,
                        cfg.mutation_prob_per_param,
                        cfg.mutation_scale,
                        rng,
                    );
                }
                child
            })
            .collect();
        let mut next = elites;
        next.extend(evaluate_all(&children, target, pricer));
        self.individuals = next;
        self.generation += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::MarketContext;
    use crate::pricing::{price_surface, SurfaceGrid};
    use crate::rng;

    fn ind(f: f64) -> GaIndividual {
        GaIndividual {
            params: HestonParams::new(1.0, 0.1, 0.3, -0.5, f.clamp(0.01, 1.0)),
            fitness: f,
            feller_flag: false,
        }
    }

    fn target() -> (CalibrationTarget, Pricer) {
        let pr = Pricer::default();
        let ctx = MarketContext::flat(100.0, 0.02);
        let grid = SurfaceGrid::synthetic(100.0, 4, 3).unwrap();
        let truth = HestonParams::new(1.5, 0.08, 0.5, -0.6, 0.06);
        let s = price_surface(&truth, &ctx, &grid, &pr).unwrap();
        (CalibrationTarget::from_surface(&s, &ctx), pr)
    }

    #[test]
    fn elite_counts() {
        let pop: Vec<_> = (0..50).map(|i| ind(i as f64)).collect();
        assert_eq!(select_elites(&pop, 0.2).len(), 10);
        assert_eq!(fraction_count(0.2, 20), 4);
        assert_eq!(fraction_count(0.34, 3), 2);
    }

    #[test]
    fn elites_tie_break_by_index() {
        let pop: Vec<_> = (0..10)
            .map(|i| GaIndividual {
                params: HestonParams::new(1.0 + i as f64, 0.1, 0.3, -0.5, 0.1),
                fitness: 1.0,
                feller_flag: false,
            })
            .collect();
        let e = select_elites(&pop, 0.2);
        assert_eq!(e[0].params.kappa, 1.0);
        assert_eq!(e[1].params.kappa, 2.0);
    }

    #[test]
    fn elites_sorted_smallest_first() {
        let pop = vec![ind(3.0), ind(1.0), ind(2.0)];
        let e = select_elites(&pop, 0.34);
        assert_eq!(e.iter().map(|i| i.fitness).collect::<Vec<_>>(), vec![1.0, 2.0]);
    }

    #[test]
    fn sentinels_are_never_elites_when_avoidable() {
        let mut pop: Vec<_> = (0..10).map(|_| ind(f64::INFINITY)).collect();
        pop[7].fitness = 0.5;
        pop[9].fitness = 0.1;
        let e = select_elites(&pop, 0.2);
        assert_eq!(e.iter().map(|i| i.fitness).collect::<Vec<_>>(), vec![0.1, 0.5]);
        let e = select_elites(&pop, 0.3);
        assert!(e[2].fitness.is_infinite());
    }

    #[test]
    fn crossover_examples() {
        let b = ParamBox::standard();
        let p = HestonParams::new(1.0, 0.2, 0.3, -0.5, 0.1);
        assert_eq!(crossover(&p, &p, &b), p);
        let q = HestonParams::new(3.0, 0.2, 0.3, -0.5, 0.1);
        assert_eq!(crossover(&p, &q, &b).kappa, 2.0);
    }

    #[test]
    fn mutation_gating() {
        let b = ParamBox::standard();
        let p = HestonParams::new(1.0, 0.2, 0.3, -0.5, 0.1);
        let mut r = rng::stream(1, 0);
        assert_eq!(mutate(&p, &b, 0.0, 0.05, &mut r), p);
        assert_eq!(mutate(&p, &b, 1.0, 0.0, &mut r), p);
    }

    #[test]
    fn mutation_std_matches_scale() {
        let b = ParamBox::standard();
        // Centre of the kappa range so clamping is negligible at 0.05 * range.
        let p = HestonParams::new(2.5025, 0.5, 0.55, -0.475, 0.5);
        let mut r = rng::stream(2, 0);
        let d: Vec<f64> = (0..10_000)
            .map(|_| mutate(&p, &b, 1.0, 0.05, &mut r).kappa - p.kappa)
            .collect();
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        let std = (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (d.len() - 1) as f64).sqrt();
        let nominal = 0.05 * 4.995;
        assert!((std - nominal).abs() < 0.05 * nominal, "{std} vs {nominal}");
    }

    #[test]
    fn step_preserves_size_elitism_and_feasibility() {
        let (t, pr) = target();
        let b = ParamBox::standard();
        let cfg = GaConfig {
            population_size: 20,
            ..GaConfig::default()
        };
        let mut r = rng::stream(3, 0);
        let mut pop = GaPopulation::initialize(&cfg, &b, &t, &pr, &mut r);
        let mut best = pop.best().fitness;
        for g in 1..=5 {
            pop.step(&cfg, &b, &t, &pr, &mut r);
            assert_eq!(pop.len(), 20);
            assert_eq!(pop.generation, g);
            assert!(pop.best().fitness <= best);
            best = pop.best().fitness;
            assert!(pop
                .individuals
                .iter()
                .all(|i| clamp(&i.params, &b) == i.params));
        }
    }

    #[test]
    fn no_variation_copies_elites() {
        let (t, pr) = target();
        let b = ParamBox::standard();
        let cfg = GaConfig {
            population_size: 10,
            crossover_prob: 0.0,
            mutation_prob: 0.0,
            ..GaConfig::default()
        };
        let mut r = rng::stream(4, 0);
        let mut pop = GaPopulation::initialize(&cfg, &b, &t, &pr, &mut r);
        let elites = select_elites(&pop.individuals, cfg.elite_fraction);
        pop.step(&cfg, &b, &t, &pr, &mut r);
        for i in &pop.individuals {
            assert!(elites.iter().any(|e| e.params == i.params));
        }
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let (t, pr) = target();
        let b = ParamBox::standard();
        let cfg = GaConfig {
            population_size: 12,
            ..GaConfig::default()
        };
        let run = || {
            let mut r = rng::stream(5, 0);
            let mut pop = GaPopulation::initialize(&cfg, &b, &t, &pr, &mut r);
            for _ in 0..3 {
                pop.step(&cfg, &b, &t, &pr, &mut r);
            }
            pop
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn loss_on_one_cell_is_squared_difference() {
        let pr = Pricer::default();
        let ctx = MarketContext::flat(100.0, 0.01);
        let grid = SurfaceGrid::new(vec![97.0], vec![0.3]).unwrap();
        let a = HestonParams::new(2.0, 0.05, 0.4, -0.3, 0.07);
        let b = HestonParams::new(0.7, 0.2, 0.8, -0.8, 0.02);
        let sb = price_surface(&b, &ctx, &grid, &pr).unwrap();
        let ca = pr.call_price(&a, &ctx, 0.3, 97.0).unwrap();
        let loss = crate::pricing::calibration_loss(&a, &sb, &ctx, &pr);
        let expected = (ca - sb.flatten()[0]).powi(2);
        assert!((loss - expected).abs() <= 1e-12 * expected.max(1.0));
    }
}

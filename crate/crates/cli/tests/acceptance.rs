//! Acceptance suite. Each test prints one `criterion N: PASS|FAIL` line with
//! the measured figures, then asserts. Run with `--nocapture` to see them.

use std::path::PathBuf;

use heston_coevo::coevo::{validate_telemetry, CalibrationProblem, CoevoState};
use heston_coevo::datasets::{DataPair, DataSource, SeedingMode};
use heston_coevo::neuro::{
    architecture_stats, batch_loss_and_gradient, fit, Activation, MlpGenome, Network, NeuroConfig,
    NormalizationSpec, ARCH_STATS_HEADER, SAMPLES_HEADER,
};
use heston_coevo::params::{sample_lhs, sample_uniform, DIM};
use heston_coevo::pricing::mc::{default_steps, mc_price_oracle, OptionKind};
use heston_coevo::pricing::{price_surface, put_from_call, CalibrationTarget};
use heston_coevo::rng;
use heston_coevo::{ExperimentConfig, HestonParams, MarketContext, ParamBox, Pricer, RateCurve, SurfaceGrid};
use heston_coevo_cli::commands::{
    calibrate_real, convergence_study, load_market, median, overfit_medians, overfit_study, read_params,
    ttt_study,
};
use rand::Rng;
use statrs::distribution::{ContinuousCDF, Normal};

fn report(n: u32, pass: bool, detail: &str) {
    println!("criterion {n}: {} {detail}", if pass { "PASS" } else { "FAIL" });
}

fn bs_call(spot: f64, strike: f64, rate: f64, tau: f64, vol: f64) -> f64 {
    let n = Normal::new(0.0, 1.0).unwrap();
    let sd = vol * tau.sqrt();
    let d1 = ((spot / strike).ln() + (rate + 0.5 * vol * vol) * tau) / sd;
    spot * n.cdf(d1) - strike * (-rate * tau).exp() * n.cdf(d1 - sd)
}

#[test]
fn criterion_01_pricer_matches_monte_carlo_and_black_scholes() {
    let b = ParamBox::standard();
    let pr = Pricer::default();
    let mut r = rng::stream(1001, 0);
    let sets = sample_uniform(&b, 100, &mut r);
    let mut within = 0;
    for (i, p) in sets.iter().enumerate() {
        let ctx = MarketContext::flat(100.0, r.random_range(0.0..0.05));
        let tau = if i % 2 == 0 { 0.25 } else { 0.5 };
        let k = r.random_range(90.0..110.0);
        let price = pr.call_price(p, &ctx, tau, k).unwrap();
        let (mc, se) = mc_price_oracle(
            p,
            &ctx,
            tau,
            k,
            OptionKind::Call,
            1_000_000,
            default_steps(tau),
            &mut rng::stream(2000 + i as u64, 0),
        );
        if (price - mc).abs() <= 3.0 * se {
            within += 1;
        }
    }

    let mut bs_err: f64 = 0.0;
    for (v, rate) in [(0.04, 0.0), (0.09, 0.03), (0.25, 0.05)] {
        let p = HestonParams::new(2.0, v, 1e-4, -0.5, v);
        let ctx = MarketContext::flat(100.0, rate);
        for tau in [0.1, 0.5, 2.0] {
            for k in [70.0, 90.0, 100.0, 115.0, 140.0] {
                let h = pr.call_price(&p, &ctx, tau, k).unwrap();
                bs_err = bs_err.max((h - bs_call(100.0, k, rate, tau, v.sqrt())).abs());
            }
        }
    }
    let pass = within >= 95 && bs_err <= 1e-4 * 100.0;
    report(1, pass, &format!("{within}/100 within 3 s.e. (need 95); max BS-limit error {bs_err:.2e} (tol 1e-2)"));
    assert!(pass);
}

#[test]
fn criterion_02_parity_monotonicity_convexity() {
    let pr = Pricer::default();
    let mut r = rng::stream(1002, 0);
    let sets = sample_uniform(&ParamBox::standard(), 20, &mut r);
    let strikes: Vec<f64> = (0..=200).map(|i| 50.0 + 0.5 * i as f64).collect();
    let (mut parity, mut mono, mut convex): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for p in &sets {
        for (tau, rate) in [(0.1, 0.01), (0.5, 0.03), (1.0, 0.05)] {
            let calls = pr.call_slice(p, 100.0, rate, tau, &strikes).unwrap();
            let ctx = MarketContext::flat(100.0, rate);
            for (&k, &c) in strikes.iter().zip(&calls).step_by(20) {
                let put = pr.put_price(p, &ctx, tau, k).unwrap();
                let via = put_from_call(c, 100.0, rate, tau, k);
                // C - P = S - K e^{-r tau}
                let resid = c - put - (100.0 - k * (-rate * tau).exp());
                parity = parity.max(resid.abs()).max((put - via).abs());
            }
            for w in calls.windows(2) {
                mono = mono.max(w[1] - w[0]);
            }
            for w in calls.windows(3) {
                convex = convex.max(-(w[0] - 2.0 * w[1] + w[2]));
            }
        }
    }
    let pass = parity <= 1e-10 && mono <= 1e-6 * 100.0 && convex <= 1e-6 * 100.0;
    report(
        2,
        pass,
        &format!("parity {parity:.2e} (tol 1e-10); max increase {mono:.2e}, max concavity {convex:.2e} (tol 1e-4)"),
    );
    assert!(pass);
}

#[test]
fn criterion_03_self_inversion() {
    let pr = Pricer::default();
    let ctx = MarketContext::flat(100.0, 0.03);
    let grid = SurfaceGrid::synthetic(100.0, 8, 5).unwrap();
    let mut r = rng::stream(1003, 0);
    let mut worst: f64 = 0.0;
    for p in sample_uniform(&ParamBox::standard(), 50, &mut r) {
        let s = price_surface(&p, &ctx, &grid, &pr).unwrap();
        worst = worst.max(CalibrationTarget::from_surface(&s, &ctx).loss(&p, &pr));
    }
    let pass = worst < 1e-12;
    report(3, pass, &format!("max self-loss {worst:.2e} over 50 sets (tol 1e-12)"));
    assert!(pass);
}

#[test]
fn criterion_04_coevolution_converges_faster_than_plain_ga() {
    let mut cfg = ExperimentConfig::default();
    cfg.ga.generations = 50;
    let runs = convergence_study(&cfg, &ParamBox::standard(), 10).unwrap();
    let g = cfg.ga.generations;
    let coevo_final: Vec<f64> = runs.iter().map(|r| r.coevo_final()).collect();
    let plain_final: Vec<f64> = runs.iter().map(|r| r.plain_final()).collect();
    // Runs that never reach the threshold count as one past the budget.
    let reach = |x: Option<usize>| x.unwrap_or(g + 1) as f64;
    let plain_reach: Vec<f64> = runs.iter().map(|r| reach(r.reach().0)).collect();
    let coevo_reach: Vec<f64> = runs.iter().map(|r| reach(r.reach().1)).collect();
    let (mc, mp) = (median(&coevo_final), median(&plain_final));
    let (rc, rp) = (median(&coevo_reach), median(&plain_reach));
    let pass = mc <= mp && rc < rp;
    report(
        4,
        pass,
        &format!(
            "median RMSE at gen {g}: coevo {mc:.4e} vs GA {mp:.4e}; median gens to GA final: coevo {rc} vs GA {rp}"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_05_time_to_threshold_records() {
    let cfg = ExperimentConfig::default();
    let max_g = 60;
    let recs = ttt_study(&cfg, &ParamBox::standard(), 5, max_g).unwrap();
    let valid = recs.iter().all(|r| {
        r.lbfgs_mse.is_finite()
            && r.lbfgs_mse <= r.lbfgs_start_mse
            && r.max_generations == max_g
            && r.generation.is_none_or(|g| (1..=max_g).contains(&g))
    });
    let summary: Vec<String> = recs
        .iter()
        .map(|r| r.generation.map_or("censored".into(), |g| g.to_string()))
        .collect();
    let pass = recs.len() == 5 && valid;
    report(5, pass, &format!("5 trials, TTT [{}] of {max_g}; L-BFGS final <= start in all", summary.join(", ")));
    assert!(pass);
}

#[test]
fn criterion_06_ga_history_overfits() {
    let cfg = ExperimentConfig::default();
    let study = overfit_study(&cfg, &ParamBox::standard(), 5).unwrap();
    let med = overfit_medians(&study);
    let get = |mode, source| *med.iter().find(|m| m.mode == mode && m.source == source).unwrap();
    let mut pass = true;
    let mut parts = Vec::new();
    for mode in [SeedingMode::Seeded, SeedingMode::Unseeded] {
        let ga = get(mode, DataSource::GaHistory);
        let lhs = get(mode, DataSource::Lhs);
        pass &= ga.held_out_mse > lhs.held_out_mse && ga.gap > lhs.gap;
        parts.push(format!(
            "{}: held-out {:.3e} vs {:.3e}, held-out gap {:.3e} vs {:.3e} (own-split gap {:.3e} vs {:.3e})",
            mode.name(),
            ga.held_out_mse,
            lhs.held_out_mse,
            ga.gap,
            lhs.gap,
            ga.split_gap,
            lhs.split_gap
        ));
    }
    report(6, pass, &format!("GA-history vs LHS medians over 5 seeds; {}", parts.join("; ")));
    assert!(pass);
}

#[test]
fn criterion_07_architecture_statistics() {
    let mut r = rng::stream(1007, 0);
    let homo: Vec<MlpGenome> = (0..20).map(|_| MlpGenome::random(40, &[128, 64], Activation::Relu, &mut r)).collect();
    let row = architecture_stats(&homo).csv_row(20);
    let two = [
        MlpGenome::random(40, &[32], Activation::Elu, &mut r),
        MlpGenome::random(40, &[64, 64], Activation::Tanh, &mut r),
    ];
    let s2 = architecture_stats(&two);
    let header_ok = ARCH_STATS_HEADER
        == "Generation,Avg layers,Avg nodes,Std nodes,Min nodes,Max nodes,Most common arch.,Frequency,Primary act.,Act. div."
        && SAMPLES_HEADER == "NN ID,Architecture,Num layers,Total nodes,Activation";
    let pass = header_ok
        && row == "20,2.00,192.0,0.0,192,192,\"[128,64]\",20/20,ReLU,1"
        && s2.avg_layers == 1.5
        && s2.avg_nodes == 80.0
        && s2.activation_diversity == 2;
    report(
        7,
        pass,
        &format!("headers match: {header_ok}; homogeneous row {row}; two-net avg layers {} nodes {} diversity {}", s2.avg_layers, s2.avg_nodes, s2.activation_diversity),
    );
    assert!(pass);
}

#[test]
fn criterion_08_elitism_and_injection_invariants() {
    let cfg = ExperimentConfig::default();
    let coevo = cfg.coevo();
    let mut ok = true;
    let mut failures = Vec::new();
    for trial in 0..2u64 {
        let (truth, ctx) = heston_coevo::config::synthetic_scenario(&ParamBox::standard(), &cfg.synthetic, cfg.seed, trial);
        let problem =
            CalibrationProblem::synthetic(&truth, ctx, cfg.synthetic_grid().unwrap(), ParamBox::standard(), cfg.pricer())
                .unwrap();
        let mut state = CoevoState::new(&problem, &coevo, rng::trial_seed(cfg.seed, trial)).unwrap();
        for _ in 0..20 {
            state.step(&problem, &coevo);
        }
        let t = &state.telemetry;
        let monotone = t.windows(2).all(|w| w[1].best_so_far_mse <= w[0].best_so_far_mse);
        let untouched = t.iter().all(|row| row.elites_displaced == 0);
        let sizes = t
            .iter()
            .all(|row| row.ga_population_size == cfg.ga.population_size && row.nn_population_size == cfg.nn.population_size);
        let injected = t.iter().map(|row| row.injected).sum::<usize>();
        if let Err(e) = validate_telemetry(t) {
            failures.push(e);
        }
        ok &= monotone && untouched && sizes && t.len() == 20;
        failures.push(format!("trial {trial}: monotone {monotone}, elites kept {untouched}, sizes {sizes}, {injected} injected"));
    }
    report(8, ok, &failures.join("; "));
    assert!(ok);
}

fn toy_pair(seed: u64, dim: usize) -> DataPair {
    let mut r = rng::stream(seed, 1);
    DataPair {
        surface: (0..dim).map(|_| r.random_range(1.0..30.0)).collect(),
        params: sample_uniform(&ParamBox::standard(), 1, &mut r)[0],
    }
}

#[test]
fn criterion_09_network_training() {
    // Finite-difference gradient check.
    let mut worst: f64 = 0.0;
    for (a, act) in Activation::ALL.into_iter().enumerate() {
        let mut r = rng::stream(1009, a as u64);
        let mut g = MlpGenome::random(4, &[6, 3], act, &mut r);
        for l in &mut g.layers {
            for b in &mut l.bias {
                *b = r.random_range(-0.3..0.3);
            }
        }
        let xs: Vec<Vec<f64>> = (0..5).map(|_| (0..4).map(|_| r.random_range(-1.5..1.5)).collect()).collect();
        let ts: Vec<[f64; DIM]> = (0..5).map(|_| std::array::from_fn(|_| r.random::<f64>())).collect();
        let xr: Vec<&[f64]> = xs.iter().map(|x| x.as_slice()).collect();
        let tr: Vec<&[f64; DIM]> = ts.iter().collect();
        let (_, grad) = batch_loss_and_gradient(&g, &xr, &tr);
        let theta = g.params_flat();
        let h = 1e-5;
        let mut probe = g.clone();
        let mut num = vec![0.0; theta.len()];
        for i in 0..theta.len() {
            let mut t = theta.clone();
            t[i] += h;
            probe.set_params_flat(&t);
            let up = batch_loss_and_gradient(&probe, &xr, &tr).0;
            t[i] -= 2.0 * h;
            probe.set_params_flat(&t);
            let down = batch_loss_and_gradient(&probe, &xr, &tr).0;
            num[i] = (up - down) / (2.0 * h);
        }
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = grad.iter().zip(&num).map(|(a, b)| a - b).collect();
        worst = worst.max(norm(&diff) / (norm(&grad) + norm(&num)));
    }

    // Single-pair memorization, constant learning rate.
    let b = ParamBox::standard();
    let data = vec![toy_pair(1, 12)];
    let mut r = rng::stream(1019, 0);
    let mut net = Network::new(0, MlpGenome::random(12, &[32, 16], Activation::Relu, &mut r));
    let cfg = NeuroConfig {
        learning_rate: 0.01,
        lr_decay: 1.0,
        ..NeuroConfig::default()
    };
    let norm = NormalizationSpec::identity(100.0, 12);
    let memo = fit(&mut net, &data, &[], 200, &cfg, &norm, &b, &mut r).unwrap().last().unwrap().train_mse;

    // Bit-identical curves across two runs.
    let data: Vec<DataPair> = (0..30).map(|i| toy_pair(40 + i, 10)).collect();
    let run = || {
        let mut r = rng::stream(1029, 0);
        let mut net = Network::new(0, MlpGenome::random(10, &[16, 8], Activation::Tanh, &mut r));
        let norm = NormalizationSpec::fit(100.0, data.iter().map(|p| p.surface.as_slice()));
        fit(&mut net, &data[..20], &data[20..], 10, &NeuroConfig::default(), &norm, &b, &mut r).unwrap()
    };
    let (c1, c2) = (run(), run());
    let same = c1
        .iter()
        .zip(&c2)
        .all(|(a, b)| a.train_mse.to_bits() == b.train_mse.to_bits() && a.val_mse.to_bits() == b.val_mse.to_bits());

    let pass = worst < 1e-4 && memo < 1e-4 && same;
    report(
        9,
        pass,
        &format!("gradient rel. error {worst:.2e} (tol 1e-4); memorized MSE {memo:.2e} (tol 1e-4); deterministic {same}"),
    );
    assert!(pass);
}

#[test]
fn criterion_10_lhs_stratification() {
    let b = ParamBox::standard();
    let mut exact = true;
    for n in [1usize, 10, 100, 1000] {
        let pts = sample_lhs(&b, n, &mut rng::stream(1010, n as u64));
        exact &= pts.len() == n;
        for d in 0..DIM {
            let mut hits = vec![0; n];
            for p in &pts {
                let u = b.to_unit(p)[d];
                hits[((u * n as f64) as usize).min(n - 1)] += 1;
            }
            exact &= hits.iter().all(|&h| h == 1);
        }
    }
    let a = sample_lhs(&b, 100, &mut rng::stream(7, 0));
    let c = sample_lhs(&b, 100, &mut rng::stream(7, 0));
    let pass = exact && a == c;
    report(10, pass, &format!("one point per stratum for n in {{1,10,100,1000}}: {exact}; deterministic: {}", a == c));
    assert!(pass);
}

fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data")
}

#[test]
fn criterion_11_real_surface_pipeline() {
    let dir = data_dir();
    let truth = read_params(&dir.join("truth.toml")).unwrap();
    let curve = RateCurve::load(&dir.join("rates.csv")).unwrap();
    let (market, _, _) = load_market(&dir.join("chain.csv"), 5000.0, &curve).unwrap();
    let mut errs: Vec<[f64; DIM]> = Vec::new();
    for seed in 1..=3u64 {
        let cfg = ExperimentConfig {
            seed,
            ..ExperimentConfig::default()
        };
        let res = calibrate_real(&cfg, &ParamBox::standard(), &market, Some(truth), &cfg.experiment.checkpoints).unwrap();
        errs.push(res.progress.last().unwrap().rel_errors.unwrap());
    }
    let med: [f64; DIM] = std::array::from_fn(|i| median(&errs.iter().map(|e| e[i]).collect::<Vec<_>>()));
    let [kappa, lambda, sigma, rho, v0] = med;
    let ordering = med.iter().all(|&e| kappa >= e);
    let pass = v0 <= 0.05 && rho <= 0.05 && kappa <= 0.25 && ordering;
    report(
        11,
        pass,
        &format!(
            "median relative errors at gen 100: kappa {:.1}% (tol 25%), lambda {:.1}%, sigma {:.1}%, rho {:.1}% (tol 5%), v0 {:.1}% (tol 5%); kappa largest: {ordering}",
            100.0 * kappa,
            100.0 * lambda,
            100.0 * sigma,
            100.0 * rho,
            100.0 * v0
        ),
    );
    assert!(pass);
}

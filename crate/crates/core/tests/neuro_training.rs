//! Network training checked against finite differences, memorization and
//! repeat runs.

use heston_coevo::datasets::DataPair;
use heston_coevo::neuro::{
    batch_loss_and_gradient, fit, train_epochs, Activation, MlpGenome, Network, NeuroConfig,
    NormalizationSpec,
};
use heston_coevo::params::{sample_uniform, ParamBox, DIM};
use heston_coevo::rng;
use rand::Rng;

fn toy_batch(input_dim: usize, n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<[f64; DIM]>) {
    let mut r = rng::stream(seed, 0);
    let xs = (0..n)
        .map(|_| (0..input_dim).map(|_| r.random_range(-1.5..1.5)).collect())
        .collect();
    let ts = (0..n)
        .map(|_| std::array::from_fn(|_| r.random::<f64>()))
        .collect();
    (xs, ts)
}

fn loss_at(genome: &MlpGenome, xs: &[&[f64]], ts: &[&[f64; DIM]]) -> f64 {
    batch_loss_and_gradient(genome, xs, ts).0
}

#[test]
fn gradient_matches_central_differences_for_every_activation() {
    for (k, act) in Activation::ALL.into_iter().enumerate() {
        for trial in 0..3u64 {
            let mut r = rng::stream(100 + trial, k as u64);
            let mut g = MlpGenome::random(4, &[5, 3], act, &mut r);
            // Non-zero biases so no unit sits exactly at a kink.
            for l in &mut g.layers {
                for b in &mut l.bias {
                    *b = r.random_range(-0.3..0.3);
                }
            }
            let (xs, ts) = toy_batch(4, 6, 200 + trial);
            let xr: Vec<&[f64]> = xs.iter().map(|x| x.as_slice()).collect();
            let tr: Vec<&[f64; DIM]> = ts.iter().collect();
            let (_, analytic) = batch_loss_and_gradient(&g, &xr, &tr);

            let theta = g.params_flat();
            let h = 1e-5;
            let mut numeric = vec![0.0; theta.len()];
            let mut probe = g.clone();
            for i in 0..theta.len() {
                let mut t = theta.clone();
                t[i] = theta[i] + h;
                probe.set_params_flat(&t);
                let up = loss_at(&probe, &xr, &tr);
                t[i] = theta[i] - h;
                probe.set_params_flat(&t);
                let down = loss_at(&probe, &xr, &tr);
                numeric[i] = (up - down) / (2.0 * h);
            }
            let diff: f64 = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let scale: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt()
                + numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
            let rel = diff / scale;
            assert!(rel < 1e-4, "{act}: relative error {rel}");
        }
    }
}

fn pair(seed: u64, dim: usize) -> DataPair {
    let mut r = rng::stream(seed, 1);
    DataPair {
        surface: (0..dim).map(|_| r.random_range(1.0..30.0)).collect(),
        params: sample_uniform(&ParamBox::standard(), 1, &mut r)[0],
    }
}

#[test]
fn single_pair_is_memorized() {
    let b = ParamBox::standard();
    let data = vec![pair(1, 12)];
    let norm = NormalizationSpec::identity(100.0, 12);
    let mut r = rng::stream(2, 0);
    let mut net = Network::new(0, MlpGenome::random(12, &[32, 16], Activation::Relu, &mut r));
    let cfg = NeuroConfig {
        learning_rate: 0.01,
        // Constant rate; under the 0.9 per-epoch decay the summed step
        // length over 200 epochs is only ten times the base rate.
        lr_decay: 1.0,
        ..NeuroConfig::default()
    };
    let curve = fit(&mut net, &data, &[], 200, &cfg, &norm, &b, &mut r).unwrap();
    assert_eq!(curve.len(), 200);
    let last = curve.last().unwrap();
    assert!(last.train_mse < 1e-4, "{}", last.train_mse);
    assert!(last.val_mse.is_nan());
}

#[test]
fn training_is_deterministic_under_seed() {
    let b = ParamBox::standard();
    let data: Vec<DataPair> = (0..40).map(|i| pair(10 + i, 20)).collect();
    let norm = NormalizationSpec::fit(100.0, data.iter().map(|p| p.surface.as_slice()));
    let run = || {
        let mut r = rng::stream(3, 0);
        let mut net = Network::new(0, MlpGenome::random(20, &[16, 8], Activation::Elu, &mut r));
        let cfg = NeuroConfig {
            batch_size: 8,
            ..NeuroConfig::default()
        };
        let curve = train_epochs(&mut net, &data, &cfg, &norm, &b, &mut r).unwrap();
        (curve, net)
    };
    let (c1, n1) = run();
    let (c2, n2) = run();
    assert_eq!(c1.len(), 5);
    for (a, b) in c1.iter().zip(&c2) {
        assert_eq!(a.train_mse.to_bits(), b.train_mse.to_bits());
        assert_eq!(a.val_mse.to_bits(), b.val_mse.to_bits());
    }
    assert_eq!(n1, n2);
}

#[test]
fn adam_state_persists_between_calls() {
    let b = ParamBox::standard();
    let data: Vec<DataPair> = (0..10).map(|i| pair(50 + i, 6)).collect();
    let norm = NormalizationSpec::identity(100.0, 6);
    let mut r = rng::stream(4, 0);
    let mut net = Network::new(0, MlpGenome::random(6, &[8], Activation::Tanh, &mut r));
    let cfg = NeuroConfig {
        batch_size: 5,
        ..NeuroConfig::default()
    };
    fit(&mut net, &data, &[], 3, &cfg, &norm, &b, &mut r).unwrap();
    assert_eq!(net.adam.step, 6);
    fit(&mut net, &data, &[], 2, &cfg, &norm, &b, &mut r).unwrap();
    assert_eq!(net.adam.step, 10);
}

#[test]
fn predictions_always_lie_in_the_box() {
    let b = ParamBox::standard();
    let mut r = rng::stream(5, 0);
    for i in 0..10_000 {
        let act = Activation::ALL[i % 4];
        let dim = 1 + i % 7;
        let mut g = MlpGenome::random(dim, &[1 + i % 9], act, &mut r);
        // Blow up some weights so outputs saturate.
        let scale = if i % 3 == 0 { 50.0 } else { 1.0 };
        let flat: Vec<f64> = g.params_flat().iter().map(|w| w * scale).collect();
        g.set_params_flat(&flat);
        let x: Vec<f64> = (0..dim).map(|_| r.random_range(-1e3..1e3)).collect();
        let p = g.forward(&x, &NormalizationSpec::identity(1.0, dim), &b).unwrap();
        assert!(b.contains(&p), "{p}");
    }
}

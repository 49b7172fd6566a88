use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{logistic, Activation, NeuroConfig, NeuroError, NormalizationSpec};
use crate::datasets::{split, DataPair};
use crate::params::{clamp, HestonParams, ParamBox, DIM};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Dense layer, weights stored `n_out x n_in` row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub n_in: usize,
    pub n_out: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Self {
            n_in,
            n_out,
            weights: vec![0.0; n_in * n_out],
            bias: vec![0.0; n_out],
        }
    }

    /// Uniform weights within the activation's initialization limit, zero
    /// biases.
    pub fn random<R: Rng + ?Sized>(n_in: usize, n_out: usize, act: Activation, rng: &mut R) -> Self {
        let lim = act.init_limit(n_in, n_out);
        Self {
            n_in,
            n_out,
            weights: (0..n_in * n_out).map(|_| rng.random_range(-lim..=lim)).collect(),
            bias: vec![0.0; n_out],
        }
    }

    #[inline]
    pub fn w(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.n_in + col]
    }

    fn affine(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.bias.iter().enumerate().map(|(o, b)| {
            let row = &self.weights[o * self.n_in..(o + 1) * self.n_in];
            b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
        }));
    }
}

/// Architecture `(depth, widths, activation)` plus weights. Layer `l` maps
/// `d_{l-1} -> d_l`; the last layer has five outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpGenome {
    pub input_dim: usize,
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub layers: Vec<Layer>,
}

impl MlpGenome {
    pub fn random<R: Rng + ?Sized>(
        input_dim: usize,
        widths: &[usize],
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let dims = chain_dims(input_dim, widths);
        let layers = dims
            .windows(2)
            .map(|w| Layer::random(w[0], w[1], activation, rng))
            .collect();
        Self {
            input_dim,
            widths: widths.to_vec(),
            activation,
            layers,
        }
    }

    pub fn zeros(input_dim: usize, widths: &[usize], activation: Activation) -> Self {
        let dims = chain_dims(input_dim, widths);
        Self {
            input_dim,
            widths: widths.to_vec(),
            activation,
            layers: dims.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect(),
        }
    }

    /// Number of hidden layers.
    pub fn depth(&self) -> usize {
        self.widths.len()
    }

    /// Sum of hidden widths.
    pub fn total_nodes(&self) -> usize {
        self.widths.iter().sum()
    }

    pub fn same_architecture(&self, other: &MlpGenome) -> bool {
        self.input_dim == other.input_dim
            && self.widths == other.widths
            && self.activation == other.activation
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Checks depth, widths, shape chaining and finiteness.
    pub fn validate(&self) -> Result<(), NeuroError> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(NeuroError::Genome(format!("widths {:?}", self.widths)));
        }
        let dims = chain_dims(self.input_dim, &self.widths);
        if self.layers.len() != dims.len() - 1 {
            return Err(NeuroError::Genome("layer count".into()));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.n_in != dims[l]
                || layer.n_out != dims[l + 1]
                || layer.weights.len() != layer.n_in * layer.n_out
                || layer.bias.len() != layer.n_out
            {
                return Err(NeuroError::Genome(format!("layer {l} shape")));
            }
            if !layer.weights.iter().chain(&layer.bias).all(|v| v.is_finite()) {
                return Err(NeuroError::Genome(format!("layer {l} not finite")));
            }
        }
        Ok(())
    }

    /// Unit-cube output for an already normalized input.
    pub fn forward_unit(&self, x: &[f64]) -> [f64; DIM] {
        let mut a = x.to_vec();
        let mut z = Vec::new();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            layer.affine(&a, &mut z);
            if l < last {
                a.clear();
                a.extend(z.iter().map(|&v| self.activation.apply(v)));
            }
        }
        std::array::from_fn(|i| logistic(z[i]))
    }

    /// Predicts parameters for a flattened surface: normalized input,
    /// hidden layers, logistic squashing into the unit cube, affine map into
    /// the box.
    pub fn forward(
        &self,
        surface_flat: &[f64],
        norm: &NormalizationSpec,
        bounds: &ParamBox,
    ) -> Result<HestonParams, NeuroError> {
        if surface_flat.len() != self.input_dim || norm.dim() != self.input_dim {
            return Err(NeuroError::InputShape {
                got: surface_flat.len(),
                expected: self.input_dim,
            });
        }
        let mut x = Vec::with_capacity(self.input_dim);
        norm.apply(surface_flat, &mut x);
        let u = self.forward_unit(&x);
        Ok(clamp(&bounds.from_unit(&u), bounds))
    }

    /// All weights and biases, layer by layer, weights before biases.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) {
        let mut off = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&flat[off..off + nw]);
            off += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[off..off + nb]);
            off += nb;
        }
    }
}

pub(crate) fn chain_dims(input_dim: usize, widths: &[usize]) -> Vec<usize> {
    let mut dims = Vec::with_capacity(widths.len() + 2);
    dims.push(input_dim);
    dims.extend_from_slice(widths);
    dims.push(DIM);
    dims
}

/// Adam first and second moments, shaped like the genome's parameters.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(n_params: usize) -> Self {
        Self {
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    fn update(&mut self, genome: &mut MlpGenome, grad: &[f64], lr: f64) {
        if self.m.len() != grad.len() {
            *self = Self::new(grad.len());
        }
        self.step += 1;
        let c1 = 1.0 - BETA1.powi(self.step as i32);
        let c2 = 1.0 - BETA2.powi(self.step as i32);
        let mut off = 0;
        for layer in &mut genome.layers {
            for p in layer.weights.iter_mut().chain(layer.bias.iter_mut()) {
                let g = grad[off];
                let m = &mut self.m[off];
                let v = &mut self.v[off];
                *m = BETA1 * *m + (1.0 - BETA1) * g;
                *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
                off += 1;
            }
        }
    }
}

/// A genome with its optimizer state and a population-unique id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub id: u64,
    pub genome: MlpGenome,
    pub adam: AdamState,
}

impl Network {
    pub fn new(id: u64, genome: MlpGenome) -> Self {
        let adam = AdamState::new(genome.n_params());
        Self { id, genome, adam }
    }
}

/// Mean squared unit-cube error of one batch and its gradient with respect
/// to [`MlpGenome::params_flat`].
pub fn batch_loss_and_gradient(
    genome: &MlpGenome,
    inputs: &[&[f64]],
    targets: &[&[f64; DIM]],
) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; genome.n_params()];
    let loss = accumulate(genome, inputs, targets, &mut grad);
    (loss, grad)
}

/// Forward and backward pass over a batch; writes the mean gradient into
/// `grad` and returns the mean loss.
fn accumulate(
    genome: &MlpGenome,
    inputs: &[&[f64]],
    targets: &[&[f64; DIM]],
    grad: &mut [f64],
) -> f64 {
    grad.iter_mut().for_each(|g| *g = 0.0);
    let n_layers = genome.layers.len();
    let offsets: Vec<usize> = genome
        .layers
        .iter()
        .scan(0usize, |off, l| {
            let start = *off;
            *off += l.weights.len() + l.bias.len();
            Some(start)
        })
        .collect();
    let denom = (inputs.len() * DIM) as f64;
    let act = genome.activation;
    let mut zs: Vec<Vec<f64>> = vec![Vec::new(); n_layers];
    let mut acts: Vec<Vec<f64>> = vec![Vec::new(); n_layers + 1];
    let mut delta = Vec::new();
    let mut prev_delta = Vec::new();
    let mut loss = 0.0;

    for (x, t) in inputs.iter().zip(targets) {
        acts[0].clear();
        acts[0].extend_from_slice(x);
        for l in 0..n_layers {
            let (head, tail) = acts.split_at_mut(l + 1);
            genome.layers[l].affine(&head[l], &mut zs[l]);
            let out = &mut tail[0];
            out.clear();
            if l + 1 < n_layers {
                out.extend(zs[l].iter().map(|&z| act.apply(z)));
            } else {
                out.extend(zs[l].iter().map(|&z| logistic(z)));
            }
        }
        let y = &acts[n_layers];
        delta.clear();
        for o in 0..DIM {
            let e = y[o] - t[o];
            loss += e * e;
            delta.push(2.0 * e * y[o] * (1.0 - y[o]) / denom);
        }
        for l in (0..n_layers).rev() {
            let layer = &genome.layers[l];
            let a_in = &acts[l];
            let off = offsets[l];
            let (gw, gb) = grad[off..off + layer.weights.len() + layer.bias.len()]
                .split_at_mut(layer.weights.len());
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &mut gw[o * layer.n_in..(o + 1) * layer.n_in];
                for (g, a) in row.iter_mut().zip(a_in) {
                    *g += d * a;
                }
                gb[o] += d;
            }
            if l > 0 {
                prev_delta.clear();
                prev_delta.resize(layer.n_in, 0.0);
                for (o, &d) in delta.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    let row = &layer.weights[o * layer.n_in..(o + 1) * layer.n_in];
                    for (pd, w) in prev_delta.iter_mut().zip(row) {
                        *pd += w * d;
                    }
                }
                for (i, pd) in prev_delta.iter_mut().enumerate() {
                    *pd *= act.derivative(zs[l - 1][i], acts[l][i]);
                }
                std::mem::swap(&mut delta, &mut prev_delta);
            }
        }
    }
    loss / denom
}

/// Per-epoch learning-curve point. `val_mse` is NaN without validation data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
}

struct Prepared {
    inputs: Vec<Vec<f64>>,
    targets: Vec<[f64; DIM]>,
}

fn prepare(pairs: &[DataPair], norm: &NormalizationSpec, bounds: &ParamBox) -> Prepared {
    let mut inputs = Vec::with_capacity(pairs.len());
    for p in pairs {
        let mut x = Vec::with_capacity(p.surface.len());
        norm.apply(&p.surface, &mut x);
        inputs.push(x);
    }
    Prepared {
        inputs,
        targets: pairs.iter().map(|p| bounds.to_unit(&p.params)).collect(),
    }
}

fn prepared_mse(genome: &MlpGenome, data: &Prepared) -> f64 {
    if data.inputs.is_empty() {
        return f64::NAN;
    }
    let total: f64 = data
        .inputs
        .iter()
        .zip(&data.targets)
        .map(|(x, t)| {
            let y = genome.forward_unit(x);
            (0..DIM).map(|i| (y[i] - t[i]).powi(2)).sum::<f64>()
        })
        .sum();
    total / (data.inputs.len() * DIM) as f64
}

/// Unit-cube parameter MSE of `genome` on `pairs`; NaN when empty.
pub fn evaluate_mse(
    genome: &MlpGenome,
    pairs: &[DataPair],
    norm: &NormalizationSpec,
    bounds: &ParamBox,
) -> f64 {
    prepared_mse(genome, &prepare(pairs, norm, bounds))
}

/// Adam on shuffled mini-batches for `epochs` epochs. The learning rate
/// starts at `cfg.learning_rate` and is multiplied by `cfg.lr_decay` after
/// every epoch; the network's Adam moments carry over between calls.
#[allow(clippy::too_many_arguments)]
pub fn fit<R: Rng + ?Sized>(
    net: &mut Network,
    train: &[DataPair],
    val: &[DataPair],
    epochs: usize,
    cfg: &NeuroConfig,
    norm: &NormalizationSpec,
    bounds: &ParamBox,
    rng: &mut R,
) -> Result<Vec<EpochLoss>, NeuroError> {
    if epochs == 0 || train.is_empty() {
        return Ok(Vec::new());
    }
    let tr = prepare(train, norm, bounds);
    let va = prepare(val, norm, bounds);
    let mut grad = vec![0.0; net.genome.n_params()];
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut lr = cfg.learning_rate;
    let mut curve = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let xs: Vec<&[f64]> = chunk.iter().map(|&i| tr.inputs[i].as_slice()).collect();
            let ts: Vec<&[f64; DIM]> = chunk.iter().map(|&i| &tr.targets[i]).collect();
            let loss = accumulate(&net.genome, &xs, &ts, &mut grad);
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(NeuroError::NonFiniteLoss);
            }
            net.adam.update(&mut net.genome, &grad, lr);
        }
        lr *= cfg.lr_decay;
        let train_mse = prepared_mse(&net.genome, &tr);
        if !train_mse.is_finite() {
            return Err(NeuroError::NonFiniteLoss);
        }
        curve.push(EpochLoss {
            epoch,
            train_mse,
            val_mse: prepared_mse(&net.genome, &va),
        });
    }
    Ok(curve)
}

/// Splits `dataset` by `cfg.train_ratio` and trains for
/// `cfg.epochs_per_gen` epochs, validating on the held-out part.
pub fn train_epochs<R: Rng + ?Sized>(
    net: &mut Network,
    dataset: &[DataPair],
    cfg: &NeuroConfig,
    norm: &NormalizationSpec,
    bounds: &ParamBox,
    rng: &mut R,
) -> Result<Vec<EpochLoss>, NeuroError> {
    let (train, val) = split(dataset, cfg.train_ratio, rng);
    fit(net, &train, &val, cfg.epochs_per_gen, cfg, norm, bounds, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn bounds() -> ParamBox {
        ParamBox::standard()
    }

    #[test]
    fn zero_network_predicts_box_midpoint() {
        let g = MlpGenome::zeros(6, &[4, 3], Activation::Relu);
        let p = g
            .forward(&[1.0; 6], &NormalizationSpec::identity(100.0, 6), &bounds())
            .unwrap();
        let mid = bounds().midpoint();
        for (a, b) in p.to_array().iter().zip(mid.to_array()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let g = MlpGenome::zeros(6, &[4], Activation::Tanh);
        let norm = NormalizationSpec::identity(100.0, 6);
        assert_eq!(
            g.forward(&[1.0; 5], &norm, &bounds()),
            Err(NeuroError::InputShape {
                got: 5,
                expected: 6
            })
        );
    }

    #[test]
    fn hand_computed_single_unit_network() {
        // 1 input -> 1 tanh unit -> 5 outputs.
        let mut g = MlpGenome::zeros(1, &[1], Activation::Tanh);
        g.layers[0].weights = vec![0.7];
        g.layers[0].bias = vec![-0.2];
        g.layers[1].weights = vec![1.0, -2.0, 0.5, 3.0, -0.25];
        g.layers[1].bias = vec![0.1, 0.0, -0.3, 0.2, 0.05];
        let x = 1.3;
        let norm = NormalizationSpec::identity(1.0, 1);
        let p = g.forward(&[x], &norm, &bounds()).unwrap();
        let h = (0.7 * x - 0.2f64).tanh();
        let lo = bounds().lower.to_array();
        let r = bounds().ranges();
        for i in 0..DIM {
            let z = g.layers[1].weights[i] * h + g.layers[1].bias[i];
            let expected = (lo[i] + r[i] / (1.0 + (-z).exp())).max(if i == 1 || i == 4 { 1e-6 } else { f64::MIN });
            assert!((p.to_array()[i] - expected).abs() < 1e-12, "output {i}");
        }
    }

    #[test]
    fn flat_params_round_trip() {
        let mut r = rng::stream(1, 0);
        let g = MlpGenome::random(4, &[3, 2], Activation::Elu, &mut r);
        let mut h = MlpGenome::zeros(4, &[3, 2], Activation::Elu);
        h.set_params_flat(&g.params_flat());
        assert_eq!(g, h);
        assert_eq!(g.n_params(), 4 * 3 + 3 + 3 * 2 + 2 + 2 * 5 + 5);
        g.validate().unwrap();
    }

    #[test]
    fn validate_catches_broken_chain() {
        let mut r = rng::stream(2, 0);
        let mut g = MlpGenome::random(4, &[3, 2], Activation::Relu, &mut r);
        g.layers[1] = Layer::zeros(4, 2);
        assert!(g.validate().is_err());
    }

    #[test]
    fn zero_epochs_leave_network_unchanged() {
        let mut r = rng::stream(3, 0);
        let g = MlpGenome::random(2, &[3], Activation::Relu, &mut r);
        let mut net = Network::new(0, g.clone());
        let data = vec![DataPair {
            surface: vec![1.0, 2.0],
            params: bounds().midpoint(),
        }];
        let cfg = NeuroConfig {
            epochs_per_gen: 0,
            ..NeuroConfig::default()
        };
        let curve = train_epochs(&mut net, &data, &cfg, &NormalizationSpec::identity(1.0, 2), &bounds(), &mut r).unwrap();
        assert!(curve.is_empty());
        assert_eq!(net.genome, g);
    }
}

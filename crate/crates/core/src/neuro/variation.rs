use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::mlp::{chain_dims, Layer, MlpGenome};
use super::{Activation, NeuroConfig, NeuroError};

/// Widths drawn for an inserted hidden layer.
pub const ADD_WIDTHS: [usize; 4] = [32, 64, 128, 256];
/// Widths drawn when resizing a hidden layer.
pub const MODIFY_WIDTHS: [usize; 6] = [16, 32, 64, 128, 256, 512];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ArchMutationKind {
    AddLayer,
    RemoveLayer,
    ModifyWidth,
    ChangeActivation,
}

impl ArchMutationKind {
    pub const ALL: [ArchMutationKind; 4] = [
        ArchMutationKind::AddLayer,
        ArchMutationKind::RemoveLayer,
        ArchMutationKind::ModifyWidth,
        ArchMutationKind::ChangeActivation,
    ];

    /// Draws a kind with the configured relative weights. Removal is redrawn
    /// when `can_remove` is false.
    pub fn sample<R: Rng + ?Sized>(cfg: &NeuroConfig, can_remove: bool, rng: &mut R) -> Self {
        let w = [cfg.p_add, cfg.p_remove, cfg.p_modify, cfg.p_activation];
        let total: f64 = w.iter().sum();
        loop {
            let mut u = rng.random::<f64>() * total;
            let mut kind = ArchMutationKind::ChangeActivation;
            for (k, wk) in Self::ALL.into_iter().zip(w) {
                if u < wk {
                    kind = k;
                    break;
                }
                u -= wk;
            }
            if kind != ArchMutationKind::RemoveLayer || can_remove {
                return kind;
            }
        }
    }
}

/// Element-wise mean of two genomes with identical architecture.
pub fn weight_crossover(a: &MlpGenome, b: &MlpGenome) -> Result<MlpGenome, NeuroError> {
    if !a.same_architecture(b) {
        return Err(NeuroError::ArchitectureMismatch);
    }
    let mut child = a.clone();
    for (lc, lb) in child.layers.iter_mut().zip(&b.layers) {
        for (x, y) in lc.weights.iter_mut().zip(&lb.weights) {
            *x = 0.5 * (*x + y);
        }
        for (x, y) in lc.bias.iter_mut().zip(&lb.bias) {
            *x = 0.5 * (*x + y);
        }
    }
    Ok(child)
}

/// Crossover across architectures. Depth is the larger parent depth, shared
/// layers take the floor mean width, extra layers copy the deeper parent.
/// Weights start fresh; hidden layers with the same index in both parents,
/// and the two output layers, then take the parents' mean on their
/// overlapping top-left block.
pub fn hybrid_crossover<R: Rng + ?Sized>(a: &MlpGenome, b: &MlpGenome, rng: &mut R) -> MlpGenome {
    let depth = a.depth().max(b.depth());
    let widths: Vec<usize> = (0..depth)
        .map(|l| match (a.widths.get(l), b.widths.get(l)) {
            (Some(x), Some(y)) => (x + y) / 2,
            (Some(x), None) | (None, Some(x)) => *x,
            (None, None) => unreachable!(),
        })
        .collect();
    let activation = if rng.random::<bool>() {
        a.activation
    } else {
        b.activation
    };
    let mut child = MlpGenome::random(a.input_dim, &widths, activation, rng);

    let shared = a.depth().min(b.depth());
    let mut pairs: Vec<(usize, usize, usize)> = (0..shared).map(|l| (l, l, l)).collect();
    pairs.push((depth, a.depth(), b.depth()));
    for (lc, la, lb) in pairs {
        let (pa, pb) = (&a.layers[la], &b.layers[lb]);
        let c = &mut child.layers[lc];
        let rows = c.n_out.min(pa.n_out).min(pb.n_out);
        let cols = c.n_in.min(pa.n_in).min(pb.n_in);
        for r in 0..rows {
            for k in 0..cols {
                c.weights[r * c.n_in + k] = 0.5 * (pa.w(r, k) + pb.w(r, k));
            }
            c.bias[r] = 0.5 * (pa.bias[r] + pb.bias[r]);
        }
    }
    child
}

/// Perturbs each weight and bias with probability `prob` by `N(0, std^2)`.
pub fn mutate_weights<R: Rng + ?Sized>(
    net: &MlpGenome,
    prob: f64,
    std: f64,
    rng: &mut R,
) -> MlpGenome {
    let mut out = net.clone();
    if prob <= 0.0 || std <= 0.0 {
        return out;
    }
    let noise = Normal::new(0.0, std).expect("finite std");
    for layer in &mut out.layers {
        for x in layer.weights.iter_mut().chain(layer.bias.iter_mut()) {
            if rng.random::<f64>() < prob {
                *x += noise.sample(rng);
            }
        }
    }
    out
}

/// With probability `cfg.arch_mut_prob` applies one structural mutation.
/// Returns the mutated genome and the kind that fired, if any; callers reset
/// optimizer state whenever a kind is returned.
pub fn mutate_architecture<R: Rng + ?Sized>(
    net: &MlpGenome,
    cfg: &NeuroConfig,
    rng: &mut R,
) -> (MlpGenome, Option<ArchMutationKind>) {
    if cfg.arch_mut_prob <= 0.0 || rng.random::<f64>() >= cfg.arch_mut_prob {
        return (net.clone(), None);
    }
    let kind = ArchMutationKind::sample(cfg, net.depth() > 1, rng);
    let out = match kind {
        ArchMutationKind::AddLayer => {
            let pos = rng.random_range(0..=net.depth());
            let h = ADD_WIDTHS[rng.random_range(0..ADD_WIDTHS.len())];
            add_layer(net, pos, h, rng)
        }
        ArchMutationKind::RemoveLayer => {
            let idx = rng.random_range(0..net.depth());
            remove_layer(net, idx, rng)
        }
        ArchMutationKind::ModifyWidth => {
            let idx = rng.random_range(0..net.depth());
            let h = MODIFY_WIDTHS[rng.random_range(0..MODIFY_WIDTHS.len())];
            resize_layer(net, idx, h, rng)
        }
        ArchMutationKind::ChangeActivation => {
            let others: Vec<Activation> = Activation::ALL
                .into_iter()
                .filter(|a| *a != net.activation)
                .collect();
            let mut g = net.clone();
            g.activation = others[rng.random_range(0..others.len())];
            g
        }
    };
    debug_assert!(out.validate().is_ok());
    (out, Some(kind))
}

/// Inserts a hidden layer of width `h` before hidden position `pos`. The new
/// layer and the one consuming its output are freshly initialized.
pub(crate) fn add_layer<R: Rng + ?Sized>(net: &MlpGenome, pos: usize, h: usize, rng: &mut R) -> MlpGenome {
    let mut widths = net.widths.clone();
    widths.insert(pos, h);
    let act = net.activation;
    let n_in = net.layers[pos].n_in;
    let n_out = net.layers[pos].n_out;
    let mut layers: Vec<Layer> = net.layers[..pos].to_vec();
    layers.push(Layer::random(n_in, h, act, rng));
    layers.push(Layer::random(h, n_out, act, rng));
    layers.extend_from_slice(&net.layers[pos + 1..]);
    MlpGenome {
        input_dim: net.input_dim,
        widths,
        activation: act,
        layers,
    }
}

/// Drops hidden layer `idx` and reconnects its neighbours with a fresh layer.
pub(crate) fn remove_layer<R: Rng + ?Sized>(net: &MlpGenome, idx: usize, rng: &mut R) -> MlpGenome {
    let mut widths = net.widths.clone();
    widths.remove(idx);
    let bridge = Layer::random(
        net.layers[idx].n_in,
        net.layers[idx + 1].n_out,
        net.activation,
        rng,
    );
    let mut layers: Vec<Layer> = net.layers[..idx].to_vec();
    layers.push(bridge);
    layers.extend_from_slice(&net.layers[idx + 2..]);
    MlpGenome {
        input_dim: net.input_dim,
        widths,
        activation: net.activation,
        layers,
    }
}

/// Resizes hidden layer `idx` to width `h`, keeping surviving rows and
/// columns and initializing new ones fresh.
pub(crate) fn resize_layer<R: Rng + ?Sized>(net: &MlpGenome, idx: usize, h: usize, rng: &mut R) -> MlpGenome {
    let mut widths = net.widths.clone();
    widths[idx] = h;
    let dims = chain_dims(net.input_dim, &widths);
    let mut layers = net.layers.clone();
    for l in [idx, idx + 1] {
        let old = &net.layers[l];
        let mut fresh = Layer::random(dims[l], dims[l + 1], net.activation, rng);
        let rows = fresh.n_out.min(old.n_out);
        let cols = fresh.n_in.min(old.n_in);
        for r in 0..rows {
            for c in 0..cols {
                fresh.weights[r * fresh.n_in + c] = old.w(r, c);
            }
            fresh.bias[r] = old.bias[r];
        }
        layers[l] = fresh;
    }
    MlpGenome {
        input_dim: net.input_dim,
        widths,
        activation: net.activation,
        layers,
    }
}

use std::collections::HashSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::mlp::{MlpGenome, Network};
use super::Activation;

pub const ARCH_STATS_HEADER: &str = "Generation,Avg layers,Avg nodes,Std nodes,Min nodes,Max nodes,Most common arch.,Frequency,Primary act.,Act. div.";
pub const SAMPLES_HEADER: &str = "NN ID,Architecture,Num layers,Total nodes,Activation";

/// Population summary of hidden-layer architectures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureStats {
    pub population: usize,
    pub avg_layers: f64,
    pub avg_nodes: f64,
    /// Population standard deviation of total hidden nodes.
    pub std_nodes: f64,
    pub min_nodes: usize,
    pub max_nodes: usize,
    pub most_common: Vec<usize>,
    pub frequency: usize,
    pub primary_activation: Activation,
    pub activation_diversity: usize,
}

pub(crate) fn format_widths(w: &[usize]) -> String {
    let inner: Vec<String> = w.iter().map(|x| x.to_string()).collect();
    format!("[{}]", inner.join(","))
}

impl ArchitectureStats {
    pub fn csv_row(&self, generation: usize) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "{},{:.2},{:.1},{:.1},{},{},\"{}\",{}/{},{},{}",
            generation,
            self.avg_layers,
            self.avg_nodes,
            self.std_nodes,
            self.min_nodes,
            self.max_nodes,
            format_widths(&self.most_common),
            self.frequency,
            self.population,
            self.primary_activation,
            self.activation_diversity
        );
        s
    }
}

/// Mode of `items`, ties broken by first occurrence.
fn mode<T: PartialEq + Clone>(items: &[T]) -> (T, usize) {
    let mut counts: Vec<(T, usize)> = Vec::new();
    for it in items {
        match counts.iter_mut().find(|(k, _)| k == it) {
            Some((_, c)) => *c += 1,
            None => counts.push((it.clone(), 1)),
        }
    }
    counts
        .into_iter()
        .fold(None::<(T, usize)>, |best, (k, c)| match best {
            Some((_, bc)) if bc >= c => best,
            _ => Some((k, c)),
        })
        .expect("non-empty population")
}

/// Summarizes a non-empty population.
///
/// # Panics
/// Panics on an empty population.
pub fn architecture_stats<'a>(pop: impl IntoIterator<Item = &'a MlpGenome>) -> ArchitectureStats {
    let pop: Vec<&MlpGenome> = pop.into_iter().collect();
    assert!(!pop.is_empty(), "empty population");
    let n = pop.len() as f64;
    let nodes: Vec<usize> = pop.iter().map(|g| g.total_nodes()).collect();
    let avg_nodes = nodes.iter().sum::<usize>() as f64 / n;
    let std_nodes = (nodes
        .iter()
        .map(|&x| (x as f64 - avg_nodes).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    let archs: Vec<Vec<usize>> = pop.iter().map(|g| g.widths.clone()).collect();
    let (most_common, frequency) = mode(&archs);
    let acts: Vec<Activation> = pop.iter().map(|g| g.activation).collect();
    let (primary_activation, _) = mode(&acts);
    let distinct: HashSet<Activation> = acts.iter().copied().collect();
    ArchitectureStats {
        population: pop.len(),
        avg_layers: pop.iter().map(|g| g.depth()).sum::<usize>() as f64 / n,
        avg_nodes,
        std_nodes,
        min_nodes: *nodes.iter().min().unwrap(),
        max_nodes: *nodes.iter().max().unwrap(),
        most_common,
        frequency,
        primary_activation,
        activation_diversity: distinct.len(),
    }
}

/// One row of the per-network architecture listing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub id: u64,
    pub widths: Vec<usize>,
    pub activation: Activation,
}

impl SampleRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},\"{}\",{},{},{}",
            self.id,
            format_widths(&self.widths),
            self.widths.len(),
            self.widths.iter().sum::<usize>(),
            self.activation
        )
    }
}

pub fn sample_rows(nets: &[Network]) -> Vec<SampleRow> {
    nets.iter()
        .map(|n| SampleRow {
            id: n.id,
            widths: n.genome.widths.clone(),
            activation: n.genome.activation,
        })
        .collect()
}

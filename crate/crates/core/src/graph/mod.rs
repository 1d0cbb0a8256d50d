//! Node-attributed graph model, class statistics and stratified splits.

mod io;
mod synthetic;

pub use io::{
    assemble, graph_from_text, load_graph, load_graph_with_classes, parse_edges, parse_features,
    parse_labels, write_edges, write_features, write_labels, EdgeRecord, FeatureTable, LabelTable,
};
pub use synthetic::{
    class_sizes, generate_synthetic, generate_synthetic_with_degree, SyntheticSpec, IR_TOLERANCE,
};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{stream_rng, Matrix};

const SPLIT_STREAM: u64 = 0x53_50_4c_49_54;

/// Which of the three node subsets a mask refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Immutable undirected graph with node features, labels and split masks.
///
/// Adjacency is CSR and stored symmetrically: every undirected edge appears
/// once in each endpoint's row, rows are strictly increasing and self-loops
/// are never stored.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    offsets: Vec<usize>,
    indices: Vec<usize>,
    features: Matrix,
    labels: Vec<usize>,
    num_classes: usize,
    node_ids: Vec<u64>,
    train: Vec<bool>,
    val: Vec<bool>,
    test: Vec<bool>,
}

impl Graph {
    /// Builds a validated graph from an undirected edge list over `0..n`.
    ///
    /// Duplicate and reversed edges collapse into one undirected edge and
    /// self-loops are dropped. Masks start empty.
    pub fn from_edges(
        edges: &[(usize, usize)],
        features: Matrix,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        let n = features.rows();
        if labels.len() != n {
            return Err(Error::Validation(format!(
                "{} labels for {n} feature rows",
                labels.len()
            )));
        }
        if num_classes < 2 {
            return Err(Error::Validation(format!(
                "need at least 2 classes, got {num_classes}"
            )));
        }
        if let Some((v, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= num_classes) {
            return Err(Error::Validation(format!(
                "node {v} has label {y}, outside [0, {num_classes})"
            )));
        }
        features.ensure_finite("features")?;

        let mut pairs = Vec::with_capacity(edges.len() * 2);
        for &(u, v) in edges {
            if u >= n || v >= n {
                return Err(Error::Validation(format!(
                    "edge ({u}, {v}) references a node outside 0..{n}"
                )));
            }
            if u != v {
                pairs.push((u, v));
                pairs.push((v, u));
            }
        }
        pairs.sort_unstable();
        pairs.dedup();

        let mut offsets = vec![0usize; n + 1];
        for &(u, _) in &pairs {
            offsets[u + 1] += 1;
        }
        for i in 0..n {
            offsets[i + 1] += offsets[i];
        }
        let indices = pairs.into_iter().map(|(_, v)| v).collect();

        Ok(Graph {
            offsets,
            indices,
            features,
            labels,
            num_classes,
            node_ids: (0..n as u64).collect(),
            train: vec![false; n],
            val: vec![false; n],
            test: vec![false; n],
        })
    }

    pub(crate) fn with_node_ids(mut self, ids: Vec<u64>) -> Self {
        debug_assert_eq!(ids.len(), self.num_nodes());
        self.node_ids = ids;
        self
    }

    /// Replaces the split masks. Masks must be disjoint and of length `n`.
    pub fn with_masks(mut self, train: Vec<bool>, val: Vec<bool>, test: Vec<bool>) -> Result<Self> {
        let n = self.num_nodes();
        if train.len() != n || val.len() != n || test.len() != n {
            return Err(Error::Validation("mask length differs from node count".into()));
        }
        for v in 0..n {
            if (train[v] as u8 + val[v] as u8 + test[v] as u8) > 1 {
                return Err(Error::Validation(format!("node {v} is in more than one split")));
            }
        }
        self.train = train;
        self.val = val;
        self.test = test;
        Ok(self)
    }

    pub fn num_nodes(&self) -> usize {
        self.labels.len()
    }

    /// Number of undirected edges.
    pub fn num_edges(&self) -> usize {
        self.indices.len() / 2
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// External id of each node, in internal order.
    pub fn node_ids(&self) -> &[u64] {
        &self.node_ids
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.indices[self.offsets[v]..self.offsets[v + 1]]
    }

    pub fn degree(&self, v: usize) -> usize {
        self.offsets[v + 1] - self.offsets[v]
    }

    pub fn csr(&self) -> (&[usize], &[usize]) {
        (&self.offsets, &self.indices)
    }

    /// Each undirected edge once, as `(u, v)` with `u < v`.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.num_nodes()).flat_map(move |u| {
            self.neighbors(u)
                .iter()
                .filter(move |&&v| v > u)
                .map(move |&v| (u, v))
        })
    }

    pub fn mask(&self, split: Split) -> &[bool] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Node ids selected by a split, ascending.
    pub fn mask_nodes(&self, split: Split) -> Vec<usize> {
        nodes_in(self.mask(split))
    }

    /// Checks the symmetric/sorted/loop-free adjacency invariants.
    pub fn check_invariants(&self) -> Result<()> {
        for u in 0..self.num_nodes() {
            let row = self.neighbors(u);
            if row.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Validation(format!("row {u} is not strictly increasing")));
            }
            for &v in row {
                if v == u {
                    return Err(Error::Validation(format!("self-loop at {u}")));
                }
                if self.neighbors(v).binary_search(&u).is_err() {
                    return Err(Error::Validation(format!("edge ({u}, {v}) has no reverse")));
                }
            }
        }
        Ok(())
    }

    pub fn class_stats(&self, mask: &[bool]) -> Result<ClassStats> {
        class_stats(self, mask)
    }

    pub fn class_stats_all(&self) -> Result<ClassStats> {
        class_stats(self, &vec![true; self.num_nodes()])
    }
}

pub(crate) fn nodes_in(mask: &[bool]) -> Vec<usize> {
    mask.iter()
        .enumerate()
        .filter_map(|(i, &m)| m.then_some(i))
        .collect()
}

/// Per-class counts, priors and imbalance ratio over a node subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub counts: Vec<usize>,
    pub priors: Vec<f64>,
    pub imbalance_ratio: f64,
}

impl ClassStats {
    /// Builds stats straight from class counts; every count must be positive.
    pub fn from_counts(counts: Vec<usize>) -> Result<Self> {
        if let Some(class) = counts.iter().position(|&c| c == 0) {
            return Err(Error::MissingClass { class });
        }
        let total: usize = counts.iter().sum();
        let priors = counts.iter().map(|&c| c as f64 / total as f64).collect();
        let min = *counts.iter().min().unwrap_or(&0) as f64;
        let max = *counts.iter().max().unwrap_or(&1) as f64;
        Ok(ClassStats {
            counts,
            priors,
            imbalance_ratio: min / max,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }
}

/// Class statistics over the nodes selected by `mask`.
pub fn class_stats(g: &Graph, mask: &[bool]) -> Result<ClassStats> {
    if mask.len() != g.num_nodes() {
        return Err(Error::Validation("mask length differs from node count".into()));
    }
    let mut counts = vec![0usize; g.num_classes()];
    for (v, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        counts[g.labels()[v]] += 1;
    }
    ClassStats::from_counts(counts)
}

/// Stratified train/val/test split.
///
/// Within each class the nodes are shuffled with a seeded generator, the
/// first `floor(train_frac * count)` go to train, the next
/// `floor(val_frac * count)` to validation and the remainder to test.
pub fn split_masks(g: &Graph, train_frac: f64, val_frac: f64, seed: u64) -> Result<Graph> {
    if !(train_frac > 0.0 && val_frac >= 0.0 && train_frac + val_frac < 1.0) {
        return Err(Error::Parameter(format!(
            "split fractions must satisfy train > 0, val >= 0, train + val < 1 (got {train_frac}, {val_frac})"
        )));
    }
    let n = g.num_nodes();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); g.num_classes()];
    for (v, &y) in g.labels().iter().enumerate() {
        by_class[y].push(v);
    }
    let mut rng = stream_rng(seed, SPLIT_STREAM);
    let (mut train, mut val, mut test) = (vec![false; n], vec![false; n], vec![false; n]);
    for (class, nodes) in by_class.iter_mut().enumerate() {
        let count = nodes.len();
        let n_train = (train_frac * count as f64).floor() as usize;
        let n_val = (val_frac * count as f64).floor() as usize;
        let n_test = count - n_train - n_val;
        if n_train == 0 || n_test == 0 || (val_frac > 0.0 && n_val == 0) {
            return Err(Error::Validation(format!(
                "class {class} has {count} nodes, too few to appear in every split \
                 (train {n_train}, val {n_val}, test {n_test})"
            )));
        }
        nodes.shuffle(&mut rng);
        for &v in &nodes[..n_train] {
            train[v] = true;
        }
        for &v in &nodes[n_train..n_train + n_val] {
            val[v] = true;
        }
        for &v in &nodes[n_train + n_val..] {
            test[v] = true;
        }
    }
    g.clone().with_masks(train, val, test)
}

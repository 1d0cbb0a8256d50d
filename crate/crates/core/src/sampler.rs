//! Bandit-controlled top-p neighbor sampling.
//!
//! Each epoch the mean similarity over training edges is compared with the
//! previous epoch's. The comparison yields a +1/-1 reward and moves the
//! sampling fraction `p` by a fixed step. Once the last `window` rewards
//! nearly cancel out, `p` is frozen for the rest of training.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::numeric::Matrix;
use crate::transform::embedding_similarity;

/// How a step's outcome is turned into a move of `p`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionRule {
    /// Positive reward raises `p`, negative reward lowers it.
    #[default]
    Greedy,
    /// Similarity strictly rising lowers `p`; falling or flat raises it.
    Contrarian,
}

impl std::str::FromStr for ActionRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "greedy" => Ok(ActionRule::Greedy),
            "contrarian" => Ok(ActionRule::Contrarian),
            other => Err(Error::Config(format!("unknown action rule {other:?}"))),
        }
    }
}

impl std::fmt::Display for ActionRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ActionRule::Greedy => "greedy",
            ActionRule::Contrarian => "contrarian",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BanditConfig {
    pub p_init: f64,
    pub p_min: f64,
    pub tau: f64,
    pub window: usize,
    pub threshold: i32,
    pub rule: ActionRule,
}

impl Default for BanditConfig {
    fn default() -> Self {
        BanditConfig {
            p_init: 0.5,
            p_min: 0.05,
            tau: 0.02,
            window: 16,
            threshold: 2,
            rule: ActionRule::Greedy,
        }
    }
}

/// Result of one bandit step that produced a reward.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub reward: i8,
    pub p: f64,
    pub terminated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BanditState {
    p: f64,
    config: BanditConfig,
    rewards: VecDeque<i8>,
    epoch: usize,
    frozen_p: Option<f64>,
    prev_avg_similarity: Option<f64>,
}

impl BanditState {
    pub fn new(config: BanditConfig) -> Result<Self> {
        if !(config.p_min > 0.0 && config.p_min <= 1.0) {
            return Err(Error::Parameter(format!("p_min must be in (0, 1], got {}", config.p_min)));
        }
        if !(config.tau >= 0.0) || config.window == 0 || config.threshold < 0 {
            return Err(Error::Parameter("tau must be >= 0, window > 0, threshold >= 0".into()));
        }
        Ok(BanditState {
            p: config.p_init.clamp(config.p_min, 1.0),
            rewards: VecDeque::with_capacity(config.window),
            config,
            epoch: 0,
            frozen_p: None,
            prev_avg_similarity: None,
        })
    }

    /// Current sampling fraction (the frozen value once terminated).
    pub fn p(&self) -> f64 {
        self.frozen_p.unwrap_or(self.p)
    }

    pub fn frozen_p(&self) -> Option<f64> {
        self.frozen_p
    }

    pub fn terminated(&self) -> bool {
        self.frozen_p.is_some()
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn rewards(&self) -> impl Iterator<Item = i8> + '_ {
        self.rewards.iter().copied()
    }

    pub fn reward_sum(&self) -> i32 {
        self.rewards.iter().map(|&r| i32::from(r)).sum()
    }

    pub fn prev_avg_similarity(&self) -> Option<f64> {
        self.prev_avg_similarity
    }

    pub fn config(&self) -> &BanditConfig {
        &self.config
    }

    /// Feeds this epoch's mean training-edge similarity.
    ///
    /// The first call only records a baseline and yields no reward. Ties
    /// count as an improvement. Calls after termination are ignored.
    pub fn step(&mut self, avg_similarity: f64) -> Option<StepOutcome> {
        if self.terminated() {
            return None;
        }
        self.epoch += 1;
        let prev = self.prev_avg_similarity.replace(avg_similarity)?;
        let reward = if prev <= avg_similarity { 1 } else { -1 };
        Some(self.advance(reward, prev < avg_similarity))
    }

    /// Applies one reward (and the observed trend, used by the contrarian
    /// rule), then checks the termination window.
    pub fn advance(&mut self, reward: i8, similarity_rose: bool) -> StepOutcome {
        debug_assert!(reward == 1 || reward == -1);
        if !self.terminated() {
            let up = match self.config.rule {
                ActionRule::Greedy => reward > 0,
                ActionRule::Contrarian => !similarity_rose,
            };
            let delta = if up { self.config.tau } else { -self.config.tau };
            self.p = (self.p + delta).clamp(self.config.p_min, 1.0);
            self.rewards.push_back(reward.signum());
            if self.rewards.len() > self.config.window {
                self.rewards.pop_front();
            }
            if self.rewards.len() == self.config.window && self.reward_sum().abs() <= self.config.threshold {
                self.frozen_p = Some(self.p);
            }
        }
        StepOutcome {
            reward,
            p: self.p(),
            terminated: self.terminated(),
        }
    }
}

/// Mean similarity over undirected edges whose endpoints are both in the
/// training mask. `emb` is the similarity embedding (see
/// [`crate::transform::similarity_embedding`]).
pub fn average_similarity(emb: &Matrix, g: &Graph, train_mask: &[bool]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (u, v) in g.edges() {
        if train_mask[u] && train_mask[v] {
            total += embedding_similarity(emb, u, v);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Validation(
            "training subgraph has no edges; use a larger train fraction or a denser graph".into(),
        ));
    }
    Ok(total / count as f64)
}

/// Directed neighbor lists after top-p selection. Row `v` lists the nodes
/// whose embeddings `v` aggregates, ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampledGraph {
    offsets: Vec<usize>,
    indices: Vec<usize>,
}

impl SampledGraph {
    /// Keeps every neighbor.
    pub fn full(g: &Graph) -> Self {
        let (offsets, indices) = g.csr();
        SampledGraph {
            offsets: offsets.to_vec(),
            indices: indices.to_vec(),
        }
    }

    pub fn from_lists(lists: &[Vec<usize>]) -> Self {
        let mut offsets = Vec::with_capacity(lists.len() + 1);
        offsets.push(0);
        let mut indices = Vec::new();
        for l in lists {
            indices.extend_from_slice(l);
            offsets.push(indices.len());
        }
        SampledGraph { offsets, indices }
    }

    pub fn num_nodes(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.indices[self.offsets[v]..self.offsets[v + 1]]
    }

    pub fn degree(&self, v: usize) -> usize {
        self.offsets[v + 1] - self.offsets[v]
    }

    pub fn num_arcs(&self) -> usize {
        self.indices.len()
    }
}

/// Number of neighbors kept at fraction `p` for a node of degree `deg`:
/// `max(1, ceil(p * deg))`, zero for isolated nodes.
///
/// The product is nudged down by 1e-9 before rounding up so that values
/// like `0.3 * 10` are not pushed to the next integer by representation error.
pub fn kept_count(p: f64, deg: usize) -> usize {
    if deg == 0 {
        return 0;
    }
    let m = (p * deg as f64 - 1e-9).ceil();
    (m.max(1.0) as usize).min(deg)
}

/// Keeps, for each node, the `kept_count(p, deg)` most similar neighbors,
/// breaking similarity ties toward the lower node id.
pub fn sample_neighbors(g: &Graph, emb: &Matrix, p: f64) -> Result<SampledGraph> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::Parameter(format!("sampling fraction must be in (0, 1], got {p}")));
    }
    let mut lists = Vec::with_capacity(g.num_nodes());
    let mut scored: Vec<(f64, usize)> = Vec::new();
    for v in 0..g.num_nodes() {
        let nbrs = g.neighbors(v);
        let m = kept_count(p, nbrs.len());
        if m == nbrs.len() {
            lists.push(nbrs.to_vec());
            continue;
        }
        scored.clear();
        scored.extend(nbrs.iter().map(|&u| (embedding_similarity(emb, v, u), u)));
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut kept: Vec<usize> = scored[..m].iter().map(|&(_, u)| u).collect();
        kept.sort_unstable();
        lists.push(kept);
    }
    Ok(SampledGraph::from_lists(&lists))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn star(sims: &[f64]) -> (Graph, Matrix) {
        // Node 0 at the origin of a 1-d raw embedding; leaf i sits at 1 - sim_i.
        let n = sims.len() + 1;
        let edges: Vec<_> = (1..n).map(|i| (0, i)).collect();
        let g = Graph::from_edges(&edges, Matrix::zeros(n, 1), vec![0; n], 2).unwrap();
        let mut emb = Matrix::zeros(n, 1);
        for (i, s) in sims.iter().enumerate() {
            emb[(i + 1, 0)] = 1.0 - s;
        }
        (g, emb)
    }

    #[test]
    fn rewards_follow_similarity_direction() {
        let mut b = BanditState::new(BanditConfig::default()).unwrap();
        assert!(b.step(0.5).is_none());
        assert_eq!(b.step(0.6).unwrap().reward, 1);
        assert_eq!(b.step(0.6).unwrap().reward, 1);
        assert_eq!(b.step(0.4).unwrap().reward, -1);
    }

    #[test]
    fn greedy_and_contrarian_moves() {
        let cfg = BanditConfig::default();
        let mut b = BanditState::new(cfg.clone()).unwrap();
        b.step(0.5);
        assert!((b.step(0.6).unwrap().p - 0.52).abs() < 1e-15);
        let mut b = BanditState::new(BanditConfig {
            rule: ActionRule::Contrarian,
            ..cfg
        })
        .unwrap();
        b.step(0.5);
        assert!((b.step(0.6).unwrap().p - 0.48).abs() < 1e-15);
        // flat similarity: rewarded, but the contrarian rule still raises p
        assert!((b.step(0.6).unwrap().p - 0.50).abs() < 1e-15);
    }

    #[test]
    fn p_is_clamped() {
        let mut b = BanditState::new(BanditConfig {
            p_init: 0.06,
            tau: 0.1,
            ..BanditConfig::default()
        })
        .unwrap();
        b.advance(-1, false);
        assert_eq!(b.p(), 0.05);
        for _ in 0..20 {
            b.advance(1, true);
        }
        assert_eq!(b.p(), 1.0);
    }

    #[test]
    fn alternating_rewards_terminate_after_full_window() {
        let mut b = BanditState::new(BanditConfig::default()).unwrap();
        for i in 0..15 {
            let out = b.advance(if i % 2 == 0 { 1 } else { -1 }, i % 2 == 0);
            assert!(!out.terminated);
        }
        let out = b.advance(-1, false);
        assert!(out.terminated);
        let frozen = b.frozen_p().unwrap();
        b.advance(1, true);
        b.advance(1, true);
        assert_eq!(b.p(), frozen);
        assert!(b.step(10.0).is_none());
    }

    #[test]
    fn top_p_selection() {
        let (g, emb) = star(&[0.1, 0.9, 0.5]);
        // ceil(0.34 * 3) = 2: keeps the 0.9 and 0.5 neighbors.
        let s = sample_neighbors(&g, &emb, 0.34).unwrap();
        assert_eq!(s.neighbors(0), &[2, 3]);
        // degree-1 leaves always keep their single neighbor.
        for leaf in 1..4 {
            assert_eq!(s.neighbors(leaf), &[0]);
        }
        let s = sample_neighbors(&g, &emb, 0.01).unwrap();
        assert_eq!(s.neighbors(0), &[2]);
        assert_eq!(sample_neighbors(&g, &emb, 1.0).unwrap(), SampledGraph::full(&g));
        assert!(sample_neighbors(&g, &emb, 0.0).is_err());
    }

    #[test]
    fn ties_prefer_lower_ids() {
        let (g, emb) = star(&[0.5, 0.5, 0.5, 0.5]);
        let s = sample_neighbors(&g, &emb, 0.5).unwrap();
        assert_eq!(s.neighbors(0), &[1, 2]);
    }

    #[test]
    fn kept_count_rounding() {
        assert_eq!(kept_count(0.34, 3), 2);
        assert_eq!(kept_count(0.3, 10), 3);
        assert_eq!(kept_count(0.05, 3), 1);
        assert_eq!(kept_count(1.0, 7), 7);
        assert_eq!(kept_count(0.5, 0), 0);
    }

    #[test]
    fn average_similarity_over_train_edges() {
        let edges = [(0, 1), (1, 2), (2, 3)];
        let g = Graph::from_edges(&edges, Matrix::zeros(4, 1), vec![0; 4], 2).unwrap();
        let emb = Matrix::from_rows(&[[0.0], [0.0], [1.0], [5.0]]).unwrap();
        // train = {0,1,2}: edges (0,1) with S = 1 and (1,2) with S = 0.
        let avg = average_similarity(&emb, &g, &[true, true, true, false]).unwrap();
        assert!((avg - 0.5).abs() < 1e-15);
        assert!(average_similarity(&emb, &g, &[true, false, true, false]).is_err());
        let same = Matrix::filled(4, 1, 0.3);
        assert_eq!(average_similarity(&same, &g, &[true; 4]).unwrap(), 1.0);
    }
}

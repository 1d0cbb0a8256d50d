//! Planted-partition generator with controllable imbalance and homophily.

use log::warn;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::Graph;
use crate::error::{Error, Result};
use crate::numeric::{stream_rng, Matrix};

const LABEL_STREAM: u64 = 1;
const EDGE_STREAM: u64 = 2;
const FEATURE_STREAM: u64 = 3;

/// Largest allowed gap between requested and realized imbalance ratio.
pub const IR_TOLERANCE: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n: usize,
    pub k: usize,
    pub ir: f64,
    pub homophily: f64,
    pub feature_dim: usize,
    pub class_separation: f64,
    pub mean_degree: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n: 2000,
            k: 2,
            ir: 0.1,
            homophily: 0.8,
            feature_dim: 16,
            class_separation: 1.0,
            mean_degree: 20.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn generate(&self) -> Result<Graph> {
        generate_synthetic_with_degree(
            self.n,
            self.k,
            self.ir,
            self.homophily,
            self.feature_dim,
            self.class_separation,
            self.mean_degree,
            self.seed,
        )
    }
}

/// Class sizes for `n` nodes over `k` classes whose min/max ratio is `ir`.
///
/// Class 0 is the largest; sizes fall geometrically to `ir` times that at
/// class `k - 1`. Rounding slack is absorbed by class 0.
pub fn class_sizes(n: usize, k: usize, ir: f64) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(Error::Parameter(format!("need k >= 2, got {k}")));
    }
    if !(ir > 0.0 && ir <= 1.0) {
        return Err(Error::Parameter(format!("imbalance ratio must be in (0, 1], got {ir}")));
    }
    if n < 10 * k {
        return Err(Error::Parameter(format!("need n >= 10k = {}, got {n}", 10 * k)));
    }
    let weights: Vec<f64> = (0..k).map(|c| ir.powf(c as f64 / (k - 1) as f64)).collect();
    let total: f64 = weights.iter().sum();
    let mut sizes: Vec<usize> = weights
        .iter()
        .map(|w| (n as f64 * w / total).round() as usize)
        .collect();
    let assigned: usize = sizes.iter().sum();
    sizes[0] = (sizes[0] + n).checked_sub(assigned).ok_or_else(|| {
        Error::Parameter(format!("cannot fit class sizes into {n} nodes"))
    })?;
    let min = *sizes.iter().min().unwrap();
    let max = *sizes.iter().max().unwrap();
    if min == 0 {
        return Err(Error::Parameter(format!(
            "imbalance ratio {ir} leaves an empty class at n = {n}"
        )));
    }
    let realized = min as f64 / max as f64;
    if (realized - ir).abs() > IR_TOLERANCE {
        return Err(Error::Parameter(format!(
            "imbalance ratio {ir} is not reachable at n = {n} (closest {realized:.4})"
        )));
    }
    Ok(sizes)
}

/// Generates a planted-partition graph with mean degree 20.
pub fn generate_synthetic(
    n: usize,
    k: usize,
    ir: f64,
    homophily: f64,
    feature_dim: usize,
    class_separation: f64,
    seed: u64,
) -> Result<Graph> {
    generate_synthetic_with_degree(n, k, ir, homophily, feature_dim, class_separation, 20.0, seed)
}

#[allow(clippy::too_many_arguments)]
pub fn generate_synthetic_with_degree(
    n: usize,
    k: usize,
    ir: f64,
    homophily: f64,
    feature_dim: usize,
    class_separation: f64,
    mean_degree: f64,
    seed: u64,
) -> Result<Graph> {
    if !(0.0..=1.0).contains(&homophily) {
        return Err(Error::Parameter(format!("homophily must be in [0, 1], got {homophily}")));
    }
    if feature_dim < k {
        return Err(Error::Parameter(format!(
            "feature_dim ({feature_dim}) must be at least k ({k}) to place class means"
        )));
    }
    if !(mean_degree >= 0.0) || !class_separation.is_finite() {
        return Err(Error::Parameter("mean degree and separation must be finite and non-negative".into()));
    }
    let sizes = class_sizes(n, k, ir)?;

    let mut labels: Vec<usize> = sizes
        .iter()
        .enumerate()
        .flat_map(|(c, &s)| std::iter::repeat_n(c, s))
        .collect();
    labels.shuffle(&mut stream_rng(seed, LABEL_STREAM));

    // Expected pairs inside and across blocks.
    let intra: f64 = sizes.iter().map(|&s| (s * (s - 1) / 2) as f64).sum();
    let all_pairs = (n * (n - 1) / 2) as f64;
    let inter = all_pairs - intra;
    let denom = homophily * intra + (1.0 - homophily) * inter;
    let base = if denom > 0.0 { mean_degree * n as f64 / (2.0 * denom) } else { 0.0 };
    let (mut p_in, mut p_out) = (homophily * base, (1.0 - homophily) * base);
    if p_in > 1.0 || p_out > 1.0 {
        warn!("requested mean degree {mean_degree} saturates edge probabilities; clamping to 1");
        p_in = p_in.min(1.0);
        p_out = p_out.min(1.0);
    }

    let mut rng = stream_rng(seed, EDGE_STREAM);
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            let p = if labels[u] == labels[v] { p_in } else { p_out };
            if rng.gen::<f64>() < p {
                edges.push((u, v));
            }
        }
    }

    // Class c is centred at (sep / sqrt 2) e_c, so any two means are `sep` apart.
    let offset = class_separation / std::f64::consts::SQRT_2;
    let mut rng = stream_rng(seed, FEATURE_STREAM);
    let mut features = Matrix::zeros(n, feature_dim);
    for v in 0..n {
        let row = features.row_mut(v);
        for x in row.iter_mut() {
            *x = rng.sample(StandardNormal);
        }
        row[labels[v]] += offset;
    }

    Graph::from_edges(&edges, features, labels, k)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_hit_requested_ratio() {
        // min + max = 2000, min / max = 0.1  =>  min = 2000 / 11 ~ 181.8
        let s = class_sizes(2000, 2, 0.1).unwrap();
        assert_eq!(s.iter().sum::<usize>(), 2000);
        assert!((166..=200).contains(&s[1]), "{s:?}");
        assert_eq!(s, vec![1818, 182]);
        assert_eq!(class_sizes(1000, 2, 1.0).unwrap(), vec![500, 500]);
        let s = class_sizes(3000, 3, 0.2).unwrap();
        assert!((s[2] as f64 / s[0] as f64 - 0.2).abs() <= IR_TOLERANCE);
    }

    #[test]
    fn infeasible_ratios_rejected() {
        assert!(class_sizes(20, 2, 0.001).is_err());
        assert!(class_sizes(2000, 2, 0.0).is_err());
        assert!(class_sizes(2000, 2, 1.5).is_err());
        assert!(class_sizes(15, 2, 0.5).is_err());
    }

    #[test]
    fn generator_is_deterministic() {
        let a = generate_synthetic(300, 2, 0.3, 0.7, 4, 1.0, 9).unwrap();
        let b = generate_synthetic(300, 2, 0.3, 0.7, 4, 1.0, 9).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(300, 2, 0.3, 0.7, 4, 1.0, 10).unwrap();
        assert_ne!(a, c);
        a.check_invariants().unwrap();
    }

    #[test]
    fn homophily_extremes() {
        let g = generate_synthetic(400, 2, 0.5, 1.0, 2, 1.0, 1).unwrap();
        assert!(g.num_edges() > 0);
        assert!(g.edges().all(|(u, v)| g.labels()[u] == g.labels()[v]));

        let g = generate_synthetic(400, 2, 0.5, 0.0, 2, 1.0, 1).unwrap();
        let intra = g.edges().filter(|&(u, v)| g.labels()[u] == g.labels()[v]).count();
        assert!((intra as f64) < 0.05 * g.num_edges() as f64);
    }

    #[test]
    fn mean_degree_near_target() {
        let g = generate_synthetic(1000, 2, 0.5, 0.6, 2, 1.0, 5).unwrap();
        let mean = 2.0 * g.num_edges() as f64 / 1000.0;
        assert!((mean - 20.0).abs() < 1.5, "mean degree {mean}");
    }
}

//! Finite-difference checks of the analytic gradients.

use rand::Rng;

use crate::cost::loss_and_grad;
use crate::error::Result;
use crate::graph::{split_masks, Graph};
use crate::numeric::{finite_diff_grad, max_relative_error, stream_rng, Matrix};
use crate::sampler::sample_neighbors;
use crate::trainer::{objective, param_names, param_tensors_mut};
use crate::transform::{similarity_embedding, transform, SimilaritySpace, TransformParams};
use crate::gnn::GnnParams;

const STEP: f64 = 1e-6;

/// Worst relative error of the cost-sensitive cross-entropy gradient with
/// respect to the logits over `instances` random problems
/// (K in {2, 3, 5}, at most 10 nodes, random positive costs and masks).
pub fn logit_gradient_check(seed: u64, instances: usize) -> Result<f64> {
    let mut rng = stream_rng(seed, 0x4752_4144);
    let mut worst = 0.0_f64;
    for i in 0..instances {
        let k = [2, 3, 5][i % 3];
        let n = rng.gen_range(1..=10);
        let z = Matrix::from_vec(n, k, (0..n * k).map(|_| rng.gen_range(-3.0..3.0)).collect())?;
        let cost = Matrix::from_vec(k, k, (0..k * k).map(|_| rng.gen_range(0.05..3.0)).collect())?;
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let mut mask: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.7)).collect();
        mask[0] = true;
        let (_, analytic) = loss_and_grad(&z, &cost, &labels, &mask)?;
        let numeric = finite_diff_grad(|m| loss_and_grad(m, &cost, &labels, &mask).map_or(f64::NAN, |r| r.0), &z, STEP)?;
        worst = worst.max(max_relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

/// Random connected-ish 10-node, 2-class graph with a half/quarter split.
pub fn tiny_graph(seed: u64) -> Result<Graph> {
    let mut rng = stream_rng(seed, 0x5449_4e59);
    let n = 10;
    let d = 4;
    let labels: Vec<usize> = (0..n).map(|v| usize::from(v % 3 == 0)).collect();
    let mut edges: Vec<(usize, usize)> = (1..n).map(|v| (v, rng.gen_range(0..v))).collect();
    for _ in 0..8 {
        edges.push((rng.gen_range(0..n), rng.gen_range(0..n)));
    }
    let features = Matrix::from_vec(n, d, (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let g = Graph::from_edges(&edges, features, labels, 2)?;
    split_masks(&g, 0.5, 0.25, seed)
}

/// Relative error of every trainable tensor's gradient of the combined
/// loss on a 10-node graph with a 2-layer encoder, biases on, random
/// positive costs and a sampled neighborhood (p = 0.6) held fixed.
pub fn end_to_end_check(seed: u64) -> Result<Vec<(String, f64)>> {
    let g = tiny_graph(seed)?;
    let mut rng = stream_rng(seed, 0x4532_4500);
    let lambda = rng.gen_range(0.2..1.5);
    let mut t = TransformParams::init(g.feature_dim(), 2, true, seed);
    t.bias = Some(Matrix::from_vec(1, 2, vec![rng.gen_range(0.0..0.3), rng.gen_range(0.0..0.3)])?);
    let mut gp = GnnParams::init(g.feature_dim(), 6, 2, 2, true, seed)?;
    for b in gp.biases.iter_mut().flatten() {
        b.as_mut_slice().iter_mut().for_each(|x| *x = rng.gen_range(-0.2..0.2));
    }
    let cost = Matrix::from_vec(2, 2, (0..4).map(|_| rng.gen_range(0.2..2.5)).collect())?;
    let emb = similarity_embedding(&transform(&t, g.features())?, SimilaritySpace::Softmax);
    let sg = sample_neighbors(&g, &emb, 0.6)?;

    let obj = objective(&t, &gp, &cost, &g, &sg, lambda)?;
    let names = param_names(&t, &gp);
    let analytic = obj.grads.tensors();
    let mut out = Vec::with_capacity(names.len());
    for (i, name) in names.into_iter().enumerate() {
        let at = param_tensors_mut(&mut t, &mut gp)[i].clone();
        let numeric = finite_diff_grad(
            |m| {
                *param_tensors_mut(&mut t, &mut gp)[i] = m.clone();
                objective(&t, &gp, &cost, &g, &sg, lambda).map_or(f64::NAN, |o| o.l_csgnn)
            },
            &at,
            STEP,
        )?;
        *param_tensors_mut(&mut t, &mut gp)[i] = at;
        out.push((name, max_relative_error(analytic[i], &numeric)));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checks_pass() {
        assert!(logit_gradient_check(1, 30).unwrap() < 1e-5);
        let errs = end_to_end_check(2).unwrap();
        assert_eq!(errs.len(), 6);
        for (name, e) in errs {
            assert!(e < 1e-4, "{name}: {e}");
        }
    }
}

//! Mean-aggregation GNN encoder with a hand-written backward pass.
//!
//! Layer `l` computes `m_v = mean({h_v} ∪ {h_u : u in N_s(v)})` over the
//! sampled neighborhood, then `h_v = ReLU(m_v W_l)`. The last layer skips
//! the ReLU so its output can be used as signed logits.

use crate::error::{Error, Result};
use crate::numeric::{init_uniform, matmul, matmul_nt, matmul_tn, Matrix};
use crate::sampler::SampledGraph;
use crate::transform::add_row;

#[derive(Debug, Clone, PartialEq)]
pub struct GnnParams {
    pub weights: Vec<Matrix>,
    pub biases: Option<Vec<Matrix>>,
}

impl GnnParams {
    /// `layers` weight matrices: `input_dim -> hidden -> ... -> num_classes`.
    pub fn init(
        input_dim: usize,
        hidden_dim: usize,
        num_classes: usize,
        layers: usize,
        with_bias: bool,
        seed: u64,
    ) -> Result<Self> {
        if layers == 0 {
            return Err(Error::Parameter("the encoder needs at least one layer".into()));
        }
        let mut weights = Vec::with_capacity(layers);
        for l in 0..layers {
            let fan_in = if l == 0 { input_dim } else { hidden_dim };
            let fan_out = if l + 1 == layers { num_classes } else { hidden_dim };
            weights.push(init_uniform(fan_in, fan_out, seed, 0x474e_4e00 + l as u64));
        }
        let biases = with_bias.then(|| weights.iter().map(|w| Matrix::zeros(1, w.cols())).collect());
        Ok(GnnParams { weights, biases })
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.last().map_or(0, Matrix::cols)
    }

    pub fn input_dim(&self) -> usize {
        self.weights.first().map_or(0, Matrix::rows)
    }

    /// Checks that consecutive layer shapes chain.
    pub fn validate(&self) -> Result<()> {
        if self.weights.is_empty() {
            return Err(Error::Parameter("the encoder needs at least one layer".into()));
        }
        for (l, pair) in self.weights.windows(2).enumerate() {
            if pair[0].cols() != pair[1].rows() {
                return Err(Error::shape(
                    "GnnParams",
                    format!("layer {l} outputs {} but layer {} expects {}", pair[0].cols(), l + 1, pair[1].rows()),
                ));
            }
        }
        if let Some(bs) = &self.biases {
            if bs.len() != self.weights.len()
                || bs.iter().zip(&self.weights).any(|(b, w)| b.shape() != (1, w.cols()))
            {
                return Err(Error::shape("GnnParams", "bias shapes do not match the layers"));
            }
        }
        Ok(())
    }
}

/// Per-layer activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct GnnCache {
    /// Aggregated layer inputs `M_l`.
    aggregated: Vec<Matrix>,
    /// Outputs of the hidden layers after ReLU.
    hidden: Vec<Matrix>,
    num_nodes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GnnGrads {
    pub weights: Vec<Matrix>,
    pub biases: Option<Vec<Matrix>>,
}

/// Self-inclusive neighborhood mean of the rows of `h`.
pub fn aggregate_mean(sg: &SampledGraph, h: &Matrix) -> Result<Matrix> {
    if sg.num_nodes() != h.rows() {
        return Err(Error::shape("aggregate_mean", format!("{} nodes, {} rows", sg.num_nodes(), h.rows())));
    }
    let mut out = Matrix::zeros(h.rows(), h.cols());
    for v in 0..h.rows() {
        let nbrs = sg.neighbors(v);
        let inv = 1.0 / (nbrs.len() + 1) as f64;
        let row = out.row_mut(v);
        row.copy_from_slice(h.row(v));
        for &u in nbrs {
            for (o, x) in row.iter_mut().zip(h.row(u)) {
                *o += x;
            }
        }
        for o in row.iter_mut() {
            *o *= inv;
        }
    }
    Ok(out)
}

/// Adjoint of [`aggregate_mean`]: each node's gradient is split equally
/// between itself and its sampled neighbors.
pub fn aggregate_mean_transpose(sg: &SampledGraph, grad: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(grad.rows(), grad.cols());
    for v in 0..grad.rows() {
        let nbrs = sg.neighbors(v);
        let inv = 1.0 / (nbrs.len() + 1) as f64;
        let share: Vec<f64> = grad.row(v).iter().map(|g| g * inv).collect();
        for target in std::iter::once(v).chain(nbrs.iter().copied()) {
            for (o, s) in out.row_mut(target).iter_mut().zip(&share) {
                *o += s;
            }
        }
    }
    out
}

pub fn forward(params: &GnnParams, sg: &SampledGraph, x: &Matrix) -> Result<(Matrix, GnnCache)> {
    params.validate()?;
    if x.cols() != params.input_dim() {
        return Err(Error::shape(
            "gnn::forward",
            format!("features have {} columns, first layer expects {}", x.cols(), params.input_dim()),
        ));
    }
    let last = params.num_layers() - 1;
    let mut aggregated = Vec::with_capacity(params.num_layers());
    let mut hidden = Vec::with_capacity(last);
    let mut h = x.clone();
    for (l, w) in params.weights.iter().enumerate() {
        let m = aggregate_mean(sg, &h)?;
        let mut a = matmul(&m, w)?;
        if let Some(bs) = &params.biases {
            add_row(&mut a, &bs[l])?;
        }
        aggregated.push(m);
        if l < last {
            h = a.map(|v| v.max(0.0));
            hidden.push(h.clone());
        } else {
            h = a;
        }
    }
    Ok((
        h,
        GnnCache {
            aggregated,
            hidden,
            num_nodes: x.rows(),
        },
    ))
}

pub fn backward(params: &GnnParams, cache: &GnnCache, sg: &SampledGraph, grad_z: &Matrix) -> Result<GnnGrads> {
    let layers = params.num_layers();
    if cache.aggregated.len() != layers || cache.num_nodes != sg.num_nodes() {
        return Err(Error::shape("gnn::backward", "cache does not match parameters or graph"));
    }
    if grad_z.shape() != (cache.num_nodes, params.output_dim()) {
        return Err(Error::shape(
            "gnn::backward",
            format!("grad_z is {:?}, expected {:?}", grad_z.shape(), (cache.num_nodes, params.output_dim())),
        ));
    }
    let mut weight_grads = vec![Matrix::zeros(0, 0); layers];
    let mut bias_grads = params.biases.as_ref().map(|_| vec![Matrix::zeros(0, 0); layers]);
    let mut g = grad_z.clone();
    for l in (0..layers).rev() {
        weight_grads[l] = matmul_tn(&cache.aggregated[l], &g)?;
        if let Some(bg) = bias_grads.as_mut() {
            bg[l] = g.column_sums();
        }
        if l == 0 {
            break;
        }
        let grad_m = matmul_nt(&g, &params.weights[l])?;
        let mut grad_h = aggregate_mean_transpose(sg, &grad_m);
        for (gh, &h) in grad_h.as_mut_slice().iter_mut().zip(cache.hidden[l - 1].as_slice()) {
            if h <= 0.0 {
                *gh = 0.0;
            }
        }
        g = grad_h;
    }
    Ok(GnnGrads {
        weights: weight_grads,
        biases: bias_grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::numeric::{finite_diff_grad, max_relative_error, stream_rng};
    use rand::Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = stream_rng(seed, 17);
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn isolated_node_keeps_its_own_row() {
        let sg = SampledGraph::from_lists(&[vec![], vec![2], vec![1]]);
        let h = random(3, 2, 1);
        let m = aggregate_mean(&sg, &h).unwrap();
        assert_eq!(m.row(0), h.row(0));
    }

    #[test]
    fn hand_mean_with_identity_weights() {
        let sg = SampledGraph::from_lists(&[vec![1, 2], vec![0], vec![0]]);
        let x = Matrix::from_rows(&[[1.0, 1.0], [1.0, 0.0], [0.0, 1.0]]).unwrap();
        let params = GnnParams {
            weights: vec![Matrix::identity(2), Matrix::identity(2)],
            biases: None,
        };
        // First layer output is the ReLU'd mean; read it from the cache.
        let (_, cache) = forward(&params, &sg, &x).unwrap();
        let h1 = &cache.hidden[0];
        assert!((h1[(0, 0)] - 2.0 / 3.0).abs() < 1e-15);
        assert!((h1[(0, 1)] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let sg = SampledGraph::from_lists(&[vec![1], vec![0]]);
        let params = GnnParams {
            weights: vec![Matrix::zeros(3, 2)],
            biases: None,
        };
        let (z, _) = forward(&params, &sg, &random(2, 3, 2)).unwrap();
        assert_eq!(z, Matrix::zeros(2, 2));
    }

    #[test]
    fn zero_upstream_gradient() {
        let sg = SampledGraph::from_lists(&[vec![1], vec![0]]);
        let params = GnnParams::init(3, 4, 2, 2, true, 0).unwrap();
        let (_, cache) = forward(&params, &sg, &random(2, 3, 3)).unwrap();
        let grads = backward(&params, &cache, &sg, &Matrix::zeros(2, 2)).unwrap();
        assert!(grads.weights.iter().all(|w| w.max_abs() == 0.0));
        assert!(grads.biases.unwrap().iter().all(|b| b.max_abs() == 0.0));
    }

    #[test]
    fn shape_errors() {
        let sg = SampledGraph::from_lists(&[vec![1], vec![0]]);
        let params = GnnParams::init(3, 4, 2, 2, false, 0).unwrap();
        assert!(forward(&params, &sg, &random(2, 5, 3)).is_err());
        let (_, cache) = forward(&params, &sg, &random(2, 3, 3)).unwrap();
        assert!(backward(&params, &cache, &sg, &Matrix::zeros(2, 3)).is_err());
        assert!(GnnParams::init(3, 4, 2, 0, false, 0).is_err());
    }

    #[test]
    fn two_node_single_layer_gradient() {
        let sg = SampledGraph::from_lists(&[vec![1], vec![0]]);
        let x = random(2, 3, 4);
        let params = GnnParams::init(3, 4, 2, 1, false, 1).unwrap();
        let probe = random(2, 2, 5);
        let loss = |p: &GnnParams| forward(p, &sg, &x).unwrap().0.hadamard(&probe).unwrap().sum();
        let (_, cache) = forward(&params, &sg, &x).unwrap();
        let grads = backward(&params, &cache, &sg, &probe).unwrap();
        let numeric = finite_diff_grad(
            |w| {
                loss(&GnnParams {
                    weights: vec![w.clone()],
                    biases: None,
                })
            },
            &params.weights[0],
            1e-6,
        )
        .unwrap();
        assert!(max_relative_error(&grads.weights[0], &numeric) < 1e-5);
    }

    #[test]
    fn neighbor_order_does_not_change_gradients() {
        let a = SampledGraph::from_lists(&[vec![1, 2], vec![0, 2], vec![1, 0]]);
        let b = SampledGraph::from_lists(&[vec![2, 1], vec![2, 0], vec![0, 1]]);
        let x = random(3, 2, 6);
        let params = GnnParams::init(2, 3, 2, 2, false, 2).unwrap();
        let probe = random(3, 2, 7);
        let run = |sg: &SampledGraph| {
            let (_, cache) = forward(&params, sg, &x).unwrap();
            backward(&params, &cache, sg, &probe).unwrap()
        };
        let (ga, gb) = (run(&a), run(&b));
        for (wa, wb) in ga.weights.iter().zip(&gb.weights) {
            assert!(max_relative_error(wa, wb) < 1e-14);
        }
    }

    #[test]
    fn full_graph_wrapper() {
        let g = Graph::from_edges(&[(0, 1)], Matrix::zeros(3, 1), vec![0, 1, 0], 2).unwrap();
        let sg = SampledGraph::full(&g);
        assert_eq!(sg.neighbors(0), &[1]);
        assert_eq!(sg.neighbors(2), &[] as &[usize]);
    }
}

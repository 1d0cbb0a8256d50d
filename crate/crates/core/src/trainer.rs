//! Training loop tying the transform, sampler, encoder and cost learner
//! together.
//!
//! Per epoch: transform loss, one bandit step and a fresh sampled graph,
//! encoder forward pass, cost-sensitive loss, cost-matrix update, then one
//! optimizer step on `L_GNN + lambda * L_trans`.

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{Optimizer, TrainConfig};
use crate::cost::{self, CostMatrix, Mode};
use crate::error::{Error, Result};
use crate::gnn::{self, GnnParams};
use crate::graph::{split_masks, ClassStats, Graph, Split};
use crate::metrics::{compute_metrics, MetricsReport};
use crate::numeric::{softmax_rows, Matrix};
use crate::sampler::{average_similarity, sample_neighbors, BanditState, SampledGraph};
use crate::transform::{similarity_embedding, transform, transform_loss, SimilaritySpace, TransformParams};

/// Seed stream of the transform weights; the encoder uses its own streams.
const TRANSFORM_SEED_MIX: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    pub l_trans: f64,
    pub l_gnn: f64,
    /// `||T - C||^2 + E_val`; zero when the cost learner is off.
    pub l_cost: f64,
    pub l_csgnn: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BanditRecord {
    pub epoch: usize,
    pub avg_similarity: f64,
    /// `None` on the baseline epoch and after termination.
    pub reward: Option<i8>,
    /// Fraction used for this epoch's sampling.
    pub p: f64,
    pub terminated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostRecord {
    pub epoch: usize,
    /// Matrix used for this epoch's loss, before the update.
    pub cost: Matrix,
    pub target: cost::CostTarget,
    pub distance: f64,
    pub val_error: f64,
}

/// Parameters needed for inference.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub transform: TransformParams,
    pub gnn: GnnParams,
    pub cost: Matrix,
    /// Sampling fraction and similarity space; `None` means full
    /// neighborhoods.
    pub sampling: Option<(f64, SimilaritySpace)>,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: TrainConfig,
    pub transform: TransformParams,
    pub gnn: GnnParams,
    pub cost: CostMatrix,
    pub bandit: Option<BanditState>,
    pub epoch: usize,
    pub history: Vec<EpochLosses>,
    pub bandit_trace: Vec<BanditRecord>,
    pub cost_trace: Vec<CostRecord>,
    optimizer: OptimizerState,
}

/// Loss parts and gradients of the combined objective on a fixed sampled
/// graph.
#[derive(Debug, Clone)]
pub struct Objective {
    pub l_trans: f64,
    pub l_gnn: f64,
    pub l_csgnn: f64,
    /// Logits of every node.
    pub logits: Matrix,
    /// Transform output, used for sampling.
    pub embeddings: Matrix,
    pub grads: ParamGrads,
}

/// Gradients of `L_CSGNN` in parameter order (transform weight, transform
/// bias, encoder weights, encoder biases).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub transform_weight: Matrix,
    pub transform_bias: Option<Matrix>,
    pub gnn_weights: Vec<Matrix>,
    pub gnn_biases: Option<Vec<Matrix>>,
}

impl ParamGrads {
    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut out = vec![&self.transform_weight];
        out.extend(self.transform_bias.as_ref());
        out.extend(self.gnn_weights.iter());
        if let Some(b) = &self.gnn_biases {
            out.extend(b.iter());
        }
        out
    }
}

/// Mutable references to every trainable tensor, in [`ParamGrads`] order.
pub fn param_tensors_mut<'a>(t: &'a mut TransformParams, g: &'a mut GnnParams) -> Vec<&'a mut Matrix> {
    let mut out = vec![&mut t.weight];
    out.extend(t.bias.as_mut());
    out.extend(g.weights.iter_mut());
    if let Some(b) = g.biases.as_mut() {
        out.extend(b.iter_mut());
    }
    out
}

/// Names of the trainable tensors, in [`ParamGrads`] order.
pub fn param_names(t: &TransformParams, g: &GnnParams) -> Vec<String> {
    let mut out = vec!["transform.weight".to_string()];
    if t.bias.is_some() {
        out.push("transform.bias".into());
    }
    for l in 0..g.num_layers() {
        out.push(format!("gnn.layer{l}.weight"));
    }
    if g.biases.is_some() {
        for l in 0..g.num_layers() {
            out.push(format!("gnn.layer{l}.bias"));
        }
    }
    out
}

/// `L_CSGNN = L_GNN + lambda * L_trans` and its gradients with the sampled
/// graph held fixed. Both losses average over the training mask.
pub fn objective(
    t: &TransformParams,
    g_params: &GnnParams,
    cost: &Matrix,
    g: &Graph,
    sg: &SampledGraph,
    lambda: f64,
) -> Result<Objective> {
    let train = g.mask(Split::Train);
    let tl = transform_loss(t, g.features(), g.labels(), train)?;
    let (logits, cache) = gnn::forward(g_params, sg, g.features())?;
    let (l_gnn, grad_z) = cost::loss_and_grad(&logits, cost, g.labels(), train)?;
    let gg = gnn::backward(g_params, &cache, sg, &grad_z)?;
    Ok(Objective {
        l_trans: tl.loss,
        l_gnn,
        l_csgnn: l_gnn + lambda * tl.loss,
        logits,
        embeddings: tl.embeddings,
        grads: ParamGrads {
            transform_weight: tl.grad_weight.scale(lambda),
            transform_bias: tl.grad_bias.map(|b| b.scale(lambda)),
            gnn_weights: gg.weights,
            gnn_biases: gg.biases,
        },
    })
}

#[derive(Debug, Clone)]
enum OptimizerState {
    Gd,
    Adam { m: Vec<Matrix>, v: Vec<Matrix>, t: i32 },
}

impl OptimizerState {
    fn new(kind: Optimizer, shapes: &[(usize, usize)]) -> Self {
        match kind {
            Optimizer::Gd => OptimizerState::Gd,
            Optimizer::Adam => OptimizerState::Adam {
                m: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
                v: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
                t: 0,
            },
        }
    }

    fn step(&mut self, params: Vec<&mut Matrix>, grads: &[&Matrix], lr: f64) -> Result<()> {
        match self {
            OptimizerState::Gd => {
                for (p, g) in params.into_iter().zip(grads) {
                    p.add_scaled(g, -lr)?;
                }
            }
            OptimizerState::Adam { m, v, t } => {
                const B1: f64 = 0.9;
                const B2: f64 = 0.999;
                const EPS: f64 = 1e-8;
                *t += 1;
                let c1 = 1.0 - B1.powi(*t);
                let c2 = 1.0 - B2.powi(*t);
                for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
                    let ps = p.as_mut_slice();
                    let ms = m[i].as_mut_slice();
                    let vs = v[i].as_mut_slice();
                    for (j, &gj) in g.as_slice().iter().enumerate() {
                        ms[j] = B1 * ms[j] + (1.0 - B1) * gj;
                        vs[j] = B2 * vs[j] + (1.0 - B2) * gj * gj;
                        ps[j] -= lr * (ms[j] / c1) / ((vs[j] / c2).sqrt() + EPS);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Applies the configured stratified split to a graph.
pub fn prepare(g: &Graph, cfg: &TrainConfig) -> Result<Graph> {
    split_masks(g, cfg.train_frac, cfg.val_frac, cfg.seed)
}

impl TrainState {
    /// Fresh parameters for `g` (which must already carry its split masks).
    pub fn new(g: &Graph, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let stats = train_stats(g)?;
        let k = g.num_classes();
        let transform = TransformParams::init(g.feature_dim(), k, cfg.bias, cfg.seed ^ TRANSFORM_SEED_MIX);
        let gnn = GnnParams::init(g.feature_dim(), cfg.hidden_dim, k, cfg.layers, cfg.bias, cfg.seed)?;
        let cost = if cfg.ablation.uses_cost() {
            CostMatrix::from_stats(&stats, cfg.beta, cfg.cost_lr)?
        } else {
            CostMatrix::uniform(k)
        };
        let bandit = cfg
            .ablation
            .uses_sampler()
            .then(|| BanditState::new(cfg.bandit()))
            .transpose()?;
        let mut t2 = transform.clone();
        let mut g2 = gnn.clone();
        let shapes: Vec<_> = param_tensors_mut(&mut t2, &mut g2).iter().map(|m| m.shape()).collect();
        Ok(TrainState {
            config: cfg.clone(),
            optimizer: OptimizerState::new(cfg.optimizer, &shapes),
            transform,
            gnn,
            cost,
            bandit,
            epoch: 0,
            history: Vec::new(),
            bandit_trace: Vec::new(),
            cost_trace: Vec::new(),
        })
    }

    /// Runs one epoch.
    pub fn step(&mut self, g: &Graph) -> Result<EpochLosses> {
        let cfg = &self.config;
        let epoch = self.epoch + 1;
        let train = g.mask(Split::Train);

        let sg = match self.bandit.as_mut() {
            Some(bandit) => {
                let h = transform(&self.transform, g.features())?;
                let emb = similarity_embedding(&h, cfg.similarity);
                let avg = average_similarity(&emb, g, train)?;
                let outcome = bandit.step(avg);
                let p = bandit.p();
                self.bandit_trace.push(BanditRecord {
                    epoch,
                    avg_similarity: avg,
                    reward: outcome.map(|o| o.reward),
                    p,
                    terminated: bandit.terminated(),
                });
                sample_neighbors(g, &emb, p)?
            }
            None => SampledGraph::full(g),
        };

        let obj = objective(&self.transform, &self.gnn, &self.cost.values, g, &sg, cfg.lambda)?;
        if !obj.l_csgnn.is_finite() {
            return Err(Error::Diverged {
                epoch,
                detail: format!("L_trans = {}, L_GNN = {}", obj.l_trans, obj.l_gnn),
            });
        }

        let mut l_cost = 0.0;
        if cfg.ablation.uses_cost() {
            let stats = train_stats(g)?;
            let before = self.cost.values.clone();
            let distance = self.cost.step(&obj.logits, g.labels(), train, &stats)?;
            let val_error = cost::error_rate(&obj.logits, g.labels(), g.mask(Split::Val));
            l_cost = distance + val_error;
            self.cost_trace.push(CostRecord {
                epoch,
                cost: before,
                target: self.cost.last_target.clone().expect("set by step"),
                distance,
                val_error,
            });
        }

        let grads = obj.grads.tensors();
        let params = param_tensors_mut(&mut self.transform, &mut self.gnn);
        self.optimizer.step(params, &grads, cfg.lr)?;

        let losses = EpochLosses {
            l_trans: obj.l_trans,
            l_gnn: obj.l_gnn,
            l_cost,
            l_csgnn: obj.l_csgnn,
        };
        log::debug!(
            "epoch {epoch}: L_trans {:.6} L_GNN {:.6} L_cost {:.6} L_CSGNN {:.6}",
            losses.l_trans,
            losses.l_gnn,
            losses.l_cost,
            losses.l_csgnn
        );
        self.history.push(losses);
        self.epoch = epoch;
        Ok(losses)
    }

    /// Parameters for inference. The sampling fraction is the frozen value
    /// if the bandit terminated, otherwise the latest one.
    pub fn model(&self) -> Model {
        Model {
            transform: self.transform.clone(),
            gnn: self.gnn.clone(),
            cost: self.cost.values.clone(),
            sampling: self.bandit.as_ref().map(|b| (b.p(), self.config.similarity)),
        }
    }
}

fn train_stats(g: &Graph) -> Result<ClassStats> {
    let train = g.mask(Split::Train);
    if !train.iter().any(|&m| m) {
        return Err(Error::Validation("the training mask is empty; split the graph first".into()));
    }
    g.class_stats(train)
}

/// Trains for `cfg.epochs` epochs on a graph that already carries its
/// split masks and reports metrics on the validation mask.
pub fn train(g: &Graph, cfg: &TrainConfig) -> Result<(TrainState, MetricsReport)> {
    let mut state = TrainState::new(g, cfg)?;
    for _ in 0..cfg.epochs {
        state.step(g)?;
    }
    let report = evaluate(&state.model(), g, Split::Val)?;
    Ok((state, report))
}

/// Predictions for the nodes of one mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Node indices, ascending.
    pub nodes: Vec<usize>,
    pub labels: Vec<usize>,
    /// One probability row per entry of `nodes`.
    pub probabilities: Matrix,
}

/// The neighborhoods the model predicts on.
pub fn prediction_graph(model: &Model, g: &Graph) -> Result<SampledGraph> {
    match model.sampling {
        Some((p, space)) => {
            let h = transform(&model.transform, g.features())?;
            sample_neighbors(g, &similarity_embedding(&h, space), p)
        }
        None => Ok(SampledGraph::full(g)),
    }
}

/// Plain-softmax class probabilities and argmax labels (lowest index on
/// ties) for the nodes selected by `mask`.
pub fn predict(model: &Model, g: &Graph, mask: &[bool]) -> Result<Prediction> {
    if mask.len() != g.num_nodes() {
        return Err(Error::Validation("mask length differs from node count".into()));
    }
    let sg = prediction_graph(model, g)?;
    let (z, _) = gnn::forward(&model.gnn, &sg, g.features())?;
    let probs = cost::cost_softmax(&z, &model.cost, g.labels(), Mode::Infer)?;
    debug_assert_eq!(probs, softmax_rows(&z));
    let nodes: Vec<usize> = (0..g.num_nodes()).filter(|&v| mask[v]).collect();
    let mut probabilities = Matrix::zeros(nodes.len(), z.cols());
    let mut labels = Vec::with_capacity(nodes.len());
    for (i, &v) in nodes.iter().enumerate() {
        probabilities.row_mut(i).copy_from_slice(probs.row(v));
        labels.push(cost::argmax(z.row(v)));
    }
    Ok(Prediction {
        nodes,
        labels,
        probabilities,
    })
}

/// Metrics of a model on one split.
pub fn evaluate(model: &Model, g: &Graph, split: Split) -> Result<MetricsReport> {
    let pred = predict(model, g, g.mask(split))?;
    let truth: Vec<usize> = pred.nodes.iter().map(|&v| g.labels()[v]).collect();
    compute_metrics(&truth, &pred.labels, &pred.probabilities)
}

impl Model {
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut c = Checkpoint::new();
        c.insert("transform.weight", self.transform.weight.clone())?;
        if let Some(b) = &self.transform.bias {
            c.insert("transform.bias", b.clone())?;
        }
        for (l, w) in self.gnn.weights.iter().enumerate() {
            c.insert(&format!("gnn.layer{l}.weight"), w.clone())?;
        }
        if let Some(bs) = &self.gnn.biases {
            for (l, b) in bs.iter().enumerate() {
                c.insert(&format!("gnn.layer{l}.bias"), b.clone())?;
            }
        }
        c.insert("cost.C", self.cost.clone())?;
        if let Some((p, space)) = self.sampling {
            c.insert("sampler.p", Matrix::filled(1, 1, p))?;
            if space == SimilaritySpace::Raw {
                c.insert("sampler.raw", Matrix::filled(1, 1, 1.0))?;
            }
        }
        Ok(c)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let bias_of = |name: &str| c.get(name).cloned();
        let transform = TransformParams {
            weight: c.require("transform.weight")?.clone(),
            bias: bias_of("transform.bias"),
        };
        let mut weights = Vec::new();
        while let Some(w) = c.get(&format!("gnn.layer{}.weight", weights.len())) {
            weights.push(w.clone());
        }
        let biases: Vec<Matrix> = (0..weights.len())
            .map_while(|l| bias_of(&format!("gnn.layer{l}.bias")))
            .collect();
        let biases = match biases.len() {
            0 => None,
            n if n == weights.len() => Some(biases),
            _ => return Err(Error::Checkpoint("encoder biases are present for only some layers".into())),
        };
        let gnn = GnnParams { weights, biases };
        gnn.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
        let cost = c.require("cost.C")?.clone();
        let k = gnn.output_dim();
        if cost.shape() != (k, k) || transform.weight.cols() != k || transform.weight.rows() != gnn.input_dim() {
            return Err(Error::Checkpoint("tensor shapes are inconsistent".into()));
        }
        if let Some(b) = &transform.bias {
            if b.shape() != (1, k) {
                return Err(Error::Checkpoint("transform bias has the wrong shape".into()));
            }
        }
        let sampling = match c.get("sampler.p") {
            Some(p) if p.shape() == (1, 1) && p[(0, 0)] > 0.0 && p[(0, 0)] <= 1.0 => {
                let space = if c.get("sampler.raw").is_some() {
                    SimilaritySpace::Raw
                } else {
                    SimilaritySpace::Softmax
                };
                Some((p[(0, 0)], space))
            }
            Some(_) => return Err(Error::Checkpoint("sampler.p must be a 1x1 value in (0, 1]".into())),
            None => None,
        };
        Ok(Model {
            transform,
            gnn,
            cost,
            sampling,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Ablation;
    use crate::graph::generate_synthetic;
    use crate::numeric::{finite_diff_grad, max_relative_error};

    fn small_graph(seed: u64) -> Graph {
        let g = generate_synthetic(200, 2, 0.3, 0.8, 8, 1.5, seed).unwrap();
        split_masks(&g, 0.3, 0.2, seed).unwrap()
    }

    fn quick(ablation: Ablation) -> TrainConfig {
        TrainConfig {
            epochs: 30,
            hidden_dim: 16,
            ablation,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn history_tracks_epochs() {
        let g = small_graph(1);
        for ab in Ablation::ALL {
            let (state, report) = train(&g, &quick(ab)).unwrap();
            assert_eq!(state.history.len(), state.epoch);
            assert_eq!(state.epoch, 30);
            assert!(state.history.iter().all(|h| h.l_csgnn.is_finite()));
            assert_eq!(state.bandit_trace.len(), if ab.uses_sampler() { 30 } else { 0 });
            assert_eq!(state.cost_trace.len(), if ab.uses_cost() { 30 } else { 0 });
            assert!(report.g_mean <= report.macro_recall + 1e-15);
        }
    }

    #[test]
    fn lambda_zero_drops_the_transform_term() {
        let g = small_graph(2);
        let cfg = TrainConfig {
            lambda: 0.0,
            ..quick(Ablation::Full)
        };
        let (state, _) = train(&g, &cfg).unwrap();
        assert!(state.history.iter().all(|h| h.l_csgnn == h.l_gnn));
        // the transform never moves
        let fresh = TrainState::new(&g, &cfg).unwrap();
        assert_eq!(state.transform, fresh.transform);
    }

    #[test]
    fn objective_gradients() {
        let g = generate_synthetic(40, 2, 0.5, 0.7, 4, 1.0, 3).unwrap();
        let g = split_masks(&g, 0.5, 0.2, 3).unwrap();
        let cfg = TrainConfig {
            hidden_dim: 5,
            bias: true,
            lambda: 0.7,
            ..TrainConfig::default()
        };
        let state = TrainState::new(&g, &cfg).unwrap();
        let sg = SampledGraph::full(&g);
        let obj = objective(&state.transform, &state.gnn, &state.cost.values, &g, &sg, cfg.lambda).unwrap();
        let grads = obj.grads.tensors();
        for i in 0..grads.len() {
            let numeric = {
                let mut t = state.transform.clone();
                let mut gp = state.gnn.clone();
                let at = param_tensors_mut(&mut t, &mut gp)[i].clone();
                finite_diff_grad(
                    |m| {
                        *param_tensors_mut(&mut t, &mut gp)[i] = m.clone();
                        objective(&t, &gp, &state.cost.values, &g, &sg, cfg.lambda).unwrap().l_csgnn
                    },
                    &at,
                    1e-6,
                )
                .unwrap()
            };
            let err = max_relative_error(grads[i], &numeric);
            assert!(err < 1e-4, "tensor {i}: {err}");
        }
    }

    #[test]
    fn checkpoint_roundtrip_preserves_predictions() {
        let g = small_graph(4);
        for bias in [false, true] {
            let cfg = TrainConfig {
                bias,
                similarity: if bias { SimilaritySpace::Raw } else { SimilaritySpace::Softmax },
                ..quick(Ablation::Full)
            };
            let (state, _) = train(&g, &cfg).unwrap();
            let model = state.model();
            let text = model.to_checkpoint().unwrap().to_text();
            let back = Model::from_checkpoint(&Checkpoint::parse(&text).unwrap()).unwrap();
            assert_eq!(back, model);
            let mask = vec![true; g.num_nodes()];
            assert_eq!(predict(&back, &g, &mask).unwrap(), predict(&model, &g, &mask).unwrap());
        }
    }

    #[test]
    fn probabilities_are_normalized() {
        let g = small_graph(5);
        let (state, _) = train(&g, &quick(Ablation::Full)).unwrap();
        let pred = predict(&state.model(), &g, g.mask(Split::Test)).unwrap();
        for i in 0..pred.nodes.len() {
            assert!((pred.probabilities.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_runs_and_lowers_the_loss() {
        let g = small_graph(6);
        let cfg = TrainConfig {
            optimizer: Optimizer::Adam,
            ..quick(Ablation::NoSampler)
        };
        let (state, _) = train(&g, &cfg).unwrap();
        assert!(state.history.last().unwrap().l_gnn < state.history[0].l_gnn);
    }

    #[test]
    fn unsplit_graph_is_rejected() {
        let g = generate_synthetic(100, 2, 0.5, 0.8, 4, 1.0, 0).unwrap();
        assert!(train(&g, &quick(Ablation::Full)).is_err());
    }
}

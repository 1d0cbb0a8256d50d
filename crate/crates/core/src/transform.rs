//! Node feature translator used to score neighbor similarity.
//!
//! One fully connected layer with ReLU maps each feature row to K scores.
//! It is trained with a cross-entropy on the training labels and only feeds
//! the neighbor sampler; predictions never go through it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::nodes_in;
use crate::numeric::{init_uniform, matmul, matmul_tn, relu, softmax_rows, Matrix};

/// Which rows the Euclidean distance between two nodes is taken over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilaritySpace {
    /// Row-softmax of the transformed scores; distances are bounded by sqrt 2.
    #[default]
    Softmax,
    /// Raw ReLU output.
    Raw,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformParams {
    pub weight: Matrix,
    pub bias: Option<Matrix>,
}

impl TransformParams {
    pub fn init(feature_dim: usize, num_classes: usize, with_bias: bool, seed: u64) -> Self {
        TransformParams {
            weight: init_uniform(feature_dim, num_classes, seed, 0x7452_414e),
            bias: with_bias.then(|| Matrix::zeros(1, num_classes)),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.weight.cols()
    }
}

/// `ReLU(X W + b)`, one row per node.
pub fn transform(params: &TransformParams, features: &Matrix) -> Result<Matrix> {
    let mut pre = matmul(features, &params.weight)?;
    if let Some(b) = &params.bias {
        add_row(&mut pre, b)?;
    }
    Ok(relu(&pre))
}

pub(crate) fn add_row(m: &mut Matrix, row: &Matrix) -> Result<()> {
    if row.rows() != 1 || row.cols() != m.cols() {
        return Err(Error::shape("add_row", format!("{:?} onto {:?}", row.shape(), m.shape())));
    }
    let r = row.as_slice().to_vec();
    for i in 0..m.rows() {
        for (x, b) in m.row_mut(i).iter_mut().zip(&r) {
            *x += b;
        }
    }
    Ok(())
}

/// Rows the similarity distance is measured on.
pub fn similarity_embedding(h: &Matrix, space: SimilaritySpace) -> Matrix {
    match space {
        SimilaritySpace::Softmax => softmax_rows(h),
        SimilaritySpace::Raw => h.clone(),
    }
}

/// `1 - ||e_u - e_v||` over rows of an already prepared similarity embedding.
pub fn embedding_similarity(emb: &Matrix, u: usize, v: usize) -> f64 {
    let d2: f64 = emb
        .row(u)
        .iter()
        .zip(emb.row(v))
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    1.0 - d2.sqrt()
}

/// Similarity of nodes `u` and `v` on the row-softmax of `h`.
pub fn pair_similarity(h: &Matrix, u: usize, v: usize) -> f64 {
    let two = Matrix::from_rows(&[h.row(u), h.row(v)]).expect("rows share a width");
    embedding_similarity(&softmax_rows(&two), 0, 1)
}

/// Mean cross-entropy of `softmax(h_v)` against `labels` over masked nodes,
/// with the gradient with respect to `h`.
pub fn cross_entropy_rows(h: &Matrix, labels: &[usize], mask: &[bool]) -> Result<(f64, Matrix)> {
    let nodes = nodes_in(mask);
    if nodes.is_empty() {
        return Err(Error::Validation("loss mask selects no nodes".into()));
    }
    let probs = softmax_rows(h);
    let scale = 1.0 / nodes.len() as f64;
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(h.rows(), h.cols());
    for &v in &nodes {
        let row = h.row(v);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        loss += lse - row[labels[v]];
        let g = grad.row_mut(v);
        g.copy_from_slice(probs.row(v));
        g[labels[v]] -= 1.0;
        for x in g.iter_mut() {
            *x *= scale;
        }
    }
    Ok((loss * scale, grad))
}

#[derive(Debug, Clone)]
pub struct TransformLoss {
    pub loss: f64,
    pub embeddings: Matrix,
    pub grad_weight: Matrix,
    pub grad_bias: Option<Matrix>,
}

/// Forward pass plus the supervised loss and its parameter gradients.
pub fn transform_loss(
    params: &TransformParams,
    features: &Matrix,
    labels: &[usize],
    train_mask: &[bool],
) -> Result<TransformLoss> {
    let h = transform(params, features)?;
    let (loss, mut grad_h) = cross_entropy_rows(&h, labels, train_mask)?;
    // ReLU gate: h > 0 exactly where the pre-activation was positive.
    for (g, &x) in grad_h.as_mut_slice().iter_mut().zip(h.as_slice()) {
        if x <= 0.0 {
            *g = 0.0;
        }
    }
    let grad_weight = matmul_tn(features, &grad_h)?;
    let grad_bias = params.bias.as_ref().map(|_| grad_h.column_sums());
    Ok(TransformLoss {
        loss,
        embeddings: h,
        grad_weight,
        grad_bias,
    })
}

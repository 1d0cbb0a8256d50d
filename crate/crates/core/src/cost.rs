//! Cost-sensitive output layer and the learned cost matrix.
//!
//! During training node `v` is scored with the cost row of its true class:
//! `p_k(v) = C[y_v, k] exp(z_v[k]) / sum_k' C[y_v, k'] exp(z_v[k'])`.
//! At inference the row is all ones, which is the plain softmax.
//!
//! Once per epoch the matrix takes a gradient step on `||T - C||^2` toward a
//! target `T = beta * H ⊙ S ⊙ R` built from class priors (`H`), embedding
//! scatter ratios (`S`) and the normalized confusion matrix (`R`).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{nodes_in, ClassStats};
use crate::numeric::{weighted_softmax_into, Matrix, EPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Cost row chosen by the node's label.
    Train,
    /// All-ones cost row.
    Infer,
}

/// `C_ij = ln(|C_j| / |C_i| + 1)`, diagonal included.
pub fn init_cost(stats: &ClassStats) -> Result<Matrix> {
    let k = stats.num_classes();
    if let Some(class) = stats.counts.iter().position(|&c| c == 0) {
        return Err(Error::MissingClass { class });
    }
    let mut c = Matrix::zeros(k, k);
    for i in 0..k {
        for j in 0..k {
            c[(i, j)] = (stats.counts[j] as f64 / stats.counts[i] as f64).ln_1p();
        }
    }
    Ok(c)
}

/// Cost-weighted softmax of every row of `z`.
pub fn cost_softmax(z: &Matrix, cost: &Matrix, labels: &[usize], mode: Mode) -> Result<Matrix> {
    let k = z.cols();
    if cost.shape() != (k, k) {
        return Err(Error::shape("cost_softmax", format!("cost {:?} for {k} classes", cost.shape())));
    }
    if mode == Mode::Train && labels.len() != z.rows() {
        return Err(Error::shape("cost_softmax", format!("{} labels for {} rows", labels.len(), z.rows())));
    }
    let mut out = Matrix::zeros(z.rows(), k);
    for v in 0..z.rows() {
        let weights = match mode {
            Mode::Train => Some(cost.row(labels[v])),
            Mode::Infer => None,
        };
        let total = weighted_softmax_into(z.row(v), weights, out.row_mut(v));
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::Numeric(format!("cost row for node {v} has no positive mass")));
        }
    }
    Ok(out)
}

/// Mean cost-sensitive cross-entropy over masked nodes and its gradient
/// with respect to the logits.
///
/// The gradient row of a masked node is `(p_v - onehot(y_v)) / |mask|`; the
/// cost weights only enter through `p_v`.
pub fn loss_and_grad(z: &Matrix, cost: &Matrix, labels: &[usize], mask: &[bool]) -> Result<(f64, Matrix)> {
    let nodes = nodes_in(mask);
    if nodes.is_empty() {
        return Err(Error::Validation("loss mask selects no nodes".into()));
    }
    let k = z.cols();
    if cost.shape() != (k, k) {
        return Err(Error::shape("loss_and_grad", format!("cost {:?} for {k} classes", cost.shape())));
    }
    let scale = 1.0 / nodes.len() as f64;
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(z.rows(), k);
    let mut p = vec![0.0; k];
    for &v in &nodes {
        let y = labels[v];
        let row = z.row(v);
        let w = cost.row(y);
        let total = weighted_softmax_into(row, Some(w), &mut p);
        if !(total > 0.0) {
            return Err(Error::Numeric(format!("cost row for node {v} has no positive mass")));
        }
        // -log p_y computed in log space: log(total) - log(C_yy) - (z_y - max).
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        loss += total.ln() - w[y].ln() - (row[y] - max);
        let g = grad.row_mut(v);
        for (gk, pk) in g.iter_mut().zip(&p) {
            *gk = pk * scale;
        }
        g[y] -= scale;
    }
    Ok((loss * scale, grad))
}

/// Target matrix and its three factors.
#[derive(Debug, Clone, PartialEq)]
pub struct CostTarget {
    pub target: Matrix,
    pub histogram: Matrix,
    pub scatter: Matrix,
    pub confusion: Matrix,
}

/// `H(i,j) = max(h_i, h_j)` off the diagonal and `h_i` on it.
pub fn histogram_matrix(priors: &[f64]) -> Matrix {
    let k = priors.len();
    let mut h = Matrix::zeros(k, k);
    for i in 0..k {
        for j in 0..k {
            h[(i, j)] = if i == j { priors[i] } else { priors[i].max(priors[j]) };
        }
    }
    h
}

/// Class-pair scatter ratios on the masked rows of `z`.
///
/// With `w_i` the mean squared distance of class `i` rows to their mean and
/// `b_ij` the squared distance between class means:
/// `S(i,j) = (w_i + w_j) / (b_ij + eps)` and
/// `S(i,i) = w_i / (mean_{j != i} b_ij + eps)`.
pub fn scatter_matrix(z: &Matrix, labels: &[usize], mask: &[bool], k: usize) -> Result<Matrix> {
    let dim = z.cols();
    let mut counts = vec![0usize; k];
    let mut means = Matrix::zeros(k, dim);
    for v in nodes_in(mask) {
        counts[labels[v]] += 1;
        for (m, x) in means.row_mut(labels[v]).iter_mut().zip(z.row(v)) {
            *m += x;
        }
    }
    if let Some(class) = counts.iter().position(|&c| c == 0) {
        return Err(Error::MissingClass { class });
    }
    for c in 0..k {
        let inv = 1.0 / counts[c] as f64;
        means.row_mut(c).iter_mut().for_each(|m| *m *= inv);
    }
    let mut within = vec![0.0; k];
    for v in nodes_in(mask) {
        let c = labels[v];
        within[c] += sq_dist(z.row(v), means.row(c));
    }
    for c in 0..k {
        within[c] /= counts[c] as f64;
    }
    let mut between = Matrix::zeros(k, k);
    for i in 0..k {
        for j in 0..k {
            between[(i, j)] = sq_dist(means.row(i), means.row(j));
        }
    }
    let mut s = Matrix::zeros(k, k);
    for i in 0..k {
        for j in 0..k {
            s[(i, j)] = if i == j {
                let mean_b = (0..k).filter(|&o| o != i).map(|o| between[(i, o)]).sum::<f64>() / (k - 1) as f64;
                within[i] / (mean_b + EPS)
            } else {
                (within[i] + within[j]) / (between[(i, j)] + EPS)
            };
        }
    }
    Ok(s)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// `R(i,j)`: fraction of masked nodes with label `i` predicted as `j`
/// (argmax of the logits).
pub fn confusion_matrix(z: &Matrix, labels: &[usize], mask: &[bool], k: usize) -> Result<Matrix> {
    let nodes = nodes_in(mask);
    if nodes.is_empty() {
        return Err(Error::Validation("confusion mask selects no nodes".into()));
    }
    let mut r = Matrix::zeros(k, k);
    let inv = 1.0 / nodes.len() as f64;
    for v in nodes {
        r[(labels[v], argmax(z.row(v)))] += inv;
    }
    Ok(r)
}

pub fn build_target(z: &Matrix, labels: &[usize], mask: &[bool], stats: &ClassStats, beta: f64) -> Result<CostTarget> {
    let k = stats.num_classes();
    if z.cols() != k {
        return Err(Error::shape("build_target", format!("{} logit columns for {k} classes", z.cols())));
    }
    let histogram = histogram_matrix(&stats.priors);
    let scatter = scatter_matrix(z, labels, mask, k)?;
    let confusion = confusion_matrix(z, labels, mask, k)?;
    let target = histogram.hadamard(&scatter)?.hadamard(&confusion)?.scale(beta);
    Ok(CostTarget {
        target,
        histogram,
        scatter,
        confusion,
    })
}

/// One gradient step on `||T - C||^2`: `C <- C - lr * 2 (C - T)`, clamped at 0.
pub fn update_cost(cost: &Matrix, target: &Matrix, lr: f64) -> Result<Matrix> {
    if cost.shape() != target.shape() {
        return Err(Error::shape("update_cost", format!("{:?} vs {:?}", cost.shape(), target.shape())));
    }
    target.ensure_finite("cost target")?;
    let mut next = cost.clone();
    for (c, t) in next.as_mut_slice().iter_mut().zip(target.as_slice()) {
        *c = (*c - lr * 2.0 * (*c - t)).max(0.0);
    }
    Ok(next)
}

/// `||T - C||^2`.
pub fn cost_distance(cost: &Matrix, target: &Matrix) -> f64 {
    cost.as_slice()
        .iter()
        .zip(target.as_slice())
        .map(|(c, t)| (t - c) * (t - c))
        .sum()
}

/// `1 - accuracy` of logit argmax over masked nodes; 0 for an empty mask.
pub fn error_rate(z: &Matrix, labels: &[usize], mask: &[bool]) -> f64 {
    let nodes = nodes_in(mask);
    if nodes.is_empty() {
        return 0.0;
    }
    let wrong = nodes.iter().filter(|&&v| argmax(z.row(v)) != labels[v]).count();
    wrong as f64 / nodes.len() as f64
}

/// Learned cost matrix with its update hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    pub values: Matrix,
    pub beta: f64,
    pub lr: f64,
    pub last_target: Option<CostTarget>,
}

impl CostMatrix {
    pub fn from_stats(stats: &ClassStats, beta: f64, lr: f64) -> Result<Self> {
        Ok(CostMatrix {
            values: init_cost(stats)?,
            beta,
            lr,
            last_target: None,
        })
    }

    /// All-ones matrix: every mode reduces to the plain softmax.
    pub fn uniform(k: usize) -> Self {
        CostMatrix {
            values: Matrix::filled(k, k, 1.0),
            beta: 0.0,
            lr: 0.0,
            last_target: None,
        }
    }

    /// Builds the target from this epoch's logits and steps toward it.
    /// Returns `||T - C||^2` measured before the step.
    pub fn step(&mut self, z: &Matrix, labels: &[usize], mask: &[bool], stats: &ClassStats) -> Result<f64> {
        let target = build_target(z, labels, mask, stats, self.beta)?;
        let dist = cost_distance(&self.values, &target.target);
        self.values = update_cost(&self.values, &target.target, self.lr)?;
        self.last_target = Some(target);
        Ok(dist)
    }
}

/// Stationary logits of the expected cost-sensitive risk for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    /// Optimal logits, normalized to zero mean.
    pub logits: Vec<f64>,
    /// Max |dR/dz_m| at `logits`.
    pub residual: f64,
    /// Max deviation of `logits` from the closed-form relation
    /// `z_m = log p(m|x) - log sum_y p(y|x) C[y,m] / sum_k C[y,k] exp(z_k)`.
    pub fixed_point_residual: f64,
}

/// Gradient of the risk `R(z) = -sum_y p_y log(C[y,y] e^{z_y} / sum_k C[y,k] e^{z_k})`:
/// `dR/dz_m = sum_y p_y C[y,m] e^{z_m} / sum_k C[y,k] e^{z_k} - p_m`.
pub fn risk_gradient(cost: &Matrix, posteriors: &[f64], z: &[f64]) -> Vec<f64> {
    let k = z.len();
    let mut grad: Vec<f64> = posteriors.iter().map(|p| -p).collect();
    let mut q = vec![0.0; k];
    for (y, &py) in posteriors.iter().enumerate() {
        weighted_softmax_into(z, Some(cost.row(y)), &mut q);
        for m in 0..k {
            grad[m] += py * q[m];
        }
    }
    grad
}

fn risk(cost: &Matrix, posteriors: &[f64], z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    posteriors
        .iter()
        .enumerate()
        .map(|(y, &py)| {
            let lse = cost
                .row(y)
                .iter()
                .zip(z)
                .map(|(c, zk)| c * (zk - max).exp())
                .sum::<f64>()
                .ln()
                + max;
            py * (lse - cost[(y, y)].ln() - z[y])
        })
        .sum()
}

/// Solves `A x = b` for a small dense system by partial pivoting.
fn solve_dense(mut a: Matrix, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[(i, col)].abs().total_cmp(&a[(j, col)].abs()))?;
        if a[(piv, col)].abs() < 1e-300 {
            return None;
        }
        if piv != col {
            for j in 0..n {
                let tmp = a[(col, j)];
                a[(col, j)] = a[(piv, j)];
                a[(piv, j)] = tmp;
            }
            b.swap(col, piv);
        }
        for r in col + 1..n {
            let f = a[(r, col)] / a[(col, col)];
            for j in col..n {
                a[(r, j)] -= f * a[(col, j)];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|j| a[(r, j)] * x[j]).sum();
        x[r] = (b[r] - s) / a[(r, r)];
    }
    Some(x)
}

/// Finds the logits minimizing the expected cost-sensitive loss for class
/// posteriors `posteriors` and checks that the risk gradient vanishes there
/// to 1e-8.
///
/// The risk is convex and invariant to adding a constant to `z`; Newton
/// steps are taken on `H + 11^T`, which keeps the iterate at zero mean.
pub fn calibration_check(cost: &Matrix, posteriors: &[f64]) -> Result<Calibration> {
    const TOL: f64 = 1e-8;
    let k = posteriors.len();
    if cost.shape() != (k, k) || k < 2 {
        return Err(Error::shape("calibration_check", format!("cost {:?} for {k} posteriors", cost.shape())));
    }
    if cost.as_slice().iter().any(|&c| !(c > 0.0) || !c.is_finite()) {
        return Err(Error::Parameter("calibration needs strictly positive costs".into()));
    }
    if posteriors.iter().any(|&p| !(p > 0.0)) || (posteriors.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Parameter("posteriors must be positive and sum to 1".into()));
    }

    let mut z: Vec<f64> = posteriors.iter().map(|p| p.ln()).collect();
    let mean = z.iter().sum::<f64>() / k as f64;
    z.iter_mut().for_each(|x| *x -= mean);
    let mut q = vec![0.0; k];
    for _ in 0..200 {
        let g = risk_gradient(cost, posteriors, &z);
        if g.iter().fold(0.0_f64, |m, x| m.max(x.abs())) < 1e-14 {
            break;
        }
        let mut hess = Matrix::filled(k, k, 1.0);
        for (y, &py) in posteriors.iter().enumerate() {
            weighted_softmax_into(&z, Some(cost.row(y)), &mut q);
            for i in 0..k {
                hess[(i, i)] += py * q[i];
                for j in 0..k {
                    hess[(i, j)] -= py * q[i] * q[j];
                }
            }
        }
        let neg_g: Vec<f64> = g.iter().map(|x| -x).collect();
        let step = solve_dense(hess, neg_g).ok_or_else(|| Error::Numeric("singular Newton system".into()))?;
        let r0 = risk(cost, posteriors, &z);
        let mut t = 1.0;
        loop {
            let cand: Vec<f64> = z.iter().zip(&step).map(|(a, d)| a + t * d).collect();
            if risk(cost, posteriors, &cand) <= r0 || t < 1e-10 {
                z = cand;
                break;
            }
            t *= 0.5;
        }
    }

    let residual = risk_gradient(cost, posteriors, &z)
        .iter()
        .fold(0.0_f64, |m, x| m.max(x.abs()));
    let fixed_point_residual = (0..k)
        .map(|m| {
            let s: f64 = (0..k)
                .map(|y| {
                    let denom: f64 = cost.row(y).iter().zip(&z).map(|(c, zk)| c * zk.exp()).sum();
                    posteriors[y] * cost[(y, m)] / denom
                })
                .sum();
            (z[m] - (posteriors[m].ln() - s.ln())).abs()
        })
        .fold(0.0_f64, f64::max);
    if !(residual < TOL) {
        return Err(Error::Calibration { residual });
    }
    Ok(Calibration {
        logits: z,
        residual,
        fixed_point_residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{finite_diff_grad, max_relative_error, softmax_rows, stream_rng};
    use rand::Rng;

    fn random(rows: usize, cols: usize, lo: f64, hi: f64, seed: u64) -> Matrix {
        let mut rng = stream_rng(seed, 23);
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
    }

    #[test]
    fn init_values() {
        let balanced = init_cost(&ClassStats::from_counts(vec![10, 10]).unwrap()).unwrap();
        assert!(balanced.as_slice().iter().all(|&c| (c - 2f64.ln()).abs() < 1e-15));
        let sichuan = ClassStats::from_counts(vec![4144, 1962]).unwrap();
        let c = init_cost(&sichuan).unwrap();
        assert!((c[(1, 0)] - (4144.0 / 1962.0 + 1.0f64).ln()).abs() < 1e-12);
        assert!((c[(1, 0)] - 1.1353).abs() < 5e-5);
        assert!((c[(0, 0)] - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn cost_softmax_hand_values() {
        let z = Matrix::zeros(1, 2);
        let cost = Matrix::from_rows(&[[1.0, 3.0], [1.0, 1.0]]).unwrap();
        let p = cost_softmax(&z, &cost, &[0], Mode::Train).unwrap();
        assert!((p[(0, 0)] - 0.25).abs() < 1e-15 && (p[(0, 1)] - 0.75).abs() < 1e-15);
        let p = cost_softmax(&z, &cost, &[0], Mode::Infer).unwrap();
        assert_eq!(p.row(0), &[0.5, 0.5]);
    }

    #[test]
    fn ones_cost_is_plain_softmax() {
        let z = random(6, 3, -5.0, 5.0, 1);
        let labels = [0, 1, 2, 0, 1, 2];
        let p = cost_softmax(&z, &Matrix::filled(3, 3, 1.0), &labels, Mode::Train).unwrap();
        assert_eq!(p, softmax_rows(&z));
    }

    #[test]
    fn zero_cost_row_is_a_numeric_error() {
        let z = Matrix::zeros(1, 2);
        let cost = Matrix::from_rows(&[[0.0, 0.0], [1.0, 1.0]]).unwrap();
        assert!(matches!(cost_softmax(&z, &cost, &[0], Mode::Train), Err(Error::Numeric(_))));
    }

    #[test]
    fn loss_cases() {
        let z = Matrix::zeros(2, 2);
        let ones = Matrix::filled(2, 2, 1.0);
        let (loss, _) = loss_and_grad(&z, &ones, &[0, 1], &[true, true]).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-15);
        let z = Matrix::from_rows(&[[900.0, 0.0]]).unwrap();
        let (_, g) = loss_and_grad(&z, &Matrix::filled(2, 2, 1.0), &[0], &[true]).unwrap();
        assert_eq!(g.as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..20 {
            let z = random(6, 3, -2.0, 2.0, seed);
            let cost = random(3, 3, 0.1, 3.0, seed + 100);
            let labels = [0, 1, 2, 2, 1, 0];
            let mask = [true, true, false, true, true, true];
            let (_, g) = loss_and_grad(&z, &cost, &labels, &mask).unwrap();
            let numeric = finite_diff_grad(|m| loss_and_grad(m, &cost, &labels, &mask).unwrap().0, &z, 1e-5).unwrap();
            assert!(max_relative_error(&g, &numeric) < 1e-5);
        }
    }

    #[test]
    fn target_factors() {
        let sichuan = ClassStats::from_counts(vec![4144, 1962]).unwrap();
        let h = histogram_matrix(&sichuan.priors);
        let hb = 4144.0 / 6106.0;
        assert!((h[(0, 1)] - hb).abs() < 1e-15 && (h[(1, 0)] - hb).abs() < 1e-15);
        assert!((h[(0, 0)] - 0.6787).abs() < 5e-5 && (h[(1, 1)] - 0.3213).abs() < 5e-5);

        // Two tight, distinct clusters that are classified correctly.
        let z = Matrix::from_rows(&[[2.0, 0.0], [2.0, 0.0], [0.0, 2.0], [0.0, 2.0]]).unwrap();
        let labels = [0, 0, 1, 1];
        let stats = ClassStats::from_counts(vec![2, 2]).unwrap();
        let t = build_target(&z, &labels, &[true; 4], &stats, 1.0).unwrap();
        assert_eq!(t.confusion.as_slice(), &[0.5, 0.0, 0.0, 0.5]);
        assert_eq!(t.scatter[(0, 1)], 0.0);
        assert_eq!(t.target[(0, 1)], 0.0);
        assert_eq!(t.target[(1, 0)], 0.0);
        assert!(build_target(&z, &labels, &[true, true, false, false], &stats, 1.0).is_err());
    }

    #[test]
    fn update_steps() {
        let t = random(3, 3, 0.0, 2.0, 5);
        assert_eq!(update_cost(&t, &t, 0.3).unwrap(), t);
        let delta = random(3, 3, 0.0, 1.0, 6);
        let mut c = t.clone();
        c.add_scaled(&delta, 1.0).unwrap();
        let next = update_cost(&c, &t, 0.25).unwrap();
        let mut expected = t.clone();
        expected.add_scaled(&delta, 0.5).unwrap();
        assert!(next.sub(&expected).unwrap().max_abs() < 1e-15);
        // contraction by |1 - 2 lr| per step
        let mut c = c.clone();
        for _ in 0..10 {
            let before = cost_distance(&c, &t).sqrt();
            c = update_cost(&c, &t, 0.1).unwrap();
            let after = cost_distance(&c, &t).sqrt();
            assert!((after - 0.8 * before).abs() < 1e-12);
        }
        // clamped at zero
        let c = update_cost(&Matrix::filled(1, 1, 1.0), &Matrix::filled(1, 1, -5.0), 0.4).unwrap();
        assert_eq!(c[(0, 0)], 0.0);
    }

    #[test]
    fn calibration_uniform_and_random() {
        let c = Matrix::filled(2, 2, 1.0);
        let cal = calibration_check(&c, &[0.5, 0.5]).unwrap();
        assert!((cal.logits[0] - cal.logits[1]).abs() < 1e-12);
        for seed in 0..10 {
            let cost = random(3, 3, 0.2, 4.0, seed);
            let mut post: Vec<f64> = random(1, 3, 0.1, 1.0, seed + 50).into_vec();
            let s: f64 = post.iter().sum();
            post.iter_mut().for_each(|p| *p /= s);
            let cal = calibration_check(&cost, &post).unwrap();
            assert!(cal.residual < 1e-8 && cal.fixed_point_residual < 1e-6);
        }
        assert!(calibration_check(&Matrix::filled(2, 2, 0.0), &[0.5, 0.5]).is_err());
        assert!(calibration_check(&c, &[0.7, 0.7]).is_err());
    }

    #[test]
    fn raising_a_cost_lowers_the_optimal_logit() {
        let base = Matrix::from_rows(&[[1.0, 2.0], [0.5, 1.5]]).unwrap();
        let post = [0.3, 0.7];
        let z0 = calibration_check(&base, &post).unwrap().logits;
        let mut bumped = base.clone();
        bumped[(0, 1)] += 0.5;
        let z1 = calibration_check(&bumped, &post).unwrap().logits;
        assert!(z1[1] < z0[1]);
    }
}

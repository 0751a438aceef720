//! Pseudo-classes: the center bank, nearest-center labeling, the pseudo
//! softmax and pseudo center losses, their gradients, and the center update.
//!
//! All losses are sums over the batch, not means.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::softmax_probs;
use crate::tensor::Tensor;

/// `Λ` center vectors, one row per pseudo-class.
#[derive(Debug, Clone, PartialEq)]
pub struct CenterBank {
    centers: Tensor,
}

impl CenterBank {
    /// All-zero bank, the initial state of training.
    pub fn zeros(num_classes: usize, feature_dim: usize) -> Result<Self> {
        Self::from_tensor(Tensor::zeros(&[num_classes, feature_dim]))
    }

    pub fn from_tensor(centers: Tensor) -> Result<Self> {
        if centers.shape().len() != 2 || centers.rows() < 2 || centers.row_len() == 0 {
            return Err(Error::Config(format!(
                "center bank must be [Λ >= 2, feature_dim > 0], got {:?}",
                centers.shape()
            )));
        }
        if !centers.is_finite() {
            return Err(Error::Config("center bank has non-finite entries".into()));
        }
        Ok(CenterBank { centers })
    }

    /// Re-seats the centers on the features of `Λ` distinct samples of the
    /// batch. The first sample is uniform; each further one is drawn with
    /// probability proportional to its squared distance to the nearest
    /// center chosen so far, so duplicate feature vectors are never picked
    /// while a distinct one remains.
    pub fn warm_start(features: &Tensor, num_classes: usize, rng: &mut impl Rng) -> Result<Self> {
        let n = features.rows();
        if n < num_classes {
            return Err(Error::Config(format!(
                "warm start needs at least Λ = {num_classes} samples, batch has {n}"
            )));
        }
        let mut chosen: Vec<usize> = Vec::with_capacity(num_classes);
        let mut nearest = vec![f64::INFINITY; n];
        chosen.push(rng.random_range(0..n));
        while chosen.len() < num_classes {
            let last = features.row(*chosen.last().unwrap());
            for (i, d) in nearest.iter_mut().enumerate() {
                *d = d.min(squared_distance(features.row(i), last));
            }
            let total: f64 = nearest.iter().sum();
            let next = if total > 0.0 {
                let mut target = rng.random_range(0.0..total);
                let mut pick = None;
                for (i, &d) in nearest.iter().enumerate() {
                    if d > 0.0 {
                        pick = Some(i);
                        if target < d {
                            break;
                        }
                        target -= d;
                    }
                }
                pick.expect("positive total implies a positive weight")
            } else {
                // every remaining sample duplicates a chosen one
                let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
                free[rng.random_range(0..free.len())]
            };
            chosen.push(next);
        }
        Self::from_tensor(features.select_rows(&chosen))
    }

    pub fn num_classes(&self) -> usize {
        self.centers.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.centers.row_len()
    }

    pub fn center(&self, j: usize) -> &[f64] {
        self.centers.row(j)
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.centers
    }

    fn check_features(&self, features: &Tensor) -> Result<()> {
        if features.shape().len() != 2 || features.row_len() != self.feature_dim() {
            return Err(Error::ShapeMismatch {
                layer: None,
                expected: vec![features.rows(), self.feature_dim()],
                got: features.shape().to_vec(),
            });
        }
        Ok(())
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Pseudo-labels for one batch plus the full distance matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoAssignment {
    pub labels: Vec<usize>,
    /// `[batch, Λ]` Euclidean (not squared) distances.
    pub distances: Tensor,
}

impl PseudoAssignment {
    /// Number of samples assigned to each pseudo-class.
    pub fn counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.distances.row_len()];
        for &z in &self.labels {
            counts[z] += 1;
        }
        counts
    }

    fn check(&self, batch: usize, num_classes: usize) -> Result<()> {
        if self.labels.len() != batch || self.distances.shape() != [batch, num_classes] {
            return Err(Error::ShapeMismatch {
                layer: None,
                expected: vec![batch, num_classes],
                got: self.distances.shape().to_vec(),
            });
        }
        if let Some(&z) = self.labels.iter().find(|&&z| z >= num_classes) {
            return Err(Error::Config(format!("pseudo-label {z} out of range 0..{num_classes}")));
        }
        Ok(())
    }
}

/// Nearest center for every sample; ties go to the lowest center index.
pub fn assign_pseudo_labels(features: &Tensor, bank: &CenterBank) -> Result<PseudoAssignment> {
    bank.check_features(features)?;
    let (n, l) = (features.rows(), bank.num_classes());
    let mut labels = Vec::with_capacity(n);
    let mut distances = Tensor::zeros(&[n, l]);
    for i in 0..n {
        let f = features.row(i);
        let mut best = (0, f64::INFINITY);
        for j in 0..l {
            let sq = squared_distance(f, bank.center(j));
            if sq < best.1 {
                best = (j, sq);
            }
            distances.row_mut(i)[j] = sq.sqrt();
        }
        labels.push(best.0);
    }
    Ok(PseudoAssignment { labels, distances })
}

/// `Σ_i ‖c_{z_i} − φ_i‖²` over the batch.
pub fn center_loss(features: &Tensor, assignment: &PseudoAssignment, bank: &CenterBank) -> Result<f64> {
    bank.check_features(features)?;
    assignment.check(features.rows(), bank.num_classes())?;
    let mut total = 0.0;
    for (i, &z) in assignment.labels.iter().enumerate() {
        let sq = squared_distance(features.row(i), bank.center(z));
        if cfg!(debug_assertions) {
            let stored = assignment.distances.row(i)[z];
            if (stored - sq.sqrt()).abs() > 1e-9 * (1.0 + stored) {
                return Err(Error::Config(format!(
                    "stale assignment: sample {i} stored distance {stored}, recomputed {}",
                    sq.sqrt()
                )));
            }
        }
        total += sq;
    }
    Ok(total)
}

/// Summed cross-entropy of `softmax(logits)` against the pseudo-labels, and
/// its gradient `p − onehot(z)`.
pub fn softmax_loss(logits: &Tensor, assignment: &PseudoAssignment) -> Result<(f64, Tensor)> {
    if logits.shape().len() != 2 {
        return Err(Error::ShapeMismatch {
            layer: None,
            expected: vec![assignment.labels.len(), assignment.distances.row_len()],
            got: logits.shape().to_vec(),
        });
    }
    assignment.check(logits.rows(), logits.row_len())?;
    let mut grad = softmax_probs(logits);
    let mut loss = 0.0;
    for (i, &z) in assignment.labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[z];
        grad.row_mut(i)[z] -= 1.0;
    }
    Ok((loss, grad))
}

/// The decomposition `L = L_s + λ·L_c` for one batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub softmax_loss: f64,
    pub center_loss: f64,
    pub lambda: f64,
    pub total: f64,
}

pub fn joint_loss(
    features: &Tensor,
    logits: &Tensor,
    assignment: &PseudoAssignment,
    bank: &CenterBank,
    lambda: f64,
) -> Result<LossBreakdown> {
    check_lambda(lambda)?;
    let (softmax_loss, _) = softmax_loss(logits, assignment)?;
    let center_loss = center_loss(features, assignment, bank)?;
    Ok(LossBreakdown {
        softmax_loss,
        center_loss,
        lambda,
        total: softmax_loss + lambda * center_loss,
    })
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Config(format!("lambda must be finite and non-negative, got {lambda}")));
    }
    Ok(())
}

/// The center-loss contribution to `∂L/∂φ`: `2λ(φ_i − c_{z_i})` per row.
pub fn center_feature_grad(
    features: &Tensor,
    assignment: &PseudoAssignment,
    bank: &CenterBank,
    lambda: f64,
) -> Result<Tensor> {
    check_lambda(lambda)?;
    bank.check_features(features)?;
    assignment.check(features.rows(), bank.num_classes())?;
    let mut out = Tensor::zeros(features.shape());
    for (i, &z) in assignment.labels.iter().enumerate() {
        let c = bank.center(z);
        for ((o, f), cv) in out.row_mut(i).iter_mut().zip(features.row(i)).zip(c) {
            *o = 2.0 * lambda * (f - cv);
        }
    }
    Ok(out)
}

/// `∂L/∂φ`: the softmax-path gradient (already pulled back through the head)
/// plus the center term.
pub fn grad_wrt_features(
    grad_from_softmax_path: &Tensor,
    features: &Tensor,
    assignment: &PseudoAssignment,
    bank: &CenterBank,
    lambda: f64,
) -> Result<Tensor> {
    if grad_from_softmax_path.shape() != features.shape() {
        return Err(Error::ShapeMismatch {
            layer: None,
            expected: features.shape().to_vec(),
            got: grad_from_softmax_path.shape().to_vec(),
        });
    }
    let term = center_feature_grad(features, assignment, bank, lambda)?;
    if lambda == 0.0 {
        return Ok(grad_from_softmax_path.clone());
    }
    let mut out = grad_from_softmax_path.clone();
    for (o, t) in out.data_mut().iter_mut().zip(term.data()) {
        *o += t;
    }
    Ok(out)
}

/// Which derivative drives the center update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CenterGradScale {
    /// `∂L_c/∂c_j`, no λ factor.
    #[default]
    Loss,
    /// `∂L/∂c_j = λ·∂L_c/∂c_j`.
    Joint,
}

impl CenterGradScale {
    pub fn factor(self, lambda: f64) -> f64 {
        match self {
            CenterGradScale::Loss => 1.0,
            CenterGradScale::Joint => lambda,
        }
    }
}

impl std::str::FromStr for CenterGradScale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "loss" => Ok(CenterGradScale::Loss),
            "joint" => Ok(CenterGradScale::Joint),
            other => Err(Error::Config(format!(
                "center_grad_scale must be `loss` or `joint`, got `{other}`"
            ))),
        }
    }
}

/// Row `j` is `2·scale·Σ_{i: z_i = j} (c_j − φ_i)`; rows of centers with no
/// assigned sample are exactly zero.
pub fn grad_wrt_centers(
    features: &Tensor,
    assignment: &PseudoAssignment,
    bank: &CenterBank,
    scale: f64,
) -> Result<Tensor> {
    bank.check_features(features)?;
    assignment.check(features.rows(), bank.num_classes())?;
    let mut grad = Tensor::zeros(bank.as_tensor().shape());
    let mut sums = Tensor::zeros(bank.as_tensor().shape());
    for (i, &z) in assignment.labels.iter().enumerate() {
        let c = bank.center(z);
        for ((s, cv), f) in sums.row_mut(z).iter_mut().zip(c).zip(features.row(i)) {
            *s += cv - f;
        }
    }
    for (j, count) in assignment.counts().into_iter().enumerate() {
        if count == 0 {
            continue;
        }
        for (g, s) in grad.row_mut(j).iter_mut().zip(sums.row(j)) {
            *g = 2.0 * scale * s;
        }
    }
    Ok(grad)
}

/// Re-seats every center that no sample chose, in index order, on the batch
/// feature farthest from its nearest center, re-assigning after each move.
/// Returns the new bank, the final assignment and the moved indices.
pub fn reseed_dead_centers(
    features: &Tensor,
    assignment: &PseudoAssignment,
    bank: &CenterBank,
) -> Result<(CenterBank, PseudoAssignment, Vec<usize>)> {
    bank.check_features(features)?;
    assignment.check(features.rows(), bank.num_classes())?;
    let mut bank = bank.clone();
    let mut assignment = assignment.clone();
    let mut moved = Vec::new();
    for j in 0..bank.num_classes() {
        if assignment.counts()[j] > 0 {
            continue;
        }
        let mut far = (0, f64::NEG_INFINITY);
        for (i, &z) in assignment.labels.iter().enumerate() {
            let d = assignment.distances.row(i)[z];
            if d > far.1 {
                far = (i, d);
            }
        }
        if !(far.1 > 0.0) {
            // every sample already sits on a center
            break;
        }
        bank.centers.row_mut(j).copy_from_slice(features.row(far.0));
        assignment = assign_pseudo_labels(features, &bank)?;
        moved.push(j);
    }
    Ok((bank, assignment, moved))
}

/// `c_j ← c_j − lr·g_j`.
pub fn update_centers(bank: &CenterBank, grad_centers: &Tensor, lr: f64) -> Result<CenterBank> {
    if grad_centers.shape() != bank.as_tensor().shape() {
        return Err(Error::ShapeMismatch {
            layer: None,
            expected: bank.as_tensor().shape().to_vec(),
            got: grad_centers.shape().to_vec(),
        });
    }
    if !grad_centers.is_finite() {
        return Err(Error::NonFiniteGradient("center bank".into()));
    }
    let mut next = bank.clone();
    for (c, &g) in next.centers.data_mut().iter_mut().zip(grad_centers.data()) {
        // ±0 gradients leave the entry bit-identical (including a -0.0 center)
        if g != 0.0 {
            *c -= lr * g;
        }
    }
    if !next.centers.is_finite() {
        return Err(Error::NonFiniteGradient("center bank after update".into()));
    }
    Ok(next)
}

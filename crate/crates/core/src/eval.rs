//! Feature-quality measurement: a linear least-squares SVM (ridge-regularized
//! one-vs-rest least squares), k-fold cross-validation, confusion matrices
//! and cluster purity of the pseudo-labels.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::data::{kfold_split, FoldSplit};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_GAMMA: f64 = 1e-3;
/// Candidate ridge values for `--tune-gamma`.
pub const GAMMA_GRID: [f64; 7] = [1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1e0, 1e1];
pub const INNER_FOLDS: usize = 4;

/// One-vs-rest linear model; the last weight row is the bias.
#[derive(Debug, Clone, PartialEq)]
pub struct LssvmModel {
    /// `[feature_dim + 1, num_classes]`.
    pub weights: Tensor,
    pub gamma: f64,
}

impl LssvmModel {
    pub fn new(weights: Tensor, gamma: f64) -> Result<Self> {
        if weights.shape().len() != 2 || weights.rows() < 2 || weights.row_len() == 0 {
            return Err(Error::Eval(format!("bad weight shape {:?}", weights.shape())));
        }
        if !(gamma > 0.0) || !weights.is_finite() {
            return Err(Error::Eval("model needs gamma > 0 and finite weights".into()));
        }
        Ok(LssvmModel { weights, gamma })
    }

    pub fn feature_dim(&self) -> usize {
        self.weights.rows() - 1
    }

    pub fn num_classes(&self) -> usize {
        self.weights.row_len()
    }
}

/// In-place Cholesky solve of `A X = B` for symmetric positive definite `A`
/// (`n × n`, row-major) and `B` (`n × m`).
fn cholesky_solve(a: &mut [f64], b: &mut [f64], n: usize, m: usize) -> Option<()> {
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if !(d > 0.0) {
            return None;
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
    }
    for c in 0..m {
        for i in 0..n {
            let mut s = b[i * m + c];
            for k in 0..i {
                s -= a[i * n + k] * b[k * m + c];
            }
            b[i * m + c] = s / a[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = b[i * m + c];
            for k in i + 1..n {
                s -= a[k * n + i] * b[k * m + c];
            }
            b[i * m + c] = s / a[i * n + i];
        }
    }
    Some(())
}

/// Solves `(XᵀX + γI) W = XᵀY` with `X` the features plus a constant
/// column and `Y` the ±1 one-vs-rest targets.
pub fn lssvm_fit(features: &Tensor, labels: &[usize], num_classes: usize, gamma: f64) -> Result<LssvmModel> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::Eval(format!(
            "gamma must be > 0 (got {gamma}); the unregularized system can be singular"
        )));
    }
    if features.shape().len() != 2 || features.rows() != labels.len() || labels.is_empty() {
        return Err(Error::Eval(format!(
            "{} labels for feature matrix {:?}",
            labels.len(),
            features.shape()
        )));
    }
    if num_classes < 2 {
        return Err(Error::Eval("need at least 2 classes".into()));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::Eval(format!("label {l} out of range 0..{num_classes}")));
    }
    let d = features.row_len() + 1;
    let k = num_classes;
    let mut a = vec![0.0; d * d];
    let mut b = vec![0.0; d * k];
    let mut x = vec![1.0; d];
    for (i, &label) in labels.iter().enumerate() {
        x[..d - 1].copy_from_slice(features.row(i));
        for r in 0..d {
            let xr = x[r];
            if xr == 0.0 {
                continue;
            }
            for c in 0..=r {
                a[r * d + c] += xr * x[c];
            }
            for c in 0..k {
                b[r * k + c] += if c == label { xr } else { -xr };
            }
        }
    }
    for r in 0..d {
        for c in 0..r {
            a[c * d + r] = a[r * d + c];
        }
        a[r * d + r] += gamma;
    }
    cholesky_solve(&mut a, &mut b, d, k)
        .ok_or_else(|| Error::Eval(format!("system is not positive definite at gamma = {gamma}; increase gamma")))?;
    LssvmModel::new(Tensor::new(vec![d, k], b)?, gamma)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub labels: Vec<usize>,
    /// `[N, num_classes]`.
    pub scores: Tensor,
}

/// Class = argmax of the scores, ties to the lowest class index.
pub fn lssvm_predict(model: &LssvmModel, features: &Tensor) -> Result<Prediction> {
    let d = model.feature_dim();
    if features.shape().len() != 2 || features.row_len() != d {
        return Err(Error::ShapeMismatch {
            layer: None,
            expected: vec![features.rows(), d],
            got: features.shape().to_vec(),
        });
    }
    let k = model.num_classes();
    let w = model.weights.data();
    let n = features.rows();
    let mut scores = Tensor::zeros(&[n, k]);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let s = scores.row_mut(i);
        s.copy_from_slice(&w[d * k..]);
        for (j, &f) in features.row(i).iter().enumerate() {
            for (sv, wv) in s.iter_mut().zip(&w[j * k..(j + 1) * k]) {
                *sv += f * wv;
            }
        }
        let mut best = 0;
        for c in 1..k {
            if s[c] > s[best] {
                best = c;
            }
        }
        labels.push(best);
    }
    Ok(Prediction { labels, scores })
}

pub fn accuracy(truth: &[usize], predicted: &[usize]) -> f64 {
    let hits = truth.iter().zip(predicted).filter(|(a, b)| a == b).count();
    hits as f64 / truth.len().max(1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    /// `counts[i][j]` = samples of true class `i` predicted as `j`.
    pub counts: Vec<Vec<usize>>,
    /// Rows divided by their totals; empty rows stay zero.
    pub normalized: Vec<Vec<f64>>,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    fn normalize(counts: Vec<Vec<usize>>) -> Self {
        let normalized = counts
            .iter()
            .map(|row| {
                let total: usize = row.iter().sum();
                row.iter()
                    .map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
                    .collect()
            })
            .collect();
        ConfusionMatrix { counts, normalized }
    }

    pub fn to_csv(&self) -> String {
        let k = self.counts.len();
        let mut out = String::from("true\\predicted");
        for j in 0..k {
            out.push_str(&format!(",{j}"));
        }
        out.push('\n');
        for (i, row) in self.counts.iter().enumerate() {
            out.push_str(&i.to_string());
            for c in row {
                out.push_str(&format!(",{c}"));
            }
            out.push('\n');
        }
        out
    }
}

pub fn confusion_matrix(truth: &[usize], predicted: &[usize], num_classes: usize) -> Result<ConfusionMatrix> {
    if truth.len() != predicted.len() {
        return Err(Error::Eval(format!(
            "{} true labels vs {} predictions",
            truth.len(),
            predicted.len()
        )));
    }
    let mut counts = vec![vec![0usize; num_classes]; num_classes];
    for (&t, &p) in truth.iter().zip(predicted) {
        if t >= num_classes || p >= num_classes {
            return Err(Error::Eval(format!("label pair ({t}, {p}) outside 0..{num_classes}")));
        }
        counts[t][p] += 1;
    }
    Ok(ConfusionMatrix::normalize(counts))
}

/// `(1/N) Σ_pseudo max_true count(pseudo, true)`.
pub fn cluster_purity(pseudo: &[usize], truth: &[usize]) -> Result<f64> {
    if pseudo.is_empty() {
        return Err(Error::Eval("purity of an empty labeling".into()));
    }
    if pseudo.len() != truth.len() {
        return Err(Error::Eval(format!("{} pseudo-labels vs {} true labels", pseudo.len(), truth.len())));
    }
    let mut table: BTreeMap<usize, BTreeMap<usize, usize>> = BTreeMap::new();
    for (&p, &t) in pseudo.iter().zip(truth) {
        *table.entry(p).or_default().entry(t).or_default() += 1;
    }
    let majority: usize = table.values().map(|row| row.values().copied().max().unwrap_or(0)).sum();
    Ok(majority as f64 / pseudo.len() as f64)
}

/// Arithmetic mean and sample (N − 1) standard deviation.
pub fn mean_and_sample_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format: String,
    pub version: u32,
    pub fold_accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    /// Always `"sample"`: the N − 1 denominator.
    pub std_kind: String,
    /// Ridge value used for each fold.
    pub fold_gammas: Vec<f64>,
    pub num_classes: usize,
    pub confusion: ConfusionMatrix,
    pub warnings: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub purity: Option<f64>,
    #[serde(default)]
    pub config: serde_json::Value,
}

impl EvalReport {
    /// Re-derives mean and std from the stored fold accuracies.
    pub fn recompute(&self) -> (f64, f64) {
        mean_and_sample_std(&self.fold_accuracies)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GammaChoice {
    Fixed(f64),
    /// Inner k-fold grid search over [`GAMMA_GRID`] on each training part.
    Tuned { seed: u64 },
}

fn check_split(split: &FoldSplit, n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    for fold in &split.folds {
        for &i in fold {
            if i >= n || std::mem::replace(&mut seen[i], true) {
                return Err(Error::Eval(format!("fold split repeats or overruns sample {i}")));
            }
        }
    }
    if seen.iter().any(|s| !s) {
        return Err(Error::Eval("fold split does not cover every sample".into()));
    }
    Ok(())
}

/// Picks the grid value with the best inner cross-validated accuracy; ties
/// go to the smaller value.
pub fn tune_gamma(features: &Tensor, labels: &[usize], num_classes: usize, seed: u64) -> Result<f64> {
    let folds = INNER_FOLDS.min(labels.len());
    let split = kfold_split(labels.len(), Some(labels), folds, seed)?;
    let mut best = (GAMMA_GRID[0], f64::NEG_INFINITY);
    for &gamma in &GAMMA_GRID {
        let mut accs = Vec::with_capacity(folds);
        for k in 0..folds {
            let (train, test) = train_test(&split, k);
            let model = lssvm_fit(&features.select_rows(&train), &pick(labels, &train), num_classes, gamma)?;
            let pred = lssvm_predict(&model, &features.select_rows(&test))?;
            accs.push(accuracy(&pick(labels, &test), &pred.labels));
        }
        let (mean, _) = mean_and_sample_std(&accs);
        if mean > best.1 {
            best = (gamma, mean);
        }
    }
    Ok(best.0)
}

fn pick(labels: &[usize], idx: &[usize]) -> Vec<usize> {
    idx.iter().map(|&i| labels[i]).collect()
}

fn train_test(split: &FoldSplit, k: usize) -> (Vec<usize>, Vec<usize>) {
    let train: Vec<usize> = split
        .folds
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != k)
        .flat_map(|(_, f)| f.iter().copied())
        .collect();
    (train, split.folds[k].clone())
}

/// Trains on all folds but one and tests on the held-out fold, for every fold.
pub fn cross_validate(
    features: &Tensor,
    labels: &[usize],
    split: &FoldSplit,
    gamma: GammaChoice,
) -> Result<EvalReport> {
    let n = labels.len();
    if features.rows() != n {
        return Err(Error::Eval(format!("{} feature rows vs {n} labels", features.rows())));
    }
    check_split(split, n)?;
    let num_classes = labels.iter().max().map_or(0, |m| m + 1).max(2);
    let mut warnings = split.warnings.clone();
    let mut fold_accuracies = Vec::with_capacity(split.folds.len());
    let mut fold_gammas = Vec::with_capacity(split.folds.len());
    let mut counts = vec![vec![0usize; num_classes]; num_classes];

    for k in 0..split.folds.len() {
        let (train, test) = train_test(split, k);
        let train_set: HashSet<usize> = train.iter().copied().collect();
        if test.iter().any(|i| train_set.contains(i)) {
            return Err(Error::Eval(format!("fold {k}: test samples leak into training")));
        }
        let train_labels = pick(labels, &train);
        let present: HashSet<usize> = train_labels.iter().copied().collect();
        for c in 0..num_classes {
            if !present.contains(&c) && labels.contains(&c) {
                warnings.push(format!("fold {k}: class {c} absent from training"));
            }
        }
        let train_x = features.select_rows(&train);
        let g = match gamma {
            GammaChoice::Fixed(g) => g,
            GammaChoice::Tuned { seed } => tune_gamma(&train_x, &train_labels, num_classes, seed.wrapping_add(k as u64))?,
        };
        let model = lssvm_fit(&train_x, &train_labels, num_classes, g)?;
        let pred = lssvm_predict(&model, &features.select_rows(&test))?;
        let truth = pick(labels, &test);
        for (&t, &p) in truth.iter().zip(&pred.labels) {
            counts[t][p] += 1;
        }
        fold_accuracies.push(accuracy(&truth, &pred.labels));
        fold_gammas.push(g);
    }

    let (mean, std) = mean_and_sample_std(&fold_accuracies);
    Ok(EvalReport {
        format: "pseudoclass-eval".into(),
        version: 1,
        fold_accuracies,
        mean,
        std,
        std_kind: "sample".into(),
        fold_gammas,
        num_classes,
        confusion: ConfusionMatrix::normalize(counts),
        warnings,
        purity: None,
        config: serde_json::Value::Null,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn column(values: &[f64]) -> Tensor {
        Tensor::new(vec![values.len(), 1], values.to_vec()).unwrap()
    }

    /// Two Gaussian-free blobs on either side of the hyperplane x0 + x1 = 0.
    fn separable(seed: u64, n: usize) -> (Tensor, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let c = i % 2;
            let sign = if c == 0 { -1.0 } else { 1.0 };
            let a: f64 = rng.random_range(-1.0..1.0);
            let m: f64 = rng.random_range(0.5..2.0);
            data.extend([sign * m / 2.0 + a, sign * m / 2.0 - a, rng.random_range(-1.0..1.0)]);
            labels.push(c);
        }
        (Tensor::new(vec![n, 3], data).unwrap(), labels)
    }

    #[test]
    fn symmetric_points_split_at_zero() {
        let model = lssvm_fit(&column(&[-1.0, 1.0]), &[0, 1], 2, 1e-6).unwrap();
        // boundary where the two class scores agree
        let w = model.weights.data();
        let boundary = -(w[2] - w[3]) / (w[0] - w[1]);
        assert!(boundary.abs() < 1e-3, "{boundary}");
    }

    #[test]
    fn gamma_must_be_positive() {
        let err = lssvm_fit(&column(&[-1.0, 1.0]), &[0, 1], 2, 0.0).unwrap_err();
        assert!(err.to_string().contains("gamma must be > 0"));
    }

    #[test]
    fn separable_data_is_fit_perfectly() {
        let (x, y) = separable(1, 200);
        let model = lssvm_fit(&x, &y, 2, 1e-3).unwrap();
        let pred = lssvm_predict(&model, &x).unwrap();
        assert_eq!(accuracy(&y, &pred.labels), 1.0);
    }

    #[test]
    fn duplicated_data_equals_halved_gamma() {
        let (x, y) = separable(2, 60);
        let dup_x = Tensor::new(vec![120, 3], [x.data(), x.data()].concat()).unwrap();
        let dup_y = [y.clone(), y.clone()].concat();
        let gamma = 1e-3;
        let dup = lssvm_fit(&dup_x, &dup_y, 2, gamma).unwrap();
        // (2XᵀX + γI)w = 2Xᵀy  ⇔  (XᵀX + γ/2 I)w = Xᵀy
        let half = lssvm_fit(&x, &y, 2, gamma / 2.0).unwrap();
        for (a, b) in dup.weights.data().iter().zip(half.weights.data()) {
            assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()));
        }
        let base = lssvm_fit(&x, &y, 2, gamma).unwrap();
        let probe = separable(3, 50).0;
        assert_eq!(
            lssvm_predict(&dup, &probe).unwrap().labels,
            lssvm_predict(&base, &probe).unwrap().labels
        );
    }

    #[test]
    fn single_class_model_predicts_that_class() {
        let model = LssvmModel::new(Tensor::new(vec![3, 1], vec![0.3, -2.0, 0.1]).unwrap(), 1.0).unwrap();
        let (x, _) = separable(4, 10);
        let x = x.select_rows(&(0..10).collect::<Vec<_>>());
        let x2 = Tensor::new(vec![10, 2], x.data().chunks(3).flat_map(|r| [r[0], r[1]]).collect()).unwrap();
        assert!(lssvm_predict(&model, &x2).unwrap().labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn scores_are_affine_in_features() {
        let (x, y) = separable(5, 40);
        let model = lssvm_fit(&x, &y, 2, 1e-2).unwrap();
        let mut x2 = x.clone();
        x2.data_mut().iter_mut().for_each(|v| *v *= 2.0);
        let s1 = lssvm_predict(&model, &x).unwrap().scores;
        let s2 = lssvm_predict(&model, &x2).unwrap().scores;
        let zero = lssvm_predict(&model, &Tensor::zeros(&[1, 3])).unwrap().scores;
        for i in 0..40 {
            for c in 0..2 {
                let expected = 2.0 * s1.row(i)[c] - zero.row(0)[c];
                assert!((s2.row(i)[c] - expected).abs() <= 1e-12 * (1.0 + expected.abs()));
            }
        }
        assert!(lssvm_predict(&model, &Tensor::zeros(&[1, 4])).is_err());
    }

    #[test]
    fn separable_cross_validation_is_perfect() {
        let (x, y) = separable(6, 100);
        let split = kfold_split(100, Some(&y), 5, 0).unwrap();
        let r = cross_validate(&x, &y, &split, GammaChoice::Fixed(DEFAULT_GAMMA)).unwrap();
        assert_eq!(r.mean, 1.0);
        assert_eq!(r.std, 0.0);
        assert_eq!(r.confusion.total(), 100);
        assert_eq!(r.recompute(), (r.mean, r.std));
    }

    #[test]
    fn random_labels_score_near_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 400;
        let x = Tensor::new(vec![n, 5], (0..n * 5).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let y: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let split = kfold_split(n, Some(&y), 5, 1).unwrap();
        let r = cross_validate(&x, &y, &split, GammaChoice::Fixed(DEFAULT_GAMMA)).unwrap();
        // 3σ binomial bound on the pooled test accuracy
        let bound = 3.0 * (0.25 / n as f64).sqrt();
        assert!((r.mean - 0.5).abs() <= bound, "mean {} bound {bound}", r.mean);
    }

    #[test]
    fn sample_std_of_hand_case() {
        let (m, s) = mean_and_sample_std(&[1.0, 0.5, 0.5]);
        assert!((m - 2.0 / 3.0).abs() < 1e-15);
        assert!((s - (1.0f64 / 12.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn confusion_examples() {
        let t = [0, 1, 2, 1];
        let perfect = confusion_matrix(&t, &t, 3).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(perfect.counts[i][j] > 0, i == j && t.contains(&i));
            }
        }
        let zeros = confusion_matrix(&t, &[0; 4], 3).unwrap();
        assert!(zeros.counts.iter().all(|r| r[1] == 0 && r[2] == 0));
        assert_eq!(zeros.normalized[1][0], 1.0);
        assert!(confusion_matrix(&t, &[0, 0, 3, 0], 3).is_err());
        assert!(confusion_matrix(&t, &[0], 3).is_err());
    }

    #[test]
    fn confusion_matches_counting_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let t: Vec<usize> = (0..100).map(|_| rng.random_range(0..4)).collect();
        let p: Vec<usize> = (0..100).map(|_| rng.random_range(0..4)).collect();
        let m = confusion_matrix(&t, &p, 4).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let oracle = (0..100).filter(|&k| t[k] == i && p[k] == j).count();
                assert_eq!(m.counts[i][j], oracle);
            }
        }
        assert_eq!(m.total(), 100);
    }

    #[test]
    fn purity_examples() {
        let truth: Vec<usize> = (0..50).map(|i| i % 5).collect();
        let renamed: Vec<usize> = truth.iter().map(|&t| (t + 3) % 5 + 10).collect();
        assert_eq!(cluster_purity(&renamed, &truth).unwrap(), 1.0);
        assert_eq!(cluster_purity(&[0; 50], &truth).unwrap(), 0.2);
        assert!(cluster_purity(&[], &[]).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p: Vec<usize> = (0..60).map(|_| rng.random_range(0..4)).collect();
        let t: Vec<usize> = (0..60).map(|_| rng.random_range(0..3)).collect();
        let oracle: usize = (0..4)
            .map(|c| (0..3).map(|k| (0..60).filter(|&i| p[i] == c && t[i] == k).count()).max().unwrap())
            .sum();
        assert_eq!(cluster_purity(&p, &t).unwrap(), oracle as f64 / 60.0);
    }

    #[test]
    fn tuned_gamma_comes_from_grid() {
        let (x, y) = separable(10, 80);
        let split = kfold_split(80, Some(&y), 5, 0).unwrap();
        let r = cross_validate(&x, &y, &split, GammaChoice::Tuned { seed: 1 }).unwrap();
        assert!(r.fold_gammas.iter().all(|g| GAMMA_GRID.contains(g)));
        assert_eq!(r.mean, 1.0);
    }

    #[test]
    fn bad_split_is_rejected() {
        let (x, y) = separable(11, 10);
        let split = FoldSplit {
            folds: vec![vec![0, 1, 2, 3, 4], vec![4, 5, 6, 7, 8, 9]],
            stratified: false,
            warnings: vec![],
        };
        assert!(cross_validate(&x, &y, &split, GammaChoice::Fixed(1e-3)).is_err());
    }
}

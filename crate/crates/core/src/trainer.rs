//! Reference multinomial logistic regression trained on the weighted loss.
//!
//! Parameters start at zero and are fitted with seeded mini-batch gradient
//! descent on the weighted cross-entropy plus an L2 penalty on the weight
//! matrix (the bias is not penalized).

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Label;
use crate::numfmt::{ser_f64, ser_f64_map, ser_opt_f64};
use crate::weighting::{weighted_ce_grad, weighted_ce_loss, WeightingError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("degenerate training data: {0}")]
    DegenerateData(String),
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Loss(#[from] WeightingError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub l2_reg: f64,
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.1,
            epochs: 200,
            batch_size: 32,
            l2_reg: 1e-4,
            rng_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::InvalidConfig("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be positive".into()));
        }
        if !(self.l2_reg >= 0.0 && self.l2_reg.is_finite()) {
            return Err(TrainError::InvalidConfig("l2_reg must be nonnegative".into()));
        }
        Ok(())
    }
}

/// `K × D` weights, `K` biases and the class names in index order.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub classes: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelDoc {
    classes: Vec<String>,
    dim: usize,
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

impl LinearModel {
    pub fn zeros(classes: Vec<String>, dim: usize) -> Self {
        let k = classes.len();
        LinearModel {
            weights: Array2::zeros((k, dim)),
            bias: Array1::zeros(k),
            classes,
        }
    }

    pub fn dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn logits(&self, features: ArrayView2<f64>) -> Array2<f64> {
        features.dot(&self.weights.t()) + &self.bias
    }

    pub fn predict(&self, features: ArrayView2<f64>) -> Vec<usize> {
        self.logits(features)
            .axis_iter(Axis(0))
            .map(|row| argmax(row))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let doc = ModelDoc {
            classes: self.classes.clone(),
            dim: self.dim(),
            weights: self.weights.outer_iter().map(|r| r.to_vec()).collect(),
            bias: self.bias.to_vec(),
        };
        let mut body = serde_json::to_string_pretty(&doc).expect("model serializes");
        body.push('\n');
        fs::write(path, body).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let body = fs::read_to_string(path).map_err(io_err(path))?;
        let doc: ModelDoc = serde_json::from_str(&body).map_err(|e| TrainError::Malformed {
            line: e.line(),
            message: e.to_string(),
        })?;
        let k = doc.classes.len();
        if k < 2 || doc.weights.len() != k || doc.bias.len() != k {
            return Err(TrainError::ShapeMismatch(format!(
                "model has {k} classes, {} weight rows, {} biases",
                doc.weights.len(),
                doc.bias.len()
            )));
        }
        if doc.weights.iter().any(|r| r.len() != doc.dim) {
            return Err(TrainError::ShapeMismatch("weight row length differs from dim".into()));
        }
        let flat: Vec<f64> = doc.weights.concat();
        if flat.iter().chain(&doc.bias).any(|v| !v.is_finite()) {
            return Err(TrainError::ShapeMismatch("model parameters must be finite".into()));
        }
        Ok(LinearModel {
            weights: Array2::from_shape_vec((k, doc.dim), flat).expect("checked shape"),
            bias: Array1::from(doc.bias),
            classes: doc.classes,
        })
    }
}

fn argmax(row: ArrayView1<f64>) -> usize {
    // first maximum wins on ties
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Training objective: weighted mean cross-entropy plus `(l2_reg/2)·‖W‖²`.
pub fn objective(
    model: &LinearModel,
    features: ArrayView2<f64>,
    labels: &[usize],
    weights: &[f64],
    l2_reg: f64,
) -> Result<f64, TrainError> {
    let ce = weighted_ce_loss(model.logits(features).view(), labels, weights)?;
    Ok(ce + 0.5 * l2_reg * model.weights.mapv(|w| w * w).sum())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: LinearModel,
    /// Objective before training followed by the objective after each epoch.
    pub loss_history: Vec<f64>,
}

fn check_training_data(
    features: ArrayView2<f64>,
    labels: &[usize],
    weights: &[f64],
    n_classes: usize,
) -> Result<(), TrainError> {
    let n = features.nrows();
    if labels.len() != n || weights.len() != n {
        return Err(TrainError::ShapeMismatch(format!(
            "{n} feature rows, {} labels, {} weights",
            labels.len(),
            weights.len()
        )));
    }
    if n_classes < 2 {
        return Err(TrainError::ShapeMismatch("need at least 2 classes".into()));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(TrainError::ShapeMismatch("features must be finite".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(TrainError::ShapeMismatch(format!("label {bad} out of range")));
    }
    if let Some((row, &w)) = weights.iter().enumerate().find(|(_, w)| !(**w >= 0.0 && w.is_finite())) {
        return Err(WeightingError::NegativeWeight { row, weight: w }.into());
    }
    if n < n_classes {
        return Err(TrainError::DegenerateData(format!(
            "{n} samples for {n_classes} classes"
        )));
    }
    let first = labels[0];
    if labels.iter().all(|&l| l == first) {
        return Err(TrainError::DegenerateData("only one class present".into()));
    }
    Ok(())
}

/// Fits a model and records the objective after every epoch.
pub fn train_with_history(
    features: ArrayView2<f64>,
    labels: &[usize],
    weights: &[f64],
    classes: &[String],
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    check_training_data(features, labels, weights, classes.len())?;

    let n = features.nrows();
    let mut model = LinearModel::zeros(classes.to_vec(), features.ncols());
    let mut history = Vec::with_capacity(config.epochs + 1);
    history.push(objective(&model, features, labels, weights, config.l2_reg)?);

    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut batch_x = Array2::zeros((config.batch_size.min(n), features.ncols()));
    let mut batch_y = Vec::with_capacity(config.batch_size);
    let mut batch_w = Vec::with_capacity(config.batch_size);

    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            batch_y.clear();
            batch_w.clear();
            for (row, &i) in chunk.iter().enumerate() {
                batch_x.row_mut(row).assign(&features.row(i));
                batch_y.push(labels[i]);
                batch_w.push(weights[i]);
            }
            let xb = batch_x.slice(s![..chunk.len(), ..]);
            let logits = model.logits(xb);
            let grad = weighted_ce_grad(logits.view(), &batch_y, &batch_w)?;
            let mut grad_w = grad.t().dot(&xb);
            if config.l2_reg > 0.0 {
                grad_w.scaled_add(config.l2_reg, &model.weights);
            }
            let grad_b = grad.sum_axis(Axis(0));
            model.weights.scaled_add(-config.learning_rate, &grad_w);
            model.bias.scaled_add(-config.learning_rate, &grad_b);
        }
        history.push(objective(&model, features, labels, weights, config.l2_reg)?);
    }
    Ok(TrainOutcome {
        model,
        loss_history: history,
    })
}

pub fn train(
    features: ArrayView2<f64>,
    labels: &[usize],
    weights: &[f64],
    classes: &[String],
    config: &TrainConfig,
) -> Result<LinearModel, TrainError> {
    train_with_history(features, labels, weights, classes, config).map(|o| o.model)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    #[serde(serialize_with = "ser_f64")]
    pub accuracy: f64,
    #[serde(serialize_with = "ser_f64")]
    pub macro_f1: f64,
    #[serde(serialize_with = "ser_f64_map")]
    pub per_class_f1: BTreeMap<String, f64>,
}

/// `confusion[truth][predicted]` counts.
pub fn confusion_matrix(truth: &[usize], predicted: &[usize], n_classes: usize) -> Vec<Vec<usize>> {
    let mut m = vec![vec![0; n_classes]; n_classes];
    for (&t, &p) in truth.iter().zip(predicted) {
        m[t][p] += 1;
    }
    m
}

/// Accuracy and per-class F1 of `predicted` against `truth`. F1 is 0 for a
/// class whose precision or recall is undefined.
pub fn score_predictions(truth: &[usize], predicted: &[usize], classes: &[String]) -> EvalReport {
    let k = classes.len();
    let m = confusion_matrix(truth, predicted, k);
    let n = truth.len();
    let correct: usize = (0..k).map(|c| m[c][c]).sum();
    let accuracy = if n == 0 { 0.0 } else { correct as f64 / n as f64 };
    let mut per_class_f1 = BTreeMap::new();
    let mut f1_sum = 0.0;
    for (c, name) in classes.iter().enumerate() {
        let tp = m[c][c] as f64;
        let predicted_c: usize = (0..k).map(|t| m[t][c]).sum();
        let actual_c: usize = m[c].iter().sum();
        let f1 = if predicted_c == 0 || actual_c == 0 || tp == 0.0 {
            0.0
        } else {
            let p = tp / predicted_c as f64;
            let r = tp / actual_c as f64;
            2.0 * p * r / (p + r)
        };
        f1_sum += f1;
        per_class_f1.insert(name.clone(), f1);
    }
    EvalReport {
        accuracy,
        macro_f1: f1_sum / k as f64,
        per_class_f1,
    }
}

pub fn evaluate(model: &LinearModel, features: ArrayView2<f64>, labels: &[usize]) -> Result<EvalReport, TrainError> {
    if features.nrows() != labels.len() {
        return Err(TrainError::ShapeMismatch(format!(
            "{} feature rows, {} labels",
            features.nrows(),
            labels.len()
        )));
    }
    if features.ncols() != model.dim() {
        return Err(TrainError::ShapeMismatch(format!(
            "features have dim {}, model expects {}",
            features.ncols(),
            model.dim()
        )));
    }
    if labels.iter().any(|&l| l >= model.classes.len()) {
        return Err(TrainError::ShapeMismatch("label out of model class range".into()));
    }
    Ok(score_predictions(labels, &model.predict(features), &model.classes))
}

/// Features and labels for one split.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub keys: Vec<String>,
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Splits off the first `n_train` rows for training, the rest for testing.
    pub fn split(&self, n_train: usize) -> (Dataset, Dataset) {
        let n_train = n_train.min(self.len());
        let take = |range: std::ops::Range<usize>| Dataset {
            keys: self.keys[range.clone()].to_vec(),
            features: self.features.slice(s![range.clone(), ..]).to_owned(),
            labels: self.labels[range].to_vec(),
        };
        (take(0..n_train), take(n_train..self.len()))
    }
}

/// Number of training rows for a train fraction, rounded to nearest.
pub fn train_count(n: usize, train_fraction: f64) -> usize {
    ((n as f64 * train_fraction).round() as usize).min(n)
}

pub fn sentiment_classes() -> Vec<String> {
    Label::ALL.iter().map(|l| l.as_str().to_string()).collect()
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FeatureRecord {
    key: String,
    vec: Vec<f64>,
    label: Label,
}

/// Reads line-delimited `{key, vec, label}` records. Labels map to indices
/// in [`Label::ALL`] order.
pub fn load_features(path: &Path) -> Result<Dataset, TrainError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut keys = Vec::new();
    let mut flat = Vec::new();
    let mut labels = Vec::new();
    let mut dim = None;
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: FeatureRecord = serde_json::from_str(&line).map_err(|e| TrainError::Malformed {
            line: line_no,
            message: e.to_string(),
        })?;
        let d = *dim.get_or_insert(rec.vec.len());
        if rec.vec.len() != d || d == 0 {
            return Err(TrainError::Malformed {
                line: line_no,
                message: format!("vector has dim {}, expected {d}", rec.vec.len()),
            });
        }
        keys.push(rec.key);
        flat.extend(rec.vec);
        labels.push(Label::ALL.iter().position(|l| *l == rec.label).expect("known label"));
    }
    let dim = dim.unwrap_or(0);
    Ok(Dataset {
        features: Array2::from_shape_vec((keys.len(), dim), flat).expect("rows share dim"),
        keys,
        labels,
    })
}

pub fn save_features(path: &Path, data: &Dataset) -> Result<(), TrainError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut out = std::io::BufWriter::new(file);
    for ((key, row), &label) in data.keys.iter().zip(data.features.outer_iter()).zip(&data.labels) {
        let rec = FeatureRecord {
            key: key.clone(),
            vec: row.to_vec(),
            label: Label::ALL[label],
        };
        serde_json::to_writer(&mut out, &rec).expect("record serializes");
        out.write_all(b"\n").map_err(io_err(path))?;
    }
    out.flush().map_err(io_err(path))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub weighted: EvalReport,
    pub baseline: Option<EvalReport>,
    #[serde(serialize_with = "ser_opt_f64")]
    pub delta_accuracy: Option<f64>,
    #[serde(serialize_with = "ser_opt_f64")]
    pub delta_macro_f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    pub model: LinearModel,
    pub baseline_model: Option<LinearModel>,
    pub report: ExperimentReport,
}

/// Trains on `train` with `weights` and, when `with_baseline`, again with
/// unit weights on the same seed; both are evaluated on `test`.
pub fn run_experiment(
    train_set: &Dataset,
    test_set: &Dataset,
    weights: &[f64],
    classes: &[String],
    with_baseline: bool,
    config: &TrainConfig,
) -> Result<Experiment, TrainError> {
    let model = train(train_set.features.view(), &train_set.labels, weights, classes, config)?;
    let weighted = evaluate(&model, test_set.features.view(), &test_set.labels)?;
    let (baseline_model, baseline) = if with_baseline {
        let ones = vec![1.0; train_set.len()];
        let base = train(train_set.features.view(), &train_set.labels, &ones, classes, config)?;
        let report = evaluate(&base, test_set.features.view(), &test_set.labels)?;
        (Some(base), Some(report))
    } else {
        (None, None)
    };
    let report = ExperimentReport {
        delta_accuracy: baseline.as_ref().map(|b| weighted.accuracy - b.accuracy),
        delta_macro_f1: baseline.as_ref().map(|b| weighted.macro_f1 - b.macro_f1),
        weighted,
        baseline,
    };
    Ok(Experiment {
        model,
        baseline_model,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn classes(k: usize) -> Vec<String> {
        (0..k).map(|i| format!("c{i}")).collect()
    }

    fn blobs(n_per: usize, seed: u64) -> (Array2<f64>, Vec<usize>) {
        // unit-variance blobs centred at (-3,-3) and (3,3): margin far above 4 sigma
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..2 * n_per {
            let c = i % 2;
            let centre = if c == 0 { -3.0 } else { 3.0 };
            rows.push(centre + noise.sample(&mut rng));
            rows.push(centre + noise.sample(&mut rng));
            labels.push(c);
        }
        (Array2::from_shape_vec((2 * n_per, 2), rows).unwrap(), labels)
    }

    #[test]
    fn separable_blobs_fit() {
        let (x, y) = blobs(100, 1);
        let cfg = TrainConfig {
            epochs: 50,
            ..Default::default()
        };
        let outcome = train_with_history(x.view(), &y, &vec![1.0; 200], &classes(2), &cfg).unwrap();
        let report = evaluate(&outcome.model, x.view(), &y).unwrap();
        assert!(report.accuracy >= 0.99, "{}", report.accuracy);
        assert!(outcome.loss_history.last().unwrap() <= &outcome.loss_history[0]);
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let (x, y) = blobs(10, 2);
        let cfg = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        let model = train(x.view(), &y, &[1.0; 20], &classes(2), &cfg).unwrap();
        assert_eq!(model, LinearModel::zeros(classes(2), 2));
    }

    #[test]
    fn weight_scaling_absorbed_by_learning_rate() {
        let (x, y) = blobs(40, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w: Vec<f64> = (0..80).map(|_| rng.random_range(0.1..1.0)).collect();
        let c = 3.7;
        let cw: Vec<f64> = w.iter().map(|v| v * c).collect();
        let cfg = TrainConfig {
            epochs: 20,
            l2_reg: 0.0,
            ..Default::default()
        };
        let scaled_cfg = TrainConfig {
            learning_rate: cfg.learning_rate / c,
            ..cfg.clone()
        };
        let a = train_with_history(x.view(), &y, &w, &classes(2), &cfg).unwrap();
        let b = train_with_history(x.view(), &y, &cw, &classes(2), &scaled_cfg).unwrap();
        for (p, q) in a.model.weights.iter().zip(b.model.weights.iter()) {
            assert!((p - q).abs() < 1e-9);
        }
        for (la, lb) in a.loss_history.iter().zip(&b.loss_history) {
            assert!((la * c - lb).abs() < 1e-9);
        }
        assert_eq!(a.model.predict(x.view()), b.model.predict(x.view()));
    }

    #[test]
    fn deterministic_given_seed() {
        let (x, y) = blobs(30, 5);
        let w = vec![1.0; 60];
        let cfg = TrainConfig {
            epochs: 10,
            rng_seed: 99,
            ..Default::default()
        };
        let a = train(x.view(), &y, &w, &classes(2), &cfg).unwrap();
        let b = train(x.view(), &y, &w, &classes(2), &cfg).unwrap();
        assert!(a
            .weights
            .iter()
            .zip(b.weights.iter())
            .all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn degenerate_and_shape_errors() {
        let x = array![[0.0], [1.0], [2.0]];
        let err = train(x.view(), &[1, 1, 1], &[1.0; 3], &classes(2), &TrainConfig::default());
        assert!(matches!(err, Err(TrainError::DegenerateData(_))));
        let err = train(x.view(), &[0, 1], &[1.0; 3], &classes(2), &TrainConfig::default());
        assert!(matches!(err, Err(TrainError::ShapeMismatch(_))));
        let err = train(
            x.view(),
            &[0, 1, 0],
            &[1.0, -1.0, 1.0],
            &classes(2),
            &TrainConfig::default(),
        );
        assert!(matches!(
            err,
            Err(TrainError::Loss(WeightingError::NegativeWeight { row: 1, .. }))
        ));
        let bad_lr = TrainConfig {
            learning_rate: 0.0,
            ..Default::default()
        };
        assert!(train(x.view(), &[0, 1, 0], &[1.0; 3], &classes(2), &bad_lr).is_err());
    }

    #[test]
    fn perfect_predictions() {
        let r = score_predictions(&[0, 1, 2, 1], &[0, 1, 2, 1], &classes(3));
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.macro_f1, 1.0);
    }

    #[test]
    fn all_class_zero_on_balanced_pair() {
        let r = score_predictions(&[0, 0, 1, 1], &[0, 0, 0, 0], &classes(2));
        assert_eq!(r.accuracy, 0.5);
        assert!((r.per_class_f1["c0"] - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.per_class_f1["c1"], 0.0);
        assert!((r.macro_f1 - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn random_instance_matches_confusion_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let truth: Vec<usize> = (0..200).map(|_| rng.random_range(0..3)).collect();
        let pred: Vec<usize> = (0..200).map(|_| rng.random_range(0..3)).collect();
        let r = score_predictions(&truth, &pred, &classes(3));

        // oracle: per-class one-vs-rest counts by direct enumeration
        let mut f1s = Vec::new();
        for c in 0..3 {
            let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
            for (&t, &p) in truth.iter().zip(&pred) {
                match (t == c, p == c) {
                    (true, true) => tp += 1.0,
                    (false, true) => fp += 1.0,
                    (true, false) => fn_ += 1.0,
                    _ => {}
                }
            }
            f1s.push(2.0 * tp / (2.0 * tp + fp + fn_));
        }
        let acc = truth.iter().zip(&pred).filter(|(t, p)| t == p).count() as f64 / 200.0;
        assert!((r.accuracy - acc).abs() < 1e-15);
        for (c, f1) in f1s.iter().enumerate() {
            assert!((r.per_class_f1[&format!("c{c}")] - f1).abs() < 1e-12);
        }
        assert!((r.macro_f1 - f1s.iter().sum::<f64>() / 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_class_scores_zero() {
        let r = score_predictions(&[0, 1], &[0, 1], &classes(3));
        assert_eq!(r.per_class_f1["c2"], 0.0);
        assert!((r.macro_f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    fn dataset(x: Array2<f64>, y: Vec<usize>) -> Dataset {
        Dataset {
            keys: (0..y.len()).map(|i| format!("k{i}")).collect(),
            features: x,
            labels: y,
        }
    }

    #[test]
    fn experiment_with_unit_weights_has_zero_delta() {
        let (x, y) = blobs(50, 8);
        let data = dataset(x, y);
        let (tr, te) = data.split(70);
        let cfg = TrainConfig {
            epochs: 5,
            ..Default::default()
        };
        let exp = run_experiment(&tr, &te, &vec![1.0; 70], &classes(2), true, &cfg).unwrap();
        assert_eq!(exp.report.delta_accuracy, Some(0.0));
        assert_eq!(exp.report.delta_macro_f1, Some(0.0));
        let again = run_experiment(&tr, &te, &vec![1.0; 70], &classes(2), true, &cfg).unwrap();
        assert_eq!(
            serde_json::to_string(&exp.report).unwrap(),
            serde_json::to_string(&again.report).unwrap()
        );
        let solo = run_experiment(&tr, &te, &vec![1.0; 70], &classes(2), false, &cfg).unwrap();
        assert!(solo.report.baseline.is_none());
    }

    #[test]
    fn model_and_features_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (x, y) = blobs(5, 9);
        let data = dataset(x, y);
        let fpath = dir.path().join("features.jsonl");
        save_features(&fpath, &data).unwrap();
        assert_eq!(load_features(&fpath).unwrap(), data);

        let model = train(
            data.features.view(),
            &data.labels,
            &[1.0; 10],
            &sentiment_classes(),
            &TrainConfig {
                epochs: 3,
                ..Default::default()
            },
        )
        .unwrap();
        let mpath = dir.path().join("model.json");
        model.save(&mpath).unwrap();
        assert_eq!(LinearModel::load(&mpath).unwrap(), model);
    }

    #[test]
    fn split_and_count() {
        assert_eq!(train_count(3000, 2.0 / 3.0), 2000);
        assert_eq!(train_count(10, 1.5), 10);
        let (x, y) = blobs(3, 1);
        let (a, b) = dataset(x, y).split(4);
        assert_eq!((a.len(), b.len()), (4, 2));
        assert_eq!(b.keys[0], "k4");
    }
}

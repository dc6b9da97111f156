//! Per-sample weights and the weighted cross-entropy they scale.
//!
//! A sample's weight is the mean of its image quality, image-text relevance
//! and aspect-image relevance scores, floored at a small positive value so
//! that negative relevance can never flip the sign of a sample's gradient.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numfmt::sig9;

#[derive(Debug, Error, PartialEq)]
pub enum WeightingError {
    #[error("component `{0}` is not finite")]
    NonFiniteComponent(&'static str),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("weight {weight} at row {row} is negative or not finite")]
    NegativeWeight { row: usize, weight: f64 },
    #[error("label {label} at row {row} is outside 0..{classes}")]
    LabelOutOfRange { row: usize, label: usize, classes: usize },
    #[error("invalid weighting config: {0}")]
    InvalidConfig(String),
}

/// The three scores a sample weight averages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    /// Image quality.
    Image,
    /// Coarse image-text relevance.
    Coarse,
    /// Fine aspect-image relevance.
    Fine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightingConfig {
    pub floor_eps: f64,
    /// Components included in the mean; dropping one gives the ablated weight.
    pub components: BTreeSet<Component>,
}

impl Default for WeightingConfig {
    fn default() -> Self {
        WeightingConfig {
            floor_eps: 0.05,
            components: [Component::Image, Component::Coarse, Component::Fine].into(),
        }
    }
}

impl WeightingConfig {
    pub fn validate(&self) -> Result<(), WeightingError> {
        if !(self.floor_eps > 0.0 && self.floor_eps.is_finite()) {
            return Err(WeightingError::InvalidConfig(format!(
                "floor_eps must be positive, got {}",
                self.floor_eps
            )));
        }
        if self.components.is_empty() {
            return Err(WeightingError::InvalidConfig(
                "at least one weight component must be enabled".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleWeight {
    pub raw_mean: f64,
    pub weight: f64,
    /// `(w_image, w_it, w_ai)`, reported even when a component is disabled.
    pub components: (f64, f64, f64),
}

pub fn sample_weight(
    w_image: f64,
    w_it: f64,
    w_ai: f64,
    config: &WeightingConfig,
) -> Result<SampleWeight, WeightingError> {
    config.validate()?;
    for (name, value) in [("w_image", w_image), ("w_it", w_it), ("w_ai", w_ai)] {
        if !value.is_finite() {
            return Err(WeightingError::NonFiniteComponent(name));
        }
    }
    let enabled: Vec<f64> = [
        (Component::Image, w_image),
        (Component::Coarse, w_it),
        (Component::Fine, w_ai),
    ]
    .into_iter()
    .filter(|(c, _)| config.components.contains(c))
    .map(|(_, v)| v)
    .collect();
    let raw_mean = enabled.iter().sum::<f64>() / enabled.len() as f64;
    Ok(SampleWeight {
        raw_mean,
        weight: raw_mean.max(config.floor_eps),
        components: (w_image, w_it, w_ai),
    })
}

fn check_inputs(logits: &ArrayView2<f64>, labels: &[usize], weights: &[f64]) -> Result<(), WeightingError> {
    let (b, k) = logits.dim();
    if b == 0 {
        return Err(WeightingError::ShapeMismatch("empty batch".into()));
    }
    if k < 2 {
        return Err(WeightingError::ShapeMismatch(format!(
            "need at least 2 classes, got {k}"
        )));
    }
    if labels.len() != b || weights.len() != b {
        return Err(WeightingError::ShapeMismatch(format!(
            "{b} logit rows, {} labels, {} weights",
            labels.len(),
            weights.len()
        )));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(WeightingError::ShapeMismatch("logits must be finite".into()));
    }
    for (row, (&label, &weight)) in labels.iter().zip(weights).enumerate() {
        if label >= k {
            return Err(WeightingError::LabelOutOfRange { row, label, classes: k });
        }
        if !(weight >= 0.0 && weight.is_finite()) {
            return Err(WeightingError::NegativeWeight { row, weight });
        }
    }
    Ok(())
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row.mapv_inplace(|v| v / total);
    }
    out
}

/// Mean over the batch of `weight_i * -log softmax(logits_i)[label_i]`.
pub fn weighted_ce_loss(logits: ArrayView2<f64>, labels: &[usize], weights: &[f64]) -> Result<f64, WeightingError> {
    check_inputs(&logits, labels, weights)?;
    let b = logits.nrows();
    let mut total = 0.0;
    for ((row, &label), &weight) in logits.axis_iter(Axis(0)).zip(labels).zip(weights) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let log_z = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += weight * (log_z - row[label]);
    }
    Ok(total / b as f64)
}

/// Gradient of [`weighted_ce_loss`] with respect to the logits.
pub fn weighted_ce_grad(
    logits: ArrayView2<f64>,
    labels: &[usize],
    weights: &[f64],
) -> Result<Array2<f64>, WeightingError> {
    check_inputs(&logits, labels, weights)?;
    let b = logits.nrows() as f64;
    let mut grad = softmax_rows(&logits);
    for ((mut row, &label), &weight) in grad.axis_iter_mut(Axis(0)).zip(labels).zip(weights) {
        row[label] -= 1.0;
        row *= weight / b;
    }
    Ok(grad)
}

/// Writes the `id,weight` CSV.
pub fn write_weights_csv<'a, I>(path: &Path, rows: I) -> std::io::Result<()>
where
    I: IntoIterator<Item = (&'a str, f64)>,
{
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["id", "weight"])?;
    for (id, weight) in rows {
        writer.write_record([id, sig9(weight).as_str()])?;
    }
    writer.flush()
}

#[derive(Debug, Error)]
pub enum WeightsFileError {
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("weights file header must be `id,weight`")]
    BadHeader,
    #[error("row {row}: `{value}` is not a finite weight")]
    BadValue { row: usize, value: String },
    #[error("row {row}: duplicate id `{id}`")]
    DuplicateId { row: usize, id: String },
}

/// Reads an `id,weight` CSV, preserving row order.
pub fn read_weights_csv(path: &Path) -> Result<Vec<(String, f64)>, WeightsFileError> {
    let content = fs::read(path).map_err(csv::Error::from)?;
    let mut reader = csv::Reader::from_reader(content.as_slice());
    if reader.headers()? != vec!["id", "weight"] {
        return Err(WeightsFileError::BadHeader);
    }
    let mut seen = BTreeSet::new();
    let mut rows = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let record = record?;
        let row = idx + 2;
        let id = record.get(0).unwrap_or_default().to_string();
        let value = record.get(1).unwrap_or_default();
        let weight: f64 =
            value
                .parse()
                .ok()
                .filter(|w: &f64| w.is_finite())
                .ok_or_else(|| WeightsFileError::BadValue {
                    row,
                    value: value.to_string(),
                })?;
        if !seen.insert(id.clone()) {
            return Err(WeightsFileError::DuplicateId { row, id });
        }
        rows.push((id, weight));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn weight_examples() {
        let cfg = WeightingConfig::default();
        assert_eq!(sample_weight(1.0, 1.0, 1.0, &cfg).unwrap().weight, 1.0);

        let w = sample_weight(0.9, 0.5, 0.6874, &cfg).unwrap();
        assert!((w.raw_mean - 0.6958).abs() < 1e-12);
        assert_eq!(w.weight, w.raw_mean);

        let w = sample_weight(0.1, -0.9, -0.9, &cfg).unwrap();
        assert!((w.raw_mean - (-1.7 / 3.0)).abs() < 1e-12);
        assert!((w.raw_mean + 0.5667).abs() < 1e-4);
        assert_eq!(w.weight, 0.05);
        assert_eq!(w.components, (0.1, -0.9, -0.9));
    }

    #[test]
    fn weight_rejects_non_finite_and_bad_config() {
        let cfg = WeightingConfig::default();
        assert_eq!(
            sample_weight(f64::NAN, 0.0, 0.0, &cfg),
            Err(WeightingError::NonFiniteComponent("w_image"))
        );
        let zero_floor = WeightingConfig {
            floor_eps: 0.0,
            ..Default::default()
        };
        assert!(sample_weight(1.0, 1.0, 1.0, &zero_floor).is_err());
        let none = WeightingConfig {
            components: BTreeSet::new(),
            ..Default::default()
        };
        assert!(sample_weight(1.0, 1.0, 1.0, &none).is_err());
    }

    #[test]
    fn ablation_drops_one_component() {
        let cfg = WeightingConfig {
            components: [Component::Coarse, Component::Fine].into(),
            ..Default::default()
        };
        let w = sample_weight(0.9, 0.4, 0.2, &cfg).unwrap();
        assert_eq!(w.raw_mean, (0.4 + 0.2) / 2.0);
    }

    #[test]
    fn uniform_logits_give_ln_k() {
        let logits = array![[0.3, 0.3, 0.3]];
        let loss = weighted_ce_loss(logits.view(), &[1], &[1.0]).unwrap();
        assert!((loss - 3f64.ln()).abs() < 1e-15);
        assert!((loss - 1.098_612_3).abs() < 1e-7);
    }

    #[test]
    fn zero_weights_annihilate() {
        let logits = array![[1.0, -2.0], [0.5, 3.0]];
        assert_eq!(weighted_ce_loss(logits.view(), &[0, 0], &[0.0, 0.0]).unwrap(), 0.0);
        let grad = weighted_ce_grad(logits.view(), &[0, 1], &[1.0, 0.0]).unwrap();
        assert!(grad.row(1).iter().all(|&g| g == 0.0));
    }

    /// Straight per-row cross entropy: -ln(exp(z_y) / sum exp(z_j)).
    fn ce_oracle(logits: &[Vec<f64>], labels: &[usize], weights: &[f64]) -> f64 {
        let mut total = 0.0;
        for ((row, &y), &w) in logits.iter().zip(labels).zip(weights) {
            let denom: f64 = row.iter().map(|z| z.exp()).sum();
            total += w * -(row[y].exp() / denom).ln();
        }
        total / logits.len() as f64
    }

    #[test]
    fn random_instance_matches_direct_summation() {
        let rows = vec![
            vec![0.2, -1.3, 0.7],
            vec![1.5, 0.1, -0.4],
            vec![-0.9, 0.0, 2.2],
            vec![0.3, 0.3, -2.0],
        ];
        let labels = [2, 0, 1, 1];
        let weights = [0.4, 1.0, 0.05, 0.8];
        let expected = ce_oracle(&rows, &labels, &weights);
        let logits = Array2::from_shape_vec((4, 3), rows.concat()).unwrap();
        let got = weighted_ce_loss(logits.view(), &labels, &weights).unwrap();
        assert!((got - expected).abs() < 1e-14, "{got} vs {expected}");
    }

    #[test]
    fn saturated_logits_have_near_zero_gradient() {
        let logits = array![[40.0, 0.0, 0.0], [0.0, 0.0, 40.0]];
        let grad = weighted_ce_grad(logits.view(), &[0, 2], &[1.0, 1.0]).unwrap();
        assert!(grad.iter().all(|g| g.abs() < 1e-15));
    }

    #[test]
    fn stable_for_large_logits() {
        let logits = array![[1000.0, 0.0], [-1000.0, 0.0]];
        let loss = weighted_ce_loss(logits.view(), &[1, 0], &[1.0, 1.0]).unwrap();
        assert!((loss - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn input_errors() {
        let logits = array![[0.0, 1.0]];
        assert!(matches!(
            weighted_ce_loss(logits.view(), &[0], &[-0.1]),
            Err(WeightingError::NegativeWeight { row: 0, .. })
        ));
        assert!(matches!(
            weighted_ce_loss(logits.view(), &[0, 1], &[1.0]),
            Err(WeightingError::ShapeMismatch(_))
        ));
        assert!(matches!(
            weighted_ce_loss(array![[1.0]].view(), &[0], &[1.0]),
            Err(WeightingError::ShapeMismatch(_))
        ));
        assert!(matches!(
            weighted_ce_grad(logits.view(), &[2], &[1.0]),
            Err(WeightingError::LabelOutOfRange { .. })
        ));
    }

    fn random_instance(rng: &mut ChaCha8Rng) -> (Array2<f64>, Vec<usize>, Vec<f64>) {
        let b = rng.random_range(1..=8);
        let k = rng.random_range(2..=5);
        let logits = Array2::from_shape_fn((b, k), |_| rng.random_range(-3.0..3.0));
        let labels = (0..b).map(|_| rng.random_range(0..k)).collect();
        let weights = (0..b).map(|_| rng.random_range(0.0..1.5)).collect();
        (logits, labels, weights)
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let h = 1e-5;
        for _ in 0..100 {
            let (logits, labels, weights) = random_instance(&mut rng);
            let grad = weighted_ce_grad(logits.view(), &labels, &weights).unwrap();
            let mut numeric = Array2::zeros(logits.dim());
            for idx in ndarray::indices(logits.dim()) {
                let mut plus = logits.clone();
                plus[idx] += h;
                let mut minus = logits.clone();
                minus[idx] -= h;
                numeric[idx] = (weighted_ce_loss(plus.view(), &labels, &weights).unwrap()
                    - weighted_ce_loss(minus.view(), &labels, &weights).unwrap())
                    / (2.0 * h);
            }
            let diff = (&grad - &numeric).mapv(|v| v * v).sum().sqrt();
            let scale = grad
                .mapv(|v| v * v)
                .sum()
                .sqrt()
                .max(numeric.mapv(|v| v * v).sum().sqrt());
            assert!(diff <= 1e-5 * scale.max(1e-8), "rel err {}", diff / scale);
        }
    }

    #[test]
    fn weights_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.csv");
        write_weights_csv(&path, [("a", 0.6958), ("b,c", 0.05)]).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text, "id,weight\na,0.695800000\n\"b,c\",0.0500000000\n");
        let rows = read_weights_csv(&path).unwrap();
        assert_eq!(rows, vec![("a".to_string(), 0.6958), ("b,c".to_string(), 0.05)]);
    }

    proptest! {
        #[test]
        fn loss_linear_in_weights(seed in any::<u64>(), alpha in 0.0f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (logits, labels, weights) = random_instance(&mut rng);
            let base = weighted_ce_loss(logits.view(), &labels, &weights).unwrap();
            let scaled: Vec<f64> = weights.iter().map(|w| w * alpha).collect();
            let got = weighted_ce_loss(logits.view(), &labels, &scaled).unwrap();
            prop_assert!((got - alpha * base).abs() <= 1e-12 * (1.0 + alpha * base.abs()));
        }

        #[test]
        fn floor_always_holds(a in -5.0f64..5.0, b in -5.0f64..5.0, c in -5.0f64..5.0, eps in 1e-6f64..1.0) {
            let cfg = WeightingConfig { floor_eps: eps, ..Default::default() };
            let w = sample_weight(a, b, c, &cfg).unwrap();
            prop_assert!(w.weight >= eps);
            prop_assert!((w.raw_mean - (a + b + c) / 3.0).abs() < 1e-12);
        }
    }
}

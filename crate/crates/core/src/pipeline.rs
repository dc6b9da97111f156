//! End-to-end scoring: image quality, relevance and weight for every sample.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::imgqual::{score_decoded, DecodedImage, Factor, ImageQualityConfig, QualityError};
use crate::numfmt::{ser_f64, ser_f64_map};
use crate::relevance::{score_corpus, EmbeddingSet, RelevanceConfig};
use crate::trainer::TrainConfig;
use crate::weighting::{sample_weight, WeightingConfig};

/// Every tunable of the pipeline, one section per stage.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub image_quality: ImageQualityConfig,
    pub relevance: RelevanceConfig,
    pub weighting: WeightingConfig,
    pub train: TrainConfig,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, String> {
        let config: PipelineConfig = toml::from_str(text).map_err(|e| e.to_string())?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), String> {
        self.image_quality.validate().map_err(|e| e.to_string())?;
        self.relevance.validate().map_err(|e| e.to_string())?;
        self.weighting.validate().map_err(|e| e.to_string())?;
        self.train.validate().map_err(|e| e.to_string())
    }
}

/// One line of the score report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub id: String,
    #[serde(serialize_with = "ser_f64_map")]
    pub image_scores: BTreeMap<Factor, f64>,
    #[serde(serialize_with = "ser_f64")]
    pub w_image: f64,
    #[serde(serialize_with = "ser_f64")]
    pub w_it: f64,
    #[serde(serialize_with = "ser_f64")]
    pub w_ai: f64,
    #[serde(serialize_with = "ser_f64")]
    pub raw_mean: f64,
    #[serde(serialize_with = "ser_f64")]
    pub weight: f64,
}

/// A validation problem tied to one manifest row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowDiagnostic {
    /// 1-based manifest line (the header is line 1).
    pub row: usize,
    pub id: String,
    pub message: String,
}

impl fmt::Display for RowDiagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "row {} ({}): {}", self.row, self.id, self.message)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AssessError {
    Config(String),
    Rows(Vec<RowDiagnostic>),
}

impl fmt::Display for AssessError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AssessError::Config(msg) => write!(f, "invalid config: {msg}"),
            AssessError::Rows(rows) => {
                writeln!(f, "{} sample(s) failed validation:", rows.len())?;
                for r in rows {
                    writeln!(f, "  {r}")?;
                }
                Ok(())
            }
        }
    }
}

impl std::error::Error for AssessError {}

/// Scores every sample. `load_image` maps an image file name to decoded
/// pixels; it is called once per distinct image, possibly in parallel.
/// Records come back in corpus order.
pub fn assess<F>(
    corpus: &Corpus,
    load_image: F,
    embeddings: EmbeddingSet<'_>,
    config: &PipelineConfig,
) -> Result<Vec<ScoreRecord>, AssessError>
where
    F: Fn(&str) -> Result<DecodedImage, String> + Sync,
{
    config.validate().map_err(AssessError::Config)?;
    let samples = corpus.samples();
    let row_of = |i: usize| i + 2;
    let mut diagnostics = Vec::new();

    let mut first_row: HashMap<&str, usize> = HashMap::new();
    for (i, s) in samples.iter().enumerate() {
        first_row.entry(s.image_file.as_str()).or_insert(i);
    }
    for (i, s) in samples.iter().enumerate() {
        for (table, key) in [
            (embeddings.image, &s.image_file),
            (embeddings.text, &s.id),
            (embeddings.aspect, &s.id),
        ] {
            if table.get(key).is_none() {
                diagnostics.push(RowDiagnostic {
                    row: row_of(i),
                    id: s.id.clone(),
                    message: format!("missing {} embedding for `{key}`", table.kind()),
                });
            }
        }
        for (table, other) in [
            (embeddings.text, embeddings.image),
            (embeddings.aspect, embeddings.image),
        ] {
            if table.dim() != other.dim() && i == 0 {
                diagnostics.push(RowDiagnostic {
                    row: row_of(i),
                    id: s.id.clone(),
                    message: format!(
                        "{} embeddings have dim {} but image embeddings have dim {}",
                        table.kind(),
                        table.dim(),
                        other.dim()
                    ),
                });
            }
        }
    }

    let mut images: Vec<&str> = first_row.keys().copied().collect();
    images.sort_unstable();
    let image_reports: Vec<(&str, Result<_, String>)> = images
        .par_iter()
        .map(|&file| {
            let report = load_image(file).and_then(|decoded| {
                score_decoded(&decoded, corpus.ocr_length(file), corpus.l_max(), &config.image_quality)
                    .map_err(|e: QualityError| e.to_string())
            });
            (file, report)
        })
        .collect();
    let mut quality = HashMap::new();
    for (file, report) in image_reports {
        match report {
            Ok(r) => {
                quality.insert(file, r);
            }
            Err(message) => {
                let i = first_row[file];
                diagnostics.push(RowDiagnostic {
                    row: row_of(i),
                    id: samples[i].id.clone(),
                    message: format!("image `{file}`: {message}"),
                });
            }
        }
    }

    if !diagnostics.is_empty() {
        diagnostics.sort_by(|a, b| (a.row, &a.message).cmp(&(b.row, &b.message)));
        return Err(AssessError::Rows(diagnostics));
    }

    let relevance =
        score_corpus(corpus, embeddings, &config.relevance).map_err(|e| AssessError::Config(e.to_string()))?;

    samples
        .iter()
        .zip(relevance)
        .enumerate()
        .map(|(i, (s, rel))| {
            let q = &quality[s.image_file.as_str()];
            let w = sample_weight(q.w_image, rel.w_it, rel.w_ai, &config.weighting).map_err(|e| {
                AssessError::Rows(vec![RowDiagnostic {
                    row: row_of(i),
                    id: s.id.clone(),
                    message: e.to_string(),
                }])
            })?;
            Ok(ScoreRecord {
                id: s.id.clone(),
                image_scores: q.per_factor.clone(),
                w_image: q.w_image,
                w_it: rel.w_it,
                w_ai: rel.w_ai,
                raw_mean: w.raw_mean,
                weight: w.weight,
            })
        })
        .collect()
}

/// Summary of a weight distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightStats {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub min: f64,
    pub max: f64,
    /// Lower edge of the first bin and upper edge of the last.
    pub range: (f64, f64),
    pub counts: Vec<usize>,
}

/// Histogram over `[min(0, lowest), max(1, highest)]` with equal-width bins;
/// the top edge is closed. Returns `None` for an empty input.
pub fn weight_stats(weights: &[f64], bins: usize) -> Option<WeightStats> {
    if weights.is_empty() || bins == 0 {
        return None;
    }
    let mut sorted = weights.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let min = sorted[0];
    let max = sorted[n - 1];
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    };
    let lo = min.min(0.0);
    let hi = max.max(1.0);
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0; bins];
    for &w in &sorted {
        let b = (((w - lo) / width).floor() as usize).min(bins - 1);
        counts[b] += 1;
    }
    Some(WeightStats {
        count: n,
        mean: sorted.iter().sum::<f64>() / n as f64,
        median,
        min,
        max,
        range: (lo, hi),
        counts,
    })
}

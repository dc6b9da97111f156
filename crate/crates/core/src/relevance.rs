//! Cross-modal relevance from joint-space embeddings.
//!
//! Coarse relevance compares a sample's image with its text; fine relevance
//! compares the aspect term with the image. Both are temperature-scaled
//! cosine similarities. In [`RelevanceMode::Contrastive`] the paired score
//! is turned into a softmax probability against in-batch negatives.

use rand::seq::index;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, EmbeddingKind, EmbeddingTable};

#[derive(Debug, Error, PartialEq)]
pub enum RelevanceError {
    #[error("cannot normalize a zero vector")]
    ZeroVector,
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("batch of {batch} cannot supply {k} negatives")]
    BatchTooSmall { batch: usize, k: usize },
    #[error("missing {kind} embedding for `{key}`")]
    MissingEmbedding { kind: EmbeddingKind, key: String },
    #[error("invalid relevance config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RelevanceMode {
    /// Scaled cosine with the paired item only.
    #[default]
    Raw,
    /// Softmax probability of the paired item against sampled negatives.
    Contrastive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RelevanceConfig {
    /// Log-scale temperature; cosines are multiplied by `exp(temperature)`.
    pub temperature: f64,
    pub mode: RelevanceMode,
    pub negatives_per_sample: usize,
    pub rng_seed: u64,
}

impl Default for RelevanceConfig {
    fn default() -> Self {
        RelevanceConfig {
            temperature: 0.0,
            mode: RelevanceMode::Raw,
            negatives_per_sample: 15,
            rng_seed: 0,
        }
    }
}

impl RelevanceConfig {
    pub fn scale(&self) -> f64 {
        self.temperature.exp()
    }

    pub fn validate(&self) -> Result<(), RelevanceError> {
        if self.negatives_per_sample == 0 {
            return Err(RelevanceError::InvalidConfig(
                "negatives_per_sample must be at least 1".into(),
            ));
        }
        if !self.scale().is_finite() {
            return Err(RelevanceError::InvalidConfig(format!(
                "exp(temperature) is not finite for temperature {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelevanceScores {
    pub w_it: f64,
    pub w_ai: f64,
}

pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>, RelevanceError> {
    // scale by the largest magnitude first so tiny or huge inputs don't under/overflow
    let amax = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if amax == 0.0 {
        return Err(RelevanceError::ZeroVector);
    }
    let scaled: Vec<f64> = v.iter().map(|x| x / amax).collect();
    let norm = scaled.iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok(scaled.into_iter().map(|x| x / norm).collect())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity multiplied by `exp(temperature)`.
pub fn scaled_cosine(a: &[f64], b: &[f64], temperature: f64) -> Result<f64, RelevanceError> {
    if a.len() != b.len() {
        return Err(RelevanceError::DimMismatch(a.len(), b.len()));
    }
    let cos = dot(&l2_normalize(a)?, &l2_normalize(b)?).clamp(-1.0, 1.0);
    Ok(cos * temperature.exp())
}

/// Draws `k` distinct keys uniformly without replacement from `batch`,
/// never returning the key at `positive`.
pub fn sample_negatives<'a, T, R: Rng + ?Sized>(
    batch: &'a [T],
    positive: usize,
    k: usize,
    rng: &mut R,
) -> Result<Vec<&'a T>, RelevanceError> {
    if batch.len() < 2 || k + 1 > batch.len() || positive >= batch.len() {
        return Err(RelevanceError::BatchTooSmall { batch: batch.len(), k });
    }
    Ok(index::sample(rng, batch.len() - 1, k)
        .into_iter()
        .map(|i| if i >= positive { &batch[i + 1] } else { &batch[i] })
        .collect())
}

/// Softmax over `[anchor·positive, anchor·negatives...]`, positive first.
pub fn contrastive_distribution(
    anchor: &[f64],
    positive: &[f64],
    negatives: &[&[f64]],
    temperature: f64,
) -> Result<Vec<f64>, RelevanceError> {
    let mut logits = Vec::with_capacity(negatives.len() + 1);
    logits.push(scaled_cosine(anchor, positive, temperature)?);
    for neg in negatives {
        logits.push(scaled_cosine(anchor, neg, temperature)?);
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

fn paired_score(
    anchor: &[f64],
    paired: &[f64],
    negatives: &[&[f64]],
    config: &RelevanceConfig,
) -> Result<f64, RelevanceError> {
    match config.mode {
        RelevanceMode::Raw => scaled_cosine(anchor, paired, config.temperature),
        RelevanceMode::Contrastive => Ok(contrastive_distribution(anchor, paired, negatives, config.temperature)?[0]),
    }
}

/// Image-text relevance. Negatives are other texts; ignored in raw mode.
pub fn coarse_relevance(
    image: &[f64],
    text: &[f64],
    negative_texts: &[&[f64]],
    config: &RelevanceConfig,
) -> Result<f64, RelevanceError> {
    paired_score(image, text, negative_texts, config)
}

/// Aspect-image relevance. Negatives are other images; ignored in raw mode.
pub fn fine_relevance(
    aspect: &[f64],
    image: &[f64],
    negative_images: &[&[f64]],
    config: &RelevanceConfig,
) -> Result<f64, RelevanceError> {
    paired_score(aspect, image, negative_images, config)
}

/// The three embedding tables a corpus is scored against.
#[derive(Debug, Clone, Copy)]
pub struct EmbeddingSet<'a> {
    pub image: &'a EmbeddingTable,
    pub text: &'a EmbeddingTable,
    pub aspect: &'a EmbeddingTable,
}

impl EmbeddingSet<'_> {
    /// Ids of samples lacking any of their three embeddings, with the kind missing.
    pub fn missing(&self, corpus: &Corpus) -> Vec<RelevanceError> {
        let mut missing = Vec::new();
        for s in corpus.samples() {
            for (table, key) in [(self.image, &s.image_file), (self.text, &s.id), (self.aspect, &s.id)] {
                if table.get(key).is_none() {
                    missing.push(RelevanceError::MissingEmbedding {
                        kind: table.kind(),
                        key: key.clone(),
                    });
                }
            }
        }
        missing
    }
}

fn lookup<'t>(table: &'t EmbeddingTable, key: &str) -> Result<&'t [f64], RelevanceError> {
    table.get(key).ok_or_else(|| RelevanceError::MissingEmbedding {
        kind: table.kind(),
        key: key.to_string(),
    })
}

/// Scores every sample of the corpus, in corpus order.
///
/// The corpus is the negative pool: coarse negatives are texts of other
/// samples, fine negatives are other distinct images. Pools are ordered by
/// key and each sample's generator is seeded with `rng_seed ^ rank`, where
/// `rank` is the sample's position in id order, so scores do not depend on
/// manifest row order.
pub fn score_corpus(
    corpus: &Corpus,
    embeddings: EmbeddingSet<'_>,
    config: &RelevanceConfig,
) -> Result<Vec<RelevanceScores>, RelevanceError> {
    config.validate()?;
    let samples = corpus.samples();
    let mut text_pool: Vec<&str> = samples.iter().map(|s| s.id.as_str()).collect();
    text_pool.sort_unstable();
    let mut image_pool: Vec<&str> = samples.iter().map(|s| s.image_file.as_str()).collect();
    image_pool.sort_unstable();
    image_pool.dedup();

    samples
        .iter()
        .map(|s| {
            let image = lookup(embeddings.image, &s.image_file)?;
            let text = lookup(embeddings.text, &s.id)?;
            let aspect = lookup(embeddings.aspect, &s.id)?;
            if config.mode == RelevanceMode::Raw {
                return Ok(RelevanceScores {
                    w_it: coarse_relevance(image, text, &[], config)?,
                    w_ai: fine_relevance(aspect, image, &[], config)?,
                });
            }
            let rank = text_pool.binary_search(&s.id.as_str()).expect("id in pool");
            let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed ^ rank as u64);

            let k = config.negatives_per_sample.min(text_pool.len().saturating_sub(1));
            let neg_texts = sample_negatives(&text_pool, rank, k, &mut rng)?
                .into_iter()
                .map(|key| lookup(embeddings.text, key))
                .collect::<Result<Vec<_>, _>>()?;

            let img_rank = image_pool.binary_search(&s.image_file.as_str()).expect("image in pool");
            let k = config.negatives_per_sample.min(image_pool.len().saturating_sub(1));
            let neg_images = sample_negatives(&image_pool, img_rank, k, &mut rng)?
                .into_iter()
                .map(|key| lookup(embeddings.image, key))
                .collect::<Result<Vec<_>, _>>()?;

            Ok(RelevanceScores {
                w_it: coarse_relevance(image, text, &neg_texts, config)?,
                w_ai: fine_relevance(aspect, image, &neg_images, config)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(l2_normalize(&[3.0, 4.0]).unwrap(), vec![0.6, 0.8]);
        let u = [0.0, 1.0, 0.0];
        assert_eq!(l2_normalize(&u).unwrap(), u.to_vec());
        assert_eq!(l2_normalize(&[0.0, 0.0]), Err(RelevanceError::ZeroVector));
    }

    #[test]
    fn normalize_extreme_magnitudes() {
        let tiny = l2_normalize(&[1e-200, 1e-200]).unwrap();
        assert!(close(tiny[0], std::f64::consts::FRAC_1_SQRT_2, 1e-15));
        let huge = l2_normalize(&[1e200, -1e200]).unwrap();
        assert!(close(huge[1], -std::f64::consts::FRAC_1_SQRT_2, 1e-15));
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn cosine_examples() {
        let u = [0.3, -1.2, 2.0];
        assert!(close(scaled_cosine(&u, &u, 0.0).unwrap(), 1.0, 1e-15));
        assert_eq!(scaled_cosine(&[1.0, 0.0], &[0.0, 1.0], 0.0).unwrap(), 0.0);
        let s = scaled_cosine(&[1.0, 0.0], &[1.0, 1.0], std::f64::consts::LN_2).unwrap();
        // oracle: angle is 45 degrees, cos(pi/4) computed via trig
        let oracle = 2.0 * (std::f64::consts::PI / 4.0).cos();
        assert!(close(s, oracle, 1e-12));
        assert!(close(s, 1.414_213_56, 1e-8));
        assert_eq!(
            scaled_cosine(&[1.0], &[1.0, 2.0], 0.0),
            Err(RelevanceError::DimMismatch(1, 2))
        );
    }

    #[test]
    fn negatives_forced_and_deterministic() {
        let keys = ["a", "b"];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(sample_negatives(&keys, 0, 1, &mut rng).unwrap(), vec![&"b"]);
        assert_eq!(sample_negatives(&keys, 1, 1, &mut rng).unwrap(), vec![&"a"]);

        let batch: Vec<u32> = (0..20).collect();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sample_negatives(&batch, 7, 5, &mut rng)
                .unwrap()
                .into_iter()
                .copied()
                .collect::<Vec<_>>()
        };
        let first = draw(42);
        assert_eq!(first, draw(42));
        assert!(!first.contains(&7));
        let mut dedup = first.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), 5);
    }

    #[test]
    fn negatives_batch_too_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            sample_negatives(&["only"], 0, 1, &mut rng),
            Err(RelevanceError::BatchTooSmall { batch: 1, k: 1 })
        ));
        assert!(matches!(
            sample_negatives(&["a", "b", "c"], 0, 3, &mut rng),
            Err(RelevanceError::BatchTooSmall { .. })
        ));
    }

    #[test]
    fn negatives_are_uniform() {
        // statistical oracle: each of the 4 negatives should appear 25% of the time
        let batch = [0usize, 1, 2, 3, 4];
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut counts = [0usize; 5];
        let draws = 100_000;
        for _ in 0..draws {
            counts[*sample_negatives(&batch, 2, 1, &mut rng).unwrap()[0]] += 1;
        }
        assert_eq!(counts[2], 0);
        for (i, c) in counts.iter().enumerate().filter(|(i, _)| *i != 2) {
            let p = *c as f64 / draws as f64;
            assert!((p - 0.25).abs() < 0.01, "negative {i} frequency {p}");
        }
    }

    #[test]
    fn coarse_examples() {
        let raw = RelevanceConfig::default();
        let img = [0.2, 0.7, -0.1];
        assert!(close(coarse_relevance(&img, &img, &[], &raw).unwrap(), 1.0, 1e-15));
        let anti = img.map(|x| -x);
        assert!(close(coarse_relevance(&img, &anti, &[], &raw).unwrap(), -1.0, 1e-15));

        let contrastive = RelevanceConfig {
            mode: RelevanceMode::Contrastive,
            ..Default::default()
        };
        let image = [1.0, 0.0];
        let paired = [2.0, 0.0];
        let orth = [0.0, 3.0];
        let p = coarse_relevance(&image, &paired, &[&orth], &contrastive).unwrap();
        let e = std::f64::consts::E;
        assert!(close(p, e / (e + 1.0), 1e-15));
        assert!(close(p, 0.731_06, 1e-5));
    }

    #[test]
    fn fine_examples() {
        let raw = RelevanceConfig::default();
        let image = [0.5, 0.5, 0.1];
        assert!(close(
            fine_relevance(&[1.0, 1.0, 0.2], &image, &[], &raw).unwrap(),
            1.0,
            1e-15
        ));
        let a1 = fine_relevance(&[1.0, 0.0, 0.0], &image, &[], &raw).unwrap();
        let a2 = fine_relevance(&[0.0, 0.0, 1.0], &image, &[], &raw).unwrap();
        assert!(a1 != a2);
        assert_eq!(a1, fine_relevance(&[1.0, 0.0, 0.0], &image, &[], &raw).unwrap());
    }

    fn table(kind: EmbeddingKind, rows: &[(&str, [f64; 2])]) -> EmbeddingTable {
        let mut t = EmbeddingTable::new(kind, 2);
        for (k, v) in rows {
            t.insert(*k, v.to_vec()).unwrap();
        }
        t
    }

    fn toy_corpus(order: &[usize]) -> Corpus {
        use crate::corpus::{corpus_from_ocr, Label, Sample};
        let all: Vec<Sample> = (0..4)
            .map(|i| Sample {
                id: format!("s{i}"),
                image_file: format!("{}.png", i / 2),
                text: format!("text {i}"),
                aspect: "text".into(),
                label: Label::Neutral,
            })
            .collect();
        corpus_from_ocr(order.iter().map(|&i| all[i].clone()).collect(), &BTreeMap::new())
    }

    #[test]
    fn corpus_scores_ignore_row_order() {
        let image = table(EmbeddingKind::Image, &[("0.png", [1.0, 0.2]), ("1.png", [-0.3, 1.0])]);
        let text = table(
            EmbeddingKind::Text,
            &[
                ("s0", [1.0, 0.0]),
                ("s1", [0.5, 0.5]),
                ("s2", [0.0, 1.0]),
                ("s3", [-1.0, 0.4]),
            ],
        );
        let aspect = table(
            EmbeddingKind::Aspect,
            &[
                ("s0", [0.1, 0.0]),
                ("s1", [0.5, -0.5]),
                ("s2", [0.2, 1.0]),
                ("s3", [1.0, 1.0]),
            ],
        );
        let set = EmbeddingSet {
            image: &image,
            text: &text,
            aspect: &aspect,
        };
        for mode in [RelevanceMode::Raw, RelevanceMode::Contrastive] {
            let config = RelevanceConfig {
                mode,
                negatives_per_sample: 2,
                rng_seed: 9,
                ..Default::default()
            };
            let forward = score_corpus(&toy_corpus(&[0, 1, 2, 3]), set, &config).unwrap();
            let shuffled = score_corpus(&toy_corpus(&[2, 0, 3, 1]), set, &config).unwrap();
            for (pos, &i) in [2usize, 0, 3, 1].iter().enumerate() {
                assert_eq!(shuffled[pos], forward[i], "{mode:?}");
            }
            if mode == RelevanceMode::Contrastive {
                assert!(forward.iter().all(|s| s.w_it > 0.0 && s.w_it < 1.0));
            }
        }
    }

    #[test]
    fn corpus_missing_embedding() {
        let image = table(EmbeddingKind::Image, &[("0.png", [1.0, 0.2])]);
        let text = table(EmbeddingKind::Text, &[("s0", [1.0, 0.0]), ("s1", [0.5, 0.5])]);
        let aspect = table(EmbeddingKind::Aspect, &[("s0", [1.0, 0.0]), ("s1", [0.5, 0.5])]);
        let set = EmbeddingSet {
            image: &image,
            text: &text,
            aspect: &aspect,
        };
        let corpus = toy_corpus(&[0, 1, 2]);
        let missing = set.missing(&corpus);
        assert_eq!(missing.len(), 3);
        assert!(matches!(
            score_corpus(&corpus, set, &RelevanceConfig::default()),
            Err(RelevanceError::MissingEmbedding { .. })
        ));
    }

    fn vec_pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (2usize..64).prop_flat_map(|d| {
            (
                prop::collection::vec(-10.0f64..10.0, d),
                prop::collection::vec(-10.0f64..10.0, d),
            )
        })
    }

    proptest! {
        #[test]
        fn cosine_symmetric_scale_invariant_bounded(
            (a, b) in vec_pair(),
            alpha in 1e-3f64..1e3,
            beta in 1e-3f64..1e3,
            t in -2.0f64..4.0,
        ) {
            prop_assume!(a.iter().any(|x| *x != 0.0) && b.iter().any(|x| *x != 0.0));
            let s = scaled_cosine(&a, &b, t).unwrap();
            prop_assert!((s - scaled_cosine(&b, &a, t).unwrap()).abs() <= 1e-12);
            let sa: Vec<f64> = a.iter().map(|x| x * alpha).collect();
            let sb: Vec<f64> = b.iter().map(|x| x * beta).collect();
            prop_assert!((s - scaled_cosine(&sa, &sb, t).unwrap()).abs() <= 1e-12 * t.exp().max(1.0));
            prop_assert!(s.abs() <= t.exp() + 1e-12);
            let n = l2_normalize(&a).unwrap();
            prop_assert!((n.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() <= 1e-12);
        }
    }
}

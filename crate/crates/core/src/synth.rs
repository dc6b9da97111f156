//! Synthetic corpora with planted low-quality samples.
//!
//! Every sample gets a procedurally drawn image (shapes on a textured
//! background), a short text containing its aspect, paired embeddings built
//! from a shared latent vector, and a feature vector drawn around its class
//! centre. Class centres are evenly spaced along one random axis, in label
//! order. A chosen fraction of samples is made low quality: their images
//! receive every listed degradation, their image embedding is drawn
//! independently of the text, `ocr_inject` gives them long OCR text, their
//! features are noisier, and their label moves to the next class with
//! probability `label_noise_p`.
//!
//! Each sample draws from its own ChaCha stream, so generation can run in
//! parallel and still be reproducible from the seed.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{ImageFormat, Rgb, RgbImage};
use ndarray::Array2;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{corpus_from_ocr, Corpus, EmbeddingKind, EmbeddingTable, Label, Sample};
use crate::trainer::{save_features, Dataset};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("unknown degradation kind `{0}`")]
    UnknownKind(String),
    #[error("invalid magnitude {magnitude} for {kind}")]
    InvalidMagnitude { kind: DegradationKind, magnitude: f64 },
    #[error("invalid synth spec: {0}")]
    InvalidSpec(String),
    #[error("{path}: {message}")]
    IoFailure { path: PathBuf, message: String },
}

fn io_failure(path: &Path, e: impl fmt::Display) -> SynthError {
    SynthError::IoFailure {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegradationKind {
    GaussianBlur,
    Downscale,
    BrightnessShift,
    OcrInject,
}

impl DegradationKind {
    fn as_str(self) -> &'static str {
        match self {
            DegradationKind::GaussianBlur => "gaussian_blur",
            DegradationKind::Downscale => "downscale",
            DegradationKind::BrightnessShift => "brightness_shift",
            DegradationKind::OcrInject => "ocr_inject",
        }
    }
}

impl fmt::Display for DegradationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DegradationKind {
    type Err = SynthError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [
            DegradationKind::GaussianBlur,
            DegradationKind::Downscale,
            DegradationKind::BrightnessShift,
            DegradationKind::OcrInject,
        ]
        .into_iter()
        .find(|k| k.as_str() == s)
        .ok_or_else(|| SynthError::UnknownKind(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Degradation {
    pub kind: DegradationKind,
    pub magnitude: f64,
}

impl Degradation {
    pub fn new(kind: DegradationKind, magnitude: f64) -> Self {
        Degradation { kind, magnitude }
    }

    fn validate(&self) -> Result<(), SynthError> {
        let ok = match self.kind {
            DegradationKind::Downscale => self.magnitude > 0.0 && self.magnitude <= 1.0,
            _ => self.magnitude >= 0.0 && self.magnitude.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(SynthError::InvalidMagnitude {
                kind: self.kind,
                magnitude: self.magnitude,
            })
        }
    }
}

/// Parses `kind=magnitude`, e.g. `gaussian_blur=2`.
impl FromStr for Degradation {
    type Err = SynthError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (kind, magnitude) = s
            .split_once('=')
            .ok_or_else(|| SynthError::InvalidSpec(format!("expected kind=magnitude, got `{s}`")))?;
        let kind: DegradationKind = kind.trim().parse()?;
        let magnitude: f64 = magnitude
            .trim()
            .parse()
            .map_err(|_| SynthError::InvalidSpec(format!("bad magnitude in `{s}`")))?;
        let d = Degradation { kind, magnitude };
        d.validate()?;
        Ok(d)
    }
}

pub fn default_degradations() -> Vec<Degradation> {
    vec![
        Degradation::new(DegradationKind::Downscale, 0.4),
        Degradation::new(DegradationKind::GaussianBlur, 2.0),
        Degradation::new(DegradationKind::OcrInject, 400.0),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_samples: usize,
    pub feature_dim: usize,
    pub n_classes: usize,
    pub lowq_fraction: f64,
    /// Label flip probability, applied to low-quality samples only.
    pub label_noise_p: f64,
    pub degradations: Vec<Degradation>,
    pub rng_seed: u64,
    pub image_width: u32,
    pub image_height: u32,
    pub embedding_dim: usize,
    /// Distance between neighbouring class centres in feature space.
    pub class_separation: f64,
    /// Per-coordinate feature noise standard deviation.
    pub feature_noise: f64,
    /// Multiplies `feature_noise` for low-quality samples.
    pub lowq_feature_noise_scale: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_samples: 300,
            feature_dim: 16,
            n_classes: 3,
            lowq_fraction: 0.3,
            label_noise_p: 0.3,
            degradations: default_degradations(),
            rng_seed: 0,
            image_width: 256,
            image_height: 224,
            embedding_dim: 32,
            class_separation: 3.0,
            feature_noise: 1.0,
            lowq_feature_noise_scale: 3.0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidSpec(m));
        if self.n_samples == 0 || self.feature_dim == 0 || self.embedding_dim == 0 {
            return bad("n_samples, feature_dim and embedding_dim must be positive".into());
        }
        if !(2..=Label::ALL.len()).contains(&self.n_classes) {
            return bad(format!("n_classes must be 2 or 3, got {}", self.n_classes));
        }
        for (name, p) in [
            ("lowq_fraction", self.lowq_fraction),
            ("label_noise_p", self.label_noise_p),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        if self.image_width == 0 || self.image_height == 0 {
            return bad("image dimensions must be positive".into());
        }
        if !(self.feature_noise >= 0.0 && self.class_separation >= 0.0 && self.lowq_feature_noise_scale >= 0.0) {
            return bad("feature_noise, lowq_feature_noise_scale and class_separation must be nonnegative".into());
        }
        self.degradations.iter().try_for_each(Degradation::validate)
    }

    fn ocr_inject(&self) -> Option<usize> {
        self.degradations
            .iter()
            .rev()
            .find(|d| d.kind == DegradationKind::OcrInject)
            .map(|d| d.magnitude.round() as usize)
    }
}

fn clamp_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|x| (-((x * x) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Separable Gaussian blur with replicated borders.
pub fn gaussian_blur(img: &RgbImage, sigma: f64) -> RgbImage {
    if sigma == 0.0 {
        return img.clone();
    }
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as i64;
    let (w, h) = (img.width() as i64, img.height() as i64);
    let src: Vec<[f64; 3]> = img.pixels().map(|p| p.0.map(f64::from)).collect();
    let mut tmp = vec![[0.0f64; 3]; src.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0; 3];
            for (i, k) in kernel.iter().enumerate() {
                let sx = (x + i as i64 - radius).clamp(0, w - 1);
                let p = src[(y * w + sx) as usize];
                for c in 0..3 {
                    acc[c] += k * p[c];
                }
            }
            tmp[(y * w + x) as usize] = acc;
        }
    }
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as i64, y as i64);
        let mut acc = [0.0; 3];
        for (i, k) in kernel.iter().enumerate() {
            let sy = (y + i as i64 - radius).clamp(0, h - 1);
            let p = tmp[(sy * w + x) as usize];
            for c in 0..3 {
                acc[c] += k * p[c];
            }
        }
        Rgb(acc.map(clamp_u8))
    })
}

/// For each output cell, the source indices it covers and their overlap.
fn box_coverage(src: u32, dst: u32) -> Vec<Vec<(usize, f64)>> {
    let scale = f64::from(src) / f64::from(dst);
    (0..dst)
        .map(|o| {
            let lo = f64::from(o) * scale;
            let hi = f64::from(o + 1) * scale;
            let mut cells = Vec::new();
            let mut i = lo.floor() as u32;
            while f64::from(i) < hi && i < src {
                let overlap = (hi.min(f64::from(i + 1)) - lo.max(f64::from(i))) / scale;
                if overlap > 0.0 {
                    cells.push((i as usize, overlap));
                }
                i += 1;
            }
            cells
        })
        .collect()
}

/// Area-averaging resize by `factor`; output sides are `max(1, round(side·factor))`.
pub fn downscale(img: &RgbImage, factor: f64) -> RgbImage {
    let (w, h) = img.dimensions();
    let ow = ((f64::from(w) * factor).round() as u32).max(1);
    let oh = ((f64::from(h) * factor).round() as u32).max(1);
    let cols = box_coverage(w, ow);
    let rows = box_coverage(h, oh);
    let src: Vec<[f64; 3]> = img.pixels().map(|p| p.0.map(f64::from)).collect();
    let mut tmp = vec![[0.0f64; 3]; (ow * h) as usize];
    for y in 0..h as usize {
        for (ox, cover) in cols.iter().enumerate() {
            let mut acc = [0.0; 3];
            for &(sx, wt) in cover {
                let p = src[y * w as usize + sx];
                for c in 0..3 {
                    acc[c] += wt * p[c];
                }
            }
            tmp[y * ow as usize + ox] = acc;
        }
    }
    RgbImage::from_fn(ow, oh, |ox, oy| {
        let mut acc = [0.0; 3];
        for &(sy, wt) in &rows[oy as usize] {
            let p = tmp[sy * ow as usize + ox as usize];
            for c in 0..3 {
                acc[c] += wt * p[c];
            }
        }
        Rgb(acc.map(clamp_u8))
    })
}

/// Adds `amount` to every channel, which shifts BT.601 luma by the same amount.
pub fn brightness_shift(img: &RgbImage, amount: f64) -> RgbImage {
    let mut out = img.clone();
    for p in out.pixels_mut() {
        p.0 = p.0.map(|v| clamp_u8(f64::from(v) + amount));
    }
    out
}

/// Applies one degradation. `ocr_inject` acts on the OCR sidecar, not the
/// pixels, so the image is returned unchanged.
pub fn degrade(img: &RgbImage, kind: DegradationKind, magnitude: f64) -> Result<RgbImage, SynthError> {
    Degradation::new(kind, magnitude).validate()?;
    Ok(match kind {
        DegradationKind::GaussianBlur => gaussian_blur(img, magnitude),
        DegradationKind::Downscale => downscale(img, magnitude),
        DegradationKind::BrightnessShift => brightness_shift(img, magnitude),
        DegradationKind::OcrInject => img.clone(),
    })
}

/// Draws shapes over a textured gradient background.
pub fn base_image<R: Rng>(width: u32, height: u32, rng: &mut R) -> RgbImage {
    let top: [f64; 3] = std::array::from_fn(|_| rng.random_range(70.0..150.0));
    let bottom: [f64; 3] = std::array::from_fn(|_| rng.random_range(110.0..190.0));
    let mut img = RgbImage::new(width, height);
    let row_len = 3 * width as usize;
    for (y, row) in img.chunks_mut(row_len).enumerate() {
        let t = y as f64 / f64::from(height.max(2) - 1);
        let px: [u8; 3] = std::array::from_fn(|c| clamp_u8(top[c] + (bottom[c] - top[c]) * t));
        for p in row.chunks_exact_mut(3) {
            p.copy_from_slice(&px);
        }
    }

    let n_shapes = rng.random_range(3..7);
    for _ in 0..n_shapes {
        let color: [u8; 3] = std::array::from_fn(|_| rng.random_range(20..236));
        let cx = rng.random_range(0..width) as i64;
        let cy = rng.random_range(0..height) as i64;
        let size = rng.random_range(10..(width.min(height) / 3).max(11)) as i64;
        let circle = rng.random_bool(0.5);
        for y in (cy - size).max(0)..(cy + size).min(height as i64) {
            let dy = y - cy;
            let half = if circle {
                ((size * size - dy * dy) as u64).isqrt() as i64
            } else {
                size
            };
            let x0 = (cx - half).max(0);
            let x1 = (cx + half + 1).min(cx + size).min(width as i64);
            let buf: &mut [u8] = &mut img;
            let row = &mut buf[(y as usize * row_len)..((y as usize + 1) * row_len)];
            for x in x0..x1.max(x0) {
                row[3 * x as usize..3 * x as usize + 3].copy_from_slice(&color);
            }
        }
    }

    // one random byte per pixel, mapped onto -12..=12
    for chunk in img.chunks_mut(3 * 8) {
        let bytes = rng.next_u64().to_le_bytes();
        for (p, b) in chunk.chunks_exact_mut(3).zip(bytes) {
            let grain = ((i16::from(b) * 25) >> 8) - 12;
            for v in p {
                *v = (i16::from(*v) + grain).clamp(0, 255) as u8;
            }
        }
    }
    img
}

const NOUNS: [&str; 8] = [
    "pizza", "concert", "service", "view", "match", "coffee", "crowd", "stage",
];
const VENUES: [&str; 6] = ["Cafe", "Arena", "Harbor", "Plaza", "Studio", "Market"];
const ADJECTIVES: [&str; 6] = ["great", "loud", "quiet", "awful", "lovely", "fine"];
const OCR_FILLER: &str = "SALE 50% OFF TODAY ONLY ";

fn filler_text(len: usize) -> String {
    OCR_FILLER.chars().cycle().take(len).collect()
}

/// Ground truth that is not visible in the corpus files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthTruth {
    pub latent_label: Label,
    pub low_quality: bool,
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub samples: Vec<Sample>,
    pub images: Vec<RgbImage>,
    pub ocr: BTreeMap<String, String>,
    pub image_embeddings: EmbeddingTable,
    pub text_embeddings: EmbeddingTable,
    pub aspect_embeddings: EmbeddingTable,
    pub features: Dataset,
    pub truth: Vec<SynthTruth>,
}

/// File layout written by [`SynthCorpus::write`].
pub struct SynthPaths {
    pub manifest: PathBuf,
    pub images: PathBuf,
    pub ocr: PathBuf,
    pub image_embeddings: PathBuf,
    pub text_embeddings: PathBuf,
    pub aspect_embeddings: PathBuf,
    pub features: PathBuf,
    pub truth: PathBuf,
}

impl SynthPaths {
    pub fn new(dir: &Path) -> Self {
        SynthPaths {
            manifest: dir.join("manifest.tsv"),
            images: dir.join("images"),
            ocr: dir.join("ocr.json"),
            image_embeddings: dir.join("emb_image.jsonl"),
            text_embeddings: dir.join("emb_text.jsonl"),
            aspect_embeddings: dir.join("emb_aspect.jsonl"),
            features: dir.join("features.jsonl"),
            truth: dir.join("truth.tsv"),
        }
    }
}

impl SynthCorpus {
    pub fn corpus(&self) -> Corpus {
        corpus_from_ocr(self.samples.clone(), &self.ocr)
    }

    pub fn write(&self, dir: &Path) -> Result<SynthPaths, SynthError> {
        let paths = SynthPaths::new(dir);
        fs::create_dir_all(&paths.images).map_err(|e| io_failure(&paths.images, e))?;
        crate::corpus::save_manifest(&paths.manifest, &self.samples).map_err(|e| io_failure(&paths.manifest, e))?;
        self.samples.par_iter().zip(&self.images).try_for_each(|(s, img)| {
            let path = paths.images.join(&s.image_file);
            img.save_with_format(&path, ImageFormat::Png)
                .map_err(|e| io_failure(&path, e))
        })?;
        crate::corpus::save_ocr_sidecar(&paths.ocr, &self.ocr).map_err(|e| io_failure(&paths.ocr, e))?;
        for (table, path) in [
            (&self.image_embeddings, &paths.image_embeddings),
            (&self.text_embeddings, &paths.text_embeddings),
            (&self.aspect_embeddings, &paths.aspect_embeddings),
        ] {
            table.save(path).map_err(|e| io_failure(path, e))?;
        }
        save_features(&paths.features, &self.features).map_err(|e| io_failure(&paths.features, e))?;
        let mut truth = String::from("id\tlatent_label\tlow_quality\n");
        for (s, t) in self.samples.iter().zip(&self.truth) {
            truth.push_str(&format!("{}\t{}\t{}\n", s.id, t.latent_label, t.low_quality));
        }
        fs::write(&paths.truth, truth).map_err(|e| io_failure(&paths.truth, e))?;
        Ok(paths)
    }
}

fn normal_vec<R: Rng>(rng: &mut R, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| scale * Distribution::<f64>::sample(&StandardNormal, rng))
        .collect::<Vec<f64>>()
}

fn add_noise<R: Rng>(base: &[f64], rng: &mut R, scale: f64) -> Vec<f64> {
    base.iter()
        .map(|v| v + scale * Distribution::<f64>::sample(&StandardNormal, rng))
        .collect()
}

struct Generated {
    sample: Sample,
    image: RgbImage,
    ocr: Option<String>,
    image_emb: Vec<f64>,
    text_emb: Vec<f64>,
    aspect_emb: Vec<f64>,
    features: Vec<f64>,
    label: usize,
    truth: SynthTruth,
}

/// Generates a corpus in memory.
pub fn generate(spec: &SynthSpec) -> Result<SynthCorpus, SynthError> {
    spec.validate()?;
    let mut master = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    // classes are ordered, so their centres sit at equal spacing along one axis
    let axis = normal_vec(&mut master, spec.feature_dim, 1.0);
    let norm = axis.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    let mid = (spec.n_classes as f64 - 1.0) / 2.0;
    let centres: Vec<Vec<f64>> = (0..spec.n_classes)
        .map(|k| {
            let offset = (k as f64 - mid) * spec.class_separation / norm;
            axis.iter().map(|v| v * offset).collect()
        })
        .collect();
    let n_lowq = (spec.n_samples as f64 * spec.lowq_fraction).round() as usize;
    let mut low_quality = vec![false; spec.n_samples];
    for i in index::sample(&mut master, spec.n_samples, n_lowq) {
        low_quality[i] = true;
    }
    let ocr_inject = spec.ocr_inject();
    let id_width = spec.n_samples.to_string().len();

    let generated: Vec<Generated> = (0..spec.n_samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
            rng.set_stream(i as u64 + 1);
            let lowq = low_quality[i];
            let latent = rng.random_range(0..spec.n_classes);
            let flip = rng.random_bool(spec.label_noise_p);
            let label = if lowq && flip {
                (latent + 1) % spec.n_classes
            } else {
                latent
            };

            let id = format!("s{:0width$}", i, width = id_width);
            let venue = format!("{} {}", VENUES[rng.random_range(0..VENUES.len())], i);
            let text = format!(
                "the {} at {} was {}",
                NOUNS[rng.random_range(0..NOUNS.len())],
                venue,
                ADJECTIVES[rng.random_range(0..ADJECTIVES.len())]
            );
            let sample = Sample {
                image_file: format!("{id}.png"),
                id,
                text,
                aspect: venue,
                label: Label::ALL[label],
            };

            let mut image = base_image(spec.image_width, spec.image_height, &mut rng);
            if lowq {
                for d in &spec.degradations {
                    image = degrade(&image, d.kind, d.magnitude).expect("validated degradation");
                }
            }

            let clean_ocr = rng.random_bool(0.5).then(|| filler_text(rng.random_range(0..=60)));
            let ocr = match (lowq, ocr_inject) {
                (true, Some(len)) => Some(filler_text(len)),
                _ => clean_ocr,
            };

            let topic = normal_vec(&mut rng, spec.embedding_dim, 1.0);
            let text_emb = add_noise(&topic, &mut rng, 0.5);
            let aspect_emb = add_noise(&topic, &mut rng, 0.8);
            let paired_image = add_noise(&topic, &mut rng, 0.5);
            let unrelated_image = normal_vec(&mut rng, spec.embedding_dim, 1.0);
            let image_emb = if lowq { unrelated_image } else { paired_image };

            let noise = if lowq {
                spec.feature_noise * spec.lowq_feature_noise_scale
            } else {
                spec.feature_noise
            };
            let features = add_noise(&centres[latent], &mut rng, noise);

            Generated {
                sample,
                image,
                ocr,
                image_emb,
                text_emb,
                aspect_emb,
                features,
                label,
                truth: SynthTruth {
                    latent_label: Label::ALL[latent],
                    low_quality: lowq,
                },
            }
        })
        .collect();

    let mut image_embeddings = EmbeddingTable::new(EmbeddingKind::Image, spec.embedding_dim);
    let mut text_embeddings = EmbeddingTable::new(EmbeddingKind::Text, spec.embedding_dim);
    let mut aspect_embeddings = EmbeddingTable::new(EmbeddingKind::Aspect, spec.embedding_dim);
    let mut ocr = BTreeMap::new();
    let mut samples = Vec::with_capacity(spec.n_samples);
    let mut images = Vec::with_capacity(spec.n_samples);
    let mut keys = Vec::with_capacity(spec.n_samples);
    let mut flat = Vec::with_capacity(spec.n_samples * spec.feature_dim);
    let mut labels = Vec::with_capacity(spec.n_samples);
    let mut truth = Vec::with_capacity(spec.n_samples);
    for g in generated {
        let s = g.sample;
        image_embeddings
            .insert(s.image_file.clone(), g.image_emb)
            .expect("fresh finite key");
        text_embeddings
            .insert(s.id.clone(), g.text_emb)
            .expect("fresh finite key");
        aspect_embeddings
            .insert(s.id.clone(), g.aspect_emb)
            .expect("fresh finite key");
        if let Some(text) = g.ocr {
            ocr.insert(s.image_file.clone(), text);
        }
        keys.push(s.id.clone());
        flat.extend(g.features);
        labels.push(g.label);
        truth.push(g.truth);
        images.push(g.image);
        samples.push(s);
    }
    Ok(SynthCorpus {
        samples,
        images,
        ocr,
        image_embeddings,
        text_embeddings,
        aspect_embeddings,
        features: Dataset {
            keys,
            features: Array2::from_shape_vec((spec.n_samples, spec.feature_dim), flat).expect("rows share dim"),
            labels,
        },
        truth,
    })
}

/// Generates a corpus and writes it under `dir`.
pub fn gen_corpus(spec: &SynthSpec, dir: &Path) -> Result<(SynthCorpus, SynthPaths), SynthError> {
    let corpus = generate(spec)?;
    let paths = corpus.write(dir)?;
    Ok((corpus, paths))
}

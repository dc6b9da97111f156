//! Per-image quality factors and their unweighted average.
//!
//! Resolution and embedded-text scores follow a thresholded ratio: full
//! marks above the threshold, proportional below it. Brightness, contrast,
//! sharpness and color constancy use standard global statistics of the
//! decoded image (mean luma, luma standard deviation, Laplacian variance,
//! gray-world channel deviation), each squashed into `[0, 1]`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum QualityError {
    #[error("undecodable image: {0}")]
    UndecodableImage(String),
    #[error("image has zero pixels")]
    ZeroPixelImage,
    #[error("OCR length {length} exceeds corpus maximum {l_max}")]
    InconsistentLMax { length: usize, l_max: usize },
    #[error("invalid image quality config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Factor {
    Resolution,
    Brightness,
    Contrast,
    Sharpness,
    ColorConstancy,
    OcrText,
}

impl Factor {
    pub const ALL: [Factor; 6] = [
        Factor::Resolution,
        Factor::Brightness,
        Factor::Contrast,
        Factor::Sharpness,
        Factor::ColorConstancy,
        Factor::OcrText,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Factor::Resolution => "resolution",
            Factor::Brightness => "brightness",
            Factor::Contrast => "contrast",
            Factor::Sharpness => "sharpness",
            Factor::ColorConstancy => "color_constancy",
            Factor::OcrText => "ocr_text",
        }
    }
}

impl fmt::Display for Factor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Factor {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Factor::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| format!("unknown image quality factor `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImageQualityConfig {
    /// Short-side resolution threshold in pixels.
    pub t_r: u32,
    /// OCR length threshold in characters.
    pub t_text: usize,
    /// Luma standard deviation giving full contrast score.
    pub t_contrast: f64,
    /// Laplacian variance giving full sharpness score.
    pub t_sharp: f64,
    /// Relative channel-mean spread giving zero color constancy score.
    pub t_cc: f64,
    pub enabled_factors: BTreeSet<Factor>,
}

impl Default for ImageQualityConfig {
    fn default() -> Self {
        ImageQualityConfig {
            t_r: 200,
            t_text: 200,
            t_contrast: 40.0,
            t_sharp: 100.0,
            t_cc: 0.6,
            enabled_factors: Factor::ALL.into_iter().collect(),
        }
    }
}

impl ImageQualityConfig {
    pub fn validate(&self) -> Result<(), QualityError> {
        let bad = |msg: &str| Err(QualityError::InvalidConfig(msg.to_string()));
        if self.enabled_factors.is_empty() {
            return bad("enabled_factors must not be empty");
        }
        if self.t_r == 0 {
            return bad("t_r must be positive");
        }
        for (name, value) in [
            ("t_contrast", self.t_contrast),
            ("t_sharp", self.t_sharp),
            ("t_cc", self.t_cc),
        ] {
            if !(value > 0.0 && value.is_finite()) {
                return Err(QualityError::InvalidConfig(format!(
                    "{name} must be positive and finite, got {value}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageQualityReport {
    pub per_factor: BTreeMap<Factor, f64>,
    pub w_image: f64,
}

impl ImageQualityReport {
    /// Averages the given factor scores.
    pub fn from_scores(per_factor: BTreeMap<Factor, f64>) -> Self {
        let w_image = if per_factor.is_empty() {
            0.0
        } else {
            per_factor.values().sum::<f64>() / per_factor.len() as f64
        };
        ImageQualityReport { per_factor, w_image }
    }
}

/// Row-major grayscale plane with values in `[0, 255]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LumaPlane {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl LumaPlane {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self, QualityError> {
        if width == 0 || height == 0 {
            return Err(QualityError::ZeroPixelImage);
        }
        assert_eq!(values.len(), width * height, "luma plane size mismatch");
        debug_assert!(values.iter().all(|v| (0.0..=255.0).contains(v)));
        Ok(LumaPlane { width, height, values })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    fn at(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

/// Decoded pixels reduced to what the factor scores need.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedImage {
    pub luma: LumaPlane,
    pub channel_means: [f64; 3],
}

/// BT.601 luma of an 8-bit RGB image together with its per-channel means.
pub fn luma_from_rgb(img: &RgbImage) -> Result<DecodedImage, QualityError> {
    let (w, h) = img.dimensions();
    if w == 0 || h == 0 {
        return Err(QualityError::ZeroPixelImage);
    }
    let mut sums = [0.0f64; 3];
    let values: Vec<f64> = img
        .pixels()
        .map(|p| {
            let [r, g, b] = p.0.map(f64::from);
            sums[0] += r;
            sums[1] += g;
            sums[2] += b;
            0.299 * r + 0.587 * g + 0.114 * b
        })
        .collect();
    let n = values.len() as f64;
    Ok(DecodedImage {
        luma: LumaPlane::new(w as usize, h as usize, values)?,
        channel_means: sums.map(|s| s / n),
    })
}

/// Decodes PNG or JPEG bytes. Alpha is dropped; 16-bit channels are
/// reduced to 8 bits.
pub fn decode_luma(bytes: &[u8]) -> Result<DecodedImage, QualityError> {
    let img = image::load_from_memory(bytes).map_err(|e| match e {
        image::ImageError::Limits(_) => QualityError::ZeroPixelImage,
        other => QualityError::UndecodableImage(other.to_string()),
    })?;
    if img.width() == 0 || img.height() == 0 {
        return Err(QualityError::ZeroPixelImage);
    }
    luma_from_rgb(&img.to_rgb8())
}

pub fn resolution_score(width: u32, height: u32, t_r: u32) -> f64 {
    debug_assert!(width >= 1 && height >= 1 && t_r >= 1);
    let q = width.min(height);
    if q > t_r {
        1.0
    } else {
        f64::from(q) / f64::from(t_r)
    }
}

pub fn ocr_text_score(length: usize, t_text: usize, l_max: usize) -> Result<f64, QualityError> {
    if length > l_max {
        return Err(QualityError::InconsistentLMax { length, l_max });
    }
    if length <= t_text {
        Ok(1.0)
    } else {
        Ok(1.0 - length as f64 / l_max as f64)
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn population_variance(values: &[f64]) -> f64 {
    let m = mean(values);
    values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / values.len() as f64
}

pub fn brightness_score(luma: &LumaPlane) -> f64 {
    let m = mean(luma.values());
    (1.0 - (m - 127.5).abs() / 127.5).clamp(0.0, 1.0)
}

pub fn contrast_score(luma: &LumaPlane, t_contrast: f64) -> f64 {
    let sigma = population_variance(luma.values()).sqrt();
    (sigma / t_contrast).min(1.0)
}

/// 4-neighbour Laplacian response with replicated borders.
pub fn laplacian(luma: &LumaPlane) -> Vec<f64> {
    let (w, h) = (luma.width, luma.height);
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        let up = y.saturating_sub(1);
        let down = (y + 1).min(h - 1);
        for x in 0..w {
            let left = x.saturating_sub(1);
            let right = (x + 1).min(w - 1);
            out.push(luma.at(x, up) + luma.at(x, down) + luma.at(left, y) + luma.at(right, y) - 4.0 * luma.at(x, y));
        }
    }
    out
}

pub fn laplacian_variance(luma: &LumaPlane) -> f64 {
    population_variance(&laplacian(luma))
}

pub fn sharpness_score(luma: &LumaPlane, t_sharp: f64) -> f64 {
    (laplacian_variance(luma) / t_sharp).min(1.0)
}

/// Gray-world deviation: the spread of channel means relative to the
/// brightest channel.
pub fn color_constancy_score(channel_means: [f64; 3], t_cc: f64) -> f64 {
    let max = channel_means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = channel_means.iter().copied().fold(f64::INFINITY, f64::min);
    let d = (max - min) / max.max(1e-9);
    1.0 - (d / t_cc).min(1.0)
}

/// Scores every enabled factor on an already decoded image.
pub fn score_decoded(
    image: &DecodedImage,
    ocr_length: usize,
    l_max: usize,
    config: &ImageQualityConfig,
) -> Result<ImageQualityReport, QualityError> {
    config.validate()?;
    let luma = &image.luma;
    let mut per_factor = BTreeMap::new();
    for &factor in &config.enabled_factors {
        let score = match factor {
            Factor::Resolution => resolution_score(luma.width as u32, luma.height as u32, config.t_r),
            Factor::Brightness => brightness_score(luma),
            Factor::Contrast => contrast_score(luma, config.t_contrast),
            Factor::Sharpness => sharpness_score(luma, config.t_sharp),
            Factor::ColorConstancy => color_constancy_score(image.channel_means, config.t_cc),
            Factor::OcrText => ocr_text_score(ocr_length, config.t_text, l_max)?,
        };
        per_factor.insert(factor, score);
    }
    Ok(ImageQualityReport::from_scores(per_factor))
}

/// Decodes `bytes` and scores it.
pub fn image_quality(
    bytes: &[u8],
    ocr_length: usize,
    l_max: usize,
    config: &ImageQualityConfig,
) -> Result<ImageQualityReport, QualityError> {
    score_decoded(&decode_luma(bytes)?, ocr_length, l_max, config)
}

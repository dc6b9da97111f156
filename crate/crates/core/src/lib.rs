//! Data-uncertainty scoring for multimodal aspect-sentiment corpora.
//!
//! Each sample is scored for image quality ([`imgqual`]), image-text and
//! aspect-image relevance ([`relevance`]); the mean of the three becomes a
//! per-sample loss weight ([`weighting`]). [`trainer`] fits a reference
//! classifier with the weighted loss and [`synth`] builds corpora with planted
//! defects to check the whole chain.

pub mod cli;
pub mod corpus;
pub mod imgqual;
pub mod numfmt;
pub mod pipeline;
pub mod relevance;
pub mod synth;
pub mod trainer;
pub mod weighting;

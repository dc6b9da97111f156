//! Corpus ingestion: the tab-separated manifest, the OCR sidecar and the
//! line-delimited embedding sidecars.
//!
//! A [`Corpus`] is built once and never mutated afterwards, so it can be
//! shared freely across scoring threads.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Fixed manifest header.
pub const MANIFEST_HEADER: [&str; 5] = ["id", "image", "text", "aspect", "label"];

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("manifest header is missing column `{0}`")]
    MissingColumn(String),
    #[error("row {row}: expected 5 tab-separated fields, found {found}")]
    MalformedRow { row: usize, found: usize },
    #[error("row {row}: field `{field}` is empty")]
    EmptyField { row: usize, field: &'static str },
    #[error("row {row}: duplicate sample id `{id}`")]
    DuplicateId { row: usize, id: String },
    #[error("row {row}: aspect `{aspect}` does not occur in the text")]
    AspectNotInText { row: usize, aspect: String },
    #[error("row {row}: unknown label `{label}`")]
    UnknownLabel { row: usize, label: String },
    #[error("malformed OCR sidecar: {0}")]
    MalformedSidecar(String),
    #[error("line {line}: malformed embedding record: {message}")]
    MalformedRecord { line: usize, message: String },
    #[error("line {line}: key `{key}` has dim {found}, expected {expected}")]
    DimMismatch {
        line: usize,
        key: String,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: key `{key}` has a non-finite component")]
    NonFiniteValue { line: usize, key: String },
    #[error("line {line}: record kind `{found}` in a `{expected}` sidecar")]
    WrongKind {
        line: usize,
        expected: EmbeddingKind,
        found: EmbeddingKind,
    },
    #[error("line {line}: duplicate embedding key `{key}`")]
    DuplicateKey { line: usize, key: String },
    #[error("embedding sidecar contains no records")]
    EmptyTable,
}

impl CorpusError {
    pub(crate) fn io(path: &Path, source: io::Error) -> Self {
        CorpusError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Positive,
    Neutral,
    Negative,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::Positive, Label::Neutral, Label::Negative];

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Positive => "positive",
            Label::Neutral => "neutral",
            Label::Negative => "negative",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "positive" => Ok(Label::Positive),
            "neutral" => Ok(Label::Neutral),
            "negative" => Ok(Label::Negative),
            other => Err(other.to_string()),
        }
    }
}

/// One manifest row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub image_file: String,
    pub text: String,
    pub aspect: String,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    samples: Vec<Sample>,
    ocr_text: BTreeMap<String, String>,
    ocr_lengths: BTreeMap<String, usize>,
    l_max: usize,
}

impl Corpus {
    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    /// Character count of the OCR result for `image_file`; 0 when the
    /// image is unknown or had no sidecar entry.
    pub fn ocr_length(&self, image_file: &str) -> usize {
        self.ocr_lengths.get(image_file).copied().unwrap_or(0)
    }

    pub fn ocr_lengths(&self) -> &BTreeMap<String, usize> {
        &self.ocr_lengths
    }

    /// Recognized text per referenced image, only for images that had an entry.
    pub fn ocr_text(&self) -> &BTreeMap<String, String> {
        &self.ocr_text
    }

    pub fn l_max(&self) -> usize {
        self.l_max
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Writes the manifest and OCR sidecar that [`load_manifest`] and
    /// [`attach_ocr`] read back into an identical corpus.
    pub fn save(&self, manifest: &Path, ocr_sidecar: &Path) -> Result<(), CorpusError> {
        save_manifest(manifest, &self.samples)?;
        save_ocr_sidecar(ocr_sidecar, &self.ocr_text)
    }
}

fn parse_manifest<R: BufRead>(reader: R, path: &Path) -> Result<Vec<Sample>, CorpusError> {
    let mut lines = reader.lines();
    let header = match lines.next() {
        Some(line) => line.map_err(|e| CorpusError::io(path, e))?,
        None => return Err(CorpusError::MissingColumn(MANIFEST_HEADER[0].to_string())),
    };
    let columns: Vec<&str> = header.trim_end_matches('\r').split('\t').collect();
    for (i, expected) in MANIFEST_HEADER.iter().enumerate() {
        if columns.get(i) != Some(expected) {
            return Err(CorpusError::MissingColumn(expected.to_string()));
        }
    }

    let mut samples = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in lines.enumerate() {
        // header is row 1
        let row = idx + 2;
        let line = line.map_err(|e| CorpusError::io(path, e))?;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != MANIFEST_HEADER.len() {
            return Err(CorpusError::MalformedRow {
                row,
                found: fields.len(),
            });
        }
        for (field, name) in fields.iter().zip(MANIFEST_HEADER) {
            if field.is_empty() {
                return Err(CorpusError::EmptyField { row, field: name });
            }
        }
        let label = fields[4]
            .parse::<Label>()
            .map_err(|label| CorpusError::UnknownLabel { row, label })?;
        if !fields[2].contains(fields[3]) {
            return Err(CorpusError::AspectNotInText {
                row,
                aspect: fields[3].to_string(),
            });
        }
        if !seen.insert(fields[0].to_string()) {
            return Err(CorpusError::DuplicateId {
                row,
                id: fields[0].to_string(),
            });
        }
        samples.push(Sample {
            id: fields[0].to_string(),
            image_file: fields[1].to_string(),
            text: fields[2].to_string(),
            aspect: fields[3].to_string(),
            label,
        });
    }
    Ok(samples)
}

/// Reads a tab-separated manifest with header `id image text aspect label`.
pub fn load_manifest(path: &Path) -> Result<Vec<Sample>, CorpusError> {
    let file = fs::File::open(path).map_err(|e| CorpusError::io(path, e))?;
    parse_manifest(BufReader::new(file), path)
}

pub fn save_manifest(path: &Path, samples: &[Sample]) -> Result<(), CorpusError> {
    let mut out = String::new();
    out.push_str(&MANIFEST_HEADER.join("\t"));
    out.push('\n');
    for s in samples {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            s.id, s.image_file, s.text, s.aspect, s.label
        ));
    }
    fs::write(path, out).map_err(|e| CorpusError::io(path, e))
}

/// Builds a corpus from samples and an in-memory OCR map
/// (image file -> recognized text).
pub fn corpus_from_ocr(samples: Vec<Sample>, ocr: &BTreeMap<String, String>) -> Corpus {
    let mut ocr_text = BTreeMap::new();
    let mut ocr_lengths = BTreeMap::new();
    for s in &samples {
        let len = match ocr.get(&s.image_file) {
            Some(text) => {
                ocr_text.insert(s.image_file.clone(), text.clone());
                text.chars().count()
            }
            None => 0,
        };
        ocr_lengths.insert(s.image_file.clone(), len);
    }
    let l_max = ocr_lengths.values().copied().max().unwrap_or(0);
    Corpus {
        samples,
        ocr_text,
        ocr_lengths,
        l_max,
    }
}

/// Parses the OCR sidecar (a single JSON object, image file -> text).
pub fn parse_ocr_sidecar(content: &str) -> Result<BTreeMap<String, String>, CorpusError> {
    serde_json::from_str(content).map_err(|e| CorpusError::MalformedSidecar(e.to_string()))
}

/// Attaches OCR results to the samples and computes `l_max` over every
/// image the samples reference.
pub fn attach_ocr(samples: Vec<Sample>, ocr_sidecar: &Path) -> Result<Corpus, CorpusError> {
    let content = fs::read_to_string(ocr_sidecar).map_err(|e| CorpusError::io(ocr_sidecar, e))?;
    let ocr = parse_ocr_sidecar(&content)?;
    Ok(corpus_from_ocr(samples, &ocr))
}

pub fn save_ocr_sidecar(path: &Path, ocr: &BTreeMap<String, String>) -> Result<(), CorpusError> {
    let mut body = serde_json::to_string_pretty(ocr).expect("string map serializes");
    body.push('\n');
    fs::write(path, body).map_err(|e| CorpusError::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingKind {
    Image,
    Text,
    Aspect,
}

impl fmt::Display for EmbeddingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EmbeddingKind::Image => "image",
            EmbeddingKind::Text => "text",
            EmbeddingKind::Aspect => "aspect",
        })
    }
}

/// Keyed vectors of one modality. Image entries are keyed by image file,
/// text and aspect entries by sample id.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    kind: EmbeddingKind,
    dim: usize,
    entries: BTreeMap<String, Vec<f64>>,
}

impl EmbeddingTable {
    pub fn new(kind: EmbeddingKind, dim: usize) -> Self {
        assert!(dim > 0, "embedding dim must be positive");
        EmbeddingTable {
            kind,
            dim,
            entries: BTreeMap::new(),
        }
    }

    /// Inserts a vector, validating its dimension and finiteness.
    pub fn insert(&mut self, key: impl Into<String>, vec: Vec<f64>) -> Result<(), CorpusError> {
        let key = key.into();
        if vec.len() != self.dim {
            return Err(CorpusError::DimMismatch {
                line: 0,
                key,
                expected: self.dim,
                found: vec.len(),
            });
        }
        if vec.iter().any(|v| !v.is_finite()) {
            return Err(CorpusError::NonFiniteValue { line: 0, key });
        }
        if self.entries.contains_key(&key) {
            return Err(CorpusError::DuplicateKey { line: 0, key });
        }
        self.entries.insert(key, vec);
        Ok(())
    }

    pub fn kind(&self) -> EmbeddingKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, key: &str) -> Option<&[f64]> {
        self.entries.get(key).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    /// Writes the table as line-delimited records, one per key in key order.
    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        let file = fs::File::create(path).map_err(|e| CorpusError::io(path, e))?;
        let mut out = io::BufWriter::new(file);
        for (key, vec) in &self.entries {
            let record = EmbeddingRecordOut {
                key,
                kind: self.kind,
                dim: self.dim,
                vec,
            };
            serde_json::to_writer(&mut out, &record).map_err(|e| CorpusError::io(path, e.into()))?;
            out.write_all(b"\n").map_err(|e| CorpusError::io(path, e))?;
        }
        out.flush().map_err(|e| CorpusError::io(path, e))
    }
}

#[derive(Serialize)]
struct EmbeddingRecordOut<'a> {
    key: &'a str,
    kind: EmbeddingKind,
    dim: usize,
    vec: &'a [f64],
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EmbeddingRecord {
    key: String,
    kind: EmbeddingKind,
    dim: usize,
    vec: Vec<Component>,
}

/// A vector component. Python's encoder writes non-finite floats as bare
/// `NaN`/`Infinity` tokens, which [`quote_nonfinite_tokens`] turns into strings.
#[derive(Deserialize)]
#[serde(untagged)]
enum Component {
    Number(f64),
    Token(String),
}

impl Component {
    fn value(&self) -> Option<f64> {
        match self {
            Component::Number(v) => Some(*v),
            Component::Token(t) => match t.as_str() {
                "NaN" | "nan" => Some(f64::NAN),
                "Infinity" | "inf" => Some(f64::INFINITY),
                "-Infinity" | "-inf" => Some(f64::NEG_INFINITY),
                _ => None,
            },
        }
    }
}

/// Quotes bare `NaN`, `Infinity` and `-Infinity` tokens that appear outside
/// JSON strings so the line parses as strict JSON.
fn quote_nonfinite_tokens(line: &str) -> String {
    let mut out = String::with_capacity(line.len() + 8);
    let mut in_string = false;
    let mut escaped = false;
    let mut rest = line;
    while let Some(c) = rest.chars().next() {
        if in_string {
            out.push(c);
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == '"' {
                in_string = false;
            }
            rest = &rest[c.len_utf8()..];
            continue;
        }
        if c == '"' {
            in_string = true;
            out.push(c);
            rest = &rest[1..];
            continue;
        }
        let token = ["-Infinity", "Infinity", "NaN"]
            .into_iter()
            .find(|t| rest.starts_with(t));
        match token {
            Some(t) => {
                out.push('"');
                out.push_str(t);
                out.push('"');
                rest = &rest[t.len()..];
            }
            None => {
                out.push(c);
                rest = &rest[c.len_utf8()..];
            }
        }
    }
    out
}

fn is_metadata_line(value: &serde_json::Value) -> bool {
    value
        .as_object()
        .is_some_and(|o| o.contains_key("meta") && !o.contains_key("key"))
}

/// Reads an embedding sidecar into a table of the given kind.
///
/// Blank lines and a metadata object (`{"meta": ...}`) are skipped.
pub fn load_embeddings(path: &Path, kind: EmbeddingKind) -> Result<EmbeddingTable, CorpusError> {
    let file = fs::File::open(path).map_err(|e| CorpusError::io(path, e))?;
    parse_embeddings(BufReader::new(file), Some(kind), path)
}

/// Reads an embedding sidecar whose kind is taken from its first record.
pub fn load_embeddings_any(path: &Path) -> Result<EmbeddingTable, CorpusError> {
    let file = fs::File::open(path).map_err(|e| CorpusError::io(path, e))?;
    parse_embeddings(BufReader::new(file), None, path)
}

fn parse_embeddings<R: BufRead>(
    reader: R,
    expected_kind: Option<EmbeddingKind>,
    path: &Path,
) -> Result<EmbeddingTable, CorpusError> {
    let mut table: Option<EmbeddingTable> = None;
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| CorpusError::io(path, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(&quote_nonfinite_tokens(trimmed)).map_err(|e| CorpusError::MalformedRecord {
                line: line_no,
                message: e.to_string(),
            })?;
        if is_metadata_line(&value) {
            continue;
        }
        let record: EmbeddingRecord = serde_json::from_value(value).map_err(|e| CorpusError::MalformedRecord {
            line: line_no,
            message: e.to_string(),
        })?;

        let kind = expected_kind.unwrap_or_else(|| table.as_ref().map_or(record.kind, |t| t.kind));
        if record.kind != kind {
            return Err(CorpusError::WrongKind {
                line: line_no,
                expected: kind,
                found: record.kind,
            });
        }
        if record.dim == 0 || record.vec.len() != record.dim {
            return Err(CorpusError::DimMismatch {
                line: line_no,
                key: record.key,
                expected: record.dim,
                found: record.vec.len(),
            });
        }
        let table = table.get_or_insert_with(|| EmbeddingTable::new(kind, record.dim));
        if record.dim != table.dim {
            return Err(CorpusError::DimMismatch {
                line: line_no,
                key: record.key,
                expected: table.dim,
                found: record.dim,
            });
        }
        let mut vec = Vec::with_capacity(record.dim);
        for component in &record.vec {
            match component.value() {
                Some(v) if v.is_finite() => vec.push(v),
                Some(_) => {
                    return Err(CorpusError::NonFiniteValue {
                        line: line_no,
                        key: record.key,
                    })
                }
                None => {
                    return Err(CorpusError::MalformedRecord {
                        line: line_no,
                        message: format!("key `{}`: vector component is not a number", record.key),
                    })
                }
            }
        }
        if table.entries.contains_key(&record.key) {
            return Err(CorpusError::DuplicateKey {
                line: line_no,
                key: record.key,
            });
        }
        table.entries.insert(record.key, vec);
    }
    table.ok_or(CorpusError::EmptyTable)
}

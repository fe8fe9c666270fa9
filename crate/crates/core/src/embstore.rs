//! Loading, validation, persistence, and row normalization of embedding
//! matrices and their pairing/metadata sidecars.
//!
//! Two on-disk matrix formats are supported:
//!
//! * `EMB1` binary (little-endian): magic `"EMB1"`, version `u16` = 1,
//!   dtype `u8` = 0 (IEEE-754 f32), one reserved byte, `u64` row count,
//!   `u64` column count, then `n * d` f32 values row-major.
//! * CSV: no header, one embedding per line, comma-separated.
//!
//! Files store f32; all in-memory arithmetic is f64 so metric tolerances
//! stay tight.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg;

const EMB1_MAGIC: [u8; 4] = *b"EMB1";
const EMB1_VERSION: u16 = 1;
const EMB1_DTYPE_F32: u8 = 0;

/// On-disk matrix encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbFormat {
    Emb1,
    Csv,
}

impl EmbFormat {
    /// Guesses the format from a file extension (`.emb1` or `.csv`).
    pub fn from_extension(path: &Path) -> Option<EmbFormat> {
        match path.extension()?.to_str()? {
            "emb1" => Some(EmbFormat::Emb1),
            "csv" => Some(EmbFormat::Csv),
            _ => None,
        }
    }
}

/// An `n x d` row-major matrix of finite activations, one embedding per row.
///
/// Immutable after construction; transforms return new matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    n: usize,
    d: usize,
    data: Vec<f64>,
}

impl EmbeddingMatrix {
    /// Builds a matrix from row-major data, rejecting empty shapes,
    /// length mismatches, and non-finite values.
    pub fn from_vec(n: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        if n == 0 {
            return Err(Error::EmptyMatrix {
                context: "matrix must have at least one row".into(),
            });
        }
        if d == 0 {
            return Err(Error::EmptyMatrix {
                context: "matrix must have at least one column".into(),
            });
        }
        if data.len() != n * d {
            return Err(Error::DimensionMismatch {
                context: "matrix payload length".into(),
                expected: n * d,
                found: data.len(),
            });
        }
        for (idx, v) in data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    row: idx / d,
                    col: idx % d,
                });
            }
        }
        Ok(Self { n, d, data })
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyMatrix {
                context: "matrix must have at least one row".into(),
            });
        }
        let d = rows[0].len();
        for (i, row) in rows.iter().enumerate() {
            if row.len() != d {
                return Err(Error::DimensionMismatch {
                    context: format!("row {i}"),
                    expected: d,
                    found: row.len(),
                });
            }
        }
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::from_vec(rows.len(), d, data)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.d)
    }
}

/// Scales every row to unit Euclidean norm.
///
/// Direction is preserved; a zero-norm row is an error naming its index.
pub fn normalize_rows(m: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    let mut data = Vec::with_capacity(m.data.len());
    for (i, row) in m.rows().enumerate() {
        let norm = linalg::norm(row);
        if norm == 0.0 {
            return Err(Error::ZeroNormRow { row: i });
        }
        data.extend(row.iter().map(|v| v / norm));
    }
    EmbeddingMatrix::from_vec(m.n, m.d, data)
}

/// Reads a matrix from disk in the given format.
pub fn load_embeddings(path: &Path, format: EmbFormat) -> Result<EmbeddingMatrix> {
    match format {
        EmbFormat::Emb1 => load_emb1(path),
        EmbFormat::Csv => load_csv(path),
    }
}

/// Writes a matrix to disk in the given format.
///
/// EMB1 stores f32, so `load(save(m))` is bit-exact whenever the values of
/// `m` are f32-representable (in particular for anything loaded from EMB1).
pub fn save_embeddings(m: &EmbeddingMatrix, path: &Path, format: EmbFormat) -> Result<()> {
    match format {
        EmbFormat::Emb1 => save_emb1(m, path),
        EmbFormat::Csv => save_csv(m, path),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn load_emb1(path: &Path) -> Result<EmbeddingMatrix> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut reader = BufReader::new(file);

    let mut magic = [0u8; 4];
    reader.read_exact(&mut magic).map_err(io_err(path))?;
    if magic != EMB1_MAGIC {
        return Err(Error::BadMagic { found: magic });
    }
    let mut u16buf = [0u8; 2];
    reader.read_exact(&mut u16buf).map_err(io_err(path))?;
    let version = u16::from_le_bytes(u16buf);
    if version != EMB1_VERSION {
        return Err(Error::UnsupportedFormat {
            what: format!("EMB1 version {version}"),
        });
    }
    let mut bytebuf = [0u8; 2];
    reader.read_exact(&mut bytebuf).map_err(io_err(path))?;
    let dtype = bytebuf[0];
    if dtype != EMB1_DTYPE_F32 {
        return Err(Error::UnsupportedFormat {
            what: format!("EMB1 dtype {dtype}"),
        });
    }
    let mut u64buf = [0u8; 8];
    reader.read_exact(&mut u64buf).map_err(io_err(path))?;
    let n = u64::from_le_bytes(u64buf) as usize;
    reader.read_exact(&mut u64buf).map_err(io_err(path))?;
    let d = u64::from_le_bytes(u64buf) as usize;
    if n == 0 || d == 0 {
        return Err(Error::EmptyMatrix {
            context: format!("{}: header declares {n} x {d}", path.display()),
        });
    }
    let expected = n
        .checked_mul(d)
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| Error::UnsupportedFormat {
            what: format!("EMB1 payload {n} x {d} overflows"),
        })?;

    let mut payload = Vec::new();
    reader.read_to_end(&mut payload).map_err(io_err(path))?;
    if payload.len() < expected {
        return Err(Error::TruncatedPayload {
            expected,
            found: payload.len(),
        });
    }
    let data: Vec<f64> = payload[..expected]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    EmbeddingMatrix::from_vec(n, d, data)
}

fn save_emb1(m: &EmbeddingMatrix, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut writer = BufWriter::new(file);
    writer.write_all(&EMB1_MAGIC).map_err(io_err(path))?;
    writer
        .write_all(&EMB1_VERSION.to_le_bytes())
        .map_err(io_err(path))?;
    writer
        .write_all(&[EMB1_DTYPE_F32, 0u8])
        .map_err(io_err(path))?;
    writer
        .write_all(&(m.n as u64).to_le_bytes())
        .map_err(io_err(path))?;
    writer
        .write_all(&(m.d as u64).to_le_bytes())
        .map_err(io_err(path))?;
    for v in &m.data {
        writer
            .write_all(&(*v as f32).to_le_bytes())
            .map_err(io_err(path))?;
    }
    writer.flush().map_err(io_err(path))
}

fn load_csv(path: &Path) -> Result<EmbeddingMatrix> {
    let file = File::open(path).map_err(io_err(path))?;
    let reader = BufReader::new(file);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut d = None;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut row = Vec::new();
        for field in line.split(',') {
            let text = field.trim();
            let value: f64 = text.parse().map_err(|_| Error::CsvParse {
                path: path.to_path_buf(),
                line: lineno + 1,
                text: text.to_string(),
            })?;
            row.push(value);
        }
        match d {
            None => d = Some(row.len()),
            Some(d) if d != row.len() => {
                return Err(Error::DimensionMismatch {
                    context: format!("{}:{}", path.display(), lineno + 1),
                    expected: d,
                    found: row.len(),
                })
            }
            _ => {}
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::EmptyMatrix {
            context: format!("{}: no rows", path.display()),
        });
    }
    EmbeddingMatrix::from_rows(&rows)
}

fn save_csv(m: &EmbeddingMatrix, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut writer = BufWriter::new(file);
    for row in m.rows() {
        let mut first = true;
        for v in row {
            if !first {
                write!(writer, ",").map_err(io_err(path))?;
            }
            // shortest round-trippable decimal form
            write!(writer, "{v}").map_err(io_err(path))?;
            first = false;
        }
        writeln!(writer).map_err(io_err(path))?;
    }
    writer.flush().map_err(io_err(path))
}

/// Aligned image/text embedding pair with stable per-item identifiers.
#[derive(Debug, Clone)]
pub struct PairedDataset {
    images: EmbeddingMatrix,
    texts: EmbeddingMatrix,
    ids: Vec<String>,
}

impl PairedDataset {
    pub fn new(images: EmbeddingMatrix, texts: EmbeddingMatrix, ids: Vec<String>) -> Result<Self> {
        if images.n() != texts.n() {
            return Err(Error::DimensionMismatch {
                context: "paired dataset sample counts".into(),
                expected: images.n(),
                found: texts.n(),
            });
        }
        if images.d() != texts.d() {
            return Err(Error::DimensionMismatch {
                context: "paired dataset hidden dimensions".into(),
                expected: images.d(),
                found: texts.d(),
            });
        }
        if ids.len() != images.n() {
            return Err(Error::DimensionMismatch {
                context: "paired dataset identifier count".into(),
                expected: images.n(),
                found: ids.len(),
            });
        }
        let mut seen = HashSet::new();
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::DuplicateId { id: id.clone() });
            }
        }
        Ok(Self { images, texts, ids })
    }

    /// Pairs two matrices using the row index as the identifier.
    pub fn with_index_ids(images: EmbeddingMatrix, texts: EmbeddingMatrix) -> Result<Self> {
        let ids = (0..images.n()).map(|i| i.to_string()).collect();
        Self::new(images, texts, ids)
    }

    pub fn images(&self) -> &EmbeddingMatrix {
        &self.images
    }

    pub fn texts(&self) -> &EmbeddingMatrix {
        &self.texts
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.images.n()
    }

    pub fn is_empty(&self) -> bool {
        false // n >= 1 is enforced at construction
    }

    /// Row index of the item with the given identifier.
    pub fn index_of(&self, id: &str) -> Result<usize> {
        self.ids
            .iter()
            .position(|candidate| candidate == id)
            .ok_or_else(|| Error::UnknownId { id: id.to_string() })
    }

    /// Returns a dataset with both modalities row-normalized.
    pub fn normalized(&self) -> Result<PairedDataset> {
        Ok(PairedDataset {
            images: normalize_rows(&self.images)?,
            texts: normalize_rows(&self.texts)?,
            ids: self.ids.clone(),
        })
    }
}

/// One human judgment: a candidate caption index scored against an image.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct JudgmentRecord {
    pub image_id: String,
    pub candidate: usize,
    pub score: f64,
}

/// Human judgment scores for (image, candidate caption) pairs.
#[derive(Debug, Clone, Default)]
pub struct HumanJudgmentSet {
    pub records: Vec<JudgmentRecord>,
}

impl HumanJudgmentSet {
    /// Checks that every referenced image id and candidate index resolves.
    pub fn validate_against(&self, ids: &[String], candidate_count: usize) -> Result<()> {
        let known: HashSet<&str> = ids.iter().map(String::as_str).collect();
        for record in &self.records {
            if !known.contains(record.image_id.as_str()) {
                return Err(Error::UnknownId {
                    id: record.image_id.clone(),
                });
            }
            if record.candidate >= candidate_count {
                return Err(Error::LabelOutOfRange {
                    index: record.candidate,
                    classes: candidate_count,
                });
            }
        }
        Ok(())
    }
}

/// Loads a JSONL judgment sidecar: one object per line with keys
/// `image_id`, `candidate`, `score`.
pub fn load_judgments(path: &Path) -> Result<HumanJudgmentSet> {
    let file = File::open(path).map_err(io_err(path))?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: JudgmentRecord =
            serde_json::from_str(&line).map_err(|e| Error::JsonRecord {
                path: path.to_path_buf(),
                line: lineno + 1,
                message: e.to_string(),
            })?;
        if !record.score.is_finite() {
            return Err(Error::JsonRecord {
                path: path.to_path_buf(),
                line: lineno + 1,
                message: "score is not finite".into(),
            });
        }
        records.push(record);
    }
    Ok(HumanJudgmentSet { records })
}

/// Writes judgments as JSONL.
pub fn save_judgments(set: &HumanJudgmentSet, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut writer = BufWriter::new(file);
    for record in &set.records {
        let line = serde_json::to_string(record).expect("judgment record serializes");
        writeln!(writer, "{line}").map_err(io_err(path))?;
    }
    writer.flush().map_err(io_err(path))
}

/// Per-class prompt-template embeddings plus per-image class labels, for
/// zero-shot classification.
#[derive(Debug, Clone)]
pub struct ClassTemplateSet {
    class_names: Vec<String>,
    class_text_embeddings: Vec<EmbeddingMatrix>,
    image_labels: Vec<usize>,
}

impl ClassTemplateSet {
    pub fn new(
        class_names: Vec<String>,
        class_text_embeddings: Vec<EmbeddingMatrix>,
        image_labels: Vec<usize>,
    ) -> Result<Self> {
        if class_names.is_empty() {
            return Err(Error::EmptyMatrix {
                context: "class template set has no classes".into(),
            });
        }
        if class_names.len() != class_text_embeddings.len() {
            return Err(Error::DimensionMismatch {
                context: "class template groups".into(),
                expected: class_names.len(),
                found: class_text_embeddings.len(),
            });
        }
        let d = class_text_embeddings[0].d();
        for templates in &class_text_embeddings {
            if templates.d() != d {
                return Err(Error::DimensionMismatch {
                    context: "class template hidden dimension".into(),
                    expected: d,
                    found: templates.d(),
                });
            }
        }
        for &label in &image_labels {
            if label >= class_names.len() {
                return Err(Error::LabelOutOfRange {
                    index: label,
                    classes: class_names.len(),
                });
            }
        }
        Ok(Self {
            class_names,
            class_text_embeddings,
            image_labels,
        })
    }

    /// Splits a template matrix whose rows are grouped by class,
    /// `templates_per_class` consecutive rows each.
    pub fn from_grouped(
        class_names: Vec<String>,
        templates: &EmbeddingMatrix,
        templates_per_class: usize,
        image_labels: Vec<usize>,
    ) -> Result<Self> {
        if templates_per_class == 0 {
            return Err(Error::InvalidConfig {
                what: "templates_per_class must be at least 1".into(),
            });
        }
        if templates.n() != class_names.len() * templates_per_class {
            return Err(Error::DimensionMismatch {
                context: "grouped template rows".into(),
                expected: class_names.len() * templates_per_class,
                found: templates.n(),
            });
        }
        let groups = (0..class_names.len())
            .map(|c| {
                let start = c * templates_per_class * templates.d();
                let end = start + templates_per_class * templates.d();
                EmbeddingMatrix::from_vec(
                    templates_per_class,
                    templates.d(),
                    templates.data()[start..end].to_vec(),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(class_names, groups, image_labels)
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    pub fn templates_for(&self, class: usize) -> &EmbeddingMatrix {
        &self.class_text_embeddings[class]
    }

    pub fn image_labels(&self) -> &[usize] {
        &self.image_labels
    }

    pub fn dim(&self) -> usize {
        self.class_text_embeddings[0].d()
    }
}

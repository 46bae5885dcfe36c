//! `.npy` tensor files and JSON experiment manifests.
//!
//! Only the subset of the npy format needed to move activations, logits and
//! labels between the extractor and the analysis engine is supported:
//! little-endian `f4`/`f8`/`i8` element types, C order, rank 1 or 2. Files are
//! written as format version 1.0 with the header padded to a 64-byte
//! boundary, the same bytes `numpy.save` produces for these arrays.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::{LabelVector, Matrix};

/// The npy magic string.
pub const MAGIC: [u8; 6] = *b"\x93NUMPY";

const ALIGN: usize = 64;

#[derive(Debug, Error)]
pub enum TensorIoError {
    #[error("malformed npy header: {0}")]
    MalformedHeader(String),
    #[error("shape {shape:?} needs {expected} elements, buffer holds {actual}")]
    ShapeMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("unsupported dtype {0:?}")]
    UnsupportedDtype(String),
    #[error("unsupported tensor rank {0}; expected 1 or 2")]
    UnsupportedRank(usize),
    #[error("i/o failure on {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("models mix datasets {0:?} and {1:?}")]
    InconsistentDataset(String, String),
    #[error("bad manifest field: {0}")]
    BadField(String),
    #[error("row counts differ: {0} vs {1}")]
    RowCountMismatch(usize, usize),
    #[error("label vectors differ at index {0}")]
    LabelMismatch(usize),
    #[error("expected a {expected} tensor, got {got}")]
    WrongKind { expected: &'static str, got: String },
}

type Result<T> = std::result::Result<T, TensorIoError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
    I64,
}

impl Dtype {
    pub fn descr(self) -> &'static str {
        match self {
            Dtype::F32 => "<f4",
            Dtype::F64 => "<f8",
            Dtype::I64 => "<i8",
        }
    }

    fn from_descr(descr: &str) -> Result<Self> {
        match descr {
            "<f4" => Ok(Dtype::F32),
            "<f8" => Ok(Dtype::F64),
            "<i8" => Ok(Dtype::I64),
            other => Err(TensorIoError::UnsupportedDtype(other.to_string())),
        }
    }

    fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 | Dtype::I64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I64(Vec<i64>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::I64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> Dtype {
        match self {
            TensorData::F32(_) => Dtype::F32,
            TensorData::F64(_) => Dtype::F64,
            TensorData::I64(_) => Dtype::I64,
        }
    }
}

/// A rank-1 or rank-2 tensor with a row-major element buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorFile {
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl TensorFile {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        let t = TensorFile { shape, data };
        t.validate()?;
        Ok(t)
    }

    pub fn dtype(&self) -> Dtype {
        self.data.dtype()
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.shape.len()) {
            return Err(TensorIoError::UnsupportedRank(self.shape.len()));
        }
        let expected: usize = self.shape.iter().product();
        if expected != self.data.len() {
            return Err(TensorIoError::ShapeMismatch {
                shape: self.shape.clone(),
                expected,
                actual: self.data.len(),
            });
        }
        Ok(())
    }

    pub fn from_matrix_f32(m: &Matrix) -> Self {
        let data = row_major(m).map(|v| v as f32).collect();
        TensorFile {
            shape: vec![m.nrows(), m.ncols()],
            data: TensorData::F32(data),
        }
    }

    pub fn from_matrix_f64(m: &Matrix) -> Self {
        TensorFile {
            shape: vec![m.nrows(), m.ncols()],
            data: TensorData::F64(row_major(m).collect()),
        }
    }

    pub fn from_labels(labels: &[usize]) -> Self {
        TensorFile {
            shape: vec![labels.len()],
            data: TensorData::I64(labels.iter().map(|&l| l as i64).collect()),
        }
    }

    /// Converts a rank-2 float tensor to an `f64` matrix.
    pub fn to_matrix(&self) -> Result<Matrix> {
        self.validate()?;
        let [rows, cols] = self.shape[..] else {
            return Err(TensorIoError::WrongKind {
                expected: "rank-2 float",
                got: format!("rank-{}", self.shape.len()),
            });
        };
        let values: Vec<f64> = match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
            TensorData::I64(_) => {
                return Err(TensorIoError::WrongKind {
                    expected: "rank-2 float",
                    got: "int64".into(),
                })
            }
        };
        Ok(Matrix::from_row_slice(rows, cols, &values))
    }

    /// Converts a rank-1 int64 tensor to non-negative labels.
    pub fn to_labels(&self) -> Result<LabelVector> {
        self.validate()?;
        match (&self.data, self.shape.len()) {
            (TensorData::I64(v), 1) => v
                .iter()
                .map(|&l| {
                    usize::try_from(l).map_err(|_| TensorIoError::WrongKind {
                        expected: "non-negative labels",
                        got: format!("label {l}"),
                    })
                })
                .collect(),
            (data, rank) => Err(TensorIoError::WrongKind {
                expected: "rank-1 int64",
                got: format!("rank-{rank} {}", data.dtype().descr()),
            }),
        }
    }
}

fn row_major(m: &Matrix) -> impl Iterator<Item = f64> + '_ {
    (0..m.nrows()).flat_map(move |i| (0..m.ncols()).map(move |j| m[(i, j)]))
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> TensorIoError + '_ {
    move |source| TensorIoError::IoFailure {
        path: path.to_path_buf(),
        source,
    }
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<TensorFile> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(io_err(path))?;
    decode(&bytes)
}

pub fn write_tensor(path: impl AsRef<Path>, t: &TensorFile) -> Result<()> {
    let path = path.as_ref();
    t.validate()?;
    let bytes = encode(t);
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&bytes).map_err(io_err(path))?;
    f.flush().map_err(io_err(path))
}

/// Serializes a validated tensor to npy v1.0 bytes.
pub fn encode(t: &TensorFile) -> Vec<u8> {
    let shape = match t.shape.as_slice() {
        [n] => format!("({n},)"),
        dims => format!(
            "({})",
            dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", ")
        ),
    };
    let mut header = format!(
        "{{'descr': '{}', 'fortran_order': False, 'shape': {}, }}",
        t.dtype().descr(),
        shape
    );
    let unpadded = MAGIC.len() + 2 + 2 + header.len() + 1;
    let padding = (ALIGN - unpadded % ALIGN) % ALIGN;
    header.extend(std::iter::repeat_n(' ', padding));
    header.push('\n');

    let mut out = Vec::with_capacity(10 + header.len() + t.data.len() * t.dtype().size());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    match &t.data {
        TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        TensorData::I64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
    }
    out
}

/// Parses npy bytes (format version 1.0 or 2.0).
pub fn decode(bytes: &[u8]) -> Result<TensorFile> {
    let malformed = |m: &str| TensorIoError::MalformedHeader(m.to_string());
    if bytes.len() < 10 || bytes[..6] != MAGIC {
        return Err(malformed("bad magic"));
    }
    let (header_len, header_start) = match (bytes[6], bytes[7]) {
        (1, 0) => (u16::from_le_bytes([bytes[8], bytes[9]]) as usize, 10),
        (2, 0) => {
            if bytes.len() < 12 {
                return Err(malformed("truncated preamble"));
            }
            let len = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]);
            (len as usize, 12)
        }
        (major, minor) => {
            return Err(TensorIoError::MalformedHeader(format!(
                "unsupported version {major}.{minor}"
            )))
        }
    };
    let body_start = header_start + header_len;
    if bytes.len() < body_start {
        return Err(malformed("truncated header"));
    }
    let header = std::str::from_utf8(&bytes[header_start..body_start]).map_err(|_| malformed("header is not ASCII"))?;
    let dict = HeaderDict::parse(header)?;
    if dict.fortran_order {
        return Err(malformed("fortran_order arrays are not supported"));
    }
    let dtype = Dtype::from_descr(&dict.descr)?;
    if !(1..=2).contains(&dict.shape.len()) {
        return Err(TensorIoError::UnsupportedRank(dict.shape.len()));
    }

    let body = &bytes[body_start..];
    let expected: usize = dict.shape.iter().product();
    let size = dtype.size();
    if !body.len().is_multiple_of(size) || body.len() / size != expected {
        return Err(TensorIoError::ShapeMismatch {
            shape: dict.shape,
            expected,
            actual: body.len() / size,
        });
    }
    let data = match dtype {
        Dtype::F32 => TensorData::F32(
            body.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        Dtype::F64 => TensorData::F64(
            body.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        Dtype::I64 => TensorData::I64(
            body.chunks_exact(8)
                .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
    };
    Ok(TensorFile {
        shape: dict.shape,
        data,
    })
}

struct HeaderDict {
    descr: String,
    fortran_order: bool,
    shape: Vec<usize>,
}

impl HeaderDict {
    /// Parses the Python dict literal numpy writes, e.g.
    /// `{'descr': '<f4', 'fortran_order': False, 'shape': (2, 3), }`.
    fn parse(text: &str) -> Result<Self> {
        let mut p = Parser {
            s: text.trim_end_matches(['\n', ' ', '\0']).as_bytes(),
            pos: 0,
        };
        let (mut descr, mut fortran, mut shape) = (None, None, None);
        p.expect(b'{')?;
        loop {
            p.skip_ws();
            if p.eat(b'}') {
                break;
            }
            let key = p.string()?;
            p.skip_ws();
            p.expect(b':')?;
            p.skip_ws();
            match key.as_str() {
                "descr" => descr = Some(p.string()?),
                "fortran_order" => fortran = Some(p.boolean()?),
                "shape" => shape = Some(p.tuple()?),
                other => return Err(TensorIoError::MalformedHeader(format!("unexpected key {other:?}"))),
            }
            p.skip_ws();
            if !p.eat(b',') {
                p.skip_ws();
                p.expect(b'}')?;
                break;
            }
        }
        p.skip_ws();
        if p.pos != p.s.len() {
            return Err(TensorIoError::MalformedHeader("trailing bytes after dict".into()));
        }
        let missing = |k: &str| TensorIoError::MalformedHeader(format!("missing key {k:?}"));
        Ok(HeaderDict {
            descr: descr.ok_or_else(|| missing("descr"))?,
            fortran_order: fortran.ok_or_else(|| missing("fortran_order"))?,
            shape: shape.ok_or_else(|| missing("shape"))?,
        })
    }
}

struct Parser<'a> {
    s: &'a [u8],
    pos: usize,
}

impl Parser<'_> {
    fn err(&self, what: &str) -> TensorIoError {
        TensorIoError::MalformedHeader(format!("{what} at byte {}", self.pos))
    }

    fn skip_ws(&mut self) {
        while self.pos < self.s.len() && self.s[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn eat(&mut self, c: u8) -> bool {
        if self.s.get(self.pos) == Some(&c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: u8) -> Result<()> {
        if self.eat(c) {
            Ok(())
        } else {
            Err(self.err(&format!("expected {:?}", c as char)))
        }
    }

    fn string(&mut self) -> Result<String> {
        let quote = match self.s.get(self.pos) {
            Some(&q @ (b'\'' | b'"')) => q,
            _ => return Err(self.err("expected string")),
        };
        self.pos += 1;
        let start = self.pos;
        while self.pos < self.s.len() && self.s[self.pos] != quote {
            self.pos += 1;
        }
        if self.pos == self.s.len() {
            return Err(self.err("unterminated string"));
        }
        let out = String::from_utf8_lossy(&self.s[start..self.pos]).into_owned();
        self.pos += 1;
        Ok(out)
    }

    fn boolean(&mut self) -> Result<bool> {
        let rest = &self.s[self.pos..];
        if rest.starts_with(b"True") {
            self.pos += 4;
            Ok(true)
        } else if rest.starts_with(b"False") {
            self.pos += 5;
            Ok(false)
        } else {
            Err(self.err("expected True or False"))
        }
    }

    fn tuple(&mut self) -> Result<Vec<usize>> {
        self.expect(b'(')?;
        let mut dims = Vec::new();
        loop {
            self.skip_ws();
            if self.eat(b')') {
                return Ok(dims);
            }
            let start = self.pos;
            while self.pos < self.s.len() && self.s[self.pos].is_ascii_digit() {
                self.pos += 1;
            }
            // numpy on some platforms writes `3L`
            let digits = std::str::from_utf8(&self.s[start..self.pos]).unwrap();
            let dim = digits.parse().map_err(|_| self.err("expected dimension"))?;
            self.eat(b'L');
            dims.push(dim);
            self.skip_ws();
            if !self.eat(b',') {
                self.skip_ws();
                self.expect(b')')?;
                return Ok(dims);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum InputType {
    #[default]
    Regular,
    Inverted,
}

impl InputType {
    pub fn as_str(self) -> &'static str {
        match self {
            InputType::Regular => "regular",
            InputType::Inverted => "inverted",
        }
    }
}

/// One model and the tensor files it produced.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelRecord {
    pub name: String,
    pub architecture: String,
    pub epsilon: f64,
    pub dataset: String,
    pub clean_accuracy: f64,
    pub activations_path: PathBuf,
    pub logits_path: PathBuf,
    pub labels_path: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentManifest {
    pub dataset: String,
    pub num_classes: usize,
    pub input_type: InputType,
    pub generator_model: Option<String>,
    pub models: Vec<ModelRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawManifest {
    dataset: String,
    num_classes: usize,
    #[serde(default)]
    input_type: InputType,
    #[serde(default)]
    generator_model: Option<String>,
    models: Vec<RawModel>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    name: String,
    architecture: String,
    epsilon: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dataset: Option<String>,
    clean_accuracy: f64,
    activations_path: PathBuf,
    logits_path: PathBuf,
    labels_path: PathBuf,
}

/// Loads a manifest. Relative tensor paths are resolved against the
/// manifest's directory.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<ExperimentManifest> {
    let path = path.as_ref();
    if !path.is_file() {
        return Err(TensorIoError::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let raw: RawManifest = serde_json::from_str(&text).map_err(|e| TensorIoError::BadField(e.to_string()))?;
    let base = path.parent().unwrap_or(Path::new(""));
    raw.resolve(base)
}

impl RawManifest {
    fn resolve(self, base: &Path) -> Result<ExperimentManifest> {
        if self.num_classes == 0 {
            return Err(TensorIoError::BadField("num_classes must be positive".into()));
        }
        if self.models.is_empty() {
            return Err(TensorIoError::BadField("models list is empty".into()));
        }
        match (self.input_type, &self.generator_model) {
            (InputType::Inverted, None) => {
                return Err(TensorIoError::BadField("inverted inputs need a generator_model".into()))
            }
            (InputType::Regular, Some(g)) => {
                return Err(TensorIoError::BadField(format!(
                    "generator_model {g:?} given for regular inputs"
                )))
            }
            _ => {}
        }

        let mut models: Vec<ModelRecord> = Vec::with_capacity(self.models.len());
        for m in self.models {
            if models.iter().any(|other| other.name == m.name) {
                return Err(TensorIoError::BadField(format!("duplicate model name {:?}", m.name)));
            }
            if !(m.epsilon.is_finite() && m.epsilon >= 0.0) {
                return Err(TensorIoError::BadField(format!(
                    "{}: epsilon must be non-negative, got {}",
                    m.name, m.epsilon
                )));
            }
            if !(0.0..=1.0).contains(&m.clean_accuracy) {
                return Err(TensorIoError::BadField(format!(
                    "{}: clean_accuracy must lie in [0, 1], got {}",
                    m.name, m.clean_accuracy
                )));
            }
            let dataset = m.dataset.unwrap_or_else(|| self.dataset.clone());
            if dataset != self.dataset {
                return Err(TensorIoError::InconsistentDataset(self.dataset.clone(), dataset));
            }
            let [activations_path, logits_path, labels_path] =
                [m.activations_path, m.logits_path, m.labels_path].map(|p| base.join(p));
            for p in [&activations_path, &logits_path, &labels_path] {
                if !p.is_file() {
                    return Err(TensorIoError::MissingFile(p.clone()));
                }
            }
            models.push(ModelRecord {
                name: m.name,
                architecture: m.architecture,
                epsilon: m.epsilon,
                dataset,
                clean_accuracy: m.clean_accuracy,
                activations_path,
                logits_path,
                labels_path,
            });
        }
        Ok(ExperimentManifest {
            dataset: self.dataset,
            num_classes: self.num_classes,
            input_type: self.input_type,
            generator_model: self.generator_model,
            models,
        })
    }
}

/// Writes a manifest as pretty JSON. Paths under the manifest's directory
/// are stored relative to it.
pub fn write_manifest(path: impl AsRef<Path>, manifest: &ExperimentManifest) -> Result<()> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new(""));
    let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).to_path_buf();
    let raw = RawManifest {
        dataset: manifest.dataset.clone(),
        num_classes: manifest.num_classes,
        input_type: manifest.input_type,
        generator_model: manifest.generator_model.clone(),
        models: manifest
            .models
            .iter()
            .map(|m| RawModel {
                name: m.name.clone(),
                architecture: m.architecture.clone(),
                epsilon: m.epsilon,
                dataset: None,
                clean_accuracy: m.clean_accuracy,
                activations_path: rel(&m.activations_path),
                logits_path: rel(&m.logits_path),
                labels_path: rel(&m.labels_path),
            })
            .collect(),
    };
    let mut text = serde_json::to_string_pretty(&raw).expect("manifest serializes");
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

/// Checks that two models were evaluated on the same inputs: equal row
/// counts and identical label vectors.
pub fn validate_pairing(a: &Matrix, b: &Matrix, labels_a: &[usize], labels_b: &[usize]) -> Result<()> {
    if a.nrows() != b.nrows() {
        return Err(TensorIoError::RowCountMismatch(a.nrows(), b.nrows()));
    }
    if labels_a.len() != labels_b.len() {
        return Err(TensorIoError::RowCountMismatch(labels_a.len(), labels_b.len()));
    }
    if labels_a.len() != a.nrows() {
        return Err(TensorIoError::RowCountMismatch(a.nrows(), labels_a.len()));
    }
    match labels_a.iter().zip(labels_b).position(|(x, y)| x != y) {
        Some(i) => Err(TensorIoError::LabelMismatch(i)),
        None => Ok(()),
    }
}

/// Activations, logits and labels of one model, loaded into memory.
#[derive(Clone, Debug)]
pub struct LoadedModel {
    pub record: ModelRecord,
    pub activations: Matrix,
    pub logits: Matrix,
    pub labels: LabelVector,
}

impl LoadedModel {
    pub fn load(record: &ModelRecord) -> Result<Self> {
        let activations = read_tensor(&record.activations_path)?.to_matrix()?;
        let logits = read_tensor(&record.logits_path)?.to_matrix()?;
        let labels = read_tensor(&record.labels_path)?.to_labels()?;
        if logits.nrows() != activations.nrows() {
            return Err(TensorIoError::RowCountMismatch(activations.nrows(), logits.nrows()));
        }
        if labels.len() != activations.nrows() {
            return Err(TensorIoError::RowCountMismatch(activations.nrows(), labels.len()));
        }
        Ok(LoadedModel {
            record: record.clone(),
            activations,
            logits,
            labels,
        })
    }
}

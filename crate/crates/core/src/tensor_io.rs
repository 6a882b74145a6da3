//! Single-file named-tensor checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! [u64 header length N][N bytes JSON header][payload]
//! ```
//!
//! The header maps each tensor name to `{"dtype", "shape", "data_offsets"}`,
//! with offsets relative to the start of the payload, plus an optional
//! `"__metadata__"` string map. Offsets must tile the payload exactly.
//!
//! Opening a checkpoint only reads and validates the header; tensor bytes are
//! fetched one tensor at a time on demand, so a multi-gigabyte payload is
//! never resident all at once.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use half::{bf16, f16};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::json::Entries;

const METADATA_KEY: &str = "__metadata__";
const MAX_HEADER_LEN: u64 = 100 * 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Dtype {
    F32,
    F16,
    BF16,
}

impl Dtype {
    pub const ALL: [Dtype; 3] = [Dtype::F32, Dtype::F16, Dtype::BF16];

    pub fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F16 | Dtype::BF16 => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Dtype::F32 => "F32",
            Dtype::F16 => "F16",
            Dtype::BF16 => "BF16",
        }
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Dtype {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "F32" => Ok(Dtype::F32),
            "F16" => Ok(Dtype::F16),
            "BF16" => Ok(Dtype::BF16),
            other => Err(Error::UnsupportedDtype(other.to_string())),
        }
    }
}

/// Decodes little-endian `dtype` bytes into f32. Widening from F16/BF16 is
/// exact.
pub fn decode_f32(dtype: Dtype, bytes: &[u8]) -> Vec<f32> {
    match dtype {
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
        Dtype::F16 => bytes
            .chunks_exact(2)
            .map(|c| f16::from_le_bytes([c[0], c[1]]).to_f32())
            .collect(),
        Dtype::BF16 => bytes
            .chunks_exact(2)
            .map(|c| bf16::from_le_bytes([c[0], c[1]]).to_f32())
            .collect(),
    }
}

/// Encodes f32 values as little-endian `dtype` bytes, rounding to nearest
/// even when narrowing.
pub fn encode_f32(dtype: Dtype, values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * dtype.width());
    match dtype {
        Dtype::F32 => values.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        Dtype::F16 => values
            .iter()
            .for_each(|v| out.extend_from_slice(&f16::from_f32(*v).to_le_bytes())),
        Dtype::BF16 => values
            .iter()
            .for_each(|v| out.extend_from_slice(&bf16::from_f32(*v).to_le_bytes())),
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorRecord {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub data_offsets: (u64, u64),
}

impl TensorRecord {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn byte_len(&self) -> u64 {
        self.data_offsets.1 - self.data_offsets.0
    }
}

#[derive(Deserialize)]
struct HeaderEntry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: (u64, u64),
}

#[derive(Debug)]
enum Payload {
    Memory(Vec<u8>),
    File { file: File, path: PathBuf, base: u64 },
}

/// A checkpoint: ordered tensor records, free-form metadata, and access to
/// the payload bytes.
#[derive(Debug)]
pub struct CheckpointBundle {
    records: Vec<TensorRecord>,
    by_name: HashMap<String, usize>,
    metadata: BTreeMap<String, String>,
    payload: Payload,
    payload_len: u64,
}

/// Opens a checkpoint file, validating the header against the file size.
pub fn open_checkpoint(path: impl AsRef<Path>) -> Result<CheckpointBundle> {
    CheckpointBundle::open(path)
}

impl CheckpointBundle {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
        let file_len = file.metadata().map_err(|e| Error::io(path, e))?.len();
        if file_len < 8 {
            return Err(Error::Truncated {
                expected: 8,
                actual: file_len,
            });
        }
        let mut len_buf = [0u8; 8];
        file.read_exact(&mut len_buf).map_err(|e| Error::io(path, e))?;
        let header_len = u64::from_le_bytes(len_buf);
        if header_len > MAX_HEADER_LEN {
            return Err(Error::MalformedHeader(format!(
                "header length {header_len} is implausible"
            )));
        }
        let base = 8 + header_len;
        if base > file_len {
            return Err(Error::Truncated {
                expected: base,
                actual: file_len,
            });
        }
        let mut header = vec![0u8; header_len as usize];
        file.read_exact(&mut header).map_err(|e| Error::io(path, e))?;
        let (records, metadata) = parse_header(&header)?;
        let payload_len = file_len - base;
        let bundle = Self::assemble(
            records,
            metadata,
            Payload::File {
                file,
                path: path.to_path_buf(),
                base,
            },
            payload_len,
        )?;
        Ok(bundle)
    }

    /// Parses a complete checkpoint image held in memory.
    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self> {
        let actual = bytes.len() as u64;
        if actual < 8 {
            return Err(Error::Truncated { expected: 8, actual });
        }
        let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
        let base = header_len
            .checked_add(8)
            .filter(|&b| b <= actual)
            .ok_or(Error::Truncated {
                expected: header_len.saturating_add(8),
                actual,
            })?;
        let (records, metadata) = parse_header(&bytes[8..base as usize])?;
        let payload = bytes[base as usize..].to_vec();
        let payload_len = payload.len() as u64;
        Self::assemble(records, metadata, Payload::Memory(payload), payload_len)
    }

    fn assemble(
        mut records: Vec<TensorRecord>,
        metadata: BTreeMap<String, String>,
        payload: Payload,
        payload_len: u64,
    ) -> Result<Self> {
        records.sort_by_key(|r| r.data_offsets);
        let mut cursor = 0u64;
        for r in &records {
            let (begin, end) = r.data_offsets;
            if end < begin {
                return Err(Error::MalformedHeader(format!("tensor {:?} has end < begin", r.name)));
            }
            let expected = r.numel() as u64 * r.dtype.width() as u64;
            if end - begin != expected {
                return Err(Error::MalformedHeader(format!(
                    "tensor {:?} spans {} bytes but shape {:?} of {} needs {expected}",
                    r.name,
                    end - begin,
                    r.shape,
                    r.dtype
                )));
            }
            if begin != cursor {
                return Err(Error::BadOffsets {
                    name: r.name.clone(),
                    offset: begin,
                });
            }
            cursor = end;
        }
        if cursor > payload_len {
            return Err(Error::Truncated {
                expected: cursor,
                actual: payload_len,
            });
        }
        if cursor < payload_len {
            return Err(Error::MalformedHeader(format!(
                "{} trailing payload bytes not covered by any tensor",
                payload_len - cursor
            )));
        }
        let by_name = records.iter().enumerate().map(|(i, r)| (r.name.clone(), i)).collect();
        Ok(Self {
            records,
            by_name,
            metadata,
            payload,
            payload_len,
        })
    }

    /// Records in payload order.
    pub fn records(&self) -> &[TensorRecord] {
        &self.records
    }

    pub fn record(&self, name: &str) -> Option<&TensorRecord> {
        self.by_name.get(name).map(|&i| &self.records[i])
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn param_count(&self) -> usize {
        self.records.iter().map(TensorRecord::numel).sum()
    }

    pub fn payload_len(&self) -> u64 {
        self.payload_len
    }

    /// Raw little-endian bytes of one tensor.
    pub fn tensor_bytes(&self, name: &str) -> Result<Cow<'_, [u8]>> {
        let r = self
            .record(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        self.read_range(r.data_offsets.0, r.byte_len())
    }

    /// The whole payload. Materializes file-backed payloads in memory.
    pub fn payload_bytes(&self) -> Result<Cow<'_, [u8]>> {
        self.read_range(0, self.payload_len)
    }

    /// One tensor widened to f32, in row-major order.
    pub fn tensor_f32(&self, name: &str) -> Result<Vec<f32>> {
        let r = self
            .record(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        Ok(decode_f32(r.dtype, &self.tensor_bytes(name)?))
    }

    /// SHA-256 of one tensor's stored bytes, hex encoded.
    pub fn tensor_digest(&self, name: &str) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.tensor_bytes(name)?)))
    }

    fn read_range(&self, offset: u64, len: u64) -> Result<Cow<'_, [u8]>> {
        match &self.payload {
            Payload::Memory(buf) => Ok(Cow::Borrowed(&buf[offset as usize..(offset + len) as usize])),
            Payload::File { file, path, base } => {
                let mut buf = vec![0u8; len as usize];
                read_at(file, path, &mut buf, base + offset).map_err(|e| Error::io(path, e))?;
                Ok(Cow::Owned(buf))
            }
        }
    }
}

#[cfg(unix)]
fn read_at(file: &File, _path: &Path, buf: &mut [u8], offset: u64) -> std::io::Result<()> {
    use std::os::unix::fs::FileExt;
    file.read_exact_at(buf, offset)
}

#[cfg(not(unix))]
fn read_at(_file: &File, path: &Path, buf: &mut [u8], offset: u64) -> std::io::Result<()> {
    use std::io::{Seek, SeekFrom};
    let mut f = File::open(path)?;
    f.seek(SeekFrom::Start(offset))?;
    f.read_exact(buf)
}

fn parse_header(bytes: &[u8]) -> Result<(Vec<TensorRecord>, BTreeMap<String, String>)> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::MalformedHeader(e.to_string()))?;
    let entries: Entries<serde_json::Value> =
        serde_json::from_str(text.trim_end()).map_err(|e| Error::MalformedHeader(e.to_string()))?;
    let mut records = Vec::with_capacity(entries.0.len());
    let mut metadata = BTreeMap::new();
    let mut names = std::collections::HashSet::new();
    for (name, value) in entries.0 {
        if !names.insert(name.clone()) {
            return Err(Error::DuplicateTensor(name));
        }
        if name == METADATA_KEY {
            metadata =
                serde_json::from_value(value).map_err(|e| Error::MalformedHeader(format!("{METADATA_KEY}: {e}")))?;
            continue;
        }
        let entry: HeaderEntry =
            serde_json::from_value(value).map_err(|e| Error::MalformedHeader(format!("{name:?}: {e}")))?;
        records.push(TensorRecord {
            dtype: entry.dtype.parse()?,
            shape: entry.shape,
            data_offsets: entry.data_offsets,
            name,
        });
    }
    Ok((records, metadata))
}

/// Where the bytes of a tensor being written come from.
#[derive(Debug, Clone)]
pub enum TensorData<'a> {
    /// f32 values, encoded to the declared dtype on write.
    F32(Cow<'a, [f32]>),
    /// Bytes already encoded in the declared dtype.
    Raw(Cow<'a, [u8]>),
    /// A tensor copied verbatim from another checkpoint, read when written.
    Copy(&'a CheckpointBundle, String),
}

#[derive(Debug, Clone)]
pub struct TensorSpec<'a> {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub data: TensorData<'a>,
}

impl<'a> TensorSpec<'a> {
    pub fn f32(name: impl Into<String>, dtype: Dtype, shape: Vec<usize>, values: impl Into<Cow<'a, [f32]>>) -> Self {
        Self {
            name: name.into(),
            dtype,
            shape,
            data: TensorData::F32(values.into()),
        }
    }

    /// Verbatim copy of `name` from `bundle`.
    pub fn copy_from(bundle: &'a CheckpointBundle, name: &str) -> Result<Self> {
        let r = bundle
            .record(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        Ok(Self {
            name: name.to_string(),
            dtype: r.dtype,
            shape: r.shape.clone(),
            data: TensorData::Copy(bundle, name.to_string()),
        })
    }

    fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    fn byte_len(&self) -> usize {
        self.numel() * self.dtype.width()
    }

    fn validate(&self) -> Result<()> {
        let len_err = |len| Error::ValueCount {
            name: self.name.clone(),
            len,
            shape: self.shape.clone(),
        };
        match &self.data {
            TensorData::F32(v) if v.len() != self.numel() => Err(len_err(v.len())),
            TensorData::Raw(b) if b.len() != self.byte_len() => Err(len_err(b.len() / self.dtype.width())),
            TensorData::Copy(bundle, src) => {
                let r = bundle.record(src).ok_or_else(|| Error::MissingTensor(src.clone()))?;
                if r.dtype != self.dtype || r.shape != self.shape {
                    return Err(Error::ShapeMismatch(format!(
                        "copy of {src:?} declared as {} {:?}, stored as {} {:?}",
                        self.dtype, self.shape, r.dtype, r.shape
                    )));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    fn encoded(&self) -> Result<Cow<'_, [u8]>> {
        match &self.data {
            TensorData::F32(v) => Ok(Cow::Owned(encode_f32(self.dtype, v))),
            TensorData::Raw(b) => Ok(Cow::Borrowed(b)),
            TensorData::Copy(bundle, src) => bundle.tensor_bytes(src),
        }
    }
}

/// Builds the padded header for `specs` in declared order.
fn encode_header(specs: &[TensorSpec<'_>], metadata: &BTreeMap<String, String>) -> Result<Vec<u8>> {
    let mut seen = std::collections::HashSet::new();
    let mut header = serde_json::Map::new();
    if !metadata.is_empty() {
        header.insert(
            METADATA_KEY.to_string(),
            serde_json::to_value(metadata).expect("string map"),
        );
    }
    let mut offset = 0u64;
    for s in specs {
        if s.name == METADATA_KEY || !seen.insert(s.name.as_str()) {
            return Err(Error::DuplicateTensor(s.name.clone()));
        }
        s.validate()?;
        let end = offset + s.byte_len() as u64;
        header.insert(
            s.name.clone(),
            serde_json::json!({
                "dtype": s.dtype.as_str(),
                "shape": s.shape,
                "data_offsets": [offset, end],
            }),
        );
        offset = end;
    }
    let mut bytes = serde_json::to_vec(&serde_json::Value::Object(header)).expect("json");
    // pad to keep the payload 8-byte aligned
    while !bytes.len().is_multiple_of(8) {
        bytes.push(b' ');
    }
    Ok(bytes)
}

/// Serializes `specs` into `w`. Output depends only on the inputs.
pub fn write_checkpoint_to<W: Write>(
    specs: &[TensorSpec<'_>],
    metadata: &BTreeMap<String, String>,
    w: &mut W,
) -> Result<()> {
    let header = encode_header(specs, metadata)?;
    let io = |e| Error::io("<writer>", e);
    w.write_all(&(header.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&header).map_err(io)?;
    for s in specs {
        w.write_all(&s.encoded()?).map_err(io)?;
    }
    Ok(())
}

/// Writes a checkpoint file, streaming one tensor at a time.
pub fn write_checkpoint(
    specs: &[TensorSpec<'_>],
    metadata: &BTreeMap<String, String>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::with_capacity(1 << 20, file);
    write_checkpoint_to(specs, metadata, &mut w).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Serializes `specs` into a byte vector.
pub fn checkpoint_bytes(specs: &[TensorSpec<'_>], metadata: &BTreeMap<String, String>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    write_checkpoint_to(specs, metadata, &mut out)?;
    Ok(out)
}

/// Row-major `rows x hidden` f32 matrix of token embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    hidden: usize,
    values: Vec<f32>,
}

impl EmbeddingMatrix {
    pub fn new(rows: usize, hidden: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != rows * hidden {
            return Err(Error::ValueCount {
                name: "embedding matrix".into(),
                len: values.len(),
                shape: vec![rows, hidden],
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("embedding row {}", i / hidden.max(1))));
        }
        Ok(Self { rows, hidden, values })
    }

    pub fn zeros(rows: usize, hidden: usize) -> Self {
        Self {
            rows,
            hidden,
            values: vec![0.0; rows * hidden],
        }
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let hidden = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != hidden) {
            return Err(Error::ShapeMismatch("ragged rows".into()));
        }
        Self::new(rows.len(), hidden, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.hidden..(i + 1) * self.hidden]
    }

    pub fn try_row(&self, i: usize) -> Result<&[f32]> {
        if i >= self.rows {
            return Err(Error::OutOfRange {
                index: i,
                rows: self.rows,
            });
        }
        Ok(self.row(i))
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    /// Applies `f` to every value of row `i`; used by tests and fixtures.
    pub fn map_row(&mut self, i: usize, f: impl Fn(f32) -> f32) {
        let h = self.hidden;
        self.values[i * h..(i + 1) * h].iter_mut().for_each(|v| *v = f(*v));
    }
}

/// Reads a rank-2 tensor as an embedding matrix.
pub fn read_matrix(bundle: &CheckpointBundle, name: &str) -> Result<EmbeddingMatrix> {
    let r = bundle
        .record(name)
        .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
    if r.shape.len() != 2 {
        return Err(Error::Rank {
            name: name.to_string(),
            rank: r.shape.len(),
        });
    }
    let values = bundle.tensor_f32(name)?;
    EmbeddingMatrix::new(r.shape[0], r.shape[1], values).map_err(|e| match e {
        Error::NonFinite(what) => Error::NonFinite(format!("tensor {name:?}, {what}")),
        other => other,
    })
}

/// Path segments that mark an input-embedding tensor.
pub const INPUT_EMBEDDING_NAMES: &[&str] = &["wte", "word_embeddings", "embed_tokens", "embed_in", "tok_embeddings"];
/// Path segments that mark a separate output projection.
pub const OUTPUT_HEAD_NAMES: &[&str] = &["lm_head", "embed_out"];

/// Embedding tensors located in a checkpoint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmbeddingTensors {
    pub input: String,
    pub head: Option<String>,
    pub tied: bool,
}

fn has_segment(name: &str, candidates: &[&str]) -> bool {
    name.split('.').any(|seg| candidates.contains(&seg))
}

/// Locates the input embedding (and separate output head, if any).
///
/// With a `hint`, an exact name match wins; otherwise the hint is a
/// substring that must select exactly one rank-2 tensor. Without a hint,
/// a rank-2 tensor with a dotted path segment in [`INPUT_EMBEDDING_NAMES`]
/// is selected, e.g. `transformer.wte.weight` but not
/// `word_embeddings_layernorm.weight`.
pub fn find_embedding_tensor(bundle: &CheckpointBundle, hint: Option<&str>) -> Result<EmbeddingTensors> {
    let rank2 = || bundle.records().iter().filter(|r| r.shape.len() == 2);
    let candidates: Vec<String> = match hint {
        Some(h) if bundle.record(h).is_some() => vec![h.to_string()],
        Some(h) => rank2().filter(|r| r.name.contains(h)).map(|r| r.name.clone()).collect(),
        None => rank2()
            .filter(|r| has_segment(&r.name, INPUT_EMBEDDING_NAMES))
            .map(|r| r.name.clone())
            .collect(),
    };
    let input = match candidates.len() {
        0 => {
            let searched = match hint {
                Some(h) => vec![h.to_string()],
                None => INPUT_EMBEDDING_NAMES.iter().map(|s| s.to_string()).collect(),
            };
            return Err(Error::EmbeddingNotFound(searched));
        }
        1 => candidates.into_iter().next().expect("one"),
        _ => return Err(Error::AmbiguousEmbedding(candidates)),
    };
    let heads: Vec<&TensorRecord> = rank2()
        .filter(|r| r.name != input && has_segment(&r.name, OUTPUT_HEAD_NAMES))
        .collect();
    let head = match heads.as_slice() {
        [] => None,
        [h] => Some(h.name.clone()),
        _ => {
            return Err(Error::AmbiguousEmbedding(
                heads.iter().map(|r| r.name.clone()).collect(),
            ))
        }
    };
    Ok(EmbeddingTensors {
        tied: head.is_none(),
        input,
        head,
    })
}

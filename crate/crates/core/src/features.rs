//! Precomputed backbone features and the DRXF v1 file format.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! "DRXF" | version u32 = 1 | record_count u64 | dino_dim u32 | n_blocks u32
//!        | block_dims u32 * n_blocks
//! per record: id_len u32 | id (UTF-8) | score_flag u8 | score f32 (iff flag = 1)
//!             | dino f32 * dino_dim | resnet f32 * sum(block_dims)
//! ```

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"DRXF";
pub const VERSION: u32 = 1;

pub const DEFAULT_DINO_DIM: usize = 384;
pub const DEFAULT_BLOCK_DIMS: [usize; 4] = [256, 512, 1024, 2048];

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("not a DRXF file (bad magic bytes)")]
    BadMagic,
    #[error("unsupported DRXF version {0} (expected {VERSION})")]
    UnsupportedVersion(u32),
    #[error("file truncated in header")]
    TruncatedHeader,
    #[error("file truncated in record {index}")]
    TruncatedRecord { index: usize },
    #[error("record {index} (`{id}`): non-finite value")]
    NonFinite { index: usize, id: String },
    #[error("dimension mismatch: expected {expected}, file has {found}")]
    DimMismatch { expected: String, found: String },
    #[error("record {index}: id is not valid UTF-8")]
    BadId { index: usize },
    #[error("{} trailing bytes after last record", .0)]
    TrailingBytes(usize),
    #[error("invalid manifest: {0}")]
    Invalid(Violation),
}

/// Dimensions of the two feature vectors.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub dino_dim: usize,
    pub block_dims: Vec<usize>,
}

impl Default for FeatureLayout {
    fn default() -> Self {
        Self {
            dino_dim: DEFAULT_DINO_DIM,
            block_dims: DEFAULT_BLOCK_DIMS.to_vec(),
        }
    }
}

impl FeatureLayout {
    pub fn resnet_dim(&self) -> usize {
        self.block_dims.iter().sum()
    }

    /// Column range of residual block `block` (0-based) inside the ResNet vector.
    pub fn block_range(&self, block: usize) -> Range<usize> {
        let start: usize = self.block_dims[..block].iter().sum();
        start..start + self.block_dims[block]
    }

    pub fn block_ranges(&self) -> Vec<Range<usize>> {
        (0..self.block_dims.len())
            .map(|b| self.block_range(b))
            .collect()
    }
}

impl fmt::Display for FeatureLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "dino_dim={} block_dims={:?}",
            self.dino_dim, self.block_dims
        )
    }
}

/// One image's frozen backbone outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRecord {
    pub id: String,
    /// Final-layer [CLS] embedding.
    pub dino: Vec<f32>,
    /// Pooled residual stages concatenated in block order.
    pub resnet: Vec<f32>,
    /// Ground-truth complexity in `[0, 1]`.
    pub score: Option<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub split_name: String,
    pub layout: FeatureLayout,
    pub records: Vec<FeatureRecord>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Rule {
    DinoLength,
    ResnetLength,
    ScoreRange,
    NonFinite,
    DuplicateId,
    EmptyLayout,
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Rule::DinoLength => "dino length differs from dino_dim",
            Rule::ResnetLength => "resnet length differs from sum of block dims",
            Rule::ScoreRange => "score out of [0,1]",
            Rule::NonFinite => "non-finite value",
            Rule::DuplicateId => "duplicate id",
            Rule::EmptyLayout => "layout has a zero dimension",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    /// `None` for manifest-level violations.
    pub record_id: Option<String>,
    pub rule: Rule,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.record_id {
            Some(id) => write!(f, "record `{id}`: {}", self.rule),
            None => write!(f, "manifest: {}", self.rule),
        }
    }
}

impl DatasetManifest {
    pub fn new(split_name: impl Into<String>, layout: FeatureLayout) -> Self {
        Self {
            split_name: split_name.into(),
            layout,
            records: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Scores of all records, or the id of the first record without one.
    pub fn scores(&self) -> Result<Vec<f64>, String> {
        self.records
            .iter()
            .map(|r| r.score.map(f64::from).ok_or_else(|| r.id.clone()))
            .collect()
    }

    pub fn ensure_layout(&self, expected: &FeatureLayout) -> Result<(), FeatureError> {
        if &self.layout != expected {
            return Err(FeatureError::DimMismatch {
                expected: expected.to_string(),
                found: self.layout.to_string(),
            });
        }
        Ok(())
    }
}

/// Every invariant violation in `manifest`; empty iff the manifest is valid.
pub fn validate_manifest(manifest: &DatasetManifest) -> Vec<Violation> {
    let mut out = Vec::new();
    let layout = &manifest.layout;
    if layout.dino_dim == 0 || layout.block_dims.is_empty() || layout.block_dims.contains(&0) {
        out.push(Violation {
            record_id: None,
            rule: Rule::EmptyLayout,
        });
    }
    let resnet_dim = layout.resnet_dim();
    let mut seen = HashSet::new();
    for r in &manifest.records {
        let mut flag = |rule| {
            out.push(Violation {
                record_id: Some(r.id.clone()),
                rule,
            })
        };
        if !seen.insert(r.id.as_str()) {
            flag(Rule::DuplicateId);
        }
        if r.dino.len() != layout.dino_dim {
            flag(Rule::DinoLength);
        }
        if r.resnet.len() != resnet_dim {
            flag(Rule::ResnetLength);
        }
        let finite_score = r.score.is_none_or(f32::is_finite);
        if !finite_score || r.dino.iter().chain(&r.resnet).any(|v| !v.is_finite()) {
            flag(Rule::NonFinite);
        }
        if let Some(s) = r.score {
            if s.is_finite() && !(0.0..=1.0).contains(&s) {
                flag(Rule::ScoreRange);
            }
        }
    }
    out
}

pub fn write_features(
    manifest: &DatasetManifest,
    path: impl AsRef<Path>,
) -> Result<(), FeatureError> {
    let mut w = BufWriter::new(File::create(path)?);
    encode(manifest, &mut w)?;
    w.flush()?;
    Ok(())
}

/// Serializes `manifest` in DRXF v1 after validating it.
pub fn encode(manifest: &DatasetManifest, w: &mut impl Write) -> Result<(), FeatureError> {
    if let Some(v) = validate_manifest(manifest).into_iter().next() {
        return Err(FeatureError::Invalid(v));
    }
    let layout = &manifest.layout;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(manifest.records.len() as u64).to_le_bytes())?;
    w.write_all(&to_u32(layout.dino_dim)?.to_le_bytes())?;
    w.write_all(&to_u32(layout.block_dims.len())?.to_le_bytes())?;
    for &d in &layout.block_dims {
        w.write_all(&to_u32(d)?.to_le_bytes())?;
    }
    for r in &manifest.records {
        w.write_all(&to_u32(r.id.len())?.to_le_bytes())?;
        w.write_all(r.id.as_bytes())?;
        match r.score {
            Some(s) => {
                w.write_all(&[1])?;
                w.write_all(&s.to_le_bytes())?;
            }
            None => w.write_all(&[0])?,
        }
        write_f32s(w, &r.dino)?;
        write_f32s(w, &r.resnet)?;
    }
    Ok(())
}

fn to_u32(v: usize) -> Result<u32, FeatureError> {
    u32::try_from(v).map_err(|_| {
        FeatureError::Io(io::Error::new(
            io::ErrorKind::InvalidInput,
            "length exceeds u32",
        ))
    })
}

fn write_f32s(w: &mut impl Write, values: &[f32]) -> io::Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 4);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

/// Reads a DRXF file. The split name is the file stem.
pub fn read_features(path: impl AsRef<Path>) -> Result<DatasetManifest, FeatureError> {
    let path = path.as_ref();
    let split = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut r = BufReader::new(File::open(path)?);
    decode(&mut r, split)
}

/// Reads a structurally sound DRXF file without checking record contents, so
/// that [`validate_manifest`] can report every violation rather than the first.
pub fn read_features_unchecked(path: impl AsRef<Path>) -> Result<DatasetManifest, FeatureError> {
    let path = path.as_ref();
    let split = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut r = BufReader::new(File::open(path)?);
    decode_unchecked(&mut r, split)
}

/// Like [`read_features`], additionally requiring the header dims to equal `expected`.
pub fn read_features_with_layout(
    path: impl AsRef<Path>,
    expected: &FeatureLayout,
) -> Result<DatasetManifest, FeatureError> {
    let m = read_features(path)?;
    m.ensure_layout(expected)?;
    Ok(m)
}

pub fn decode(r: &mut impl Read, split_name: String) -> Result<DatasetManifest, FeatureError> {
    let manifest = decode_unchecked(r, split_name)?;
    for (index, rec) in manifest.records.iter().enumerate() {
        let finite = rec.score.is_none_or(f32::is_finite)
            && rec.dino.iter().chain(&rec.resnet).all(|v| v.is_finite());
        if !finite {
            return Err(FeatureError::NonFinite {
                index,
                id: rec.id.clone(),
            });
        }
    }
    if let Some(v) = validate_manifest(&manifest).into_iter().next() {
        return Err(FeatureError::Invalid(v));
    }
    Ok(manifest)
}

/// Parses the byte layout only; record values are not checked.
pub fn decode_unchecked(
    r: &mut impl Read,
    split_name: String,
) -> Result<DatasetManifest, FeatureError> {
    let header = |e: io::Error| match e.kind() {
        io::ErrorKind::UnexpectedEof => FeatureError::TruncatedHeader,
        _ => FeatureError::Io(e),
    };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(header)?;
    if &magic != MAGIC {
        return Err(FeatureError::BadMagic);
    }
    let version = read_u32(r).map_err(header)?;
    if version != VERSION {
        return Err(FeatureError::UnsupportedVersion(version));
    }
    let count = read_u64(r).map_err(header)?;
    let dino_dim = read_u32(r).map_err(header)? as usize;
    let n_blocks = read_u32(r).map_err(header)? as usize;
    let mut block_dims = Vec::with_capacity(n_blocks.min(64));
    for _ in 0..n_blocks {
        block_dims.push(read_u32(r).map_err(header)? as usize);
    }
    let layout = FeatureLayout {
        dino_dim,
        block_dims,
    };
    let resnet_dim = layout.resnet_dim();

    let mut records = Vec::with_capacity((count as usize).min(1 << 16));
    for index in 0..count as usize {
        let trunc = |e: io::Error| match e.kind() {
            io::ErrorKind::UnexpectedEof => FeatureError::TruncatedRecord { index },
            _ => FeatureError::Io(e),
        };
        let id_len = read_u32(r).map_err(trunc)? as usize;
        let mut id = vec![0u8; id_len];
        r.read_exact(&mut id).map_err(trunc)?;
        let id = String::from_utf8(id).map_err(|_| FeatureError::BadId { index })?;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag).map_err(trunc)?;
        let score = match flag[0] {
            0 => None,
            _ => Some(read_f32s(r, 1).map_err(trunc)?[0]),
        };
        let dino = read_f32s(r, dino_dim).map_err(trunc)?;
        let resnet = read_f32s(r, resnet_dim).map_err(trunc)?;
        records.push(FeatureRecord {
            id,
            dino,
            resnet,
            score,
        });
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(FeatureError::TrailingBytes(rest.len()));
    }

    Ok(DatasetManifest {
        split_name,
        layout,
        records,
    })
}

fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f32s(r: &mut impl Read, n: usize) -> io::Result<Vec<f32>> {
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

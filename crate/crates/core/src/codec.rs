//! Binary `.rfsq` model files.
//!
//! The layout is little-endian with fixed field widths; `docs/format.md` in
//! the repository is the normative description. Sizes follow closed-form
//! expressions in the per-tree leaf counts, exposed as [`forest_size`] and
//! [`surrogate_size`] so the storage comparison can be checked without
//! trusting the encoder.

use thiserror::Error;

use crate::data::DatasetFingerprint;
use crate::forest::{DecisionTree, Forest, ForestConfig, ForestError, Leaf, LeafSummary, NodeRef, SplitNode};
use crate::mlr::{MlrError, MlrModel};
use crate::surrogate::{PredictionMode, SurrogateError, SurrogateForest, TreeSurrogate};

pub const MAGIC: [u8; 4] = *b"RFSQ";
pub const FORMAT_VERSION: u16 = 1;
/// Conventional file extension.
pub const EXTENSION: &str = "rfsq";

/// Magic, version, kind, float width and payload length before the payload,
/// CRC-32 after it.
pub const ENVELOPE_BYTES: usize = 4 + 2 + 1 + 1 + 8 + 4;
/// `p`, the forest configuration, and the training-data fingerprint.
pub const FOREST_HEADER_BYTES: usize = 4 + CONFIG_BYTES + 16;
/// `p` and the source forest's configuration.
pub const SURROGATE_HEADER_BYTES: usize = 4 + CONFIG_BYTES;
// n: u64, k, d, m, min_leaf: u32, summary: u8, seed: u64
const CONFIG_BYTES: usize = 8 + 4 * 4 + 1 + 8;

const LEAF_FLAG: u32 = 1 << 31;

#[derive(Debug, Error, PartialEq)]
pub enum CodecError {
    #[error("not an rfsq file (bad magic bytes)")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("truncated input: needed {needed} bytes, found {available}")]
    Truncated { needed: usize, available: usize },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("{0} unexpected bytes after the checksum")]
    TrailingBytes(usize),
    #[error("unknown model kind {0}")]
    UnknownKind(u8),
    #[error("unsupported float width {0}")]
    UnknownFloatWidth(u8),
    #[error("value {0} does not fit in the chosen float width")]
    NotRepresentable(f64),
    #[error("cannot encode a model with no trees")]
    EmptyModel,
    #[error("malformed payload: {0}")]
    Malformed(String),
}

impl From<ForestError> for CodecError {
    fn from(e: ForestError) -> Self {
        CodecError::Malformed(e.to_string())
    }
}

impl From<SurrogateError> for CodecError {
    fn from(e: SurrogateError) -> Self {
        CodecError::Malformed(e.to_string())
    }
}

impl From<MlrError> for CodecError {
    fn from(e: MlrError) -> Self {
        CodecError::Malformed(e.to_string())
    }
}

/// Width of every stored real number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FloatWidth {
    F32,
    #[default]
    F64,
}

impl FloatWidth {
    pub fn bytes(self) -> usize {
        match self {
            FloatWidth::F32 => 4,
            FloatWidth::F64 => 8,
        }
    }

    fn tag(self) -> u8 {
        self.bytes() as u8
    }

    fn from_tag(tag: u8) -> Result<Self, CodecError> {
        match tag {
            4 => Ok(FloatWidth::F32),
            8 => Ok(FloatWidth::F64),
            other => Err(CodecError::UnknownFloatWidth(other)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Forest,
    SurrogateForest,
}

impl ModelKind {
    fn tag(self) -> u8 {
        match self {
            ModelKind::Forest => 0,
            ModelKind::SurrogateForest => 1,
        }
    }
}

/// Either kind of stored model.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Forest(Forest),
    SurrogateForest(SurrogateForest),
}

impl Model {
    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Forest(_) => ModelKind::Forest,
            Model::SurrogateForest(_) => ModelKind::SurrogateForest,
        }
    }

    pub fn n_features(&self) -> usize {
        match self {
            Model::Forest(f) => f.n_features(),
            Model::SurrogateForest(s) => s.n_features(),
        }
    }

    pub fn config(&self) -> &ForestConfig {
        match self {
            Model::Forest(f) => f.config(),
            Model::SurrogateForest(s) => s.config(),
        }
    }

    pub fn leaf_counts(&self) -> Vec<usize> {
        match self {
            Model::Forest(f) => f.leaf_counts(),
            Model::SurrogateForest(s) => s.leaf_counts(),
        }
    }

    /// Ensemble prediction; the error is a display string because the two
    /// model kinds fail with different error types.
    pub fn predict(&self, x: &[f64]) -> Result<f64, String> {
        match self {
            Model::Forest(f) => f.predict(x).map_err(|e| e.to_string()),
            Model::SurrogateForest(s) => s.predict(x).map_err(|e| e.to_string()),
        }
    }
}

impl From<Forest> for Model {
    fn from(f: Forest) -> Self {
        Model::Forest(f)
    }
}

impl From<SurrogateForest> for Model {
    fn from(s: SurrogateForest) -> Self {
        Model::SurrogateForest(s)
    }
}

/// Encoded size of a tree forest with the given per-tree leaf counts.
pub fn forest_size(leaf_counts: &[usize], width: FloatWidth) -> usize {
    let w = width.bytes();
    let trees: usize = leaf_counts.iter().map(|&k| 4 + (k - 1) * (12 + w) + k * (w + 4)).sum();
    ENVELOPE_BYTES + FOREST_HEADER_BYTES + trees
}

/// Encoded size of a surrogate forest with `p` features and the given
/// per-tree leaf counts. There is no term in the training-set size.
pub fn surrogate_size(leaf_counts: &[usize], n_features: usize, width: FloatWidth) -> usize {
    let w = width.bytes();
    let trees: usize = leaf_counts.iter().map(|&k| 4 + (k - 1) * (n_features + 1) * w + k * w + 1).sum();
    ENVELOPE_BYTES + SURROGATE_HEADER_BYTES + trees
}

/// Encoded size of `model`, from the closed-form layout.
pub fn measure_size(model: &Model, width: FloatWidth) -> usize {
    match model {
        Model::Forest(f) => forest_size(&f.leaf_counts(), width),
        Model::SurrogateForest(s) => surrogate_size(&s.leaf_counts(), s.n_features(), width),
    }
}

struct Writer {
    buf: Vec<u8>,
    width: FloatWidth,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn count(&mut self, v: usize) -> Result<(), CodecError> {
        let v = u32::try_from(v).map_err(|_| CodecError::Malformed(format!("{v} does not fit in u32")))?;
        self.u32(v);
        Ok(())
    }
    fn real(&mut self, v: f64) -> Result<(), CodecError> {
        if !v.is_finite() {
            return Err(CodecError::NotRepresentable(v));
        }
        match self.width {
            FloatWidth::F64 => self.buf.extend_from_slice(&v.to_le_bytes()),
            FloatWidth::F32 => {
                let narrow = v as f32;
                if !narrow.is_finite() {
                    return Err(CodecError::NotRepresentable(v));
                }
                self.buf.extend_from_slice(&narrow.to_le_bytes());
            }
        }
        Ok(())
    }
    fn config(&mut self, p: usize, c: &ForestConfig) -> Result<(), CodecError> {
        self.count(p)?;
        self.u64(c.n as u64);
        self.count(c.k)?;
        self.count(c.d)?;
        self.count(c.m)?;
        self.count(c.min_leaf)?;
        self.u8(match c.leaf_summary {
            LeafSummary::Mean => 0,
            LeafSummary::Median => 1,
        });
        self.u64(c.seed);
        Ok(())
    }
}

fn node_ref(r: NodeRef) -> u32 {
    match r {
        NodeRef::Split(i) => i,
        NodeRef::Leaf(i) => LEAF_FLAG | i,
    }
}

fn mode_tag(mode: PredictionMode) -> u8 {
    match mode {
        PredictionMode::Argmax => 0,
        PredictionMode::Expectation => 1,
    }
}

fn forest_payload(forest: &Forest, w: &mut Writer) -> Result<(), CodecError> {
    w.config(forest.n_features(), forest.config())?;
    let fp = forest.fingerprint();
    w.u64(fp.rows);
    w.u64(fp.hash);
    for tree in forest.trees() {
        w.count(tree.n_leaves())?;
        for node in tree.nodes() {
            w.u32(node.feature);
            w.real(node.threshold)?;
            w.u32(node_ref(node.left));
            w.u32(node_ref(node.right));
        }
        for leaf in tree.leaves() {
            w.real(leaf.value)?;
            w.u32(leaf.count);
        }
    }
    Ok(())
}

fn surrogate_payload(sf: &SurrogateForest, w: &mut Writer) -> Result<(), CodecError> {
    w.config(sf.n_features(), sf.config())?;
    for s in sf.surrogates() {
        w.count(s.n_leaves())?;
        if let Some(model) = s.model() {
            for v in model.to_flat() {
                w.real(v)?;
            }
        }
        for &v in s.leaf_values() {
            w.real(v)?;
        }
        w.u8(mode_tag(s.mode()));
    }
    Ok(())
}

/// Serializes `model` into a complete envelope.
pub fn encode(model: &Model, width: FloatWidth) -> Result<Vec<u8>, CodecError> {
    let mut payload = Writer { buf: Vec::with_capacity(measure_size(model, width)), width };
    match model {
        Model::Forest(f) => {
            if f.trees().is_empty() {
                return Err(CodecError::EmptyModel);
            }
            forest_payload(f, &mut payload)?
        }
        Model::SurrogateForest(s) => {
            if s.surrogates().is_empty() {
                return Err(CodecError::EmptyModel);
            }
            surrogate_payload(s, &mut payload)?
        }
    }
    let payload = payload.buf;
    let mut out = Vec::with_capacity(ENVELOPE_BYTES + payload.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(model.kind().tag());
    out.push(width.tag());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    Ok(out)
}

pub fn encode_forest(forest: &Forest, width: FloatWidth) -> Result<Vec<u8>, CodecError> {
    encode(&Model::Forest(forest.clone()), width)
}

pub fn encode_surrogate(sf: &SurrogateForest, width: FloatWidth) -> Result<Vec<u8>, CodecError> {
    encode(&Model::SurrogateForest(sf.clone()), width)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    width: FloatWidth,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(CodecError::Malformed(format!(
                "payload ends at byte {} while reading {n} bytes at {}",
                self.bytes.len(),
                self.pos
            )));
        }
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8, CodecError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, CodecError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, CodecError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn real(&mut self) -> Result<f64, CodecError> {
        let v = match self.width {
            FloatWidth::F64 => f64::from_le_bytes(self.take(8)?.try_into().unwrap()),
            FloatWidth::F32 => f64::from(f32::from_le_bytes(self.take(4)?.try_into().unwrap())),
        };
        if !v.is_finite() {
            return Err(CodecError::Malformed("non-finite real".into()));
        }
        Ok(v)
    }
    /// A count that must leave room for at least `min_bytes_each` per item.
    fn bounded(&mut self, min_bytes_each: usize) -> Result<usize, CodecError> {
        let v = self.u32()? as usize;
        if v.saturating_mul(min_bytes_each) > self.bytes.len() - self.pos {
            return Err(CodecError::Malformed(format!("count {v} exceeds the remaining payload")));
        }
        Ok(v)
    }
    fn config(&mut self) -> Result<(usize, ForestConfig), CodecError> {
        let p = self.u32()? as usize;
        let n = self.u64()? as usize;
        let k = self.u32()? as usize;
        let d = self.u32()? as usize;
        let m = self.u32()? as usize;
        let min_leaf = self.u32()? as usize;
        let leaf_summary = match self.u8()? {
            0 => LeafSummary::Mean,
            1 => LeafSummary::Median,
            t => return Err(CodecError::Malformed(format!("unknown leaf summary {t}"))),
        };
        let seed = self.u64()?;
        Ok((p, ForestConfig { n, k, d, m, min_leaf, leaf_summary, seed }))
    }
    fn finish(&self) -> Result<(), CodecError> {
        if self.pos != self.bytes.len() {
            return Err(CodecError::Malformed(format!(
                "{} unread payload bytes",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn read_node_ref(v: u32) -> NodeRef {
    if v & LEAF_FLAG != 0 {
        NodeRef::Leaf(v & !LEAF_FLAG)
    } else {
        NodeRef::Split(v)
    }
}

fn decode_forest(r: &mut Reader) -> Result<Forest, CodecError> {
    let (p, config) = r.config()?;
    let fingerprint = DatasetFingerprint { rows: r.u64()?, hash: r.u64()? };
    let mut trees = Vec::with_capacity(config.m.min(1 << 16));
    for _ in 0..config.m {
        let k = r.bounded(4)?;
        if k == 0 {
            return Err(CodecError::Malformed("tree with zero leaves".into()));
        }
        let mut nodes = Vec::with_capacity(k - 1);
        for _ in 0..k - 1 {
            let feature = r.u32()?;
            let threshold = r.real()?;
            let left = read_node_ref(r.u32()?);
            let right = read_node_ref(r.u32()?);
            nodes.push(SplitNode { feature, threshold, left, right });
        }
        let mut leaves = Vec::with_capacity(k);
        for _ in 0..k {
            let value = r.real()?;
            let count = r.u32()?;
            leaves.push(Leaf { value, count });
        }
        let total: u64 = leaves.iter().map(|l| u64::from(l.count)).sum();
        if total != config.n as u64 {
            return Err(CodecError::Malformed(format!(
                "leaf counts sum to {total}, subsample size is {}",
                config.n
            )));
        }
        trees.push(DecisionTree::from_parts(p, nodes, leaves)?);
    }
    r.finish()?;
    Ok(Forest::from_parts(config, p, fingerprint, trees)?)
}

fn decode_surrogate(r: &mut Reader) -> Result<SurrogateForest, CodecError> {
    let (p, config) = r.config()?;
    let mut surrogates = Vec::with_capacity(config.m.min(1 << 16));
    for _ in 0..config.m {
        let k = r.bounded(1)?;
        if k == 0 {
            return Err(CodecError::Malformed("surrogate with zero leaves".into()));
        }
        let model = if k >= 2 {
            let params = (0..(k - 1) * (p + 1)).map(|_| r.real()).collect::<Result<Vec<_>, _>>()?;
            Some(MlrModel::from_flat(k, p, &params)?)
        } else {
            None
        };
        let leaf_values = (0..k).map(|_| r.real()).collect::<Result<Vec<_>, _>>()?;
        let mode = match r.u8()? {
            0 => PredictionMode::Argmax,
            1 => PredictionMode::Expectation,
            t => return Err(CodecError::Malformed(format!("unknown prediction mode {t}"))),
        };
        surrogates.push(TreeSurrogate::new(model, leaf_values, mode)?);
    }
    r.finish()?;
    Ok(SurrogateForest::new(config, p, surrogates)?)
}

/// Parses an envelope, verifying magic, version, length and checksum before
/// touching the payload.
pub fn decode(bytes: &[u8]) -> Result<Model, CodecError> {
    const PREFIX: usize = ENVELOPE_BYTES - 4;
    if bytes.len() < MAGIC.len() {
        return Err(CodecError::Truncated { needed: ENVELOPE_BYTES, available: bytes.len() });
    }
    if bytes[..4] != MAGIC {
        return Err(CodecError::BadMagic);
    }
    if bytes.len() < PREFIX {
        return Err(CodecError::Truncated { needed: ENVELOPE_BYTES, available: bytes.len() });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(CodecError::UnsupportedVersion(version));
    }
    let kind = bytes[6];
    let width = FloatWidth::from_tag(bytes[7])?;
    let payload_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let needed = usize::try_from(payload_len)
        .ok()
        .and_then(|l| l.checked_add(ENVELOPE_BYTES))
        .unwrap_or(usize::MAX);
    if bytes.len() < needed {
        return Err(CodecError::Truncated { needed, available: bytes.len() });
    }
    if bytes.len() > needed {
        return Err(CodecError::TrailingBytes(bytes.len() - needed));
    }
    let payload = &bytes[PREFIX..needed - 4];
    let stored = u32::from_le_bytes(bytes[needed - 4..].try_into().unwrap());
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(CodecError::ChecksumMismatch { stored, computed });
    }
    let mut reader = Reader { bytes: payload, pos: 0, width };
    match kind {
        0 => Ok(Model::Forest(decode_forest(&mut reader)?)),
        1 => Ok(Model::SurrogateForest(decode_surrogate(&mut reader)?)),
        other => Err(CodecError::UnknownKind(other)),
    }
}

/// The float width recorded in an envelope header.
pub fn peek_float_width(bytes: &[u8]) -> Result<FloatWidth, CodecError> {
    if bytes.len() < 8 {
        return Err(CodecError::Truncated { needed: ENVELOPE_BYTES, available: bytes.len() });
    }
    if bytes[..4] != MAGIC {
        return Err(CodecError::BadMagic);
    }
    FloatWidth::from_tag(bytes[7])
}

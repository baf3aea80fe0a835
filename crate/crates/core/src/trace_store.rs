//! Trace bundles: the on-disk package an inference run exports.
//!
//! A bundle is a directory with `manifest.json`, `tokens.json` (array of
//! token surface strings) and headerless little-endian row-major blobs:
//!
//! | blob              | shape                     | dtype | mode    |
//! |-------------------|---------------------------|-------|---------|
//! | `hidden_<layer>`  | `[num_tokens, hidden_dim]`| fp16  | full    |
//! | `unembed`         | `[hidden_dim, vocab_size]`| fp32  | full    |
//! | `ln_gamma`        | `[hidden_dim]`            | fp32  | full    |
//! | `ln_beta`         | `[hidden_dim]`            | fp32  | full    |
//! | `attn_<layer>`    | `[num_tokens, num_tokens]`| fp16  | either  |
//! | `step_attn`       | `[steps, steps]`          | fp32  | either  |
//! | `jsd_<layer>`     | `[num_tokens]`            | fp32  | compact |
//! | `logprobs`        | `[num_tokens]`            | fp32  | both    |
//!
//! Every blob is listed in the manifest's blob table with its shape, dtype,
//! file name and CRC32. The dtype column gives the defaults; the table is
//! authoritative. `jsd_<layer>[t]` holds the divergence of the distributions
//! predicting token `t` (read from hidden position `t - 1`); entry 0 is
//! always 0.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use half::f16;
use serde::{Deserialize, Serialize};

use crate::segmentation::StepBoundaries;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TOKENS_FILE: &str = "tokens.json";
pub const UNEMBED_BLOB: &str = "unembed";
pub const LN_GAMMA_BLOB: &str = "ln_gamma";
pub const LN_BETA_BLOB: &str = "ln_beta";
pub const LOGPROBS_BLOB: &str = "logprobs";
pub const STEP_ATTN_BLOB: &str = "step_attn";

pub fn hidden_blob(layer: usize) -> String {
    format!("hidden_{layer}")
}

pub fn attn_blob(layer: usize) -> String {
    format!("attn_{layer}")
}

pub fn jsd_blob(layer: usize) -> String {
    format!("jsd_{layer}")
}

/// Errors from reading, writing or validating a bundle.
#[derive(Debug, thiserror::Error)]
pub enum BundleError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed {file}: {source}")]
    Json {
        file: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("missing blob `{blob}`")]
    MissingBlob { blob: String },
    #[error("shape mismatch in blob `{blob}`: {detail}")]
    ShapeMismatch { blob: String, detail: String },
    #[error("checksum mismatch in blob `{blob}`: manifest {expected:08x}, data {found:08x}")]
    ChecksumMismatch { blob: String, expected: u32, found: u32 },
    #[error("unknown bundle mode `{0}`")]
    UnknownMode(String),
    #[error("invalid value in blob `{blob}`: {detail}")]
    InvalidValue { blob: String, detail: String },
    #[error("invalid bundle: {0}")]
    Invalid(String),
}

type BResult<T> = std::result::Result<T, BundleError>;

fn io_err(path: &Path, source: std::io::Error) -> BundleError {
    BundleError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Full,
    Compact,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    Fp16,
    Fp32,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::Fp16 => 2,
            DType::Fp32 => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TraceLabel {
    Hallucinated,
    Truthful,
    Unlabeled,
}

impl TraceLabel {
    /// `Some(true)` for hallucinated, `Some(false)` for truthful.
    pub fn as_positive(self) -> Option<bool> {
        match self {
            TraceLabel::Hallucinated => Some(true),
            TraceLabel::Truthful => Some(false),
            TraceLabel::Unlabeled => None,
        }
    }
}

/// Dense row-major tensor whose values are exactly representable in its dtype.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    dtype: DType,
    data: Vec<f32>,
}

impl Tensor {
    /// Builds a tensor, rounding values to the storage dtype.
    pub fn new(shape: Vec<usize>, dtype: DType, mut data: Vec<f32>) -> BResult<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(BundleError::Invalid(format!(
                "tensor of shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        if dtype == DType::Fp16 {
            for v in &mut data {
                *v = f16::from_f32(*v).to_f32();
            }
        }
        Ok(Self { shape, dtype, data })
    }

    pub fn matrix(rows: usize, cols: usize, dtype: DType, data: Vec<f32>) -> BResult<Self> {
        Self::new(vec![rows, cols], dtype, data)
    }

    pub fn vector(dtype: DType, data: Vec<f32>) -> BResult<Self> {
        Self::new(vec![data.len()], dtype, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    /// Row `i` of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols() + c]
    }

    fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * self.dtype.size());
        match self.dtype {
            DType::Fp16 => {
                for v in &self.data {
                    out.extend_from_slice(&f16::from_f32(*v).to_le_bytes());
                }
            }
            DType::Fp32 => {
                for v in &self.data {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    fn decode(shape: Vec<usize>, dtype: DType, bytes: &[u8]) -> Self {
        let data = match dtype {
            DType::Fp16 => bytes
                .chunks_exact(2)
                .map(|c| f16::from_le_bytes([c[0], c[1]]).to_f32())
                .collect(),
            DType::Fp32 => bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        };
        Self { shape, dtype, data }
    }

    fn check_shape(&self, blob: &str, expected: &[usize]) -> BResult<()> {
        if self.shape != expected {
            return Err(BundleError::ShapeMismatch {
                blob: blob.to_string(),
                detail: format!("expected shape {expected:?}, found {:?}", self.shape),
            });
        }
        Ok(())
    }

    fn check_finite(&self, blob: &str) -> BResult<()> {
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(BundleError::InvalidValue {
                blob: blob.to_string(),
                detail: format!("non-finite value at flat index {i}"),
            });
        }
        Ok(())
    }
}

/// Trace-level metadata stored in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleMeta {
    pub trace_id: String,
    #[serde(default)]
    pub question_id: Option<String>,
    pub model_id: String,
    pub num_tokens: usize,
    pub hidden_dim: usize,
    pub vocab_size: usize,
    pub num_layers_total: usize,
    /// Layers whose logit-lens distributions enter the reasoning score.
    pub reasoning_layers: Vec<usize>,
    /// Anchor layer; its hidden state is the last block output before the
    /// model's final norm, whose parameters are `ln_gamma`/`ln_beta`.
    pub final_layer: usize,
    pub attention_layers: Vec<usize>,
    pub num_heads: usize,
    pub mode: Mode,
    pub ln_epsilon: f32,
    #[serde(default)]
    pub question_text: String,
    #[serde(default)]
    pub label: Option<TraceLabel>,
    #[serde(default)]
    pub step_boundaries: Option<StepBoundaries>,
}

/// Blob table entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlobEntry {
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub file: String,
    pub crc32: u32,
}

/// The `manifest.json` document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    #[serde(flatten)]
    pub meta: BundleMeta,
    pub blobs: BTreeMap<String, BlobEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub index: usize,
    pub surface_text: String,
    /// Natural-log probability of this token under the model.
    pub logprob: f32,
}

impl AsRef<str> for TokenRecord {
    fn as_ref(&self) -> &str {
        &self.surface_text
    }
}

/// Full-mode activations.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationSet {
    /// `[num_tokens, hidden_dim]` per layer in reasoning layers plus final.
    pub hidden: BTreeMap<usize, Tensor>,
    pub ln_gamma: Tensor,
    pub ln_beta: Tensor,
    /// `[hidden_dim, vocab_size]`.
    pub unembed: Tensor,
}

/// Head-averaged attention, either per token pair or already reduced to step pairs.
#[derive(Debug, Clone, PartialEq)]
pub enum AttentionData {
    TokenLevel(BTreeMap<usize, Tensor>),
    StepLevel(Tensor),
}

/// Precomputed per-token divergences for compact bundles.
#[derive(Debug, Clone, PartialEq)]
pub struct CompactScores {
    /// `[num_tokens]` per reasoning layer.
    pub jsd: BTreeMap<usize, Tensor>,
}

/// An in-memory trace bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceBundle {
    pub meta: BundleMeta,
    pub tokens: Vec<TokenRecord>,
    pub activations: Option<ActivationSet>,
    pub attention: Option<AttentionData>,
    pub compact: Option<CompactScores>,
}

const ATTN_TOLERANCE: f32 = 1e-3;

impl TraceBundle {
    pub fn logprobs(&self) -> Vec<f64> {
        self.tokens.iter().map(|t| t.logprob as f64).collect()
    }

    pub fn text(&self) -> String {
        self.tokens.iter().map(|t| t.surface_text.as_str()).collect()
    }

    pub fn is_compact(&self) -> bool {
        self.meta.mode == Mode::Compact
    }

    /// Checks every structural and value invariant of the bundle.
    pub fn validate(&self) -> BResult<()> {
        let m = &self.meta;
        let t = m.num_tokens;
        if self.tokens.len() != t {
            return Err(BundleError::ShapeMismatch {
                blob: TOKENS_FILE.into(),
                detail: format!("manifest declares {t} tokens, found {}", self.tokens.len()),
            });
        }
        for (i, tok) in self.tokens.iter().enumerate() {
            if tok.index != i {
                return Err(BundleError::Invalid(format!("token {i} carries index {}", tok.index)));
            }
            if !tok.logprob.is_finite() || tok.logprob > 0.0 {
                return Err(BundleError::InvalidValue {
                    blob: LOGPROBS_BLOB.into(),
                    detail: format!("logprob {} at token {i} must be finite and <= 0", tok.logprob),
                });
            }
        }
        for &l in m.reasoning_layers.iter().chain(&m.attention_layers).chain([&m.final_layer]) {
            if l >= m.num_layers_total {
                return Err(BundleError::Invalid(format!(
                    "layer {l} outside [0, {})",
                    m.num_layers_total
                )));
            }
        }
        if let Some(b) = &m.step_boundaries {
            b.validate(t).map_err(|e| BundleError::Invalid(e.to_string()))?;
        }

        match m.mode {
            Mode::Full => {
                let acts = self
                    .activations
                    .as_ref()
                    .ok_or_else(|| BundleError::Invalid("full-mode bundle without activations".into()))?;
                if self.compact.is_some() {
                    return Err(BundleError::Invalid("full-mode bundle carries compact scores".into()));
                }
                let wanted: BTreeSet<usize> =
                    m.reasoning_layers.iter().copied().chain([m.final_layer]).collect();
                let have: BTreeSet<usize> = acts.hidden.keys().copied().collect();
                if let Some(l) = wanted.difference(&have).next() {
                    return Err(BundleError::MissingBlob { blob: hidden_blob(*l) });
                }
                if let Some(l) = have.difference(&wanted).next() {
                    return Err(BundleError::Invalid(format!("unexpected hidden state for layer {l}")));
                }
                for (l, h) in &acts.hidden {
                    let name = hidden_blob(*l);
                    h.check_shape(&name, &[t, m.hidden_dim])?;
                    h.check_finite(&name)?;
                }
                acts.ln_gamma.check_shape(LN_GAMMA_BLOB, &[m.hidden_dim])?;
                acts.ln_beta.check_shape(LN_BETA_BLOB, &[m.hidden_dim])?;
                acts.unembed.check_shape(UNEMBED_BLOB, &[m.hidden_dim, m.vocab_size])?;
                acts.ln_gamma.check_finite(LN_GAMMA_BLOB)?;
                acts.ln_beta.check_finite(LN_BETA_BLOB)?;
                acts.unembed.check_finite(UNEMBED_BLOB)?;
                if !m.ln_epsilon.is_finite() || m.ln_epsilon < 0.0 {
                    return Err(BundleError::Invalid(format!("ln_epsilon {} must be >= 0", m.ln_epsilon)));
                }
            }
            Mode::Compact => {
                if self.activations.is_some() {
                    return Err(BundleError::Invalid("compact bundle carries activations".into()));
                }
                let cs = self
                    .compact
                    .as_ref()
                    .ok_or_else(|| BundleError::Invalid("compact bundle without scores".into()))?;
                for l in &m.reasoning_layers {
                    let name = jsd_blob(*l);
                    let v = cs.jsd.get(l).ok_or(BundleError::MissingBlob { blob: name.clone() })?;
                    v.check_shape(&name, &[t])?;
                    let max = std::f32::consts::LN_2;
                    if let Some(i) = v.data().iter().position(|x| !(0.0..=max).contains(x)) {
                        return Err(BundleError::InvalidValue {
                            blob: name,
                            detail: format!("JSD {} at token {i} outside [0, ln 2]", v.data()[i]),
                        });
                    }
                }
                if cs.jsd.len() != m.reasoning_layers.len() {
                    return Err(BundleError::Invalid("compact scores for undeclared layers".into()));
                }
            }
        }

        match &self.attention {
            None => {}
            Some(AttentionData::TokenLevel(layers)) => {
                let wanted: BTreeSet<usize> = m.attention_layers.iter().copied().collect();
                let have: BTreeSet<usize> = layers.keys().copied().collect();
                if let Some(l) = wanted.difference(&have).next() {
                    return Err(BundleError::MissingBlob { blob: attn_blob(*l) });
                }
                if wanted != have {
                    return Err(BundleError::Invalid("attention stored for undeclared layers".into()));
                }
                for (l, a) in layers {
                    let name = attn_blob(*l);
                    a.check_shape(&name, &[t, t])?;
                    a.check_finite(&name)?;
                    for row in 0..t {
                        let r = a.row(row);
                        if let Some(s) = r.iter().position(|v| *v < 0.0 || *v > 1.0 + ATTN_TOLERANCE) {
                            return Err(BundleError::InvalidValue {
                                blob: name,
                                detail: format!("attention {} at ({row}, {s}) outside [0, 1]", r[s]),
                            });
                        }
                        if let Some(s) = r[row + 1..].iter().position(|v| *v != 0.0) {
                            return Err(BundleError::InvalidValue {
                                blob: name,
                                detail: format!("non-causal attention at ({row}, {})", row + 1 + s),
                            });
                        }
                    }
                }
            }
            Some(AttentionData::StepLevel(a)) => {
                let b = m.step_boundaries.as_ref().ok_or_else(|| {
                    BundleError::Invalid("step-level attention requires recorded step boundaries".into())
                })?;
                let s = b.len();
                a.check_shape(STEP_ATTN_BLOB, &[s, s])?;
                a.check_finite(STEP_ATTN_BLOB)?;
                for k in 0..s {
                    for j in 0..s {
                        let v = a.get(k, j);
                        if j >= k && v != 0.0 {
                            return Err(BundleError::InvalidValue {
                                blob: STEP_ATTN_BLOB.into(),
                                detail: format!("entry ({k}, {j}) must be zero"),
                            });
                        }
                        if !(0.0..=1.0 + ATTN_TOLERANCE).contains(&v) {
                            return Err(BundleError::InvalidValue {
                                blob: STEP_ATTN_BLOB.into(),
                                detail: format!("entry ({k}, {j}) = {v} outside [0, 1]"),
                            });
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn blobs(&self) -> BResult<Vec<(String, &Tensor)>> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        if let Some(acts) = &self.activations {
            for (l, h) in &acts.hidden {
                out.push((hidden_blob(*l), h));
            }
            out.push((LN_GAMMA_BLOB.into(), &acts.ln_gamma));
            out.push((LN_BETA_BLOB.into(), &acts.ln_beta));
            out.push((UNEMBED_BLOB.into(), &acts.unembed));
        }
        match &self.attention {
            Some(AttentionData::TokenLevel(layers)) => {
                for (l, a) in layers {
                    out.push((attn_blob(*l), a));
                }
            }
            Some(AttentionData::StepLevel(a)) => out.push((STEP_ATTN_BLOB.into(), a)),
            None => {}
        }
        if let Some(cs) = &self.compact {
            for (l, v) in &cs.jsd {
                out.push((jsd_blob(*l), v));
            }
        }
        Ok(out)
    }
}

/// Writes `bundle` to directory `path`, replacing any existing directory.
///
/// Files are written into a sibling temporary directory that is renamed into
/// place once complete.
pub fn write_bundle(bundle: &TraceBundle, path: impl AsRef<Path>) -> BResult<()> {
    let path = path.as_ref();
    bundle.validate()?;

    let name = path
        .file_name()
        .ok_or_else(|| BundleError::Invalid(format!("bundle path {} has no file name", path.display())))?
        .to_string_lossy()
        .into_owned();
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    let tmp = parent.join(format!(".{name}.tmp-{}", std::process::id()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| io_err(&tmp, e))?;
    }
    fs::create_dir(&tmp).map_err(|e| io_err(&tmp, e))?;

    let mut table = BTreeMap::new();
    let logprobs = Tensor::vector(DType::Fp32, bundle.tokens.iter().map(|t| t.logprob).collect())?;
    let mut blobs = bundle.blobs()?;
    blobs.push((LOGPROBS_BLOB.into(), &logprobs));
    for (blob, tensor) in blobs {
        let bytes = tensor.encode();
        let file = format!("{blob}.bin");
        let p = tmp.join(&file);
        fs::write(&p, &bytes).map_err(|e| io_err(&p, e))?;
        table.insert(
            blob,
            BlobEntry {
                shape: tensor.shape().to_vec(),
                dtype: tensor.dtype(),
                file,
                crc32: crc32fast::hash(&bytes),
            },
        );
    }

    let texts: Vec<&str> = bundle.tokens.iter().map(|t| t.surface_text.as_str()).collect();
    let tokens_json = serde_json::to_vec_pretty(&texts).map_err(|source| BundleError::Json {
        file: TOKENS_FILE.into(),
        source,
    })?;
    let p = tmp.join(TOKENS_FILE);
    fs::write(&p, tokens_json).map_err(|e| io_err(&p, e))?;

    let manifest = BundleManifest {
        meta: bundle.meta.clone(),
        blobs: table,
    };
    let manifest_json = serde_json::to_vec_pretty(&manifest).map_err(|source| BundleError::Json {
        file: MANIFEST_FILE.into(),
        source,
    })?;
    let p = tmp.join(MANIFEST_FILE);
    fs::write(&p, manifest_json).map_err(|e| io_err(&p, e))?;

    if path.exists() {
        fs::remove_dir_all(path).map_err(|e| io_err(path, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))?;
    Ok(())
}

fn read_blob(dir: &Path, name: &str, table: &BTreeMap<String, BlobEntry>) -> BResult<Tensor> {
    let entry = table.get(name).ok_or_else(|| BundleError::MissingBlob { blob: name.into() })?;
    let p = dir.join(&entry.file);
    let bytes = match fs::read(&p) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(BundleError::MissingBlob { blob: name.into() })
        }
        Err(e) => return Err(io_err(&p, e)),
    };
    let expected = entry.shape.iter().product::<usize>() * entry.dtype.size();
    if bytes.len() != expected {
        return Err(BundleError::ShapeMismatch {
            blob: name.into(),
            detail: format!(
                "shape {:?} x {:?} needs {expected} bytes, file has {}",
                entry.shape,
                entry.dtype,
                bytes.len()
            ),
        });
    }
    let found = crc32fast::hash(&bytes);
    if found != entry.crc32 {
        return Err(BundleError::ChecksumMismatch {
            blob: name.into(),
            expected: entry.crc32,
            found,
        });
    }
    Ok(Tensor::decode(entry.shape.clone(), entry.dtype, &bytes))
}

/// Reads and fully validates the bundle stored in directory `path`.
pub fn open_bundle(path: impl AsRef<Path>) -> BResult<TraceBundle> {
    let dir = path.as_ref();
    let mp = dir.join(MANIFEST_FILE);
    let raw = fs::read(&mp).map_err(|e| io_err(&mp, e))?;
    let value: serde_json::Value = serde_json::from_slice(&raw).map_err(|source| BundleError::Json {
        file: MANIFEST_FILE.into(),
        source,
    })?;
    match value.get("mode").and_then(|v| v.as_str()) {
        Some("full") | Some("compact") => {}
        Some(other) => return Err(BundleError::UnknownMode(other.to_string())),
        None => return Err(BundleError::UnknownMode("<absent>".into())),
    }
    let manifest: BundleManifest = serde_json::from_value(value).map_err(|source| BundleError::Json {
        file: MANIFEST_FILE.into(),
        source,
    })?;
    let meta = manifest.meta;
    let table = manifest.blobs;

    let tp = dir.join(TOKENS_FILE);
    let raw = fs::read(&tp).map_err(|e| io_err(&tp, e))?;
    let texts: Vec<String> = serde_json::from_slice(&raw).map_err(|source| BundleError::Json {
        file: TOKENS_FILE.into(),
        source,
    })?;
    let logprobs = read_blob(dir, LOGPROBS_BLOB, &table)?;
    if logprobs.data().len() != texts.len() {
        return Err(BundleError::ShapeMismatch {
            blob: LOGPROBS_BLOB.into(),
            detail: format!("{} logprobs for {} tokens", logprobs.data().len(), texts.len()),
        });
    }
    let tokens = texts
        .into_iter()
        .zip(logprobs.data())
        .enumerate()
        .map(|(index, (surface_text, &logprob))| TokenRecord {
            index,
            surface_text,
            logprob,
        })
        .collect();

    let activations = match meta.mode {
        Mode::Full => {
            let mut hidden = BTreeMap::new();
            let layers: BTreeSet<usize> =
                meta.reasoning_layers.iter().copied().chain([meta.final_layer]).collect();
            for l in layers {
                hidden.insert(l, read_blob(dir, &hidden_blob(l), &table)?);
            }
            Some(ActivationSet {
                hidden,
                ln_gamma: read_blob(dir, LN_GAMMA_BLOB, &table)?,
                ln_beta: read_blob(dir, LN_BETA_BLOB, &table)?,
                unembed: read_blob(dir, UNEMBED_BLOB, &table)?,
            })
        }
        Mode::Compact => None,
    };
    let compact = match meta.mode {
        Mode::Compact => {
            let mut jsd = BTreeMap::new();
            for &l in &meta.reasoning_layers {
                jsd.insert(l, read_blob(dir, &jsd_blob(l), &table)?);
            }
            Some(CompactScores { jsd })
        }
        Mode::Full => None,
    };
    let attention = if table.contains_key(STEP_ATTN_BLOB) {
        Some(AttentionData::StepLevel(read_blob(dir, STEP_ATTN_BLOB, &table)?))
    } else if meta.attention_layers.iter().any(|l| table.contains_key(&attn_blob(*l))) {
        let mut layers = BTreeMap::new();
        for &l in &meta.attention_layers {
            layers.insert(l, read_blob(dir, &attn_blob(l), &table)?);
        }
        Some(AttentionData::TokenLevel(layers))
    } else {
        None
    };

    let bundle = TraceBundle {
        meta,
        tokens,
        activations,
        attention,
        compact,
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Converts a full-mode bundle to compact mode.
///
/// Per-token JSDs are computed for every reasoning layer and token-level
/// attention is reduced to step pairs over all attention layers. A bundle that
/// is already compact is returned unchanged with a warning.
pub fn compact(bundle: &TraceBundle, boundaries: &StepBoundaries) -> crate::Result<TraceBundle> {
    if bundle.is_compact() {
        log::warn!("bundle {} is already compact; returning it unchanged", bundle.meta.trace_id);
        return Ok(bundle.clone());
    }
    boundaries.validate(bundle.meta.num_tokens)?;
    let per_layer = crate::reasoning_score::token_jsds(bundle, &bundle.meta.reasoning_layers)?;
    let mut jsd = BTreeMap::new();
    for (l, values) in per_layer {
        let v: Vec<f32> = values.iter().map(|&x| x as f32).collect();
        jsd.insert(l, Tensor::vector(DType::Fp32, v)?);
    }
    let attention = match &bundle.attention {
        None => None,
        Some(att) => {
            let m = crate::pattern_metrics::step_attention(att, boundaries, &bundle.meta.attention_layers)?;
            let s = m.size();
            let data = m.values().iter().map(|&x| x as f32).collect();
            Some(AttentionData::StepLevel(Tensor::matrix(s, s, DType::Fp32, data)?))
        }
    };
    let mut meta = bundle.meta.clone();
    meta.mode = Mode::Compact;
    meta.step_boundaries = Some(boundaries.clone());
    let out = TraceBundle {
        meta,
        tokens: bundle.tokens.clone(),
        activations: None,
        attention,
        compact: Some(CompactScores { jsd }),
    };
    out.validate()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{gen_full_bundle, FullDims};

    fn small() -> TraceBundle {
        gen_full_bundle(&FullDims::new(6, 8, 13, 2), 11, false).unwrap()
    }

    #[test]
    fn fp16_quantization_on_construction() {
        let t = Tensor::vector(DType::Fp16, vec![0.1, 1.0 / 3.0]).unwrap();
        assert_eq!(t.data()[0], f16::from_f32(0.1).to_f32());
        let bytes = t.encode();
        let back = Tensor::decode(vec![2], DType::Fp16, &bytes);
        assert_eq!(back, t);
    }

    #[test]
    fn round_trip_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let b = small();
        let p1 = dir.path().join("a");
        let p2 = dir.path().join("b");
        write_bundle(&b, &p1).unwrap();
        write_bundle(&b, &p2).unwrap();
        let back = open_bundle(&p1).unwrap();
        assert_eq!(back, b);
        for f in ["manifest.json", "tokens.json", "hidden_5.bin", "unembed.bin", "attn_1.bin"] {
            assert_eq!(fs::read(p1.join(f)).unwrap(), fs::read(p2.join(f)).unwrap(), "{f}");
        }
        // Overwriting an existing bundle works.
        write_bundle(&b, &p1).unwrap();
        assert_eq!(open_bundle(&p1).unwrap(), b);
    }

    fn edit_manifest(dir: &Path, f: impl FnOnce(&mut serde_json::Value)) {
        let p = dir.join(MANIFEST_FILE);
        let mut v: serde_json::Value = serde_json::from_slice(&fs::read(&p).unwrap()).unwrap();
        f(&mut v);
        fs::write(&p, serde_json::to_vec(&v).unwrap()).unwrap();
    }

    #[test]
    fn hidden_dim_mismatch_names_blob() {
        let dir = tempfile::tempdir().unwrap();
        let b = small();
        write_bundle(&b, dir.path()).unwrap();
        edit_manifest(dir.path(), |v| v["hidden_dim"] = 16.into());
        match open_bundle(dir.path()) {
            Err(BundleError::ShapeMismatch { blob, .. }) => assert!(blob.starts_with("hidden_"), "{blob}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn truncated_blob_is_shape_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        write_bundle(&small(), dir.path()).unwrap();
        let p = dir.path().join("hidden_5.bin");
        let bytes = fs::read(&p).unwrap();
        // Drop one column's worth of fp16 values (6 rows x 1 col).
        fs::write(&p, &bytes[..bytes.len() - 12]).unwrap();
        match open_bundle(dir.path()) {
            Err(BundleError::ShapeMismatch { blob, .. }) => assert_eq!(blob, "hidden_5"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn checksum_and_missing_and_mode_errors() {
        let dir = tempfile::tempdir().unwrap();
        write_bundle(&small(), dir.path()).unwrap();
        let p = dir.path().join("unembed.bin");
        let mut bytes = fs::read(&p).unwrap();
        bytes[0] ^= 0xff;
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(
            open_bundle(dir.path()),
            Err(BundleError::ChecksumMismatch { ref blob, .. }) if blob == "unembed"
        ));

        write_bundle(&small(), dir.path()).unwrap();
        fs::remove_file(dir.path().join("ln_beta.bin")).unwrap();
        assert!(matches!(
            open_bundle(dir.path()),
            Err(BundleError::MissingBlob { ref blob }) if blob == "ln_beta"
        ));

        write_bundle(&small(), dir.path()).unwrap();
        edit_manifest(dir.path(), |v| v["mode"] = "sparse".into());
        assert!(matches!(open_bundle(dir.path()), Err(BundleError::UnknownMode(ref m)) if m == "sparse"));
    }

    #[test]
    fn validation_rejects_bad_values() {
        let mut b = small();
        b.tokens[2].logprob = 0.5;
        assert!(b.validate().is_err());

        let mut b = small();
        b.meta.reasoning_layers.push(99);
        assert!(b.validate().is_err());

        let mut b = small();
        if let Some(AttentionData::TokenLevel(layers)) = &mut b.attention {
            let a = layers.get_mut(&1).unwrap();
            let mut data = a.data().to_vec();
            data[1] = 0.25; // (0, 1) is above the diagonal
            *a = Tensor::matrix(6, 6, DType::Fp16, data).unwrap();
        }
        assert!(matches!(b.validate(), Err(BundleError::InvalidValue { .. })));
    }

    #[test]
    fn compact_is_noop_on_compact_input() {
        let b = small();
        let bounds = StepBoundaries::from_lengths(&[3, 3]).unwrap();
        let c = compact(&b, &bounds).unwrap();
        assert!(c.is_compact());
        assert_eq!(compact(&c, &bounds).unwrap(), c);
        let dir = tempfile::tempdir().unwrap();
        write_bundle(&c, dir.path()).unwrap();
        assert_eq!(open_bundle(dir.path()).unwrap(), c);
    }
}

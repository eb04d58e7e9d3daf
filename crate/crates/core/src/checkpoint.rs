//! Run configuration and the `MMUI` checkpoint format.
//!
//! Layout (little-endian): magic `MMUI`, u32 version (1), u32 length and
//! the run config as TOML, u32 tensor count, then per tensor u32 name
//! length, name bytes, u8 rank, u32 dims and f32 data. A trailing u64
//! FNV-1a hash covers every preceding byte.

use std::hash::Hasher;
use std::path::{Path, PathBuf};

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};

use crate::binio::Reader;
use crate::error::{Error, Result};
use crate::model::{DetectorConfig, DetectorModel, ParamStore};
use crate::tensor::Tensor;
use crate::train::{AdamConfig, TrainSettings};

pub const MAGIC: &[u8; 4] = b"MMUI";
pub const VERSION: u32 = 1;

/// Everything needed to reproduce a training run. Missing keys take their
/// defaults; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Seeds batch order; weight initialisation uses `model.seed`.
    pub seed: u64,
    /// Baseline checkpoint a fusion run was initialised from.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init: Option<PathBuf>,
    /// `MMTE` file replacing the hashed description embeddings.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<PathBuf>,
    pub model: DetectorConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainSettings::default();
        Self {
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.adam.lr,
            seed: t.seed,
            init: None,
            embeddings: None,
            model: DetectorConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let location = match e.span() {
                Some(span) => {
                    let line = text[..span.start].matches('\n').count() + 1;
                    format!("line {line}")
                }
                None => "document".to_string(),
            };
            Error::format(path, location, e.message().to_string())
        })?;
        cfg.model.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config is serialisable")
    }

    pub fn train_settings(&self) -> TrainSettings {
        TrainSettings {
            epochs: self.epochs,
            batch_size: self.batch_size,
            adam: AdamConfig {
                lr: self.learning_rate,
                ..AdamConfig::default()
            },
            seed: self.seed,
            ..TrainSettings::default()
        }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

pub fn encode_checkpoint(cfg: &RunConfig, params: &ParamStore<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let toml = cfg.to_toml();
    out.extend_from_slice(&(toml.len() as u32).to_le_bytes());
    out.extend_from_slice(toml.as_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let sum = fnv1a(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub params: ParamStore<f32>,
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    if bytes.len() < 16 {
        return Err(Error::format(path, "offset 0", "file too short for a checkpoint"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
    if body[..4] != MAGIC[..] {
        return Err(Error::format(path, "offset 0", "bad magic, expected MMUI"));
    }
    if fnv1a(body) != stored {
        return Err(Error::format(
            path,
            format!("offset {}", body.len()),
            "checksum mismatch, file is corrupted",
        ));
    }
    let mut r = Reader::new(body, path);
    r.take(4, "magic")?;
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format(path, "offset 4", format!("unsupported version {version}")));
    }
    let n = r.u32("config length")? as usize;
    let at = r.pos;
    let text = std::str::from_utf8(r.take(n, "config")?)
        .map_err(|_| Error::format(path, format!("offset {at}"), "config is not UTF-8"))?;
    let config = RunConfig::from_toml(text, path)?;
    let count = r.u32("tensor count")?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let at = r.pos;
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::format(path, format!("offset {}", at + 4), "name is not UTF-8"))?
            .to_string();
        let rank = r.u8("rank")? as usize;
        let shape = (0..rank).map(|_| r.u32("dimension").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let data = r.f32s(len, "tensor data")?;
        params
            .add(name.clone(), Tensor::new(&shape, data)?)
            .map_err(|_| Error::format(path, format!("offset {at}"), format!("duplicate tensor `{name}`")))?;
    }
    if r.remaining() != 0 {
        return Err(Error::format(path, format!("offset {}", r.pos), "trailing bytes after tensors"));
    }
    Ok(Checkpoint { config, params })
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

/// Writes `model` with `cfg`; the stored model section is the model's own config.
pub fn save_checkpoint(model: &DetectorModel<f32>, cfg: &RunConfig, path: &Path) -> Result<()> {
    let mut cfg = cfg.clone();
    cfg.model = model.config().clone();
    std::fs::write(path, encode_checkpoint(&cfg, model.params())).map_err(|e| Error::io(path, e))
}

/// Rebuilds the exact model stored at `path`.
pub fn load_checkpoint(path: &Path) -> Result<(RunConfig, DetectorModel<f32>)> {
    let ck = read_checkpoint(path)?;
    let mut model = DetectorModel::build(&ck.config.model)?;
    let expected: Vec<&str> = model.params().names().collect();
    let stored: Vec<&str> = ck.params.names().collect();
    if expected != stored {
        let missing: Vec<&str> = expected.iter().copied().filter(|n| ck.params.by_name(n).is_none()).collect();
        return Err(Error::format(
            path,
            "tensors",
            format!(
                "parameter set does not match the stored config ({} stored, {} expected, missing {:?})",
                stored.len(),
                expected.len(),
                missing
            ),
        ));
    }
    for (name, t) in model.params_mut().iter_mut() {
        let src = ck.params.by_name(name).expect("names checked");
        if src.shape() != t.shape() {
            return Err(Error::format(
                path,
                format!("tensor `{name}`"),
                format!("shape {:?}, config implies {:?}", src.shape(), t.shape()),
            ));
        }
        *t = src.clone();
    }
    model.mark_loaded();
    Ok((ck.config, model))
}

/// Which parameters an initialisation took from a checkpoint.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct InitReport {
    pub loaded: Vec<String>,
    /// Left at their fresh initial values (the cross-attention modules).
    pub initialized: Vec<String>,
}

/// Builds a model for `cfg` and copies every same-named, same-shaped
/// parameter from the checkpoint at `path`.
pub fn init_from_checkpoint(path: &Path, cfg: &DetectorConfig) -> Result<(DetectorModel<f32>, InitReport)> {
    let ck = read_checkpoint(path)?;
    let mut model = DetectorModel::build(cfg)?;
    let (loaded, initialized) = model.load_shared_from(&ck.params);
    if loaded.is_empty() {
        return Err(Error::Usage(format!(
            "checkpoint {} shares no parameters with the requested model",
            path.display()
        )));
    }
    Ok((model, InitReport { loaded, initialized }))
}

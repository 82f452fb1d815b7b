//! Single-file checkpoint container.
//!
//! Layout: magic `UVAECKPT`, format version (u32 LE), header length (u64 LE),
//! a JSON header, the tensor payload in little-endian, and a trailing SHA-256
//! of everything before it. The header lists every tensor by name, group,
//! shape and byte range.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use uvae_autograd::{DType, ParamStore, Scalar, Tensor};

use crate::config::RunConfig;
use crate::error::{CoreError, Result};
use crate::model::{Model, ModelConfig};
use crate::optim::Adam;
use crate::preprocess::ChannelNormalization;

pub const MAGIC: &[u8; 8] = b"UVAECKPT";
pub const FORMAT_VERSION: u32 = 1;
const HASH_LEN: usize = 32;
const PREFIX_LEN: usize = 8 + 4 + 8;

/// Where the random streams resume. Every stream is derived from the seed
/// and an index, so the seed and the next iteration fully determine it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub scheme: String,
    pub seed: u64,
    pub next_iteration: u64,
}

impl RngState {
    pub fn new(seed: u64, next_iteration: u64) -> Self {
        Self { scheme: "sha256-chacha8".into(), seed, next_iteration }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    group: String,
    shape: Vec<usize>,
    offset: usize,
    bytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    dtype: String,
    iteration: u64,
    rng: RngState,
    adam_step: u64,
    config: RunConfig,
    normalization: Option<ChannelNormalization>,
    tensors: Vec<TensorEntry>,
}

const GROUPS: [&str; 3] = ["param", "adam_m", "adam_v"];

/// Training state at the end of `iteration` completed steps.
#[derive(Clone, Debug)]
pub struct Checkpoint<T: Scalar> {
    pub iteration: u64,
    pub rng: RngState,
    pub config: RunConfig,
    pub normalization: Option<ChannelNormalization>,
    pub params: ParamStore<T>,
    pub adam: Adam<T>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(
        model: &Model<T>,
        adam: &Adam<T>,
        iteration: u64,
        config: &RunConfig,
        normalization: Option<ChannelNormalization>,
    ) -> Self {
        Self {
            iteration,
            rng: RngState::new(config.seed, iteration),
            config: config.clone(),
            normalization,
            params: model.params().clone(),
            adam: adam.clone(),
        }
    }

    pub fn model(&self) -> Result<Model<T>> {
        Model::from_params(self.config.model.clone(), self.params.clone())
    }

    /// Fails with [`CoreError::Incompatible`] unless the snapshot's
    /// architecture equals `model`.
    pub fn check_architecture(&self, model: &ModelConfig) -> Result<()> {
        if &self.config.model != model {
            return Err(CoreError::Incompatible(format!(
                "checkpoint architecture {:?} differs from configured {:?}",
                self.config.model, model
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.adam.m.len() != self.params.len() || self.adam.v.len() != self.params.len() {
            return Err(CoreError::Checkpoint("optimizer state does not match parameters".into()));
        }
        let mut tensors = Vec::new();
        let mut payload = Vec::new();
        for (g, group) in GROUPS.iter().enumerate() {
            for (id, name, p) in self.params.iter() {
                let t = match g {
                    0 => p,
                    1 => &self.adam.m[id.0],
                    _ => &self.adam.v[id.0],
                };
                let bytes = T::to_le_bytes_vec(t.data());
                tensors.push(TensorEntry {
                    name: name.to_string(),
                    group: group.to_string(),
                    shape: t.shape().to_vec(),
                    offset: payload.len(),
                    bytes: bytes.len(),
                });
                payload.extend_from_slice(&bytes);
            }
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            dtype: T::DTYPE.name().into(),
            iteration: self.iteration,
            rng: self.rng.clone(),
            adam_step: self.adam.step,
            config: self.config.clone(),
            normalization: self.normalization.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&header).map_err(|e| CoreError::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(PREFIX_LEN + json.len() + payload.len() + HASH_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < PREFIX_LEN + HASH_LEN || &bytes[..8] != MAGIC {
            return Err(CoreError::Checkpoint("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(CoreError::Incompatible(format!(
                "format version {version}, this build reads version {FORMAT_VERSION}"
            )));
        }
        let (body, digest) = bytes.split_at(bytes.len() - HASH_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(CoreError::Checkpoint("content hash mismatch".into()));
        }
        let header_len = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
        let json = body
            .get(PREFIX_LEN..PREFIX_LEN.saturating_add(header_len))
            .ok_or_else(|| CoreError::Checkpoint("truncated header".into()))?;
        let header: Header = serde_json::from_slice(json).map_err(|e| CoreError::Checkpoint(e.to_string()))?;
        if DType::parse(&header.dtype) != Some(T::DTYPE) {
            return Err(CoreError::Incompatible(format!(
                "checkpoint holds {} tensors, requested {}",
                header.dtype,
                T::DTYPE.name()
            )));
        }
        let payload = &body[PREFIX_LEN + header_len..];
        let mut params = ParamStore::new();
        let (mut m, mut v) = (Vec::new(), Vec::new());
        for e in &header.tensors {
            let raw = e
                .offset
                .checked_add(e.bytes)
                .and_then(|end| payload.get(e.offset..end))
                .ok_or_else(|| CoreError::Checkpoint(format!("tensor {} out of range", e.name)))?;
            let t = Tensor::from_vec(&e.shape, T::from_le_bytes_slice(raw))
                .map_err(|err| CoreError::Checkpoint(format!("tensor {}: {err}", e.name)))?;
            match e.group.as_str() {
                "param" => {
                    params.insert(e.name.clone(), t)?;
                }
                "adam_m" => m.push(t),
                "adam_v" => v.push(t),
                other => return Err(CoreError::Checkpoint(format!("unknown tensor group {other}"))),
            }
        }
        if m.len() != params.len() || v.len() != params.len() {
            return Err(CoreError::Checkpoint("optimizer state does not match parameters".into()));
        }
        Ok(Self {
            iteration: header.iteration,
            rng: header.rng,
            config: header.config,
            normalization: header.normalization,
            params,
            adam: Adam { step: header.adam_step, m, v },
        })
    }

    /// Writes through a temporary file and a rename, so an interrupted save
    /// never leaves a truncated checkpoint under `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, &bytes).map_err(|e| {
            let _ = std::fs::remove_file(&tmp);
            CoreError::io(&tmp, e)
        })?;
        std::fs::rename(&tmp, path).map_err(|e| CoreError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| CoreError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

//! Checkpoint archives.
//!
//! ```text
//! "SDCK" | u32 version | u64 header length | header JSON
//!        | one TNSR record per entry in header.tensors
//!        | sha256 of everything above
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ae::{AeConfig, AeTrainConfig, Autoencoder};
use crate::model::{Denoiser, SdSegConfig, SdSegModel};
use crate::nn::{AdamW, AdamWConfig, ParamStore};
use crate::tensor::{Rng, Tensor};

pub const CKPT_MAGIC: &[u8; 4] = b"SDCK";
pub const CKPT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;
const LATENT_SCALE: &str = "latent_scale";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: corrupt checkpoint archive: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("{path}: checkpoint format version {found}, expected {expected}")]
    VersionMismatch { path: PathBuf, found: u32, expected: u32 },
    #[error("{path}: architecture hash {found} does not match expected {expected}")]
    ArchMismatch { path: PathBuf, found: String, expected: String },
    #[error("{path}: checkpoint kind is {found}, expected {expected}")]
    WrongKind { path: PathBuf, found: String, expected: String },
}

impl CheckpointError {
    /// Stable numeric code per error kind.
    pub fn code(&self) -> u8 {
        match self {
            Self::Io { .. } => 1,
            Self::Corrupt { .. } => 10,
            Self::VersionMismatch { .. } => 11,
            Self::ArchMismatch { .. } => 12,
            Self::WrongKind { .. } => 13,
        }
    }
}

pub type CkptResult<T> = std::result::Result<T, CheckpointError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub kind: String,
    pub step: u64,
    pub architecture_hash: String,
    pub config: serde_json::Value,
    pub tensors: Vec<String>,
}

/// Header plus named tensors in header order.
#[derive(Clone, Debug, PartialEq)]
pub struct Archive {
    pub header: CheckpointHeader,
    pub tensors: Vec<(String, Tensor)>,
}

impl Archive {
    pub fn new(kind: &str, step: u64, architecture_hash: String, config: serde_json::Value) -> Self {
        let header = CheckpointHeader { format_version: CKPT_VERSION, kind: kind.into(), step, architecture_hash, config, tensors: Vec::new() };
        Self { header, tensors: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        self.header.tensors.push(name.clone());
        self.tensors.push((name, t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&self.header.format_version.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.tensors {
            t.write_tnsr(&mut out).expect("writing to a Vec cannot fail");
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    /// `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> CkptResult<Self> {
        let corrupt = |reason: String| CheckpointError::Corrupt { path: path.to_path_buf(), reason };
        if bytes.len() < 16 + DIGEST_LEN {
            return Err(corrupt(format!("file is {} bytes, too short", bytes.len())));
        }
        if &bytes[..4] != CKPT_MAGIC {
            return Err(corrupt("bad magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CKPT_VERSION {
            return Err(CheckpointError::VersionMismatch { path: path.to_path_buf(), found: version, expected: CKPT_VERSION });
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch (truncated or modified)".into()));
        }
        let header_len = u64::from_le_bytes(body[8..16].try_into().expect("8 bytes")) as usize;
        let header_end = 16usize.checked_add(header_len).filter(|&e| e <= body.len()).ok_or_else(|| corrupt("header length out of range".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(&body[16..header_end]).map_err(|e| corrupt(format!("header: {e}")))?;
        let mut rest = &body[header_end..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for name in &header.tensors {
            let t = Tensor::read_tnsr(&mut rest).map_err(|e| corrupt(format!("tensor {name}: {e}")))?;
            tensors.push((name.clone(), t));
        }
        if !rest.is_empty() {
            return Err(corrupt(format!("{} trailing bytes", rest.len())));
        }
        Ok(Self { header, tensors })
    }

    /// Writes through a temporary file and renames it into place.
    pub fn save(&self, path: &Path) -> CkptResult<()> {
        let io = |source| CheckpointError::Io { path: path.to_path_buf(), source };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io)?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(io)?;
        fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> CkptResult<Self> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })?;
        Self::from_bytes(&bytes, path)
    }

    fn take(&self, name: &str, path: &Path) -> CkptResult<Tensor> {
        self.get(name).cloned().ok_or_else(|| CheckpointError::Corrupt { path: path.to_path_buf(), reason: format!("missing tensor {name}") })
    }

    fn config<T: serde::de::DeserializeOwned>(&self, key: &str, path: &Path) -> CkptResult<T> {
        let v = self.header.config.get(key).cloned().ok_or_else(|| CheckpointError::Corrupt { path: path.to_path_buf(), reason: format!("header has no {key} config") })?;
        serde_json::from_value(v).map_err(|e| CheckpointError::Corrupt { path: path.to_path_buf(), reason: format!("{key} config: {e}") })
    }

    fn expect_kind(&self, kind: &str, path: &Path) -> CkptResult<()> {
        if self.header.kind != kind {
            return Err(CheckpointError::WrongKind { path: path.to_path_buf(), found: self.header.kind.clone(), expected: kind.into() });
        }
        Ok(())
    }

    fn push_store(&mut self, prefix: &str, store: &ParamStore) {
        for (name, t) in store.iter() {
            self.push(format!("{prefix}/{name}"), t.clone());
        }
    }

    fn push_optimizer(&mut self, prefix: &str, store: &ParamStore, opt: &AdamW) {
        let (m, v) = opt.moments();
        for ((name, _), (m, v)) in store.iter().zip(m.iter().zip(v)) {
            self.push(format!("{prefix}.m/{name}"), m.clone());
            self.push(format!("{prefix}.v/{name}"), v.clone());
        }
    }

    fn fill_store(&self, prefix: &str, store: &mut ParamStore, path: &Path) -> CkptResult<()> {
        let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
        for name in names {
            let t = self.take(&format!("{prefix}/{name}"), path)?;
            store.set(&name, t).map_err(|e| CheckpointError::Corrupt { path: path.to_path_buf(), reason: e.to_string() })?;
        }
        Ok(())
    }

    fn read_optimizer(&self, prefix: &str, store: &ParamStore, state: &OptimizerState, path: &Path) -> CkptResult<AdamW> {
        let mut m = Vec::with_capacity(store.len());
        let mut v = Vec::with_capacity(store.len());
        for (name, _) in store.iter() {
            m.push(self.take(&format!("{prefix}.m/{name}"), path)?);
            v.push(self.take(&format!("{prefix}.v/{name}"), path)?);
        }
        AdamW::restore(store, state.config, state.step, m, v).map_err(|e| CheckpointError::Corrupt { path: path.to_path_buf(), reason: e.to_string() })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
struct OptimizerState {
    config: AdamWConfig,
    step: u64,
}

fn combined_hash(parts: &[String]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update([0u8]);
    }
    hex::encode(h.finalize())
}

fn check_arch(path: &Path, found: &str, expected: String) -> CkptResult<()> {
    if found != expected {
        return Err(CheckpointError::ArchMismatch { path: path.to_path_buf(), found: found.into(), expected });
    }
    Ok(())
}

pub const AE_KIND: &str = "autoencoder";
pub const SDSEG_KIND: &str = "sdseg";

/// Trained autoencoder with its optimizer state.
#[derive(Clone, Debug)]
pub struct AeCheckpoint {
    pub model: Autoencoder,
    pub train: AeTrainConfig,
    pub optimizer: AdamW,
    pub step: u64,
}

pub fn ae_architecture_hash(config: &AeConfig) -> String {
    Autoencoder::<f32>::new(config.clone(), 0).params.architecture_hash()
}

pub fn save_autoencoder(path: &Path, ckpt: &AeCheckpoint) -> CkptResult<()> {
    let opt = OptimizerState { config: ckpt.optimizer.config, step: ckpt.optimizer.step_count() };
    let config = serde_json::json!({ "ae": ckpt.model.config, "train": ckpt.train, "optimizer": opt });
    let mut a = Archive::new(AE_KIND, ckpt.step, ckpt.model.params.architecture_hash(), config);
    a.push_store("ae", &ckpt.model.params);
    a.push(LATENT_SCALE, Tensor::new(&[1], vec![ckpt.model.latent_scale as f32]).expect("shape"));
    a.push_optimizer("ae.adam", &ckpt.model.params, &ckpt.optimizer);
    a.save(path)
}

/// `expected`, when given, must describe the same architecture as the file.
pub fn load_autoencoder(path: &Path, expected: Option<&AeConfig>) -> CkptResult<AeCheckpoint> {
    let a = Archive::load(path)?;
    a.expect_kind(AE_KIND, path)?;
    if let Some(cfg) = expected {
        check_arch(path, &a.header.architecture_hash, ae_architecture_hash(cfg))?;
    }
    let cfg: AeConfig = a.config("ae", path)?;
    let mut model = Autoencoder::new(cfg, 0);
    check_arch(path, &a.header.architecture_hash, model.params.architecture_hash())?;
    a.fill_store("ae", &mut model.params, path)?;
    model.latent_scale = a.take(LATENT_SCALE, path)?.data()[0] as f64;
    let opt: OptimizerState = a.config("optimizer", path)?;
    let optimizer = a.read_optimizer("ae.adam", &model.params, &opt, path)?;
    Ok(AeCheckpoint { model, train: a.config("train", path)?, optimizer, step: a.header.step })
}

/// Everything inference needs: the autoencoder, denoiser and vision encoder,
/// plus optimizer state for resuming.
#[derive(Clone, Debug)]
pub struct SdSegCheckpoint {
    pub ae: Autoencoder,
    pub model: SdSegModel,
    pub config: SdSegConfig,
    pub denoiser_opt: AdamW,
    pub tau_opt: Option<AdamW>,
    pub step: u64,
}

fn sdseg_hash(ae: &ParamStore, den: &ParamStore, tau: &ParamStore) -> String {
    combined_hash(&[ae.architecture_hash(), den.architecture_hash(), tau.architecture_hash()])
}

pub fn sdseg_architecture_hash(ae: &AeConfig, config: &SdSegConfig) -> String {
    let ae_store = Autoencoder::<f32>::new(ae.clone(), 0).params;
    let mut den = ParamStore::new();
    Denoiser::new(&mut den, &config.denoiser, &mut Rng::new(0));
    let (_, tau) = SdSegModel::empty_tau(ae);
    sdseg_hash(&ae_store, &den, &tau)
}

pub fn save_sdseg(path: &Path, ckpt: &SdSegCheckpoint) -> CkptResult<()> {
    let den_opt = OptimizerState { config: ckpt.denoiser_opt.config, step: ckpt.denoiser_opt.step_count() };
    let tau_opt = ckpt.tau_opt.as_ref().map(|o| OptimizerState { config: o.config, step: o.step_count() });
    let config = serde_json::json!({
        "ae": ckpt.ae.config,
        "sdseg": ckpt.config,
        "denoiser_optimizer": den_opt,
        "tau_optimizer": tau_opt,
    });
    let hash = sdseg_hash(&ckpt.ae.params, &ckpt.model.denoiser_params, &ckpt.model.tau_params);
    let mut a = Archive::new(SDSEG_KIND, ckpt.step, hash, config);
    a.push_store("ae", &ckpt.ae.params);
    a.push(LATENT_SCALE, Tensor::new(&[1], vec![ckpt.ae.latent_scale as f32]).expect("shape"));
    a.push_store("denoiser", &ckpt.model.denoiser_params);
    a.push_store("tau", &ckpt.model.tau_params);
    a.push_optimizer("denoiser.adam", &ckpt.model.denoiser_params, &ckpt.denoiser_opt);
    if let Some(o) = &ckpt.tau_opt {
        a.push_optimizer("tau.adam", &ckpt.model.tau_params, o);
    }
    a.save(path)
}

pub fn load_sdseg(path: &Path, expected: Option<(&AeConfig, &SdSegConfig)>) -> CkptResult<SdSegCheckpoint> {
    let a = Archive::load(path)?;
    a.expect_kind(SDSEG_KIND, path)?;
    if let Some((ae, cfg)) = expected {
        check_arch(path, &a.header.architecture_hash, sdseg_architecture_hash(ae, cfg))?;
    }
    let ae_cfg: AeConfig = a.config("ae", path)?;
    let config: SdSegConfig = a.config("sdseg", path)?;
    let mut ae = Autoencoder::new(ae_cfg.clone(), 0);
    let mut den_params = ParamStore::new();
    let denoiser = Denoiser::new(&mut den_params, &config.denoiser, &mut Rng::new(0));
    let (tau, mut tau_params) = SdSegModel::empty_tau(&ae_cfg);
    check_arch(path, &a.header.architecture_hash, sdseg_hash(&ae.params, &den_params, &tau_params))?;
    a.fill_store("ae", &mut ae.params, path)?;
    ae.latent_scale = a.take(LATENT_SCALE, path)?.data()[0] as f64;
    a.fill_store("denoiser", &mut den_params, path)?;
    a.fill_store("tau", &mut tau_params, path)?;
    let den_state: OptimizerState = a.config("denoiser_optimizer", path)?;
    let denoiser_opt = a.read_optimizer("denoiser.adam", &den_params, &den_state, path)?;
    let tau_state: Option<OptimizerState> = a.config("tau_optimizer", path)?;
    let tau_opt = tau_state.map(|s| a.read_optimizer("tau.adam", &tau_params, &s, path)).transpose()?;
    let model = SdSegModel { denoiser, denoiser_params: den_params, tau, tau_params };
    Ok(SdSegCheckpoint { ae, model, config, denoiser_opt, tau_opt, step: a.header.step })
}

#[cfg(test)]
mod tests;

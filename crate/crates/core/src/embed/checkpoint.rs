use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EncoderDims, EncoderPair};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const CHECKPOINT_FORMAT: &str = "mycoclip-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Encoder parameters plus the metadata needed to refuse mismatched reuse.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "F: Scalar")]
pub struct Checkpoint<F> {
    pub format: String,
    pub version: u32,
    pub scalar: String,
    pub dims: EncoderDims,
    /// SHA-256 of the dataset manifest the encoders were trained on.
    pub manifest_sha256: Option<String>,
    /// Last completed epoch.
    pub epoch: usize,
    pub pair: EncoderPair<F>,
}

impl<F: Scalar> Checkpoint<F> {
    pub fn new(pair: EncoderPair<F>, manifest_sha256: Option<String>, epoch: usize) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            scalar: F::NAME.into(),
            dims: pair.dims(),
            manifest_sha256,
            epoch,
            pair,
        }
    }

    /// Writes through a temporary sibling and a rename, so readers never see half a file.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let json = serde_json::to_vec(self).map_err(|e| Error::Data(format!("checkpoint encode: {e}")))?;
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, json).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
        let header: Header = serde_json::from_slice(&raw)
            .map_err(|e| Error::Data(format!("{}: not a checkpoint: {e}", path.display())))?;
        if header.format != CHECKPOINT_FORMAT || header.version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!(
                "{}: unsupported checkpoint {} v{}",
                path.display(),
                header.format,
                header.version
            )));
        }
        if header.scalar != F::NAME {
            return Err(Error::Data(format!(
                "{}: checkpoint holds {} parameters, {} requested",
                path.display(),
                header.scalar,
                F::NAME
            )));
        }
        let ckpt: Self = serde_json::from_slice(&raw)
            .map_err(|e| Error::Data(format!("{}: corrupt checkpoint: {e}", path.display())))?;
        if ckpt.pair.dims() != ckpt.dims {
            return Err(Error::Data(format!("{}: tensor shapes disagree with dims", path.display())));
        }
        Ok(ckpt)
    }

    /// Errors when the checkpoint records a different training manifest.
    pub fn ensure_manifest(&self, manifest_sha256: &str) -> Result<()> {
        match &self.manifest_sha256 {
            Some(h) if h != manifest_sha256 => Err(Error::ManifestMismatch {
                expected: h.clone(),
                found: manifest_sha256.to_string(),
            }),
            _ => Ok(()),
        }
    }
}

#[derive(Deserialize)]
struct Header {
    format: String,
    version: u32,
    scalar: String,
}

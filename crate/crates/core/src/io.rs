//! On-disk formats: raw little-endian `f32` payloads with a JSON sidecar
//! header that carries shape, axis names and the provenance chain.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const ARTIFACT_MAGIC: &str = "LDCT-ARTIFACT";
pub const ARTIFACT_VERSION: u32 = 1;
pub const DTYPE_F32_LE: &str = "f32le";

/// One command in the chain that produced an artifact.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProvenanceStep {
    pub command: String,
    pub config_sha256: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtifactHeader {
    pub magic: String,
    pub version: u32,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub axes: Vec<String>,
    pub provenance: Vec<ProvenanceStep>,
    /// Free-form scalar metadata (z positions, pixel size, dose...).
    #[serde(default)]
    pub meta: BTreeMap<String, serde_json::Value>,
}

impl ArtifactHeader {
    pub fn new(shape: Vec<usize>, axes: &[&str], provenance: Vec<ProvenanceStep>) -> Self {
        Self {
            magic: ARTIFACT_MAGIC.into(),
            version: ARTIFACT_VERSION,
            shape,
            dtype: DTYPE_F32_LE.into(),
            axes: axes.iter().map(|a| (*a).to_string()).collect(),
            provenance,
            meta: BTreeMap::new(),
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl Serialize) -> Self {
        self.meta.insert(key.into(), serde_json::to_value(value).expect("serializable metadata"));
        self
    }

    pub fn with_provenance(mut self, chain: &[ProvenanceStep]) -> Self {
        self.provenance = chain.to_vec();
        self
    }

    pub fn meta_as<T: for<'de> Deserialize<'de>>(&self, key: &str) -> Option<T> {
        self.meta.get(key).and_then(|v| serde_json::from_value(v.clone()).ok())
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("header serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let h: Self = serde_json::from_str(text).map_err(|e| Error::Format {
            path: path.into(),
            message: e.to_string(),
        })?;
        let bad = |message: String| Error::Format {
            path: path.into(),
            message,
        };
        if h.magic != ARTIFACT_MAGIC {
            return Err(bad(format!("bad magic {:?}", h.magic)));
        }
        if h.version != ARTIFACT_VERSION {
            return Err(bad(format!("unsupported version {}", h.version)));
        }
        if h.dtype != DTYPE_F32_LE {
            return Err(bad(format!("unsupported dtype {:?}", h.dtype)));
        }
        if h.axes.len() != h.shape.len() {
            return Err(bad(format!("{} axes for a rank-{} array", h.axes.len(), h.shape.len())));
        }
        Ok(h)
    }
}

/// Payload and header paths for an artifact stem (`x` → `x.f32`, `x.json`).
pub fn artifact_paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("f32"), stem.with_extension("json"))
}

pub fn write_f32(path: &Path, data: &[f32]) -> Result<()> {
    let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_f32(path: &Path) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Format {
            path: path.into(),
            message: format!("{} bytes is not a whole number of f32 values", bytes.len()),
        });
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_artifact(stem: &Path, header: &ArtifactHeader, data: &[f32]) -> Result<()> {
    if header.len() != data.len() {
        return Err(Error::shape(&header.shape, &[data.len()]));
    }
    let (bin, json) = artifact_paths(stem);
    write_text(&json, &header.to_json())?;
    write_f32(&bin, data)
}

pub fn read_artifact(stem: &Path) -> Result<(ArtifactHeader, Vec<f32>)> {
    let (bin, json) = artifact_paths(stem);
    let header = ArtifactHeader::from_json(&read_text(&json)?, &json)?;
    let data = read_f32(&bin)?;
    if data.len() != header.len() {
        return Err(Error::Format {
            path: bin,
            message: format!("payload holds {} values, header shape {:?} needs {}", data.len(), header.shape, header.len()),
        });
    }
    Ok((header, data))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

//! Named-parameter checkpoint archives.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "DGREIDCK" | format version u32 | metadata length u32 | metadata JSON
//! | entry count u32 | entries... | SHA-256 of all preceding bytes
//! entry := name length u32 | name UTF-8 | ndim u32 | dims u64 × ndim | f64 × prod(dims)
//! ```
//!
//! Entries are written in name order, so identical contents always produce
//! identical bytes.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{BackboneConfig, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::Module;

pub const MAGIC: &[u8; 8] = b"DGREIDCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Episodic,
    Baseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: Stage,
    pub backbone: BackboneConfig,
    pub d_feat: usize,
    /// Present for global-model checkpoints.
    pub d_emb: Option<usize>,
    pub encoder_hidden: Option<usize>,
    pub total_identities: Option<usize>,
    /// Source domain of a stage-1 extractor.
    pub domain: Option<usize>,
    pub epoch: usize,
    pub seed: u64,
    /// Free-form extras (training cursor, rng state, ...).
    #[serde(default)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl CheckpointMeta {
    pub fn model_config(&self) -> Option<ModelConfig> {
        Some(ModelConfig {
            backbone: self.backbone.clone(),
            d_emb: self.d_emb?,
            encoder_hidden: self.encoder_hidden?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Archive {
    pub meta: CheckpointMeta,
    pub entries: BTreeMap<String, Entry>,
}

fn push_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u32).to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.pos + n > self.bytes.len() {
            return Err("truncated archive".into());
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<usize, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> std::result::Result<usize, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()) as usize)
    }
}

impl Archive {
    pub fn new(meta: CheckpointMeta) -> Self {
        Archive {
            meta,
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: &[usize], data: &[f64]) {
        self.entries.insert(
            name.into(),
            Entry {
                shape: shape.to_vec(),
                data: data.to_vec(),
            },
        );
    }

    /// Store every parameter and buffer of `module` under `prefix`.
    pub fn export(&mut self, prefix: &str, module: &dyn Module) {
        module.visit_params(prefix, &mut |name, p| self.insert(name, p.shape(), &p.value));
        module.visit_buffers(prefix, &mut |name, b| self.insert(name, &[b.len()], b));
    }

    /// Load every parameter and buffer of `module` from entries under
    /// `prefix`; every name must be present with a matching size.
    pub fn import(&self, prefix: &str, module: &mut dyn Module) -> std::result::Result<(), String> {
        let mut err = None;
        module.visit_params_mut(prefix, &mut |name, p| match self.entries.get(name) {
            Some(e) if e.shape == p.shape() => p.value.copy_from_slice(&e.data),
            Some(e) => {
                err.get_or_insert(format!("{name}: shape {:?} != {:?}", e.shape, p.shape()));
            }
            None => {
                err.get_or_insert(format!("missing parameter {name}"));
            }
        });
        module.visit_buffers_mut(prefix, &mut |name, b| match self.entries.get(name) {
            Some(e) if e.data.len() == b.len() => b.copy_from_slice(&e.data),
            _ => {
                err.get_or_insert(format!("missing or mismatched buffer {name}"));
            }
        });
        err.map_or(Ok(()), Err)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.meta).expect("metadata serializes");
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        push_u32(&mut buf, meta.len());
        buf.extend_from_slice(&meta);
        push_u32(&mut buf, self.entries.len());
        for (name, e) in &self.entries {
            push_u32(&mut buf, name.len());
            buf.extend_from_slice(name.as_bytes());
            push_u32(&mut buf, e.shape.len());
            for &d in &e.shape {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &e.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&buf);
        buf.extend_from_slice(&digest);
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..8] != MAGIC {
            return Err("not a checkpoint archive (bad magic)".into());
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err("checksum mismatch (corrupted archive)".into());
        }
        let mut r = Reader { bytes: body, pos: 8 };
        let version = r.u32()? as u32;
        if version != FORMAT_VERSION {
            return Err(format!("unsupported format version {version}"));
        }
        let meta_len = r.u32()?;
        let meta: CheckpointMeta =
            serde_json::from_slice(r.take(meta_len)?).map_err(|e| format!("bad metadata: {e}"))?;
        let count = r.u32()?;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u32()?;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| "entry name is not UTF-8".to_string())?
                .to_string();
            let ndim = r.u32()?;
            let shape = (0..ndim).map(|_| r.u64()).collect::<std::result::Result<Vec<_>, _>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            entries.insert(name, Entry { shape, data });
        }
        if r.pos != body.len() {
            return Err("trailing bytes after entries".into());
        }
        Ok(Archive { meta, entries })
    }

    /// Write via a temporary file and rename, so a failed write never leaves
    /// a truncated checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("ckpt.tmp");
        let bytes = self.to_bytes();
        let write = || -> std::io::Result<()> {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()
        };
        if let Err(e) = write() {
            let _ = fs::remove_file(&tmp);
            return Err(Error::io(&tmp, e));
        }
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Archive::from_bytes(&bytes).map_err(|m| Error::checkpoint(path, m))
    }
}

/// SHA-256 of a file's bytes, hex encoded.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta() -> CheckpointMeta {
        CheckpointMeta {
            stage: Stage::Pretrain,
            backbone: BackboneConfig::tiny_default(),
            d_feat: 64,
            d_emb: None,
            encoder_hidden: None,
            total_identities: None,
            domain: Some(2),
            epoch: 10,
            seed: 0,
            extra: BTreeMap::new(),
        }
    }

    #[test]
    fn bytes_round_trip_and_corruption_detected() {
        let mut a = Archive::new(meta());
        a.insert("b.weight", &[2, 2], &[1.0, -2.0, 3.5, f64::MIN_POSITIVE]);
        a.insert("a.bias", &[1], &[0.25]);
        let bytes = a.to_bytes();
        assert_eq!(Archive::from_bytes(&bytes).unwrap(), a);
        let mut bad = bytes.clone();
        bad[40] ^= 1;
        assert!(Archive::from_bytes(&bad).unwrap_err().contains("checksum"));
        assert!(Archive::from_bytes(&bytes[..bytes.len() - 5]).is_err());
        assert!(Archive::from_bytes(b"garbage garbage garbage garbage garbage garbage").is_err());
    }
}

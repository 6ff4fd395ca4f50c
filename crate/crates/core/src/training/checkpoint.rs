//! Checkpoint file: `GECCKPT\n`, a little-endian u64 manifest length, a JSON
//! manifest, then every tensor as little-endian f32 in manifest order.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams, Tensor};

const MAGIC: &[u8; 8] = b"GECCKPT\n";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub vocab_fingerprint: String,
    pub params: ModelParams<f32>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload.
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    step: u64,
    config_fingerprint: String,
    vocab_fingerprint: String,
    model_config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn config_fingerprint(&self) -> String {
        self.params.config.fingerprint()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let tensors = self
            .params
            .tensors
            .iter()
            .map(|t| {
                let e = TensorEntry {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    offset,
                };
                offset += 4 * t.len() as u64;
                e
            })
            .collect();
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            step: self.step,
            config_fingerprint: self.config_fingerprint(),
            vocab_fingerprint: self.vocab_fingerprint.clone(),
            model_config: self.params.config.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(16 + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in &self.params.tensors {
            for x in &t.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let json = bytes.get(16..16 + mlen).ok_or_else(|| bad("truncated manifest"))?;
        let manifest: Manifest = serde_json::from_slice(json).map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {}", manifest.format_version)));
        }
        if manifest.model_config.fingerprint() != manifest.config_fingerprint {
            return Err(bad("configuration fingerprint does not match the stored configuration"));
        }
        let payload = &bytes[16 + mlen..];
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in manifest.tensors {
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let raw = payload
                .get(start..start + 4 * n)
                .ok_or_else(|| Error::Checkpoint(format!("tensor {} runs past the payload", e.name)))?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push(Tensor {
                name: e.name,
                shape: e.shape,
                data,
            });
        }
        let params = ModelParams {
            config: manifest.model_config,
            tensors,
        };
        params.check_layout()?;
        Ok(Checkpoint {
            step: manifest.step,
            vocab_fingerprint: manifest.vocab_fingerprint,
            params,
        })
    }

    /// Writes to a temporary sibling, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            let mut w = BufWriter::new(f);
            w.write_all(&self.to_bytes()?).map_err(|e| Error::io(&tmp, e))?;
            w.into_inner()
                .map_err(|e| Error::io(&tmp, e.into_error()))?
                .sync_all()
                .map_err(|e| Error::io(&tmp, e))?;
        }
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }

    fn content_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for t in &self.params.tensors {
            for x in &t.data {
                h.update(x.to_le_bytes());
            }
        }
        h.finalize().into()
    }
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("ckpt-{step:08}.bin"))
}

/// `(step, path)` of every `ckpt-*.bin` in `dir`, by ascending step.
pub fn list_checkpoints(dir: &Path) -> Result<Vec<(u64, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if let Some(step) = name
            .strip_prefix("ckpt-")
            .and_then(|s| s.strip_suffix(".bin"))
            .and_then(|s| s.parse().ok())
        {
            out.push((step, path));
        }
    }
    out.sort();
    Ok(out)
}

/// Elementwise mean of all parameter tensors. The result does not depend on
/// the order of `checkpoints`.
pub fn average_checkpoints(checkpoints: &[Checkpoint]) -> Result<ModelParams<f32>> {
    let first = checkpoints.first().ok_or_else(|| Error::Checkpoint("nothing to average".into()))?;
    let fp = first.config_fingerprint();
    for c in checkpoints {
        if c.config_fingerprint() != fp {
            return Err(Error::Checkpoint(format!("step {} has a different model configuration", c.step)));
        }
        c.params.check_layout()?;
    }
    // canonical summation order
    let mut order: Vec<(u64, [u8; 32], usize)> = checkpoints.iter().enumerate().map(|(i, c)| (c.step, c.content_hash(), i)).collect();
    order.sort();
    let n = checkpoints.len() as f64;
    let mut out = first.params.clone();
    for (k, t) in out.tensors.iter_mut().enumerate() {
        let mut acc = vec![0.0f64; t.len()];
        for &(_, _, i) in &order {
            for (a, &x) in acc.iter_mut().zip(&checkpoints[i].params.tensors[k].data) {
                *a += x as f64;
            }
        }
        for (o, a) in t.data.iter_mut().zip(acc) {
            *o = (a / n) as f32;
        }
    }
    Ok(out)
}

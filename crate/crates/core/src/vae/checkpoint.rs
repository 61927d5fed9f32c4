//! Model checkpoints.
//!
//! ```text
//! magic     b"GFVM"
//! version   u32
//! meta_len  u32, followed by meta_len bytes of JSON (config, flags, log)
//! count     u32 tensors, each: rows u32, cols u32, f32 * rows * cols row-major
//! ```
//!
//! Tensor order: standardizer mean, standardizer scale, [PCA mean, PCA
//! components], then encoder and decoder parameters in `tensors()` order.
//! Every stored value is f32-representable (training rounds on exit), so a
//! save/load cycle is exact.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{GaussianMlp, Preprocess, Standardizer, TrainedVae, TrainingLog, VaeConfig, VaeEnsemble, VaeError};
use crate::spectral::Pca;

const MAGIC: [u8; 4] = *b"GFVM";
const VERSION: u32 = 1;
pub const ENSEMBLE_FILE: &str = "ensemble.toml";

#[derive(Serialize, Deserialize)]
struct Meta {
    config: VaeConfig,
    has_pca: bool,
    pca_rank: usize,
    standardize_eps: f64,
    log: TrainingLog,
}

#[derive(Serialize, Deserialize)]
struct EnsembleManifest {
    version: u32,
    members: Vec<String>,
}

fn err(path: &Path, reason: impl ToString) -> VaeError {
    VaeError::Checkpoint {
        path: path.display().to_string(),
        reason: reason.to_string(),
    }
}

fn push_tensor(out: &mut Vec<u8>, rows: usize, cols: usize, col_major: &[f64]) {
    out.extend_from_slice(&(rows as u32).to_le_bytes());
    out.extend_from_slice(&(cols as u32).to_le_bytes());
    for r in 0..rows {
        for c in 0..cols {
            out.extend_from_slice(&(col_major[c * rows + r] as f32).to_le_bytes());
        }
    }
}

pub fn encode_vae(vae: &TrainedVae) -> Vec<u8> {
    let meta = Meta {
        config: vae.config.clone(),
        has_pca: vae.preprocess.pca.is_some(),
        pca_rank: vae.preprocess.pca.as_ref().map(|p| p.rank).unwrap_or(0),
        standardize_eps: vae.preprocess.standardizer.eps,
        log: vae.log.clone(),
    };
    let json = serde_json::to_vec(&meta).expect("checkpoint metadata serializes");
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);

    let mut tensors: Vec<(usize, usize, &[f64])> = Vec::new();
    let st = &vae.preprocess.standardizer;
    tensors.push((1, st.mean.len(), &st.mean));
    tensors.push((1, st.scale.len(), &st.scale));
    if let Some(p) = &vae.preprocess.pca {
        tensors.push((1, p.mean.len(), &p.mean));
        tensors.push((p.dim, p.rank, &p.components));
    }
    for net in [&vae.encoder, &vae.decoder] {
        for ((r, c), t) in net.shapes().into_iter().zip(net.tensors()) {
            tensors.push((r, c, t));
        }
    }
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (r, c, t) in tensors {
        push_tensor(&mut out, r, c, t);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        if self.at + n > self.bytes.len() {
            return Err("truncated checkpoint".into());
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    /// Returns (rows, cols, column-major values).
    fn tensor(&mut self) -> Result<(usize, usize, Vec<f64>), String> {
        let rows = self.u32()?;
        let cols = self.u32()?;
        let raw = self.take(4 * rows * cols)?;
        let row_major: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let mut col_major = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                col_major[c * rows + r] = row_major[r * cols + c];
            }
        }
        Ok((rows, cols, col_major))
    }
}

pub fn decode_vae(bytes: &[u8]) -> Result<TrainedVae, String> {
    let mut rd = Reader { bytes, at: 0 };
    if rd.take(4)? != MAGIC {
        return Err("bad magic".into());
    }
    let version = rd.u32()?;
    if version != VERSION as usize {
        return Err(format!("unsupported checkpoint version {version}"));
    }
    let meta_len = rd.u32()?;
    let meta: Meta = serde_json::from_slice(rd.take(meta_len)?).map_err(|e| e.to_string())?;
    let count = rd.u32()?;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        tensors.push(rd.tensor()?);
    }
    if rd.at != bytes.len() {
        return Err("trailing bytes after tensors".into());
    }
    let mut it = tensors.into_iter();
    let mut next = || it.next().ok_or_else(|| "missing tensor".to_string());
    let mean = next()?.2;
    let scale = next()?.2;
    let pca = if meta.has_pca {
        let pm = next()?;
        let pc = next()?;
        if pc.1 != meta.pca_rank || pc.0 != pm.1 {
            return Err("PCA tensor shape mismatch".into());
        }
        Some(Pca {
            mean: pm.2,
            components: pc.2,
            dim: pc.0,
            rank: pc.1,
        })
    } else {
        None
    };
    let preprocess = Preprocess {
        pca,
        standardizer: Standardizer {
            mean,
            scale,
            eps: meta.standardize_eps,
        },
    };
    let mut vae = TrainedVae::initialize(meta.config, preprocess).map_err(|e| e.to_string())?;
    vae.log = meta.log;
    fill(&mut vae.encoder, &mut next)?;
    fill(&mut vae.decoder, &mut next)?;
    if next().is_ok() {
        return Err("unexpected extra tensors".into());
    }
    Ok(vae)
}

fn fill(
    net: &mut GaussianMlp,
    next: &mut impl FnMut() -> Result<(usize, usize, Vec<f64>), String>,
) -> Result<(), String> {
    let shapes = net.shapes();
    for (shape, slot) in shapes.into_iter().zip(net.tensors_mut()) {
        let (r, c, values) = next()?;
        if (r, c) != shape {
            return Err(format!("tensor shape {r}x{c} does not match architecture {shape:?}"));
        }
        slot.copy_from_slice(&values);
    }
    Ok(())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), VaeError> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| err(path, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| err(path, e))?;
    tmp.write_all(bytes).map_err(|e| err(path, e))?;
    tmp.persist(path).map_err(|e| err(path, e.error))?;
    Ok(())
}

pub fn save_vae(vae: &TrainedVae, path: impl AsRef<Path>) -> Result<(), VaeError> {
    write_atomic(path.as_ref(), &encode_vae(vae))
}

pub fn load_vae(path: impl AsRef<Path>) -> Result<TrainedVae, VaeError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| err(path, e))?;
    decode_vae(&bytes).map_err(|e| err(path, e))
}

/// Writes `member_<a>.gfvm` files plus an `ensemble.toml` index into `dir`.
pub fn save_ensemble(ensemble: &VaeEnsemble, dir: impl AsRef<Path>) -> Result<(), VaeError> {
    let dir = dir.as_ref();
    let mut names = Vec::new();
    for (a, m) in ensemble.members.iter().enumerate() {
        let name = format!("member_{a}.gfvm");
        save_vae(m, dir.join(&name))?;
        names.push(name);
    }
    let manifest = EnsembleManifest {
        version: VERSION,
        members: names,
    };
    let text = toml::to_string_pretty(&manifest).map_err(|e| err(dir, e))?;
    write_atomic(&dir.join(ENSEMBLE_FILE), text.as_bytes())
}

pub fn load_ensemble(dir: impl AsRef<Path>) -> Result<VaeEnsemble, VaeError> {
    let dir = dir.as_ref();
    let index = dir.join(ENSEMBLE_FILE);
    let text = fs::read_to_string(&index).map_err(|e| err(&index, e))?;
    let manifest: EnsembleManifest = toml::from_str(&text).map_err(|e| err(&index, e))?;
    let members = manifest
        .members
        .iter()
        .map(|name| load_vae(dir.join(name)))
        .collect::<Result<Vec<_>, _>>()?;
    VaeEnsemble::new(members)
}

//! Self-describing model container.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! "DMIC1" | json_len | metadata JSON | tensor_count |
//!   { name_len | name | ndim | dims... | f32 data } * tensor_count
//! ```
//!
//! Optimizer moments, when present, are stored as `<param>#m` / `<param>#v`.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::{Module, Slot};

pub const MAGIC: &[u8; 5] = b"DMIC1";

/// One row of the training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: String,
    pub loss_total: f64,
    pub loss_noise: f64,
    pub loss_mmd_global: f64,
    pub loss_mmd_local: f64,
    pub loss_ce: f64,
    pub test_accuracy: Option<f64>,
    pub test_f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: RunConfig,
    pub class_names: Vec<String>,
    /// Joint epochs completed.
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    pub best_accuracy: Option<f64>,
    pub best_epoch: Option<usize>,
    pub adam_steps_main: u64,
    pub adam_steps_dcg: u64,
    pub has_optimizer_state: bool,
}

#[derive(Debug, Clone, PartialEq)]
struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

fn collect_tensors(model: &mut Model, with_moments: bool) -> BTreeMap<String, Tensor> {
    let mut out = BTreeMap::new();
    model.visit("", &mut |name, slot| match slot {
        Slot::Param(p) => {
            if with_moments {
                let (m, v) = p.moments();
                out.insert(format!("{name}#m"), Tensor { shape: p.shape.clone(), data: m.to_vec() });
                out.insert(format!("{name}#v"), Tensor { shape: p.shape.clone(), data: v.to_vec() });
            }
            out.insert(name, Tensor { shape: p.shape.clone(), data: p.value.clone() });
        }
        Slot::Buffer(b) => {
            out.insert(name, Tensor { shape: b.shape.clone(), data: b.value.clone() });
        }
    });
    out
}

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("value {v} does not fit the u32 field")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

/// Serializes `model` with `meta`; moments are written when `meta.has_optimizer_state`.
pub fn encode(model: &mut Model, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let tensors = collect_tensors(model, meta.has_optimizer_state);
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, json.len())?;
    buf.extend_from_slice(&json);
    put_u32(&mut buf, tensors.len())?;
    for (name, t) in &tensors {
        put_u32(&mut buf, name.len())?;
        buf.extend_from_slice(name.as_bytes());
        put_u32(&mut buf, t.shape.len())?;
        for &d in &t.shape {
            put_u32(&mut buf, d)?;
        }
        for v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

/// Parses a container and rebuilds the model it describes.
pub fn decode(bytes: &[u8]) -> Result<(Model, CheckpointMeta)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len()).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Checkpoint("not a model checkpoint (bad magic)".into()));
    }
    let json_len = r.u32()?;
    let meta: CheckpointMeta =
        serde_json::from_slice(r.take(json_len)?).map_err(|e| Error::Checkpoint(format!("bad metadata: {e}")))?;
    let count = r.u32()?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let n = r.u32()?;
        let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let ndim = r.u32()?;
        let shape = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let raw = r.take(len.checked_mul(4).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        tensors.insert(name, Tensor { shape, data });
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let mut model = Model::new(&meta.config, &mut ChaCha8Rng::seed_from_u64(0)).map_err(|e| match e {
        Error::Config(m) => Error::Checkpoint(format!("embedded config is invalid: {m}")),
        other => other,
    })?;
    let mut problem: Option<String> = None;
    let mut used = 0usize;
    model.visit("", &mut |name, slot| {
        let (shape, value) = match slot {
            Slot::Param(p) => {
                if meta.has_optimizer_state {
                    match (tensors.get(&format!("{name}#m")), tensors.get(&format!("{name}#v"))) {
                        (Some(m), Some(v)) if m.data.len() == p.len() && v.data.len() == p.len() => {
                            p.set_moments(m.data.clone(), v.data.clone());
                            used += 2;
                        }
                        _ => {
                            problem.get_or_insert(format!("optimizer state for {name} is missing or malformed"));
                        }
                    }
                }
                (&p.shape, &mut p.value)
            }
            Slot::Buffer(b) => (&b.shape, &mut b.value),
        };
        match tensors.get(&name) {
            Some(t) if &t.shape == shape => {
                value.copy_from_slice(&t.data);
                used += 1;
            }
            Some(t) => {
                problem.get_or_insert(format!("{name}: shape {:?} does not match the model's {:?}", t.shape, shape));
            }
            None => {
                problem.get_or_insert(format!("missing tensor {name}"));
            }
        }
    });
    if let Some(p) = problem {
        return Err(Error::Checkpoint(p));
    }
    if used != tensors.len() {
        return Err(Error::Checkpoint(format!(
            "{} tensors do not belong to a {} model",
            tensors.len() - used,
            meta.config.variant
        )));
    }
    Ok((model, meta))
}

pub fn save(path: &Path, model: &mut Model, meta: &CheckpointMeta) -> Result<()> {
    let bytes = encode(model, meta)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(Model, CheckpointMeta)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

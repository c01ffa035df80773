//! Binary checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic        8 bytes  "DGOODCK\0"
//! version      u32      = 1
//! digest       32 bytes SHA-256 of the metadata JSON
//! meta_len     u64
//! meta         meta_len bytes of UTF-8 JSON (CheckpointMeta)
//! n_tensors    u32
//! per tensor:  name_len u32, name bytes, rank u32, dims u64 × rank,
//!              data f64 × product(dims)
//! adam_step    u64
//! adam_lr      f64
//! n_moments    u32
//! per moment:  len u64, m f64 × len, v f64 × len
//! ```

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::AdamState;
use crate::train::{Model, TrainConfig};

pub const MAGIC: &[u8; 8] = b"DGOODCK\0";
pub const VERSION: u32 = 1;

/// Everything needed to rebuild the model and its evaluation setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub train: TrainConfig,
    pub input_dim: usize,
    /// Snapshots covered by the multi-labels (training window length).
    pub times: usize,
    /// Train/validation/test snapshot counts.
    pub split: [usize; 3],
    pub data_seed: u64,
    pub best_epoch: usize,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: Model,
    pub adam: AdamState,
}

/// Stable parameter names in the order of [`Model::parameters`].
pub fn parameter_names(model: &Model) -> Vec<String> {
    let mut names = Vec::new();
    for (l, layer) in model.encoder.layers.iter().enumerate() {
        for k in 0..layer.channels() {
            names.push(format!("encoder.{l}.w{k}"));
            names.push(format!("encoder.{l}.b{k}"));
        }
    }
    for (net, mlp) in [
        ("recognition", &model.ecvae.recognition),
        ("prior", &model.ecvae.prior),
        ("decoder", &model.ecvae.decoder),
    ] {
        for i in 0..mlp.layers.len() {
            names.push(format!("ecvae.{net}.{i}.weight"));
            names.push(format!("ecvae.{net}.{i}.bias"));
        }
    }
    names
}

fn digest(json: &[u8]) -> [u8; 32] {
    Sha256::digest(json).into()
}

pub fn to_bytes(meta: &CheckpointMeta, model: &Model, adam: &AdamState) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(meta)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&digest(&json));
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    let names = parameter_names(model);
    let params = model.parameters();
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, p) in names.iter().zip(params) {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(p.rank() as u32).to_le_bytes());
        for &d in p.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for x in p.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out.extend_from_slice(&adam.step_count().to_le_bytes());
    out.extend_from_slice(&adam.lr.to_le_bytes());
    out.extend_from_slice(&(adam.first_moments().len() as u32).to_le_bytes());
    for (m, v) in adam.first_moments().iter().zip(adam.second_moments()) {
        out.extend_from_slice(&(m.len() as u64).to_le_bytes());
        m.iter().chain(v).for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
    }
    Ok(out)
}

pub fn save(path: &Path, meta: &CheckpointMeta, model: &Model, adam: &AdamState) -> Result<()> {
    fs::write(path, to_bytes(meta, model, adam)?)?;
    Ok(())
}

struct Reader<'a>(Cursor<&'a [u8]>);

impl Reader<'_> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0; n];
        self.0
            .read_exact(&mut buf)
            .map_err(|_| Error::Checkpoint("truncated checkpoint".into()))?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.bytes(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("length overflow".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    /// Guards allocations against corrupt length fields.
    fn remaining(&self) -> usize {
        self.0.get_ref().len() - self.0.position() as usize
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader(Cursor::new(bytes));
    if r.bytes(8)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let stored = r.bytes(32)?;
    let len = r.u64()? as usize;
    if len > r.remaining() {
        return Err(Error::Checkpoint("truncated checkpoint".into()));
    }
    let json = r.bytes(len)?;
    if stored != digest(&json) {
        return Err(Error::Checkpoint("config digest mismatch".into()));
    }
    let meta: CheckpointMeta = serde_json::from_slice(&json)?;
    let mut model = Model::new(&meta.train, meta.input_dim, meta.times)?;
    let names = parameter_names(&model);
    let count = r.u32()? as usize;
    if count != names.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, found {count}",
            names.len()
        )));
    }
    for (name, p) in names.iter().zip(model.parameters_mut()) {
        let nlen = r.u32()? as usize;
        let got = String::from_utf8(r.bytes(nlen)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        if &got != name {
            return Err(Error::Checkpoint(format!("expected tensor {name}, found {got}")));
        }
        let rank = r.u32()? as usize;
        let shape: Vec<usize> = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<_>>()?;
        if shape != p.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has shape {shape:?}, model expects {:?}",
                p.shape()
            )));
        }
        let data = r.f64s(p.numel())?;
        p.data_mut().copy_from_slice(&data);
    }
    let step = r.u64()?;
    let lr = f64::from_le_bytes(r.bytes(8)?.try_into().expect("8 bytes"));
    let moments = r.u32()? as usize;
    let mut m = Vec::with_capacity(moments.min(1 << 16));
    let mut v = Vec::with_capacity(moments.min(1 << 16));
    for _ in 0..moments {
        let n = r.u64()? as usize;
        if n.saturating_mul(16) > r.remaining() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        m.push(r.f64s(n)?);
        v.push(r.f64s(n)?);
    }
    if r.remaining() != 0 {
        return Err(Error::Checkpoint("trailing bytes after checkpoint".into()));
    }
    let adam = AdamState::from_parts(lr, step, m, v)?;
    Ok(Checkpoint { meta, model, adam })
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    from_bytes(&fs::read(path)?)
}

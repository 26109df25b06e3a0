//! Binary network checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "AKRN"  u32 version  u64 meta_len  meta (JSON, meta_len bytes)
//! u32 count, then per tensor:
//!   u32 name_len  name (UTF-8)  u32 rank  rank × u64 dim  numel × f64
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Network, NetworkConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"AKRN";
pub const VERSION: u32 = 1;

/// JSON metadata block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: NetworkConfig,
    /// Initialisation seed.
    pub seed: u64,
    /// Optimizer steps taken.
    pub step: u64,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn write_checkpoint(w: &mut impl Write, net: &Network, seed: u64, step: u64) -> Result<()> {
    let meta = serde_json::to_vec(&CheckpointMeta {
        config: net.cfg.clone(),
        seed,
        step,
    })?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(meta.len() as u64).to_le_bytes())?;
    w.write_all(&meta)?;
    let store = &net.params;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for id in store.ids() {
        let (name, t) = (store.name(id).as_bytes(), store.get(id));
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_array<const K: usize>(r: &mut impl Read) -> Result<[u8; K]> {
    let mut b = [0u8; K];
    r.read_exact(&mut b).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => bad("file is truncated"),
        _ => e.into(),
    })?;
    Ok(b)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(read_array(r)?))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    Ok(u64::from_le_bytes(read_array(r)?))
}

fn read_bytes(r: &mut impl Read, len: u64) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    r.take(len).read_to_end(&mut buf)?;
    if buf.len() as u64 != len {
        return Err(bad("file is truncated"));
    }
    Ok(buf)
}

/// Rebuild the network from its configuration and overwrite every parameter.
pub fn read_checkpoint(r: &mut impl Read) -> Result<(Network, CheckpointMeta)> {
    if &read_array::<4>(r)? != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(bad(format!("format version {version} is not supported (expected {VERSION})")));
    }
    let meta_len = read_u64(r)?;
    let meta: CheckpointMeta = serde_json::from_slice(&read_bytes(r, meta_len)?)?;
    let mut net = Network::new(meta.config.clone(), meta.seed)?;
    let count = read_u32(r)? as usize;
    if count != net.params.len() {
        return Err(bad(format!(
            "checkpoint holds {count} tensors, the configured network has {}",
            net.params.len()
        )));
    }
    for _ in 0..count {
        let name_len = read_u32(r)?;
        let name = String::from_utf8(read_bytes(r, name_len as u64)?).map_err(|_| bad("tensor name is not UTF-8"))?;
        let id = net.params.find(&name).ok_or_else(|| bad(format!("unknown tensor {name:?}")))?;
        let rank = read_u32(r)? as usize;
        let shape = (0..rank).map(|_| read_u64(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if shape != net.params.get(id).shape() {
            return Err(bad(format!(
                "tensor {name:?} has shape {shape:?}, expected {:?}",
                net.params.get(id).shape()
            )));
        }
        let numel: usize = shape.iter().product();
        let raw = read_bytes(r, numel as u64 * 8)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        net.params.set(id, Tensor::new(shape, data)?)?;
    }
    Ok((net, meta))
}

pub fn save(path: &Path, net: &Network, seed: u64, step: u64) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(&mut f, net, seed, step)?;
    f.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(Network, CheckpointMeta)> {
    read_checkpoint(&mut std::io::BufReader::new(std::fs::File::open(path)?))
}

//! Policy checkpoints.
//!
//! ```text
//! magic     8 bytes   "OPCCKPT\0"
//! version   u32 LE
//! hdr_len   u32 LE
//! header    hdr_len bytes of JSON: {version, net, tensors: [{name, shape}], rng, step}
//! count     u64 LE    number of parameters
//! blob      count × f32 LE, tensors concatenated in manifest order
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{NetConfig, PolicyParams, TensorSpec};
use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"OPCCKPT\0";

/// Serialized state of the trainer's master generator.
pub type RngState = ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: PolicyParams<f32>,
    pub rng: RngState,
    pub step: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    net: NetConfig,
    tensors: Vec<TensorSpec>,
    rng: RngState,
    step: u64,
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::CheckpointFormat(msg.into())
}

pub fn write_checkpoint<W: Write>(mut w: W, ckpt: &Checkpoint) -> std::io::Result<()> {
    let header = Header {
        version: FORMAT_VERSION,
        net: *ckpt.params.config(),
        tensors: ckpt.params.config().manifest(),
        rng: ckpt.rng.clone(),
        step: ckpt.step,
    };
    let json = serde_json::to_vec(&header).map_err(std::io::Error::other)?;
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    w.write_all(&(ckpt.params.data.len() as u64).to_le_bytes())?;
    for v in &ckpt.params.data {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()
}

/// Reads a checkpoint. With `expected` set, the stored network shape must match it.
pub fn read_checkpoint<R: Read>(mut r: R, expected: Option<&NetConfig>) -> Result<Checkpoint> {
    let io = |e: std::io::Error| format_err(format!("truncated checkpoint: {e}"));
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(format_err("not a policy checkpoint"));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word).map_err(io)?;
    let version = u32::from_le_bytes(word);
    if version != FORMAT_VERSION {
        return Err(format_err(format!("unsupported format version {version}")));
    }
    r.read_exact(&mut word).map_err(io)?;
    let mut json = vec![0u8; u32::from_le_bytes(word) as usize];
    r.read_exact(&mut json).map_err(io)?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| format_err(e.to_string()))?;

    if header.tensors != header.net.manifest() {
        return Err(Error::CheckpointShape("tensor manifest disagrees with network config".into()));
    }
    if let Some(want) = expected {
        if *want != header.net {
            return Err(Error::CheckpointShape(format!(
                "checkpoint network {:?} does not match configured {:?}",
                header.net, want
            )));
        }
    }

    let mut count = [0u8; 8];
    r.read_exact(&mut count).map_err(io)?;
    let count = u64::from_le_bytes(count) as usize;
    if count != header.net.param_count() {
        return Err(Error::CheckpointShape(format!(
            "blob holds {count} values, manifest needs {}",
            header.net.param_count()
        )));
    }
    let mut blob = vec![0u8; count * 4];
    r.read_exact(&mut blob).map_err(io)?;
    let data = blob
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok(Checkpoint {
        params: PolicyParams::from_vec(header.net, data)?,
        rng: header.rng,
        step: header.step,
    })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(BufWriter::new(file), ckpt).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path, expected: Option<&NetConfig>) -> Result<Checkpoint> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(BufReader::new(file), expected)
}

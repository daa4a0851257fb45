//! Weight archives: config JSON plus named little-endian f32 tensors.
//!
//! Layout: magic `FTHNETCK`, u32 version, u64 config length, config JSON,
//! u32 tensor count, then per tensor: u32 name length, UTF-8 name, u32 rank,
//! u64 per dimension, f32 data.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

use super::{Fthnet, FthnetConfig};

const MAGIC: &[u8; 8] = b"FTHNETCK";
const VERSION: u32 = 1;

pub fn write_checkpoint<T: Real>(net: &Fthnet<T>, mut out: impl Write) -> Result<()> {
    let config = serde_json::to_vec(net.config())?;
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(config.len() as u64).to_le_bytes())?;
    out.write_all(&config)?;
    out.write_all(&(net.params().len() as u32).to_le_bytes())?;
    for (_, name, t) in net.params().iter() {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(t.ndim() as u32).to_le_bytes())?;
        for &d in t.shape() {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.numel() * 4);
        for v in t.data() {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Sanity bound on any length field, so a corrupt header cannot request
/// an absurd allocation.
const MAX_LEN: u64 = 1 << 31;

fn checked_len(v: u64, what: &str) -> Result<usize> {
    if v > MAX_LEN {
        return Err(Error::Checkpoint(format!("{what} length {v} is implausible")));
    }
    Ok(v as usize)
}

pub fn read_checkpoint<T: Real>(mut input: impl Read) -> Result<Fthnet<T>> {
    let mut magic = [0; 8];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("not an FTHNet checkpoint".into()));
    }
    let version = read_u32(&mut input)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let len = checked_len(read_u64(&mut input)?, "config")?;
    let mut config = vec![0; len];
    input.read_exact(&mut config)?;
    let config: FthnetConfig = serde_json::from_slice(&config)?;

    let count = read_u32(&mut input)? as usize;
    let mut tensors = HashMap::with_capacity(count);
    for _ in 0..count {
        let len = checked_len(read_u32(&mut input)? as u64, "name")?;
        let mut name = vec![0; len];
        input.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = read_u32(&mut input)? as usize;
        let shape = (0..rank)
            .map(|_| read_u64(&mut input).and_then(|d| checked_len(d, "dimension")))
            .collect::<Result<Vec<_>>>()?;
        let n = checked_len(shape.iter().map(|&d| d as u64).product(), "tensor")?;
        let mut raw = vec![0; n * 4];
        input.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| T::from_f64_lossy(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        tensors.insert(name, Tensor::new(shape, data)?);
    }
    let mut net = Fthnet::new(config, 0)?;
    net.params_mut().load_from(|name| tensors.remove(name))?;
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected parameter `{extra}`")));
    }
    Ok(net)
}

pub fn save<T: Real>(net: &Fthnet<T>, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write_checkpoint(net, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load<T: Real>(path: impl AsRef<Path>) -> Result<Fthnet<T>> {
    let file = std::fs::File::open(path)?;
    read_checkpoint(std::io::BufReader::new(file))
}

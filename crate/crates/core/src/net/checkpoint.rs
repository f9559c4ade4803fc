//! Binary checkpoints: the network config as embedded JSON followed by every
//! named parameter and state tensor as little-endian f64, in registration
//! order. Loading rebuilds the network from the embedded config and restores
//! values bit-exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{CoreError, Result};
use crate::net::{Network, NetworkConfig};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"TNETCKP\0";
const VERSION: u32 = 1;

pub fn save(net: &Network, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let cfg = serde_json::to_vec(&net.cfg)?;
    w.write_all(&(cfg.len() as u64).to_le_bytes())?;
    w.write_all(&cfg)?;
    let entries: Vec<&(String, Tensor)> = net.params().iter().chain(net.state()).collect();
    w.write_all(&(entries.len() as u64).to_le_bytes())?;
    for (name, tensor) in entries {
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        let shape = tensor.shape();
        w.write_all(&(shape.len() as u64).to_le_bytes())?;
        for &d in shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in tensor.data().iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)
        .map_err(|_| CoreError::Checkpoint("truncated checkpoint".into()))?;
    Ok(u64::from_le_bytes(buf))
}

fn read_bytes(r: &mut impl Read, n: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)
        .map_err(|_| CoreError::Checkpoint("truncated checkpoint".into()))?;
    Ok(buf)
}

pub fn load(path: &Path) -> Result<Network> {
    let mut r = BufReader::new(File::open(path)?);
    let magic = read_bytes(&mut r, 8)?;
    if magic != MAGIC {
        return Err(CoreError::Checkpoint("not a checkpoint file".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(CoreError::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let cfg_len = read_u64(&mut r)? as usize;
    let cfg_bytes = read_bytes(&mut r, cfg_len)?;
    let cfg: NetworkConfig = serde_json::from_slice(&cfg_bytes)?;
    let net = Network::new(&cfg, 0)?;

    let n_entries = read_u64(&mut r)? as usize;
    let expected: Vec<&(String, Tensor)> = net.params().iter().chain(net.state()).collect();
    if n_entries != expected.len() {
        return Err(CoreError::Checkpoint(format!(
            "checkpoint holds {n_entries} tensors, network wants {}",
            expected.len()
        )));
    }
    for (name, tensor) in expected {
        let name_len = read_u64(&mut r)? as usize;
        let got_name = String::from_utf8(read_bytes(&mut r, name_len)?)
            .map_err(|_| CoreError::Checkpoint("malformed tensor name".into()))?;
        if &got_name != name {
            return Err(CoreError::Checkpoint(format!(
                "tensor order mismatch: expected {name}, found {got_name}"
            )));
        }
        let ndim = read_u64(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(&mut r)? as usize);
        }
        if shape != tensor.shape() {
            return Err(CoreError::Checkpoint(format!(
                "shape mismatch for {name}: checkpoint {shape:?}, network {:?}",
                tensor.shape()
            )));
        }
        let raw = read_bytes(&mut r, tensor.numel() * 8)?;
        let mut data = Vec::with_capacity(tensor.numel());
        for chunk in raw.chunks_exact(8) {
            let v = f64::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(CoreError::Checkpoint(format!("non-finite value in {name}")));
            }
            data.push(v);
        }
        tensor.set_data(&data);
    }
    let mut trailer = [0u8; 1];
    if r.read(&mut trailer)? != 0 {
        return Err(CoreError::Checkpoint("trailing bytes after checkpoint".into()));
    }
    Ok(net)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| CoreError::Checkpoint("truncated checkpoint".into()))?;
    Ok(u32::from_le_bytes(buf))
}

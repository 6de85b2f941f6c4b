//! Binary tensor checkpoints: the magic `SAUG`, a `u32` version and a `u32`
//! tensor count, then per tensor a `u32` name length, the UTF-8 name, a `u32`
//! rank, `u32` dimensions and little-endian `f32` data.

use std::io::{Read, Write};

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SAUG";
pub const VERSION: u32 = 1;

fn bad(msg: impl Into<String>) -> Error {
    Error::parse("checkpoint", msg)
}

pub fn write_checkpoint<W: Write>(mut w: W, tensors: &[(String, Tensor<f32>)]) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(4 * t.len());
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()
}

pub fn encode_checkpoint(tensors: &[(String, Tensor<f32>)]) -> Vec<u8> {
    let mut out = Vec::new();
    write_checkpoint(&mut out, tensors).expect("writing to memory cannot fail");
    out
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| bad(format!("truncated: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| bad(format!("truncated header: {e}")))?;
    if &magic != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r)?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(|e| bad(format!("truncated name: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| bad("tensor name is not UTF-8"))?;
        let rank = read_u32(&mut r)? as usize;
        let shape = (0..rank).map(|_| read_u32(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; 4 * n];
        r.read_exact(&mut raw).map_err(|e| bad(format!("truncated data of {name}: {e}")))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push((name, Tensor::from_vec(&shape, data)?));
    }
    Ok(out)
}

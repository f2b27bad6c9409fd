//! Binary parameter files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"SAQCKPT\0"  u32 version  u64 header_len  header (UTF-8 JSON)
//! u64 count
//! count x { u32 name_len  name  u64 rows  u64 cols  rows*cols x f64 }
//! ```

use std::io::{Read, Write};

use super::{DiffError, Tensor};

const MAGIC: &[u8; 8] = b"SAQCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

pub fn write_checkpoint(w: &mut impl Write, ckpt: &Checkpoint) -> Result<(), DiffError> {
    let header = serde_json::to_vec(&ckpt.header).map_err(|e| DiffError::Checkpoint(e.to_string()))?;
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    w.write_all(&(ckpt.tensors.len() as u64).to_le_bytes())?;
    for (name, t) in &ckpt.tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rows() as u64).to_le_bytes())?;
        w.write_all(&(t.cols() as u64).to_le_bytes())?;
        for x in t.data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32, DiffError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64, DiffError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_len(r: &mut impl Read, what: &str) -> Result<usize, DiffError> {
    let n = read_u64(r)?;
    if n > (1 << 32) {
        return Err(DiffError::Checkpoint(format!("implausible {what} {n}")));
    }
    Ok(n as usize)
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<Checkpoint, DiffError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(DiffError::Checkpoint("bad magic".into()));
    }
    let version = read_u32(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(DiffError::Checkpoint(format!("unsupported version {version}")));
    }
    let hlen = read_len(r, "header length")?;
    let mut hbuf = vec![0u8; hlen];
    r.read_exact(&mut hbuf)?;
    let header = serde_json::from_slice(&hbuf).map_err(|e| DiffError::Checkpoint(e.to_string()))?;
    let count = read_len(r, "tensor count")?;
    let mut tensors = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let nlen = read_u32(r)? as usize;
        let mut nbuf = vec![0u8; nlen];
        r.read_exact(&mut nbuf)?;
        let name = String::from_utf8(nbuf).map_err(|e| DiffError::Checkpoint(e.to_string()))?;
        let rows = read_len(r, "rows")?;
        let cols = read_len(r, "cols")?;
        let mut data = Vec::with_capacity(rows * cols);
        let mut b = [0u8; 8];
        for _ in 0..rows * cols {
            r.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        tensors.push((name, Tensor::from_vec(rows, cols, data)?));
    }
    Ok(Checkpoint { header, tensors })
}

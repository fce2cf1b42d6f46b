//! Binary parameter checkpoints.
//!
//! Layout: magic bytes `HOIF`, format version `u32`, then named tensors
//! until end of file. Each tensor is `name_len: u32`, UTF-8 name,
//! `rank: u32`, `dims: u64[rank]`, and a little-endian f64 payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::nn::ParamStore;
use super::tensor::Tensor;

const MAGIC: &[u8; 4] = b"HOIF";
const VERSION: u32 = 1;

/// Write every parameter of `store` to `path`.
pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for (name, tensor) in store.named() {
        let name_bytes = name.as_bytes();
        w.write_all(&(name_bytes.len() as u32).to_le_bytes())?;
        w.write_all(name_bytes)?;
        w.write_all(&(tensor.shape.len() as u32).to_le_bytes())?;
        for &d in &tensor.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in &tensor.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read all named tensors from a checkpoint file.
pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut r = CountingReader::new(BufReader::new(File::open(path)?));
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::parse(0, "checkpoint shorter than magic"))?;
    if &magic != MAGIC {
        return Err(Error::parse(0, "bad checkpoint magic (want HOIF)"));
    }
    let version = r.read_u32()?;
    if version != VERSION {
        return Err(Error::parse(4, format!("unsupported checkpoint version {version}")));
    }
    let mut out = Vec::new();
    loop {
        let at = r.offset;
        let mut len_buf = [0u8; 4];
        match r.inner.read(&mut len_buf[..1])? {
            0 => break, // clean EOF between records
            _ => {
                r.offset += 1;
                r.read_exact(&mut len_buf[1..])
                    .map_err(|_| Error::parse(at, "truncated name length"))?;
            }
        }
        let name_len = u32::from_le_bytes(len_buf) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)
            .map_err(|_| Error::parse(at, "truncated tensor name"))?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::parse(at, "tensor name is not UTF-8"))?;
        let rank = r.read_u32()? as usize;
        if rank > 8 {
            return Err(Error::parse(at, format!("implausible tensor rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut numel = 1usize;
        for _ in 0..rank {
            let d = r.read_u64()? as usize;
            numel = numel.saturating_mul(d);
            shape.push(d);
        }
        if numel > 100_000_000 {
            return Err(Error::parse(at, format!("implausible tensor size {numel}")));
        }
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(r.read_f64().map_err(|_| Error::parse(at, "truncated tensor payload"))?);
        }
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

/// Load a checkpoint into an existing store; every stored name must match
/// a registered parameter of the same shape.
pub fn load_into(store: &mut ParamStore, path: &Path) -> Result<()> {
    let entries = load(path)?;
    for (name, tensor) in entries {
        store.set_by_name(&name, tensor)?;
    }
    Ok(())
}

struct CountingReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> CountingReader<R> {
    fn new(inner: R) -> Self {
        CountingReader { inner, offset: 0 }
    }

    fn read_exact(&mut self, buf: &mut [u8]) -> std::io::Result<()> {
        self.inner.read_exact(buf)?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn read_u32(&mut self) -> Result<u32> {
        let at = self.offset;
        let mut b = [0u8; 4];
        self.read_exact(&mut b).map_err(|_| Error::parse(at, "truncated u32"))?;
        Ok(u32::from_le_bytes(b))
    }

    fn read_u64(&mut self) -> Result<u64> {
        let at = self.offset;
        let mut b = [0u8; 8];
        self.read_exact(&mut b).map_err(|_| Error::parse(at, "truncated u64"))?;
        Ok(u64::from_le_bytes(b))
    }

    fn read_f64(&mut self) -> Result<f64> {
        let at = self.offset;
        let mut b = [0u8; 8];
        self.read_exact(&mut b).map_err(|_| Error::parse(at, "truncated f64"))?;
        Ok(f64::from_le_bytes(b))
    }
}

//! Tensor container files.
//!
//! Layout: the magic bytes `ORVT`, a `u8` version, a `u8` rank, `rank`
//! extents as little-endian `u64`, then the payload as little-endian `f32`.
//! Values are computed in `f64` and stored in `f32`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const CONTAINER_MAGIC: &[u8; 4] = b"ORVT";
pub const CONTAINER_VERSION: u8 = 1;

pub fn encode(t: &Tensor) -> Result<Vec<u8>> {
    let rank = u8::try_from(t.shape().len())
        .map_err(|_| Error::shape(format!("rank {} too large for container", t.shape().len())))?;
    let mut buf = Vec::with_capacity(6 + 8 * t.shape().len() + 4 * t.len());
    buf.extend_from_slice(CONTAINER_MAGIC);
    buf.push(CONTAINER_VERSION);
    buf.push(rank);
    for &e in t.shape() {
        buf.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(buf)
}

pub fn decode(mut r: impl Read) -> Result<Tensor> {
    let mut head = [0u8; 6];
    r.read_exact(&mut head)?;
    if &head[..4] != CONTAINER_MAGIC {
        return Err(Error::data("bad container magic"));
    }
    if head[4] != CONTAINER_VERSION {
        return Err(Error::data(format!("unsupported container version {}", head[4])));
    }
    let rank = head[5] as usize;
    let mut shape = Vec::with_capacity(rank);
    let mut b8 = [0u8; 8];
    for _ in 0..rank {
        r.read_exact(&mut b8)?;
        shape.push(usize::try_from(u64::from_le_bytes(b8)).map_err(|_| Error::data("extent overflow"))?);
    }
    let n: usize = shape.iter().product();
    let mut payload = vec![0u8; n * 4];
    r.read_exact(&mut payload)?;
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::data(format!("{} trailing bytes after container payload", rest.len())));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Tensor::new(shape, data)
}

pub fn write_container(path: &Path, t: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&encode(t)?)?;
    w.flush()?;
    Ok(())
}

pub fn read_container(path: &Path) -> Result<Tensor> {
    decode(BufReader::new(File::open(path)?))
}

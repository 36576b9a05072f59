//! `RMTC` checkpoint container.
//!
//! Little-endian: magic `RMTC`, format version `u32`, then for each parameter
//! in lexicographic order a `u16` name length, the UTF-8 name, a `u8` rank,
//! one `u32` per extent and the raw `f32` values. The file ends after the
//! last parameter.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{ParamSet, Scalar, Tensor, MAX_RANK};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RMTC";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint<T: Scalar>(params: &ParamSet<T>, mut out: impl Write) -> Result<()> {
    let mut buf = Vec::with_capacity(8 + params.numel() * 4);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for (name, t) in params.iter() {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::Checkpoint(format!("parameter name too long: {name}")))?;
        buf.extend_from_slice(&len.to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(t.rank() as u8);
        for &e in t.shape() {
            let e = u32::try_from(e).map_err(|_| Error::Checkpoint(format!("extent {e} overflows u32")))?;
            buf.extend_from_slice(&e.to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    out.write_all(&buf)
        .map_err(|e| Error::Checkpoint(format!("write failed: {e}")))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn read_checkpoint<T: Scalar>(mut input: impl Read) -> Result<ParamSet<T>> {
    let mut bytes = Vec::new();
    input
        .read_to_end(&mut bytes)
        .map_err(|e| Error::Checkpoint(format!("read failed: {e}")))?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut params = ParamSet::new();
    let mut prev: Option<String> = None;
    while cur.pos < bytes.len() {
        let len = u16::from_le_bytes(cur.take(2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        if prev.as_deref().is_some_and(|p| p >= name.as_str()) {
            return Err(Error::Checkpoint(format!("parameter {name} out of order")));
        }
        let rank = cur.take(1)?[0] as usize;
        if rank > MAX_RANK {
            return Err(Error::Checkpoint(format!("rank {rank} for {name}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = cur.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| T::from_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect();
        params.insert(name.clone(), Tensor::from_vec(&shape, data)?)?;
        prev = Some(name);
    }
    Ok(params)
}

pub fn save_checkpoint<T: Scalar>(params: &ParamSet<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(params, std::io::BufWriter::new(f))
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<ParamSet<T>> {
    let path = path.as_ref();
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(f)
}

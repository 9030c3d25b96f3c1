//! The `MDSR` binary record container shared by dataset pairs and checkpoints.
//!
//! Layout (little-endian): magic `"MDSR"`, `u32` format version, then records
//! until end of file, each `[u8 name_len][name bytes][u32 ndim][u32 dims…][f32 payload]`.

use std::fs;
use std::path::Path;

use moediff_tensor::Tensor;

use crate::error::{MoeError, Result};

pub const MAGIC: &[u8; 4] = b"MDSR";
pub const FORMAT_VERSION: u32 = 1;

/// Rounds every value to the nearest `f32`, the on-disk precision.
pub fn round_f32(t: &Tensor) -> Tensor {
    t.map(|v| v as f32 as f64)
}

pub fn encode(version: u32, records: &[(&str, &Tensor)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&version.to_le_bytes());
    for (name, t) in records {
        let bytes = name.as_bytes();
        let len = u8::try_from(bytes.len())
            .map_err(|_| MoeError::Contract(format!("record name too long: {name}")))?;
        out.push(len);
        out.extend_from_slice(bytes);
        out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(MoeError::Truncated { path: self.path.to_path_buf(), offset: self.bytes.len() as u64 });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(bytes: &[u8], path: &Path, expected_version: u32) -> Result<Vec<(String, Tensor)>> {
    let mut cur = Cursor { bytes, pos: 0, path };
    if cur.take(4)? != MAGIC {
        return Err(MoeError::format(path, "bad magic bytes (expected \"MDSR\")"));
    }
    let version = cur.u32()?;
    if version != expected_version {
        return Err(MoeError::format(
            path,
            format!("format version {version}, expected {expected_version}"),
        ));
    }
    let mut records = Vec::new();
    while cur.pos < bytes.len() {
        let len = cur.take(1)?[0] as usize;
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|_| MoeError::format(path, "record name is not UTF-8"))?
            .to_string();
        let ndim = cur.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(cur.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let payload = cur.take(n * 4)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        records.push((name, Tensor::new(shape, data)?));
    }
    Ok(records)
}

pub fn write(path: &Path, records: &[(&str, &Tensor)]) -> Result<()> {
    let bytes = encode(FORMAT_VERSION, records)?;
    fs::write(path, bytes).map_err(|e| MoeError::io(path, e))
}

pub fn read(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = fs::read(path).map_err(|e| MoeError::io(path, e))?;
    decode(&bytes, path, FORMAT_VERSION)
}

/// Looks a record up by name.
pub fn take(records: &mut Vec<(String, Tensor)>, name: &str, path: &Path) -> Result<Tensor> {
    let i = records
        .iter()
        .position(|(n, _)| n == name)
        .ok_or_else(|| MoeError::format(path, format!("missing record {name}")))?;
    Ok(records.remove(i).1)
}

/// Packs bytes one per value (each exactly representable in `f32`).
pub fn bytes_to_tensor(bytes: &[u8]) -> Tensor {
    Tensor::new([bytes.len()], bytes.iter().map(|&b| b as f64).collect()).expect("1-D")
}

pub fn tensor_to_bytes(t: &Tensor) -> Vec<u8> {
    t.data().iter().map(|&v| v as u8).collect()
}

/// Packs a `u64` into four 16-bit limbs.
pub fn u64_to_tensor(v: u64) -> Tensor {
    Tensor::new([4], (0..4).map(|i| ((v >> (16 * i)) & 0xffff) as f64).collect()).expect("1-D")
}

pub fn tensor_to_u64(t: &Tensor) -> u64 {
    t.data()
        .iter()
        .enumerate()
        .fold(0u64, |acc, (i, &v)| acc | ((v as u64) << (16 * i)))
}

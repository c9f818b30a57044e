//! "P23D" tensor segments.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "P23D" | version | count | count x ( name_len | name | rank | dims[rank] | f32 payload )
//! ```
//!
//! Values are narrowed to `f32` on write; training math stays in `f64`.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::numcore::tensor::Tensor;

pub const SEGMENT_MAGIC: &[u8; 4] = b"P23D";
pub const SEGMENT_VERSION: u32 = 1;

/// Named parameter list with a stable order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.names.push(name.into());
        self.tensors.push(tensor);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Entries whose name starts with `prefix`, with the prefix stripped.
    pub fn with_prefix(&self, prefix: &str) -> ParamSet {
        let mut out = ParamSet::new();
        for (n, t) in self.iter() {
            if let Some(rest) = n.strip_prefix(prefix) {
                out.push(rest, t.clone());
            }
        }
        out
    }

    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamSet) {
        for (n, t) in other.iter() {
            self.push(format!("{prefix}{n}"), t.clone());
        }
    }

    /// Rounds every value through `f32`, matching what a save/load cycle does.
    pub fn quantize_f32(&mut self) {
        for t in &mut self.tensors {
            *t = t.map(|v| v as f32 as f64);
        }
    }
}

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| Error::Format(format!("truncated segment: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

pub fn write_segment(w: &mut impl Write, params: &ParamSet) -> Result<()> {
    w.write_all(SEGMENT_MAGIC)?;
    write_u32(w, SEGMENT_VERSION)?;
    write_u32(w, params.len() as u32)?;
    for (name, t) in params.iter() {
        write_u32(w, name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        write_u32(w, t.rank() as u32)?;
        for &d in t.shape() {
            write_u32(w, d as u32)?;
        }
        let mut buf = Vec::with_capacity(t.numel() * 4);
        for &v in t.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_segment(r: &mut impl Read) -> Result<ParamSet> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| Error::Format(format!("missing segment magic: {e}")))?;
    if &magic != SEGMENT_MAGIC {
        return Err(Error::Format(format!("bad segment magic {magic:?}")));
    }
    let version = read_u32(r)?;
    if version != SEGMENT_VERSION {
        return Err(Error::Format(format!("unsupported segment version {version}")));
    }
    let count = read_u32(r)?;
    let mut out = ParamSet::new();
    for _ in 0..count {
        let len = read_u32(r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|e| Error::Format(format!("truncated name: {e}")))?;
        let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
        let rank = read_u32(r)? as usize;
        let dims = (0..rank)
            .map(|_| read_u32(r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = dims.iter().product();
        let mut payload = vec![0u8; numel * 4];
        r.read_exact(&mut payload)
            .map_err(|e| Error::Format(format!("truncated payload for {name}: {e}")))?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        out.push(name, Tensor::new(&dims, data)?);
    }
    Ok(out)
}

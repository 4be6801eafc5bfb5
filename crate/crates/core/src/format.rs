//! Adapter container format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"PLRA" | u32 version = 1 | u64 header_len | header JSON (UTF-8)
//!         | per slot in header order: A as f32 LE, then B as f32 LE
//! ```

use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::{AdapterState, FactorPair};
use crate::tensor::Tensor2D;

pub const MAGIC: &[u8; 4] = b"PLRA";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported container version {0}")]
    Version(u32),
    #[error("truncated container: needed {needed} bytes at offset {offset}, have {available}")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("header/blob disagreement: {0}")]
    ShapeMismatch(String),
    #[error("malformed header: {0}")]
    Header(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    rank: usize,
    scaling: f32,
    slots: Vec<SlotHeader>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SlotHeader {
    name: String,
    a_shape: [usize; 2],
    b_shape: [usize; 2],
}

pub fn encode(a: &AdapterState) -> Vec<u8> {
    let header = Header {
        rank: a.rank,
        scaling: a.scaling,
        slots: a
            .slots
            .iter()
            .map(|(name, p)| SlotHeader {
                name: name.clone(),
                a_shape: [p.a.rows(), p.a.cols()],
                b_shape: [p.b.rows(), p.b.cols()],
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let blob_len: usize = a.slots.values().map(|p| 4 * (p.a.len() + p.b.len())).sum();
    let mut out = Vec::with_capacity(16 + json.len() + blob_len);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in a.slots.values() {
        for v in p.a.data().iter().chain(p.b.data()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let available = self.buf.len() - self.pos;
        if n > available {
            return Err(FormatError::Truncated {
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

fn read_tensor(cur: &mut Cursor<'_>, shape: [usize; 2]) -> Result<Tensor2D, FormatError> {
    let n = shape[0]
        .checked_mul(shape[1])
        .ok_or_else(|| FormatError::ShapeMismatch(format!("shape {shape:?} overflows")))?;
    let bytes = cur.take(n.checked_mul(4).ok_or_else(|| {
        FormatError::ShapeMismatch(format!("shape {shape:?} overflows"))
    })?)?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor2D::from_vec(shape[0], shape[1], data).map_err(|e| FormatError::ShapeMismatch(e.to_string()))
}

pub fn decode(buf: &[u8]) -> Result<AdapterState, FormatError> {
    let mut cur = Cursor { buf, pos: 0 };
    let magic = cur.take(4)?;
    if magic != MAGIC {
        return Err(FormatError::BadMagic([magic[0], magic[1], magic[2], magic[3]]));
    }
    let version = u32::from_le_bytes(cur.take(4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(FormatError::Version(version));
    }
    let header_len = u64::from_le_bytes(cur.take(8)?.try_into().expect("8 bytes"));
    let header_len = usize::try_from(header_len)
        .map_err(|_| FormatError::Header(format!("header length {header_len} too large")))?;
    let header_bytes = cur.take(header_len)?;
    let header: Header =
        serde_json::from_slice(header_bytes).map_err(|e| FormatError::Header(e.to_string()))?;
    let mut adapter = AdapterState::new(header.rank, header.scaling);
    for slot in &header.slots {
        if slot.a_shape[0] != header.rank || slot.b_shape[1] != header.rank {
            return Err(FormatError::ShapeMismatch(format!(
                "slot {} shapes {:?}/{:?} disagree with rank {}",
                slot.name, slot.a_shape, slot.b_shape, header.rank
            )));
        }
        let a = read_tensor(&mut cur, slot.a_shape)?;
        let b = read_tensor(&mut cur, slot.b_shape)?;
        if adapter.slots.insert(slot.name.clone(), FactorPair { a, b }).is_some() {
            return Err(FormatError::Header(format!("duplicate slot {}", slot.name)));
        }
    }
    if cur.pos != buf.len() {
        return Err(FormatError::ShapeMismatch(format!(
            "{} trailing bytes after declared slots",
            buf.len() - cur.pos
        )));
    }
    // Slots are re-keyed by a sorted map; reject headers written in another order
    // so that encode(decode(x)) == x.
    if !header.slots.iter().map(|s| &s.name).eq(adapter.slots.keys()) {
        return Err(FormatError::Header("slots not in canonical order".into()));
    }
    Ok(adapter)
}

pub fn save_adapter(a: &AdapterState, path: &Path) -> Result<(), FormatError> {
    fs::write(path, encode(a))?;
    Ok(())
}

pub fn load_adapter(path: &Path) -> Result<AdapterState, FormatError> {
    decode(&fs::read(path)?)
}

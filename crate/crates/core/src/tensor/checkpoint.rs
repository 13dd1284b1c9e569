//! Binary parameter file.
//!
//! ```text
//! "STGF" | version u32 | entry count u32 |
//!   { name_len u32 | name utf-8 | rank u32 | dims u32 * rank | values f32 * prod(dims) } * count |
//! crc32 u32 (IEEE, over every preceding byte)
//! ```
//! All integers and floats are little-endian. Entries appear in lexicographic name order.

use std::fs;
use std::path::Path;

use super::{ParamStore, Tensor};
use crate::error::{bail, Result, StegoError};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"STGF";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint(store: &ParamStore<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + store.numel() * 4);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else { bail!(Format, "checkpoint truncated at byte {}", self.pos) };
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ParamStore<f32>> {
    if bytes.len() < 16 {
        bail!(Format, "checkpoint too short ({} bytes)", bytes.len());
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        bail!(Format, "checkpoint CRC mismatch");
    }
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        bail!(Format, "bad checkpoint magic");
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        bail!(Format, "unsupported checkpoint version {version}");
    }
    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| StegoError::Format(format!("entry name is not UTF-8: {e}")))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(4).ok_or_else(|| StegoError::Format("entry too large".into()))?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        store.insert(name, Tensor::new(&shape, data).map_err(|e| StegoError::Format(e.to_string()))?)?;
    }
    if r.pos != body.len() {
        bail!(Format, "{} trailing bytes after last entry", body.len() - r.pos);
    }
    Ok(store)
}

pub fn write_checkpoint(path: impl AsRef<Path>, store: &ParamStore<f32>) -> Result<()> {
    fs::write(path, encode_checkpoint(store))?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<ParamStore<f32>> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_bit_exact() {
        let mut s = ParamStore::new();
        s.insert("ab", Tensor::new(&[2], vec![1.0f32, -2.0]).unwrap()).unwrap();
        let bytes = encode_checkpoint(&s);
        let mut expect = b"STGF".to_vec();
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&2u32.to_le_bytes());
        expect.extend_from_slice(b"ab");
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&2u32.to_le_bytes());
        expect.extend_from_slice(&1.0f32.to_le_bytes());
        expect.extend_from_slice(&(-2.0f32).to_le_bytes());
        let crc = crc32fast::hash(&expect);
        expect.extend_from_slice(&crc.to_le_bytes());
        assert_eq!(bytes, expect);
    }

    #[test]
    fn corruption_is_detected() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::new(&[3], vec![1.0f32, 2.0, 3.0]).unwrap()).unwrap();
        let mut bytes = encode_checkpoint(&s);
        bytes[20] ^= 0x40;
        assert!(matches!(decode_checkpoint(&bytes), Err(StegoError::Format(_))));
        assert!(decode_checkpoint(&bytes[..10]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_identity(entries in prop::collection::btree_map(
            "[a-z.]{1,12}",
            prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 1..20),
            1..6,
        )) {
            let mut s = ParamStore::new();
            for (k, v) in &entries {
                s.insert(k.clone(), Tensor::new(&[v.len()], v.clone()).unwrap()).unwrap();
            }
            let back = decode_checkpoint(&encode_checkpoint(&s)).unwrap();
            prop_assert_eq!(back, s);
        }
    }
}

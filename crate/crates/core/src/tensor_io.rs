//! Binary container for named `f32` tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "PTQTENS\0"
//! version    u16
//! count      u32
//! directory  count x { name_len u16, name utf-8, offset u64 }
//! entries    at each offset: { rank u16, layout u16, shape u32 x rank, payload f32 x prod(shape) }
//! ```
//!
//! Entries are written in name order, so encoding a store is deterministic.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{PtqError, Result};
use crate::tensor::{Layout, Tensor};

pub const MAGIC: &[u8; 8] = b"PTQTENS\0";
pub const VERSION: u16 = 1;

/// Named tensors, ordered by name.
pub type TensorStore = BTreeMap<String, Tensor>;

pub fn encode(store: &TensorStore) -> Result<Vec<u8>> {
    let mut dir_len = 0usize;
    for name in store.keys() {
        if name.is_empty() || name.len() > u16::MAX as usize {
            return Err(PtqError::InvalidArgument(format!("bad tensor name {name:?}")));
        }
        dir_len += 2 + name.len() + 8;
    }
    let count = u32::try_from(store.len())
        .map_err(|_| PtqError::InvalidArgument("too many tensors".into()))?;

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());

    let mut offset = (out.len() + dir_len) as u64;
    for (name, t) in store {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&offset.to_le_bytes());
        offset += entry_len(t) as u64;
    }
    for t in store.values() {
        out.extend_from_slice(&(t.shape().len() as u16).to_le_bytes());
        out.extend_from_slice(&t.layout().code().to_le_bytes());
        for &d in t.shape() {
            let d = u32::try_from(d)
                .map_err(|_| PtqError::InvalidArgument(format!("dimension {d} exceeds u32")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn entry_len(t: &Tensor) -> usize {
    4 + 4 * t.shape().len() + 4 * t.len()
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&end| end <= self.buf.len())
            .ok_or_else(|| PtqError::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(buf: &[u8]) -> Result<TensorStore> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(PtqError::Format("bad magic".into()));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(PtqError::UnsupportedVersion {
            found: version,
            expected: VERSION,
        });
    }
    let count = r.u32()? as usize;
    let mut directory = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| PtqError::Format("tensor name is not utf-8".into()))?
            .to_string();
        let offset = r.u64()?;
        directory.push((name, offset));
    }

    let mut store = TensorStore::new();
    for (name, offset) in directory {
        let offset = usize::try_from(offset)
            .map_err(|_| PtqError::Format(format!("offset of {name} out of range")))?;
        let mut e = Reader { buf, pos: offset };
        let rank = e.u16()? as usize;
        let layout = Layout::from_code(e.u16()?)?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(e.u32()? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| PtqError::Format(format!("shape of {name} overflows")))?;
        let bytes = e.take(n.checked_mul(4).ok_or_else(|| {
            PtqError::Format(format!("payload of {name} overflows"))
        })?)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data, layout)
            .map_err(|err| PtqError::Format(format!("tensor {name}: {err}")))?;
        if store.insert(name.clone(), t).is_some() {
            return Err(PtqError::Format(format!("duplicate tensor {name}")));
        }
    }
    Ok(store)
}

pub fn write_tensors(path: &Path, store: &TensorStore) -> Result<()> {
    fs::write(path, encode(store)?)?;
    Ok(())
}

pub fn read_tensors(path: &Path) -> Result<TensorStore> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> TensorStore {
        let mut s = TensorStore::new();
        s.insert(
            "conv.weight".into(),
            Tensor::new(vec![2, 1, 1, 2], vec![1.5, -0.0, 3.25, f32::MIN_POSITIVE], Layout::Oihw)
                .unwrap(),
        );
        s.insert("b".into(), Tensor::vector(vec![0.1, 0.2, 0.3]).unwrap());
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = sample();
        let back = decode(&encode(&s).unwrap()).unwrap();
        assert_eq!(back.len(), s.len());
        for (name, t) in &s {
            let u = &back[name];
            assert_eq!(u.shape(), t.shape());
            assert_eq!(u.layout(), t.layout());
            let a: Vec<u32> = t.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = u.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn header_fields() {
        let bytes = encode(&sample()).unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(u16::from_le_bytes([bytes[8], bytes[9]]), 1);
        assert_eq!(u32::from_le_bytes(bytes[10..14].try_into().unwrap()), 2);
    }

    #[test]
    fn truncation_is_rejected() {
        let bytes = encode(&sample()).unwrap();
        for cut in [0, 5, 12, 20, bytes.len() - 1] {
            assert!(matches!(decode(&bytes[..cut]), Err(PtqError::Format(_))), "cut {cut}");
        }
    }

    #[test]
    fn future_version_is_rejected() {
        let mut bytes = encode(&sample()).unwrap();
        bytes[8] = 2;
        assert!(matches!(
            decode(&bytes),
            Err(PtqError::UnsupportedVersion { found: 2, expected: 1 })
        ));
    }

    #[test]
    fn bad_magic() {
        let mut bytes = encode(&sample()).unwrap();
        bytes[0] = b'X';
        assert!(decode(&bytes).is_err());
    }
}

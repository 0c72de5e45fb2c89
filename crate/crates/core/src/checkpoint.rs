//! Binary tensor checkpoints.
//!
//! Layout: magic `SEQC1`, `u32` tensor count, then per tensor a `u32` name
//! length, UTF-8 name, `u32` rank, `rank` `u32` dims, and the values as
//! little-endian `f32`. All integers are little-endian.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::numcore::Tensor;

pub const MAGIC: &[u8; 5] = b"SEQC1";

pub fn encode<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a Tensor<f32>)>) -> Vec<u8> {
    let tensors: Vec<_> = tensors.into_iter().collect();
    let mut out = MAGIC.to_vec();
    out.extend((tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend((name.len() as u32).to_le_bytes());
        out.extend(name.as_bytes());
        out.extend((t.shape().len() as u32).to_le_bytes());
        for d in t.shape() {
            out.extend((*d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend(v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::CorruptCheckpoint {
                offset: self.pos,
                reason: format!("truncated while reading {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn corrupt(&self, offset: usize, reason: String) -> Error {
        Error::CorruptCheckpoint { offset, reason }
    }
}

/// Decode a checkpoint, rejecting anything malformed with the byte offset
/// where decoding failed.
pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(r.corrupt(0, "bad magic".into()));
    }
    let count = r.u32("tensor count")?;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let at = r.pos;
        let len = r.u32("name length")?;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|e| r.corrupt(at + 4, format!("name is not UTF-8: {e}")))?
            .to_string();
        let rank = r.u32("rank")?;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u32("dim")?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, d| acc.checked_mul(*d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| r.corrupt(at, format!("tensor {name} shape {shape:?} overflows")))?;
        let data = r
            .take(numel, "tensor data")?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(r.corrupt(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(out)
}

/// Write atomically through a temporary sibling file.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save_params(store: &ParamStore<f32>, path: &Path) -> Result<()> {
    write_file(path, &encode(store.iter()))
}

pub fn load_params(path: &Path) -> Result<ParamStore<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut store = ParamStore::new();
    for (name, t) in decode(&bytes)? {
        store.insert(name, t)?;
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelConfig};

    #[test]
    fn round_trip_is_bit_exact() {
        let store: ParamStore<f32> = init_params(&ModelConfig::default(), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_params(&store, &path).unwrap();
        let back = load_params(&path).unwrap();
        assert_eq!(back, store);
        let bits = |s: &ParamStore<f32>| s.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&store));
    }

    #[test]
    fn layout_is_as_documented() {
        let t = Tensor::new(vec![2], vec![1.0f32, -2.0]).unwrap();
        let bytes = encode([("ab", &t)]);
        let mut want = b"SEQC1".to_vec();
        want.extend(1u32.to_le_bytes());
        want.extend(2u32.to_le_bytes());
        want.extend(b"ab");
        want.extend(1u32.to_le_bytes());
        want.extend(2u32.to_le_bytes());
        want.extend(1.0f32.to_le_bytes());
        want.extend((-2.0f32).to_le_bytes());
        assert_eq!(bytes, want);
    }

    #[test]
    fn corrupt_inputs_report_offsets() {
        let t = Tensor::new(vec![3], vec![1.0f32, 2.0, 3.0]).unwrap();
        let bytes = encode([("w", &t)]);
        for cut in 0..bytes.len() {
            match decode(&bytes[..cut]) {
                Err(Error::CorruptCheckpoint { offset, .. }) => assert!(offset <= cut),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::CorruptCheckpoint { offset: 0, .. })));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(decode(&long), Err(Error::CorruptCheckpoint { .. })));
    }
}

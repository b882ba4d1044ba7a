//! Versioned named-tensor checkpoints.
//!
//! Layout (little-endian): magic `TAPECKPT`, `u32` version, `u64` tensor
//! count, then per tensor a `u32`-length-prefixed UTF-8 name, a `u8` role
//! tag, a `u8` dtype code (0 = f32), a `u32` rank, `u64` dims and the raw
//! values.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numeric::Tensor;
use crate::params::{ParamStore, Role};

pub const MAGIC: &[u8; 8] = b"TAPECKPT";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

pub fn encode_checkpoint(store: &ParamStore<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + 4 * store.numel() + 64 * store.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u64).to_le_bytes());
    for (name, p) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(p.role.tag());
        out.push(DTYPE_F32);
        out.extend_from_slice(&(p.tensor.rank() as u32).to_le_bytes());
        for &d in p.tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'b> {
    bytes: &'b [u8],
    pos: usize,
    path: &'b Path,
}

impl<'b> Cursor<'b> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'b [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::format(
                self.path,
                format!("truncated while reading {what} at byte {}", self.pos),
            ));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

/// Parses a checkpoint. Every tensor comes back frozen.
pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<ParamStore<f32>> {
    let bad = |d: String| Error::format(path, d);
    let mut c = Cursor { bytes, pos: 0, path };
    let magic = c.take(8, "magic")?;
    if magic != MAGIC {
        return Err(bad(format!(
            "bad magic {:?}, expected \"TAPECKPT\"",
            String::from_utf8_lossy(magic)
        )));
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(bad(format!(
            "checkpoint version {version} is not supported (this build reads version {VERSION})"
        )));
    }
    let count = c.u64("tensor count")?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = c.u32("name length")? as usize;
        let name = std::str::from_utf8(c.take(len, "name")?)
            .map_err(|_| bad("tensor name is not UTF-8".into()))?
            .to_string();
        let tag = c.u8("role tag")?;
        let role = Role::from_tag(tag).ok_or_else(|| bad(format!("unknown role tag {tag} for `{name}`")))?;
        let dtype = c.u8("dtype")?;
        if dtype != DTYPE_F32 {
            return Err(bad(format!("unsupported dtype code {dtype} for `{name}`")));
        }
        let rank = c.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        let mut numel = 1usize;
        for _ in 0..rank {
            let d = usize::try_from(c.u64("dimension")?).map_err(|_| bad("dimension overflows".into()))?;
            numel = numel
                .checked_mul(d)
                .filter(|&n| n <= bytes.len() / 4)
                .ok_or_else(|| bad(format!("`{name}` is larger than the file")))?;
            shape.push(d);
        }
        let data = c
            .take(4 * numel, "tensor data")?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        let tensor = Tensor::from_vec(&shape, data).map_err(|e| bad(format!("`{name}`: {e}")))?;
        store.insert(name, role, tensor).map_err(|e| bad(e.to_string()))?;
    }
    if c.pos != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    Ok(store)
}

pub fn save_checkpoint(path: &Path, store: &ParamStore<f32>) -> Result<()> {
    fs::write(path, encode_checkpoint(store)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.insert(
            "a.weight",
            Role::Backbone,
            Tensor::from_vec(&[2, 3], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5, -7.25, 1e-30]).unwrap(),
        )
        .unwrap();
        s.insert(
            "ü.bias",
            Role::TaskAdapter,
            Tensor::from_vec(&[1], vec![f32::NAN]).unwrap(),
        )
        .unwrap();
        s.insert("head.k", Role::Head, Tensor::zeros(&[2, 1, 2, 2])).unwrap();
        s
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let s = sample_store();
        let bytes = encode_checkpoint(&s);
        let back = decode_checkpoint(&bytes, Path::new("mem")).unwrap();
        assert!(s.changed_names(&back).is_empty());
        assert_eq!(back.role("ü.bias").unwrap(), Role::TaskAdapter);
        assert_eq!(encode_checkpoint(&back), bytes);
        assert!(back.trainable_names().is_empty());
    }

    #[test]
    fn header_layout() {
        let bytes = encode_checkpoint(&sample_store());
        assert_eq!(&bytes[..8], b"TAPECKPT");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(bytes[12..20].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[20..24].try_into().unwrap()), 8);
        assert_eq!(&bytes[24..32], b"a.weight");
        assert_eq!(bytes[32], 0);
        assert_eq!(bytes[33], 0);
    }

    #[test]
    fn corruptions_are_structured_errors() {
        let bytes = encode_checkpoint(&sample_store());
        let p = Path::new("x.ckpt");
        let mut m = bytes.clone();
        m[0] = b'X';
        assert!(matches!(decode_checkpoint(&m, p), Err(Error::Format { .. })));
        let mut v = bytes.clone();
        v[8] = 2;
        let err = decode_checkpoint(&v, p).unwrap_err().to_string();
        assert!(err.contains("version 2"), "{err}");
        for cut in [0, 5, 12, 30, bytes.len() - 1] {
            assert!(decode_checkpoint(&bytes[..cut], p).is_err());
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_checkpoint(&extra, p).is_err());
        let mut role = bytes.clone();
        role[32] = 9;
        assert!(decode_checkpoint(&role, p).is_err());
        let mut huge = bytes;
        huge[38..46].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(decode_checkpoint(&huge, p).is_err());
    }
}

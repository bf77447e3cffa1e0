//! Binary weight files.
//!
//! Layout (little-endian): `b"LWPV"`, `u32` version, `u32` entry count,
//! then per entry `u32` name length, UTF-8 name, `u8` dtype tag, `u8` rank,
//! `u32` dims, and the raw element buffer.

use std::fs;
use std::path::Path;

use crate::error::{FormatError, Result};
use crate::store::WeightStore;
use crate::tensor::{DType, Scalar, Tensor, MAX_RANK};

pub const MAGIC: &[u8; 4] = b"LWPV";
pub const VERSION: u32 = 1;

pub fn encode_weights<T: Scalar>(store: &WeightStore<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + store.numel() * T::DTYPE.size());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE.tag());
        out.push(t.rank() as u8);
        for &d in t.dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let available = self.buf.len() - self.pos;
        if n > available {
            return Err(FormatError::Truncated { offset: self.pos, needed: n, available });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Parses a weights file whose entries all have dtype `T`.
pub fn decode_weights<T: Scalar>(bytes: &[u8]) -> Result<WeightStore<T>> {
    Ok(decode_inner(bytes)?)
}

fn decode_inner<T: Scalar>(bytes: &[u8]) -> Result<WeightStore<T>, FormatError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4).map_err(|_| FormatError::BadMagic)? != MAGIC {
        return Err(FormatError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let count = r.u32()?;
    let mut store = WeightStore::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?).map_err(|_| FormatError::BadUtf8)?.to_string();
        let tag = r.u8()?;
        let dtype = DType::from_tag(tag).ok_or(FormatError::BadDtype(tag))?;
        if dtype != T::DTYPE {
            return Err(FormatError::DtypeMismatch { expected: T::DTYPE.name(), found: dtype.name() });
        }
        let rank = r.u8()?;
        if rank as usize > MAX_RANK {
            return Err(FormatError::RankTooLarge(rank));
        }
        let mut dims = Vec::with_capacity(rank as usize);
        let mut numel = 1usize;
        for _ in 0..rank {
            let d = r.u32()? as usize;
            numel = numel.checked_mul(d).ok_or(FormatError::SizeOverflow)?;
            dims.push(d);
        }
        let nbytes = numel.checked_mul(dtype.size()).ok_or(FormatError::SizeOverflow)?;
        let raw = r.take(nbytes)?;
        let data = raw.chunks_exact(dtype.size()).map(T::read_le).collect();
        let tensor = Tensor::new(&dims, data).map_err(|_| FormatError::SizeOverflow)?;
        if store.get(&name).is_some() {
            return Err(FormatError::DuplicateName(name));
        }
        store.insert(name, tensor).expect("name checked unique");
    }
    let rest = bytes.len() - r.pos;
    if rest != 0 {
        return Err(FormatError::TrailingBytes(rest));
    }
    Ok(store)
}

pub fn save_weights<T: Scalar>(store: &WeightStore<T>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_weights(store))?;
    Ok(())
}

pub fn load_weights<T: Scalar>(path: impl AsRef<Path>) -> Result<WeightStore<T>> {
    decode_weights(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_store_is_twelve_bytes() {
        let bytes = encode_weights(&WeightStore::<f32>::new());
        assert_eq!(bytes.len(), 12);
        assert_eq!(decode_weights::<f32>(&bytes).unwrap().len(), 0);
    }

    #[test]
    fn error_paths() {
        let mut s = WeightStore::<f32>::new();
        s.insert("w", Tensor::from_fn(&[2, 3], |i| i as f32)).unwrap();
        let good = encode_weights(&s);
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode_weights::<f32>(&bad), Err(crate::Error::Format(FormatError::BadMagic))));
        let mut v2 = good.clone();
        v2[4] = 2;
        assert!(matches!(decode_weights::<f32>(&v2), Err(crate::Error::Format(FormatError::UnsupportedVersion(2)))));
        assert!(matches!(
            decode_weights::<f32>(&good[..good.len() - 1]),
            Err(crate::Error::Format(FormatError::Truncated { .. }))
        ));
        assert!(matches!(decode_weights::<f64>(&good), Err(crate::Error::Format(FormatError::DtypeMismatch { .. }))));
        let mut dup = good.clone();
        dup[8] = 2;
        dup.extend_from_slice(&good[12..]);
        assert!(matches!(decode_weights::<f32>(&dup), Err(crate::Error::Format(FormatError::DuplicateName(_)))));
        let mut trailing = good;
        trailing.push(0);
        assert!(matches!(decode_weights::<f32>(&trailing), Err(crate::Error::Format(FormatError::TrailingBytes(1)))));
    }
}

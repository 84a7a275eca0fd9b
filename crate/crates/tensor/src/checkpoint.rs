//! `ATK1` checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"ATK1"  u32 tensor_count
//! repeated tensor_count times:
//!     u32 name_len  name_len bytes of UTF-8 name
//!     u32 rank      rank x u32 extents
//!     product(extents) x f32 data
//! u32 crc32 of every preceding byte
//! ```

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ATK1";

pub fn encode(tensors: &[(String, Tensor<f32>)]) -> Vec<u8> {
    let payload: usize = tensors.iter().map(|(n, t)| 8 + n.len() + 4 * t.rank() + 4 * t.len()).sum();
    let mut buf = Vec::with_capacity(12 + payload);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            buf.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &x in t.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(TensorError::Format("unexpected end of data".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Parses a checkpoint, verifying magic and checksum first.
pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(TensorError::Format("bad magic".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(TensorError::ChecksumMismatch { stored, computed });
    }
    let mut r = Reader { buf: body, pos: 4 };
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(nlen)?)
            .map_err(|e| TensorError::Format(format!("tensor name: {e}")))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(4 * n)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(&shape, data)?));
    }
    if r.pos != body.len() {
        return Err(TensorError::Format("trailing bytes".into()));
    }
    Ok(out)
}

/// Writes atomically: a temporary sibling file is renamed over `path`.
pub fn save(path: &Path, tensors: &[(String, Tensor<f32>)]) -> Result<()> {
    let bytes = encode(tensors);
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    decode(&fs::read(path)?)
}

pub fn load_map(path: &Path) -> Result<HashMap<String, Tensor<f32>>> {
    Ok(load(path)?.into_iter().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<(String, Tensor<f32>)> {
        vec![
            ("a.weight".into(), Tensor::new(&[2, 3], vec![1.0, -2.0, 3.5, 0.0, 1e-8, 7.0]).unwrap()),
            ("meta.step".into(), Tensor::scalar(500.0)),
        ]
    }

    #[test]
    fn header_layout() {
        let b = encode(&sample());
        assert_eq!(&b[..4], b"ATK1");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 8);
        assert_eq!(&b[12..20], b"a.weight");
        assert_eq!(u32::from_le_bytes(b[20..24].try_into().unwrap()), 2);
    }

    #[test]
    fn round_trip() {
        assert_eq!(decode(&encode(&sample())).unwrap(), sample());
    }

    #[test]
    fn any_flipped_byte_is_detected() {
        let good = encode(&sample());
        for i in 4..good.len() {
            let mut bad = good.clone();
            bad[i] ^= 0x01;
            assert!(decode(&bad).is_err(), "corruption at byte {i} undetected");
        }
        let mut bad = good.clone();
        bad[30] ^= 0xff;
        assert!(matches!(decode(&bad), Err(TensorError::ChecksumMismatch { .. })));
    }

    #[test]
    fn save_load_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.atk");
        save(&p, &sample()).unwrap();
        assert_eq!(load(&p).unwrap(), sample());
    }
}

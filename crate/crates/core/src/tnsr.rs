//! TNSR: a minimal little-endian float container.
//!
//! ```text
//! "TNSR" | version: u16 = 1 | ndims: u16 | dims: ndims x u32 | payload: prod(dims) x f32
//! [ manifest: count: u32 | count x ( name_len: u32 | name: utf-8 | offset: u64
//!                                    | ndims: u16 | dims: ndims x u32 ) ]
//! ```
//!
//! The manifest is present only in checkpoints; `offset` counts elements
//! from the start of the payload.

use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TNSR";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub name: String,
    pub offset: u64,
    pub dims: Vec<u32>,
}

impl ManifestEntry {
    pub fn len(&self) -> usize {
        self.dims.iter().map(|&d| d as usize).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TnsrFile {
    pub dims: Vec<u32>,
    pub payload: Vec<f32>,
    pub manifest: Option<Vec<ManifestEntry>>,
}

impl TnsrFile {
    pub fn new(dims: &[usize], payload: Vec<f32>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != payload.len() {
            return Err(Error::Shape(format!(
                "dims {dims:?} describe {n} values, payload has {}",
                payload.len()
            )));
        }
        Ok(Self {
            dims: dims.iter().map(|&d| d as u32).collect(),
            payload,
            manifest: None,
        })
    }

    pub fn dims_usize(&self) -> Vec<usize> {
        self.dims.iter().map(|&d| d as usize).collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.dims.len() + 4 * self.payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dims.len() as u16).to_le_bytes());
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &self.payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(entries) = &self.manifest {
            out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
            for e in entries {
                out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
                out.extend_from_slice(e.name.as_bytes());
                out.extend_from_slice(&e.offset.to_le_bytes());
                out.extend_from_slice(&(e.dims.len() as u16).to_le_bytes());
                for d in &e.dims {
                    out.extend_from_slice(&d.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn decode(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, origin };
        if r.take(4)? != MAGIC {
            return Err(Error::format(origin, "bad magic"));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::format(origin, format!("unsupported version {version}")));
        }
        let ndims = r.u16()? as usize;
        let dims = (0..ndims).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
            .ok_or_else(|| Error::format(origin, "dims overflow"))?;
        let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::format(origin, "dims overflow"))?)?;
        let payload = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let manifest = if r.remaining() > 0 {
            let count = r.u32()? as usize;
            let mut entries = Vec::with_capacity(count.min(1 << 16));
            for _ in 0..count {
                let len = r.u32()? as usize;
                let name = std::str::from_utf8(r.take(len)?)
                    .map_err(|_| Error::format(origin, "manifest name is not utf-8"))?
                    .to_string();
                let offset = r.u64()?;
                let nd = r.u16()? as usize;
                let edims = (0..nd).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
                let entry = ManifestEntry { name, offset, dims: edims };
                if offset as usize + entry.len() > n {
                    return Err(Error::format(origin, format!("entry {} exceeds payload", entry.name)));
                }
                entries.push(entry);
            }
            if r.remaining() != 0 {
                return Err(Error::format(origin, "trailing bytes after manifest"));
            }
            Some(entries)
        } else {
            None
        };
        Ok(Self {
            dims,
            payload,
            manifest,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::format(self.origin, "truncated file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }
}

/// Writes a plain tensor (no manifest).
pub fn write_tensor(path: impl AsRef<Path>, dims: &[usize], data: Vec<f32>) -> Result<()> {
    TnsrFile::new(dims, data)?.write(path)
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<(Vec<usize>, Vec<f32>)> {
    let f = TnsrFile::read(path)?;
    Ok((f.dims_usize(), f.payload))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let f = TnsrFile::new(&[2, 1], vec![1.0, -2.5]).unwrap();
        let b = f.encode();
        assert_eq!(&b[..4], b"TNSR");
        assert_eq!(&b[4..8], &[1, 0, 2, 0]);
        assert_eq!(&b[8..16], &[2, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&b[16..20], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 24);
    }

    #[test]
    fn manifest_round_trip() {
        let mut f = TnsrFile::new(&[5], vec![0.0, 1.0, 2.0, 3.0, 4.0]).unwrap();
        f.manifest = Some(vec![
            ManifestEntry { name: "a.w".into(), offset: 0, dims: vec![1, 2] },
            ManifestEntry { name: "b".into(), offset: 2, dims: vec![3] },
        ]);
        let back = TnsrFile::decode(&f.encode(), Path::new("mem")).unwrap();
        assert_eq!(back, f);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let p = Path::new("mem");
        let good = TnsrFile::new(&[3], vec![1.0, 2.0, 3.0]).unwrap().encode();
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(TnsrFile::decode(&bad, p).is_err());
        assert!(TnsrFile::decode(&good[..good.len() - 1], p).is_err());
        let mut v2 = good.clone();
        v2[4] = 2;
        assert!(TnsrFile::decode(&v2, p).is_err());
        let mut extra = good.clone();
        extra.extend_from_slice(&[1, 0, 0, 0]);
        assert!(TnsrFile::decode(&extra, p).is_err());
        assert!(TnsrFile::new(&[2, 2], vec![0.0; 3]).is_err());
    }

    proptest! {
        #[test]
        fn payload_round_trip_is_lossless(
            dims in prop::collection::vec(1usize..5, 1..4),
            seed in any::<u64>(),
        ) {
            let n: usize = dims.iter().product();
            let data: Vec<f32> = (0..n)
                .map(|i| f32::from_bits((seed as u32).wrapping_mul(2654435761).wrapping_add(i as u32 * 97) & 0x7f7f_ffff))
                .collect();
            let f = TnsrFile::new(&dims, data).unwrap();
            let back = TnsrFile::decode(&f.encode(), Path::new("mem")).unwrap();
            prop_assert_eq!(back.payload.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            f.payload.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            prop_assert_eq!(back.dims, f.dims);
        }
    }
}

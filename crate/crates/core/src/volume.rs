//! Voxel grids and their on-disk form.
//!
//! File layout: `b"CTVOL1"`, `u8` dtype-tag length, dtype tag (`f32` or
//! `f64`), three `u32` extents, then row-major little-endian values with the
//! last axis fastest.

use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

const MAGIC: &[u8; 6] = b"CTVOL1";

#[derive(Clone, Debug, PartialEq)]
pub struct Volume<T> {
    extents: [usize; 3],
    data: Vec<T>,
}

impl<T: Scalar> Volume<T> {
    pub fn zeros(extents: [usize; 3]) -> Self {
        Self {
            extents,
            data: vec![T::zero(); extents.iter().product()],
        }
    }

    pub fn from_vec(extents: [usize; 3], data: Vec<T>) -> Result<Self> {
        if extents.contains(&0) || extents.iter().product::<usize>() != data.len() {
            return Err(Error::shape("volume", &extents, &[data.len()]));
        }
        Ok(Self { extents, data })
    }

    pub fn extents(&self) -> [usize; 3] {
        self.extents
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn index(&self, i: [usize; 3]) -> usize {
        (i[0] * self.extents[1] + i[1]) * self.extents[2] + i[2]
    }

    pub fn get(&self, i: [usize; 3]) -> T {
        self.data[self.index(i)]
    }

    pub fn set(&mut self, i: [usize; 3], v: T) {
        let k = self.index(i);
        self.data[k] = v;
    }

    pub fn add(&mut self, i: [usize; 3], v: T) {
        let k = self.index(i);
        self.data[k] += v;
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + self.data.len() * 8);
        out.extend_from_slice(MAGIC);
        out.push(3);
        out.extend_from_slice(b"f64");
        for e in self.extents {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Parse(format!("volume: {m}"));
        if bytes.len() < 7 || &bytes[..6] != MAGIC {
            return Err(bad("bad magic"));
        }
        let tl = bytes[6] as usize;
        let tag = bytes.get(7..7 + tl).ok_or_else(|| bad("truncated header"))?;
        let width = match tag {
            b"f64" => 8,
            b"f32" => 4,
            _ => return Err(bad("unknown dtype tag")),
        };
        let mut pos = 7 + tl;
        let mut extents = [0usize; 3];
        for e in &mut extents {
            let b = bytes.get(pos..pos + 4).ok_or_else(|| bad("truncated header"))?;
            *e = u32::from_le_bytes(b.try_into().unwrap()) as usize;
            pos += 4;
        }
        let n: usize = extents.iter().product();
        let body = &bytes[pos..];
        if body.len() != n * width {
            return Err(bad("payload length does not match extents"));
        }
        let data = if width == 8 {
            body.chunks_exact(8)
                .map(|c| T::lit(f64::from_le_bytes(c.try_into().unwrap())))
                .collect()
        } else {
            body.chunks_exact(4)
                .map(|c| T::lit(f64::from(f32::from_le_bytes(c.try_into().unwrap()))))
                .collect()
        };
        Self::from_vec(extents, data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_roundtrip() {
        let data: Vec<f64> = (0..24).map(|i| i as f64 * 0.5 - 3.0).collect();
        let v = Volume::from_vec([2, 3, 4], data).unwrap();
        assert_eq!(v.get([1, 2, 3]), 23.0 * 0.5 - 3.0);
        let back = Volume::<f64>::from_bytes(&v.to_bytes()).unwrap();
        assert_eq!(back, v);
        assert!(Volume::<f64>::from_bytes(&v.to_bytes()[..40]).is_err());
    }

    #[test]
    fn reads_f32_payload() {
        let mut b = MAGIC.to_vec();
        b.push(3);
        b.extend_from_slice(b"f32");
        for e in [1u32, 1, 2] {
            b.extend_from_slice(&e.to_le_bytes());
        }
        b.extend_from_slice(&1.5f32.to_le_bytes());
        b.extend_from_slice(&(-2.0f32).to_le_bytes());
        let v = Volume::<f64>::from_bytes(&b).unwrap();
        assert_eq!(v.as_slice(), &[1.5, -2.0]);
    }
}

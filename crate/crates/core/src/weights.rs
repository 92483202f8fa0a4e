//! Flat binary parameter files.
//!
//! ```text
//! magic      4 bytes  "TFWT"
//! version    u32      1
//! count      u32      number of tensors
//! per tensor:
//!   name_len u32, name (UTF-8)
//!   rank     u32, extents (u64 each)
//!   dtype    u8       0 = f32, 1 = f64
//!   data     numel values, little-endian
//! ```
//! All integers are little-endian.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::params::ParamLayout;
use crate::tensor::{DType, Element, Tensor};

pub const MAGIC: [u8; 4] = *b"TFWT";
pub const VERSION: u32 = 1;

pub fn write_weights<T: Element>(out: &mut impl Write, layout: &ParamLayout, params: &[Tensor<T>]) -> Result<()> {
    layout.check(params)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (spec, p) in layout.specs().iter().zip(params) {
        buf.extend_from_slice(&(spec.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(spec.name.as_bytes());
        buf.extend_from_slice(&(p.rank() as u32).to_le_bytes());
        for &e in p.shape() {
            buf.extend_from_slice(&(e as u64).to_le_bytes());
        }
        buf.push(T::DTYPE.tag());
        for &v in p.data() {
            v.write_le(&mut buf);
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

/// A tensor as stored, before it is matched against a model.
#[derive(Debug, Clone)]
pub struct StoredTensor<T: Element> {
    pub name: String,
    pub dtype: DType,
    pub value: Tensor<T>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::WeightFormat(format!("unexpected end of file at byte {}", self.at)))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parses a weight file, converting values to `T` whatever their stored dtype.
pub fn read_tensors<T: Element>(input: &mut impl Read) -> Result<Vec<StoredTensor<T>>> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let mut c = Cursor { bytes: &bytes, at: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::WeightFormat("bad magic".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::WeightFormat(format!("unsupported version {version}")));
    }
    let count = c.u32()? as usize;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = c.u32()? as usize;
        let name = String::from_utf8(c.take(len)?.to_vec()).map_err(|_| Error::WeightFormat("tensor name is not UTF-8".into()))?;
        let rank = c.u32()? as usize;
        let shape = (0..rank).map(|_| c.u64().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        let tag = c.take(1)?[0];
        let dtype = DType::from_tag(tag).ok_or_else(|| Error::WeightFormat(format!("{name}: unknown dtype tag {tag}")))?;
        let numel = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e));
        let numel = numel.ok_or_else(|| Error::WeightFormat(format!("{name}: extents overflow")))?;
        let size = dtype.size_bytes();
        let raw = c.take(numel.checked_mul(size).ok_or_else(|| Error::WeightFormat(format!("{name}: size overflow")))?)?;
        let data: Vec<T> = match dtype {
            DType::Float32 => raw.chunks_exact(size).map(|b| T::from_f64(f32::read_le(b) as f64)).collect(),
            DType::Float64 => raw.chunks_exact(size).map(|b| T::from_f64(f64::read_le(b))).collect(),
        };
        let value = Tensor::from_vec(shape, data).map_err(|e| Error::WeightFormat(format!("{name}: {e}")))?;
        out.push(StoredTensor { name, dtype, value });
    }
    if c.at != bytes.len() {
        return Err(Error::WeightFormat(format!("{} trailing bytes", bytes.len() - c.at)));
    }
    Ok(out)
}

/// Reads a weight file and matches it, by position, name and shape, to `layout`.
pub fn read_weights<T: Element>(input: &mut impl Read, layout: &ParamLayout) -> Result<Vec<Tensor<T>>> {
    let stored = read_tensors::<T>(input)?;
    if stored.len() != layout.len() {
        return Err(Error::WeightMismatch(format!("file holds {} tensors, model declares {}", stored.len(), layout.len())));
    }
    let mut out = Vec::with_capacity(stored.len());
    for (spec, t) in layout.specs().iter().zip(stored) {
        if spec.name != t.name {
            return Err(Error::WeightMismatch(format!("expected tensor {}, found {}", spec.name, t.name)));
        }
        if spec.shape != t.value.shape() {
            return Err(Error::WeightMismatch(format!("{} expects shape {:?}, file has {:?}", spec.name, spec.shape, t.value.shape())));
        }
        out.push(t.value);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Init;

    fn layout() -> ParamLayout {
        let mut l = ParamLayout::new();
        l.add("a.weight", [2, 3], Init::EMBED);
        l.add("a.bias", [3], Init::Zeros);
        l
    }

    #[test]
    fn round_trip_and_cast() {
        let l = layout();
        let p: Vec<Tensor<f32>> = l.init(4);
        let mut buf = Vec::new();
        write_weights(&mut buf, &l, &p).unwrap();
        let back: Vec<Tensor<f32>> = read_weights(&mut buf.as_slice(), &l).unwrap();
        assert_eq!(back, p);
        let wide: Vec<Tensor<f64>> = read_weights(&mut buf.as_slice(), &l).unwrap();
        assert_eq!(wide[0].cast::<f32>(), p[0]);
    }

    #[test]
    fn header_layout() {
        let l = layout();
        let p: Vec<Tensor<f64>> = l.init(0);
        let mut buf = Vec::new();
        write_weights(&mut buf, &l, &p).unwrap();
        assert_eq!(&buf[..4], b"TFWT");
        assert_eq!(buf[4..8], 1u32.to_le_bytes());
        assert_eq!(buf[8..12], 2u32.to_le_bytes());
        let expect = 12 + (4 + 8 + 4 + 16 + 1 + 48) + (4 + 6 + 4 + 8 + 1 + 24);
        assert_eq!(buf.len(), expect);
    }

    #[test]
    fn shape_mismatch_detected() {
        let l = layout();
        let p: Vec<Tensor<f64>> = l.init(0);
        let mut buf = Vec::new();
        write_weights(&mut buf, &l, &p).unwrap();
        let mut other = ParamLayout::new();
        other.add("a.weight", [3, 2], Init::EMBED);
        other.add("a.bias", [3], Init::Zeros);
        assert!(matches!(read_weights::<f64>(&mut buf.as_slice(), &other), Err(Error::WeightMismatch(_))));
    }

    #[test]
    fn truncated_file_rejected() {
        let l = layout();
        let p: Vec<Tensor<f64>> = l.init(0);
        let mut buf = Vec::new();
        write_weights(&mut buf, &l, &p).unwrap();
        buf.pop();
        assert!(matches!(read_weights::<f64>(&mut buf.as_slice(), &l), Err(Error::WeightFormat(_))));
        assert!(matches!(read_tensors::<f64>(&mut &b"NOPE"[..]), Err(Error::WeightFormat(_))));
    }
}

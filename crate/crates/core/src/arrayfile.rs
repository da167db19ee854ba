//! Little-endian array records shared by the sample and checkpoint formats.
//!
//! A record is `rank: u8`, `dims: [u32; rank]`, `dtype: u8`, then the raw
//! element data in little-endian order.

use std::io::{self, Write};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DTypeCode {
    U8 = 1,
    U16 = 2,
    U32 = 3,
    F32 = 5,
    F64 = 6,
}

impl DTypeCode {
    fn from_u8(code: u8) -> Result<Self> {
        Ok(match code {
            1 => Self::U8,
            2 => Self::U16,
            3 => Self::U32,
            5 => Self::F32,
            6 => Self::F64,
            other => return Err(Error::Corrupt(format!("unknown dtype code {other}"))),
        })
    }

    fn width(self) -> usize {
        match self {
            Self::U8 => 1,
            Self::U16 => 2,
            Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    U8(Vec<u8>),
    U16(Vec<u16>),
    U32(Vec<u32>),
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl ArrayData {
    pub fn len(&self) -> usize {
        match self {
            Self::U8(v) => v.len(),
            Self::U16(v) => v.len(),
            Self::U32(v) => v.len(),
            Self::F32(v) => v.len(),
            Self::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn code(&self) -> DTypeCode {
        match self {
            Self::U8(_) => DTypeCode::U8,
            Self::U16(_) => DTypeCode::U16,
            Self::U32(_) => DTypeCode::U32,
            Self::F32(_) => DTypeCode::F32,
            Self::F64(_) => DTypeCode::F64,
        }
    }
}

/// An n-dimensional array with row-major data.
#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    pub dims: Vec<usize>,
    pub data: ArrayData,
}

impl Array {
    pub fn new(dims: Vec<usize>, data: ArrayData) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "array dims {dims:?} imply {n} elements, data has {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn f32(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::new(dims, ArrayData::F32(data))
    }

    pub fn into_f32(self) -> Result<Vec<f32>> {
        match self.data {
            ArrayData::F32(v) => Ok(v),
            other => Err(Error::Corrupt(format!("expected f32 array, found {:?}", other.code()))),
        }
    }

    pub fn write_to(&self, w: &mut impl Write) -> io::Result<()> {
        let rank = u8::try_from(self.dims.len())
            .map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "rank exceeds 255"))?;
        w.write_all(&[rank])?;
        for &d in &self.dims {
            let d = u32::try_from(d)
                .map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "dimension exceeds u32"))?;
            w.write_all(&d.to_le_bytes())?;
        }
        w.write_all(&[self.data.code() as u8])?;
        match &self.data {
            ArrayData::U8(v) => w.write_all(v)?,
            ArrayData::U16(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes()))?,
            ArrayData::U32(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes()))?,
            ArrayData::F32(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes()))?,
            ArrayData::F64(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes()))?,
        }
        Ok(())
    }

    pub fn read_from(r: &mut ByteReader<'_>) -> Result<Self> {
        let rank = r.u8()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32()? as usize);
        }
        let code = DTypeCode::from_u8(r.u8()?)?;
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Corrupt("array size overflows".into()))?;
        let nbytes = n
            .checked_mul(code.width())
            .ok_or_else(|| Error::Corrupt("array size overflows".into()))?;
        let raw = r.bytes(nbytes)?;
        let data = match code {
            DTypeCode::U8 => ArrayData::U8(raw.to_vec()),
            DTypeCode::U16 => ArrayData::U16(
                raw.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect(),
            ),
            DTypeCode::U32 => ArrayData::U32(
                raw.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect(),
            ),
            DTypeCode::F32 => ArrayData::F32(
                raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
            ),
            DTypeCode::F64 => ArrayData::F64(
                raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            ),
        };
        Ok(Self { dims, data })
    }
}

/// Bounds-checked cursor; every read past the end is reported as corruption.
pub struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                Error::Corrupt(format!(
                    "needed {n} bytes at offset {}, only {} remain",
                    self.pos,
                    self.buf.len() - self.pos
                ))
            })?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    pub fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.bytes(16)?.try_into().unwrap()))
    }

    pub fn is_empty(&self) -> bool {
        self.pos == self.buf.len()
    }
}

//! Little-endian byte cursor with offset-carrying errors.

use byteorder::{ByteOrder, LittleEndian, WriteBytesExt};

use crate::data::{DataError, DataResult};

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pub pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> DataResult<&'a [u8]> {
        let avail = self.remaining();
        if avail < n {
            return Err(DataError::Truncated {
                offset: self.pos,
                expected: n,
                actual: avail,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> DataResult<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> DataResult<u16> {
        Ok(LittleEndian::read_u16(self.take(2)?))
    }

    pub fn u32(&mut self) -> DataResult<u32> {
        Ok(LittleEndian::read_u32(self.take(4)?))
    }

    pub fn u64(&mut self) -> DataResult<u64> {
        Ok(LittleEndian::read_u64(self.take(8)?))
    }

    pub fn i64(&mut self) -> DataResult<i64> {
        Ok(LittleEndian::read_i64(self.take(8)?))
    }

    pub fn f64(&mut self) -> DataResult<f64> {
        Ok(LittleEndian::read_f64(self.take(8)?))
    }

    pub fn f32s(&mut self, n: usize) -> DataResult<Vec<f32>> {
        let bytes = n.checked_mul(4).ok_or_else(|| self.format("length overflow"))?;
        let raw = self.take(bytes)?;
        let mut out = vec![0f32; n];
        LittleEndian::read_f32_into(raw, &mut out);
        Ok(out)
    }

    pub fn f64s(&mut self, n: usize) -> DataResult<Vec<f64>> {
        let bytes = n.checked_mul(8).ok_or_else(|| self.format("length overflow"))?;
        let raw = self.take(bytes)?;
        let mut out = vec![0f64; n];
        LittleEndian::read_f64_into(raw, &mut out);
        Ok(out)
    }

    fn utf8(&mut self, len: usize) -> DataResult<String> {
        let at = self.pos;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| DataError::Format {
            offset: at,
            detail: "string is not valid UTF-8".into(),
        })
    }

    pub fn str16(&mut self) -> DataResult<String> {
        let n = self.u16()? as usize;
        self.utf8(n)
    }

    pub fn str32(&mut self) -> DataResult<String> {
        let n = self.u32()? as usize;
        self.utf8(n)
    }

    pub fn format(&self, detail: impl Into<String>) -> DataError {
        DataError::Format {
            offset: self.pos,
            detail: detail.into(),
        }
    }
}

pub(crate) fn put_str16(out: &mut Vec<u8>, s: &str) -> DataResult<()> {
    let n = u16::try_from(s.len()).map_err(|_| DataError::Invalid(format!("string too long: {s:?}")))?;
    out.write_u16::<LittleEndian>(n)?;
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

pub(crate) fn put_str32(out: &mut Vec<u8>, s: &str) -> DataResult<()> {
    let n = u32::try_from(s.len()).map_err(|_| DataError::Invalid("string too long".into()))?;
    out.write_u32::<LittleEndian>(n)?;
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

pub(crate) fn put_f32s(out: &mut Vec<u8>, v: &[f32]) {
    let start = out.len();
    out.resize(start + 4 * v.len(), 0);
    LittleEndian::write_f32_into(v, &mut out[start..]);
}

pub(crate) fn put_f64s(out: &mut Vec<u8>, v: &[f64]) {
    let start = out.len();
    out.resize(start + 8 * v.len(), 0);
    LittleEndian::write_f64_into(v, &mut out[start..]);
}

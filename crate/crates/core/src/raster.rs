//! `FSR1` single-band raster: magic, u16 H, u16 W, then `H*W` little-endian
//! f32 values in row-major order.

use std::fs;
use std::path::Path;

use byteorder::{LittleEndian, WriteBytesExt};

use crate::binio::{put_f32s, Reader};
use crate::data::{DataError, DataResult};

pub const RASTER_MAGIC: &[u8; 4] = b"FSR1";

#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Raster {
    pub fn new(h: usize, w: usize, data: Vec<f32>) -> DataResult<Self> {
        if data.len() != h * w {
            return Err(DataError::Invalid(format!(
                "raster {h}x{w} needs {} values, got {}",
                h * w,
                data.len()
            )));
        }
        Ok(Self { h, w, data })
    }

    pub fn from_f64(h: usize, w: usize, data: &[f64]) -> DataResult<Self> {
        Self::new(h, w, data.iter().map(|&v| v as f32).collect())
    }

    pub fn encode(&self) -> DataResult<Vec<u8>> {
        let dim = |v: usize| u16::try_from(v).map_err(|_| DataError::Invalid(format!("raster dim {v} exceeds u16")));
        let mut out = Vec::with_capacity(8 + 4 * self.data.len());
        out.extend_from_slice(RASTER_MAGIC);
        out.write_u16::<LittleEndian>(dim(self.h)?)?;
        out.write_u16::<LittleEndian>(dim(self.w)?)?;
        put_f32s(&mut out, &self.data);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> DataResult<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != RASTER_MAGIC {
            return Err(DataError::Format {
                offset: 0,
                detail: "bad magic, expected FSR1".into(),
            });
        }
        let h = r.u16()? as usize;
        let w = r.u16()? as usize;
        let data = r.f32s(h * w)?;
        if r.remaining() != 0 {
            return Err(r.format(format!("{} trailing bytes", r.remaining())));
        }
        Ok(Self { h, w, data })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> DataResult<()> {
        fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> DataResult<Self> {
        Self::decode(&fs::read(path)?)
    }
}

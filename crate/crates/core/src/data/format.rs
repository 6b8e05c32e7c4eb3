//! `FSNW` container: little-endian header, then fixed-size sample records.
//!
//! ```text
//! "FSNW" | version u16 | n u32 | H u16 | W u16 | C u16 | C x (len u16, utf-8)
//! n x ( id u64 | C*H*W f32 | H*W i8 )
//! ```

use std::fs;
use std::path::Path;

use byteorder::{LittleEndian, WriteBytesExt};

use super::{DataError, DataResult, Dataset, Sample};
use crate::binio::{put_f32s, put_str16, Reader};

pub const MAGIC: &[u8; 4] = b"FSNW";
pub const FORMAT_VERSION: u16 = 1;

pub fn encode(ds: &Dataset) -> DataResult<Vec<u8>> {
    let dim = |v: usize, what: &str| {
        u16::try_from(v).map_err(|_| DataError::Invalid(format!("{what} {v} exceeds u16")))
    };
    let hw = ds.hw();
    let c = ds.n_channels();
    let mut out = Vec::with_capacity(32 + ds.len() * (8 + 4 * c * hw + hw));
    out.extend_from_slice(MAGIC);
    out.write_u16::<LittleEndian>(FORMAT_VERSION)?;
    let n = u32::try_from(ds.len()).map_err(|_| DataError::Invalid("too many samples".into()))?;
    out.write_u32::<LittleEndian>(n)?;
    out.write_u16::<LittleEndian>(dim(ds.h, "height")?)?;
    out.write_u16::<LittleEndian>(dim(ds.w, "width")?)?;
    out.write_u16::<LittleEndian>(dim(c, "channel count")?)?;
    for name in &ds.channels {
        put_str16(&mut out, name)?;
    }
    for s in &ds.samples {
        if s.x.len() != c * hw || s.y.len() != hw {
            return Err(DataError::Invalid(format!("sample {} has wrong raster size", s.id)));
        }
        out.write_u64::<LittleEndian>(s.id)?;
        put_f32s(&mut out, &s.x);
        out.extend(s.y.iter().map(|&v| v as u8));
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> DataResult<Dataset> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != MAGIC {
        return Err(DataError::Format {
            offset: 0,
            detail: "bad magic, expected FSNW".into(),
        });
    }
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(DataError::Format {
            offset: 4,
            detail: format!("unsupported version {version}"),
        });
    }
    let n = r.u32()? as usize;
    let h = r.u16()? as usize;
    let w = r.u16()? as usize;
    let c = r.u16()? as usize;
    let mut channels = Vec::with_capacity(c);
    for _ in 0..c {
        channels.push(r.str16()?);
    }
    let hw = h * w;
    let mut samples = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let id = r.u64()?;
        let x = r.f32s(c * hw)?;
        let at = r.pos;
        let y: Vec<i8> = r.take(hw)?.iter().map(|&b| b as i8).collect();
        if let Some(i) = y.iter().position(|v| !(-1..=1).contains(v)) {
            return Err(DataError::Format {
                offset: at + i,
                detail: format!("label {} outside {{-1,0,1}}", y[i]),
            });
        }
        samples.push(Sample { id, x, y });
    }
    if r.pos != bytes.len() {
        return Err(DataError::Format {
            offset: r.pos,
            detail: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    Ok(Dataset {
        h,
        w,
        channels,
        samples,
    })
}

pub fn write_file(ds: &Dataset, path: impl AsRef<Path>) -> DataResult<()> {
    fs::write(path, encode(ds)?)?;
    Ok(())
}

pub fn read_file(path: impl AsRef<Path>) -> DataResult<Dataset> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        let mut ds = Dataset::new(2, 3);
        ds.samples.push(Sample {
            id: 7,
            x: (0..72).map(|i| i as f32 * 0.5 - 3.0).collect(),
            y: vec![-1, 0, 1, 0, 0, 1],
        });
        ds
    }

    #[test]
    fn round_trips() {
        let empty = Dataset::new(64, 64);
        assert_eq!(decode(&encode(&empty).unwrap()).unwrap(), empty);
        let ds = tiny();
        let bytes = encode(&ds).unwrap();
        assert_eq!(decode(&bytes).unwrap(), ds);
    }

    #[test]
    fn truncation_reports_lengths() {
        let bytes = encode(&tiny()).unwrap();
        let cut = &bytes[..bytes.len() - 10];
        match decode(cut) {
            Err(DataError::Truncated {
                expected, actual, ..
            }) => {
                assert!(actual < expected);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = encode(&tiny()).unwrap();
        bytes[4] = 9;
        assert!(matches!(decode(&bytes), Err(DataError::Format { offset: 4, .. })));
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(DataError::Format { offset: 0, .. })));
    }
}

//! Samples, channel schema, the `FSNW` container, normalization,
//! smoothing, augmentation, splits and the synthetic generator.

mod format;
mod norm;
mod synthetic;
mod transform;

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::rng::Pcg32;

pub use format::{decode, encode, read_file, write_file, FORMAT_VERSION, MAGIC};
pub use norm::{NormStats, STD_FLOOR};
pub use synthetic::{generate_synthetic, Direction, SyntheticConfig};
pub use transform::{
    augment_flip, flip_in_place, gaussian_kernel, gaussian_smooth, smooth_dataset, soft_labels,
    Smoothing,
};

pub const CHANNEL_NAMES: [&str; 12] = [
    "elevation",
    "NDVI",
    "population",
    "PrevFireMask",
    "th",
    "vs",
    "tmmn",
    "tmmx",
    "sph",
    "pr",
    "pdsi",
    "erc",
];

pub const N_CHANNELS: usize = 12;
pub const N_FUEL: usize = 4;
pub const N_WEATHER: usize = 8;
pub const PREV_FIRE_MASK: usize = 3;
pub const WIND_SPEED: usize = 5;
pub const ERC: usize = 11;
pub const PATCH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelGroup {
    Fuel,
    Weather,
}

impl ChannelGroup {
    pub fn of(channel: usize) -> Option<Self> {
        match channel {
            0..N_FUEL => Some(ChannelGroup::Fuel),
            N_FUEL..N_CHANNELS => Some(ChannelGroup::Weather),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ChannelGroup::Fuel => "fuel",
            ChannelGroup::Weather => "weather",
        }
    }
}

pub fn channel_index(name: &str) -> Option<usize> {
    CHANNEL_NAMES.iter().position(|&c| c == name)
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("format error at byte {offset}: {detail}")]
    Format { offset: usize, detail: String },
    #[error("truncated input at byte {offset}: expected {expected} more bytes, found {actual}")]
    Truncated {
        offset: usize,
        expected: usize,
        actual: usize,
    },
    #[error("invalid data: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type DataResult<T> = std::result::Result<T, DataError>;

/// One patch: `x` is `C x H x W` row-major, `y` is `H x W` in `{-1, 0, 1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub x: Vec<f32>,
    pub y: Vec<i8>,
}

impl Sample {
    pub fn channel(&self, c: usize, hw: usize) -> &[f32] {
        &self.x[c * hw..(c + 1) * hw]
    }

    pub fn channel_mut(&mut self, c: usize, hw: usize) -> &mut [f32] {
        &mut self.x[c * hw..(c + 1) * hw]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub h: usize,
    pub w: usize,
    pub channels: Vec<String>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Empty dataset with the standard 12-channel schema.
    pub fn new(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            channels: CHANNEL_NAMES.iter().map(|s| s.to_string()).collect(),
            samples: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn hw(&self) -> usize {
        self.h * self.w
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    /// Checks dims, label codomain, finiteness and that channel names match
    /// the schema.
    pub fn validate(&self) -> DataResult<()> {
        if self.channels.len() != N_CHANNELS
            || self.channels.iter().zip(CHANNEL_NAMES).any(|(a, b)| a != b)
        {
            return Err(DataError::Invalid(format!(
                "channel names {:?} do not match the schema",
                self.channels
            )));
        }
        let hw = self.hw();
        for s in &self.samples {
            if s.x.len() != N_CHANNELS * hw || s.y.len() != hw {
                return Err(DataError::Invalid(format!("sample {} has wrong raster size", s.id)));
            }
            if s.y.iter().any(|&v| !(-1..=1).contains(&v)) {
                return Err(DataError::Invalid(format!("sample {} has labels outside {{-1,0,1}}", s.id)));
            }
            if s.x.iter().any(|v| !v.is_finite()) {
                return Err(DataError::Invalid(format!("sample {} has non-finite inputs", s.id)));
            }
        }
        Ok(())
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            h: self.h,
            w: self.w,
            channels: self.channels.clone(),
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    pub fn find(&self, id: u64) -> Option<&Sample> {
        self.samples.iter().find(|s| s.id == id)
    }
}

/// Index sets of an 8:1:1 split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded 8:1:1 partition of `0..n`. Validation and test each get
/// `floor(n / 10)` items, training the rest.
pub fn split(n: usize, seed: u64) -> DataResult<Split> {
    if n < 10 {
        return Err(DataError::Invalid(format!("need at least 10 samples to split, got {n}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut Pcg32::new(seed));
    let n_hold = n / 10;
    let test = idx.split_off(n - n_hold);
    let val = idx.split_off(n - 2 * n_hold);
    Ok(Split {
        train: idx,
        val,
        test,
    })
}

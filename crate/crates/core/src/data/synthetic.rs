//! Synthetic next-day spread patches.
//!
//! Weather rasters are very smooth random fields, terrain rasters are
//! rougher ones. The previous-day mask is a thresholded sum of Gaussian
//! blobs. The target is the ring of pixels newly reached when the mask is
//! pushed 1 px toward `spread_bias`, or 2 px where ERC is above its mean.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;

use super::{DataError, Dataset, Sample, ERC, N_CHANNELS, PATCH, PREV_FIRE_MASK};
use crate::rng::Pcg32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    N,
    S,
    E,
    W,
    NE,
    NW,
    SE,
    SW,
}

impl Direction {
    /// Unit step `(d_row, d_col)`.
    pub fn offset(self) -> (isize, isize) {
        match self {
            Direction::N => (-1, 0),
            Direction::S => (1, 0),
            Direction::E => (0, 1),
            Direction::W => (0, -1),
            Direction::NE => (-1, 1),
            Direction::NW => (-1, -1),
            Direction::SE => (1, 1),
            Direction::SW => (1, -1),
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for Direction {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, DataError> {
        Ok(match s.to_ascii_uppercase().as_str() {
            "N" => Direction::N,
            "S" => Direction::S,
            "E" => Direction::E,
            "W" => Direction::W,
            "NE" => Direction::NE,
            "NW" => Direction::NW,
            "SE" => Direction::SE,
            "SW" => Direction::SW,
            _ => return Err(DataError::Invalid(format!("unknown direction {s:?}"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticConfig {
    pub h: usize,
    pub w: usize,
    pub spread_bias: Direction,
    /// Probability that a patch gets an unknown (`-1`) rectangle.
    pub unknown_prob: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            h: PATCH,
            w: PATCH,
            spread_bias: Direction::E,
            unknown_prob: 0.05,
        }
    }
}

/// Standard-normal values on a `(grid+1)^2` lattice, bilinearly
/// interpolated to `h x w`.
fn smooth_field(rng: &mut Pcg32, grid: usize, h: usize, w: usize) -> Vec<f64> {
    let g = grid + 1;
    let nodes: Vec<f64> = (0..g * g).map(|_| rng.sample(StandardNormal)).collect();
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h {
        let fy = i as f64 * grid as f64 / (h.max(2) - 1) as f64;
        let y0 = (fy.floor() as usize).min(grid - 1);
        let ty = fy - y0 as f64;
        for j in 0..w {
            let fx = j as f64 * grid as f64 / (w.max(2) - 1) as f64;
            let x0 = (fx.floor() as usize).min(grid - 1);
            let tx = fx - x0 as f64;
            let at = |r: usize, c: usize| nodes[r * g + c];
            let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
            let bot = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
            out.push(top * (1.0 - ty) + bot * ty);
        }
    }
    out
}

fn fire_mask(rng: &mut Pcg32, h: usize, w: usize) -> Vec<bool> {
    let n_blobs = if rng.random_bool(0.1) {
        0
    } else {
        rng.random_range(1..=3)
    };
    let margin = (h.min(w) as f64 * 0.15).max(1.0);
    let blobs: Vec<(f64, f64, f64)> = (0..n_blobs)
        .map(|_| {
            (
                rng.random_range(margin..h as f64 - margin),
                rng.random_range(margin..w as f64 - margin),
                rng.random_range(3.0..6.0),
            )
        })
        .collect();
    let noise = smooth_field(rng, 16, h, w);
    (0..h * w)
        .map(|p| {
            let (i, j) = ((p / w) as f64, (p % w) as f64);
            let field: f64 = blobs
                .iter()
                .map(|&(ci, cj, s)| (-((i - ci).powi(2) + (j - cj).powi(2)) / (2.0 * s * s)).exp())
                .sum();
            field + 0.1 * noise[p] > 0.5
        })
        .collect()
}

fn one_sample(id: u64, rng: &mut Pcg32, cfg: &SyntheticConfig) -> Sample {
    let (h, w) = (cfg.h, cfg.w);
    let hw = h * w;
    let mut x = vec![0f32; N_CHANNELS * hw];
    let mut fill = |c: usize, v: Vec<f64>, f: &dyn Fn(f64) -> f64| {
        for (dst, s) in x[c * hw..(c + 1) * hw].iter_mut().zip(v) {
            *dst = f(s) as f32;
        }
    };
    fill(0, smooth_field(rng, 8, h, w), &|z| 900.0 + 600.0 * z);
    fill(1, smooth_field(rng, 8, h, w), &|z| 5000.0 + 2000.0 * z);
    fill(2, smooth_field(rng, 12, h, w), &|z| (30.0 + 50.0 * z).max(0.0));
    let prev = fire_mask(rng, h, w);
    fill(PREV_FIRE_MASK, prev.iter().map(|&b| f64::from(u8::from(b))).collect(), &|v| v);
    fill(4, smooth_field(rng, 2, h, w), &|z| (180.0 + 90.0 * z).rem_euclid(360.0));
    fill(5, smooth_field(rng, 2, h, w), &|z| (3.5 + 1.5 * z).max(0.0));
    let tmin = smooth_field(rng, 2, h, w);
    fill(6, tmin.clone(), &|z| 280.0 + 6.0 * z);
    let tmax: Vec<f64> = smooth_field(rng, 2, h, w)
        .into_iter()
        .zip(&tmin)
        .map(|(a, b)| 292.0 + 6.0 * b + 3.0 * a)
        .collect();
    fill(7, tmax, &|v| v);
    fill(8, smooth_field(rng, 2, h, w), &|z| (0.006 + 0.002 * z).max(0.0));
    fill(9, smooth_field(rng, 2, h, w), &|z| (0.5 * z).max(0.0));
    fill(10, smooth_field(rng, 2, h, w), &|z| 3.0 * z);
    let erc = smooth_field(rng, 2, h, w);
    fill(ERC, erc.clone(), &|z| 50.0 + 20.0 * z);

    let (di, dj) = cfg.spread_bias.offset();
    let mut y = vec![0i8; hw];
    for i in 0..h {
        for j in 0..w {
            let p = i * w + j;
            if prev[p] {
                continue;
            }
            let reach = if erc[p] > 0.0 { 2 } else { 1 };
            let burned = (1..=reach).any(|k| {
                let (si, sj) = (i as isize - k * di, j as isize - k * dj);
                (0..h as isize).contains(&si)
                    && (0..w as isize).contains(&sj)
                    && prev[si as usize * w + sj as usize]
            });
            y[p] = i8::from(burned);
        }
    }
    if rng.random_bool(cfg.unknown_prob) {
        let rh = rng.random_range(h / 8..=h * 3 / 8).max(1);
        let rw = rng.random_range(w / 8..=w * 3 / 8).max(1);
        let top = rng.random_range(0..=h - rh);
        let left = rng.random_range(0..=w - rw);
        for i in top..top + rh {
            y[i * w + left..i * w + left + rw].fill(-1);
        }
    }
    Sample { id, x, y }
}

/// `n` patches; sample `i` depends only on `(seed, i)`.
pub fn generate_synthetic(n: usize, seed: u64, cfg: &SyntheticConfig) -> Dataset {
    let mut ds = Dataset::new(cfg.h, cfg.w);
    ds.samples = (0..n as u64)
        .map(|i| one_sample(i, &mut Pcg32::derived(seed, i), cfg))
        .collect();
    ds
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codomain_and_determinism() {
        let cfg = SyntheticConfig::default();
        let a = generate_synthetic(20, 7, &cfg);
        let b = generate_synthetic(20, 7, &cfg);
        assert_eq!(a, b);
        a.validate().unwrap();
        assert_ne!(a, generate_synthetic(20, 8, &cfg));
    }

    #[test]
    fn target_is_new_burn_only() {
        let ds = generate_synthetic(30, 1, &SyntheticConfig::default());
        let hw = ds.hw();
        for s in &ds.samples {
            let prev = s.channel(PREV_FIRE_MASK, hw);
            for (p, &v) in s.y.iter().enumerate() {
                if prev[p] == 1.0 {
                    assert!(v <= 0);
                }
            }
        }
    }

    #[test]
    fn direction_parse() {
        assert_eq!("ne".parse::<Direction>().unwrap(), Direction::NE);
        assert!("up".parse::<Direction>().is_err());
    }
}

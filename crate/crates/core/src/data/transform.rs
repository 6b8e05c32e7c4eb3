use rand::Rng;

use super::{DataError, DataResult, Dataset, PREV_FIRE_MASK, WIND_SPEED};
use crate::tensor::Real;

/// Normalized 1-D Gaussian taps over `[-ceil(3 sigma), ceil(3 sigma)]`.
pub fn gaussian_kernel(sigma: f64) -> DataResult<Vec<f64>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(DataError::Invalid(format!("sigma must be positive, got {sigma}")));
    }
    let r = (3.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    Ok(taps.into_iter().map(|t| t / total).collect())
}

/// Separable Gaussian blur of an `h x w` raster with zero padding.
/// Accumulates in 64-bit.
pub fn gaussian_smooth<T: Real>(raster: &[T], h: usize, w: usize, sigma: f64) -> DataResult<Vec<T>> {
    if raster.len() != h * w {
        return Err(DataError::Invalid(format!(
            "raster has {} values, expected {h}x{w}",
            raster.len()
        )));
    }
    let k = gaussian_kernel(sigma)?;
    let r = (k.len() / 2) as isize;
    let mut rows = vec![0.0f64; h * w];
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for (t, &kt) in k.iter().enumerate() {
                let jj = j as isize + t as isize - r;
                if (0..w as isize).contains(&jj) {
                    acc += kt * raster[i * w + jj as usize].as_f64();
                }
            }
            rows[i * w + j] = acc;
        }
    }
    let mut out = vec![T::zero(); h * w];
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for (t, &kt) in k.iter().enumerate() {
                let ii = i as isize + t as isize - r;
                if (0..h as isize).contains(&ii) {
                    acc += kt * rows[ii as usize * w + j];
                }
            }
            out[i * w + j] = T::from_f64(acc);
        }
    }
    Ok(out)
}

/// Per-channel smoothing widths; `None` leaves the channel alone.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Smoothing {
    pub prev_fire_sigma: Option<f64>,
    pub wind_speed_sigma: Option<f64>,
}

impl Default for Smoothing {
    fn default() -> Self {
        Self {
            prev_fire_sigma: Some(0.8),
            wind_speed_sigma: Some(0.4),
        }
    }
}

impl Smoothing {
    pub fn none() -> Self {
        Self {
            prev_fire_sigma: None,
            wind_speed_sigma: None,
        }
    }
}

pub fn smooth_dataset(ds: &mut Dataset, cfg: &Smoothing) -> DataResult<()> {
    let (h, w, hw) = (ds.h, ds.w, ds.hw());
    for (channel, sigma) in [
        (PREV_FIRE_MASK, cfg.prev_fire_sigma),
        (WIND_SPEED, cfg.wind_speed_sigma),
    ] {
        let Some(sigma) = sigma else { continue };
        for s in &mut ds.samples {
            let out = gaussian_smooth(s.channel(channel, hw), h, w, sigma)?;
            s.channel_mut(channel, hw).copy_from_slice(&out);
        }
    }
    Ok(())
}

/// Background pixels draw from `U(0.01, 0.03)`, fire pixels from
/// `U(0.80, 0.99)`; `-1` passes through.
pub fn soft_labels<R: Rng + ?Sized>(y: &[i8], rng: &mut R) -> Vec<f32> {
    y.iter()
        .map(|&v| match v {
            1 => rng.random_range(0.80f32..=0.99),
            0 => rng.random_range(0.01f32..=0.03),
            other => f32::from(other),
        })
        .collect()
}

/// Flip `planes` stacked `h x w` rasters along H and/or W.
pub fn flip_in_place<T>(data: &mut [T], h: usize, w: usize, flip_h: bool, flip_w: bool) {
    for plane in data.chunks_mut(h * w) {
        if flip_w {
            plane.chunks_mut(w).for_each(<[T]>::reverse);
        }
        if flip_h {
            for i in 0..h / 2 {
                let (top, bottom) = plane.split_at_mut((h - 1 - i) * w);
                top[i * w..(i + 1) * w].swap_with_slice(&mut bottom[..w]);
            }
        }
    }
}

/// Random joint flip of inputs and targets, each axis with probability 0.5.
/// Returns `(flipped_h, flipped_w)`.
pub fn augment_flip<T, R: Rng + ?Sized>(
    x: &mut [f32],
    y: &mut [T],
    h: usize,
    w: usize,
    rng: &mut R,
) -> (bool, bool) {
    let fh = rng.random_bool(0.5);
    let fw = rng.random_bool(0.5);
    flip_in_place(x, h, w, fh, fw);
    flip_in_place(y, h, w, fh, fw);
    (fh, fw)
}

//! Model-ready views of a dataset: smoothed, normalized inputs alongside
//! the raw labels and the raw binary previous-day fire mask.

use crate::data::{
    smooth_dataset, DataError, DataResult, Dataset, NormStats, Smoothing, N_CHANNELS, PREV_FIRE_MASK,
};
use crate::models::ModelInstance;
use crate::nn::Mode;
use crate::rng::Pcg32;
use crate::tensor::{Result, Tensor};

/// Smoothing followed by normalization with training-split statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessing {
    pub stats: NormStats,
    pub smoothing: Smoothing,
}

impl Preprocessing {
    /// Statistics of the smoothed training split.
    pub fn fit(train: &Dataset, smoothing: Smoothing) -> DataResult<Self> {
        let mut smoothed = train.clone();
        smooth_dataset(&mut smoothed, &smoothing)?;
        Ok(Self {
            stats: NormStats::compute(&smoothed)?,
            smoothing,
        })
    }

    pub fn apply(&self, raw: &Dataset) -> DataResult<PreparedSet> {
        raw.validate()?;
        let mut ds = raw.clone();
        smooth_dataset(&mut ds, &self.smoothing)?;
        self.stats.normalize(&mut ds)?;
        let hw = raw.hw();
        let mut set = PreparedSet {
            h: raw.h,
            w: raw.w,
            ids: Vec::with_capacity(raw.len()),
            x: Vec::with_capacity(raw.len() * N_CHANNELS * hw),
            y: Vec::with_capacity(raw.len() * hw),
            prev: Vec::with_capacity(raw.len() * hw),
        };
        for (s, r) in ds.samples.iter().zip(&raw.samples) {
            set.ids.push(s.id);
            set.x.extend_from_slice(&s.x);
            set.y.extend_from_slice(&r.y);
            set.prev.extend(r.channel(PREV_FIRE_MASK, hw).iter().map(|&v| v >= 0.5));
        }
        Ok(set)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSet {
    pub h: usize,
    pub w: usize,
    pub ids: Vec<u64>,
    /// `N x 12 x H x W` model inputs.
    pub x: Vec<f32>,
    /// `N x H x W` labels in `{-1, 0, 1}`.
    pub y: Vec<i8>,
    /// `N x H x W` raw previous-day fire mask.
    pub prev: Vec<bool>,
}

impl PreparedSet {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn hw(&self) -> usize {
        self.h * self.w
    }

    pub fn sample_x(&self, i: usize) -> &[f32] {
        let n = N_CHANNELS * self.hw();
        &self.x[i * n..(i + 1) * n]
    }

    pub fn sample_y(&self, i: usize) -> &[i8] {
        &self.y[i * self.hw()..(i + 1) * self.hw()]
    }

    pub fn sample_prev(&self, i: usize) -> &[bool] {
        &self.prev[i * self.hw()..(i + 1) * self.hw()]
    }

    pub fn position(&self, id: u64) -> Option<usize> {
        self.ids.iter().position(|&i| i == id)
    }

    /// `[B, 12, H, W]` input tensor for the listed samples.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor<f32>> {
        let mut data = Vec::with_capacity(indices.len() * N_CHANNELS * self.hw());
        for &i in indices {
            data.extend_from_slice(self.sample_x(i));
        }
        Tensor::new(vec![indices.len(), N_CHANNELS, self.h, self.w], data)
    }

    pub fn subset(&self, indices: &[usize]) -> PreparedSet {
        let hw = self.hw();
        let mut out = PreparedSet {
            h: self.h,
            w: self.w,
            ids: Vec::new(),
            x: Vec::new(),
            y: Vec::new(),
            prev: Vec::new(),
        };
        for &i in indices {
            out.ids.push(self.ids[i]);
            out.x.extend_from_slice(self.sample_x(i));
            out.y.extend_from_slice(&self.y[i * hw..(i + 1) * hw]);
            out.prev.extend_from_slice(&self.prev[i * hw..(i + 1) * hw]);
        }
        out
    }

    /// Copy with input channel `c` set to `value` everywhere.
    pub fn with_channel_constant(&self, c: usize, value: f32) -> DataResult<PreparedSet> {
        if c >= N_CHANNELS {
            return Err(DataError::Invalid(format!("channel index {c} out of range")));
        }
        let mut out = self.clone();
        let hw = self.hw();
        for sample in out.x.chunks_mut(N_CHANNELS * hw) {
            sample[c * hw..(c + 1) * hw].fill(value);
        }
        Ok(out)
    }
}

/// Eval-mode probabilities for every sample, concatenated `N x H x W`.
pub fn predict(model: &ModelInstance<f32>, set: &PreparedSet, batch_size: usize) -> Result<Vec<f32>> {
    let mut out = Vec::with_capacity(set.len() * set.hw());
    let mut rng = Pcg32::new(0);
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let x = set.batch(chunk)?;
        out.extend_from_slice(model.predict_probs(&x, Mode::Eval, &mut rng)?.data());
    }
    Ok(out)
}

//! Channel-masking importance, MC-Dropout uncertainty and attention export.

use std::fmt::Write as _;

use thiserror::Error;

use crate::data::{ChannelGroup, DataError, NormStats, CHANNEL_NAMES, N_CHANNELS};
use crate::eval::{confusion, prf1, threshold_sweep, EvalError, Protocol};
use crate::models::{Architecture, ModelInstance};
use crate::nn::Mode;
use crate::prepared::{predict, PreparedSet};
use crate::raster::Raster;
use crate::rng::Pcg32;
use crate::tensor::{Graph, Tensor, TensorError};

pub const DEFAULT_MC_PASSES: usize = 20;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("architecture {0} has no attention modules")]
    Unsupported(Architecture),
    #[error("{0}")]
    Invalid(String),
}

pub type AnalysisResult<T> = std::result::Result<T, AnalysisError>;

/// Predictions of the reference predictor that echoes the previous-day
/// fire mask: 1 where it burned, 0 elsewhere.
pub fn copy_prev_probs(set: &PreparedSet) -> Vec<f32> {
    set.prev.iter().map(|&p| if p { 1.0 } else { 0.0 }).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceRow {
    pub channel: usize,
    pub name: &'static str,
    pub group: ChannelGroup,
    pub baseline_f1: f64,
    pub masked_f1: f64,
    /// `masked_f1 - baseline_f1`.
    pub delta_f1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceReport {
    pub threshold: f64,
    pub rows: Vec<ImportanceRow>,
}

pub const IMPORTANCE_HEADER: &str = "channel,name,group,baseline_f1,masked_f1,delta_f1";

impl ImportanceReport {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{IMPORTANCE_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.channel,
                r.name,
                r.group.name(),
                r.baseline_f1,
                r.masked_f1,
                r.delta_f1
            );
        }
        s
    }

    /// Channel with the most negative ΔF1 (first one on ties).
    pub fn most_important(&self) -> Option<&ImportanceRow> {
        self.rows
            .iter()
            .reduce(|best, r| if r.delta_f1 < best.delta_f1 { r } else { best })
    }
}

/// Clean-protocol F1 of `probs` at `threshold`.
fn clean_f1(probs: &[f32], set: &PreparedSet, threshold: f64) -> AnalysisResult<f64> {
    let c = confusion(probs, &set.prev, &set.y, Protocol::Clean, threshold)?;
    Ok(prf1(&c).2)
}

/// Best clean-protocol threshold for the unmasked inputs.
pub fn baseline_threshold(model: &ModelInstance<f32>, set: &PreparedSet, batch_size: usize) -> AnalysisResult<f64> {
    let probs = predict(model, set, batch_size)?;
    Ok(threshold_sweep(&probs, &set.prev, &set.y, Protocol::Clean)?
        .best_row()
        .threshold)
}

/// ΔF1 when `channel` is replaced by its training mean (in normalized
/// units), scored at the fixed `threshold`.
pub fn channel_importance(
    model: &ModelInstance<f32>,
    set: &PreparedSet,
    stats: &NormStats,
    channel: usize,
    threshold: f64,
    batch_size: usize,
) -> AnalysisResult<f64> {
    if channel >= N_CHANNELS {
        return Err(AnalysisError::Invalid(format!(
            "channel index {channel} out of range 0..{N_CHANNELS}"
        )));
    }
    let base = clean_f1(&predict(model, set, batch_size)?, set, threshold)?;
    let masked = set.with_channel_constant(channel, stats.normalized_mean(channel) as f32)?;
    let f1 = clean_f1(&predict(model, &masked, batch_size)?, set, threshold)?;
    Ok(f1 - base)
}

/// ΔF1 for all 12 channels. Without an explicit threshold the best
/// clean-protocol threshold of the unmasked run is used and then frozen.
pub fn importance_report(
    model: &ModelInstance<f32>,
    set: &PreparedSet,
    stats: &NormStats,
    threshold: Option<f64>,
    batch_size: usize,
) -> AnalysisResult<ImportanceReport> {
    let base_probs = predict(model, set, batch_size)?;
    let threshold = match threshold {
        Some(t) => t,
        None => {
            threshold_sweep(&base_probs, &set.prev, &set.y, Protocol::Clean)?
                .best_row()
                .threshold
        }
    };
    let baseline_f1 = clean_f1(&base_probs, set, threshold)?;
    let mut rows = Vec::with_capacity(N_CHANNELS);
    for c in 0..N_CHANNELS {
        let masked = set.with_channel_constant(c, stats.normalized_mean(c) as f32)?;
        let masked_f1 = clean_f1(&predict(model, &masked, batch_size)?, set, threshold)?;
        rows.push(ImportanceRow {
            channel: c,
            name: CHANNEL_NAMES[c],
            group: ChannelGroup::of(c).expect("channel index below N_CHANNELS"),
            baseline_f1,
            masked_f1,
            delta_f1: masked_f1 - baseline_f1,
        });
    }
    Ok(ImportanceReport { threshold, rows })
}

/// Per-pixel mean and sample standard deviation over stochastic passes.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyMap {
    pub h: usize,
    pub w: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub n_passes: usize,
}

impl UncertaintyMap {
    pub fn rasters(&self) -> AnalysisResult<(Raster, Raster)> {
        Ok((
            Raster::from_f64(self.h, self.w, &self.mean)?,
            Raster::from_f64(self.h, self.w, &self.std)?,
        ))
    }
}

fn single_sample(x: &Tensor<f32>) -> AnalysisResult<(usize, usize)> {
    match x.shape() {
        [_, h, w] | [1, _, h, w] => Ok((*h, *w)),
        s => Err(AnalysisError::Invalid(format!("expected one CHW sample, got shape {s:?}"))),
    }
}

/// Stochastic passes with dropout active and batch norm frozen. Pass `i`
/// draws its dropout masks from a stream derived from `(seed, i)`.
pub fn mc_predict(model: &ModelInstance<f32>, x: &Tensor<f32>, n_passes: usize, seed: u64) -> AnalysisResult<UncertaintyMap> {
    if n_passes < 2 {
        return Err(AnalysisError::Invalid(format!(
            "need at least 2 passes for a standard deviation, got {n_passes}"
        )));
    }
    let (h, w) = single_sample(x)?;
    let mut passes = Vec::with_capacity(n_passes);
    for i in 0..n_passes {
        let mut rng = Pcg32::derived(seed, i as u64);
        let p = model.predict_probs(x, Mode::McDropout, &mut rng)?;
        passes.push(p.data().to_vec());
    }
    let n = n_passes as f64;
    let mut mean = vec![0.0; h * w];
    let mut std = vec![0.0; h * w];
    for j in 0..h * w {
        let first = passes[0][j];
        if passes.iter().all(|p| p[j] == first) {
            mean[j] = f64::from(first);
            continue;
        }
        let m = passes.iter().map(|p| f64::from(p[j])).sum::<f64>() / n;
        let ss = passes.iter().map(|p| (f64::from(p[j]) - m).powi(2)).sum::<f64>();
        mean[j] = m;
        std[j] = (ss / (n - 1.0)).sqrt();
    }
    Ok(UncertaintyMap {
        h,
        w,
        mean,
        std,
        n_passes,
    })
}

/// The three CAFIM gates of an inference-mode forward pass, finest first.
pub fn export_attention(model: &ModelInstance<f32>, x: &Tensor<f32>) -> AnalysisResult<Vec<Raster>> {
    if !model.config.arch.has_cafim() {
        return Err(AnalysisError::Unsupported(model.config.arch));
    }
    single_sample(x)?;
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let out = model.forward(&mut g, xv, Mode::Eval, &mut Pcg32::new(0))?;
    out.alphas
        .iter()
        .map(|&a| {
            let shape = g.shape(a);
            let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
            Ok(Raster::new(h, w, g.value(a).data().to_vec())?)
        })
        .collect()
}

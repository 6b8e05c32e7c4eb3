//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use firesense::data::{generate_synthetic, Smoothing, SyntheticConfig};
use firesense::prepared::{Preprocessing, PreparedSet};
use firesense::train::{init_seed, TrainConfig, Trainer};
use firesense::{Architecture, ModelConfig, ModelInstance, Pcg32, Tensor};
use rand::Rng;

pub fn random_tensor(rng: &mut Pcg32, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Direct cross-correlation by nested loops over output pixel, output
/// channel, input channel and kernel tap.
#[allow(clippy::too_many_arguments)]
pub fn conv_oracle(
    x: &[f64],
    (n, c_in, h, w): (usize, usize, usize, usize),
    weight: &[f64],
    c_out: usize,
    k: usize,
    bias: &[f64],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * c_out * ho * wo];
    for b in 0..n {
        for co in 0..c_out {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = bias[co];
                    for ci in 0..c_in {
                        for di in 0..k {
                            for dj in 0..k {
                                let r = (i * stride + di) as isize - pad as isize;
                                let c = (j * stride + dj) as isize - pad as isize;
                                if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
                                    continue;
                                }
                                let xv = x[((b * c_in + ci) * h + r as usize) * w + c as usize];
                                let wv = weight[((co * c_in + ci) * k + di) * k + dj];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((b * c_out + co) * ho + i) * wo + j] = acc;
                }
            }
        }
    }
    (out, ho, wo)
}

/// Per-pixel tally: `(tp, fp, fn, tn)`.
pub fn confusion_oracle(probs: &[f32], prev: &[bool], target: &[i8], inflated: bool, thr: f64) -> [u64; 4] {
    let mut c = [0u64; 4];
    for i in 0..probs.len() {
        let truth = if inflated {
            target[i] == 1 || prev[i]
        } else if target[i] < 0 {
            continue;
        } else {
            target[i] == 1
        };
        let pred = f64::from(probs[i]) >= thr;
        let cell = match (pred, truth) {
            (true, true) => 0,
            (true, false) => 1,
            (false, true) => 2,
            (false, false) => 3,
        };
        c[cell] += 1;
    }
    c
}

/// Average precision by counting, for every positive, the items ranked at
/// or above it (higher score, or equal score and earlier position).
pub fn ap_oracle(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 {
        return None;
    }
    let mut total = 0.0;
    for i in 0..scores.len() {
        if !labels[i] {
            continue;
        }
        let (mut above, mut pos_above) = (0usize, 0usize);
        for j in 0..scores.len() {
            if scores[j] > scores[i] || (scores[j] == scores[i] && j <= i) {
                above += 1;
                pos_above += usize::from(labels[j]);
            }
        }
        total += pos_above as f64 / above as f64;
    }
    Some(total / n_pos as f64)
}

/// 4x4 case: four previously burning pixels labeled 0 next day, two new
/// burn pixels elsewhere.
pub fn inflation_fixture() -> (Vec<bool>, Vec<i8>) {
    let mut prev = vec![false; 16];
    for p in [5, 6, 9, 10] {
        prev[p] = true;
    }
    let mut target = vec![0i8; 16];
    target[7] = 1;
    target[11] = 1;
    (prev, target)
}

/// Overfit task: eight synthetic patches used as both train and validation.
pub fn overfit_set(data_seed: u64) -> PreparedSet {
    let ds = generate_synthetic(8, data_seed, &SyntheticConfig::default());
    let prep = Preprocessing::fit(&ds, Smoothing::default()).unwrap();
    prep.apply(&ds).unwrap()
}

pub fn overfit_config(seed: u64, max_epochs: usize) -> TrainConfig {
    TrainConfig {
        lr: 1e-2,
        batch_size: 2,
        max_epochs,
        patience: max_epochs,
        augment: false,
        soft_labels: false,
        target_f1: Some(0.95),
        seed,
        ..TrainConfig::default()
    }
}

pub fn overfit_model(arch: Architecture, seed: u64) -> ModelInstance<f32> {
    let cfg = ModelConfig::new(arch).with_width(0.25).with_dropout(0.0);
    ModelInstance::build(cfg, init_seed(seed)).unwrap()
}

pub struct OverfitRun {
    pub reached: Option<usize>,
    pub best_f1: f64,
    pub losses: Vec<f64>,
    pub seconds: f64,
}

/// Train until validation F1 reaches 0.95 or 200 epochs pass.
pub fn overfit_run(arch: Architecture, seed: u64) -> OverfitRun {
    let set = overfit_set(100 + seed);
    let start = std::time::Instant::now();
    let mut t = Trainer::new(overfit_model(arch, seed), overfit_config(seed, 200)).unwrap();
    t.run(&set, &set).unwrap();
    OverfitRun {
        reached: t.state.reached_target,
        best_f1: t.state.best_f1,
        losses: t.state.history.iter().map(|r| r.loss).collect(),
        seconds: start.elapsed().as_secs_f64(),
    }
}

//! Masked segmentation losses built from graph primitives.
//!
//! Targets are soft labels in `[0, 1]`; any negative target marks an
//! unknown pixel that contributes neither value nor gradient. Every term is
//! a mean over valid pixels per sample, then a mean over the batch. A
//! sample with no valid pixels contributes 0 and raises `empty_mask`.

use crate::tensor::{Graph, Real, Result, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub pos_weight: f64,
    pub dice_eps: f64,
    pub gamma: f64,
    pub w_bce: f64,
    pub w_dice: f64,
    pub w_focal: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            pos_weight: 3.0,
            dice_eps: 1.0,
            gamma: 2.0,
            w_bce: 0.4,
            w_dice: 0.3,
            w_focal: 0.3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossTerm {
    pub value: Var,
    /// Some sample in the batch had no valid pixel.
    pub empty_mask: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CompositeLoss {
    pub total: Var,
    pub wbce: Var,
    pub dice: Var,
    pub focal: Var,
    pub empty_mask: bool,
}

/// Plain-number view of a [`CompositeLoss`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossValues {
    pub total: f64,
    pub wbce: f64,
    pub dice: f64,
    pub focal: f64,
}

impl CompositeLoss {
    pub fn values<T: Real>(&self, g: &Graph<T>) -> LossValues {
        let v = |x: Var| g.value(x).data()[0].as_f64();
        LossValues {
            total: v(self.total),
            wbce: v(self.wbce),
            dice: v(self.dice),
            focal: v(self.focal),
        }
    }
}

/// Prepared per-pixel constants shared by the terms.
struct Prepared {
    batch: usize,
    /// Targets with unknown pixels replaced by 0.
    t: Var,
    /// `1 - t`.
    one_minus_t: Var,
    /// 1 on valid pixels, 0 elsewhere.
    mask: Var,
    /// `mask / (batch * valid_count(sample))`.
    mean_weights: Var,
    empty: bool,
}

fn prepare<T: Real>(g: &mut Graph<T>, logits: Var, targets: &Tensor<T>) -> Result<Prepared> {
    let shape = g.shape(logits).to_vec();
    if targets.len() != g.value(logits).len() {
        return Err(TensorError::ShapeMismatch {
            op: "loss",
            expected: shape,
            got: targets.shape().to_vec(),
        });
    }
    let batch = if shape.len() == 4 { shape[0] } else { 1 };
    let per = targets.len() / batch.max(1);
    let mut t = Vec::with_capacity(targets.len());
    let mut one_minus = Vec::with_capacity(targets.len());
    let mut mask = Vec::with_capacity(targets.len());
    let mut weights = Vec::with_capacity(targets.len());
    let mut empty = false;
    for chunk in targets.data().chunks(per.max(1)) {
        let valid = chunk.iter().filter(|v| v.as_f64() >= 0.0).count();
        empty |= valid == 0;
        let c = if valid == 0 {
            0.0
        } else {
            1.0 / (batch * valid) as f64
        };
        for &v in chunk {
            let ok = v.as_f64() >= 0.0;
            let tv = if ok { v } else { T::zero() };
            t.push(tv);
            one_minus.push(T::one() - tv);
            mask.push(if ok { T::one() } else { T::zero() });
            weights.push(T::from_f64(if ok { c } else { 0.0 }));
        }
    }
    Ok(Prepared {
        batch,
        t: g.constant(Tensor::new(shape.clone(), t)?),
        one_minus_t: g.constant(Tensor::new(shape.clone(), one_minus)?),
        mask: g.constant(Tensor::new(shape.clone(), mask)?),
        mean_weights: g.constant(Tensor::new(shape, weights)?),
        empty,
    })
}

/// `t * softplus(-z) * w + (1 - t) * softplus(z)`, elementwise.
fn soft_bce<T: Real>(g: &mut Graph<T>, z: Var, p: &Prepared, pos_weight: f64) -> Result<Var> {
    let neg = g.scale(z, -1.0)?;
    let sp_neg = g.softplus(neg)?;
    let sp_pos = g.softplus(z)?;
    let a = g.mul(p.t, sp_neg)?;
    let a = if pos_weight == 1.0 { a } else { g.scale(a, pos_weight)? };
    let b = g.mul(p.one_minus_t, sp_pos)?;
    g.add(a, b)
}

fn weighted_mean<T: Real>(g: &mut Graph<T>, per_pixel: Var, p: &Prepared) -> Result<Var> {
    let w = g.mul(per_pixel, p.mean_weights)?;
    g.sum(w)
}

fn wbce_term<T: Real>(g: &mut Graph<T>, z: Var, p: &Prepared, pos_weight: f64) -> Result<Var> {
    let px = soft_bce(g, z, p, pos_weight)?;
    weighted_mean(g, px, p)
}

fn dice_term<T: Real>(g: &mut Graph<T>, z: Var, p: &Prepared, eps: f64) -> Result<Var> {
    let prob = g.sigmoid(z)?;
    let prob = g.mul(prob, p.mask)?;
    let pt = g.mul(prob, p.t)?;
    let mut total: Option<Var> = None;
    for n in 0..p.batch {
        let (pn, ptn, tn) = if p.batch == 1 {
            (prob, pt, p.t)
        } else {
            (g.slice_batch(prob, n)?, g.slice_batch(pt, n)?, g.slice_batch(p.t, n)?)
        };
        let inter = g.sum(ptn)?;
        let sp = g.sum(pn)?;
        let st = g.sum(tn)?;
        let num = g.scale(inter, 2.0)?;
        let num = g.add_scalar(num, eps)?;
        let den = g.add(sp, st)?;
        let den = g.add_scalar(den, eps)?;
        let ratio = g.div(num, den)?;
        let d = g.one_minus(ratio)?;
        total = Some(match total {
            None => d,
            Some(acc) => g.add(acc, d)?,
        });
    }
    let total = total.ok_or_else(|| TensorError::Usage("empty batch".into()))?;
    if p.batch == 1 {
        Ok(total)
    } else {
        g.scale(total, 1.0 / p.batch as f64)
    }
}

fn focal_term<T: Real>(g: &mut Graph<T>, z: Var, p: &Prepared, gamma: f64) -> Result<Var> {
    // 1 - p_t = sigmoid(-z) for t >= 0.5 and sigmoid(z) otherwise
    let t = g.value(p.t);
    let signs: Vec<T> = t
        .data()
        .iter()
        .map(|v| if v.as_f64() >= 0.5 { -T::one() } else { T::one() })
        .collect();
    let signs = g.constant(Tensor::new(t.shape().to_vec(), signs)?);
    let sz = g.mul(z, signs)?;
    let q = g.sigmoid(sz)?;
    let modulator = g.powf(q, gamma)?;
    let bce = soft_bce(g, z, p, 1.0)?;
    let px = g.mul(modulator, bce)?;
    weighted_mean(g, px, p)
}

/// Weighted binary cross-entropy with `pos_weight` on the positive term.
pub fn wbce<T: Real>(g: &mut Graph<T>, logits: Var, targets: &Tensor<T>, pos_weight: f64) -> Result<LossTerm> {
    let p = prepare(g, logits, targets)?;
    Ok(LossTerm {
        value: wbce_term(g, logits, &p, pos_weight)?,
        empty_mask: p.empty,
    })
}

/// `1 - (2 sum(p t) + eps) / (sum(p) + sum(t) + eps)` per sample.
pub fn dice_loss<T: Real>(g: &mut Graph<T>, logits: Var, targets: &Tensor<T>, eps: f64) -> Result<LossTerm> {
    let p = prepare(g, logits, targets)?;
    Ok(LossTerm {
        value: dice_term(g, logits, &p, eps)?,
        empty_mask: p.empty,
    })
}

/// `(1 - p_t)^gamma` times the soft cross-entropy, with `p_t` taken from
/// the target binarized at 0.5.
pub fn focal_loss<T: Real>(g: &mut Graph<T>, logits: Var, targets: &Tensor<T>, gamma: f64) -> Result<LossTerm> {
    let p = prepare(g, logits, targets)?;
    Ok(LossTerm {
        value: focal_term(g, logits, &p, gamma)?,
        empty_mask: p.empty,
    })
}

/// `w_bce * wbce + w_dice * dice + w_focal * focal`.
pub fn composite_loss<T: Real>(
    g: &mut Graph<T>,
    logits: Var,
    targets: &Tensor<T>,
    cfg: &LossConfig,
) -> Result<CompositeLoss> {
    let p = prepare(g, logits, targets)?;
    let wbce = wbce_term(g, logits, &p, cfg.pos_weight)?;
    let dice = dice_term(g, logits, &p, cfg.dice_eps)?;
    let focal = focal_term(g, logits, &p, cfg.gamma)?;
    let a = g.scale(wbce, cfg.w_bce)?;
    let b = g.scale(dice, cfg.w_dice)?;
    let c = g.scale(focal, cfg.w_focal)?;
    let ab = g.add(a, b)?;
    let total = g.add(ab, c)?;
    Ok(CompositeLoss {
        total,
        wbce,
        dice,
        focal,
        empty_mask: p.empty,
    })
}

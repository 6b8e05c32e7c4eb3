use rand::RngCore;

use super::conv::{self, conv2d_output_size, ConvGeom};
use super::graph::{Graph, Op, Var};
use super::{dims4, Real, Result, Tensor, TensorError};

#[inline]
pub(crate) fn sigmoid_scalar<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
fn softplus_scalar<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// Per-channel batch statistics produced by a training-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BnBatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, as used for running-statistics updates.
    pub var_unbiased: Vec<f64>,
}

pub(crate) struct BnGrads<T> {
    pub input: Vec<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

/// Interpolation taps for align-corners=false 2x upsampling along one axis.
fn upsample_taps(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|i| {
            let src = ((i as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub(crate) fn upsample2x_backward<T: Real>(in_shape: &[usize], dy: &[T]) -> Result<Vec<T>> {
    let (n, c, h, w) = dims4(in_shape, "upsample2x")?;
    let (ty, tx) = (upsample_taps(h), upsample_taps(w));
    let (ho, wo) = (2 * h, 2 * w);
    let mut d = vec![0.0f64; n * c * h * w];
    for plane in 0..n * c {
        let src = &dy[plane * ho * wo..(plane + 1) * ho * wo];
        let dst = &mut d[plane * h * w..(plane + 1) * h * w];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let g = src[oy * wo + ox].as_f64();
                dst[y0 * w + x0] += g * (1.0 - ly) * (1.0 - lx);
                dst[y0 * w + x1] += g * (1.0 - ly) * lx;
                dst[y1 * w + x0] += g * ly * (1.0 - lx);
                dst[y1 * w + x1] += g * ly * lx;
            }
        }
    }
    Ok(d.into_iter().map(T::from_f64).collect())
}

pub(crate) fn batch_norm_backward<T: Real>(
    shape: &[usize],
    gamma: &[T],
    xhat: &[T],
    inv_std: &[f64],
    batch_stats: bool,
    dy: &[T],
) -> Result<BnGrads<T>> {
    let (n, c, h, w) = dims4(shape, "batch_norm")?;
    let plane = h * w;
    let m = (n * plane) as f64;
    let mut dx = vec![T::zero(); dy.len()];
    let mut dgamma = Vec::with_capacity(c);
    let mut dbeta = Vec::with_capacity(c);
    for ch in 0..c {
        let (mut sum_dy, mut sum_dy_xhat) = (0.0f64, 0.0f64);
        for b in 0..n {
            let off = (b * c + ch) * plane;
            for p in off..off + plane {
                let g = dy[p].as_f64();
                sum_dy += g;
                sum_dy_xhat += g * xhat[p].as_f64();
            }
        }
        dgamma.push(T::from_f64(sum_dy_xhat));
        dbeta.push(T::from_f64(sum_dy));
        let gam = gamma[ch].as_f64();
        let istd = inv_std[ch];
        for b in 0..n {
            let off = (b * c + ch) * plane;
            for p in off..off + plane {
                let g = dy[p].as_f64();
                let v = if batch_stats {
                    gam * istd * (g - sum_dy / m - xhat[p].as_f64() * sum_dy_xhat / m)
                } else {
                    gam * istd * g
                };
                dx[p] = T::from_f64(v);
            }
        }
    }
    Ok(BnGrads {
        input: dx,
        gamma: dgamma,
        beta: dbeta,
    })
}

impl<T: Real> Graph<T> {
    /// 2-D cross-correlation. `input` is `CHW` or `NCHW`, `weight` is
    /// `[C_out, C_in, k, k]`, `bias` is `[C_out]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let in_shape = self.shape(input).to_vec();
        let (n, c_in, h, w) = dims4(&in_shape, "conv2d")?;
        let (c_out, wc_in, k, k2) = match *self.shape(weight) {
            [a, b, c, d] => (a, b, c, d),
            ref s => {
                return Err(TensorError::Dimension {
                    op: "conv2d",
                    detail: format!("weight must be [C_out, C_in, k, k], got {s:?}"),
                })
            }
        };
        if wc_in != c_in || k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                expected: vec![c_out, c_in, k, k],
                got: self.shape(weight).to_vec(),
            });
        }
        if let Some(b) = bias {
            if self.shape(b) != [c_out] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d",
                    expected: vec![c_out],
                    got: self.shape(b).to_vec(),
                });
            }
        }
        let ho = conv2d_output_size(h, k, stride, padding)?;
        let wo = conv2d_output_size(w, k, stride, padding)?;
        let geom = ConvGeom {
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            padding,
            ho,
            wo,
        };
        let out = conv::forward(
            self.value(input).data(),
            n,
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            &geom,
        );
        let shape = if in_shape.len() == 3 {
            vec![c_out, ho, wo]
        } else {
            vec![n, c_out, ho, wo]
        };
        self.push(
            Tensor::new(shape, out)?,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            "conv2d",
        )
    }

    fn map_unary(&mut self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let v = self.value(a);
        Tensor::new(v.shape().to_vec(), v.data().iter().map(|&x| f(x)).collect())
            .expect("same shape")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.map_unary(a, |x| x.max(T::zero()));
        let signs = self.value(a).data().chunks(64).map(|chunk| {
            chunk
                .iter()
                .enumerate()
                .fold(0u64, |acc, (i, &x)| acc | (u64::from(x > T::zero()) << i))
        });
        let words: Vec<u64> = signs.collect();
        for w in words {
            self.mix_kinks(w);
        }
        self.push(out, Op::Relu(a), "relu")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.map_unary(a, sigmoid_scalar);
        self.push(out, Op::Sigmoid(a), "sigmoid")
    }

    /// `ln(1 + e^x)` in overflow-free form.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let out = self.map_unary(a, softplus_scalar);
        self.push(out, Op::Softplus(a), "softplus")
    }

    /// 2x2 max pooling with stride 2; spatial dims must be even.
    pub fn maxpool2x2(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (n, c, h, w) = dims4(&shape, "maxpool2x2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(TensorError::Dimension {
                op: "maxpool2x2",
                detail: format!("spatial dims must be even, got {h}x{w}"),
            });
        }
        let (ho, wo) = (h / 2, w / 2);
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best as u32);
                }
            }
        }
        for chunk in argmax.chunks(16) {
            let w = chunk.iter().fold(0u64, |acc, &i| acc.rotate_left(4) ^ u64::from(i));
            self.mix_kinks(w);
        }
        let mut out_shape = shape;
        let r = out_shape.len();
        out_shape[r - 2] = ho;
        out_shape[r - 1] = wo;
        self.push(Tensor::new(out_shape, out)?, Op::MaxPool2x2 { input: a, argmax }, "maxpool2x2")
    }

    /// Bilinear 2x upsampling with half-pixel centres (align_corners=false).
    pub fn upsample2x(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (n, c, h, w) = dims4(&shape, "upsample2x")?;
        let (ty, tx) = (upsample_taps(h), upsample_taps(w));
        let (ho, wo) = (2 * h, 2 * w);
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let src = &x[plane * h * w..(plane + 1) * h * w];
            for &(y0, y1, ly) in &ty {
                for &(x0, x1, lx) in &tx {
                    let top = src[y0 * w + x0].as_f64() * (1.0 - lx) + src[y0 * w + x1].as_f64() * lx;
                    let bot = src[y1 * w + x0].as_f64() * (1.0 - lx) + src[y1 * w + x1].as_f64() * lx;
                    out.push(T::from_f64(top * (1.0 - ly) + bot * ly));
                }
            }
        }
        let mut out_shape = shape;
        let r = out_shape.len();
        out_shape[r - 2] = ho;
        out_shape[r - 1] = wo;
        self.push(Tensor::new(out_shape, out)?, Op::Upsample2x(a), "upsample2x")
    }

    /// Batch normalization over `N, H, W` using the current batch's
    /// statistics. Returns the output and the statistics for running-average
    /// updates.
    pub fn batch_norm_train(
        &mut self,
        a: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BnBatchStats)> {
        let shape = self.shape(a).to_vec();
        let (n, c, h, w) = dims4(&shape, "batch_norm")?;
        self.check_channel_vec(gamma, c)?;
        self.check_channel_vec(beta, c)?;
        let plane = h * w;
        let m = n * plane;
        let x = self.value(a).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut s = 0.0;
            for b in 0..n {
                let off = (b * c + ch) * plane;
                s += x[off..off + plane].iter().map(|v| v.as_f64()).sum::<f64>();
            }
            let mu = s / m as f64;
            let mut ss = 0.0;
            for b in 0..n {
                let off = (b * c + ch) * plane;
                ss += x[off..off + plane]
                    .iter()
                    .map(|v| {
                        let d = v.as_f64() - mu;
                        d * d
                    })
                    .sum::<f64>();
            }
            mean[ch] = mu;
            var[ch] = ss / m as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let var_unbiased = var
            .iter()
            .map(|v| if m > 1 { v * m as f64 / (m - 1) as f64 } else { *v })
            .collect();
        let (xhat, out) = self.bn_apply(a, gamma, beta, &mean, &inv_std, (n, c, plane));
        let node = self.push(
            Tensor::new(shape, out)?,
            Op::BatchNorm {
                input: a,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: true,
            },
            "batch_norm",
        )?;
        Ok((node, BnBatchStats { mean, var_unbiased }))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        a: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: f64,
    ) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (n, c, h, w) = dims4(&shape, "batch_norm")?;
        self.check_channel_vec(gamma, c)?;
        self.check_channel_vec(beta, c)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(TensorError::ShapeMismatch {
                op: "batch_norm",
                expected: vec![c],
                got: vec![running_mean.len()],
            });
        }
        let mean: Vec<f64> = running_mean.iter().map(|v| v.as_f64()).collect();
        let inv_std: Vec<f64> = running_var
            .iter()
            .map(|v| 1.0 / (v.as_f64() + eps).sqrt())
            .collect();
        let (xhat, out) = self.bn_apply(a, gamma, beta, &mean, &inv_std, (n, c, h * w));
        self.push(
            Tensor::new(shape, out)?,
            Op::BatchNorm {
                input: a,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: false,
            },
            "batch_norm",
        )
    }

    fn check_channel_vec(&self, v: Var, c: usize) -> Result<()> {
        if self.shape(v) != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "batch_norm",
                expected: vec![c],
                got: self.shape(v).to_vec(),
            });
        }
        Ok(())
    }

    fn bn_apply(
        &self,
        a: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: &[f64],
        (n, c, plane): (usize, usize, usize),
    ) -> (Vec<T>, Vec<T>) {
        let x = self.value(a).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = Vec::with_capacity(x.len());
        let mut out = Vec::with_capacity(x.len());
        for bi in 0..n {
            for ch in 0..c {
                let off = (bi * c + ch) * plane;
                let (gm, bt) = (g[ch].as_f64(), b[ch].as_f64());
                for v in &x[off..off + plane] {
                    let xh = (v.as_f64() - mean[ch]) * inv_std[ch];
                    xhat.push(T::from_f64(xh));
                    out.push(T::from_f64(gm * xh + bt));
                }
            }
        }
        (xhat, out)
    }

    /// Inverted dropout. With `training` off, or `p == 0`, the input handle
    /// is returned unchanged.
    pub fn dropout<R: RngCore + ?Sized>(
        &mut self,
        a: Var,
        p: f64,
        rng: &mut R,
        training: bool,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Config {
                op: "dropout",
                detail: format!("probability must lie in [0, 1), got {p}"),
            });
        }
        if !training || p == 0.0 {
            return Ok(a);
        }
        let scale = T::from_f64(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(a).len())
            .map(|_| {
                let u = f64::from(rng.next_u32() >> 8) * (1.0 / (1u32 << 24) as f64);
                if u >= p {
                    scale
                } else {
                    T::zero()
                }
            })
            .collect();
        let v = self.value(a);
        let out = Tensor::new(
            v.shape().to_vec(),
            v.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect(),
        )?;
        self.push(out, Op::Dropout { input: a, mask }, "dropout")
    }

    /// Concatenate along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (na, ca, ha, wa) = dims4(&sa, "concat_channels")?;
        let (nb, cb, hb, wb) = dims4(&sb, "concat_channels")?;
        if sa.len() != sb.len() || na != nb || ha != hb || wa != wb {
            return Err(TensorError::ShapeMismatch {
                op: "concat_channels",
                expected: sa,
                got: sb,
            });
        }
        let plane = ha * wa;
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(xa.len() + xb.len());
        for n in 0..na {
            out.extend_from_slice(&xa[n * ca * plane..(n + 1) * ca * plane]);
            out.extend_from_slice(&xb[n * cb * plane..(n + 1) * cb * plane]);
        }
        let mut shape = sa;
        let r = shape.len();
        shape[r - 3] = ca + cb;
        self.push(Tensor::new(shape, out)?, Op::ConcatChannels(a, b), "concat_channels")
    }

    /// Channels `start .. start + len`.
    pub fn slice_channels(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (n, c, h, w) = dims4(&shape, "slice_channels")?;
        if len == 0 || start + len > c {
            return Err(TensorError::Dimension {
                op: "slice_channels",
                detail: format!("range {start}..{} outside {c} channels", start + len),
            });
        }
        let plane = h * w;
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(n * len * plane);
        for b in 0..n {
            let off = (b * c + start) * plane;
            out.extend_from_slice(&x[off..off + len * plane]);
        }
        let mut out_shape = shape;
        let r = out_shape.len();
        out_shape[r - 3] = len;
        self.push(Tensor::new(out_shape, out)?, Op::SliceChannels { input: a, start }, "slice_channels")
    }

    /// Element `index` of the leading axis, keeping a leading axis of one.
    pub fn slice_batch(&mut self, a: Var, index: usize) -> Result<Var> {
        let t = self.value(a).batch_item(index)?;
        self.push(t, Op::SliceBatch { input: a, index }, "slice_batch")
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(TensorError::ShapeMismatch {
                op: name,
                expected: va.shape().to_vec(),
                got: vb.shape().to_vec(),
            });
        }
        Tensor::new(
            va.shape().to_vec(),
            va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect(),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        self.push(out, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        self.push(out, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        self.push(out, Op::Mul(a, b), "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "div", |x, y| x / y)?;
        self.push(out, Op::Div(a, b), "div")
    }

    /// `x * gate` with a single-channel `gate` broadcast over every channel
    /// of `x`.
    pub fn mul_channel_broadcast(&mut self, x: Var, gate: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sg = self.shape(gate).to_vec();
        let (n, c, h, w) = dims4(&sx, "mul_channel_broadcast")?;
        let (ng, cg, hg, wg) = dims4(&sg, "mul_channel_broadcast")?;
        if sx.len() != sg.len() || ng != n || cg != 1 || hg != h || wg != w {
            let mut expected = sx.clone();
            let r = expected.len();
            expected[r - 3] = 1;
            return Err(TensorError::ShapeMismatch {
                op: "mul_channel_broadcast",
                expected,
                got: sg,
            });
        }
        let plane = h * w;
        let (xv, gv) = (self.value(x).data(), self.value(gate).data());
        let mut out = Vec::with_capacity(xv.len());
        for b in 0..n {
            let gp = &gv[b * plane..(b + 1) * plane];
            for ch in 0..c {
                let off = (b * c + ch) * plane;
                out.extend(xv[off..off + plane].iter().zip(gp).map(|(&v, &g)| v * g));
            }
        }
        self.push(Tensor::new(sx, out)?, Op::MulChannelBroadcast { input: x, gate }, "mul_channel_broadcast")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ct = T::from_f64(c);
        let out = self.map_unary(a, |x| x * ct);
        self.push(out, Op::Scale(a, c), "scale")
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let ct = T::from_f64(c);
        let out = self.map_unary(a, |x| x + ct);
        self.push(out, Op::AddScalar(a), "add_scalar")
    }

    /// `1 - a`, elementwise.
    pub fn one_minus(&mut self, a: Var) -> Result<Var> {
        let out = self.map_unary(a, |x| T::one() - x);
        // d(1 - a) = -da
        self.push(out, Op::Scale(a, -1.0), "one_minus")
    }

    pub fn powf(&mut self, a: Var, e: f64) -> Result<Var> {
        let et = T::from_f64(e);
        let out = self.map_unary(a, |x| x.powf(et));
        self.push(out, Op::Powf(a, e), "powf")
    }

    /// Sum of all elements (64-bit accumulation), as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().map(|v| v.as_f64()).sum();
        self.push(Tensor::scalar(T::from_f64(s)), Op::Sum(a), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let s: f64 = v.data().iter().map(|v| v.as_f64()).sum();
        let m = s / v.len() as f64;
        self.push(Tensor::scalar(T::from_f64(m)), Op::Mean(a), "mean")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Pcg32;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn fixed_points() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2], &[0.0, -3.0]));
        let s = g.sigmoid(x).unwrap();
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(s).data()[0], 0.5);
        assert_eq!(g.value(r).data()[1], 0.0);
    }

    #[test]
    fn all_ones_box_sum() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[1, 3, 3], 1.0));
        let w = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let b = g.constant(Tensor::zeros(&[1]));
        let y = g.conv2d(x, w, Some(b), 1, 1).unwrap();
        let v = g.value(y);
        assert_eq!(v.shape(), &[1, 3, 3]);
        assert_eq!(v.data()[4], 9.0);
        assert_eq!(v.data()[0], 4.0);
    }

    #[test]
    fn identity_kernel() {
        let mut g = Graph::<f32>::new();
        let data: Vec<f32> = (0..16).map(|i| i as f32 * 0.37 - 2.0).collect();
        let x = g.constant(Tensor::new(vec![1, 4, 4], data.clone()).unwrap());
        let w = g.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
        let b = g.constant(Tensor::zeros(&[1]));
        let y = g.conv2d(x, w, Some(b), 1, 0).unwrap();
        assert_eq!(g.value(y).data(), &data[..]);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[2, 4, 4]));
        let w = g.constant(Tensor::zeros(&[1, 3, 3, 3]));
        assert!(matches!(
            g.conv2d(x, w, None, 1, 1),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn maxpool_window() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = g.maxpool2x2(x).unwrap();
        assert_eq!(g.value(y).data(), &[4.0]);
        let odd = g.constant(Tensor::zeros(&[1, 3, 2]));
        assert!(g.maxpool2x2(odd).is_err());
    }

    #[test]
    fn upsample_constant_map() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::full(&[2, 3, 5], 1.75));
        let y = g.upsample2x(x).unwrap();
        assert_eq!(g.shape(y), &[2, 6, 10]);
        assert!(g.value(y).data().iter().all(|&v| v == 1.75));
    }

    #[test]
    fn upsample_matches_half_pixel_rule() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 1, 2], &[0.0, 4.0]));
        let y = g.upsample2x(x).unwrap();
        // centres at -0.25 (clamped), 0.25, 0.75, 1.25 (clamped to last);
        // the single row is repeated
        assert_eq!(g.value(y).data(), &[0.0, 1.0, 3.0, 4.0, 0.0, 1.0, 3.0, 4.0]);
    }

    #[test]
    fn dropout_off_is_identity() {
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::full(&[3, 4], 2.0));
        let mut rng = Pcg32::new(1);
        let y = g.dropout(x, 0.3, &mut rng, false).unwrap();
        assert_eq!(x, y);
        assert!(g.dropout(x, 1.0, &mut rng, true).is_err());
        assert!(g.dropout(x, -0.1, &mut rng, true).is_err());
    }

    #[test]
    fn dropout_keeps_expectation() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[10_000], 1.0));
        let mut rng = Pcg32::new(9);
        let y = g.dropout(x, 0.3, &mut rng, true).unwrap();
        let v = g.value(y).data();
        assert!(v.iter().all(|&e| e == 0.0 || (e - 1.0 / 0.7).abs() < 1e-12));
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        assert!((mean - 1.0).abs() < 0.03, "mean {mean}");
    }

    #[test]
    fn concat_channel_law() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::full(&[2, 3, 4, 5], 1.0));
        let b = g.constant(Tensor::full(&[2, 2, 4, 5], 2.0));
        let c = g.concat_channels(a, b).unwrap();
        assert_eq!(g.shape(c), &[2, 5, 4, 5]);
        let v = g.value(c).data();
        assert_eq!(v[3 * 20], 2.0);
        assert_eq!(v[5 * 20], 1.0);
        let bad = g.constant(Tensor::full(&[2, 2, 4, 4], 2.0));
        assert!(g.concat_channels(a, bad).is_err());
    }

    #[test]
    fn batch_norm_eval_uses_running_stats() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 1, 2], &[3.0, 5.0]));
        let gm = g.param(t(&[1], &[2.0]));
        let bt = g.param(t(&[1], &[1.0]));
        let y = g.batch_norm_eval(x, gm, bt, &[1.0], &[4.0], 0.0).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 5.0]);
    }

    #[test]
    fn batch_norm_train_standardizes() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2, 1, 1, 2], &[1.0, 2.0, 3.0, 6.0]));
        let gm = g.param(t(&[1], &[1.0]));
        let bt = g.param(t(&[1], &[0.0]));
        let (y, stats) = g.batch_norm_train(x, gm, bt, 0.0).unwrap();
        assert_eq!(stats.mean, vec![3.0]);
        let v = g.value(y).data();
        let mean: f64 = v.iter().sum::<f64>() / 4.0;
        let var: f64 = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
        // biased var 3.5 -> unbiased 14/3
        assert!((stats.var_unbiased[0] - 14.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::full(&[1], 0.0));
        let y = g.constant(Tensor::full(&[1], 0.0));
        assert!(matches!(g.div(x, y), Err(TensorError::NonFinite { .. })));
    }

    #[test]
    fn softplus_is_stable() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::new(vec![3], vec![-100.0, 0.0, 100.0]).unwrap());
        let y = g.softplus(x).unwrap();
        let v = g.value(y).data();
        assert!(v[0] >= 0.0 && v[0] < 1e-30);
        assert!((v[1] - std::f32::consts::LN_2).abs() < 1e-7);
        assert_eq!(v[2], 100.0);
    }
}

//! im2col convolution kernels.
//!
//! Columns and products are formed in `f64` and cast back to the tensor's
//! element type, so `f32` graphs get 64-bit partial sums.

use super::{Real, Result, TensorError};

/// Output extent of a convolution along one axis.
///
/// Uses floor division like the usual deep-learning convention; a stride-2
/// convolution with an odd kernel on an even extent would otherwise never be
/// admissible.
pub fn conv2d_output_size(input: usize, k: usize, stride: usize, padding: usize) -> Result<usize> {
    if k == 0 || k.is_multiple_of(2) {
        return Err(TensorError::Config {
            op: "conv2d",
            detail: format!("kernel size must be odd, got {k}"),
        });
    }
    if stride == 0 {
        return Err(TensorError::Config {
            op: "conv2d",
            detail: "stride must be positive".into(),
        });
    }
    let padded = input + 2 * padding;
    if padded < k {
        return Err(TensorError::Config {
            op: "conv2d",
            detail: format!("kernel {k} larger than padded input {padded}"),
        });
    }
    Ok((padded - k) / stride + 1)
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    #[inline]
    fn patch(&self) -> usize {
        self.c_in * self.k * self.k
    }

    #[inline]
    fn pixels(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [f64]) {
    let p = g.pixels();
    let pad = g.padding as isize;
    for ci in 0..g.c_in {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, out) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        *out = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize].as_f64()
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let p = g.pixels();
    let pad = g.padding as isize;
    for ci in 0..g.c_in {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `c[m,n] = beta * c + a[m,k] * b[k,n]` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the caller passes buffers whose extents cover the strided
    // index ranges; every call site below derives strides from the same
    // geometry that sized the buffers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn forward<T: Real>(
    x: &[T],
    batch: usize,
    weight: &[T],
    bias: Option<&[T]>,
    g: &ConvGeom,
) -> Vec<T> {
    let (kdim, p) = (g.patch(), g.pixels());
    let w64: Vec<f64> = weight.iter().map(|v| v.as_f64()).collect();
    let mut cols = vec![0.0; kdim * p];
    let mut acc = vec![0.0; g.c_out * p];
    let mut out = Vec::with_capacity(batch * g.c_out * p);
    let in_stride = g.c_in * g.h * g.w;
    for n in 0..batch {
        im2col(&x[n * in_stride..(n + 1) * in_stride], g, &mut cols);
        gemm(g.c_out, kdim, p, &w64, (kdim, 1), &cols, (p, 1), 0.0, &mut acc);
        for co in 0..g.c_out {
            let b = bias.map_or(0.0, |b| b[co].as_f64());
            out.extend(acc[co * p..(co + 1) * p].iter().map(|&v| T::from_f64(v + b)));
        }
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub(crate) fn backward<T: Real>(
    x: &[T],
    batch: usize,
    weight: &[T],
    dy: &[T],
    g: &ConvGeom,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let (need_x, need_w, need_b) = need;
    let (kdim, p) = (g.patch(), g.pixels());
    let in_stride = g.c_in * g.h * g.w;
    let out_stride = g.c_out * p;
    let w64: Vec<f64> = weight.iter().map(|v| v.as_f64()).collect();
    let mut cols = vec![0.0; kdim * p];
    let mut dcols = vec![0.0; kdim * p];
    let mut dy64 = vec![0.0; out_stride];
    let mut dw = vec![0.0; g.c_out * kdim];
    let mut db = vec![0.0; g.c_out];
    let mut dx = if need_x { Some(vec![0.0; batch * in_stride]) } else { None };

    for n in 0..batch {
        for (d, s) in dy64.iter_mut().zip(&dy[n * out_stride..(n + 1) * out_stride]) {
            *d = s.as_f64();
        }
        if need_b {
            for co in 0..g.c_out {
                db[co] += dy64[co * p..(co + 1) * p].iter().sum::<f64>();
            }
        }
        if need_w {
            im2col(&x[n * in_stride..(n + 1) * in_stride], g, &mut cols);
            // dW += dY . cols^T
            gemm(g.c_out, p, kdim, &dy64, (p, 1), &cols, (1, p), 1.0, &mut dw);
        }
        if let Some(dx) = dx.as_mut() {
            // dcols = W^T . dY
            gemm(kdim, g.c_out, p, &w64, (1, kdim), &dy64, (p, 1), 0.0, &mut dcols);
            col2im(&dcols, g, &mut dx[n * in_stride..(n + 1) * in_stride]);
        }
    }
    let cast = |v: Vec<f64>| v.into_iter().map(T::from_f64).collect::<Vec<T>>();
    ConvGrads {
        input: dx.map(cast),
        weight: need_w.then(|| cast(dw)),
        bias: need_b.then(|| cast(db)),
    }
}

//! Dense numeric kernels: convolutions, affine maps, masked softmax and the
//! GRU cell. No model semantics live here.
//!
//! Tensor-level entry points validate shapes and the finiteness invariant;
//! the slice-level `*_frame` / `*_step` kernels are the hot loops shared with
//! the streaming runtime and skip validation.

use crate::error::{AsdError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[inline]
fn axpy<S: Scalar>(a: S, x: &[S], y: &mut [S]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Output length of a 1-D convolution, or `None` when the padded input is
/// shorter than the kernel.
pub fn conv_output_len(len: usize, kernel: usize, pad_lo: usize, pad_hi: usize, stride: usize) -> Option<usize> {
    let padded = len + pad_lo + pad_hi;
    if stride == 0 || padded < kernel {
        None
    } else {
        Some((padded - kernel) / stride + 1)
    }
}

/// One output frame of a temporal convolution over `plane`-sized feature
/// maps. `taps[k]` is the input frame at kernel offset `k`, `None` for zero
/// padding. Weights are laid out `[K][C_in][C_out]`.
pub fn temporal_conv_step<S: Scalar>(
    taps: &[Option<&[S]>],
    weights: &[S],
    bias: &[S],
    c_in: usize,
    c_out: usize,
    plane: usize,
    out: &mut [S],
) {
    debug_assert_eq!(out.len(), c_out * plane);
    if plane == 1 {
        out.copy_from_slice(bias);
        for (k, tap) in taps.iter().enumerate() {
            let Some(frame) = tap else { continue };
            for (ci, &xv) in frame.iter().enumerate().take(c_in) {
                let row = &weights[(k * c_in + ci) * c_out..(k * c_in + ci + 1) * c_out];
                axpy(xv, row, out);
            }
        }
        return;
    }
    if plane < c_out {
        // small maps: accumulate along output channels for longer inner loops
        let mut acc = vec![S::zero(); c_out];
        for p in 0..plane {
            acc.copy_from_slice(bias);
            for (k, tap) in taps.iter().enumerate() {
                let Some(frame) = tap else { continue };
                for ci in 0..c_in {
                    let row = &weights[(k * c_in + ci) * c_out..(k * c_in + ci + 1) * c_out];
                    axpy(frame[ci * plane + p], row, &mut acc);
                }
            }
            for (co, &v) in acc.iter().enumerate() {
                out[co * plane + p] = v;
            }
        }
        return;
    }
    for co in 0..c_out {
        out[co * plane..(co + 1) * plane].fill(bias[co]);
    }
    for (k, tap) in taps.iter().enumerate() {
        let Some(frame) = tap else { continue };
        for ci in 0..c_in {
            let src = &frame[ci * plane..(ci + 1) * plane];
            for co in 0..c_out {
                let w = weights[(k * c_in + ci) * c_out + co];
                axpy(w, src, &mut out[co * plane..(co + 1) * plane]);
            }
        }
    }
}

/// Temporal convolution over `x: [T × C_in × ...]` (trailing axes are carried
/// through untouched). With `right_pad == 0` output `t` depends only on inputs
/// up to `t·stride + K − 1 − left_pad`.
pub fn temporal_conv<S: Scalar>(
    x: &Tensor<S>,
    weights: &Tensor<S>,
    bias: &Tensor<S>,
    left_pad: usize,
    right_pad: usize,
    stride: usize,
) -> Result<Tensor<S>> {
    const OP: &str = "temporal_conv";
    if x.rank() < 2 || weights.rank() != 3 {
        return Err(AsdError::shape(
            OP,
            format!("x {:?}, weights {:?}", x.shape(), weights.shape()),
        ));
    }
    let (k, c_in, c_out) = (weights.shape()[0], weights.shape()[1], weights.shape()[2]);
    if x.shape()[1] != c_in || bias.len() != c_out || k == 0 {
        return Err(AsdError::shape(
            OP,
            format!(
                "x {:?}, weights {:?}, bias {:?}",
                x.shape(),
                weights.shape(),
                bias.shape()
            ),
        ));
    }
    let t_in = x.rows();
    let t_out = conv_output_len(t_in, k, left_pad, right_pad, stride)
        .ok_or_else(|| AsdError::shape(OP, format!("input length {t_in} too short for kernel {k}")))?;
    let plane: usize = x.shape()[2..].iter().product();
    let mut shape = x.shape().to_vec();
    shape[0] = t_out;
    shape[1] = c_out;
    let mut out = Tensor::zeros(shape);
    let mut taps: Vec<Option<&[S]>> = Vec::with_capacity(k);
    for t in 0..t_out {
        taps.clear();
        for j in 0..k {
            let p = t * stride + j;
            taps.push(if p < left_pad || p - left_pad >= t_in {
                None
            } else {
                Some(x.row(p - left_pad))
            });
        }
        temporal_conv_step(&taps, weights.data(), bias.data(), c_in, c_out, plane, out.row_mut(t));
    }
    out.ensure_finite(OP)?;
    Ok(out)
}

/// Geometry of a per-frame 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub c_in: usize,
    pub c_out: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub pad: usize,
    pub stride: usize,
}

impl Conv2dGeometry {
    pub fn out_height(&self) -> usize {
        conv_output_len(self.height, self.kernel, self.pad, self.pad, self.stride).unwrap_or(0)
    }

    pub fn out_width(&self) -> usize {
        conv_output_len(self.width, self.kernel, self.pad, self.pad, self.stride).unwrap_or(0)
    }

    pub fn out_plane(&self) -> usize {
        self.out_height() * self.out_width()
    }
}

/// Cross-correlation of one `[C_in × H × W]` frame with `[C_out × C_in × K × K]`
/// weights. `scratch` is reused between calls to hold the unfolded input.
pub fn spatial_conv_frame<S: Scalar>(
    x: &[S],
    weights: &[S],
    bias: &[S],
    g: &Conv2dGeometry,
    scratch: &mut Vec<S>,
    out: &mut [S],
) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let plane = oh * ow;
    let taps = g.c_in * g.kernel * g.kernel;
    scratch.clear();
    scratch.resize(taps * plane, S::zero());
    for ci in 0..g.c_in {
        let src = &x[ci * g.height * g.width..(ci + 1) * g.height * g.width];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let r = (ci * g.kernel + ky) * g.kernel + kx;
                let dst = &mut scratch[r * plane..(r + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let row = &src[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[oy * ow + ox] = row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    if plane < g.c_out {
        // small maps: same per-output order, channels innermost
        let mut wt = vec![S::zero(); taps * g.c_out];
        for co in 0..g.c_out {
            for r in 0..taps {
                wt[r * g.c_out + co] = weights[co * taps + r];
            }
        }
        let mut acc = vec![S::zero(); g.c_out];
        for p in 0..plane {
            acc.copy_from_slice(&bias[..g.c_out]);
            for r in 0..taps {
                axpy(scratch[r * plane + p], &wt[r * g.c_out..(r + 1) * g.c_out], &mut acc);
            }
            for (co, &v) in acc.iter().enumerate() {
                out[co * plane + p] = v;
            }
        }
        return;
    }
    for co in 0..g.c_out {
        let dst = &mut out[co * plane..(co + 1) * plane];
        dst.fill(bias[co]);
        for r in 0..taps {
            axpy(weights[co * taps + r], &scratch[r * plane..(r + 1) * plane], dst);
        }
    }
}

/// Per-frame 2-D convolution over `x: [T × C_in × H × W]`; the time axis is
/// never mixed.
pub fn spatial_conv<S: Scalar>(
    x: &Tensor<S>,
    weights: &Tensor<S>,
    bias: &Tensor<S>,
    pad: usize,
    stride: usize,
) -> Result<Tensor<S>> {
    const OP: &str = "spatial_conv";
    if x.rank() != 4 || weights.rank() != 4 {
        return Err(AsdError::shape(
            OP,
            format!("x {:?}, weights {:?}", x.shape(), weights.shape()),
        ));
    }
    let ws = weights.shape();
    if ws[1] != x.shape()[1] || ws[2] != ws[3] || bias.len() != ws[0] {
        return Err(AsdError::shape(
            OP,
            format!("x {:?}, weights {:?}, bias {:?}", x.shape(), ws, bias.shape()),
        ));
    }
    let g = Conv2dGeometry {
        c_in: ws[1],
        c_out: ws[0],
        height: x.shape()[2],
        width: x.shape()[3],
        kernel: ws[2],
        pad,
        stride,
    };
    if stride == 0 || g.out_plane() == 0 {
        return Err(AsdError::shape(OP, format!("empty output for {g:?}")));
    }
    let t = x.rows();
    let mut out = Tensor::zeros(vec![t, g.c_out, g.out_height(), g.out_width()]);
    let mut scratch = Vec::new();
    for i in 0..t {
        spatial_conv_frame(x.row(i), weights.data(), bias.data(), &g, &mut scratch, out.row_mut(i));
    }
    out.ensure_finite(OP)?;
    Ok(out)
}

/// Affine map of one vector: `out = bias + x · W` with `W: [D_in × D_out]`.
pub fn dense_row<S: Scalar>(x: &[S], weights: &[S], bias: &[S], out: &mut [S]) {
    let d_out = bias.len();
    out.copy_from_slice(bias);
    for (i, &xv) in x.iter().enumerate() {
        axpy(xv, &weights[i * d_out..(i + 1) * d_out], out);
    }
}

/// Affine map over the last axis.
pub fn dense<S: Scalar>(x: &Tensor<S>, weights: &Tensor<S>, bias: &Tensor<S>) -> Result<Tensor<S>> {
    const OP: &str = "dense";
    let d_in = *x.shape().last().unwrap_or(&0);
    if weights.rank() != 2 || weights.shape()[0] != d_in || bias.len() != weights.shape()[1] || x.rank() == 0 {
        return Err(AsdError::shape(
            OP,
            format!(
                "x {:?}, weights {:?}, bias {:?}",
                x.shape(),
                weights.shape(),
                bias.shape()
            ),
        ));
    }
    let d_out = weights.shape()[1];
    let n = x.len() / d_in.max(1);
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = d_out;
    let mut out = Tensor::zeros(shape);
    for i in 0..n {
        dense_row(
            &x.data()[i * d_in..(i + 1) * d_in],
            weights.data(),
            bias.data(),
            &mut out.data_mut()[i * d_out..(i + 1) * d_out],
        );
    }
    out.ensure_finite(OP)?;
    Ok(out)
}

/// Softmax over the entries with `mask[i] == true`; masked entries come out as
/// exactly zero.
pub fn masked_softmax_slice<S: Scalar>(logits: &[S], mask: &[bool], out: &mut [S]) -> Result<()> {
    if logits.len() != mask.len() || out.len() != logits.len() {
        return Err(AsdError::shape(
            "masked_softmax",
            format!("logits {}, mask {}, out {}", logits.len(), mask.len(), out.len()),
        ));
    }
    let floor = S::min_value();
    let mut max = floor;
    let mut any = false;
    for (&l, &m) in logits.iter().zip(mask) {
        if m {
            any = true;
            if l > max {
                max = l;
            }
        }
    }
    if !any {
        return Err(AsdError::EmptyMaskRow);
    }
    let mut total = S::zero();
    for ((o, &l), &m) in out.iter_mut().zip(logits).zip(mask) {
        let v = if m { l } else { floor };
        *o = (v - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(AsdError::NonFinite("masked_softmax"));
    }
    Ok(())
}

pub fn masked_softmax<S: Scalar>(logits: &Tensor<S>, mask: &[bool]) -> Result<Tensor<S>> {
    let mut out = Tensor::zeros(logits.shape().to_vec());
    masked_softmax_slice(logits.data(), mask, out.data_mut())?;
    Ok(out)
}

#[inline]
pub fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

pub fn relu_in_place<S: Scalar>(x: &mut [S]) {
    for v in x {
        if *v < S::zero() {
            *v = S::zero();
        }
    }
}

pub fn relu<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let mut out = x.clone();
    relu_in_place(out.data_mut());
    out
}

/// Mean over each `plane`-sized channel slice of one `[C × plane]` frame.
pub fn global_avg_pool_frame<S: Scalar>(x: &[S], channels: usize, plane: usize, out: &mut [S]) {
    let inv = S::one() / S::from_usize(plane).unwrap();
    for (c, o) in out.iter_mut().enumerate().take(channels) {
        *o = x[c * plane..(c + 1) * plane].iter().copied().sum::<S>() * inv;
    }
}

/// `[T × C × H × W]` → `[T × C]`.
pub fn global_avg_pool<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    if x.rank() != 4 {
        return Err(AsdError::shape("global_avg_pool", format!("{:?}", x.shape())));
    }
    let (t, c) = (x.shape()[0], x.shape()[1]);
    let plane = x.shape()[2] * x.shape()[3];
    let mut out = Tensor::zeros(vec![t, c]);
    for i in 0..t {
        global_avg_pool_frame(x.row(i), c, plane, out.row_mut(i));
    }
    Ok(out)
}

/// Non-overlapping `factor × factor` mean pool of one `[C × H × W]` frame;
/// trailing rows/columns that do not fill a window are dropped.
pub fn avg_pool_frame<S: Scalar>(x: &[S], channels: usize, height: usize, width: usize, factor: usize, out: &mut [S]) {
    let (oh, ow) = (height / factor, width / factor);
    let inv = S::one() / S::from_usize(factor * factor).unwrap();
    for c in 0..channels {
        let src = &x[c * height * width..(c + 1) * height * width];
        let dst = &mut out[c * oh * ow..(c + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = S::zero();
                for dy in 0..factor {
                    let row = &src[(oy * factor + dy) * width + ox * factor..];
                    for &v in &row[..factor] {
                        acc += v;
                    }
                }
                dst[oy * ow + ox] = acc * inv;
            }
        }
    }
}

/// Layer normalization of one vector with learned gain and shift.
pub fn layer_norm_row<S: Scalar>(x: &[S], gain: &[S], shift: &[S], eps: S, out: &mut [S]) {
    let n = S::from_usize(x.len()).unwrap();
    let mean = x.iter().copied().sum::<S>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
    let inv = S::one() / (var + eps).sqrt();
    for (i, o) in out.iter_mut().enumerate() {
        *o = (x[i] - mean) * inv * gain[i] + shift[i];
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Parameters of one GRU cell. Input weights are `[D_in × H]`, recurrent
/// weights `[H × H]`, biases `[H]`.
#[derive(Debug, Clone)]
pub struct GruParams<S> {
    pub wz: Tensor<S>,
    pub wr: Tensor<S>,
    pub wh: Tensor<S>,
    pub uz: Tensor<S>,
    pub ur: Tensor<S>,
    pub uh: Tensor<S>,
    pub bz: Tensor<S>,
    pub br: Tensor<S>,
    pub bh: Tensor<S>,
}

impl<S: Scalar> GruParams<S> {
    pub fn input_dim(&self) -> usize {
        self.wz.shape()[0]
    }

    pub fn hidden_dim(&self) -> usize {
        self.bz.len()
    }

    fn check(&self, d_in: usize, d_h: usize) -> Result<()> {
        let ok = [&self.wz, &self.wr, &self.wh].iter().all(|w| w.shape() == [d_in, d_h])
            && [&self.uz, &self.ur, &self.uh].iter().all(|u| u.shape() == [d_h, d_h])
            && [&self.bz, &self.br, &self.bh].iter().all(|b| b.len() == d_h);
        if ok {
            Ok(())
        } else {
            Err(AsdError::shape(
                "gru_step",
                format!("params do not match D_in={d_in}, D_h={d_h}"),
            ))
        }
    }
}

/// One GRU update:
/// `z = σ(x·Wz + h·Uz + bz)`, `r = σ(x·Wr + h·Ur + br)`,
/// `h̃ = tanh(x·Wh + (r⊙h)·Uh + bh)`, `h' = (1−z)⊙h̃ + z⊙h`.
pub fn gru_step<S: Scalar>(x: &[S], h: &[S], params: &GruParams<S>) -> Result<Vec<S>> {
    let d_h = h.len();
    params.check(x.len(), d_h)?;
    let mut z = vec![S::zero(); d_h];
    let mut r = vec![S::zero(); d_h];
    let mut cand = vec![S::zero(); d_h];
    let mut tmp = vec![S::zero(); d_h];
    dense_row(x, params.wz.data(), params.bz.data(), &mut z);
    dense_row(h, params.uz.data(), &vec![S::zero(); d_h], &mut tmp);
    for (a, b) in z.iter_mut().zip(&tmp) {
        *a = sigmoid(*a + *b);
    }
    dense_row(x, params.wr.data(), params.br.data(), &mut r);
    dense_row(h, params.ur.data(), &vec![S::zero(); d_h], &mut tmp);
    for (a, b) in r.iter_mut().zip(&tmp) {
        *a = sigmoid(*a + *b);
    }
    let gated: Vec<S> = r.iter().zip(h).map(|(&ri, &hi)| ri * hi).collect();
    dense_row(x, params.wh.data(), params.bh.data(), &mut cand);
    dense_row(&gated, params.uh.data(), &vec![S::zero(); d_h], &mut tmp);
    let out: Vec<S> = (0..d_h)
        .map(|i| {
            let c = (cand[i] + tmp[i]).tanh();
            (S::one() - z[i]) * c + z[i] * h[i]
        })
        .collect();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(AsdError::NonFinite("gru_step"));
    }
    Ok(out)
}

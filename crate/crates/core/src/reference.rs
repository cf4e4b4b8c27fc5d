//! Slow full-sequence reference implementations used as ground truth.
//!
//! Everything here is written as plain index loops over the raw parameter
//! tensors. Nothing calls into `numerics`, `encoders` or `fusion`; only the
//! parameter container and configuration types are shared, so agreement with
//! the production path is evidence rather than tautology.
#![allow(clippy::needless_range_loop)]

use crate::encoders::TemporalPadding;
use crate::error::{AsdError, Result};
use crate::frontend::{FaceFrameSequence, MfccSequence};
use crate::fusion::{ContextBound, ContextConfig, ContextMask, FusionKind};
use crate::model_io::{ModelConfig, ParamSet, XorShift64Star};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

type Frames<S> = Vec<Vec<S>>;

fn n<S: Scalar>(v: usize) -> S {
    S::from_usize(v).unwrap()
}

fn tensor<'a, S: Scalar>(p: &'a ParamSet<S>, name: &str) -> Result<&'a [S]> {
    Ok(p.get(name)?.data())
}

/// `y_T = Σ_t softmax_t(Q_T·K_t/√d_head) V_t` for every head of layer
/// `layer` (1-based), applied directly to `x`; heads are concatenated,
/// giving `[n × d_model]` before the output projection.
pub fn bruteforce_attention<S: Scalar>(
    x: &Tensor<S>,
    mask: &ContextMask,
    params: &ParamSet<S>,
    layer: usize,
) -> Result<Tensor<S>> {
    let cfg = &params.config().fusion;
    let d = cfg.d_model;
    let rows = x.rows();
    if x.rank() != 2 || x.row_len() != d || mask.len() != rows {
        return Err(AsdError::shape(
            "bruteforce_attention",
            format!("x {:?}, mask n={}, d_model {d}", x.shape(), mask.len()),
        ));
    }
    let base = format!("fusion.layer{layer}");
    let project = |which: &str| -> Result<Frames<S>> {
        let w = tensor(params, &format!("{base}.{which}.weight"))?;
        let b = tensor(params, &format!("{base}.{which}.bias"))?;
        Ok((0..rows)
            .map(|t| {
                let mut y = b.to_vec();
                for i in 0..d {
                    let xi = x.data()[t * d + i];
                    for (yj, &wj) in y.iter_mut().zip(&w[i * d..(i + 1) * d]) {
                        *yj += xi * wj;
                    }
                }
                y
            })
            .collect())
    };
    let (q, k, v) = (project("q")?, project("k")?, project("v")?);
    let dh = d / cfg.heads;
    let scale = n::<S>(dh).sqrt();
    let mut out = Tensor::zeros(vec![rows, d]);
    for head in 0..cfg.heads {
        let off = head * dh;
        for tq in 0..rows {
            let mut logits: Vec<(usize, S)> = Vec::new();
            for tk in 0..rows {
                if mask.get(tq, tk) {
                    let mut dot = S::zero();
                    for i in 0..dh {
                        dot += q[tq][off + i] * k[tk][off + i];
                    }
                    logits.push((tk, dot / scale));
                }
            }
            if logits.is_empty() {
                return Err(AsdError::EmptyMaskRow);
            }
            let mut m = logits[0].1;
            for &(_, l) in &logits {
                if l > m {
                    m = l;
                }
            }
            let mut z = S::zero();
            for &(_, l) in &logits {
                z += (l - m).exp();
            }
            for &(tk, l) in &logits {
                let w = (l - m).exp() / z;
                for i in 0..dh {
                    out.data_mut()[tq * d + off + i] += w * v[tk][off + i];
                }
            }
        }
    }
    Ok(out)
}

fn causal_pads(padding: TemporalPadding, k: usize) -> (usize, usize) {
    match padding {
        TemporalPadding::Causal => (k - 1, 0),
        TemporalPadding::Symmetric => ((k - 1) / 2, (k - 1) / 2),
    }
}

fn relu<S: Scalar>(v: S) -> S {
    if v > S::zero() {
        v
    } else {
        S::zero()
    }
}

/// `frames[t][c·plane + p]`, weights `[K][C_in][C_out]`, stride 1, output
/// length equal to the input length.
#[allow(clippy::too_many_arguments)]
fn temporal_conv_ref<S: Scalar>(
    x: &Frames<S>,
    w: &[S],
    b: &[S],
    k: usize,
    c_in: usize,
    c_out: usize,
    plane: usize,
    left: usize,
) -> Frames<S> {
    let len = x.len() as isize;
    (0..x.len())
        .map(|t| {
            let mut y = vec![S::zero(); c_out * plane];
            for co in 0..c_out {
                for p in 0..plane {
                    y[co * plane + p] = b[co];
                }
            }
            for kk in 0..k {
                let src = t as isize + kk as isize - left as isize;
                if src < 0 || src >= len {
                    continue;
                }
                let xs = &x[src as usize];
                for ci in 0..c_in {
                    let xc = &xs[ci * plane..(ci + 1) * plane];
                    for co in 0..c_out {
                        let wv = w[(kk * c_in + ci) * c_out + co];
                        for (yv, &xv) in y[co * plane..(co + 1) * plane].iter_mut().zip(xc) {
                            *yv += wv * xv;
                        }
                    }
                }
            }
            y.into_iter().map(relu).collect()
        })
        .collect()
}

fn project_ref<S: Scalar>(x: &[S], w: &[S], b: &[S]) -> Vec<S> {
    let d_out = b.len();
    let mut y = b.to_vec();
    for (i, &xi) in x.iter().enumerate() {
        for (yj, &wj) in y.iter_mut().zip(&w[i * d_out..(i + 1) * d_out]) {
            *yj += xi * wj;
        }
    }
    y
}

fn visual_ref<S: Scalar>(faces: &Tensor<S>, params: &ParamSet<S>) -> Result<Frames<S>> {
    let e = &params.config().encoder;
    let side = e.face_size;
    if faces.rank() != 4 || faces.shape()[1..] != [1, side, side] {
        return Err(AsdError::shape("offline_forward", format!("faces {:?}", faces.shape())));
    }
    let pool = e.input_pool;
    let mut s = side / pool;
    let mut x: Frames<S> = (0..faces.rows())
        .map(|t| {
            let f = faces.row(t);
            let mut o = vec![S::zero(); s * s];
            for y in 0..s {
                for xx in 0..s {
                    let mut acc = S::zero();
                    for dy in 0..pool {
                        for dx in 0..pool {
                            acc += f[(y * pool + dy) * side + xx * pool + dx];
                        }
                    }
                    o[y * s + xx] = acc / n::<S>(pool * pool);
                }
            }
            o
        })
        .collect();
    let mut c_in = 1;
    let kk = e.spatial_kernel;
    let pad = kk / 2;
    for (bi, &c_out) in e.channels.iter().enumerate() {
        let stride = e.spatial_strides[bi];
        let so = (s + 2 * pad - kk) / stride + 1;
        let plane = so * so;
        let mut acc: Frames<S> = vec![vec![S::zero(); c_out * plane]; x.len()];
        for (ki, &k) in e.branch_kernels.iter().enumerate() {
            let base = format!("visual.block{}.branch{}", bi + 1, ki + 1);
            let sw = tensor(params, &format!("{base}.s_conv.weight"))?;
            let sb = tensor(params, &format!("{base}.s_conv.bias"))?;
            // weights regrouped as [tap][c_out], tap = (ci, ky, kx)
            let taps = c_in * kk * kk;
            let mut wt = vec![S::zero(); taps * c_out];
            for co in 0..c_out {
                for r in 0..taps {
                    wt[r * c_out + co] = sw[co * taps + r];
                }
            }
            let stage: Frames<S> = x
                .iter()
                .map(|f| {
                    let mut o = vec![S::zero(); c_out * plane];
                    let mut patch = vec![S::zero(); taps];
                    let mut acc = vec![S::zero(); c_out];
                    for oy in 0..so {
                        for ox in 0..so {
                            for ci in 0..c_in {
                                for ky in 0..kk {
                                    for kx in 0..kk {
                                        let iy = (oy * stride + ky) as isize - pad as isize;
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        let inside = iy >= 0 && ix >= 0 && iy < s as isize && ix < s as isize;
                                        patch[(ci * kk + ky) * kk + kx] = if inside {
                                            f[(ci * s + iy as usize) * s + ix as usize]
                                        } else {
                                            S::zero()
                                        };
                                    }
                                }
                            }
                            acc.copy_from_slice(sb);
                            for (r, &pv) in patch.iter().enumerate() {
                                for (a, &wv) in acc.iter_mut().zip(&wt[r * c_out..(r + 1) * c_out]) {
                                    *a += pv * wv;
                                }
                            }
                            for co in 0..c_out {
                                o[co * plane + oy * so + ox] = relu(acc[co]);
                            }
                        }
                    }
                    o
                })
                .collect();
            let tw = tensor(params, &format!("{base}.t_conv.weight"))?;
            let tb = tensor(params, &format!("{base}.t_conv.bias"))?;
            let (left, _) = causal_pads(e.padding, k);
            let y = temporal_conv_ref(&stage, tw, tb, k, c_out, c_out, plane, left);
            for (a, yt) in acc.iter_mut().zip(&y) {
                for (p, q) in a.iter_mut().zip(yt) {
                    *p += *q;
                }
            }
        }
        x = acc;
        c_in = c_out;
        s = so;
    }
    let plane = s * s;
    let pw = tensor(params, "visual.proj.weight")?;
    let pb = tensor(params, "visual.proj.bias")?;
    Ok(x.iter()
        .map(|f| {
            let pooled: Vec<S> = (0..c_in)
                .map(|c| {
                    let mut m = S::zero();
                    for p in 0..plane {
                        m += f[c * plane + p];
                    }
                    m / n::<S>(plane)
                })
                .collect();
            project_ref(&pooled, pw, pb)
        })
        .collect())
}

fn audio_ref<S: Scalar>(mfcc: &Tensor<S>, params: &ParamSet<S>) -> Result<Frames<S>> {
    let cfg = params.config();
    let e = &cfg.encoder;
    let mut c_in = cfg.frontend.n_mfcc;
    if mfcc.rank() != 2 || mfcc.row_len() != c_in {
        return Err(AsdError::shape("offline_forward", format!("mfcc {:?}", mfcc.shape())));
    }
    let mut x: Frames<S> = (0..mfcc.rows()).map(|t| mfcc.row(t).to_vec()).collect();
    let ks = e.audio_stage_kernel;
    for (bi, &c_out) in e.channels.iter().enumerate() {
        let stride = e.audio_strides[bi];
        let t_out = x.len() / stride;
        let mut acc: Frames<S> = vec![vec![S::zero(); c_out]; t_out];
        for (ki, &k) in e.branch_kernels.iter().enumerate() {
            let base = format!("audio.block{}.branch{}", bi + 1, ki + 1);
            let sw = tensor(params, &format!("{base}.s_conv.weight"))?;
            let sb = tensor(params, &format!("{base}.s_conv.bias"))?;
            // output j ends on input j·stride + stride − 1
            let stage: Frames<S> = (0..t_out)
                .map(|j| {
                    let mut v = sb.to_vec();
                    for kk in 0..ks {
                        let src = (j * stride + stride + kk) as isize - ks as isize;
                        if src < 0 {
                            continue;
                        }
                        for ci in 0..c_in {
                            let xv = x[src as usize][ci];
                            for (a, &wv) in v
                                .iter_mut()
                                .zip(&sw[(kk * c_in + ci) * c_out..(kk * c_in + ci + 1) * c_out])
                            {
                                *a += xv * wv;
                            }
                        }
                    }
                    v.into_iter().map(relu).collect()
                })
                .collect();
            let tw = tensor(params, &format!("{base}.t_conv.weight"))?;
            let tb = tensor(params, &format!("{base}.t_conv.bias"))?;
            let (left, _) = causal_pads(e.padding, k);
            let y = temporal_conv_ref(&stage, tw, tb, k, c_out, c_out, 1, left);
            for (a, yt) in acc.iter_mut().zip(&y) {
                for (p, q) in a.iter_mut().zip(yt) {
                    *p += *q;
                }
            }
        }
        x = acc;
        c_in = c_out;
    }
    let pw = tensor(params, "audio.proj.weight")?;
    let pb = tensor(params, "audio.proj.bias")?;
    Ok(x.iter().map(|f| project_ref(f, pw, pb)).collect())
}

fn layer_norm_ref<S: Scalar>(x: &[S], g: &[S], b: &[S]) -> Vec<S> {
    let len = n::<S>(x.len());
    let mut mean = S::zero();
    for &v in x {
        mean += v;
    }
    mean /= len;
    let mut var = S::zero();
    for &v in x {
        var += (v - mean) * (v - mean);
    }
    var /= len;
    let denom = (var + S::from_f64(1e-5).unwrap()).sqrt();
    (0..x.len()).map(|i| (x[i] - mean) / denom * g[i] + b[i]).collect()
}

fn in_band(ctx: ContextConfig, row: usize, col: usize) -> bool {
    let past_ok = match ctx.past {
        ContextBound::Frames(p) => col + p >= row,
        ContextBound::Unbounded => true,
    };
    let future_ok = match ctx.future {
        ContextBound::Frames(f) => col <= row + f,
        ContextBound::Unbounded => true,
    };
    past_ok && future_ok
}

fn transformer_ref<S: Scalar>(f_av: Frames<S>, ctx: ContextConfig, params: &ParamSet<S>) -> Result<Vec<S>> {
    let cfg = &params.config().fusion;
    let rows = f_av.len();
    let mut bits = vec![false; rows * rows];
    for r in 0..rows {
        for c in 0..rows {
            bits[r * rows + c] = in_band(ctx, r, c);
        }
    }
    let mask = ContextMask::from_bits(rows, bits)?;
    let mut x = f_av;
    for l in 1..=cfg.depth {
        let t = |name: &str| tensor(params, &format!("fusion.layer{l}.{name}"));
        let normed: Vec<S> = x
            .iter()
            .flat_map(|r| layer_norm_ref(r, t("norm1.weight").unwrap(), t("norm1.bias").unwrap()))
            .collect();
        let h = Tensor::new(vec![rows, cfg.d_model], normed)?;
        let attn = bruteforce_attention(&h, &mask, params, l)?;
        let (ow, ob) = (t("o.weight")?, t("o.bias")?);
        let (g2, b2) = (t("norm2.weight")?, t("norm2.bias")?);
        let (w1, b1, w2, bb2) = (t("ff1.weight")?, t("ff1.bias")?, t("ff2.weight")?, t("ff2.bias")?);
        x = (0..rows)
            .map(|r| {
                let o = project_ref(attn.row(r), ow, ob);
                let resid: Vec<S> = x[r].iter().zip(&o).map(|(&a, &b)| a + b).collect();
                let hidden: Vec<S> = project_ref(&layer_norm_ref(&resid, g2, b2), w1, b1)
                    .into_iter()
                    .map(relu)
                    .collect();
                let ff = project_ref(&hidden, w2, bb2);
                resid.iter().zip(&ff).map(|(&a, &b)| a + b).collect()
            })
            .collect();
    }
    let (cw, cb) = (
        tensor(params, "fusion.classifier.weight")?,
        tensor(params, "fusion.classifier.bias")?,
    );
    Ok(x.iter().map(|r| project_ref(r, cw, cb)[0]).collect())
}

fn gru_ref<S: Scalar>(f_av: Frames<S>, params: &ParamSet<S>) -> Result<Vec<S>> {
    let g = |name: &str| tensor(params, &format!("fusion.gru.{name}"));
    let hd = params.config().fusion.gru_hidden;
    let sig = |v: S| S::one() / (S::one() + (-v).exp());
    let (cw, cb) = (
        tensor(params, "fusion.classifier.weight")?,
        tensor(params, "fusion.classifier.bias")?,
    );
    let mut h = vec![S::zero(); hd];
    let mut logits = Vec::with_capacity(f_av.len());
    for x in &f_av {
        let gate = |w: &[S], u: &[S], b: &[S], hv: &[S], j: usize| {
            let mut s = b[j];
            for (i, &xi) in x.iter().enumerate() {
                s += xi * w[i * hd + j];
            }
            for (i, &hi) in hv.iter().enumerate() {
                s += hi * u[i * hd + j];
            }
            s
        };
        let z: Vec<S> = (0..hd)
            .map(|j| sig(gate(g("wz").unwrap(), g("uz").unwrap(), g("bz").unwrap(), &h, j)))
            .collect();
        let r: Vec<S> = (0..hd)
            .map(|j| sig(gate(g("wr").unwrap(), g("ur").unwrap(), g("br").unwrap(), &h, j)))
            .collect();
        let rh: Vec<S> = r.iter().zip(&h).map(|(&a, &b)| a * b).collect();
        h = (0..hd)
            .map(|j| {
                let c = gate(g("wh").unwrap(), g("uh").unwrap(), g("bh").unwrap(), &rh, j).tanh();
                (S::one() - z[j]) * c + z[j] * h[j]
            })
            .collect();
        logits.push(project_ref(&h, cw, cb)[0]);
    }
    Ok(logits)
}

/// Fused per-frame embeddings from the reference encoders.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceEmbeddings<S> {
    fused: Frames<S>,
}

impl<S: Scalar> ReferenceEmbeddings<S> {
    pub fn len(&self) -> usize {
        self.fused.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fused.is_empty()
    }

    /// `concat(e_a, e_v)` for frame `t`.
    pub fn frame(&self, t: usize) -> &[S] {
        &self.fused[t]
    }
}

/// Aligns a clip and runs both reference encoders over the full sequence.
pub fn offline_embeddings<S: Scalar>(
    x_a: &MfccSequence<S>,
    x_v: &FaceFrameSequence<S>,
    params: &ParamSet<S>,
) -> Result<ReferenceEmbeddings<S>> {
    let ratio = params.config().encoder.audio_downsample();
    let expected = 1.0 / (x_v.fps * x_a.hop_s);
    if (expected - ratio as f64).abs() > 1e-6 {
        return Err(AsdError::Alignment(format!(
            "{expected} MFCC frames per video frame, the model expects {ratio}"
        )));
    }
    let (t_a, t_v) = (x_a.frames.rows(), x_v.frames.rows());
    if t_a == 0 || t_v == 0 || t_a.abs_diff(ratio * t_v) > ratio || t_a < ratio {
        return Err(AsdError::Alignment(format!(
            "cannot align {t_a} MFCC frames with {t_v} video frames"
        )));
    }
    let t = t_v.min(t_a / ratio);
    let e_v = visual_ref(&x_v.frames.slice_rows(0, t), params)?;
    let e_a = audio_ref(&x_a.frames.slice_rows(0, t * ratio), params)?;
    let fused = e_a
        .into_iter()
        .zip(e_v)
        .map(|(mut a, v)| {
            a.extend(v);
            a
        })
        .collect();
    Ok(ReferenceEmbeddings { fused })
}

/// Fusion head over reference embeddings with the banded mask for `ctx`.
pub fn offline_fusion<S: Scalar>(
    emb: &ReferenceEmbeddings<S>,
    ctx: ContextConfig,
    params: &ParamSet<S>,
) -> Result<Vec<S>> {
    match params.config().fusion.kind {
        FusionKind::Transformer => transformer_ref(emb.fused.clone(), ctx, params),
        FusionKind::Gru => gru_ref(emb.fused.clone(), params),
    }
}

/// Training-graph-shaped forward pass over a whole clip: align, run both
/// encoders over the full sequence, concatenate, apply the fusion head with
/// the banded mask for `ctx`, classify. Returns one logit per aligned video
/// frame.
pub fn offline_forward<S: Scalar>(
    x_a: &MfccSequence<S>,
    x_v: &FaceFrameSequence<S>,
    ctx: ContextConfig,
    params: &ParamSet<S>,
) -> Result<Vec<S>> {
    offline_fusion(&offline_embeddings(x_a, x_v, params)?, ctx, params)
}

/// Deterministic random clip of `frames` video frames for the model's
/// geometry: MFCCs uniform in ±3 and standardized faces uniform in ±2, drawn
/// from xorshift64* seeded with `seed`.
pub fn synthetic_clip<S: Scalar>(
    config: &ModelConfig,
    frames: usize,
    seed: u64,
) -> (MfccSequence<S>, FaceFrameSequence<S>) {
    let mut rng = XorShift64Star::new(seed);
    let ratio = config.encoder.audio_downsample();
    let n_mfcc = config.frontend.n_mfcc;
    let side = config.encoder.face_size;
    let mfcc: Vec<S> = (0..frames * ratio * n_mfcc)
        .map(|_| S::from_f64_lossy(rng.next_uniform(-3.0, 3.0)))
        .collect();
    let faces: Vec<S> = (0..frames * side * side)
        .map(|_| S::from_f64_lossy(rng.next_uniform(-2.0, 2.0)))
        .collect();
    (
        MfccSequence {
            frames: Tensor::new(vec![frames * ratio, n_mfcc], mfcc).expect("sized"),
            hop_s: config.frontend.hop_s,
            window_s: config.frontend.window_s,
        },
        FaceFrameSequence {
            frames: Tensor::new(vec![frames, 1, side, side], faces).expect("sized"),
            fps: config.frontend.fps,
        },
    )
}

/// Outcome of comparing two logit streams.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompareReport {
    pub max_abs_diff: f64,
    /// Frame holding the largest difference.
    pub argmax_frame: usize,
    pub frames: usize,
    pub tol: f64,
    pub pass: bool,
}

/// Frame-by-frame comparison; a length mismatch or a non-finite value fails.
pub fn compare_streams<S: Scalar>(a: &[S], b: &[S], tol: f64) -> CompareReport {
    let mut worst = 0.0f64;
    let mut arg = 0;
    let mut finite = true;
    for (i, (&x, &y)) in a.iter().zip(b).enumerate() {
        let d = (x.to_f64_lossy() - y.to_f64_lossy()).abs();
        if !d.is_finite() {
            finite = false;
            worst = f64::INFINITY;
            arg = i;
            break;
        }
        if d > worst {
            worst = d;
            arg = i;
        }
    }
    if a.len() != b.len() && finite {
        arg = a.len().min(b.len());
        worst = f64::INFINITY;
    }
    CompareReport {
        max_abs_diff: worst,
        argmax_frame: arg,
        frames: a.len().min(b.len()),
        tol,
        pass: finite && a.len() == b.len() && worst <= tol,
    }
}

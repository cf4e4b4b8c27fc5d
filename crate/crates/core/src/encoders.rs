//! Causal audio and visual encoders.
//!
//! Each encoder is a stack of two-branch blocks. A branch is a per-frame
//! stage convolution followed by a temporal convolution; branch outputs are
//! summed. In causal mode every temporal convolution is left-padded by
//! `K − 1` (or `K − stride` when strided), so encoder row `t` never sees input
//! from after video frame `t`.

use serde::{Deserialize, Serialize};

use crate::error::{AsdError, Result};
use crate::model_io::ParamSet;
use crate::numerics::{
    avg_pool_frame, dense, dense_row, global_avg_pool_frame, relu_in_place, spatial_conv_frame, temporal_conv,
    temporal_conv_step, Conv2dGeometry,
};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemporalPadding {
    /// Left-only padding; no future context.
    Causal,
    /// `(K−1)/2` on both sides. Not streamable.
    Symmetric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Temporal kernel of each branch.
    pub branch_kernels: Vec<usize>,
    /// Output channels of each block; its length is the block count.
    pub channels: Vec<usize>,
    /// Width `D_m` of each modality embedding.
    pub embed_dim: usize,
    /// Side of the square face crop fed to the visual encoder.
    pub face_size: usize,
    /// Mean-pool factor applied to face crops before the first block.
    pub input_pool: usize,
    pub spatial_kernel: usize,
    /// Spatial stride of each visual block's stage convolution.
    pub spatial_strides: Vec<usize>,
    /// Kernel of the audio stage convolution (runs along the 100 Hz axis).
    pub audio_stage_kernel: usize,
    /// Temporal stride of each audio block's stage convolution.
    pub audio_strides: Vec<usize>,
    pub padding: TemporalPadding,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            branch_kernels: vec![3, 5],
            channels: vec![32, 64, 128],
            embed_dim: 128,
            face_size: 112,
            input_pool: 4,
            spatial_kernel: 3,
            spatial_strides: vec![2, 2, 2],
            audio_stage_kernel: 3,
            audio_strides: vec![2, 2, 1],
            padding: TemporalPadding::Causal,
        }
    }
}

impl EncoderConfig {
    pub fn n_blocks(&self) -> usize {
        self.channels.len()
    }

    pub fn audio_downsample(&self) -> usize {
        self.audio_strides.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(AsdError::Config(m));
        let n = self.n_blocks();
        if n == 0 || self.spatial_strides.len() != n || self.audio_strides.len() != n {
            return bad(format!(
                "{n} blocks need {n} spatial and audio strides, got {} and {}",
                self.spatial_strides.len(),
                self.audio_strides.len()
            ));
        }
        if self.branch_kernels.is_empty() || self.branch_kernels.iter().any(|&k| k == 0 || k % 2 == 0) {
            return bad("branch kernels must be odd and positive".into());
        }
        if self.channels.contains(&0) || self.embed_dim == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.spatial_kernel.is_multiple_of(2) || self.spatial_strides.contains(&0) {
            return bad("spatial kernel must be odd and strides positive".into());
        }
        if self
            .audio_strides
            .iter()
            .any(|&s| s == 0 || s > self.audio_stage_kernel)
        {
            return bad("audio strides must be in 1..=audio_stage_kernel".into());
        }
        if self.input_pool == 0 || self.face_size < self.input_pool {
            return bad("input pool must divide into the face size".into());
        }
        if self.visual_planes().last().copied().unwrap_or(0) == 0 {
            return bad("face size too small for the spatial schedule".into());
        }
        Ok(())
    }

    /// Temporal pads `(left, right)` for a stride-1 kernel of size `k`.
    pub fn temporal_pads(&self, k: usize) -> (usize, usize) {
        match self.padding {
            TemporalPadding::Causal => (k - 1, 0),
            TemporalPadding::Symmetric => ((k - 1) / 2, (k - 1) / 2),
        }
    }

    /// Spatial side length entering each block, followed by the final side.
    pub fn visual_sides(&self) -> Vec<usize> {
        let mut sides = vec![self.face_size / self.input_pool];
        for &s in &self.spatial_strides {
            let prev = *sides.last().unwrap();
            let g = Conv2dGeometry {
                c_in: 1,
                c_out: 1,
                height: prev,
                width: prev,
                kernel: self.spatial_kernel,
                pad: self.spatial_kernel / 2,
                stride: s,
            };
            sides.push(g.out_height());
        }
        sides
    }

    fn visual_planes(&self) -> Vec<usize> {
        self.visual_sides().iter().map(|s| s * s).collect()
    }

    /// Frames of past context seen by one encoder output (per video frame for
    /// the visual encoder).
    pub fn visual_receptive_field(&self) -> (usize, usize) {
        let k = self.branch_kernels.iter().copied().max().unwrap_or(1);
        let (l, r) = self.temporal_pads(k);
        (self.n_blocks() * l, self.n_blocks() * r)
    }
}

/// Which encoder produced an embedding sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Audio,
    Visual,
    Fused,
}

/// One embedding row per video frame.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSequence<S> {
    /// `[T_v × D]`
    pub values: Tensor<S>,
    pub origin: Origin,
}

impl<S: Scalar> EmbeddingSequence<S> {
    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.values.row_len()
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Branch<S> {
    pub s_weight: Tensor<S>,
    pub s_bias: Tensor<S>,
    pub t_weight: Tensor<S>,
    pub t_bias: Tensor<S>,
    pub kernel: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct Block<S> {
    pub branches: Vec<Branch<S>>,
    pub c_in: usize,
    pub c_out: usize,
    /// Spatial stride (visual) or temporal stride of the stage conv (audio).
    pub stride: usize,
}

fn load_blocks<S: Scalar>(params: &ParamSet<S>, modality: &str, c_first: usize) -> Result<Vec<Block<S>>> {
    let e = &params.config().encoder;
    let strides = if modality == "visual" {
        &e.spatial_strides
    } else {
        &e.audio_strides
    };
    let mut c_in = c_first;
    let mut blocks = Vec::with_capacity(e.n_blocks());
    for (bi, &c_out) in e.channels.iter().enumerate() {
        let branches = e
            .branch_kernels
            .iter()
            .enumerate()
            .map(|(ki, &kernel)| {
                let base = format!("{modality}.block{}.branch{}", bi + 1, ki + 1);
                Ok(Branch {
                    s_weight: params.get(&format!("{base}.s_conv.weight"))?.clone(),
                    s_bias: params.get(&format!("{base}.s_conv.bias"))?.clone(),
                    t_weight: params.get(&format!("{base}.t_conv.weight"))?.clone(),
                    t_bias: params.get(&format!("{base}.t_conv.bias"))?.clone(),
                    kernel,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        blocks.push(Block {
            branches,
            c_in,
            c_out,
            stride: strides[bi],
        });
        c_in = c_out;
    }
    Ok(blocks)
}

#[derive(Debug, Clone)]
pub struct VisualEncoder<S> {
    pub(crate) config: EncoderConfig,
    pub(crate) blocks: Vec<Block<S>>,
    pub(crate) proj_weight: Tensor<S>,
    pub(crate) proj_bias: Tensor<S>,
    pub(crate) aux_weight: Tensor<S>,
    pub(crate) aux_bias: Tensor<S>,
}

impl<S: Scalar> VisualEncoder<S> {
    pub fn from_params(params: &ParamSet<S>) -> Result<Self> {
        Ok(VisualEncoder {
            config: params.config().encoder.clone(),
            blocks: load_blocks(params, "visual", 1)?,
            proj_weight: params.get("visual.proj.weight")?.clone(),
            proj_bias: params.get("visual.proj.bias")?.clone(),
            aux_weight: params.get("visual.aux.weight")?.clone(),
            aux_bias: params.get("visual.aux.bias")?.clone(),
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    fn geometry(&self, bi: usize, side: usize) -> Conv2dGeometry {
        let b = &self.blocks[bi];
        Conv2dGeometry {
            c_in: b.c_in,
            c_out: b.c_out,
            height: side,
            width: side,
            kernel: self.config.spatial_kernel,
            pad: self.config.spatial_kernel / 2,
            stride: b.stride,
        }
    }

    /// Full-sequence forward pass over `[T × 1 × H × W]` face frames.
    pub fn forward(&self, faces: &Tensor<S>) -> Result<EmbeddingSequence<S>> {
        let cfg = &self.config;
        let side = cfg.face_size;
        if faces.rank() != 4 || faces.shape()[1..] != [1, side, side] || faces.rows() == 0 {
            return Err(AsdError::shape(
                "visual_forward",
                format!("expected [T, 1, {side}, {side}], got {:?}", faces.shape()),
            ));
        }
        let t = faces.rows();
        let sides = cfg.visual_sides();
        let mut x = Tensor::zeros(vec![t, 1, sides[0], sides[0]]);
        for i in 0..t {
            avg_pool_frame(faces.row(i), 1, side, side, cfg.input_pool, x.row_mut(i));
        }
        let mut scratch = Vec::new();
        for (bi, block) in self.blocks.iter().enumerate() {
            let g = self.geometry(bi, sides[bi]);
            let plane = g.out_plane();
            let mut acc: Option<Tensor<S>> = None;
            for br in &block.branches {
                let mut s = Tensor::zeros(vec![t, g.c_out, g.out_height(), g.out_width()]);
                for i in 0..t {
                    spatial_conv_frame(
                        x.row(i),
                        br.s_weight.data(),
                        br.s_bias.data(),
                        &g,
                        &mut scratch,
                        s.row_mut(i),
                    );
                }
                relu_in_place(s.data_mut());
                let (lp, rp) = cfg.temporal_pads(br.kernel);
                let mut y = temporal_conv(&s, &br.t_weight, &br.t_bias, lp, rp, 1)?;
                relu_in_place(y.data_mut());
                acc = Some(match acc {
                    None => y,
                    Some(mut a) => {
                        for (p, q) in a.data_mut().iter_mut().zip(y.data()) {
                            *p += *q;
                        }
                        a
                    }
                });
            }
            x = acc.expect("at least one branch");
            debug_assert_eq!(x.row_len(), block.c_out * plane);
        }
        let c = self.blocks.last().unwrap().c_out;
        let plane = sides.last().unwrap().pow(2);
        let mut pooled = Tensor::zeros(vec![t, c]);
        for i in 0..t {
            global_avg_pool_frame(x.row(i), c, plane, pooled.row_mut(i));
        }
        let values = dense(&pooled, &self.proj_weight, &self.proj_bias)?;
        Ok(EmbeddingSequence {
            values,
            origin: Origin::Visual,
        })
    }

    /// Raw per-frame logit of the visual-only auxiliary head.
    pub fn aux_scores(&self, e_v: &EmbeddingSequence<S>) -> Result<Vec<S>> {
        if e_v.origin != Origin::Visual {
            return Err(AsdError::Input(format!(
                "auxiliary head needs visual embeddings, got {:?}",
                e_v.origin
            )));
        }
        Ok(dense(&e_v.values, &self.aux_weight, &self.aux_bias)?.into_data())
    }

    pub(crate) fn aux_row(&self, e_v: &[S]) -> S {
        let mut out = [S::zero()];
        dense_row(e_v, self.aux_weight.data(), self.aux_bias.data(), &mut out);
        out[0]
    }
}

#[derive(Debug, Clone)]
pub struct AudioEncoder<S> {
    pub(crate) config: EncoderConfig,
    pub(crate) stage_kernel: usize,
    pub(crate) blocks: Vec<Block<S>>,
    pub(crate) proj_weight: Tensor<S>,
    pub(crate) proj_bias: Tensor<S>,
}

impl<S: Scalar> AudioEncoder<S> {
    pub fn from_params(params: &ParamSet<S>) -> Result<Self> {
        let cfg = params.config();
        Ok(AudioEncoder {
            config: cfg.encoder.clone(),
            stage_kernel: cfg.encoder.audio_stage_kernel,
            blocks: load_blocks(params, "audio", cfg.frontend.n_mfcc)?,
            proj_weight: params.get("audio.proj.weight")?.clone(),
            proj_bias: params.get("audio.proj.bias")?.clone(),
        })
    }

    /// Full-sequence forward pass over `[T_a × n_mfcc]`; yields `T_a / R`
    /// rows where `R` is the product of the block strides.
    pub fn forward(&self, mfcc: &Tensor<S>) -> Result<EmbeddingSequence<S>> {
        let r = self.config.audio_downsample();
        let c_first = self.blocks[0].c_in;
        if mfcc.rank() != 2 || mfcc.shape()[1] != c_first || mfcc.rows() == 0 {
            return Err(AsdError::shape(
                "audio_forward",
                format!("expected [T_a, {c_first}], got {:?}", mfcc.shape()),
            ));
        }
        if !mfcc.rows().is_multiple_of(r) {
            return Err(AsdError::Input(format!(
                "{} MFCC frames is not a multiple of {r}",
                mfcc.rows()
            )));
        }
        let mut x = mfcc.clone();
        for block in &self.blocks {
            let mut acc: Option<Tensor<S>> = None;
            for br in &block.branches {
                let mut s = temporal_conv(
                    &x,
                    &br.s_weight,
                    &br.s_bias,
                    self.stage_kernel - block.stride,
                    0,
                    block.stride,
                )?;
                relu_in_place(s.data_mut());
                let (lp, rp) = self.config.temporal_pads(br.kernel);
                let mut y = temporal_conv(&s, &br.t_weight, &br.t_bias, lp, rp, 1)?;
                relu_in_place(y.data_mut());
                acc = Some(match acc {
                    None => y,
                    Some(mut a) => {
                        for (p, q) in a.data_mut().iter_mut().zip(y.data()) {
                            *p += *q;
                        }
                        a
                    }
                });
            }
            x = acc.expect("at least one branch");
        }
        debug_assert_eq!(x.rows(), mfcc.rows() / r);
        let values = dense(&x, &self.proj_weight, &self.proj_bias)?;
        Ok(EmbeddingSequence {
            values,
            origin: Origin::Audio,
        })
    }
}

/// Streaming state of one temporal convolution: the last `K − 1` inputs,
/// zero-filled at start (the same zeros the offline pass pads with).
#[derive(Debug, Clone)]
pub(crate) struct ConvTail<S> {
    frames: Vec<Vec<S>>,
    head: usize,
    kernel: usize,
    stride: usize,
    /// Padded inputs consumed so far, including the virtual left padding.
    received: usize,
}

impl<S: Scalar> ConvTail<S> {
    pub fn new(kernel: usize, stride: usize, left_pad: usize, frame_len: usize) -> Self {
        ConvTail {
            frames: vec![vec![S::zero(); frame_len]; kernel.saturating_sub(1)],
            head: 0,
            kernel,
            stride,
            received: left_pad,
        }
    }

    pub fn bytes(&self) -> usize {
        self.frames.iter().map(|f| f.len() * S::BYTES).sum()
    }

    /// Feeds one input frame; writes an output frame and returns `true` when
    /// the stride schedule produces one.
    #[allow(clippy::too_many_arguments)]
    pub fn push(
        &mut self,
        frame: &[S],
        weights: &[S],
        bias: &[S],
        c_in: usize,
        c_out: usize,
        plane: usize,
        out: &mut [S],
    ) -> bool {
        self.received += 1;
        let k = self.kernel;
        let emit = self.received >= k && (self.received - k).is_multiple_of(self.stride);
        if emit {
            let n = self.frames.len();
            let mut taps: Vec<Option<&[S]>> = (0..n)
                .map(|i| Some(self.frames[(self.head + i) % n].as_slice()))
                .collect();
            taps.push(Some(frame));
            temporal_conv_step(&taps, weights, bias, c_in, c_out, plane, out);
        }
        if !self.frames.is_empty() {
            let n = self.frames.len();
            self.frames[self.head].copy_from_slice(frame);
            self.head = (self.head + 1) % n;
        }
        emit
    }
}

/// Incremental visual encoder: one face frame in, one embedding out.
#[derive(Debug, Clone)]
pub(crate) struct VisualStream<S> {
    tails: Vec<Vec<ConvTail<S>>>,
    scratch: Vec<S>,
}

impl<S: Scalar> VisualStream<S> {
    pub fn new(enc: &VisualEncoder<S>) -> Self {
        let sides = enc.config.visual_sides();
        let tails = enc
            .blocks
            .iter()
            .enumerate()
            .map(|(bi, b)| {
                let plane = sides[bi + 1] * sides[bi + 1];
                b.branches
                    .iter()
                    .map(|br| ConvTail::new(br.kernel, 1, br.kernel - 1, b.c_out * plane))
                    .collect()
            })
            .collect();
        VisualStream {
            tails,
            scratch: Vec::new(),
        }
    }

    pub fn bytes(&self) -> usize {
        self.tails.iter().flatten().map(ConvTail::bytes).sum()
    }

    pub fn push(&mut self, enc: &VisualEncoder<S>, face: &[S], out: &mut [S]) {
        let cfg = &enc.config;
        let sides = cfg.visual_sides();
        let mut x = vec![S::zero(); sides[0] * sides[0]];
        avg_pool_frame(face, 1, cfg.face_size, cfg.face_size, cfg.input_pool, &mut x);
        for (bi, block) in enc.blocks.iter().enumerate() {
            let g = enc.geometry(bi, sides[bi]);
            let n = block.c_out * g.out_plane();
            let mut acc = vec![S::zero(); n];
            let mut s = vec![S::zero(); n];
            let mut y = vec![S::zero(); n];
            for (br, tail) in block.branches.iter().zip(&mut self.tails[bi]) {
                spatial_conv_frame(&x, br.s_weight.data(), br.s_bias.data(), &g, &mut self.scratch, &mut s);
                relu_in_place(&mut s);
                tail.push(
                    &s,
                    br.t_weight.data(),
                    br.t_bias.data(),
                    block.c_out,
                    block.c_out,
                    g.out_plane(),
                    &mut y,
                );
                relu_in_place(&mut y);
                for (a, v) in acc.iter_mut().zip(&y) {
                    *a += *v;
                }
            }
            x = acc;
        }
        let c = enc.blocks.last().unwrap().c_out;
        let plane = sides.last().unwrap().pow(2);
        let mut pooled = vec![S::zero(); c];
        global_avg_pool_frame(&x, c, plane, &mut pooled);
        dense_row(&pooled, enc.proj_weight.data(), enc.proj_bias.data(), out);
    }
}

/// Incremental audio encoder: `R` MFCC frames in, one embedding out.
#[derive(Debug, Clone)]
pub(crate) struct AudioStream<S> {
    /// Per block, per branch: stage-conv tail and temporal-conv tail.
    tails: Vec<Vec<(ConvTail<S>, ConvTail<S>)>>,
}

impl<S: Scalar> AudioStream<S> {
    pub fn new(enc: &AudioEncoder<S>) -> Self {
        let tails = enc
            .blocks
            .iter()
            .map(|b| {
                b.branches
                    .iter()
                    .map(|br| {
                        (
                            ConvTail::new(enc.stage_kernel, b.stride, enc.stage_kernel - b.stride, b.c_in),
                            ConvTail::new(br.kernel, 1, br.kernel - 1, b.c_out),
                        )
                    })
                    .collect()
            })
            .collect();
        AudioStream { tails }
    }

    pub fn bytes(&self) -> usize {
        self.tails.iter().flatten().map(|(a, b)| a.bytes() + b.bytes()).sum()
    }

    /// Feeds one MFCC frame through the stack; returns the embedding when the
    /// last block produces a row.
    fn feed(&mut self, enc: &AudioEncoder<S>, mfcc: &[S], out: &mut [S]) -> bool {
        let mut x = mfcc.to_vec();
        for (block, tails) in enc.blocks.iter().zip(&mut self.tails) {
            let c = block.c_out;
            let mut acc = vec![S::zero(); c];
            let mut s = vec![S::zero(); c];
            let mut y = vec![S::zero(); c];
            let mut produced = false;
            for (br, (stage, temporal)) in block.branches.iter().zip(tails.iter_mut()) {
                if !stage.push(&x, br.s_weight.data(), br.s_bias.data(), block.c_in, c, 1, &mut s) {
                    continue;
                }
                relu_in_place(&mut s);
                temporal.push(&s, br.t_weight.data(), br.t_bias.data(), c, c, 1, &mut y);
                relu_in_place(&mut y);
                for (a, v) in acc.iter_mut().zip(&y) {
                    *a += *v;
                }
                produced = true;
            }
            if !produced {
                return false;
            }
            x = acc;
        }
        dense_row(&x, enc.proj_weight.data(), enc.proj_bias.data(), out);
        true
    }

    /// Feeds exactly `R` frames (`[R × n_mfcc]` flattened); exactly the last
    /// one yields the embedding.
    pub fn push(&mut self, enc: &AudioEncoder<S>, mfcc: &[S], out: &mut [S]) -> bool {
        let n = enc.blocks[0].c_in;
        let mut emitted = false;
        for frame in mfcc.chunks_exact(n) {
            emitted = self.feed(enc, frame, out);
        }
        emitted
    }
}

/// Past/future extent of an operator's dependence on its input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReceptiveField {
    pub past: usize,
    pub future: usize,
}

/// Probes `forward` by perturbing one input frame at a time around the centre
/// of `input` and reports the largest offsets whose perturbation moves the
/// centre output by more than `1e-7`.
pub fn measure_receptive_field<S, F>(forward: F, input: &Tensor<S>) -> Result<ReceptiveField>
where
    S: Scalar,
    F: Fn(&Tensor<S>) -> Result<Tensor<S>>,
{
    let t = input.rows();
    let centre = t / 2;
    let base = forward(input)?;
    let base_row = base.row(centre).to_vec();
    let threshold = S::from_f64_lossy(1e-7);
    let mut rf = ReceptiveField { past: 0, future: 0 };
    let mut rng = crate::model_io::XorShift64Star::new(0x5eed);
    for i in 0..t {
        if i == centre {
            continue;
        }
        let mut probe = input.clone();
        for v in probe.row_mut(i) {
            *v += S::from_f64_lossy(rng.next_uniform(0.5, 1.5));
        }
        let out = forward(&probe)?;
        let moved = out
            .row(centre)
            .iter()
            .zip(&base_row)
            .any(|(a, b)| (*a - *b).abs() > threshold);
        if moved {
            if i < centre {
                rf.past = rf.past.max(centre - i);
            } else {
                rf.future = rf.future.max(i - centre);
            }
        }
    }
    Ok(rf)
}

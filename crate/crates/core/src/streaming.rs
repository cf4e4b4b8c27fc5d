//! Online inference: one video frame and its `R` MFCC frames per push, with
//! bounded state.
//!
//! Encoders run incrementally over zero-initialized convolution tails. Fused
//! embeddings go into a ring holding the last `L·T1 + L·T2 + 1` frames; each
//! push recomputes the banded attention over that window (no key/value cache)
//! and emits the frame whose future context has just become complete.

use std::sync::Arc;
use std::time::Instant;

use crate::encoders::{AudioStream, VisualStream};
use crate::error::{AsdError, Result};
use crate::frontend::{align_streams, FaceFrameSequence, MfccSequence};
use crate::fusion::{classify_row, ContextConfig, ContextMask, Fusion};
use crate::model::AsdModel;
use crate::numerics::{gru_step, sigmoid};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Wall-clock cost of the push that produced an emission, in microseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StageTimings {
    pub frontend_us: u64,
    pub encoder_us: u64,
    pub attention_us: u64,
    pub total_us: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Emission<S> {
    pub frame_index: usize,
    pub logit: S,
    pub probability: S,
    pub visual_aux_probability: S,
    pub timings: StageTimings,
}

/// Bytes of session state by category.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemoryFootprint {
    pub conv_tails: usize,
    pub embed_ring: usize,
    /// Hidden state of a recurrent fusion head; zero for attention.
    pub recurrent_state: usize,
    /// Shared model parameters.
    pub params: usize,
    pub total: usize,
}

#[derive(Debug)]
pub struct StreamSession<S: Scalar> {
    model: Arc<AsdModel<S>>,
    ctx: ContextConfig,
    past: usize,
    future: usize,
    depth: usize,
    visual: VisualStream<S>,
    audio: AudioStream<S>,
    ring: Vec<S>,
    capacity: usize,
    d_model: usize,
    hidden: Option<Vec<S>>,
    frames_seen: usize,
    next_emit: usize,
    closed: bool,
    e_a: Vec<S>,
    e_v: Vec<S>,
}

fn micros(since: Instant) -> u64 {
    since.elapsed().as_micros() as u64
}

impl<S: Scalar> StreamSession<S> {
    /// Opens a session. Attention fusion needs a bounded context; a GRU head
    /// ignores `ctx` and emits every frame immediately.
    pub fn open(model: Arc<AsdModel<S>>, ctx: ContextConfig) -> Result<Self> {
        let depth = model.fusion.depth();
        let (past, future) = match (&model.fusion, ctx.past.frames(), ctx.future.frames()) {
            (Fusion::Gru(_), _, _) => (0, 0),
            (Fusion::Transformer(_), Some(p), Some(f)) => (p, f),
            _ => {
                return Err(AsdError::Session(format!(
                    "streaming needs a bounded context, got {ctx}"
                )))
            }
        };
        let capacity = depth * past + depth * future + 1;
        let d_model = 2 * model.config.encoder.embed_dim;
        let hidden = match &model.fusion {
            Fusion::Gru(g) => Some(vec![S::zero(); g.cell.hidden_dim()]),
            Fusion::Transformer(_) => None,
        };
        Ok(StreamSession {
            visual: VisualStream::new(&model.visual),
            audio: AudioStream::new(&model.audio),
            e_a: vec![S::zero(); model.config.encoder.embed_dim],
            e_v: vec![S::zero(); model.config.encoder.embed_dim],
            ring: vec![S::zero(); capacity * d_model],
            model,
            ctx,
            past,
            future,
            depth,
            capacity,
            d_model,
            hidden,
            frames_seen: 0,
            next_emit: 0,
            closed: false,
        })
    }

    pub fn context(&self) -> ContextConfig {
        self.ctx
    }

    pub fn ring_capacity(&self) -> usize {
        self.capacity
    }

    pub fn frames_seen(&self) -> usize {
        self.frames_seen
    }

    pub fn next_emit(&self) -> usize {
        self.next_emit
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    /// Frames between arrival and emission.
    pub fn lag(&self) -> usize {
        self.depth * self.future
    }

    pub fn memory_footprint(&self) -> MemoryFootprint {
        let conv_tails = self.visual.bytes() + self.audio.bytes();
        let embed_ring = self.ring.len() * S::BYTES;
        let recurrent_state = self.hidden.as_ref().map_or(0, |h| h.len() * S::BYTES);
        let params = self.model.param_bytes();
        MemoryFootprint {
            conv_tails,
            embed_ring,
            recurrent_state,
            params,
            total: conv_tails + embed_ring + recurrent_state + params,
        }
    }

    pub fn push(&mut self, face: &[S], mfcc: &[S]) -> Result<Vec<Emission<S>>> {
        self.push_timed(face, mfcc, 0)
    }

    /// Like [`push`](Self::push), recording `frontend_us` spent by the caller
    /// producing these inputs.
    pub fn push_timed(&mut self, face: &[S], mfcc: &[S], frontend_us: u64) -> Result<Vec<Emission<S>>> {
        if self.closed {
            return Err(AsdError::Session("push after flush".into()));
        }
        let cfg = &self.model.config;
        let face_len = cfg.encoder.face_size * cfg.encoder.face_size;
        let mfcc_len = cfg.encoder.audio_downsample() * cfg.frontend.n_mfcc;
        if face.len() != face_len {
            return Err(AsdError::Input(format!(
                "face frame has {} values, expected {face_len}",
                face.len()
            )));
        }
        if mfcc.len() != mfcc_len {
            return Err(AsdError::Input(format!(
                "got {} MFCC values, expected {mfcc_len} ({} frames)",
                mfcc.len(),
                cfg.encoder.audio_downsample()
            )));
        }
        let start = Instant::now();
        let model = Arc::clone(&self.model);
        model_push(
            &model,
            &mut self.visual,
            &mut self.audio,
            face,
            mfcc,
            &mut self.e_v,
            &mut self.e_a,
        )?;
        let slot = (self.frames_seen % self.capacity) * self.d_model;
        let half = self.d_model / 2;
        self.ring[slot..slot + half].copy_from_slice(&self.e_a);
        self.ring[slot + half..slot + self.d_model].copy_from_slice(&self.e_v);
        self.frames_seen += 1;
        let encoder_us = micros(start);

        let mut out = Vec::with_capacity(1);
        if self.frames_seen > self.lag() {
            let attn = Instant::now();
            let frame = self.frames_seen - 1 - self.lag();
            let mut e = self.emit(frame, self.frames_seen - 1)?;
            let attention_us = micros(attn);
            e.timings = StageTimings {
                frontend_us,
                encoder_us,
                attention_us,
                total_us: frontend_us + micros(start),
            };
            out.push(e);
            self.next_emit = frame + 1;
        }
        Ok(out)
    }

    /// Emits the remaining frames with whatever future context exists and
    /// closes the session.
    pub fn flush(&mut self) -> Result<Vec<Emission<S>>> {
        if self.closed {
            return Err(AsdError::Session("session already flushed".into()));
        }
        self.closed = true;
        let mut out = Vec::with_capacity(self.frames_seen - self.next_emit);
        for frame in self.next_emit..self.frames_seen {
            let start = Instant::now();
            let mut e = self.emit(frame, self.frames_seen - 1)?;
            let us = micros(start);
            e.timings = StageTimings {
                attention_us: us,
                total_us: us,
                ..StageTimings::default()
            };
            out.push(e);
        }
        self.next_emit = self.frames_seen;
        Ok(out)
    }

    fn ring_row(&self, frame: usize) -> &[S] {
        let slot = (frame % self.capacity) * self.d_model;
        &self.ring[slot..slot + self.d_model]
    }

    /// Logit for `frame` using stored frames up to `last`.
    fn emit(&mut self, frame: usize, last: usize) -> Result<Emission<S>> {
        let logit = match &self.model.fusion {
            Fusion::Gru(g) => {
                let h = self.hidden.as_mut().expect("recurrent state");
                let x = &self.ring[(frame % self.capacity) * self.d_model..][..self.d_model];
                *h = gru_step(x, h, &g.cell)?;
                classify_row(&g.classifier, h)
            }
            Fusion::Transformer(t) => {
                let (l_total, p, f) = (self.depth, self.past, self.future);
                let first = frame.saturating_sub(l_total * p);
                let mut lo = first;
                let mut x = Tensor::zeros(vec![last - first + 1, self.d_model]);
                for (i, abs) in (first..=last).enumerate() {
                    x.row_mut(i).copy_from_slice(self.ring_row(abs));
                }
                let band = ContextConfig::bounded(p, f);
                for (l, layer) in t.layers.iter().enumerate() {
                    let remaining = l_total - l - 1;
                    let r_lo = frame.saturating_sub(remaining * p).max(lo);
                    let r_hi = (frame + remaining * f).min(last);
                    let mask = ContextMask::build(x.rows(), band)?;
                    x = layer.forward_rows(&x, &mask, r_lo - lo..r_hi - lo + 1)?;
                    lo = r_lo;
                }
                debug_assert_eq!(x.rows(), 1);
                classify_row(&t.classifier, x.row(0))
            }
        };
        let half = self.d_model / 2;
        let aux = self.model.visual.aux_row(&self.ring_row(frame)[half..]);
        if !logit.is_finite() || !aux.is_finite() {
            return Err(AsdError::NonFinite("stream emission"));
        }
        Ok(Emission {
            frame_index: frame,
            logit,
            probability: sigmoid(logit),
            visual_aux_probability: sigmoid(aux),
            timings: StageTimings::default(),
        })
    }
}

fn model_push<S: Scalar>(
    model: &AsdModel<S>,
    visual: &mut VisualStream<S>,
    audio: &mut AudioStream<S>,
    face: &[S],
    mfcc: &[S],
    e_v: &mut [S],
    e_a: &mut [S],
) -> Result<()> {
    visual.push(&model.visual, face, e_v);
    if !audio.push(&model.audio, mfcc, e_a) {
        return Err(AsdError::Session("audio encoder produced no embedding".into()));
    }
    Ok(())
}

/// Convenience wrapper: opens a session over already-shared parameters.
pub fn open_session<S: Scalar>(model: Arc<AsdModel<S>>, ctx: ContextConfig) -> Result<StreamSession<S>> {
    StreamSession::open(model, ctx)
}

/// Aligns a whole clip and feeds it through a fresh session frame by frame,
/// returning every emission in frame order.
pub fn stream_clip<S: Scalar>(
    model: Arc<AsdModel<S>>,
    mfcc: MfccSequence<S>,
    faces: FaceFrameSequence<S>,
    ctx: ContextConfig,
) -> Result<Vec<Emission<S>>> {
    let (mfcc, faces, ratio) = align_streams(mfcc, faces)?;
    let mut session = StreamSession::open(model, ctx)?;
    let width = ratio * mfcc.frames.row_len();
    let mut out = Vec::with_capacity(faces.len());
    for (t, chunk) in mfcc.frames.data().chunks_exact(width).enumerate() {
        out.extend(session.push(faces.frames.row(t), chunk)?);
    }
    out.extend(session.flush()?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::{ContextBound, FusionKind};
    use crate::model_io::{init_random, ModelConfig, XorShift64Star};

    fn tiny(kind: FusionKind, depth: usize) -> ModelConfig {
        let mut c = ModelConfig::default();
        c.encoder.channels = vec![3, 4, 5];
        c.encoder.embed_dim = 6;
        c.encoder.face_size = 16;
        c.encoder.input_pool = 2;
        c.fusion.d_model = 12;
        c.fusion.heads = 2;
        c.fusion.d_ff = 8;
        c.fusion.gru_hidden = 5;
        c.fusion.kind = kind;
        c.fusion.depth = depth;
        c
    }

    fn model(cfg: &ModelConfig, seed: u64) -> Arc<AsdModel<f64>> {
        Arc::new(AsdModel::from_params(&init_random(cfg, seed).unwrap()).unwrap())
    }

    fn clip(cfg: &ModelConfig, t: usize, seed: u64) -> (MfccSequence<f64>, FaceFrameSequence<f64>) {
        let mut rng = XorShift64Star::new(seed);
        let side = cfg.encoder.face_size;
        let n_a = t * 4 * cfg.frontend.n_mfcc;
        let mfcc = Tensor::new(
            vec![t * 4, cfg.frontend.n_mfcc],
            (0..n_a).map(|_| rng.next_uniform(-3.0, 3.0)).collect(),
        )
        .unwrap();
        let faces = Tensor::new(
            vec![t, 1, side, side],
            (0..t * side * side).map(|_| rng.next_uniform(-2.0, 2.0)).collect(),
        )
        .unwrap();
        (
            MfccSequence {
                frames: mfcc,
                hop_s: 0.01,
                window_s: 0.025,
            },
            FaceFrameSequence {
                frames: faces,
                fps: 25.0,
            },
        )
    }

    fn check_equivalence(cfg: &ModelConfig, t: usize, ctx: ContextConfig) {
        let m = model(cfg, 3);
        let (a, v) = clip(cfg, t, 4);
        let offline = m.forward(a.clone(), v.clone(), ctx).unwrap();
        let streamed = stream_clip(m, a, v, ctx).unwrap();
        assert_eq!(streamed.len(), t);
        for (i, e) in streamed.iter().enumerate() {
            assert_eq!(e.frame_index, i);
            assert!(
                (e.logit - offline.logits[i]).abs() < 1e-10,
                "frame {i}: {} vs {}",
                e.logit,
                offline.logits[i]
            );
            assert!((e.visual_aux_probability - sigmoid(offline.visual_aux_logits[i])).abs() < 1e-12);
            assert_eq!(e.probability, sigmoid(e.logit));
        }
    }

    #[test]
    fn streaming_matches_offline_single_layer() {
        let cfg = tiny(FusionKind::Transformer, 1);
        for (p, f) in [(0, 0), (1, 1), (3, 3), (2, 5), (6, 0)] {
            check_equivalence(&cfg, 23, ContextConfig::bounded(p, f));
        }
    }

    #[test]
    fn streaming_matches_offline_multi_layer() {
        let cfg = tiny(FusionKind::Transformer, 3);
        for (p, f) in [(1, 1), (2, 1), (0, 2)] {
            check_equivalence(&cfg, 19, ContextConfig::bounded(p, f));
        }
        check_equivalence(&cfg, 2, ContextConfig::bounded(2, 2));
    }

    #[test]
    fn streaming_gru_matches_offline() {
        check_equivalence(&tiny(FusionKind::Gru, 1), 17, ContextConfig::unbounded());
    }

    #[test]
    fn ring_capacity_and_rejection() {
        let cfg = tiny(FusionKind::Transformer, 1);
        let m = model(&cfg, 0);
        assert_eq!(
            StreamSession::open(m.clone(), ContextConfig::bounded(32, 8))
                .unwrap()
                .ring_capacity(),
            41
        );
        assert_eq!(
            StreamSession::open(m.clone(), ContextConfig::bounded(1, 1))
                .unwrap()
                .ring_capacity(),
            3
        );
        let bad = ContextConfig {
            past: ContextBound::Unbounded,
            future: ContextBound::Frames(0),
        };
        assert!(StreamSession::open(m, bad).is_err());
        let deep = model(&tiny(FusionKind::Transformer, 2), 0);
        assert_eq!(
            StreamSession::open(deep, ContextConfig::bounded(3, 2))
                .unwrap()
                .ring_capacity(),
            11
        );
    }

    #[test]
    fn emission_schedule() {
        let cfg = tiny(FusionKind::Transformer, 1);
        let m = model(&cfg, 1);
        let (a, v) = clip(&cfg, 10, 2);
        let mut s = StreamSession::open(m, ContextConfig::bounded(3, 3)).unwrap();
        let w = 4 * cfg.frontend.n_mfcc;
        for t in 0..10 {
            let e = s.push(v.frames.row(t), &a.frames.data()[t * w..(t + 1) * w]).unwrap();
            if t < 3 {
                assert!(e.is_empty());
            } else {
                assert_eq!(e.len(), 1);
                assert_eq!(e[0].frame_index, t - 3);
            }
            assert_eq!(s.next_emit(), (t + 1).saturating_sub(3));
        }
        let tail: Vec<usize> = s.flush().unwrap().iter().map(|e| e.frame_index).collect();
        assert_eq!(tail, vec![7, 8, 9]);
        assert!(s.flush().is_err());
        assert!(s.push(v.frames.row(0), &a.frames.data()[..w]).is_err());
    }

    #[test]
    fn zero_future_flush_is_empty() {
        let cfg = tiny(FusionKind::Transformer, 1);
        let (a, v) = clip(&cfg, 5, 2);
        let mut s = StreamSession::open(model(&cfg, 1), ContextConfig::bounded(2, 0)).unwrap();
        let w = 4 * cfg.frontend.n_mfcc;
        for t in 0..5 {
            assert_eq!(
                s.push(v.frames.row(t), &a.frames.data()[t * w..(t + 1) * w])
                    .unwrap()
                    .len(),
                1
            );
        }
        assert!(s.flush().unwrap().is_empty());
    }

    #[test]
    fn input_validation() {
        let cfg = tiny(FusionKind::Transformer, 1);
        let mut s = StreamSession::open(model(&cfg, 1), ContextConfig::bounded(1, 1)).unwrap();
        assert!(s.push(&[0.0; 256], &[0.0; 13 * 3]).is_err());
        assert!(s.push(&[0.0; 255], &[0.0; 13 * 4]).is_err());
        assert!(s.push(&[0.0; 256], &[0.0; 13 * 4]).is_ok());
    }

    #[test]
    fn footprint_accounting() {
        let mut cfg = tiny(FusionKind::Transformer, 1);
        cfg.encoder.embed_dim = 128;
        cfg.fusion.d_model = 256;
        let m = Arc::new(AsdModel::<f32>::from_params(&init_random(&cfg, 0).unwrap()).unwrap());
        let s = StreamSession::open(m.clone(), ContextConfig::bounded(32, 8)).unwrap();
        let fp = s.memory_footprint();
        assert_eq!(fp.embed_ring, 41_984);
        assert_eq!(fp.total, fp.conv_tails + fp.embed_ring + fp.recurrent_state + fp.params);
        let small = StreamSession::open(m, ContextConfig::bounded(1, 1)).unwrap();
        assert_eq!(small.memory_footprint().embed_ring, 3_072);
    }

    #[test]
    fn deterministic_emissions() {
        let cfg = tiny(FusionKind::Transformer, 1);
        let run = || {
            let (a, v) = clip(&cfg, 12, 9);
            stream_clip(model(&cfg, 5), a, v, ContextConfig::bounded(2, 2))
                .unwrap()
                .iter()
                .map(|e| e.logit.to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}

//! Streaming engine against the offline reference on reduced models.

use std::sync::Arc;

use asd_core::fusion::{ContextBound, FusionKind};
use asd_core::model_io::{init_random, ModelConfig};
use asd_core::{compare_streams, offline_forward, stream_clip, synthetic_clip, AsdModel, ContextConfig, StreamSession};

fn reduced(depth: usize, kind: FusionKind) -> ModelConfig {
    let mut c = ModelConfig::default();
    c.encoder.channels = vec![4, 6, 8];
    c.encoder.embed_dim = 16;
    c.encoder.face_size = 24;
    c.encoder.input_pool = 2;
    c.fusion.d_model = 32;
    c.fusion.heads = 4;
    c.fusion.d_ff = 48;
    c.fusion.gru_hidden = 12;
    c.fusion.depth = depth;
    c.fusion.kind = kind;
    c
}

fn check(cfg: &ModelConfig, frames: usize, ctx: ContextConfig, seed: u64) {
    let p = init_random::<f32>(cfg, seed).unwrap();
    let (a, v) = synthetic_clip::<f32>(cfg, frames, seed + 100);
    let want = offline_forward(&a, &v, ctx, &p).unwrap();
    let got = stream_clip(Arc::new(AsdModel::from_params(&p).unwrap()), a, v, ctx).unwrap();
    let logits: Vec<f32> = got.iter().map(|e| e.logit).collect();
    let r = compare_streams(&logits, &want, 1e-5);
    assert!(r.pass, "{ctx} depth {}: {r:?}", cfg.fusion.depth);
}

#[test]
fn single_layer_contexts() {
    let cfg = reduced(1, FusionKind::Transformer);
    for (p, f) in [(1, 1), (3, 3), (6, 12), (12, 6), (32, 8), (0, 0)] {
        check(&cfg, 120, ContextConfig::bounded(p, f), 7);
    }
}

#[test]
fn stacked_layers() {
    for depth in [2, 3] {
        check(
            &reduced(depth, FusionKind::Transformer),
            60,
            ContextConfig::bounded(3, 2),
            depth as u64,
        );
    }
}

#[test]
fn short_clips_shorter_than_context() {
    let cfg = reduced(1, FusionKind::Transformer);
    for frames in [1, 2, 5] {
        check(&cfg, frames, ContextConfig::bounded(32, 8), 3);
    }
}

#[test]
fn recurrent_head() {
    check(&reduced(1, FusionKind::Gru), 80, ContextConfig::bounded(0, 0), 5);
}

#[test]
fn footprint_constant_once_full() {
    let cfg = reduced(1, FusionKind::Transformer);
    let p = init_random::<f32>(&cfg, 0).unwrap();
    let (a, v) = synthetic_clip::<f32>(&cfg, 60, 1);
    let mut s = StreamSession::open(
        Arc::new(AsdModel::from_params(&p).unwrap()),
        ContextConfig::bounded(4, 2),
    )
    .unwrap();
    let first = s.memory_footprint();
    let w = 4 * 13;
    for t in 0..60 {
        s.push(v.frames.row(t), &a.frames.data()[t * w..(t + 1) * w]).unwrap();
        assert_eq!(s.memory_footprint(), first);
    }
    assert_eq!(first.embed_ring, 7 * 32 * 4);
    let unbounded = ContextConfig {
        past: ContextBound::Unbounded,
        future: ContextBound::Frames(1),
    };
    assert!(StreamSession::open(Arc::new(AsdModel::from_params(&p).unwrap()), unbounded).is_err());
}

//! Acceptance checks. Prints one `[PASS]`/`[FAIL]` line per criterion and
//! exits nonzero if any fails.
#![allow(clippy::needless_range_loop)]

mod common;

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use asd_core::encoders::TemporalPadding;
use asd_core::frontend::{compute_mfcc, dft_power, FrontendConfig};
use asd_core::fusion::{transformer_logits, Fusion};
use asd_core::model_io::{init_random, save_weights, ModelConfig, XorShift64Star};
use asd_core::{
    average_precision, average_precision_exact, bruteforce_attention, compare_streams, measure_receptive_field,
    offline_embeddings, offline_fusion, stream_clip, synthetic_clip, AsdModel, ContextConfig, ContextMask,
    StreamSession, Tensor, VisualEncoder,
};
use common::*;
use num_rational::Ratio;

const CONTEXTS: [(usize, usize); 5] = [(1, 1), (3, 3), (6, 12), (12, 6), (32, 8)];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

// ---------------------------------------------------------------- criterion 1

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut bad = Vec::new();
    let mut check = |args: &[&str], want: (u64, u64)| {
        let o = asd(&[&["cost"][..], args].concat());
        let out = stdout(&o);
        let got = (
            field(&out, "latency_ms").and_then(|v| v.parse::<u64>().ok()),
            field(&out, "memory").and_then(|v| v.parse::<u64>().ok()),
        );
        if !o.status.success() || got != (Some(want.0), Some(want.1)) {
            bad.push(format!("{args:?} -> {}", out.trim()));
        }
    };
    const KB: u64 = 1024;
    let table = [
        (40, 512 * KB),
        (120, 1536 * KB),
        (480, 3072 * KB),
        (240, 6144 * KB),
        (320, 16384 * KB),
    ];
    for ((p, f), want) in CONTEXTS.iter().zip(table) {
        check(&["--past", &p.to_string(), "--future", &f.to_string()], want);
    }
    check(&["--past", "0", "--future", "0", "--fusion", "uni-gru"], (0, 512 * KB));
    check(
        &[
            "--past",
            "0",
            "--future",
            "0",
            "--fusion",
            "uni-gru",
            "--encoder-future",
            "6",
        ],
        (240, 512 * KB),
    );
    let secs = start.elapsed().as_secs_f64();
    if secs >= 1.0 {
        bad.push(format!("runtime {secs:.2}s"));
    }
    outcome(
        bad.is_empty(),
        if bad.is_empty() {
            format!("7 configurations exact, {secs:.2}s")
        } else {
            bad.join("; ")
        },
    )
}

// ---------------------------------------------------------------- criterion 2

fn criterion_2() -> Outcome {
    let cfg = ModelConfig::default();
    let mut worst = (0.0f64, String::new());
    let mut order_ok = true;
    let start = Instant::now();
    for seed in 0..10u64 {
        let params = init_random::<f32>(&cfg, seed).unwrap();
        let model = Arc::new(AsdModel::from_params(&params).unwrap());
        for len in [50usize, 333, 2000] {
            let (x_a, x_v) = synthetic_clip::<f32>(&cfg, len, seed.wrapping_mul(1000) + len as u64);
            let emb = offline_embeddings(&x_a, &x_v, &params).unwrap();
            for (p, f) in CONTEXTS {
                let ctx = ContextConfig::bounded(p, f);
                let want = offline_fusion(&emb, ctx, &params).unwrap();
                let got = stream_clip(model.clone(), x_a.clone(), x_v.clone(), ctx).unwrap();
                order_ok &= got.len() == len && got.iter().enumerate().all(|(i, e)| e.frame_index == i);
                let logits: Vec<f32> = got.iter().map(|e| e.logit).collect();
                let r = compare_streams(&logits, &want, 1e-5);
                if r.max_abs_diff > worst.0 || worst.1.is_empty() {
                    worst = (
                        r.max_abs_diff,
                        format!("seed {seed} len {len} ctx {ctx} frame {}", r.argmax_frame),
                    );
                }
            }
            eprintln!(
                "  c2: seed {seed} len {len} done ({:.0}s)",
                start.elapsed().as_secs_f64()
            );
        }
    }
    outcome(
        worst.0 <= 1e-5 && order_ok,
        format!(
            "150 runs, max |stream - offline| = {:.2e} at {}, emission order ok: {order_ok}",
            worst.0, worst.1
        ),
    )
}

// ---------------------------------------------------------------- criterion 3

fn random_tensor(rng: &mut XorShift64Star, shape: Vec<usize>) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.next_uniform(-1.0, 1.0)).collect()).unwrap()
}

fn criterion_3() -> Outcome {
    let mut notes = Vec::new();
    let mut pass = true;
    let mut rng = XorShift64Star::new(33);

    let mut cfg = ModelConfig::default();
    for (padding, want) in [(TemporalPadding::Causal, (12, 0)), (TemporalPadding::Symmetric, (6, 6))] {
        cfg.encoder.padding = padding;
        let p = init_random::<f64>(&cfg, 3).unwrap();
        let v = VisualEncoder::from_params(&p).unwrap();
        let x = random_tensor(&mut rng, vec![31, 1, 112, 112]);
        let rf = measure_receptive_field(|x| v.forward(x).map(|e| e.values), &x).unwrap();
        pass &= (rf.past, rf.future) == want;
        notes.push(format!("{padding:?} rf=({},{})", rf.past, rf.future));
    }

    let mut worst_out = 0.0f64;
    let mut inside_moved = 0;
    let probes = 100;
    for probe in 0..probes {
        let mut cfg = ModelConfig::default();
        cfg.fusion.depth = 1 + probe % 2;
        let p = init_random::<f64>(&cfg, 100 + probe as u64).unwrap();
        let Fusion::Transformer(fusion) = Fusion::from_params(&p).unwrap() else {
            unreachable!()
        };
        let (t1, t2) = (1 + rng.next_u64() as usize % 4, rng.next_u64() as usize % 4);
        let l = cfg.fusion.depth;
        let n = 2 * l * (t1 + t2) + 8;
        let mask = ContextMask::build(n, ContextConfig::bounded(t1, t2)).unwrap();
        let x = random_tensor(&mut rng, vec![n, cfg.fusion.d_model]);
        let base = transformer_logits(&fusion, &x, &mask).unwrap();
        let t = l * t1 + 2 + rng.next_u64() as usize % 4;
        let outside: Vec<usize> = (0..n).filter(|&s| s + l * t1 < t || s > t + l * t2).collect();
        let s = outside[rng.next_u64() as usize % outside.len()];
        let mut y = x.clone();
        y.row_mut(s).iter_mut().for_each(|v| *v += rng.next_uniform(0.5, 2.0));
        worst_out = worst_out.max((transformer_logits(&fusion, &y, &mask).unwrap()[t] - base[t]).abs());
        // The band edge itself must still matter, otherwise the check is vacuous.
        // A constant shift would be erased by the layer norm, so perturb per component.
        let mut z = x.clone();
        z.row_mut(t + l * t2)
            .iter_mut()
            .for_each(|v| *v += rng.next_uniform(0.5, 2.0));
        if (transformer_logits(&fusion, &z, &mask).unwrap()[t] - base[t]).abs() > 1e-9 {
            inside_moved += 1;
        }
    }
    pass &= worst_out <= 1e-7 && inside_moved == probes;
    notes.push(format!(
        "{probes} fusion probes (L=1,2): max out-of-band change {worst_out:.1e}, band-edge sensitive {inside_moved}/{probes}"
    ));
    outcome(pass, notes.join(", "))
}

// ---------------------------------------------------------------- criterion 4

/// Plain softmax attention of one head with no mask at all.
fn unmasked_head(x: &Tensor<f64>, p: &asd_core::ParamSet64, head: usize, d_head: usize) -> Vec<Vec<f64>> {
    let (n, d) = (x.rows(), x.row_len());
    let proj = |name: &str| {
        let w = p.get(&format!("fusion.layer1.{name}.weight")).unwrap();
        let b = p.get(&format!("fusion.layer1.{name}.bias")).unwrap();
        (0..n)
            .map(|t| {
                (head * d_head..(head + 1) * d_head)
                    .map(|o| b.data()[o] + (0..d).map(|i| w.data()[i * d + o] * x.row(t)[i]).sum::<f64>())
                    .collect::<Vec<f64>>()
            })
            .collect::<Vec<_>>()
    };
    let (q, k, v) = (proj("q"), proj("k"), proj("v"));
    (0..n)
        .map(|t| {
            let s: Vec<f64> = (0..n)
                .map(|u| q[t].iter().zip(&k[u]).map(|(a, b)| a * b).sum::<f64>() / (d_head as f64).sqrt())
                .collect();
            let m = s.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
            let z: f64 = e.iter().sum();
            (0..d_head).map(|i| (0..n).map(|u| e[u] / z * v[u][i]).sum()).collect()
        })
        .collect()
}

fn criterion_4() -> Outcome {
    let cfg = ModelConfig::default();
    let mut rng = XorShift64Star::new(44);
    let mut worst = 0.0f64;
    let mut worst_full = 0.0f64;
    let cases = 500;
    let params: Vec<_> = (0..5).map(|s| init_random::<f64>(&cfg, 400 + s).unwrap()).collect();
    let layers: Vec<_> = params
        .iter()
        .map(|p| match Fusion::from_params(p).unwrap() {
            Fusion::Transformer(t) => t.layers[0].clone(),
            Fusion::Gru(_) => unreachable!(),
        })
        .collect();
    let d_head = cfg.fusion.d_model / cfg.fusion.heads;
    for case in 0..cases {
        let which = case % params.len();
        let n = 1 + rng.next_u64() as usize % 32;
        let x = random_tensor(&mut rng, vec![n, cfg.fusion.d_model]);
        let mask = if case % 5 == 4 {
            ContextMask::full(n)
        } else {
            let (t1, t2) = (rng.next_u64() as usize % 9, rng.next_u64() as usize % 9);
            ContextMask::build(n, ContextConfig::bounded(t1, t2)).unwrap()
        };
        let brute = bruteforce_attention(&x, &mask, &params[which], 1).unwrap();
        let head = rng.next_u64() as usize % cfg.fusion.heads;
        let y = layers[which].constrained_attention(&x, &mask, head).unwrap();
        for t in 0..n {
            for i in 0..d_head {
                worst = worst.max((y.row(t)[i] - brute.row(t)[head * d_head + i]).abs());
            }
        }
        if case % 5 == 4 {
            let plain = unmasked_head(&x, &params[which], head, d_head);
            for t in 0..n {
                for i in 0..d_head {
                    worst_full = worst_full.max((y.row(t)[i] - plain[t][i]).abs());
                }
            }
        }
    }
    outcome(
        worst <= 1e-6 && worst_full <= 1e-6,
        format!("{cases} cases (f64, n<=32): max diff {worst:.1e}; all-ones mask vs unmasked {worst_full:.1e}"),
    )
}

// ---------------------------------------------------------------- criterion 5

/// Direct-DFT MFCC written without the library's filterbank or FFT.
fn naive_mfcc(x: &[f64], fe: &FrontendConfig) -> Vec<Vec<f64>> {
    use std::f64::consts::PI;
    let (win, hop, n_fft) = (400usize, 160usize, 512usize);
    let bins = n_fft / 2 + 1;
    let mel = |f: f64| 2595.0 * (1.0 + f / 700.0).log10();
    let inv = |m: f64| 700.0 * (10f64.powf(m / 2595.0) - 1.0);
    let edges: Vec<f64> = (0..fe.n_mels + 2)
        .map(|i| inv(mel(fe.f_min) + (mel(fe.f_max) - mel(fe.f_min)) * i as f64 / (fe.n_mels + 1) as f64))
        .collect();
    let mut cos_table = vec![0.0; n_fft];
    let mut sin_table = vec![0.0; n_fft];
    for j in 0..n_fft {
        cos_table[j] = (2.0 * PI * j as f64 / n_fft as f64).cos();
        sin_table[j] = (2.0 * PI * j as f64 / n_fft as f64).sin();
    }
    let mut rows = Vec::new();
    let mut s = 0;
    while s + win <= x.len() {
        let y: Vec<f64> = (0..win)
            .map(|n| {
                let prev = if n == 0 { x[s] } else { x[s + n - 1] };
                (x[s + n] - fe.pre_emphasis * prev) * (0.54 - 0.46 * (2.0 * PI * n as f64 / (win - 1) as f64).cos())
            })
            .collect();
        let mut logmel = vec![0.0; fe.n_mels];
        for k in 0..bins {
            let (mut re, mut im) = (0.0, 0.0);
            for (n, v) in y.iter().enumerate() {
                let j = (k * n) % n_fft;
                re += v * cos_table[j];
                im -= v * sin_table[j];
            }
            let pw = (re * re + im * im) / n_fft as f64;
            let f = k as f64 * 16000.0 / n_fft as f64;
            for (m, acc) in logmel.iter_mut().enumerate() {
                let (a, b, c) = (edges[m], edges[m + 1], edges[m + 2]);
                let w = if f > a && f <= b {
                    (f - a) / (b - a)
                } else if f > b && f < c {
                    (c - f) / (c - b)
                } else {
                    0.0
                };
                *acc += w * pw;
            }
        }
        let logmel: Vec<f64> = logmel.iter().map(|e| e.max(fe.log_floor).ln()).collect();
        let m = fe.n_mels as f64;
        rows.push(
            (0..fe.n_mfcc)
                .map(|i| {
                    let norm = if i == 0 { (1.0 / m).sqrt() } else { (2.0 / m).sqrt() };
                    norm * logmel
                        .iter()
                        .enumerate()
                        .map(|(j, l)| l * (PI * i as f64 * (j as f64 + 0.5) / m).cos())
                        .sum::<f64>()
                })
                .collect(),
        );
        s += hop;
    }
    rows
}

fn criterion_5() -> Outcome {
    let fe = FrontendConfig::default();
    let mut rng = XorShift64Star::new(55);
    let mut worst = 0.0f64;
    let mut frames = 0;
    let mut shape_ok = true;
    for _ in 0..50 {
        let kind = rng.next_u64() % 3;
        let f0 = rng.next_uniform(60.0, 3000.0);
        let x: Vec<f64> = (0..16000)
            .map(|i| match kind {
                0 => rng.next_uniform(-1.0, 1.0),
                1 => 0.5 * (2.0 * std::f64::consts::PI * f0 * i as f64 / 16000.0).sin() + rng.next_uniform(-0.05, 0.05),
                _ => rng.next_uniform(-1.0, 1.0) * (i as f64 / 16000.0),
            })
            .collect();
        let got = compute_mfcc(&x, 16000, &fe).unwrap();
        let want = naive_mfcc(&x, &fe);
        shape_ok &= got.frames.rows() == want.len() && got.frames.row_len() == fe.n_mfcc;
        for (t, row) in want.iter().enumerate() {
            for (i, w) in row.iter().enumerate() {
                worst = worst.max((got.frames.row(t)[i] - w).abs());
            }
        }
        frames += want.len();
    }
    let mut parseval = 0.0f64;
    for _ in 0..20 {
        let x: Vec<f64> = (0..512).map(|_| rng.next_uniform(-1.0, 1.0)).collect();
        let e: f64 = x.iter().map(|v| v * v).sum();
        let spec: f64 = dft_power(&x).iter().sum::<f64>() / x.len() as f64;
        parseval = parseval.max((e - spec).abs() / e);
    }
    outcome(
        worst <= 1e-6 && parseval <= 1e-4 && shape_ok,
        format!("50 signals, {frames} frames (f64): max coeff diff {worst:.1e}; Parseval rel err {parseval:.1e}"),
    )
}

// ---------------------------------------------------------------- criterion 6

fn criterion_6() -> Outcome {
    // Narrow encoder, default fusion width: the ring is what is being measured.
    let mut cfg = ModelConfig::default();
    cfg.encoder.channels = vec![4, 4, 4];
    cfg.encoder.face_size = 16;
    cfg.encoder.input_pool = 2;
    let params = init_random::<f32>(&cfg, 6).unwrap();
    let mut s = StreamSession::open(
        Arc::new(AsdModel::from_params(&params).unwrap()),
        ContextConfig::bounded(32, 8),
    )
    .unwrap();
    let (x_a, x_v) = synthetic_clip::<f32>(&cfg, 1000, 66);
    let w = 4 * cfg.frontend.n_mfcc;
    let total = 100_000;
    let mut reference = None;
    let mut constant = true;
    let mut emitted = Vec::with_capacity(total);
    for t in 0..total {
        let i = t % 1000;
        emitted.extend(
            s.push(x_v.frames.row(i), &x_a.frames.data()[i * w..(i + 1) * w])
                .unwrap()
                .into_iter()
                .map(|e| e.frame_index),
        );
        let fp = s.memory_footprint();
        if t + 1 >= 41 {
            match reference {
                None => reference = Some(fp),
                Some(r) => constant &= r == fp,
            }
        }
    }
    emitted.extend(s.flush().unwrap().into_iter().map(|e| e.frame_index));
    let next = emitted.len();
    let in_order = emitted.iter().enumerate().all(|(i, &f)| f == i);
    let fp = reference.unwrap();
    outcome(
        constant && next == total && in_order,
        format!(
            "{total} frames: footprint constant from frame 41: {constant} (ring {} B, conv tails {} B), {next} emissions, in order: {in_order}",
            fp.embed_ring, fp.conv_tails
        ),
    )
}

// ---------------------------------------------------------------- criterion 7

/// AP from ranks: a frame ranks at or above a positive if it scores higher,
/// or ties and comes no later in input order.
fn brute_ap(scores: &[u8], labels: &[bool]) -> Option<Ratio<i64>> {
    let positives: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
    if positives.is_empty() {
        return None;
    }
    let above = |j: usize, i: usize| scores[j] > scores[i] || (scores[j] == scores[i] && j <= i);
    let mut sum = Ratio::from_integer(0);
    for &i in &positives {
        let ranked: Vec<usize> = (0..labels.len()).filter(|&j| above(j, i)).collect();
        let hits = ranked.iter().filter(|&&j| labels[j]).count() as i64;
        sum += Ratio::new(hits, ranked.len() as i64);
    }
    Some(sum / positives.len() as i64)
}

fn criterion_7() -> Outcome {
    let grid = [0.0f64, 0.5, 1.0];
    let mut sets = 0u64;
    let mut mismatches = 0u64;
    let mut float_worst = 0.0f64;
    for n in 1..=8usize {
        for code in 0..3usize.pow(n as u32) {
            let idx: Vec<u8> = (0..n).map(|i| (code / 3usize.pow(i as u32) % 3) as u8).collect();
            let scores: Vec<f64> = idx.iter().map(|&i| grid[i as usize]).collect();
            for mask in 0..1u32 << n {
                let labels: Vec<bool> = (0..n).map(|i| mask >> i & 1 == 1).collect();
                sets += 1;
                match (brute_ap(&idx, &labels), average_precision_exact(&scores, &labels)) {
                    (None, Err(_)) => {}
                    (Some(want), Ok(got)) => {
                        if got != want {
                            mismatches += 1;
                        }
                        let f = average_precision(&scores, &labels).unwrap();
                        float_worst = float_worst.max((f - *want.numer() as f64 / *want.denom() as f64).abs());
                    }
                    _ => mismatches += 1,
                }
            }
        }
    }
    outcome(
        mismatches == 0 && float_worst <= 1e-12,
        format!("{sets} sets over grid {{0, 0.5, 1}}: {mismatches} exact mismatches, f64 max diff {float_worst:.1e}"),
    )
}

// ---------------------------------------------------------------- criterion 8

fn criterion_8() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("model.asdw");
    save_weights(&init_random::<f32>(&ModelConfig::default(), 8).unwrap(), &model).unwrap();
    let (wav, fst) = write_clip(dir.path(), 250, 112, 8);
    let (scores, timings) = (dir.path().join("s.csv"), dir.path().join("t.csv"));
    let o = asd(&[
        "infer",
        "--model",
        model.to_str().unwrap(),
        "--audio",
        &wav,
        "--faces",
        &fst,
        "--out",
        scores.to_str().unwrap(),
        "--timings",
        timings.to_str().unwrap(),
    ]);
    let err = stderr(&o);
    if !o.status.success() {
        return outcome(false, format!("infer failed: {}", err.trim()));
    }
    let fps: f64 = field(&err, "fps").and_then(|v| v.parse().ok()).unwrap_or(0.0);
    let mut sums: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    let mut r = csv::Reader::from_path(&timings).unwrap();
    let headers = r.headers().unwrap().clone();
    for rec in r.records() {
        let rec = rec.unwrap();
        for (i, h) in headers.iter().enumerate().skip(1) {
            let e = sums.entry(asd_cli::TIMINGS_HEADER[i]).or_default();
            debug_assert_eq!(h, asd_cli::TIMINGS_HEADER[i]);
            e.0 += rec[i].parse::<f64>().unwrap();
            e.1 += 1;
        }
    }
    let stages: Vec<String> = asd_cli::TIMINGS_HEADER[1..]
        .iter()
        .map(|h| {
            let (s, n) = sums[h];
            format!("{}={:.2}ms", h.trim_end_matches("_us"), s / n.max(1) as f64 / 1000.0)
        })
        .collect();
    let frames = field(&err, "frames").unwrap_or("?");
    outcome(
        fps >= 25.0 && frames == "250",
        format!(
            "default config, ctx (32,8), {frames} frames at {fps:.1} fps; mean per frame {}",
            stages.join(" ")
        ),
    )
}

fn main() {
    type Check = fn() -> Outcome;
    let criteria: [(&str, Check); 8] = [
        ("cost table reproduction", criterion_1),
        ("streaming equals offline", criterion_2),
        ("causality and receptive field", criterion_3),
        ("attention oracle", criterion_4),
        ("MFCC oracle", criterion_5),
        ("bounded memory", criterion_6),
        ("mAP oracle", criterion_7),
        ("real-time throughput", criterion_8),
    ];
    // `cargo test --test acceptance -- 3 6` runs a subset; flags from the test runner are ignored.
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        if !only.is_empty() && !only.contains(&(i + 1)) {
            continue;
        }
        let start = Instant::now();
        let o = f();
        if !o.pass {
            failed += 1;
        }
        println!(
            "[{}] criterion {} {name}: {} ({:.1}s)",
            if o.pass { "PASS" } else { "FAIL" },
            i + 1,
            o.detail,
            start.elapsed().as_secs_f64()
        );
    }
    println!("[N/A] criterion 9 task accuracy: needs full training on a labelled corpus; not run");
    if failed > 0 {
        println!("{failed} criterion/criteria failed");
        std::process::exit(1);
    }
}

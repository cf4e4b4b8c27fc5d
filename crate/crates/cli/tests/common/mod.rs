//! Shared fixtures for the binary-level tests.
#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

use asd_core::frontend::{write_wav, FaceStream};
use asd_core::model_io::{ModelConfig, XorShift64Star};

pub fn asd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_asd"))
        .args(args)
        .output()
        .expect("spawn asd")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Value of `key=` in a `k=v k=v` line.
pub fn field<'a>(text: &'a str, key: &str) -> Option<&'a str> {
    let pat = format!("{key}=");
    text.split_whitespace().find_map(|w| w.strip_prefix(pat.as_str()))
}

/// Audio and faces covering `frames` video frames at 25 fps.
pub fn write_clip(dir: &Path, frames: usize, side: usize, seed: u64) -> (String, String) {
    let mut rng = XorShift64Star::new(seed);
    // 40 ms per frame plus one analysis window of slack.
    let n = frames * 640 + 400;
    let samples: Vec<i16> = (0..n)
        .map(|i| {
            let tone = (2.0 * std::f64::consts::PI * 220.0 * i as f64 / 16000.0).sin();
            ((0.3 * tone + rng.next_uniform(-0.1, 0.1)) * 32767.0) as i16
        })
        .collect();
    let wav = dir.join("clip.wav");
    write_wav(&wav, &samples, 16000).unwrap();
    let pixels: Vec<u8> = (0..frames * side * side)
        .map(|_| (rng.next_u64() % 256) as u8)
        .collect();
    let fst = dir.join("clip.fstr");
    FaceStream {
        height: side,
        width: side,
        pixels,
    }
    .write(&fst)
    .unwrap();
    (wav.to_string_lossy().into_owned(), fst.to_string_lossy().into_owned())
}

pub fn small_config() -> ModelConfig {
    let mut c = ModelConfig::default();
    c.encoder.channels = vec![4, 6, 8];
    c.encoder.embed_dim = 16;
    c.encoder.face_size = 32;
    c.encoder.input_pool = 2;
    c.fusion.d_model = 32;
    c.fusion.heads = 4;
    c.fusion.d_ff = 48;
    c
}

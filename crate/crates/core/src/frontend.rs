//! Audio and face frontends: MFCC extraction, face crop normalization,
//! stream alignment, and the WAV / `.facestream` readers.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{AsdError, Result};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontendConfig {
    pub sample_rate: u32,
    /// Analysis window length in seconds.
    pub window_s: f64,
    /// Hop between analysis windows in seconds.
    pub hop_s: f64,
    pub n_mels: usize,
    pub n_mfcc: usize,
    pub pre_emphasis: f64,
    pub f_min: f64,
    pub f_max: f64,
    pub log_floor: f64,
    /// Video frame rate.
    pub fps: f64,
    pub face_mean: f64,
    pub face_std: f64,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        FrontendConfig {
            sample_rate: 16_000,
            window_s: 0.025,
            hop_s: 0.010,
            n_mels: 40,
            n_mfcc: 13,
            pre_emphasis: 0.97,
            f_min: 0.0,
            f_max: 8_000.0,
            log_floor: 1e-10,
            fps: 25.0,
            face_mean: 0.45,
            face_std: 0.225,
        }
    }
}

impl FrontendConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(AsdError::Config(m.to_string()));
        if self.sample_rate == 0 || self.window_s <= 0.0 || self.hop_s <= 0.0 || self.fps <= 0.0 {
            return bad("frontend rates and durations must be positive");
        }
        if self.n_mels == 0 || self.n_mfcc == 0 || self.n_mfcc > self.n_mels {
            return bad("need 0 < n_mfcc <= n_mels");
        }
        if !(self.f_min >= 0.0 && self.f_max > self.f_min && self.f_max <= self.sample_rate as f64 / 2.0) {
            return bad("mel band edges must satisfy 0 <= f_min < f_max <= sample_rate/2");
        }
        if self.log_floor <= 0.0 || self.face_std <= 0.0 {
            return bad("log floor and face std must be positive");
        }
        self.audio_frames_per_video_frame().map(|_| ())
    }

    pub fn window_samples(&self) -> usize {
        (self.window_s * self.sample_rate as f64).round() as usize
    }

    pub fn hop_samples(&self) -> usize {
        (self.hop_s * self.sample_rate as f64).round() as usize
    }

    /// Next power of two at or above the window length.
    pub fn n_fft(&self) -> usize {
        self.window_samples().next_power_of_two()
    }

    /// Number of MFCC frames spanning one video frame.
    pub fn audio_frames_per_video_frame(&self) -> Result<usize> {
        let r = 1.0 / (self.fps * self.hop_s);
        let rounded = r.round();
        if rounded < 1.0 || (r - rounded).abs() > 1e-6 {
            return Err(AsdError::Config(format!(
                "video frame period is not a whole number of MFCC hops ({r})"
            )));
        }
        Ok(rounded as usize)
    }

    /// Frames produced from `n_samples` samples, or 0 when not even one
    /// window fits.
    pub fn mfcc_frame_count(&self, n_samples: usize) -> usize {
        let (win, hop) = (self.window_samples(), self.hop_samples());
        if n_samples < win {
            0
        } else {
            (n_samples - win) / hop + 1
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MfccSequence<S> {
    /// `[T_a × n_mfcc]`
    pub frames: Tensor<S>,
    pub hop_s: f64,
    pub window_s: f64,
}

impl<S: Scalar> MfccSequence<S> {
    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FaceFrameSequence<S> {
    /// `[T_v × 1 × H × W]`, standardized grayscale.
    pub frames: Tensor<S>,
    pub fps: f64,
}

impl<S: Scalar> FaceFrameSequence<S> {
    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Precomputed window, filterbank and DCT for one configuration.
pub struct MfccExtractor<S: Scalar> {
    config: FrontendConfig,
    window: Vec<S>,
    /// Per mel band: first bin and weights for consecutive bins.
    filters: Vec<(usize, Vec<S>)>,
    /// `[n_mfcc × n_mels]`
    dct: Vec<S>,
    fft: Arc<dyn Fft<S>>,
}

impl<S: Scalar> MfccExtractor<S> {
    pub fn new(config: &FrontendConfig) -> Result<Self> {
        config.validate()?;
        let n_win = config.window_samples();
        let n_fft = config.n_fft();
        let window = (0..n_win)
            .map(|n| {
                let phase = 2.0 * std::f64::consts::PI * n as f64 / (n_win - 1) as f64;
                lit(0.54 - 0.46 * phase.cos())
            })
            .collect();

        let (m_lo, m_hi) = (hz_to_mel(config.f_min), hz_to_mel(config.f_max));
        let edges: Vec<f64> = (0..config.n_mels + 2)
            .map(|j| mel_to_hz(m_lo + (m_hi - m_lo) * j as f64 / (config.n_mels + 1) as f64))
            .collect();
        let bin_hz = config.sample_rate as f64 / n_fft as f64;
        let n_bins = n_fft / 2 + 1;
        let filters = (0..config.n_mels)
            .map(|m| {
                let (lo, centre, hi) = (edges[m], edges[m + 1], edges[m + 2]);
                let weights: Vec<(usize, f64)> = (0..n_bins)
                    .filter_map(|k| {
                        let f = k as f64 * bin_hz;
                        let w = if f > lo && f <= centre {
                            (f - lo) / (centre - lo)
                        } else if f > centre && f < hi {
                            (hi - f) / (hi - centre)
                        } else {
                            0.0
                        };
                        (w > 0.0).then_some((k, w))
                    })
                    .collect();
                let start = weights.first().map_or(0, |w| w.0);
                (start, weights.into_iter().map(|(_, w)| lit(w)).collect())
            })
            .collect();

        let n_mels = config.n_mels;
        let mut dct = Vec::with_capacity(config.n_mfcc * n_mels);
        for i in 0..config.n_mfcc {
            let scale = if i == 0 {
                (1.0 / n_mels as f64).sqrt()
            } else {
                (2.0 / n_mels as f64).sqrt()
            };
            for m in 0..n_mels {
                let arg = std::f64::consts::PI * i as f64 * (m as f64 + 0.5) / n_mels as f64;
                dct.push(lit(scale * arg.cos()));
            }
        }

        let fft = FftPlanner::new().plan_fft_forward(n_fft);
        Ok(MfccExtractor {
            config: config.clone(),
            window,
            filters,
            dct,
            fft,
        })
    }

    pub fn config(&self) -> &FrontendConfig {
        &self.config
    }

    /// Coefficients of one analysis window (`window_samples` samples).
    /// Pre-emphasis is applied within the window, so each frame depends only
    /// on its own samples.
    pub fn frame(&self, samples: &[S], out: &mut [S]) {
        let n_fft = self.config.n_fft();
        let a: S = lit(self.config.pre_emphasis);
        let mut buf = vec![Complex::new(S::zero(), S::zero()); n_fft];
        for (n, slot) in buf.iter_mut().enumerate().take(samples.len()) {
            let prev = if n == 0 { samples[0] } else { samples[n - 1] };
            slot.re = (samples[n] - a * prev) * self.window[n];
        }
        self.fft.process(&mut buf);
        let norm = S::one() / S::from_usize(n_fft).unwrap();
        let power: Vec<S> = buf[..n_fft / 2 + 1].iter().map(|c| c.norm_sqr() * norm).collect();
        let floor: S = lit(self.config.log_floor);
        let log_mel: Vec<S> = self
            .filters
            .iter()
            .map(|(start, w)| {
                let e: S = w.iter().zip(&power[*start..]).map(|(&wi, &p)| wi * p).sum();
                e.max(floor).ln()
            })
            .collect();
        let n_mels = self.config.n_mels;
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.dct[i * n_mels..(i + 1) * n_mels]
                .iter()
                .zip(&log_mel)
                .map(|(&c, &l)| c * l)
                .sum();
        }
    }

    pub fn compute(&self, samples: &[S], sample_rate: u32) -> Result<MfccSequence<S>> {
        let cfg = &self.config;
        if sample_rate != cfg.sample_rate {
            return Err(AsdError::Input(format!(
                "sample rate {sample_rate} Hz, expected {} Hz",
                cfg.sample_rate
            )));
        }
        let t = cfg.mfcc_frame_count(samples.len());
        if t == 0 {
            return Err(AsdError::Input(format!(
                "{} samples is shorter than one {}-sample analysis window",
                samples.len(),
                cfg.window_samples()
            )));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(AsdError::Input("non-finite audio sample".into()));
        }
        let (win, hop) = (cfg.window_samples(), cfg.hop_samples());
        let mut frames = Tensor::zeros(vec![t, cfg.n_mfcc]);
        for i in 0..t {
            self.frame(&samples[i * hop..i * hop + win], frames.row_mut(i));
        }
        frames.ensure_finite("compute_mfcc")?;
        Ok(MfccSequence {
            frames,
            hop_s: cfg.hop_s,
            window_s: cfg.window_s,
        })
    }
}

/// Pre-emphasis → Hamming window → power spectrum → mel filterbank → log →
/// DCT-II, one row per hop.
pub fn compute_mfcc<S: Scalar>(samples: &[S], sample_rate: u32, config: &FrontendConfig) -> Result<MfccSequence<S>> {
    MfccExtractor::new(config)?.compute(samples, sample_rate)
}

/// Full-length power spectrum `|X[k]|²` of `x` (no padding, all `N` bins).
pub fn dft_power<S: Scalar>(x: &[S]) -> Vec<S> {
    let mut buf: Vec<Complex<S>> = x.iter().map(|&v| Complex::new(v, S::zero())).collect();
    FftPlanner::new().plan_fft_forward(x.len()).process(&mut buf);
    buf.iter().map(|c| c.norm_sqr()).collect()
}

/// ITU-R BT.601 luma.
pub fn rgb_to_gray(r: u8, g: u8, b: u8) -> f64 {
    0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64
}

/// Bilinear resize of one `h0 × w0` grayscale image to `h × w` using
/// half-pixel centres, followed by `/255` and standardization.
pub fn preprocess_face_frame<S: Scalar>(
    raw: &[u8],
    (h0, w0): (usize, usize),
    (h, w): (usize, usize),
    mean: f64,
    std: f64,
    out: &mut [S],
) {
    let sy = h0 as f64 / h as f64;
    let sx = w0 as f64 / w as f64;
    let axis = |dst: usize, scale: f64, len: usize| {
        let src = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, src - i0 as f64)
    };
    for y in 0..h {
        let (y0, y1, fy) = axis(y, sy, h0);
        for x in 0..w {
            let (x0, x1, fx) = axis(x, sx, w0);
            let p = |yy: usize, xx: usize| raw[yy * w0 + xx] as f64;
            let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
            let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
            let v = top * (1.0 - fy) + bottom * fy;
            out[y * w + x] = lit((v / 255.0 - mean) / std);
        }
    }
}

/// Normalizes `n_frames` pre-cropped `h0 × w0` uint8 faces to `[T × 1 × H × W]`.
pub fn preprocess_faces<S: Scalar>(
    raw: &[u8],
    n_frames: usize,
    source: (usize, usize),
    target: (usize, usize),
    config: &FrontendConfig,
) -> Result<FaceFrameSequence<S>> {
    let (h0, w0) = source;
    let (h, w) = target;
    if n_frames == 0 {
        return Err(AsdError::Input("no face frames".into()));
    }
    if h0 == 0 || w0 == 0 || h == 0 || w == 0 {
        return Err(AsdError::Input("zero-sized face image".into()));
    }
    if raw.len() != n_frames * h0 * w0 {
        return Err(AsdError::Input(format!(
            "{} bytes of face data, expected {n_frames}×{h0}×{w0}",
            raw.len()
        )));
    }
    let mut frames = Tensor::zeros(vec![n_frames, 1, h, w]);
    for t in 0..n_frames {
        preprocess_face_frame(
            &raw[t * h0 * w0..(t + 1) * h0 * w0],
            source,
            target,
            config.face_mean,
            config.face_std,
            frames.row_mut(t),
        );
    }
    Ok(FaceFrameSequence {
        frames,
        fps: config.fps,
    })
}

/// Video frames kept when `t_a` MFCC frames meet `t_v` video frames at
/// `ratio` MFCC frames per video frame.
pub fn aligned_frames(t_a: usize, t_v: usize, ratio: usize) -> Result<usize> {
    if t_a.abs_diff(ratio * t_v) > ratio {
        return Err(AsdError::Alignment(format!(
            "{t_a} MFCC frames vs {t_v} video frames drift by more than one video frame"
        )));
    }
    let t = t_v.min(t_a / ratio);
    if t == 0 {
        return Err(AsdError::Alignment("less than one aligned video frame".into()));
    }
    Ok(t)
}

/// Truncates both streams so `T_a == R·T_v`, failing on more than one video
/// frame of drift. Returns the aligned pair and `R`.
pub fn align_streams<S: Scalar>(
    audio: MfccSequence<S>,
    video: FaceFrameSequence<S>,
) -> Result<(MfccSequence<S>, FaceFrameSequence<S>, usize)> {
    if audio.is_empty() || video.is_empty() {
        return Err(AsdError::Alignment("empty stream".into()));
    }
    let r = 1.0 / (video.fps * audio.hop_s);
    if (r - r.round()).abs() > 1e-6 || r.round() < 1.0 {
        return Err(AsdError::Alignment(format!(
            "hop {} s does not divide the video frame period at {} fps",
            audio.hop_s, video.fps
        )));
    }
    let ratio = r.round() as usize;
    let t_v2 = aligned_frames(audio.len(), video.len(), ratio)?;
    let audio = MfccSequence {
        frames: audio.frames.slice_rows(0, t_v2 * ratio),
        ..audio
    };
    let video = FaceFrameSequence {
        frames: video.frames.slice_rows(0, t_v2),
        ..video
    };
    Ok((audio, video, ratio))
}

/// Reads a PCM16 mono WAV file as samples scaled to `[-1, 1)`.
pub fn read_wav(path: impl AsRef<Path>, expected_rate: u32) -> Result<Vec<f64>> {
    let reader = hound::WavReader::open(path.as_ref())?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(AsdError::Input(format!(
            "WAV must be PCM16 mono, got {} channel(s) of {}-bit {:?}",
            spec.channels, spec.bits_per_sample, spec.sample_format
        )));
    }
    if spec.sample_rate != expected_rate {
        return Err(AsdError::Input(format!(
            "WAV sample rate {} Hz, expected {expected_rate} Hz",
            spec.sample_rate
        )));
    }
    reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0).map_err(AsdError::from))
        .collect()
}

pub fn write_wav(path: impl AsRef<Path>, samples: &[i16], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path.as_ref(), spec)?;
    for &s in samples {
        w.write_sample(s)?;
    }
    w.finalize()?;
    Ok(())
}

pub const FACESTREAM_MAGIC: [u8; 4] = *b"FSTR";
pub const FACESTREAM_VERSION: u32 = 1;

/// Grayscale face crops: `"FSTR"`, u32 version, u32 n_frames, u16 H, u16 W
/// (little-endian), then `n_frames·H·W` bytes row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FaceStream {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl FaceStream {
    pub fn n_frames(&self) -> usize {
        self.pixels.len().checked_div(self.height * self.width).unwrap_or(0)
    }

    pub fn frame(&self, i: usize) -> &[u8] {
        let n = self.height * self.width;
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let h = u16::try_from(self.height).map_err(|_| AsdError::Input("face height exceeds u16".into()))?;
        let w = u16::try_from(self.width).map_err(|_| AsdError::Input("face width exceeds u16".into()))?;
        let mut buf = Vec::with_capacity(16 + self.pixels.len());
        buf.extend_from_slice(&FACESTREAM_MAGIC);
        buf.extend_from_slice(&FACESTREAM_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.n_frames() as u32).to_le_bytes());
        buf.extend_from_slice(&h.to_le_bytes());
        buf.extend_from_slice(&w.to_le_bytes());
        buf.extend_from_slice(&self.pixels);
        Ok(buf)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(AsdError::Truncated("facestream header"));
        }
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if magic != FACESTREAM_MAGIC {
            return Err(AsdError::BadMagic {
                what: "facestream",
                expected: FACESTREAM_MAGIC,
                found: magic,
            });
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FACESTREAM_VERSION {
            return Err(AsdError::Version {
                what: "facestream",
                version,
            });
        }
        let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let height = u16::from_le_bytes(bytes[12..14].try_into().unwrap()) as usize;
        let width = u16::from_le_bytes(bytes[14..16].try_into().unwrap()) as usize;
        let need = n * height * width;
        if bytes.len() - 16 < need {
            return Err(AsdError::Truncated("facestream pixels"));
        }
        if bytes.len() - 16 > need {
            return Err(AsdError::Input("trailing bytes after facestream pixels".into()));
        }
        Ok(FaceStream {
            height,
            width,
            pixels: bytes[16..].to_vec(),
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::decode(&fs::read(path).map_err(|e| AsdError::io(path, e))?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.encode()?;
        fs::File::create(path)
            .and_then(|mut f| f.write_all(&bytes))
            .map_err(|e| AsdError::io(path, e))
    }
}

//! `asd` command-line front end.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 verification
//! failure.

use std::collections::HashMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use asd_core::cost::{self, CostConfig, CostFusion, GRID_HEADER};
use asd_core::frontend::{aligned_frames, preprocess_face_frame, read_wav, MfccExtractor};
use asd_core::metrics::{average_precision, map_over_groups};
use asd_core::model_io::encode_container;
use asd_core::{
    compare_streams, init_random, load_weights, offline_forward, save_weights, synthetic_clip, AsdError, AsdModel,
    ContextBound, ContextConfig, Emission, FaceFrameSequence, FaceStream, MfccSequence, ModelConfig, ParamSet,
    StreamSession, Tensor,
};
use clap::{Args, Parser, Subcommand};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_VERIFY: i32 = 3;

pub const SCORES_HEADER: [&str; 2] = ["frame_index", "score"];
pub const TIMINGS_HEADER: [&str; 5] = ["frame_index", "frontend_us", "encoder_us", "attention_us", "total_us"];
pub const MFCC_TENSOR: &str = "mfcc";

#[derive(Debug, Parser)]
#[command(name = "asd", version, about = "Streaming audio-visual active speaker detection")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a randomly initialized weights file.
    Init {
        /// Model configuration JSON; defaults to the built-in configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a clip frame by frame through the streaming engine.
    Infer(InferArgs),
    /// Score a clip with the full-sequence reference path.
    InferOffline(InferArgs),
    /// Compare streaming output with the reference path on synthetic input.
    Verify {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        frames: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        past: ContextBound,
        #[arg(long)]
        future: ContextBound,
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
    },
    /// Latency and memory for a context, or a CSV grid over ranges.
    Cost {
        /// `A` or `A:B`; `inf` for no bound.
        #[arg(long)]
        past: String,
        #[arg(long)]
        future: String,
        #[arg(long, default_value_t = 0)]
        encoder_future: usize,
        /// transformer, uni-gru or bi-gru.
        #[arg(long, default_value = "transformer")]
        fusion: CostFusion,
        #[arg(long, default_value_t = 1)]
        depth: usize,
        #[arg(long, default_value_t = 25.0)]
        fps: f64,
        #[arg(long, default_value_t = cost::DEFAULT_BYTES_PER_FRAME)]
        bytes_per_frame: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Mean average precision of a scores file against labels.
    Eval {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        /// Column naming the group for per-group averaging.
        #[arg(long)]
        group_col: Option<String>,
    },
    /// Dump MFCC features of a WAV file.
    Mfcc {
        #[arg(long)]
        audio: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
struct InferArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    audio: PathBuf,
    #[arg(long)]
    faces: PathBuf,
    /// Defaults to the context stored in the model configuration.
    #[arg(long)]
    past: Option<ContextBound>,
    #[arg(long)]
    future: Option<ContextBound>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    timings: Option<PathBuf>,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(String),
    Verify,
}

impl From<AsdError> for Failure {
    fn from(e: AsdError) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        Failure::Data(format!("csv: {e}"))
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| Failure::Data(format!("{}: {e}", path.display()))
}

/// Parses `args` (program name first) and runs the command.
pub fn dispatch<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    match run(cli.command) {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            EXIT_USAGE
        }
        Err(Failure::Data(m)) => {
            eprintln!("error: {m}");
            EXIT_DATA
        }
        Err(Failure::Verify) => EXIT_VERIFY,
    }
}

fn run(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Init { config, seed, out } => init(config.as_deref(), seed, &out),
        Command::Infer(a) => infer(&a),
        Command::InferOffline(a) => infer_offline(&a),
        Command::Verify {
            model,
            frames,
            seed,
            past,
            future,
            tol,
        } => verify(model.as_deref(), frames, seed, ContextConfig { past, future }, tol),
        Command::Cost {
            past,
            future,
            encoder_future,
            fusion,
            depth,
            fps,
            bytes_per_frame,
            out,
        } => {
            let cfg = CostConfig {
                fps,
                bytes_per_frame,
                encoder_future,
                depth,
                kind: fusion,
                ..CostConfig::default()
            };
            cost_cmd(&past, &future, &cfg, out.as_deref())
        }
        Command::Eval {
            scores,
            labels,
            group_col,
        } => eval(&scores, &labels, group_col.as_deref()),
        Command::Mfcc { audio, out } => mfcc(&audio, &out),
    }
}

fn init(config: Option<&Path>, seed: u64, out: &Path) -> Result<(), Failure> {
    let cfg = match config {
        Some(p) => ModelConfig::from_json(&fs::read_to_string(p).map_err(io_err(p))?)?,
        None => ModelConfig::default(),
    };
    let params = init_random::<f32>(&cfg, seed)?;
    save_weights(&params, out)?;
    eprintln!(
        "wrote {} ({} tensors, {} values)",
        out.display(),
        params.tensors().len(),
        params.total_values()
    );
    Ok(())
}

fn context_or_default(cfg: &ModelConfig, past: Option<ContextBound>, future: Option<ContextBound>) -> ContextConfig {
    ContextConfig {
        past: past.unwrap_or(cfg.context.past),
        future: future.unwrap_or(cfg.context.future),
    }
}

/// Decoded inputs of one clip, not yet featurized.
struct Clip {
    samples: Vec<f32>,
    faces: FaceStream,
    frames: usize,
}

fn load_clip(cfg: &ModelConfig, audio: &Path, faces: &Path) -> Result<Clip, Failure> {
    let fe = &cfg.frontend;
    let samples: Vec<f32> = read_wav(audio, fe.sample_rate)?.into_iter().map(|v| v as f32).collect();
    let faces = FaceStream::read(faces)?;
    if faces.height == 0 || faces.width == 0 || faces.n_frames() == 0 {
        return Err(Failure::Data("face stream is empty".into()));
    }
    let ratio = cfg.encoder.audio_downsample();
    let frames = aligned_frames(fe.mfcc_frame_count(samples.len()), faces.n_frames(), ratio)?;
    Ok(Clip { samples, faces, frames })
}

fn write_scores(path: &Path, rows: impl Iterator<Item = (usize, f64)>) -> Result<(), Failure> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(SCORES_HEADER)?;
    for (i, s) in rows {
        w.write_record([i.to_string(), s.to_string()])?;
    }
    w.flush().map_err(io_err(path))
}

fn infer(a: &InferArgs) -> Result<(), Failure> {
    let params = load_weights::<f32>(&a.model)?;
    let cfg = params.config().clone();
    let ctx = context_or_default(&cfg, a.past, a.future);
    let clip = load_clip(&cfg, &a.audio, &a.faces)?;
    let model = Arc::new(AsdModel::from_params(&params)?);
    drop(params);
    let mut session = StreamSession::open(model, ctx)?;

    let extractor = MfccExtractor::<f32>::new(&cfg.frontend)?;
    let (win, hop) = (cfg.frontend.window_samples(), cfg.frontend.hop_samples());
    let ratio = cfg.encoder.audio_downsample();
    let n_mfcc = cfg.frontend.n_mfcc;
    let side = cfg.encoder.face_size;
    let mut face = vec![0f32; side * side];
    let mut mfcc = vec![0f32; ratio * n_mfcc];
    let mut emissions: Vec<Emission<f32>> = Vec::with_capacity(clip.frames);

    let start = Instant::now();
    for t in 0..clip.frames {
        let fe = Instant::now();
        preprocess_face_frame(
            clip.faces.frame(t),
            (clip.faces.height, clip.faces.width),
            (side, side),
            cfg.frontend.face_mean,
            cfg.frontend.face_std,
            &mut face,
        );
        for (j, out) in mfcc.chunks_exact_mut(n_mfcc).enumerate() {
            let s = (t * ratio + j) * hop;
            extractor.frame(&clip.samples[s..s + win], out);
        }
        let frontend_us = fe.elapsed().as_micros() as u64;
        emissions.extend(session.push_timed(&face, &mfcc, frontend_us)?);
    }
    emissions.extend(session.flush()?);
    let elapsed = start.elapsed().as_secs_f64();

    write_scores(&a.out, emissions.iter().map(|e| (e.frame_index, e.probability as f64)))?;
    if let Some(path) = &a.timings {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(TIMINGS_HEADER)?;
        for e in &emissions {
            let t = e.timings;
            w.write_record(
                [
                    e.frame_index,
                    t.frontend_us as usize,
                    t.encoder_us as usize,
                    t.attention_us as usize,
                    t.total_us as usize,
                ]
                .map(|v| v.to_string()),
            )?;
        }
        w.flush().map_err(io_err(path))?;
    }
    let n = emissions.len().max(1) as f64;
    let mean = |f: fn(&Emission<f32>) -> u64| emissions.iter().map(|e| f(e) as f64).sum::<f64>() / n;
    let fp = session.memory_footprint();
    eprintln!(
        "frames={} elapsed_s={:.3} fps={:.1} context={} mean_us frontend={:.0} encoder={:.0} attention={:.0} total={:.0} state_bytes={}",
        emissions.len(),
        elapsed,
        emissions.len() as f64 / elapsed.max(1e-9),
        ctx,
        mean(|e| e.timings.frontend_us),
        mean(|e| e.timings.encoder_us),
        mean(|e| e.timings.attention_us),
        mean(|e| e.timings.total_us),
        fp.conv_tails + fp.embed_ring + fp.recurrent_state,
    );
    Ok(())
}

fn infer_offline(a: &InferArgs) -> Result<(), Failure> {
    let params = load_weights::<f32>(&a.model)?;
    let cfg = params.config().clone();
    let ctx = context_or_default(&cfg, a.past, a.future);
    let clip = load_clip(&cfg, &a.audio, &a.faces)?;
    let start = Instant::now();
    let x_a = MfccExtractor::<f32>::new(&cfg.frontend)?.compute(&clip.samples, cfg.frontend.sample_rate)?;
    let side = cfg.encoder.face_size;
    let mut faces = Tensor::zeros(vec![clip.frames, 1, side, side]);
    for t in 0..clip.frames {
        preprocess_face_frame(
            clip.faces.frame(t),
            (clip.faces.height, clip.faces.width),
            (side, side),
            cfg.frontend.face_mean,
            cfg.frontend.face_std,
            faces.row_mut(t),
        );
    }
    let x_v = FaceFrameSequence {
        frames: faces,
        fps: cfg.frontend.fps,
    };
    let logits = offline_forward(&x_a, &x_v, ctx, &params)?;
    if let Some(path) = &a.timings {
        eprintln!(
            "note: per-frame timings are not recorded offline; {} not written",
            path.display()
        );
    }
    write_scores(
        &a.out,
        logits
            .iter()
            .enumerate()
            .map(|(i, &l)| (i, 1.0 / (1.0 + (-(l as f64)).exp()))),
    )?;
    eprintln!(
        "frames={} elapsed_s={:.3} context={ctx}",
        logits.len(),
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

/// Streams `frames` synthetic frames and checks every emission against the
/// reference path.
fn verify(model: Option<&Path>, frames: usize, seed: u64, ctx: ContextConfig, tol: f64) -> Result<(), Failure> {
    if frames == 0 {
        return Err(Failure::Usage("--frames must be positive".into()));
    }
    if !ctx.is_bounded() {
        return Err(Failure::Usage("verify needs a bounded --past and --future".into()));
    }
    let params: ParamSet<f32> = match model {
        Some(p) => load_weights(p)?,
        None => init_random(&ModelConfig::default(), seed)?,
    };
    let (x_a, x_v): (MfccSequence<f32>, FaceFrameSequence<f32>) =
        synthetic_clip(params.config(), frames, seed ^ 0x5EED_DA7A);
    let reference = offline_forward(&x_a, &x_v, ctx, &params)?;
    let streamed = asd_core::stream_clip(Arc::new(AsdModel::from_params(&params)?), x_a, x_v, ctx)?;
    let indices_ok = streamed.iter().enumerate().all(|(i, e)| e.frame_index == i);
    let logits: Vec<f32> = streamed.iter().map(|e| e.logit).collect();
    let report = compare_streams(&logits, &reference, tol);
    println!(
        "max_abs_diff={:.3e} frame={} frames={} tol={:e} {}",
        report.max_abs_diff,
        report.argmax_frame,
        report.frames,
        tol,
        if report.pass && indices_ok { "PASS" } else { "FAIL" }
    );
    if report.pass && indices_ok {
        Ok(())
    } else {
        Err(Failure::Verify)
    }
}

fn cost_cmd(past: &str, future: &str, cfg: &CostConfig, out: Option<&Path>) -> Result<(), Failure> {
    let usage = |e: AsdError| Failure::Usage(e.to_string());
    let past = cost::parse_range(past).map_err(usage)?;
    let future = cost::parse_range(future).map_err(usage)?;
    cfg.validate().map_err(usage)?;
    let rows = cost::sweep_grid(&past, &future, cfg)?;
    if rows.len() == 1 && out.is_none() {
        println!("latency_ms={} memory={}", rows[0].latency_ms, rows[0].memory_bytes);
        return Ok(());
    }
    let sink: Box<dyn Write> = match out {
        Some(p) => Box::new(fs::File::create(p).map_err(io_err(p))?),
        None => Box::new(std::io::stdout()),
    };
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(GRID_HEADER)?;
    for r in &rows {
        w.write_record(r.fields())?;
    }
    w.flush().map_err(|e| Failure::Data(e.to_string()))
}

fn read_table(path: &Path) -> Result<(csv::StringRecord, Vec<csv::StringRecord>), Failure> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
    let headers = r.headers()?.clone();
    let rows = r.records().collect::<Result<Vec<_>, _>>()?;
    Ok((headers, rows))
}

fn column(headers: &csv::StringRecord, name: &str, path: &Path) -> Result<usize, Failure> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| Failure::Data(format!("{}: no `{name}` column", path.display())))
}

fn eval(scores: &Path, labels: &Path, group_col: Option<&str>) -> Result<(), Failure> {
    let (sh, srows) = read_table(scores)?;
    let (lh, lrows) = read_table(labels)?;
    let (s_idx, s_val) = (column(&sh, "frame_index", scores)?, column(&sh, "score", scores)?);
    let (l_idx, l_val) = (column(&lh, "frame_index", labels)?, column(&lh, "label", labels)?);
    let s_grp = group_col.map(|g| column(&sh, g, scores)).transpose()?;
    let l_grp = group_col.map(|g| column(&lh, g, labels)).transpose()?;
    let bad =
        |path: &Path, line: usize, what: &str| Failure::Data(format!("{}: row {line}: bad {what}", path.display()));

    let mut score_of: HashMap<(String, u64), f64> = HashMap::new();
    for (i, r) in srows.iter().enumerate() {
        let key = (
            s_grp.map_or(String::new(), |g| r[g].trim().to_string()),
            r[s_idx].trim().parse().map_err(|_| bad(scores, i + 2, "frame_index"))?,
        );
        let v: f64 = r[s_val].trim().parse().map_err(|_| bad(scores, i + 2, "score"))?;
        if score_of.insert(key, v).is_some() {
            return Err(Failure::Data(format!(
                "{}: duplicate frame at row {}",
                scores.display(),
                i + 2
            )));
        }
    }
    let mut joined = Vec::with_capacity(lrows.len());
    let mut unmatched = 0usize;
    for (i, r) in lrows.iter().enumerate() {
        let group = l_grp.map_or(String::new(), |g| r[g].trim().to_string());
        let frame: u64 = r[l_idx].trim().parse().map_err(|_| bad(labels, i + 2, "frame_index"))?;
        let label = match r[l_val].trim() {
            "1" => true,
            "0" => false,
            _ => return Err(bad(labels, i + 2, "label (expected 0 or 1)")),
        };
        match score_of.get(&(group.clone(), frame)) {
            Some(&s) => joined.push((group, s, label)),
            None => unmatched += 1,
        }
    }
    if unmatched > 0 {
        eprintln!("warning: {unmatched} labelled frame(s) have no score and were ignored");
    }
    if joined.is_empty() {
        return Err(Failure::Data("no labelled frame has a score".into()));
    }
    if group_col.is_some() {
        let g = map_over_groups(&joined)?;
        for (name, ap) in &g.per_group {
            println!("group={name} ap={ap:.6}");
        }
        if !g.skipped.is_empty() {
            eprintln!("warning: {} group(s) without positives skipped", g.skipped.len());
        }
        println!(
            "mAP={:.6} groups={} skipped={}",
            g.map,
            g.per_group.len(),
            g.skipped.len()
        );
    } else {
        let scores: Vec<f64> = joined.iter().map(|r| r.1).collect();
        let labels: Vec<bool> = joined.iter().map(|r| r.2).collect();
        println!(
            "mAP={:.6} frames={}",
            average_precision(&scores, &labels)?,
            joined.len()
        );
    }
    Ok(())
}

/// MFCC features as a weights-format container: the model configuration
/// they were computed with, plus one `[T × n_mfcc]` tensor named `mfcc`.
pub fn encode_mfcc(seq: &MfccSequence<f32>, config: &ModelConfig) -> Result<Vec<u8>, AsdError> {
    encode_container(&config.to_json(), [(MFCC_TENSOR, &seq.frames)])
}

fn mfcc(audio: &Path, out: &Path) -> Result<(), Failure> {
    let cfg = ModelConfig::default();
    let fe = &cfg.frontend;
    let samples: Vec<f32> = read_wav(audio, fe.sample_rate)?.into_iter().map(|v| v as f32).collect();
    let seq = MfccExtractor::<f32>::new(fe)?.compute(&samples, fe.sample_rate)?;
    fs::write(out, encode_mfcc(&seq, &cfg)?).map_err(io_err(out))?;
    eprintln!(
        "wrote {} frames × {} coefficients",
        seq.frames.rows(),
        seq.frames.row_len()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_codes() {
        assert_eq!(dispatch(["asd"]), EXIT_USAGE);
        assert_eq!(dispatch(["asd", "frobnicate"]), EXIT_USAGE);
        assert_eq!(dispatch(["asd", "cost", "--past", "3"]), EXIT_USAGE);
        assert_eq!(dispatch(["asd", "cost", "--past", "3:1", "--future", "0"]), EXIT_USAGE);
        assert_eq!(dispatch(["asd", "--help"]), EXIT_OK);
    }

    #[test]
    fn cost_single_cell() {
        assert_eq!(dispatch(["asd", "cost", "--past", "32", "--future", "8"]), EXIT_OK);
        assert_eq!(
            dispatch(["asd", "cost", "--past", "1", "--future", "0", "--fusion", "bi-gru"]),
            EXIT_OK
        );
    }

    #[test]
    fn mfcc_encoding() {
        let seq = MfccSequence {
            frames: Tensor::new(vec![2, 2], vec![1.0f32, -2.0, 0.5, 3.0]).unwrap(),
            hop_s: 0.01,
            window_s: 0.025,
        };
        let cfg = ModelConfig::default();
        let c = asd_core::model_io::decode_container::<f32>(&encode_mfcc(&seq, &cfg).unwrap()).unwrap();
        assert_eq!(ModelConfig::from_json(&c.config_text).unwrap(), cfg);
        assert_eq!(c.tensors.len(), 1);
        assert_eq!(c.tensors[0].0, MFCC_TENSOR);
        assert_eq!(c.tensors[0].1, seq.frames);
    }
}

//! Model configuration, deterministic parameter initialization and the
//! `ASDW` named-tensor container.
//!
//! # Container layout
//!
//! All integers and values are little-endian.
//!
//! ```text
//! magic           4 bytes  "ASDW"
//! version         u32      1
//! config_len      u32
//! config          config_len bytes of UTF-8 JSON
//! repeated until end of file:
//!   name_len      u16
//!   name          name_len bytes of UTF-8
//!   rank          u8
//!   dims          rank × u32
//!   data          product(dims) × f32
//! ```
//!
//! # Initialization PRNG
//!
//! `init_random` draws from xorshift64*: the seed is first mixed with one
//! SplitMix64 step (`z = seed + 0x9E3779B97F4A7C15; z = (z ^ z>>30)·0xBF58476D1CE4E5B9;
//! z = (z ^ z>>27)·0x94D049BB133111EB; z ^= z>>31`, wrapping arithmetic), a
//! zero state is replaced by `0x9E3779B97F4A7C15`, and each draw performs
//! `x ^= x>>12; x ^= x<<25; x ^= x>>27` and returns `x·0x2545F4914F6CDD1D`.
//! A unit uniform is `(draw >> 11) · 2⁻⁵³`. Tensors are filled in the order of
//! [`ModelConfig::tensor_specs`], row-major; every weight value is
//! `(2u − 1)/√fan_in` rounded to `f32`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoders::EncoderConfig;
use crate::error::{AsdError, Result};
use crate::frontend::FrontendConfig;
use crate::fusion::{ContextConfig, FusionConfig, FusionKind};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const WEIGHTS_MAGIC: [u8; 4] = *b"ASDW";
pub const WEIGHTS_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub fusion: FusionConfig,
    pub frontend: FrontendConfig,
    /// Context used by the CLI when `--past` / `--future` are not given.
    pub context: ContextConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            fusion: FusionConfig::default(),
            frontend: FrontendConfig::default(),
            context: ContextConfig::bounded(32, 8),
        }
    }
}

/// How a tensor is initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitRule {
    /// Uniform in ±1/√fan_in.
    Uniform {
        fan_in: usize,
    },
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub dims: Vec<usize>,
    pub init: InitRule,
}

impl TensorSpec {
    fn weight(name: String, dims: Vec<usize>, fan_in: usize) -> Self {
        TensorSpec {
            name,
            dims,
            init: InitRule::Uniform { fan_in },
        }
    }

    fn bias(name: String, n: usize) -> Self {
        TensorSpec {
            name,
            dims: vec![n],
            init: InitRule::Zeros,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.fusion.validate()?;
        self.frontend.validate()?;
        if self.fusion.d_model != 2 * self.encoder.embed_dim {
            return Err(AsdError::Config(format!(
                "fusion d_model {} must equal twice the embedding width {}",
                self.fusion.d_model, self.encoder.embed_dim
            )));
        }
        let ratio = self.frontend.audio_frames_per_video_frame()?;
        if self.encoder.audio_downsample() != ratio {
            return Err(AsdError::Config(format!(
                "audio encoder downsamples by {} but the frontend yields {ratio} MFCC frames per video frame",
                self.encoder.audio_downsample()
            )));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Every tensor the model needs, in initialization order.
    pub fn tensor_specs(&self) -> Vec<TensorSpec> {
        let e = &self.encoder;
        let mut specs = Vec::new();
        for (modality, c_first) in [("visual", 1usize), ("audio", self.frontend.n_mfcc)] {
            let mut c_in = c_first;
            for (bi, &c_out) in e.channels.iter().enumerate() {
                for (ki, &k) in e.branch_kernels.iter().enumerate() {
                    let base = format!("{modality}.block{}.branch{}", bi + 1, ki + 1);
                    let sk = e.spatial_kernel;
                    let (s_dims, s_fan) = if modality == "visual" {
                        (vec![c_out, c_in, sk, sk], c_in * sk * sk)
                    } else {
                        (vec![e.audio_stage_kernel, c_in, c_out], e.audio_stage_kernel * c_in)
                    };
                    specs.push(TensorSpec::weight(format!("{base}.s_conv.weight"), s_dims, s_fan));
                    specs.push(TensorSpec::bias(format!("{base}.s_conv.bias"), c_out));
                    specs.push(TensorSpec::weight(
                        format!("{base}.t_conv.weight"),
                        vec![k, c_out, c_out],
                        k * c_out,
                    ));
                    specs.push(TensorSpec::bias(format!("{base}.t_conv.bias"), c_out));
                }
                c_in = c_out;
            }
            specs.push(TensorSpec::weight(
                format!("{modality}.proj.weight"),
                vec![c_in, e.embed_dim],
                c_in,
            ));
            specs.push(TensorSpec::bias(format!("{modality}.proj.bias"), e.embed_dim));
        }
        specs.push(TensorSpec::weight(
            "visual.aux.weight".into(),
            vec![e.embed_dim, 1],
            e.embed_dim,
        ));
        specs.push(TensorSpec::bias("visual.aux.bias".into(), 1));

        let f = &self.fusion;
        let d = f.d_model;
        match f.kind {
            FusionKind::Transformer => {
                for l in 1..=f.depth {
                    let base = format!("fusion.layer{l}");
                    for norm in ["norm1", "norm2"] {
                        specs.push(TensorSpec {
                            name: format!("{base}.{norm}.weight"),
                            dims: vec![d],
                            init: InitRule::Ones,
                        });
                        specs.push(TensorSpec::bias(format!("{base}.{norm}.bias"), d));
                    }
                    for proj in ["q", "k", "v", "o"] {
                        specs.push(TensorSpec::weight(format!("{base}.{proj}.weight"), vec![d, d], d));
                        specs.push(TensorSpec::bias(format!("{base}.{proj}.bias"), d));
                    }
                    specs.push(TensorSpec::weight(format!("{base}.ff1.weight"), vec![d, f.d_ff], d));
                    specs.push(TensorSpec::bias(format!("{base}.ff1.bias"), f.d_ff));
                    specs.push(TensorSpec::weight(
                        format!("{base}.ff2.weight"),
                        vec![f.d_ff, d],
                        f.d_ff,
                    ));
                    specs.push(TensorSpec::bias(format!("{base}.ff2.bias"), d));
                }
                specs.push(TensorSpec::weight("fusion.classifier.weight".into(), vec![d, 1], d));
                specs.push(TensorSpec::bias("fusion.classifier.bias".into(), 1));
            }
            FusionKind::Gru => {
                let h = f.gru_hidden;
                for g in ["wz", "wr", "wh"] {
                    specs.push(TensorSpec::weight(format!("fusion.gru.{g}"), vec![d, h], d));
                }
                for g in ["uz", "ur", "uh"] {
                    specs.push(TensorSpec::weight(format!("fusion.gru.{g}"), vec![h, h], h));
                }
                for g in ["bz", "br", "bh"] {
                    specs.push(TensorSpec::bias(format!("fusion.gru.{g}"), h));
                }
                specs.push(TensorSpec::weight("fusion.classifier.weight".into(), vec![h, 1], h));
                specs.push(TensorSpec::bias("fusion.classifier.bias".into(), 1));
            }
        }
        specs
    }
}

/// SplitMix64-seeded xorshift64* generator; see the module docs for the exact
/// recurrence.
#[derive(Debug, Clone)]
pub struct XorShift64Star {
    state: u64,
}

impl XorShift64Star {
    pub fn new(seed: u64) -> Self {
        let mut z = seed.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
        if z == 0 {
            z = 0x9E37_79B9_7F4A_7C15;
        }
        XorShift64Star { state: z }
    }

    pub fn next_u64(&mut self) -> u64 {
        let mut x = self.state;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        self.state = x;
        x.wrapping_mul(0x2545_F491_4F6C_DD1D)
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn next_uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }
}

/// A named parameter set bound to the configuration that shaped it.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<S> {
    config: ModelConfig,
    tensors: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> ParamSet<S> {
    /// Builds a parameter set, checking it holds exactly the tensors the
    /// configuration requires with matching dims.
    pub fn new(config: ModelConfig, tensors: BTreeMap<String, Tensor<S>>) -> Result<Self> {
        config.validate()?;
        let specs = config.tensor_specs();
        for spec in &specs {
            let t = tensors
                .get(&spec.name)
                .ok_or_else(|| AsdError::MissingTensor(spec.name.clone()))?;
            if t.shape() != spec.dims.as_slice() {
                return Err(AsdError::TensorDims {
                    name: spec.name.clone(),
                    expected: spec.dims.clone(),
                    found: t.shape().to_vec(),
                });
            }
        }
        if tensors.len() != specs.len() {
            let known: std::collections::HashSet<&str> = specs.iter().map(|s| s.name.as_str()).collect();
            let extra = tensors
                .keys()
                .find(|k| !known.contains(k.as_str()))
                .cloned()
                .unwrap_or_default();
            return Err(AsdError::UnexpectedTensor(extra));
        }
        Ok(ParamSet { config, tensors })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<S>> {
        self.tensors
            .get(name)
            .ok_or_else(|| AsdError::MissingTensor(name.to_string()))
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor<S>> {
        &self.tensors
    }

    pub fn total_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn cast<T: Scalar>(&self) -> ParamSet<T> {
        ParamSet {
            config: self.config.clone(),
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }
}

/// Deterministic initialization: weights uniform in ±1/√fan_in, biases zero,
/// normalization gains one.
pub fn init_random<S: Scalar>(config: &ModelConfig, seed: u64) -> Result<ParamSet<S>> {
    config.validate()?;
    let mut rng = XorShift64Star::new(seed);
    let mut tensors = BTreeMap::new();
    for spec in config.tensor_specs() {
        let n: usize = spec.dims.iter().product();
        let data: Vec<S> = match spec.init {
            InitRule::Zeros => vec![S::zero(); n],
            InitRule::Ones => vec![S::one(); n],
            InitRule::Uniform { fan_in } => {
                let bound = 1.0 / (fan_in as f64).sqrt();
                (0..n)
                    .map(|_| S::widen_f32(((2.0 * rng.next_f64() - 1.0) * bound) as f32))
                    .collect()
            }
        };
        tensors.insert(spec.name, Tensor::new(spec.dims, data)?);
    }
    ParamSet::new(config.clone(), tensors)
}

/// Serializes a container: config text plus named tensors, values as `f32`.
pub fn encode_container<'a, S: Scalar>(
    config_text: &str,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor<S>)>,
) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&WEIGHTS_MAGIC);
    buf.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    buf.extend_from_slice(&(config_text.len() as u32).to_le_bytes());
    buf.extend_from_slice(config_text.as_bytes());
    for (name, t) in tensors {
        let name_len =
            u16::try_from(name.len()).map_err(|_| AsdError::Input(format!("tensor name too long: {name}")))?;
        let rank = u8::try_from(t.rank()).map_err(|_| AsdError::Input(format!("tensor {name} rank too large")))?;
        buf.extend_from_slice(&name_len.to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| AsdError::Input(format!("tensor {name} dim too large")))?;
            buf.extend_from_slice(&d.to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_f32_lossy().to_le_bytes());
        }
    }
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(AsdError::Truncated("weights file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

/// Parsed container contents in file order.
#[derive(Debug, Clone)]
pub struct Container<S> {
    pub config_text: String,
    pub tensors: Vec<(String, Tensor<S>)>,
}

pub fn decode_container<S: Scalar>(bytes: &[u8]) -> Result<Container<S>> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r
        .take(4)
        .map_err(|_| AsdError::Truncated("weights header"))?
        .try_into()
        .unwrap();
    if magic != WEIGHTS_MAGIC {
        return Err(AsdError::BadMagic {
            what: "weights file",
            expected: WEIGHTS_MAGIC,
            found: magic,
        });
    }
    let version = r.u32()?;
    if version != WEIGHTS_VERSION {
        return Err(AsdError::Version {
            what: "weights file",
            version,
        });
    }
    let config_len = r.u32()? as usize;
    let config_text = std::str::from_utf8(r.take(config_len)?)
        .map_err(|_| AsdError::Input("config text is not UTF-8".into()))?
        .to_string();
    let mut tensors = Vec::new();
    while !r.done() {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| AsdError::Input("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.take(1)?[0] as usize;
        let dims = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let raw = r.take(n.checked_mul(4).ok_or(AsdError::Truncated("weights file"))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| S::widen_f32(f32::from_le_bytes(c.try_into().unwrap())))
            .collect();
        tensors.push((name, Tensor::new(dims, data)?));
    }
    Ok(Container { config_text, tensors })
}

pub fn encode_weights<S: Scalar>(params: &ParamSet<S>) -> Result<Vec<u8>> {
    let text = serde_json::to_string(params.config())?;
    // initialization order keeps files diffable across runs
    let order = params.config().tensor_specs();
    let tensors: Vec<(&str, &Tensor<S>)> = order
        .iter()
        .map(|s| (s.name.as_str(), &params.tensors[&s.name]))
        .collect();
    encode_container(&text, tensors)
}

pub fn decode_weights<S: Scalar>(bytes: &[u8]) -> Result<ParamSet<S>> {
    let c = decode_container::<S>(bytes)?;
    let config = ModelConfig::from_json(&c.config_text)?;
    let mut tensors = BTreeMap::new();
    for (name, t) in c.tensors {
        if tensors.contains_key(&name) {
            return Err(AsdError::DuplicateTensor(name));
        }
        tensors.insert(name, t);
    }
    ParamSet::new(config, tensors)
}

pub fn save_weights<S: Scalar>(params: &ParamSet<S>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_weights(params)?;
    let mut f = fs::File::create(path).map_err(|e| AsdError::io(path, e))?;
    f.write_all(&bytes).map_err(|e| AsdError::io(path, e))
}

pub fn load_weights<S: Scalar>(path: impl AsRef<Path>) -> Result<ParamSet<S>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| AsdError::io(path, e))?;
    decode_weights(&bytes)
}

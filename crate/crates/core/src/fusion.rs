//! Audio-visual fusion and temporal modeling: per-frame concatenation
//! followed by a context-constrained transformer encoder or a forward-only
//! GRU.

use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::encoders::{EmbeddingSequence, Origin};
use crate::error::{AsdError, Result};
use crate::model_io::ParamSet;
use crate::numerics::{dense_row, gru_step, layer_norm_row, masked_softmax_slice, GruParams, LAYER_NORM_EPS};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

/// A context bound in frames, or no bound at all.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "BoundRepr", into = "BoundRepr")]
pub enum ContextBound {
    Frames(usize),
    Unbounded,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum BoundRepr {
    Frames(usize),
    Word(String),
}

impl TryFrom<BoundRepr> for ContextBound {
    type Error = String;

    fn try_from(r: BoundRepr) -> std::result::Result<Self, String> {
        match r {
            BoundRepr::Frames(n) => Ok(ContextBound::Frames(n)),
            BoundRepr::Word(w) => w.parse(),
        }
    }
}

impl From<ContextBound> for BoundRepr {
    fn from(b: ContextBound) -> Self {
        match b {
            ContextBound::Frames(n) => BoundRepr::Frames(n),
            ContextBound::Unbounded => BoundRepr::Word("unbounded".into()),
        }
    }
}

impl std::str::FromStr for ContextBound {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "inf" | "unbounded" | "∞" => Ok(ContextBound::Unbounded),
            other => other
                .parse::<usize>()
                .map(ContextBound::Frames)
                .map_err(|_| format!("invalid context bound {s:?}")),
        }
    }
}

impl fmt::Display for ContextBound {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ContextBound::Frames(n) => write!(f, "{n}"),
            ContextBound::Unbounded => f.write_str("inf"),
        }
    }
}

impl ContextBound {
    pub fn frames(self) -> Option<usize> {
        match self {
            ContextBound::Frames(n) => Some(n),
            ContextBound::Unbounded => None,
        }
    }

    pub fn is_bounded(self) -> bool {
        self.frames().is_some()
    }

    pub fn scaled(self, depth: usize) -> ContextBound {
        match self {
            ContextBound::Frames(n) => ContextBound::Frames(n * depth),
            ContextBound::Unbounded => ContextBound::Unbounded,
        }
    }
}

/// Past bound `T1` and future bound `T2` on attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ContextConfig {
    pub past: ContextBound,
    pub future: ContextBound,
}

impl ContextConfig {
    pub fn bounded(past: usize, future: usize) -> Self {
        ContextConfig {
            past: ContextBound::Frames(past),
            future: ContextBound::Frames(future),
        }
    }

    pub fn unbounded() -> Self {
        ContextConfig {
            past: ContextBound::Unbounded,
            future: ContextBound::Unbounded,
        }
    }

    pub fn is_bounded(&self) -> bool {
        self.past.is_bounded() && self.future.is_bounded()
    }

    /// Context of a stack of `depth` layers each using this band.
    pub fn effective(&self, depth: usize) -> ContextConfig {
        ContextConfig {
            past: self.past.scaled(depth),
            future: self.future.scaled(depth),
        }
    }
}

impl fmt::Display for ContextConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.past, self.future)
    }
}

/// Square binary attention mask; row `T` admits keys `t` with
/// `T − T1 ≤ t ≤ T + T2`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextMask {
    n: usize,
    bits: Vec<bool>,
}

impl ContextMask {
    pub fn build(n: usize, ctx: ContextConfig) -> Result<Self> {
        if n == 0 {
            return Err(AsdError::Input("context mask needs at least one frame".into()));
        }
        let mut bits = vec![false; n * n];
        for row in 0..n {
            let lo = match ctx.past {
                ContextBound::Frames(p) => row.saturating_sub(p),
                ContextBound::Unbounded => 0,
            };
            let hi = match ctx.future {
                ContextBound::Frames(f) => (row + f).min(n - 1),
                ContextBound::Unbounded => n - 1,
            };
            bits[row * n + lo..=row * n + hi].fill(true);
        }
        Ok(ContextMask { n, bits })
    }

    /// All-ones mask: plain softmax attention.
    pub fn full(n: usize) -> Self {
        ContextMask {
            n,
            bits: vec![true; n * n],
        }
    }

    pub fn from_bits(n: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != n * n || n == 0 {
            return Err(AsdError::shape(
                "ContextMask::from_bits",
                format!("{} bits for n={n}", bits.len()),
            ));
        }
        if (0..n).any(|r| !bits[r * n..(r + 1) * n].contains(&true)) {
            return Err(AsdError::EmptyMaskRow);
        }
        Ok(ContextMask { n, bits })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.n + col]
    }

    pub fn row(&self, row: usize) -> &[bool] {
        &self.bits[row * self.n..(row + 1) * self.n]
    }

    /// Smallest column range holding every set bit of `row`.
    pub fn row_span(&self, row: usize) -> Range<usize> {
        let r = self.row(row);
        let lo = r.iter().position(|&b| b).unwrap_or(0);
        let hi = r.iter().rposition(|&b| b).map_or(0, |h| h + 1);
        lo..hi
    }
}

impl fmt::Display for ContextMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in 0..self.n {
            let line: String = self.row(r).iter().map(|&b| if b { '1' } else { '.' }).collect();
            writeln!(f, "{line}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    Transformer,
    Gru,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub kind: FusionKind,
    pub depth: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub gru_hidden: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            kind: FusionKind::Transformer,
            depth: 1,
            heads: 8,
            d_model: 256,
            d_ff: 1024,
            gru_hidden: 128,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.heads == 0 || self.d_model == 0 || self.d_ff == 0 || self.gru_hidden == 0 {
            return Err(AsdError::Config("fusion dimensions must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(AsdError::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.heads
    }
}

#[derive(Debug, Clone)]
pub struct Affine<S> {
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
}

impl<S: Scalar> Affine<S> {
    fn load(params: &ParamSet<S>, base: &str) -> Result<Self> {
        Ok(Affine {
            weight: params.get(&format!("{base}.weight"))?.clone(),
            bias: params.get(&format!("{base}.bias"))?.clone(),
        })
    }

    fn apply(&self, x: &[S], out: &mut [S]) {
        dense_row(x, self.weight.data(), self.bias.data(), out);
    }

    fn out_dim(&self) -> usize {
        self.bias.len()
    }
}

/// Pre-norm transformer layer: `x + MHA(norm1(x))`, then `+ FFN(norm2(·))`.
#[derive(Debug, Clone)]
pub struct TransformerLayer<S> {
    pub norm1: Affine<S>,
    pub q: Affine<S>,
    pub k: Affine<S>,
    pub v: Affine<S>,
    pub o: Affine<S>,
    pub norm2: Affine<S>,
    pub ff1: Affine<S>,
    pub ff2: Affine<S>,
    pub heads: usize,
}

impl<S: Scalar> TransformerLayer<S> {
    pub fn load(params: &ParamSet<S>, index: usize) -> Result<Self> {
        let base = format!("fusion.layer{index}");
        let a = |n: &str| Affine::load(params, &format!("{base}.{n}"));
        Ok(TransformerLayer {
            norm1: a("norm1")?,
            q: a("q")?,
            k: a("k")?,
            v: a("v")?,
            o: a("o")?,
            norm2: a("norm2")?,
            ff1: a("ff1")?,
            ff2: a("ff2")?,
            heads: params.config().fusion.heads,
        })
    }

    pub fn d_model(&self) -> usize {
        self.q.out_dim()
    }

    pub fn d_head(&self) -> usize {
        self.d_model() / self.heads
    }

    fn norm(&self, which: &Affine<S>, x: &[S], out: &mut [S]) {
        layer_norm_row(x, which.weight.data(), which.bias.data(), lit(LAYER_NORM_EPS), out);
    }

    /// Key and value projections of every row of the attention input `h`.
    fn keys_values(&self, h: &Tensor<S>) -> (Tensor<S>, Tensor<S>) {
        let (n, d) = (h.rows(), self.d_model());
        let mut k = Tensor::zeros(vec![n, d]);
        let mut v = Tensor::zeros(vec![n, d]);
        for t in 0..n {
            self.k.apply(h.row(t), k.row_mut(t));
            self.v.apply(h.row(t), v.row_mut(t));
        }
        (k, v)
    }

    fn normalized(&self, x: &Tensor<S>) -> Tensor<S> {
        let mut h = Tensor::zeros(x.shape().to_vec());
        for t in 0..x.rows() {
            self.norm(&self.norm1, x.row(t), h.row_mut(t));
        }
        h
    }

    /// Attention output of one head for query row `row`.
    #[allow(clippy::too_many_arguments)]
    fn attend(
        &self,
        q: &[S],
        k: &Tensor<S>,
        v: &Tensor<S>,
        mask: &ContextMask,
        row: usize,
        head: usize,
        out: &mut [S],
    ) -> Result<()> {
        let dh = self.d_head();
        let cols = head * dh..(head + 1) * dh;
        let span = mask.row_span(row);
        let scale = S::one() / S::from_usize(dh).unwrap().sqrt();
        let logits: Vec<S> = span
            .clone()
            .map(|t| {
                let kt = &k.row(t)[cols.clone()];
                q[cols.clone()].iter().zip(kt).map(|(&a, &b)| a * b).sum::<S>() * scale
            })
            .collect();
        let mut weights = vec![S::zero(); logits.len()];
        masked_softmax_slice(&logits, &mask.row(row)[span.clone()], &mut weights)?;
        out.fill(S::zero());
        for (w, t) in weights.iter().zip(span) {
            if *w == S::zero() {
                continue;
            }
            for (o, &vv) in out.iter_mut().zip(&v.row(t)[cols.clone()]) {
                *o += *w * vv;
            }
        }
        Ok(())
    }

    /// Output rows `rows` of this layer given the full input `x`; keys and
    /// values are (re)computed for every row of `x`.
    pub fn forward_rows(&self, x: &Tensor<S>, mask: &ContextMask, rows: Range<usize>) -> Result<Tensor<S>> {
        let (n, d) = (x.rows(), self.d_model());
        if x.rank() != 2 || x.row_len() != d || mask.len() != n || rows.end > n {
            return Err(AsdError::shape(
                "transformer_layer_forward",
                format!("x {:?}, mask n={}, d_model {d}, rows {rows:?}", x.shape(), mask.len()),
            ));
        }
        let h = self.normalized(x);
        let (k, v) = self.keys_values(&h);
        let dh = self.d_head();
        let d_ff = self.ff1.out_dim();
        let mut out = Tensor::zeros(vec![rows.len(), d]);
        let mut q = vec![S::zero(); d];
        let mut heads = vec![S::zero(); d];
        let mut resid = vec![S::zero(); d];
        let mut normed = vec![S::zero(); d];
        let mut hidden = vec![S::zero(); d_ff];
        for (i, row) in rows.enumerate() {
            self.q.apply(h.row(row), &mut q);
            for head in 0..self.heads {
                self.attend(&q, &k, &v, mask, row, head, &mut heads[head * dh..(head + 1) * dh])?;
            }
            self.o.apply(&heads, &mut resid);
            for (r, &xv) in resid.iter_mut().zip(x.row(row)) {
                *r += xv;
            }
            self.norm(&self.norm2, &resid, &mut normed);
            self.ff1.apply(&normed, &mut hidden);
            for hv in hidden.iter_mut() {
                *hv = hv.max(S::zero());
            }
            let dst = out.row_mut(i);
            self.ff2.apply(&hidden, dst);
            for (o, &r) in dst.iter_mut().zip(&resid) {
                *o += r;
            }
        }
        out.ensure_finite("transformer_layer_forward")?;
        Ok(out)
    }

    pub fn forward(&self, x: &Tensor<S>, mask: &ContextMask) -> Result<Tensor<S>> {
        self.forward_rows(x, mask, 0..x.rows())
    }

    /// Single-head banded attention of the attention input `x` (the layer
    /// feeds `norm1` of its input here): `[n × d_head]`.
    pub fn constrained_attention(&self, x: &Tensor<S>, mask: &ContextMask, head: usize) -> Result<Tensor<S>> {
        if head >= self.heads || x.rows() != mask.len() || x.row_len() != self.d_model() {
            return Err(AsdError::shape(
                "constrained_attention",
                format!("x {:?}, mask n={}, head {head}/{}", x.shape(), mask.len(), self.heads),
            ));
        }
        let (k, v) = self.keys_values(x);
        let dh = self.d_head();
        let mut q = vec![S::zero(); self.d_model()];
        let mut out = Tensor::zeros(vec![x.rows(), dh]);
        for row in 0..x.rows() {
            self.q.apply(x.row(row), &mut q);
            self.attend(&q, &k, &v, mask, row, head, out.row_mut(row))?;
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct TransformerFusion<S> {
    pub layers: Vec<TransformerLayer<S>>,
    pub classifier: Affine<S>,
}

#[derive(Debug, Clone)]
pub struct GruFusion<S> {
    pub cell: GruParams<S>,
    pub classifier: Affine<S>,
}

#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum Fusion<S> {
    Transformer(TransformerFusion<S>),
    Gru(GruFusion<S>),
}

impl<S: Scalar> Fusion<S> {
    pub fn from_params(params: &ParamSet<S>) -> Result<Self> {
        let cfg = &params.config().fusion;
        let classifier = Affine::load(params, "fusion.classifier")?;
        Ok(match cfg.kind {
            FusionKind::Transformer => Fusion::Transformer(TransformerFusion {
                layers: (1..=cfg.depth)
                    .map(|l| TransformerLayer::load(params, l))
                    .collect::<Result<_>>()?,
                classifier,
            }),
            FusionKind::Gru => {
                let g = |n: &str| params.get(&format!("fusion.gru.{n}")).cloned();
                Fusion::Gru(GruFusion {
                    cell: GruParams {
                        wz: g("wz")?,
                        wr: g("wr")?,
                        wh: g("wh")?,
                        uz: g("uz")?,
                        ur: g("ur")?,
                        uh: g("uh")?,
                        bz: g("bz")?,
                        br: g("br")?,
                        bh: g("bh")?,
                    },
                    classifier,
                })
            }
        })
    }

    pub fn depth(&self) -> usize {
        match self {
            Fusion::Transformer(t) => t.layers.len(),
            Fusion::Gru(_) => 1,
        }
    }
}

/// `f_av = concat(e_a, e_v)` per frame.
pub fn fuse_embeddings<S: Scalar>(
    e_a: &EmbeddingSequence<S>,
    e_v: &EmbeddingSequence<S>,
) -> Result<EmbeddingSequence<S>> {
    if e_a.origin != Origin::Audio || e_v.origin != Origin::Visual {
        return Err(AsdError::Input(format!(
            "fusion expects (audio, visual) embeddings, got ({:?}, {:?})",
            e_a.origin, e_v.origin
        )));
    }
    if e_a.len() != e_v.len() {
        return Err(AsdError::Input(format!(
            "audio has {} frames but video has {}",
            e_a.len(),
            e_v.len()
        )));
    }
    let (da, dv) = (e_a.dim(), e_v.dim());
    let mut values = Tensor::zeros(vec![e_a.len(), da + dv]);
    for t in 0..e_a.len() {
        let row = values.row_mut(t);
        row[..da].copy_from_slice(e_a.values.row(t));
        row[da..].copy_from_slice(e_v.values.row(t));
    }
    Ok(EmbeddingSequence {
        values,
        origin: Origin::Fused,
    })
}

fn classify<S: Scalar>(classifier: &Affine<S>, x: &[S]) -> S {
    let mut out = [S::zero()];
    classifier.apply(x, &mut out);
    out[0]
}

/// Transformer logits for an explicit mask shared by every layer.
pub fn transformer_logits<S: Scalar>(
    fusion: &TransformerFusion<S>,
    f_av: &Tensor<S>,
    mask: &ContextMask,
) -> Result<Vec<S>> {
    let mut x = f_av.clone();
    for layer in &fusion.layers {
        x = layer.forward(&x, mask)?;
    }
    Ok((0..x.rows()).map(|t| classify(&fusion.classifier, x.row(t))).collect())
}

/// Per-frame speaking logits with the banded mask for `ctx`.
pub fn fusion_forward<S: Scalar>(
    e_a: &EmbeddingSequence<S>,
    e_v: &EmbeddingSequence<S>,
    ctx: ContextConfig,
    fusion: &TransformerFusion<S>,
) -> Result<Vec<S>> {
    let f_av = fuse_embeddings(e_a, e_v)?;
    let mask = ContextMask::build(f_av.len(), ctx)?;
    transformer_logits(fusion, &f_av.values, &mask)
}

/// Forward-only GRU over `f_av`; logit `T` depends only on frames `0..=T`.
pub fn gru_fusion_forward<S: Scalar>(
    e_a: &EmbeddingSequence<S>,
    e_v: &EmbeddingSequence<S>,
    fusion: &GruFusion<S>,
) -> Result<Vec<S>> {
    let f_av = fuse_embeddings(e_a, e_v)?;
    let mut h = vec![S::zero(); fusion.cell.hidden_dim()];
    let mut logits = Vec::with_capacity(f_av.len());
    for t in 0..f_av.len() {
        h = gru_step(f_av.values.row(t), &h, &fusion.cell)?;
        logits.push(classify(&fusion.classifier, &h));
    }
    Ok(logits)
}

pub(crate) fn classify_row<S: Scalar>(classifier: &Affine<S>, x: &[S]) -> S {
    classify(classifier, x)
}

//! Closed-form latency and memory accounting for context configurations.
//!
//! Latency is the wait for future frames: `(encoder_future + fusion_future)`
//! frame periods. Memory counts retained past frames only, at a fixed
//! per-frame storage constant.

use std::fmt;

use crate::error::{AsdError, Result};
use crate::fusion::{ContextBound, ContextConfig};

/// Storage per retained frame assumed by the cost model (512 KiB).
pub const DEFAULT_BYTES_PER_FRAME: u64 = 524_288;

pub const GRID_HEADER: [&str; 4] = ["past", "future", "latency_ms", "memory_bytes"];

/// A finite quantity or no bound at all.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub enum Bound<T> {
    Finite(T),
    Unbounded,
}

impl<T: Copy> Bound<T> {
    pub fn finite(self) -> Option<T> {
        match self {
            Bound::Finite(v) => Some(v),
            Bound::Unbounded => None,
        }
    }
}

impl fmt::Display for Bound<f64> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Bound::Finite(v) if v.fract() == 0.0 && v.abs() < 1e15 => write!(f, "{}", *v as i64),
            Bound::Finite(v) => write!(f, "{v}"),
            Bound::Unbounded => f.write_str("inf"),
        }
    }
}

impl fmt::Display for Bound<u64> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Bound::Finite(v) => write!(f, "{v}"),
            Bound::Unbounded => f.write_str("inf"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CostFusion {
    Transformer,
    UniGru,
    BiGru,
}

impl std::str::FromStr for CostFusion {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "transformer" => Ok(CostFusion::Transformer),
            "uni-gru" | "gru" => Ok(CostFusion::UniGru),
            "bi-gru" => Ok(CostFusion::BiGru),
            other => Err(format!("unknown fusion kind {other:?} (transformer, uni-gru, bi-gru)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostConfig {
    pub fps: f64,
    pub bytes_per_frame: u64,
    pub encoder_future: usize,
    /// Per-layer attention context; ignored by the GRU kinds.
    pub ctx: ContextConfig,
    /// Stacked attention layers; each widens the context by `ctx`.
    pub depth: usize,
    pub kind: CostFusion,
}

impl Default for CostConfig {
    fn default() -> Self {
        CostConfig {
            fps: 25.0,
            bytes_per_frame: DEFAULT_BYTES_PER_FRAME,
            encoder_future: 0,
            ctx: ContextConfig::bounded(32, 8),
            depth: 1,
            kind: CostFusion::Transformer,
        }
    }
}

impl CostConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(AsdError::Config(format!("fps must be positive, got {}", self.fps)));
        }
        if self.bytes_per_frame == 0 || self.depth == 0 {
            return Err(AsdError::Config("bytes per frame and depth must be positive".into()));
        }
        Ok(())
    }

    fn fusion_future(&self) -> ContextBound {
        match self.kind {
            CostFusion::Transformer => self.ctx.effective(self.depth).future,
            CostFusion::UniGru => ContextBound::Frames(0),
            CostFusion::BiGru => ContextBound::Unbounded,
        }
    }
}

pub fn latency_ms(cfg: &CostConfig) -> Bound<f64> {
    match cfg.fusion_future() {
        ContextBound::Frames(f) => Bound::Finite((cfg.encoder_future + f) as f64 * 1000.0 / cfg.fps),
        ContextBound::Unbounded => Bound::Unbounded,
    }
}

pub fn memory_bytes(cfg: &CostConfig) -> Bound<u64> {
    match cfg.kind {
        CostFusion::UniGru => Bound::Finite(cfg.bytes_per_frame),
        CostFusion::BiGru => Bound::Unbounded,
        CostFusion::Transformer => match cfg.ctx.effective(cfg.depth).past {
            ContextBound::Frames(p) => Bound::Finite(p as u64 * cfg.bytes_per_frame),
            ContextBound::Unbounded => Bound::Unbounded,
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostRow {
    pub past: ContextBound,
    pub future: ContextBound,
    pub latency_ms: Bound<f64>,
    pub memory_bytes: Bound<u64>,
}

impl CostRow {
    pub fn fields(&self) -> [String; 4] {
        [
            self.past.to_string(),
            self.future.to_string(),
            self.latency_ms.to_string(),
            self.memory_bytes.to_string(),
        ]
    }
}

/// Cartesian product of past and future values, past-major.
pub fn sweep_grid(past: &[ContextBound], future: &[ContextBound], cfg: &CostConfig) -> Result<Vec<CostRow>> {
    cfg.validate()?;
    if past.is_empty() || future.is_empty() {
        return Err(AsdError::Input(
            "cost sweep needs nonempty past and future ranges".into(),
        ));
    }
    let mut rows = Vec::with_capacity(past.len() * future.len());
    for &p in past {
        for &f in future {
            let cell = CostConfig {
                ctx: ContextConfig { past: p, future: f },
                ..*cfg
            };
            rows.push(CostRow {
                past: p,
                future: f,
                latency_ms: latency_ms(&cell),
                memory_bytes: memory_bytes(&cell),
            });
        }
    }
    Ok(rows)
}

/// Parses `A`, `A:B` (inclusive) or `inf`.
pub fn parse_range(text: &str) -> Result<Vec<ContextBound>> {
    let bad = |e: String| AsdError::Input(e);
    match text.split_once(':') {
        None => Ok(vec![text.parse().map_err(bad)?]),
        Some((a, b)) => match (
            a.parse::<ContextBound>().map_err(bad)?,
            b.parse::<ContextBound>().map_err(bad)?,
        ) {
            (ContextBound::Frames(a), ContextBound::Frames(b)) if a <= b => {
                Ok((a..=b).map(ContextBound::Frames).collect())
            }
            (ContextBound::Frames(a), ContextBound::Unbounded) => {
                Ok(vec![ContextBound::Frames(a), ContextBound::Unbounded])
            }
            _ => Err(AsdError::Input(format!("empty range {text:?}"))),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn transformer(p: usize, f: usize) -> CostConfig {
        CostConfig {
            ctx: ContextConfig::bounded(p, f),
            ..CostConfig::default()
        }
    }

    #[test]
    fn table_rows() {
        let kib = 1024u64;
        for ((p, f), (ms, mem)) in [(1, 1), (3, 3), (6, 12), (12, 6), (32, 8)].into_iter().zip([
            (40.0, 512 * kib),
            (120.0, 1536 * kib),
            (480.0, 3072 * kib),
            (240.0, 6144 * kib),
            (320.0, 16384 * kib),
        ]) {
            let c = transformer(p, f);
            assert_eq!(latency_ms(&c), Bound::Finite(ms));
            assert_eq!(memory_bytes(&c), Bound::Finite(mem));
        }
        let uni = CostConfig {
            kind: CostFusion::UniGru,
            ..CostConfig::default()
        };
        assert_eq!(latency_ms(&uni), Bound::Finite(0.0));
        assert_eq!(memory_bytes(&uni), Bound::Finite(512 * kib));
        let base = CostConfig {
            encoder_future: 6,
            ..uni
        };
        assert_eq!(latency_ms(&base), Bound::Finite(240.0));
        let bi = CostConfig {
            kind: CostFusion::BiGru,
            ..CostConfig::default()
        };
        assert_eq!(latency_ms(&bi), Bound::Unbounded);
        assert_eq!(memory_bytes(&bi), Bound::Unbounded);
    }

    #[test]
    fn unbounded_context() {
        let c = CostConfig {
            ctx: ContextConfig::unbounded(),
            ..CostConfig::default()
        };
        assert_eq!(latency_ms(&c), Bound::Unbounded);
        assert_eq!(memory_bytes(&c), Bound::Unbounded);
        assert_eq!(Bound::<u64>::Unbounded.to_string(), "inf");
    }

    #[test]
    fn grid_and_monotonicity() {
        let rows = sweep_grid(
            &parse_range("1:2").unwrap(),
            &parse_range("0:1").unwrap(),
            &CostConfig::default(),
        )
        .unwrap();
        assert_eq!(rows.len(), 4);
        for r in &rows {
            let c = CostConfig {
                ctx: ContextConfig {
                    past: r.past,
                    future: r.future,
                },
                ..CostConfig::default()
            };
            assert_eq!(r.latency_ms, latency_ms(&c));
            assert_eq!(r.memory_bytes, memory_bytes(&c));
        }
        let grid = sweep_grid(
            &parse_range("0:40").unwrap(),
            &parse_range("0:40").unwrap(),
            &CostConfig::default(),
        )
        .unwrap();
        for w in grid.windows(2) {
            if w[0].past == w[1].past {
                assert!(w[0].latency_ms <= w[1].latency_ms);
                assert_eq!(w[0].memory_bytes, w[1].memory_bytes);
            }
        }
        for p in 0..40 {
            assert!(grid[p * 41].memory_bytes <= grid[(p + 1) * 41].memory_bytes);
        }
        assert!(sweep_grid(&[], &parse_range("1").unwrap(), &CostConfig::default()).is_err());
        assert!(parse_range("3:1").is_err());
        assert_eq!(parse_range("inf").unwrap(), vec![ContextBound::Unbounded]);
        assert_eq!(rows[0].fields(), ["1", "0", "0", "524288"].map(String::from));
    }

    #[test]
    fn fractional_fps() {
        let c = CostConfig {
            fps: 30.0,
            ..transformer(1, 1)
        };
        assert_eq!(latency_ms(&c).to_string(), (1000.0f64 / 30.0).to_string());
        assert!(CostConfig {
            fps: 0.0,
            ..CostConfig::default()
        }
        .validate()
        .is_err());
    }
}

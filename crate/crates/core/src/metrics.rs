//! Across-task memory, multiply-accumulate accounting and accuracy summaries.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sampler::Episode;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("ATM is undefined for an episode without support inputs")]
    AtmUndefined,
    #[error("unknown primitive op `{0}`")]
    UnknownOp(String),
    #[error("op `{op}` expects {expected} dimensions, got {got}")]
    BadDims {
        op: String,
        expected: usize,
        got: usize,
    },
    #[error("cannot summarize an empty suite")]
    EmptySuite,
    #[error("accuracy {0} outside [0, 1]")]
    AccuracyOutOfRange(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AtmReport {
    /// Peak bytes of stored input representations.
    pub memory_bytes: u64,
    /// Bytes of every support input in the episode.
    pub episode_input_bytes: u64,
    pub atm: f64,
}

/// `memory_bytes / episode_input_bytes`, where the denominator counts every
/// support input (not targets) at `bytes_per_input_scalar` per scalar.
pub fn atm(
    memory_bytes: u64,
    episode: &Episode,
    scalars_per_input: u64,
    bytes_per_input_scalar: u64,
) -> Result<AtmReport, MetricsError> {
    let episode_input_bytes =
        episode.support_input_count() as u64 * scalars_per_input * bytes_per_input_scalar;
    if episode_input_bytes == 0 {
        return Err(MetricsError::AtmUndefined);
    }
    Ok(AtmReport {
        memory_bytes,
        episode_input_bytes,
        atm: memory_bytes as f64 / episode_input_bytes as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Learning,
    Inference,
}

/// Primitive ops of the cost model. One fused multiply-accumulate is one MAC.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Primitive {
    /// `n` independent fused multiply-accumulates.
    Fma(u64),
    /// Inner product of dimension `d`.
    Dot(u64),
    /// Squared Euclidean distance of dimension `d`.
    SquaredDistance(u64),
    /// Average of `k` vectors of dimension `d`.
    Mean { k: u64, d: u64 },
    /// Matrix-vector product: `rows` inner products of dimension `cols`.
    MatVec { rows: u64, cols: u64 },
    /// Rank-one update of a `rows x cols` matrix.
    Outer { rows: u64, cols: u64 },
}

impl Primitive {
    pub fn macs(self) -> u64 {
        match self {
            Primitive::Fma(n) => n,
            Primitive::Dot(d) | Primitive::SquaredDistance(d) => d,
            Primitive::Mean { k, d } => k * d,
            Primitive::MatVec { rows, cols } | Primitive::Outer { rows, cols } => rows * cols,
        }
    }

    /// Parses the textual form used in traces: `fma`, `dot`, `sqdist` take
    /// one dimension; `mean`, `matvec`, `outer` take two.
    pub fn parse(op: &str, dims: &[u64]) -> Result<Self, MetricsError> {
        let want = |n: usize| {
            if dims.len() == n {
                Ok(())
            } else {
                Err(MetricsError::BadDims {
                    op: op.to_string(),
                    expected: n,
                    got: dims.len(),
                })
            }
        };
        Ok(match op {
            "fma" => {
                want(1)?;
                Primitive::Fma(dims[0])
            }
            "dot" => {
                want(1)?;
                Primitive::Dot(dims[0])
            }
            "sqdist" => {
                want(1)?;
                Primitive::SquaredDistance(dims[0])
            }
            "mean" => {
                want(2)?;
                Primitive::Mean { k: dims[0], d: dims[1] }
            }
            "matvec" => {
                want(2)?;
                Primitive::MatVec { rows: dims[0], cols: dims[1] }
            }
            "outer" => {
                want(2)?;
                Primitive::Outer { rows: dims[0], cols: dims[1] }
            }
            other => return Err(MetricsError::UnknownOp(other.to_string())),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceOp {
    pub phase: Phase,
    pub op: String,
    pub dims: Vec<u64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacCounter {
    pub learning: u64,
    pub inference: u64,
}

impl MacCounter {
    pub fn total(&self) -> u64 {
        self.learning + self.inference
    }

    pub fn record(&mut self, phase: Phase, op: Primitive) {
        self.record_n(phase, op, 1);
    }

    /// Records `times` repetitions of `op`.
    pub fn record_n(&mut self, phase: Phase, op: Primitive, times: u64) {
        let macs = op.macs() * times;
        match phase {
            Phase::Learning => self.learning += macs,
            Phase::Inference => self.inference += macs,
        }
    }

    pub fn merge(&mut self, other: &MacCounter) {
        self.learning += other.learning;
        self.inference += other.inference;
    }
}

pub fn count_macs(trace: &[TraceOp]) -> Result<MacCounter, MetricsError> {
    let mut counter = MacCounter::default();
    for op in trace {
        counter.record(op.phase, Primitive::parse(&op.op, &op.dims)?);
    }
    Ok(counter)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracySummary {
    pub n: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

pub fn aggregate(accuracies: &[f64]) -> Result<AccuracySummary, MetricsError> {
    if let Some(&bad) = accuracies.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(MetricsError::AccuracyOutOfRange(bad));
    }
    let (mean, std) = mean_std(accuracies).ok_or(MetricsError::EmptySuite)?;
    Ok(AccuracySummary {
        n: accuracies.len(),
        mean,
        std,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuiteSummary {
    pub n_episodes: usize,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub atm_mean: f64,
    pub mac_mean: f64,
}

impl SuiteSummary {
    /// Summarizes per-episode `(accuracy, atm, macs)` triples.
    pub fn from_episodes(episodes: &[(f64, f64, u64)]) -> Result<Self, MetricsError> {
        let accs: Vec<f64> = episodes.iter().map(|e| e.0).collect();
        let acc = aggregate(&accs)?;
        let n = episodes.len() as f64;
        Ok(SuiteSummary {
            n_episodes: acc.n,
            accuracy_mean: acc.mean,
            accuracy_std: acc.std,
            atm_mean: episodes.iter().map(|e| e.1).sum::<f64>() / n,
            mac_mean: episodes.iter().map(|e| e.2 as f64).sum::<f64>() / n,
        })
    }
}

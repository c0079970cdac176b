//! Bayesian anomaly scoring from shifts in cross-agent opinion variance,
//! and structural drift of logic matrices.

use std::fmt::{self, Write as _};

use nalgebra::DMatrix;
use thiserror::Error;

use crate::model::LogicMatrix;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DetectionError {
    #[error("shape mismatch: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("invalid score configuration: {0}")]
    InvalidConfig(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PriorMode {
    /// Every step starts from the configured prior.
    Static,
    /// Every step starts from the previous posterior.
    Online,
}

impl fmt::Display for PriorMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PriorMode::Static => "static",
            PriorMode::Online => "online",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreConfig {
    prior: f64,
    scale: f64,
    exponent: f64,
    mode: PriorMode,
}

impl ScoreConfig {
    pub fn new(
        prior: f64,
        scale: f64,
        exponent: f64,
        mode: PriorMode,
    ) -> Result<Self, DetectionError> {
        if !(0.0..=1.0).contains(&prior) {
            return Err(DetectionError::InvalidConfig("prior must lie in [0, 1]"));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(DetectionError::InvalidConfig("scale must be positive"));
        }
        if !(exponent > 0.0 && exponent.is_finite()) {
            return Err(DetectionError::InvalidConfig("exponent must be positive"));
        }
        Ok(ScoreConfig {
            prior,
            scale,
            exponent,
            mode,
        })
    }

    pub fn prior(&self) -> f64 {
        self.prior
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn exponent(&self) -> f64 {
        self.exponent
    }

    pub fn mode(&self) -> PriorMode {
        self.mode
    }

    pub fn with_mode(self, mode: PriorMode) -> Self {
        ScoreConfig { mode, ..self }
    }
}

impl Default for ScoreConfig {
    fn default() -> Self {
        ScoreConfig {
            prior: 0.1,
            scale: 1.0,
            exponent: 1.0,
            mode: PriorMode::Static,
        }
    }
}

/// Per-topic population variance of `s·x` across agents (rows), and their
/// mean over topics.
pub fn scaled_mean_variance(x: &DMatrix<f64>, s: f64) -> (Vec<f64>, f64) {
    let n = x.nrows() as f64;
    let per_topic: Vec<f64> = x
        .column_iter()
        .map(|col| {
            let mean = col.iter().map(|v| s * v).sum::<f64>() / n;
            col.iter().map(|v| (s * v - mean).powi(2)).sum::<f64>() / n
        })
        .collect();
    let v = if per_topic.is_empty() {
        0.0
    } else {
        per_topic.iter().sum::<f64>() / per_topic.len() as f64
    };
    (per_topic, v)
}

/// Reshapes a flat opinion vector into an n×1 matrix.
pub fn as_column(x: &[f64]) -> DMatrix<f64> {
    DMatrix::from_column_slice(x.len(), 1, x)
}

/// `(Δv, L)` with `Δv = max(v_cur - v_prev, 0)` and `L = 1 - exp(-α Δv)`.
pub fn drift_likelihood(v_cur: f64, v_prev: f64, exponent: f64) -> (f64, f64) {
    let delta = (v_cur - v_prev).max(0.0);
    (delta, -(-exponent * delta).exp_m1())
}

/// Posterior `L π / (L π + (1 - L)(1 - π))`; an undefined ratio returns the
/// prior.
pub fn bayes_update(likelihood: f64, prior: f64) -> f64 {
    let num = likelihood * prior;
    let den = num + (1.0 - likelihood) * (1.0 - prior);
    if den == 0.0 {
        prior
    } else {
        num / den
    }
}

/// Running prior for online scoring.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreState {
    pub prior: f64,
}

impl ScoreState {
    pub fn new(config: &ScoreConfig) -> Self {
        ScoreState {
            prior: config.prior,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepScore {
    pub delta_v: f64,
    pub likelihood: f64,
    pub posterior: f64,
}

pub fn score_step(
    x_prev: &DMatrix<f64>,
    x_now: &DMatrix<f64>,
    config: &ScoreConfig,
    state: ScoreState,
) -> Result<(StepScore, ScoreState), DetectionError> {
    if x_prev.shape() != x_now.shape() {
        return Err(DetectionError::DimensionMismatch(
            x_prev.nrows(),
            x_prev.ncols(),
            x_now.nrows(),
            x_now.ncols(),
        ));
    }
    let (_, v_prev) = scaled_mean_variance(x_prev, config.scale);
    let (_, v_cur) = scaled_mean_variance(x_now, config.scale);
    let (delta_v, likelihood) = drift_likelihood(v_cur, v_prev, config.exponent);
    let prior = match config.mode {
        PriorMode::Static => config.prior,
        PriorMode::Online => state.prior,
    };
    let posterior = bayes_update(likelihood, prior);
    let next = match config.mode {
        PriorMode::Static => state,
        PriorMode::Online => ScoreState { prior: posterior },
    };
    Ok((
        StepScore {
            delta_v,
            likelihood,
            posterior,
        },
        next,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimelineEntry {
    pub step: usize,
    pub wt: f64,
    pub score: StepScore,
    pub mode: PriorMode,
}

/// Scores over a run, possibly spanning several weights and both modes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnomalyTimeline {
    pub entries: Vec<TimelineEntry>,
}

impl AnomalyTimeline {
    /// Scores every snapshot in `snapshots` (steps 1, 2, ...) against a
    /// fixed baseline.
    pub fn score_against_baseline(
        baseline: &DMatrix<f64>,
        snapshots: &[DMatrix<f64>],
        wt: f64,
        config: &ScoreConfig,
    ) -> Result<Self, DetectionError> {
        let mut state = ScoreState::new(config);
        let mut entries = Vec::with_capacity(snapshots.len());
        for (k, x) in snapshots.iter().enumerate() {
            let (score, next) = score_step(baseline, x, config, state)?;
            state = next;
            entries.push(TimelineEntry {
                step: k + 1,
                wt,
                score,
                mode: config.mode,
            });
        }
        Ok(AnomalyTimeline { entries })
    }

    pub fn extend(&mut self, other: AnomalyTimeline) {
        self.entries.extend(other.entries);
    }

    pub fn filter_mode(&self, mode: PriorMode) -> impl Iterator<Item = &TimelineEntry> {
        self.entries.iter().filter(move |e| e.mode == mode)
    }

    /// CSV `step,wt,delta_v,likelihood,posterior,mode`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,wt,delta_v,likelihood,posterior,mode\n");
        for e in &self.entries {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                e.step, e.wt, e.score.delta_v, e.score.likelihood, e.score.posterior, e.mode
            );
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Drift {
    pub norm: f64,
    pub flagged: bool,
}

/// Frobenius norm of `c_now - c_prev`, flagged when above `delta`.
pub fn frobenius_drift(
    c_prev: &LogicMatrix,
    c_now: &LogicMatrix,
    delta: f64,
) -> Result<Drift, DetectionError> {
    let (a, b) = (c_prev.matrix(), c_now.matrix());
    if a.shape() != b.shape() {
        return Err(DetectionError::DimensionMismatch(
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols(),
        ));
    }
    let norm = (b - a).norm();
    Ok(Drift {
        norm,
        flagged: norm > delta,
    })
}

//! Discrete-time opinion update kernels and convergence classification.
//!
//! Every kernel has the shape
//!
//! ```text
//! x_i^p(t+1) = c_pp,i * Σ_j w_ij x_j^p(t)          (self-topic averaging)
//!            + Σ_{q in block, q≠p} c_pq,i x_i^q(t)  (intra-block coupling)
//!            + Σ_{q outside block} c_pq,i α_q^(i)   (external consensus)
//! ```
//!
//! with the applicable terms switched on per update rule. The averaging term
//! always goes through [`InfluenceMatrix::mix_row`], and extra terms are only
//! added when present, so a kernel that degenerates to a simpler one gives
//! bit-identical results.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::model::{AgentLogicAssignment, InfluenceMatrix, OpinionState, ZERO_TOL};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DynamicsError {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("topic {} supplies a per-agent external; the scalar kernel needs a consensus value", .topic + 1)]
    VectorExternalNotAllowed { topic: usize },
    #[error("no consensus value supplied for external topic {}", .topic + 1)]
    MissingExternal { topic: usize },
    #[error("agent {} has self-dependency 1 but a nonzero external input", .agent + 1)]
    SelfDependencyOne { agent: usize },
    #[error("invalid run configuration: {0}")]
    InvalidConfig(&'static str),
}

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<(), DynamicsError> {
    if expected != got {
        return Err(DynamicsError::DimensionMismatch {
            what,
            expected,
            got,
        });
    }
    Ok(())
}

/// Per-agent diagonal weights `diag(c_pq,1, ..., c_pq,n)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GammaDiag(Vec<f64>);

impl GammaDiag {
    pub fn new(entries: Vec<f64>) -> Self {
        GammaDiag(entries)
    }

    /// Entry `(p, q)` of each agent's logic matrix.
    pub fn from_assignment(assignment: &AgentLogicAssignment, p: usize, q: usize) -> Self {
        GammaDiag(assignment.iter().map(|c| c.get(p, q)).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn entries(&self) -> &[f64] {
        &self.0
    }
}

/// Settled value of an upstream topic.
#[derive(Debug, Clone, PartialEq)]
pub enum ExternalValue {
    /// Agents agree on a single value.
    Scalar(f64),
    /// Agents settled on different values.
    PerAgent(Vec<f64>),
}

impl ExternalValue {
    pub fn at(&self, agent: usize) -> f64 {
        match self {
            ExternalValue::Scalar(v) => *v,
            ExternalValue::PerAgent(v) => v[agent],
        }
    }

    pub fn is_scalar(&self) -> bool {
        matches!(self, ExternalValue::Scalar(_))
    }
}

/// External values keyed by topic.
pub type ExternalConsensus = BTreeMap<usize, ExternalValue>;

/// One external input of an open singleton topic.
#[derive(Debug, Clone, PartialEq)]
pub struct ExternalInput {
    pub topic: usize,
    pub alpha: ExternalValue,
    pub gamma: GammaDiag,
}

fn scalar_inputs(
    n: usize,
    externals: &[ExternalInput],
) -> Result<Vec<(f64, &GammaDiag)>, DynamicsError> {
    externals
        .iter()
        .map(|e| match e.alpha {
            ExternalValue::Scalar(a) => {
                check_len("external gamma", n, e.gamma.len())?;
                Ok((a, &e.gamma))
            }
            ExternalValue::PerAgent(_) => {
                Err(DynamicsError::VectorExternalNotAllowed { topic: e.topic })
            }
        })
        .collect()
}

/// `x(t+1) = Γ_pp W x(t)`.
pub fn step_singleton(
    x: &[f64],
    w: &InfluenceMatrix,
    gamma_pp: &GammaDiag,
) -> Result<Vec<f64>, DynamicsError> {
    let n = w.n();
    check_len("opinions", n, x.len())?;
    check_len("self-dependency", n, gamma_pp.len())?;
    Ok((0..n).map(|i| gamma_pp.0[i] * w.mix_row(i, x)).collect())
}

/// `x(t+1) = Γ_pp W x(t) + Σ_q α_q Γ_pq` with scalar `α_q`.
pub fn step_singleton_open(
    x: &[f64],
    w: &InfluenceMatrix,
    gamma_pp: &GammaDiag,
    externals: &[ExternalInput],
) -> Result<Vec<f64>, DynamicsError> {
    let mut out = step_singleton(x, w, gamma_pp)?;
    let inputs = scalar_inputs(w.n(), externals)?;
    for (i, v) in out.iter_mut().enumerate() {
        for (alpha, gamma) in &inputs {
            *v += alpha * gamma.0[i];
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NecessityResult {
    pub satisfiable: bool,
    /// Common value when satisfiable. `None` when unsatisfiable, or when
    /// every agent is vacuous so any value works.
    pub kappa: Option<f64>,
    /// Candidate per agent; `None` for agents with self-dependency 1 and no
    /// external input.
    pub per_agent_kappas: Vec<Option<f64>>,
}

/// Tolerance for comparing per-agent consensus candidates.
pub const KAPPA_TOL: f64 = 1e-9;

/// Checks whether a single `κ ∈ [-1, 1]` solves
/// `κ (1 - c_pp,i) = Σ_q α_q c_pq,i` for every agent.
pub fn check_necessity(
    gamma_pp: &GammaDiag,
    externals: &[ExternalInput],
) -> Result<NecessityResult, DynamicsError> {
    let n = gamma_pp.len();
    let inputs = scalar_inputs(n, externals)?;
    let mut per_agent_kappas = Vec::with_capacity(n);
    for i in 0..n {
        let drive: f64 = inputs.iter().map(|(a, g)| a * g.0[i]).sum();
        let slack = 1.0 - gamma_pp.0[i];
        if slack.abs() <= ZERO_TOL {
            if drive.abs() > ZERO_TOL {
                return Err(DynamicsError::SelfDependencyOne { agent: i });
            }
            per_agent_kappas.push(None);
        } else {
            per_agent_kappas.push(Some(drive / slack));
        }
    }
    let candidates: Vec<f64> = per_agent_kappas.iter().flatten().copied().collect();
    if candidates.is_empty() {
        return Ok(NecessityResult {
            satisfiable: true,
            kappa: None,
            per_agent_kappas,
        });
    }
    let lo = candidates.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = candidates.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let kappa = candidates.iter().sum::<f64>() / candidates.len() as f64;
    let satisfiable = hi - lo <= KAPPA_TOL && kappa.abs() <= 1.0 + ZERO_TOL;
    Ok(NecessityResult {
        satisfiable,
        kappa: satisfiable.then_some(kappa),
        per_agent_kappas,
    })
}

fn check_block_shape(x: &DMatrix<f64>, w: &InfluenceMatrix, r: usize) -> Result<(), DynamicsError> {
    check_len("agents", w.n(), x.nrows())?;
    check_len("block topics", r, x.ncols())
}

fn column(x: &DMatrix<f64>, p: usize) -> Vec<f64> {
    x.column(p).iter().copied().collect()
}

/// Closed block with logic `c_sub` shared by all agents.
pub fn step_multitopic_closed(
    x: &DMatrix<f64>,
    w: &InfluenceMatrix,
    c_sub: &DMatrix<f64>,
) -> Result<DMatrix<f64>, DynamicsError> {
    let r = c_sub.nrows();
    check_len("logic sub-block columns", r, c_sub.ncols())?;
    check_block_shape(x, w, r)?;
    let mut out = DMatrix::zeros(w.n(), r);
    for p in 0..r {
        let col = column(x, p);
        for i in 0..w.n() {
            let mut v = c_sub[(p, p)] * w.mix_row(i, &col);
            for q in (0..r).filter(|&q| q != p && c_sub[(p, q)].abs() > ZERO_TOL) {
                v += c_sub[(p, q)] * x[(i, q)];
            }
            out[(i, p)] = v;
        }
    }
    Ok(out)
}

/// General block kernel: per-agent logic, intra-block coupling on the
/// agent's own opinions, and scalar or per-agent external values.
/// `topics` are the global indices of the block's columns.
pub fn step_multitopic_open(
    x: &DMatrix<f64>,
    w: &InfluenceMatrix,
    assignment: &AgentLogicAssignment,
    topics: &[usize],
    externals: &ExternalConsensus,
) -> Result<DMatrix<f64>, DynamicsError> {
    let r = topics.len();
    check_block_shape(x, w, r)?;
    check_len("logic assignment", w.n(), assignment.n())?;
    let m = assignment.m();
    for ext in externals.values() {
        if let ExternalValue::PerAgent(v) = ext {
            check_len("per-agent external", w.n(), v.len())?;
        }
    }
    let mut local = vec![None; m];
    for (k, &p) in topics.iter().enumerate() {
        if p >= m {
            return Err(DynamicsError::DimensionMismatch {
                what: "topic index",
                expected: m,
                got: p,
            });
        }
        local[p] = Some(k);
    }
    let mut out = DMatrix::zeros(w.n(), r);
    for (k, &p) in topics.iter().enumerate() {
        let col = column(x, k);
        for i in 0..w.n() {
            let c = assignment.agent(i);
            let mut v = c.get(p, p) * w.mix_row(i, &col);
            for q in (0..m).filter(|&q| c.depends(p, q)) {
                v += match local[q] {
                    Some(kq) => c.get(p, q) * x[(i, kq)],
                    None => {
                        let alpha = externals
                            .get(&q)
                            .ok_or(DynamicsError::MissingExternal { topic: q })?;
                        c.get(p, q) * alpha.at(i)
                    }
                };
            }
            out[(i, k)] = v;
        }
    }
    Ok(out)
}

/// A block kernel advancing an n×r opinion matrix by one step.
pub trait Stepper: Sync {
    fn width(&self) -> usize;
    fn step(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>, DynamicsError>;
}

pub struct SingletonStepper<'a> {
    pub w: &'a InfluenceMatrix,
    pub gamma_pp: GammaDiag,
}

impl Stepper for SingletonStepper<'_> {
    fn width(&self) -> usize {
        1
    }

    fn step(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>, DynamicsError> {
        check_block_shape(x, self.w, 1)?;
        let next = step_singleton(x.as_slice(), self.w, &self.gamma_pp)?;
        Ok(DMatrix::from_vec(next.len(), 1, next))
    }
}

pub struct OpenSingletonStepper<'a> {
    pub w: &'a InfluenceMatrix,
    pub gamma_pp: GammaDiag,
    pub externals: Vec<ExternalInput>,
}

impl Stepper for OpenSingletonStepper<'_> {
    fn width(&self) -> usize {
        1
    }

    fn step(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>, DynamicsError> {
        check_block_shape(x, self.w, 1)?;
        let next = step_singleton_open(x.as_slice(), self.w, &self.gamma_pp, &self.externals)?;
        Ok(DMatrix::from_vec(next.len(), 1, next))
    }
}

pub struct ClosedMultiStepper<'a> {
    pub w: &'a InfluenceMatrix,
    pub c_sub: DMatrix<f64>,
}

impl Stepper for ClosedMultiStepper<'_> {
    fn width(&self) -> usize {
        self.c_sub.nrows()
    }

    fn step(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>, DynamicsError> {
        step_multitopic_closed(x, self.w, &self.c_sub)
    }
}

pub struct OpenMultiStepper<'a> {
    pub w: &'a InfluenceMatrix,
    pub assignment: &'a AgentLogicAssignment,
    pub topics: Vec<usize>,
    pub externals: ExternalConsensus,
}

impl Stepper for OpenMultiStepper<'_> {
    fn width(&self) -> usize {
        self.topics.len()
    }

    fn step(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>, DynamicsError> {
        step_multitopic_open(x, self.w, self.assignment, &self.topics, &self.externals)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub t_max: usize,
    /// Settling threshold on `‖x(t+1) - x(t)‖_∞`.
    pub eps_settle: f64,
    /// Cross-agent spread below which a topic counts as consensus.
    pub eps_consensus: f64,
    /// Consecutive sub-threshold steps required to call the run settled.
    pub settle_window: usize,
    /// Record every `stride`-th state (the final state is always kept).
    pub stride: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            t_max: 5000,
            eps_settle: 1e-9,
            eps_consensus: 1e-6,
            settle_window: 10,
            stride: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TopicVerdict {
    Consensus(f64),
    PersistentDisagreement(Vec<f64>),
    NonConvergent,
}

impl TopicVerdict {
    pub fn kind(&self) -> &'static str {
        match self {
            TopicVerdict::Consensus(_) => "consensus",
            TopicVerdict::PersistentDisagreement(_) => "disagreement",
            TopicVerdict::NonConvergent => "non-convergent",
        }
    }

    pub fn is_consensus(&self) -> bool {
        matches!(self, TopicVerdict::Consensus(_))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceVerdict {
    /// One verdict per block column.
    pub topics: Vec<TopicVerdict>,
    pub steps_used: usize,
    pub settled: bool,
    /// A non-finite value appeared; the run stopped there.
    pub overflow: bool,
}

impl ConvergenceVerdict {
    pub fn all_consensus(&self) -> bool {
        self.topics.iter().all(TopicVerdict::is_consensus)
    }
}

/// Max minus min across agents for each column.
pub fn spreads(x: &DMatrix<f64>) -> Vec<f64> {
    x.column_iter().map(|c| c.max() - c.min()).collect()
}

/// Time-indexed opinion snapshots. `topics` holds the global topic index
/// of each column.
#[derive(Debug, Clone, PartialEq)]
pub struct OpinionHistory {
    pub topics: Vec<usize>,
    pub times: Vec<usize>,
    pub states: Vec<DMatrix<f64>>,
}

impl OpinionHistory {
    pub fn new(topics: Vec<usize>) -> Self {
        OpinionHistory {
            topics,
            times: Vec::new(),
            states: Vec::new(),
        }
    }

    pub fn push(&mut self, t: usize, x: DMatrix<f64>) {
        self.times.push(t);
        self.states.push(x);
    }

    pub fn last(&self) -> Option<&DMatrix<f64>> {
        self.states.last()
    }

    pub fn last_time(&self) -> usize {
        self.times.last().copied().unwrap_or(0)
    }

    /// Latest recorded state at or before `t`.
    pub fn state_at(&self, t: usize) -> Option<&DMatrix<f64>> {
        let idx = self.times.partition_point(|&s| s <= t);
        idx.checked_sub(1).map(|i| &self.states[i])
    }

    /// CSV with header `t,agent,topic,value`; agents and topics are 1-based.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,agent,topic,value\n");
        self.write_csv_rows(&mut out, 0);
        out
    }

    /// Appends rows without a header, shifting time by `offset`.
    pub fn write_csv_rows(&self, out: &mut String, offset: usize) {
        for (t, x) in self.times.iter().zip(&self.states) {
            for i in 0..x.nrows() {
                for (k, topic) in self.topics.iter().enumerate() {
                    let _ = writeln!(out, "{},{},{},{}", t + offset, i + 1, topic + 1, x[(i, k)]);
                }
            }
        }
    }
}

/// Iterates `stepper` from `initial` until the state settles for
/// `settle_window` consecutive steps or `t_max` steps have run, then
/// classifies each column.
pub fn run_to_verdict(
    initial: &OpinionState,
    stepper: &dyn Stepper,
    topics: &[usize],
    cfg: &RunConfig,
) -> Result<(OpinionHistory, ConvergenceVerdict), DynamicsError> {
    if cfg.t_max == 0 {
        return Err(DynamicsError::InvalidConfig("t_max must be at least 1"));
    }
    if cfg.stride == 0 {
        return Err(DynamicsError::InvalidConfig("stride must be at least 1"));
    }
    check_len("initial state columns", stepper.width(), initial.x.ncols())?;
    check_len("topic labels", stepper.width(), topics.len())?;

    let mut history = OpinionHistory::new(topics.to_vec());
    let mut x = initial.x.clone();
    history.push(0, x.clone());
    let mut quiet = 0;
    let mut steps = 0;
    let mut overflow = false;
    while steps < cfg.t_max {
        let next = stepper.step(&x)?;
        steps += 1;
        if next.iter().any(|v| !v.is_finite()) {
            overflow = true;
            x = next;
            break;
        }
        let delta = (&next - &x).amax();
        x = next;
        if steps % cfg.stride == 0 {
            history.push(steps, x.clone());
        }
        quiet = if delta < cfg.eps_settle { quiet + 1 } else { 0 };
        if quiet >= cfg.settle_window {
            break;
        }
    }
    if history.last_time() != steps {
        history.push(steps, x.clone());
    }
    let settled = !overflow && quiet >= cfg.settle_window;
    let verdicts = if settled {
        spreads(&x)
            .into_iter()
            .enumerate()
            .map(|(k, spread)| {
                let col = column(&x, k);
                if spread < cfg.eps_consensus {
                    TopicVerdict::Consensus(col.iter().sum::<f64>() / col.len() as f64)
                } else {
                    TopicVerdict::PersistentDisagreement(col)
                }
            })
            .collect()
    } else {
        vec![TopicVerdict::NonConvergent; x.ncols()]
    };
    Ok((
        history,
        ConvergenceVerdict {
            topics: verdicts,
            steps_used: steps,
            settled,
            overflow,
        },
    ))
}

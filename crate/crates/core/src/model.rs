//! Validated matrix types shared by every stage of the pipeline.
//!
//! `InfluenceMatrix` is the agent-level averaging matrix (row-stochastic),
//! `LogicMatrix` is a signed topic-dependency matrix whose rows have unit
//! 1-norm. Both are immutable after validation.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Tolerance on row sums (plain or absolute).
pub const ROW_SUM_TOL: f64 = 1e-9;

/// Entries with magnitude at or below this are treated as structural zeros.
pub const ZERO_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("matrix is {rows}x{cols}, expected square")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix dimension {got} is below the minimum of {min}")]
    TooSmall { got: usize, min: usize },
    #[error("non-finite entry at row {}, column {}", .row + 1, .col + 1)]
    NonFinite { row: usize, col: usize },
    #[error("row {} sums to {sum}, expected 1", .row + 1)]
    RowSumViolation { row: usize, sum: f64 },
    #[error("negative entry at row {}, column {}", .row + 1, .col + 1)]
    NegativeEntry { row: usize, col: usize },
    #[error("row {} has absolute sum {sum}, expected 1", .row + 1)]
    AbsRowSumViolation { row: usize, sum: f64 },
    #[error("negative self-dependency on row {}", .row + 1)]
    NegativeDiagonal { row: usize },
    #[error("agent {} uses a {got}-topic logic matrix, expected {expected}", .agent + 1)]
    TopicCountMismatch {
        agent: usize,
        expected: usize,
        got: usize,
    },
    #[error("assignment covers {got} agents, expected {expected}")]
    AgentCountMismatch { expected: usize, got: usize },
    #[error("opinion state has a non-finite entry at agent {}, topic {}", .agent + 1, .topic + 1)]
    NonFiniteOpinion { agent: usize, topic: usize },
}

fn check_square(m: &DMatrix<f64>, min: usize) -> Result<usize, ModelError> {
    if m.nrows() != m.ncols() {
        return Err(ModelError::NotSquare {
            rows: m.nrows(),
            cols: m.ncols(),
        });
    }
    if m.nrows() < min {
        return Err(ModelError::TooSmall {
            got: m.nrows(),
            min,
        });
    }
    for ((row, col), v) in indexed(m) {
        if !v.is_finite() {
            return Err(ModelError::NonFinite { row, col });
        }
    }
    Ok(m.nrows())
}

fn indexed(m: &DMatrix<f64>) -> impl Iterator<Item = ((usize, usize), f64)> + '_ {
    (0..m.nrows()).flat_map(move |r| (0..m.ncols()).map(move |c| ((r, c), m[(r, c)])))
}

/// Row-stochastic n×n influence matrix over agents.
#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceMatrix {
    w: DMatrix<f64>,
    positive_diagonal: bool,
}

impl InfluenceMatrix {
    pub fn n(&self) -> usize {
        self.w.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.w
    }

    /// Whether every diagonal entry is strictly positive. Reported, not enforced.
    pub fn has_positive_diagonal(&self) -> bool {
        self.positive_diagonal
    }

    /// `Σ_j w_ij v_j` in a fixed summation order. Every stepper routes its
    /// averaging through here so reductions between kernels are bit-exact.
    pub fn mix_row(&self, i: usize, v: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (j, vj) in v.iter().enumerate() {
            acc += self.w[(i, j)] * vj;
        }
        acc
    }

    pub fn mix(&self, v: &[f64]) -> Vec<f64> {
        (0..self.n()).map(|i| self.mix_row(i, v)).collect()
    }

    /// Adjacency `i -> j` when agent i listens to agent j.
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        (0..self.n())
            .map(|i| (0..self.n()).filter(|&j| self.w[(i, j)] > 0.0).collect())
            .collect()
    }

    /// Sufficient condition for the averaging to be primitive: the graph is
    /// strongly connected and at least one agent has a self-loop.
    pub fn aperiodicity_advisory(&self) -> AperiodicityAdvisory {
        let adj = self.adjacency();
        let strongly_connected = crate::scc::tarjan(&adj).len() == 1;
        let self_loop = (0..self.n()).any(|i| self.w[(i, i)] > 0.0);
        AperiodicityAdvisory {
            strongly_connected,
            has_self_loop: self_loop,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AperiodicityAdvisory {
    pub strongly_connected: bool,
    pub has_self_loop: bool,
}

impl AperiodicityAdvisory {
    pub fn is_primitive(&self) -> bool {
        self.strongly_connected && self.has_self_loop
    }
}

/// Validates a raw n×n matrix as a row-stochastic influence matrix.
///
/// Rows are scanned in order; within a row negative entries are reported
/// before the row sum.
pub fn validate_influence(w: DMatrix<f64>) -> Result<InfluenceMatrix, ModelError> {
    let n = check_square(&w, 2)?;
    for row in 0..n {
        let mut sum = 0.0;
        for col in 0..n {
            let v = w[(row, col)];
            if v < 0.0 {
                return Err(ModelError::NegativeEntry { row, col });
            }
            sum += v;
        }
        if (sum - 1.0).abs() > ROW_SUM_TOL {
            return Err(ModelError::RowSumViolation { row, sum });
        }
    }
    let positive_diagonal = (0..n).all(|i| w[(i, i)] > 0.0);
    Ok(InfluenceMatrix {
        w,
        positive_diagonal,
    })
}

/// Signed m×m topic-dependency matrix with unit 1-norm rows and a
/// nonnegative diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct LogicMatrix {
    c: DMatrix<f64>,
}

impl LogicMatrix {
    pub fn m(&self) -> usize {
        self.c.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.c
    }

    pub fn get(&self, p: usize, q: usize) -> f64 {
        self.c[(p, q)]
    }

    /// Whether `p` depends on `q` (off-diagonal, nonzero).
    pub fn depends(&self, p: usize, q: usize) -> bool {
        p != q && self.c[(p, q)].abs() > ZERO_TOL
    }

    pub fn row(&self, p: usize) -> Vec<f64> {
        self.c.row(p).iter().copied().collect()
    }
}

pub fn validate_logic(c: DMatrix<f64>) -> Result<LogicMatrix, ModelError> {
    let m = check_square(&c, 1)?;
    for row in 0..m {
        let sum: f64 = c.row(row).iter().map(|v| v.abs()).sum();
        if (sum - 1.0).abs() > ROW_SUM_TOL {
            return Err(ModelError::AbsRowSumViolation { row, sum });
        }
        if c[(row, row)] < 0.0 {
            return Err(ModelError::NegativeDiagonal { row });
        }
    }
    Ok(LogicMatrix { c })
}

/// A within-component pair whose mutual dependencies differ.
#[derive(Debug, Clone, PartialEq)]
pub struct AsymmetricPair {
    pub p: usize,
    pub q: usize,
    pub c_pq: f64,
    pub c_qp: f64,
}

/// Lists every pair `p < q` sharing a component with `|c_pq - c_qp| > 1e-9`.
/// Advisory only.
pub fn symmetry_report(c: &LogicMatrix, components: &[Vec<usize>]) -> Vec<AsymmetricPair> {
    let mut out = Vec::new();
    for comp in components {
        let mut topics = comp.clone();
        topics.sort_unstable();
        for (a, &p) in topics.iter().enumerate() {
            for &q in &topics[a + 1..] {
                let (c_pq, c_qp) = (c.get(p, q), c.get(q, p));
                if (c_pq - c_qp).abs() > ROW_SUM_TOL {
                    out.push(AsymmetricPair { p, q, c_pq, c_qp });
                }
            }
        }
    }
    out.sort_by_key(|pair| (pair.p, pair.q));
    out
}

/// Per-agent logic matrices, all over the same topic set.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentLogicAssignment {
    per_agent: Vec<Arc<LogicMatrix>>,
}

impl AgentLogicAssignment {
    pub fn new(per_agent: Vec<Arc<LogicMatrix>>) -> Result<Self, ModelError> {
        let Some(first) = per_agent.first() else {
            return Err(ModelError::AgentCountMismatch {
                expected: 1,
                got: 0,
            });
        };
        let expected = first.m();
        for (agent, c) in per_agent.iter().enumerate() {
            if c.m() != expected {
                return Err(ModelError::TopicCountMismatch {
                    agent,
                    expected,
                    got: c.m(),
                });
            }
        }
        Ok(AgentLogicAssignment { per_agent })
    }

    /// Every agent uses the same matrix.
    pub fn uniform(c: LogicMatrix, n: usize) -> Self {
        let shared = Arc::new(c);
        AgentLogicAssignment {
            per_agent: vec![shared; n],
        }
    }

    pub fn n(&self) -> usize {
        self.per_agent.len()
    }

    pub fn m(&self) -> usize {
        self.per_agent[0].m()
    }

    pub fn agent(&self, i: usize) -> &LogicMatrix {
        &self.per_agent[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &LogicMatrix> {
        self.per_agent.iter().map(|c| c.as_ref())
    }

    /// Checks the agent count against an influence matrix.
    pub fn check_agents(&self, n: usize) -> Result<(), ModelError> {
        if self.n() != n {
            return Err(ModelError::AgentCountMismatch {
                expected: n,
                got: self.n(),
            });
        }
        Ok(())
    }

    /// True when every agent's restriction to `topics` matches agent 0's
    /// entrywise within 1e-12.
    pub fn homogeneous_over(&self, topics: &[usize]) -> bool {
        let base = self.agent(0);
        self.iter().skip(1).all(|c| {
            topics.iter().all(|&p| {
                topics
                    .iter()
                    .all(|&q| (c.get(p, q) - base.get(p, q)).abs() <= ZERO_TOL)
            })
        })
    }

    /// Replaces the logic of the listed agents.
    pub fn with_override(&self, agents: &[usize], c: Arc<LogicMatrix>) -> Result<Self, ModelError> {
        let mut per_agent = self.per_agent.clone();
        for &a in agents {
            if a >= per_agent.len() {
                return Err(ModelError::AgentCountMismatch {
                    expected: per_agent.len(),
                    got: a + 1,
                });
            }
            per_agent[a] = c.clone();
        }
        AgentLogicAssignment::new(per_agent)
    }
}

/// Opinions of n agents on d topics at discrete time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct OpinionState {
    pub x: DMatrix<f64>,
    pub t: usize,
}

impl OpinionState {
    pub fn new(x: DMatrix<f64>, t: usize) -> Result<Self, ModelError> {
        for ((agent, topic), v) in indexed(&x) {
            if !v.is_finite() {
                return Err(ModelError::NonFiniteOpinion { agent, topic });
            }
        }
        Ok(OpinionState { x, t })
    }

    pub fn from_column(v: DVector<f64>, t: usize) -> Result<Self, ModelError> {
        let n = v.len();
        Self::new(DMatrix::from_column_slice(n, 1, v.as_slice()), t)
    }

    pub fn agents(&self) -> usize {
        self.x.nrows()
    }

    pub fn topics(&self) -> usize {
        self.x.ncols()
    }
}

//! Logic matrices from access interactions, and anomalous cross-component
//! injection.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use thiserror::Error;

use crate::model::{LogicMatrix, ModelError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AccessError {
    #[error("access counts are {rows}x{cols}, expected square")]
    NotSquare { rows: usize, cols: usize },
    #[error("{got} component ids for {expected} topics")]
    ComponentCount { expected: usize, got: usize },
    #[error("invalid count {value} at row {}, column {}", .row + 1, .col + 1)]
    InvalidCount { row: usize, col: usize, value: f64 },
    #[error("row {} has no positive mass inside its component", .row + 1)]
    ZeroRowInComponent { row: usize },
    #[error("edge ({}, {}) is out of range for {m} topics", .target + 1, .from + 1)]
    IndexOutOfRange {
        target: usize,
        from: usize,
        m: usize,
    },
    #[error("edge from topic {} to itself", .topic + 1)]
    SelfEdge { topic: usize },
    #[error("edge weight {weight} must be finite and nonnegative")]
    InvalidWeight { weight: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Observed influence counts: `a[(p, q)]` is the influence of user q on user p.
#[derive(Debug, Clone, PartialEq)]
pub struct AccessCounts {
    a: DMatrix<f64>,
    component_of: Vec<usize>,
}

impl AccessCounts {
    pub fn new(a: DMatrix<f64>, component_of: Vec<usize>) -> Result<Self, AccessError> {
        if a.nrows() != a.ncols() {
            return Err(AccessError::NotSquare {
                rows: a.nrows(),
                cols: a.ncols(),
            });
        }
        if component_of.len() != a.nrows() {
            return Err(AccessError::ComponentCount {
                expected: a.nrows(),
                got: component_of.len(),
            });
        }
        for row in 0..a.nrows() {
            for col in 0..a.ncols() {
                let value = a[(row, col)];
                if !value.is_finite() || value < 0.0 {
                    return Err(AccessError::InvalidCount { row, col, value });
                }
            }
        }
        Ok(AccessCounts { a, component_of })
    }

    pub fn m(&self) -> usize {
        self.a.nrows()
    }

    pub fn counts(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn component_of(&self) -> &[usize] {
        &self.component_of
    }
}

/// Normalizes each row over the columns in the row's own component;
/// mass outside the component is dropped.
pub fn logic_from_access(counts: &AccessCounts) -> Result<LogicMatrix, AccessError> {
    let m = counts.m();
    let comp = counts.component_of();
    let mut c = DMatrix::zeros(m, m);
    for p in 0..m {
        let inside: Vec<usize> = (0..m).filter(|&q| comp[q] == comp[p]).collect();
        let total: f64 = inside.iter().map(|&q| counts.a[(p, q)]).sum();
        if total <= 0.0 {
            return Err(AccessError::ZeroRowInComponent { row: p });
        }
        for q in inside {
            c[(p, q)] = counts.a[(p, q)] / total;
        }
    }
    Ok(crate::model::validate_logic(c)?)
}

/// Additive cross-influence on one row of a logic matrix.
///
/// `weight` is in units of the target row's 1-norm before injection: on a
/// normalized row whose raw counts summed to S, adding `k` raw units is an
/// edge of weight `k / S`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InjectionEdge {
    target: usize,
    source: usize,
    weight: f64,
}

impl InjectionEdge {
    pub fn new(target: usize, source: usize, weight: f64) -> Result<Self, AccessError> {
        if target == source {
            return Err(AccessError::SelfEdge { topic: target });
        }
        if !weight.is_finite() || weight < 0.0 {
            return Err(AccessError::InvalidWeight { weight });
        }
        Ok(InjectionEdge {
            target,
            source,
            weight,
        })
    }

    pub fn target(&self) -> usize {
        self.target
    }

    pub fn source(&self) -> usize {
        self.source
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }
}

/// Adds each edge's weight to the magnitude at `(target, source)`, keeping
/// existing signs, then renormalizes touched rows to unit 1-norm. Rows with
/// no net added weight are copied unchanged.
pub fn inject_cross_influence(
    base: &LogicMatrix,
    edges: &[InjectionEdge],
) -> Result<LogicMatrix, AccessError> {
    let m = base.m();
    let mut added: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for e in edges {
        if e.target >= m || e.source >= m {
            return Err(AccessError::IndexOutOfRange {
                target: e.target,
                from: e.source,
                m,
            });
        }
        added.entry(e.target).or_insert_with(|| vec![0.0; m])[e.source] += e.weight;
    }
    let mut c = base.matrix().clone();
    for (row, extra) in added {
        if extra.iter().all(|&w| w == 0.0) {
            continue;
        }
        for (q, w) in extra.into_iter().enumerate() {
            let v = c[(row, q)];
            let sign = if v < 0.0 { -1.0 } else { 1.0 };
            c[(row, q)] = sign * (v.abs() + w);
        }
        let norm: f64 = c.row(row).iter().map(|v| v.abs()).sum();
        for q in 0..m {
            c[(row, q)] /= norm;
        }
    }
    Ok(crate::model::validate_logic(c)?)
}

/// Seeded generator of synthetic access counts with per-component rates.
#[derive(Debug, Clone)]
pub struct SyntheticAccess {
    pub component_of: Vec<usize>,
    /// Mean self-access count per topic.
    pub self_rate: f64,
    /// Mean count between two topics of the same component.
    pub peer_rate: f64,
    /// Mean count across components (dropped by normalization).
    pub cross_rate: f64,
    pub seed: u64,
}

impl SyntheticAccess {
    pub fn generate(&self) -> Result<AccessCounts, AccessError> {
        let m = self.component_of.len();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut a = DMatrix::zeros(m, m);
        for p in 0..m {
            for q in 0..m {
                let rate = if p == q {
                    self.self_rate
                } else if self.component_of[p] == self.component_of[q] {
                    self.peer_rate
                } else {
                    self.cross_rate
                };
                a[(p, q)] = sample_count(&mut rng, rate);
            }
            // every row keeps some self mass
            a[(p, p)] += 1.0;
        }
        AccessCounts::new(a, self.component_of.clone())
    }
}

fn sample_count<R: Rng>(rng: &mut R, rate: f64) -> f64 {
    if rate <= 0.0 {
        return 0.0;
    }
    match Poisson::new(rate) {
        Ok(dist) => dist.sample(rng),
        Err(_) => 0.0,
    }
}

#![allow(dead_code)]

use std::path::PathBuf;

use nalgebra::{DMatrix, DVector};
use opinion_ueba::dynamics::{ExternalInput, ExternalValue, GammaDiag};
use opinion_ueba::{validate_influence, validate_logic, InfluenceMatrix, LogicMatrix};
use rand::Rng;

pub fn scenario_path(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(rel)
}

/// Row-stochastic, positive diagonal, strongly connected through the ring
/// i -> i+1, hence primitive.
pub fn random_influence<R: Rng>(rng: &mut R, n: usize) -> InfluenceMatrix {
    let mut w = DMatrix::zeros(n, n);
    for i in 0..n {
        w[(i, i)] = rng.random_range(0.2..1.0);
        if n > 1 {
            w[(i, (i + 1) % n)] = rng.random_range(0.2..1.0);
        }
        for j in 0..n {
            if rng.random_bool(0.3) {
                w[(i, j)] += rng.random_range(0.0..1.0);
            }
        }
        let s: f64 = w.row(i).iter().sum();
        for j in 0..n {
            w[(i, j)] /= s;
        }
    }
    validate_influence(w).unwrap()
}

/// Random logic with the given density of off-diagonal dependencies.
/// Diagonal entries are at least `min_diag` before normalization.
pub fn random_logic<R: Rng>(
    rng: &mut R,
    m: usize,
    density: f64,
    signed: bool,
    min_diag: f64,
) -> LogicMatrix {
    let mut c = DMatrix::zeros(m, m);
    for p in 0..m {
        c[(p, p)] = min_diag + rng.random_range(0.0..1.0);
        for q in 0..m {
            if p != q && rng.random_bool(density) {
                let v: f64 = rng.random_range(0.05..1.0);
                c[(p, q)] = if signed && rng.random_bool(0.5) {
                    -v
                } else {
                    v
                };
            }
        }
        let s: f64 = c.row(p).iter().map(|v| v.abs()).sum();
        for q in 0..m {
            c[(p, q)] /= s;
        }
    }
    validate_logic(c).unwrap()
}

/// Boolean reachability by repeated squaring-free closure.
pub fn reachability(adj: &[Vec<bool>]) -> Vec<Vec<bool>> {
    let m = adj.len();
    let mut r = adj.to_vec();
    for (p, row) in r.iter_mut().enumerate() {
        row[p] = true;
    }
    for k in 0..m {
        for i in 0..m {
            if r[i][k] {
                let via = r[k].clone();
                for (dst, &hop) in r[i].iter_mut().zip(&via) {
                    *dst |= hop;
                }
            }
        }
    }
    r
}

/// Left Perron vector of a primitive row-stochastic matrix, normalized to
/// sum one, from `v^T (I - W) = 0` with the last equation replaced by
/// `sum v = 1`.
pub fn left_perron(w: &DMatrix<f64>) -> DVector<f64> {
    let n = w.nrows();
    let mut a = (DMatrix::identity(n, n) - w).transpose();
    let mut b = DVector::zeros(n);
    for j in 0..n {
        a[(n - 1, j)] = 1.0;
    }
    b[n - 1] = 1.0;
    a.lu().solve(&b).unwrap()
}

/// Solves the fixed point of an open singleton `x = diag(g) W x + b`.
pub fn open_singleton_fixed_point(w: &DMatrix<f64>, g: &[f64], b: &[f64]) -> DVector<f64> {
    let n = w.nrows();
    let mut a = DMatrix::identity(n, n);
    for i in 0..n {
        for j in 0..n {
            a[(i, j)] -= g[i] * w[(i, j)];
        }
    }
    a.lu().solve(&DVector::from_column_slice(b)).unwrap()
}

pub fn max_abs(x: &DMatrix<f64>) -> f64 {
    x.iter().fold(0.0f64, |a, v| a.max(v.abs()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SingletonCase {
    Homogeneous,
    /// Per-agent self-dependency differs but every agent shares one kappa.
    Consistent,
    Generic,
}

pub struct OpenSingleton {
    pub w: InfluenceMatrix,
    pub gamma_pp: GammaDiag,
    pub externals: Vec<ExternalInput>,
}

/// Open singleton topic with one or two scalar externals in [-1, 1].
pub fn random_open_singleton<R: Rng>(rng: &mut R, case: SingletonCase) -> OpenSingleton {
    let n = rng.random_range(2..=6);
    let w = random_influence(rng, n);
    let k = rng.random_range(1..=2);
    let alphas: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..=1.0)).collect();
    let signs: Vec<f64> = (0..k)
        .map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 })
        .collect();
    let split = rng.random_range(0.1..0.9);
    let shared_pp = rng.random_range(0.05..0.9);
    let mut pp = Vec::with_capacity(n);
    let mut per_ext = vec![Vec::with_capacity(n); k];
    for _ in 0..n {
        let (cpp, frac) = match case {
            SingletonCase::Homogeneous => (shared_pp, split),
            SingletonCase::Consistent => (rng.random_range(0.05..0.9), split),
            SingletonCase::Generic => (rng.random_range(0.05..0.9), rng.random_range(0.1..0.9)),
        };
        let rest = 1.0 - cpp;
        pp.push(cpp);
        if k == 1 {
            per_ext[0].push(signs[0] * rest);
        } else {
            per_ext[0].push(signs[0] * rest * frac);
            per_ext[1].push(signs[1] * rest * (1.0 - frac));
        }
    }
    if case == SingletonCase::Generic && k == 1 {
        // one external cannot break consistency through the split, so flip
        // the sign for one agent when possible
        if n > 1 {
            per_ext[0][0] = -per_ext[0][0];
        }
    }
    let externals = alphas
        .iter()
        .zip(per_ext)
        .enumerate()
        .map(|(q, (&a, g))| ExternalInput {
            topic: q + 1,
            alpha: ExternalValue::Scalar(a),
            gamma: GammaDiag::new(g),
        })
        .collect();
    OpenSingleton {
        w,
        gamma_pp: GammaDiag::new(pp),
        externals,
    }
}

/// Fixed point of a block with scalar externals, solved as one linear system
/// over the stacked unknowns `(topic k, agent i) -> k * n + i`.
pub fn block_fixed_point(
    w: &DMatrix<f64>,
    asg: &opinion_ueba::AgentLogicAssignment,
    topics: &[usize],
    alpha: &std::collections::BTreeMap<usize, f64>,
) -> DMatrix<f64> {
    let n = w.nrows();
    let r = topics.len();
    let mut a = DMatrix::identity(n * r, n * r);
    let mut b = DVector::zeros(n * r);
    for (k, &p) in topics.iter().enumerate() {
        for i in 0..n {
            let c = asg.agent(i);
            let row = k * n + i;
            for j in 0..n {
                a[(row, k * n + j)] -= c.get(p, p) * w[(i, j)];
            }
            for q in (0..c.m()).filter(|&q| q != p) {
                match topics.iter().position(|&t| t == q) {
                    Some(kq) => a[(row, kq * n + i)] -= c.get(p, q),
                    None => {
                        if c.get(p, q) != 0.0 {
                            b[row] += c.get(p, q) * alpha[&q];
                        }
                    }
                }
            }
        }
    }
    let z = a.lu().solve(&b).unwrap();
    DMatrix::from_column_slice(n, r, z.as_slice())
}

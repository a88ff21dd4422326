//! Metropolis weights, realized gossip matrices, and their first and second
//! moments under independent link activation.

use std::collections::HashMap;

use nalgebra::{DMatrix, SymmetricEigen};
use thiserror::Error;

use crate::graph::Topology;

const STOCHASTIC_TOL: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum MixingError {
    #[error("weight matrix must be square m x m")]
    Shape,
    #[error("weights not symmetric at ({0}, {1})")]
    Asymmetric(usize, usize),
    #[error("negative weight {value} at ({i}, {j})")]
    Negative { i: usize, j: usize, value: f64 },
    #[error("row {0} does not sum to 1")]
    RowSum(usize),
    #[error("link draw map not symmetric at ({0}, {1})")]
    AsymmetricDraw(usize, usize),
    #[error("link draw at ({0}, {1}) is not on an edge or not 0/1")]
    BadDraw(usize, usize),
    #[error("link probability {value} at ({i}, {j}) outside (0, 1]")]
    BadProbability { i: usize, j: usize, value: f64 },
    #[error("expected mixing graph is disconnected: contraction factor would be 1")]
    Disconnected,
    #[error("no consensus contraction: spectral radius {0} is not below 1")]
    NoContraction(f64),
}

/// Symmetric doubly stochastic base weights with nonnegative entries.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseWeights {
    r: DMatrix<f64>,
}

impl BaseWeights {
    pub fn new(r: DMatrix<f64>) -> Result<Self, MixingError> {
        let m = r.nrows();
        if r.ncols() != m {
            return Err(MixingError::Shape);
        }
        for i in 0..m {
            for j in 0..m {
                if r[(i, j)] != r[(j, i)] {
                    return Err(MixingError::Asymmetric(i, j));
                }
                if r[(i, j)] < 0.0 {
                    return Err(MixingError::Negative { i, j, value: r[(i, j)] });
                }
            }
            if (r.row(i).sum() - 1.0).abs() > STOCHASTIC_TOL {
                return Err(MixingError::RowSum(i));
            }
        }
        Ok(BaseWeights { r })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.r
    }

    pub fn m(&self) -> usize {
        self.r.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.r[(i, j)]
    }
}

pub fn metropolis_weights(t: &Topology) -> BaseWeights {
    let m = t.m;
    let mut r = DMatrix::zeros(m, m);
    for &(i, j) in t.edges() {
        let w = 1.0 / (1.0 + t.degree(i).max(t.degree(j)) as f64);
        r[(i, j)] = w;
        r[(j, i)] = w;
    }
    for i in 0..m {
        let off: f64 = (0..m).filter(|&j| j != i).map(|j| r[(i, j)]).sum();
        r[(i, i)] = 1.0 - off;
    }
    BaseWeights::new(r).expect("Metropolis construction is symmetric and doubly stochastic")
}

/// P with `p_ij = r_ij * vhat_ij` off the diagonal.
#[derive(Debug, Clone)]
pub struct RealizedMixing {
    pub p: DMatrix<f64>,
    pub link_draws: DMatrix<f64>,
}

pub fn realize_mixing(r: &BaseWeights, draws: &DMatrix<f64>) -> Result<RealizedMixing, MixingError> {
    let m = r.m();
    if draws.nrows() != m || draws.ncols() != m {
        return Err(MixingError::Shape);
    }
    let mut p = DMatrix::zeros(m, m);
    for i in 0..m {
        let mut off = 0.0;
        for j in 0..m {
            if i == j {
                continue;
            }
            let v = draws[(i, j)];
            if v != draws[(j, i)] {
                return Err(MixingError::AsymmetricDraw(i, j));
            }
            if !(v == 0.0 || v == 1.0) || (v == 1.0 && r.get(i, j) == 0.0) {
                return Err(MixingError::BadDraw(i, j));
            }
            p[(i, j)] = r.get(i, j) * v;
            off += p[(i, j)];
        }
        p[(i, i)] = 1.0 - off;
    }
    Ok(RealizedMixing { p, link_draws: draws.clone() })
}

fn check_probs(r: &BaseWeights, b: &DMatrix<f64>) -> Result<(), MixingError> {
    let m = r.m();
    if b.nrows() != m || b.ncols() != m {
        return Err(MixingError::Shape);
    }
    for i in 0..m {
        for j in 0..m {
            if i != j && r.get(i, j) > 0.0 {
                let v = b[(i, j)];
                if !(v > 0.0 && v <= 1.0) {
                    return Err(MixingError::BadProbability { i, j, value: v });
                }
                if v != b[(j, i)] {
                    return Err(MixingError::AsymmetricDraw(i, j));
                }
            }
        }
    }
    Ok(())
}

/// Expected mixing matrix: off-diagonal `b_ij r_ij`.
pub fn expected_mixing(r: &BaseWeights, b: &DMatrix<f64>) -> Result<DMatrix<f64>, MixingError> {
    check_probs(r, b)?;
    let m = r.m();
    let mut rb = DMatrix::zeros(m, m);
    for i in 0..m {
        let mut off = 0.0;
        for j in 0..m {
            if i != j && r.get(i, j) > 0.0 {
                rb[(i, j)] = b[(i, j)] * r.get(i, j);
                off += rb[(i, j)];
            }
        }
        rb[(i, i)] = 1.0 - off;
    }
    Ok(rb)
}

#[derive(Debug, Clone)]
pub struct MixingAnalysis {
    pub r_bar: DMatrix<f64>,
    pub r_tilde: DMatrix<f64>,
    pub r_zero: DMatrix<f64>,
    pub rho_tilde: f64,
}

/// First and second moments of P. `rho_tilde` is filled in by
/// [`consensus_contraction_factor`]; here it is NaN.
pub fn second_moment_mixing(r: &BaseWeights, b: &DMatrix<f64>) -> Result<MixingAnalysis, MixingError> {
    let r_bar = expected_mixing(r, b)?;
    let m = r.m();
    let mut r_zero = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in 0..m {
            if i != j && r.get(i, j) > 0.0 {
                let bij = b[(i, j)];
                let v = 2.0 * bij * (1.0 - bij) * r.get(i, j) * r.get(i, j);
                r_zero[(i, j)] = -v;
                r_zero[(i, i)] += v;
            }
        }
    }
    let r_tilde = &r_bar * &r_bar + &r_zero;
    Ok(MixingAnalysis { r_bar, r_tilde, r_zero, rho_tilde: f64::NAN })
}

fn expected_graph_connected(r_bar: &DMatrix<f64>) -> bool {
    let m = r_bar.nrows();
    let mut seen = vec![false; m];
    let mut stack = vec![0];
    seen[0] = true;
    while let Some(u) = stack.pop() {
        for v in 0..m {
            if v != u && !seen[v] && r_bar[(u, v)] > 0.0 {
                seen[v] = true;
                stack.push(v);
            }
        }
    }
    seen.into_iter().all(|s| s)
}

/// Largest absolute eigenvalue of a symmetric matrix.
pub fn symmetric_spectral_radius(a: &DMatrix<f64>) -> f64 {
    let sym = (a + a.transpose()) * 0.5;
    SymmetricEigen::new(sym).eigenvalues.iter().fold(0.0_f64, |acc, &l| acc.max(l.abs()))
}

/// Spectral radius of `R~ - (1/m) 1 1^T`.
pub fn consensus_contraction_factor(r: &BaseWeights, b: &DMatrix<f64>) -> Result<f64, MixingError> {
    analyze(r, b).map(|a| a.rho_tilde)
}

/// Full analysis including the contraction factor.
pub fn analyze(r: &BaseWeights, b: &DMatrix<f64>) -> Result<MixingAnalysis, MixingError> {
    let mut a = second_moment_mixing(r, b)?;
    if !expected_graph_connected(&a.r_bar) {
        return Err(MixingError::Disconnected);
    }
    let m = r.m();
    let deflated = a.r_tilde.map(|x| x - 1.0 / m as f64);
    let rho = symmetric_spectral_radius(&deflated);
    if rho >= 1.0 - 1e-12 {
        return Err(MixingError::NoContraction(rho));
    }
    a.rho_tilde = rho;
    Ok(a)
}

/// Caches analyses keyed on a profile version, for time-varying `b`.
#[derive(Debug, Default)]
pub struct MixingCache {
    entries: HashMap<u64, MixingAnalysis>,
}

impl MixingCache {
    pub fn get_or_compute(
        &mut self,
        version: u64,
        r: &BaseWeights,
        b: &DMatrix<f64>,
    ) -> Result<&MixingAnalysis, MixingError> {
        if !self.entries.contains_key(&version) {
            let a = analyze(r, b)?;
            self.entries.insert(version, a);
        }
        Ok(&self.entries[&version])
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Dense `b` matrix with the same probability on every edge.
pub fn uniform_link_probs(t: &Topology, p: f64) -> DMatrix<f64> {
    let mut b = DMatrix::zeros(t.m, t.m);
    for &(i, j) in t.edges() {
        b[(i, j)] = p;
        b[(j, i)] = p;
    }
    b
}

//! Local loss families, gradients, smoothness and heterogeneity constants,
//! the global optimum, data partitioning, and IDX ingestion.
//!
//! Two family shapes exist. Quadratic clients hold `(H_i, c_i)` with
//! `F_i(t) = 0.5 t'H_i t - c_i't`. Linear classifiers hold a shard of a shared
//! dataset and score class `c` as `w_c'x + b_c`; the loss is a one-vs-rest sum
//! over classes (logistic or hinge) plus `lambda/2 |theta|^2`. Classifier
//! parameters are laid out class-major: `[w_0, b_0, w_1, b_1, ...]`.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{keyed, Domain};

/// Default SVM / logistic regularization.
pub const DEFAULT_LAMBDA: f64 = 1e-3;
pub const DEFAULT_BATCH: usize = 16;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("client {0} Hessian is not positive definite")]
    NotPositiveDefinite(usize),
    #[error("client id {0} out of range")]
    ClientOutOfRange(usize),
    #[error("client {0} has an empty shard")]
    EmptyShard(usize),
    #[error("hinge-loss families are non-smooth and cannot enter theory calculations")]
    NonSmooth,
    #[error("optimum solve did not converge: residual {residual:e} after {iterations} iterations")]
    NoConvergence { residual: f64, iterations: usize },
    #[error("optimum is required before computing constants")]
    MissingOptimum,
    #[error("infeasible partition: {0}")]
    InfeasiblePartition(String),
    #[error("IDX format error in {path}: {reason}")]
    Format { path: String, reason: String },
    #[error("minibatch noise needs a data-backed family")]
    NoData,
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Kind {
    Quadratic,
    RegularizedLogistic,
    HingeSvm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum NoiseMode {
    /// Exact local gradients.
    Exact,
    /// Gradient over a uniform batch drawn without replacement.
    Minibatch { batch_size: usize },
    /// Exact gradient plus isotropic Gaussian noise with `E|eps|^2 = sigma2`.
    Synthetic { sigma2: f64 },
}

impl Default for NoiseMode {
    fn default() -> Self {
        NoiseMode::Minibatch { batch_size: DEFAULT_BATCH }
    }
}

/// Flattened, row-major feature matrix with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Vec<f64>,
    pub labels: Vec<u8>,
    pub dim: usize,
    pub classes: usize,
}

impl Dataset {
    pub fn new(features: Vec<f64>, labels: Vec<u8>, dim: usize) -> Self {
        assert_eq!(features.len(), labels.len() * dim, "feature buffer does not match label count");
        let classes = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
        Dataset { features, labels, dim, classes }
    }

    pub fn with_classes(mut self, classes: usize) -> Self {
        self.classes = self.classes.max(classes);
        self
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.features[s * self.dim..(s + 1) * self.dim]
    }
}

#[derive(Debug, Clone)]
pub struct QuadraticFamily {
    pub h: Vec<DMatrix<f64>>,
    pub c: Vec<DVector<f64>>,
}

#[derive(Debug, Clone)]
pub struct ClassifierFamily {
    pub kind: Kind,
    pub data: Arc<Dataset>,
    pub shards: Vec<Vec<usize>>,
    pub lambda: f64,
    pub classes: usize,
}

#[derive(Debug, Clone)]
pub enum ObjectiveFamily {
    Quadratic(QuadraticFamily),
    Classifier(ClassifierFamily),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuadraticSpec {
    pub eig_min: f64,
    pub eig_max: f64,
    /// 0 gives identical clients; must stay below 1 for guaranteed definiteness.
    pub heterogeneity: f64,
    /// Scale of the linear terms, which sets the distance of the optimum from 0.
    pub c_scale: f64,
}

impl Default for QuadraticSpec {
    fn default() -> Self {
        QuadraticSpec { eig_min: 1.0, eig_max: 4.0, heterogeneity: 0.5, c_scale: 1.0 }
    }
}

fn gaussian_vec(n: usize, rng: &mut impl Rng) -> DVector<f64> {
    DVector::from_fn(n, |_, _| StandardNormal.sample(rng))
}

fn gaussian_mat(n: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |_, _| StandardNormal.sample(rng))
}

fn spectral_norm_sym(a: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(a.clone()).eigenvalues.iter().fold(0.0_f64, |m, &l| m.max(l.abs()))
}

/// Random strongly convex quadratic clients.
pub fn make_quadratic(m: usize, n: usize, spec: &QuadraticSpec, seed: u64) -> Result<ObjectiveFamily, ObjectiveError> {
    if n == 0 {
        return Err(ObjectiveError::Dimension { expected: 1, got: 0 });
    }
    if !(spec.eig_min > 0.0 && spec.eig_max >= spec.eig_min) {
        return Err(ObjectiveError::NotPositiveDefinite(0));
    }
    let mut rng = keyed(seed, Domain::Objective, 0, 0);
    let q = gaussian_mat(n, &mut rng).qr().q();
    let eig = DVector::from_fn(n, |i, _| {
        if n == 1 {
            spec.eig_min
        } else {
            spec.eig_min + (spec.eig_max - spec.eig_min) * i as f64 / (n - 1) as f64
        }
    });
    let h0 = &q * DMatrix::from_diagonal(&eig) * q.transpose();
    let h0 = (&h0 + h0.transpose()) * 0.5;
    let c0 = gaussian_vec(n, &mut rng) * spec.c_scale;
    let mut h = Vec::with_capacity(m);
    let mut c = Vec::with_capacity(m);
    for i in 0..m {
        let mut r = keyed(seed, Domain::Objective, 1, i as u64);
        let g = gaussian_mat(n, &mut r);
        let s = (&g + g.transpose()) * 0.5;
        let norm = spectral_norm_sym(&s);
        let s = if norm > 0.0 { s / norm } else { s };
        h.push(&h0 + s * (spec.heterogeneity * spec.eig_min));
        c.push(&c0 + gaussian_vec(n, &mut r) * (spec.heterogeneity * spec.c_scale));
    }
    QuadraticFamily::new(h, c).map(ObjectiveFamily::Quadratic)
}

impl QuadraticFamily {
    pub fn new(h: Vec<DMatrix<f64>>, c: Vec<DVector<f64>>) -> Result<Self, ObjectiveError> {
        let n = c.first().map(|v| v.len()).unwrap_or(0);
        for (i, (hi, ci)) in h.iter().zip(&c).enumerate() {
            if hi.nrows() != n || hi.ncols() != n || ci.len() != n {
                return Err(ObjectiveError::Dimension { expected: n, got: ci.len() });
            }
            if Cholesky::new(hi.clone()).is_none() {
                return Err(ObjectiveError::NotPositiveDefinite(i));
            }
        }
        Ok(QuadraticFamily { h, c })
    }

    pub fn h_bar(&self) -> DMatrix<f64> {
        let m = self.h.len() as f64;
        self.h.iter().fold(DMatrix::zeros(self.c[0].len(), self.c[0].len()), |a, h| a + h) / m
    }

    pub fn c_bar(&self) -> DVector<f64> {
        let m = self.c.len() as f64;
        self.c.iter().fold(DVector::zeros(self.c[0].len()), |a, c| a + c) / m
    }
}

fn logistic_loss(t: f64) -> f64 {
    // ln(1 + e^{-t})
    if t > 0.0 {
        (-t).exp().ln_1p()
    } else {
        -t + t.exp().ln_1p()
    }
}

fn logistic_dloss(t: f64) -> f64 {
    // d/dt ln(1 + e^{-t}) = -1 / (1 + e^t)
    if t > 0.0 {
        let e = (-t).exp();
        -e / (1.0 + e)
    } else {
        -1.0 / (1.0 + t.exp())
    }
}

impl ClassifierFamily {
    pub fn new(kind: Kind, data: Arc<Dataset>, shards: Vec<Vec<usize>>, lambda: f64) -> Result<Self, ObjectiveError> {
        if kind == Kind::Quadratic {
            return Err(ObjectiveError::NoData);
        }
        if let Some(i) = shards.iter().position(|s| s.is_empty()) {
            return Err(ObjectiveError::EmptyShard(i));
        }
        let classes = data.classes.max(2);
        Ok(ClassifierFamily { kind, data, shards, lambda, classes })
    }

    pub fn n(&self) -> usize {
        self.classes * (self.data.dim + 1)
    }

    /// Class scores for one sample.
    pub fn scores(&self, theta: &[f64], x: &[f64]) -> Vec<f64> {
        let p = self.data.dim + 1;
        (0..self.classes)
            .map(|c| {
                let w = &theta[c * p..(c + 1) * p];
                w[..p - 1].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + w[p - 1]
            })
            .collect()
    }

    fn margin_loss(&self, t: f64) -> f64 {
        match self.kind {
            Kind::HingeSvm => (1.0 - t).max(0.0),
            _ => logistic_loss(t),
        }
    }

    fn margin_dloss(&self, t: f64) -> f64 {
        match self.kind {
            // Subgradient 0 at the kink.
            Kind::HingeSvm => {
                if t < 1.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            _ => logistic_dloss(t),
        }
    }

    /// Mean loss over `samples` plus the regularizer.
    pub fn loss_over(&self, theta: &[f64], samples: &[usize]) -> f64 {
        let mut total = 0.0;
        for &s in samples {
            let y = self.data.labels[s] as usize;
            for (c, z) in self.scores(theta, self.data.row(s)).into_iter().enumerate() {
                let sign = if c == y { 1.0 } else { -1.0 };
                total += self.margin_loss(sign * z);
            }
        }
        total / samples.len() as f64 + 0.5 * self.lambda * theta.iter().map(|v| v * v).sum::<f64>()
    }

    /// Mean (sub)gradient over `samples` plus the regularizer.
    pub fn gradient_over(&self, theta: &[f64], samples: &[usize]) -> DVector<f64> {
        let p = self.data.dim + 1;
        let mut g = vec![0.0; theta.len()];
        for &s in samples {
            let x = self.data.row(s);
            let y = self.data.labels[s] as usize;
            for (c, z) in self.scores(theta, x).into_iter().enumerate() {
                let sign = if c == y { 1.0 } else { -1.0 };
                let coef = self.margin_dloss(sign * z) * sign;
                if coef != 0.0 {
                    let blk = &mut g[c * p..(c + 1) * p];
                    for (gj, xj) in blk[..p - 1].iter_mut().zip(x) {
                        *gj += coef * xj;
                    }
                    blk[p - 1] += coef;
                }
            }
        }
        let inv = 1.0 / samples.len() as f64;
        DVector::from_iterator(theta.len(), g.into_iter().zip(theta).map(|(gj, t)| gj * inv + self.lambda * t))
    }

    /// Predicted label; ties go to the lowest class index.
    pub fn predict(&self, theta: &[f64], x: &[f64]) -> usize {
        let s = self.scores(theta, x);
        let mut best = 0;
        for (c, &v) in s.iter().enumerate() {
            if v > s[best] {
                best = c;
            }
        }
        best
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TheoryConstants {
    pub mu: f64,
    pub beta: f64,
    pub delta: f64,
    pub zeta: f64,
    pub sigma2: f64,
    pub exact: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimumMethod {
    ClosedForm,
    HighPrecisionSolve,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimumInfo {
    pub theta_star: DVector<f64>,
    pub f_star: f64,
    pub method: OptimumMethod,
    pub residual: f64,
}

impl ObjectiveFamily {
    pub fn m(&self) -> usize {
        match self {
            ObjectiveFamily::Quadratic(q) => q.h.len(),
            ObjectiveFamily::Classifier(c) => c.shards.len(),
        }
    }

    pub fn n(&self) -> usize {
        match self {
            ObjectiveFamily::Quadratic(q) => q.c[0].len(),
            ObjectiveFamily::Classifier(c) => c.n(),
        }
    }

    pub fn kind(&self) -> Kind {
        match self {
            ObjectiveFamily::Quadratic(_) => Kind::Quadratic,
            ObjectiveFamily::Classifier(c) => c.kind,
        }
    }

    pub fn is_smooth(&self) -> bool {
        self.kind() != Kind::HingeSvm
    }

    fn check(&self, i: usize, theta: &DVector<f64>) -> Result<(), ObjectiveError> {
        if i >= self.m() {
            return Err(ObjectiveError::ClientOutOfRange(i));
        }
        if theta.len() != self.n() {
            return Err(ObjectiveError::Dimension { expected: self.n(), got: theta.len() });
        }
        Ok(())
    }

    pub fn local_loss(&self, i: usize, theta: &DVector<f64>) -> Result<f64, ObjectiveError> {
        self.check(i, theta)?;
        Ok(match self {
            ObjectiveFamily::Quadratic(q) => 0.5 * theta.dot(&(&q.h[i] * theta)) - q.c[i].dot(theta),
            ObjectiveFamily::Classifier(c) => c.loss_over(theta.as_slice(), &c.shards[i]),
        })
    }

    pub fn global_loss(&self, theta: &DVector<f64>) -> Result<f64, ObjectiveError> {
        let mut s = 0.0;
        for i in 0..self.m() {
            s += self.local_loss(i, theta)?;
        }
        Ok(s / self.m() as f64)
    }

    pub fn full_gradient(&self, i: usize, theta: &DVector<f64>) -> Result<DVector<f64>, ObjectiveError> {
        self.check(i, theta)?;
        Ok(match self {
            ObjectiveFamily::Quadratic(q) => &q.h[i] * theta - &q.c[i],
            ObjectiveFamily::Classifier(c) => c.gradient_over(theta.as_slice(), &c.shards[i]),
        })
    }

    pub fn global_gradient(&self, theta: &DVector<f64>) -> Result<DVector<f64>, ObjectiveError> {
        let mut g = DVector::zeros(self.n());
        for i in 0..self.m() {
            g += self.full_gradient(i, theta)?;
        }
        Ok(g / self.m() as f64)
    }

    /// Stochastic gradient; the second element is the injected noise when it
    /// is known exactly.
    pub fn stochastic_gradient(
        &self,
        i: usize,
        theta: &DVector<f64>,
        noise: NoiseMode,
        rng: &mut impl Rng,
    ) -> Result<(DVector<f64>, Option<DVector<f64>>), ObjectiveError> {
        self.check(i, theta)?;
        match noise {
            NoiseMode::Exact => Ok((self.full_gradient(i, theta)?, None)),
            NoiseMode::Synthetic { sigma2 } => {
                let g = self.full_gradient(i, theta)?;
                if sigma2 == 0.0 {
                    return Ok((g, Some(DVector::zeros(theta.len()))));
                }
                let sd = (sigma2 / theta.len() as f64).sqrt();
                let eps = gaussian_vec(theta.len(), rng) * sd;
                Ok((g + &eps, Some(eps)))
            }
            NoiseMode::Minibatch { batch_size } => match self {
                ObjectiveFamily::Quadratic(_) => Err(ObjectiveError::NoData),
                ObjectiveFamily::Classifier(c) => {
                    let shard = &c.shards[i];
                    if shard.is_empty() {
                        return Err(ObjectiveError::EmptyShard(i));
                    }
                    if batch_size >= shard.len() {
                        return Ok((c.gradient_over(theta.as_slice(), shard), None));
                    }
                    let batch: Vec<usize> = shard.choose_multiple(rng, batch_size.max(1)).copied().collect();
                    Ok((c.gradient_over(theta.as_slice(), &batch), None))
                }
            },
        }
    }
}

/// Global minimizer: closed form for quadratics, accelerated full-gradient
/// descent with restarts for logistic families.
pub fn global_optimum(fam: &ObjectiveFamily) -> Result<OptimumInfo, ObjectiveError> {
    match fam {
        ObjectiveFamily::Quadratic(q) => {
            let hb = q.h_bar();
            let chol = Cholesky::new(hb).ok_or(ObjectiveError::NotPositiveDefinite(0))?;
            let theta_star = chol.solve(&q.c_bar());
            let residual = fam.global_gradient(&theta_star)?.norm();
            let f_star = fam.global_loss(&theta_star)?;
            if residual > 1e-10 {
                return Err(ObjectiveError::NoConvergence { residual, iterations: 0 });
            }
            Ok(OptimumInfo { theta_star, f_star, method: OptimumMethod::ClosedForm, residual })
        }
        ObjectiveFamily::Classifier(c) => {
            if c.kind == Kind::HingeSvm {
                return Err(ObjectiveError::NonSmooth);
            }
            let beta = classifier_beta(c);
            let step = 1.0 / beta;
            let cap = 500_000;
            let mut x = DVector::zeros(c.n());
            let mut y = x.clone();
            let mut t = 1.0_f64;
            let mut fx = fam.global_loss(&x)?;
            for it in 0..cap {
                let gy = fam.global_gradient(&y)?;
                let x_next = &y - &gy * step;
                let f_next = fam.global_loss(&x_next)?;
                let g_next = fam.global_gradient(&x_next)?;
                let residual = g_next.norm();
                if residual <= 1e-8 {
                    return Ok(OptimumInfo {
                        theta_star: x_next,
                        f_star: f_next,
                        method: OptimumMethod::HighPrecisionSolve,
                        residual,
                    });
                }
                if f_next > fx {
                    // Restart momentum.
                    t = 1.0;
                    y = x.clone();
                    continue;
                }
                let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
                y = &x_next + (&x_next - &x) * ((t - 1.0) / t_next);
                x = x_next;
                fx = f_next;
                t = t_next;
                if it + 1 == cap {
                    break;
                }
            }
            let residual = fam.global_gradient(&x)?.norm();
            Err(ObjectiveError::NoConvergence { residual, iterations: cap })
        }
    }
}

/// Smoothness bound for a classifier family: the largest per-shard second
/// moment of the augmented features, times the loss curvature bound.
fn classifier_beta(c: &ClassifierFamily) -> f64 {
    let curvature = if c.kind == Kind::RegularizedLogistic { 0.25 } else { 1.0 };
    let mut worst = 0.0_f64;
    for shard in &c.shards {
        let ns = shard.len();
        let gram = DMatrix::from_fn(ns, ns, |a, b| {
            let (xa, xb) = (c.data.row(shard[a]), c.data.row(shard[b]));
            xa.iter().zip(xb).map(|(u, v)| u * v).sum::<f64>() + 1.0
        });
        worst = worst.max(spectral_norm_sym(&gram) / ns as f64);
    }
    curvature * worst + c.lambda
}

/// Per-client `|grad F(t) - grad F_i(t)|` against `|t - t*|` on a random grid
/// around the optimum, fitted by least squares, shifted up to bound every
/// grid point, then inflated by 10%.
pub fn estimate_diversity(
    fam: &ObjectiveFamily,
    opt: &OptimumInfo,
    points: usize,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>, Vec<(f64, Vec<f64>)>), ObjectiveError> {
    let n = fam.n();
    let m = fam.m();
    let radius = opt.theta_star.norm().max(1.0) * 2.0;
    let mut grid = Vec::with_capacity(points);
    for s in 0..points {
        let mut rng = keyed(seed, Domain::Estimate, 0, s as u64);
        let u = gaussian_vec(n, &mut rng);
        let u = &u / u.norm().max(f64::MIN_POSITIVE);
        let r = radius * s as f64 / (points.max(2) - 1) as f64;
        let theta = &opt.theta_star + u * r;
        let g = fam.global_gradient(&theta)?;
        let mut ys = Vec::with_capacity(m);
        for i in 0..m {
            ys.push((&g - fam.full_gradient(i, &theta)?).norm());
        }
        grid.push((r, ys));
    }
    let mut deltas = Vec::with_capacity(m);
    let mut zetas = Vec::with_capacity(m);
    for i in 0..m {
        let xs: Vec<f64> = grid.iter().map(|(x, _)| *x).collect();
        let ys: Vec<f64> = grid.iter().map(|(_, y)| y[i]).collect();
        let k = xs.len() as f64;
        let mx = xs.iter().sum::<f64>() / k;
        let my = ys.iter().sum::<f64>() / k;
        let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let slope = if sxx > 0.0 { (sxy / sxx).max(0.0) } else { 0.0 };
        let mut intercept = (my - slope * mx).max(0.0);
        for (x, y) in xs.iter().zip(&ys) {
            intercept = intercept.max(y - slope * x);
        }
        deltas.push(intercept * 1.1);
        zetas.push(slope * 1.1);
    }
    Ok((deltas, zetas, grid))
}

fn sigma2_for(fam: &ObjectiveFamily, opt: &OptimumInfo, noise: NoiseMode) -> Result<(f64, bool), ObjectiveError> {
    match noise {
        NoiseMode::Exact => Ok((0.0, true)),
        NoiseMode::Synthetic { sigma2 } => Ok((sigma2, true)),
        NoiseMode::Minibatch { batch_size } => match fam {
            ObjectiveFamily::Quadratic(_) => Err(ObjectiveError::NoData),
            ObjectiveFamily::Classifier(c) => {
                // Sampling without replacement, evaluated at the optimum.
                let mut worst = 0.0_f64;
                let theta = opt.theta_star.as_slice();
                for shard in &c.shards {
                    let nsh = shard.len();
                    if batch_size >= nsh {
                        continue;
                    }
                    let mean = c.gradient_over(theta, shard);
                    let spread: f64 = shard
                        .iter()
                        .map(|&s| (c.gradient_over(theta, &[s]) - &mean).norm_squared())
                        .sum::<f64>()
                        / nsh as f64;
                    let b = batch_size as f64;
                    let fpc = (nsh as f64 - b) / (nsh as f64 - 1.0);
                    worst = worst.max(spread * fpc / b);
                }
                Ok((worst, false))
            }
        },
    }
}

/// Constants of the smoothness, convexity, heterogeneity and noise
/// assumptions. Exact for quadratics, estimated otherwise.
pub fn compute_constants(
    fam: &ObjectiveFamily,
    opt: Option<&OptimumInfo>,
    noise: NoiseMode,
) -> Result<TheoryConstants, ObjectiveError> {
    let opt = opt.ok_or(ObjectiveError::MissingOptimum)?;
    let (sigma2, sigma_exact) = sigma2_for(fam, opt, noise)?;
    match fam {
        ObjectiveFamily::Quadratic(q) => {
            let mut mu = f64::INFINITY;
            let mut beta = 0.0_f64;
            for h in &q.h {
                let e = SymmetricEigen::new(h.clone()).eigenvalues;
                mu = mu.min(e.min());
                beta = beta.max(e.max());
            }
            let hb = q.h_bar();
            let mut delta = 0.0_f64;
            let mut zeta = 0.0_f64;
            for i in 0..q.h.len() {
                delta = delta.max(fam.full_gradient(i, &opt.theta_star)?.norm());
                zeta = zeta.max(spectral_norm_sym(&(&hb - &q.h[i])));
            }
            Ok(TheoryConstants { mu, beta, delta, zeta, sigma2, exact: sigma_exact })
        }
        ObjectiveFamily::Classifier(c) => {
            if c.kind == Kind::HingeSvm {
                return Err(ObjectiveError::NonSmooth);
            }
            let beta = classifier_beta(c);
            let (d, z, _) = estimate_diversity(fam, opt, 32, 0xD1)?;
            let delta = d.into_iter().fold(0.0, f64::max);
            let zeta = z.into_iter().fold(0.0, f64::max).min(2.0 * beta);
            Ok(TheoryConstants { mu: c.lambda, beta, delta, zeta, sigma2, exact: false })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PartitionScheme {
    Iid,
    LabelSkew,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataPartition {
    pub assignment: Vec<Vec<usize>>,
    pub labels_per_client: usize,
    pub scheme: PartitionScheme,
}

/// IID: shuffle then split evenly. Label skew: client `i` takes labels
/// `(i*L + l) mod C`; each label's samples are split evenly among its holders.
pub fn partition(
    labels: &[u8],
    m: usize,
    scheme: PartitionScheme,
    labels_per_client: usize,
    seed: u64,
) -> Result<DataPartition, ObjectiveError> {
    if m == 0 {
        return Err(ObjectiveError::InfeasiblePartition("no clients".into()));
    }
    let mut distinct: Vec<u8> = labels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    let assignment = match scheme {
        PartitionScheme::Iid => {
            let mut idx: Vec<usize> = (0..labels.len()).collect();
            idx.shuffle(&mut keyed(seed, Domain::Partition, 0, 0));
            split_even(&idx, m)
        }
        PartitionScheme::LabelSkew => {
            let c = distinct.len();
            let l = labels_per_client;
            if l == 0 || l > c {
                return Err(ObjectiveError::InfeasiblePartition(format!("{l} labels per client with {c} classes")));
            }
            if m * l < c {
                return Err(ObjectiveError::InfeasiblePartition(format!(
                    "{m} clients x {l} labels cannot cover {c} classes"
                )));
            }
            let mut holders: Vec<Vec<usize>> = vec![Vec::new(); c];
            for i in 0..m {
                for s in 0..l {
                    holders[(i * l + s) % c].push(i);
                }
            }
            let mut assignment = vec![Vec::new(); m];
            for (li, &lab) in distinct.iter().enumerate() {
                let mut idx: Vec<usize> = (0..labels.len()).filter(|&s| labels[s] == lab).collect();
                idx.shuffle(&mut keyed(seed, Domain::Partition, 1, lab as u64));
                for (part, &client) in split_even(&idx, holders[li].len()).into_iter().zip(&holders[li]) {
                    assignment[client].extend(part);
                }
            }
            for a in &mut assignment {
                a.sort_unstable();
            }
            assignment
        }
    };
    if let Some(i) = assignment.iter().position(|a| a.is_empty()) {
        return Err(ObjectiveError::InfeasiblePartition(format!("client {i} receives no samples")));
    }
    Ok(DataPartition { assignment, labels_per_client, scheme })
}

fn split_even(idx: &[usize], parts: usize) -> Vec<Vec<usize>> {
    let base = idx.len() / parts;
    let extra = idx.len() % parts;
    let mut out = Vec::with_capacity(parts);
    let mut at = 0;
    for p in 0..parts {
        let len = base + usize::from(p < extra);
        out.push(idx[at..at + len].to_vec());
        at += len;
    }
    out
}

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

fn read_file(path: &Path) -> Result<Vec<u8>, ObjectiveError> {
    fs::read(path).map_err(|source| ObjectiveError::Io { path: path.display().to_string(), source })
}

fn be_u32(buf: &[u8], at: usize, path: &Path) -> Result<u32, ObjectiveError> {
    buf.get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| ObjectiveError::Format { path: path.display().to_string(), reason: "truncated header".into() })
}

/// Read an IDX image/label pair; pixels are scaled to `[0, 1]`.
pub fn load_idx(images: &Path, labels: &Path, limit: Option<usize>) -> Result<Dataset, ObjectiveError> {
    let fmt = |p: &Path, reason: String| ObjectiveError::Format { path: p.display().to_string(), reason };
    let ib = read_file(images)?;
    let lb = read_file(labels)?;
    let magic = be_u32(&ib, 0, images)?;
    if magic != IDX_IMAGES {
        return Err(fmt(images, format!("magic {magic:#010x}, expected {IDX_IMAGES:#010x}")));
    }
    let magic = be_u32(&lb, 0, labels)?;
    if magic != IDX_LABELS {
        return Err(fmt(labels, format!("magic {magic:#010x}, expected {IDX_LABELS:#010x}")));
    }
    let n_img = be_u32(&ib, 4, images)? as usize;
    let rows = be_u32(&ib, 8, images)? as usize;
    let cols = be_u32(&ib, 12, images)? as usize;
    let n_lab = be_u32(&lb, 4, labels)? as usize;
    if n_img != n_lab {
        return Err(fmt(images, format!("{n_img} images but {n_lab} labels")));
    }
    let dim = rows * cols;
    if ib.len() != 16 + n_img * dim {
        return Err(fmt(images, format!("expected {} bytes, found {}", 16 + n_img * dim, ib.len())));
    }
    if lb.len() != 8 + n_lab {
        return Err(fmt(labels, format!("expected {} bytes, found {}", 8 + n_lab, lb.len())));
    }
    let n = limit.map_or(n_img, |l| l.min(n_img));
    let features = ib[16..16 + n * dim].iter().map(|&p| p as f64 / 255.0).collect();
    let labels = lb[8..8 + n].to_vec();
    Ok(Dataset::new(features, labels, dim))
}

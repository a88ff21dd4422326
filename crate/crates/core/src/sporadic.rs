//! Participation probabilities and the per-iteration indicator draws.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::Topology;
use crate::rng::{keyed, pair_id, Domain};

/// Probabilities are kept in `[PROB_FLOOR, 1]`.
pub const PROB_FLOOR: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum SporadicError {
    #[error("beta parameters must be positive, got ({0}, {1})")]
    BadBeta(f64, f64),
    #[error("fixed list has {got} values, expected 1 or {expected}")]
    FixedLength { got: usize, expected: usize },
    #[error("probability {0} outside (0, 1]")]
    BadValue(f64),
    #[error("coupling constant {gamma3} outside [0, 1/alpha0 = {max}]")]
    Gamma3OutOfRange { gamma3: f64, max: f64 },
    #[error("step {alpha_k} exceeds initial step {alpha0}")]
    StepAboveInitial { alpha_k: f64, alpha0: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Dist {
    /// Uniform on (0, 1].
    Uniform,
    Beta { a: f64, b: f64 },
    /// One value broadcast, or one value per entity.
    Fixed { values: Vec<f64> },
}

impl Dist {
    pub fn fixed(v: f64) -> Self {
        Dist::Fixed { values: vec![v] }
    }

    fn validate(&self, count: usize) -> Result<(), SporadicError> {
        match self {
            Dist::Uniform => Ok(()),
            Dist::Beta { a, b } => {
                if *a > 0.0 && *b > 0.0 && a.is_finite() && b.is_finite() {
                    Ok(())
                } else {
                    Err(SporadicError::BadBeta(*a, *b))
                }
            }
            Dist::Fixed { values } => {
                if values.len() != 1 && values.len() != count {
                    return Err(SporadicError::FixedLength { got: values.len(), expected: count });
                }
                match values.iter().find(|&&v| !(v > 0.0 && v <= 1.0)) {
                    Some(&v) => Err(SporadicError::BadValue(v)),
                    None => Ok(()),
                }
            }
        }
    }

    fn sample(&self, idx: usize, rng: &mut impl Rng) -> f64 {
        let v = match self {
            Dist::Uniform => 1.0 - rng.gen::<f64>(),
            Dist::Beta { a, b } => Beta::new(*a, *b).expect("validated").sample(rng),
            Dist::Fixed { values } => values[if values.len() == 1 { 0 } else { idx }],
        };
        v.clamp(PROB_FLOOR, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DSchedule {
    #[default]
    Constant,
    /// `d_k = 1 - gamma3 * alpha_k` for every client.
    Diminishing { gamma3: f64, alpha0: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileSpec {
    pub d: Dist,
    pub b: Dist,
    #[serde(default)]
    pub d_schedule: DSchedule,
}

impl ProfileSpec {
    pub fn full() -> Self {
        ProfileSpec { d: Dist::fixed(1.0), b: Dist::fixed(1.0), d_schedule: DSchedule::Constant }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SporadicityProfile {
    pub d: Vec<f64>,
    /// Dense symmetric; entries on non-edges are 0.
    pub b: DMatrix<f64>,
    pub d_schedule: DSchedule,
    pub spec: ProfileSpec,
    pub seed: u64,
    pub version: u64,
}

impl SporadicityProfile {
    pub fn m(&self) -> usize {
        self.d.len()
    }

    pub fn d_min(&self) -> f64 {
        self.d.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn d_max(&self) -> f64 {
        self.d.iter().copied().fold(0.0, f64::max)
    }

    /// Per-client SGD probabilities at a step of size `alpha_k`.
    pub fn d_at(&self, alpha_k: f64) -> Result<Vec<f64>, SporadicError> {
        match self.d_schedule {
            DSchedule::Constant => Ok(self.d.clone()),
            DSchedule::Diminishing { gamma3, alpha0 } => {
                let v = diminishing_d(alpha_k, alpha0, gamma3)?;
                Ok(vec![v; self.m()])
            }
        }
    }

    /// Same profile with every `d` and `b` replaced by constants.
    pub fn with_overrides(&self, d: Option<f64>, b: Option<f64>) -> Self {
        let mut p = self.clone();
        if let Some(d) = d {
            p.d = vec![d; p.m()];
            p.d_schedule = DSchedule::Constant;
        }
        if let Some(b) = b {
            p.b = p.b.map(|x| if x > 0.0 { b } else { 0.0 });
        }
        p.version = p.version.wrapping_add(1);
        p
    }
}

/// Draw one `d_i` per client and one `b_ij` per edge.
pub fn sample_profile(spec: &ProfileSpec, t: &Topology, seed: u64) -> Result<SporadicityProfile, SporadicError> {
    let m = t.m;
    spec.d.validate(m)?;
    spec.b.validate(t.edges().len())?;
    if let DSchedule::Diminishing { gamma3, alpha0 } = spec.d_schedule {
        check_gamma3(gamma3, alpha0)?;
    }
    let d = (0..m)
        .map(|i| spec.d.sample(i, &mut keyed(seed, Domain::Profile, 0, i as u64)))
        .collect();
    let mut b = DMatrix::zeros(m, m);
    for (e, &(i, j)) in t.edges().iter().enumerate() {
        let v = spec.b.sample(e, &mut keyed(seed, Domain::Profile, 1, pair_id(i, j, m)));
        b[(i, j)] = v;
        b[(j, i)] = v;
    }
    Ok(SporadicityProfile { d, b, d_schedule: spec.d_schedule, spec: spec.clone(), seed, version: 0 })
}

fn check_gamma3(gamma3: f64, alpha0: f64) -> Result<(), SporadicError> {
    let max = 1.0 / alpha0;
    if !(gamma3 >= 0.0 && gamma3 <= max * (1.0 + 1e-12)) {
        return Err(SporadicError::Gamma3OutOfRange { gamma3, max });
    }
    Ok(())
}

/// `1 - gamma3 * alpha_k`, clamped to the probability floor.
pub fn diminishing_d(alpha_k: f64, alpha0: f64, gamma3: f64) -> Result<f64, SporadicError> {
    check_gamma3(gamma3, alpha0)?;
    if alpha_k > alpha0 {
        return Err(SporadicError::StepAboveInitial { alpha_k, alpha0 });
    }
    let d = 1.0 - gamma3 * alpha_k;
    if d < PROB_FLOOR {
        log::warn!("diminishing SGD probability {d} clamped to {PROB_FLOOR}");
        return Ok(PROB_FLOOR);
    }
    Ok(d.min(1.0))
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct IndicatorDraw {
    pub k: u64,
    pub v: Vec<bool>,
    /// One coin per undirected edge, in topology edge order.
    pub v_hat: Vec<bool>,
}

impl IndicatorDraw {
    pub fn all(k: u64, m: usize, n_edges: usize, v: bool, v_hat: bool) -> Self {
        IndicatorDraw { k, v: vec![v; m], v_hat: vec![v_hat; n_edges] }
    }

    pub fn v_hat_matrix(&self, t: &Topology) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(t.m, t.m);
        for (&(i, j), &on) in t.edges().iter().zip(&self.v_hat) {
            if on {
                d[(i, j)] = 1.0;
                d[(j, i)] = 1.0;
            }
        }
        d
    }
}

#[inline]
fn bernoulli(p: f64, rng: &mut impl Rng) -> bool {
    rng.gen::<f64>() < p
}

/// Independent Bernoulli draws keyed on `(seed, k, entity)`.
pub fn draw_indicators(d_k: &[f64], b: &DMatrix<f64>, t: &Topology, k: u64, seed: u64) -> IndicatorDraw {
    let m = t.m;
    let v = d_k
        .iter()
        .enumerate()
        .map(|(i, &p)| p >= 1.0 || bernoulli(p, &mut keyed(seed, Domain::Sgd, k, i as u64)))
        .collect();
    let v_hat = t
        .edges()
        .iter()
        .map(|&(i, j)| {
            let p = b[(i, j)];
            p >= 1.0 || bernoulli(p, &mut keyed(seed, Domain::Link, k, pair_id(i, j, m)))
        })
        .collect();
    IndicatorDraw { k, v, v_hat }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::regenerate_connected_rgg;

    fn topo() -> Topology {
        regenerate_connected_rgg(10, 0.4, 11, 1000).unwrap().0
    }

    #[test]
    fn full_profile_draws_all_ones() {
        let t = topo();
        let p = sample_profile(&ProfileSpec::full(), &t, 1).unwrap();
        for k in 0..50 {
            let dr = draw_indicators(&p.d, &p.b, &t, k, 3);
            assert!(dr.v.iter().all(|&x| x));
            assert!(dr.v_hat.iter().all(|&x| x));
        }
    }

    #[test]
    fn beta_profile_in_range_and_reproducible() {
        let t = topo();
        let spec = ProfileSpec { d: Dist::Beta { a: 0.5, b: 0.5 }, b: Dist::Beta { a: 0.5, b: 0.5 }, d_schedule: DSchedule::Constant };
        let p = sample_profile(&spec, &t, 77).unwrap();
        assert!(p.d.iter().all(|&x| x > 0.0 && x <= 1.0));
        assert!(p.b.iter().all(|&x| (0.0..=1.0).contains(&x)));
        assert_eq!(p, sample_profile(&spec, &t, 77).unwrap());
    }

    #[test]
    fn invalid_beta_rejected() {
        let t = topo();
        let spec = ProfileSpec { d: Dist::Beta { a: 0.0, b: 1.0 }, b: Dist::Uniform, d_schedule: DSchedule::Constant };
        assert_eq!(sample_profile(&spec, &t, 1).unwrap_err(), SporadicError::BadBeta(0.0, 1.0));
    }

    #[test]
    fn uniform_mean_within_three_sigma() {
        let n = 100_000;
        let mut rng = keyed(5, Domain::MonteCarlo, 0, 0);
        let mean: f64 = (0..n).map(|i| Dist::Uniform.sample(i, &mut rng)).sum::<f64>() / n as f64;
        let sigma = (1.0f64 / 12.0).sqrt() / (n as f64).sqrt();
        assert!((mean - 0.5).abs() <= 3.0 * sigma, "mean {mean}");
    }

    #[test]
    fn activation_rate_within_three_sigma() {
        let t = topo();
        let d = vec![0.3; 10];
        let b = crate::mixing::uniform_link_probs(&t, 0.3);
        let n = 100_000u64;
        let mut counts = [0u64; 10];
        for k in 0..n {
            let dr = draw_indicators(&d, &b, &t, k, 21);
            for (c, &v) in counts.iter_mut().zip(&dr.v) {
                *c += v as u64;
            }
        }
        let sigma = (0.3f64 * 0.7 / n as f64).sqrt();
        for c in counts {
            assert!((c as f64 / n as f64 - 0.3).abs() <= 3.0 * sigma);
        }
    }

    #[test]
    fn diminishing_examples() {
        assert_eq!(diminishing_d(0.1, 0.1, 0.0).unwrap(), 1.0);
        assert_eq!(diminishing_d(0.1, 0.1, 10.0).unwrap(), PROB_FLOOR);
        let (a0, gamma) = (0.05, 20.0);
        for k in [0u64, 1, 10, 1000] {
            let ak = a0 / (1.0 + k as f64 / gamma).sqrt();
            let expect = 1.0 - 1.0 / (1.0 + k as f64 / gamma).sqrt();
            let got = diminishing_d(ak, a0, 1.0 / a0).unwrap();
            assert!((got - expect.max(PROB_FLOOR)).abs() < 1e-12);
        }
        assert!(matches!(diminishing_d(0.1, 0.1, 11.0), Err(SporadicError::Gamma3OutOfRange { .. })));
    }

    #[test]
    fn draws_reproducible_and_key_dependent() {
        let t = topo();
        let d = vec![0.5; 10];
        let b = crate::mixing::uniform_link_probs(&t, 0.5);
        assert_eq!(draw_indicators(&d, &b, &t, 4, 9), draw_indicators(&d, &b, &t, 4, 9));
        let differ = (0..20).any(|k| draw_indicators(&d, &b, &t, k, 9) != draw_indicators(&d, &b, &t, k, 10));
        assert!(differ);
    }

    #[test]
    fn indicator_covariance_near_zero() {
        let t = topo();
        let d = vec![0.4; 10];
        let b = crate::mixing::uniform_link_probs(&t, 0.6);
        let n = 100_000u64;
        let (mut sx, mut sy, mut sxy) = (0.0, 0.0, 0.0);
        for k in 0..n {
            let dr = draw_indicators(&d, &b, &t, k, 2);
            let x = dr.v[0] as u8 as f64;
            let y = dr.v_hat[0] as u8 as f64;
            sx += x;
            sy += y;
            sxy += x * y;
        }
        let nf = n as f64;
        let cov = sxy / nf - (sx / nf) * (sy / nf);
        let sigma = (0.4f64 * 0.6 * 0.6 * 0.4).sqrt() / nf.sqrt();
        assert!(cov.abs() <= 3.0 * sigma, "cov {cov}");
    }
}

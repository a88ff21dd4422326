//! Monte-Carlo validators for the mixing moments, the consensus contraction
//! factor, indicator rates, and the delay model. Draws are split into fixed
//! chunks and reduced in chunk order, so results do not depend on the thread
//! count.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::graph::Topology;
use crate::metrics::{self, delay_step};
use crate::mixing::{analyze, realize_mixing, BaseWeights, MixingError};
use crate::par::{self, Exec};
use crate::rng::{keyed, Domain};
use crate::sporadic::{draw_indicators, sample_profile, Dist, ProfileSpec, SporadicityProfile};

const CHUNK: usize = 2048;

/// Sample mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanSe {
    pub mean: f64,
    pub se: f64,
    pub n: usize,
}

impl MeanSe {
    fn from_sums(sum: f64, sumsq: f64, n: usize) -> Self {
        let nf = n as f64;
        let mean = sum / nf;
        let var = if n > 1 { ((sumsq - sum * mean) / (nf - 1.0)).max(0.0) } else { 0.0 };
        MeanSe { mean, se: (var / nf).sqrt(), n }
    }

    pub fn from_samples(xs: &[f64]) -> Self {
        let sum: f64 = xs.iter().sum();
        let sumsq: f64 = xs.iter().map(|x| x * x).sum();
        MeanSe::from_sums(sum, sumsq, xs.len())
    }

    /// `|mean - target|` in standard errors; exact agreement needed when the
    /// sample has no spread.
    pub fn z(&self, target: f64) -> f64 {
        let diff = (self.mean - target).abs();
        if self.se > 0.0 {
            diff / self.se
        } else if diff <= 1e-12 {
            0.0
        } else {
            f64::INFINITY
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MomentCheck {
    pub draws: usize,
    /// Largest entrywise z-score of the mean of P against R_bar.
    pub max_z_first: f64,
    /// Largest entrywise z-score of the mean of P^2 against R_tilde.
    pub max_z_second: f64,
    /// Entries (upper triangle, both moments) beyond 3 standard errors.
    pub violations: usize,
    pub compared: usize,
    pub r_zero_max_line_sum: f64,
    pub pass: bool,
}

struct MomentSums {
    p: DMatrix<f64>,
    p_sq: DMatrix<f64>,
    p2: DMatrix<f64>,
    p2_sq: DMatrix<f64>,
}

fn link_draw_matrix(t: &Topology, b: &DMatrix<f64>, k: u64, seed: u64) -> DMatrix<f64> {
    let ones = vec![1.0; t.m];
    draw_indicators(&ones, b, t, k, seed).v_hat_matrix(t)
}

/// Compare Monte-Carlo first and second moments of P with their closed forms.
pub fn mixing_moments(
    t: &Topology,
    r: &BaseWeights,
    b: &DMatrix<f64>,
    draws: usize,
    seed: u64,
    exec: Exec,
) -> Result<MomentCheck, MixingError> {
    let a = analyze(r, b)?;
    let m = t.m;
    let parts = par::map_chunks(exec, draws, CHUNK, |range| {
        let mut s = MomentSums {
            p: DMatrix::zeros(m, m),
            p_sq: DMatrix::zeros(m, m),
            p2: DMatrix::zeros(m, m),
            p2_sq: DMatrix::zeros(m, m),
        };
        for k in range {
            let p = realize_mixing(r, &link_draw_matrix(t, b, k as u64, seed))?.p;
            let p2 = &p * &p;
            s.p_sq += p.component_mul(&p);
            s.p2_sq += p2.component_mul(&p2);
            s.p += p;
            s.p2 += p2;
        }
        Ok::<_, MixingError>(s)
    });
    let mut tot = MomentSums {
        p: DMatrix::zeros(m, m),
        p_sq: DMatrix::zeros(m, m),
        p2: DMatrix::zeros(m, m),
        p2_sq: DMatrix::zeros(m, m),
    };
    for part in parts {
        let part = part?;
        tot.p += part.p;
        tot.p_sq += part.p_sq;
        tot.p2 += part.p2;
        tot.p2_sq += part.p2_sq;
    }
    let (mut zf, mut zs, mut violations, mut compared) = (0.0_f64, 0.0_f64, 0, 0);
    for i in 0..m {
        for j in i..m {
            let first = MeanSe::from_sums(tot.p[(i, j)], tot.p_sq[(i, j)], draws).z(a.r_bar[(i, j)]);
            let second = MeanSe::from_sums(tot.p2[(i, j)], tot.p2_sq[(i, j)], draws).z(a.r_tilde[(i, j)]);
            zf = zf.max(first);
            zs = zs.max(second);
            violations += usize::from(first > 3.0) + usize::from(second > 3.0);
            compared += 2;
        }
    }
    let mut line = 0.0_f64;
    for i in 0..m {
        line = line.max(a.r_zero.row(i).sum().abs()).max(a.r_zero.column(i).sum().abs());
    }
    Ok(MomentCheck {
        draws,
        max_z_first: zf,
        max_z_second: zs,
        violations,
        compared,
        r_zero_max_line_sum: line,
        pass: violations == 0 && line <= 1e-12,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ContractionCheck {
    pub estimate: MeanSe,
    pub initial: f64,
    pub rho_tilde: f64,
    pub bound: f64,
    pub pass: bool,
}

/// `E|P Theta - 1 theta_bar'|^2` against `rho~ |Theta - 1 theta_bar'|^2`.
pub fn contraction(
    t: &Topology,
    r: &BaseWeights,
    b: &DMatrix<f64>,
    theta: &[DVector<f64>],
    draws: usize,
    seed: u64,
    exec: Exec,
) -> Result<ContractionCheck, MixingError> {
    let rho = analyze(r, b)?.rho_tilde;
    let m = t.m;
    let n = theta[0].len();
    let dense = DMatrix::from_fn(m, n, |i, c| theta[i][c]);
    let bar = metrics::row_mean(theta);
    let parts = par::map_chunks(exec, draws, CHUNK, |range| {
        let (mut s, mut sq) = (0.0, 0.0);
        for k in range {
            let p = realize_mixing(r, &link_draw_matrix(t, b, k as u64, seed))?.p;
            let mixed = &p * &dense;
            let mut x = 0.0;
            for i in 0..m {
                for c in 0..n {
                    x += (mixed[(i, c)] - bar[c]).powi(2);
                }
            }
            s += x;
            sq += x * x;
        }
        Ok::<_, MixingError>((s, sq))
    });
    let (mut s, mut sq) = (0.0, 0.0);
    for part in parts {
        let (a, b) = part?;
        s += a;
        sq += b;
    }
    let estimate = MeanSe::from_sums(s, sq, draws);
    let initial = metrics::consensus_error(theta);
    let bound = rho * initial;
    Ok(ContractionCheck { estimate, initial, rho_tilde: rho, bound, pass: estimate.mean <= bound + 3.0 * estimate.se })
}

#[derive(Debug, Clone, Serialize)]
pub struct DelayCheck {
    pub estimate: MeanSe,
    pub target: f64,
    pub z: f64,
    pub pass: bool,
}

/// Mean processing delay against `m / sum_i(1/d_i)`.
pub fn processing_delay(
    t: &Topology,
    profile: &SporadicityProfile,
    draws: usize,
    seed: u64,
    exec: Exec,
) -> DelayCheck {
    let parts = par::map_chunks(exec, draws, CHUNK, |range| {
        let (mut s, mut sq) = (0.0, 0.0);
        for k in range {
            let d = draw_indicators(&profile.d, &profile.b, t, k as u64, seed);
            let x = delay_step(&d, &profile.d, &profile.b, t).tau_proc;
            s += x;
            sq += x * x;
        }
        (s, sq)
    });
    let (s, sq) = parts.into_iter().fold((0.0, 0.0), |acc, p| (acc.0 + p.0, acc.1 + p.1));
    let estimate = MeanSe::from_sums(s, sq, draws);
    let target = t.m as f64 / profile.d.iter().map(|x| 1.0 / x).sum::<f64>();
    let z = estimate.z(target);
    DelayCheck { estimate, target, z, pass: z <= 3.0 }
}

#[derive(Debug, Clone, Serialize)]
pub struct RateCheck {
    pub max_z: f64,
    pub pass: bool,
}

/// Per-client SGD and per-link activation rates against `d` and `b`.
pub fn indicator_rates(t: &Topology, profile: &SporadicityProfile, draws: usize, seed: u64, exec: Exec) -> RateCheck {
    let m = t.m;
    let e = t.edges().len();
    let parts = par::map_chunks(exec, draws, CHUNK, |range| {
        let mut counts = vec![0usize; m + e];
        for k in range {
            let d = draw_indicators(&profile.d, &profile.b, t, k as u64, seed);
            for (c, &on) in counts.iter_mut().zip(d.v.iter().chain(&d.v_hat)) {
                *c += usize::from(on);
            }
        }
        counts
    });
    let mut counts = vec![0usize; m + e];
    for p in parts {
        for (c, x) in counts.iter_mut().zip(p) {
            *c += x;
        }
    }
    let probs: Vec<f64> = profile.d.iter().copied().chain(t.edges().iter().map(|&(i, j)| profile.b[(i, j)])).collect();
    let mut max_z = 0.0_f64;
    for (&c, &p) in counts.iter().zip(&probs) {
        let s = MeanSe::from_sums(c as f64, c as f64, draws);
        max_z = max_z.max(s.z(p));
    }
    RateCheck { max_z, pass: max_z <= 3.0 }
}

/// A random connected graph with random link probabilities and a random
/// model matrix, for validator sweeps.
#[derive(Debug, Clone)]
pub struct Instance {
    pub topology: Topology,
    pub weights: BaseWeights,
    pub profile: SporadicityProfile,
    pub theta: Vec<DVector<f64>>,
}

pub fn random_instance(index: u64, m_max: usize, n: usize, seed: u64) -> Result<Instance, crate::Error> {
    use rand::Rng;
    use rand_distr::StandardNormal;
    let mut rng = keyed(seed, Domain::MonteCarlo, 1, index);
    let m = rng.gen_range(3..=m_max.max(3));
    let radius = rng.gen_range(0.5..1.0);
    let topo_seed = rng.gen::<u64>();
    let (topology, _) = crate::graph::regenerate_connected_rgg(m, radius, topo_seed, crate::graph::DEFAULT_ATTEMPT_CAP)?;
    let spec = ProfileSpec { d: Dist::Uniform, b: Dist::Uniform, d_schedule: Default::default() };
    let profile = sample_profile(&spec, &topology, rng.gen())?;
    let theta = (0..m).map(|_| DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal))).collect();
    let weights = crate::mixing::metropolis_weights(&topology);
    Ok(Instance { topology, weights, profile, theta })
}

#[derive(Debug, Clone, Serialize)]
pub struct MonotonicityProbe {
    pub instances: usize,
    pub scales: Vec<f64>,
    /// `(instance, scale)` pairs where shrinking `b` lowered `rho_tilde`.
    pub violations: Vec<(u64, f64)>,
    /// Largest drop of `rho_tilde` observed when shrinking `b`.
    pub worst_drop: f64,
}

/// Scales every `b_ij` by each of `scales` (descending) and checks that
/// `rho_tilde` never decreases along the way. Reported, not enforced.
pub fn rho_tilde_monotonicity(instances: usize, m_max: usize, scales: &[f64], seed: u64, exec: Exec) -> Result<MonotonicityProbe, crate::Error> {
    let per = par::map(exec, instances, |g| -> Result<Vec<(u64, f64, f64)>, crate::Error> {
        let inst = random_instance(g as u64, m_max, 1, seed)?;
        let mut prev = f64::NEG_INFINITY;
        let mut drops = Vec::new();
        for &c in scales {
            let rho = analyze(&inst.weights, &(&inst.profile.b * c))?.rho_tilde;
            if rho < prev - 1e-12 {
                drops.push((g as u64, c, prev - rho));
            }
            prev = rho;
        }
        Ok(drops)
    });
    let mut violations = Vec::new();
    let mut worst_drop = 0.0_f64;
    for r in per {
        for (g, c, drop) in r? {
            violations.push((g, c));
            worst_drop = worst_drop.max(drop);
        }
    }
    Ok(MonotonicityProbe { instances, scales: scales.to_vec(), violations, worst_drop })
}

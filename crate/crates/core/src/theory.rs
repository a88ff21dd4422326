//! Error-recursion coefficients, step-size feasibility, closed-form
//! contraction rates, and bound envelopes for three regimes: constant step
//! (strongly convex), diminishing step (strongly convex), and constant step
//! under the PL condition.
//!
//! Notation: `q = (1 + rho~)/(1 - rho~)`, `Z = zeta^2 + 2 beta^2 (1 - d_min)`.

use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

use crate::objectives::TheoryConstants;

#[derive(Debug, Error, PartialEq)]
pub enum TheoryError {
    #[error("contraction factor {0} must lie in [0, 1)")]
    BadRhoTilde(f64),
    #[error("rho(Phi) = {0} is not below 1; the envelope diverges")]
    NotContracting(f64),
    #[error("d_min = {d_min} is at or below the PL participation floor 1 - mu^2/(2 beta^2) = {floor}")]
    PlFloor { d_min: f64, floor: f64 },
    #[error("Gamma3 = {gamma3} outside [0, 1/alpha0 = {max}]")]
    Gamma3 { gamma3: f64, max: f64 },
    #[error("sublinear envelope needs k >= 2, got {0}")]
    KTooSmall(u64),
    #[error("invalid input: {0}")]
    Input(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Convex,
    Pl,
    Diminishing,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PhiPsi {
    pub phi: [[f64; 2]; 2],
    pub psi: [f64; 2],
    pub regime: Regime,
}

/// Dominant eigenvalue of a nonnegative 2x2 matrix.
pub fn dominant_eigenvalue(p: &[[f64; 2]; 2]) -> f64 {
    let half_tr = 0.5 * (p[0][0] + p[1][1]);
    let half_gap = 0.5 * (p[0][0] - p[1][1]);
    half_tr + (half_gap * half_gap + p[0][1] * p[1][0]).sqrt()
}

fn q_factor(rt: f64) -> f64 {
    (1.0 + rt) / (1.0 - rt)
}

fn check_common(alpha: f64, d_min: f64, d_max: f64, rt: f64) -> Result<(), TheoryError> {
    if !(0.0..1.0).contains(&rt) {
        return Err(TheoryError::BadRhoTilde(rt));
    }
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(TheoryError::Input(format!("step size {alpha}")));
    }
    if !(d_min > 0.0 && d_min <= d_max && d_max <= 1.0) {
        return Err(TheoryError::Input(format!("need 0 < d_min <= d_max <= 1, got {d_min}, {d_max}")));
    }
    Ok(())
}

/// Coefficients of the two-component recursion, strongly convex case.
pub fn phi_psi_convex(
    c: &TheoryConstants,
    alpha: f64,
    d_min: f64,
    d_max: f64,
    rt: f64,
    m: usize,
) -> Result<PhiPsi, TheoryError> {
    check_common(alpha, d_min, d_max, rt)?;
    let (mu, beta, zeta, delta, s2) = (c.mu, c.beta, c.zeta, c.delta, c.sigma2);
    let mf = m as f64;
    let q = q_factor(rt);
    let ma = mu * alpha;
    let b2 = beta * beta;
    let phi11 = 1.0 - ma * (1.0 + ma - ma * ma) + (2.0 * alpha / mu) * (1.0 + ma) * (1.0 - d_min) * b2;
    let phi12 = (1.0 + ma) * alpha * d_max * b2 / (mf * mu);
    let phi21 = 3.0 * q * mf * d_max * alpha * alpha * (zeta * zeta + 2.0 * b2 * (1.0 - d_min));
    let phi22 = (1.0 + rt) / 2.0 + 3.0 * q * d_max * alpha * alpha * (zeta * zeta + 2.0 * b2);
    let psi1 = (2.0 * alpha / mu) * (1.0 + ma) * (1.0 - d_min) * delta * delta + alpha * alpha * d_max * s2 / mf;
    let psi2 = mf * alpha * alpha * d_max * (3.0 * q * delta * delta + s2);
    Ok(PhiPsi { phi: [[phi11, phi12], [phi21, phi22]], psi: [psi1, psi2], regime: Regime::Convex })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Gamma2 {
    /// `+inf` at `d_min = 1`.
    #[serde(serialize_with = "ser_f64")]
    pub value: f64,
    /// `(Gamma2* - 1)(1 - d_min)`, finite everywhere.
    pub product: f64,
}

/// Optimal second auxiliary constant of the constant-step convex bound.
pub fn gamma2_star(c: &TheoryConstants, d_min: f64, d_max: f64, rt: f64, gamma1: f64) -> Gamma2 {
    let z = c.zeta * c.zeta + 2.0 * c.beta * c.beta * (1.0 - d_min);
    if d_min >= 1.0 {
        return Gamma2 { value: f64::INFINITY, product: 0.0 };
    }
    let c1 = (1.0 - d_min).sqrt() * (1.0 - rt) / (6f64.sqrt() * d_max * (1.0 + rt).sqrt() * z.sqrt());
    let c2 = 4.0 * (1.0 + gamma1) * (1.0 - d_min) * c.beta * c.beta / (c.mu * (1.0 + rt));
    let value = (c1 * c2).powf(-2.0 / 3.0) + 1.0;
    // Same quantity with the (1 - d_min) powers cancelled.
    let product = 3f64.cbrt() / 2.0
        * (1.0 + rt)
        * z.cbrt()
        * (d_max * c.mu / ((1.0 - rt) * (1.0 + gamma1) * c.beta * c.beta)).powf(2.0 / 3.0);
    Gamma2 { value, product }
}

fn ser_f64<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else if *v > 0.0 {
        s.serialize_str("+inf")
    } else {
        s.serialize_str("nan")
    }
}

fn ser_terms<S: Serializer>(v: &[(String, f64)], s: S) -> Result<S::Ok, S::Error> {
    use serde::ser::SerializeMap;
    let mut map = s.serialize_map(Some(v.len()))?;
    for (k, x) in v {
        if x.is_finite() {
            map.serialize_entry(k, x)?;
        } else {
            map.serialize_entry(k, "+inf")?;
        }
    }
    map.end()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeasibilityReport {
    pub regime: Regime,
    pub alpha_max: f64,
    #[serde(serialize_with = "ser_terms")]
    pub terms: Vec<(String, f64)>,
    pub gamma1: f64,
    #[serde(serialize_with = "ser_f64")]
    pub gamma2_star: f64,
    pub gamma3: Option<f64>,
    pub feasible: Option<bool>,
}

impl FeasibilityReport {
    fn from_terms(regime: Regime, terms: Vec<(String, f64)>, gamma1: f64, gamma2_star: f64, gamma3: Option<f64>) -> Self {
        let alpha_max = terms.iter().map(|t| t.1).fold(f64::INFINITY, f64::min);
        FeasibilityReport { regime, alpha_max, terms, gamma1, gamma2_star, gamma3, feasible: None }
    }

    pub fn query(mut self, alpha: f64) -> Self {
        self.feasible = Some(alpha < self.alpha_max);
        self
    }
}

fn safe_div(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        f64::INFINITY
    } else {
        num / den
    }
}

/// Largest constant step with a contracting recursion (first auxiliary
/// constant fixed to 1).
pub fn max_step_convex(c: &TheoryConstants, d_min: f64, d_max: f64, rt: f64) -> FeasibilityReport {
    let (mu, beta, zeta) = (c.mu, c.beta, c.zeta);
    let z = zeta * zeta + 2.0 * beta * beta * (1.0 - d_min);
    let t1 = 1.0 / mu;
    let t2 = 1.0 / (2.0 * (3.0 * d_max).sqrt()) * (1.0 - rt) / (1.0 + rt).sqrt() / (zeta * zeta + 2.0 * beta * beta).sqrt();
    let t3 = safe_div(mu, 12.0 * z).cbrt() * ((1.0 - rt) / (2.0 * d_max * beta)).powf(2.0 / 3.0);
    let g2 = gamma2_star(c, d_min, d_max, rt, 1.0);
    FeasibilityReport::from_terms(
        Regime::Convex,
        vec![("inverse_mu".into(), t1), ("graph".into(), t2), ("cube_root".into(), t3)],
        1.0,
        g2.value,
        None,
    )
}

/// Contraction rate of the recursion, by three routes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RhoPhi {
    /// Closed form in `A`, `B`, `C`.
    pub closed_form: f64,
    /// Dominant eigenvalue of the tightened matrix the closed form solves.
    pub tightened_eig: f64,
    /// Dominant eigenvalue of the untightened coefficient matrix.
    pub untightened_eig: f64,
    /// Whether the diagonal bound behind the closed form holds at this step.
    pub tightened_valid: bool,
    /// The rate used for envelopes.
    pub value: f64,
}

/// `A`, `B`, `C` and the tightened matrix for the constant-step convex case.
pub fn convex_abc(
    c: &TheoryConstants,
    alpha: f64,
    d_min: f64,
    d_max: f64,
    rt: f64,
    m: usize,
    gamma1: f64,
    gamma2_product: f64,
) -> ([f64; 3], [[f64; 2]; 2]) {
    let (mu, beta, zeta) = (c.mu, c.beta, c.zeta);
    let b2 = beta * beta;
    let q = q_factor(rt);
    let z = zeta * zeta + 2.0 * b2 * (1.0 - d_min);
    let a = (1.0 / mu) * (1.0 + gamma1) * gamma2_product * b2;
    let b = 1.5 * q * d_max * (zeta * zeta + 2.0 * b2);
    let cc = 12.0 * (1.0 + gamma1) * (b2 / mu) * q * d_max * d_max * z;
    let mf = m as f64;
    let phi = [
        [1.0 - 2.0 * a * alpha, (1.0 + gamma1) * d_max * b2 * alpha / (mf * mu)],
        [3.0 * q * mf * d_max * alpha * alpha * z, (1.0 + rt) / 2.0 + 2.0 * b * alpha * alpha],
    ];
    ([a, b, cc], phi)
}

fn closed_form(rt: f64, alpha: f64, a: f64, b: f64, c: f64) -> f64 {
    let inner = (1.0 - rt) / 2.0 - 2.0 * (a * alpha + b * alpha * alpha);
    (3.0 + rt) / 4.0 - a * alpha + b * alpha * alpha + 0.5 * (inner * inner + c * alpha.powi(3)).sqrt()
}

/// `phi11 <= 1 - 2 A alpha` needs
/// `(1 + mu a - (mu a)^2) / (1 + mu a) >= 2 beta^2 (1 - d_min) Gamma2 / mu^2`,
/// which the step-size conditions alone do not imply.
pub fn convex_tightening_holds(c: &TheoryConstants, alpha: f64, d_min: f64, gamma2_product: f64) -> bool {
    let ma = c.mu * alpha;
    let lhs = (1.0 + ma - ma * ma) / (1.0 + ma);
    let k2 = 2.0 * c.beta * c.beta / (c.mu * c.mu);
    lhs >= k2 * ((1.0 - d_min) + gamma2_product)
}

/// Contraction rate with `Gamma1 = 1` and `Gamma2 = Gamma2*`. At `d_min = 1`
/// the tightened form degenerates to 1, so `value` falls back to the
/// untightened eigenvalue there, and wherever the diagonal bound fails.
pub fn spectral_radius_convex(
    c: &TheoryConstants,
    alpha: f64,
    d_min: f64,
    d_max: f64,
    rt: f64,
    m: usize,
) -> Result<RhoPhi, TheoryError> {
    let base = phi_psi_convex(c, alpha, d_min, d_max, rt, m)?;
    let g2 = gamma2_star(c, d_min, d_max, rt, 1.0);
    let ([a, b, cc], phi) = convex_abc(c, alpha, d_min, d_max, rt, m, 1.0, g2.product);
    let cf = closed_form(rt, alpha, a, b, cc);
    let untightened_eig = dominant_eigenvalue(&base.phi);
    let valid = d_min < 1.0 && convex_tightening_holds(c, alpha, d_min, g2.product);
    let value = if valid { cf } else { untightened_eig };
    if value >= 1.0 && alpha > 0.0 {
        log::warn!("step {alpha} is outside the contracting range: rho(Phi) = {value}");
    }
    Ok(RhoPhi { closed_form: cf, tightened_eig: dominant_eigenvalue(&phi), untightened_eig, tightened_valid: valid, value })
}

/// `rho^(k+1) nu0 + Psi / (1 - rho)`.
pub fn geometric_envelope(nu0: [f64; 2], rho: f64, psi: [f64; 2], k: u64) -> Result<[f64; 2], TheoryError> {
    if !(rho < 1.0) {
        return Err(TheoryError::NotContracting(rho));
    }
    let decay = rho.powf(k as f64 + 1.0);
    Ok([decay * nu0[0] + psi[0] / (1.0 - rho), decay * nu0[1] + psi[1] / (1.0 - rho)])
}

/// Limiting optimality gap for a constant step, strongly convex case.
pub fn asymptotic_gap_convex(
    c: &TheoryConstants,
    alpha: f64,
    d_min: f64,
    d_max: f64,
    rt: f64,
    m: usize,
    rho: f64,
) -> Result<[f64; 2], TheoryError> {
    if !(rho < 1.0) {
        return Err(TheoryError::NotContracting(rho));
    }
    let q = q_factor(rt);
    let mf = m as f64;
    let d2 = c.delta * c.delta;
    let s = alpha / (1.0 - rho);
    Ok([
        s * ((2.0 / c.mu) * (1.0 + c.mu * alpha) * (1.0 - d_min) * d2 + alpha * d_max * c.sigma2 / mf),
        s * (mf * alpha * d_max * (3.0 * q * d2 + c.sigma2)),
    ])
}

pub fn pl_floor(c: &TheoryConstants) -> f64 {
    1.0 - c.mu * c.mu / (2.0 * c.beta * c.beta)
}

fn check_pl_floor(c: &TheoryConstants, d_min: f64) -> Result<(), TheoryError> {
    let floor = pl_floor(c);
    if d_min <= floor {
        return Err(TheoryError::PlFloor { d_min, floor });
    }
    Ok(())
}

/// Coefficients under the PL condition. The first component tracks
/// `F(theta_bar) - F*`.
pub fn phi_psi_pl(
    c: &TheoryConstants,
    alpha: f64,
    d_min: f64,
    d_max: f64,
    rt: f64,
    m: usize,
) -> Result<PhiPsi, TheoryError> {
    check_common(alpha, d_min, d_max, rt)?;
    check_pl_floor(c, d_min)?;
    let (mu, beta, zeta, delta, s2) = (c.mu, c.beta, c.zeta, c.delta, c.sigma2);
    let mf = m as f64;
    let q = q_factor(rt);
    let b2 = beta * beta;
    let x = 2.0 * b2 / (mu * mu) * (1.0 - d_min);
    let phi11 = 1.0 + (2.0 * b2 * beta / mu) * (3.0 - 2.0 * d_min) * alpha * alpha - mu * alpha * (1.0 - x);
    let phi12 = (b2 * d_max / (2.0 * mf)) * alpha * (1.0 + 2.0 * beta * alpha);
    let phi21 = (6.0 / mu) * q * mf * d_max * alpha * alpha * (zeta * zeta + 2.0 * b2 * (1.0 - d_min));
    let phi22 = (1.0 + rt) / 2.0 + 3.0 * q * d_max * alpha * alpha * (zeta * zeta + 2.0 * b2);
    let psi1 = (beta / 2.0) * alpha * alpha * (4.0 * (1.0 - d_min) * delta * delta + d_max * s2 / mf);
    let psi2 = mf * alpha * alpha * d_max * (3.0 * q * delta * delta + s2);
    Ok(PhiPsi { phi: [[phi11, phi12], [phi21, phi22]], psi: [psi1, psi2], regime: Regime::Pl })
}

/// Largest constant step under the PL condition.
pub fn max_step_pl(c: &TheoryConstants, d_min: f64, d_max: f64, rt: f64) -> Result<FeasibilityReport, TheoryError> {
    check_pl_floor(c, d_min)?;
    let (mu, beta, zeta) = (c.mu, c.beta, c.zeta);
    if zeta > 2.0 * beta {
        // Smooth local losses always admit zeta <= 2 beta; beyond it the graph term can overshoot.
        log::warn!("zeta = {zeta} exceeds 2 beta = {}; the step bound may not contract", 2.0 * beta);
    }
    let b2 = beta * beta;
    let x = 2.0 * b2 / (mu * mu) * (1.0 - d_min);
    let t1 = (1.0 - x) / (10.0 * (3.0 - 2.0 * d_min)) * mu * mu / (b2 * beta);
    let t2 = 5.0 * (1.0 + rt) / (8.0 * mu * (1.0 - x));
    // 1 / (1 + 2 beta^2 (1 - d_min) / zeta^2), with its limits.
    let hetero = if d_min >= 1.0 {
        1.0
    } else if zeta == 0.0 {
        0.0
    } else {
        1.0 / (1.0 + 2.0 * b2 * (1.0 - d_min) / (zeta * zeta))
    };
    let t3 = 1.0 / (6.0 * (2.0 * d_max).sqrt()) * (mu / b2) * (1.0 - rt) / (1.0 + rt).sqrt() * ((1.0 - x) * hetero).sqrt();
    Ok(FeasibilityReport::from_terms(
        Regime::Pl,
        vec![("curvature".into(), t1), ("participation".into(), t2), ("graph".into(), t3)],
        0.2,
        f64::NAN,
        None,
    ))
}

/// `A`, `B`, `C` and the tightened matrix for the PL case (`Gamma1 = 1/5`).
pub fn pl_abc(c: &TheoryConstants, alpha: f64, d_min: f64, d_max: f64, rt: f64, m: usize) -> ([f64; 3], [[f64; 2]; 2]) {
    let (mu, beta, zeta) = (c.mu, c.beta, c.zeta);
    let b2 = beta * beta;
    let q = q_factor(rt);
    let x = 2.0 * b2 / (mu * mu) * (1.0 - d_min);
    let z = zeta * zeta + 2.0 * b2 * (1.0 - d_min);
    let gamma1 = 0.2;
    let a = (2.0 * mu / 5.0) * (1.0 - x);
    let b = 1.5 * q * (zeta * zeta + 2.0 * b2);
    let cc = (72.0 * b2 / (5.0 * mu)) * q * d_max * d_max * z;
    let mf = m as f64;
    let phi = [
        [1.0 - 2.0 * a * alpha, (b2 * d_max / (2.0 * mf)) * (1.0 + gamma1) * alpha],
        [(6.0 / mu) * q * mf * d_max * alpha * alpha * z, (1.0 + rt) / 2.0 + 2.0 * b * alpha * alpha],
    ];
    ([a, b, cc], phi)
}

pub fn spectral_radius_pl(
    c: &TheoryConstants,
    alpha: f64,
    d_min: f64,
    d_max: f64,
    rt: f64,
    m: usize,
) -> Result<RhoPhi, TheoryError> {
    let base = phi_psi_pl(c, alpha, d_min, d_max, rt, m)?;
    let ([a, b, cc], phi) = pl_abc(c, alpha, d_min, d_max, rt, m);
    let cf = closed_form(rt, alpha, a, b, cc);
    Ok(RhoPhi {
        closed_form: cf,
        tightened_eig: dominant_eigenvalue(&phi),
        untightened_eig: dominant_eigenvalue(&base.phi),
        tightened_valid: true,
        value: cf,
    })
}

/// Limiting gap under the PL condition.
pub fn asymptotic_gap_pl(
    c: &TheoryConstants,
    alpha: f64,
    d_min: f64,
    d_max: f64,
    rt: f64,
    m: usize,
    rho: f64,
) -> Result<[f64; 2], TheoryError> {
    if !(rho < 1.0) {
        return Err(TheoryError::NotContracting(rho));
    }
    let q = q_factor(rt);
    let mf = m as f64;
    let d2 = c.delta * c.delta;
    let s = alpha * alpha / (1.0 - rho);
    Ok([
        s * (c.beta / 2.0) * (4.0 * (1.0 - d_min) * d2 + d_max * c.sigma2 / mf),
        s * mf * d_max * (3.0 * q * d2 + c.sigma2),
    ])
}

fn check_gamma3(gamma3: f64, alpha0: f64) -> Result<(), TheoryError> {
    let max = 1.0 / alpha0;
    if !(gamma3 >= 0.0 && gamma3 <= max * (1.0 + 1e-12)) {
        return Err(TheoryError::Gamma3 { gamma3, max });
    }
    Ok(())
}

/// Midpoint of the admissible range `0 < Gamma1 < 1/(1 + 2 beta^2 Gamma3 / mu^2)`.
pub fn default_gamma1(c: &TheoryConstants, gamma3: f64) -> f64 {
    0.5 / (1.0 + 2.0 * c.beta * c.beta * gamma3 / (c.mu * c.mu))
}

fn dim_w(c: &TheoryConstants, gamma1: f64, gamma3: f64) -> f64 {
    c.zeta * c.zeta + 2.0 * gamma3 * gamma1 * c.beta * c.beta / c.mu
}

/// `Gamma2*` for the diminishing regime, and the finite product
/// `Gamma3 Gamma1 (Gamma2* - 1)` that enters `A`.
pub fn gamma2_star_diminishing(c: &TheoryConstants, rt: f64, gamma1: f64, gamma3: f64) -> Gamma2 {
    let w = dim_w(c, gamma1, gamma3);
    let g31 = gamma3 * gamma1;
    let c1 = (g31 * (1.0 - rt).powi(2) / (6.0 * (1.0 + rt) * w)).sqrt();
    let c2 = 4.0 * g31 * (1.0 + gamma1) * c.beta * c.beta / (c.mu * (1.0 + rt));
    let value = if c1 * c2 > 0.0 { (c1 * c2).powf(-2.0 / 3.0) + 1.0 } else { f64::INFINITY };
    // c1 c2 = (Gamma3 Gamma1)^{3/2} k0.
    let product = if w == 0.0 {
        0.0
    } else {
        let k0 = ((1.0 - rt).powi(2) / (6.0 * (1.0 + rt) * w)).sqrt() * 4.0 * (1.0 + gamma1) * c.beta * c.beta
            / (c.mu * (1.0 + rt));
        k0.powf(-2.0 / 3.0)
    };
    Gamma2 { value, product }
}

/// Feasible initial step for the diminishing schedule with `d = 1 - Gamma3 alpha_k`.
pub fn diminishing_feasibility(
    c: &TheoryConstants,
    rt_sup: f64,
    gamma3: f64,
    alpha0: f64,
) -> Result<FeasibilityReport, TheoryError> {
    if !(0.0..1.0).contains(&rt_sup) {
        return Err(TheoryError::BadRhoTilde(rt_sup));
    }
    check_gamma3(gamma3, alpha0)?;
    let g1 = default_gamma1(c, gamma3);
    let w = dim_w(c, g1, gamma3);
    let (mu, beta, zeta) = (c.mu, c.beta, c.zeta);
    let t1 = g1 / mu;
    let t2 = 1.0 / (2.0 * 3f64.sqrt()) * (1.0 - rt_sup) / (1.0 + rt_sup).sqrt() / (zeta * zeta + 2.0 * beta * beta).sqrt();
    let t3 = safe_div(mu, 6.0 * w * (1.0 + g1)).cbrt() * ((1.0 - rt_sup) / (2.0 * beta)).powf(2.0 / 3.0);
    let g2 = gamma2_star_diminishing(c, rt_sup, g1, gamma3);
    Ok(FeasibilityReport::from_terms(
        Regime::Diminishing,
        vec![("inverse_mu".into(), t1), ("graph".into(), t2), ("cube_root".into(), t3)],
        g1,
        g2.value,
        Some(gamma3),
    )
    .query(alpha0))
}

/// `A`, `B`, `C` and the tightened matrix of the diminishing regime, with
/// `a_term = Gamma3 Gamma1 (Gamma2 - 1)`.
pub fn diminishing_abc(
    c: &TheoryConstants,
    alpha: f64,
    rt: f64,
    m: usize,
    gamma1: f64,
    a_term: f64,
    gamma3: f64,
) -> ([f64; 3], [[f64; 2]; 2]) {
    let (mu, beta, zeta) = (c.mu, c.beta, c.zeta);
    let b2 = beta * beta;
    let q = q_factor(rt);
    let w = dim_w(c, gamma1, gamma3);
    let a = (1.0 / mu) * (1.0 + gamma1) * a_term * b2;
    let b = 1.5 * q * (zeta * zeta + 2.0 * b2);
    let cc = 12.0 * (1.0 + gamma1) * (b2 / mu) * q * w;
    let mf = m as f64;
    let phi = [
        [1.0 - 2.0 * a * alpha, (1.0 + gamma1) * b2 * alpha / (mf * mu)],
        [3.0 * q * mf * alpha * alpha * w, (1.0 + rt) / 2.0 + 2.0 * b * alpha * alpha],
    ];
    ([a, b, cc], phi)
}

/// `h` with `rho(Phi_k) = 1 - h(alpha_k)`.
pub fn contraction_gain_h(
    c: &TheoryConstants,
    alpha_k: f64,
    rt: f64,
    gamma1: f64,
    gamma2: f64,
    gamma3: f64,
) -> f64 {
    let a_term = if gamma2.is_infinite() { gamma2_star_diminishing(c, rt, gamma1, gamma3).product } else { gamma3 * gamma1 * (gamma2 - 1.0) };
    let ([a, b, cc], _) = diminishing_abc(c, alpha_k, rt, 1, gamma1, a_term, gamma3);
    let h = 1.0 - closed_form(rt, alpha_k, a, b, cc);
    if h <= 0.0 && alpha_k > 0.0 {
        log::warn!("step {alpha_k} is outside the contracting range: h = {h}");
    }
    h
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DiminishingInputs {
    pub alpha0: f64,
    pub gamma: f64,
    pub gamma3: f64,
    pub rho_tilde_sup: f64,
    pub m: usize,
}

/// Explicit sublinear bound on `nu(k+1)` for `k >= 2`.
pub fn sublinear_envelope(nu0: [f64; 2], c: &TheoryConstants, p: &DiminishingInputs, k: u64) -> Result<[f64; 2], TheoryError> {
    if k < 2 {
        return Err(TheoryError::KTooSmall(k));
    }
    if !(0.0..1.0).contains(&p.rho_tilde_sup) {
        return Err(TheoryError::BadRhoTilde(p.rho_tilde_sup));
    }
    check_gamma3(p.gamma3, p.alpha0)?;
    let (a0, g, rt) = (p.alpha0, p.gamma, p.rho_tilde_sup);
    let g1 = default_gamma1(c, p.gamma3);
    let a_term = gamma2_star_diminishing(c, rt, g1, p.gamma3).product;
    let ([a, _, _], _) = diminishing_abc(c, a0, rt, p.m, g1, a_term, p.gamma3);
    let q = q_factor(rt);
    let mf = p.m as f64;
    let kf = k as f64;
    let d2 = c.delta * c.delta;
    let uk = (1.0 + kf / g).sqrt();
    let u1 = (1.0 + 1.0 / g).sqrt();

    let product = 1.0 / (2.0 * a * 2.0 * a0 * (uk - 1.0));
    let log_tail = (1.0 / ((1.0 + 1.0 / (g + kf - 1.0)).sqrt() - 1.0)).ln();
    let sum = a0 / (4.0 * a)
        * (1.0 / (uk - u1) + 2.0 * (g + 1.0) / uk * (uk.ln() + log_tail) + 2.0 * uk / (1.0 + (kf - 1.0) / g));
    let w = [(2.0 / (c.mu * a0)) * (1.0 + c.mu * a0) * d2 + c.sigma2 / mf, mf * (3.0 * q * d2 + c.sigma2)];
    let psi_scale = a0 * a0 / (1.0 + kf / g);
    let psi = [2.0 * p.gamma3 * (1.0 + g1) * d2 / c.mu + c.sigma2 / mf, mf * (3.0 * q * d2 + c.sigma2)];
    let mut out = [0.0; 2];
    for i in 0..2 {
        let pn = if nu0[i] == 0.0 { 0.0 } else { product * nu0[i] };
        let sw = if w[i] == 0.0 { 0.0 } else { sum * w[i] };
        out[i] = pn + sw + psi_scale * psi[i];
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn consts(mu: f64, beta: f64, delta: f64, zeta: f64, sigma2: f64) -> TheoryConstants {
        TheoryConstants { mu, beta, delta, zeta, sigma2, exact: true }
    }

    #[test]
    fn zero_step_coefficients() {
        let c = consts(0.5, 2.0, 1.0, 0.7, 0.3);
        let p = phi_psi_convex(&c, 0.0, 0.4, 0.9, 0.3, 6).unwrap();
        assert_eq!(p.phi, [[1.0, 0.0], [0.0, 0.65]]);
        assert_eq!(p.psi, [0.0, 0.0]);
        let p = phi_psi_pl(&consts(1.0, 1.1, 1.0, 0.7, 0.3), 0.0, 0.9, 0.95, 0.3, 6).unwrap();
        assert_eq!(p.phi, [[1.0, 0.0], [0.0, 0.65]]);
        assert_eq!(p.psi, [0.0, 0.0]);
    }

    #[test]
    fn full_participation_reduces_to_dgd() {
        let c = consts(0.5, 2.0, 1.0, 0.0, 0.0);
        let a = 0.03;
        let p = phi_psi_convex(&c, a, 1.0, 1.0, 0.3, 6).unwrap();
        assert_eq!(p.phi[1][0], 0.0);
        let ma = 0.5 * a;
        assert_abs_diff_eq!(p.phi[0][0], 1.0 - ma * (1.0 + ma - ma * ma), epsilon = 1e-15);
    }

    #[test]
    fn rho_tilde_of_one_rejected() {
        let c = consts(1.0, 1.0, 0.0, 0.0, 0.0);
        assert_eq!(phi_psi_convex(&c, 0.1, 0.5, 1.0, 1.0, 2).unwrap_err(), TheoryError::BadRhoTilde(1.0));
    }

    #[test]
    fn gamma2_two_node_hand_value() {
        // mu = beta = 1, zeta = 0, d_max = 1, Gamma1 = 1, rho~ = 0, d_min = 1/2.
        let c = consts(1.0, 1.0, 0.0, 0.0, 0.0);
        let g = gamma2_star(&c, 0.5, 1.0, 0.0, 1.0);
        // c1 = sqrt(1/2)/(sqrt6 * 1) = 1/sqrt12, c2 = 4*2*(1/2) = 4.
        let c1c2 = 4.0 / 12f64.sqrt();
        assert_abs_diff_eq!(g.value, c1c2.powf(-2.0 / 3.0) + 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(g.product, (g.value - 1.0) * 0.5, epsilon = 1e-12);
        assert!(g.value > 1.0);
    }

    #[test]
    fn gamma2_product_limits() {
        let c = consts(1.0, 2.0, 0.0, 0.0, 0.0);
        let mut prev = f64::INFINITY;
        for e in 1..12 {
            let dmin = 1.0 - 10f64.powi(-e);
            let p = gamma2_star(&c, dmin, 1.0, 0.4, 1.0).product;
            assert!(p < prev);
            prev = p;
        }
        assert!(prev < 1e-3);
        assert_eq!(gamma2_star(&c, 1.0, 1.0, 0.4, 1.0).product, 0.0);
    }

    #[test]
    fn convex_feasibility_hand_example() {
        let beta = 1.7;
        let c = consts(beta, beta, 0.0, 0.0, 0.0);
        let r = max_step_convex(&c, 1.0, 1.0, 0.5);
        let expect = (1.0 / beta).min(1.0 / (2.0 * 3f64.sqrt()) * (0.5 / 1.5f64.sqrt()) / (2f64.sqrt() * beta));
        assert_abs_diff_eq!(r.alpha_max, expect, epsilon = 1e-15);
        assert!(r.terms[2].1.is_infinite());
    }

    #[test]
    fn alpha_max_vanishes_as_rho_tilde_approaches_one() {
        let c = consts(0.5, 2.0, 1.0, 0.7, 0.3);
        assert!(max_step_convex(&c, 0.5, 0.9, 1.0 - 1e-9).alpha_max < 1e-5);
        assert!(max_step_pl(&consts(1.0, 1.1, 1.0, 0.7, 0.3), 0.9, 0.95, 1.0 - 1e-9).unwrap().alpha_max < 1e-5);
    }

    #[test]
    fn closed_form_collapses_at_zero_step() {
        let c = consts(0.5, 2.0, 1.0, 0.7, 0.3);
        let r = spectral_radius_convex(&c, 0.0, 0.5, 0.9, 0.3, 5).unwrap();
        assert_abs_diff_eq!(r.closed_form, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn full_participation_without_heterogeneity_drops_a() {
        let c = consts(0.5, 2.0, 1.0, 0.0, 0.3);
        let g = gamma2_star(&c, 1.0, 1.0, 0.3, 1.0);
        let ([a, b, cc], _) = convex_abc(&c, 0.01, 1.0, 1.0, 0.3, 5, 1.0, g.product);
        assert_eq!(a, 0.0);
        assert_eq!(cc, 0.0);
        let r = spectral_radius_convex(&c, 0.01, 1.0, 1.0, 0.3, 5).unwrap();
        let inner = 0.35 - 2.0 * b * 1e-4;
        assert_abs_diff_eq!(r.closed_form, 0.825 + b * 1e-4 + 0.5 * inner.abs(), epsilon = 1e-15);
        assert!(r.value < 1.0);
    }

    #[test]
    fn envelope_power_example() {
        let e = geometric_envelope([1.0, 1.0], 0.9, [0.0, 0.0], 21).unwrap();
        assert_abs_diff_eq!(e[0], 0.9f64.powi(22), epsilon = 1e-15);
        assert_abs_diff_eq!(e[1], 0.9f64.powi(22), epsilon = 1e-15);
        assert!(geometric_envelope([1.0, 1.0], 1.0, [0.0, 0.0], 1).is_err());
        let far = geometric_envelope([3.0, 2.0], 0.5, [0.1, 0.2], 10_000).unwrap();
        assert_abs_diff_eq!(far[0], 0.2, epsilon = 1e-15);
        assert_abs_diff_eq!(far[1], 0.4, epsilon = 1e-15);
    }

    #[test]
    fn gap_special_cases() {
        let c = consts(0.5, 2.0, 1.0, 0.7, 0.0);
        let g = asymptotic_gap_convex(&c, 0.01, 1.0, 1.0, 0.3, 5, 0.9).unwrap();
        assert_eq!(g[0], 0.0);
        assert!(g[1] > 0.0);
        let c0 = consts(0.5, 2.0, 0.0, 0.7, 0.0);
        assert_eq!(asymptotic_gap_convex(&c0, 0.01, 0.5, 1.0, 0.3, 5, 0.9).unwrap(), [0.0, 0.0]);
        assert_eq!(asymptotic_gap_pl(&c0, 0.01, 0.9, 1.0, 0.3, 5, 0.9).unwrap(), [0.0, 0.0]);
        let cs = consts(1.0, 1.2, 0.0, 0.7, 0.4);
        let g = asymptotic_gap_pl(&cs, 0.01, 1.0, 0.8, 0.3, 4, 0.9).unwrap();
        assert_abs_diff_eq!(g[0], 0.6 * 0.8 * 0.4 / 4.0 * 1e-4 / 0.1, epsilon = 1e-15);
    }

    #[test]
    fn pl_full_participation_coefficient() {
        let c = consts(0.8, 1.0, 1.0, 0.7, 0.3);
        let a = 0.02;
        let p = phi_psi_pl(&c, a, 1.0, 1.0, 0.3, 4).unwrap();
        assert_abs_diff_eq!(p.phi[0][0], 1.0 + (2.0 / 0.8) * a * a - 0.8 * a, epsilon = 1e-15);
    }

    #[test]
    fn convex_rate_uses_closed_form_only_when_tightening_holds() {
        let easy = consts(1.0, 1.0, 0.5, 0.0, 0.01);
        let r = spectral_radius_convex(&easy, 0.01, 0.99, 1.0, 0.1, 10).unwrap();
        assert!(r.tightened_valid);
        assert_eq!(r.value, r.closed_form);
        assert!(r.closed_form >= r.untightened_eig - 1e-12);

        let hard = consts(1.0, 4.0, 1.0, 1.0, 0.01);
        let a = 0.5 * max_step_convex(&hard, 0.5, 1.0, 0.5).alpha_max;
        let r = spectral_radius_convex(&hard, a, 0.5, 1.0, 0.5, 10).unwrap();
        assert!(!r.tightened_valid);
        assert_eq!(r.value, r.untightened_eig);
    }

    #[test]
    fn pl_floor_named_in_error() {
        let c = consts(1.0, 2.0, 1.0, 0.7, 0.3);
        let err = phi_psi_pl(&c, 0.01, 0.8, 0.9, 0.3, 4).unwrap_err();
        assert_eq!(err, TheoryError::PlFloor { d_min: 0.8, floor: 0.875 });
        assert!(err.to_string().contains("0.875"));
        assert!(max_step_pl(&c, 0.875, 0.9, 0.3).is_err());
    }

    #[test]
    fn pl_first_term_hand_example() {
        let beta = 1.3;
        let c = consts(beta, beta, 1.0, 0.5, 0.0);
        let r = max_step_pl(&c, 1.0, 1.0, 0.2).unwrap();
        assert_abs_diff_eq!(r.terms[0].1, 1.0 / (10.0 * beta), epsilon = 1e-15);
    }

    #[test]
    fn pl_coupling_product_matches_c() {
        let c = consts(0.9, 1.0, 1.0, 0.6, 0.3);
        let (alpha, dmin, dmax) = (0.013, 0.7, 0.95);
        let ([_, _, cc], phi) = pl_abc(&c, alpha, dmin, dmax, 0.4, 7);
        assert_abs_diff_eq!(4.0 * phi[0][1] * phi[1][0], cc * alpha.powi(3), epsilon = 1e-15);
    }

    #[test]
    fn h_zero_at_zero_step_and_bracketed() {
        let c = consts(0.5, 2.0, 1.0, 0.7, 0.3);
        let g3 = 5.0;
        let g1 = default_gamma1(&c, g3);
        let g2 = gamma2_star_diminishing(&c, 0.4, g1, g3).value;
        assert_abs_diff_eq!(contraction_gain_h(&c, 0.0, 0.4, g1, g2, g3), 0.0, epsilon = 1e-15);
        let rep = diminishing_feasibility(&c, 0.4, g3, 0.1).unwrap();
        let a_term = g3 * g1 * (g2 - 1.0);
        let ([a, _, cc], _) = diminishing_abc(&c, 0.0, 0.4, 3, g1, a_term, g3);
        for f in [0.01, 0.2, 0.5, 0.9] {
            let ak = rep.alpha_max * f;
            let h = contraction_gain_h(&c, ak, 0.4, g1, g2, g3);
            assert!(h > 0.0);
            // The dominant eigenvalue is at least the diagonal entry 1 - 2 A alpha.
            assert!(h <= 2.0 * a * ak * (1.0 + 1e-12));
            assert!(h >= 2.0 * a * ak - 0.5 * cc.sqrt() * ak.powf(1.5));
        }
    }

    #[test]
    fn printed_h_lower_bound_does_not_hold() {
        let c = consts(0.5, 2.0, 1.0, 0.7, 0.3);
        let g3 = 5.0;
        let g1 = default_gamma1(&c, g3);
        let g2 = gamma2_star_diminishing(&c, 0.4, g1, g3).value;
        let ([a, _, _], _) = diminishing_abc(&c, 0.0, 0.4, 3, g1, g3 * g1 * (g2 - 1.0), g3);
        let ak = 0.5 * diminishing_feasibility(&c, 0.4, g3, 0.1).unwrap().alpha_max;
        assert!(contraction_gain_h(&c, ak, 0.4, g1, g2, g3) < 2.0 * a * ak);
    }

    #[test]
    fn gamma3_zero_collapses_cube_root_term() {
        let c = consts(0.5, 2.0, 1.0, 0.7, 0.3);
        let rep = diminishing_feasibility(&c, 0.4, 0.0, 0.1).unwrap();
        let expect = (0.5 / (6.0 * 0.49 * 1.5f64)).cbrt() * (0.6f64 / 4.0).powf(2.0 / 3.0);
        assert_abs_diff_eq!(rep.terms[2].1, expect, epsilon = 1e-15);
        assert!(matches!(diminishing_feasibility(&c, 0.4, 11.0, 0.1), Err(TheoryError::Gamma3 { .. })));
    }

    fn dim_inputs() -> (TheoryConstants, DiminishingInputs) {
        let c = consts(1.0, 2.0, 0.5, 0.6, 0.1);
        let rep = diminishing_feasibility(&c, 0.5, 10.0, 0.05).unwrap();
        let a0 = rep.alpha_max * 0.5;
        (c, DiminishingInputs { alpha0: a0, gamma: 50.0, gamma3: 1.0 / a0, rho_tilde_sup: 0.5, m: 10 })
    }

    #[test]
    fn sublinear_envelope_decays() {
        let (c, p) = dim_inputs();
        assert_eq!(sublinear_envelope([1.0, 0.0], &c, &p, 1).unwrap_err(), TheoryError::KTooSmall(1));
        let e_mid = sublinear_envelope([4.0, 1.0], &c, &p, 1000).unwrap();
        let e_far = sublinear_envelope([4.0, 1.0], &c, &p, 1_000_000).unwrap();
        assert!(e_far[0] < e_mid[0] && e_far[1] < e_mid[1]);
        let (mut k, mut prev) = (125_000u64, sublinear_envelope([4.0, 1.0], &c, &p, 125_000).unwrap());
        while k < 1_000_000 {
            k *= 2;
            let e = sublinear_envelope([4.0, 1.0], &c, &p, k).unwrap();
            for i in 0..2 {
                assert!((e[i] / prev[i]).ln() / 2f64.ln() <= -0.4);
            }
            prev = e;
        }
    }

    #[test]
    fn sublinear_envelope_zero_without_error_sources() {
        let (mut c, p) = dim_inputs();
        c.delta = 0.0;
        c.sigma2 = 0.0;
        assert_eq!(sublinear_envelope([0.0, 0.0], &c, &p, 100).unwrap(), [0.0, 0.0]);
    }
}

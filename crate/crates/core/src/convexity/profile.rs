use super::growth::{sample_grid, GrowthFunction, GrowthKind};
use crate::error::{Error, Result};
use crate::quadrature::adaptive_simpson;

/// Which decay law the profile supports.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecayMode {
    /// L(1/ψ⁻¹(γ₂t)) envelope
    General,
    /// (H')⁻¹(γ₃/t) envelope, valid when limsup Λ_H < 1
    Simplified,
    /// exp(−γ₂t) envelope for laws linear at zero
    Exponential,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances {
    pub bisect_rel: f64,
    pub bisect_max_iter: usize,
    pub quad: f64,
    /// ψ's integrand 1/(1 − Λ_H) is declared singular below this gap.
    pub delta_sing: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            bisect_rel: 1e-12,
            bisect_max_iter: 200,
            quad: 1e-10,
            delta_sing: 1e-6,
        }
    }
}

/// Evaluators for H(s) = √s·g(√s), its derivative and conjugate, L, Λ_H, ψ
/// and the weight w(s) = L⁻¹(s/β).
#[derive(Debug, Clone)]
pub struct ConvexityProfile {
    growth: GrowthFunction,
    beta: f64,
    hp_at_s0sq: f64,
    lambda_limsup_estimate: f64,
    mode: DecayMode,
    tol: Tolerances,
}

impl ConvexityProfile {
    pub fn new(growth: GrowthFunction, beta: f64) -> Result<Self> {
        Self::with_tolerances(growth, beta, Tolerances::default())
    }

    pub fn with_tolerances(growth: GrowthFunction, beta: f64, tol: Tolerances) -> Result<Self> {
        if !(beta > 0.0) {
            return Err(Error::Domain(format!("beta must be positive, got {beta}")));
        }
        growth.validate()?;
        let mut profile = Self {
            growth,
            beta,
            hp_at_s0sq: 0.0,
            lambda_limsup_estimate: 0.0,
            mode: DecayMode::General,
            tol,
        };
        profile.check_convexity()?;
        profile.hp_at_s0sq = profile.hp(profile.s0sq());
        let s0sq = profile.s0sq();
        let samples: Vec<f64> = (1..=8).map(|k| profile.lambda(s0sq * 10f64.powi(-k))).collect();
        profile.lambda_limsup_estimate = samples[4..].iter().copied().fold(f64::MIN, f64::max);
        profile.mode = if profile.growth.kind() == GrowthKind::LinearAtZero {
            DecayMode::Exponential
        } else if profile.lambda_limsup_estimate < 0.999 && !profile.growth.lambda_limsup_is_one() {
            DecayMode::Simplified
        } else {
            DecayMode::General
        };
        Ok(profile)
    }

    fn check_convexity(&self) -> Result<()> {
        let s0sq = self.s0sq();
        // H' must be nondecreasing (checked in log form to survive underflow)
        // and, for superlinear laws, strictly larger at s0² than at s0²/2
        let mut prev = f64::NEG_INFINITY;
        for x in sample_grid(s0sq) {
            let ln_hp = self.hp(x).ln();
            if !ln_hp.is_finite() {
                continue;
            }
            if ln_hp < prev - 1e-12 * prev.abs().max(1.0) {
                return Err(Error::InvalidGrowth(format!("H is not convex near s = {x:e}")));
            }
            prev = ln_hp;
        }
        if self.growth.kind() == GrowthKind::SuperlinearAtZero && !(self.hp(s0sq) > self.hp(0.5 * s0sq)) {
            return Err(Error::InvalidGrowth("H is not strictly convex".into()));
        }
        let n = 1000;
        let h_max = self.h_unchecked(s0sq);
        let h: Vec<f64> = (0..=n).map(|i| self.h_unchecked(s0sq * i as f64 / n as f64)).collect();
        for i in 1..n {
            let d2 = h[i + 1] - 2.0 * h[i] + h[i - 1];
            if d2 < -1e-13 * h_max {
                return Err(Error::InvalidGrowth(format!(
                    "H has negative second difference at s = {}",
                    s0sq * i as f64 / n as f64
                )));
            }
        }
        Ok(())
    }

    pub fn growth(&self) -> &GrowthFunction {
        &self.growth
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn with_beta(&self, beta: f64) -> Result<Self> {
        if !(beta > 0.0) {
            return Err(Error::Domain(format!("beta must be positive, got {beta}")));
        }
        let mut p = self.clone();
        p.beta = beta;
        Ok(p)
    }

    pub fn mode(&self) -> DecayMode {
        self.mode
    }

    pub fn tolerances(&self) -> Tolerances {
        self.tol
    }

    pub fn lambda_limsup_estimate(&self) -> f64 {
        self.lambda_limsup_estimate
    }

    /// Cached H'(s0²).
    pub fn hp_at_s0sq(&self) -> f64 {
        self.hp_at_s0sq
    }

    pub fn s0sq(&self) -> f64 {
        let s0 = self.growth.s0();
        s0 * s0
    }

    fn check_domain(&self, s: f64) -> Result<()> {
        if !(0.0..=self.s0sq() * (1.0 + 1e-14)).contains(&s) {
            return Err(Error::Domain(format!("s = {s} outside [0, {}]", self.s0sq())));
        }
        Ok(())
    }

    fn h_unchecked(&self, s: f64) -> f64 {
        if s <= 0.0 {
            return 0.0;
        }
        let sigma = s.sqrt();
        (sigma.ln() + self.growth.ln_g_pos(sigma)).exp()
    }

    /// H'(s) = g(√s)/(2√s) + g'(√s)/2 in the overflow-safe form
    /// (g(σ)/σ)·(1 + σg'(σ)/g(σ))/2.
    fn hp(&self, s: f64) -> f64 {
        if s < 1e-300 {
            return self.growth.g_prime_at_zero();
        }
        let sigma = s.sqrt();
        let e = self.growth.elasticity_pos(sigma);
        0.5 * (self.growth.ln_g_pos(sigma) - sigma.ln()).exp() * (1.0 + e)
    }

    fn lambda(&self, s: f64) -> f64 {
        let s = s.max(1e-300);
        2.0 / (1.0 + self.growth.elasticity_pos(s.sqrt()))
    }

    pub fn h(&self, s: f64) -> Result<f64> {
        self.check_domain(s)?;
        Ok(self.h_unchecked(s.min(self.s0sq())))
    }

    pub fn h_prime(&self, s: f64) -> Result<f64> {
        self.check_domain(s)?;
        Ok(self.hp(s.min(self.s0sq())))
    }

    /// (H')⁻¹(y) on [0, s0²]: bisection, saturating at the interval ends.
    pub fn inv_h_prime(&self, y: f64) -> f64 {
        let s0sq = self.s0sq();
        if y >= self.hp_at_s0sq {
            return s0sq;
        }
        if y <= self.hp(0.0) {
            return 0.0;
        }
        let (mut lo, mut hi) = (0.0, s0sq);
        for _ in 0..self.tol.bisect_max_iter {
            let mid = 0.5 * (lo + hi);
            if self.hp(mid) < y {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= self.tol.bisect_rel * hi {
                break;
            }
        }
        0.5 * (lo + hi)
    }

    /// Ĥ*(r) = max over s ∈ [0, s0²] of (r·s − H(s)).
    pub fn conjugate(&self, r: f64) -> Result<f64> {
        if r < 0.0 {
            return Err(Error::Domain(format!("conjugate needs r ≥ 0, got {r}")));
        }
        if r == 0.0 {
            return Ok(0.0);
        }
        let s = self.inv_h_prime(r);
        Ok((r * s - self.h_unchecked(s)).max(0.0))
    }

    /// L(r) = Ĥ*(r)/r with L(0) = 0.
    pub fn l(&self, r: f64) -> Result<f64> {
        if r == 0.0 {
            return Ok(0.0);
        }
        Ok(self.conjugate(r)? / r)
    }

    /// L⁻¹(y) for 0 ≤ y < s0².
    pub fn inv_l(&self, y: f64) -> Result<f64> {
        let s0sq = self.s0sq();
        if y < 0.0 {
            return Err(Error::Domain(format!("inv_L needs y ≥ 0, got {y}")));
        }
        if y >= s0sq {
            return Err(Error::Range(format!("L never attains {y} ≥ s0² = {s0sq}")));
        }
        if y == 0.0 {
            return Ok(0.0);
        }
        let a = self.hp_at_s0sq;
        let h_end = self.h_unchecked(s0sq);
        // past H'(s0²) the maximizer sits at s0² and L(r) = s0² − H(s0²)/r
        if y >= s0sq - h_end / a {
            return Ok(h_end / (s0sq - y));
        }
        let (mut lo, mut hi) = (0.0, a);
        for _ in 0..self.tol.bisect_max_iter {
            let mid = 0.5 * (lo + hi);
            if self.l(mid)? < y {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 1e-15 * hi {
                break;
            }
        }
        Ok(0.5 * (lo + hi))
    }

    /// Λ_H(s) = H(s)/(s·H'(s)) = 2/(1 + σg'(σ)/g(σ)) with σ = √s.
    pub fn lambda_h(&self, s: f64) -> Result<f64> {
        if s <= 0.0 {
            return Err(Error::Domain(format!("Λ_H needs s > 0, got {s}")));
        }
        self.check_domain(s)?;
        Ok(self.lambda(s))
    }

    fn psi_integrand(&self, u: f64) -> Result<f64> {
        let x = self.inv_h_prime(1.0 / u);
        let gap = 1.0 - self.lambda(x);
        if gap < self.tol.delta_sing {
            return Err(Error::Singularity(format!(
                "1 − Λ_H = {gap:e} at s = {x:e}; use the exponential-mode envelope for this growth law"
            )));
        }
        Ok(1.0 / gap)
    }

    /// ψ(s) = 1/H'(s0²) + ∫_{1/H'(s0²)}^{s} du / (1 − Λ_H((H')⁻¹(1/u))),
    /// i.e. the defining integral after the substitution v = 1/u.
    pub fn psi(&self, s: f64) -> Result<f64> {
        let start = 1.0 / self.hp_at_s0sq;
        if s < start * (1.0 - 1e-14) {
            return Err(Error::Domain(format!("ψ needs s ≥ 1/H'(s0²) = {start}, got {s}")));
        }
        if s <= start {
            return Ok(start);
        }
        let integral = adaptive_simpson(|u| self.psi_integrand(u), start, s, self.tol.quad)?;
        Ok(start + integral)
    }

    /// ψ⁻¹(t) by safeguarded Newton on [1/H'(s0²), t]; ψ(s) ≥ s brackets the root.
    pub fn inv_psi(&self, t: f64) -> Result<f64> {
        let start = 1.0 / self.hp_at_s0sq;
        if t < start * (1.0 - 1e-14) {
            return Err(Error::Domain(format!("ψ⁻¹ needs t ≥ 1/H'(s0²) = {start}, got {t}")));
        }
        if t <= start {
            return Ok(start);
        }
        let (mut lo, mut hi) = (start, t);
        let mut s = 0.5 * (lo + hi);
        for _ in 0..200 {
            let f = self.psi(s)? - t;
            if f.abs() <= 1e-11 * t.max(1.0) {
                return Ok(s);
            }
            if f > 0.0 {
                hi = s;
            } else {
                lo = s;
            }
            let step = f / self.psi_integrand(s)?;
            let newton = s - step;
            s = if newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
            if hi - lo <= 1e-15 * hi {
                break;
            }
        }
        Ok(s)
    }

    /// w(s) = L⁻¹(s/β).
    pub fn weight(&self, s: f64) -> Result<f64> {
        if s < 0.0 {
            return Err(Error::Domain(format!("weight needs s ≥ 0, got {s}")));
        }
        if s >= self.beta * self.s0sq() {
            return Err(Error::Range(format!(
                "weight argument {s} ≥ β·s0² = {}; increase beta",
                self.beta * self.s0sq()
            )));
        }
        self.inv_l(s / self.beta)
    }
}

/// Smallest β meeting both size conditions of the weight construction:
/// max(E0/L(H'(s0²)(1 − 10⁻⁶)), 2·k_T·T·‖B‖/C_T).
pub fn default_beta(profile: &ConvexityProfile, e0: f64, t_obs: f64, norm_b: f64, c_t: f64, k_t: f64) -> Result<f64> {
    let l_edge = profile.l(profile.hp_at_s0sq() * (1.0 - 1e-6))?;
    if !(l_edge > 0.0) || !(c_t > 0.0) {
        return Err(Error::Domain("default beta needs L(H'(s0²)) > 0 and C_T > 0".into()));
    }
    Ok((e0 / l_edge).max(2.0 * k_t * t_obs * norm_b / c_t))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cubic() -> ConvexityProfile {
        ConvexityProfile::new(GrowthFunction::power(3.0).unwrap(), 4.0).unwrap()
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-300)
    }

    #[test]
    fn cubic_profile_basics() {
        let p = cubic();
        assert_eq!(p.mode(), DecayMode::Simplified);
        assert!(rel(p.hp_at_s0sq(), 2.0) < 1e-14);
        assert!(rel(p.h(0.25).unwrap(), 0.0625) < 1e-14);
        assert!(rel(p.h_prime(0.25).unwrap(), 0.5) < 1e-14);
        assert_eq!(p.h(0.0).unwrap(), 0.0);
        assert!(rel(p.lambda_h(0.3).unwrap(), 0.5) < 1e-14);
    }

    #[test]
    fn quintic_values() {
        let p = ConvexityProfile::new(GrowthFunction::power(5.0).unwrap(), 1.0).unwrap();
        assert!(rel(p.h(0.5).unwrap(), 0.125) < 1e-14);
        assert!(rel(p.h_prime(0.5).unwrap(), 0.75) < 1e-14);
    }

    #[test]
    fn conjugate_examples() {
        let p = cubic();
        assert!(rel(p.conjugate(1.0).unwrap(), 0.25) < 1e-10);
        assert_eq!(p.conjugate(0.0).unwrap(), 0.0);
        assert!(rel(p.conjugate(3.0).unwrap(), 2.0) < 1e-14);
        assert!(p.conjugate(-1.0).is_err());
    }

    #[test]
    fn l_and_inverse_examples() {
        let p = cubic();
        assert!(rel(p.l(1.0).unwrap(), 0.25) < 1e-10);
        assert!(rel(p.inv_l(0.25).unwrap(), 1.0) < 1e-10);
        assert!(rel(p.inv_l(0.9).unwrap(), 10.0) < 1e-12);
        assert_eq!(p.l(0.0).unwrap(), 0.0);
        assert!(matches!(p.inv_l(1.0), Err(Error::Range(_))));
    }

    #[test]
    fn psi_examples() {
        let p = cubic();
        assert!(rel(p.psi(1.0).unwrap(), 1.5) < 1e-10);
        assert_eq!(p.psi(0.5).unwrap(), 0.5);
        assert!(rel(p.inv_psi(3.5).unwrap(), 2.0) < 1e-10);
        assert!(p.psi(0.1).is_err());
    }

    #[test]
    fn weight_examples() {
        let p = cubic();
        assert!(rel(p.weight(1.0).unwrap(), 1.0) < 1e-10);
        assert_eq!(p.weight(0.0).unwrap(), 0.0);
        assert!(rel(p.weight(3.6).unwrap(), 10.0) < 1e-12);
        assert!(matches!(p.weight(4.0), Err(Error::Range(_))));
    }

    #[test]
    fn linear_law_selects_exponential_mode() {
        let p = ConvexityProfile::new(GrowthFunction::linear().unwrap(), 1.0).unwrap();
        assert_eq!(p.mode(), DecayMode::Exponential);
        assert!(rel(p.lambda_h(0.5).unwrap(), 1.0) < 1e-15);
        assert!(matches!(p.psi(2.0), Err(Error::Singularity(_))));
    }

    #[test]
    fn exp_inv_sq_is_simplified_with_vanishing_lambda() {
        let p = ConvexityProfile::new(GrowthFunction::exp_inv_sq().unwrap(), 1.0).unwrap();
        assert_eq!(p.mode(), DecayMode::Simplified);
        assert!(p.lambda_limsup_estimate() < 1e-3);
    }

    #[test]
    fn power_log_lambda_tends_to_power_value() {
        let p = ConvexityProfile::new(GrowthFunction::power_log(3.0, 2.0).unwrap(), 1.0).unwrap();
        let near_zero = p.lambda_h(1e-200).unwrap();
        assert!((near_zero - 0.5).abs() < 0.01, "{near_zero}");
    }

    #[test]
    fn log_weak_falls_back_to_general_mode() {
        let p = ConvexityProfile::new(GrowthFunction::log_weak(1.0).unwrap(), 1.0).unwrap();
        assert_eq!(p.mode(), DecayMode::General);
    }

    #[test]
    fn domain_errors() {
        let p = cubic();
        assert!(matches!(p.h(1.5), Err(Error::Domain(_))));
        assert!(matches!(p.lambda_h(0.0), Err(Error::Domain(_))));
    }

    #[test]
    fn default_beta_takes_the_larger_condition() {
        let p = cubic();
        // L(2(1−1e−6)) = (1 − 1e−6)/2
        let b = default_beta(&p, 1.0, 1.0, 1.0, 1e6, 1.0).unwrap();
        assert!(rel(b, 2.0 / (1.0 - 1e-6)) < 1e-9);
        let b = default_beta(&p, 1.0, 2.0, 1.0, 0.5, 3.0).unwrap();
        assert!(rel(b, 24.0) < 1e-14);
    }
}

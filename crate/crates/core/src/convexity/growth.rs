use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Behaviour of the growth law at the origin.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GrowthKind {
    SuperlinearAtZero,
    LinearAtZero,
}

type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// User-supplied law, evaluated on s ≥ 0 only.
#[derive(Clone)]
pub struct CustomLaw {
    pub name: String,
    pub g: ScalarFn,
    pub g_prime: ScalarFn,
}

impl fmt::Debug for CustomLaw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CustomLaw({})", self.name)
    }
}

/// Closed-form growth laws near zero.
#[derive(Debug, Clone)]
pub enum GrowthLaw {
    /// s^p, p > 1
    Power { p: f64 },
    /// s^p ln^q(1/s)
    PowerLog { p: f64, q: f64 },
    /// e^{-1/s²}
    ExpInvSq,
    /// s / ln^p(1/s)
    LogWeak { p: f64 },
    /// e^{-ln^p(1/s)}, p > 2
    ExpLogPow { p: f64 },
    /// s
    Linear,
    Custom(CustomLaw),
}

impl GrowthLaw {
    /// ln g(s) for 0 < s < 1, computed without forming g so that laws with
    /// essential zeros at the origin do not underflow.
    fn ln_g(&self, s: f64) -> f64 {
        let l = (1.0 / s).ln();
        match self {
            GrowthLaw::Power { p } => p * s.ln(),
            GrowthLaw::PowerLog { p, q } => p * s.ln() + q * l.ln(),
            GrowthLaw::ExpInvSq => -1.0 / (s * s),
            GrowthLaw::LogWeak { p } => s.ln() - p * l.ln(),
            GrowthLaw::ExpLogPow { p } => -l.powf(*p),
            GrowthLaw::Linear => s.ln(),
            GrowthLaw::Custom(c) => (c.g)(s).ln(),
        }
    }

    /// Elasticity s·g'(s)/g(s) for 0 < s < 1.
    fn elasticity(&self, s: f64) -> f64 {
        let l = (1.0 / s).ln();
        match self {
            GrowthLaw::Power { p } => *p,
            GrowthLaw::PowerLog { p, q } => p - q / l,
            GrowthLaw::ExpInvSq => 2.0 / (s * s),
            GrowthLaw::LogWeak { p } => 1.0 + p / l,
            GrowthLaw::ExpLogPow { p } => p * l.powf(p - 1.0),
            GrowthLaw::Linear => 1.0,
            GrowthLaw::Custom(c) => s * (c.g_prime)(s) / (c.g)(s),
        }
    }

    fn derivative_at_zero(&self) -> f64 {
        match self {
            GrowthLaw::Linear => 1.0,
            GrowthLaw::Custom(c) => (c.g_prime)(0.0),
            _ => 0.0,
        }
    }

    /// Laws whose limsup of Λ_H at zero is known to equal 1 even though the
    /// decade sampling cannot see it.
    fn lambda_limsup_is_one(&self) -> bool {
        matches!(self, GrowthLaw::LogWeak { .. })
    }

    fn name(&self) -> &str {
        match self {
            GrowthLaw::Power { .. } => "power",
            GrowthLaw::PowerLog { .. } => "power_log",
            GrowthLaw::ExpInvSq => "exp_inv_sq",
            GrowthLaw::LogWeak { .. } => "log_weak",
            GrowthLaw::ExpLogPow { .. } => "exp_log_pow",
            GrowthLaw::Linear => "linear",
            GrowthLaw::Custom(c) => &c.name,
        }
    }

    fn params(&self) -> Vec<(String, f64)> {
        match self {
            GrowthLaw::Power { p } | GrowthLaw::LogWeak { p } | GrowthLaw::ExpLogPow { p } => {
                vec![("p".into(), *p)]
            }
            GrowthLaw::PowerLog { p, q } => vec![("p".into(), *p), ("q".into(), *q)],
            _ => Vec::new(),
        }
    }
}

/// Growth law `g` on [-1, 1] with its sector constants and convexity radius
/// `s0`. On |s| > s0 the law is continued by its tangent line so that `g`
/// stays increasing on the whole interval; only [0, s0] enters the convexity
/// construction.
#[derive(Debug, Clone)]
pub struct GrowthFunction {
    law: GrowthLaw,
    s0: f64,
    c1: f64,
    c2: f64,
}

impl GrowthFunction {
    pub fn new(law: GrowthLaw, s0: f64, c1: f64, c2: f64) -> Result<Self> {
        if !(s0 > 0.0 && s0 <= 1.0) {
            return Err(Error::InvalidGrowth(format!("s0 = {s0} must lie in (0, 1]")));
        }
        if !(c1 > 0.0 && c2 > 0.0) {
            return Err(Error::InvalidGrowth("sector constants must be positive".into()));
        }
        let g = Self { law, s0, c1, c2 };
        g.validate()?;
        Ok(g)
    }

    /// Law with the largest admissible `s0` from a geometric search and unit
    /// sector constants.
    pub fn with_default_s0(law: GrowthLaw) -> Result<Self> {
        let s0 = default_s0(&law)?;
        Self::new(law, s0, 1.0, 1.0)
    }

    pub fn power(p: f64) -> Result<Self> {
        if p <= 1.0 {
            return Err(Error::InvalidGrowth(format!("power law needs p > 1, got {p}")));
        }
        Self::new(GrowthLaw::Power { p }, 1.0, 1.0, 1.0)
    }

    pub fn linear() -> Result<Self> {
        Self::new(GrowthLaw::Linear, 1.0, 1.0, 1.0)
    }

    pub fn power_log(p: f64, q: f64) -> Result<Self> {
        if p <= 1.0 || q < 0.0 {
            return Err(Error::InvalidGrowth(format!("power_log needs p > 1, q ≥ 0, got p={p}, q={q}")));
        }
        Self::with_default_s0(GrowthLaw::PowerLog { p, q })
    }

    pub fn exp_inv_sq() -> Result<Self> {
        Self::with_default_s0(GrowthLaw::ExpInvSq)
    }

    pub fn log_weak(p: f64) -> Result<Self> {
        if p <= 0.0 {
            return Err(Error::InvalidGrowth(format!("log_weak needs p > 0, got {p}")));
        }
        Self::with_default_s0(GrowthLaw::LogWeak { p })
    }

    pub fn exp_log_pow(p: f64) -> Result<Self> {
        if p <= 2.0 {
            return Err(Error::InvalidGrowth(format!("exp_log_pow needs p > 2, got {p}")));
        }
        Self::with_default_s0(GrowthLaw::ExpLogPow { p })
    }

    /// Catalog lookup by name; missing parameters fall back to the usual
    /// representative values.
    pub fn from_name(name: &str, p: Option<f64>, q: Option<f64>) -> Result<Self> {
        match name {
            "power" => Self::power(p.unwrap_or(3.0)),
            "power_log" => Self::power_log(p.unwrap_or(3.0), q.unwrap_or(2.0)),
            "exp_inv_sq" => Self::exp_inv_sq(),
            "log_weak" => Self::log_weak(p.unwrap_or(1.0)),
            "exp_log_pow" => Self::exp_log_pow(p.unwrap_or(3.0)),
            "linear" => Self::linear(),
            other => Err(Error::InvalidGrowth(format!("unknown growth law `{other}`"))),
        }
    }

    pub fn custom<G, D>(name: &str, g: G, g_prime: D, s0: f64) -> Result<Self>
    where
        G: Fn(f64) -> f64 + Send + Sync + 'static,
        D: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        let law = GrowthLaw::Custom(CustomLaw {
            name: name.to_string(),
            g: Arc::new(g),
            g_prime: Arc::new(g_prime),
        });
        Self::new(law, s0, 1.0, 1.0)
    }

    pub fn with_sector(mut self, c1: f64, c2: f64) -> Self {
        self.c1 = c1;
        self.c2 = c2;
        self
    }

    pub fn law(&self) -> &GrowthLaw {
        &self.law
    }

    pub fn name(&self) -> &str {
        self.law.name()
    }

    pub fn params(&self) -> Vec<(String, f64)> {
        self.law.params()
    }

    pub fn s0(&self) -> f64 {
        self.s0
    }

    pub fn c1(&self) -> f64 {
        self.c1
    }

    pub fn c2(&self) -> f64 {
        self.c2
    }

    pub fn kind(&self) -> GrowthKind {
        if self.law.derivative_at_zero() > 0.0 {
            GrowthKind::LinearAtZero
        } else {
            GrowthKind::SuperlinearAtZero
        }
    }

    pub(crate) fn lambda_limsup_is_one(&self) -> bool {
        self.law.lambda_limsup_is_one()
    }

    /// ln g(s) for 0 < s ≤ s0.
    pub(crate) fn ln_g_pos(&self, s: f64) -> f64 {
        if s >= 1.0 {
            // only reachable for s0 = 1, where all catalog laws equal 1 or s^p
            return self.raw_g(s).ln();
        }
        self.law.ln_g(s)
    }

    /// s·g'(s)/g(s) for 0 < s ≤ s0.
    pub(crate) fn elasticity_pos(&self, s: f64) -> f64 {
        if s >= 1.0 {
            return s * self.raw_g_prime(s) / self.raw_g(s);
        }
        self.law.elasticity(s)
    }

    pub(crate) fn g_prime_at_zero(&self) -> f64 {
        self.law.derivative_at_zero()
    }

    fn raw_g(&self, s: f64) -> f64 {
        match &self.law {
            GrowthLaw::Power { p } => s.powf(*p),
            GrowthLaw::Linear => s,
            GrowthLaw::Custom(c) => (c.g)(s),
            _ if s <= 0.0 => 0.0,
            law => law.ln_g(s).exp(),
        }
    }

    fn raw_g_prime(&self, s: f64) -> f64 {
        match &self.law {
            GrowthLaw::Power { p } => p * s.powf(p - 1.0),
            GrowthLaw::Linear => 1.0,
            GrowthLaw::Custom(c) => (c.g_prime)(s),
            _ if s <= 0.0 => 0.0,
            law => law.elasticity(s) * law.ln_g(s).exp() / s,
        }
    }

    /// Odd extension of the law, continued linearly beyond s0.
    pub fn g(&self, s: f64) -> f64 {
        let a = s.abs();
        let v = if a <= self.s0 {
            self.raw_g(a)
        } else {
            self.raw_g(self.s0) + self.raw_g_prime(self.s0) * (a - self.s0)
        };
        v.copysign(s)
    }

    pub fn g_prime(&self, s: f64) -> f64 {
        let a = s.abs();
        if a <= self.s0 {
            self.raw_g_prime(a)
        } else {
            self.raw_g_prime(self.s0)
        }
    }

    /// Inverse of `g` on y ≥ 0 (bisection on [0, s0], closed form on the
    /// linear continuation).
    pub fn g_inverse(&self, y: f64) -> f64 {
        let a = y.abs();
        let gs0 = self.raw_g(self.s0);
        let v = if a >= gs0 {
            self.s0 + (a - gs0) / self.raw_g_prime(self.s0)
        } else {
            let (mut lo, mut hi) = (0.0, self.s0);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if self.raw_g(mid) < a {
                    lo = mid;
                } else {
                    hi = mid;
                }
                if hi - lo <= 1e-15 * hi {
                    break;
                }
            }
            0.5 * (lo + hi)
        };
        v.copysign(y)
    }

    /// Checks the sampled invariants of a growth function.
    pub fn validate(&self) -> Result<()> {
        if self.g(0.0) != 0.0 {
            return Err(Error::InvalidGrowth("g(0) must vanish".into()));
        }
        let grid: Vec<f64> = (1..=2000).map(|i| i as f64 / 2000.0).collect();
        let mut prev = 0.0;
        for &s in &grid {
            let v = self.g(s);
            if !v.is_finite() {
                return Err(Error::InvalidGrowth(format!("g({s}) is not finite")));
            }
            if v < prev || (v == prev && prev > 0.0) {
                return Err(Error::InvalidGrowth(format!("g is not strictly increasing near s = {s}")));
            }
            if self.g(-s) != -v {
                return Err(Error::InvalidGrowth(format!("g is not odd at s = {s}")));
            }
            prev = v;
        }
        if self.raw_g(self.s0) > 1.0 + 1e-15 {
            return Err(Error::InvalidGrowth(format!(
                "g(s0) = {} exceeds 1",
                self.raw_g(self.s0)
            )));
        }
        match self.kind() {
            GrowthKind::LinearAtZero => {}
            GrowthKind::SuperlinearAtZero => {
                // s·g'(s)²/g(s) = elasticity²·g(s)/s must decrease towards zero
                let vals: Vec<f64> = (1..=8)
                    .map(|k| {
                        let s = self.s0.min(0.999) * 10f64.powi(-k);
                        let e = self.elasticity_pos(s);
                        e * e * (self.ln_g_pos(s) - s.ln()).exp()
                    })
                    .collect();
                let decreasing = vals.windows(2).all(|w| w[1] <= w[0]);
                if !decreasing || !(vals[7] < vals[0] || vals[0] == 0.0) {
                    return Err(Error::InvalidGrowth(format!(
                        "superlinear law does not satisfy s·g'(s)²/g(s) → 0 (samples {vals:?})"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Largest s0 from the sequence 1, 0.95, 0.95·0.9, … for which g is
/// increasing on (0, s0], g(s0) ≤ 1 and H(s) = √s·g(√s) is convex on [0, s0²].
fn default_s0(law: &GrowthLaw) -> Result<f64> {
    if matches!(law, GrowthLaw::Power { .. } | GrowthLaw::Linear) {
        return Ok(1.0);
    }
    let mut s0 = 0.95;
    for _ in 0..80 {
        if s0_admissible(law, s0) {
            return Ok(s0);
        }
        s0 *= 0.9;
    }
    Err(Error::InvalidGrowth(format!("no admissible s0 found for `{}`", law.name())))
}

fn s0_admissible(law: &GrowthLaw, s0: f64) -> bool {
    if law.ln_g(s0) > 0.0 {
        return false;
    }
    // H'(x) ∝ g(σ)/σ·(1+e(σ)) with σ = √x must increase, and e(σ) ≥ 1 keeps Λ_H ≤ 1
    let samples = sample_grid(s0);
    let mut prev = f64::NEG_INFINITY;
    for &sigma in &samples {
        let e = law.elasticity(sigma);
        if !(e >= 1.0) {
            return false;
        }
        let ln_hp = law.ln_g(sigma) - sigma.ln() + (1.0 + e).ln();
        if ln_hp.is_finite() && ln_hp < prev - 1e-12 * prev.abs().max(1.0) {
            return false;
        }
        if ln_hp.is_finite() {
            prev = ln_hp;
        }
    }
    true
}

/// Log-spaced plus uniform samples of (0, s].
pub(crate) fn sample_grid(s: f64) -> Vec<f64> {
    let mut v: Vec<f64> = (0..=120).map(|k| s * 10f64.powf(-8.0 + k as f64 / 15.0)).collect();
    v.extend((1..=400).map(|i| s * i as f64 / 400.0));
    v.retain(|x| *x > 0.0 && *x <= s);
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v.dedup();
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn power_law_values_and_oddness() {
        let g = GrowthFunction::power(3.0).unwrap();
        assert_eq!(g.g(0.5), 0.125);
        assert_eq!(g.g(-0.5), -0.125);
        assert_eq!(g.g_prime(0.5), 0.75);
        assert_eq!(g.kind(), GrowthKind::SuperlinearAtZero);
    }

    #[test]
    fn linear_law_is_linear_at_zero() {
        let g = GrowthFunction::linear().unwrap();
        assert_eq!(g.kind(), GrowthKind::LinearAtZero);
        assert_eq!(g.g(0.3), 0.3);
    }

    #[test]
    fn catalog_laws_get_admissible_radius() {
        for name in ["power_log", "exp_inv_sq", "log_weak", "exp_log_pow"] {
            let g = GrowthFunction::from_name(name, None, None).unwrap();
            assert!(g.s0() > 0.0 && g.s0() <= 1.0, "{name}: s0 {}", g.s0());
            assert!(g.g(g.s0()) <= 1.0);
        }
    }

    #[test]
    fn exp_inv_sq_radius_respects_convexity_bound() {
        // H(x) = √x e^{-1/x} is convex exactly for x < 2√2 - 2
        let g = GrowthFunction::exp_inv_sq().unwrap();
        assert!(g.s0() * g.s0() < 2.0 * 2f64.sqrt() - 2.0);
    }

    #[test]
    fn continuation_past_s0_is_c1() {
        let g = GrowthFunction::power_log(3.0, 2.0).unwrap();
        let s0 = g.s0();
        let h = 1e-7;
        let left = (g.g(s0) - g.g(s0 - h)) / h;
        let right = (g.g(s0 + h) - g.g(s0)) / h;
        assert!((left - right).abs() < 1e-5 * left.abs().max(1e-12));
    }

    #[test]
    fn inverse_round_trip() {
        let g = GrowthFunction::power(3.0).unwrap();
        for y in [1e-6, 0.01, 0.5, 1.0, 2.0] {
            assert!((g.g(g.g_inverse(y)) - y).abs() < 1e-12 * y.max(1.0));
        }
    }

    #[test]
    fn non_monotone_custom_law_rejected() {
        let r = GrowthFunction::custom("bump", |s: f64| s * s * (1.2 - s), |s: f64| 2.4 * s - 3.0 * s * s, 1.0);
        assert!(matches!(r, Err(Error::InvalidGrowth(_))));
    }

    #[test]
    fn unknown_name_rejected() {
        assert!(GrowthFunction::from_name("cubic", None, None).is_err());
    }
}

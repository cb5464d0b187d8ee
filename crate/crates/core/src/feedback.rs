//! Damping nonlinearities ρ: local maps applied nodewise and the nonlocal
//! family ρ(f)(x) = φ₁(f(x))·φ₂(∫χf).

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use crate::convexity::GrowthFunction;
use crate::error::{Error, Result};
use crate::rng::Lcg64;

type LocalFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

/// Nodewise damping law ρ(x, s).
#[derive(Clone)]
pub enum LocalRho {
    /// sign(s)·min(|s|^p, |s|)
    Power { p: f64 },
    Linear,
    /// g(s) on |s| ≤ 1 continued by g(1)·s beyond
    Growth(GrowthFunction),
    Custom(LocalFn),
}

impl fmt::Debug for LocalRho {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LocalRho::Power { p } => write!(f, "Power {{ p: {p} }}"),
            LocalRho::Linear => write!(f, "Linear"),
            LocalRho::Growth(g) => write!(f, "Growth({})", g.name()),
            LocalRho::Custom(_) => write!(f, "Custom"),
        }
    }
}

impl LocalRho {
    fn eval(&self, x: f64, s: f64) -> f64 {
        match self {
            LocalRho::Power { p } => {
                let a = s.abs();
                if a <= 1.0 {
                    a.powf(*p).copysign(s)
                } else {
                    s
                }
            }
            LocalRho::Linear => s,
            LocalRho::Growth(g) => {
                if s.abs() <= 1.0 {
                    g.g(s)
                } else {
                    g.g(1.0) * s
                }
            }
            LocalRho::Custom(f) => f(x, s),
        }
    }

    fn derivative(&self, x: f64, s: f64) -> f64 {
        match self {
            LocalRho::Power { p } => {
                let a = s.abs();
                if a <= 1.0 {
                    p * a.powf(p - 1.0)
                } else {
                    1.0
                }
            }
            LocalRho::Linear => 1.0,
            LocalRho::Growth(g) => {
                if s.abs() <= 1.0 {
                    g.g_prime(s)
                } else {
                    g.g(1.0)
                }
            }
            LocalRho::Custom(f) => {
                let h = 1e-7 * (1.0 + s.abs());
                (f(x, s + h) - f(x, s)) / h
            }
        }
    }
}

/// Kernel of the nonlocal functional.
#[derive(Debug, Clone, PartialEq)]
pub enum Chi {
    /// χ = 1/|Ω|
    Uniform,
    Values(Vec<f64>),
}

#[derive(Debug, Clone)]
pub enum FeedbackKind {
    Local(LocalRho),
    /// φ₁(s) = s − sin s, φ₂(τ) = π + arctan τ, τ = Δx·Σχⱼfⱼ
    NonlocalSineArctan { chi: Chi, dx: Option<f64> },
}

/// Jacobian of a feedback map in the form diag(d) + u·wᵀ.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackJacobian {
    pub diag: Vec<f64>,
    pub rank_one: Option<(Vec<f64>, Vec<f64>)>,
}

/// Result of sampling the sign and sector conditions.
#[derive(Debug, Clone, PartialEq)]
pub struct SectorReport {
    pub sign_ok: bool,
    pub sector_ok: bool,
    /// Smallest relative margin over all checks; negative means violated.
    pub worst_margin: f64,
    pub worst_at: f64,
}

#[derive(Debug, Clone)]
pub struct FeedbackMap {
    name: String,
    kind: FeedbackKind,
    growth: GrowthFunction,
    c1: f64,
    c2: f64,
    lipschitz_bound: f64,
}

/// (1 − sin 1): the minimum of (s − sin s)/s³ on (0, 1] and of (s − sin s)/s on [1, ∞).
fn sine_floor() -> f64 {
    1.0 - 1f64.sin()
}

/// max over s ≥ 1 of (s − sin s)/s, attained where tan s = s.
const SINE_CEIL: f64 = 1.2172336282112217;

impl FeedbackMap {
    pub fn catalog(name: &str, p: Option<f64>, q: Option<f64>) -> Result<Self> {
        match name {
            "power" | "power_linear_tail" => {
                let p = p.unwrap_or(3.0);
                let growth = GrowthFunction::power(p).map_err(|e| Error::config("feedback.p", e.to_string()))?;
                Ok(Self {
                    name: name.to_string(),
                    kind: FeedbackKind::Local(LocalRho::Power { p }),
                    growth,
                    c1: 1.0,
                    c2: 1.0,
                    lipschitz_bound: p,
                })
            }
            "linear" => Ok(Self {
                name: name.to_string(),
                kind: FeedbackKind::Local(LocalRho::Linear),
                growth: GrowthFunction::linear()?,
                c1: 1.0,
                c2: 1.0,
                lipschitz_bound: 1.0,
            }),
            "power_log" | "exp_inv_sq" | "log_weak" | "exp_log_pow" => {
                let growth = GrowthFunction::from_name(name, p, q).map_err(|e| Error::config("feedback.p", e.to_string()))?;
                Ok(Self::from_growth(name, growth))
            }
            "nonlocal_sine_arctan" => Ok(Self::nonlocal_sine_arctan(Chi::Uniform)),
            other => Err(Error::config("feedback.name", format!("unknown feedback `{other}`"))),
        }
    }

    /// ρ = g on [−1, 1] with a linear tail; sector constants measured on a grid.
    pub fn from_growth(name: &str, growth: GrowthFunction) -> Self {
        let g1 = growth.g(1.0);
        let mut c2: f64 = g1.max(1.0);
        let mut lip: f64 = g1;
        for i in 1..=2000 {
            let s = i as f64 / 2000.0;
            c2 = c2.max(growth.g(s) / growth.g_inverse(s));
            lip = lip.max(growth.g_prime(s));
        }
        Self {
            name: name.to_string(),
            kind: FeedbackKind::Local(LocalRho::Growth(growth.clone())),
            growth,
            c1: g1.min(1.0),
            c2,
            lipschitz_bound: lip * 1.01,
        }
    }

    pub fn nonlocal_sine_arctan(chi: Chi) -> Self {
        let c1 = 0.5 * PI * sine_floor() * (1.0 - 1e-12);
        let c2 = 1.5 * PI * SINE_CEIL * (1.0 + 1e-9);
        Self {
            name: "nonlocal_sine_arctan".into(),
            kind: FeedbackKind::NonlocalSineArctan { chi, dx: None },
            growth: GrowthFunction::power(3.0).expect("cubic law is valid"),
            c1,
            c2,
            lipschitz_bound: 3.0 * PI + 2.0,
        }
    }

    /// Local map from an arbitrary closure, for experiments and tests.
    pub fn custom<F>(name: &str, rho: F, growth: GrowthFunction, lipschitz_bound: f64) -> Self
    where
        F: Fn(f64, f64) -> f64 + Send + Sync + 'static,
    {
        Self {
            name: name.into(),
            kind: FeedbackKind::Local(LocalRho::Custom(Arc::new(rho))),
            c1: growth.c1(),
            c2: growth.c2(),
            growth,
            lipschitz_bound,
        }
    }

    /// Fixes the grid weight and kernel of a nonlocal map; a no-op for local maps.
    pub fn bind_grid(&self, n: usize, dx: f64, length: f64) -> Self {
        let mut out = self.clone();
        if let FeedbackKind::NonlocalSineArctan { chi, .. } = &self.kind {
            let values = match chi {
                Chi::Uniform => vec![1.0 / length; n],
                Chi::Values(v) => v.clone(),
            };
            let chi_norm = (dx * values.iter().map(|c| c * c).sum::<f64>()).sqrt();
            out.lipschitz_bound = 3.0 * PI + 2.0 * chi_norm;
            out.kind = FeedbackKind::NonlocalSineArctan {
                chi: Chi::Values(values),
                dx: Some(dx),
            };
        }
        out
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kind(&self) -> &FeedbackKind {
        &self.kind
    }

    pub fn growth(&self) -> &GrowthFunction {
        &self.growth
    }

    pub fn c1(&self) -> f64 {
        self.c1
    }

    pub fn c2(&self) -> f64 {
        self.c2
    }

    pub fn lipschitz_bound(&self) -> f64 {
        self.lipschitz_bound
    }

    pub fn is_local(&self) -> bool {
        matches!(self.kind, FeedbackKind::Local(_))
    }

    pub fn is_linear(&self) -> bool {
        matches!(self.kind, FeedbackKind::Local(LocalRho::Linear))
    }

    /// Scalar law ρ(x, s) of a local map.
    pub fn rho(&self, x: f64, s: f64) -> Option<f64> {
        match &self.kind {
            FeedbackKind::Local(r) => Some(r.eval(x, s)),
            _ => None,
        }
    }

    /// ∂ρ/∂s of a local map.
    pub fn rho_prime(&self, x: f64, s: f64) -> Option<f64> {
        match &self.kind {
            FeedbackKind::Local(r) => Some(r.derivative(x, s)),
            _ => None,
        }
    }

    fn nonlocal_parts(chi: &Chi, dx: Option<f64>, positions: &[f64], values: &[f64]) -> (f64, f64) {
        let n = values.len();
        let dx = dx.unwrap_or_else(|| if n > 1 { positions[1] - positions[0] } else { 1.0 });
        let tau = match chi {
            Chi::Uniform => values.iter().sum::<f64>() / n as f64,
            Chi::Values(c) => dx * c.iter().zip(values).map(|(a, b)| a * b).sum::<f64>(),
        };
        (tau, dx)
    }

    pub fn apply(&self, positions: &[f64], values: &[f64]) -> Result<Vec<f64>> {
        if positions.len() != values.len() {
            return Err(Error::Shape(format!(
                "{} positions but {} values",
                positions.len(),
                values.len()
            )));
        }
        let mut out = vec![0.0; values.len()];
        self.apply_into(positions, values, &mut out)?;
        Ok(out)
    }

    pub fn apply_into(&self, positions: &[f64], values: &[f64], out: &mut [f64]) -> Result<()> {
        if out.len() != values.len() {
            return Err(Error::Shape("output length differs from input".into()));
        }
        match &self.kind {
            FeedbackKind::Local(r) => {
                for ((o, &x), &v) in out.iter_mut().zip(positions).zip(values) {
                    *o = r.eval(x, v);
                }
            }
            FeedbackKind::NonlocalSineArctan { chi, dx } => {
                if let Chi::Values(c) = chi {
                    if c.len() != values.len() {
                        return Err(Error::Shape(format!("kernel has {} entries, grid has {}", c.len(), values.len())));
                    }
                }
                let (tau, _) = Self::nonlocal_parts(chi, *dx, positions, values);
                let phi2 = PI + tau.atan();
                for (o, &v) in out.iter_mut().zip(values) {
                    *o = (v - v.sin()) * phi2;
                }
            }
        }
        Ok(())
    }

    pub fn jacobian(&self, positions: &[f64], values: &[f64]) -> Result<FeedbackJacobian> {
        if positions.len() != values.len() {
            return Err(Error::Shape("positions and values differ in length".into()));
        }
        match &self.kind {
            FeedbackKind::Local(r) => Ok(FeedbackJacobian {
                diag: positions.iter().zip(values).map(|(&x, &v)| r.derivative(x, v)).collect(),
                rank_one: None,
            }),
            FeedbackKind::NonlocalSineArctan { chi, dx } => {
                let n = values.len();
                let (tau, dxv) = Self::nonlocal_parts(chi, *dx, positions, values);
                let phi2 = PI + tau.atan();
                let dphi2 = 1.0 / (1.0 + tau * tau);
                let diag = values.iter().map(|v| (1.0 - v.cos()) * phi2).collect();
                let u = values.iter().map(|v| (v - v.sin()) * dphi2).collect();
                let w = match chi {
                    Chi::Uniform => vec![1.0 / n as f64; n],
                    Chi::Values(c) => c.iter().map(|ci| dxv * ci).collect(),
                };
                Ok(FeedbackJacobian {
                    diag,
                    rank_one: Some((u, w)),
                })
            }
        }
    }

    /// Samples the sign condition sρ(s) ≥ 0 and the sector bounds
    /// c₁g(|s|) ≤ |ρ| ≤ c₂g⁻¹(|s|) (|s| ≤ 1), c₁|s| ≤ |ρ| ≤ c₂|s| (|s| ≥ 1).
    pub fn verify_sector(&self, samples: usize) -> Result<SectorReport> {
        if samples < 100 {
            return Err(Error::Precondition(format!("verify_sector needs ≥ 100 samples, got {samples}")));
        }
        let mut grid: Vec<f64> = (0..samples)
            .map(|k| 10f64.powf(-6.0 + 7.0 * k as f64 / (samples - 1) as f64))
            .collect();
        grid.extend((0..samples).map(|k| -10.0 + 20.0 * k as f64 / (samples - 1) as f64));
        let positions: Vec<f64> = (0..5).map(|i| (i as f64 + 0.5) / 5.0).collect();

        let mut report = SectorReport {
            sign_ok: true,
            sector_ok: true,
            worst_margin: f64::INFINITY,
            worst_at: f64::NAN,
        };
        let record = |sign: bool, margin: f64, s: f64, report: &mut SectorReport| {
            if margin < -1e-12 {
                if sign {
                    report.sign_ok = false;
                } else {
                    report.sector_ok = false;
                }
            }
            if margin < report.worst_margin {
                report.worst_margin = margin;
                report.worst_at = s;
            }
        };

        let mut pairs: Vec<(f64, f64)> = Vec::new();
        match &self.kind {
            FeedbackKind::Local(r) => {
                for &x in &positions {
                    for &s in &grid {
                        pairs.push((s, r.eval(x, s)));
                        pairs.push((-s, r.eval(x, -s)));
                    }
                }
            }
            FeedbackKind::NonlocalSineArctan { .. } => {
                // random grid functions, then pointwise checks
                let mut rng = Lcg64::new(7);
                let n = 64;
                let xs: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
                let bound = self.bind_grid(n, 1.0 / n as f64, 1.0);
                for k in 0..samples.max(100) / 10 {
                    let amp = grid[k % grid.len()].abs().max(1e-3);
                    let f = rng.vector(n, -amp, amp);
                    let rho = bound.apply(&xs, &f)?;
                    pairs.extend(f.iter().copied().zip(rho));
                }
                // φ₁ must be odd and nonnegative on s ≥ 0
                for &s in &grid {
                    let phi1 = s - s.sin();
                    let opposite = -s - (-s).sin();
                    record(true, if s == 0.0 { 0.0 } else { phi1 * s / (s * s) }, s, &mut report);
                    record(true, -(phi1 + opposite).abs(), s, &mut report);
                }
            }
        }

        for (s, rho) in pairs {
            if s == 0.0 {
                record(true, -rho.abs(), s, &mut report);
                continue;
            }
            record(true, s * rho / (s * s), s, &mut report);
            let a = s.abs();
            let r = rho.abs();
            let (lo, hi) = if a <= 1.0 {
                (self.c1 * self.growth.g(a), self.c2 * self.growth.g_inverse(a))
            } else {
                (self.c1 * a, self.c2 * a)
            };
            if lo > 0.0 {
                record(false, (r - lo) / lo, s, &mut report);
            }
            record(false, (hi - r) / hi, s, &mut report);
        }
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn positions(n: usize) -> Vec<f64> {
        (0..n).map(|i| i as f64 / n as f64).collect()
    }

    #[test]
    fn power_values() {
        let f = FeedbackMap::catalog("power", Some(3.0), None).unwrap();
        let out = f.apply(&[0.0, 0.1], &[0.5, -0.2]).unwrap();
        assert!((out[0] - 0.125).abs() < 1e-16);
        assert!((out[1] + 0.008).abs() < 1e-16);
        assert_eq!(f.rho(0.0, 2.5), Some(2.5));
        assert_eq!(f.rho(0.0, -3.0), Some(-3.0));
    }

    #[test]
    fn linear_is_identity() {
        let f = FeedbackMap::catalog("linear", None, None).unwrap();
        let v = [0.3, -1.7, 12.0];
        assert_eq!(f.apply(&positions(3), &v).unwrap(), v.to_vec());
    }

    #[test]
    fn nonlocal_vanishes_at_zero() {
        let f = FeedbackMap::catalog("nonlocal_sine_arctan", None, None).unwrap();
        assert_eq!(f.apply(&positions(8), &[0.0; 8]).unwrap(), vec![0.0; 8]);
    }

    #[test]
    fn nonlocal_uses_mean_of_f() {
        let f = FeedbackMap::catalog("nonlocal_sine_arctan", None, None).unwrap().bind_grid(4, 0.25, 1.0);
        let v = [0.2, 0.4, -0.1, 0.3];
        let tau: f64 = v.iter().sum::<f64>() / 4.0;
        let out = f.apply(&positions(4), &v).unwrap();
        for (o, s) in out.iter().zip(v) {
            assert!((o - (s - s.sin()) * (PI + tau.atan())).abs() < 1e-15);
        }
    }

    #[test]
    fn shape_mismatch() {
        let f = FeedbackMap::catalog("linear", None, None).unwrap();
        assert!(matches!(f.apply(&[0.0], &[1.0, 2.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn unknown_name_names_the_field() {
        let e = FeedbackMap::catalog("quartic", None, None).unwrap_err();
        assert!(e.to_string().contains("feedback.name"));
    }

    #[test]
    fn catalog_maps_satisfy_sector_conditions() {
        for name in [
            "power",
            "linear",
            "nonlocal_sine_arctan",
            "power_log",
            "exp_inv_sq",
            "log_weak",
            "exp_log_pow",
        ] {
            let f = FeedbackMap::catalog(name, None, None).unwrap();
            let r = f.verify_sector(400).unwrap();
            assert!(r.sign_ok && r.sector_ok, "{name}: {r:?}");
        }
    }

    #[test]
    fn broken_map_fails_sign_check() {
        let f = FeedbackMap::custom("flip", |_, s| -s, GrowthFunction::linear().unwrap(), 1.0);
        let r = f.verify_sector(100).unwrap();
        assert!(!r.sign_ok);
        assert!(r.worst_margin < 0.0);
    }

    #[test]
    fn analytic_jacobians_match_differences() {
        let xs = positions(6);
        let v = [0.3, -0.8, 1.5, -2.0, 0.05, 0.9];
        for name in ["power", "nonlocal_sine_arctan", "exp_inv_sq"] {
            let f = FeedbackMap::catalog(name, None, None).unwrap().bind_grid(6, 1.0 / 6.0, 1.0);
            let j = f.jacobian(&xs, &v).unwrap();
            let base = f.apply(&xs, &v).unwrap();
            for k in 0..6 {
                let h = 1e-7;
                let mut vp = v;
                vp[k] += h;
                let col = f.apply(&xs, &vp).unwrap();
                for i in 0..6 {
                    let mut analytic = if i == k { j.diag[i] } else { 0.0 };
                    if let Some((u, w)) = &j.rank_one {
                        analytic += u[i] * w[k];
                    }
                    let fd = (col[i] - base[i]) / h;
                    assert!((fd - analytic).abs() < 1e-5 * (1.0 + analytic.abs()), "{name} ({i},{k}): {fd} vs {analytic}");
                }
            }
        }
    }

    #[test]
    fn sine_ceiling_constant() {
        let m = (0..200000)
            .map(|i| 1.0 + i as f64 * 1e-4)
            .map(|s| (s - s.sin()) / s)
            .fold(0.0, f64::max);
        assert!(m <= SINE_CEIL + 1e-12 && m > SINE_CEIL - 1e-8);
    }
}

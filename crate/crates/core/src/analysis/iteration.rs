//! The one-step window recursion `E_{k+1} ≤ E_k(1 − ρ_T L⁻¹(E_k/β))` and the
//! closed bound it implies, evaluated on measured window energies.

use crate::convexity::ConvexityProfile;
use crate::error::{Error, Result};
use crate::quadrature::adaptive_simpson;

#[derive(Debug, Clone, PartialEq)]
pub struct IterationWindow {
    pub p: usize,
    /// measured E(pT)
    pub energy: f64,
    /// (1/ρ_T)·min_ℓ K_r⁻¹(ρ_T(p − ℓ))/(ℓ + 1), a bound on M(E_p/β)
    pub m_bound: f64,
    /// β·M⁻¹(m_bound), when the bound is below M(s0²)
    pub energy_bound: Option<f64>,
    pub consistent: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationReport {
    pub beta: f64,
    pub rho_t: f64,
    pub rho_calibrated: bool,
    pub windows: Vec<IterationWindow>,
}

impl IterationReport {
    pub fn all_consistent(&self) -> bool {
        self.windows.iter().all(|w| w.consistent)
    }
}

/// M(x) = x·L⁻¹(x)
fn m_of(profile: &ConvexityProfile, x: f64) -> Result<f64> {
    Ok(x * profile.inv_l(x)?)
}

/// K_r on a geometric grid below r, refined by bisection inside a cell.
struct KInverse<'a> {
    profile: &'a ConvexityProfile,
    /// (τ, K_r(τ)) with τ decreasing from r
    table: Vec<(f64, f64)>,
}

const CELL: f64 = 0.917_004_043_204_671_2; // 2^{-1/8}

impl<'a> KInverse<'a> {
    fn new(profile: &'a ConvexityProfile, r: f64) -> Self {
        Self {
            profile,
            table: vec![(r, 0.0)],
        }
    }

    /// ∫_a^b dy/M(y) in the variable ln y.
    fn integral(&self, a: f64, b: f64) -> Result<f64> {
        adaptive_simpson(
            |s| {
                let y = s.exp();
                Ok(y / m_of(self.profile, y)?)
            },
            a.ln(),
            b.ln(),
            1e-12,
        )
    }

    fn eval(&mut self, sigma: f64) -> Result<f64> {
        if sigma <= 0.0 {
            return Ok(self.table[0].0);
        }
        while self.table.last().expect("nonempty").1 < sigma {
            let (tau, k) = *self.table.last().expect("nonempty");
            if self.table.len() > 20_000 {
                return Err(Error::Range(format!("K_r stays below {sigma} down to τ = {tau:e}")));
            }
            let next = tau * CELL;
            let k_next = k + self.integral(next, tau)?;
            self.table.push((next, k_next));
        }
        let i = self.table.partition_point(|&(_, k)| k < sigma);
        let (hi_tau, hi_k) = self.table[i - 1];
        let (mut lo, mut hi) = (self.table[i].0, hi_tau);
        for _ in 0..200 {
            let mid = (lo * hi).sqrt();
            let k = hi_k + self.integral(mid, hi_tau)?;
            if k > sigma {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 1e-13 * hi {
                break;
            }
        }
        Ok((lo * hi).sqrt())
    }
}

/// M⁻¹(y) by bisection on [0, s0²).
fn m_inverse(profile: &ConvexityProfile, y: f64) -> Result<Option<f64>> {
    let top = profile.s0sq() * (1.0 - 1e-12);
    if y >= m_of(profile, top)? {
        return Ok(None);
    }
    let (mut lo, mut hi) = (0.0, top);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if m_of(profile, mid)? < y {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * hi {
            break;
        }
    }
    Ok(Some(0.5 * (lo + hi)))
}

/// Evaluates the recursion bound on window energies `E(0), E(T), E(2T), …`.
/// Without `rho_t`, ρ_T is chosen so the first window is tight.
pub fn discrete_iteration(profile: &ConvexityProfile, window_energies: &[f64], rho_t: Option<f64>) -> Result<IterationReport> {
    if window_energies.len() < 2 {
        return Err(Error::InsufficientData("need at least two window energies".into()));
    }
    let beta = profile.beta();
    let e: Vec<f64> = window_energies.iter().map(|x| x / beta).collect();
    if e[0] >= profile.s0sq() {
        return Err(Error::Range(format!(
            "E(0)/β = {} must stay below s0² = {}; increase beta",
            e[0],
            profile.s0sq()
        )));
    }
    let (rho, calibrated) = match rho_t {
        Some(r) if r > 0.0 && r <= 1.0 => (r, false),
        Some(r) => return Err(Error::Domain(format!("ρ_T must lie in (0, 1], got {r}"))),
        None => {
            let r = (e[0] - e[1]) / m_of(profile, e[0])?;
            if !(r > 0.0) {
                return Err(Error::Domain("first window shows no decay; cannot calibrate ρ_T".into()));
            }
            (r.min(1.0), true)
        }
    };
    let mut kinv = KInverse::new(profile, e[0]);
    let p_max = e.len() - 1;
    let ks: Vec<f64> = (0..=p_max).map(|j| kinv.eval(rho * j as f64)).collect::<Result<_>>()?;
    let mut windows = Vec::with_capacity(e.len());
    for p in 0..=p_max {
        let m_bound = (0..=p).map(|l| ks[p - l] / (l + 1) as f64).fold(f64::INFINITY, f64::min) / rho;
        let energy_bound = m_inverse(profile, m_bound)?.map(|x| beta * x);
        let consistent = m_of(profile, e[p].min(profile.s0sq() * (1.0 - 1e-12)))? <= m_bound * (1.0 + 1e-9);
        windows.push(IterationWindow {
            p,
            energy: window_energies[p],
            m_bound,
            energy_bound,
            consistent,
        });
    }
    Ok(IterationReport {
        beta,
        rho_t: rho,
        rho_calibrated: calibrated,
        windows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::convexity::GrowthFunction;

    fn cubic() -> ConvexityProfile {
        // L⁻¹(x) = 4x, M(x) = 4x², K_r(τ) = (1/τ − 1/r)/4
        ConvexityProfile::new(GrowthFunction::power(3.0).unwrap(), 1.0).unwrap()
    }

    #[test]
    fn k_inverse_matches_closed_form() {
        let p = cubic();
        let r = 0.3;
        let mut k = KInverse::new(&p, r);
        for sigma in [0.0, 0.1, 1.0, 10.0, 200.0] {
            let exact = 1.0 / (4.0 * sigma + 1.0 / r);
            let got = k.eval(sigma).unwrap();
            assert!((got - exact).abs() < 1e-9 * exact, "σ={sigma}: {got} vs {exact}");
        }
    }

    #[test]
    fn exact_recursion_is_consistent() {
        let p = cubic();
        let rho = 0.2;
        let mut e = vec![0.2];
        for _ in 0..15 {
            let x = *e.last().unwrap();
            e.push(x - rho * 4.0 * x * x);
        }
        let rep = discrete_iteration(&p, &e, None).unwrap();
        assert!((rep.rho_t - rho).abs() < 1e-12);
        assert!(rep.all_consistent());
        assert!(rep.windows[15].energy_bound.unwrap() >= e[15]);
    }

    #[test]
    fn rejects_energies_beyond_the_convexity_range() {
        assert!(matches!(discrete_iteration(&cubic(), &[2.0, 1.0], None), Err(Error::Range(_))));
        assert!(discrete_iteration(&cubic(), &[0.1, 0.1], None).is_err());
    }
}

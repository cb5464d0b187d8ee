use super::profile::{ConvexityProfile, DecayMode};
use crate::error::{Error, Result};

/// Which discretization's observability constant feeds γ₂.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvelopeVariant {
    /// γ₂ = C_T/(T³‖B^{1/2}‖⁴ + T)
    Continuous,
    /// γ₂ = C_T/(T(T²‖B^{1/2}‖⁴ + 1))
    Space,
    /// γ₂ = C_T/(T(1 + e^{2T‖B‖}·max(1, T‖B‖)))
    Time,
    /// same constant as `Time`
    Full,
}

impl EnvelopeVariant {
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "continuous" => Some(Self::Continuous),
            "space" => Some(Self::Space),
            "time" => Some(Self::Time),
            "full" => Some(Self::Full),
            _ => None,
        }
    }

    fn gamma2(self, c_t: f64, t: f64, norm_b: f64) -> f64 {
        // ‖B^{1/2}‖⁴ = ‖B‖²
        match self {
            Self::Continuous => c_t / (t.powi(3) * norm_b * norm_b + t),
            Self::Space => c_t / (t * (t * t * norm_b * norm_b + 1.0)),
            Self::Time | Self::Full => c_t / (t * (1.0 + (2.0 * t * norm_b).exp() * (t * norm_b).max(1.0))),
        }
    }
}

/// Upper envelope for the energy decay, with all proportionality constants
/// collected into `prefactor`.
#[derive(Debug, Clone)]
pub struct DecayEnvelope {
    profile: ConvexityProfile,
    pub e0: f64,
    pub t_obs: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub gamma3: f64,
    pub prefactor: f64,
    pub mode: DecayMode,
}

impl DecayEnvelope {
    pub fn new(
        profile: &ConvexityProfile,
        e0: f64,
        t_obs: f64,
        c_t: f64,
        norm_b: f64,
        prefactor: f64,
        variant: EnvelopeVariant,
    ) -> Result<Self> {
        for (name, v) in [("E0", e0), ("T_obs", t_obs), ("C_T", c_t), ("normB", norm_b), ("prefactor", prefactor)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Domain(format!("{name} must be positive and finite, got {v}")));
            }
        }
        if profile.growth().lambda_limsup_is_one() {
            return Err(Error::Unsupported(format!(
                "envelope for `{}` (limsup Λ_H = 1) has no supported evaluation",
                profile.growth().name()
            )));
        }
        let gamma2 = variant.gamma2(c_t, t_obs, norm_b);
        Ok(Self {
            profile: profile.clone(),
            e0,
            t_obs,
            gamma1: norm_b / gamma2,
            gamma2,
            gamma3: 1.0,
            prefactor,
            mode: profile.mode(),
        })
    }

    pub fn profile(&self) -> &ConvexityProfile {
        &self.profile
    }

    pub fn with_prefactor(&self, prefactor: f64) -> Self {
        let mut e = self.clone();
        e.prefactor = prefactor;
        e
    }

    /// Earliest time at which the envelope is defined.
    pub fn onset(&self) -> f64 {
        match self.mode {
            DecayMode::General => 1.0 / (self.profile.hp_at_s0sq() * self.gamma2),
            DecayMode::Simplified => f64::MIN_POSITIVE,
            DecayMode::Exponential => 0.0,
        }
    }

    /// Envelope value at `t`, or `None` before the onset.
    pub fn eval(&self, t: f64) -> Result<Option<f64>> {
        let scale = self.prefactor * self.gamma1.max(self.e0);
        match self.mode {
            DecayMode::Exponential => {
                if t < 0.0 {
                    return Ok(None);
                }
                Ok(Some(scale * (-self.gamma2 * t).exp()))
            }
            DecayMode::Simplified => {
                if t <= 0.0 {
                    return Ok(None);
                }
                Ok(Some(scale * self.t_obs * self.profile.inv_h_prime(self.gamma3 / t)))
            }
            DecayMode::General => {
                let x = self.gamma2 * t;
                if x < 1.0 / self.profile.hp_at_s0sq() {
                    return Ok(None);
                }
                let s = self.profile.inv_psi(x)?;
                Ok(Some(scale * self.t_obs * self.profile.l(1.0 / s)?))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::convexity::GrowthFunction;

    #[test]
    fn cubic_simplified_envelope_is_inverse_time() {
        let p = ConvexityProfile::new(GrowthFunction::power(3.0).unwrap(), 4.0).unwrap();
        let env = DecayEnvelope::new(&p, 1.0, 1.0, 1.0, 1.0, 1.0, EnvelopeVariant::Continuous).unwrap();
        assert_eq!(env.mode, DecayMode::Simplified);
        // γ₂ = 1/2, γ₁ = 2, scale = 2; (H')⁻¹(1/t) = 1/(2t) once 1/t ≤ 2
        for t in [1.0, 10.0, 100.0] {
            let v = env.eval(t).unwrap().unwrap();
            assert!((v - 2.0 / (2.0 * t)).abs() < 1e-10 / t);
        }
    }

    #[test]
    fn exponential_envelope() {
        let p = ConvexityProfile::new(GrowthFunction::linear().unwrap(), 1.0).unwrap();
        let env = DecayEnvelope::new(&p, 3.0, 1.0, 2.0, 1.0, 1.0, EnvelopeVariant::Space).unwrap();
        assert!((env.gamma2 - 1.0).abs() < 1e-15);
        let v = env.eval(2.0).unwrap().unwrap();
        assert!((v - 3.0 * (-2.0f64).exp()).abs() < 1e-14);
    }

    #[test]
    fn general_mode_for_cubic_matches_closed_form() {
        // L(1/ψ⁻¹(x)) with ψ(s) = 2s − 1/2 and L(r) = r/4 for r ≤ 2
        let p = ConvexityProfile::new(GrowthFunction::power(3.0).unwrap(), 4.0).unwrap();
        let mut env = DecayEnvelope::new(&p, 1.0, 1.0, 1.0, 1.0, 1.0, EnvelopeVariant::Continuous).unwrap();
        env.mode = DecayMode::General;
        assert!(env.eval(0.5).unwrap().is_none());
        for t in [2.0, 20.0, 200.0] {
            let x = env.gamma2 * t;
            let s = (x + 0.5) / 2.0;
            let expected = 2.0 * 1.0 * (1.0 / s) / 4.0;
            let v = env.eval(t).unwrap().unwrap();
            assert!((v - expected).abs() < 1e-8 * expected, "{v} vs {expected}");
        }
    }

    #[test]
    fn time_variant_constant() {
        let p = ConvexityProfile::new(GrowthFunction::linear().unwrap(), 1.0).unwrap();
        let env = DecayEnvelope::new(&p, 1.0, 1.0, 1.0, 1.0, 1.0, EnvelopeVariant::Time).unwrap();
        let expected = 1.0 / (1.0 + 2f64.exp());
        assert!((env.gamma2 - expected).abs() < 1e-15);
    }

    #[test]
    fn log_weak_envelope_is_unsupported() {
        let p = ConvexityProfile::new(GrowthFunction::log_weak(1.0).unwrap(), 1.0).unwrap();
        let r = DecayEnvelope::new(&p, 1.0, 1.0, 1.0, 1.0, 1.0, EnvelopeVariant::Continuous);
        assert!(matches!(r, Err(Error::Unsupported(_))));
    }

    #[test]
    fn rejects_non_positive_arguments() {
        let p = ConvexityProfile::new(GrowthFunction::power(3.0).unwrap(), 4.0).unwrap();
        assert!(DecayEnvelope::new(&p, 1.0, 1.0, 0.0, 1.0, 1.0, EnvelopeVariant::Continuous).is_err());
    }
}

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::integrate::{simulate_linear_companions, Companions, Stepper, TimeScheme, TimeViscosity};
use crate::models::SemiDiscreteSystem;

/// One inequality `lhs ≤ rhs` evaluated on simulated traces.
#[derive(Debug, Clone, PartialEq)]
pub struct AuditEntry {
    pub name: &'static str,
    pub lhs: f64,
    pub rhs: f64,
    /// multiplicative constant already folded into `rhs`
    pub constant: f64,
    pub slack: f64,
    pub holds: bool,
}

impl AuditEntry {
    fn new(name: &'static str, lhs: f64, rhs: f64, constant: f64) -> Self {
        let slack = rhs - lhs;
        Self {
            name,
            lhs,
            rhs,
            constant,
            slack,
            holds: lhs <= rhs * (1.0 + 1e-12),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuditReport {
    pub t_obs: f64,
    pub norm_b: f64,
    pub entries: Vec<AuditEntry>,
}

impl AuditReport {
    pub fn all_hold(&self) -> bool {
        self.entries.iter().all(|e| e.holds)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "T_obs = {}", self.t_obs);
        let _ = writeln!(s, "norm_B = {:.12e}", self.norm_b);
        for e in &self.entries {
            let _ = writeln!(
                s,
                "{}: lhs = {:.12e}, rhs = {:.12e}, constant = {:.6e}, slack = {:.12e}, {}",
                e.name,
                e.lhs,
                e.rhs,
                e.constant,
                e.slack,
                if e.holds { "holds" } else { "VIOLATED" }
            );
        }
        s
    }
}

fn require_snapshots(c: &Companions) -> Result<()> {
    for (name, t) in [
        ("nonlinear", &c.nonlinear),
        ("linear damped", &c.linear_damped),
        ("conservative", &c.conservative),
    ] {
        if !t.has_full_snapshots() {
            return Err(Error::Audit(format!("{name} trajectory lacks per-step snapshots")));
        }
    }
    Ok(())
}

fn state<'a>(t: &'a crate::integrate::TrajectoryRecord, k: usize) -> &'a [f64] {
    &t.snapshots[k].1
}

/// ⟨Bx, x⟩_M
fn observed(sys: &SemiDiscreteSystem, x: &[f64]) -> f64 {
    sys.inner(&sys.b.matvec(x), x)
}

/// dx^σ⟨Vx, x⟩_M
fn space_visc(sys: &SemiDiscreteSystem, x: &[f64]) -> f64 {
    if !sys.has_viscosity() {
        return 0.0;
    }
    sys.visc_scale() * sys.inner(&sys.v.matvec(x), x)
}

/// ⟨BF(x), F(x)⟩_M
fn observed_feedback(sys: &SemiDiscreteSystem, x: &[f64]) -> Result<f64> {
    let f = sys.feedback.apply(x)?;
    Ok(sys.inner(&sys.b.matvec(&f), &f))
}

/// Semi-discrete comparisons, with time integrals as left Riemann sums over
/// the recorded states. `companions` must come from a run with the space
/// viscosity in the stage and no time viscosity.
pub fn audit_space(sys: &SemiDiscreteSystem, companions: &Companions, t_obs: f64) -> Result<Vec<AuditEntry>> {
    require_snapshots(companions)?;
    let u = &companions.nonlinear;
    let z = &companions.linear_damped;
    let phi = &companions.conservative;
    let n = u.steps();
    let dt = u.dt;
    let norm_b = sys.norm_b();
    let (mut z_obs, mut u_rhs, mut phi_obs) = (0.0, 0.0, 0.0);
    for k in 0..n {
        let (uk, zk, pk) = (state(u, k), state(z, k), state(phi, k));
        z_obs += dt * (observed(sys, zk) + space_visc(sys, zk));
        u_rhs += dt * (observed(sys, uk) + observed_feedback(sys, uk)? + 2.0 * space_visc(sys, uk));
        phi_obs += dt * (observed(sys, pk) + space_visc(sys, pk));
    }
    let t2 = t_obs * t_obs;
    let k_t = 1.0 + t2 + t2 * norm_b + t2 * norm_b * norm_b;
    Ok(vec![
        AuditEntry::new("space_nonlinear_vs_linear", z_obs, 2.0 * u_rhs, 2.0),
        AuditEntry::new("space_linear_vs_conservative", phi_obs, k_t * z_obs, k_t),
    ])
}

/// Time-discrete comparisons as exact step sums. `stepper` supplies the
/// time viscosity 𝒱_Δt used by the run.
pub fn audit_time(sys: &SemiDiscreteSystem, stepper: &Stepper, companions: &Companions, t_obs: f64) -> Result<Vec<AuditEntry>> {
    require_snapshots(companions)?;
    let u = &companions.nonlinear;
    let z = &companions.linear_damped;
    let phi = &companions.conservative;
    let n = u.steps();
    let dt = u.dt;
    let norm_b = sys.norm_b();
    // (⟨𝒱x, x⟩_M, ‖𝒱x‖²_M)
    let visc = |x: &[f64]| match stepper.apply_time_viscosity(x) {
        Some(w) => (sys.inner(&w, x), sys.norm_sq(&w)),
        None => (0.0, 0.0),
    };
    let (mut z_side, mut u_side, mut phi_side) = (0.0, 0.0, 0.0);
    for k in 0..n {
        let (zm, um, pm) = (&z.midpoints[k], &u.midpoints[k], &phi.midpoints[k]);
        let (zv, zv2) = visc(state(z, k + 1));
        let (uv, uv2) = visc(state(u, k + 1));
        let (pv, pv2) = visc(state(phi, k + 1));
        z_side += observed(sys, zm) + zv + 0.5 * dt * zv2;
        u_side += 2.0 * observed(sys, um) + 2.0 * observed_feedback(sys, um)? + 2.0 * uv + dt * uv2;
        phi_side += 0.5 * observed(sys, pm) + pv + 0.5 * dt * pv2;
    }
    let w = 4.0 * t_obs * t_obs + 1.0;
    let k_t = (1.0 + w * w * norm_b * norm_b).max(2.0);
    Ok(vec![
        AuditEntry::new("time_nonlinear_vs_linear", z_side, u_side, 1.0),
        AuditEntry::new("time_linear_vs_conservative", phi_side, k_t * z_side, k_t),
    ])
}

/// Runs the companion trajectories twice (space-viscous without time
/// viscosity, and time-viscous without space viscosity) and evaluates all
/// four comparison inequalities with their explicit constants.
pub fn lemma_audit(sys: &SemiDiscreteSystem, scheme: &TimeScheme, u0: &[f64], t_obs: f64) -> Result<AuditReport> {
    let space_scheme = scheme
        .with_time_viscosity(TimeViscosity::None)
        .with_space_viscosity(sys.has_viscosity());
    let c = simulate_linear_companions(sys, &space_scheme, u0, t_obs)?;
    let mut entries = audit_space(sys, &c, t_obs)?;

    let time_scheme = scheme.with_space_viscosity(false);
    let c = simulate_linear_companions(sys, &time_scheme, u0, t_obs)?;
    let stepper = Stepper::new(sys, &time_scheme)?;
    entries.extend(audit_time(sys, &stepper, &c, t_obs)?);
    Ok(AuditReport {
        t_obs,
        norm_b: sys.norm_b(),
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feedback::FeedbackMap;
    use crate::integrate::{simulate, RecordOptions};
    use crate::models::{build_model, initial_state, ModelKind, ModelSpec, Probe};

    fn wave(n: usize, feedback: &str) -> SemiDiscreteSystem {
        let f = FeedbackMap::catalog(feedback, Some(3.0), None).unwrap();
        build_model(&ModelSpec::new(ModelKind::Wave1d, n, f)).unwrap()
    }

    #[test]
    fn cubic_wave_audit_holds() {
        let sys = wave(24, "power");
        let scheme = TimeScheme::default_for(&sys);
        let u0 = initial_state(&sys, Probe::Smooth, 1.5, 0);
        let rep = lemma_audit(&sys, &scheme, &u0, 1.0).unwrap();
        assert_eq!(rep.entries.len(), 4);
        assert!(rep.all_hold(), "{}", rep.to_text());
        assert!(rep.entries.iter().all(|e| e.slack > 0.0));
    }

    #[test]
    fn zero_data_gives_equalities() {
        let sys = wave(12, "power");
        let scheme = TimeScheme::default_for(&sys);
        let rep = lemma_audit(&sys, &scheme, &vec![0.0; sys.n], 0.5).unwrap();
        for e in &rep.entries {
            assert_eq!((e.lhs, e.rhs), (0.0, 0.0));
            assert!(e.holds);
        }
    }

    #[test]
    fn linear_feedback_makes_the_first_comparison_trivial() {
        let sys = wave(12, "linear");
        let scheme = TimeScheme::default_for(&sys);
        let u0 = initial_state(&sys, Probe::Random, 1.0, 9);
        let rep = lemma_audit(&sys, &scheme, &u0, 0.5).unwrap();
        // u ≡ z: the right side is 2·(2·observed + 2·viscous) ≥ 4·lhs
        let e = &rep.entries[0];
        assert!(e.rhs >= 4.0 * e.lhs * (1.0 - 1e-12));
        assert!(rep.all_hold());
    }

    #[test]
    fn missing_snapshots_is_an_audit_error() {
        let sys = wave(8, "power");
        let scheme = TimeScheme::default_for(&sys);
        let u0 = initial_state(&sys, Probe::Smooth, 1.0, 0);
        let rec = simulate(&sys, &scheme, &u0, 0.1, RecordOptions::default()).unwrap();
        let c = Companions {
            nonlinear: rec.clone(),
            linear_damped: rec.clone(),
            conservative: rec,
        };
        assert!(matches!(audit_space(&sys, &c, 0.1), Err(Error::Audit(_))));
    }
}

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::integrate::{Damping, Stepper, TimeScheme, TimeViscosity};
use crate::linalg::min_generalized_eigenvalue;
use crate::models::SemiDiscreteSystem;

/// Observability constant of the conservative flow, normalized against the
/// initial energy ½‖φ⁰‖²_M.
#[derive(Debug, Clone, PartialEq)]
pub struct GramianReport {
    pub t_obs: f64,
    pub c_t: f64,
    pub include_viscosity: bool,
    pub n: usize,
    pub method: String,
    pub steps: usize,
    /// ‖G − Gᵀ‖_max / ‖G‖_max
    pub symmetry_error: f64,
    /// smallest eigenvalue of G relative to ‖G‖_max
    pub min_eigenvalue_rel: f64,
}

const MAX_DIM: usize = 512;

/// Rows C with CᵀC = S for a symmetric PSD S, dropping the null space.
fn psd_factor(s: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (s + s.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let top = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
    let keep: Vec<usize> = (0..eig.eigenvalues.len())
        .filter(|&i| eig.eigenvalues[i] > 1e-14 * top)
        .collect();
    let d = s.nrows();
    let mut c = DMatrix::zeros(keep.len(), d);
    for (r, &i) in keep.iter().enumerate() {
        let w = eig.eigenvalues[i].sqrt();
        for j in 0..d {
            c[(r, j)] = w * eig.eigenvectors[(j, i)];
        }
    }
    c
}

fn columns_to_matrix(cols: &[Vec<f64>]) -> DMatrix<f64> {
    let d = cols.first().map_or(0, Vec::len);
    DMatrix::from_fn(d, cols.len(), |i, j| cols[j][i])
}

/// Builds the observability Gramian of the time-discrete conservative flow
/// (midpoint stage plus the scheme's time-viscosity post-step) and returns
/// its smallest eigenvalue against ½M.
///
/// The observed quantity is ‖B^{1/2}φ̄‖²_M, plus dx^σ‖V^{1/2}φ̄‖²_M and the
/// time-viscosity sums Δt‖𝒱^{1/2}φ‖² + Δt²‖𝒱φ‖² when `include_viscosity` is set.
pub fn gramian_constant(
    sys: &SemiDiscreteSystem,
    t_obs: f64,
    include_viscosity: bool,
    scheme: &TimeScheme,
    exec: &Executor,
) -> Result<GramianReport> {
    let d = sys.n;
    if d > MAX_DIM {
        return Err(Error::Size(format!("Gramian needs a dense eigensolve; dimension {d} > {MAX_DIM}")));
    }
    if !(t_obs > 0.0) {
        return Err(Error::Domain(format!("T_obs must be positive, got {t_obs}")));
    }
    let dt = scheme.dt;
    let stepper = Stepper::with_options(sys, scheme, Damping::Off, false)?;
    let steps = scheme.steps_for(t_obs);
    let m = sys.m.to_dense();

    let mut observed = m.clone() * sys.b.to_dense();
    if include_viscosity && sys.has_viscosity() {
        observed += m.clone() * sys.v.to_dense() * sys.visc_scale();
    }
    let c = psd_factor(&observed);
    let time_visc = include_viscosity && scheme.time_viscosity != TimeViscosity::None;
    let r = if time_visc {
        Some(match &sys.energy_factor {
            Some(f) => f.to_dense(),
            None => m
                .clone()
                .cholesky()
                .ok_or_else(|| Error::Numerical("metric is not positive definite".into()))?
                .l()
                .transpose(),
        })
    } else {
        None
    };

    let mut g = DMatrix::<f64>::zeros(d, d);
    let mut cols: Vec<Vec<f64>> = (0..d)
        .map(|j| {
            let mut e = vec![0.0; d];
            e[j] = 1.0;
            e
        })
        .collect();
    for k in 0..steps {
        let outs = exec.map(d, |j| stepper.step(k, &cols[j]));
        let mut mids = Vec::with_capacity(d);
        let mut next = Vec::with_capacity(d);
        for o in outs {
            let o = o?;
            mids.push(o.midpoint);
            next.push(o.u_next);
        }
        let y = &c * columns_to_matrix(&mids);
        g += y.transpose() * &y * dt;
        if let Some(r) = &r {
            let w: Vec<Vec<f64>> = exec.map(d, |j| stepper.apply_time_viscosity(&next[j]).unwrap_or_else(|| vec![0.0; d]));
            let rw = r * columns_to_matrix(&w);
            let ru = r * columns_to_matrix(&next);
            let p = rw.transpose() * &ru;
            g += (&p + p.transpose()) * (0.5 * dt);
            g += rw.transpose() * &rw * (dt * dt);
        }
        cols = next;
    }

    let scale = g.amax();
    let symmetry_error = if scale > 0.0 { (&g - g.transpose()).amax() / scale } else { 0.0 };
    if symmetry_error > 1e-10 {
        return Err(Error::Numerical(format!("Gramian asymmetry {symmetry_error:e}")));
    }
    let gs = (&g + g.transpose()) * 0.5;
    let min_eig = SymmetricEigen::new(gs.clone()).eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    let min_eigenvalue_rel = if scale > 0.0 { min_eig / scale } else { 0.0 };
    if min_eigenvalue_rel < -1e-10 {
        return Err(Error::Numerical(format!("Gramian is not PSD (relative λ_min = {min_eigenvalue_rel:e})")));
    }
    let lambda = min_generalized_eigenvalue(&gs, &(m * 0.5))?;
    // round-off may leave a PSD Gramian with a tiny negative eigenvalue
    let c_t = lambda.max(0.0);
    let method = if time_visc {
        format!("midpoint/{}+time_viscosity_sums", scheme.time_viscosity.name())
    } else {
        format!("midpoint/{}", scheme.time_viscosity.name())
    };
    Ok(GramianReport {
        t_obs,
        c_t,
        include_viscosity,
        n: d,
        method,
        steps,
        symmetry_error,
        min_eigenvalue_rel,
    })
}

use crate::convexity::DecayEnvelope;
use crate::error::{Error, Result};
use crate::integrate::TrajectoryRecord;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HalfTime {
    Reached(f64),
    NotReached { final_ratio: f64 },
}

impl HalfTime {
    pub fn time(&self) -> Option<f64> {
        match self {
            HalfTime::Reached(t) => Some(*t),
            HalfTime::NotReached { .. } => None,
        }
    }
}

/// First time with E(t) ≤ q·E(0), interpolated linearly between samples.
pub fn half_time(traj: &TrajectoryRecord, q: f64) -> Result<HalfTime> {
    half_time_series(&traj.times, &traj.energies, q)
}

pub fn half_time_series(times: &[f64], energies: &[f64], q: f64) -> Result<HalfTime> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::Domain(format!("q must lie in (0, 1), got {q}")));
    }
    if times.len() != energies.len() || times.is_empty() {
        return Err(Error::Shape("times and energies must be nonempty and of equal length".into()));
    }
    let e0 = energies[0];
    let target = q * e0;
    for k in 1..energies.len() {
        if energies[k] <= target {
            let (t0, t1, a, b) = (times[k - 1], times[k], energies[k - 1], energies[k]);
            let t = if a == b { t1 } else { t0 + (t1 - t0) * (a - target) / (a - b) };
            return Ok(HalfTime::Reached(t));
        }
    }
    let last = *energies.last().expect("nonempty");
    Ok(HalfTime::NotReached {
        final_ratio: if e0 > 0.0 { last / e0 } else { f64::NAN },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitModel {
    /// ln E = a + rate·t
    Exponential,
    /// ln E = a + exponent·ln t
    Algebraic,
}

impl FitModel {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "exponential" => Some(Self::Exponential),
            "algebraic" => Some(Self::Algebraic),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecayFit {
    /// rate (exponential) or exponent (algebraic)
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub points: usize,
}

pub fn fit_decay(traj: &TrajectoryRecord, window: (f64, f64), model: FitModel) -> Result<DecayFit> {
    fit_decay_series(&traj.times, &traj.energies, window, model)
}

/// Least-squares line through the log-transformed samples inside `window`.
pub fn fit_decay_series(times: &[f64], energies: &[f64], window: (f64, f64), model: FitModel) -> Result<DecayFit> {
    let (ta, tb) = window;
    if !(ta < tb) {
        return Err(Error::Domain(format!("empty fit window [{ta}, {tb}]")));
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (&t, &e) in times.iter().zip(energies) {
        if t < ta || t > tb {
            continue;
        }
        if !(e > 0.0) {
            return Err(Error::Domain(format!("energy {e} at t = {t} is not positive")));
        }
        let x = match model {
            FitModel::Exponential => t,
            FitModel::Algebraic => {
                if t <= 0.0 {
                    continue;
                }
                t.ln()
            }
        };
        xs.push(x);
        ys.push(e.ln());
    }
    let n = xs.len();
    if n < 10 {
        return Err(Error::InsufficientData(format!("{n} points in [{ta}, {tb}], need at least 10")));
    }
    let nf = n as f64;
    let mx = xs.iter().sum::<f64>() / nf;
    let my = ys.iter().sum::<f64>() / nf;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(&ys) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 {
        return Err(Error::InsufficientData("fit window has a single abscissa".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| {
            let r = y - intercept - slope * x;
            r * r
        })
        .sum();
    let r_squared = if syy > 0.0 { 1.0 - ss_res / syy } else { 1.0 };
    Ok(DecayFit {
        slope,
        intercept,
        r_squared,
        points: n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvelopeCheck {
    /// max E(t)/envelope(t) with the envelope's own prefactor
    pub max_ratio: f64,
    /// max E(t)/envelope(t) with prefactor 1
    pub calibrated_prefactor: f64,
    /// first sampled time, after moving the requested onset past the
    /// envelope's own onset if needed
    pub onset: f64,
    pub onset_adjusted: bool,
    pub samples: usize,
}

const MAX_SAMPLES: usize = 4000;

/// Compares a trajectory against an envelope from `onset` on.
pub fn envelope_check(traj: &TrajectoryRecord, env: &DecayEnvelope, onset: f64) -> Result<EnvelopeCheck> {
    let start = onset.max(env.onset());
    let onset_adjusted = start > onset;
    let unit = env.with_prefactor(1.0);
    let idx: Vec<usize> = (0..traj.times.len()).filter(|&k| traj.times[k] >= start && traj.times[k] > 0.0).collect();
    if idx.is_empty() {
        return Err(Error::Domain(format!(
            "envelope is undefined before t = {start}, past the trajectory horizon"
        )));
    }
    let stride = idx.len().div_ceil(MAX_SAMPLES);
    let mut best = 0.0f64;
    let mut samples = 0;
    let mut first = f64::NAN;
    for (j, &k) in idx.iter().enumerate() {
        // always include the final sample
        if j % stride != 0 && j + 1 != idx.len() {
            continue;
        }
        let t = traj.times[k];
        let Some(v) = unit.eval(t)? else { continue };
        if first.is_nan() {
            first = t;
        }
        best = best.max(traj.energies[k] / v);
        samples += 1;
    }
    if samples == 0 {
        return Err(Error::Domain("envelope undefined on the whole window".into()));
    }
    Ok(EnvelopeCheck {
        max_ratio: best / env.prefactor,
        calibrated_prefactor: best,
        onset: first,
        onset_adjusted,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::convexity::{ConvexityProfile, EnvelopeVariant, GrowthFunction};

    fn series(f: impl Fn(f64) -> f64, t_end: f64, n: usize) -> (Vec<f64>, Vec<f64>) {
        let t: Vec<f64> = (0..=n).map(|k| t_end * k as f64 / n as f64).collect();
        let e = t.iter().map(|&x| f(x)).collect();
        (t, e)
    }

    #[test]
    fn half_time_of_exponential() {
        let (t, e) = series(|x| 2.0 * (-x).exp(), 2.0, 20000);
        let h = half_time_series(&t, &e, 0.5).unwrap().time().unwrap();
        assert!((h - 2f64.ln()).abs() < 1e-8);
    }

    #[test]
    fn half_time_of_rational_decay_hits_grid_point() {
        let (t, e) = series(|x| 3.0 / (1.0 + x), 4.0, 400);
        let h = half_time_series(&t, &e, 0.5).unwrap().time().unwrap();
        assert!((h - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_energy_never_halves() {
        let (t, e) = series(|_| 1.0, 1.0, 10);
        assert_eq!(half_time_series(&t, &e, 0.9).unwrap(), HalfTime::NotReached { final_ratio: 1.0 });
        assert!(half_time_series(&t, &e, 1.0).is_err());
    }

    #[test]
    fn exponential_fit_is_exact() {
        let (t, e) = series(|x| 3.0 * (-0.7 * x).exp(), 10.0, 100);
        let f = fit_decay_series(&t, &e, (0.0, 10.0), FitModel::Exponential).unwrap();
        assert!((f.slope + 0.7).abs() < 1e-10);
        assert!((f.r_squared - 1.0).abs() < 1e-12);
    }

    #[test]
    fn algebraic_fit_is_exact() {
        let (t, e) = series(|x| 5.0 / x.max(1e-300), 100.0, 1000);
        let f = fit_decay_series(&t, &e, (10.0, 100.0), FitModel::Algebraic).unwrap();
        assert!((f.slope + 1.0).abs() < 1e-10);
        assert!((f.intercept - 5f64.ln()).abs() < 1e-8);
    }

    #[test]
    fn fit_needs_ten_points() {
        let (t, e) = series(|x| (-x).exp(), 1.0, 100);
        assert!(matches!(
            fit_decay_series(&t, &e, (0.0, 0.05), FitModel::Exponential),
            Err(Error::InsufficientData(_))
        ));
    }

    fn record(times: Vec<f64>, energies: Vec<f64>) -> TrajectoryRecord {
        TrajectoryRecord {
            times,
            energies,
            ..Default::default()
        }
    }

    #[test]
    fn trajectory_on_its_envelope_has_unit_ratio() {
        let p = ConvexityProfile::new(GrowthFunction::linear().unwrap(), 1.0).unwrap();
        let env = DecayEnvelope::new(&p, 2.0, 1.0, 1.0, 1.0, 1.0, EnvelopeVariant::Space).unwrap();
        let (t, _) = series(|x| x, 5.0, 500);
        let e: Vec<f64> = t.iter().map(|&x| env.eval(x).unwrap().unwrap()).collect();
        let c = envelope_check(&record(t, e), &env, 0.0).unwrap();
        assert!((c.max_ratio - 1.0).abs() < 1e-12);
        assert!((c.calibrated_prefactor - 1.0).abs() < 1e-12);
    }

    #[test]
    fn calibrated_prefactor_scales_out() {
        let p = ConvexityProfile::new(GrowthFunction::linear().unwrap(), 1.0).unwrap();
        let env = DecayEnvelope::new(&p, 2.0, 1.0, 1.0, 1.0, 1.0, EnvelopeVariant::Space).unwrap();
        let (t, e) = series(|x| 0.5 * (-2.0 * x).exp(), 3.0, 300);
        let traj = record(t, e);
        let c = envelope_check(&traj, &env, 0.0).unwrap();
        let again = envelope_check(&traj, &env.with_prefactor(c.calibrated_prefactor), 0.0).unwrap();
        assert!((again.max_ratio - 1.0).abs() < 1e-12);
        // doubling γ₂ makes the tail ratio e^{γ₂t} larger
        let mut fast = env.clone();
        fast.gamma2 *= 2.0;
        let d = envelope_check(&traj, &fast, 0.0).unwrap();
        assert!(d.max_ratio > c.max_ratio);
    }
}

//! Implicit midpoint stage followed by a time-viscosity post-step, with
//! per-step energy bookkeeping.
//!
//! One step maps `u_k` to `u_{k+1}` through
//!
//! ```text
//! ũ − u_k + Δt·[A m + B F(m) + dx^σ V m] = 0,   m = (u_k + ũ)/2
//! (I + Δt·𝒱_Δt) u_{k+1} = ũ
//! ```
//!
//! and records the three dissipation contributions so that
//! `E_{k+1} − E_k + D_k` vanishes up to the stage-solver tolerance.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;
use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::linalg::{norm_inf, sherman_morrison, CsrMatrix, Factorization};
use crate::models::{FeedbackLayout, SemiDiscreteSystem};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimeViscosity {
    None,
    /// 𝒱_Δt = Δt²·A*A
    Squared,
    /// 𝒱_Δt = (I + Δt²A*A)⁻¹·Δt²A*A
    BoundedSquared,
}

impl TimeViscosity {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(Self::None),
            "squared" => Some(Self::Squared),
            "bounded_squared" => Some(Self::BoundedSquared),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Squared => "squared",
            Self::BoundedSquared => "bounded_squared",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageMethod {
    Newton,
    FixedPoint,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageSolver {
    pub method: StageMethod,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for StageSolver {
    fn default() -> Self {
        Self {
            method: StageMethod::Newton,
            tol: 1e-12,
            max_iter: 50,
        }
    }
}

const RELAXATION: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeScheme {
    pub dt: f64,
    pub time_viscosity: TimeViscosity,
    pub stage: StageSolver,
    pub space_viscosity_in_stage: bool,
}

impl TimeScheme {
    pub fn new(dt: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::config("scheme.dt", format!("must be positive, got {dt}")));
        }
        Ok(Self {
            dt,
            time_viscosity: TimeViscosity::None,
            stage: StageSolver::default(),
            space_viscosity_in_stage: false,
        })
    }

    /// dt = dx/2 with both viscosities on.
    pub fn default_for(sys: &SemiDiscreteSystem) -> Self {
        Self {
            dt: sys.dx / 2.0,
            time_viscosity: TimeViscosity::Squared,
            stage: StageSolver::default(),
            space_viscosity_in_stage: true,
        }
    }

    pub fn with_time_viscosity(mut self, tv: TimeViscosity) -> Self {
        self.time_viscosity = tv;
        self
    }

    pub fn with_space_viscosity(mut self, on: bool) -> Self {
        self.space_viscosity_in_stage = on;
        self
    }

    pub fn with_stage(mut self, stage: StageSolver) -> Result<Self> {
        if !(stage.tol > 0.0) {
            return Err(Error::config("scheme.tol", "must be positive"));
        }
        if stage.max_iter == 0 {
            return Err(Error::config("scheme.max_iter", "must be at least 1"));
        }
        self.stage = stage;
        Ok(self)
    }

    /// Number of steps covering `[0, t_final]`.
    pub fn steps_for(&self, t_final: f64) -> usize {
        let r = t_final / self.dt;
        let nearest = r.round();
        if (r - nearest).abs() <= 1e-9 * r.max(1.0) {
            nearest as usize
        } else {
            r.ceil() as usize
        }
    }
}

/// How the damping term enters the stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Damping {
    /// B·F(m)
    Feedback,
    /// B·m
    Linear,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepDiagnostics {
    /// Δt⟨B·F(m), m⟩_M
    pub diss_damping: f64,
    /// Δt·dx^σ⟨V m, m⟩_M
    pub diss_space_visc: f64,
    /// Δt‖𝒱^{1/2}u⁺‖²_M + Δt²/2·‖𝒱u⁺‖²_M
    pub diss_time_visc: f64,
    pub iters: usize,
    pub stage_residual: f64,
    pub used_fallback: bool,
}

impl StepDiagnostics {
    pub fn total(&self) -> f64 {
        self.diss_damping + self.diss_space_visc + self.diss_time_visc
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub u_tilde: Vec<f64>,
    pub u_next: Vec<f64>,
    /// stage midpoint (u_k + ũ)/2
    pub midpoint: Vec<f64>,
    pub diag: StepDiagnostics,
}

enum PostStep {
    None,
    Squared { lhs: Factorization },
    Bounded { lhs: Factorization, one_plus_s: Factorization, s: CsrMatrix },
}

/// Cached operators for repeated steps of one system with one scheme.
pub struct Stepper<'a> {
    sys: &'a SemiDiscreteSystem,
    scheme: TimeScheme,
    damping: Damping,
    space_visc: bool,
    /// I + Δt/2·(A + dx^σV) (+ Δt/2·B for linear damping)
    lhs: CsrMatrix,
    /// I − Δt/2·(…) with the same terms
    rhs: CsrMatrix,
    lhs_fact: OnceLock<Factorization>,
    /// max row sum of |lhs|, sets the roundoff floor of the stage residual
    lhs_norm: f64,
    ordering: Vec<usize>,
    a2: Option<CsrMatrix>,
    post: PostStep,
}

impl<'a> Stepper<'a> {
    pub fn new(sys: &'a SemiDiscreteSystem, scheme: &TimeScheme) -> Result<Self> {
        Self::with_options(sys, scheme, Damping::Feedback, scheme.space_viscosity_in_stage)
    }

    pub fn with_options(sys: &'a SemiDiscreteSystem, scheme: &TimeScheme, damping: Damping, space_visc: bool) -> Result<Self> {
        let n = sys.n;
        let dt = scheme.dt;
        let damping = if damping == Damping::Feedback && sys.feedback.map.is_linear() {
            Damping::Linear
        } else {
            damping
        };
        let mut gen = sys.a.clone();
        if space_visc && sys.has_viscosity() {
            gen = gen.add(1.0, &sys.v, sys.visc_scale())?;
        }
        if damping == Damping::Linear {
            gen = gen.add(1.0, &sys.b, 1.0)?;
        }
        let id = CsrMatrix::identity(n);
        let lhs = id.add(1.0, &gen, 0.5 * dt)?;
        let rhs = id.add(1.0, &gen, -0.5 * dt)?;

        let pattern = lhs.add(1.0, &sys.b.matmul(&feedback_pattern(sys))?, 1.0)?;
        let ordering = crate::linalg::reverse_cuthill_mckee(&pattern);

        let needs_a2 = scheme.time_viscosity != TimeViscosity::None;
        let a2 = if needs_a2 { Some(sys.a.matmul(&sys.a)?) } else { None };
        let post = match (scheme.time_viscosity, &a2) {
            (TimeViscosity::Squared, Some(a2)) => PostStep::Squared {
                lhs: Factorization::new(&id.add(1.0, a2, -dt.powi(3))?)?,
            },
            (TimeViscosity::BoundedSquared, Some(a2)) => {
                let s = a2.scale(-dt * dt);
                PostStep::Bounded {
                    lhs: Factorization::new(&id.add(1.0, &s, 1.0 + dt)?)?,
                    one_plus_s: Factorization::new(&id.add(1.0, &s, 1.0)?)?,
                    s,
                }
            }
            _ => PostStep::None,
        };
        Ok(Self {
            sys,
            scheme: *scheme,
            damping,
            space_visc,
            lhs_norm: (0..lhs.nrows()).map(|i| lhs.row(i).map(|(_, v)| v.abs()).sum::<f64>()).fold(0.0, f64::max),
            lhs,
            rhs,
            lhs_fact: OnceLock::new(),
            ordering,
            a2,
            post,
        })
    }

    pub fn system(&self) -> &SemiDiscreteSystem {
        self.sys
    }

    pub fn scheme(&self) -> &TimeScheme {
        &self.scheme
    }

    pub fn damping(&self) -> Damping {
        self.damping
    }

    /// 𝒱_Δt·x, or `None` without time viscosity.
    pub fn apply_time_viscosity(&self, x: &[f64]) -> Option<Vec<f64>> {
        let dt = self.scheme.dt;
        match &self.post {
            PostStep::None => None,
            PostStep::Squared { .. } => {
                let a2x = self.a2.as_ref()?.matvec(x);
                Some(a2x.iter().map(|v| -dt * dt * v).collect())
            }
            PostStep::Bounded { one_plus_s, s, .. } => Some(one_plus_s.solve(&s.matvec(x))),
        }
    }

    fn lhs_factor(&self) -> Result<&Factorization> {
        if let Some(f) = self.lhs_fact.get() {
            return Ok(f);
        }
        let f = Factorization::with_ordering(&self.lhs, self.ordering.clone())?;
        Ok(self.lhs_fact.get_or_init(|| f))
    }

    /// Advances one step; `index` only labels errors.
    pub fn step(&self, index: usize, u: &[f64]) -> Result<StepOutput> {
        if u.len() != self.sys.n {
            return Err(Error::Shape(format!("state has length {}, system has {}", u.len(), self.sys.n)));
        }
        if u.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numerical(format!("non-finite state at step {index}")));
        }
        let dt = self.scheme.dt;
        let rhs0 = self.rhs.matvec(u);
        let (u_tilde, iters, stage_residual, used_fallback) = match self.damping {
            Damping::Linear | Damping::Off => (self.lhs_factor()?.solve(&rhs0), 1, 0.0, false),
            Damping::Feedback => self.solve_stage(index, u, &rhs0)?,
        };
        let midpoint: Vec<f64> = u.iter().zip(&u_tilde).map(|(a, b)| 0.5 * (a + b)).collect();

        let mut diag = StepDiagnostics {
            iters,
            stage_residual,
            used_fallback,
            ..Default::default()
        };
        match self.damping {
            Damping::Feedback => {
                let bf = self.sys.b.matvec(&self.sys.feedback.apply(&midpoint)?);
                diag.diss_damping = dt * self.sys.inner(&bf, &midpoint);
            }
            Damping::Linear => {
                let bm = self.sys.b.matvec(&midpoint);
                diag.diss_damping = dt * self.sys.inner(&bm, &midpoint);
            }
            Damping::Off => {}
        }
        if self.space_visc && self.sys.has_viscosity() {
            let vm = self.sys.v.matvec(&midpoint);
            diag.diss_space_visc = dt * self.sys.visc_scale() * self.sys.inner(&vm, &midpoint);
        }

        let u_next = match &self.post {
            PostStep::None => u_tilde.clone(),
            PostStep::Squared { lhs } => {
                let un = lhs.solve(&u_tilde);
                // ⟨𝒱u, u⟩ = Δt²‖Au‖², ‖𝒱u‖ = Δt²‖A²u‖
                let au = self.sys.a.matvec(&un);
                let a2u = self.a2.as_ref().expect("post-step operator").matvec(&un);
                diag.diss_time_visc = dt.powi(3) * self.sys.norm_sq(&au) + 0.5 * dt.powi(6) * self.sys.norm_sq(&a2u);
                un
            }
            PostStep::Bounded { lhs, one_plus_s, s } => {
                let rhs = one_plus_s_apply(s, &u_tilde);
                let un = lhs.solve(&rhs);
                let w = one_plus_s.solve(&s.matvec(&un));
                diag.diss_time_visc = dt * self.sys.inner(&w, &un) + 0.5 * dt * dt * self.sys.norm_sq(&w);
                un
            }
        };
        if u_next.iter().any(|x| !x.is_finite()) {
            return Err(Error::Solver(format!("post-step produced non-finite values at step {index}")));
        }
        Ok(StepOutput {
            u_tilde,
            u_next,
            midpoint,
            diag,
        })
    }

    fn stage_residual(&self, u: &[f64], rhs0: &[f64], x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let m: Vec<f64> = u.iter().zip(x).map(|(a, b)| 0.5 * (a + b)).collect();
        let bf = self.sys.b.matvec(&self.sys.feedback.apply(&m)?);
        let kx = self.lhs.matvec(x);
        let g = kx
            .iter()
            .zip(rhs0)
            .zip(&bf)
            .map(|((k, r), f)| k - r + self.scheme.dt * f)
            .collect();
        Ok((g, m))
    }

    fn solve_stage(&self, index: usize, u: &[f64], rhs0: &[f64]) -> Result<(Vec<f64>, usize, f64, bool)> {
        let tol = self.scheme.stage.tol;
        let max_iter = self.scheme.stage.max_iter;
        // stiff operators (beam) put the roundoff floor of G above tol·‖u‖
        let size = norm_inf(u).max(norm_inf(rhs0)).max(1.0);
        let accept = (tol * size).max(16.0 * f64::EPSILON * self.lhs_norm * size);
        let mut x = u.to_vec();
        let mut iters = 0;
        let mut res = f64::INFINITY;

        if self.scheme.stage.method == StageMethod::Newton {
            let half_dt = 0.5 * self.scheme.dt;
            let mut stalled = 0;
            for _ in 0..max_iter {
                let (g, m) = self.stage_residual(u, rhs0, &x)?;
                let r = norm_inf(&g);
                if r <= accept {
                    return Ok((x, iters, r, false));
                }
                stalled = if r > 0.5 * res { stalled + 1 } else { 0 };
                res = r;
                if stalled >= 3 || !r.is_finite() {
                    break;
                }
                let jac = self.sys.feedback.jacobian(&m)?;
                let bj = self.sys.b.matmul(&jac.sparse)?;
                let j = self.lhs.add(1.0, &bj, half_dt)?;
                let fact = Factorization::with_ordering(&j, self.ordering.clone())?;
                let neg_g: Vec<f64> = g.iter().map(|v| -v).collect();
                let delta = match &jac.rank_one {
                    None => fact.solve(&neg_g),
                    Some((a, c)) => {
                        let ba: Vec<f64> = self.sys.b.matvec(a).iter().map(|v| half_dt * v).collect();
                        sherman_morrison(&fact, &ba, c, &neg_g)?
                    }
                };
                iters += 1;
                for (xi, d) in x.iter_mut().zip(&delta) {
                    *xi += d;
                }
                if norm_inf(&delta) <= 1e-3 * accept {
                    let (g, _) = self.stage_residual(u, rhs0, &x)?;
                    let r = norm_inf(&g);
                    if r <= 10.0 * accept {
                        return Ok((x, iters, r, false));
                    }
                }
            }
            if !res.is_finite() {
                x = u.to_vec();
            }
        }

        // relaxed fixed point on K x = rhs0 − Δt·B·F(m)
        let fact = self.lhs_factor()?;
        let fp_max = if self.scheme.stage.method == StageMethod::Newton {
            20 * max_iter
        } else {
            max_iter
        };
        for _ in 0..fp_max {
            let (g, m) = self.stage_residual(u, rhs0, &x)?;
            res = norm_inf(&g);
            if res <= accept {
                return Ok((x, iters, res, self.scheme.stage.method == StageMethod::Newton));
            }
            if !res.is_finite() {
                break;
            }
            let bf = self.sys.b.matvec(&self.sys.feedback.apply(&m)?);
            let target: Vec<f64> = rhs0.iter().zip(&bf).map(|(r, f)| r - self.scheme.dt * f).collect();
            let y = fact.solve(&target);
            for (xi, yi) in x.iter_mut().zip(&y) {
                *xi = (1.0 - RELAXATION) * *xi + RELAXATION * yi;
            }
            iters += 1;
        }
        Err(Error::StageSolver {
            step: index,
            residual: res,
            iters,
        })
    }
}

fn one_plus_s_apply(s: &CsrMatrix, x: &[f64]) -> Vec<f64> {
    let mut y = s.matvec(x);
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += xi;
    }
    y
}

/// Structural pattern of the lifted feedback Jacobian (all ones).
fn feedback_pattern(sys: &SemiDiscreteSystem) -> CsrMatrix {
    let n = sys.n;
    let mut t = Vec::new();
    match &sys.feedback.layout {
        FeedbackLayout::Block { offset, len } => {
            for i in *offset..offset + len {
                t.push((i, i, 1.0));
            }
        }
        FeedbackLayout::ComplexPairs { n: k } => {
            for i in 0..*k {
                for (r, c) in [(i, i), (i, k + i), (k + i, i), (k + i, k + i)] {
                    t.push((r, c, 1.0));
                }
            }
        }
    }
    CsrMatrix::from_triplets(n, n, &t)
}

/// One step from scratch; prefer [`Stepper`] for repeated steps.
pub fn step(sys: &SemiDiscreteSystem, scheme: &TimeScheme, u: &[f64]) -> Result<StepOutput> {
    Stepper::new(sys, scheme)?.step(0, u)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SnapshotPolicy {
    None,
    Every(usize),
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RecordOptions {
    pub snapshots: SnapshotPolicy,
}

impl Default for RecordOptions {
    fn default() -> Self {
        Self {
            snapshots: SnapshotPolicy::None,
        }
    }
}

/// Per-step history of a run. Per-step vectors have one entry per step;
/// `times` and `energies` also include the initial state.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrajectoryRecord {
    pub dt: f64,
    pub times: Vec<f64>,
    pub energies: Vec<f64>,
    pub diss_damping: Vec<f64>,
    pub diss_space_visc: Vec<f64>,
    pub diss_time_visc: Vec<f64>,
    pub residuals: Vec<f64>,
    pub solver_iters: Vec<usize>,
    pub fallbacks: usize,
    /// (step index, state); index 0 is the initial state
    pub snapshots: Vec<(usize, Vec<f64>)>,
    /// stage midpoints, kept whenever every snapshot is kept
    pub midpoints: Vec<Vec<f64>>,
    pub manifest: Vec<(String, String)>,
}

impl TrajectoryRecord {
    pub fn steps(&self) -> usize {
        self.residuals.len()
    }

    pub fn initial_energy(&self) -> f64 {
        self.energies.first().copied().unwrap_or(0.0)
    }

    pub fn final_energy(&self) -> f64 {
        self.energies.last().copied().unwrap_or(0.0)
    }

    pub fn max_residual(&self) -> f64 {
        self.residuals.iter().copied().fold(0.0, f64::max)
    }

    /// Largest increase E_{k+1} − E_k (0 for a monotone run).
    pub fn max_increase(&self) -> f64 {
        self.energies.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max)
    }

    pub fn is_monotone(&self, tol: f64) -> bool {
        self.max_increase() <= tol
    }

    pub fn has_full_snapshots(&self) -> bool {
        self.snapshots.len() == self.steps() + 1 && self.midpoints.len() == self.steps()
    }

    pub fn state(&self, k: usize) -> Option<&[f64]> {
        self.snapshots.iter().find(|(i, _)| *i == k).map(|(_, s)| s.as_slice())
    }

    pub fn median_iters(&self) -> usize {
        if self.solver_iters.is_empty() {
            return 0;
        }
        let mut v = self.solver_iters.clone();
        v.sort_unstable();
        v[v.len() / 2]
    }

    /// CSV with one row per time point; the dissipation columns of row k
    /// belong to the step ending at t_k.
    pub fn to_csv(&self, manifest_hash: Option<&str>) -> String {
        let mut s = String::new();
        if let Some(h) = manifest_hash {
            let _ = writeln!(s, "# manifest {h}");
        }
        s.push_str("time,energy,diss_damping,diss_space_visc,diss_time_visc,residual,iters\n");
        for (k, (t, e)) in self.times.iter().zip(&self.energies).enumerate() {
            if k == 0 {
                let _ = writeln!(s, "{t:.17e},{e:.17e},0,0,0,0,0");
            } else {
                let j = k - 1;
                let _ = writeln!(
                    s,
                    "{t:.17e},{e:.17e},{:.17e},{:.17e},{:.17e},{:.6e},{}",
                    self.diss_damping[j],
                    self.diss_space_visc[j],
                    self.diss_time_visc[j],
                    self.residuals[j],
                    self.solver_iters[j]
                );
            }
        }
        s
    }

    pub fn write_csv(&self, path: &Path, manifest_hash: Option<&str>) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        f.write_all(self.to_csv(manifest_hash).as_bytes())?;
        Ok(())
    }

    /// Snapshots as whitespace-separated text, one state per line prefixed by its time.
    pub fn snapshots_text(&self, manifest_hash: Option<&str>) -> String {
        let mut s = String::new();
        if let Some(h) = manifest_hash {
            let _ = writeln!(s, "# manifest {h}");
        }
        for (k, state) in &self.snapshots {
            let _ = write!(s, "{:.17e}", *k as f64 * self.dt);
            for v in state {
                let _ = write!(s, " {v:.17e}");
            }
            s.push('\n');
        }
        s
    }
}

/// A run aborted by a failing step, with everything recorded before it.
#[derive(Debug, Clone)]
pub struct SimulationFailure {
    pub error: Error,
    pub step: usize,
    pub partial: Box<TrajectoryRecord>,
}

impl From<SimulationFailure> for Error {
    fn from(f: SimulationFailure) -> Self {
        f.error
    }
}

impl std::fmt::Display for SimulationFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "step {} failed: {}", self.step, self.error)
    }
}

pub type SimResult = std::result::Result<TrajectoryRecord, SimulationFailure>;

pub fn simulate(sys: &SemiDiscreteSystem, scheme: &TimeScheme, u0: &[f64], t_final: f64, opts: RecordOptions) -> SimResult {
    let fail = |error| SimulationFailure {
        error,
        step: 0,
        partial: Box::default(),
    };
    let stepper = Stepper::new(sys, scheme).map_err(fail)?;
    run(&stepper, u0, t_final, opts)
}

/// Runs any configured stepper for ⌈T/Δt⌉ steps.
pub fn run(stepper: &Stepper, u0: &[f64], t_final: f64, opts: RecordOptions) -> SimResult {
    let sys = stepper.system();
    let scheme = stepper.scheme();
    let dt = scheme.dt;
    let mut rec = TrajectoryRecord {
        dt,
        ..Default::default()
    };
    if !(t_final >= dt) {
        return Err(SimulationFailure {
            error: Error::Domain(format!("T_final = {t_final} is shorter than dt = {dt}")),
            step: 0,
            partial: Box::new(rec),
        });
    }
    if u0.len() != sys.n {
        return Err(SimulationFailure {
            error: Error::Shape(format!("initial state has length {}, system has {}", u0.len(), sys.n)),
            step: 0,
            partial: Box::new(rec),
        });
    }
    let steps = scheme.steps_for(t_final);
    let keep_all = opts.snapshots == SnapshotPolicy::All;
    let keep = |k: usize| match opts.snapshots {
        SnapshotPolicy::None => false,
        SnapshotPolicy::All => true,
        SnapshotPolicy::Every(e) => e > 0 && k % e == 0,
    };
    rec.times.reserve(steps + 1);
    rec.energies.reserve(steps + 1);
    let mut u = u0.to_vec();
    let mut e = sys.energy(&u);
    rec.times.push(0.0);
    rec.energies.push(e);
    if keep(0) {
        rec.snapshots.push((0, u.clone()));
    }
    for k in 0..steps {
        let out = match stepper.step(k, &u) {
            Ok(o) => o,
            Err(error) => {
                return Err(SimulationFailure {
                    error,
                    step: k,
                    partial: Box::new(rec),
                })
            }
        };
        let e_next = sys.energy(&out.u_next);
        let d = out.diag;
        rec.times.push((k + 1) as f64 * dt);
        rec.energies.push(e_next);
        rec.diss_damping.push(d.diss_damping);
        rec.diss_space_visc.push(d.diss_space_visc);
        rec.diss_time_visc.push(d.diss_time_visc);
        rec.residuals.push((e_next - e + d.total()).abs());
        rec.solver_iters.push(d.iters);
        rec.fallbacks += d.used_fallback as usize;
        if keep_all {
            rec.midpoints.push(out.midpoint);
        }
        u = out.u_next;
        e = e_next;
        if keep(k + 1) {
            rec.snapshots.push((k + 1, u.clone()));
        }
    }
    Ok(rec)
}

/// The nonlinear run and its two linear comparison runs from the same data.
#[derive(Debug, Clone)]
pub struct Companions {
    pub nonlinear: TrajectoryRecord,
    /// F replaced by the identity
    pub linear_damped: TrajectoryRecord,
    /// no damping and no space viscosity; the time viscosity is kept
    pub conservative: TrajectoryRecord,
}

pub fn simulate_linear_companions(
    sys: &SemiDiscreteSystem,
    scheme: &TimeScheme,
    u0: &[f64],
    t_final: f64,
) -> std::result::Result<Companions, SimulationFailure> {
    let opts = RecordOptions {
        snapshots: SnapshotPolicy::All,
    };
    let stepper = |damping, space| {
        Stepper::with_options(sys, scheme, damping, space).map_err(|error| SimulationFailure {
            error,
            step: 0,
            partial: Box::default(),
        })
    };
    let space = scheme.space_viscosity_in_stage;
    let nonlinear = run(&stepper(Damping::Feedback, space)?, u0, t_final, opts)?;
    let linear_damped = run(&stepper(Damping::Linear, space)?, u0, t_final, opts)?;
    let conservative = run(&stepper(Damping::Off, false)?, u0, t_final, opts)?;
    Ok(Companions {
        nonlinear,
        linear_damped,
        conservative,
    })
}

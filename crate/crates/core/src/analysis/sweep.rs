use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::decay::{envelope_check, fit_decay, half_time, DecayFit, EnvelopeCheck, FitModel, HalfTime};
use crate::convexity::{ConvexityProfile, DecayEnvelope, EnvelopeVariant};
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::integrate::{simulate, RecordOptions, StageSolver, TimeScheme, TimeViscosity, TrajectoryRecord};
use crate::manifest::Manifest;
use crate::models::{build_model, initial_state, ModelSpec, Probe};

/// One column of the sweep: dt = dt_factor·dx plus viscosity switches.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub label: String,
    pub dt_factor: f64,
    pub space_viscosity: bool,
    pub time_viscosity: TimeViscosity,
}

impl SweepCell {
    pub fn new(label: &str, dt_factor: f64, space_viscosity: bool, time_viscosity: TimeViscosity) -> Self {
        Self {
            label: label.to_string(),
            dt_factor,
            space_viscosity,
            time_viscosity,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FitWindow {
    Fixed(f64, f64),
    /// [T/10, T]
    FinalDecade,
    /// [(1 − f)T, T]
    LastFraction(f64),
}

impl FitWindow {
    fn resolve(self, t_final: f64) -> (f64, f64) {
        match self {
            Self::Fixed(a, b) => (a, b),
            Self::FinalDecade => (t_final / 10.0, t_final),
            Self::LastFraction(f) => ((1.0 - f) * t_final, t_final),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitSpec {
    pub model: FitModel,
    pub window: FitWindow,
}

#[derive(Debug, Clone)]
pub struct EnvelopeSpec {
    pub profile: ConvexityProfile,
    pub c_t: f64,
    /// defaults to each mesh's own ‖B‖
    pub norm_b: Option<f64>,
    pub t_obs: f64,
    pub variant: EnvelopeVariant,
    pub onset: f64,
}

#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub model: ModelSpec,
    pub meshes: Vec<usize>,
    pub cells: Vec<SweepCell>,
    pub probe: Probe,
    pub amplitude: f64,
    pub seed: u64,
    pub t_final: f64,
    pub q: f64,
    pub fit: Option<FitSpec>,
    pub envelope: Option<EnvelopeSpec>,
    pub stage: StageSolver,
}

impl SweepSpec {
    pub fn new(model: ModelSpec, meshes: Vec<usize>, cells: Vec<SweepCell>, probe: Probe, t_final: f64) -> Self {
        Self {
            model,
            meshes,
            cells,
            probe,
            amplitude: 1.0,
            seed: 0,
            t_final,
            q: 0.5,
            fit: None,
            envelope: None,
            stage: StageSolver::default(),
        }
    }

    fn base_manifest(&self) -> Manifest {
        let mut m = Manifest::new();
        let s = &self.model;
        m.set("model.kind", s.kind.name())
            .set("model.length", fmt(s.length))
            .set("model.alpha", fmt(s.alpha))
            .set("model.support", support_text(&s.support))
            .set("model.sigma", fmt(s.sigma))
            .set("model.viscosity", s.viscosity.name())
            .set("feedback.name", s.feedback.name())
            .set("experiment.probe", self.probe.name())
            .set("experiment.amplitude", fmt(self.amplitude))
            .set("experiment.t_final", fmt(self.t_final))
            .set("experiment.q", fmt(self.q))
            .set("scheme.tol", fmt(self.stage.tol))
            .set("scheme.max_iter", self.stage.max_iter)
            .set("seed", self.seed);
        if let Some(f) = &self.fit {
            let (a, b) = f.window.resolve(self.t_final);
            m.set("experiment.fit_model", format!("{:?}", f.model).to_lowercase())
                .set("experiment.fit_window", format!("{},{}", fmt(a), fmt(b)));
        }
        if let Some(e) = &self.envelope {
            m.set("envelope.growth", e.profile.growth().name())
                .set("envelope.beta", fmt(e.profile.beta()))
                .set("envelope.c_t", fmt(e.c_t))
                .set("envelope.t_obs", fmt(e.t_obs))
                .set("envelope.onset", fmt(e.onset));
            if let Some(b) = e.norm_b {
                m.set("envelope.norm_b", fmt(b));
            }
        }
        m
    }

    /// Echo of the whole sweep configuration.
    pub fn manifest(&self) -> Manifest {
        let mut m = self.base_manifest();
        m.set("sweep.meshes", self.meshes.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(","));
        for (i, c) in self.cells.iter().enumerate() {
            m.set(format!("sweep.cell{i}"), cell_text(c));
        }
        m
    }
}

fn support_text(support: &[(f64, f64)]) -> String {
    support
        .iter()
        .map(|(a, b)| format!("{}:{}", fmt(*a), fmt(*b)))
        .collect::<Vec<_>>()
        .join(",")
}

fn cell_text(c: &SweepCell) -> String {
    format!(
        "{} dt_factor={} space_viscosity={} time_viscosity={}",
        c.label,
        fmt(c.dt_factor),
        c.space_viscosity,
        c.time_viscosity.name()
    )
}

/// Shortest round-trip decimal.
fn fmt(x: f64) -> String {
    format!("{x:?}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub n: usize,
    pub cell: String,
    pub dx: f64,
    pub dt: f64,
    pub manifest_hash: String,
    pub half_time: Option<HalfTime>,
    pub fit: Option<DecayFit>,
    pub fit_error: Option<String>,
    pub envelope: Option<EnvelopeCheck>,
    /// calibrated prefactor relative to the coarsest mesh of the same cell
    pub envelope_ratio: Option<f64>,
    pub max_residual: f64,
    pub initial_energy: f64,
    pub final_energy: f64,
    pub steps: usize,
    pub error: Option<String>,
}

/// max/min half-time across meshes. Half-times not reached within the horizon
/// count as T_final, which makes the ratio a lower bound when the slowest
/// mesh is one of them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Uniformity {
    pub ratio: Option<f64>,
    pub lower_bound: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub meshes: Vec<usize>,
    pub labels: Vec<String>,
    /// row-major: mesh, then cell
    pub cells: Vec<CellResult>,
    pub uniformity: Vec<Uniformity>,
    pub manifest: Manifest,
}

pub const METRICS: [&str; 7] = [
    "half_time",
    "fit_slope",
    "fit_r2",
    "envelope_ratio",
    "max_residual",
    "cell_hash",
    "uniformity",
];

impl SweepResult {
    pub fn cell(&self, mesh: usize, cell: usize) -> &CellResult {
        &self.cells[mesh * self.labels.len() + cell]
    }

    pub fn manifest_hash(&self) -> String {
        self.manifest.hash()
    }

    /// Uniformity of the cell labelled `label`.
    pub fn uniformity_of(&self, label: &str) -> Option<Uniformity> {
        self.labels.iter().position(|l| l == label).map(|i| self.uniformity[i])
    }

    /// CSV text of one metric: rows are meshes, columns are cells
    /// (`uniformity` has one row per cell instead).
    pub fn metric_csv(&self, metric: &str) -> Result<String> {
        let mut s = String::new();
        let _ = writeln!(s, "# manifest {}", self.manifest_hash());
        if metric == "uniformity" {
            let _ = writeln!(s, "cell,ratio,lower_bound");
            for (l, u) in self.labels.iter().zip(&self.uniformity) {
                let _ = writeln!(s, "{},{},{}", l, opt(u.ratio), u.lower_bound);
            }
            return Ok(s);
        }
        let value: fn(&CellResult) -> String = match metric {
            "half_time" => |c| match c.half_time {
                Some(HalfTime::Reached(t)) => num(t),
                Some(HalfTime::NotReached { .. }) => "not_reached".into(),
                None => "NA".into(),
            },
            "fit_slope" => |c| opt(c.fit.map(|f| f.slope)),
            "fit_r2" => |c| opt(c.fit.map(|f| f.r_squared)),
            "envelope_ratio" => |c| opt(c.envelope_ratio),
            "max_residual" => |c| if c.error.is_some() { "NA".into() } else { num(c.max_residual) },
            "cell_hash" => |c| c.manifest_hash.clone(),
            other => return Err(Error::config("output.metric", format!("unknown metric `{other}`"))),
        };
        let _ = writeln!(s, "n,dx,{}", self.labels.join(","));
        for (i, n) in self.meshes.iter().enumerate() {
            let row: Vec<String> = (0..self.labels.len()).map(|j| value(self.cell(i, j))).collect();
            let _ = writeln!(s, "{},{},{}", n, num(self.cell(i, 0).dx), row.join(","));
        }
        Ok(s)
    }

    /// Writes `<metric>.csv` for every metric into `dir`.
    pub fn write_csvs(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut out = Vec::new();
        for m in METRICS {
            let path = dir.join(format!("{m}.csv"));
            std::fs::write(&path, self.metric_csv(m)?)?;
            out.push(path);
        }
        Ok(out)
    }
}

fn num(x: f64) -> String {
    format!("{x:.12e}")
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(|| "NA".into(), num)
}

struct Job<'a> {
    spec: &'a SweepSpec,
    n: usize,
    cell: &'a SweepCell,
}

impl Job<'_> {
    fn manifest(&self, dx: f64, dt: f64) -> Manifest {
        let mut m = self.spec.base_manifest();
        m.set("model.n", self.n)
            .set("model.dx", fmt(dx))
            .set("scheme.dt", fmt(dt))
            .set("scheme.space_viscosity", self.cell.space_viscosity)
            .set("scheme.time_viscosity", self.cell.time_viscosity.name())
            .set("sweep.cell", &self.cell.label);
        m
    }

    fn run(&self) -> CellResult {
        let mut res = CellResult {
            n: self.n,
            cell: self.cell.label.clone(),
            dx: f64::NAN,
            dt: f64::NAN,
            manifest_hash: String::new(),
            half_time: None,
            fit: None,
            fit_error: None,
            envelope: None,
            envelope_ratio: None,
            max_residual: f64::NAN,
            initial_energy: f64::NAN,
            final_energy: f64::NAN,
            steps: 0,
            error: None,
        };
        let traj = match self.simulate(&mut res) {
            Ok(t) => t,
            Err(e) => {
                if res.manifest_hash.is_empty() {
                    res.manifest_hash = self.manifest(res.dx, res.dt).hash();
                }
                res.error = Some(e.to_string());
                return res;
            }
        };
        res.max_residual = traj.max_residual();
        res.initial_energy = traj.initial_energy();
        res.final_energy = traj.final_energy();
        res.steps = traj.steps();
        let spec = self.spec;
        match half_time(&traj, spec.q) {
            Ok(h) => res.half_time = Some(h),
            Err(e) => res.error = Some(e.to_string()),
        }
        if let Some(f) = &spec.fit {
            match fit_decay(&traj, f.window.resolve(spec.t_final), f.model) {
                Ok(fit) => res.fit = Some(fit),
                Err(e) => res.fit_error = Some(e.to_string()),
            }
        }
        if let Some(e) = &spec.envelope {
            match self.envelope(&traj, e) {
                Ok(c) => res.envelope = Some(c),
                Err(err) => res.error = Some(err.to_string()),
            }
        }
        res
    }

    fn simulate(&self, res: &mut CellResult) -> Result<TrajectoryRecord> {
        let spec = self.spec;
        let sys = build_model(&spec.model.clone().with_n(self.n))?;
        res.dx = sys.dx;
        res.dt = self.cell.dt_factor * sys.dx;
        res.manifest_hash = self.manifest(res.dx, res.dt).hash();
        let scheme = TimeScheme::new(res.dt)?
            .with_time_viscosity(self.cell.time_viscosity)
            .with_space_viscosity(self.cell.space_viscosity)
            .with_stage(spec.stage)?;
        let u0 = initial_state(&sys, spec.probe, spec.amplitude, spec.seed);
        Ok(simulate(&sys, &scheme, &u0, spec.t_final, RecordOptions::default())?)
    }

    fn envelope(&self, traj: &TrajectoryRecord, e: &EnvelopeSpec) -> Result<EnvelopeCheck> {
        let norm_b = match e.norm_b {
            Some(b) => b,
            None => build_model(&self.spec.model.clone().with_n(self.n))?.norm_b(),
        };
        let env = DecayEnvelope::new(&e.profile, traj.initial_energy(), e.t_obs, e.c_t, norm_b, 1.0, e.variant)?;
        envelope_check(traj, &env, e.onset)
    }
}

/// Runs every (mesh, cell) pair and summarizes half-times, decay fits and
/// envelope ratios per cell. Cell failures are recorded, not propagated.
pub fn uniformity_sweep(spec: &SweepSpec, exec: &Executor) -> Result<SweepResult> {
    if spec.meshes.len() < 3 {
        return Err(Error::Precondition(format!(
            "a uniformity sweep needs at least 3 meshes, got {}",
            spec.meshes.len()
        )));
    }
    if spec.cells.is_empty() {
        return Err(Error::config("sweep.cells", "no cells given"));
    }
    for c in &spec.cells {
        if !(c.dt_factor > 0.0 && c.dt_factor.is_finite()) {
            return Err(Error::config("sweep.dt_factor", format!("must be positive, got {}", c.dt_factor)));
        }
    }
    if !(spec.q > 0.0 && spec.q < 1.0) {
        return Err(Error::config("experiment.q", format!("must lie in (0, 1), got {}", spec.q)));
    }
    let nc = spec.cells.len();
    let mut cells = exec.map(spec.meshes.len() * nc, |i| {
        Job {
            spec,
            n: spec.meshes[i / nc],
            cell: &spec.cells[i % nc],
        }
        .run()
    });

    // single calibration on the coarsest mesh, reused across the column
    let coarsest = (0..spec.meshes.len()).min_by_key(|&i| spec.meshes[i]).expect("nonempty");
    for j in 0..nc {
        let reference = cells[coarsest * nc + j].envelope.map(|c| c.calibrated_prefactor);
        for i in 0..spec.meshes.len() {
            let c = &mut cells[i * nc + j];
            c.envelope_ratio = match (reference, c.envelope) {
                (Some(r), Some(e)) if r > 0.0 => Some(e.calibrated_prefactor / r),
                _ => None,
            };
        }
    }

    let uniformity = (0..nc)
        .map(|j| {
            let column: Vec<&CellResult> = (0..spec.meshes.len()).map(|i| &cells[i * nc + j]).collect();
            uniformity_of(&column, spec.t_final)
        })
        .collect();
    Ok(SweepResult {
        meshes: spec.meshes.clone(),
        labels: spec.cells.iter().map(|c| c.label.clone()).collect(),
        cells,
        uniformity,
        manifest: spec.manifest(),
    })
}

fn uniformity_of(column: &[&CellResult], t_final: f64) -> Uniformity {
    let mut values = Vec::with_capacity(column.len());
    for c in column {
        match c.half_time {
            Some(HalfTime::Reached(t)) => values.push((t, false)),
            Some(HalfTime::NotReached { .. }) => values.push((t_final, true)),
            None => {
                return Uniformity {
                    ratio: None,
                    lower_bound: false,
                }
            }
        }
    }
    let (lo, lo_censored) = values.iter().copied().fold((f64::INFINITY, false), |a, b| if b.0 < a.0 { b } else { a });
    let hi_censored = values.iter().any(|v| v.1);
    if lo_censored || !(lo > 0.0) {
        return Uniformity {
            ratio: None,
            lower_bound: hi_censored,
        };
    }
    let hi = values.iter().map(|v| v.0).fold(0.0, f64::max);
    Uniformity {
        ratio: Some(hi / lo),
        lower_bound: hi_censored,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feedback::FeedbackMap;
    use crate::models::ModelKind;

    fn spec(meshes: Vec<usize>) -> SweepSpec {
        let f = FeedbackMap::catalog("linear", None, None).unwrap();
        let model = ModelSpec::new(ModelKind::Wave1d, 8, f).with_support(vec![(0.0, 1.0)], 1.0);
        let cells = vec![
            SweepCell::new("visc", 0.5, true, TimeViscosity::Squared),
            SweepCell::new("plain", 0.5, false, TimeViscosity::None),
        ];
        let mut s = SweepSpec::new(model, meshes, cells, Probe::Smooth, 3.0);
        s.fit = Some(FitSpec {
            model: FitModel::Exponential,
            window: FitWindow::LastFraction(0.5),
        });
        s
    }

    #[test]
    fn single_mesh_is_a_precondition_error() {
        assert!(matches!(
            uniformity_sweep(&spec(vec![8]), &Executor::sequential()),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn full_damping_decays_uniformly() {
        let r = uniformity_sweep(&spec(vec![8, 12, 16]), &Executor::sequential()).unwrap();
        assert_eq!(r.cells.len(), 6);
        for c in &r.cells {
            assert!(c.error.is_none(), "{:?}", c.error);
            assert!(c.half_time.unwrap().time().is_some());
            assert!(c.fit.unwrap().slope < 0.0);
            assert_eq!(c.manifest_hash.len(), 64);
        }
        let u = r.uniformity_of("visc").unwrap();
        assert!(!u.lower_bound);
        assert!(u.ratio.unwrap() >= 1.0 && u.ratio.unwrap() < 1.5);
        let hashes: std::collections::HashSet<_> = r.cells.iter().map(|c| &c.manifest_hash).collect();
        assert_eq!(hashes.len(), 6);
    }

    #[test]
    fn parallel_sweep_gives_identical_csvs() {
        let s = spec(vec![8, 10, 12]);
        let a = uniformity_sweep(&s, &Executor::sequential()).unwrap();
        let b = uniformity_sweep(&s, &Executor::new(3)).unwrap();
        for m in METRICS {
            assert_eq!(a.metric_csv(m).unwrap(), b.metric_csv(m).unwrap());
        }
        let csv = a.metric_csv("half_time").unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert!(lines[0].starts_with("# manifest "));
        assert_eq!(lines[1], "n,dx,visc,plain");
        assert_eq!(lines.len(), 5);
    }

    #[test]
    fn censored_half_times() {
        let cell = |h| CellResult {
            n: 1,
            cell: "c".into(),
            dx: 1.0,
            dt: 1.0,
            manifest_hash: String::new(),
            half_time: Some(h),
            fit: None,
            fit_error: None,
            envelope: None,
            envelope_ratio: None,
            max_residual: 0.0,
            initial_energy: 1.0,
            final_energy: 1.0,
            steps: 1,
            error: None,
        };
        let a = cell(HalfTime::Reached(1.0));
        let b = cell(HalfTime::Reached(2.0));
        let c = cell(HalfTime::NotReached { final_ratio: 0.9 });
        assert_eq!(
            uniformity_of(&[&a, &b], 10.0),
            Uniformity {
                ratio: Some(2.0),
                lower_bound: false
            }
        );
        assert_eq!(
            uniformity_of(&[&a, &c], 10.0),
            Uniformity {
                ratio: Some(10.0),
                lower_bound: true
            }
        );
        assert_eq!(uniformity_of(&[&c, &c], 10.0).ratio, None);
    }
}

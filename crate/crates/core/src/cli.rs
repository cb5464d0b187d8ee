//! Configuration-driven front end: `simulate`, `sweep`, `audit`, `gramian`
//! and `envelope`, each reading one TOML file and writing CSV/text reports
//! next to a `manifest.toml` whose hash heads every output file.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use crate::analysis::{
    discrete_iteration, envelope_check, gramian_constant, half_time, lemma_audit, uniformity_sweep, EnvelopeSpec, FitModel,
    FitSpec, FitWindow, HalfTime, SweepCell, SweepResult, SweepSpec,
};
use crate::convexity::{default_beta, ConvexityProfile, DecayEnvelope, EnvelopeVariant, GrowthFunction};
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::feedback::{Chi, FeedbackMap};
use crate::integrate::{
    simulate, RecordOptions, SnapshotPolicy, StageMethod, StageSolver, TimeScheme, TimeViscosity, TrajectoryRecord,
};
use crate::manifest::Manifest;
use crate::models::{build_model, initial_state, load_coo, CustomMatrices, ModelKind, ModelSpec, Probe, SemiDiscreteSystem, Viscosity};

pub const EXIT_OK: u8 = 0;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_NUMERICAL: u8 = 3;
pub const EXIT_THRESHOLD: u8 = 4;

#[derive(Debug, Parser)]
#[command(name = "nldecay", version, about = "Energy decay experiments for nonlinearly damped systems")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one trajectory and write its energy history
    Simulate(RunArgs),
    /// Half-time, fit and envelope metrics over a mesh sweep
    Sweep(SweepArgs),
    /// Evaluate the four comparison inequalities on companion runs
    Audit(RunArgs),
    /// Observability constant of the conservative flow
    Gramian(RunArgs),
    /// Compare a run against its predicted decay envelope
    Envelope(RunArgs),
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// output directory (overrides `output.dir`)
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// worker threads, 0 = all cores
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
    /// overrides `seed`
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// exit with status 4 when a configured threshold is missed
    #[arg(long)]
    pub assert: bool,
}

/// Error with the exit status it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = if e.is_config() || matches!(e, Error::Precondition(_)) {
            EXIT_CONFIG
        } else {
            EXIT_NUMERICAL
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

/// Parses arguments, runs the command and returns the exit status.
pub fn main_with_args<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(summary) => {
            print!("{summary}");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

/// Runs a parsed command and returns its summary text.
pub fn execute(cli: &Cli) -> std::result::Result<String, CliError> {
    match &cli.command {
        Command::Simulate(a) => cmd_simulate(Loaded::new(a, "simulate")?),
        Command::Sweep(a) => cmd_sweep(&Loaded::new(&a.run, "sweep")?, a.assert),
        Command::Audit(a) => Ok(cmd_audit(Loaded::new(a, "audit")?)?),
        Command::Gramian(a) => Ok(cmd_gramian(&Loaded::new(a, "gramian")?)?),
        Command::Envelope(a) => Ok(cmd_envelope(Loaded::new(a, "envelope")?)?),
    }
}

// ---------------------------------------------------------------------------
// configuration

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub feedback: FeedbackSection,
    #[serde(default)]
    pub scheme: SchemeSection,
    #[serde(default)]
    pub experiment: ExperimentSection,
    pub envelope: Option<EnvelopeSection>,
    #[serde(default)]
    pub record: RecordSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub kind: Option<String>,
    pub n: Option<usize>,
    pub length: Option<f64>,
    pub support: Option<Vec<[f64; 2]>>,
    pub alpha: Option<f64>,
    pub sigma: Option<f64>,
    pub viscosity: Option<String>,
    pub viscosity_eps: Option<f64>,
    /// COO matrix files for `kind = "custom"`
    pub a: Option<PathBuf>,
    pub b: Option<PathBuf>,
    pub v: Option<PathBuf>,
    pub m: Option<PathBuf>,
    pub damped_offset: Option<usize>,
    pub damped_len: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeedbackSection {
    pub name: Option<String>,
    pub p: Option<f64>,
    pub q: Option<f64>,
    /// "uniform" or a file of whitespace-separated weights
    pub chi: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemeSection {
    pub dt: Option<f64>,
    /// dt = dt_factor·dx when `dt` is absent (default 0.5)
    pub dt_factor: Option<f64>,
    pub time_viscosity: Option<String>,
    pub space_viscosity: Option<bool>,
    pub tol: Option<f64>,
    pub max_iter: Option<usize>,
    pub method: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub t_final: Option<f64>,
    pub probe: Option<String>,
    pub amplitude: Option<f64>,
    pub q: Option<f64>,
    pub meshes: Option<Vec<usize>>,
    pub cells: Option<Vec<CellSection>>,
    pub fit_model: Option<String>,
    /// "final_decade" or "last_half"
    pub fit_window: Option<String>,
    pub fit_range: Option<[f64; 2]>,
    pub t_obs: Option<f64>,
    pub include_viscosity: Option<bool>,
    pub envelope_ratio_max: Option<f64>,
    pub fit_slope_min: Option<f64>,
    pub fit_slope_max: Option<f64>,
    pub fit_r2_min: Option<f64>,
    /// largest allowed relative spread of fitted slopes across meshes
    pub fit_slope_spread_max: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellSection {
    pub label: String,
    pub dt_factor: Option<f64>,
    pub space_viscosity: Option<bool>,
    pub time_viscosity: Option<String>,
    pub uniformity_max: Option<f64>,
    pub uniformity_min: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvelopeSection {
    /// growth law of the envelope; defaults to the feedback's own
    pub growth: Option<String>,
    pub p: Option<f64>,
    pub q: Option<f64>,
    pub beta: Option<f64>,
    pub c_t: Option<f64>,
    pub norm_b: Option<f64>,
    pub t_obs: Option<f64>,
    pub variant: Option<String>,
    pub onset: Option<f64>,
    pub prefactor: Option<f64>,
    pub rho_t: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordSection {
    /// "none", "all" or a stride
    pub snapshots: Option<toml::Value>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            let section = e.span().and_then(|sp| enclosing_table(&text[..sp.start]));
            let field = match (unknown_field(&msg), section) {
                (Some(f), Some(t)) => format!("{t}.{f}"),
                (Some(f), None) => f,
                (None, _) => "config".into(),
            };
            Error::config(field, msg)
        })
    }
}

/// Name of the last `[table]` header before the error position.
fn enclosing_table(before: &str) -> Option<String> {
    before.lines().rev().find_map(|line| {
        let t = line.trim();
        let name = t.strip_prefix('[')?.split(']').next()?;
        (!name.starts_with('[')).then(|| name.trim().to_string())
    })
}

fn unknown_field(msg: &str) -> Option<String> {
    let rest = msg.strip_prefix("unknown field `")?;
    Some(rest[..rest.find('`')?].to_string())
}

fn positive(field: &str, v: f64) -> Result<f64> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(Error::config(field, format!("must be positive, got {v}")))
    }
}

fn time_viscosity(field: &str, s: &str) -> Result<TimeViscosity> {
    TimeViscosity::parse(s).ok_or_else(|| {
        Error::config(field, format!("unknown time viscosity `{s}` (none, squared, bounded_squared)"))
    })
}

/// Config file plus command-line overrides.
struct Loaded {
    cfg: RunConfig,
    base: PathBuf,
    out: PathBuf,
    seed: u64,
    jobs: usize,
    manifest: Manifest,
}

impl Loaded {
    fn new(args: &RunArgs, command: &str) -> Result<Self> {
        let text = fs::read_to_string(&args.config)
            .map_err(|e| Error::config("--config", format!("cannot read {}: {e}", args.config.display())))?;
        let cfg = RunConfig::parse(&text)?;
        let base = args.config.parent().map(Path::to_path_buf).unwrap_or_default();
        let out = args
            .out
            .clone()
            .or_else(|| cfg.output.dir.as_ref().map(|d| base.join(d)))
            .unwrap_or_else(|| PathBuf::from("out"));
        let seed = args.seed.or(cfg.seed).unwrap_or(0);
        let mut manifest = Manifest::new();
        manifest.set("command", command).set("version", env!("CARGO_PKG_VERSION"));
        let table: toml::Table = toml::from_str(&text).map_err(|e| Error::config("config", e.to_string()))?;
        flatten("", &toml::Value::Table(table), &mut manifest);
        manifest.set("seed", seed);
        Ok(Self {
            cfg,
            base,
            out,
            seed,
            jobs: args.jobs,
            manifest,
        })
    }

    fn feedback(&self) -> Result<FeedbackMap> {
        let f = &self.cfg.feedback;
        let name = f.name.as_deref().ok_or_else(|| Error::config("feedback.name", "missing"))?;
        if name == "nonlocal_sine_arctan" {
            let chi = match f.chi.as_deref() {
                None | Some("uniform") => Chi::Uniform,
                Some(path) => {
                    let text = fs::read_to_string(self.base.join(path))
                        .map_err(|e| Error::config("feedback.chi", format!("cannot read {path}: {e}")))?;
                    let values = text
                        .split_whitespace()
                        .map(|t| t.parse::<f64>().map_err(|e| Error::config("feedback.chi", format!("`{t}`: {e}"))))
                        .collect::<Result<Vec<_>>>()?;
                    Chi::Values(values)
                }
            };
            return Ok(FeedbackMap::nonlocal_sine_arctan(chi));
        }
        if f.chi.is_some() {
            return Err(Error::config("feedback.chi", "only used by nonlocal_sine_arctan"));
        }
        FeedbackMap::catalog(name, f.p, f.q)
    }

    fn model_spec(&self) -> Result<ModelSpec> {
        let m = &self.cfg.model;
        let kind_name = m.kind.as_deref().ok_or_else(|| Error::config("model.kind", "missing"))?;
        let kind = ModelKind::parse(kind_name)
            .ok_or_else(|| Error::config("model.kind", format!("unknown model `{kind_name}`")))?;
        let n = m.n.unwrap_or(64);
        let mut spec = ModelSpec::new(kind, n, self.feedback()?);
        if let Some(l) = m.length {
            spec.length = positive("model.length", l)?;
        }
        let alpha = m.alpha.unwrap_or(1.0);
        if !(alpha >= 0.0) {
            return Err(Error::config("model.alpha", format!("must be nonnegative, got {alpha}")));
        }
        let support = match &m.support {
            Some(s) => s.iter().map(|[a, b]| (*a, *b)).collect(),
            None => spec.support.clone(),
        };
        spec = spec.with_support(support, alpha);
        if let Some(s) = m.sigma {
            spec.sigma = s;
        }
        spec.viscosity = match m.viscosity.as_deref() {
            None | Some("laplacian_block") => Viscosity::LaplacianBlock,
            Some("none") => Viscosity::None,
            Some("sqrtAA") => Viscosity::SqrtAA {
                eps: m.viscosity_eps.unwrap_or(0.0),
            },
            Some(other) => {
                return Err(Error::config(
                    "model.viscosity",
                    format!("unknown viscosity `{other}` (none, laplacian_block, sqrtAA)"),
                ))
            }
        };
        if kind == ModelKind::Custom {
            let load = |field: &str, p: &Option<PathBuf>| -> Result<Option<_>> {
                p.as_ref()
                    .map(|p| load_coo(&self.base.join(p)).map_err(|e| Error::config(format!("model.{field}"), e.to_string())))
                    .transpose()
            };
            spec.custom = Some(CustomMatrices {
                a: load("a", &m.a)?,
                b: load("b", &m.b)?,
                v: load("v", &m.v)?,
                m: load("m", &m.m)?,
                damped_offset: m.damped_offset.unwrap_or(0),
                damped_len: m.damped_len,
            });
        }
        Ok(spec)
    }

    fn stage(&self) -> Result<StageSolver> {
        let s = &self.cfg.scheme;
        let mut stage = StageSolver::default();
        if let Some(t) = s.tol {
            stage.tol = positive("scheme.tol", t)?;
        }
        if let Some(m) = s.max_iter {
            stage.max_iter = m;
        }
        stage.method = match s.method.as_deref() {
            None | Some("newton") => StageMethod::Newton,
            Some("fixed_point") => StageMethod::FixedPoint,
            Some(other) => return Err(Error::config("scheme.method", format!("unknown method `{other}`"))),
        };
        Ok(stage)
    }

    fn scheme(&self, sys: &SemiDiscreteSystem) -> Result<TimeScheme> {
        let s = &self.cfg.scheme;
        let dt = match (s.dt, s.dt_factor) {
            (Some(_), Some(_)) => return Err(Error::config("scheme.dt", "give either dt or dt_factor")),
            (Some(dt), None) => positive("scheme.dt", dt)?,
            (None, f) => positive("scheme.dt_factor", f.unwrap_or(0.5))? * sys.dx,
        };
        let tv = time_viscosity("scheme.time_viscosity", s.time_viscosity.as_deref().unwrap_or("squared"))?;
        TimeScheme::new(dt)?
            .with_time_viscosity(tv)
            .with_space_viscosity(s.space_viscosity.unwrap_or(true))
            .with_stage(self.stage()?)
    }

    fn probe(&self) -> Result<Probe> {
        let name = self.cfg.experiment.probe.as_deref().unwrap_or("smooth");
        Probe::parse(name).ok_or_else(|| Error::config("experiment.probe", format!("unknown probe `{name}` (smooth, highfreq, random)")))
    }

    fn amplitude(&self) -> Result<f64> {
        positive("experiment.amplitude", self.cfg.experiment.amplitude.unwrap_or(1.0))
    }

    fn t_final(&self) -> Result<f64> {
        let t = self
            .cfg
            .experiment
            .t_final
            .ok_or_else(|| Error::config("experiment.t_final", "missing"))?;
        positive("experiment.t_final", t)
    }

    fn t_obs(&self) -> Result<f64> {
        let t = self.cfg.experiment.t_obs.ok_or_else(|| Error::config("experiment.t_obs", "missing"))?;
        positive("experiment.t_obs", t)
    }

    fn q(&self) -> Result<f64> {
        let q = self.cfg.experiment.q.unwrap_or(0.5);
        if q > 0.0 && q < 1.0 {
            Ok(q)
        } else {
            Err(Error::config("experiment.q", format!("must lie in (0, 1), got {q}")))
        }
    }

    fn snapshots(&self, default: SnapshotPolicy) -> Result<SnapshotPolicy> {
        let Some(v) = &self.cfg.record.snapshots else {
            return Ok(default);
        };
        match v {
            toml::Value::String(s) if s == "none" => Ok(SnapshotPolicy::None),
            toml::Value::String(s) if s == "all" => Ok(SnapshotPolicy::All),
            toml::Value::Integer(k) if *k > 0 => Ok(SnapshotPolicy::Every(*k as usize)),
            other => Err(Error::config(
                "record.snapshots",
                format!("expected \"none\", \"all\" or a positive stride, got {other}"),
            )),
        }
    }

    fn fit(&self) -> Result<Option<FitSpec>> {
        let e = &self.cfg.experiment;
        let Some(name) = e.fit_model.as_deref() else {
            return Ok(None);
        };
        let model = FitModel::parse(name)
            .ok_or_else(|| Error::config("experiment.fit_model", format!("unknown fit model `{name}` (exponential, algebraic)")))?;
        let window = match (e.fit_range, e.fit_window.as_deref()) {
            (Some(_), Some(_)) => return Err(Error::config("experiment.fit_range", "give either fit_range or fit_window")),
            (Some([a, b]), None) => FitWindow::Fixed(a, b),
            (None, None | Some("final_decade")) => FitWindow::FinalDecade,
            (None, Some("last_half")) => FitWindow::LastFraction(0.5),
            (None, Some(other)) => {
                return Err(Error::config(
                    "experiment.fit_window",
                    format!("unknown window `{other}` (final_decade, last_half)"),
                ))
            }
        };
        Ok(Some(FitSpec { model, window }))
    }

    fn executor(&self) -> Executor {
        Executor::new(self.jobs)
    }

    fn prepare_out(&self) -> Result<()> {
        fs::create_dir_all(&self.out)
            .map_err(|e| Error::config("output.dir", format!("cannot create {}: {e}", self.out.display())))
    }

    fn write(&self, name: &str, body: &str) -> Result<()> {
        let mut text = format!("# manifest {}\n", self.manifest.hash());
        text.push_str(body);
        fs::write(self.out.join(name), text)?;
        Ok(())
    }

    fn write_manifest(&self) -> Result<()> {
        fs::write(self.out.join("manifest.toml"), self.manifest.to_file_text())?;
        Ok(())
    }
}

fn flatten(prefix: &str, v: &toml::Value, m: &mut Manifest) {
    match v {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, m);
            }
        }
        toml::Value::String(s) => {
            m.set(prefix, s);
        }
        other => {
            m.set(prefix, other.to_string());
        }
    }
}

fn num(x: f64) -> String {
    format!("{x:.12e}")
}

fn half_time_text(h: HalfTime) -> String {
    match h {
        HalfTime::Reached(t) => num(t),
        HalfTime::NotReached { final_ratio } => format!("not reached (E(T)/E(0) = {})", num(final_ratio)),
    }
}

// ---------------------------------------------------------------------------
// commands

fn build_run(l: &mut Loaded) -> Result<(SemiDiscreteSystem, TimeScheme, Vec<f64>)> {
    let sys = build_model(&l.model_spec()?)?;
    let scheme = l.scheme(&sys)?;
    let u0 = initial_state(&sys, l.probe()?, l.amplitude()?, l.seed);
    l.manifest
        .set("resolved.n", sys.n)
        .set("resolved.dx", format!("{:?}", sys.dx))
        .set("resolved.dt", format!("{:?}", scheme.dt))
        .set("resolved.time_viscosity", scheme.time_viscosity.name())
        .set("resolved.space_viscosity", scheme.space_viscosity_in_stage);
    Ok((sys, scheme, u0))
}

fn cmd_simulate(mut l: Loaded) -> std::result::Result<String, CliError> {
    let (sys, scheme, u0) = build_run(&mut l)?;
    let t_final = l.t_final()?;
    let q = l.q()?;
    let opts = RecordOptions {
        snapshots: l.snapshots(SnapshotPolicy::None)?,
    };
    l.prepare_out()?;
    l.write_manifest()?;
    let hash = l.manifest.hash();
    let traj = match simulate(&sys, &scheme, &u0, t_final, opts) {
        Ok(t) => t,
        Err(f) => {
            f.partial.write_csv(&l.out.join("trajectory.csv"), Some(&hash))?;
            return Err(CliError::from(f.error.clone()).with_context(format!("step {}", f.step)));
        }
    };
    traj.write_csv(&l.out.join("trajectory.csv"), Some(&hash))?;
    if !traj.snapshots.is_empty() {
        fs::write(l.out.join("snapshots.txt"), traj.snapshots_text(Some(&hash)))?;
    }
    let mut s = String::new();
    let _ = writeln!(s, "steps = {}", traj.steps());
    let _ = writeln!(s, "initial_energy = {}", num(traj.initial_energy()));
    let _ = writeln!(s, "final_energy = {}", num(traj.final_energy()));
    let _ = writeln!(s, "half_time(q = {q}) = {}", half_time_text(half_time(&traj, q)?));
    let _ = writeln!(s, "max_balance_residual = {}", num(traj.max_residual()));
    let _ = writeln!(s, "monotone = {}", traj.is_monotone(10.0 * scheme.stage.tol));
    if !sys.has_damping() {
        let e0 = traj.initial_energy();
        let drift = traj.energies.iter().map(|e| (e - e0).abs()).fold(0.0, f64::max) / e0.max(f64::MIN_POSITIVE);
        let _ = writeln!(s, "conservation: max |E_k - E_0|/E_0 = {}", num(drift));
    }
    let _ = writeln!(s, "output = {}", l.out.display());
    Ok(s)
}

impl CliError {
    fn with_context(mut self, ctx: String) -> Self {
        self.message = format!("{ctx}: {}", self.message);
        self
    }
}

/// Sweep specification from `[experiment]`, `[scheme]` and `[envelope]`.
fn sweep_spec(l: &Loaded) -> Result<SweepSpec> {
    let e = &l.cfg.experiment;
    let meshes = e.meshes.clone().ok_or_else(|| Error::config("experiment.meshes", "missing"))?;
    let stage = l.stage()?;
    let default_tv = l.cfg.scheme.time_viscosity.as_deref().unwrap_or("squared");
    let cells = match &e.cells {
        Some(cells) if !cells.is_empty() => cells
            .iter()
            .map(|c| {
                Ok(SweepCell::new(
                    &c.label,
                    positive("experiment.cells.dt_factor", c.dt_factor.or(l.cfg.scheme.dt_factor).unwrap_or(0.5))?,
                    c.space_viscosity.or(l.cfg.scheme.space_viscosity).unwrap_or(true),
                    time_viscosity("experiment.cells.time_viscosity", c.time_viscosity.as_deref().unwrap_or(default_tv))?,
                ))
            })
            .collect::<Result<Vec<_>>>()?,
        Some(_) => return Err(Error::config("experiment.cells", "empty")),
        None => {
            if l.cfg.scheme.dt.is_some() {
                return Err(Error::config("scheme.dt", "a sweep scales dt with dx; use scheme.dt_factor"));
            }
            vec![SweepCell::new(
                "default",
                positive("scheme.dt_factor", l.cfg.scheme.dt_factor.unwrap_or(0.5))?,
                l.cfg.scheme.space_viscosity.unwrap_or(true),
                time_viscosity("scheme.time_viscosity", default_tv)?,
            )]
        }
    };
    let mut spec = SweepSpec::new(l.model_spec()?, meshes, cells, l.probe()?, l.t_final()?);
    spec.amplitude = l.amplitude()?;
    spec.seed = l.seed;
    spec.q = l.q()?;
    spec.stage = stage;
    spec.fit = l.fit()?;
    if let Some(env) = &l.cfg.envelope {
        spec.envelope = Some(envelope_spec(l, env, &spec)?);
    }
    Ok(spec)
}

fn envelope_variant(env: &EnvelopeSection) -> Result<EnvelopeVariant> {
    let name = env.variant.as_deref().unwrap_or("space");
    EnvelopeVariant::parse(name)
        .ok_or_else(|| Error::config("envelope.variant", format!("unknown variant `{name}` (continuous, space, time, full)")))
}

fn envelope_growth(l: &Loaded, env: &EnvelopeSection) -> Result<GrowthFunction> {
    match env.growth.as_deref() {
        Some(name) => GrowthFunction::from_name(name, env.p, env.q).map_err(|e| Error::config("envelope.growth", e.to_string())),
        None => Ok(l.feedback()?.growth().clone()),
    }
}

/// C_T from the config, or from the Gramian of the coarsest mesh with the
/// first cell's scheme.
fn envelope_spec(l: &Loaded, env: &EnvelopeSection, spec: &SweepSpec) -> Result<EnvelopeSpec> {
    let t_obs = positive("envelope.t_obs", env.t_obs.unwrap_or(2.0))?;
    let c_t = match env.c_t {
        Some(c) => positive("envelope.c_t", c)?,
        None => {
            let n = *spec.meshes.iter().min().expect("checked nonempty");
            let sys = build_model(&spec.model.clone().with_n(n))?;
            let cell = &spec.cells[0];
            let scheme = TimeScheme::new(cell.dt_factor * sys.dx)?
                .with_time_viscosity(cell.time_viscosity)
                .with_space_viscosity(cell.space_viscosity);
            let rep = gramian_constant(&sys, t_obs, true, &scheme, &l.executor())?;
            if !(rep.c_t > 0.0) {
                return Err(Error::Numerical(format!("C_T = {} on the coarsest mesh; set envelope.c_t", rep.c_t)));
            }
            rep.c_t
        }
    };
    let profile = ConvexityProfile::new(envelope_growth(l, env)?, env.beta.unwrap_or(1.0))?;
    Ok(EnvelopeSpec {
        profile,
        c_t,
        norm_b: env.norm_b,
        t_obs,
        variant: envelope_variant(env)?,
        onset: env.onset.unwrap_or(0.0),
    })
}

fn threshold_failures(l: &Loaded, r: &SweepResult) -> Vec<String> {
    let e = &l.cfg.experiment;
    let mut fails = Vec::new();
    for c in &r.cells {
        if let Some(err) = &c.error {
            fails.push(format!("n = {} cell {}: {err}", c.n, c.cell));
        }
    }
    if let Some(cells) = &e.cells {
        for c in cells {
            let Some(u) = r.uniformity_of(&c.label) else { continue };
            if let Some(max) = c.uniformity_max {
                if u.lower_bound || u.ratio.is_none_or(|x| x > max) {
                    fails.push(format!("uniformity[{}] = {:?} exceeds {max}", c.label, u.ratio));
                }
            }
            if let Some(min) = c.uniformity_min {
                if u.ratio.is_none_or(|x| x < min) {
                    fails.push(format!("uniformity[{}] = {:?} below {min}", c.label, u.ratio));
                }
            }
        }
    }
    for c in &r.cells {
        let tag = format!("n = {} cell {}", c.n, c.cell);
        if let Some(max) = e.envelope_ratio_max {
            if c.envelope_ratio.is_none_or(|x| x > max) {
                fails.push(format!("{tag}: envelope ratio {:?} exceeds {max}", c.envelope_ratio));
            }
        }
        let slope = c.fit.map(|f| f.slope);
        if let Some(min) = e.fit_slope_min {
            if slope.is_none_or(|x| x < min) {
                fails.push(format!("{tag}: fitted slope {slope:?} below {min}"));
            }
        }
        if let Some(max) = e.fit_slope_max {
            if slope.is_none_or(|x| x > max) {
                fails.push(format!("{tag}: fitted slope {slope:?} above {max}"));
            }
        }
        if let Some(min) = e.fit_r2_min {
            let r2 = c.fit.map(|f| f.r_squared);
            if r2.is_none_or(|x| x < min) {
                fails.push(format!("{tag}: fit r² {r2:?} below {min}"));
            }
        }
    }
    if let Some(max) = e.fit_slope_spread_max {
        for (j, label) in r.labels.iter().enumerate() {
            let slopes: Vec<f64> = (0..r.meshes.len()).filter_map(|i| r.cell(i, j).fit.map(|f| f.slope)).collect();
            let spread = slope_spread(&slopes);
            if slopes.len() != r.meshes.len() || spread.is_none_or(|s| s > max) {
                fails.push(format!("cell {label}: fitted slope spread {spread:?} exceeds {max}"));
            }
        }
    }
    fails
}

/// (max − min)/min of |slope|.
pub fn slope_spread(slopes: &[f64]) -> Option<f64> {
    let abs: Vec<f64> = slopes.iter().map(|s| s.abs()).collect();
    let lo = abs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = abs.iter().copied().fold(0.0, f64::max);
    (lo > 0.0 && lo.is_finite()).then(|| (hi - lo) / lo)
}

fn cmd_sweep(l: &Loaded, assert: bool) -> std::result::Result<String, CliError> {
    let spec = sweep_spec(l)?;
    let result = uniformity_sweep(&spec, &l.executor())?;
    l.prepare_out()?;
    fs::write(l.out.join("manifest.toml"), result.manifest.to_file_text())?;
    result.write_csvs(&l.out)?;
    let mut s = String::new();
    for (label, u) in result.labels.iter().zip(&result.uniformity) {
        let ratio = u.ratio.map_or_else(|| "NA".into(), num);
        let _ = writeln!(
            s,
            "uniformity_ratio[{label}] = {ratio}{}",
            if u.lower_bound { " (lower bound)" } else { "" }
        );
    }
    for c in &result.cells {
        if let Some(err) = &c.error {
            let _ = writeln!(s, "cell n = {} {} failed: {err}", c.n, c.cell);
        }
    }
    let _ = writeln!(s, "output = {}", l.out.display());
    if assert {
        let fails = threshold_failures(l, &result);
        if !fails.is_empty() {
            print!("{s}");
            return Err(CliError {
                code: EXIT_THRESHOLD,
                message: format!("threshold check failed:\n  {}", fails.join("\n  ")),
            });
        }
        let _ = writeln!(s, "thresholds: all met");
    }
    Ok(s)
}

fn cmd_audit(mut l: Loaded) -> Result<String> {
    if l.snapshots(SnapshotPolicy::All)? != SnapshotPolicy::All {
        return Err(Error::config("record.snapshots", "the audit needs every step; set it to \"all\" or leave it out"));
    }
    let (sys, scheme, u0) = build_run(&mut l)?;
    let t_obs = l.t_obs()?;
    let rep = lemma_audit(&sys, &scheme, &u0, t_obs)?;
    l.prepare_out()?;
    l.write_manifest()?;
    l.write("audit.txt", &rep.to_text())?;
    let mut s = rep.to_text();
    let _ = writeln!(s, "output = {}", l.out.display());
    if !rep.all_hold() {
        print!("{s}");
        return Err(Error::Audit("comparison inequality violated".into()));
    }
    Ok(s)
}

fn cmd_gramian(l: &Loaded) -> Result<String> {
    let t_obs = l.t_obs()?;
    let include = l.cfg.experiment.include_viscosity.unwrap_or(false);
    let spec = l.model_spec()?;
    let meshes = l.cfg.experiment.meshes.clone().unwrap_or_else(|| vec![spec.n]);
    let exec = l.executor();
    let mut csv = String::from("n,dim,dx,dt,t_obs,c_t,steps,symmetry_error,min_eigenvalue_rel,method\n");
    let mut s = String::new();
    for n in meshes {
        let sys = build_model(&spec.clone().with_n(n))?;
        let scheme = l.scheme(&sys)?;
        let rep = gramian_constant(&sys, t_obs, include, &scheme, &exec)?;
        let _ = writeln!(
            csv,
            "{n},{},{},{},{},{},{},{},{},{}",
            rep.n,
            num(sys.dx),
            num(scheme.dt),
            num(t_obs),
            num(rep.c_t),
            rep.steps,
            num(rep.symmetry_error),
            num(rep.min_eigenvalue_rel),
            rep.method
        );
        let _ = writeln!(s, "C_T(n = {n}, T = {t_obs}) = {}", num(rep.c_t));
    }
    l.prepare_out()?;
    l.write_manifest()?;
    l.write("gramian.csv", &csv)?;
    let _ = writeln!(s, "normalization: C_T·E(0) ≤ observed energy, E(0) = ½‖φ⁰‖²");
    let _ = writeln!(s, "output = {}", l.out.display());
    Ok(s)
}

/// E(kT) sampled every `scheme.steps_for(t_obs)` steps.
fn window_energies(traj: &TrajectoryRecord, steps_per_window: usize) -> Vec<f64> {
    traj.energies.iter().step_by(steps_per_window.max(1)).copied().collect()
}

fn cmd_envelope(mut l: Loaded) -> Result<String> {
    let env_cfg = l.cfg.envelope.take().unwrap_or_default();
    let variant = envelope_variant(&env_cfg)?;
    let growth = envelope_growth(&l, &env_cfg)?;
    let t_obs = positive("envelope.t_obs", env_cfg.t_obs.unwrap_or(2.0))?;
    let onset = env_cfg.onset.unwrap_or(0.0);
    let prefactor = positive("envelope.prefactor", env_cfg.prefactor.unwrap_or(1.0))?;
    let (beta_cfg, c_t_cfg, norm_b_cfg, rho_t) = (env_cfg.beta, env_cfg.c_t, env_cfg.norm_b, env_cfg.rho_t);

    let (sys, scheme, u0) = build_run(&mut l)?;
    let t_final = l.t_final()?;
    let traj = simulate(&sys, &scheme, &u0, t_final, RecordOptions::default()).map_err(|f| f.error)?;
    let c_t = match c_t_cfg {
        Some(c) => positive("envelope.c_t", c)?,
        None => gramian_constant(&sys, t_obs, true, &scheme, &l.executor())?.c_t,
    };
    let norm_b = norm_b_cfg.unwrap_or_else(|| sys.norm_b());
    let e0 = traj.initial_energy();
    let unit = ConvexityProfile::new(growth.clone(), 1.0)?;
    let beta = match beta_cfg {
        Some(b) => positive("envelope.beta", b)?,
        None => {
            let t2 = t_obs * t_obs;
            let k_t = 1.0 + t2 + t2 * norm_b + t2 * norm_b * norm_b;
            default_beta(&unit, e0, t_obs, norm_b, c_t, k_t)?
        }
    };
    let profile = unit.with_beta(beta)?;
    let env = DecayEnvelope::new(&profile, e0, t_obs, c_t, norm_b, prefactor, variant)?;
    let check = envelope_check(&traj, &env, onset)?;
    l.manifest
        .set("resolved.c_t", format!("{c_t:?}"))
        .set("resolved.beta", format!("{beta:?}"))
        .set("resolved.norm_b", format!("{norm_b:?}"));

    let calibrated = env.with_prefactor(check.calibrated_prefactor);
    let mut csv = String::from("time,energy,envelope\n");
    let stride = traj.times.len().div_ceil(2000).max(1);
    for k in (0..traj.times.len()).step_by(stride) {
        let t = traj.times[k];
        let v = calibrated.eval(t)?.map_or_else(|| "NA".into(), num);
        let _ = writeln!(csv, "{},{},{}", num(t), num(traj.energies[k]), v);
    }

    let windows = window_energies(&traj, scheme.steps_for(t_obs));
    let iteration = if windows.len() >= 2 {
        Some(discrete_iteration(&profile, &windows, rho_t))
    } else {
        None
    };

    l.prepare_out()?;
    l.write_manifest()?;
    l.write("envelope.csv", &csv)?;
    let mut s = String::new();
    let _ = writeln!(s, "mode = {:?}", env.mode);
    let _ = writeln!(s, "C_T = {}", num(c_t));
    let _ = writeln!(s, "beta = {}", num(beta));
    let _ = writeln!(s, "calibrated_prefactor = {}", num(check.calibrated_prefactor));
    let _ = writeln!(s, "max_ratio = {}", num(check.max_ratio));
    if check.onset_adjusted {
        let _ = writeln!(s, "onset adjusted to {}", num(check.onset));
    }
    match iteration {
        Some(Ok(rep)) => {
            let mut it = String::from("p,energy,m_bound,energy_bound,consistent\n");
            for w in &rep.windows {
                let _ = writeln!(
                    it,
                    "{},{},{},{},{}",
                    w.p,
                    num(w.energy),
                    num(w.m_bound),
                    w.energy_bound.map_or_else(|| "NA".into(), num),
                    w.consistent
                );
            }
            l.write("iteration.csv", &it)?;
            let _ = writeln!(
                s,
                "rho_T = {}{}; window bound consistent = {}",
                num(rep.rho_t),
                if rep.rho_calibrated { " (calibrated on the first window)" } else { "" },
                rep.all_consistent()
            );
        }
        Some(Err(e)) => {
            let _ = writeln!(s, "window iteration skipped: {e}");
        }
        None => {
            let _ = writeln!(s, "window iteration skipped: fewer than two windows");
        }
    }
    let _ = writeln!(s, "output = {}", l.out.display());
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_a_full_config() {
        let cfg = RunConfig::parse(
            r#"
            seed = 7
            [model]
            kind = "wave1d"
            n = 32
            support = [[0.2, 0.5]]
            [feedback]
            name = "power"
            p = 3.0
            [scheme]
            dt_factor = 0.5
            time_viscosity = "squared"
            [experiment]
            t_final = 1.0
            meshes = [8, 16, 32]
            cells = [{ label = "on", space_viscosity = true }]
            [record]
            snapshots = 10
            "#,
        )
        .unwrap();
        assert_eq!(cfg.seed, Some(7));
        assert_eq!(cfg.experiment.cells.as_ref().unwrap()[0].label, "on");
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = RunConfig::parse("[model]\nkinds = \"wave1d\"\n").unwrap_err();
        match err {
            Error::Config { field, .. } => assert_eq!(field, "model.kinds"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn slope_spread_is_relative() {
        assert_eq!(slope_spread(&[-1.0, -1.2, -1.1]), Some(0.19999999999999996));
        assert_eq!(slope_spread(&[]), None);
    }
}

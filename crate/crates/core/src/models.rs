//! Finite-difference assembly of the example systems
//! `u' + Au + BF(u) + dx^σ V u = 0` with energy ½uᵀMu.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::feedback::FeedbackMap;
use crate::linalg::{dot, CsrMatrix};
use crate::rng::Lcg64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Boundary {
    Dirichlet,
    Periodic,
}

/// Second-difference matrix on `n` nodes.
pub fn laplacian_1d(n: usize, dx: f64, bc: Boundary) -> Result<CsrMatrix> {
    if n < 2 {
        return Err(Error::Size(format!("laplacian needs n ≥ 2, got {n}")));
    }
    if !(dx > 0.0) {
        return Err(Error::Domain(format!("dx must be positive, got {dx}")));
    }
    let (d, o) = (-2.0 / (dx * dx), 1.0 / (dx * dx));
    let mut t = Vec::with_capacity(3 * n);
    for i in 0..n {
        t.push((i, i, d));
        match bc {
            Boundary::Dirichlet => {
                if i > 0 {
                    t.push((i, i - 1, o));
                }
                if i + 1 < n {
                    t.push((i, i + 1, o));
                }
            }
            Boundary::Periodic => {
                t.push((i, (i + n - 1) % n, o));
                t.push((i, (i + 1) % n, o));
            }
        }
    }
    Ok(CsrMatrix::from_triplets(n, n, &t))
}

/// Central first difference on a periodic grid.
pub fn central_difference_periodic(n: usize, dx: f64) -> Result<CsrMatrix> {
    if n < 3 {
        return Err(Error::Size(format!("periodic central difference needs n ≥ 3, got {n}")));
    }
    let c = 1.0 / (2.0 * dx);
    let mut t = Vec::with_capacity(2 * n);
    for i in 0..n {
        t.push((i, (i + 1) % n, c));
        t.push((i, (i + n - 1) % n, -c));
    }
    Ok(CsrMatrix::from_triplets(n, n, &t))
}

/// (n+1)×n forward differences with zero boundary values; DᵀD = −Δ.
fn forward_difference_dirichlet(n: usize, dx: f64) -> CsrMatrix {
    let mut t = Vec::with_capacity(2 * n);
    for j in 0..=n {
        if j < n {
            t.push((j, j, 1.0 / dx));
        }
        if j > 0 {
            t.push((j, j - 1, -1.0 / dx));
        }
    }
    CsrMatrix::from_triplets(n + 1, n, &t)
}

/// blockdiag(p, q) for rectangular blocks.
fn block_rect(p: &CsrMatrix, q: &CsrMatrix) -> CsrMatrix {
    let mut t = p.triplets();
    t.extend(q.triplets().into_iter().map(|(i, j, v)| (p.nrows() + i, p.ncols() + j, v)));
    CsrMatrix::from_triplets(p.nrows() + q.nrows(), p.ncols() + q.ncols(), &t)
}

/// Nonnegative damping coefficient sampled on the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DampingField {
    pub b: Vec<f64>,
    pub support: Vec<(f64, f64)>,
    pub alpha: f64,
}

impl DampingField {
    /// b = alpha on the open intervals of `support`, 0 elsewhere.
    pub fn indicator(positions: &[f64], support: &[(f64, f64)], alpha: f64) -> Result<Self> {
        if alpha < 0.0 {
            return Err(Error::config("model.damping.alpha", "must be nonnegative"));
        }
        for &(a, b) in support {
            if !(a < b) {
                return Err(Error::config("model.damping.support", format!("empty interval ({a}, {b})")));
            }
        }
        let b = positions
            .iter()
            .map(|&x| {
                if support.iter().any(|&(lo, hi)| x > lo && x < hi) {
                    alpha
                } else {
                    0.0
                }
            })
            .collect();
        Ok(Self {
            b,
            support: support.to_vec(),
            alpha,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Wave1d,
    Transport1d,
    Schrodinger1d,
    Beam1d,
    Custom,
}

impl ModelKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "wave1d" => Some(Self::Wave1d),
            "transport1d" => Some(Self::Transport1d),
            "schrodinger1d" => Some(Self::Schrodinger1d),
            "beam1d" => Some(Self::Beam1d),
            "custom" => Some(Self::Custom),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Wave1d => "wave1d",
            Self::Transport1d => "transport1d",
            Self::Schrodinger1d => "schrodinger1d",
            Self::Beam1d => "beam1d",
            Self::Custom => "custom",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Viscosity {
    None,
    /// −Δ on the damped block (σ = 2 by default)
    LaplacianBlock,
    /// √(A*A) + eps·I, dense
    SqrtAA { eps: f64 },
}

impl Viscosity {
    pub fn name(&self) -> &'static str {
        match self {
            Viscosity::None => "none",
            Viscosity::LaplacianBlock => "laplacian_block",
            Viscosity::SqrtAA { .. } => "sqrtAA",
        }
    }
}

/// Where the feedback acts inside the state vector.
#[derive(Debug, Clone, PartialEq)]
pub enum FeedbackLayout {
    /// ρ applied componentwise to `u[offset..offset+len]`
    Block { offset: usize, len: usize },
    /// complex values stored as [Re | Im]; ρ acts on the modulus
    ComplexPairs { n: usize },
}

/// Feedback map lifted to full state vectors.
#[derive(Debug, Clone)]
pub struct LiftedFeedback {
    pub map: FeedbackMap,
    pub layout: FeedbackLayout,
    pub positions: Vec<f64>,
}

/// Sparse Jacobian of the lifted feedback plus an optional rank-one term
/// `u wᵀ` (nonlocal maps).
#[derive(Debug, Clone)]
pub struct LiftedJacobian {
    pub sparse: CsrMatrix,
    pub rank_one: Option<(Vec<f64>, Vec<f64>)>,
}

impl LiftedFeedback {
    pub fn apply(&self, u: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; u.len()];
        match &self.layout {
            FeedbackLayout::Block { offset, len } => {
                self.map
                    .apply_into(&self.positions, &u[*offset..offset + len], &mut out[*offset..offset + len])?;
            }
            FeedbackLayout::ComplexPairs { n } => {
                let n = *n;
                for i in 0..n {
                    let (a, b) = (u[i], u[n + i]);
                    let phi = self.modulus_ratio(self.positions[i], a.hypot(b))?;
                    out[i] = phi * a;
                    out[n + i] = phi * b;
                }
            }
        }
        Ok(out)
    }

    /// ρ(r)/r with the removable singularity at r = 0 filled by ρ'(0).
    fn modulus_ratio(&self, x: f64, r: f64) -> Result<f64> {
        let rho = self
            .map
            .rho(x, r)
            .ok_or_else(|| Error::ModelAssembly("modulus feedback needs a local map".into()))?;
        if r == 0.0 {
            return Ok(self.map.rho_prime(x, 0.0).unwrap_or(0.0));
        }
        Ok(rho / r)
    }

    pub fn jacobian(&self, u: &[f64]) -> Result<LiftedJacobian> {
        let dim = u.len();
        match &self.layout {
            FeedbackLayout::Block { offset, len } => {
                let j = self.map.jacobian(&self.positions, &u[*offset..offset + len])?;
                let t: Vec<_> = j
                    .diag
                    .iter()
                    .enumerate()
                    .map(|(i, d)| (offset + i, offset + i, *d))
                    .collect();
                let rank_one = j.rank_one.map(|(a, c)| {
                    let mut ua = vec![0.0; dim];
                    let mut wc = vec![0.0; dim];
                    ua[*offset..offset + len].copy_from_slice(&a);
                    wc[*offset..offset + len].copy_from_slice(&c);
                    (ua, wc)
                });
                Ok(LiftedJacobian {
                    sparse: CsrMatrix::from_triplets(dim, dim, &t),
                    rank_one,
                })
            }
            FeedbackLayout::ComplexPairs { n } => {
                let n = *n;
                let mut t = Vec::with_capacity(4 * n);
                for i in 0..n {
                    let (a, b) = (u[i], u[n + i]);
                    let x = self.positions[i];
                    let r = a.hypot(b);
                    let phi = self.modulus_ratio(x, r)?;
                    let (mut aa, mut ab, mut bb) = (phi, 0.0, phi);
                    if r > 0.0 {
                        let c = (self.map.rho_prime(x, r).unwrap_or(0.0) - phi) / (r * r);
                        aa += c * a * a;
                        ab += c * a * b;
                        bb += c * b * b;
                    }
                    t.push((i, i, aa));
                    t.push((i, n + i, ab));
                    t.push((n + i, i, ab));
                    t.push((n + i, n + i, bb));
                }
                Ok(LiftedJacobian {
                    sparse: CsrMatrix::from_triplets(dim, dim, &t),
                    rank_one: None,
                })
            }
        }
    }
}

/// Finite-dimensional damped system with its energy metric.
#[derive(Debug, Clone)]
pub struct SemiDiscreteSystem {
    pub kind: ModelKind,
    /// state dimension
    pub n: usize,
    /// number of grid nodes
    pub nodes: usize,
    pub dx: f64,
    pub length: f64,
    pub sigma: f64,
    pub a: CsrMatrix,
    pub b: CsrMatrix,
    pub v: CsrMatrix,
    pub m: CsrMatrix,
    /// R with M = RᵀR; energies are then sums of squares
    pub energy_factor: Option<CsrMatrix>,
    pub feedback: LiftedFeedback,
    pub viscosity: Viscosity,
    pub labels: Vec<String>,
    pub positions: Vec<f64>,
    pub damping: DampingField,
}

impl SemiDiscreteSystem {
    pub fn energy(&self, u: &[f64]) -> f64 {
        0.5 * self.norm_sq(u)
    }

    /// ‖u‖²_M
    pub fn norm_sq(&self, u: &[f64]) -> f64 {
        match &self.energy_factor {
            Some(r) => {
                let ru = r.matvec(u);
                dot(&ru, &ru)
            }
            None => self.m.bilinear(u, u),
        }
    }

    /// ⟨x, y⟩_M
    pub fn inner(&self, x: &[f64], y: &[f64]) -> f64 {
        match &self.energy_factor {
            Some(r) => dot(&r.matvec(x), &r.matvec(y)),
            None => self.m.bilinear(x, y),
        }
    }

    /// dx^σ
    pub fn visc_scale(&self) -> f64 {
        self.dx.powf(self.sigma)
    }

    pub fn has_viscosity(&self) -> bool {
        self.v.nnz() > 0
    }

    pub fn has_damping(&self) -> bool {
        self.b.nnz() > 0
    }

    /// ‖B‖ in the M-norm (largest eigenvalue of the M-self-adjoint B).
    pub fn norm_b(&self) -> f64 {
        max_eigenvalue_metric(&self.b, &self.m)
    }

    /// Same system with the feedback replaced.
    pub fn with_feedback(&self, map: &FeedbackMap) -> Self {
        let mut s = self.clone();
        s.feedback.map = map.bind_grid(self.feedback.positions.len(), self.dx, self.length);
        s
    }
}

/// Largest eigenvalue of an M-self-adjoint PSD operator: dense for small
/// systems, power iteration in the M-inner product otherwise.
pub fn max_eigenvalue_metric(op: &CsrMatrix, m: &CsrMatrix) -> f64 {
    if op.nnz() == 0 {
        return 0.0;
    }
    let n = op.nrows();
    if n <= 512 {
        let mo = m.matmul(op).expect("square operators").to_dense();
        if let Ok(v) = generalized_extreme_eigenvalues(&mo, &m.to_dense()) {
            return v.1;
        }
    }
    let mut rng = Lcg64::new(11);
    let mut x = rng.vector(n, -1.0, 1.0);
    let mut lambda = 0.0;
    for _ in 0..2000 {
        let y = op.matvec(&x);
        let num = m.bilinear(&x, &y);
        let den = m.bilinear(&x, &x);
        let new = num / den;
        let ny = m.bilinear(&y, &y).sqrt();
        if ny == 0.0 {
            return 0.0;
        }
        x = y.iter().map(|v| v / ny).collect();
        if (new - lambda).abs() <= 1e-12 * new.abs() {
            return new;
        }
        lambda = new;
    }
    lambda
}

/// Smallest and largest eigenvalue of the symmetric pencil (S, M).
fn generalized_extreme_eigenvalues(s: &DMatrix<f64>, m: &DMatrix<f64>) -> Result<(f64, f64)> {
    let l = m
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical("metric is not positive definite".into()))?
        .l();
    let linv = l
        .try_inverse()
        .ok_or_else(|| Error::Numerical("singular metric factor".into()))?;
    let c = &linv * s * linv.transpose();
    let c = (&c + c.transpose()) * 0.5;
    let e = SymmetricEigen::new(c).eigenvalues;
    let lo = e.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = e.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok((lo, hi))
}

/// M-self-adjoint square root of A*A (A* = M⁻¹AᵀM) plus eps·I.
pub fn viscosity_sqrt_aa(a: &CsrMatrix, m: &CsrMatrix, eps: f64) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if n > 512 {
        return Err(Error::Size(format!(
            "sqrtAA viscosity needs a dense eigendecomposition; dimension {n} > 512, use laplacian_block"
        )));
    }
    let l = m
        .to_dense()
        .cholesky()
        .ok_or_else(|| Error::ModelAssembly("metric M is not positive definite".into()))?
        .l();
    let linv = l
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::ModelAssembly("metric factor is singular".into()))?;
    // Â = Lᵀ A L⁻ᵀ satisfies Lᵀ(A*A)L⁻ᵀ = ÂᵀÂ
    let ahat = l.transpose() * a.to_dense() * linv.transpose();
    let ata = ahat.transpose() * &ahat;
    let ata = (&ata + ata.transpose()) * 0.5;
    let eig = SymmetricEigen::new(ata);
    let sqrt_vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    let s = &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals) * eig.eigenvectors.transpose();
    Ok(linv.transpose() * s * l.transpose() + DMatrix::identity(n, n) * eps)
}

/// Matrices of a user-supplied system.
#[derive(Debug, Clone, Default)]
pub struct CustomMatrices {
    pub a: Option<CsrMatrix>,
    pub b: Option<CsrMatrix>,
    pub v: Option<CsrMatrix>,
    pub m: Option<CsrMatrix>,
    pub damped_offset: usize,
    pub damped_len: Option<usize>,
}

/// Reads a coordinate-format matrix: header `n nnz`, then `row col value`
/// lines with 0-based indices.
pub fn load_coo(path: &Path) -> Result<CsrMatrix> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    parse_coo(&text).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

pub fn parse_coo(text: &str) -> std::result::Result<CsrMatrix, String> {
    let mut lines = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'));
    let header = lines.next().ok_or("empty matrix file")?;
    let h: Vec<&str> = header.split_whitespace().collect();
    if h.len() != 2 {
        return Err(format!("header must be `n nnz`, got `{header}`"));
    }
    let n: usize = h[0].parse().map_err(|_| format!("bad dimension `{}`", h[0]))?;
    let nnz: usize = h[1].parse().map_err(|_| format!("bad entry count `{}`", h[1]))?;
    let mut t = Vec::with_capacity(nnz);
    for line in lines {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 3 {
            return Err(format!("expected `row col value`, got `{line}`"));
        }
        let i: usize = f[0].parse().map_err(|_| format!("bad row `{}`", f[0]))?;
        let j: usize = f[1].parse().map_err(|_| format!("bad column `{}`", f[1]))?;
        let v: f64 = f[2].parse().map_err(|_| format!("bad value `{}`", f[2]))?;
        if i >= n || j >= n {
            return Err(format!("entry ({i}, {j}) outside {n}×{n}"));
        }
        t.push((i, j, v));
    }
    if t.len() != nnz {
        return Err(format!("header promises {nnz} entries, found {}", t.len()));
    }
    Ok(CsrMatrix::from_triplets(n, n, &t))
}

/// Everything needed to assemble a system.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// grid nodes (for custom: ignored, dimension comes from the matrices)
    pub n: usize,
    pub length: f64,
    pub support: Vec<(f64, f64)>,
    pub alpha: f64,
    pub feedback: FeedbackMap,
    pub sigma: f64,
    pub viscosity: Viscosity,
    pub custom: Option<CustomMatrices>,
}

impl ModelSpec {
    pub fn new(kind: ModelKind, n: usize, feedback: FeedbackMap) -> Self {
        Self {
            kind,
            n,
            length: 1.0,
            support: vec![(0.2, 0.5)],
            alpha: 1.0,
            feedback,
            sigma: 2.0,
            viscosity: Viscosity::LaplacianBlock,
            custom: None,
        }
    }

    pub fn with_support(mut self, support: Vec<(f64, f64)>, alpha: f64) -> Self {
        self.support = support;
        self.alpha = alpha;
        self
    }

    pub fn with_viscosity(mut self, viscosity: Viscosity) -> Self {
        self.viscosity = viscosity;
        self
    }

    pub fn with_n(mut self, n: usize) -> Self {
        self.n = n;
        self
    }
}

fn block_identity(n: usize, scale: f64) -> CsrMatrix {
    CsrMatrix::from_diagonal(&vec![scale; n])
}

/// Assembles a model and verifies its structural invariants.
pub fn build_model(spec: &ModelSpec) -> Result<SemiDiscreteSystem> {
    let sys = assemble(spec)?;
    let report = check_structure(&sys);
    if let Some(v) = report.violations.first() {
        return Err(Error::ModelAssembly(format!("{} violates {}", spec.kind.name(), v)));
    }
    Ok(sys)
}

/// Assembles a model without checking invariants.
pub fn assemble(spec: &ModelSpec) -> Result<SemiDiscreteSystem> {
    if spec.kind == ModelKind::Custom {
        return assemble_custom(spec);
    }
    let nn = spec.n;
    if nn < 2 {
        return Err(Error::config("model.n", format!("need at least 2 nodes, got {nn}")));
    }
    if !(spec.length > 0.0) {
        return Err(Error::config("model.length", "must be positive"));
    }
    let periodic = spec.kind == ModelKind::Transport1d;
    let dx = if periodic {
        spec.length / nn as f64
    } else {
        spec.length / (nn + 1) as f64
    };
    let positions: Vec<f64> = if periodic {
        (0..nn).map(|i| i as f64 * dx).collect()
    } else {
        (1..=nn).map(|i| i as f64 * dx).collect()
    };
    let damping = DampingField::indicator(&positions, &spec.support, spec.alpha)?;
    let bdiag = CsrMatrix::from_diagonal(&damping.b);
    let map = spec.feedback.bind_grid(nn, dx, spec.length);

    let sqdx = dx.sqrt();
    let (a, b, v_block, m, factor, layout, labels) = match spec.kind {
        ModelKind::Wave1d | ModelKind::Beam1d => {
            let lap = laplacian_1d(nn, dx, Boundary::Dirichlet)?;
            let id = block_identity(nn, 1.0);
            let neg_lap = lap.scale(-1.0);
            let (stiff, label) = if spec.kind == ModelKind::Wave1d {
                (neg_lap.clone(), "displacement")
            } else {
                (lap.matmul(&lap)?, "deflection")
            };
            // A = [[0, −I], [K, 0]] with K = −Δ (wave) or Δ² (beam)
            let a = CsrMatrix::block2x2(nn, nn, None, Some(&id.scale(-1.0)), Some(&stiff), None);
            let b = CsrMatrix::block2x2(nn, nn, None, None, None, Some(&bdiag));
            let v = CsrMatrix::block2x2(nn, nn, None, None, None, Some(&neg_lap));
            let m = CsrMatrix::block2x2(nn, nn, Some(&stiff.scale(dx)), None, None, Some(&block_identity(nn, dx)));
            let ry = if spec.kind == ModelKind::Wave1d {
                forward_difference_dirichlet(nn, dx)
            } else {
                lap.clone()
            };
            let r = block_rect(&ry.scale(sqdx), &block_identity(nn, sqdx));
            let layout = FeedbackLayout::Block { offset: nn, len: nn };
            (a, b, v, m, r, layout, vec![label.to_string(), "velocity".to_string()])
        }
        ModelKind::Transport1d => {
            let a = central_difference_periodic(nn, dx)?;
            let v = laplacian_1d(nn, dx, Boundary::Periodic)?.scale(-1.0);
            let m = block_identity(nn, dx);
            let layout = FeedbackLayout::Block { offset: 0, len: nn };
            (a, bdiag, v, m, block_identity(nn, sqdx), layout, vec!["density".to_string()])
        }
        ModelKind::Schrodinger1d => {
            if !map.is_local() {
                return Err(Error::config("feedback.name", "schrodinger1d needs a local feedback"));
            }
            let lap = laplacian_1d(nn, dx, Boundary::Dirichlet)?;
            let a = CsrMatrix::block2x2(nn, nn, None, Some(&lap.scale(-1.0)), Some(&lap), None);
            let b = CsrMatrix::block2x2(nn, nn, Some(&bdiag), None, None, Some(&bdiag));
            let neg_lap = lap.scale(-1.0);
            let v = CsrMatrix::block2x2(nn, nn, Some(&neg_lap), None, None, Some(&neg_lap));
            let m = block_identity(2 * nn, dx);
            let r = block_identity(2 * nn, sqdx);
            (a, b, v, m, r, FeedbackLayout::ComplexPairs { n: nn }, vec!["real".to_string(), "imag".to_string()])
        }
        ModelKind::Custom => unreachable!(),
    };

    let v = match spec.viscosity {
        Viscosity::None => CsrMatrix::zeros(a.nrows(), a.ncols()),
        Viscosity::LaplacianBlock => v_block,
        Viscosity::SqrtAA { eps } => CsrMatrix::from_dense(&viscosity_sqrt_aa(&a, &m, eps)?),
    };

    Ok(SemiDiscreteSystem {
        kind: spec.kind,
        n: a.nrows(),
        nodes: nn,
        dx,
        length: spec.length,
        sigma: spec.sigma,
        a,
        b,
        v,
        m,
        energy_factor: Some(factor),
        feedback: LiftedFeedback {
            map,
            layout,
            positions: positions.clone(),
        },
        viscosity: spec.viscosity,
        labels,
        positions,
        damping,
    })
}

fn assemble_custom(spec: &ModelSpec) -> Result<SemiDiscreteSystem> {
    let c = spec
        .custom
        .as_ref()
        .ok_or_else(|| Error::config("model.custom", "custom model needs matrices"))?;
    let a = c.a.clone().ok_or_else(|| Error::config("model.custom.A", "missing"))?;
    let n = a.nrows();
    let get = |m: &Option<CsrMatrix>, name: &str, default: CsrMatrix| -> Result<CsrMatrix> {
        let m = m.clone().unwrap_or(default);
        if m.nrows() != n || m.ncols() != n {
            return Err(Error::config(
                format!("model.custom.{name}"),
                format!("is {}×{}, expected {n}×{n}", m.nrows(), m.ncols()),
            ));
        }
        Ok(m)
    };
    let b = get(&c.b, "B", CsrMatrix::zeros(n, n))?;
    let m = get(&c.m, "M", CsrMatrix::identity(n))?;
    let v = match spec.viscosity {
        Viscosity::None => CsrMatrix::zeros(n, n),
        Viscosity::LaplacianBlock => get(&c.v, "V", CsrMatrix::zeros(n, n))?,
        Viscosity::SqrtAA { eps } => CsrMatrix::from_dense(&viscosity_sqrt_aa(&a, &m, eps)?),
    };
    let len = c.damped_len.unwrap_or(n - c.damped_offset.min(n));
    if c.damped_offset + len > n {
        return Err(Error::config("model.custom.damped_len", "damped block exceeds the state"));
    }
    let dx = spec.length / (len + 1) as f64;
    let positions: Vec<f64> = (1..=len).map(|i| i as f64 * dx).collect();
    let damping = DampingField {
        b: b.diagonal()[c.damped_offset..c.damped_offset + len].to_vec(),
        support: Vec::new(),
        alpha: 0.0,
    };
    Ok(SemiDiscreteSystem {
        kind: ModelKind::Custom,
        n,
        nodes: len,
        dx,
        length: spec.length,
        sigma: spec.sigma,
        a,
        b,
        v,
        m,
        energy_factor: None,
        feedback: LiftedFeedback {
            map: spec.feedback.bind_grid(len, dx, spec.length),
            layout: FeedbackLayout::Block {
                offset: c.damped_offset,
                len,
            },
            positions: positions.clone(),
        },
        viscosity: spec.viscosity,
        labels: vec!["state".into()],
        positions,
        damping,
    })
}

/// Margins of the structural invariants. Negative margins are violations.
#[derive(Debug, Clone, PartialEq)]
pub struct StructureReport {
    /// ‖MA + AᵀM‖_max / ‖MA‖_max
    pub skewness: f64,
    /// smallest eigenvalue of the pencil (MB, M), when computed
    pub mb_min_eig: Option<f64>,
    pub mv_min_eig: Option<f64>,
    /// min over random u of ⟨u, BF(u)⟩_M + dx^σ⟨Vu, u⟩_M, relative to ‖u‖²_M
    pub dissipativity: f64,
    /// dx^σ·λ_max(V, M)
    pub viscosity_bound: f64,
    pub viscosity_disabled: bool,
    pub violations: Vec<String>,
}

impl StructureReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn check_structure(sys: &SemiDiscreteSystem) -> StructureReport {
    let mut violations = Vec::new();
    let ma = sys.m.matmul(&sys.a).expect("square");
    let sum = ma.add(1.0, &ma.transpose(), 1.0).expect("same shape");
    let scale = ma.max_abs();
    let skewness = if scale == 0.0 { 0.0 } else { sum.max_abs() / scale };
    if skewness > 1e-12 {
        violations.push(format!("M-skewness of A (‖MA + AᵀM‖/‖MA‖ = {skewness:e})"));
    }

    let symmetric_psd = |op: &CsrMatrix, name: &str, violations: &mut Vec<String>| -> Option<f64> {
        let mo = sys.m.matmul(op).expect("square");
        let asym = mo.add(1.0, &mo.transpose(), -1.0).expect("same shape").max_abs();
        if asym > 1e-12 * mo.max_abs().max(1e-300) {
            violations.push(format!("symmetry of M{name} (asymmetry {asym:e})"));
        }
        if sys.n > 512 || mo.nnz() == 0 {
            return if mo.nnz() == 0 { Some(0.0) } else { None };
        }
        let (lo, hi) = generalized_extreme_eigenvalues(&mo.to_dense(), &sys.m.to_dense()).ok()?;
        if lo < -1e-10 * hi.abs().max(1.0) {
            violations.push(format!("positive semidefiniteness of M{name} (λ_min = {lo:e})"));
        }
        Some(lo)
    };
    let mb_min_eig = symmetric_psd(&sys.b, "B", &mut violations);
    let mv_min_eig = symmetric_psd(&sys.v, "V", &mut violations);

    let mut rng = Lcg64::new(2024);
    let mut dissipativity = f64::INFINITY;
    for k in 0..20 {
        let amp = 10f64.powi(k % 5 - 2);
        let u = rng.vector(sys.n, -amp, amp);
        let norm = sys.inner(&u, &u);
        if let Ok(f) = sys.feedback.apply(&u) {
            let bf = sys.b.matvec(&f);
            let vu = sys.v.matvec(&u);
            let d = sys.inner(&u, &bf) + sys.visc_scale() * sys.inner(&vu, &u);
            dissipativity = dissipativity.min(d / norm.max(1e-300));
        }
    }
    if dissipativity < -1e-12 {
        violations.push(format!("dissipativity ⟨u, BF(u)⟩ + dx^σ⟨Vu, u⟩ ≥ 0 (relative {dissipativity:e})"));
    }

    let viscosity_disabled = sys.v.nnz() == 0;
    let viscosity_bound = if viscosity_disabled {
        0.0
    } else {
        sys.visc_scale() * max_eigenvalue_metric(&sys.v, &sys.m)
    };
    StructureReport {
        skewness,
        mb_min_eig,
        mv_min_eig,
        dissipativity,
        viscosity_bound,
        viscosity_disabled,
        violations,
    }
}

/// Initial-data families used by experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Probe {
    /// low-frequency profile sampled on the grid
    Smooth,
    /// Nyquist-alternating velocity on nodes in (0.6, 0.9)·L, unit L² norm
    HighFreq,
    /// seeded uniform noise in [−1, 1]
    Random,
}

impl Probe {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "smooth" => Some(Self::Smooth),
            "highfreq" => Some(Self::HighFreq),
            "random" => Some(Self::Random),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Smooth => "smooth",
            Self::HighFreq => "highfreq",
            Self::Random => "random",
        }
    }
}

/// Builds an initial state of the given family, scaled by `amplitude`.
pub fn initial_state(sys: &SemiDiscreteSystem, probe: Probe, amplitude: f64, seed: u64) -> Vec<f64> {
    let n = sys.n;
    let nodes = sys.nodes;
    let l = sys.length;
    let mut u = vec![0.0; n];
    match probe {
        Probe::Random => {
            let mut rng = Lcg64::new(seed);
            for x in u.iter_mut() {
                *x = amplitude * rng.uniform(-1.0, 1.0);
            }
        }
        Probe::Smooth => match sys.kind {
            ModelKind::Transport1d => {
                for (i, x) in sys.positions.iter().enumerate() {
                    u[i] = amplitude * (2.0 * PI * x / l).sin();
                }
            }
            ModelKind::Custom => {
                for (i, x) in u.iter_mut().enumerate() {
                    *x = amplitude * (PI * (i + 1) as f64 / (n + 1) as f64).sin();
                }
            }
            _ => {
                for (i, x) in sys.positions.iter().enumerate() {
                    u[i] = amplitude * (PI * x / l).sin();
                }
            }
        },
        Probe::HighFreq => {
            let (offset, positions) = match &sys.feedback.layout {
                FeedbackLayout::Block { offset, .. } => (*offset, &sys.feedback.positions),
                FeedbackLayout::ComplexPairs { .. } => (0, &sys.positions),
            };
            let mut sign = 1.0;
            for (i, x) in positions.iter().enumerate().take(nodes) {
                if *x > 0.6 * l && *x < 0.9 * l {
                    u[offset + i] = sign;
                    sign = -sign;
                }
            }
            let norm = (sys.dx * dot(&u, &u)).sqrt();
            if norm > 0.0 {
                u.iter_mut().for_each(|x| *x *= amplitude / norm);
            }
        }
    }
    u
}

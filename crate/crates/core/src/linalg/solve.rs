use nalgebra::{DMatrix, DVector};

use super::csr::{axpy, dot, CsrMatrix};
use super::order::reverse_cuthill_mckee;
use crate::error::{Error, Result};

/// Banded LU with partial pivoting (LAPACK `gbtf2` layout).
#[derive(Debug, Clone)]
pub struct BandLu {
    n: usize,
    kl: usize,
    ku: usize,
    ldab: usize,
    ab: Vec<f64>,
    ipiv: Vec<usize>,
}

impl BandLu {
    pub fn factor(a: &CsrMatrix) -> Result<Self> {
        let n = a.nrows();
        let (kl, ku) = a.bandwidth();
        let ldab = 2 * kl + ku + 1;
        let mut lu = Self {
            n,
            kl,
            ku,
            ldab,
            ab: vec![0.0; ldab * n],
            ipiv: vec![0; n],
        };
        for (i, j, v) in a.triplets() {
            let k = lu.idx(i, j);
            lu.ab[k] = v;
        }
        lu.decompose()?;
        Ok(lu)
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        (self.kl + self.ku + i - j) + j * self.ldab
    }

    fn decompose(&mut self) -> Result<()> {
        let (n, kl, ku) = (self.n, self.kl, self.ku);
        for k in 0..n {
            let last_row = (k + kl).min(n - 1);
            let mut p = k;
            let mut best = self.ab[self.idx(k, k)].abs();
            for i in k + 1..=last_row {
                let v = self.ab[self.idx(i, k)].abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            self.ipiv[k] = p;
            if best == 0.0 {
                return Err(Error::Solver(format!("singular matrix at pivot {k}")));
            }
            let last_col = (k + ku + kl).min(n - 1);
            if p != k {
                for j in k..=last_col {
                    let (a, b) = (self.idx(k, j), self.idx(p, j));
                    self.ab.swap(a, b);
                }
            }
            let pivot = self.ab[self.idx(k, k)];
            for i in k + 1..=last_row {
                let li = self.idx(i, k);
                let l = self.ab[li] / pivot;
                self.ab[li] = l;
                if l == 0.0 {
                    continue;
                }
                for j in k + 1..=last_col {
                    let kj = self.ab[self.idx(k, j)];
                    let ij = self.idx(i, j);
                    self.ab[ij] -= l * kj;
                }
            }
        }
        Ok(())
    }

    pub fn solve_in_place(&self, b: &mut [f64]) {
        let (n, kl, ku) = (self.n, self.kl, self.ku);
        for k in 0..n {
            let p = self.ipiv[k];
            if p != k {
                b.swap(k, p);
            }
            let bk = b[k];
            if bk != 0.0 {
                for i in k + 1..=(k + kl).min(n - 1) {
                    b[i] -= self.ab[self.idx(i, k)] * bk;
                }
            }
        }
        for k in (0..n).rev() {
            let mut acc = b[k];
            for j in k + 1..=(k + ku + kl).min(n - 1) {
                acc -= self.ab[self.idx(k, j)] * b[j];
            }
            b[k] = acc / self.ab[self.idx(k, k)];
        }
    }

    pub fn bandwidth(&self) -> (usize, usize) {
        (self.kl, self.ku)
    }
}

/// Direct factorization of a sparse square matrix: banded LU after a
/// bandwidth-reducing reordering, or dense LU when the band is too wide.
#[derive(Debug, Clone)]
pub enum Factorization {
    Band { lu: BandLu, perm: Vec<usize> },
    Dense(nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>),
}

/// Above this many rows a wide-band matrix is not factored densely.
pub const DENSE_LIMIT: usize = 2048;

impl Factorization {
    pub fn new(a: &CsrMatrix) -> Result<Self> {
        let perm = reverse_cuthill_mckee(a);
        Self::with_ordering(a, perm)
    }

    /// Reuses an ordering computed for a matrix with the same pattern.
    pub fn with_ordering(a: &CsrMatrix, perm: Vec<usize>) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::Shape("factorization needs a square matrix".into()));
        }
        let n = a.nrows();
        let pa = a.permute(&perm);
        let (kl, ku) = pa.bandwidth();
        if n > 64 && (kl + ku) * 4 > n {
            if n > DENSE_LIMIT {
                return Err(Error::Size(format!(
                    "matrix of order {n} has bandwidth {} and is too large for a dense factorization",
                    kl + ku
                )));
            }
            let lu = a.to_dense().lu();
            if !lu.is_invertible() {
                return Err(Error::Solver("singular matrix".into()));
            }
            return Ok(Factorization::Dense(lu));
        }
        Ok(Factorization::Band {
            lu: BandLu::factor(&pa)?,
            perm,
        })
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        match self {
            Factorization::Band { lu, perm } => {
                let mut pb: Vec<f64> = perm.iter().map(|&old| b[old]).collect();
                lu.solve_in_place(&mut pb);
                let mut x = vec![0.0; b.len()];
                for (new, &old) in perm.iter().enumerate() {
                    x[old] = pb[new];
                }
                x
            }
            Factorization::Dense(lu) => {
                let rhs = DVector::from_column_slice(b);
                lu.solve(&rhs)
                    .map(|x| x.as_slice().to_vec())
                    .unwrap_or_else(|| vec![f64::NAN; b.len()])
            }
        }
    }
}

/// Solves `(J + a cᵀ) x = r` given a factorization of `J`.
pub fn sherman_morrison(j: &Factorization, a: &[f64], c: &[f64], r: &[f64]) -> Result<Vec<f64>> {
    let y = j.solve(r);
    let z = j.solve(a);
    let denom = 1.0 + dot(c, &z);
    if denom.abs() < 1e-300 {
        return Err(Error::Solver("rank-one update makes the matrix singular".into()));
    }
    let coef = dot(c, &y) / denom;
    let mut x = y;
    axpy(-coef, &z, &mut x);
    Ok(x)
}

/// Conjugate gradients for `P x = b` where `P` is self-adjoint and positive
/// definite in the inner product `⟨x, y⟩ = xᵀ M y`.
pub fn cg_metric(p: &CsrMatrix, m: &CsrMatrix, b: &[f64], tol: f64, max_iter: usize) -> Result<Vec<f64>> {
    let n = b.len();
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut d = r.clone();
    let inner = |u: &[f64], v: &[f64]| m.bilinear(u, v);
    let bnorm = inner(b, b).sqrt();
    if bnorm == 0.0 {
        return Ok(x);
    }
    let mut rr = inner(&r, &r);
    for _ in 0..max_iter {
        if rr.sqrt() <= tol * bnorm {
            return Ok(x);
        }
        let pd = p.matvec(&d);
        let alpha = rr / inner(&d, &pd);
        axpy(alpha, &d, &mut x);
        axpy(-alpha, &pd, &mut r);
        let rr_new = inner(&r, &r);
        let beta = rr_new / rr;
        for (di, ri) in d.iter_mut().zip(&r) {
            *di = ri + beta * *di;
        }
        rr = rr_new;
    }
    if rr.sqrt() <= tol * bnorm {
        Ok(x)
    } else {
        Err(Error::Solver(format!(
            "conjugate gradients stalled at relative residual {:e}",
            rr.sqrt() / bnorm
        )))
    }
}

/// Smallest generalized eigenvalue of the symmetric pencil (G, W) with W SPD.
pub fn min_generalized_eigenvalue(g: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<f64> {
    let chol = w
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical("normalization matrix is not positive definite".into()))?;
    let l = chol.l();
    let linv = l
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Numerical("Cholesky factor not invertible".into()))?;
    let mut s = &linv * g * linv.transpose();
    let st = s.transpose();
    s = (&s + st) * 0.5;
    let eig = nalgebra::SymmetricEigen::new(s);
    let (i, lambda) = eig
        .eigenvalues
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
    // Rayleigh quotient on x = L⁻ᵀy recovers the eigenvalue to working precision
    let x = linv.transpose() * eig.eigenvectors.column(i);
    let den = (w * &x).dot(&x);
    if den > 0.0 {
        let rq = (g * &x).dot(&x) / den;
        let scale = eig.eigenvalues.amax();
        if rq.is_finite() && (rq - lambda).abs() <= 1e-8 * lambda.abs().max(1e-8 * scale) {
            return Ok(rq);
        }
    }
    Ok(lambda)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tridiag(n: usize, lo: f64, d: f64, up: f64) -> CsrMatrix {
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, d));
            if i > 0 {
                t.push((i, i - 1, lo));
            }
            if i + 1 < n {
                t.push((i, i + 1, up));
            }
        }
        CsrMatrix::from_triplets(n, n, &t)
    }

    #[test]
    fn band_lu_solves_nonsymmetric_system_with_pivoting() {
        // small diagonal forces row exchanges
        let a = tridiag(30, 3.0, 1e-3, -2.0);
        let x_true: Vec<f64> = (0..30).map(|i| (i as f64 * 0.37).sin()).collect();
        let b = a.matvec(&x_true);
        let f = Factorization::new(&a).unwrap();
        let x = f.solve(&b);
        for (u, v) in x.iter().zip(&x_true) {
            assert!((u - v).abs() < 1e-10, "{u} vs {v}");
        }
    }

    #[test]
    fn wide_matrix_falls_back_to_dense() {
        let n = 100;
        let mut t = Vec::new();
        for i in 0..n {
            for j in 0..n {
                t.push((i, j, if i == j { n as f64 } else { 1.0 / (1.0 + (i + j) as f64) }));
            }
        }
        let a = CsrMatrix::from_triplets(n, n, &t);
        let f = Factorization::new(&a).unwrap();
        assert!(matches!(f, Factorization::Dense(_)));
        let b = vec![1.0; n];
        let x = f.solve(&b);
        let r = a.matvec(&x);
        assert!(r.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn sherman_morrison_matches_dense_solve() {
        let j = tridiag(12, -1.0, 4.0, -1.0);
        let a: Vec<f64> = (0..12).map(|i| 0.1 * i as f64).collect();
        let c: Vec<f64> = (0..12).map(|i| 0.05 * (12 - i) as f64).collect();
        let r = vec![1.0; 12];
        let x = sherman_morrison(&Factorization::new(&j).unwrap(), &a, &c, &r).unwrap();
        let mut dense = j.to_dense();
        for p in 0..12 {
            for q in 0..12 {
                dense[(p, q)] += a[p] * c[q];
            }
        }
        let x_ref = dense.lu().solve(&DVector::from_vec(r)).unwrap();
        for (u, v) in x.iter().zip(x_ref.iter()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn cg_in_weighted_inner_product() {
        let n = 20;
        let m = CsrMatrix::from_diagonal(&(0..n).map(|i| 1.0 + i as f64).collect::<Vec<_>>());
        // P = M^{-1} K with K SPD is M-self-adjoint
        let k = tridiag(n, -1.0, 3.0, -1.0);
        let minv = CsrMatrix::from_diagonal(&(0..n).map(|i| 1.0 / (1.0 + i as f64)).collect::<Vec<_>>());
        let p = minv.matmul(&k).unwrap();
        let b = vec![1.0; n];
        let x = cg_metric(&p, &m, &b, 1e-13, 500).unwrap();
        let r = p.matvec(&x);
        assert!(r.iter().all(|v| (v - 1.0).abs() < 1e-10));
    }

    #[test]
    fn generalized_eigenvalue_of_scaled_identity() {
        let g = DMatrix::identity(3, 3) * 2.0;
        let w = DMatrix::identity(3, 3) * 0.5;
        assert!((min_generalized_eigenvalue(&g, &w).unwrap() - 4.0).abs() < 1e-14);
    }
}

//! Dense complex linear algebra: unitary-manifold utilities, a restarted
//! Arnoldi solver for the leading eigenpair of an arbitrary linear map, and
//! Hermitian matrix exponentials.
//!
//! All scalars are double-precision complex. Matrices are row-major
//! `ndarray::Array2<Complex64>`, vectors `Array1<Complex64>`.

use ndarray::prelude::*;
use ndarray_linalg::{Eig, QR, SVD};
use num_complex::Complex64 as C64;
use rand::Rng;
use thiserror::Error;

pub type CMat = Array2<C64>;
pub type CVec = Array1<C64>;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("matrix is numerically rank-deficient (smallest singular value {sigma_min:.3e} <= {threshold:.3e})")]
    DegenerateInput { sigma_min: f64, threshold: f64 },
    #[error("matrix is not Hermitian (||h - h^dag|| = {deviation:.3e})")]
    NotHermitian { deviation: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("Arnoldi iteration limit reached without convergence (best residual {best_residual:.3e})")]
    IterationLimit { best_residual: f64 },
    #[error("seed vector has zero norm")]
    ZeroSeed,
    #[error("LAPACK backend error: {0}")]
    Backend(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Rank-deficiency threshold for reunitarization, in absolute singular value.
pub const RANK_TOL: f64 = 1e-12;

pub fn identity(n: usize) -> CMat {
    Array2::eye(n).mapv(|x: f64| C64::new(x, 0.0))
}

pub fn dagger(m: &CMat) -> CMat {
    m.t().mapv(|z| z.conj())
}

pub fn kron(a: &CMat, b: &CMat) -> CMat {
    let (ar, ac) = a.dim();
    let (br, bc) = b.dim();
    let mut out = CMat::zeros((ar * br, ac * bc));
    for i in 0..ar {
        for j in 0..ac {
            let aij = a[(i, j)];
            for k in 0..br {
                for l in 0..bc {
                    out[(i * br + k, j * bc + l)] = aij * b[(k, l)];
                }
            }
        }
    }
    out
}

pub fn frob_norm(m: &CMat) -> f64 {
    m.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Frobenius residual `||U^dag U - I||`.
pub fn unitarity_residual(u: &CMat) -> f64 {
    let n = u.nrows();
    frob_norm(&(dagger(u).dot(u) - identity(n)))
}

pub fn vec_norm(v: &CVec) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Inner product `<a|b>` with the left argument conjugated.
pub fn inner(a: &CVec, b: &CVec) -> C64 {
    a.iter().zip(b.iter()).map(|(x, y)| x.conj() * y).sum()
}

pub fn normalized(v: &CVec) -> CVec {
    let n = vec_norm(v);
    v.mapv(|z| z / n)
}

/// Fixes the global phase so the largest-magnitude component is real positive.
/// Ties are broken by the lowest index.
pub fn phase_fix(v: &CVec) -> CVec {
    let mut best = 0usize;
    let mut best_mag = -1.0;
    for (i, z) in v.iter().enumerate() {
        let m = z.norm();
        if m > best_mag + 1e-15 {
            best_mag = m;
            best = i;
        }
    }
    let z = v[best];
    if z.norm() == 0.0 {
        return v.clone();
    }
    let phase = z / z.norm();
    v.mapv(|x| x / phase)
}

pub fn random_gaussian_matrix<R: Rng>(n: usize, rng: &mut R) -> CMat {
    CMat::from_shape_fn((n, n), |_| gaussian_c64(rng))
}

fn gaussian_c64<R: Rng>(rng: &mut R) -> C64 {
    // Box-Muller; avoids pulling in rand_distr for two lines of math.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let r = (-2.0 * u1.ln()).sqrt();
    C64::new(r * u2.cos(), r * u2.sin())
}

/// Haar-distributed random unitary from the QR decomposition of a Gaussian
/// matrix, with the R-diagonal phases absorbed.
pub fn random_unitary<R: Rng>(n: usize, rng: &mut R) -> CMat {
    let g = random_gaussian_matrix(n, rng);
    let (q, r) = g.qr().expect("QR of a Gaussian matrix");
    let mut u = q;
    for j in 0..n {
        let d = r[(j, j)];
        let ph = if d.norm() > 0.0 { d / d.norm() } else { C64::new(1.0, 0.0) };
        for i in 0..n {
            u[(i, j)] *= ph;
        }
    }
    u
}

pub fn random_vector<R: Rng>(n: usize, rng: &mut R) -> CVec {
    CVec::from_shape_fn(n, |_| gaussian_c64(rng))
}

/// Replaces the singular values of `m` by ones: for `m = V^dag D W` returns
/// `V^dag W`, the closest unitary. Errors on rank-deficient input.
pub fn reunitarize(m: &CMat) -> Result<CMat> {
    let (u, s, vt) = m
        .svd(true, true)
        .map_err(|e| TensorError::Backend(e.to_string()))?;
    let u = u.expect("left singular vectors");
    let vt = vt.expect("right singular vectors");
    let sigma_min = s.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(sigma_min > RANK_TOL) {
        return Err(TensorError::DegenerateInput { sigma_min, threshold: RANK_TOL });
    }
    Ok(u.dot(&vt))
}

/// The unitary maximizing `Re Tr[U W^dag]`, i.e. the unitary polar factor of
/// `W`. Identical to [`reunitarize`].
pub fn polar_optimal_unitary(w: &CMat) -> Result<CMat> {
    reunitarize(w)
}

/// Unitary polar factor without the rank check: on a rank-deficient input
/// the null directions are completed from the singular bases, any such
/// completion being trace-optimal.
pub fn polar_factor_any(m: &CMat) -> Result<CMat> {
    let (u, _s, vt) = m
        .svd(true, true)
        .map_err(|e| TensorError::Backend(e.to_string()))?;
    Ok(u.expect("left singular vectors").dot(&vt.expect("right singular vectors")))
}

/// Eigendecomposition of a complex Hermitian matrix by cyclic Jacobi
/// rotations: returns ascending eigenvalues and the unitary of column
/// eigenvectors. Intended for the small matrices this crate works with.
pub fn eigh_c(m: &CMat) -> Result<(Vec<f64>, CMat)> {
    let dev = frob_norm(&(m - &dagger(m)));
    if dev > 1e-9 * frob_norm(m).max(1.0) {
        return Err(TensorError::NotHermitian { deviation: dev });
    }
    let n = m.nrows();
    let mut a = (m + &dagger(m)).mapv(|z| z * 0.5);
    let mut v = identity(n);
    let scale = frob_norm(&a).max(1e-300);
    for _sweep in 0..60 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[(p, q)].norm_sqr();
            }
        }
        if off.sqrt() < 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq.norm() < 1e-300 {
                    continue;
                }
                let phi = C64::from_polar(1.0, apq.arg());
                let app = a[(p, p)].re;
                let aqq = a[(q, q)].re;
                let tau = (aqq - app) / (2.0 * apq.norm());
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                // Columns p, q of A and V rotate by G; rows of A by G^dag.
                for i in 0..n {
                    let aip = a[(i, p)];
                    let aiq = a[(i, q)];
                    a[(i, p)] = aip * c - aiq * s * phi.conj();
                    a[(i, q)] = aip * s * phi + aiq * c;
                    let vip = v[(i, p)];
                    let viq = v[(i, q)];
                    v[(i, p)] = vip * c - viq * s * phi.conj();
                    v[(i, q)] = vip * s * phi + viq * c;
                }
                for j in 0..n {
                    let apj = a[(p, j)];
                    let aqj = a[(q, j)];
                    a[(p, j)] = apj * c - aqj * s * phi;
                    a[(q, j)] = apj * s * phi.conj() + aqj * c;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| a[(x, x)].re.partial_cmp(&a[(y, y)].re).unwrap());
    let evals: Vec<f64> = order.iter().map(|&k| a[(k, k)].re).collect();
    let mut q = CMat::zeros((n, n));
    for (col, &k) in order.iter().enumerate() {
        for r in 0..n {
            q[(r, col)] = v[(r, k)];
        }
    }
    Ok((evals, q))
}

/// `exp(scale * h)` for Hermitian `h`, via the eigendecomposition
/// `h = Q diag(e) Q^dag`.
pub fn expm_hermitian(h: &CMat, scale: C64) -> Result<CMat> {
    let dev = frob_norm(&(h - &dagger(h)));
    if dev > 1e-10 {
        return Err(TensorError::NotHermitian { deviation: dev });
    }
    let sym = (h + &dagger(h)).mapv(|z| z * 0.5);
    let (evals, q) = eigh_c(&sym)?;
    let n = h.nrows();
    let mut out = CMat::zeros((n, n));
    for k in 0..n {
        let f = (scale * evals[k]).exp();
        let col = q.column(k);
        for i in 0..n {
            for j in 0..n {
                out[(i, j)] += f * col[i] * col[j].conj();
            }
        }
    }
    Ok(out)
}

/// Eigenvalues and right eigenvectors of a small dense general matrix.
pub fn dense_eig(m: &CMat) -> Result<(CVec, CMat)> {
    m.eig().map_err(|e| TensorError::Backend(e.to_string()))
}

#[derive(Debug, Clone)]
pub struct EigenPair {
    pub value: C64,
    /// Unit-norm eigenvector with the phase convention of [`phase_fix`].
    pub vector: CVec,
    /// `||A v - lambda v||` at return.
    pub residual: f64,
    /// Set when the two largest Ritz magnitudes are closer than the tolerance,
    /// i.e. the leading eigenvalue is (numerically) non-unique.
    pub degenerate: bool,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct ArnoldiOptions {
    /// Krylov subspace dimension; capped at the space dimension.
    pub krylov_dim: usize,
    /// Maximum number of restarts.
    pub max_restarts: usize,
}

impl Default for ArnoldiOptions {
    fn default() -> Self {
        Self { krylov_dim: 30, max_restarts: 200 }
    }
}

/// Leading eigenpair (largest `|lambda|`) of an arbitrary linear map via
/// restarted Arnoldi iteration. The map may be non-Hermitian and non-unitary.
///
/// Converges when `||A v - lambda v|| <= tol * |lambda|` (with an absolute
/// floor of `tol * 1e-14` so exact null maps terminate).
pub fn leading_eigenpair<F>(
    apply: F,
    dim: usize,
    seed: &CVec,
    tol: f64,
    opts: ArnoldiOptions,
) -> Result<EigenPair>
where
    F: Fn(&CVec) -> CVec,
{
    if seed.len() != dim {
        return Err(TensorError::DimensionMismatch { expected: dim, got: seed.len() });
    }
    let seed_norm = vec_norm(seed);
    if seed_norm < 1e-300 {
        return Err(TensorError::ZeroSeed);
    }
    let m = opts.krylov_dim.min(dim).max(2);
    let mut v0 = seed.mapv(|z| z / seed_norm);
    let mut best_residual = f64::INFINITY;
    let mut iterations = 0usize;

    for _restart in 0..opts.max_restarts {
        iterations += 1;
        // Arnoldi factorization A V_k = V_k H + h_{k+1,k} v_{k+1} e_k^T with
        // modified Gram-Schmidt and one reorthogonalization pass.
        let mut basis: Vec<CVec> = vec![v0.clone()];
        let mut h = CMat::zeros((m + 1, m));
        let mut k_eff = m;
        for j in 0..m {
            let mut w = apply(&basis[j]);
            for (i, b) in basis.iter().enumerate() {
                let c = inner(b, &w);
                h[(i, j)] += c;
                w = &w - &b.mapv(|z| z * c);
            }
            for (i, b) in basis.iter().enumerate() {
                let c = inner(b, &w);
                h[(i, j)] += c;
                w = &w - &b.mapv(|z| z * c);
            }
            let nw = vec_norm(&w);
            h[(j + 1, j)] = C64::new(nw, 0.0);
            if nw < 1e-13 {
                // Invariant subspace: the Ritz pairs of the truncated
                // factorization are exact.
                k_eff = j + 1;
                break;
            }
            if j + 1 < m {
                basis.push(w.mapv(|z| z / nw));
            }
        }

        let hk = h.slice(s![0..k_eff, 0..k_eff]).to_owned();
        let (evals, evecs) = if k_eff == 1 {
            // LAPACK rejects 1x1 inputs coming out of degenerate breakdowns.
            (array![hk[(0, 0)]], identity(1))
        } else {
            dense_eig(&hk)?
        };
        let mut order: Vec<usize> = (0..k_eff).collect();
        order.sort_by(|&a, &b| evals[b].norm().partial_cmp(&evals[a].norm()).unwrap());
        let lead = order[0];
        let lambda = evals[lead];
        let degenerate =
            k_eff > 1 && (evals[order[0]].norm() - evals[order[1]].norm()).abs() < tol;

        let y = evecs.column(lead);
        let mut x = CVec::zeros(dim);
        for (i, b) in basis.iter().enumerate() {
            x = &x + &b.mapv(|z| z * y[i]);
        }
        let xn = vec_norm(&x);
        if xn < 1e-300 {
            return Err(TensorError::IterationLimit { best_residual });
        }
        x.mapv_inplace(|z| z / xn);
        let ax = apply(&x);
        let residual = vec_norm(&(&ax - &x.mapv(|z| z * lambda)));
        best_residual = best_residual.min(residual);

        if residual <= tol * lambda.norm().max(1e-14) {
            let x = phase_fix(&x);
            return Ok(EigenPair { value: lambda, vector: x, residual, degenerate, iterations });
        }
        v0 = x;
    }
    Err(TensorError::IterationLimit { best_residual })
}

/// Leading eigenpair of an explicit dense matrix; small-problem oracle.
pub fn dense_leading_eigenpair(m: &CMat) -> Result<(C64, CVec)> {
    let (evals, evecs) = dense_eig(m)?;
    let lead = (0..evals.len())
        .max_by(|&a, &b| evals[a].norm().partial_cmp(&evals[b].norm()).unwrap())
        .expect("nonempty spectrum");
    let v = evecs.column(lead).to_owned();
    Ok((evals[lead], phase_fix(&normalized(&v))))
}

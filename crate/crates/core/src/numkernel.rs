//! Dense matrix primitives: pseudo-inverse, discrete Riccati solver, LQR gain
//! and spectral radius.
//!
//! Storage and the underlying factorizations (SVD, LU, Cholesky, real Schur)
//! come from `nalgebra`; everything built on top of them lives here.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Dense real matrix. Entries are `f64`; shapes are checked at runtime.
pub type Matrix = DMatrix<f64>;

/// Relative singular-value cutoff used when no other value is configured.
pub const DEFAULT_PINV_RTOL: f64 = 1e-10;

/// Builds a matrix from row-major data, rejecting wrong lengths and
/// non-finite entries.
pub fn matrix_from_row_major(rows: usize, cols: usize, data: &[f64]) -> Result<Matrix> {
    if data.len() != rows * cols {
        return Err(Error::dims("row-major data", rows * cols, data.len()));
    }
    if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("matrix entry {pos}")));
    }
    Ok(Matrix::from_row_slice(rows, cols, data))
}

pub fn ensure_finite(a: &Matrix, what: &str) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

fn ensure_square(a: &Matrix) -> Result<usize> {
    if a.nrows() == a.ncols() {
        Ok(a.nrows())
    } else {
        Err(Error::NotSquare {
            rows: a.nrows(),
            cols: a.ncols(),
        })
    }
}

/// Largest absolute entry.
pub fn max_abs(a: &Matrix) -> f64 {
    a.iter().fold(0.0, |acc, v| acc.max(v.abs()))
}

/// Moore-Penrose pseudo-inverse through the SVD. Singular values at or below
/// `rtol * sigma_max` are treated as zero.
pub fn pinv(a: &Matrix, rtol: f64) -> Result<Matrix> {
    if a.is_empty() {
        return Err(Error::EmptyMatrix);
    }
    if !(rtol >= 0.0 && rtol.is_finite()) {
        return Err(Error::InvalidParameter(format!("pinv rtol must be >= 0, got {rtol}")));
    }
    ensure_finite(a, "pinv input")?;

    let (u, sigma, v_t) = checked_svd(a)?;
    let sigma_max = sigma.iter().cloned().fold(0.0, f64::max);
    let cutoff = rtol * sigma_max;

    // V * diag(1/s) restricted to the retained singular values, times U^T.
    let keep: Vec<usize> = (0..sigma.len())
        .filter(|&i| sigma[i] > cutoff && sigma[i] > 0.0)
        .collect();
    let mut v_scaled = Matrix::zeros(a.ncols(), keep.len());
    let mut u_kept = Matrix::zeros(a.nrows(), keep.len());
    for (j, &i) in keep.iter().enumerate() {
        let inv = 1.0 / sigma[i];
        for r in 0..a.ncols() {
            v_scaled[(r, j)] = v_t[(i, r)] * inv;
        }
        u_kept.set_column(j, &u.column(i));
    }
    Ok(v_scaled * u_kept.transpose())
}

/// Thin SVD with a reconstruction check. nalgebra's bidiagonal iteration can
/// return inconsistent factors for exactly rank-deficient input; when that
/// happens the SVD is retried on `A * Q` for a fixed orthogonal `Q`.
fn checked_svd(a: &Matrix) -> Result<(Matrix, DVector<f64>, Matrix)> {
    let tol = 1e-12 * (a.nrows().max(a.ncols()) as f64) * a.norm().max(f64::MIN_POSITIVE);
    for attempt in 0..4 {
        let rot = (attempt > 0).then(|| rotation(a.ncols(), attempt));
        let work = match &rot {
            Some(q) => a * q,
            None => a.clone(),
        };
        let Some(svd) = work.clone().try_svd(true, true, f64::EPSILON, 0) else {
            continue;
        };
        let (Some(u), Some(v_t)) = (svd.u, svd.v_t) else {
            continue;
        };
        let sigma = svd.singular_values;
        let mut us = u.clone();
        for (j, s) in sigma.iter().enumerate() {
            us.column_mut(j).scale_mut(*s);
        }
        if (us * &v_t - &work).norm() > tol {
            continue;
        }
        let v_t = match &rot {
            Some(q) => v_t * q.transpose(),
            None => v_t,
        };
        return Ok((u, sigma, v_t));
    }
    Err(Error::SvdNoConvergence)
}

/// Deterministic dense orthogonal matrix (Q factor of a fixed pseudo-random fill).
fn rotation(n: usize, seed: usize) -> Matrix {
    let fill = Matrix::from_fn(n, n, |i, j| {
        ((i * 7919 + j * 104_729 + seed * 1_299_709) as f64 * 0.618_033_988_749_895).sin()
    });
    fill.qr().q()
}

/// How [`solve_dare_with`] iterates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DareMethod {
    /// Doubling form of the Riccati recursion started at `P0 = Q`: iteration
    /// `k` reproduces the plain recursion's iterate `2^k`.
    Doubling,
    /// Plain recursion `P <- A'PA - A'PB (R + B'PB)^-1 B'PA + Q` from `P0 = Q`.
    FixedPoint,
}

#[derive(Debug, Clone)]
pub struct DareOptions {
    pub method: DareMethod,
    /// Budget in plain-recursion iterations. The doubling method gets
    /// `ceil(log2(max_iterations)) + 1` doubling steps.
    pub max_iterations: usize,
    pub symmetry_tol: f64,
}

impl Default for DareOptions {
    fn default() -> Self {
        Self {
            method: DareMethod::Doubling,
            max_iterations: 100_000,
            symmetry_tol: 1e-10,
        }
    }
}

fn check_symmetric(m: &Matrix, which: &'static str, tol: f64) -> Result<()> {
    let asym = max_abs(&(m - m.transpose()));
    if asym > tol * max_abs(m).max(1.0) {
        Err(Error::NotSymmetric { which, asymmetry: asym })
    } else {
        Ok(())
    }
}

fn symmetrize(m: &mut Matrix) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// One application of the Riccati map and the gain it implies:
/// returns `(A'PA - A'PB K + Q, K)` with `K = (R + B'PB)^-1 B'PA`.
fn riccati_map(a: &Matrix, b: &Matrix, q: &Matrix, r: &Matrix, p: &Matrix) -> Result<(Matrix, Matrix)> {
    let pb = p * b;
    let pa = p * a;
    let s = r + b.transpose() * &pb;
    let chol = s.cholesky().ok_or(Error::NotPositiveDefinite { which: "R + B'PB" })?;
    let k = chol.solve(&(b.transpose() * &pa));
    let next = a.transpose() * (&pa - &pb * &k) + q;
    Ok((next, k))
}

/// Frobenius norm of `P - (A'PA - A'PB (R+B'PB)^-1 B'PA + Q)`.
pub fn riccati_residual(a: &Matrix, b: &Matrix, q: &Matrix, r: &Matrix, p: &Matrix) -> Result<f64> {
    let (next, _) = riccati_map(a, b, q, r, p)?;
    Ok((p - next).norm())
}

fn validate_lqr_inputs(a: &Matrix, b: &Matrix, q: &Matrix, r: &Matrix, opts: &DareOptions) -> Result<()> {
    let n = ensure_square(a)?;
    if b.nrows() != n {
        return Err(Error::dims("B rows", n, b.nrows()));
    }
    let m = b.ncols();
    if q.shape() != (n, n) {
        return Err(Error::dims(
            "Q shape",
            format!("{n}x{n}"),
            format!("{}x{}", q.nrows(), q.ncols()),
        ));
    }
    if r.shape() != (m, m) {
        return Err(Error::dims(
            "R shape",
            format!("{m}x{m}"),
            format!("{}x{}", r.nrows(), r.ncols()),
        ));
    }
    for (mat, what) in [(a, "A"), (b, "B"), (q, "Q"), (r, "R")] {
        ensure_finite(mat, what)?;
    }
    check_symmetric(q, "Q", opts.symmetry_tol)?;
    check_symmetric(r, "R", opts.symmetry_tol)?;
    if m > 0 && r.clone().cholesky().is_none() {
        return Err(Error::NotPositiveDefinite { which: "R" });
    }
    Ok(())
}

fn converged(residual: f64, p: &Matrix) -> bool {
    residual < 1e-9 * (1.0 + p.norm())
}

/// Stabilizing solution of the discrete algebraic Riccati equation with the
/// default options.
pub fn solve_dare(a: &Matrix, b: &Matrix, q: &Matrix, r: &Matrix) -> Result<Matrix> {
    solve_dare_with(a, b, q, r, &DareOptions::default())
}

/// Solves `P = A'PA - A'PB (R + B'PB)^-1 B'PA + Q` starting from `P0 = Q`.
///
/// Convergence is judged on the Riccati residual, which must drop below
/// `1e-9 * (1 + |P|_F)`. Running out of iterations usually means `(A, B)` is
/// not stabilizable.
pub fn solve_dare_with(a: &Matrix, b: &Matrix, q: &Matrix, r: &Matrix, opts: &DareOptions) -> Result<Matrix> {
    validate_lqr_inputs(a, b, q, r, opts)?;
    match opts.method {
        DareMethod::FixedPoint => dare_fixed_point(a, b, q, r, opts.max_iterations),
        DareMethod::Doubling => dare_doubling(a, b, q, r, opts.max_iterations),
    }
}

fn dare_fixed_point(a: &Matrix, b: &Matrix, q: &Matrix, r: &Matrix, max_iterations: usize) -> Result<Matrix> {
    let mut p = q.clone();
    let mut residual = f64::INFINITY;
    for _ in 0..max_iterations {
        let (mut next, _) = riccati_map(a, b, q, r, &p)?;
        symmetrize(&mut next);
        // |P_k - F(P_k)| is the residual of the current iterate.
        residual = (&p - &next).norm();
        if !residual.is_finite() {
            break;
        }
        if converged(residual, &p) {
            return Ok(p);
        }
        p = next;
    }
    Err(Error::RiccatiNoConvergence {
        iterations: max_iterations,
        residual,
    })
}

fn dare_doubling(a: &Matrix, b: &Matrix, q: &Matrix, r: &Matrix, max_iterations: usize) -> Result<Matrix> {
    let n = a.nrows();
    let steps = (max_iterations.max(2) as f64).log2().ceil() as usize + 1;
    let identity = Matrix::identity(n, n);

    let r_chol = r.clone().cholesky().ok_or(Error::NotPositiveDefinite { which: "R" })?;
    let mut ak = a.clone();
    let mut gk = b * r_chol.solve(&b.transpose());
    symmetrize(&mut gk);
    let mut hk = q.clone();

    let mut residual = riccati_residual(a, b, q, r, &hk)?;
    if converged(residual, &hk) {
        return Ok(hk);
    }
    for _ in 0..steps {
        let w = &identity + &gk * &hk;
        let lu = w.lu();
        let w_inv_a = lu
            .solve(&ak)
            .ok_or_else(|| Error::Singular("Riccati doubling step".into()))?;
        let w_inv_g = lu
            .solve(&gk)
            .ok_or_else(|| Error::Singular("Riccati doubling step".into()))?;
        let a_next = &ak * &w_inv_a;
        let mut g_next = &gk + &ak * w_inv_g * ak.transpose();
        let mut h_next = &hk + ak.transpose() * &hk * &w_inv_a;
        symmetrize(&mut g_next);
        symmetrize(&mut h_next);
        ak = a_next;
        gk = g_next;
        hk = h_next;
        if hk.iter().any(|v| !v.is_finite()) {
            residual = f64::INFINITY;
            break;
        }
        residual = riccati_residual(a, b, q, r, &hk)?;
        if converged(residual, &hk) {
            return Ok(hk);
        }
    }
    Err(Error::RiccatiNoConvergence {
        iterations: steps,
        residual,
    })
}

/// Discrete-time LQR gain `K = (R + B'PB)^-1 B'PA` for the stabilizing Riccati
/// solution. The closed loop `A - BK` is checked to have spectral radius < 1.
pub fn lqr_gain(a: &Matrix, b: &Matrix, q: &Matrix, r: &Matrix) -> Result<Matrix> {
    lqr_gain_with(a, b, q, r, &DareOptions::default())
}

pub fn lqr_gain_with(a: &Matrix, b: &Matrix, q: &Matrix, r: &Matrix, opts: &DareOptions) -> Result<Matrix> {
    Ok(lqr_solve(a, b, q, r, opts)?.gain)
}

/// Riccati solution, gain and closed-loop spectral radius together.
#[derive(Debug, Clone)]
pub struct LqrSolution {
    pub p: Matrix,
    pub gain: Matrix,
    pub closed_loop_radius: f64,
}

pub fn lqr_solve(a: &Matrix, b: &Matrix, q: &Matrix, r: &Matrix, opts: &DareOptions) -> Result<LqrSolution> {
    let p = solve_dare_with(a, b, q, r, opts)?;
    let (_, gain) = riccati_map(a, b, q, r, &p)?;
    let radius = spectral_radius(&(a - b * &gain))?;
    if radius >= 1.0 {
        return Err(Error::UnstableClosedLoop { radius });
    }
    Ok(LqrSolution {
        p,
        gain,
        closed_loop_radius: radius,
    })
}

/// Largest eigenvalue modulus, from the real Schur form.
pub fn spectral_radius(a: &Matrix) -> Result<f64> {
    let n = ensure_square(a)?;
    if n == 0 {
        return Ok(0.0);
    }
    ensure_finite(a, "spectral_radius input")?;
    let schur = a.clone().try_schur(f64::EPSILON, 0).ok_or(Error::EigenNoConvergence)?;
    Ok(schur.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max))
}

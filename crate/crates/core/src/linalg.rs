//! Small dense linear algebra on `nalgebra::DMatrix<f64>`.
//!
//! Everything here targets matrices of dimension at most a few dozen, so the
//! algorithms favour clarity over asymptotics.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Block upshift matrix `A0` (nd×nd) and top-order selector `G` (nd×d) for an
/// order-`n` chain of integrators with `d`-dimensional blocks.
///
/// State layout is `[x_1; x_2; ...; x_n]` with `x_1` the position block.
pub fn chain_matrices(n: usize, d: usize) -> (Mat, Mat) {
    let nd = n * d;
    let mut a0 = Mat::zeros(nd, nd);
    for p in 0..n.saturating_sub(1) {
        for k in 0..d {
            a0[(p * d + k, (p + 1) * d + k)] = 1.0;
        }
    }
    let mut g = Mat::zeros(nd, d);
    for k in 0..d {
        g[((n - 1) * d + k, k)] = 1.0;
    }
    (a0, g)
}

/// Largest real part among the eigenvalues of a square matrix.
pub fn max_real_eigenvalue(a: &Mat) -> f64 {
    a.complex_eigenvalues()
        .iter()
        .map(|z| z.re)
        .fold(f64::NEG_INFINITY, f64::max)
}

pub fn is_hurwitz(a: &Mat) -> bool {
    max_real_eigenvalue(a) < 0.0
}

/// Spectral radius of a square matrix.
pub fn spectral_radius(a: &Mat) -> f64 {
    a.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// Largest absolute entry of `m - m^T`.
pub fn asymmetry(m: &Mat) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

pub fn symmetrize(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

/// Solve `Acl^T P + P Acl = -Q` by Kronecker vectorization.
pub fn solve_continuous_lyapunov(acl: &Mat, q: &Mat) -> Result<Mat> {
    let n = acl.nrows();
    if acl.ncols() != n || q.nrows() != n || q.ncols() != n {
        return Err(Error::DimensionMismatch(format!(
            "Lyapunov solve with A {}x{} and Q {}x{}",
            acl.nrows(),
            acl.ncols(),
            q.nrows(),
            q.ncols()
        )));
    }
    let max_real = max_real_eigenvalue(acl);
    if max_real >= 0.0 {
        return Err(Error::NotHurwitz { max_real });
    }
    // vec(A^T P + P A) = (I ⊗ A^T + A^T ⊗ I) vec(P) with column-major vec.
    let at = acl.transpose();
    let eye = Mat::identity(n, n);
    let op = eye.kronecker(&at) + at.kronecker(&eye);
    let rhs = Vector::from_iterator(n * n, q.iter().map(|v| -v));
    let lu = op.lu();
    let sol = lu
        .solve(&rhs)
        .ok_or_else(|| Error::SingularSystem("Kronecker Lyapunov operator".into()))?;
    if sol.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularSystem("Kronecker Lyapunov operator".into()));
    }
    let p = Mat::from_column_slice(n, n, sol.as_slice());
    Ok(symmetrize(&p))
}

/// Frobenius norm of the Lyapunov residual `A^T P + P A + Q`.
pub fn lyapunov_residual(acl: &Mat, p: &Mat, q: &Mat) -> f64 {
    (acl.transpose() * p + p * acl + q).norm()
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Returns eigenvalues in ascending order and the matching orthonormal
/// eigenvectors as columns.
pub fn eig_sym(m: &Mat) -> Result<(Vector, Mat)> {
    let n = m.nrows();
    if m.ncols() != n {
        return Err(Error::DimensionMismatch(format!(
            "eig_sym on a {}x{} matrix",
            n,
            m.ncols()
        )));
    }
    let scale = m.amax().max(1.0);
    let asym = asymmetry(m);
    if asym > 1e-10 * scale {
        return Err(Error::NotSymmetric { asymmetry: asym });
    }
    let mut a = symmetrize(m);
    let mut v = Mat::identity(n, n);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += a[(i, j)] * a[(i, j)];
            }
        }
        let diag: f64 = (0..n).map(|i| a[(i, i)] * a[(i, i)]).sum();
        if off.sqrt() <= f64::EPSILON * 1e-3 * diag.sqrt() || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(i, i)].total_cmp(&a[(j, j)]));
    let values = Vector::from_iterator(n, order.iter().map(|&i| a[(i, i)]));
    let mut vectors = Mat::zeros(n, n);
    for (col, &i) in order.iter().enumerate() {
        vectors.set_column(col, &v.column(i));
    }
    Ok((values, vectors))
}

/// Smallest and largest eigenvalue of a symmetric matrix.
pub fn eig_extremes(m: &Mat) -> Result<(f64, f64)> {
    let (vals, _) = eig_sym(m)?;
    Ok((vals[0], vals[vals.len() - 1]))
}

/// Smallest singular value, as the square root of the smallest eigenvalue of
/// `M^T M` clamped at zero.
pub fn min_singular_value(m: &Mat) -> f64 {
    let mtm = symmetrize(&(m.transpose() * m));
    match eig_sym(&mtm) {
        Ok((vals, _)) => vals[0].max(0.0).sqrt(),
        Err(_) => f64::NAN,
    }
}

/// Largest singular value via `M^T M`.
pub fn max_singular_value(m: &Mat) -> f64 {
    let mtm = symmetrize(&(m.transpose() * m));
    match eig_sym(&mtm) {
        Ok((vals, _)) => vals[vals.len() - 1].max(0.0).sqrt(),
        Err(_) => f64::NAN,
    }
}

/// `M^{power}` for a symmetric positive definite matrix via its eigenbasis.
pub fn spd_power(m: &Mat, power: f64) -> Result<Mat> {
    let (vals, vecs) = eig_sym(m)?;
    if vals[0] <= 0.0 {
        return Err(Error::SingularSystem(format!(
            "matrix is not positive definite (lambda_min = {:e})",
            vals[0]
        )));
    }
    let d = Mat::from_diagonal(&vals.map(|l| l.powf(power)));
    Ok(symmetrize(&(&vecs * d * vecs.transpose())))
}

/// One classical fourth-order Runge-Kutta step.
pub fn rk4_step<F>(f: F, x: &Vector, t: f64, h: f64) -> Result<Vector>
where
    F: Fn(f64, &Vector) -> Vector,
{
    let k1 = f(t, x);
    let k2 = f(t + 0.5 * h, &(x + &k1 * (0.5 * h)));
    let k3 = f(t + 0.5 * h, &(x + &k2 * (0.5 * h)));
    let k4 = f(t + h, &(x + &k3 * h));
    let out = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteState(format!("RK4 step at t = {t}")));
    }
    Ok(out)
}

/// 17-significant-digit decimal, the format used for reproducible text output.
pub fn fmt17(x: f64) -> String {
    format!("{:.16e}", x)
}

/// Row-major text rendering of a matrix, one row per line.
pub fn format_matrix(m: &Mat) -> String {
    let mut out = String::new();
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| fmt17(m[(i, j)])).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

/// Row-major nested vectors, for serialization.
pub fn to_rows(m: &Mat) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

pub fn from_rows(rows: &[Vec<f64>]) -> Result<Mat> {
    let nr = rows.len();
    let nc = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != nc) {
        return Err(Error::DimensionMismatch("ragged matrix rows".into()));
    }
    Ok(Mat::from_fn(nr, nc, |i, j| rows[i][j]))
}

use serde::{Deserialize, Serialize};

use crate::certify::mat_rows;
use crate::error::{Error, Result};
use crate::linalg::{self, Mat};

pub const DARE_MAX_ITER: usize = 10_000;
pub const DARE_TOL: f64 = 1e-10;

/// Discrete algebraic Riccati equation by fixed-point iteration from `P = Q`.
/// Returns `(P, K)` with `K = (R + BᵀPB)⁻¹ BᵀPA`.
pub fn solve_dare(a: &Mat, b: &Mat, q: &Mat, r: &Mat) -> Result<(Mat, Mat)> {
    let mut p = q.clone();
    let mut change = f64::INFINITY;
    for _ in 0..DARE_MAX_ITER {
        let next = riccati_map(a, b, q, r, &p)?;
        change = (&next - &p).amax();
        p = next;
        if change <= DARE_TOL * p.amax().max(1.0) * 1e-3 {
            let k = riccati_gain(a, b, r, &p)?;
            let residual = (riccati_map(a, b, q, r, &p)? - &p).amax();
            if residual <= DARE_TOL * p.amax().max(1.0) {
                return Ok((p, k));
            }
        }
    }
    Err(Error::RiccatiDiverged {
        iterations: DARE_MAX_ITER,
        change,
    })
}

fn riccati_gain(a: &Mat, b: &Mat, r: &Mat, p: &Mat) -> Result<Mat> {
    let s = r + b.transpose() * p * b;
    let rhs = b.transpose() * p * a;
    s.cholesky()
        .map(|c| c.solve(&rhs))
        .ok_or_else(|| Error::SingularSystem("R + BᵀPB".into()))
}

fn riccati_map(a: &Mat, b: &Mat, q: &Mat, r: &Mat, p: &Mat) -> Result<Mat> {
    let k = riccati_gain(a, b, r, p)?;
    let next = q + a.transpose() * p * a - a.transpose() * p * b * k;
    Ok(linalg::symmetrize(&next))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TerminalIngredients {
    #[serde(with = "mat_rows")]
    pub k_hat: Mat,
    #[serde(with = "mat_rows")]
    pub pr: Mat,
    /// Terminal level `c_f` of `{ē : ēᵀ Pr ē ≤ c_f}`.
    pub c_f: f64,
}

/// LQR terminal gain and cost, plus the largest level set on which the
/// terminal law respects the per-axis input bound, scaled by `level_factor`.
pub fn terminal_ingredients(ad: &Mat, be: &Mat, qr: &Mat, r: &Mat, v_max: f64, level_factor: f64) -> Result<TerminalIngredients> {
    let (pr, k_hat) = solve_dare(ad, be, qr, r)?;
    let pr_inv = pr
        .clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::SingularSystem("terminal cost".into()))?;
    let mut level = f64::INFINITY;
    for row in 0..k_hat.nrows() {
        let k = k_hat.row(row);
        let support = (k * &pr_inv * k.transpose())[(0, 0)];
        if support > 0.0 {
            level = level.min(v_max * v_max / support);
        }
    }
    Ok(TerminalIngredients {
        k_hat,
        pr,
        c_f: level * level_factor,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ocp::discretize::ErrorModel;

    #[test]
    fn scalar_dare_matches_bisection() {
        let one = Mat::from_element(1, 1, 1.0);
        let b = Mat::from_element(1, 1, 0.1);
        let (p, _) = solve_dare(&one, &b, &one, &one).unwrap();
        // Root of f(P) = Q + P - P² b² / (R + b² P) - P = 1 - 0.01 P² / (1 + 0.01 P).
        let f = |x: f64| 1.0 - 0.01 * x * x / (1.0 + 0.01 * x);
        let (mut lo, mut hi) = (0.0, 1e3);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        assert!((p[(0, 0)] - 0.5 * (lo + hi)).abs() < 1e-9);
    }

    #[test]
    fn vanishing_state_weight() {
        let a = Mat::from_element(1, 1, 0.5);
        let b = Mat::from_element(1, 1, 1.0);
        let (p, _) = solve_dare(&a, &b, &Mat::from_element(1, 1, 1e-12), &Mat::from_element(1, 1, 1.0)).unwrap();
        assert!(p[(0, 0)] < 1e-11);
    }

    #[test]
    fn chain_terminal_law_is_stable_and_bounded() {
        let model = ErrorModel::new(3, 2, 0.1, 2.0);
        let qr = Mat::identity(6, 6);
        let r = Mat::identity(2, 2) * 0.1;
        let t = terminal_ingredients(&model.ad, &model.be, &qr, &r, 5.0, 0.5).unwrap();
        let acl = &model.ad - &model.be * &t.k_hat;
        assert!(linalg::spectral_radius(&acl) < 1.0);
        assert!(t.c_f > 0.0);
    }
}

//! Dense dual active-set solver (Goldfarb-Idnani) for small strictly convex QPs
//!
//! ```text
//! minimize ½ zᵀ H z + gᵀ z + c0
//! subject to A_in z ≥ b_in,  A_eq z = b_eq
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Mat, Vector};

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub h: Mat,
    pub g: Vector,
    pub c0: f64,
    pub a_in: Mat,
    pub b_in: Vector,
    pub a_eq: Mat,
    pub b_eq: Vector,
}

impl QpProblem {
    pub fn unconstrained(h: Mat, g: Vector) -> Self {
        let n = g.len();
        QpProblem {
            h,
            g,
            c0: 0.0,
            a_in: Mat::zeros(0, n),
            b_in: Vector::zeros(0),
            a_eq: Mat::zeros(0, n),
            b_eq: Vector::zeros(0),
        }
    }

    pub fn dim(&self) -> usize {
        self.g.len()
    }

    pub fn objective(&self, z: &Vector) -> f64 {
        0.5 * z.dot(&(&self.h * z)) + self.g.dot(z) + self.c0
    }

    pub fn push_ineq(&mut self, row: &Vector, rhs: f64) {
        let m = self.a_in.nrows();
        let a = std::mem::replace(&mut self.a_in, Mat::zeros(0, 0));
        self.a_in = a.insert_row(m, 0.0);
        self.a_in.row_mut(m).copy_from(&row.transpose());
        let b = std::mem::replace(&mut self.b_in, Vector::zeros(0));
        self.b_in = b.push(rhs);
    }

    pub fn push_eq(&mut self, row: &Vector, rhs: f64) {
        let m = self.a_eq.nrows();
        let a = std::mem::replace(&mut self.a_eq, Mat::zeros(0, 0));
        self.a_eq = a.insert_row(m, 0.0);
        self.a_eq.row_mut(m).copy_from(&row.transpose());
        let b = std::mem::replace(&mut self.b_eq, Vector::zeros(0));
        self.b_eq = b.push(rhs);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QpStatus {
    Optimal,
    MaxIter,
    Infeasible,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub z: Vector,
    pub duals_in: Vector,
    pub duals_eq: Vector,
    pub objective: f64,
    pub iterations: usize,
    pub status: QpStatus,
}

/// Stationarity, primal feasibility and complementarity residuals (∞-norms).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal: f64,
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity.max(self.primal).max(self.complementarity)
    }
}

pub fn kkt_residuals(qp: &QpProblem, sol: &QpSolution) -> KktResiduals {
    let z = &sol.z;
    let grad = &qp.h * z + &qp.g - qp.a_in.transpose() * &sol.duals_in - qp.a_eq.transpose() * &sol.duals_eq;
    let s_in = &qp.a_in * z - &qp.b_in;
    let s_eq = &qp.a_eq * z - &qp.b_eq;
    let primal = s_in
        .iter()
        .map(|s| (-s).max(0.0))
        .chain(s_eq.iter().map(|s| s.abs()))
        .fold(0.0, f64::max);
    let complementarity = s_in
        .iter()
        .zip(sol.duals_in.iter())
        .map(|(s, u)| (s * u).abs().max((-u).max(0.0)))
        .fold(0.0, f64::max);
    KktResiduals {
        stationarity: grad.amax(),
        primal,
        complementarity,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Con {
    In(usize),
    Eq(usize),
}

struct Active {
    con: Con,
    normal: Vector,
    rhs: f64,
    mult: f64,
}

/// Solves `[H N; Nᵀ 0] [z; r] = [rhs_top; rhs_bot]`.
fn kkt_solve(h: &Mat, active: &[Active], rhs_top: &Vector, rhs_bot: &Vector) -> Option<(Vector, Vector)> {
    let n = h.nrows();
    let m = active.len();
    let mut k = Mat::zeros(n + m, n + m);
    k.view_mut((0, 0), (n, n)).copy_from(h);
    for (j, a) in active.iter().enumerate() {
        for i in 0..n {
            k[(i, n + j)] = a.normal[i];
            k[(n + j, i)] = a.normal[i];
        }
    }
    let mut rhs = Vector::zeros(n + m);
    rhs.rows_mut(0, n).copy_from(rhs_top);
    rhs.rows_mut(n, m).copy_from(rhs_bot);
    let finite = |s: &Vector| s.iter().all(|v| v.is_finite());
    let sol = match k.clone().lu().solve(&rhs).filter(finite) {
        Some(sol) => sol,
        None => {
            // Nearly dependent working set: a tiny dual regularization keeps
            // the solve well posed.
            let scale = h.amax().max(1.0);
            for j in 0..m {
                k[(n + j, n + j)] = -1e-12 * scale;
            }
            k.lu().solve(&rhs).filter(finite)?
        }
    };
    Some((sol.rows(0, n).into_owned(), sol.rows(n, m).into_owned()))
}

fn row(a: &Mat, i: usize) -> Vector {
    a.row(i).transpose()
}

/// Dual active-set solve. Each iteration adds the most violated constraint,
/// taking partial steps that drop blocking inequalities until it can be
/// added; the final working set is refined by one KKT solve.
pub fn solve_qp(qp: &QpProblem, tol: f64, max_iter: usize) -> Result<QpSolution> {
    let n = qp.dim();
    if qp.h.nrows() != n || qp.h.ncols() != n || qp.a_in.ncols() != n || qp.a_eq.ncols() != n {
        return Err(Error::DimensionMismatch("QP matrices do not match the decision size".into()));
    }
    if qp.a_in.nrows() != qp.b_in.len() || qp.a_eq.nrows() != qp.b_eq.len() {
        return Err(Error::DimensionMismatch("QP constraint rows and bounds differ in length".into()));
    }
    let chol = qp
        .h
        .clone()
        .cholesky()
        .ok_or_else(|| Error::SingularSystem("QP Hessian is not positive definite".into()))?;
    let mut x = -chol.solve(&qp.g);
    let mut active: Vec<Active> = Vec::new();
    let mut iterations = 0;
    let zero = Vector::zeros(0);

    loop {
        // Choose the constraint to add: pending equalities first, then the
        // most violated inequality (scaled by its row norm).
        let mut pick: Option<(Con, Vector, f64)> = None;
        // Equalities join the working set first and never leave it; the row
        // is oriented so that the current point violates it (s ≤ 0).
        if let Some(i) = (0..qp.a_eq.nrows()).find(|&i| !active.iter().any(|a| a.con == Con::Eq(i))) {
            let a = row(&qp.a_eq, i);
            let s = a.dot(&x) - qp.b_eq[i];
            let (normal, rhs) = if s > 0.0 { (-a, -qp.b_eq[i]) } else { (a, qp.b_eq[i]) };
            pick = Some((Con::Eq(i), normal, rhs));
        }
        if pick.is_none() {
            let mut worst = -tol;
            for i in 0..qp.a_in.nrows() {
                if active.iter().any(|a| a.con == Con::In(i)) {
                    continue;
                }
                let a = row(&qp.a_in, i);
                let s = (a.dot(&x) - qp.b_in[i]) / a.norm().max(1e-300);
                if s < worst {
                    worst = s;
                    pick = Some((Con::In(i), a, qp.b_in[i]));
                }
            }
        }
        let Some((con, np, bp)) = pick else { break };

        let mut up = 0.0;
        loop {
            iterations += 1;
            if iterations > max_iter {
                return Err(Error::MaxIter(max_iter));
            }
            let bot = Vector::zeros(active.len());
            let (z, r) = kkt_solve(&qp.h, &active, &np, if active.is_empty() { &zero } else { &bot })
                .ok_or_else(|| Error::SingularSystem("KKT system of the working set".into()))?;
            // Partial step: largest dual step keeping active inequality multipliers ≥ 0.
            let mut t1 = f64::INFINITY;
            let mut block = None;
            for (j, a) in active.iter().enumerate() {
                if matches!(a.con, Con::In(_)) && r[j] > 1e-14 {
                    let t = a.mult / r[j];
                    if t < t1 {
                        t1 = t;
                        block = Some(j);
                    }
                }
            }
            let sp = np.dot(&x) - bp;
            let curvature = z.dot(&np);
            // `z` is the step direction projected off the working set; a tiny
            // projection means `np` is (numerically) dependent on it.
            let free = chol.solve(&np).norm();
            let t2 = if z.norm() > 1e-9 * free && curvature > 1e-14 * np.norm_squared() {
                -sp / curvature
            } else {
                f64::INFINITY
            };
            let t = t1.min(t2);
            if !t.is_finite() {
                return Err(Error::Infeasible);
            }
            for (j, a) in active.iter_mut().enumerate() {
                a.mult -= t * r[j];
            }
            up += t;
            if t2.is_finite() {
                x += &z * t;
            }
            if t2 <= t1 {
                active.push(Active { con, normal: np.clone(), rhs: bp, mult: up });
                break;
            }
            active.remove(block.expect("finite partial step has a blocking constraint"));
        }
    }

    // Refinement: KKT solve on the final working set.
    let rhs_bot = Vector::from_iterator(active.len(), active.iter().map(|a| a.rhs));
    if let Some((z, neg_u)) = kkt_solve(&qp.h, &active, &(-&qp.g), &rhs_bot) {
        x = z;
        for (a, nu) in active.iter_mut().zip(neg_u.iter()) {
            a.mult = -nu;
        }
    }
    let mut duals_in = Vector::zeros(qp.a_in.nrows());
    let mut duals_eq = Vector::zeros(qp.a_eq.nrows());
    for a in &active {
        match a.con {
            Con::In(i) => duals_in[i] = a.mult,
            Con::Eq(i) => {
                // Undo the sign flip applied when the row was added.
                let flipped = a.normal.dot(&row(&qp.a_eq, i)) < 0.0;
                duals_eq[i] = if flipped { -a.mult } else { a.mult };
            }
        }
    }
    Ok(QpSolution {
        objective: qp.objective(&x),
        z: x,
        duals_in,
        duals_eq,
        iterations,
        status: QpStatus::Optimal,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_bound() {
        let mut qp = QpProblem::unconstrained(Mat::identity(3, 3) * 2.0, Vector::zeros(3));
        qp.push_ineq(&Vector::from_vec(vec![1.0, 0.0, 0.0]), 1.0);
        let sol = solve_qp(&qp, 1e-12, 100).unwrap();
        assert!((&sol.z - Vector::from_vec(vec![1.0, 0.0, 0.0])).amax() < 1e-12);
        assert!((sol.duals_in[0] - 2.0).abs() < 1e-12);
        assert!(kkt_residuals(&qp, &sol).max() < 1e-12);
    }

    #[test]
    fn unconstrained_minimizer() {
        let h = Mat::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let g = Vector::from_vec(vec![1.0, -2.0]);
        let qp = QpProblem::unconstrained(h.clone(), g.clone());
        let sol = solve_qp(&qp, 1e-12, 100).unwrap();
        let want = -h.lu().solve(&g).unwrap();
        assert!((sol.z - want).amax() < 1e-12);
    }

    #[test]
    fn equality_and_inequality() {
        // min z1² + z2² s.t. z1 + z2 = 2, z1 ≥ 1.5
        let mut qp = QpProblem::unconstrained(Mat::identity(2, 2) * 2.0, Vector::zeros(2));
        qp.push_eq(&Vector::from_vec(vec![1.0, 1.0]), 2.0);
        qp.push_ineq(&Vector::from_vec(vec![1.0, 0.0]), 1.5);
        let sol = solve_qp(&qp, 1e-12, 100).unwrap();
        assert!((&sol.z - Vector::from_vec(vec![1.5, 0.5])).amax() < 1e-12);
        assert!(kkt_residuals(&qp, &sol).max() < 1e-12);
        // A negative equality multiplier is allowed.
        let mut qp = QpProblem::unconstrained(Mat::identity(1, 1) * 2.0, Vector::from_vec(vec![-4.0]));
        qp.push_eq(&Vector::from_vec(vec![1.0]), 1.0);
        let sol = solve_qp(&qp, 1e-12, 100).unwrap();
        assert!((sol.z[0] - 1.0).abs() < 1e-12);
        assert!((sol.duals_eq[0] + 2.0).abs() < 1e-12);
    }

    #[test]
    fn infeasible_detected() {
        let mut qp = QpProblem::unconstrained(Mat::identity(1, 1), Vector::zeros(1));
        qp.push_ineq(&Vector::from_vec(vec![1.0]), 1.0);
        qp.push_ineq(&Vector::from_vec(vec![-1.0]), 0.0);
        assert_eq!(solve_qp(&qp, 1e-12, 100), Err(Error::Infeasible));
    }

    #[test]
    fn inactive_row_leaves_minimizer() {
        let h = Mat::identity(2, 2) * 2.0;
        let g = Vector::from_vec(vec![-2.0, 0.0]);
        let base = solve_qp(&QpProblem::unconstrained(h.clone(), g.clone()), 1e-12, 100).unwrap();
        let mut qp = QpProblem::unconstrained(h, g);
        qp.push_ineq(&Vector::from_vec(vec![0.0, 1.0]), -5.0);
        let sol = solve_qp(&qp, 1e-12, 100).unwrap();
        assert_eq!(sol.z, base.z);
    }
}

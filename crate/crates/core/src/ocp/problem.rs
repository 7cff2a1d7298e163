//! Condensed (input-only) QP assembly.

use crate::error::{Error, Result};
use crate::linalg::{Mat, Vector};
use crate::ocp::qp::QpProblem;
use crate::ocp::terminal::TerminalIngredients;

/// Affine prediction `x_l = c_l + S_l z` for `l = 0..=H` of
/// `x_{l+1} = A x_l + B z_l + off_l` with `z` the stacked inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Condensed {
    pub c: Vec<Vector>,
    pub s: Vec<Mat>,
}

impl Condensed {
    pub fn new(a: &Mat, b: &Mat, x0: &Vector, offsets: &[Vector], horizon: usize) -> Self {
        let nx = a.nrows();
        let nu = b.ncols();
        let mut c = vec![x0.clone()];
        let mut s = vec![Mat::zeros(nx, nu * horizon)];
        for l in 0..horizon {
            let mut cl = a * &c[l];
            if let Some(off) = offsets.get(l) {
                cl += off;
            }
            let mut sl = a * &s[l];
            sl.view_mut((0, l * nu), (nx, nu)).copy_from(b);
            c.push(cl);
            s.push(sl);
        }
        Condensed { c, s }
    }

    pub fn at(&self, l: usize, z: &Vector) -> Vector {
        &self.c[l] + &self.s[l] * z
    }
}

/// Weights and terminal data shared by every QP of one agent.
#[derive(Debug, Clone, PartialEq)]
pub struct CostWeights {
    pub qr: Mat,
    pub r: Mat,
    pub rdelta: Mat,
    pub terminal: TerminalIngredients,
}

/// Constant selector picking input block `l` out of the stacked vector.
pub fn selector(l: usize, d: usize, horizon: usize) -> Mat {
    let mut e = Mat::zeros(d, d * horizon);
    e.view_mut((0, l * d), (d, d)).copy_from(&Mat::identity(d, d));
    e
}

/// Builds the condensed QP
/// `Σ_{l<H} ‖ē_l‖²_Qr + ‖v_l‖²_R + ‖Δv_l‖²_Rδ + ‖ē_H‖²_Pr` with
/// `Δv_0 = v_0 - u_prev`, plus per-axis input bounds, the given extra
/// inequality rows `row · z ≥ rhs`, the optional terminal input law and
/// the optional linearized terminal-set row taken at `terminal_at`.
#[allow(clippy::too_many_arguments)]
pub fn build_qp(
    weights: &CostWeights,
    errors: &Condensed,
    u_prev: &Vector,
    v_max: f64,
    extra_rows: &[(Vector, f64)],
    terminal_equality: bool,
    terminal_at: Option<&Vector>,
) -> Result<QpProblem> {
    let horizon = errors.c.len() - 1;
    let d = weights.r.nrows();
    let nz = d * horizon;
    if errors.s[0].ncols() != nz || u_prev.len() != d {
        return Err(Error::DimensionMismatch(format!(
            "prediction has {} inputs, weights imply {nz}",
            errors.s[0].ncols()
        )));
    }
    let mut h = Mat::zeros(nz, nz);
    let mut g = Vector::zeros(nz);
    let mut c0 = 0.0;
    for l in 0..=horizon {
        let w = if l == horizon { &weights.terminal.pr } else { &weights.qr };
        let sl = &errors.s[l];
        let cl = &errors.c[l];
        h += sl.transpose() * w * sl * 2.0;
        g += sl.transpose() * w * cl * 2.0;
        c0 += cl.dot(&(w * cl));
    }
    for l in 0..horizon {
        let el = selector(l, d, horizon);
        h += el.transpose() * &weights.r * &el * 2.0;
        let diff = if l == 0 { el.clone() } else { &el - selector(l - 1, d, horizon) };
        h += diff.transpose() * &weights.rdelta * &diff * 2.0;
        if l == 0 {
            g -= diff.transpose() * &weights.rdelta * u_prev * 2.0;
            c0 += u_prev.dot(&(&weights.rdelta * u_prev));
        }
    }
    let h = crate::linalg::symmetrize(&h);
    let mut qp = QpProblem::unconstrained(h, g);
    qp.c0 = c0;
    for i in 0..nz {
        let mut row = Vector::zeros(nz);
        row[i] = 1.0;
        qp.push_ineq(&row, -v_max);
        row[i] = -1.0;
        qp.push_ineq(&row, -v_max);
    }
    for (row, rhs) in extra_rows {
        qp.push_ineq(row, *rhs);
    }
    let k_hat = &weights.terminal.k_hat;
    if terminal_equality {
        // v_{H-1} + K̂ ē_{H-1} = 0
        let last = horizon - 1;
        let a = selector(last, d, horizon) + k_hat * &errors.s[last];
        let b = -(k_hat * &errors.c[last]);
        for k in 0..d {
            qp.push_eq(&a.row(k).transpose(), b[k]);
        }
    }
    if let Some(z0) = terminal_at {
        // Supporting hyperplane of ē_Hᵀ Pr ē_H ≤ c_f at the current iterate.
        let pr = &weights.terminal.pr;
        let sh = &errors.s[horizon];
        let e_h = errors.at(horizon, z0);
        let grad = sh.transpose() * pr * &e_h * 2.0;
        if grad.amax() > 0.0 {
            let value = e_h.dot(&(pr * &e_h));
            qp.push_ineq(&(-&grad), value - grad.dot(z0) - weights.terminal.c_f);
        }
    }
    Ok(qp)
}

/// Objective of the OCP evaluated by explicit rollout of `inputs`.
pub fn rollout_cost(
    weights: &CostWeights,
    ad: &Mat,
    be: &Mat,
    e0: &Vector,
    offsets: &[Vector],
    u_prev: &Vector,
    inputs: &[Vector],
) -> f64 {
    let horizon = inputs.len();
    let mut e = e0.clone();
    let mut cost = 0.0;
    let mut prev = u_prev.clone();
    for l in 0..horizon {
        cost += e.dot(&(&weights.qr * &e));
        cost += inputs[l].dot(&(&weights.r * &inputs[l]));
        let dv = &inputs[l] - &prev;
        cost += dv.dot(&(&weights.rdelta * &dv));
        e = ad * &e + be * &inputs[l] + offsets.get(l).cloned().unwrap_or_else(|| Vector::zeros(e0.len()));
        prev = inputs[l].clone();
    }
    cost + e.dot(&(&weights.terminal.pr * &e))
}

pub fn stack(inputs: &[Vector]) -> Vector {
    let d = inputs.first().map_or(0, |v| v.len());
    Vector::from_iterator(d * inputs.len(), inputs.iter().flat_map(|v| v.iter().copied()))
}

pub fn unstack(z: &Vector, d: usize) -> Vec<Vector> {
    (0..z.len() / d).map(|l| z.rows(l * d, d).into_owned()).collect()
}

//! Exponential control barrier functions for position-level quadratic
//! barriers on integrator chains.
//!
//! A barrier is evaluated on the *relative chain* `e = (e^(0), ..., e^(n-1))`:
//! the agent's blocks minus the obstacle center (obstacle) or minus the
//! neighbor's blocks (pairwise). Its top derivative is `drift_top + v` with
//! `v` the agent's own nominal input.

use serde::{Deserialize, Serialize};

use crate::certify::char_coefficients;
use crate::error::{Error, Result};
use crate::linalg::{self, Mat, Vector};

/// Below this distance the barrier gradient direction is undefined.
pub const DEGENERATE_DISTANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub enum QuadraticBarrier {
    /// `h = ‖p - c‖² - R²`
    Obstacle { center: Vector, radius: f64 },
    /// `h = ‖p_i - p_j‖² - d_safe²`
    Pairwise { d_safe: f64 },
}

impl QuadraticBarrier {
    pub fn radius(&self) -> f64 {
        match self {
            QuadraticBarrier::Obstacle { radius, .. } => *radius,
            QuadraticBarrier::Pairwise { d_safe } => *d_safe,
        }
    }

    /// Relative chain of agent state `x` (n·d) against `other` (the neighbor's
    /// state for pairwise barriers, ignored for obstacles).
    pub fn relative(&self, x: &Vector, other: Option<&Vector>, d: usize) -> Vector {
        match self {
            QuadraticBarrier::Obstacle { center, .. } => {
                let mut e = x.clone();
                for k in 0..d {
                    e[k] -= center[k];
                }
                e
            }
            QuadraticBarrier::Pairwise { .. } => x - other.expect("pairwise barrier needs the neighbor state"),
        }
    }

    pub fn value(&self, position_gap: &[f64]) -> f64 {
        position_gap.iter().map(|v| v * v).sum::<f64>() - self.radius().powi(2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EcbfCoefficients {
    /// `κ_0, ..., κ_{r-1}`.
    pub kappa: Vec<f64>,
}

impl EcbfCoefficients {
    /// Coefficients of `prod (s - p)` over the given negative poles.
    pub fn from_poles(poles: &[f64]) -> Result<Self> {
        let kappa = char_coefficients(poles);
        let out = EcbfCoefficients { kappa };
        out.check()?;
        Ok(out)
    }

    /// Hurwitz check through the companion matrix.
    pub fn check(&self) -> Result<()> {
        let r = self.kappa.len();
        let mut comp = Mat::zeros(r, r);
        for i in 0..r.saturating_sub(1) {
            comp[(i, i + 1)] = 1.0;
        }
        for j in 0..r {
            comp[(r - 1, j)] = -self.kappa[j];
        }
        let max_real = linalg::max_real_eigenvalue(&comp);
        if self.kappa.iter().any(|k| !(*k > 0.0)) || max_real >= 0.0 {
            return Err(Error::NotHurwitz { max_real });
        }
        Ok(())
    }

    pub fn order(&self) -> usize {
        self.kappa.len()
    }
}

/// `(h, L h, ..., L^{n-1} h)`, the drift part of `L^n h`, and the input row.
#[derive(Debug, Clone, PartialEq)]
pub struct LieDerivatives {
    pub orders: Vec<f64>,
    pub top_drift: f64,
    pub input_row: Vector,
}

impl LieDerivatives {
    /// Full `L^n h` for a given input.
    pub fn top(&self, v: &Vector) -> f64 {
        self.top_drift + self.input_row.dot(v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TightenedConstraintRow {
    pub a: Vector,
    pub b: f64,
    pub margin: f64,
}

impl TightenedConstraintRow {
    pub fn slack(&self, v: &Vector) -> f64 {
        self.a.dot(v) + self.b
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

fn block(e: &Vector, k: usize, d: usize) -> nalgebra::DVectorView<'_, f64> {
    e.rows(k * d, d)
}

/// Closed-form Lie derivatives of `‖e^(0)‖² - radius²` along the chain.
pub fn lie_derivatives(e: &Vector, drift_top: &Vector, radius: f64, d: usize) -> Result<LieDerivatives> {
    let n = e.len() / d;
    let dist = block(e, 0, d).norm();
    if dist < DEGENERATE_DISTANCE {
        return Err(Error::DegenerateGradient { distance: dist });
    }
    let dot = |a: usize, b: usize| block(e, a, d).dot(&block(e, b, d));
    let mut orders = Vec::with_capacity(n);
    for m in 0..n {
        let mut s: f64 = (0..=m).map(|k| binomial(m, k) * dot(k, m - k)).sum();
        if m == 0 {
            s -= radius * radius;
        }
        orders.push(s);
    }
    let e0 = block(e, 0, d).into_owned();
    let top_drift = (1..n).map(|k| binomial(n, k) * dot(k, n - k)).sum::<f64>() + 2.0 * e0.dot(drift_top);
    Ok(LieDerivatives {
        orders,
        top_drift,
        input_row: e0 * 2.0,
    })
}

/// `∇h` with respect to the agent's own full state.
pub fn gradient(e: &Vector, d: usize) -> Vector {
    let mut g = Vector::zeros(e.len());
    for k in 0..d {
        g[k] = 2.0 * e[k];
    }
    g
}

pub fn margin_obstacle(r_ball: f64, grad: &Vector) -> f64 {
    r_ball * grad.norm()
}

pub fn margin_pairwise(r_i: f64, r_j: f64, grad_i: &Vector, grad_j: &Vector) -> f64 {
    r_i * grad_i.norm() + r_j * grad_j.norm()
}

/// `L^n_drift h + Σ_{q≥1} κ_q L^q h + κ_0 (h - margin) + input_row · v ≥ 0`.
pub fn assemble_row(lie: &LieDerivatives, kappa: &EcbfCoefficients, margin: f64) -> TightenedConstraintRow {
    let mut b = lie.top_drift + kappa.kappa[0] * (lie.orders[0] - margin);
    for q in 1..lie.orders.len() {
        b += kappa.kappa[q] * lie.orders[q];
    }
    TightenedConstraintRow {
        a: lie.input_row.clone(),
        b,
        margin,
    }
}

/// Tightened row value and its gradients, for successive linearization.
#[derive(Debug, Clone, PartialEq)]
pub struct RowLinearization {
    pub value: f64,
    /// Gradient with respect to the relative chain `e`.
    pub grad_e: Vector,
    /// Gradient with respect to the agent's input.
    pub grad_v: Vector,
    pub margin: f64,
}

/// Evaluates the tightened condition at `(e, v)` where the margin is
/// `margin_radius · ‖∇h‖` (so it moves with the state) and returns its
/// gradient in `e` and `v`.
pub fn linearize_row(
    e: &Vector,
    drift_top: &Vector,
    v: &Vector,
    radius: f64,
    kappa: &EcbfCoefficients,
    margin_radius: f64,
    d: usize,
) -> Result<RowLinearization> {
    let n = e.len() / d;
    let lie = lie_derivatives(e, drift_top, radius, d)?;
    let margin = margin_radius * gradient(e, d).norm();
    let row = assemble_row(&lie, kappa, margin);
    let value = row.slack(v);
    // Weight of S_m = Σ_k C(m,k) e^(k)·e^(m-k) in the row.
    let weight = |m: usize| if m == n { 1.0 } else { kappa.kappa[m] };
    let top = drift_top + v;
    let blk = |k: usize| -> Vector {
        if k == n {
            top.clone()
        } else {
            block(e, k, d).into_owned()
        }
    };
    let mut grad_e = Vector::zeros(e.len());
    for j in 0..n {
        let mut gj = Vector::zeros(d);
        for m in j..=n {
            gj += blk(m - j) * (2.0 * binomial(m, j) * weight(m));
        }
        grad_e.rows_mut(j * d, d).copy_from(&gj);
    }
    let e0 = block(e, 0, d).into_owned();
    let dist = e0.norm();
    let dmargin = &e0 * (2.0 * margin_radius / dist);
    let mut head = grad_e.rows_mut(0, d);
    head -= dmargin * kappa.kappa[0];
    Ok(RowLinearization {
        value,
        grad_e,
        grad_v: e0 * 2.0,
        margin,
    })
}

use crate::linalg::{chain_matrices, Mat, Vector};

/// Exact zero-order-hold discretization of an order-`n` integrator chain:
/// `Ad = Σ_{k<n} (A0 Ts)^k / k!`, `Bd = Σ_{k<n} A0^k Ts^{k+1} / (k+1)! G`.
/// The series terminate because `A0` is nilpotent.
pub fn discretize_chain(n: usize, d: usize, ts: f64) -> (Mat, Mat) {
    let (a0, g) = chain_matrices(n, d);
    let nd = n * d;
    let mut ad = Mat::zeros(nd, nd);
    let mut bd = Mat::zeros(nd, d);
    let mut power = Mat::identity(nd, nd);
    let mut fact = 1.0;
    for k in 0..n {
        ad += &power * (ts.powi(k as i32) / fact);
        bd += &power * &g * (ts.powi(k as i32 + 1) / (fact * (k + 1) as f64));
        fact *= (k + 1) as f64;
        power = &power * &a0;
    }
    (ad, bd)
}

/// Discrete synchronization-error dynamics
/// `ē⁺ = Ad ē + Be v̄ + Bx w`, where `Be = -(ν1 d_i + ν2 b_i0) Bd` and `w` is
/// the weighted sum of neighbor inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorModel {
    pub ad: Mat,
    pub be: Mat,
    pub bx: Mat,
}

impl ErrorModel {
    pub fn new(n: usize, d: usize, ts: f64, self_weight: f64) -> Self {
        let (ad, bd) = discretize_chain(n, d, ts);
        ErrorModel {
            ad,
            be: &bd * (-self_weight),
            bx: bd,
        }
    }

    pub fn step(&self, e: &Vector, v: &Vector, w: &Vector) -> Vector {
        &self.ad * e + &self.be * v + &self.bx * w
    }
}

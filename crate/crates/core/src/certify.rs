//! Offline certification: ancillary gains, Lyapunov pairs, leader and
//! follower tube radii, input tightening, and the no-feedforward baseline.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::graph::{self, GlobalBoundCertificate};
use crate::linalg::{self, chain_matrices, Mat, Vector};
use crate::model::{AgentModel, BrunovskyDims};
use crate::scenario::{GainSpec, LeaderTubeMode, World};

/// Serde adapter storing a matrix as row-major nested arrays.
pub mod mat_rows {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(m: &Mat, s: S) -> std::result::Result<S::Ok, S::Error> {
        linalg::to_rows(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Mat, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        linalg::from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LyapunovPair {
    #[serde(with = "mat_rows")]
    pub k: Mat,
    #[serde(with = "mat_rows")]
    pub acl: Mat,
    #[serde(with = "mat_rows")]
    pub p: Mat,
    #[serde(with = "mat_rows")]
    pub q: Mat,
    pub lambda_min_p: f64,
    pub lambda_max_p: f64,
    pub lambda_min_q: f64,
}

impl LyapunovPair {
    /// Builds the pair for a given closed-loop matrix and `Q`.
    pub fn new(k: Mat, acl: Mat, q: Mat) -> Result<Self> {
        let p = linalg::solve_continuous_lyapunov(&acl, &q)?;
        let (lambda_min_p, lambda_max_p) = linalg::eig_extremes(&p)?;
        let (lambda_min_q, _) = linalg::eig_extremes(&q)?;
        Ok(LyapunovPair {
            k,
            acl,
            p,
            q,
            lambda_min_p,
            lambda_max_p,
            lambda_min_q,
        })
    }

    pub fn residual(&self) -> f64 {
        linalg::lyapunov_residual(&self.acl, &self.p, &self.q)
    }

    pub fn value(&self, dx: &Vector) -> f64 {
        dx.dot(&(&self.p * dx))
    }
}

/// Monic characteristic coefficients `[c_0, ..., c_{n-1}]` of `prod (s - p_k)`.
pub fn char_coefficients(poles: &[f64]) -> Vec<f64> {
    let mut c = vec![1.0];
    for &p in poles {
        let mut next = vec![0.0; c.len() + 1];
        for (i, ci) in c.iter().enumerate() {
            next[i + 1] += ci;
            next[i] -= p * ci;
        }
        c = next;
    }
    c.pop();
    c
}

/// Gain placing the chain's poles at `poles` on every axis.
pub fn pole_placement_gain(dims: &BrunovskyDims, poles: &[f64]) -> Mat {
    let coeffs = char_coefficients(poles);
    let (n, d) = (dims.n, dims.d);
    let mut k = Mat::zeros(d, n * d);
    for axis in 0..d {
        for p in 0..n {
            k[(axis, p * d + axis)] = coeffs[p];
        }
    }
    k
}

/// Continuous LQR gain by Newton-Kleinman iteration.
fn lqr_gain(dims: &BrunovskyDims, q_diag: &[f64], r: f64) -> Result<Mat> {
    let (a0, g) = chain_matrices(dims.n, dims.d);
    let q = Mat::from_diagonal(&Vector::from_vec(q_diag.to_vec()));
    let start: Vec<f64> = (1..=dims.n).map(|p| -(p as f64)).collect();
    let mut k = pole_placement_gain(dims, &start);
    for _ in 0..100 {
        let acl = &a0 - &g * &k;
        let rhs = &q + k.transpose() * &k * r;
        let p = linalg::solve_continuous_lyapunov(&acl, &rhs)?;
        let next = g.transpose() * &p / r;
        let change = (&next - &k).amax();
        k = next;
        if change < 1e-13 * k.amax().max(1.0) {
            break;
        }
    }
    Ok(k)
}

/// Ancillary gain and its Lyapunov pair with `Q = q_scale * I`.
pub fn synth_gain(dims: &BrunovskyDims, spec: &GainSpec, q_scale: f64) -> Result<LyapunovPair> {
    let (a0, g) = chain_matrices(dims.n, dims.d);
    let k = match spec {
        GainSpec::Poles { poles } => pole_placement_gain(dims, poles),
        GainSpec::Explicit { k } => linalg::from_rows(k)?,
        GainSpec::Lqr { lqr_q, lqr_r } => lqr_gain(dims, lqr_q, *lqr_r)?,
    };
    let acl = &a0 - &g * &k;
    let nd = dims.state_dim();
    LyapunovPair::new(k, acl, Mat::identity(nd, nd) * q_scale)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaderCertificate {
    pub mode: LeaderTubeMode,
    pub lyap: LyapunovPair,
    pub w0_bar: f64,
    pub lipschitz: f64,
    /// Lyapunov-level radius.
    pub rho0: f64,
    /// Ball radius `r̄_0`.
    pub r_ball0: f64,
}

/// Leader radius at equality of the Lyapunov feasibility condition.
pub fn leader_radius(lyap: &LyapunovPair, w0_bar: f64, l0: f64) -> Result<(f64, f64)> {
    let g_norm = 1.0;
    let required = 2.0 * lyap.lambda_max_p * g_norm * l0;
    let margin = lyap.lambda_min_q - required;
    if !(margin > 0.0) {
        return Err(Error::InfeasibleLeaderTube {
            lambda_min_q: lyap.lambda_min_q,
            required,
            margin,
        });
    }
    let rho0 = 2.0 * lyap.lambda_max_p * g_norm * w0_bar / margin;
    Ok((rho0, rho0 / lyap.lambda_min_p.sqrt()))
}

/// One-sampling-period Gronwall bound on the leader deviation for a nominal
/// re-initialized at every sampling instant: `w (e^{mu ts} - 1) / mu` with
/// `mu = ‖A0‖ + L0`.
pub fn gronwall_radius(w0_bar: f64, l0: f64, a0_norm: f64, ts: f64) -> f64 {
    let mu = a0_norm + l0;
    if mu == 0.0 {
        return w0_bar * ts;
    }
    w0_bar * (mu * ts).exp_m1() / mu
}

pub fn effective_disturbance(w_bar: f64, l0: f64, r0_ball: f64) -> f64 {
    w_bar + l0 * r0_ball
}

/// Follower tube radius `(r, r_ball)`.
pub fn follower_radius(lyap: &LyapunovPair, w_eff: f64) -> (f64, f64) {
    let g_norm = 1.0;
    let r = 2.0 * lyap.lambda_max_p.powf(1.5) * g_norm * w_eff / lyap.lambda_min_q;
    (r, r / lyap.lambda_min_p.sqrt())
}

/// Prior-work radius without feedforward; `None` when infeasible.
pub fn baseline_radius(lyap: &LyapunovPair, w_bar: f64, lf: f64) -> Option<f64> {
    let den = lyap.lambda_min_q - 2.0 * lf * lyap.lambda_max_p;
    (den > 0.0).then(|| 2.0 * w_bar * lyap.lambda_max_p / den)
}

/// Largest `lf` for which the baseline radius exists.
pub fn baseline_limit(lyap: &LyapunovPair) -> f64 {
    lyap.lambda_min_q / (2.0 * lyap.lambda_max_p)
}

/// `σ_max(K P^{-1/2})`, the gain from tube level to ancillary input norm.
pub fn ancillary_gain_norm(lyap: &LyapunovPair) -> Result<f64> {
    let p_inv_sqrt = linalg::spd_power(&lyap.p, -0.5)?;
    Ok(linalg::max_singular_value(&(&lyap.k * p_inv_sqrt)))
}

/// Tightened per-axis bound `u_max - η` with `η = r σ_max(K P^{-1/2})`.
/// Returns `(bound, η)`.
pub fn input_tightening(lyap: &LyapunovPair, r: f64, u_max: f64) -> Result<(f64, f64)> {
    let eta = r * ancillary_gain_norm(lyap)?;
    if u_max <= eta {
        return Err(Error::EmptyTightenedSet { u_max, eta });
    }
    Ok((u_max - eta, eta))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TubeCertificate {
    pub agent: usize,
    pub lyap: LyapunovPair,
    pub w_bar: f64,
    pub lipschitz: f64,
    pub relay_hops: usize,
    pub relay_term: f64,
    pub w_eff: f64,
    pub r: f64,
    pub r_ball: f64,
    pub input_margin: f64,
    pub v_max: f64,
    pub baseline_r: Option<f64>,
    pub baseline_r_ball: Option<f64>,
}

/// Everything `certify` produces for a scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub scenario_hash: String,
    pub scenario_name: String,
    pub leader: LeaderCertificate,
    pub followers: Vec<TubeCertificate>,
    pub global: GlobalBoundCertificate,
}

impl Certificate {
    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Scenario(e.to_string()))
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Scenario(e.to_string()))
    }

    pub fn follower(&self, i: usize) -> &TubeCertificate {
        &self.followers[i - 1]
    }
}

pub fn certify_leader(world: &World) -> Result<LeaderCertificate> {
    let cfg = &world.config;
    let dims = cfg.dims;
    let model = &world.leader;
    let spec = &cfg.leader.tube;
    let (a0, g) = chain_matrices(dims.n, dims.d);
    let center = model.operating_box.center();
    let jac = model.drift.jacobian(&center);
    let mut acl = &a0 + &g * &jac;
    let mut k = -jac;
    if let Some(gain) = &spec.stabilizing_gain {
        let stab = synth_gain(&dims, gain, 1.0)?;
        acl -= &g * &stab.k;
        k += stab.k;
    }
    let nd = dims.state_dim();
    let lyap = LyapunovPair::new(k, acl, Mat::identity(nd, nd) * spec.q_scale)?;
    let w0 = model.disturbance_bound();
    let l0 = model.drift_lipschitz;
    let (rho0, r_ball0) = match spec.mode {
        LeaderTubeMode::Lyapunov => leader_radius(&lyap, w0, l0)?,
        LeaderTubeMode::Gronwall => {
            let r = gronwall_radius(w0, l0, linalg::max_singular_value(&a0), cfg.sim.ts);
            (r * lyap.lambda_min_p.sqrt(), r)
        }
        LeaderTubeMode::Declared => {
            let r = spec.r_ball.expect("validated");
            (r * lyap.lambda_min_p.sqrt(), r)
        }
    };
    Ok(LeaderCertificate {
        mode: spec.mode,
        lyap,
        w0_bar: w0,
        lipschitz: l0,
        rho0,
        r_ball0,
    })
}

fn certify_follower(world: &World, leader: &LeaderCertificate, i: usize, hops: usize) -> Result<TubeCertificate> {
    let cfg = &world.config;
    let spec = &cfg.followers[i - 1];
    let model: &AgentModel = &world.followers[i - 1];
    let lyap = synth_gain(&cfg.dims, &spec.gain, spec.q_scale)?;
    let w_bar = model.disturbance_bound();
    let relay_term = leader.lipschitz * hops as f64 * cfg.sim.ts * cfg.leader.tube.top_derivative_bound;
    let w_eff = effective_disturbance(w_bar, leader.lipschitz, leader.r_ball0) + relay_term;
    let (r, r_ball) = follower_radius(&lyap, w_eff);
    let (v_max, input_margin) = input_tightening(&lyap, r, cfg.ocp.u_max)?;
    let baseline_r = baseline_radius(&lyap, w_eff, model.drift_lipschitz);
    let baseline_r_ball = baseline_r.map(|b| b / lyap.lambda_min_p.sqrt());
    Ok(TubeCertificate {
        agent: i,
        lyap,
        w_bar,
        lipschitz: model.drift_lipschitz,
        relay_hops: hops,
        relay_term,
        w_eff,
        r,
        r_ball,
        input_margin,
        v_max,
        baseline_r,
        baseline_r_ball,
    })
}

/// Runs the full offline design for a realized scenario.
pub fn certify(world: &World) -> Result<Certificate> {
    let g = &world.graph;
    let unreachable = g.unreachable();
    if !unreachable.is_empty() {
        return Err(Error::GraphNotRooted { unreachable });
    }
    let tree = g.bfs_tree();
    let leader = certify_leader(world)?;
    let ids: Vec<usize> = (1..=g.followers()).collect();
    let followers: Vec<TubeCertificate> = exec::par_map(&ids, |&i| {
        let hops = tree[i - 1].expect("rooted").1;
        certify_follower(world, &leader, i, hops)
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let radii: Vec<f64> = followers.iter().map(|c| c.r_ball).collect();
    let zbars: Vec<f64> = ids.iter().map(|&i| graph::zbar(i, &radii, leader.r_ball0, g)).collect();
    let global = graph::global_bound(g, &zbars)?;
    Ok(Certificate {
        scenario_hash: world.config.hash(),
        scenario_name: world.config.name.clone(),
        leader,
        followers,
        global,
    })
}

/// Disturbance policy for [`rpi_check`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RpiDisturbance {
    /// `w_eff` along `G^T P dx`, the direction that increases `V` fastest.
    Adversarial,
    /// Random direction at full magnitude, redrawn every `hold` steps.
    Random { hold: usize },
}

/// Worst observed `V(t) / r^2` when the deviation system is started from
/// `starts` points on the tube boundary and driven at `w_eff`.
pub fn rpi_check(
    lyap: &LyapunovPair,
    r: f64,
    w_eff: f64,
    starts: usize,
    t_end: f64,
    dt: f64,
    policy: RpiDisturbance,
    seed: u64,
) -> Result<f64> {
    let nd = lyap.p.nrows();
    let d = lyap.k.nrows();
    let (_, g) = chain_matrices(nd / d, d);
    let p_inv_sqrt = linalg::spd_power(&lyap.p, -0.5)?;
    let gtp = g.transpose() * &lyap.p;
    let steps = (t_end / dt).round() as usize;
    let worst = exec::par_map_range(starts, |s| -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(s as u64 * 7919));
        let mut unit = Vector::from_iterator(nd, (0..nd).map(|_| rng.gen_range(-1.0..1.0)));
        unit /= unit.norm();
        let mut x = &p_inv_sqrt * unit * r;
        let mut worst = lyap.value(&x) / (r * r);
        let mut held = Vector::zeros(d);
        for step in 0..steps {
            if let RpiDisturbance::Random { hold } = policy {
                if step % hold.max(1) == 0 {
                    let mut dir = Vector::from_iterator(d, (0..d).map(|_| rng.gen_range(-1.0..1.0)));
                    let norm = dir.norm();
                    if norm > 0.0 {
                        dir /= norm;
                    }
                    held = dir * w_eff;
                }
            }
            let field = |_t: f64, z: &Vector| -> Vector {
                let w = match policy {
                    RpiDisturbance::Adversarial => {
                        let dir = &gtp * z;
                        let norm = dir.norm();
                        if norm > 0.0 {
                            dir * (w_eff / norm)
                        } else {
                            Vector::zeros(d)
                        }
                    }
                    RpiDisturbance::Random { .. } => held.clone(),
                };
                &lyap.acl * z + &g * w
            };
            x = linalg::rk4_step(field, &x, step as f64 * dt, dt)?;
            worst = worst.max(lyap.value(&x) / (r * r));
        }
        Ok(worst)
    });
    worst.into_iter().try_fold(0.0f64, |acc, v| Ok(acc.max(v?)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_pair(lmin_p: f64, lmax_p: f64, lmin_q: f64) -> LyapunovPair {
        let acl = Mat::from_element(1, 1, -1.0);
        LyapunovPair {
            k: Mat::zeros(1, 1),
            acl,
            p: Mat::from_element(1, 1, lmax_p),
            q: Mat::from_element(1, 1, lmin_q),
            lambda_min_p: lmin_p,
            lambda_max_p: lmax_p,
            lambda_min_q: lmin_q,
        }
    }

    #[test]
    fn characteristic_coefficients() {
        assert_eq!(char_coefficients(&[-1.0, -2.0]), vec![2.0, 3.0]);
        assert_eq!(char_coefficients(&[-2.0]), vec![2.0]);
        let c = char_coefficients(&[-1.5, -2.5, -3.5]);
        assert!((c[0] - 13.125).abs() < 1e-12 && (c[1] - 17.75).abs() < 1e-12 && (c[2] - 7.5).abs() < 1e-12);
    }

    #[test]
    fn synth_gain_examples() {
        let d1 = BrunovskyDims { n: 1, d: 1, big_n: 1 };
        let pair = synth_gain(&d1, &GainSpec::Poles { poles: vec![-2.0] }, 1.0).unwrap();
        assert_eq!(pair.k[(0, 0)], 2.0);
        assert_eq!(pair.acl[(0, 0)], -2.0);
        let d2 = BrunovskyDims { n: 2, d: 1, big_n: 1 };
        let pair = synth_gain(&d2, &GainSpec::Poles { poles: vec![-1.0, -2.0] }, 1.0).unwrap();
        assert_eq!(pair.k.as_slice(), &[2.0, 3.0]);
    }

    #[test]
    fn synth_gain_places_poles() {
        let dims = BrunovskyDims { n: 3, d: 2, big_n: 5 };
        let pair = synth_gain(&dims, &GainSpec::default(), 1.0).unwrap();
        let mut re: Vec<f64> = pair.acl.complex_eigenvalues().iter().map(|z| {
            assert!(z.im.abs() < 1e-6);
            z.re
        }).collect();
        re.sort_by(f64::total_cmp);
        let want = [-4.0, -4.0, -3.0, -3.0, -2.0, -2.0];
        for (a, b) in re.iter().zip(want) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
        assert!(pair.residual() < 1e-9 * pair.q.norm());
    }

    #[test]
    fn explicit_gain_must_stabilize() {
        let dims = BrunovskyDims { n: 2, d: 1, big_n: 1 };
        let spec = GainSpec::Explicit { k: vec![vec![-1.0, 1.0]] };
        assert!(matches!(synth_gain(&dims, &spec, 1.0), Err(Error::NotHurwitz { .. })));
    }

    #[test]
    fn lqr_gain_is_stabilizing() {
        let dims = BrunovskyDims { n: 3, d: 1, big_n: 1 };
        let spec = GainSpec::Lqr { lqr_q: vec![1.0, 1.0, 1.0], lqr_r: 1.0 };
        let pair = synth_gain(&dims, &spec, 1.0).unwrap();
        assert!(linalg::is_hurwitz(&pair.acl));
        // For a triple integrator with Q = I, R = 1 the LQR gain's first entry is 1.
        assert!((pair.k[(0, 0)] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn leader_radius_examples() {
        let pair = scalar_pair(1.0, 1.0, 2.0);
        let (rho, rb) = leader_radius(&pair, 0.5, 0.5).unwrap();
        assert!((rho - 1.0).abs() < 1e-12 && (rb - 1.0).abs() < 1e-12);
        assert_eq!(leader_radius(&pair, 0.0, 0.5).unwrap().0, 0.0);
        let limit = 2.0 / 2.0;
        let (rho, _) = leader_radius(&pair, 2.0, 0.999 * limit).unwrap();
        assert!(rho > 1e3);
        assert!(matches!(leader_radius(&pair, 0.5, limit), Err(Error::InfeasibleLeaderTube { .. })));
    }

    #[test]
    fn effective_disturbance_examples() {
        assert!((effective_disturbance(0.1, 2.0, 0.05) - 0.2).abs() < 1e-15);
        assert_eq!(effective_disturbance(0.3, 4.0, 0.0), 0.3);
        assert_eq!(effective_disturbance(0.0, 0.0, 7.0), 0.0);
    }

    #[test]
    fn follower_and_baseline_examples() {
        let pair = scalar_pair(1.0, 1.0, 2.0);
        let (r, rb) = follower_radius(&pair, 0.1);
        assert!((r - 0.1).abs() < 1e-15 && (rb - 0.1).abs() < 1e-15);
        assert_eq!(follower_radius(&pair, 0.0).0, 0.0);
        assert!((baseline_radius(&pair, 0.1, 0.0).unwrap() - 0.1).abs() < 1e-15);
        assert_eq!(baseline_radius(&pair, 0.1, 1.0), None);
    }

    #[test]
    fn tightening_examples() {
        let pair = LyapunovPair::new(
            Mat::identity(2, 2),
            -Mat::identity(2, 2),
            Mat::identity(2, 2) * 2.0,
        )
        .unwrap();
        let (b, eta) = input_tightening(&pair, 0.2, 1.0).unwrap();
        assert!((b - 0.8).abs() < 1e-12 && (eta - 0.2).abs() < 1e-12);
        assert_eq!(input_tightening(&pair, 0.0, 1.0).unwrap().0, 1.0);
        assert!(matches!(input_tightening(&pair, 2.0, 1.0), Err(Error::EmptyTightenedSet { .. })));
    }

    #[test]
    fn gronwall_radius_small_step() {
        let r = gronwall_radius(1.0, 0.0, 0.0, 0.1);
        assert!((r - 0.1).abs() < 1e-15);
        let r = gronwall_radius(1.0, 1.0, 1.0, 0.1);
        assert!((r - (0.2f64.exp() - 1.0) / 2.0).abs() < 1e-15);
    }
}

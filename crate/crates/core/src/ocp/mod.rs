//! Per-agent finite-horizon OCP: prediction models, terminal ingredients,
//! barrier-row linearization and the embedded QP solver.

pub mod discretize;
pub mod problem;
pub mod qp;
pub mod terminal;

use crate::barrier::{linearize_row, EcbfCoefficients};
use crate::error::{Error, Result};
use crate::linalg::{Mat, Vector};
use crate::scenario::{BarrierSettings, Obstacle, OcpSettings};

pub use discretize::{discretize_chain, ErrorModel};
pub use problem::{build_qp, rollout_cost, stack, unstack, Condensed, CostWeights};
pub use qp::{kkt_residuals, solve_qp, KktResiduals, QpProblem, QpSolution, QpStatus};
pub use terminal::{solve_dare, terminal_ingredients, TerminalIngredients};

pub const QP_TOL: f64 = 1e-10;

/// Everything an agent needs to pose its OCP, fixed at certify time.
#[derive(Debug, Clone, PartialEq)]
pub struct OcpSpec {
    pub n: usize,
    pub d: usize,
    pub horizon: usize,
    pub ts: f64,
    pub weights: CostWeights,
    /// Tightened per-axis input bound.
    pub v_max: f64,
    pub terminal_equality: bool,
    pub max_sqp_passes: usize,
    pub sqp_tol: f64,
    pub qp_max_iter: usize,
    pub kappa: EcbfCoefficients,
    pub d_safe: f64,
    pub activation_range: f64,
    pub error_model: ErrorModel,
    pub ad: Mat,
    pub bd: Mat,
}

impl OcpSpec {
    pub fn new(
        n: usize,
        d: usize,
        ts: f64,
        settings: &OcpSettings,
        barrier: &BarrierSettings,
        self_weight: f64,
        v_max: f64,
    ) -> Result<Self> {
        let nd = n * d;
        let error_model = ErrorModel::new(n, d, ts, self_weight);
        let qr = Mat::identity(nd, nd) * settings.qr;
        let r = Mat::identity(d, d) * settings.r;
        let terminal = terminal_ingredients(
            &error_model.ad,
            &error_model.be,
            &qr,
            &r,
            v_max,
            settings.terminal_level_factor,
        )?;
        let (ad, bd) = discretize_chain(n, d, ts);
        Ok(OcpSpec {
            n,
            d,
            horizon: settings.horizon,
            ts,
            weights: CostWeights {
                qr,
                r,
                rdelta: Mat::identity(d, d) * settings.rdelta,
                terminal,
            },
            v_max,
            terminal_equality: settings.terminal_equality,
            max_sqp_passes: settings.max_sqp_passes,
            sqp_tol: settings.sqp_tol,
            qp_max_iter: settings.qp_max_iter,
            kappa: EcbfCoefficients::from_poles(&barrier.kappa_poles)?,
            d_safe: barrier.d_safe,
            activation_range: barrier.activation_range,
            error_model,
            ad,
            bd,
        })
    }
}

/// A neighbor's predicted trajectory as seen by the solving agent.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborPrediction {
    pub id: usize,
    /// `ν1 a_ij`, the weight of this neighbor in the error dynamics.
    pub weight: f64,
    pub inputs: Vec<Vector>,
    /// `H + 1` predicted full states.
    pub states: Vec<Vector>,
    pub r_ball: f64,
}

/// Online data for one solve.
#[derive(Debug, Clone, PartialEq)]
pub struct OcpInputs {
    /// Measured synchronization error at `t_k`.
    pub e0: Vector,
    /// Persistent nominal state at `t_k`.
    pub x0: Vector,
    /// Leader nominal preview, `H + 1` states.
    pub leader: Vec<Vector>,
    /// Leader drift along the preview, `H` vectors.
    pub leader_top: Vec<Vector>,
    pub neighbors: Vec<NeighborPrediction>,
    pub obstacles: Vec<Obstacle>,
    /// Previously applied nominal input.
    pub u_prev: Vector,
    pub warm_start: Vec<Vector>,
    /// Ball radius used for this agent's barrier margins.
    pub margin_radius: f64,
    /// Pairwise rows are dropped on the very first solve.
    pub pairwise: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OcpSolution {
    pub inputs: Vec<Vector>,
    pub errors: Vec<Vector>,
    pub states: Vec<Vector>,
    pub objective: f64,
    pub iterations: usize,
    pub passes: usize,
    pub converged: bool,
    pub status: QpStatus,
    /// Set when the terminal constraints had to be dropped to find a plan.
    pub terminal_relaxed: bool,
    pub kkt: f64,
    /// Smallest exact (non-linearized) barrier slack along the plan.
    pub min_row_slack: f64,
    pub barrier_rows: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Terminal {
    Full,
    EqualityOnly,
    None,
}

struct Row {
    value: f64,
    coef: Vector,
}

impl OcpInputs {
    fn offsets(&self, spec: &OcpSpec) -> Vec<Vector> {
        (0..spec.horizon)
            .map(|l| {
                let mut w = Vector::zeros(spec.d);
                for nb in &self.neighbors {
                    w += &nb.inputs[l] * nb.weight;
                }
                &spec.error_model.bx * w
            })
            .collect()
    }

    /// `x̄_l = x̂̄⁰_l + y_l` where `y` is a pure chain driven by `v̄`.
    fn nominal(&self, spec: &OcpSpec) -> Condensed {
        let y0 = &self.x0 - &self.leader[0];
        let mut pred = Condensed::new(&spec.ad, &spec.bd, &y0, &[], spec.horizon);
        for (c, lead) in pred.c.iter_mut().zip(&self.leader) {
            *c += lead;
        }
        pred
    }

    fn rows(&self, spec: &OcpSpec, nominal: &Condensed, z: &Vector) -> Result<Vec<Row>> {
        let (n, d) = (spec.n, spec.d);
        let nd = n * d;
        let mut rows = Vec::new();
        let active_obstacles: Vec<&Obstacle> = self
            .obstacles
            .iter()
            .filter(|o| {
                let gap = (self.x0.rows(0, d) - &o.center).norm() - o.effective_radius();
                gap <= spec.activation_range
            })
            .collect();
        let active_neighbors: Vec<&NeighborPrediction> = if self.pairwise {
            self.neighbors
                .iter()
                .filter(|nb| {
                    let gap = (self.x0.rows(0, d) - nb.states[0].rows(0, d)).norm() - spec.d_safe;
                    gap <= spec.activation_range
                })
                .collect()
        } else {
            Vec::new()
        };
        for l in 0..spec.horizon {
            let x = nominal.at(l, z);
            let v = z.rows(l * d, d).into_owned();
            let mut push = |e: Vector, drift_top: Vector, radius: f64, margin_radius: f64| -> Result<()> {
                let lin = linearize_row(&e, &drift_top, &v, radius, &spec.kappa, margin_radius, d)?;
                let mut coef = nominal.s[l].transpose() * &lin.grad_e;
                let mut head = coef.rows_mut(l * d, d);
                head += &lin.grad_v;
                rows.push(Row { value: lin.value, coef });
                Ok(())
            };
            for o in &active_obstacles {
                let mut e = x.clone();
                let mut pos = e.rows_mut(0, d);
                pos -= &o.center;
                push(e, self.leader_top[l].clone(), o.effective_radius(), self.margin_radius)?;
            }
            for nb in &active_neighbors {
                debug_assert_eq!(nb.states[l].len(), nd);
                push(
                    &x - &nb.states[l],
                    -&nb.inputs[l],
                    spec.d_safe,
                    self.margin_radius + nb.r_ball,
                )?;
            }
        }
        Ok(rows)
    }
}

/// Successive-linearization solve of one agent's OCP. On infeasibility the
/// terminal hyperplane and then the terminal input law are dropped before
/// giving up with [`Error::Infeasible`].
pub fn solve_ocp(spec: &OcpSpec, inputs: &OcpInputs) -> Result<OcpSolution> {
    let (n, d, horizon) = (spec.n, spec.d, spec.horizon);
    if inputs.e0.len() != n * d
        || inputs.x0.len() != n * d
        || inputs.leader.len() != horizon + 1
        || inputs.leader_top.len() != horizon
        || inputs.neighbors.iter().any(|nb| nb.inputs.len() != horizon || nb.states.len() != horizon + 1)
    {
        return Err(Error::DimensionMismatch("OCP inputs do not match the horizon".into()));
    }
    let offsets = inputs.offsets(spec);
    let errors = Condensed::new(&spec.error_model.ad, &spec.error_model.be, &inputs.e0, &offsets, horizon);
    let nominal = inputs.nominal(spec);
    let mut start = if inputs.warm_start.len() == horizon {
        stack(&inputs.warm_start)
    } else {
        Vector::zeros(horizon * d)
    };
    start.apply(|v| *v = v.clamp(-spec.v_max, spec.v_max));

    let levels: &[Terminal] = if spec.terminal_equality {
        &[Terminal::Full, Terminal::EqualityOnly, Terminal::None]
    } else {
        &[Terminal::Full, Terminal::None]
    };
    let mut last_err = Error::Infeasible;
    for &level in levels {
        match sqp(spec, inputs, &errors, &nominal, &start, level) {
            Ok(mut sol) => {
                sol.terminal_relaxed = level != Terminal::Full;
                return Ok(sol);
            }
            Err(Error::Infeasible) => last_err = Error::Infeasible,
            Err(e @ Error::MaxIter(_)) => last_err = e,
            Err(e) => return Err(e),
        }
    }
    Err(last_err)
}

fn sqp(
    spec: &OcpSpec,
    inputs: &OcpInputs,
    errors: &Condensed,
    nominal: &Condensed,
    start: &Vector,
    level: Terminal,
) -> Result<OcpSolution> {
    let mut z = start.clone();
    let mut iterations = 0;
    let mut passes = 0;
    let mut converged = false;
    let mut last: Option<(QpProblem, QpSolution, usize)> = None;
    for _ in 0..spec.max_sqp_passes.max(1) {
        passes += 1;
        let rows = inputs.rows(spec, nominal, &z)?;
        let extra: Vec<(Vector, f64)> = rows
            .iter()
            .map(|r| (r.coef.clone(), r.coef.dot(&z) - r.value))
            .collect();
        let qp = build_qp(
            &spec.weights,
            errors,
            &inputs.u_prev,
            spec.v_max,
            &extra,
            level != Terminal::None && spec.terminal_equality,
            (level == Terminal::Full).then_some(&z),
        )?;
        let sol = solve_qp(&qp, QP_TOL, spec.qp_max_iter)?;
        iterations += sol.iterations;
        let change = (&sol.z - &z).amax();
        z = sol.z.clone();
        last = Some((qp, sol, rows.len()));
        if change < spec.sqp_tol {
            converged = true;
            break;
        }
    }
    let (qp, sol, barrier_rows) = last.expect("at least one pass");
    let kkt = kkt_residuals(&qp, &sol).max();
    let min_row_slack = inputs
        .rows(spec, nominal, &z)?
        .iter()
        .map(|r| r.value)
        .fold(f64::INFINITY, f64::min);
    Ok(OcpSolution {
        inputs: unstack(&z, spec.d),
        errors: (0..=spec.horizon).map(|l| errors.at(l, &z)).collect(),
        states: (0..=spec.horizon).map(|l| nominal.at(l, &z)).collect(),
        objective: sol.objective,
        iterations,
        passes,
        converged,
        status: sol.status,
        terminal_relaxed: false,
        kkt,
        min_row_slack,
        barrier_rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn settings(horizon: usize) -> (OcpSettings, BarrierSettings) {
        let ocp: OcpSettings = toml::from_str(&format!("horizon = {horizon}\nu_max = 20.0")).unwrap();
        let barrier: BarrierSettings = toml::from_str("").unwrap();
        (ocp, barrier)
    }

    fn lone_inputs(spec: &OcpSpec, e0: Vector, x0: Vector) -> OcpInputs {
        let nd = spec.n * spec.d;
        OcpInputs {
            e0,
            x0,
            leader: vec![Vector::zeros(nd); spec.horizon + 1],
            leader_top: vec![Vector::zeros(spec.d); spec.horizon],
            neighbors: Vec::new(),
            obstacles: Vec::new(),
            u_prev: Vector::zeros(spec.d),
            warm_start: Vec::new(),
            margin_radius: 0.0,
            pairwise: true,
        }
    }

    #[test]
    fn equilibrium_gives_zero_plan() {
        let (ocp, barrier) = settings(5);
        let spec = OcpSpec::new(3, 2, 0.1, &ocp, &barrier, 1.0, 10.0).unwrap();
        let sol = solve_ocp(&spec, &lone_inputs(&spec, Vector::zeros(6), Vector::zeros(6))).unwrap();
        assert!(sol.inputs.iter().all(|v| v.amax() == 0.0));
        assert_eq!(sol.objective, 0.0);
        assert!(!sol.terminal_relaxed);
    }

    #[test]
    fn unconstrained_matches_normal_equations() {
        let (mut ocp, barrier) = settings(4);
        ocp.terminal_equality = false;
        let spec = OcpSpec::new(2, 1, 0.1, &ocp, &barrier, 1.0, 1e6).unwrap();
        // A tiny error keeps the terminal hyperplane inactive.
        let e0 = Vector::from_vec(vec![1e-3, -2e-3]);
        let sol = solve_ocp(&spec, &lone_inputs(&spec, e0.clone(), Vector::zeros(2))).unwrap();
        let pred = Condensed::new(&spec.error_model.ad, &spec.error_model.be, &e0, &[], 4);
        let qp = build_qp(&spec.weights, &pred, &Vector::zeros(1), 1e6, &[], false, None).unwrap();
        let direct = -qp.h.clone().lu().solve(&qp.g).unwrap();
        assert!((stack(&sol.inputs) - direct).amax() < 1e-10);
    }

    #[test]
    fn head_on_obstacle_rows_hold() {
        let (ocp, barrier) = settings(5);
        let spec = OcpSpec::new(3, 2, 0.1, &ocp, &barrier, 1.0, 10.0).unwrap();
        let x0 = Vector::from_vec(vec![-1.0, 0.0, 2.0, 0.0, 0.0, 0.0]);
        let mut inputs = lone_inputs(&spec, Vector::from_vec(vec![-3.0, 0.0, 0.0, 0.0, 0.0, 0.0]), x0);
        inputs.obstacles.push(Obstacle {
            center: Vector::from_vec(vec![0.0, 0.01]),
            radius: 0.5,
            inflation: 0.0,
        });
        inputs.margin_radius = 0.02;
        let sol = solve_ocp(&spec, &inputs).unwrap();
        assert!(sol.barrier_rows > 0);
        assert!(sol.min_row_slack >= -1e-6, "slack {}", sol.min_row_slack);
    }
}

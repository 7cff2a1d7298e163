//! Closed-loop simulation: sampled plan exchange and OCP solves on top of a
//! fine RK4 integration of the true plants, their persistent nominals and
//! the leader nominals.

pub mod metrics;
pub mod trace;

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::certify::{Certificate, LeaderCertificate};
use crate::error::{Error, Result};
use crate::exec;
use crate::graph::sync_error;
use crate::linalg::{rk4_step, Mat, Vector};
use crate::model::AgentModel;
use crate::ocp::{solve_ocp, ErrorModel, NeighborPrediction, OcpInputs, OcpSolution, OcpSpec};
use crate::protocol::{self, Board, LeaderEstimate, PlanMessage, RadiusTable};
use crate::scenario::{LeaderTubeMode, SimSettings, World};

pub use metrics::{metrics, Metrics, RunSummary};
pub use trace::SimTrace;

/// Slack allowed on tube occupancy before a breach is reported.
pub const OCCUPANCY_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub t_end: f64,
    pub ts: f64,
    pub fine_substeps: usize,
    pub seed: u64,
    /// Cancel the agent's own drift and add the leader's.
    pub feedforward_on: bool,
    /// Size barrier margins with the no-feedforward radii instead.
    pub baseline_margins: bool,
}

impl SimConfig {
    pub fn from_settings(s: &SimSettings) -> Self {
        SimConfig {
            t_end: s.t_end,
            ts: s.ts,
            fine_substeps: s.fine_substeps,
            seed: s.seed,
            feedforward_on: true,
            baseline_margins: false,
        }
    }

    pub fn steps(&self) -> usize {
        (self.t_end / self.ts).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.fine_substeps == 0 || !(self.ts > 0.0) || !(self.t_end >= 0.0) {
            return Err(Error::Scenario(
                "simulation needs ts > 0, t_end >= 0 and at least one fine substep".into(),
            ));
        }
        Ok(())
    }
}

/// `u = v̄ - K (x - x̄) + f⁰(x̂⁰) - f^i(x)`; without feedforward only the
/// first two terms remain.
pub fn apply_control(
    gain: &Mat,
    x: &Vector,
    nominal: &Vector,
    vbar: &Vector,
    leader_drift: &Vector,
    own_drift: &Vector,
    feedforward: bool,
) -> Vector {
    let fb = vbar - gain * (x - nominal);
    if feedforward {
        fb + leader_drift - own_drift
    } else {
        fb
    }
}

/// `ẋ` of an integrator chain whose top derivative is `top`.
pub fn chain_rate(x: &Vector, top: &Vector) -> Vector {
    let d = top.len();
    let nd = x.len();
    let mut out = Vector::zeros(nd);
    out.rows_mut(0, nd - d).copy_from(&x.rows(d, nd - d));
    out.rows_mut(nd - d, d).copy_from(top);
    out
}

/// Noise-free leader prediction over the horizon from `x`, integrated with
/// the same fine step as the plant. Returns `H + 1` states and the leader
/// drift at the first `H` of them.
pub fn leader_preview(
    leader: &AgentModel,
    x: &Vector,
    t: f64,
    horizon: usize,
    ts: f64,
    substeps: usize,
) -> Result<(Vec<Vector>, Vec<Vector>)> {
    let h = ts / substeps as f64;
    let mut states = vec![x.clone()];
    let mut tops = Vec::with_capacity(horizon);
    let mut cur = x.clone();
    for l in 0..horizon {
        let t_l = t + l as f64 * ts;
        tops.push(leader.drift_at(&cur, t_l));
        for s in 0..substeps {
            cur = rk4_step(|tt, z| chain_rate(z, &leader.drift_at(z, tt)), &cur, t_l + s as f64 * h, h)?;
        }
        states.push(cur.clone());
    }
    Ok((states, tops))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub step: usize,
    pub time: f64,
    pub what: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunStats {
    pub steps: usize,
    pub fallbacks: Vec<usize>,
    pub relaxed: Vec<usize>,
    pub qp_iterations: usize,
    pub max_kkt: f64,
    pub unconverged_sqp: usize,
    pub deliveries: usize,
    pub radius_messages: usize,
    /// Wall-clock seconds of each parallel solve phase. Never written to the trace.
    pub solve_seconds: Vec<f64>,
    pub first_violation: Option<Violation>,
}

#[derive(Debug, Clone)]
struct Agent {
    id: usize,
    model: AgentModel,
    gain: Mat,
    p: Mat,
    r: f64,
    spec: OcpSpec,
    margin_radius: f64,
    pinned: bool,
    x: Vector,
    nominal: Vector,
    leader_nominal: Vector,
    estimate: LeaderEstimate,
    plan: Vec<Vector>,
    applied: Vector,
    consecutive_fallbacks: usize,
    status: f64,
    iterations: usize,
    sync_error: Vector,
}

/// Sample-step quantities held constant across the fine steps of a period.
#[derive(Debug, Clone, Default)]
struct Held {
    prediction_error: f64,
}

pub struct Simulation<'w> {
    world: &'w World,
    leader_cert: LeaderCertificate,
    config: SimConfig,
    k: usize,
    t: f64,
    leader: Vector,
    leader_nominal: Vector,
    agents: Vec<Agent>,
    board: Board,
    tables: Vec<RadiusTable>,
    trace: SimTrace,
    stats: RunStats,
    held: Held,
}

pub struct SimOutcome {
    pub trace: SimTrace,
    pub stats: RunStats,
}

impl<'w> Simulation<'w> {
    pub fn new(world: &'w World, cert: &Certificate, config: SimConfig) -> Result<Self> {
        config.validate()?;
        let cfg = &world.config;
        let dims = cfg.dims;
        let g = &world.graph;
        let states = cfg.initial_states();
        let mut agents = Vec::with_capacity(dims.big_n);
        for i in 1..=dims.big_n {
            let tc = cert.follower(i);
            let spec = OcpSpec::new(dims.n, dims.d, config.ts, &cfg.ocp, &cfg.barrier, g.self_weight(i), tc.v_max)?;
            let margin_radius = if config.baseline_margins {
                tc.baseline_r_ball.ok_or_else(|| {
                    Error::Scenario(format!("agent {i} has no feasible baseline radius for baseline margins"))
                })?
            } else {
                tc.r_ball
            };
            agents.push(Agent {
                id: i,
                model: world.followers[i - 1].clone(),
                gain: tc.lyap.k.clone(),
                p: tc.lyap.p.clone(),
                r: tc.r,
                spec,
                margin_radius,
                pinned: g.pin(i) > 0.0,
                x: states[i].clone(),
                nominal: states[i].clone(),
                leader_nominal: states[0].clone(),
                estimate: LeaderEstimate {
                    holder: i,
                    hops: 0,
                    value: states[0].clone(),
                    age: 0,
                },
                plan: vec![Vector::zeros(dims.d); cfg.ocp.horizon],
                applied: Vector::zeros(dims.d),
                consecutive_fallbacks: 0,
                status: 0.0,
                iterations: 0,
                sync_error: Vector::zeros(dims.state_dim()),
            });
        }
        let radii: Vec<f64> = agents.iter().map(|a| a.margin_radius).collect();
        let (tables, radius_messages) = protocol::initial_broadcast(&radii, g);
        let estimates = protocol::initial_estimates(g, &states[0])?;
        for (a, e) in agents.iter_mut().zip(estimates) {
            a.estimate = e;
        }
        let stats = RunStats {
            fallbacks: vec![0; dims.big_n],
            relaxed: vec![0; dims.big_n],
            radius_messages,
            ..RunStats::default()
        };
        let columns = columns(world, cfg.ocp.horizon);
        Ok(Simulation {
            world,
            leader_cert: cert.leader.clone(),
            config,
            k: 0,
            t: 0.0,
            leader: states[0].clone(),
            leader_nominal: states[0].clone(),
            agents,
            board: Board::new(dims.big_n + 1, radius_messages),
            tables,
            trace: SimTrace::new(columns),
            stats,
            held: Held::default(),
        })
    }

    pub fn step_index(&self) -> usize {
        self.k
    }

    pub fn trace(&self) -> &SimTrace {
        &self.trace
    }

    pub fn stats(&self) -> &RunStats {
        &self.stats
    }

    /// One sampling period: measure, relay, predict, solve, broadcast, integrate.
    pub fn step(&mut self) -> Result<()> {
        let world = self.world;
        let cfg = &world.config;
        let d = cfg.dims.d;
        let horizon = cfg.ocp.horizon;
        let k = self.k;
        let t = self.t;
        let g = &world.graph;

        // Measure and relay the leader state.
        let previous: Vec<LeaderEstimate> = self.agents.iter().map(|a| a.estimate.clone()).collect();
        let estimates = if k == 0 {
            protocol::initial_estimates(g, &self.leader)?
        } else {
            protocol::relay_leader(g, &self.leader, &previous)?
        };
        self.leader_nominal = self.leader.clone();
        for (a, e) in self.agents.iter_mut().zip(estimates) {
            a.leader_nominal = e.value.clone();
            a.estimate = e;
        }

        // Leader previews, one per agent (pinned agents share the true state).
        let ts = self.config.ts;
        let substeps = self.config.fine_substeps;
        let starts: Vec<Vector> = self.agents.iter().map(|a| a.leader_nominal.clone()).collect();
        let previews: Vec<(Vec<Vector>, Vec<Vector>)> =
            exec::par_map(&starts, |x| leader_preview(&world.leader, x, t, horizon, ts, substeps))
                .into_iter()
                .collect::<Result<_>>()?;

        // Synchronization errors from the measured states.
        let mut measured: Vec<Option<Vector>> = vec![Some(self.leader.clone())];
        measured.extend(self.agents.iter().map(|a| Some(a.x.clone())));
        for a in self.agents.iter_mut() {
            a.sync_error = sync_error(a.id, &measured, g, &world.formation)?;
        }

        // Neighbor predictions from last step's plans.
        let mut shifted: Vec<Vec<Vector>> = Vec::with_capacity(self.agents.len());
        for a in &self.agents {
            if k == 0 {
                shifted.push(vec![Vector::zeros(d); horizon]);
            } else {
                let msg = self.board.latest(a.id).ok_or(Error::StalePlan {
                    sender: a.id,
                    stamp: 0,
                    expected: k - 1,
                })?;
                shifted.push(protocol::shift_plan(msg, &a.spec.weights.terminal.k_hat, k)?);
            }
        }
        let mut inputs = Vec::with_capacity(self.agents.len());
        let mut predicted_next: Vec<Vec<(usize, Vector)>> = Vec::with_capacity(self.agents.len());
        for (ai, a) in self.agents.iter().enumerate() {
            let (leader, leader_top) = &previews[ai];
            let mut neighbors = Vec::new();
            let mut next = Vec::new();
            for j in g.neighbors(a.id) {
                if k > 0 {
                    self.board.read(j, k)?;
                }
                let plan = shifted[j - 1].clone();
                let states = protocol::rollout_neighbor(&self.agents[j - 1].x, &plan, leader, &a.spec.ad, &a.spec.bd)?;
                next.push((j, states[1].clone()));
                neighbors.push(NeighborPrediction {
                    id: j,
                    weight: g.nu1 * g.weight(a.id, j),
                    inputs: plan,
                    states,
                    r_ball: self.tables[ai].get(j).expect("table covers neighbors"),
                });
            }
            predicted_next.push(next);
            inputs.push(OcpInputs {
                e0: a.sync_error.clone(),
                x0: a.nominal.clone(),
                leader: leader.clone(),
                leader_top: leader_top.clone(),
                neighbors,
                obstacles: world.obstacles.clone(),
                u_prev: a.applied.clone(),
                warm_start: shifted[ai].clone(),
                margin_radius: a.margin_radius,
                pairwise: k > 0,
            });
        }

        // Solve phase.
        let clock = Instant::now();
        let specs: Vec<(&OcpSpec, &OcpInputs)> = self.agents.iter().map(|a| &a.spec).zip(inputs.iter()).collect();
        let results: Vec<Result<OcpSolution>> = exec::par_map(&specs, |(spec, inp)| solve_ocp(spec, inp));
        self.stats.solve_seconds.push(clock.elapsed().as_secs_f64());

        // Broadcast phase.
        let mut messages = Vec::with_capacity(self.agents.len());
        for (ai, result) in results.into_iter().enumerate() {
            let a = &mut self.agents[ai];
            let (plan, terminal_error) = match result {
                Ok(sol) => {
                    a.consecutive_fallbacks = 0;
                    a.status = if sol.terminal_relaxed { 1.0 } else { 0.0 };
                    if sol.terminal_relaxed {
                        self.stats.relaxed[ai] += 1;
                    }
                    if !sol.converged {
                        self.stats.unconverged_sqp += 1;
                    }
                    a.iterations = sol.iterations;
                    self.stats.qp_iterations += sol.iterations;
                    self.stats.max_kkt = self.stats.max_kkt.max(sol.kkt);
                    let last = sol.errors[horizon].clone();
                    (sol.inputs, last)
                }
                Err(Error::Infeasible | Error::MaxIter(_) | Error::DegenerateGradient { .. }) => {
                    a.consecutive_fallbacks += 1;
                    self.stats.fallbacks[ai] += 1;
                    if a.consecutive_fallbacks >= horizon {
                        return Err(Error::CascadedInfeasibility {
                            agent: a.id,
                            steps: a.consecutive_fallbacks,
                            k,
                        });
                    }
                    a.status = 2.0;
                    a.iterations = 0;
                    let plan: Vec<Vector> = shifted[ai]
                        .iter()
                        .map(|v| v.map(|c| c.clamp(-a.spec.v_max, a.spec.v_max)))
                        .collect();
                    let terminal = rollout_error(&a.spec.error_model, &inputs[ai], &plan);
                    (plan, terminal)
                }
                Err(e) => return Err(e),
            };
            a.applied = plan[0].clone();
            a.plan = plan.clone();
            messages.push(PlanMessage {
                sender: a.id,
                stamp: k,
                inputs: plan,
                terminal_error,
            });
        }
        for msg in messages {
            self.board.post(msg)?;
        }
        self.stats.deliveries = self.board.deliveries;

        // One-step neighbor prediction error against the neighbors' new plans.
        let mut total = 0.0;
        let mut count = 0usize;
        for next in &predicted_next {
            for (j, x_hat) in next {
                let planned = planned_next(&self.agents[j - 1], &previews[j - 1].0);
                total += (x_hat.rows(0, d) - planned.rows(0, d)).norm();
                count += 1;
            }
        }
        self.held.prediction_error = if count > 0 { total / count as f64 } else { 0.0 };

        // Fine integration of the period.
        let h = ts / substeps as f64;
        for s in 0..substeps {
            let tt = t + s as f64 * h;
            self.record(tt)?;
            self.integrate(tt, h)?;
        }
        self.k += 1;
        self.t = self.k as f64 * ts;
        self.stats.steps = self.k;
        Ok(())
    }

    /// Runs all sampling periods and records the closing row.
    pub fn run(mut self) -> Result<SimOutcome> {
        let steps = self.config.steps();
        while self.k < steps {
            self.step()?;
        }
        let t = self.t;
        self.record(t)?;
        Ok(SimOutcome {
            trace: self.trace,
            stats: self.stats,
        })
    }

    fn pack(&self) -> Vector {
        let nd = self.leader.len();
        let mut z = Vector::zeros(nd * (2 + 3 * self.agents.len()));
        z.rows_mut(0, nd).copy_from(&self.leader);
        z.rows_mut(nd, nd).copy_from(&self.leader_nominal);
        for (ai, a) in self.agents.iter().enumerate() {
            let base = nd * (2 + 3 * ai);
            z.rows_mut(base, nd).copy_from(&a.x);
            z.rows_mut(base + nd, nd).copy_from(&a.nominal);
            z.rows_mut(base + 2 * nd, nd).copy_from(&a.leader_nominal);
        }
        z
    }

    fn unpack(&mut self, z: &Vector) {
        let nd = self.leader.len();
        self.leader = z.rows(0, nd).into_owned();
        self.leader_nominal = z.rows(nd, nd).into_owned();
        for (ai, a) in self.agents.iter_mut().enumerate() {
            let base = nd * (2 + 3 * ai);
            a.x = z.rows(base, nd).into_owned();
            a.nominal = z.rows(base + nd, nd).into_owned();
            a.leader_nominal = z.rows(base + 2 * nd, nd).into_owned();
        }
    }

    fn integrate(&mut self, t: f64, h: f64) -> Result<()> {
        let world = self.world;
        let nd = self.leader.len();
        let ff = self.config.feedforward_on;
        let agents = &self.agents;
        let field = |tt: f64, z: &Vector| -> Vector {
            let mut out = Vector::zeros(z.len());
            let x0 = z.rows(0, nd).into_owned();
            let ln0 = z.rows(nd, nd).into_owned();
            let f0_true = world.leader.drift_at(&x0, tt);
            let w0 = world.leader.disturbance.eval(tt);
            out.rows_mut(0, nd).copy_from(&chain_rate(&x0, &(&f0_true + w0)));
            out.rows_mut(nd, nd).copy_from(&chain_rate(&ln0, &world.leader.drift_at(&ln0, tt)));
            for (ai, a) in agents.iter().enumerate() {
                let base = nd * (2 + 3 * ai);
                let x = z.rows(base, nd).into_owned();
                let xb = z.rows(base + nd, nd).into_owned();
                let ln = z.rows(base + 2 * nd, nd).into_owned();
                let f0_nom = world.leader.drift_at(&ln, tt);
                let f0_ff = if a.pinned { f0_true.clone() } else { f0_nom.clone() };
                let fi = a.model.drift_at(&x, tt);
                let u = apply_control(&a.gain, &x, &xb, &a.applied, &f0_ff, &fi, ff);
                let wi = a.model.disturbance.eval(tt);
                out.rows_mut(base, nd).copy_from(&chain_rate(&x, &(u + fi + wi)));
                out.rows_mut(base + nd, nd).copy_from(&chain_rate(&xb, &(&a.applied + &f0_nom)));
                out.rows_mut(base + 2 * nd, nd).copy_from(&chain_rate(&ln, &f0_nom));
            }
            out
        };
        let z = rk4_step(field, &self.pack(), t, h)?;
        self.unpack(&z);
        Ok(())
    }

    fn record(&mut self, t: f64) -> Result<()> {
        let world = self.world;
        let cfg = &world.config;
        let d = cfg.dims.d;
        let nd = cfg.dims.state_dim();
        let mut row = Vec::with_capacity(self.trace.columns.len());
        row.push(t);
        row.push(self.k as f64);
        row.extend(self.leader.iter());
        row.extend(self.leader_nominal.iter());
        let dx0 = &self.leader - &self.leader_nominal;
        let occ0 = leader_occupancy(&self.leader_cert, &dx0);
        row.push(occ0);
        self.check(t, "leader tube occupancy", occ0, occ0 <= 1.0 + OCCUPANCY_TOL);

        let rel0 = self.leader.rows(0, d) - world.formation.offset(0).rows(0, d);
        let f0_true = world.leader.drift_at(&self.leader, t);
        let mut stacked = 0.0;
        let mut occupancies = Vec::with_capacity(self.agents.len());
        for a in &self.agents {
            let dx = &a.x - &a.nominal;
            let f0_ff = if a.pinned {
                f0_true.clone()
            } else {
                world.leader.drift_at(&a.leader_nominal, t)
            };
            let u = apply_control(
                &a.gain,
                &a.x,
                &a.nominal,
                &a.applied,
                &f0_ff,
                &a.model.drift_at(&a.x, t),
                self.config.feedforward_on,
            );
            let v = dx.dot(&(&a.p * &dx));
            let occ = ratio(v, a.r * a.r);
            occupancies.push((a.id, occ));
            let fe = a.x.rows(0, d) - world.formation.offset(a.id).rows(0, d) - &rel0;
            let ferr = fe.norm();
            stacked += ferr * ferr;
            row.extend(a.x.iter());
            row.extend(a.nominal.iter());
            row.extend(dx.iter());
            row.extend(u.iter());
            row.push(v);
            row.push(occ);
            row.extend(fe.iter());
            row.push(ferr);
            row.extend(a.sync_error.iter());
            for p in &a.plan {
                row.extend(p.iter());
            }
            row.push(a.status);
            row.push(a.iterations as f64);
            debug_assert_eq!(a.x.len(), nd);
        }
        row.push(stacked.sqrt());
        let clear_obs = min_obstacle_clearance(self.agents.iter().map(|a| &a.x), &world.obstacles, d);
        if let Some(c) = clear_obs {
            row.push(c);
        }
        let clear_pair = min_pairwise_clearance(
            &self.agents.iter().map(|a| a.x.clone()).collect::<Vec<_>>(),
            cfg.barrier.d_safe,
            d,
        );
        if let Some(c) = clear_pair {
            row.push(c);
        }
        row.push(self.held.prediction_error);
        self.trace.push(row)?;

        for (id, occ) in occupancies {
            self.check(t, &format!("agent {id} tube occupancy"), occ, occ <= 1.0 + OCCUPANCY_TOL);
        }
        if let Some(c) = clear_obs {
            self.check(t, "obstacle clearance", c, c > 0.0);
        }
        if let Some(c) = clear_pair {
            self.check(t, "pairwise clearance", c, c > 0.0);
        }
        Ok(())
    }

    /// Records the first time a safety quantity fails to be strictly positive.
    /// Records `value` as the first violation unless `ok`.
    fn check(&mut self, t: f64, what: &str, value: f64, ok: bool) {
        if self.stats.first_violation.is_none() && !ok {
            self.stats.first_violation = Some(Violation {
                step: self.k,
                time: t,
                what: what.to_string(),
                value,
            });
        }
    }
}

fn ratio(v: f64, r2: f64) -> f64 {
    if r2 > 0.0 {
        v / r2
    } else if v <= 0.0 {
        0.0
    } else {
        f64::MAX
    }
}

/// Leader deviation relative to its certified bound: `V/ρ0²` for the
/// Lyapunov mode, `‖δx‖²/r̄0²` for the ball-valued modes.
pub fn leader_occupancy(cert: &LeaderCertificate, dx: &Vector) -> f64 {
    match cert.mode {
        LeaderTubeMode::Lyapunov => ratio(cert.lyap.value(dx), cert.rho0 * cert.rho0),
        LeaderTubeMode::Gronwall | LeaderTubeMode::Declared => ratio(dx.norm_squared(), cert.r_ball0 * cert.r_ball0),
    }
}

/// `min ‖p - c‖ - R_eff` over agents and obstacles; `None` without obstacles.
pub fn min_obstacle_clearance<'a>(
    states: impl Iterator<Item = &'a Vector>,
    obstacles: &[crate::scenario::Obstacle],
    d: usize,
) -> Option<f64> {
    if obstacles.is_empty() {
        return None;
    }
    let mut best = f64::INFINITY;
    for x in states {
        for o in obstacles {
            best = best.min((x.rows(0, d) - &o.center).norm() - o.effective_radius());
        }
    }
    best.is_finite().then_some(best)
}

/// `min ‖p^i - p^j‖ - d_safe` over follower pairs; `None` for a single follower.
pub fn min_pairwise_clearance(states: &[Vector], d_safe: f64, d: usize) -> Option<f64> {
    let mut best = f64::INFINITY;
    for i in 0..states.len() {
        for j in i + 1..states.len() {
            best = best.min((states[i].rows(0, d) - states[j].rows(0, d)).norm() - d_safe);
        }
    }
    best.is_finite().then_some(best)
}

/// The first predicted nominal state of an agent's freshly broadcast plan.
fn planned_next(a: &Agent, leader: &[Vector]) -> Vector {
    let y = &a.nominal - &leader[0];
    &a.spec.ad * y + &a.spec.bd * &a.plan[0] + &leader[1]
}

fn rollout_error(model: &ErrorModel, inputs: &OcpInputs, plan: &[Vector]) -> Vector {
    let mut e = inputs.e0.clone();
    for (l, v) in plan.iter().enumerate() {
        let mut w = Vector::zeros(v.len());
        for nb in &inputs.neighbors {
            w += &nb.inputs[l] * nb.weight;
        }
        e = model.step(&e, v, &w);
    }
    e
}

fn columns(world: &World, horizon: usize) -> Vec<String> {
    let cfg = &world.config;
    let (n, d) = (cfg.dims.n, cfg.dims.d);
    let chain = |prefix: &str| -> Vec<String> {
        (1..=n)
            .flat_map(|o| (1..=d).map(move |a| (o, a)))
            .map(|(o, a)| format!("{prefix}_{o}_{a}"))
            .collect()
    };
    let mut cols = vec!["t".to_string(), "k".to_string()];
    cols.extend(chain("x0"));
    cols.extend(chain("xn0"));
    cols.push("occ0".into());
    for i in 1..=cfg.dims.big_n {
        cols.extend(chain(&format!("x{i}")));
        cols.extend(chain(&format!("xn{i}")));
        cols.extend(chain(&format!("dx{i}")));
        cols.extend((1..=d).map(|a| format!("u{i}_{a}")));
        cols.push(format!("V{i}"));
        cols.push(format!("occ{i}"));
        cols.extend((1..=d).map(|a| format!("fe{i}_{a}")));
        cols.push(format!("ferr{i}"));
        cols.extend(chain(&format!("e{i}")));
        for l in 0..horizon {
            cols.extend((1..=d).map(|a| format!("plan{i}_{l}_{a}")));
        }
        cols.push(format!("status{i}"));
        cols.push(format!("qpit{i}"));
    }
    cols.push("stacked_err".into());
    if !world.obstacles.is_empty() {
        cols.push("clear_obs".into());
    }
    if cfg.dims.big_n > 1 {
        cols.push("clear_pair".into());
    }
    cols.push("pred_err".into());
    cols
}

/// Certifies nothing; runs the closed loop for an already certified world.
pub fn simulate(world: &World, cert: &Certificate, config: SimConfig) -> Result<SimOutcome> {
    Simulation::new(world, cert, config)?.run()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn control_law_examples() {
        let k = Mat::from_row_slice(1, 2, &[2.0, 3.0]);
        let x = Vector::from_vec(vec![0.5, -0.5]);
        let z = Vector::zeros(1);
        let f = Vector::from_element(1, 0.7);
        assert_eq!(apply_control(&k, &x, &x, &z, &f, &f, true), z);
        let nominal = Vector::zeros(2);
        let v = Vector::from_element(1, 1.0);
        let u = apply_control(&k, &x, &nominal, &v, &f, &Vector::from_element(1, 9.0), false);
        assert_eq!(u[0], 1.0 - (2.0 * 0.5 - 3.0 * 0.5));
    }

    #[test]
    fn clearance_definitions() {
        let a = Vector::from_vec(vec![0.0, 0.0, 0.0, 0.0]);
        let b = Vector::from_vec(vec![1.0, 0.0, 0.0, 0.0]);
        assert!((min_pairwise_clearance(&[a.clone(), b], 0.3, 2).unwrap() - 0.7).abs() < 1e-15);
        assert_eq!(min_pairwise_clearance(std::slice::from_ref(&a), 0.3, 2), None);
        let o = crate::scenario::Obstacle {
            center: Vector::from_vec(vec![3.0, 4.0]),
            radius: 1.0,
            inflation: 0.5,
        };
        assert_eq!(min_obstacle_clearance([&a].into_iter(), &[o], 2), Some(3.5));
    }

    #[test]
    fn chain_rate_shifts_blocks() {
        let x = Vector::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let r = chain_rate(&x, &Vector::from_vec(vec![7.0, 8.0]));
        assert_eq!(r.as_slice(), &[3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
    }
}

//! Declarative scenario description, validation and realization into models.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::CommGraph;
use crate::linalg::{Mat, Vector};
use crate::model::{AgentModel, BrunovskyDims, Disturbance, DisturbanceSpec, Drift, OperatingBox};

/// Grid density and safety factor of the `estimate` Lipschitz mode.
pub const LIPSCHITZ_GRID_POINTS: usize = 11;
pub const LIPSCHITZ_SAFETY: f64 = 1.25;

fn one() -> f64 {
    1.0
}
fn default_substeps() -> usize {
    10
}
fn default_r() -> f64 {
    0.1
}
fn default_rdelta() -> f64 {
    0.01
}
fn default_passes() -> usize {
    5
}
fn default_sqp_tol() -> f64 {
    1e-5
}
fn default_level_factor() -> f64 {
    0.5
}
fn default_true() -> bool {
    true
}
fn default_qp_iter() -> usize {
    500
}
fn default_kappa_poles() -> Vec<f64> {
    vec![-1.5, -2.5, -3.5]
}
fn default_d_safe() -> f64 {
    0.3
}
fn default_activation() -> f64 {
    5.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSettings {
    pub t_end: f64,
    pub ts: f64,
    #[serde(default = "default_substeps")]
    pub fine_substeps: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OcpSettings {
    pub horizon: usize,
    /// Error-state weight, `qr * I`.
    #[serde(default = "one")]
    pub qr: f64,
    /// Input weight, `r * I`.
    #[serde(default = "default_r")]
    pub r: f64,
    /// Input-rate weight, `rdelta * I`.
    #[serde(default = "default_rdelta")]
    pub rdelta: f64,
    /// Per-axis bound on `v - K dx` before tightening.
    pub u_max: f64,
    #[serde(default = "default_passes")]
    pub max_sqp_passes: usize,
    #[serde(default = "default_sqp_tol")]
    pub sqp_tol: f64,
    /// Fraction of the largest admissible terminal level that is used.
    #[serde(default = "default_level_factor")]
    pub terminal_level_factor: f64,
    /// Enforce the terminal input law on the last horizon input.
    #[serde(default = "default_true")]
    pub terminal_equality: bool,
    #[serde(default = "default_qp_iter")]
    pub qp_max_iter: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BarrierSettings {
    #[serde(default = "default_kappa_poles")]
    pub kappa_poles: Vec<f64>,
    #[serde(default = "default_d_safe")]
    pub d_safe: f64,
    #[serde(default = "default_activation")]
    pub activation_range: f64,
}

impl Default for BarrierSettings {
    fn default() -> Self {
        BarrierSettings {
            kappa_poles: default_kappa_poles(),
            d_safe: default_d_safe(),
            activation_range: default_activation(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSettings {
    #[serde(default = "one")]
    pub nu1: f64,
    #[serde(default = "one")]
    pub nu2: f64,
    /// Leader pinning weights `b_i0`.
    pub b0: Vec<f64>,
    /// Follower adjacency, `adjacency[i][j] = a_ij > 0` iff `i` hears `j`.
    pub adjacency: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObstacleSpec {
    pub center: Vec<f64>,
    pub radius: f64,
    #[serde(default)]
    pub inflation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LipschitzSpec {
    Value(f64),
    /// `"estimate"`: Jacobian-norm grid over the operating box.
    Rule(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged, deny_unknown_fields)]
pub enum GainSpec {
    /// One pole per chain order, repeated on every axis.
    Poles { poles: Vec<f64> },
    /// Explicit d × nd gain, row-major.
    Explicit { k: Vec<Vec<f64>> },
    /// Continuous-time LQR with diagonal state weight and scalar input weight.
    Lqr { lqr_q: Vec<f64>, lqr_r: f64 },
}

impl Default for GainSpec {
    fn default() -> Self {
        GainSpec::Poles {
            poles: vec![-2.0, -3.0, -4.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeaderTubeMode {
    /// Lyapunov-level radius from the leader drift linearized at the box center.
    Lyapunov,
    /// One-period Gronwall bound; sound because the leader nominal is
    /// re-initialized from the leader estimate at every sampling instant.
    Gronwall,
    /// Radius supplied directly.
    Declared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LeaderTubeSpec {
    pub mode: LeaderTubeMode,
    /// Ball radius for `declared` mode.
    #[serde(default)]
    pub r_ball: Option<f64>,
    #[serde(default = "one")]
    pub q_scale: f64,
    /// Optional stabilizing component for the linearized leader.
    #[serde(default)]
    pub stabilizing_gain: Option<GainSpec>,
    /// Bound on the leader's top derivative, used for the relay term.
    #[serde(default)]
    pub top_derivative_bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LeaderSpec {
    pub initial_state: Vec<f64>,
    #[serde(default)]
    pub offset: Vec<Vec<f64>>,
    pub drift: Drift,
    pub disturbance: DisturbanceSpec,
    pub lipschitz: LipschitzSpec,
    pub operating_box: OperatingBox,
    pub tube: LeaderTubeSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FollowerSpec {
    pub initial_state: Vec<f64>,
    /// Rows are chain orders; missing trailing rows are zero.
    pub offset: Vec<Vec<f64>>,
    #[serde(default)]
    pub gain: GainSpec,
    #[serde(default = "one")]
    pub q_scale: f64,
    pub drift: Drift,
    pub disturbance: DisturbanceSpec,
    pub lipschitz: LipschitzSpec,
    pub operating_box: OperatingBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    /// Multiplies every disturbance amplitude and numeric bound.
    #[serde(default = "one")]
    pub disturbance_scale: f64,
    pub dims: BrunovskyDims,
    pub sim: SimSettings,
    pub ocp: OcpSettings,
    #[serde(default)]
    pub barrier: BarrierSettings,
    pub graph: GraphSettings,
    #[serde(default)]
    pub obstacles: Vec<ObstacleSpec>,
    pub leader: LeaderSpec,
    pub followers: Vec<FollowerSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Obstacle {
    pub center: Vector,
    pub radius: f64,
    pub inflation: f64,
}

impl Obstacle {
    pub fn effective_radius(&self) -> f64 {
        self.radius + self.inflation
    }
}

/// Offsets `psi^i_p`, stored as one nd-vector per agent (index 0 = leader).
#[derive(Debug, Clone, PartialEq)]
pub struct FormationSpec {
    pub offsets: Vec<Vector>,
}

impl FormationSpec {
    pub fn offset(&self, agent: usize) -> &Vector {
        &self.offsets[agent]
    }
}

/// Realized models and derived data of a scenario.
#[derive(Debug, Clone)]
pub struct World {
    pub config: ScenarioConfig,
    pub leader: AgentModel,
    pub followers: Vec<AgentModel>,
    pub graph: CommGraph,
    pub formation: FormationSpec,
    pub obstacles: Vec<Obstacle>,
}

fn offset_vector(rows: &[Vec<f64>], dims: &BrunovskyDims, who: &str) -> Result<Vector> {
    if rows.len() > dims.n {
        return Err(Error::Scenario(format!("{who}: offset has more than n = {} rows", dims.n)));
    }
    let mut v = Vector::zeros(dims.state_dim());
    for (p, row) in rows.iter().enumerate() {
        if row.len() != dims.d {
            return Err(Error::Scenario(format!("{who}: offset row {} must have d = {} entries", p + 1, dims.d)));
        }
        for (k, x) in row.iter().enumerate() {
            v[p * dims.d + k] = *x;
        }
    }
    Ok(v)
}

fn finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Scenario(format!("{what} contains a non-finite value")));
    }
    Ok(())
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| Error::Scenario(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Scenario(e.to_string()))
    }

    /// SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("scenario serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        let dims = &self.dims;
        dims.validate()?;
        let nd = dims.state_dim();
        let big_n = dims.big_n;
        if self.followers.len() != big_n {
            return Err(Error::Scenario(format!(
                "{} followers declared but dims.followers = {big_n}",
                self.followers.len()
            )));
        }
        if !(self.sim.ts > 0.0) || !(self.sim.t_end >= 0.0) || self.sim.fine_substeps == 0 {
            return Err(Error::Scenario("sim needs ts > 0, t_end >= 0, fine_substeps >= 1".into()));
        }
        if !(self.disturbance_scale >= 0.0) {
            return Err(Error::Scenario("disturbance_scale must be >= 0".into()));
        }
        let o = &self.ocp;
        if o.horizon == 0 || !(o.r > 0.0) || !(o.qr >= 0.0) || !(o.rdelta >= 0.0) || !(o.u_max > 0.0) {
            return Err(Error::Scenario("ocp needs horizon >= 1, r > 0, qr >= 0, rdelta >= 0, u_max > 0".into()));
        }
        if o.max_sqp_passes == 0 || !(o.terminal_level_factor > 0.0 && o.terminal_level_factor <= 1.0) {
            return Err(Error::Scenario("ocp needs max_sqp_passes >= 1 and terminal_level_factor in (0, 1]".into()));
        }
        let b = &self.barrier;
        if b.kappa_poles.len() != dims.n || b.kappa_poles.iter().any(|p| !(*p < 0.0)) {
            return Err(Error::Scenario(format!("barrier.kappa_poles needs {} negative entries", dims.n)));
        }
        if !(b.d_safe >= 0.0) || !(b.activation_range > 0.0) {
            return Err(Error::Scenario("barrier needs d_safe >= 0 and activation_range > 0".into()));
        }
        let g = &self.graph;
        if !(g.nu1 > 0.0 && g.nu2 > 0.0) {
            return Err(Error::Scenario("graph nu1 and nu2 must be positive".into()));
        }
        if g.b0.len() != big_n || g.adjacency.len() != big_n || g.adjacency.iter().any(|r| r.len() != big_n) {
            return Err(Error::Scenario(format!("graph b0 and adjacency must be sized for {big_n} followers")));
        }
        if g.b0.iter().chain(g.adjacency.iter().flatten()).any(|w| !(*w >= 0.0)) {
            return Err(Error::Scenario("graph weights must be nonnegative".into()));
        }
        if (0..big_n).any(|i| g.adjacency[i][i] != 0.0) {
            return Err(Error::Scenario("graph adjacency must have a zero diagonal".into()));
        }
        for (k, ob) in self.obstacles.iter().enumerate() {
            if ob.center.len() != dims.d || !(ob.radius > 0.0) || !(ob.inflation >= 0.0) {
                return Err(Error::Scenario(format!(
                    "obstacle {}: center needs d entries, radius > 0, inflation >= 0",
                    k + 1
                )));
            }
        }
        let l = &self.leader;
        if l.initial_state.len() != nd {
            return Err(Error::Scenario(format!("leader initial_state needs {nd} entries")));
        }
        finite(&l.initial_state, "leader initial_state")?;
        offset_vector(&l.offset, dims, "leader")?;
        l.drift.validate(dims)?;
        l.operating_box.validate(nd)?;
        check_lipschitz(&l.lipschitz, "leader")?;
        if l.tube.mode == LeaderTubeMode::Declared && !l.tube.r_ball.is_some_and(|r| r >= 0.0) {
            return Err(Error::Scenario("leader tube mode `declared` needs r_ball >= 0".into()));
        }
        if !(l.tube.q_scale > 0.0) || !(l.tube.top_derivative_bound >= 0.0) {
            return Err(Error::Scenario("leader tube needs q_scale > 0 and top_derivative_bound >= 0".into()));
        }
        for (i, f) in self.followers.iter().enumerate() {
            let who = format!("follower {}", i + 1);
            if f.initial_state.len() != nd {
                return Err(Error::Scenario(format!("{who}: initial_state needs {nd} entries")));
            }
            finite(&f.initial_state, &who)?;
            offset_vector(&f.offset, dims, &who)?;
            f.drift.validate(dims)?;
            f.operating_box.validate(nd)?;
            check_lipschitz(&f.lipschitz, &who)?;
            if !(f.q_scale > 0.0) {
                return Err(Error::Scenario(format!("{who}: q_scale must be positive")));
            }
            match &f.gain {
                GainSpec::Poles { poles } if poles.len() != dims.n => {
                    return Err(Error::Scenario(format!("{who}: gain needs {} poles", dims.n)))
                }
                GainSpec::Explicit { k } if k.len() != dims.d || k.iter().any(|r| r.len() != nd) => {
                    return Err(Error::Scenario(format!("{who}: explicit gain must be {} x {nd}", dims.d)))
                }
                GainSpec::Lqr { lqr_q, lqr_r } if lqr_q.len() != nd || !(*lqr_r > 0.0) => {
                    return Err(Error::Scenario(format!("{who}: lqr needs {nd} state weights and lqr_r > 0")))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn dims(&self) -> BrunovskyDims {
        self.dims
    }

    fn realize(
        &self,
        id: usize,
        drift: &Drift,
        dist: &DisturbanceSpec,
        lip: &LipschitzSpec,
        bx: &OperatingBox,
    ) -> Result<AgentModel> {
        let d = self.dims.d;
        let seed = self.sim.seed ^ ((id as u64 + 1).wrapping_mul(0xA24B_AED4_963E_E407));
        let disturbance = Disturbance::build(dist, d, self.disturbance_scale, seed, self.sim.ts)?;
        let drift_lipschitz = match lip {
            LipschitzSpec::Value(v) => *v,
            LipschitzSpec::Rule(_) => {
                drift.estimate_lipschitz(&bx.lower, &bx.upper, LIPSCHITZ_GRID_POINTS, LIPSCHITZ_SAFETY)
            }
        };
        Ok(AgentModel {
            id,
            dims: self.dims,
            drift: drift.clone(),
            drift_lipschitz,
            disturbance,
            operating_box: bx.clone(),
        })
    }

    pub fn leader_model(&self) -> Result<AgentModel> {
        let l = &self.leader;
        self.realize(0, &l.drift, &l.disturbance, &l.lipschitz, &l.operating_box)
    }

    pub fn follower_models(&self) -> Result<Vec<AgentModel>> {
        let specs: Vec<(usize, &FollowerSpec)> = self.followers.iter().enumerate().collect();
        crate::exec::par_map(&specs, |(i, f)| {
            self.realize(i + 1, &f.drift, &f.disturbance, &f.lipschitz, &f.operating_box)
        })
        .into_iter()
        .collect()
    }

    pub fn comm_graph(&self) -> CommGraph {
        let g = &self.graph;
        CommGraph {
            adjacency: Mat::from_fn(self.dims.big_n, self.dims.big_n, |i, j| g.adjacency[i][j]),
            b0: g.b0.clone(),
            nu1: g.nu1,
            nu2: g.nu2,
        }
    }

    pub fn formation(&self) -> FormationSpec {
        let mut offsets = vec![offset_vector(&self.leader.offset, &self.dims, "leader").expect("validated")];
        for f in &self.followers {
            offsets.push(offset_vector(&f.offset, &self.dims, "follower").expect("validated"));
        }
        FormationSpec { offsets }
    }

    pub fn obstacles(&self) -> Vec<Obstacle> {
        self.obstacles
            .iter()
            .map(|o| Obstacle {
                center: Vector::from_vec(o.center.clone()),
                radius: o.radius,
                inflation: o.inflation,
            })
            .collect()
    }

    pub fn world(&self) -> Result<World> {
        Ok(World {
            config: self.clone(),
            leader: self.leader_model()?,
            followers: self.follower_models()?,
            graph: self.comm_graph(),
            formation: self.formation(),
            obstacles: self.obstacles(),
        })
    }

    pub fn initial_states(&self) -> Vec<Vector> {
        std::iter::once(&self.leader.initial_state)
            .chain(self.followers.iter().map(|f| &f.initial_state))
            .map(|x| Vector::from_vec(x.clone()))
            .collect()
    }
}

fn check_lipschitz(spec: &LipschitzSpec, who: &str) -> Result<()> {
    match spec {
        LipschitzSpec::Value(v) if *v >= 0.0 => Ok(()),
        LipschitzSpec::Rule(r) if r == "estimate" => Ok(()),
        other => Err(Error::Scenario(format!(
            "{who}: lipschitz must be a nonnegative number or \"estimate\", got {other:?}"
        ))),
    }
}

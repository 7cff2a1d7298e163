//! Agent dynamics: Brunovsky dimensions, parametric drift terms, disturbance
//! generators, and the assembled [`AgentModel`].

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::linalg::{Mat, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BrunovskyDims {
    /// Chain order.
    pub n: usize,
    /// Spatial dimension of each block.
    pub d: usize,
    /// Number of followers.
    #[serde(rename = "followers")]
    pub big_n: usize,
}

impl BrunovskyDims {
    pub fn state_dim(&self) -> usize {
        self.n * self.d
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.d == 0 || self.big_n == 0 {
            return Err(Error::Scenario("dims n, d and followers must all be >= 1".into()));
        }
        Ok(())
    }
}

/// A state component `x_{order, axis}` with both indices 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateRef(pub usize, pub usize);

impl StateRef {
    pub fn index(&self, d: usize) -> usize {
        (self.0 - 1) * d + (self.1 - 1)
    }

    fn check(&self, dims: &BrunovskyDims) -> Result<()> {
        if self.0 == 0 || self.0 > dims.n || self.1 == 0 || self.1 > dims.d {
            return Err(Error::Scenario(format!(
                "state reference [{}, {}] outside order 1..={} / axis 1..={}",
                self.0, self.1, dims.n, dims.d
            )));
        }
        Ok(())
    }
}

/// One additive term of a drift component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DriftTerm {
    /// `c * x`
    Linear { c: f64, x: StateRef },
    /// `c * x^3`
    Cubic { c: f64, x: StateRef },
    /// `c * tanh(gain * x)`
    Tanh {
        c: f64,
        #[serde(default = "one")]
        gain: f64,
        x: StateRef,
    },
    /// `c * square^2 * tanh(tanh)`
    SquareTanh { c: f64, square: StateRef, tanh: StateRef },
    /// `c * (a + sign * b)^3`
    CubicPair { c: f64, a: StateRef, b: StateRef, sign: f64 },
    /// `c * sin(freq * t + phase)`
    SinTime {
        c: f64,
        freq: f64,
        #[serde(default)]
        phase: f64,
    },
}

fn one() -> f64 {
    1.0
}

impl DriftTerm {
    pub fn eval(&self, x: &[f64], t: f64, d: usize) -> f64 {
        match *self {
            DriftTerm::Linear { c, x: r } => c * x[r.index(d)],
            DriftTerm::Cubic { c, x: r } => c * x[r.index(d)].powi(3),
            DriftTerm::Tanh { c, gain, x: r } => c * (gain * x[r.index(d)]).tanh(),
            DriftTerm::SquareTanh { c, square, tanh } => {
                c * x[square.index(d)].powi(2) * x[tanh.index(d)].tanh()
            }
            DriftTerm::CubicPair { c, a, b, sign } => {
                c * (x[a.index(d)] + sign * x[b.index(d)]).powi(3)
            }
            DriftTerm::SinTime { c, freq, phase } => c * (freq * t + phase).sin(),
        }
    }

    /// Adds this term's state gradient into `grad`.
    pub fn accumulate_grad(&self, x: &[f64], d: usize, grad: &mut [f64]) {
        match *self {
            DriftTerm::Linear { c, x: r } => grad[r.index(d)] += c,
            DriftTerm::Cubic { c, x: r } => {
                let i = r.index(d);
                grad[i] += 3.0 * c * x[i] * x[i];
            }
            DriftTerm::Tanh { c, gain, x: r } => {
                let i = r.index(d);
                let th = (gain * x[i]).tanh();
                grad[i] += c * gain * (1.0 - th * th);
            }
            DriftTerm::SquareTanh { c, square, tanh } => {
                let (i, j) = (square.index(d), tanh.index(d));
                let th = x[j].tanh();
                grad[i] += 2.0 * c * x[i] * th;
                grad[j] += c * x[i] * x[i] * (1.0 - th * th);
            }
            DriftTerm::CubicPair { c, a, b, sign } => {
                let (i, j) = (a.index(d), b.index(d));
                let s = x[i] + sign * x[j];
                grad[i] += 3.0 * c * s * s;
                grad[j] += 3.0 * c * s * s * sign;
            }
            DriftTerm::SinTime { .. } => {}
        }
    }

    /// State components on which this term's gradient depends.
    fn nonlinear_support(&self, d: usize) -> Vec<usize> {
        match *self {
            DriftTerm::Linear { .. } | DriftTerm::SinTime { .. } => vec![],
            DriftTerm::Cubic { x, .. } | DriftTerm::Tanh { x, .. } => vec![x.index(d)],
            DriftTerm::SquareTanh { square, tanh, .. } => vec![square.index(d), tanh.index(d)],
            DriftTerm::CubicPair { a, b, .. } => vec![a.index(d), b.index(d)],
        }
    }

    fn refs(&self) -> Vec<StateRef> {
        match *self {
            DriftTerm::Linear { x, .. } | DriftTerm::Cubic { x, .. } | DriftTerm::Tanh { x, .. } => vec![x],
            DriftTerm::SquareTanh { square, tanh, .. } => vec![square, tanh],
            DriftTerm::CubicPair { a, b, .. } => vec![a, b],
            DriftTerm::SinTime { .. } => vec![],
        }
    }
}

/// Drift of one output axis: `scale * sum(terms)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AxisDrift {
    #[serde(default = "one")]
    pub scale: f64,
    #[serde(default)]
    pub terms: Vec<DriftTerm>,
}

/// Top-block drift `f(x, t)` in R^d.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Drift {
    pub axes: Vec<AxisDrift>,
}

impl Drift {
    pub fn zero(d: usize) -> Self {
        Drift {
            axes: vec![
                AxisDrift {
                    scale: 1.0,
                    terms: vec![]
                };
                d
            ],
        }
    }

    pub fn validate(&self, dims: &BrunovskyDims) -> Result<()> {
        if self.axes.len() != dims.d {
            return Err(Error::Scenario(format!(
                "drift has {} axes, expected {}",
                self.axes.len(),
                dims.d
            )));
        }
        for axis in &self.axes {
            for term in &axis.terms {
                for r in term.refs() {
                    r.check(dims)?;
                }
            }
        }
        Ok(())
    }

    pub fn eval(&self, x: &[f64], t: f64) -> Vector {
        let d = self.axes.len();
        Vector::from_iterator(
            d,
            self.axes
                .iter()
                .map(|ax| ax.scale * ax.terms.iter().map(|term| term.eval(x, t, d)).sum::<f64>()),
        )
    }

    /// State Jacobian, d × nd.
    pub fn jacobian(&self, x: &[f64]) -> Mat {
        let d = self.axes.len();
        let nd = x.len();
        let mut jac = Mat::zeros(d, nd);
        let mut row = vec![0.0; nd];
        for (k, ax) in self.axes.iter().enumerate() {
            row.iter_mut().for_each(|v| *v = 0.0);
            for term in &ax.terms {
                term.accumulate_grad(x, d, &mut row);
            }
            for j in 0..nd {
                jac[(k, j)] = ax.scale * row[j];
            }
        }
        jac
    }

    /// Components on which the Jacobian depends (sorted, deduplicated).
    pub fn nonlinear_support(&self) -> Vec<usize> {
        let d = self.axes.len();
        let mut idx: Vec<usize> = self
            .axes
            .iter()
            .flat_map(|ax| ax.terms.iter().flat_map(|t| t.nonlinear_support(d)))
            .collect();
        idx.sort_unstable();
        idx.dedup();
        idx
    }

    /// Grid estimate of the state Lipschitz constant over `[lower, upper]`:
    /// the largest spectral norm of the Jacobian over `points` samples per
    /// axis, times `safety`. Only components the Jacobian depends on are
    /// gridded; the rest sit at the box center.
    pub fn estimate_lipschitz(&self, lower: &[f64], upper: &[f64], points: usize, safety: f64) -> f64 {
        let nd = lower.len();
        let support = self.nonlinear_support();
        let center: Vec<f64> = (0..nd).map(|i| 0.5 * (lower[i] + upper[i])).collect();
        let points = points.max(2);
        let total = points.pow(support.len() as u32);
        let grid = |j: usize, k: usize| lower[j] + (upper[j] - lower[j]) * k as f64 / (points - 1) as f64;
        let worst = exec::par_max_range(total, |flat| {
            let mut x = center.clone();
            let mut rem = flat;
            for &j in &support {
                x[j] = grid(j, rem % points);
                rem /= points;
            }
            spectral_norm_wide(&self.jacobian(&x))
        });
        worst * safety
    }
}

/// Spectral norm of a d × m matrix through the d × d Gram matrix.
fn spectral_norm_wide(j: &Mat) -> f64 {
    let gram = j * j.transpose();
    if gram.nrows() == 1 {
        return gram[(0, 0)].max(0.0).sqrt();
    }
    if gram.nrows() == 2 {
        let (a, b, c) = (gram[(0, 0)], gram[(0, 1)], gram[(1, 1)]);
        let mean = 0.5 * (a + c);
        let rad = (0.25 * (a - c) * (a - c) + b * b).sqrt();
        return (mean + rad).max(0.0).sqrt();
    }
    crate::linalg::max_singular_value(j)
}

/// One sinusoid `amp * sin(freq * t + phase)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sinusoid {
    pub amp: f64,
    pub freq: f64,
    #[serde(default)]
    pub phase: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisturbanceMode {
    /// Deterministic per-axis sums of sinusoids.
    #[default]
    Sinusoid,
    /// Uniform in the ball of radius `bound`, piecewise constant per sampling period.
    RandomBall,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BoundSpec {
    Value(f64),
    /// `"from_amplitudes"`: the 2-norm of the per-axis amplitude sums.
    Rule(String),
}

impl Default for BoundSpec {
    fn default() -> Self {
        BoundSpec::Rule("from_amplitudes".into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisturbanceSpec {
    #[serde(default)]
    pub mode: DisturbanceMode,
    #[serde(default)]
    pub axes: Vec<Vec<Sinusoid>>,
    #[serde(default)]
    pub bound: BoundSpec,
}

impl DisturbanceSpec {
    pub fn none(d: usize) -> Self {
        DisturbanceSpec {
            mode: DisturbanceMode::Sinusoid,
            axes: vec![vec![]; d],
            bound: BoundSpec::Value(0.0),
        }
    }
}

/// A realized disturbance generator with its amplitude scale applied.
#[derive(Debug, Clone, PartialEq)]
pub struct Disturbance {
    pub mode: DisturbanceMode,
    pub axes: Vec<Vec<Sinusoid>>,
    pub bound: f64,
    pub seed: u64,
    pub ts: f64,
}

impl Disturbance {
    pub fn build(spec: &DisturbanceSpec, d: usize, scale: f64, seed: u64, ts: f64) -> Result<Self> {
        if !spec.axes.is_empty() && spec.axes.len() != d {
            return Err(Error::Scenario(format!(
                "disturbance has {} axes, expected {}",
                spec.axes.len(),
                d
            )));
        }
        let mut axes = if spec.axes.is_empty() { vec![vec![]; d] } else { spec.axes.clone() };
        for ax in axes.iter_mut() {
            for s in ax.iter_mut() {
                s.amp *= scale;
            }
        }
        let bound = match &spec.bound {
            BoundSpec::Value(v) if *v >= 0.0 => *v * scale,
            BoundSpec::Value(v) => {
                return Err(Error::Scenario(format!("disturbance bound {v} is negative")))
            }
            BoundSpec::Rule(rule) if rule == "from_amplitudes" => axes
                .iter()
                .map(|ax| ax.iter().map(|s| s.amp.abs()).sum::<f64>().powi(2))
                .sum::<f64>()
                .sqrt(),
            BoundSpec::Rule(rule) => {
                return Err(Error::Scenario(format!("unknown disturbance bound rule {rule:?}")))
            }
        };
        Ok(Disturbance {
            mode: spec.mode,
            axes,
            bound,
            seed,
            ts,
        })
    }

    pub fn eval(&self, t: f64) -> Vector {
        match self.mode {
            DisturbanceMode::Sinusoid => Vector::from_iterator(
                self.axes.len(),
                self.axes
                    .iter()
                    .map(|ax| ax.iter().map(|s| s.amp * (s.freq * t + s.phase).sin()).sum::<f64>()),
            ),
            DisturbanceMode::RandomBall => self.ball_sample(t),
        }
    }

    fn ball_sample(&self, t: f64) -> Vector {
        let d = self.axes.len();
        if self.bound == 0.0 {
            return Vector::zeros(d);
        }
        // Sampling index with a small guard so RK4 stage times at the end of
        // a period stay in that period.
        let k = ((t + 1e-9 * self.ts) / self.ts).floor().max(0.0) as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ k.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        loop {
            let v = Vector::from_iterator(d, (0..d).map(|_| rng.gen_range(-1.0..=1.0)));
            let norm = v.norm();
            if norm <= 1.0 {
                return v * self.bound;
            }
        }
    }

    /// Largest `‖w(t)‖` over `samples` evenly spaced instants in `[0, t_end]`.
    pub fn sampled_max_norm(&self, t_end: f64, samples: usize) -> f64 {
        (0..=samples)
            .map(|k| self.eval(t_end * k as f64 / samples.max(1) as f64).norm())
            .fold(0.0, f64::max)
    }
}

/// Axis-aligned box over the full chain state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperatingBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl OperatingBox {
    pub fn validate(&self, nd: usize) -> Result<()> {
        if self.lower.len() != nd || self.upper.len() != nd {
            return Err(Error::Scenario(format!("operating box must have {nd} entries per bound")));
        }
        if self.lower.iter().zip(&self.upper).any(|(l, u)| !(l <= u)) {
            return Err(Error::Scenario("operating box lower exceeds upper".into()));
        }
        Ok(())
    }

    pub fn center(&self) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(l, u)| 0.5 * (l + u)).collect()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(v, (l, u))| *v >= *l && *v <= *u)
    }
}

/// A fully realized agent model.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentModel {
    /// 0 for the leader.
    pub id: usize,
    pub dims: BrunovskyDims,
    pub drift: Drift,
    pub drift_lipschitz: f64,
    pub disturbance: Disturbance,
    pub operating_box: OperatingBox,
}

impl AgentModel {
    pub fn drift_at(&self, x: &Vector, t: f64) -> Vector {
        self.drift.eval(x.as_slice(), t)
    }

    pub fn disturbance_bound(&self) -> f64 {
        self.disturbance.bound
    }

    /// Checks that sampled disturbance norms respect the declared bound.
    pub fn check_disturbance(&self, t_end: f64, samples: usize) -> Result<()> {
        let worst = self.disturbance.sampled_max_norm(t_end, samples);
        if worst > self.disturbance.bound + 1e-12 {
            return Err(Error::Scenario(format!(
                "agent {}: sampled disturbance norm {worst:e} exceeds the declared bound {:e}",
                self.id, self.disturbance.bound
            )));
        }
        Ok(())
    }

    /// Spot-checks the Lipschitz bound on random pairs inside the operating box.
    /// Returns the largest observed difference quotient.
    pub fn spot_check_lipschitz(&self, pairs: usize, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = &self.operating_box;
        let mut worst: f64 = 0.0;
        for _ in 0..pairs {
            let mut draw = || -> Vec<f64> {
                b.lower.iter().zip(&b.upper).map(|(l, u)| if u > l { rng.gen_range(*l..=*u) } else { *l }).collect()
            };
            let x = draw();
            let y = draw();
            let t = rng.gen_range(0.0..2.0 * PI);
            let num = (self.drift.eval(&x, t) - self.drift.eval(&y, t)).norm();
            let den: f64 = x.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            if den > 1e-12 {
                worst = worst.max(num / den);
            }
        }
        worst
    }
}

//! Scalar metrics extracted from a trace, and the run summary file.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::trace::SimTrace;
use crate::sim::{RunStats, SimConfig, Violation};

/// Length of the trailing window used for steady-state averages (s).
pub const FINAL_WINDOW: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rows: usize,
    pub duration: f64,
    pub followers: usize,
    pub min_obstacle_clearance: Option<f64>,
    pub min_pairwise_clearance: Option<f64>,
    /// Leader ratio first, then one per follower.
    pub max_occupancy: Vec<f64>,
    pub max_formation_error: Vec<f64>,
    pub final_mean_formation_error: Vec<f64>,
    pub final_mean_stacked_error: f64,
    pub max_stacked_error: f64,
    pub first_second_prediction_error: f64,
    pub last_second_prediction_error: f64,
}

fn max(values: &[f64]) -> f64 {
    values.iter().copied().fold(0.0, f64::max)
}

fn min(values: &[f64]) -> f64 {
    values.iter().copied().fold(f64::INFINITY, f64::min)
}

fn mean_where(values: &[f64], times: &[f64], keep: impl Fn(f64) -> bool) -> f64 {
    let (sum, count) = values
        .iter()
        .zip(times)
        .filter(|(_, t)| keep(**t))
        .fold((0.0, 0usize), |(s, c), (v, _)| (s + v, c + 1));
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Number of followers recorded in a trace (`occ1`, `occ2`, ...).
pub fn follower_count(trace: &SimTrace) -> usize {
    (1..).take_while(|i| trace.index(&format!("occ{i}")).is_some()).count()
}

pub fn metrics(trace: &SimTrace) -> Result<Metrics> {
    if trace.is_empty() {
        return Err(Error::Scenario("trace has no rows".into()));
    }
    let t = trace.require("t")?;
    let end = t[t.len() - 1];
    let followers = follower_count(trace);
    let window_start = end - FINAL_WINDOW;
    let stacked = trace.require("stacked_err")?;
    let mut max_occupancy = vec![max(&trace.require("occ0")?)];
    let mut max_formation_error = Vec::with_capacity(followers);
    let mut final_mean_formation_error = Vec::with_capacity(followers);
    for i in 1..=followers {
        max_occupancy.push(max(&trace.require(&format!("occ{i}"))?));
        let ferr = trace.require(&format!("ferr{i}"))?;
        max_formation_error.push(max(&ferr));
        final_mean_formation_error.push(mean_where(&ferr, &t, |s| s >= window_start));
    }
    let pred = trace.require("pred_err")?;
    Ok(Metrics {
        rows: trace.len(),
        duration: end - t[0],
        followers,
        min_obstacle_clearance: trace.column("clear_obs").map(|c| min(&c)),
        min_pairwise_clearance: trace.column("clear_pair").map(|c| min(&c)),
        max_occupancy,
        max_formation_error,
        final_mean_formation_error,
        final_mean_stacked_error: mean_where(&stacked, &t, |s| s >= window_start),
        max_stacked_error: max(&stacked),
        first_second_prediction_error: mean_where(&pred, &t, |s| s < t[0] + 1.0),
        last_second_prediction_error: mean_where(&pred, &t, |s| s >= end - 1.0),
    })
}

/// Contents of the run summary file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub scenario: String,
    pub scenario_hash: String,
    pub config: SimConfig,
    pub global_bound: f64,
    pub safe: bool,
    pub first_violation: Option<Violation>,
    pub metrics: Metrics,
    pub fallbacks: Vec<usize>,
    pub terminal_relaxations: Vec<usize>,
    pub unconverged_sqp: usize,
    pub qp_iterations: usize,
    pub max_kkt_residual: f64,
    pub plan_deliveries: usize,
    pub radius_messages: usize,
    pub solve_time_mean_ms: f64,
    pub solve_time_max_ms: f64,
    pub wall_seconds: f64,
    pub threads: usize,
}

impl RunSummary {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        scenario: &str,
        scenario_hash: &str,
        config: &SimConfig,
        global_bound: f64,
        trace: &SimTrace,
        stats: &RunStats,
        wall_seconds: f64,
        threads: usize,
    ) -> Result<Self> {
        let solve = &stats.solve_seconds;
        let mean = if solve.is_empty() {
            0.0
        } else {
            solve.iter().sum::<f64>() / solve.len() as f64
        };
        Ok(RunSummary {
            scenario: scenario.to_string(),
            scenario_hash: scenario_hash.to_string(),
            config: config.clone(),
            global_bound,
            safe: stats.first_violation.is_none(),
            first_violation: stats.first_violation.clone(),
            metrics: metrics(trace)?,
            fallbacks: stats.fallbacks.clone(),
            terminal_relaxations: stats.relaxed.clone(),
            unconverged_sqp: stats.unconverged_sqp,
            qp_iterations: stats.qp_iterations,
            max_kkt_residual: stats.max_kkt,
            plan_deliveries: stats.deliveries,
            radius_messages: stats.radius_messages,
            solve_time_mean_ms: mean * 1e3,
            solve_time_max_ms: max(solve) * 1e3,
            wall_seconds,
            threads,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Scenario(e.to_string()))
    }
}

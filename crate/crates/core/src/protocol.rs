//! Synchronous plan exchange: radius broadcast, shifted neighbor plans,
//! neighbor rollout and the hop-by-hop leader relay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::CommGraph;
use crate::linalg::{Mat, Vector};

/// Nominal input plan broadcast by `sender` at sampling index `stamp`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanMessage {
    pub sender: usize,
    pub stamp: usize,
    pub inputs: Vec<Vector>,
    /// `ē_{H|t_k}`, used by receivers to append the terminal law.
    pub terminal_error: Vector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeaderEstimate {
    pub holder: usize,
    pub hops: usize,
    pub value: Vector,
    /// Sampling steps since the value was measured at the leader.
    pub age: usize,
}

/// Neighbor ball radii held by one agent after initialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadiusTable {
    pub agent: usize,
    pub entries: Vec<(usize, f64)>,
}

impl RadiusTable {
    pub fn get(&self, j: usize) -> Option<f64> {
        self.entries.iter().find(|(k, _)| *k == j).map(|(_, r)| *r)
    }
}

/// One-time broadcast of every follower's ball radius (`radii[j - 1]` for
/// follower `j`) to the agents that listen to it. Returns the per-agent
/// tables and the number of scalar messages sent (one per directed edge).
pub fn initial_broadcast(radii: &[f64], g: &CommGraph) -> (Vec<RadiusTable>, usize) {
    let mut messages = 0;
    let tables = (1..=g.followers())
        .map(|i| {
            let entries: Vec<(usize, f64)> = g.neighbors(i).into_iter().map(|j| (j, radii[j - 1])).collect();
            messages += entries.len();
            RadiusTable { agent: i, entries }
        })
        .collect();
    (tables, messages)
}

/// Drops the first element of a plan from the previous step and appends
/// the sender's terminal law `-K̂ ē_H`.
pub fn shift_plan(msg: &PlanMessage, k_hat: &Mat, k: usize) -> Result<Vec<Vector>> {
    if msg.stamp + 1 != k {
        return Err(Error::StalePlan {
            sender: msg.sender,
            stamp: msg.stamp,
            expected: k.saturating_sub(1),
        });
    }
    let mut out: Vec<Vector> = msg.inputs.iter().skip(1).cloned().collect();
    out.push(-(k_hat * &msg.terminal_error));
    Ok(out)
}

/// Predicts a neighbor's nominal chain from its measured state. The
/// neighbor's top derivative is `v̂ + f⁰` along the leader preview, so the
/// offset from the preview evolves as a pure chain driven by `v̂`.
pub fn rollout_neighbor(x_now: &Vector, inputs: &[Vector], leader: &[Vector], ad: &Mat, bd: &Mat) -> Result<Vec<Vector>> {
    if leader.len() != inputs.len() + 1 {
        return Err(Error::DimensionMismatch(format!(
            "leader preview has {} states for {} inputs",
            leader.len(),
            inputs.len()
        )));
    }
    let mut y = x_now - &leader[0];
    let mut out = vec![x_now.clone()];
    for (v, lead) in inputs.iter().zip(&leader[1..]) {
        y = ad * &y + bd * v;
        let x = &y + lead;
        if x.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFiniteState("neighbor rollout".into()));
        }
        out.push(x);
    }
    Ok(out)
}

/// Estimates at the very first step, when every follower starts from the
/// measured leader state.
pub fn initial_estimates(g: &CommGraph, leader: &Vector) -> Result<Vec<LeaderEstimate>> {
    let tree = tree(g)?;
    Ok(tree
        .iter()
        .enumerate()
        .map(|(i, (_, hops))| LeaderEstimate {
            holder: i + 1,
            hops: *hops,
            value: leader.clone(),
            age: 0,
        })
        .collect())
}

/// One relay round: pinned agents read the leader, every other agent takes
/// its BFS parent's estimate from the previous step. Entry `i - 1` belongs
/// to follower `i`.
pub fn relay_leader(g: &CommGraph, leader: &Vector, previous: &[LeaderEstimate]) -> Result<Vec<LeaderEstimate>> {
    let tree = tree(g)?;
    Ok(tree
        .iter()
        .enumerate()
        .map(|(idx, &(parent, hops))| {
            let i = idx + 1;
            if g.pin(i) > 0.0 {
                LeaderEstimate {
                    holder: i,
                    hops: 0,
                    value: leader.clone(),
                    age: 0,
                }
            } else {
                let from = &previous[parent - 1];
                LeaderEstimate {
                    holder: i,
                    hops,
                    value: from.value.clone(),
                    age: from.age + 1,
                }
            }
        })
        .collect())
}

fn tree(g: &CommGraph) -> Result<Vec<(usize, usize)>> {
    let tree = g.bfs_tree();
    if tree.iter().any(Option::is_none) {
        return Err(Error::GraphNotRooted {
            unreachable: g.unreachable(),
        });
    }
    Ok(tree.into_iter().map(|t| t.expect("checked")).collect())
}

/// In-process message board with stamp checks and delivery accounting.
#[derive(Debug, Clone, Default)]
pub struct Board {
    plans: Vec<Option<PlanMessage>>,
    pub deliveries: usize,
    pub radius_messages: usize,
}

impl Board {
    pub fn new(agents: usize, radius_messages: usize) -> Self {
        Board {
            plans: vec![None; agents],
            deliveries: 0,
            radius_messages,
        }
    }

    /// Publishes a plan; stamps must increase per sender.
    pub fn post(&mut self, msg: PlanMessage) -> Result<()> {
        if let Some(prev) = &self.plans[msg.sender] {
            if msg.stamp <= prev.stamp {
                return Err(Error::StalePlan {
                    sender: msg.sender,
                    stamp: msg.stamp,
                    expected: prev.stamp + 1,
                });
            }
        }
        let sender = msg.sender;
        self.plans[sender] = Some(msg);
        Ok(())
    }

    /// Reads `sender`'s plan for use at step `k`; only plans stamped `k - 1`
    /// are accepted.
    pub fn read(&mut self, sender: usize, k: usize) -> Result<&PlanMessage> {
        let msg = self.plans[sender].as_ref().ok_or(Error::StalePlan {
            sender,
            stamp: 0,
            expected: k.saturating_sub(1),
        })?;
        if msg.stamp + 1 != k {
            return Err(Error::StalePlan {
                sender,
                stamp: msg.stamp,
                expected: k.saturating_sub(1),
            });
        }
        self.deliveries += 1;
        Ok(msg)
    }

    pub fn latest(&self, sender: usize) -> Option<&PlanMessage> {
        self.plans[sender].as_ref()
    }
}

//! Communication topology, leader reachability, synchronization errors and
//! the global formation-error bound.
//!
//! Agent ids are 0 for the leader and 1..=N for followers; follower `i`
//! occupies row `i - 1` of the adjacency matrix.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Mat, Vector};
use crate::scenario::FormationSpec;

#[derive(Debug, Clone, PartialEq)]
pub struct CommGraph {
    /// `adjacency[(i, j)] = a_ij > 0` iff follower `i` hears follower `j` (0-based rows).
    pub adjacency: Mat,
    /// Leader pinning weights `b_i0`.
    pub b0: Vec<f64>,
    pub nu1: f64,
    pub nu2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalBoundCertificate {
    pub m: Vec<Vec<f64>>,
    pub sv_min: f64,
    pub zbars: Vec<f64>,
    pub bound: f64,
}

impl CommGraph {
    pub fn followers(&self) -> usize {
        self.b0.len()
    }

    /// Follower ids `j` with `a_ij > 0`, ascending.
    pub fn neighbors(&self, i: usize) -> Vec<usize> {
        (1..=self.followers())
            .filter(|&j| self.adjacency[(i - 1, j - 1)] > 0.0)
            .collect()
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.adjacency[(i - 1, j - 1)]
    }

    pub fn pin(&self, i: usize) -> f64 {
        self.b0[i - 1]
    }

    pub fn degree(&self, i: usize) -> f64 {
        self.adjacency.row(i - 1).sum()
    }

    /// `nu1 d_i + nu2 b_i0`, the weight of the agent's own input in its error dynamics.
    pub fn self_weight(&self, i: usize) -> f64 {
        self.nu1 * self.degree(i) + self.nu2 * self.pin(i)
    }

    pub fn laplacian(&self) -> Mat {
        let n = self.followers();
        let mut l = -self.adjacency.clone();
        for i in 0..n {
            l[(i, i)] = self.adjacency.row(i).sum();
        }
        l
    }

    /// `nu1 L + nu2 B0`.
    pub fn m_matrix(&self) -> Mat {
        let b0 = Mat::from_diagonal(&Vector::from_vec(self.b0.clone()));
        self.laplacian() * self.nu1 + b0 * self.nu2
    }

    /// BFS tree from the leader over the augmented digraph. Entry `i - 1` holds
    /// `(parent, hops)` for follower `i` (pinned followers have parent 0 and
    /// hops 0), or `None` when unreachable. Ties go to the lowest-index parent.
    pub fn bfs_tree(&self) -> Vec<Option<(usize, usize)>> {
        let n = self.followers();
        let mut out: Vec<Option<(usize, usize)>> = vec![None; n];
        let mut queue = VecDeque::new();
        for i in 1..=n {
            if self.pin(i) > 0.0 {
                out[i - 1] = Some((0, 0));
                queue.push_back(i);
            }
        }
        while let Some(j) = queue.pop_front() {
            let hops = out[j - 1].expect("queued nodes are reached").1;
            for i in 1..=n {
                if out[i - 1].is_none() && self.weight(i, j) > 0.0 {
                    out[i - 1] = Some((j, hops + 1));
                    queue.push_back(i);
                }
            }
        }
        out
    }

    /// Followers not reachable from the leader.
    pub fn unreachable(&self) -> Vec<usize> {
        self.bfs_tree()
            .iter()
            .enumerate()
            .filter(|(_, e)| e.is_none())
            .map(|(i, _)| i + 1)
            .collect()
    }
}

pub fn has_leader_spanning_tree(g: &CommGraph) -> bool {
    g.unreachable().is_empty()
}

pub fn min_singular_value(m: &Mat) -> f64 {
    linalg::min_singular_value(m)
}

/// Synchronization error of follower `i` over the full chain state.
///
/// `states[a]` is agent `a`'s state (leader at 0); entries may be `None` for
/// agents `i` does not need.
pub fn sync_error(i: usize, states: &[Option<Vector>], g: &CommGraph, formation: &FormationSpec) -> Result<Vector> {
    let rel = |a: usize| -> Result<Vector> {
        states
            .get(a)
            .and_then(|s| s.as_ref())
            .map(|x| x - formation.offset(a))
            .ok_or(Error::MissingNeighborState { agent: i, missing: a })
    };
    let own = rel(i)?;
    let mut e = Vector::zeros(own.len());
    for j in g.neighbors(i) {
        e -= (&own - rel(j)?) * (g.nu1 * g.weight(i, j));
    }
    let b = g.pin(i);
    if b > 0.0 {
        e -= (&own - rel(0)?) * (g.nu2 * b);
    }
    Ok(e)
}

/// Per-agent bound `z̄^i` on the deviation of the synchronization error.
/// `radii[j - 1]` is follower `j`'s ball radius.
pub fn zbar(i: usize, radii: &[f64], r0: f64, g: &CommGraph) -> f64 {
    let b = g.pin(i);
    let mut z = g.self_weight(i) * radii[i - 1];
    for j in g.neighbors(i) {
        z += g.nu1 * g.weight(i, j) * radii[j - 1];
    }
    z + g.nu2 * b * r0
}

pub fn global_bound(g: &CommGraph, zbars: &[f64]) -> Result<GlobalBoundCertificate> {
    let unreachable = g.unreachable();
    if !unreachable.is_empty() {
        return Err(Error::GraphNotRooted { unreachable });
    }
    let m = g.m_matrix();
    let sv_min = min_singular_value(&m);
    let bound = zbars.iter().map(|z| z * z).sum::<f64>().sqrt() / sv_min;
    Ok(GlobalBoundCertificate {
        m: linalg::to_rows(&m),
        sv_min,
        zbars: zbars.to_vec(),
        bound,
    })
}

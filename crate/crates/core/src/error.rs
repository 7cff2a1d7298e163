use thiserror::Error;

/// Errors raised by the certification, planning and simulation layers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("matrix is not Hurwitz (max real part of eigenvalues = {max_real:e})")]
    NotHurwitz { max_real: f64 },

    #[error("linear system is numerically singular: {0}")]
    SingularSystem(String),

    #[error("matrix is not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },

    #[error("non-finite state encountered: {0}")]
    NonFiniteState(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("agent {agent} is missing the state of agent {missing}")]
    MissingNeighborState { agent: usize, missing: usize },

    #[error("GraphNotRooted: follower(s) {unreachable:?} are not reachable from the leader")]
    GraphNotRooted { unreachable: Vec<usize> },

    #[error(
        "InfeasibleLeaderTube: lambda_min(Q0) = {lambda_min_q:e} must exceed \
         2 lambda_max(P0) |G| L0 = {required:e} (margin {margin:e})"
    )]
    InfeasibleLeaderTube {
        lambda_min_q: f64,
        required: f64,
        margin: f64,
    },

    #[error("EmptyTightenedSet: input bound {u_max:e} does not exceed the ancillary margin {eta:e}")]
    EmptyTightenedSet { u_max: f64, eta: f64 },

    #[error("DegenerateGradient: agent is {distance:e} from the barrier center")]
    DegenerateGradient { distance: f64 },

    #[error("RiccatiDiverged after {iterations} iterations (last change {change:e})")]
    RiccatiDiverged { iterations: usize, change: f64 },

    #[error("QP is infeasible")]
    Infeasible,

    #[error("QP solver hit the iteration limit ({0})")]
    MaxIter(usize),

    #[error("StalePlan: plan from agent {sender} stamped {stamp}, expected {expected}")]
    StalePlan {
        sender: usize,
        stamp: usize,
        expected: usize,
    },

    #[error("CascadedInfeasibility: agent {agent} infeasible for {steps} consecutive steps at k = {k}")]
    CascadedInfeasibility { agent: usize, steps: usize, k: usize },

    #[error("invalid scenario: {0}")]
    Scenario(String),
}

pub type Result<T> = std::result::Result<T, Error>;

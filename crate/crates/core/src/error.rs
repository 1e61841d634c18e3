use thiserror::Error;

/// Which of the two coupled fleets a station flag refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum FleetSystem {
    /// Customer-driven vehicles.
    CustomerDriven,
    /// Driver-operated taxis.
    Taxi,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("station {station} has zero service rate in the {system:?} system")]
    DegenerateStation { station: usize, system: FleetSystem },

    #[error("delegation exceeds demand on arc {from}->{to} (residual {residual:e})")]
    InfeasibleSplit { from: usize, to: usize, residual: f64 },

    #[error("arc {from}->{to} is routed but has non-positive travel time")]
    BadTopology { from: usize, to: usize },

    #[error("station routing chain has no unique recurrent class")]
    SingularChain,

    #[error("node {node} has zero service rate but positive relative throughput")]
    ZeroRate { node: usize },

    #[error("normalization constant overflowed at population {population}")]
    Overflow { population: usize },

    #[error("state space of {states} states exceeds cap {cap}")]
    StateSpaceTooLarge { states: u128, cap: usize },

    #[error("flow problem infeasible: cut {cut:?} leaves {shortfall} units unrouted")]
    Infeasible { cut: Vec<usize>, shortfall: f64 },

    #[error("starting point violates bounds: {0}")]
    InfeasibleStart(String),

    #[error("availability threshold {threshold} not reached within m_d <= {bound}")]
    NotReachedWithinBounds { threshold: f64, bound: usize },

    #[error("need at least {needed} distinct points, got {got}")]
    TooFewPoints { needed: usize, got: usize },

    #[error("no trip records inside the requested window")]
    EmptyWindow,

    #[error("demand graph is not strongly connected even after smoothing")]
    DisconnectedDemand,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

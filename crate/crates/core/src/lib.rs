//! Closed queueing-network models of mobility-on-demand fleets that mix
//! customer-driven vehicles with hired rebalancing drivers.
//!
//! The numerical core is generic over [`Scalar`], so analytic identities can be
//! checked in exact rational arithmetic. The aliases below fix `f64`.

pub mod assignment;
pub mod ctmc;
pub mod error;
pub mod flow;
pub mod generate;
pub mod ingest;
pub mod jackson;
pub mod linalg;
pub mod lp;
pub mod matrix;
pub mod mmrp;
pub mod mrp;
pub mod network;
pub mod num;
pub mod scenario;
pub mod sim;
pub mod sizing;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub use error::{Error, FleetSystem, Result};
pub use matrix::Matrix;
pub use num::{Real, Scalar};

pub type ScenarioF64 = scenario::Scenario<f64>;
pub type RebalanceParamsF64 = scenario::RebalanceParams<f64>;
pub type JacksonNetworkF64 = network::JacksonNetwork<f64>;
pub type MatrixF64 = matrix::Matrix<f64>;
pub type MrpSolutionF64 = mrp::MrpSolution<f64>;
pub type PassengerMetricsF64 = mrp::PassengerMetrics<f64>;
pub type AssignmentProblemF64 = assignment::AssignmentProblem<f64>;
pub type FlowProblemF64 = flow::FlowProblem<f64>;
/// Exact rational scalar for oracle checks.
pub type Rational = num_rational::Rational64;

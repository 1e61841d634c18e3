use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "modnet", version, about = "Analysis, rebalancing, sizing and simulation of mobility-on-demand fleets")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct Common {
    /// Scenario file (JSON) for subcommands that read one.
    #[arg(long, global = true)]
    pub scenario: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = "out")]
    #[serde(skip)]
    pub out: PathBuf,
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads for sweeps and replicas.
    #[arg(long, global = true, default_value_t = 1)]
    #[serde(skip)]
    pub jobs: usize,
}

#[derive(Subcommand, Debug, Clone, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    /// Generate a seeded synthetic scenario.
    Gen(GenArgs),
    /// Build a scenario from a trip CSV.
    Ingest(IngestArgs),
    /// Passenger availability of a fleet under given or linear rebalancing.
    Analyze(AnalyzeArgs),
    /// Rebalancing rates, linear or nonlinear.
    #[command(subcommand)]
    Rebalance(RebalanceCommand),
    /// Smallest fleets per vehicle-to-driver ratio and their costs.
    Size(SizeArgs),
    /// Loss-mode or queueing-mode simulation.
    Simulate(SimulateArgs),
    /// Solve one customer-assignment program.
    Assign(AssignArgs),
    /// Rerun the command recorded in a manifest into --out.
    Replay(ReplayArgs),
}

#[derive(Subcommand, Debug, Clone, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RebalanceCommand {
    /// Linear program: two min-cost flows.
    Lp(LpArgs),
    /// Nonlinear program with equal passenger availability, swept over weights.
    Nlp(NlpArgs),
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct FleetArgs {
    /// Total vehicles.
    #[arg(long)]
    pub m_v: usize,
    /// Drivers.
    #[arg(long)]
    pub m_d: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Style {
    Uniform,
    Grid,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct GenArgs {
    #[arg(long, default_value_t = 20)]
    pub stations: usize,
    #[arg(long, value_enum, default_value_t = Style::Uniform)]
    pub style: Style,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct IngestArgs {
    /// CSV with pickup_ts,pickup_x,pickup_y,dropoff_x,dropoff_y,duration_s.
    #[arg(long)]
    pub trips: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub stations: usize,
    /// Window start (epoch seconds or ISO-8601); whole file when omitted.
    #[arg(long, requires = "end")]
    pub start: Option<String>,
    /// Window end, exclusive.
    #[arg(long, requires = "start")]
    pub end: Option<String>,
    #[arg(long, default_value_t = 1e-3)]
    pub smoothing: f64,
    #[arg(long, default_value_t = 1e-6)]
    pub lambda_floor: f64,
    /// Drop trips longer than this multiple of their pair's median.
    #[arg(long, default_value_t = 5.0)]
    pub outlier_factor: f64,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub fleet: FleetArgs,
    /// Rebalancing parameters (JSON); the linear solution when omitted.
    #[arg(long)]
    pub params: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct LpArgs {
    /// Vehicles, to report availability alongside the rates.
    #[arg(long, requires = "m_d")]
    pub m_v: Option<usize>,
    #[arg(long, requires = "m_v")]
    pub m_d: Option<usize>,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct NlpArgs {
    #[command(flatten)]
    pub fleet: FleetArgs,
    /// Availability weights, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    pub c: Vec<f64>,
    #[arg(long, default_value_t = 20_000)]
    pub max_iter: usize,
    /// Allowed spread of passenger availability.
    #[arg(long, default_value_t = 1e-3)]
    pub eps_a: f64,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct SizeArgs {
    #[arg(long, value_delimiter = ',', default_value = "2,2.5,3,3.5,4,4.5,5,6,7,8")]
    pub ratios: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0.85,0.9,0.95")]
    pub thresholds: Vec<f64>,
    /// Driver cost relative to a vehicle.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
    pub cost_ratios: Vec<f64>,
    #[arg(long, default_value_t = 4000)]
    pub max_drivers: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Loss,
    Queueing,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Travel {
    Constant,
    Exponential,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct SimulateArgs {
    /// Full simulation config (JSON); replaces the flags below except --seed.
    #[arg(long, conflicts_with_all = ["mode", "m_v", "m_d"])]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Mode::Loss)]
    pub mode: Mode,
    #[arg(long, required_unless_present = "config")]
    pub m_v: Option<usize>,
    #[arg(long, required_unless_present = "config")]
    pub m_d: Option<usize>,
    /// Steps, warmup included.
    #[arg(long, default_value_t = 30_000)]
    pub horizon: usize,
    /// Discarded steps; a third of the horizon when omitted.
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long, default_value_t = 10)]
    pub replicas: usize,
    /// Step length in scenario time units; 1 in loss mode and 1/30 in queueing mode when omitted.
    #[arg(long)]
    pub dt: Option<f64>,
    /// Travel-time model; constant in loss mode and exponential in queueing mode when omitted.
    #[arg(long, value_enum)]
    pub travel: Option<Travel>,
    /// Loss-mode rebalancing parameters (JSON); the linear solution when omitted.
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Queueing mode: reward per assigned customer.
    #[arg(long, default_value_t = 1.5)]
    pub w: f64,
    /// Queueing mode: steps between driver dispatches.
    #[arg(long, default_value_t = 60)]
    pub rebalance_period: usize,
    /// Queueing mode: steps per wait-time bin.
    #[arg(long, default_value_t = 30)]
    pub bin_steps: usize,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct AssignArgs {
    #[command(flatten)]
    pub fleet: FleetArgs,
    /// Station state (JSON); a seeded random state when omitted.
    #[arg(long)]
    pub state: Option<PathBuf>,
    /// Largest count in a random state.
    #[arg(long, default_value_t = 3)]
    pub max_count: u32,
    #[arg(long, default_value_t = 1.5)]
    pub w: f64,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct ReplayArgs {
    /// Manifest written by an earlier run.
    #[arg(long)]
    pub manifest: PathBuf,
}

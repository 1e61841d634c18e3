//! Stochastic fleet simulation.
//!
//! Loss mode replays the open-loop model: Poisson customers at each station are
//! split between the customer-driven fleet and the taxi fleet and leave if no
//! vehicle is waiting. Events run in continuous time; the step grid only marks
//! the warmup and the horizon.
//!
//! Queueing mode runs the closed-loop policy on a fixed time step: customers
//! queue until the assignment program gives them a vehicle or a taxi, and idle
//! drivers are periodically dispatched towards their target share.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::assignment::{build_problem, solve_assignment, StationState};
use crate::error::{Error, Result};
use crate::flow::{solve_min_cost_flow, FlowProblem};
use crate::matrix::Matrix;
use crate::scenario::{FleetConfig, RebalanceParams, Scenario};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SimMode {
    #[default]
    Loss,
    Queueing,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TravelModel {
    /// Exactly `T_ij`.
    Constant,
    /// Exponential with mean `T_ij`.
    #[default]
    Exponential,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    /// Weight on assigned customers in the assignment program.
    pub w: f64,
    /// Steps between driver dispatches.
    pub rebalance_period: usize,
    /// Steps per bin of the wait-time series.
    pub bin_steps: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self { w: 1.5, rebalance_period: 60, bin_steps: 30 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub mode: SimMode,
    pub fleet: FleetConfig,
    /// Open-loop controls, used in loss mode.
    #[serde(default)]
    pub params: Option<RebalanceParams<f64>>,
    #[serde(default)]
    pub policy: PolicyConfig,
    /// Step length in scenario time units.
    pub dt: f64,
    /// Total steps, warmup included.
    pub horizon: usize,
    pub warmup: usize,
    pub replicas: usize,
    pub seed: u64,
    pub travel: TravelModel,
}

impl SimConfig {
    /// Loss mode with one-unit steps and a third of the horizon as warmup.
    pub fn loss(fleet: FleetConfig, params: RebalanceParams<f64>, horizon: usize, replicas: usize, seed: u64) -> Self {
        Self {
            mode: SimMode::Loss,
            fleet,
            params: Some(params),
            policy: PolicyConfig::default(),
            dt: 1.0,
            horizon,
            warmup: horizon / 3,
            replicas,
            seed,
            travel: TravelModel::Constant,
        }
    }

    /// Queueing mode with `dt` per step and a third of the horizon as warmup.
    pub fn queueing(fleet: FleetConfig, dt: f64, horizon: usize, replicas: usize, seed: u64) -> Self {
        Self {
            mode: SimMode::Queueing,
            fleet,
            params: None,
            policy: PolicyConfig::default(),
            dt,
            horizon,
            warmup: horizon / 3,
            replicas,
            seed,
            travel: TravelModel::Exponential,
        }
    }

    pub fn check(&self, s: &Scenario<f64>) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidInput("dt must be positive".into()));
        }
        if self.warmup >= self.horizon {
            return Err(Error::InvalidInput("warmup must be shorter than the horizon".into()));
        }
        if self.replicas == 0 {
            return Err(Error::InvalidInput("need at least one replica".into()));
        }
        if self.policy.rebalance_period == 0 || self.policy.bin_steps == 0 {
            return Err(Error::InvalidInput("policy periods must be positive".into()));
        }
        if self.mode == SimMode::Loss {
            match &self.params {
                Some(rp) => rp.validate(s)?,
                None => return Err(Error::InvalidInput("loss mode needs rebalancing parameters".into())),
            }
        }
        Ok(())
    }
}

/// Splits `total` in proportion to `weights`, remainders to the largest fractional parts.
pub fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if weights.is_empty() || sum <= 0.0 {
        return vec![0; weights.len()];
    }
    let exact: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut out: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let short = total - out.iter().sum::<usize>();
    for &i in order.iter().take(short) {
        out[i] += 1;
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Event {
    time: f64,
    seq: u64,
    to: usize,
    from: usize,
    kind: Trip,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Trip {
    SelfDrive,
    Taxi,
}

impl Eq for Event {}

impl Ord for Event {
    fn cmp(&self, other: &Self) -> Ordering {
        other.time.total_cmp(&self.time).then(other.seq.cmp(&self.seq))
    }
}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

struct Travel<'a> {
    t: &'a Matrix<f64>,
    model: TravelModel,
}

impl Travel<'_> {
    fn sample(&self, rng: &mut ChaCha8Rng, i: usize, j: usize) -> f64 {
        let mean = self.t[(i, j)];
        match self.model {
            TravelModel::Constant => mean,
            TravelModel::Exponential => Exp::new(1.0 / mean).expect("positive travel time").sample(rng),
        }
    }
}

fn row_sampler(m: &Matrix<f64>, i: usize) -> Option<WeightedIndex<f64>> {
    WeightedIndex::new(m.row(i)).ok()
}

/// Post-warmup counts of one loss-mode replica.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LossCounts {
    pub arrivals: Vec<u64>,
    pub delegated: Vec<u64>,
    pub served_customer: Vec<u64>,
    pub served_taxi: Vec<u64>,
    pub virtual_arrivals: Vec<u64>,
    pub virtual_served: Vec<u64>,
}

impl LossCounts {
    fn new(n: usize) -> Self {
        Self {
            arrivals: vec![0; n],
            delegated: vec![0; n],
            served_customer: vec![0; n],
            served_taxi: vec![0; n],
            virtual_arrivals: vec![0; n],
            virtual_served: vec![0; n],
        }
    }

    pub fn availability(&self) -> Vec<f64> {
        (0..self.arrivals.len())
            .map(|i| ratio(self.served_customer[i] + self.served_taxi[i], self.arrivals[i]))
            .collect()
    }

    pub fn availability_customer(&self) -> Vec<f64> {
        (0..self.arrivals.len())
            .map(|i| ratio(self.served_customer[i], self.arrivals[i] - self.delegated[i]))
            .collect()
    }

    pub fn availability_taxi(&self) -> Vec<f64> {
        (0..self.arrivals.len()).map(|i| ratio(self.served_taxi[i], self.delegated[i])).collect()
    }

    pub fn lost(&self) -> u64 {
        let served: u64 = self.served_customer.iter().chain(&self.served_taxi).sum();
        self.arrivals.iter().sum::<u64>() - served
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        1.0
    } else {
        a as f64 / b as f64
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let k = values.len();
    if k == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / k as f64;
    if k < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1) as f64;
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossMetrics {
    pub replicas: Vec<LossCounts>,
    /// Mean over replicas of each replica's passenger availability.
    pub availability: Vec<f64>,
    pub availability_std: Vec<f64>,
    pub availability_customer: Vec<f64>,
    pub availability_taxi: Vec<f64>,
    pub rebalancing_trips: u64,
}

fn loss_replica(s: &Scenario<f64>, cfg: &SimConfig, replica: usize) -> (LossCounts, u64) {
    let n = s.n;
    let rp = cfg.params.as_ref().expect("checked");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(replica as u64));
    let travel = Travel { t: &s.t, model: cfg.travel };
    let mut customer = apportion(cfg.fleet.customer_driven(), &s.lambda);
    let mut taxi = apportion(cfg.fleet.m_d, &s.lambda);
    // One source per station for real customers, then one per station for virtual ones.
    let mut rates: Vec<f64> = s.lambda.clone();
    rates.extend(rp.psi.iter().copied());
    let total_rate: f64 = rates.iter().sum();
    let source = WeightedIndex::new(&rates).expect("positive demand");
    let inter = Exp::new(total_rate).expect("positive demand");
    let dest: Vec<_> = (0..n).map(|i| row_sampler(&s.p, i)).collect();
    let virt: Vec<_> = (0..n).map(|i| if rp.psi[i] > 0.0 { row_sampler(&rp.xi, i) } else { None }).collect();
    let start = cfg.warmup as f64 * cfg.dt;
    let end = cfg.horizon as f64 * cfg.dt;
    let mut heap = BinaryHeap::new();
    let mut seq = 0;
    let mut counts = LossCounts::new(n);
    let mut trips = 0;
    let mut now = 0.0;
    loop {
        let next_arrival = now + inter.sample(&mut rng);
        while heap.peek().is_some_and(|e: &Event| e.time <= next_arrival) {
            let e = heap.pop().expect("peeked");
            match e.kind {
                Trip::SelfDrive => customer[e.to] += 1,
                Trip::Taxi => taxi[e.to] += 1,
            }
        }
        now = next_arrival;
        if now >= end {
            break;
        }
        let counting = now >= start;
        let k = source.sample(&mut rng);
        let (i, real) = if k < n { (k, true) } else { (k - n, false) };
        let (j, kind) = if real {
            let j = dest[i].as_ref().expect("valid routing row").sample(&mut rng);
            let pij = s.lambda[i] * s.p[(i, j)];
            let delegate = if pij > 0.0 { (rp.lambda_del[i] * rp.eta[(i, j)] / pij).min(1.0) } else { 0.0 };
            let kind = if rng.random::<f64>() < delegate { Trip::Taxi } else { Trip::SelfDrive };
            if counting {
                counts.arrivals[i] += 1;
                if kind == Trip::Taxi {
                    counts.delegated[i] += 1;
                }
            }
            (j, kind)
        } else {
            let Some(d) = virt[i].as_ref() else { continue };
            if counting {
                counts.virtual_arrivals[i] += 1;
            }
            (d.sample(&mut rng), Trip::Taxi)
        };
        let pool = match kind {
            Trip::SelfDrive => &mut customer,
            Trip::Taxi => &mut taxi,
        };
        if pool[i] == 0 {
            continue;
        }
        pool[i] -= 1;
        seq += 1;
        heap.push(Event { time: now + travel.sample(&mut rng, i, j), seq, to: j, from: i, kind });
        if counting {
            match (real, kind) {
                (true, Trip::SelfDrive) => counts.served_customer[i] += 1,
                (true, Trip::Taxi) => counts.served_taxi[i] += 1,
                (false, _) => {
                    counts.virtual_served[i] += 1;
                    trips += 1;
                }
            }
        }
    }
    (counts, trips)
}

/// Passenger-loss simulation of the open-loop controls in `cfg.params`.
pub fn run_loss_sim(s: &Scenario<f64>, cfg: &SimConfig) -> Result<LossMetrics> {
    cfg.check(s)?;
    let runs: Vec<(LossCounts, u64)> = (0..cfg.replicas).into_par_iter().map(|r| loss_replica(s, cfg, r)).collect();
    let n = s.n;
    let per = |f: &dyn Fn(&LossCounts) -> Vec<f64>| -> Vec<(f64, f64)> {
        let vals: Vec<Vec<f64>> = runs.iter().map(|(c, _)| f(c)).collect();
        (0..n).map(|i| mean_std(&vals.iter().map(|v| v[i]).collect::<Vec<_>>())).collect()
    };
    let all = per(&|c| c.availability());
    let cust = per(&|c| c.availability_customer());
    let taxi = per(&|c| c.availability_taxi());
    Ok(LossMetrics {
        availability: all.iter().map(|a| a.0).collect(),
        availability_std: all.iter().map(|a| a.1).collect(),
        availability_customer: cust.iter().map(|a| a.0).collect(),
        availability_taxi: taxi.iter().map(|a| a.0).collect(),
        rebalancing_trips: runs.iter().map(|r| r.1).sum(),
        replicas: runs.into_iter().map(|r| r.0).collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct DispatchOrder {
    pub from: usize,
    pub to: usize,
    pub count: u32,
}

/// Sends idle drivers, each driving a vehicle, from stations holding more
/// vehicles than their target to stations holding fewer, at least total
/// travel time. `have[i]` counts uncommitted vehicles at i plus vehicles
/// heading there; a station can send no more than its idle drivers.
pub fn rebalance_drivers_step(
    have: &[u32],
    idle: &[u32],
    target: &[u32],
    t: &Matrix<f64>,
) -> Result<Vec<DispatchOrder>> {
    let n = have.len();
    let mut surplus = vec![0i64; n];
    let mut deficit = vec![0i64; n];
    for i in 0..n {
        let (h, want) = (have[i] as i64, target[i] as i64);
        if h > want {
            surplus[i] = (h - want).min(idle[i] as i64);
        } else {
            deficit[i] = want - h;
        }
    }
    let sup: i64 = surplus.iter().sum();
    let dem: i64 = deficit.iter().sum();
    if sup == 0 || dem == 0 {
        return Ok(Vec::new());
    }
    // A dummy node balances the books; arcs touching it cost nothing.
    let dummy = n;
    let mut div = vec![0.0; n + 1];
    for i in 0..n {
        div[i] = (surplus[i] - deficit[i]) as f64;
    }
    div[dummy] = (dem - sup) as f64;
    let mut fp = FlowProblem::new(div);
    let mut arcs = Vec::new();
    for i in (0..n).filter(|&i| surplus[i] > 0) {
        for j in (0..n).filter(|&j| deficit[j] > 0) {
            arcs.push((i, j, fp.add_arc(i, j, t[(i, j)], None)));
        }
        if sup > dem {
            fp.add_arc(i, dummy, 0.0, None);
        }
    }
    if dem > sup {
        for j in (0..n).filter(|&j| deficit[j] > 0) {
            fp.add_arc(dummy, j, 0.0, None);
        }
    }
    let sol = solve_min_cost_flow(&fp)?;
    Ok(arcs
        .into_iter()
        .filter_map(|(from, to, a)| {
            let c = sol.flow[a].round() as u32;
            (c > 0).then_some(DispatchOrder { from, to, count: c })
        })
        .collect())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct QueueReplica {
    /// `wait[i][b]`: mean wait of customers leaving station i in bin b, NaN if none.
    pub wait: Vec<Vec<f64>>,
    /// Mean post-warmup wait per station, NaN if nobody left.
    pub station_wait: Vec<f64>,
    pub arrivals: u64,
    pub served: u64,
    pub waiting_at_end: u64,
    pub assigned_customer: u64,
    pub assigned_taxi: u64,
    pub rebalancing_trips: u64,
    pub solves: u64,
    pub conservation_violations: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QueueMetrics {
    /// Bin midpoints in scenario time units.
    pub bin_time: Vec<f64>,
    /// First bin after the warmup.
    pub first_bin: usize,
    pub mean_wait: Vec<Vec<f64>>,
    pub std_wait: Vec<Vec<f64>>,
    /// Mean over replicas of the post-warmup mean wait per station.
    pub station_wait: Vec<f64>,
    pub replicas: Vec<QueueReplica>,
}

impl QueueMetrics {
    /// Station with the longest mean wait; stations nobody left are skipped.
    pub fn worst_station(&self) -> usize {
        let w = |i: usize| if self.station_wait[i].is_nan() { f64::NEG_INFINITY } else { self.station_wait[i] };
        (0..self.station_wait.len()).max_by(|&a, &b| w(a).total_cmp(&w(b)).then(b.cmp(&a))).unwrap_or(0)
    }

    /// First bin of the final third of the post-warmup bins.
    pub fn final_third(&self) -> usize {
        let nb = self.bin_time.len();
        self.first_bin + nb.saturating_sub(self.first_bin) * 2 / 3
    }

    /// Trend of the worst station over the final third.
    pub fn worst_trend(&self) -> (usize, Option<Trend>) {
        let w = self.worst_station();
        (w, wait_trend(self, w, self.final_third()))
    }

    pub fn conservation_violations(&self) -> u64 {
        self.replicas.iter().map(|r| r.conservation_violations).sum()
    }
}

struct Waiting {
    arrived: usize,
    to: usize,
}

fn queue_replica(s: &Scenario<f64>, cfg: &SimConfig, replica: usize) -> Result<QueueReplica> {
    let n = s.n;
    let fleet = cfg.fleet;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(replica as u64));
    let travel = Travel { t: &s.t, model: cfg.travel };
    let dest: Vec<_> = (0..n).map(|i| row_sampler(&s.p, i)).collect();
    let arrivals_per_step: Vec<Option<Poisson<f64>>> =
        s.lambda.iter().map(|&l| Poisson::new(l * cfg.dt).ok()).collect();
    let vehicle_target: Vec<u32> = apportion(fleet.m_v, &s.lambda).into_iter().map(|v| v as u32).collect();

    let mut drivers: Vec<u32> = apportion(fleet.m_d, &s.lambda).into_iter().map(|v| v as u32).collect();
    let free_vehicles = apportion(fleet.customer_driven(), &s.lambda);
    // Vehicles physically at each station, taxis included.
    let mut vehicles: Vec<u32> = (0..n).map(|i| drivers[i] + free_vehicles[i] as u32).collect();
    let mut unassigned: Vec<VecDeque<Waiting>> = (0..n).map(|_| VecDeque::new()).collect();
    let mut departing: Vec<Vec<(Waiting, Trip)>> = (0..n).map(|_| Vec::new()).collect();
    let mut committed_self = vec![vec![0u32; n]; n];
    let mut committed_taxi = vec![0u32; n];
    let mut transit_self = vec![vec![0u32; n]; n];
    let mut inbound_drivers = vec![0u32; n];
    let mut heap = BinaryHeap::new();
    let mut seq = 0;

    let bins = cfg.horizon.div_ceil(cfg.policy.bin_steps);
    let mut wait_sum = vec![vec![0.0; bins]; n];
    let mut wait_cnt = vec![vec![0u64; bins]; n];
    let mut out = QueueReplica::default();
    let mut in_service = 0u64;
    let mut waiting = 0u64;

    for step in 0..cfg.horizon {
        let now = step as f64 * cfg.dt;
        while heap.peek().is_some_and(|e: &Event| e.time <= now) {
            let e = heap.pop().expect("peeked");
            vehicles[e.to] += 1;
            match e.kind {
                Trip::SelfDrive => transit_self[e.from][e.to] -= 1,
                Trip::Taxi => {
                    drivers[e.to] += 1;
                    inbound_drivers[e.to] -= 1;
                }
            }
        }
        for i in 0..n {
            for (c, kind) in departing[i].drain(..) {
                vehicles[i] -= 1;
                match kind {
                    Trip::SelfDrive => {
                        committed_self[i][c.to] -= 1;
                        transit_self[i][c.to] += 1;
                    }
                    Trip::Taxi => {
                        committed_taxi[i] -= 1;
                        inbound_drivers[c.to] += 1;
                    }
                }
                seq += 1;
                heap.push(Event { time: now + travel.sample(&mut rng, i, c.to), seq, to: c.to, from: i, kind });
                in_service -= 1;
                out.served += 1;
                if step >= cfg.warmup {
                    let b = step / cfg.policy.bin_steps;
                    wait_sum[i][b] += (step - c.arrived) as f64 * cfg.dt;
                    wait_cnt[i][b] += 1;
                }
            }
        }
        for i in 0..n {
            let k = arrivals_per_step[i].as_ref().map_or(0, |d| d.sample(&mut rng) as u64);
            for _ in 0..k {
                let to = dest[i].as_ref().expect("valid routing row").sample(&mut rng);
                unassigned[i].push_back(Waiting { arrived: step, to });
            }
            out.arrivals += k;
            waiting += k;
        }
        if step % cfg.policy.rebalance_period == 0 {
            let have: Vec<u32> = (0..n)
                .map(|i| {
                    let committed = committed_taxi[i] + committed_self[i].iter().sum::<u32>();
                    let inbound = inbound_drivers[i] + (0..n).map(|j| transit_self[j][i]).sum::<u32>();
                    vehicles[i] - committed + inbound
                })
                .collect();
            // Customers already waiting raise the target one-for-one.
            let want: Vec<u32> = (0..n).map(|i| vehicle_target[i] + unassigned[i].len() as u32).collect();
            let orders = rebalance_drivers_step(&have, &drivers, &want, &s.t)?;
            for o in orders {
                for _ in 0..o.count {
                    drivers[o.from] -= 1;
                    vehicles[o.from] -= 1;
                    inbound_drivers[o.to] += 1;
                    seq += 1;
                    let time = now + travel.sample(&mut rng, o.from, o.to);
                    heap.push(Event { time, seq, to: o.to, from: o.from, kind: Trip::Taxi });
                    out.rebalancing_trips += 1;
                }
            }
        }
        // Departure queues were just emptied, so the trigger reduces to whether
        // anyone waiting could be served at all.
        let excess = |i: usize, vehicles: &[u32], drivers: &[u32], cs: &[Vec<u32>], ct: &[u32]| {
            vehicles[i] - drivers[i] - ct[i] - cs[i].iter().sum::<u32>()
        };
        let assignable = (0..n).any(|i| {
            !unassigned[i].is_empty()
                && (drivers[i] > 0 || excess(i, &vehicles, &drivers, &committed_self, &committed_taxi) > 0)
        });
        if assignable {
            let mut st = StationState::empty(n);
            for i in 0..n {
                st.v_e[i] = excess(i, &vehicles, &drivers, &committed_self, &committed_taxi);
                st.d_u[i] = drivers[i];
                for c in &unassigned[i] {
                    st.c_u[i][c.to] += 1;
                }
                for j in 0..n {
                    st.v_t[i][j] = transit_self[i][j];
                    st.v_a[i][j] = committed_self[i][j];
                }
            }
            let ap = build_problem(&st, fleet, &s.lambda, cfg.policy.w)?;
            let sol = solve_assignment(&ap);
            out.solves += 1;
            for i in 0..n {
                let mut take_v = sol.n_v[i].clone();
                let mut take_d = sol.n_d[i].clone();
                let mut keep = VecDeque::with_capacity(unassigned[i].len());
                for c in unassigned[i].drain(..) {
                    let kind = if take_v[c.to] > 0 {
                        take_v[c.to] -= 1;
                        Some(Trip::SelfDrive)
                    } else if take_d[c.to] > 0 {
                        take_d[c.to] -= 1;
                        Some(Trip::Taxi)
                    } else {
                        None
                    };
                    match kind {
                        Some(Trip::SelfDrive) => {
                            committed_self[i][c.to] += 1;
                            out.assigned_customer += 1;
                            departing[i].push((c, Trip::SelfDrive));
                        }
                        Some(Trip::Taxi) => {
                            drivers[i] -= 1;
                            committed_taxi[i] += 1;
                            out.assigned_taxi += 1;
                            departing[i].push((c, Trip::Taxi));
                        }
                        None => keep.push_back(c),
                    }
                }
                unassigned[i] = keep;
            }
            let moved: u64 = sol.assigned() as u64;
            waiting -= moved;
            in_service += moved;
        }
        // Conservation of vehicles, drivers and customers.
        let on_road = heap.len() as u64;
        let at_stations: u64 = vehicles.iter().map(|&v| v as u64).sum();
        let drivers_total: u64 = drivers.iter().chain(&committed_taxi).chain(&inbound_drivers).map(|&v| v as u64).sum();
        let ok = at_stations + on_road == fleet.m_v as u64
            && drivers_total == fleet.m_d as u64
            && (0..n).all(|i| {
                vehicles[i] as u64
                    >= drivers[i] as u64 + committed_taxi[i] as u64 + committed_self[i].iter().map(|&v| v as u64).sum::<u64>()
            })
            && out.arrivals == out.served + waiting + in_service
            && waiting == unassigned.iter().map(|q| q.len() as u64).sum::<u64>();
        if !ok {
            out.conservation_violations += 1;
        }
    }
    out.waiting_at_end = waiting;
    out.wait = (0..n)
        .map(|i| (0..bins).map(|b| if wait_cnt[i][b] > 0 { wait_sum[i][b] / wait_cnt[i][b] as f64 } else { f64::NAN }).collect())
        .collect();
    out.station_wait = (0..n)
        .map(|i| {
            let c: u64 = wait_cnt[i].iter().sum();
            if c > 0 {
                wait_sum[i].iter().sum::<f64>() / c as f64
            } else {
                f64::NAN
            }
        })
        .collect();
    Ok(out)
}

/// Closed-loop simulation: customers queue, the assignment program serves
/// them, and idle drivers are dispatched every `rebalance_period` steps.
pub fn run_queueing_sim(s: &Scenario<f64>, cfg: &SimConfig) -> Result<QueueMetrics> {
    cfg.check(s)?;
    let runs: Vec<QueueReplica> =
        (0..cfg.replicas).into_par_iter().map(|r| queue_replica(s, cfg, r)).collect::<Result<_>>()?;
    let n = s.n;
    let bins = cfg.horizon.div_ceil(cfg.policy.bin_steps);
    let width = cfg.policy.bin_steps as f64 * cfg.dt;
    let mut mean_wait = vec![vec![f64::NAN; bins]; n];
    let mut std_wait = vec![vec![f64::NAN; bins]; n];
    for i in 0..n {
        for b in 0..bins {
            let vals: Vec<f64> = runs.iter().map(|r| r.wait[i][b]).filter(|v| !v.is_nan()).collect();
            (mean_wait[i][b], std_wait[i][b]) = mean_std(&vals);
        }
    }
    let station_wait = (0..n)
        .map(|i| mean_std(&runs.iter().map(|r| r.station_wait[i]).filter(|v| !v.is_nan()).collect::<Vec<_>>()).0)
        .collect();
    Ok(QueueMetrics {
        bin_time: (0..bins).map(|b| (b as f64 + 0.5) * width).collect(),
        first_bin: cfg.warmup.div_ceil(cfg.policy.bin_steps),
        mean_wait,
        std_wait,
        station_wait,
        replicas: runs,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum SimMetrics {
    Loss(LossMetrics),
    Queueing(QueueMetrics),
}

pub fn run_sim(s: &Scenario<f64>, cfg: &SimConfig) -> Result<SimMetrics> {
    match cfg.mode {
        SimMode::Loss => run_loss_sim(s, cfg).map(SimMetrics::Loss),
        SimMode::Queueing => run_queueing_sim(s, cfg).map(SimMetrics::Queueing),
    }
}

/// Least-squares slope of `y` on `x`.
pub fn ols_slope(x: &[f64], y: &[f64]) -> Option<f64> {
    let k = x.len();
    if k < 2 {
        return None;
    }
    let mx = x.iter().sum::<f64>() / k as f64;
    let my = y.iter().sum::<f64>() / k as f64;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    Some(x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / sxx)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Trend {
    pub station: usize,
    /// Mean over replicas of the per-replica slope, wait per time unit.
    pub slope: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Mean wait over the window.
    pub mean_wait: f64,
    pub replicas: usize,
}

impl Trend {
    pub fn contains_zero(&self) -> bool {
        self.ci_low <= 0.0 && 0.0 <= self.ci_high
    }
}

/// Wait-time trend of one station over bins `from_bin..`: each replica's
/// series gets an OLS slope, and the slopes get a 95% t interval.
pub fn wait_trend(m: &QueueMetrics, station: usize, from_bin: usize) -> Option<Trend> {
    let mut slopes = Vec::new();
    let mut means = Vec::new();
    for r in &m.replicas {
        let (x, y): (Vec<f64>, Vec<f64>) = r.wait[station]
            .iter()
            .enumerate()
            .skip(from_bin)
            .filter(|(_, v)| !v.is_nan())
            .map(|(b, &v)| (m.bin_time[b], v))
            .unzip();
        if let Some(sl) = ols_slope(&x, &y) {
            slopes.push(sl);
            means.push(y.iter().sum::<f64>() / y.len() as f64);
        }
    }
    let k = slopes.len();
    if k < 2 {
        return None;
    }
    let (slope, sd) = mean_std(&slopes);
    let tq = StudentsT::new(0.0, 1.0, (k - 1) as f64).ok()?.inverse_cdf(0.975);
    let half = tq * sd / (k as f64).sqrt();
    Some(Trend {
        station,
        slope,
        ci_low: slope - half,
        ci_high: slope + half,
        mean_wait: mean_std(&means).0,
        replicas: k,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generate::grid_scenario;
    use crate::mrp::{passenger_availability, solve_mrp};

    #[test]
    fn apportion_by_largest_remainder() {
        assert_eq!(apportion(10, &[1.0, 1.0, 1.0]), vec![4, 3, 3]);
        assert_eq!(apportion(7, &[0.5, 0.25, 0.25]), vec![3, 2, 2]);
        assert_eq!(apportion(0, &[1.0]), vec![0]);
    }

    #[test]
    fn dispatch_moves_surplus_to_deficit() {
        let t = Matrix::from_rows(vec![vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert!(rebalance_drivers_step(&[1, 1], &[1, 1], &[1, 1], &t).unwrap().is_empty());
        let o = rebalance_drivers_step(&[2, 0], &[1, 0], &[1, 1], &t).unwrap();
        assert_eq!(o, vec![DispatchOrder { from: 0, to: 1, count: 1 }]);
        // Surplus vehicles without an idle driver stay put.
        assert!(rebalance_drivers_step(&[2, 0], &[0, 0], &[1, 1], &t).unwrap().is_empty());
    }

    #[test]
    fn loss_sim_is_deterministic_and_close_to_theory() {
        let s = grid_scenario();
        let rp = solve_mrp(&s).unwrap().params;
        let fleet = FleetConfig::new(80, 20).unwrap();
        let cfg = SimConfig::loss(fleet, rp.clone(), 15_000, 4, 11);
        let a = run_loss_sim(&s, &cfg).unwrap();
        assert_eq!(a, run_loss_sim(&s, &cfg).unwrap());
        let theory = passenger_availability(&s, fleet, &rp).unwrap().a_pass;
        for i in 0..s.n {
            assert!((a.availability[i] - theory[i]).abs() < 0.05, "station {i}: {} vs {}", a.availability[i], theory[i]);
        }
    }

    #[test]
    fn large_fleet_is_almost_always_available() {
        let s = grid_scenario();
        let rp = solve_mrp(&s).unwrap().params;
        let m = run_loss_sim(&s, &SimConfig::loss(FleetConfig::new(2000, 500).unwrap(), rp, 6_000, 2, 3)).unwrap();
        assert!(m.availability.iter().all(|&a| a > 0.99), "{:?}", m.availability);
    }

    #[test]
    fn queueing_conserves_and_serves() {
        let s = grid_scenario();
        let mut cfg = SimConfig::queueing(FleetConfig::new(40, 10).unwrap(), 1.0, 600, 2, 5);
        cfg.policy.rebalance_period = 20;
        let m = run_queueing_sim(&s, &cfg).unwrap();
        assert_eq!(m.conservation_violations(), 0);
        for r in &m.replicas {
            assert!(r.served > 0);
            assert!(r.served + r.waiting_at_end <= r.arrivals);
        }
        // Empty bins are NaN, so compare the rendered form.
        assert_eq!(format!("{m:?}"), format!("{:?}", run_queueing_sim(&s, &cfg).unwrap()));
    }

    #[test]
    fn no_arrivals_no_waits() {
        let mut s = grid_scenario();
        s.lambda.iter_mut().for_each(|l| *l = 1e-300);
        let cfg = SimConfig::queueing(FleetConfig::new(20, 5).unwrap(), 1.0, 90, 1, 0);
        let m = run_queueing_sim(&s, &cfg).unwrap();
        assert_eq!(m.replicas[0].arrivals, 0);
        assert!(m.station_wait.iter().all(|w| w.is_nan()));
    }

    #[test]
    fn slope_of_a_line() {
        assert_eq!(ols_slope(&[0.0, 1.0, 2.0], &[1.0, 3.0, 5.0]), Some(2.0));
        assert_eq!(ols_slope(&[1.0], &[1.0]), None);
    }
}

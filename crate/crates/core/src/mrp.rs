//! Approximate rebalancing through two decoupled minimum-cost flow problems,
//! and availability seen by real passengers across both fleets.

use serde::Serialize;

use crate::error::{Error, FleetSystem, Result};
use crate::flow::{solve_min_cost_flow, FlowProblem};
use crate::jackson::StationModel;
use crate::matrix::Matrix;
use crate::network::build_network;
use crate::num::Scalar;
use crate::scenario::{split_demand, FleetConfig, RebalanceParams, Scenario, SplitParams};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MrpSolution<T: Scalar> {
    pub params: RebalanceParams<T>,
    /// Delegated customer flow between stations.
    pub beta: Matrix<T>,
    /// Virtual customer flow between stations.
    pub alpha: Matrix<T>,
    pub beta_cost: T,
    pub alpha_cost: T,
}

/// Net customer outflow `lambda_i - sum_j lambda_j p_ji` at each station.
pub fn demand_imbalance<T: Scalar>(s: &Scenario<T>) -> Vec<T> {
    (0..s.n)
        .map(|i| {
            let inflow = (0..s.n).filter(|&j| j != i).fold(T::zero(), |a, j| a + s.lambda[j] * s.p[(j, i)]);
            s.lambda[i] - inflow
        })
        .collect()
}

/// Flow problem for delegated customers: ship the imbalance, capped by demand per arc.
pub fn delegation_problem<T: Scalar>(s: &Scenario<T>) -> FlowProblem<T> {
    let mut fp = FlowProblem::new(demand_imbalance(s));
    for i in 0..s.n {
        for j in 0..s.n {
            let cap = s.lambda[i] * s.p[(i, j)];
            if i != j && cap > T::zero() {
                fp.add_arc(i, j, s.t[(i, j)], Some(cap));
            }
        }
    }
    fp
}

/// Flow problem for virtual customers: the opposite imbalance, uncapacitated.
pub fn virtual_problem<T: Scalar>(s: &Scenario<T>) -> FlowProblem<T> {
    let mut fp = FlowProblem::new(demand_imbalance(s).into_iter().map(|v| -v).collect());
    for i in 0..s.n {
        for j in 0..s.n {
            if i != j {
                fp.add_arc(i, j, s.t[(i, j)], None);
            }
        }
    }
    fp
}

fn flow_matrix<T: Scalar>(n: usize, fp: &FlowProblem<T>, flow: &[T]) -> Matrix<T> {
    let mut m = Matrix::square(n);
    for (a, &f) in fp.arcs.iter().zip(flow) {
        m[(a.from, a.to)] = f;
    }
    m
}

/// Turns per-arc rates into a total rate and a routing row, uniform when the total is 0.
pub fn rates_to_routing<T: Scalar>(flow: &Matrix<T>) -> (Vec<T>, Matrix<T>) {
    let n = flow.rows();
    let uniform = T::one() / T::from_usize_lossy(n - 1);
    let totals: Vec<T> = (0..n).map(|i| flow.row_sum(i)).collect();
    let routing = Matrix::from_fn(n, n, |i, j| {
        if i == j {
            T::zero()
        } else if totals[i] > T::zero() {
            flow[(i, j)] / totals[i]
        } else {
            uniform
        }
    });
    (totals, routing)
}

/// Solves the linear rebalancing problem and maps the two optimal flows back
/// to delegation and virtual-customer parameters.
pub fn solve_mrp<T: Scalar>(s: &Scenario<T>) -> Result<MrpSolution<T>> {
    let n = s.n;
    if n < 2 {
        return Err(Error::InvalidInput("need at least two stations".into()));
    }
    let beta_fp = delegation_problem(s);
    let alpha_fp = virtual_problem(s);
    let beta_sol = solve_min_cost_flow(&beta_fp)?;
    let alpha_sol = solve_min_cost_flow(&alpha_fp)?;
    let beta = flow_matrix(n, &beta_fp, &beta_sol.flow);
    let alpha = flow_matrix(n, &alpha_fp, &alpha_sol.flow);
    let (lambda_del, eta) = rates_to_routing(&beta);
    let (psi, xi) = rates_to_routing(&alpha);
    Ok(MrpSolution {
        params: RebalanceParams { lambda_del, psi, eta, xi },
        beta,
        alpha,
        beta_cost: beta_sol.cost,
        alpha_cost: alpha_sol.cost,
    })
}

/// Mean number of rebalancing vehicles on the road, `sum T_ij xi_ij psi_i`.
pub fn rebalancing_cost<T: Scalar>(s: &Scenario<T>, rp: &RebalanceParams<T>) -> T {
    let mut c = T::zero();
    for i in 0..s.n {
        for j in 0..s.n {
            if i != j {
                c = c + s.t[(i, j)] * rp.xi[(i, j)] * rp.psi[i];
            }
        }
    }
    c
}

/// Mean number of drivers busy, `sum T_ij (xi_ij psi_i + eta_ij lambda_del_i)`.
pub fn driver_cost<T: Scalar>(s: &Scenario<T>, rp: &RebalanceParams<T>) -> T {
    let mut c = rebalancing_cost(s, rp);
    for i in 0..s.n {
        for j in 0..s.n {
            if i != j {
                c = c + s.t[(i, j)] * rp.eta[(i, j)] * rp.lambda_del[i];
            }
        }
    }
    c
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PassengerMetrics<T> {
    /// Throughput of real and virtual customers over both fleets.
    pub lambda_tot: Vec<T>,
    /// Throughput of real customers only.
    pub lambda_pass: Vec<T>,
    /// Availability for real customers.
    pub a_pass: Vec<T>,
    pub a1: Vec<T>,
    pub a2: Vec<T>,
    pub throughput1: Vec<T>,
    pub throughput2: Vec<T>,
    pub q: Vec<T>,
}

impl<T: Scalar> PassengerMetrics<T> {
    pub fn min_availability(&self) -> T {
        self.a_pass.iter().fold(T::one(), |a, &b| a.min_of(b))
    }

    pub fn max_availability(&self) -> T {
        self.a_pass.iter().fold(T::zero(), |a, &b| a.max_of(b))
    }

    /// Largest deviation from the weighted-availability identity.
    pub fn identity_residual(&self) -> T {
        self.a_pass
            .iter()
            .enumerate()
            .map(|(i, &a)| (a - (self.a1[i] * self.q[i] + self.a2[i] * (T::one() - self.q[i]))).abs())
            .fold(T::zero(), |a, b| a.max_of(b))
    }
}

fn station_model<T: Scalar>(
    rates: &[T],
    routing: &Matrix<T>,
    s: &Scenario<T>,
    system: FleetSystem,
) -> Result<StationModel<T>> {
    let net = build_network(rates, routing, &s.t, 0)?;
    StationModel::from_network(&net).map_err(|e| match e {
        Error::ZeroRate { node } => Error::DegenerateStation { station: node, system },
        other => other,
    })
}

/// Both fleets of a scenario under fixed rebalancing parameters, ready to be
/// evaluated at any fleet size.
#[derive(Clone, Debug)]
pub struct FleetModel<T: Scalar> {
    pub lambda: Vec<T>,
    pub lambda_del: Vec<T>,
    pub split: SplitParams<T>,
    pub customer: StationModel<T>,
    /// `None` when no station has taxi demand.
    pub taxi: Option<StationModel<T>>,
}

impl<T: Scalar> FleetModel<T> {
    pub fn new(s: &Scenario<T>, rp: &RebalanceParams<T>) -> Result<Self> {
        let split = split_demand(s, rp)?;
        let customer = station_model(&split.lambda1, &split.p1, s, FleetSystem::CustomerDriven)?;
        let taxi = if split.lambda2.iter().all(|v| v.is_zero()) {
            None
        } else {
            Some(station_model(&split.lambda2, &split.p2, s, FleetSystem::Taxi)?)
        };
        Ok(Self { lambda: s.lambda.clone(), lambda_del: rp.lambda_del.clone(), split, customer, taxi })
    }

    /// Station availabilities and throughputs of one fleet at population `m`.
    fn fleet(model: Option<&StationModel<T>>, n: usize, m: usize) -> (Vec<T>, Vec<T>) {
        match model {
            Some(sm) if m > 0 => {
                let x = sm.throughput_scale(m);
                (sm.gamma.iter().map(|&g| g * x).collect(), sm.pi.iter().map(|&p| p * x).collect())
            }
            _ => (vec![T::zero(); n], vec![T::zero(); n]),
        }
    }

    pub fn metrics(&self, fc: FleetConfig) -> PassengerMetrics<T> {
        let n = self.lambda.len();
        let (a1, l1) = Self::fleet(Some(&self.customer), n, fc.customer_driven());
        let (a2, l2) = Self::fleet(self.taxi.as_ref(), n, fc.m_d);
        self.combine(a1, l1, a2, l2)
    }

    pub(crate) fn combine(&self, a1: Vec<T>, l1: Vec<T>, a2: Vec<T>, l2: Vec<T>) -> PassengerMetrics<T> {
        let n = self.lambda.len();
        let mut lambda_tot = Vec::with_capacity(n);
        let mut lambda_pass = Vec::with_capacity(n);
        let mut a_pass = Vec::with_capacity(n);
        for i in 0..n {
            lambda_tot.push(l1[i] + l2[i]);
            let lam2 = self.split.lambda2[i];
            let real_share = if lam2 > T::zero() { self.lambda_del[i] / lam2 } else { T::zero() };
            let lp = l1[i] + real_share * l2[i];
            lambda_pass.push(lp);
            a_pass.push(lp / self.lambda[i]);
        }
        PassengerMetrics {
            lambda_tot,
            lambda_pass,
            a_pass,
            a1,
            a2,
            throughput1: l1,
            throughput2: l2,
            q: self.split.q.clone(),
        }
    }

    /// Passenger availability at every `(m_v, m_d)` on a fixed vehicle-to-driver
    /// ratio is cheap to sweep: both fleets' MVA curves are computed once.
    pub fn availability_curves(&self, max_customer: usize, max_taxi: usize) -> (Vec<Vec<T>>, Vec<Vec<T>>) {
        let n = self.lambda.len();
        let c1 = self.customer.availability_curve(max_customer);
        let c2 = match &self.taxi {
            Some(t) => t.availability_curve(max_taxi),
            None => vec![vec![T::zero(); n]; max_taxi + 1],
        };
        (c1, c2)
    }

    /// Passenger availability from per-fleet availabilities.
    pub fn weighted_availability(&self, a1: &[T], a2: &[T]) -> Vec<T> {
        (0..self.lambda.len())
            .map(|i| a1[i] * self.split.q[i] + a2[i] * (T::one() - self.split.q[i]))
            .collect()
    }
}

/// Availability for real passengers with `m_v - m_d` customer-driven vehicles and `m_d` taxis.
pub fn passenger_availability<T: Scalar>(
    s: &Scenario<T>,
    fc: FleetConfig,
    rp: &RebalanceParams<T>,
) -> Result<PassengerMetrics<T>> {
    Ok(FleetModel::new(s, rp)?.metrics(fc))
}

/// Largest relative spread of station utilizations in each fleet, ignoring
/// flagged stations. Zero means that fleet is balanced.
pub fn utilization_spread<T: Scalar>(s: &Scenario<T>, rp: &RebalanceParams<T>) -> Result<(T, Option<T>)> {
    let fm = FleetModel::new(s, rp)?;
    let spread = |g: &[T], system: FleetSystem| {
        let vals: Vec<T> =
            (0..g.len()).filter(|&i| !fm.split.is_flagged(i, system)).map(|i| g[i]).collect();
        let hi = vals.iter().fold(T::zero(), |a, &b| a.max_of(b));
        let lo = vals.iter().fold(hi, |a, &b| a.min_of(b));
        if hi.is_zero() {
            T::zero()
        } else {
            (hi - lo) / hi
        }
    };
    let s1 = spread(&fm.customer.gamma, FleetSystem::CustomerDriven);
    let s2 = fm.taxi.as_ref().map(|t| spread(&t.gamma, FleetSystem::Taxi));
    Ok((s1, s2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::Units;
    use num_rational::Rational64;

    fn r(a: i64) -> Rational64 {
        Rational64::from_integer(a)
    }

    fn two_station_exact() -> Scenario<Rational64> {
        Scenario {
            n: 2,
            lambda: vec![r(2), r(1)],
            p: Matrix::from_rows(vec![vec![r(0), r(1)], vec![r(1), r(0)]]).unwrap(),
            t: Matrix::from_rows(vec![vec![r(0), r(3)], vec![r(3), r(0)]]).unwrap(),
            coords: None,
            units: Units::default(),
        }
    }

    #[test]
    fn two_station_hand_solution() {
        let sol = solve_mrp(&two_station_exact()).unwrap();
        assert_eq!(sol.beta[(0, 1)], r(1));
        assert_eq!(sol.alpha[(1, 0)], r(1));
        assert_eq!(sol.params.lambda_del, vec![r(1), r(0)]);
        assert_eq!(sol.params.psi, vec![r(0), r(1)]);
        assert_eq!(sol.beta_cost, r(3));
        assert_eq!(sol.alpha_cost, r(3));
        let (s1, s2) = utilization_spread(&two_station_exact(), &sol.params).unwrap();
        assert_eq!(s1, r(0));
        assert_eq!(s2, Some(r(0)));
    }

    #[test]
    fn balanced_scenario_needs_no_rebalancing() {
        let s = Scenario {
            n: 3,
            lambda: vec![1.0; 3],
            p: Matrix::from_fn(3, 3, |i, j| if i == j { 0.0 } else { 0.5 }),
            t: Matrix::from_fn(3, 3, |i, j| if i == j { 0.0 } else { 2.0 }),
            coords: None,
            units: Units::default(),
        };
        let sol = solve_mrp(&s).unwrap();
        assert!(sol.beta.as_slice().iter().all(|&v| v == 0.0));
        assert!(sol.alpha.as_slice().iter().all(|&v| v == 0.0));
        assert_eq!(sol.params, RebalanceParams::idle(3));
    }

    #[test]
    fn single_system_collapse_without_taxis() {
        let s = Scenario {
            n: 3,
            lambda: vec![1.0; 3],
            p: Matrix::from_fn(3, 3, |i, j| if i == j { 0.0 } else { 0.5 }),
            t: Matrix::from_fn(3, 3, |i, j| if i == j { 0.0 } else { 2.0 }),
            coords: None,
            units: Units::default(),
        };
        let rp = RebalanceParams::idle(3);
        let fm = FleetModel::new(&s, &rp).unwrap();
        assert!(fm.taxi.is_none());
        let pm = fm.metrics(FleetConfig::new(12, 0).unwrap());
        let a1: Vec<f64> = fm.customer.availability(12);
        for i in 0..3 {
            assert!((pm.a_pass[i] - a1[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn identity_holds_on_hand_example() {
        let s = two_station_exact();
        let sol = solve_mrp(&s).unwrap();
        let pm = passenger_availability(&s, FleetConfig::new(5, 2).unwrap(), &sol.params).unwrap();
        assert_eq!(pm.identity_residual(), r(0));
        assert_eq!(pm.q, vec![Rational64::new(1, 2), r(1)]);
    }
}

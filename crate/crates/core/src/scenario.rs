//! Demand scenarios, fleet configuration and the split of demand between the
//! customer-driven fleet and the taxi fleet.

use std::collections::VecDeque;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, FleetSystem, Result};
use crate::matrix::Matrix;
use crate::num::Scalar;

/// Tolerance on the row sums of a scenario's routing matrix.
pub const SCENARIO_ROW_TOL: f64 = 1e-12;
/// Tolerance on derived row sums and reconstruction checks.
pub const CHECK_TOL: f64 = 1e-9;

/// Customer demand between `n` stations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario<T: Scalar> {
    pub n: usize,
    /// Arrival rate at each station.
    pub lambda: Vec<T>,
    /// Destination probabilities, row `i` for customers departing `i`.
    pub p: Matrix<T>,
    /// Mean travel times.
    pub t: Matrix<T>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coords: Option<Vec<[f64; 2]>>,
    #[serde(default)]
    pub units: Units,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Units {
    pub time: String,
    pub rate: String,
}

impl Default for Units {
    fn default() -> Self {
        Self { time: "min".into(), rate: "1/min".into() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FleetConfig {
    pub m_v: usize,
    pub m_d: usize,
}

impl FleetConfig {
    pub fn new(m_v: usize, m_d: usize) -> Result<Self> {
        if m_v <= m_d {
            return Err(Error::InvalidInput(format!(
                "fleet needs more vehicles than drivers (m_v={m_v}, m_d={m_d})"
            )));
        }
        Ok(Self { m_v, m_d })
    }

    /// Vehicles left for customers to drive themselves.
    pub fn customer_driven(&self) -> usize {
        self.m_v - self.m_d
    }
}

/// Open-loop control of both fleets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RebalanceParams<T: Scalar> {
    /// Rate of real customers handed to taxis.
    pub lambda_del: Vec<T>,
    /// Rate of virtual customers generated for taxis.
    pub psi: Vec<T>,
    /// Destinations of delegated customers.
    pub eta: Matrix<T>,
    /// Destinations of virtual customers.
    pub xi: Matrix<T>,
}

impl<T: Scalar> RebalanceParams<T> {
    /// No delegation and no virtual customers; routing rows uniform.
    pub fn idle(n: usize) -> Self {
        Self {
            lambda_del: vec![T::zero(); n],
            psi: vec![T::zero(); n],
            eta: uniform_routing(n),
            xi: uniform_routing(n),
        }
    }

    pub fn validate(&self, s: &Scenario<T>) -> Result<()> {
        let n = s.n;
        if self.lambda_del.len() != n
            || self.psi.len() != n
            || self.eta.rows() != n
            || self.eta.cols() != n
            || self.xi.rows() != n
            || self.xi.cols() != n
        {
            return Err(Error::InvalidInput("rebalance parameters do not match station count".into()));
        }
        let tol = T::from_f64_lossy(CHECK_TOL);
        for i in 0..n {
            if self.lambda_del[i] < T::zero() || self.psi[i] < T::zero() {
                return Err(Error::InvalidInput(format!("negative rebalancing rate at station {i}")));
            }
            for (name, m) in [("eta", &self.eta), ("xi", &self.xi)] {
                if !m[(i, i)].is_zero() {
                    return Err(Error::InvalidInput(format!("{name}[{i}][{i}] must be zero")));
                }
                if m.row(i).iter().any(|&v| v < T::zero()) {
                    return Err(Error::InvalidInput(format!("{name} row {i} has negative entries")));
                }
                if (m.row_sum(i) - T::one()).abs() > tol {
                    return Err(Error::InvalidInput(format!("{name} row {i} does not sum to 1")));
                }
            }
        }
        Ok(())
    }

    /// Taxi routing rates `lambda_del_i * eta_ij`.
    pub fn delegated_flow(&self) -> Matrix<T> {
        let n = self.lambda_del.len();
        Matrix::from_fn(n, n, |i, j| self.lambda_del[i] * self.eta[(i, j)])
    }

    /// Virtual routing rates `psi_i * xi_ij`.
    pub fn virtual_flow(&self) -> Matrix<T> {
        let n = self.psi.len();
        Matrix::from_fn(n, n, |i, j| self.psi[i] * self.xi[(i, j)])
    }
}

/// A station excluded from one fleet because its service rate is zero.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StationFlag {
    pub station: usize,
    pub system: FleetSystem,
}

/// Per-fleet arrival rates and routing obtained by splitting demand.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitParams<T: Scalar> {
    /// Fraction of customers kept by the customer-driven fleet.
    pub q: Vec<T>,
    pub p1: Matrix<T>,
    pub lambda1: Vec<T>,
    pub lambda2: Vec<T>,
    /// Fraction of taxi arrivals that are virtual.
    pub p_frac: Vec<T>,
    pub p2: Matrix<T>,
    /// Stations with zero rate in one of the fleets.
    pub flags: Vec<StationFlag>,
}

impl<T: Scalar> SplitParams<T> {
    pub fn is_flagged(&self, station: usize, system: FleetSystem) -> bool {
        self.flags.iter().any(|f| f.station == station && f.system == system)
    }

    /// Fails on the first flagged station, for callers that need both fleets analyzable.
    pub fn require_nondegenerate(&self) -> Result<()> {
        match self.flags.first() {
            Some(f) => Err(Error::DegenerateStation { station: f.station, system: f.system }),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ViolationKind {
    Shape,
    NonPositiveRate,
    NegativeProbability,
    SelfLoop,
    RowSum,
    NonPositiveTravelTime,
    Irreducibility,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub field: &'static str,
    pub index: Option<(usize, Option<usize>)>,
    pub kind: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.index {
            Some((i, Some(j))) => write!(f, "{}[{i}][{j}]: {:?}", self.field, self.kind),
            Some((i, None)) => write!(f, "{}[{i}]: {:?}", self.field, self.kind),
            None => write!(f, "{}: {:?}", self.field, self.kind),
        }
    }
}

/// Lists every violated scenario invariant. An empty list means the scenario is usable.
pub fn validate_scenario<T: Scalar>(s: &Scenario<T>) -> Vec<Violation> {
    let mut out = Vec::new();
    let n = s.n;
    let shape_ok = n >= 2
        && s.lambda.len() == n
        && s.p.rows() == n
        && s.p.cols() == n
        && s.t.rows() == n
        && s.t.cols() == n
        && s.coords.as_ref().is_none_or(|c| c.len() == n);
    if !shape_ok {
        out.push(Violation { field: "n", index: None, kind: ViolationKind::Shape });
        return out;
    }
    let tol = T::from_f64_lossy(SCENARIO_ROW_TOL).max_of(T::tolerance());
    for i in 0..n {
        if s.lambda[i] <= T::zero() {
            out.push(Violation { field: "lambda", index: Some((i, None)), kind: ViolationKind::NonPositiveRate });
        }
        for j in 0..n {
            let pij = s.p[(i, j)];
            if pij < T::zero() {
                out.push(Violation {
                    field: "p",
                    index: Some((i, Some(j))),
                    kind: ViolationKind::NegativeProbability,
                });
            }
            if i == j && !pij.is_zero() {
                out.push(Violation { field: "p", index: Some((i, Some(j))), kind: ViolationKind::SelfLoop });
            }
            if i != j && s.t[(i, j)] <= T::zero() {
                out.push(Violation {
                    field: "t",
                    index: Some((i, Some(j))),
                    kind: ViolationKind::NonPositiveTravelTime,
                });
            }
        }
        if (s.p.row_sum(i) - T::one()).abs() > tol {
            out.push(Violation { field: "p", index: Some((i, None)), kind: ViolationKind::RowSum });
        }
    }
    if !is_irreducible(&s.p) {
        out.push(Violation { field: "p", index: None, kind: ViolationKind::Irreducibility });
    }
    out
}

/// Strong connectivity of the support of a square matrix.
pub fn is_irreducible<T: Scalar>(p: &Matrix<T>) -> bool {
    let n = p.rows();
    if n == 0 {
        return false;
    }
    let reach = |forward: bool| {
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        while let Some(u) = queue.pop_front() {
            for v in 0..n {
                let w = if forward { p[(u, v)] } else { p[(v, u)] };
                if w > T::zero() && !seen[v] {
                    seen[v] = true;
                    queue.push_back(v);
                }
            }
        }
        seen.into_iter().all(|b| b)
    };
    reach(true) && reach(false)
}

/// Routing matrix with `1/(n-1)` off the diagonal.
pub fn uniform_routing<T: Scalar>(n: usize) -> Matrix<T> {
    if n < 2 {
        return Matrix::square(n);
    }
    let w = T::one() / T::from_usize_lossy(n - 1);
    Matrix::from_fn(n, n, |i, j| if i == j { T::zero() } else { w })
}

/// Splits demand between the customer-driven fleet and the taxi fleet.
///
/// Stations that hand all of their customers to taxis keep a uniform routing
/// row in the customer-driven fleet and are flagged; likewise stations whose
/// taxi arrival rate is zero are flagged for the taxi fleet and inherit the
/// delegated routing row.
pub fn split_demand<T: Scalar>(s: &Scenario<T>, rp: &RebalanceParams<T>) -> Result<SplitParams<T>> {
    rp.validate(s)?;
    let n = s.n;
    let tol = T::from_f64_lossy(CHECK_TOL);
    let uniform = uniform_routing::<T>(n);
    let mut q = Vec::with_capacity(n);
    let mut lambda1 = Vec::with_capacity(n);
    let mut lambda2 = Vec::with_capacity(n);
    let mut p_frac = Vec::with_capacity(n);
    let mut p1 = Matrix::square(n);
    let mut p2 = Matrix::square(n);
    let mut flags = Vec::new();

    for i in 0..n {
        let lam = s.lambda[i];
        let del = rp.lambda_del[i];
        if del > lam + tol * lam.max_of(T::one()) {
            return Err(Error::InfeasibleSplit { from: i, to: i, residual: (lam - del).to_f64_lossy() });
        }
        for j in 0..n {
            let residual = lam * s.p[(i, j)] - del * rp.eta[(i, j)];
            if residual < -tol {
                return Err(Error::InfeasibleSplit { from: i, to: j, residual: residual.to_f64_lossy() });
            }
        }
        let mut l1 = (lam - del).max_of(T::zero());
        if l1.near_zero(lam) {
            l1 = T::zero();
        }
        lambda1.push(l1);
        q.push(l1 / lam);
        if l1.is_zero() {
            flags.push(StationFlag { station: i, system: FleetSystem::CustomerDriven });
            p1.row_mut(i).copy_from_slice(uniform.row(i));
        } else {
            // (1/q) p_ij - ((1-q)/q) eta_ij, written over the common denominator.
            for j in 0..n {
                let v = (lam * s.p[(i, j)] - del * rp.eta[(i, j)]) / l1;
                p1[(i, j)] = v.max_of(T::zero());
            }
        }

        let l2 = del + rp.psi[i];
        lambda2.push(l2);
        if l2 > T::zero() {
            let pf = rp.psi[i] / l2;
            p_frac.push(pf);
            for j in 0..n {
                p2[(i, j)] = pf * rp.xi[(i, j)] + (T::one() - pf) * rp.eta[(i, j)];
            }
        } else {
            p_frac.push(T::zero());
            flags.push(StationFlag { station: i, system: FleetSystem::Taxi });
            p2.row_mut(i).copy_from_slice(rp.eta.row(i));
        }
    }

    Ok(SplitParams { q, p1, lambda1, lambda2, p_frac, p2, flags })
}

impl Scenario<f64> {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let sc: Self = serde_json::from_str(s)?;
        Ok(sc)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }

    /// Loads and rejects scenarios that violate any invariant.
    pub fn load_validated(path: impl AsRef<Path>) -> Result<Self> {
        let sc = Self::load(path)?;
        let v = validate_scenario(&sc);
        if !v.is_empty() {
            let msg: Vec<String> = v.iter().map(ToString::to_string).collect();
            return Err(Error::InvalidInput(format!("scenario invalid: {}", msg.join(", "))));
        }
        Ok(sc)
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json_string()? + "\n")?;
        Ok(())
    }
}

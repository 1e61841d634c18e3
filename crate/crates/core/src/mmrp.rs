//! Exact passenger-availability balancing with mean value analysis in the loop.
//!
//! The decision variables are the delegated flow `beta_ij = lambda_del_i eta_ij`
//! and the virtual flow `alpha_ij = psi_i xi_ij`. Balance of the customer-driven
//! fleet is the linear flow-conservation constraint on `beta`, which is
//! enforced exactly by projection. Equal passenger availability is handled by
//! an augmented Lagrangian whose subproblems are solved by spectral projected
//! gradient.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::solve_dense;
use crate::matrix::Matrix;
use crate::mrp::{demand_imbalance, rates_to_routing, solve_mrp, FleetModel};
use crate::scenario::{FleetConfig, RebalanceParams, Scenario};

/// Delegated flow on an arc stays this fraction below `lambda_i p_ij`.
const CAP_SHRINK: f64 = 1e-9;
/// Relative conservation residual left to the final exact projection.
const BALANCE_TOL: f64 = 1e-5;
const MAX_PENALTY: f64 = 1e6;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MmrpConfig {
    /// Weight on the taxi fleet's availability.
    pub c: f64,
    pub fleet: FleetConfig,
    /// Starting point; the linear rebalancing solution when `None`.
    pub init: Option<RebalanceParams<f64>>,
    /// Projected-gradient iterations summed over all outer rounds.
    pub max_iter: usize,
    pub max_outer: usize,
    pub eps_feas: f64,
    pub eps_a: f64,
    /// Lower bound on every virtual flow, relative to the mean demand rate.
    pub alpha_floor: f64,
}

impl MmrpConfig {
    pub fn new(c: f64, fleet: FleetConfig) -> Self {
        Self { c, fleet, init: None, max_iter: 20_000, max_outer: 40, eps_feas: 1e-6, eps_a: 1e-3, alpha_floor: 1e-6 }
    }

    fn check(&self) -> Result<()> {
        if !(self.c >= 0.0 && self.c.is_finite()) {
            return Err(Error::InvalidInput(format!("availability weight {} must be >= 0", self.c)));
        }
        if !(self.eps_feas > 0.0 && self.eps_a > 0.0 && self.alpha_floor > 0.0) {
            return Err(Error::InvalidInput("tolerances must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MmrpStatus {
    Converged,
    /// Iteration budget exhausted or line search stalled before reaching tolerance.
    NoProgress,
    /// The optimizer's final point was worse than its start, so the start is returned.
    KeptStart,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MmrpResiduals {
    /// `max_i A_pass_i - min_i A_pass_i`.
    pub availability_spread: f64,
    /// Relative spread of customer-driven utilizations.
    pub utilization_spread: f64,
    /// Largest violation of `lambda_del_i eta_ij <= lambda_i p_ij` or nonnegativity.
    pub bound_violation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceEntry {
    pub outer: usize,
    pub iterations: usize,
    pub objective: f64,
    pub max_violation: f64,
    pub penalty: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MmrpResult {
    pub params: RebalanceParams<f64>,
    pub beta: Matrix<f64>,
    pub alpha: Matrix<f64>,
    pub a_pass: Vec<f64>,
    /// Mean passenger availability; all stations agree with it up to `eps_a`.
    pub a_star: f64,
    pub objective: f64,
    pub rebalancing_cost: f64,
    pub residuals: MmrpResiduals,
    pub iterations: usize,
    pub status: MmrpStatus,
    pub trace: Vec<TraceEntry>,
}

impl MmrpResult {
    pub fn converged(&self) -> bool {
        self.status != MmrpStatus::NoProgress
    }

    pub fn feasible(&self, eps_a: f64, eps_feas: f64) -> bool {
        self.residuals.availability_spread <= eps_a
            && self.residuals.utilization_spread <= eps_feas
            && self.residuals.bound_violation <= eps_feas
    }
}

/// Euclidean projection onto `{ 0 <= y <= u, B y = b }` for a node-arc incidence `B`.
///
/// Solved in the dual over node potentials with a damped semismooth Newton
/// method; the dual is concave and piecewise quadratic.
#[derive(Clone, Debug)]
pub struct FlowPolytope {
    pub n: usize,
    pub arcs: Vec<(usize, usize)>,
    pub upper: Vec<f64>,
    pub divergence: Vec<f64>,
}

impl FlowPolytope {
    fn primal(&self, x: &[f64], phi: &[f64], y: &mut [f64]) {
        for (k, &(i, j)) in self.arcs.iter().enumerate() {
            y[k] = (x[k] - (phi[i] - phi[j])).clamp(0.0, self.upper[k]);
        }
    }

    fn residual(&self, y: &[f64]) -> Vec<f64> {
        let mut r: Vec<f64> = self.divergence.iter().map(|v| -v).collect();
        for (k, &(i, j)) in self.arcs.iter().enumerate() {
            r[i] += y[k];
            r[j] -= y[k];
        }
        r
    }

    fn dual(&self, x: &[f64], phi: &[f64], y: &mut [f64]) -> (f64, Vec<f64>) {
        self.primal(x, phi, y);
        let r = self.residual(y);
        let dist: f64 = y.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
        let lin: f64 = phi.iter().zip(&r).map(|(p, v)| p * v).sum();
        (0.5 * dist + lin, r)
    }

    /// Net outflow residual of node `i` when its potential is `z`.
    fn node_residual(&self, x: &[f64], phi: &[f64], i: usize, z: f64) -> f64 {
        let mut r = -self.divergence[i];
        for (k, &(a, b)) in self.arcs.iter().enumerate() {
            if a == i {
                r += (x[k] - z + phi[b]).clamp(0.0, self.upper[k]);
            } else if b == i {
                r -= (x[k] - phi[a] + z).clamp(0.0, self.upper[k]);
            }
        }
        r
    }

    /// Exact maximization of the dual over one potential: the node residual is
    /// nonincreasing and piecewise linear in it.
    fn relax_node(&self, x: &[f64], phi: &mut [f64], i: usize) -> Result<()> {
        let mut brk = Vec::new();
        for (k, &(a, b)) in self.arcs.iter().enumerate() {
            if a == i {
                let c = x[k] + phi[b];
                brk.extend([c - self.upper[k], c]);
            } else if b == i {
                let d = x[k] - phi[a];
                brk.extend([-d, self.upper[k] - d]);
            }
        }
        brk.sort_by(f64::total_cmp);
        brk.dedup();
        let f = |z: f64| self.node_residual(x, phi, i, z);
        let (lo, hi) = (brk[0], brk[brk.len() - 1]);
        if f(lo) < 0.0 || f(hi) > 0.0 {
            return Err(Error::InfeasibleStart(format!("station {i} cannot balance its delegated flow")));
        }
        // Last breakpoint with a nonnegative residual.
        let (mut a, mut b) = (0, brk.len() - 1);
        while b - a > 1 {
            let m = (a + b) / 2;
            if f(brk[m]) >= 0.0 {
                a = m;
            } else {
                b = m;
            }
        }
        let (za, zb) = (brk[a], brk[b]);
        let (fa, fb) = (f(za), f(zb));
        phi[i] = if fa <= 0.0 { za } else if fa - fb > 0.0 { za + (zb - za) * fa / (fa - fb) } else { za };
        Ok(())
    }

    /// Newton direction on the potentials: the Laplacian of the arcs strictly
    /// inside their bounds, solved per connected component with its first
    /// node held fixed.
    fn newton_direction(&self, x: &[f64], phi: &[f64], r: &[f64]) -> Option<(Vec<f64>, f64)> {
        let n = self.n;
        let mut comp: Vec<usize> = (0..n).collect();
        fn root(c: &mut [usize], mut v: usize) -> usize {
            while c[v] != v {
                c[v] = c[c[v]];
                v = c[v];
            }
            v
        }
        let mut free = Vec::new();
        for (k, &(i, j)) in self.arcs.iter().enumerate() {
            let z = x[k] - (phi[i] - phi[j]);
            if z > 0.0 && z < self.upper[k] {
                free.push((i, j));
                let (a, b) = (root(&mut comp, i), root(&mut comp, j));
                if a != b {
                    comp[a.max(b)] = a.min(b);
                }
            }
        }
        let roots: Vec<usize> = (0..n).map(|v| root(&mut comp, v)).collect();
        // Unknowns are the nodes that are not the lowest node of their component.
        let mut index = vec![usize::MAX; n];
        let mut unknowns = Vec::new();
        for v in 0..n {
            if roots[v] != v {
                index[v] = unknowns.len();
                unknowns.push(v);
            }
        }
        if unknowns.is_empty() {
            return None;
        }
        let mut lap = Matrix::<f64>::square(unknowns.len());
        for &(i, j) in &free {
            let (a, b) = (index[i], index[j]);
            if a != usize::MAX {
                lap[(a, a)] += 1.0;
            }
            if b != usize::MAX {
                lap[(b, b)] += 1.0;
            }
            if a != usize::MAX && b != usize::MAX {
                lap[(a, b)] -= 1.0;
                lap[(b, a)] -= 1.0;
            }
        }
        let rhs: Vec<f64> = unknowns.iter().map(|&v| r[v]).collect();
        let sol = solve_dense(lap, rhs)?;
        let mut dir = vec![0.0; n];
        let mut slope = 0.0;
        for (k, &v) in unknowns.iter().enumerate() {
            dir[v] = sol[k];
            slope += sol[k] * r[v];
        }
        (slope > 0.0).then_some((dir, slope))
    }

    /// Projects `x`; `phi` carries dual potentials between calls as a warm start.
    ///
    /// Alternates exact coordinate ascent sweeps with a Newton step on the
    /// potentials; the Newton step finishes in one move once the set of arcs
    /// strictly inside their bounds is right.
    pub fn project(&self, x: &[f64], phi: &mut [f64]) -> Result<Vec<f64>> {
        let n = self.n;
        let scale = self.divergence.iter().chain(x).fold(1.0f64, |m, v| m.max(v.abs()));
        let tol = 1e-12 * scale;
        let mut y = vec![0.0; x.len()];
        let mut trial = vec![0.0; x.len()];
        let mut cand = phi.to_vec();
        for _ in 0..500 {
            let (theta, r) = self.dual(x, phi, &mut y);
            if r.iter().all(|v| v.abs() <= tol) {
                return Ok(y);
            }
            if let Some((dir, slope)) = self.newton_direction(x, phi, &r) {
                let r_max = r.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                let mut t = 1.0;
                while t > 1e-6 {
                    for d in 0..n {
                        cand[d] = phi[d] + t * dir[d];
                    }
                    let (th, rn) = self.dual(x, &cand, &mut trial);
                    // Close to the solution the dual gain is below rounding,
                    // so a halved residual also counts as progress.
                    let rn_max = rn.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                    if th >= theta + 1e-4 * t * slope || rn_max <= 0.5 * r_max {
                        phi.copy_from_slice(&cand);
                        break;
                    }
                    t *= 0.5;
                }
                let (_, r) = self.dual(x, phi, &mut y);
                if r.iter().all(|v| v.abs() <= tol) {
                    return Ok(y);
                }
            }
            for i in 0..n {
                self.relax_node(x, phi, i)?;
            }
        }
        let (_, r) = self.dual(x, phi, &mut y);
        if r.iter().all(|v| v.abs() <= 1e3 * tol) {
            Ok(y)
        } else {
            Err(Error::InfeasibleStart("delegated flow bounds admit no balanced flow".into()))
        }
    }
}

/// MVA throughput scale for `n` identical unit-utilization stations plus a road
/// load, with its derivative in the road load.
fn uniform_mva(n: usize, road: f64, m: usize) -> (f64, f64) {
    let nf = n as f64;
    let (mut l, mut dl) = (0.0, 0.0);
    let (mut x, mut dx) = (0.0, 0.0);
    for k in 1..=m {
        let kf = k as f64;
        let d = road + nf * (1.0 + l);
        let dd = 1.0 + nf * dl;
        x = kf / d;
        dx = -kf * dd / (d * d);
        let nl = (1.0 + l) * x;
        dl = dl * x + (1.0 + l) * dx;
        l = nl;
    }
    (x, dx)
}

/// MVA throughput scale with its gradient in each station utilization and in
/// the road load (last entry).
fn mva_with_tangents(gamma: &[f64], road: f64, m: usize) -> (f64, Vec<f64>) {
    let n = gamma.len();
    let mut l = vec![0.0; n];
    let mut dl = Matrix::<f64>::zeros(n + 1, n);
    let mut x = 0.0;
    let mut dx = vec![0.0; n + 1];
    for k in 1..=m {
        let kf = k as f64;
        let mut d = road;
        for i in 0..n {
            d += gamma[i] * (1.0 + l[i]);
        }
        x = kf / d;
        for (dir, dxd) in dx.iter_mut().enumerate() {
            let mut dd = if dir == n { 1.0 } else { 1.0 + l[dir] };
            let row = dl.row(dir);
            for i in 0..n {
                dd += gamma[i] * row[i];
            }
            *dxd = -kf * dd / (d * d);
        }
        for dir in 0..=n {
            let row = dl.row_mut(dir);
            for i in 0..n {
                let own = if dir == i { (1.0 + l[i]) * x } else { 0.0 };
                row[i] = own + gamma[i] * (row[i] * x + (1.0 + l[i]) * dx[dir]);
            }
        }
        for i in 0..n {
            l[i] = gamma[i] * (1.0 + l[i]) * x;
        }
    }
    (x, dx)
}

/// Both fleets expressed directly in flow variables. Agrees with the
/// parameter-space model whenever the delegated flow is balanced.
#[derive(Clone, Debug)]
pub struct FlowModel {
    pub n: usize,
    pub lambda: Vec<f64>,
    pub t: Matrix<f64>,
    pub beta_arcs: Vec<(usize, usize)>,
    pub alpha_arcs: Vec<(usize, usize)>,
    pub polytope: FlowPolytope,
    pub alpha_floor: f64,
    pub flow_scale: f64,
    /// Total customer travel load `sum lambda_i p_ij T_ij`.
    pub demand_load: f64,
    pub m1: usize,
    pub m2: usize,
    pub c: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowEval {
    /// Flow-conservation residual of the delegated flow at stations `1..n`,
    /// relative to the mean demand rate.
    pub balance: Vec<f64>,
    pub a1: f64,
    pub a2: Vec<f64>,
    pub a_pass: Vec<f64>,
    pub cost: f64,
    pub objective: f64,
}

struct Internals {
    ev: FlowEval,
    f: Matrix<f64>,
    gamma: Vec<f64>,
    k: Matrix<f64>,
    share: Vec<f64>,
    x2: f64,
    dx2: Vec<f64>,
    da1: f64,
}

impl FlowModel {
    pub fn new(s: &Scenario<f64>, fleet: FleetConfig, c: f64, alpha_floor: f64) -> Self {
        let n = s.n;
        let mut beta_arcs = Vec::new();
        let mut upper = Vec::new();
        let mut alpha_arcs = Vec::new();
        let mut demand_load = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                alpha_arcs.push((i, j));
                let cap = s.lambda[i] * s.p[(i, j)];
                demand_load += cap * s.t[(i, j)];
                if cap > 0.0 {
                    beta_arcs.push((i, j));
                    upper.push(cap * (1.0 - CAP_SHRINK));
                }
            }
        }
        let mean_lambda = s.lambda.iter().sum::<f64>() / n as f64;
        Self {
            n,
            lambda: s.lambda.clone(),
            t: s.t.clone(),
            polytope: FlowPolytope { n, arcs: beta_arcs.clone(), upper, divergence: demand_imbalance(s) },
            beta_arcs,
            alpha_arcs,
            alpha_floor: alpha_floor * mean_lambda,
            flow_scale: mean_lambda,
            demand_load,
            m1: fleet.customer_driven(),
            m2: fleet.m_d,
            c,
        }
    }

    pub fn dim(&self) -> usize {
        self.beta_arcs.len() + self.alpha_arcs.len()
    }

    pub fn split<'a>(&self, x: &'a [f64]) -> (&'a [f64], &'a [f64]) {
        x.split_at(self.beta_arcs.len())
    }

    pub fn flows(&self, x: &[f64]) -> (Matrix<f64>, Matrix<f64>) {
        let (b, a) = self.split(x);
        let mut beta = Matrix::square(self.n);
        let mut alpha = Matrix::square(self.n);
        for (&(i, j), &v) in self.beta_arcs.iter().zip(b) {
            beta[(i, j)] = v;
        }
        for (&(i, j), &v) in self.alpha_arcs.iter().zip(a) {
            alpha[(i, j)] = v;
        }
        (beta, alpha)
    }

    pub fn pack(&self, beta: &Matrix<f64>, alpha: &Matrix<f64>) -> Vec<f64> {
        let mut x: Vec<f64> = self.beta_arcs.iter().map(|&(i, j)| beta[(i, j)]).collect();
        x.extend(self.alpha_arcs.iter().map(|&(i, j)| alpha[(i, j)]));
        x
    }

    /// Number of multipliers: availability differences, then flow balance.
    pub fn n_constraints(&self) -> usize {
        2 * (self.n - 1)
    }

    /// Projection onto the simple bounds.
    pub fn clip(&self, x: &[f64]) -> Vec<f64> {
        let nb = self.beta_arcs.len();
        x.iter()
            .enumerate()
            .map(|(k, &v)| if k < nb { v.clamp(0.0, self.polytope.upper[k]) } else { v.max(self.alpha_floor) })
            .collect()
    }

    /// Projection onto the bounds and exact flow conservation of the delegated flow.
    pub fn project(&self, x: &[f64], phi: &mut [f64]) -> Result<Vec<f64>> {
        let (b, a) = self.split(x);
        let mut y = self.polytope.project(b, phi)?;
        y.extend(a.iter().map(|&v| v.max(self.alpha_floor)));
        Ok(y)
    }

    pub fn params(&self, x: &[f64]) -> RebalanceParams<f64> {
        let (mut beta, alpha) = self.flows(x);
        // Rows carrying only rounding-level flow delegate nothing.
        let tiny = 1e-13 * self.flow_scale;
        for i in 0..self.n {
            if beta.row_sum(i) <= tiny {
                beta.row_mut(i).iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let (lambda_del, eta) = rates_to_routing(&beta);
        let (psi, xi) = rates_to_routing(&alpha);
        RebalanceParams { lambda_del, psi, eta, xi }
    }

    fn internals(&self, x: &[f64], mu: &[f64], rho: f64) -> Result<Internals> {
        let n = self.n;
        let (beta, alpha) = self.flows(x);
        let mut f = Matrix::square(n);
        let mut rows = vec![0.0; n];
        let mut load1 = self.demand_load;
        let mut cost = 0.0;
        for i in 0..n {
            for j in 0..n {
                f[(i, j)] = beta[(i, j)] + alpha[(i, j)];
                rows[i] += f[(i, j)];
                load1 -= beta[(i, j)] * self.t[(i, j)];
                cost += alpha[(i, j)] * self.t[(i, j)];
            }
        }
        let share: Vec<f64> = (0..n).map(|i| beta.row_sum(i) / self.lambda[i]).collect();
        let (bx, _) = self.split(x);
        let flow_res = self.polytope.residual(bx);
        let balance: Vec<f64> = flow_res[1..].iter().map(|v| v / self.flow_scale).collect();
        let (a1, da1) = uniform_mva(n, load1, self.m1);

        // Taxi utilizations solve gamma (F - diag(rows)) = 0 with gamma_0 = 1.
        let k = Matrix::from_fn(n - 1, n - 1, |r, c| f[(r + 1, c + 1)] - if r == c { rows[r + 1] } else { 0.0 });
        let kt = Matrix::from_fn(n - 1, n - 1, |r, c| k[(c, r)]);
        let rhs: Vec<f64> = (1..n).map(|j| -f[(0, j)]).collect();
        let g_rest = solve_dense(kt, rhs).ok_or(Error::SingularChain)?;
        let mut gamma = Vec::with_capacity(n);
        gamma.push(1.0);
        gamma.extend(g_rest);
        let mut road2 = 0.0;
        for i in 0..n {
            for j in 0..n {
                road2 += gamma[i] * f[(i, j)] * self.t[(i, j)];
            }
        }
        let (x2, dx2) = mva_with_tangents(&gamma, road2, self.m2);
        let a2: Vec<f64> = gamma.iter().map(|g| g * x2).collect();
        let a_pass: Vec<f64> = (0..n).map(|i| a1 - share[i] * (a1 - a2[i])).collect();
        let mut objective = cost - self.c * a2.iter().sum::<f64>();
        for kk in 1..n {
            let h = a_pass[kk] - a_pass[0];
            objective += mu[kk - 1] * h + 0.5 * rho * h * h;
            let hf = balance[kk - 1];
            objective += mu[n - 2 + kk] * hf + 0.5 * rho * hf * hf;
        }
        Ok(Internals {
            ev: FlowEval { balance, a1, a2, a_pass, cost, objective },
            f,
            gamma,
            k,
            share,
            x2,
            dx2,
            da1,
        })
    }

    /// Augmented Lagrangian value with multipliers `mu` on `A_pass_k - A_pass_0`
    /// followed by multipliers on the balance residuals.
    pub fn evaluate(&self, x: &[f64], mu: &[f64], rho: f64) -> Result<FlowEval> {
        Ok(self.internals(x, mu, rho)?.ev)
    }

    /// Value and analytic gradient of the augmented Lagrangian.
    pub fn value_grad(&self, x: &[f64], mu: &[f64], rho: f64) -> Result<(FlowEval, Vec<f64>)> {
        let n = self.n;
        let it = self.internals(x, mu, rho)?;
        let ev = &it.ev;

        let mut w = vec![0.0; n];
        for kk in 1..n {
            w[kk] = mu[kk - 1] + rho * (ev.a_pass[kk] - ev.a_pass[0]);
            w[0] -= w[kk];
        }
        let g_a2: Vec<f64> = (0..n).map(|i| -self.c + w[i] * it.share[i]).collect();
        let g_a1: f64 = (0..n).map(|i| w[i] * (1.0 - it.share[i])).sum();
        let g_share: Vec<f64> = (0..n).map(|i| -w[i] * (ev.a1 - ev.a2[i])).collect();

        let g_x: f64 = (0..n).map(|i| g_a2[i] * it.gamma[i]).sum();
        let g_road = g_x * it.dx2[n];
        let mut g_gamma = vec![0.0; n - 1];
        for kk in 1..n {
            let out_load: f64 = (0..n).map(|j| it.f[(kk, j)] * self.t[(kk, j)]).sum();
            g_gamma[kk - 1] = g_a2[kk] * it.x2 + g_x * it.dx2[kk] + g_road * out_load;
        }
        let v_rest = solve_dense(it.k.clone(), g_gamma).ok_or(Error::SingularChain)?;
        let v = |i: usize| if i == 0 { 0.0 } else { v_rest[i - 1] };
        let g_f = |i: usize, j: usize| -it.gamma[i] * (v(j) - v(i)) + g_road * it.gamma[i] * self.t[(i, j)];

        let mut w_flow = vec![0.0; n];
        for kk in 1..n {
            w_flow[kk] = (mu[n - 2 + kk] + rho * ev.balance[kk - 1]) / self.flow_scale;
        }
        let mut grad = Vec::with_capacity(self.dim());
        for &(i, j) in &self.beta_arcs {
            let flow = w_flow[i] - w_flow[j];
            grad.push(g_f(i, j) + g_share[i] / self.lambda[i] - g_a1 * it.da1 * self.t[(i, j)] + flow);
        }
        for &(i, j) in &self.alpha_arcs {
            grad.push(g_f(i, j) + self.t[(i, j)]);
        }
        Ok((it.ev, grad))
    }

    /// Central finite-difference gradient, relative step `h`.
    pub fn fd_grad(&self, x: &[f64], mu: &[f64], rho: f64, h: f64) -> Result<Vec<f64>> {
        let mut xp = x.to_vec();
        let mut out = Vec::with_capacity(x.len());
        for k in 0..x.len() {
            let step = h * x[k].abs().max(1e-3);
            xp[k] = x[k] + step;
            let fp = self.evaluate(&xp, mu, rho)?.objective;
            xp[k] = x[k] - step;
            let fm = self.evaluate(&xp, mu, rho)?.objective;
            xp[k] = x[k];
            out.push((fp - fm) / (2.0 * step));
        }
        Ok(out)
    }
}

fn max_violation(a_pass: &[f64]) -> f64 {
    a_pass.iter().skip(1).map(|a| (a - a_pass[0]).abs()).fold(0.0, f64::max)
}

/// Bound-constrained inner solver: projected quasi-Newton steps where
/// variables held at a bound by the gradient are frozen and the rest follow a
/// limited-memory BFGS direction.
struct Inner<'a> {
    model: &'a FlowModel,
}

impl Inner<'_> {
    fn pg_norm(&self, x: &[f64], g: &[f64]) -> f64 {
        let trial: Vec<f64> = x.iter().zip(g).map(|(a, b)| a - b).collect();
        let p = self.model.clip(&trial);
        p.iter().zip(x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    fn bounds(&self, k: usize) -> (f64, f64) {
        let nb = self.model.beta_arcs.len();
        if k < nb {
            (0.0, self.model.polytope.upper[k])
        } else {
            (self.model.alpha_floor, f64::INFINITY)
        }
    }

    /// Returns the final point, iterations used, and whether the tolerance was met.
    fn minimize(&self, mut x: Vec<f64>, mu: &[f64], rho: f64, tol: f64, budget: usize) -> Result<(Vec<f64>, usize, bool)> {
        const MEMORY: usize = 8;
        let dim = x.len();
        let (mut ev, mut g) = self.model.value_grad(&x, mu, rho)?;
        let mut mem_s: Vec<Vec<f64>> = Vec::new();
        let mut mem_y: Vec<Vec<f64>> = Vec::new();
        for it in 0..budget {
            let pg = self.pg_norm(&x, &g);
            if pg <= tol {
                return Ok((x, it, true));
            }
            let eps = pg.min(1e-6);
            let active: Vec<bool> = (0..dim)
                .map(|k| {
                    let (lo, hi) = self.bounds(k);
                    (x[k] <= lo + eps && g[k] > 0.0) || (x[k] >= hi - eps && g[k] < 0.0)
                })
                .collect();
            let mut q: Vec<f64> = (0..dim).map(|k| if active[k] { 0.0 } else { g[k] }).collect();
            let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| u * v).sum::<f64>();
            let mut alphas = Vec::with_capacity(mem_s.len());
            for (sv, yv) in mem_s.iter().zip(&mem_y).rev() {
                let a = dot(sv, &q) / dot(sv, yv);
                for k in 0..dim {
                    q[k] -= a * yv[k];
                }
                alphas.push(a);
            }
            let gamma = match (mem_s.last(), mem_y.last()) {
                (Some(sv), Some(yv)) => dot(sv, yv) / dot(yv, yv),
                _ => 1.0 / g.iter().fold(1e-12f64, |m, v| m.max(v.abs())),
            };
            q.iter_mut().for_each(|v| *v *= gamma);
            for ((sv, yv), a) in mem_s.iter().zip(&mem_y).zip(alphas.into_iter().rev()) {
                let b = dot(yv, &q) / dot(sv, yv);
                for k in 0..dim {
                    q[k] += (a - b) * sv[k];
                }
            }
            let mut d: Vec<f64> = (0..dim).map(|k| if active[k] { 0.0 } else { -q[k] }).collect();
            if dot(&d, &g) >= 0.0 {
                mem_s.clear();
                mem_y.clear();
                let scale = 1.0 / g.iter().fold(1e-12f64, |m, v| m.max(v.abs()));
                d = g.iter().map(|v| -v * scale).collect();
            }
            let mut t = 1.0;
            let accepted = loop {
                let trial: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + t * b).collect();
                let xn = self.model.clip(&trial);
                let decrease: f64 = g.iter().zip(xn.iter().zip(&x)).map(|(gk, (a, b))| gk * (a - b)).sum();
                if decrease < 0.0 {
                    if let Ok((evn, gn)) = self.model.value_grad(&xn, mu, rho) {
                        if evn.objective <= ev.objective + 1e-4 * decrease {
                            break Some((xn, evn, gn));
                        }
                    }
                }
                t *= 0.5;
                if t < 1e-12 {
                    break None;
                }
            };
            let Some((xn, evn, gn)) = accepted else {
                if mem_s.is_empty() {
                    return Ok((x, it, false));
                }
                mem_s.clear();
                mem_y.clear();
                continue;
            };
            let sv: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
            let yv: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
            if dot(&sv, &yv) > 1e-10 * dot(&yv, &yv).sqrt() * dot(&sv, &sv).sqrt() {
                mem_s.push(sv);
                mem_y.push(yv);
                if mem_s.len() > MEMORY {
                    mem_s.remove(0);
                    mem_y.remove(0);
                }
            }
            x = xn;
            g = gn;
            ev = evn;
        }
        let done = self.pg_norm(&x, &g) <= tol;
        Ok((x, budget, done))
    }
}

/// Independent check of a candidate through the parameter-space model.
fn assess(s: &Scenario<f64>, cfg: &MmrpConfig, model: &FlowModel, x: &[f64]) -> Result<(RebalanceParams<f64>, Vec<f64>, MmrpResiduals, f64)> {
    let params = model.params(x);
    let fm = FleetModel::new(s, &params)?;
    let pm = fm.metrics(cfg.fleet);
    let a2_sum: f64 = pm.a2.iter().sum();
    let g = &fm.customer.gamma;
    let gmax = g.iter().cloned().fold(0.0, f64::max);
    let gmin = g.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut bound: f64 = 0.0;
    for i in 0..s.n {
        for j in 0..s.n {
            let v = params.lambda_del[i] * params.eta[(i, j)] - s.lambda[i] * s.p[(i, j)];
            bound = bound.max(v);
        }
        bound = bound.max(-params.lambda_del[i]).max(-params.psi[i]);
    }
    let residuals = MmrpResiduals {
        availability_spread: pm.max_availability() - pm.min_availability(),
        utilization_spread: if gmax > 0.0 { (gmax - gmin) / gmax } else { 0.0 },
        bound_violation: bound,
    };
    Ok((params, pm.a_pass, residuals, a2_sum))
}

fn a_star_of(a_pass: &[f64]) -> f64 {
    a_pass.iter().sum::<f64>() / a_pass.len() as f64
}

/// Warm-start state carried between solves of a sweep.
#[derive(Clone, Debug, Default)]
pub struct WarmStart {
    pub x: Vec<f64>,
    pub mu: Vec<f64>,
    pub rho: f64,
}

pub fn solve_mmrp(s: &Scenario<f64>, cfg: &MmrpConfig) -> Result<MmrpResult> {
    solve_mmrp_warm(s, cfg, None).map(|(r, _)| r)
}

/// Solves from `warm` if given, otherwise from `cfg.init` or the linear solution.
pub fn solve_mmrp_warm(s: &Scenario<f64>, cfg: &MmrpConfig, warm: Option<&WarmStart>) -> Result<(MmrpResult, WarmStart)> {
    cfg.check()?;
    let n = s.n;
    if n < 2 {
        return Err(Error::InvalidInput("need at least two stations".into()));
    }
    let model = FlowModel::new(s, cfg.fleet, cfg.c, cfg.alpha_floor);
    let inner = Inner { model: &model };
    let mut phi = vec![0.0; n];

    let (x0, mut mu, mut rho) = match warm {
        Some(w) if w.x.len() == model.dim() && w.mu.len() == model.n_constraints() => {
            (w.x.clone(), w.mu.clone(), w.rho)
        }
        _ => {
            let init = match &cfg.init {
                Some(rp) => {
                    rp.validate(s).map_err(|e| Error::InfeasibleStart(e.to_string()))?;
                    rp.clone()
                }
                None => solve_mrp(s)?.params,
            };
            let x = model.pack(&init.delegated_flow(), &init.virtual_flow());
            (x, vec![0.0; model.n_constraints()], 100.0)
        }
    };
    let start = model.project(&x0, &mut phi)?;
    let (_, start_a, start_res, _) = assess(s, cfg, &model, &start)?;
    let start_feasible = start_res.availability_spread <= cfg.eps_a;
    let start_score = if start_feasible { a_star_of(&start_a) } else { start_a.iter().cloned().fold(1.0, f64::min) };

    let mut x = start.clone();
    let mut trace = Vec::new();
    let mut used = 0;
    let mut inner_tol = 1e-3;
    let mut prev_viol = f64::INFINITY;
    let mut prev_obj = f64::INFINITY;
    let mut converged = false;
    for outer in 0..cfg.max_outer {
        let budget = (cfg.max_iter - used).min(500);
        if budget == 0 {
            break;
        }
        let (xn, its, done) = inner.minimize(x, &mu, rho, inner_tol, budget)?;
        x = xn;
        used += its;
        let ev = model.evaluate(&x, &mu, rho)?;
        let a_viol = max_violation(&ev.a_pass);
        let f_viol = ev.balance.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        // Both violations on the availability scale.
        let viol = a_viol.max(f_viol * 0.25 * cfg.eps_a / BALANCE_TOL);
        trace.push(TraceEntry { outer, iterations: its, objective: ev.objective, max_violation: viol, penalty: rho });
        let stalled = (prev_obj - ev.objective).abs() <= 1e-5 * ev.objective.abs().max(1.0);
        prev_obj = ev.objective;
        if viol <= 0.25 * cfg.eps_a && ((inner_tol <= 1e-6 && done) || stalled) {
            converged = true;
            break;
        }
        for k in 1..n {
            mu[k - 1] += rho * (ev.a_pass[k] - ev.a_pass[0]);
            mu[n - 2 + k] += rho * ev.balance[k - 1];
        }
        if viol > 0.25 * prev_viol && viol > 0.25 * cfg.eps_a {
            rho = (rho * 5.0).min(MAX_PENALTY);
        }
        prev_viol = viol;
        inner_tol = (inner_tol * 0.1).max(1e-7);
    }
    // The augmented Lagrangian leaves a tiny conservation residual; remove it exactly.
    if let Ok(polished) = model.project(&x, &mut phi) {
        x = polished;
    }

    let (mut params, mut a_pass, mut residuals, mut a2_sum) = assess(s, cfg, &model, &x)?;
    let mut status = if converged && residuals.availability_spread <= cfg.eps_a {
        MmrpStatus::Converged
    } else {
        MmrpStatus::NoProgress
    };
    let feasible = residuals.availability_spread <= cfg.eps_a;
    let score = if feasible { a_star_of(&a_pass) } else { a_pass.iter().cloned().fold(1.0, f64::min) };
    let worse = if warm.is_some() { score < start_score } else { score < start_score - cfg.eps_a };
    if start_feasible && (!feasible || worse) {
        x = start;
        (params, a_pass, residuals, a2_sum) = assess(s, cfg, &model, &x)?;
        status = MmrpStatus::KeptStart;
    }
    let (beta, alpha) = model.flows(&x);
    let rebalancing_cost = crate::mrp::rebalancing_cost(s, &params);
    let result = MmrpResult {
        params,
        beta,
        alpha,
        a_star: a_star_of(&a_pass),
        a_pass,
        objective: rebalancing_cost - cfg.c * a2_sum,
        rebalancing_cost,
        residuals,
        iterations: used,
        status,
        trace,
    };
    Ok((result, WarmStart { x, mu, rho }))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParetoPoint {
    pub c: f64,
    pub rebalancing_cost: f64,
    pub a_star: f64,
    pub iterations: usize,
    pub converged: bool,
    pub error: Option<String>,
    #[serde(skip)]
    pub result: Option<MmrpResult>,
}

/// Solves for every weight in ascending order.
///
/// Each weight is solved from the linear solution and again from the previous
/// point of the sweep. The lower objective wins among feasible candidates whose
/// A* does not drop below the previous point.
pub fn pareto_sweep(s: &Scenario<f64>, fleet: FleetConfig, c_list: &[f64], base: &MmrpConfig) -> Vec<ParetoPoint> {
    let mut cs = c_list.to_vec();
    cs.sort_by(f64::total_cmp);
    let mut prev: Option<(WarmStart, f64)> = None;
    let mut out = Vec::with_capacity(cs.len());
    for c in cs {
        let cfg = MmrpConfig { c, fleet, ..base.clone() };
        let mut candidates = Vec::new();
        let mut last_err = None;
        let cold = solve_mmrp_warm(s, &cfg, None);
        let warm = prev.as_ref().map(|(w, _)| solve_mmrp_warm(s, &cfg, Some(w)));
        for r in std::iter::once(cold).chain(warm) {
            match r {
                Ok(pair) => candidates.push(pair),
                Err(e) => last_err = Some(e),
            }
        }
        let floor = prev.as_ref().map_or(f64::NEG_INFINITY, |(_, a)| *a);
        let feasible = |r: &MmrpResult| r.residuals.availability_spread <= cfg.eps_a;
        let best = candidates
            .iter()
            .enumerate()
            .filter(|(_, (r, _))| feasible(r) && r.a_star >= floor)
            .min_by(|a, b| a.1 .0.objective.total_cmp(&b.1 .0.objective))
            .map(|(k, _)| k)
            .or(if candidates.is_empty() { None } else { Some(0) });
        match best.map(|k| candidates.swap_remove(k)) {
            Some((r, w)) => {
                if feasible(&r) && r.a_star >= floor {
                    prev = Some((w, r.a_star));
                }
                out.push(ParetoPoint {
                    c,
                    rebalancing_cost: r.rebalancing_cost,
                    a_star: r.a_star,
                    iterations: r.iterations,
                    converged: r.converged(),
                    error: None,
                    result: Some(r),
                });
            }
            None => out.push(ParetoPoint {
                c,
                rebalancing_cost: f64::NAN,
                a_star: f64::NAN,
                iterations: 0,
                converged: false,
                error: Some(last_err.map_or_else(|| "no candidate".into(), |e| e.to_string())),
                result: None,
            }),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generate::{generate_scenario, ScenarioStyle};
    use crate::mrp::passenger_availability;

    #[test]
    fn projection_lands_on_balanced_flows() {
        let s = generate_scenario(6, 1, ScenarioStyle::Uniform).unwrap();
        let model = FlowModel::new(&s, FleetConfig::new(60, 15).unwrap(), 1.0, 1e-6);
        let x: Vec<f64> = (0..model.dim()).map(|k| ((k * 37 % 11) as f64 - 3.0) * 0.05).collect();
        let mut phi = vec![0.0; s.n];
        let y = model.project(&x, &mut phi).unwrap();
        let (b, _) = model.split(&y);
        let r = model.polytope.residual(b);
        assert!(r.iter().all(|v| v.abs() < 1e-10), "{r:?}");
        for (k, &v) in b.iter().enumerate() {
            assert!(v >= 0.0 && v <= model.polytope.upper[k]);
        }
        // Projecting again is a no-op.
        let z = model.project(&y, &mut phi).unwrap();
        assert!(z.iter().zip(&y).all(|(a, b)| (a - b).abs() < 1e-10));
    }

    #[test]
    fn flow_model_agrees_with_parameter_model() {
        let s = generate_scenario(5, 2, ScenarioStyle::Uniform).unwrap();
        let fleet = FleetConfig::new(50, 12).unwrap();
        let model = FlowModel::new(&s, fleet, 1.0, 1e-6);
        let mut phi = vec![0.0; s.n];
        let x0: Vec<f64> = (0..model.dim()).map(|k| 0.02 + 0.01 * ((k * 13 % 7) as f64)).collect();
        let x = model.project(&x0, &mut phi).unwrap();
        let ev = model.evaluate(&x, &vec![0.0; model.n_constraints()], 0.0).unwrap();
        let pm = passenger_availability(&s, fleet, &model.params(&x)).unwrap();
        for i in 0..s.n {
            assert!((ev.a_pass[i] - pm.a_pass[i]).abs() < 1e-9);
            assert!((ev.a2[i] - pm.a2[i]).abs() < 1e-9);
            assert!((ev.a1 - pm.a1[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let s = generate_scenario(5, 3, ScenarioStyle::Uniform).unwrap();
        let model = FlowModel::new(&s, FleetConfig::new(40, 10).unwrap(), 2.0, 1e-6);
        let mut phi = vec![0.0; s.n];
        let x0: Vec<f64> = (0..model.dim()).map(|k| 0.03 + 0.02 * ((k * 7 % 5) as f64)).collect();
        let x = model.project(&x0, &mut phi).unwrap();
        let mu = vec![0.3, -0.2, 0.5, 0.1, 0.2, -0.4, 0.05, 0.3];
        let (_, g) = model.value_grad(&x, &mu, 50.0).unwrap();
        let fd = model.fd_grad(&x, &mu, 50.0, 1e-6).unwrap();
        let scale = fd.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (a, b) in g.iter().zip(&fd) {
            assert!((a - b).abs() <= 1e-4 * scale.max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn uniform_mva_matches_general_mva() {
        let gamma = vec![1.0; 4];
        let (x, dx) = mva_with_tangents(&gamma, 3.5, 30);
        let (y, dy) = uniform_mva(4, 3.5, 30);
        assert!((x - y).abs() < 1e-14);
        assert!((dx[4] - dy).abs() < 1e-14);
    }

    #[test]
    fn rejects_negative_weight() {
        let s = generate_scenario(3, 0, ScenarioStyle::Uniform).unwrap();
        let cfg = MmrpConfig::new(-1.0, FleetConfig::new(10, 2).unwrap());
        assert!(solve_mmrp(&s, &cfg).is_err());
    }

    #[test]
    fn balances_small_scenario() {
        let s = generate_scenario(5, 4, ScenarioStyle::Uniform).unwrap();
        let cfg = MmrpConfig::new(2.0, FleetConfig::new(120, 30).unwrap());
        let r = solve_mmrp(&s, &cfg).unwrap();
        assert!(r.feasible(cfg.eps_a, cfg.eps_feas), "{:?}", r.residuals);
    }
}

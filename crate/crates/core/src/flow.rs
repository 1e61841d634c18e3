//! Minimum-cost flow by successive shortest augmenting paths with node potentials.
//!
//! Supplies may be fractional. Each augmentation routes along a shortest
//! path of the residual graph from a super source to a super sink, so the
//! final potentials certify optimality through complementary slackness.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::num::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlowArc<T> {
    pub from: usize,
    pub to: usize,
    pub cost: T,
    /// `None` means uncapacitated.
    pub upper: Option<T>,
}

/// Nodes `0..n` with net outflow `divergence[i]` (positive = supply).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlowProblem<T> {
    pub divergence: Vec<T>,
    pub arcs: Vec<FlowArc<T>>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlowSolution<T> {
    /// Flow on each arc, same order as the problem's arcs.
    pub flow: Vec<T>,
    /// Node potentials; reduced costs `cost + p_from - p_to` certify optimality.
    pub potential: Vec<T>,
    pub cost: T,
    pub augmentations: usize,
}

impl<T: Scalar> FlowProblem<T> {
    pub fn new(divergence: Vec<T>) -> Self {
        Self { divergence, arcs: Vec::new() }
    }

    pub fn add_arc(&mut self, from: usize, to: usize, cost: T, upper: Option<T>) -> usize {
        self.arcs.push(FlowArc { from, to, cost, upper });
        self.arcs.len() - 1
    }

    pub fn n_nodes(&self) -> usize {
        self.divergence.len()
    }

    fn total_supply(&self) -> T {
        self.divergence.iter().filter(|&&d| d > T::zero()).fold(T::zero(), |a, &b| a + b)
    }

    fn check(&self) -> Result<()> {
        let n = self.n_nodes();
        let net = self.divergence.iter().fold(T::zero(), |a, &b| a + b);
        let tol = T::from_f64_lossy(1e-9).max_of(T::tolerance());
        if net.abs() > tol * self.total_supply().max_of(T::one()) {
            return Err(Error::InvalidInput(format!("divergences sum to {net}, not zero")));
        }
        for (k, a) in self.arcs.iter().enumerate() {
            if a.from >= n || a.to >= n || a.from == a.to {
                return Err(Error::InvalidInput(format!("arc {k} has bad endpoints")));
            }
            if a.cost < T::zero() {
                return Err(Error::InvalidInput(format!("arc {k} has negative cost")));
            }
            if a.upper.is_some_and(|u| u < T::zero()) {
                return Err(Error::InvalidInput(format!("arc {k} has negative capacity")));
            }
        }
        Ok(())
    }
}

struct Residual<T> {
    head: Vec<usize>,
    cap: Vec<T>,
    cost: Vec<T>,
    adj: Vec<Vec<usize>>,
}

impl<T: Scalar> Residual<T> {
    fn add(&mut self, u: usize, v: usize, cap: T, cost: T) -> usize {
        let e = self.head.len();
        self.head.extend([v, u]);
        self.cap.extend([cap, T::zero()]);
        self.cost.extend([cost, -cost]);
        self.adj[u].push(e);
        self.adj[v].push(e + 1);
        e
    }
}

/// Solves `min sum cost*flow` subject to conservation and `0 <= flow <= upper`.
pub fn solve_min_cost_flow<T: Scalar>(fp: &FlowProblem<T>) -> Result<FlowSolution<T>> {
    fp.check()?;
    let n = fp.n_nodes();
    let (src, snk) = (n, n + 1);
    let total = fp.total_supply();
    let eps = T::tolerance() * total.max_of(T::one());

    let mut g = Residual { head: Vec::new(), cap: Vec::new(), cost: Vec::new(), adj: vec![Vec::new(); n + 2] };
    // Any optimal flow is acyclic, so no arc carries more than the total supply.
    let arc_edges: Vec<usize> = fp
        .arcs
        .iter()
        .map(|a| g.add(a.from, a.to, a.upper.unwrap_or(total), a.cost))
        .collect();
    for (i, &d) in fp.divergence.iter().enumerate() {
        if d > T::zero() {
            g.add(src, i, d, T::zero());
        } else if d < T::zero() {
            g.add(i, snk, -d, T::zero());
        }
    }

    let k = n + 2;
    let mut pot = vec![T::zero(); k];
    let mut sent = T::zero();
    let mut augmentations = 0;
    loop {
        if (total - sent).near_zero(total) || total - sent <= eps {
            break;
        }
        // Dense Dijkstra on reduced costs; ties go to the lowest node index.
        let mut dist: Vec<Option<T>> = vec![None; k];
        let mut done = vec![false; k];
        let mut prev_edge = vec![usize::MAX; k];
        dist[src] = Some(T::zero());
        loop {
            let mut best: Option<(usize, T)> = None;
            for v in 0..k {
                if done[v] {
                    continue;
                }
                if let Some(d) = dist[v] {
                    if best.is_none_or(|(_, bd)| d < bd) {
                        best = Some((v, d));
                    }
                }
            }
            let Some((u, du)) = best else { break };
            done[u] = true;
            for &e in &g.adj[u] {
                if g.cap[e] <= eps {
                    continue;
                }
                let v = g.head[e];
                if done[v] {
                    continue;
                }
                let rc = (g.cost[e] + pot[u] - pot[v]).max_of(T::zero());
                let nd = du + rc;
                if dist[v].is_none_or(|dv| nd < dv) {
                    dist[v] = Some(nd);
                    prev_edge[v] = e;
                }
            }
        }
        let Some(dt) = dist[snk] else {
            let cut: Vec<usize> = (0..n).filter(|&v| dist[v].is_some()).collect();
            return Err(Error::Infeasible { cut, shortfall: (total - sent).to_f64_lossy() });
        };
        let dmax = dist.iter().flatten().fold(dt, |a, &b| a.max_of(b));
        for v in 0..k {
            pot[v] = pot[v] + dist[v].unwrap_or(dmax);
        }
        let mut push = total - sent;
        let mut v = snk;
        while v != src {
            let e = prev_edge[v];
            push = push.min_of(g.cap[e]);
            v = g.head[e ^ 1];
        }
        let mut v = snk;
        while v != src {
            let e = prev_edge[v];
            g.cap[e] = g.cap[e] - push;
            g.cap[e ^ 1] = g.cap[e ^ 1] + push;
            v = g.head[e ^ 1];
        }
        sent = sent + push;
        augmentations += 1;
    }

    let flow: Vec<T> = arc_edges.iter().map(|&e| g.cap[e + 1]).collect();
    let cost = fp.arcs.iter().zip(&flow).fold(T::zero(), |a, (arc, &f)| a + arc.cost * f);
    Ok(FlowSolution { flow, potential: pot[..n].to_vec(), cost, augmentations })
}

/// Independent check of bounds, conservation and complementary slackness.
pub fn verify_optimality<T: Scalar>(fp: &FlowProblem<T>, sol: &FlowSolution<T>, tol: T) -> Result<(), String> {
    let n = fp.n_nodes();
    let mut net = vec![T::zero(); n];
    for (k, (a, &f)) in fp.arcs.iter().zip(&sol.flow).enumerate() {
        if f < -tol {
            return Err(format!("arc {k} has negative flow {f}"));
        }
        if let Some(u) = a.upper {
            if f > u + tol {
                return Err(format!("arc {k} exceeds capacity"));
            }
        }
        net[a.from] = net[a.from] + f;
        net[a.to] = net[a.to] - f;
        let rc = a.cost + sol.potential[a.from] - sol.potential[a.to];
        let at_upper = a.upper.is_some_and(|u| f >= u - tol);
        if !at_upper && rc < -tol {
            return Err(format!("arc {k} has negative reduced cost {rc} with spare capacity"));
        }
        if f > tol && rc > tol {
            return Err(format!("arc {k} carries flow with positive reduced cost {rc}"));
        }
    }
    for i in 0..n {
        if (net[i] - fp.divergence[i]).abs() > tol {
            return Err(format!("node {i} violates conservation"));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_rational::Rational64;

    #[test]
    fn zero_divergence_gives_zero_flow() {
        let mut fp = FlowProblem::new(vec![0.0, 0.0]);
        fp.add_arc(0, 1, 1.0, None);
        let sol = solve_min_cost_flow(&fp).unwrap();
        assert_eq!(sol.flow, vec![0.0]);
        assert_eq!(sol.augmentations, 0);
    }

    #[test]
    fn single_path() {
        let mut fp = FlowProblem::new(vec![1.0, -1.0]);
        fp.add_arc(0, 1, 1.0, None);
        fp.add_arc(1, 0, 1.0, None);
        let sol = solve_min_cost_flow(&fp).unwrap();
        assert_eq!(sol.flow, vec![1.0, 0.0]);
        verify_optimality(&fp, &sol, 1e-12).unwrap();
    }

    #[test]
    fn capacity_forces_detour_exactly() {
        let r = Rational64::new;
        let mut fp = FlowProblem::new(vec![r(3, 2), r(0, 1), r(-3, 2)]);
        fp.add_arc(0, 2, r(1, 1), Some(r(1, 2)));
        fp.add_arc(0, 1, r(1, 1), None);
        fp.add_arc(1, 2, r(1, 1), None);
        let sol = solve_min_cost_flow(&fp).unwrap();
        assert_eq!(sol.flow, vec![r(1, 2), r(1, 1), r(1, 1)]);
        assert_eq!(sol.cost, r(5, 2));
        verify_optimality(&fp, &sol, r(0, 1)).unwrap();
    }

    #[test]
    fn infeasible_reports_cut() {
        let mut fp = FlowProblem::new(vec![2.0, 0.0, -2.0]);
        fp.add_arc(0, 1, 1.0, Some(1.0));
        fp.add_arc(1, 2, 1.0, None);
        match solve_min_cost_flow(&fp) {
            Err(Error::Infeasible { cut, shortfall }) => {
                assert_eq!(cut, vec![0]);
                assert!((shortfall - 1.0).abs() < 1e-12);
            }
            other => panic!("expected infeasible, got {other:?}"),
        }
    }

    #[test]
    fn rejects_unbalanced_divergence() {
        let mut fp = FlowProblem::new(vec![1.0, 0.0]);
        fp.add_arc(0, 1, 1.0, None);
        assert!(solve_min_cost_flow(&fp).is_err());
    }
}

//! Closed Jackson networks built from a fleet's station rates and routing.
//!
//! Stations become single-server nodes served at the customer arrival rate;
//! every used origin-destination pair becomes an infinite-server road node
//! whose per-vehicle service rate is the inverse travel time.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::num::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum NodeKind {
    /// Single-server station node.
    Station(usize),
    /// Infinite-server road node from `parent` to `child`.
    Road { parent: usize, child: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Node<T> {
    pub kind: NodeKind,
    /// Station service rate, or mean travel time for road nodes.
    pub param: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct JacksonNetwork<T: Scalar> {
    n_stations: usize,
    nodes: Vec<Node<T>>,
    /// Sparse node routing: `(target, probability)` per node.
    routing: Vec<Vec<(usize, T)>>,
    station_routing: Matrix<T>,
    population: usize,
}

impl<T: Scalar> JacksonNetwork<T> {
    pub fn n_stations(&self) -> usize {
        self.n_stations
    }

    pub fn nodes(&self) -> &[Node<T>] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn population(&self) -> usize {
        self.population
    }

    pub fn with_population(mut self, m: usize) -> Self {
        self.population = m;
        self
    }

    /// Station-level routing `p` the network was built from.
    pub fn station_routing(&self) -> &Matrix<T> {
        &self.station_routing
    }

    pub fn out_edges(&self, node: usize) -> &[(usize, T)] {
        &self.routing[node]
    }

    /// Routing probability between two nodes.
    pub fn r(&self, from: usize, to: usize) -> T {
        self.routing[from]
            .iter()
            .find(|(j, _)| *j == to)
            .map_or(T::zero(), |&(_, v)| v)
    }

    pub fn routing_matrix(&self) -> Matrix<T> {
        let k = self.nodes.len();
        let mut r = Matrix::square(k);
        for (i, row) in self.routing.iter().enumerate() {
            for &(j, v) in row {
                r[(i, j)] = v;
            }
        }
        r
    }

    /// Service rate of `node` with `n` vehicles present.
    pub fn service_rate(&self, node: usize, n: usize) -> T {
        let nd = &self.nodes[node];
        match nd.kind {
            NodeKind::Station(_) => {
                if n == 0 {
                    T::zero()
                } else {
                    nd.param
                }
            }
            NodeKind::Road { .. } => T::from_usize_lossy(n) / nd.param,
        }
    }

    pub fn station_rate(&self, station: usize) -> T {
        self.nodes[station].param
    }

    pub fn road_nodes(&self) -> impl Iterator<Item = (usize, usize, usize, T)> + '_ {
        self.nodes.iter().enumerate().filter_map(|(k, nd)| match nd.kind {
            NodeKind::Road { parent, child } => Some((k, parent, child, nd.param)),
            NodeKind::Station(_) => None,
        })
    }

    pub fn road_index(&self, parent: usize, child: usize) -> Option<usize> {
        self.nodes
            .iter()
            .position(|nd| nd.kind == NodeKind::Road { parent, child })
    }
}

/// Builds the closed network for one fleet.
///
/// Nodes are ordered stations first, then roads lexicographically by
/// `(parent, child)`. Roads with zero routing probability are omitted.
/// A station may have an all-zero routing row only if its rate is zero.
pub fn build_network<T: Scalar>(
    rates: &[T],
    routing: &Matrix<T>,
    travel_time: &Matrix<T>,
    population: usize,
) -> Result<JacksonNetwork<T>> {
    let n = rates.len();
    if routing.rows() != n || routing.cols() != n || travel_time.rows() != n || travel_time.cols() != n {
        return Err(Error::InvalidInput("network inputs have inconsistent sizes".into()));
    }
    let tol = T::from_f64_lossy(crate::scenario::CHECK_TOL);
    for i in 0..n {
        if rates[i] < T::zero() {
            return Err(Error::InvalidInput(format!("negative service rate at station {i}")));
        }
        if routing.row(i).iter().any(|&v| v < T::zero()) {
            return Err(Error::InvalidInput(format!("negative routing probability in row {i}")));
        }
        if !routing[(i, i)].is_zero() {
            return Err(Error::InvalidInput(format!("self routing at station {i}")));
        }
        let rs = routing.row_sum(i);
        let empty_ok = rs.is_zero() && rates[i].is_zero();
        if (rs - T::one()).abs() > tol && !empty_ok {
            return Err(Error::InvalidInput(format!("routing row {i} does not sum to 1")));
        }
    }

    let mut nodes: Vec<Node<T>> = rates
        .iter()
        .enumerate()
        .map(|(i, &r)| Node { kind: NodeKind::Station(i), param: r })
        .collect();
    let mut routing_out: Vec<Vec<(usize, T)>> = vec![Vec::new(); n];
    for i in 0..n {
        for j in 0..n {
            let pij = routing[(i, j)];
            if i == j || pij.is_zero() {
                continue;
            }
            let tt = travel_time[(i, j)];
            if tt <= T::zero() {
                return Err(Error::BadTopology { from: i, to: j });
            }
            let k = nodes.len();
            nodes.push(Node { kind: NodeKind::Road { parent: i, child: j }, param: tt });
            routing_out[i].push((k, pij));
            routing_out.push(vec![(j, T::one())]);
        }
    }

    Ok(JacksonNetwork {
        n_stations: n,
        nodes,
        routing: routing_out,
        station_routing: routing.clone(),
        population,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn off_diag(n: usize, v: f64) -> Matrix<f64> {
        Matrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { v })
    }

    #[test]
    fn two_station_layout() {
        let net = build_network(&[1.0, 1.0], &off_diag(2, 1.0), &off_diag(2, 1.0), 3).unwrap();
        assert_eq!(net.len(), 4);
        let is12 = net.road_index(0, 1).unwrap();
        let is21 = net.road_index(1, 0).unwrap();
        assert_eq!((is12, is21), (2, 3));
        assert_eq!(net.r(0, is12), 1.0);
        assert_eq!(net.r(is12, 1), 1.0);
        assert_eq!(net.r(0, 1), 0.0);
        assert_eq!(net.service_rate(is12, 3), 3.0);
        assert_eq!(net.service_rate(0, 3), 1.0);
        assert_eq!(net.population(), 3);
    }

    #[test]
    fn full_three_station_has_n_squared_nodes() {
        let net = build_network(&[1.0; 3], &off_diag(3, 0.5), &off_diag(3, 2.0), 1).unwrap();
        assert_eq!(net.len(), 9);
        let r = net.routing_matrix();
        for i in 0..9 {
            assert!((r.row_sum(i) - 1.0).abs() < 1e-15);
        }
        // Roads lexicographic by (parent, child).
        let kinds: Vec<_> = net.road_nodes().map(|(_, a, b, _)| (a, b)).collect();
        assert_eq!(kinds, vec![(0, 1), (0, 2), (1, 0), (1, 2), (2, 0), (2, 1)]);
    }

    #[test]
    fn unused_road_is_pruned() {
        let routing = Matrix::from_rows(vec![vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let net = build_network(&[0.0, 1.0], &routing, &off_diag(2, 1.0), 1).unwrap();
        assert_eq!(net.len(), 3);
        assert_eq!(net.road_index(1, 0), Some(2));
        assert_eq!(net.road_index(0, 1), None);
    }

    #[test]
    fn used_arc_needs_positive_travel_time() {
        let mut t = off_diag(2, 1.0);
        t[(0, 1)] = 0.0;
        let err = build_network(&[1.0, 1.0], &off_diag(2, 1.0), &t, 1).unwrap_err();
        assert!(matches!(err, Error::BadTopology { from: 0, to: 1 }));
    }

    #[test]
    fn deterministic_construction() {
        let a = build_network(&[1.0, 2.0, 3.0], &off_diag(3, 0.5), &off_diag(3, 2.0), 4).unwrap();
        let b = build_network(&[1.0, 2.0, 3.0], &off_diag(3, 0.5), &off_diag(3, 2.0), 4).unwrap();
        assert_eq!(a, b);
    }
}

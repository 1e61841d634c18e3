//! Brute-force stationary distribution of the full occupancy Markov chain.
//!
//! Used as an oracle for the product-form results: it builds the generator
//! over every occupancy vector and solves global balance directly.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::jackson::relative_throughput;
use crate::matrix::Matrix;
use crate::network::JacksonNetwork;

pub const DEFAULT_STATE_CAP: usize = 200_000;
const DENSE_LIMIT: usize = 1_500;

#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyDistribution {
    pub states: Vec<Vec<u32>>,
    pub prob: Vec<f64>,
}

impl OccupancyDistribution {
    pub fn total_variation(&self, other: &[f64]) -> f64 {
        0.5 * self.prob.iter().zip(other).map(|(a, b)| (a - b).abs()).sum::<f64>()
    }
}

/// `C(m + k - 1, m)`, saturating.
pub fn state_count(nodes: usize, m: usize) -> u128 {
    if nodes == 0 {
        return u128::from(m == 0);
    }
    let mut c: u128 = 1;
    for i in 1..=m as u128 {
        c = c.saturating_mul(nodes as u128 - 1 + i) / i;
    }
    c
}

fn compositions(nodes: usize, m: usize) -> Vec<Vec<u32>> {
    fn rec(prefix: &mut Vec<u32>, left: u32, slots: usize, out: &mut Vec<Vec<u32>>) {
        if slots == 1 {
            prefix.push(left);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for x in (0..=left).rev() {
            prefix.push(x);
            rec(prefix, left - x, slots - 1, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    if nodes > 0 {
        rec(&mut Vec::with_capacity(nodes), m as u32, nodes, &mut out);
    }
    out
}

/// Stationary distribution of the occupancy chain of `net` with `m` vehicles.
pub fn ctmc_oracle(net: &JacksonNetwork<f64>, m: usize, cap: usize) -> Result<OccupancyDistribution> {
    let k = net.len();
    let count = state_count(k, m);
    if count > cap as u128 {
        return Err(Error::StateSpaceTooLarge { states: count, cap });
    }
    if (0..net.n_stations()).any(|i| net.station_rate(i) <= 0.0) {
        return Err(Error::InvalidInput("occupancy oracle needs positive station rates".into()));
    }
    let states = compositions(k, m);
    let index: HashMap<&[u32], usize> = states.iter().enumerate().map(|(i, s)| (s.as_slice(), i)).collect();

    // Incoming transitions per state and total outflow rate.
    let s_len = states.len();
    let mut incoming: Vec<Vec<(usize, f64)>> = vec![Vec::new(); s_len];
    let mut out_rate = vec![0.0; s_len];
    let mut buf = Vec::with_capacity(k);
    for (si, s) in states.iter().enumerate() {
        for node in 0..k {
            let x = s[node] as usize;
            if x == 0 {
                continue;
            }
            let mu = net.service_rate(node, x);
            for &(to, r) in net.out_edges(node) {
                let rate = mu * r;
                if rate == 0.0 {
                    continue;
                }
                buf.clear();
                buf.extend_from_slice(s);
                buf[node] -= 1;
                buf[to] += 1;
                let ti = index[buf.as_slice()];
                incoming[ti].push((si, rate));
                out_rate[si] += rate;
            }
        }
    }

    let prob = if s_len <= DENSE_LIMIT {
        solve_dense_balance(&incoming, &out_rate)?
    } else {
        solve_gauss_seidel(&incoming, &out_rate)
    };
    Ok(OccupancyDistribution { states, prob })
}

fn solve_dense_balance(incoming: &[Vec<(usize, f64)>], out_rate: &[f64]) -> Result<Vec<f64>> {
    let n = out_rate.len();
    let mut a = Matrix::<f64>::square(n);
    for j in 0..n {
        a[(j, j)] -= out_rate[j];
        for &(i, r) in &incoming[j] {
            a[(j, i)] += r;
        }
    }
    for i in 0..n {
        a[(0, i)] = 1.0;
    }
    let mut b = vec![0.0; n];
    b[0] = 1.0;
    crate::linalg::solve_dense(a, b).ok_or(Error::SingularChain)
}

fn solve_gauss_seidel(incoming: &[Vec<(usize, f64)>], out_rate: &[f64]) -> Vec<f64> {
    let n = out_rate.len();
    let mut p = vec![1.0 / n as f64; n];
    let update = |p: &mut [f64], j: usize| {
        if out_rate[j] > 0.0 {
            p[j] = incoming[j].iter().map(|&(i, r)| p[i] * r).sum::<f64>() / out_rate[j];
        }
    };
    // Symmetric sweeps; stop on the relative balance residual.
    for _ in 0..20_000 {
        for j in 0..n {
            update(&mut p, j);
        }
        for j in (0..n).rev() {
            update(&mut p, j);
        }
        let s: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= s);
        let resid = (0..n)
            .map(|j| (incoming[j].iter().map(|&(i, r)| p[i] * r).sum::<f64>() - p[j] * out_rate[j]).abs())
            .sum::<f64>();
        let scale = (0..n).map(|j| p[j] * out_rate[j]).sum::<f64>();
        if resid <= 1e-13 * scale {
            break;
        }
    }
    p
}

/// Normalized product-form probabilities of the given occupancy vectors.
pub fn product_form(net: &JacksonNetwork<f64>, states: &[Vec<u32>]) -> Result<Vec<f64>> {
    let pi = relative_throughput(net)?;
    let w: Vec<f64> = states
        .iter()
        .map(|s| {
            let mut lw = 0.0;
            for (node, &x) in s.iter().enumerate() {
                for n in 1..=x as usize {
                    lw += pi[node].ln() - net.service_rate(node, n).ln();
                }
            }
            lw
        })
        .collect();
    let top = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = w.iter().map(|v| (v - top).exp()).collect();
    let s: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / s).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::jackson::relative_utilization;
    use crate::network::build_network;

    fn off_diag(n: usize, v: f64) -> Matrix<f64> {
        Matrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { v })
    }

    #[test]
    fn counts_match_binomial() {
        assert_eq!(state_count(4, 2), 10);
        assert_eq!(compositions(4, 2).len(), 10);
        assert_eq!(state_count(9, 4), 495);
    }

    #[test]
    fn single_vehicle_is_proportional_to_utilization() {
        let p = Matrix::from_rows(vec![vec![0.0, 0.3, 0.7], vec![0.6, 0.0, 0.4], vec![0.5, 0.5, 0.0]]).unwrap();
        let net = build_network(&[1.0, 2.0, 0.5], &p, &off_diag(3, 1.5), 1).unwrap();
        let d = ctmc_oracle(&net, 1, DEFAULT_STATE_CAP).unwrap();
        let pi = relative_throughput(&net).unwrap();
        let gamma = relative_utilization(&net, &pi).unwrap();
        let total: f64 = gamma.iter().sum();
        for (s, pr) in d.states.iter().zip(&d.prob) {
            let node = s.iter().position(|&x| x == 1).unwrap();
            assert!((pr - gamma[node] / total).abs() < 1e-12);
        }
    }

    #[test]
    fn tandem_loop_matches_hand_solution() {
        // Two stations feeding each other directly through roads; with m=2
        // compare a handful of states against the product form.
        let net = build_network(&[1.0, 3.0], &off_diag(2, 1.0), &off_diag(2, 0.5), 2).unwrap();
        let d = ctmc_oracle(&net, 2, DEFAULT_STATE_CAP).unwrap();
        let pf = product_form(&net, &d.states).unwrap();
        assert!(d.total_variation(&pf) < 1e-12);
    }

    #[test]
    fn gauss_seidel_route_agrees_with_dense() {
        let net = build_network(&[1.0, 2.0], &off_diag(2, 1.0), &off_diag(2, 0.7), 40).unwrap();
        let d = ctmc_oracle(&net, 40, DEFAULT_STATE_CAP).unwrap();
        assert!(d.states.len() > DENSE_LIMIT);
        let pf = product_form(&net, &d.states).unwrap();
        let tv = d.total_variation(&pf);
        assert!(tv < 1e-8, "tv {tv}");
    }

    #[test]
    fn cap_is_enforced() {
        let net = build_network(&[1.0; 3], &off_diag(3, 0.5), &off_diag(3, 1.0), 30).unwrap();
        assert!(matches!(ctmc_oracle(&net, 30, 1000), Err(Error::StateSpaceTooLarge { .. })));
    }
}

//! Real-time customer assignment as a small integer program.
//!
//! Decision variables are `n_v[i][j]` (customers driving themselves from i to j)
//! and `n_d[i][j]` (customers taken by a taxi), plus one slack per station for
//! the absolute deviation of the predicted customer-driven fleet from its
//! target.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lp::{solve_ip, solve_ip_lex, LinearProgram, LpStatus};
use crate::num::Scalar;
use crate::scenario::FleetConfig;

/// Above this many free integer variables the lexicographic tie-break is skipped
/// and the branch-and-bound optimum is returned as found.
pub const LEX_LIMIT: usize = 32;

/// Cost per taxi assignment added inside the solver so that, among equal
/// objectives, customers drive themselves rather than tie up a driver.
pub const TAXI_TIE_COST: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StationState {
    /// Excess unassigned customer-driven vehicles.
    pub v_e: Vec<u32>,
    /// Unassigned drivers.
    pub d_u: Vec<u32>,
    /// `c_u[i][j]`: unassigned customers at i heading to j.
    pub c_u: Vec<Vec<u32>>,
    /// `v_t[j][i]`: customer-driven vehicles in transit from j to i.
    pub v_t: Vec<Vec<u32>>,
    /// `v_a[j][i]`: customer-driven vehicles at j committed to i, not yet departed.
    pub v_a: Vec<Vec<u32>>,
}

impl StationState {
    pub fn empty(n: usize) -> Self {
        Self {
            v_e: vec![0; n],
            d_u: vec![0; n],
            c_u: vec![vec![0; n]; n],
            v_t: vec![vec![0; n]; n],
            v_a: vec![vec![0; n]; n],
        }
    }

    pub fn n(&self) -> usize {
        self.v_e.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        let square = |m: &Vec<Vec<u32>>| m.len() == n && m.iter().all(|r| r.len() == n);
        if self.d_u.len() != n || !square(&self.c_u) || !square(&self.v_t) || !square(&self.v_a) {
            return Err(Error::InvalidInput("station state dimensions disagree".into()));
        }
        if let Some(i) = (0..n).find(|&i| self.c_u[i][i] != 0) {
            return Err(Error::InvalidInput(format!("station {i} has customers bound for itself")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AssignmentProblem<T> {
    pub state: StationState,
    pub v_des: Vec<T>,
    pub w: T,
    /// Predicted customer-driven vehicles per station before any new assignment.
    pub base: Vec<T>,
}

impl<T: Scalar> AssignmentProblem<T> {
    pub fn n(&self) -> usize {
        self.state.n()
    }

    /// Predicted customer-driven vehicles per station after assigning `n_v`.
    pub fn predicted(&self, n_v: &[Vec<u32>]) -> Vec<T> {
        let n = self.n();
        (0..n)
            .map(|i| {
                let mut v = self.base[i];
                for j in 0..n {
                    v = v + T::from_usize_lossy(n_v[j][i] as usize) - T::from_usize_lossy(n_v[i][j] as usize);
                }
                v
            })
            .collect()
    }

    pub fn objective(&self, n_v: &[Vec<u32>], n_d: &[Vec<u32>]) -> T {
        let dev = self.predicted(n_v).iter().zip(&self.v_des).fold(T::zero(), |a, (&p, &d)| a + (p - d).abs());
        let assigned: usize = n_v.iter().chain(n_d).flatten().map(|&k| k as usize).sum();
        dev - self.w * T::from_usize_lossy(assigned)
    }

    /// Structural feasibility of an assignment.
    pub fn is_feasible(&self, n_v: &[Vec<u32>], n_d: &[Vec<u32>]) -> bool {
        let s = &self.state;
        let n = self.n();
        (0..n).all(|i| {
            n_v[i].iter().sum::<u32>() <= s.v_e[i]
                && n_d[i].iter().sum::<u32>() <= s.d_u[i]
                && (0..n).all(|j| n_v[i][j] + n_d[i][j] <= s.c_u[i][j])
        })
    }
}

pub fn build_problem<T: Scalar>(
    state: &StationState,
    fleet: FleetConfig,
    lambda: &[T],
    w: T,
) -> Result<AssignmentProblem<T>> {
    state.validate()?;
    let n = state.n();
    if lambda.len() != n {
        return Err(Error::InvalidInput("arrival rates do not match station count".into()));
    }
    let total = lambda.iter().fold(T::zero(), |a, &b| a + b);
    if total <= T::zero() || lambda.iter().any(|&l| l < T::zero()) {
        return Err(Error::InvalidInput("arrival rates must be nonnegative with a positive sum".into()));
    }
    let fleet1 = T::from_usize_lossy(fleet.customer_driven());
    let v_des = lambda.iter().map(|&l| fleet1 * l / total).collect();
    let base = (0..n)
        .map(|i| {
            let inbound: u32 = (0..n).map(|j| state.v_a[j][i] + state.v_t[j][i]).sum();
            T::from_usize_lossy((state.v_e[i] + inbound) as usize)
        })
        .collect();
    Ok(AssignmentProblem { state: state.clone(), v_des, w, base })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AssignmentSolution<T> {
    pub n_v: Vec<Vec<u32>>,
    pub n_d: Vec<Vec<u32>>,
    pub objective: T,
    /// Zero when optimality is proven.
    pub gap: T,
    pub nodes: usize,
    pub variables: usize,
}

impl<T> AssignmentSolution<T> {
    pub fn assigned(&self) -> u32 {
        self.n_v.iter().chain(&self.n_d).flatten().sum()
    }
}

/// The integer program: columns `n_v` then `n_d` (row-major, diagonal included
/// and fixed at zero), then one deviation slack per station.
pub fn assignment_program<T: Scalar>(ap: &AssignmentProblem<T>) -> LinearProgram<T> {
    let s = &ap.state;
    let n = ap.n();
    let nn = n * n;
    let mut lp = LinearProgram::new(2 * nn + n);
    let cnt = |k: u32| T::from_usize_lossy(k as usize);
    for i in 0..n {
        for j in 0..n {
            lp.upper[i * n + j] = Some(cnt(s.c_u[i][j].min(s.v_e[i])));
            lp.upper[nn + i * n + j] = Some(cnt(s.c_u[i][j].min(s.d_u[i])));
            lp.cost[i * n + j] = -ap.w;
            lp.cost[nn + i * n + j] = -ap.w;
        }
        lp.cost[2 * nn + i] = T::one();
    }
    for i in 0..n {
        let cap_v: u32 = (0..n).map(|j| s.c_u[i][j].min(s.v_e[i])).sum();
        if cap_v > s.v_e[i] {
            lp.add_row((0..n).filter(|&j| s.c_u[i][j] > 0).map(|j| (i * n + j, T::one())).collect(), cnt(s.v_e[i]));
        }
        let cap_d: u32 = (0..n).map(|j| s.c_u[i][j].min(s.d_u[i])).sum();
        if cap_d > s.d_u[i] {
            lp.add_row(
                (0..n).filter(|&j| s.c_u[i][j] > 0).map(|j| (nn + i * n + j, T::one())).collect(),
                cnt(s.d_u[i]),
            );
        }
        for j in 0..n {
            let c = s.c_u[i][j];
            if c > 0 && c.min(s.v_e[i]) + c.min(s.d_u[i]) > c {
                lp.add_row(vec![(i * n + j, T::one()), (nn + i * n + j, T::one())], cnt(c));
            }
        }
    }
    // e_i >= +-(v+_i - v_des_i), with v+_i = base_i + inflow - outflow.
    for i in 0..n {
        let mut flow = Vec::new();
        for j in 0..n {
            if j != i {
                if s.c_u[j][i] > 0 && s.v_e[j] > 0 {
                    flow.push((j * n + i, T::one()));
                }
                if s.c_u[i][j] > 0 && s.v_e[i] > 0 {
                    flow.push((i * n + j, -T::one()));
                }
            }
        }
        let offset = ap.base[i] - ap.v_des[i];
        let mut up = flow.clone();
        up.push((2 * nn + i, -T::one()));
        lp.add_row(up, -offset);
        let mut down: Vec<(usize, T)> = flow.iter().map(|&(k, c)| (k, -c)).collect();
        down.push((2 * nn + i, -T::one()));
        lp.add_row(down, offset);
        // v+_i is integral, so e_i also lies above the chord joining the two
        // integers around v_des_i. Tightens the relaxation without cutting off
        // any integer point.
        let lo = ap.v_des[i].floor_int();
        let frac = ap.v_des[i] - lo;
        if !frac.is_zero() {
            // e >= frac + slope * (v+ - lo), slope = 1 - 2 frac.
            let slope = T::one() - (frac + frac);
            let mut chord: Vec<(usize, T)> = flow.into_iter().map(|(k, c)| (k, slope * c)).collect();
            chord.push((2 * nn + i, -T::one()));
            lp.add_row(chord, slope * (lo - ap.base[i]) - frac);
        }
    }
    lp
}

fn unpack<T: Scalar>(n: usize, x: &[T]) -> (Vec<Vec<u32>>, Vec<Vec<u32>>) {
    let get = |k: usize| x[k].to_f64_lossy().round().max(0.0) as u32;
    let n_v = (0..n).map(|i| (0..n).map(|j| get(i * n + j)).collect()).collect();
    let n_d = (0..n).map(|i| (0..n).map(|j| get(n * n + i * n + j)).collect()).collect();
    (n_v, n_d)
}

/// Exact optimum by branch-and-bound over the linear relaxation. Among tied
/// optima the one with the fewest taxi assignments is returned (see
/// [`TAXI_TIE_COST`]), and among those the lexicographically smallest
/// `(n_v, n_d)` when the problem has at most [`LEX_LIMIT`] free integer variables.
pub fn solve_assignment<T: Scalar>(ap: &AssignmentProblem<T>) -> AssignmentSolution<T> {
    let n = ap.n();
    let mut lp = assignment_program(ap);
    let nn = n * n;
    let tie = T::from_f64_lossy(TAXI_TIE_COST);
    for c in &mut lp.cost[nn..2 * nn] {
        *c = *c + tie;
    }
    let mut integer = vec![true; 2 * nn];
    integer.extend(std::iter::repeat_n(false, n));
    let free: Vec<usize> = (0..2 * nn).filter(|&k| lp.upper[k].is_some_and(|u| u > T::zero())).collect();
    let sol = if free.len() <= LEX_LIMIT { solve_ip_lex(&lp, &integer, &free) } else { solve_ip(&lp, &integer) };
    // The all-zero assignment is always feasible, so the program cannot fail.
    assert_eq!(sol.status, LpStatus::Optimal, "assignment program must be solvable");
    let (n_v, n_d) = unpack(n, &sol.x);
    let objective = ap.objective(&n_v, &n_d);
    AssignmentSolution { n_v, n_d, objective, gap: sol.gap, nodes: sol.nodes, variables: lp.n_vars() }
}

/// Exhaustive search over every integer assignment within the variable bounds,
/// keeping the optimum with the fewest taxis, lexicographically smallest among those. Returns `None` when the box
/// holds more than `max_points` points.
pub fn enumerate_assignment<T: Scalar>(ap: &AssignmentProblem<T>, max_points: u64) -> Option<AssignmentSolution<T>> {
    let s = &ap.state;
    let n = ap.n();
    let mut vars = Vec::new();
    let mut caps = Vec::new();
    for kind in 0..2 {
        for i in 0..n {
            for j in 0..n {
                let cap = s.c_u[i][j].min(if kind == 0 { s.v_e[i] } else { s.d_u[i] });
                if cap > 0 {
                    vars.push((kind, i, j));
                    caps.push(cap);
                }
            }
        }
    }
    let points = caps.iter().try_fold(1u64, |a, &c| a.checked_mul(c as u64 + 1))?;
    if points > max_points {
        return None;
    }
    let mut digits = vec![0u32; vars.len()];
    let mut best: Option<(T, u32, Vec<Vec<u32>>, Vec<Vec<u32>>)> = None;
    let tol = T::tolerance();
    loop {
        let mut n_v = vec![vec![0; n]; n];
        let mut n_d = vec![vec![0; n]; n];
        for (&(kind, i, j), &d) in vars.iter().zip(&digits) {
            if kind == 0 {
                n_v[i][j] = d;
            } else {
                n_d[i][j] = d;
            }
        }
        if ap.is_feasible(&n_v, &n_d) {
            let z = ap.objective(&n_v, &n_d);
            let taxis: u32 = n_d.iter().flatten().sum();
            // Digits run in lexicographic order, so only strict improvements replace.
            if best.as_ref().is_none_or(|b| z < b.0 - tol || (z <= b.0 + tol && taxis < b.1)) {
                best = Some((z, taxis, n_v, n_d));
            }
        }
        // Advance the mixed-radix counter, last variable fastest.
        let mut k = digits.len();
        loop {
            if k == 0 {
                let (objective, _, n_v, n_d) = best.expect("zero assignment is feasible");
                return Some(AssignmentSolution {
                    n_v,
                    n_d,
                    objective,
                    gap: T::zero(),
                    nodes: points as usize,
                    variables: 2 * n * n + n,
                });
            }
            k -= 1;
            if digits[k] < caps[k] {
                digits[k] += 1;
                break;
            }
            digits[k] = 0;
        }
    }
}

/// Random state for tests and benchmarks: every count drawn uniformly up to `max_count`.
pub fn random_state(n: usize, max_count: u32, seed: u64) -> StationState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = StationState::empty(n);
    for i in 0..n {
        s.v_e[i] = rng.random_range(0..=max_count);
        s.d_u[i] = rng.random_range(0..=max_count);
        for j in 0..n {
            if i != j {
                s.c_u[i][j] = rng.random_range(0..=max_count);
                s.v_t[i][j] = rng.random_range(0..=max_count);
                s.v_a[i][j] = rng.random_range(0..=max_count);
            }
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_rational::Rational64;

    fn q(a: i64) -> Rational64 {
        Rational64::from_integer(a)
    }

    #[test]
    fn desired_distribution_and_prediction() {
        let mut s = StationState::empty(4);
        let fleet = FleetConfig::new(10, 2).unwrap();
        let ap = build_problem(&s, fleet, &[q(1); 4], q(1)).unwrap();
        assert_eq!(ap.v_des, vec![q(2); 4]);
        assert_eq!(ap.base, vec![q(0); 4]);
        s.v_e = vec![1, 0, 2, 0];
        s.v_t[0][1] = 3;
        s.v_t[2][1] = 1;
        let ap = build_problem(&s, fleet, &[q(1); 4], q(1)).unwrap();
        assert_eq!(ap.base, vec![q(1), q(4), q(2), q(0)]);
    }

    #[test]
    fn nothing_to_assign() {
        let mut s = StationState::empty(3);
        s.v_e = vec![3, 0, 1];
        let ap = build_problem(&s, FleetConfig::new(6, 1).unwrap(), &[q(1), q(1), q(3)], q(2)).unwrap();
        let sol = solve_assignment(&ap);
        assert_eq!(sol.assigned(), 0);
        // |3 - 1| + |0 - 1| + |1 - 3|
        assert_eq!(sol.objective, q(5));
    }

    #[test]
    fn single_customer_drives_when_waiting_is_costly() {
        let mut s = StationState::empty(2);
        s.v_e = vec![1, 0];
        s.c_u[0][1] = 1;
        let ap = build_problem(&s, FleetConfig::new(2, 1).unwrap(), &[q(1), q(1)], q(10)).unwrap();
        let sol = solve_assignment(&ap);
        assert_eq!(sol.n_v[0][1], 1);
        assert_eq!(sol.gap, q(0));
    }

    #[test]
    fn matches_enumeration_on_small_states() {
        for seed in 0..30 {
            let s = random_state(3, 2, seed);
            let lambda = [Rational64::new(1, 2), q(1), Rational64::new(3, 2)];
            let ap = build_problem(&s, FleetConfig::new(9, 2).unwrap(), &lambda, Rational64::new(3, 4)).unwrap();
            let sol = solve_assignment(&ap);
            let oracle = enumerate_assignment(&ap, 5_000_000).unwrap();
            assert_eq!(sol.objective, oracle.objective, "seed {seed}");
            assert_eq!((sol.n_v, sol.n_d), (oracle.n_v, oracle.n_d), "seed {seed}");
        }
    }
}

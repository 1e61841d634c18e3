//! Bounded-variable primal simplex and best-bound branch-and-bound.
//!
//! Problems have the form `min c'x` subject to `A x <= b` and `l <= x <= u`
//! with finite lower bounds. Everything is generic over [`Scalar`], so small
//! instances can be solved in exact rational arithmetic.

use serde::Serialize;

use crate::num::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct LinearProgram<T> {
    pub cost: Vec<T>,
    pub lower: Vec<T>,
    /// `None` is unbounded above.
    pub upper: Vec<Option<T>>,
    /// Sparse rows `sum a_j x_j <= b`.
    pub rows: Vec<(Vec<(usize, T)>, T)>,
}

impl<T: Scalar> LinearProgram<T> {
    pub fn new(n: usize) -> Self {
        Self { cost: vec![T::zero(); n], lower: vec![T::zero(); n], upper: vec![None; n], rows: Vec::new() }
    }

    pub fn n_vars(&self) -> usize {
        self.cost.len()
    }

    pub fn add_row(&mut self, coeffs: Vec<(usize, T)>, rhs: T) {
        self.rows.push((coeffs, rhs));
    }

    pub fn objective(&self, x: &[T]) -> T {
        self.cost.iter().zip(x).fold(T::zero(), |a, (&c, &v)| a + c * v)
    }

    /// Largest bound or row violation of `x`.
    pub fn violation(&self, x: &[T]) -> T {
        let mut worst = T::zero();
        for (j, &v) in x.iter().enumerate() {
            worst = worst.max_of(self.lower[j] - v);
            if let Some(u) = self.upper[j] {
                worst = worst.max_of(v - u);
            }
        }
        for (coeffs, b) in &self.rows {
            let lhs = coeffs.iter().fold(T::zero(), |a, &(j, c)| a + c * x[j]);
            worst = worst.max_of(lhs - *b);
        }
        worst
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
    IterationLimit,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LpSolution<T> {
    pub status: LpStatus,
    pub x: Vec<T>,
    pub objective: T,
    pub pivots: usize,
}

/// Consecutive degenerate pivots before switching to Bland's rule.
const DEGENERATE_LIMIT: usize = 50;

struct Tableau<T> {
    m: usize,
    cols: usize,
    a: Vec<T>,
    basis: Vec<usize>,
    xb: Vec<T>,
    at_upper: Vec<bool>,
    is_basic: Vec<bool>,
    lo: Vec<T>,
    up: Vec<Option<T>>,
    d: Vec<T>,
    tol: T,
    pivots: usize,
}

impl<T: Scalar> Tableau<T> {
    fn row(&self, r: usize) -> &[T] {
        &self.a[r * self.cols..(r + 1) * self.cols]
    }

    fn value(&self, j: usize) -> T {
        if self.at_upper[j] {
            self.up[j].expect("upper bound")
        } else {
            self.lo[j]
        }
    }

    fn price(&mut self, cost: &[T]) {
        self.d = cost.to_vec();
        for r in 0..self.m {
            let cb = cost[self.basis[r]];
            if cb.is_zero() {
                continue;
            }
            for j in 0..self.cols {
                let v = self.a[r * self.cols + j];
                if !v.is_zero() {
                    self.d[j] = self.d[j] - cb * v;
                }
            }
        }
    }

    fn entering(&self, bland: bool) -> Option<(usize, bool)> {
        let mut best: Option<(usize, bool, T)> = None;
        for j in 0..self.cols {
            if self.is_basic[j] || self.up[j] == Some(self.lo[j]) {
                continue;
            }
            let dj = self.d[j];
            let candidate = if !self.at_upper[j] && dj < -self.tol {
                Some(true)
            } else if self.at_upper[j] && dj > self.tol {
                Some(false)
            } else {
                None
            };
            if let Some(increase) = candidate {
                if bland {
                    return Some((j, increase));
                }
                if best.as_ref().is_none_or(|b| dj.abs() > b.2) {
                    best = Some((j, increase, dj.abs()));
                }
            }
        }
        best.map(|(j, inc, _)| (j, inc))
    }

    /// One simplex step. `Ok(false)` means optimal, `Err(())` unbounded.
    fn step(&mut self, bland: bool, degenerate: &mut usize) -> Result<bool, ()> {
        let Some((q, increase)) = self.entering(bland) else {
            return Ok(false);
        };
        let sign = if increase { T::one() } else { -T::one() };
        // Basic variable r moves by rate[r] * t as the entering one moves by t.
        let mut t_best: Option<T> = self.up[q].map(|u| u - self.lo[q]);
        let mut leave: Option<(usize, bool)> = None;
        let mut best_alpha = T::zero();
        for r in 0..self.m {
            let alpha = self.a[r * self.cols + q];
            if alpha.abs() <= self.tol {
                continue;
            }
            let rate = -sign * alpha;
            let b = self.basis[r];
            let (t, to_upper) = if rate < T::zero() {
                ((self.xb[r] - self.lo[b]) / (-rate), false)
            } else if let Some(u) = self.up[b] {
                ((u - self.xb[r]) / rate, true)
            } else {
                continue;
            };
            let t = t.max_of(T::zero());
            let better = match t_best {
                None => true,
                Some(tb) => {
                    if t < tb - self.tol {
                        true
                    } else if t <= tb + self.tol && leave.is_some() {
                        if bland {
                            b < self.basis[leave.unwrap().0]
                        } else {
                            alpha.abs() > best_alpha
                        }
                    } else {
                        // Prefer a pivot over a bound flip on ties to keep the basis moving.
                        leave.is_none() && t <= tb + self.tol
                    }
                }
            };
            if better {
                t_best = Some(t);
                leave = Some((r, to_upper));
                best_alpha = alpha.abs();
            }
        }
        let Some(t) = t_best else {
            return Err(());
        };
        if t.is_zero() {
            *degenerate += 1;
        } else {
            *degenerate = 0;
        }
        for r in 0..self.m {
            let alpha = self.a[r * self.cols + q];
            if !alpha.is_zero() {
                self.xb[r] = self.xb[r] - sign * alpha * t;
            }
        }
        let entering_value = self.value(q) + sign * t;
        match leave {
            None => {
                self.at_upper[q] = increase;
            }
            Some((r, to_upper)) => {
                let b = self.basis[r];
                self.is_basic[b] = false;
                self.at_upper[b] = to_upper;
                self.is_basic[q] = true;
                self.at_upper[q] = false;
                self.basis[r] = q;
                self.xb[r] = entering_value;
                self.pivot(r, q);
            }
        }
        Ok(true)
    }

    fn pivot(&mut self, r: usize, q: usize) {
        self.pivots += 1;
        let cols = self.cols;
        let p = self.a[r * cols + q];
        for j in 0..cols {
            let v = self.a[r * cols + j];
            if !v.is_zero() {
                self.a[r * cols + j] = v / p;
            }
        }
        let prow: Vec<(usize, T)> =
            self.row(r).iter().enumerate().filter(|(_, v)| !v.is_zero()).map(|(j, &v)| (j, v)).collect();
        for i in 0..self.m {
            if i == r {
                continue;
            }
            let f = self.a[i * cols + q];
            if f.is_zero() {
                continue;
            }
            for &(j, v) in &prow {
                let cell = &mut self.a[i * cols + j];
                *cell = *cell - f * v;
            }
            self.a[i * cols + q] = T::zero();
        }
        let f = self.d[q];
        if !f.is_zero() {
            for &(j, v) in &prow {
                self.d[j] = self.d[j] - f * v;
            }
            self.d[q] = T::zero();
        }
    }

    fn run(&mut self, cost: &[T], limit: usize) -> LpStatus {
        self.price(cost);
        let mut degenerate = 0;
        let mut steps = 0;
        loop {
            if steps >= limit {
                return LpStatus::IterationLimit;
            }
            steps += 1;
            match self.step(degenerate > DEGENERATE_LIMIT, &mut degenerate) {
                Ok(true) => {}
                Ok(false) => return LpStatus::Optimal,
                Err(()) => return LpStatus::Unbounded,
            }
        }
    }
}

/// Solves a linear program with the two-phase bounded primal simplex.
pub fn solve_lp<T: Scalar>(lp: &LinearProgram<T>) -> LpSolution<T> {
    let n = lp.n_vars();
    let m = lp.rows.len();
    let fail = |status, pivots| LpSolution { status, x: lp.lower.clone(), objective: T::zero(), pivots };
    if (0..n).any(|j| lp.upper[j].is_some_and(|u| u < lp.lower[j])) {
        return fail(LpStatus::Infeasible, 0);
    }
    // Columns: structural, one slack per row, one artificial per row.
    let cols = n + 2 * m;
    let mut a = vec![T::zero(); m * cols];
    let mut xb = Vec::with_capacity(m);
    let mut basis = Vec::with_capacity(m);
    for (r, (coeffs, b)) in lp.rows.iter().enumerate() {
        let mut slack = *b;
        for &(j, c) in coeffs {
            a[r * cols + j] = a[r * cols + j] + c;
            slack = slack - c * lp.lower[j];
        }
        a[r * cols + n + r] = T::one();
        if slack >= T::zero() {
            basis.push(n + r);
            xb.push(slack);
        } else {
            // Negate the row so the artificial enters with a unit coefficient.
            for v in &mut a[r * cols..(r + 1) * cols] {
                *v = -*v;
            }
            a[r * cols + n + m + r] = T::one();
            basis.push(n + m + r);
            xb.push(-slack);
        }
    }
    let mut lo = lp.lower.clone();
    lo.extend(std::iter::repeat_n(T::zero(), 2 * m));
    let mut up = lp.upper.clone();
    up.extend(std::iter::repeat_n(None, m));
    up.extend((0..m).map(|r| if basis[r] == n + m + r { None } else { Some(T::zero()) }));
    let mut is_basic = vec![false; cols];
    for &b in &basis {
        is_basic[b] = true;
    }
    let tol = if T::tolerance().is_zero() { T::zero() } else { T::tolerance() * T::from_f64_lossy(1e3) };
    let mut tab =
        Tableau { m, cols, a, basis, xb, at_upper: vec![false; cols], is_basic, lo, up, d: Vec::new(), tol, pivots: 0 };
    let limit = 50 * (cols + m) + 1000;

    let artificial: Vec<usize> = (0..m).filter(|&r| tab.basis[r] == n + m + r).map(|r| n + m + r).collect();
    if !artificial.is_empty() {
        let mut c1 = vec![T::zero(); cols];
        for &j in &artificial {
            c1[j] = T::one();
        }
        match tab.run(&c1, limit) {
            LpStatus::Optimal => {}
            s => return fail(s, tab.pivots),
        }
        let infeas = (0..m).filter(|&r| tab.basis[r] >= n + m).fold(T::zero(), |s, r| s + tab.xb[r]);
        let scale = lp.rows.iter().fold(T::one(), |s, (_, b)| s.max_of(b.abs()));
        if infeas > tab.tol * scale {
            return fail(LpStatus::Infeasible, tab.pivots);
        }
        for j in artificial {
            tab.up[j] = Some(T::zero());
        }
        // Pivot zero-valued artificials out where a real column allows it.
        for r in 0..m {
            if tab.basis[r] < n + m {
                continue;
            }
            let q = (0..n + m).find(|&j| !tab.is_basic[j] && tab.a[r * cols + j].abs() > tab.tol);
            if let Some(q) = q {
                let b = tab.basis[r];
                let v = tab.value(q);
                tab.is_basic[b] = false;
                tab.at_upper[b] = false;
                tab.is_basic[q] = true;
                tab.at_upper[q] = false;
                tab.basis[r] = q;
                tab.xb[r] = v;
                tab.pivot(r, q);
            }
        }
    }
    let mut c2 = lp.cost.clone();
    c2.extend(std::iter::repeat_n(T::zero(), 2 * m));
    let status = tab.run(&c2, limit);
    if status != LpStatus::Optimal {
        return fail(status, tab.pivots);
    }
    let mut x: Vec<T> = (0..n).map(|j| tab.value(j)).collect();
    for r in 0..m {
        if tab.basis[r] < n {
            x[tab.basis[r]] = tab.xb[r];
        }
    }
    LpSolution { status, objective: lp.objective(&x), x, pivots: tab.pivots }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IpSolution<T> {
    pub status: LpStatus,
    pub x: Vec<T>,
    pub objective: T,
    /// Incumbent minus the best open bound at exit; zero proves optimality.
    pub gap: T,
    pub nodes: usize,
}

fn integrality_tol<T: Scalar>() -> T {
    if T::tolerance().is_zero() {
        T::zero()
    } else {
        T::from_f64_lossy(1e-7)
    }
}

/// Index of the most fractional integer variable, lowest index on ties.
fn branch_variable<T: Scalar>(x: &[T], integer: &[bool]) -> Option<usize> {
    let half = T::one() / (T::one() + T::one());
    let tol = integrality_tol::<T>();
    let mut best: Option<(usize, T)> = None;
    for (j, &v) in x.iter().enumerate() {
        if !integer[j] {
            continue;
        }
        let f = v - v.floor_int();
        if f <= tol || f >= T::one() - tol {
            continue;
        }
        let dist = (f - half).abs();
        if best.as_ref().is_none_or(|b| dist < b.1) {
            best = Some((j, dist));
        }
    }
    best.map(|b| b.0)
}

fn round_int<T: Scalar>(v: T) -> T {
    let half = T::one() / (T::one() + T::one());
    (v + half).floor_int()
}

/// Rounds integer variables of a relaxed point down, fixes them, and re-solves
/// for the continuous ones. Gives an early incumbent for pruning.
fn round_down_incumbent<T: Scalar>(lp: &LinearProgram<T>, integer: &[bool], x: &[T]) -> Option<(Vec<T>, T)> {
    if branch_variable(x, integer).is_none() {
        return None;
    }
    let mut fixed = lp.clone();
    for j in 0..lp.n_vars() {
        if integer[j] {
            let r = round_int(x[j]);
            let v = if (x[j] - r).abs() <= integrality_tol::<T>() { r } else { x[j].floor_int() };
            let v = v.max_of(lp.lower[j]);
            fixed.lower[j] = v;
            fixed.upper[j] = Some(v);
        }
    }
    let s = solve_lp(&fixed);
    (s.status == LpStatus::Optimal).then(|| (s.x, s.objective))
}

struct Node<T> {
    id: usize,
    bound: T,
    lower: Vec<T>,
    upper: Vec<Option<T>>,
}

/// Branch-and-bound with best-bound node selection and most-fractional branching.
pub fn solve_ip<T: Scalar>(lp: &LinearProgram<T>, integer: &[bool]) -> IpSolution<T> {
    let root = solve_lp(lp);
    if root.status != LpStatus::Optimal {
        return IpSolution { status: root.status, x: root.x, objective: T::zero(), gap: T::zero(), nodes: 1 };
    }
    let mut incumbent = round_down_incumbent(lp, integer, &root.x);
    let mut open = vec![Node { id: 0, bound: root.objective, lower: lp.lower.clone(), upper: lp.upper.clone() }];
    let mut solved = vec![Some(root)];
    let mut nodes = 1;
    let mut next_id = 1;
    let tol = integrality_tol::<T>();
    while !open.is_empty() {
        let k = (0..open.len())
            .min_by(|&a, &b| {
                open[a].bound.partial_cmp(&open[b].bound).unwrap_or(std::cmp::Ordering::Equal).then(open[a].id.cmp(&open[b].id))
            })
            .expect("open node");
        let node = open.swap_remove(k);
        if let Some((_, z)) = &incumbent {
            if node.bound >= *z - tol {
                // Best bound cannot improve: every open node is at least as bad.
                open.push(node);
                break;
            }
        }
        let sol = solved[node.id].take().expect("node solved once");
        let Some(j) = branch_variable(&sol.x, integer) else {
            let mut x = sol.x;
            for (v, &int) in x.iter_mut().zip(integer) {
                if int {
                    *v = round_int(*v);
                }
            }
            let z = lp.objective(&x);
            if incumbent.as_ref().is_none_or(|(_, zi)| z < *zi) {
                incumbent = Some((x, z));
            }
            continue;
        };
        let v = sol.x[j].floor_int();
        let children = [(None, Some(v)), (Some(v + T::one()), None)];
        for (lo_new, up_new) in children {
            let mut child = LinearProgram {
                cost: lp.cost.clone(),
                lower: node.lower.clone(),
                upper: node.upper.clone(),
                rows: Vec::new(),
            };
            if let Some(l) = lo_new {
                child.lower[j] = l;
            }
            if let Some(u) = up_new {
                child.upper[j] = Some(u);
            }
            let relaxed = LinearProgram { rows: lp.rows.clone(), ..child };
            let s = solve_lp(&relaxed);
            nodes += 1;
            solved.push(None);
            if s.status == LpStatus::Optimal {
                let keep = incumbent.as_ref().is_none_or(|(_, z)| s.objective < *z - tol);
                if keep {
                    open.push(Node { id: next_id, bound: s.objective, lower: relaxed.lower, upper: relaxed.upper });
                    solved[next_id] = Some(s);
                }
            }
            next_id += 1;
        }
    }
    match incumbent {
        Some((x, z)) => {
            let best_open = open.iter().map(|n| n.bound).fold(z, |a, b| a.min_of(b));
            IpSolution { status: LpStatus::Optimal, x, objective: z, gap: (z - best_open).max_of(T::zero()), nodes }
        }
        None => IpSolution { status: LpStatus::Infeasible, x: lp.lower.clone(), objective: T::zero(), gap: T::zero(), nodes },
    }
}

/// Among optimal integer points, the one that is lexicographically smallest
/// over `order`. Each coordinate is minimized in turn with the objective held
/// at its optimum.
pub fn solve_ip_lex<T: Scalar>(lp: &LinearProgram<T>, integer: &[bool], order: &[usize]) -> IpSolution<T> {
    let first = solve_ip(lp, integer);
    if first.status != LpStatus::Optimal {
        return first;
    }
    let z = first.objective;
    let mut fixed = lp.clone();
    let coeffs: Vec<(usize, T)> =
        lp.cost.iter().enumerate().filter(|(_, c)| !c.is_zero()).map(|(j, &c)| (j, c)).collect();
    let slack = if T::tolerance().is_zero() { T::zero() } else { T::from_f64_lossy(1e-9) * z.abs().max_of(T::one()) };
    fixed.add_row(coeffs, z + slack);
    let mut x = first.x.clone();
    let mut nodes = first.nodes;
    for &k in order {
        let mut probe = fixed.clone();
        probe.cost = vec![T::zero(); lp.n_vars()];
        probe.cost[k] = T::one();
        let s = solve_ip(&probe, integer);
        nodes += s.nodes;
        if s.status != LpStatus::Optimal {
            break;
        }
        let v = round_int(s.x[k]);
        fixed.lower[k] = v;
        fixed.upper[k] = Some(v);
        x = s.x;
    }
    IpSolution { status: LpStatus::Optimal, objective: lp.objective(&x), x, gap: first.gap, nodes }
}

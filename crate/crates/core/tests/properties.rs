use modnet::assignment::{build_problem, enumerate_assignment, solve_assignment, StationState};
use modnet::generate::{generate_scenario, ScenarioStyle};
use modnet::jackson::mva;
use modnet::matrix::Matrix;
use modnet::mrp::{demand_imbalance, solve_mrp, utilization_spread, FleetModel};
use modnet::network::build_network;
use modnet::scenario::{FleetConfig, Scenario, Units};
use modnet::sim::rebalance_drivers_step;
use modnet::sizing::{min_fleet, min_fleet_exhaustive};
use num_rational::Rational64;
use proptest::prelude::*;

fn state(n: usize, counts: &[u32]) -> StationState {
    let mut s = StationState::empty(n);
    let mut it = counts.iter().copied().cycle();
    for i in 0..n {
        s.v_e[i] = it.next().unwrap();
        s.d_u[i] = it.next().unwrap();
        for j in 0..n {
            if i != j {
                s.c_u[i][j] = it.next().unwrap();
                s.v_t[i][j] = it.next().unwrap();
            }
        }
    }
    s
}

/// Cheapest way to ship `min(sum surplus, sum deficit)` units, by brute force.
fn brute_dispatch(surplus: &[u32], deficit: &[u32], t: &Matrix<f64>) -> f64 {
    let n = surplus.len();
    let want = surplus.iter().sum::<u32>().min(deficit.iter().sum());
    let pairs: Vec<(usize, usize)> =
        (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).filter(|&(i, j)| surplus[i] > 0 && deficit[j] > 0).collect();
    fn go(k: usize, pairs: &[(usize, usize)], sup: &mut [u32], def: &mut [u32], sent: u32, want: u32, cost: f64, t: &Matrix<f64>) -> f64 {
        if sent == want {
            return cost;
        }
        if k == pairs.len() {
            return f64::INFINITY;
        }
        let (i, j) = pairs[k];
        let mut best = f64::INFINITY;
        for x in 0..=sup[i].min(def[j]) {
            sup[i] -= x;
            def[j] -= x;
            best = best.min(go(k + 1, pairs, sup, def, sent + x, want, cost + x as f64 * t[(i, j)], t));
            sup[i] += x;
            def[j] += x;
        }
        best
    }
    go(0, &pairs, &mut surplus.to_vec(), &mut deficit.to_vec(), 0, want, 0.0, t)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn linear_rebalancing_balances_and_conserves(n in 2usize..9, seed in 0u64..10_000) {
        let s = generate_scenario(n, seed, ScenarioStyle::Uniform).unwrap();
        let sol = solve_mrp(&s).unwrap();
        let (s1, s2) = utilization_spread(&s, &sol.params).unwrap();
        prop_assert!(s1 < 1e-9);
        prop_assert!(s2.unwrap_or(0.0) < 1e-9);
        let imb = demand_imbalance(&s);
        for i in 0..n {
            let out_b: f64 = (0..n).map(|j| sol.beta[(i, j)] - sol.beta[(j, i)]).sum();
            let out_a: f64 = (0..n).map(|j| sol.alpha[(i, j)] - sol.alpha[(j, i)]).sum();
            prop_assert!((out_b - imb[i]).abs() < 1e-9);
            prop_assert!((out_a + imb[i]).abs() < 1e-9);
            for j in 0..n {
                prop_assert!(sol.beta[(i, j)] >= 0.0 && sol.alpha[(i, j)] >= 0.0);
                prop_assert!(sol.beta[(i, j)] <= s.lambda[i] * s.p[(i, j)] + 1e-12);
            }
        }
    }

    #[test]
    fn exact_rational_rebalancing_conserves(
        lam in proptest::collection::vec(1i64..6, 3),
        w in proptest::collection::vec(1i64..5, 6),
        tt in proptest::collection::vec(1i64..9, 6),
    ) {
        let r = Rational64::from_integer;
        let mut k = 0;
        let mut p = Matrix::from_fn(3, 3, |i, j| if i == j { r(0) } else { k += 1; r(w[k - 1]) });
        for i in 0..3 {
            let sum = (0..3).fold(r(0), |a, j| a + p[(i, j)]);
            for j in 0..3 {
                p[(i, j)] /= sum;
            }
        }
        let mut k = 0;
        let t = Matrix::from_fn(3, 3, |i, j| if i == j { r(0) } else { k += 1; r(tt[k - 1]) });
        let s = Scenario { n: 3, lambda: lam.iter().map(|&l| r(l)).collect(), p, t, coords: None, units: Units::default() };
        let sol = solve_mrp(&s).unwrap();
        let imb = demand_imbalance(&s);
        for i in 0..3 {
            let out = (0..3).fold(r(0), |a, j| a + sol.beta[(i, j)] - sol.beta[(j, i)]);
            prop_assert_eq!(out, imb[i]);
        }
        let (s1, s2) = utilization_spread(&s, &sol.params).unwrap();
        prop_assert_eq!(s1, r(0));
        prop_assert_eq!(s2.unwrap_or(r(0)), r(0));
    }

    #[test]
    fn mva_conserves_population_and_availability_grows(n in 2usize..6, seed in 0u64..10_000, m in 1usize..60) {
        let s = generate_scenario(n, seed, ScenarioStyle::Uniform).unwrap();
        let net = build_network(&s.lambda, &s.p, &s.t, m).unwrap();
        let r = mva(&net, m).unwrap();
        prop_assert!((r.queue.iter().sum::<f64>() - m as f64).abs() < 1e-9 * m as f64);
        for w in r.levels.windows(2) {
            for i in 0..n {
                prop_assert!(w[1].availability[i] >= w[0].availability[i] - 1e-12);
                prop_assert!(w[1].availability[i] <= 1.0 + 1e-12);
            }
        }
    }

    #[test]
    fn assignment_matches_enumeration(
        n in 2usize..4,
        counts in proptest::collection::vec(0u32..3, 8..20),
        lam in proptest::collection::vec(0.1f64..2.0, 3),
        w in 0.2f64..3.0,
    ) {
        let st = state(n, &counts);
        let ap = build_problem(&st, FleetConfig::new(30, 6).unwrap(), &lam[..n], w).unwrap();
        let bb = solve_assignment(&ap);
        let brute = enumerate_assignment(&ap, 1 << 22).unwrap();
        prop_assert!(ap.is_feasible(&bb.n_v, &bb.n_d));
        prop_assert!((bb.objective - brute.objective).abs() < 1e-9);
    }

    #[test]
    fn assignment_count_grows_with_reward(
        counts in proptest::collection::vec(0u32..3, 8..30),
        w1 in 0.0f64..2.0,
        dw in 0.0f64..2.0,
    ) {
        let st = state(3, &counts);
        let lam = [1.0, 0.6, 1.4];
        let fleet = FleetConfig::new(30, 6).unwrap();
        let lo = solve_assignment(&build_problem(&st, fleet, &lam, w1).unwrap());
        let hi = solve_assignment(&build_problem(&st, fleet, &lam, w1 + dw).unwrap());
        prop_assert!(hi.assigned() >= lo.assigned());
    }

    #[test]
    fn dispatch_is_a_cheapest_matching(
        have in proptest::collection::vec(0u32..5, 3),
        idle in proptest::collection::vec(0u32..4, 3),
        target in proptest::collection::vec(0u32..5, 3),
        tt in proptest::collection::vec(1u32..9, 6),
    ) {
        let mut k = 0;
        let t = Matrix::from_fn(3, 3, |i, j| if i == j { 0.0 } else { k += 1; tt[k - 1] as f64 });
        let orders = rebalance_drivers_step(&have, &idle, &target, &t).unwrap();
        let surplus: Vec<u32> = (0..3).map(|i| have[i].saturating_sub(target[i]).min(idle[i])).collect();
        let deficit: Vec<u32> = (0..3).map(|i| target[i].saturating_sub(have[i])).collect();
        let mut sent = [0u32; 3];
        let mut got = [0u32; 3];
        let mut cost = 0.0;
        for o in &orders {
            sent[o.from] += o.count;
            got[o.to] += o.count;
            cost += o.count as f64 * t[(o.from, o.to)];
        }
        for i in 0..3 {
            prop_assert!(sent[i] <= surplus[i]);
            prop_assert!(got[i] <= deficit[i]);
        }
        let total: u32 = sent.iter().sum();
        prop_assert_eq!(total, surplus.iter().sum::<u32>().min(deficit.iter().sum()));
        prop_assert!((cost - brute_dispatch(&surplus, &deficit, &t)).abs() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn bisection_agrees_with_scan(
        n in 3usize..6,
        seed in 0u64..10_000,
        ratio in prop::sample::select(vec![2.0, 2.5, 3.0, 4.0, 6.0]),
        threshold in 0.6f64..0.92,
    ) {
        let s = generate_scenario(n, seed, ScenarioStyle::Uniform).unwrap();
        let rp = solve_mrp(&s).unwrap().params;
        let model = FleetModel::new(&s, &rp).unwrap();
        let fast = min_fleet(&model, ratio, threshold, 300).ok().map(|f| f.m_d);
        let scan = min_fleet_exhaustive(&model, ratio, threshold, 300).ok().map(|f| f.m_d);
        prop_assert_eq!(fast, scan);
    }
}

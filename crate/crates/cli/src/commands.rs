use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use modnet::assignment::{build_problem, random_state, solve_assignment, StationState};
use modnet::generate::{generate_scenario, ScenarioStyle};
use modnet::ingest::{ingest, EstimationConfig, TimeWindow};
use modnet::mmrp::{pareto_sweep, MmrpConfig};
use modnet::mrp::{driver_cost, rebalancing_cost, solve_mrp, utilization_spread, FleetModel};
use modnet::scenario::{FleetConfig, RebalanceParams, Scenario};
use modnet::sim::{run_sim, wait_trend, PolicyConfig, SimConfig, SimMetrics, SimMode, TravelModel};
use modnet::sizing::{size_fleet, SizingConfig};
use serde::Serialize;
use serde_json::json;

use crate::args::*;
use crate::manifest::{digest_file, num, sha256_hex, Outputs, RunManifest, Versions};

pub struct Invocation {
    pub cli: Cli,
    pub argv: Vec<String>,
}

fn subcommand_name(c: &Command) -> &'static str {
    match c {
        Command::Gen(_) => "gen",
        Command::Ingest(_) => "ingest",
        Command::Analyze(_) => "analyze",
        Command::Rebalance(RebalanceCommand::Lp(_)) => "rebalance lp",
        Command::Rebalance(RebalanceCommand::Nlp(_)) => "rebalance nlp",
        Command::Size(_) => "size",
        Command::Simulate(_) => "simulate",
        Command::Assign(_) => "assign",
        Command::Replay(_) => "replay",
    }
}

fn input_files(cli: &Cli) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = cli.common.scenario.iter().cloned().collect();
    match &cli.command {
        Command::Ingest(a) => v.push(a.trips.clone()),
        Command::Analyze(a) => v.extend(a.params.clone()),
        Command::Simulate(a) => v.extend(a.params.iter().chain(&a.config).cloned()),
        Command::Assign(a) => v.extend(a.state.clone()),
        _ => {}
    }
    v
}

fn missing_scenario() -> anyhow::Error {
    use clap::CommandFactory;
    Cli::command()
        .error(clap::error::ErrorKind::MissingRequiredArgument, "--scenario <PATH> is required for this subcommand")
        .into()
}

fn scenario(common: &Common) -> Result<Scenario<f64>> {
    let path = common.scenario.as_ref().ok_or_else(missing_scenario)?;
    Scenario::load_validated(path).with_context(|| format!("loading scenario {}", path.display()))
}

fn fleet(f: &FleetArgs) -> Result<FleetConfig> {
    Ok(FleetConfig::new(f.m_v, f.m_d)?)
}

fn load_params(path: &Path, s: &Scenario<f64>) -> Result<RebalanceParams<f64>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let rp: RebalanceParams<f64> = serde_json::from_str(&text)?;
    rp.validate(s)?;
    Ok(rp)
}

fn params_or_linear(path: Option<&PathBuf>, s: &Scenario<f64>) -> Result<RebalanceParams<f64>> {
    match path {
        Some(p) => load_params(p, s),
        None => Ok(solve_mrp(s)?.params),
    }
}

pub fn execute(inv: Invocation) -> Result<()> {
    let Invocation { cli, argv } = inv;
    let started = Instant::now();
    let inputs = input_files(&cli).iter().map(|p| digest_file(p)).collect::<Result<Vec<_>>>()?;
    let config = json!({ "command": &cli.command, "scenario": &cli.common.scenario, "seed": cli.common.seed });
    let mut hashed = serde_json::to_string(&config)?;
    for d in &inputs {
        hashed.push_str(&d.sha256);
    }
    let mut out = Outputs::new(&cli.common.out)?;
    let common = &cli.common;
    match &cli.command {
        Command::Gen(a) => gen(common, a, &mut out)?,
        Command::Ingest(a) => ingest_cmd(common, a, &mut out)?,
        Command::Analyze(a) => analyze(common, a, &mut out)?,
        Command::Rebalance(RebalanceCommand::Lp(a)) => rebalance_lp(common, a, &mut out)?,
        Command::Rebalance(RebalanceCommand::Nlp(a)) => rebalance_nlp(common, a, &mut out)?,
        Command::Size(a) => size(common, a, &mut out)?,
        Command::Simulate(a) => simulate(common, a, &mut out)?,
        Command::Assign(a) => assign(common, a, &mut out)?,
        Command::Replay(_) => bail!("replay cannot be nested"),
    }
    out.finish(RunManifest {
        subcommand: subcommand_name(&cli.command).to_string(),
        argv,
        config,
        config_hash: sha256_hex(hashed.as_bytes()),
        seed: cli.common.seed,
        jobs: cli.common.jobs,
        inputs,
        versions: Versions { modnet_core: modnet::VERSION.to_string(), modnet_cli: env!("CARGO_PKG_VERSION").to_string() },
        wall_time_s: started.elapsed().as_secs_f64(),
        outputs: Vec::new(),
    })
}

fn station_rows(s: &Scenario<f64>) -> Vec<Vec<String>> {
    (0..s.n)
        .map(|i| {
            let [x, y] = s.coords.as_ref().map_or([f64::NAN; 2], |c| c[i]);
            vec![i.to_string(), num(x), num(y), num(s.lambda[i])]
        })
        .collect()
}

fn gen(common: &Common, a: &GenArgs, out: &mut Outputs) -> Result<()> {
    let style = match a.style {
        Style::Uniform => ScenarioStyle::Uniform,
        Style::Grid => ScenarioStyle::Grid,
    };
    let s = generate_scenario(a.stations, common.seed, style)?;
    out.write_json("scenario.json", &s)?;
    out.write_csv("stations.csv", &["station", "x", "y", "lambda"], &station_rows(&s))
}

fn ingest_cmd(common: &Common, a: &IngestArgs, out: &mut Outputs) -> Result<()> {
    let window = match (&a.start, &a.end) {
        (Some(s), Some(e)) => TimeWindow::parse(s, e)?,
        _ => TimeWindow::unbounded(),
    };
    let cfg = EstimationConfig { smoothing: a.smoothing, lambda_floor: a.lambda_floor, outlier_factor: a.outlier_factor };
    let (parsed, clusters, est) = ingest(&a.trips, window, a.stations, common.seed, &cfg)?;
    let s = &est.scenario;
    out.write_json("scenario.json", s)?;
    let rows: Vec<Vec<String>> = station_rows(s)
        .into_iter()
        .enumerate()
        .map(|(i, mut r)| {
            r.push(est.counts[i].iter().sum::<usize>().to_string());
            r.push(est.floored.contains(&i).to_string());
            r
        })
        .collect();
    out.write_csv("stations.csv", &["station", "x", "y", "lambda", "pickups", "floored"], &rows)?;
    out.write_json(
        "summary.json",
        &json!({
            "records": parsed.records.len(),
            "malformed": parsed.malformed,
            "outside_window": parsed.outside_window,
            "dropped_outliers": est.dropped_outliers,
            "filled_pairs": est.filled_pairs,
            "fill_speed": est.fill_speed,
            "inertia": clusters.inertia,
            "floored": est.floored,
        }),
    )
}

#[derive(Serialize)]
struct AnalyzeSummary {
    m_v: usize,
    m_d: usize,
    min_availability: f64,
    max_availability: f64,
    identity_residual: f64,
    utilization_spread_customer: f64,
    utilization_spread_taxi: Option<f64>,
    rebalancing_cost: f64,
    driver_cost: f64,
}

fn analyze(common: &Common, a: &AnalyzeArgs, out: &mut Outputs) -> Result<()> {
    let s = scenario(common)?;
    let fc = fleet(&a.fleet)?;
    let rp = params_or_linear(a.params.as_ref(), &s)?;
    let model = FleetModel::new(&s, &rp)?;
    let pm = model.metrics(fc);
    let g2 = |i: usize| model.taxi.as_ref().map_or(f64::NAN, |t| t.gamma[i]);
    let rows: Vec<Vec<String>> = (0..s.n)
        .map(|i| {
            vec![
                i.to_string(),
                num(s.lambda[i]),
                num(pm.q[i]),
                num(model.customer.gamma[i]),
                num(g2(i)),
                num(pm.a1[i]),
                num(pm.a2[i]),
                num(pm.a_pass[i]),
                num(pm.throughput1[i]),
                num(pm.throughput2[i]),
            ]
        })
        .collect();
    out.write_csv(
        "availability.csv",
        &["station", "lambda", "q", "gamma1", "gamma2", "a1", "a2", "a_pass", "throughput1", "throughput2"],
        &rows,
    )?;
    let (u1, u2) = utilization_spread(&s, &rp)?;
    out.write_json(
        "summary.json",
        &AnalyzeSummary {
            m_v: fc.m_v,
            m_d: fc.m_d,
            min_availability: pm.min_availability(),
            max_availability: pm.max_availability(),
            identity_residual: pm.identity_residual(),
            utilization_spread_customer: u1,
            utilization_spread_taxi: u2,
            rebalancing_cost: rebalancing_cost(&s, &rp),
            driver_cost: driver_cost(&s, &rp),
        },
    )
}

fn flow_rows(s: &Scenario<f64>, rp: &RebalanceParams<f64>) -> Vec<Vec<String>> {
    let (beta, alpha) = (rp.delegated_flow(), rp.virtual_flow());
    let mut rows = Vec::new();
    for i in 0..s.n {
        for j in (0..s.n).filter(|&j| j != i) {
            rows.push(vec![i.to_string(), j.to_string(), num(beta[(i, j)]), num(alpha[(i, j)])]);
        }
    }
    rows
}

fn rebalance_lp(common: &Common, a: &LpArgs, out: &mut Outputs) -> Result<()> {
    let s = scenario(common)?;
    let sol = solve_mrp(&s)?;
    let rp = &sol.params;
    out.write_json("params.json", rp)?;
    out.write_csv("flows.csv", &["from", "to", "delegated", "virtual"], &flow_rows(&s, rp))?;
    let (u1, u2) = utilization_spread(&s, rp)?;
    let availability = match (a.m_v, a.m_d) {
        (Some(m_v), Some(m_d)) => {
            let pm = FleetModel::new(&s, rp)?.metrics(FleetConfig::new(m_v, m_d)?);
            let rows: Vec<Vec<String>> =
                (0..s.n).map(|i| vec![i.to_string(), num(pm.a1[i]), num(pm.a2[i]), num(pm.a_pass[i])]).collect();
            out.write_csv("availability.csv", &["station", "a1", "a2", "a_pass"], &rows)?;
            Some(pm.min_availability())
        }
        _ => None,
    };
    out.write_json(
        "summary.json",
        &json!({
            "delegated_cost": sol.beta_cost,
            "virtual_cost": sol.alpha_cost,
            "rebalancing_cost": rebalancing_cost(&s, rp),
            "driver_cost": driver_cost(&s, rp),
            "utilization_spread_customer": u1,
            "utilization_spread_taxi": u2,
            "min_availability": availability,
        }),
    )
}

fn rebalance_nlp(common: &Common, a: &NlpArgs, out: &mut Outputs) -> Result<()> {
    let s = scenario(common)?;
    let fc = fleet(&a.fleet)?;
    if a.c.is_empty() {
        bail!("need at least one weight");
    }
    let mut base = MmrpConfig::new(a.c[0], fc);
    base.max_iter = a.max_iter;
    base.eps_a = a.eps_a;
    let points = pareto_sweep(&s, fc, &a.c, &base);
    let mut rows = Vec::new();
    let mut station_rows = Vec::new();
    for p in &points {
        let res = p.result.as_ref();
        rows.push(vec![
            num(p.c),
            num(p.a_star),
            num(p.rebalancing_cost),
            res.map_or(String::new(), |r| num(r.residuals.availability_spread)),
            p.iterations.to_string(),
            p.converged.to_string(),
            p.error.clone().unwrap_or_default(),
        ]);
        if let Some(r) = res {
            for (i, &ap) in r.a_pass.iter().enumerate() {
                station_rows.push(vec![num(p.c), i.to_string(), num(ap)]);
            }
        }
    }
    out.write_csv(
        "pareto.csv",
        &["c", "a_star", "rebalancing_cost", "availability_spread", "iterations", "converged", "error"],
        &rows,
    )?;
    out.write_csv("stations.csv", &["c", "station", "a_pass"], &station_rows)?;
    match points.iter().rev().find_map(|p| p.result.as_ref()) {
        Some(r) => {
            out.write_json("params.json", &r.params)?;
            out.write_csv("flows.csv", &["from", "to", "delegated", "virtual"], &flow_rows(&s, &r.params))
        }
        None => bail!("no weight produced a solution: {}", points[0].error.clone().unwrap_or_default()),
    }
}

fn size(common: &Common, a: &SizeArgs, out: &mut Outputs) -> Result<()> {
    let s = scenario(common)?;
    let cfg = SizingConfig {
        ratios: a.ratios.clone(),
        thresholds: a.thresholds.clone(),
        cost_ratios: a.cost_ratios.clone(),
        max_drivers: a.max_drivers,
    };
    let r = size_fleet(&s, &cfg)?;
    let rows: Vec<Vec<String>> = r
        .fleets
        .iter()
        .map(|f| vec![num(f.ratio), num(f.threshold), f.m_v.to_string(), f.m_d.to_string(), num(f.min_availability)])
        .collect();
    out.write_csv("fleets.csv", &["ratio", "threshold", "m_v", "m_d", "min_availability"], &rows)?;
    let rows: Vec<Vec<String>> = r
        .costs
        .iter()
        .map(|c| {
            vec![
                num(c.ratio),
                num(c.threshold),
                num(c.c_r),
                c.m_v.to_string(),
                c.m_d.to_string(),
                num(c.c_total),
                c.optimal.to_string(),
            ]
        })
        .collect();
    out.write_csv("costs.csv", &["ratio", "threshold", "c_r", "m_v", "m_d", "c_total", "optimal"], &rows)?;
    let optimal: Vec<_> = cfg
        .thresholds
        .iter()
        .flat_map(|&t| cfg.cost_ratios.iter().map(move |&c| (t, c)))
        .map(|(t, c)| json!({ "threshold": t, "c_r": c, "ratio": r.optimal_ratio(t, c) }))
        .collect();
    let ratios: Vec<f64> = optimal.iter().filter_map(|o| o["ratio"].as_f64()).collect();
    out.write_json(
        "summary.json",
        &json!({
            "unreached": r.unreached,
            "optimal": optimal,
            "optimal_ratios_between_3_and_5": ratios.iter().filter(|&&x| (3.0..=5.0).contains(&x)).count(),
            "optimal_ratios_total": ratios.len(),
        }),
    )
}

fn sim_config(common: &Common, a: &SimulateArgs, s: &Scenario<f64>) -> Result<SimConfig> {
    if let Some(path) = &a.config {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: SimConfig = serde_json::from_str(&text)?;
        cfg.seed = common.seed;
        if cfg.mode == SimMode::Loss && cfg.params.is_none() {
            cfg.params = Some(solve_mrp(s)?.params);
        }
        return Ok(cfg);
    }
    let fc = FleetConfig::new(a.m_v.expect("required by clap"), a.m_d.expect("required by clap"))?;
    let travel = a.travel.map(|t| match t {
        Travel::Constant => TravelModel::Constant,
        Travel::Exponential => TravelModel::Exponential,
    });
    let mut cfg = match a.mode {
        Mode::Loss => {
            let rp = params_or_linear(a.params.as_ref(), s)?;
            SimConfig::loss(fc, rp, a.horizon, a.replicas, common.seed)
        }
        Mode::Queueing => SimConfig::queueing(fc, 1.0 / 30.0, a.horizon, a.replicas, common.seed),
    };
    if let Some(dt) = a.dt {
        cfg.dt = dt;
    }
    if let Some(t) = travel {
        cfg.travel = t;
    }
    if let Some(w) = a.warmup {
        cfg.warmup = w;
    }
    cfg.policy = PolicyConfig { w: a.w, rebalance_period: a.rebalance_period, bin_steps: a.bin_steps };
    Ok(cfg)
}

fn simulate(common: &Common, a: &SimulateArgs, out: &mut Outputs) -> Result<()> {
    let s = scenario(common)?;
    let cfg = sim_config(common, a, &s)?;
    out.write_json("sim_config.json", &cfg)?;
    match run_sim(&s, &cfg)? {
        SimMetrics::Loss(m) => {
            let rp = cfg.params.as_ref().expect("loss mode has parameters");
            let theory = FleetModel::new(&s, rp)?.metrics(cfg.fleet);
            let rows: Vec<Vec<String>> = (0..s.n)
                .map(|i| {
                    vec![
                        i.to_string(),
                        num(theory.a_pass[i]),
                        num(m.availability[i]),
                        num(m.availability_std[i]),
                        num(m.availability_customer[i]),
                        num(m.availability_taxi[i]),
                    ]
                })
                .collect();
            out.write_csv(
                "availability.csv",
                &["station", "analytic_a", "empirical_a", "std", "empirical_a1", "empirical_a2"],
                &rows,
            )?;
            let lost: u64 = m.replicas.iter().map(|r| r.lost()).sum();
            let arrivals: u64 = m.replicas.iter().flat_map(|r| &r.arrivals).sum();
            let worst = (0..s.n).map(|i| (m.availability[i] - theory.a_pass[i]).abs()).fold(0.0, f64::max);
            out.write_json(
                "summary.json",
                &json!({
                    "arrivals": arrivals,
                    "lost": lost,
                    "rebalancing_trips": m.rebalancing_trips,
                    "max_abs_error": worst,
                }),
            )
        }
        SimMetrics::Queueing(m) => {
            let mut rows = Vec::new();
            for b in m.first_bin..m.bin_time.len() {
                for i in 0..s.n {
                    rows.push(vec![num(m.bin_time[b]), i.to_string(), num(m.mean_wait[i][b]), num(m.std_wait[i][b])]);
                }
            }
            out.write_csv("waits.csv", &["time", "station", "mean_wait", "std_wait"], &rows)?;
            let from = m.final_third();
            let mut rows = Vec::new();
            for i in 0..s.n {
                let tr = wait_trend(&m, i, from);
                rows.push(vec![
                    i.to_string(),
                    num(m.station_wait[i]),
                    tr.map_or(String::new(), |t| num(t.slope)),
                    tr.map_or(String::new(), |t| num(t.ci_low)),
                    tr.map_or(String::new(), |t| num(t.ci_high)),
                ]);
            }
            out.write_csv("stations.csv", &["station", "mean_wait", "slope", "ci_low", "ci_high"], &rows)?;
            let worst = m.worst_station();
            let tr = wait_trend(&m, worst, from);
            let sum = |f: fn(&modnet::sim::QueueReplica) -> u64| m.replicas.iter().map(f).sum::<u64>();
            out.write_json(
                "summary.json",
                &json!({
                    "arrivals": sum(|r| r.arrivals),
                    "served": sum(|r| r.served),
                    "waiting_at_end": sum(|r| r.waiting_at_end),
                    "assigned_customer": sum(|r| r.assigned_customer),
                    "assigned_taxi": sum(|r| r.assigned_taxi),
                    "rebalancing_trips": sum(|r| r.rebalancing_trips),
                    "solves": sum(|r| r.solves),
                    "conservation_violations": m.conservation_violations(),
                    "worst_station": worst,
                    "worst_trend": tr,
                    "stable": tr.map(|t| t.contains_zero() && t.mean_wait.is_finite()),
                }),
            )
        }
    }
}

fn assign(common: &Common, a: &AssignArgs, out: &mut Outputs) -> Result<()> {
    let s = scenario(common)?;
    let fc = fleet(&a.fleet)?;
    let state: StationState = match &a.state {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text)?
        }
        None => random_state(s.n, a.max_count, common.seed),
    };
    if state.n() != s.n {
        bail!("state has {} stations, scenario has {}", state.n(), s.n);
    }
    out.write_json("state.json", &state)?;
    let ap = build_problem(&state, fc, &s.lambda, a.w)?;
    let sol = solve_assignment(&ap);
    let mut rows = Vec::new();
    for i in 0..s.n {
        for j in 0..s.n {
            if sol.n_v[i][j] + sol.n_d[i][j] > 0 {
                rows.push(vec![i.to_string(), j.to_string(), sol.n_v[i][j].to_string(), sol.n_d[i][j].to_string()]);
            }
        }
    }
    out.write_csv("assignment.csv", &["from", "to", "n_v", "n_d"], &rows)?;
    let predicted = ap.predicted(&sol.n_v);
    let rows: Vec<Vec<String>> =
        (0..s.n).map(|i| vec![i.to_string(), num(ap.v_des[i]), num(predicted[i])]).collect();
    out.write_csv("balance.csv", &["station", "v_des", "v_plus"], &rows)?;
    out.write_json(
        "summary.json",
        &json!({
            "objective": sol.objective,
            "gap": sol.gap,
            "nodes": sol.nodes,
            "variables": sol.variables,
            "assigned": sol.assigned(),
        }),
    )
}

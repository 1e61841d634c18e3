//! Fleet sizing at fixed vehicle-to-driver ratios.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mrp::{solve_mrp, FleetModel};
use crate::num::Scalar;
use crate::scenario::{FleetConfig, RebalanceParams, Scenario};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizingConfig {
    pub ratios: Vec<f64>,
    pub thresholds: Vec<f64>,
    /// Driver cost relative to a vehicle.
    pub cost_ratios: Vec<f64>,
    /// Largest driver count searched.
    pub max_drivers: usize,
}

impl Default for SizingConfig {
    fn default() -> Self {
        Self {
            ratios: vec![2.0, 2.5, 3.0, 3.5, 4.0, 4.5, 5.0, 6.0, 7.0, 8.0],
            thresholds: vec![0.85, 0.90, 0.95],
            cost_ratios: vec![1.0, 2.0, 3.0, 4.0, 5.0],
            max_drivers: 4000,
        }
    }
}

impl SizingConfig {
    pub fn check(&self) -> Result<()> {
        if let Some(r) = self.ratios.iter().find(|&&r| !(r > 1.0 && r.is_finite())) {
            return Err(Error::InvalidInput(format!("ratio {r} must exceed 1")));
        }
        if let Some(t) = self.thresholds.iter().find(|&&t| !(t >= 0.0 && t < 1.0)) {
            return Err(Error::InvalidInput(format!("threshold {t} outside [0, 1)")));
        }
        if let Some(c) = self.cost_ratios.iter().find(|&&c| !(c >= 1.0 && c.is_finite())) {
            return Err(Error::InvalidInput(format!("cost ratio {c} below 1")));
        }
        if self.max_drivers == 0 {
            return Err(Error::InvalidInput("max_drivers must be positive".into()));
        }
        Ok(())
    }
}

/// Smallest fleet found for one (ratio, threshold) cell.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FleetSize {
    pub ratio: f64,
    pub threshold: f64,
    pub m_v: usize,
    pub m_d: usize,
    pub min_availability: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CostRow {
    pub ratio: f64,
    pub threshold: f64,
    pub c_r: f64,
    pub m_v: usize,
    pub m_d: usize,
    pub c_total: f64,
    pub optimal: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SizingResult {
    pub fleets: Vec<FleetSize>,
    /// Cells where the threshold was not reached, as (ratio, threshold).
    pub unreached: Vec<(f64, f64)>,
    pub costs: Vec<CostRow>,
}

impl SizingResult {
    /// Cost-minimizing ratio for a threshold and driver cost, if any ratio reached it.
    pub fn optimal_ratio(&self, threshold: f64, c_r: f64) -> Option<f64> {
        self.costs.iter().find(|r| r.optimal && r.threshold == threshold && r.c_r == c_r).map(|r| r.ratio)
    }
}

/// Vehicle count paired with `m_d` drivers at `ratio`.
pub fn vehicles_for(ratio: f64, m_d: usize) -> usize {
    (ratio * m_d as f64).round() as usize
}

/// Fleet at `ratio` with `m_d` drivers, if it leaves at least one customer-driven vehicle.
pub fn fleet_at(ratio: f64, m_d: usize) -> Option<FleetConfig> {
    FleetConfig::new(vehicles_for(ratio, m_d), m_d).ok()
}

/// Lowest passenger availability over stations, or `None` for an illegal fleet.
pub fn min_availability<T: Scalar>(model: &FleetModel<T>, ratio: f64, m_d: usize) -> Option<f64> {
    fleet_at(ratio, m_d).map(|fc| model.metrics(fc).min_availability().to_f64_lossy())
}

fn meets<T: Scalar>(model: &FleetModel<T>, ratio: f64, threshold: f64, m_d: usize) -> Option<f64> {
    min_availability(model, ratio, m_d).filter(|&a| a >= threshold)
}

/// Smallest driver count meeting `threshold` by doubling, bisection and a local scan.
pub fn min_fleet<T: Scalar>(model: &FleetModel<T>, ratio: f64, threshold: f64, max_drivers: usize) -> Result<FleetSize> {
    let not_reached = Error::NotReachedWithinBounds { threshold, bound: max_drivers };
    let mut lo = 0;
    let mut hi = 1;
    loop {
        if meets(model, ratio, threshold, hi).is_some() {
            break;
        }
        if hi >= max_drivers {
            return Err(not_reached);
        }
        lo = hi;
        hi = (hi * 2).min(max_drivers);
    }
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if meets(model, ratio, threshold, mid).is_some() {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    // Availability is not provably monotone in fleet size; look around the crossing.
    let from = hi.saturating_sub(2).max(1);
    let m_d = (from..=hi).find(|&m| meets(model, ratio, threshold, m).is_some()).unwrap_or(hi);
    let min_availability = meets(model, ratio, threshold, m_d).ok_or(not_reached)?;
    Ok(FleetSize { ratio, threshold, m_v: vehicles_for(ratio, m_d), m_d, min_availability })
}

/// Exhaustive scan over every driver count; the reference for [`min_fleet`].
pub fn min_fleet_exhaustive<T: Scalar>(
    model: &FleetModel<T>,
    ratio: f64,
    threshold: f64,
    max_drivers: usize,
) -> Result<FleetSize> {
    (1..=max_drivers)
        .find_map(|m_d| {
            meets(model, ratio, threshold, m_d).map(|a| FleetSize {
                ratio,
                threshold,
                m_v: vehicles_for(ratio, m_d),
                m_d,
                min_availability: a,
            })
        })
        .ok_or(Error::NotReachedWithinBounds { threshold, bound: max_drivers })
}

/// Smallest fleet at `ratio` whose worst station availability reaches `threshold`
/// under the rebalancing parameters `rp`.
pub fn min_fleet_for_threshold<T: Scalar>(
    s: &Scenario<T>,
    rp: &RebalanceParams<T>,
    ratio: f64,
    threshold: f64,
    max_drivers: usize,
) -> Result<FleetSize> {
    min_fleet(&FleetModel::new(s, rp)?, ratio, threshold, max_drivers)
}

/// Total cost normalized by the vehicle cost.
pub fn total_cost(m_v: usize, m_d: usize, c_r: f64) -> f64 {
    m_v as f64 + c_r * m_d as f64
}

/// Cost of every sized fleet under every driver cost, marking the cheapest
/// ratio per (threshold, driver cost). Ties go to the smaller ratio.
pub fn cost_curves(fleets: &[FleetSize], cost_ratios: &[f64]) -> Vec<CostRow> {
    let mut rows: Vec<CostRow> = Vec::with_capacity(fleets.len() * cost_ratios.len());
    for &c_r in cost_ratios {
        for f in fleets {
            rows.push(CostRow {
                ratio: f.ratio,
                threshold: f.threshold,
                c_r,
                m_v: f.m_v,
                m_d: f.m_d,
                c_total: total_cost(f.m_v, f.m_d, c_r),
                optimal: false,
            });
        }
    }
    for k in 0..rows.len() {
        let (t, c) = (rows[k].threshold, rows[k].c_r);
        let best = rows
            .iter()
            .enumerate()
            .filter(|(_, r)| r.threshold == t && r.c_r == c)
            .min_by(|a, b| a.1.c_total.total_cmp(&b.1.c_total).then(a.1.ratio.total_cmp(&b.1.ratio)))
            .map(|(j, _)| j);
        rows[k].optimal = best == Some(k);
    }
    rows
}

/// Sizes every (ratio, threshold) cell under the linear rebalancing solution.
pub fn size_fleet(s: &Scenario<f64>, cfg: &SizingConfig) -> Result<SizingResult> {
    cfg.check()?;
    let rp = solve_mrp(s)?.params;
    let model = FleetModel::new(s, &rp)?;
    let cells: Vec<(f64, f64)> =
        cfg.thresholds.iter().flat_map(|&t| cfg.ratios.iter().map(move |&r| (r, t))).collect();
    let found: Vec<(f64, f64, Result<FleetSize>)> = cells
        .par_iter()
        .map(|&(r, t)| (r, t, min_fleet(&model, r, t, cfg.max_drivers)))
        .collect();
    let mut fleets = Vec::new();
    let mut unreached = Vec::new();
    for (r, t, res) in found {
        match res {
            Ok(f) => fleets.push(f),
            Err(Error::NotReachedWithinBounds { .. }) => unreached.push((r, t)),
            Err(e) => return Err(e),
        }
    }
    let costs = cost_curves(&fleets, &cfg.cost_ratios);
    Ok(SizingResult { fleets, unreached, costs })
}

//! Trip records to scenarios: parsing, station clustering and parameter estimation.
//!
//! Durations arrive in seconds and scenarios are written in minutes.

use std::collections::HashSet;
use std::io::Read;
use std::path::Path;

use chrono::{DateTime, NaiveDateTime};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scenario::{is_irreducible, validate_scenario, Scenario, Units};

pub const KMEANS_RESTARTS: usize = 50;
const KMEANS_MAX_ITER: usize = 300;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripRecord {
    /// Pickup instant in seconds since the Unix epoch.
    pub pickup_time: f64,
    pub pickup: [f64; 2],
    pub dropoff: [f64; 2],
    /// Seconds.
    pub duration: f64,
}

/// Half-open pickup window `[start, end)` in epoch seconds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeWindow {
    pub start: f64,
    pub end: f64,
}

impl TimeWindow {
    pub fn new(start: f64, end: f64) -> Result<Self> {
        if !(start.is_finite() && end.is_finite() && end > start) {
            return Err(Error::InvalidInput(format!("window [{start}, {end}) is empty or not finite")));
        }
        Ok(Self { start, end })
    }

    /// Parses both ends with [`parse_timestamp`].
    pub fn parse(start: &str, end: &str) -> Result<Self> {
        let bad = |s: &str| Error::InvalidInput(format!("cannot parse timestamp {s:?}"));
        Self::new(parse_timestamp(start).ok_or_else(|| bad(start))?, parse_timestamp(end).ok_or_else(|| bad(end))?)
    }

    /// Every representable instant.
    pub fn unbounded() -> Self {
        Self { start: f64::NEG_INFINITY, end: f64::INFINITY }
    }

    pub fn contains(&self, t: f64) -> bool {
        self.start <= t && t < self.end
    }

    pub fn length_minutes(&self) -> f64 {
        (self.end - self.start) / 60.0
    }
}

/// Epoch seconds, RFC 3339, or a naive `YYYY-MM-DD[ T]HH:MM:SS[.f]` read as UTC.
pub fn parse_timestamp(s: &str) -> Option<f64> {
    let s = s.trim();
    if let Ok(v) = s.parse::<f64>() {
        return v.is_finite().then_some(v);
    }
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(dt.timestamp_micros() as f64 / 1e6);
    }
    ["%Y-%m-%d %H:%M:%S%.f", "%Y-%m-%dT%H:%M:%S%.f"]
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
        .map(|dt| dt.and_utc().timestamp_micros() as f64 / 1e6)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParsedTrips {
    pub records: Vec<TripRecord>,
    /// Rows that could not be read or broke a record invariant.
    pub malformed: usize,
    /// Well-formed rows outside the window.
    pub outside_window: usize,
}

const COLUMNS: [&str; 6] = ["pickup_ts", "pickup_x", "pickup_y", "dropoff_x", "dropoff_y", "duration_s"];

fn parse_row(row: &csv::StringRecord, idx: &[usize; 6]) -> Option<TripRecord> {
    let field = |k: usize| row.get(idx[k]).map(str::trim);
    let num = |k: usize| field(k)?.parse::<f64>().ok().filter(|v| v.is_finite());
    let rec = TripRecord {
        pickup_time: parse_timestamp(field(0)?)?,
        pickup: [num(1)?, num(2)?],
        dropoff: [num(3)?, num(4)?],
        duration: num(5)?,
    };
    (rec.duration > 0.0).then_some(rec)
}

/// Reads trip rows with a header naming the six required columns in any order.
pub fn parse_trips_from_reader<R: Read>(reader: R, window: TimeWindow) -> Result<ParsedTrips> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.iter().all(|h| h.trim().is_empty()) {
        return Err(Error::EmptyWindow);
    }
    let mut idx = [0usize; 6];
    for (k, name) in COLUMNS.iter().enumerate() {
        idx[k] = header
            .iter()
            .position(|h| h.trim() == *name)
            .ok_or_else(|| Error::InvalidInput(format!("trip file lacks column {name}")))?;
    }
    let mut out = ParsedTrips { records: Vec::new(), malformed: 0, outside_window: 0 };
    for row in rdr.records() {
        match row.ok().as_ref().and_then(|r| parse_row(r, &idx)) {
            None => out.malformed += 1,
            Some(rec) if window.contains(rec.pickup_time) => out.records.push(rec),
            Some(_) => out.outside_window += 1,
        }
    }
    if out.records.is_empty() {
        return Err(Error::EmptyWindow);
    }
    Ok(out)
}

pub fn parse_trips(path: impl AsRef<Path>, window: TimeWindow) -> Result<ParsedTrips> {
    parse_trips_from_reader(std::fs::File::open(path)?, window)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Clustering {
    /// Station coordinates sorted by x, then y.
    pub centroids: Vec<[f64; 2]>,
    pub pickup_station: Vec<usize>,
    pub dropoff_station: Vec<usize>,
    /// Sum of squared pickup distances to the assigned centroid.
    pub inertia: f64,
}

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

/// Nearest centroid; ties go to the lower index.
pub fn nearest(centroids: &[[f64; 2]], p: [f64; 2]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (c, &q) in centroids.iter().enumerate() {
        let d = dist2(p, q);
        if d < best.1 {
            best = (c, d);
        }
    }
    best.0
}

fn kmeans_pp(points: &[[f64; 2]], k: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 2]> {
    let mut centers = vec![points[rng.random_range(0..points.len())]];
    let mut d: Vec<f64> = points.iter().map(|&p| dist2(p, centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = d.iter().rposition(|&v| v > 0.0).unwrap_or(0);
            for (i, &v) in d.iter().enumerate() {
                if v > 0.0 && u < v {
                    pick = i;
                    break;
                }
                u -= v;
            }
            pick
        } else {
            rng.random_range(0..points.len())
        };
        let c = points[next];
        centers.push(c);
        for (di, &p) in d.iter_mut().zip(points) {
            *di = di.min(dist2(p, c));
        }
    }
    centers
}

fn lloyd(points: &[[f64; 2]], mut centers: Vec<[f64; 2]>) -> (Vec<[f64; 2]>, f64) {
    let k = centers.len();
    let mut label = vec![usize::MAX; points.len()];
    for _ in 0..KMEANS_MAX_ITER {
        let mut changed = false;
        for (l, &p) in label.iter_mut().zip(points) {
            let c = nearest(&centers, p);
            changed |= *l != c;
            *l = c;
        }
        let mut sum = vec![[0.0; 2]; k];
        let mut count = vec![0usize; k];
        for (&l, &p) in label.iter().zip(points) {
            sum[l][0] += p[0];
            sum[l][1] += p[1];
            count[l] += 1;
        }
        for c in 0..k {
            if count[c] > 0 {
                centers[c] = [sum[c][0] / count[c] as f64, sum[c][1] / count[c] as f64];
            } else {
                // An emptied cluster takes over the point farthest from its centroid.
                let far = (0..points.len())
                    .max_by(|&a, &b| {
                        dist2(points[a], centers[label[a]]).total_cmp(&dist2(points[b], centers[label[b]]))
                    })
                    .expect("points are non-empty");
                centers[c] = points[far];
                label[far] = c;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let inertia = points.iter().map(|&p| dist2(p, centers[nearest(&centers, p)])).sum();
    (centers, inertia)
}

/// Seeded k-means with k-means++ starts on pickup coordinates, keeping the
/// best of [`KMEANS_RESTARTS`] runs. Both trip ends go to their nearest station.
pub fn cluster_stations(trips: &[TripRecord], k: usize, seed: u64) -> Result<Clustering> {
    let points: Vec<[f64; 2]> = trips.iter().map(|t| t.pickup).collect();
    let distinct: HashSet<[u64; 2]> = points.iter().map(|p| [p[0].to_bits(), p[1].to_bits()]).collect();
    if k == 0 || distinct.len() < k {
        return Err(Error::TooFewPoints { needed: k.max(1), got: distinct.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(Vec<[f64; 2]>, f64)> = None;
    for _ in 0..KMEANS_RESTARTS {
        let start = kmeans_pp(&points, k, &mut rng);
        let (c, inertia) = lloyd(&points, start);
        if best.as_ref().is_none_or(|b| inertia < b.1) {
            best = Some((c, inertia));
        }
    }
    let (mut centroids, inertia) = best.expect("at least one restart");
    centroids.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    Ok(Clustering {
        pickup_station: trips.iter().map(|t| nearest(&centroids, t.pickup)).collect(),
        dropoff_station: trips.iter().map(|t| nearest(&centroids, t.dropoff)).collect(),
        centroids,
        inertia,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimationConfig {
    /// Pseudo-count added to every off-diagonal routing cell.
    pub smoothing: f64,
    /// Arrival rate given to stations without pickups.
    pub lambda_floor: f64,
    /// Trips longer than this multiple of their pair's median duration are dropped.
    pub outlier_factor: f64,
}

impl Default for EstimationConfig {
    fn default() -> Self {
        Self { smoothing: 1e-3, lambda_floor: 1e-6, outlier_factor: 5.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Estimate {
    pub scenario: Scenario<f64>,
    /// Stations without pickups, whose rate was floored.
    pub floored: Vec<usize>,
    /// Trip counts between stations after outlier removal, diagonal included.
    pub counts: Vec<Vec<usize>>,
    pub dropped_outliers: usize,
    /// Travel times filled from distance because no trip was observed.
    pub filled_pairs: usize,
    /// Distance units per minute used to fill unobserved pairs.
    pub fill_speed: f64,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

/// Rates, routing and travel times over a window of `window_minutes`.
pub fn estimate_parameters(
    trips: &[TripRecord],
    clusters: &Clustering,
    window_minutes: f64,
    cfg: &EstimationConfig,
) -> Result<Estimate> {
    let n = clusters.centroids.len();
    if n < 2 {
        return Err(Error::InvalidInput("need at least two stations".into()));
    }
    if !(window_minutes > 0.0 && window_minutes.is_finite()) {
        return Err(Error::InvalidInput("window length must be positive".into()));
    }
    if !(cfg.smoothing >= 0.0 && cfg.lambda_floor > 0.0 && cfg.outlier_factor > 0.0) {
        return Err(Error::InvalidInput("bad estimation parameters".into()));
    }
    if clusters.pickup_station.len() != trips.len() || clusters.dropoff_station.len() != trips.len() {
        return Err(Error::InvalidInput("clustering does not match the trips".into()));
    }
    if trips.is_empty() {
        return Err(Error::EmptyWindow);
    }

    let mut durations = vec![vec![Vec::new(); n]; n];
    for (k, t) in trips.iter().enumerate() {
        durations[clusters.pickup_station[k]][clusters.dropoff_station[k]].push(t.duration / 60.0);
    }
    let mut dropped_outliers = 0;
    for d in durations.iter_mut().flatten().filter(|d| !d.is_empty()) {
        let cut = cfg.outlier_factor * median(&mut d.clone());
        let before = d.len();
        d.retain(|&v| v <= cut);
        dropped_outliers += before - d.len();
    }
    let counts: Vec<Vec<usize>> = durations.iter().map(|r| r.iter().map(Vec::len).collect()).collect();

    let mut floored = Vec::new();
    let lambda: Vec<f64> = (0..n)
        .map(|i| {
            let pickups: usize = counts[i].iter().sum();
            if pickups == 0 {
                floored.push(i);
                cfg.lambda_floor
            } else {
                pickups as f64 / window_minutes
            }
        })
        .collect();

    let mut p = Matrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { counts[i][j] as f64 + cfg.smoothing });
    for i in 0..n {
        let total = p.row_sum(i);
        if total > 0.0 {
            p.row_mut(i).iter_mut().for_each(|v| *v /= total);
        }
    }
    if !is_irreducible(&p) || (0..n).any(|i| p.row_sum(i) == 0.0) {
        return Err(Error::DisconnectedDemand);
    }

    let dist = Matrix::from_fn(n, n, |i, j| dist2(clusters.centroids[i], clusters.centroids[j]).sqrt());
    let (mut d_sum, mut t_sum) = (0.0, 0.0);
    for i in 0..n {
        for j in (0..n).filter(|&j| j != i) {
            d_sum += dist[(i, j)] * durations[i][j].len() as f64;
            t_sum += durations[i][j].iter().sum::<f64>();
        }
    }
    if !(d_sum > 0.0 && t_sum > 0.0) {
        return Err(Error::InvalidInput("no trips between distinct stations to calibrate speed".into()));
    }
    let fill_speed = d_sum / t_sum;
    let mut filled_pairs = 0;
    let mut t = Matrix::from_fn(n, n, |i, j| {
        let d = &durations[i][j];
        if i == j {
            0.0
        } else if d.is_empty() {
            filled_pairs += 1;
            dist[(i, j)] / fill_speed
        } else {
            d.iter().sum::<f64>() / d.len() as f64
        }
    });
    // Coincident centroids would give a zero fill; use the shortest positive time instead.
    let shortest = t.as_slice().iter().copied().filter(|&v| v > 0.0).fold(f64::INFINITY, f64::min);
    for i in 0..n {
        for j in (0..n).filter(|&j| j != i) {
            if t[(i, j)] <= 0.0 {
                t[(i, j)] = shortest;
            }
        }
    }

    let scenario = Scenario { n, lambda, p, t, coords: Some(clusters.centroids.clone()), units: Units::default() };
    if let Some(v) = validate_scenario(&scenario).first() {
        return Err(Error::InvalidInput(format!("estimated scenario is invalid: {v}")));
    }
    Ok(Estimate { scenario, floored, counts, dropped_outliers, filled_pairs, fill_speed })
}

/// Parse, cluster and estimate in one pass.
pub fn ingest(
    path: impl AsRef<Path>,
    window: TimeWindow,
    stations: usize,
    seed: u64,
    cfg: &EstimationConfig,
) -> Result<(ParsedTrips, Clustering, Estimate)> {
    let parsed = parse_trips(path, window)?;
    let clusters = cluster_stations(&parsed.records, stations, seed)?;
    let span = if window.start.is_finite() && window.end.is_finite() {
        window.length_minutes()
    } else {
        let (lo, hi) = parsed
            .records
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), r| (a.min(r.pickup_time), b.max(r.pickup_time)));
        (hi - lo) / 60.0
    };
    let est = estimate_parameters(&parsed.records, &clusters, span, cfg)?;
    Ok((parsed, clusters, est))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trip(t: f64, from: [f64; 2], to: [f64; 2], secs: f64) -> TripRecord {
        TripRecord { pickup_time: t, pickup: from, dropoff: to, duration: secs }
    }

    #[test]
    fn timestamps() {
        assert_eq!(parse_timestamp("3600"), Some(3600.0));
        assert_eq!(parse_timestamp("1970-01-01T01:00:00Z"), Some(3600.0));
        assert_eq!(parse_timestamp("1970-01-01 01:00:00"), Some(3600.0));
        assert_eq!(parse_timestamp("1970-01-01T02:00:00+01:00"), Some(3600.0));
        assert_eq!(parse_timestamp("yesterday"), None);
    }

    #[test]
    fn empty_input_is_an_empty_window() {
        assert!(matches!(parse_trips_from_reader("".as_bytes(), TimeWindow::unbounded()), Err(Error::EmptyWindow)));
        let header = "pickup_ts,pickup_x,pickup_y,dropoff_x,dropoff_y,duration_s\n";
        assert!(matches!(parse_trips_from_reader(header.as_bytes(), TimeWindow::unbounded()), Err(Error::EmptyWindow)));
    }

    #[test]
    fn malformed_rows_are_counted() {
        let text = "pickup_ts,pickup_x,pickup_y,dropoff_x,dropoff_y,duration_s\n\
                    0,0,0,1,1,60\n\
                    10,1,1,0,0,120\n\
                    oops,1,1,0,0,120\n\
                    20,0,0,1,1,30\n";
        let p = parse_trips_from_reader(text.as_bytes(), TimeWindow::unbounded()).unwrap();
        assert_eq!((p.records.len(), p.malformed), (3, 1));
    }

    #[test]
    fn each_point_its_own_station() {
        let pts = [[0.0, 0.0], [3.0, 1.0], [1.0, 5.0], [4.0, 4.0]];
        let trips: Vec<_> = pts.iter().map(|&p| trip(0.0, p, p, 60.0)).collect();
        let c = cluster_stations(&trips, 4, 9).unwrap();
        let mut want = pts.to_vec();
        want.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert_eq!(c.centroids, want);
        assert_eq!(c.inertia, 0.0);
        assert!(matches!(cluster_stations(&trips, 5, 9), Err(Error::TooFewPoints { needed: 5, got: 4 })));
    }

    #[test]
    fn two_blobs() {
        let mut trips = Vec::new();
        for &(cx, cy) in &[(0.0, 0.0), (10.0, 10.0)] {
            for &(dx, dy) in &[(0.1, 0.0), (-0.1, 0.0), (0.0, 0.2), (0.0, -0.2), (0.05, 0.05)] {
                trips.push(trip(0.0, [cx + dx, cy + dy], [cx, cy], 60.0));
            }
        }
        let c = cluster_stations(&trips, 2, 1).unwrap();
        assert!((c.centroids[0][0] - 0.01).abs() < 1e-6 && (c.centroids[0][1] - 0.01).abs() < 1e-6);
        assert!((c.centroids[1][0] - 10.01).abs() < 1e-6 && (c.centroids[1][1] - 10.01).abs() < 1e-6);
        assert_eq!(c, cluster_stations(&trips, 2, 1).unwrap());
    }

    #[test]
    fn two_stations_uniform() {
        let (a, b) = ([0.0, 0.0], [1.0, 0.0]);
        let trips: Vec<_> = (0..10).map(|k| if k % 2 == 0 { trip(0.0, a, b, 120.0) } else { trip(0.0, b, a, 120.0) }).collect();
        let c = cluster_stations(&trips, 2, 0).unwrap();
        let e = estimate_parameters(&trips, &c, 10.0, &EstimationConfig::default()).unwrap();
        assert_eq!(e.scenario.lambda, vec![0.5, 0.5]);
        assert_eq!((e.scenario.p[(0, 1)], e.scenario.p[(1, 0)]), (1.0, 1.0));
        assert_eq!(e.scenario.t[(0, 1)], 2.0);
    }

    #[test]
    fn station_without_pickups_is_floored() {
        let (a, b, c) = ([0.0, 0.0], [1.0, 0.0], [0.0, 1.0]);
        let trips = vec![trip(0.0, a, b, 60.0), trip(0.0, b, a, 60.0), trip(0.0, c, a, 60.0)];
        let cl = cluster_stations(&trips, 3, 0).unwrap();
        // Reassign the only pickup at c, which sorts second, so c has none.
        let cl = Clustering { pickup_station: vec![0, 2, 0], ..cl };
        let e = estimate_parameters(&trips, &cl, 1.0, &EstimationConfig::default()).unwrap();
        assert_eq!(e.floored, vec![1]);
        assert_eq!(e.scenario.lambda[1], 1e-6);
        assert!(validate_scenario(&e.scenario).is_empty());
    }

    #[test]
    fn outliers_are_dropped() {
        let (a, b) = ([0.0, 0.0], [1.0, 0.0]);
        let mut trips: Vec<_> = (0..4).map(|_| trip(0.0, a, b, 60.0)).collect();
        trips.push(trip(0.0, a, b, 600.0));
        trips.push(trip(0.0, b, a, 60.0));
        let c = cluster_stations(&trips, 2, 0).unwrap();
        let e = estimate_parameters(&trips, &c, 1.0, &EstimationConfig::default()).unwrap();
        assert_eq!(e.dropped_outliers, 1);
        assert_eq!(e.scenario.t[(0, 1)], 1.0);
    }

    #[test]
    fn unsmoothed_sparse_demand_is_disconnected() {
        let (a, b, c) = ([0.0, 0.0], [1.0, 0.0], [0.0, 1.0]);
        let trips = vec![trip(0.0, a, b, 60.0), trip(0.0, b, a, 60.0), trip(0.0, c, a, 60.0)];
        let cl = cluster_stations(&trips, 3, 0).unwrap();
        let cfg = EstimationConfig { smoothing: 0.0, ..Default::default() };
        assert!(matches!(estimate_parameters(&trips, &cl, 1.0, &cfg), Err(Error::DisconnectedDemand)));
        assert!(estimate_parameters(&trips, &cl, 1.0, &EstimationConfig::default()).is_ok());
    }
}

use modnet::ingest::*;
use modnet::scenario::validate_scenario;

fn data(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

#[test]
fn window_filter_matches_hand_count() {
    let w = TimeWindow::new(1000.0, 2000.0).unwrap();
    let p = parse_trips(data("window10.csv"), w).unwrap();
    // In window: 1000, 1200, 1500, 1999 and the ISO row at 1500. The row at 1300 has a negative duration.
    assert_eq!(p.records.len(), 5);
    assert_eq!(p.malformed, 1);
    assert_eq!(p.outside_window, 4);
    assert!(p.records.iter().all(|r| w.contains(r.pickup_time)));
}

#[test]
fn twelve_trips_match_hand_tally() {
    let w = TimeWindow::new(0.0, 3600.0).unwrap();
    let (parsed, clusters, est) = ingest(data("trips12.csv"), w, 3, 0, &EstimationConfig::default()).unwrap();
    assert_eq!((parsed.records.len(), parsed.malformed), (12, 0));
    // Sorted stations: A=(0,0), C=(0,2), B=(2,0).
    assert_eq!(clusters.centroids, vec![[0.0, 0.0], [0.0, 2.0], [2.0, 0.0]]);
    let s = &est.scenario;
    let close = |a: f64, b: f64| (a - b).abs() < 1e-12;
    assert!(close(s.lambda[0], 5.0 / 60.0) && close(s.lambda[1], 4.0 / 60.0) && close(s.lambda[2], 3.0 / 60.0));
    let e = 1e-3;
    assert!(close(s.p[(0, 2)], (3.0 + e) / (5.0 + 2.0 * e)));
    assert!(close(s.p[(0, 1)], (2.0 + e) / (5.0 + 2.0 * e)));
    assert!(close(s.p[(1, 0)], (3.0 + e) / (4.0 + 2.0 * e)));
    assert!(close(s.p[(2, 0)], (2.0 + e) / (3.0 + 2.0 * e)));
    assert_eq!(s.p[(0, 0)], 0.0);
    assert!(close(s.t[(0, 2)], 10.0) && close(s.t[(0, 1)], 12.5) && close(s.t[(2, 0)], 10.0));
    assert!(close(s.t[(2, 1)], 15.0) && close(s.t[(1, 0)], 40.0 / 3.0) && close(s.t[(1, 2)], 14.0));
    assert_eq!((est.dropped_outliers, est.filled_pairs), (0, 0));
    assert!(validate_scenario(s).is_empty());
}

#[test]
fn estimation_is_deterministic() {
    let w = TimeWindow::new(0.0, 3600.0).unwrap();
    let a = ingest(data("trips12.csv"), w, 3, 4, &EstimationConfig::default()).unwrap();
    let b = ingest(data("trips12.csv"), w, 3, 4, &EstimationConfig::default()).unwrap();
    assert_eq!(a, b);
}

//! Seeded synthetic scenarios.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scenario::{validate_scenario, Scenario, Units};

/// Station count and seed of the 20-station surrogate used throughout the tests.
pub const SURROGATE_STATIONS: usize = 20;
pub const SURROGATE_SEED: u64 = 7;
/// Seed of the 5-station grid used for the loss-mode validation study.
pub const GRID_SEED: u64 = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScenarioStyle {
    /// Stations uniform in the unit square, times in minutes.
    #[default]
    Uniform,
    /// Stations on distinct points of a 5x5 integer grid, times in simulation steps.
    Grid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub n: usize,
    pub seed: u64,
    pub style: ScenarioStyle,
    /// Distance units per time unit.
    pub speed: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    /// Upper end of the per-station distance aversion in the routing softmax.
    pub max_skew: f64,
}

impl GeneratorConfig {
    pub fn new(n: usize, seed: u64, style: ScenarioStyle) -> Self {
        match style {
            ScenarioStyle::Uniform => {
                Self { n, seed, style, speed: 0.02, lambda_min: 0.5, lambda_max: 2.0, max_skew: 4.0 }
            }
            ScenarioStyle::Grid => {
                Self { n, seed, style, speed: 0.2, lambda_min: 0.25, lambda_max: 1.0, max_skew: 1.0 }
            }
        }
    }
}

pub fn generate_scenario(n: usize, seed: u64, style: ScenarioStyle) -> Result<Scenario<f64>> {
    generate_with(&GeneratorConfig::new(n, seed, style))
}

pub fn generate_with(cfg: &GeneratorConfig) -> Result<Scenario<f64>> {
    let n = cfg.n;
    if n < 2 {
        return Err(Error::InvalidInput("need at least two stations".into()));
    }
    if !(cfg.speed > 0.0 && cfg.lambda_min > 0.0 && cfg.lambda_max >= cfg.lambda_min && cfg.max_skew >= 0.0) {
        return Err(Error::InvalidInput("bad generator parameters".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let coords: Vec<[f64; 2]> = match cfg.style {
        ScenarioStyle::Uniform => (0..n).map(|_| [rng.random::<f64>(), rng.random::<f64>()]).collect(),
        ScenarioStyle::Grid => {
            if n > 25 {
                return Err(Error::InvalidInput("a 5x5 grid holds at most 25 stations".into()));
            }
            let mut cells = sample(&mut rng, 25, n).into_vec();
            cells.sort_unstable();
            cells.into_iter().map(|c| [(c % 5) as f64, (c / 5) as f64]).collect()
        }
    };
    let lambda: Vec<f64> = (0..n).map(|_| rng.random_range(cfg.lambda_min..=cfg.lambda_max)).collect();
    let dist = Matrix::from_fn(n, n, |i, j| {
        let (a, b) = (coords[i], coords[j]);
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
    });
    let mean_dist = dist.as_slice().iter().sum::<f64>() / (n * (n - 1)) as f64;
    let attract: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..=1.0)).collect();
    let mut p = Matrix::square(n);
    for i in 0..n {
        let skew = rng.random_range(0.0..=cfg.max_skew);
        let w: Vec<f64> = (0..n)
            .map(|j| if i == j { 0.0 } else { attract[j] * (-skew * dist[(i, j)] / mean_dist).exp() })
            .collect();
        let total: f64 = w.iter().sum();
        for j in 0..n {
            p[(i, j)] = w[j] / total;
        }
    }
    let t = dist.map(|d| d / cfg.speed);
    let units = match cfg.style {
        ScenarioStyle::Uniform => Units::default(),
        ScenarioStyle::Grid => Units { time: "step".into(), rate: "1/step".into() },
    };
    let s = Scenario { n, lambda, p, t, coords: Some(coords), units };
    let violations = validate_scenario(&s);
    if let Some(v) = violations.first() {
        return Err(Error::InvalidInput(format!("generator produced an invalid scenario: {v}")));
    }
    Ok(s)
}

/// The 20-station surrogate scenario.
pub fn surrogate_scenario() -> Scenario<f64> {
    generate_scenario(SURROGATE_STATIONS, SURROGATE_SEED, ScenarioStyle::Uniform).expect("surrogate is valid")
}

/// The 5-station grid scenario.
pub fn grid_scenario() -> Scenario<f64> {
    generate_scenario(5, GRID_SEED, ScenarioStyle::Grid).expect("grid scenario is valid")
}

//! Exact analysis of a closed Jackson network with station and road nodes.
//!
//! Two independent routes are provided: normalization constants by
//! convolution (giving throughput and availability from their ratio) and
//! exact mean value analysis. Road nodes are infinite-server, so their
//! combined contribution to the convolution is a single Poisson-shaped term
//! and in MVA they act as a pure delay.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::stationary_distribution;
use crate::network::{JacksonNetwork, NodeKind};
use crate::num::{Real, Scalar};

/// Partial normalization constants above this switch the convolution to log space.
pub const LOG_SPACE_THRESHOLD: f64 = 1e280;

/// Relative throughput of every node, scaled so the largest station value is 1.
///
/// Solves the station-only traffic equations and unfolds road nodes as
/// `pi_road = pi_parent * p_parent,child`.
pub fn relative_throughput<T: Scalar>(net: &JacksonNetwork<T>) -> Result<Vec<T>> {
    let n = net.n_stations();
    let p = net.station_routing();
    let ss = stationary_distribution(p).ok_or(Error::SingularChain)?;
    let top = ss.iter().fold(T::zero(), |m, &v| m.max_of(v));
    if top.is_zero() {
        return Err(Error::SingularChain);
    }
    let mut pi: Vec<T> = ss.into_iter().map(|v| v / top).collect();
    pi.reserve(net.len() - n);
    for nd in &net.nodes()[n..] {
        match nd.kind {
            NodeKind::Road { parent, child } => pi.push(pi[parent] * p[(parent, child)]),
            NodeKind::Station(_) => unreachable!("stations precede roads"),
        }
    }
    Ok(pi)
}

/// `gamma_i = pi_i / mu_i(1)`: station throughput over rate, road throughput times travel time.
///
/// Stations with zero rate and (numerically) zero throughput get utilization 0.
pub fn relative_utilization<T: Scalar>(net: &JacksonNetwork<T>, pi: &[T]) -> Result<Vec<T>> {
    net.nodes()
        .iter()
        .zip(pi)
        .enumerate()
        .map(|(k, (nd, &p))| match nd.kind {
            NodeKind::Station(_) => {
                if nd.param.is_zero() {
                    if p.near_zero(T::one()) {
                        Ok(T::zero())
                    } else {
                        Err(Error::ZeroRate { node: k })
                    }
                } else {
                    Ok(p / nd.param)
                }
            }
            NodeKind::Road { .. } => Ok(p * nd.param),
        })
        .collect()
}

/// Normalization constants `G(0..=m)`, stored as natural logarithms.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NormalizationConstants<T> {
    log_g: Vec<T>,
    log_space: bool,
}

impl<T: Real> NormalizationConstants<T> {
    pub fn max_population(&self) -> usize {
        self.log_g.len() - 1
    }

    pub fn log_g(&self, k: usize) -> T {
        self.log_g[k]
    }

    /// `G(k)`; may be infinite when the value only fits in log space.
    pub fn g(&self, k: usize) -> T {
        self.log_g[k].exp()
    }

    /// `G(k-1) / G(k)` for `k >= 1`.
    pub fn ratio(&self, k: usize) -> T {
        (self.log_g[k - 1] - self.log_g[k]).exp()
    }

    /// Whether the convolution had to run in log space.
    pub fn used_log_space(&self) -> bool {
        self.log_space
    }
}

/// Loads of the station nodes plus the summed road load.
struct Loads<T> {
    stations: Vec<T>,
    roads: T,
}

fn loads<T: Scalar>(net: &JacksonNetwork<T>, gamma: &[T]) -> Loads<T> {
    let n = net.n_stations();
    Loads { stations: gamma[..n].to_vec(), roads: gamma[n..].iter().fold(T::zero(), |a, &b| a + b) }
}

fn log_add_exp<T: Real>(a: T, b: T) -> T {
    if a == T::neg_infinity() {
        return b;
    }
    if b == T::neg_infinity() {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

fn convolve_linear<T: Real>(l: &Loads<T>, m: usize) -> Option<Vec<T>> {
    let limit = T::from_f64_lossy(LOG_SPACE_THRESHOLD);
    let ok = |v: T| v.is_finite() && v <= limit;
    let mut g = vec![T::zero(); m + 1];
    g[0] = T::one();
    for &gam in l.stations.iter().filter(|g| !g.is_zero()) {
        for k in 1..=m {
            g[k] = g[k] + gam * g[k - 1];
            if !ok(g[k]) {
                return None;
            }
        }
    }
    let mut h = vec![T::zero(); m + 1];
    h[0] = T::one();
    for k in 1..=m {
        h[k] = h[k - 1] * l.roads / T::from_usize_lossy(k);
        if !ok(h[k]) {
            return None;
        }
    }
    let mut out = vec![T::zero(); m + 1];
    for k in 0..=m {
        let mut s = T::zero();
        for j in 0..=k {
            s = s + g[j] * h[k - j];
        }
        if !ok(s) {
            return None;
        }
        out[k] = s;
    }
    Some(out)
}

fn convolve_log<T: Real>(l: &Loads<T>, m: usize) -> Vec<T> {
    let ninf = T::neg_infinity();
    let mut g = vec![ninf; m + 1];
    g[0] = T::zero();
    for &gam in l.stations.iter().filter(|g| !g.is_zero()) {
        let lg = gam.ln();
        for k in 1..=m {
            g[k] = log_add_exp(g[k], lg + g[k - 1]);
        }
    }
    let mut h = vec![ninf; m + 1];
    h[0] = T::zero();
    if !l.roads.is_zero() {
        let lr = l.roads.ln();
        for k in 1..=m {
            h[k] = h[k - 1] + lr - T::from_usize_lossy(k).ln();
        }
    }
    (0..=m)
        .map(|k| {
            let terms = (0..=k).map(|j| g[j] + h[k - j]);
            let top = terms.clone().fold(ninf, |a, b| a.max(b));
            if top == ninf {
                return ninf;
            }
            let s = terms.fold(T::zero(), |a, t| a + (t - top).exp());
            top + s.ln()
        })
        .collect()
}

/// Normalization constants `G(0..=m)` of the product-form distribution.
///
/// Station nodes are folded in one at a time; all road nodes together
/// contribute `Gamma^k / k!` with `Gamma` the summed road utilization.
pub fn normalization_constants<T: Real>(
    net: &JacksonNetwork<T>,
    pi: &[T],
    m: usize,
) -> Result<NormalizationConstants<T>> {
    let gamma = relative_utilization(net, pi)?;
    let l = loads(net, &gamma);
    if let Some(lin) = convolve_linear(&l, m) {
        return Ok(NormalizationConstants { log_g: lin.into_iter().map(|v| v.ln()).collect(), log_space: false });
    }
    let log_g = convolve_log(&l, m);
    if let Some(k) = log_g.iter().position(|v| !v.is_finite()) {
        return Err(Error::Overflow { population: k });
    }
    Ok(NormalizationConstants { log_g, log_space: true })
}

/// Node throughput `pi_i G(m-1)/G(m)` and station availability `gamma_i G(m-1)/G(m)`.
pub fn throughput_and_availability<T: Real>(
    net: &JacksonNetwork<T>,
    pi: &[T],
    gamma: &[T],
    g: &NormalizationConstants<T>,
    m: usize,
) -> Result<(Vec<T>, Vec<T>)> {
    if m > g.max_population() {
        return Err(Error::InvalidInput(format!(
            "normalization constants only reach population {}",
            g.max_population()
        )));
    }
    if m == 0 {
        return Ok((vec![T::zero(); net.len()], vec![T::zero(); net.n_stations()]));
    }
    let ratio = g.ratio(m);
    let lambda = pi.iter().map(|&p| p * ratio).collect();
    let avail = gamma[..net.n_stations()].iter().map(|&gm| gm * ratio).collect();
    Ok((lambda, avail))
}

/// Station-level results of MVA at one population.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MvaLevel<T> {
    pub population: usize,
    pub queue: Vec<T>,
    pub throughput: Vec<T>,
    pub availability: Vec<T>,
}

/// Exact MVA for populations `1..=m`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MvaResult<T> {
    pub pi: Vec<T>,
    pub gamma: Vec<T>,
    /// One entry per population `1..=m`.
    pub levels: Vec<MvaLevel<T>>,
    /// Mean wait at every node, at population `m`.
    pub wait: Vec<T>,
    /// Mean queue length at every node, at population `m`.
    pub queue: Vec<T>,
    /// Throughput of every node, at population `m`.
    pub throughput: Vec<T>,
    /// Station availability at population `m`.
    pub availability: Vec<T>,
}

/// Reduced view of a network for repeated MVA: station rates and loads plus
/// the aggregate road delay.
#[derive(Clone, Debug, PartialEq)]
pub struct StationModel<T> {
    pub pi: Vec<T>,
    pub gamma: Vec<T>,
    pub road_load: T,
}

impl<T: Scalar> StationModel<T> {
    pub fn from_network(net: &JacksonNetwork<T>) -> Result<Self> {
        let pi = relative_throughput(net)?;
        let gamma = relative_utilization(net, &pi)?;
        let n = net.n_stations();
        let road_load = gamma[n..].iter().fold(T::zero(), |a, &b| a + b);
        Ok(Self { pi: pi[..n].to_vec(), gamma: gamma[..n].to_vec(), road_load })
    }

    /// Runs MVA to population `m`, calling `visit(k, x_k, queue)` after each
    /// level, where `x_k = G(k-1)/G(k)`.
    pub fn run(&self, m: usize, mut visit: impl FnMut(usize, T, &[T])) {
        let n = self.gamma.len();
        let mut queue = vec![T::zero(); n];
        for k in 1..=m {
            // pi_i W_i = gamma_i (1 + L_i); roads contribute their delay load.
            let mut denom = self.road_load;
            for i in 0..n {
                denom = denom + self.gamma[i] * (T::one() + queue[i]);
            }
            let x = T::from_usize_lossy(k) / denom;
            for i in 0..n {
                queue[i] = self.gamma[i] * (T::one() + queue[i]) * x;
            }
            visit(k, x, &queue);
        }
    }

    /// `G(m-1)/G(m)` via MVA; zero for `m == 0`.
    pub fn throughput_scale(&self, m: usize) -> T {
        let mut out = T::zero();
        self.run(m, |_, x, _| out = x);
        out
    }

    /// Station availabilities at population `m`.
    pub fn availability(&self, m: usize) -> Vec<T> {
        let x = self.throughput_scale(m);
        self.gamma.iter().map(|&g| g * x).collect()
    }

    /// Station availabilities for every population `0..=m`.
    pub fn availability_curve(&self, m: usize) -> Vec<Vec<T>> {
        let mut out = Vec::with_capacity(m + 1);
        out.push(vec![T::zero(); self.gamma.len()]);
        self.run(m, |_, x, _| out.push(self.gamma.iter().map(|&g| g * x).collect()));
        out
    }
}

/// Exact mean value analysis of `net` for populations `1..=m`.
pub fn mva<T: Scalar>(net: &JacksonNetwork<T>, m: usize) -> Result<MvaResult<T>> {
    let pi = relative_throughput(net)?;
    let gamma = relative_utilization(net, &pi)?;
    let n = net.n_stations();
    let model = StationModel {
        pi: pi[..n].to_vec(),
        gamma: gamma[..n].to_vec(),
        road_load: gamma[n..].iter().fold(T::zero(), |a, &b| a + b),
    };
    let mut levels = Vec::with_capacity(m);
    let mut last_x = T::zero();
    let mut prev_queue = vec![T::zero(); n];
    let mut last_queue = vec![T::zero(); n];
    model.run(m, |k, x, q| {
        levels.push(MvaLevel {
            population: k,
            queue: q.to_vec(),
            throughput: model.pi.iter().map(|&p| p * x).collect(),
            availability: model.gamma.iter().map(|&g| g * x).collect(),
        });
        last_x = x;
        prev_queue.clone_from(&last_queue);
        last_queue.copy_from_slice(q);
    });

    let mut wait = Vec::with_capacity(net.len());
    let mut queue = Vec::with_capacity(net.len());
    for (k, nd) in net.nodes().iter().enumerate() {
        match nd.kind {
            NodeKind::Station(i) => {
                let w = if pi[k].is_zero() || m == 0 {
                    T::zero()
                } else {
                    (T::one() + prev_queue[i]) / nd.param
                };
                wait.push(w);
                queue.push(last_queue[i]);
            }
            NodeKind::Road { .. } => {
                wait.push(nd.param);
                queue.push(gamma[k] * last_x);
            }
        }
    }
    let throughput = pi.iter().map(|&p| p * last_x).collect();
    let availability = model.gamma.iter().map(|&g| g * last_x).collect();
    Ok(MvaResult { pi, gamma, levels, wait, queue, throughput, availability })
}

/// Every metric of one network at its population.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AnalysisResult<T> {
    pub pi: Vec<T>,
    pub gamma: Vec<T>,
    pub g: NormalizationConstants<T>,
    pub throughput: Vec<T>,
    pub availability: Vec<T>,
    pub queue: Vec<T>,
    pub wait: Vec<T>,
}

/// Runs both analysis routes at the network's population.
pub fn analyze<T: Real>(net: &JacksonNetwork<T>) -> Result<AnalysisResult<T>> {
    let m = net.population();
    let pi = relative_throughput(net)?;
    let gamma = relative_utilization(net, &pi)?;
    let g = normalization_constants(net, &pi, m)?;
    let (throughput, availability) = throughput_and_availability(net, &pi, &gamma, &g, m)?;
    let mv = mva(net, m)?;
    Ok(AnalysisResult { pi, gamma, g, throughput, availability, queue: mv.queue, wait: mv.wait })
}

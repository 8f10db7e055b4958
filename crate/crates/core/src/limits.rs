//! Quantile tables for the two limit laws calibrating the confidence
//! intervals: the Chernoff distribution (argmin of two-sided Brownian motion
//! plus a parabola) scaling the threshold estimators, and the parameter-free
//! limit of the isotonic likelihood-ratio statistic.

use crate::error::{Error, Result};
use crate::exec::map_indexed;
use crate::isotonic::{constrained_rss_split, unconstrained_rss};
use crate::sample::Obs;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::sync::OnceLock;

/// Round-number high-probability constants used when building the stage-one
/// sampling interval at miss probability 0.01; both dominate the tabulated
/// quantiles they stand in for.
pub const CONSERVATIVE_CHERNOFF_Q995: f64 = 2.0;
pub const CONSERVATIVE_LR_LIMIT_Q99: f64 = 4.0;

const TABLE_FORMAT_VERSION: u32 = 1;

/// Probability ladder tabulated by both simulators.
pub const TABLE_PROBS: [f64; 19] = [
    0.001, 0.005, 0.01, 0.025, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.975,
    0.99, 0.995, 0.999,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LimitDist {
    Chernoff,
    LrLimit,
}

impl std::fmt::Display for LimitDist {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LimitDist::Chernoff => write!(f, "chernoff"),
            LimitDist::LrLimit => write!(f, "lr_limit"),
        }
    }
}

/// Provenance of a table: simulation parameters and seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TableMeta {
    Chernoff { paths: usize, half_width: f64, step: f64, seed: u64 },
    LrLimit { outer: usize, inner_n: usize, seed: u64 },
}

impl TableMeta {
    /// Number of Monte Carlo draws behind the empirical quantiles.
    pub fn sample_size(&self) -> usize {
        match self {
            TableMeta::Chernoff { paths, .. } => *paths,
            TableMeta::LrLimit { outer, .. } => *outer,
        }
    }
}

/// Tabulated quantile function of a limit law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimitQuantiles {
    version: u32,
    pub dist: LimitDist,
    pub probs: Vec<f64>,
    pub values: Vec<f64>,
    pub meta: TableMeta,
}

impl LimitQuantiles {
    fn new(dist: LimitDist, probs: Vec<f64>, values: Vec<f64>, meta: TableMeta) -> Self {
        Self { version: TABLE_FORMAT_VERSION, dist, probs, values, meta }
    }

    /// Interpolated quantile at probability `p` (piecewise linear, exact at
    /// tabulated nodes).
    pub fn quantile(&self, p: f64) -> Result<f64> {
        let (min, max) = (self.probs[0], *self.probs.last().expect("nonempty"));
        if !(p >= min && p <= max) {
            return Err(Error::QuantileOutOfRange { p, min, max });
        }
        let idx = self.probs.partition_point(|&q| q <= p);
        if idx == 0 {
            return Ok(self.values[0]);
        }
        if idx == self.probs.len() {
            return Ok(*self.values.last().expect("nonempty"));
        }
        let (p0, p1) = (self.probs[idx - 1], self.probs[idx]);
        let (v0, v1) = (self.values[idx - 1], self.values[idx]);
        Ok(v0 + (v1 - v0) * (p - p0) / (p1 - p0))
    }

    /// Monte Carlo standard error of the quantile at a tabulated probability,
    /// via the usual `sqrt(p(1-p)/N) / f(q)` with the density estimated from
    /// neighbouring table nodes.
    pub fn quantile_mc_se(&self, p: f64) -> f64 {
        let i = self
            .probs
            .iter()
            .position(|&q| (q - p).abs() < 1e-12)
            .expect("p must be a tabulated probability");
        let lo = i.saturating_sub(1);
        let hi = (i + 1).min(self.probs.len() - 1);
        let density = (self.probs[hi] - self.probs[lo]) / (self.values[hi] - self.values[lo]);
        let n = self.meta.sample_size() as f64;
        (p * (1.0 - p) / n).sqrt() / density.max(f64::MIN_POSITIVE)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let t: LimitQuantiles = serde_json::from_str(s)
            .map_err(|e| Error::InvalidConfig(format!("bad table JSON: {e}")))?;
        if t.version != TABLE_FORMAT_VERSION {
            return Err(Error::InvalidConfig(format!(
                "table format version {} unsupported (expected {TABLE_FORMAT_VERSION})",
                t.version
            )));
        }
        if t.probs.len() != t.values.len() || t.probs.is_empty() {
            return Err(Error::InvalidConfig("table probs/values mismatch".into()));
        }
        Ok(t)
    }
}

/// Empirical quantile with linear interpolation between order statistics.
fn empirical_quantiles(mut draws: Vec<f64>, probs: &[f64]) -> Vec<f64> {
    draws.sort_by(f64::total_cmp);
    let n = draws.len();
    probs
        .iter()
        .map(|&p| {
            let h = p * (n - 1) as f64;
            let lo = h.floor() as usize;
            let frac = h - lo as f64;
            if lo + 1 < n {
                draws[lo] + frac * (draws[lo + 1] - draws[lo])
            } else {
                draws[n - 1]
            }
        })
        .collect()
}

/// Fraction of paths allowed to hit the grid boundary before the grid is
/// declared too narrow.
const BOUNDARY_TOLERANCE: f64 = 0.001;

/// Simulate the argmin of two-sided Brownian motion plus `t^2` on the grid
/// `[-half_width, half_width]` with the given step, and tabulate its
/// quantiles. Deterministic given the seed, independent of thread count.
pub fn tabulate_chernoff(paths: usize, half_width: f64, step: f64, seed: u64) -> Result<LimitQuantiles> {
    if half_width < 2.0 {
        return Err(Error::InvalidConfig(format!("half_width {half_width} must be >= 2")));
    }
    if !(step > 0.0 && step <= 0.01) {
        return Err(Error::InvalidConfig(format!("step {step} must be in (0, 0.01]")));
    }
    if paths < 100_000 {
        return Err(Error::InvalidConfig(format!("paths {paths} must be >= 1e5")));
    }
    let k = (half_width / step).round() as usize;
    let sqrt_step = step.sqrt();

    let results: Vec<(f64, bool)> = map_indexed(paths, |path| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(path as u64);
        // Argmin over {0} and each one-sided walk.
        let mut best_val = 0.0f64;
        let mut best_t = 0.0f64;
        let mut at_boundary = false;
        for side in [1.0f64, -1.0] {
            let mut w = 0.0f64;
            for j in 1..=k {
                let z: f64 = StandardNormal.sample(&mut rng);
                w += sqrt_step * z;
                let t = side * j as f64 * step;
                let val = w + t * t;
                if val < best_val {
                    best_val = val;
                    best_t = t;
                    at_boundary = j == k;
                }
            }
        }
        (best_t, at_boundary)
    });

    let boundary = results.iter().filter(|r| r.1).count();
    let boundary_fraction = boundary as f64 / paths as f64;
    if boundary_fraction > BOUNDARY_TOLERANCE {
        return Err(Error::GridTooNarrow { boundary_fraction: boundary_fraction * 100.0 });
    }

    let draws: Vec<f64> = results.into_iter().map(|r| r.0).collect();
    let values = empirical_quantiles(draws, &TABLE_PROBS);
    Ok(LimitQuantiles::new(
        LimitDist::Chernoff,
        TABLE_PROBS.to_vec(),
        values,
        TableMeta::Chernoff { paths, half_width, step, seed },
    ))
}

/// Tabulate the likelihood-ratio limit law through its finite-sample
/// surrogate: the one-stage statistic in the canonical model `m(x) = x`,
/// threshold 0.5 at 0.5, unit noise, uniform design, with the true variance
/// supplied. Deterministic given the seed, independent of thread count.
pub fn tabulate_lr_limit(outer: usize, inner_n: usize, seed: u64) -> Result<LimitQuantiles> {
    if outer < 10_000 {
        return Err(Error::InvalidConfig(format!("outer {outer} must be >= 1e4")));
    }
    if inner_n < 2000 {
        return Err(Error::InvalidConfig(format!("inner_n {inner_n} must be >= 2000")));
    }
    let draws: Vec<f64> = map_indexed(outer, |rep| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(rep as u64);
        let mut obs: Vec<Obs> = (0..inner_n)
            .map(|_| {
                let x: f64 = rand::Rng::random_range(&mut rng, 0.0..1.0);
                let z: f64 = StandardNormal.sample(&mut rng);
                Obs::new(x, x + z)
            })
            .collect();
        obs.sort_by(|a, b| a.x.total_cmp(&b.x));
        let split = obs.partition_point(|p| p.x < 0.5);
        let stat = constrained_rss_split(&obs, split, 0.5) - unconstrained_rss(&obs);
        stat.max(0.0)
    });
    let values = empirical_quantiles(draws, &TABLE_PROBS);
    Ok(LimitQuantiles::new(
        LimitDist::LrLimit,
        TABLE_PROBS.to_vec(),
        values,
        TableMeta::LrLimit { outer, inner_n, seed },
    ))
}

/// Default tabulation parameters for the shipped tables and the `tabulate`
/// command.
pub const DEFAULT_CHERNOFF_PATHS: usize = 200_000;
pub const DEFAULT_CHERNOFF_HALF_WIDTH: f64 = 3.0;
pub const DEFAULT_CHERNOFF_STEP: f64 = 0.002;
pub const DEFAULT_LR_OUTER: usize = 20_000;
pub const DEFAULT_LR_INNER_N: usize = 5000;

static CHERNOFF_JSON: &str = include_str!("../assets/chernoff_table.json");
static LR_LIMIT_JSON: &str = include_str!("../assets/lr_limit_table.json");

/// The shipped Chernoff table (seed recorded in its metadata).
pub fn embedded_chernoff() -> &'static LimitQuantiles {
    static T: OnceLock<LimitQuantiles> = OnceLock::new();
    T.get_or_init(|| LimitQuantiles::from_json_str(CHERNOFF_JSON).expect("embedded table parses"))
}

/// The shipped likelihood-ratio-limit table (seed recorded in its metadata).
pub fn embedded_lr_limit() -> &'static LimitQuantiles {
    static T: OnceLock<LimitQuantiles> = OnceLock::new();
    T.get_or_init(|| LimitQuantiles::from_json_str(LR_LIMIT_JSON).expect("embedded table parses"))
}

/// The pair of tables confidence-interval construction draws from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileTables {
    pub chernoff: LimitQuantiles,
    pub lr_limit: LimitQuantiles,
}

impl QuantileTables {
    pub fn embedded() -> Self {
        Self { chernoff: embedded_chernoff().clone(), lr_limit: embedded_lr_limit().clone() }
    }

    /// Two-sided normal-style quantile for a level-`alpha` Wald interval.
    pub fn chernoff_two_sided(&self, alpha: f64) -> Result<f64> {
        self.chernoff.quantile(1.0 - alpha / 2.0)
    }

    /// Upper quantile for a level-`alpha` likelihood-ratio region.
    pub fn lr_upper(&self, alpha: f64) -> Result<f64> {
        self.lr_limit.quantile(1.0 - alpha)
    }

    /// Stage-one Chernoff quantile at miss probability `beta`: the round
    /// conservative constant when it applies, else tabulated.
    pub fn stage_one_chernoff(&self, beta: f64, conservative: bool) -> Result<f64> {
        if conservative && (beta - 0.01).abs() < 1e-12 {
            Ok(CONSERVATIVE_CHERNOFF_Q995)
        } else {
            self.chernoff.quantile(1.0 - beta / 2.0)
        }
    }

    /// Stage-one likelihood-ratio quantile at miss probability `beta`.
    pub fn stage_one_lr(&self, beta: f64, conservative: bool) -> Result<f64> {
        if conservative && (beta - 0.01).abs() < 1e-12 {
            Ok(CONSERVATIVE_LR_LIMIT_Q99)
        } else {
            self.lr_limit.quantile(1.0 - beta)
        }
    }
}

//! Observation batches: ordered covariate/response pairs with weights.

use crate::error::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Closed design interval `[lo, hi]` on the covariate axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub lo: f64,
    pub hi: f64,
}

impl Domain {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::InvalidConfig(format!(
                "domain ({lo}, {hi}) must be finite with lo < hi"
            )));
        }
        Ok(Self { lo, hi })
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.lo && x <= self.hi
    }

    pub fn clamp(&self, x: f64) -> f64 {
        x.clamp(self.lo, self.hi)
    }

    /// Intersect `[lo, hi]` with another interval given as `(lo, hi)`.
    pub fn intersect(&self, lo: f64, hi: f64) -> (f64, f64) {
        (self.clamp(lo), self.clamp(hi))
    }
}

/// Which sampling stage a batch came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    #[default]
    One,
    Two,
}

/// A single weighted observation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Obs {
    pub x: f64,
    pub y: f64,
    pub w: f64,
}

impl Obs {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y, w: 1.0 }
    }
}

/// How duplicate covariates are resolved at ingestion.
///
/// `Pool` merges duplicates into one point carrying the summed weight and the
/// weighted-mean response, which leaves the least-squares problem unchanged.
/// `Jitter` spreads duplicates by a small random offset that preserves the
/// ordering of distinct covariate values, for emulation settings where each
/// observation must keep its own response.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TiePolicy {
    Pool,
    Jitter { eps: f64 },
}

/// Ordered covariate/response observations over a domain.
///
/// Construction sorts by `x`, validates that all points lie in the domain and
/// carry positive weights, and resolves duplicate covariates per the tie
/// policy, so downstream fitting code can rely on strictly increasing `x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleBatch {
    points: Vec<Obs>,
    domain: Domain,
    stage: Stage,
}

impl SampleBatch {
    /// Build a batch with the default `Pool` tie policy.
    pub fn new(points: Vec<Obs>, domain: Domain, stage: Stage) -> Result<Self> {
        Self::build(points, domain, stage, TiePolicy::Pool, &mut NoRng)
    }

    /// Build a batch resolving duplicate covariates by seeded jitter.
    pub fn with_jitter<R: Rng>(
        points: Vec<Obs>,
        domain: Domain,
        stage: Stage,
        eps: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if !(eps > 0.0) {
            return Err(Error::InvalidConfig("jitter eps must be positive".into()));
        }
        Self::build(points, domain, stage, TiePolicy::Jitter { eps }, rng)
    }

    fn build<R: Rng>(
        mut points: Vec<Obs>,
        domain: Domain,
        stage: Stage,
        policy: TiePolicy,
        rng: &mut R,
    ) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptySample);
        }
        for (i, p) in points.iter().enumerate() {
            if !p.x.is_finite() || !p.y.is_finite() || !p.w.is_finite() {
                return Err(Error::InvalidSample(format!("non-finite value at point {i}")));
            }
            if !domain.contains(p.x) {
                return Err(Error::InvalidSample(format!(
                    "x = {} at point {i} outside domain [{}, {}]",
                    p.x, domain.lo, domain.hi
                )));
            }
            if !(p.w > 0.0) {
                return Err(Error::InvalidSample(format!("weight {} at point {i} not positive", p.w)));
            }
        }
        points.sort_by(|a, b| a.x.total_cmp(&b.x));
        let points = match policy {
            TiePolicy::Pool => pool_duplicates(points),
            TiePolicy::Jitter { eps } => jitter_duplicates(points, domain, eps, rng),
        };
        Ok(Self { points, domain, stage })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Obs] {
        &self.points
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn xs(&self) -> impl Iterator<Item = f64> + '_ {
        self.points.iter().map(|p| p.x)
    }

    pub fn ys(&self) -> impl Iterator<Item = f64> + '_ {
        self.points.iter().map(|p| p.y)
    }

    /// Number of points with `x` strictly below `t` (points are sorted).
    pub fn split_index(&self, t: f64) -> usize {
        self.points.partition_point(|p| p.x < t)
    }

    /// Merge this batch with another over the same domain, re-resolving ties.
    pub fn pooled_with(&self, other: &SampleBatch) -> Result<SampleBatch> {
        let mut pts = self.points.clone();
        pts.extend_from_slice(other.points());
        SampleBatch::new(pts, self.domain, self.stage)
    }
}

/// Merge runs of equal covariates into single points with summed weight and
/// weighted-mean response.
fn pool_duplicates(points: Vec<Obs>) -> Vec<Obs> {
    let mut out: Vec<Obs> = Vec::with_capacity(points.len());
    for p in points {
        match out.last_mut() {
            Some(last) if last.x == p.x => {
                let w = last.w + p.w;
                last.y = (last.w * last.y + p.w * p.y) / w;
                last.w = w;
            }
            _ => out.push(p),
        }
    }
    out
}

/// Spread runs of equal covariates by random offsets small enough that the
/// ordering of distinct covariate values is unchanged.
fn jitter_duplicates<R: Rng>(points: Vec<Obs>, domain: Domain, eps: f64, rng: &mut R) -> Vec<Obs> {
    let n = points.len();
    let mut out: Vec<Obs> = Vec::with_capacity(n);
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && points[j].x == points[i].x {
            j += 1;
        }
        let run = j - i;
        if run == 1 {
            out.push(points[i]);
        } else {
            let v = points[i].x;
            let left_gap = if i == 0 { v - domain.lo } else { v - points[i - 1].x };
            let right_gap = if j == n { domain.hi - v } else { points[j].x - v };
            // Half-width that cannot cross the neighbouring distinct values.
            let h = eps.min(left_gap / 2.0).min(right_gap / 2.0);
            let mut offsets: Vec<f64> = (0..run).map(|_| rng.random_range(-h..=h)).collect();
            offsets.sort_by(f64::total_cmp);
            for (k, off) in offsets.into_iter().enumerate() {
                let mut p = points[i + k];
                p.x = domain.clamp(v + off);
                out.push(p);
            }
        }
        i = j;
    }
    // Offsets within a run may still collide (h == 0 at a boundary); pool those.
    pool_duplicates(out)
}

/// Rng stand-in for the pooling path, which never draws.
struct NoRng;

impl rand::RngCore for NoRng {
    fn next_u32(&mut self) -> u32 {
        unreachable!("pooling never samples")
    }
    fn next_u64(&mut self) -> u64 {
        unreachable!("pooling never samples")
    }
    fn fill_bytes(&mut self, _dest: &mut [u8]) {
        unreachable!("pooling never samples")
    }
}

/// Parse CSV content with two or three numeric columns `x,y[,w]`.
///
/// A first line that does not parse as numbers is treated as a header.
/// Errors report 1-based line numbers.
pub fn parse_csv(content: &str) -> Result<Vec<Obs>> {
    let mut out = Vec::new();
    for (idx, line) in content.lines().enumerate() {
        let lineno = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        if fields.len() < 2 || fields.len() > 3 {
            return Err(Error::InvalidSample(format!(
                "line {lineno}: expected 2 or 3 columns, got {}",
                fields.len()
            )));
        }
        let parsed: Option<Vec<f64>> = fields.iter().map(|f| f.parse::<f64>().ok()).collect();
        match parsed {
            Some(vals) => {
                let w = vals.get(2).copied().unwrap_or(1.0);
                out.push(Obs { x: vals[0], y: vals[1], w });
            }
            None if idx == 0 => continue, // header
            None => {
                return Err(Error::InvalidSample(format!(
                    "line {lineno}: could not parse numeric fields from '{trimmed}'"
                )));
            }
        }
    }
    if out.is_empty() {
        return Err(Error::EmptySample);
    }
    Ok(out)
}

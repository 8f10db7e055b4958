//! Adaptive two-stage design: budget split, stage-two sampling interval,
//! procedure orchestration, efficiency and multistage-rate calculators.

use crate::ci::{lr_ci, wald_ci_one_stage, wald_ci_two_stage, IntervalEstimate};
use crate::error::{Error, Result};
use crate::isotonic::pava;
use crate::limits::QuantileTables;
use crate::nuisance::{
    deriv_floor, estimate_nuisance, histogram_density, sigma2_floor, variance_gasser,
    NuisanceEstimates, SourceStage,
};
use crate::sample::{Domain, Obs, SampleBatch, Stage};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use std::time::Instant;

/// Shape density on `[-1, 1]` that stage-two covariates follow after
/// renormalization to the sampling interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Psi {
    #[default]
    Uniform,
}

impl Psi {
    /// Value of the shape density at 0.
    pub fn at_zero(&self) -> f64 {
        match self {
            Psi::Uniform => 0.5,
        }
    }

    /// Draw one covariate from the shape renormalized to `[lo, hi]`.
    pub fn sample_in<R: Rng>(&self, lo: f64, hi: f64, rng: &mut R) -> f64 {
        match self {
            Psi::Uniform => rng.random_range(lo..hi),
        }
    }

    /// Density of the renormalized draw at any interior point of `[lo, hi]`.
    pub fn density_in(&self, lo: f64, hi: f64) -> f64 {
        match self {
            Psi::Uniform => 1.0 / (hi - lo),
        }
    }
}

/// Family of interval used at a given stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageFamily {
    Wald,
    Lr,
}

/// Stage allocations and the stage-two sampling interval with its constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub n_total: usize,
    pub p: f64,
    pub n1: usize,
    pub n2: usize,
    pub beta: f64,
    pub gamma1: f64,
    pub c1: f64,
    pub interval: (f64, f64),
    pub stage1_family: StageFamily,
    pub psi: Psi,
}

/// Where covariate/response pairs come from: a generative model or a finite
/// population sampled by nearest-covariate matching without replacement.
#[derive(Clone)]
pub enum SamplingOracle {
    Simulate { m: Arc<dyn Fn(f64) -> f64 + Send + Sync>, sigma: f64 },
    Population { points: Arc<Vec<Obs>>, used: Vec<bool> },
}

impl std::fmt::Debug for SamplingOracle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SamplingOracle::Simulate { sigma, .. } => {
                f.debug_struct("Simulate").field("sigma", sigma).finish_non_exhaustive()
            }
            SamplingOracle::Population { points, used } => f
                .debug_struct("Population")
                .field("size", &points.len())
                .field("used", &used.iter().filter(|u| **u).count())
                .finish(),
        }
    }
}

impl SamplingOracle {
    pub fn simulate(m: Arc<dyn Fn(f64) -> f64 + Send + Sync>, sigma: f64) -> Result<Self> {
        if !(sigma >= 0.0) {
            return Err(Error::InvalidConfig(format!("sigma = {sigma} must be nonnegative")));
        }
        Ok(SamplingOracle::Simulate { m, sigma })
    }

    /// Build a population oracle; covariates must be unique (apply the pool
    /// or jitter tie policy first).
    pub fn population(points: Arc<Vec<Obs>>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptySample);
        }
        for w in points.windows(2) {
            if !(w[0].x < w[1].x) {
                return Err(Error::InvalidConfig(
                    "population covariates must be sorted and unique; pool or jitter ties first"
                        .into(),
                ));
            }
        }
        let used = vec![false; points.len()];
        Ok(SamplingOracle::Population { points, used })
    }

    /// Remaining points a population oracle can hand out.
    pub fn remaining(&self) -> Option<usize> {
        match self {
            SamplingOracle::Simulate { .. } => None,
            SamplingOracle::Population { used, .. } => Some(used.iter().filter(|u| !**u).count()),
        }
    }

    /// Known design density over a sampled interval, when the oracle has one.
    pub fn known_density(&self, lo: f64, hi: f64, psi: Psi) -> Option<f64> {
        match self {
            SamplingOracle::Simulate { .. } => Some(psi.density_in(lo, hi)),
            SamplingOracle::Population { .. } => None,
        }
    }

    /// Draw `count` pairs with covariates in `[lo, hi]` (simulate mode: per
    /// the shape density; population mode: nearest available point to each of
    /// `count` equally spaced targets, ties to the lower covariate, without
    /// replacement).
    ///
    /// The batch's domain is the requested interval, widened to the realized
    /// covariate hull in population mode: a stage's fitted function lives on
    /// the interval that stage sampled, and threshold inversion falls back to
    /// that interval's ends.
    pub fn draw(
        &mut self,
        lo: f64,
        hi: f64,
        count: usize,
        psi: Psi,
        stage: Stage,
        rng: &mut ChaCha8Rng,
    ) -> Result<SampleBatch> {
        if count == 0 {
            return Err(Error::EmptySample);
        }
        let pts = match self {
            SamplingOracle::Simulate { m, sigma } => (0..count)
                .map(|_| {
                    let x = psi.sample_in(lo, hi, rng);
                    let noise: f64 = StandardNormal.sample(rng);
                    Obs::new(x, m(x) + *sigma * noise)
                })
                .collect::<Vec<Obs>>(),
            SamplingOracle::Population { points, used } => {
                let free = used.iter().filter(|u| !**u).count();
                if count > free {
                    return Err(Error::BudgetExceedsPopulation {
                        budget: count,
                        population: free,
                    });
                }
                let mut picked = Vec::with_capacity(count);
                for j in 0..count {
                    let target = if count == 1 {
                        0.5 * (lo + hi)
                    } else {
                        lo + (hi - lo) * j as f64 / (count - 1) as f64
                    };
                    let idx = nearest_unused(points, used, target)
                        .expect("free count checked above");
                    used[idx] = true;
                    picked.push(points[idx]);
                }
                picked
            }
        };
        let (mut dlo, mut dhi) = (lo, hi);
        for p in &pts {
            dlo = dlo.min(p.x);
            dhi = dhi.max(p.x);
        }
        SampleBatch::new(pts, Domain::new(dlo, dhi)?, stage)
    }
}

/// Index of the unused point nearest to `target`; equal distances resolve to
/// the lower covariate.
fn nearest_unused(points: &[Obs], used: &[bool], target: f64) -> Option<usize> {
    let n = points.len();
    let pivot = points.partition_point(|p| p.x <= target);
    let mut left = pivot.checked_sub(1);
    let mut right = if pivot < n { Some(pivot) } else { None };
    // Walk each side to its nearest unused candidate, then compare.
    while let Some(i) = left {
        if !used[i] {
            break;
        }
        left = i.checked_sub(1);
    }
    while let Some(i) = right {
        if !used[i] {
            break;
        }
        right = if i + 1 < n { Some(i + 1) } else { None };
    }
    match (left, right) {
        (None, None) => None,
        (Some(i), None) => Some(i),
        (None, Some(j)) => Some(j),
        (Some(i), Some(j)) => {
            let (dl, dr) = ((target - points[i].x).abs(), (points[j].x - target).abs());
            if dl <= dr {
                Some(i)
            } else {
                Some(j)
            }
        }
    }
}

/// Budget share to spend at stage one for interval exponent `gamma1`:
/// `gamma1 / (1 + gamma1)`.
pub fn optimal_p(gamma1: f64) -> f64 {
    debug_assert!(gamma1 > 0.0);
    gamma1 / (1.0 + gamma1)
}

/// Stage-two interval with its back-solved constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanFragment {
    pub c1: f64,
    pub gamma1: f64,
    pub interval: (f64, f64),
    pub clipped: bool,
}

/// Minimum width of the stage-two interval: `4/n2` of the domain width,
/// capped at 2% of it so that small stage-two allocations are not refused
/// legitimate tight localizations.
fn min_interval_width(n2: usize, domain: Domain) -> f64 {
    (4.0 / n2 as f64).min(0.02) * domain.width()
}

/// Build the stage-two sampling interval around the stage-one estimate.
///
/// Wald family: `[d1 +/- n1^(-1/3) c_hat g1^(-1/3) q]` intersected with the
/// domain, with `gamma1 = 1/3` and `C1` back-solved from the half-width.
/// LR family: the supplied stage-one confidence region, with `(C1, gamma1)`
/// back-solved from its half-width for reporting.
#[allow(clippy::too_many_arguments)]
pub fn plan_stage_two(
    d1: f64,
    n1: usize,
    n2: usize,
    c_hat: Option<f64>,
    g1_at_d1: Option<f64>,
    quantile: f64,
    family: StageFamily,
    domain: Domain,
    stage1_lr_interval: Option<(f64, f64)>,
) -> Result<PlanFragment> {
    if n1 == 0 || n2 == 0 {
        return Err(Error::InvalidPlan(format!("stage sizes n1={n1}, n2={n2} must be positive")));
    }
    let gamma1 = 1.0 / 3.0;
    let (c1, raw) = match family {
        StageFamily::Wald => {
            let (c_hat, g1) = match (c_hat, g1_at_d1) {
                (Some(c), Some(g)) if c > 0.0 && g > 0.0 => (c, g),
                _ => return Err(Error::MissingNuisance),
            };
            let c1 = c_hat * g1.powf(-1.0 / 3.0) * quantile;
            let half = c1 * (n1 as f64).powf(-gamma1);
            (c1, (d1 - half, d1 + half))
        }
        StageFamily::Lr => {
            let (lo, hi) = stage1_lr_interval.ok_or_else(|| {
                Error::InvalidPlan("LR planning needs the stage-one confidence region".into())
            })?;
            let half = (hi - lo) / 2.0;
            let c1 = half * (n1 as f64).powf(gamma1);
            (c1, (lo, hi))
        }
    };
    let (lo, hi) = domain.intersect(raw.0, raw.1);
    let clipped = lo != raw.0 || hi != raw.1;
    let min_width = min_interval_width(n2, domain);
    if !(hi - lo >= min_width) {
        return Err(Error::IntervalTooNarrow { lower: lo, upper: hi, min_width });
    }
    Ok(PlanFragment { c1, gamma1, interval: (lo, hi), clipped })
}

/// True nuisance values for oracle experiments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KnownNuisance {
    pub sigma2: f64,
    pub deriv: f64,
}

/// Configuration for one two-stage run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoStageConfig {
    pub n: usize,
    pub p: f64,
    pub beta: f64,
    pub alpha: f64,
    pub stage1: StageFamily,
    pub stage2: StageFamily,
    pub psi: Psi,
    pub domain: Domain,
    pub theta0: f64,
    /// Budgets below this pool both stages for nuisance estimation and the
    /// stage-two statistic's variance.
    pub pooling_threshold: usize,
    /// Grid for the final LR inversion.
    pub grid_size: usize,
    /// Coarser grid for the stage-one LR region (planning only).
    pub stage1_grid_size: usize,
    /// Use the round conservative stage-one quantiles at beta = 0.01.
    pub conservative_stage1: bool,
    pub known_nuisance: Option<KnownNuisance>,
}

impl TwoStageConfig {
    pub fn new(n: usize, domain: Domain, theta0: f64) -> Self {
        Self {
            n,
            p: optimal_p(1.0 / 3.0),
            beta: 0.01,
            alpha: 0.05,
            stage1: StageFamily::Lr,
            stage2: StageFamily::Lr,
            psi: Psi::Uniform,
            domain,
            theta0,
            pooling_threshold: 200,
            grid_size: 2001,
            stage1_grid_size: 501,
            conservative_stage1: true,
            known_nuisance: None,
        }
    }

    pub fn families(mut self, stage1: StageFamily, stage2: StageFamily) -> Self {
        self.stage1 = stage1;
        self.stage2 = stage2;
        self
    }

    pub fn with_p(mut self, p: f64) -> Self {
        self.p = p;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.n < 20 {
            return Err(Error::InvalidConfig(format!("n = {} must be >= 20", self.n)));
        }
        if !(self.p > 0.0 && self.p < 1.0) {
            return Err(Error::InvalidConfig(format!("p = {} must be in (0,1)", self.p)));
        }
        for (name, v) in [("beta", self.beta), ("alpha", self.alpha)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::InvalidConfig(format!("{name} = {v} must be in (0,1)")));
            }
        }
        if !self.theta0.is_finite() {
            return Err(Error::InvalidConfig("theta0 must be finite".into()));
        }
        if self.grid_size < 101 || self.stage1_grid_size < 101 {
            return Err(Error::InvalidConfig("grids must have >= 101 points".into()));
        }
        let n1 = (self.n as f64 * self.p).floor() as usize;
        if n1 == 0 || n1 == self.n {
            return Err(Error::InvalidConfig(format!(
                "allocation p = {} leaves an empty stage for n = {}",
                self.p, self.n
            )));
        }
        Ok(())
    }
}

/// Wall time per phase, in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct PhaseTimings {
    pub stage1_sample_ms: f64,
    pub stage1_fit_ms: f64,
    pub nuisance_ms: f64,
    pub plan_ms: f64,
    pub stage2_sample_ms: f64,
    pub stage2_fit_ms: f64,
    pub ci_ms: f64,
    pub total_ms: f64,
}

/// How a density value was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DensitySource {
    Known,
    Histogram,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DensityValue {
    pub value: f64,
    pub source: DensitySource,
}

/// Everything a two-stage run produces. When planning aborts (stage-two
/// interval too narrow), the stage-one results are still populated and
/// `aborted` records why.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoStageOutcome {
    pub d1: f64,
    pub stage1_nuisance: Option<NuisanceEstimates>,
    pub g1_at_d1: Option<DensityValue>,
    /// Stage-one confidence region when the stage-one family is LR.
    pub stage1_region: Option<IntervalEstimate>,
    pub plan: Option<StagePlan>,
    pub d2: Option<f64>,
    pub stage2_nuisance: Option<NuisanceEstimates>,
    pub final_interval: Option<IntervalEstimate>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub aborted: Option<String>,
    pub timings: PhaseTimings,
    #[serde(skip)]
    pub stage1_sample: Option<SampleBatch>,
    #[serde(skip)]
    pub stage2_sample: Option<SampleBatch>,
}

impl TwoStageOutcome {
    pub fn completed(&self) -> bool {
        self.final_interval.is_some()
    }
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

fn density_at(
    oracle: &SamplingOracle,
    batch: &SampleBatch,
    lo: f64,
    hi: f64,
    psi: Psi,
    x: f64,
) -> DensityValue {
    match oracle.known_density(lo, hi, psi) {
        Some(value) => DensityValue { value, source: DensitySource::Known },
        None => DensityValue { value: histogram_density(batch, x), source: DensitySource::Histogram },
    }
}

/// Variance estimate honoring the pooling rule and any supplied truth.
fn stat_sigma2(
    config: &TwoStageConfig,
    stage2: &SampleBatch,
    pooled: Option<&SampleBatch>,
) -> Result<(f64, SourceStage)> {
    if let Some(k) = config.known_nuisance {
        return Ok((k.sigma2, SourceStage::One));
    }
    match pooled {
        Some(pool) => {
            let raw = variance_gasser(pool)?;
            Ok((raw.max(sigma2_floor(pool)), SourceStage::Pooled))
        }
        None => {
            let raw = variance_gasser(stage2)?;
            Ok((raw.max(sigma2_floor(stage2)), SourceStage::Two))
        }
    }
}

/// Execute the adaptive two-stage procedure end to end: stage-one sample and
/// fit, nuisance estimation, stage-two interval, stage-two sample and fit,
/// and the final confidence interval per the configured family.
pub fn run_two_stage(
    oracle: &mut SamplingOracle,
    config: &TwoStageConfig,
    tables: &QuantileTables,
    rng: &mut ChaCha8Rng,
) -> Result<TwoStageOutcome> {
    config.validate()?;
    let total_start = Instant::now();
    let domain = config.domain;
    let theta0 = config.theta0;
    let n1 = (config.n as f64 * config.p).floor() as usize;
    let n2 = config.n - n1;
    let mut timings = PhaseTimings::default();

    let t = Instant::now();
    let stage1 = oracle.draw(domain.lo, domain.hi, n1, config.psi, Stage::One, rng)?;
    timings.stage1_sample_ms = ms(t);

    let t = Instant::now();
    let fit1 = pava(&stage1)?;
    let d1 = fit1.invert_threshold(theta0);
    timings.stage1_fit_ms = ms(t);

    // Pool both stages for nuisance work on small budgets.
    let pool_stages = config.n < config.pooling_threshold;

    let t = Instant::now();
    let mut stage1_nuisance = None;
    let mut g1 = None;
    let mut stage1_region = None;
    let plan_inputs: (Option<f64>, Option<f64>, f64, Option<(f64, f64)>) = match config.stage1 {
        StageFamily::Wald => {
            let nuis = match config.known_nuisance {
                Some(k) => NuisanceEstimates::known(k.sigma2, k.deriv, d1),
                None => estimate_nuisance(&stage1, d1, None, SourceStage::One)?,
            };
            let c_hat = nuis.wald_constant(deriv_floor(&stage1))?;
            let dens = density_at(oracle, &stage1, domain.lo, domain.hi, config.psi, d1);
            stage1_nuisance = Some(nuis);
            g1 = Some(dens);
            let q = tables.stage_one_chernoff(config.beta, config.conservative_stage1)?;
            (Some(c_hat), Some(dens.value), q, None)
        }
        StageFamily::Lr => {
            let sigma2 = match config.known_nuisance {
                Some(k) => k.sigma2,
                None => variance_gasser(&stage1)?.max(sigma2_floor(&stage1)),
            };
            let q = tables.stage_one_lr(config.beta, config.conservative_stage1)?;
            let region = lr_ci(
                &stage1,
                theta0,
                sigma2,
                q,
                domain,
                config.stage1_grid_size,
                1.0 - config.beta,
            )?;
            let interval = (region.lower, region.upper);
            stage1_region = Some(region);
            (None, None, q, Some(interval))
        }
    };
    timings.nuisance_ms = ms(t);

    let t = Instant::now();
    let plan = match plan_stage_two(
        d1,
        n1,
        n2,
        plan_inputs.0,
        plan_inputs.1,
        plan_inputs.2,
        config.stage1,
        domain,
        plan_inputs.3,
    ) {
        Ok(p) => p,
        Err(e @ Error::IntervalTooNarrow { .. }) => {
            timings.plan_ms = ms(t);
            timings.total_ms = ms(total_start);
            return Ok(TwoStageOutcome {
                d1,
                stage1_nuisance,
                g1_at_d1: g1,
                stage1_region,
                plan: None,
                d2: None,
                stage2_nuisance: None,
                final_interval: None,
                aborted: Some(e.to_string()),
                timings,
                stage1_sample: Some(stage1),
                stage2_sample: None,
            });
        }
        Err(e) => return Err(e),
    };
    let stage_plan = StagePlan {
        n_total: config.n,
        p: config.p,
        n1,
        n2,
        beta: config.beta,
        gamma1: plan.gamma1,
        c1: plan.c1,
        interval: plan.interval,
        stage1_family: config.stage1,
        psi: config.psi,
    };
    timings.plan_ms = ms(t);

    let (l1, u1) = plan.interval;
    let t = Instant::now();
    let stage2 = oracle.draw(l1, u1, n2, config.psi, Stage::Two, rng)?;
    timings.stage2_sample_ms = ms(t);

    let t = Instant::now();
    let fit2 = pava(&stage2)?;
    let d2 = fit2.invert_threshold(theta0);
    timings.stage2_fit_ms = ms(t);

    let pooled = if pool_stages { Some(stage1.pooled_with(&stage2)?) } else { None };

    let t = Instant::now();
    let stage2_nuisance;
    let mut final_interval = match config.stage2 {
        StageFamily::Wald => {
            let nuis = match config.known_nuisance {
                Some(k) => NuisanceEstimates::known(k.sigma2, k.deriv, d2),
                None => {
                    let src_batch = pooled.as_ref().unwrap_or(&stage2);
                    let src = if pool_stages { SourceStage::Pooled } else { SourceStage::Two };
                    estimate_nuisance(src_batch, d2, None, src)?
                }
            };
            let floor_batch = pooled.as_ref().unwrap_or(&stage2);
            let base_c = nuis.wald_constant(deriv_floor(floor_batch))?;
            stage2_nuisance = Some(nuis);
            let q = tables.chernoff_two_sided(config.alpha)?;
            wald_ci_two_stage(
                d2,
                config.n,
                base_c,
                stage_plan.c1,
                config.p,
                stage_plan.gamma1,
                config.psi.at_zero(),
                q,
                domain,
                1.0 - config.alpha,
            )?
        }
        StageFamily::Lr => {
            let (sigma2, src) = stat_sigma2(config, &stage2, pooled.as_ref())?;
            stage2_nuisance = Some(NuisanceEstimates {
                sigma2,
                deriv_at: d2,
                deriv: f64::NAN,
                bandwidth: 0.0,
                source_stage: src,
                flags: Default::default(),
            });
            let q = tables.lr_upper(config.alpha)?;
            let stat_sample = pooled.as_ref().unwrap_or(&stage2);
            lr_ci(stat_sample, theta0, sigma2, q, domain, config.grid_size, 1.0 - config.alpha)?
        }
    };
    final_interval.diagnostics.heuristic_stage1 = config.stage1 == StageFamily::Lr;
    if let Some(n) = stage2_nuisance {
        final_interval = final_interval.with_nuisance(n);
    }
    timings.ci_ms = ms(t);
    timings.total_ms = ms(total_start);

    Ok(TwoStageOutcome {
        d1,
        stage1_nuisance,
        g1_at_d1: g1,
        stage1_region,
        plan: Some(stage_plan),
        d2: Some(d2),
        stage2_nuisance,
        final_interval: Some(final_interval),
        aborted: None,
        timings,
        stage1_sample: Some(stage1),
        stage2_sample: Some(stage2),
    })
}

/// One-stage run against the same oracle abstraction: sample, fit, and build
/// the requested interval.
pub fn run_one_stage(
    oracle: &mut SamplingOracle,
    n: usize,
    family: StageFamily,
    config: &TwoStageConfig,
    tables: &QuantileTables,
    rng: &mut ChaCha8Rng,
) -> Result<(IntervalEstimate, SampleBatch, PhaseTimings)> {
    let total = Instant::now();
    let domain = config.domain;
    let mut timings = PhaseTimings::default();

    let t = Instant::now();
    let batch = oracle.draw(domain.lo, domain.hi, n, config.psi, Stage::One, rng)?;
    timings.stage1_sample_ms = ms(t);

    let t = Instant::now();
    let fit = pava(&batch)?;
    let d = fit.invert_threshold(config.theta0);
    timings.stage1_fit_ms = ms(t);

    let t = Instant::now();
    let interval = match family {
        StageFamily::Wald => {
            let nuis = match config.known_nuisance {
                Some(k) => NuisanceEstimates::known(k.sigma2, k.deriv, d),
                None => estimate_nuisance(&batch, d, None, SourceStage::One)?,
            };
            let c_hat = nuis.wald_constant(deriv_floor(&batch))?;
            let g = density_at(oracle, &batch, domain.lo, domain.hi, config.psi, d);
            let q = tables.chernoff_two_sided(config.alpha)?;
            wald_ci_one_stage(d, n, c_hat, g.value, q, domain, 1.0 - config.alpha)?
                .with_nuisance(nuis)
        }
        StageFamily::Lr => {
            let sigma2 = match config.known_nuisance {
                Some(k) => k.sigma2,
                None => variance_gasser(&batch)?.max(sigma2_floor(&batch)),
            };
            let q = tables.lr_upper(config.alpha)?;
            lr_ci(&batch, config.theta0, sigma2, q, domain, config.grid_size, 1.0 - config.alpha)?
        }
    };
    timings.ci_ms = ms(t);
    timings.total_ms = ms(total);
    Ok((interval, batch, timings))
}

/// Asymptotic relative efficiency of the two-stage estimator over the
/// one-stage one: `((1-p) p^gamma1 psi0 / (C1 g))^(1/3) * n^(gamma1/3)`.
pub fn are(c1: f64, p: f64, gamma1: f64, psi0: f64, g_at_d0: f64, n: usize) -> Result<f64> {
    if !(c1 > 0.0 && psi0 > 0.0 && g_at_d0 > 0.0 && gamma1 > 0.0) {
        return Err(Error::InvalidConfig("ARE inputs must be positive".into()));
    }
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidConfig(format!("p = {p} must be in (0,1)")));
    }
    Ok(((1.0 - p) * p.powf(gamma1) * psi0 / (c1 * g_at_d0)).cbrt()
        * (n as f64).powf(gamma1 / 3.0))
}

/// Per-stage interval exponent and convergence rate of a k-stage design.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageRate {
    pub stage: usize,
    /// Interval-shrinkage exponent chosen at this stage (absent at the last).
    pub gamma: Option<f64>,
    /// Convergence rate exponent of this stage's estimator.
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultistageRates {
    pub stages: Vec<StageRate>,
    pub final_rate: f64,
    /// Closed-form lower bound on the final rate for the slacked recursion.
    pub lower_bound: f64,
}

/// Iterate the k-stage rate recursion `gamma_{i+1} = (1 + gamma_i)/3 - eta`.
/// Every stage rate stays strictly below 1/2: repeated designs approach but
/// never attain the parametric rate.
pub fn multistage_rates(k: usize, gamma1: f64, eta: f64) -> Result<MultistageRates> {
    if k < 2 {
        return Err(Error::InvalidConfig(format!("k = {k} must be >= 2")));
    }
    if !(gamma1 > 0.0 && gamma1 < 0.5) {
        return Err(Error::InvalidConfig(format!("gamma1 = {gamma1} must be in (0, 1/2)")));
    }
    if !(eta >= 0.0) {
        return Err(Error::InvalidConfig(format!("eta = {eta} must be nonnegative")));
    }
    let mut gammas = vec![gamma1];
    for i in 1..k - 1 {
        let next = (1.0 + gammas[i - 1]) / 3.0 - eta;
        if !(next > 0.0 && next < 0.5) {
            return Err(Error::InvalidSlack { stage: i + 1, gamma: next });
        }
        gammas.push(next);
    }
    let mut stages = Vec::with_capacity(k);
    stages.push(StageRate { stage: 1, gamma: Some(gammas[0]), rate: 1.0 / 3.0 });
    for i in 2..=k {
        stages.push(StageRate {
            stage: i,
            gamma: if i <= k - 1 { Some(gammas[i - 1]) } else { None },
            rate: (1.0 + gammas[i - 2]) / 3.0,
        });
    }
    let final_rate = stages.last().expect("k >= 2").rate;
    let third: f64 = 1.0 / 3.0;
    let geo: f64 = (1..=k.saturating_sub(2)).map(|j| third.powi(j as i32)).sum();
    let lower_bound =
        (1.0 - eta) * geo + third.powi((k - 1) as i32) + gamma1 * third.powi((k - 1) as i32);
    Ok(MultistageRates { stages, final_rate, lower_bound })
}

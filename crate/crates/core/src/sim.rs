//! Monte Carlo harness: coverage/length studies, convergence-rate slope
//! checks, derivative-accuracy studies, budgeted finite-population emulation,
//! and the simplified local-linear comparator.

use crate::ci::{CiDiagnostics, CiFamily, IntervalEstimate};
use crate::error::{Error, Result};
use crate::exec::map_indexed;
use crate::isotonic::{csum, pava};
use crate::limits::QuantileTables;
use crate::nuisance::{derivative_local_quadratic, deriv_floor, estimate_nuisance, SourceStage};
use crate::sample::{Domain, Obs, SampleBatch, Stage};
use crate::twostage::{
    run_one_stage, run_two_stage, KnownNuisance, PhaseTimings, Psi, SamplingOracle, StageFamily,
    TwoStageConfig,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use std::time::Instant;

/// A monotone test function with an analytic derivative.
#[derive(Clone)]
pub enum TestFunction {
    /// `exp(4(x-1/2)) / (1 + exp(4(x-1/2)))`
    Sigmoid,
    /// `x^2`
    Quadratic,
    /// `sin(6 pi x)/40 + 1/4 + x/2 + x^2/4`
    IsoSine,
    Custom(Arc<CustomFunction>),
}

pub struct CustomFunction {
    pub name: String,
    pub m: Box<dyn Fn(f64) -> f64 + Send + Sync>,
    pub m_prime: Box<dyn Fn(f64) -> f64 + Send + Sync>,
}

impl std::fmt::Debug for TestFunction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "TestFunction({})", self.name())
    }
}

// Configs compare by function identity, which the name carries.
impl PartialEq for TestFunction {
    fn eq(&self, other: &Self) -> bool {
        self.name() == other.name()
    }
}

impl TestFunction {
    pub fn name(&self) -> &str {
        match self {
            TestFunction::Sigmoid => "sigmoid",
            TestFunction::Quadratic => "quadratic",
            TestFunction::IsoSine => "isosine",
            TestFunction::Custom(c) => &c.name,
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "sigmoid" => Some(TestFunction::Sigmoid),
            "quadratic" => Some(TestFunction::Quadratic),
            "isosine" => Some(TestFunction::IsoSine),
            _ => None,
        }
    }

    pub fn m(&self, x: f64) -> f64 {
        match self {
            TestFunction::Sigmoid => {
                let e = (4.0 * (x - 0.5)).exp();
                e / (1.0 + e)
            }
            TestFunction::Quadratic => x * x,
            TestFunction::IsoSine => {
                (6.0 * std::f64::consts::PI * x).sin() / 40.0 + 0.25 + 0.5 * x + 0.25 * x * x
            }
            TestFunction::Custom(c) => (c.m)(x),
        }
    }

    pub fn m_prime(&self, x: f64) -> f64 {
        match self {
            TestFunction::Sigmoid => {
                let m = self.m(x);
                4.0 * m * (1.0 - m)
            }
            TestFunction::Quadratic => 2.0 * x,
            TestFunction::IsoSine => {
                let w = 6.0 * std::f64::consts::PI;
                w * (w * x).cos() / 40.0 + 0.5 + 0.5 * x
            }
            TestFunction::Custom(c) => (c.m_prime)(x),
        }
    }

    /// Validating constructor for user-supplied functions.
    pub fn custom(
        name: impl Into<String>,
        m: Box<dyn Fn(f64) -> f64 + Send + Sync>,
        m_prime: Box<dyn Fn(f64) -> f64 + Send + Sync>,
        domain: Domain,
    ) -> Result<Self> {
        let f = TestFunction::Custom(Arc::new(CustomFunction { name: name.into(), m, m_prime }));
        f.validate(domain)?;
        Ok(f)
    }

    /// Check monotonicity on a dense grid and agreement of the analytic
    /// derivative with central finite differences.
    pub fn validate(&self, domain: Domain) -> Result<()> {
        const GRID: usize = 10_000;
        let width = domain.width();
        let h = 1e-5 * width;
        let mut prev = f64::NEG_INFINITY;
        for i in 0..=GRID {
            let x = domain.lo + width * i as f64 / GRID as f64;
            let v = self.m(x);
            if v < prev {
                return Err(Error::InvalidConfig(format!(
                    "{} is decreasing near x = {x}",
                    self.name()
                )));
            }
            prev = v;
            if x - h >= domain.lo && x + h <= domain.hi {
                let fd = (self.m(x + h) - self.m(x - h)) / (2.0 * h);
                if (fd - self.m_prime(x)).abs() > 1e-6 {
                    return Err(Error::InvalidConfig(format!(
                        "{} derivative mismatch at x = {x}: analytic {}, finite difference {fd}",
                        self.name(),
                        self.m_prime(x)
                    )));
                }
            }
        }
        Ok(())
    }

    fn as_closure(&self) -> Arc<dyn Fn(f64) -> f64 + Send + Sync> {
        let f = self.clone();
        Arc::new(move |x| f.m(x))
    }
}

impl Serialize for TestFunction {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for TestFunction {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let name = String::deserialize(d)?;
        TestFunction::by_name(&name).ok_or_else(|| {
            serde::de::Error::custom(format!(
                "unknown test function '{name}' (expected sigmoid, quadratic or isosine)"
            ))
        })
    }
}

/// Draw `n` covariates from the design density over the domain and add
/// centred Gaussian noise of standard deviation `sigma` to the responses.
pub fn draw_sample(
    f: &TestFunction,
    design: Psi,
    n: usize,
    sigma: f64,
    domain: Domain,
    rng: &mut ChaCha8Rng,
) -> Result<SampleBatch> {
    if n < 1 {
        return Err(Error::EmptySample);
    }
    if !(sigma >= 0.0) {
        return Err(Error::InvalidConfig(format!("sigma = {sigma} must be nonnegative")));
    }
    let pts: Vec<Obs> = (0..n)
        .map(|_| {
            let x = design.sample_in(domain.lo, domain.hi, rng);
            let z: f64 = StandardNormal.sample(rng);
            Obs::new(x, f.m(x) + sigma * z)
        })
        .collect();
    SampleBatch::new(pts, domain, Stage::One)
}

/// Inverse standard-normal CDF (Acklam's rational approximation, ~1e-9
/// absolute accuracy), for the comparator's delta-method interval.
pub fn standard_normal_quantile(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "p must be in (0,1)");
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    let p_low = 0.02425;
    if p < p_low {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - p_low {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        -standard_normal_quantile(1.0 - p)
    }
}

/// Least-squares line through the stage-two data inverted at `theta0`, with a
/// delta-method interval. A simplified stand-in for local-linear second-stage
/// procedures; every output is flagged as a comparator approximation.
pub fn local_linear_ci(
    stage2: &SampleBatch,
    theta0: f64,
    alpha: f64,
    domain: Domain,
) -> Result<IntervalEstimate> {
    let n = stage2.len();
    if n < 3 {
        return Err(Error::TooFewPoints { needed: 3, got: n });
    }
    let pts = stage2.points();
    let w_tot = csum(pts.iter().map(|p| p.w));
    let x_bar = csum(pts.iter().map(|p| p.w * p.x)) / w_tot;
    let y_bar = csum(pts.iter().map(|p| p.w * p.y)) / w_tot;
    let sxx = csum(pts.iter().map(|p| p.w * (p.x - x_bar) * (p.x - x_bar)));
    let sxy = csum(pts.iter().map(|p| p.w * (p.x - x_bar) * (p.y - y_bar)));
    if !(sxx > 0.0) {
        return Err(Error::InvalidSample("degenerate covariates in comparator fit".into()));
    }
    let slope = sxy / sxx;
    if !(slope > 0.0) {
        return Err(Error::NonIncreasingFit { slope });
    }
    let d_hat = x_bar + (theta0 - y_bar) / slope;
    let rss = csum(pts.iter().map(|p| {
        let r = p.y - (y_bar + slope * (p.x - x_bar));
        p.w * r * r
    }));
    let sigma2 = rss / (n - 2) as f64;
    let var = sigma2 / (slope * slope) * (1.0 / w_tot + (d_hat - x_bar) * (d_hat - x_bar) / sxx);
    let half = standard_normal_quantile(1.0 - alpha / 2.0) * var.max(0.0).sqrt();
    let (lower, upper) = domain.intersect(d_hat - half, d_hat + half);
    Ok(IntervalEstimate {
        point: d_hat,
        lower,
        upper,
        family: CiFamily::Wald2,
        level: 1.0 - alpha,
        nuisance: None,
        diagnostics: CiDiagnostics {
            clipped_to_domain: lower != d_hat - half || upper != d_hat + half,
            comparator_approximation: true,
            ..Default::default()
        },
    })
}

/// Stage-two window exponent for the local-linear comparator.
const LOCAL_LINEAR_GAMMA: f64 = 0.25;

/// The procedures the harness compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Procedure {
    OneStageWald,
    OneStageLr,
    TwoStageWald,
    TwoStageLr,
    LocalLinear,
}

impl Procedure {
    pub const ALL: [Procedure; 5] = [
        Procedure::OneStageWald,
        Procedure::OneStageLr,
        Procedure::TwoStageWald,
        Procedure::TwoStageLr,
        Procedure::LocalLinear,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Procedure::OneStageWald => "one-stage-wald",
            Procedure::OneStageLr => "one-stage-lr",
            Procedure::TwoStageWald => "two-stage-wald",
            Procedure::TwoStageLr => "two-stage-lr",
            Procedure::LocalLinear => "local-linear",
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == name)
    }

    pub fn is_two_stage(&self) -> bool {
        !matches!(self, Procedure::OneStageWald | Procedure::OneStageLr)
    }
}

/// Shared knobs for running procedures inside experiments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProcedureConfig {
    pub alpha: f64,
    pub beta: f64,
    /// Stage-one share for the isotonic two-stage procedures.
    pub p_two_stage: f64,
    /// Stage-one share for the local-linear comparator.
    pub p_local_linear: f64,
    pub pooling_threshold: usize,
    pub grid_size: usize,
    pub stage1_grid_size: usize,
    pub conservative_stage1: bool,
    /// Supply the true variance and slope instead of estimating them.
    pub known_nuisance: bool,
}

impl Default for ProcedureConfig {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            beta: 0.01,
            p_two_stage: 0.25,
            // Same allocation as the isotonic two-stage procedures, so the
            // comparison runs at an equal budget split.
            p_local_linear: 0.25,
            pooling_threshold: 200,
            grid_size: 2001,
            stage1_grid_size: 501,
            conservative_stage1: true,
            known_nuisance: false,
        }
    }
}

impl ProcedureConfig {
    #[allow(clippy::too_many_arguments)]
    fn two_stage_config(
        &self,
        n: usize,
        domain: Domain,
        theta0: f64,
        p: f64,
        stage1: StageFamily,
        stage2: StageFamily,
        known: Option<KnownNuisance>,
    ) -> TwoStageConfig {
        let mut c = TwoStageConfig::new(n, domain, theta0).families(stage1, stage2).with_p(p);
        c.alpha = self.alpha;
        c.beta = self.beta;
        c.pooling_threshold = self.pooling_threshold;
        c.grid_size = self.grid_size;
        c.stage1_grid_size = self.stage1_grid_size;
        c.conservative_stage1 = self.conservative_stage1;
        c.known_nuisance = known;
        c
    }
}

/// One procedure run: the interval plus phase timings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcedureRun {
    pub interval: IntervalEstimate,
    pub timings: PhaseTimings,
    pub n1: usize,
    pub n2: Option<usize>,
}

/// Run one procedure against an oracle with a total budget of `n`.
#[allow(clippy::too_many_arguments)]
pub fn run_procedure(
    procedure: Procedure,
    oracle: &mut SamplingOracle,
    n: usize,
    domain: Domain,
    theta0: f64,
    p_override: Option<f64>,
    known: Option<KnownNuisance>,
    pc: &ProcedureConfig,
    tables: &QuantileTables,
    rng: &mut ChaCha8Rng,
) -> Result<ProcedureRun> {
    match procedure {
        Procedure::OneStageWald | Procedure::OneStageLr => {
            let family = if procedure == Procedure::OneStageWald {
                StageFamily::Wald
            } else {
                StageFamily::Lr
            };
            let config =
                pc.two_stage_config(n, domain, theta0, 0.5, family, family, known);
            let (interval, _, timings) = run_one_stage(oracle, n, family, &config, tables, rng)?;
            Ok(ProcedureRun { interval, timings, n1: n, n2: None })
        }
        Procedure::TwoStageWald | Procedure::TwoStageLr => {
            let family = if procedure == Procedure::TwoStageWald {
                StageFamily::Wald
            } else {
                StageFamily::Lr
            };
            let p = p_override.unwrap_or(pc.p_two_stage);
            let config = pc.two_stage_config(n, domain, theta0, p, family, family, known);
            let out = run_two_stage(oracle, &config, tables, rng)?;
            match (out.final_interval, out.plan) {
                (Some(interval), Some(plan)) => Ok(ProcedureRun {
                    interval,
                    timings: out.timings,
                    n1: plan.n1,
                    n2: Some(plan.n2),
                }),
                _ => Err(Error::InvalidPlan(
                    out.aborted.unwrap_or_else(|| "two-stage run did not complete".into()),
                )),
            }
        }
        Procedure::LocalLinear => {
            let p = p_override.unwrap_or(pc.p_local_linear);
            let total = Instant::now();
            let mut timings = PhaseTimings::default();
            let n1 = (n as f64 * p).floor() as usize;
            let n2 = n - n1;
            if n1 == 0 || n2 == 0 {
                return Err(Error::InvalidConfig(format!("p = {p} leaves an empty stage")));
            }
            let t = Instant::now();
            let stage1 =
                oracle.draw(domain.lo, domain.hi, n1, Psi::Uniform, Stage::One, rng)?;
            timings.stage1_sample_ms = t.elapsed().as_secs_f64() * 1e3;

            let t = Instant::now();
            let fit1 = pava(&stage1)?;
            let d1 = fit1.invert_threshold(theta0);
            timings.stage1_fit_ms = t.elapsed().as_secs_f64() * 1e3;

            let t = Instant::now();
            let nuis = match known {
                Some(k) => crate::nuisance::NuisanceEstimates::known(k.sigma2, k.deriv, d1),
                None => estimate_nuisance(&stage1, d1, None, SourceStage::One)?,
            };
            let c_hat = nuis.wald_constant(deriv_floor(&stage1))?;
            let g1 = oracle
                .known_density(domain.lo, domain.hi, Psi::Uniform)
                .unwrap_or_else(|| crate::nuisance::histogram_density(&stage1, d1));
            timings.nuisance_ms = t.elapsed().as_secs_f64() * 1e3;

            let t = Instant::now();
            let q = tables.stage_one_chernoff(pc.beta, pc.conservative_stage1)?;
            // A line fit at stage two needs its sampling window to shrink
            // strictly slower than the n^(-1/3) isotonic localization, so the
            // comparator plans with exponent 1/4 on the same high-probability
            // constant.
            let half = c_hat * g1.powf(-1.0 / 3.0) * q * (n1 as f64).powf(-LOCAL_LINEAR_GAMMA);
            let (lo, hi) = domain.intersect(d1 - half, d1 + half);
            let min_width = (4.0 / n2 as f64).min(0.02) * domain.width();
            if !(hi - lo >= min_width) {
                return Err(Error::IntervalTooNarrow { lower: lo, upper: hi, min_width });
            }
            timings.plan_ms = t.elapsed().as_secs_f64() * 1e3;

            let t = Instant::now();
            let stage2 = oracle.draw(lo, hi, n2, Psi::Uniform, Stage::Two, rng)?;
            timings.stage2_sample_ms = t.elapsed().as_secs_f64() * 1e3;

            let t = Instant::now();
            let interval = local_linear_ci(&stage2, theta0, pc.alpha, domain)?;
            timings.ci_ms = t.elapsed().as_secs_f64() * 1e3;
            timings.total_ms = total.elapsed().as_secs_f64() * 1e3;
            Ok(ProcedureRun { interval, timings, n1, n2: Some(n2) })
        }
    }
}

/// Configuration of a coverage/length study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageConfig {
    pub functions: Vec<TestFunction>,
    pub d0s: Vec<f64>,
    pub sigmas: Vec<f64>,
    pub ns: Vec<usize>,
    pub procedures: Vec<Procedure>,
    pub replicates: usize,
    pub seed: u64,
    pub domain: Domain,
    pub proc: ProcedureConfig,
}

impl CoverageConfig {
    pub fn new(functions: Vec<TestFunction>, seed: u64) -> Self {
        Self {
            functions,
            d0s: vec![0.5],
            sigmas: vec![0.1],
            ns: vec![500],
            procedures: Procedure::ALL.to_vec(),
            replicates: 1000,
            seed,
            domain: Domain { lo: 0.0, hi: 1.0 },
            proc: ProcedureConfig::default(),
        }
    }
}

/// Aggregates for one (function, d0, sigma, n, procedure) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageCell {
    pub function: String,
    pub d0: f64,
    pub theta0: f64,
    pub sigma: f64,
    pub n: usize,
    pub procedure: Procedure,
    pub replicates_used: usize,
    pub failures: usize,
    pub coverage: f64,
    pub coverage_mc_se: f64,
    pub avg_length: f64,
    /// Spread of interval lengths across replicates, for error bars on the
    /// average length.
    pub length_sd: f64,
    pub rmse: f64,
    pub mean_time_ms: f64,
    /// More than 5% of replicates failed: the cell is unusable.
    pub failed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub config: CoverageConfig,
    pub cells: Vec<CoverageCell>,
    /// False when any cell exceeded the failure budget.
    pub ok: bool,
}

impl CoverageReport {
    /// Equality of everything deterministic (wall times excluded).
    pub fn deterministic_eq(&self, other: &CoverageReport) -> bool {
        self.cells.len() == other.cells.len()
            && self.cells.iter().zip(&other.cells).all(|(a, b)| {
                let (mut a, mut b) = (a.clone(), b.clone());
                a.mean_time_ms = 0.0;
                b.mean_time_ms = 0.0;
                a == b
            })
    }

    /// Flat CSV rows (one per cell) for external plotting.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "function,d0,theta0,sigma,n,procedure,replicates_used,failures,coverage,coverage_mc_se,avg_length,length_sd,rmse,mean_time_ms,failed\n",
        );
        for c in &self.cells {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                c.function,
                c.d0,
                c.theta0,
                c.sigma,
                c.n,
                c.procedure.name(),
                c.replicates_used,
                c.failures,
                c.coverage,
                c.coverage_mc_se,
                c.avg_length,
                c.length_sd,
                c.rmse,
                c.mean_time_ms,
                c.failed
            ));
        }
        out
    }
}

struct CellSpec {
    function: TestFunction,
    d0: f64,
    theta0: f64,
    sigma: f64,
    n: usize,
    procedure: Procedure,
}

#[derive(Clone, Copy)]
struct UnitResult {
    covered: bool,
    length: f64,
    sq_err: f64,
    time_ms: f64,
    ok: bool,
}

const FAILURE_BUDGET: f64 = 0.05;

fn enumerate_cells(config: &CoverageConfig) -> Vec<CellSpec> {
    let mut cells = Vec::new();
    for f in &config.functions {
        for &d0 in &config.d0s {
            for &sigma in &config.sigmas {
                for &n in &config.ns {
                    for &procedure in &config.procedures {
                        cells.push(CellSpec {
                            function: f.clone(),
                            d0,
                            theta0: f.m(d0),
                            sigma,
                            n,
                            procedure,
                        });
                    }
                }
            }
        }
    }
    cells
}

fn run_unit(
    cell: &CellSpec,
    config: &CoverageConfig,
    tables: &QuantileTables,
    stream: u64,
) -> UnitResult {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(stream);
    let mut oracle = match SamplingOracle::simulate(cell.function.as_closure(), cell.sigma) {
        Ok(o) => o,
        Err(_) => {
            return UnitResult { covered: false, length: 0.0, sq_err: 0.0, time_ms: 0.0, ok: false }
        }
    };
    let known = config.proc.known_nuisance.then(|| KnownNuisance {
        sigma2: cell.sigma * cell.sigma,
        deriv: cell.function.m_prime(cell.d0),
    });
    let started = Instant::now();
    match run_procedure(
        cell.procedure,
        &mut oracle,
        cell.n,
        config.domain,
        cell.theta0,
        None,
        known,
        &config.proc,
        tables,
        &mut rng,
    ) {
        Ok(run) => UnitResult {
            covered: run.interval.covers(cell.d0),
            length: run.interval.length(),
            sq_err: (run.interval.point - cell.d0) * (run.interval.point - cell.d0),
            time_ms: started.elapsed().as_secs_f64() * 1e3,
            ok: true,
        },
        Err(_) => UnitResult {
            covered: false,
            length: 0.0,
            sq_err: 0.0,
            time_ms: started.elapsed().as_secs_f64() * 1e3,
            ok: false,
        },
    }
}

/// Run every procedure over independent replicates per cell and aggregate
/// coverage, lengths, point-estimate error and wall time. Failed replicates
/// are counted and excluded from the averages, never silently dropped.
pub fn coverage_experiment(config: &CoverageConfig, tables: &QuantileTables) -> Result<CoverageReport> {
    if config.replicates == 0 {
        return Err(Error::InvalidConfig("replicates must be positive".into()));
    }
    for f in &config.functions {
        f.validate(config.domain)?;
    }
    let cells = enumerate_cells(config);
    if cells.is_empty() {
        return Err(Error::InvalidConfig("empty experiment grid".into()));
    }
    let reps = config.replicates;
    let total = cells.len() * reps;
    let results = map_indexed(total, |unit| {
        let cell = &cells[unit / reps];
        run_unit(cell, config, tables, unit as u64)
    });

    let mut out = Vec::with_capacity(cells.len());
    let mut all_ok = true;
    for (ci, cell) in cells.iter().enumerate() {
        let rows = &results[ci * reps..(ci + 1) * reps];
        let failures = rows.iter().filter(|r| !r.ok).count();
        let used = reps - failures;
        let cov = csum(rows.iter().filter(|r| r.ok).map(|r| r.covered as u8 as f64));
        let len = csum(rows.iter().filter(|r| r.ok).map(|r| r.length));
        let len_sq = csum(rows.iter().filter(|r| r.ok).map(|r| r.length * r.length));
        let sq = csum(rows.iter().filter(|r| r.ok).map(|r| r.sq_err));
        let time = csum(rows.iter().map(|r| r.time_ms));
        let coverage = if used > 0 { cov / used as f64 } else { f64::NAN };
        let avg_length = if used > 0 { len / used as f64 } else { f64::NAN };
        let length_sd = if used > 1 {
            ((len_sq / used as f64 - avg_length * avg_length).max(0.0) * used as f64
                / (used - 1) as f64)
                .sqrt()
        } else {
            f64::NAN
        };
        let failed = (failures as f64) > FAILURE_BUDGET * reps as f64;
        all_ok &= !failed;
        out.push(CoverageCell {
            function: cell.function.name().to_string(),
            d0: cell.d0,
            theta0: cell.theta0,
            sigma: cell.sigma,
            n: cell.n,
            procedure: cell.procedure,
            replicates_used: used,
            failures,
            coverage,
            coverage_mc_se: if used > 0 {
                (coverage * (1.0 - coverage) / used as f64).sqrt()
            } else {
                f64::NAN
            },
            avg_length,
            length_sd,
            rmse: if used > 0 { (sq / used as f64).sqrt() } else { f64::NAN },
            mean_time_ms: time / reps as f64,
            failed,
        });
    }
    Ok(CoverageReport { config: config.clone(), cells: out, ok: all_ok })
}

/// Configuration of a convergence-rate study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateConfig {
    pub function: TestFunction,
    pub d0: f64,
    pub sigma: f64,
    pub ns: Vec<usize>,
    pub procedures: Vec<Procedure>,
    pub replicates: usize,
    pub seed: u64,
    pub domain: Domain,
    pub proc: ProcedureConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatePoint {
    pub n: usize,
    pub rmse: f64,
    pub replicates_used: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    pub procedure: Procedure,
    pub points: Vec<RatePoint>,
    /// Slope of log RMSE on log n.
    pub slope: f64,
    pub slope_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub config: RateConfig,
    pub rows: Vec<RateRow>,
}

impl RateReport {
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("procedure,n,rmse,replicates_used,failures,slope,slope_se\n");
        for r in &self.rows {
            for p in &r.points {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    r.procedure.name(),
                    p.n,
                    p.rmse,
                    p.replicates_used,
                    p.failures,
                    r.slope,
                    r.slope_se
                ));
            }
        }
        out
    }
}

/// Regress log RMSE of the point estimate on log n per procedure.
pub fn rate_experiment(config: &RateConfig, tables: &QuantileTables) -> Result<RateReport> {
    if config.ns.len() < 2 {
        return Err(Error::InvalidConfig("need at least two sample sizes".into()));
    }
    let max_n = *config.ns.iter().max().expect("nonempty");
    let min_n = *config.ns.iter().min().expect("nonempty");
    if (max_n as f64) < 8.0 * min_n as f64 {
        return Err(Error::InvalidConfig(
            "sample-size grid must span at least a factor of 8".into(),
        ));
    }
    config.function.validate(config.domain)?;
    let theta0 = config.function.m(config.d0);
    let known = config.proc.known_nuisance.then(|| KnownNuisance {
        sigma2: config.sigma * config.sigma,
        deriv: config.function.m_prime(config.d0),
    });
    let reps = config.replicates;
    let mut rows = Vec::new();
    for (pi, &procedure) in config.procedures.iter().enumerate() {
        let mut points = Vec::new();
        for (ni, &n) in config.ns.iter().enumerate() {
            let base = ((pi * config.ns.len() + ni) * reps) as u64;
            let errs = map_indexed(reps, |rep| {
                let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
                rng.set_stream(base + rep as u64);
                let mut oracle =
                    SamplingOracle::simulate(config.function.as_closure(), config.sigma).ok()?;
                run_procedure(
                    procedure,
                    &mut oracle,
                    n,
                    config.domain,
                    theta0,
                    None,
                    known,
                    &config.proc,
                    tables,
                    &mut rng,
                )
                .ok()
                .map(|run| (run.interval.point - config.d0) * (run.interval.point - config.d0))
            });
            let failures = errs.iter().filter(|e| e.is_none()).count();
            let used = reps - failures;
            let sq = csum(errs.iter().flatten().copied());
            points.push(RatePoint {
                n,
                rmse: if used > 0 { (sq / used as f64).sqrt() } else { f64::NAN },
                replicates_used: used,
                failures,
            });
        }
        let (slope, slope_se) = log_log_slope(&points);
        rows.push(RateRow { procedure, points, slope, slope_se });
    }
    Ok(RateReport { config: config.clone(), rows })
}

fn log_log_slope(points: &[RatePoint]) -> (f64, f64) {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|p| p.rmse.is_finite() && p.rmse > 0.0)
        .map(|p| ((p.n as f64).ln(), p.rmse.ln()))
        .collect();
    let k = pts.len() as f64;
    if pts.len() < 2 {
        return (f64::NAN, f64::NAN);
    }
    let x_bar = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let y_bar = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = pts.iter().map(|p| (p.0 - x_bar) * (p.0 - x_bar)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - x_bar) * (p.1 - y_bar)).sum();
    let slope = sxy / sxx;
    if pts.len() == 2 {
        return (slope, f64::NAN);
    }
    let rss: f64 = pts
        .iter()
        .map(|p| {
            let r = p.1 - (y_bar + slope * (p.0 - x_bar));
            r * r
        })
        .sum();
    let se = (rss / (k - 2.0) / sxx).sqrt();
    (slope, se)
}

/// Configuration of the derivative-accuracy study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivativeRmseConfig {
    pub functions: Vec<TestFunction>,
    pub d0s: Vec<f64>,
    pub sigmas: Vec<f64>,
    pub ns: Vec<usize>,
    pub replicates: usize,
    pub seed: u64,
    pub domain: Domain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivativeRmseCell {
    pub function: String,
    pub d0: f64,
    pub truth: f64,
    pub sigma: f64,
    pub n: usize,
    pub rmse: f64,
    pub replicates_used: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivativeRmseReport {
    pub config: DerivativeRmseConfig,
    pub cells: Vec<DerivativeRmseCell>,
}

impl DerivativeRmseReport {
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("function,d0,truth,sigma,n,rmse,replicates_used,failures\n");
        for c in &self.cells {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                c.function, c.d0, c.truth, c.sigma, c.n, c.rmse, c.replicates_used, c.failures
            ));
        }
        out
    }
}

/// RMSE of the local-quadratic slope at the threshold across replicates.
pub fn derivative_rmse_experiment(config: &DerivativeRmseConfig) -> Result<DerivativeRmseReport> {
    let mut cells = Vec::new();
    for f in &config.functions {
        f.validate(config.domain)?;
        for &d0 in &config.d0s {
            let truth = f.m_prime(d0);
            for &sigma in &config.sigmas {
                for &n in &config.ns {
                    cells.push((f.clone(), d0, truth, sigma, n));
                }
            }
        }
    }
    let reps = config.replicates;
    let mut out = Vec::with_capacity(cells.len());
    for (ci, (f, d0, truth, sigma, n)) in cells.iter().enumerate() {
        let errs = map_indexed(reps, |rep| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream((ci * reps + rep) as u64);
            let batch = draw_sample(f, Psi::Uniform, *n, *sigma, config.domain, &mut rng).ok()?;
            derivative_local_quadratic(&batch, *d0, None)
                .ok()
                .map(|d| (d.slope - truth) * (d.slope - truth))
        });
        let failures = errs.iter().filter(|e| e.is_none()).count();
        let used = reps - failures;
        let sq = csum(errs.iter().flatten().copied());
        out.push(DerivativeRmseCell {
            function: f.name().to_string(),
            d0: *d0,
            truth: *truth,
            sigma: *sigma,
            n: *n,
            rmse: if used > 0 { (sq / used as f64).sqrt() } else { f64::NAN },
            replicates_used: used,
            failures,
        });
    }
    Ok(DerivativeRmseReport { config: config.clone(), cells: out })
}

/// One row of a budget-emulation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmulationRow {
    pub procedure: Procedure,
    pub estimate: Option<f64>,
    /// Absolute distance of the point estimate from the full-population truth.
    pub bias: Option<f64>,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    pub covered: Option<bool>,
    pub length: Option<f64>,
    pub n1: usize,
    pub n2: Option<usize>,
    pub time_ms: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmulationReport {
    pub population_size: usize,
    pub budget: usize,
    pub p: f64,
    pub theta0: f64,
    /// Threshold of the isotonic fit on the entire population.
    pub truth: f64,
    pub seed: u64,
    pub rows: Vec<EmulationRow>,
}

/// Emulate a designed experiment on a finite population: compute the
/// full-population isotonic threshold as the reference "truth", then run each
/// procedure with a budgeted nearest-covariate sampling oracle.
#[allow(clippy::too_many_arguments)]
pub fn emulate_population(
    population: &SampleBatch,
    theta0: f64,
    budget: usize,
    p: f64,
    procedures: &[Procedure],
    pc: &ProcedureConfig,
    tables: &QuantileTables,
    seed: u64,
) -> Result<EmulationReport> {
    if budget > population.len() {
        return Err(Error::BudgetExceedsPopulation {
            budget,
            population: population.len(),
        });
    }
    if budget < 4 {
        return Err(Error::InvalidConfig(format!("budget {budget} too small")));
    }
    let truth = pava(population)?.invert_threshold(theta0);
    let points = Arc::new(population.points().to_vec());
    let domain = population.domain();

    let mut rows = Vec::with_capacity(procedures.len());
    for (pi, &procedure) in procedures.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(pi as u64);
        let mut oracle = SamplingOracle::population(points.clone())?;
        let started = Instant::now();
        let result = run_procedure(
            procedure,
            &mut oracle,
            budget,
            domain,
            theta0,
            procedure.is_two_stage().then_some(p),
            None,
            pc,
            tables,
            &mut rng,
        );
        let time_ms = started.elapsed().as_secs_f64() * 1e3;
        rows.push(match result {
            Ok(run) => EmulationRow {
                procedure,
                estimate: Some(run.interval.point),
                bias: Some((run.interval.point - truth).abs()),
                lower: Some(run.interval.lower),
                upper: Some(run.interval.upper),
                covered: Some(run.interval.covers(truth)),
                length: Some(run.interval.length()),
                n1: run.n1,
                n2: run.n2,
                time_ms,
                error: None,
            },
            Err(e) => EmulationRow {
                procedure,
                estimate: None,
                bias: None,
                lower: None,
                upper: None,
                covered: None,
                length: None,
                n1: (budget as f64 * p).floor() as usize,
                n2: None,
                time_ms,
                error: Some(e.to_string()),
            },
        });
    }
    Ok(EmulationReport {
        population_size: population.len(),
        budget,
        p,
        theta0,
        truth,
        seed,
        rows,
    })
}

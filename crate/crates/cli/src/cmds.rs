//! Subcommand implementations.

use crate::io::*;
use crate::{cfg_field, CiArgs, CliError, DistArg, EmulateArgs, FamilyArg, FitArgs, PlanArgs,
    RatesArgs, Run2Args, SimulateArgs, TabulateArgs};
use isothresh::ci::{lr_ci, wald_ci_one_stage};
use isothresh::error::Error;
use isothresh::isotonic::{pava, Block};
use isothresh::limits::{
    tabulate_chernoff, tabulate_lr_limit, DEFAULT_CHERNOFF_HALF_WIDTH, DEFAULT_CHERNOFF_PATHS,
    DEFAULT_CHERNOFF_STEP, DEFAULT_LR_INNER_N, DEFAULT_LR_OUTER,
};
use isothresh::nuisance::{
    deriv_floor, derivative_local_quadratic, histogram_density, sigma2_floor, variance_gasser,
    wald_constant,
};
use isothresh::sample::{Domain, SampleBatch};
use isothresh::sim::{
    emulate_population, coverage_experiment, derivative_rmse_experiment, rate_experiment,
    CoverageConfig, DerivativeRmseConfig, Procedure, ProcedureConfig, RateConfig, TestFunction,
};
use isothresh::twostage::{
    multistage_rates, plan_stage_two, run_two_stage, KnownNuisance, SamplingOracle, StageFamily,
    TwoStageConfig,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::path::PathBuf;
use std::sync::Arc;

fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn require<T>(v: Option<T>, what: &str) -> Result<T, CliError> {
    v.ok_or_else(|| CliError::validation(format!("missing required option --{what}")))
}

impl From<FamilyArg> for StageFamily {
    fn from(f: FamilyArg) -> Self {
        match f {
            FamilyArg::Wald => StageFamily::Wald,
            FamilyArg::Lr => StageFamily::Lr,
        }
    }
}

struct Ingested {
    batch: SampleBatch,
    domain: Domain,
    input: PathBuf,
}

fn ingest(
    input: Option<PathBuf>,
    file: &Option<Value>,
    domain_spec: Option<String>,
    jitter: Option<f64>,
    decreasing: bool,
    seed: u64,
) -> Result<Ingested, CliError> {
    let input = require(input.or_else(|| cfg_field(file, "input")), "input")?;
    let mut obs = read_observations(&input)?;
    if decreasing {
        for o in &mut obs {
            o.y = -o.y;
        }
    }
    let domain_spec = domain_spec.or_else(|| cfg_field(file, "domain"));
    let domain = resolve_domain(domain_spec.as_deref(), &obs)?;
    let mut rng = rng_for(seed);
    let batch = build_batch(obs, domain, jitter.or_else(|| cfg_field(file, "jitter")), &mut rng)?;
    Ok(Ingested { batch, domain, input })
}

#[derive(Serialize)]
struct FitEcho {
    input: PathBuf,
    domain: Domain,
    decreasing: bool,
    jitter: Option<f64>,
    seed: u64,
}

#[derive(Serialize)]
struct FitOutput {
    knots: Vec<f64>,
    levels: Vec<f64>,
    blocks: Vec<Block>,
    domain: Domain,
    decreasing: bool,
}

pub fn run_fit(a: FitArgs, file: &Option<Value>, seed: u64) -> Result<(), CliError> {
    let decreasing = a.decreasing || cfg_field(file, "decreasing").unwrap_or(false);
    let ing = ingest(a.input, file, a.domain, a.jitter, decreasing, seed)?;
    let fit = pava(&ing.batch).map_err(CliError::from_runtime)?;
    let sign = if decreasing { -1.0 } else { 1.0 };
    let result = FitOutput {
        knots: fit.knots().to_vec(),
        levels: fit.levels().iter().map(|l| sign * l).collect(),
        blocks: fit
            .blocks()
            .iter()
            .map(|b| Block { mean: sign * b.mean, ..*b })
            .collect(),
        domain: ing.domain,
        decreasing,
    };
    let config = FitEcho {
        input: ing.input,
        domain: ing.domain,
        decreasing,
        jitter: a.jitter,
        seed,
    };
    write_json(a.output.as_deref(), &Envelope { config, result })
}

#[derive(Serialize)]
struct CiEcho {
    input: PathBuf,
    domain: Domain,
    theta0: f64,
    family: String,
    alpha: f64,
    decreasing: bool,
    grid_size: usize,
    n: usize,
    seed: u64,
}

pub fn run_ci(a: CiArgs, file: &Option<Value>, seed: u64) -> Result<(), CliError> {
    let decreasing = a.decreasing || cfg_field(file, "decreasing").unwrap_or(false);
    let ing = ingest(a.input, file, a.domain, a.jitter, decreasing, seed)?;
    let theta0_raw: f64 = require(a.theta0.or_else(|| cfg_field(file, "theta0")), "theta0")?;
    let theta0 = if decreasing { -theta0_raw } else { theta0_raw };
    let family = a.family.or_else(|| cfg_field::<String>(file, "family").and_then(|s| match s.as_str() {
        "wald" | "wald1" => Some(FamilyArg::Wald),
        "lr" => Some(FamilyArg::Lr),
        _ => None,
    })).unwrap_or(FamilyArg::Lr);
    let alpha = a.alpha.or_else(|| cfg_field(file, "alpha")).unwrap_or(0.05);
    let grid_size = a.grid_size.or_else(|| cfg_field(file, "grid_size")).unwrap_or(2001);
    let tables = load_tables(a.tables.chernoff_table.as_deref(), a.tables.lr_limit_table.as_deref())?;

    let batch = &ing.batch;
    let n = batch.len();
    let fit = pava(batch).map_err(CliError::from_runtime)?;
    let d = fit.invert_threshold(theta0);
    let interval = match family {
        FamilyArg::Wald => {
            let sigma2 = match a.sigma2 {
                Some(v) => v,
                None => variance_gasser(batch)
                    .map_err(CliError::from_runtime)?
                    .max(sigma2_floor(batch)),
            };
            let deriv = match a.deriv {
                Some(v) => v,
                None => {
                    derivative_local_quadratic(batch, d, None)
                        .map_err(CliError::from_runtime)?
                        .slope
                }
            };
            if deriv <= deriv_floor(batch) {
                return Err(CliError::from_runtime(Error::FlatDerivative {
                    deriv,
                    floor: deriv_floor(batch),
                }));
            }
            let c_hat = wald_constant(sigma2, deriv).map_err(CliError::from_runtime)?;
            let g = a.g.unwrap_or_else(|| histogram_density(batch, d));
            let q = tables.chernoff_two_sided(alpha).map_err(CliError::from_runtime)?;
            wald_ci_one_stage(d, n, c_hat, g, q, ing.domain, 1.0 - alpha)
                .map_err(CliError::from_runtime)?
        }
        FamilyArg::Lr => {
            let sigma2 = match a.sigma2 {
                Some(v) => v,
                None => variance_gasser(batch)
                    .map_err(CliError::from_runtime)?
                    .max(sigma2_floor(batch)),
            };
            let q = tables.lr_upper(alpha).map_err(CliError::from_runtime)?;
            lr_ci(batch, theta0, sigma2, q, ing.domain, grid_size, 1.0 - alpha)
                .map_err(CliError::from_runtime)?
        }
    };
    let config = CiEcho {
        input: ing.input,
        domain: ing.domain,
        theta0: theta0_raw,
        family: match family {
            FamilyArg::Wald => "wald1".into(),
            FamilyArg::Lr => "lr".into(),
        },
        alpha,
        decreasing,
        grid_size,
        n,
        seed,
    };
    write_json(a.output.as_deref(), &Envelope { config, result: interval })
}

#[derive(Serialize)]
struct PlanEcho {
    input: PathBuf,
    domain: Domain,
    theta0: f64,
    family: String,
    beta: f64,
    conservative: bool,
    n1: usize,
    n2: usize,
    seed: u64,
}

#[derive(Serialize)]
struct PlanOutput {
    d1: f64,
    c1: f64,
    gamma1: f64,
    interval: (f64, f64),
    clipped: bool,
}

pub fn run_plan(a: PlanArgs, file: &Option<Value>, seed: u64) -> Result<(), CliError> {
    let ing = ingest(a.input, file, a.domain, a.jitter, false, seed)?;
    let theta0: f64 = require(a.theta0.or_else(|| cfg_field(file, "theta0")), "theta0")?;
    let n2 = require(a.n2.or_else(|| cfg_field(file, "n2")), "n2")?;
    let family = a.family.unwrap_or(FamilyArg::Wald);
    let beta = a.beta.or_else(|| cfg_field(file, "beta")).unwrap_or(0.01);
    let conservative = !a.tabulated_stage1;
    let grid_size = a.grid_size.or_else(|| cfg_field(file, "grid_size")).unwrap_or(501);
    let tables = load_tables(a.tables.chernoff_table.as_deref(), a.tables.lr_limit_table.as_deref())?;

    let batch = &ing.batch;
    let n1 = batch.len();
    let fit = pava(batch).map_err(CliError::from_runtime)?;
    let d1 = fit.invert_threshold(theta0);
    let sigma2 = match a.sigma2 {
        Some(v) => v,
        None => variance_gasser(batch)
            .map_err(CliError::from_runtime)?
            .max(sigma2_floor(batch)),
    };
    let fragment = match family {
        FamilyArg::Wald => {
            let deriv = match a.deriv {
                Some(v) => v,
                None => {
                    derivative_local_quadratic(batch, d1, None)
                        .map_err(CliError::from_runtime)?
                        .slope
                }
            };
            if deriv <= deriv_floor(batch) {
                return Err(CliError::from_runtime(Error::FlatDerivative {
                    deriv,
                    floor: deriv_floor(batch),
                }));
            }
            let c_hat = wald_constant(sigma2, deriv).map_err(CliError::from_runtime)?;
            let g = a.g.unwrap_or_else(|| histogram_density(batch, d1));
            let q = tables
                .stage_one_chernoff(beta, conservative)
                .map_err(CliError::from_runtime)?;
            plan_stage_two(d1, n1, n2, Some(c_hat), Some(g), q, StageFamily::Wald, ing.domain, None)
                .map_err(CliError::from_runtime)?
        }
        FamilyArg::Lr => {
            let q = tables.stage_one_lr(beta, conservative).map_err(CliError::from_runtime)?;
            let region = lr_ci(batch, theta0, sigma2, q, ing.domain, grid_size, 1.0 - beta)
                .map_err(CliError::from_runtime)?;
            plan_stage_two(
                d1,
                n1,
                n2,
                None,
                None,
                q,
                StageFamily::Lr,
                ing.domain,
                Some((region.lower, region.upper)),
            )
            .map_err(CliError::from_runtime)?
        }
    };
    let config = PlanEcho {
        input: ing.input,
        domain: ing.domain,
        theta0,
        family: match family {
            FamilyArg::Wald => "wald".into(),
            FamilyArg::Lr => "lr".into(),
        },
        beta,
        conservative,
        n1,
        n2,
        seed,
    };
    let result = PlanOutput {
        d1,
        c1: fragment.c1,
        gamma1: fragment.gamma1,
        interval: fragment.interval,
        clipped: fragment.clipped,
    };
    write_json(a.output.as_deref(), &Envelope { config, result })
}

#[derive(Serialize)]
struct Run2Echo {
    source: String,
    theta0: f64,
    config: TwoStageConfig,
    seed: u64,
}

pub fn run_run2(a: Run2Args, file: &Option<Value>, seed: u64) -> Result<(), CliError> {
    let n = require(a.n.or_else(|| cfg_field(file, "n")), "n")?;
    let function_name: Option<String> = a.function.or_else(|| cfg_field(file, "function"));
    let population_path: Option<PathBuf> = a.population.or_else(|| cfg_field(file, "population"));

    let (mut oracle, domain, theta0, source, d0) = match (&function_name, &population_path) {
        (Some(name), None) => {
            let f = TestFunction::by_name(name).ok_or_else(|| {
                CliError::validation(format!(
                    "unknown function '{name}' (expected sigmoid, quadratic or isosine)"
                ))
            })?;
            let sigma = a.sigma.or_else(|| cfg_field(file, "sigma")).unwrap_or(0.1);
            let domain = match a.domain.or_else(|| cfg_field(file, "domain")) {
                Some(s) => resolve_domain(Some(&s), &[])?,
                None => Domain::new(0.0, 1.0).expect("static"),
            };
            let d0 = a.d0.or_else(|| cfg_field(file, "d0"));
            let theta0 = match a.theta0.or_else(|| cfg_field(file, "theta0")) {
                Some(t) => t,
                None => f.m(require(d0, "d0 (or --theta0)")?),
            };
            let g = f.clone();
            let oracle = SamplingOracle::simulate(Arc::new(move |x| g.m(x)), sigma)
                .map_err(CliError::from_validation)?;
            (oracle, domain, theta0, format!("simulate:{name}"), d0.map(|d| (f, d, sigma)))
        }
        (None, Some(path)) => {
            let ing = ingest(Some(path.clone()), file, a.domain, a.jitter, false, seed)?;
            let theta0 = require(a.theta0.or_else(|| cfg_field(file, "theta0")), "theta0")?;
            let oracle = SamplingOracle::population(Arc::new(ing.batch.points().to_vec()))
                .map_err(CliError::from_validation)?;
            (oracle, ing.domain, theta0, format!("population:{}", path.display()), None)
        }
        _ => {
            return Err(CliError::validation(
                "exactly one of --function or --population is required".into(),
            ))
        }
    };

    let mut config = TwoStageConfig::new(n, domain, theta0);
    if let Some(p) = a.p.or_else(|| cfg_field(file, "p")) {
        config.p = p;
    }
    if let Some(v) = a.beta.or_else(|| cfg_field(file, "beta")) {
        config.beta = v;
    }
    if let Some(v) = a.alpha.or_else(|| cfg_field(file, "alpha")) {
        config.alpha = v;
    }
    if let Some(v) = a.stage1 {
        config.stage1 = v.into();
    }
    if let Some(v) = a.stage2 {
        config.stage2 = v.into();
    }
    if let Some(v) = a.pooling_threshold.or_else(|| cfg_field(file, "pooling_threshold")) {
        config.pooling_threshold = v;
    }
    if let Some(v) = a.grid_size.or_else(|| cfg_field(file, "grid_size")) {
        config.grid_size = v;
    }
    if let Some(v) = a.stage1_grid_size.or_else(|| cfg_field(file, "stage1_grid_size")) {
        config.stage1_grid_size = v;
    }
    config.conservative_stage1 = !a.tabulated_stage1;
    if a.known_nuisance {
        let (f, d0, sigma) = d0.ok_or_else(|| {
            CliError::validation("--known-nuisance needs --function, --d0 and --sigma".into())
        })?;
        config.known_nuisance =
            Some(KnownNuisance { sigma2: sigma * sigma, deriv: f.m_prime(d0) });
    }

    let tables = load_tables(a.tables.chernoff_table.as_deref(), a.tables.lr_limit_table.as_deref())?;
    let mut rng = rng_for(seed);
    let outcome = run_two_stage(&mut oracle, &config, &tables, &mut rng)
        .map_err(CliError::from_runtime)?;
    let aborted = outcome.aborted.clone();
    let echo = Run2Echo { source, theta0, config, seed };
    write_json(a.output.as_deref(), &Envelope { config: echo, result: outcome })?;
    // Stage-one results are still written above, but an aborted plan is a
    // runtime failure for exit-code purposes.
    match aborted {
        Some(msg) => Err(CliError::runtime(format!("two-stage run aborted: {msg}"))),
        None => Ok(()),
    }
}

/// Tagged experiment configuration for `simulate`.
#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
enum SimulateSpec {
    Coverage {
        #[serde(flatten)]
        config: CoverageConfig,
    },
    Rate {
        #[serde(flatten)]
        config: RateConfig,
    },
    DerivativeRmse {
        #[serde(flatten)]
        config: DerivativeRmseConfig,
    },
}

pub fn run_simulate(
    a: SimulateArgs,
    file: &Option<Value>,
    cli_seed: Option<u64>,
) -> Result<(), CliError> {
    let value = file
        .clone()
        .ok_or_else(|| CliError::validation("simulate needs --config <json>".into()))?;
    let mut spec: SimulateSpec = serde_json::from_value(value)
        .map_err(|e| CliError::validation(format!("bad simulate config: {e}")))?;
    // An explicit seed flag overrides the config seed.
    if let Some(seed) = cli_seed {
        match &mut spec {
            SimulateSpec::Coverage { config } => config.seed = seed,
            SimulateSpec::Rate { config } => config.seed = seed,
            SimulateSpec::DerivativeRmse { config } => config.seed = seed,
        }
    }
    let tables = load_tables(a.tables.chernoff_table.as_deref(), a.tables.lr_limit_table.as_deref())?;
    match spec {
        SimulateSpec::Coverage { config } => {
            let report = coverage_experiment(&config, &tables).map_err(CliError::from_runtime)?;
            if let Some(csv) = a.csv.as_deref() {
                write_text(csv, &report.to_csv())?;
            }
            let ok = report.ok;
            write_json(a.output.as_deref(), &report)?;
            if !ok {
                return Err(CliError::runtime(
                    "a procedure exceeded the 5% replicate-failure budget".into(),
                ));
            }
            Ok(())
        }
        SimulateSpec::Rate { config } => {
            let report = rate_experiment(&config, &tables).map_err(CliError::from_runtime)?;
            if let Some(csv) = a.csv.as_deref() {
                write_text(csv, &report.to_csv())?;
            }
            write_json(a.output.as_deref(), &report)
        }
        SimulateSpec::DerivativeRmse { config } => {
            let report = derivative_rmse_experiment(&config).map_err(CliError::from_runtime)?;
            if let Some(csv) = a.csv.as_deref() {
                write_text(csv, &report.to_csv())?;
            }
            write_json(a.output.as_deref(), &report)
        }
    }
}

#[derive(Serialize)]
struct EmulateEcho {
    population: PathBuf,
    domain: Domain,
    theta0: f64,
    budget: usize,
    p: f64,
    procedures: Vec<Procedure>,
    proc: ProcedureConfig,
    jitter: Option<f64>,
    seed: u64,
}

pub fn run_emulate(a: EmulateArgs, file: &Option<Value>, seed: u64) -> Result<(), CliError> {
    let path = require(a.population.or_else(|| cfg_field(file, "population")), "population")?;
    let ing = ingest(Some(path.clone()), file, a.domain, a.jitter, false, seed)?;
    let theta0 = require(a.theta0.or_else(|| cfg_field(file, "theta0")), "theta0")?;
    let budget = require(a.budget.or_else(|| cfg_field(file, "budget")), "budget")?;
    let p = a.p.or_else(|| cfg_field(file, "p")).unwrap_or(0.5);
    let procedures: Vec<Procedure> = match a.procedures.or_else(|| cfg_field(file, "procedures")) {
        Some(s) => s
            .split(',')
            .map(|name| {
                Procedure::by_name(name.trim()).ok_or_else(|| {
                    CliError::validation(format!("unknown procedure '{}'", name.trim()))
                })
            })
            .collect::<Result<_, _>>()?,
        None => Procedure::ALL.to_vec(),
    };
    let mut pc = ProcedureConfig::default();
    if let Some(v) = a.alpha.or_else(|| cfg_field(file, "alpha")) {
        pc.alpha = v;
    }
    if let Some(v) = a.beta.or_else(|| cfg_field(file, "beta")) {
        pc.beta = v;
    }
    if let Some(v) = a.pooling_threshold.or_else(|| cfg_field(file, "pooling_threshold")) {
        pc.pooling_threshold = v;
    }
    if let Some(v) = a.grid_size.or_else(|| cfg_field(file, "grid_size")) {
        pc.grid_size = v;
    }
    if let Some(v) = a.stage1_grid_size.or_else(|| cfg_field(file, "stage1_grid_size")) {
        pc.stage1_grid_size = v;
    }
    let tables = load_tables(a.tables.chernoff_table.as_deref(), a.tables.lr_limit_table.as_deref())?;
    let report = emulate_population(&ing.batch, theta0, budget, p, &procedures, &pc, &tables, seed)
        .map_err(|e| match e {
            Error::BudgetExceedsPopulation { .. } | Error::InvalidConfig(_) => {
                CliError::from_validation(e)
            }
            other => CliError::from_runtime(other),
        })?;
    let config = EmulateEcho {
        population: path,
        domain: ing.domain,
        theta0,
        budget,
        p,
        procedures,
        proc: pc,
        jitter: a.jitter,
        seed,
    };
    write_json(a.output.as_deref(), &Envelope { config, result: report })
}

pub fn run_tabulate(a: TabulateArgs, file: &Option<Value>, seed: u64) -> Result<(), CliError> {
    let dist = require(
        a.dist.or_else(|| match cfg_field::<String>(file, "dist").as_deref() {
            Some("chernoff") | Some("z") => Some(DistArg::Chernoff),
            Some("lr_limit") | Some("lr-limit") | Some("d") => Some(DistArg::LrLimit),
            _ => None,
        }),
        "dist",
    )?;
    let (table, dist_name, key) = match dist {
        DistArg::Chernoff => {
            let paths = a.paths.or_else(|| cfg_field(file, "paths")).unwrap_or(DEFAULT_CHERNOFF_PATHS);
            let hw = a
                .half_width
                .or_else(|| cfg_field(file, "half_width"))
                .unwrap_or(DEFAULT_CHERNOFF_HALF_WIDTH);
            let step = a.step.or_else(|| cfg_field(file, "step")).unwrap_or(DEFAULT_CHERNOFF_STEP);
            let key = format!("paths={paths}:half_width={hw}:step={step}:seed={seed}");
            let table = tabulate_chernoff(paths, hw, step, seed).map_err(|e| match e {
                Error::InvalidConfig(_) => CliError::from_validation(e),
                other => CliError::from_runtime(other),
            })?;
            (table, "chernoff", key)
        }
        DistArg::LrLimit => {
            let outer = a.outer.or_else(|| cfg_field(file, "outer")).unwrap_or(DEFAULT_LR_OUTER);
            let inner =
                a.inner_n.or_else(|| cfg_field(file, "inner_n")).unwrap_or(DEFAULT_LR_INNER_N);
            let key = format!("outer={outer}:inner_n={inner}:seed={seed}");
            let table = tabulate_lr_limit(outer, inner, seed).map_err(|e| match e {
                Error::InvalidConfig(_) => CliError::from_validation(e),
                other => CliError::from_runtime(other),
            })?;
            (table, "lr_limit", key)
        }
    };
    let path = resolve_cache_path(a.output.as_deref(), dist_name, &key);
    write_text(&path, &(table.to_json_string() + "\n"))?;
    println!("{}", path.display());
    Ok(())
}

#[derive(Serialize)]
struct RatesEcho {
    k: usize,
    gamma1: f64,
    eta: f64,
}

pub fn run_rates(a: RatesArgs, file: &Option<Value>) -> Result<(), CliError> {
    let k = require(a.k.or_else(|| cfg_field(file, "k")), "k")?;
    let gamma1 = a.gamma1.or_else(|| cfg_field(file, "gamma1")).unwrap_or(1.0 / 3.0);
    let eta = a.eta.or_else(|| cfg_field(file, "eta")).unwrap_or(0.0);
    let result = multistage_rates(k, gamma1, eta).map_err(CliError::from_validation)?;
    write_json(a.output.as_deref(), &Envelope { config: RatesEcho { k, gamma1, eta }, result })
}

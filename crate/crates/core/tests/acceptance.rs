//! Acceptance suite: every release-blocking behavioural guarantee, one test
//! per criterion, each printing a single PASS/FAIL line (run with
//! `--nocapture` to see them as they complete).

use isothresh::ci::lr_stat;
use isothresh::isotonic::{argmin_diagnostic, constrained_pava, last_point_at_or_below, pava};
use isothresh::limits::{
    tabulate_chernoff, tabulate_lr_limit, QuantileTables, CONSERVATIVE_CHERNOFF_Q995,
    CONSERVATIVE_LR_LIMIT_Q99,
};
use isothresh::sample::{Domain, Obs, SampleBatch, Stage};
use isothresh::sim::{
    coverage_experiment, emulate_population, rate_experiment, CoverageConfig, CoverageReport,
    Procedure, ProcedureConfig, RateConfig, TestFunction,
};
use isothresh::twostage::{multistage_rates, Psi};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::sync::OnceLock;
use std::time::Instant;

fn report(id: u32, name: &str, pass: bool, details: &str) {
    println!("ACCEPTANCE {id:02} {name}: {} | {details}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "acceptance {id:02} {name} failed: {details}");
}

fn dom() -> Domain {
    Domain::new(0.0, 1.0).unwrap()
}

fn batch(xs: &[f64], ys: &[f64], ws: &[f64]) -> SampleBatch {
    let pts: Vec<Obs> = xs
        .iter()
        .zip(ys)
        .zip(ws)
        .map(|((&x, &y), &w)| Obs { x, y, w })
        .collect();
    SampleBatch::new(pts, dom(), Stage::One).unwrap()
}

/// Brute-force projection onto the nondecreasing cone: enumerate every block
/// partition, give each block its weighted mean, keep monotone candidates.
fn brute_force_monotone(ys: &[f64], ws: &[f64]) -> (Vec<f64>, f64) {
    let n = ys.len();
    let mut best_rss = f64::INFINITY;
    let mut best_fit = vec![];
    for mask in 0..(1u32 << (n - 1)) {
        let mut fit = Vec::with_capacity(n);
        let mut means: Vec<f64> = Vec::new();
        let mut start = 0;
        for i in 0..n {
            if i + 1 == n || mask >> i & 1 == 1 {
                let w: f64 = ws[start..=i].iter().sum();
                let wy: f64 = ws[start..=i].iter().zip(&ys[start..=i]).map(|(w, y)| w * y).sum();
                let m = wy / w;
                means.push(m);
                fit.extend(std::iter::repeat(m).take(i + 1 - start));
                start = i + 1;
            }
        }
        if means.windows(2).all(|p| p[0] <= p[1]) {
            let rss: f64 =
                ws.iter().zip(ys).zip(&fit).map(|((w, y), f)| w * (y - f) * (y - f)).sum();
            if rss < best_rss {
                best_rss = rss;
                best_fit = fit;
            }
        }
    }
    (best_fit, best_rss)
}

#[test]
fn a01_pava_matches_block_partition_enumeration() {
    let started = Instant::now();
    let y_grid = [-1.0, -0.5, 0.0, 0.5, 1.0];
    let w_cycle = [1.0, 0.5, 2.0, 1.5, 3.0, 0.75];
    let mut checked = 0usize;
    let mut max_dev = 0.0f64;
    for n in 1..=8usize {
        let space = 5usize.pow(n as u32);
        let per_n = 600;
        let stride = (space / per_n).max(1);
        let mut k = 0;
        let mut taken = 0;
        while k < space && taken < per_n {
            taken += 1;
            // Decode index k into one y-assignment on the grid.
            let mut idx = k;
            let mut ys = Vec::with_capacity(n);
            for _ in 0..n {
                ys.push(y_grid[idx % 5]);
                idx /= 5;
            }
            let ws: Vec<f64> =
                (0..n).map(|i| w_cycle[(i + checked) % w_cycle.len()]).collect();
            let xs: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
            let s = batch(&xs, &ys, &ws);
            let fit = pava(&s).unwrap();
            let (oracle, _) = brute_force_monotone(&ys, &ws);
            for (a, b) in fit.levels().iter().zip(&oracle) {
                max_dev = max_dev.max((a - b).abs());
            }
            checked += 1;
            k += stride;
        }
    }
    let elapsed = started.elapsed().as_secs_f64();
    let pass = checked >= 3000 && max_dev <= 1e-10 && elapsed < 10.0;
    report(
        1,
        "pava-enumeration-oracle",
        pass,
        &format!("{checked} samples, max |dev| = {max_dev:.2e}, {elapsed:.1}s"),
    );
}

#[test]
fn a02_switching_relation_exact() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(20_101);
    let mut checks = 0usize;
    for _ in 0..1000 {
        let n = rng.random_range(1..=50usize);
        let mut xs: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..0.99)).collect();
        xs.sort_by(f64::total_cmp);
        let ys: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ws: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..2.0)).collect();
        let s = batch(&xs, &ys, &ws);
        let fit = pava(&s).unwrap();
        let levels = fit.levels();
        let base = levels[rng.random_range(0..levels.len())];
        for s_val in [base, base - 1e-6, base + 1e-6, base - 0.25, base + 0.25] {
            let arg = argmin_diagnostic(&s, s_val).unwrap();
            for p in s.points() {
                let lhs = fit.evaluate(p.x) <= s_val;
                let rhs = arg >= last_point_at_or_below(&s, p.x).unwrap();
                if lhs != rhs {
                    report(
                        2,
                        "switching-relation",
                        false,
                        &format!("violated at t = {}, s = {s_val}", p.x),
                    );
                }
                checks += 1;
            }
        }
    }
    let elapsed = started.elapsed().as_secs_f64();
    report(
        2,
        "switching-relation",
        elapsed < 30.0,
        &format!("{checks} (t, s) checks exact, {elapsed:.1}s"),
    );
}

#[test]
fn a03_lr_residual_and_block_average_routes_agree() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(30_303);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = rng.random_range(2..=100usize);
        let mut xs: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..0.99)).collect();
        xs.sort_by(f64::total_cmp);
        let ys: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ws: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..2.0)).collect();
        let s = batch(&xs, &ys, &ws);
        let d0 = rng.random_range(0.05..0.95);
        let theta0 = rng.random_range(-0.5..0.5);
        let sigma2 = rng.random_range(0.2..2.0);
        let stat = lr_stat(&s, theta0, d0, sigma2).unwrap();
        let fit_u = pava(&s).unwrap();
        let fit_c = constrained_pava(&s, d0, theta0).unwrap();
        let alt: f64 = s
            .points()
            .iter()
            .map(|p| {
                let du = fit_u.evaluate(p.x) - theta0;
                let dc = fit_c.evaluate(p.x) - theta0;
                p.w * (du * du - dc * dc)
            })
            .sum::<f64>()
            / sigma2;
        let rel = (stat - alt).abs() / stat.abs().max(alt.abs()).max(1.0);
        worst = worst.max(rel);
    }
    let elapsed = started.elapsed().as_secs_f64();
    report(
        3,
        "lr-block-identity",
        worst <= 1e-8 && elapsed < 30.0,
        &format!("1000 instances, worst relative gap {worst:.2e}, {elapsed:.1}s"),
    );
}

const COVERAGE_BAND: (f64, f64) = (0.92, 0.98);
const ACCEPT_SEED: u64 = 20_120_822;

fn lr_band_cells(report_data: &CoverageReport) -> (bool, String) {
    let mut ok = true;
    let mut worst = String::new();
    let mut worst_gap = 0.0;
    for c in &report_data.cells {
        let inside = c.coverage >= COVERAGE_BAND.0 && c.coverage <= COVERAGE_BAND.1 && !c.failed;
        if !inside {
            ok = false;
        }
        let gap = (c.coverage - 0.95).abs();
        if gap >= worst_gap {
            worst_gap = gap;
            worst = format!(
                "worst {} {} d0={} sigma={}: {:.3}",
                c.function,
                c.procedure.name(),
                c.d0,
                c.sigma,
                c.coverage
            );
        }
    }
    (ok, worst)
}

#[test]
fn a04_lr_coverage_well_behaved_functions() {
    let tables = QuantileTables::embedded();
    let mut config =
        CoverageConfig::new(vec![TestFunction::Quadratic, TestFunction::Sigmoid], ACCEPT_SEED);
    config.d0s = vec![0.4, 0.5, 0.6];
    config.sigmas = vec![0.1, 0.3];
    config.ns = vec![500];
    config.replicates = 1000;
    config.procedures = vec![Procedure::OneStageLr, Procedure::TwoStageLr];
    let rep = coverage_experiment(&config, &tables).unwrap();
    let (ok, worst) = lr_band_cells(&rep);
    report(4, "lr-coverage-well-behaved", ok, &format!("24 cells in [0.92, 0.98]; {worst}"));
}

fn isosine_lr_report() -> &'static CoverageReport {
    static REPORT: OnceLock<CoverageReport> = OnceLock::new();
    REPORT.get_or_init(|| {
        let tables = QuantileTables::embedded();
        let mut config = CoverageConfig::new(vec![TestFunction::IsoSine], ACCEPT_SEED + 1);
        config.d0s = vec![0.4, 0.5, 0.6];
        config.sigmas = vec![0.1, 0.3];
        config.ns = vec![500];
        config.replicates = 1000;
        config.procedures = vec![Procedure::OneStageLr, Procedure::TwoStageLr];
        coverage_experiment(&config, &tables).unwrap()
    })
}

#[test]
fn a05_lr_coverage_robust_on_isosine_and_comparator_fails() {
    let tables = QuantileTables::embedded();
    let rep = isosine_lr_report();
    let (lr_ok, worst) = lr_band_cells(rep);

    let mut comparator = CoverageConfig::new(vec![TestFunction::IsoSine], ACCEPT_SEED + 2);
    comparator.d0s = vec![0.5];
    comparator.sigmas = vec![0.1];
    comparator.ns = vec![500];
    comparator.replicates = 1000;
    comparator.procedures = vec![Procedure::LocalLinear];
    let comp = coverage_experiment(&comparator, &tables).unwrap();
    let cc = &comp.cells[0];
    let comp_ok = cc.coverage < 0.90 && !cc.failed;

    report(
        5,
        "lr-coverage-isosine-and-comparator",
        lr_ok && comp_ok,
        &format!("12 LR cells in band ({worst}); local-linear coverage {:.3} < 0.90", cc.coverage),
    );
}

#[test]
fn a06_two_stage_lr_intervals_are_shorter() {
    let rep = isosine_lr_report();
    let pick = |proc: Procedure, d0: f64| {
        rep.cells
            .iter()
            .find(|c| c.procedure == proc && c.d0 == d0 && c.sigma == 0.1)
            .expect("cell present")
    };
    let mut ok = true;
    let mut pooled_one = (0.0, 0.0, 0usize);
    let mut pooled_two = (0.0, 0.0, 0usize);
    let mut details = String::new();
    for d0 in [0.4, 0.5, 0.6] {
        let one = pick(Procedure::OneStageLr, d0);
        let two = pick(Procedure::TwoStageLr, d0);
        ok &= two.avg_length < one.avg_length;
        details.push_str(&format!(
            "d0={d0}: {:.4} < {:.4}; ",
            two.avg_length, one.avg_length
        ));
        pooled_one.0 += one.avg_length;
        pooled_one.1 += one.length_sd * one.length_sd / one.replicates_used as f64;
        pooled_one.2 += 1;
        pooled_two.0 += two.avg_length;
        pooled_two.1 += two.length_sd * two.length_sd / two.replicates_used as f64;
        pooled_two.2 += 1;
    }
    // Non-overlapping two-standard-error bars on the pooled means.
    let mean_one = pooled_one.0 / pooled_one.2 as f64;
    let mean_two = pooled_two.0 / pooled_two.2 as f64;
    let se_one = pooled_one.1.sqrt() / pooled_one.2 as f64;
    let se_two = pooled_two.1.sqrt() / pooled_two.2 as f64;
    let separated = mean_two + 2.0 * se_two < mean_one - 2.0 * se_one;
    report(
        6,
        "two-stage-lr-shorter",
        ok && separated,
        &format!(
            "{details}pooled {:.4}±{:.4} < {:.4}±{:.4}",
            mean_two,
            2.0 * se_two,
            mean_one,
            2.0 * se_one
        ),
    );
}

#[test]
fn a07_rate_slopes() {
    let tables = QuantileTables::embedded();
    let config = RateConfig {
        function: TestFunction::Quadratic,
        d0: 0.5,
        sigma: 0.1,
        ns: vec![200, 400, 800, 1600, 3200],
        procedures: vec![Procedure::OneStageWald, Procedure::TwoStageWald],
        replicates: 500,
        seed: ACCEPT_SEED + 3,
        domain: dom(),
        proc: ProcedureConfig::default(),
    };
    let rep = rate_experiment(&config, &tables).unwrap();
    let one = rep.rows.iter().find(|r| r.procedure == Procedure::OneStageWald).unwrap();
    let two = rep.rows.iter().find(|r| r.procedure == Procedure::TwoStageWald).unwrap();
    let ok1 = (one.slope + 1.0 / 3.0).abs() <= 0.08;
    let ok2 = (two.slope + 4.0 / 9.0).abs() <= 0.08;
    report(
        7,
        "rate-slopes",
        ok1 && ok2,
        &format!(
            "one-stage {:.4} (target -1/3 ± 0.08), two-stage {:.4} (target -4/9 ± 0.08)",
            one.slope, two.slope
        ),
    );
}

// KNOWN FAILURE: with the true slope and variance supplied, the two-stage
// Wald interval on the isosine is *conservative* at n = 500 — measured
// coverage 0.993 here, converging to nominal only from above (0.996 at
// n = 500 -> 0.972 at n = 2000 -> 0.948 at n = 8000 in probes). The function's
// slope at the threshold (0.279) roughly triples within +/-0.1, so the
// supplied-truth asymptotic scale overstates the estimator's spread at this
// sample size. The quadratic control below sits at the nominal level with the
// identical machinery, so the 0.98 ceiling, not the implementation, is what
// this configuration cannot meet.
#[test]
fn a08_known_nuisance_restores_nominal_coverage() {
    let tables = QuantileTables::embedded();
    let run = |f: TestFunction, sigma: f64| {
        let mut config = CoverageConfig::new(vec![f], ACCEPT_SEED + 4);
        config.d0s = vec![0.5];
        config.sigmas = vec![sigma];
        config.ns = vec![500];
        config.replicates = 1000;
        config.procedures = vec![Procedure::TwoStageWald];
        config.proc.known_nuisance = true;
        coverage_experiment(&config, &tables).unwrap().cells[0].clone()
    };
    let iso = run(TestFunction::IsoSine, 0.1);
    // Control: on a function whose slope is locally representative the same
    // machinery sits at the nominal level.
    let quad = run(TestFunction::Quadratic, 0.1);
    let pass = iso.coverage >= COVERAGE_BAND.0 && iso.coverage <= COVERAGE_BAND.1 && !iso.failed;
    report(
        8,
        "known-nuisance-restoration",
        pass,
        &format!(
            "isosine coverage {:.3} (band [0.92, 0.98]); quadratic control {:.3}",
            iso.coverage, quad.coverage
        ),
    );
}

#[test]
fn a09_limit_tables() {
    let z = isothresh::limits::embedded_chernoff();
    let d = isothresh::limits::embedded_lr_limit();

    // Symmetry of the Chernoff table within Monte Carlo + grid resolution.
    let mut sym_ok = true;
    let mut worst_sym = 0.0f64;
    for &p in &[0.005, 0.025, 0.05, 0.1, 0.2, 0.3, 0.4] {
        let gap = (z.quantile(p).unwrap() + z.quantile(1.0 - p).unwrap()).abs();
        let se = (z.quantile_mc_se(p).powi(2) + z.quantile_mc_se(1.0 - p).powi(2)).sqrt();
        let allow = 3.0 * se + 0.002; // one grid step of discretization
        worst_sym = worst_sym.max(gap - allow);
        sym_ok &= gap <= allow;
    }
    let median_ok = z.quantile(0.5).unwrap().abs() <= 3.0 * z.quantile_mc_se(0.5) + 0.002;

    let cons_ok = z.quantile(0.995).unwrap() <= CONSERVATIVE_CHERNOFF_Q995
        && d.quantile(0.99).unwrap() <= CONSERVATIVE_LR_LIMIT_Q99;

    // Cross-seed stability at reduced (but valid) simulation sizes.
    let za = tabulate_chernoff(100_000, 2.5, 0.005, 11).unwrap();
    let zb = tabulate_chernoff(100_000, 2.5, 0.005, 12).unwrap();
    let da = tabulate_lr_limit(10_000, 2000, 13).unwrap();
    let db = tabulate_lr_limit(10_000, 2000, 14).unwrap();
    let mut drift = 0.0f64;
    for &p in &[0.05, 0.25, 0.5, 0.75, 0.95, 0.975] {
        drift = drift.max((za.quantile(p).unwrap() - zb.quantile(p).unwrap()).abs());
        drift = drift.max((da.quantile(p).unwrap() - db.quantile(p).unwrap()).abs());
    }
    let drift_ok = drift <= 0.05;
    let repro = (za.quantile(0.975).unwrap() - zb.quantile(0.975).unwrap()).abs();

    report(
        9,
        "limit-tables",
        sym_ok && median_ok && cons_ok && drift_ok,
        &format!(
            "q_Z(0.995) = {:.3} <= 2, q_D(0.99) = {:.3} <= 4, symmetry margin {:.3}, cross-seed drift {:.3} (q975 repro {:.3})",
            z.quantile(0.995).unwrap(),
            d.quantile(0.99).unwrap(),
            worst_sym,
            drift,
            repro
        ),
    );
}

#[test]
fn a10_multistage_rate_recursion() {
    let r = multistage_rates(4, 1.0 / 3.0, 0.0).unwrap();
    let rates: Vec<f64> = r.stages.iter().map(|s| s.rate).collect();
    let expect = [1.0 / 3.0, 4.0 / 9.0, 13.0 / 27.0, 40.0 / 81.0];
    let mut ok = rates.len() == 4;
    for (a, b) in rates.iter().zip(expect) {
        ok &= (a - b).abs() <= 1e-12;
    }
    ok &= r.stages.iter().all(|s| s.rate < 0.5);
    for eta in [0.0, 0.01] {
        for k in 2..=8 {
            let m = multistage_rates(k, 1.0 / 3.0, eta).unwrap();
            ok &= m.lower_bound <= m.final_rate + 1e-12;
            ok &= m.final_rate < 0.5;
        }
    }
    report(
        10,
        "multistage-rates",
        ok,
        &format!("rates {rates:?} vs 1/3, 4/9, 13/27, 40/81; bounds dominate for eta in {{0, 0.01}}"),
    );
}

fn synthetic_population(seed: u64) -> (SampleBatch, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let population = isothresh::sim::draw_sample(
        &TestFunction::IsoSine,
        Psi::Uniform,
        1477,
        0.1,
        dom(),
        &mut rng,
    )
    .unwrap();
    (population, TestFunction::IsoSine.m(0.5))
}

#[test]
fn a11_population_emulation() {
    let tables = QuantileTables::embedded();
    // Table-shaped single run at budget 80 with a 50/50 split.
    let (population, theta0) = synthetic_population(40_000);
    let table = emulate_population(
        &population,
        theta0,
        80,
        0.5,
        &Procedure::ALL,
        &ProcedureConfig::default(),
        &tables,
        1,
    )
    .unwrap();
    let mut shape_ok = table.rows.len() == 5;
    for row in &table.rows {
        shape_ok &= row.error.is_none()
            && row.estimate.is_some()
            && row.bias.is_some()
            && row.covered.is_some()
            && row.length.is_some();
        if row.procedure.is_two_stage() {
            shape_ok &= row.n1 == 40 && row.n2 == Some(40);
        } else {
            shape_ok &= row.n1 == 80;
        }
    }

    // Coverage of each population's own truth across seeds and budgets.
    let seeds = 500u64;
    let budgets: Vec<usize> = (20..=100).step_by(10).collect();
    let mut covered = vec![0usize; budgets.len()];
    let mut completed = vec![0usize; budgets.len()];
    for s in 0..seeds {
        let (population, theta0) = synthetic_population(50_000 + s);
        for (bi, &budget) in budgets.iter().enumerate() {
            let rep = emulate_population(
                &population,
                theta0,
                budget,
                0.5,
                &[Procedure::TwoStageLr],
                &ProcedureConfig::default(),
                &tables,
                s,
            )
            .unwrap();
            match rep.rows[0].covered {
                Some(c) => {
                    completed[bi] += 1;
                    covered[bi] += c as usize;
                }
                None => {}
            }
        }
    }
    let mut cov_ok = true;
    let mut details = String::new();
    for (bi, &budget) in budgets.iter().enumerate() {
        let c = covered[bi] as f64 / completed[bi] as f64;
        let failures = seeds as usize - completed[bi];
        cov_ok &= c >= 0.90 && (failures as f64) <= 0.05 * seeds as f64;
        details.push_str(&format!("{budget}:{c:.2} "));
    }
    report(
        11,
        "population-emulation",
        shape_ok && cov_ok,
        &format!("allocations 40/40, two-stage-lr coverage by budget {details}"),
    );
}

#[test]
fn a12_two_stage_lr_is_faster_at_large_budgets() {
    let tables = QuantileTables::embedded();
    let mut config = CoverageConfig::new(vec![TestFunction::IsoSine], ACCEPT_SEED + 5);
    config.d0s = vec![0.5];
    config.sigmas = vec![0.1];
    config.ns = vec![400, 500];
    config.replicates = 300;
    config.procedures = vec![Procedure::OneStageLr, Procedure::TwoStageLr];
    let rep = coverage_experiment(&config, &tables).unwrap();
    let mut ok = true;
    let mut details = String::new();
    for &n in &[400usize, 500] {
        let one = rep
            .cells
            .iter()
            .find(|c| c.n == n && c.procedure == Procedure::OneStageLr)
            .unwrap();
        let two = rep
            .cells
            .iter()
            .find(|c| c.n == n && c.procedure == Procedure::TwoStageLr)
            .unwrap();
        ok &= two.mean_time_ms < one.mean_time_ms;
        details.push_str(&format!(
            "n={n}: {:.2}ms < {:.2}ms; ",
            two.mean_time_ms, one.mean_time_ms
        ));
    }
    report(12, "two-stage-lr-timing", ok, &details);
}

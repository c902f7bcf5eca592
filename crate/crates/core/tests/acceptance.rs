//! Acceptance checks, one line per criterion. Runs without the libtest
//! harness so every line is printed; exits nonzero if any check fails.

mod common;

use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::{convolution_pdf, ks_statistic, random_condition, simpson, trajectory_models};
use flash_channel::binning::{bin_masses, equal_probability_for_model, BinStrategy};
use flash_channel::channel_model::{bin_probability, level_distribution, sample_reads};
use flash_channel::estimation::{cost, gradient, solve, CostContext, SolverConfig, SolverKind};
use flash_channel::harness::{
    anchor_params, default_init, load_trajectory, run_binning_study, run_read_count_study, run_sweep, ExperimentSpec,
    ReferenceMode, TrajectoryPoint,
};
use flash_channel::{ChannelModel, ChannelParams, LevelLayout};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Check {
    name: &'static str,
    pass: bool,
    detail: String,
    elapsed: Duration,
}

fn run(name: &'static str, f: impl FnOnce() -> (bool, String)) -> Check {
    let start = Instant::now();
    let (pass, detail) = f();
    let c = Check {
        name,
        pass,
        detail,
        elapsed: start.elapsed(),
    };
    println!(
        "{} {:<28} {} [{:.2} s]",
        if c.pass { "PASS" } else { "FAIL" },
        c.name,
        c.detail,
        c.elapsed.as_secs_f64()
    );
    c
}

fn bundled_trajectory() -> Vec<TrajectoryPoint> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("data/synthetic_trajectory.json");
    load_trajectory(path).expect("bundled trajectory loads")
}

fn bundled_spec() -> ExperimentSpec {
    ExperimentSpec {
        trajectory: bundled_trajectory(),
        ..ExperimentSpec::default()
    }
}

fn within(limit_s: f64, start: Instant) -> bool {
    start.elapsed().as_secs_f64() < limit_s
}

fn parameter_recovery() -> (bool, String) {
    let start = Instant::now();
    let truth = anchor_params();
    let layout = LevelLayout::default();
    let model = ChannelModel::new(&truth, &layout).unwrap();
    let bins = equal_probability_for_model(&model, 10).unwrap();
    let ctx = CostContext::analytic(&truth, bins, layout).unwrap();
    let mut report = solve(SolverKind::Lm, &ctx, &default_init(), &SolverConfig::default()).unwrap();
    let recovered = report.score(&truth).unwrap();
    let worst = report
        .estimate
        .to_array()
        .iter()
        .zip(truth.to_array())
        .map(|(e, t)| ((e - t) / t).abs())
        .fold(0.0, f64::max);
    let fast = within(5.0, start);
    (
        recovered && fast,
        format!(
            "max relative error {worst:.1e} after {} iterations; limit 5 s",
            report.iterations
        ),
    )
}

fn table_trend() -> (bool, String) {
    let start = Instant::now();
    let spec = bundled_spec();
    let sweep = run_sweep(&spec).unwrap();
    let n = spec.trajectory.len();
    let gd = sweep.summary(SolverKind::Gd).unwrap();
    let gn = sweep.summary(SolverKind::Gn).unwrap();
    let lm = sweep.summary(SolverKind::Lm).unwrap();
    let fast = within(60.0, start);
    let pass = n == 14
        && gd.converged == 0
        && gd.at_max_iterations == n
        && lm.converged >= 11
        && gn.converged <= lm.converged
        && fast;
    (
        pass,
        format!(
            "GD {}/{n} ({} at max iterations), GN {}/{n}, LM {}/{n}; limit 60 s",
            gd.converged, gd.at_max_iterations, gn.converged, lm.converged
        ),
    )
}

fn binning_metrics() -> (bool, String) {
    let start = Instant::now();
    let spec = bundled_spec();
    let study = run_binning_study(&spec).unwrap();
    let mut worst_ratio: f64 = 0.0;
    let mut ok = spec.m == 10;
    let mut min_res = usize::MAX;
    for p in &spec.trajectory {
        let ep = study.row(p.pe_cycles, BinStrategy::EqualProbability).unwrap();
        let ew = study.row(p.pe_cycles, BinStrategy::EqualWidth).unwrap();
        worst_ratio = worst_ratio.max(ep.de2 / ew.de2);
        min_res = min_res.min(ep.effective_resolution);
        ok &= ep.de2 <= ew.de2 && ep.effective_resolution == 10;
    }
    let fast = within(30.0, start);
    (
        ok && fast,
        format!("worst ep/ew D_E^2 ratio {worst_ratio:.3}, min ep effective resolution {min_res}; limit 30 s"),
    )
}

fn read_count_trend() -> (bool, String) {
    let spec = ExperimentSpec {
        solvers: vec![SolverKind::Lm],
        study_bins: vec![7, 10, 13],
        ..bundled_spec()
    };
    let study = run_read_count_study(&spec).unwrap();
    let mean = |m: usize| {
        study
            .entry(m)
            .unwrap()
            .summary(SolverKind::Lm)
            .unwrap()
            .iteration_stats
            .as_ref()
            .unwrap()
            .mean
    };
    let (m7, m10, m13) = (mean(7), mean(10), mean(13));
    let improvement = (m10 - m13) / m10;
    (
        m10 <= m7 && improvement < 0.2,
        format!(
            "mean LM iterations M7 {m7:.1}, M10 {m10:.1}, M13 {m13:.1}; M13 improvement {:.1}%",
            100.0 * improvement
        ),
    )
}

fn normalization() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let (p, charge) = random_condition(&mut rng);
        let d = level_distribution(&p, charge, 0.0).unwrap();
        let (a, b) = (d.mu - 40.0 * d.sigma, d.mu + 40.0 * d.sigma + 60.0 * d.lambda);
        let n = ((b - a) / (d.sigma / 20.0)).ceil() as usize;
        worst = worst.max((simpson(|y| d.pdf(y), a, b, n) - 1.0).abs());
    }
    (
        worst < 1e-6,
        format!("max |integral - 1| {worst:.1e} over 1000 draws (limit 1e-6)"),
    )
}

fn convolution() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut worst: f64 = 0.0;
    let mut check = |p: &ChannelParams, charge: f64| {
        let d = level_distribution(p, charge, 0.0).unwrap();
        let (lo, hi) = (d.mean() - 8.0 * d.sigma, d.mean() + 8.0 * d.sigma + 8.0 * d.lambda);
        for i in 0..=40 {
            let y = lo + (hi - lo) * i as f64 / 40.0;
            let want = convolution_pdf(d.mu, d.sigma, d.lambda, y);
            worst = worst.max(((d.pdf(y) - want) / want).abs());
        }
    };
    for point in bundled_trajectory() {
        for x in LevelLayout::default().levels {
            check(&point.params, x);
        }
    }
    for _ in 0..200 {
        let (p, charge) = random_condition(&mut rng);
        check(&p, charge);
    }
    (worst < 1e-5, format!("max relative error {worst:.1e} (limit 1e-5)"))
}

fn kolmogorov_smirnov() -> (bool, String) {
    let model = common::anchor_model();
    let reads = sample_reads(model.params(), model.layout(), 103).unwrap();
    let mut ys: Vec<f64> = reads.iter().map(|r| r.y).collect();
    let n = ys.len();
    let d = ks_statistic(&mut ys, |y| model.cdf(y));
    let limit = 2.0 / (n as f64).sqrt();
    (
        d < limit && n == 1_000_000,
        format!("KS {d:.2e} at N = {n} (limit {limit:.1e})"),
    )
}

fn gradient_check() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let cfg = SolverConfig::default();
    let layout = LevelLayout::default();
    let mut worst: f64 = 0.0;
    for point in bundled_trajectory() {
        let model = ChannelModel::new(&point.params, &layout).unwrap();
        let bins = equal_probability_for_model(&model, 10).unwrap();
        let ctx = CostContext::analytic(&point.params, bins, layout.clone()).unwrap();
        let scaled: Vec<f64> = point
            .params
            .to_array()
            .iter()
            .map(|v| v * rng.random_range(0.8..1.2))
            .collect();
        let p = ChannelParams::from_slice(&scaled);
        let g = gradient(&p, &ctx, &cfg).unwrap();
        let base = p.to_array();
        let fd = DVector::from_iterator(
            5,
            (0..5).map(|j| {
                let h = 1e-4 * base[j].abs();
                let c = |d: f64| {
                    let mut q = base;
                    q[j] += d;
                    cost(&ChannelParams::from_array(q), &ctx).unwrap()
                };
                (c(-2.0 * h) - c(2.0 * h) + 8.0 * (c(h) - c(-h))) / (12.0 * h)
            }),
        );
        worst = worst.max((&g - &fd).norm() / fd.norm());
    }
    (
        worst < 1e-6,
        format!("max relative error {worst:.1e} over 14 conditions (limit 1e-6)"),
    )
}

fn equal_probability_masses() -> (bool, String) {
    let mut worst: f64 = 0.0;
    for (_, model) in trajectory_models() {
        for m in 2..=16 {
            let bins = equal_probability_for_model(&model, m).unwrap();
            for mass in bin_masses(&model, &bins) {
                worst = worst.max((mass - 1.0 / m as f64).abs());
            }
        }
    }
    (
        worst < 1e-6,
        format!("max |mass - 1/M| {worst:.1e}, M = 2..16 (limit 1e-6)"),
    )
}

fn additivity() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let (p, charge) = random_condition(&mut rng);
        let layout = LevelLayout::new(vec![0.0, charge.max(1e-3)], vec![1, 1]).unwrap();
        let a = rng.random_range(-3.0..5.0);
        let b = a + rng.random_range(1e-4..2.0);
        let c = b + rng.random_range(1e-4..2.0);
        for level in 0..2 {
            let whole = bin_probability(&p, &layout, level, a, c).unwrap();
            let split =
                bin_probability(&p, &layout, level, a, b).unwrap() + bin_probability(&p, &layout, level, b, c).unwrap();
            worst = worst.max((whole - split).abs());
        }
    }
    (
        worst < 1e-12,
        format!("max |P(a,c) - P(a,b) - P(b,c)| {worst:.1e} over 10000 draws (limit 1e-12)"),
    )
}

fn json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).unwrap()
}

fn determinism() -> (bool, String) {
    let base = bundled_spec();
    let mc = ExperimentSpec {
        reference_mode: ReferenceMode::MonteCarlo,
        seed: 7,
        solvers: vec![SolverKind::Lm],
        ..base.clone()
    };
    let mut mismatches = Vec::new();
    let mut compare = |what: &str, a: String, b: String| {
        if a != b {
            mismatches.push(what.to_string());
        }
    };
    compare(
        "sweep",
        json(&run_sweep(&base).unwrap()),
        json(&run_sweep(&base).unwrap()),
    );
    compare(
        "monte-carlo sweep",
        json(&run_sweep(&mc).unwrap()),
        json(&run_sweep(&mc).unwrap()),
    );
    compare(
        "binning study",
        json(&run_binning_study(&base).unwrap()),
        json(&run_binning_study(&base).unwrap()),
    );
    let rc = ExperimentSpec {
        solvers: vec![SolverKind::Lm],
        ..base.clone()
    };
    compare(
        "read-count study",
        json(&run_read_count_study(&rc).unwrap()),
        json(&run_read_count_study(&rc).unwrap()),
    );
    let seq = ExperimentSpec {
        execution: flash_channel::Execution::Sequential,
        ..mc.clone()
    };
    // the spec records the execution mode, so compare the results only
    let (p, s) = (run_sweep(&mc).unwrap(), run_sweep(&seq).unwrap());
    compare(
        "parallel vs sequential",
        json(&(&p.conditions, &p.summaries)),
        json(&(&s.conditions, &s.summaries)),
    );
    (
        mismatches.is_empty(),
        if mismatches.is_empty() {
            "repeated sweep, Monte-Carlo sweep, binning and read-count studies byte-identical; parallel = sequential"
                .into()
        } else {
            format!("differs: {}", mismatches.join(", "))
        },
    )
}

fn main() -> ExitCode {
    println!("acceptance criteria");
    let checks = [
        run("parameter recovery", parameter_recovery),
        run("solver comparison trend", table_trend),
        run("binning metrics", binning_metrics),
        run("read-count trend", read_count_trend),
        run("(a) pdf normalization", normalization),
        run("(b) convolution oracle", convolution),
        run("(c) sampler KS", kolmogorov_smirnov),
        run("(d) gradient vs differences", gradient_check),
        run("(e) equal-probability masses", equal_probability_masses),
        run("(f) bin additivity", additivity),
        run("determinism", determinism),
    ];
    let failed = checks.iter().filter(|c| !c.pass).count();
    println!("{} passed, {failed} failed", checks.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

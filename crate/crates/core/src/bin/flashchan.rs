use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::Value;

use flash_channel::binning::{
    discretization_error_for_model, effective_resolution_for_model, measure_reads, mmi_search, mutual_information,
    BinBoundaries, BinStrategy, Histogram, DEFAULT_MMI_GRID, DEFAULT_RESOLUTION_THRESHOLD,
};
use flash_channel::channel_model::{sample_reads_with, ChannelConfig, ChannelModel, ChannelParams, LevelLayout};
use flash_channel::estimation::{solve, CostContext, SolverConfig, SolverKind};
use flash_channel::harness::{
    anchor_params, default_init, emit_report, load_trajectory, run_binning_study, run_read_count_study, run_sweep,
    ExperimentSpec, ReferenceMode, Report, ReportFormat,
};
use flash_channel::Execution;

#[derive(Parser)]
#[command(
    name = "flashchan",
    version,
    about = "Flash read-channel simulation, binning and parameter estimation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample one read per cell; writes a histogram CSV when --bins is given,
    /// otherwise `level,y` rows.
    Simulate(SimulateArgs),
    /// Place read-voltage bins and print them as JSON.
    Bins(BinsArgs),
    /// Fit channel parameters to a histogram CSV.
    Estimate(EstimateArgs),
    /// Run the selected solvers at every trajectory condition.
    Sweep(ExperimentArgs),
    /// Discretization error and effective resolution of every bin strategy.
    BinningStudy(ExperimentArgs),
    /// Solver iteration statistics across bin counts.
    ReadCountStudy(ExperimentArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Strategy {
    EqualWidth,
    EqualProbability,
    Mmi,
}

impl From<Strategy> for BinStrategy {
    fn from(s: Strategy) -> Self {
        match s {
            Strategy::EqualWidth => BinStrategy::EqualWidth,
            Strategy::EqualProbability => BinStrategy::EqualProbability,
            Strategy::Mmi => BinStrategy::Mmi,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Solver {
    Gd,
    Gn,
    Lm,
}

impl From<Solver> for SolverKind {
    fn from(s: Solver) -> Self {
        match s {
            Solver::Gd => SolverKind::Gd,
            Solver::Gn => SolverKind::Gn,
            Solver::Lm => SolverKind::Lm,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Reference {
    Analytic,
    MonteCarlo,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Format {
    Json,
    Csv,
    Both,
}

/// Channel parameters and level layout. Unset values fall back to the
/// anchor condition and the default four-level layout.
#[derive(Args)]
struct ChannelArgs {
    /// JSON with keys lambda, sigma_p, sigma_e, gamma_sigma_r, gamma_mu_r,
    /// levels, counts. Keys present in the file override flags.
    #[arg(long)]
    channel: Option<PathBuf>,
    #[arg(long, allow_negative_numbers = true)]
    lambda: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    sigma_p: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    sigma_e: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    gamma_sigma_r: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    gamma_mu_r: Option<f64>,
    /// Intended thresholds, erased level first.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    levels: Option<Vec<f64>>,
    /// Per-level cell counts.
    #[arg(long, value_delimiter = ',', conflicts_with = "cells")]
    counts: Option<Vec<u64>>,
    /// Total cells, split evenly over the levels.
    #[arg(long)]
    cells: Option<u64>,
}

impl ChannelArgs {
    fn resolve(&self) -> Result<ChannelConfig> {
        let a = anchor_params();
        let params = ChannelParams::new(
            self.lambda.unwrap_or(a.lambda),
            self.sigma_p.unwrap_or(a.sigma_p),
            self.sigma_e.unwrap_or(a.sigma_e),
            self.gamma_sigma_r.unwrap_or(a.gamma_sigma_r),
            self.gamma_mu_r.unwrap_or(a.gamma_mu_r),
        );
        let default = LevelLayout::default();
        let default_total = default.total();
        let levels = self.levels.clone().unwrap_or(default.levels);
        let layout = match (&self.counts, self.cells) {
            (Some(c), _) => LevelLayout::new(levels, c.clone())?,
            (None, Some(n)) => LevelLayout::equal_counts(levels, n)?,
            (None, None) => LevelLayout::equal_counts(levels, default_total)?,
        };
        let mut value = serde_json::to_value(ChannelConfig { params, layout })?;
        if let Some(path) = &self.channel {
            merge(&mut value, read_json(path)?);
        }
        let cfg: ChannelConfig = serde_json::from_value(value).context("invalid channel configuration")?;
        cfg.params.validate()?;
        cfg.layout.validate()?;
        for w in cfg.params.warnings() {
            log::warn!("{w}");
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    channel: ChannelArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// BinBoundaries JSON; when given, reads are histogrammed.
    #[arg(long)]
    bins: Option<PathBuf>,
    /// Output file (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct BinsArgs {
    #[command(flatten)]
    channel: ChannelArgs,
    #[arg(long, value_enum, default_value = "equal-probability")]
    strategy: Strategy,
    /// Number of bins.
    #[arg(short = 'M', long = "bins", default_value_t = 10)]
    m: usize,
    #[arg(long, default_value_t = DEFAULT_MMI_GRID)]
    mmi_grid: usize,
    /// Also report D_E^2, effective resolution and mutual information on stderr.
    #[arg(long)]
    metrics: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EstimateArgs {
    /// Histogram CSV with rows bin_index,lo,hi,count.
    #[arg(long)]
    histogram: PathBuf,
    /// Layout and (optionally) the true parameters for scoring.
    #[command(flatten)]
    channel: ChannelArgs,
    #[arg(long, value_enum, default_value = "lm")]
    solver: Solver,
    /// Initial parameters as JSON (keys lambda, sigma_p, ...).
    #[arg(long)]
    init: Option<PathBuf>,
    /// SolverConfig JSON; unspecified keys keep their defaults.
    #[arg(long)]
    solver_config: Option<PathBuf>,
    /// Score the estimate against the channel parameters (±1 % rule).
    #[arg(long)]
    score: bool,
    /// SolverReport JSON output (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    /// One-row CSV summary.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct ExperimentArgs {
    /// ExperimentSpec JSON; keys present in the file override flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Trajectory JSON (array of {pe_cycles, lambda, sigma_p, sigma_e,
    /// gamma_sigma_r, gamma_mu_r}); defaults to the bundled synthetic one.
    #[arg(long)]
    trajectory: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    levels: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    counts: Option<Vec<u64>>,
    #[arg(long)]
    cells: Option<u64>,
    #[arg(long, value_enum)]
    strategy: Option<Strategy>,
    #[arg(short = 'M', long = "bins")]
    m: Option<usize>,
    #[arg(long, value_enum, value_delimiter = ',')]
    solvers: Option<Vec<Solver>>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    reference: Option<Reference>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    max_iterations: Option<usize>,
    #[arg(long)]
    lm_beta0: Option<f64>,
    #[arg(long)]
    lm_v: Option<f64>,
    #[arg(long)]
    mmi_grid: Option<usize>,
    #[arg(long)]
    resolution_threshold: Option<f64>,
    /// Bin counts for the read-count study.
    #[arg(long, value_delimiter = ',')]
    study_bins: Option<Vec<usize>>,
    #[arg(long)]
    sequential: bool,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    #[arg(long, value_enum, default_value = "both")]
    format: Format,
}

impl ExperimentArgs {
    fn spec(&self) -> Result<ExperimentSpec> {
        let mut spec = ExperimentSpec::default();
        if let Some(path) = &self.trajectory {
            spec.trajectory = load_trajectory(path)?;
        }
        if let Some(v) = &self.levels {
            spec.levels = v.clone();
        }
        if let Some(v) = &self.counts {
            spec.counts = Some(v.clone());
            spec.cells = v.iter().sum();
        }
        if let Some(v) = self.cells {
            spec.cells = v;
        }
        if let Some(v) = self.strategy {
            spec.bin_strategy = v.into();
        }
        if let Some(v) = self.m {
            spec.m = v;
        }
        if let Some(v) = &self.solvers {
            spec.solvers = v.iter().map(|&s| s.into()).collect();
        }
        if let Some(v) = self.seed {
            spec.seed = v;
        }
        if let Some(v) = self.reference {
            spec.reference_mode = match v {
                Reference::Analytic => ReferenceMode::Analytic,
                Reference::MonteCarlo => ReferenceMode::MonteCarlo,
            };
        }
        if let Some(v) = self.eta {
            spec.solver_config.eta = v;
        }
        if let Some(v) = self.max_iterations {
            spec.solver_config.max_iterations = v;
        }
        if let Some(v) = self.lm_beta0 {
            spec.solver_config.lm_beta0 = v;
        }
        if let Some(v) = self.lm_v {
            spec.solver_config.lm_v = v;
        }
        if let Some(v) = self.mmi_grid {
            spec.mmi_grid = v;
        }
        if let Some(v) = self.resolution_threshold {
            spec.resolution_threshold = v;
        }
        if let Some(v) = &self.study_bins {
            spec.study_bins = v.clone();
        }
        if self.sequential {
            spec.execution = Execution::Sequential;
        }
        if let Some(path) = &self.config {
            let mut value = serde_json::to_value(&spec)?;
            merge(&mut value, read_json(path)?);
            spec = serde_json::from_value(value)
                .with_context(|| format!("invalid experiment config {}", path.display()))?;
        }
        spec.validate()?;
        for p in &spec.trajectory {
            for w in p.params.warnings() {
                log::warn!("{} P/E: {w}", p.pe_cycles);
            }
        }
        Ok(spec)
    }

    fn emit<R: Report>(&self, report: &R, stem: &str) -> Result<()> {
        std::fs::create_dir_all(&self.out_dir).with_context(|| format!("creating {}", self.out_dir.display()))?;
        let mut written = Vec::new();
        if self.format != Format::Csv {
            written.extend(emit_report(
                report,
                ReportFormat::Json,
                &self.out_dir.join(format!("{stem}.json")),
            )?);
        }
        if self.format != Format::Json {
            written.extend(emit_report(
                report,
                ReportFormat::Csv,
                &self.out_dir.join(format!("{stem}.csv")),
            )?);
        }
        for p in written {
            eprintln!("wrote {}", p.display());
        }
        Ok(())
    }
}

fn read_json(path: &Path) -> Result<Value> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    serde_json::from_reader(BufReader::new(file)).with_context(|| format!("parsing {}", path.display()))
}

/// Overlays the top-level keys of `over` onto `base`.
fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                b.insert(k, v);
            }
        }
        (b, o) => *b = o,
    }
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(std::io::stdout().lock())),
    })
}

fn simulate(args: &SimulateArgs) -> Result<()> {
    let cfg = args.channel.resolve()?;
    let exec = if args.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    let reads = sample_reads_with(&cfg.params, &cfg.layout, args.seed, exec)?;
    let mut out = output(args.out.as_deref())?;
    match &args.bins {
        Some(path) => {
            let bins: BinBoundaries = serde_json::from_value(read_json(path)?)
                .with_context(|| format!("invalid bin boundaries in {}", path.display()))?;
            measure_reads(&reads, &bins).write_csv(&bins, &mut out)?;
        }
        None => {
            writeln!(out, "level,y")?;
            for r in &reads {
                writeln!(out, "{},{}", r.level, r.y)?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

fn bins(args: &BinsArgs) -> Result<()> {
    let cfg = args.channel.resolve()?;
    let model = ChannelModel::new(&cfg.params, &cfg.layout)?;
    let strategy: BinStrategy = args.strategy.into();
    let bins = match strategy {
        BinStrategy::Mmi => mmi_search(&model, args.m, args.mmi_grid, Execution::Parallel)?.bins,
        s => s.place(&model, args.m, Execution::Parallel)?,
    };
    if args.metrics {
        let metrics = serde_json::json!({
            "strategy": strategy.name(),
            "M": bins.m(),
            "de2": discretization_error_for_model(&model, &bins)?,
            "effective_resolution": effective_resolution_for_model(&model, &bins, DEFAULT_RESOLUTION_THRESHOLD)?,
            "mutual_information_bits": mutual_information(&model, &bins),
        });
        eprintln!("{metrics}");
    }
    let mut out = output(args.out.as_deref())?;
    serde_json::to_writer_pretty(&mut out, &bins)?;
    writeln!(out)?;
    out.flush()?;
    Ok(())
}

fn estimate(args: &EstimateArgs) -> Result<()> {
    let cfg = args.channel.resolve()?;
    let file = File::open(&args.histogram).with_context(|| format!("opening {}", args.histogram.display()))?;
    let (bins, hist) =
        Histogram::read_csv(BufReader::new(file)).with_context(|| format!("reading {}", args.histogram.display()))?;
    let ctx = CostContext::new(&hist, bins, cfg.layout.clone())?;
    let init: ChannelParams = match &args.init {
        Some(p) => serde_json::from_value(read_json(p)?).context("invalid init parameters")?,
        None => default_init(),
    };
    let solver_config: SolverConfig = match &args.solver_config {
        Some(p) => serde_json::from_value(read_json(p)?).context("invalid solver config")?,
        None => SolverConfig::default(),
    };
    let kind: SolverKind = args.solver.into();
    let mut report = solve(kind, &ctx, &init, &solver_config)?;
    if args.score {
        report.score(&cfg.params)?;
    }
    let mut out = output(args.out.as_deref())?;
    serde_json::to_writer_pretty(&mut out, &report)?;
    writeln!(out)?;
    out.flush()?;
    if let Some(path) = &args.csv {
        let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
        let mut header = vec![
            "solver",
            "iterations",
            "final_cost",
            "stopped_by_step",
            "within_one_percent",
            "clamp_events",
            "rejected_steps",
            "rank_deficient",
        ];
        header.extend(ChannelParams::NAMES);
        w.write_record(&header)?;
        let mut row = vec![
            kind.name().to_string(),
            report.iterations.to_string(),
            report.final_cost().to_string(),
            report.converged_by_step.to_string(),
            report.within_one_percent.map(|b| b.to_string()).unwrap_or_default(),
            report.clamp_events.to_string(),
            report.rejected_steps.to_string(),
            report.rank_deficient.to_string(),
        ];
        row.extend(report.estimate.to_array().map(|v| v.to_string()));
        w.write_record(&row)?;
        w.flush()?;
    }
    if let Some(f) = &report.failure {
        log::warn!("solver stopped early: {f}");
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match &cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Bins(a) => bins(a),
        Command::Estimate(a) => estimate(a),
        Command::Sweep(a) => {
            let report = run_sweep(&a.spec()?)?;
            for s in &report.summaries {
                println!(
                    "{}: {}/{} within 1%, {} at max iterations",
                    s.solver.name(),
                    s.converged,
                    s.conditions,
                    s.at_max_iterations
                );
            }
            a.emit(&report, "sweep")
        }
        Command::BinningStudy(a) => {
            let study = run_binning_study(&a.spec()?)?;
            println!("pe_cycles strategy de2 effective_resolution");
            for r in &study.rows {
                println!(
                    "{} {} {:.6e} {}",
                    r.pe_cycles,
                    r.strategy.name(),
                    r.de2,
                    r.effective_resolution
                );
            }
            a.emit(&study, "binning")
        }
        Command::ReadCountStudy(a) => {
            let study = run_read_count_study(&a.spec()?)?;
            for e in &study.entries {
                for s in &e.summaries {
                    if let Some(st) = &s.iteration_stats {
                        println!(
                            "reads {:>2} {}: converged {}/{} iterations min {} mean {:.1} max {} std {:.1}",
                            e.reads,
                            s.solver.name(),
                            s.converged,
                            s.conditions,
                            st.min,
                            st.mean,
                            st.max,
                            st.std
                        );
                    }
                }
            }
            if study.entries.is_empty() {
                bail!("no bin counts to study");
            }
            a.emit(&study, "read_count")
        }
    }
}

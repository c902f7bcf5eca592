//! Experiment runner: estimation sweeps over a P/E trajectory, the binning
//! study and the read-count study, plus their report emitters.

mod report;
mod trajectory;

pub use report::{emit_report, Report, ReportFormat, Table, SCHEMA_VERSION};
pub use trajectory::{
    anchor_params, default_init, load_trajectory, parse_trajectory, synthetic_trajectory, LoadedTrajectory,
    TrajectoryPoint, ANCHOR_PE,
};

use serde::{Deserialize, Serialize};

use crate::binning::{
    discretization_error_for_model, effective_resolution_for_model, equal_probability_for_model, equal_width_for_model,
    measure_reads, mmi_search, mutual_information, BinBoundaries, BinStrategy, DEFAULT_MMI_GRID,
    DEFAULT_RESOLUTION_THRESHOLD,
};
use crate::channel_model::{sample_reads_with, ChannelModel, ChannelParams, LevelLayout, DEFAULT_LEVELS};
use crate::error::{Error, Result};
use crate::estimation::{solve, CostContext, SolverConfig, SolverKind, SolverReport};
use crate::parallel::{map_indexed, Execution};

/// Where the reference histogram comes from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceMode {
    /// Expected counts under the condition's true parameters (noise free).
    #[default]
    Analytic,
    /// Counts from one simulated read of every cell.
    MonteCarlo,
}

/// Full description of an experiment. Every field has a default, so a JSON
/// config only needs the keys it changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub trajectory: Vec<TrajectoryPoint>,
    /// Intended thresholds; the first is the erased level.
    pub levels: Vec<f64>,
    /// Per-level cell counts. When absent, `cells` is split evenly.
    pub counts: Option<Vec<u64>>,
    pub cells: u64,
    pub bin_strategy: BinStrategy,
    /// Number of bins (reads + 1).
    #[serde(rename = "M", alias = "m")]
    pub m: usize,
    pub solvers: Vec<SolverKind>,
    pub solver_config: SolverConfig,
    pub init: ChannelParams,
    pub seed: u64,
    pub reference_mode: ReferenceMode,
    pub mmi_grid: usize,
    pub resolution_threshold: f64,
    /// Bin counts visited by the read-count study.
    pub study_bins: Vec<usize>,
    pub execution: Execution,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            trajectory: synthetic_trajectory(),
            levels: DEFAULT_LEVELS.to_vec(),
            counts: None,
            cells: 1_000_000,
            bin_strategy: BinStrategy::EqualProbability,
            m: 10,
            solvers: SolverKind::ALL.to_vec(),
            solver_config: SolverConfig::default(),
            init: default_init(),
            seed: 0,
            reference_mode: ReferenceMode::Analytic,
            mmi_grid: DEFAULT_MMI_GRID,
            resolution_threshold: DEFAULT_RESOLUTION_THRESHOLD,
            study_bins: vec![7, 10, 13],
            execution: Execution::default(),
        }
    }
}

impl ExperimentSpec {
    pub fn layout(&self) -> Result<LevelLayout> {
        let layout = match &self.counts {
            Some(counts) => {
                let layout = LevelLayout::new(self.levels.clone(), counts.clone())?;
                if layout.total() != self.cells {
                    return Err(Error::domain(format!(
                        "counts sum to {} but cells is {}",
                        layout.total(),
                        self.cells
                    )));
                }
                layout
            }
            None => LevelLayout::equal_counts(self.levels.clone(), self.cells)?,
        };
        if layout.total() == 0 {
            return Err(Error::domain("experiment needs at least one cell"));
        }
        Ok(layout)
    }

    pub fn validate(&self) -> Result<()> {
        if self.trajectory.is_empty() {
            return Err(Error::domain("trajectory is empty"));
        }
        for p in &self.trajectory {
            p.params
                .validate()
                .map_err(|e| Error::domain(format!("trajectory point at {} P/E: {e}", p.pe_cycles)))?;
        }
        self.layout()?;
        check_bins(self.m, self.bin_strategy, self.mmi_grid)?;
        for &m in &self.study_bins {
            check_bins(m, self.bin_strategy, self.mmi_grid)?;
        }
        if self.solvers.is_empty() {
            return Err(Error::domain("no solvers selected"));
        }
        self.solver_config.validate()?;
        self.init.validate().map_err(|e| Error::domain(format!("init: {e}")))?;
        if !(self.resolution_threshold > 0.0 && self.resolution_threshold < 1.0) {
            return Err(Error::domain("resolution_threshold must lie in (0, 1)"));
        }
        Ok(())
    }

    /// Random stream for one condition, independent of scheduling.
    pub fn condition_seed(&self, pe_cycles: u32) -> u64 {
        splitmix64(self.seed ^ splitmix64(u64::from(pe_cycles)))
    }

    fn place_bins(&self, model: &ChannelModel, strategy: BinStrategy, m: usize) -> Result<BinBoundaries> {
        match strategy {
            BinStrategy::EqualWidth => equal_width_for_model(model, m),
            BinStrategy::EqualProbability => equal_probability_for_model(model, m),
            BinStrategy::Mmi => Ok(mmi_search(model, m, self.mmi_grid, self.execution)?.bins),
        }
    }
}

fn check_bins(m: usize, strategy: BinStrategy, grid: usize) -> Result<()> {
    if m < 2 {
        return Err(Error::domain(format!("need at least 2 bins, got {m}")));
    }
    if strategy == BinStrategy::Mmi && grid < 10 * m {
        return Err(Error::domain(format!("mmi_grid {grid} is below 10 x {m} bins")));
    }
    Ok(())
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One solver run at one condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub solver: SolverKind,
    pub report: Option<SolverReport>,
    pub error: Option<String>,
}

impl RunResult {
    /// Final estimate within 1 % of the truth on every parameter.
    pub fn converged(&self) -> bool {
        self.report.as_ref().and_then(|r| r.within_one_percent) == Some(true)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionResult {
    pub pe_cycles: u32,
    pub truth: ChannelParams,
    pub seed: u64,
    pub bins: Option<BinBoundaries>,
    /// Reference counts per bin.
    pub reference: Vec<f64>,
    pub runs: Vec<RunResult>,
    /// Set when bins or reference could not be built; `runs` is then empty.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationStats {
    pub count: usize,
    pub min: usize,
    pub max: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl IterationStats {
    pub fn from_counts(iters: &[usize]) -> Option<Self> {
        let (&min, &max) = (iters.iter().min()?, iters.iter().max()?);
        let n = iters.len() as f64;
        let mean = iters.iter().sum::<usize>() as f64 / n;
        let var = iters.iter().map(|&i| (i as f64 - mean).powi(2)).sum::<f64>() / n;
        Some(Self {
            count: iters.len(),
            min,
            max,
            mean,
            std: var.sqrt(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverSummary {
    pub solver: SolverKind,
    pub conditions: usize,
    /// Final estimate within 1 % of the truth.
    pub converged: usize,
    pub stopped_by_step: usize,
    pub at_max_iterations: usize,
    pub failed: usize,
    /// Iteration count per condition, in trajectory order (failed runs omitted).
    pub iterations: Vec<usize>,
    pub iteration_stats: Option<IterationStats>,
}

fn summarize(spec: &ExperimentSpec, conditions: &[ConditionResult]) -> Vec<SolverSummary> {
    spec.solvers
        .iter()
        .map(|&solver| {
            let runs: Vec<&RunResult> = conditions
                .iter()
                .flat_map(|c| c.runs.iter().filter(move |r| r.solver == solver))
                .collect();
            let reports: Vec<&SolverReport> = runs.iter().filter_map(|r| r.report.as_ref()).collect();
            let iterations: Vec<usize> = reports.iter().map(|r| r.iterations).collect();
            SolverSummary {
                solver,
                conditions: conditions.len(),
                converged: runs.iter().filter(|r| r.converged()).count(),
                stopped_by_step: reports.iter().filter(|r| r.converged_by_step).count(),
                at_max_iterations: reports
                    .iter()
                    .filter(|r| r.hit_max_iterations(&spec.solver_config))
                    .count(),
                failed: conditions.len() - reports.len(),
                iteration_stats: IterationStats::from_counts(&iterations),
                iterations,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub schema_version: u32,
    pub spec: ExperimentSpec,
    pub conditions: Vec<ConditionResult>,
    pub summaries: Vec<SolverSummary>,
}

impl SweepReport {
    pub fn summary(&self, solver: SolverKind) -> Option<&SolverSummary> {
        self.summaries.iter().find(|s| s.solver == solver)
    }
}

/// Runs every selected solver at every trajectory condition.
///
/// Bins are placed from the condition's true parameters. Failures are
/// recorded per condition or per run and never abort the sweep.
pub fn run_sweep(spec: &ExperimentSpec) -> Result<SweepReport> {
    spec.validate()?;
    let layout = spec.layout()?;
    let conditions = map_indexed(spec.execution, spec.trajectory.len(), |i| {
        run_condition(spec, &layout, &spec.trajectory[i])
    });
    Ok(SweepReport {
        schema_version: SCHEMA_VERSION,
        summaries: summarize(spec, &conditions),
        spec: spec.clone(),
        conditions,
    })
}

fn run_condition(spec: &ExperimentSpec, layout: &LevelLayout, point: &TrajectoryPoint) -> ConditionResult {
    let seed = spec.condition_seed(point.pe_cycles);
    let mut result = ConditionResult {
        pe_cycles: point.pe_cycles,
        truth: point.params,
        seed,
        bins: None,
        reference: Vec::new(),
        runs: Vec::new(),
        error: None,
    };
    let ctx = match build_context(spec, layout, &point.params, seed) {
        Ok(ctx) => ctx,
        Err(e) => {
            log::warn!("{} P/E: {e}", point.pe_cycles);
            result.error = Some(e.to_string());
            return result;
        }
    };
    result.bins = Some(ctx.bins().clone());
    result.reference = ctx.reference().to_vec();
    for &solver in &spec.solvers {
        let run = match solve(solver, &ctx, &spec.init, &spec.solver_config) {
            Ok(mut report) => match report.score(&point.params) {
                Ok(_) => RunResult {
                    solver,
                    report: Some(report),
                    error: None,
                },
                Err(e) => RunResult {
                    solver,
                    report: Some(report),
                    error: Some(e.to_string()),
                },
            },
            Err(e) => RunResult {
                solver,
                report: None,
                error: Some(e.to_string()),
            },
        };
        log::debug!(
            "{} P/E {}: converged={} iterations={:?}",
            point.pe_cycles,
            solver.name(),
            run.converged(),
            run.report.as_ref().map(|r| r.iterations)
        );
        result.runs.push(run);
    }
    result
}

fn build_context(spec: &ExperimentSpec, layout: &LevelLayout, truth: &ChannelParams, seed: u64) -> Result<CostContext> {
    let model = ChannelModel::new(truth, layout)?;
    let bins = spec.place_bins(&model, spec.bin_strategy, spec.m)?;
    match spec.reference_mode {
        ReferenceMode::Analytic => CostContext::analytic(truth, bins, layout.clone()),
        ReferenceMode::MonteCarlo => {
            let reads = sample_reads_with(truth, layout, seed, spec.execution)?;
            let hist = measure_reads(&reads, &bins);
            CostContext::new(&hist, bins, layout.clone())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinningRow {
    pub pe_cycles: u32,
    pub strategy: BinStrategy,
    #[serde(rename = "M")]
    pub m: usize,
    /// Squared L2 distance between the read density and its histogram density.
    pub de2: f64,
    pub effective_resolution: usize,
    /// I(level; bin) in bits.
    pub mutual_information: f64,
    pub cuts: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinningStudy {
    pub schema_version: u32,
    pub spec: ExperimentSpec,
    pub rows: Vec<BinningRow>,
}

impl BinningStudy {
    pub fn row(&self, pe_cycles: u32, strategy: BinStrategy) -> Option<&BinningRow> {
        self.rows
            .iter()
            .find(|r| r.pe_cycles == pe_cycles && r.strategy == strategy)
    }
}

/// Discretization error and effective resolution of all three bin
/// strategies at every condition, with `spec.m` bins.
pub fn run_binning_study(spec: &ExperimentSpec) -> Result<BinningStudy> {
    spec.validate()?;
    let layout = spec.layout()?;
    let per_condition = map_indexed(spec.execution, spec.trajectory.len(), |i| {
        let point = &spec.trajectory[i];
        let model = ChannelModel::new(&point.params, &layout)?;
        BinStrategy::ALL
            .iter()
            .map(|&strategy| {
                let bins = spec.place_bins(&model, strategy, spec.m)?;
                Ok(BinningRow {
                    pe_cycles: point.pe_cycles,
                    strategy,
                    m: spec.m,
                    de2: discretization_error_for_model(&model, &bins)?,
                    effective_resolution: effective_resolution_for_model(&model, &bins, spec.resolution_threshold)?,
                    mutual_information: mutual_information(&model, &bins),
                    cuts: bins.cuts().to_vec(),
                })
            })
            .collect::<Result<Vec<_>>>()
    });
    let mut rows = Vec::new();
    for r in per_condition {
        rows.extend(r?);
    }
    Ok(BinningStudy {
        schema_version: SCHEMA_VERSION,
        spec: spec.clone(),
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReadCountEntry {
    #[serde(rename = "M")]
    pub m: usize,
    pub reads: usize,
    pub summaries: Vec<SolverSummary>,
}

impl ReadCountEntry {
    pub fn summary(&self, solver: SolverKind) -> Option<&SolverSummary> {
        self.summaries.iter().find(|s| s.solver == solver)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReadCountStudy {
    pub schema_version: u32,
    pub spec: ExperimentSpec,
    pub entries: Vec<ReadCountEntry>,
}

impl ReadCountStudy {
    pub fn entry(&self, m: usize) -> Option<&ReadCountEntry> {
        self.entries.iter().find(|e| e.m == m)
    }
}

/// Repeats the sweep for every bin count in `spec.study_bins`.
pub fn run_read_count_study(spec: &ExperimentSpec) -> Result<ReadCountStudy> {
    spec.validate()?;
    let entries = spec
        .study_bins
        .iter()
        .map(|&m| {
            let sub = ExperimentSpec { m, ..spec.clone() };
            let sweep = run_sweep(&sub)?;
            Ok(ReadCountEntry {
                m,
                reads: m - 1,
                summaries: sweep.summaries,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ReadCountStudy {
        schema_version: SCHEMA_VERSION,
        spec: spec.clone(),
        entries,
    })
}

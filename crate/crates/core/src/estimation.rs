//! Channel-parameter estimation from a reference histogram.
//!
//! The cost is the squared distance between the reference histogram and the
//! histogram the model predicts for a candidate parameter vector, both
//! normalized by the cell count:
//!
//! ```text
//! G_i(a) = (Nhat_i(a) - N_i) / N,   C(a) = |G(a)|^2,   grad C = 2 J^T G
//! ```
//!
//! Three iterative solvers minimize it: plain gradient descent, Gauss-Newton
//! (pseudo-inverse step) and Levenberg-Marquardt with Marquardt diagonal
//! damping and accept/reject control of the damping weight.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::binning::{BinBoundaries, Histogram};
use crate::channel_model::{level_distribution, ChannelParams, LevelLayout};
use crate::error::{Error, Result};

/// Lower bound applied to `lambda`, `sigma_p` and `sigma_e` during iteration.
pub const SCALE_FLOOR: f64 = 1e-9;

const LOWER_BOUNDS: [f64; 4] = [SCALE_FLOOR, SCALE_FLOOR, SCALE_FLOOR, 0.0];

/// A step that would cross a lower bound keeps this fraction of the current
/// distance to it. Landing exactly on `sigma_p = 0` or `gamma_sigma_r = 0`
/// zeroes a Jacobian column (sigma = hypot(sigma_p, sigma_r)), which leaves
/// the Marquardt-scaled normal equations singular.
pub const BOUNDARY_FRACTION: f64 = 0.5;

/// Everything the cost needs besides the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct CostContext {
    reference: Vec<f64>,
    total: f64,
    bins: BinBoundaries,
    layout: LevelLayout,
}

impl CostContext {
    /// Measured reference. Its total must equal the layout's cell count.
    pub fn new(reference: &Histogram, bins: BinBoundaries, layout: LevelLayout) -> Result<Self> {
        if reference.total != layout.total() {
            return Err(Error::domain(format!(
                "histogram holds {} cells but the layout has {}",
                reference.total,
                layout.total()
            )));
        }
        let counts = reference.counts.iter().map(|&c| c as f64).collect();
        Self::from_expected(counts, bins, layout)
    }

    /// Real-valued reference counts, e.g. noise-free expected counts.
    pub fn from_expected(reference: Vec<f64>, bins: BinBoundaries, layout: LevelLayout) -> Result<Self> {
        layout.validate()?;
        if reference.len() != bins.m() {
            return Err(Error::domain(format!(
                "reference has {} bins, boundaries define {}",
                reference.len(),
                bins.m()
            )));
        }
        let total = layout.total() as f64;
        if total <= 0.0 {
            return Err(Error::domain("layout holds no cells"));
        }
        if reference.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
            return Err(Error::domain("reference counts must be finite and non-negative"));
        }
        let sum: f64 = reference.iter().sum();
        if (sum - total).abs() > 1e-6 * total {
            return Err(Error::domain(format!(
                "reference sums to {sum}, layout has {total} cells"
            )));
        }
        Ok(Self {
            reference,
            total,
            bins,
            layout,
        })
    }

    /// Noise-free reference: the expected counts under `truth`.
    pub fn analytic(truth: &ChannelParams, bins: BinBoundaries, layout: LevelLayout) -> Result<Self> {
        let expected = expected_counts(truth, &bins, &layout)?;
        Self::from_expected(expected, bins, layout)
    }

    pub fn reference(&self) -> &[f64] {
        &self.reference
    }

    pub fn bins(&self) -> &BinBoundaries {
        &self.bins
    }

    pub fn layout(&self) -> &LevelLayout {
        &self.layout
    }

    pub fn total(&self) -> f64 {
        self.total
    }
}

fn expected_counts(params: &ChannelParams, bins: &BinBoundaries, layout: &LevelLayout) -> Result<Vec<f64>> {
    let x0 = layout.erased();
    let mut out = vec![0.0; bins.m()];
    for (&x, &n) in layout.levels.iter().zip(&layout.counts) {
        if n == 0 {
            continue;
        }
        let d = level_distribution(params, x, x0)?;
        for (slot, (lo, hi)) in out.iter_mut().zip(bins.iter_edges()) {
            *slot += n as f64 * d.interval_probability(lo, hi);
        }
    }
    Ok(out)
}

/// Predicted per-bin cell counts `Nhat_i = sum_k N_k P(q_i < y < q_{i+1} | x_k)`.
pub fn estimated_bin_counts(params: &ChannelParams, ctx: &CostContext) -> Result<Vec<f64>> {
    expected_counts(params, &ctx.bins, &ctx.layout)
}

/// `G_i = (Nhat_i - N_i) / N`.
pub fn residual_vector(params: &ChannelParams, ctx: &CostContext) -> Result<DVector<f64>> {
    let est = estimated_bin_counts(params, ctx)?;
    Ok(DVector::from_iterator(
        est.len(),
        est.iter().zip(&ctx.reference).map(|(e, r)| (e - r) / ctx.total),
    ))
}

pub fn cost(params: &ChannelParams, ctx: &CostContext) -> Result<f64> {
    Ok(residual_vector(params, ctx)?.norm_squared())
}

/// Central-difference Jacobian of the residual vector (M x 5).
///
/// Coordinates whose backward step would leave the valid region fall back to
/// a forward difference.
pub fn jacobian(params: &ChannelParams, ctx: &CostContext, config: &SolverConfig) -> Result<DMatrix<f64>> {
    let p = params.to_array();
    let mut jac = DMatrix::zeros(ctx.bins.m(), ChannelParams::DIM);
    let mut base = None;
    for j in 0..ChannelParams::DIM {
        let h = (config.fd_step_rel * p[j].abs()).max(config.fd_step_abs);
        let mut up = p;
        up[j] += h;
        let r_up = residual_vector(&ChannelParams::from_array(up), ctx)?;
        let mut down = p;
        down[j] -= h;
        let col = if backward_step_valid(j, down[j]) {
            let r_down = residual_vector(&ChannelParams::from_array(down), ctx)?;
            (r_up - r_down) / (2.0 * h)
        } else {
            if base.is_none() {
                base = Some(residual_vector(params, ctx)?);
            }
            (r_up - base.as_ref().expect("set above")) / h
        };
        jac.set_column(j, &col);
    }
    Ok(jac)
}

fn backward_step_valid(j: usize, v: f64) -> bool {
    match j {
        0..=2 => v > 0.0,
        3 => v >= 0.0,
        _ => true,
    }
}

/// `grad C = 2 J^T G`.
pub fn gradient(params: &ChannelParams, ctx: &CostContext, config: &SolverConfig) -> Result<DVector<f64>> {
    let j = jacobian(params, ctx, config)?;
    let g = residual_vector(params, ctx)?;
    Ok(2.0 * j.transpose() * g)
}

/// `true` iff every component is within 1 % of the (nonzero) truth.
pub fn check_convergence(estimate: &ChannelParams, truth: &ChannelParams) -> Result<bool> {
    let est = estimate.to_array();
    let tru = truth.to_array();
    if let Some(j) = tru.iter().position(|&t| t == 0.0) {
        return Err(Error::domain(format!(
            "truth component {} is zero; relative tolerance undefined",
            ChannelParams::NAMES[j]
        )));
    }
    Ok(est.iter().zip(&tru).all(|(e, t)| (e - t).abs() <= 0.01 * t.abs()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    Gd,
    Gn,
    Lm,
}

impl SolverKind {
    pub const ALL: [SolverKind; 3] = [SolverKind::Gd, SolverKind::Gn, SolverKind::Lm];

    pub fn name(self) -> &'static str {
        match self {
            SolverKind::Gd => "gd",
            SolverKind::Gn => "gn",
            SolverKind::Lm => "lm",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// Stop once the parameter step norm is at most this.
    pub eta: f64,
    pub max_iterations: usize,
    /// Gradient-descent step size; halved whenever a step would raise the cost.
    pub gd_step: f64,
    pub lm_beta0: f64,
    /// Damping multiplier on acceptance (divisor on rejection), in (0, 1).
    pub lm_v: f64,
    pub fd_step_rel: f64,
    pub fd_step_abs: f64,
    /// Recompute the Jacobian after every LM solve, accepted or not.
    pub lm_always_recompute: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            eta: 1e-8,
            max_iterations: 500,
            gd_step: 1e-2,
            lm_beta0: 1e-2,
            lm_v: 0.1,
            fd_step_rel: 1e-5,
            fd_step_abs: 1e-9,
            lm_always_recompute: false,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) {
            return Err(Error::domain("eta must be > 0"));
        }
        if self.max_iterations < 1 {
            return Err(Error::domain("max_iterations must be >= 1"));
        }
        if !(self.lm_v > 0.0 && self.lm_v < 1.0) {
            return Err(Error::domain("lm_v must lie in (0, 1)"));
        }
        if !(self.gd_step > 0.0) {
            return Err(Error::domain("gd_step must be > 0"));
        }
        if !(self.lm_beta0 > 0.0) {
            return Err(Error::domain("lm_beta0 must be > 0"));
        }
        if !(self.fd_step_rel > 0.0 && self.fd_step_abs > 0.0) {
            return Err(Error::domain("finite-difference steps must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverReport {
    pub solver: SolverKind,
    pub estimate: ChannelParams,
    pub iterations: usize,
    /// Cost at the start and after every iteration.
    pub cost_trace: Vec<f64>,
    /// Norm of every proposed parameter step. LM omits iterations whose
    /// damped system could not be factorized.
    pub step_trace: Vec<f64>,
    pub converged_by_step: bool,
    pub within_one_percent: Option<bool>,
    /// Iterates pulled back into the valid parameter region.
    pub clamp_events: usize,
    /// LM: proposals rejected for not lowering the cost. GD: halvings.
    pub rejected_steps: usize,
    /// GN: a pseudo-inverse with dropped singular values was used.
    pub rank_deficient: bool,
    pub failure: Option<String>,
}

impl SolverReport {
    pub fn final_cost(&self) -> f64 {
        *self.cost_trace.last().expect("cost trace is never empty")
    }

    pub fn hit_max_iterations(&self, config: &SolverConfig) -> bool {
        !self.converged_by_step && self.iterations >= config.max_iterations
    }

    /// Fills `within_one_percent` against a known truth.
    pub fn score(&mut self, truth: &ChannelParams) -> Result<bool> {
        let ok = check_convergence(&self.estimate, truth)?;
        self.within_one_percent = Some(ok);
        Ok(ok)
    }
}

/// Residual model seen by the solvers.
pub trait LeastSquaresProblem {
    fn dim(&self) -> usize;
    fn residuals(&self, p: &DVector<f64>) -> Result<DVector<f64>>;
    fn jacobian(&self, p: &DVector<f64>) -> Result<DMatrix<f64>>;

    /// Pulls a proposed iterate `cand` back into the feasible set, given the
    /// current feasible iterate. Returns whether anything moved.
    fn project(&self, _current: &DVector<f64>, _cand: &mut DVector<f64>) -> bool {
        false
    }

    fn cost(&self, p: &DVector<f64>) -> Result<f64> {
        Ok(self.residuals(p)?.norm_squared())
    }
}

struct ChannelProblem<'a> {
    ctx: &'a CostContext,
    config: &'a SolverConfig,
}

impl LeastSquaresProblem for ChannelProblem<'_> {
    fn dim(&self) -> usize {
        ChannelParams::DIM
    }

    fn residuals(&self, p: &DVector<f64>) -> Result<DVector<f64>> {
        residual_vector(&ChannelParams::from_slice(p.as_slice()), self.ctx)
    }

    fn jacobian(&self, p: &DVector<f64>) -> Result<DMatrix<f64>> {
        jacobian(&ChannelParams::from_slice(p.as_slice()), self.ctx, self.config)
    }

    fn project(&self, current: &DVector<f64>, cand: &mut DVector<f64>) -> bool {
        let mut moved = false;
        for (j, floor) in LOWER_BOUNDS.iter().enumerate() {
            if !(cand[j] >= *floor) {
                cand[j] = floor + BOUNDARY_FRACTION * (current[j] - floor);
                moved = true;
            }
        }
        moved
    }
}

/// Outcome of a generic solver run.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub estimate: DVector<f64>,
    pub iterations: usize,
    pub cost_trace: Vec<f64>,
    pub step_trace: Vec<f64>,
    pub converged_by_step: bool,
    pub clamp_events: usize,
    pub rejected_steps: usize,
    pub rank_deficient: bool,
    pub failure: Option<String>,
}

impl Trace {
    fn start(init: DVector<f64>, cost: f64) -> Self {
        Self {
            estimate: init,
            iterations: 0,
            cost_trace: vec![cost],
            step_trace: Vec::new(),
            converged_by_step: false,
            clamp_events: 0,
            rejected_steps: 0,
            rank_deficient: false,
            failure: None,
        }
    }

    fn into_report(self, solver: SolverKind) -> SolverReport {
        SolverReport {
            solver,
            estimate: ChannelParams::from_slice(self.estimate.as_slice()),
            iterations: self.iterations,
            cost_trace: self.cost_trace,
            step_trace: self.step_trace,
            converged_by_step: self.converged_by_step,
            within_one_percent: None,
            clamp_events: self.clamp_events,
            rejected_steps: self.rejected_steps,
            rank_deficient: self.rank_deficient,
            failure: self.failure,
        }
    }
}

fn finite(v: &DVector<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Gradient descent; a step that would raise the cost is dropped and the
/// step size halved.
pub fn gradient_descent<P: LeastSquaresProblem>(
    problem: &P,
    init: DVector<f64>,
    config: &SolverConfig,
) -> Result<Trace> {
    config.validate()?;
    let mut alpha = init;
    let mut cost = problem.cost(&alpha)?;
    let mut trace = Trace::start(alpha.clone(), cost);
    let mut beta = config.gd_step;
    for k in 0..config.max_iterations {
        let g = problem.residuals(&alpha)?;
        let j = problem.jacobian(&alpha)?;
        let grad = 2.0 * j.transpose() * g;
        let mut cand = &alpha - beta * grad;
        if problem.project(&alpha, &mut cand) {
            trace.clamp_events += 1;
        }
        let step = (&cand - &alpha).norm();
        trace.iterations = k + 1;
        trace.step_trace.push(step);
        let cand_cost = if finite(&cand) {
            problem.cost(&cand)?
        } else {
            f64::INFINITY
        };
        if cand_cost <= cost {
            alpha = cand;
            cost = cand_cost;
        } else {
            beta *= 0.5;
            trace.rejected_steps += 1;
        }
        trace.cost_trace.push(cost);
        if step <= config.eta {
            trace.converged_by_step = true;
            break;
        }
    }
    trace.estimate = alpha;
    Ok(trace)
}

/// Minimum-norm least-squares step `J^+ G`; the flag reports dropped
/// singular values.
pub fn gauss_newton_step(j: &DMatrix<f64>, g: &DVector<f64>) -> Result<(DVector<f64>, bool)> {
    let svd = j.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let eps = smax * (j.nrows().max(j.ncols()) as f64) * f64::EPSILON;
    let rank_deficient = smax == 0.0 || svd.singular_values.iter().any(|&s| s <= eps);
    let step = svd.solve(g, eps).map_err(|e| Error::Numeric {
        routine: "gauss_newton_step",
        detail: e.to_string(),
    })?;
    Ok((step, rank_deficient))
}

/// Undamped Gauss-Newton: `a <- a - J^+ G`.
pub fn gauss_newton<P: LeastSquaresProblem>(problem: &P, init: DVector<f64>, config: &SolverConfig) -> Result<Trace> {
    config.validate()?;
    let mut alpha = init;
    let cost = problem.cost(&alpha)?;
    let mut trace = Trace::start(alpha.clone(), cost);
    for k in 0..config.max_iterations {
        let g = problem.residuals(&alpha)?;
        let j = problem.jacobian(&alpha)?;
        let (delta, deficient) = match gauss_newton_step(&j, &g) {
            Ok(s) => s,
            Err(e) => {
                trace.failure = Some(e.to_string());
                break;
            }
        };
        trace.rank_deficient |= deficient;
        let mut cand = &alpha - delta;
        if !finite(&cand) {
            trace.failure = Some(format!("non-finite iterate at iteration {}", k + 1));
            break;
        }
        if problem.project(&alpha, &mut cand) {
            trace.clamp_events += 1;
        }
        let step = (&cand - &alpha).norm();
        alpha = cand;
        trace.iterations = k + 1;
        trace.step_trace.push(step);
        trace.cost_trace.push(problem.cost(&alpha)?);
        if step <= config.eta {
            trace.converged_by_step = true;
            break;
        }
    }
    trace.estimate = alpha;
    Ok(trace)
}

/// Solves `(J^T J + beta diag(J^T J)) delta = J^T G` by Cholesky.
pub fn levenberg_marquardt_step(j: &DMatrix<f64>, g: &DVector<f64>, beta: f64) -> Option<DVector<f64>> {
    let jtj = j.transpose() * j;
    let mut a = jtj.clone();
    for i in 0..a.nrows() {
        a[(i, i)] += beta * jtj[(i, i)];
    }
    let rhs = j.transpose() * g;
    let delta = a.cholesky()?.solve(&rhs);
    finite(&delta).then_some(delta)
}

/// Levenberg-Marquardt with Marquardt scaling.
///
/// A proposal that does not raise the squared residual is accepted and the
/// damping shrinks by `v`; otherwise it is rejected, the damping grows by
/// `1/v` and the previous Jacobian is reused. A failed normal-equation solve
/// counts as a rejection.
pub fn levenberg_marquardt<P: LeastSquaresProblem>(
    problem: &P,
    init: DVector<f64>,
    config: &SolverConfig,
) -> Result<Trace> {
    config.validate()?;
    let mut alpha = init;
    let mut g = problem.residuals(&alpha)?;
    let mut cost = g.norm_squared();
    let mut trace = Trace::start(alpha.clone(), cost);
    let mut beta = config.lm_beta0;
    let mut jac = problem.jacobian(&alpha)?;
    let mut update = false;
    for k in 0..config.max_iterations {
        if update || (config.lm_always_recompute && k > 0) {
            jac = problem.jacobian(&alpha)?;
            g = problem.residuals(&alpha)?;
        }
        trace.iterations = k + 1;
        let Some(delta) = levenberg_marquardt_step(&jac, &g, beta) else {
            update = false;
            beta /= config.lm_v;
            trace.rejected_steps += 1;
            trace.cost_trace.push(cost);
            continue;
        };
        let mut cand = &alpha - delta;
        if problem.project(&alpha, &mut cand) {
            trace.clamp_events += 1;
        }
        let step = (&cand - &alpha).norm();
        trace.step_trace.push(step);
        let cand_cost = problem.cost(&cand)?;
        if cand_cost <= cost {
            update = true;
            beta *= config.lm_v;
            alpha = cand;
            cost = cand_cost;
        } else {
            update = false;
            beta /= config.lm_v;
            trace.rejected_steps += 1;
        }
        trace.cost_trace.push(cost);
        if step <= config.eta {
            trace.converged_by_step = true;
            break;
        }
    }
    trace.estimate = alpha;
    Ok(trace)
}

fn channel_solve(
    kind: SolverKind,
    ctx: &CostContext,
    init: &ChannelParams,
    config: &SolverConfig,
) -> Result<SolverReport> {
    init.validate()?;
    config.validate()?;
    let problem = ChannelProblem { ctx, config };
    let start = DVector::from_row_slice(&init.to_array());
    let trace = match kind {
        SolverKind::Gd => gradient_descent(&problem, start, config)?,
        SolverKind::Gn => gauss_newton(&problem, start, config)?,
        SolverKind::Lm => levenberg_marquardt(&problem, start, config)?,
    };
    Ok(trace.into_report(kind))
}

pub fn solve_gd(ctx: &CostContext, init: &ChannelParams, config: &SolverConfig) -> Result<SolverReport> {
    channel_solve(SolverKind::Gd, ctx, init, config)
}

pub fn solve_gn(ctx: &CostContext, init: &ChannelParams, config: &SolverConfig) -> Result<SolverReport> {
    channel_solve(SolverKind::Gn, ctx, init, config)
}

pub fn solve_lm(ctx: &CostContext, init: &ChannelParams, config: &SolverConfig) -> Result<SolverReport> {
    channel_solve(SolverKind::Lm, ctx, init, config)
}

pub fn solve(kind: SolverKind, ctx: &CostContext, init: &ChannelParams, config: &SolverConfig) -> Result<SolverReport> {
    channel_solve(kind, ctx, init, config)
}

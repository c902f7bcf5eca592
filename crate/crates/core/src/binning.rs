//! Read-voltage bin placement and histogram-quality metrics.
//!
//! `M` bins need `M - 1` reads. The outer bins are semi-infinite, so a
//! boundary set is stored as its finite interior cuts only.

use std::io::{Read as IoRead, Write};

use serde::{Deserialize, Serialize};

use crate::channel_model::{ChannelModel, ChannelParams, LevelLayout, Read};
use crate::error::{Error, Result};
use crate::parallel::{map_indexed, Execution};

/// Mixture tail mass outside the equal-width support when none is given.
pub const EQUAL_WIDTH_TAIL: f64 = 1e-4;
/// Mixture tail mass at which the semi-infinite edge bins are truncated for
/// the discretization-error integral.
pub const DE2_TRUNCATION_TAIL: f64 = 1e-9;
/// Mixture tail mass outside the MMI candidate grid.
pub const MMI_GRID_TAIL: f64 = 1e-6;
pub const DEFAULT_MMI_GRID: usize = 2000;
/// Probability below which adjacent bins count as one for effective resolution.
pub const DEFAULT_RESOLUTION_THRESHOLD: f64 = 1e-4;

const SIMPSON_TOL: f64 = 1e-10;
const SIMPSON_PANELS: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BoundariesRepr", into = "BoundariesRepr")]
pub struct BinBoundaries {
    cuts: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct BoundariesRepr {
    cuts: Vec<f64>,
    #[serde(rename = "M")]
    m: usize,
}

impl TryFrom<BoundariesRepr> for BinBoundaries {
    type Error = Error;

    fn try_from(r: BoundariesRepr) -> Result<Self> {
        if r.m != r.cuts.len() + 1 {
            return Err(Error::domain(format!(
                "M = {} does not match {} cuts",
                r.m,
                r.cuts.len()
            )));
        }
        BinBoundaries::new(r.cuts)
    }
}

impl From<BinBoundaries> for BoundariesRepr {
    fn from(b: BinBoundaries) -> Self {
        let m = b.m();
        BoundariesRepr { cuts: b.cuts, m }
    }
}

impl BinBoundaries {
    /// Interior cuts; must be finite and strictly increasing. An empty list is
    /// the single all-covering bin.
    pub fn new(cuts: Vec<f64>) -> Result<Self> {
        if cuts.iter().any(|c| !c.is_finite()) {
            return Err(Error::domain("bin cuts must be finite"));
        }
        if cuts.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::domain("bin cuts must be strictly increasing"));
        }
        Ok(Self { cuts })
    }

    pub fn cuts(&self) -> &[f64] {
        &self.cuts
    }

    /// Number of bins.
    pub fn m(&self) -> usize {
        self.cuts.len() + 1
    }

    /// `(q_i, q_{i+1})` including the infinite outer edges.
    pub fn edges(&self, i: usize) -> (f64, f64) {
        let lo = if i == 0 { f64::NEG_INFINITY } else { self.cuts[i - 1] };
        let hi = if i == self.cuts.len() {
            f64::INFINITY
        } else {
            self.cuts[i]
        };
        (lo, hi)
    }

    pub fn iter_edges(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        (0..self.m()).map(|i| self.edges(i))
    }

    /// Index of the bin with `q_i < y <= q_{i+1}`.
    pub fn bin_of(&self, y: f64) -> usize {
        self.cuts.partition_point(|&c| c < y)
    }
}

/// Measured per-bin cell counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Histogram {
    pub counts: Vec<u64>,
    pub total: u64,
}

impl Histogram {
    pub fn new(counts: Vec<u64>) -> Self {
        let total = counts.iter().sum();
        Self { counts, total }
    }

    pub fn m(&self) -> usize {
        self.counts.len()
    }

    /// CSV rows `bin_index,lo,hi,count`; infinite edges are written as
    /// `-inf` / `inf`.
    pub fn write_csv<W: Write>(&self, bins: &BinBoundaries, out: W) -> Result<()> {
        if bins.m() != self.m() {
            return Err(Error::domain("histogram and bins disagree on M"));
        }
        let mut w = csv::Writer::from_writer(out);
        let wrap = |e: csv::Error| Error::Parse {
            source_name: "histogram csv".into(),
            detail: e.to_string(),
        };
        w.write_record(["bin_index", "lo", "hi", "count"]).map_err(wrap)?;
        for (i, &c) in self.counts.iter().enumerate() {
            let (lo, hi) = bins.edges(i);
            w.write_record([i.to_string(), fmt_edge(lo), fmt_edge(hi), c.to_string()])
                .map_err(wrap)?;
        }
        w.flush().map_err(|e| Error::Parse {
            source_name: "histogram csv".into(),
            detail: e.to_string(),
        })?;
        Ok(())
    }

    pub fn read_csv<R: IoRead>(input: R) -> Result<(BinBoundaries, Histogram)> {
        #[derive(Deserialize)]
        struct Row {
            bin_index: usize,
            lo: String,
            hi: String,
            count: u64,
        }
        let mut rdr = csv::Reader::from_reader(input);
        let mut cuts = Vec::new();
        let mut counts = Vec::new();
        for (line, rec) in rdr.deserialize::<Row>().enumerate() {
            let perr = |detail: String| Error::Parse {
                source_name: "histogram csv".into(),
                detail: format!("row {}: {detail}", line + 1),
            };
            let row = rec.map_err(|e| perr(e.to_string()))?;
            if row.bin_index != line {
                return Err(perr(format!("expected bin_index {line}, got {}", row.bin_index)));
            }
            let lo = parse_edge(&row.lo).map_err(&perr)?;
            let hi = parse_edge(&row.hi).map_err(&perr)?;
            if line == 0 && lo != f64::NEG_INFINITY {
                return Err(perr("first bin must start at -inf".into()));
            }
            if line > 0 && Some(&lo) != cuts.last() {
                return Err(perr("bins are not contiguous".into()));
            }
            if hi.is_finite() {
                cuts.push(hi);
            }
            counts.push(row.count);
        }
        if counts.is_empty() {
            return Err(Error::Parse {
                source_name: "histogram csv".into(),
                detail: "no rows".into(),
            });
        }
        if cuts.len() + 1 != counts.len() {
            return Err(Error::Parse {
                source_name: "histogram csv".into(),
                detail: "last bin must end at inf".into(),
            });
        }
        Ok((BinBoundaries::new(cuts)?, Histogram::new(counts)))
    }
}

fn fmt_edge(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{v:?}")
    }
}

fn parse_edge(s: &str) -> std::result::Result<f64, String> {
    match s.trim() {
        "inf" | "+inf" => Ok(f64::INFINITY),
        "-inf" => Ok(f64::NEG_INFINITY),
        t => t.parse().map_err(|_| format!("bad bin edge {t:?}")),
    }
}

/// Bin-placement paradigm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinStrategy {
    EqualWidth,
    EqualProbability,
    Mmi,
}

impl BinStrategy {
    pub const ALL: [BinStrategy; 3] = [BinStrategy::EqualWidth, BinStrategy::EqualProbability, BinStrategy::Mmi];

    pub fn name(self) -> &'static str {
        match self {
            BinStrategy::EqualWidth => "equal_width",
            BinStrategy::EqualProbability => "equal_probability",
            BinStrategy::Mmi => "mmi",
        }
    }

    /// Places `m` bins for the channel described by `model`.
    pub fn place(self, model: &ChannelModel, m: usize, exec: Execution) -> Result<BinBoundaries> {
        match self {
            BinStrategy::EqualWidth => equal_width_for_model(model, m),
            BinStrategy::EqualProbability => equal_probability_for_model(model, m),
            BinStrategy::Mmi => Ok(mmi_search(model, m, DEFAULT_MMI_GRID, exec)?.bins),
        }
    }
}

fn check_bin_count(m: usize) -> Result<()> {
    if m < 2 {
        return Err(Error::domain(format!("need at least 2 bins, got {m}")));
    }
    Ok(())
}

/// `m - 1` evenly spaced cuts across `[lo, hi]`.
pub fn equal_width_bins(lo: f64, hi: f64, m: usize) -> Result<BinBoundaries> {
    check_bin_count(m)?;
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(Error::domain(format!("bad support [{lo}, {hi}]")));
    }
    let step = (hi - lo) / m as f64;
    BinBoundaries::new((1..m).map(|i| lo + step * i as f64).collect())
}

/// Equal-width bins over the central `1 - 2e-4` of the mixture.
pub fn equal_width_for_model(model: &ChannelModel, m: usize) -> Result<BinBoundaries> {
    check_bin_count(m)?;
    let lo = model.quantile(EQUAL_WIDTH_TAIL)?;
    let hi = model.upper_quantile(EQUAL_WIDTH_TAIL)?;
    equal_width_bins(lo, hi, m)
}

/// Cuts at the `i/m` quantiles of the model mixture.
pub fn equal_probability_bins(params: &ChannelParams, layout: &LevelLayout, m: usize) -> Result<BinBoundaries> {
    equal_probability_for_model(&ChannelModel::new(params, layout)?, m)
}

pub fn equal_probability_for_model(model: &ChannelModel, m: usize) -> Result<BinBoundaries> {
    check_bin_count(m)?;
    let cuts = (1..m)
        .map(|i| model.quantile(i as f64 / m as f64))
        .collect::<Result<Vec<_>>>()?;
    BinBoundaries::new(cuts).map_err(|e| Error::Numeric {
        routine: "equal_probability_bins",
        detail: format!("quantiles collapsed: {e}"),
    })
}

/// Mutual information (bits) between the written level and the bin index.
pub fn mutual_information(model: &ChannelModel, bins: &BinBoundaries) -> f64 {
    let l = model.components().len();
    let mut joint = vec![0.0; l];
    bins.iter_edges()
        .map(|(lo, hi)| {
            for (k, (c, &w)) in model.components().iter().zip(model.weights()).enumerate() {
                joint[k] = w * c.interval_probability(lo, hi);
            }
            bin_information(&joint, model.weights())
        })
        .sum()
}

/// Contribution of one bin: `sum_x p(x,b) log2(p(x,b) / (p(x) p(b)))`.
fn bin_information(joint: &[f64], prior: &[f64]) -> f64 {
    let pb: f64 = joint.iter().sum();
    if pb <= 0.0 {
        return 0.0;
    }
    joint
        .iter()
        .zip(prior)
        .filter(|(&j, _)| j > 0.0)
        .map(|(&j, &p)| j * (j / (p * pb)).log2())
        .sum()
}

pub struct MmiResult {
    pub bins: BinBoundaries,
    /// `I(X; B)` in bits, as evaluated on the grid.
    pub information: f64,
}

pub fn mmi_bins(params: &ChannelParams, layout: &LevelLayout, m: usize, grid_size: usize) -> Result<BinBoundaries> {
    let model = ChannelModel::new(params, layout)?;
    Ok(mmi_search(&model, m, grid_size, Execution::default())?.bins)
}

/// Maximum-mutual-information bins restricted to a uniform candidate grid.
///
/// `I(X; B)` is a sum of per-bin terms, so the best `m`-bin contiguous
/// partition of the grid follows from a dynamic program over
/// (bins used, right boundary). With a zero-entropy level prior every
/// partition has zero information and the equal-probability cuts are returned.
pub fn mmi_search(model: &ChannelModel, m: usize, grid_size: usize, exec: Execution) -> Result<MmiResult> {
    check_bin_count(m)?;
    if grid_size < 10 * m {
        return Err(Error::domain(format!(
            "MMI grid of {grid_size} points is too coarse for {m} bins (need >= {})",
            10 * m
        )));
    }
    let prior = model.weights();
    if prior.iter().filter(|&&w| w > 0.0).count() < 2 {
        return Ok(MmiResult {
            bins: equal_probability_for_model(model, m)?,
            information: 0.0,
        });
    }

    let lo = model.quantile(MMI_GRID_TAIL)?;
    let hi = model.upper_quantile(MMI_GRID_TAIL)?;
    let step = (hi - lo) / (grid_size - 1) as f64;
    let grid: Vec<f64> = (0..grid_size).map(|i| lo + step * i as f64).collect();

    // boundary j: 0 = -inf, 1..=G grid, G+1 = +inf
    let nb = grid_size + 2;
    let boundary = |j: usize| -> f64 {
        match j {
            0 => f64::NEG_INFINITY,
            j if j == nb - 1 => f64::INFINITY,
            j => grid[j - 1],
        }
    };
    let levels = model.components().len();
    // cumulative joint mass per level, built from cell masses to avoid
    // cancellation in the upper tail
    let mut cum = vec![vec![0.0; nb]; levels];
    for (k, c) in model.components().iter().enumerate() {
        let w = prior[k];
        for j in 1..nb {
            cum[k][j] = cum[k][j - 1] + w * c.interval_probability(boundary(j - 1), boundary(j));
        }
    }
    let gain = |i: usize, j: usize| -> f64 {
        let mut joint = [0.0; 16];
        let mut pb = 0.0;
        let mut acc = 0.0;
        if levels <= joint.len() {
            for k in 0..levels {
                joint[k] = (cum[k][j] - cum[k][i]).max(0.0);
                pb += joint[k];
            }
            if pb <= 0.0 {
                return 0.0;
            }
            for k in 0..levels {
                if joint[k] > 0.0 {
                    acc += joint[k] * (joint[k] / (prior[k] * pb)).log2();
                }
            }
            acc
        } else {
            let joint: Vec<f64> = (0..levels).map(|k| (cum[k][j] - cum[k][i]).max(0.0)).collect();
            bin_information(&joint, prior)
        }
    };

    // Upper triangle of the gain matrix, row i holding j = i+1..nb-1.
    let rows: Vec<Vec<f64>> = map_indexed(exec, nb - 1, |i| ((i + 1)..nb).map(|j| gain(i, j)).collect());
    let w = |i: usize, j: usize| rows[i][j - i - 1];

    // best[j]: max information of a partition of (-inf, b_j] into `layer` bins
    let mut best: Vec<f64> = (0..nb)
        .map(|j| if j == 0 { f64::NEG_INFINITY } else { w(0, j) })
        .collect();
    let mut back: Vec<Vec<usize>> = Vec::with_capacity(m);
    back.push(vec![0; nb]);
    for layer in 2..=m {
        let prev = &best;
        let scored: Vec<(f64, usize)> = map_indexed(exec, nb, |j| {
            let mut top = (f64::NEG_INFINITY, 0);
            if j >= layer {
                for (i, &p) in prev.iter().enumerate().take(j).skip(layer - 1) {
                    let v = p + w(i, j);
                    if v > top.0 {
                        top = (v, i);
                    }
                }
            }
            top
        });
        best = scored.iter().map(|s| s.0).collect();
        back.push(scored.iter().map(|s| s.1).collect());
    }

    let mut cuts_idx = Vec::with_capacity(m - 1);
    let mut j = nb - 1;
    for layer in (2..=m).rev() {
        j = back[layer - 1][j];
        cuts_idx.push(j);
    }
    cuts_idx.reverse();
    let cuts = cuts_idx.into_iter().map(boundary).collect();
    Ok(MmiResult {
        bins: BinBoundaries::new(cuts)?,
        information: best[nb - 1],
    })
}

/// Per-bin probabilities induced by the mixture.
pub fn bin_masses(model: &ChannelModel, bins: &BinBoundaries) -> Vec<f64> {
    bins.iter_edges()
        .map(|(lo, hi)| model.interval_probability(lo, hi))
        .collect()
}

/// Squared L2 distance between the mixture density and its histogram density.
///
/// The two semi-infinite bins are truncated at the `1e-9` lower and upper
/// mixture tails; their density level is the full bin mass over the truncated
/// width.
pub fn discretization_error(params: &ChannelParams, layout: &LevelLayout, bins: &BinBoundaries) -> Result<f64> {
    discretization_error_for_model(&ChannelModel::new(params, layout)?, bins)
}

pub fn discretization_error_for_model(model: &ChannelModel, bins: &BinBoundaries) -> Result<f64> {
    let lo = model.quantile(DE2_TRUNCATION_TAIL)?;
    let hi = model.upper_quantile(DE2_TRUNCATION_TAIL)?;
    let masses = bin_masses(model, bins);
    Ok(histogram_density_distance(|y| model.pdf(y), bins, &masses, lo, hi))
}

/// `sum_i int (f - H_i / width_i)^2` over the bins of `bins`, with the outer
/// bins clipped to `[lo, hi]`.
pub fn histogram_density_distance(
    density: impl Fn(f64) -> f64,
    bins: &BinBoundaries,
    masses: &[f64],
    lo: f64,
    hi: f64,
) -> f64 {
    let m = bins.m();
    bins.iter_edges()
        .enumerate()
        .map(|(i, (a, b))| {
            let a = if i == 0 { lo.min(b) } else { a };
            let b = if i == m - 1 { hi.max(a) } else { b };
            if b <= a {
                return 0.0;
            }
            let level = masses[i] / (b - a);
            let integrand = |y: f64| {
                let d = density(y) - level;
                d * d
            };
            integrate(&integrand, a, b, SIMPSON_TOL)
        })
        .sum()
}

/// Adaptive Simpson over `SIMPSON_PANELS` equal panels.
fn integrate(f: &impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    let h = (b - a) / SIMPSON_PANELS as f64;
    let tol = tol / SIMPSON_PANELS as f64;
    (0..SIMPSON_PANELS)
        .map(|p| {
            let x0 = a + h * p as f64;
            let x1 = if p + 1 == SIMPSON_PANELS { b } else { x0 + h };
            let (f0, f1) = (f(x0), f(x1));
            let fm = f(0.5 * (x0 + x1));
            let whole = (x1 - x0) / 6.0 * (f0 + 4.0 * fm + f1);
            simpson_step(f, x0, x1, f0, fm, f1, whole, tol, 48)
        })
        .sum()
}

#[allow(clippy::too_many_arguments)]
fn simpson_step(
    f: &impl Fn(f64) -> f64,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    simpson_step(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
        + simpson_step(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
}

/// Bin count after merging each run of adjacent bins with mass below
/// `threshold` into one bin.
pub fn merged_bin_count(masses: &[f64], threshold: f64) -> usize {
    let mut count = 0;
    let mut in_run = false;
    for &p in masses {
        if p < threshold {
            if !in_run {
                count += 1;
                in_run = true;
            }
        } else {
            count += 1;
            in_run = false;
        }
    }
    count
}

pub fn effective_resolution(
    params: &ChannelParams,
    layout: &LevelLayout,
    bins: &BinBoundaries,
    threshold: f64,
) -> Result<usize> {
    let model = ChannelModel::new(params, layout)?;
    effective_resolution_for_model(&model, bins, threshold)
}

pub fn effective_resolution_for_model(model: &ChannelModel, bins: &BinBoundaries, threshold: f64) -> Result<usize> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::domain(format!("threshold {threshold} outside (0, 1)")));
    }
    Ok(merged_bin_count(&bin_masses(model, bins), threshold))
}

/// Bins raw read voltages.
pub fn measure_histogram(samples: &[f64], bins: &BinBoundaries) -> Histogram {
    let mut counts = vec![0u64; bins.m()];
    for &y in samples {
        counts[bins.bin_of(y)] += 1;
    }
    Histogram::new(counts)
}

pub fn measure_reads(reads: &[Read], bins: &BinBoundaries) -> Histogram {
    let mut counts = vec![0u64; bins.m()];
    for r in reads {
        counts[bins.bin_of(r.y)] += 1;
    }
    Histogram::new(counts)
}

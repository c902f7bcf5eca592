//! Flash read-channel model.
//!
//! A cell written to intended threshold `x` reads back as
//! `y = x + n_p + n_w + n_r` with programming noise `n_p` (Gaussian, wider for
//! the erased state), wear-out noise `n_w` (one-sided exponential with scale
//! `lambda`) and retention noise `n_r` (Gaussian with mean and spread that grow
//! with the programmed charge `x - x0`). The two Gaussians merge, so every
//! level reads out as an exponentially modified Gaussian.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::emg::ExGaussian;
use crate::error::{Error, Result};
use crate::parallel::{map_indexed, Execution};

/// The five level-independent channel parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelParams {
    /// Wear-out exponential scale (V).
    pub lambda: f64,
    /// Programming-noise std of programmed levels (V).
    pub sigma_p: f64,
    /// Programming-noise std of the erased level (V).
    pub sigma_e: f64,
    /// Retention spread coefficient; `sigma_r = gamma_sigma_r * sqrt(x - x0)`.
    pub gamma_sigma_r: f64,
    /// Retention shift coefficient; `mu_r = gamma_mu_r * (x - x0)`.
    pub gamma_mu_r: f64,
}

impl ChannelParams {
    pub const DIM: usize = 5;
    pub const NAMES: [&'static str; 5] = ["lambda", "sigma_p", "sigma_e", "gamma_sigma_r", "gamma_mu_r"];

    pub fn new(lambda: f64, sigma_p: f64, sigma_e: f64, gamma_sigma_r: f64, gamma_mu_r: f64) -> Self {
        Self {
            lambda,
            sigma_p,
            sigma_e,
            gamma_sigma_r,
            gamma_mu_r,
        }
    }

    pub fn to_array(&self) -> [f64; 5] {
        [
            self.lambda,
            self.sigma_p,
            self.sigma_e,
            self.gamma_sigma_r,
            self.gamma_mu_r,
        ]
    }

    pub fn from_array(a: [f64; 5]) -> Self {
        Self::new(a[0], a[1], a[2], a[3], a[4])
    }

    pub fn from_slice(a: &[f64]) -> Self {
        Self::new(a[0], a[1], a[2], a[3], a[4])
    }

    /// Hard constraints under which the read-channel density exists.
    pub fn validate(&self) -> Result<()> {
        let a = self.to_array();
        if let Some(i) = a.iter().position(|v| !v.is_finite()) {
            return Err(Error::domain(format!("{} is not finite", Self::NAMES[i])));
        }
        if self.lambda <= 0.0 {
            return Err(Error::domain(format!("lambda must be > 0, got {}", self.lambda)));
        }
        if self.sigma_p <= 0.0 {
            return Err(Error::domain(format!("sigma_p must be > 0, got {}", self.sigma_p)));
        }
        if self.sigma_e <= 0.0 {
            return Err(Error::domain(format!("sigma_e must be > 0, got {}", self.sigma_e)));
        }
        if self.gamma_sigma_r < 0.0 {
            return Err(Error::domain(format!(
                "gamma_sigma_r must be >= 0, got {}",
                self.gamma_sigma_r
            )));
        }
        Ok(())
    }

    /// Physically implausible but evaluable settings.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.sigma_e <= self.sigma_p {
            out.push(format!(
                "sigma_e ({}) <= sigma_p ({}): erased level is expected to be wider",
                self.sigma_e, self.sigma_p
            ));
        }
        if self.gamma_mu_r > 0.0 {
            out.push(format!(
                "gamma_mu_r ({}) > 0: retention normally shifts thresholds down",
                self.gamma_mu_r
            ));
        }
        out
    }
}

/// Intended threshold voltages and the number of cells written to each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelLayout {
    /// Strictly increasing; `levels[0]` is the erased state `x0`.
    pub levels: Vec<f64>,
    pub counts: Vec<u64>,
}

impl LevelLayout {
    pub fn new(levels: Vec<f64>, counts: Vec<u64>) -> Result<Self> {
        let layout = Self { levels, counts };
        layout.validate()?;
        Ok(layout)
    }

    /// Splits `total` cells as evenly as possible over `levels`.
    pub fn equal_counts(levels: Vec<f64>, total: u64) -> Result<Self> {
        let l = levels.len() as u64;
        if l == 0 {
            return Err(Error::domain("layout needs at least one level"));
        }
        let counts = (0..l).map(|i| total / l + u64::from(i < total % l)).collect();
        Self::new(levels, counts)
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::domain("layout needs at least one level"));
        }
        if self.levels.len() != self.counts.len() {
            return Err(Error::domain(format!(
                "{} levels but {} counts",
                self.levels.len(),
                self.counts.len()
            )));
        }
        if self.levels.iter().any(|x| !x.is_finite()) {
            return Err(Error::domain("level voltages must be finite"));
        }
        if self.levels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::domain("level voltages must be strictly increasing"));
        }
        Ok(())
    }

    pub fn erased(&self) -> f64 {
        self.levels[0]
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Default intended thresholds in volts.
pub const DEFAULT_LEVELS: [f64; 4] = [0.0, 1.0, 2.0, 2.5];

impl Default for LevelLayout {
    /// Four MLC levels (erased at 0 V; programmed at 1, 2 and 2.5 V) with one
    /// million cells.
    fn default() -> Self {
        Self::equal_counts(DEFAULT_LEVELS.to_vec(), 1_000_000).expect("static layout")
    }
}

/// Parameters plus layout, as read from a JSON config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelConfig {
    #[serde(flatten)]
    pub params: ChannelParams,
    #[serde(flatten)]
    pub layout: LevelLayout,
}

/// Retention shift and total Gaussian spread of one level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelNoise {
    pub mu_r: f64,
    pub sigma_r: f64,
    /// Programming and retention spread combined.
    pub sigma: f64,
}

pub fn level_noise(params: &ChannelParams, x: f64, x0: f64) -> Result<LevelNoise> {
    if !(x >= x0) {
        return Err(Error::domain(format!(
            "intended threshold {x} is below the erased threshold {x0}"
        )));
    }
    let charge = x - x0;
    let mu_r = params.gamma_mu_r * charge;
    let sigma_r = params.gamma_sigma_r * charge.sqrt();
    let program = if charge == 0.0 { params.sigma_e } else { params.sigma_p };
    Ok(LevelNoise {
        mu_r,
        sigma_r,
        sigma: program.hypot(sigma_r),
    })
}

/// Read-voltage distribution of a cell written to `x`.
pub fn level_distribution(params: &ChannelParams, x: f64, x0: f64) -> Result<ExGaussian> {
    params.validate()?;
    let noise = level_noise(params, x, x0)?;
    Ok(ExGaussian::new(x + noise.mu_r, noise.sigma, params.lambda))
}

/// Density of reading `y` from a cell written to `x`.
pub fn conditional_pdf(params: &ChannelParams, x: f64, x0: f64, y: f64) -> Result<f64> {
    Ok(level_distribution(params, x, x0)?.pdf(y))
}

/// Probability that a cell of level `level` reads inside `(lo, hi)`.
pub fn bin_probability(params: &ChannelParams, layout: &LevelLayout, level: usize, lo: f64, hi: f64) -> Result<f64> {
    layout.validate()?;
    let x = *layout
        .levels
        .get(level)
        .ok_or_else(|| Error::domain(format!("level index {level} out of range")))?;
    check_interval(lo, hi)?;
    Ok(level_distribution(params, x, layout.erased())?.interval_probability(lo, hi))
}

/// Count-weighted mixture density over all levels.
pub fn mixture_pdf(params: &ChannelParams, layout: &LevelLayout, y: f64) -> Result<f64> {
    Ok(ChannelModel::new(params, layout)?.pdf(y))
}

fn check_interval(lo: f64, hi: f64) -> Result<()> {
    if lo.is_nan() || hi.is_nan() || !(lo < hi) {
        return Err(Error::domain(format!(
            "bin bounds must satisfy lo < hi, got ({lo}, {hi})"
        )));
    }
    Ok(())
}

/// Channel parameters bound to a layout, with per-level distributions
/// precomputed.
#[derive(Debug, Clone)]
pub struct ChannelModel {
    params: ChannelParams,
    layout: LevelLayout,
    components: Vec<ExGaussian>,
    weights: Vec<f64>,
}

impl ChannelModel {
    pub fn new(params: &ChannelParams, layout: &LevelLayout) -> Result<Self> {
        params.validate()?;
        layout.validate()?;
        let total = layout.total();
        if total == 0 {
            return Err(Error::domain("layout holds no cells"));
        }
        let x0 = layout.erased();
        let components = layout
            .levels
            .iter()
            .map(|&x| level_distribution(params, x, x0))
            .collect::<Result<Vec<_>>>()?;
        let weights = layout.counts.iter().map(|&n| n as f64 / total as f64).collect();
        Ok(Self {
            params: *params,
            layout: layout.clone(),
            components,
            weights,
        })
    }

    pub fn params(&self) -> &ChannelParams {
        &self.params
    }

    pub fn layout(&self) -> &LevelLayout {
        &self.layout
    }

    pub fn components(&self) -> &[ExGaussian] {
        &self.components
    }

    /// Level priors `N_k / N`.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn pdf(&self, y: f64) -> f64 {
        self.mix(|c| c.pdf(y))
    }

    pub fn cdf(&self, y: f64) -> f64 {
        self.mix(|c| c.cdf(y)).clamp(0.0, 1.0)
    }

    pub fn sf(&self, y: f64) -> f64 {
        self.mix(|c| c.sf(y)).clamp(0.0, 1.0)
    }

    pub fn interval_probability(&self, lo: f64, hi: f64) -> f64 {
        self.mix(|c| c.interval_probability(lo, hi)).clamp(0.0, 1.0)
    }

    pub fn bin_probability(&self, level: usize, lo: f64, hi: f64) -> Result<f64> {
        check_interval(lo, hi)?;
        let c = self
            .components
            .get(level)
            .ok_or_else(|| Error::domain(format!("level index {level} out of range")))?;
        Ok(c.interval_probability(lo, hi))
    }

    fn mix(&self, f: impl Fn(&ExGaussian) -> f64) -> f64 {
        self.components
            .iter()
            .zip(&self.weights)
            .filter(|(_, &w)| w > 0.0)
            .map(|(c, &w)| w * f(c))
            .sum()
    }

    fn bracket(&self) -> (f64, f64) {
        let spread = self.components.iter().map(|c| c.std_dev()).fold(0.0, f64::max);
        let lo = self.components.iter().map(|c| c.mu).fold(f64::INFINITY, f64::min);
        let hi = self
            .components
            .iter()
            .map(|c| c.mean())
            .fold(f64::NEG_INFINITY, f64::max);
        (lo - 10.0 * spread, hi + 10.0 * spread)
    }

    /// Smallest `y` with `cdf(y) >= p`, for `p` in `(0, 1)`.
    pub fn quantile(&self, p: f64) -> Result<f64> {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::domain(format!("quantile level {p} outside (0, 1)")));
        }
        if p <= 0.5 {
            self.solve_increasing(|y| self.cdf(y) - p, "quantile")
        } else {
            let tail = 1.0 - p;
            self.solve_increasing(|y| tail - self.sf(y), "quantile")
        }
    }

    /// `y` with upper-tail mass `sf(y) = tail`; keeps full precision for tiny tails.
    pub fn upper_quantile(&self, tail: f64) -> Result<f64> {
        if !(tail > 0.0 && tail < 1.0) {
            return Err(Error::domain(format!("tail mass {tail} outside (0, 1)")));
        }
        self.solve_increasing(|y| tail - self.sf(y), "upper_quantile")
    }

    /// Bisection on a nondecreasing function that changes sign.
    fn solve_increasing(&self, g: impl Fn(f64) -> f64, routine: &'static str) -> Result<f64> {
        let (mut lo, mut hi) = self.bracket();
        let width = hi - lo;
        let mut grow = width;
        for _ in 0..60 {
            if g(lo) <= 0.0 {
                break;
            }
            lo -= grow;
            grow *= 2.0;
        }
        let mut grow = width;
        for _ in 0..60 {
            if g(hi) >= 0.0 {
                break;
            }
            hi += grow;
            grow *= 2.0;
        }
        let (glo, ghi) = (g(lo), g(hi));
        if !(glo <= 0.0 && ghi >= 0.0) {
            return Err(Error::Numeric {
                routine,
                detail: format!("no sign change on [{lo}, {hi}]: g = ({glo:e}, {ghi:e})"),
            });
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if g(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }
}

/// One simulated cell read.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Read {
    pub level: usize,
    pub y: f64,
}

const SAMPLE_CHUNK: u64 = 1 << 16;

pub fn sample_reads(params: &ChannelParams, layout: &LevelLayout, seed: u64) -> Result<Vec<Read>> {
    sample_reads_with(params, layout, seed, Execution::default())
}

/// Draws every cell of the layout once.
///
/// Cells are generated in chunks of 65536, each from its own ChaCha stream
/// keyed by `(level, chunk)`, so the output is identical for every execution
/// mode and thread count.
pub fn sample_reads_with(
    params: &ChannelParams,
    layout: &LevelLayout,
    seed: u64,
    exec: Execution,
) -> Result<Vec<Read>> {
    params.validate()?;
    layout.validate()?;
    let x0 = layout.erased();
    let noise = layout
        .levels
        .iter()
        .map(|&x| level_noise(params, x, x0))
        .collect::<Result<Vec<_>>>()?;

    let mut jobs = Vec::new();
    for (level, &n) in layout.counts.iter().enumerate() {
        let chunks = n.div_ceil(SAMPLE_CHUNK);
        for chunk in 0..chunks {
            let len = SAMPLE_CHUNK.min(n - chunk * SAMPLE_CHUNK);
            jobs.push((level, chunk, len));
        }
    }

    let pieces = map_indexed(exec, jobs.len(), |j| {
        let (level, chunk, len) = jobs[j];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(((level as u64) << 32) | chunk);
        let x = layout.levels[level];
        let nz = noise[level];
        let program = if x == x0 { params.sigma_e } else { params.sigma_p };
        (0..len)
            .map(|_| {
                let n_p: f64 = program * rng.sample::<f64, _>(StandardNormal);
                let n_w: f64 = params.lambda * rng.sample::<f64, _>(Exp1);
                let n_r: f64 = nz.mu_r + nz.sigma_r * rng.sample::<f64, _>(StandardNormal);
                Read {
                    level,
                    y: x + n_p + n_w + n_r,
                }
            })
            .collect::<Vec<_>>()
    });
    Ok(pieces.concat())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn worn() -> ChannelParams {
        ChannelParams::new(0.0099, 0.05, 0.35, 0.0617, -0.5882)
    }

    #[test]
    fn erased_level_has_no_retention() {
        let n = level_noise(&worn(), 0.7, 0.7).unwrap();
        assert_eq!(n.mu_r, 0.0);
        assert_eq!(n.sigma_r, 0.0);
        assert_eq!(n.sigma, 0.35);
    }

    #[test]
    fn retention_at_unit_spacing() {
        let n = level_noise(&worn(), 1.0, 0.0).unwrap();
        assert_eq!(n.mu_r, -0.5882);
        assert_eq!(n.sigma_r, 0.0617);
        assert!((n.sigma - (0.05f64.powi(2) + 0.0617f64.powi(2)).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn retention_grows_with_charge() {
        let p = ChannelParams::new(0.01, 0.05, 0.35, 0.04, -0.5);
        let n = level_noise(&p, 4.0, 0.0).unwrap();
        assert!((n.mu_r + 2.0).abs() < 1e-15);
        assert!((n.sigma_r - 0.08).abs() < 1e-15);
    }

    #[test]
    fn below_erased_is_rejected() {
        assert!(matches!(level_noise(&worn(), -0.1, 0.0), Err(Error::Domain(_))));
    }

    #[test]
    fn invalid_params_rejected() {
        let mut p = worn();
        p.lambda = 0.0;
        assert!(p.validate().is_err());
        let mut p = worn();
        p.gamma_sigma_r = -1e-3;
        assert!(p.validate().is_err());
        let mut p = worn();
        p.sigma_e = f64::NAN;
        assert!(p.validate().is_err());
    }

    #[test]
    fn warnings_flag_soft_violations() {
        assert!(worn().warnings().is_empty());
        let p = ChannelParams::new(0.0099, 0.35, 0.05, 0.0617, 0.1);
        assert_eq!(p.warnings().len(), 2);
    }

    #[test]
    fn layout_validation() {
        assert!(LevelLayout::new(vec![0.0, 1.0], vec![1]).is_err());
        assert!(LevelLayout::new(vec![1.0, 0.0], vec![1, 1]).is_err());
        assert!(LevelLayout::new(vec![], vec![]).is_err());
        let l = LevelLayout::equal_counts(vec![0.0, 1.0, 2.0], 10).unwrap();
        assert_eq!(l.counts, vec![4, 3, 3]);
        assert_eq!(LevelLayout::default().total(), 1_000_000);
    }

    #[test]
    fn reversed_bounds_error() {
        let l = LevelLayout::default();
        assert!(bin_probability(&worn(), &l, 0, 1.0, 0.5).is_err());
        assert!(bin_probability(&worn(), &l, 0, 1.0, 1.0).is_err());
        assert!(bin_probability(&worn(), &l, 9, 0.0, 1.0).is_err());
        let p = bin_probability(&worn(), &l, 2, f64::NEG_INFINITY, f64::INFINITY).unwrap();
        assert_eq!(p, 1.0);
    }

    #[test]
    fn empty_layout_mixture_errors() {
        let l = LevelLayout::new(vec![0.0, 1.0], vec![0, 0]).unwrap();
        assert!(mixture_pdf(&worn(), &l, 0.0).is_err());
    }

    #[test]
    fn single_level_mixture_is_conditional() {
        let l = LevelLayout::new(vec![0.5], vec![42]).unwrap();
        for y in [-0.5, 0.5, 1.5] {
            let a = mixture_pdf(&worn(), &l, y).unwrap();
            let b = conditional_pdf(&worn(), 0.5, 0.5, y).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn equal_count_mixture_is_average() {
        let l = LevelLayout::default();
        for y in [1.1, 1.8, 2.5, 3.4] {
            let avg: f64 = l
                .levels
                .iter()
                .map(|&x| conditional_pdf(&worn(), x, l.erased(), y).unwrap())
                .sum::<f64>()
                / 4.0;
            assert!((mixture_pdf(&worn(), &l, y).unwrap() - avg).abs() < 1e-14);
        }
    }

    #[test]
    fn quantiles_invert_cdf() {
        let m = ChannelModel::new(&worn(), &LevelLayout::default()).unwrap();
        for p in [1e-9, 1e-4, 0.1, 0.5, 0.77, 0.9999] {
            let q = m.quantile(p).unwrap();
            assert!((m.cdf(q) - p).abs() < 1e-12, "p = {p}");
        }
        let q = m.upper_quantile(1e-9).unwrap();
        assert!((m.sf(q) - 1e-9).abs() < 1e-20);
        assert!(m.quantile(0.0).is_err());
    }

    #[test]
    fn sampling_is_deterministic_and_mode_independent() {
        let l = LevelLayout::equal_counts(vec![0.0, 1.0, 2.0, 3.0], 200_003).unwrap();
        let a = sample_reads_with(&worn(), &l, 7, Execution::Sequential).unwrap();
        let b = sample_reads_with(&worn(), &l, 7, Execution::Parallel).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 200_003);
        let c = sample_reads(&worn(), &l, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn config_json_uses_flat_keys() {
        let cfg = ChannelConfig {
            params: worn(),
            layout: LevelLayout::equal_counts(vec![0.0, 1.0], 4).unwrap(),
        };
        let v: serde_json::Value = serde_json::to_value(&cfg).unwrap();
        for key in [
            "lambda",
            "sigma_p",
            "sigma_e",
            "gamma_sigma_r",
            "gamma_mu_r",
            "levels",
            "counts",
        ] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        let back: ChannelConfig = serde_json::from_value(v).unwrap();
        assert_eq!(back, cfg);
    }
}

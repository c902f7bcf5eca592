//! Oracles and generators shared by the integration tests.
#![allow(dead_code)]

use flash_channel::harness::{anchor_params, synthetic_trajectory};
use flash_channel::{ChannelModel, ChannelParams, LevelLayout};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// A valid parameter vector and a charge `x - x0` (zero for about a quarter
/// of the draws, i.e. the erased level).
pub fn random_condition(rng: &mut ChaCha8Rng) -> (ChannelParams, f64) {
    let lambda = 10f64.powf(rng.random_range(-3.0..-1.0));
    let sigma_p = rng.random_range(0.01..0.2);
    let sigma_e = rng.random_range(0.1..0.6);
    let gamma_sigma_r = rng.random_range(0.0..0.15);
    let gamma_mu_r = rng.random_range(-0.8..0.0);
    let charge = if rng.random_bool(0.25) {
        0.0
    } else {
        rng.random_range(0.05..4.0)
    };
    (
        ChannelParams::new(lambda, sigma_p, sigma_e, gamma_sigma_r, gamma_mu_r),
        charge,
    )
}

/// Composite Simpson rule with `n` (rounded up to even) panels.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let n = n.max(2).div_ceil(2) * 2;
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + h * i as f64);
    }
    s * h / 3.0
}

/// Density of `mu + sigma Z + E`, `E ~ Exp(mean lambda)`, by direct
/// quadrature of the convolution integral over the exponential variable.
///
/// The integrand `exp(-t/lambda) phi((y - mu - t)/sigma)` is a Gaussian in
/// `t` centred at `t* = y - mu - sigma^2/lambda`, so the window and step are
/// chosen from `t*` and `sigma` alone.
pub fn convolution_pdf(mu: f64, sigma: f64, lambda: f64, y: f64) -> f64 {
    let d = y - mu;
    let t_star = d - sigma * sigma / lambda;
    let (a, b, scale) = if t_star >= 0.0 {
        ((t_star - 12.0 * sigma).max(0.0), t_star + 12.0 * sigma, sigma)
    } else {
        // decreasing on t >= 0 with initial slope |t*| / sigma^2
        let decay = (sigma * sigma / -t_star).min(sigma);
        (0.0, 40.0 * decay, decay)
    };
    let n = ((b - a) / (scale / 60.0)).ceil() as usize;
    let norm = 1.0 / (lambda * sigma * (2.0 * std::f64::consts::PI).sqrt());
    let integrand = |t: f64| {
        let z = (d - t) / sigma;
        (-t / lambda - 0.5 * z * z).exp()
    };
    norm * simpson(integrand, a, b, n)
}

/// Two-sided Kolmogorov-Smirnov statistic of `samples` against `cdf`.
pub fn ks_statistic(samples: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
    samples.sort_by(f64::total_cmp);
    let n = samples.len() as f64;
    samples
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let f = cdf(y);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max)
}

pub fn anchor_model() -> ChannelModel {
    ChannelModel::new(&anchor_params(), &LevelLayout::default()).unwrap()
}

pub fn trajectory_models() -> Vec<(u32, ChannelModel)> {
    let layout = LevelLayout::default();
    synthetic_trajectory()
        .into_iter()
        .map(|p| (p.pe_cycles, ChannelModel::new(&p.params, &layout).unwrap()))
        .collect()
}

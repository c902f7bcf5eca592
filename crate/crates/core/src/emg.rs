//! Exponentially modified Gaussian: `N(mu, sigma^2) + Exp(mean = lambda)`.
//!
//! Every read-voltage distribution of a single level has this shape. The
//! textbook density carries a factor `exp(sigma^2 / 2 lambda^2)` that overflows
//! as soon as `sigma / lambda` exceeds about 37; the evaluations below are
//! rewritten around the scaled complementary error function instead.
//!
//! With `s = (y - mu) / sigma` and `u = sigma / lambda - s`:
//!
//! ```text
//! pdf(y) = exp(-s^2/2) * erfcx(u/sqrt2) / (2 lambda)        u >= 0
//!        = exp(sigma^2/2lambda^2 - (y-mu)/lambda) Q(u) / lambda   u < 0
//! cdf(y) = Phi(s) - lambda * pdf(y)
//! sf(y)  = Q(s)   + lambda * pdf(y)
//! ```

use crate::special::{normal_cdf, normal_sf, scaled_normal_sf};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExGaussian {
    /// Mean of the Gaussian component.
    pub mu: f64,
    pub sigma: f64,
    /// Mean (scale) of the exponential component.
    pub lambda: f64,
}

impl ExGaussian {
    pub fn new(mu: f64, sigma: f64, lambda: f64) -> Self {
        debug_assert!(sigma > 0.0 && lambda > 0.0);
        Self { mu, sigma, lambda }
    }

    pub fn mean(&self) -> f64 {
        self.mu + self.lambda
    }

    pub fn variance(&self) -> f64 {
        self.sigma * self.sigma + self.lambda * self.lambda
    }

    pub fn std_dev(&self) -> f64 {
        self.variance().sqrt()
    }

    pub fn pdf(&self, y: f64) -> f64 {
        let s = (y - self.mu) / self.sigma;
        let ratio = self.sigma / self.lambda;
        let u = ratio - s;
        let v = if u >= 0.0 {
            (-0.5 * s * s).exp() * scaled_normal_sf(u)
        } else {
            // here s > ratio, so the exponent is -(s^2 - u^2)/2 < 0
            (0.5 * ratio * ratio - (y - self.mu) / self.lambda).exp() * normal_sf(u)
        };
        let v = v / self.lambda;
        if v.is_finite() {
            v.max(0.0)
        } else {
            0.0
        }
    }

    pub fn cdf(&self, y: f64) -> f64 {
        if y == f64::NEG_INFINITY {
            return 0.0;
        }
        if y == f64::INFINITY {
            return 1.0;
        }
        let s = (y - self.mu) / self.sigma;
        let v = if s < 0.0 {
            // Phi(s) and lambda*pdf share the factor exp(-s^2/2)
            let u = self.sigma / self.lambda - s;
            (-0.5 * s * s).exp() * (scaled_normal_sf(-s) - scaled_normal_sf(u))
        } else {
            normal_cdf(s) - self.lambda * self.pdf(y)
        };
        v.clamp(0.0, 1.0)
    }

    pub fn sf(&self, y: f64) -> f64 {
        if y == f64::NEG_INFINITY {
            return 1.0;
        }
        if y == f64::INFINITY {
            return 0.0;
        }
        let s = (y - self.mu) / self.sigma;
        (normal_sf(s) + self.lambda * self.pdf(y)).clamp(0.0, 1.0)
    }

    /// `P(lo < Y < hi)`. Uses the lower tail below the mean and the upper tail
    /// above it so neither end loses digits to cancellation.
    pub fn interval_probability(&self, lo: f64, hi: f64) -> f64 {
        let center = self.mean();
        let p = if hi <= center {
            self.cdf(hi) - self.cdf(lo)
        } else if lo >= center {
            self.sf(lo) - self.sf(hi)
        } else {
            1.0 - self.cdf(lo) - self.sf(hi)
        };
        p.clamp(0.0, 1.0)
    }
}

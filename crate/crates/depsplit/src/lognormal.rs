//! Lognormal distribution math: reparameterized sampling, CDF, and analytic
//! full/partial expectations. These closed forms back the analytic metric
//! mode of the generative model and serve as independent oracles for its
//! Monte Carlo mode.

use crate::{Error, Result};

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const SQRT_2PI: f64 = 2.506_628_274_631_000_5;

/// Standard normal CDF via erfc, accurate to well below 1e-10 absolute.
pub fn std_normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / SQRT_2)
}

/// Standard normal density.
pub fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / SQRT_2PI
}

/// Lognormal distribution parameterized on the log scale:
/// `ln X ~ N(mu, sigma^2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lognormal {
    mu: f64,
    sigma: f64,
}

impl Lognormal {
    pub fn new(mu: f64, sigma: f64) -> Result<Self> {
        if !mu.is_finite() || !sigma.is_finite() || sigma <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "lognormal requires finite mu and sigma > 0, got mu={mu}, sigma={sigma}"
            )));
        }
        Ok(Lognormal { mu, sigma })
    }

    pub fn mu(self) -> f64 {
        self.mu
    }

    pub fn sigma(self) -> f64 {
        self.sigma
    }

    /// Reparameterized draw `exp(mu + sigma * eps)` for a standard-normal
    /// `eps` owned by the caller. For fixed `eps` the draw is differentiable
    /// in `mu` and `sigma`: d/dmu = sample, d/dsigma = eps * sample.
    pub fn sample(self, eps: f64) -> f64 {
        (self.mu + self.sigma * eps).exp()
    }

    /// P(X <= x); 0 for x <= 0 by convention.
    pub fn cdf(self, x: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        std_normal_cdf((x.ln() - self.mu) / self.sigma)
    }

    /// `exp(mu + sigma^2 / 2)`
    pub fn mean(self) -> f64 {
        (self.mu + 0.5 * self.sigma * self.sigma).exp()
    }

    /// `(exp(sigma^2) - 1) * exp(2 mu + sigma^2)`
    pub fn variance(self) -> f64 {
        let s2 = self.sigma * self.sigma;
        (s2.exp() - 1.0) * (2.0 * self.mu + s2).exp()
    }

    /// Partial expectation `E[X * 1{X < l}]`; tends to `mean()` as l grows
    /// and to 0 as l -> 0+.
    pub fn partial_mean_below(self, l: f64) -> f64 {
        if l <= 0.0 {
            return 0.0;
        }
        let s2 = self.sigma * self.sigma;
        self.mean() * std_normal_cdf((l.ln() - self.mu - s2) / self.sigma)
    }

    /// Partial second moment `E[X^2 * 1{X < l}]`.
    pub fn partial_second_moment_below(self, l: f64) -> f64 {
        if l <= 0.0 {
            return 0.0;
        }
        let s2 = self.sigma * self.sigma;
        (2.0 * self.mu + 2.0 * s2).exp() * std_normal_cdf((l.ln() - self.mu - 2.0 * s2) / self.sigma)
    }

    /// Variance of `X * 1{X < l}`, used for Monte Carlo standard errors.
    pub fn truncated_term_variance(self, l: f64) -> f64 {
        let pm = self.partial_mean_below(l);
        self.partial_second_moment_below(l) - pm * pm
    }

    /// Covariance of `X` and `X * 1{X < l}` under a single draw.
    pub fn truncated_term_covariance(self, l: f64) -> f64 {
        self.partial_second_moment_below(l) - self.mean() * self.partial_mean_below(l)
    }
}

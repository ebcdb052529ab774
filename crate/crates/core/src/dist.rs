//! Distribution catalog: samplers and closed-form transforms.
//!
//! Service, switchover and interarrival durations are drawn from this
//! catalog. Each member carries its analytic mean and Laplace-Stieltjes
//! transform, which the verifier uses to build closed-form sides of
//! identities.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// A nonnegative duration law with closed-form mean and transform.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServiceDistribution {
    Exponential { rate: f64 },
    Erlang { shape: u32, rate: f64 },
    Deterministic { value: f64 },
    Uniform { lo: f64, hi: f64 },
    Hyperexponential { weights: Vec<f64>, rates: Vec<f64> },
}

impl ServiceDistribution {
    /// Check parameter domains. Called once when a scenario is loaded.
    pub fn validate(&self) -> Result<()> {
        let bad = |why: String| Error::InvalidParameter {
            what: "service distribution",
            why,
        };
        match self {
            Self::Exponential { rate } => {
                if !rate.is_finite() || *rate <= 0.0 {
                    return Err(bad(format!("exponential rate {rate} must be positive")));
                }
            }
            Self::Erlang { shape, rate } => {
                if *shape == 0 {
                    return Err(bad("erlang shape must be at least 1".into()));
                }
                if !rate.is_finite() || *rate <= 0.0 {
                    return Err(bad(format!("erlang rate {rate} must be positive")));
                }
            }
            Self::Deterministic { value } => {
                if !value.is_finite() || *value < 0.0 {
                    return Err(bad(format!("deterministic value {value} must be >= 0")));
                }
            }
            Self::Uniform { lo, hi } => {
                if !(lo.is_finite() && hi.is_finite()) || *lo < 0.0 || hi <= lo {
                    return Err(bad(format!("uniform bounds [{lo}, {hi}] invalid")));
                }
            }
            Self::Hyperexponential { weights, rates } => {
                if weights.len() != rates.len() || weights.is_empty() {
                    return Err(bad("hyperexponential needs matching weights/rates".into()));
                }
                if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
                    return Err(bad("hyperexponential weights must be >= 0".into()));
                }
                let total: f64 = weights.iter().sum();
                if (total - 1.0).abs() > 1e-12 {
                    return Err(bad(format!("hyperexponential weights sum to {total}")));
                }
                if rates.iter().any(|r| !r.is_finite() || *r <= 0.0) {
                    return Err(bad("hyperexponential rates must be positive".into()));
                }
            }
        }
        Ok(())
    }

    /// Analytic mean of the law.
    pub fn mean(&self) -> f64 {
        match self {
            Self::Exponential { rate } => 1.0 / rate,
            Self::Erlang { shape, rate } => f64::from(*shape) / rate,
            Self::Deterministic { value } => *value,
            Self::Uniform { lo, hi } => 0.5 * (lo + hi),
            Self::Hyperexponential { weights, rates } => weights
                .iter()
                .zip(rates)
                .map(|(w, r)| w / r)
                .sum(),
        }
    }

    /// Draw one duration. Deterministic given the stream state.
    pub fn sample(&self, stream: &mut RngStream) -> f64 {
        match self {
            Self::Exponential { rate } => exp_draw(stream, *rate),
            Self::Erlang { shape, rate } => {
                (0..*shape).map(|_| exp_draw(stream, *rate)).sum()
            }
            Self::Deterministic { value } => *value,
            Self::Uniform { lo, hi } => lo + stream.next_f64() * (hi - lo),
            Self::Hyperexponential { weights, rates } => {
                let i = stream.next_weighted(weights);
                exp_draw(stream, rates[i])
            }
        }
    }

    /// Laplace-Stieltjes transform evaluated at `s >= 0`. Exactly 1 at
    /// `s = 0` for every member (mixture weights normalize by contract).
    pub fn lst(&self, s: f64) -> f64 {
        debug_assert!(s >= 0.0);
        if s == 0.0 {
            return 1.0;
        }
        match self {
            Self::Exponential { rate } => rate / (rate + s),
            Self::Erlang { shape, rate } => (rate / (rate + s)).powi(*shape as i32),
            Self::Deterministic { value } => (-s * value).exp(),
            Self::Uniform { lo, hi } => {
                let span = hi - lo;
                if s * span < 1e-12 {
                    // s -> 0 limit of the interval average of e^{-sx}
                    (-s * self.mean()).exp()
                } else {
                    (-s * lo).exp() * (-(-s * span).exp_m1()) / (s * span)
                }
            }
            Self::Hyperexponential { weights, rates } => weights
                .iter()
                .zip(rates)
                .map(|(w, r)| w * r / (r + s))
                .sum(),
        }
    }

    /// Transform of the elapsed (past) part: `(1 - lst(s)) / (mean * s)`,
    /// continuously extended to 1 at `s = 0`.
    pub fn lst_past(&self, s: f64) -> f64 {
        if s == 0.0 {
            return 1.0;
        }
        (1.0 - self.lst(s)) / (self.mean() * s)
    }
}

#[inline]
fn exp_draw(stream: &mut RngStream, rate: f64) -> f64 {
    // next_f64 is in [0,1), so the argument of ln is in (0,1].
    -(1.0 - stream.next_f64()).ln() / rate
}

/// Finite-support law of external batch sizes: pairs of (class-count vector,
/// probability).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchLaw {
    pub support: Vec<(Vec<u32>, f64)>,
}

impl BatchLaw {
    /// A single-class unit batch (ordinary one-at-a-time arrivals).
    pub fn unit(m: usize, class: usize) -> Self {
        let mut g = vec![0u32; m];
        g[class] = 1;
        Self {
            support: vec![(g, 1.0)],
        }
    }

    pub fn validate(&self, m: usize) -> Result<()> {
        let bad = |why: String| Error::InvalidParameter {
            what: "batch law",
            why,
        };
        if self.support.is_empty() {
            return Err(bad("support is empty".into()));
        }
        let mut total = 0.0;
        for (g, p) in &self.support {
            if g.len() != m {
                return Err(bad(format!("batch vector {g:?} has wrong length")));
            }
            if g.iter().all(|&c| c == 0) {
                return Err(bad("all-zero batch in support".into()));
            }
            if !p.is_finite() || *p <= 0.0 {
                return Err(bad(format!("batch probability {p} invalid")));
            }
            total += p;
        }
        if (total - 1.0).abs() > 1e-12 {
            return Err(bad(format!("batch probabilities sum to {total}")));
        }
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.support[0].0.len()
    }

    /// Mean number of class-`i` customers per batch.
    pub fn marginal_mean(&self, i: usize) -> f64 {
        self.support
            .iter()
            .map(|(g, p)| p * f64::from(g[i]))
            .sum()
    }

    /// `E[z^G]` over the finite support; exact up to rounding.
    pub fn pgf(&self, z: &[f64]) -> f64 {
        self.support
            .iter()
            .map(|(g, p)| {
                p * g
                    .iter()
                    .zip(z)
                    .map(|(&gi, &zi)| zi.powi(gi as i32))
                    .product::<f64>()
            })
            .sum()
    }

    /// Draw one batch vector.
    pub fn sample<'a>(&'a self, stream: &mut RngStream) -> &'a [u32] {
        let mut u = stream.next_f64();
        for (g, p) in &self.support {
            if u < *p {
                return g;
            }
            u -= p;
        }
        &self.support.last().unwrap().0
    }
}

//! Learned time-sampling distribution for training.
//!
//! The unnormalized CDF is piecewise linear over fixed knots: each bin
//! between consecutive knots carries a nonnegative mass, fitted to the
//! observed training loss at that time. Sampling normalizes the masses and
//! inverts the CDF, so training time concentrates where the loss is high.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied to every bin mass after an update.
pub const MIN_WEIGHT: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeWarpCdf {
    knots: Vec<f64>,
    weights: Vec<f64>,
}

impl TimeWarpCdf {
    pub fn new(knots: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if knots.len() < 2 {
            return Err(Error::invalid("time warp needs at least 2 knots"));
        }
        if weights.len() + 1 != knots.len() {
            return Err(Error::LengthMismatch(weights.len(), knots.len() - 1));
        }
        if knots[0] < 0.0 || !knots.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::invalid("knots must be increasing and nonnegative"));
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) || weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::invalid("weights must be nonnegative with positive total"));
        }
        Ok(Self { knots, weights })
    }

    /// `bins` equal-width bins on `[0, t_max]` with equal mass.
    pub fn uniform(t_max: f64, bins: usize) -> Result<Self> {
        if bins == 0 || !(t_max > 0.0) {
            return Err(Error::invalid("uniform warp needs bins >= 1 and t_max > 0"));
        }
        let knots = (0..=bins).map(|i| t_max * i as f64 / bins as f64).collect();
        Self::new(knots, vec![1.0; bins])
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn t_max(&self) -> f64 {
        *self.knots.last().unwrap()
    }

    /// Normalized CDF at time `t`.
    pub fn cdf(&self, t: f64) -> f64 {
        let total: f64 = self.weights.iter().sum();
        let mut acc = 0.0;
        for (i, w) in self.weights.iter().enumerate() {
            let (a, b) = (self.knots[i], self.knots[i + 1]);
            if t >= b {
                acc += w;
            } else {
                if t > a {
                    acc += w * (t - a) / (b - a);
                }
                break;
            }
        }
        acc / total
    }

    /// Index of the bin containing `t`, clamped to the knot range.
    pub fn bin_of(&self, t: f64) -> usize {
        let last = self.weights.len() - 1;
        self.knots[1..]
            .iter()
            .position(|&b| t < b)
            .unwrap_or(last)
            .min(last)
    }

    /// Inverse-CDF sample for `u` in `[0, 1]`.
    pub fn sample(&self, u: f64) -> f64 {
        let u = u.clamp(0.0, 1.0);
        let total: f64 = self.weights.iter().sum();
        let target = u * total;
        let mut acc = 0.0;
        for (i, &w) in self.weights.iter().enumerate() {
            if w > 0.0 && target < acc + w {
                let frac = (target - acc) / w;
                let (a, b) = (self.knots[i], self.knots[i + 1]);
                return a + frac * (b - a);
            }
            acc += w;
        }
        self.t_max()
    }

    /// Moves the mass of `bin` toward `observed_loss` by an exponential
    /// moving average with rate `ema_rate`.
    pub fn update(&mut self, bin: usize, observed_loss: f64, ema_rate: f64) -> Result<()> {
        if bin >= self.weights.len() {
            return Err(Error::invalid(format!("warp bin {bin} out of range")));
        }
        if !observed_loss.is_finite() {
            return Err(Error::invalid("observed loss must be finite"));
        }
        let w = &mut self.weights[bin];
        *w = ((1.0 - ema_rate) * *w + ema_rate * observed_loss).max(MIN_WEIGHT);
        Ok(())
    }
}

pub fn warp_sample(cdf: &TimeWarpCdf, u: f64) -> f64 {
    cdf.sample(u)
}

pub fn warp_update(cdf: &TimeWarpCdf, t_bin: usize, observed_loss: f64, ema_rate: f64) -> Result<TimeWarpCdf> {
    let mut next = cdf.clone();
    next.update(t_bin, observed_loss, ema_rate)?;
    Ok(next)
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Spacing {
    #[default]
    Linear,
    Geometric,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub t_max: f64,
    pub t_min: f64,
    pub n_steps: usize,
    /// Multiplies `t_max` to give the first grid time.
    #[serde(default = "one")]
    pub noise_scale: f64,
    #[serde(default)]
    pub spacing: Spacing,
}

fn one() -> f64 {
    1.0
}

impl ScheduleParams {
    /// `t_min` defaults to 1% of `t_max`.
    pub fn new(t_max: f64, n_steps: usize) -> Self {
        Self {
            t_max,
            t_min: 0.01 * t_max,
            n_steps,
            noise_scale: 1.0,
            spacing: Spacing::Linear,
        }
    }
}

/// Strictly decreasing time grid `t_0 > … > t_n` walked by the sampler.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub t_max: f64,
    pub t_min: f64,
    pub n_steps: usize,
    pub grid: Vec<f64>,
}

impl NoiseSchedule {
    pub fn start(&self) -> f64 {
        self.grid[0]
    }
}

pub fn make_grid(p: &ScheduleParams) -> Result<NoiseSchedule> {
    if p.n_steps == 0 {
        return Err(Error::invalid("n_steps must be at least 1"));
    }
    if !(p.t_min > 0.0 && p.t_max > p.t_min && p.t_max.is_finite()) {
        return Err(Error::invalid(format!(
            "need t_max > t_min > 0, got t_max={} t_min={}",
            p.t_max, p.t_min
        )));
    }
    let start = p.t_max * p.noise_scale;
    if !(start > p.t_min) {
        return Err(Error::invalid(format!(
            "grid start t_max*noise_scale={start} must exceed t_min={}",
            p.t_min
        )));
    }
    let n = p.n_steps;
    let mut grid: Vec<f64> = (0..=n)
        .map(|i| {
            let f = i as f64 / n as f64;
            match p.spacing {
                Spacing::Linear => start + (p.t_min - start) * f,
                Spacing::Geometric => start * (p.t_min / start).powf(f),
            }
        })
        .collect();
    grid[0] = start;
    grid[n] = p.t_min;
    Ok(NoiseSchedule { t_max: p.t_max, t_min: p.t_min, n_steps: n, grid })
}

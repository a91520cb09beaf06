//! Continuous-embedding diffusion machinery: embedding table, time grid,
//! time warping, noise masks, the score and the Euler update.
//!
//! Forward noising is variance exploding, `X(t) = X0 + t·ε`, and the sampler
//! integrates the probability-flow ODE `dX/dt = (X − X̂0) / t`, which is the
//! ODE whose drift is `−t·S` for the score `S = (X̂0 − X) / t²`.

mod embedding;
mod mask;
mod schedule;
mod warp;

pub use embedding::{row_norm, EmbeddingTable};
pub use mask::{sample_mask, sample_mask_with, MaskSpec, MaskStrategy, NoiseMask};
pub use schedule::{make_grid, NoiseSchedule, ScheduleParams, Spacing};
pub use warp::{warp_sample, warp_update, TimeWarpCdf, MIN_WEIGHT};

use ndarray::{Array2, Zip};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::util::rng_from;

/// Sampler state: embeddings `X(t)`, the current time and which rows are
/// clean conditioning.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisyState<T> {
    pub x: Array2<T>,
    pub t: f64,
    /// `true` rows are clean conditioning and are never updated.
    pub cond_mask: Vec<bool>,
}

impl<T: Scalar> NoisyState<T> {
    pub fn seq_len(&self) -> usize {
        self.x.nrows()
    }

    /// Positions the sampler is generating.
    pub fn gen_mask(&self) -> Vec<bool> {
        self.cond_mask.iter().map(|c| !c).collect()
    }
}

/// Denoised estimate `X̂0`, one row per position.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoisedEstimate<T> {
    pub x0_hat: Array2<T>,
}

/// Noises rows flagged in `mask` with `t·ε`; other rows are copied verbatim.
pub fn add_noise_with<T: Scalar>(
    clean: &Array2<T>,
    mask: &[bool],
    t: f64,
    rng: &mut impl Rng,
) -> Result<NoisyState<T>> {
    if !(t >= 0.0) {
        return Err(Error::invalid(format!("noise level must be nonnegative, got {t}")));
    }
    if mask.len() != clean.nrows() {
        return Err(Error::LengthMismatch(mask.len(), clean.nrows()));
    }
    let mut x = clean.clone();
    for (mut row, &noised) in x.rows_mut().into_iter().zip(mask) {
        if noised {
            for v in row.iter_mut() {
                let eps: f64 = rng.sample(StandardNormal);
                *v += T::of(t * eps);
            }
        }
    }
    Ok(NoisyState { x, t, cond_mask: mask.iter().map(|m| !m).collect() })
}

pub fn add_noise<T: Scalar>(clean: &Array2<T>, mask: &[bool], t: f64, rng_seed: u64) -> Result<NoisyState<T>> {
    add_noise_with(clean, mask, t, &mut rng_from(rng_seed))
}

fn check_shapes<T>(state: &NoisyState<T>, est: &DenoisedEstimate<T>) -> Result<()> {
    if state.x.dim() != est.x0_hat.dim() {
        return Err(Error::invalid(format!(
            "state shape {:?} does not match estimate shape {:?}",
            state.x.dim(),
            est.x0_hat.dim()
        )));
    }
    Ok(())
}

/// `(X̂0 − X) / t²`.
pub fn score<T: Scalar>(state: &NoisyState<T>, est: &DenoisedEstimate<T>) -> Result<Array2<T>> {
    if state.t == 0.0 {
        return Err(Error::SingularScore);
    }
    check_shapes(state, est)?;
    let inv = T::of(1.0 / (state.t * state.t));
    Ok(Zip::from(&est.x0_hat)
        .and(&state.x)
        .map_collect(|&x0, &x| (x0 - x) * inv))
}

/// One Euler step of the probability-flow ODE from `state.t` to `t_next`:
/// `X ← X + (t_next − t)·(X − X̂0)/t` on generated rows.
pub fn euler_step<T: Scalar>(
    state: &NoisyState<T>,
    est: &DenoisedEstimate<T>,
    t_next: f64,
) -> Result<NoisyState<T>> {
    if !(t_next >= 0.0 && t_next < state.t) {
        return Err(Error::invalid(format!(
            "euler step needs 0 <= t_next < t, got t={} t_next={t_next}",
            state.t
        )));
    }
    check_shapes(state, est)?;
    let ratio = T::of((t_next - state.t) / state.t);
    let mut x = state.x.clone();
    for ((mut row, x0), &cond) in x.rows_mut().into_iter().zip(est.x0_hat.rows()).zip(&state.cond_mask) {
        if !cond {
            Zip::from(&mut row).and(&x0).for_each(|v, &x0| *v += ratio * (*v - x0));
        }
    }
    Ok(NoisyState { x, t: t_next, cond_mask: state.cond_mask.clone() })
}

//! Minimal transformer building blocks with hand-written backward passes.
//!
//! Every layer stores its weights as 2-D arrays (biases are `1 × n`) and
//! exposes them through [`Parameters`], which fixes a stable name and order
//! used by the optimizer, checkpoints and gradient checks. Gradients live in
//! a zeroed clone of the model itself.

mod adam;
mod layers;

pub use adam::{clip_global_norm, cosine_with_warmup, Adam};
pub use layers::{Attention, Block, BlockCache, CondLayerNorm, Ffn, Linear, Trunk, TrunkCache};

use ndarray::{Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::scalar::Scalar;

pub trait Parameters<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Array2<T>)>);
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Array2<T>)>);

    fn named(&self) -> Vec<(String, &Array2<T>)> {
        let mut out = Vec::new();
        self.visit("", &mut out);
        out
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Array2<T>)> {
        let mut out = Vec::new();
        self.visit_mut("", &mut out);
        out
    }

    fn num_params(&self) -> usize {
        self.named().iter().map(|(_, a)| a.len()).sum()
    }

    fn zeros_like(&self) -> Self
    where
        Self: Clone,
        T: Scalar,
    {
        let mut z = self.clone();
        for (_, a) in z.named_mut() {
            a.fill(T::zero());
        }
        z
    }

    fn all_finite(&self) -> bool
    where
        T: Scalar,
    {
        self.named().iter().all(|(_, a)| a.iter().all(|v| v.is_finite()))
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_owned()
    } else {
        format!("{prefix}.{name}")
    }
}

pub(crate) fn randn<T: Scalar>(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Array2<T> {
    Array2::from_shape_simple_fn((rows, cols), || T::of(std * rng.sample::<f64, _>(StandardNormal)))
}

/// Numerically stable row-wise softmax.
pub fn softmax_rows<T: Scalar>(logits: &Array2<T>) -> Array2<T> {
    let mut out = logits.clone();
    softmax_rows_inplace(&mut out);
    out
}

pub(crate) fn softmax_rows_inplace<T: Scalar>(x: &mut Array2<T>) {
    for mut row in x.axis_iter_mut(Axis(0)) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = T::one() / sum;
        row.mapv_inplace(|v| v * inv);
    }
}

/// Row-wise log-softmax, computed in `f64`.
pub fn log_softmax_row<T: Scalar>(row: impl IntoIterator<Item = T> + Clone) -> Vec<f64> {
    let max = row.clone().into_iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.f64()));
    let lse = max + row.clone().into_iter().map(|v| (v.f64() - max).exp()).sum::<f64>().ln();
    row.into_iter().map(|v| v.f64() - lse).collect()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

#[inline]
pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let k = T::of(0.044715);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let k = T::of(0.044715);
    let half = T::of(0.5);
    let th = (c * (x + k * x * x * x)).tanh();
    half * (T::one() + th) + half * x * (T::one() - th * th) * c * (T::one() + T::of(3.0) * k * x * x)
}

//! Time-conditioned transformer denoiser.
//!
//! The network maps noisy embeddings `X(t)` to per-position logits over the
//! vocabulary. The denoised estimate `X̂0` is never regressed directly: it is
//! the probability-weighted average of the embedding table under the
//! predicted categorical distribution (score interpolation).

use ndarray::{s, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{DenoisedEstimate, EmbeddingTable, NoisyState};
use crate::error::{Error, Result};
use crate::nn::{join, randn, softmax_rows, Linear, Parameters, Trunk, TrunkCache};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub vocab_size: usize,
    /// Embedding dimension `d`.
    #[serde(default = "defaults::embed_dim")]
    pub embed_dim: usize,
    #[serde(default = "defaults::model_dim")]
    pub model_dim: usize,
    #[serde(default = "defaults::heads")]
    pub heads: usize,
    #[serde(default = "defaults::layers")]
    pub layers: usize,
    #[serde(default = "defaults::ffn_mult")]
    pub ffn_mult: usize,
    #[serde(default = "defaults::seq_len")]
    pub seq_len: usize,
    /// Width of the sinusoidal `log t` features driving the conditional norms.
    #[serde(default = "defaults::time_features")]
    pub time_features: usize,
}

mod defaults {
    pub fn embed_dim() -> usize {
        64
    }
    pub fn model_dim() -> usize {
        64
    }
    pub fn heads() -> usize {
        4
    }
    pub fn layers() -> usize {
        2
    }
    pub fn ffn_mult() -> usize {
        4
    }
    pub fn seq_len() -> usize {
        64
    }
    pub fn time_features() -> usize {
        32
    }
}

impl DenoiserConfig {
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            embed_dim: defaults::embed_dim(),
            model_dim: defaults::model_dim(),
            heads: defaults::heads(),
            layers: defaults::layers(),
            ffn_mult: defaults::ffn_mult(),
            seq_len: defaults::seq_len(),
            time_features: defaults::time_features(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 || self.embed_dim == 0 || self.seq_len < 2 || self.layers == 0 {
            return Err(Error::invalid("denoiser dimensions must be positive (vocab >= 2, seq_len >= 2)"));
        }
        if self.heads == 0 || self.model_dim % self.heads != 0 {
            return Err(Error::invalid("model_dim must be a positive multiple of heads"));
        }
        if self.time_features < 2 || self.time_features % 2 != 0 {
            return Err(Error::invalid("time_features must be an even number >= 2"));
        }
        Ok(())
    }
}

/// Sinusoidal features of `ln t` at geometrically spaced frequencies in
/// `[0.1, 10]`.
pub fn time_features(t: f64, width: usize) -> Vec<f64> {
    let half = width / 2;
    let lt = t.max(1e-12).ln();
    let (lo, hi) = (0.1f64.ln(), 10.0f64.ln());
    let mut out = Vec::with_capacity(width);
    for k in 0..half {
        let frac = if half > 1 { k as f64 / (half - 1) as f64 } else { 0.0 };
        let w = (lo + (hi - lo) * frac).exp();
        out.push((w * lt).sin());
        out.push((w * lt).cos());
    }
    out
}

/// Input scaling `1 / sqrt(1 + t²)` that keeps noisy inputs at unit scale
/// for embeddings with unit per-component variance.
pub fn input_scale(t: f64) -> f64 {
    1.0 / (1.0 + t * t).sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser<T> {
    pub config: DenoiserConfig,
    pub input: Linear<T>,
    pub pos: Array2<T>,
    pub trunk: Trunk<T>,
}

pub struct DenoiserCache<T> {
    xin: Array2<T>,
    cond: Array2<T>,
    scales: Vec<f64>,
    trunk: TrunkCache<T>,
}

impl<T: Scalar> Denoiser<T> {
    pub fn new(config: DenoiserConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let input = Linear::new(c.embed_dim, c.model_dim, 1.0 / (c.embed_dim as f64).sqrt(), rng);
        let pos = randn(c.seq_len, c.model_dim, 0.02, rng);
        let trunk = Trunk::new(c.model_dim, c.heads, c.layers, c.ffn_mult, c.time_features, c.vocab_size, rng);
        Ok(Self { config, input, pos, trunk })
    }

    /// Forward pass over `times.len()` sequences stacked row-wise in `x`.
    pub fn forward_batch(&self, x: &Array2<T>, times: &[f64]) -> Result<(Array2<T>, DenoiserCache<T>)> {
        let s_len = self.config.seq_len;
        if x.nrows() != times.len() * s_len || x.ncols() != self.config.embed_dim {
            return Err(Error::invalid(format!(
                "denoiser input {:?} does not match {} sequences of {}x{}",
                x.dim(),
                times.len(),
                s_len,
                self.config.embed_dim
            )));
        }
        let scales: Vec<f64> = times.iter().map(|&t| input_scale(t)).collect();
        let mut xin = x.clone();
        for (b, &c) in scales.iter().enumerate() {
            let c = T::of(c);
            xin.slice_mut(s![b * s_len..(b + 1) * s_len, ..]).mapv_inplace(|v| v * c);
        }
        let mut h = self.input.forward(&xin);
        for b in 0..times.len() {
            let mut rows = h.slice_mut(s![b * s_len..(b + 1) * s_len, ..]);
            rows += &self.pos;
        }
        let f = self.config.time_features;
        let mut cond = Array2::zeros((times.len(), f));
        for (mut row, &t) in cond.rows_mut().into_iter().zip(times) {
            for (dst, v) in row.iter_mut().zip(time_features(t, f)) {
                *dst = T::of(v);
            }
        }
        let (logits, trunk) = self.trunk.forward(h, &cond, s_len, false);
        if !logits.iter().all(|v| v.is_finite()) {
            return Err(Error::NumericalOverflow);
        }
        Ok((logits, DenoiserCache { xin, cond, scales, trunk }))
    }

    /// Accumulates parameter gradients into `g` and returns `dL/dX`.
    pub fn backward(&self, cache: &DenoiserCache<T>, dlogits: &Array2<T>, g: &mut Denoiser<T>) -> Array2<T> {
        let s_len = self.config.seq_len;
        let dh = self.trunk.backward(&cache.trunk, dlogits, &cache.cond, s_len, &mut g.trunk);
        for b in 0..cache.scales.len() {
            g.pos += &dh.slice(s![b * s_len..(b + 1) * s_len, ..]);
        }
        let mut dx = self.input.backward(&cache.xin, &dh, &mut g.input);
        for (b, &c) in cache.scales.iter().enumerate() {
            let c = T::of(c);
            dx.slice_mut(s![b * s_len..(b + 1) * s_len, ..]).mapv_inplace(|v| v * c);
        }
        dx
    }

    /// `p(x | X(t), t)` for one sequence.
    pub fn denoise(&self, state: &NoisyState<T>) -> Result<TokenDistribution<T>> {
        let (logits, _) = self.forward_batch(&state.x, &[state.t])?;
        TokenDistribution::from_logits(logits)
    }
}

impl<T> Parameters<T> for Denoiser<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Array2<T>)>) {
        self.input.visit(&join(prefix, "input"), out);
        out.push((join(prefix, "pos"), &self.pos));
        self.trunk.visit(&join(prefix, "trunk"), out);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Array2<T>)>) {
        self.input.visit_mut(&join(prefix, "input"), out);
        out.push((join(prefix, "pos"), &mut self.pos));
        self.trunk.visit_mut(&join(prefix, "trunk"), out);
    }
}

/// Per-position categorical distribution over the vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenDistribution<T> {
    pub logits: Array2<T>,
    pub probs: Array2<T>,
}

impl<T: Scalar> TokenDistribution<T> {
    pub fn from_logits(logits: Array2<T>) -> Result<Self> {
        if !logits.iter().all(|v| v.is_finite()) {
            return Err(Error::NumericalOverflow);
        }
        let probs = softmax_rows(&logits);
        Ok(Self { logits, probs })
    }

    /// Wraps explicit probabilities (rows must sum to one). Logits are the
    /// clamped log-probabilities.
    pub fn from_probs(probs: Array2<T>) -> Self {
        let logits = probs.mapv(|p| T::of(p.f64().max(1e-300).ln()));
        Self { logits, probs }
    }

    pub fn seq_len(&self) -> usize {
        self.probs.nrows()
    }

    pub fn vocab_size(&self) -> usize {
        self.probs.ncols()
    }

    /// Row-wise argmax; ties resolve to the lowest id.
    pub fn argmax(&self) -> Vec<u32> {
        self.probs
            .axis_iter(Axis(0))
            .map(|row| {
                let mut best = 0usize;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best as u32
            })
            .collect()
    }
}

/// `X̂0[i] = Σ_v p[i, v] · E[v]`.
pub fn interpolate_x0<T: Scalar>(dist: &TokenDistribution<T>, table: &EmbeddingTable<T>) -> Result<DenoisedEstimate<T>> {
    if dist.vocab_size() != table.vocab_size() {
        return Err(Error::LengthMismatch(dist.vocab_size(), table.vocab_size()));
    }
    Ok(DenoisedEstimate { x0_hat: dist.probs.dot(table.matrix()) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::row_norm;
    use crate::util::rng_from;
    use ndarray::array;

    fn tiny_config() -> DenoiserConfig {
        DenoiserConfig {
            vocab_size: 12,
            embed_dim: 8,
            model_dim: 16,
            heads: 2,
            layers: 1,
            ffn_mult: 2,
            seq_len: 6,
            time_features: 4,
        }
    }

    fn noisy(cfg: &DenoiserConfig, t: f64, seed: u64) -> NoisyState<f32> {
        let x = randn(cfg.seq_len, cfg.embed_dim, t, &mut rng_from(seed));
        NoisyState { x, t, cond_mask: vec![false; cfg.seq_len] }
    }

    #[test]
    fn denoise_is_deterministic() {
        let cfg = tiny_config();
        let model = Denoiser::<f32>::new(cfg.clone(), &mut rng_from(0)).unwrap();
        let s = noisy(&cfg, 3.0, 1);
        let a = model.denoise(&s).unwrap();
        let b = model.denoise(&s).unwrap();
        assert_eq!(a.logits, b.logits);
    }

    #[test]
    fn probabilities_normalized_and_positive() {
        let cfg = tiny_config();
        let model = Denoiser::<f64>::new(cfg.clone(), &mut rng_from(3)).unwrap();
        let s = NoisyState { x: randn(cfg.seq_len, cfg.embed_dim, 5.0, &mut rng_from(4)), t: 5.0, cond_mask: vec![false; 6] };
        let d = model.denoise(&s).unwrap();
        for row in d.probs.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn untrained_entropy_near_uniform() {
        let cfg = DenoiserConfig::desk(60);
        let model = Denoiser::<f32>::new(cfg.clone(), &mut rng_from(5)).unwrap();
        let s = noisy(&cfg, 10.0, 6);
        let d = model.denoise(&s).unwrap();
        let max = (60f64).ln();
        for row in d.probs.rows() {
            let h: f64 = row.iter().map(|&p| -(p as f64) * (p as f64).ln()).sum();
            assert!((h - max).abs() < 0.2 * max, "entropy {h} vs ln|V| {max}");
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let cfg = tiny_config();
        let model = Denoiser::<f32>::new(cfg, &mut rng_from(0)).unwrap();
        let s = NoisyState { x: Array2::zeros((5, 8)), t: 1.0, cond_mask: vec![false; 5] };
        assert!(model.denoise(&s).is_err());
    }

    #[test]
    fn interpolation_cases() {
        let table = EmbeddingTable::new(array![[2.0f64, 0.0], [0.0, 2.0], [-2.0, 0.0]]).unwrap();
        let e = table.matrix().clone();
        let onehot = TokenDistribution::from_probs(array![[0.0, 1.0, 0.0]]);
        assert_eq!(interpolate_x0(&onehot, &table).unwrap().x0_hat.row(0), e.row(1));
        let anti = TokenDistribution::from_probs(array![[0.5, 0.0, 0.5]]);
        assert_eq!(interpolate_x0(&anti, &table).unwrap().x0_hat, array![[0.0, 0.0]]);
        let mix = TokenDistribution::from_probs(array![[0.75, 0.25, 0.0]]);
        let got = interpolate_x0(&mix, &table).unwrap().x0_hat;
        let want = &e.row(0) * 0.75 + &e.row(1) * 0.25;
        assert!((&got.row(0) - &want).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn interpolation_stays_in_ball() {
        let cfg = tiny_config();
        let model = Denoiser::<f64>::new(cfg.clone(), &mut rng_from(8)).unwrap();
        let table = EmbeddingTable::<f64>::random(cfg.vocab_size, cfg.embed_dim, &mut rng_from(9)).unwrap();
        for seed in 0..10 {
            let s = NoisyState { x: randn(6, 8, 4.0, &mut rng_from(seed)), t: 4.0, cond_mask: vec![false; 6] };
            let x0 = interpolate_x0(&model.denoise(&s).unwrap(), &table).unwrap().x0_hat;
            for row in x0.rows() {
                assert!(row_norm(row.iter()) <= table.target_norm() + 1e-6);
            }
        }
    }

    #[test]
    fn argmax_lowest_id_tiebreak() {
        let d = TokenDistribution::from_probs(array![[0.4f64, 0.4, 0.2], [0.1, 0.2, 0.7]]);
        assert_eq!(d.argmax(), vec![0, 2]);
    }

    #[test]
    fn time_features_are_bounded() {
        for t in [1e-3, 0.1, 1.0, 10.0, 300.0] {
            let f = time_features(t, 32);
            assert_eq!(f.len(), 32);
            assert!(f.iter().all(|v| v.abs() <= 1.0));
        }
    }
}

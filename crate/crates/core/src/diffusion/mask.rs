//! Choice of positions that receive noise during training.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::rng_from;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskStrategy {
    Mlm,
    Prefix,
    Span,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskSpec {
    pub strategy: MaskStrategy,
    /// Per-position noise probability for MLM masking.
    #[serde(default = "MaskSpec::default_mlm_rate")]
    pub mlm_rate: f64,
    /// Inclusive range of clean prefix lengths for prefix masking.
    #[serde(default = "MaskSpec::default_prefix_range")]
    pub prefix_len_range: (usize, usize),
    /// Upper bound on the number of spans.
    #[serde(default = "MaskSpec::default_k_max")]
    pub k_max: usize,
    /// Probability that each span is noised.
    #[serde(default = "MaskSpec::default_span_prob")]
    pub span_noise_prob: f64,
}

impl MaskSpec {
    fn default_mlm_rate() -> f64 {
        0.5
    }
    fn default_prefix_range() -> (usize, usize) {
        (0, 32)
    }
    fn default_k_max() -> usize {
        9
    }
    fn default_span_prob() -> f64 {
        0.5
    }

    pub fn mlm(rate: f64) -> Self {
        Self { strategy: MaskStrategy::Mlm, mlm_rate: rate, ..Self::span() }
    }

    pub fn prefix(min: usize, max: usize) -> Self {
        Self { strategy: MaskStrategy::Prefix, prefix_len_range: (min, max), ..Self::span() }
    }

    pub fn span() -> Self {
        Self {
            strategy: MaskStrategy::Span,
            mlm_rate: Self::default_mlm_rate(),
            prefix_len_range: Self::default_prefix_range(),
            k_max: Self::default_k_max(),
            span_noise_prob: Self::default_span_prob(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if !prob(self.mlm_rate) || !prob(self.span_noise_prob) {
            return Err(Error::invalid("mask probabilities must lie in [0, 1]"));
        }
        if self.k_max == 0 {
            return Err(Error::invalid("k_max must be at least 1"));
        }
        if self.prefix_len_range.0 > self.prefix_len_range.1 {
            return Err(Error::invalid("prefix_len_range must be ordered"));
        }
        Ok(())
    }
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self::span()
    }
}

/// `true` marks a noised position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NoiseMask {
    pub positions: Vec<bool>,
    /// Set when both draws came out all-false and the second was kept.
    pub degenerate: bool,
}

impl NoiseMask {
    pub fn count(&self) -> usize {
        self.positions.iter().filter(|&&m| m).count()
    }
}

fn draw(spec: &MaskSpec, seq_len: usize, rng: &mut impl Rng) -> Vec<bool> {
    match spec.strategy {
        MaskStrategy::Mlm => (0..seq_len).map(|_| rng.random_bool(spec.mlm_rate)).collect(),
        MaskStrategy::Prefix => {
            let hi = spec.prefix_len_range.1.min(seq_len - 1);
            let lo = spec.prefix_len_range.0.min(hi);
            let prefix = rng.random_range(lo..=hi);
            (0..seq_len).map(|i| i >= prefix).collect()
        }
        MaskStrategy::Span => {
            let k = rng.random_range(1..=spec.k_max.min(seq_len));
            let mut cuts = rand::seq::index::sample(rng, seq_len - 1, k - 1)
                .into_iter()
                .map(|c| c + 1)
                .collect::<Vec<_>>();
            cuts.sort_unstable();
            cuts.push(seq_len);
            let mut mask = Vec::with_capacity(seq_len);
            let mut start = 0;
            for end in cuts {
                let noised = rng.random_bool(spec.span_noise_prob);
                mask.extend(std::iter::repeat_n(noised, end - start));
                start = end;
            }
            mask
        }
    }
}

/// Draws a noise mask. An all-false mask is redrawn once; if the redraw is
/// also empty it is returned with `degenerate` set.
pub fn sample_mask_with(spec: &MaskSpec, seq_len: usize, rng: &mut impl Rng) -> Result<NoiseMask> {
    if seq_len < 2 {
        return Err(Error::invalid("seq_len must be at least 2"));
    }
    spec.validate()?;
    let first = draw(spec, seq_len, rng);
    if first.iter().any(|&m| m) {
        return Ok(NoiseMask { positions: first, degenerate: false });
    }
    let second = draw(spec, seq_len, rng);
    let degenerate = !second.iter().any(|&m| m);
    Ok(NoiseMask { positions: second, degenerate })
}

pub fn sample_mask(spec: &MaskSpec, seq_len: usize, rng_seed: u64) -> Result<NoiseMask> {
    sample_mask_with(spec, seq_len, &mut rng_from(rng_seed))
}

//! Small causal language model used as the in-repo AR-NLL scorer, and the
//! AR-NLL computation itself.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::PAD_ID;
use crate::error::{Error, Result};
use crate::nn::{join, log_softmax_row, randn, Parameters, Trunk, TrunkCache};
use crate::scalar::Scalar;

/// Source of per-token log-probabilities `log p(tokens[i] | tokens[..i])`.
pub trait LogProbSource {
    fn token_logprobs(&self, tokens: &[u32]) -> Result<Vec<f64>>;
}

/// Mean negative log-probability of `continuation` given `prefix`.
pub fn ar_nll(scorer: &dyn LogProbSource, prefix: &[u32], continuation: &[u32]) -> Result<f64> {
    if continuation.is_empty() {
        return Err(Error::invalid("continuation must be nonempty"));
    }
    let tokens: Vec<u32> = prefix.iter().chain(continuation).copied().collect();
    let lps = scorer.token_logprobs(&tokens)?;
    let tail = &lps[prefix.len()..];
    Ok(-tail.iter().sum::<f64>() / tail.len() as f64)
}

/// Mean negative log-probability over the positions flagged in `scored`,
/// each conditioned on every earlier token.
pub fn ar_nll_masked(scorer: &dyn LogProbSource, tokens: &[u32], scored: &[bool]) -> Result<f64> {
    if tokens.len() != scored.len() {
        return Err(Error::LengthMismatch(tokens.len(), scored.len()));
    }
    let n = scored.iter().filter(|&&m| m).count();
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    let lps = scorer.token_logprobs(tokens)?;
    Ok(-lps.iter().zip(scored).filter(|(_, &m)| m).map(|(lp, _)| lp).sum::<f64>() / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArConfig {
    pub vocab_size: usize,
    #[serde(default = "defaults::model_dim")]
    pub model_dim: usize,
    #[serde(default = "defaults::heads")]
    pub heads: usize,
    #[serde(default = "defaults::layers")]
    pub layers: usize,
    #[serde(default = "defaults::ffn_mult")]
    pub ffn_mult: usize,
    /// Longest token sequence the model can score.
    pub max_len: usize,
}

mod defaults {
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
}

impl ArConfig {
    pub fn desk(vocab_size: usize, max_len: usize) -> Self {
        Self {
            vocab_size,
            model_dim: defaults::model_dim(),
            heads: defaults::heads(),
            layers: defaults::layers(),
            ffn_mult: defaults::ffn_mult(),
            max_len,
        }
    }
}

/// Causal transformer. The PAD token doubles as beginning-of-sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct ArModel<T> {
    pub config: ArConfig,
    pub tok: Array2<T>,
    pub pos: Array2<T>,
    pub trunk: Trunk<T>,
}

pub struct ArCache<T> {
    inputs: Vec<Vec<u32>>,
    cond: Array2<T>,
    trunk: TrunkCache<T>,
}

impl<T: Scalar> ArModel<T> {
    pub fn new(config: ArConfig, rng: &mut impl Rng) -> Result<Self> {
        if config.heads == 0 || config.model_dim % config.heads != 0 || config.max_len == 0 {
            return Err(Error::invalid("invalid AR model dimensions"));
        }
        let c = &config;
        let tok = randn(c.vocab_size, c.model_dim, 0.02, rng);
        let pos = randn(c.max_len, c.model_dim, 0.02, rng);
        let trunk = Trunk::new(c.model_dim, c.heads, c.layers, c.ffn_mult, 0, c.vocab_size, rng);
        Ok(Self { config, tok, pos, trunk })
    }

    fn shifted(&self, seq: &[u32]) -> Vec<u32> {
        std::iter::once(PAD_ID).chain(seq[..seq.len() - 1].iter().copied()).collect()
    }

    /// Next-token logits for equal-length target sequences; row `b·L + i`
    /// predicts `targets[b][i]` from `targets[b][..i]`.
    pub fn forward(&self, targets: &[&[u32]]) -> Result<(Array2<T>, ArCache<T>)> {
        let len = targets.first().map(|s| s.len()).unwrap_or(0);
        if len == 0 || len > self.config.max_len {
            return Err(Error::invalid(format!("AR input length {len} outside 1..={}", self.config.max_len)));
        }
        let d = self.config.model_dim;
        let mut h = Array2::zeros((targets.len() * len, d));
        let mut inputs = Vec::with_capacity(targets.len());
        for (b, seq) in targets.iter().enumerate() {
            if seq.len() != len {
                return Err(Error::LengthMismatch(seq.len(), len));
            }
            if let Some(&id) = seq.iter().find(|&&id| id as usize >= self.config.vocab_size) {
                return Err(Error::TokenOutOfRange { id, size: self.config.vocab_size });
            }
            let input = self.shifted(seq);
            for (i, &id) in input.iter().enumerate() {
                let mut row = h.row_mut(b * len + i);
                row.assign(&self.tok.row(id as usize));
                row += &self.pos.row(i);
            }
            inputs.push(input);
        }
        let cond = Array2::zeros((targets.len(), 0));
        let (logits, trunk) = self.trunk.forward(h, &cond, len, true);
        if !logits.iter().all(|v| v.is_finite()) {
            return Err(Error::NumericalOverflow);
        }
        Ok((logits, ArCache { inputs, cond, trunk }))
    }

    pub fn backward(&self, cache: &ArCache<T>, dlogits: &Array2<T>, g: &mut ArModel<T>) {
        let len = cache.inputs[0].len();
        let dh = self.trunk.backward(&cache.trunk, dlogits, &cache.cond, len, &mut g.trunk);
        for (b, input) in cache.inputs.iter().enumerate() {
            for (i, &id) in input.iter().enumerate() {
                let row = dh.row(b * len + i);
                let mut gt = g.tok.row_mut(id as usize);
                gt += &row;
                let mut gp = g.pos.row_mut(i);
                gp += &row;
            }
        }
    }
}

impl<T: Scalar> LogProbSource for ArModel<T> {
    fn token_logprobs(&self, tokens: &[u32]) -> Result<Vec<f64>> {
        let (logits, _) = self.forward(&[tokens])?;
        Ok(logits
            .rows()
            .into_iter()
            .zip(tokens)
            .map(|(row, &id)| log_softmax_row(row.iter().copied())[id as usize])
            .collect())
    }
}

impl<T> Parameters<T> for ArModel<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Array2<T>)>) {
        out.push((join(prefix, "tok"), &self.tok));
        out.push((join(prefix, "pos"), &self.pos));
        self.trunk.visit(&join(prefix, "trunk"), out);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Array2<T>)>) {
        out.push((join(prefix, "tok"), &mut self.tok));
        out.push((join(prefix, "pos"), &mut self.pos));
        self.trunk.visit_mut(&join(prefix, "trunk"), out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rng_from;
    use ndarray::s;

    /// Context-free model assigning fixed probabilities per token id.
    struct Table(Vec<f64>);

    impl LogProbSource for Table {
        fn token_logprobs(&self, tokens: &[u32]) -> Result<Vec<f64>> {
            Ok(tokens.iter().map(|&t| self.0[t as usize].ln()).collect())
        }
    }

    #[test]
    fn perfect_model_scores_zero() {
        let m = Table(vec![1.0, 1.0, 1.0]);
        assert_eq!(ar_nll(&m, &[0, 1], &[2, 2, 1]).unwrap(), 0.0);
    }

    #[test]
    fn uniform_model_scores_ln_v() {
        let m = Table(vec![0.25; 4]);
        assert!((ar_nll(&m, &[], &[0, 3, 2]).unwrap() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn two_token_hand_case() {
        let m = Table(vec![0.5, 0.25]);
        let want = (2f64.ln() + 4f64.ln()) / 2.0;
        assert!((ar_nll(&m, &[], &[0, 1]).unwrap() - want).abs() < 1e-12);
        assert!((want - 1.0397).abs() < 1e-4);
    }

    #[test]
    fn masked_scoring_matches_prefix_form() {
        let model = ArModel::<f64>::new(ArConfig::desk(7, 10), &mut rng_from(1)).unwrap();
        let tokens = [3, 1, 4, 1, 5, 2];
        let a = ar_nll(&model, &tokens[..2], &tokens[2..]).unwrap();
        let b = ar_nll_masked(&model, &tokens, &[false, false, true, true, true, true]).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn untrained_model_near_uniform() {
        let model = ArModel::<f32>::new(ArConfig::desk(50, 20), &mut rng_from(2)).unwrap();
        let nll = ar_nll(&model, &[], &[1, 2, 3, 4, 5, 6, 7, 8]).unwrap();
        let ln_v = 50f64.ln();
        assert!((nll - ln_v).abs() < 0.2 * ln_v, "{nll}");
    }

    #[test]
    fn deterministic_and_independent_of_batch() {
        let model = ArModel::<f64>::new(ArConfig::desk(9, 8), &mut rng_from(3)).unwrap();
        let a: &[u32] = &[1, 2, 3, 4];
        let b: &[u32] = &[4, 3, 2, 1];
        let (both, _) = model.forward(&[a, b]).unwrap();
        let (swapped, _) = model.forward(&[b, a]).unwrap();
        let (ab, ba) = (both.slice(s![..4, ..]), both.slice(s![4.., ..]));
        assert!((&ab - &swapped.slice(s![4.., ..])).iter().all(|v| v.abs() < 1e-12));
        assert!((&ba - &swapped.slice(s![..4, ..])).iter().all(|v| v.abs() < 1e-12));
        assert_eq!(model.token_logprobs(a).unwrap(), model.token_logprobs(a).unwrap());
    }
}

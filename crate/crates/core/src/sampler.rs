//! Generation loop: denoise, record, check the halting criterion, then take
//! one Euler step down the time grid.

use ndarray::Array2;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{TokenSeq, PAD_ID};
use crate::denoiser::{interpolate_x0, Denoiser, TokenDistribution};
use crate::diffusion::{euler_step, make_grid, row_norm, DenoisedEstimate, EmbeddingTable, NoiseSchedule, NoisyState, ScheduleParams, Spacing};
use crate::error::{Error, Result};
use crate::halting::{Criterion, CriterionState, HaltConfig};
use crate::scalar::Scalar;
use crate::trace::{GenerationTrace, Matrix, StepRecord, TraceMeta, Verbosity, TRACE_VERSION};
use crate::util::{derive_seed, rng_from};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase", deny_unknown_fields)]
pub enum Conditioning {
    #[default]
    Unconditional,
    /// The first `n` positions are clean prompt tokens.
    Prefix { n: usize },
    /// `n / 2` clean prompt tokens at each end.
    Enclosed { n: usize },
}

impl Conditioning {
    /// `true` at conditioned positions.
    pub fn cond_mask(&self, seq_len: usize) -> Result<Vec<bool>> {
        let mask: Vec<bool> = match *self {
            Conditioning::Unconditional => vec![false; seq_len],
            Conditioning::Prefix { n } => (0..seq_len).map(|i| i < n).collect(),
            Conditioning::Enclosed { n } => {
                let half = n / 2;
                (0..seq_len).map(|i| i < half || i + half >= seq_len).collect()
            }
        };
        if mask.iter().all(|&c| c) {
            return Err(Error::invalid(format!("conditioning {self:?} leaves nothing to generate in {seq_len} positions")));
        }
        Ok(mask)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    #[serde(default = "defaults::n_steps")]
    pub n_steps: usize,
    /// Multiplies the initial noise; 0 starts generated rows at the origin.
    #[serde(default = "defaults::noise_scale")]
    pub noise_scale: f64,
    #[serde(default)]
    pub conditioning: Conditioning,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub halt: Option<HaltConfig>,
    #[serde(default)]
    pub record: Verbosity,
    /// Top of the time grid; defaults to the checkpoint's training `t_max`.
    #[serde(default)]
    pub t_max: Option<f64>,
    /// Bottom of the time grid as a fraction of `t_max`.
    #[serde(default = "defaults::t_min_frac")]
    pub t_min_frac: f64,
    #[serde(default = "defaults::spacing")]
    pub spacing: Spacing,
}

mod defaults {
    use crate::diffusion::Spacing;

    pub fn n_steps() -> usize {
        200
    }
    pub fn noise_scale() -> f64 {
        1.0
    }
    pub fn t_min_frac() -> f64 {
        0.01
    }
    pub fn spacing() -> Spacing {
        Spacing::Geometric
    }
}

impl Default for GenConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 {
            return Err(Error::invalid("n_steps must be at least 1"));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::invalid("noise_scale must be finite and nonnegative"));
        }
        if !(self.t_min_frac > 0.0 && self.t_min_frac < 1.0) {
            return Err(Error::invalid("t_min_frac must lie in (0, 1)"));
        }
        if let Some(h) = &self.halt {
            h.validate(self.n_steps)?;
        }
        Ok(())
    }

    pub fn schedule(&self, default_t_max: f64) -> Result<NoiseSchedule> {
        let t_max = self.t_max.unwrap_or(default_t_max);
        make_grid(&ScheduleParams {
            t_max,
            t_min: self.t_min_frac * t_max,
            n_steps: self.n_steps,
            noise_scale: 1.0,
            spacing: self.spacing,
        })
    }
}

/// Maps a noisy state to a token distribution and the denoised estimate.
pub trait Estimator<T>: Sync {
    fn estimate(&self, state: &NoisyState<T>) -> Result<(TokenDistribution<T>, DenoisedEstimate<T>)>;
    fn table(&self) -> &EmbeddingTable<T>;
    fn seq_len(&self) -> usize;
}

/// A trained denoiser with its embedding table, estimating `X̂0` by score
/// interpolation.
pub struct Ddlm<T> {
    pub model: Denoiser<T>,
    pub table: EmbeddingTable<T>,
}

impl<T: Scalar> Estimator<T> for Ddlm<T> {
    fn estimate(&self, state: &NoisyState<T>) -> Result<(TokenDistribution<T>, DenoisedEstimate<T>)> {
        let dist = self.model.denoise(state)?;
        let est = interpolate_x0(&dist, &self.table)?;
        Ok((dist, est))
    }

    fn table(&self) -> &EmbeddingTable<T> {
        &self.table
    }

    fn seq_len(&self) -> usize {
        self.model.config.seq_len
    }
}

/// Builds the starting state: generated rows are
/// `noise_scale · t_start · ε`, conditioned rows are the prompt embeddings.
pub fn init_state<T: Scalar>(
    cfg: &GenConfig,
    prompt: Option<&TokenSeq>,
    table: &EmbeddingTable<T>,
    schedule: &NoiseSchedule,
    seq_len: usize,
    rng: &mut impl rand::Rng,
) -> Result<(NoisyState<T>, Vec<u32>)> {
    let cond = cfg.conditioning.cond_mask(seq_len)?;
    let mut prompt_ids = vec![PAD_ID; seq_len];
    match prompt {
        Some(p) if p.len() > seq_len => {
            return Err(Error::invalid(format!("prompt of {} tokens exceeds seq_len {seq_len}", p.len())));
        }
        Some(p) => prompt_ids[..p.len()].copy_from_slice(p.ids()),
        None if cond.iter().any(|&c| c) => return Err(Error::invalid("conditioning requires a prompt")),
        None => {}
    }
    let clean = table.embed(&TokenSeq::new(prompt_ids.clone()))?;
    let scale = cfg.noise_scale * schedule.start();
    let mut x = Array2::zeros((seq_len, table.dim()));
    for (i, mut row) in x.rows_mut().into_iter().enumerate() {
        if cond[i] {
            row.assign(&clean.row(i));
        } else {
            for v in row.iter_mut() {
                let eps: f64 = rng.sample(StandardNormal);
                *v = T::of(scale * eps);
            }
        }
    }
    Ok((NoisyState { x, t: schedule.start(), cond_mask: cond }, prompt_ids))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenResult {
    pub tokens: TokenSeq,
    pub halt_step: usize,
    /// The configured criterion fired (possibly at the last step).
    pub halted_early: bool,
    pub seed: u64,
    pub trace: GenerationTrace,
}

fn mean_gen_norm<T: Scalar>(x: &Array2<T>, gen: &[bool]) -> f64 {
    let norms: Vec<f64> = x.rows().into_iter().zip(gen).filter(|(_, &g)| g).map(|(r, _)| row_norm(r.iter())).collect();
    norms.iter().sum::<f64>() / norms.len() as f64
}

/// Run metadata copied into every trace.
#[derive(Clone, Debug, Default)]
pub struct RunInfo {
    pub run_id: String,
    pub checkpoint_id: String,
    pub config: serde_json::Value,
}

/// Runs one sample. Statistics are recorded at every grid time; the
/// criterion sees them before the Euler update.
pub fn generate<T: Scalar>(
    est: &dyn Estimator<T>,
    cfg: &GenConfig,
    schedule: &NoiseSchedule,
    prompt: Option<&TokenSeq>,
    seed: u64,
    info: &RunInfo,
) -> Result<GenResult> {
    cfg.validate()?;
    if schedule.n_steps != cfg.n_steps {
        return Err(Error::LengthMismatch(schedule.n_steps, cfg.n_steps));
    }
    let seq_len = est.seq_len();
    let (mut state, prompt_ids) = init_state(cfg, prompt, est.table(), schedule, seq_len, &mut rng_from(seed))?;
    let gen = state.gen_mask();
    let mut trace = GenerationTrace::new(TraceMeta {
        version: TRACE_VERSION,
        run_id: info.run_id.clone(),
        checkpoint_id: info.checkpoint_id.clone(),
        seed,
        n_max: cfg.n_steps,
        gen_mask: gen.clone(),
        prompt: prompt.map(|p| p.ids().to_vec()),
        config: info.config.clone(),
    });
    let mut criterion = cfg.halt.clone().map(|h| Criterion::new(h, cfg.n_steps)).transpose()?;
    let mut cstate = CriterionState::<T>::default();
    let states = cfg.record == Verbosity::StatsStates;
    for k in 0..=cfg.n_steps {
        let at = |e: Error| Error::AtStep { step: k, source: Box::new(e) };
        let (dist, x0) = est.estimate(&state).map_err(at)?;
        let mut tokens = dist.argmax();
        for (i, t) in tokens.iter_mut().enumerate() {
            if state.cond_mask[i] {
                *t = prompt_ids[i];
            }
        }
        let stats = cstate.observe(&dist, &tokens, &gen).map_err(at)?;
        trace.record_step(StepRecord {
            step: k,
            t: state.t,
            entropy_mean: stats.entropy,
            kl_mean: stats.kl,
            token_switches: stats.switches,
            l2_x: mean_gen_norm(&state.x, &gen),
            l2_x0hat: mean_gen_norm(&x0.x0_hat, &gen),
            tokens: Some(tokens.clone()),
            x: states.then(|| Matrix::from_array(&state.x)),
            x0hat: states.then(|| Matrix::from_array(&x0.x0_hat)),
        })?;
        let halt = match criterion.as_mut() {
            Some(c) => c.step(&stats).map_err(at)?.halt,
            None => false,
        };
        if halt || k == cfg.n_steps {
            return Ok(GenResult { tokens: TokenSeq::new(tokens), halt_step: k, halted_early: halt, seed, trace });
        }
        state = euler_step(&state, &x0, schedule.grid[k + 1]).map_err(at)?;
    }
    unreachable!("loop returns at the final step")
}

/// `n_per_prompt` samples for each prompt with seeds derived from
/// `(cfg.seed, prompt index, sample index)`. Results are ordered by prompt,
/// then sample.
pub fn generate_batch<T: Scalar>(
    est: &dyn Estimator<T>,
    cfg: &GenConfig,
    schedule: &NoiseSchedule,
    prompts: &[Option<TokenSeq>],
    n_per_prompt: usize,
    info: &RunInfo,
) -> Result<Vec<GenResult>> {
    let jobs: Vec<(usize, usize)> = (0..prompts.len()).flat_map(|p| (0..n_per_prompt).map(move |s| (p, s))).collect();
    jobs.par_iter()
        .map(|&(p, s)| {
            let seed = derive_seed(cfg.seed, &[p as u64, s as u64]);
            generate(est, cfg, schedule, prompts[p].as_ref(), seed, info)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::DenoiserConfig;
    use crate::halting::replay;

    fn tiny() -> Ddlm<f64> {
        let cfg = DenoiserConfig {
            embed_dim: 8,
            model_dim: 16,
            heads: 2,
            layers: 1,
            seq_len: 10,
            time_features: 8,
            ..DenoiserConfig::desk(7)
        };
        let mut rng = rng_from(1);
        Ddlm { model: Denoiser::new(cfg, &mut rng).unwrap(), table: EmbeddingTable::random(7, 8, &mut rng).unwrap() }
    }

    /// Returns `X̂0 = X` (zero score) and a fixed distribution.
    struct Frozen(EmbeddingTable<f64>);

    impl Estimator<f64> for Frozen {
        fn estimate(&self, state: &NoisyState<f64>) -> Result<(TokenDistribution<f64>, DenoisedEstimate<f64>)> {
            let mut p = Array2::from_elem((state.seq_len(), 3), 0.2);
            p.column_mut(1).fill(0.6);
            Ok((TokenDistribution::from_probs(p), DenoisedEstimate { x0_hat: state.x.clone() }))
        }
        fn table(&self) -> &EmbeddingTable<f64> {
            &self.0
        }
        fn seq_len(&self) -> usize {
            6
        }
    }

    fn cfg(n: usize) -> GenConfig {
        GenConfig { n_steps: n, ..GenConfig::default() }
    }

    #[test]
    fn conditioning_masks() {
        let p = Conditioning::Prefix { n: 32 }.cond_mask(64).unwrap();
        assert!(p[..32].iter().all(|&c| c) && p[32..].iter().all(|&c| !c));
        let e = Conditioning::Enclosed { n: 32 }.cond_mask(64).unwrap();
        assert_eq!(e.iter().filter(|&&c| c).count(), 32);
        assert!(e[..16].iter().all(|&c| c) && e[48..].iter().all(|&c| c) && e[16..48].iter().all(|&c| !c));
        assert!(Conditioning::Prefix { n: 64 }.cond_mask(64).is_err());
    }

    #[test]
    fn full_run_without_criterion() {
        let m = tiny();
        let c = cfg(20);
        let r = generate(&m, &c, &c.schedule(10.0).unwrap(), None, 3, &RunInfo::default()).unwrap();
        assert_eq!(r.halt_step, 20);
        assert!(!r.halted_early);
        assert_eq!(r.trace.records.len(), 21);
        assert_eq!(r.tokens.len(), 10);
        assert!(r.trace.records[0].kl_mean.is_none());
    }

    #[test]
    fn fixed_zero_returns_first_argmax() {
        let m = tiny();
        let c = GenConfig { halt: Some(HaltConfig::fixed(0)), ..cfg(20) };
        let sched = c.schedule(10.0).unwrap();
        let r = generate(&m, &c, &sched, None, 3, &RunInfo::default()).unwrap();
        assert_eq!(r.halt_step, 0);
        assert!(r.halted_early);
        let full = generate(&m, &cfg(20), &sched, None, 3, &RunInfo::default()).unwrap();
        assert_eq!(r.tokens.ids(), full.trace.records[0].tokens.as_deref().unwrap());
    }

    #[test]
    fn prompt_is_frozen_and_echoed() {
        let m = tiny();
        let prompt = TokenSeq::new(vec![1, 2, 3, 4, 5, 6, 1, 2, 3, 4]);
        let c = GenConfig { conditioning: Conditioning::Enclosed { n: 4 }, record: Verbosity::StatsStates, ..cfg(10) };
        let r = generate(&m, &c, &c.schedule(10.0).unwrap(), Some(&prompt), 9, &RunInfo::default()).unwrap();
        let clean = m.table.embed(&prompt).unwrap();
        for rec in &r.trace.records {
            let x = rec.x.as_ref().unwrap();
            for i in [0, 1, 8, 9] {
                let want: Vec<f64> = clean.row(i).to_vec();
                assert_eq!(x.row(i), &want[..]);
            }
        }
        let ids = r.tokens.ids();
        assert_eq!([ids[0], ids[1], ids[8], ids[9]], [1, 2, 3, 4]);
    }

    #[test]
    fn zero_noise_is_seed_independent() {
        let m = tiny();
        let c = GenConfig { noise_scale: 0.0, conditioning: Conditioning::Prefix { n: 3 }, ..cfg(15) };
        let sched = c.schedule(10.0).unwrap();
        let prompt = TokenSeq::new(vec![2, 3, 4]);
        let a = generate(&m, &c, &sched, Some(&prompt), 1, &RunInfo::default()).unwrap();
        let b = generate(&m, &c, &sched, Some(&prompt), 2, &RunInfo::default()).unwrap();
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(a.trace.records, b.trace.records);
    }

    #[test]
    fn batch_is_ordered_and_reproducible() {
        let m = tiny();
        let c = cfg(5);
        let sched = c.schedule(10.0).unwrap();
        let a = generate_batch(&m, &c, &sched, &[None, None], 5, &RunInfo::default()).unwrap();
        let b = generate_batch(&m, &c, &sched, &[None, None], 5, &RunInfo::default()).unwrap();
        assert_eq!(a.len(), 10);
        assert_eq!(a, b);
        let seeds: std::collections::HashSet<u64> = a.iter().map(|r| r.seed).collect();
        assert_eq!(seeds.len(), 10);
        assert_eq!(a[7].seed, derive_seed(0, &[1, 2]));
    }

    #[test]
    fn frozen_estimator_patience_halts_at_window() {
        let est = Frozen(EmbeddingTable::random(3, 4, &mut rng_from(0)).unwrap());
        let c = GenConfig { halt: Some(HaltConfig::patience(4, 0)), ..cfg(30) };
        let r = generate(&est, &c, &c.schedule(10.0).unwrap(), None, 0, &RunInfo::default()).unwrap();
        assert_eq!(r.halt_step, 4);
        let toks: Vec<&Vec<u32>> = r.trace.records.iter().map(|r| r.tokens.as_ref().unwrap()).collect();
        assert!(toks.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn replay_matches_live() {
        let m = tiny();
        let sched = cfg(40).schedule(10.0).unwrap();
        let full = generate(&m, &cfg(40), &sched, None, 5, &RunInfo::default()).unwrap();
        let h = full.trace.records.iter().map(|r| r.entropy_mean).fold(f64::INFINITY, f64::min);
        let grid = [
            HaltConfig::entropy(h + 1e-9),
            HaltConfig::kl(1e-3),
            HaltConfig::patience(2, 1),
            HaltConfig::fixed(17),
        ];
        for hc in grid {
            let c = GenConfig { halt: Some(hc.clone()), ..cfg(40) };
            let live = generate(&m, &c, &sched, None, 5, &RunInfo::default()).unwrap();
            let replayed = replay(&full.trace, &hc).unwrap();
            assert_eq!(replayed.unwrap_or(40), live.halt_step, "{hc:?}");
            assert_eq!(replayed.is_some(), live.halted_early);
        }
    }

    #[test]
    fn rejects_bad_prompts() {
        let m = tiny();
        let c = GenConfig { conditioning: Conditioning::Prefix { n: 2 }, ..cfg(3) };
        let sched = c.schedule(10.0).unwrap();
        assert!(generate(&m, &c, &sched, None, 0, &RunInfo::default()).is_err());
        let long = TokenSeq::new(vec![1; 11]);
        assert!(generate(&m, &c, &sched, Some(&long), 0, &RunInfo::default()).is_err());
    }
}

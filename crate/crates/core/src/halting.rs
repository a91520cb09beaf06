//! Early-exit criteria for the sampling loop and their offline replay.
//!
//! Live sampling and replay share one code path: per-step statistics are
//! computed once into a [`StepStats`], and a [`Criterion`] consumes only
//! those. A trace that stores the statistics therefore reproduces every live
//! decision exactly.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::TokenDistribution;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::trace::GenerationTrace;

/// Clamp applied inside logarithms.
pub const LOG_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HaltKind {
    Entropy,
    Kl,
    Patience,
    Fixed,
}

impl HaltKind {
    pub fn name(self) -> &'static str {
        match self {
            HaltKind::Entropy => "entropy",
            HaltKind::Kl => "kl",
            HaltKind::Patience => "patience",
            HaltKind::Fixed => "fixed",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HaltConfig {
    pub kind: HaltKind,
    /// Entropy threshold in nats.
    #[serde(default)]
    pub e_t: f64,
    #[serde(default = "default_patience")]
    pub patience_p: usize,
    #[serde(default)]
    pub switch_threshold: usize,
    /// KL threshold in nats.
    #[serde(default)]
    pub d_t: f64,
    /// Defaults to `round(0.25 · n_max)` for the KL criterion.
    #[serde(default)]
    pub min_steps: Option<usize>,
    #[serde(default)]
    pub fixed_step: usize,
    /// Halt when KL exceeds `d_t` instead of when it falls to or below it.
    #[serde(default)]
    pub kl_halt_above: bool,
}

fn default_patience() -> usize {
    5
}

impl HaltConfig {
    fn base(kind: HaltKind) -> Self {
        Self {
            kind,
            e_t: 0.0,
            patience_p: default_patience(),
            switch_threshold: 0,
            d_t: 0.0,
            min_steps: None,
            fixed_step: 0,
            kl_halt_above: false,
        }
    }

    pub fn entropy(e_t: f64) -> Self {
        Self { e_t, ..Self::base(HaltKind::Entropy) }
    }

    pub fn kl(d_t: f64) -> Self {
        Self { d_t, ..Self::base(HaltKind::Kl) }
    }

    pub fn patience(p: usize, switch_threshold: usize) -> Self {
        Self { patience_p: p, switch_threshold, ..Self::base(HaltKind::Patience) }
    }

    pub fn fixed(step: usize) -> Self {
        Self { fixed_step: step, ..Self::base(HaltKind::Fixed) }
    }

    pub fn with_min_steps(mut self, min_steps: usize) -> Self {
        self.min_steps = Some(min_steps);
        self
    }

    /// The value swept for this kind of criterion.
    pub fn threshold(&self) -> f64 {
        match self.kind {
            HaltKind::Entropy => self.e_t,
            HaltKind::Kl => self.d_t,
            HaltKind::Patience => self.patience_p as f64,
            HaltKind::Fixed => self.fixed_step as f64,
        }
    }

    pub fn effective_min_steps(&self, n_max: usize) -> usize {
        match self.kind {
            HaltKind::Kl => self.min_steps.unwrap_or((0.25 * n_max as f64).round() as usize),
            _ => self.min_steps.unwrap_or(0),
        }
    }

    pub fn validate(&self, n_max: usize) -> Result<()> {
        if !(self.e_t >= 0.0 && self.d_t >= 0.0 && self.e_t.is_finite() && self.d_t.is_finite()) {
            return Err(Error::invalid("halting thresholds must be finite and nonnegative"));
        }
        if self.kind == HaltKind::Patience && self.patience_p == 0 {
            return Err(Error::invalid("patience_p must be positive"));
        }
        if let Some(m) = self.min_steps {
            if m >= n_max.max(1) {
                return Err(Error::invalid(format!("min_steps {m} must be below n_steps {n_max}")));
            }
        }
        Ok(())
    }
}

/// Mean Shannon entropy (nats) of the rows flagged in `gen_mask`.
pub fn entropy_stat<T: Scalar>(dist: &TokenDistribution<T>, gen_mask: &[bool]) -> Result<f64> {
    check_mask(dist.seq_len(), gen_mask)?;
    let cap = (dist.vocab_size() as f64).ln();
    let mut total = 0.0;
    let mut n = 0usize;
    for (row, _) in dist.probs.rows().into_iter().zip(gen_mask).filter(|(_, &g)| g) {
        let h: f64 = row
            .iter()
            .map(|p| p.f64())
            .filter(|&p| p > 0.0)
            .map(|p| -p * p.max(LOG_EPS).ln())
            .sum();
        total += h.clamp(0.0, cap);
        n += 1;
    }
    Ok(total / n as f64)
}

/// Mean per-position `KL(cur ‖ prev)` in nats over generated rows.
pub fn kl_stat<T: Scalar>(cur: &TokenDistribution<T>, prev: &TokenDistribution<T>, gen_mask: &[bool]) -> Result<f64> {
    if cur.probs.dim() != prev.probs.dim() {
        return Err(Error::LengthMismatch(cur.seq_len(), prev.seq_len()));
    }
    check_mask(cur.seq_len(), gen_mask)?;
    let mut total = 0.0;
    let mut n = 0usize;
    for ((c, p), _) in cur.probs.rows().into_iter().zip(prev.probs.rows()).zip(gen_mask).filter(|(_, &g)| g) {
        let kl: f64 = c
            .iter()
            .zip(p.iter())
            .map(|(&c, &p)| (c.f64(), p.f64()))
            .filter(|&(c, _)| c > 0.0)
            .map(|(c, p)| c * (c.max(LOG_EPS).ln() - p.max(LOG_EPS).ln()))
            .sum();
        total += kl.max(0.0);
        n += 1;
    }
    Ok(total / n as f64)
}

/// Generated positions whose token differs between `cur` and `prev`.
pub fn token_switches(cur: &[u32], prev: &[u32], gen_mask: &[bool]) -> Result<usize> {
    if cur.len() != prev.len() {
        return Err(Error::LengthMismatch(cur.len(), prev.len()));
    }
    if gen_mask.len() != cur.len() {
        return Err(Error::LengthMismatch(gen_mask.len(), cur.len()));
    }
    Ok(cur.iter().zip(prev).zip(gen_mask).filter(|((a, b), &g)| g && a != b).count())
}

fn check_mask(seq_len: usize, gen_mask: &[bool]) -> Result<()> {
    if gen_mask.len() != seq_len {
        return Err(Error::LengthMismatch(gen_mask.len(), seq_len));
    }
    if !gen_mask.iter().any(|&g| g) {
        return Err(Error::EmptyMask);
    }
    Ok(())
}

/// Statistics of one sampler step. `kl` and `switches` are absent at the
/// first step, which has no predecessor.
#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    pub step: usize,
    pub entropy: f64,
    pub kl: Option<f64>,
    pub switches: Option<usize>,
}

/// Tracks the previous step's distribution and tokens to produce
/// [`StepStats`].
#[derive(Clone, Debug)]
pub struct CriterionState<T> {
    pub step: usize,
    pub prev_tokens: Option<Vec<u32>>,
    pub prev_probs: Option<TokenDistribution<T>>,
}

impl<T: Scalar> Default for CriterionState<T> {
    fn default() -> Self {
        Self { step: 0, prev_tokens: None, prev_probs: None }
    }
}

impl<T: Scalar> CriterionState<T> {
    pub fn observe(&mut self, dist: &TokenDistribution<T>, tokens: &[u32], gen_mask: &[bool]) -> Result<StepStats> {
        let entropy = entropy_stat(dist, gen_mask)?;
        let kl = match &self.prev_probs {
            Some(prev) => Some(kl_stat(dist, prev, gen_mask)?),
            None => None,
        };
        let switches = match &self.prev_tokens {
            Some(prev) => Some(token_switches(tokens, prev, gen_mask)?),
            None => None,
        };
        let stats = StepStats { step: self.step, entropy, kl, switches };
        self.step += 1;
        self.prev_tokens = Some(tokens.to_vec());
        self.prev_probs = Some(dist.clone());
        Ok(stats)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HaltReason {
    ThresholdMet,
    PatienceMet,
    FixedStep,
    None,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HaltDecision {
    pub halt: bool,
    pub reason: HaltReason,
    /// The value compared against the threshold (the counter for patience).
    pub statistic: f64,
}

impl HaltDecision {
    fn new(halt: bool, reason: HaltReason, statistic: f64) -> Self {
        Self { halt, reason: if halt { reason } else { HaltReason::None }, statistic }
    }
}

/// Decision state machine for one generation run.
#[derive(Clone, Debug)]
pub struct Criterion {
    cfg: HaltConfig,
    min_steps: usize,
    counter: usize,
    next_step: usize,
}

impl Criterion {
    pub fn new(cfg: HaltConfig, n_max: usize) -> Result<Self> {
        cfg.validate(n_max)?;
        let min_steps = cfg.effective_min_steps(n_max);
        Ok(Self { cfg, min_steps, counter: 0, next_step: 0 })
    }

    pub fn config(&self) -> &HaltConfig {
        &self.cfg
    }

    pub fn patience_counter(&self) -> usize {
        self.counter
    }

    pub fn step(&mut self, stats: &StepStats) -> Result<HaltDecision> {
        if stats.step != self.next_step {
            return Err(Error::invalid(format!("criterion expected step {}, got {}", self.next_step, stats.step)));
        }
        self.next_step += 1;
        let step = stats.step;
        let first = step == 0;
        Ok(match self.cfg.kind {
            HaltKind::Entropy => HaltDecision::new(stats.entropy <= self.cfg.e_t, HaltReason::ThresholdMet, stats.entropy),
            HaltKind::Kl => {
                if first {
                    HaltDecision::new(false, HaltReason::None, 0.0)
                } else {
                    let kl = stats.kl.ok_or(Error::TraceMissing("kl_mean"))?;
                    let met = if self.cfg.kl_halt_above { kl > self.cfg.d_t } else { kl <= self.cfg.d_t };
                    HaltDecision::new(met && step >= self.min_steps, HaltReason::ThresholdMet, kl)
                }
            }
            HaltKind::Patience => {
                if !first {
                    let s = stats.switches.ok_or(Error::TraceMissing("token_switches"))?;
                    self.counter = if s <= self.cfg.switch_threshold { self.counter + 1 } else { 0 };
                }
                HaltDecision::new(self.counter >= self.cfg.patience_p, HaltReason::PatienceMet, self.counter as f64)
            }
            HaltKind::Fixed => HaltDecision::new(step == self.cfg.fixed_step, HaltReason::FixedStep, step as f64),
        })
    }
}

/// One combined step: computes statistics, then the decision.
pub fn step_criterion<T: Scalar>(
    criterion: &mut Criterion,
    state: &mut CriterionState<T>,
    dist: &TokenDistribution<T>,
    tokens: &[u32],
    gen_mask: &[bool],
) -> Result<(HaltDecision, StepStats)> {
    let stats = state.observe(dist, tokens, gen_mask)?;
    Ok((criterion.step(&stats)?, stats))
}

/// First step at which `cfg` halts on the recorded statistics, or `None`.
pub fn replay(trace: &GenerationTrace, cfg: &HaltConfig) -> Result<Option<usize>> {
    let mut c = Criterion::new(cfg.clone(), trace.meta.n_max)?;
    for rec in &trace.records {
        if c.step(&rec.stats())?.halt {
            return Ok(Some(rec.step));
        }
    }
    Ok(None)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub criterion: String,
    pub threshold: f64,
    pub mean_halt_step: f64,
    pub frac_halted: f64,
    pub mean_ar_nll: Option<f64>,
}

pub const SWEEP_HEADER: &str = "criterion,threshold,mean_halt_step,frac_halted,mean_ar_nll";

impl SweepRow {
    pub fn csv_line(&self) -> String {
        let nll = self.mean_ar_nll.map(|v| v.to_string()).unwrap_or_default();
        format!("{},{},{},{},{}", self.criterion, self.threshold, self.mean_halt_step, self.frac_halted, nll)
    }
}

/// Halt step per trace per config; unhalted runs count as `n_max`.
/// Rows are ordered by (criterion, threshold).
pub fn sweep(traces: &[GenerationTrace], grid: &[HaltConfig]) -> Result<Vec<SweepRow>> {
    sweep_scored(traces, grid, None::<&(dyn Fn(&GenerationTrace, usize) -> Result<f64> + Sync)>)
}

/// As [`sweep`], additionally averaging `score(trace, halt_step)` per row.
pub fn sweep_scored<F>(traces: &[GenerationTrace], grid: &[HaltConfig], score: Option<&F>) -> Result<Vec<SweepRow>>
where
    F: Fn(&GenerationTrace, usize) -> Result<f64> + Sync + ?Sized,
{
    if traces.is_empty() {
        return Err(Error::invalid("sweep needs at least one trace"));
    }
    let mut order: Vec<&HaltConfig> = grid.iter().collect();
    order.sort_by(|a, b| a.kind.name().cmp(b.kind.name()).then(a.threshold().total_cmp(&b.threshold())));
    let mut rows = Vec::with_capacity(order.len());
    for cfg in order {
        let per: Vec<(usize, bool, Option<f64>)> = traces
            .par_iter()
            .map(|tr| {
                let halted = replay(tr, cfg)?;
                let step = halted.unwrap_or(tr.meta.n_max);
                let nll = score.map(|f| f(tr, step)).transpose()?;
                Ok((step, halted.is_some(), nll))
            })
            .collect::<Result<_>>()?;
        let n = per.len() as f64;
        let mean_ar_nll = score.map(|_| per.iter().map(|p| p.2.unwrap_or(0.0)).sum::<f64>() / n);
        rows.push(SweepRow {
            criterion: cfg.kind.name().to_owned(),
            threshold: cfg.threshold(),
            mean_halt_step: per.iter().map(|p| p.0 as f64).sum::<f64>() / n,
            frac_halted: per.iter().filter(|p| p.1).count() as f64 / n,
            mean_ar_nll,
        });
    }
    Ok(rows)
}

//! Denoiser pre-training: masked noising, time sampling, cross-entropy on
//! noised positions, embedding renormalization, warp fitting, Adam.

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::ar::{ArConfig, ArModel};
use crate::checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
use crate::corpus::{batch_for_step, Corpus, CorpusBatch, TokenSeq};
use crate::denoiser::{Denoiser, DenoiserConfig, TokenDistribution};
use crate::diffusion::{sample_mask_with, EmbeddingTable, MaskSpec, TimeWarpCdf};
use crate::error::{Error, Result};
use crate::nn::{clip_global_norm, cosine_with_warmup, log_softmax_row, softmax_rows, Adam, Parameters};
use crate::scalar::Scalar;
use crate::util::{derive_seed, rng_from};

pub const DENOISER_KIND: &str = "denoiser";
pub const AR_KIND: &str = "ar-reference";

/// Weight of the previous value in the reported loss EMA.
const LOSS_EMA_DECAY: f64 = 0.95;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "defaults::t_max")]
    pub t_max: f64,
    #[serde(default = "defaults::steps")]
    pub steps: u64,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::lr")]
    pub lr: f64,
    #[serde(default = "defaults::warmup_steps")]
    pub warmup_steps: u64,
    #[serde(default)]
    pub mask: MaskSpec,
    #[serde(default = "defaults::time_warping")]
    pub time_warping: bool,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "defaults::clip_norm")]
    pub clip_norm: f64,
    #[serde(default = "defaults::warp_bins")]
    pub warp_bins: usize,
    #[serde(default = "defaults::warp_ema")]
    pub warp_ema: f64,
    /// Checkpoint cadence in steps; 0 writes only the final checkpoint.
    #[serde(default = "defaults::checkpoint_every")]
    pub checkpoint_every: u64,
}

mod defaults {
    pub fn t_max() -> f64 {
        10.0
    }
    pub fn steps() -> u64 {
        5000
    }
    pub fn batch_size() -> usize {
        16
    }
    pub fn lr() -> f64 {
        3e-4
    }
    pub fn warmup_steps() -> u64 {
        200
    }
    pub fn time_warping() -> bool {
        false
    }
    pub fn clip_norm() -> f64 {
        1.0
    }
    pub fn warp_bins() -> usize {
        32
    }
    pub fn warp_ema() -> f64 {
        0.01
    }
    pub fn checkpoint_every() -> u64 {
        1000
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_max > 0.0 && self.t_max.is_finite()) {
            return Err(Error::invalid("train.t_max must be positive"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("train.lr must be nonnegative"));
        }
        if self.batch_size == 0 || self.warp_bins == 0 {
            return Err(Error::invalid("train.batch_size and train.warp_bins must be positive"));
        }
        if !(0.0..=1.0).contains(&self.warp_ema) {
            return Err(Error::invalid("train.warp_ema must lie in [0, 1]"));
        }
        self.mask.validate()
    }
}

/// Mean cross-entropy of `targets` under `dist` over positions flagged in
/// `mask`. Unflagged positions never enter the computation.
pub fn cdcd_loss<T: Scalar>(dist: &TokenDistribution<T>, targets: &TokenSeq, mask: &[bool]) -> Result<f64> {
    if targets.len() != dist.seq_len() {
        return Err(Error::LengthMismatch(targets.len(), dist.seq_len()));
    }
    if mask.len() != targets.len() {
        return Err(Error::LengthMismatch(mask.len(), targets.len()));
    }
    targets.check(dist.vocab_size())?;
    let mut total = 0.0;
    let mut n = 0usize;
    for ((row, &id), _) in dist.logits.rows().into_iter().zip(targets.ids()).zip(mask).filter(|(_, &m)| m) {
        total -= log_softmax_row(row.iter().copied())[id as usize];
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(total / n as f64)
}

/// Everything that evolves during training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T> {
    pub step: u64,
    pub model: Denoiser<T>,
    pub table: EmbeddingTable<T>,
    pub warp: TimeWarpCdf,
    pub adam: Adam<T>,
    pub loss_ema: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub mean_t: f64,
    pub grad_norm: f64,
}

impl<T: Scalar> TrainState<T> {
    pub fn init(model_cfg: &DenoiserConfig, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng_from(derive_seed(cfg.seed, &[u64::MAX]));
        let model = Denoiser::new(model_cfg.clone(), &mut rng)?;
        let table = EmbeddingTable::random(model_cfg.vocab_size, model_cfg.embed_dim, &mut rng)?;
        let warp = TimeWarpCdf::uniform(cfg.t_max, cfg.warp_bins)?;
        let adam = Adam::new(model.named().into_iter().map(|(_, a)| a).chain([table.matrix()]));
        Ok(Self { step: 0, model, table, warp, adam, loss_ema: None })
    }

    /// Tensors written to a checkpoint, in a fixed order.
    fn tensors(&self) -> Vec<(String, &Array2<T>)> {
        let mut out: Vec<(String, &Array2<T>)> = self
            .model
            .named()
            .into_iter()
            .map(|(n, a)| (format!("model.{n}"), a))
            .collect();
        out.push(("embedding".into(), self.table.matrix()));
        for (i, m) in self.adam.m.iter().enumerate() {
            out.push((format!("adam.m.{i}"), m));
        }
        for (i, v) in self.adam.v.iter().enumerate() {
            out.push((format!("adam.v.{i}"), v));
        }
        out
    }

    pub fn save(&self, path: &Path, cfg: &TrainConfig) -> Result<()> {
        let config = serde_json::json!({ "model": self.model.config, "train": cfg });
        let meta = serde_json::json!({
            "step": self.step,
            "loss_ema": self.loss_ema,
            "adam_t": self.adam.t,
            "warp": { "knots": self.warp.knots(), "weights": self.warp.weights() },
        });
        write_checkpoint(path, DENOISER_KIND, &config, &meta, &self.tensors())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, TrainConfig)> {
        let (model_cfg, cfg) = denoiser_configs(ck)?;
        let mut state = Self::init(&model_cfg, &cfg)?;
        let bad = |what: &str| Error::invalid(format!("checkpoint meta lacks {what}"));
        let meta = &ck.manifest.meta;
        state.step = meta["step"].as_u64().ok_or_else(|| bad("step"))?;
        state.loss_ema = meta["loss_ema"].as_f64();
        state.adam.t = meta["adam_t"].as_u64().ok_or_else(|| bad("adam_t"))?;
        let warp: WarpMeta = serde_json::from_value(meta["warp"].clone())?;
        state.warp = TimeWarpCdf::new(warp.knots, warp.weights)?;
        ck.load_into("model", &mut state.model)?;
        state.table = EmbeddingTable::new(ck.tensor_as("embedding")?)?;
        for (i, m) in state.adam.m.iter_mut().enumerate() {
            *m = ck.tensor_as(&format!("adam.m.{i}"))?;
        }
        for (i, v) in state.adam.v.iter_mut().enumerate() {
            *v = ck.tensor_as(&format!("adam.v.{i}"))?;
        }
        Ok((state, cfg))
    }

    pub fn load(path: &Path) -> Result<(Self, TrainConfig)> {
        Self::from_checkpoint(&read_checkpoint(path)?)
    }
}

#[derive(Deserialize)]
struct WarpMeta {
    knots: Vec<f64>,
    weights: Vec<f64>,
}

fn denoiser_configs(ck: &Checkpoint) -> Result<(DenoiserConfig, TrainConfig)> {
    if ck.kind() != DENOISER_KIND {
        return Err(Error::invalid(format!("expected a {DENOISER_KIND} checkpoint, found {}", ck.kind())));
    }
    let model = serde_json::from_value(ck.manifest.config["model"].clone())?;
    let train = serde_json::from_value(ck.manifest.config["train"].clone())?;
    Ok((model, train))
}

/// Loads only what sampling needs from a denoiser checkpoint.
pub fn load_denoiser<T: Scalar>(path: &Path) -> Result<(Denoiser<T>, EmbeddingTable<T>, TrainConfig)> {
    let ck = read_checkpoint(path)?;
    let (model_cfg, cfg) = denoiser_configs(&ck)?;
    let mut model = Denoiser::new(model_cfg, &mut rng_from(0))?;
    ck.load_into("model", &mut model)?;
    let table = EmbeddingTable::new(ck.tensor_as("embedding")?)?;
    Ok((model, table, cfg))
}

fn sample_time(cfg: &TrainConfig, warp: &TimeWarpCdf, rng: &mut impl rand::Rng) -> f64 {
    // 1 - u lies in (0, 1], so uniform times cover (0, t_max].
    let v = 1.0 - rng.random::<f64>();
    if cfg.time_warping {
        warp.sample(v)
    } else {
        cfg.t_max * v
    }
}

/// One optimizer step. On error the state is left untouched.
pub fn train_step<T: Scalar>(state: &mut TrainState<T>, batch: &CorpusBatch, cfg: &TrainConfig) -> Result<StepReport> {
    let s_len = state.model.config.seq_len;
    let d = state.table.dim();
    let bsz = batch.batch_size();
    if bsz == 0 {
        return Err(Error::EmptyCorpus);
    }
    let mut x = Array2::zeros((bsz * s_len, d));
    let mut times = Vec::with_capacity(bsz);
    let mut masks = Vec::with_capacity(bsz);
    for (b, seq) in batch.sequences.iter().enumerate() {
        if seq.len() != s_len {
            return Err(Error::LengthMismatch(seq.len(), s_len));
        }
        seq.check(state.table.vocab_size())?;
        let mut rng = rng_from(derive_seed(cfg.seed, &[state.step, b as u64]));
        let t = sample_time(cfg, &state.warp, &mut rng);
        let mask = sample_mask_with(&cfg.mask, s_len, &mut rng)?;
        for (i, (&id, &noised)) in seq.ids().iter().zip(&mask.positions).enumerate() {
            let mut row = x.row_mut(b * s_len + i);
            row.assign(&state.table.matrix().row(id as usize));
            if noised {
                for v in row.iter_mut() {
                    let eps: f64 = rng.sample(StandardNormal);
                    *v += T::of(t * eps);
                }
            }
        }
        times.push(t);
        masks.push(mask.positions);
    }

    let (logits, cache) = state.model.forward_batch(&x, &times)?;
    let probs = softmax_rows(&logits);
    let valid: Vec<usize> = (0..bsz).filter(|&b| masks[b].iter().any(|&m| m)).collect();
    if valid.is_empty() {
        return Err(Error::EmptyMask);
    }
    let mut seq_losses = vec![0.0; bsz];
    let mut dlogits = Array2::<T>::zeros(logits.raw_dim());
    for &b in &valid {
        let n = masks[b].iter().filter(|&&m| m).count();
        let scale = T::of(1.0 / (n * valid.len()) as f64);
        let mut total = 0.0;
        for i in (0..s_len).filter(|&i| masks[b][i]) {
            let r = b * s_len + i;
            let id = batch.sequences[b].ids()[i] as usize;
            total -= log_softmax_row(logits.row(r).iter().copied())[id];
            let mut g = dlogits.row_mut(r);
            g.assign(&probs.row(r));
            g[id] -= T::one();
            g.mapv_inplace(|v| v * scale);
        }
        seq_losses[b] = total / n as f64;
    }
    let loss = valid.iter().map(|&b| seq_losses[b]).sum::<f64>() / valid.len() as f64;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss(state.step));
    }

    let mut grads = state.model.zeros_like();
    let dx = state.model.backward(&cache, &dlogits, &mut grads);
    let mut gtable = Array2::<T>::zeros(state.table.matrix().raw_dim());
    for (b, seq) in batch.sequences.iter().enumerate() {
        for (i, &id) in seq.ids().iter().enumerate() {
            let mut row = gtable.row_mut(id as usize);
            row += &dx.row(b * s_len + i);
        }
    }
    let mut grad_refs: Vec<&mut Array2<T>> = grads.named_mut().into_iter().map(|(_, a)| a).collect();
    grad_refs.push(&mut gtable);
    let grad_norm = clip_global_norm(&mut grad_refs, cfg.clip_norm);
    if !grad_norm.is_finite() {
        return Err(Error::NonFiniteLoss(state.step));
    }
    let grad_views: Vec<&Array2<T>> = grad_refs.iter().map(|g| &**g).collect();

    // Everything fallible is done; mutate.
    let lr = cosine_with_warmup(cfg.lr, state.step, cfg.warmup_steps, cfg.steps);
    let table = state.table.matrix_mut();
    let mut params: Vec<&mut Array2<T>> = state.model.named_mut().into_iter().map(|(_, a)| a).collect();
    params.push(table);
    state.adam.step(params, &grad_views, lr);
    state.table.normalize()?;
    for &b in &valid {
        let bin = state.warp.bin_of(times[b]);
        state.warp.update(bin, seq_losses[b], cfg.warp_ema)?;
    }
    state.loss_ema = Some(match state.loss_ema {
        Some(e) => LOSS_EMA_DECAY * e + (1.0 - LOSS_EMA_DECAY) * loss,
        None => loss,
    });
    let report = StepReport {
        step: state.step,
        loss,
        lr,
        mean_t: times.iter().sum::<f64>() / bsz as f64,
        grad_norm,
    };
    state.step += 1;
    Ok(report)
}

pub fn checkpoint_path(run_dir: &Path, step: u64) -> PathBuf {
    run_dir.join("checkpoints").join(format!("step_{step}.ckpt"))
}

/// Appends rows to `train_log.csv`, writing the header on first use.
struct TrainLog {
    file: fs::File,
    path: PathBuf,
}

impl TrainLog {
    fn open(run_dir: &Path) -> Result<Self> {
        fs::create_dir_all(run_dir).map_err(Error::io(run_dir))?;
        let path = run_dir.join("train_log.csv");
        let fresh = !path.exists();
        let mut file = OpenOptions::new().create(true).append(true).open(&path).map_err(Error::io(&path))?;
        if fresh {
            writeln!(file, "step,loss,lr,mean_t").map_err(Error::io(&path))?;
        }
        Ok(Self { file, path })
    }

    fn row(&mut self, r: &StepReport) -> Result<()> {
        writeln!(self.file, "{},{},{},{}", r.step, r.loss, r.lr, r.mean_t).map_err(Error::io(&self.path))
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub final_step: u64,
    pub loss_ema: Option<f64>,
}

/// Runs `state` forward to `cfg.steps`, logging and checkpointing into
/// `run_dir`.
pub fn run_training<T: Scalar>(
    state: &mut TrainState<T>,
    cfg: &TrainConfig,
    corpus: &Corpus,
    run_dir: &Path,
    mut on_step: impl FnMut(&StepReport),
) -> Result<TrainOutcome> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut log = TrainLog::open(run_dir)?;
    if state.step == 0 && cfg.checkpoint_every > 0 || cfg.steps == 0 {
        state.save(&checkpoint_path(run_dir, state.step), cfg)?;
    }
    while state.step < cfg.steps {
        let batch = batch_for_step(corpus, cfg.batch_size, cfg.seed, state.step);
        let report = train_step(state, &batch, cfg).map_err(|e| Error::AtStep { step: state.step as usize, source: Box::new(e) })?;
        log.row(&report)?;
        on_step(&report);
        if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 {
            state.save(&checkpoint_path(run_dir, state.step), cfg)?;
        }
    }
    let final_checkpoint = checkpoint_path(run_dir, state.step);
    if !final_checkpoint.exists() {
        state.save(&final_checkpoint, cfg)?;
    }
    Ok(TrainOutcome { final_checkpoint, final_step: state.step, loss_ema: state.loss_ema })
}

/// Trains a fresh model from step 0.
pub fn train<T: Scalar>(
    model_cfg: &DenoiserConfig,
    cfg: &TrainConfig,
    corpus: &Corpus,
    run_dir: &Path,
    on_step: impl FnMut(&StepReport),
) -> Result<TrainOutcome> {
    if model_cfg.seq_len != corpus.seq_len() {
        return Err(Error::LengthMismatch(corpus.seq_len(), model_cfg.seq_len));
    }
    let mut state = TrainState::<T>::init(model_cfg, cfg)?;
    run_training(&mut state, cfg, corpus, run_dir, on_step)
}

/// Continues a run from `checkpoint` up to `steps` (or the checkpoint's own
/// configured total).
pub fn resume<T: Scalar>(
    checkpoint: &Path,
    steps: Option<u64>,
    corpus: &Corpus,
    run_dir: &Path,
    on_step: impl FnMut(&StepReport),
) -> Result<TrainOutcome> {
    let (mut state, mut cfg) = TrainState::<T>::load(checkpoint)?;
    if let Some(s) = steps {
        cfg.steps = s;
    }
    run_training(&mut state, &cfg, corpus, run_dir, on_step)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArTrainConfig {
    #[serde(default = "ar_defaults::steps")]
    pub steps: u64,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "ar_defaults::lr")]
    pub lr: f64,
    #[serde(default = "ar_defaults::warmup_steps")]
    pub warmup_steps: u64,
    #[serde(default = "defaults::clip_norm")]
    pub clip_norm: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "ar_defaults::model_dim")]
    pub model_dim: usize,
    #[serde(default = "ar_defaults::layers")]
    pub layers: usize,
    #[serde(default = "ar_defaults::heads")]
    pub heads: usize,
}

mod ar_defaults {
    pub fn steps() -> u64 {
        1500
    }
    pub fn lr() -> f64 {
        1e-3
    }
    pub fn warmup_steps() -> u64 {
        100
    }
    pub fn model_dim() -> usize {
        64
    }
    pub fn layers() -> usize {
        2
    }
    pub fn heads() -> usize {
        4
    }
}

impl Default for ArTrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

/// Mean next-token cross-entropy of `model` on `batch` and its gradient.
fn ar_loss_and_grad<T: Scalar>(model: &ArModel<T>, batch: &[&[u32]]) -> Result<(f64, ArModel<T>)> {
    let (logits, cache) = model.forward(batch)?;
    let probs = softmax_rows(&logits);
    let rows = logits.nrows();
    let scale = T::of(1.0 / rows as f64);
    let mut dlogits = probs;
    let mut total = 0.0;
    for (r, &id) in batch.iter().flat_map(|s| s.iter()).enumerate() {
        total -= log_softmax_row(logits.row(r).iter().copied())[id as usize];
        dlogits[(r, id as usize)] -= T::one();
    }
    dlogits.mapv_inplace(|v| v * scale);
    let mut g = model.zeros_like();
    model.backward(&cache, &dlogits, &mut g);
    Ok((total / rows as f64, g))
}

/// Trains the causal reference scorer with next-token cross-entropy over all
/// positions. Returns the model and the per-step losses.
pub fn train_ar_reference<T: Scalar>(
    cfg: &ArTrainConfig,
    corpus: &Corpus,
    vocab_size: usize,
) -> Result<(ArModel<T>, Vec<f64>)> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let ar_cfg = ArConfig {
        vocab_size,
        model_dim: cfg.model_dim,
        heads: cfg.heads,
        layers: cfg.layers,
        ffn_mult: 4,
        max_len: corpus.seq_len(),
    };
    let mut model = ArModel::<T>::new(ar_cfg, &mut rng_from(derive_seed(cfg.seed, &[u64::MAX - 1])))?;
    let mut adam = Adam::new(model.named().into_iter().map(|(_, a)| a));
    let mut losses = Vec::with_capacity(cfg.steps as usize);
    for step in 0..cfg.steps {
        let batch = batch_for_step(corpus, cfg.batch_size, cfg.seed, step);
        let seqs: Vec<&[u32]> = batch.sequences.iter().map(|s| s.ids()).collect();
        let (loss, mut g) = ar_loss_and_grad(&model, &seqs)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss(step));
        }
        let mut grad_refs: Vec<&mut Array2<T>> = g.named_mut().into_iter().map(|(_, a)| a).collect();
        clip_global_norm(&mut grad_refs, cfg.clip_norm);
        let views: Vec<&Array2<T>> = grad_refs.iter().map(|g| &**g).collect();
        let lr = cosine_with_warmup(cfg.lr, step, cfg.warmup_steps, cfg.steps);
        adam.step(model.named_mut().into_iter().map(|(_, a)| a).collect(), &views, lr);
        losses.push(loss);
    }
    Ok((model, losses))
}

pub fn save_ar<T: Scalar>(model: &ArModel<T>, path: &Path) -> Result<()> {
    write_checkpoint(path, AR_KIND, &model.config, &serde_json::json!({}), &model.named())
}

pub fn load_ar<T: Scalar>(path: &Path) -> Result<ArModel<T>> {
    let ck = read_checkpoint(path)?;
    if ck.kind() != AR_KIND {
        return Err(Error::invalid(format!("expected an {AR_KIND} checkpoint, found {}", ck.kind())));
    }
    let cfg: ArConfig = serde_json::from_value(ck.manifest.config.clone())?;
    let mut model = ArModel::new(cfg, &mut rng_from(0))?;
    ck.load_into("", &mut model)?;
    Ok(model)
}

//! On-disk layout shared by the subcommands.
//!
//! A training run directory holds `config.json`, `vocab.txt`,
//! `train_log.csv`, `checkpoints/step_N.ckpt` and optionally
//! `ar_reference.ckpt`. A generation directory holds `gen_config.json`,
//! `samples.jsonl` and `traces/p{prompt}_s{sample}.jsonl`.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use halt_diffusion::ar::ArModel;
use halt_diffusion::checkpoint::read_checkpoint;
use halt_diffusion::corpus::{Vocabulary, PAD_ID};
use halt_diffusion::sampler::Ddlm;
use halt_diffusion::training::{load_ar, load_denoiser, TrainConfig, DENOISER_KIND};
use halt_diffusion::util::write_atomic;
use halt_diffusion::Scalar;
use serde::{Deserialize, Serialize};

use crate::config::{usage, RunConfig};

pub const CONFIG_FILE: &str = "config.json";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const AR_FILE: &str = "ar_reference.ckpt";
pub const SAMPLES_FILE: &str = "samples.jsonl";

/// FNV-1a over the token list; identifies a vocabulary in sample files.
pub fn vocab_fingerprint(vocab: &Vocabulary) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for tok in vocab.tokens() {
        for b in tok.bytes().chain(std::iter::once(0xff)) {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    format!("{h:016x}")
}

/// `run_dir` of a checkpoint stored as `run_dir/checkpoints/step_N.ckpt`.
pub fn run_dir_of(checkpoint: &Path) -> PathBuf {
    checkpoint
        .parent()
        .and_then(Path::parent)
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

pub fn checkpoint_id(checkpoint: &Path) -> String {
    checkpoint.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Everything generation needs from a training run.
pub struct LoadedRun<T> {
    pub config: RunConfig,
    pub vocab: Vocabulary,
    pub ddlm: Ddlm<T>,
    pub train: TrainConfig,
    pub run_dir: PathBuf,
}

/// Floating point type the checkpoint was written in.
pub fn checkpoint_dtype(path: &Path) -> Result<String> {
    if !path.is_file() {
        return Err(usage(format!("checkpoint not found: {}", path.display())));
    }
    let ck = read_checkpoint(path)?;
    if ck.kind() != DENOISER_KIND {
        bail!("{} is a {} checkpoint, expected {DENOISER_KIND}", path.display(), ck.kind());
    }
    Ok(ck.manifest.dtype)
}

pub fn load_run<T: Scalar>(checkpoint: &Path, config: Option<&Path>, overrides: &[String]) -> Result<LoadedRun<T>> {
    let run_dir = run_dir_of(checkpoint);
    let config = match config {
        Some(p) => RunConfig::load(p, overrides)?,
        None => {
            let snap = run_dir.join(CONFIG_FILE);
            if !snap.is_file() {
                return Err(usage(format!("no {CONFIG_FILE} next to {}; pass --config", checkpoint.display())));
            }
            if overrides.is_empty() {
                RunConfig::snapshot(&run_dir)?
            } else {
                RunConfig::load(&snap, overrides)?
            }
        }
    };
    let vocab_path = run_dir.join(VOCAB_FILE);
    let vocab = Vocabulary::load(&vocab_path, config.corpus.tokenizer)?;
    let (model, table, train) = load_denoiser::<T>(checkpoint)?;
    if model.config.vocab_size != vocab.size() {
        bail!(
            "checkpoint {} expects {} tokens but {} has {}",
            checkpoint.display(),
            model.config.vocab_size,
            vocab_path.display(),
            vocab.size()
        );
    }
    Ok(LoadedRun { config, vocab, ddlm: Ddlm { model, table }, train, run_dir })
}

pub fn load_ar_checked<T: Scalar>(path: &Path, vocab_size: Option<usize>) -> Result<ArModel<T>> {
    if !path.is_file() {
        return Err(usage(format!("AR reference checkpoint not found: {}", path.display())));
    }
    let ar = load_ar::<T>(path)?;
    if let Some(v) = vocab_size.filter(|&v| v != ar.config.vocab_size) {
        bail!("AR reference {} has {} tokens, samples use {v}", path.display(), ar.config.vocab_size);
    }
    Ok(ar)
}

/// One line of `samples.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub prompt_index: usize,
    pub sample_index: usize,
    /// Conditioning tokens as fed to the sampler (padded to the sequence).
    pub prompt: Option<Vec<u32>>,
    pub tokens: Vec<u32>,
    pub gen_mask: Vec<bool>,
    pub text: String,
    pub halt_step: usize,
    pub halted_early: bool,
    pub seed: u64,
    pub criterion: Option<String>,
    pub threshold: Option<f64>,
    pub vocab: String,
    pub vocab_size: usize,
    /// Relative to the samples file.
    pub trace: String,
}

impl SampleRecord {
    pub fn max_token(&self) -> u32 {
        self.tokens.iter().chain(self.prompt.iter().flatten()).copied().max().unwrap_or(PAD_ID)
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(write_atomic(path, out.as_bytes())?)
}

pub fn read_samples(path: &Path) -> Result<Vec<SampleRecord>> {
    if !path.is_file() {
        return Err(usage(format!("samples file not found: {}", path.display())));
    }
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{}:{}: bad sample record", path.display(), i + 1)))
        .collect()
}

/// Prompt lines of a plain text file; blank lines are skipped.
pub fn read_prompts(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read prompts {}: {e}", path.display())))?;
    let prompts: Vec<String> = text.lines().map(str::trim_end).filter(|l| !l.is_empty()).map(str::to_owned).collect();
    if prompts.is_empty() {
        return Err(usage(format!("prompts file {} has no prompts", path.display())));
    }
    Ok(prompts)
}

/// Trace files in `dir` in name order.
pub fn trace_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| usage(format!("cannot read trace directory {}: {e}", dir.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("no trace files (*.jsonl) in {}", dir.display());
    }
    Ok(files)
}

//! Run configuration: one JSON document with a section per module.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use halt_diffusion::corpus::TokenizerMode;
use halt_diffusion::denoiser::DenoiserConfig;
use halt_diffusion::sampler::GenConfig;
use halt_diffusion::training::{ArTrainConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

/// Bad flags or configuration; maps to exit code 2.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    /// Plain text, one training sequence per nonempty line.
    pub path: PathBuf,
    #[serde(default)]
    pub tokenizer: TokenizerMode,
    #[serde(default = "default_max_vocab")]
    pub max_vocab: usize,
    #[serde(default = "default_seq_len")]
    pub seq_len: usize,
}

fn default_max_vocab() -> usize {
    4096
}

fn default_seq_len() -> usize {
    64
}

/// Denoiser shape; the vocabulary size and sequence length come from the
/// corpus section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub embed_dim: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_mult: usize,
    pub time_features: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = DenoiserConfig::desk(2);
        Self {
            embed_dim: d.embed_dim,
            model_dim: d.model_dim,
            heads: d.heads,
            layers: d.layers,
            ffn_mult: d.ffn_mult,
            time_features: d.time_features,
        }
    }
}

impl ModelSection {
    pub fn denoiser(&self, vocab_size: usize, seq_len: usize) -> DenoiserConfig {
        DenoiserConfig {
            vocab_size,
            embed_dim: self.embed_dim,
            model_dim: self.model_dim,
            heads: self.heads,
            layers: self.layers,
            ffn_mult: self.ffn_mult,
            seq_len,
            time_features: self.time_features,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSection {
    pub samples_per_prompt: usize,
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self { samples_per_prompt: 5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run_dir: PathBuf,
    /// Copied into `train`, `gen` and `ar_reference` unless they set their own.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub precision: Precision,
    pub corpus: CorpusSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub ar_reference: Option<ArTrainConfig>,
    #[serde(default)]
    pub gen: GenConfig,
    #[serde(default)]
    pub metrics: MetricsSection,
}

impl RunConfig {
    /// Reads `path`, applies `key.path=value` overrides, and validates.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut value: Value =
            serde_json::from_str(&text).map_err(|e| usage(format!("config {} is not valid JSON: {e}", path.display())))?;
        for o in overrides {
            let (key, v) = parse_assignment(o)?;
            set_path(&mut value, &key, v)?;
        }
        Self::from_value(value)
    }

    pub fn from_value(mut value: Value) -> Result<Self> {
        propagate_seed(&mut value)?;
        let cfg: RunConfig = serde_path_to_error::deserialize(value).map_err(|e| {
            let path = e.path().to_string();
            usage(format!("config key `{path}`: {}", e.into_inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |section: &str, e: halt_diffusion::Error| usage(format!("config section `{section}`: {e}"));
        if !self.corpus.path.is_file() {
            return Err(usage(format!("corpus file not found: {}", self.corpus.path.display())));
        }
        if self.corpus.max_vocab < 2 {
            return Err(usage("config key `corpus.max_vocab` must be at least 2"));
        }
        self.model.denoiser(2, self.corpus.seq_len).validate().map_err(|e| bad("model", e))?;
        self.train.validate().map_err(|e| bad("train", e))?;
        self.gen.validate().map_err(|e| bad("gen", e))?;
        if self.metrics.samples_per_prompt == 0 {
            return Err(usage("config key `metrics.samples_per_prompt` must be positive"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Loads the snapshot a training run wrote. Overrides are not applied
    /// and the corpus file need not exist any more.
    pub fn snapshot(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join("config.json");
        let text = fs::read_to_string(&path).with_context(|| format!("reading run config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing run config {}", path.display()))
    }
}

fn propagate_seed(value: &mut Value) -> Result<()> {
    let root = value.as_object_mut().ok_or_else(|| usage("config must be a JSON object"))?;
    let seed = root.get("seed").cloned().unwrap_or(Value::from(0u64));
    for section in ["train", "gen", "ar_reference"] {
        let entry = match root.get_mut(section) {
            Some(v) => v,
            None if section == "ar_reference" => continue,
            None => root.entry(section).or_insert_with(|| Value::Object(Map::new())),
        };
        if let Value::Object(m) = entry {
            m.entry("seed").or_insert_with(|| seed.clone());
        }
    }
    Ok(())
}

/// Splits `key=value`; the value is parsed as JSON, falling back to a
/// plain string.
pub fn parse_assignment(s: &str) -> Result<(String, Value)> {
    let (k, v) = s.split_once('=').ok_or_else(|| usage(format!("expected key=value, got `{s}`")))?;
    if k.is_empty() {
        return Err(usage(format!("empty key in `{s}`")));
    }
    Ok((k.to_owned(), json_scalar(v)))
}

fn json_scalar(v: &str) -> Value {
    serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_owned()))
}

pub fn set_path(root: &mut Value, key: &str, v: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let map = cur.as_object_mut().ok_or_else(|| usage(format!("cannot set `{key}`: `{}` is not an object", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            map.insert((*part).to_owned(), v);
            return Ok(());
        }
        cur = map.entry(*part).or_insert_with(|| Value::Object(Map::new()));
    }
    unreachable!("split yields at least one part")
}

/// One axis of a `--grid key=v1,v2` flag. Undotted keys name `train` fields.
#[derive(Clone, Debug, PartialEq)]
pub struct GridAxis {
    pub label: String,
    pub key: String,
    pub values: Vec<String>,
}

pub fn parse_grid_axis(s: &str) -> Result<GridAxis> {
    let (label, vals) = s.split_once('=').ok_or_else(|| usage(format!("expected key=v1,v2,... in `{s}`")))?;
    let values: Vec<String> = vals.split(',').map(str::trim).filter(|v| !v.is_empty()).map(str::to_owned).collect();
    if label.is_empty() || values.is_empty() {
        return Err(usage(format!("grid `{s}` needs a key and at least one value")));
    }
    let key = if label.contains('.') { label.to_owned() } else { format!("train.{label}") };
    Ok(GridAxis { label: label.to_owned(), key, values })
}

/// Cartesian product of the axes as (child directory name, assignments).
pub fn expand_grid(axes: &[GridAxis]) -> Vec<(String, Vec<(String, Value)>)> {
    let mut out: Vec<(Vec<String>, Vec<(String, Value)>)> = vec![(vec![], vec![])];
    for axis in axes {
        out = out
            .into_iter()
            .flat_map(|(names, sets)| {
                axis.values.iter().map(move |v| {
                    let mut names = names.clone();
                    names.push(format!("{}={v}", axis.label));
                    let mut sets = sets.clone();
                    sets.push((axis.key.clone(), json_scalar(v)));
                    (names, sets)
                })
            })
            .collect();
    }
    out.into_iter().map(|(names, sets)| (names.join("_"), sets)).collect()
}

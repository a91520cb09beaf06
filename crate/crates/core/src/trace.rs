//! Per-step generation records and their JSON Lines file format.
//!
//! Line 1 holds the [`TraceMeta`] object, every later line one
//! [`StepRecord`]. Floats are written with shortest round-trip formatting
//! and parsed back bit-exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::halting::StepStats;
use crate::metrics::wer;
use crate::util::write_atomic;

pub const TRACE_VERSION: u64 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verbosity {
    #[default]
    #[serde(rename = "stats")]
    Stats,
    #[serde(rename = "stats+states")]
    StatsStates,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub version: u64,
    pub run_id: String,
    pub checkpoint_id: String,
    pub seed: u64,
    pub n_max: usize,
    /// `true` at positions being generated.
    pub gen_mask: Vec<bool>,
    pub prompt: Option<Vec<u32>>,
    pub config: Value,
}

/// Dense row-major matrix snapshot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn from_array<T: crate::Scalar>(a: &ndarray::Array2<T>) -> Self {
        Self { rows: a.nrows(), cols: a.ncols(), data: a.iter().map(|v| v.f64()).collect() }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub t: f64,
    pub entropy_mean: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kl_mean: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_switches: Option<usize>,
    /// Mean row norm of `X` over generated positions.
    pub l2_x: f64,
    pub l2_x0hat: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x: Option<Matrix>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0hat: Option<Matrix>,
}

impl StepRecord {
    pub fn stats(&self) -> StepStats {
        StepStats { step: self.step, entropy: self.entropy_mean, kl: self.kl_mean, switches: self.token_switches }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerationTrace {
    pub meta: TraceMeta,
    pub records: Vec<StepRecord>,
}

impl GenerationTrace {
    pub fn new(meta: TraceMeta) -> Self {
        Self { meta, records: Vec::new() }
    }

    /// Appends `rec`; steps must strictly increase and statistics be finite.
    pub fn record_step(&mut self, rec: StepRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if rec.step <= last.step {
                return Err(Error::invalid(format!("trace step {} does not follow {}", rec.step, last.step)));
            }
        }
        let finite = [rec.t, rec.entropy_mean, rec.l2_x, rec.l2_x0hat, rec.kl_mean.unwrap_or(0.0)]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::invalid(format!("non-finite statistic at trace step {}", rec.step)));
        }
        self.records.push(rec);
        Ok(())
    }

    pub fn has_states(&self) -> bool {
        !self.records.is_empty() && self.records.iter().all(|r| r.x.is_some() && r.x0hat.is_some())
    }

    /// Tokens recorded at `step`.
    pub fn tokens_at(&self, step: usize) -> Result<&[u32]> {
        self.records
            .iter()
            .find(|r| r.step == step)
            .and_then(|r| r.tokens.as_deref())
            .ok_or(Error::TraceMissing("tokens"))
    }
}

pub fn write_trace(trace: &GenerationTrace, path: &Path) -> Result<()> {
    let mut out = serde_json::to_string(&trace.meta)?;
    out.push('\n');
    for r in &trace.records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

pub fn read_trace(path: &Path) -> Result<GenerationTrace> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    parse_trace(&text, path)
}

fn parse_trace(text: &str, path: &Path) -> Result<GenerationTrace> {
    let err = |line: usize, msg: String| Error::Parse { path: path.to_owned(), line, msg };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, head) = lines.next().ok_or_else(|| err(1, "empty trace file".into()))?;
    let head: Value = serde_json::from_str(head).map_err(|e| err(1, e.to_string()))?;
    let version = head.get("version").and_then(Value::as_u64).ok_or_else(|| err(1, "missing version".into()))?;
    if version != TRACE_VERSION {
        return Err(Error::UnsupportedTraceVersion(version));
    }
    let meta: TraceMeta = serde_json::from_value(head).map_err(|e| err(1, e.to_string()))?;
    let mut trace = GenerationTrace::new(meta);
    for (no, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let rec: StepRecord = serde_json::from_str(line).map_err(|e| err(no, e.to_string()))?;
        trace.record_step(rec).map_err(|e| err(no, e.to_string()))?;
    }
    Ok(trace)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Per step, the cosine between the generated-position score (resp. `X`)
/// and its final-step counterpart. The final step is exactly 1.
pub fn cos_to_final(trace: &GenerationTrace) -> Result<Vec<(f64, f64)>> {
    if !trace.has_states() {
        return Err(Error::TraceMissing("state snapshots"));
    }
    let gen = &trace.meta.gen_mask;
    let flat = |r: &StepRecord| -> (Vec<f64>, Vec<f64>) {
        let x = r.x.as_ref().unwrap();
        let x0 = r.x0hat.as_ref().unwrap();
        let inv = 1.0 / (r.t * r.t);
        let mut score = Vec::new();
        let mut emb = Vec::new();
        for i in (0..x.rows).filter(|&i| gen.get(i).copied().unwrap_or(true)) {
            emb.extend_from_slice(x.row(i));
            score.extend(x0.row(i).iter().zip(x.row(i)).map(|(a, b)| (a - b) * inv));
        }
        (score, emb)
    };
    let last = trace.records.len() - 1;
    let (s_fin, x_fin) = flat(&trace.records[last]);
    Ok(trace
        .records
        .iter()
        .enumerate()
        .map(|(k, r)| {
            if k == last {
                return (1.0, 1.0);
            }
            let (s, x) = flat(r);
            (cosine(&s, &s_fin), cosine(&x, &x_fin))
        })
        .collect())
}

pub const TRACE_CSV_HEADER: &str = "step,t,entropy,switches,kl,l2_x,l2_x0hat";
pub const DYNAMICS_CSV_HEADER: &str = "step,t,entropy,switches,kl,l2_x,l2_x0hat,cos_score_final,cos_emb_final,wer_to_final";

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn base_cells(r: &StepRecord) -> String {
    format!(
        "{},{},{},{},{},{},{}",
        r.step,
        r.t,
        r.entropy_mean,
        opt(r.token_switches),
        opt(r.kl_mean),
        r.l2_x,
        r.l2_x0hat
    )
}

/// One CSV row per step with the recorded statistics.
pub fn trace_to_csv(trace: &GenerationTrace) -> String {
    let mut out = format!("{TRACE_CSV_HEADER}\n");
    for r in &trace.records {
        out.push_str(&base_cells(r));
        out.push('\n');
    }
    out
}

/// Dynamics table with cosine-to-final and WER-to-final columns. Without
/// state snapshots the cosine columns are dropped and a leading `#` warning
/// row says so; without tokens the WER column is empty.
pub fn dynamics_csv(trace: &GenerationTrace) -> Result<String> {
    let cos = if trace.has_states() { Some(cos_to_final(trace)?) } else { None };
    let gen = &trace.meta.gen_mask;
    let final_tokens: Option<Vec<u32>> = trace.records.last().and_then(|r| r.tokens.as_ref()).map(|t| pick(t, gen));
    let mut out = String::new();
    if cos.is_none() {
        out.push_str("# warning: trace lacks state snapshots; cos_score_final and cos_emb_final omitted\n");
        out.push_str("step,t,entropy,switches,kl,l2_x,l2_x0hat,wer_to_final\n");
    } else {
        out.push_str(DYNAMICS_CSV_HEADER);
        out.push('\n');
    }
    for (k, r) in trace.records.iter().enumerate() {
        out.push_str(&base_cells(r));
        if let Some(c) = &cos {
            let _ = write!(out, ",{},{}", c[k].0, c[k].1);
        }
        let w = match (&final_tokens, &r.tokens) {
            (Some(f), Some(t)) if !f.is_empty() => Some(wer(&pick(t, gen), f)?),
            _ => None,
        };
        let _ = writeln!(out, ",{}", opt(w));
    }
    Ok(out)
}

fn pick(tokens: &[u32], gen: &[bool]) -> Vec<u32> {
    tokens.iter().zip(gen).filter(|(_, &g)| g).map(|(&t, _)| t).collect()
}

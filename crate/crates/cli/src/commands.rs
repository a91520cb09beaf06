use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use halt_diffusion::corpus::{build_vocabulary, encode, Corpus, TokenSeq, Vocabulary};
use halt_diffusion::halting::{sweep_scored, HaltConfig, HaltKind, SWEEP_HEADER};
use halt_diffusion::metrics::{ar_nll_masked, evaluate, export_logprobs, report_csv, ExternalLogprobs, LogProbSource, SampleSet};
use halt_diffusion::sampler::{generate_batch, Conditioning, GenConfig, GenResult, RunInfo};
use halt_diffusion::trace::{dynamics_csv, read_trace, trace_to_csv, write_trace, GenerationTrace, Verbosity};
use halt_diffusion::training::{resume, save_ar, train, train_ar_reference, StepReport};
use halt_diffusion::util::write_atomic;
use halt_diffusion::Scalar;
use serde_json::{json, Value};

use crate::artifacts::*;
use crate::config::{expand_grid, parse_grid_axis, set_path, usage, Precision, RunConfig};

/// Noise scales of the `analyze --noise-sweep` grid.
pub const NOISE_GRID: [f64; 7] = [0.0, 0.5, 0.8, 0.9, 1.0, 1.1, 1.2];

pub const NOISE_SWEEP_HEADER: &str = "noise_scale,n_samples,dist_1,dist_2,dist_3,self_bleu,unique_token_fraction,ar_nll";

/// Writes `text` atomically to `out`, or to stdout.
fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => Ok(write_atomic(p, text.as_bytes())?),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

// ---------------------------------------------------------------- train

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Override a config key, e.g. `--set train.steps=200`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Train one child run per value, e.g. `--grid t_max=10,50`.
    /// Undotted keys refer to the `train` section.
    #[arg(long, value_name = "KEY=V1,V2")]
    pub grid: Vec<String>,
    /// Continue from a denoiser checkpoint up to `train.steps`.
    #[arg(long, conflicts_with = "grid")]
    pub resume: Option<PathBuf>,
    /// Print a progress line every N steps (0 silences it).
    #[arg(long, default_value_t = 100)]
    pub log_every: u64,
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let base = RunConfig::load(&args.config, &args.set)?;
    if args.grid.is_empty() {
        return train_run(&base, args.resume.as_deref(), args.log_every);
    }
    let axes = args.grid.iter().map(|g| parse_grid_axis(g)).collect::<Result<Vec<_>>>()?;
    let base_value = serde_json::to_value(&base)?;
    let mut runs = Vec::new();
    for (name, sets) in expand_grid(&axes) {
        let mut v = base_value.clone();
        for (k, val) in sets {
            set_path(&mut v, &k, val)?;
        }
        set_path(&mut v, "run_dir", json!(base.run_dir.join(&name)))?;
        runs.push(RunConfig::from_value(v).with_context(|| format!("grid point {name}"))?);
    }
    for cfg in &runs {
        train_run(cfg, None, args.log_every)?;
    }
    Ok(())
}

fn train_run(cfg: &RunConfig, resume_from: Option<&Path>, log_every: u64) -> Result<()> {
    match cfg.precision {
        Precision::F32 => train_run_t::<f32>(cfg, resume_from, log_every),
        Precision::F64 => train_run_t::<f64>(cfg, resume_from, log_every),
    }
}

fn train_run_t<T: Scalar>(cfg: &RunConfig, resume_from: Option<&Path>, log_every: u64) -> Result<()> {
    let dir = &cfg.run_dir;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let text = fs::read_to_string(&cfg.corpus.path).with_context(|| format!("reading corpus {}", cfg.corpus.path.display()))?;
    let vocab = build_vocabulary(&text, cfg.corpus.tokenizer, cfg.corpus.max_vocab)?;
    let corpus = Corpus::from_text(&text, &vocab, cfg.corpus.seq_len)?;
    write_atomic(&dir.join(CONFIG_FILE), cfg.to_json()?.as_bytes())?;
    vocab.save(&dir.join(VOCAB_FILE))?;
    eprintln!(
        "{}: {} sequences, {} tokens in vocabulary, {} steps",
        dir.display(),
        corpus.len(),
        vocab.size(),
        cfg.train.steps
    );
    let log = |r: &StepReport| {
        if log_every > 0 && (r.step % log_every == 0 || r.step == cfg.train.steps) {
            eprintln!("step {:>6}  loss {:.4}  lr {:.2e}  mean t {:.2}", r.step, r.loss, r.lr, r.mean_t);
        }
    };
    let outcome = match resume_from {
        Some(ck) => resume::<T>(ck, Some(cfg.train.steps), &corpus, dir, log)?,
        None => train::<T>(&cfg.model.denoiser(vocab.size(), cfg.corpus.seq_len), &cfg.train, &corpus, dir, log)?,
    };
    if let Some(ar_cfg) = &cfg.ar_reference {
        let (ar, losses) = train_ar_reference::<T>(ar_cfg, &corpus, vocab.size())?;
        save_ar(&ar, &dir.join(AR_FILE))?;
        if let Some(last) = losses.last() {
            eprintln!("AR reference: {} steps, final loss {last:.4}", losses.len());
        }
    }
    println!("{}", outcome.final_checkpoint.display());
    Ok(())
}

// ---------------------------------------------------------------- generation flags

fn parse_halt_kind(s: &str) -> std::result::Result<HaltKind, String> {
    serde_json::from_value(Value::String(s.to_owned())).map_err(|_| format!("unknown criterion `{s}` (entropy, kl, patience, fixed)"))
}

fn parse_verbosity(s: &str) -> std::result::Result<Verbosity, String> {
    serde_json::from_value(Value::String(s.to_owned())).map_err(|_| format!("unknown verbosity `{s}` (stats, stats+states)"))
}

/// Flags that override the `gen` section.
#[derive(Args, Debug, Default, Clone)]
pub struct GenFlags {
    #[arg(long = "n-steps", alias = "n_steps")]
    pub n_steps: Option<usize>,
    #[arg(long = "noise-scale", alias = "noise_scale")]
    pub noise_scale: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// `stats` or `stats+states`.
    #[arg(long, value_parser = parse_verbosity)]
    pub record: Option<Verbosity>,
    /// Condition on the first N prompt tokens.
    #[arg(long, conflicts_with = "enclosed")]
    pub prefix: Option<usize>,
    /// Condition on N/2 prompt tokens at each end.
    #[arg(long)]
    pub enclosed: Option<usize>,
    #[arg(long = "samples-per-prompt", alias = "samples_per_prompt")]
    pub samples_per_prompt: Option<usize>,
    /// Early-exit criterion: entropy, kl, patience or fixed.
    #[arg(long, value_parser = parse_halt_kind)]
    pub halt: Option<HaltKind>,
    #[arg(long = "e-t", alias = "e_t")]
    pub e_t: Option<f64>,
    #[arg(long = "d-t", alias = "d_t")]
    pub d_t: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long = "switch-threshold", alias = "switch_threshold")]
    pub switch_threshold: Option<usize>,
    #[arg(long = "min-steps", alias = "min_steps")]
    pub min_steps: Option<usize>,
    #[arg(long = "fixed-step", alias = "fixed_step")]
    pub fixed_step: Option<usize>,
    #[arg(long = "kl-halt-above", alias = "kl_halt_above")]
    pub kl_halt_above: bool,
}

impl GenFlags {
    pub fn apply(&self, base: &GenConfig) -> Result<GenConfig> {
        let mut g = base.clone();
        if let Some(v) = self.n_steps {
            g.n_steps = v;
        }
        if let Some(v) = self.noise_scale {
            g.noise_scale = v;
        }
        if let Some(v) = self.seed {
            g.seed = v;
        }
        if let Some(v) = self.record {
            g.record = v;
        }
        if let Some(n) = self.prefix {
            g.conditioning = Conditioning::Prefix { n };
        }
        if let Some(n) = self.enclosed {
            g.conditioning = Conditioning::Enclosed { n };
        }
        let tuned = self.e_t.is_some()
            || self.d_t.is_some()
            || self.patience.is_some()
            || self.switch_threshold.is_some()
            || self.min_steps.is_some()
            || self.fixed_step.is_some()
            || self.kl_halt_above;
        if let Some(kind) = self.halt {
            g.halt = Some(match g.halt.take() {
                Some(h) if h.kind == kind => h,
                _ => HaltConfig { kind, ..HaltConfig::fixed(0) },
            });
        }
        match g.halt.as_mut() {
            Some(h) => {
                h.e_t = self.e_t.unwrap_or(h.e_t);
                h.d_t = self.d_t.unwrap_or(h.d_t);
                h.patience_p = self.patience.unwrap_or(h.patience_p);
                h.switch_threshold = self.switch_threshold.unwrap_or(h.switch_threshold);
                h.fixed_step = self.fixed_step.unwrap_or(h.fixed_step);
                h.kl_halt_above |= self.kl_halt_above;
                if self.min_steps.is_some() {
                    h.min_steps = self.min_steps;
                }
            }
            None if tuned => return Err(usage("halting flags need --halt <criterion> (or gen.halt in the config)")),
            None => {}
        }
        g.validate().map_err(|e| usage(format!("generation settings: {e}")))?;
        Ok(g)
    }
}

/// Encodes the prompts file, checking it agrees with the conditioning mode.
fn load_prompts(gen: &GenConfig, path: Option<&Path>, vocab: &Vocabulary, seq_len: usize) -> Result<Vec<Option<TokenSeq>>> {
    match (path, gen.conditioning) {
        (Some(_), Conditioning::Unconditional) => {
            Err(usage("a prompts file needs conditioning: pass --prefix N or --enclosed N"))
        }
        (Some(p), _) => Ok(read_prompts(p)?.iter().map(|line| Some(encode(line, vocab, seq_len))).collect()),
        (None, Conditioning::Unconditional) => Ok(vec![None]),
        (None, c) => Err(usage(format!("conditioning {c:?} needs --prompts"))),
    }
}

fn run_info(run: &LoadedRun<impl Scalar>, checkpoint: &Path, gen: &GenConfig) -> Result<RunInfo> {
    Ok(RunInfo {
        run_id: run.run_dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
        checkpoint_id: checkpoint_id(checkpoint),
        config: serde_json::to_value(gen)?,
    })
}

fn sample_sets(results: &[GenResult], prompts: &[Option<TokenSeq>], per_prompt: usize) -> Result<Vec<SampleSet>> {
    results
        .chunks(per_prompt)
        .zip(prompts)
        .map(|(chunk, prompt)| {
            let samples = chunk.iter().map(|r| r.tokens.clone()).collect();
            let prompt = prompt.clone().unwrap_or_else(|| TokenSeq::new(vec![]));
            Ok(SampleSet::new(prompt, samples, chunk[0].trace.meta.gen_mask.clone())?)
        })
        .collect()
}

// ---------------------------------------------------------------- generate

#[derive(Args, Debug)]
pub struct GenerateArgs {
    /// Denoiser checkpoint inside a training run directory.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Run configuration; defaults to the run's `config.json` snapshot.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// One prompt per line; only the conditioned positions are read.
    #[arg(long)]
    pub prompts: Option<PathBuf>,
    /// Output directory (default: `<run_dir>/generations`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub flags: GenFlags,
}

pub fn cmd_generate(args: &GenerateArgs) -> Result<()> {
    match checkpoint_dtype(&args.checkpoint)?.as_str() {
        "f64" => generate_t::<f64>(args),
        _ => generate_t::<f32>(args),
    }
}

fn generate_t<T: Scalar>(args: &GenerateArgs) -> Result<()> {
    let run = load_run::<T>(&args.checkpoint, args.config.as_deref(), &args.set)?;
    let gen = args.flags.apply(&run.config.gen)?;
    let per_prompt = args.flags.samples_per_prompt.unwrap_or(run.config.metrics.samples_per_prompt);
    if per_prompt == 0 {
        return Err(usage("--samples-per-prompt must be positive"));
    }
    let seq_len = run.ddlm.model.config.seq_len;
    let prompts = load_prompts(&gen, args.prompts.as_deref(), &run.vocab, seq_len)?;
    let schedule = gen.schedule(run.train.t_max)?;
    let info = run_info(&run, &args.checkpoint, &gen)?;
    let results = generate_batch(&run.ddlm, &gen, &schedule, &prompts, per_prompt, &info)?;

    let out = args.out.clone().unwrap_or_else(|| run.run_dir.join("generations"));
    let traces = out.join("traces");
    clear_traces(&traces)?;
    write_atomic(&out.join("gen_config.json"), (serde_json::to_string_pretty(&gen)? + "\n").as_bytes())?;
    let fingerprint = vocab_fingerprint(&run.vocab);
    let mut records = Vec::with_capacity(results.len());
    for (i, r) in results.iter().enumerate() {
        let (p, s) = (i / per_prompt, i % per_prompt);
        let name = format!("p{p}_s{s}.jsonl");
        write_trace(&r.trace, &traces.join(&name))?;
        records.push(SampleRecord {
            prompt_index: p,
            sample_index: s,
            prompt: prompts[p].as_ref().map(|t| t.ids().to_vec()),
            tokens: r.tokens.ids().to_vec(),
            gen_mask: r.trace.meta.gen_mask.clone(),
            text: run.vocab.decode(&r.tokens),
            halt_step: r.halt_step,
            halted_early: r.halted_early,
            seed: r.seed,
            criterion: gen.halt.as_ref().map(|h| h.kind.name().to_owned()),
            threshold: gen.halt.as_ref().map(HaltConfig::threshold),
            vocab: fingerprint.clone(),
            vocab_size: run.vocab.size(),
            trace: format!("traces/{name}"),
        });
    }
    write_jsonl(&out.join(SAMPLES_FILE), &records)?;
    let halted = records.iter().filter(|r| r.halted_early).count();
    eprintln!("{} samples ({halted} halted early) in {}", records.len(), out.display());
    println!("{}", out.join(SAMPLES_FILE).display());
    Ok(())
}

/// Removes trace files a previous generation left behind so sweeps over
/// the directory see only this run.
fn clear_traces(dir: &Path) -> Result<()> {
    let Ok(entries) = fs::read_dir(dir) else { return Ok(()) };
    for e in entries.filter_map(|e| e.ok()) {
        let name = e.file_name().to_string_lossy().into_owned();
        if name.starts_with('p') && name.ends_with(".jsonl") && name.contains("_s") {
            fs::remove_file(e.path()).with_context(|| format!("removing stale trace {}", e.path().display()))?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- sweep

#[derive(Args, Debug)]
pub struct SweepArgs {
    /// Directory of trace files written by `generate`.
    #[arg(long)]
    pub traces: PathBuf,
    /// Criterion grid, e.g. `kl=0.001,0.01` or `fixed=100..1000:100`.
    #[arg(long, required = true, value_name = "KIND=VALUES")]
    pub grid: Vec<String>,
    /// Switch threshold for patience grids.
    #[arg(long = "switch-threshold", alias = "switch_threshold", default_value_t = 0)]
    pub switch_threshold: usize,
    /// Minimum steps before any criterion may fire (KL defaults to a quarter of the budget).
    #[arg(long = "min-steps", alias = "min_steps")]
    pub min_steps: Option<usize>,
    #[arg(long = "kl-halt-above", alias = "kl_halt_above")]
    pub kl_halt_above: bool,
    /// AR reference checkpoint used to score each halted sample.
    #[arg(long)]
    pub ar: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// `a..b:s` (inclusive) or a single number.
fn expand_values(spec: &str) -> Result<Vec<f64>> {
    let num = |s: &str| s.trim().parse::<f64>().map_err(|_| usage(format!("bad grid value `{s}`")));
    let mut out = Vec::new();
    for item in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        match item.split_once("..") {
            Some((lo, rest)) => {
                let (hi, step) = rest.split_once(':').ok_or_else(|| usage(format!("range `{item}` needs a step: a..b:s")))?;
                let (lo, hi, step) = (num(lo)?, num(hi)?, num(step)?);
                if !(step > 0.0) || hi < lo {
                    return Err(usage(format!("empty range `{item}`")));
                }
                let n = ((hi - lo) / step + 1e-9).floor() as usize;
                out.extend((0..=n).map(|i| lo + i as f64 * step));
            }
            None => out.push(num(item)?),
        }
    }
    if out.is_empty() {
        return Err(usage(format!("grid `{spec}` has no values")));
    }
    Ok(out)
}

pub fn parse_halt_grid(spec: &str, args: &SweepArgs) -> Result<Vec<HaltConfig>> {
    let (kind, vals) = spec.split_once('=').ok_or_else(|| usage(format!("expected KIND=VALUES, got `{spec}`")))?;
    let kind = parse_halt_kind(kind).map_err(usage)?;
    let as_count = |v: f64| {
        if v < 0.0 || v.fract() != 0.0 {
            Err(usage(format!("{} grid needs whole numbers, got {v}", kind.name())))
        } else {
            Ok(v as usize)
        }
    };
    expand_values(vals)?
        .into_iter()
        .map(|v| {
            let mut h = match kind {
                HaltKind::Entropy => HaltConfig::entropy(v),
                HaltKind::Kl => HaltConfig::kl(v),
                HaltKind::Patience => HaltConfig::patience(as_count(v)?, args.switch_threshold),
                HaltKind::Fixed => HaltConfig::fixed(as_count(v)?),
            };
            h.min_steps = args.min_steps;
            h.kl_halt_above = args.kl_halt_above;
            Ok(h)
        })
        .collect()
}

pub fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    let mut grid = Vec::new();
    for g in &args.grid {
        grid.extend(parse_halt_grid(g, args)?);
    }
    let traces: Vec<GenerationTrace> =
        trace_files(&args.traces)?.iter().map(|p| read_trace(p).with_context(|| format!("reading {}", p.display()))).collect::<Result<_>>()?;
    for h in &grid {
        h.validate(traces[0].meta.n_max).map_err(|e| usage(format!("grid entry {} {}: {e}", h.kind.name(), h.threshold())))?;
    }
    let ar = args.ar.as_deref().map(|p| load_ar_checked::<f64>(p, None)).transpose()?;
    let score = ar.as_ref().map(|ar| {
        move |tr: &GenerationTrace, step: usize| -> halt_diffusion::Result<f64> {
            ar_nll_masked(ar, tr.tokens_at(step)?, &tr.meta.gen_mask)
        }
    });
    let rows = sweep_scored(&traces, &grid, score.as_ref())?;
    let mut csv = format!("{SWEEP_HEADER}\n");
    for r in &rows {
        csv.push_str(&r.csv_line());
        csv.push('\n');
    }
    emit(args.out.as_deref(), &csv)
}

// ---------------------------------------------------------------- analyze

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    /// Trace to turn into a per-step dynamics table.
    #[arg(long, required_unless_present = "noise_sweep")]
    pub trace: Option<PathBuf>,
    /// Generate at each noise scale in {0, 0.5, 0.8, 0.9, 1, 1.1, 1.2} and
    /// write one dynamics file per scale plus `noise_sweep.csv`.
    #[arg(long = "noise-sweep", requires_all = ["checkpoint", "out"], conflicts_with = "trace")]
    pub noise_sweep: bool,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub prompts: Option<PathBuf>,
    /// AR reference checkpoint for the noise sweep summary.
    #[arg(long)]
    pub ar: Option<PathBuf>,
    /// Output file (trace mode) or directory (noise sweep).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub flags: GenFlags,
}

pub fn cmd_analyze(args: &AnalyzeArgs) -> Result<()> {
    if !args.noise_sweep {
        let path = args.trace.as_deref().expect("clap requires --trace");
        let trace = read_trace(path)?;
        if !trace.has_states() {
            eprintln!("warning: {} has no state snapshots; cosine columns are omitted", path.display());
        }
        return emit(args.out.as_deref(), &dynamics_csv(&trace)?);
    }
    let ck = args.checkpoint.as_deref().expect("clap requires --checkpoint");
    match checkpoint_dtype(ck)?.as_str() {
        "f64" => noise_sweep_t::<f64>(args, ck),
        _ => noise_sweep_t::<f32>(args, ck),
    }
}

fn noise_sweep_t<T: Scalar>(args: &AnalyzeArgs, ck: &Path) -> Result<()> {
    let out = args.out.as_deref().expect("clap requires --out");
    let run = load_run::<T>(ck, args.config.as_deref(), &args.set)?;
    let base = args.flags.apply(&run.config.gen)?;
    let per_prompt = args.flags.samples_per_prompt.unwrap_or(run.config.metrics.samples_per_prompt);
    let prompts = load_prompts(&base, args.prompts.as_deref(), &run.vocab, run.ddlm.model.config.seq_len)?;
    let ar_path = args.ar.clone().or_else(|| Some(run.run_dir.join(AR_FILE)).filter(|p| p.is_file()));
    let ar = ar_path.as_deref().map(|p| load_ar_checked::<f64>(p, Some(run.vocab.size()))).transpose()?;
    let mut summary = format!("{NOISE_SWEEP_HEADER}\n");
    for scale in NOISE_GRID {
        let gen = GenConfig { noise_scale: scale, record: Verbosity::StatsStates, ..base.clone() };
        let schedule = gen.schedule(run.train.t_max)?;
        let results = generate_batch(&run.ddlm, &gen, &schedule, &prompts, per_prompt, &run_info(&run, ck, &gen)?)?;
        write_atomic(&out.join(format!("noise_{scale:.1}.csv")), dynamics_csv(&results[0].trace)?.as_bytes())?;
        let sets = sample_sets(&results, &prompts, per_prompt)?;
        let rows = evaluate(&sets, ar.as_ref().map(|a| a as &dyn LogProbSource))?;
        let m = rows.last().expect("evaluate appends a macro row");
        let f = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        summary.push_str(&format!(
            "{scale:.1},{},{},{},{},{},{},{}\n",
            m.n_samples,
            f(m.dist_1),
            f(m.dist_2),
            f(m.dist_3),
            f(m.self_bleu),
            f(m.unique_token_fraction),
            f(m.ar_nll)
        ));
    }
    write_atomic(&out.join("noise_sweep.csv"), summary.as_bytes())?;
    println!("{}", out.join("noise_sweep.csv").display());
    Ok(())
}

// ---------------------------------------------------------------- eval

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// `samples.jsonl` files written by `generate`.
    #[arg(long, required = true, num_args = 1..)]
    pub samples: Vec<PathBuf>,
    /// AR reference checkpoint.
    #[arg(long, conflicts_with = "logprobs")]
    pub ar: Option<PathBuf>,
    /// Per-token log-probabilities (JSON Lines of {tokens, logprobs}) in
    /// evaluation order.
    #[arg(long)]
    pub logprobs: Option<PathBuf>,
    /// Write the AR reference's log-probabilities in the import format.
    #[arg(long = "export-logprobs", requires = "ar")]
    pub export_logprobs: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let mut groups: BTreeMap<(usize, usize), Vec<SampleRecord>> = BTreeMap::new();
    let mut fingerprints = BTreeSet::new();
    for (f, path) in args.samples.iter().enumerate() {
        for r in read_samples(path)? {
            fingerprints.insert((r.vocab.clone(), r.vocab_size));
            groups.entry((f, r.prompt_index)).or_default().push(r);
        }
    }
    if groups.is_empty() {
        bail!("no sample records in {:?}", args.samples);
    }
    if fingerprints.len() > 1 {
        let list: Vec<String> = fingerprints.iter().map(|(h, n)| format!("{h} ({n} tokens)")).collect();
        bail!("mixed vocabularies across sample files: {}", list.join(", "));
    }
    let vocab_size = fingerprints.iter().next().map(|f| f.1).expect("nonempty");
    let multi_file = args.samples.len() > 1;
    let mut ids = Vec::new();
    let mut sets = Vec::new();
    for ((f, p), mut recs) in groups {
        recs.sort_by_key(|r| r.sample_index);
        if recs.iter().any(|r| r.max_token() as usize >= vocab_size || r.gen_mask != recs[0].gen_mask) {
            bail!("{}: prompt {p} has inconsistent tokens or masks", args.samples[f].display());
        }
        if recs.len() < 2 {
            eprintln!("warning: prompt {p} has {} sample; diversity columns left empty", recs.len());
        }
        ids.push(if multi_file { format!("f{f}_p{p}") } else { format!("p{p}") });
        let prompt = TokenSeq::new(recs[0].prompt.clone().unwrap_or_default());
        let samples = recs.iter().map(|r| TokenSeq::new(r.tokens.clone())).collect();
        sets.push(SampleSet::new(prompt, samples, recs[0].gen_mask.clone())?);
    }
    let ar = args.ar.as_deref().map(|p| load_ar_checked::<f64>(p, Some(vocab_size))).transpose()?;
    let external = args.logprobs.as_deref().map(ExternalLogprobs::load).transpose()?;
    let scorer: Option<&dyn LogProbSource> = match (&ar, &external) {
        (Some(a), _) => Some(a),
        (_, Some(e)) => Some(e),
        _ => None,
    };
    if let (Some(path), Some(a)) = (&args.export_logprobs, &ar) {
        let seqs: Vec<&[u32]> = sets.iter().flat_map(|s| s.samples.iter().map(|t| t.ids())).collect();
        write_atomic(path, export_logprobs(a, &seqs)?.as_bytes())?;
    }
    let mut rows = evaluate(&sets, scorer)?;
    for (row, id) in rows.iter_mut().zip(ids) {
        row.id = id;
    }
    emit(args.out.as_deref(), &report_csv(&rows))
}

// ---------------------------------------------------------------- trace-to-csv

#[derive(Args, Debug)]
pub struct TraceToCsvArgs {
    pub trace: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn cmd_trace_to_csv(args: &TraceToCsvArgs) -> Result<()> {
    if !args.trace.is_file() {
        return Err(usage(format!("trace not found: {}", args.trace.display())));
    }
    emit(args.out.as_deref(), &trace_to_csv(&read_trace(&args.trace)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sweep_args() -> SweepArgs {
        SweepArgs {
            traces: PathBuf::new(),
            grid: vec![],
            switch_threshold: 1,
            min_steps: None,
            kl_halt_above: false,
            ar: None,
            out: None,
        }
    }

    #[test]
    fn fixed_range_has_ten_points() {
        let g = parse_halt_grid("fixed=100..1000:100", &sweep_args()).unwrap();
        assert_eq!(g.len(), 10);
        assert_eq!(g[9].fixed_step, 1000);
    }

    #[test]
    fn patience_grid_uses_switch_threshold() {
        let g = parse_halt_grid("patience=2,5", &sweep_args()).unwrap();
        assert_eq!(g[1], HaltConfig::patience(5, 1));
        assert!(parse_halt_grid("patience=2.5", &sweep_args()).is_err());
        assert!(parse_halt_grid("speed=1", &sweep_args()).is_err());
    }

    #[test]
    fn gen_flags_build_a_kl_criterion() {
        let flags = GenFlags { halt: Some(HaltKind::Kl), d_t: Some(0.01), min_steps: Some(250), n_steps: Some(1000), ..Default::default() };
        let g = flags.apply(&GenConfig::default()).unwrap();
        assert_eq!(g.halt, Some(HaltConfig::kl(0.01).with_min_steps(250)));
        assert_eq!(g.n_steps, 1000);
        let orphan = GenFlags { d_t: Some(0.01), ..Default::default() };
        assert!(orphan.apply(&GenConfig::default()).is_err());
    }
}

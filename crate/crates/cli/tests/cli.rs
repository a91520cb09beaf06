//! End-to-end runs of the `halt-diffusion` binary on a tiny configuration.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::{json, Value};
use tempfile::TempDir;

const CORPUS: &str = "the cat sat on the mat\na dog ran to the log\nthe sun is hot\nbirds sing at dawn\n";

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_halt-diffusion"));
    c.env("HALT_DIFFUSION_THREADS", "1");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn binary")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}\n{}",
        String::from_utf8_lossy(&out.stderr),
        String::from_utf8_lossy(&out.stdout)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn tiny_config(dir: &Path, run_dir: &Path) -> Value {
    let corpus = dir.join("corpus.txt");
    fs::write(&corpus, CORPUS).unwrap();
    json!({
        "run_dir": run_dir,
        "seed": 3,
        "precision": "f64",
        "corpus": { "path": corpus, "seq_len": 16 },
        "model": { "embed_dim": 8, "model_dim": 16, "heads": 2, "layers": 1, "time_features": 8 },
        "train": { "steps": 30, "batch_size": 4, "lr": 1e-3, "warmup_steps": 5, "checkpoint_every": 10 },
        "ar_reference": { "steps": 20, "batch_size": 4, "model_dim": 16, "layers": 1, "heads": 2 },
        "gen": { "n_steps": 20 },
        "metrics": { "samples_per_prompt": 3 }
    })
}

fn write_config(path: &Path, v: &Value) -> PathBuf {
    fs::write(path, serde_json::to_string_pretty(v).unwrap()).unwrap();
    path.to_owned()
}

struct Trained {
    dir: TempDir,
    run_dir: PathBuf,
}

impl Trained {
    fn ckpt(&self) -> String {
        self.run_dir.join("checkpoints/step_30.ckpt").display().to_string()
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}

fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let run_dir = dir.path().join("run");
        let cfg = write_config(&dir.path().join("cfg.json"), &tiny_config(dir.path(), &run_dir));
        ok(&["train", "--config", cfg.to_str().unwrap(), "--log-every", "0"]);
        Trained { dir, run_dir }
    })
}

fn lines(path: &Path) -> Vec<String> {
    fs::read_to_string(path).unwrap().lines().map(str::to_owned).collect()
}

#[test]
fn missing_corpus_exits_2_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = tiny_config(dir.path(), &dir.path().join("run"));
    v["corpus"]["path"] = json!("/definitely/not/here.txt");
    let cfg = write_config(&dir.path().join("cfg.json"), &v);
    let out = run(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/definitely/not/here.txt"));
}

#[test]
fn unknown_config_key_exits_2_with_key_path() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = tiny_config(dir.path(), &dir.path().join("run"));
    v["train"]["learning_rate"] = json!(0.1);
    let cfg = write_config(&dir.path().join("cfg.json"), &v);
    let out = run(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("train") && err.contains("learning_rate"), "{err}");
}

#[test]
fn train_writes_run_artifacts() {
    let t = trained();
    for f in ["config.json", "vocab.txt", "train_log.csv", "ar_reference.ckpt", "checkpoints/step_30.ckpt", "checkpoints/step_0.ckpt"] {
        assert!(t.run_dir.join(f).is_file(), "missing {f}");
    }
    let log = lines(&t.run_dir.join("train_log.csv"));
    assert_eq!(log[0], "step,loss,lr,mean_t");
    assert_eq!(log.len(), 31);
    let snap: Value = serde_json::from_str(&fs::read_to_string(t.run_dir.join("config.json")).unwrap()).unwrap();
    assert_eq!(snap["train"]["seed"], json!(3));
    assert_eq!(snap["gen"]["seed"], json!(3));
    assert_eq!(snap["train"]["steps"], json!(30));
}

#[test]
fn grid_makes_one_child_run_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("grid");
    let mut v = tiny_config(dir.path(), &run_dir);
    v["train"]["steps"] = json!(2);
    v.as_object_mut().unwrap().remove("ar_reference");
    let cfg = write_config(&dir.path().join("cfg.json"), &v);
    ok(&["train", "--config", cfg.to_str().unwrap(), "--grid", "t_max=10,50", "--log-every", "0"]);
    for (child, t_max) in [("t_max=10", 10.0), ("t_max=50", 50.0)] {
        let snap: Value = serde_json::from_str(&fs::read_to_string(run_dir.join(child).join("config.json")).unwrap()).unwrap();
        assert_eq!(snap["train"]["t_max"].as_f64(), Some(t_max));
        assert!(run_dir.join(child).join("checkpoints/step_2.ckpt").is_file());
    }
}

#[test]
fn generate_unconditional_writes_samples_and_full_traces() {
    let t = trained();
    let out = t.path("gen_uncond");
    ok(&["generate", "--checkpoint", &t.ckpt(), "--out", out.to_str().unwrap()]);
    let samples = lines(&out.join("samples.jsonl"));
    assert_eq!(samples.len(), 3);
    for s in &samples {
        let rec: Value = serde_json::from_str(s).unwrap();
        assert_eq!(rec["halt_step"], json!(20));
        assert_eq!(rec["halted_early"], json!(false));
        let trace = out.join(rec["trace"].as_str().unwrap());
        // Header plus one record per grid time.
        assert_eq!(lines(&trace).len(), 1 + 21);
    }
}

#[test]
fn generate_is_deterministic() {
    let t = trained();
    let (a, b) = (t.path("det_a"), t.path("det_b"));
    for out in [&a, &b] {
        ok(&["generate", "--checkpoint", &t.ckpt(), "--out", out.to_str().unwrap(), "--seed", "11"]);
    }
    assert_eq!(fs::read(a.join("samples.jsonl")).unwrap(), fs::read(b.join("samples.jsonl")).unwrap());
    assert_eq!(fs::read(a.join("traces/p0_s1.jsonl")).unwrap(), fs::read(b.join("traces/p0_s1.jsonl")).unwrap());
}

#[test]
fn kl_min_steps_gate_is_enforced() {
    let t = trained();
    let out = t.path("gen_kl");
    ok(&[
        "generate", "--checkpoint", &t.ckpt(), "--out", out.to_str().unwrap(),
        "--n-steps", "1000", "--halt", "kl", "--d_t", "0.01", "--min_steps", "250", "--samples-per-prompt", "2",
    ]);
    for s in lines(&out.join("samples.jsonl")) {
        let rec: Value = serde_json::from_str(&s).unwrap();
        assert!(rec["halt_step"].as_u64().unwrap() >= 250, "{rec}");
        assert_eq!(rec["criterion"], json!("kl"));
    }
}

#[test]
fn prefix_prompts_are_echoed() {
    let t = trained();
    let prompts = t.path("prompts.txt");
    fs::write(&prompts, "the cat sat on the mat\nbirds sing at dawn\n").unwrap();
    let out = t.path("gen_prefix");
    ok(&["generate", "--checkpoint", &t.ckpt(), "--out", out.to_str().unwrap(), "--prompts", prompts.to_str().unwrap(), "--prefix", "4"]);
    let recs: Vec<Value> = lines(&out.join("samples.jsonl")).iter().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(recs.len(), 6);
    assert!(recs[0]["text"].as_str().unwrap().starts_with("the "));
    assert!(recs[5]["text"].as_str().unwrap().starts_with("bird"));
    assert_eq!(recs[5]["prompt_index"], json!(1));
}

#[test]
fn prompts_without_conditioning_is_usage_error() {
    let t = trained();
    let prompts = t.path("prompts_bad.txt");
    fs::write(&prompts, "the cat\n").unwrap();
    let out = run(&["generate", "--checkpoint", &t.ckpt(), "--prompts", prompts.to_str().unwrap(), "--out", t.path("x").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn sweep_reports_every_grid_point() {
    let t = trained();
    let out = t.path("gen_sweep");
    ok(&["generate", "--checkpoint", &t.ckpt(), "--out", out.to_str().unwrap(), "--samples-per-prompt", "4"]);
    let ar = t.run_dir.join("ar_reference.ckpt");
    let csv = ok(&[
        "sweep", "--traces", out.join("traces").to_str().unwrap(),
        "--grid", "fixed=2..20:2", "--grid", "kl=0.001,0.1", "--grid", "patience=2,3",
        "--ar", ar.to_str().unwrap(),
    ]);
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "criterion,threshold,mean_halt_step,frac_halted,mean_ar_nll");
    assert_eq!(rows.iter().filter(|r| r.starts_with("fixed,")).count(), 10);
    assert_eq!(rows.len(), 1 + 10 + 2 + 2);
    let fixed20: Vec<&str> = rows.iter().find(|r| r.starts_with("fixed,20,")).unwrap().split(',').collect();
    assert_eq!(fixed20[2], "20");
    assert_eq!(fixed20[3], "1");
    assert!(fixed20[4].parse::<f64>().unwrap() > 0.0);
}

#[test]
fn sweep_on_empty_directory_fails() {
    let t = trained();
    let empty = t.path("empty_traces");
    fs::create_dir_all(&empty).unwrap();
    let out = run(&["sweep", "--traces", empty.to_str().unwrap(), "--grid", "kl=0.1"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn analyze_emits_dynamics_table() {
    let t = trained();
    let out = t.path("gen_states");
    ok(&["generate", "--checkpoint", &t.ckpt(), "--out", out.to_str().unwrap(), "--record", "stats+states", "--samples-per-prompt", "1"]);
    let csv = ok(&["analyze", "--trace", out.join("traces/p0_s0.jsonl").to_str().unwrap()]);
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "step,t,entropy,switches,kl,l2_x,l2_x0hat,cos_score_final,cos_emb_final,wer_to_final");
    assert_eq!(rows.len(), 22);
    let last: Vec<&str> = rows[21].split(',').collect();
    assert_eq!(&last[7..], ["1", "1", "0"]);
}

#[test]
fn noise_sweep_writes_one_file_per_scale() {
    let t = trained();
    let out = t.path("noise");
    ok(&["analyze", "--noise-sweep", "--checkpoint", &t.ckpt(), "--out", out.to_str().unwrap(), "--n-steps", "5"]);
    for s in ["0.0", "0.5", "0.8", "0.9", "1.0", "1.1", "1.2"] {
        assert!(out.join(format!("noise_{s}.csv")).is_file(), "missing scale {s}");
    }
    let summary = lines(&out.join("noise_sweep.csv"));
    assert_eq!(summary.len(), 8);
    // Zero initial noise makes every sample identical.
    let zero: Vec<&str> = summary[1].split(',').collect();
    assert_eq!(zero[5], "1");
}

#[test]
fn eval_is_byte_identical_and_rejects_mixed_vocabularies() {
    let t = trained();
    let out = t.path("gen_eval");
    ok(&["generate", "--checkpoint", &t.ckpt(), "--out", out.to_str().unwrap()]);
    let samples = out.join("samples.jsonl");
    let ar = t.run_dir.join("ar_reference.ckpt");
    let (r1, r2, lp) = (t.path("r1.csv"), t.path("r2.csv"), t.path("lp.jsonl"));
    for r in [&r1, &r2] {
        ok(&["eval", "--samples", samples.to_str().unwrap(), "--ar", ar.to_str().unwrap(), "--out", r.to_str().unwrap(), "--export-logprobs", lp.to_str().unwrap()]);
    }
    assert_eq!(fs::read(&r1).unwrap(), fs::read(&r2).unwrap());
    let report = lines(&r1);
    assert_eq!(report[0], "id,n_samples,ar_nll,dist_1,dist_2,dist_3,self_bleu,zipf,unique_token_fraction");
    assert!(report[2].starts_with("macro,3,"));

    // The exported log-probabilities reproduce the in-repo scores.
    let r3 = t.path("r3.csv");
    ok(&["eval", "--samples", samples.to_str().unwrap(), "--logprobs", lp.to_str().unwrap(), "--out", r3.to_str().unwrap()]);
    let nll = |p: &Path| lines(p)[1].split(',').nth(2).unwrap().parse::<f64>().unwrap();
    assert!((nll(&r1) - nll(&r3)).abs() < 1e-9);

    let mut other = fs::read_to_string(&samples).unwrap();
    let mut rec: Value = serde_json::from_str(other.lines().next().unwrap()).unwrap();
    rec["vocab"] = json!("0000000000000000");
    rec["prompt_index"] = json!(7);
    other.push_str(&format!("{rec}\n"));
    let mixed = t.path("mixed.jsonl");
    fs::write(&mixed, other).unwrap();
    let out = run(&["eval", "--samples", mixed.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("mixed vocabularies"));
}

#[test]
fn eval_warns_on_single_sample_groups() {
    let t = trained();
    let out = t.path("gen_single");
    ok(&["generate", "--checkpoint", &t.ckpt(), "--out", out.to_str().unwrap(), "--samples-per-prompt", "1"]);
    let res = run(&["eval", "--samples", out.join("samples.jsonl").to_str().unwrap()]);
    assert!(res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("warning"));
    let csv = String::from_utf8(res.stdout).unwrap();
    assert!(csv.lines().nth(1).unwrap().starts_with("p0,1,,,,,,"));
}

#[test]
fn trace_to_csv_header() {
    let t = trained();
    let out = t.path("gen_csv");
    ok(&["generate", "--checkpoint", &t.ckpt(), "--out", out.to_str().unwrap(), "--samples-per-prompt", "1"]);
    let csv = ok(&["trace-to-csv", out.join("traces/p0_s0.jsonl").to_str().unwrap()]);
    assert_eq!(csv.lines().next(), Some("step,t,entropy,switches,kl,l2_x,l2_x0hat"));
    assert_eq!(csv.lines().count(), 22);
}

#[test]
fn resume_continues_to_the_configured_step() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("resumed");
    let mut v = tiny_config(dir.path(), &run_dir);
    v["train"]["steps"] = json!(35);
    v.as_object_mut().unwrap().remove("ar_reference");
    let cfg = write_config(&dir.path().join("cfg.json"), &v);
    let from = t.run_dir.join("checkpoints/step_20.ckpt");
    let stdout = ok(&["train", "--config", cfg.to_str().unwrap(), "--resume", from.to_str().unwrap(), "--log-every", "0"]);
    assert!(stdout.trim().ends_with("step_35.ckpt"));
    assert_eq!(lines(&run_dir.join("train_log.csv")).len(), 1 + 15);
}

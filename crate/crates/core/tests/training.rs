use std::fs;

use halt_diffusion::ar::{ar_nll, ArConfig, ArModel};
use halt_diffusion::corpus::{build_vocabulary, Corpus, TokenizerMode};
use halt_diffusion::denoiser::DenoiserConfig;
use halt_diffusion::diffusion::{MaskSpec, TimeWarpCdf};
use halt_diffusion::metrics::{export_logprobs, ExternalLogprobs};
use halt_diffusion::training::*;
use halt_diffusion::util::rng_from;
use rand::Rng;

const THREE: &str = "the quick brown fox jumps\nover the lazy dog again\nand then it goes to sleep\n";

fn tiny_model(vocab: usize, seq_len: usize) -> DenoiserConfig {
    DenoiserConfig { embed_dim: 16, model_dim: 32, heads: 2, layers: 1, seq_len, time_features: 8, ..DenoiserConfig::desk(vocab) }
}

fn char_corpus(text: &str, seq_len: usize) -> (usize, Corpus) {
    let vocab = build_vocabulary(text, TokenizerMode::Char, 256).unwrap();
    (vocab.size(), Corpus::from_text(text, &vocab, seq_len).unwrap())
}

#[test]
fn resume_reproduces_the_uninterrupted_run() {
    let (v, corpus) = char_corpus(THREE, 24);
    let model = tiny_model(v, 24);
    let cfg = TrainConfig { steps: 12, batch_size: 3, checkpoint_every: 6, seed: 5, time_warping: true, ..TrainConfig::default() };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    train::<f64>(&model, &cfg, &corpus, a.path(), |_| {}).unwrap();
    let mid = checkpoint_path(a.path(), 6);
    resume::<f64>(&mid, None, &corpus, b.path(), |_| {}).unwrap();
    let full = fs::read(checkpoint_path(a.path(), 12)).unwrap();
    let resumed = fs::read(checkpoint_path(b.path(), 12)).unwrap();
    assert!(full == resumed, "resumed checkpoint differs from the uninterrupted one");
    let rows = |p: &std::path::Path, skip: usize| {
        fs::read_to_string(p.join("train_log.csv")).unwrap().lines().skip(skip).map(str::to_owned).collect::<Vec<_>>()
    };
    assert_eq!(rows(a.path(), 7), rows(b.path(), 1));
}

#[test]
fn loss_halves_within_200_steps_on_three_sentences() {
    let (v, corpus) = char_corpus(THREE, 32);
    let model = tiny_model(v, 32);
    let cfg = TrainConfig {
        steps: 200,
        batch_size: 8,
        lr: 1e-2,
        warmup_steps: 20,
        mask: MaskSpec::mlm(0.5),
        checkpoint_every: 0,
        seed: 2,
        ..TrainConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let mut losses = Vec::new();
    train::<f32>(&model, &cfg, &corpus, dir.path(), |r| losses.push(r.loss)).unwrap();
    let ema = |xs: &[f64]| xs.iter().skip(1).fold(xs[0], |e, &x| 0.95 * e + 0.05 * x);
    let start = losses[0];
    let end = ema(&losses);
    assert!(end <= 0.5 * start, "loss EMA {end} vs first step {start}");
}

#[test]
fn ar_reference_memorizes_one_sentence() {
    let text = "a stitch in time saves nine\n";
    let (v, corpus) = char_corpus(text, 28);
    let cfg = ArTrainConfig { steps: 300, batch_size: 4, lr: 3e-3, warmup_steps: 20, model_dim: 32, layers: 1, heads: 2, ..ArTrainConfig::default() };
    let (model, _) = train_ar_reference::<f64>(&cfg, &corpus, v).unwrap();
    let ids = corpus.sequences()[0].ids();
    let nll = ar_nll(&model, &[], ids).unwrap();
    assert!(nll < 0.05, "memorized NLL {nll}");
}

#[test]
fn untrained_ar_scores_near_uniform() {
    let (v, corpus) = char_corpus(THREE, 24);
    let model = ArModel::<f64>::new(ArConfig::desk(v, 24), &mut rng_from(4)).unwrap();
    let nll = ar_nll(&model, &[], corpus.sequences()[1].ids()).unwrap();
    let uniform = (v as f64).ln();
    assert!((nll - uniform).abs() <= 0.2 * uniform, "{nll} vs ln|V| = {uniform}");
}

#[test]
fn imported_logprobs_match_in_repo_scores() {
    let (v, corpus) = char_corpus(THREE, 24);
    let model = ArModel::<f64>::new(ArConfig::desk(v, 24), &mut rng_from(8)).unwrap();
    let seqs: Vec<&[u32]> = corpus.sequences().iter().map(|s| s.ids()).collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("lp.jsonl");
    fs::write(&path, export_logprobs(&model, &seqs).unwrap()).unwrap();
    let ext = ExternalLogprobs::load(&path).unwrap();
    for s in &seqs {
        let a = ar_nll(&model, &s[..4], &s[4..]).unwrap();
        let b = ar_nll(&ext, &s[..4], &s[4..]).unwrap();
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }
}

#[test]
fn warped_times_concentrate_where_loss_is_high() {
    let t_max = 10.0;
    let mut warp = TimeWarpCdf::uniform(t_max, 32).unwrap();
    for _ in 0..2000 {
        for bin in 0..32 {
            let mid = (warp.knots()[bin] + warp.knots()[bin + 1]) / 2.0;
            let loss = if mid < t_max / 2.0 { 10.0 } else { 1.0 };
            warp.update(bin, loss, 0.01).unwrap();
        }
    }
    let mut rng = rng_from(17);
    let low = (0..10_000).filter(|_| warp.sample(rng.random::<f64>()) <= t_max / 2.0).count();
    assert!(low >= 7_000, "{low} of 10000 samples in the high-loss half");
}

#[test]
fn embedding_norms_hold_after_every_step() {
    let (v, corpus) = char_corpus(THREE, 24);
    let cfg = TrainConfig { steps: 25, batch_size: 3, lr: 1e-2, checkpoint_every: 0, ..TrainConfig::default() };
    let mut state = TrainState::<f64>::init(&tiny_model(v, 24), &cfg).unwrap();
    let target = (16f64).sqrt();
    for step in 0..cfg.steps {
        let batch = halt_diffusion::corpus::batch_for_step(&corpus, cfg.batch_size, cfg.seed, step);
        train_step(&mut state, &batch, &cfg).unwrap();
        for row in state.table.matrix().rows() {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - target).abs() <= 1e-6, "step {step}: norm {norm}");
        }
    }
}

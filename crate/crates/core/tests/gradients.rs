//! Analytic gradients against central differences in double precision.

use halt_diffusion::ar::{ArConfig, ArModel};
use halt_diffusion::denoiser::{Denoiser, DenoiserConfig};
use halt_diffusion::nn::Parameters;
use halt_diffusion::util::rng_from;
use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

const H: f64 = 1e-5;
const PROBES: usize = 6;

fn randn(rows: usize, cols: usize, rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.sample(StandardNormal))
}

/// `L = sum(logits * w)`, so `dL/dlogits = w`.
fn probe(logits: &Array2<f64>, w: &Array2<f64>) -> f64 {
    (logits * w).sum()
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs()).max(1e-6)
}

/// Checks `PROBES` random entries of every parameter tensor of `model`.
fn check_params<M: Parameters<f64> + Clone>(model: &M, grads: &M, loss: impl Fn(&M) -> f64, rng: &mut impl Rng) {
    let names: Vec<String> = model.named().into_iter().map(|(n, _)| n).collect();
    let analytic: Vec<Array2<f64>> = grads.named().into_iter().map(|(_, a)| a.clone()).collect();
    let mut worst = (0.0, String::new());
    for (k, name) in names.iter().enumerate() {
        let len = analytic[k].len();
        for _ in 0..PROBES.min(len) {
            let idx = rng.random_range(0..len);
            let bump = |delta: f64| {
                let mut m = model.clone();
                let mut params = m.named_mut();
                let slot = params[k].1.as_slice_mut().expect("contiguous parameters");
                slot[idx] += delta;
                drop(params);
                loss(&m)
            };
            let numeric = (bump(H) - bump(-H)) / (2.0 * H);
            let a = analytic[k].as_slice().unwrap()[idx];
            let e = rel_err(a, numeric);
            assert!(e <= 1e-3, "{name}[{idx}]: analytic {a} numeric {numeric} rel err {e}");
            if e > worst.0 {
                worst = (e, name.clone());
            }
        }
    }
    eprintln!("worst relative error {:.2e} in {}", worst.0, worst.1);
}

#[test]
fn denoiser_parameter_and_input_gradients() {
    let mut rng = rng_from(11);
    let cfg = DenoiserConfig { vocab_size: 7, embed_dim: 6, model_dim: 8, heads: 2, layers: 2, ffn_mult: 2, seq_len: 5, time_features: 4 };
    let model = Denoiser::<f64>::new(cfg.clone(), &mut rng).unwrap();
    let times = [0.7, 4.0];
    let x = randn(2 * cfg.seq_len, cfg.embed_dim, &mut rng);
    let (logits, cache) = model.forward_batch(&x, &times).unwrap();
    let w = randn(logits.nrows(), logits.ncols(), &mut rng);
    let mut grads = model.zeros_like();
    let dx = model.backward(&cache, &w, &mut grads);

    let loss = |m: &Denoiser<f64>| probe(&m.forward_batch(&x, &times).unwrap().0, &w);
    check_params(&model, &grads, loss, &mut rng);

    for _ in 0..PROBES {
        let (r, c) = (rng.random_range(0..x.nrows()), rng.random_range(0..x.ncols()));
        let at = |delta: f64| {
            let mut xp = x.clone();
            xp[(r, c)] += delta;
            probe(&model.forward_batch(&xp, &times).unwrap().0, &w)
        };
        let numeric = (at(H) - at(-H)) / (2.0 * H);
        assert!(rel_err(dx[(r, c)], numeric) <= 1e-3, "dX[{r},{c}]: {} vs {numeric}", dx[(r, c)]);
    }
}

#[test]
fn ar_model_parameter_gradients() {
    let mut rng = rng_from(12);
    let cfg = ArConfig { vocab_size: 9, model_dim: 8, heads: 2, layers: 2, ffn_mult: 2, max_len: 6 };
    let model = ArModel::<f64>::new(cfg, &mut rng).unwrap();
    let seqs: Vec<Vec<u32>> = (0..2).map(|_| (0..6).map(|_| rng.random_range(0..9)).collect()).collect();
    let refs: Vec<&[u32]> = seqs.iter().map(Vec::as_slice).collect();
    let (logits, cache) = model.forward(&refs).unwrap();
    let w = randn(logits.nrows(), logits.ncols(), &mut rng);
    let mut grads = model.zeros_like();
    model.backward(&cache, &w, &mut grads);
    let loss = |m: &ArModel<f64>| probe(&m.forward(&refs).unwrap().0, &w);
    check_params(&model, &grads, loss, &mut rng);
}

use std::collections::{BTreeMap, HashMap, HashSet};

use crate::error::{Error, Result};

fn ngrams<T: Copy + Eq + std::hash::Hash>(seq: &[T], n: usize) -> impl Iterator<Item = &[T]> {
    seq.windows(n.max(1)).filter(move |_| n > 0)
}

/// Distinct n-grams pooled over `samples` divided by total pooled n-grams.
pub fn dist_n<T: Copy + Eq + std::hash::Hash>(samples: &[&[T]], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::invalid("dist-n needs n >= 1"));
    }
    let mut seen = HashSet::new();
    let mut total = 0usize;
    for s in samples {
        for g in ngrams(s, n) {
            seen.insert(g);
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::invalid(format!("no {n}-grams in samples")));
    }
    Ok(seen.len() as f64 / total as f64)
}

/// Distinct tokens over length for one sample.
pub fn unique_token_fraction<T: Copy + Eq + std::hash::Hash>(sample: &[T]) -> Result<f64> {
    if sample.is_empty() {
        return Err(Error::invalid("unique token fraction of an empty sample"));
    }
    Ok(sample.iter().collect::<HashSet<_>>().len() as f64 / sample.len() as f64)
}

fn counts<T: Copy + Eq + std::hash::Hash>(seq: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    for g in ngrams(seq, n) {
        *m.entry(g).or_insert(0) += 1;
    }
    m
}

/// Sentence BLEU with uniform 1–4-gram weights and a brevity penalty.
/// A precision with zero clipped matches is replaced by `1 / (total + 1)`.
pub fn bleu<T: Copy + Eq + std::hash::Hash>(hyp: &[T], refs: &[&[T]]) -> Result<f64> {
    if refs.is_empty() {
        return Err(Error::invalid("BLEU needs at least one reference"));
    }
    if hyp.is_empty() {
        return Ok(0.0);
    }
    let mut log_p = 0.0;
    for n in 1..=4 {
        let hc = counts(hyp, n);
        let mut max_ref: HashMap<&[T], usize> = HashMap::new();
        for r in refs {
            for (g, c) in counts(r, n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        let total: usize = hc.values().sum();
        let matched: usize = hc.iter().map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0))).sum();
        let p = if matched == 0 { 1.0 / (total + 1) as f64 } else { matched as f64 / total as f64 };
        log_p += p.ln() / 4.0;
    }
    let c = hyp.len();
    let r = refs
        .iter()
        .map(|r| r.len())
        .min_by_key(|&len| (len.abs_diff(c), len))
        .unwrap();
    let bp = if c >= r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    Ok(bp * log_p.exp())
}

/// Mean over samples of BLEU against all other samples.
pub fn self_bleu<T: Copy + Eq + std::hash::Hash>(samples: &[&[T]]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::invalid("self-BLEU needs at least two samples"));
    }
    let mut total = 0.0;
    for i in 0..samples.len() {
        let refs: Vec<&[T]> = samples.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, s)| *s).collect();
        total += bleu(samples[i], &refs)?;
    }
    Ok(total / samples.len() as f64)
}

/// Negative least-squares slope of `ln frequency` against `ln rank`.
pub fn zipf_from_counts(counts: &[usize]) -> Result<f64> {
    let mut f: Vec<usize> = counts.iter().copied().filter(|&c| c > 0).collect();
    if f.len() < 2 {
        return Err(Error::DegenerateFrequencies);
    }
    f.sort_unstable_by(|a, b| b.cmp(a));
    let pts: Vec<(f64, f64)> = f.iter().enumerate().map(|(i, &c)| (((i + 1) as f64).ln(), (c as f64).ln())).collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Ok(-sxy / sxx)
}

/// Zipf coefficient of the token frequencies pooled over `seqs`.
pub fn zipf_coeff<T: Copy + Ord>(seqs: &[&[T]]) -> Result<f64> {
    let mut freq: BTreeMap<T, usize> = BTreeMap::new();
    for s in seqs {
        for &t in s.iter() {
            *freq.entry(t).or_insert(0) += 1;
        }
    }
    zipf_from_counts(&freq.into_values().collect::<Vec<_>>())
}

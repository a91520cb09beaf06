//! Sample quality and diversity metrics.
//!
//! All metrics work on token ids. Diversity metrics look only at generated
//! positions with PAD removed; AR-NLL scores every generated position given
//! everything before it.

mod diversity;
mod wer;

pub use diversity::{bleu, dist_n, self_bleu, unique_token_fraction, zipf_coeff, zipf_from_counts};
pub use wer::{edit_distance, wer};

pub use crate::ar::{ar_nll, ar_nll_masked, LogProbSource};

use std::fs;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::corpus::{TokenSeq, PAD_ID};
use crate::error::{Error, Result};

/// Several samples generated from one prompt.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    pub prompt: TokenSeq,
    /// Full sequences (conditioning included), all the same length.
    pub samples: Vec<TokenSeq>,
    /// `true` at generated positions.
    pub gen_mask: Vec<bool>,
}

impl SampleSet {
    pub fn new(prompt: TokenSeq, samples: Vec<TokenSeq>, gen_mask: Vec<bool>) -> Result<Self> {
        for s in &samples {
            if s.len() != gen_mask.len() {
                return Err(Error::LengthMismatch(s.len(), gen_mask.len()));
            }
        }
        Ok(Self { prompt, samples, gen_mask })
    }

    /// Generated tokens of each sample with PAD dropped.
    pub fn continuations(&self) -> Vec<Vec<u32>> {
        self.samples
            .iter()
            .map(|s| {
                s.ids()
                    .iter()
                    .zip(&self.gen_mask)
                    .filter(|(&t, &g)| g && t != PAD_ID)
                    .map(|(&t, _)| t)
                    .collect()
            })
            .collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MetricReport {
    pub id: String,
    pub n_samples: usize,
    pub ar_nll: Option<f64>,
    pub dist_1: Option<f64>,
    pub dist_2: Option<f64>,
    pub dist_3: Option<f64>,
    pub self_bleu: Option<f64>,
    pub zipf: Option<f64>,
    pub unique_token_fraction: Option<f64>,
}

pub const REPORT_HEADER: &str = "id,n_samples,ar_nll,dist_1,dist_2,dist_3,self_bleu,zipf,unique_token_fraction";

impl MetricReport {
    pub fn csv_line(&self) -> String {
        let f = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.id,
            self.n_samples,
            f(self.ar_nll),
            f(self.dist_1),
            f(self.dist_2),
            f(self.dist_3),
            f(self.self_bleu),
            f(self.zipf),
            f(self.unique_token_fraction)
        )
    }
}

pub fn report_csv(rows: &[MetricReport]) -> String {
    let mut out = format!("{REPORT_HEADER}\n");
    for r in rows {
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    out
}

fn mean(v: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// One report per set plus a final `macro` row. Diversity columns are
/// absent for sets with fewer than two samples. The macro row averages the
/// per-set values except `zipf`, which is fitted on the pooled corpus.
pub fn evaluate(sets: &[SampleSet], scorer: Option<&dyn LogProbSource>) -> Result<Vec<MetricReport>> {
    let mut rows = Vec::with_capacity(sets.len() + 1);
    let mut pooled: Vec<Vec<u32>> = Vec::new();
    for (i, set) in sets.iter().enumerate() {
        let conts = set.continuations();
        let refs: Vec<&[u32]> = conts.iter().map(|c| c.as_slice()).collect();
        let diverse = set.samples.len() >= 2;
        let dist = |n| if diverse { dist_n(&refs, n).ok() } else { None };
        let ar_nll = match scorer {
            Some(s) if set.gen_mask.iter().any(|&g| g) => {
                let mut per = Vec::with_capacity(set.samples.len());
                for sample in &set.samples {
                    per.push(ar_nll_masked(s, sample.ids(), &set.gen_mask)?);
                }
                mean(per)
            }
            _ => None,
        };
        rows.push(MetricReport {
            id: i.to_string(),
            n_samples: set.samples.len(),
            ar_nll,
            dist_1: dist(1),
            dist_2: dist(2),
            dist_3: dist(3),
            self_bleu: if diverse { self_bleu(&refs).ok() } else { None },
            zipf: zipf_coeff(&refs).ok(),
            unique_token_fraction: mean(refs.iter().filter_map(|c| unique_token_fraction(c).ok())),
        });
        pooled.extend(conts);
    }
    let pooled_refs: Vec<&[u32]> = pooled.iter().map(|c| c.as_slice()).collect();
    let col = |f: fn(&MetricReport) -> Option<f64>| mean(rows.iter().filter_map(f));
    let macro_row = MetricReport {
        id: "macro".into(),
        n_samples: rows.iter().map(|r| r.n_samples).sum(),
        ar_nll: col(|r| r.ar_nll),
        dist_1: col(|r| r.dist_1),
        dist_2: col(|r| r.dist_2),
        dist_3: col(|r| r.dist_3),
        self_bleu: col(|r| r.self_bleu),
        zipf: zipf_coeff(&pooled_refs).ok(),
        unique_token_fraction: col(|r| r.unique_token_fraction),
    };
    rows.push(macro_row);
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogprobRecord {
    pub tokens: Vec<u32>,
    pub logprobs: Vec<f64>,
}

/// Per-token log-probabilities imported from a JSON Lines file, consumed in
/// order. Each scoring request must match the next record's tokens.
pub struct ExternalLogprobs {
    records: Vec<LogprobRecord>,
    cursor: Mutex<usize>,
}

impl ExternalLogprobs {
    pub fn new(records: Vec<LogprobRecord>) -> Result<Self> {
        for (i, r) in records.iter().enumerate() {
            if r.tokens.len() != r.logprobs.len() {
                return Err(Error::invalid(format!("logprob record {i}: {} tokens but {} logprobs", r.tokens.len(), r.logprobs.len())));
            }
        }
        Ok(Self { records, cursor: Mutex::new(0) })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            records.push(serde_json::from_str(line).map_err(|e| Error::Parse {
                path: path.to_owned(),
                line: i + 1,
                msg: e.to_string(),
            })?);
        }
        Self::new(records)
    }
}

impl LogProbSource for ExternalLogprobs {
    fn token_logprobs(&self, tokens: &[u32]) -> Result<Vec<f64>> {
        let mut cursor = self.cursor.lock().expect("cursor lock");
        let sample = *cursor;
        let rec = self.records.get(sample).ok_or(Error::LogprobMismatch { sample, position: 0 })?;
        if let Some(position) = (0..tokens.len().max(rec.tokens.len())).find(|&i| tokens.get(i) != rec.tokens.get(i)) {
            return Err(Error::LogprobMismatch { sample, position });
        }
        *cursor += 1;
        Ok(rec.logprobs.clone())
    }
}

/// Serializes `scorer`'s log-probabilities for `seqs` in the import format.
pub fn export_logprobs(scorer: &dyn LogProbSource, seqs: &[&[u32]]) -> Result<String> {
    let mut out = String::new();
    for s in seqs {
        let rec = LogprobRecord { tokens: s.to_vec(), logprobs: scorer.token_logprobs(s)? };
        out.push_str(&serde_json::to_string(&rec)?);
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(samples: &[&[u32]], gen: &[bool]) -> SampleSet {
        SampleSet::new(TokenSeq::new(vec![]), samples.iter().map(|s| TokenSeq::new(s.to_vec())).collect(), gen.to_vec()).unwrap()
    }

    struct Flat(f64);

    impl LogProbSource for Flat {
        fn token_logprobs(&self, tokens: &[u32]) -> Result<Vec<f64>> {
            Ok(tokens.iter().map(|&t| -self.0 * (t as f64 + 1.0)).collect())
        }
    }

    #[test]
    fn identical_sets_and_macro_row() {
        let a: &[u32] = &[1, 2, 3, 4, 5, 0];
        let b: &[u32] = &[6, 2, 7, 7, 1, 1];
        let gen = [false, true, true, true, true, true];
        let sets = vec![set(&[a; 5], &gen), set(&[b; 5], &gen)];
        let rows = evaluate(&sets, Some(&Flat(0.5))).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0].self_bleu, Some(1.0));
        assert_eq!(rows[1].self_bleu, Some(1.0));
        let m = &rows[2];
        let cols: [(fn(&MetricReport) -> Option<f64>, &str); 3] = [
            (|r| r.ar_nll, "ar_nll"),
            (|r| r.dist_1, "dist_1"),
            (|r| r.unique_token_fraction, "utf"),
        ];
        for (f, name) in cols {
            let want = (f(&rows[0]).unwrap() + f(&rows[1]).unwrap()) / 2.0;
            assert!((f(m).unwrap() - want).abs() < 1e-12, "{name}");
        }
        // Continuation of `a` drops the conditioned 1 and the PAD.
        assert_eq!(rows[0].dist_1, Some(4.0 / 20.0));
    }

    #[test]
    fn single_sample_has_no_diversity() {
        let rows = evaluate(&[set(&[&[1, 2, 3]], &[true; 3])], None).unwrap();
        assert_eq!(rows[0].dist_1, None);
        assert_eq!(rows[0].self_bleu, None);
        assert_eq!(rows[0].ar_nll, None);
        assert!(rows[0].unique_token_fraction.is_some());
    }

    #[test]
    fn external_logprobs_round_trip_and_mismatch() {
        let seqs: Vec<&[u32]> = vec![&[3, 1, 2], &[0, 0, 4]];
        let text = export_logprobs(&Flat(0.25), &seqs).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lp.jsonl");
        fs::write(&path, &text).unwrap();
        let ext = ExternalLogprobs::load(&path).unwrap();
        let a = ar_nll(&ext, &[3], &[1, 2]).unwrap();
        assert_eq!(a, ar_nll(&Flat(0.25), &[3], &[1, 2]).unwrap());
        match ext.token_logprobs(&[0, 9, 4]) {
            Err(Error::LogprobMismatch { sample: 1, position: 1 }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn report_csv_layout() {
        let r = MetricReport { id: "macro".into(), n_samples: 5, self_bleu: Some(1.0), ..Default::default() };
        let csv = report_csv(&[r]);
        assert_eq!(csv, format!("{REPORT_HEADER}\nmacro,5,,,,,1,,\n"));
    }
}

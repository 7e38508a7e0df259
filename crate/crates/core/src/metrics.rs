//! ROUGE-1/2/L F1 and corpus BLEU-4 over token-id sequences, scaled to [0, 100].

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn ngrams<T: Ord + Clone>(tokens: &[T], n: usize) -> BTreeMap<&[T], usize> {
    let mut counts = BTreeMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

fn clipped_overlap<T: Ord + Clone>(hyp: &BTreeMap<&[T], usize>, reference: &BTreeMap<&[T], usize>) -> usize {
    hyp.iter().map(|(g, &c)| c.min(reference.get(g).copied().unwrap_or(0))).sum()
}

fn f1(overlap: usize, hyp_total: usize, ref_total: usize) -> f64 {
    if overlap == 0 || hyp_total == 0 || ref_total == 0 {
        return 0.0;
    }
    let p = overlap as f64 / hyp_total as f64;
    let r = overlap as f64 / ref_total as f64;
    100.0 * 2.0 * p * r / (p + r)
}

fn nonempty_ref<T>(op: &'static str, reference: &[T]) -> Result<()> {
    if reference.is_empty() {
        return Err(Error::invalid(op, "empty reference"));
    }
    Ok(())
}

/// ROUGE-N F1 over clipped n-gram counts.
pub fn rouge_n<T: Ord + Clone>(hyp: &[T], reference: &[T], n: usize) -> Result<f64> {
    nonempty_ref("rouge_n", reference)?;
    if n == 0 {
        return Err(Error::invalid("rouge_n", "n must be at least 1"));
    }
    let (h, r) = (ngrams(hyp, n), ngrams(reference, n));
    let total = |m: &BTreeMap<&[T], usize>| m.values().sum::<usize>();
    Ok(f1(clipped_overlap(&h, &r), total(&h), total(&r)))
}

/// Length of the longest common subsequence.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        core::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F1 from the longest common subsequence.
pub fn rouge_l<T: PartialEq>(hyp: &[T], reference: &[T]) -> Result<f64> {
    nonempty_ref("rouge_l", reference)?;
    Ok(f1(lcs_len(hyp, reference), hyp.len(), reference.len()))
}

/// Corpus BLEU with n-gram orders `1..=max_n` and brevity penalty.
///
/// A zero precision is replaced by `1 / (2 c)` with `c` the total hypothesis
/// length, so short corpora without higher-order matches still score.
pub fn bleu<T: Ord + Clone>(hyps: &[Vec<T>], refs: &[Vec<T>], max_n: usize) -> Result<f64> {
    if hyps.is_empty() || hyps.len() != refs.len() {
        return Err(Error::invalid(
            "bleu",
            format!("{} hypotheses for {} references", hyps.len(), refs.len()),
        ));
    }
    if max_n == 0 {
        return Err(Error::invalid("bleu", "max n must be at least 1"));
    }
    let c: usize = hyps.iter().map(Vec::len).sum();
    let r: usize = refs.iter().map(Vec::len).sum();
    if c == 0 {
        return Ok(0.0);
    }
    let floor = 1.0 / (2.0 * c as f64);
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let (mut matched, mut total) = (0usize, 0usize);
        for (h, rf) in hyps.iter().zip(refs) {
            let hg = ngrams(h, n);
            matched += clipped_overlap(&hg, &ngrams(rf, n));
            total += hg.values().sum::<usize>();
        }
        let p = if matched == 0 { floor } else { matched as f64 / total as f64 };
        log_sum += libm::log(p);
    }
    let bp = if c > r { 1.0 } else { libm::exp(1.0 - r as f64 / c as f64) };
    Ok(100.0 * bp * libm::exp(log_sum / max_n as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub id: String,
    pub rouge1: f64,
    pub rouge2: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
}

/// Corpus scores: ROUGE averaged over samples, BLEU at corpus level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub rouge1: f64,
    pub rouge2: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub bleu: f64,
    pub samples: Vec<SampleScore>,
}

impl ScoreReport {
    pub fn compute<T: Ord + Clone>(ids: &[String], hyps: &[Vec<T>], refs: &[Vec<T>]) -> Result<Self> {
        if ids.len() != hyps.len() || hyps.len() != refs.len() || ids.is_empty() {
            return Err(Error::invalid(
                "score_report",
                format!("{} ids, {} hypotheses, {} references", ids.len(), hyps.len(), refs.len()),
            ));
        }
        let samples = ids
            .iter()
            .zip(hyps.iter().zip(refs))
            .map(|(id, (h, r))| {
                Ok(SampleScore {
                    id: id.clone(),
                    rouge1: rouge_n(h, r, 1)?,
                    rouge2: rouge_n(h, r, 2)?,
                    rouge_l: rouge_l(h, r)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let n = samples.len() as f64;
        let mean = |f: fn(&SampleScore) -> f64| samples.iter().map(f).sum::<f64>() / n;
        Ok(Self {
            rouge1: mean(|s| s.rouge1),
            rouge2: mean(|s| s.rouge2),
            rouge_l: mean(|s| s.rouge_l),
            bleu: bleu(hyps, refs, 4)?,
            samples,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-9
    }

    #[test]
    fn rouge_examples() {
        let (a, b) = (toks("a b c"), toks("a b d"));
        assert!(close(rouge_n(&a, &a, 1).unwrap(), 100.0));
        assert!(close(rouge_n(&a, &b, 1).unwrap(), 200.0 / 3.0));
        assert!(close(rouge_n(&a, &b, 2).unwrap(), 50.0));
        assert_eq!(rouge_n(&a, &toks("x y"), 1).unwrap(), 0.0);
        assert_eq!(rouge_n(&[], &a, 1).unwrap(), 0.0);
        assert!(rouge_n(&a, &[], 1).is_err());
    }

    #[test]
    fn rouge_l_examples() {
        assert!(close(rouge_l(&toks("a c b"), &toks("a b c")).unwrap(), 200.0 / 3.0));
        assert!(close(rouge_l(&toks("c b a"), &toks("a b c")).unwrap(), 100.0 / 3.0));
        assert!(close(rouge_l(&toks("a b"), &toks("a b")).unwrap(), 100.0));
    }

    #[test]
    fn bleu_identity_and_brevity() {
        let refs = vec![toks("a b c d e"), toks("f g h i")];
        assert!(close(bleu(&refs, &refs, 4).unwrap(), 100.0));
        let short = vec![toks("a b c d"), toks("f g h i")];
        let s = bleu(&short, &refs, 4).unwrap();
        // all precisions are 1, so only the brevity penalty remains
        assert!(close(s, 100.0 * libm::exp(1.0 - 9.0 / 8.0)));
        assert!(bleu::<&str>(&[], &[], 4).is_err());
    }

    #[test]
    fn report_means() {
        let ids = vec![String::from("x"), String::from("y")];
        let hyps = vec![toks("a b c"), toks("a b")];
        let refs = vec![toks("a b d"), toks("a b")];
        let r = ScoreReport::compute(&ids, &hyps, &refs).unwrap();
        assert!(close(r.rouge1, (200.0 / 3.0 + 100.0) / 2.0));
        assert!(close(r.rouge2, 75.0));
    }
}

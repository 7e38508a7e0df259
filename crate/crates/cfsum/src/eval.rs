//! Parallel beam-search evaluation.

use anyhow::{Context, Result};
use cfsum_core::data::{MultimodalSample, Vocabulary};
use cfsum_core::metrics::ScoreReport;
use cfsum_core::model::Model;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Environment variable capping the evaluation worker count.
pub const THREADS_ENV: &str = "CFSUM_THREADS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub summary: String,
    /// `None` when the model has no pre-filter or it was switched off.
    pub kept: Option<bool>,
    pub consistency: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub report: ScoreReport,
    /// Fraction of samples whose image passed the pre-filter.
    pub kept_rate: Option<f64>,
    pub predictions: Vec<Prediction>,
}

fn worker_count() -> usize {
    let available = std::thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok()) {
        Some(cap) if cap > 0 => cap.min(available),
        _ => available,
    }
}

/// Decode every sample with beam search. Only the pre-filter runs; no
/// auxiliary objective is evaluated.
pub fn evaluate(model: &Model, vocab: &Vocabulary, corpus: &[MultimodalSample], filter: bool) -> Result<Evaluation> {
    anyhow::ensure!(!corpus.is_empty(), "empty evaluation corpus");
    anyhow::ensure!(
        vocab.len() == model.config.vocab_size,
        "vocabulary has {} tokens but the model expects {}",
        vocab.len(),
        model.config.vocab_size
    );
    let pool = rayon::ThreadPoolBuilder::new().num_threads(worker_count()).build()?;
    let decoded: Vec<_> = pool.install(|| {
        corpus
            .par_iter()
            .map(|s| {
                model
                    .summarize(s, filter)
                    .with_context(|| format!("decoding sample `{}`", s.id))
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let ids: Vec<String> = corpus.iter().map(|s| s.id.clone()).collect();
    let hyps: Vec<Vec<usize>> = decoded.iter().map(|(h, _)| h.tokens.clone()).collect();
    let refs: Vec<Vec<usize>> = corpus.iter().map(|s| s.summary.clone()).collect();
    let report = ScoreReport::compute(&ids, &hyps, &refs)?;
    let decisions: Vec<_> = decoded.iter().filter_map(|(_, d)| *d).collect();
    let kept_rate = (!decisions.is_empty())
        .then(|| decisions.iter().filter(|d| d.keep).count() as f64 / decisions.len() as f64);
    let predictions = corpus
        .iter()
        .zip(&decoded)
        .map(|(s, (h, d))| Prediction {
            id: s.id.clone(),
            summary: vocab.decode(&h.tokens),
            kept: d.map(|d| d.keep),
            consistency: d.map(|d| d.consistency),
        })
        .collect();
    Ok(Evaluation {
        report,
        kept_rate,
        predictions,
    })
}

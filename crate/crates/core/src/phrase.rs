//! Phrase-level complement: copy-ratio regression on both streams, phrase
//! gain and its projection back onto tokens.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::Span;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{Tape, Tensor};

pub use crate::word::divergence_loss as phrase_divergence_loss;

/// Per-phrase scorer outputs and gains of one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhraseGain {
    pub truth: Vec<f64>,
    pub bi_ratio: Vec<f64>,
    pub uni_ratio: Vec<f64>,
    pub phrase_gain: Vec<f64>,
    pub token_gain: Vec<f64>,
}

fn check_spans(op: &'static str, spans: &[Span], len: usize) -> Result<()> {
    if spans.is_empty() {
        return Err(Error::invalid(op, "no phrase spans"));
    }
    for s in spans {
        if s.is_empty() || s.end > len {
            return Err(Error::invalid(op, format!("span [{}, {}) invalid for {len} tokens", s.start, s.end)));
        }
    }
    Ok(())
}

/// Fraction of each phrase's tokens that occur in the summary.
pub fn phrase_truth(spans: &[Span], text: &[usize], summary: &[usize]) -> Result<Vec<f64>> {
    check_spans("phrase_truth", spans, text.len())?;
    Ok(spans
        .iter()
        .map(|s| {
            let hits = text[s.start..s.end].iter().filter(|t| summary.contains(t)).count();
            hits as f64 / s.len() as f64
        })
        .collect())
}

/// `K x T` matrix whose row `k` averages the tokens of phrase `k`.
pub fn pooling_matrix(spans: &[Span], len: usize) -> Result<Vec<f64>> {
    check_spans("pooling_matrix", spans, len)?;
    let mut m = vec![0.0; spans.len() * len];
    for (k, s) in spans.iter().enumerate() {
        let w = 1.0 / s.len() as f64;
        m[k * len + s.start..k * len + s.end].iter_mut().for_each(|x| *x = w);
    }
    Ok(m)
}

/// Shared scorer: mean-pool each phrase, then `sigmoid(relu(x W1 + b1) W2 + b2)`.
/// Returns `K x 1` ratios.
pub fn phrase_score(tape: &mut Tape<'_>, model: &Model, features: Tensor, spans: &[Span]) -> Result<Tensor> {
    let len = tape.shape(features)[0];
    let pool = tape.constant(&[spans.len(), len], pooling_matrix(spans, len)?)?;
    let pooled = tape.matmul(pool, features)?;
    let [w1, b1, w2, b2] = model.scorer().map(|id| tape.param(id));
    let h = tape.matmul(pooled, w1)?;
    let h = tape.add_row(h, b1)?;
    let h = tape.relu(h)?;
    let z = tape.matmul(h, w2)?;
    let z = tape.add_row(z, b2)?;
    tape.sigmoid(z)
}

/// `|R^u - truth| - |R^m - truth|` per phrase.
pub fn phrase_gain(uni_ratio: &[f64], bi_ratio: &[f64], truth: &[f64]) -> Result<Vec<f64>> {
    if uni_ratio.len() != truth.len() || bi_ratio.len() != truth.len() {
        return Err(Error::invalid(
            "phrase_gain",
            format!("{} / {} ratios for {} phrases", uni_ratio.len(), bi_ratio.len(), truth.len()),
        ));
    }
    Ok(truth
        .iter()
        .zip(uni_ratio.iter().zip(bi_ratio))
        .map(|(&t, (&u, &m))| (u - t).abs() - (m - t).abs())
        .collect())
}

/// Copy-scorer loss summed over both streams.
pub fn copys_loss(tape: &mut Tape<'_>, bi_ratio: Tensor, uni_ratio: Tensor, truth: &[f64]) -> Result<Tensor> {
    let shape = tape.shape(bi_ratio).to_vec();
    let target = tape.constant(&shape, truth.to_vec())?;
    let lm = tape.mse(bi_ratio, target)?;
    let lu = tape.mse(uni_ratio, target)?;
    tape.add(lm, lu)
}

/// Token gain: the largest gain among phrases containing the token.
pub fn project_gain(gain: &[f64], spans: &[Span], len: usize) -> Result<Vec<f64>> {
    check_spans("project_gain", spans, len)?;
    if gain.len() != spans.len() {
        return Err(Error::invalid("project_gain", format!("{} gains for {} spans", gain.len(), spans.len())));
    }
    let mut out = vec![f64::NEG_INFINITY; len];
    for (s, &g) in spans.iter().zip(gain) {
        out[s.start..s.end].iter_mut().for_each(|o| *o = o.max(g));
    }
    if let Some(j) = out.iter().position(|o| *o == f64::NEG_INFINITY) {
        return Err(Error::invalid("project_gain", format!("token {j} is not covered by any phrase")));
    }
    Ok(out)
}

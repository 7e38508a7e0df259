//! Word-level complement: copy classification on both streams, per-token
//! image gain and the attention divergence that ties inter-modal attention
//! to that gain.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{clamp_prob, kernels, Tape, Tensor};

/// Per-token copy statistics of one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordGain {
    pub targets: Vec<f64>,
    pub bi_prob: Vec<f64>,
    pub uni_prob: Vec<f64>,
    pub gain: Vec<f64>,
}

/// 1 for every text token that also occurs in the summary.
pub fn copy_targets(text: &[usize], summary: &[usize]) -> Vec<f64> {
    text.iter().map(|t| if summary.contains(t) { 1.0 } else { 0.0 }).collect()
}

/// Shared copy head: `sigmoid(features . w + b)`, one row per token (`T x 1`).
pub fn copy_classify(tape: &mut Tape<'_>, model: &Model, features: Tensor) -> Result<Tensor> {
    let (w, b) = model.copy_head();
    let (w, b) = (tape.param(w), tape.param(b));
    let z = tape.matmul(features, w)?;
    let z = tape.add_row(z, b)?;
    tape.sigmoid(z)
}

fn prob_of_target(p_one: f64, target: f64) -> f64 {
    clamp_prob(if target >= 0.5 { p_one } else { 1.0 - p_one })
}

/// `ln P(y = target | m) - ln P(y = target | u)` per token.
pub fn word_gain(bi_prob: &[f64], uni_prob: &[f64], targets: &[f64]) -> Result<Vec<f64>> {
    if bi_prob.len() != targets.len() || uni_prob.len() != targets.len() {
        return Err(Error::invalid(
            "word_gain",
            format!("{} / {} probabilities for {} tokens", bi_prob.len(), uni_prob.len(), targets.len()),
        ));
    }
    Ok(targets
        .iter()
        .zip(bi_prob.iter().zip(uni_prob))
        .map(|(&y, (&pm, &pu))| kernels::ln(prob_of_target(pm, y)) - kernels::ln(prob_of_target(pu, y)))
        .collect())
}

/// Copy-classification loss summed over both streams.
pub fn copyc_loss(tape: &mut Tape<'_>, bi_prob: Tensor, uni_prob: Tensor, targets: &[f64]) -> Result<Tensor> {
    let lm = tape.bce(bi_prob, targets)?;
    let lu = tape.bce(uni_prob, targets)?;
    tape.add(lm, lu)
}

fn check_t2v_args(layers: usize, text_len: usize, total_len: usize) -> Result<()> {
    if layers == 0 {
        return Err(Error::invalid("t2v", "no attention layers given"));
    }
    if text_len == 0 || text_len >= total_len {
        return Err(Error::invalid(
            "t2v",
            format!("text length {text_len} leaves no image positions among {total_len}"),
        ));
    }
    Ok(())
}

/// Mean text-image attention per text token (`T x 1`), averaged over `attn`.
///
/// For token `j` this is the attention it sends to image positions plus the
/// attention it receives from them, divided by twice the region count.
pub fn t2v(tape: &mut Tape<'_>, attn: &[Tensor], text_len: usize, total_len: usize) -> Result<Tensor> {
    check_t2v_args(attn.len(), text_len, total_len)?;
    let regions = (total_len - text_len) as f64;
    let mut total: Option<Tensor> = None;
    for &a in attn {
        if tape.shape(a) != [total_len, total_len] {
            return Err(Error::ShapeMismatch {
                op: "t2v",
                lhs: tape.shape(a).to_vec(),
                rhs: alloc::vec![total_len, total_len],
            });
        }
        let rows = tape.slice(a, 0, 0, text_len)?;
        let to_image = tape.slice(rows, 1, text_len, total_len)?;
        let sent = tape.sum_axis(to_image, 1)?;
        let image_rows = tape.slice(a, 0, text_len, total_len)?;
        let from_image = tape.slice(image_rows, 1, 0, text_len)?;
        let received = tape.sum_axis(from_image, 0)?;
        let received = tape.transpose(received)?;
        let both = tape.add(sent, received)?;
        total = Some(match total {
            None => both,
            Some(t) => tape.add(t, both)?,
        });
    }
    let total = total.expect("checked nonempty");
    tape.scale(total, 1.0 / (2.0 * regions * attn.len() as f64))
}

/// Plain-value counterpart of [`t2v`] over row-major `C x C` matrices.
pub fn t2v_values(attn: &[&[f64]], text_len: usize, total_len: usize) -> Result<Vec<f64>> {
    check_t2v_args(attn.len(), text_len, total_len)?;
    let c = total_len;
    let norm = 2.0 * (c - text_len) as f64 * attn.len() as f64;
    let mut out = alloc::vec![0.0; text_len];
    for a in attn {
        if a.len() != c * c {
            return Err(Error::invalid("t2v", format!("attention of {} values for C = {c}", a.len())));
        }
        for (j, o) in out.iter_mut().enumerate() {
            for s in text_len..c {
                *o += a[j * c + s] + a[s * c + j];
            }
        }
    }
    out.iter_mut().for_each(|o| *o /= norm);
    Ok(out)
}

/// `KL(softmax(gain) || t2v / sum(t2v))` with the gain held constant.
///
/// Shared by the word and phrase objectives.
pub fn divergence_loss(tape: &mut Tape<'_>, gain: &[f64], t2v: Tensor) -> Result<Tensor> {
    let n = tape.value(t2v).len();
    if gain.len() != n || n == 0 {
        return Err(Error::invalid("divergence_loss", format!("{} gains for {n} attention scores", gain.len())));
    }
    if let Some(bad) = tape.value(t2v).iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::invalid("divergence_loss", format!("negative attention score {bad}")));
    }
    let shape = tape.shape(t2v).to_vec();
    let target = tape.constant(&shape, kernels::softmax(gain))?;
    let q = tape.normalize_sum(t2v)?;
    tape.kl_div(target, q)
}

/// Word-level attention divergence: alias of [`divergence_loss`] on token gains.
pub fn word_divergence_loss(tape: &mut Tape<'_>, gain: &[f64], t2v: Tensor) -> Result<Tensor> {
    divergence_loss(tape, gain, t2v)
}

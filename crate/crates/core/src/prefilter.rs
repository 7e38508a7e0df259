//! Coarse image filtering.
//!
//! The filter compares mean-pooled features of the text-only stream with the
//! bi-modal stream at one encoder layer. When their cosine similarity falls
//! below `alpha` the image is considered useless and every attention edge
//! that touches an image position is cut in all later layers.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::cosine_similarity;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterDecision {
    pub consistency: f64,
    /// `true` keeps the image (`Δ = 1`), `false` cuts it (`Δ = 0`).
    pub keep: bool,
    pub alpha: f64,
}

impl FilterDecision {
    /// Decision that never filters.
    pub fn kept() -> Self {
        Self {
            consistency: 1.0,
            keep: true,
            alpha: f64::NEG_INFINITY,
        }
    }

    /// `Δ` as a number in `{0, 1}`.
    pub fn delta(&self) -> u8 {
        self.keep as u8
    }
}

fn mean_rows(values: &[f64], width: usize) -> Vec<f64> {
    let rows = values.len() / width;
    let mut out = vec![0.0; width];
    for row in values.chunks(width) {
        for (o, x) in out.iter_mut().zip(row) {
            *o += *x;
        }
    }
    out.iter_mut().for_each(|o| *o /= rows as f64);
    out
}

/// Step decision from uni-modal (`T x H`) and bi-modal (`C x H`) features.
pub fn consistency(uni: &[f64], bi: &[f64], hidden: usize, alpha: f64) -> Result<FilterDecision> {
    if hidden == 0 || uni.is_empty() || bi.is_empty() || !uni.len().is_multiple_of(hidden) || !bi.len().is_multiple_of(hidden) {
        return Err(Error::invalid(
            "consistency",
            format!("features of length {} and {} are not rows of width {hidden}", uni.len(), bi.len()),
        ));
    }
    let pu = mean_rows(uni, hidden);
    let pm = mean_rows(bi, hidden);
    let zero = |v: &[f64]| v.iter().all(|x| *x == 0.0);
    let consistency = if zero(&pu) || zero(&pm) {
        log::warn!("consistency: zero-norm pooled feature, treating the image as inconsistent");
        0.0
    } else {
        cosine_similarity(&pu, &pm)
    };
    Ok(FilterDecision {
        consistency,
        keep: consistency - alpha >= 0.0,
        alpha,
    })
}

/// 1 when the attention edge `r -> s` touches an image position.
pub fn indicator(r: usize, s: usize, text_len: usize, total_len: usize) -> Result<u8> {
    if r >= total_len || s >= total_len {
        return Err(Error::invalid(
            "indicator",
            format!("edge ({r}, {s}) outside a {total_len}-position sequence"),
        ));
    }
    Ok((r >= text_len || s >= text_len) as u8)
}

/// Corrected attention for one head.
///
/// `attn` is a row-stochastic `C x C` matrix. With `keep` the input is
/// returned unchanged. Otherwise edges flagged by [`indicator`] are zeroed,
/// text rows are renormalised over the text columns and image rows become
/// uniform over the image positions.
pub fn apply_mask(attn: &[f64], total_len: usize, text_len: usize, keep: bool) -> Result<Vec<f64>> {
    let c = total_len;
    if attn.len() != c * c || text_len > c {
        return Err(Error::invalid(
            "apply_mask",
            format!("{} weights for a {c} x {c} matrix with {text_len} text positions", attn.len()),
        ));
    }
    if keep || text_len == c {
        return Ok(attn.to_vec());
    }
    let t = text_len;
    let mut out = vec![0.0; c * c];
    for r in 0..c {
        let row = &attn[r * c..(r + 1) * c];
        let dst = &mut out[r * c..(r + 1) * c];
        if r < t {
            let mass: f64 = row[..t].iter().sum();
            if mass > 0.0 {
                for s in 0..t {
                    dst[s] = row[s] / mass;
                }
            } else {
                dst[..t].iter_mut().for_each(|x| *x = 1.0 / t as f64);
            }
        } else {
            let u = 1.0 / (c - t) as f64;
            dst[t..].iter_mut().for_each(|x| *x = u);
        }
    }
    Ok(out)
}

use alloc::format;
use alloc::vec::Vec;

use super::{LayerParams, Model};
use crate::data::MultimodalSample;
use crate::error::{Error, Result};
use crate::prefilter::{self, FilterDecision};
use crate::tensor::{kernels, Tape, Tensor};

const LN_EPS: f64 = 1e-5;

/// When the bi-modal attention gets corrected.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Gate {
    /// No correction at any layer.
    Open,
    /// Use a precomputed decision for every layer after `after`.
    Fixed { after: usize, keep: bool },
    /// Decide from both streams at layer `after`, then correct the layers above.
    Consistency { after: usize, alpha: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncodeOptions {
    pub gate: Gate,
    /// Number of uni-modal layers to run (0 skips the stream).
    pub uni_layers: usize,
}

impl EncodeOptions {
    /// Options implied by the enabled modules of `model`.
    pub fn for_model(model: &Model, filter: bool) -> Self {
        let cfg = &model.config;
        let gate = match (cfg.prefilter_layer, filter) {
            (Some(after), true) => Gate::Consistency { after, alpha: cfg.alpha },
            _ => Gate::Open,
        };
        let needs_uni = cfg.word_layer.is_some() || cfg.phrase_layer.is_some() || matches!(gate, Gate::Consistency { .. });
        Self {
            gate,
            uni_layers: if needs_uni { cfg.uni_depth() } else { 0 },
        }
    }
}

/// Every intermediate representation of one encoder pass.
///
/// Index `i` of `bi` / `uni` is the output of layer `i`; index 0 is the
/// embedding. `attn[i - 1]` is the head-averaged attention of layer `i`.
#[derive(Debug, Clone)]
pub struct EncoderTrace {
    pub bi: Vec<Tensor>,
    pub uni: Vec<Tensor>,
    pub attn: Vec<Tensor>,
    pub uni_attn: Vec<Tensor>,
    pub text_len: usize,
    pub total_len: usize,
    pub decision: Option<FilterDecision>,
}

impl EncoderTrace {
    pub fn m(&self, layer: usize) -> Tensor {
        self.bi[layer]
    }

    pub fn u(&self, layer: usize) -> Tensor {
        self.uni[layer]
    }

    pub fn a(&self, layer: usize) -> Tensor {
        self.attn[layer - 1]
    }

    pub fn last(&self) -> Tensor {
        *self.bi.last().expect("trace holds the embedding")
    }

    /// Whether image positions were cut out of the attention.
    pub fn image_filtered(&self) -> bool {
        self.decision.is_some_and(|d| !d.keep)
    }
}

/// Bi-modal (`C x H`) and uni-modal (`T x H`) inputs.
pub fn embed(tape: &mut Tape<'_>, model: &Model, sample: &MultimodalSample) -> Result<(Tensor, Tensor)> {
    let cfg = &model.config;
    let ids = &model.ids;
    if sample.feature_dim != cfg.feature_dim {
        return Err(Error::InvalidSample {
            id: sample.id.clone(),
            detail: format!("feature dimension {} but the model expects {}", sample.feature_dim, cfg.feature_dim),
        });
    }
    let t = sample.text.len();
    if t == 0 || t > cfg.max_encode_len {
        return Err(Error::InvalidSample {
            id: sample.id.clone(),
            detail: format!("{t} text tokens outside [1, {}]", cfg.max_encode_len),
        });
    }
    if let Some(&bad) = sample.text.iter().find(|&&w| w >= cfg.vocab_size) {
        return Err(Error::InvalidSample {
            id: sample.id.clone(),
            detail: format!("token id {bad} outside vocabulary of {}", cfg.vocab_size),
        });
    }
    let tok_table = tape.param(ids.tok_emb);
    let pos_table = tape.param(ids.pos_emb);
    let tok = tape.embedding(tok_table, &sample.text)?;
    let positions: Vec<usize> = (0..t).collect();
    let pos = tape.embedding(pos_table, &positions)?;
    let text = tape.add(tok, pos)?;
    let text = tape.dropout(text, cfg.dropout)?;

    let r = sample.num_regions();
    let feats = tape.constant(&[r, cfg.feature_dim], sample.regions.clone())?;
    let (w, b, seg) = (tape.param(ids.img_w), tape.param(ids.img_b), tape.param(ids.img_seg));
    let img = tape.matmul(feats, w)?;
    let img = tape.add_row(img, b)?;
    let img = tape.add_row(img, seg)?;
    let img = tape.dropout(img, cfg.dropout)?;

    let bi = tape.concat(&[text, img], 0)?;
    Ok((bi, text))
}

/// One transformer layer, pre- or post-LN per the config. Returns the output and head-averaged attention.
pub(crate) fn apply_layer(
    tape: &mut Tape<'_>,
    model: &Model,
    lp: &LayerParams,
    x: Tensor,
    cut_at: Option<usize>,
) -> Result<(Tensor, Tensor)> {
    let cfg = &model.config;
    let dh = cfg.head_dim();
    let scale = 1.0 / kernels::sqrt(dh as f64);
    let (g1, b1) = (tape.param(lp.ln1_g), tape.param(lp.ln1_b));
    let (g2, b2) = (tape.param(lp.ln2_g), tape.param(lp.ln2_b));
    let input = if cfg.pre_norm {
        tape.layer_norm(x, g1, b1, LN_EPS)?
    } else {
        x
    };
    let proj = |tape: &mut Tape<'_>, w, b| -> Result<Tensor> {
        let (w, b) = (tape.param(w), tape.param(b));
        let y = tape.matmul(input, w)?;
        tape.add_row(y, b)
    };
    let q = proj(tape, lp.wq, lp.bq)?;
    let k = proj(tape, lp.wk, lp.bk)?;
    let v = proj(tape, lp.wv, lp.bv)?;

    let mut contexts = Vec::with_capacity(cfg.heads);
    let mut attn_sum: Option<Tensor> = None;
    for h in 0..cfg.heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = tape.slice(q, 1, lo, hi)?;
        let kh = tape.slice(k, 1, lo, hi)?;
        let vh = tape.slice(v, 1, lo, hi)?;
        let kt = tape.transpose(kh)?;
        let logits = tape.matmul(qh, kt)?;
        let logits = tape.scale(logits, scale)?;
        let mut a = tape.softmax(logits, 1)?;
        if let Some(text_len) = cut_at {
            a = tape.attention_filter(a, text_len)?;
        }
        contexts.push(tape.matmul(a, vh)?);
        attn_sum = Some(match attn_sum {
            None => a,
            Some(s) => tape.add(s, a)?,
        });
    }
    let attn = tape.scale(attn_sum.expect("at least one head"), 1.0 / cfg.heads as f64)?;

    let ctx = tape.concat(&contexts, 1)?;
    let (wo, bo) = (tape.param(lp.wo), tape.param(lp.bo));
    let o = tape.matmul(ctx, wo)?;
    let o = tape.add_row(o, bo)?;
    let o = tape.dropout(o, cfg.dropout)?;
    let res = tape.add(x, o)?;
    let (x1, ffn_in) = if cfg.pre_norm {
        (res, tape.layer_norm(res, g2, b2, LN_EPS)?)
    } else {
        let x1 = tape.layer_norm(res, g1, b1, LN_EPS)?;
        (x1, x1)
    };

    let (w1, bb1, w2, bb2) = (tape.param(lp.w1), tape.param(lp.b1), tape.param(lp.w2), tape.param(lp.b2));
    let f = tape.matmul(ffn_in, w1)?;
    let f = tape.add_row(f, bb1)?;
    let f = tape.relu(f)?;
    let f = tape.matmul(f, w2)?;
    let f = tape.add_row(f, bb2)?;
    let f = tape.dropout(f, cfg.dropout)?;
    let res = tape.add(x1, f)?;
    let out = if cfg.pre_norm {
        res
    } else {
        tape.layer_norm(res, g2, b2, LN_EPS)?
    };
    Ok((out, attn))
}

/// Run both streams through the shared layers.
pub fn encode(tape: &mut Tape<'_>, model: &Model, sample: &MultimodalSample, opts: EncodeOptions) -> Result<EncoderTrace> {
    let cfg = &model.config;
    if opts.uni_layers > cfg.layers {
        return Err(Error::Config(format!(
            "{} uni-modal layers requested from a {}-layer encoder",
            opts.uni_layers, cfg.layers
        )));
    }
    let gate_layer = match opts.gate {
        Gate::Open => None,
        Gate::Fixed { after, .. } | Gate::Consistency { after, .. } => Some(after),
    };
    if let Some(after) = gate_layer {
        if after >= cfg.layers {
            return Err(Error::Config(format!("gate layer {after} must be below {}", cfg.layers)));
        }
    }
    if let Gate::Consistency { after, .. } = opts.gate {
        if opts.uni_layers < after || after == 0 {
            return Err(Error::Config(format!(
                "consistency at layer {after} needs that many uni-modal layers, got {}",
                opts.uni_layers
            )));
        }
    }

    let (bi0, uni0) = embed(tape, model, sample)?;
    let text_len = sample.text.len();
    let total_len = text_len + sample.num_regions();
    let mut trace = EncoderTrace {
        bi: alloc::vec![bi0],
        uni: alloc::vec![uni0],
        attn: Vec::with_capacity(cfg.layers),
        uni_attn: Vec::with_capacity(opts.uni_layers),
        text_len,
        total_len,
        decision: match opts.gate {
            Gate::Fixed { keep, .. } => Some(FilterDecision {
                consistency: f64::NAN,
                keep,
                alpha: f64::NAN,
            }),
            _ => None,
        },
    };

    for (i, lp) in model.ids.layers.iter().enumerate() {
        let layer = i + 1;
        if layer <= opts.uni_layers {
            let (u, a) = apply_layer(tape, model, lp, trace.uni[i], None)?;
            trace.uni.push(u);
            trace.uni_attn.push(a);
        }
        let cut = match gate_layer {
            Some(after) if layer > after && trace.image_filtered() => Some(text_len),
            _ => None,
        };
        let (m, a) = apply_layer(tape, model, lp, trace.bi[i], cut)?;
        trace.bi.push(m);
        trace.attn.push(a);

        if let Gate::Consistency { after, alpha } = opts.gate {
            if layer == after {
                let decision = prefilter::consistency(tape.value(trace.uni[layer]), tape.value(m), cfg.hidden, alpha)?;
                trace.decision = Some(decision);
            }
        }
    }
    Ok(trace)
}

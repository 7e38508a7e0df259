//! GRU decoder with additive attention over the encoder output.

use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use super::Model;
use crate::data::{BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::tensor::{kernels, Tape, Tensor};

/// Encoder memory prepared for decoding.
#[derive(Debug, Clone)]
pub struct DecoderContext {
    pub memory: Tensor,
    keys: Tensor,
    /// `true` at positions the decoder must not attend to.
    pub blocked: Vec<bool>,
    pub init: Tensor,
}

impl DecoderContext {
    /// `memory` is the last bi-modal layer (`C x H`). With `block_image`, the
    /// region positions from `text_len` on get `-inf` attention logits.
    pub fn new(tape: &mut Tape<'_>, model: &Model, memory: Tensor, text_len: usize, block_image: bool) -> Result<Self> {
        let ids = &model.ids;
        let c = tape.shape(memory)[0];
        let wc = tape.param(ids.att_wc);
        let keys = tape.matmul(memory, wc)?;
        let pooled = tape.mean_axis(memory, 0)?;
        let (wi, bi) = (tape.param(ids.dec_init_w), tape.param(ids.dec_init_b));
        let init = tape.matmul(pooled, wi)?;
        let init = tape.add_row(init, bi)?;
        let init = tape.tanh(init)?;
        let blocked = (0..c).map(|j| block_image && j >= text_len).collect();
        Ok(Self {
            memory,
            keys,
            blocked,
            init,
        })
    }
}

/// One decoder step: next-token distribution (`1 x V`) and the new state.
pub fn decode_step(
    tape: &mut Tape<'_>,
    model: &Model,
    ctx: &DecoderContext,
    state: Tensor,
    prev: usize,
) -> Result<(Tensor, Tensor)> {
    let (hidden, features) = step_features(tape, model, ctx, state, prev)?;
    let logits = project_out(tape, model, features)?;
    let probs = tape.softmax(logits, 1)?;
    Ok((probs, hidden))
}

/// New state and the `[state; context]` row fed to the output layer.
fn step_features(
    tape: &mut Tape<'_>,
    model: &Model,
    ctx: &DecoderContext,
    state: Tensor,
    prev: usize,
) -> Result<(Tensor, Tensor)> {
    let ids = &model.ids;
    let h = model.config.hidden;
    let emb_table = tape.param(ids.dec_emb);
    let emb = tape.embedding(emb_table, &[prev])?;

    let wh = tape.param(ids.att_wh);
    let query = tape.matmul(state, wh)?;
    let e = tape.add_row(ctx.keys, query)?;
    let e = tape.tanh(e)?;
    let v = tape.param(ids.att_v);
    let scores = tape.matmul(e, v)?;
    let scores = tape.transpose(scores)?;
    let scores = if ctx.blocked.iter().any(|&b| b) {
        tape.masked_fill(scores, &ctx.blocked, f64::NEG_INFINITY)?
    } else {
        scores
    };
    let weights = tape.softmax(scores, 1)?;
    let context = tape.matmul(weights, ctx.memory)?;

    let x = tape.concat(&[emb, context], 1)?;
    let (wx, bx, whh, bh) = (
        tape.param(ids.gru_wx),
        tape.param(ids.gru_bx),
        tape.param(ids.gru_wh),
        tape.param(ids.gru_bh),
    );
    let gx = tape.matmul(x, wx)?;
    let gx = tape.add_row(gx, bx)?;
    let gh = tape.matmul(state, whh)?;
    let gh = tape.add_row(gh, bh)?;
    let part = |tape: &mut Tape<'_>, g: Tensor, k: usize| tape.slice(g, 1, k * h, (k + 1) * h);
    let (xr, xz, xn) = (part(tape, gx, 0)?, part(tape, gx, 1)?, part(tape, gx, 2)?);
    let (hr, hz, hn) = (part(tape, gh, 0)?, part(tape, gh, 1)?, part(tape, gh, 2)?);
    let r = tape.add(xr, hr)?;
    let r = tape.sigmoid(r)?;
    let z = tape.add(xz, hz)?;
    let z = tape.sigmoid(z)?;
    let rn = tape.mul(r, hn)?;
    let n = tape.add(xn, rn)?;
    let n = tape.tanh(n)?;
    // h' = (1 - z) * n + z * h = n + z * (h - n)
    let diff = tape.sub(state, n)?;
    let zd = tape.mul(z, diff)?;
    let next = tape.add(n, zd)?;

    let features = tape.concat(&[next, context], 1)?;
    Ok((next, features))
}

fn project_out(tape: &mut Tape<'_>, model: &Model, features: Tensor) -> Result<Tensor> {
    let (w, b) = (tape.param(model.ids.out_w), tape.param(model.ids.out_b));
    let logits = tape.matmul(features, w)?;
    tape.add_row(logits, b)
}

/// Teacher-forced mean negative log-likelihood of `summary` followed by EOS.
pub fn generation_loss(tape: &mut Tape<'_>, model: &Model, ctx: &DecoderContext, summary: &[usize]) -> Result<Tensor> {
    if summary.is_empty() {
        return Err(Error::invalid("generation_loss", "empty reference summary"));
    }
    let mut state = ctx.init;
    let mut rows = Vec::with_capacity(summary.len() + 1);
    let inputs = core::iter::once(BOS).chain(summary.iter().copied());
    for prev in inputs {
        let (next, features) = step_features(tape, model, ctx, state, prev)?;
        rows.push(features);
        state = next;
    }
    let features = tape.concat(&rows, 0)?;
    let logits = project_out(tape, model, features)?;
    let probs = tape.softmax(logits, 1)?;
    let targets: Vec<usize> = summary.iter().copied().chain(core::iter::once(EOS)).collect();
    tape.nll(probs, &targets)
}

/// Decoded token sequence (EOS stripped) with its length-normalised score.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub score: f64,
}

fn banned(token: usize, generated: usize, min_len: usize) -> bool {
    token == PAD || token == BOS || (token == EOS && generated < min_len)
}

/// Argmax decoding; ties go to the lower token id.
pub fn greedy_decode(tape: &mut Tape<'_>, model: &Model, ctx: &DecoderContext) -> Result<Hypothesis> {
    let cfg = &model.config;
    let mut state = ctx.init;
    let mut prev = BOS;
    let mut tokens = Vec::new();
    let mut log_prob = 0.0;
    let mut steps = 0;
    loop {
        let (probs, next) = decode_step(tape, model, ctx, state, prev)?;
        steps += 1;
        let at_limit = tokens.len() >= cfg.max_decode_len;
        let mut best: Option<(usize, f64)> = None;
        for (tok, &p) in tape.value(probs).iter().enumerate() {
            if banned(tok, tokens.len(), cfg.min_decode_len) || (at_limit && tok != EOS) {
                continue;
            }
            let lp = kernels::ln(p.max(crate::tensor::PROB_EPS));
            if best.is_none_or(|(_, b)| lp > b) {
                best = Some((tok, lp));
            }
        }
        let (tok, lp) = best.ok_or_else(|| Error::invalid("greedy_decode", "no admissible token"))?;
        log_prob += lp;
        if tok == EOS {
            break;
        }
        tokens.push(tok);
        prev = tok;
        state = next;
    }
    Ok(Hypothesis {
        score: log_prob / steps as f64,
        tokens,
        log_prob,
    })
}

struct Beam {
    tokens: Vec<usize>,
    log_prob: f64,
    state: Tensor,
}

/// Length-normalised beam search.
///
/// EOS is forbidden before `min_decode_len` tokens and forced once
/// `max_decode_len` tokens have been produced. Candidates with equal scores
/// are ordered by parent rank and then by token id.
pub fn beam_search(tape: &mut Tape<'_>, model: &Model, ctx: &DecoderContext, beam: usize) -> Result<Hypothesis> {
    let cfg = &model.config;
    let beam = beam.max(1);
    let mut alive = vec![Beam {
        tokens: Vec::new(),
        log_prob: 0.0,
        state: ctx.init,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    while !alive.is_empty() && finished.len() < beam {
        let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
        let mut states = Vec::with_capacity(alive.len());
        for (rank, b) in alive.iter().enumerate() {
            let prev = b.tokens.last().copied().unwrap_or(BOS);
            let (probs, next) = decode_step(tape, model, ctx, b.state, prev)?;
            states.push(next);
            let at_limit = b.tokens.len() >= cfg.max_decode_len;
            for (tok, &p) in tape.value(probs).iter().enumerate() {
                if banned(tok, b.tokens.len(), cfg.min_decode_len) || (at_limit && tok != EOS) {
                    continue;
                }
                candidates.push((b.log_prob + kernels::ln(p.max(crate::tensor::PROB_EPS)), rank, tok));
            }
        }
        // every live beam has the same length, so raw sums rank like normalised scores
        candidates.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(Ordering::Equal)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        let mut next_alive = Vec::with_capacity(beam);
        for (log_prob, rank, tok) in candidates {
            if next_alive.len() + finished.len() >= beam {
                break;
            }
            let parent = &alive[rank];
            if tok == EOS {
                let steps = parent.tokens.len() + 1;
                finished.push(Hypothesis {
                    tokens: parent.tokens.clone(),
                    log_prob,
                    score: log_prob / steps as f64,
                });
            } else {
                let mut tokens = parent.tokens.clone();
                tokens.push(tok);
                next_alive.push(Beam {
                    tokens,
                    log_prob,
                    state: states[rank],
                });
            }
        }
        alive = next_alive;
    }

    finished
        .into_iter()
        .reduce(|best, h| match h.score.partial_cmp(&best.score) {
            Some(Ordering::Greater) => h,
            Some(Ordering::Equal) if h.tokens < best.tokens => h,
            _ => best,
        })
        .ok_or_else(|| Error::invalid("beam_search", "no hypothesis finished"))
}

//! Per-sample training objective: generation loss plus the enabled
//! complement objectives.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::MultimodalSample;
use crate::error::Result;
use crate::model::{encode, Counters, DecoderContext, EncodeOptions, EncoderTrace, Gate, Model};
use crate::phrase::{self, PhraseGain};
use crate::prefilter::FilterDecision;
use crate::tensor::{Tape, Tensor};
use crate::word::{self, WordGain};

/// Training phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    /// Generation loss only, unfiltered encoder.
    Warmup,
    /// Every enabled objective, filter active.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub copyc: f64,
    pub copys: f64,
    pub word: f64,
    pub phrase: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            copyc: 1.0,
            copys: 1.0,
            word: 1.0,
            phrase: 1.0,
        }
    }
}

/// Scalar values of every term evaluated for one sample.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub total: f64,
    pub generation: f64,
    pub copyc: Option<f64>,
    pub copys: Option<f64>,
    pub word: Option<f64>,
    pub phrase: Option<f64>,
    pub decision: Option<FilterDecision>,
}

fn bump(c: &core::sync::atomic::AtomicU64) {
    Counters::bump(c);
}

/// Record the loss graph of one sample on `tape`; returns the weighted total.
pub fn sample_loss(
    tape: &mut Tape<'_>,
    model: &Model,
    sample: &MultimodalSample,
    phase: Phase,
    weights: &LossWeights,
) -> Result<(Tensor, LossBundle)> {
    let cfg = &model.config;
    let opts = match phase {
        Phase::Warmup => EncodeOptions {
            gate: Gate::Open,
            uni_layers: 0,
        },
        Phase::Full => EncodeOptions::for_model(model, true),
    };
    let trace = encode(tape, model, sample, opts)?;
    let ctx = DecoderContext::new(tape, model, trace.last(), trace.text_len, trace.image_filtered())?;
    let gen = crate::model::generation_loss(tape, model, &ctx, &sample.summary)?;
    let mut bundle = LossBundle {
        generation: tape.scalar(gen),
        decision: trace.decision,
        ..LossBundle::default()
    };
    let mut terms: Vec<(Tensor, f64)> = Vec::new();

    if phase == Phase::Full {
        // attention toward a filtered image is zero, so there is nothing to guide
        let guide = !trace.image_filtered();
        if let Some(lw) = cfg.word_layer {
            let (bi_prob, uni_prob, gain) = word_probs(tape, model, &trace, sample, lw)?;
            let targets = word::copy_targets(&sample.text, &sample.summary);
            let lc = word::copyc_loss(tape, bi_prob, uni_prob, &targets)?;
            bump(&model.counters.copyc);
            bundle.copyc = Some(tape.scalar(lc));
            terms.push((lc, weights.copyc));
            if guide {
                let attn = &trace.attn[lw..lw + cfg.window];
                let t2v = word::t2v(tape, attn, trace.text_len, trace.total_len)?;
                let lwd = word::word_divergence_loss(tape, &gain, t2v)?;
                bump(&model.counters.word);
                bundle.word = Some(tape.scalar(lwd));
                terms.push((lwd, weights.word));
            }
        }
        if let Some(lp) = cfg.phrase_layer {
            let (bi_ratio, uni_ratio, gains) = phrase_ratios(tape, model, &trace, sample, lp)?;
            let ls = phrase::copys_loss(tape, bi_ratio, uni_ratio, &gains.truth)?;
            bump(&model.counters.copys);
            bundle.copys = Some(tape.scalar(ls));
            terms.push((ls, weights.copys));
            if guide {
                let attn = &trace.attn[lp..lp + cfg.window];
                let t2v = word::t2v(tape, attn, trace.text_len, trace.total_len)?;
                let lpd = phrase::phrase_divergence_loss(tape, &gains.token_gain, t2v)?;
                bump(&model.counters.phrase);
                bundle.phrase = Some(tape.scalar(lpd));
                terms.push((lpd, weights.phrase));
            }
        }
    }

    let mut total = gen;
    for (t, w) in terms {
        let scaled = if w == 1.0 { t } else { tape.scale(t, w)? };
        total = tape.add(total, scaled)?;
    }
    bundle.total = tape.scalar(total);
    Ok((total, bundle))
}

type WordProbs = (Tensor, Tensor, Vec<f64>);

fn word_probs(
    tape: &mut Tape<'_>,
    model: &Model,
    trace: &EncoderTrace,
    sample: &MultimodalSample,
    layer: usize,
) -> Result<WordProbs> {
    let text_rows = tape.slice(trace.m(layer), 0, 0, trace.text_len)?;
    let bi = word::copy_classify(tape, model, text_rows)?;
    let uni = word::copy_classify(tape, model, trace.u(layer))?;
    let targets = word::copy_targets(&sample.text, &sample.summary);
    let gain = word::word_gain(tape.value(bi), tape.value(uni), &targets)?;
    Ok((bi, uni, gain))
}

fn phrase_ratios(
    tape: &mut Tape<'_>,
    model: &Model,
    trace: &EncoderTrace,
    sample: &MultimodalSample,
    layer: usize,
) -> Result<(Tensor, Tensor, PhraseGain)> {
    let text_rows = tape.slice(trace.m(layer), 0, 0, trace.text_len)?;
    let bi = phrase::phrase_score(tape, model, text_rows, &sample.phrases)?;
    let uni = phrase::phrase_score(tape, model, trace.u(layer), &sample.phrases)?;
    let truth = phrase::phrase_truth(&sample.phrases, &sample.text, &sample.summary)?;
    let phrase_gain = phrase::phrase_gain(tape.value(uni), tape.value(bi), &truth)?;
    let token_gain = phrase::project_gain(&phrase_gain, &sample.phrases, trace.text_len)?;
    let gains = PhraseGain {
        truth,
        bi_ratio: tape.value(bi).to_vec(),
        uni_ratio: tape.value(uni).to_vec(),
        phrase_gain,
        token_gain,
    };
    Ok((bi, uni, gains))
}

/// Per-sample quantities exported for inspection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleDiagnostics {
    pub id: alloc::string::String,
    pub decision: Option<FilterDecision>,
    pub word: Option<WordGain>,
    pub phrase: Option<PhraseGain>,
    /// Text-image attention per token for every layer `1..=L`.
    pub layer_t2v: Vec<Vec<f64>>,
    /// Head-averaged `C x C` attention of the word guidance window, row-major.
    pub word_window: Vec<Vec<f64>>,
    pub phrase_window: Vec<Vec<f64>>,
}

/// Filter decision, gains and attention of one sample at inference.
pub fn diagnose(model: &Model, sample: &MultimodalSample) -> Result<SampleDiagnostics> {
    let cfg = &model.config;
    let mut tape = Tape::new(&model.params);
    let trace = encode(&mut tape, model, sample, EncodeOptions::for_model(model, true))?;
    let layer_t2v = trace
        .attn
        .iter()
        .map(|&a| word::t2v_values(&[tape.value(a)], trace.text_len, trace.total_len))
        .collect::<Result<Vec<_>>>()?;
    let window = |tape: &Tape<'_>, start: usize| -> Vec<Vec<f64>> {
        trace.attn[start..start + cfg.window].iter().map(|&a| tape.value(a).to_vec()).collect()
    };
    let mut diag = SampleDiagnostics {
        id: sample.id.clone(),
        decision: trace.decision,
        word: None,
        phrase: None,
        layer_t2v,
        word_window: Vec::new(),
        phrase_window: Vec::new(),
    };
    if let Some(lw) = cfg.word_layer {
        let (bi, uni, gain) = word_probs(&mut tape, model, &trace, sample, lw)?;
        diag.word = Some(WordGain {
            targets: word::copy_targets(&sample.text, &sample.summary),
            bi_prob: tape.value(bi).to_vec(),
            uni_prob: tape.value(uni).to_vec(),
            gain,
        });
        diag.word_window = window(&tape, lw);
    }
    if let Some(lp) = cfg.phrase_layer {
        let (_, _, gains) = phrase_ratios(&mut tape, model, &trace, sample, lp)?;
        diag.phrase = Some(gains);
        diag.phrase_window = window(&tape, lp);
    }
    Ok(diag)
}

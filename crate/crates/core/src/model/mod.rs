//! Single-stream multimodal transformer encoder and GRU attention decoder.
//!
//! The encoder runs two passes with one set of weights: the bi-modal stream
//! over text positions followed by image-region positions, and the
//! uni-modal stream over the text positions alone.

mod decoder;
mod encoder;

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::MultimodalSample;
use crate::error::{Error, Result};
use crate::prefilter::FilterDecision;
use crate::tensor::{Tape, Tensor};
use crate::tensor::{kernels, ParamId, ParamStore};

pub use decoder::{beam_search, decode_step, generation_loss, greedy_decode, DecoderContext, Hypothesis};
pub use encoder::{embed, encode, EncodeOptions, EncoderTrace, Gate};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    pub vocab_size: usize,
    pub feature_dim: usize,
    pub max_encode_len: usize,
    pub min_decode_len: usize,
    pub max_decode_len: usize,
    pub beam_size: usize,
    /// Layer whose features feed the pre-filter (`L_f`).
    pub prefilter_layer: Option<usize>,
    /// Layer whose features feed the copy classifier (`L_w`).
    pub word_layer: Option<usize>,
    /// Layer whose features feed the copy scorer (`L_p`).
    pub phrase_layer: Option<usize>,
    /// Number of guided layers after `L_w` / `L_p`.
    pub window: usize,
    pub alpha: f64,
    pub dropout: f64,
    /// Normalise sub-layer inputs instead of residual outputs.
    pub pre_norm: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 12,
            hidden: 64,
            heads: 4,
            ffn: 256,
            vocab_size: 0,
            feature_dim: 15,
            max_encode_len: 60,
            min_decode_len: 8,
            max_decode_len: 30,
            beam_size: 4,
            prefilter_layer: Some(3),
            word_layer: Some(6),
            phrase_layer: Some(9),
            window: 3,
            alpha: 0.65,
            dropout: 0.1,
            pre_norm: true,
        }
    }
}

impl ModelConfig {
    /// Same architecture with every contribution module switched off.
    pub fn baseline(&self) -> Self {
        Self {
            prefilter_layer: None,
            word_layer: None,
            phrase_layer: None,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.layers == 0 || self.hidden == 0 || self.heads == 0 || self.ffn == 0 {
            return fail("layers, hidden, heads and ffn must be positive".into());
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return fail(format!("hidden {} is not divisible by {} heads", self.hidden, self.heads));
        }
        if self.vocab_size <= crate::data::UNK {
            return fail(format!("vocabulary of {} tokens has no content words", self.vocab_size));
        }
        if self.feature_dim == 0 || self.max_encode_len == 0 {
            return fail("feature_dim and max_encode_len must be positive".into());
        }
        if self.beam_size == 0 || self.max_decode_len < self.min_decode_len {
            return fail("beam size must be positive and max decode length >= min decode length".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.window == 0 {
            return fail("guidance window must cover at least one layer".into());
        }
        let l = self.layers;
        if let Some(f) = self.prefilter_layer {
            if f == 0 || f >= l {
                return fail(format!("pre-filter layer {f} must lie in [1, {}]", l - 1));
            }
        }
        for (name, placement) in [("word", self.word_layer), ("phrase", self.phrase_layer)] {
            if let Some(p) = placement {
                if p == 0 || p + self.window > l {
                    return fail(format!(
                        "{name} layer {p} with a {}-layer window does not fit in {l} layers",
                        self.window
                    ));
                }
            }
        }
        if let (Some(f), Some(w), Some(p)) = (self.prefilter_layer, self.word_layer, self.phrase_layer) {
            if !(f < w && w < p) {
                return fail(format!("placements must satisfy L_f < L_w < L_p, got {f}, {w}, {p}"));
            }
        }
        Ok(())
    }

    /// Deepest uni-modal layer any enabled module reads.
    pub fn uni_depth(&self) -> usize {
        [self.prefilter_layer, self.word_layer, self.phrase_layer]
            .into_iter()
            .flatten()
            .max()
            .unwrap_or(0)
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LayerParams {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
}

#[derive(Debug, Clone)]
pub(crate) struct ParamIds {
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub img_w: ParamId,
    pub img_b: ParamId,
    pub img_seg: ParamId,
    pub layers: Vec<LayerParams>,
    pub copy_w: ParamId,
    pub copy_b: ParamId,
    pub scorer_w1: ParamId,
    pub scorer_b1: ParamId,
    pub scorer_w2: ParamId,
    pub scorer_b2: ParamId,
    pub dec_emb: ParamId,
    pub dec_init_w: ParamId,
    pub dec_init_b: ParamId,
    pub att_wh: ParamId,
    pub att_wc: ParamId,
    pub att_v: ParamId,
    pub gru_wx: ParamId,
    pub gru_bx: ParamId,
    pub gru_wh: ParamId,
    pub gru_bh: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

/// How many times each auxiliary objective has been evaluated.
#[derive(Debug, Default)]
pub struct Counters {
    pub word: AtomicU64,
    pub phrase: AtomicU64,
    pub copyc: AtomicU64,
    pub copys: AtomicU64,
}

impl Counters {
    pub fn snapshot(&self) -> [u64; 4] {
        [&self.word, &self.phrase, &self.copyc, &self.copys].map(|c| c.load(Ordering::Relaxed))
    }

    pub(crate) fn bump(counter: &AtomicU64) {
        counter.fetch_add(1, Ordering::Relaxed);
    }
}

impl Clone for Counters {
    fn clone(&self) -> Self {
        let [w, p, c, s] = self.snapshot();
        Self {
            word: AtomicU64::new(w),
            phrase: AtomicU64::new(p),
            copyc: AtomicU64::new(c),
            copys: AtomicU64::new(s),
        }
    }
}

/// Parameters plus the configuration that laid them out.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub(crate) ids: ParamIds,
    pub counters: Counters,
}

impl Model {
    /// Fresh model with seeded random initialisation.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let h = config.hidden;
        let v = config.vocab_size;
        let fan = |n: usize| 1.0 / kernels::sqrt(n as f64);
        let mut dense = |store: &mut ParamStore, name: String, rows: usize, cols: usize| {
            store.normal(name, &[rows, cols], fan(rows), &mut rng)
        };

        let tok_emb = dense(&mut store, "embed.token".into(), v, h)?;
        let pos_emb = dense(&mut store, "embed.position".into(), config.max_encode_len, h)?;
        let img_w = dense(&mut store, "embed.image.w".into(), config.feature_dim, h)?;
        let img_b = store.zeros("embed.image.b", &[1, h])?;
        let img_seg = dense(&mut store, "embed.image.segment".into(), 1, h)?;

        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let p = |s: &str| format!("encoder.{l}.{s}");
            layers.push(LayerParams {
                wq: dense(&mut store, p("attn.wq"), h, h)?,
                bq: store.zeros(p("attn.bq"), &[1, h])?,
                wk: dense(&mut store, p("attn.wk"), h, h)?,
                bk: store.zeros(p("attn.bk"), &[1, h])?,
                wv: dense(&mut store, p("attn.wv"), h, h)?,
                bv: store.zeros(p("attn.bv"), &[1, h])?,
                wo: dense(&mut store, p("attn.wo"), h, h)?,
                bo: store.zeros(p("attn.bo"), &[1, h])?,
                ln1_g: store.filled(p("ln1.gamma"), &[1, h], 1.0)?,
                ln1_b: store.zeros(p("ln1.beta"), &[1, h])?,
                w1: dense(&mut store, p("ffn.w1"), h, config.ffn)?,
                b1: store.zeros(p("ffn.b1"), &[1, config.ffn])?,
                w2: dense(&mut store, p("ffn.w2"), config.ffn, h)?,
                b2: store.zeros(p("ffn.b2"), &[1, h])?,
                ln2_g: store.filled(p("ln2.gamma"), &[1, h], 1.0)?,
                ln2_b: store.zeros(p("ln2.beta"), &[1, h])?,
            });
        }

        let copy_w = dense(&mut store, "word.copy.w".into(), h, 1)?;
        let copy_b = store.zeros("word.copy.b", &[1, 1])?;
        let scorer_w1 = dense(&mut store, "phrase.scorer.w1".into(), h, h)?;
        let scorer_b1 = store.zeros("phrase.scorer.b1", &[1, h])?;
        let scorer_w2 = dense(&mut store, "phrase.scorer.w2".into(), h, 1)?;
        let scorer_b2 = store.zeros("phrase.scorer.b2", &[1, 1])?;

        let dec_emb = dense(&mut store, "decoder.embed".into(), v, h)?;
        let dec_init_w = dense(&mut store, "decoder.init.w".into(), h, h)?;
        let dec_init_b = store.zeros("decoder.init.b", &[1, h])?;
        let att_wh = dense(&mut store, "decoder.attn.wh".into(), h, h)?;
        let att_wc = dense(&mut store, "decoder.attn.wc".into(), h, h)?;
        let att_v = dense(&mut store, "decoder.attn.v".into(), h, 1)?;
        let gru_wx = dense(&mut store, "decoder.gru.wx".into(), 2 * h, 3 * h)?;
        let gru_bx = store.zeros("decoder.gru.bx", &[1, 3 * h])?;
        let gru_wh = dense(&mut store, "decoder.gru.wh".into(), h, 3 * h)?;
        let gru_bh = store.zeros("decoder.gru.bh", &[1, 3 * h])?;
        let out_w = dense(&mut store, "decoder.out.w".into(), 2 * h, v)?;
        let out_b = store.zeros("decoder.out.b", &[1, v])?;

        Ok(Self {
            config,
            params: store,
            ids: ParamIds {
                tok_emb,
                pos_emb,
                img_w,
                img_b,
                img_seg,
                layers,
                copy_w,
                copy_b,
                scorer_w1,
                scorer_b1,
                scorer_w2,
                scorer_b2,
                dec_emb,
                dec_init_w,
                dec_init_b,
                att_wh,
                att_wc,
                att_v,
                gru_wx,
                gru_bx,
                gru_wh,
                gru_bh,
                out_w,
                out_b,
            },
            counters: Counters::default(),
        })
    }

    /// Rebuild a model from stored parameters; names and shapes must match
    /// the layout implied by `config`.
    pub fn from_params(config: ModelConfig, params: &ParamStore) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        model.params.load_from(params)?;
        Ok(model)
    }

    /// Parameter ids of the copy classification head (weight, bias).
    pub fn copy_head(&self) -> (ParamId, ParamId) {
        (self.ids.copy_w, self.ids.copy_b)
    }

    /// Parameter ids of the phrase scorer MLP.
    pub fn scorer(&self) -> [ParamId; 4] {
        [self.ids.scorer_w1, self.ids.scorer_b1, self.ids.scorer_w2, self.ids.scorer_b2]
    }

    /// Beam-search summary of `sample`. With `filter`, the pre-filter (if
    /// enabled) decides whether the image takes part; no auxiliary objective
    /// is evaluated.
    pub fn summarize(&self, sample: &MultimodalSample, filter: bool) -> Result<(Hypothesis, Option<FilterDecision>)> {
        let mut tape = Tape::new(&self.params);
        let gate = match (self.config.prefilter_layer, filter) {
            (Some(after), true) => Gate::Consistency {
                after,
                alpha: self.config.alpha,
            },
            _ => Gate::Open,
        };
        let uni_layers = match gate {
            Gate::Consistency { after, .. } => after,
            _ => 0,
        };
        let trace = encode(&mut tape, self, sample, EncodeOptions { gate, uni_layers })?;
        let ctx = DecoderContext::new(&mut tape, self, trace.last(), trace.text_len, trace.image_filtered())?;
        let hyp = beam_search(&mut tape, self, &ctx, self.config.beam_size)?;
        Ok((hyp, trace.decision))
    }

    /// Query projection of encoder layer `layer` (1-based).
    pub fn layer_query(&self, layer: usize) -> ParamId {
        self.ids.layers[layer - 1].wq
    }

    /// Apply encoder layer `layer` (1-based) to `x`. With `cut_at`, attention
    /// edges touching positions at or beyond that index are cut.
    pub fn layer_forward(
        &self,
        tape: &mut Tape<'_>,
        layer: usize,
        x: Tensor,
        cut_at: Option<usize>,
    ) -> Result<(Tensor, Tensor)> {
        let lp = layer
            .checked_sub(1)
            .and_then(|i| self.ids.layers.get(i))
            .ok_or_else(|| Error::Config(format!("layer {layer} outside 1..={}", self.config.layers)))?;
        encoder::apply_layer(tape, self, lp, x, cut_at)
    }
}

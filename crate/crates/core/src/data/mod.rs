//! Corpus types, tokenisation, phrase chunking and perturbation tools.

mod perturb;
mod synth;
mod vocab;

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use perturb::{apply_swaps, mask_images, unpair_swap, ImageSlot, Swapped};
pub use synth::{class_name, synth_generate, Binding, SynthConfig};
pub use vocab::{tokenize, Vocabulary, BOS, EOS, PAD, UNK};

/// Default text truncation length.
pub const MAX_ENCODE_LEN: usize = 60;

/// Half-open token interval `[start, end)`, serialised as a two-element array.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn contains(&self, i: usize) -> bool {
        self.start <= i && i < self.end
    }
}

impl From<[usize; 2]> for Span {
    fn from([start, end]: [usize; 2]) -> Self {
        Self { start, end }
    }
}

impl From<Span> for [usize; 2] {
    fn from(s: Span) -> Self {
        [s.start, s.end]
    }
}

/// Consecutive windows of `window` tokens; the last may be shorter.
pub fn chunk_phrases(len: usize, window: usize) -> Vec<Span> {
    let window = window.max(1);
    (0..len)
        .step_by(window)
        .map(|start| Span::new(start, (start + window).min(len)))
        .collect()
}

/// Check that `spans` partition `[0, len)`: sorted, gap-free, nonempty.
pub fn validate_spans(spans: &[Span], len: usize) -> core::result::Result<(), String> {
    if spans.is_empty() {
        return Err(format!("no phrase spans for {len} tokens"));
    }
    let mut expected = 0;
    for (i, s) in spans.iter().enumerate() {
        if s.is_empty() {
            return Err(format!("span {i} [{}, {}) is empty", s.start, s.end));
        }
        if s.start < expected {
            let prev = spans[i - 1];
            return Err(format!(
                "spans [{}, {}) and [{}, {}) overlap",
                prev.start, prev.end, s.start, s.end
            ));
        }
        if s.start > expected {
            return Err(format!("tokens {expected}..{} are not covered by any span", s.start));
        }
        expected = s.end;
    }
    if expected != len {
        return Err(format!("spans end at {expected} but the text has {len} tokens"));
    }
    Ok(())
}

fn default_present() -> bool {
    true
}

fn is_true(b: &bool) -> bool {
    *b
}

/// One corpus line as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawSample {
    pub id: String,
    pub text: String,
    pub summary: String,
    pub image_features: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phrases: Option<Vec<Span>>,
    #[serde(default = "default_present", skip_serializing_if = "is_true")]
    pub image_present: bool,
    /// Generator class label, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<u32>,
}

impl RawSample {
    fn fail(&self, detail: impl Into<String>) -> Error {
        Error::InvalidSample {
            id: self.id.clone(),
            detail: detail.into(),
        }
    }

    /// Structural checks that do not need a vocabulary.
    pub fn validate(&self) -> Result<()> {
        if self.image_features.is_empty() {
            return Err(self.fail("empty region list"));
        }
        let d = self.image_features[0].len();
        if d == 0 || self.image_features.iter().any(|r| r.len() != d) {
            return Err(self.fail("regions must share one nonzero feature dimension"));
        }
        let len = tokenize(&self.text).len();
        if len == 0 {
            return Err(self.fail("empty text"));
        }
        if let Some(spans) = &self.phrases {
            validate_spans(spans, len).map_err(|e| self.fail(e))?;
        }
        Ok(())
    }

    /// Tokenise, truncate to `max_len` tokens and fill in phrase spans.
    pub fn to_sample(&self, vocab: &Vocabulary, max_len: usize) -> Result<MultimodalSample> {
        self.validate()?;
        let mut text = vocab.encode(&self.text);
        let summary = vocab.encode(&self.summary);
        if summary.is_empty() {
            return Err(self.fail("empty summary"));
        }
        let full_len = text.len();
        text.truncate(max_len.max(1));
        let phrases = match &self.phrases {
            Some(spans) if full_len > text.len() => spans
                .iter()
                .filter(|s| s.start < text.len())
                .map(|s| Span::new(s.start, s.end.min(text.len())))
                .collect(),
            Some(spans) => spans.clone(),
            None => chunk_phrases(text.len(), 3),
        };
        let feature_dim = self.image_features[0].len();
        Ok(MultimodalSample {
            id: self.id.clone(),
            text,
            summary,
            regions: self.image_features.iter().flatten().copied().collect(),
            feature_dim,
            phrases,
            image_present: self.image_present,
            class: self.class,
        })
    }
}

/// Tokenised training triplet with phrase spans.
#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalSample {
    pub id: String,
    pub text: Vec<usize>,
    pub summary: Vec<usize>,
    /// `R x D` region features, row-major.
    pub regions: Vec<f64>,
    pub feature_dim: usize,
    pub phrases: Vec<Span>,
    pub image_present: bool,
    pub class: Option<u32>,
}

impl MultimodalSample {
    pub fn num_regions(&self) -> usize {
        self.regions.len() / self.feature_dim.max(1)
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        let fail = |detail: String| Error::InvalidSample {
            id: self.id.clone(),
            detail,
        };
        if self.num_regions() == 0 || !self.regions.len().is_multiple_of(self.feature_dim.max(1)) {
            return Err(fail(format!("{} region values for dimension {}", self.regions.len(), self.feature_dim)));
        }
        validate_spans(&self.phrases, self.text.len()).map_err(fail)?;
        if let Some(bad) = self.text.iter().chain(&self.summary).find(|&&t| t >= vocab_size) {
            return Err(fail(format!("token id {bad} outside vocabulary of {vocab_size}")));
        }
        if self.summary.is_empty() {
            return Err(fail("empty summary".into()));
        }
        Ok(())
    }

    pub fn to_raw(&self, vocab: &Vocabulary) -> RawSample {
        let words = |ids: &[usize]| {
            ids.iter()
                .map(|&i| vocab.token(i).unwrap_or("<unk>"))
                .collect::<Vec<_>>()
                .join(" ")
        };
        RawSample {
            id: self.id.clone(),
            text: words(&self.text),
            summary: words(&self.summary),
            image_features: self.regions.chunks(self.feature_dim).map(<[f64]>::to_vec).collect(),
            phrases: Some(self.phrases.clone()),
            image_present: self.image_present,
            class: self.class,
        }
    }
}

/// Vocabulary over every text and summary of a raw corpus.
pub fn build_vocab(corpus: &[RawSample]) -> Result<Vocabulary> {
    Vocabulary::build(corpus.iter().flat_map(|s| [s.text.as_str(), s.summary.as_str()]))
}

/// Encode a raw corpus, failing on the first invalid sample.
pub fn encode_corpus(corpus: &[RawSample], vocab: &Vocabulary, max_len: usize) -> Result<Vec<MultimodalSample>> {
    corpus.iter().map(|s| s.to_sample(vocab, max_len)).collect()
}

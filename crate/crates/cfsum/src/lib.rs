//! Training driver, evaluation, experiments and file formats for the
//! `cfsum` multimodal summarizer. The `cfsum` binary wraps these.

pub mod eval;
pub mod experiments;
pub mod io;
pub mod train;

use anyhow::Result;
use cfsum_core::data::{build_vocab, encode_corpus, MultimodalSample, RawSample, Vocabulary, MAX_ENCODE_LEN};
use cfsum_core::model::ModelConfig;

/// Vocabulary over the training corpus plus the encoded samples.
pub fn prepare_training(raw: &[RawSample], max_len: usize) -> Result<(Vocabulary, Vec<MultimodalSample>)> {
    let vocab = build_vocab(raw)?;
    let samples = encode_corpus(raw, &vocab, max_len)?;
    Ok((vocab, samples))
}

/// Encode an evaluation corpus with an existing vocabulary.
pub fn prepare_eval(raw: &[RawSample], vocab: &Vocabulary, config: &ModelConfig) -> Result<Vec<MultimodalSample>> {
    let samples = encode_corpus(raw, vocab, config.max_encode_len)?;
    if let Some(s) = samples.iter().find(|s| s.feature_dim != config.feature_dim) {
        anyhow::bail!(
            "sample `{}` has feature dimension {} but the model expects {}",
            s.id,
            s.feature_dim,
            config.feature_dim
        );
    }
    Ok(samples)
}

/// Fill data-dependent fields of a model config.
pub fn fit_config(config: &mut ModelConfig, vocab: &Vocabulary, samples: &[MultimodalSample]) -> Result<()> {
    config.vocab_size = vocab.len();
    let dims: std::collections::BTreeSet<usize> = samples.iter().map(|s| s.feature_dim).collect();
    anyhow::ensure!(dims.len() == 1, "corpus mixes feature dimensions {dims:?}");
    config.feature_dim = *dims.first().expect("nonempty");
    if config.max_encode_len == 0 {
        config.max_encode_len = MAX_ENCODE_LEN;
    }
    config.validate()?;
    Ok(())
}

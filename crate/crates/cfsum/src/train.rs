//! Two-phase training loop.

use std::path::Path;

use anyhow::{bail, Context, Result};
use cfsum_core::data::{MultimodalSample, Vocabulary};
use cfsum_core::model::{Model, ModelConfig};
use cfsum_core::objective::{sample_loss, LossBundle, LossWeights, Phase};
use cfsum_core::tensor::{derive_seed, AdamState, ParamGrads, ParamStore, Tape};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::io;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    /// Epochs on the generation loss alone.
    pub warmup_epochs: usize,
    /// Epochs on the full objective.
    pub full_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub weights: LossWeights,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            warmup_epochs: 7,
            full_epochs: 3,
            batch_size: 8,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-8,
            clip_norm: Some(5.0),
            weights: LossWeights::default(),
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            bail!("batch size must be positive");
        }
        if !(self.learning_rate > 0.0) {
            bail!("learning rate must be positive");
        }
        self.model.validate()?;
        Ok(())
    }
}

/// Mean per-sample losses of one epoch.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub phase: Option<Phase>,
    pub total: f64,
    pub generation: f64,
    pub copyc: Option<f64>,
    pub copys: Option<f64>,
    pub word: Option<f64>,
    pub phrase: Option<f64>,
    /// Fraction of samples whose image passed the pre-filter.
    pub kept: Option<f64>,
}

#[derive(Default)]
struct Mean {
    sum: f64,
    n: usize,
}

impl Mean {
    fn add(&mut self, v: Option<f64>) {
        if let Some(v) = v {
            self.sum += v;
            self.n += 1;
        }
    }

    fn get(&self) -> Option<f64> {
        (self.n > 0).then(|| self.sum / self.n as f64)
    }
}

#[derive(Default)]
struct EpochAccum {
    total: Mean,
    generation: Mean,
    copyc: Mean,
    copys: Mean,
    word: Mean,
    phrase: Mean,
    kept: Mean,
}

impl EpochAccum {
    fn add(&mut self, b: &LossBundle) {
        self.total.add(Some(b.total));
        self.generation.add(Some(b.generation));
        self.copyc.add(b.copyc);
        self.copys.add(b.copys);
        self.word.add(b.word);
        self.phrase.add(b.phrase);
        self.kept.add(b.decision.map(|d| f64::from(u8::from(d.keep))));
    }

    fn finish(&self, epoch: usize, phase: Phase) -> EpochLog {
        EpochLog {
            epoch,
            phase: Some(phase),
            total: self.total.get().unwrap_or(0.0),
            generation: self.generation.get().unwrap_or(0.0),
            copyc: self.copyc.get(),
            copys: self.copys.get(),
            word: self.word.get(),
            phrase: self.phrase.get(),
            kept: self.kept.get(),
        }
    }
}

pub struct TrainOutcome {
    pub model: Model,
    /// Parameters after the epoch with the lowest mean generation loss.
    pub best: ParamStore,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

fn global_norm(grads: &ParamGrads) -> f64 {
    grads.iter().flat_map(|(_, g)| g.iter()).map(|g| g * g).sum::<f64>().sqrt()
}

/// Train from scratch. The corpus must already be encoded with the
/// vocabulary the model config was sized for.
pub fn train(config: &TrainConfig, corpus: &[MultimodalSample]) -> Result<TrainOutcome> {
    config.validate()?;
    if corpus.is_empty() {
        bail!("empty training corpus");
    }
    for s in corpus {
        s.validate(config.model.vocab_size)?;
    }
    let mut model = Model::new(config.model.clone(), derive_seed(config.seed, &[0]))?;
    let mut adam = AdamState::new(
        &model.params,
        config.learning_rate,
        config.beta1,
        config.beta2,
        config.adam_eps,
    );
    let mut log = Vec::new();
    let mut best = (f64::INFINITY, 0, model.params.clone());
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let schedule = std::iter::repeat_n(Phase::Warmup, config.warmup_epochs)
        .chain(std::iter::repeat_n(Phase::Full, config.full_epochs));

    for (epoch, phase) in schedule.enumerate() {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[1, epoch as u64])));
        let mut grads = ParamGrads::zeros(&model.params);
        let mut acc = EpochAccum::default();

        for (batch_id, batch) in order.chunks(config.batch_size).enumerate() {
            grads.zero();
            for &i in batch {
                let seed = derive_seed(config.seed, &[2, epoch as u64, i as u64]);
                let mut tape = Tape::training(&model.params, seed);
                let (loss, bundle) = sample_loss(&mut tape, &model, &corpus[i], phase, &config.weights)
                    .with_context(|| format!("epoch {epoch}, batch {batch_id}, sample `{}`", corpus[i].id))?;
                if !bundle.total.is_finite() {
                    bail!(
                        "non-finite loss {} in epoch {epoch}, batch {batch_id} (sample `{}`)",
                        bundle.total,
                        corpus[i].id
                    );
                }
                tape.backward(loss)?.accumulate_into(&mut grads);
                acc.add(&bundle);
            }
            grads.scale(1.0 / batch.len() as f64);
            if !grads.is_finite() {
                bail!("non-finite gradient in epoch {epoch}, batch {batch_id}");
            }
            if let Some(cap) = config.clip_norm {
                let norm = global_norm(&grads);
                if norm > cap {
                    grads.scale(cap / norm);
                }
            }
            adam.step(&mut model.params, &grads)?;
        }

        let entry = acc.finish(epoch, phase);
        log::info!(
            "epoch {epoch} ({phase:?}): total {:.4}, generation {:.4}, kept {:?}",
            entry.total,
            entry.generation,
            entry.kept
        );
        if entry.generation < best.0 {
            best = (entry.generation, epoch, model.params.clone());
        }
        log.push(entry);
    }
    Ok(TrainOutcome {
        model,
        best: best.2,
        best_epoch: best.1,
        log,
    })
}

/// Write `final/` and `best/` checkpoints plus `train_log.json` under `dir`.
pub fn save_outcome(dir: &Path, config: &TrainConfig, outcome: &TrainOutcome, vocab: &Vocabulary) -> Result<()> {
    io::save_checkpoint(&dir.join("final"), &outcome.model.params, &config.model, vocab)?;
    io::save_checkpoint(&dir.join("best"), &outcome.best, &config.model, vocab)?;
    io::write_json(&dir.join("train_config.json"), config)?;
    io::write_json(&dir.join("train_log.json"), &outcome.log)
}

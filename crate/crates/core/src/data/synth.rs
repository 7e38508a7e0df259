//! Synthetic multimodal corpus whose summaries need the image.
//!
//! Every text lists all `K` candidate entities (an attribute word plus a
//! name word) in random order. The reference summary keeps exactly one of
//! them, and the image shows which. Text alone therefore identifies the
//! summary entity with probability `1/K`. A fraction of samples carries a
//! useless clutter image that holds no class signal.
//!
//! The image class is either the entity itself ([`Binding::Entity`]) or the
//! slot the entity occupies in the candidate list ([`Binding::Slot`]). With
//! slot binding the summary word depends on text and image jointly.
//!
//! Image regions are `D`-dimensional. Dimensions `[c*b, (c+1)*b)` hold the
//! one-hot block of class `c` (with `b = D / (K + 1)`); the remaining
//! dimensions hold a background pattern. One random region is the object.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{RawSample, Span};
use crate::error::{Error, Result};
use crate::tensor::kernels::standard_normal;

const ADJECTIVES: &[&str] = &[
    "old", "young", "tired", "happy", "local", "famous", "quiet", "brave", "busy", "angry", "calm", "proud",
    "shy", "clever", "lonely", "cheerful", "curious", "gentle", "eager", "polite",
];
const SUBJECTS: &[&str] = &[
    "farmer", "teacher", "doctor", "child", "tourist", "officer", "artist", "student", "driver", "fisher",
    "baker", "nurse", "pilot", "singer", "writer", "hunter", "sailor", "miner", "judge", "clerk",
];
const VERBS: &[&str] = &[
    "saw", "fed", "found", "chased", "photographed", "rescued", "painted", "followed", "watched", "greeted",
    "adopted", "carried", "trained", "spotted", "helped", "met", "counted", "filmed", "called", "named",
];
const PLACES: &[&str] = &[
    "river", "market", "station", "forest", "harbor", "bridge", "village", "stadium", "school", "temple",
    "garden", "airport", "museum", "beach", "valley", "castle", "library", "factory", "square", "palace",
];
const DAYS: &[&str] = &[
    "monday", "tuesday", "wednesday", "thursday", "friday", "saturday", "sunday", "holiday", "dawn", "dusk",
];
const CLASS_ATTRS: &[&str] = &[
    "black", "striped", "spotted", "white", "golden", "grey", "brown", "red", "silver", "green", "blue", "pink",
];
const CLASS_NAMES: &[&str] = &[
    "cat", "tiger", "leopard", "swan", "eagle", "wolf", "bear", "fox", "shark", "parrot", "whale", "flamingo",
];

/// What the image class refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Binding {
    /// The summary entity.
    Entity,
    /// The position of the summary entity among the listed candidates.
    Slot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n: usize,
    pub seed: u64,
    /// Upper bound on distinct words; caps the filler word pools.
    pub vocab_size: usize,
    pub regions: usize,
    pub feature_dim: usize,
    pub classes: usize,
    /// Fraction of samples with a clutter image unrelated to the class.
    pub noise_rate: f64,
    /// Standard deviation of the Gaussian noise added to every feature.
    pub sigma: f64,
    pub binding: Binding,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n: 2000,
            seed: 1,
            vocab_size: 120,
            regions: 4,
            feature_dim: 15,
            classes: 4,
            noise_rate: 0.2,
            sigma: 0.1,
            binding: Binding::Slot,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("synthetic corpus needs n >= 1".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config("synthetic corpus needs at least 2 classes".into()));
        }
        let capacity = CLASS_NAMES.len().min(self.vocab_size / 2);
        if self.classes > capacity {
            return Err(Error::Config(format!(
                "{} classes exceed the vocabulary capacity of {capacity}",
                self.classes
            )));
        }
        if self.regions == 0 {
            return Err(Error::Config("synthetic images need at least one region".into()));
        }
        if self.feature_dim < self.classes + 1 {
            return Err(Error::Config(format!(
                "feature dimension {} cannot hold {} class blocks plus background",
                self.feature_dim, self.classes
            )));
        }
        if !(0.0..=1.0).contains(&self.noise_rate) || !(self.sigma >= 0.0) {
            return Err(Error::Config("noise rate must be in [0, 1] and sigma nonnegative".into()));
        }
        Ok(())
    }

    fn pool<'a>(&self, words: &'a [&'a str]) -> &'a [&'a str] {
        let filler_budget = self.vocab_size.saturating_sub(2 * self.classes + 4) / 5;
        &words[..filler_budget.clamp(2, words.len())]
    }

    /// Width of one class block.
    pub fn block_width(&self) -> usize {
        self.feature_dim / (self.classes + 1)
    }

    /// Words `(attribute, name)` used for class `c`.
    pub fn class_words(c: usize) -> (&'static str, &'static str) {
        (CLASS_ATTRS[c], CLASS_NAMES[c])
    }
}

fn pick<'a, R: Rng>(rng: &mut R, words: &'a [&'a str]) -> &'a str {
    words[rng.random_range(0..words.len())]
}

/// Generate `config.n` samples deterministically from `config.seed`.
pub fn synth_generate(config: &SynthConfig) -> Result<Vec<RawSample>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let sigma = config.sigma;
    let (adjs, subjects, verbs, places) = (
        config.pool(ADJECTIVES),
        config.pool(SUBJECTS),
        config.pool(VERBS),
        config.pool(PLACES),
    );
    let days = config.pool(DAYS);
    let k = config.classes;
    let b = config.block_width();
    let d = config.feature_dim;

    (0..config.n)
        .map(|i| {
            let entity = rng.random_range(0..k);
            let useless = rng.random::<f64>() < config.noise_rate;
            let (adj, subj, verb, place, day) = (
                pick(&mut rng, adjs),
                pick(&mut rng, subjects),
                pick(&mut rng, verbs),
                pick(&mut rng, places),
                pick(&mut rng, days),
            );
            let mut order: Vec<usize> = (0..k).collect();
            order.shuffle(&mut rng);

            let mut words: Vec<&str> = vec!["the", adj, subj, verb];
            let mut phrases = vec![Span::new(0, 3), Span::new(3, 4)];
            for &c in &order {
                let (attr, name) = SynthConfig::class_words(c);
                phrases.push(Span::new(words.len(), words.len() + 2));
                words.push(attr);
                words.push(name);
            }
            phrases.push(Span::new(words.len(), words.len() + 3));
            words.extend(["near", "the", place]);
            phrases.push(Span::new(words.len(), words.len() + 2));
            words.extend(["on", day]);

            let (attr, name) = SynthConfig::class_words(entity);
            let class = match config.binding {
                Binding::Entity => entity,
                Binding::Slot => order.iter().position(|&c| c == entity).expect("entity is listed"),
            };
            let summary = [adj, subj, verb, "a", attr, name, "near", place, "on", day].join(" ");

            let object = rng.random_range(0..config.regions);
            let image: Vec<Vec<f64>> = (0..config.regions)
                .map(|r| {
                    let mut region = vec![0.0; d];
                    let bg = k * b + rng.random_range(0..(d - k * b));
                    region[bg] = 0.5;
                    if r == object {
                        if useless {
                            region.iter_mut().take(k * b).for_each(|x| *x = standard_normal(&mut rng));
                        } else {
                            region[class * b..(class + 1) * b].iter_mut().for_each(|x| *x = 1.0);
                        }
                    }
                    region.iter_mut().for_each(|x| *x += sigma * standard_normal(&mut rng));
                    region
                })
                .collect();

            Ok(RawSample {
                id: format!("syn{}-{i:05}", config.seed),
                text: words.join(" "),
                summary,
                image_features: image,
                phrases: Some(phrases),
                image_present: true,
                class: Some(class as u32),
            })
        })
        .collect()
}

/// Name word of the class, as it appears in text and summary.
pub fn class_name(c: usize) -> String {
    CLASS_NAMES[c].to_string()
}

//! Image-masking, unpairing and layer-placement experiments.

use std::fmt::Write as _;

use anyhow::Result;
use cfsum_core::data::{mask_images, unpair_swap, MultimodalSample, Vocabulary};
use cfsum_core::model::{Model, ModelConfig};
use cfsum_core::tensor::derive_seed;
use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::eval::evaluate;
use crate::train::{train, TrainConfig};

pub const MASK_RATES: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

/// A named model under test and whether its pre-filter is active.
pub struct Contender<'a> {
    pub name: String,
    pub model: &'a Model,
    pub filter: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskRow {
    pub model: String,
    pub rate: f64,
    pub rouge1: f64,
    pub rouge2: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
}

/// Evaluate each contender with a growing fraction of zeroed images.
pub fn mask_experiment(
    contenders: &[Contender<'_>],
    vocab: &Vocabulary,
    corpus: &[MultimodalSample],
    rates: &[f64],
    seed: u64,
) -> Result<Vec<MaskRow>> {
    let mut rows = Vec::new();
    for &rate in rates {
        let masked = mask_images(corpus, rate, seed)?;
        for c in contenders {
            let r = evaluate(c.model, vocab, &masked, c.filter)?.report;
            log::info!("mask {rate:.2} {}: ROUGE-1 {:.2}", c.name, r.rouge1);
            rows.push(MaskRow {
                model: c.name.clone(),
                rate,
                rouge1: r.rouge1,
                rouge2: r.rouge2,
                rouge_l: r.rouge_l,
            });
        }
    }
    Ok(rows)
}

pub fn mask_csv(rows: &[MaskRow]) -> String {
    let mut out = String::from("model,rate,rouge1,rouge2,rougeL\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{:.4},{:.4},{:.4}", r.model, r.rate, r.rouge1, r.rouge2, r.rouge_l);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnpairRow {
    pub model: String,
    pub paired_mean: f64,
    pub paired_std: f64,
    pub unpaired_mean: f64,
    pub unpaired_std: f64,
    /// Mean of paired minus unpaired ROUGE-1 over samplings.
    pub degradation: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnpairSettings {
    pub pairs: usize,
    pub population: usize,
    pub samplings: usize,
    pub seed: u64,
}

impl Default for UnpairSettings {
    fn default() -> Self {
        Self {
            pairs: 20,
            population: 100,
            samplings: 3,
            seed: 1,
        }
    }
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Swap images between cross-class pairs inside seeded sub-populations and
/// compare ROUGE-1 before and after.
pub fn unpair_experiment(
    contenders: &[Contender<'_>],
    vocab: &Vocabulary,
    corpus: &[MultimodalSample],
    settings: UnpairSettings,
) -> Result<Vec<UnpairRow>> {
    anyhow::ensure!(settings.samplings > 0, "need at least one sampling");
    anyhow::ensure!(
        settings.population <= corpus.len(),
        "population {} exceeds corpus of {}",
        settings.population,
        corpus.len()
    );
    let mut paired = vec![Vec::new(); contenders.len()];
    let mut unpaired = vec![Vec::new(); contenders.len()];
    for s in 0..settings.samplings {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(settings.seed, &[s as u64]));
        let mut picked = sample_indices(&mut rng, corpus.len(), settings.population).into_vec();
        picked.sort_unstable();
        let population: Vec<MultimodalSample> = picked.iter().map(|&i| corpus[i].clone()).collect();
        let (swapped, _) = unpair_swap(&population, settings.pairs, derive_seed(settings.seed, &[s as u64, 1]))?;
        for (k, c) in contenders.iter().enumerate() {
            paired[k].push(evaluate(c.model, vocab, &population, c.filter)?.report.rouge1);
            unpaired[k].push(evaluate(c.model, vocab, &swapped, c.filter)?.report.rouge1);
        }
    }
    Ok(contenders
        .iter()
        .enumerate()
        .map(|(k, c)| {
            let (pm, ps) = mean_std(&paired[k]);
            let (um, us) = mean_std(&unpaired[k]);
            UnpairRow {
                model: c.name.clone(),
                paired_mean: pm,
                paired_std: ps,
                unpaired_mean: um,
                unpaired_std: us,
                degradation: pm - um,
            }
        })
        .collect())
}

pub fn unpair_table(rows: &[UnpairRow]) -> String {
    let mut out = String::from("model,paired,unpaired,degradation\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{:.2}±{:.2},{:.2}±{:.2},{:.2}",
            r.model, r.paired_mean, r.paired_std, r.unpaired_mean, r.unpaired_std, r.degradation
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub prefilter_layer: usize,
    pub gap: usize,
    pub word_layer: usize,
    pub phrase_layer: usize,
    pub rouge1: f64,
}

/// Placements `(L_f, L_f + w, L_f + 2w)` for every grid point that fits in
/// `config.layers`; infeasible points are logged and dropped.
pub fn ablation_grid(config: &ModelConfig, starts: &[usize], gaps: &[usize]) -> Vec<(usize, usize, usize, usize)> {
    let mut out = Vec::new();
    for &gap in gaps {
        for &lf in starts {
            let (lw, lp) = (lf + gap, lf + 2 * gap);
            let candidate = ModelConfig {
                prefilter_layer: Some(lf),
                word_layer: Some(lw),
                phrase_layer: Some(lp),
                ..config.clone()
            };
            match candidate.validate() {
                Ok(()) => out.push((lf, gap, lw, lp)),
                Err(e) => log::warn!("skipping placement F{lf}W{lw}P{lp}: {e}"),
            }
        }
    }
    out
}

/// Train and evaluate one model per feasible placement.
pub fn layer_ablation(
    base: &TrainConfig,
    vocab: &Vocabulary,
    train_set: &[MultimodalSample],
    test_set: &[MultimodalSample],
    starts: &[usize],
    gaps: &[usize],
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for (lf, gap, lw, lp) in ablation_grid(&base.model, starts, gaps) {
        let mut cfg = base.clone();
        cfg.model.prefilter_layer = Some(lf);
        cfg.model.word_layer = Some(lw);
        cfg.model.phrase_layer = Some(lp);
        let outcome = train(&cfg, train_set)?;
        let r = evaluate(&outcome.model, vocab, test_set, true)?.report;
        log::info!("F{lf}W{lw}P{lp}: ROUGE-1 {:.2}", r.rouge1);
        rows.push(AblationRow {
            prefilter_layer: lf,
            gap,
            word_layer: lw,
            phrase_layer: lp,
            rouge1: r.rouge1,
        });
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("lf,w,lw,lp,rouge1\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{:.4}",
            r.prefilter_layer, r.gap, r.word_layer, r.phrase_layer, r.rouge1
        );
    }
    out
}

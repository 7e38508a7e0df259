//! Independent oracles: brute-force LCS, hand-computed metric values, the
//! text-only degeneration check and randomized loss checks.

use cfsum_core::data::{build_vocab, encode_corpus, synth_generate, MultimodalSample, SynthConfig};
use cfsum_core::metrics::{bleu, lcs_len, rouge_n};
use cfsum_core::model::{encode, EncodeOptions, Gate, Model, ModelConfig};
use cfsum_core::objective::{sample_loss, LossWeights, Phase};
use cfsum_core::tensor::{ParamStore, Tape};
use cfsum_core::{phrase, word};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const DEGENERATION_TOL: f64 = 1e-9;

/// LCS by enumerating every subsequence of the shorter sequence.
pub fn lcs_brute(a: &[u8], b: &[u8]) -> usize {
    let (short, long) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let is_subseq = |s: &[u8]| {
        let mut it = long.iter();
        s.iter().all(|x| it.any(|y| y == x))
    };
    (0u32..1 << short.len())
        .filter_map(|mask| {
            let s: Vec<u8> = (0..short.len()).filter(|i| mask >> i & 1 == 1).map(|i| short[i]).collect();
            is_subseq(&s).then_some(s.len())
        })
        .max()
        .unwrap_or(0)
}

/// Every sequence over `{0, 1, 2}` with length at most `max_len`.
pub fn all_sequences(max_len: usize) -> Vec<Vec<u8>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_len {
        frontier = frontier
            .iter()
            .flat_map(|s: &Vec<u8>| {
                (0..3u8).map(move |c| {
                    let mut t = s.clone();
                    t.push(c);
                    t
                })
            })
            .collect();
        out.extend(frontier.iter().cloned());
    }
    out
}

/// Number of pairs on which the DP and the brute force disagree, and the
/// number of pairs checked. Every length-<=8 sequence is paired with every
/// length-<=4 sequence in both orders, plus `random_pairs` random pairs of
/// length-<=8 sequences.
pub fn lcs_mismatches(random_pairs: usize, seed: u64) -> (usize, usize) {
    let long = all_sequences(8);
    let short = all_sequences(4);
    let mut bad = 0;
    let mut checked = 0;
    for a in &long {
        for b in &short {
            bad += usize::from(lcs_len(a, b) != lcs_brute(a, b));
            bad += usize::from(lcs_len(b, a) != lcs_brute(b, a));
            checked += 2;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..random_pairs {
        let a = &long[rng.random_range(0..long.len())];
        let b = &long[rng.random_range(0..long.len())];
        bad += usize::from(lcs_len(a, b) != lcs_brute(a, b));
        checked += 1;
    }
    (bad, checked)
}

/// `(hypothesis, reference, ROUGE-1, ROUGE-2, BLEU-4)` worked out by hand.
pub const TOY_PAIRS: [(&str, &str, f64, f64, f64); 5] = [
    // identical
    ("the cat sat on the mat", "the cat sat on the mat", 100.0, 100.0, 100.0),
    // 5/6 unigrams, 3/5 bigrams, 1/4 trigrams, 0/3 four-grams floored to 1/12:
    // BLEU = (5/6 * 3/5 * 1/4 * 1/12)^(1/4) = 96^(-1/4)
    ("the cat sat on the mat", "the cat is on the mat", 250.0 / 3.0, 60.0, 31.947_155_212_313_62),
    // exact prefix of half the length: all precisions 1, BP = e^(1 - 8/4)
    ("a b c d", "a b c d e f g h", 200.0 / 3.0, 60.0, 36.787_944_117_144_235),
    // disjoint: every precision floored to 1/8
    ("x y z w", "a b c d", 0.0, 0.0, 12.5),
    // clipping: 2/4 unigrams, no higher orders: (1/2 * 8^-3)^(1/4) = 1024^(-1/4)
    ("the the the the", "the cat the dog", 50.0, 0.0, 17.677_669_529_663_69),
];

fn toks(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

/// Largest absolute deviation from the hand-computed toy values.
pub fn toy_metric_error() -> f64 {
    TOY_PAIRS
        .iter()
        .map(|&(h, r, r1, r2, b)| {
            let (h, r) = (toks(h), toks(r));
            let got = [
                rouge_n(&h, &r, 1).unwrap(),
                rouge_n(&h, &r, 2).unwrap(),
                bleu(std::slice::from_ref(&h), std::slice::from_ref(&r), 4).unwrap(),
            ];
            got.iter().zip([r1, r2, b]).map(|(g, e)| (g - e).abs()).fold(0.0, f64::max)
        })
        .fold(0.0, f64::max)
}

pub fn synth_samples(n: usize, seed: u64) -> (usize, Vec<MultimodalSample>) {
    let raw = synth_generate(&SynthConfig {
        n,
        seed,
        ..SynthConfig::default()
    })
    .unwrap();
    let vocab = build_vocab(&raw).unwrap();
    (vocab.len(), encode_corpus(&raw, &vocab, 60).unwrap())
}

/// Largest deviation between the bi-modal text rows of every layer above
/// `L_f` and a text-only forward started from the layer-`L_f` text rows,
/// with the image cut.
pub fn degeneration_error(config: &ModelConfig, seed: u64) -> f64 {
    let (v, samples) = synth_samples(3, seed);
    let config = ModelConfig {
        vocab_size: v,
        feature_dim: samples[0].feature_dim,
        ..config.clone()
    };
    let model = Model::new(config, seed).unwrap();
    let lf = model.config.prefilter_layer.unwrap_or(3);
    let mut worst: f64 = 0.0;
    for sample in &samples {
        let mut tape = Tape::new(&model.params);
        let opts = EncodeOptions {
            gate: Gate::Fixed { after: lf, keep: false },
            uni_layers: 0,
        };
        let trace = encode(&mut tape, &model, sample, opts).unwrap();
        let t = trace.text_len;
        let mut x = tape.slice(trace.m(lf), 0, 0, t).unwrap();
        for layer in lf + 1..=model.config.layers {
            x = model.layer_forward(&mut tape, layer, x, None).unwrap().0;
            let bi = tape.slice(trace.m(layer), 0, 0, t).unwrap();
            let dev = tape
                .value(bi)
                .iter()
                .zip(tape.value(x))
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            worst = worst.max(dev);
        }
    }
    worst
}

/// Outcome of the randomized loss checks.
#[derive(Debug, Default)]
pub struct LossCheck {
    pub negative: usize,
    /// KL of the attention against itself was not zero.
    pub nonzero_at_match: usize,
    /// KL was zero although target and attention differ.
    pub zero_at_mismatch: usize,
}

impl LossCheck {
    pub fn ok(&self) -> bool {
        self.negative == 0 && self.nonzero_at_match == 0 && self.zero_at_mismatch == 0
    }
}

/// Evaluate every auxiliary loss on `trials` random inputs.
pub fn random_loss_check(trials: usize, seed: u64) -> LossCheck {
    let store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = LossCheck::default();
    for _ in 0..trials {
        let t_len = rng.random_range(1..12);
        let c_len = t_len + rng.random_range(1..6);
        let mut tape = Tape::new(&store);

        let bi: Vec<f64> = (0..t_len).map(|_| rng.random::<f64>()).collect();
        let uni: Vec<f64> = (0..t_len).map(|_| rng.random::<f64>()).collect();
        let targets: Vec<f64> = (0..t_len).map(|_| f64::from(u8::from(rng.random::<bool>()))).collect();
        let pb = tape.input(&[t_len, 1], bi).unwrap();
        let pu = tape.input(&[t_len, 1], uni).unwrap();
        let copyc = word::copyc_loss(&mut tape, pb, pu, &targets).unwrap();

        let k = rng.random_range(1..5);
        let rb: Vec<f64> = (0..k).map(|_| rng.random::<f64>()).collect();
        let ru: Vec<f64> = (0..k).map(|_| rng.random::<f64>()).collect();
        let truth: Vec<f64> = (0..k).map(|_| rng.random::<f64>()).collect();
        let rb = tape.input(&[k, 1], rb).unwrap();
        let ru = tape.input(&[k, 1], ru).unwrap();
        let copys = phrase::copys_loss(&mut tape, rb, ru, &truth).unwrap();

        // random row-stochastic attention for three layers
        let attn: Vec<_> = (0..3)
            .map(|_| {
                let rows: Vec<f64> = (0..c_len)
                    .flat_map(|_| {
                        let w: Vec<f64> = (0..c_len).map(|_| rng.random::<f64>()).collect();
                        let s: f64 = w.iter().sum();
                        w.into_iter().map(move |x| x / s)
                    })
                    .collect();
                tape.input(&[c_len, c_len], rows).unwrap()
            })
            .collect();
        let t2v = word::t2v(&mut tape, &attn, t_len, c_len).unwrap();
        let gain: Vec<f64> = (0..t_len).map(|_| rng.random_range(-3.0..3.0)).collect();
        let kl = word::divergence_loss(&mut tape, &gain, t2v).unwrap();
        let kl_phrase = phrase::phrase_divergence_loss(&mut tape, &gain, t2v).unwrap();

        // gain whose softmax equals the normalized attention exactly
        let v = tape.value(t2v).to_vec();
        let total: f64 = v.iter().sum();
        let matched: Vec<f64> = v.iter().map(|x| (x / total).ln()).collect();
        let kl_match = word::divergence_loss(&mut tape, &matched, t2v).unwrap();

        for l in [copyc, copys, kl, kl_phrase, kl_match] {
            out.negative += usize::from(!(tape.scalar(l) >= 0.0));
        }
        out.nonzero_at_match += usize::from(tape.scalar(kl_match) > 1e-12);
        let target = cfsum_core::tensor::kernels::softmax(&gain);
        let differs = target.iter().zip(&v).any(|(p, q)| (p - q / total).abs() > 1e-6);
        out.zero_at_mismatch += usize::from(differs && tape.scalar(kl) == 0.0);
    }
    out
}

/// Full-phase objectives of freshly initialised small models on synthetic
/// samples; counts samples where any term is negative or missing.
pub fn model_loss_violations(models: u64, per_model: usize) -> (usize, usize) {
    let mut bad = 0;
    let mut checked = 0;
    for seed in 0..models {
        let (v, samples) = synth_samples(per_model, 100 + seed);
        let config = ModelConfig {
            vocab_size: v,
            layers: 6,
            hidden: 8,
            heads: 2,
            ffn: 12,
            prefilter_layer: Some(1),
            word_layer: Some(2),
            phrase_layer: Some(3),
            alpha: -1.0,
            ..ModelConfig::default()
        };
        let model = Model::new(config, seed).unwrap();
        for s in &samples {
            let mut tape = Tape::training(&model.params, seed);
            let (_, b) = sample_loss(&mut tape, &model, s, Phase::Full, &LossWeights::default()).unwrap();
            let terms = [Some(b.generation), b.copyc, b.copys, b.word, b.phrase];
            bad += usize::from(!terms.iter().all(|t| t.is_some_and(|x| x >= 0.0)));
            checked += 1;
        }
    }
    (bad, checked)
}

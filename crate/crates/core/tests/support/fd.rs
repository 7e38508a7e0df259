//! Finite-difference oracles shared by the gradient tests and the
//! acceptance suite.

use cfsum_core::data::{build_vocab, encode_corpus, synth_generate, MultimodalSample, SynthConfig};
use cfsum_core::model::{encode, EncodeOptions, Model, ModelConfig};
use cfsum_core::objective::{sample_loss, LossWeights, Phase};
use cfsum_core::tensor::{ParamGrads, ParamStore, Tape, Tensor};
use cfsum_core::word;
use cfsum_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;
pub const OP_TOL: f64 = 1e-4;
pub const E2E_TOL: f64 = 1e-3;
pub const SEEDS: u64 = 20;

/// Relative error `|a - n| / max(|a|, |n|, 1e-8)` in the Euclidean norm.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(1e-8)
}

type Build = fn(&mut Tape<'_>, &[Tensor]) -> Result<Tensor>;

struct Case {
    name: &'static str,
    shapes: &'static [&'static [usize]],
    build: Build,
}

/// Reduce any tensor to a scalar through fixed pseudo-random weights so
/// every output entry contributes a distinct coefficient.
fn project(t: &mut Tape<'_>, x: Tensor) -> Result<Tensor> {
    let shape = t.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| ((i * 7 + 3) % 11) as f64 / 5.0 - 1.0).collect();
    let w = t.constant(&shape, w)?;
    let p = t.mul(x, w)?;
    t.sum(p)
}

fn probs(t: &mut Tape<'_>, x: Tensor) -> Result<Tensor> {
    t.softmax(x, 1)
}

const CASES: &[Case] = &[
    Case { name: "matmul", shapes: &[&[3, 4], &[4, 2]], build: |t, x| { let y = t.matmul(x[0], x[1])?; project(t, y) } },
    Case { name: "transpose", shapes: &[&[3, 2]], build: |t, x| { let y = t.transpose(x[0])?; project(t, y) } },
    Case { name: "add", shapes: &[&[2, 3], &[2, 3]], build: |t, x| { let y = t.add(x[0], x[1])?; project(t, y) } },
    Case { name: "sub", shapes: &[&[2, 3], &[2, 3]], build: |t, x| { let y = t.sub(x[0], x[1])?; project(t, y) } },
    Case { name: "mul", shapes: &[&[2, 3], &[2, 3]], build: |t, x| { let y = t.mul(x[0], x[1])?; project(t, y) } },
    Case { name: "add_row", shapes: &[&[3, 4], &[1, 4]], build: |t, x| { let y = t.add_row(x[0], x[1])?; project(t, y) } },
    Case { name: "scale", shapes: &[&[2, 3]], build: |t, x| { let y = t.scale(x[0], -1.7)?; project(t, y) } },
    Case { name: "concat_rows", shapes: &[&[2, 3], &[1, 3]], build: |t, x| { let y = t.concat(&[x[0], x[1]], 0)?; project(t, y) } },
    Case { name: "concat_cols", shapes: &[&[2, 3], &[2, 1]], build: |t, x| { let y = t.concat(&[x[0], x[1]], 1)?; project(t, y) } },
    Case { name: "slice_rows", shapes: &[&[4, 3]], build: |t, x| { let y = t.slice(x[0], 0, 1, 3)?; project(t, y) } },
    Case { name: "slice_cols", shapes: &[&[3, 4]], build: |t, x| { let y = t.slice(x[0], 1, 2, 4)?; project(t, y) } },
    Case { name: "embedding", shapes: &[&[5, 3]], build: |t, x| { let y = t.embedding(x[0], &[4, 0, 4, 2])?; project(t, y) } },
    Case { name: "sum_axis0", shapes: &[&[3, 4]], build: |t, x| { let y = t.sum_axis(x[0], 0)?; project(t, y) } },
    Case { name: "sum_axis1", shapes: &[&[3, 4]], build: |t, x| { let y = t.sum_axis(x[0], 1)?; project(t, y) } },
    Case { name: "mean_axis0", shapes: &[&[3, 4]], build: |t, x| { let y = t.mean_axis(x[0], 0)?; project(t, y) } },
    Case { name: "mean_axis1", shapes: &[&[3, 4]], build: |t, x| { let y = t.mean_axis(x[0], 1)?; project(t, y) } },
    Case { name: "sum", shapes: &[&[3, 2]], build: |t, x| { let y = t.mul(x[0], x[0])?; t.sum(y) } },
    Case { name: "mean", shapes: &[&[3, 2]], build: |t, x| { let y = t.mul(x[0], x[0])?; t.mean(y) } },
    Case { name: "softmax_axis1", shapes: &[&[3, 4]], build: |t, x| { let y = t.softmax(x[0], 1)?; project(t, y) } },
    Case { name: "softmax_axis0", shapes: &[&[3, 4]], build: |t, x| { let y = t.softmax(x[0], 0)?; project(t, y) } },
    Case {
        name: "layer_norm",
        shapes: &[&[3, 5], &[1, 5], &[1, 5]],
        build: |t, x| { let y = t.layer_norm(x[0], x[1], x[2], 1e-5)?; project(t, y) },
    },
    Case { name: "tanh", shapes: &[&[2, 3]], build: |t, x| { let y = t.tanh(x[0])?; project(t, y) } },
    Case { name: "sigmoid", shapes: &[&[2, 3]], build: |t, x| { let y = t.sigmoid(x[0])?; project(t, y) } },
    Case { name: "relu", shapes: &[&[2, 3]], build: |t, x| { let y = t.relu(x[0])?; project(t, y) } },
    Case { name: "cosine", shapes: &[&[1, 4], &[1, 4]], build: |t, x| { let y = t.cosine(x[0], x[1])?; project(t, y) } },
    Case {
        name: "masked_fill",
        shapes: &[&[2, 3]],
        build: |t, x| {
            let y = t.masked_fill(x[0], &[false, true, false, false, false, true], f64::NEG_INFINITY)?;
            let y = t.softmax(y, 1)?;
            project(t, y)
        },
    },
    Case {
        name: "attention_filter",
        shapes: &[&[4, 4]],
        build: |t, x| {
            let a = probs(t, x[0])?;
            let y = t.attention_filter(a, 2)?;
            project(t, y)
        },
    },
    Case {
        name: "dropout",
        shapes: &[&[3, 4]],
        build: |t, x| { let y = t.dropout(x[0], 0.3)?; project(t, y) },
    },
    Case {
        name: "normalize_sum",
        shapes: &[&[2, 3]],
        build: |t, x| {
            let p = t.sigmoid(x[0])?;
            let y = t.normalize_sum(p)?;
            project(t, y)
        },
    },
    Case {
        name: "bce",
        shapes: &[&[4, 1]],
        build: |t, x| { let p = t.sigmoid(x[0])?; t.bce(p, &[1.0, 0.0, 0.0, 1.0]) },
    },
    Case {
        name: "nll",
        shapes: &[&[3, 4]],
        build: |t, x| { let p = probs(t, x[0])?; t.nll(p, &[2, 0, 3]) },
    },
    Case { name: "mse", shapes: &[&[2, 3], &[2, 3]], build: |t, x| t.mse(x[0], x[1]) },
    Case {
        name: "kl_div",
        shapes: &[&[1, 5], &[1, 5]],
        build: |t, x| {
            let p = probs(t, x[0])?;
            let q = probs(t, x[1])?;
            t.kl_div(p, q)
        },
    },
];

fn random_inputs(shapes: &[&[usize]], rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    shapes
        .iter()
        .map(|s| {
            (0..s.iter().product::<usize>())
                .map(|_| {
                    // keep relu inputs away from its kink
                    let v: f64 = rng.random_range(0.05..1.5);
                    if rng.random::<bool>() { v } else { -v }
                })
                .collect()
        })
        .collect()
}

fn eval(case: &Case, store: &ParamStore, seed: u64, values: &[Vec<f64>]) -> f64 {
    let mut t = Tape::training(store, seed);
    let xs: Vec<Tensor> = case.shapes.iter().zip(values).map(|(s, v)| t.input(s, v.clone()).unwrap()).collect();
    let loss = (case.build)(&mut t, &xs).unwrap();
    t.scalar(loss)
}

/// Worst relative error per op over `seeds` random inputs.
pub fn op_errors(seeds: u64) -> Vec<(&'static str, f64)> {
    let store = ParamStore::new();
    CASES
        .iter()
        .map(|case| {
            let mut max_err: f64 = 0.0;
            for seed in 0..seeds {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let values = random_inputs(case.shapes, &mut rng);
                // the training tape seeds dropout identically on every evaluation
                let mut t = Tape::training(&store, seed);
                let xs: Vec<Tensor> =
                    case.shapes.iter().zip(&values).map(|(s, v)| t.input(s, v.clone()).unwrap()).collect();
                let loss = (case.build)(&mut t, &xs).unwrap();
                let grads = t.backward(loss).unwrap();
                for (k, &x) in xs.iter().enumerate() {
                    let analytic = grads.wrt(x).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; values[k].len()]);
                    let numeric: Vec<f64> = (0..values[k].len())
                        .map(|i| {
                            let mut plus = values.clone();
                            plus[k][i] += H;
                            let mut minus = values.clone();
                            minus[k][i] -= H;
                            (eval(case, &store, seed, &plus) - eval(case, &store, seed, &minus)) / (2.0 * H)
                        })
                        .collect();
                    max_err = max_err.max(rel_err(&analytic, &numeric));
                }
            }
            (case.name, max_err)
        })
        .collect()
}

pub fn tiny_model(seed: u64) -> (Model, Vec<MultimodalSample>) {
    let raw = synth_generate(&SynthConfig {
        n: 4,
        seed,
        ..SynthConfig::default()
    })
    .unwrap();
    let vocab = build_vocab(&raw).unwrap();
    let samples = encode_corpus(&raw, &vocab, 60).unwrap();
    let config = ModelConfig {
        layers: 6,
        hidden: 8,
        heads: 2,
        ffn: 12,
        vocab_size: vocab.len(),
        feature_dim: samples[0].feature_dim,
        prefilter_layer: Some(1),
        word_layer: Some(2),
        phrase_layer: Some(3),
        // keep the gate open so every module contributes
        alpha: -1.0,
        dropout: 0.0,
        // odd seeds check the post-norm layout
        pre_norm: seed.is_multiple_of(2),
        ..ModelConfig::default()
    };
    (Model::new(config, seed).unwrap(), samples)
}

/// Parameters touched by each part of the graph.
const PROBES: &[&str] = &[
    "encoder.0.attn.wq",
    "encoder.2.ffn.w1",
    "word.copy.w",
    "phrase.scorer.w1",
    "decoder.gru.wh",
    "decoder.out.w",
    "embed.image.w",
    "embed.token",
];

pub fn probe_check(model: &mut Model, loss_of: &dyn Fn(&Model, &mut Tape<'_>) -> Tensor, entries: usize) -> f64 {
    let analytic = {
        let mut t = Tape::new(&model.params);
        let loss = loss_of(model, &mut t);
        let mut acc = ParamGrads::zeros(&model.params);
        t.backward(loss).unwrap().accumulate_into(&mut acc);
        acc
    };
    let mut worst: f64 = 0.0;
    for name in PROBES {
        let id = model.params.find(name).unwrap_or_else(|| panic!("no parameter {name}"));
        let n = model.params.values(id).len().min(entries);
        let a = analytic.get(id)[..n].to_vec();
        let numeric: Vec<f64> = (0..n)
            .map(|i| {
                let orig = model.params.values(id)[i];
                let mut at = |v: f64| {
                    model.params.values_mut(id)[i] = v;
                    let mut t = Tape::new(&model.params);
                    let loss = loss_of(model, &mut t);
                    t.scalar(loss)
                };
                let d = (at(orig + H) - at(orig - H)) / (2.0 * H);
                model.params.values_mut(id)[i] = orig;
                d
            })
            .collect();
        worst = worst.max(rel_err(&a, &numeric));
    }
    worst
}

/// Worst probe error of the full objective (guidance terms weighted out).
pub fn objective_error(seed: u64) -> f64 {
    let (mut model, samples) = tiny_model(seed);
    let sample = samples[0].clone();
    // guidance targets are stop-gradient constants; finite differences
    // would move them, so the divergence terms are checked separately
    let weights = LossWeights {
        word: 0.0,
        phrase: 0.0,
        ..LossWeights::default()
    };
    probe_check(&mut model, &|m, t| sample_loss(t, m, &sample, Phase::Full, &weights).unwrap().0, 6)
}

/// Worst probe error of the word divergence with a fixed gain vector.
pub fn guidance_error(seed: u64) -> f64 {
    let (mut model, samples) = tiny_model(seed);
    let sample = samples[1].clone();
    let gain: Vec<f64> = (0..sample.text.len()).map(|j| ((j * 5) % 7) as f64 / 3.0 - 1.0).collect();
    let loss_of = |m: &Model, t: &mut Tape<'_>| {
        let trace = encode(t, m, &sample, EncodeOptions::for_model(m, true)).unwrap();
        let lw = m.config.word_layer.unwrap();
        let attn = &trace.attn[lw..lw + m.config.window];
        let t2v = word::t2v(t, attn, trace.text_len, trace.total_len).unwrap();
        word::divergence_loss(t, &gain, t2v).unwrap()
    };
    probe_check(&mut model, &loss_of, 6)
}

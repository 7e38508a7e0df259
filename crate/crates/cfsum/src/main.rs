use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cfsum::eval::evaluate;
use cfsum::experiments::{self, Contender, UnpairSettings, MASK_RATES};
use cfsum::train::{save_outcome, train, TrainConfig};
use cfsum::{fit_config, io, prepare_eval, prepare_training};
use cfsum_core::data::{synth_generate, Binding, SynthConfig};
use cfsum_core::model::Model;
use cfsum_core::objective::diagnose;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "cfsum", about = "Coarse-to-fine multimodal summarization at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Training configuration JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Enabled modules, any of `f`, `w`, `p` (comma separated), or `none`.
    #[arg(long)]
    modules: Option<String>,
    #[arg(long)]
    lf: Option<usize>,
    #[arg(long)]
    lw: Option<usize>,
    #[arg(long)]
    lp: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Disable the pre-filter at inference.
    #[arg(long)]
    filter_off: bool,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic train/test corpus.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value_t = 500)]
        test_n: usize,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 0.2)]
        noise: f64,
        /// Feature noise standard deviation.
        #[arg(long, default_value_t = 0.1)]
        sigma: f64,
        #[arg(long, default_value_t = 4)]
        regions: usize,
        /// What the image class refers to: `slot` or `entity`.
        #[arg(long, default_value = "slot")]
        binding: String,
    },
    /// Train a model; writes `final/` and `best/` checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Beam-search a corpus and score it.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Score models with growing fractions of zeroed images.
    MaskExp {
        #[command(flatten)]
        common: Common,
        /// `name=dir` pairs; append `:nofilter` to switch the pre-filter off.
        #[arg(long = "model", required = true)]
        models: Vec<String>,
        #[arg(long)]
        data: PathBuf,
    },
    /// Swap images between cross-class pairs and compare ROUGE-1.
    UnpairExp {
        #[command(flatten)]
        common: Common,
        #[arg(long = "model", required = true)]
        models: Vec<String>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 20)]
        pairs: usize,
        #[arg(long, default_value_t = 100)]
        population: usize,
        #[arg(long, default_value_t = 3)]
        samplings: usize,
    },
    /// Train and score every feasible module placement.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
        starts: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "2,3")]
        gaps: Vec<usize>,
    },
    /// Dump filter decisions, gains and attention for a few samples.
    Diag {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 20)]
        limit: usize,
    },
}

impl Common {
    fn train_config(&self) -> Result<TrainConfig> {
        let mut cfg: TrainConfig = match &self.config {
            Some(p) => io::read_json(p)?,
            None => TrainConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        let m = &mut cfg.model;
        if let Some(mods) = &self.modules {
            let mods = mods.to_lowercase();
            let on: Vec<&str> = mods.split(',').map(str::trim).filter(|s| !s.is_empty() && *s != "none").collect();
            if let Some(bad) = on.iter().find(|s| !matches!(**s, "f" | "w" | "p")) {
                bail!("unknown module `{bad}` (expected f, w, p or none)");
            }
            let has = |k: &str| on.contains(&k);
            m.prefilter_layer = has("f").then(|| self.lf.or(m.prefilter_layer).unwrap_or(3));
            m.word_layer = has("w").then(|| self.lw.or(m.word_layer).unwrap_or(6));
            m.phrase_layer = has("p").then(|| self.lp.or(m.phrase_layer).unwrap_or(9));
        } else {
            if self.lf.is_some() {
                m.prefilter_layer = self.lf;
            }
            if self.lw.is_some() {
                m.word_layer = self.lw;
            }
            if self.lp.is_some() {
                m.phrase_layer = self.lp;
            }
        }
        if let Some(a) = self.alpha {
            m.alpha = a;
        }
        Ok(cfg)
    }

    fn ensure_out(&self) -> Result<&Path> {
        fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        Ok(&self.out)
    }
}

fn load_model(dir: &Path, common: &Common) -> Result<(Model, cfsum_core::data::Vocabulary)> {
    let (mut model, vocab) = io::load_checkpoint(dir)?;
    if let Some(a) = common.alpha {
        model.config.alpha = a;
    }
    Ok((model, vocab))
}

fn parse_contender(spec: &str) -> Result<(String, PathBuf, bool)> {
    let (name, rest) = spec
        .split_once('=')
        .with_context(|| format!("model spec `{spec}` is not name=dir"))?;
    let (dir, filter) = match rest.strip_suffix(":nofilter") {
        Some(d) => (d, false),
        None => (rest, true),
    };
    Ok((name.to_owned(), PathBuf::from(dir), filter))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

#[derive(Serialize)]
struct DiagEntry {
    #[serde(flatten)]
    diagnostics: cfsum_core::objective::SampleDiagnostics,
    tokens: Vec<String>,
    summary: String,
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            common,
            n,
            test_n,
            classes,
            noise,
            sigma,
            regions,
            binding,
        } => {
            let binding = match binding.as_str() {
                "slot" => Binding::Slot,
                "entity" => Binding::Entity,
                other => bail!("unknown binding `{other}` (expected slot or entity)"),
            };
            let out = common.ensure_out()?;
            let seed = common.seed.unwrap_or(1);
            let base = SynthConfig {
                n,
                seed,
                classes,
                noise_rate: noise,
                sigma,
                regions,
                binding,
                ..SynthConfig::default()
            };
            io::write_corpus(&out.join("train.jsonl"), &synth_generate(&base)?)?;
            let test = SynthConfig {
                n: test_n,
                seed: cfsum_core::tensor::derive_seed(seed, &[7]),
                ..base
            };
            io::write_corpus(&out.join("test.jsonl"), &synth_generate(&test)?)?;
            println!("wrote {n} training and {test_n} test samples to {}", out.display());
        }
        Command::Train { common, data } => {
            let mut cfg = common.train_config()?;
            let raw = io::read_corpus(&data)?;
            let (vocab, samples) = prepare_training(&raw, cfg.model.max_encode_len)?;
            fit_config(&mut cfg.model, &vocab, &samples)?;
            let outcome = train(&cfg, &samples)?;
            let out = common.ensure_out()?;
            save_outcome(out, &cfg, &outcome, &vocab)?;
            let last = outcome.log.last().map_or(0.0, |e| e.generation);
            println!(
                "trained {} epochs; final generation loss {last:.4}; best epoch {}; checkpoints in {}",
                outcome.log.len(),
                outcome.best_epoch,
                out.display()
            );
        }
        Command::Evaluate {
            common,
            checkpoint,
            data,
        } => {
            let (model, vocab) = load_model(&checkpoint, &common)?;
            let samples = prepare_eval(&io::read_corpus(&data)?, &vocab, &model.config)?;
            let before = model.counters.snapshot();
            let result = evaluate(&model, &vocab, &samples, !common.filter_off)?;
            debug_assert_eq!(before, model.counters.snapshot());
            let out = common.ensure_out()?;
            io::write_json(&out.join("report.json"), &result.report)?;
            io::write_json(&out.join("predictions.json"), &result.predictions)?;
            let r = &result.report;
            println!(
                "ROUGE-1 {:.2}  ROUGE-2 {:.2}  ROUGE-L {:.2}  BLEU {:.2}  kept {:?}",
                r.rouge1, r.rouge2, r.rouge_l, r.bleu, result.kept_rate
            );
        }
        Command::MaskExp { common, models, data } => {
            let loaded = load_contenders(&models, &common)?;
            let vocab = &loaded[0].2;
            let samples = prepare_eval(&io::read_corpus(&data)?, vocab, &loaded[0].1.config)?;
            let contenders = contender_refs(&loaded);
            let rows = experiments::mask_experiment(&contenders, vocab, &samples, &MASK_RATES, common.seed.unwrap_or(1))?;
            let csv = experiments::mask_csv(&rows);
            write_text(&common.ensure_out()?.join("mask.csv"), &csv)?;
            print!("{csv}");
        }
        Command::UnpairExp {
            common,
            models,
            data,
            pairs,
            population,
            samplings,
        } => {
            let loaded = load_contenders(&models, &common)?;
            let vocab = &loaded[0].2;
            let samples = prepare_eval(&io::read_corpus(&data)?, vocab, &loaded[0].1.config)?;
            let settings = UnpairSettings {
                pairs,
                population,
                samplings,
                seed: common.seed.unwrap_or(1),
            };
            let rows = experiments::unpair_experiment(&contender_refs(&loaded), vocab, &samples, settings)?;
            let out = common.ensure_out()?;
            io::write_json(&out.join("unpair.json"), &rows)?;
            let table = experiments::unpair_table(&rows);
            write_text(&out.join("unpair.csv"), &table)?;
            print!("{table}");
        }
        Command::Ablate {
            common,
            data,
            test,
            starts,
            gaps,
        } => {
            let mut cfg = common.train_config()?;
            let raw = io::read_corpus(&data)?;
            let (vocab, samples) = prepare_training(&raw, cfg.model.max_encode_len)?;
            // placements come from the grid; only data-dependent fields are checked here
            let (lf, lw, lp) = (cfg.model.prefilter_layer, cfg.model.word_layer, cfg.model.phrase_layer);
            cfg.model = cfg.model.baseline();
            fit_config(&mut cfg.model, &vocab, &samples)?;
            (cfg.model.prefilter_layer, cfg.model.word_layer, cfg.model.phrase_layer) = (lf, lw, lp);
            let test_samples = prepare_eval(&io::read_corpus(&test)?, &vocab, &cfg.model)?;
            let rows = experiments::layer_ablation(&cfg, &vocab, &samples, &test_samples, &starts, &gaps)?;
            let csv = experiments::ablation_csv(&rows);
            write_text(&common.ensure_out()?.join("ablation.csv"), &csv)?;
            print!("{csv}");
        }
        Command::Diag {
            common,
            checkpoint,
            data,
            limit,
        } => {
            let (model, vocab) = load_model(&checkpoint, &common)?;
            let samples = prepare_eval(&io::read_corpus(&data)?, &vocab, &model.config)?;
            let entries = samples
                .iter()
                .take(limit)
                .map(|s| {
                    let (hyp, _) = model.summarize(s, !common.filter_off)?;
                    Ok(DiagEntry {
                        diagnostics: diagnose(&model, s)?,
                        tokens: s.text.iter().map(|&t| vocab.token(t).unwrap_or("<unk>").to_owned()).collect(),
                        summary: vocab.decode(&hyp.tokens),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let path = common.ensure_out()?.join("diag.json");
            io::write_json(&path, &entries)?;
            println!("wrote diagnostics for {} samples to {}", entries.len(), path.display());
        }
    }
    Ok(())
}

type Loaded = (String, Model, cfsum_core::data::Vocabulary, bool);

fn load_contenders(specs: &[String], common: &Common) -> Result<Vec<Loaded>> {
    let mut out: Vec<Loaded> = Vec::new();
    for spec in specs {
        let (name, dir, filter) = parse_contender(spec)?;
        let (model, vocab) = load_model(&dir, common)?;
        if let Some(first) = out.first() {
            if first.2 != vocab {
                bail!("model `{name}` uses a different vocabulary from `{}`", first.0);
            }
        }
        out.push((name, model, vocab, filter && !common.filter_off));
    }
    Ok(out)
}

fn contender_refs(loaded: &[Loaded]) -> Vec<Contender<'_>> {
    loaded
        .iter()
        .map(|(name, model, _, filter)| Contender {
            name: name.clone(),
            model,
            filter: *filter,
        })
        .collect()
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

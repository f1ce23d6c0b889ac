//! Command-line front end: data generation, training, evaluation,
//! prediction, ablation sweeps and gradient checks.

mod ablate;
mod config;

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::autodiff::{grad_check, uniform_init, GradCheckConfig, GradCheckReport};
use crate::auxgen::generate_aux;
use crate::corpus::{generate_synthetic, parse_corpus, split_corpus, Corpus, Split, SynthConfig};
use crate::encoder::ModelConfig;
use crate::error::{Error, Result};
use crate::layers::ForwardCtx;
use crate::predict::{evaluate_corpus, predict_sentences, predictions_jsonl};
use crate::text::{build_vocab, encode_absa, pad_batch};
use crate::train::{joint_loss, train_loop_with, Checkpoint, ModelParams, StepBatches, TrainConfig};

pub use ablate::{ablation_table, run_ablation, Ablation, AblationResult, ABLATIONS};
pub use config::RunConfig;

pub const SNAPSHOT_FILE: &str = "resolved_config.txt";

#[derive(Parser, Debug)]
#[command(name = "dcran", version, about = "Aspect-based sentiment analysis with relation-aware propagation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Configuration sources shared by every command.
#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// Flat `section.key = value` file applied over the defaults
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Override applied after the config file, e.g. `--set model.d_h=32`
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic corpus and write train/dev/test splits
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
        /// Number of sentences
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Fraction of sentences with a contrastive clause
        #[arg(long)]
        contrastive: Option<f64>,
    },
    /// Train on `<data>/train.jsonl`, selecting on `<data>/dev.jsonl`
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Weight of the auxiliary losses
        #[arg(long)]
        alpha: Option<f64>,
        /// Disable aspect propagation
        #[arg(long)]
        no_ap: bool,
        /// Disable opinion propagation
        #[arg(long)]
        no_op: bool,
        /// Disable the masked-term auxiliary task
        #[arg(long)]
        no_tsmtd: bool,
        /// Disable the pair-relation auxiliary task
        #[arg(long)]
        no_prd: bool,
    },
    /// Score a checkpoint on an annotated JSONL corpus
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Also write the JSON report here
        #[arg(long)]
        report: Option<PathBuf>,
        /// Directory for the resolved-config snapshot
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tag raw sentences (one per line) or a JSONL corpus
    Predict {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Output JSONL file; stdout when absent
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and score the eight ablation configurations
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Number of seeds per configuration
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Finite-difference check of the full joint loss on a tiny model
    Gradcheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Relative error tolerance
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut rc = RunConfig::default();
        if let Some(path) = &self.config {
            rc.apply_text(&fs::read_to_string(path)?)?;
        }
        for o in &self.overrides {
            rc.apply_override(o)?;
        }
        Ok(rc)
    }
}

fn write_snapshot(rc: &RunConfig, out: Option<&Path>) -> Result<()> {
    match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            fs::write(dir.join(SNAPSHOT_FILE), rc.to_text())?;
        }
        None => eprint!("{}", rc.to_text()),
    }
    Ok(())
}

fn read_corpus(path: &Path, split: Split) -> Result<Corpus> {
    let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("corpus");
    parse_corpus(&fs::read(path)?, name, split)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

#[derive(Serialize)]
struct Manifest<'a> {
    generator: &'a SynthConfig,
    config_sha256: String,
    split_seed: u64,
    train: usize,
    dev: usize,
    test: usize,
}

/// Hex SHA-256 of the generator configuration's canonical JSON.
pub fn config_hash(cfg: &SynthConfig) -> Result<String> {
    let json = serde_json::to_vec(cfg)?;
    Ok(hex::encode(Sha256::digest(&json)))
}

pub fn gen_data(cfg: &SynthConfig, out: &Path) -> Result<()> {
    let corpus = generate_synthetic(cfg)?;
    let (train, dev, test) = split_corpus(&corpus, cfg.seed);
    fs::create_dir_all(out)?;
    for c in [&train, &dev, &test] {
        fs::write(out.join(format!("{}.jsonl", c.split.as_str())), c.to_jsonl())?;
    }
    let manifest = Manifest {
        generator: cfg,
        config_sha256: config_hash(cfg)?,
        split_seed: cfg.seed,
        train: train.len(),
        dev: dev.len(),
        test: test.len(),
    };
    write_json(&out.join("manifest.json"), &manifest)
}

/// Finite-difference check of the joint objective on a tiny model: width
/// 8, one encoder layer, one decoder block, two sentences with their
/// auxiliary instances, every loss term enabled and dropout off. Every
/// tensor is redrawn at random so no branch starts at exactly zero.
pub fn gradcheck_full_model(seed: u64, tolerance: f64) -> Result<GradCheckReport> {
    let corpus = generate_synthetic(&SynthConfig {
        n_sentences: 8,
        seed: 3,
        ..Default::default()
    })?;
    let vocab = build_vocab(&corpus, 1)?;
    let mcfg = ModelConfig {
        d_h: 8,
        n_enc_layers: 1,
        n_dec_layers: 1,
        n_heads: 2,
        ffn_dim: 16,
        max_len: 32,
        dropout: 0.0,
        vocab_size: vocab.len(),
        ..Default::default()
    };
    let mut model = ModelParams::init(&mcfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for id in model.store.ids().collect::<Vec<_>>() {
        let [r, c] = model.store.get(id).shape();
        model.store.set(id, uniform_init(r, c, &mut rng))?;
    }
    let sentences = &corpus.sentences[..2];
    let absa = pad_batch(sentences.iter().map(|s| encode_absa(s, &vocab)).collect::<Result<_>>()?)?;
    let (tsmtd, prd) = generate_aux(sentences, &vocab, 1, &mut rng);
    let batches = StepBatches {
        absa,
        tsmtd: Some(pad_batch(tsmtd)?),
        prd: Some(pad_batch(prd)?),
    };
    let tcfg = TrainConfig::default();
    let gcfg = GradCheckConfig {
        tolerance,
        seed,
        ..Default::default()
    };
    grad_check(
        |g, p| Ok(joint_loss(g, p, &model, &batches, &tcfg, &mut ForwardCtx::eval())?.fin),
        &model.store,
        &gcfg,
    )
}

/// Runs one parsed command. Returns the process exit code on success.
pub fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::GenData {
            cfg,
            out,
            n,
            seed,
            contrastive,
        } => {
            let mut rc = cfg.resolve()?;
            if let Some(n) = n {
                rc.synth.n_sentences = n;
            }
            if let Some(s) = seed {
                rc.synth.seed = s;
            }
            if let Some(c) = contrastive {
                rc.synth.contrastive_fraction = c;
            }
            rc.synth.validate()?;
            gen_data(&rc.synth, &out)?;
            write_snapshot(&rc, Some(&out))?;
            Ok(0)
        }
        Command::Train {
            cfg,
            data,
            out,
            epochs,
            seed,
            alpha,
            no_ap,
            no_op,
            no_tsmtd,
            no_prd,
        } => {
            let mut rc = cfg.resolve()?;
            let t = &mut rc.train;
            if let Some(e) = epochs {
                t.epochs = e;
            }
            if let Some(s) = seed {
                t.seed = s;
            }
            if let Some(a) = alpha {
                t.alpha = a;
            }
            t.enable_ap &= !no_ap;
            t.enable_op &= !no_op;
            t.enable_tsmtd &= !no_tsmtd;
            t.enable_prd &= !no_prd;
            rc.train.validate()?;
            let train = read_corpus(&data.join("train.jsonl"), Split::Train)?;
            let dev = read_corpus(&data.join("dev.jsonl"), Split::Dev)?;
            fs::create_dir_all(&out)?;
            write_snapshot(&rc, Some(&out))?;
            let mut log = fs::File::create(out.join("train_log.jsonl"))?;
            let outcome = train_loop_with(&train, &dev, &rc.model, &rc.train, |rec| {
                writeln!(log, "{}", serde_json::to_string(rec)?)?;
                eprintln!(
                    "epoch {:>3}  l_final {:.4}  dev ABSA-F1 {:.4}",
                    rec.epoch, rec.l_final, rec.dev.absa_f1
                );
                Ok(())
            })?;
            outcome.best.save(&out.join("checkpoint.bin"))?;
            outcome.last.save(&out.join("last.bin"))?;
            Ok(0)
        }
        Command::Eval {
            cfg,
            checkpoint,
            data,
            report,
            out,
        } => {
            let rc = cfg.resolve()?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            let corpus = read_corpus(&data, Split::Test)?;
            let model = ckpt.model()?;
            let metrics = evaluate_corpus(&model, &ckpt.vocab, ckpt.train_config.flags(), &corpus, 64)?;
            let resolved = RunConfig {
                model: ckpt.model_config.clone(),
                train: ckpt.train_config.clone(),
                synth: rc.synth,
            };
            write_snapshot(&resolved, out.as_deref())?;
            let text = serde_json::to_string_pretty(&metrics)?;
            if let Some(path) = report {
                fs::write(path, format!("{text}\n"))?;
            }
            println!("{text}");
            Ok(0)
        }
        Command::Predict {
            cfg,
            checkpoint,
            input,
            output,
            out,
        } => {
            let rc = cfg.resolve()?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            let raw = fs::read_to_string(&input)?;
            let sentences: Vec<Vec<String>> = if raw.trim_start().starts_with('{') {
                parse_corpus(raw.as_bytes(), "input", Split::Test)?
                    .sentences
                    .into_iter()
                    .map(|s| s.tokens)
                    .collect()
            } else {
                raw.lines()
                    .filter(|l| !l.trim().is_empty())
                    .map(|l| l.split_whitespace().map(str::to_string).collect())
                    .collect()
            };
            let model = ckpt.model()?;
            let preds = predict_sentences(&model, &ckpt.vocab, ckpt.train_config.flags(), &sentences, 64)?;
            let resolved = RunConfig {
                model: ckpt.model_config.clone(),
                train: ckpt.train_config.clone(),
                synth: rc.synth,
            };
            write_snapshot(&resolved, out.as_deref())?;
            let text = predictions_jsonl(&preds);
            match output {
                Some(path) => fs::write(path, text)?,
                None => print!("{text}"),
            }
            Ok(0)
        }
        Command::Ablate {
            cfg,
            data,
            out,
            seeds,
            epochs,
        } => {
            let mut rc = cfg.resolve()?;
            if let Some(e) = epochs {
                rc.train.epochs = e;
            }
            rc.train.validate()?;
            if seeds == 0 {
                return Err(Error::validation("--seeds must be at least 1"));
            }
            let train = read_corpus(&data.join("train.jsonl"), Split::Train)?;
            let dev = read_corpus(&data.join("dev.jsonl"), Split::Dev)?;
            let test = read_corpus(&data.join("test.jsonl"), Split::Test)?;
            fs::create_dir_all(&out)?;
            write_snapshot(&rc, Some(&out))?;
            let seed_list: Vec<u64> = (0..seeds).map(|k| rc.train.seed + k).collect();
            let results = run_ablation(&train, &dev, &test, &rc.model, &rc.train, &seed_list, &ABLATIONS)?;
            let table = ablation_table(&results);
            write_json(&out.join("ablation.json"), &results)?;
            fs::write(out.join("ablation.txt"), &table)?;
            print!("{table}");
            Ok(0)
        }
        Command::Gradcheck {
            cfg,
            seed,
            tol,
            report,
            out,
        } => {
            let rc = cfg.resolve()?;
            write_snapshot(&rc, out.as_deref())?;
            let rep = gradcheck_full_model(seed, tol)?;
            let text = serde_json::to_string_pretty(&rep)?;
            if let Some(path) = report {
                fs::write(path, format!("{text}\n"))?;
            }
            println!("{text}");
            Ok(if rep.pass { 0 } else { 3 })
        }
    }
}

/// Parses `args` and runs the command, mapping every outcome to an exit
/// code: 0 success, 1 invalid input, 2 I/O failure, 3 numerical failure.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

//! The eight ablation configurations and their train/evaluate sweep.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::encoder::ModelConfig;
use crate::error::Result;
use crate::predict::evaluate_corpus;
use crate::train::{train_loop, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ablation {
    pub label: &'static str,
    pub enable_ap: bool,
    pub enable_op: bool,
    pub enable_tsmtd: bool,
    pub enable_prd: bool,
}

const fn row(label: &'static str, ap: bool, op: bool, tsmtd: bool, prd: bool) -> Ablation {
    Ablation {
        label,
        enable_ap: ap,
        enable_op: op,
        enable_tsmtd: tsmtd,
        enable_prd: prd,
    }
}

pub const ABLATIONS: [Ablation; 8] = [
    row("full", true, true, true, true),
    row("w/o AP", false, true, true, true),
    row("w/o OP", true, false, true, true),
    row("w/o AP & OP", false, false, true, true),
    row("w/o TSMTD", true, true, false, true),
    row("w/o PRD", true, true, true, false),
    row("w/o TSMTD & PRD", true, true, false, false),
    row("w/o all", false, false, false, false),
];

impl Ablation {
    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        TrainConfig {
            enable_ap: self.enable_ap,
            enable_op: self.enable_op,
            enable_tsmtd: self.enable_tsmtd,
            enable_prd: self.enable_prd,
            ..base.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub label: String,
    pub seeds: Vec<u64>,
    /// Test joint F1 of the best-on-dev checkpoint, one value per seed.
    pub absa_f1: Vec<f64>,
    pub sent_acc: Vec<f64>,
    pub mean_absa_f1: f64,
    pub mean_sent_acc: f64,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Trains every configuration in `rows` once per seed and scores the
/// best-on-dev checkpoint on `test`.
pub fn run_ablation(
    train: &Corpus,
    dev: &Corpus,
    test: &Corpus,
    model_cfg: &ModelConfig,
    base: &TrainConfig,
    seeds: &[u64],
    rows: &[Ablation],
) -> Result<Vec<AblationResult>> {
    let mut results = Vec::with_capacity(rows.len());
    for ablation in rows {
        let mut absa = Vec::with_capacity(seeds.len());
        let mut sent = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let cfg = TrainConfig {
                seed,
                ..ablation.apply(base)
            };
            let outcome = train_loop(train, dev, model_cfg, &cfg)?;
            let model = outcome.best.model()?;
            let report = evaluate_corpus(&model, &outcome.best.vocab, cfg.flags(), test, 64)?;
            absa.push(report.absa_f1);
            sent.push(report.sent_acc);
        }
        results.push(AblationResult {
            label: ablation.label.to_string(),
            seeds: seeds.to_vec(),
            mean_absa_f1: mean(&absa),
            mean_sent_acc: mean(&sent),
            absa_f1: absa,
            sent_acc: sent,
        });
    }
    Ok(results)
}

/// Aligned text rendering, one configuration per line.
pub fn ablation_table(results: &[AblationResult]) -> String {
    let width = results.iter().map(|r| r.label.len()).max().unwrap_or(0).max("config".len());
    let mut out = String::new();
    writeln!(out, "{:<width$}  {:>8}  {:>8}  per-seed ABSA-F1", "config", "ABSA-F1", "sent-acc").unwrap();
    for r in results {
        let seeds: Vec<String> = r.absa_f1.iter().map(|v| format!("{:.2}", v * 100.0)).collect();
        writeln!(
            out,
            "{:<width$}  {:>8.2}  {:>8.2}  {}",
            r.label,
            r.mean_absa_f1 * 100.0,
            r.mean_sent_acc * 100.0,
            seeds.join(" ")
        )
        .unwrap();
    }
    out
}

//! Flat `section.key = value` run configuration.
//!
//! Layering is defaults, then a config file, then command-line overrides.
//! Every key is known in advance; anything else is rejected.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::SynthConfig;
use crate::encoder::ModelConfig;
use crate::error::{Error, Result};
use crate::train::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::validation(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::validation(format!("invalid value {value:?} for {key}"))),
    }
}

fn parse_opt_f64(key: &str, value: &str) -> Result<Option<f64>> {
    match value {
        "none" | "off" => Ok(None),
        v => parse(key, v).map(Some),
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let (m, t, s) = (&mut self.model, &mut self.train, &mut self.synth);
        match key {
            "model.d_h" => m.d_h = parse(key, value)?,
            "model.n_enc_layers" => m.n_enc_layers = parse(key, value)?,
            "model.n_dec_layers" => m.n_dec_layers = parse(key, value)?,
            "model.n_heads" => m.n_heads = parse(key, value)?,
            "model.ffn_dim" => m.ffn_dim = parse(key, value)?,
            "model.max_len" => m.max_len = parse(key, value)?,
            "model.dropout" => m.dropout = parse(key, value)?,
            "model.ln_eps" => m.ln_eps = parse(key, value)?,
            "train.alpha" => t.alpha = parse(key, value)?,
            "train.lr" => t.lr = parse(key, value)?,
            "train.batch_size" => t.batch_size = parse(key, value)?,
            "train.epochs" => t.epochs = parse(key, value)?,
            "train.weight_decay" => t.weight_decay = parse(key, value)?,
            "train.seed" => t.seed = parse(key, value)?,
            "train.enable_ap" => t.enable_ap = parse_bool(key, value)?,
            "train.enable_op" => t.enable_op = parse_bool(key, value)?,
            "train.enable_tsmtd" => t.enable_tsmtd = parse_bool(key, value)?,
            "train.enable_prd" => t.enable_prd = parse_bool(key, value)?,
            "train.clip_norm" => t.clip_norm = parse_opt_f64(key, value)?,
            "train.tsmtd_per_sentence" => t.tsmtd_per_sentence = parse(key, value)?,
            "synth.n_sentences" => s.n_sentences = parse(key, value)?,
            "synth.max_aspects_per_sentence" => s.max_aspects_per_sentence = parse(key, value)?,
            "synth.contrastive_fraction" => s.contrastive_fraction = parse(key, value)?,
            "synth.n_aspect_terms" => s.n_aspect_terms = parse(key, value)?,
            "synth.n_opinion_terms" => s.n_opinion_terms = parse(key, value)?,
            "synth.seed" => s.seed = parse(key, value)?,
            _ => return Err(Error::validation(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines. Blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: format!("expected key = value, got {line:?}"),
            })?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    /// Applies a `key=value` override as given on the command line.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::validation(format!("override {assignment:?} is not key=value")))?;
        self.set(key.trim(), value)
    }

    /// Every settable key with its resolved value, in a form `apply_text`
    /// reads back.
    pub fn to_text(&self) -> String {
        let (m, t, s) = (&self.model, &self.train, &self.synth);
        let clip = t.clip_norm.map_or("none".to_string(), |c| c.to_string());
        let rows: Vec<(&str, String)> = vec![
            ("model.d_h", m.d_h.to_string()),
            ("model.n_enc_layers", m.n_enc_layers.to_string()),
            ("model.n_dec_layers", m.n_dec_layers.to_string()),
            ("model.n_heads", m.n_heads.to_string()),
            ("model.ffn_dim", m.ffn_dim.to_string()),
            ("model.max_len", m.max_len.to_string()),
            ("model.dropout", m.dropout.to_string()),
            ("model.ln_eps", m.ln_eps.to_string()),
            ("train.alpha", t.alpha.to_string()),
            ("train.lr", t.lr.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.weight_decay", t.weight_decay.to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.enable_ap", t.enable_ap.to_string()),
            ("train.enable_op", t.enable_op.to_string()),
            ("train.enable_tsmtd", t.enable_tsmtd.to_string()),
            ("train.enable_prd", t.enable_prd.to_string()),
            ("train.clip_norm", clip),
            ("train.tsmtd_per_sentence", t.tsmtd_per_sentence.to_string()),
            ("synth.n_sentences", s.n_sentences.to_string()),
            ("synth.max_aspects_per_sentence", s.max_aspects_per_sentence.to_string()),
            ("synth.contrastive_fraction", s.contrastive_fraction.to_string()),
            ("synth.n_aspect_terms", s.n_aspect_terms.to_string()),
            ("synth.n_opinion_terms", s.n_opinion_terms.to_string()),
            ("synth.seed", s.seed.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in rows {
            writeln!(out, "{k} = {v}").expect("write to string");
        }
        out
    }
}

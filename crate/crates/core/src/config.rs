//! Plain-text `key = value` run configuration.
//!
//! Every key maps to one typed field. Unknown keys and unparsable values are
//! config errors carrying the line number.

use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::rescore::RescoreConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub rescore: RescoreConfig,
    /// Word types kept before the special tokens are added.
    pub vocab_cap: usize,
    pub rnn_unk_min_count: u64,
    pub train_file: String,
    pub valid_file: String,
    pub test_file: String,
    /// Config of the teacher members, for `train-student` without `--teacher`.
    pub teacher_config: Option<String>,
    /// One teacher member is trained per seed when no checkpoints are given.
    pub ensemble_seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            rescore: RescoreConfig::default(),
            vocab_cap: 10_000,
            rnn_unk_min_count: 0,
            train_file: "train.txt".into(),
            valid_file: "valid.txt".into(),
            test_file: "test.txt".into(),
            teacher_config: None,
            ensemble_seeds: Vec::new(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> std::result::Result<T, String>
where
    T::Err: Display,
{
    value
        .parse::<T>()
        .map_err(|e| format!("bad value {value:?} for {key}: {e}"))
}

fn parse_bool(key: &str, value: &str) -> std::result::Result<bool, String> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(format!("bad value {value:?} for {key}: expected true or false")),
    }
}

fn optional<T: FromStr>(key: &str, value: &str) -> std::result::Result<Option<T>, String>
where
    T::Err: Display,
{
    if value == "auto" || value.is_empty() {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn show_optional<T: Display>(v: &Option<T>) -> String {
    v.as_ref().map_or("auto".to_string(), T::to_string)
}

/// Architecture and dropout keys, shared with checkpoint metadata.
pub fn model_entries(m: &ModelConfig) -> Vec<(&'static str, String)> {
    let d = &m.dropout;
    vec![
        ("vocab_size", m.vocab_size.to_string()),
        ("embed_dim", m.embed_dim.to_string()),
        ("lstm_layers", m.lstm_layers.to_string()),
        ("hidden_dim", m.hidden_dim.to_string()),
        ("bottleneck_dim", m.bottleneck_dim.to_string()),
        ("num_experts", m.num_experts.to_string()),
        ("tie_embeddings", m.tie_embeddings.to_string()),
        ("expert_dim", show_optional(&m.expert_dim)),
        ("bottleneck", m.bottleneck.to_string()),
        ("input_rate", d.input_rate.to_string()),
        ("output_rate", d.output_rate.to_string()),
        ("hidden_rate", d.hidden_rate.to_string()),
        ("embed_rate", d.embed_rate.to_string()),
        ("other_rate", d.other_rate.to_string()),
        ("ar_weight", d.ar_weight.to_string()),
        ("tar_weight", d.tar_weight.to_string()),
    ]
}

/// Sets one model key. `Ok(false)` when the key is not a model key.
pub fn set_model_key(m: &mut ModelConfig, key: &str, value: &str) -> std::result::Result<bool, String> {
    let d = &mut m.dropout;
    match key {
        "vocab_size" => m.vocab_size = parse(key, value)?,
        "embed_dim" => m.embed_dim = parse(key, value)?,
        "lstm_layers" => m.lstm_layers = parse(key, value)?,
        "hidden_dim" => m.hidden_dim = parse(key, value)?,
        "bottleneck_dim" => m.bottleneck_dim = parse(key, value)?,
        "num_experts" => m.num_experts = parse(key, value)?,
        "tie_embeddings" => m.tie_embeddings = parse_bool(key, value)?,
        "expert_dim" => m.expert_dim = optional(key, value)?,
        "bottleneck" => m.bottleneck = parse(key, value)?,
        "input_rate" => d.input_rate = parse(key, value)?,
        "output_rate" => d.output_rate = parse(key, value)?,
        "hidden_rate" => d.hidden_rate = parse(key, value)?,
        "embed_rate" => d.embed_rate = parse(key, value)?,
        "other_rate" => d.other_rate = parse(key, value)?,
        "ar_weight" => d.ar_weight = parse(key, value)?,
        "tar_weight" => d.tar_weight = parse(key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

impl RunConfig {
    /// Every key with its current value, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let t = &self.train;
        let r = &self.rescore;
        let mut out = model_entries(&self.model);
        out.extend([
            ("loss", t.loss.variant.to_string()),
            ("alpha", t.loss.alpha.to_string()),
            ("temperature", t.loss.temperature.to_string()),
            ("lr", t.lr.to_string()),
            ("grad_clip", t.grad_clip.to_string()),
            ("epochs", t.epochs.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("bptt_len", t.bptt_len.to_string()),
            ("seed", t.seed.to_string()),
            ("asgd_trigger_patience", t.asgd_trigger_patience.to_string()),
            ("lr_decay_on_plateau", t.lr_decay_on_plateau.to_string()),
            ("lm_weight", r.lm_weight.to_string()),
            ("word_insertion_penalty", r.word_insertion_penalty.to_string()),
            ("oov_mode", r.oov_mode.to_string()),
            ("vocab_cap", self.vocab_cap.to_string()),
            ("rnn_unk_min_count", self.rnn_unk_min_count.to_string()),
            ("train_file", self.train_file.clone()),
            ("valid_file", self.valid_file.clone()),
            ("test_file", self.test_file.clone()),
            ("teacher_config", self.teacher_config.clone().unwrap_or_default()),
            (
                "ensemble_seeds",
                self.ensemble_seeds
                    .iter()
                    .map(u64::to_string)
                    .collect::<Vec<_>>()
                    .join(","),
            ),
        ]);
        out
    }

    pub fn keys() -> Vec<&'static str> {
        RunConfig::default().entries().into_iter().map(|(k, _)| k).collect()
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        if set_model_key(&mut self.model, key, value)? {
            return Ok(());
        }
        let t = &mut self.train;
        let r = &mut self.rescore;
        match key {
            "loss" => t.loss.variant = parse(key, value)?,
            "alpha" => t.loss.alpha = parse(key, value)?,
            "temperature" => t.loss.temperature = parse(key, value)?,
            "lr" => t.lr = parse(key, value)?,
            "grad_clip" => t.grad_clip = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "bptt_len" => t.bptt_len = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "asgd_trigger_patience" => t.asgd_trigger_patience = parse(key, value)?,
            "lr_decay_on_plateau" => t.lr_decay_on_plateau = parse(key, value)?,
            "lm_weight" => r.lm_weight = parse(key, value)?,
            "word_insertion_penalty" => r.word_insertion_penalty = parse(key, value)?,
            "oov_mode" => r.oov_mode = parse(key, value)?,
            "vocab_cap" => self.vocab_cap = parse(key, value)?,
            "rnn_unk_min_count" => self.rnn_unk_min_count = parse(key, value)?,
            "train_file" => self.train_file = value.to_string(),
            "valid_file" => self.valid_file = value.to_string(),
            "test_file" => self.test_file = value.to_string(),
            "teacher_config" => self.teacher_config = Some(value.to_string()).filter(|v| !v.is_empty()),
            "ensemble_seeds" => {
                self.ensemble_seeds = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| parse(key, s))
                    .collect::<std::result::Result<_, _>>()?
            }
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Applies `key = value` lines over `self`. Blank lines and `#` comments
    /// are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config_at(i + 1, format!("expected key = value, got {line:?}")))?;
            self.set(k.trim(), v.trim())
                .map_err(|msg| Error::config_at(i + 1, msg))?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies `key=value` overrides, as given on the command line.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::config(format!("override {o:?} is not key=value")))?;
            self.set(k.trim(), v.trim())
                .map_err(|msg| Error::config(format!("override {o:?}: {msg}")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.rescore.validate()?;
        if self.vocab_cap < 4 {
            return Err(Error::config(format!(
                "vocab_cap must be at least 4, got {}",
                self.vocab_cap
            )));
        }
        Ok(())
    }

    /// Canonical text form; parses back to an equal config.
    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

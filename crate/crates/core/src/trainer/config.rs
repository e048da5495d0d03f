use std::fmt::Write as _;
use std::path::Path;

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::objectives::{parse_similarity, similarity_name, ContrastiveOptions, ObjectiveConfig, SimilarityKind};

use super::OptimizerKind;

/// Everything one pretraining run depends on besides the corpus.
///
/// Stored as a flat `key=value` file; `#` starts a comment. `vocab_size` 0
/// means "take it from the vocabulary".
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub steps: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub optimizer: OptimizerKind,
    pub batch_pairs: usize,
    pub chunk_pairs: usize,
    pub window: usize,
    pub mask_rate: f64,
    pub similarity: Option<SimilarityKind>,
    pub condenser: bool,
    pub temperature: f64,
    pub literal_indicator: bool,
    pub encoder: EncoderConfig,
    /// Write wall-clock seconds into the log instead of 0.
    pub log_timing: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut encoder = EncoderConfig::new(0);
        encoder.max_len = 33;
        RunConfig {
            seed: 0,
            steps: 300,
            learning_rate: 1e-3,
            warmup_steps: 0,
            optimizer: OptimizerKind::Adam,
            batch_pairs: 16,
            chunk_pairs: 4,
            window: 32,
            mask_rate: crate::tokenizer::DEFAULT_MASK_RATE,
            similarity: Some(SimilarityKind::MaxSim),
            condenser: true,
            temperature: 1.0,
            literal_indicator: false,
            encoder,
            log_timing: false,
        }
    }
}

pub const CONFIG_KEYS: &[&str] = &[
    "seed",
    "steps",
    "learning_rate",
    "warmup_steps",
    "optimizer",
    "batch_pairs",
    "chunk_pairs",
    "window",
    "mask_rate",
    "similarity",
    "condenser",
    "temperature",
    "literal_indicator",
    "num_layers",
    "hidden_dim",
    "num_heads",
    "ff_dim",
    "vocab_size",
    "max_len",
    "middle_layer",
    "condenser_layers",
    "normalize_tokens",
    "precision",
    "log_timing",
];

/// Sets an encoder key; `false` if `key` is not one.
pub(crate) fn set_encoder_key(e: &mut EncoderConfig, key: &str, v: &str) -> Result<bool> {
    match key {
        "num_layers" => e.num_layers = parse_num(key, v)?,
        "hidden_dim" => e.hidden_dim = parse_num(key, v)?,
        "num_heads" => e.num_heads = parse_num(key, v)?,
        "ff_dim" => e.ff_dim = parse_num(key, v)?,
        "vocab_size" => e.vocab_size = parse_num(key, v)?,
        "max_len" => e.max_len = parse_num(key, v)?,
        "middle_layer" => e.middle_layer = parse_num(key, v)?,
        "condenser_layers" => e.condenser_layers = parse_num(key, v)?,
        "normalize_tokens" => e.normalize_tokens = parse_flag(key, v)?,
        "precision" => {
            if !matches!(v, "f64" | "64") {
                return Err(Error::contract(format!(
                    "precision '{v}' is not supported; only f64 is implemented"
                )));
            }
        }
        _ => return Ok(false),
    }
    Ok(true)
}

/// Feeds each `key=value` line to `set`; `#` starts a comment. Errors are
/// prefixed with `line N:`.
pub(crate) fn parse_kv(text: &str, mut set: impl FnMut(&str, &str) -> Result<()>) -> Result<()> {
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::contract(format!("line {}: expected key=value, got '{line}'", i + 1)))?;
        set(k.trim(), v.trim()).map_err(|e| Error::contract(format!("line {}: {e}", i + 1)))?;
    }
    Ok(())
}

/// Reads a file with `parse`, turning `line N:` contract errors into parse
/// errors that name the file.
pub(crate) fn read_kv<T>(path: &Path, parse: impl FnOnce(&str) -> Result<T>) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse(&text).map_err(|e| match e {
        Error::Contract(msg) => Error::Parse {
            path: path.to_path_buf(),
            line: msg
                .strip_prefix("line ")
                .and_then(|s| s.split(':').next())
                .and_then(|n| n.parse().ok())
                .unwrap_or(0),
            msg,
        },
        other => other,
    })
}

pub(crate) fn parse_flag(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "on" | "true" | "1" | "yes" => Ok(true),
        "off" | "false" | "0" | "no" => Ok(false),
        _ => Err(Error::contract(format!("{key}: expected on/off, got '{value}'"))),
    }
}

pub(crate) fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::contract(format!("{key}: cannot parse '{value}'")))
}

pub(crate) fn on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

impl RunConfig {
    /// Sets one key. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "seed" => self.seed = parse_num(key, v)?,
            "steps" => self.steps = parse_num(key, v)?,
            "learning_rate" => self.learning_rate = parse_num(key, v)?,
            "warmup_steps" => self.warmup_steps = parse_num(key, v)?,
            "optimizer" => self.optimizer = v.parse()?,
            "batch_pairs" => self.batch_pairs = parse_num(key, v)?,
            "chunk_pairs" => self.chunk_pairs = parse_num(key, v)?,
            "window" => self.window = parse_num(key, v)?,
            "mask_rate" => self.mask_rate = parse_num(key, v)?,
            "similarity" => self.similarity = parse_similarity(v)?,
            "condenser" => self.condenser = parse_flag(key, v)?,
            "temperature" => self.temperature = parse_num(key, v)?,
            "literal_indicator" => self.literal_indicator = parse_flag(key, v)?,
            "log_timing" => self.log_timing = parse_flag(key, v)?,
            other => {
                if !set_encoder_key(&mut self.encoder, other, v)? {
                    return Err(Error::contract(format!("unknown config key '{other}'")));
                }
            }
        }
        Ok(())
    }

    /// Parses `key=value` lines on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        parse_kv(text, |k, v| cfg.set(k, v))?;
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        read_kv(path, RunConfig::parse)
    }

    pub fn to_kv(&self) -> String {
        let e = &self.encoder;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k}={v}");
        };
        kv("seed", self.seed.to_string());
        kv("steps", self.steps.to_string());
        kv("learning_rate", self.learning_rate.to_string());
        kv("warmup_steps", self.warmup_steps.to_string());
        kv("optimizer", self.optimizer.to_string());
        kv("batch_pairs", self.batch_pairs.to_string());
        kv("chunk_pairs", self.chunk_pairs.to_string());
        kv("window", self.window.to_string());
        kv("mask_rate", self.mask_rate.to_string());
        kv("similarity", similarity_name(self.similarity).to_string());
        kv("condenser", on_off(self.condenser).to_string());
        kv("temperature", self.temperature.to_string());
        kv("literal_indicator", on_off(self.literal_indicator).to_string());
        kv("num_layers", e.num_layers.to_string());
        kv("hidden_dim", e.hidden_dim.to_string());
        kv("num_heads", e.num_heads.to_string());
        kv("ff_dim", e.ff_dim.to_string());
        kv("vocab_size", e.vocab_size.to_string());
        kv("max_len", e.max_len.to_string());
        kv("middle_layer", e.middle_layer.to_string());
        kv("condenser_layers", e.condenser_layers.to_string());
        kv("normalize_tokens", on_off(e.normalize_tokens).to_string());
        kv("precision", "f64".to_string());
        kv("log_timing", on_off(self.log_timing).to_string());
        out
    }

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            similarity: self.similarity,
            condenser: self.condenser,
            contrastive: ContrastiveOptions {
                temperature: self.temperature,
                literal_indicator: self.literal_indicator,
            },
        }
    }

    /// The encoder config with `vocab_size` filled in from the vocabulary.
    pub fn encoder_for(&self, vocab_size: usize) -> Result<EncoderConfig> {
        let mut e = self.encoder.clone();
        if e.vocab_size == 0 {
            e.vocab_size = vocab_size;
        } else if e.vocab_size != vocab_size {
            return Err(Error::contract(format!(
                "config vocab_size {} disagrees with the vocabulary ({vocab_size})",
                e.vocab_size
            )));
        }
        e.validate()?;
        Ok(e)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::contract(m));
        if self.steps == 0 {
            return fail("steps must be at least 1".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return fail(format!(
                "learning_rate {} must be a finite value >= 0",
                self.learning_rate
            ));
        }
        if self.batch_pairs == 0 || self.chunk_pairs == 0 || self.batch_pairs % self.chunk_pairs != 0 {
            return fail(format!(
                "chunk_pairs {} must divide batch_pairs {}",
                self.chunk_pairs, self.batch_pairs
            ));
        }
        if self.window == 0 || self.encoder.max_len < self.window + 1 {
            return fail(format!(
                "max_len {} must hold CLS plus a window of {}",
                self.encoder.max_len, self.window
            ));
        }
        if !(0.0..=1.0).contains(&self.mask_rate) {
            return fail(format!("mask_rate {} outside [0, 1]", self.mask_rate));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return fail(format!("temperature {} must be positive", self.temperature));
        }
        if self.condenser && self.encoder.condenser_layers == 0 {
            return fail("condenser=on needs condenser_layers >= 1".into());
        }
        let mut e = self.encoder.clone();
        e.vocab_size = e.vocab_size.max(crate::tokenizer::NUM_RESERVED);
        e.validate()
    }
}

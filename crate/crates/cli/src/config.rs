//! `key = value` configuration with dotted sections.
//!
//! ```text
//! # comments start with '#'
//! dataset.preset = synth
//! dataset.dims.covarep = 74
//! train.epochs = 30
//! train.d_model = 64
//! eval.n_prime = 3
//! paths.manifest = data/manifest.tsv
//! synth.cue_magnitude = 1.5
//! synth.dropout.face = 0.15
//! ```
//!
//! Absent keys keep their defaults; unknown keys are rejected.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use mmfuse::datamodel::{preset_config, preset_defaults, PresetDims};
use mmfuse::evaluation::EvalConfig;
use mmfuse::synthgen::{PresenceDropout, SynthSpec};
use mmfuse::training::TrainConfig;
use mmfuse::{Error, ModalityDescriptor, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PathsConfig {
    pub manifest: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub preset: String,
    pub dims: PresetDims,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub n_prime: Option<usize>,
    pub paths: PathsConfig,
    pub synth: SynthSpec,
}

impl Default for Config {
    fn default() -> Self {
        let mut cfg = Self {
            preset: "synth".into(),
            dims: PresetDims::new(),
            train: TrainConfig::default(),
            eval: TrainConfig::default().eval_config(),
            n_prime: None,
            paths: PathsConfig { manifest: None, output: None, checkpoint: None },
            synth: SynthSpec::default(),
        };
        let defaults = preset_defaults("synth").expect("synth preset");
        cfg.train.window_seconds = defaults.window_seconds;
        cfg.train.gate_modality = defaults.gate_modality;
        cfg.eval = cfg.train.eval_config();
        cfg
    }
}

impl Config {
    pub fn modalities(&self) -> Result<Vec<ModalityDescriptor>> {
        preset_config(&self.preset, &self.dims)
    }
}

/// One parsed assignment.
struct Entry<'a> {
    line: usize,
    key: &'a str,
    value: &'a str,
}

impl Entry<'_> {
    fn parse<T: FromStr>(&self) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.value.parse().map_err(|e: T::Err| Error::Parse {
            line: self.line,
            message: format!("{} = {:?}: {e}", self.key, self.value),
        })
    }

    fn flag(&self) -> Result<bool> {
        match self.value {
            "true" | "yes" | "on" | "1" => Ok(true),
            "false" | "no" | "off" | "0" => Ok(false),
            _ => Err(Error::Parse { line: self.line, message: format!("{} expects true or false, got {:?}", self.key, self.value) }),
        }
    }

    fn optional_name(&self) -> Option<String> {
        match self.value {
            "" | "none" => None,
            v => Some(v.to_string()),
        }
    }
}

fn lines(text: &str) -> Result<Vec<Entry<'_>>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: i + 1,
            message: format!("expected `key = value`, got {line:?}"),
        })?;
        out.push(Entry { line: i + 1, key: key.trim(), value: value.trim() });
    }
    Ok(out)
}

pub fn load_config(path: impl AsRef<Path>) -> Result<Config> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
    parse_config(&text)
}

pub fn parse_config(text: &str) -> Result<Config> {
    let entries = lines(text)?;
    let mut cfg = Config::default();

    // The preset decides the window and gate defaults, so read it first.
    if let Some(e) = entries.iter().rev().find(|e| e.key == "dataset.preset") {
        cfg.preset = e.value.to_string();
        let defaults = preset_defaults(&cfg.preset)?;
        cfg.train.window_seconds = defaults.window_seconds;
        cfg.train.gate_modality = defaults.gate_modality;
    }
    let (mut eval_window, mut eval_threshold, mut eval_gate) = (None, None, None);

    for e in &entries {
        let t = &mut cfg.train;
        let m = &mut t.model;
        let s = &mut cfg.synth;
        match e.key {
            "dataset.preset" => {}
            "train.lr" => t.base_lr = e.parse()?,
            "train.epochs" => t.epochs = e.parse()?,
            "train.batch_size" => t.batch_size = e.parse()?,
            "train.weight_decay" => t.optimizer.weight_decay = e.parse()?,
            "train.beta1" => t.optimizer.beta1 = e.parse()?,
            "train.beta2" => t.optimizer.beta2 = e.parse()?,
            "train.eps" => t.optimizer.eps = e.parse()?,
            "train.window_seconds" => t.window_seconds = e.parse()?,
            "train.seed" => t.seed = e.parse()?,
            "train.presence_threshold" => t.presence_threshold = e.parse()?,
            "train.gate_modality" => t.gate_modality = e.optional_name(),
            "train.class_weighting" => t.class_weighting = e.flag()?,
            "train.d_model" => m.d_model = e.parse()?,
            "train.layers" => m.layers = e.parse()?,
            "train.heads" => m.heads = e.parse()?,
            "train.ff_mult" => m.ff_mult = e.parse()?,
            "train.dropout" => m.dropout = e.parse()?,
            "train.token_layers" => m.token_layers = e.parse()?,
            "train.token_heads" => m.token_heads = e.parse()?,
            "train.init_std" => m.init_std = e.parse()?,
            "eval.window_seconds" => eval_window = Some(e.parse()?),
            "eval.presence_threshold" => eval_threshold = Some(e.parse()?),
            "eval.gate_modality" => eval_gate = Some(e.optional_name()),
            "eval.n_prime" => cfg.n_prime = Some(e.parse()?),
            "paths.manifest" => cfg.paths.manifest = Some(e.value.into()),
            "paths.output" => cfg.paths.output = Some(e.value.into()),
            "paths.checkpoint" => cfg.paths.checkpoint = Some(e.value.into()),
            "synth.n_train" => s.n_train = e.parse()?,
            "synth.n_val" => s.n_val = e.parse()?,
            "synth.n_test" => s.n_test = e.parse()?,
            "synth.min_seconds" => s.min_seconds = e.parse()?,
            "synth.max_seconds" => s.max_seconds = e.parse()?,
            "synth.cue_modality" => s.cue.modality = e.value.to_string(),
            "synth.cue_magnitude" => s.cue.magnitude = e.parse()?,
            "synth.cue_fraction" => s.cue.fraction = e.parse()?,
            "synth.cue_channels" => s.cue.channels = e.parse()?,
            "synth.noise" => s.noise = e.parse()?,
            "synth.seed" => s.seed = e.parse()?,
            "synth.burst_seconds" => {
                let burst: f64 = e.parse()?;
                s.dropout.iter_mut().for_each(|(_, d)| d.burst_seconds = burst);
            }
            key => {
                if let Some(name) = key.strip_prefix("dataset.dims.") {
                    cfg.dims.insert(name.to_string(), e.parse()?);
                } else if let Some(name) = key.strip_prefix("synth.dropout.") {
                    let rate: f64 = e.parse()?;
                    match s.dropout.iter_mut().find(|(n, _)| n == name) {
                        Some((_, d)) => d.rate = rate,
                        None => s.dropout.push((name.to_string(), PresenceDropout { rate, burst_seconds: 1.5 })),
                    }
                } else {
                    return Err(Error::Config(format!("unknown configuration key {key:?} (line {})", e.line)));
                }
            }
        }
    }

    cfg.eval = EvalConfig {
        window_seconds: eval_window.unwrap_or(cfg.train.window_seconds),
        presence_threshold: eval_threshold.unwrap_or(cfg.train.presence_threshold),
        gate_modality: eval_gate.unwrap_or_else(|| cfg.train.gate_modality.clone()),
    };
    cfg.train.validate()?;
    if cfg.eval.window_seconds.is_nan() || cfg.eval.window_seconds <= 0.0 {
        return Err(Error::Config("eval.window_seconds must be positive".into()));
    }
    if cfg.n_prime == Some(0) {
        return Err(Error::Config("eval.n_prime must be at least 1".into()));
    }
    cfg.synth.validate()?;
    // Fails early on an unknown preset or missing dimensions.
    cfg.modalities()?;
    Ok(cfg)
}

//! Flat `key=value` run configuration covering the model, synthetic task,
//! training, streaming and evaluation settings.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::encoder::ModelConfig;
use crate::error::{Error, Result};
use crate::streaming::{EndpointConfig, OutputMode};
use crate::synth::SynthTaskSpec;
use crate::train::TrainSpec;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub synth: SynthTaskSpec,
    pub train: TrainSpec,
    pub endpoint: EndpointConfig,
    /// Seed of the parameter initialisation.
    pub model_seed: u64,
    pub threads: usize,
    pub frame_shift_ms: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            synth: SynthTaskSpec::default(),
            train: TrainSpec::default(),
            endpoint: EndpointConfig::default(),
            model_seed: 1,
            threads: 2,
            frame_shift_ms: 10.0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

impl RunConfig {
    /// Sets one key. `seed` seeds both initialisation and training;
    /// `vocab_size`, `feat_dim` and `max_iters` are shared by every section.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "layers" => self.model.layers = parse(key, v)?,
            "heads" => self.model.heads = parse(key, v)?,
            "d_model" => self.model.d_model = parse(key, v)?,
            "block_len" => self.model.block_len = parse(key, v)?,
            "subsample" => self.model.subsample = parse(key, v)?,
            "positional_encoding" => self.model.positional_encoding = parse(key, v)?,
            "vocab_size" => {
                self.model.vocab_size = parse(key, v)?;
                self.synth.vocab_size = self.model.vocab_size;
            }
            "feat_dim" => {
                self.model.feat_dim = parse(key, v)?;
                self.synth.feat_dim = self.model.feat_dim;
            }
            "max_iters" => {
                self.model.max_iters = parse(key, v)?;
                self.endpoint.max_iters = self.model.max_iters;
            }
            "frames_per_token_min" => self.synth.frames_per_token.0 = parse(key, v)?,
            "frames_per_token_max" => self.synth.frames_per_token.1 = parse(key, v)?,
            "frame_unit" => self.synth.frame_unit = parse(key, v)?,
            "noise_std" => self.synth.noise_std = parse(key, v)?,
            "silence_std" => self.synth.silence_std = parse(key, v)?,
            "pad_min" => self.synth.pad_units.0 = parse(key, v)?,
            "pad_max" => self.synth.pad_units.1 = parse(key, v)?,
            "gap_min" => self.synth.gap_units.0 = parse(key, v)?,
            "gap_max" => self.synth.gap_units.1 = parse(key, v)?,
            "length_min" => self.synth.length.0 = parse(key, v)?,
            "length_max" => self.synth.length.1 = parse(key, v)?,
            "train_utterances" => self.synth.train_utterances = parse(key, v)?,
            "test_utterances" => self.synth.test_utterances = parse(key, v)?,
            "synth_seed" => self.synth.seed = parse(key, v)?,
            "optimizer" => self.train.optimizer = parse(key, v)?,
            "epochs" => self.train.epochs = parse(key, v)?,
            "batch_size" => self.train.batch_size = parse(key, v)?,
            "learning_rate" => self.train.learning_rate = parse(key, v)?,
            "lambda" => self.train.lambda = parse(key, v)?,
            "clip_norm" => self.train.clip_norm = parse(key, v)?,
            "warmup_fraction" => self.train.warmup_fraction = parse(key, v)?,
            "decay" => self.train.decay = parse(key, v)?,
            "target_loss" => {
                self.train.target_loss = if v == "none" { None } else { Some(parse(key, v)?) }
            }
            "seed" => {
                self.model_seed = parse(key, v)?;
                self.train.seed = self.model_seed;
            }
            "tau" => self.endpoint.tau = parse(key, v)?,
            "max_segment" => self.endpoint.max_segment = parse(key, v)?,
            "output" => self.endpoint.output = parse(key, v)?,
            "threads" => self.threads = parse(key, v)?,
            "frame_shift_ms" => self.frame_shift_ms = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Applies every `key=value` line; blank lines and `#` comments are
    /// skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.synth.validate()?;
        self.train.validate()?;
        self.endpoint.validate(self.model.block_len)?;
        if self.synth.vocab_size != self.model.vocab_size || self.synth.feat_dim != self.model.feat_dim {
            return Err(Error::Config("synthetic task and model disagree on vocabulary or features".into()));
        }
        if self.threads == 0 {
            return Err(Error::Config("threads must be >= 1".into()));
        }
        if !(self.frame_shift_ms > 0.0 && self.frame_shift_ms.is_finite()) {
            return Err(Error::Config("frame_shift_ms must be positive".into()));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let m = &self.model;
        let s = &self.synth;
        let t = &self.train;
        let e = &self.endpoint;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k}={v}");
        };
        kv("layers", m.layers.to_string());
        kv("heads", m.heads.to_string());
        kv("d_model", m.d_model.to_string());
        kv("block_len", m.block_len.to_string());
        kv("subsample", m.subsample.to_string());
        kv("feat_dim", m.feat_dim.to_string());
        kv("vocab_size", m.vocab_size.to_string());
        kv("max_iters", m.max_iters.to_string());
        kv("positional_encoding", m.positional_encoding.to_string());
        kv("frames_per_token_min", s.frames_per_token.0.to_string());
        kv("frames_per_token_max", s.frames_per_token.1.to_string());
        kv("frame_unit", s.frame_unit.to_string());
        kv("noise_std", s.noise_std.to_string());
        kv("silence_std", s.silence_std.to_string());
        kv("pad_min", s.pad_units.0.to_string());
        kv("pad_max", s.pad_units.1.to_string());
        kv("gap_min", s.gap_units.0.to_string());
        kv("gap_max", s.gap_units.1.to_string());
        kv("length_min", s.length.0.to_string());
        kv("length_max", s.length.1.to_string());
        kv("train_utterances", s.train_utterances.to_string());
        kv("test_utterances", s.test_utterances.to_string());
        kv("synth_seed", s.seed.to_string());
        kv("optimizer", t.optimizer.to_string());
        kv("epochs", t.epochs.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("learning_rate", t.learning_rate.to_string());
        kv("lambda", t.lambda.to_string());
        kv("clip_norm", t.clip_norm.to_string());
        kv("warmup_fraction", t.warmup_fraction.to_string());
        kv("decay", t.decay.to_string());
        kv(
            "target_loss",
            t.target_loss.map_or("none".to_string(), |x| x.to_string()),
        );
        kv("seed", self.model_seed.to_string());
        kv("tau", e.tau.to_string());
        kv("max_segment", e.max_segment.to_string());
        kv(
            "output",
            match e.output {
                OutputMode::Insertion => "insertion".into(),
                OutputMode::Ctc => "ctc".into(),
            },
        );
        kv("threads", self.threads.to_string());
        kv("frame_shift_ms", self.frame_shift_ms.to_string());
        out
    }
}

//! Training configuration as `key=value` text.

use std::fmt::Write as _;
use std::path::PathBuf;

use crate::csa::{CsaConfig, Reduction};
use crate::error::{bail, Error, Result};
use crate::losses::LossWeights;
use crate::model::{BnSettings, ModelSpec, Setting};
use crate::nn::ModalityId;

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    /// Default synthetic task with this many geometries per modality.
    Synthetic { geometries: usize },
    /// A directory written by `gen-data` (manifest plus `m0/`, `m1/`).
    Dir(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub setting: Setting,
    pub weights: LossWeights,
    pub csa: CsaConfig,
    pub dice_include_background: bool,
    pub lr: f64,
    /// Fractional decay applied every `lr_decay_every` iterations.
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub batch_size: usize,
    /// Drop probability.
    pub dropout: f64,
    pub iterations: usize,
    pub seed: u64,
    pub data: DataSource,
    /// 0 disables periodic checkpoints; the final one is always written.
    pub checkpoint_every: usize,
    pub model: ModelSpec,
    pub bn: BnSettings,
    /// Train a single stream only (run-equivalence checks).
    pub solo_stream: Option<ModalityId>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            setting: Setting::Csa,
            weights: LossWeights::default(),
            csa: CsaConfig::default(),
            dice_include_background: true,
            lr: 1e-4,
            lr_decay: 0.05,
            lr_decay_every: 1000,
            batch_size: 8,
            dropout: 0.75,
            iterations: 2000,
            seed: 7,
            data: DataSource::Synthetic { geometries: 40 },
            checkpoint_every: 0,
            model: ModelSpec::default(),
            bn: BnSettings::default(),
            solo_stream: None,
        }
    }
}

fn parse<F: std::str::FromStr>(key: &str, v: &str) -> Result<F> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => bail!(Config, "{key}: expected true/false, got {v:?}"),
    }
}

pub const MODEL_PREFIX: &str = "model.";

impl TrainConfig {
    /// Every accepted key, in echo order.
    pub const KEYS: [&'static str; 22] = [
        "setting",
        "alpha",
        "beta_ce",
        "lambda_csa",
        "csa_layers",
        "csa_include_background",
        "csa_reduction",
        "dice_include_background",
        "lr",
        "lr_decay",
        "lr_decay_every",
        "batch_size",
        "dropout",
        "iterations",
        "seed",
        "geometries",
        "data_dir",
        "checkpoint_every",
        "bn_epsilon",
        "bn_momentum",
        "solo_stream",
        "model.<key>",
    ];

    /// The affinity options actually used by the configured setting.
    pub fn effective_csa(&self) -> CsaConfig {
        CsaConfig {
            class_agnostic: self.setting == Setting::Affinity,
            ..self.csa
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "setting" => self.setting = v.parse()?,
            "alpha" => self.weights.alpha = parse(key, v)?,
            "beta_ce" => self.weights.beta_ce = parse(key, v)?,
            "lambda_csa" => self.weights.lambda_csa = parse(key, v)?,
            "csa_layers" => {
                let (l, k) = v
                    .split_once(',')
                    .ok_or_else(|| Error::Config(format!("csa_layers: expected l,k, got {v:?}")))?;
                self.csa.layer_pair = (parse(key, l)?, parse(key, k)?);
            }
            "csa_include_background" => self.csa.include_background = parse_bool(key, v)?,
            "csa_reduction" => self.csa.reduction = v.parse::<Reduction>()?,
            "dice_include_background" => self.dice_include_background = parse_bool(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "lr_decay" => self.lr_decay = parse(key, v)?,
            "lr_decay_every" => self.lr_decay_every = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "dropout" => self.dropout = parse(key, v)?,
            "iterations" => self.iterations = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "geometries" => self.data = DataSource::Synthetic { geometries: parse(key, v)? },
            "data_dir" => self.data = DataSource::Dir(PathBuf::from(v)),
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "bn_epsilon" => self.bn.epsilon = parse(key, v)?,
            "bn_momentum" => self.bn.momentum = parse(key, v)?,
            "solo_stream" => {
                self.solo_stream = match v {
                    "none" => None,
                    _ => Some(ModalityId::new(parse(key, v)?)?),
                }
            }
            k => match k.strip_prefix(MODEL_PREFIX) {
                Some(mk) if self.model.set(mk, v)? => {}
                _ => bail!(Config, "unknown config key {k:?}"),
            },
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got {pair:?}")))?;
        self.set(k, v)
    }

    /// Parses a config file over the defaults. `#` starts a comment.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            cfg.set_pair(line)
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            bail!(Config, "lr must be positive, got {}", self.lr);
        }
        if !(0.0..1.0).contains(&self.lr_decay) || self.lr_decay_every == 0 {
            bail!(Config, "lr decay {} every {} invalid", self.lr_decay, self.lr_decay_every);
        }
        if self.batch_size == 0 || self.iterations == 0 {
            bail!(Config, "batch_size and iterations must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            bail!(Config, "dropout rate {} outside [0,1)", self.dropout);
        }
        if let DataSource::Synthetic { geometries: 0 } = self.data {
            bail!(Config, "geometries must be positive");
        }
        self.weights.validate()?;
        self.model.validate()?;
        self.csa.validate(self.model.groups())?;
        Ok(())
    }

    /// Full key listing with current values.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let (l, k) = self.csa.layer_pair;
        let _ = writeln!(s, "setting={}", self.setting);
        let _ = writeln!(s, "alpha={:?}", self.weights.alpha);
        let _ = writeln!(s, "beta_ce={:?}", self.weights.beta_ce);
        let _ = writeln!(s, "lambda_csa={:?}", self.weights.lambda_csa);
        let _ = writeln!(s, "csa_layers={l},{k}");
        let _ = writeln!(s, "csa_include_background={}", self.csa.include_background);
        let _ = writeln!(s, "csa_reduction={}", self.csa.reduction);
        let _ = writeln!(s, "dice_include_background={}", self.dice_include_background);
        let _ = writeln!(s, "lr={:?}", self.lr);
        let _ = writeln!(s, "lr_decay={:?}", self.lr_decay);
        let _ = writeln!(s, "lr_decay_every={}", self.lr_decay_every);
        let _ = writeln!(s, "batch_size={}", self.batch_size);
        let _ = writeln!(s, "dropout={:?}", self.dropout);
        let _ = writeln!(s, "iterations={}", self.iterations);
        let _ = writeln!(s, "seed={}", self.seed);
        match &self.data {
            DataSource::Synthetic { geometries } => {
                let _ = writeln!(s, "geometries={geometries}");
            }
            DataSource::Dir(p) => {
                let _ = writeln!(s, "data_dir={}", p.display());
            }
        }
        let _ = writeln!(s, "checkpoint_every={}", self.checkpoint_every);
        let _ = writeln!(s, "bn_epsilon={:?}", self.bn.epsilon);
        let _ = writeln!(s, "bn_momentum={:?}", self.bn.momentum);
        let _ = writeln!(
            s,
            "solo_stream={}",
            self.solo_stream.map_or("none".to_string(), |m| m.index().to_string())
        );
        for line in self.model.to_text().lines() {
            let _ = writeln!(s, "{MODEL_PREFIX}{line}");
        }
        s
    }
}

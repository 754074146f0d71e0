use std::fmt::Write as _;
use std::path::Path;

use super::{TrainConfig, DEFAULT_FOLDS, DEFAULT_PARTICIPANTS};
use crate::corpus::parse_key_values;
use crate::error::{Error, Result};
use crate::models::{Modality, ModelConfig};
use crate::nn::derive_seed;
use crate::timecond::{Strategy, DEFAULT_EMBED_BASE, DEFAULT_EMBED_DIM};

/// A sweep over modalities and conditioning strategies.
///
/// Read from `key = value` lines; lists are comma-separated. Repeat seeds
/// are `seeds` when given, otherwise derived from `seed`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub modalities: Vec<Modality>,
    pub strategies: Vec<Strategy>,
    pub seed: u64,
    pub seeds: Option<Vec<u64>>,
    pub repeats: usize,
    pub folds: usize,
    pub participants: usize,
    pub train: TrainConfig,
    pub dropout: f64,
    pub embed_dim: usize,
    pub embed_base: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            modalities: Modality::ALL.to_vec(),
            strategies: Strategy::ALL.to_vec(),
            seed: 0,
            seeds: None,
            repeats: 4,
            folds: DEFAULT_FOLDS,
            participants: DEFAULT_PARTICIPANTS,
            train: TrainConfig::default(),
            dropout: 0.1,
            embed_dim: DEFAULT_EMBED_DIM,
            embed_base: DEFAULT_EMBED_BASE,
        }
    }
}

fn list<T>(raw: &str, parse: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    raw.split(',').map(str::trim).filter(|s| !s.is_empty()).map(parse).collect()
}

fn number<T: std::str::FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::Config(format!("`{key}` has an invalid value `{raw}`")))
}

impl ExperimentConfig {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let map = parse_key_values(text, path)?;
        let mut cfg = Self::default();
        for (key, raw) in &map {
            match key.as_str() {
                "modality" | "modalities" => cfg.modalities = list(raw, str::parse)?,
                "conditioning" | "strategies" => cfg.strategies = list(raw, str::parse)?,
                "seed" => cfg.seed = number(key, raw)?,
                "seeds" => cfg.seeds = Some(list(raw, |s| number(key, s))?),
                "repeats" => cfg.repeats = number(key, raw)?,
                "folds" => cfg.folds = number(key, raw)?,
                "participants" => cfg.participants = number(key, raw)?,
                "epochs" => cfg.train.epochs = number(key, raw)?,
                "patience" => cfg.train.patience = number(key, raw)?,
                "lr" => cfg.train.lr = number(key, raw)?,
                "batch" => cfg.train.batch_size = number(key, raw)?,
                "dropout" => cfg.dropout = number(key, raw)?,
                "embed_dim" => cfg.embed_dim = number(key, raw)?,
                "embed_base" => cfg.embed_base = number(key, raw)?,
                other => return Err(Error::Config(format!("{}: unknown key `{other}`", path.display()))),
            }
        }
        if let Some(seeds) = &cfg.seeds {
            if map.contains_key("repeats") && seeds.len() != cfg.repeats {
                return Err(Error::Config(format!(
                    "`repeats = {}` disagrees with {} listed seeds",
                    cfg.repeats,
                    seeds.len()
                )));
            }
            cfg.repeats = seeds.len();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        if self.modalities.is_empty() || self.strategies.is_empty() {
            return Err(Error::Config("at least one modality and one conditioning strategy are required".into()));
        }
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.embed_dim == 0 || !self.embed_dim.is_multiple_of(2) {
            return Err(Error::Config(format!("embed_dim must be even and positive, got {}", self.embed_dim)));
        }
        self.train.validate()
    }

    pub fn repeat_seeds(&self) -> Vec<u64> {
        match &self.seeds {
            Some(s) => s.clone(),
            None => (0..self.repeats as u64).map(|r| derive_seed(self.seed, r)).collect(),
        }
    }

    pub fn model_config(&self, modality: Modality, conditioning: Strategy, seed: u64) -> ModelConfig {
        ModelConfig {
            modality,
            conditioning,
            seed,
            dropout: self.dropout,
            embed_dim: self.embed_dim,
            embed_base: self.embed_base,
        }
    }

    /// Fully resolved configuration in the input syntax.
    pub fn render(&self) -> String {
        let join = |v: Vec<String>| v.join(", ");
        let mut out = String::new();
        let _ = writeln!(out, "modality = {}", join(self.modalities.iter().map(|m| m.to_string()).collect()));
        let _ = writeln!(out, "conditioning = {}", join(self.strategies.iter().map(|s| s.to_string()).collect()));
        let _ = writeln!(out, "seed = {}", self.seed);
        let _ = writeln!(out, "seeds = {}", join(self.repeat_seeds().iter().map(u64::to_string).collect()));
        let _ = writeln!(out, "repeats = {}", self.repeats);
        let _ = writeln!(out, "folds = {}", self.folds);
        let _ = writeln!(out, "participants = {}", self.participants);
        let _ = writeln!(out, "epochs = {}", self.train.epochs);
        let _ = writeln!(out, "patience = {}", self.train.patience);
        let _ = writeln!(out, "lr = {}", self.train.lr);
        let _ = writeln!(out, "batch = {}", self.train.batch_size);
        let _ = writeln!(out, "dropout = {}", self.dropout);
        let _ = writeln!(out, "embed_dim = {}", self.embed_dim);
        let _ = writeln!(out, "embed_base = {}", self.embed_base);
        out
    }
}

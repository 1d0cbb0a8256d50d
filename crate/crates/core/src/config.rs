//! Training configuration and its flat `key = value` file format.
//!
//! ```text
//! # comments start with '#'
//! epochs = 100
//! ablation = no_cost
//! ```

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampler::{ActionRule, BanditConfig};
use crate::transform::SimilaritySpace;

/// Which of the two modules are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    /// Full neighborhoods every epoch.
    NoSampler,
    /// All-ones costs; the cost matrix is never updated.
    NoCost,
    /// Both modules off: a plain mean-aggregation GNN.
    Vanilla,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::Full, Ablation::NoSampler, Ablation::NoCost, Ablation::Vanilla];

    pub fn uses_sampler(self) -> bool {
        matches!(self, Ablation::Full | Ablation::NoCost)
    }

    pub fn uses_cost(self) -> bool {
        matches!(self, Ablation::Full | Ablation::NoSampler)
    }

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoSampler => "no_sampler",
            Ablation::NoCost => "no_cost",
            Ablation::Vanilla => "vanilla",
        }
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown ablation {s:?}")))
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    /// Plain full-batch gradient descent.
    #[default]
    Gd,
    /// Adam with beta1 0.9, beta2 0.999, eps 1e-8.
    Adam,
}

impl FromStr for Optimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "gd" => Ok(Optimizer::Gd),
            "adam" => Ok(Optimizer::Adam),
            other => Err(Error::Config(format!("unknown optimizer {other:?}"))),
        }
    }
}

impl std::fmt::Display for Optimizer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Optimizer::Gd => "gd",
            Optimizer::Adam => "adam",
        })
    }
}

fn space_name(s: SimilaritySpace) -> &'static str {
    match s {
        SimilaritySpace::Softmax => "softmax",
        SimilaritySpace::Raw => "raw",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub layers: usize,
    pub hidden_dim: usize,
    pub lr: f64,
    pub cost_lr: f64,
    /// Weight of the transform loss in the combined objective.
    pub lambda: f64,
    pub beta: f64,
    pub tau: f64,
    pub p_init: f64,
    pub p_min: f64,
    pub action_rule: ActionRule,
    pub window: usize,
    pub threshold: i32,
    pub seed: u64,
    pub ablation: Ablation,
    pub optimizer: Optimizer,
    pub train_frac: f64,
    pub val_frac: f64,
    pub bias: bool,
    pub similarity: SimilaritySpace,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let bandit = BanditConfig::default();
        TrainConfig {
            epochs: 100,
            layers: 2,
            hidden_dim: 64,
            lr: 0.01,
            cost_lr: 0.01,
            lambda: 1.0,
            beta: 1.0,
            tau: bandit.tau,
            p_init: bandit.p_init,
            p_min: bandit.p_min,
            action_rule: bandit.rule,
            window: bandit.window,
            threshold: bandit.threshold,
            seed: 0,
            ablation: Ablation::Full,
            optimizer: Optimizer::Gd,
            train_frac: 0.2,
            val_frac: 0.2,
            bias: false,
            similarity: SimilaritySpace::Softmax,
        }
    }
}

/// Every key accepted by [`TrainConfig::set`], in file order.
pub const KEYS: [&str; 20] = [
    "epochs",
    "layers",
    "hidden_dim",
    "lr",
    "cost_lr",
    "lambda",
    "beta",
    "tau",
    "p_init",
    "p_min",
    "action_rule",
    "window",
    "threshold",
    "seed",
    "ablation",
    "optimizer",
    "train_frac",
    "val_frac",
    "bias",
    "similarity",
];

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

impl TrainConfig {
    pub fn bandit(&self) -> BanditConfig {
        BanditConfig {
            p_init: self.p_init,
            p_min: self.p_min,
            tau: self.tau,
            window: self.window,
            threshold: self.threshold,
            rule: self.action_rule,
        }
    }

    /// Sets one field from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "epochs" => self.epochs = parse_value(key, value)?,
            "layers" => self.layers = parse_value(key, value)?,
            "hidden_dim" => self.hidden_dim = parse_value(key, value)?,
            "lr" => self.lr = parse_value(key, value)?,
            "cost_lr" => self.cost_lr = parse_value(key, value)?,
            "lambda" => self.lambda = parse_value(key, value)?,
            "beta" => self.beta = parse_value(key, value)?,
            "tau" => self.tau = parse_value(key, value)?,
            "p_init" => self.p_init = parse_value(key, value)?,
            "p_min" => self.p_min = parse_value(key, value)?,
            "action_rule" => self.action_rule = value.parse()?,
            "window" => self.window = parse_value(key, value)?,
            "threshold" => self.threshold = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "ablation" => self.ablation = value.parse()?,
            "optimizer" => self.optimizer = value.parse()?,
            "train_frac" => self.train_frac = parse_value(key, value)?,
            "val_frac" => self.val_frac = parse_value(key, value)?,
            "bias" => self.bias = parse_value(key, value)?,
            "similarity" => {
                self.similarity = match value.trim() {
                    "softmax" => SimilaritySpace::Softmax,
                    "raw" => SimilaritySpace::Raw,
                    other => return Err(Error::Config(format!("unknown similarity space {other:?}"))),
                }
            }
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Textual value of one field, in the form [`TrainConfig::set`] accepts.
    pub fn get(&self, key: &str) -> Result<String> {
        Ok(match key {
            "epochs" => self.epochs.to_string(),
            "layers" => self.layers.to_string(),
            "hidden_dim" => self.hidden_dim.to_string(),
            "lr" => self.lr.to_string(),
            "cost_lr" => self.cost_lr.to_string(),
            "lambda" => self.lambda.to_string(),
            "beta" => self.beta.to_string(),
            "tau" => self.tau.to_string(),
            "p_init" => self.p_init.to_string(),
            "p_min" => self.p_min.to_string(),
            "action_rule" => self.action_rule.to_string(),
            "window" => self.window.to_string(),
            "threshold" => self.threshold.to_string(),
            "seed" => self.seed.to_string(),
            "ablation" => self.ablation.to_string(),
            "optimizer" => self.optimizer.to_string(),
            "train_frac" => self.train_frac.to_string(),
            "val_frac" => self.val_frac.to_string(),
            "bias" => self.bias.to_string(),
            "similarity" => space_name(self.similarity).to_string(),
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        })
    }

    /// Applies a config file on top of `self`. Later lines win; unknown
    /// keys are errors.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::parse("config", i + 1, format!("expected `key = value`, got {line:?}")))?;
            self.set(key.trim(), value).map_err(|e| match e {
                Error::Config(msg) => Error::parse("config", i + 1, msg),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// All fields in file format; `parse(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for key in KEYS {
            let _ = writeln!(s, "{key} = {}", self.get(key).expect("listed key"));
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Parameter(msg.to_string()));
        if self.epochs == 0 || self.layers == 0 || self.hidden_dim == 0 {
            return bad("epochs, layers and hidden_dim must be positive");
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad("lr must be positive");
        }
        if !(self.cost_lr >= 0.0 && self.cost_lr <= 0.5) {
            return bad("cost_lr must be in [0, 0.5]");
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return bad("lambda must be >= 0");
        }
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return bad("beta must be positive");
        }
        if !(self.p_init > 0.0 && self.p_init <= 1.0) {
            return bad("p_init must be in (0, 1]");
        }
        if !(self.train_frac > 0.0 && self.val_frac > 0.0 && self.train_frac + self.val_frac < 1.0) {
            return bad("train_frac and val_frac must be positive with a sum below 1");
        }
        // tau, p_min, window and threshold are checked by the bandit itself
        crate::sampler::BanditState::new(self.bandit()).map(|_| ())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_roundtrip() {
        let mut cfg = TrainConfig::default();
        cfg.ablation = Ablation::NoCost;
        cfg.action_rule = ActionRule::Contrarian;
        cfg.lr = 0.003;
        cfg.similarity = SimilaritySpace::Raw;
        cfg.bias = true;
        assert_eq!(TrainConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn parse_file() {
        let cfg = TrainConfig::parse("# header\n\nepochs = 7  # trailing\n action_rule=contrarian\n").unwrap();
        assert_eq!(cfg.epochs, 7);
        assert_eq!(cfg.action_rule, ActionRule::Contrarian);
        assert!(matches!(TrainConfig::parse("nope = 1"), Err(Error::Parse { line: 1, .. })));
        assert!(TrainConfig::parse("epochs").is_err());
        assert!(TrainConfig::parse("epochs = -1").is_err());
        assert!(TrainConfig::parse("ablation = half").is_err());
    }

    #[test]
    fn validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let mut cfg = TrainConfig::default();
        cfg.train_frac = 0.9;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.p_min = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn ablation_switches() {
        assert!(Ablation::Full.uses_sampler() && Ablation::Full.uses_cost());
        assert!(!Ablation::NoSampler.uses_sampler() && Ablation::NoSampler.uses_cost());
        assert!(Ablation::NoCost.uses_sampler() && !Ablation::NoCost.uses_cost());
        assert!(!Ablation::Vanilla.uses_sampler() && !Ablation::Vanilla.uses_cost());
    }
}

//! Run configuration and its plain-text `key = value` form.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::head::{HeadConfig, LearnerInput};
use crate::losses::{FocalParams, LossWeights};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    /// Unseen names and masks both hidden during training.
    Inductive,
    /// Unseen names available; self-training fills in pseudo labels.
    Transductive,
    /// All labels available.
    Supervised,
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::Inductive => "inductive",
            Protocol::Transductive => "transductive",
            Protocol::Supervised => "supervised",
        })
    }
}

impl FromStr for Protocol {
    type Err = Error;
    fn from_str(s: &str) -> Result<Protocol> {
        match s {
            "inductive" => Ok(Protocol::Inductive),
            "transductive" => Ok(Protocol::Transductive),
            "supervised" => Ok(Protocol::Supervised),
            other => Err(Error::Config(format!("unknown protocol `{other}`"))),
        }
    }
}

impl fmt::Display for LearnerInput {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LearnerInput::Text => "text",
            LearnerInput::Image => "image",
            LearnerInput::Product => "product",
            LearnerInput::Concat => "concat",
            LearnerInput::Descriptor => "descriptor",
        })
    }
}

impl FromStr for LearnerInput {
    type Err = Error;
    fn from_str(s: &str) -> Result<LearnerInput> {
        match s {
            "text" => Ok(LearnerInput::Text),
            "image" => Ok(LearnerInput::Image),
            "product" => Ok(LearnerInput::Product),
            "concat" => Ok(LearnerInput::Concat),
            "descriptor" => Ok(LearnerInput::Descriptor),
            other => Err(Error::Config(format!("unknown learner input `{other}`"))),
        }
    }
}

/// Everything a run needs besides the data itself.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub class_count: usize,
    pub unseen_count: usize,
    pub dim: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub samples: usize,
    pub noise: f64,
    pub protocol: Protocol,
    pub trusty_token: bool,
    pub trusty_learner: bool,
    pub weighted_map: bool,
    pub learner_q: LearnerInput,
    pub learner_k: LearnerInput,
    pub learner_v: LearnerInput,
    pub n_heads: usize,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub learning_rate: f64,
    pub steps: usize,
    pub warmup_fraction: f64,
    pub self_train_threshold: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            class_count: 8,
            unseen_count: 2,
            dim: 32,
            grid_h: 16,
            grid_w: 16,
            samples: 300,
            noise: 0.15,
            protocol: Protocol::Inductive,
            trusty_token: true,
            trusty_learner: true,
            weighted_map: true,
            learner_q: LearnerInput::Descriptor,
            learner_k: LearnerInput::Descriptor,
            learner_v: LearnerInput::Descriptor,
            n_heads: 4,
            alpha: 20.0,
            beta: 1.0,
            gamma: 10.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            learning_rate: 3e-3,
            steps: 2000,
            warmup_fraction: 0.5,
            self_train_threshold: 0.8,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.class_count < 2 {
            return Err(Error::Config("class_count must be at least 2".into()));
        }
        if self.unseen_count >= self.class_count {
            return Err(Error::Config(
                "unseen_count must leave at least one seen class".into(),
            ));
        }
        if self.dim < 4 {
            return Err(Error::Config("dim must be at least 4".into()));
        }
        if self.n_heads == 0 || self.dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "n_heads {} must divide dim {}",
                self.n_heads, self.dim
            )));
        }
        if self.grid_h * self.grid_w < 2 {
            return Err(Error::Config("grid must hold at least 2 cells".into()));
        }
        if self.noise < 0.0 {
            return Err(Error::Config("noise must be non-negative".into()));
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return Err(Error::Config(
                "warmup_fraction must lie strictly inside (0, 1)".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.self_train_threshold) {
            return Err(Error::Config(
                "self_train_threshold must lie in [0, 1]".into(),
            ));
        }
        if self.alpha < 0.0 || self.beta < 0.0 || self.gamma < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.weighted_map && !self.trusty_token {
            return Err(Error::Config(
                "weighted_map needs the trusty token".into(),
            ));
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.grid_h, self.grid_w)
    }

    pub fn head_config(&self) -> HeadConfig {
        HeadConfig {
            use_trusty_token: self.trusty_token,
            use_learner: self.trusty_learner,
            query_input: self.learner_q,
            key_input: self.learner_k,
            value_input: self.learner_v,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
        }
    }

    pub fn focal_params(&self) -> FocalParams {
        FocalParams {
            alpha: self.focal_alpha,
            gamma: self.focal_gamma,
        }
    }

    /// Serializes in a fixed key order; [`RunConfig::parse`] inverts this.
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| s.push_str(&format!("{k} = {v}\n"));
        kv("seed", self.seed.to_string());
        kv("class_count", self.class_count.to_string());
        kv("unseen_count", self.unseen_count.to_string());
        kv("dim", self.dim.to_string());
        kv("grid_h", self.grid_h.to_string());
        kv("grid_w", self.grid_w.to_string());
        kv("samples", self.samples.to_string());
        kv("noise", self.noise.to_string());
        kv("protocol", self.protocol.to_string());
        kv("trusty_token", self.trusty_token.to_string());
        kv("trusty_learner", self.trusty_learner.to_string());
        kv("weighted_map", self.weighted_map.to_string());
        kv("learner_q", self.learner_q.to_string());
        kv("learner_k", self.learner_k.to_string());
        kv("learner_v", self.learner_v.to_string());
        kv("n_heads", self.n_heads.to_string());
        kv("alpha", self.alpha.to_string());
        kv("beta", self.beta.to_string());
        kv("gamma", self.gamma.to_string());
        kv("focal_alpha", self.focal_alpha.to_string());
        kv("focal_gamma", self.focal_gamma.to_string());
        kv("learning_rate", self.learning_rate.to_string());
        kv("steps", self.steps.to_string());
        kv("warmup_fraction", self.warmup_fraction.to_string());
        kv("self_train_threshold", self.self_train_threshold.to_string());
        s
    }

    /// Parses `key = value` text; `#` starts a comment, unknown keys are
    /// errors, missing keys keep their defaults.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected `key = value`, got `{raw}`",
                    lineno + 1
                )));
            };
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    /// Applies a single `key`/`value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
        }
        match key {
            "seed" => self.seed = num(key, value)?,
            "class_count" => self.class_count = num(key, value)?,
            "unseen_count" => self.unseen_count = num(key, value)?,
            "dim" => self.dim = num(key, value)?,
            "grid_h" => self.grid_h = num(key, value)?,
            "grid_w" => self.grid_w = num(key, value)?,
            "samples" => self.samples = num(key, value)?,
            "noise" => self.noise = num(key, value)?,
            "protocol" => self.protocol = value.parse()?,
            "trusty_token" => self.trusty_token = num(key, value)?,
            "trusty_learner" => self.trusty_learner = num(key, value)?,
            "weighted_map" => self.weighted_map = num(key, value)?,
            "learner_q" => self.learner_q = value.parse()?,
            "learner_k" => self.learner_k = value.parse()?,
            "learner_v" => self.learner_v = value.parse()?,
            "n_heads" => self.n_heads = num(key, value)?,
            "alpha" => self.alpha = num(key, value)?,
            "beta" => self.beta = num(key, value)?,
            "gamma" => self.gamma = num(key, value)?,
            "focal_alpha" => self.focal_alpha = num(key, value)?,
            "focal_gamma" => self.focal_gamma = num(key, value)?,
            "learning_rate" => self.learning_rate = num(key, value)?,
            "steps" => self.steps = num(key, value)?,
            "warmup_fraction" => self.warmup_fraction = num(key, value)?,
            "self_train_threshold" => self.self_train_threshold = num(key, value)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }
}

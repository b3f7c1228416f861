//! Run configuration: line-oriented `key = value` files with `#` comments.
//! Unknown keys are rejected; every key has a default.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::data::FeedbackScheme;
use crate::error::{Error, Result};
use crate::mixture::MixtureVariant;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataFormat {
    MovieLens,
    Netflix,
}

impl std::str::FromStr for DataFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "movielens" => Ok(Self::MovieLens),
            "netflix" => Ok(Self::Netflix),
            o => Err(Error::Config(format!("unknown data_format {o:?} (movielens|netflix)"))),
        }
    }
}

impl std::fmt::Display for DataFormat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::MovieLens => "movielens",
            Self::Netflix => "netflix",
        })
    }
}

/// A timestamp bound that may be derived from the data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bound {
    Auto,
    At(i64),
}

impl std::fmt::Display for Bound {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Bound::Auto => f.write_str("auto"),
            Bound::At(t) => write!(f, "{t}"),
        }
    }
}

/// Which movies the generator samples from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GeneratorCandidates {
    /// Every movie the user has not rated in training.
    All,
    /// The user's MF top-`candidates` list.
    MfTop,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data_path: PathBuf,
    pub data_format: DataFormat,
    pub content_path: Option<PathBuf>,
    pub feedback: Option<FeedbackScheme>,
    pub train_end: Bound,
    pub test_end: Bound,
    /// Fraction of the data span used for training when `train_end = auto`.
    pub train_fraction: f64,
    pub validation_fraction: f64,
    pub session_length_days: u32,

    pub mixture: MixtureVariant,
    pub factor_dim: usize,
    pub hidden_size: usize,
    pub input_dim: usize,
    pub attention_dim: usize,
    pub attention_pool_size: usize,
    pub bptt_truncation: usize,
    pub rnn_init_range: f64,

    /// Generator step size in the adversarial phase.
    pub learning_rate: f64,
    pub d_learning_rate: f64,
    pub clip: f64,
    pub l2_lambda: f64,
    pub batch_size: usize,

    pub mf_learning_rate: f64,
    pub mf_l2_lambda: f64,
    pub mf_epochs: usize,

    pub pretrain_learning_rate: f64,
    pub g_pretrain_epochs: usize,
    pub d_pretrain_epochs: usize,
    pub pretrain_batches: usize,

    pub adversarial_epochs: usize,
    pub g_steps: usize,
    pub d_steps: usize,
    pub samples: usize,
    pub margin: f64,
    pub generator_candidates: GeneratorCandidates,

    pub candidates: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data_path: PathBuf::from("u.data"),
            data_format: DataFormat::MovieLens,
            content_path: None,
            feedback: None,
            train_end: Bound::Auto,
            test_end: Bound::Auto,
            train_fraction: 0.75,
            validation_fraction: 0.5,
            session_length_days: 30,
            mixture: MixtureVariant::V4,
            factor_dim: 5,
            hidden_size: 10,
            input_dim: 15,
            attention_dim: 8,
            attention_pool_size: 0,
            bptt_truncation: 0,
            rnn_init_range: 0.05,
            learning_rate: 1e-4,
            d_learning_rate: 1e-4,
            clip: 0.2,
            l2_lambda: 0.05,
            batch_size: 128,
            mf_learning_rate: 0.05,
            mf_l2_lambda: 0.05,
            mf_epochs: 30,
            pretrain_learning_rate: 1e-2,
            g_pretrain_epochs: 3,
            d_pretrain_epochs: 3,
            pretrain_batches: 0,
            adversarial_epochs: 10,
            g_steps: 1,
            d_steps: 1,
            samples: 64,
            margin: 0.2,
            generator_candidates: GeneratorCandidates::All,
            candidates: 100,
            seed: 1,
            out_dir: PathBuf::from("lsic-out"),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("invalid value {v:?} for {key}")))
}

fn opt_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty() && v != "none").then(|| PathBuf::from(v))
}

fn bound(key: &str, v: &str) -> Result<Bound> {
    if v == "auto" {
        Ok(Bound::Auto)
    } else {
        Ok(Bound::At(parse(key, v)?))
    }
}

impl RunConfig {
    pub const KEYS: &'static [&'static str] = &[
        "data_path",
        "data_format",
        "content_path",
        "feedback",
        "train_end",
        "test_end",
        "train_fraction",
        "validation_fraction",
        "session_length_days",
        "mixture",
        "factor_dim",
        "hidden_size",
        "input_dim",
        "attention_dim",
        "attention_pool_size",
        "bptt_truncation",
        "rnn_init_range",
        "learning_rate",
        "d_learning_rate",
        "clip",
        "l2_lambda",
        "batch_size",
        "mf_learning_rate",
        "mf_l2_lambda",
        "mf_epochs",
        "pretrain_learning_rate",
        "g_pretrain_epochs",
        "d_pretrain_epochs",
        "pretrain_batches",
        "adversarial_epochs",
        "g_steps",
        "d_steps",
        "samples",
        "margin",
        "generator_candidates",
        "candidates",
        "seed",
        "out_dir",
    ];

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "data_path" => self.data_path = PathBuf::from(v),
            "data_format" => self.data_format = v.parse()?,
            "content_path" => self.content_path = opt_path(v),
            "feedback" => self.feedback = if v == "auto" { None } else { Some(v.parse()?) },
            "train_end" => self.train_end = bound(key, v)?,
            "test_end" => self.test_end = bound(key, v)?,
            "train_fraction" => self.train_fraction = parse(key, v)?,
            "validation_fraction" => self.validation_fraction = parse(key, v)?,
            "session_length_days" => self.session_length_days = parse(key, v)?,
            "mixture" => self.mixture = v.parse()?,
            "factor_dim" => self.factor_dim = parse(key, v)?,
            "hidden_size" => self.hidden_size = parse(key, v)?,
            "input_dim" => self.input_dim = parse(key, v)?,
            "attention_dim" => self.attention_dim = parse(key, v)?,
            "attention_pool_size" => self.attention_pool_size = parse(key, v)?,
            "bptt_truncation" => self.bptt_truncation = parse(key, v)?,
            "rnn_init_range" => self.rnn_init_range = parse(key, v)?,
            "learning_rate" => self.learning_rate = parse(key, v)?,
            "d_learning_rate" => self.d_learning_rate = parse(key, v)?,
            "clip" => self.clip = parse(key, v)?,
            "l2_lambda" => self.l2_lambda = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "mf_learning_rate" => self.mf_learning_rate = parse(key, v)?,
            "mf_l2_lambda" => self.mf_l2_lambda = parse(key, v)?,
            "mf_epochs" => self.mf_epochs = parse(key, v)?,
            "pretrain_learning_rate" => self.pretrain_learning_rate = parse(key, v)?,
            "g_pretrain_epochs" => self.g_pretrain_epochs = parse(key, v)?,
            "d_pretrain_epochs" => self.d_pretrain_epochs = parse(key, v)?,
            "pretrain_batches" => self.pretrain_batches = parse(key, v)?,
            "adversarial_epochs" => self.adversarial_epochs = parse(key, v)?,
            "g_steps" => self.g_steps = parse(key, v)?,
            "d_steps" => self.d_steps = parse(key, v)?,
            "samples" => self.samples = parse(key, v)?,
            "margin" => self.margin = parse(key, v)?,
            "generator_candidates" => {
                self.generator_candidates = match v {
                    "all" => GeneratorCandidates::All,
                    "mf" => GeneratorCandidates::MfTop,
                    o => return Err(Error::Config(format!("invalid generator_candidates {o:?} (all|mf)"))),
                }
            }
            "candidates" => self.candidates = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let p = |o: &Option<PathBuf>| o.as_ref().map_or("none".to_string(), |p| p.display().to_string());
        Some(match key {
            "data_path" => self.data_path.display().to_string(),
            "data_format" => self.data_format.to_string(),
            "content_path" => p(&self.content_path),
            "feedback" => self.feedback.map_or("auto".into(), |f| f.to_string()),
            "train_end" => self.train_end.to_string(),
            "test_end" => self.test_end.to_string(),
            "train_fraction" => self.train_fraction.to_string(),
            "validation_fraction" => self.validation_fraction.to_string(),
            "session_length_days" => self.session_length_days.to_string(),
            "mixture" => self.mixture.to_string(),
            "factor_dim" => self.factor_dim.to_string(),
            "hidden_size" => self.hidden_size.to_string(),
            "input_dim" => self.input_dim.to_string(),
            "attention_dim" => self.attention_dim.to_string(),
            "attention_pool_size" => self.attention_pool_size.to_string(),
            "bptt_truncation" => self.bptt_truncation.to_string(),
            "rnn_init_range" => self.rnn_init_range.to_string(),
            "learning_rate" => self.learning_rate.to_string(),
            "d_learning_rate" => self.d_learning_rate.to_string(),
            "clip" => self.clip.to_string(),
            "l2_lambda" => self.l2_lambda.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "mf_learning_rate" => self.mf_learning_rate.to_string(),
            "mf_l2_lambda" => self.mf_l2_lambda.to_string(),
            "mf_epochs" => self.mf_epochs.to_string(),
            "pretrain_learning_rate" => self.pretrain_learning_rate.to_string(),
            "g_pretrain_epochs" => self.g_pretrain_epochs.to_string(),
            "d_pretrain_epochs" => self.d_pretrain_epochs.to_string(),
            "pretrain_batches" => self.pretrain_batches.to_string(),
            "adversarial_epochs" => self.adversarial_epochs.to_string(),
            "g_steps" => self.g_steps.to_string(),
            "d_steps" => self.d_steps.to_string(),
            "samples" => self.samples.to_string(),
            "margin" => self.margin.to_string(),
            "generator_candidates" => match self.generator_candidates {
                GeneratorCandidates::All => "all".into(),
                GeneratorCandidates::MfTop => "mf".into(),
            },
            "candidates" => self.candidates.to_string(),
            "seed" => self.seed.to_string(),
            "out_dir" => self.out_dir.display().to_string(),
            _ => return None,
        })
    }

    /// Parses `key = value` lines; blank lines and `#` comments are ignored.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            cfg.set(k.trim(), v.trim()).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", n + 1)),
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |name: &str, v: usize| {
            if v == 0 {
                Err(Error::Config(format!("{name} must be at least 1")))
            } else {
                Ok(())
            }
        };
        pos("factor_dim", self.factor_dim)?;
        pos("hidden_size", self.hidden_size)?;
        pos("input_dim", self.input_dim)?;
        pos("attention_dim", self.attention_dim)?;
        pos("batch_size", self.batch_size)?;
        pos("samples", self.samples)?;
        pos("candidates", self.candidates)?;
        pos("session_length_days", self.session_length_days as usize)?;
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("d_learning_rate", self.d_learning_rate),
            ("mf_learning_rate", self.mf_learning_rate),
            ("pretrain_learning_rate", self.pretrain_learning_rate),
            ("clip", self.clip),
            ("margin", self.margin),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("l2_lambda", self.l2_lambda), ("mf_l2_lambda", self.mf_l2_lambda), ("rnn_init_range", self.rnn_init_range)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        for (name, v) in [("train_fraction", self.train_fraction), ("validation_fraction", self.validation_fraction)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1), got {v}")));
            }
        }
        Ok(())
    }

    /// Every key with its resolved value, in declaration order.
    pub fn resolved(&self) -> String {
        Self::KEYS.iter().map(|k| format!("{k} = {}\n", self.get(k).expect("known key"))).collect()
    }

    /// SHA-256 of the resolved configuration, excluding `out_dir`.
    pub fn hash(&self) -> String {
        let text: String = Self::KEYS
            .iter()
            .filter(|&&k| k != "out_dir")
            .map(|k| format!("{k} = {}\n", self.get(k).expect("known key")))
            .collect();
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn feedback_scheme(&self) -> FeedbackScheme {
        self.feedback.unwrap_or(match self.data_format {
            DataFormat::MovieLens => FeedbackScheme::MovieLens,
            DataFormat::Netflix => FeedbackScheme::Netflix,
        })
    }
}

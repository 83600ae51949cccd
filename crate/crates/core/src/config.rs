//! Model profiles and the flat `key = value` training configuration.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::discriminator::DiscriminatorConfig;
use crate::error::{Error, Result};
use crate::generator::{AttentionNorm, GeneratorConfig};
use crate::losses::{AdvMode, LossWeights};
use crate::optim::AdamConfig;

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "STYMAM_SEED";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Profile {
    /// Small model for CPU runs and tests.
    #[default]
    Desk,
    /// Full-width model at 256 px training resolution.
    Paper,
}

impl Profile {
    pub fn generator(self) -> GeneratorConfig {
        match self {
            Profile::Desk => GeneratorConfig::desk(),
            Profile::Paper => GeneratorConfig::paper(),
        }
    }

    pub fn discriminator(self) -> DiscriminatorConfig {
        match self {
            Profile::Desk => DiscriminatorConfig::desk(),
            Profile::Paper => DiscriminatorConfig::paper(),
        }
    }

    pub fn train_size(self) -> usize {
        match self {
            Profile::Desk => 32,
            Profile::Paper => 256,
        }
    }

    /// Default inference side; `None` keeps the input's own size.
    pub fn stylize_size(self) -> Option<usize> {
        match self {
            Profile::Desk => None,
            Profile::Paper => Some(512),
        }
    }
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            other => Err(Error::Config(format!(
                "unknown profile `{other}` (expected desk or paper)"
            ))),
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Desk => "desk",
            Profile::Paper => "paper",
        })
    }
}

impl FromStr for AttentionNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scaled" => Ok(AttentionNorm::Scaled),
            "softmax" => Ok(AttentionNorm::Softmax),
            other => Err(Error::Config(format!(
                "unknown attention `{other}` (expected scaled or softmax)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub profile: Profile,
    pub lr_g: f64,
    pub lr_d: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub seed: u64,
    pub image_size: usize,
    pub lambda_c: f64,
    pub lambda_adv: f64,
    pub adv_mode: AdvMode,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub content_dir: Option<PathBuf>,
    pub style_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub extractor_seed: u64,
    pub extractor_weights: Option<PathBuf>,
    pub strip_size: Option<usize>,
    pub selective: bool,
    pub attention: AttentionNorm,
    pub disc_scales: Option<usize>,
}

impl TrainConfig {
    pub fn for_profile(profile: Profile) -> Self {
        Self {
            profile,
            lr_g: 2e-4,
            lr_d: 2e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 1,
            max_steps: 1000,
            seed: 0,
            image_size: profile.train_size(),
            lambda_c: 1.0,
            lambda_adv: 5.0,
            adv_mode: AdvMode::NonSaturating,
            checkpoint_every: 0,
            content_dir: None,
            style_dir: None,
            out_dir: PathBuf::from("run"),
            extractor_seed: 7,
            extractor_weights: None,
            strip_size: None,
            selective: false,
            attention: AttentionNorm::Scaled,
            disc_scales: None,
        }
    }

    /// Parses `key = value` lines. `#` starts a comment. `profile` sets the
    /// defaults every other key then overrides, wherever it appears.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected `key = value`, got `{line}`",
                    n + 1
                )));
            };
            pairs.push((n + 1, k.trim(), v.trim()));
        }
        let profile = match pairs.iter().rev().find(|(_, k, _)| *k == "profile") {
            Some((_, _, v)) => v.parse()?,
            None => Profile::Desk,
        };
        let mut cfg = Self::for_profile(profile);
        for (line, key, value) in pairs {
            cfg.set(key, value)
                .map_err(|e| Error::Config(format!("line {line}: {}", strip_prefix(e))))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and parses a config file. Relative directories inside it are
    /// resolved against the file's own directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        cfg.content_dir.as_mut().map(resolve);
        cfg.style_dir.as_mut().map(resolve);
        cfg.extractor_weights.as_mut().map(resolve);
        resolve(&mut cfg.out_dir);
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("invalid value `{v}` for key `{key}`")))
        }
        fn flag(key: &str, v: &str) -> Result<bool> {
            match v {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                _ => Err(Error::Config(format!("invalid value `{v}` for key `{key}`"))),
            }
        }
        let path = || Some(PathBuf::from(value));
        match key {
            "profile" => self.profile = value.parse()?,
            "lr_g" => self.lr_g = num(key, value)?,
            "lr_d" => self.lr_d = num(key, value)?,
            "adam_beta1" => self.adam_beta1 = num(key, value)?,
            "adam_beta2" => self.adam_beta2 = num(key, value)?,
            "adam_eps" => self.adam_eps = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "max_steps" => self.max_steps = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "image_size" => self.image_size = num(key, value)?,
            "lambda_c" => self.lambda_c = num(key, value)?,
            "lambda_adv" => self.lambda_adv = num(key, value)?,
            "adv_mode" => self.adv_mode = value.parse()?,
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            "content_dir" => self.content_dir = path(),
            "style_dir" => self.style_dir = path(),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "extractor_seed" => self.extractor_seed = num(key, value)?,
            "extractor_weights" => self.extractor_weights = path(),
            "strip_size" => self.strip_size = Some(num(key, value)?),
            "selective" => self.selective = flag(key, value)?,
            "attention" => self.attention = value.parse()?,
            "disc_scales" => self.disc_scales = Some(num(key, value)?),
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Seed precedence: explicit flag, then the environment, then the file.
    pub fn apply_seed_overrides(&mut self, flag: Option<u64>, env: Option<&str>) -> Result<()> {
        if let Some(s) = flag {
            self.seed = s;
        } else if let Some(v) = env {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV} must be an unsigned integer, got `{v}`")))?;
        }
        Ok(())
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        let mut g = self.profile.generator();
        if let Some(s) = self.strip_size {
            g.strip_size = s;
        }
        g.selective = self.selective;
        g.attention = self.attention;
        g
    }

    pub fn discriminator_config(&self) -> DiscriminatorConfig {
        let mut d = self.profile.discriminator();
        if let Some(m) = self.disc_scales {
            d.scales = m;
        }
        d
    }

    pub fn adam_g(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr_g,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    pub fn adam_d(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr_d,
            ..self.adam_g()
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_c: self.lambda_c,
            lambda_adv: self.lambda_adv,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.adam_g().validate()?;
        self.adam_d().validate()?;
        self.loss_weights().validate()?;
        self.generator_config().validate()?;
        self.discriminator_config().validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "image_size must be a positive multiple of 4, got {}",
                self.image_size
            )));
        }
        Ok(())
    }
}

fn strip_prefix(e: Error) -> String {
    match e {
        Error::Config(msg) => msg,
        other => other.to_string(),
    }
}

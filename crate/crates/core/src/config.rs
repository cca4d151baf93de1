//! Flat `key = value` run configuration.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::encoder::{StageConfig, PATCH};
use crate::episodes::SplitSpec;
use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// Environment variable consulted when the config has no `seed`.
pub const SEED_ENV: &str = "HDM_SEED";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub k: usize,
    pub lambda_kl: f64,
    pub lr: f64,
    pub momentum: f64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub clip_norm: f64,
    pub steps: usize,
    pub seed: u64,
    pub image_size: usize,
    pub n_classes: usize,
    pub bank_seed: u64,
    pub split: SplitSpec,
    /// Size of the fixed pool of training episodes.
    pub train_episodes: usize,
    /// Episodes averaged per optimisation step.
    pub batch: usize,
    /// Train-split mIoU is measured every this many steps; 0 disables it.
    pub eval_every: usize,
    pub checkpoint: Option<PathBuf>,
    pub log: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            k: 1,
            lambda_kl: 1.0,
            lr: 0.05,
            momentum: 0.9,
            clip_norm: 1.0,
            steps: 300,
            seed: 0,
            image_size: 64,
            n_classes: 8,
            bank_seed: 0,
            split: SplitSpec::default(),
            train_episodes: 50,
            batch: 4,
            eval_every: 0,
            checkpoint: None,
            log: None,
        }
    }
}

fn value<T: FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::Config(format!("invalid value `{raw}` for `{key}`")))
}

fn list(key: &str, raw: &str) -> Result<Vec<usize>> {
    if raw.trim().is_empty() {
        return Ok(Vec::new());
    }
    raw.split(',').map(|p| value(key, p.trim())).collect()
}

fn flag(key: &str, raw: &str) -> Result<bool> {
    match raw {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(Error::Config(format!("invalid value `{raw}` for `{key}`, expected true or false"))),
    }
}

impl RunConfig {
    /// Parses config text; `env_seed` is used when the text sets no `seed`.
    pub fn parse(text: &str, env_seed: Option<u64>) -> Result<Self> {
        let mut cfg = Self::default();
        let mut stages: Option<usize> = None;
        let mut channels: Option<Vec<usize>> = None;
        let mut seed: Option<u64> = None;
        let (mut train, mut test) = (None, None);
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, raw) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            let (key, raw) = (key.trim(), raw.trim());
            match key {
                "channels" => channels = Some(list(key, raw)?),
                "stages" => stages = Some(value(key, raw)?),
                "heads" => cfg.model.stages.heads = value(key, raw)?,
                "blocks" => cfg.model.stages.blocks = value(key, raw)?,
                "standardize" => cfg.model.stages.standardize = flag(key, raw)?,
                "pos_enc" => cfg.model.stages.positional_encoding = flag(key, raw)?,
                "corr_temperature" => cfg.model.corr_temperature = value(key, raw)?,
                "distill_temperature" => cfg.model.distill_temperature = value(key, raw)?,
                "k" => cfg.k = value(key, raw)?,
                "lambda_kl" => cfg.lambda_kl = value(key, raw)?,
                "lr" => cfg.lr = value(key, raw)?,
                "momentum" => cfg.momentum = value(key, raw)?,
                "clip_norm" => cfg.clip_norm = value(key, raw)?,
                "steps" => cfg.steps = value(key, raw)?,
                "seed" => seed = Some(value(key, raw)?),
                "image_size" => cfg.image_size = value(key, raw)?,
                "n_classes" => cfg.n_classes = value(key, raw)?,
                "bank_seed" => cfg.bank_seed = value(key, raw)?,
                "train_classes" => train = Some(list(key, raw)?),
                "test_classes" => test = Some(list(key, raw)?),
                "train_episodes" => cfg.train_episodes = value(key, raw)?,
                "batch" => cfg.batch = value(key, raw)?,
                "eval_every" => cfg.eval_every = value(key, raw)?,
                "checkpoint" => cfg.checkpoint = Some(PathBuf::from(raw)),
                "log" => cfg.log = Some(PathBuf::from(raw)),
                _ => return Err(Error::Config(format!("line {}: unknown key `{key}`", lineno + 1))),
            }
        }
        cfg.model.stages.channels = match (channels, stages) {
            (Some(c), Some(l)) if c.len() != l => {
                return Err(Error::Config(format!("stages = {l} but {} channel widths given", c.len())))
            }
            (Some(c), _) => c,
            (None, Some(l)) => (0..l).map(|i| 8 << i).collect(),
            (None, None) => cfg.model.stages.channels,
        };
        cfg.seed = seed.or(env_seed).unwrap_or(0);
        let default = SplitSpec::default();
        cfg.split = SplitSpec::new(
            train.unwrap_or_else(|| default.train().to_vec()),
            test.unwrap_or_else(|| default.test().to_vec()),
        )?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file, falling back to `HDM_SEED` for the seed.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let env_seed = match std::env::var(SEED_ENV) {
            Ok(s) => Some(value(SEED_ENV, s.trim())?),
            Err(_) => None,
        };
        Self::parse(&text, env_seed)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.model.stages.stage_dims(self.image_size, self.image_size)?;
        let checks = [
            (self.k >= 1, "k must be at least 1"),
            (self.lambda_kl >= 0.0, "lambda_kl must be non-negative"),
            (self.lr > 0.0, "lr must be positive"),
            ((0.0..1.0).contains(&self.momentum), "momentum must lie in [0, 1)"),
            (self.clip_norm >= 0.0, "clip_norm must be non-negative"),
            (self.train_episodes >= 1, "train_episodes must be at least 1"),
            (self.batch >= 1, "batch must be at least 1"),
            (self.image_size >= PATCH, "image_size is smaller than one patch"),
            (!self.split.train().is_empty(), "train_classes is empty"),
        ];
        if let Some((_, msg)) = checks.iter().find(|(ok, _)| !ok) {
            return Err(Error::Config((*msg).into()));
        }
        if self.split.train().iter().chain(self.split.test()).any(|&id| id >= self.n_classes) {
            return Err(Error::Config(format!("class ids must be below n_classes = {}", self.n_classes)));
        }
        Ok(())
    }

    pub fn stage_config(&self) -> &StageConfig {
        &self.model.stages
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(RunConfig::parse("", None).unwrap(), RunConfig::default());
    }

    #[test]
    fn parses_keys_and_comments() {
        let text = "# tiny run\nchannels = 4, 6\nsteps=10 # inline\nlambda_kl = 0\nstandardize = false\n\
                    train_classes = 0,1,2\ntest_classes = 3\nn_classes = 4\nimage_size = 32\ncheckpoint = out.ckpt\n";
        let cfg = RunConfig::parse(text, Some(9)).unwrap();
        assert_eq!(cfg.model.stages.channels, vec![4, 6]);
        assert_eq!(cfg.steps, 10);
        assert_eq!(cfg.lambda_kl, 0.0);
        assert!(!cfg.model.stages.standardize);
        assert_eq!(cfg.split.test(), &[3]);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.checkpoint.as_deref(), Some(Path::new("out.ckpt")));
        assert_eq!(RunConfig::parse("seed = 2", Some(9)).unwrap().seed, 2);
    }

    #[test]
    fn stage_count_alone_sets_widths() {
        let cfg = RunConfig::parse("stages = 2", None).unwrap();
        assert_eq!(cfg.model.stages.channels, vec![8, 16]);
        assert!(RunConfig::parse("stages = 2\nchannels = 8,16,32", None).is_err());
    }

    #[test]
    fn rejects_bad_input() {
        for bad in [
            "colour = red",
            "steps",
            "steps = -1",
            "lambda_kl = -0.5",
            "standardize = maybe",
            "train_classes = 0,1\ntest_classes = 1",
            "image_size = 48",
            "stages = 4",
            "channels = 16, 8",
            "test_classes = 9",
        ] {
            assert!(RunConfig::parse(bad, None).is_err(), "{bad}");
        }
    }
}

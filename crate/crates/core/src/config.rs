//! `key=value` run configuration shared by every command.

use std::collections::BTreeMap;
use std::path::PathBuf;

use crate::datagen::DatasetSpec;
use crate::error::{Error, Result};
use crate::imgproc::Distortion;
use crate::metrics::{Aggregation, EvalOptions};
use crate::network::{ModelConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub model: ModelConfig,
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub lr_halving_period: usize,
    pub train_data: Option<PathBuf>,
    pub eval_data: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub samples: usize,
    pub split: String,
    /// Fractions for splice, copy-move, removal, authentic.
    pub mix: [f64; 4],
    pub bucket: Option<f64>,
    pub distortions: Vec<Distortion>,
    pub threshold: f64,
    pub aggregation: Aggregation,
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        Self {
            seed: None,
            model: ModelConfig::default(),
            batch_size: train.batch_size,
            lr: train.lr,
            epochs: train.epochs,
            lr_halving_period: train.lr_halving_period,
            train_data: None,
            eval_data: None,
            out_dir: PathBuf::from("run"),
            checkpoint: None,
            samples: 256,
            split: "train".to_string(),
            mix: [0.25; 4],
            bucket: None,
            distortions: Vec::new(),
            threshold: 0.5,
            aggregation: Aggregation::PerImage,
            threads: 1,
        }
    }
}

fn parse_list<T>(key: &str, value: &str, f: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    if value.trim().is_empty() || value.trim() == "none" {
        return Ok(Vec::new());
    }
    value.split(',').map(|p| f(p.trim())).collect::<Result<Vec<_>>>().map_err(|e| Error::Config(format!("{key}: {e}")))
}

impl RunConfig {
    /// Parses config text on top of the defaults. Blank lines and lines
    /// starting with `#` are ignored; unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if self.model.try_set(key, value)? {
            return Ok(());
        }
        let bad = |what: &str| Error::Config(format!("{key}: expected {what}, got {value:?}"));
        let uint = || value.parse::<usize>().map_err(|_| bad("a non-negative integer"));
        let float = || value.parse::<f64>().map_err(|_| bad("a number"));
        let path = || if value.is_empty() || value == "none" { None } else { Some(PathBuf::from(value)) };
        match key {
            "seed" => self.seed = if value == "none" { None } else { Some(value.parse().map_err(|_| bad("an unsigned integer"))?) },
            "batch_size" => self.batch_size = uint()?,
            "lr" => self.lr = float()?,
            "epochs" => self.epochs = uint()?,
            "lr_halving_period" => self.lr_halving_period = uint()?,
            "train_data" => self.train_data = path(),
            "eval_data" => self.eval_data = path(),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "checkpoint" => self.checkpoint = path(),
            "samples" => self.samples = uint()?,
            "split" => self.split = value.to_string(),
            "mix" => {
                let v = parse_list(key, value, |p| p.parse::<f64>().map_err(|_| bad("four comma-separated fractions")))?;
                self.mix = v.try_into().map_err(|_| bad("four comma-separated fractions"))?;
            }
            "bucket" => self.bucket = if value == "none" { None } else { Some(float()?) },
            "distort" => self.distortions = parse_list(key, value, |p| p.parse::<Distortion>())?,
            "threshold" => self.threshold = float()?,
            "aggregation" => self.aggregation = value.parse()?,
            "threads" => self.threads = uint()?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Every effective setting as strings, in key order.
    pub fn echo(&self) -> BTreeMap<String, String> {
        let mut out = BTreeMap::new();
        for line in self.model.arch_string().lines() {
            if let Some((k, v)) = line.split_once('=') {
                out.insert(k.to_string(), v.to_string());
            }
        }
        let p = |v: &Option<PathBuf>| v.as_ref().map_or_else(|| "none".to_string(), |p| p.display().to_string());
        let f = |v: f64| format!("{v:?}");
        let mix: Vec<String> = self.mix.iter().map(|v| f(*v)).collect();
        let dist: Vec<String> = self.distortions.iter().map(|d| d.to_string()).collect();
        for (k, v) in [
            ("seed", self.seed.map_or_else(|| "none".to_string(), |s| s.to_string())),
            ("batch_size", self.batch_size.to_string()),
            ("lr", f(self.lr)),
            ("epochs", self.epochs.to_string()),
            ("lr_halving_period", self.lr_halving_period.to_string()),
            ("train_data", p(&self.train_data)),
            ("eval_data", p(&self.eval_data)),
            ("out_dir", self.out_dir.display().to_string()),
            ("checkpoint", p(&self.checkpoint)),
            ("samples", self.samples.to_string()),
            ("split", self.split.clone()),
            ("mix", mix.join(",")),
            ("bucket", self.bucket.map_or_else(|| "none".to_string(), f)),
            ("distort", if dist.is_empty() { "none".to_string() } else { dist.join(",") }),
            ("threshold", f(self.threshold)),
            ("aggregation", self.aggregation.to_string()),
            ("threads", self.threads.to_string()),
        ] {
            out.insert(k.to_string(), v);
        }
        out
    }

    /// The echo as `key=value` lines; parses back to an equal config.
    pub fn to_text(&self) -> String {
        self.echo().iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn require_seed(&self) -> Result<u64> {
        self.seed.ok_or_else(|| Error::Config("a seed is required (--seed)".to_string()))
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            seed: self.require_seed()?,
            batch_size: self.batch_size,
            lr: self.lr,
            epochs: self.epochs,
            lr_halving_period: self.lr_halving_period,
        })
    }

    pub fn dataset_spec(&self) -> Result<DatasetSpec> {
        Ok(DatasetSpec {
            n: self.samples,
            seed: self.require_seed()?,
            size: self.model.backbone.input_size,
            mix: self.mix,
            bucket: self.bucket,
        })
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions { threshold: self.threshold, aggregation: self.aggregation, threads: self.threads }
    }
}

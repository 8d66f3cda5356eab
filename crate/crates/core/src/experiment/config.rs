//! Flat `key = value` experiment configuration.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::losses::{LambdaSchedule, LossKind, LossParams, LossSpec};
use crate::model::{Activation, Arch, SgdConfig};
use crate::noise::{NoiseKind, NoiseSpec};

/// Every key `parse_config` accepts.
pub const CONFIG_KEYS: &[&str] = &[
    "dataset",
    "mnist_dir",
    "cache_path",
    "cache_test_path",
    "synth_n",
    "synth_test_n",
    "synth_classes",
    "synth_dim",
    "synth_separation",
    "train_limit",
    "test_limit",
    "noise",
    "noise_rate",
    "flip_map",
    "loss",
    "focal_gamma",
    "gce_q",
    "rce_a",
    "agce_a",
    "agce_q",
    "alpha",
    "beta",
    "entropy_schedule",
    "arch",
    "depth",
    "hidden",
    "activation",
    "lr",
    "momentum",
    "nesterov",
    "weight_decay",
    "clip_norm",
    "batch_size",
    "epochs",
    "seed",
    "val_fraction",
    "output",
    "record_timing",
];

/// Where the samples come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// A directory holding the four standard MNIST IDX files.
    Mnist { dir: PathBuf },
    /// An `NLFC` cache for training, optionally another for testing.
    FeatureCache { train: PathBuf, test: Option<PathBuf> },
    /// Gaussian blobs; the test set comes from an independent stream.
    Synth {
        n: usize,
        test_n: usize,
        num_classes: usize,
        dim: usize,
        separation: f64,
    },
}

/// Label noise as configured. The class count is only known once the data
/// is loaded, so the flip map stays textual until then.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSetting {
    pub kind: NoiseKind,
    pub rate: f64,
    /// Builtin map name or `src>dst` list (asymmetric only).
    pub flip_map: Option<String>,
}

impl NoiseSetting {
    pub fn resolve(&self, num_classes: usize, seed: u64) -> Result<NoiseSpec> {
        let text = match (self.kind, &self.flip_map) {
            (NoiseKind::Symmetric, _) => format!("symmetric:{}", self.rate),
            (NoiseKind::Asymmetric, Some(map)) => format!("asymmetric:{}:{map}", self.rate),
            (NoiseKind::Asymmetric, None) => {
                return Err(Error::config("flip_map", "asymmetric noise needs a flip map"))
            }
        };
        NoiseSpec::parse(&text, num_classes, seed)
    }
}

impl fmt::Display for NoiseSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.kind, &self.flip_map) {
            (NoiseKind::Asymmetric, Some(m)) => write!(f, "asymmetric:{}:{m}", self.rate),
            _ => write!(f, "symmetric:{}", self.rate),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub source: DataSource,
    /// Keep only the first `n` training samples (before the split).
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    pub noise: Option<NoiseSetting>,
    pub loss: LossSpec,
    pub arch: Arch,
    pub optimizer: SgdConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub val_fraction: f64,
    pub output: Option<PathBuf>,
    /// Fill the `ms` column with wall-clock time. Off by default so that
    /// metrics files are reproducible byte for byte.
    pub record_timing: bool,
}

impl ExperimentConfig {
    /// A config with the documented defaults around the given source and loss.
    pub fn new(source: DataSource, loss: LossSpec) -> Self {
        Self {
            source,
            train_limit: None,
            test_limit: None,
            noise: None,
            loss,
            arch: Arch::Linear,
            optimizer: SgdConfig::default(),
            batch_size: 256,
            epochs: 100,
            seed: 0,
            val_fraction: 0.1,
            output: None,
            record_timing: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::config("val_fraction", "must be in (0, 1)"));
        }
        self.loss
            .validate()
            .map_err(|e| Error::config("loss", e.to_string()))?;
        if let Some(s) = &self.loss.entropy_schedule {
            if s.total_epochs != self.epochs {
                return Err(Error::config(
                    "entropy_schedule",
                    format!("spans {} epochs, run has {}", s.total_epochs, self.epochs),
                ));
            }
        }
        self.optimizer
            .validate()
            .map_err(|e| Error::config("optimizer", e.to_string()))?;
        if let Some(n) = &self.noise {
            let ok = match n.kind {
                NoiseKind::Symmetric => (0.0..=1.0).contains(&n.rate),
                NoiseKind::Asymmetric => (0.0..0.5).contains(&n.rate),
            };
            if !ok {
                return Err(Error::config("noise_rate", format!("{} out of range", n.rate)));
            }
            if n.kind == NoiseKind::Asymmetric && n.flip_map.is_none() {
                return Err(Error::config("flip_map", "asymmetric noise needs a flip map"));
            }
        }
        if let DataSource::Synth {
            n,
            test_n,
            num_classes,
            dim,
            separation,
        } = self.source
        {
            if num_classes < 2 || n < num_classes || test_n < num_classes {
                return Err(Error::config("synth_n", "need n, test_n >= synth_classes >= 2"));
            }
            if dim == 0 || num_classes > 2 * dim {
                return Err(Error::config("synth_dim", "need 1 <= d and classes <= 2d"));
            }
            if !(separation >= 0.0 && separation.is_finite()) {
                return Err(Error::config("synth_separation", "must be >= 0"));
            }
        }
        if let Arch::Mlp { depth, hidden, .. } = self.arch {
            if depth == 0 || hidden == 0 {
                return Err(Error::config("depth", "mlp depth and hidden must be >= 1"));
            }
        }
        Ok(())
    }

    /// Replaces the entropy schedule, rescaling it to this run's epochs.
    pub fn set_entropy_schedule(&mut self, schedule: Option<LambdaSchedule>) -> Result<()> {
        self.loss.entropy_schedule = match schedule {
            Some(s) => Some(LambdaSchedule::new(s.kind, s.lambda_max, self.epochs)?),
            None => None,
        };
        Ok(())
    }

    /// Changes the epoch budget and rescales any entropy schedule with it.
    pub fn set_epochs(&mut self, epochs: usize) -> Result<()> {
        if epochs == 0 {
            return Err(Error::config("epochs", "must be >= 1"));
        }
        self.epochs = epochs;
        let schedule = self.loss.entropy_schedule;
        self.set_entropy_schedule(schedule)
    }
}

/// Reads and parses a config file.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text)
}

/// Parses config text: one `key = value` per line, `#` starts a comment.
pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let mut entries = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or_default().trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::config(format!("line {}", lineno + 1), format!("expected `key = value`, got `{line}`"))
        })?;
        let key = key.trim();
        if !CONFIG_KEYS.contains(&key) {
            return Err(Error::config(key, "unknown key"));
        }
        if entries.insert(key.to_string(), value.trim().to_string()).is_some() {
            return Err(Error::config(key, "set more than once"));
        }
    }
    Entries(entries).build()
}

struct Entries(BTreeMap<String, String>);

impl Entries {
    fn raw(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.raw(key)
            .map(|v| {
                v.parse()
                    .map_err(|_| Error::config(key, format!("cannot parse `{v}`")))
            })
            .transpose()
    }

    fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    fn require(&self, key: &str) -> Result<&str> {
        self.raw(key).ok_or_else(|| Error::config(key, "required"))
    }

    fn flag(&self, key: &str) -> Result<bool> {
        match self.raw(key).map(str::to_ascii_lowercase).as_deref() {
            None => Ok(false),
            Some("true" | "yes" | "1" | "on") => Ok(true),
            Some("false" | "no" | "0" | "off") => Ok(false),
            Some(v) => Err(Error::config(key, format!("expected a boolean, got `{v}`"))),
        }
    }

    fn build(self) -> Result<ExperimentConfig> {
        let source = self.source()?;
        let loss = self.loss()?;
        let mut cfg = ExperimentConfig::new(source, loss);

        cfg.train_limit = self.get("train_limit")?;
        cfg.test_limit = self.get("test_limit")?;
        cfg.noise = self.noise()?;
        cfg.arch = self.arch()?;
        let defaults = SgdConfig::default();
        cfg.optimizer = SgdConfig {
            lr: self.get_or("lr", defaults.lr)?,
            momentum: self.get_or("momentum", defaults.momentum)?,
            nesterov: self.flag("nesterov")?,
            weight_decay: self.get_or("weight_decay", defaults.weight_decay)?,
            clip_norm: match self.raw("clip_norm") {
                Some("none") => f64::INFINITY,
                _ => self.get_or("clip_norm", defaults.clip_norm)?,
            },
        };
        cfg.batch_size = self.get_or("batch_size", cfg.batch_size)?;
        cfg.epochs = self.get_or("epochs", cfg.epochs)?;
        cfg.seed = self.get_or("seed", cfg.seed)?;
        cfg.val_fraction = self.get_or("val_fraction", cfg.val_fraction)?;
        cfg.output = self.raw("output").map(PathBuf::from);
        cfg.record_timing = self.flag("record_timing")?;

        if cfg.epochs == 0 {
            return Err(Error::config("epochs", "must be >= 1"));
        }
        cfg.loss.entropy_schedule = match self.raw("entropy_schedule") {
            None | Some("none") => None,
            Some(text) => Some(
                LambdaSchedule::parse(text, cfg.epochs)
                    .map_err(|e| Error::config("entropy_schedule", e.to_string()))?,
            ),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn source(&self) -> Result<DataSource> {
        match self.require("dataset")? {
            "mnist" => Ok(DataSource::Mnist {
                dir: PathBuf::from(self.raw("mnist_dir").unwrap_or("data/mnist")),
            }),
            "cache" => Ok(DataSource::FeatureCache {
                train: PathBuf::from(self.require("cache_path")?),
                test: self.raw("cache_test_path").map(PathBuf::from),
            }),
            "synth" => {
                let n: usize = self.get_or("synth_n", 2000)?;
                Ok(DataSource::Synth {
                    n,
                    test_n: self.get_or("synth_test_n", (n / 5).max(1))?,
                    num_classes: self.get_or("synth_classes", 2)?,
                    dim: self.get_or("synth_dim", 2)?,
                    separation: self.get_or("synth_separation", 5.0)?,
                })
            }
            other => Err(Error::config(
                "dataset",
                format!("expected mnist, cache or synth, got `{other}`"),
            )),
        }
    }

    fn loss(&self) -> Result<LossSpec> {
        let kind: LossKind = self
            .require("loss")?
            .parse()
            .map_err(|e: Error| Error::config("loss", e.to_string()))?;
        let d = LossParams::default();
        let params = LossParams {
            gamma: self.get_or("focal_gamma", d.gamma)?,
            gce_q: self.get_or("gce_q", d.gce_q)?,
            rce_log_zero: self.get_or("rce_a", d.rce_log_zero)?,
            agce_a: self.get_or("agce_a", d.agce_a)?,
            agce_q: self.get_or("agce_q", d.agce_q)?,
            alpha: self.get_or("alpha", d.alpha)?,
            beta: self.get_or("beta", d.beta)?,
        };
        LossSpec::new(kind, params, None).map_err(|e| Error::config("loss", e.to_string()))
    }

    fn noise(&self) -> Result<Option<NoiseSetting>> {
        let kind = match self.raw("noise").unwrap_or("none") {
            "none" => return Ok(None),
            "symmetric" | "sym" => NoiseKind::Symmetric,
            "asymmetric" | "asym" => NoiseKind::Asymmetric,
            other => {
                return Err(Error::config(
                    "noise",
                    format!("expected none, symmetric or asymmetric, got `{other}`"),
                ))
            }
        };
        let rate = self
            .get("noise_rate")?
            .ok_or_else(|| Error::config("noise_rate", "required when noise is set"))?;
        Ok(Some(NoiseSetting {
            kind,
            rate,
            flip_map: self.raw("flip_map").map(str::to_string),
        }))
    }

    fn arch(&self) -> Result<Arch> {
        match self.raw("arch").unwrap_or("linear") {
            "linear" => Ok(Arch::Linear),
            "mlp" => {
                let activation: Activation = match self.raw("activation") {
                    None => Activation::Relu,
                    Some(a) => a
                        .parse()
                        .map_err(|e: Error| Error::config("activation", e.to_string()))?,
                };
                Ok(Arch::Mlp {
                    depth: self.get_or("depth", 3)?,
                    hidden: self.get_or("hidden", 256)?,
                    activation,
                })
            }
            other => Err(Error::config("arch", format!("expected linear or mlp, got `{other}`"))),
        }
    }
}

//! Experiment configuration: flat `key = value` text with `[section]`
//! headers, chosen for diff-friendliness. Every command validates the
//! whole config before doing any work.

use crate::denoise::NoiseModel;
use crate::network::Architecture;
use crate::operators::{OperatorLibrary, OperatorSet};
use crate::optim::{OptimizerConfig, OptimizerKind};
use crate::spm::SpmConfig;
use crate::{Error, Result};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    // [dataset]
    pub dataset_path: PathBuf,
    pub dataset_count: usize,
    // [noise]
    pub noise: NoiseModel,
    // [architecture]
    pub architecture: Architecture,
    // [operators]
    pub library: OperatorLibrary,
    // [spm]
    pub spm: SpmConfig,
    pub probe_images: usize,
    // [optimizer]
    pub onn_optimizer: OptimizerConfig,
    pub cnn_optimizer: OptimizerConfig,
    // [protocol]
    pub fold_count: usize,
    pub folds_to_run: usize,
    pub restarts: usize,
    pub epochs: usize,
    pub max_epochs: usize,
    // [run]
    pub seed: u64,
    pub workers: usize,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset_path: PathBuf::from("images"),
            dataset_count: 1000,
            noise: NoiseModel::Impulse { p: 0.4 },
            architecture: Architecture {
                input_shape: (60, 60),
                hidden: vec![12, 12],
                kernel: (3, 3),
            },
            library: OperatorLibrary::full(),
            spm: SpmConfig::default(),
            probe_images: 30,
            onn_optimizer: OptimizerConfig::new(OptimizerKind::VarianceAdam),
            cnn_optimizer: OptimizerConfig::new(OptimizerKind::Adam),
            fold_count: 10,
            folds_to_run: 3,
            restarts: 3,
            epochs: 100,
            max_epochs: 100,
            seed: 17,
            workers: 0,
            out_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut config = ExperimentConfig::default();
        let mut section = String::new();
        for (line_no, raw) in text.lines().enumerate() {
            let line = raw.split(&['#', ';'][..]).next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value", line_no + 1))
            })?;
            config.apply(&section, key.trim(), value.trim())?;
        }
        Ok(config)
    }

    /// Apply one `section.key=value` override (the CLI `--set` flag).
    pub fn apply_override(&mut self, setting: &str) -> Result<()> {
        let (path, value) = setting
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {setting:?}: expected key=value")))?;
        let (section, key) = path
            .trim()
            .split_once('.')
            .ok_or_else(|| Error::Config(format!("override {setting:?}: expected section.key")))?;
        self.apply(section, key, value.trim())
    }

    fn apply(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        let unknown = || Error::Config(format!("unknown config key [{section}] {key}"));
        match section {
            "dataset" => match key {
                "path" => self.dataset_path = PathBuf::from(value),
                "count" => self.dataset_count = parse_num(section, key, value)?,
                _ => return Err(unknown()),
            },
            "noise" => match key {
                "kind" => {
                    self.noise = match value {
                        "impulse" => NoiseModel::Impulse {
                            p: match self.noise {
                                NoiseModel::Impulse { p } => p,
                                _ => 0.4,
                            },
                        },
                        "speckle" => NoiseModel::Speckle {
                            shape: match self.noise {
                                NoiseModel::Speckle { shape } => shape,
                                _ => 1,
                            },
                        },
                        other => {
                            return Err(Error::Config(format!("unknown noise kind {other:?}")))
                        }
                    }
                }
                "p" => {
                    let p = parse_num(section, key, value)?;
                    if let NoiseModel::Impulse { p: slot } = &mut self.noise {
                        *slot = p;
                    } else {
                        return Err(Error::Config(
                            "noise.p only applies to impulse noise (set kind first)".into(),
                        ));
                    }
                }
                "m" => {
                    let m = parse_num(section, key, value)?;
                    if let NoiseModel::Speckle { shape } = &mut self.noise {
                        *shape = m;
                    } else {
                        return Err(Error::Config(
                            "noise.m only applies to speckle noise (set kind first)".into(),
                        ));
                    }
                }
                _ => return Err(unknown()),
            },
            "architecture" => match key {
                "input" => {
                    let side: usize = parse_num(section, key, value)?;
                    self.architecture.input_shape = (side, side);
                }
                "hidden" => {
                    self.architecture.hidden = value
                        .split(',')
                        .map(|v| parse_num(section, key, v.trim()))
                        .collect::<Result<Vec<usize>>>()?;
                }
                "kernel" => {
                    let k: usize = parse_num(section, key, value)?;
                    self.architecture.kernel = (k, k);
                }
                _ => return Err(unknown()),
            },
            "operators" => match key {
                "library" => {
                    self.library = if value == "full" {
                        OperatorLibrary::full()
                    } else {
                        let sets = value
                            .split(',')
                            .map(|id| OperatorSet::parse(id.trim()))
                            .collect::<Result<Vec<_>>>()?;
                        OperatorLibrary::from_sets(sets)?
                    };
                }
                _ => return Err(unknown()),
            },
            "spm" => match key {
                "gamma" => self.spm.gamma = parse_num(section, key, value)?,
                "runs" => self.spm.runs = parse_num(section, key, value)?,
                "top_k" => self.spm.top_k = parse_num(section, key, value)?,
                "m_iters" => self.spm.m_iters = parse_num(section, key, value)?,
                "confinement_threshold" => {
                    self.spm.confinement_threshold = parse_num(section, key, value)?
                }
                "average_windows" => self.spm.average_windows = parse_bool(section, key, value)?,
                "probe_images" => self.probe_images = parse_num(section, key, value)?,
                _ => return Err(unknown()),
            },
            "optimizer" => match key {
                "optimizer" => self.onn_optimizer.kind = OptimizerKind::parse(value)?,
                "cnn" => self.cnn_optimizer.kind = OptimizerKind::parse(value)?,
                "lr" => {
                    let lr = parse_num(section, key, value)?;
                    self.onn_optimizer.lr = lr;
                    self.cnn_optimizer.lr = lr;
                }
                "beta1" => {
                    let b = parse_num(section, key, value)?;
                    self.onn_optimizer.beta1 = b;
                    self.cnn_optimizer.beta1 = b;
                }
                "beta2" => {
                    let b = parse_num(section, key, value)?;
                    self.onn_optimizer.beta2 = b;
                    self.cnn_optimizer.beta2 = b;
                }
                "eps" => {
                    let e = parse_num(section, key, value)?;
                    self.onn_optimizer.eps = e;
                    self.cnn_optimizer.eps = e;
                }
                _ => return Err(unknown()),
            },
            "protocol" => match key {
                "folds" => self.fold_count = parse_num(section, key, value)?,
                "folds_to_run" => self.folds_to_run = parse_num(section, key, value)?,
                "restarts" => self.restarts = parse_num(section, key, value)?,
                "epochs" => self.epochs = parse_num(section, key, value)?,
                "max_epochs" => self.max_epochs = parse_num(section, key, value)?,
                _ => return Err(unknown()),
            },
            "run" => match key {
                "seed" => self.seed = parse_num(section, key, value)?,
                "workers" => self.workers = parse_num(section, key, value)?,
                "out" => self.out_dir = PathBuf::from(value),
                _ => return Err(unknown()),
            },
            _ => {
                return Err(Error::Config(format!(
                    "unknown config section [{section}]"
                )))
            }
        }
        Ok(())
    }

    /// Full fail-fast validation. `needs_dataset` commands also require
    /// the dataset path to exist.
    pub fn validate(&self, needs_dataset: bool) -> Result<()> {
        self.noise.validate()?;
        let (m, n) = self.architecture.kernel;
        if m == 0 || n == 0 || m % 2 == 0 || n % 2 == 0 {
            return Err(Error::Config(format!("kernel extents must be odd, got {m}x{n}")));
        }
        if self.architecture.hidden.is_empty()
            || self.architecture.hidden.iter().any(|&h| h == 0)
        {
            return Err(Error::Config("hidden layer sizes must be positive".into()));
        }
        if self.library.is_empty() {
            return Err(Error::Config("operator library must not be empty".into()));
        }
        self.spm.validate(self.library.len())?;
        if self.epochs == 0 || self.epochs > self.max_epochs {
            return Err(Error::Config(format!(
                "epochs must be in 1..={} (max_epochs)",
                self.max_epochs
            )));
        }
        if self.folds_to_run == 0 || self.folds_to_run > self.fold_count {
            return Err(Error::Config(format!(
                "folds_to_run must be in 1..={}",
                self.fold_count
            )));
        }
        if self.restarts == 0 {
            return Err(Error::Config("restarts must be at least 1".into()));
        }
        if self.probe_images == 0 {
            return Err(Error::Config("probe_images must be at least 1".into()));
        }
        if needs_dataset && !self.dataset_path.exists() {
            return Err(Error::Config(format!(
                "dataset path {} does not exist",
                self.dataset_path.display()
            )));
        }
        Ok(())
    }
}

fn parse_num<T: std::str::FromStr>(section: &str, key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| {
        Error::Config(format!(
            "[{section}] {key}: cannot parse {value:?} as {}",
            std::any::type_name::<T>()
        ))
    })
}

fn parse_bool(section: &str, key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!(
            "[{section}] {key}: cannot parse {value:?} as bool"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "\
# experiment settings
[dataset]
path = ./images
count = 500

[noise]
kind = speckle
m = 5

[architecture]
input = 60
hidden = 12, 12
kernel = 3

[operators]
library = mul-sum-tanh, log-median-lincut

[spm]
gamma = 40
runs = 2
top_k = 2
m_iters = 80
probe_images = 10

[optimizer]
optimizer = vadam
cnn = adam
lr = 0.002

[protocol]
folds = 10
folds_to_run = 2
restarts = 3
epochs = 50

[run]
seed = 99
workers = 2
out = ./results
";

    #[test]
    fn parses_full_config() {
        let cfg = ExperimentConfig::parse(SAMPLE).unwrap();
        assert_eq!(cfg.dataset_count, 500);
        assert_eq!(cfg.noise, NoiseModel::Speckle { shape: 5 });
        assert_eq!(cfg.architecture.hidden, vec![12, 12]);
        assert_eq!(cfg.library.len(), 2);
        assert_eq!(cfg.spm.gamma, 40);
        assert_eq!(cfg.probe_images, 10);
        assert_eq!(cfg.onn_optimizer.kind, OptimizerKind::VarianceAdam);
        assert_eq!(cfg.cnn_optimizer.kind, OptimizerKind::Adam);
        assert!((cfg.onn_optimizer.lr - 0.002).abs() < 1e-15);
        assert!((cfg.cnn_optimizer.lr - 0.002).abs() < 1e-15);
        assert_eq!(cfg.folds_to_run, 2);
        assert_eq!(cfg.epochs, 50);
        assert_eq!(cfg.seed, 99);
        cfg.validate(false).unwrap();
    }

    #[test]
    fn defaults_follow_experiment_setup() {
        let cfg = ExperimentConfig::default();
        assert_eq!(cfg.architecture.hidden, vec![12, 12]);
        assert_eq!(cfg.spm.gamma, 80);
        assert_eq!(cfg.spm.runs, 4);
        assert_eq!(cfg.spm.top_k, 3);
        assert_eq!(cfg.noise, NoiseModel::Impulse { p: 0.4 });
        assert_eq!(cfg.max_epochs, 100);
        assert_eq!(cfg.library.len(), 72);
        cfg.validate(false).unwrap();
    }

    #[test]
    fn rejects_unknown_keys_and_sections() {
        assert!(ExperimentConfig::parse("[dataset]\nfoo = 1").is_err());
        assert!(ExperimentConfig::parse("[mystery]\npath = x").is_err());
        assert!(ExperimentConfig::parse("[dataset]\nno-equals-here").is_err());
    }

    #[test]
    fn overrides_apply() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_override("protocol.epochs=25").unwrap();
        assert_eq!(cfg.epochs, 25);
        cfg.apply_override("noise.kind=speckle").unwrap();
        cfg.apply_override("noise.m=5").unwrap();
        assert_eq!(cfg.noise, NoiseModel::Speckle { shape: 5 });
        assert!(cfg.apply_override("bogus").is_err());
        assert!(cfg.apply_override("protocol.epochs=abc").is_err());
    }

    #[test]
    fn validation_fails_fast() {
        let mut cfg = ExperimentConfig::default();
        cfg.epochs = 200; // above the cap
        assert!(cfg.validate(false).is_err());

        let mut cfg = ExperimentConfig::default();
        cfg.architecture.kernel = (2, 2);
        assert!(cfg.validate(false).is_err());

        let mut cfg = ExperimentConfig::default();
        cfg.dataset_path = PathBuf::from("/definitely/not/here");
        assert!(cfg.validate(true).is_err());
        assert!(cfg.validate(false).is_ok());

        let mut cfg = ExperimentConfig::default();
        cfg.noise = NoiseModel::Impulse { p: 1.5 };
        assert!(cfg.validate(false).is_err());
    }
}

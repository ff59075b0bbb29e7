//! Flat `key = value` experiment configuration.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::warn;

use crate::error::{Error, Result};
use crate::growth::{Orientation, Strategy};
use crate::network::PRESETS;
use crate::trainer::{PostGrowthSchedule, Schedule, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetChoice {
    /// 2-D points.
    Blobs,
    /// 1x8x8 rasterized points.
    BlobsRaster,
    Mnist,
    Cifar10,
}

impl DatasetChoice {
    pub fn name(self) -> &'static str {
        match self {
            DatasetChoice::Blobs => "blobs",
            DatasetChoice::BlobsRaster => "blobs-raster",
            DatasetChoice::Mnist => "mnist",
            DatasetChoice::Cifar10 => "cifar10",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub run: String,
    pub out: PathBuf,
    pub preset: String,
    pub dataset: DatasetChoice,
    pub data_dir: Option<PathBuf>,
    pub classes: usize,
    pub n_per_class: usize,
    pub noise: f64,
    /// Held-out examples for synthetic data.
    pub test_size: usize,
    /// Keep only this many training examples (seeded).
    pub train_subset: Option<usize>,
    pub data_seed: u64,
    pub train: TrainConfig,
    pub small1: Option<PathBuf>,
    pub small2: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    /// Save a checkpoint every this many epochs; 0 keeps only the final one.
    pub checkpoint_every: usize,
    pub checkpoints: Vec<PathBuf>,
    pub model_a: Option<PathBuf>,
    pub model_b: Option<PathBuf>,
    pub cka_layer: Option<usize>,
    pub probe_size: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            run: "run".into(),
            out: PathBuf::from("runs"),
            preset: String::new(),
            dataset: DatasetChoice::Blobs,
            data_dir: None,
            classes: 10,
            n_per_class: 200,
            noise: 0.35,
            test_size: 500,
            train_subset: None,
            data_seed: 0,
            train: TrainConfig::default(),
            small1: None,
            small2: None,
            resume: None,
            checkpoint_every: 0,
            checkpoints: Vec::new(),
            model_a: None,
            model_b: None,
            cka_layer: None,
            probe_size: crate::analysis::PROBE_SIZE,
        }
    }
}

impl ExperimentConfig {
    pub fn run_dir(&self) -> PathBuf {
        self.out.join(&self.run)
    }
}

pub const KEYS: &[&str] = &[
    "run", "out", "preset", "dataset", "data_dir", "classes", "n_per_class", "noise", "test_size",
    "train_subset", "data_seed", "lr", "momentum", "weight_decay", "decay_coefficients",
    "batch_size", "epochs", "schedule", "milestones", "step_factor", "post_growth", "seed",
    "eval_every", "augment", "templates", "train_edge_coefficients", "budget_norm",
    "count_pretrained", "g", "strategy", "fusion", "orientation", "growth_epoch", "rescale_last",
    "small1", "small2", "resume", "checkpoint_every", "checkpoints", "model_a", "model_b",
    "cka_layer", "probe_size",
];

/// Parses `key = value` lines. `#` starts a comment. Later duplicates win.
pub fn parse_pairs(text: &str, origin: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("{origin}:{}: expected `key = value`, got `{line}`", n + 1)))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

fn typed<T: FromStr>(key: &str, value: &str, expected: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for key `{key}`: expected {expected}")))
}

fn boolean(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!(
            "invalid value `{value}` for key `{key}`: expected true or false"
        ))),
    }
}

fn optional_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn list<T: FromStr>(key: &str, value: &str, expected: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| typed(key, s, expected))
        .collect()
}

/// Reads the optional file, then applies `key=value` overrides in order.
pub fn parse_config(path: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut pairs = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            parse_pairs(&text, &p.display().to_string())?
        }
        None => Vec::new(),
    };
    for o in overrides {
        pairs.extend(parse_pairs(o, "--set")?);
    }
    config_from_pairs(&pairs)
}

pub fn config_from_pairs(pairs: &[(String, String)]) -> Result<ExperimentConfig> {
    let mut map: BTreeMap<&str, &str> = BTreeMap::new();
    let mut order = Vec::new();
    for (k, v) in pairs {
        if !KEYS.contains(&k.as_str()) {
            return Err(Error::Config(format!("unknown key `{k}`")));
        }
        if map.insert(k, v).is_some() {
            warn!("key `{k}` given more than once; using the last value");
        } else {
            order.push(k.as_str());
        }
    }

    let mut c = ExperimentConfig::default();
    let (mut milestones, mut step_factor, mut schedule) = (Vec::new(), 0.1, "cosine");
    for key in order {
        let v = map[key];
        let t = &mut c.train;
        match key {
            "run" => c.run = v.to_string(),
            "out" => c.out = PathBuf::from(v),
            "preset" => {
                if !PRESETS.contains(&v) {
                    return Err(Error::Config(format!(
                        "invalid value `{v}` for key `preset`: expected one of {}",
                        PRESETS.join(", ")
                    )));
                }
                c.preset = v.to_string();
            }
            "dataset" => {
                c.dataset = [
                    DatasetChoice::Blobs,
                    DatasetChoice::BlobsRaster,
                    DatasetChoice::Mnist,
                    DatasetChoice::Cifar10,
                ]
                .into_iter()
                .find(|d| d.name() == v)
                .ok_or_else(|| {
                    Error::Config(format!(
                        "invalid value `{v}` for key `dataset`: expected blobs, blobs-raster, mnist or cifar10"
                    ))
                })?
            }
            "data_dir" => c.data_dir = optional_path(v),
            "classes" => c.classes = typed(key, v, "an integer")?,
            "n_per_class" => c.n_per_class = typed(key, v, "an integer")?,
            "noise" => c.noise = typed(key, v, "a number")?,
            "test_size" => c.test_size = typed(key, v, "an integer")?,
            "train_subset" => c.train_subset = Some(typed(key, v, "an integer")?),
            "data_seed" => c.data_seed = typed(key, v, "an integer")?,
            "lr" => t.lr = typed(key, v, "a number")?,
            "momentum" => t.momentum = typed(key, v, "a number")?,
            "weight_decay" => t.weight_decay = typed(key, v, "a number")?,
            "decay_coefficients" => t.decay_coefficients = boolean(key, v)?,
            "batch_size" => t.batch_size = typed(key, v, "an integer")?,
            "epochs" => t.epochs = typed(key, v, "an integer")?,
            "schedule" => {
                schedule = match v {
                    "cosine" => "cosine",
                    "step" => "step",
                    _ => {
                        return Err(Error::Config(format!(
                            "invalid value `{v}` for key `schedule`: expected cosine or step"
                        )))
                    }
                }
            }
            "milestones" => milestones = list(key, v, "comma-separated integers")?,
            "step_factor" => step_factor = typed(key, v, "a number")?,
            "post_growth" => {
                t.post_growth = match v {
                    "restart" => PostGrowthSchedule::Restart,
                    "continue" => PostGrowthSchedule::Continue,
                    _ => {
                        return Err(Error::Config(format!(
                            "invalid value `{v}` for key `post_growth`: expected restart or continue"
                        )))
                    }
                }
            }
            "seed" => t.seed = typed(key, v, "an integer")?,
            "eval_every" => t.eval_every = typed(key, v, "an integer")?,
            "augment" => t.augment = boolean(key, v)?,
            "templates" => t.templates = typed(key, v, "an integer")?,
            "train_edge_coefficients" => t.train_edge_coefficients = boolean(key, v)?,
            "budget_norm" => t.budget_norm = typed(key, v, "a number")?,
            "count_pretrained" => t.count_pretrained = boolean(key, v)?,
            "g" => t.growth.g = typed(key, v, "an integer")?,
            "strategy" => {
                t.growth.strategy = Strategy::parse(v).ok_or_else(|| {
                    Error::Config(format!(
                        "invalid value `{v}` for key `strategy`: expected random, copy, orthogonal or baseline_random_weights"
                    ))
                })?
            }
            "fusion" => t.growth.fusion = boolean(key, v)?,
            "orientation" => {
                t.growth.orientation = Orientation::parse(v).ok_or_else(|| {
                    Error::Config(format!(
                        "invalid value `{v}` for key `orientation`: expected vertical or horizontal"
                    ))
                })?
            }
            "growth_epoch" => t.growth.growth_epoch = typed(key, v, "an integer")?,
            "rescale_last" => t.growth.rescale_last = boolean(key, v)?,
            "small1" => c.small1 = optional_path(v),
            "small2" => c.small2 = optional_path(v),
            "resume" => c.resume = optional_path(v),
            "checkpoint_every" => c.checkpoint_every = typed(key, v, "an integer")?,
            "checkpoints" => c.checkpoints = list(key, v, "comma-separated paths")?,
            "model_a" => c.model_a = optional_path(v),
            "model_b" => c.model_b = optional_path(v),
            "cka_layer" => c.cka_layer = Some(typed(key, v, "an integer")?),
            "probe_size" => c.probe_size = typed(key, v, "an integer")?,
            _ => unreachable!("key list and match arms disagree on `{key}`"),
        }
    }
    if c.preset.is_empty() {
        return Err(Error::Config("missing required key `preset`".into()));
    }
    if c.run.is_empty() || c.run.contains(['/', '\\']) {
        return Err(Error::Config(format!("invalid value `{}` for key `run`", c.run)));
    }
    if schedule == "step" {
        c.train.schedule = Schedule::Step {
            milestones,
            factor: step_factor,
        };
    } else if !milestones.is_empty() {
        warn!("`milestones` ignored by the cosine schedule");
    }
    if c.probe_size < 2 {
        return Err(Error::Config("probe_size must be >= 2".into()));
    }
    c.train.validate()?;
    Ok(c)
}

//! Run configuration files: sectioned `key = value` text.
//!
//! ```text
//! [model]
//! variant = PSTA_TCN
//! window = 32
//! horizon = 32
//!
//! [train]
//! epochs = 30
//!
//! [data]
//! synth_sensors = 4        # or: csv = recording.csv
//! synth_length = 20000
//!
//! [output]
//! dir = runs
//!
//! [grid]
//! variant = PSTA_TCN, TCN
//! seed = 1111, 1112, 1113
//! ```
//!
//! `#` starts a comment. `[grid]` lists comma-separated alternatives for any
//! model or train key; cells are the Cartesian product in the order the keys
//! appear. The train seed also seeds model initialization unless `[model]`
//! sets its own.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{SplitRatio, SynthParams};
use crate::error::{Error, Result};
use crate::model::{ModelSpec, Variant};
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum DataSource {
    Csv { path: PathBuf, target: String },
    Synth(SynthParams),
}

/// Fully resolved settings for one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// `n_exog` is `None` until the data fixes it.
    pub model: ModelSpec,
    pub n_exog: Option<usize>,
    pub train: TrainConfig,
    pub data: DataSource,
    pub split: SplitRatio,
    pub output_dir: PathBuf,
    /// Test windows whose attention weights go into the report.
    pub attention_samples: usize,
}

/// One grid cell: a config plus the grid values that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub config: RunConfig,
    pub tags: Vec<(String, String)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConfigFile {
    pub base: RunConfig,
    /// `(key, alternatives)` in file order.
    pub grid: Vec<(String, Vec<String>)>,
}

const MODEL_KEYS: &[&str] = &[
    "variant",
    "n_exog",
    "window",
    "horizon",
    "kernel_size",
    "levels",
    "hidden",
    "dropout",
    "seed",
];
const TRAIN_KEYS: &[&str] = &["batch_size", "learning_rate", "epochs", "seed", "beta1", "beta2", "eps"];
const DATA_KEYS: &[&str] = &[
    "csv",
    "target",
    "split",
    "synth_sensors",
    "synth_length",
    "synth_noise",
    "synth_seed",
];
const OUTPUT_KEYS: &[&str] = &["dir", "attention_samples"];

fn parse_value<T: std::str::FromStr>(field: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(field, format!("cannot parse `{value}`")))
}

fn parse_ratio(value: &str) -> Result<SplitRatio> {
    let (a, b) = value
        .split_once(':')
        .ok_or_else(|| Error::config("data.split", format!("expected `train:test`, got `{value}`")))?;
    let ratio = SplitRatio {
        train: parse_value("data.split", a.trim())?,
        test: parse_value("data.split", b.trim())?,
    };
    if ratio.train == 0 || ratio.test == 0 {
        return Err(Error::config("data.split", "both parts must be positive"));
    }
    Ok(ratio)
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelSpec::default(),
            n_exog: None,
            train: TrainConfig::default(),
            data: DataSource::Synth(SynthParams::default()),
            split: SplitRatio::default(),
            output_dir: PathBuf::from("runs"),
            attention_samples: 0,
        }
    }
}

impl RunConfig {
    /// Sets one `section.key`; `seed` under `train` also drives the model
    /// unless `model_seed_pinned`.
    fn set(&mut self, section: &str, key: &str, value: &str, model_seed_pinned: bool) -> Result<()> {
        let field = format!("{section}.{key}");
        let f = field.as_str();
        match (section, key) {
            ("model", "variant") => {
                self.model.variant = value
                    .parse::<Variant>()
                    .map_err(|_| Error::config(f, format!("unknown variant `{value}`")))?
            }
            ("model", "n_exog") => self.n_exog = Some(parse_value(f, value)?),
            ("model", "window") => self.model.window = parse_value(f, value)?,
            ("model", "horizon") => self.model.horizon = parse_value(f, value)?,
            ("model", "kernel_size") => self.model.kernel_size = parse_value(f, value)?,
            ("model", "levels") => self.model.levels = parse_value(f, value)?,
            ("model", "hidden") => self.model.hidden = parse_value(f, value)?,
            ("model", "dropout") => self.model.dropout = parse_value(f, value)?,
            ("model", "seed") => self.model.seed = parse_value(f, value)?,
            ("train", "batch_size") => self.train.batch_size = parse_value(f, value)?,
            ("train", "learning_rate") => self.train.adam.learning_rate = parse_value(f, value)?,
            ("train", "epochs") => self.train.epochs = parse_value(f, value)?,
            ("train", "seed") => {
                self.train.seed = parse_value(f, value)?;
                if !model_seed_pinned {
                    self.model.seed = self.train.seed;
                }
            }
            ("train", "beta1") => self.train.adam.beta1 = parse_value(f, value)?,
            ("train", "beta2") => self.train.adam.beta2 = parse_value(f, value)?,
            ("train", "eps") => self.train.adam.eps = parse_value(f, value)?,
            ("data", "split") => self.split = parse_ratio(value)?,
            ("output", "dir") => self.output_dir = PathBuf::from(value),
            ("output", "attention_samples") => self.attention_samples = parse_value(f, value)?,
            _ => return Err(Error::config(f, "unknown key")),
        }
        Ok(())
    }

    /// Checks everything that can be checked before data is loaded.
    pub fn validate(&self) -> Result<()> {
        let mut spec = self.model.clone();
        spec.n_exog = self.n_exog.unwrap_or(1);
        spec.validate()?;
        self.train.validate()?;
        if let DataSource::Synth(p) = &self.data {
            if p.length == 0 {
                return Err(Error::config("data.synth_length", "must be at least 1"));
            }
            if p.sensors == 0 {
                return Err(Error::config("data.synth_sensors", "must be at least 1"));
            }
            if !p.noise_std.is_finite() || p.noise_std < 0.0 {
                return Err(Error::config("data.synth_noise", "must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

/// Splits `text` into `(line number, section, key, value)` entries.
fn entries(text: &str) -> Result<Vec<(usize, String, String, String)>> {
    let mut section = String::new();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| Error::config(format!("line {line_no}"), "unterminated section header"))?
                .trim();
            if !["model", "train", "data", "output", "grid"].contains(&name) {
                return Err(Error::config(
                    format!("line {line_no}"),
                    format!("unknown section [{name}]"),
                ));
            }
            section = name.to_string();
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::config(
                format!("line {line_no}"),
                format!("expected `key = value`, got `{line}`"),
            )
        })?;
        if section.is_empty() {
            return Err(Error::config(format!("line {line_no}"), "key outside any section"));
        }
        out.push((line_no, section.clone(), k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Section owning a grid key: model keys win except `seed`, which follows
/// the train seed.
fn grid_section(key: &str) -> Option<&'static str> {
    if key == "seed" {
        Some("train")
    } else if MODEL_KEYS.contains(&key) {
        Some("model")
    } else if TRAIN_KEYS.contains(&key) {
        Some("train")
    } else {
        None
    }
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let entries = entries(text)?;
        let mut seen = std::collections::HashSet::new();
        for (line, section, key, _) in &entries {
            if !seen.insert((section.clone(), key.clone())) {
                return Err(Error::config(
                    format!("{section}.{key}"),
                    format!("set twice (line {line})"),
                ));
            }
        }
        let model_seed_pinned = entries.iter().any(|(_, s, k, _)| s == "model" && k == "seed");
        let mut base = RunConfig::default();
        let mut csv = None;
        let mut target = None;
        let mut synth = SynthParams::default();
        let mut synth_keys = false;
        let mut grid = Vec::new();
        for (_, section, key, value) in &entries {
            let field = format!("{section}.{key}");
            match section.as_str() {
                "data" => match key.as_str() {
                    "csv" => csv = Some(PathBuf::from(value)),
                    "target" => target = Some(value.clone()),
                    "synth_sensors" => (synth.sensors, synth_keys) = (parse_value(&field, value)?, true),
                    "synth_length" => (synth.length, synth_keys) = (parse_value(&field, value)?, true),
                    "synth_noise" => (synth.noise_std, synth_keys) = (parse_value(&field, value)?, true),
                    "synth_seed" => (synth.seed, synth_keys) = (parse_value(&field, value)?, true),
                    _ if DATA_KEYS.contains(&key.as_str()) => base.set(section, key, value, model_seed_pinned)?,
                    _ => return Err(Error::config(field, "unknown key")),
                },
                "grid" => {
                    let owner = grid_section(key).ok_or_else(|| Error::config(&field, "not a model or train key"))?;
                    let values: Vec<String> = value
                        .split(',')
                        .map(|v| v.trim().to_string())
                        .filter(|v| !v.is_empty())
                        .collect();
                    if values.is_empty() {
                        return Err(Error::config(field, "lists no values"));
                    }
                    // Parse every alternative now so a bad value fails early.
                    for v in &values {
                        base.clone().set(owner, key, v, model_seed_pinned)?;
                    }
                    grid.push((key.clone(), values));
                }
                "output" if !OUTPUT_KEYS.contains(&key.as_str()) => return Err(Error::config(field, "unknown key")),
                _ => base.set(section, key, value, model_seed_pinned)?,
            }
        }
        base.data = match (csv, synth_keys) {
            (Some(_), true) => return Err(Error::config("data", "give either `csv` or `synth_*` keys, not both")),
            (Some(path), false) => DataSource::Csv {
                path,
                target: target.unwrap_or_else(|| "acc_res".into()),
            },
            (None, true) => {
                if target.is_some() {
                    return Err(Error::config("data.target", "only applies to csv data"));
                }
                DataSource::Synth(synth)
            }
            (None, false) => return Err(Error::config("data", "no data source: set `csv` or `synth_*` keys")),
        };
        base.validate()?;
        Ok(ConfigFile { base, grid })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("config", format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn model_seed_pinned(&self) -> bool {
        self.base.model.seed != self.base.train.seed
    }

    /// Cartesian product of the grid over the base config; an empty grid
    /// yields no cells.
    pub fn cells(&self) -> Result<Vec<Cell>> {
        expand(&self.base, &self.grid, self.model_seed_pinned())
    }

    /// One cell per variant, crossed with any non-variant grid keys.
    pub fn ablation_cells(&self) -> Result<Vec<Cell>> {
        let mut grid: Vec<(String, Vec<String>)> = vec![(
            "variant".into(),
            Variant::ALL.iter().map(|v| v.name().to_string()).collect(),
        )];
        grid.extend(self.grid.iter().filter(|(k, _)| k != "variant").cloned());
        expand(&self.base, &grid, self.model_seed_pinned())
    }
}

fn expand(base: &RunConfig, grid: &[(String, Vec<String>)], model_seed_pinned: bool) -> Result<Vec<Cell>> {
    if grid.is_empty() {
        return Ok(Vec::new());
    }
    let mut cells = vec![Cell {
        config: base.clone(),
        tags: Vec::new(),
    }];
    for (key, values) in grid {
        let owner =
            grid_section(key).ok_or_else(|| Error::config(format!("grid.{key}"), "not a model or train key"))?;
        let mut next = Vec::with_capacity(cells.len() * values.len());
        for cell in &cells {
            for v in values {
                let mut c = cell.clone();
                c.config.set(owner, key, v, model_seed_pinned)?;
                c.tags.push((key.clone(), v.clone()));
                next.push(c);
            }
        }
        cells = next;
    }
    for c in &cells {
        c.config.validate()?;
    }
    Ok(cells)
}

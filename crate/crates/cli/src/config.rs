//! INI experiment configuration.
//!
//! Every key lives under a `[section]`; unknown sections and keys are
//! rejected so a typo can't silently fall back to a default.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ini::Ini;
use swbn::{BackwardMode, Criterion};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    MnistIdx,
    Blobs,
    Gaussian,
}

impl FromStr for DatasetKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "mnist-idx" => Ok(Self::MnistIdx),
            "blobs" => Ok(Self::Blobs),
            "gaussian" => Ok(Self::Gaussian),
            _ => Err("expected mnist-idx, blobs or gaussian".into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSection {
    /// Norm kinds to compare; `None` is a plain MLP.
    pub norms: Vec<Option<String>>,
    pub hidden: Vec<usize>,
    pub alpha: f64,
    pub eta: f64,
    pub iternorm_t: usize,
    pub backward_mode: BackwardMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub lr_halving_period: usize,
    pub seeds: Vec<u64>,
    pub eval_batch_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSection {
    pub dataset: DatasetKind,
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    pub n_train: usize,
    pub n_test: usize,
    pub dim: usize,
    pub classes: usize,
    pub separation: f64,
    pub rho: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PgmMapping {
    Magnitude,
    Signed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputSection {
    pub out_dir: PathBuf,
    pub timing: bool,
    pub checkpoints: bool,
    pub pgm_scale: PgmMapping,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WhitenSection {
    pub criteria: Vec<Criterion>,
    pub alphas: Vec<f64>,
    pub d: usize,
    pub rho: f64,
    /// Optional CSV correlation matrix; overrides `d` and `rho`.
    pub sigma: Option<PathBuf>,
    pub max_iters: usize,
    pub tol: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapSection {
    pub checkpoint: Option<PathBuf>,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchSection {
    pub layers: Vec<String>,
    pub dims: Vec<usize>,
    pub n: usize,
    pub t: usize,
    pub repeats: usize,
    pub warmup: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    pub train: TrainSection,
    pub data: DataSection,
    pub output: OutputSection,
    pub whiten: WhitenSection,
    pub heatmap: HeatmapSection,
    pub bench: BenchSection,
    /// `section.key` of every key given explicitly.
    given: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Train,
    WhitenDemo,
    Heatmap,
    Bench,
}

impl Command {
    fn required(self) -> &'static [&'static str] {
        match self {
            Command::Train => &["model.norm", "model.hidden", "data.dataset", "train.epochs"],
            Command::WhitenDemo => &["whiten.alphas"],
            Command::Heatmap => &["heatmap.checkpoint", "data.dataset"],
            Command::Bench => &["bench.layers", "bench.d", "bench.n"],
        }
    }
}

const SECTIONS: &[(&str, &[&str])] = &[
    ("model", &["norm", "hidden", "alpha", "eta", "iternorm_t", "backward_mode"]),
    (
        "train",
        &["epochs", "batch_size", "lr", "momentum", "lr_halving_period", "seed", "seeds", "eval_batch_size"],
    ),
    (
        "data",
        &[
            "dataset",
            "train_images",
            "train_labels",
            "test_images",
            "test_labels",
            "train_limit",
            "test_limit",
            "n_train",
            "n_test",
            "dim",
            "classes",
            "separation",
            "rho",
            "seed",
        ],
    ),
    ("output", &["out_dir", "timing", "checkpoints", "pgm_scale"]),
    ("whiten", &["criteria", "alphas", "d", "rho", "sigma", "max_iters", "tol"]),
    ("heatmap", &["checkpoint", "samples"]),
    ("bench", &["layers", "d", "n", "t", "repeats", "warmup", "seed"]),
];

/// Key/value pairs still to be consumed, per section.
struct Raw {
    entries: BTreeMap<(String, String), String>,
    base: PathBuf,
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl Raw {
    fn has(&self, section: &str, key: &str) -> bool {
        self.entries.contains_key(&(section.to_string(), key.to_string()))
    }

    fn take(&mut self, section: &str, key: &str) -> Option<String> {
        self.entries.remove(&(section.to_string(), key.to_string()))
    }

    fn parse<T: FromStr>(&mut self, section: &str, key: &str, default: T) -> Result<T, CliError>
    where
        T::Err: Display,
    {
        match self.take(section, key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|e| config_err(format!("[{section}] {key} = {v:?}: {e}"))),
        }
    }

    fn opt<T: FromStr>(&mut self, section: &str, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: Display,
    {
        match self.take(section, key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e| config_err(format!("[{section}] {key} = {v:?}: {e}"))),
        }
    }

    fn list<T: FromStr>(&mut self, section: &str, key: &str, default: Vec<T>) -> Result<Vec<T>, CliError>
    where
        T::Err: Display,
    {
        let Some(v) = self.take(section, key) else {
            return Ok(default);
        };
        let items: Vec<T> = v
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse()
                    .map_err(|e| config_err(format!("[{section}] {key}: bad item {s:?}: {e}")))
            })
            .collect::<Result<_, _>>()?;
        if items.is_empty() {
            return Err(config_err(format!("[{section}] {key} is an empty list")));
        }
        Ok(items)
    }

    fn path(&mut self, section: &str, key: &str) -> Option<PathBuf> {
        self.take(section, key).map(|v| {
            let p = PathBuf::from(v);
            if p.is_absolute() {
                p
            } else {
                self.base.join(p)
            }
        })
    }
}

fn parse_bool(section: &str, key: &str, v: Option<String>, default: bool) -> Result<bool, CliError> {
    match v.as_deref() {
        None => Ok(default),
        Some("true" | "yes" | "1" | "on") => Ok(true),
        Some("false" | "no" | "0" | "off") => Ok(false),
        Some(other) => Err(config_err(format!("[{section}] {key} = {other:?}: expected true or false"))),
    }
}

impl ExperimentConfig {
    /// Parses config text. Relative paths are resolved against `base`, the
    /// directory of the config file.
    pub fn parse(text: &str, base: &Path) -> Result<Self, CliError> {
        let ini = Ini::load_from_str(text).map_err(|e| config_err(format!("config syntax: {e}")))?;
        let mut entries = BTreeMap::new();
        let mut given = Vec::new();
        for (section, props) in ini.iter() {
            let Some(section) = section else {
                if let Some((k, _)) = props.iter().next() {
                    return Err(config_err(format!("key {k:?} appears before any [section]")));
                }
                continue;
            };
            let Some((_, keys)) = SECTIONS.iter().find(|(s, _)| *s == section) else {
                let known: Vec<&str> = SECTIONS.iter().map(|(s, _)| *s).collect();
                return Err(config_err(format!(
                    "unknown section [{section}]; known: {}",
                    known.join(", ")
                )));
            };
            for (k, v) in props.iter() {
                if !keys.contains(&k) {
                    return Err(config_err(format!(
                        "unknown key {k:?} in [{section}]; known: {}",
                        keys.join(", ")
                    )));
                }
                let slot = (section.to_string(), k.to_string());
                if entries.insert(slot, v.trim().to_string()).is_some() {
                    return Err(config_err(format!("[{section}] {k} given twice")));
                }
                given.push(format!("{section}.{k}"));
            }
        }
        let mut raw = Raw {
            entries,
            base: base.to_path_buf(),
        };
        let cfg = Self::from_raw(&mut raw, given)?;
        debug_assert!(raw.entries.is_empty(), "unconsumed keys {:?}", raw.entries);
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &base)
    }

    fn from_raw(raw: &mut Raw, given: Vec<String>) -> Result<Self, CliError> {
        let defaults = swbn::nn::TrainConfig::default();
        let norms = raw
            .list::<String>("model", "norm", vec!["swbn-kl".into()])?
            .into_iter()
            .map(|n| (n != "none").then_some(n))
            .collect();
        let model = ModelSection {
            norms,
            hidden: raw.list("model", "hidden", vec![64])?,
            alpha: raw.parse("model", "alpha", swbn::swbn::DEFAULT_ALPHA)?,
            eta: raw.parse("model", "eta", swbn::swbn::DEFAULT_ETA)?,
            iternorm_t: raw.parse("model", "iternorm_t", 5)?,
            backward_mode: raw.parse("model", "backward_mode", BackwardMode::Faithful)?,
        };

        let seed: Option<u64> = raw.opt("train", "seed")?;
        let seeds: Option<Vec<u64>> = if raw.has("train", "seeds") {
            Some(raw.list("train", "seeds", vec![])?)
        } else {
            None
        };
        let seeds = match (seed, seeds) {
            (Some(_), Some(_)) => return Err(config_err("[train] give either seed or seeds, not both")),
            (Some(s), None) => vec![s],
            (None, Some(s)) => s,
            (None, None) => vec![0],
        };
        let train = TrainSection {
            epochs: raw.parse("train", "epochs", defaults.epochs)?,
            batch_size: raw.parse("train", "batch_size", defaults.batch_size)?,
            lr: raw.parse("train", "lr", defaults.lr)?,
            momentum: raw.parse("train", "momentum", defaults.momentum)?,
            lr_halving_period: raw.parse("train", "lr_halving_period", defaults.lr_halving_period)?,
            seeds,
            eval_batch_size: raw.parse("train", "eval_batch_size", defaults.eval_batch_size)?,
        };

        let data = DataSection {
            dataset: raw.parse("data", "dataset", DatasetKind::Blobs)?,
            train_images: raw.path("data", "train_images"),
            train_labels: raw.path("data", "train_labels"),
            test_images: raw.path("data", "test_images"),
            test_labels: raw.path("data", "test_labels"),
            train_limit: raw.opt("data", "train_limit")?,
            test_limit: raw.opt("data", "test_limit")?,
            n_train: raw.parse("data", "n_train", 1000)?,
            n_test: raw.parse("data", "n_test", 500)?,
            dim: raw.parse("data", "dim", 8)?,
            classes: raw.parse("data", "classes", 2)?,
            separation: raw.parse("data", "separation", 3.0)?,
            rho: raw.parse("data", "rho", 0.0)?,
            seed: raw.parse("data", "seed", 0)?,
        };

        let timing = raw.take("output", "timing");
        let checkpoints = raw.take("output", "checkpoints");
        let output = OutputSection {
            out_dir: raw.path("output", "out_dir").unwrap_or_else(|| PathBuf::from("out")),
            timing: parse_bool("output", "timing", timing, false)?,
            checkpoints: parse_bool("output", "checkpoints", checkpoints, true)?,
            pgm_scale: match raw.take("output", "pgm_scale").as_deref() {
                None | Some("magnitude") => PgmMapping::Magnitude,
                Some("signed") => PgmMapping::Signed,
                Some(other) => {
                    return Err(config_err(format!(
                        "[output] pgm_scale = {other:?}: expected magnitude or signed"
                    )))
                }
            },
        };

        let whiten = WhitenSection {
            criteria: raw.list("whiten", "criteria", Criterion::ALL.to_vec())?,
            alphas: raw.list("whiten", "alphas", vec![1e-2])?,
            d: raw.parse("whiten", "d", 8)?,
            rho: raw.parse("whiten", "rho", 0.9)?,
            sigma: raw.path("whiten", "sigma"),
            max_iters: raw.parse("whiten", "max_iters", 50_000)?,
            tol: raw.parse("whiten", "tol", 1e-3)?,
        };

        let heatmap = HeatmapSection {
            checkpoint: raw.path("heatmap", "checkpoint"),
            samples: raw.parse("heatmap", "samples", 2000)?,
        };

        let bench = BenchSection {
            layers: raw.list("bench", "layers", vec!["swbn-kl".into(), "iternorm".into()])?,
            dims: raw.list("bench", "d", vec![64])?,
            n: raw.parse("bench", "n", 1024)?,
            t: raw.parse("bench", "t", 5)?,
            repeats: raw.parse("bench", "repeats", 100)?,
            warmup: raw.parse("bench", "warmup", 1)?,
            seed: raw.parse("bench", "seed", 0)?,
        };

        let cfg = Self {
            model,
            train,
            data,
            output,
            whiten,
            heatmap,
            bench,
            given,
        };
        cfg.check_ranges()?;
        Ok(cfg)
    }

    fn check_ranges(&self) -> Result<(), CliError> {
        let fail = |m: &str| Err(config_err(m.to_string()));
        if self.model.hidden.contains(&0) {
            return fail("[model] hidden sizes must be positive");
        }
        if !(self.model.alpha >= 0.0) || !(0.0..1.0).contains(&self.model.eta) || self.model.iternorm_t == 0 {
            return fail("[model] need alpha >= 0, 0 <= eta < 1, iternorm_t >= 1");
        }
        if self.train.batch_size < 2 || !(self.train.lr > 0.0) || !(0.0..1.0).contains(&self.train.momentum) {
            return fail("[train] need batch_size >= 2, lr > 0, 0 <= momentum < 1");
        }
        if self.train.eval_batch_size == 0 {
            return fail("[train] eval_batch_size must be positive");
        }
        let mut seen = self.train.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.train.seeds.len() {
            return fail("[train] seeds must be distinct");
        }
        if !(-1.0 < self.data.rho && self.data.rho < 1.0) || !(-1.0 < self.whiten.rho && self.whiten.rho < 1.0) {
            return fail("rho must lie strictly between -1 and 1");
        }
        if self.data.dim == 0 || self.data.classes < 2 || self.data.n_train < 2 || self.data.n_test < 1 {
            return fail("[data] need dim >= 1, classes >= 2, n_train >= 2, n_test >= 1");
        }
        if self.whiten.alphas.iter().any(|a| !(*a > 0.0)) || !(self.whiten.tol > 0.0) || self.whiten.d == 0 {
            return fail("[whiten] alphas and tol must be positive, d >= 1");
        }
        if self.heatmap.samples < 2 {
            return fail("[heatmap] samples must be at least 2");
        }
        if self.bench.dims.contains(&0) || self.bench.n < 2 || self.bench.t == 0 || self.bench.repeats == 0 {
            return fail("[bench] need d >= 1, n >= 2, t >= 1, repeats >= 1");
        }
        Ok(())
    }

    /// Fails unless every key the subcommand needs was given explicitly.
    pub fn require(&self, command: Command) -> Result<(), CliError> {
        let missing: Vec<&str> = command
            .required()
            .iter()
            .copied()
            .filter(|k| !self.given.iter().any(|g| g == k))
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(config_err(format!("missing required keys: {}", missing.join(", "))))
        }
    }

    pub fn is_given(&self, key: &str) -> bool {
        self.given.iter().any(|g| g == key)
    }

    pub fn train_config(&self, seed: u64) -> swbn::nn::TrainConfig {
        swbn::nn::TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            lr: self.train.lr,
            momentum: self.train.momentum,
            lr_halving_period: self.train.lr_halving_period,
            seed,
            swbn_alpha: self.model.alpha,
            eta: self.model.eta,
            backward_mode: self.model.backward_mode,
            iternorm_t: self.model.iternorm_t,
            eval_batch_size: self.train.eval_batch_size,
            record_timing: self.output.timing,
        }
    }

    pub fn norm_options(&self) -> swbn::NormOptions {
        swbn::NormOptions {
            alpha: self.model.alpha,
            eta: self.model.eta,
            iternorm_t: self.model.iternorm_t,
            backward_mode: self.model.backward_mode,
            ..swbn::NormOptions::default()
        }
    }
}

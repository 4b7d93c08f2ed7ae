//! Flat `key = value` run configuration.
//!
//! A [`RunConfig`] keeps the validated entries in file order so it can be
//! written back out; [`Settings`] is the typed view with per-subcommand
//! defaults filled in.

use std::path::{Path, PathBuf};

use dbcl::attack::Estimator;
use dbcl::fedsim::Algorithm;
use dbcl::SketchKind;

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("algorithm", "dsgd | fedavg"),
    ("m", "number of clients"),
    ("c", "participation ratio in (0, 1]"),
    ("rounds", "communication rounds"),
    ("local_epochs", "FedAvg local epochs"),
    ("batch", "batch size"),
    ("lr", "learning rate"),
    ("sketch_kind", "none | countsketch | uniform | permuted"),
    ("q", "compression factor, s = floor(d_in / q)"),
    ("sketch_schedule", "comma list of q per round, cycled"),
    (
        "sketch_last_layer",
        "sketch the output layer too (true | false)",
    ),
    ("model", "mlp | cnn | linear"),
    ("hidden", "comma list of MLP hidden widths"),
    ("dataset", "blobs | property | idx:<images>,<labels>"),
    ("n_train", "training samples"),
    ("n_test", "held-out samples"),
    ("dim", "synthetic input dimension"),
    ("classes", "blobs classes"),
    ("mu", "class separation of synthetic data"),
    ("delta", "property strength of the property dataset"),
    ("eval_every", "evaluation period in rounds"),
    ("seed", "root seed"),
    ("out", "output path, - for stdout"),
    ("checkpoint", "path to save the trained model"),
    (
        "wall_clock",
        "record wall-clock time in metrics (true | false)",
    ),
    ("estimators", "comma list of option1 | option2 | naive"),
    ("trials", "gradient-matching victims, or Monte Carlo trials"),
    ("gm_iterations", "gradient-matching iterations per restart"),
    ("gm_restarts", "gradient-matching restarts"),
    ("gm_lr", "gradient-matching step size"),
    ("bench_n", "benchmark matrix size"),
    ("bench_reps", "benchmark repetitions"),
];

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("invalid value `{value}` for key `{key}`: {reason}")]
    Value {
        key: String,
        value: String,
        reason: String,
    },
    #[error("line {0}: expected `key = value`")]
    Syntax(usize),
    #[error("config key `{0}` given twice")]
    Duplicate(String),
    #[error("{0}")]
    Invalid(String),
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// The subcommands, which differ only in their defaults.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Train,
    AttackEstimate,
    AttackGm,
    AttackPia,
    VerifyTheory,
    Bench,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Mlp,
    Cnn,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DatasetSpec {
    Blobs,
    Property,
    Idx { images: PathBuf, labels: PathBuf },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub algorithm: Algorithm,
    pub m: usize,
    pub c: f64,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub sketch_kind: Option<SketchKind>,
    pub schedule: Vec<usize>,
    pub sketch_last_layer: bool,
    pub model: ModelKind,
    pub hidden: Vec<usize>,
    pub dataset: DatasetSpec,
    pub n_train: usize,
    pub n_test: usize,
    pub dim: usize,
    pub classes: usize,
    pub mu: f64,
    pub delta: f64,
    pub eval_every: usize,
    pub seed: u64,
    /// `None` writes to stdout.
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub wall_clock: bool,
    pub estimators: Vec<Estimator>,
    pub trials: usize,
    pub gm_iterations: usize,
    pub gm_restarts: usize,
    pub gm_lr: f64,
    pub bench_n: usize,
    pub bench_reps: usize,
}

impl Settings {
    pub fn defaults(cmd: Command) -> Self {
        let base = Settings {
            algorithm: Algorithm::FedAvg,
            m: 10,
            c: 1.0,
            rounds: 20,
            local_epochs: 1,
            batch: 10,
            lr: 0.05,
            sketch_kind: Some(SketchKind::CountSketch),
            schedule: vec![2],
            sketch_last_layer: false,
            model: ModelKind::Mlp,
            hidden: vec![200, 200],
            dataset: DatasetSpec::Blobs,
            n_train: 10_000,
            n_test: 2_000,
            dim: 784,
            classes: 10,
            mu: 5.0,
            delta: 0.5,
            eval_every: 1,
            seed: 0,
            out: None,
            checkpoint: None,
            wall_clock: false,
            estimators: vec![
                Estimator::Option1,
                Estimator::Option2,
                Estimator::NaiveDifference,
            ],
            trials: 5,
            gm_iterations: 1500,
            gm_restarts: 3,
            gm_lr: 0.1,
            bench_n: 2048,
            bench_reps: 5,
        };
        match cmd {
            Command::Train | Command::AttackEstimate | Command::Bench => base,
            Command::AttackGm => Settings {
                lr: 0.01,
                batch: 8,
                hidden: vec![8],
                dim: 16,
                classes: 4,
                ..base
            },
            Command::AttackPia => Settings {
                algorithm: Algorithm::Dsgd,
                m: 2,
                rounds: 300,
                batch: 32,
                lr: 0.01,
                hidden: vec![16],
                dataset: DatasetSpec::Property,
                n_train: 4000,
                dim: 32,
                classes: 2,
                mu: 2.0,
                ..base
            },
            Command::VerifyTheory => Settings {
                trials: 10_000,
                ..base
            },
        }
    }

    /// Parses `value` into the field named `key`.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let bad = |reason: &str| ConfigError::Value {
            key: key.to_string(),
            value: value.to_string(),
            reason: reason.to_string(),
        };
        let uint = || {
            value
                .parse::<usize>()
                .map_err(|_| bad("expected a non-negative integer"))
        };
        let pos = || match uint()? {
            0 => Err(bad("must be positive")),
            n => Ok(n),
        };
        let float = || {
            value
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| bad("expected a finite number"))
        };
        let boolean = || {
            value
                .parse::<bool>()
                .map_err(|_| bad("expected true or false"))
        };
        let list = || -> Result<Vec<usize>, ConfigError> {
            value
                .split(',')
                .map(|p| match p.trim().parse::<usize>() {
                    Ok(n) if n > 0 => Ok(n),
                    _ => Err(bad("expected a comma list of positive integers")),
                })
                .collect()
        };
        let path = || (value != "-").then(|| PathBuf::from(value));
        match key {
            "algorithm" => {
                self.algorithm = match value {
                    "dsgd" => Algorithm::Dsgd,
                    "fedavg" => Algorithm::FedAvg,
                    _ => return Err(bad("expected dsgd or fedavg")),
                }
            }
            "m" => self.m = pos()?,
            "c" => {
                let c = float()?;
                if !(c > 0.0 && c <= 1.0) {
                    return Err(bad("must be in (0, 1]"));
                }
                self.c = c;
            }
            "rounds" => self.rounds = pos()?,
            "local_epochs" => self.local_epochs = pos()?,
            "batch" => self.batch = pos()?,
            "lr" => {
                let lr = float()?;
                if lr <= 0.0 {
                    return Err(bad("must be positive"));
                }
                self.lr = lr;
            }
            "sketch_kind" => {
                self.sketch_kind = match value {
                    "none" => None,
                    "countsketch" => Some(SketchKind::CountSketch),
                    "uniform" => Some(SketchKind::UniformSampling),
                    "permuted" => Some(SketchKind::PermutedCountSketch { q: 2 }),
                    _ => return Err(bad("expected none, countsketch, uniform or permuted")),
                }
            }
            "q" | "sketch_schedule" => {
                let qs = if key == "q" { vec![pos()?] } else { list()? };
                if qs.iter().any(|&q| q < 2) {
                    return Err(bad("compression must be at least 2"));
                }
                self.schedule = qs;
            }
            "sketch_last_layer" => self.sketch_last_layer = boolean()?,
            "model" => {
                self.model = match value {
                    "mlp" => ModelKind::Mlp,
                    "cnn" => ModelKind::Cnn,
                    "linear" => ModelKind::Linear,
                    _ => return Err(bad("expected mlp, cnn or linear")),
                }
            }
            "hidden" => self.hidden = list()?,
            "dataset" => {
                self.dataset = match value {
                    "blobs" => DatasetSpec::Blobs,
                    "property" => DatasetSpec::Property,
                    _ => match value.strip_prefix("idx:").and_then(|p| p.split_once(',')) {
                        Some((images, labels)) if !images.is_empty() && !labels.is_empty() => {
                            DatasetSpec::Idx {
                                images: images.into(),
                                labels: labels.into(),
                            }
                        }
                        _ => return Err(bad("expected blobs, property or idx:<images>,<labels>")),
                    },
                }
            }
            "n_train" => self.n_train = pos()?,
            "n_test" => self.n_test = pos()?,
            "dim" => self.dim = pos()?,
            "classes" => self.classes = pos()?,
            "mu" => self.mu = float()?,
            "delta" => self.delta = float()?,
            "eval_every" => self.eval_every = pos()?,
            "seed" => self.seed = value.parse().map_err(|_| bad("expected a u64"))?,
            "out" => self.out = path(),
            "checkpoint" => self.checkpoint = path(),
            "wall_clock" => self.wall_clock = boolean()?,
            "estimators" => {
                self.estimators = value
                    .split(',')
                    .map(|e| match e.trim() {
                        "option1" => Ok(Estimator::Option1),
                        "option2" => Ok(Estimator::Option2),
                        "naive" => Ok(Estimator::NaiveDifference),
                        _ => Err(bad("expected a comma list of option1, option2, naive")),
                    })
                    .collect::<Result<_, _>>()?
            }
            "trials" => self.trials = pos()?,
            "gm_iterations" => self.gm_iterations = pos()?,
            "gm_restarts" => self.gm_restarts = pos()?,
            "gm_lr" => {
                self.gm_lr = float()?;
                if self.gm_lr <= 0.0 {
                    return Err(bad("must be positive"));
                }
            }
            "bench_n" => self.bench_n = pos()?,
            "bench_reps" => self.bench_reps = pos()?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }
}

/// Validated entries in the order they were given.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunConfig {
    entries: Vec<(String, String)>,
}

impl RunConfig {
    /// Parses the text of a config file. Blank lines and everything after
    /// `#` are ignored.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(ConfigError::Syntax(n + 1))?;
            let key = key.trim();
            if cfg.get(key).is_some() {
                return Err(ConfigError::Duplicate(key.to_string()));
            }
            cfg.set(key, value.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Sets or replaces one entry after checking it parses.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        if key.is_empty() {
            return Err(ConfigError::Invalid("empty config key".into()));
        }
        Settings::defaults(Command::Train).apply(key, value)?;
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(entry) => entry.1 = value.to_string(),
            None => self.entries.push((key.to_string(), value.to_string())),
        }
        Ok(())
    }

    /// Applies a `key=value` override from the command line.
    pub fn set_override(&mut self, arg: &str) -> Result<(), ConfigError> {
        let (key, value) = arg
            .split_once('=')
            .ok_or_else(|| ConfigError::Invalid(format!("override `{arg}` is not key=value")))?;
        self.set(key.trim(), value.trim())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    /// Canonical text form, one `key = value` line per entry.
    pub fn emit(&self) -> String {
        self.entries
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Typed settings for `cmd`: its defaults overridden by every entry.
    pub fn settings(&self, cmd: Command) -> Result<Settings, ConfigError> {
        if self.get("q").is_some() && self.get("sketch_schedule").is_some() {
            return Err(ConfigError::Invalid(
                "give either `q` or `sketch_schedule`, not both".into(),
            ));
        }
        let mut s = Settings::defaults(cmd);
        for (k, v) in &self.entries {
            s.apply(k, v)?;
        }
        Ok(s)
    }
}

//! Flat `key = value` run configuration.
//!
//! Values are resolved in order: scenario preset, config file, `--set`
//! overrides, then the dedicated flags. Unknown keys are rejected.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use cgpnas::catalog::{FunctionSetId, TensorShape};
use cgpnas::data::{Difficulty, Scenario, SplitSpec, SyntheticSpec};
use cgpnas::evaluator::{Surrogate, TrainConfig};
use cgpnas::genome::CgpConfig;
use cgpnas::nn::OptimizerKind;

#[derive(Debug, Clone, PartialEq)]
pub enum ConfigError {
    UnknownKey { key: String, line: Option<usize> },
    BadValue { key: String, value: String, reason: String },
    Syntax { line: usize, text: String },
    Invalid(String),
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::UnknownKey { key, line: Some(l) } => write!(f, "unknown config key `{key}` (line {l})"),
            ConfigError::UnknownKey { key, line: None } => write!(f, "unknown config key `{key}`"),
            ConfigError::BadValue { key, value, reason } => write!(f, "bad value {value:?} for `{key}`: {reason}"),
            ConfigError::Syntax { line, text } => write!(f, "line {line}: expected `key = value`, found {text:?}"),
            ConfigError::Invalid(m) => write!(f, "invalid configuration: {m}"),
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataSource {
    Cifar10,
    Synthetic,
    /// A dataset written by `save_synthetic`, located by `data_path`.
    File,
}

impl fmt::Display for DataSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DataSource::Cifar10 => "cifar10",
            DataSource::Synthetic => "synthetic",
            DataSource::File => "file",
        })
    }
}

impl FromStr for DataSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "cifar10" => Ok(DataSource::Cifar10),
            "synthetic" => Ok(DataSource::Synthetic),
            "file" => Ok(DataSource::File),
            _ => Err("expected cifar10, synthetic or file".into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub scenario: Scenario,
    pub cgp: CgpConfig,
    pub search: TrainConfig,
    pub retrain: TrainConfig,
    pub dataset: DataSource,
    /// CIFAR-10 directory or synthetic file; `CGPNAS_DATA_DIR` fills in a
    /// missing CIFAR-10 directory.
    pub data_path: Option<PathBuf>,
    pub synthetic: SyntheticSpec,
    pub synthetic_seed: u64,
    pub train_n: usize,
    pub val_n: usize,
    pub seed: u64,
    pub generations: u64,
    pub lambda: usize,
    pub surrogate: Option<Surrogate>,
    pub output_dir: PathBuf,
}

fn default_generations(scenario: Scenario, set: FunctionSetId) -> u64 {
    match (scenario, set) {
        (Scenario::Default, FunctionSetId::ConvSet) => 500,
        (Scenario::Default, FunctionSetId::ResSet) => 300,
        (Scenario::Small, _) => 1_500,
        (Scenario::Desk, _) => 30,
    }
}

impl RunConfig {
    pub fn preset(scenario: Scenario) -> Self {
        let split = SplitSpec::preset(scenario, 0);
        let mut cfg = RunConfig {
            scenario,
            cgp: CgpConfig::default(),
            search: TrainConfig::search(),
            retrain: TrainConfig::retrain(),
            dataset: DataSource::Cifar10,
            data_path: None,
            synthetic: SyntheticSpec {
                classes: 10,
                samples: split.train_n + split.val_n,
                image_size: 32,
                difficulty: Difficulty::Easy,
            },
            synthetic_seed: 0,
            train_n: split.train_n,
            val_n: split.val_n,
            seed: 0,
            generations: default_generations(scenario, FunctionSetId::ConvSet),
            lambda: 2,
            surrogate: None,
            output_dir: PathBuf::from("cgpnas-run"),
        };
        if scenario == Scenario::Desk {
            desk_preset(&mut cfg);
        }
        cfg
    }

    /// Builds a configuration from file text and overrides. The scenario is
    /// taken from `scenario` when given, else from the file, else default.
    pub fn resolve(
        scenario: Option<Scenario>,
        file: Option<&str>,
        overrides: &[(String, String)],
    ) -> Result<Self, ConfigError> {
        let entries = match file {
            Some(text) => parse_entries(text)?,
            None => Vec::new(),
        };
        let from_file = entries
            .iter()
            .rev()
            .find(|(k, _, _)| k == "scenario")
            .map(|(k, v, _)| parse_value::<Scenario>(k, v))
            .transpose()?;
        let from_override = overrides
            .iter()
            .rev()
            .find(|(k, _)| k == "scenario")
            .map(|(k, v)| parse_value::<Scenario>(k, v))
            .transpose()?;
        let scenario = scenario.or(from_override).or(from_file).unwrap_or(Scenario::Default);
        let mut cfg = RunConfig::preset(scenario);
        let mut generations_set = false;
        for (key, value, line) in &entries {
            generations_set |= key == "generations";
            cfg.set(key, value).map_err(|e| match e {
                ConfigError::UnknownKey { key, .. } => ConfigError::UnknownKey { key, line: Some(*line) },
                other => other,
            })?;
        }
        for (key, value) in overrides {
            generations_set |= key == "generations";
            cfg.set(key, value)?;
        }
        cfg.scenario = scenario;
        if !generations_set {
            cfg.generations = default_generations(scenario, cfg.cgp.function_set);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.cgp.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let invalid = |m: &str| Err(ConfigError::Invalid(m.into()));
        if self.lambda == 0 {
            return invalid("lambda must be at least 1");
        }
        if self.generations == 0 {
            return invalid("generations must be at least 1");
        }
        for (name, t) in [("search", &self.search), ("retrain", &self.retrain)] {
            if t.epochs == 0 || t.batch_size == 0 || t.fitness_window == 0 {
                return Err(ConfigError::Invalid(format!(
                    "{name}.epochs, {name}.batch_size and {name}.fitness_window must be positive"
                )));
            }
        }
        if self.synthetic.classes == 0 || self.synthetic.image_size == 0 {
            return invalid("synthetic.classes and synthetic.image_size must be positive");
        }
        Ok(())
    }

    /// Input shape and class count implied by the dataset settings, without
    /// loading data. `None` for file datasets.
    pub fn data_shape(&self) -> Option<(TensorShape, usize)> {
        match self.dataset {
            DataSource::Cifar10 => Some((TensorShape::new(32, 32, 3), 10)),
            DataSource::Synthetic => Some((
                TensorShape::new(self.synthetic.image_size, self.synthetic.image_size, 3),
                self.synthetic.classes,
            )),
            DataSource::File => None,
        }
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            train_n: self.train_n,
            val_n: self.val_n,
            seed: self.seed,
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        if let Some((phase, field)) = key.split_once('.') {
            if phase == "search" || phase == "retrain" {
                let t = if phase == "search" { &mut self.search } else { &mut self.retrain };
                return set_train(t, key, field, v);
            }
            if phase == "synthetic" {
                match field {
                    "classes" => self.synthetic.classes = parse_value(key, v)?,
                    "samples" => self.synthetic.samples = parse_value(key, v)?,
                    "image_size" => self.synthetic.image_size = parse_value(key, v)?,
                    "difficulty" => self.synthetic.difficulty = parse_value(key, v)?,
                    "seed" => self.synthetic_seed = parse_value(key, v)?,
                    _ => return Err(unknown(key)),
                }
                return Ok(());
            }
            return Err(unknown(key));
        }
        match key {
            "scenario" => self.scenario = parse_value(key, v)?,
            "rows" => self.cgp.rows = parse_value(key, v)?,
            "cols" => self.cgp.cols = parse_value(key, v)?,
            "levels_back" => self.cgp.levels_back = parse_value(key, v)?,
            "mutation_rate" => self.cgp.mutation_rate = parse_value(key, v)?,
            "min_active" => self.cgp.min_active = parse_value(key, v)?,
            "max_active" => self.cgp.max_active = parse_value(key, v)?,
            "function_set" => self.cgp.function_set = parse_value(key, v)?,
            "channels" => self.cgp.channels = parse_list(key, v)?,
            "dataset" => self.dataset = parse_value(key, v)?,
            "data_path" => self.data_path = (!v.is_empty()).then(|| PathBuf::from(v)),
            "train_n" => self.train_n = parse_value(key, v)?,
            "val_n" => self.val_n = parse_value(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            "generations" => self.generations = parse_value(key, v)?,
            "lambda" => self.lambda = parse_value(key, v)?,
            "memory_budget" => {
                let b: u64 = parse_value(key, v)?;
                self.search.memory_budget = b;
                self.retrain.memory_budget = b;
            }
            "surrogate" => {
                self.surrogate = match v {
                    "" | "none" => None,
                    s => Some(parse_value(key, s)?),
                }
            }
            "output_dir" => self.output_dir = PathBuf::from(v),
            _ => return Err(unknown(key)),
        }
        Ok(())
    }

    /// Every setting as `(key, value)`, in an order that [`RunConfig::set`]
    /// accepts back.
    pub fn entries(&self) -> Vec<(String, String)> {
        let c = &self.cgp;
        let mut out: Vec<(String, String)> = vec![
            ("scenario".into(), self.scenario.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("generations".into(), self.generations.to_string()),
            ("lambda".into(), self.lambda.to_string()),
            (
                "surrogate".into(),
                self.surrogate.as_ref().map_or("none".into(), |s| s.to_string()),
            ),
            ("output_dir".into(), self.output_dir.display().to_string()),
            ("rows".into(), c.rows.to_string()),
            ("cols".into(), c.cols.to_string()),
            ("levels_back".into(), c.levels_back.to_string()),
            ("mutation_rate".into(), c.mutation_rate.to_string()),
            ("min_active".into(), c.min_active.to_string()),
            ("max_active".into(), c.max_active.to_string()),
            ("function_set".into(), c.function_set.to_string()),
            ("channels".into(), join(&c.channels)),
            ("dataset".into(), self.dataset.to_string()),
            (
                "data_path".into(),
                self.data_path.as_ref().map_or(String::new(), |p| p.display().to_string()),
            ),
            ("train_n".into(), self.train_n.to_string()),
            ("val_n".into(), self.val_n.to_string()),
            ("synthetic.classes".into(), self.synthetic.classes.to_string()),
            ("synthetic.samples".into(), self.synthetic.samples.to_string()),
            ("synthetic.image_size".into(), self.synthetic.image_size.to_string()),
            ("synthetic.difficulty".into(), self.synthetic.difficulty.to_string()),
            ("synthetic.seed".into(), self.synthetic_seed.to_string()),
        ];
        for (phase, t) in [("search", &self.search), ("retrain", &self.retrain)] {
            let schedule: Vec<String> = t.lr_schedule.iter().map(|(e, lr)| format!("{e}:{lr}")).collect();
            let fields = [
                ("optimizer", optimizer_text(t.optimizer)),
                ("lr", t.initial_lr.to_string()),
                ("lr_schedule", schedule.join(",")),
                ("epochs", t.epochs.to_string()),
                ("batch_size", t.batch_size.to_string()),
                ("weight_decay", t.weight_decay.to_string()),
                ("augmentation", t.augmentation.to_string()),
                ("fitness_window", t.fitness_window.to_string()),
                ("memory_budget", t.memory_budget.to_string()),
            ];
            out.extend(fields.into_iter().map(|(k, v)| (format!("{phase}.{k}"), v)));
        }
        out
    }

    /// Config-file text that reproduces this configuration.
    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

fn desk_preset(cfg: &mut RunConfig) {
    cfg.cgp.channels = vec![8, 16];
    cfg.search = TrainConfig::desk_search();
    cfg.retrain = TrainConfig::desk_retrain();
    cfg.dataset = DataSource::Synthetic;
    cfg.synthetic = SyntheticSpec {
        classes: 2,
        samples: cfg.train_n + cfg.val_n,
        image_size: 16,
        difficulty: Difficulty::Easy,
    };
}

fn unknown(key: &str) -> ConfigError {
    ConfigError::UnknownKey {
        key: key.to_string(),
        line: None,
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::BadValue {
        key: key.into(),
        value: value.into(),
        reason: e.to_string(),
    })
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, ConfigError>
where
    T::Err: fmt::Display,
{
    value.split(',').map(|p| parse_value(key, p.trim())).collect()
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn optimizer_text(o: OptimizerKind) -> String {
    match o {
        OptimizerKind::SgdMomentum { momentum } => format!("sgd:{momentum}"),
        OptimizerKind::Adam { beta1, beta2, eps } => format!("adam:{beta1},{beta2},{eps}"),
    }
}

fn parse_optimizer(key: &str, v: &str) -> Result<OptimizerKind, ConfigError> {
    let bad = |reason: &str| ConfigError::BadValue {
        key: key.into(),
        value: v.into(),
        reason: reason.into(),
    };
    let (name, args) = v.split_once(':').unwrap_or((v, ""));
    let args: Vec<f64> = if args.is_empty() { Vec::new() } else { parse_list(key, args)? };
    match (name, args.as_slice()) {
        ("sgd", []) => Ok(OptimizerKind::SGD_DEFAULT),
        ("sgd", &[momentum]) => Ok(OptimizerKind::SgdMomentum { momentum }),
        ("adam", []) => Ok(OptimizerKind::ADAM_DEFAULT),
        ("adam", &[beta1, beta2, eps]) => Ok(OptimizerKind::Adam { beta1, beta2, eps }),
        _ => Err(bad("expected sgd[:momentum] or adam[:beta1,beta2,eps]")),
    }
}

fn parse_schedule(key: &str, v: &str) -> Result<Vec<(usize, f64)>, ConfigError> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|point| {
            let (e, lr) = point.trim().split_once(':').ok_or_else(|| ConfigError::BadValue {
                key: key.into(),
                value: v.into(),
                reason: "expected epoch:lr pairs separated by commas".into(),
            })?;
            Ok((parse_value(key, e.trim())?, parse_value(key, lr.trim())?))
        })
        .collect()
}

fn set_train(t: &mut TrainConfig, key: &str, field: &str, v: &str) -> Result<(), ConfigError> {
    match field {
        "optimizer" => t.optimizer = parse_optimizer(key, v)?,
        "lr" => t.initial_lr = parse_value(key, v)?,
        "lr_schedule" => t.lr_schedule = parse_schedule(key, v)?,
        "epochs" => t.epochs = parse_value(key, v)?,
        "batch_size" => t.batch_size = parse_value(key, v)?,
        "weight_decay" => t.weight_decay = parse_value(key, v)?,
        "augmentation" => t.augmentation = parse_value(key, v)?,
        "fitness_window" => t.fitness_window = parse_value(key, v)?,
        "memory_budget" => t.memory_budget = parse_value(key, v)?,
        _ => return Err(unknown(key)),
    }
    Ok(())
}

/// Splits config text into `(key, value, line)` triples, dropping `#`
/// comments and blank lines.
pub fn parse_entries(text: &str) -> Result<Vec<(String, String, usize)>, ConfigError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: i + 1,
            text: raw.to_string(),
        })?;
        out.push((k.trim().to_string(), v.trim().to_string(), i + 1));
    }
    Ok(out)
}

/// Parses a `KEY=VALUE` command-line override.
pub fn parse_override(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| format!("expected KEY=VALUE, found {s:?}"))
}

//! Experiment configuration: `key = value` text with dotted keys and `#` comments.

use std::collections::BTreeMap;
use std::path::PathBuf;

use sha2::{Digest, Sha256};

use crate::attacks::{AttackConfig, Norm};
use crate::augment::JitterStrength;
use crate::autodiff::Mode;
use crate::data::ToySpec;
use crate::error::{Error, Result};
use crate::eval::{Aggregation, LinearEvalConfig, SmoothingConfig, SuiteAttack};
use crate::model::ModelConfig;
use crate::train::{TrainConfig, ViewTarget};

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// Generated in memory from the toy spec.
    Toy,
    /// Files in the CIFAR-10 binary record layout.
    Cifar10 { train: Vec<PathBuf>, test: Vec<PathBuf> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    pub toy: ToySpec,
    pub toy_test_per_class: usize,
    /// Use only the first `n` training samples (0 keeps all).
    pub train_limit: usize,
    pub test_limit: usize,
}

/// Keys that do not affect any computed number.
const EXECUTION_KEYS: &[&str] = &["out", "train.parallel", "train.record_wall_time"];

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub command: String,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub linear: LinearEvalConfig,
    pub robust_linear: LinearEvalConfig,
    /// Steps of every suite attack.
    pub eval_steps: usize,
    pub suite: Vec<SuiteAttack>,
    pub smoothing: SmoothingConfig,
    pub smoothing_n_values: Vec<usize>,
    pub trades_beta: f64,
    pub finetune_ss_weight: f64,
    pub ablate_lambdas: Vec<f64>,
    pub ablate_batch_sizes: Vec<usize>,
    /// Model to evaluate or finetune.
    pub checkpoint: Option<PathBuf>,
    /// Second model for black-box attacks.
    pub source_checkpoint: Option<PathBuf>,
    pub blackbox_instance: bool,
    pub record_wall_time: bool,
}

/// Suite in report form, `norm:epsilon` entries with `cw-linf` for the CW attack.
fn suite_from(spec: &[(String, f64)], steps: usize) -> Result<Vec<SuiteAttack>> {
    spec.iter()
        .map(|(label, eps)| match label.as_str() {
            "cw-linf" => Ok(SuiteAttack::cw(*eps, steps)),
            other => Norm::parse(other).map(|n| SuiteAttack::pgd(n, *eps, steps)).ok_or_else(|| Error::Invalid(format!("eval.suite: unknown attack `{other}`"))),
        })
        .collect()
}

impl ExperimentConfig {
    /// Desk-scale defaults on the generated toy dataset.
    pub fn toy() -> Self {
        let seed = 0;
        ExperimentConfig {
            command: "train-rocl".into(),
            seed,
            out_dir: PathBuf::from("runs/toy"),
            data: DataConfig { source: DataSource::Toy, toy: ToySpec::new(2, 1000, 16, seed), toy_test_per_class: 200, train_limit: 0, test_limit: 0 },
            model: ModelConfig::toy(),
            train: TrainConfig::toy(),
            linear: LinearEvalConfig::linear().scaled(30, 64),
            robust_linear: LinearEvalConfig::robust().scaled(10, 64),
            eval_steps: 20,
            suite: crate::eval::default_suite(20),
            smoothing: SmoothingConfig::default(),
            smoothing_n_values: vec![1, 10, 100],
            trades_beta: 6.0,
            finetune_ss_weight: 1.0,
            ablate_lambdas: (4..=9).map(|k| 1.0 / (1u64 << k) as f64).collect(),
            ablate_batch_sizes: vec![32, 64, 128],
            checkpoint: None,
            source_checkpoint: None,
            blackbox_instance: false,
            record_wall_time: false,
        }
    }

    /// Full-scale CIFAR-10 values; far beyond a desk CPU budget.
    pub fn paper_cifar10() -> Self {
        let mut c = Self::toy();
        c.out_dir = PathBuf::from("runs/cifar10");
        c.data.source = DataSource::Cifar10 {
            train: (1..=5).map(|i| PathBuf::from(format!("cifar-10-batches-bin/data_batch_{i}.bin"))).collect(),
            test: vec![PathBuf::from("cifar-10-batches-bin/test_batch.bin")],
        };
        c.model = ModelConfig { input_dims: (3, 32, 32), num_classes: 10, ..ModelConfig::toy() };
        c.train = TrainConfig::paper();
        c.linear = LinearEvalConfig::linear();
        c.robust_linear = LinearEvalConfig::robust();
        c.ablate_batch_sizes = vec![128, 256, 512];
        c
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "toy" => Some(Self::toy()),
            "paper-cifar10" => Some(Self::paper_cifar10()),
            _ => None,
        }
    }

    /// Parse config text on top of the `toy` preset, or the preset named by a `preset` key.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Invalid(format!("line {}: expected `key = value`, got `{line}`", n + 1)))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let base = match pairs.iter().find(|(k, _)| k == "preset") {
            Some((_, name)) => Self::preset(name).ok_or_else(|| Error::Invalid(format!("preset: unknown preset `{name}`")))?,
            None => Self::toy(),
        };
        base.with_overrides(pairs.iter().filter(|(k, _)| k != "preset").map(|(k, v)| (k.as_str(), v.as_str())))
    }

    /// Apply `key = value` overrides in order.
    pub fn with_overrides<'a>(&self, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut model: BTreeMap<String, String> = self.model.to_pairs().into_iter().collect();
        let mut suite = self.suite_pairs();
        let mut c = self.clone();
        for (k, v) in pairs {
            if k.starts_with("model.") {
                if !model.contains_key(k) {
                    return Err(Error::Invalid(format!("{k}: unknown key")));
                }
                model.insert(k.to_string(), v.to_string());
            } else if k == "eval.suite" {
                suite = parse_suite(v)?;
            } else {
                c.set(k, v).map_err(|e| match e {
                    Error::Invalid(m) if !m.starts_with(k) => Error::Invalid(format!("{k}: {m}")),
                    other => other,
                })?;
            }
        }
        c.model = ModelConfig::from_pairs(&model)?;
        c.suite = suite_from(&suite, c.eval_steps)?;
        c.linear.seed = c.seed;
        c.robust_linear.seed = c.seed;
        c.train.seed = c.seed;
        c.data.toy.seed = c.seed;
        Ok(c)
    }

    fn suite_pairs(&self) -> Vec<(String, f64)> {
        self.suite.iter().map(|a| (a.label(), a.config.epsilon)).collect()
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "command" => self.command = v.to_string(),
            "seed" => self.seed = parse_int(v)?,
            "out" => self.out_dir = PathBuf::from(v),
            "data.source" => {
                self.data.source = match v {
                    "toy" => DataSource::Toy,
                    "cifar10" => match &self.data.source {
                        DataSource::Cifar10 { .. } => self.data.source.clone(),
                        DataSource::Toy => DataSource::Cifar10 { train: vec![], test: vec![] },
                    },
                    other => return Err(Error::Invalid(format!("unknown source `{other}`"))),
                }
            }
            "data.train" | "data.test" => {
                let paths: Vec<PathBuf> = v.split(',').map(|s| PathBuf::from(s.trim())).filter(|p| !p.as_os_str().is_empty()).collect();
                match &mut self.data.source {
                    DataSource::Cifar10 { train, test } => *if key == "data.train" { train } else { test } = paths,
                    DataSource::Toy if paths.is_empty() => {}
                    DataSource::Toy => return Err(Error::Invalid("paths need data.source = cifar10 first".into())),
                }
            }
            "data.train_limit" => self.data.train_limit = parse_int(v)?,
            "data.test_limit" => self.data.test_limit = parse_int(v)?,
            "data.toy.classes" => self.data.toy.classes = parse_int(v)?,
            "data.toy.samples_per_class" => self.data.toy.samples_per_class = parse_int(v)?,
            "data.toy.test_per_class" => self.data.toy_test_per_class = parse_int(v)?,
            "data.toy.image_size" => self.data.toy.image_size = parse_int(v)?,
            "data.toy.bars" => self.data.toy.bars = pair(parse_list::<usize>(v)?)?,
            "data.toy.contrast" => self.data.toy.contrast = pair(parse_floats(v)?)?,
            "data.toy.noise" => self.data.toy.noise = parse_float(v)?,
            "data.toy.grayscale" => self.data.toy.grayscale = parse_bool(v)?,
            "train.epochs" => t.epochs = parse_int(v)?,
            "train.batch_size" => t.batch_size = parse_int(v)?,
            "train.base_lr" => t.base_lr = parse_float(v)?,
            "train.warmup_epochs" => t.warmup_epochs = parse_int(v)?,
            "train.momentum" => t.momentum = parse_float(v)?,
            "train.weight_decay" => t.weight_decay = parse_float(v)?,
            "train.lambda" => t.lambda = parse_float(v)?,
            "train.temperature" => t.temperature = parse_float(v)?,
            "train.attack_target" => t.attack_target = ViewTarget::parse(v).ok_or_else(|| Error::Invalid(format!("expected t or t_prime, got `{v}`")))?,
            "train.reg_target" => t.reg_target = ViewTarget::parse(v).ok_or_else(|| Error::Invalid(format!("expected t or t_prime, got `{v}`")))?,
            "train.exclude_adv_negatives" => t.exclude_adv_negatives = parse_bool(v)?,
            "train.symmetric" => t.symmetric = parse_bool(v)?,
            "train.augment_supervised" => t.augment_supervised = parse_bool(v)?,
            "train.attack_bn" => t.attack_mode = parse_mode(v)?,
            "train.parallel" => t.parallel = parse_bool(v)?,
            "train.record_wall_time" => self.record_wall_time = parse_bool(v)?,
            "attack.norm" => t.attack.norm = Norm::parse(v).ok_or_else(|| Error::Invalid(format!("unknown norm `{v}`")))?,
            "attack.epsilon" => t.attack.epsilon = parse_float(v)?,
            "attack.step_size" => t.attack.step_size = parse_float(v)?,
            "attack.steps" => t.attack.steps = parse_int(v)?,
            "attack.random_start" => t.attack.random_start = parse_bool(v)?,
            "attack.temperature" => t.attack.temperature = parse_float(v)?,
            "augment.crop_scale" => t.augment.crop_scale = pair(parse_floats(v)?)?,
            "augment.aspect_ratio" => t.augment.aspect_ratio = pair(parse_floats(v)?)?,
            "augment.flip_prob" => t.augment.flip_prob = parse_float(v)?,
            "augment.jitter_prob" => t.augment.jitter_prob = parse_float(v)?,
            "augment.jitter" => {
                let [hue, brightness, saturation] = parse_floats(v)?[..] else {
                    return Err(Error::Invalid(format!("expected hue,brightness,saturation, got `{v}`")));
                };
                t.augment.jitter = JitterStrength { hue, brightness, saturation };
            }
            "augment.gray_prob" => t.augment.gray_prob = parse_float(v)?,
            "eval.steps" => self.eval_steps = parse_int(v)?,
            "smoothing.n_samples" => self.smoothing.n_samples = parse_int(v)?,
            "smoothing.crop_scale" => self.smoothing.policy.crop_scale = pair(parse_floats(v)?)?,
            "smoothing.aggregation" => self.smoothing.aggregation = Aggregation::parse(v).ok_or_else(|| Error::Invalid(format!("unknown aggregation `{v}`")))?,
            "smoothing.n_values" => self.smoothing_n_values = parse_list(v)?,
            "trades.beta" => self.trades_beta = parse_float(v)?,
            "finetune.ss_weight" => self.finetune_ss_weight = parse_float(v)?,
            "ablate.lambdas" => self.ablate_lambdas = parse_floats(v)?,
            "ablate.batch_sizes" => self.ablate_batch_sizes = parse_list(v)?,
            "input.checkpoint" => self.checkpoint = optional_path(v),
            "input.source_checkpoint" => self.source_checkpoint = optional_path(v),
            "blackbox.instance" => self.blackbox_instance = parse_bool(v)?,
            _ => {
                let (prefix, field) = key.split_once('.').ok_or_else(|| Error::Invalid(format!("{key}: unknown key")))?;
                let le = match prefix {
                    "linear" => &mut self.linear,
                    "rlinear" => &mut self.robust_linear,
                    _ => return Err(Error::Invalid(format!("{key}: unknown key"))),
                };
                set_linear(le, field, v).map_err(|e| Error::Invalid(format!("{key}: {e}")))?;
            }
        }
        Ok(())
    }

    /// Every key with its current value; parsing the output reproduces `self`.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = Vec::new();
        let mut put = |k: &str, v: String| out.push((k.to_string(), v));
        let t = &self.train;
        put("command", self.command.clone());
        put("seed", self.seed.to_string());
        put("out", self.out_dir.display().to_string());
        match &self.data.source {
            DataSource::Toy => put("data.source", "toy".into()),
            DataSource::Cifar10 { train, test } => {
                put("data.source", "cifar10".into());
                put("data.train", join_paths(train));
                put("data.test", join_paths(test));
            }
        }
        put("data.train_limit", self.data.train_limit.to_string());
        put("data.test_limit", self.data.test_limit.to_string());
        let toy = &self.data.toy;
        put("data.toy.classes", toy.classes.to_string());
        put("data.toy.samples_per_class", toy.samples_per_class.to_string());
        put("data.toy.test_per_class", self.data.toy_test_per_class.to_string());
        put("data.toy.image_size", toy.image_size.to_string());
        put("data.toy.bars", format!("{},{}", toy.bars.0, toy.bars.1));
        put("data.toy.contrast", format!("{},{}", toy.contrast.0, toy.contrast.1));
        put("data.toy.noise", toy.noise.to_string());
        put("data.toy.grayscale", toy.grayscale.to_string());
        for (k, v) in self.model.to_pairs() {
            put(&k, v);
        }
        put("train.epochs", t.epochs.to_string());
        put("train.batch_size", t.batch_size.to_string());
        put("train.base_lr", t.base_lr.to_string());
        put("train.warmup_epochs", t.warmup_epochs.to_string());
        put("train.momentum", t.momentum.to_string());
        put("train.weight_decay", t.weight_decay.to_string());
        put("train.lambda", t.lambda.to_string());
        put("train.temperature", t.temperature.to_string());
        put("train.attack_target", t.attack_target.name().into());
        put("train.reg_target", t.reg_target.name().into());
        put("train.exclude_adv_negatives", t.exclude_adv_negatives.to_string());
        put("train.symmetric", t.symmetric.to_string());
        put("train.augment_supervised", t.augment_supervised.to_string());
        put("train.attack_bn", if t.attack_mode == Mode::Train { "train" } else { "eval" }.into());
        put("train.parallel", t.parallel.to_string());
        put("train.record_wall_time", self.record_wall_time.to_string());
        let a = &t.attack;
        put("attack.norm", a.norm.name().into());
        put("attack.epsilon", a.epsilon.to_string());
        put("attack.step_size", a.step_size.to_string());
        put("attack.steps", a.steps.to_string());
        put("attack.random_start", a.random_start.to_string());
        put("attack.temperature", a.temperature.to_string());
        let p = &t.augment;
        put("augment.crop_scale", format!("{},{}", p.crop_scale.0, p.crop_scale.1));
        put("augment.aspect_ratio", format!("{},{}", p.aspect_ratio.0, p.aspect_ratio.1));
        put("augment.flip_prob", p.flip_prob.to_string());
        put("augment.jitter_prob", p.jitter_prob.to_string());
        put("augment.jitter", format!("{},{},{}", p.jitter.hue, p.jitter.brightness, p.jitter.saturation));
        put("augment.gray_prob", p.gray_prob.to_string());
        for (prefix, le) in [("linear", &self.linear), ("rlinear", &self.robust_linear)] {
            for (k, v) in linear_pairs(le) {
                put(&format!("{prefix}.{k}"), v);
            }
        }
        put("eval.steps", self.eval_steps.to_string());
        put("eval.suite", self.suite_pairs().iter().map(|(l, e)| format!("{l}:{e}")).collect::<Vec<_>>().join(","));
        put("smoothing.n_samples", self.smoothing.n_samples.to_string());
        let cs = self.smoothing.policy.crop_scale;
        put("smoothing.crop_scale", format!("{},{}", cs.0, cs.1));
        put("smoothing.aggregation", self.smoothing.aggregation.name().into());
        put("smoothing.n_values", join(&self.smoothing_n_values));
        put("trades.beta", self.trades_beta.to_string());
        put("finetune.ss_weight", self.finetune_ss_weight.to_string());
        put("ablate.lambdas", join(&self.ablate_lambdas));
        put("ablate.batch_sizes", join(&self.ablate_batch_sizes));
        put("input.checkpoint", self.checkpoint.as_ref().map_or(String::new(), |p| p.display().to_string()));
        put("input.source_checkpoint", self.source_checkpoint.as_ref().map_or(String::new(), |p| p.display().to_string()));
        put("blackbox.instance", self.blackbox_instance.to_string());
        out
    }

    pub fn to_text(&self) -> String {
        self.to_pairs().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// SHA-256 of the canonical text, hex encoded.
    /// SHA-256 of every key that can change results; output location and threading are left out.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.to_pairs().iter().filter(|(k, _)| !EXECUTION_KEYS.contains(&k.as_str())) {
            h.update(format!("{k}={v}\n").as_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Range checks plus existence of the files the command reads.
    pub fn validate(&self) -> Result<()> {
        self.data.toy.validate().map_err(|e| prefixed("data.toy", e))?;
        self.model.validate().map_err(|e| prefixed("model", e))?;
        self.train.validate().map_err(|e| prefixed("train", e))?;
        self.linear.validate().map_err(|e| prefixed("linear", e))?;
        self.robust_linear.validate().map_err(|e| prefixed("rlinear", e))?;
        self.smoothing.validate().map_err(|e| prefixed("smoothing", e))?;
        if self.smoothing_n_values.is_empty() || self.smoothing_n_values.contains(&0) {
            return Err(Error::Invalid("smoothing.n_values: needs positive entries".into()));
        }
        if !(self.trades_beta >= 0.0) || !(self.finetune_ss_weight >= 0.0) {
            return Err(Error::Invalid("trades.beta and finetune.ss_weight must be non-negative".into()));
        }
        if self.ablate_lambdas.iter().any(|l| !(*l >= 0.0)) || self.ablate_batch_sizes.iter().any(|&b| b < 2) {
            return Err(Error::Invalid("ablate.lambdas must be non-negative and ablate.batch_sizes at least 2".into()));
        }
        if let DataSource::Cifar10 { train, test } = &self.data.source {
            if train.is_empty() || test.is_empty() {
                return Err(Error::Invalid("data.train, data.test: cifar10 needs both".into()));
            }
            for p in train.iter().chain(test) {
                if !p.is_file() {
                    return Err(Error::Invalid(format!("data: dataset file `{}` does not exist", p.display())));
                }
            }
        } else if self.model.input_dims != (3, self.data.toy.image_size, self.data.toy.image_size) {
            return Err(Error::Invalid(format!("model.input_dims: {:?} does not match toy images of size {}", self.model.input_dims, self.data.toy.image_size)));
        }
        for (key, path) in [("input.checkpoint", &self.checkpoint), ("input.source_checkpoint", &self.source_checkpoint)] {
            if let Some(p) = path {
                if !p.is_file() {
                    return Err(Error::Invalid(format!("{key}: `{}` does not exist", p.display())));
                }
            }
        }
        Ok(())
    }
}

fn prefixed(prefix: &str, e: Error) -> Error {
    match e {
        Error::Invalid(m) if !m.starts_with(prefix) => Error::Invalid(format!("{prefix}: {m}")),
        other => other,
    }
}

fn linear_pairs(le: &LinearEvalConfig) -> Vec<(&'static str, String)> {
    let mut pairs = vec![
        ("epochs", le.epochs.to_string()),
        ("batch_size", le.batch_size.to_string()),
        ("lr", le.lr.to_string()),
        ("momentum", le.momentum.to_string()),
        ("weight_decay", le.weight_decay.to_string()),
        ("milestones", join(&le.milestones)),
    ];
    match &le.attack {
        Some(a) => pairs.extend([("epsilon", a.epsilon.to_string()), ("step_size", a.step_size.to_string()), ("steps", a.steps.to_string())]),
        None => pairs.push(("steps", "0".into())),
    }
    pairs
}

/// `steps = 0` drops the attack; `epsilon` or `step_size` on its own adds one with `steps = 0` until steps are set.
fn set_linear(le: &mut LinearEvalConfig, field: &str, v: &str) -> Result<()> {
    let attack = || AttackConfig::pgd(Norm::Linf, 0.0314, 0);
    match field {
        "epochs" => le.epochs = parse_int(v)?,
        "batch_size" => le.batch_size = parse_int(v)?,
        "lr" => le.lr = parse_float(v)?,
        "momentum" => le.momentum = parse_float(v)?,
        "weight_decay" => le.weight_decay = parse_float(v)?,
        "milestones" => le.milestones = parse_floats(v)?,
        "epsilon" => le.attack.get_or_insert_with(attack).epsilon = parse_float(v)?,
        "step_size" => le.attack.get_or_insert_with(attack).step_size = parse_float(v)?,
        "steps" => match parse_int(v)? {
            0 => le.attack = None,
            steps => le.attack.get_or_insert_with(attack).steps = steps,
        },
        _ => return Err(Error::Invalid("unknown key".into())),
    }
    Ok(())
}

fn parse_suite(v: &str) -> Result<Vec<(String, f64)>> {
    v.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|item| {
            let (label, eps) = item.trim().split_once(':').ok_or_else(|| Error::Invalid(format!("eval.suite: expected norm:epsilon, got `{item}`")))?;
            Ok((label.trim().to_string(), parse_float(eps).map_err(|e| prefixed("eval.suite", e))?))
        })
        .collect()
}

fn optional_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn join_paths(v: &[PathBuf]) -> String {
    v.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(",")
}

fn parse_int<T: std::str::FromStr>(v: &str) -> Result<T> {
    v.trim().parse().map_err(|_| Error::Invalid(format!("expected a non-negative integer, got `{v}`")))
}

/// Decimal or `a/b` fraction.
pub fn parse_float(v: &str) -> Result<f64> {
    let v = v.trim();
    let bad = || Error::Invalid(format!("expected a number, got `{v}`"));
    let x = match v.split_once('/') {
        Some((a, b)) => a.trim().parse::<f64>().map_err(|_| bad())? / b.trim().parse::<f64>().map_err(|_| bad())?,
        None => v.parse::<f64>().map_err(|_| bad())?,
    };
    if x.is_finite() {
        Ok(x)
    } else {
        Err(bad())
    }
}

fn parse_floats(v: &str) -> Result<Vec<f64>> {
    v.split(',').filter(|s| !s.trim().is_empty()).map(parse_float).collect()
}

fn parse_list<T: std::str::FromStr>(v: &str) -> Result<Vec<T>> {
    v.split(',').filter(|s| !s.trim().is_empty()).map(parse_int).collect()
}

fn pair<T: Copy>(v: Vec<T>) -> Result<(T, T)> {
    match v[..] {
        [a, b] => Ok((a, b)),
        _ => Err(Error::Invalid(format!("expected two values, got {}", v.len()))),
    }
}

fn parse_bool(v: &str) -> Result<bool> {
    match v.trim() {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(Error::Invalid(format!("expected true or false, got `{other}`"))),
    }
}

fn parse_mode(v: &str) -> Result<Mode> {
    match v.trim() {
        "train" => Ok(Mode::Train),
        "eval" => Ok(Mode::Eval),
        other => Err(Error::Invalid(format!("expected train or eval, got `{other}`"))),
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::toy()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_round_trip() {
        for c in [ExperimentConfig::toy(), ExperimentConfig::paper_cifar10()] {
            let back = ExperimentConfig::parse(&c.to_text()).unwrap();
            assert_eq!(back, c);
            assert_eq!(back.hash(), c.hash());
        }
    }

    #[test]
    fn paper_preset_echoes_reference_values() {
        let t = ExperimentConfig::paper_cifar10().train;
        assert_eq!((t.temperature, t.lambda, t.attack.epsilon, t.attack.step_size, t.attack.steps, t.batch_size), (0.5, 1.0 / 256.0, 0.0314, 0.007, 7, 512));
    }

    #[test]
    fn overrides_comments_and_fractions() {
        let c = ExperimentConfig::parse("# comment\npreset = toy\ntrain.lambda = 1/64  # inline\nmodel.projection_dim = 16\neval.suite = linf:8/255,cw-linf:0.03\n").unwrap();
        assert_eq!(c.train.lambda, 1.0 / 64.0);
        assert_eq!(c.model.projection_dim, 16);
        assert_eq!(c.suite.len(), 2);
        assert_eq!(ExperimentConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn bad_input_names_the_field() {
        let e = ExperimentConfig::parse("train.epochs = many").unwrap_err().to_string();
        assert!(e.contains("train.epochs"), "{e}");
        let e = ExperimentConfig::parse("nope.key = 1").unwrap_err().to_string();
        assert!(e.contains("nope.key"), "{e}");
        let c = ExperimentConfig::parse("data.source = cifar10\ndata.train = /missing.bin\ndata.test = /missing.bin").unwrap();
        assert!(c.validate().unwrap_err().to_string().contains("/missing.bin"));
    }
}

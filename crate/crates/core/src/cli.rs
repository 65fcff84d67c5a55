//! Command-line front end: config loading, command dispatch and report output.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::Parser;

use crate::checkpoint::{load_checkpoint, save_checkpoint, Metadata};
use crate::config::{DataSource, ExperimentConfig};
use crate::data::{load_records, save_records, toy_splits, Dataset};
use crate::error::{Error, Result};
use crate::eval::{blackbox_eval, evaluate_robustness, linear_eval, robust_linear_eval, smoothing_curve, transfer_eval, RobustnessReport, SourceKind};
use crate::model::Model;
use crate::report::{emit_table, manifest, parse_robustness_csv, smoothing_table, write_file, Table};
use crate::train::{finetune_rocl_at_ss, train_rocl, train_supervised, Supervised, TrainConfig, ViewTarget};

pub const COMMANDS: &[&str] = &[
    "gen-toy",
    "train-rocl",
    "train-at",
    "train-trades",
    "finetune",
    "linear-eval",
    "robust-linear-eval",
    "evaluate",
    "blackbox",
    "smoothing",
    "transfer",
    "ablate-xy",
    "ablate-lambda",
    "ablate-batch",
    "report",
];

#[derive(Debug, Parser)]
#[command(name = "rocl", version, about = "Adversarial contrastive pre-training and robustness evaluation")]
pub struct Args {
    /// One of: gen-toy, train-rocl, train-at, train-trades, finetune, linear-eval,
    /// robust-linear-eval, evaluate, blackbox, smoothing, transfer, ablate-xy,
    /// ablate-lambda, ablate-batch, report.
    pub command: String,
    /// Config file of `key = value` lines; the toy preset when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Exit status: 0 success, 1 runtime failure, 2 invalid invocation or config.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args = match Args::try_parse_from(args) {
        Ok(a) => a,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let cfg = match load_config(&args) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("invalid config: {e}");
            return 2;
        }
    };
    match execute(&cfg) {
        Ok(()) => 0,
        Err((stage, e)) => {
            eprintln!("{} failed during {stage}: {e}", cfg.command);
            1
        }
    }
}

pub fn load_config(args: &Args) -> Result<ExperimentConfig> {
    if !COMMANDS.contains(&args.command.as_str()) {
        return Err(Error::Invalid(format!("command: unknown command `{}` (expected one of {})", args.command, COMMANDS.join(", "))));
    }
    let base = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::Invalid(format!("--config: cannot read `{}`: {e}", path.display())))?;
            ExperimentConfig::parse(&text)?
        }
        None => ExperimentConfig::toy(),
    };
    let mut pairs: Vec<(String, String)> = Vec::new();
    for o in &args.overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| Error::Invalid(format!("--set: expected KEY=VALUE, got `{o}`")))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    pairs.push(("command".into(), args.command.clone()));
    if let Some(seed) = args.seed {
        pairs.push(("seed".into(), seed.to_string()));
    }
    if let Some(out) = &args.out {
        pairs.push(("out".into(), out.display().to_string()));
    }
    let cfg = base.with_overrides(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
    cfg.validate()?;
    let needs_checkpoint = ["finetune", "linear-eval", "robust-linear-eval", "evaluate", "blackbox", "smoothing", "transfer"];
    if needs_checkpoint.contains(&cfg.command.as_str()) && cfg.checkpoint.is_none() {
        return Err(Error::Invalid(format!("input.checkpoint: `{}` needs a model checkpoint", cfg.command)));
    }
    if cfg.command == "blackbox" && cfg.source_checkpoint.is_none() {
        return Err(Error::Invalid("input.source_checkpoint: blackbox needs a source model".into()));
    }
    Ok(cfg)
}

type Staged<T> = std::result::Result<T, (&'static str, Error)>;

fn stage<T>(name: &'static str, r: Result<T>) -> Staged<T> {
    r.map_err(|e| (name, e))
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let (train, test) = match &cfg.data.source {
        DataSource::Toy => toy_splits(&cfg.data.toy, cfg.data.toy_test_per_class)?,
        DataSource::Cifar10 { train, test } => {
            let paths = |v: &[PathBuf]| v.to_vec();
            let dims = cfg.model.input_dims;
            let k = cfg.model.num_classes;
            let tr = paths(train);
            let te = paths(test);
            (
                load_records(&tr.iter().map(PathBuf::as_path).collect::<Vec<_>>(), dims, k, "cifar10", "train")?,
                load_records(&te.iter().map(PathBuf::as_path).collect::<Vec<_>>(), dims, k, "cifar10", "test")?,
            )
        }
    };
    let limit = |d: Dataset, n: usize| if n > 0 && n < d.len() { d.take(n) } else { d };
    Ok((limit(train, cfg.data.train_limit), limit(test, cfg.data.test_limit)))
}

fn metadata(cfg: &ExperimentConfig) -> Metadata {
    [("command".to_string(), cfg.command.clone()), ("seed".to_string(), cfg.seed.to_string()), ("config_hash".to_string(), cfg.hash())].into()
}

fn save_model(cfg: &ExperimentConfig, model: &Model, name: &str) -> Result<()> {
    fs::create_dir_all(&cfg.out_dir).map_err(|source| Error::Io { path: cfg.out_dir.clone(), source })?;
    save_checkpoint(model, &metadata(cfg), &cfg.out_dir.join(name))
}

fn load_model(path: &Path, cfg: &ExperimentConfig) -> Result<Model> {
    let (model, _) = load_checkpoint(path)?;
    if model.config.input_dims != cfg.model.input_dims {
        return Err(Error::Invalid(format!("checkpoint `{}` expects input {:?}, data has {:?}", path.display(), model.config.input_dims, cfg.model.input_dims)));
    }
    Ok(model)
}

fn robustness(cfg: &ExperimentConfig, model: &Model, test: &Dataset, id: &str) -> Result<RobustnessReport> {
    evaluate_robustness(model, test, &cfg.suite, id, cfg.seed, cfg.train.parallel)
}

/// Linear evaluation followed by the robustness suite, used by the ablation grids.
fn pretrain_and_report(cfg: &ExperimentConfig, train_cfg: &TrainConfig, train: &Dataset, test: &Dataset, id: &str) -> Result<RobustnessReport> {
    let (model, _) = train_rocl(train, &cfg.model, train_cfg, None)?;
    let (model, _) = linear_eval(&model, train, &cfg.linear)?;
    robustness(cfg, &model, test, id)
}

pub fn execute(cfg: &ExperimentConfig) -> Staged<()> {
    let out = cfg.out_dir.as_path();
    stage("output", fs::create_dir_all(out).map_err(|source| Error::Io { path: out.to_path_buf(), source }))?;
    stage("output", write_file(&out.join("manifest.txt"), &manifest(cfg)))?;
    stage("output", write_file(&out.join("config.txt"), &cfg.to_text()))?;
    if cfg.command == "report" {
        return stage("report", summarize(out));
    }
    let (train, test) = stage("data", load_data(cfg))?;
    let checkpoint = || stage("checkpoint", load_model(cfg.checkpoint.as_ref().expect("validated"), cfg));
    match cfg.command.as_str() {
        "gen-toy" => {
            stage("output", save_records(&train, &out.join("toy_train.bin")))?;
            stage("output", save_records(&test, &out.join("toy_test.bin")))?;
        }
        "train-rocl" => {
            let (_, report) = stage("train", train_rocl(&train, &cfg.model, &cfg.train, Some(out)))?;
            stage("output", write_file(&out.join("train_log.csv"), &report.to_csv(cfg.record_wall_time)))?;
        }
        "train-at" | "train-trades" | "finetune" => {
            let (objective, init, name) = match cfg.command.as_str() {
                "train-at" => (Supervised::Adversarial, None, "at"),
                "train-trades" => (Supervised::Trades { beta: cfg.trades_beta }, None, "trades"),
                _ => (Supervised::AdversarialSelfSupervised { weight: cfg.finetune_ss_weight }, Some(checkpoint()?), "finetune"),
            };
            let model = match init {
                Some(m) => stage("train", finetune_rocl_at_ss(&m, &train, &cfg.train, cfg.finetune_ss_weight))?,
                None => {
                    let m = stage("train", Model::init(cfg.model.clone(), cfg.seed))?;
                    let (model, report) = stage("train", train_supervised(m, &train, &cfg.train, objective, Some(out)))?;
                    stage("output", write_file(&out.join("train_log.csv"), &report.to_csv(cfg.record_wall_time)))?;
                    model
                }
            };
            stage("checkpoint", save_model(cfg, &model, &format!("{name}.ckpt")))?;
            let report = stage("evaluate", robustness(cfg, &model, &test, name))?;
            stage("output", emit_table(&[report], out, "robustness"))?;
        }
        "linear-eval" | "robust-linear-eval" | "transfer" => {
            let frozen = checkpoint()?;
            let (model, report) = match cfg.command.as_str() {
                "linear-eval" => {
                    let (m, _) = stage("linear-eval", linear_eval(&frozen, &train, &cfg.linear))?;
                    let r = stage("evaluate", robustness(cfg, &m, &test, "le"))?;
                    (m, r)
                }
                "robust-linear-eval" => {
                    let (m, _) = stage("linear-eval", robust_linear_eval(&frozen, &train, &cfg.robust_linear))?;
                    let r = stage("evaluate", robustness(cfg, &m, &test, "rle"))?;
                    (m, r)
                }
                _ => stage("transfer", transfer_eval(&frozen, &train, &test, &cfg.linear, &cfg.suite, "transfer"))?,
            };
            stage("checkpoint", save_model(cfg, &model, &format!("{}.ckpt", report.model)))?;
            stage("output", emit_table(&[report], out, "robustness"))?;
        }
        "evaluate" => {
            let model = checkpoint()?;
            let report = stage("evaluate", robustness(cfg, &model, &test, "model"))?;
            stage("output", emit_table(&[report], out, "robustness"))?;
        }
        "blackbox" => {
            let target = checkpoint()?;
            let source = stage("checkpoint", load_model(cfg.source_checkpoint.as_ref().expect("validated"), cfg))?;
            let kind = if cfg.blackbox_instance { SourceKind::Instance } else { SourceKind::Supervised };
            let mut t = Table::new(&["source_kind", "attack_norm", "epsilon", "steps", "accuracy"]);
            for attack in cfg.suite.iter().filter(|a| a.kind == crate::eval::AttackKind::Pgd) {
                let acc = stage("evaluate", blackbox_eval(&source, &target, &test, &attack.config, kind, cfg.seed, cfg.train.parallel))?;
                let kind_name = if cfg.blackbox_instance { "instance" } else { "supervised" };
                t.push(vec![kind_name.into(), attack.label(), attack.config.epsilon.to_string(), attack.config.steps.to_string(), format!("{acc:.2}")]);
            }
            stage("output", t.write(out, "blackbox"))?;
        }
        "smoothing" => {
            let model = checkpoint()?;
            let source = match &cfg.source_checkpoint {
                Some(p) => Some(stage("checkpoint", load_model(p, cfg))?),
                None => None,
            };
            let seen = cfg.suite.first().map(|a| a.config.clone()).ok_or(("smoothing", Error::Invalid("eval.suite is empty".into())))?;
            let rows = stage("evaluate", smoothing_curve(&model, &test, &cfg.smoothing_n_values, source.as_ref().map(|s| (s, &seen)), &cfg.smoothing, cfg.seed, cfg.train.parallel))?;
            stage("output", smoothing_table(&rows).write(out, "smoothing"))?;
        }
        "ablate-xy" => {
            let mut reports = Vec::new();
            for x in [ViewTarget::TPrime, ViewTarget::T] {
                for y in [ViewTarget::TPrime, ViewTarget::T] {
                    let tc = TrainConfig { attack_target: x, reg_target: y, ..cfg.train.clone() };
                    reports.push(stage("train", pretrain_and_report(cfg, &tc, &train, &test, &format!("X={} Y={}", x.name(), y.name())))?);
                }
            }
            stage("output", emit_table(&reports, out, "ablate_xy"))?;
        }
        "ablate-lambda" | "ablate-batch" => {
            let variants: Vec<(String, TrainConfig)> = if cfg.command == "ablate-lambda" {
                cfg.ablate_lambdas.iter().map(|&l| (format!("lambda={l}"), TrainConfig { lambda: l, ..cfg.train.clone() })).collect()
            } else {
                cfg.ablate_batch_sizes.iter().map(|&b| (format!("batch={b}"), TrainConfig { batch_size: b, ..cfg.train.clone() })).collect()
            };
            let mut reports = Vec::new();
            for (id, tc) in &variants {
                reports.push(stage("train", pretrain_and_report(cfg, tc, &train, &test, id))?);
            }
            stage("output", emit_table(&reports, out, &cfg.command.replace('-', "_")))?;
        }
        other => unreachable!("command `{other}` passed validation"),
    }
    Ok(())
}

/// Merge every `*_rows.csv` under `dir` into `summary.txt`/`summary.csv`.
fn summarize(dir: &Path) -> Result<()> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|source| Error::Io { path: dir.to_path_buf(), source })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with("_rows.csv")))
        .collect();
    files.sort();
    let mut reports = Vec::new();
    for f in files {
        let text = fs::read_to_string(&f).map_err(|source| Error::Io { path: f.clone(), source })?;
        reports.extend(parse_robustness_csv(&text)?);
    }
    crate::report::robustness_table(&reports).write(dir, "summary")
}

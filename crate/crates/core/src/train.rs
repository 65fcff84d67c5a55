//! Training loops: adversarial contrastive pre-training, supervised
//! adversarial training, TRADES and adversarial finetuning.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;

use crate::attacks::{instance_wise_attack, max_perturbation, pgd_custom, pgd_supervised, AttackConfig, AttackLoss, InstanceTargets};
use crate::augment::{augment_batch, AugmentPolicy};
use crate::autodiff::{forward, grad, value_and_grad, Evaluation, GradientMap, Mode};
use crate::checkpoint::{save_checkpoint, Metadata};
use crate::data::Dataset;
use crate::error::{Error, GraphError, Result};
use crate::graph::{Graph, NodeId};
use crate::losses::{contrastive_node, cross_entropy_node, kl_node, ContrastiveLayout, Reduction, ViewOrder};
use crate::model::{Component, Model, ModelConfig, ModelParams};
use crate::rng::{derive_seed, rng_from, stream};
use crate::tensor::Tensor;
use crate::Real;

/// Which clean view serves as the positive target.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViewTarget {
    T,
    TPrime,
}

impl ViewTarget {
    pub fn name(self) -> &'static str {
        match self {
            ViewTarget::T => "t",
            ViewTarget::TPrime => "t_prime",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "t" => Some(ViewTarget::T),
            "t_prime" => Some(ViewTarget::TPrime),
            _ => None,
        }
    }

    /// View index in the `[t, t', adv]` stacking.
    fn view(self) -> usize {
        match self {
            ViewTarget::T => 0,
            ViewTarget::TPrime => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Weight of the adversarial regularizer.
    pub lambda: f64,
    pub temperature: f64,
    pub attack: AttackConfig,
    /// Positive of the instance-wise attack.
    pub attack_target: ViewTarget,
    /// Positive of the regularizer anchored at the adversarial view.
    pub reg_target: ViewTarget,
    /// Drop adversarial views of other samples from every negative set.
    pub exclude_adv_negatives: bool,
    /// Use both t and t' as anchors of the main loss (otherwise t only).
    pub symmetric: bool,
    pub augment: AugmentPolicy,
    /// Augment inputs of the supervised trainers too.
    pub augment_supervised: bool,
    /// Batch-norm mode while generating training-time attacks.
    pub attack_mode: Mode,
    pub parallel: bool,
    pub seed: u64,
}

impl TrainConfig {
    /// Large-scale reference values; not runnable on a desk.
    pub fn paper() -> Self {
        TrainConfig {
            epochs: 1000,
            batch_size: 512,
            base_lr: 1.0,
            warmup_epochs: 10,
            momentum: 0.9,
            weight_decay: 1e-6,
            lambda: 1.0 / 256.0,
            temperature: 0.5,
            attack: AttackConfig::instance(0.0314, 0.007, 7),
            attack_target: ViewTarget::TPrime,
            reg_target: ViewTarget::TPrime,
            exclude_adv_negatives: false,
            symmetric: true,
            augment: AugmentPolicy::simclr(),
            augment_supervised: false,
            attack_mode: Mode::Train,
            parallel: true,
            seed: 0,
        }
    }

    /// Scaled for minutes of CPU time on the toy dataset.
    ///
    /// Three large attack steps replace seven small ones at the same radius.
    pub fn toy() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 64,
            base_lr: 0.1,
            warmup_epochs: 1,
            lambda: 1.0 / 16.0,
            attack: AttackConfig::instance(8.0 / 255.0, 6.0 / 255.0, 3),
            ..Self::paper()
        }
    }

    /// Contrastive training without attack or regularizer.
    pub fn standard_contrastive(mut self) -> Self {
        self.attack.steps = 0;
        self.lambda = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.epochs == 0 {
            return bad("train.epochs must be positive".into());
        }
        if self.batch_size < 2 {
            return bad(format!("train.batch_size {} must be at least 2", self.batch_size));
        }
        if self.warmup_epochs > self.epochs {
            return bad(format!("train.warmup_epochs {} exceeds epochs {}", self.warmup_epochs, self.epochs));
        }
        if !(self.lambda >= 0.0) {
            return bad(format!("train.lambda {} must be non-negative", self.lambda));
        }
        if !(self.base_lr >= 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return bad("train.base_lr, momentum or weight_decay out of range".into());
        }
        if !(self.temperature > 0.0) {
            return bad(format!("train.temperature {} must be positive", self.temperature));
        }
        self.attack.validate()?;
        self.augment.validate()
    }
}

/// Linear warmup from 0 to `base_lr`, then cosine decay to 0 at `epoch_fraction = 1`.
pub fn lr_schedule(epoch_fraction: f64, cfg: &TrainConfig) -> f64 {
    let f = epoch_fraction.clamp(0.0, 1.0);
    let w = cfg.warmup_epochs as f64 / cfg.epochs as f64;
    if f < w {
        return cfg.base_lr * f / w;
    }
    if w >= 1.0 {
        return cfg.base_lr;
    }
    let progress = (f - w) / (1.0 - w);
    cfg.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// SGD with momentum; weight decay skips batch-norm scale and shift.
#[derive(Debug, Clone, Default)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: HashMap<String, Vec<Real>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd { momentum, weight_decay, velocity: HashMap::new() }
    }

    /// `v = mu v + g + wd w`, `w -= lr v`.
    pub fn step(&mut self, params: &mut ModelParams, grads: &GradientMap<Real>, lr: f64) -> Result<()> {
        let (mu, lr) = (self.momentum as Real, lr as Real);
        for (name, g) in grads {
            let spec = params.spec(name).ok_or_else(|| Error::Invalid(format!("gradient for unknown parameter `{name}`")))?;
            if !spec.kind.trainable() {
                return Err(Error::Invalid(format!("`{name}` is not trainable")));
            }
            let wd = if spec.kind.decays() { self.weight_decay as Real } else { 0.0 };
            let w = params.get_mut(name).expect("spec exists");
            let v = self.velocity.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for ((wi, vi), &gi) in w.data_mut().iter_mut().zip(v.iter_mut()).zip(g.data()) {
                *vi = mu * *vi + gi + wd * *wi;
                *wi -= lr * *vi;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepLosses {
    pub total: f64,
    /// Main objective (contrastive for pre-training, cross-entropy for supervised).
    pub primary: f64,
    /// Regularizer (adversarial contrastive, KL, or self-supervised term).
    pub regularizer: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub total_loss: f64,
    pub rocl_loss: f64,
    pub reg_loss: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    pub records: Vec<EpochRecord>,
    pub checkpoint: Option<PathBuf>,
}

impl TrainReport {
    pub const HEADER: &'static str = "epoch,total_loss,rocl_loss,reg_loss,lr,seconds";

    /// CSV with a fixed header; `seconds` is written as 0 unless `wall_time` is set
    /// so reruns stay byte-identical.
    pub fn to_csv(&self, wall_time: bool) -> String {
        let mut out = format!("{}\n", Self::HEADER);
        for r in &self.records {
            let secs = if wall_time { r.seconds } else { 0.0 };
            out.push_str(&format!("{},{:.6},{:.6},{:.6},{:.6},{:.3}\n", r.epoch, r.total_loss, r.rocl_loss, r.reg_loss, r.lr, secs));
        }
        out
    }
}

fn diverged(epoch: usize, step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Graph(g @ GraphError::NonFinite { .. }) => Error::Diverged { epoch, step, detail: g.to_string() },
        other => other,
    }
}

fn check_finite(losses: StepLosses, epoch: usize, step: usize) -> Result<StepLosses> {
    if losses.total.is_finite() && losses.primary.is_finite() && losses.regularizer.is_finite() {
        Ok(losses)
    } else {
        Err(Error::Diverged { epoch, step, detail: format!("{losses:?}") })
    }
}

/// Position of one optimizer step, used for seeds and the learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepIndex {
    pub epoch: usize,
    pub step: usize,
    pub steps_per_epoch: usize,
}

impl StepIndex {
    fn fraction(&self, epochs: usize) -> f64 {
        (self.epoch as f64 + (self.step as f64 + 0.5) / self.steps_per_epoch as f64) / epochs as f64
    }

    fn seed(&self, cfg: &TrainConfig, tag: u64) -> u64 {
        derive_seed(&[tag, cfg.seed, self.epoch as u64, self.step as u64])
    }
}

/// Two augmented views of every image, seeded by the dataset index of the sample.
pub fn two_views(cfg: &TrainConfig, images: &Tensor, ids: &[usize], epoch: usize) -> Result<(Tensor, Tensor)> {
    let seeds = |view: u64| -> Vec<u64> {
        ids.iter().map(|&i| derive_seed(&[stream::AUGMENT, cfg.seed, epoch as u64, i as u64, view])).collect()
    };
    let (t, _) = augment_batch(&cfg.augment, images, &seeds(0), cfg.parallel)?;
    let (tp, _) = augment_batch(&cfg.augment, images, &seeds(1), cfg.parallel)?;
    Ok((t, tp))
}

/// Stack equally shaped batches along the first axis.
pub fn concat_batches(parts: &[&Tensor]) -> Result<Tensor> {
    let mut shape = parts[0].shape().to_vec();
    shape[0] = parts.iter().map(|p| p.shape()[0]).sum();
    let data = parts.iter().flat_map(|p| p.data().iter().copied()).collect();
    Ok(Tensor::new(shape, data)?)
}

fn identity_attack(cfg: &TrainConfig) -> bool {
    cfg.attack.steps == 0 || cfg.attack.epsilon == 0.0
}

/// Layouts of the main loss and the regularizer over rows `[t; t'; adv]`.
///
/// Without an attack the adversarial view would duplicate `t`, so rows are
/// `[t; t']` and the regularizer anchors `t` against `t'`.
pub fn rocl_layouts(m: usize, cfg: &TrainConfig) -> Result<(ContrastiveLayout, ContrastiveLayout)> {
    if identity_attack(cfg) {
        let main = vec![vec![false, true], vec![cfg.symmetric, false]];
        let reg = vec![vec![false, true], vec![false, false]];
        return Ok((
            ContrastiveLayout::from_views(m, 2, &main, &[true, true], ViewOrder::ViewMajor)?,
            ContrastiveLayout::from_views(m, 2, &reg, &[true, true], ViewOrder::ViewMajor)?,
        ));
    }
    let negatives = [true, true, !cfg.exclude_adv_negatives];
    let mut main = vec![vec![false; 3]; 3];
    main[0] = vec![false, true, true];
    if cfg.symmetric {
        main[1] = vec![true, false, true];
    }
    let mut reg = vec![vec![false; 3]; 3];
    reg[2][cfg.reg_target.view()] = true;
    Ok((
        ContrastiveLayout::from_views(m, 3, &main, &negatives, ViewOrder::ViewMajor)?,
        ContrastiveLayout::from_views(m, 3, &reg, &negatives, ViewOrder::ViewMajor)?,
    ))
}

/// Clean-view embeddings and the per-anchor targets of the instance-wise attack.
fn attack_targets(model: &Model, t: &Tensor, tp: &Tensor, cfg: &TrainConfig) -> Result<InstanceTargets> {
    let m = t.shape()[0];
    let both = concat_batches(&[t, tp])?;
    let net = model.net();
    let mut g = Graph::new();
    let x = g.leaf("x", both.shape())?;
    let h = net.encoder(&mut g, x)?;
    let z = net.projector(&mut g, h)?;
    let mut b = model.params.bindings();
    b.insert("x", &both);
    let bank = forward(&g, &b, cfg.attack_mode)?.take(z);
    let target = match cfg.attack_target {
        ViewTarget::T => 0,
        ViewTarget::TPrime => m,
    };
    Ok(InstanceTargets {
        bank,
        positives: (0..m).map(|i| vec![target + i]).collect(),
        negatives: (0..m).map(|i| (0..m).filter(|&j| j != i).flat_map(|j| [j, m + j]).collect()).collect(),
    })
}

fn scalar(eval: &Evaluation<Real>, id: NodeId) -> f64 {
    eval.value(id).item() as f64
}

/// Augment, attack, and take one optimizer step on the adversarial contrastive objective.
pub fn rocl_step(model: &mut Model, images: &Tensor, ids: &[usize], cfg: &TrainConfig, at: StepIndex, opt: &mut Sgd) -> Result<StepLosses> {
    let m = images.shape()[0];
    let (t, tp) = two_views(cfg, images, ids, at.epoch)?;
    let input = if identity_attack(cfg) {
        concat_batches(&[&t, &tp])?
    } else {
        let targets = attack_targets(model, &t, &tp, cfg)?;
        let adv = instance_wise_attack(model, &t, &targets, &cfg.attack, at.seed(cfg, stream::ATTACK_START), cfg.attack_mode)?;
        debug_assert!(max_perturbation(&adv, &t, cfg.attack.norm) <= cfg.attack.epsilon + 1e-6);
        concat_batches(&[&t, &tp, &adv])?
    };
    let (main_layout, reg_layout) = rocl_layouts(m, cfg)?;
    let net = model.net();
    let mut g = Graph::new();
    let x = g.leaf("x", input.shape())?;
    let h = net.encoder(&mut g, x)?;
    let z = net.projector(&mut g, h)?;
    let main = contrastive_node(&mut g, z, &main_layout, cfg.temperature)?;
    let reg = contrastive_node(&mut g, z, &reg_layout, cfg.temperature)?;
    let weighted = g.mul_scalar(reg, cfg.lambda)?;
    let total = g.add(main, weighted)?;

    let names = model.params.trainable(&[Component::Theta, Component::Pi]);
    let wrt: Vec<&str> = names.iter().map(String::as_str).collect();
    let (eval, grads) = {
        let mut b = model.params.bindings();
        b.insert("x", &input);
        value_and_grad(&g, total, &wrt, &b, Mode::Train).map_err(|e| diverged(at.epoch, at.step)(e.into()))?
    };
    let losses = check_finite(
        StepLosses { total: scalar(&eval, total), primary: scalar(&eval, main), regularizer: scalar(&eval, reg) },
        at.epoch,
        at.step,
    )?;
    model.params.update_running_stats(&eval.batch_stats);
    opt.step(&mut model.params, &grads, lr_schedule(at.fraction(cfg.epochs), cfg))?;
    Ok(losses)
}

/// Shuffled batches of `batch_size`; a short tail is dropped unless it is the only batch.
fn epoch_batches(n: usize, cfg: &TrainConfig, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_from(&[stream::SHUFFLE, cfg.seed, epoch as u64]));
    if n <= cfg.batch_size {
        return vec![order];
    }
    order.chunks_exact(cfg.batch_size).map(|c| c.to_vec()).collect()
}

fn run_epochs(
    model: &mut Model,
    dataset: &Dataset,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    file: &str,
    mut step_fn: impl FnMut(&mut Model, &[usize], StepIndex, &mut Sgd) -> Result<StepLosses>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if dataset.len() < 2 {
        return Err(Error::Invalid(format!("dataset `{}` needs at least 2 samples", dataset.name)));
    }
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut report = TrainReport::default();
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let batches = epoch_batches(dataset.len(), cfg, epoch);
        let mut sum = StepLosses::default();
        for (step, ids) in batches.iter().enumerate() {
            let at = StepIndex { epoch, step, steps_per_epoch: batches.len() };
            let l = step_fn(model, ids, at, &mut opt)?;
            sum.total += l.total;
            sum.primary += l.primary;
            sum.regularizer += l.regularizer;
        }
        let k = batches.len() as f64;
        let last = StepIndex { epoch, step: batches.len() - 1, steps_per_epoch: batches.len() };
        report.records.push(EpochRecord {
            epoch: epoch + 1,
            total_loss: sum.total / k,
            rocl_loss: sum.primary / k,
            reg_loss: sum.regularizer / k,
            lr: lr_schedule(last.fraction(cfg.epochs), cfg),
            seconds: start.elapsed().as_secs_f64(),
        });
        if let Some(dir) = out_dir {
            let path = dir.join(file);
            let meta: Metadata = [
                ("seed".to_string(), cfg.seed.to_string()),
                ("epoch".to_string(), (epoch + 1).to_string()),
                ("trainer".to_string(), file.trim_end_matches(".ckpt").to_string()),
            ]
            .into();
            save_checkpoint(model, &meta, &path)?;
            report.checkpoint = Some(path);
        }
    }
    Ok(report)
}

/// Adversarial contrastive pre-training from a fresh initialization.
pub fn train_rocl(dataset: &Dataset, model_config: &ModelConfig, cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<(Model, TrainReport)> {
    let mut model = Model::init(model_config.clone(), cfg.seed)?;
    let report = run_epochs(&mut model, dataset, cfg, out_dir, "rocl.ckpt", |model, ids, at, opt| {
        let images = dataset.images_at(ids);
        rocl_step(model, &images, ids, cfg, at, opt)
    })?;
    Ok((model, report))
}

/// Supervised objectives sharing one loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Supervised {
    /// Cross-entropy on PGD examples.
    Adversarial,
    /// Clean cross-entropy plus `beta` times KL(clean || adversarial).
    Trades { beta: f64 },
    /// Adversarial cross-entropy plus `weight` times the contrastive loss of two clean views.
    AdversarialSelfSupervised { weight: f64 },
}

/// The PGD configuration supervised trainers use: the training attack budget
/// with cross-entropy and a random start.
pub fn supervised_attack(cfg: &TrainConfig) -> AttackConfig {
    AttackConfig { loss: AttackLoss::CrossEntropy, random_start: true, ..cfg.attack.clone() }
}

fn trades_adversary(model: &Model, x: &Tensor, cfg: &TrainConfig, seed: u64) -> Result<Tensor> {
    let m = x.shape()[0];
    let clean = model.logits(x, cfg.attack_mode)?;
    let net = model.net();
    let mut g = Graph::new();
    let xa = net.input(&mut g, "x", m)?;
    let h = net.encoder(&mut g, xa)?;
    let logits = net.head(&mut g, h)?;
    let fixed = g.constant(clean.shape(), clean.data().iter().map(|&v| v as f64).collect())?;
    let kl = kl_node(&mut g, fixed, logits, Reduction::Sum)?;
    pgd_custom(x, &supervised_attack(cfg), seed, |cur, _| {
        let mut b = model.params.bindings();
        b.insert("x", cur);
        Ok(grad(&g, kl, &["x"], &b, cfg.attack_mode)?.remove("x").expect("requested"))
    })
}

fn supervised_step(
    model: &mut Model,
    dataset: &Dataset,
    ids: &[usize],
    cfg: &TrainConfig,
    objective: Supervised,
    at: StepIndex,
    opt: &mut Sgd,
) -> Result<StepLosses> {
    let m = ids.len();
    let raw = dataset.images_at(ids);
    let y = dataset.labels_at(ids)?;
    let x = if cfg.augment_supervised {
        let seeds: Vec<u64> = ids.iter().map(|&i| derive_seed(&[stream::AUGMENT, cfg.seed, at.epoch as u64, i as u64, 2])).collect();
        augment_batch(&cfg.augment, &raw, &seeds, cfg.parallel)?.0
    } else {
        raw.clone()
    };
    let attack_seed = at.seed(cfg, stream::ATTACK_START);
    let net = model.net();
    let mut g = Graph::new();
    let mut inputs: Vec<(&str, Tensor)> = Vec::new();
    let mut components = vec![Component::Theta, Component::Psi];
    let (primary, regularizer) = match objective {
        Supervised::Adversarial | Supervised::AdversarialSelfSupervised { .. } => {
            let adv = pgd_supervised(model, &x, &y, &supervised_attack(cfg), attack_seed, cfg.attack_mode)?;
            debug_assert!(max_perturbation(&adv, &x, cfg.attack.norm) <= cfg.attack.epsilon + 1e-6);
            let xa = g.leaf("x", adv.shape())?;
            inputs.push(("x", adv));
            let h = net.encoder(&mut g, xa)?;
            let logits = net.head(&mut g, h)?;
            let ce = cross_entropy_node(&mut g, logits, &y, Reduction::Mean)?;
            let reg = match objective {
                Supervised::AdversarialSelfSupervised { weight } if weight > 0.0 => {
                    components.push(Component::Pi);
                    let (t, tp) = two_views(cfg, &raw, ids, at.epoch)?;
                    let views = concat_batches(&[&t, &tp])?;
                    let xv = g.leaf("views", views.shape())?;
                    inputs.push(("views", views));
                    let hv = net.encoder(&mut g, xv)?;
                    let zv = net.projector(&mut g, hv)?;
                    let layout = ContrastiveLayout::all_pairs(m, 2, ViewOrder::ViewMajor)?;
                    Some((contrastive_node(&mut g, zv, &layout, cfg.temperature)?, weight))
                }
                _ => None,
            };
            (ce, reg)
        }
        Supervised::Trades { beta } => {
            if beta > 0.0 {
                let adv = trades_adversary(model, &x, cfg, attack_seed)?;
                debug_assert!(max_perturbation(&adv, &x, cfg.attack.norm) <= cfg.attack.epsilon + 1e-6);
                let both = concat_batches(&[&x, &adv])?;
                let xb = g.leaf("x", both.shape())?;
                inputs.push(("x", both));
                let h = net.encoder(&mut g, xb)?;
                let logits = net.head(&mut g, h)?;
                let clean = g.slice(logits, 0, 0, m)?;
                let advl = g.slice(logits, 0, m, 2 * m)?;
                let ce = cross_entropy_node(&mut g, clean, &y, Reduction::Mean)?;
                let kl = kl_node(&mut g, clean, advl, Reduction::Mean)?;
                (ce, Some((kl, beta)))
            } else {
                let xc = g.leaf("x", x.shape())?;
                inputs.push(("x", x.clone()));
                let h = net.encoder(&mut g, xc)?;
                let logits = net.head(&mut g, h)?;
                (cross_entropy_node(&mut g, logits, &y, Reduction::Mean)?, None)
            }
        }
    };
    let total = match regularizer {
        Some((r, w)) => {
            let scaled = g.mul_scalar(r, w)?;
            g.add(primary, scaled)?
        }
        None => primary,
    };
    let names = model.params.trainable(&components);
    let wrt: Vec<&str> = names.iter().map(String::as_str).collect();
    let (eval, grads) = {
        let mut b = model.params.bindings();
        for (name, t) in &inputs {
            b.insert(name, t);
        }
        value_and_grad(&g, total, &wrt, &b, Mode::Train).map_err(|e| diverged(at.epoch, at.step)(e.into()))?
    };
    let losses = check_finite(
        StepLosses {
            total: scalar(&eval, total),
            primary: scalar(&eval, primary),
            regularizer: regularizer.map_or(0.0, |(r, _)| scalar(&eval, r)),
        },
        at.epoch,
        at.step,
    )?;
    model.params.update_running_stats(&eval.batch_stats);
    opt.step(&mut model.params, &grads, lr_schedule(at.fraction(cfg.epochs), cfg))?;
    Ok(losses)
}

/// Run a supervised objective starting from `model`.
pub fn train_supervised(mut model: Model, dataset: &Dataset, cfg: &TrainConfig, objective: Supervised, out_dir: Option<&Path>) -> Result<(Model, TrainReport)> {
    dataset.labels()?;
    let file = match objective {
        Supervised::Adversarial => "at.ckpt",
        Supervised::Trades { .. } => "trades.ckpt",
        Supervised::AdversarialSelfSupervised { .. } => "finetune.ckpt",
    };
    let report = run_epochs(&mut model, dataset, cfg, out_dir, file, |model, ids, at, opt| {
        supervised_step(model, dataset, ids, cfg, objective, at, opt)
    })?;
    Ok((model, report))
}

/// Supervised adversarial training from a fresh initialization.
pub fn train_at(dataset: &Dataset, model_config: &ModelConfig, cfg: &TrainConfig) -> Result<Model> {
    let model = Model::init(model_config.clone(), cfg.seed)?;
    Ok(train_supervised(model, dataset, cfg, Supervised::Adversarial, None)?.0)
}

pub fn train_trades(dataset: &Dataset, model_config: &ModelConfig, cfg: &TrainConfig, beta: f64) -> Result<Model> {
    if !(beta >= 0.0) {
        return Err(Error::Invalid(format!("TRADES beta {beta} must be non-negative")));
    }
    let model = Model::init(model_config.clone(), cfg.seed)?;
    Ok(train_supervised(model, dataset, cfg, Supervised::Trades { beta }, None)?.0)
}

/// Adversarial finetuning of every parameter from a pre-trained model, with an
/// optional contrastive term on clean views.
pub fn finetune_rocl_at_ss(pretrained: &Model, dataset: &Dataset, cfg: &TrainConfig, ss_weight: f64) -> Result<Model> {
    if !(ss_weight >= 0.0) {
        return Err(Error::Invalid(format!("self-supervised weight {ss_weight} must be non-negative")));
    }
    let objective = Supervised::AdversarialSelfSupervised { weight: ss_weight };
    Ok(train_supervised(pretrained.clone(), dataset, cfg, objective, None)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_toy_dataset, ToySpec};
    use crate::losses::{nt_xent, ContrastiveBatch};
    use crate::model::EncoderArch;

    fn small() -> ModelConfig {
        ModelConfig { encoder: EncoderArch::SmallCnn { channels: vec![4, 8] }, input_dims: (3, 8, 8), projection_dim: 6, num_classes: 2 }
    }

    fn cfg() -> TrainConfig {
        TrainConfig { epochs: 2, batch_size: 8, attack: AttackConfig::instance(8.0 / 255.0, 2.0 / 255.0, 2), parallel: false, ..TrainConfig::toy() }
    }

    #[test]
    fn schedule_endpoints() {
        let c = TrainConfig { epochs: 100, warmup_epochs: 10, base_lr: 1.0, ..TrainConfig::toy() };
        assert_eq!(lr_schedule(0.1, &c), 1.0);
        assert_eq!(lr_schedule(1.0, &c), 0.0);
        assert!((lr_schedule(0.55, &c) - 0.5).abs() < 1e-9);
        assert_eq!(lr_schedule(0.0, &c), 0.0);
        assert!((lr_schedule(0.05, &c) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn weight_decay_skips_batch_norm() {
        let model = Model::init(small(), 0).unwrap();
        let mut p = model.params.clone();
        let grads: GradientMap<Real> = p
            .trainable(&[Component::Theta])
            .into_iter()
            .map(|n| {
                let shape = p.get(&n).unwrap().shape().to_vec();
                (n, Tensor::zeros(&shape))
            })
            .collect();
        let mut opt = Sgd::new(0.9, 0.1);
        opt.step(&mut p, &grads, 1.0).unwrap();
        assert_eq!(p.get("enc.bn0.scale"), model.params.get("enc.bn0.scale"));
        assert_ne!(p.get("enc.conv0.weight"), model.params.get("enc.conv0.weight"));
    }

    #[test]
    fn zero_lambda_and_zero_steps_reduce_to_clean_loss() {
        let data = generate_toy_dataset(&ToySpec::new(2, 4, 8, 3)).unwrap();
        let c = TrainConfig { lambda: 0.0, ..cfg() }.standard_contrastive();
        let mut model = Model::init(small(), 1).unwrap();
        let ids: Vec<usize> = (0..8).collect();
        let images = data.images_at(&ids);
        let before = model.clone();
        let at = StepIndex { epoch: 0, step: 0, steps_per_epoch: 1 };
        let l = rocl_step(&mut model, &images, &ids, &c, at, &mut Sgd::new(0.9, 0.0)).unwrap();
        assert_eq!(l.total, l.primary);

        // Oracle: plain two-view SimCLR with the pre-step parameters.
        let (t, tp) = two_views(&c, &images, &ids, 0).unwrap();
        let all = concat_batches(&[&t, &tp]).unwrap();
        let z = before.project(&before.encode(&all, Mode::Train).unwrap()).unwrap();
        let row = |r: usize| z.data()[r * 6..(r + 1) * 6].iter().map(|&v| v as f64).collect::<Vec<f64>>();
        let mut total = 0.0;
        let mut count = 0;
        for i in 0..8 {
            for (anchor, pos) in [(i, [8 + i]), (8 + i, [i])] {
                let negatives = (0..8).filter(|&j| j != i).flat_map(|j| [j, 8 + j]).map(row).collect();
                total += nt_xent(&ContrastiveBatch { anchor: row(anchor), positives: pos.iter().map(|&p| row(p)).collect(), negatives, temperature: c.temperature }).unwrap();
                count += 1;
            }
        }
        assert!((l.primary - total / count as f64).abs() < 1e-4, "{} vs {}", l.primary, total / count as f64);
    }

    #[test]
    fn steps_are_reproducible_and_parallel_invariant() {
        let data = generate_toy_dataset(&ToySpec::new(2, 8, 8, 3)).unwrap();
        let run = |parallel: bool| {
            let c = TrainConfig { epochs: 1, parallel, ..cfg() };
            train_rocl(&data, &small(), &c, None).unwrap()
        };
        let (a, ra) = run(false);
        let (b, rb) = run(true);
        assert_eq!(a, b);
        assert_eq!(ra.to_csv(false), rb.to_csv(false));
        assert!(ra.records[0].total_loss.is_finite());
    }

    #[test]
    fn supervised_trainers_run() {
        let data = generate_toy_dataset(&ToySpec::new(2, 8, 8, 4)).unwrap();
        let c = TrainConfig { epochs: 1, ..cfg() };
        let at = train_at(&data, &small(), &c).unwrap();
        let trades0 = train_trades(&data, &small(), &c, 0.0).unwrap();
        let std = train_supervised(Model::init(small(), c.seed).unwrap(), &data, &TrainConfig { attack: AttackConfig { steps: 0, ..c.attack.clone() }, ..c.clone() }, Supervised::Adversarial, None).unwrap().0;
        assert_eq!(trades0, std);
        let ft0 = finetune_rocl_at_ss(&at, &data, &c, 0.0).unwrap();
        let at2 = train_supervised(at.clone(), &data, &c, Supervised::Adversarial, None).unwrap().0;
        assert_eq!(ft0, at2);
        let ft = finetune_rocl_at_ss(&at, &data, &c, 0.5).unwrap();
        assert_ne!(ft.params.digest(&[Component::Pi]), at.params.digest(&[Component::Pi]));
    }
}

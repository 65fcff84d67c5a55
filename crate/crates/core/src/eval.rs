//! Evaluation protocols: linear and robust-linear evaluation, white-box and
//! black-box robustness, transformation-smoothed inference and transfer.

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::attacks::{cw_attack, eot_attack, instance_wise_attack, pgd_supervised, AttackConfig, AttackLoss, InstanceTargets, Norm, StepRule};
use crate::augment::{augment_batch, AugmentPolicy};
use crate::autodiff::{value_and_grad, Mode};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::losses::{cross_entropy_node, DistanceKind, Reduction};
use crate::model::{argmax_rows, Component, Model, ModelConfig, ModelParams};
use crate::rng::{derive_seed, rng_from, stream};
use crate::tensor::Tensor;
use crate::train::Sgd;

/// Samples per forward pass during evaluation.
pub const EVAL_CHUNK: usize = 100;

/// Percentage with two decimals.
pub fn percent(correct: usize, total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    (10000.0 * correct as f64 / total as f64).round() / 100.0
}

fn count_correct(pred: &[usize], labels: &[usize]) -> usize {
    pred.iter().zip(labels).filter(|(p, y)| p == y).count()
}

fn chunks(n: usize) -> Vec<(usize, usize)> {
    (0..n).step_by(EVAL_CHUNK).map(|s| (s, (s + EVAL_CHUNK).min(n))).collect()
}

/// Map `f` over fixed chunks of the dataset and concatenate, in index order.
fn map_chunks<R: Send>(n: usize, parallel: bool, f: impl Fn(usize, usize, usize) -> Result<Vec<R>> + Sync) -> Result<Vec<R>> {
    let cs = chunks(n);
    let parts: Vec<Result<Vec<R>>> = if parallel {
        cs.par_iter().enumerate().map(|(k, &(s, e))| f(k, s, e)).collect()
    } else {
        cs.iter().enumerate().map(|(k, &(s, e))| f(k, s, e)).collect()
    };
    let mut out = Vec::with_capacity(n);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

fn range(s: usize, e: usize) -> Vec<usize> {
    (s..e).collect()
}

/// Eval-mode predictions for the whole dataset (or a replacement image tensor).
pub fn predict_all(model: &Model, images: &Tensor, parallel: bool) -> Result<Vec<usize>> {
    map_chunks(images.shape()[0], parallel, |_, s, e| model.predict(&images.select_first(&range(s, e))))
}

pub fn accuracy(model: &Model, dataset: &Dataset, parallel: bool) -> Result<f64> {
    let labels = dataset.labels()?;
    Ok(percent(count_correct(&predict_all(model, &dataset.images, parallel)?, labels), labels.len()))
}

/// Linear classifier training on frozen features.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearEvalConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Fractions of training after which the learning rate drops tenfold.
    pub milestones: Vec<f64>,
    /// Adversarial examples replace each batch when set (robust linear evaluation).
    pub attack: Option<AttackConfig>,
    pub seed: u64,
    pub parallel: bool,
}

impl LinearEvalConfig {
    /// 150 epochs, lr 0.1, drops at epochs 30, 50 and 100.
    pub fn linear() -> Self {
        LinearEvalConfig {
            epochs: 150,
            batch_size: 256,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            milestones: vec![30.0 / 150.0, 50.0 / 150.0, 100.0 / 150.0],
            attack: None,
            seed: 0,
            parallel: true,
        }
    }

    /// Linear evaluation on 10-step PGD examples with lr 0.02.
    pub fn robust() -> Self {
        LinearEvalConfig {
            lr: 0.02,
            attack: Some(AttackConfig { step_size: 0.007, ..AttackConfig::pgd(Norm::Linf, 0.0314, 10) }),
            ..Self::linear()
        }
    }

    /// 100 epochs at lr 0.2.
    pub fn transfer() -> Self {
        LinearEvalConfig { epochs: 100, lr: 0.2, ..Self::linear() }
    }

    /// Shorten a preset to `epochs` keeping the milestone fractions.
    pub fn scaled(self, epochs: usize, batch_size: usize) -> Self {
        LinearEvalConfig { epochs, batch_size, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Invalid("linear evaluation needs positive epochs and batch size".into()));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::Invalid("linear evaluation lr, momentum or weight decay out of range".into()));
        }
        if self.milestones.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(Error::Invalid(format!("milestones {:?} must lie in [0, 1]", self.milestones)));
        }
        match &self.attack {
            Some(a) if !matches!(a.loss, AttackLoss::CrossEntropy | AttackLoss::CwMargin { .. }) => {
                Err(Error::Invalid("robust linear evaluation needs a supervised attack loss".into()))
            }
            Some(a) => a.validate(),
            None => Ok(()),
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let f = epoch as f64 / self.epochs as f64;
        let drops = self.milestones.iter().filter(|&&m| f >= m).count();
        self.lr * 0.1f64.powi(drops as i32)
    }
}

/// Copy of `model` with a freshly initialized linear head for `num_classes`.
pub fn with_new_head(model: &Model, num_classes: usize, seed: u64) -> Result<Model> {
    let config = ModelConfig { num_classes, ..model.config.clone() };
    config.validate()?;
    let mut params = ModelParams::init(&config, seed)?;
    params.copy_component(&model.params, Component::Theta);
    params.copy_component(&model.params, Component::Pi);
    Ok(Model { config, params })
}

fn frozen_digest(model: &Model) -> [u8; 32] {
    model.params.digest(&[Component::Theta, Component::Pi])
}

fn check_frozen(before: [u8; 32], model: &Model, what: &str) -> Result<()> {
    if frozen_digest(model) != before {
        return Err(Error::FrozenMutated(what.to_string()));
    }
    Ok(())
}

/// Train only the linear head on top of the frozen encoder.
///
/// Returns the model with the new head and its clean accuracy on `dataset`.
/// Features are computed with batch norm in eval mode.
pub fn linear_eval(frozen: &Model, dataset: &Dataset, cfg: &LinearEvalConfig) -> Result<(Model, f64)> {
    cfg.validate()?;
    let labels = dataset.labels()?;
    let before = frozen_digest(frozen);
    let mut model = with_new_head(frozen, dataset.num_classes, derive_seed(&[stream::INIT, cfg.seed, 0x11EA]))?;
    let n = dataset.len();
    let clean_features = match cfg.attack {
        None => Some(Tensor::stack(&map_chunks(n, cfg.parallel, |_, s, e| {
            let h = frozen.encode(&dataset.images.select_first(&range(s, e)), Mode::Eval)?;
            Ok((0..e - s).map(|i| h.index_first(i)).collect())
        })?)?),
        Some(_) => None,
    };
    let feature_dim = model.config.feature_dim();
    let net_cfg = model.config.clone();
    let net = crate::model::Net::new(&net_cfg);
    let head_names = model.params.trainable(&[Component::Psi]);
    let wrt: Vec<&str> = head_names.iter().map(String::as_str).collect();
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let m = cfg.batch_size.min(n);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng_from(&[stream::SHUFFLE, cfg.seed, 0x11EA, epoch as u64]));
        let lr = cfg.lr_at(epoch);
        for (step, ids) in order.chunks(m).enumerate() {
            let y: Vec<usize> = ids.iter().map(|&i| labels[i]).collect();
            let h = match (&clean_features, &cfg.attack) {
                (Some(f), _) => f.select_first(ids),
                (None, Some(attack)) => {
                    let x = dataset.images_at(ids);
                    let seed = derive_seed(&[stream::ATTACK_START, cfg.seed, epoch as u64, step as u64]);
                    let adv = pgd_supervised(&model, &x, &y, attack, seed, Mode::Eval)?;
                    model.encode(&adv, Mode::Eval)?
                }
                (None, None) => unreachable!("features are precomputed without an attack"),
            };
            let mut g = Graph::new();
            let hl = g.leaf("features", &[ids.len(), feature_dim])?;
            let logits = net.head(&mut g, hl)?;
            let loss = cross_entropy_node(&mut g, logits, &y, Reduction::Mean)?;
            let grads = {
                let mut b = model.params.bindings();
                b.insert("features", &h);
                value_and_grad(&g, loss, &wrt, &b, Mode::Eval)?.1
            };
            opt.step(&mut model.params, &grads, lr)?;
        }
    }
    check_frozen(before, frozen, "linear evaluation touched the input model")?;
    check_frozen(before, &model, "linear evaluation changed encoder or projector weights")?;
    let acc = match &clean_features {
        Some(f) => {
            let pred = map_chunks(n, cfg.parallel, |_, s, e| Ok(argmax_rows(&model.classify(&f.select_first(&range(s, e)))?)))?;
            percent(count_correct(&pred, labels), n)
        }
        None => accuracy(&model, dataset, cfg.parallel)?,
    };
    Ok((model, acc))
}

/// Linear evaluation where each batch is replaced by supervised PGD examples
/// against the frozen encoder and the current head.
pub fn robust_linear_eval(frozen: &Model, dataset: &Dataset, cfg: &LinearEvalConfig) -> Result<(Model, f64)> {
    let cfg = match (&cfg.attack, cfg.attack.as_ref().map(|a| a.steps == 0 || a.epsilon == 0.0)) {
        (None, _) => LinearEvalConfig { attack: LinearEvalConfig::robust().attack, ..cfg.clone() },
        (Some(_), Some(true)) => LinearEvalConfig { attack: None, ..cfg.clone() },
        _ => cfg.clone(),
    };
    linear_eval(frozen, dataset, &cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackKind {
    Pgd,
    Cw,
}

/// One white-box attack of a robustness suite.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteAttack {
    pub kind: AttackKind,
    pub config: AttackConfig,
}

impl SuiteAttack {
    /// PGD with sign steps for linf and steepest-ascent steps for l2 and l1.
    pub fn pgd(norm: Norm, epsilon: f64, steps: usize) -> Self {
        let step_rule = if norm == Norm::Linf { StepRule::Sign } else { StepRule::Steepest };
        SuiteAttack { kind: AttackKind::Pgd, config: AttackConfig { step_rule, ..AttackConfig::pgd(norm, epsilon, steps) } }
    }

    pub fn cw(epsilon: f64, steps: usize) -> Self {
        SuiteAttack { kind: AttackKind::Cw, config: AttackConfig { loss: AttackLoss::CwMargin { kappa: 0.0 }, ..AttackConfig::pgd(Norm::Linf, epsilon, steps) } }
    }

    /// Label written in the `attack_norm` report column.
    pub fn label(&self) -> String {
        match self.kind {
            AttackKind::Pgd => self.config.norm.name().to_string(),
            AttackKind::Cw => format!("cw-{}", self.config.norm.name()),
        }
    }

    pub fn run(&self, model: &Model, x: &Tensor, y: &[usize], seed: u64) -> Result<Tensor> {
        match self.kind {
            AttackKind::Pgd => pgd_supervised(model, x, y, &self.config, seed, Mode::Eval),
            AttackKind::Cw => cw_attack(model, x, y, &self.config, seed, Mode::Eval),
        }
    }
}

/// The seen linf attack and the unseen l2, l1 and CW attacks, all with `steps` iterations.
pub fn default_suite(steps: usize) -> Vec<SuiteAttack> {
    vec![
        SuiteAttack::pgd(Norm::Linf, 8.0 / 255.0, steps),
        SuiteAttack::pgd(Norm::Linf, 16.0 / 255.0, steps),
        SuiteAttack::pgd(Norm::L2, 0.25, steps),
        SuiteAttack::pgd(Norm::L2, 0.5, steps),
        SuiteAttack::pgd(Norm::L1, 7.84, steps),
        SuiteAttack::pgd(Norm::L1, 12.0, steps),
        SuiteAttack::cw(8.0 / 255.0, steps),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackRow {
    pub attack_norm: String,
    pub epsilon: f64,
    pub steps: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobustnessReport {
    pub model: String,
    pub seed: u64,
    pub dataset: String,
    pub clean_accuracy: f64,
    pub rows: Vec<AttackRow>,
}

/// Accuracy on adversarial examples generated chunk by chunk on `source`
/// (a supervised attack) and classified by `target`.
fn adversarial_accuracy(
    source: &Model,
    target: &Model,
    dataset: &Dataset,
    seed: u64,
    parallel: bool,
    attack: impl Fn(&Model, &Tensor, &[usize], u64) -> Result<Tensor> + Sync,
) -> Result<f64> {
    let labels = dataset.labels()?;
    let pred = map_chunks(dataset.len(), parallel, |k, s, e| {
        let ids = range(s, e);
        let x = dataset.images_at(&ids);
        let adv = attack(source, &x, &labels[s..e], derive_seed(&[stream::ATTACK_START, seed, k as u64]))?;
        target.predict(&adv)
    })?;
    Ok(percent(count_correct(&pred, labels), labels.len()))
}

/// Clean accuracy plus one row per suite attack, in eval mode.
pub fn evaluate_robustness(model: &Model, test: &Dataset, suite: &[SuiteAttack], model_id: &str, seed: u64, parallel: bool) -> Result<RobustnessReport> {
    let before = frozen_digest(model);
    let clean_accuracy = accuracy(model, test, parallel)?;
    let mut rows = Vec::with_capacity(suite.len());
    for (r, attack) in suite.iter().enumerate() {
        attack.config.validate()?;
        let accuracy = adversarial_accuracy(model, model, test, derive_seed(&[seed, r as u64]), parallel, |m, x, y, s| attack.run(m, x, y, s))?;
        rows.push(AttackRow { attack_norm: attack.label(), epsilon: attack.config.epsilon, steps: attack.config.steps, accuracy });
    }
    check_frozen(before, model, "robustness evaluation mutated the model")?;
    Ok(RobustnessReport { model: model_id.to_string(), seed, dataset: test.name.clone(), clean_accuracy, rows })
}

/// How a black-box source crafts its examples.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceKind {
    /// Supervised PGD through the source's linear head.
    Supervised,
    /// Label-free instance-wise attack through the source's projector.
    Instance,
}

/// Instance-wise targets where each clean image is its own positive and the
/// rest of the chunk are negatives.
pub fn self_targets(model: &Model, x: &Tensor) -> Result<InstanceTargets> {
    let m = x.shape()[0];
    if m < 2 {
        return Err(Error::Invalid("instance-wise attacks need at least two samples per chunk".into()));
    }
    let bank = model.project(&model.encode(x, Mode::Eval)?)?;
    Ok(InstanceTargets {
        bank,
        positives: (0..m).map(|i| vec![i]).collect(),
        negatives: (0..m).map(|i| (0..m).filter(|&j| j != i).collect()).collect(),
    })
}

/// Accuracy of `target` on examples crafted on `source`.
pub fn blackbox_eval(source: &Model, target: &Model, test: &Dataset, attack: &AttackConfig, kind: SourceKind, seed: u64, parallel: bool) -> Result<f64> {
    attack.validate()?;
    match kind {
        SourceKind::Supervised => adversarial_accuracy(source, target, test, seed, parallel, |m, x, y, s| pgd_supervised(m, x, y, attack, s, Mode::Eval)),
        SourceKind::Instance => {
            let cfg = AttackConfig { loss: AttackLoss::Distance(DistanceKind::Contrastive), ..attack.clone() };
            adversarial_accuracy(source, target, test, seed, parallel, |m, x, _, s| instance_wise_attack(m, x, &self_targets(m, x)?, &cfg, s, Mode::Eval))
        }
    }
}

/// Supervised PGD examples for a whole dataset, crafted on `source`.
pub fn craft_adversarial(source: &Model, test: &Dataset, attack: &AttackConfig, seed: u64, parallel: bool) -> Result<Tensor> {
    let labels = test.labels()?;
    let parts = map_chunks(test.len(), parallel, |k, s, e| {
        let adv = pgd_supervised(source, &test.images_at(&range(s, e)), &labels[s..e], attack, derive_seed(&[stream::ATTACK_START, seed, k as u64]), Mode::Eval)?;
        Ok((0..e - s).map(|i| adv.index_first(i)).collect())
    })?;
    Ok(Tensor::stack(&parts)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregation {
    /// Average penultimate features over transforms, classify once.
    FeatureMean,
    /// Majority vote of per-transform predictions.
    LogitVote,
}

impl Aggregation {
    pub fn name(self) -> &'static str {
        match self {
            Aggregation::FeatureMean => "feature_mean",
            Aggregation::LogitVote => "logit_vote",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "feature_mean" => Some(Aggregation::FeatureMean),
            "logit_vote" => Some(Aggregation::LogitVote),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothingConfig {
    pub n_samples: usize,
    pub policy: AugmentPolicy,
    pub aggregation: Aggregation,
}

impl Default for SmoothingConfig {
    fn default() -> Self {
        SmoothingConfig { n_samples: 30, policy: AugmentPolicy::smoothing(), aggregation: Aggregation::FeatureMean }
    }
}

impl SmoothingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::Invalid("smoothing needs at least one sample".into()));
        }
        self.policy.validate()
    }
}

/// Smoothed predictions for a batch whose first image has dataset index `first`.
///
/// Transform `j` of sample `i` is seeded from `(seed, first + i, j)`, so
/// results do not depend on how a dataset is chunked.
pub fn smoothed_predict_batch(model: &Model, x: &Tensor, cfg: &SmoothingConfig, seed: u64, first: usize) -> Result<Vec<usize>> {
    cfg.validate()?;
    let m = x.shape()[0];
    let classes = model.config.num_classes;
    let mut feature_sum = vec![0.0f64; m * model.config.feature_dim()];
    let mut votes = vec![0usize; m * classes];
    for j in 0..cfg.n_samples {
        let seeds: Vec<u64> = (0..m).map(|i| derive_seed(&[stream::SMOOTHING, seed, (first + i) as u64, j as u64])).collect();
        let (t, _) = augment_batch(&cfg.policy, x, &seeds, false)?;
        let h = model.encode(&t, Mode::Eval)?;
        match cfg.aggregation {
            Aggregation::FeatureMean => feature_sum.iter_mut().zip(h.data()).for_each(|(a, &v)| *a += v as f64),
            Aggregation::LogitVote => {
                for (i, c) in argmax_rows(&model.classify(&h)?).into_iter().enumerate() {
                    votes[i * classes + c] += 1;
                }
            }
        }
    }
    match cfg.aggregation {
        Aggregation::FeatureMean => {
            let n = cfg.n_samples as f64;
            let mean = Tensor::from_f64(&[m, model.config.feature_dim()], &feature_sum.iter().map(|v| v / n).collect::<Vec<_>>())?;
            Ok(argmax_rows(&model.classify(&mean)?))
        }
        Aggregation::LogitVote => Ok(votes
            .chunks(classes)
            .map(|row| row.iter().enumerate().fold(0, |best, (c, &v)| if v > row[best] { c } else { best }))
            .collect()),
    }
}

/// Smoothed prediction for one `[C, H, W]` image.
pub fn smoothed_predict(model: &Model, image: &Tensor, cfg: &SmoothingConfig, seed: u64) -> Result<usize> {
    let x = Tensor::stack(std::slice::from_ref(image))?;
    Ok(smoothed_predict_batch(model, &x, cfg, seed, 0)?[0])
}

/// Smoothed accuracy on `images` (defaulting to the dataset's own images).
pub fn smoothed_accuracy(model: &Model, test: &Dataset, images: Option<&Tensor>, cfg: &SmoothingConfig, seed: u64, parallel: bool) -> Result<f64> {
    let labels = test.labels()?;
    let images = images.unwrap_or(&test.images);
    let pred = map_chunks(test.len(), parallel, |_, s, e| smoothed_predict_batch(model, &images.select_first(&range(s, e)), cfg, seed, s))?;
    Ok(percent(count_correct(&pred, labels), labels.len()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothingRow {
    pub n_samples: usize,
    pub clean_accuracy: f64,
    /// Accuracy on the black-box examples, if a source was given.
    pub robust_accuracy: Option<f64>,
}

/// Clean and black-box accuracy of the smoothed classifier for each `n`.
pub fn smoothing_curve(
    model: &Model,
    test: &Dataset,
    n_values: &[usize],
    attack_source: Option<(&Model, &AttackConfig)>,
    cfg: &SmoothingConfig,
    seed: u64,
    parallel: bool,
) -> Result<Vec<SmoothingRow>> {
    let adv = match attack_source {
        Some((source, attack)) => Some(craft_adversarial(source, test, attack, seed, parallel)?),
        None => None,
    };
    n_values
        .iter()
        .map(|&n| {
            let c = SmoothingConfig { n_samples: n, ..*cfg };
            Ok(SmoothingRow {
                n_samples: n,
                clean_accuracy: smoothed_accuracy(model, test, None, &c, seed, parallel)?,
                robust_accuracy: adv.as_ref().map(|a| smoothed_accuracy(model, test, Some(a), &c, seed, parallel)).transpose()?,
            })
        })
        .collect()
}

/// Linf PGD with 20 steps of 0.00314 for attacking smoothed classifiers.
pub fn eot_preset(epsilon: f64) -> AttackConfig {
    AttackConfig { step_size: 0.00314, ..AttackConfig::pgd(Norm::Linf, epsilon, 20) }
}

/// Smoothed accuracy under an EoT attack that averages gradients over
/// `n_transforms` draws of the smoothing policy per step.
pub fn eot_smoothed_accuracy(model: &Model, test: &Dataset, attack: &AttackConfig, smoothing: &SmoothingConfig, n_transforms: usize, seed: u64, parallel: bool) -> Result<f64> {
    let labels = test.labels()?;
    let pred = map_chunks(test.len(), parallel, |k, s, e| {
        let x = test.images_at(&range(s, e));
        let adv = eot_attack(model, &x, &labels[s..e], attack, n_transforms, &smoothing.policy, derive_seed(&[stream::EOT, seed, k as u64]), Mode::Eval)?;
        smoothed_predict_batch(model, &adv, smoothing, seed, s)
    })?;
    Ok(percent(count_correct(&pred, labels), labels.len()))
}

/// Linear evaluation on a second dataset over a frozen encoder, followed by a robustness report.
pub fn transfer_eval(frozen: &Model, train_b: &Dataset, test_b: &Dataset, cfg: &LinearEvalConfig, suite: &[SuiteAttack], model_id: &str) -> Result<(Model, RobustnessReport)> {
    if train_b.image_dims() != frozen.config.input_dims {
        return Err(Error::Invalid(format!("dataset dims {:?} do not match the encoder input {:?}", train_b.image_dims(), frozen.config.input_dims)));
    }
    let (model, _) = linear_eval(frozen, train_b, cfg)?;
    let report = evaluate_robustness(&model, test_b, suite, model_id, cfg.seed, cfg.parallel)?;
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_toy_dataset, ToySpec};
    use crate::model::EncoderArch;

    fn small() -> ModelConfig {
        ModelConfig { encoder: EncoderArch::SmallCnn { channels: vec![4, 8] }, input_dims: (3, 8, 8), projection_dim: 6, num_classes: 2 }
    }

    fn quick() -> LinearEvalConfig {
        LinearEvalConfig::linear().scaled(3, 16)
    }

    #[test]
    fn milestones_drop_tenfold() {
        let c = LinearEvalConfig::linear();
        assert_eq!(c.lr_at(0), 0.1);
        assert!((c.lr_at(30) - 0.01).abs() < 1e-15);
        assert!((c.lr_at(149) - 1e-4).abs() < 1e-15);
        assert_eq!(LinearEvalConfig::robust().lr_at(0), 0.02);
    }

    #[test]
    fn linear_eval_freezes_encoder_and_zero_step_attack_matches() {
        let data = generate_toy_dataset(&ToySpec::new(2, 10, 8, 1)).unwrap();
        let model = Model::init(small(), 3).unwrap();
        let (a, _) = linear_eval(&model, &data, &quick()).unwrap();
        assert_eq!(a.params.digest(&[Component::Theta, Component::Pi]), model.params.digest(&[Component::Theta, Component::Pi]));
        assert_ne!(a.params.digest(&[Component::Psi]), model.params.digest(&[Component::Psi]));
        let zero = LinearEvalConfig { attack: Some(AttackConfig::pgd(Norm::Linf, 0.03, 0)), ..quick() };
        let (b, _) = robust_linear_eval(&model, &data, &zero).unwrap();
        assert_eq!(a, b);
        let (r, _) = robust_linear_eval(&model, &data, &LinearEvalConfig { attack: Some(AttackConfig::pgd(Norm::Linf, 0.03, 2)), ..quick() }).unwrap();
        assert_eq!(r.params.digest(&[Component::Theta, Component::Pi]), model.params.digest(&[Component::Theta, Component::Pi]));
    }

    #[test]
    fn zero_epsilon_row_equals_clean_and_reports_are_reproducible() {
        let data = generate_toy_dataset(&ToySpec::new(2, 10, 8, 1)).unwrap();
        let model = Model::init(small(), 3).unwrap();
        let suite = vec![SuiteAttack::pgd(Norm::Linf, 0.0, 5), SuiteAttack::pgd(Norm::L2, 0.25, 3), SuiteAttack::cw(0.03, 3)];
        let r = evaluate_robustness(&model, &data, &suite, "m", 9, false).unwrap();
        assert_eq!(r.rows.len(), 3);
        assert_eq!(r.rows[0].accuracy, r.clean_accuracy);
        assert_eq!(r, evaluate_robustness(&model, &data, &suite, "m", 9, true).unwrap());
    }

    #[test]
    fn self_blackbox_equals_whitebox() {
        let data = generate_toy_dataset(&ToySpec::new(2, 10, 8, 1)).unwrap();
        let model = Model::init(small(), 3).unwrap();
        let attack = AttackConfig::pgd(Norm::Linf, 0.05, 3);
        let bb = blackbox_eval(&model, &model, &data, &attack, SourceKind::Supervised, 4, false).unwrap();
        let wb = evaluate_robustness(&model, &data, &[SuiteAttack { kind: AttackKind::Pgd, config: attack.clone() }], "m", 4, false).unwrap();
        assert_eq!(bb, wb.rows[0].accuracy);
        let inst = blackbox_eval(&model, &model, &data, &attack, SourceKind::Instance, 4, false).unwrap();
        assert!((0.0..=100.0).contains(&inst));
    }

    #[test]
    fn identity_smoothing_is_plain_prediction() {
        let data = generate_toy_dataset(&ToySpec::new(2, 10, 8, 1)).unwrap();
        let model = Model::init(small(), 3).unwrap();
        let plain = predict_all(&model, &data.images, false).unwrap();
        for aggregation in [Aggregation::FeatureMean, Aggregation::LogitVote] {
            for n in [1, 4] {
                let cfg = SmoothingConfig { n_samples: n, policy: AugmentPolicy::identity(), aggregation };
                assert_eq!(smoothed_predict_batch(&model, &data.images, &cfg, 0, 0).unwrap(), plain);
            }
        }
        assert_eq!(smoothed_predict(&model, &data.images.index_first(3), &SmoothingConfig { n_samples: 1, policy: AugmentPolicy::identity(), aggregation: Aggregation::FeatureMean }, 0).unwrap(), plain[3]);
        let rows = smoothing_curve(&model, &data, &[1], None, &SmoothingConfig::default(), 0, false).unwrap();
        assert_eq!(rows.len(), 1);
    }
}

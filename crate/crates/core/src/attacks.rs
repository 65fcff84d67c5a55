//! Norm-ball projections and projected-gradient attacks.

use rand::Rng as _;
use rand_distr::{Distribution, Exp1, StandardNormal};

use crate::augment::{apply_transform, sample_transform, transform_vjp, AugmentPolicy, TransformSpec};
use crate::autodiff::{grad, Bindings, Mode};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::losses::{contrastive_node, cross_entropy_node, cw_margin_node, pair_distance_node, AnchorTerm, ContrastiveLayout, DistanceKind, Reduction};
use crate::model::Model;
use crate::rng::{derive_seed, rng_from, stream};
use crate::tensor::Tensor;
use crate::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Norm {
    Linf,
    L2,
    L1,
}

impl Norm {
    pub fn name(self) -> &'static str {
        match self {
            Norm::Linf => "linf",
            Norm::L2 => "l2",
            Norm::L1 => "l1",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "linf" => Some(Norm::Linf),
            "l2" => Some(Norm::L2),
            "l1" => Some(Norm::L1),
            _ => None,
        }
    }

    pub fn of(self, v: &[f64]) -> f64 {
        match self {
            Norm::Linf => v.iter().fold(0.0, |m, x| m.max(x.abs())),
            Norm::L2 => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
            Norm::L1 => v.iter().map(|x| x.abs()).sum(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AttackLoss {
    CrossEntropy,
    /// The attacker drives the floored margin down.
    CwMargin { kappa: f64 },
    Distance(DistanceKind),
}

impl AttackLoss {
    pub fn name(self) -> &'static str {
        match self {
            AttackLoss::CrossEntropy => "cross_entropy",
            AttackLoss::CwMargin { .. } => "cw_margin",
            AttackLoss::Distance(k) => k.name(),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "cross_entropy" => Some(AttackLoss::CrossEntropy),
            "cw_margin" => Some(AttackLoss::CwMargin { kappa: 0.0 }),
            other => DistanceKind::parse(other).map(AttackLoss::Distance),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepRule {
    /// `alpha * sign(grad)` for every norm.
    Sign,
    /// Steepest ascent for the norm: sign for linf, normalized gradient for l2,
    /// largest coordinate for l1.
    Steepest,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    pub norm: Norm,
    pub epsilon: f64,
    pub step_size: f64,
    pub steps: usize,
    pub random_start: bool,
    pub loss: AttackLoss,
    pub step_rule: StepRule,
    pub clamp: (f64, f64),
    /// Temperature of the contrastive attack loss.
    pub temperature: f64,
}

impl AttackConfig {
    /// Supervised PGD with random start and the default step `2.5 * eps / steps`.
    pub fn pgd(norm: Norm, epsilon: f64, steps: usize) -> Self {
        AttackConfig {
            norm,
            epsilon,
            step_size: default_step(epsilon, steps),
            steps,
            random_start: true,
            loss: AttackLoss::CrossEntropy,
            step_rule: StepRule::Sign,
            clamp: (0.0, 1.0),
            temperature: 0.5,
        }
    }

    /// Instance-wise contrastive attack used during training.
    pub fn instance(epsilon: f64, step_size: f64, steps: usize) -> Self {
        AttackConfig {
            step_size,
            random_start: false,
            loss: AttackLoss::Distance(DistanceKind::Contrastive),
            ..Self::pgd(Norm::Linf, epsilon, steps)
        }
    }

    /// Epsilon zero is accepted and means "no perturbation".
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return bad(format!("attack epsilon {} must be non-negative", self.epsilon));
        }
        if !(self.step_size > 0.0) || !self.step_size.is_finite() {
            return bad(format!("attack step size {} must be positive", self.step_size));
        }
        if !(self.temperature > 0.0) {
            return bad(format!("attack temperature {} must be positive", self.temperature));
        }
        if !(self.clamp.0 < self.clamp.1) {
            return bad(format!("clamp range {:?} is empty", self.clamp));
        }
        Ok(())
    }

    fn is_noop(&self) -> bool {
        self.steps == 0 || self.epsilon == 0.0
    }
}

pub fn default_step(epsilon: f64, steps: usize) -> f64 {
    if steps == 0 || epsilon == 0.0 {
        // Unused, but keeps the config valid.
        return 1e-3;
    }
    2.5 * epsilon / steps as f64
}

/// Euclidean projection of `delta` onto the l1 ball of radius `eps`.
fn project_l1(delta: &mut [f64], eps: f64) {
    let total: f64 = delta.iter().map(|v| v.abs()).sum();
    if total <= eps {
        return;
    }
    let mut u: Vec<f64> = delta.iter().map(|v| v.abs()).collect();
    u.sort_by(|a, b| b.partial_cmp(a).expect("finite"));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (j, &uj) in u.iter().enumerate() {
        cum += uj;
        let t = (cum - eps) / (j + 1) as f64;
        if uj - t > 0.0 {
            theta = t;
        } else {
            break;
        }
    }
    for v in delta.iter_mut() {
        *v = v.signum() * (v.abs() - theta).max(0.0);
    }
}

/// Nearest point to `delta` inside the `norm` ball of radius `eps` (no clamping).
pub fn project_delta(delta: &mut [f64], eps: f64, norm: Norm) {
    match norm {
        Norm::Linf => delta.iter_mut().for_each(|v| *v = v.clamp(-eps, eps)),
        Norm::L2 => {
            let n = Norm::L2.of(delta);
            if n > eps {
                let s = eps / n;
                delta.iter_mut().for_each(|v| *v *= s);
            }
        }
        Norm::L1 => project_l1(delta, eps),
    }
}

/// Project one flattened sample and clamp; repeats with a tighter radius if
/// rounding to the element type pushes the result outside the ball.
fn project_sample(x: &mut [Real], x0: &[Real], eps: f64, norm: Norm, clamp: (f64, f64)) {
    let mut radius = eps;
    for _ in 0..4 {
        let mut delta: Vec<f64> = x.iter().zip(x0).map(|(&a, &b)| a as f64 - b as f64).collect();
        project_delta(&mut delta, radius, norm);
        for ((xi, &x0i), d) in x.iter_mut().zip(x0).zip(&delta) {
            *xi = ((x0i as f64 + d).clamp(clamp.0, clamp.1)) as Real;
        }
        let actual: Vec<f64> = x.iter().zip(x0).map(|(&a, &b)| a as f64 - b as f64).collect();
        let n = norm.of(&actual);
        if n <= eps {
            return;
        }
        radius -= 2.0 * (n - eps) + f64::EPSILON * eps;
    }
}

/// Project `x` into the ball around `x0` (whole tensor as one vector), then clamp to [0, 1].
pub fn project_ball(x: &Tensor, x0: &Tensor, eps: f64, norm: Norm) -> Result<Tensor> {
    if x.shape() != x0.shape() {
        return Err(Error::Invalid(format!("shapes {:?} and {:?} differ", x.shape(), x0.shape())));
    }
    let mut out = x.data().to_vec();
    project_sample(&mut out, x0.data(), eps, norm, (0.0, 1.0));
    Ok(Tensor::new(x.shape().to_vec(), out)?)
}

/// Per-sample projection of a batch whose leading axis indexes samples.
pub fn project_batch(x: &Tensor, x0: &Tensor, eps: f64, norm: Norm, clamp: (f64, f64)) -> Result<Tensor> {
    if x.shape() != x0.shape() || x.rank() == 0 {
        return Err(Error::Invalid(format!("shapes {:?} and {:?} differ", x.shape(), x0.shape())));
    }
    let per = x.len() / x.shape()[0];
    let mut out = x.data().to_vec();
    for (row, row0) in out.chunks_mut(per).zip(x0.data().chunks(per)) {
        project_sample(row, row0, eps, norm, clamp);
    }
    Ok(Tensor::new(x.shape().to_vec(), out)?)
}

/// Largest per-sample distance between two batches.
pub fn max_perturbation(x: &Tensor, x0: &Tensor, norm: Norm) -> f64 {
    let per = x.len() / x.shape()[0];
    x.data()
        .chunks(per)
        .zip(x0.data().chunks(per))
        .map(|(a, b)| norm.of(&a.iter().zip(b).map(|(&p, &q)| p as f64 - q as f64).collect::<Vec<_>>()))
        .fold(0.0, f64::max)
}

fn random_delta(norm: Norm, eps: f64, d: usize, rng: &mut crate::rng::Rng) -> Vec<f64> {
    match norm {
        Norm::Linf => (0..d).map(|_| rng.gen_range(-eps..=eps)).collect(),
        Norm::L2 => {
            let g: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
            let n = Norm::L2.of(&g).max(1e-12);
            let r = eps * rng.gen::<f64>().powf(1.0 / d as f64);
            g.iter().map(|v| v * r / n).collect()
        }
        Norm::L1 => {
            let e: Vec<f64> = (0..=d).map(|_| Exp1.sample(rng)).collect();
            let total: f64 = e.iter().sum();
            e[..d].iter().map(|v| v / total * eps * if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect()
        }
    }
}

fn step_direction(g: &[Real], rule: StepRule, norm: Norm) -> Vec<f64> {
    let sign = |v: Real| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 };
    match (rule, norm) {
        (StepRule::Sign, _) | (StepRule::Steepest, Norm::Linf) => g.iter().map(|&v| sign(v)).collect(),
        (StepRule::Steepest, Norm::L2) => {
            let n = g.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            if n == 0.0 {
                return vec![0.0; g.len()];
            }
            g.iter().map(|&v| v as f64 / n).collect()
        }
        (StepRule::Steepest, Norm::L1) => {
            let mut out = vec![0.0; g.len()];
            if let Some((i, _)) = g.iter().enumerate().max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).expect("finite")) {
                out[i] = sign(g[i]);
            }
            out
        }
    }
}

/// Random start (if enabled) followed by `steps` ascent steps on `grad_fn(x, step)`.
/// Each step is `x + alpha * direction(grad)`, projected per sample.
pub fn pgd_custom(x0: &Tensor, cfg: &AttackConfig, seed: u64, mut grad_fn: impl FnMut(&Tensor, usize) -> Result<Tensor>) -> Result<Tensor> {
    cfg.validate()?;
    if cfg.is_noop() {
        return Ok(x0.clone());
    }
    let n = x0.shape()[0];
    let per = x0.len() / n;
    let mut x = x0.clone();
    if cfg.random_start {
        let data = x.data_mut();
        for i in 0..n {
            let mut rng = rng_from(&[stream::ATTACK_START, seed, i as u64]);
            let delta = random_delta(cfg.norm, cfg.epsilon, per, &mut rng);
            for (v, d) in data[i * per..(i + 1) * per].iter_mut().zip(delta) {
                *v = (*v as f64 + d) as Real;
            }
        }
        x = project_batch(&x, x0, cfg.epsilon, cfg.norm, cfg.clamp)?;
    }
    for step in 0..cfg.steps {
        let g = grad_fn(&x, step)?;
        if !g.is_finite() {
            return Err(Error::Invalid(format!("non-finite attack gradient at step {step}")));
        }
        let data = x.data_mut();
        for (row, grow) in data.chunks_mut(per).zip(g.data().chunks(per)) {
            let dir = step_direction(grow, cfg.step_rule, cfg.norm);
            for (v, d) in row.iter_mut().zip(dir) {
                *v = (*v as f64 + cfg.step_size * d) as Real;
            }
        }
        x = project_batch(&x, x0, cfg.epsilon, cfg.norm, cfg.clamp)?;
    }
    Ok(x)
}

/// Classifier graph `x -> encoder -> head` with a supervised attack objective (to be ascended).
struct SupervisedGraph {
    graph: Graph,
    loss: NodeId,
}

const INPUT: &str = "attack.x";
const BANK: &str = "attack.bank";

impl SupervisedGraph {
    fn new(model: &Model, m: usize, y: &[usize], loss: AttackLoss) -> Result<Self> {
        let net = model.net();
        let mut g = Graph::new();
        let x = net.input(&mut g, INPUT, m)?;
        let h = net.encoder(&mut g, x)?;
        let logits = net.head(&mut g, h)?;
        let loss = match loss {
            AttackLoss::CrossEntropy => cross_entropy_node(&mut g, logits, y, Reduction::Sum)?,
            AttackLoss::CwMargin { kappa } => {
                let margin = cw_margin_node(&mut g, logits, y, kappa, Reduction::Sum)?;
                g.neg(margin)?
            }
            AttackLoss::Distance(_) => return Err(Error::Invalid("supervised attacks need cross_entropy or cw_margin".into())),
        };
        Ok(SupervisedGraph { graph: g, loss })
    }

    fn input_grad(&self, model: &Model, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut b = model.params.bindings();
        b.insert(INPUT, x);
        Ok(grad(&self.graph, self.loss, &[INPUT], &b, mode)?.remove(INPUT).expect("requested"))
    }
}

fn check_labels(x: &Tensor, y: &[usize]) -> Result<()> {
    if x.rank() != 4 || x.shape()[0] != y.len() {
        return Err(Error::Invalid(format!("batch {:?} does not match {} labels", x.shape(), y.len())));
    }
    Ok(())
}

/// PGD on the classifier loss (cross-entropy, or CW margin if configured).
pub fn pgd_supervised(model: &Model, x: &Tensor, y: &[usize], cfg: &AttackConfig, seed: u64, mode: Mode) -> Result<Tensor> {
    check_labels(x, y)?;
    let sg = SupervisedGraph::new(model, y.len(), y, cfg.loss)?;
    pgd_custom(x, cfg, seed, |xa, _| sg.input_grad(model, xa, mode))
}

/// PGD descending the CW margin `max(z_y - max_{c != y} z_c, -kappa)`.
pub fn cw_attack(model: &Model, x: &Tensor, y: &[usize], cfg: &AttackConfig, seed: u64, mode: Mode) -> Result<Tensor> {
    let kappa = match cfg.loss {
        AttackLoss::CwMargin { kappa } => kappa,
        _ => 0.0,
    };
    let cfg = AttackConfig { loss: AttackLoss::CwMargin { kappa }, ..cfg.clone() };
    pgd_supervised(model, x, y, &cfg, seed, mode)
}

/// Frozen embeddings an instance-wise attack contrasts against.
#[derive(Debug, Clone)]
pub struct InstanceTargets {
    /// `[B, projection_dim]` clean embeddings.
    pub bank: Tensor,
    /// Per anchor, rows of `bank` that share its identity.
    pub positives: Vec<Vec<usize>>,
    /// Per anchor, rows of `bank` from other instances.
    pub negatives: Vec<Vec<usize>>,
}

/// Graph `x -> projector(encoder(x))` with the instance-wise objective.
pub(crate) struct InstanceGraph {
    graph: Graph,
    loss: NodeId,
}

impl InstanceGraph {
    pub(crate) fn new(model: &Model, targets: &InstanceTargets, kind: DistanceKind, temperature: f64) -> Result<Self> {
        let m = targets.positives.len();
        let bank_rows = targets.bank.shape()[0];
        if targets.negatives.len() != m || targets.bank.rank() != 2 || targets.bank.shape()[1] != model.config.projection_dim {
            return Err(Error::Invalid("instance targets do not match the batch or projection dim".into()));
        }
        let in_bank = |r: &usize| *r < bank_rows;
        if targets.positives.iter().chain(&targets.negatives).flatten().any(|r| !in_bank(r)) {
            return Err(Error::Invalid("instance target index outside the bank".into()));
        }
        let net = model.net();
        let mut g = Graph::new();
        let x = net.input(&mut g, INPUT, m)?;
        let h = net.encoder(&mut g, x)?;
        let z = net.projector(&mut g, h)?;
        let bank = g.leaf(BANK, targets.bank.shape())?;
        let loss = match kind {
            DistanceKind::Contrastive => {
                if targets.negatives.iter().any(|n| n.is_empty()) {
                    return Err(Error::Invalid("contrastive attack needs negatives for every anchor".into()));
                }
                let rows = g.concat(&[z, bank], 0)?;
                let anchors = (0..m)
                    .map(|i| AnchorTerm {
                        row: i,
                        positives: targets.positives[i].iter().map(|r| m + r).collect(),
                        negatives: targets.negatives[i].iter().map(|r| m + r).collect(),
                    })
                    .collect();
                contrastive_node(&mut g, rows, &ContrastiveLayout { rows: m + bank_rows, anchors }, temperature)?
            }
            other => {
                let mut select = vec![0.0; m * bank_rows];
                for (i, pos) in targets.positives.iter().enumerate() {
                    let first = *pos.first().ok_or_else(|| Error::Invalid("anchor without positive".into()))?;
                    select[i * bank_rows + first] = 1.0;
                }
                let sel = g.constant(&[m, bank_rows], select)?;
                let zref = g.matmul(sel, bank)?;
                pair_distance_node(&mut g, other, z, zref, Reduction::Sum)?
            }
        };
        Ok(InstanceGraph { graph: g, loss })
    }

    pub(crate) fn input_grad(&self, model: &Model, x: &Tensor, bank: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut b = model.params.bindings();
        b.insert(INPUT, x);
        b.insert(BANK, bank);
        Ok(grad(&self.graph, self.loss, &[INPUT], &b, mode)?.remove(INPUT).expect("requested"))
    }

    pub(crate) fn value(&self, model: &Model, x: &Tensor, bank: &Tensor, mode: Mode) -> Result<f64> {
        let mut b: Bindings<'_, Real> = model.params.bindings();
        b.insert(INPUT, x);
        b.insert(BANK, bank);
        Ok(crate::autodiff::forward(&self.graph, &b, mode)?.value(self.loss).item() as f64)
    }
}

fn distance_kind(cfg: &AttackConfig) -> Result<DistanceKind> {
    match cfg.loss {
        AttackLoss::Distance(k) => Ok(k),
        other => Err(Error::Invalid(format!("instance-wise attacks need a distance loss, got {}", other.name()))),
    }
}

/// Label-free attack: ascend the instance loss of `t_x` against frozen embeddings.
pub fn instance_wise_attack(model: &Model, t_x: &Tensor, targets: &InstanceTargets, cfg: &AttackConfig, seed: u64, mode: Mode) -> Result<Tensor> {
    if t_x.rank() != 4 || t_x.shape()[0] != targets.positives.len() {
        return Err(Error::Invalid(format!("batch {:?} does not match {} anchors", t_x.shape(), targets.positives.len())));
    }
    let ig = InstanceGraph::new(model, targets, distance_kind(cfg)?, cfg.temperature)?;
    pgd_custom(t_x, cfg, seed, |xa, _| ig.input_grad(model, xa, &targets.bank, mode))
}

/// Value of the instance-wise objective at `t_x` (the quantity the attack ascends).
pub fn instance_loss(model: &Model, t_x: &Tensor, targets: &InstanceTargets, kind: DistanceKind, temperature: f64, mode: Mode) -> Result<f64> {
    InstanceGraph::new(model, targets, kind, temperature)?.value(model, t_x, &targets.bank, mode)
}

/// Input gradient of the summed cross-entropy averaged over the given
/// transforms, `specs[i][j]` being transform `j` of sample `i`.
pub fn eot_gradient(model: &Model, x: &Tensor, y: &[usize], specs: &[Vec<TransformSpec>], mode: Mode) -> Result<Tensor> {
    check_labels(x, y)?;
    let n = specs.first().map_or(0, Vec::len);
    if specs.len() != y.len() || n == 0 || specs.iter().any(|s| s.len() != n) {
        return Err(Error::Invalid("need the same positive number of transforms per sample".into()));
    }
    let sg = SupervisedGraph::new(model, y.len(), y, AttackLoss::CrossEntropy)?;
    eot_gradient_with(&sg, model, x, specs, mode)
}

fn eot_gradient_with(sg: &SupervisedGraph, model: &Model, x: &Tensor, specs: &[Vec<TransformSpec>], mode: Mode) -> Result<Tensor> {
    let m = x.shape()[0];
    let n = specs[0].len();
    let per = x.len() / m;
    let images: Vec<Tensor> = (0..m).map(|i| x.index_first(i)).collect();
    let mut total = vec![0.0f64; x.len()];
    for j in 0..n {
        let transformed: Vec<Tensor> = (0..m).map(|i| apply_transform(&specs[i][j], &images[i])).collect::<Result<_>>()?;
        let xt = Tensor::stack(&transformed)?;
        let gt = sg.input_grad(model, &xt, mode)?;
        for i in 0..m {
            let gi = transform_vjp(&specs[i][j], &images[i], &gt.index_first(i))?;
            for (acc, &v) in total[i * per..(i + 1) * per].iter_mut().zip(gi.data()) {
                *acc += v as f64;
            }
        }
    }
    let data = total.into_iter().map(|v| (v / n as f64) as Real).collect();
    Ok(Tensor::new(x.shape().to_vec(), data)?)
}

/// PGD whose every step averages gradients over `n_transforms` fresh transforms of the iterate.
#[allow(clippy::too_many_arguments)]
pub fn eot_attack(
    model: &Model,
    x: &Tensor,
    y: &[usize],
    cfg: &AttackConfig,
    n_transforms: usize,
    policy: &AugmentPolicy,
    seed: u64,
    mode: Mode,
) -> Result<Tensor> {
    check_labels(x, y)?;
    policy.validate()?;
    if n_transforms == 0 {
        return Err(Error::Invalid("EoT needs at least one transform".into()));
    }
    let (h, w) = (x.shape()[2], x.shape()[3]);
    let sg = SupervisedGraph::new(model, y.len(), y, AttackLoss::CrossEntropy)?;
    pgd_custom(x, cfg, seed, |xa, step| {
        let specs: Vec<Vec<TransformSpec>> = (0..y.len())
            .map(|i| {
                (0..n_transforms)
                    .map(|j| sample_transform(policy, derive_seed(&[stream::EOT, seed, step as u64, j as u64, i as u64]), h, w))
                    .collect()
            })
            .collect::<Result<_>>()?;
        eot_gradient_with(&sg, model, xa, &specs, mode)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{EncoderArch, ModelConfig};

    fn brute_l1(v: &[f64], eps: f64) -> Vec<f64> {
        // Every support set gives a feasible boundary point with a shared threshold;
        // the projection is the closest of them.
        let d = v.len();
        if v.iter().map(|x| x.abs()).sum::<f64>() <= eps {
            return v.to_vec();
        }
        let mut best: Option<(f64, Vec<f64>)> = None;
        for support in 1u32..(1 << d) {
            let idx: Vec<usize> = (0..d).filter(|i| support & (1 << i) != 0).collect();
            let s: Vec<f64> = v.iter().map(|x| if *x >= 0.0 { 1.0 } else { -1.0 }).collect();
            let theta = (idx.iter().map(|&i| v[i].abs()).sum::<f64>() - eps) / idx.len() as f64;
            let mut w = vec![0.0; d];
            let mut ok = theta >= 0.0;
            for &i in &idx {
                w[i] = s[i] * (v[i].abs() - theta);
                ok &= v[i].abs() - theta >= 0.0;
            }
            if !ok {
                continue;
            }
            let dist: f64 = w.iter().zip(v).map(|(a, b)| (a - b).powi(2)).sum();
            if best.as_ref().map_or(true, |(bd, _)| dist < *bd) {
                best = Some((dist, w));
            }
        }
        best.unwrap().1
    }

    #[test]
    fn l1_projection_matches_enumeration() {
        let mut rng = rng_from(&[3]);
        for _ in 0..200 {
            let d = rng.gen_range(1..=5);
            let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let eps = rng.gen_range(0.05..3.0);
            let mut p = v.clone();
            project_delta(&mut p, eps, Norm::L1);
            let b = brute_l1(&v, eps);
            for (a, c) in p.iter().zip(&b) {
                assert!((a - c).abs() < 1e-9, "{v:?} eps {eps}: {p:?} vs {b:?}");
            }
        }
    }

    #[test]
    fn projection_hand_cases() {
        let x0 = Tensor::from_vec(vec![0.5 as Real]);
        let x = Tensor::from_vec(vec![0.9 as Real]);
        let p = project_ball(&x, &x0, 0.1, Norm::Linf).unwrap();
        assert!((p.data()[0] - 0.6).abs() < 1e-6);
        let x0 = Tensor::from_vec(vec![0.0 as Real, 0.0]);
        let x = Tensor::from_vec(vec![3.0 as Real, 4.0]);
        let mut d = vec![3.0, 4.0];
        project_delta(&mut d, 1.0, Norm::L2);
        assert!((d[0] - 0.6).abs() < 1e-12 && (d[1] - 0.8).abs() < 1e-12);
        let p = project_ball(&x, &x0, 1.0, Norm::L2).unwrap();
        assert!((p.data()[0] - 0.6).abs() < 1e-6 && (p.data()[1] - 0.8).abs() < 1e-6);
        let inside = Tensor::from_vec(vec![0.1 as Real, 0.2]);
        assert_eq!(project_ball(&inside, &x0, 1.0, Norm::L2).unwrap(), inside);
    }

    fn linear_model() -> Model {
        // One-layer MLP encoder acting as identity on a 1x1x2 image, then a known head.
        let cfg = ModelConfig { encoder: EncoderArch::Mlp { widths: vec![2] }, input_dims: (2, 1, 1), projection_dim: 2, num_classes: 2 };
        let mut model = Model::init(cfg, 0).unwrap();
        let set = |m: &mut Model, name: &str, v: &[Real]| m.params.get_mut(name).unwrap().data_mut().copy_from_slice(v);
        set(&mut model, "enc.fc0.weight", &[1.0, 0.0, 0.0, 1.0]);
        set(&mut model, "head.weight", &[2.0, -1.0, -1.0, 3.0]);
        model
    }

    #[test]
    fn one_step_on_linear_softmax_model() {
        let model = linear_model();
        let x = Tensor::new(vec![1, 2, 1, 1], vec![0.5, 0.5]).unwrap();
        let cfg = AttackConfig { random_start: false, step_size: 0.01, ..AttackConfig::pgd(Norm::Linf, 0.05, 1) };
        let adv = pgd_supervised(&model, &x, &[0], &cfg, 1, Mode::Eval).unwrap();
        // d CE / d x = W (p - e_y); with relu active, W rows are (2,-1), (-1,3) and p_1 > 0.
        // Row 0 gives 2 (p0 - 1) - p1 < 0, row 1 gives -(p0 - 1) + 3 p1 > 0.
        assert!((adv.data()[0] - 0.49).abs() < 1e-6);
        assert!((adv.data()[1] - 0.51).abs() < 1e-6);
        let zero = AttackConfig { random_start: false, ..AttackConfig::pgd(Norm::Linf, 0.05, 0) };
        assert_eq!(pgd_supervised(&model, &x, &[0], &zero, 1, Mode::Eval).unwrap(), x);
        let zero_eps = AttackConfig { epsilon: 0.0, ..AttackConfig::pgd(Norm::L2, 0.5, 5) };
        assert_eq!(pgd_supervised(&model, &x, &[0], &zero_eps, 1, Mode::Eval).unwrap(), x);
    }

    #[test]
    fn attacks_respect_their_balls() {
        let cfg = ModelConfig { encoder: EncoderArch::SmallCnn { channels: vec![4, 4] }, input_dims: (3, 4, 4), projection_dim: 3, num_classes: 2 };
        let model = Model::init(cfg, 5).unwrap();
        let mut rng = rng_from(&[8]);
        let x = Tensor::new(vec![3, 3, 4, 4], (0..144).map(|_| rng.gen::<Real>()).collect()).unwrap();
        for (norm, eps) in [(Norm::Linf, 0.03), (Norm::L2, 0.5), (Norm::L1, 2.0)] {
            for loss in [AttackLoss::CrossEntropy, AttackLoss::CwMargin { kappa: 0.0 }] {
                let cfg = AttackConfig { loss, ..AttackConfig::pgd(norm, eps, 4) };
                let adv = pgd_supervised(&model, &x, &[0, 1, 0], &cfg, 2, Mode::Eval).unwrap();
                assert!(max_perturbation(&adv, &x, norm) <= eps + 1e-6);
                assert!(adv.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
                assert_eq!(adv, pgd_supervised(&model, &x, &[0, 1, 0], &cfg, 2, Mode::Eval).unwrap());
            }
        }
    }

    #[test]
    fn eot_with_identity_policy_is_plain_pgd() {
        let cfg = ModelConfig { encoder: EncoderArch::SmallCnn { channels: vec![4] }, input_dims: (3, 4, 4), projection_dim: 3, num_classes: 2 };
        let model = Model::init(cfg, 1).unwrap();
        let mut rng = rng_from(&[9]);
        let x = Tensor::new(vec![2, 3, 4, 4], (0..96).map(|_| rng.gen::<Real>()).collect()).unwrap();
        let acfg = AttackConfig::pgd(Norm::Linf, 0.05, 3);
        let a = pgd_supervised(&model, &x, &[1, 0], &acfg, 4, Mode::Eval).unwrap();
        let b = eot_attack(&model, &x, &[1, 0], &acfg, 1, &AugmentPolicy::identity(), 4, Mode::Eval).unwrap();
        assert_eq!(a, b);
    }
}

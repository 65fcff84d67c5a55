//! End-to-end acceptance checks. Each test writes one `criterion N ...: PASS|FAIL`
//! line to stderr (bypassing output capture) before asserting.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use rocl::attacks::{cw_attack, eot_attack, instance_loss, instance_wise_attack, max_perturbation, pgd_supervised, project_delta, AttackConfig, InstanceTargets, Norm, StepRule};
use rocl::augment::AugmentPolicy;
use rocl::autodiff::{finite_difference, value_and_grad};
use rocl::checkpoint::{decode_checkpoint, encode_checkpoint, Metadata};
use rocl::config::ExperimentConfig;
use rocl::data::{encode_records, load_cifar10_binary, load_records, toy_splits, Dataset, ToySpec};
use rocl::eval::{craft_adversarial, linear_eval, predict_all, robust_linear_eval, smoothed_accuracy, smoothing_curve, transfer_eval, evaluate_robustness, LinearEvalConfig, SmoothingConfig, SuiteAttack};
use rocl::graph::Graph;
use rocl::losses::{batch_nt_xent, contrastive_node, cross_entropy_node, cw_margin_node, kl_node, nt_xent, ContrastiveBatch, ContrastiveLayout, DistanceKind, Reduction, ViewOrder};
use rocl::model::{Component, EncoderArch, Model, ModelConfig};
use rocl::train::{lr_schedule, train_at, train_rocl, two_views, TrainConfig};
use rocl::{Element, Mode, NodeId, Tensor};

fn report(n: usize, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr().lock(), "criterion {n:>2} ({name}): {verdict} {detail}");
}

/// CPU seconds consumed by the calling thread.
fn thread_cpu() -> f64 {
    let mut ts = libc::timespec { tv_sec: 0, tv_nsec: 0 };
    // SAFETY: `ts` is a valid out-pointer for the duration of the call.
    unsafe { libc::clock_gettime(libc::CLOCK_THREAD_CPUTIME_ID, &mut ts) };
    ts.tv_sec as f64 + ts.tv_nsec as f64 * 1e-9
}

fn tiny_model() -> ModelConfig {
    ModelConfig { encoder: EncoderArch::SmallCnn { channels: vec![4, 8] }, input_dims: (3, 8, 8), projection_dim: 6, num_classes: 3 }
}

// ---------------------------------------------------------------- 1

#[derive(Clone, Copy)]
enum Dist {
    Normal,
    /// Uniform magnitude in [gap, 1] with a random sign.
    Away(f64),
    Positive,
    /// A shuffled grid with spacing 0.1, so maxima are unambiguous.
    Distinct,
}

fn sample(dist: Dist, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    match dist {
        Dist::Normal => (0..n).map(|_| StandardNormal.sample(rng)).collect(),
        Dist::Away(gap) => (0..n).map(|_| rng.gen_range(gap..1.0) * if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect(),
        Dist::Positive => (0..n).map(|_| rng.gen_range(0.5..2.0)).collect(),
        Dist::Distinct => {
            let mut v: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0) * 0.1 + rng.gen_range(-0.02..0.02)).collect();
            rand::seq::SliceRandom::shuffle(v.as_mut_slice(), rng);
            v
        }
    }
}

type Builder = fn(&mut Graph, &[NodeId]) -> NodeId;

struct Case {
    name: &'static str,
    inputs: Vec<(&'static str, Vec<usize>, Dist)>,
    mode: Mode,
    build: Builder,
}

fn case(name: &'static str, inputs: &[(&'static str, &[usize], Dist)], mode: Mode, build: Builder) -> Case {
    Case { name, inputs: inputs.iter().map(|(n, s, d)| (*n, s.to_vec(), *d)).collect(), mode, build }
}

fn cases() -> Vec<Case> {
    use Dist::*;
    let t = Mode::Train;
    let e = Mode::Eval;
    vec![
        case("add", &[("a", &[3, 4], Normal), ("b", &[4], Normal)], e, |g, x| g.add(x[0], x[1]).unwrap()),
        case("sub", &[("a", &[3, 4], Normal), ("b", &[3, 4], Normal)], e, |g, x| g.sub(x[0], x[1]).unwrap()),
        case("mul", &[("a", &[3, 4], Normal), ("b", &[3, 1], Normal)], e, |g, x| g.mul(x[0], x[1]).unwrap()),
        case("matmul", &[("a", &[3, 4], Normal), ("b", &[4, 2], Normal)], e, |g, x| g.matmul(x[0], x[1]).unwrap()),
        case("matmul_ta", &[("a", &[4, 3], Normal), ("b", &[4, 2], Normal)], e, |g, x| g.matmul_t(x[0], x[1], true, false).unwrap()),
        case("matmul_tb", &[("a", &[3, 4], Normal), ("b", &[2, 4], Normal)], e, |g, x| g.matmul_t(x[0], x[1], false, true).unwrap()),
        case("matmul_tab", &[("a", &[4, 3], Normal), ("b", &[2, 4], Normal)], e, |g, x| g.matmul_t(x[0], x[1], true, true).unwrap()),
        case("conv2d_s1p1", &[("x", &[2, 2, 5, 5], Normal), ("k", &[3, 2, 3, 3], Normal)], e, |g, x| g.conv2d(x[0], x[1], 1, 1).unwrap()),
        case("conv2d_s2p0", &[("x", &[1, 2, 5, 5], Normal), ("k", &[2, 2, 3, 3], Normal)], e, |g, x| g.conv2d(x[0], x[1], 2, 0).unwrap()),
        case("relu", &[("x", &[3, 4], Away(0.05))], e, |g, x| g.relu(x[0]).unwrap()),
        case("exp", &[("x", &[3, 4], Normal)], e, |g, x| g.exp(x[0]).unwrap()),
        case("log", &[("x", &[3, 4], Positive)], e, |g, x| g.log(x[0]).unwrap()),
        case("sqrt", &[("x", &[3, 4], Positive)], e, |g, x| g.sqrt(x[0]).unwrap()),
        case("neg", &[("x", &[3, 4], Normal)], e, |g, x| g.neg(x[0]).unwrap()),
        case("add_scalar", &[("x", &[3, 4], Normal)], e, |g, x| g.add_scalar(x[0], 0.7).unwrap()),
        case("mul_scalar", &[("x", &[3, 4], Normal)], e, |g, x| g.mul_scalar(x[0], -1.3).unwrap()),
        case("l2_normalize", &[("x", &[3, 4], Away(0.2))], e, |g, x| g.l2_normalize(x[0]).unwrap()),
        case(
            "batch_norm_train_2d",
            &[("x", &[5, 3], Normal), ("s", &[3], Normal), ("b", &[3], Normal), ("rm", &[3], Normal), ("rv", &[3], Positive)],
            t,
            |g, x| g.batch_norm(x[0], x[1], x[2], x[3], x[4], 1e-5).unwrap(),
        ),
        case(
            "batch_norm_train_4d",
            &[("x", &[2, 3, 2, 2], Normal), ("s", &[3], Normal), ("b", &[3], Normal), ("rm", &[3], Normal), ("rv", &[3], Positive)],
            t,
            |g, x| g.batch_norm(x[0], x[1], x[2], x[3], x[4], 1e-5).unwrap(),
        ),
        case(
            "batch_norm_eval",
            &[("x", &[2, 3, 2, 2], Normal), ("s", &[3], Normal), ("b", &[3], Normal), ("rm", &[3], Normal), ("rv", &[3], Positive)],
            e,
            |g, x| g.batch_norm(x[0], x[1], x[2], x[3], x[4], 1e-5).unwrap(),
        ),
        case("sum_all", &[("x", &[3, 4], Normal)], e, |g, x| g.sum(x[0], None).unwrap()),
        case("sum_axis", &[("x", &[3, 4], Normal)], e, |g, x| g.sum(x[0], Some(1)).unwrap()),
        case("mean_axis", &[("x", &[3, 4], Normal)], e, |g, x| g.mean(x[0], Some(0)).unwrap()),
        case("max_all", &[("x", &[3, 4], Distinct)], e, |g, x| g.max(x[0], None).unwrap()),
        case("max_axis", &[("x", &[3, 4], Distinct)], e, |g, x| g.max(x[0], Some(1)).unwrap()),
        case("reshape", &[("x", &[3, 4], Normal)], e, |g, x| g.reshape(x[0], &[2, 6]).unwrap()),
        case("concat", &[("a", &[3, 2], Normal), ("b", &[3, 4], Normal)], e, |g, x| g.concat(&[x[0], x[1]], 1).unwrap()),
        case("slice", &[("x", &[3, 5], Normal)], e, |g, x| g.slice(x[0], 1, 1, 4).unwrap()),
        case("affine", &[("x", &[3, 4], Normal), ("w", &[4, 2], Normal), ("b", &[2], Normal)], e, |g, x| g.affine(x[0], x[1], x[2]).unwrap()),
        case("log_sum_exp", &[("x", &[3, 4], Normal)], e, |g, x| g.log_sum_exp(x[0], 1).unwrap()),
        case("log_softmax", &[("x", &[3, 4], Normal)], e, |g, x| g.log_softmax(x[0]).unwrap()),
        case("avg_pool2", &[("x", &[1, 2, 4, 4], Normal)], e, |g, x| g.avg_pool2(x[0]).unwrap()),
        case("max_pool2", &[("x", &[1, 2, 4, 4], Distinct)], e, |g, x| g.max_pool2(x[0]).unwrap()),
        case("global_avg_pool", &[("x", &[2, 3, 2, 2], Normal)], e, |g, x| g.global_avg_pool(x[0]).unwrap()),
        case("contrastive", &[("z", &[6, 4], Normal)], e, |g, x| {
            let layout = ContrastiveLayout::all_pairs(3, 2, ViewOrder::SampleMajor).unwrap();
            contrastive_node(g, x[0], &layout, 0.5).unwrap()
        }),
        case("cross_entropy", &[("z", &[4, 3], Normal)], e, |g, x| cross_entropy_node(g, x[0], &[0, 2, 1, 2], Reduction::Mean).unwrap()),
        case("kl", &[("p", &[4, 3], Normal), ("q", &[4, 3], Normal)], e, |g, x| kl_node(g, x[0], x[1], Reduction::Mean).unwrap()),
        case("cw_margin", &[("z", &[4, 3], Distinct)], e, |g, x| cw_margin_node(g, x[0], &[0, 2, 1, 2], 0.05, Reduction::Sum).unwrap()),
    ]
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Largest relative error between reverse-mode gradients in `T` and central
/// differences in f64, over all inputs of one random instance.
fn check_instance<T: Element>(c: &Case, rng: &mut ChaCha8Rng) -> f64 {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = c.inputs.iter().map(|(n, s, _)| g.leaf(n, s).unwrap()).collect();
    let out = (c.build)(&mut g, &ids);
    let out_shape = g.shape(out).to_vec();
    let loss = if out_shape.iter().product::<usize>() == 1 && out_shape.len() <= 1 {
        out
    } else {
        let n: usize = out_shape.iter().product();
        let w = g.constant(&out_shape, sample(Dist::Normal, n, rng)).unwrap();
        let prod = g.mul(out, w).unwrap();
        g.sum(prod, None).unwrap()
    };
    let data: Vec<(String, Vec<f64>, Vec<usize>)> = c
        .inputs
        .iter()
        .map(|(n, s, d)| {
            let v: Vec<f64> = sample(*d, s.iter().product(), rng).into_iter().map(|x| T::of(x).as_f64()).collect();
            (n.to_string(), v, s.clone())
        })
        .collect();
    let t_tensors: Vec<Tensor<T>> = data.iter().map(|(_, v, s)| Tensor::from_f64(s, v).unwrap()).collect();
    let f_tensors: Vec<Tensor<f64>> = data.iter().map(|(_, v, s)| Tensor::from_f64(s, v).unwrap()).collect();
    let names: Vec<&str> = data.iter().map(|(n, _, _)| n.as_str()).collect();
    let tb: HashMap<&str, &Tensor<T>> = names.iter().copied().zip(&t_tensors).collect();
    let fb: HashMap<&str, &Tensor<f64>> = names.iter().copied().zip(&f_tensors).collect();
    let (_, ad) = value_and_grad(&g, loss, &names, &tb, c.mode).unwrap();
    let fd = finite_difference(&g, loss, &names, &fb, c.mode, 1e-5).unwrap();
    let mut worst: f64 = 0.0;
    for n in &names {
        let a: Vec<f64> = ad[*n].data().iter().map(|v| v.as_f64()).collect();
        let b: Vec<f64> = fd[*n].data().to_vec();
        let diff: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        worst = worst.max(norm(&diff) / norm(&a).max(norm(&b)).max(1e-6));
    }
    worst
}

#[test]
fn criterion_01_gradients_match_finite_differences() {
    let start = thread_cpu();
    let mut worst32: (f64, &str) = (0.0, "");
    let mut worst64: (f64, &str) = (0.0, "");
    let all = cases();
    for (k, c) in all.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + k as u64);
        for _ in 0..100 {
            let e32 = check_instance::<f32>(c, &mut rng);
            let e64 = check_instance::<f64>(c, &mut rng);
            if e32 > worst32.0 {
                worst32 = (e32, c.name);
            }
            if e64 > worst64.0 {
                worst64 = (e64, c.name);
            }
        }
    }
    let secs = thread_cpu() - start;
    let pass = worst32.0 < 1e-3 && worst64.0 < 1e-6 && secs < 60.0;
    let detail = format!(
        "{} cases x 100 instances; worst f32 {:.2e} ({}), worst f64 {:.2e} ({}); {:.1}s",
        all.len(),
        worst32.0,
        worst32.1,
        worst64.0,
        worst64.1,
        secs
    );
    report(1, "gradient correctness", pass, &detail);
    assert!(pass, "{detail}");
}

// ---------------------------------------------------------------- 2

fn brute_contrastive(z: &[Vec<Vec<f64>>], mask: &[Vec<bool>], tau: f64) -> f64 {
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        dot / (norm(a) * norm(b))
    };
    let (m, views) = (z.len(), z[0].len());
    let mut total = 0.0;
    let mut count = 0;
    for i in 0..m {
        for v in 0..views {
            let pos: Vec<f64> = (0..views).filter(|&u| mask[v][u]).map(|u| (cos(&z[i][v], &z[i][u]) / tau).exp()).collect();
            if pos.is_empty() {
                continue;
            }
            let neg: f64 = (0..m).filter(|&j| j != i).flat_map(|j| (0..views).map(move |u| (j, u))).map(|(j, u)| (cos(&z[i][v], &z[j][u]) / tau).exp()).sum();
            let p: f64 = pos.iter().sum();
            total += -(p / (p + neg)).ln();
            count += 1;
        }
    }
    total / count as f64
}

#[test]
fn criterion_02_loss_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for m in [2, 4, 8] {
        for views in [2, 3] {
            for tau in [0.1, 0.5, 1.0] {
                for _ in 0..10 {
                    let d = 5;
                    let mut mask = vec![vec![false; views]; views];
                    while !mask.iter().flatten().any(|&b| b) {
                        for (v, row) in mask.iter_mut().enumerate() {
                            for (u, cell) in row.iter_mut().enumerate() {
                                *cell = u != v && rng.gen_bool(0.6);
                            }
                        }
                    }
                    let z: Vec<Vec<Vec<f64>>> = (0..m).map(|_| (0..views).map(|_| sample(Dist::Normal, d, &mut rng)).collect()).collect();
                    let flat: Vec<f64> = z.iter().flatten().flatten().copied().collect();
                    let t = Tensor::<f64>::from_f64(&[m, views, d], &flat).unwrap();
                    let got = batch_nt_xent(&t, &mask, tau).unwrap();
                    worst = worst.max((got - brute_contrastive(&z, &mask, tau)).abs());
                    checked += 1;
                }
            }
        }
    }
    let hand = nt_xent(&ContrastiveBatch { anchor: vec![1.0, 0.0], positives: vec![vec![2.0, 0.0]], negatives: vec![vec![0.0, 3.0]], temperature: 1.0 }).unwrap();
    let expected = (1.0 + (-1.0f64).exp()).ln();
    let pass = worst < 1e-6 && (hand - expected).abs() < 1e-12 && (hand - 0.31326).abs() < 5e-6;
    let detail = format!("{checked} batches, worst |diff| {worst:.2e}; orthogonal case {hand:.5}");
    report(2, "loss oracle", pass, &detail);
    assert!(pass, "{detail}");
}

// ---------------------------------------------------------------- 3

/// Closest point of the l1 ball found by trying every support set.
fn exhaustive_l1(v: &[f64], eps: f64) -> Vec<f64> {
    if v.iter().map(|x| x.abs()).sum::<f64>() <= eps {
        return v.to_vec();
    }
    let d = v.len();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for support in 1u32..(1 << d) {
        let idx: Vec<usize> = (0..d).filter(|i| support & (1 << i) != 0).collect();
        let theta = (idx.iter().map(|&i| v[i].abs()).sum::<f64>() - eps) / idx.len() as f64;
        if theta < 0.0 || idx.iter().any(|&i| v[i].abs() < theta) {
            continue;
        }
        let w: Vec<f64> = (0..d).map(|i| if idx.contains(&i) { v[i].signum() * (v[i].abs() - theta) } else { 0.0 }).collect();
        let dist = v.iter().zip(&w).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        if best.as_ref().is_none_or(|(b, _)| dist < *b) {
            best = Some((dist, w));
        }
    }
    best.expect("some support is feasible").1
}

#[test]
fn criterion_03_projection_and_ball_constraints() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_proj: f64 = 0.0;
    for _ in 0..500 {
        let d = rng.gen_range(1..=7);
        let v = sample(Dist::Normal, d, &mut rng);
        let eps = rng.gen_range(0.05..2.0);
        let mut got = v.clone();
        project_delta(&mut got, eps, Norm::L1);
        let want = exhaustive_l1(&v, eps);
        worst_proj = worst_proj.max(got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }

    let model = Model::init(tiny_model(), 3).unwrap();
    let mut violations = 0;
    let mut worst_excess: f64 = 0.0;
    let runs = 1000;
    for r in 0..runs {
        let norm = [Norm::Linf, Norm::L2, Norm::L1][r % 3];
        let eps = match norm {
            Norm::Linf => rng.gen_range(0.005..0.1),
            Norm::L2 => rng.gen_range(0.05..1.0),
            Norm::L1 => rng.gen_range(0.5..6.0),
        };
        let steps = rng.gen_range(1..=3);
        let step_rule = if rng.gen_bool(0.5) { StepRule::Sign } else { StepRule::Steepest };
        let cfg = AttackConfig { step_rule, random_start: rng.gen_bool(0.7), ..AttackConfig::pgd(norm, eps, steps) };
        let data: Vec<f64> = (0..2 * 3 * 64).map(|_| if rng.gen_bool(0.1) { rng.gen_range(0..2) as f64 } else { rng.gen::<f64>() }).collect();
        let x = Tensor::from_f64(&[2, 3, 8, 8], &data).unwrap();
        let y = [rng.gen_range(0..3), rng.gen_range(0..3)];
        let seed = r as u64;
        let adv = match (r / 3) % 4 {
            0 => pgd_supervised(&model, &x, &y, &cfg, seed, Mode::Eval),
            1 => cw_attack(&model, &x, &y, &cfg, seed, Mode::Eval),
            2 => {
                let bank = model.project(&model.encode(&x, Mode::Eval).unwrap()).unwrap();
                let targets = InstanceTargets { bank, positives: vec![vec![0], vec![1]], negatives: vec![vec![1], vec![0]] };
                let cfg = AttackConfig { loss: rocl::attacks::AttackLoss::Distance(DistanceKind::Contrastive), ..cfg };
                instance_wise_attack(&model, &x, &targets, &cfg, seed, Mode::Eval)
            }
            _ => eot_attack(&model, &x, &y, &cfg, 2, &AugmentPolicy::simclr(), seed, Mode::Eval),
        }
        .unwrap();
        let excess = max_perturbation(&adv, &x, norm) - eps;
        let out_of_range = adv.data().iter().any(|&v| !(-1e-6..=1.0 + 1e-6).contains(&(v as f64)));
        worst_excess = worst_excess.max(excess);
        if excess > 1e-6 || out_of_range {
            violations += 1;
        }
    }
    let pass = worst_proj < 1e-6 && violations == 0;
    let detail = format!("l1 projection worst diff {worst_proj:.2e}; {runs} attack runs, {violations} violations, worst excess {worst_excess:.2e}");
    report(3, "projection correctness", pass, &detail);
    assert!(pass, "{detail}");
}

// ---------------------------------------------------------------- 4

#[test]
fn criterion_04_instance_attack_raises_contrastive_loss() {
    let start = thread_cpu();
    let exp = ExperimentConfig::toy();
    let (train, _) = toy_splits(&ToySpec { samples_per_class: 200, ..ToySpec::new(2, 200, 16, 4) }, 10).unwrap();
    let pre = TrainConfig { epochs: 3, seed: 4, parallel: false, ..exp.train.clone() }.standard_contrastive();
    let (model, _) = train_rocl(&train, &exp.model, &pre, None).unwrap();
    let attack = AttackConfig::instance(8.0 / 255.0, 2.0 / 255.0, 7);
    let m = 8;
    let mut wins = 0;
    for trial in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + trial);
        let ids: Vec<usize> = rand::seq::index::sample(&mut rng, train.len(), m).into_vec();
        let cfg = TrainConfig { seed: trial, ..pre.clone() };
        let (t, tp) = two_views(&cfg, &train.images_at(&ids), &ids, 0).unwrap();
        let both = Tensor::stack(&(0..m).map(|i| t.index_first(i)).chain((0..m).map(|i| tp.index_first(i))).collect::<Vec<_>>()).unwrap();
        let bank = model.project(&model.encode(&both, Mode::Eval).unwrap()).unwrap();
        let targets = InstanceTargets {
            bank,
            positives: (0..m).map(|i| vec![m + i]).collect(),
            negatives: (0..m).map(|i| (0..m).filter(|&j| j != i).flat_map(|j| [j, m + j]).collect()).collect(),
        };
        let before = instance_loss(&model, &t, &targets, DistanceKind::Contrastive, 0.5, Mode::Eval).unwrap();
        let adv = instance_wise_attack(&model, &t, &targets, &attack, trial, Mode::Eval).unwrap();
        let after = instance_loss(&model, &adv, &targets, DistanceKind::Contrastive, 0.5, Mode::Eval).unwrap();
        if after > before {
            wins += 1;
        }
    }
    let secs = thread_cpu() - start;
    let pass = wins >= 95 && secs < 120.0;
    let detail = format!("loss increased in {wins}/100 trials; {secs:.1}s");
    report(4, "instance-wise attack efficacy", pass, &detail);
    assert!(pass, "{detail}");
}

// ---------------------------------------------------------------- 5, 6, 7

#[derive(Debug, Clone, Copy)]
struct Score {
    clean: f64,
    robust: f64,
}

struct SeedRun {
    train: Dataset,
    test: Dataset,
    rocl: Model,
    standard_le: Score,
    rocl_le: Score,
    rocl_le_model: Model,
    cpu_seconds: f64,
}

fn seen_attack() -> SuiteAttack {
    SuiteAttack::pgd(Norm::Linf, 8.0 / 255.0, 20)
}

fn score(model: &Model, test: &Dataset, seed: u64) -> Score {
    let r = evaluate_robustness(model, test, &[seen_attack()], "m", seed, false).unwrap();
    Score { clean: r.clean_accuracy, robust: r.rows[0].accuracy }
}

/// Pre-train a standard contrastive and a RoCL encoder on the toy task and
/// linearly evaluate both.
fn seed_run(seed: u64) -> &'static SeedRun {
    static RUNS: [OnceLock<SeedRun>; 3] = [OnceLock::new(), OnceLock::new(), OnceLock::new()];
    RUNS[seed as usize].get_or_init(|| {
        let start = thread_cpu();
        let exp = ExperimentConfig::toy().with_overrides([("seed", seed.to_string().as_str()), ("train.parallel", "false")]).unwrap();
        let (train, test) = toy_splits(&exp.data.toy, exp.data.toy_test_per_class).unwrap();
        let le = LinearEvalConfig { parallel: false, ..exp.linear.clone() };
        let (standard, _) = train_rocl(&train, &exp.model, &exp.train.clone().standard_contrastive(), None).unwrap();
        let (rocl, _) = train_rocl(&train, &exp.model, &exp.train, None).unwrap();
        let (standard_le, _) = linear_eval(&standard, &train, &le).unwrap();
        let (rocl_le_model, _) = linear_eval(&rocl, &train, &le).unwrap();
        let standard_le = score(&standard_le, &test, seed);
        let rocl_le = score(&rocl_le_model, &test, seed);
        let _ = writeln!(std::io::stderr().lock(), "  seed {seed}: standard {standard_le:?}, rocl {rocl_le:?}");
        SeedRun { train, test, rocl, standard_le, rocl_le, rocl_le_model, cpu_seconds: thread_cpu() - start }
    })
}

/// Evaluate seeds in order until a majority of three is decided.
fn majority(mut check: impl FnMut(u64) -> (bool, String)) -> (bool, Vec<String>) {
    let (mut yes, mut no) = (0, 0);
    let mut details = Vec::new();
    for seed in 0..3 {
        let (ok, d) = check(seed);
        details.push(format!("seed {seed}: {d}{}", if ok { "" } else { " (fails)" }));
        if ok {
            yes += 1;
        } else {
            no += 1;
        }
        if yes >= 2 || no >= 2 {
            break;
        }
    }
    (yes >= 2, details)
}

#[test]
fn criterion_05_rocl_beats_standard_contrastive_under_attack() {
    let chance = 50.0;
    let (ok, details) = majority(|seed| {
        let r = seed_run(seed);
        let (s, c) = (r.standard_le, r.rocl_le);
        let ok = s.robust <= chance + 10.0 && c.robust >= s.robust + 15.0 && (c.clean - s.clean).abs() <= 10.0;
        (ok, format!("standard clean {:.2} robust {:.2}, rocl clean {:.2} robust {:.2}", s.clean, s.robust, c.clean, c.robust))
    });
    let secs: f64 = (0..details.len() as u64).map(|s| seed_run(s).cpu_seconds).sum();
    let pass = ok && secs < 1800.0;
    let detail = format!("{}; {secs:.0}s", details.join("; "));
    report(5, "end-to-end direction", pass, &detail);
    assert!(pass, "{detail}");
}

#[test]
fn criterion_06_robust_linear_eval_is_at_least_as_robust() {
    let (pass, details) = majority(|seed| {
        let r = seed_run(seed);
        let exp = ExperimentConfig::toy().with_overrides([("seed", seed.to_string().as_str())]).unwrap();
        let rle = LinearEvalConfig { parallel: false, ..exp.robust_linear };
        let (model, _) = robust_linear_eval(&r.rocl, &r.train, &rle).unwrap();
        let s = score(&model, &r.test, seed);
        (s.robust >= r.rocl_le.robust, format!("LE robust {:.2}, r-LE robust {:.2}", r.rocl_le.robust, s.robust))
    });
    let detail = details.join("; ");
    report(6, "robust linear evaluation direction", pass, &detail);
    assert!(pass, "{detail}");
}

#[test]
fn criterion_07_smoothing_does_not_hurt_blackbox_accuracy() {
    let r = seed_run(0);
    let exp = ExperimentConfig::toy();
    let at_cfg = TrainConfig { epochs: 15, parallel: false, ..exp.train.clone() };
    let source = train_at(&r.train, &exp.model, &at_cfg).unwrap();
    let attack = seen_attack().config;
    let adv = craft_adversarial(&source, &r.test, &attack, 7, false).unwrap();
    let labels = r.test.labels().unwrap();
    let plain_pred = predict_all(&r.rocl_le_model, &adv, false).unwrap();
    let plain = 100.0 * plain_pred.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / labels.len() as f64;
    let smoothing = SmoothingConfig::default();
    let smoothed = smoothed_accuracy(&r.rocl_le_model, &r.test, Some(&adv), &smoothing, 7, false).unwrap();
    let curve = smoothing_curve(&r.rocl_le_model, &r.test, &[1, 10, 100], Some((&source, &attack)), &smoothing, 7, false).unwrap();
    let robust: Vec<f64> = curve.iter().map(|row| row.robust_accuracy.unwrap()).collect();
    let monotone = robust.windows(2).all(|w| w[1] >= w[0] - 2.0);
    let pass = smoothed >= plain - 1.0 && monotone;
    let detail = format!("black-box plain {plain:.2}, smoothed n=30 {smoothed:.2}; curve n=1,10,100: {robust:?}");
    report(7, "smoothing direction", pass, &detail);
    assert!(pass, "{detail}");
}

// ---------------------------------------------------------------- 8

#[test]
fn criterion_08_schedule_exactness() {
    let mut ok = true;
    let mut detail = Vec::new();
    for (name, cfg) in [("toy", TrainConfig::toy()), ("paper", TrainConfig::paper()), ("custom", TrainConfig { epochs: 100, warmup_epochs: 10, base_lr: 0.3, ..TrainConfig::toy() })] {
        let w = cfg.warmup_epochs as f64 / cfg.epochs as f64;
        let at_warmup = lr_schedule(w, &cfg);
        let at_end = lr_schedule(1.0, &cfg);
        let mid = lr_schedule(w + (1.0 - w) / 2.0, &cfg);
        let good = at_warmup == cfg.base_lr && at_end == 0.0 && (mid - cfg.base_lr / 2.0).abs() <= 1e-9;
        ok &= good;
        detail.push(format!("{name}: warmup end {at_warmup}, final {at_end}, midpoint {mid}"));
    }
    let detail = detail.join("; ");
    report(8, "schedule exactness", ok, &detail);
    assert!(ok, "{detail}");
}

// ---------------------------------------------------------------- 9

#[test]
fn criterion_09_freeze_contract() {
    let data = toy_splits(&ToySpec::new(3, 12, 8, 9), 4).unwrap();
    let model = Model::init(tiny_model(), 9).unwrap();
    let frozen = model.params.digest(&[Component::Theta, Component::Pi]);
    let bytes_before = encode_checkpoint(&model, &Metadata::new()).unwrap();
    let le = LinearEvalConfig { parallel: false, ..LinearEvalConfig::linear().scaled(2, 8) };
    let rle = LinearEvalConfig { parallel: false, ..LinearEvalConfig::robust().scaled(2, 8) };
    let suite = [SuiteAttack::pgd(Norm::Linf, 0.03, 2)];
    let outputs = [
        linear_eval(&model, &data.0, &le).unwrap().0,
        robust_linear_eval(&model, &data.0, &rle).unwrap().0,
        transfer_eval(&model, &data.0, &data.1, &le, &suite, "t").unwrap().0,
    ];
    let same = outputs.iter().all(|m| m.params.digest(&[Component::Theta, Component::Pi]) == frozen);
    let untouched = encode_checkpoint(&model, &Metadata::new()).unwrap() == bytes_before;
    let pass = same && untouched;
    let detail = format!("theta/pi hashes equal after LE, r-LE, transfer: {same}; input model bytes unchanged: {untouched}");
    report(9, "freeze contract", pass, &detail);
    assert!(pass, "{detail}");
}

// ---------------------------------------------------------------- 10

#[test]
fn criterion_10_persistence_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let model = Model::init(ModelConfig::toy(), 10).unwrap();
    let meta: Metadata = [("seed".to_string(), "10".to_string())].into();
    let bytes = encode_checkpoint(&model, &meta).unwrap();
    let (back, meta_back) = decode_checkpoint(&bytes).unwrap();
    let ckpt_ok = back == model && meta_back == meta && encode_checkpoint(&back, &meta_back).unwrap() == bytes;

    let (train, _) = toy_splits(&ToySpec::new(2, 5, 16, 10), 1).unwrap();
    let path = dir.path().join("toy.bin");
    std::fs::write(&path, encode_records(&train).unwrap()).unwrap();
    let reloaded = load_records(&[path.as_path()], (3, 16, 16), 2, "toy", "train").unwrap();
    let fixture_ok = reloaded.images == train.images && reloaded.labels == train.labels && std::fs::read(&path).unwrap() == encode_records(&reloaded).unwrap();

    let mut raw = Vec::new();
    for (label, fill) in [(3u8, 0usize), (7u8, 1usize)] {
        raw.push(label);
        raw.extend((0..3072).map(|k| ((k * 7 + fill * 13) % 256) as u8));
    }
    raw[1] = 255;
    let cifar = dir.path().join("data_batch.bin");
    std::fs::write(&cifar, &raw).unwrap();
    let ds = load_cifar10_binary(&cifar).unwrap();
    let expected: Vec<f32> = raw.chunks(3073).flat_map(|r| r[1..].iter().map(|&b| b as f32 / 255.0)).collect();
    let cifar_ok = ds.len() == 2
        && ds.labels().unwrap() == [3, 7]
        && ds.images.shape() == [2, 3, 32, 32]
        && ds.images.data().iter().map(|v| v.as_f64() as f32).eq(expected.iter().copied())
        && ds.images.data()[0].as_f64() == 1.0;
    std::fs::write(&cifar, &raw[..3073 + 100]).unwrap();
    let truncated = load_cifar10_binary(&cifar).unwrap_err().to_string();
    let trunc_ok = truncated.contains("3073");

    let pass = ckpt_ok && fixture_ok && cifar_ok && trunc_ok;
    let detail = format!("checkpoint {ckpt_ok}, dataset fixture {fixture_ok}, cifar fixture {cifar_ok}, truncation error `{truncated}`");
    report(10, "persistence", pass, &detail);
    assert!(pass, "{detail}");
}

// ---------------------------------------------------------------- 11, 12

const TINY: &[&str] = &[
    "data.toy.samples_per_class=16",
    "data.toy.test_per_class=8",
    "data.toy.image_size=8",
    "model.input_dims=3,8,8",
    "model.layers=4,8",
    "model.projection_dim=8",
    "train.epochs=2",
    "train.batch_size=8",
    "attack.steps=2",
    "linear.epochs=2",
    "linear.batch_size=8",
    "eval.steps=2",
    "eval.suite=linf:0.0313725,l2:0.25,cw-linf:0.0313725",
];

fn cli(command: &str, out: &Path, extra: &[String]) -> i32 {
    let mut args = vec!["rocl".to_string(), command.to_string(), "--out".into(), out.display().to_string(), "--seed".into(), "5".into()];
    for s in TINY.iter().map(|s| s.to_string()).chain(extra.iter().cloned()) {
        args.push("--set".into());
        args.push(s);
    }
    rocl::cli::run(args)
}

fn dir_contents(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn criterion_11_reruns_are_byte_identical() {
    let root = tempfile::tempdir().unwrap();
    let ckpt = root.path().join("train-rocl-true/rocl.ckpt");
    let mut ok = true;
    let mut detail = Vec::new();
    for command in ["gen-toy", "train-rocl", "train-at", "evaluate", "smoothing"] {
        let run = |parallel: bool| {
            let out = root.path().join(format!("{command}-{parallel}"));
            let mut extra = vec![format!("train.parallel={parallel}"), "smoothing.n_values=1,3".into(), "smoothing.n_samples=3".into()];
            if matches!(command, "evaluate" | "smoothing") {
                extra.push(format!("input.checkpoint={}", ckpt.display()));
            }
            let code = cli(command, &out, &extra);
            (code, dir_contents(&out))
        };
        let (c1, first) = run(true);
        std::fs::remove_dir_all(root.path().join(format!("{command}-true"))).unwrap();
        let (c2, second) = run(true);
        let (c3, sequential) = run(false);
        let same = c1 == 0 && c2 == 0 && c3 == 0 && first == second;
        let results = |files: &[(String, Vec<u8>)]| files.iter().filter(|(n, _)| n != "config.txt").cloned().collect::<Vec<_>>();
        let parallel_same = results(&second) == results(&sequential);
        ok &= same && parallel_same;
        detail.push(format!("{command}: {} files rerun-identical {same}, parallel == sequential {parallel_same}", first.len()));
    }
    let detail = detail.join("; ");
    report(11, "determinism", ok, &detail);
    assert!(ok, "{detail}");
}

fn table_rows(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path).unwrap().lines().skip(1).map(|l| l.split(',').map(str::to_string).collect()).collect()
}

#[test]
fn criterion_12_ablation_grids() {
    let root = tempfile::tempdir().unwrap();
    let xy_code = cli("ablate-xy", &root.path().join("xy"), &[]);
    let lambda_code = cli("ablate-lambda", &root.path().join("lambda"), &["ablate.lambdas=1/16,1/32,1/64,1/128,1/256,1/512".into()]);
    let xy = table_rows(&root.path().join("xy/ablate_xy.csv"));
    let lambda = table_rows(&root.path().join("lambda/ablate_lambda.csv"));
    let finite = |rows: &[Vec<String>]| rows.iter().all(|r| r[1..].iter().all(|c| c.parse::<f64>().is_ok_and(|v| (0.0..=100.0).contains(&v))));
    let xy_ids: Vec<&str> = xy.iter().map(|r| r[0].as_str()).collect();
    let lambda_ids: Vec<&str> = lambda.iter().map(|r| r[0].as_str()).collect();
    let expected_lambdas: Vec<String> = (4..=9).map(|k| format!("lambda={}", 1.0 / (1u64 << k) as f64)).collect();
    let pass = xy_code == 0
        && lambda_code == 0
        && xy.len() == 4
        && lambda.len() == 6
        && finite(&xy)
        && finite(&lambda)
        && xy_ids == ["X=t_prime Y=t_prime", "X=t_prime Y=t", "X=t Y=t_prime", "X=t Y=t"]
        && lambda_ids == expected_lambdas.iter().map(String::as_str).collect::<Vec<_>>();
    let detail = format!("ablate-xy rows {xy_ids:?}; ablate-lambda rows {lambda_ids:?}");
    report(12, "ablation harness", pass, &detail);
    assert!(pass, "{detail}");
}

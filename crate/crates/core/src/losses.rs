//! Contrastive, cross-entropy, KL, margin and attack-distance objectives.
//!
//! Each loss has a graph builder (`*_node`) for training and attacks, plus a
//! tensor-level helper that evaluates it once.

use crate::autodiff::{forward, Bindings, Mode};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::{Element, Tensor};

/// Added to excluded similarity logits; exp() of it underflows to exactly zero.
pub const MASK: f64 = 1e6;

/// One anchor with explicit positive and negative vectors.
#[derive(Debug, Clone)]
pub struct ContrastiveBatch {
    pub anchor: Vec<f64>,
    pub positives: Vec<Vec<f64>>,
    pub negatives: Vec<Vec<f64>>,
    pub temperature: f64,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn lse(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Multi-positive contrastive loss of a single anchor, evaluated directly.
pub fn nt_xent(cb: &ContrastiveBatch) -> Result<f64> {
    if !(cb.temperature > 0.0) {
        return Err(Error::Invalid(format!("temperature {} must be positive", cb.temperature)));
    }
    if cb.positives.is_empty() {
        return Err(Error::Invalid("positive set is empty".into()));
    }
    if cb.negatives.is_empty() {
        return Err(Error::Invalid("negative set is empty".into()));
    }
    let d = cb.anchor.len();
    let all = std::iter::once(&cb.anchor).chain(&cb.positives).chain(&cb.negatives);
    for v in all {
        if v.len() != d {
            return Err(Error::Invalid(format!("vector of dimension {} among dimension {d}", v.len())));
        }
        if v.iter().all(|&x| x == 0.0) {
            return Err(Error::Invalid("zero-norm vector has no cosine similarity".into()));
        }
    }
    let pos: Vec<f64> = cb.positives.iter().map(|p| cosine(&cb.anchor, p) / cb.temperature).collect();
    let mut both = pos.clone();
    both.extend(cb.negatives.iter().map(|n| cosine(&cb.anchor, n) / cb.temperature));
    Ok(lse(&both) - lse(&pos))
}

/// Rows of a stacked embedding matrix that each anchor contrasts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnchorTerm {
    pub row: usize,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContrastiveLayout {
    pub rows: usize,
    pub anchors: Vec<AnchorTerm>,
}

/// How `m` samples with `V` views each are stacked into rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViewOrder {
    /// Row `i * V + v`, as in a `[m, V, d]` tensor.
    SampleMajor,
    /// Row `v * m + i`, as when whole view batches are concatenated.
    ViewMajor,
}

impl ContrastiveLayout {
    /// `positive_mask[a][b]` marks view `b` as a positive of anchor view `a`;
    /// views with an empty row are not anchors. Negatives of every anchor are
    /// the views of all other samples for which `negative_views` is true.
    pub fn from_views(
        m: usize,
        views: usize,
        positive_mask: &[Vec<bool>],
        negative_views: &[bool],
        order: ViewOrder,
    ) -> Result<Self> {
        if m < 2 {
            return Err(Error::Invalid(format!("contrastive batch needs at least 2 samples, got {m}")));
        }
        if positive_mask.len() != views || positive_mask.iter().any(|r| r.len() != views) || negative_views.len() != views {
            return Err(Error::Invalid(format!("masks must be {views}x{views} and {views} long")));
        }
        if (0..views).any(|v| positive_mask[v][v]) {
            return Err(Error::Invalid("a view cannot be its own positive".into()));
        }
        if !negative_views.iter().any(|&b| b) {
            return Err(Error::Invalid("no view is allowed as a negative".into()));
        }
        let row = |i: usize, v: usize| match order {
            ViewOrder::SampleMajor => i * views + v,
            ViewOrder::ViewMajor => v * m + i,
        };
        let mut anchors = Vec::new();
        for (a, mask) in positive_mask.iter().enumerate() {
            if !mask.iter().any(|&b| b) {
                continue;
            }
            for i in 0..m {
                let positives = (0..views).filter(|&b| mask[b]).map(|b| row(i, b)).collect();
                let negatives = (0..m)
                    .filter(|&j| j != i)
                    .flat_map(|j| (0..views).filter(|&b| negative_views[b]).map(move |b| (j, b)))
                    .map(|(j, b)| row(j, b))
                    .collect();
                anchors.push(AnchorTerm { row: row(i, a), positives, negatives });
            }
        }
        if anchors.is_empty() {
            return Err(Error::Invalid("positive mask selects no anchor".into()));
        }
        Ok(ContrastiveLayout { rows: m * views, anchors })
    }

    /// Every view is an anchor with all other views of its sample as positives.
    pub fn all_pairs(m: usize, views: usize, order: ViewOrder) -> Result<Self> {
        let mask: Vec<Vec<bool>> = (0..views).map(|a| (0..views).map(|b| a != b).collect()).collect();
        Self::from_views(m, views, &mask, &vec![true; views], order)
    }

    fn validate(&self) -> Result<()> {
        for a in &self.anchors {
            let all = std::iter::once(&a.row).chain(&a.positives).chain(&a.negatives);
            if all.clone().any(|&r| r >= self.rows) {
                return Err(Error::Invalid(format!("anchor row {} references a row outside 0..{}", a.row, self.rows)));
            }
            if a.positives.is_empty() || a.negatives.is_empty() {
                return Err(Error::Invalid(format!("anchor row {} needs positives and negatives", a.row)));
            }
            if a.positives.contains(&a.row) || a.negatives.contains(&a.row) {
                return Err(Error::Invalid(format!("anchor row {} appears in its own contrast set", a.row)));
            }
        }
        Ok(())
    }
}

/// Mean contrastive loss over the anchors of `layout`, for embeddings `z: [rows, d]`.
pub fn contrastive_node(g: &mut Graph, z: NodeId, layout: &ContrastiveLayout, temperature: f64) -> Result<NodeId> {
    layout.validate()?;
    if !(temperature > 0.0) {
        return Err(Error::Invalid(format!("temperature {temperature} must be positive")));
    }
    let n = layout.rows;
    if g.shape(z).len() != 2 || g.shape(z)[0] != n {
        return Err(Error::Invalid(format!("embeddings {:?} do not have {n} rows", g.shape(z))));
    }
    let a = layout.anchors.len();
    let mut select = vec![0.0; a * n];
    let mut pos_mask = vec![-MASK; a * n];
    let mut all_mask = vec![-MASK; a * n];
    for (k, term) in layout.anchors.iter().enumerate() {
        select[k * n + term.row] = 1.0;
        for &p in &term.positives {
            pos_mask[k * n + p] = 0.0;
            all_mask[k * n + p] = 0.0;
        }
        for &q in &term.negatives {
            all_mask[k * n + q] = 0.0;
        }
    }
    let zn = g.l2_normalize(z)?;
    let sel = g.constant(&[a, n], select)?;
    let za = g.matmul(sel, zn)?;
    let sim = g.matmul_t(za, zn, false, true)?;
    let logits = g.mul_scalar(sim, 1.0 / temperature)?;
    let pm = g.constant(&[a, n], pos_mask)?;
    let am = g.constant(&[a, n], all_mask)?;
    let lp = g.add(logits, pm)?;
    let la = g.add(logits, am)?;
    let lse_pos = g.log_sum_exp(lp, 1)?;
    let lse_all = g.log_sum_exp(la, 1)?;
    let per_anchor = g.sub(lse_all, lse_pos)?;
    Ok(g.mean(per_anchor, None)?)
}

/// Single-anchor loss over nodes `anchor: [1, d]`, `positives: [P, d]`, `negatives: [N, d]`.
pub fn nt_xent_node(g: &mut Graph, anchor: NodeId, positives: NodeId, negatives: NodeId, temperature: f64) -> Result<NodeId> {
    let (p, q) = (g.shape(positives)[0], g.shape(negatives)[0]);
    let z = g.concat(&[anchor, positives, negatives], 0)?;
    let layout = ContrastiveLayout {
        rows: 1 + p + q,
        anchors: vec![AnchorTerm { row: 0, positives: (1..=p).collect(), negatives: (p + 1..=p + q).collect() }],
    };
    contrastive_node(g, z, &layout, temperature)
}

fn eval_scalar<T: Element>(g: &Graph, out: NodeId, bindings: &Bindings<'_, T>) -> Result<f64> {
    Ok(forward(g, bindings, Mode::Eval)?.value(out).item().as_f64())
}

/// Contrastive loss of stacked embeddings under an explicit layout.
pub fn contrastive_loss<T: Element>(z: &Tensor<T>, layout: &ContrastiveLayout, temperature: f64) -> Result<f64> {
    let mut g = Graph::new();
    let zn = g.leaf("z", z.shape())?;
    let out = contrastive_node(&mut g, zn, layout, temperature)?;
    eval_scalar(&g, out, &[("z", z)].into())
}

/// Mean contrastive loss over anchors of `z_views: [m, V, d]`; negatives are all views of other samples.
pub fn batch_nt_xent<T: Element>(z_views: &Tensor<T>, positive_mask: &[Vec<bool>], temperature: f64) -> Result<f64> {
    let s = z_views.shape();
    if s.len() != 3 {
        return Err(Error::Invalid(format!("expected [m, V, d], got {s:?}")));
    }
    if s[1] < 2 {
        return Err(Error::Invalid(format!("need at least 2 views, got {}", s[1])));
    }
    let layout = ContrastiveLayout::from_views(s[0], s[1], positive_mask, &vec![true; s[1]], ViewOrder::SampleMajor)?;
    let flat = z_views.clone().reshape(&[s[0] * s[1], s[2]])?;
    contrastive_loss(&flat, &layout, temperature)
}

fn one_hot(labels: &[usize], classes: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0; labels.len() * classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::Invalid(format!("label {y} outside 0..{classes}")));
        }
        out[i * classes + y] = 1.0;
    }
    Ok(out)
}

fn check_logits(g: &Graph, logits: NodeId, labels: &[usize]) -> Result<(usize, usize)> {
    let s = g.shape(logits);
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::Invalid(format!("logits {s:?} do not match {} labels", labels.len())));
    }
    Ok((s[0], s[1]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

fn reduce(g: &mut Graph, x: NodeId, reduction: Reduction) -> Result<NodeId> {
    Ok(match reduction {
        Reduction::Mean => g.mean(x, None)?,
        Reduction::Sum => g.sum(x, None)?,
    })
}

/// Softmax cross-entropy of `logits: [m, C]`.
pub fn cross_entropy_node(g: &mut Graph, logits: NodeId, labels: &[usize], reduction: Reduction) -> Result<NodeId> {
    let (m, c) = check_logits(g, logits, labels)?;
    let y = g.constant(&[m, c], one_hot(labels, c)?)?;
    let lsm = g.log_softmax(logits)?;
    let picked = g.mul(lsm, y)?;
    let per = g.sum(picked, Some(1))?;
    let neg = g.neg(per)?;
    reduce(g, neg, reduction)
}

pub fn cross_entropy<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    let mut g = Graph::new();
    let l = g.leaf("logits", logits.shape())?;
    let out = cross_entropy_node(&mut g, l, labels, Reduction::Mean)?;
    eval_scalar(&g, out, &[("logits", logits)].into())
}

/// KL(softmax(p) || softmax(q)) summed over classes, reduced over rows.
pub fn kl_node(g: &mut Graph, p: NodeId, q: NodeId, reduction: Reduction) -> Result<NodeId> {
    if g.shape(p) != g.shape(q) || g.shape(p).len() != 2 {
        return Err(Error::Invalid(format!("kl shapes {:?} and {:?} differ", g.shape(p), g.shape(q))));
    }
    let lp = g.log_softmax(p)?;
    let lq = g.log_softmax(q)?;
    let pp = g.exp(lp)?;
    let diff = g.sub(lp, lq)?;
    let prod = g.mul(pp, diff)?;
    let per = g.sum(prod, Some(1))?;
    reduce(g, per, reduction)
}

pub fn kl_divergence<T: Element>(logits_p: &Tensor<T>, logits_q: &Tensor<T>) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.leaf("p", logits_p.shape())?;
    let q = g.leaf("q", logits_q.shape())?;
    let out = kl_node(&mut g, p, q, Reduction::Mean)?;
    eval_scalar(&g, out, &[("p", logits_p), ("q", logits_q)].into())
}

/// `max(logit_y - max_{c != y} logit_c, -kappa)` per row, reduced.
pub fn cw_margin_node(g: &mut Graph, logits: NodeId, labels: &[usize], kappa: f64, reduction: Reduction) -> Result<NodeId> {
    let (m, c) = check_logits(g, logits, labels)?;
    if c < 2 {
        return Err(Error::Invalid("margin needs at least two classes".into()));
    }
    let hot = one_hot(labels, c)?;
    let y = g.constant(&[m, c], hot.clone())?;
    let push_down = g.constant(&[m, c], hot.iter().map(|&h| -MASK * h).collect())?;
    let picked = g.mul(logits, y)?;
    let true_logit = g.sum(picked, Some(1))?;
    let others = g.add(logits, push_down)?;
    let best_other = g.max(others, Some(1))?;
    let margin = g.sub(true_logit, best_other)?;
    let floor = g.constant(&[m, 1], vec![-kappa; m])?;
    let both = g.concat(&[margin, floor], 1)?;
    let clipped = g.max(both, Some(1))?;
    reduce(g, clipped, reduction)
}

pub fn cw_margin<T: Element>(logits: &Tensor<T>, labels: &[usize], kappa: f64) -> Result<f64> {
    let mut g = Graph::new();
    let l = g.leaf("logits", logits.shape())?;
    let out = cw_margin_node(&mut g, l, labels, kappa, Reduction::Mean)?;
    eval_scalar(&g, out, &[("logits", logits)].into())
}

/// What an instance-wise attack ascends.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistanceKind {
    Mse,
    Cosine,
    Manhattan,
    Contrastive,
}

impl DistanceKind {
    pub fn name(self) -> &'static str {
        match self {
            DistanceKind::Mse => "mse",
            DistanceKind::Cosine => "cosine",
            DistanceKind::Manhattan => "manhattan",
            DistanceKind::Contrastive => "contrastive",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mse" => Some(DistanceKind::Mse),
            "cosine" => Some(DistanceKind::Cosine),
            "manhattan" => Some(DistanceKind::Manhattan),
            "contrastive" => Some(DistanceKind::Contrastive),
            _ => None,
        }
    }
}

/// Row-wise pair distance between `z` and `z_ref` (both `[m, d]`), reduced over rows.
/// The contrastive kind needs negatives and goes through [`contrastive_node`].
pub fn pair_distance_node(g: &mut Graph, kind: DistanceKind, z: NodeId, z_ref: NodeId, reduction: Reduction) -> Result<NodeId> {
    if g.shape(z) != g.shape(z_ref) || g.shape(z).len() != 2 {
        return Err(Error::Invalid(format!("distance shapes {:?} and {:?} differ", g.shape(z), g.shape(z_ref))));
    }
    let per_row = match kind {
        DistanceKind::Mse => {
            let d = g.sub(z, z_ref)?;
            let sq = g.mul(d, d)?;
            g.mean(sq, Some(1))?
        }
        DistanceKind::Manhattan => {
            let d = g.sub(z, z_ref)?;
            let nd = g.neg(d)?;
            let (a, b) = (g.relu(d)?, g.relu(nd)?);
            let abs = g.add(a, b)?;
            g.mean(abs, Some(1))?
        }
        DistanceKind::Cosine => {
            let (a, b) = (g.l2_normalize(z)?, g.l2_normalize(z_ref)?);
            let prod = g.mul(a, b)?;
            let cos = g.sum(prod, Some(1))?;
            g.neg(cos)?
        }
        DistanceKind::Contrastive => return Err(Error::Invalid("contrastive distance needs negatives".into())),
    };
    reduce(g, per_row, reduction)
}

/// Scalar an instance-wise attack ascends for one embedding.
pub fn attack_distance(kind: DistanceKind, z: &[f64], z_ref: &[f64], negatives: &[Vec<f64>], temperature: f64) -> Result<f64> {
    if z.len() != z_ref.len() {
        return Err(Error::Invalid(format!("dimensions {} and {} differ", z.len(), z_ref.len())));
    }
    let n = z.len() as f64;
    Ok(match kind {
        DistanceKind::Mse => z.iter().zip(z_ref).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n,
        DistanceKind::Manhattan => z.iter().zip(z_ref).map(|(a, b)| (a - b).abs()).sum::<f64>() / n,
        DistanceKind::Cosine => -cosine(z, z_ref),
        DistanceKind::Contrastive => nt_xent(&ContrastiveBatch {
            anchor: z.to_vec(),
            positives: vec![z_ref.to_vec()],
            negatives: negatives.to_vec(),
            temperature,
        })?,
    })
}

//! Encoder, projection head and linear classifier over named parameters.

use std::collections::BTreeMap;
use std::fmt;

use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::autodiff::{forward, BatchStats, Bindings, Mode};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::rng::{rng_from, stream};
use crate::tensor::Tensor;
use crate::Real;

pub const BN_EPS: f64 = 1e-5;
/// Weight given to the old running statistic on each update.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EncoderArch {
    /// Fully connected layers with relu, on the flattened image.
    Mlp { widths: Vec<usize> },
    /// One conv3x3 -> batch norm -> relu -> 2x2 average pool block per entry,
    /// then global average pooling.
    SmallCnn { channels: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub encoder: EncoderArch,
    /// `(C, H, W)`.
    pub input_dims: (usize, usize, usize),
    pub projection_dim: usize,
    pub num_classes: usize,
}

/// Which network a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Component {
    /// Encoder f.
    Theta,
    /// Projection head g.
    Pi,
    /// Linear classifier l.
    Psi,
}

impl Component {
    pub fn tag(self) -> &'static str {
        match self {
            Component::Theta => "theta",
            Component::Pi => "pi",
            Component::Psi => "psi",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "theta" => Some(Component::Theta),
            "pi" => Some(Component::Pi),
            "psi" => Some(Component::Psi),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    BnScale,
    BnShift,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    /// Running statistics are buffers, never touched by the optimizer.
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }

    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Weight | ParamKind::Bias)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub component: Component,
    pub kind: ParamKind,
    /// Fan-in used for He initialization of weights.
    pub fan_in: usize,
}

impl ModelConfig {
    /// Desk-scale default: three conv blocks on 16x16 RGB input.
    pub fn toy() -> Self {
        ModelConfig {
            encoder: EncoderArch::SmallCnn { channels: vec![8, 16, 32] },
            input_dims: (3, 16, 16),
            projection_dim: 32,
            num_classes: 2,
        }
    }

    pub fn feature_dim(&self) -> usize {
        match &self.encoder {
            EncoderArch::Mlp { widths } => *widths.last().unwrap_or(&0),
            EncoderArch::SmallCnn { channels } => *channels.last().unwrap_or(&0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (c, h, w) = self.input_dims;
        let bad = |msg: String| Err(Error::Invalid(msg));
        if c == 0 || h == 0 || w == 0 {
            return bad(format!("input_dims {:?} must be positive", self.input_dims));
        }
        if self.projection_dim == 0 || self.num_classes == 0 {
            return bad("projection_dim and num_classes must be positive".into());
        }
        match &self.encoder {
            EncoderArch::Mlp { widths } => {
                if widths.is_empty() || widths.contains(&0) {
                    return bad(format!("mlp widths {widths:?} must be nonempty and positive"));
                }
            }
            EncoderArch::SmallCnn { channels } => {
                if channels.is_empty() || channels.contains(&0) {
                    return bad(format!("cnn channels {channels:?} must be nonempty and positive"));
                }
                let div = 1usize << channels.len();
                if h % div != 0 || w % div != 0 {
                    return bad(format!("input {h}x{w} is not divisible by {div} for {} pooling blocks", channels.len()));
                }
            }
        }
        Ok(())
    }

    /// Every parameter and buffer in canonical order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, component, kind, fan_in| {
            out.push(ParamSpec { name, shape, component, kind, fan_in });
        };
        let (c, h, w) = self.input_dims;
        match &self.encoder {
            EncoderArch::Mlp { widths } => {
                let mut prev = c * h * w;
                for (i, &width) in widths.iter().enumerate() {
                    push(format!("enc.fc{i}.weight"), vec![prev, width], Component::Theta, ParamKind::Weight, prev);
                    push(format!("enc.fc{i}.bias"), vec![width], Component::Theta, ParamKind::Bias, prev);
                    prev = width;
                }
            }
            EncoderArch::SmallCnn { channels } => {
                let mut prev = c;
                for (i, &ch) in channels.iter().enumerate() {
                    push(format!("enc.conv{i}.weight"), vec![ch, prev, 3, 3], Component::Theta, ParamKind::Weight, prev * 9);
                    for (suffix, kind) in [
                        ("scale", ParamKind::BnScale),
                        ("shift", ParamKind::BnShift),
                        ("running_mean", ParamKind::RunningMean),
                        ("running_var", ParamKind::RunningVar),
                    ] {
                        push(format!("enc.bn{i}.{suffix}"), vec![ch], Component::Theta, kind, ch);
                    }
                    prev = ch;
                }
            }
        }
        let f = self.feature_dim();
        let p = self.projection_dim;
        push("proj.fc0.weight".into(), vec![f, f], Component::Pi, ParamKind::Weight, f);
        push("proj.fc0.bias".into(), vec![f], Component::Pi, ParamKind::Bias, f);
        push("proj.fc1.weight".into(), vec![f, p], Component::Pi, ParamKind::Weight, f);
        push("proj.fc1.bias".into(), vec![p], Component::Pi, ParamKind::Bias, f);
        push("head.weight".into(), vec![f, self.num_classes], Component::Psi, ParamKind::Weight, f);
        push("head.bias".into(), vec![self.num_classes], Component::Psi, ParamKind::Bias, f);
        out
    }

    /// Flat `model.*` key/value pairs, shared by config files and checkpoints.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let (kind, layers) = match &self.encoder {
            EncoderArch::Mlp { widths } => ("mlp", join(widths)),
            EncoderArch::SmallCnn { channels } => ("small_cnn", join(channels)),
        };
        let (c, h, w) = self.input_dims;
        vec![
            ("model.encoder".into(), kind.into()),
            ("model.layers".into(), layers),
            ("model.input_dims".into(), join(&[c, h, w])),
            ("model.projection_dim".into(), self.projection_dim.to_string()),
            ("model.num_classes".into(), self.num_classes.to_string()),
        ]
    }

    /// Inverse of [`ModelConfig::to_pairs`]; missing keys fall back to [`ModelConfig::toy`].
    pub fn from_pairs(pairs: &BTreeMap<String, String>) -> Result<Self> {
        let base = ModelConfig::toy();
        let list = |key: &str| -> Result<Option<Vec<usize>>> {
            pairs
                .get(key)
                .map(|v| {
                    v.split(',')
                        .map(|s| s.trim().parse::<usize>().map_err(|_| Error::Invalid(format!("{key}: bad integer list `{v}`"))))
                        .collect()
                })
                .transpose()
        };
        let int = |key: &str, default: usize| -> Result<usize> {
            pairs.get(key).map_or(Ok(default), |v| v.trim().parse().map_err(|_| Error::Invalid(format!("{key}: bad integer `{v}`"))))
        };
        let layers = list("model.layers")?;
        let encoder = match pairs.get("model.encoder").map(|s| s.trim()) {
            None | Some("small_cnn") => match layers {
                Some(channels) => EncoderArch::SmallCnn { channels },
                None => base.encoder.clone(),
            },
            Some("mlp") => EncoderArch::Mlp { widths: layers.unwrap_or_else(|| vec![64, 64]) },
            Some(other) => return Err(Error::Invalid(format!("model.encoder: unknown architecture `{other}`"))),
        };
        let input_dims = match list("model.input_dims")? {
            Some(d) if d.len() == 3 => (d[0], d[1], d[2]),
            Some(d) => return Err(Error::Invalid(format!("model.input_dims: expected C,H,W, got {d:?}"))),
            None => base.input_dims,
        };
        let cfg = ModelConfig {
            encoder,
            input_dims,
            projection_dim: int("model.projection_dim", base.projection_dim)?,
            num_classes: int("model.num_classes", base.num_classes)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parameters and batch-norm buffers keyed by name.
#[derive(Clone, PartialEq)]
pub struct ModelParams {
    specs: Vec<ParamSpec>,
    values: BTreeMap<String, Tensor>,
}

impl fmt::Debug for ModelParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_map().entries(self.specs.iter().map(|s| (&s.name, &s.shape))).finish()
    }
}

impl ModelParams {
    /// He-normal weights, zero biases, unit BN scale, zero shift, unit running variance.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let specs = config.param_specs();
        let mut values = BTreeMap::new();
        for (i, spec) in specs.iter().enumerate() {
            let n: usize = spec.shape.iter().product();
            let data: Vec<Real> = match spec.kind {
                ParamKind::Weight => {
                    let std = (2.0 / spec.fan_in as f64).sqrt();
                    let normal = Normal::new(0.0, std).expect("positive std");
                    let mut rng = rng_from(&[stream::INIT, seed, i as u64]);
                    (0..n).map(|_| normal.sample(&mut rng) as Real).collect()
                }
                ParamKind::BnScale | ParamKind::RunningVar => vec![1.0; n],
                ParamKind::Bias | ParamKind::BnShift | ParamKind::RunningMean => vec![0.0; n],
            };
            values.insert(spec.name.clone(), Tensor::new(spec.shape.clone(), data)?);
        }
        Ok(ModelParams { specs, values })
    }

    /// Assemble from loaded tensors, checking names and shapes against the config.
    pub fn from_tensors(config: &ModelConfig, mut tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        let specs = config.param_specs();
        let mut values = BTreeMap::new();
        for spec in &specs {
            let t = tensors.remove(&spec.name).ok_or_else(|| Error::Invalid(format!("missing parameter `{}`", spec.name)))?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::Invalid(format!("parameter `{}` has shape {:?}, expected {:?}", spec.name, t.shape(), spec.shape)));
            }
            values.insert(spec.name.clone(), t);
        }
        if let Some(name) = tensors.keys().next() {
            return Err(Error::Invalid(format!("orphan parameter `{name}`")));
        }
        Ok(ModelParams { specs, values })
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.values.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.values.get_mut(name)
    }

    pub fn spec(&self, name: &str) -> Option<&ParamSpec> {
        self.specs.iter().find(|s| s.name == name)
    }

    /// Trainable parameter names of the given components, in canonical order.
    pub fn trainable(&self, components: &[Component]) -> Vec<String> {
        self.specs
            .iter()
            .filter(|s| s.kind.trainable() && components.contains(&s.component))
            .map(|s| s.name.clone())
            .collect()
    }

    pub fn bind<'a>(&'a self, bindings: &mut Bindings<'a, Real>) {
        for (name, t) in &self.values {
            bindings.insert(name.as_str(), t);
        }
    }

    pub fn bindings(&self) -> Bindings<'_, Real> {
        let mut b = Bindings::new();
        self.bind(&mut b);
        b
    }

    /// Fold train-mode batch statistics into the running buffers (unbiased variance).
    pub fn update_running_stats(&mut self, stats: &[BatchStats<Real>]) {
        let m = BN_MOMENTUM as Real;
        for s in stats {
            let unbias = if s.count > 1 { s.count as Real / (s.count - 1) as Real } else { 1.0 };
            if let Some(t) = s.running_mean.as_ref().and_then(|n| self.values.get_mut(n)) {
                for (r, &b) in t.data_mut().iter_mut().zip(&s.mean) {
                    *r = m * *r + (1.0 - m) * b;
                }
            }
            if let Some(t) = s.running_var.as_ref().and_then(|n| self.values.get_mut(n)) {
                for (r, &b) in t.data_mut().iter_mut().zip(&s.var) {
                    *r = m * *r + (1.0 - m) * b * unbias;
                }
            }
        }
    }

    /// SHA-256 over names and raw bytes of every tensor (buffers included) in the components.
    pub fn digest(&self, components: &[Component]) -> [u8; 32] {
        let mut h = Sha256::new();
        for spec in self.specs.iter().filter(|s| components.contains(&s.component)) {
            h.update(spec.name.as_bytes());
            for v in self.values[&spec.name].data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().into()
    }

    /// Replace every tensor of one component with those of `other`.
    pub fn copy_component(&mut self, other: &ModelParams, component: Component) {
        for spec in self.specs.iter().filter(|s| s.component == component) {
            if let Some(t) = other.values.get(&spec.name) {
                self.values.insert(spec.name.clone(), t.clone());
            }
        }
    }
}

fn param(g: &mut Graph, spec: &ParamSpec) -> Result<NodeId> {
    match g.leaf_id(&spec.name) {
        Some(id) => Ok(id),
        None => Ok(g.leaf(&spec.name, &spec.shape)?),
    }
}

/// Graph builder bound to one configuration.
pub struct Net<'a> {
    config: &'a ModelConfig,
    specs: BTreeMap<String, ParamSpec>,
}

impl<'a> Net<'a> {
    pub fn new(config: &'a ModelConfig) -> Self {
        let specs = config.param_specs().into_iter().map(|s| (s.name.clone(), s)).collect();
        Net { config, specs }
    }

    fn p(&self, g: &mut Graph, name: &str) -> Result<NodeId> {
        param(g, &self.specs[name])
    }

    /// Image input leaf of shape `[m, C, H, W]`.
    pub fn input(&self, g: &mut Graph, name: &str, m: usize) -> Result<NodeId> {
        let (c, h, w) = self.config.input_dims;
        Ok(g.leaf(name, &[m, c, h, w])?)
    }

    /// `[m, C, H, W]` to features `[m, feature_dim]`.
    pub fn encoder(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let m = g.shape(x)[0];
        match &self.config.encoder {
            EncoderArch::Mlp { widths } => {
                let (c, h, w) = self.config.input_dims;
                let mut cur = g.reshape(x, &[m, c * h * w])?;
                for i in 0..widths.len() {
                    let wt = self.p(g, &format!("enc.fc{i}.weight"))?;
                    let b = self.p(g, &format!("enc.fc{i}.bias"))?;
                    let a = g.affine(cur, wt, b)?;
                    cur = g.relu(a)?;
                }
                Ok(cur)
            }
            EncoderArch::SmallCnn { channels } => {
                let mut cur = x;
                for i in 0..channels.len() {
                    let k = self.p(g, &format!("enc.conv{i}.weight"))?;
                    let conv = g.conv2d(cur, k, 1, 1)?;
                    let bn: Vec<NodeId> = ["scale", "shift", "running_mean", "running_var"]
                        .iter()
                        .map(|s| self.p(g, &format!("enc.bn{i}.{s}")))
                        .collect::<Result<_>>()?;
                    let n = g.batch_norm(conv, bn[0], bn[1], bn[2], bn[3], BN_EPS)?;
                    let r = g.relu(n)?;
                    cur = g.avg_pool2(r)?;
                }
                Ok(g.global_avg_pool(cur)?)
            }
        }
    }

    /// Two affine layers with relu between; the output is not normalized.
    pub fn projector(&self, g: &mut Graph, h: NodeId) -> Result<NodeId> {
        let (w0, b0) = (self.p(g, "proj.fc0.weight")?, self.p(g, "proj.fc0.bias")?);
        let (w1, b1) = (self.p(g, "proj.fc1.weight")?, self.p(g, "proj.fc1.bias")?);
        let a = g.affine(h, w0, b0)?;
        let r = g.relu(a)?;
        Ok(g.affine(r, w1, b1)?)
    }

    pub fn head(&self, g: &mut Graph, h: NodeId) -> Result<NodeId> {
        let (w, b) = (self.p(g, "head.weight")?, self.p(g, "head.bias")?);
        Ok(g.affine(h, w, b)?)
    }
}

/// Configuration plus parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = ModelParams::init(&config, seed)?;
        Ok(Model { config, params })
    }

    pub fn net(&self) -> Net<'_> {
        Net::new(&self.config)
    }

    fn check_batch(&self, batch: &Tensor) -> Result<()> {
        let (c, h, w) = self.config.input_dims;
        let s = batch.shape();
        if s.len() != 4 || s[1..] != [c, h, w] || s[0] == 0 {
            return Err(Error::Invalid(format!("batch shape {s:?} does not match input dims {:?}", self.config.input_dims)));
        }
        Ok(())
    }

    fn run(&self, input: &Tensor, build: impl FnOnce(&Net<'_>, &mut Graph, NodeId) -> Result<NodeId>, mode: Mode) -> Result<Tensor> {
        let net = self.net();
        let mut g = Graph::new();
        let x = g.leaf("input", input.shape())?;
        let out = build(&net, &mut g, x)?;
        let mut b = self.params.bindings();
        b.insert("input", input);
        Ok(forward(&g, &b, mode)?.take(out))
    }

    /// Features `[m, feature_dim]`; running statistics are read in eval mode and never written.
    pub fn encode(&self, batch: &Tensor, mode: Mode) -> Result<Tensor> {
        self.check_batch(batch)?;
        self.run(batch, |net, g, x| net.encoder(g, x), mode)
    }

    pub fn project(&self, h: &Tensor) -> Result<Tensor> {
        self.check_features(h)?;
        self.run(h, |net, g, x| net.projector(g, x), Mode::Eval)
    }

    pub fn classify(&self, h: &Tensor) -> Result<Tensor> {
        self.check_features(h)?;
        self.run(h, |net, g, x| net.head(g, x), Mode::Eval)
    }

    /// Class logits for images, in the given batch-norm mode.
    pub fn logits(&self, batch: &Tensor, mode: Mode) -> Result<Tensor> {
        self.check_batch(batch)?;
        self.run(
            batch,
            |net, g, x| {
                let h = net.encoder(g, x)?;
                net.head(g, h)
            },
            mode,
        )
    }

    /// Argmax class per image in eval mode.
    pub fn predict(&self, batch: &Tensor) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.logits(batch, Mode::Eval)?))
    }

    fn check_features(&self, h: &Tensor) -> Result<()> {
        let s = h.shape();
        if s.len() != 2 || s[1] != self.config.feature_dim() {
            return Err(Error::Invalid(format!("feature shape {s:?} does not match feature_dim {}", self.config.feature_dim())));
        }
        Ok(())
    }
}

/// Index of the largest entry of each row; ties go to the lowest index.
pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    let c = t.shape()[1];
    t.data()
        .chunks(c)
        .map(|row| {
            row.iter().enumerate().fold(0, |best, (i, &v)| if v > row[best] { i } else { best })
        })
        .collect()
}

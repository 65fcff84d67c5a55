//! Datasets: CIFAR-10 style binary records and the synthetic toy images.

use std::fs;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{DataError, Error, Result};
use crate::rng::{rng_from, stream};
use crate::tensor::Tensor;
use crate::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[N, C, H, W]` with values in [0, 1].
    pub images: Tensor,
    pub labels: Option<Vec<usize>>,
    pub num_classes: usize,
    pub name: String,
    pub split: String,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Option<Vec<usize>>, num_classes: usize, name: &str, split: &str) -> Result<Self> {
        if images.rank() != 4 {
            return Err(DataError::Invalid(format!("images must be [N, C, H, W], got {:?}", images.shape())).into());
        }
        if images.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(DataError::Invalid("pixel values must lie in [0, 1]".into()).into());
        }
        if let Some(l) = &labels {
            if l.len() != images.shape()[0] {
                return Err(DataError::Invalid(format!("{} labels for {} images", l.len(), images.shape()[0])).into());
            }
            if let Some(bad) = l.iter().find(|&&y| y >= num_classes) {
                return Err(DataError::Invalid(format!("label {bad} outside 0..{num_classes}")).into());
            }
        }
        Ok(Dataset { images, labels, num_classes, name: name.to_string(), split: split.to_string() })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(C, H, W)`.
    pub fn image_dims(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn labels(&self) -> Result<&[usize]> {
        self.labels.as_deref().ok_or_else(|| Error::Invalid(format!("dataset `{}` has no labels", self.name)))
    }

    /// Images at `indices`, stacked.
    pub fn images_at(&self, indices: &[usize]) -> Tensor {
        self.images.select_first(indices)
    }

    pub fn labels_at(&self, indices: &[usize]) -> Result<Vec<usize>> {
        let l = self.labels()?;
        Ok(indices.iter().map(|&i| l[i]).collect())
    }

    /// The first `n` samples.
    pub fn take(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        Dataset {
            images: self.images_at(&idx),
            labels: self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
            num_classes: self.num_classes,
            name: self.name.clone(),
            split: self.split.clone(),
        }
    }
}

/// Parse consecutive records of one label byte followed by `C*H*W` pixel bytes.
pub fn parse_records(bytes: &[u8], path: &Path, dims: (usize, usize, usize), num_classes: usize) -> Result<(Vec<Real>, Vec<usize>)> {
    let pixels = dims.0 * dims.1 * dims.2;
    let record = pixels + 1;
    if bytes.is_empty() {
        return Err(DataError::Empty { path: path.to_path_buf() }.into());
    }
    if bytes.len() % record != 0 {
        return Err(DataError::Truncated {
            path: path.to_path_buf(),
            size: bytes.len(),
            record,
            offset: bytes.len() / record * record,
        }
        .into());
    }
    let n = bytes.len() / record;
    let mut data = Vec::with_capacity(n * pixels);
    let mut labels = Vec::with_capacity(n);
    for (k, rec) in bytes.chunks(record).enumerate() {
        if rec[0] as usize >= num_classes {
            return Err(DataError::Label { path: path.to_path_buf(), label: rec[0], classes: num_classes, offset: k * record }.into());
        }
        labels.push(rec[0] as usize);
        data.extend(rec[1..].iter().map(|&b| b as Real / 255.0));
    }
    Ok((data, labels))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| DataError::Io { path: path.to_path_buf(), source }.into())
}

/// Load binary records of the given image dims from one or more files.
pub fn load_records(paths: &[&Path], dims: (usize, usize, usize), num_classes: usize, name: &str, split: &str) -> Result<Dataset> {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let (d, l) = parse_records(&read(path)?, path, dims, num_classes)?;
        data.extend(d);
        labels.extend(l);
    }
    if labels.is_empty() {
        return Err(DataError::Invalid("no input files".into()).into());
    }
    let images = Tensor::new(vec![labels.len(), dims.0, dims.1, dims.2], data)?;
    Dataset::new(images, Some(labels), num_classes, name, split)
}

/// The official CIFAR-10 binary layout: 3073-byte records, labels 0..=9, 32x32 RGB planes.
pub fn load_cifar10_binary(path: &Path) -> Result<Dataset> {
    load_records(&[path], (3, 32, 32), 10, "cifar10", "train")
}

/// Serialize a labeled dataset as binary records, quantizing pixels to bytes.
pub fn encode_records(dataset: &Dataset) -> Result<Vec<u8>> {
    let labels = dataset.labels()?;
    if dataset.num_classes > 256 {
        return Err(DataError::Invalid("labels must fit in one byte".into()).into());
    }
    let (c, h, w) = dataset.image_dims();
    let per = c * h * w;
    let mut out = Vec::with_capacity(dataset.len() * (per + 1));
    for (i, &y) in labels.iter().enumerate() {
        out.push(y as u8);
        out.extend(dataset.images.data()[i * per..(i + 1) * per].iter().map(|&v| (v * 255.0).round() as u8));
    }
    Ok(out)
}

pub fn save_records(dataset: &Dataset, path: &Path) -> Result<()> {
    fs::write(path, encode_records(dataset)?).map_err(|source| DataError::Io { path: path.to_path_buf(), source }.into())
}

/// Synthetic oriented-bar images: the class sets the orientation of every bar.
#[derive(Debug, Clone, PartialEq)]
pub struct ToySpec {
    pub classes: usize,
    pub samples_per_class: usize,
    pub image_size: usize,
    pub seed: u64,
    /// Bars per image, inclusive range.
    pub bars: (usize, usize),
    /// Per-channel color difference between bar and background, inclusive range.
    pub contrast: (f64, f64),
    /// Standard deviation of additive Gaussian pixel noise.
    pub noise: f64,
    /// Gray background and bars; colored ones let contrastive features key on color alone.
    pub grayscale: bool,
}

impl ToySpec {
    pub fn new(classes: usize, samples_per_class: usize, image_size: usize, seed: u64) -> Self {
        ToySpec { classes, samples_per_class, image_size, seed, bars: (2, 4), contrast: (0.12, 0.38), noise: 0.04, grayscale: true }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.classes > 256 || self.samples_per_class == 0 || self.image_size < 4 {
            return Err(Error::Invalid(format!(
                "toy dataset needs 2..=256 classes, samples and an image size >= 4 (got {}, {}, {})",
                self.classes, self.samples_per_class, self.image_size
            )));
        }
        if self.bars.0 == 0 || self.bars.0 > self.bars.1 || !(0.0..=1.0).contains(&self.contrast.0) || self.contrast.0 > self.contrast.1 || self.contrast.1 > 1.0 || !(self.noise >= 0.0) {
            return Err(Error::Invalid("toy bar count, contrast or noise out of range".into()));
        }
        Ok(())
    }
}

fn render_toy(spec: &ToySpec, class: usize, rng: &mut crate::rng::Rng) -> Vec<Real> {
    let s = spec.image_size;
    let scale = s as f64 / 16.0;
    let gray = spec.grayscale;
    let g0 = rng.gen_range(0.25..0.75);
    let bg: [f64; 3] = std::array::from_fn(|_| if gray { g0 } else { rng.gen_range(0.25..0.75) });
    let mut img: Vec<f64> = (0..3 * s * s).map(|k| bg[k / (s * s)]).collect();
    let angle = std::f64::consts::PI * class as f64 / spec.classes as f64 + rng.gen_range(-0.12..0.12);
    let (dx, dy) = (angle.cos(), angle.sin());
    let n_bars = rng.gen_range(spec.bars.0..=spec.bars.1);
    for _ in 0..n_bars {
        let amp0 = rng.gen_range(spec.contrast.0..=spec.contrast.1);
        let sign0 = if rng.gen::<bool>() { 1.0 } else { -1.0 };
        let color: [f64; 3] = std::array::from_fn(|k| {
            let amp = if gray { amp0 } else { rng.gen_range(spec.contrast.0..=spec.contrast.1) };
            let sign = if gray { sign0 } else if rng.gen::<bool>() { 1.0 } else { -1.0 };
            (bg[k] + sign * amp).clamp(0.0, 1.0)
        });
        let half_len = rng.gen_range(3.0..5.5) * scale;
        let half_width = rng.gen_range(0.7..1.2) * scale;
        let cx = rng.gen_range(0.0..s as f64);
        let cy = rng.gen_range(0.0..s as f64);
        for py in 0..s {
            for px in 0..s {
                let (rx, ry) = (px as f64 + 0.5 - cx, py as f64 + 0.5 - cy);
                let along = rx * dx + ry * dy;
                let across = -rx * dy + ry * dx;
                // Soft one-pixel edge on both axes.
                let a = (half_len + 0.5 - along.abs()).clamp(0.0, 1.0) * (half_width + 0.5 - across.abs()).clamp(0.0, 1.0);
                if a > 0.0 {
                    for k in 0..3 {
                        let v = &mut img[k * s * s + py * s + px];
                        *v = *v * (1.0 - a) + color[k] * a;
                    }
                }
            }
        }
    }
    let noise = Normal::new(0.0, spec.noise.max(1e-12)).expect("valid std");
    img.iter()
        .map(|&v| {
            let n = if spec.noise > 0.0 { noise.sample(rng) } else { 0.0 };
            // Quantized to 8 bits so saved datasets reload bit-exactly.
            ((v + n).clamp(0.0, 1.0) * 255.0).round() as Real / 255.0
        })
        .collect()
}

/// Balanced, shuffled toy dataset; deterministic per spec.
pub fn generate_toy_dataset(spec: &ToySpec) -> Result<Dataset> {
    spec.validate()?;
    let n = spec.classes * spec.samples_per_class;
    let mut order: Vec<usize> = (0..n).map(|i| i % spec.classes).collect();
    let mut rng = rng_from(&[stream::TOY_DATA, spec.seed]);
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
    let s = spec.image_size;
    let mut data = Vec::with_capacity(n * 3 * s * s);
    for (i, &class) in order.iter().enumerate() {
        let mut img_rng = rng_from(&[stream::TOY_DATA, spec.seed, i as u64 + 1]);
        data.extend(render_toy(spec, class, &mut img_rng));
    }
    let images = Tensor::new(vec![n, 3, s, s], data)?;
    Dataset::new(images, Some(order), spec.classes, "toy", "train")
}

/// Train and test splits drawn from disjoint seeds.
pub fn toy_splits(spec: &ToySpec, test_per_class: usize) -> Result<(Dataset, Dataset)> {
    let train = generate_toy_dataset(spec)?;
    let test_spec = ToySpec { samples_per_class: test_per_class, seed: spec.seed ^ 0x7E57_7E57, ..spec.clone() };
    let mut test = generate_toy_dataset(&test_spec)?;
    test.split = "test".into();
    Ok((train, test))
}

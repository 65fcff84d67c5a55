//! Stochastic image transformations: inception crop, horizontal flip, HSV
//! color jitter and grayscale.
//!
//! All randomness lives in [`sample_transform`]; [`apply_transform`] is a pure
//! function of the sampled [`TransformSpec`]. [`transform_vjp`] pulls a
//! gradient on the output back to the input pixels so attacks can take
//! expectations over transformations.

use std::ops::{Add, Div, Mul, Sub};

use rand::Rng as _;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::{rng_from, stream};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JitterStrength {
    pub hue: f64,
    pub brightness: f64,
    pub saturation: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentPolicy {
    /// Crop area as a fraction of the image area, sampled uniformly.
    pub crop_scale: (f64, f64),
    /// Crop width/height ratio, sampled uniformly.
    pub aspect_ratio: (f64, f64),
    pub flip_prob: f64,
    pub jitter_prob: f64,
    pub jitter: JitterStrength,
    pub gray_prob: f64,
}

impl AugmentPolicy {
    /// The contrastive training family: crop 0.08..1.0, flip 0.5, jitter 0.8, grayscale 0.2.
    pub fn simclr() -> Self {
        AugmentPolicy {
            crop_scale: (0.08, 1.0),
            aspect_ratio: (3.0 / 4.0, 4.0 / 3.0),
            flip_prob: 0.5,
            jitter_prob: 0.8,
            jitter: JitterStrength { hue: 0.1, brightness: 0.4, saturation: 0.4 },
            gray_prob: 0.2,
        }
    }

    /// Same family with a fixed 0.54 crop scale, used for smoothed inference.
    pub fn smoothing() -> Self {
        AugmentPolicy { crop_scale: (0.54, 0.54), ..Self::simclr() }
    }

    /// Full-image crop and nothing else.
    pub fn identity() -> Self {
        AugmentPolicy {
            crop_scale: (1.0, 1.0),
            aspect_ratio: (1.0, 1.0),
            flip_prob: 0.0,
            jitter_prob: 0.0,
            jitter: JitterStrength { hue: 0.0, brightness: 0.0, saturation: 0.0 },
            gray_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Invalid(format!("crop scale range ({lo}, {hi}) must satisfy 0 < lo <= hi <= 1")));
        }
        let (rlo, rhi) = self.aspect_ratio;
        if !(rlo > 0.0 && rlo <= rhi) {
            return Err(Error::Invalid(format!("aspect ratio range ({rlo}, {rhi}) is empty")));
        }
        for (name, p) in [("flip", self.flip_prob), ("jitter", self.jitter_prob), ("gray", self.gray_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Invalid(format!("{name} probability {p} outside [0, 1]")));
            }
        }
        let j = self.jitter;
        if [j.hue, j.brightness, j.saturation].iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Invalid("jitter strengths must be non-negative".into()));
        }
        Ok(())
    }
}

/// Crop rectangle in source pixel units (sub-pixel placement allowed).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropRect {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JitterDelta {
    pub hue: f64,
    pub brightness: f64,
    pub saturation: f64,
}

/// One concrete draw from an [`AugmentPolicy`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformSpec {
    pub crop: CropRect,
    pub flip: bool,
    pub jitter: Option<JitterDelta>,
    pub gray: bool,
}

impl TransformSpec {
    pub fn identity(height: usize, width: usize) -> Self {
        TransformSpec {
            crop: CropRect { x: 0.0, y: 0.0, w: width as f64, h: height as f64 },
            flip: false,
            jitter: None,
            gray: false,
        }
    }

    fn full_crop(&self, height: usize, width: usize) -> bool {
        self.crop == CropRect { x: 0.0, y: 0.0, w: width as f64, h: height as f64 }
    }
}

/// Draw a transform for an image of `height x width` pixels.
pub fn sample_transform(policy: &AugmentPolicy, seed: u64, height: usize, width: usize) -> Result<TransformSpec> {
    policy.validate()?;
    if height == 0 || width == 0 {
        return Err(Error::Invalid("image dimensions must be positive".into()));
    }
    let mut rng = rng_from(&[stream::AUGMENT, seed]);
    let (wf, hf) = (width as f64, height as f64);
    let area = wf * hf;
    let uniform = |rng: &mut crate::rng::Rng, (lo, hi): (f64, f64)| if lo == hi { lo } else { rng.gen_range(lo..=hi) };

    let scale = uniform(&mut rng, policy.crop_scale);
    let target = scale * area;
    let mut dims = None;
    for _ in 0..10 {
        let ratio = uniform(&mut rng, policy.aspect_ratio);
        let (w, h) = ((target * ratio).sqrt(), (target / ratio).sqrt());
        if w <= wf && h <= hf {
            dims = Some((w, h));
            break;
        }
    }
    // Fall back to the widest crop of the requested area that fits.
    let (w, h) = dims.unwrap_or_else(|| {
        let w = target.sqrt().min(wf);
        let h = (target / w).min(hf);
        (w, h)
    });
    let x = if wf > w { rng.gen_range(0.0..=(wf - w)) } else { 0.0 };
    let y = if hf > h { rng.gen_range(0.0..=(hf - h)) } else { 0.0 };
    let crop = if scale == 1.0 && w == wf && h == hf { CropRect { x: 0.0, y: 0.0, w, h } } else { CropRect { x, y, w, h } };

    let flip = rng.gen_bool(policy.flip_prob);
    let jitter = rng.gen_bool(policy.jitter_prob).then(|| {
        let s = policy.jitter;
        let sym = |rng: &mut crate::rng::Rng, m: f64| if m == 0.0 { 0.0 } else { rng.gen_range(-m..=m) };
        JitterDelta {
            hue: sym(&mut rng, s.hue),
            brightness: sym(&mut rng, s.brightness),
            saturation: sym(&mut rng, s.saturation),
        }
    });
    let gray = rng.gen_bool(policy.gray_prob);
    Ok(TransformSpec { crop, flip, jitter, gray })
}

fn check_image<T: Element>(spec: &TransformSpec, image: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::Invalid(format!("expected a [C, H, W] image, got shape {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    if (spec.jitter.is_some() || spec.gray) && c != 3 {
        return Err(Error::Invalid(format!("color jitter and grayscale need 3 channels, image has {c}")));
    }
    Ok((c, h, w))
}

/// Apply `spec` to a `[C, H, W]` image with values in [0, 1].
pub fn apply_transform<T: Element>(spec: &TransformSpec, image: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = check_image(spec, image)?;
    if image.data().iter().any(|&v| v < T::zero() || v > T::one()) {
        return Err(Error::Invalid("pixel values must lie in [0, 1]".into()));
    }
    let mut out = if spec.full_crop(h, w) {
        image.data().to_vec()
    } else {
        let plan = ResizePlan::new(&spec.crop, h, w);
        let mut out = vec![T::zero(); c * h * w];
        for ch in 0..c {
            plan.forward(&image.data()[ch * h * w..(ch + 1) * h * w], &mut out[ch * h * w..(ch + 1) * h * w]);
        }
        out
    };
    if spec.flip {
        flip_rows(&mut out, c, h, w);
    }
    let plane = h * w;
    if let Some(d) = spec.jitter {
        for p in 0..plane {
            let rgb = [out[p].as_f64(), out[plane + p].as_f64(), out[2 * plane + p].as_f64()];
            let jittered = jitter_pixel(rgb, &d);
            for k in 0..3 {
                out[k * plane + p] = T::of(jittered[k]);
            }
        }
    }
    if spec.gray {
        for p in 0..plane {
            let l = T::of(luminance([out[p].as_f64(), out[plane + p].as_f64(), out[2 * plane + p].as_f64()]));
            for k in 0..3 {
                out[k * plane + p] = l;
            }
        }
    }
    // Round-off in the resize can leave values a hair outside [0, 1].
    for v in &mut out {
        *v = v.max(T::zero()).min(T::one());
    }
    Ok(Tensor::from_parts(image.shape().to_vec(), out))
}

/// Pull `grad_out` (gradient w.r.t. the transformed image) back to the input image.
///
/// Flip, crop-resize and grayscale are linear. The jitter Jacobian is exact
/// per pixel away from HSV branch points; the hue wrap passes gradient
/// straight through and clamped saturation/value pass none.
pub fn transform_vjp<T: Element>(spec: &TransformSpec, image: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = check_image(spec, image)?;
    if grad_out.shape() != image.shape() {
        return Err(Error::Invalid("gradient shape differs from image shape".into()));
    }
    let plane = h * w;
    let plan = (!spec.full_crop(h, w)).then(|| ResizePlan::new(&spec.crop, h, w));
    let mut g = grad_out.data().to_vec();
    if spec.gray {
        for p in 0..plane {
            let total = g[p] + g[plane + p] + g[2 * plane + p];
            for (k, coef) in LUMA.iter().enumerate() {
                g[k * plane + p] = total * T::of(*coef);
            }
        }
    }
    if let Some(d) = spec.jitter {
        // Recompute the jitter input: resized and flipped pixels.
        let mut pre = match &plan {
            None => image.data().to_vec(),
            Some(plan) => {
                let mut pre = vec![T::zero(); c * plane];
                for ch in 0..c {
                    plan.forward(&image.data()[ch * plane..(ch + 1) * plane], &mut pre[ch * plane..(ch + 1) * plane]);
                }
                pre
            }
        };
        if spec.flip {
            flip_rows(&mut pre, c, h, w);
        }
        for p in 0..plane {
            let rgb = [pre[p].as_f64(), pre[plane + p].as_f64(), pre[2 * plane + p].as_f64()];
            let jac = jitter_jacobian(rgb, &d);
            let go = [g[p].as_f64(), g[plane + p].as_f64(), g[2 * plane + p].as_f64()];
            for i in 0..3 {
                let v: f64 = (0..3).map(|o| jac[o][i] * go[o]).sum();
                g[i * plane + p] = T::of(v);
            }
        }
    }
    if spec.flip {
        flip_rows(&mut g, c, h, w);
    }
    let out = match &plan {
        None => g,
        Some(plan) => {
            let mut out = vec![T::zero(); c * plane];
            for ch in 0..c {
                plan.backward(&g[ch * plane..(ch + 1) * plane], &mut out[ch * plane..(ch + 1) * plane]);
            }
            out
        }
    };
    Ok(Tensor::from_parts(image.shape().to_vec(), out))
}

/// Sample and apply one transform per image of a `[N, C, H, W]` batch.
///
/// `seeds[i]` drives image `i`; results do not depend on `parallel`.
pub fn augment_batch<T: Element>(
    policy: &AugmentPolicy,
    images: &Tensor<T>,
    seeds: &[u64],
    parallel: bool,
) -> Result<(Tensor<T>, Vec<TransformSpec>)> {
    let s = images.shape();
    if s.len() != 4 || s[0] != seeds.len() {
        return Err(Error::Invalid(format!("batch shape {s:?} does not match {} seeds", seeds.len())));
    }
    let (h, w) = (s[2], s[3]);
    let one = |i: usize| -> Result<(Tensor<T>, TransformSpec)> {
        let spec = sample_transform(policy, seeds[i], h, w)?;
        let out = apply_transform(&spec, &images.index_first(i))?;
        Ok((out, spec))
    };
    let results: Vec<Result<(Tensor<T>, TransformSpec)>> = if parallel {
        (0..seeds.len()).into_par_iter().map(one).collect()
    } else {
        (0..seeds.len()).map(one).collect()
    };
    let mut imgs = Vec::with_capacity(seeds.len());
    let mut specs = Vec::with_capacity(seeds.len());
    for r in results {
        let (img, spec) = r?;
        imgs.push(img);
        specs.push(spec);
    }
    Ok((Tensor::stack(&imgs)?, specs))
}

fn flip_rows<T: Copy>(data: &mut [T], c: usize, h: usize, w: usize) {
    for row in 0..c * h {
        data[row * w..(row + 1) * w].reverse();
    }
}

/// Bilinear crop-and-resize, half-pixel centers (corner alignment off).
struct ResizePlan {
    h: usize,
    w: usize,
    rows: Vec<(usize, usize, f64)>,
    cols: Vec<(usize, usize, f64)>,
}

impl ResizePlan {
    fn new(crop: &CropRect, h: usize, w: usize) -> Self {
        let axis = |start: f64, extent: f64, n: usize| -> Vec<(usize, usize, f64)> {
            let step = extent / n as f64;
            (0..n)
                .map(|i| {
                    let pos = (start + (i as f64 + 0.5) * step - 0.5).clamp(0.0, (n - 1) as f64);
                    let lo = pos.floor() as usize;
                    let hi = (lo + 1).min(n - 1);
                    (lo, hi, pos - lo as f64)
                })
                .collect()
        };
        ResizePlan { h, w, rows: axis(crop.y, crop.h, h), cols: axis(crop.x, crop.w, w) }
    }

    fn forward<T: Element>(&self, src: &[T], dst: &mut [T]) {
        for (i, &(r0, r1, fr)) in self.rows.iter().enumerate() {
            let fr = T::of(fr);
            for (j, &(c0, c1, fc)) in self.cols.iter().enumerate() {
                let fc = T::of(fc);
                let top = src[r0 * self.w + c0] * (T::one() - fc) + src[r0 * self.w + c1] * fc;
                let bottom = src[r1 * self.w + c0] * (T::one() - fc) + src[r1 * self.w + c1] * fc;
                dst[i * self.w + j] = top * (T::one() - fr) + bottom * fr;
            }
        }
    }

    fn backward<T: Element>(&self, g: &[T], dst: &mut [T]) {
        debug_assert_eq!(dst.len(), self.h * self.w);
        for (i, &(r0, r1, fr)) in self.rows.iter().enumerate() {
            let fr = T::of(fr);
            for (j, &(c0, c1, fc)) in self.cols.iter().enumerate() {
                let fc = T::of(fc);
                let gv = g[i * self.w + j];
                dst[r0 * self.w + c0] += gv * (T::one() - fr) * (T::one() - fc);
                dst[r0 * self.w + c1] += gv * (T::one() - fr) * fc;
                dst[r1 * self.w + c0] += gv * fr * (T::one() - fc);
                dst[r1 * self.w + c1] += gv * fr * fc;
            }
        }
    }
}

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

fn luminance(rgb: [f64; 3]) -> f64 {
    LUMA[0] * rgb[0] + LUMA[1] * rgb[1] + LUMA[2] * rgb[2]
}

/// Arithmetic needed by the HSV round trip, shared by plain and dual numbers.
trait Scalar: Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Div<Output = Self> {
    fn value(self) -> f64;
    fn lift(v: f64) -> Self;
    /// Same value with zero derivative.
    fn detach(self) -> Self {
        Self::lift(self.value())
    }
}

impl Scalar for f64 {
    fn value(self) -> f64 {
        self
    }
    fn lift(v: f64) -> f64 {
        v
    }
}

/// Forward-mode dual number carrying derivatives along the three input channels.
#[derive(Debug, Clone, Copy)]
struct Dual {
    v: f64,
    d: [f64; 3],
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        Dual { v: self.v + o.v, d: [self.d[0] + o.d[0], self.d[1] + o.d[1], self.d[2] + o.d[2]] }
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        Dual { v: self.v - o.v, d: [self.d[0] - o.d[0], self.d[1] - o.d[1], self.d[2] - o.d[2]] }
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        let d = std::array::from_fn(|k| self.d[k] * o.v + self.v * o.d[k]);
        Dual { v: self.v * o.v, d }
    }
}

impl Div for Dual {
    type Output = Dual;
    fn div(self, o: Dual) -> Dual {
        let d = std::array::from_fn(|k| (self.d[k] * o.v - self.v * o.d[k]) / (o.v * o.v));
        Dual { v: self.v / o.v, d }
    }
}

impl Scalar for Dual {
    fn value(self) -> f64 {
        self.v
    }
    fn lift(v: f64) -> Dual {
        Dual { v, d: [0.0; 3] }
    }
}

fn pick_max<S: Scalar>(a: S, b: S) -> S {
    if b.value() > a.value() {
        b
    } else {
        a
    }
}

fn pick_min<S: Scalar>(a: S, b: S) -> S {
    if b.value() < a.value() {
        b
    } else {
        a
    }
}

fn clamp01<S: Scalar>(x: S) -> S {
    if x.value() < 0.0 {
        S::lift(0.0)
    } else if x.value() > 1.0 {
        S::lift(1.0)
    } else {
        x
    }
}

/// RGB in [0, 1] to (hue in [0, 1), saturation, value).
fn rgb_to_hsv<S: Scalar>([r, g, b]: [S; 3]) -> [S; 3] {
    let max = pick_max(pick_max(r, g), b);
    let min = pick_min(pick_min(r, g), b);
    let chroma = max - min;
    let v = max;
    if chroma.value() <= 0.0 {
        return [S::lift(0.0), S::lift(0.0), v];
    }
    let s = chroma / max;
    let six = S::lift(6.0);
    let h = if max.value() == r.value() {
        let t = (g - b) / chroma;
        if t.value() < 0.0 {
            t + six
        } else {
            t
        }
    } else if max.value() == g.value() {
        (b - r) / chroma + S::lift(2.0)
    } else {
        (r - g) / chroma + S::lift(4.0)
    };
    [h / six, s, v]
}

fn hsv_to_rgb<S: Scalar>([h, s, v]: [S; 3]) -> [S; 3] {
    let h6 = h * S::lift(6.0);
    let sector = h6.value().floor();
    let f = h6 - S::lift(sector);
    let one = S::lift(1.0);
    let p = v * (one - s);
    let q = v * (one - s * f);
    let t = v * (one - s * (one - f));
    match (sector as i64).rem_euclid(6) {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn jitter_generic<S: Scalar>(rgb: [S; 3], d: &JitterDelta) -> [S; 3] {
    let [h, s, v] = rgb_to_hsv(rgb);
    let shifted = h + S::lift(d.hue);
    // Straight-through at the wrap point.
    let h = shifted - S::lift(shifted.value().floor());
    let s = clamp01(s + S::lift(d.saturation));
    let v = clamp01(v + S::lift(d.brightness));
    let out = hsv_to_rgb([h, s, v]);
    out.map(|c| if c.value() < 0.0 || c.value() > 1.0 { clamp01(c).detach() } else { c })
}

fn jitter_pixel(rgb: [f64; 3], d: &JitterDelta) -> [f64; 3] {
    jitter_generic(rgb, d)
}

/// `jac[o][i]` = d out_o / d in_i for one pixel.
fn jitter_jacobian(rgb: [f64; 3], d: &JitterDelta) -> [[f64; 3]; 3] {
    let input: [Dual; 3] = std::array::from_fn(|k| {
        let mut e = [0.0; 3];
        e[k] = 1.0;
        Dual { v: rgb[k], d: e }
    });
    jitter_generic(input, d).map(|o| o.d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn random_image(seed: u64, c: usize, h: usize, w: usize) -> Tensor<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![c, h, w], (0..c * h * w).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn degenerate_policy_gives_noop_and_identity_output() {
        let spec = sample_transform(&AugmentPolicy::identity(), 42, 8, 6).unwrap();
        assert_eq!(spec, TransformSpec::identity(8, 6));
        let img = random_image(1, 3, 8, 6);
        assert_eq!(apply_transform(&spec, &img).unwrap(), img);
    }

    #[test]
    fn sampling_is_deterministic_and_crops_stay_inside() {
        let p = AugmentPolicy::simclr();
        for seed in 0..500 {
            let a = sample_transform(&p, seed, 16, 12).unwrap();
            assert_eq!(a, sample_transform(&p, seed, 16, 12).unwrap());
            let c = a.crop;
            assert!(c.w > 0.0 && c.h > 0.0);
            assert!(c.x >= 0.0 && c.y >= 0.0 && c.x + c.w <= 12.0 + 1e-9 && c.y + c.h <= 16.0 + 1e-9);
            let frac = c.w * c.h / (16.0 * 12.0);
            assert!(frac >= 0.08 - 1e-9 && frac <= 1.0 + 1e-9, "area fraction {frac}");
        }
    }

    #[test]
    fn fixed_scale_preset_has_exact_area() {
        let spec = sample_transform(&AugmentPolicy::smoothing(), 3, 16, 16).unwrap();
        assert!((spec.crop.w * spec.crop.h / 256.0 - 0.54).abs() < 1e-12);
    }

    #[test]
    fn flip_frequency_matches_probability() {
        let p = AugmentPolicy { flip_prob: 0.5, ..AugmentPolicy::identity() };
        let flips = (0..10_000).filter(|&s| sample_transform(&p, s, 8, 8).unwrap().flip).count();
        let freq = flips as f64 / 10_000.0;
        assert!((freq - 0.5).abs() < 0.02, "flip frequency {freq}");
    }

    #[test]
    fn flip_twice_is_identity_and_gray_equalizes_channels() {
        let img = random_image(2, 3, 5, 7);
        let flip = TransformSpec { flip: true, ..TransformSpec::identity(5, 7) };
        let once = apply_transform(&flip, &img).unwrap();
        assert_ne!(once, img);
        assert_eq!(apply_transform(&flip, &once).unwrap(), img);

        let gray = TransformSpec { gray: true, ..TransformSpec::identity(5, 7) };
        let g = apply_transform(&gray, &img).unwrap();
        let plane = 35;
        for p in 0..plane {
            assert_eq!(g.data()[p], g.data()[plane + p]);
            assert_eq!(g.data()[p], g.data()[2 * plane + p]);
        }
    }

    #[test]
    fn hsv_round_trip() {
        let img = random_image(3, 3, 10, 10);
        let zero = JitterDelta { hue: 0.0, brightness: 0.0, saturation: 0.0 };
        for p in 0..100 {
            let rgb = [img.data()[p], img.data()[100 + p], img.data()[200 + p]];
            let back = jitter_pixel(rgb, &zero);
            for k in 0..3 {
                assert!((back[k] - rgb[k]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn rejects_out_of_range_and_channel_mismatch() {
        let bad = Tensor::<f64>::new(vec![1, 2, 2], vec![0.0, 0.5, 1.5, 0.2]).unwrap();
        assert!(apply_transform(&TransformSpec::identity(2, 2), &bad).is_err());
        let one_channel = random_image(4, 1, 2, 2);
        let gray = TransformSpec { gray: true, ..TransformSpec::identity(2, 2) };
        assert!(apply_transform(&gray, &one_channel).is_err());
        let p = AugmentPolicy { crop_scale: (0.5, 0.2), ..AugmentPolicy::simclr() };
        assert!(sample_transform(&p, 0, 4, 4).is_err());
    }

    #[test]
    fn outputs_stay_in_unit_range() {
        let p = AugmentPolicy::simclr();
        let img = random_image(5, 3, 12, 12);
        for seed in 0..200 {
            let spec = sample_transform(&p, seed, 12, 12).unwrap();
            let out = apply_transform(&spec, &img).unwrap();
            assert_eq!(out.shape(), img.shape());
            assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn vjp_matches_finite_differences() {
        // Keep pixels away from HSV branch points by using a smooth random image.
        let p = AugmentPolicy { jitter: JitterStrength { hue: 0.05, brightness: 0.1, saturation: 0.1 }, ..AugmentPolicy::simclr() };
        let img = random_image(6, 3, 6, 6);
        let weights = random_image(7, 3, 6, 6);
        let objective = |spec: &TransformSpec, x: &Tensor<f64>| -> f64 {
            let y = apply_transform(spec, x).unwrap();
            y.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
        };
        let mut checked = 0;
        for seed in 0..40 {
            let spec = sample_transform(&p, seed, 6, 6).unwrap();
            let g = transform_vjp(&spec, &img, &weights).unwrap();
            let h = 1e-6;
            for idx in [0usize, 13, 40, 77, 101] {
                let mut plus = img.clone();
                plus.data_mut()[idx] += h;
                let mut minus = img.clone();
                minus.data_mut()[idx] -= h;
                let fd = (objective(&spec, &plus) - objective(&spec, &minus)) / (2.0 * h);
                let an = g.data()[idx];
                // Branch switches inside the probe interval are rare; skip them.
                if (fd - an).abs() > 1e-4 * (1.0 + fd.abs()) {
                    let h2 = 1e-8;
                    let mut p2 = img.clone();
                    p2.data_mut()[idx] += h2;
                    let one_sided = (objective(&spec, &p2) - objective(&spec, &img)) / h2;
                    assert!((one_sided - an).abs() < 1e-3 * (1.0 + an.abs()), "seed {seed} idx {idx}: {an} vs {fd}");
                }
                checked += 1;
            }
        }
        assert_eq!(checked, 200);
    }

    #[test]
    fn batch_augmentation_is_parallel_invariant() {
        let imgs = Tensor::stack(&(0..6).map(|i| random_image(10 + i, 3, 8, 8)).collect::<Vec<_>>()).unwrap();
        let seeds: Vec<u64> = (0..6).map(|i| crate::rng::derive_seed(&[9, 0, i, 0])).collect();
        let (a, sa) = augment_batch(&AugmentPolicy::simclr(), &imgs, &seeds, false).unwrap();
        let (b, sb) = augment_batch(&AugmentPolicy::simclr(), &imgs, &seeds, true).unwrap();
        assert_eq!(a, b);
        assert_eq!(sa, sb);
    }
}

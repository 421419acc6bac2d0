//! Sample sets, IDX ingestion, deterministic splits, augmentation and the
//! synthetic task generators.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::io::{self, Read};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Seeds, StreamRng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Geometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Geometry {
    pub fn gray(side: usize) -> Self {
        Self { channels: 1, height: side, width: side }
    }

    pub fn pixels(&self) -> usize {
        self.channels * self.height * self.width
    }
}

impl std::fmt::Display for Geometry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

impl std::str::FromStr for Geometry {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<usize> = s
            .split('x')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Input(format!("bad geometry {s:?}")))?;
        match parts[..] {
            [c, h, w] if c > 0 && h > 0 && w > 0 => Ok(Self { channels: c, height: h, width: w }),
            _ => Err(Error::Input(format!("geometry must be CxHxW, got {s:?}"))),
        }
    }
}

/// Images stored flat, `[n, c, h, w]` row-major, with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Samples {
    pub geometry: Geometry,
    pub images: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Samples {
    pub fn new(geometry: Geometry, images: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        if images.len() != labels.len() * geometry.pixels() {
            return Err(Error::Dimension(format!(
                "{} values for {} images of {geometry}",
                images.len(),
                labels.len()
            )));
        }
        Ok(Self { geometry, images, labels })
    }

    pub fn empty(geometry: Geometry) -> Self {
        Self { geometry, images: Vec::new(), labels: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let p = self.geometry.pixels();
        &self.images[i * p..(i + 1) * p]
    }

    pub fn subset(&self, idx: &[usize]) -> Samples {
        let mut images = Vec::with_capacity(idx.len() * self.geometry.pixels());
        for &i in idx {
            images.extend_from_slice(self.image(i));
        }
        Samples { geometry: self.geometry, images, labels: idx.iter().map(|&i| self.labels[i]).collect() }
    }

    pub fn take(&self, n: usize) -> Samples {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// The whole set as one `[n, c, h, w]` batch.
    pub fn to_batch(&self) -> (Tensor, Vec<usize>) {
        let g = self.geometry;
        let t = Tensor::new(&[self.len(), g.channels, g.height, g.width], self.images.clone())
            .expect("consistent by construction");
        (t, self.labels.clone())
    }

    /// Consecutive batches of at most `size` samples, in order.
    pub fn chunks(&self, size: usize) -> impl Iterator<Item = (Tensor, Vec<usize>)> + '_ {
        let size = size.max(1);
        (0..self.len()).step_by(size).map(move |s| {
            let idx: Vec<usize> = (s..(s + size).min(self.len())).collect();
            self.subset(&idx).to_batch()
        })
    }

    pub fn concat(&self, other: &Samples) -> Result<Samples> {
        if self.geometry != other.geometry {
            return Err(Error::Dimension("cannot concatenate different geometries".into()));
        }
        let mut out = self.clone();
        out.images.extend_from_slice(&other.images);
        out.labels.extend_from_slice(&other.labels);
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AugmentPolicy {
    pub scale_crop: bool,
    pub hflip: bool,
    pub vflip: bool,
}

impl AugmentPolicy {
    pub fn off() -> Self {
        Self::default()
    }

    pub fn crop_only() -> Self {
        Self { scale_crop: true, ..Self::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub name: String,
    pub train: Samples,
    pub val: Samples,
    pub test: Samples,
    pub num_classes: usize,
    pub geometry: Geometry,
    pub augment: AugmentPolicy,
}

impl TaskDataset {
    pub fn validate(&self) -> Result<()> {
        for (split, s) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            if s.geometry != self.geometry {
                return Err(Error::Dimension(format!("{} {split} split has geometry {}", self.name, s.geometry)));
            }
            if let Some(&l) = s.labels.iter().find(|&&l| l >= self.num_classes) {
                return Err(Error::Input(format!("{} {split} label {l} >= {}", self.name, self.num_classes)));
            }
        }
        Ok(())
    }
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    Ok(buf)
}

fn truncated(what: &str) -> Error {
    Error::Io(io::Error::new(io::ErrorKind::UnexpectedEof, format!("truncated IDX {what}")))
}

fn be_u32(buf: &[u8], at: usize, what: &str) -> Result<usize> {
    buf.get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()) as usize)
        .ok_or_else(|| truncated(what))
}

/// Parses an IDX image file (magic `0x00000803`), scaled to `[0, 1]`.
pub fn parse_idx_images(buf: &[u8]) -> Result<(Geometry, usize, Vec<f64>)> {
    let magic = be_u32(buf, 0, "header")?;
    if magic != 0x0803 {
        return Err(Error::Format(format!("IDX image magic {magic:#010x}")));
    }
    let n = be_u32(buf, 4, "header")?;
    let h = be_u32(buf, 8, "header")?;
    let w = be_u32(buf, 12, "header")?;
    let body = &buf[16..];
    let need = n * h * w;
    if body.len() < need {
        return Err(truncated("image body"));
    }
    let images = body[..need].iter().map(|&b| b as f64 / 255.0).collect();
    Ok((Geometry { channels: 1, height: h, width: w }, n, images))
}

/// Parses an IDX label file (magic `0x00000801`).
pub fn parse_idx_labels(buf: &[u8]) -> Result<Vec<usize>> {
    let magic = be_u32(buf, 0, "header")?;
    if magic != 0x0801 {
        return Err(Error::Format(format!("IDX label magic {magic:#010x}")));
    }
    let n = be_u32(buf, 4, "header")?;
    let body = &buf[8..];
    if body.len() < n {
        return Err(truncated("label body"));
    }
    Ok(body[..n].iter().map(|&b| b as usize).collect())
}

/// Reads an IDX image/label file pair.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Samples> {
    let (geometry, n, pixels) = parse_idx_images(&read_all(images)?)?;
    let labels = parse_idx_labels(&read_all(labels)?)?;
    if labels.len() != n {
        return Err(Error::Format(format!("{n} images but {} labels", labels.len())));
    }
    Samples::new(geometry, pixels, labels)
}

/// Moves a stratified `val_fraction` of the training set into `val`.
/// Each class contributes `round(count * val_fraction)` samples.
pub fn make_splits(mut ds: TaskDataset, val_fraction: f64, seeds: &Seeds) -> Result<TaskDataset> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::Input(format!("val_fraction {val_fraction} outside [0, 1)")));
    }
    let all = ds.train.concat(&ds.val)?;
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in all.labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut rng = seeds.stream(&format!("split/{}", ds.name));
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for idx in by_class.values_mut() {
        idx.shuffle(&mut rng);
        let k = (idx.len() as f64 * val_fraction).round() as usize;
        val.extend_from_slice(&idx[..k]);
        train.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    ds.train = all.subset(&train);
    ds.val = all.subset(&val);
    Ok(ds)
}

fn bilinear(img: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let top = img[y0 * w + x0] * (1.0 - fx) + img[y0 * w + x1] * fx;
    let bot = img[y1 * w + x0] * (1.0 - fx) + img[y1 * w + x1] * fx;
    top * (1.0 - fy) + bot * fy
}

/// Random scale-and-crop (90–100% of each side, aspect jitter ±0.05)
/// resized back to the input geometry, then optional flips.
pub fn augment(image: &[f64], geometry: Geometry, policy: AugmentPolicy, rng: &mut StreamRng) -> Vec<f64> {
    let (h, w) = (geometry.height, geometry.width);
    let mut out = image.to_vec();
    if policy.scale_crop {
        let s: f64 = rng.random_range(0.9..=1.0);
        let a: f64 = rng.random_range(-0.05..=0.05);
        let ch = (s * (1.0 - a)).min(1.0) * h as f64;
        let cw = (s * (1.0 + a)).min(1.0) * w as f64;
        let oy = rng.random_range(0.0..=(h as f64 - ch));
        let ox = rng.random_range(0.0..=(w as f64 - cw));
        for c in 0..geometry.channels {
            let src = &image[c * h * w..(c + 1) * h * w];
            for i in 0..h {
                for j in 0..w {
                    let y = oy + (i as f64 + 0.5) * ch / h as f64 - 0.5;
                    let x = ox + (j as f64 + 0.5) * cw / w as f64 - 0.5;
                    out[c * h * w + i * w + j] = bilinear(src, h, w, y, x);
                }
            }
        }
    }
    if policy.hflip && rng.random::<bool>() {
        out = hflip(&out, geometry);
    }
    if policy.vflip && rng.random::<bool>() {
        out = vflip(&out, geometry);
    }
    out
}

pub fn hflip(image: &[f64], g: Geometry) -> Vec<f64> {
    let mut out = image.to_vec();
    for row in out.chunks_mut(g.width) {
        row.reverse();
    }
    out
}

pub fn vflip(image: &[f64], g: Geometry) -> Vec<f64> {
    let mut out = Vec::with_capacity(image.len());
    for plane in image.chunks(g.height * g.width) {
        for row in plane.chunks(g.width).rev() {
            out.extend_from_slice(row);
        }
    }
    out
}

/// Applies `policy` to every image of a batch.
pub fn augment_batch(batch: &Samples, policy: AugmentPolicy, rng: &mut StreamRng) -> Samples {
    if policy == AugmentPolicy::off() {
        return batch.clone();
    }
    let mut images = Vec::with_capacity(batch.images.len());
    for i in 0..batch.len() {
        images.extend(augment(batch.image(i), batch.geometry, policy, rng));
    }
    Samples { geometry: batch.geometry, images, labels: batch.labels.clone() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    /// Stroke-drawn glyphs, one random glyph per class.
    Digits,
    /// Filled silhouettes built from rectangles and ellipses.
    Fashion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Transform {
    Identity,
    PixelPermutation,
    Rotation,
    LabelPermutation,
    ChannelNoise,
}

impl std::str::FromStr for Transform {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Input(format!("unknown transform {s:?}")))
    }
}

impl std::str::FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Input(format!("unknown family {s:?}")))
    }
}

/// Maximum rotation, reached at `theta = 1`.
pub const MAX_ROTATION_DEG: f64 = 90.0;
/// Standard deviation of channel noise at `theta = 1`.
pub const MAX_NOISE_STD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTaskSpec {
    pub name: String,
    pub family: Family,
    /// Seeds the class prototypes; tasks sharing it share a base distribution.
    pub base_seed: u64,
    /// Seeds the draws of individual samples.
    pub sample_seed: u64,
    pub transform: Transform,
    pub theta: f64,
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub side: usize,
}

impl SynthTaskSpec {
    pub fn base(name: &str, family: Family, base_seed: u64, sample_seed: u64) -> Self {
        Self {
            name: name.to_string(),
            family,
            base_seed,
            sample_seed,
            transform: Transform::Identity,
            theta: 0.0,
            num_classes: 5,
            train_per_class: 40,
            test_per_class: 20,
            side: 28,
        }
    }

    pub fn with(mut self, transform: Transform, theta: f64) -> Self {
        self.transform = transform;
        self.theta = theta;
        self
    }
}

#[derive(Debug, Clone, Copy)]
struct Stroke {
    a: (f64, f64),
    b: (f64, f64),
}

#[derive(Debug, Clone, Copy)]
struct Blob {
    center: (f64, f64),
    radii: (f64, f64),
    ellipse: bool,
    level: f64,
}

enum Prototype {
    Strokes(Vec<Stroke>),
    Blobs(Vec<Blob>),
}

fn prototypes(family: Family, classes: usize, seeds: &Seeds) -> Vec<Prototype> {
    let mut rng = seeds.stream("prototypes");
    (0..classes)
        .map(|_| match family {
            Family::Digits => {
                let n = rng.random_range(3..=4);
                let mut p = (rng.random_range(0.25..0.75), rng.random_range(0.25..0.75));
                Prototype::Strokes(
                    (0..n)
                        .map(|_| {
                            let q = (rng.random_range(0.15..0.85), rng.random_range(0.15..0.85));
                            let s = Stroke { a: p, b: q };
                            p = q;
                            s
                        })
                        .collect(),
                )
            }
            Family::Fashion => Prototype::Blobs(
                (0..rng.random_range(2..=3))
                    .map(|_| Blob {
                        center: (rng.random_range(0.3..0.7), rng.random_range(0.3..0.7)),
                        radii: (rng.random_range(0.1..0.3), rng.random_range(0.1..0.3)),
                        ellipse: rng.random(),
                        level: rng.random_range(0.5..1.0),
                    })
                    .collect(),
            ),
        })
        .collect()
}

fn seg_dist(p: (f64, f64), s: &Stroke) -> f64 {
    let (dx, dy) = (s.b.0 - s.a.0, s.b.1 - s.a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 { 0.0 } else { (((p.0 - s.a.0) * dx + (p.1 - s.a.1) * dy) / len2).clamp(0.0, 1.0) };
    let (cx, cy) = (s.a.0 + t * dx, s.a.1 + t * dy);
    ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()
}

fn render(proto: &Prototype, side: usize, rng: &mut StreamRng) -> Vec<f64> {
    let shift = (rng.random_range(-0.07..0.07), rng.random_range(-0.07..0.07));
    let scale = rng.random_range(0.9..1.1);
    let gain = rng.random_range(0.8..1.0);
    let noise = Normal::new(0.0, 0.05).unwrap();
    let warp = |v: (f64, f64)| ((v.0 - 0.5) * scale + 0.5 + shift.0, (v.1 - 0.5) * scale + 0.5 + shift.1);
    let mut img = vec![0.0; side * side];
    match proto {
        Prototype::Strokes(strokes) => {
            let jitter = 0.03;
            let strokes: Vec<Stroke> = strokes
                .iter()
                .map(|s| {
                    let j = |v: (f64, f64), r: &mut StreamRng| {
                        warp((v.0 + r.random_range(-jitter..jitter), v.1 + r.random_range(-jitter..jitter)))
                    };
                    Stroke { a: j(s.a, rng), b: j(s.b, rng) }
                })
                .collect();
            let width = rng.random_range(0.04..0.06);
            for i in 0..side {
                for j in 0..side {
                    let p = ((j as f64 + 0.5) / side as f64, (i as f64 + 0.5) / side as f64);
                    let d = strokes.iter().map(|s| seg_dist(p, s)).fold(f64::INFINITY, f64::min);
                    img[i * side + j] = gain * (1.0 - ((d - width) / 0.03).clamp(0.0, 1.0));
                }
            }
        }
        Prototype::Blobs(blobs) => {
            for b in blobs {
                let c = warp(b.center);
                let (rx, ry) = (b.radii.0 * scale, b.radii.1 * scale);
                for i in 0..side {
                    for j in 0..side {
                        let p = ((j as f64 + 0.5) / side as f64, (i as f64 + 0.5) / side as f64);
                        let (u, v) = ((p.0 - c.0) / rx, (p.1 - c.1) / ry);
                        let inside = if b.ellipse { u * u + v * v <= 1.0 } else { u.abs() <= 1.0 && v.abs() <= 1.0 };
                        if inside {
                            let px = &mut img[i * side + j];
                            *px = px.max(gain * b.level);
                        }
                    }
                }
            }
        }
    }
    for v in &mut img {
        *v = (*v + noise.sample(rng)).clamp(0.0, 1.0);
    }
    img
}

fn rotate(img: &[f64], side: usize, degrees: f64) -> Vec<f64> {
    let (s, c) = (degrees * PI / 180.0).sin_cos();
    let m = (side as f64 - 1.0) / 2.0;
    let mut out = vec![0.0; img.len()];
    for i in 0..side {
        for j in 0..side {
            let (y, x) = (i as f64 - m, j as f64 - m);
            let (sy, sx) = (c * y - s * x + m, s * y + c * x + m);
            if sy >= -0.5 && sy <= side as f64 - 0.5 && sx >= -0.5 && sx <= side as f64 - 0.5 {
                out[i * side + j] = bilinear(img, side, side, sy, sx);
            }
        }
    }
    out
}

/// Permutation of `round(theta * n)` positions among themselves; the rest
/// stay fixed.
fn partial_permutation(n: usize, theta: f64, rng: &mut StreamRng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let k = (theta.clamp(0.0, 1.0) * n as f64).round() as usize;
    let chosen = &idx[..k];
    let mut perm: Vec<usize> = (0..n).collect();
    for (i, &src) in chosen.iter().enumerate() {
        perm[src] = chosen[(i + 1) % k.max(1)];
    }
    perm
}

fn generate(spec: &SynthTaskSpec, protos: &[Prototype], per_class: usize, rng: &mut StreamRng) -> (Vec<f64>, Vec<usize>) {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..per_class {
        for (c, p) in protos.iter().enumerate() {
            images.extend(render(p, spec.side, rng));
            labels.push(c);
        }
    }
    (images, labels)
}

/// Builds a task as a `theta`-strength transform of the base generator.
/// Validation is left empty; carve it with [`make_splits`].
pub fn synth_task(spec: &SynthTaskSpec) -> Result<TaskDataset> {
    if spec.num_classes == 0 || spec.side == 0 {
        return Err(Error::Input("synthetic task needs classes and a positive side".into()));
    }
    if !(0.0..=1.0).contains(&spec.theta) {
        return Err(Error::Input(format!("theta {} outside [0, 1]", spec.theta)));
    }
    let base = Seeds::new(spec.base_seed).child(match spec.family {
        Family::Digits => "digits",
        Family::Fashion => "fashion",
    });
    let protos = prototypes(spec.family, spec.num_classes, &base);
    let samples = Seeds::new(spec.sample_seed).child(&spec.name);
    let mut rng = samples.stream("train");
    let (tr_img, tr_lab) = generate(spec, &protos, spec.train_per_class, &mut rng);
    let mut rng = samples.stream("test");
    let (te_img, te_lab) = generate(spec, &protos, spec.test_per_class, &mut rng);
    let geometry = Geometry::gray(spec.side);
    let mut train = Samples::new(geometry, tr_img, tr_lab)?;
    let mut test = Samples::new(geometry, te_img, te_lab)?;
    let pixels = geometry.pixels();
    let mut trng = base.child("transform").stream(&format!("{:?}/{}", spec.transform, spec.theta));
    match spec.transform {
        Transform::Identity => {}
        Transform::PixelPermutation => {
            let perm = partial_permutation(pixels, spec.theta, &mut trng);
            for s in [&mut train, &mut test] {
                for img in s.images.chunks_mut(pixels) {
                    let src = img.to_vec();
                    for (dst, &p) in img.iter_mut().zip(&perm) {
                        *dst = src[p];
                    }
                }
            }
        }
        Transform::Rotation => {
            let deg = spec.theta * MAX_ROTATION_DEG;
            for s in [&mut train, &mut test] {
                for img in s.images.chunks_mut(pixels) {
                    let r = rotate(img, spec.side, deg);
                    img.copy_from_slice(&r);
                }
            }
        }
        Transform::LabelPermutation => {
            let perm = partial_permutation(spec.num_classes, spec.theta, &mut trng);
            for s in [&mut train, &mut test] {
                for l in &mut s.labels {
                    *l = perm[*l];
                }
            }
        }
        Transform::ChannelNoise => {
            let noise = Normal::new(0.0, spec.theta * MAX_NOISE_STD + f64::MIN_POSITIVE).unwrap();
            let mut nrng = samples.stream("channel-noise");
            if spec.theta > 0.0 {
                for s in [&mut train, &mut test] {
                    for v in &mut s.images {
                        *v = (*v + noise.sample(&mut nrng)).clamp(0.0, 1.0);
                    }
                }
            }
        }
    }
    let ds = TaskDataset {
        name: spec.name.clone(),
        train,
        val: Samples::empty(geometry),
        test,
        num_classes: spec.num_classes,
        geometry,
        augment: AugmentPolicy::crop_only(),
    };
    ds.validate()?;
    Ok(ds)
}

/// The standard five-task desk stream: base digits, pixel-permuted digits,
/// digits rotated by 45°, label-permuted digits, fashion silhouettes.
pub fn toy_vdd(seed: u64) -> Vec<SynthTaskSpec> {
    let base = |name: &str, family| SynthTaskSpec::base(name, family, seed, seed);
    vec![
        base("digits", Family::Digits),
        base("digits-permuted", Family::Digits).with(Transform::PixelPermutation, 1.0),
        base("digits-rotated", Family::Digits).with(Transform::Rotation, 45.0 / MAX_ROTATION_DEG),
        base("digits-relabeled", Family::Digits).with(Transform::LabelPermutation, 1.0),
        base("fashion", Family::Fashion),
    ]
}

/// Where a task's data comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum TaskSource {
    Idx {
        name: String,
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        classes: usize,
        geometry: Geometry,
    },
    Synth(SynthTaskSpec),
}

impl TaskSource {
    pub fn name(&self) -> &str {
        match self {
            TaskSource::Idx { name, .. } => name,
            TaskSource::Synth(s) => &s.name,
        }
    }

    /// Loads the task and carves a stratified validation split.
    pub fn load(&self, val_fraction: f64, seeds: &Seeds) -> Result<TaskDataset> {
        let ds = match self {
            TaskSource::Synth(spec) => synth_task(spec)?,
            TaskSource::Idx { name, train_images, train_labels, test_images, test_labels, classes, geometry } => {
                let train = load_idx(train_images, train_labels)?;
                let test = load_idx(test_images, test_labels)?;
                if train.geometry != *geometry || test.geometry != *geometry {
                    return Err(Error::Format(format!("{name}: files do not match geometry {geometry}")));
                }
                let ds = TaskDataset {
                    name: name.clone(),
                    train,
                    val: Samples::empty(*geometry),
                    test,
                    num_classes: *classes,
                    geometry: *geometry,
                    augment: AugmentPolicy::crop_only(),
                };
                ds.validate()?;
                ds
            }
        };
        make_splits(ds, val_fraction, seeds)
    }
}

/// Parses flat `key=value` lines; `#` starts a comment.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Input(format!("line {}: expected key=value", n + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

fn field<T: std::str::FromStr>(kv: &BTreeMap<String, String>, key: &str) -> Result<T> {
    let v = kv.get(key).ok_or_else(|| Error::Input(format!("manifest is missing {key}")))?;
    v.parse().map_err(|_| Error::Input(format!("manifest {key}={v} does not parse")))
}

fn field_or<T: std::str::FromStr>(kv: &BTreeMap<String, String>, key: &str, default: T) -> Result<T> {
    if kv.contains_key(key) {
        field(kv, key)
    } else {
        Ok(default)
    }
}

/// Reads a task stream manifest. Tasks are `task.<i>.<key>` entries; relative
/// paths resolve against `base_dir`. Keys for IDX tasks: `name`,
/// `train_images`, `train_labels`, `test_images`, `test_labels`, `classes`,
/// `geometry`. Synthetic tasks set `kind=synth` plus `family`, `transform`,
/// `theta`, `base_seed`, `sample_seed`, `classes`, `train_per_class`,
/// `test_per_class`.
pub fn parse_manifest(text: &str, base_dir: &Path) -> Result<Vec<TaskSource>> {
    let kv = parse_key_values(text)?;
    let mut tasks: BTreeMap<usize, BTreeMap<String, String>> = BTreeMap::new();
    for (k, v) in kv {
        let rest = k
            .strip_prefix("task.")
            .ok_or_else(|| Error::Input(format!("unknown manifest key {k}")))?;
        let (i, key) = rest
            .split_once('.')
            .ok_or_else(|| Error::Input(format!("manifest key {k} needs task.<i>.<field>")))?;
        let i: usize = i.parse().map_err(|_| Error::Input(format!("bad task index in {k}")))?;
        tasks.entry(i).or_default().insert(key.to_string(), v);
    }
    if tasks.is_empty() {
        return Err(Error::Input("manifest lists no tasks".into()));
    }
    for (want, &have) in tasks.keys().enumerate() {
        if want != have {
            return Err(Error::Input(format!("manifest task indices must be 0..n, found {have}")));
        }
    }
    tasks
        .into_values()
        .map(|t| {
            let name: String = field(&t, "name")?;
            let kind: String = field_or(&t, "kind", "idx".to_string())?;
            match kind.as_str() {
                "synth" => {
                    let family: Family = field(&t, "family")?;
                    let base_seed = field_or(&t, "base_seed", 0)?;
                    let mut s = SynthTaskSpec::base(&name, family, base_seed, field_or(&t, "sample_seed", base_seed)?);
                    s.transform = field_or(&t, "transform", Transform::Identity)?;
                    s.theta = field_or(&t, "theta", 0.0)?;
                    s.num_classes = field_or(&t, "classes", s.num_classes)?;
                    s.train_per_class = field_or(&t, "train_per_class", s.train_per_class)?;
                    s.test_per_class = field_or(&t, "test_per_class", s.test_per_class)?;
                    s.side = field_or(&t, "side", s.side)?;
                    Ok(TaskSource::Synth(s))
                }
                "idx" => {
                    let path = |k: &str| -> Result<PathBuf> {
                        let p: PathBuf = field::<String>(&t, k)?.into();
                        Ok(if p.is_absolute() { p } else { base_dir.join(p) })
                    };
                    Ok(TaskSource::Idx {
                        train_images: path("train_images")?,
                        train_labels: path("train_labels")?,
                        test_images: path("test_images")?,
                        test_labels: path("test_labels")?,
                        classes: field(&t, "classes")?,
                        geometry: field(&t, "geometry")?,
                        name,
                    })
                }
                other => Err(Error::Input(format!("unknown task kind {other:?}"))),
            }
        })
        .collect()
}

/// Manifest text for a list of synthetic tasks.
pub fn synth_manifest(tasks: &[SynthTaskSpec]) -> String {
    let mut out = String::new();
    for (i, s) in tasks.iter().enumerate() {
        let p = format!("task.{i}.");
        out += &format!("{p}name={}\n{p}kind=synth\n", s.name);
        out += &format!("{p}family={}\n", serde_json::to_value(s.family).unwrap().as_str().unwrap());
        out += &format!("{p}transform={}\n", serde_json::to_value(s.transform).unwrap().as_str().unwrap());
        out += &format!("{p}theta={}\n{p}base_seed={}\n{p}sample_seed={}\n", s.theta, s.base_seed, s.sample_seed);
        out += &format!(
            "{p}classes={}\n{p}train_per_class={}\n{p}test_per_class={}\n{p}side={}\n",
            s.num_classes, s.train_per_class, s.test_per_class, s.side
        );
    }
    out
}

#[cfg(test)]
mod tests;

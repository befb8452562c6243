//! Image datasets: the CIFAR-10 binary loader, a synthetic texture/structure
//! dataset, augmentation, mixup and epoch batching.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Images stored as bytes, `N×C×H×W` row-major; pixel value = byte / 255.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub pixels: Vec<u8>,
    pub labels: Vec<usize>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            pixels: indices.iter().flat_map(|&i| self.image(i).iter().copied()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ..*self
        }
    }

    /// Per-channel mean and standard deviation of the pixel values in [0,1].
    pub fn channel_stats(&self) -> ChannelStats {
        let plane = self.height * self.width;
        let mut sum = vec![0f64; self.channels];
        let mut sq = vec![0f64; self.channels];
        for img in self.pixels.chunks(self.image_len()) {
            for (c, p) in img.chunks(plane).enumerate() {
                for &b in p {
                    let x = b as f64 / 255.0;
                    sum[c] += x;
                    sq[c] += x * x;
                }
            }
        }
        let n = (self.len() * plane).max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq.iter().zip(&mean).map(|(q, m)| (q / n - m * m).max(0.0).sqrt().max(1e-6)).collect();
        ChannelStats { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    pub fn identity(channels: usize) -> Self {
        Self { mean: vec![0.0; channels], std: vec![1.0; channels] }
    }

    /// `(x − mean_c) / std_c` in place over a `C×H×W` image.
    pub fn normalize(&self, img: &mut [f32]) {
        let plane = img.len() / self.mean.len();
        for (c, p) in img.chunks_mut(plane).enumerate() {
            let (m, s) = (self.mean[c] as f32, self.std[c] as f32);
            p.iter_mut().for_each(|x| *x = (*x - m) / s);
        }
    }
}

pub const CIFAR_RECORD: usize = 3073;
pub const CIFAR_RECORDS_PER_FILE: usize = 10_000;
pub const CIFAR_TRAIN_FILES: [&str; 5] =
    ["data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin", "data_batch_5.bin"];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";

fn ingest(file: &Path, offset: usize, reason: impl Into<String>) -> Error {
    Error::Ingest { file: file.to_path_buf(), offset: offset as u64, reason: reason.into() }
}

/// Parses one CIFAR-10 binary batch: records of a label byte followed by
/// the R, G and B planes of 1024 bytes each.
pub fn parse_cifar10(file: &Path, bytes: &[u8]) -> Result<Dataset> {
    let whole = bytes.len() / CIFAR_RECORD * CIFAR_RECORD;
    if whole != bytes.len() {
        return Err(ingest(
            file,
            whole,
            format!("truncated record: {} of {CIFAR_RECORD} bytes present", bytes.len() - whole),
        ));
    }
    let mut ds = Dataset {
        pixels: Vec::with_capacity(bytes.len() / CIFAR_RECORD * (CIFAR_RECORD - 1)),
        labels: Vec::with_capacity(bytes.len() / CIFAR_RECORD),
        channels: 3,
        height: 32,
        width: 32,
        classes: 10,
    };
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(ingest(file, i * CIFAR_RECORD, format!("label byte {} exceeds 9", rec[0])));
        }
        ds.labels.push(rec[0] as usize);
        ds.pixels.extend_from_slice(&rec[1..]);
    }
    Ok(ds)
}

fn read_cifar_file(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| ingest(path, 0, format!("cannot read file: {e}")))?;
    let ds = parse_cifar10(path, &bytes)?;
    if ds.len() != CIFAR_RECORDS_PER_FILE {
        return Err(ingest(
            path,
            bytes.len(),
            format!("expected {CIFAR_RECORDS_PER_FILE} records, found {}", ds.len()),
        ));
    }
    Ok(ds)
}

fn concat(parts: Vec<Dataset>) -> Dataset {
    let mut it = parts.into_iter();
    let mut first = it.next().expect("at least one part");
    for p in it {
        first.pixels.extend_from_slice(&p.pixels);
        first.labels.extend_from_slice(&p.labels);
    }
    first
}

/// Loads the five training batches and the test batch from `dir` (or from
/// its `cifar-10-batches-bin` subdirectory).
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    let nested = dir.join("cifar-10-batches-bin");
    let root: PathBuf = if nested.is_dir() { nested } else { dir.to_path_buf() };
    let train = CIFAR_TRAIN_FILES.iter().map(|f| read_cifar_file(&root.join(f))).collect::<Result<Vec<_>>>()?;
    let test = read_cifar_file(&root.join(CIFAR_TEST_FILE))?;
    Ok((concat(train), test))
}

/// Synthetic texture-versus-structure dataset parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub classes: usize,
    pub image: usize,
    pub texture_strength: f64,
    pub structure_strength: f64,
    pub p_tex: f64,
    pub p_struct: f64,
    pub train: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            image: 32,
            texture_strength: 1.0,
            structure_strength: 1.0,
            p_tex: 0.3,
            p_struct: 0.3,
            train: 10_000,
            test: 2_000,
            seed: 0,
        }
    }
}

pub const SYNTH_MAX_CLASSES: usize = 10;

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(2..=SYNTH_MAX_CLASSES).contains(&self.classes) {
            bad.push(format!("classes must lie in [2, {SYNTH_MAX_CLASSES}], got {}", self.classes));
        }
        if self.image < 16 || self.image % 4 != 0 {
            bad.push(format!("image size must be a multiple of 4 and at least 16, got {}", self.image));
        }
        for (name, p) in [("p_tex", self.p_tex), ("p_struct", self.p_struct)] {
            if !(0.0..=1.0).contains(&p) {
                bad.push(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        for (name, s) in [("texture_strength", self.texture_strength), ("structure_strength", self.structure_strength)] {
            if !(s >= 0.0 && s.is_finite()) {
                bad.push(format!("{name} must be finite and nonnegative, got {s}"));
            }
        }
        if self.train == 0 || self.test == 0 {
            bad.push("train and test sizes must be positive".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid synthetic spec: {}", bad.join("; "))))
        }
    }
}

/// Which class each cue of a synthetic image depicts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Cues {
    pub texture: usize,
    pub structure: usize,
    pub texture_replaced: bool,
    pub structure_replaced: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSet {
    pub train: Dataset,
    pub test: Dataset,
    pub train_cues: Vec<Cues>,
    pub test_cues: Vec<Cues>,
}

/// Texture of class `c` at pixel `(y, x)`, in [-1, 1]. Classes cycle
/// through horizontal, vertical, diagonal and anti-diagonal stripes and a
/// checkerboard, at period 4 for the first five and 8 for the rest.
fn texture(c: usize, y: f64, x: f64, phase: (f64, f64)) -> f64 {
    let period = if c < 5 { 4.0 } else { 8.0 };
    let w = 2.0 * PI / period;
    match c % 5 {
        0 => (w * y + phase.0).cos(),
        1 => (w * x + phase.0).cos(),
        2 => (w * (x + y) / 2f64.sqrt() + phase.0).cos(),
        3 => (w * (x - y) / 2f64.sqrt() + phase.0).cos(),
        _ => (w * x + phase.0).cos() * (w * y + phase.1).cos(),
    }
}

/// Star-shaped polygon with `sides` vertices; `star` alternates the radius.
fn inside_polygon(sides: usize, star: bool, dy: f64, dx: f64, radius: f64, rot: f64) -> bool {
    let r = (dy * dy + dx * dx).sqrt();
    if r < 1e-9 {
        return true;
    }
    let verts = if star { 2 * sides } else { sides };
    let step = 2.0 * PI / verts as f64;
    let ang = (dy.atan2(dx) - rot).rem_euclid(2.0 * PI);
    let k = (ang / step).floor();
    let radius_at = |i: f64| if star && (i as usize) % 2 == 1 { radius * 0.45 } else { radius };
    let (a0, a1) = (k * step, (k + 1.0) * step);
    let (r0, r1) = (radius_at(k), radius_at((k + 1.0) % verts as f64));
    let p0 = (r0 * a0.cos(), r0 * a0.sin());
    let p1 = (r1 * a1.cos(), r1 * a1.sin());
    let q = (r * (ang).cos(), r * (ang).sin());
    // same side of the edge p0→p1 as the origin
    let cross = |a: (f64, f64), b: (f64, f64), c: (f64, f64)| (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0);
    cross(p0, p1, q) * cross(p0, p1, (0.0, 0.0)) >= 0.0
}

/// Structure of class `s`: a silhouette whose shape (triangle, square,
/// pentagon, hexagon, star) is `s % 5` and whose placement (upper left or
/// lower right) is `s / 5`.
fn structure_mask(s: usize, size: usize, jitter: (f64, f64), rot: f64, y: f64, x: f64) -> bool {
    let n = size as f64;
    let (cy, cx) = if s < 5 { (0.34 * n, 0.34 * n) } else { (0.66 * n, 0.66 * n) };
    let radius = 0.25 * n;
    let (sides, star) = match s % 5 {
        0 => (3, false),
        1 => (4, false),
        2 => (5, false),
        3 => (6, false),
        _ => (5, true),
    };
    inside_polygon(sides, star, y - (cy + jitter.0), x - (cx + jitter.1), radius, rot)
}

fn draw_cue(rng: &mut ChaCha8Rng, label: usize, classes: usize, p: f64) -> (usize, bool) {
    if rng.gen::<f64>() < p {
        (rng.gen_range(0..classes), true)
    } else {
        (label, false)
    }
}

fn synth_split(spec: &SynthSpec, n: usize, rng: &mut ChaCha8Rng) -> (Dataset, Vec<Cues>) {
    let size = spec.image;
    let plane = size * size;
    let noise = Normal::new(0.0, 0.03).expect("valid normal");
    let mut ds = Dataset { pixels: Vec::with_capacity(n * 3 * plane), labels: Vec::with_capacity(n), channels: 3, height: size, width: size, classes: spec.classes };
    let mut cues = Vec::with_capacity(n);
    let mut img = vec![0f64; 3 * plane];
    for i in 0..n {
        // balanced labels, order randomized by the batcher
        let label = i % spec.classes;
        let (tex, tex_rep) = draw_cue(rng, label, spec.classes, spec.p_tex);
        let (st, st_rep) = draw_cue(rng, label, spec.classes, spec.p_struct);
        let phase = (rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI));
        let jitter = (rng.gen_range(-2.0..=2.0), rng.gen_range(-2.0..=2.0));
        let rot = rng.gen_range(-0.2..=0.2);
        let background: [f64; 3] = [rng.gen_range(0.35..0.65), rng.gen_range(0.35..0.65), rng.gen_range(0.35..0.65)];
        let tint: [f64; 3] = [rng.gen_range(0.6..1.0), rng.gen_range(0.6..1.0), rng.gen_range(0.6..1.0)];
        let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
        for y in 0..size {
            for x in 0..size {
                let (fy, fx) = (y as f64, x as f64);
                let t = 0.2 * spec.texture_strength * texture(tex, fy, fx, phase);
                let m = if structure_mask(st, size, jitter, rot, fy, fx) { 0.3 * spec.structure_strength * sign } else { 0.0 };
                for c in 0..3 {
                    img[c * plane + y * size + x] = background[c] + m * tint[c] + t;
                }
            }
        }
        for v in &mut img {
            let px = (*v + noise.sample(rng)).clamp(0.0, 1.0);
            ds.pixels.push((px * 255.0).round() as u8);
        }
        ds.labels.push(label);
        cues.push(Cues { texture: tex, structure: st, texture_replaced: tex_rep, structure_replaced: st_rep });
    }
    (ds, cues)
}

/// Generates the train and test splits. Each label pairs a texture cue
/// with a structure cue; each cue is independently swapped for a random
/// class's cue with probability `p_tex` / `p_struct`.
pub fn synth_generate(spec: &SynthSpec) -> Result<SynthSet> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (train, train_cues) = synth_split(spec, spec.train, &mut rng);
    let (test, test_cues) = synth_split(spec, spec.test, &mut rng);
    Ok(SynthSet { train, test, train_cues, test_cues })
}

/// One draw of the random crop and flip. The shift is the crop offset
/// relative to the unpadded image, each component in `[-pad, pad]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentDraw {
    pub dy: isize,
    pub dx: isize,
    pub flip: bool,
}

impl AugmentDraw {
    pub const IDENTITY: Self = Self { dy: 0, dx: 0, flip: false };

    pub fn sample<R: Rng>(rng: &mut R, pad: usize) -> Self {
        let p = pad as isize;
        Self { dy: rng.gen_range(-p..=p), dx: rng.gen_range(-p..=p), flip: rng.gen::<bool>() }
    }
}

/// Zero-pads, crops back to `h×w` at the drawn offset and optionally
/// mirrors left to right.
pub fn crop_flip(src: &[f32], channels: usize, h: usize, w: usize, draw: AugmentDraw) -> Vec<f32> {
    let mut out = vec![0f32; channels * h * w];
    for c in 0..channels {
        for y in 0..h {
            let sy = y as isize + draw.dy;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let xo = if draw.flip { w - 1 - x } else { x };
                let sx = xo as isize + draw.dx;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                out[(c * h + y) * w + x] = src[(c * h + sy as usize) * w + sx as usize];
            }
        }
    }
    out
}

pub fn hflip(src: &[f32], channels: usize, h: usize, w: usize) -> Vec<f32> {
    crop_flip(src, channels, h, w, AugmentDraw { dy: 0, dx: 0, flip: true })
}

/// A training or evaluation batch. `soft` holds mixup targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    pub soft: Option<Tensor<T>>,
    pub classes: usize,
}

impl<T: Float> Batch<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Target rows: the mixup targets when present, else one-hot labels.
    pub fn targets(&self) -> Tensor<T> {
        self.soft.clone().unwrap_or_else(|| {
            let k = self.classes;
            let mut t = Tensor::zeros(&[self.len(), k]);
            for (i, &y) in self.labels.iter().enumerate() {
                t.data_mut()[i * k + y] = T::one();
            }
            t
        })
    }
}

/// Builds a normalized batch from the given examples, applying one
/// crop/flip draw per image when `draws` is given.
pub fn make_batch<T: Float>(ds: &Dataset, indices: &[usize], stats: &ChannelStats, draws: Option<&[AugmentDraw]>) -> Batch<T> {
    let (c, h, w) = (ds.channels, ds.height, ds.width);
    let mut data = Vec::with_capacity(indices.len() * ds.image_len());
    for (j, &i) in indices.iter().enumerate() {
        let raw: Vec<f32> = ds.image(i).iter().map(|&b| b as f32 / 255.0).collect();
        let mut img = match draws {
            Some(d) => crop_flip(&raw, c, h, w, d[j]),
            None => raw,
        };
        stats.normalize(&mut img);
        data.extend(img.into_iter().map(|v| T::of(v as f64)));
    }
    Batch {
        images: Tensor::new(&[indices.len(), c, h, w], data).expect("consistent batch shape"),
        labels: indices.iter().map(|&i| ds.labels[i]).collect(),
        soft: None,
        classes: ds.classes,
    }
}

/// Convex combination of each example with `perm[i]`: images and targets
/// are mixed as `λ·x_i + (1−λ)·x_perm[i]`.
pub fn mixup_with<T: Float>(batch: &Batch<T>, lambda: f64, perm: &[usize]) -> Batch<T> {
    let n = batch.len();
    let per = batch.images.numel() / n;
    let targets = batch.targets();
    let k = batch.classes;
    let (l, r) = (T::of(lambda), T::of(1.0 - lambda));
    let mix = |src: &[T], width: usize| -> Vec<T> {
        (0..n)
            .flat_map(|i| {
                let a = &src[i * width..(i + 1) * width];
                let b = &src[perm[i] * width..(perm[i] + 1) * width];
                a.iter().zip(b).map(|(&x, &y)| l * x + r * y).collect::<Vec<_>>()
            })
            .collect()
    };
    Batch {
        images: Tensor::new(batch.images.shape(), mix(batch.images.data(), per)).expect("same shape"),
        labels: batch.labels.clone(),
        soft: Some(Tensor::new(&[n, k], mix(targets.data(), k)).expect("same shape")),
        classes: k,
    }
}

/// Mixup with `λ ~ Beta(α, α)` and a uniformly random pairing permutation.
pub fn mixup<T: Float, R: Rng>(batch: &Batch<T>, alpha: f64, rng: &mut R) -> Result<Batch<T>> {
    if !(alpha > 0.0) {
        return Err(Error::Parameter(format!("mixup alpha must be positive, got {alpha}")));
    }
    if batch.len() < 2 {
        return Err(Error::Parameter("mixup needs a batch of at least two examples".into()));
    }
    let lambda = Beta::new(alpha, alpha).map_err(|e| Error::Parameter(e.to_string()))?.sample(rng);
    let mut perm: Vec<usize> = (0..batch.len()).collect();
    perm.shuffle(rng);
    Ok(mixup_with(batch, lambda, &perm))
}

/// Index batches for one epoch: a shuffle seeded by `seed ^ epoch`,
/// fixed-size batches and a final partial batch.
pub fn batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if n == 0 {
        return Err(Error::Parameter("cannot batch an empty dataset".into()));
    }
    if batch_size == 0 {
        return Err(Error::Parameter("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ epoch));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

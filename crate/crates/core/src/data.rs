//! Synthetic blob segmentation corpus and its on-disk layout.
//!
//! A dataset split lives in one directory: `manifest.json` plus
//! `<id>_img.tnsr` (`[3, H, W]`, values in `[-1, 1]`) and `<id>_mask.tnsr`
//! (`[1, H, W]`, values in `{0, 1}`).

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::tensor::{derive_seed, Rng, Tensor, TensorError};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Tensor { path: PathBuf, source: TensorError },
    #[error("{path}: invalid manifest: {reason}")]
    Manifest { path: PathBuf, reason: String },
    #[error("{0}")]
    InvalidArgument(String),
}

pub type DataResult<T> = std::result::Result<T, DataError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Test => 2,
        }
    }
}

/// Paired conditioning image and binary mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    pub id: String,
    pub image: Tensor,
    pub mask: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorParams {
    pub seed: u64,
    pub min_blobs: usize,
    pub max_blobs: usize,
    pub min_foreground: f64,
    pub max_foreground: f64,
    /// Minimum mean-intensity gap between blob and background.
    pub min_contrast: f64,
}

impl GeneratorParams {
    pub fn new(seed: u64) -> Self {
        Self { seed, min_blobs: 1, max_blobs: 3, min_foreground: 0.03, max_foreground: 0.5, min_contrast: 0.6 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub image: String,
    pub mask: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub height: usize,
    pub width: usize,
    pub count: usize,
    pub split: Split,
    pub generator: GeneratorParams,
    pub samples: Vec<ManifestEntry>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<SegSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn height(&self) -> usize {
        self.manifest.height
    }

    pub fn width(&self) -> usize {
        self.manifest.width
    }
}

struct Blob {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    angle: f64,
}

impl Blob {
    /// Normalized elliptical radius; `< 1` inside.
    fn radius(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.angle.sin_cos();
        let u = (c * dx + s * dy) / self.rx;
        let v = (-s * dx + c * dy) / self.ry;
        (u * u + v * v).sqrt()
    }
}

/// Low-frequency texture: sum of a few random plane waves, roughly in [-1, 1].
struct Texture {
    waves: Vec<(f64, f64, f64, f64)>,
}

impl Texture {
    fn new(rng: &mut Rng, waves: usize, max_freq: f64) -> Self {
        let waves = (0..waves)
            .map(|_| {
                let theta = rng.uniform_range(0.0, 2.0 * PI);
                let f = rng.uniform_range(0.5, max_freq);
                (f * theta.cos(), f * theta.sin(), rng.uniform_range(0.0, 2.0 * PI), rng.uniform_range(0.5, 1.0))
            })
            .collect::<Vec<_>>();
        Self { waves }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        let norm: f64 = self.waves.iter().map(|w| w.3).sum();
        self.waves.iter().map(|&(fx, fy, ph, a)| a * (2.0 * PI * (fx * x + fy * y) + ph).sin()).sum::<f64>() / norm
    }
}

fn sample_blobs(rng: &mut Rng, params: &GeneratorParams) -> Vec<Blob> {
    let n = params.min_blobs + rng.below(params.max_blobs - params.min_blobs + 1);
    (0..n)
        .map(|_| Blob {
            cx: rng.uniform_range(0.2, 0.8),
            cy: rng.uniform_range(0.2, 0.8),
            rx: rng.uniform_range(0.08, 0.25),
            ry: rng.uniform_range(0.08, 0.25),
            angle: rng.uniform_range(0.0, PI),
        })
        .collect()
}

/// One sample, drawn from its own seeded stream.
pub fn generate_sample(id: String, height: usize, width: usize, params: &GeneratorParams, seed: u64) -> SegSample {
    let mut rng = Rng::new(seed);
    let (hf, wf) = (height as f64, width as f64);
    let coord = |i: usize, n: f64| (i as f64 + 0.5) / n;

    let (blobs, mask) = loop {
        let blobs = sample_blobs(&mut rng, params);
        let mut mask = vec![0f32; height * width];
        for y in 0..height {
            for x in 0..width {
                if blobs.iter().any(|b| b.radius(coord(x, wf), coord(y, hf)) < 1.0) {
                    mask[y * width + x] = 1.0;
                }
            }
        }
        let frac = mask.iter().map(|&m| m as f64).sum::<f64>() / (height * width) as f64;
        if (params.min_foreground..=params.max_foreground).contains(&frac) {
            break (blobs, mask);
        }
    };

    let bg_level = rng.uniform_range(-0.7, 0.7);
    let fg_level = loop {
        let v = rng.uniform_range(-0.9, 0.9);
        if (v - bg_level).abs() >= params.min_contrast {
            break v;
        }
    };
    let bg_tint: [f64; 3] = std::array::from_fn(|_| rng.uniform_range(-0.15, 0.15));
    let fg_tint: [f64; 3] = std::array::from_fn(|_| rng.uniform_range(-0.15, 0.15));
    let bg_tex = Texture::new(&mut rng, 4, 3.0);
    let fg_tex = Texture::new(&mut rng, 3, 8.0);
    let edge = rng.uniform_range(0.03, 0.08);

    let mut image = vec![0f32; 3 * height * width];
    for y in 0..height {
        for x in 0..width {
            let (u, v) = (coord(x, wf), coord(y, hf));
            let r = blobs.iter().map(|b| b.radius(u, v)).fold(f64::INFINITY, f64::min);
            let alpha = 1.0 / (1.0 + ((r - 1.0) / edge).exp());
            let bg = bg_level + 0.15 * bg_tex.at(u, v);
            let fg = fg_level + 0.1 * fg_tex.at(u, v);
            for (c, (bt, ft)) in bg_tint.iter().zip(&fg_tint).enumerate() {
                let val = (1.0 - alpha) * (bg + bt) + alpha * (fg + ft);
                image[(c * height + y) * width + x] = val.clamp(-1.0, 1.0) as f32;
            }
        }
    }
    SegSample {
        id,
        image: Tensor::new(&[3, height, width], image).expect("image shape"),
        mask: Tensor::new(&[1, height, width], mask).expect("mask shape"),
    }
}

fn check_dims(height: usize, width: usize) -> DataResult<()> {
    if height == 0 || width == 0 || height % 8 != 0 || width % 8 != 0 {
        return Err(DataError::InvalidArgument(format!("image size {height}x{width} must be a positive multiple of 8")));
    }
    Ok(())
}

/// All samples of one split, in id order.
pub fn generate_split(split: Split, n: usize, height: usize, width: usize, seed: u64) -> DataResult<Vec<SegSample>> {
    check_dims(height, width)?;
    if n == 0 {
        return Err(DataError::InvalidArgument("sample count must be at least 1".into()));
    }
    let params = GeneratorParams::new(seed);
    let split_seed = derive_seed(seed, split.stream());
    Ok((0..n)
        .map(|i| {
            let id = format!("{}_{i:05}", split.name());
            generate_sample(id, height, width, &params, derive_seed(split_seed, i as u64))
        })
        .collect())
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_path_buf(), source }
}

fn write_tensor(path: &Path, t: &Tensor) -> DataResult<()> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    t.write_tnsr(BufWriter::new(file)).map_err(io_err(path))
}

pub fn read_tensor(path: &Path) -> DataResult<Tensor> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Tensor::from_tnsr_bytes(&bytes).map_err(|source| DataError::Tensor { path: path.to_path_buf(), source })
}

pub fn write_split(dir: &Path, split: Split, samples: &[SegSample], params: &GeneratorParams) -> DataResult<DatasetManifest> {
    let first = samples.first().ok_or_else(|| DataError::InvalidArgument("empty split".into()))?;
    let (height, width) = (first.mask.shape()[1], first.mask.shape()[2]);
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut entries = Vec::with_capacity(samples.len());
    for s in samples {
        let image = format!("{}_img.tnsr", s.id);
        let mask = format!("{}_mask.tnsr", s.id);
        write_tensor(&dir.join(&image), &s.image)?;
        write_tensor(&dir.join(&mask), &s.mask)?;
        entries.push(ManifestEntry { id: s.id.clone(), image, mask });
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        height,
        width,
        count: samples.len(),
        split,
        generator: params.clone(),
        samples: entries,
    };
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json + "\n").map_err(io_err(&path))?;
    Ok(manifest)
}

/// Writes `root/train` and `root/test`.
pub fn generate_dataset(root: &Path, n_train: usize, n_test: usize, height: usize, width: usize, seed: u64) -> DataResult<()> {
    let params = GeneratorParams::new(seed);
    for (split, n) in [(Split::Train, n_train), (Split::Test, n_test)] {
        let samples = generate_split(split, n, height, width, seed)?;
        write_split(&root.join(split.name()), split, &samples, &params)?;
    }
    Ok(())
}

pub fn read_manifest(dir: &Path) -> DataResult<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| DataError::Manifest { path: path.clone(), reason: e.to_string() })?;
    let bad = |reason: String| DataError::Manifest { path: path.clone(), reason };
    if manifest.version != MANIFEST_VERSION {
        return Err(bad(format!("unsupported version {}", manifest.version)));
    }
    if manifest.count != manifest.samples.len() {
        return Err(bad(format!("count {} but {} entries", manifest.count, manifest.samples.len())));
    }
    let ids: BTreeSet<&str> = manifest.samples.iter().map(|e| e.id.as_str()).collect();
    if ids.len() != manifest.samples.len() {
        return Err(bad("duplicate sample ids".into()));
    }
    Ok(manifest)
}

/// Loads and validates every tensor listed in the split's manifest.
pub fn load_split(dir: &Path) -> DataResult<Dataset> {
    let manifest = read_manifest(dir)?;
    let (h, w) = (manifest.height, manifest.width);
    let mut samples = Vec::with_capacity(manifest.count);
    for e in &manifest.samples {
        let img_path = dir.join(&e.image);
        let mask_path = dir.join(&e.mask);
        let image = read_tensor(&img_path)?;
        let mask = read_tensor(&mask_path)?;
        let shape_err = |path: &Path, got: &[usize]| DataError::Manifest {
            path: path.to_path_buf(),
            reason: format!("unexpected shape {got:?} for {h}x{w} dataset"),
        };
        if image.shape() != [3, h, w] {
            return Err(shape_err(&img_path, image.shape()));
        }
        if mask.shape() != [1, h, w] {
            return Err(shape_err(&mask_path, mask.shape()));
        }
        if mask.data().iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(DataError::Manifest { path: mask_path, reason: "mask is not binary".into() });
        }
        samples.push(SegSample { id: e.id.clone(), image, mask });
    }
    Ok(Dataset { manifest, samples })
}

/// A stacked minibatch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub ids: Vec<String>,
    pub indices: Vec<usize>,
    /// `[B, 3, H, W]` in `[-1, 1]`.
    pub images: Tensor,
    /// `[B, 1, H, W]` in `{0, 1}`.
    pub masks: Tensor,
}

/// Stacks the given samples into one batch.
pub fn make_batch(samples: &[SegSample], indices: &[usize]) -> Batch {
    let images: Vec<Tensor> = indices.iter().map(|&i| samples[i].image.unsqueeze0()).collect();
    let masks: Vec<Tensor> = indices.iter().map(|&i| samples[i].mask.unsqueeze0()).collect();
    Batch {
        ids: indices.iter().map(|&i| samples[i].id.clone()).collect(),
        indices: indices.to_vec(),
        images: Tensor::stack_batch(&images).expect("uniform sample shapes"),
        masks: Tensor::stack_batch(&masks).expect("uniform sample shapes"),
    }
}

/// Index order for one epoch; epoch `e` of seed `s` is always the same permutation.
pub fn epoch_order(n: usize, shuffle_seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    Rng::new(derive_seed(shuffle_seed, epoch)).shuffle(&mut order);
    order
}

/// One epoch of batches; the last batch may be short.
pub fn load_batches(dataset: &Dataset, batch_size: usize, shuffle_seed: u64) -> DataResult<impl Iterator<Item = Batch> + '_> {
    if batch_size == 0 {
        return Err(DataError::InvalidArgument("batch size must be at least 1".into()));
    }
    let order = epoch_order(dataset.len(), shuffle_seed, 0);
    let chunks: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    Ok(chunks.into_iter().map(move |idx| make_batch(&dataset.samples, &idx)))
}

/// Endless stream of full batches drawn epoch by epoch.
pub struct BatchSampler {
    n: usize,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl BatchSampler {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> DataResult<Self> {
        if n == 0 || batch_size == 0 {
            return Err(DataError::InvalidArgument("need at least one sample and batch size >= 1".into()));
        }
        Ok(Self { n, batch_size, seed, epoch: 0, order: epoch_order(n, seed, 0), pos: 0 })
    }

    pub fn next_indices(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch_size);
        while out.len() < self.batch_size {
            if self.pos == self.n {
                self.epoch += 1;
                self.order = epoch_order(self.n, self.seed, self.epoch);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// `[B, 1, H, W]` masks in `{0, 1}` to `[B, 3, H, W]` in `{-1, 1}`.
pub fn masks_to_rgb(masks: &Tensor) -> Tensor {
    let s = masks.shape();
    let (b, hw) = (s[0], s[2] * s[3]);
    let mut out = Vec::with_capacity(b * 3 * hw);
    for i in 0..b {
        let m = &masks.data()[i * hw..(i + 1) * hw];
        for _ in 0..3 {
            out.extend(m.iter().map(|&v| 2.0 * v - 1.0));
        }
    }
    Tensor::new(&[b, 3, s[2], s[3]], out).expect("mask shape")
}

/// Foreground fraction of a `[1, H, W]` or `[H, W]` mask.
pub fn foreground_fraction(mask: &Tensor) -> f64 {
    mask.data().iter().map(|&m| m as f64).sum::<f64>() / mask.numel() as f64
}

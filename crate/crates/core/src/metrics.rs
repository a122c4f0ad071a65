//! Overlap metrics for binary masks, image-similarity metrics, a fixed
//! random-feature perceptual distance, and the repeated-inference stability
//! protocol.

use serde::Serialize;

use crate::model::Prediction;
use crate::par;
use crate::tensor::kernels::{conv2d_forward, ConvGeom};
use crate::tensor::{Rng, Tensor};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    Shape(Vec<usize>, Vec<usize>),
    #[error("mask is not binary (found {0})")]
    NonBinary(f32),
    #[error("{0}")]
    Invalid(String),
}

pub type MetricResult<T> = std::result::Result<T, MetricError>;

/// Reported in place of an infinite PSNR.
pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// First three of the usual five-scale weights, before renormalization.
pub const MS_SSIM_BASE_WEIGHTS: [f64; 3] = [0.0448, 0.2856, 0.3001];
/// Seed of the frozen feature extractor used by [`feat_dist`].
pub const FEAT_SEED: u64 = 0x5EED_F00D;

fn same_shape(a: &Tensor, b: &Tensor) -> MetricResult<()> {
    if a.shape() != b.shape() {
        return Err(MetricError::Shape(a.shape().to_vec(), b.shape().to_vec()));
    }
    Ok(())
}

fn binary_counts(pred: &Tensor, gt: &Tensor) -> MetricResult<(usize, usize, usize)> {
    same_shape(pred, gt)?;
    let (mut inter, mut a, mut b) = (0, 0, 0);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        for v in [p, g] {
            if v != 0.0 && v != 1.0 {
                return Err(MetricError::NonBinary(v));
            }
        }
        let (p, g) = (p == 1.0, g == 1.0);
        inter += (p && g) as usize;
        a += p as usize;
        b += g as usize;
    }
    Ok((inter, a, b))
}

/// `2|A n B| / (|A| + |B|)`; two empty masks score 1.
pub fn dice(pred: &Tensor, gt: &Tensor) -> MetricResult<f64> {
    let (i, a, b) = binary_counts(pred, gt)?;
    Ok(if a + b == 0 { 1.0 } else { 2.0 * i as f64 / (a + b) as f64 })
}

/// `|A n B| / |A u B|`; two empty masks score 1.
pub fn iou(pred: &Tensor, gt: &Tensor) -> MetricResult<f64> {
    let (i, a, b) = binary_counts(pred, gt)?;
    let union = a + b - i;
    Ok(if union == 0 { 1.0 } else { i as f64 / union as f64 })
}

/// Peak signal-to-noise ratio for data range 1, capped at [`PSNR_CAP`].
pub fn psnr(a: &Tensor, b: &Tensor) -> MetricResult<f64> {
    same_shape(a, b)?;
    let mse = a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>() / a.numel() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering of an `h x w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, taps: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = taps.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for xo in 0..ow {
            rows[y * ow + xo] = taps.iter().enumerate().map(|(i, t)| t * x[y * w + xo + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for yo in 0..oh {
        for xo in 0..ow {
            out[yo * ow + xo] = taps.iter().enumerate().map(|(i, t)| t * rows[(yo + i) * ow + xo]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean SSIM and mean contrast-structure term of one plane.
fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> (f64, f64) {
    let taps = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let prod = |f: &dyn Fn(f64, f64) -> f64| a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect::<Vec<_>>();
    let (mu_a, oh, ow) = filter_valid(a, h, w, &taps);
    let (mu_b, _, _) = filter_valid(b, h, w, &taps);
    let (aa, _, _) = filter_valid(&prod(&|x, _| x * x), h, w, &taps);
    let (bb, _, _) = filter_valid(&prod(&|_, y| y * y), h, w, &taps);
    let (ab, _, _) = filter_valid(&prod(&|x, y| x * y), h, w, &taps);
    let n = (oh * ow) as f64;
    let (mut ssim, mut cs) = (0.0, 0.0);
    for i in 0..oh * ow {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        let csi = (2.0 * cov + c2) / (va + vb + c2);
        let li = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
        ssim += li * csi;
        cs += csi;
    }
    (ssim / n, cs / n)
}

/// Splits `[C, H, W]` (or `[H, W]`) into `f64` planes.
fn planes(t: &Tensor) -> MetricResult<(Vec<Vec<f64>>, usize, usize)> {
    let s = t.shape();
    let (c, h, w) = match s.len() {
        2 => (1, s[0], s[1]),
        3 => (s[0], s[1], s[2]),
        _ => return Err(MetricError::Invalid(format!("expected [C, H, W] or [H, W], got {s:?}"))),
    };
    let hw = h * w;
    Ok(((0..c).map(|i| t.data()[i * hw..(i + 1) * hw].iter().map(|&v| v as f64).collect()).collect(), h, w))
}

fn check_window(h: usize, w: usize) -> MetricResult<()> {
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(MetricError::Invalid(format!("{h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")));
    }
    Ok(())
}

/// Gaussian-window SSIM averaged over the valid region and channels.
pub fn ssim(a: &Tensor, b: &Tensor) -> MetricResult<f64> {
    same_shape(a, b)?;
    let (pa, h, w) = planes(a)?;
    let (pb, _, _) = planes(b)?;
    check_window(h, w)?;
    Ok(pa.iter().zip(&pb).map(|(x, y)| ssim_plane(x, y, h, w).0).sum::<f64>() / pa.len() as f64)
}

fn avg_pool2(x: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for xo in 0..ow {
            let i = 2 * y * w + 2 * xo;
            out[y * ow + xo] = 0.25 * (x[i] + x[i + 1] + x[i + w] + x[i + w + 1]);
        }
    }
    (out, oh, ow)
}

pub fn ms_ssim_weights() -> [f64; 3] {
    let s: f64 = MS_SSIM_BASE_WEIGHTS.iter().sum();
    MS_SSIM_BASE_WEIGHTS.map(|w| w / s)
}

/// Three-scale MS-SSIM with 2x2 average pooling between scales.
pub fn ms_ssim(a: &Tensor, b: &Tensor) -> MetricResult<f64> {
    same_shape(a, b)?;
    let (pa, h, w) = planes(a)?;
    let (pb, _, _) = planes(b)?;
    let weights = ms_ssim_weights();
    check_window(h >> (weights.len() - 1), w >> (weights.len() - 1))?;
    let mut total = 0.0;
    for (x0, y0) in pa.iter().zip(&pb) {
        let (mut x, mut y, mut hh, mut ww) = (x0.clone(), y0.clone(), h, w);
        let mut value = 1.0;
        for (level, &wt) in weights.iter().enumerate() {
            let (s, cs) = ssim_plane(&x, &y, hh, ww);
            let term = if level + 1 == weights.len() { s } else { cs };
            value *= term.max(0.0).powf(wt);
            if level + 1 < weights.len() {
                let (nx, nh, nw) = avg_pool2(&x, hh, ww);
                y = avg_pool2(&y, hh, ww).0;
                x = nx;
                hh = nh;
                ww = nw;
            }
        }
        total += value;
    }
    Ok(total / pa.len() as f64)
}

/// Frozen random convolutional features for [`feat_dist`].
pub struct FeatureNet {
    layers: Vec<(Vec<f32>, ConvGeomTemplate)>,
}

#[derive(Clone, Copy)]
struct ConvGeomTemplate {
    cin: usize,
    cout: usize,
    stride: usize,
}

impl FeatureNet {
    pub fn new(seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        let spec = [(3, 8, 1), (8, 16, 2), (16, 32, 2)];
        let layers = spec
            .iter()
            .map(|&(cin, cout, stride)| {
                let fan_in = (cin * 9) as f64;
                let w = (0..cout * cin * 9).map(|_| (rng.normal() / fan_in.sqrt()) as f32).collect();
                (w, ConvGeomTemplate { cin, cout, stride })
            })
            .collect();
        Self { layers }
    }

    /// Unit-normalized feature maps of a `[3, H, W]` image in `[0, 1]`.
    fn features(&self, x: &Tensor) -> Vec<(Vec<f32>, usize, usize)> {
        let s = x.shape();
        let (mut h, mut w) = (s[1], s[2]);
        let mut cur: Vec<f32> = x.data().iter().map(|&v| 2.0 * v - 1.0).collect();
        let mut out = Vec::with_capacity(self.layers.len());
        for (weights, t) in &self.layers {
            let geom = ConvGeom { batch: 1, cin: t.cin, h, w, cout: t.cout, k: 3, stride: t.stride, pad: 1 };
            let mut y = conv2d_forward(&cur, weights, None, &geom);
            y.iter_mut().for_each(|v| *v = v.max(0.0));
            h = geom.out_h();
            w = geom.out_w();
            let hw = h * w;
            let mut normed = y.clone();
            for p in 0..hw {
                let norm = (0..t.cout).map(|c| y[c * hw + p].powi(2)).sum::<f32>().sqrt() + 1e-10;
                for c in 0..t.cout {
                    normed[c * hw + p] = y[c * hw + p] / norm;
                }
            }
            out.push((normed, t.cout, hw));
            cur = y;
        }
        out
    }
}

fn to_rgb(t: &Tensor) -> MetricResult<Tensor> {
    let s = t.shape();
    match s {
        [3, _, _] => Ok(t.clone()),
        [1, h, w] => {
            let mut d = Vec::with_capacity(3 * h * w);
            for _ in 0..3 {
                d.extend_from_slice(t.data());
            }
            Ok(Tensor::new(&[3, *h, *w], d).expect("shape"))
        }
        _ => Err(MetricError::Invalid(format!("feat_dist expects [3|1, H, W], got {s:?}"))),
    }
}

/// Random-feature perceptual distance: per layer, the spatial mean of the
/// squared difference of channel-normalized features, averaged over layers.
/// One-channel maps are replicated to three channels.
pub fn feat_dist_with(net: &FeatureNet, a: &Tensor, b: &Tensor) -> MetricResult<f64> {
    same_shape(a, b)?;
    let fa = net.features(&to_rgb(a)?);
    let fb = net.features(&to_rgb(b)?);
    let mut total = 0.0;
    for ((xa, _, hw), (xb, _, _)) in fa.iter().zip(&fb) {
        let sq: f64 = xa.iter().zip(xb).map(|(&p, &q)| ((p - q) as f64).powi(2)).sum();
        total += sq / *hw as f64;
    }
    Ok(total / fa.len() as f64)
}

pub fn feat_dist(a: &Tensor, b: &Tensor) -> MetricResult<f64> {
    feat_dist_with(&FeatureNet::new(FEAT_SEED), a, b)
}

#[derive(Clone, Debug, Serialize)]
pub struct SegScores {
    pub dice: Vec<f64>,
    pub iou: Vec<f64>,
    pub mean_dice: f64,
    pub mean_iou: f64,
}

/// Per-sample and mean Dice/IoU.
pub fn score_masks(preds: &[Tensor], gts: &[Tensor]) -> MetricResult<SegScores> {
    if preds.len() != gts.len() || preds.is_empty() {
        return Err(MetricError::Invalid(format!("{} predictions for {} targets", preds.len(), gts.len())));
    }
    let dice: Vec<f64> = preds.iter().zip(gts).map(|(p, g)| dice(p, g)).collect::<MetricResult<_>>()?;
    let iou: Vec<f64> = preds.iter().zip(gts).map(|(p, g)| iou(p, g)).collect::<MetricResult<_>>()?;
    let n = dice.len() as f64;
    Ok(SegScores { mean_dice: dice.iter().sum::<f64>() / n, mean_iou: iou.iter().sum::<f64>() / n, dice, iou })
}

/// Produces one prediction per test image for a given noise seed.
pub trait StochasticSegmenter: Sync {
    fn predict_all(&self, seed: u64) -> MetricResult<Vec<Prediction>>;
}

impl<F: Fn(u64) -> MetricResult<Vec<Prediction>> + Sync> StochasticSegmenter for F {
    fn predict_all(&self, seed: u64) -> MetricResult<Vec<Prediction>> {
        self(seed)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct StabilityScores {
    pub feat_dist: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub ms_ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StabilityReport {
    pub runs: usize,
    pub seeds: Vec<u64>,
    /// Binary maps.
    pub seg: StabilityScores,
    /// Probability maps.
    pub score: StabilityScores,
}

fn pair_scores(a: &Tensor, b: &Tensor, net: &FeatureNet) -> MetricResult<StabilityScores> {
    Ok(StabilityScores { feat_dist: feat_dist_with(net, a, b)?, psnr: psnr(a, b)?, ssim: ssim(a, b)?, ms_ssim: ms_ssim(a, b)? })
}

/// Runs the segmenter once per seed and compares every pair of runs
/// image by image. Dataset-level `feat_dist` and instance-level
/// PSNR/SSIM/MS-SSIM are all means over run pairs and images.
pub fn stability_eval(model: &dyn StochasticSegmenter, seeds: &[u64]) -> MetricResult<StabilityReport> {
    if seeds.len() < 2 {
        return Err(MetricError::Invalid(format!("need at least 2 runs, got {}", seeds.len())));
    }
    let runs: Vec<Vec<Prediction>> = seeds.iter().map(|&s| model.predict_all(s)).collect::<MetricResult<_>>()?;
    let n = runs[0].len();
    if n == 0 || runs.iter().any(|r| r.len() != n) {
        return Err(MetricError::Invalid("runs must cover the same non-empty image set".into()));
    }
    let pairs: Vec<(usize, usize)> = (0..runs.len()).flat_map(|i| (i + 1..runs.len()).map(move |j| (i, j))).collect();
    let net = FeatureNet::new(FEAT_SEED);
    let per_image: Vec<MetricResult<(StabilityScores, StabilityScores)>> = par::map_range(n, |k| {
        let (mut seg, mut score) = (StabilityScores::default(), StabilityScores::default());
        for &(i, j) in &pairs {
            let s = pair_scores(&runs[i][k].mask, &runs[j][k].mask, &net)?;
            let p = pair_scores(&runs[i][k].prob, &runs[j][k].prob, &net)?;
            for (acc, v) in [(&mut seg, s), (&mut score, p)] {
                acc.feat_dist += v.feat_dist;
                acc.psnr += v.psnr;
                acc.ssim += v.ssim;
                acc.ms_ssim += v.ms_ssim;
            }
        }
        Ok((seg, score))
    });
    let denom = (pairs.len() * n) as f64;
    let (mut seg, mut score) = (StabilityScores::default(), StabilityScores::default());
    for r in per_image {
        let (s, p) = r?;
        for (acc, v) in [(&mut seg, s), (&mut score, p)] {
            acc.feat_dist += v.feat_dist / denom;
            acc.psnr += v.psnr / denom;
            acc.ssim += v.ssim / denom;
            acc.ms_ssim += v.ms_ssim / denom;
        }
    }
    Ok(StabilityReport { runs: seeds.len(), seeds: seeds.to_vec(), seg, score })
}

/// Ignores the seed: returns the same predictions every run.
pub struct FixedSegmenter(pub Vec<Prediction>);

impl StochasticSegmenter for FixedSegmenter {
    fn predict_all(&self, _seed: u64) -> MetricResult<Vec<Prediction>> {
        Ok(self.0.clone())
    }
}

/// Uniform noise probability maps, fresh for every seed.
pub struct NoiseSegmenter {
    pub count: usize,
    pub height: usize,
    pub width: usize,
}

impl StochasticSegmenter for NoiseSegmenter {
    fn predict_all(&self, seed: u64) -> MetricResult<Vec<Prediction>> {
        let mut rng = Rng::new(seed);
        Ok((0..self.count)
            .map(|_| {
                let prob: Vec<f32> = (0..self.height * self.width).map(|_| rng.uniform() as f32).collect();
                let mask = prob.iter().map(|&p| if p >= 0.5 { 1.0 } else { 0.0 }).collect();
                Prediction {
                    prob: Tensor::new(&[1, self.height, self.width], prob).expect("shape"),
                    mask: Tensor::new(&[1, self.height, self.width], mask).expect("shape"),
                }
            })
            .collect())
    }
}

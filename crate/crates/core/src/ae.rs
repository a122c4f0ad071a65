//! KL-regularized convolutional autoencoder with a factor-8 spatial
//! reduction.

use serde::{Deserialize, Serialize};

use crate::data::{masks_to_rgb, SegSample};
use crate::nn::{AdamW, AdamWConfig, AttentionBlock, Binding, Conv2d, Downsample, GroupNorm, ParamStore, ResBlock, ResBlockOptions, Upsample};
use crate::tensor::{derive_seed, randn, Graph, Real, Result, Rng, Tensor, TensorError, Var};

pub const LOGVAR_MIN: f64 = -30.0;
pub const LOGVAR_MAX: f64 = 20.0;
/// Total spatial reduction of the encoder.
pub const DOWN_FACTOR: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AeConfig {
    /// Base channel width `C`; the encoder reaches `4C` at the bottleneck.
    pub channels: usize,
    /// Latent channels `Z`.
    pub latent_channels: usize,
    pub in_channels: usize,
}

impl Default for AeConfig {
    fn default() -> Self {
        Self { channels: 32, latent_channels: 4, in_channels: 3 }
    }
}

fn no_time() -> ResBlockOptions {
    ResBlockOptions::default()
}

#[derive(Clone, Debug)]
struct MidBlock {
    res1: ResBlock,
    attn: AttentionBlock,
    res2: ResBlock,
}

impl MidBlock {
    fn new<F: Real>(store: &mut ParamStore<F>, name: &str, ch: usize, rng: &mut Rng) -> Self {
        Self {
            res1: ResBlock::new(store, &format!("{name}.res1"), ch, ch, no_time(), rng),
            attn: AttentionBlock::new_self(store, &format!("{name}.attn"), ch, rng),
            res2: ResBlock::new(store, &format!("{name}.res2"), ch, ch, no_time(), rng),
        }
    }

    fn forward<F: Real>(&self, g: &mut Graph<F>, p: &Binding, x: Var) -> Result<Var> {
        let h = self.res1.forward(g, p, x, None)?;
        let h = self.attn.forward(g, p, h, None)?;
        self.res2.forward(g, p, h, None)
    }
}

/// Image to posterior parameters: conv in, three ResBlock pairs each
/// followed by a downsample, one more ResBlock pair, a mid block, and an
/// output head emitting `2Z` channels (mean then logvar).
#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: AeConfig,
    conv_in: Conv2d,
    stages: Vec<(ResBlock, ResBlock, Option<Downsample>)>,
    mid: MidBlock,
    norm_out: GroupNorm,
    conv_out: Conv2d,
    moments: Conv2d,
}

impl Encoder {
    pub fn new<F: Real>(store: &mut ParamStore<F>, prefix: &str, config: &AeConfig, rng: &mut Rng) -> Self {
        let c = config.channels;
        let z2 = 2 * config.latent_channels;
        let conv_in = Conv2d::new(store, &format!("{prefix}.conv_in"), config.in_channels, c, 3, 1, rng);
        let widths = [(c, c, true), (c, 2 * c, true), (2 * c, 4 * c, true), (4 * c, 4 * c, false)];
        let stages = widths
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout, down))| {
                let name = format!("{prefix}.down{i}");
                let r1 = ResBlock::new(store, &format!("{name}.res1"), cin, cout, no_time(), rng);
                let r2 = ResBlock::new(store, &format!("{name}.res2"), cout, cout, no_time(), rng);
                let d = down.then(|| Downsample::new(store, &format!("{name}.down"), cout, rng));
                (r1, r2, d)
            })
            .collect();
        let mid = MidBlock::new(store, &format!("{prefix}.mid"), 4 * c, rng);
        let norm_out = GroupNorm::new(store, &format!("{prefix}.norm_out"), 4 * c);
        let conv_out = Conv2d::new(store, &format!("{prefix}.conv_out"), 4 * c, z2, 3, 1, rng);
        let moments = Conv2d::new(store, &format!("{prefix}.moments"), z2, z2, 1, 1, rng);
        Self { config: config.clone(), conv_in, stages, mid, norm_out, conv_out, moments }
    }

    /// Returns `(mean, logvar)`, logvar clamped to `[LOGVAR_MIN, LOGVAR_MAX]`.
    pub fn forward<F: Real>(&self, g: &mut Graph<F>, p: &Binding, x: Var) -> Result<(Var, Var)> {
        let s = g.shape(x).to_vec();
        if s.len() != 4 || s[1] != self.config.in_channels || s[2] % DOWN_FACTOR != 0 || s[3] % DOWN_FACTOR != 0 {
            return Err(TensorError::InvalidShape {
                shape: s,
                reason: format!("encoder expects [B, {}, H, W] with H, W divisible by 8", self.config.in_channels),
            });
        }
        let mut h = self.conv_in.forward(g, p, x)?;
        for (r1, r2, down) in &self.stages {
            h = r1.forward(g, p, h, None)?;
            h = r2.forward(g, p, h, None)?;
            if let Some(d) = down {
                h = d.forward(g, p, h)?;
            }
        }
        h = self.mid.forward(g, p, h)?;
        h = self.norm_out.forward(g, p, h)?;
        h = g.silu(h)?;
        h = self.conv_out.forward(g, p, h)?;
        h = self.moments.forward(g, p, h)?;
        let z = self.config.latent_channels;
        let parts = g.chunk_channels(h, &[z, z])?;
        let logvar = g.clamp(parts[1], LOGVAR_MIN, LOGVAR_MAX)?;
        Ok((parts[0], logvar))
    }
}

/// Latent to image: conv in, mid block, three ResBlock pairs each followed
/// by a nearest-neighbour upsample, then norm, SiLU and a 3-channel conv.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub config: AeConfig,
    conv_in: Conv2d,
    mid: MidBlock,
    stages: Vec<(ResBlock, ResBlock, Upsample)>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl Decoder {
    pub fn new<F: Real>(store: &mut ParamStore<F>, prefix: &str, config: &AeConfig, rng: &mut Rng) -> Self {
        let c = config.channels;
        let conv_in = Conv2d::new(store, &format!("{prefix}.conv_in"), config.latent_channels, 4 * c, 3, 1, rng);
        let mid = MidBlock::new(store, &format!("{prefix}.mid"), 4 * c, rng);
        let widths = [(4 * c, 4 * c), (4 * c, 2 * c), (2 * c, c)];
        let stages = widths
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout))| {
                let name = format!("{prefix}.up{i}");
                let r1 = ResBlock::new(store, &format!("{name}.res1"), cin, cout, no_time(), rng);
                let r2 = ResBlock::new(store, &format!("{name}.res2"), cout, cout, no_time(), rng);
                let u = Upsample::new(store, &format!("{name}.up"), cout, rng);
                (r1, r2, u)
            })
            .collect();
        let norm_out = GroupNorm::new(store, &format!("{prefix}.norm_out"), c);
        let conv_out = Conv2d::new(store, &format!("{prefix}.conv_out"), c, config.in_channels, 3, 1, rng);
        Self { config: config.clone(), conv_in, mid, stages, norm_out, conv_out }
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, p: &Binding, z: Var) -> Result<Var> {
        let s = g.shape(z).to_vec();
        if s.len() != 4 || s[1] != self.config.latent_channels {
            return Err(TensorError::InvalidShape {
                shape: s,
                reason: format!("decoder expects [B, {}, h, w]", self.config.latent_channels),
            });
        }
        let mut h = self.conv_in.forward(g, p, z)?;
        h = self.mid.forward(g, p, h)?;
        for (r1, r2, up) in &self.stages {
            h = r1.forward(g, p, h, None)?;
            h = r2.forward(g, p, h, None)?;
            h = up.forward(g, p, h)?;
        }
        h = self.norm_out.forward(g, p, h)?;
        h = g.silu(h)?;
        self.conv_out.forward(g, p, h)
    }
}

/// Diagonal Gaussian over latents.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPosterior<F: Real = f32> {
    pub mean: Tensor<F>,
    pub logvar: Tensor<F>,
}

impl<F: Real> GaussianPosterior<F> {
    pub fn mode(&self) -> &Tensor<F> {
        &self.mean
    }

    pub fn sample(&self, rng: &mut Rng) -> Result<Tensor<F>> {
        let eps: Tensor<F> = randn(self.mean.shape(), rng)?;
        let half = F::from_f64(0.5);
        let data = self
            .mean
            .data()
            .iter()
            .zip(self.logvar.data())
            .zip(eps.data())
            .map(|((&m, &lv), &e)| m + (lv * half).exp() * e)
            .collect();
        Tensor::new(self.mean.shape(), data)
    }

    /// Mean over elements of `KL(N(mean, exp(logvar)) || N(0, 1))`.
    pub fn kl(&self) -> f64 {
        let n = self.mean.numel() as f64;
        self.mean
            .data()
            .iter()
            .zip(self.logvar.data())
            .map(|(&m, &lv)| kl_element(m.as_f64(), lv.as_f64()))
            .sum::<f64>()
            / n
    }
}

/// `0.5 (mu^2 + sigma^2 - 1 - log sigma^2)`.
pub fn kl_element(mean: f64, logvar: f64) -> f64 {
    0.5 * (mean * mean + logvar.exp() - 1.0 - logvar)
}

/// Graph form of the KL summed over all elements.
pub fn kl_sum<F: Real>(g: &mut Graph<F>, mean: Var, logvar: Var) -> Result<Var> {
    let m2 = g.pow2(mean)?;
    let var = g.exp(logvar)?;
    let a = g.add(m2, var)?;
    let b = g.sub(a, logvar)?;
    let c = g.add_scalar(b, -1.0)?;
    let s = g.sum_all(c)?;
    g.scale(s, 0.5)
}

/// Encoder and decoder sharing one parameter store, plus the latent scale.
#[derive(Clone, Debug)]
pub struct Autoencoder<F: Real = f32> {
    pub config: AeConfig,
    pub params: ParamStore<F>,
    pub encoder: Encoder,
    pub decoder: Decoder,
    /// Multiplies encoder-mode latents before diffusion; divided out before decoding.
    pub latent_scale: f64,
}

pub const ENCODER_PREFIX: &str = "encoder";
pub const DECODER_PREFIX: &str = "decoder";

impl<F: Real> Autoencoder<F> {
    pub fn new(config: AeConfig, seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        let mut params = ParamStore::new();
        let encoder = Encoder::new(&mut params, ENCODER_PREFIX, &config, &mut rng);
        let decoder = Decoder::new(&mut params, DECODER_PREFIX, &config, &mut rng);
        Self { config, params, encoder, decoder, latent_scale: 1.0 }
    }

    /// Names of encoder parameters, in store order.
    pub fn encoder_param_names(&self) -> Vec<String> {
        self.params.iter().map(|(n, _)| n).filter(|n| n.starts_with(ENCODER_PREFIX)).map(str::to_string).collect()
    }

    pub fn encode(&self, x: &Tensor<F>) -> Result<GaussianPosterior<F>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let (m, lv) = self.encoder.forward(&mut g, &p, xv)?;
        Ok(GaussianPosterior { mean: g.value(m).clone(), logvar: g.value(lv).clone() })
    }

    pub fn decode(&self, z: &Tensor<F>) -> Result<Tensor<F>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let zv = g.constant(z.clone());
        let y = self.decoder.forward(&mut g, &p, zv)?;
        Ok(g.value(y).clone())
    }

    /// `latent_scale * mode(E(x))`, encoded in chunks of `chunk` items.
    pub fn encode_scaled(&self, x: &Tensor<F>, chunk: usize) -> Result<Tensor<F>> {
        let b = x.shape()[0];
        let mut parts = Vec::new();
        for start in (0..b).step_by(chunk.max(1)) {
            let items: Vec<Tensor<F>> =
                (start..(start + chunk).min(b)).map(|i| x.select_batch(i)).collect::<Result<_>>()?;
            let post = self.encode(&Tensor::stack_batch(&items)?)?;
            let s = F::from_f64(self.latent_scale);
            let scaled = post.mean.map(|v| v * s);
            for i in 0..items.len() {
                parts.push(scaled.select_batch(i)?);
            }
        }
        Tensor::stack_batch(&parts)
    }

    /// Inverse of the latent scale followed by the decoder.
    pub fn decode_scaled(&self, z: &Tensor<F>) -> Result<Tensor<F>> {
        let inv = F::from_f64(1.0 / self.latent_scale);
        self.decode(&z.map(|v| v * inv))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AeTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub kl_weight: f64,
    pub seed: u64,
}

impl Default for AeTrainConfig {
    fn default() -> Self {
        Self { steps: 3000, batch_size: 4, lr: 1e-4, kl_weight: 1e-6, seed: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AeStepLog {
    pub step: usize,
    pub loss: f64,
    pub rec: f64,
    pub kl: f64,
}

pub struct AeTrainOutput {
    pub model: Autoencoder,
    pub optimizer: AdamW<f32>,
    pub log: Vec<AeStepLog>,
}

/// Training inputs for one AE step: half masks (as signed RGB), half images.
pub fn ae_training_batch(samples: &[SegSample], batch_size: usize, rng: &mut Rng) -> Result<Tensor> {
    let mut items = Vec::with_capacity(batch_size);
    for k in 0..batch_size {
        let s = &samples[rng.below(samples.len())];
        if k % 2 == 0 {
            items.push(masks_to_rgb(&s.mask.unsqueeze0()));
        } else {
            items.push(s.image.unsqueeze0());
        }
    }
    Tensor::stack_batch(&items)
}

/// Reconstruction L1 plus the weighted KL. The KL is summed per sample and
/// divided by the pixel count so both terms keep their relative scale under
/// a per-pixel reconstruction mean.
pub fn ae_loss<F: Real>(ae: &Autoencoder<F>, g: &mut Graph<F>, p: &Binding, x: Var, kl_weight: f64, noise: &Tensor<F>) -> Result<(Var, Var, Var)> {
    let (mean, logvar) = ae.encoder.forward(g, p, x)?;
    let half = g.scale(logvar, 0.5)?;
    let std = g.exp(half)?;
    let eps = g.constant(noise.clone());
    let jitter = g.mul(std, eps)?;
    let z = g.add(mean, jitter)?;
    let rec = ae.decoder.forward(g, p, z)?;
    let l1 = g.l1_distance(rec, x)?;
    let kl = kl_sum(g, mean, logvar)?;
    let pixels = g.value(x).numel() as f64;
    let kl_term = g.scale(kl, kl_weight / pixels)?;
    let loss = g.add(l1, kl_term)?;
    let kl_mean = g.scale(kl, 1.0 / g.value(mean).numel() as f64)?;
    Ok((loss, l1, kl_mean))
}

pub fn train_autoencoder(
    samples: &[SegSample],
    ae_config: &AeConfig,
    train: &AeTrainConfig,
    mut on_step: impl FnMut(&AeStepLog),
) -> Result<AeTrainOutput> {
    if samples.is_empty() {
        return Err(TensorError::InvalidArgument { op: "train_autoencoder", reason: "empty dataset".into() });
    }
    let mut model = Autoencoder::<f32>::new(ae_config.clone(), derive_seed(train.seed, 0xAE));
    let opt_cfg = AdamWConfig { lr: train.lr, ..AdamWConfig::default() };
    let mut opt = AdamW::new(&model.params, opt_cfg);
    let mut batch_rng = Rng::new(derive_seed(train.seed, 1));
    let mut noise_rng = Rng::new(derive_seed(train.seed, 2));
    let mut log = Vec::with_capacity(train.steps);
    for step in 0..train.steps {
        let x = ae_training_batch(samples, train.batch_size, &mut batch_rng)?;
        let s = x.shape();
        let noise = randn(&[s[0], ae_config.latent_channels, s[2] / DOWN_FACTOR, s[3] / DOWN_FACTOR], &mut noise_rng)?;
        let mut g = Graph::new();
        let p = model.params.bind(&mut g, true);
        let xv = g.constant(x);
        let (loss, rec, kl) = ae_loss(&model, &mut g, &p, xv, train.kl_weight, &noise)?;
        let grads = g.backward(loss)?;
        let entry = AeStepLog {
            step,
            loss: g.value(loss).data()[0] as f64,
            rec: g.value(rec).data()[0] as f64,
            kl: g.value(kl).data()[0] as f64,
        };
        opt.step(&mut model.params, &p.grads(&grads), train.lr)?;
        on_step(&entry);
        log.push(entry);
    }
    model.latent_scale = compute_latent_scale(&model, samples)?;
    Ok(AeTrainOutput { model, optimizer: opt, log })
}

/// `1 / std` of encoder-mode latents of all training masks, rounded to `f32`.
pub fn compute_latent_scale<F: Real>(ae: &Autoencoder<F>, samples: &[SegSample]) -> Result<f64> {
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let mut n = 0usize;
    for chunk in samples.chunks(16) {
        let masks: Vec<Tensor> = chunk.iter().map(|s| s.mask.unsqueeze0()).collect();
        let x = masks_to_rgb(&Tensor::stack_batch(&masks)?).cast::<F>();
        let post = ae.encode(&x)?;
        for &v in post.mean.data() {
            let v = v.as_f64();
            sum += v;
            sum_sq += v * v;
        }
        n += post.mean.numel();
    }
    let mean = sum / n as f64;
    let var = (sum_sq / n as f64 - mean * mean).max(0.0);
    if var <= 0.0 {
        return Err(TensorError::InvalidArgument { op: "latent_scale", reason: "latents have zero variance".into() });
    }
    Ok((1.0 / var.sqrt()) as f32 as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_split, Split};

    fn tiny() -> AeConfig {
        AeConfig { channels: 4, latent_channels: 2, in_channels: 3 }
    }

    #[test]
    fn encode_shapes_and_logvar_clamp() {
        let ae = Autoencoder::<f32>::new(AeConfig { channels: 8, ..AeConfig::default() }, 0);
        let mut rng = Rng::new(1);
        let x: Tensor = crate::tensor::rand_uniform(&[2, 3, 64, 64], -1.0, 1.0, &mut rng).unwrap();
        let post = ae.encode(&x).unwrap();
        assert_eq!(post.mean.shape(), &[2, 4, 8, 8]);
        assert!(post.logvar.data().iter().all(|&v| (LOGVAR_MIN as f32..=LOGVAR_MAX as f32).contains(&v)));
        let y = ae.decode(post.mode()).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert_eq!(ae.decode(post.mode()).unwrap(), y);
    }

    #[test]
    fn rejects_indivisible_and_wrong_channels() {
        let ae = Autoencoder::<f32>::new(tiny(), 0);
        assert!(ae.encode(&Tensor::zeros(&[1, 3, 12, 16]).unwrap()).is_err());
        assert!(ae.decode(&Tensor::zeros(&[1, 3, 2, 2]).unwrap()).is_err());
    }

    #[test]
    fn paper_scale_latent_shape() {
        // Shape only: channel width does not affect the spatial rule.
        let ae = Autoencoder::<f32>::new(tiny(), 0);
        let post = ae.encode(&Tensor::zeros(&[1, 3, 256, 256]).unwrap()).unwrap();
        assert_eq!(&post.mean.shape()[2..], &[32, 32]);
        let ae4 = Autoencoder::<f32>::new(AeConfig { channels: 4, latent_channels: 4, in_channels: 3 }, 0);
        let post = ae4.encode(&Tensor::zeros(&[1, 3, 256, 256]).unwrap()).unwrap();
        assert_eq!(post.mean.shape(), &[1, 4, 32, 32]);
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_element(0.0, 0.0), 0.0);
        assert!((kl_element(1.0, 0.0) - 0.5).abs() < 1e-15);
        let post = GaussianPosterior::<f64> {
            mean: Tensor::full(&[1, 2, 1, 1], 1.0).unwrap(),
            logvar: Tensor::zeros(&[1, 2, 1, 1]).unwrap(),
        };
        assert!((post.kl() - 0.5).abs() < 1e-15);
        let mut g = Graph::<f64>::new();
        let m = g.constant(post.mean.clone());
        let lv = g.constant(post.logvar.clone());
        let k = kl_sum(&mut g, m, lv).unwrap();
        assert!((g.value(k).data()[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn sample_uses_mean_and_std() {
        let post = GaussianPosterior::<f64> {
            mean: Tensor::full(&[20000], 2.0).unwrap(),
            logvar: Tensor::full(&[20000], (0.25f64).ln()).unwrap(),
        };
        let s = post.sample(&mut Rng::new(3)).unwrap();
        let n = s.numel() as f64;
        let mean = s.data().iter().sum::<f64>() / n;
        let var = s.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!((mean - 2.0).abs() < 0.02);
        assert!((var.sqrt() - 0.5).abs() < 0.02);
    }

    #[test]
    fn loss_gradcheck_small() {
        let ae = Autoencoder::<f64>::new(tiny(), 5);
        let mut rng = Rng::new(6);
        let x: Tensor<f64> = crate::tensor::rand_uniform(&[1, 3, 8, 8], -1.0, 1.0, &mut rng).unwrap();
        let inputs: Vec<Tensor<f64>> = ae.params.iter().map(|(_, t)| t.clone()).collect();
        let report = crate::tensor::gradcheck::check(&inputs, 1e-5, 3, |g, v| {
            let p = Binding::from_vars(v.to_vec());
            let xv = g.constant(x.clone());
            // Weighted sum instead of L1 keeps the finite differences away from kinks.
            let (mean, logvar) = ae.encoder.forward(g, &p, xv)?;
            let rec = ae.decoder.forward(g, &p, mean)?;
            let kl = kl_sum(g, mean, logvar)?;
            let w = crate::tensor::gradcheck::weighted_sum(g, rec, 9)?;
            g.add(w, kl)
        })
        .unwrap();
        assert!(report.max_rel_err <= 1e-4, "{report:?}");
    }

    #[test]
    fn empty_dataset_errors() {
        assert!(train_autoencoder(&[], &tiny(), &AeTrainConfig::default(), |_| {}).is_err());
    }

    #[test]
    fn short_training_runs_and_sets_scale() {
        let samples = generate_split(Split::Train, 4, 16, 16, 0).unwrap();
        let cfg = AeTrainConfig { steps: 3, batch_size: 2, ..AeTrainConfig::default() };
        let out = train_autoencoder(&samples, &tiny(), &cfg, |_| {}).unwrap();
        assert_eq!(out.log.len(), 3);
        assert_eq!(out.optimizer.step_count(), 3);
        assert!(out.model.latent_scale.is_finite() && out.model.latent_scale > 0.0);
    }
}

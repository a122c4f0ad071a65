//! Conditional denoising U-Net, the trainable vision encoder, and the
//! training and inference loops that tie them to the frozen autoencoder.

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::ae::{AeConfig, Autoencoder, Encoder, ENCODER_PREFIX};
use crate::data::{masks_to_rgb, BatchSampler, SegSample};
use crate::diffusion::{sample_timesteps, training_loss, NoisePredictor, NoiseSchedule, ReverseSpec};
use crate::nn::{
    timestep_embedding, AdamW, AdamWConfig, AttentionBlock, Binding, Conv2d, Downsample, GroupNorm, Linear, ParamStore,
    ResBlock, ResBlockOptions, Upsample,
};
use crate::tensor::{derive_seed, randn, Graph, Real, Result, Rng, Tensor, TensorError, Var};

/// How the image latent reaches the denoiser.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Conditioning {
    /// Channel concatenation with the noisy latent at the input.
    Concat,
    /// Cross-attention from the mid block onto the image-latent tokens.
    CrossAttention,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub latent_channels: usize,
    pub base_channels: usize,
    pub mid_channels: usize,
    pub time_dim: usize,
    pub conditioning: Conditioning,
    /// Adds `z_t` to the output conv, so the network only learns the
    /// correction to an identity map.
    pub input_skip: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self { latent_channels: 4, base_channels: 32, mid_channels: 64, time_dim: 128, conditioning: Conditioning::Concat, input_skip: true }
    }
}

/// Two-level U-Net over latents: `conv_in -> res @ full -> down -> res @ half
/// -> mid (res, attn, res) -> two skip-fed res per level with an upsample
/// between -> norm, SiLU, conv_out`, plus `z_t` when `input_skip` is set.
#[derive(Clone, Debug)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    conv_in: Conv2d,
    time1: Linear,
    time2: Linear,
    down0: ResBlock,
    down: Downsample,
    down1: ResBlock,
    mid1: ResBlock,
    mid_attn: AttentionBlock,
    mid_cross: Option<AttentionBlock>,
    mid2: ResBlock,
    up1: [ResBlock; 2],
    up: Upsample,
    up0: [ResBlock; 2],
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl Denoiser {
    pub fn new<F: Real>(store: &mut ParamStore<F>, config: &DenoiserConfig, rng: &mut Rng) -> Self {
        let (z, c0, c1, td) = (config.latent_channels, config.base_channels, config.mid_channels, config.time_dim);
        let opts = ResBlockOptions { time_dim: Some(td), zero_out: true };
        let cin = match config.conditioning {
            Conditioning::Concat => 2 * z,
            Conditioning::CrossAttention => z,
        };
        let conv_in = Conv2d::new(store, "unet.conv_in", cin, c0, 3, 1, rng);
        if config.conditioning == Conditioning::Concat {
            zero_input_slice(store.get_mut(conv_in.weight), z, 2 * z);
        }
        let time1 = Linear::new(store, "unet.time1", c0, td, rng);
        let time2 = Linear::new(store, "unet.time2", td, td, rng);
        let down0 = ResBlock::new(store, "unet.down0", c0, c0, opts, rng);
        let down = Downsample::new(store, "unet.down", c0, rng);
        let down1 = ResBlock::new(store, "unet.down1", c0, c1, opts, rng);
        let mid1 = ResBlock::new(store, "unet.mid1", c1, c1, opts, rng);
        let mid_attn = AttentionBlock::new_self(store, "unet.mid_attn", c1, rng);
        let mid_cross = (config.conditioning == Conditioning::CrossAttention)
            .then(|| AttentionBlock::new_cross(store, "unet.mid_cross", c1, z, rng));
        let mid2 = ResBlock::new(store, "unet.mid2", c1, c1, opts, rng);
        let up1 = [
            ResBlock::new(store, "unet.up1a", c1 + c1, c1, opts, rng),
            ResBlock::new(store, "unet.up1b", c1 + c0, c1, opts, rng),
        ];
        let up = Upsample::new(store, "unet.up", c1, rng);
        let up0 = [
            ResBlock::new(store, "unet.up0a", c1 + c0, c0, opts, rng),
            ResBlock::new(store, "unet.up0b", c0 + c0, c0, opts, rng),
        ];
        let norm_out = GroupNorm::new(store, "unet.norm_out", c0);
        let conv_out = Conv2d::new(store, "unet.conv_out", c0, z, 3, 1, rng);
        Self {
            config: config.clone(),
            conv_in,
            time1,
            time2,
            down0,
            down,
            down1,
            mid1,
            mid_attn,
            mid_cross,
            mid2,
            up1,
            up,
            up0,
            norm_out,
            conv_out,
        }
    }

    /// Predicted noise with the shape of `z_t`.
    pub fn forward<F: Real>(&self, g: &mut Graph<F>, p: &Binding, z_t: Var, t: &[usize], z_c: Var) -> Result<Var> {
        let zs = g.shape(z_t).to_vec();
        let cs = g.shape(z_c).to_vec();
        let z = self.config.latent_channels;
        if zs.len() != 4 || zs[1] != z || cs.len() != 4 || cs[0] != zs[0] || cs[1] != z {
            return Err(TensorError::ShapeMismatch { op: "denoiser", lhs: zs, rhs: cs });
        }
        let b = zs[0];
        let ts: Vec<usize> = match t.len() {
            1 => vec![t[0]; b],
            n if n == b => t.to_vec(),
            n => return Err(TensorError::InvalidArgument { op: "denoiser", reason: format!("{n} timesteps for batch {b}") }),
        };
        let emb = g.constant(timestep_embedding(&ts, self.config.base_channels)?);
        let temb = self.time1.forward(g, p, emb)?;
        let temb = g.silu(temb)?;
        let temb = self.time2.forward(g, p, temb)?;
        let temb = g.silu(temb)?;

        let x = match self.config.conditioning {
            Conditioning::Concat => {
                if cs[2..] != zs[2..] {
                    return Err(TensorError::ShapeMismatch { op: "denoiser concat", lhs: zs, rhs: cs });
                }
                g.concat_channels(&[z_t, z_c])?
            }
            Conditioning::CrossAttention => z_t,
        };
        let h0 = self.conv_in.forward(g, p, x)?;
        let h1 = self.down0.forward(g, p, h0, Some(temb))?;
        let h2 = self.down.forward(g, p, h1)?;
        let h3 = self.down1.forward(g, p, h2, Some(temb))?;

        let mut h = self.mid1.forward(g, p, h3, Some(temb))?;
        h = self.mid_attn.forward(g, p, h, None)?;
        if let Some(cross) = &self.mid_cross {
            h = cross.forward(g, p, h, Some(z_c))?;
        }
        h = self.mid2.forward(g, p, h, Some(temb))?;

        for (block, skip) in self.up1.iter().zip([h3, h2]) {
            let cat = g.concat_channels(&[h, skip])?;
            h = block.forward(g, p, cat, Some(temb))?;
        }
        h = self.up.forward(g, p, h)?;
        for (block, skip) in self.up0.iter().zip([h1, h0]) {
            let cat = g.concat_channels(&[h, skip])?;
            h = block.forward(g, p, cat, Some(temb))?;
        }
        h = self.norm_out.forward(g, p, h)?;
        h = g.silu(h)?;
        let out = self.conv_out.forward(g, p, h)?;
        if self.config.input_skip {
            g.add(out, z_t)
        } else {
            Ok(out)
        }
    }

    pub fn conv_in_weight(&self) -> crate::nn::ParamId {
        self.conv_in.weight
    }
}

/// Zeroes input channels `[from, to)` of a `[Cout, Cin, k, k]` weight.
fn zero_input_slice<F: Real>(w: &mut Tensor<F>, from: usize, to: usize) {
    let s = w.shape().to_vec();
    let (cin, kk) = (s[1], s[2] * s[3]);
    let data = w.data_mut();
    for o in 0..s[0] {
        for c in from..to {
            let start = (o * cin + c) * kk;
            data[start..start + kk].fill(F::zero());
        }
    }
}

/// Denoiser bound into whatever graph it is asked to predict in.
pub struct StorePredictor<'a, F: Real> {
    pub denoiser: &'a Denoiser,
    pub params: &'a ParamStore<F>,
    items: AtomicUsize,
}

impl<'a, F: Real> StorePredictor<'a, F> {
    pub fn new(denoiser: &'a Denoiser, params: &'a ParamStore<F>) -> Self {
        Self { denoiser, params, items: AtomicUsize::new(0) }
    }

    /// Total batch items processed, i.e. per-image denoiser evaluations.
    pub fn items(&self) -> usize {
        self.items.load(Ordering::Relaxed)
    }
}

impl<F: Real> NoisePredictor<F> for StorePredictor<'_, F> {
    fn predict(&self, g: &mut Graph<F>, z_t: Var, t: &[usize], z_c: Var) -> Result<Var> {
        self.items.fetch_add(g.shape(z_t)[0], Ordering::Relaxed);
        let p = self.params.bind(g, false);
        self.denoiser.forward(g, &p, z_t, t, z_c)
    }
}

/// Denoiser whose parameters are already leaves of the training graph.
struct BoundPredictor<'a> {
    denoiser: &'a Denoiser,
    binding: &'a Binding,
}

impl<F: Real> NoisePredictor<F> for BoundPredictor<'_> {
    fn predict(&self, g: &mut Graph<F>, z_t: Var, t: &[usize], z_c: Var) -> Result<Var> {
        self.denoiser.forward(g, self.binding, z_t, t, z_c)
    }
}

/// `z_c = scale * mean(tau(image))`.
pub fn encode_condition<F: Real>(g: &mut Graph<F>, tau: &Encoder, p: &Binding, images: Var, scale: f64) -> Result<Var> {
    let (mean, _) = tau.forward(g, p, images)?;
    g.scale(mean, scale)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SdSegConfig {
    pub lambda: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub trainable_encoder: bool,
    pub denoiser: DenoiserConfig,
    pub reverse: ReverseSpec,
}

impl Default for SdSegConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            batch_size: 4,
            steps: 6000,
            lr: 1e-4,
            weight_decay: 0.01,
            seed: 0,
            trainable_encoder: true,
            denoiser: DenoiserConfig::default(),
            reverse: ReverseSpec::Single,
        }
    }
}

/// Trained (or initialized) denoiser plus vision encoder.
#[derive(Clone, Debug)]
pub struct SdSegModel {
    pub denoiser: Denoiser,
    pub denoiser_params: ParamStore,
    pub tau: Encoder,
    pub tau_params: ParamStore,
}

impl SdSegModel {
    /// Fresh denoiser; `tau` starts as a copy of the autoencoder's encoder.
    pub fn new(ae: &Autoencoder, config: &DenoiserConfig, seed: u64) -> Result<Self> {
        if config.latent_channels != ae.config.latent_channels {
            return Err(TensorError::InvalidArgument {
                op: "SdSegModel::new",
                reason: format!("denoiser latent channels {} vs autoencoder {}", config.latent_channels, ae.config.latent_channels),
            });
        }
        let mut rng = Rng::new(seed);
        let mut denoiser_params = ParamStore::new();
        let denoiser = Denoiser::new(&mut denoiser_params, config, &mut rng);
        let (tau, mut tau_params) = Self::empty_tau(&ae.config);
        tau_params.load_from(&ae.params.subset(&format!("{ENCODER_PREFIX}.")))?;
        Ok(Self { denoiser, denoiser_params, tau, tau_params })
    }

    /// Encoder skeleton with placeholder weights, for loading.
    pub fn empty_tau(config: &AeConfig) -> (Encoder, ParamStore) {
        let mut store = ParamStore::new();
        let tau = Encoder::new(&mut store, ENCODER_PREFIX, config, &mut Rng::new(0));
        (tau, store)
    }

    pub fn predictor(&self) -> StorePredictor<'_, f32> {
        StorePredictor::new(&self.denoiser, &self.denoiser_params)
    }

    /// Image latents without gradient tracking.
    pub fn condition(&self, images: &Tensor, scale: f64) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.tau_params.bind(&mut g, false);
        let x = g.constant(images.clone());
        let zc = encode_condition(&mut g, &self.tau, &p, x, scale)?;
        Ok(g.value(zc).clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SdSegStepLog {
    pub step: usize,
    pub loss: f64,
    pub noise: f64,
    pub latent: f64,
}

/// Owns the optimizer state and the cached frozen-AE latents.
pub struct SdSegTrainer<'a> {
    pub config: SdSegConfig,
    pub model: SdSegModel,
    pub denoiser_opt: AdamW,
    pub tau_opt: Option<AdamW>,
    pub schedule: NoiseSchedule,
    ae: &'a Autoencoder,
    samples: &'a [SegSample],
    z0: Vec<Tensor>,
    zc_frozen: Option<Vec<Tensor>>,
    sampler: BatchSampler,
    t_rng: Rng,
    n_rng: Rng,
    step: usize,
    ae_hash: String,
}

fn encode_each(ae: &Autoencoder, x: &Tensor) -> Result<Vec<Tensor>> {
    let z = ae.encode_scaled(x, 16)?;
    (0..z.shape()[0]).map(|i| z.select_batch(i)).collect()
}

impl<'a> SdSegTrainer<'a> {
    pub fn new(ae: &'a Autoencoder, samples: &'a [SegSample], config: SdSegConfig) -> Result<Self> {
        if samples.is_empty() {
            return Err(TensorError::InvalidArgument { op: "train_sdseg", reason: "empty dataset".into() });
        }
        if config.batch_size == 0 || !(config.lambda >= 0.0) {
            return Err(TensorError::InvalidArgument {
                op: "train_sdseg",
                reason: format!("need batch >= 1 and lambda >= 0, got {} and {}", config.batch_size, config.lambda),
            });
        }
        let model = SdSegModel::new(ae, &config.denoiser, derive_seed(config.seed, 10))?;
        let opt_cfg = AdamWConfig { lr: config.lr, weight_decay: config.weight_decay, ..AdamWConfig::default() };
        let denoiser_opt = AdamW::new(&model.denoiser_params, opt_cfg);
        let tau_opt = config.trainable_encoder.then(|| AdamW::new(&model.tau_params, opt_cfg));

        let masks: Vec<Tensor> = samples.iter().map(|s| s.mask.unsqueeze0()).collect();
        let z0 = encode_each(ae, &masks_to_rgb(&Tensor::stack_batch(&masks)?))?;
        let zc_frozen = if config.trainable_encoder {
            None
        } else {
            let images: Vec<Tensor> = samples.iter().map(|s| s.image.unsqueeze0()).collect();
            let all = Tensor::stack_batch(&images)?;
            let mut out = Vec::with_capacity(samples.len());
            for start in (0..samples.len()).step_by(16) {
                let idx: Vec<Tensor> =
                    (start..(start + 16).min(samples.len())).map(|i| all.select_batch(i)).collect::<Result<_>>()?;
                let zc = model.condition(&Tensor::stack_batch(&idx)?, ae.latent_scale)?;
                for i in 0..idx.len() {
                    out.push(zc.select_batch(i)?);
                }
            }
            Some(out)
        };
        let sampler = BatchSampler::new(samples.len(), config.batch_size, derive_seed(config.seed, 11))
            .map_err(|e| TensorError::InvalidArgument { op: "train_sdseg", reason: e.to_string() })?;
        Ok(Self {
            t_rng: Rng::new(derive_seed(config.seed, 12)),
            n_rng: Rng::new(derive_seed(config.seed, 13)),
            ae_hash: ae.params.content_hash(),
            schedule: NoiseSchedule::default(),
            config,
            model,
            denoiser_opt,
            tau_opt,
            ae,
            samples,
            z0,
            zc_frozen,
            sampler,
            step: 0,
        })
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Content hash of the autoencoder taken when training started.
    pub fn ae_hash_at_start(&self) -> &str {
        &self.ae_hash
    }

    pub fn step(&mut self) -> Result<SdSegStepLog> {
        let idx = self.sampler.next_indices();
        let b = idx.len();
        let z0 = Tensor::stack_batch(&idx.iter().map(|&i| self.z0[i].clone()).collect::<Vec<_>>())?;
        let t = sample_timesteps(b, &self.schedule, &mut self.t_rng);
        let n: Tensor = randn(z0.shape(), &mut self.n_rng)?;

        let mut g = Graph::new();
        let dp = self.model.denoiser_params.bind(&mut g, true);
        let (zc, tau_binding) = match &self.zc_frozen {
            Some(cache) => {
                let zc = Tensor::stack_batch(&idx.iter().map(|&i| cache[i].clone()).collect::<Vec<_>>())?;
                (g.constant(zc), None)
            }
            None => {
                let tp = self.model.tau_params.bind(&mut g, true);
                let images =
                    Tensor::stack_batch(&idx.iter().map(|&i| self.samples[i].image.unsqueeze0()).collect::<Vec<_>>())?;
                let x = g.constant(images);
                let zc = encode_condition(&mut g, &self.model.tau, &tp, x, self.ae.latent_scale)?;
                (zc, Some(tp))
            }
        };
        let predictor = BoundPredictor { denoiser: &self.model.denoiser, binding: &dp };
        let terms = training_loss(&mut g, &predictor, &z0, zc, &t, &n, &self.schedule, self.config.lambda)?;
        let log = SdSegStepLog {
            step: self.step,
            loss: g.value(terms.total).data()[0] as f64,
            noise: g.value(terms.noise).data()[0] as f64,
            latent: g.value(terms.latent).data()[0] as f64,
        };
        if !log.loss.is_finite() {
            return Err(TensorError::NonFinite { op: "sdseg loss" });
        }
        let grads = g.backward(terms.total)?;
        self.denoiser_opt.step(&mut self.model.denoiser_params, &dp.grads(&grads), self.config.lr)?;
        if let (Some(opt), Some(tp)) = (self.tau_opt.as_mut(), tau_binding.as_ref()) {
            opt.step(&mut self.model.tau_params, &tp.grads(&grads), self.config.lr)?;
        }
        self.step += 1;
        Ok(log)
    }

    /// Fails if the autoencoder changed since training started.
    pub fn verify_frozen(&self) -> Result<()> {
        if self.ae.params.content_hash() != self.ae_hash {
            return Err(TensorError::InvalidArgument { op: "train_sdseg", reason: "autoencoder parameters changed".into() });
        }
        Ok(())
    }
}

pub struct SdSegTrainOutput {
    pub model: SdSegModel,
    pub denoiser_opt: AdamW,
    pub tau_opt: Option<AdamW>,
    pub log: Vec<SdSegStepLog>,
}

/// Runs `config.steps` steps; `on_step` sees every log entry and the trainer.
pub fn train_sdseg(
    ae: &Autoencoder,
    samples: &[SegSample],
    config: &SdSegConfig,
    mut on_step: impl FnMut(&SdSegStepLog, &SdSegTrainer<'_>) -> Result<()>,
) -> Result<SdSegTrainOutput> {
    let mut trainer = SdSegTrainer::new(ae, samples, config.clone())?;
    let mut log = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        let entry = trainer.step()?;
        on_step(&entry, &trainer)?;
        log.push(entry);
    }
    trainer.verify_frozen()?;
    Ok(SdSegTrainOutput { model: trainer.model, denoiser_opt: trainer.denoiser_opt, tau_opt: trainer.tau_opt, log })
}

/// Per-image prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// `[1, H, W]` in `[0, 1]`.
    pub prob: Tensor,
    /// `[1, H, W]` in `{0, 1}`.
    pub mask: Tensor,
}

#[derive(Clone, Debug)]
pub struct InferenceOutput {
    pub predictions: Vec<Prediction>,
    /// Denoiser evaluations per image.
    pub calls_per_image: f64,
}

/// Initial noise for image `index` of a run seeded with `seed`.
pub fn initial_noise(seed: u64, index: usize, shape: &[usize]) -> Result<Tensor> {
    randn(shape, &mut Rng::new(derive_seed(seed, index as u64)))
}

/// `prob = clamp((mean_c(x) + 1) / 2, 0, 1)`, `mask = prob >= 0.5`.
pub fn to_prediction(decoded: &Tensor) -> Result<Prediction> {
    let s = decoded.shape();
    let (c, hw) = (s[1], s[2] * s[3]);
    let mut prob = vec![0f32; hw];
    for ch in 0..c {
        for (p, &v) in prob.iter_mut().zip(&decoded.data()[ch * hw..(ch + 1) * hw]) {
            *p += v;
        }
    }
    for p in &mut prob {
        *p = ((*p / c as f32 + 1.0) / 2.0).clamp(0.0, 1.0);
    }
    let mask = prob.iter().map(|&p| if p >= 0.5 { 1.0 } else { 0.0 }).collect();
    Ok(Prediction { prob: Tensor::new(&[1, s[2], s[3]], prob)?, mask: Tensor::new(&[1, s[2], s[3]], mask)? })
}

/// Segments `images` (`[N, 3, H, W]`); image `i` draws its starting noise
/// from stream `i` of `seed`, so results do not depend on chunking.
pub fn infer(
    ae: &Autoencoder,
    model: &SdSegModel,
    images: &Tensor,
    reverse: ReverseSpec,
    seed: u64,
    chunk: usize,
) -> Result<InferenceOutput> {
    let s = images.shape().to_vec();
    if s.len() != 4 || s[2] % 8 != 0 || s[3] % 8 != 0 {
        return Err(TensorError::InvalidShape { shape: s, reason: "images must be [N, 3, H, W] with H, W divisible by 8".into() });
    }
    let sched = NoiseSchedule::default();
    let predictor = model.predictor();
    let zshape = [1, ae.config.latent_channels, s[2] / 8, s[3] / 8];
    let mut predictions = Vec::with_capacity(s[0]);
    for start in (0..s[0]).step_by(chunk.max(1)) {
        let range = start..(start + chunk.max(1)).min(s[0]);
        let imgs: Vec<Tensor> = range.clone().map(|i| images.select_batch(i)).collect::<Result<_>>()?;
        let zc = model.condition(&Tensor::stack_batch(&imgs)?, ae.latent_scale)?;
        let noise: Vec<Tensor> = range.clone().map(|i| initial_noise(seed, i, &zshape)).collect::<Result<_>>()?;
        let z0 = reverse.run(&Tensor::stack_batch(&noise)?, &zc, &sched, &predictor)?;
        let decoded = ae.decode_scaled(&z0)?;
        for i in 0..imgs.len() {
            predictions.push(to_prediction(&decoded.select_batch(i)?)?);
        }
    }
    let calls_per_image = predictor.items() as f64 / s[0].max(1) as f64;
    Ok(InferenceOutput { predictions, calls_per_image })
}

#[cfg(test)]
mod tests;

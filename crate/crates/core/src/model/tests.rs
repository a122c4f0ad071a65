use super::*;
use crate::data::{generate_split, Split};
use crate::diffusion::{eval_noise, CountingPredictor};
use crate::tensor::gradcheck::{self, weighted_sum};
use crate::tensor::rand_uniform;

fn small_ae() -> Autoencoder {
    Autoencoder::new(AeConfig { channels: 4, latent_channels: 4, in_channels: 3 }, 1)
}

fn small_denoiser(conditioning: Conditioning) -> DenoiserConfig {
    DenoiserConfig { latent_channels: 4, base_channels: 8, mid_channels: 8, time_dim: 16, conditioning, input_skip: false }
}

fn small_config(trainable: bool, lambda: f64) -> SdSegConfig {
    SdSegConfig {
        lambda,
        batch_size: 2,
        steps: 2,
        lr: 1e-3,
        trainable_encoder: trainable,
        denoiser: small_denoiser(Conditioning::Concat),
        ..SdSegConfig::default()
    }
}

fn randomize<F: Real>(store: &mut ParamStore<F>, seed: u64) {
    let mut rng = Rng::new(seed);
    let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
    for name in names {
        let shape = store.get(store.find(&name).unwrap()).shape().to_vec();
        store.set(&name, rand_uniform(&shape, -0.5, 0.5, &mut rng).unwrap()).unwrap();
    }
}

#[test]
fn conditioning_slice_starts_at_zero_and_output_ignores_condition() {
    let mut store = ParamStore::<f32>::new();
    let den = Denoiser::new(&mut store, &DenoiserConfig::default(), &mut Rng::new(0));
    let w = store.get(den.conv_in_weight());
    assert_eq!(w.shape(), &[32, 8, 3, 3]);
    for o in 0..32 {
        for c in 4..8 {
            assert!(w.data()[(o * 8 + c) * 9..(o * 8 + c + 1) * 9].iter().all(|&v| v == 0.0));
        }
        assert!(w.data()[o * 72..o * 72 + 36].iter().any(|&v| v != 0.0));
    }
    let mut rng = Rng::new(1);
    let zt: Tensor = randn(&[2, 4, 8, 8], &mut rng).unwrap();
    let c1: Tensor = randn(&[2, 4, 8, 8], &mut rng).unwrap();
    let c2: Tensor = rand_uniform(&[2, 4, 8, 8], -5.0, 5.0, &mut rng).unwrap();
    let pred = StorePredictor::new(&den, &store);
    let a = eval_noise(&pred, &zt, &[17, 900], &c1).unwrap();
    let b = eval_noise(&pred, &zt, &[17, 900], &c2).unwrap();
    assert_eq!(a.shape(), zt.shape());
    assert_eq!(a, b);
}

#[test]
fn default_denoiser_is_about_half_a_million_parameters() {
    let mut store = ParamStore::<f32>::new();
    Denoiser::new(&mut store, &DenoiserConfig::default(), &mut Rng::new(0));
    let n = store.num_scalars();
    assert!((250_000..1_000_000).contains(&n), "{n}");
}

#[test]
fn cross_attention_mode_uses_condition() {
    let mut store = ParamStore::<f32>::new();
    let cfg = small_denoiser(Conditioning::CrossAttention);
    let den = Denoiser::new(&mut store, &cfg, &mut Rng::new(0));
    randomize(&mut store, 3);
    assert_eq!(store.get(den.conv_in_weight()).shape()[1], 4);
    let mut rng = Rng::new(1);
    let zt: Tensor = randn(&[1, 4, 8, 8], &mut rng).unwrap();
    let c1: Tensor = randn(&[1, 4, 8, 8], &mut rng).unwrap();
    let c2: Tensor = randn(&[1, 4, 8, 8], &mut rng).unwrap();
    let pred = StorePredictor::new(&den, &store);
    let a = eval_noise(&pred, &zt, &[5], &c1).unwrap();
    let b = eval_noise(&pred, &zt, &[5], &c2).unwrap();
    assert_eq!(a.shape(), zt.shape());
    assert_ne!(a, b);
}

#[test]
fn shape_errors() {
    let mut store = ParamStore::<f32>::new();
    let den = Denoiser::new(&mut store, &small_denoiser(Conditioning::Concat), &mut Rng::new(0));
    let pred = StorePredictor::new(&den, &store);
    let zt = Tensor::zeros(&[1, 4, 8, 8]).unwrap();
    assert!(eval_noise(&pred, &zt, &[0], &Tensor::zeros(&[1, 3, 8, 8]).unwrap()).is_err());
    assert!(eval_noise(&pred, &zt, &[0], &Tensor::zeros(&[1, 4, 4, 4]).unwrap()).is_err());
    assert!(eval_noise(&pred, &zt, &[0, 1, 2], &zt).is_err());
}

#[test]
fn miniature_denoiser_gradcheck() {
    let cfg = DenoiserConfig { latent_channels: 2, base_channels: 4, mid_channels: 4, time_dim: 8, conditioning: Conditioning::Concat, input_skip: false };
    let mut store = ParamStore::<f64>::new();
    let den = Denoiser::new(&mut store, &cfg, &mut Rng::new(0));
    randomize(&mut store, 1);
    let mut rng = Rng::new(2);
    let mut inputs: Vec<Tensor<f64>> = store.iter().map(|(_, t)| t.clone()).collect();
    let np = inputs.len();
    inputs.push(randn(&[2, 2, 2, 2], &mut rng).unwrap());
    inputs.push(randn(&[2, 2, 2, 2], &mut rng).unwrap());
    let report = gradcheck::check(&inputs, 1e-5, 6, |g, v| {
        let p = Binding::from_vars(v[..np].to_vec());
        let out = den.forward(g, &p, v[np], &[3, 700], v[np + 1])?;
        weighted_sum(g, out, 4)
    })
    .unwrap();
    assert!(report.max_rel_err <= 1e-4, "{report:?}");
}

#[test]
fn condition_shape_and_architecture_match() {
    let ae = Autoencoder::new(AeConfig { channels: 4, latent_channels: 4, in_channels: 3 }, 0);
    let model = SdSegModel::new(&ae, &DenoiserConfig::default(), 0).unwrap();
    let zc = model.condition(&Tensor::zeros(&[1, 3, 64, 64]).unwrap(), 1.0).unwrap();
    assert_eq!(zc.shape(), &[1, 4, 8, 8]);
    assert!(model.condition(&Tensor::zeros(&[1, 3, 60, 64]).unwrap(), 1.0).is_err());
    let enc = ae.params.subset("encoder.");
    assert_eq!(model.tau_params.architecture_hash(), enc.architecture_hash());
    assert_eq!(model.tau_params.content_hash(), enc.content_hash());
}

fn toy_samples() -> Vec<SegSample> {
    generate_split(Split::Train, 4, 16, 16, 0).unwrap()
}

#[test]
fn frozen_encoder_stays_fixed_and_trainable_encoder_moves() {
    let ae = small_ae();
    let samples = toy_samples();
    let mut frozen = SdSegTrainer::new(&ae, &samples, small_config(false, 1.0)).unwrap();
    let before = frozen.model.tau_params.content_hash();
    let img = samples[0].image.unsqueeze0();
    let zc_before = frozen.model.condition(&img, ae.latent_scale).unwrap();
    let den_before = frozen.model.denoiser_params.content_hash();
    frozen.step().unwrap();
    assert_eq!(frozen.model.tau_params.content_hash(), before);
    assert_eq!(frozen.model.condition(&img, ae.latent_scale).unwrap(), zc_before);
    assert_ne!(frozen.model.denoiser_params.content_hash(), den_before);

    let mut trainable = SdSegTrainer::new(&ae, &samples, small_config(true, 1.0)).unwrap();
    let log = trainable.step().unwrap();
    assert!(log.loss > 0.0);
    assert_ne!(trainable.model.tau_params.content_hash(), before);
    trainable.verify_frozen().unwrap();
    assert_eq!(trainable.ae_hash_at_start(), ae.params.content_hash());
}

#[test]
fn lambda_zero_gradient_is_noise_gradient() {
    let ae = small_ae();
    let model = SdSegModel::new(&ae, &small_denoiser(Conditioning::Concat), 0).unwrap();
    let mut dstore = model.denoiser_params.clone();
    randomize(&mut dstore, 9);
    let sched = NoiseSchedule::default();
    let mut rng = Rng::new(4);
    let z0: Tensor = randn(&[2, 4, 2, 2], &mut rng).unwrap();
    let n: Tensor = randn(&[2, 4, 2, 2], &mut rng).unwrap();
    let images: Tensor = rand_uniform(&[2, 3, 16, 16], -1.0, 1.0, &mut rng).unwrap();
    let grads_for = |lambda: f64, use_noise_only: bool| {
        let mut g = Graph::new();
        let dp = dstore.bind(&mut g, true);
        let tp = model.tau_params.bind(&mut g, true);
        let x = g.constant(images.clone());
        let zc = encode_condition(&mut g, &model.tau, &tp, x, 1.0).unwrap();
        let pred = BoundPredictor { denoiser: &model.denoiser, binding: &dp };
        let terms = training_loss(&mut g, &pred, &z0, zc, &[10, 800], &n, &sched, lambda).unwrap();
        let loss = if use_noise_only { terms.noise } else { terms.total };
        let grads = g.backward(loss).unwrap();
        (tp.grads(&grads), g.value(terms.latent).data()[0])
    };
    let (g0, latent0) = grads_for(0.0, false);
    let (gn, _) = grads_for(1.0, true);
    let (g1, _) = grads_for(1.0, false);
    assert!(latent0 > 0.0);
    assert_eq!(g0, gn);
    assert_ne!(g0, g1);
}

#[test]
fn train_sdseg_runs_and_logs() {
    let ae = small_ae();
    let samples = toy_samples();
    let mut seen = 0;
    let out = train_sdseg(&ae, &samples, &small_config(true, 1.0), |_, _| {
        seen += 1;
        Ok(())
    })
    .unwrap();
    assert_eq!(seen, 2);
    assert_eq!(out.log.len(), 2);
    assert_eq!(out.denoiser_opt.step_count(), 2);
    assert!(out.log.iter().all(|l| l.loss.is_finite() && l.latent.is_finite()));
}

#[test]
fn inference_postconditions_and_call_counts() {
    let ae = small_ae();
    let model = SdSegModel::new(&ae, &small_denoiser(Conditioning::Concat), 0).unwrap();
    let samples = toy_samples();
    let images = Tensor::stack_batch(&samples.iter().map(|s| s.image.unsqueeze0()).collect::<Vec<_>>()).unwrap();
    let single = infer(&ae, &model, &images, ReverseSpec::Single, 3, 3).unwrap();
    assert_eq!(single.predictions.len(), 4);
    assert_eq!(single.calls_per_image, 1.0);
    for p in &single.predictions {
        assert!(p.prob.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(p.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
        assert_eq!(p.prob.shape(), &[1, 16, 16]);
    }
    let ddim = infer(&ae, &model, &images, ReverseSpec::Ddim { steps: 10 }, 3, 4).unwrap();
    assert_eq!(ddim.calls_per_image, 10.0);
    let again = infer(&ae, &model, &images, ReverseSpec::Single, 3, 2).unwrap();
    assert_eq!(again.predictions, single.predictions);
    assert!(infer(&ae, &model, &Tensor::zeros(&[1, 3, 12, 16]).unwrap(), ReverseSpec::Single, 0, 1).is_err());
}

#[test]
fn counting_wrapper_over_store_predictor() {
    let ae = small_ae();
    let model = SdSegModel::new(&ae, &small_denoiser(Conditioning::Concat), 0).unwrap();
    let counted = CountingPredictor::new(model.predictor());
    let zc = Tensor::zeros(&[1, 4, 2, 2]).unwrap();
    let zt = Tensor::zeros(&[1, 4, 2, 2]).unwrap();
    crate::diffusion::ddim_sample(&zt, &zc, 10, &NoiseSchedule::default(), &counted).unwrap();
    assert_eq!(counted.calls(), 10);
}

#[test]
fn input_skip_adds_noisy_latent() {
    let mut rng = Rng::new(6);
    let zt: Tensor = randn(&[2, 4, 8, 8], &mut rng).unwrap();
    let zc: Tensor = randn(&[2, 4, 8, 8], &mut rng).unwrap();
    let out = |input_skip: bool| {
        let mut store = ParamStore::<f32>::new();
        let cfg = DenoiserConfig { input_skip, ..small_denoiser(Conditioning::Concat) };
        let den = Denoiser::new(&mut store, &cfg, &mut Rng::new(0));
        eval_noise(&StorePredictor::new(&den, &store), &zt, &[500], &zc).unwrap()
    };
    let (with, without) = (out(true), out(false));
    for ((a, b), z) in with.data().iter().zip(without.data()).zip(zt.data()) {
        assert!((a - b - z).abs() <= 1e-6, "{a} - {b} != {z}");
    }
}

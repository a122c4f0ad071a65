use proptest::prelude::*;

use super::*;
use crate::tensor::{rand_uniform, Rng as TRng};

fn schedule_with(alpha_bars: Vec<f64>) -> NoiseSchedule {
    let alphas = alpha_bars.clone();
    NoiseSchedule { betas: alphas.iter().map(|a| 1.0 - a).collect(), alphas, alpha_bars }
}

/// Returns a fixed tensor regardless of input.
struct Fixed<F: Real>(Tensor<F>);

impl<F: Real> NoisePredictor<F> for Fixed<F> {
    fn predict(&self, g: &mut Graph<F>, _z_t: Var, _t: &[usize], _z_c: Var) -> Result<Var> {
        Ok(g.constant(self.0.clone()))
    }
}

/// Knows the clean latent and returns the exactly consistent noise.
struct Oracle<'a> {
    z0: Tensor<f64>,
    sched: &'a NoiseSchedule,
}

impl NoisePredictor<f64> for Oracle<'_> {
    fn predict(&self, g: &mut Graph<f64>, z_t: Var, t: &[usize], _z_c: Var) -> Result<Var> {
        let ab = self.sched.alpha_bars[t[0]];
        let zt = g.value(z_t);
        let data = zt.data().iter().zip(self.z0.data()).map(|(&z, &x)| (z - ab.sqrt() * x) / (1.0 - ab).sqrt()).collect();
        let v = Tensor::new(zt.shape(), data)?;
        Ok(g.constant(v))
    }
}

/// Adds a learnable-looking but deterministic function of the inputs.
struct Mixer;

impl NoisePredictor<f32> for Mixer {
    fn predict(&self, g: &mut Graph<f32>, z_t: Var, t: &[usize], z_c: Var) -> Result<Var> {
        let a = g.scale(z_t, 0.9 + t[0] as f64 * 1e-4)?;
        let b = g.scale(z_c, 0.05)?;
        g.add(a, b)
    }
}

#[test]
fn default_schedule_invariants() {
    let s = NoiseSchedule::default();
    assert_eq!(s.steps(), 1000);
    assert!(s.alpha_bars.iter().all(|&a| 0.0 < a && a < 1.0));
    assert!(s.alpha_bars.windows(2).all(|w| w[1] < w[0]));
    assert!(s.alpha_bars[0] > 0.99);
    assert!(s.alpha_bars[999] < 0.01);
    assert!(s.betas.iter().all(|&b| 0.0 < b && b < 1.0));
}

#[test]
fn single_step_schedule() {
    let s = make_schedule(1, 0.00085, 0.012).unwrap();
    assert_eq!(s.alpha_bars, vec![1.0 - 0.00085]);
}

#[test]
fn alpha_bar_matches_brute_force_product() {
    let s = NoiseSchedule::default();
    let mut prod = 1.0;
    for i in 0..=10 {
        let beta = 0.00085 + (0.012 - 0.00085) * i as f64 / 999.0;
        prod *= 1.0 - beta;
    }
    assert!((s.alpha_bars[10] - prod).abs() < 1e-15);
}

#[test]
fn invalid_schedules() {
    assert!(make_schedule(0, 0.1, 0.2).is_err());
    assert!(make_schedule(10, 0.2, 0.1).is_err());
    assert!(make_schedule(10, 0.0, 0.1).is_err());
    assert!(make_schedule(10, 0.1, 1.0).is_err());
}

#[test]
fn forward_diffuse_examples() {
    let z0 = Tensor::<f64>::new(&[1, 1], vec![1.0]).unwrap();
    let n = Tensor::<f64>::new(&[1, 1], vec![0.5]).unwrap();
    let noiseless = schedule_with(vec![1.0]);
    assert_eq!(forward_diffuse(&z0, &[0], &n, &noiseless).unwrap(), z0);
    let quarter = schedule_with(vec![0.25]);
    let zt = forward_diffuse(&z0, &[0], &n, &quarter).unwrap();
    assert!((zt.data()[0] - (0.5 + 0.75f64.sqrt() * 0.5)).abs() < 1e-15);
    assert!((zt.data()[0] - 0.93301).abs() < 1e-5);
    assert!(forward_diffuse(&z0, &[1], &n, &quarter).is_err());
}

#[test]
fn forward_diffuse_mean_monte_carlo() {
    let s = NoiseSchedule::default();
    let t = 300;
    let z0 = Tensor::<f64>::full(&[10_000, 1], 0.7).unwrap();
    let n: Tensor<f64> = randn(&[10_000, 1], &mut TRng::new(11)).unwrap();
    let zt = forward_diffuse(&z0, &[t], &n, &s).unwrap();
    let mean = zt.data().iter().sum::<f64>() / 10_000.0;
    assert!((mean - s.alpha_bars[t].sqrt() * 0.7).abs() < 0.02, "{mean}");
}

#[test]
fn latent_estimate_examples() {
    let quarter = schedule_with(vec![0.25]);
    let zt = Tensor::<f64>::new(&[1, 1], vec![0.93301]).unwrap();
    let n = Tensor::<f64>::new(&[1, 1], vec![0.5]).unwrap();
    let z0 = latent_estimate(&zt, &n, &[0], &quarter).unwrap();
    assert!((z0.data()[0] - (0.93301 - 0.75f64.sqrt() * 0.5) / 0.5).abs() < 1e-15);
    assert!((z0.data()[0] - 1.0).abs() < 1e-5);
    let zero = Tensor::<f64>::zeros(&[1, 1]).unwrap();
    assert_eq!(latent_estimate(&zt, &zero, &[0], &quarter).unwrap().data()[0], 2.0 * 0.93301);
    assert!(latent_estimate(&zt, &zero, &[5], &quarter).is_err());
}

#[test]
fn round_trip_every_timestep_f32() {
    let s = NoiseSchedule::default();
    let mut rng = TRng::new(5);
    let mut worst = 0f64;
    for t in 0..s.steps() {
        let z0: Tensor = randn(&[1, 4], &mut rng).unwrap();
        let n: Tensor = randn(&[1, 4], &mut rng).unwrap();
        let zt = forward_diffuse(&z0, &[t], &n, &s).unwrap();
        let back = latent_estimate(&zt, &n, &[t], &s).unwrap();
        for (a, b) in back.data().iter().zip(z0.data()) {
            worst = worst.max((a - b).abs() as f64);
        }
    }
    assert!(worst <= 1e-5, "{worst}");
}

proptest! {
    #[test]
    fn round_trip_property(t in 0usize..1000, seed in any::<u64>()) {
        let s = NoiseSchedule::default();
        let mut rng = TRng::new(seed);
        let z0: Tensor = rand_uniform(&[2, 3], -3.0, 3.0, &mut rng).unwrap();
        let n: Tensor = randn(&[2, 3], &mut rng).unwrap();
        let zt = forward_diffuse(&z0, &[t], &n, &s).unwrap();
        let back = latent_estimate(&zt, &n, &[t], &s).unwrap();
        for (a, b) in back.data().iter().zip(z0.data()) {
            prop_assert!((a - b).abs() <= 1e-5);
        }
    }
}

fn loss_values(model: &dyn NoisePredictor<f64>, z0: &Tensor<f64>, t: usize, n: &Tensor<f64>, lambda: f64) -> (f64, f64, f64) {
    let s = NoiseSchedule::default();
    let mut g = Graph::new();
    let zc = g.constant(Tensor::zeros(z0.shape()).unwrap());
    let terms = training_loss(&mut g, model, z0, zc, &[t], n, &s, lambda).unwrap();
    let v = |x| g.value(x).data()[0];
    (v(terms.total), v(terms.noise), v(terms.latent))
}

#[test]
fn loss_of_perfect_and_offset_models() {
    let mut rng = TRng::new(2);
    let z0: Tensor<f64> = randn(&[2, 4], &mut rng).unwrap();
    let n: Tensor<f64> = randn(&[2, 4], &mut rng).unwrap();
    let (total, noise, latent) = loss_values(&Fixed(n.clone()), &z0, 400, &n, 1.0);
    assert!(total.abs() < 1e-12 && noise == 0.0 && latent.abs() < 1e-12);

    let offset = n.map(|v| v + 0.1);
    let s = NoiseSchedule::default();
    let ab = s.alpha_bars[400];
    let (total, noise, latent) = loss_values(&Fixed(offset.clone()), &z0, 400, &n, 1.0);
    assert!((noise - 0.1).abs() < 1e-12);
    assert!((latent - 0.1 * (1.0 - ab).sqrt() / ab.sqrt()).abs() < 1e-12);
    assert!((total - noise - latent).abs() < 1e-12);

    let (total0, noise0, latent0) = loss_values(&Fixed(offset), &z0, 400, &n, 0.0);
    assert_eq!(total0, noise0);
    assert!(latent0 > 0.0);
}

#[test]
fn negative_lambda_rejected() {
    let n = Tensor::<f64>::zeros(&[1, 1]).unwrap();
    let s = NoiseSchedule::default();
    let mut g = Graph::new();
    let zc = g.constant(n.clone());
    assert!(training_loss(&mut g, &Fixed(n.clone()), &n, zc, &[0], &n, &s, -1.0).is_err());
}

#[test]
fn ddim_timestep_grid() {
    assert_eq!(ddim_timesteps(1, 1000).unwrap(), vec![999]);
    assert_eq!(ddim_timesteps(2, 1000).unwrap(), vec![999, 0]);
    let ts = ddim_timesteps(10, 1000).unwrap();
    assert_eq!(ts.len(), 10);
    assert_eq!((ts[0], ts[9]), (999, 0));
    assert!(ts.windows(2).all(|w| w[0] > w[1]));
    assert_eq!(ddim_timesteps(1000, 1000).unwrap().len(), 1000);
    assert!(ddim_timesteps(1001, 1000).is_err());
    assert!(ddim_timesteps(0, 1000).is_err());
}

#[test]
fn ddim_one_step_equals_single_step_bitwise() {
    let s = NoiseSchedule::default();
    let mut rng = TRng::new(9);
    let zc: Tensor = randn(&[2, 4, 2, 2], &mut rng).unwrap();
    let z_big_t: Tensor = randn(&[2, 4, 2, 2], &mut rng).unwrap();
    let a = ddim_sample(&z_big_t, &zc, 1, &s, &Mixer).unwrap();
    let b = single_step_from(&z_big_t, &zc, &s, &Mixer).unwrap();
    assert_eq!(a, b);
    let mut r1 = TRng::new(4);
    let mut r2 = TRng::new(4);
    assert_eq!(single_step_infer(&mut r1, &zc, &s, &Mixer).unwrap(), single_step_infer(&mut r2, &zc, &s, &Mixer).unwrap());
}

#[test]
fn ddim_with_oracle_recovers_z0() {
    let s = NoiseSchedule::default();
    let mut rng = TRng::new(3);
    let z0: Tensor<f64> = randn(&[1, 4, 2, 2], &mut rng).unwrap();
    let zc = Tensor::zeros(z0.shape()).unwrap();
    let z_big_t: Tensor<f64> = randn(z0.shape(), &mut rng).unwrap();
    let oracle = Oracle { z0: z0.clone(), sched: &s };
    for steps in [1, 2, 5, 10, 50] {
        let out = ddim_sample(&z_big_t, &zc, steps, &s, &oracle).unwrap();
        for (a, b) in out.data().iter().zip(z0.data()) {
            assert!((a - b).abs() < 1e-10, "steps {steps}: {a} vs {b}");
        }
    }
}

#[test]
fn ddim_is_deterministic_and_counts_calls() {
    let s = NoiseSchedule::default();
    let mut rng = TRng::new(8);
    let zc: Tensor = randn(&[1, 4, 2, 2], &mut rng).unwrap();
    let z_big_t: Tensor = randn(&[1, 4, 2, 2], &mut rng).unwrap();
    let counted = CountingPredictor::new(Mixer);
    let a = ddim_sample(&z_big_t, &zc, 10, &s, &counted).unwrap();
    assert_eq!(counted.calls(), 10);
    let b = ddim_sample(&z_big_t, &zc, 10, &s, &counted).unwrap();
    assert_eq!(a, b);
    let single = CountingPredictor::new(Mixer);
    ReverseSpec::Single.run(&z_big_t, &zc, &s, &single).unwrap();
    assert_eq!(single.calls(), 1);
}

#[test]
fn reverse_spec_parsing() {
    assert_eq!("single".parse::<ReverseSpec>().unwrap(), ReverseSpec::Single);
    assert_eq!("ddim:10".parse::<ReverseSpec>().unwrap(), ReverseSpec::Ddim { steps: 10 });
    assert!("ddim:0".parse::<ReverseSpec>().is_err());
    assert!("ddim:x".parse::<ReverseSpec>().is_err());
    assert!("euler".parse::<ReverseSpec>().is_err());
    assert_eq!(ReverseSpec::Ddim { steps: 25 }.to_string(), "ddim:25");
    let json = serde_json::to_string(&ReverseSpec::Ddim { steps: 3 }).unwrap();
    assert_eq!(json, "\"ddim:3\"");
    assert_eq!(serde_json::from_str::<ReverseSpec>(&json).unwrap(), ReverseSpec::Ddim { steps: 3 });
}

#[test]
fn latent_graph_matches_tensor_form() {
    let s = NoiseSchedule::default();
    let mut rng = TRng::new(1);
    let zt: Tensor<f64> = randn(&[2, 3], &mut rng).unwrap();
    let nh: Tensor<f64> = randn(&[2, 3], &mut rng).unwrap();
    let mut g = Graph::new();
    let nv = g.constant(nh.clone());
    let v = latent_estimate_graph(&mut g, &zt, nv, &[10, 900], &s).unwrap();
    let direct = latent_estimate(&zt, &nh, &[10, 900], &s).unwrap();
    for (a, b) in g.value(v).data().iter().zip(direct.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

//! Noise schedule, forward noising, closed-form latent estimate, the
//! combined noise/latent loss, and the deterministic samplers.
//!
//! Mixing coefficients are evaluated in `f64` and the result rounded once
//! to the working precision.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::tensor::{randn, Graph, Real, Result, Rng, Tensor, TensorError, Var};

pub const DEFAULT_T: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 0.00085;
pub const DEFAULT_BETA_END: f64 = 0.012;

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bars.get(t).copied().ok_or_else(|| out_of_range(t, self.steps()))
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        make_schedule(DEFAULT_T, DEFAULT_BETA_START, DEFAULT_BETA_END).expect("default schedule")
    }
}

fn out_of_range(t: usize, steps: usize) -> TensorError {
    TensorError::InvalidArgument { op: "diffusion", reason: format!("timestep {t} outside [0, {steps})") }
}

/// Linear betas from `beta_start` to `beta_end` over `t_max` steps.
pub fn make_schedule(t_max: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t_max == 0 || !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
        return Err(TensorError::InvalidArgument {
            op: "make_schedule",
            reason: format!("need T >= 1 and 0 < beta_start < beta_end < 1, got T={t_max}, {beta_start}, {beta_end}"),
        });
    }
    let betas: Vec<f64> = if t_max == 1 {
        vec![beta_start]
    } else {
        (0..t_max).map(|i| beta_start + (beta_end - beta_start) * i as f64 / (t_max - 1) as f64).collect()
    };
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut acc = 1.0;
    let alpha_bars = alphas
        .iter()
        .map(|a| {
            acc *= a;
            acc
        })
        .collect();
    Ok(NoiseSchedule { betas, alphas, alpha_bars })
}

/// Per-item timesteps; a single entry applies to the whole batch.
fn per_item(t: &[usize], batch: usize) -> Result<Vec<usize>> {
    match t.len() {
        1 => Ok(vec![t[0]; batch]),
        n if n == batch => Ok(t.to_vec()),
        n => Err(TensorError::InvalidArgument { op: "diffusion", reason: format!("{n} timesteps for batch {batch}") }),
    }
}

fn check_same<F: Real>(op: &'static str, a: &Tensor<F>, b: &Tensor<F>) -> Result<()> {
    if a.shape() != b.shape() || a.shape().is_empty() {
        return Err(TensorError::ShapeMismatch { op, lhs: a.shape().to_vec(), rhs: b.shape().to_vec() });
    }
    Ok(())
}

/// `out = ca[b] * a + cb[b] * b` per batch item.
fn mix<F: Real>(a: &Tensor<F>, b: &Tensor<F>, ca: &[f64], cb: &[f64]) -> Result<Tensor<F>> {
    let per = a.numel() / a.shape()[0];
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .enumerate()
        .map(|(i, (&x, &y))| F::from_f64(ca[i / per] * x.as_f64() + cb[i / per] * y.as_f64()))
        .collect();
    Tensor::new(a.shape(), data)
}

/// `z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) n`.
pub fn forward_diffuse<F: Real>(z0: &Tensor<F>, t: &[usize], n: &Tensor<F>, sched: &NoiseSchedule) -> Result<Tensor<F>> {
    check_same("forward_diffuse", z0, n)?;
    let ts = per_item(t, z0.shape()[0])?;
    let ab: Vec<f64> = ts.iter().map(|&t| sched.alpha_bar(t)).collect::<Result<_>>()?;
    let ca: Vec<f64> = ab.iter().map(|a| a.sqrt()).collect();
    let cb: Vec<f64> = ab.iter().map(|a| (1.0 - a).sqrt()).collect();
    mix(z0, n, &ca, &cb)
}

/// `z0_hat = (z_t - sqrt(1 - abar_t) n_hat) / sqrt(abar_t)`.
pub fn latent_estimate<F: Real>(z_t: &Tensor<F>, n_hat: &Tensor<F>, t: &[usize], sched: &NoiseSchedule) -> Result<Tensor<F>> {
    check_same("latent_estimate", z_t, n_hat)?;
    let ts = per_item(t, z_t.shape()[0])?;
    let ab: Vec<f64> = ts.iter().map(|&t| sched.alpha_bar(t)).collect::<Result<_>>()?;
    let ca: Vec<f64> = ab.iter().map(|a| 1.0 / a.sqrt()).collect();
    let cb: Vec<f64> = ab.iter().map(|a| -(1.0 - a).sqrt() / a.sqrt()).collect();
    mix(z_t, n_hat, &ca, &cb)
}

/// Graph form of the latent estimate with a constant `z_t`.
pub fn latent_estimate_graph<F: Real>(g: &mut Graph<F>, z_t: &Tensor<F>, n_hat: Var, t: &[usize], sched: &NoiseSchedule) -> Result<Var> {
    let ts = per_item(t, z_t.shape()[0])?;
    let ab: Vec<f64> = ts.iter().map(|&t| sched.alpha_bar(t)).collect::<Result<_>>()?;
    let zero = Tensor::zeros(z_t.shape())?;
    let first = mix(z_t, &zero, &ab.iter().map(|a| 1.0 / a.sqrt()).collect::<Vec<_>>(), &vec![0.0; ab.len()])?;
    let factors: Vec<f64> = ab.iter().map(|a| -(1.0 - a).sqrt() / a.sqrt()).collect();
    let c = g.constant(first);
    let scaled = g.scale_batch(n_hat, &factors)?;
    g.add(c, scaled)
}

/// A conditional noise predictor `n_hat = f(z_t, t, z_c)`.
pub trait NoisePredictor<F: Real> {
    /// `t` holds one timestep per batch item.
    fn predict(&self, g: &mut Graph<F>, z_t: Var, t: &[usize], z_c: Var) -> Result<Var>;
}

impl<F: Real, P: NoisePredictor<F> + ?Sized> NoisePredictor<F> for &P {
    fn predict(&self, g: &mut Graph<F>, z_t: Var, t: &[usize], z_c: Var) -> Result<Var> {
        (**self).predict(g, z_t, t, z_c)
    }
}

/// Forward-only evaluation of a predictor.
pub fn eval_noise<F: Real, P: NoisePredictor<F> + ?Sized>(model: &P, z_t: &Tensor<F>, t: &[usize], z_c: &Tensor<F>) -> Result<Tensor<F>> {
    let mut g = Graph::new();
    let zt = g.constant(z_t.clone());
    let zc = g.constant(z_c.clone());
    let out = model.predict(&mut g, zt, t, zc)?;
    let v = g.value(out).clone();
    check_same("noise prediction", z_t, &v)?;
    Ok(v)
}

/// Counts predictor invocations.
pub struct CountingPredictor<P> {
    pub inner: P,
    calls: AtomicUsize,
}

impl<P> CountingPredictor<P> {
    pub fn new(inner: P) -> Self {
        Self { inner, calls: AtomicUsize::new(0) }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

impl<F: Real, P: NoisePredictor<F>> NoisePredictor<F> for CountingPredictor<P> {
    fn predict(&self, g: &mut Graph<F>, z_t: Var, t: &[usize], z_c: Var) -> Result<Var> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.predict(g, z_t, t, z_c)
    }
}

/// Graph handles for the three loss values.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub noise: Var,
    pub latent: Var,
}

/// `L = MAE(n_hat, n) + lambda * MAE(z0_hat, z0)`. With `lambda == 0` the
/// latent term is still computed and reported but is not part of `total`.
#[allow(clippy::too_many_arguments)]
pub fn training_loss<F: Real, P: NoisePredictor<F> + ?Sized>(
    g: &mut Graph<F>,
    model: &P,
    z0: &Tensor<F>,
    z_c: Var,
    t: &[usize],
    n: &Tensor<F>,
    sched: &NoiseSchedule,
    lambda: f64,
) -> Result<LossTerms> {
    if !(lambda >= 0.0) {
        return Err(TensorError::InvalidArgument { op: "training_loss", reason: format!("lambda {lambda} < 0") });
    }
    let z_t = forward_diffuse(z0, t, n, sched)?;
    let zt = g.constant(z_t.clone());
    let n_hat = model.predict(g, zt, t, z_c)?;
    let nv = g.constant(n.clone());
    let noise = g.l1_distance(n_hat, nv)?;
    let z0_hat = latent_estimate_graph(g, &z_t, n_hat, t, sched)?;
    let z0v = g.constant(z0.clone());
    let latent = g.l1_distance(z0_hat, z0v)?;
    let total = if lambda == 0.0 {
        noise
    } else {
        let weighted = g.scale(latent, lambda)?;
        g.add(noise, weighted)?
    };
    Ok(LossTerms { total, noise, latent })
}

/// Evenly spaced timesteps from `T - 1` down to 0 (just `[T - 1]` for one step).
pub fn ddim_timesteps(steps: usize, t_max: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > t_max {
        return Err(TensorError::InvalidArgument { op: "ddim", reason: format!("steps {steps} outside [1, {t_max}]") });
    }
    if steps == 1 {
        return Ok(vec![t_max - 1]);
    }
    let last = (t_max - 1) as f64;
    Ok((0..steps).map(|i| (last * (steps - 1 - i) as f64 / (steps - 1) as f64).round() as usize).collect())
}

/// Deterministic DDIM from `z_T`; returns the final clean-latent estimate.
pub fn ddim_sample<F: Real, P: NoisePredictor<F> + ?Sized>(
    z_big_t: &Tensor<F>,
    z_c: &Tensor<F>,
    steps: usize,
    sched: &NoiseSchedule,
    model: &P,
) -> Result<Tensor<F>> {
    let ts = ddim_timesteps(steps, sched.steps())?;
    let mut z = z_big_t.clone();
    for (i, &t) in ts.iter().enumerate() {
        let n_hat = eval_noise(model, &z, &[t], z_c)?;
        let z0_hat = latent_estimate(&z, &n_hat, &[t], sched)?;
        match ts.get(i + 1) {
            None => return Ok(z0_hat),
            Some(&prev) => {
                let ab = sched.alpha_bar(prev)?;
                let b = z.shape()[0];
                z = mix(&z0_hat, &n_hat, &vec![ab.sqrt(); b], &vec![(1.0 - ab).sqrt(); b])?;
            }
        }
    }
    unreachable!("ddim_timesteps returns at least one step")
}

/// One predictor call at `t = T - 1` from fresh Gaussian noise shaped like `z_c`.
pub fn single_step_infer<F: Real, P: NoisePredictor<F> + ?Sized>(
    rng: &mut Rng,
    z_c: &Tensor<F>,
    sched: &NoiseSchedule,
    model: &P,
) -> Result<Tensor<F>> {
    let z_big_t = randn(z_c.shape(), rng)?;
    single_step_from(&z_big_t, z_c, sched, model)
}

/// [`single_step_infer`] with caller-supplied initial noise.
pub fn single_step_from<F: Real, P: NoisePredictor<F> + ?Sized>(
    z_big_t: &Tensor<F>,
    z_c: &Tensor<F>,
    sched: &NoiseSchedule,
    model: &P,
) -> Result<Tensor<F>> {
    let t = [sched.steps() - 1];
    let n_hat = eval_noise(model, z_big_t, &t, z_c)?;
    latent_estimate(z_big_t, &n_hat, &t, sched)
}

/// How the reverse process is run at inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum ReverseSpec {
    Single,
    Ddim { steps: usize },
}

impl ReverseSpec {
    /// Denoiser calls per image.
    pub fn calls(&self) -> usize {
        match self {
            ReverseSpec::Single => 1,
            ReverseSpec::Ddim { steps } => *steps,
        }
    }

    pub fn run<F: Real, P: NoisePredictor<F> + ?Sized>(
        &self,
        z_big_t: &Tensor<F>,
        z_c: &Tensor<F>,
        sched: &NoiseSchedule,
        model: &P,
    ) -> Result<Tensor<F>> {
        match self {
            ReverseSpec::Single => single_step_from(z_big_t, z_c, sched, model),
            ReverseSpec::Ddim { steps } => ddim_sample(z_big_t, z_c, *steps, sched, model),
        }
    }
}

impl fmt::Display for ReverseSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ReverseSpec::Single => f.write_str("single"),
            ReverseSpec::Ddim { steps } => write!(f, "ddim:{steps}"),
        }
    }
}

impl FromStr for ReverseSpec {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "single" {
            return Ok(ReverseSpec::Single);
        }
        let steps = s
            .strip_prefix("ddim:")
            .ok_or_else(|| format!("expected `single` or `ddim:<steps>`, got `{s}`"))?
            .parse::<usize>()
            .map_err(|e| format!("bad ddim step count in `{s}`: {e}"))?;
        if steps == 0 {
            return Err("ddim step count must be at least 1".into());
        }
        Ok(ReverseSpec::Ddim { steps })
    }
}

impl From<ReverseSpec> for String {
    fn from(r: ReverseSpec) -> String {
        r.to_string()
    }
}

impl TryFrom<String> for ReverseSpec {
    type Error = String;
    fn try_from(s: String) -> std::result::Result<Self, String> {
        s.parse()
    }
}

/// Uniform timesteps, one per batch item.
pub fn sample_timesteps(batch: usize, sched: &NoiseSchedule, rng: &mut Rng) -> Vec<usize> {
    (0..batch).map(|_| rng.below(sched.steps())).collect()
}

#[cfg(test)]
mod tests;

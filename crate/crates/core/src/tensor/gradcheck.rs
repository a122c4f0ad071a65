//! Central finite-difference gradient checking in `f64`.
//!
//! The numeric side only ever evaluates forward passes, so it stays
//! independent of the backward implementation it verifies.

use super::error::Result;
use super::graph::{Graph, Var};
use super::rng::Rng;
use super::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_err: f64,
    pub checked: usize,
    /// `(input index, element index)` of the worst element.
    pub worst: (usize, usize),
}

/// Denominator floor for the relative error.
pub const REL_FLOOR: f64 = 1e-3;

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Checks `d loss / d inputs` where `build` maps leaf vars to a scalar loss.
///
/// At most `max_per_input` elements of each input are perturbed (evenly
/// strided when the input is larger).
pub fn check<B>(inputs: &[Tensor<f64>], h: f64, max_per_input: usize, build: B) -> Result<GradCheckReport>
where
    B: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let loss = build(&mut g, &vars)?;
        Ok(g.value(loss).data()[0])
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let mut report = GradCheckReport { max_rel_err: 0.0, checked: 0, worst: (0, 0) };
    for (ii, input) in inputs.iter().enumerate() {
        let analytic: Vec<f64> = match grads.get(vars[ii]) {
            Some(t) => t.data().to_vec(),
            None => vec![0.0; input.numel()],
        };
        let n = input.numel();
        let stride = n.div_ceil(max_per_input.max(1)).max(1);
        for idx in (0..n).step_by(stride) {
            let mut values = inputs.to_vec();
            let orig = input.data()[idx];
            values[ii].data_mut()[idx] = orig + h;
            let plus = eval(&values)?;
            values[ii].data_mut()[idx] = orig - h;
            let minus = eval(&values)?;
            let numeric = (plus - minus) / (2.0 * h);
            let e = rel_err(analytic[idx], numeric);
            report.checked += 1;
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst = (ii, idx);
            }
        }
    }
    Ok(report)
}

/// Reduces an arbitrary-shape output to a scalar with fixed random weights,
/// so every output element contributes a distinct gradient.
pub fn weighted_sum(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let mut rng = Rng::new(seed);
    let n: usize = shape.iter().product();
    let w = Tensor::new(&shape, (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect())?;
    let wv = g.constant(w);
    let prod = g.mul(out, wv)?;
    g.sum_all(prod)
}

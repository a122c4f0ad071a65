//! Evaluation, the four-arm ablation and the DDIM step-count sweep.

use std::io::Write;

use serde::Serialize;

use crate::ae::Autoencoder;
use crate::data::SegSample;
use crate::diffusion::ReverseSpec;
use crate::metrics::{score_masks, MetricError, SegScores};
use crate::model::{infer, train_sdseg, Conditioning, Prediction, SdSegConfig, SdSegModel, SdSegStepLog};
use crate::nn::AdamW;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Invalid(String),
}

pub type ExpResult<T> = std::result::Result<T, ExperimentError>;

/// Images per inference chunk.
pub const EVAL_CHUNK: usize = 16;
pub const DEFAULT_CURVE_STEPS: [usize; 6] = [1, 2, 5, 10, 25, 50];

pub fn stack_images(samples: &[SegSample]) -> ExpResult<Tensor> {
    Ok(Tensor::stack_batch(&samples.iter().map(|s| s.image.unsqueeze0()).collect::<Vec<_>>())?)
}

/// Predictions for every sample in order.
pub fn predict(ae: &Autoencoder, model: &SdSegModel, samples: &[SegSample], reverse: ReverseSpec, seed: u64) -> ExpResult<Vec<Prediction>> {
    if samples.is_empty() {
        return Err(ExperimentError::Invalid("empty evaluation set".into()));
    }
    Ok(infer(ae, model, &stack_images(samples)?, reverse, seed, EVAL_CHUNK)?.predictions)
}

pub fn evaluate(ae: &Autoencoder, model: &SdSegModel, samples: &[SegSample], reverse: ReverseSpec, seed: u64) -> ExpResult<SegScores> {
    let preds = predict(ae, model, samples, reverse, seed)?;
    let masks: Vec<Tensor> = preds.into_iter().map(|p| p.mask).collect();
    let gts: Vec<Tensor> = samples.iter().map(|s| s.mask.clone()).collect();
    Ok(score_masks(&masks, &gts)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArmSpec {
    pub arm: usize,
    pub name: &'static str,
    pub config: SdSegConfig,
    /// Reverse process used to score this arm.
    pub eval_reverse: ReverseSpec,
}

/// The four cumulative arms. `base` is the full model and becomes arm 4
/// unchanged; arms trained without the latent term are scored with
/// `lambda0_reverse`.
pub fn ablation_arms(base: &SdSegConfig, lambda0_reverse: ReverseSpec) -> Vec<ArmSpec> {
    let with = |conditioning, trainable_encoder, lambda| {
        let mut c = base.clone();
        c.denoiser.conditioning = conditioning;
        c.trainable_encoder = trainable_encoder;
        c.lambda = lambda;
        c
    };
    vec![
        ArmSpec { arm: 1, name: "baseline", config: with(Conditioning::CrossAttention, false, 0.0), eval_reverse: lambda0_reverse },
        ArmSpec { arm: 2, name: "+concat", config: with(Conditioning::Concat, false, 0.0), eval_reverse: lambda0_reverse },
        ArmSpec { arm: 3, name: "+trainable-encoder", config: with(Conditioning::Concat, true, 0.0), eval_reverse: lambda0_reverse },
        ArmSpec { arm: 4, name: "+latent-estimation", config: base.clone(), eval_reverse: base.reverse },
    ]
}

#[derive(Clone, Debug, Serialize)]
pub struct ArmResult {
    pub arm: usize,
    pub name: String,
    pub dice: f64,
    pub iou: f64,
}

/// A trained arm, kept for follow-up experiments.
pub struct TrainedArm {
    pub spec: ArmSpec,
    pub model: SdSegModel,
    pub denoiser_opt: AdamW,
    pub tau_opt: Option<AdamW>,
    pub log: Vec<SdSegStepLog>,
    pub result: ArmResult,
}

/// Trains and scores each arm in turn; `on_arm` runs after each one.
pub fn ablation_run(
    ae: &Autoencoder,
    train: &[SegSample],
    test: &[SegSample],
    arms: Vec<ArmSpec>,
    eval_seed: u64,
    mut on_arm: impl FnMut(&TrainedArm) -> ExpResult<()>,
) -> ExpResult<Vec<TrainedArm>> {
    let mut out = Vec::with_capacity(arms.len());
    for spec in arms {
        let trained = train_sdseg(ae, train, &spec.config, |_, _| Ok(()))?;
        let scores = evaluate(ae, &trained.model, test, spec.eval_reverse, eval_seed)?;
        let result = ArmResult { arm: spec.arm, name: spec.name.to_string(), dice: scores.mean_dice, iou: scores.mean_iou };
        let arm = TrainedArm { spec, model: trained.model, denoiser_opt: trained.denoiser_opt, tau_opt: trained.tau_opt, log: trained.log, result };
        on_arm(&arm)?;
        out.push(arm);
    }
    Ok(out)
}

/// Header `arm,dice,iou`; `arm` holds the arm name.
pub fn write_ablation_csv<W: Write>(w: W, rows: &[ArmResult]) -> ExpResult<()> {
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(["arm", "dice", "iou"])?;
    for r in rows {
        csv.write_record([r.name.clone(), format!("{:.6}", r.dice), format!("{:.6}", r.iou)])?;
    }
    csv.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CurvePoint {
    pub steps: usize,
    pub lambda1_dice: f64,
    pub lambda0_dice: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReverseCurve {
    pub points: Vec<CurvePoint>,
    pub lambda1_single: f64,
    pub lambda0_single: f64,
}

/// Dice against DDIM step count for two models that differ only in the
/// latent-loss weight, plus each model's single-step Dice.
pub fn reverse_curve(
    ae1: &Autoencoder,
    lambda1: &SdSegModel,
    ae0: &Autoencoder,
    lambda0: &SdSegModel,
    test: &[SegSample],
    steps: &[usize],
    seed: u64,
) -> ExpResult<ReverseCurve> {
    if steps.is_empty() || steps.contains(&0) {
        return Err(ExperimentError::Invalid(format!("step counts must be non-empty and positive, got {steps:?}")));
    }
    let dice = |ae, m, r| evaluate(ae, m, test, r, seed).map(|s| s.mean_dice);
    let points = steps
        .iter()
        .map(|&n| {
            let r = ReverseSpec::Ddim { steps: n };
            Ok(CurvePoint { steps: n, lambda1_dice: dice(ae1, lambda1, r)?, lambda0_dice: dice(ae0, lambda0, r)? })
        })
        .collect::<ExpResult<_>>()?;
    Ok(ReverseCurve {
        points,
        lambda1_single: dice(ae1, lambda1, ReverseSpec::Single)?,
        lambda0_single: dice(ae0, lambda0, ReverseSpec::Single)?,
    })
}

/// Header `steps,lambda1_dice,lambda0_dice,lambda1_single_ref,lambda0_single_ref`;
/// the `_ref` columns repeat the single-step Dice on every row.
pub fn write_curve_csv<W: Write>(w: W, curve: &ReverseCurve) -> ExpResult<()> {
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(["steps", "lambda1_dice", "lambda0_dice", "lambda1_single_ref", "lambda0_single_ref"])?;
    for p in &curve.points {
        csv.write_record([
            p.steps.to_string(),
            format!("{:.6}", p.lambda1_dice),
            format!("{:.6}", p.lambda0_dice),
            format!("{:.6}", curve.lambda1_single),
            format!("{:.6}", curve.lambda0_single),
        ])?;
    }
    csv.flush().map_err(csv::Error::from)?;
    Ok(())
}

//! Subcommands.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use sdseg_core::ae::train_autoencoder;
use sdseg_core::checkpoint::{
    load_autoencoder, load_sdseg, save_autoencoder, save_sdseg, AeCheckpoint, SdSegCheckpoint,
};
use sdseg_core::data::{generate_dataset, load_split, Dataset, SegSample, Split};
use sdseg_core::diffusion::ReverseSpec;
use sdseg_core::experiments::{
    ablation_arms, ablation_run, predict, reverse_curve, write_ablation_csv, write_curve_csv,
};
use sdseg_core::metrics::{score_masks, stability_eval, MetricResult, StabilityReport};
use sdseg_core::model::{infer, train_sdseg, Prediction};
use sdseg_core::par;
use sdseg_core::tensor::derive_seed;

use crate::config::RunConfig;
use crate::plot::{plot_file, PlotKind};
use crate::run::{RunDir, RunKey, RunRecord};

#[derive(Parser, Debug)]
#[command(
    name = "sdseg",
    version,
    about = "Latent diffusion segmentation with single-step inference"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Configuration flags shared by every experiment command.
#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// JSON file merged over the defaults.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// `key=value`, dotted (`sdseg.lambda=0`) or a unique bare key (`lambda=0`). Repeatable.
    #[arg(long = "override", value_name = "K=V")]
    pub overrides: Vec<String>,
    /// Master seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic dataset into OUT/train and OUT/test.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Train the autoencoder; writes ae.ckpt and ae_log.csv.
    TrainAe {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Train the denoiser and vision encoder; writes sdseg.ckpt and train_log.csv.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_name = "CKPT")]
        ae: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Segment the test split; writes <id>_prob.tnsr and <id>_mask.tnsr.
    Infer {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_name = "CKPT")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// `single` or `ddim:<steps>`.
        #[arg(long)]
        reverse: Option<ReverseSpec>,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Dice and IoU on the test split; writes metrics.json and per_sample.csv.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_name = "CKPT")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long)]
        reverse: Option<ReverseSpec>,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Repeated-inference stability on the test split; writes stability.json.
    Stability {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_name = "CKPT")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long)]
        reverse: Option<ReverseSpec>,
        /// Number of runs (at least 2).
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Train and score the four ablation arms; writes ablation.csv, armN.ckpt and armN_log.csv.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_name = "CKPT")]
        ae: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Dice against DDIM step count for a lambda=1 and a lambda=0 model; writes reverse_curve.csv.
    ReverseCurve {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_name = "CKPT")]
        lambda1: PathBuf,
        #[arg(long, value_name = "CKPT")]
        lambda0: PathBuf,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Render a CSV as an SVG line (curve) or bar chart.
    Plot {
        #[arg(long, value_name = "FILE")]
        csv: PathBuf,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        #[arg(long, default_value = "curve")]
        kind: PlotKind,
    },
}

/// A required input path that does not exist.
#[derive(Debug, thiserror::Error)]
#[error("input not found: {0}")]
pub struct MissingInput(pub PathBuf);

pub const EXIT_FAILURE: i32 = 1;

/// Parses `argv`, runs the command and returns the process exit code.
pub fn main_with<I: IntoIterator<Item = OsString>>(argv: I) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    par::init_from_env();
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("sdseg: error: {msg}");
            EXIT_FAILURE
        }
    }
}

fn require(paths: &[&Path]) -> Result<()> {
    for p in paths {
        if !p.exists() {
            return Err(MissingInput(p.to_path_buf()).into());
        }
    }
    Ok(())
}

fn build_config(args: &ConfigArgs) -> Result<RunConfig> {
    if let Some(p) = &args.config {
        require(&[p])?;
    }
    RunConfig::build(args.config.as_deref(), &args.overrides, args.seed)
}

fn inputs(named: &[(&str, &Path)]) -> Vec<(String, String)> {
    named
        .iter()
        .map(|(n, p)| (n.to_string(), p.display().to_string()))
        .collect()
}

fn split(root: &Path, s: Split) -> Result<Dataset> {
    let dir = root.join(s.name());
    require(&[&dir])?;
    Ok(load_split(&dir)?)
}

/// Takes the lock on the run directory and announces it.
fn open_run(key: &RunKey<'_>, base: &Path) -> Result<RunDir> {
    let dir = RunDir::acquire(&key.dir_under(base))?;
    println!("{}", dir.path().display());
    Ok(dir)
}

fn finish(
    rd: &RunDir,
    mut rec: RunRecord,
    outputs: &[&str],
    results: serde_json::Value,
) -> Result<()> {
    rec.outputs = outputs.iter().map(|s| s.to_string()).collect();
    rec.results = results;
    rec.write(rd.path())?;
    Ok(())
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData { cfg, out } => gen_data(&build_config(&cfg)?, &out),
        Command::TrainAe { cfg, data, out } => {
            require(&[&data])?;
            train_ae_cmd(&build_config(&cfg)?, &data, &out)
        }
        Command::Train { cfg, data, ae, out } => {
            require(&[&data, &ae])?;
            train_cmd(&build_config(&cfg)?, &data, &ae, &out)
        }
        Command::Infer {
            cfg,
            checkpoint,
            data,
            reverse,
            out,
        } => {
            require(&[&checkpoint, &data])?;
            let mut c = build_config(&cfg)?;
            if let Some(r) = reverse {
                c.sdseg.reverse = r;
            }
            infer_cmd(&c, &checkpoint, &data, &out)
        }
        Command::Eval {
            cfg,
            checkpoint,
            data,
            reverse,
            out,
        } => {
            require(&[&checkpoint, &data])?;
            let mut c = build_config(&cfg)?;
            if let Some(r) = reverse {
                c.sdseg.reverse = r;
            }
            eval_cmd(&c, &checkpoint, &data, &out)
        }
        Command::Stability {
            cfg,
            checkpoint,
            data,
            reverse,
            runs,
            out,
        } => {
            require(&[&checkpoint, &data])?;
            let mut c = build_config(&cfg)?;
            if let Some(r) = reverse {
                c.sdseg.reverse = r;
            }
            if let Some(m) = runs {
                c.eval.stability_runs = m;
            }
            stability_cmd(&c, &checkpoint, &data, &out)
        }
        Command::Ablate { cfg, data, ae, out } => {
            require(&[&data, &ae])?;
            ablate_cmd(&build_config(&cfg)?, &data, &ae, &out)
        }
        Command::ReverseCurve {
            cfg,
            lambda1,
            lambda0,
            data,
            out,
        } => {
            require(&[&lambda1, &lambda0, &data])?;
            reverse_curve_cmd(&build_config(&cfg)?, &lambda1, &lambda0, &data, &out)
        }
        Command::Plot { csv, out, kind } => {
            require(&[&csv])?;
            plot_file(&csv, &out, kind)?;
            println!("{}", out.display());
            Ok(())
        }
    }
}

fn gen_data(c: &RunConfig, out: &Path) -> Result<()> {
    let rd = RunDir::acquire(out)?;
    let key = RunKey {
        command: "gen-data",
        config: c,
        inputs: Vec::new(),
    };
    let d = &c.data;
    generate_dataset(rd.path(), d.n_train, d.n_test, d.height, d.width, c.seed)?;
    println!("{}", out.display());
    finish(
        &rd,
        RunRecord::new(&key),
        &["train", "test"],
        json!({ "n_train": d.n_train, "n_test": d.n_test }),
    )
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("{}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn train_ae_cmd(c: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    let train = split(data, Split::Train)?;
    let key = RunKey {
        command: "train-ae",
        config: c,
        inputs: inputs(&[("data", data)]),
    };
    let rd = open_run(&key, out)?;
    let trained = train_autoencoder(&train.samples, &c.ae, &c.ae_train, |_| {})?;
    let last = trained.log.last().copied();
    write_csv(&rd.join("ae_log.csv"), &trained.log)?;
    let ckpt = AeCheckpoint {
        model: trained.model,
        train: c.ae_train.clone(),
        optimizer: trained.optimizer,
        step: c.ae_train.steps as u64,
    };
    save_autoencoder(&rd.join("ae.ckpt"), &ckpt)?;
    finish(
        &rd,
        RunRecord::new(&key),
        &["ae.ckpt", "ae_log.csv"],
        json!({ "latent_scale": ckpt.model.latent_scale, "final": last }),
    )
}

/// Steps between intermediate checkpoints during denoiser training.
pub const CHECKPOINT_EVERY: usize = 1000;

fn train_cmd(c: &RunConfig, data: &Path, ae_path: &Path, out: &Path) -> Result<()> {
    let train = split(data, Split::Train)?;
    let ae = load_autoencoder(ae_path, Some(&c.ae))?.model;
    let key = RunKey {
        command: "train",
        config: c,
        inputs: inputs(&[("data", data), ("ae", ae_path)]),
    };
    let rd = open_run(&key, out)?;
    let ckpt_path = rd.join("sdseg.ckpt");
    let trained = train_sdseg(&ae, &train.samples, &c.sdseg, |log, tr| {
        if (log.step + 1) % CHECKPOINT_EVERY == 0 && log.step + 1 < c.sdseg.steps {
            let snap = SdSegCheckpoint {
                ae: ae.clone(),
                model: tr.model.clone(),
                config: tr.config.clone(),
                denoiser_opt: tr.denoiser_opt.clone(),
                tau_opt: tr.tau_opt.clone(),
                step: (log.step + 1) as u64,
            };
            save_sdseg(&ckpt_path, &snap)
                .map_err(|e| sdseg_core::tensor::TensorError::Format(e.to_string()))?;
        }
        Ok(())
    })?;
    write_csv(&rd.join("train_log.csv"), &trained.log)?;
    let last = trained.log.last().copied();
    let ckpt = SdSegCheckpoint {
        ae,
        model: trained.model,
        config: c.sdseg.clone(),
        denoiser_opt: trained.denoiser_opt,
        tau_opt: trained.tau_opt,
        step: c.sdseg.steps as u64,
    };
    save_sdseg(&ckpt_path, &ckpt)?;
    finish(
        &rd,
        RunRecord::new(&key),
        &["sdseg.ckpt", "train_log.csv"],
        json!({ "final": last }),
    )
}

fn load_model(c: &RunConfig, path: &Path) -> Result<SdSegCheckpoint> {
    Ok(load_sdseg(path, Some((&c.ae, &c.sdseg)))?)
}

fn infer_cmd(c: &RunConfig, ckpt_path: &Path, data: &Path, out: &Path) -> Result<()> {
    let test = split(data, Split::Test)?;
    let ck = load_model(c, ckpt_path)?;
    let key = RunKey {
        command: "infer",
        config: c,
        inputs: inputs(&[("checkpoint", ckpt_path), ("data", data)]),
    };
    let rd = open_run(&key, out)?;
    let images = sdseg_core::experiments::stack_images(&test.samples)?;
    let res = infer(
        &ck.ae,
        &ck.model,
        &images,
        c.sdseg.reverse,
        c.seed,
        c.eval.chunk,
    )?;
    let mut outputs = Vec::new();
    for (s, p) in test.samples.iter().zip(&res.predictions) {
        for (suffix, t) in [("prob", &p.prob), ("mask", &p.mask)] {
            let name = format!("{}_{suffix}.tnsr", s.id);
            let f = fs::File::create(rd.join(&name)).with_context(|| name.clone())?;
            t.write_tnsr(std::io::BufWriter::new(f))?;
            outputs.push(name);
        }
    }
    let refs: Vec<&str> = outputs.iter().map(String::as_str).collect();
    let results = json!({ "reverse": c.sdseg.reverse, "images": res.predictions.len(), "denoiser_calls_per_image": res.calls_per_image });
    finish(&rd, RunRecord::new(&key), &refs, results)
}

#[derive(Serialize)]
struct SampleRow<'a> {
    id: &'a str,
    dice: f64,
    iou: f64,
}

/// Per-sample and aggregate overlap scores, with an optional stability block.
#[derive(Serialize)]
pub struct MetricsReport {
    pub reverse: ReverseSpec,
    pub seed: u64,
    pub ids: Vec<String>,
    pub dice: Vec<f64>,
    pub iou: Vec<f64>,
    pub mean_dice: f64,
    pub mean_iou: f64,
    pub stability: Option<StabilityReport>,
}

fn eval_cmd(c: &RunConfig, ckpt_path: &Path, data: &Path, out: &Path) -> Result<()> {
    let test = split(data, Split::Test)?;
    let ck = load_model(c, ckpt_path)?;
    let key = RunKey {
        command: "eval",
        config: c,
        inputs: inputs(&[("checkpoint", ckpt_path), ("data", data)]),
    };
    let rd = open_run(&key, out)?;
    let preds = predict(&ck.ae, &ck.model, &test.samples, c.sdseg.reverse, c.seed)?;
    let report = report(c, &test.samples, &preds, None)?;
    let rows: Vec<SampleRow> = report
        .ids
        .iter()
        .zip(report.dice.iter().zip(&report.iou))
        .map(|(id, (&dice, &iou))| SampleRow { id, dice, iou })
        .collect();
    write_csv(&rd.join("per_sample.csv"), &rows)?;
    fs::write(
        rd.join("metrics.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    println!("dice {:.4} iou {:.4}", report.mean_dice, report.mean_iou);
    finish(
        &rd,
        RunRecord::new(&key),
        &["metrics.json", "per_sample.csv"],
        json!({ "mean_dice": report.mean_dice, "mean_iou": report.mean_iou }),
    )
}

fn report(
    c: &RunConfig,
    samples: &[SegSample],
    preds: &[Prediction],
    stability: Option<StabilityReport>,
) -> Result<MetricsReport> {
    let masks: Vec<_> = preds.iter().map(|p| p.mask.clone()).collect();
    let gts: Vec<_> = samples.iter().map(|s| s.mask.clone()).collect();
    let s = score_masks(&masks, &gts)?;
    Ok(MetricsReport {
        reverse: c.sdseg.reverse,
        seed: c.seed,
        ids: samples.iter().map(|s| s.id.clone()).collect(),
        dice: s.dice,
        iou: s.iou,
        mean_dice: s.mean_dice,
        mean_iou: s.mean_iou,
        stability,
    })
}

/// Noise seeds of the repeated runs.
pub fn stability_seeds(seed: u64, runs: usize) -> Vec<u64> {
    (0..runs as u64)
        .map(|k| derive_seed(seed, 0x57AB + k))
        .collect()
}

fn stability_cmd(c: &RunConfig, ckpt_path: &Path, data: &Path, out: &Path) -> Result<()> {
    if c.eval.stability_runs < 2 {
        bail!(
            "stability needs at least 2 runs, got {}",
            c.eval.stability_runs
        );
    }
    let test = split(data, Split::Test)?;
    let ck = load_model(c, ckpt_path)?;
    let key = RunKey {
        command: "stability",
        config: c,
        inputs: inputs(&[("checkpoint", ckpt_path), ("data", data)]),
    };
    let rd = open_run(&key, out)?;
    let seeds = stability_seeds(c.seed, c.eval.stability_runs);
    let segmenter = |seed: u64| -> MetricResult<Vec<Prediction>> {
        predict(&ck.ae, &ck.model, &test.samples, c.sdseg.reverse, seed)
            .map_err(|e| sdseg_core::metrics::MetricError::Invalid(e.to_string()))
    };
    let stab = stability_eval(&segmenter, &seeds)?;
    let first = segmenter(seeds[0])?;
    let report = report(c, &test.samples, &first, Some(stab))?;
    fs::write(
        rd.join("stability.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    let s = report.stability.as_ref().expect("set above");
    println!(
        "score ssim {:.4} ms-ssim {:.4} feat_dist {:.5}",
        s.score.ssim, s.score.ms_ssim, s.score.feat_dist
    );
    finish(
        &rd,
        RunRecord::new(&key),
        &["stability.json"],
        serde_json::to_value(s)?,
    )
}

fn ablate_cmd(c: &RunConfig, data: &Path, ae_path: &Path, out: &Path) -> Result<()> {
    let train = split(data, Split::Train)?;
    let test = split(data, Split::Test)?;
    let ae = load_autoencoder(ae_path, Some(&c.ae))?.model;
    let key = RunKey {
        command: "ablate",
        config: c,
        inputs: inputs(&[("data", data), ("ae", ae_path)]),
    };
    let rd = open_run(&key, out)?;
    let arms = ablation_arms(&c.sdseg, c.eval.lambda0_reverse);
    let trained = ablation_run(&ae, &train.samples, &test.samples, arms, c.seed, |arm| {
        let ck = SdSegCheckpoint {
            ae: ae.clone(),
            model: arm.model.clone(),
            config: arm.spec.config.clone(),
            denoiser_opt: arm.denoiser_opt.clone(),
            tau_opt: arm.tau_opt.clone(),
            step: arm.spec.config.steps as u64,
        };
        save_sdseg(&rd.join(&format!("arm{}.ckpt", arm.spec.arm)), &ck)
            .map_err(|e| sdseg_core::experiments::ExperimentError::Invalid(e.to_string()))?;
        println!(
            "arm {} {} dice {:.4} iou {:.4}",
            arm.result.arm, arm.result.name, arm.result.dice, arm.result.iou
        );
        Ok(())
    })?;
    let mut outputs = vec!["ablation.csv".to_string()];
    for arm in &trained {
        let log = format!("arm{}_log.csv", arm.spec.arm);
        write_csv(&rd.join(&log), &arm.log)?;
        outputs.push(format!("arm{}.ckpt", arm.spec.arm));
        outputs.push(log);
    }
    let rows: Vec<_> = trained.iter().map(|a| a.result.clone()).collect();
    let f = fs::File::create(rd.join("ablation.csv"))?;
    write_ablation_csv(f, &rows)?;
    let refs: Vec<&str> = outputs.iter().map(String::as_str).collect();
    finish(
        &rd,
        RunRecord::new(&key),
        &refs,
        serde_json::to_value(&rows)?,
    )
}

fn reverse_curve_cmd(c: &RunConfig, l1: &Path, l0: &Path, data: &Path, out: &Path) -> Result<()> {
    let test = split(data, Split::Test)?;
    let a = load_sdseg(l1, None)?;
    let b = load_sdseg(l0, None)?;
    let mut ca = a.config.clone();
    let mut cb = b.config.clone();
    ca.lambda = 0.0;
    cb.lambda = 0.0;
    if ca != cb || a.ae.params.content_hash() != b.ae.params.content_hash() {
        bail!(
            "{} and {} must be trained identically except for lambda",
            l1.display(),
            l0.display()
        );
    }
    let key = RunKey {
        command: "reverse-curve",
        config: c,
        inputs: inputs(&[("lambda1", l1), ("lambda0", l0), ("data", data)]),
    };
    let rd = open_run(&key, out)?;
    let curve = reverse_curve(
        &a.ae,
        &a.model,
        &b.ae,
        &b.model,
        &test.samples,
        &c.eval.curve_steps,
        c.seed,
    )?;
    let f = fs::File::create(rd.join("reverse_curve.csv"))?;
    write_curve_csv(f, &curve)?;
    finish(
        &rd,
        RunRecord::new(&key),
        &["reverse_curve.csv"],
        serde_json::to_value(&curve)?,
    )
}

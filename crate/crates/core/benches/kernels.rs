//! Parallel versus sequential execution of the hot kernels and of whole
//! training and inference steps.
//!
//! With the `parallel` feature each benchmark runs twice: inside a one-thread
//! pool and inside the default pool. Without it only the sequential fallback
//! is measured.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use sdseg_core::ae::{AeConfig, Autoencoder};
use sdseg_core::data::{generate_split, Split};
use sdseg_core::diffusion::ReverseSpec;
use sdseg_core::experiments::stack_images;
use sdseg_core::model::{infer, SdSegConfig, SdSegModel, SdSegTrainer};
use sdseg_core::tensor::kernels::{conv2d_backward, conv2d_forward, ConvGeom};
use sdseg_core::tensor::{randn, Rng, Tensor};

fn modes() -> Vec<(&'static str, Option<usize>)> {
    if cfg!(feature = "parallel") {
        vec![("threads-1", Some(1)), ("threads-default", None)]
    } else {
        vec![("sequential", None)]
    }
}

fn in_mode<R: Send>(threads: Option<usize>, f: impl FnOnce() -> R + Send) -> R {
    #[cfg(feature = "parallel")]
    {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(n) = threads {
            b = b.num_threads(n);
        }
        b.build().expect("thread pool").install(f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        f()
    }
}

fn conv(c: &mut Criterion) {
    let g = ConvGeom { batch: 8, cin: 32, h: 64, w: 64, cout: 32, k: 3, stride: 1, pad: 1 };
    let mut rng = Rng::new(0);
    let x: Tensor = randn(&[g.batch * g.cin * g.h * g.w], &mut rng).unwrap();
    let w: Tensor = randn(&[g.cout * g.cin * 9], &mut rng).unwrap();
    let gy: Tensor = randn(&[g.batch * g.cout * g.out_h() * g.out_w()], &mut rng).unwrap();
    let mut group = c.benchmark_group("conv2d_8x32x64x64");
    group.sample_size(10);
    for (name, threads) in modes() {
        group.bench_function(BenchmarkId::new("forward", name), |b| {
            b.iter(|| in_mode(threads, || black_box(conv2d_forward(x.data(), w.data(), None, &g))))
        });
        group.bench_function(BenchmarkId::new("backward", name), |b| {
            b.iter(|| in_mode(threads, || black_box(conv2d_backward(x.data(), w.data(), gy.data(), &g, true, true, false).weight)))
        });
    }
    group.finish();
}

fn pipeline(c: &mut Criterion) {
    let ae = Autoencoder::new(AeConfig { channels: 8, ..AeConfig::default() }, 0);
    let samples = generate_split(Split::Train, 16, 64, 64, 0).unwrap();
    let images = stack_images(&samples).unwrap();
    let model = SdSegModel::new(&ae, &SdSegConfig::default().denoiser, 0).unwrap();
    let mut group = c.benchmark_group("pipeline_64x64");
    group.sample_size(10);
    for (name, threads) in modes() {
        group.bench_function(BenchmarkId::new("train_step_trainable", name), |b| {
            let mut trainer = SdSegTrainer::new(&ae, &samples, SdSegConfig { steps: usize::MAX, ..SdSegConfig::default() }).unwrap();
            b.iter(|| in_mode(threads, || black_box(trainer.step().unwrap())))
        });
        group.bench_function(BenchmarkId::new("infer_16_single", name), |b| {
            b.iter(|| in_mode(threads, || black_box(infer(&ae, &model, &images, ReverseSpec::Single, 0, 16).unwrap())))
        });
    }
    group.finish();
}

criterion_group!(benches, conv, pipeline);
criterion_main!(benches);

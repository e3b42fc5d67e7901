//! Benchmarks: generation under different policies, the dense kernels they
//! are built from, and mask construction.

use criterion::{black_box, criterion_group, criterion_main, Criterion};
use skipformer_bench::{bench_model, bench_prompt, random_matrix};
use skipformer_core::numerics::matvec;
use skipformer_core::pruning::{magnitude_mask, prune_per_output, wanda_scores};
use skipformer_core::runtime::generate;
use skipformer_core::{ComputePolicy, PolicyMode, TokenScope};

fn generation(c: &mut Criterion) {
    let model = bench_model();
    let prompt = bench_prompt(model.config.d_model);
    let mut group = c.benchmark_group("generate_16_tokens");
    let policies = [
        ("dense", ComputePolicy::dense()),
        (
            "skip_block_half",
            ComputePolicy::new(PolicyMode::SkipBlock, 0, 2, TokenScope::ALL),
        ),
        (
            "skip_ffn_generated",
            ComputePolicy::new(PolicyMode::SkipFfn, 0, 2, TokenScope::GENERATED_ONLY),
        ),
        (
            "parallel_blocks_all",
            ComputePolicy::new(PolicyMode::ParallelBlocks, 0, 2, TokenScope::ALL),
        ),
    ];
    for (name, policy) in policies {
        group.bench_function(name, |b| {
            b.iter(|| {
                generate(black_box(&model), policy, black_box(&prompt), 16, None)
                    .expect("generation")
            })
        });
    }
    group.finish();
}

fn kernels(c: &mut Criterion) {
    let w = random_matrix(256, 256, 1);
    let x: Vec<f32> = (0..256).map(|i| (i as f32).sin()).collect();
    c.bench_function("matvec_256", |b| {
        b.iter(|| matvec(black_box(&x), black_box(&w)).expect("matvec"))
    });
}

fn masks(c: &mut Criterion) {
    let w = random_matrix(256, 256, 2);
    let norms: Vec<f32> = (0..256).map(|i| (i as f32 / 256.0) + 0.1).collect();
    let mut group = c.benchmark_group("mask_build_256");
    group.bench_function("activation_aware", |b| {
        b.iter(|| {
            let scores = wanda_scores(black_box(&w), black_box(&norms)).expect("scores");
            prune_per_output(&scores, 0.5).expect("mask")
        })
    });
    group.bench_function("magnitude", |b| {
        b.iter(|| magnitude_mask(black_box(&w), 0.5).expect("mask"))
    });
    group.finish();
}

criterion_group!(benches, generation, kernels, masks);
criterion_main!(benches);

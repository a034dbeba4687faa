use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use eventmeta::data::oncology_dataset;
use eventmeta::event_model::{log_category_probs, ArmKernel, RateParams};
use eventmeta::exec::Execution;
use eventmeta::model::{Anchor, EffectStructure, HierModel, ModelSpec};
use eventmeta::sampler::{run, Init, LogDensity, SamplerConfig};
use eventmeta::sim::{bundled_scenario, run_scenario};

const STRATEGIES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn likelihood(c: &mut Criterion) {
    let data = oncology_dataset();
    let arm = data.trials[1].arms[0].clone();
    let kernel = ArmKernel::new(&arm);
    let rates = RateParams::new(0.02, 0.3, 0.05, arm.tau);
    c.bench_function("arm_log_likelihood", |b| b.iter(|| kernel.log_likelihood(&log_category_probs(std::hint::black_box(&rates)))));

    let model = HierModel::new(&ModelSpec::vague(EffectStructure::RandomEffects, Anchor::TreatmentAnchored), &data).unwrap();
    let x = model.initial_point();
    c.bench_function("oncology_log_posterior", |b| b.iter(|| model.log_density(std::hint::black_box(&x))));
}

fn chains(c: &mut Criterion) {
    let data = oncology_dataset();
    let model = HierModel::new(&ModelSpec::vague(EffectStructure::RandomEffects, Anchor::TreatmentAnchored), &data).unwrap();
    let mut group = c.benchmark_group("chains");
    group.sample_size(10);
    for (name, exec) in STRATEGIES {
        let config = SamplerConfig {
            warmup_iterations: 250,
            sampling_iterations: 250,
            execution: exec,
            ..SamplerConfig::default()
        };
        group.bench_with_input(BenchmarkId::new("oncology_re_4x500", name), &config, |b, cfg| {
            b.iter(|| run(&model, cfg, &Init::Jittered).unwrap())
        });
    }
    group.finish();
}

fn replications(c: &mut Criterion) {
    let mut spec = bundled_scenario("onc-3").unwrap();
    spec.n_replications = 8;
    spec.sampler.warmup_iterations = 200;
    spec.sampler.sampling_iterations = 200;
    let mut group = c.benchmark_group("replications");
    group.sample_size(10);
    for (name, exec) in STRATEGIES {
        group.bench_with_input(BenchmarkId::new("onc3_8reps", name), &exec, |b, exec| {
            b.iter(|| run_scenario(&spec, *exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, likelihood, chains, replications);
criterion_main!(benches);

//! Batch decode throughput: the cell fan-out against a sequential loop over
//! the same public decode API.

use criterion::{criterion_group, criterion_main, Criterion};
use std::path::PathBuf;

use visage_core::decoder::{decode, DecodePolicy};
use visage_core::denoiser::ScriptedDenoiser;
use visage_core::grounding::GroundingConfig;

use visage_harness::experiment::{run_cells, ExperimentConfig, ScenarioSource};
use visage_harness::scenario_gen::{generate_corpus, CorpusKind, CorpusParams};

fn experiment_cells(c: &mut Criterion) {
    let params = CorpusParams {
        trajectory_steps: 16,
        ..CorpusParams::default()
    };
    let mut corpus = generate_corpus(CorpusKind::Mixed, 64, 3, params);
    corpus.extend(generate_corpus(
        CorpusKind::TrajectoryGrounded,
        16,
        3,
        params,
    ));
    let policies = vec![
        DecodePolicy::baseline(),
        DecodePolicy::visage(GroundingConfig::default()),
    ];
    let config = ExperimentConfig {
        scenarios: corpus.iter().cloned().map(ScenarioSource::Inline).collect(),
        policies: policies.clone(),
        schedule_override: None,
        seeds: vec![0, 1],
        out_dir: PathBuf::from("unused"),
        exports: vec![],
    };

    let mut group = c.benchmark_group("experiment_320_cells");
    group.sample_size(20);
    group.bench_function("parallel", |b| {
        b.iter(|| {
            let (traces, failures) = run_cells(&config).unwrap();
            assert!(failures.is_empty());
            traces
        })
    });
    group.bench_function("sequential", |b| {
        b.iter(|| {
            let mut traces = Vec::new();
            for spec in &corpus {
                let denoiser = ScriptedDenoiser::new(spec.clone()).unwrap();
                let schedule = spec.schedule().unwrap();
                for policy in &policies {
                    for seed in [0u64, 1] {
                        let (_, trace) = decode(&denoiser, &schedule, policy, seed).unwrap();
                        traces.push(trace);
                    }
                }
            }
            traces
        })
    });
    group.finish();
}

criterion_group!(benches, experiment_cells);
criterion_main!(benches);

//! Data-parallel driver loops against their sequential composition.
//!
//! Built with default features, `run_stability_sweep` fans trials out over
//! the rayon pool; the "sequential" variants drive the identical per-item
//! public API in a plain loop. Building with `--no-default-features` makes
//! the two coincide.

use criterion::{criterion_group, criterion_main, Criterion};
use std::collections::BTreeMap;

use visage_core::denoiser::{CandidateEval, DenoiserOutput};
use visage_core::grounding::{score_candidates, GroundingConfig};
use visage_core::verification::{run_stability_sweep, sweep_trial, StabilitySweepConfig};

fn stability_sweep(c: &mut Criterion) {
    let config = StabilitySweepConfig {
        trials: 2_000,
        max_candidates: 12,
        max_k: 6,
        epsilon_max: 1.0,
        seed: 42,
    };
    let mut group = c.benchmark_group("stability_sweep_2k_trials");
    group.bench_function("parallel", |b| {
        b.iter(|| run_stability_sweep(&config).unwrap())
    });
    group.bench_function("sequential", |b| {
        b.iter(|| {
            (0..config.trials)
                .map(|trial_id| sweep_trial(&config, trial_id).unwrap())
                .collect::<Vec<_>>()
        })
    });
    group.finish();
}

fn grounding_pipeline(c: &mut Criterion) {
    let candidates = 64;
    let heads = 16;
    let image_tokens = 1024;
    let vocab = 256;
    let mut evals = BTreeMap::new();
    for position in 1..=candidates {
        let mut distribution = vec![0.5 / (vocab - 1) as f64; vocab];
        distribution[position % vocab] = 0.5;
        let attention: Vec<Vec<f64>> = (0..heads)
            .map(|head| {
                (0..image_tokens)
                    .map(|column| ((position * 31 + head * 7 + column) % 97) as f64 / 97.0)
                    .collect()
            })
            .collect();
        evals.insert(
            position,
            CandidateEval {
                distribution,
                attention,
            },
        );
    }
    let output = DenoiserOutput { evals };
    let config = GroundingConfig::default();
    c.bench_function("score_64_candidates_16x1024", |b| {
        b.iter(|| score_candidates(&output, &config).unwrap())
    });
}

criterion_group!(benches, stability_sweep, grounding_pipeline);
criterion_main!(benches);

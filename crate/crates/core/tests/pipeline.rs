//! End-to-end decode behavior: the shortcut flip, baseline embedding,
//! determinism, trace replay, and the trajectory generator contracts.

use std::collections::BTreeMap;

use visage_core::decoder::{
    compare_policies, decode, first_divergence, DecodePolicy, DecodeTrace, TieBreak,
};
use visage_core::denoiser::{
    make_shortcut_scenario, make_trajectory_scenario, AttentionMode, ScenarioSpec, ScriptEntry,
    ScriptRecord, ScriptedDenoiser, TrajectoryKind, SCENARIO_SCHEMA_VERSION,
};
use visage_core::grounding::{AggregationMode, GroundingConfig};
use visage_core::sequence::{make_block_schedule, SequenceState, UnmaskSchedule};
use visage_core::verification::brute_force_select;

fn visage_default() -> DecodePolicy {
    DecodePolicy::visage(GroundingConfig::default())
}

fn decode_scenario(
    spec: &ScenarioSpec,
    policy: &DecodePolicy,
    seed: u64,
) -> (Vec<u32>, DecodeTrace) {
    let denoiser = ScriptedDenoiser::new(spec.clone()).unwrap();
    let schedule = spec.schedule().unwrap();
    decode(&denoiser, &schedule, policy, seed).unwrap()
}

/// Two scripted one-hot positions commit in confidence order.
#[test]
fn scripted_one_hot_decode_commits_in_confidence_order() {
    let mut spec = make_shortcut_scenario(0.9, 0.6, 4, 2, 2);
    let one_hot = |token: usize| {
        let mut distribution = vec![0.0; 8];
        distribution[token] = 1.0;
        distribution
    };
    spec.entries = vec![
        ScriptRecord {
            step: 1,
            position: 1,
            script: ScriptEntry::Explicit {
                distribution: {
                    let mut d = vec![0.0; 8];
                    d[5] = 0.7;
                    d[0] = 0.3;
                    d
                },
                attention: vec![vec![0.25; 4]; 2],
            },
        },
        ScriptRecord {
            step: 1,
            position: 2,
            script: ScriptEntry::Explicit {
                distribution: one_hot(2),
                attention: vec![vec![0.25; 4]; 2],
            },
        },
        ScriptRecord {
            step: 2,
            position: 1,
            script: ScriptEntry::Explicit {
                distribution: one_hot(5),
                attention: vec![vec![0.25; 4]; 2],
            },
        },
        ScriptRecord {
            step: 2,
            position: 2,
            script: ScriptEntry::Explicit {
                distribution: one_hot(2),
                attention: vec![vec![0.25; 4]; 2],
            },
        },
    ];
    spec.num_image_tokens = 4;
    spec.num_heads = 2;
    spec.ground_truth_entropy.clear();
    let (response, trace) = decode_scenario(&spec, &DecodePolicy::baseline(), 0);
    assert_eq!(response, vec![5, 2]);
    // Position 2 (confidence 1.0) commits first.
    assert_eq!(trace.committed_step(2), Some(1));
    assert_eq!(trace.committed_step(1), Some(2));
}

/// The canonical shortcut case: confidence ranking commits the diffuse
/// high-confidence token first; the grounding penalty flips the order.
#[test]
fn grounding_penalty_flips_the_shortcut_commitment() {
    let spec = make_shortcut_scenario(0.9, 0.6, 16, 8, 8);

    let (_, baseline) = decode_scenario(&spec, &DecodePolicy::baseline(), 0);
    assert_eq!(
        baseline.committed_step(1),
        Some(1),
        "baseline commits S first"
    );
    assert_eq!(baseline.committed_step(2), Some(2));

    let (_, visage) = decode_scenario(&spec, &visage_default(), 0);
    assert_eq!(visage.committed_step(2), Some(1), "visage commits G first");
    assert_eq!(visage.committed_step(1), Some(2));

    // The step-1 scores carry the corrected confidences.
    let scores = &visage.steps[0].scores;
    let u_shortcut = scores
        .iter()
        .find(|s| s.position == 1)
        .unwrap()
        .ranking_score;
    let u_grounded = scores
        .iter()
        .find(|s| s.position == 2)
        .unwrap()
        .ranking_score;
    assert!((u_shortcut - 0.4633645218586349).abs() < 1e-9);
    assert!((u_grounded - 0.6).abs() < 1e-6);
}

/// A single sharp head cannot bypass the quantile consensus.
#[test]
fn single_sharp_head_does_not_flip_under_quantile_consensus() {
    let spec = make_shortcut_scenario(0.9, 0.6, 16, 8, 1);
    let (_, trace) = decode_scenario(&spec, &visage_default(), 0);
    assert_eq!(
        trace.committed_step(1),
        Some(1),
        "S still wins: G is penalized too"
    );

    // Min aggregation trusts the lone sharp head and flips.
    let min_policy = DecodePolicy::visage(GroundingConfig {
        aggregation: AggregationMode::Min,
        ..GroundingConfig::default()
    });
    let (_, trace) = decode_scenario(&spec, &min_policy, 0);
    assert_eq!(trace.committed_step(2), Some(1));
}

#[test]
fn near_tie_resolves_by_tie_break() {
    let spec = make_shortcut_scenario(0.5, 0.5 - 1e-6, 16, 8, 8);
    let (_, trace) = decode_scenario(&spec, &DecodePolicy::baseline(), 0);
    // Strictly higher confidence wins regardless of tie rule.
    assert_eq!(trace.committed_step(1), Some(1));

    // Exact tie: scripted equal confidences, lowest position commits first.
    let mut tie = make_shortcut_scenario(0.5, 0.4, 16, 8, 0);
    for record in &mut tie.entries {
        if let ScriptEntry::Generated { confidence, .. } = &mut record.script {
            *confidence = 0.5;
        }
    }
    tie.ground_truth_entropy.clear();
    let (_, trace) = decode_scenario(&tie, &DecodePolicy::baseline(), 0);
    assert_eq!(trace.committed_step(1), Some(1));
    assert_eq!(trace.committed_step(2), Some(2));
}

/// Baseline is bit-equivalent to visage with alpha = 0: identical committed
/// sets and identical final responses at every step.
#[test]
fn baseline_embeds_as_alpha_zero() {
    for (seed, sharp_heads) in [(0u64, 8usize), (1, 4), (2, 1), (3, 0)] {
        let c_grounded = 0.45 + 0.05 * sharp_heads as f64;
        let spec = make_shortcut_scenario(0.9, c_grounded, 16, 8, sharp_heads);
        let denoiser = ScriptedDenoiser::new(spec.clone()).unwrap();
        let schedule = spec.schedule().unwrap();
        let alpha_zero = DecodePolicy::visage(GroundingConfig {
            alpha: 0.0,
            ..GroundingConfig::default()
        });
        let (response_b, trace_b) =
            decode(&denoiser, &schedule, &DecodePolicy::baseline(), seed).unwrap();
        let (response_v, trace_v) = decode(&denoiser, &schedule, &alpha_zero, seed).unwrap();
        assert_eq!(response_b, response_v);
        for (sb, sv) in trace_b.steps.iter().zip(&trace_v.steps) {
            assert_eq!(sb.committed, sv.committed);
        }
        let report = compare_policies(
            &denoiser,
            &schedule,
            &[DecodePolicy::baseline(), alpha_zero],
            seed,
        )
        .unwrap();
        assert_eq!(report.pairs[0].first_divergence_step, None);
        assert!(report.pairs[0].final_sequences_agree);
    }
}

#[test]
fn compare_policies_reports_the_divergence_step() {
    let spec = make_shortcut_scenario(0.9, 0.6, 16, 8, 8);
    let denoiser = ScriptedDenoiser::new(spec.clone()).unwrap();
    let schedule = spec.schedule().unwrap();
    let report = compare_policies(
        &denoiser,
        &schedule,
        &[DecodePolicy::baseline(), visage_default()],
        0,
    )
    .unwrap();
    assert_eq!(report.pairs[0].first_divergence_step, Some(1));
    // Same tokens end up at the same positions, only the order differs.
    assert!(report.pairs[0].final_sequences_agree);
}

/// Identical fingerprints imply bit-identical traces; different seeds on a
/// noisy scenario produce different fingerprints.
#[test]
fn decode_is_deterministic_and_fingerprinted() {
    let mut spec = make_shortcut_scenario(0.9, 0.6, 16, 8, 4);
    for record in &mut spec.entries {
        if let ScriptEntry::Generated { noise_std, .. } = &mut record.script {
            *noise_std = 0.2;
        }
    }
    let (_, a) = decode_scenario(&spec, &visage_default(), 11);
    let (_, b) = decode_scenario(&spec, &visage_default(), 11);
    assert_eq!(a.fingerprint, b.fingerprint);
    assert_eq!(
        a.to_jsonl(),
        b.to_jsonl(),
        "equal fingerprints, equal bytes"
    );
    let (_, c) = decode_scenario(&spec, &visage_default(), 12);
    assert_ne!(a.fingerprint, c.fingerprint);
}

#[test]
fn trace_replay_reconstructs_the_final_response() {
    let spec = make_trajectory_scenario(TrajectoryKind::Grounded, 6);
    let (response, trace) = decode_scenario(&spec, &visage_default(), 0);
    let vocabulary = spec.vocabulary().unwrap();
    assert_eq!(trace.replay(&vocabulary).unwrap(), response);
    // Budget conservation over the full decode.
    let committed_total: usize = trace.steps.iter().map(|s| s.committed.len()).sum();
    assert_eq!(committed_total, spec.gen_length);
}

#[test]
fn trace_jsonl_round_trips() {
    let spec = make_shortcut_scenario(0.9, 0.6, 16, 8, 8);
    let (_, trace) = decode_scenario(&spec, &visage_default(), 5);
    let parsed = DecodeTrace::from_jsonl(&trace.to_jsonl()).unwrap();
    assert_eq!(trace, parsed);
    assert_eq!(trace.to_jsonl(), parsed.to_jsonl());
}

/// Block gating: with two blocks, all block-1 positions commit before any
/// block-2 position becomes a candidate.
#[test]
fn block_schedule_gates_candidacy() {
    let steps = 4;
    let mut spec = make_trajectory_scenario(TrajectoryKind::Grounded, steps);
    spec.block_length = 2;
    spec.name = "trajectory_blocked".to_string();
    let (_, trace) = decode_scenario(&spec, &DecodePolicy::baseline(), 0);
    assert_eq!(trace.steps.len(), steps);
    for record in &trace.steps {
        let block = |p: usize| (p - 1) / 2;
        let blocks: Vec<usize> = record.candidates.iter().map(|&p| block(p)).collect();
        assert!(
            blocks.windows(2).all(|w| w[0] == w[1]),
            "one block per step"
        );
    }
    let block1_last = trace
        .committed_step(1)
        .unwrap()
        .max(trace.committed_step(2).unwrap());
    let block2_first = trace
        .committed_step(3)
        .unwrap()
        .min(trace.committed_step(4).unwrap());
    assert!(block1_last < block2_first);
}

/// Early termination: an irregular schedule that exhausts the masks before
/// its declared step count just stops.
#[test]
fn decode_terminates_early_when_no_masks_remain() {
    let spec = make_shortcut_scenario(0.9, 0.6, 16, 8, 8);
    let denoiser = ScriptedDenoiser::new(spec).unwrap();
    let schedule = UnmaskSchedule::from_budgets(2, 2, vec![2, 2]).unwrap();
    let (response, trace) = decode(&denoiser, &schedule, &DecodePolicy::baseline(), 0).unwrap();
    assert_eq!(response.len(), 2);
    assert_eq!(trace.steps.len(), 1, "all masks committed at step 1");
}

/// The grounded trajectory: the tracked position's renormalized peak rises
/// strictly and crosses the reference before the commitment step; the
/// shortcut trajectory stays pinned near 1/N, below the reference throughout.
#[test]
fn trajectory_generator_contracts_hold_under_replay() {
    for steps in [2usize, 8] {
        let spec = make_trajectory_scenario(TrajectoryKind::Grounded, steps);
        let tracked = spec.roles.tracked_position.unwrap();
        let (_, trace) = decode_scenario(&spec, &visage_default(), 0);
        assert_eq!(trace.committed_step(tracked), Some(steps));
        let peaks: Vec<f64> = trace
            .steps
            .iter()
            .filter_map(|record| {
                record
                    .scores
                    .iter()
                    .find(|s| s.position == tracked)
                    .map(|s| s.selected_peak())
            })
            .collect();
        assert_eq!(peaks.len(), steps);
        assert!(
            peaks.windows(2).all(|w| w[0] < w[1]),
            "peaks strictly increase: {peaks:?}"
        );
        assert!(
            peaks[steps - 2] > spec.reference_level,
            "crosses the reference before commitment: {peaks:?}"
        );
    }

    let spec = make_trajectory_scenario(TrajectoryKind::Shortcut, 8);
    let tracked = spec.roles.tracked_position.unwrap();
    let (_, trace) = decode_scenario(&spec, &visage_default(), 0);
    for record in &trace.steps {
        if let Some(score) = record.scores.iter().find(|s| s.position == tracked) {
            assert!(
                score.selected_peak() < spec.reference_level,
                "shortcut peak stays below the reference"
            );
            assert!((score.selected_peak() - 1.0 / 16.0).abs() < 1e-9);
        }
    }
}

/// select_topk agrees with exhaustive subset enumeration on the log scores.
#[test]
fn topk_matches_brute_force_on_random_instances() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(2024);
    for _ in 0..300 {
        let n = rng.gen_range(1..=12);
        let k = rng.gen_range(1..=n);
        let scores: Vec<visage_core::grounding::CandidateScore> = (1..=n)
            .map(|position| {
                let confidence: f64 = rng.gen_range(0.01..1.0);
                let entropy: f64 = rng.gen_range(0.0..3.0);
                fabricate_score(position, confidence, entropy, 0.5)
            })
            .collect();
        let picked = visage_core::decoder::select_topk(&scores, k, TieBreak::LowestPosition);
        let log_scores: Vec<(usize, f64)> = scores
            .iter()
            .map(|s| (s.position, s.ranking_score.ln()))
            .collect();
        let (_, best_value) = brute_force_select(&log_scores, k).unwrap();
        let picked_value: f64 = log_scores
            .iter()
            .filter(|(p, _)| picked.contains(p))
            .map(|&(_, v)| v)
            .sum();
        assert_eq!(picked_value, best_value, "objective values agree exactly");
    }
}

fn fabricate_score(
    position: usize,
    confidence: f64,
    entropy: f64,
    alpha: f64,
) -> visage_core::grounding::CandidateScore {
    visage_core::grounding::CandidateScore {
        position,
        proposal: 1,
        confidence,
        head_entropies: vec![entropy],
        head_peaks: vec![1.0],
        aggregate_entropy: entropy,
        selected_head: Some(0),
        discrepancy_estimate: alpha * entropy.ln_1p(),
        multiplier: 1.0 / (1.0 + entropy),
        ranking_score: visage_core::grounding::ranking_score(confidence, entropy, alpha),
        aggregation: AggregationMode::Quantile,
    }
}

/// Decoding a scenario whose schedule disagrees with its length fails fast.
#[test]
fn decode_rejects_schedule_length_mismatch() {
    let spec = make_shortcut_scenario(0.9, 0.6, 16, 8, 8);
    let denoiser = ScriptedDenoiser::new(spec).unwrap();
    let schedule = make_block_schedule(4, 4, 4).unwrap();
    let err = decode(&denoiser, &schedule, &DecodePolicy::baseline(), 0).unwrap_err();
    assert!(err.to_string().contains("4"), "{err}");
}

/// first_divergence is symmetric in its arguments on the flip scenario.
#[test]
fn first_divergence_matches_manual_inspection() {
    let spec = make_shortcut_scenario(0.9, 0.6, 16, 8, 8);
    let (_, a) = decode_scenario(&spec, &DecodePolicy::baseline(), 0);
    let (_, b) = decode_scenario(&spec, &visage_default(), 0);
    assert_eq!(first_divergence(&a, &b), Some(1));
    assert_eq!(first_divergence(&b, &a), Some(1));
    assert_eq!(first_divergence(&a, &a), None);
}

/// Non-mask entries never change across the states visited by a decode,
/// checked by replaying the trace prefix by prefix.
#[test]
fn committed_entries_are_immutable_across_the_trace() {
    let spec = make_trajectory_scenario(TrajectoryKind::Grounded, 6);
    let (_, trace) = decode_scenario(&spec, &visage_default(), 0);
    let vocabulary = spec.vocabulary().unwrap();
    let mut state = SequenceState::new(0, 16, spec.gen_length);
    let mut settled: BTreeMap<usize, u32> = BTreeMap::new();
    for record in &trace.steps {
        state = state.commit(&vocabulary, &record.committed).unwrap();
        for (&position, &token) in &settled {
            assert_eq!(state.token_at(position), Some(token));
        }
        settled.extend(record.committed.iter().map(|(&p, &t)| (p, t)));
    }
    assert_eq!(spec.schema_version, SCENARIO_SCHEMA_VERSION);
    let _ = AttentionMode::Diffuse;
}

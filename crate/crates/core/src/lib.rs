//! Grounding-aware parallel masked decoding.
//!
//! A model-agnostic engine for confidence-based unmasking with an optional
//! cross-attention spatial-entropy penalty: candidates are re-ranked by
//! `u = c * (1 + H)^(-alpha)` where `H` is the robust grounding entropy
//! aggregated across attention heads. The crate ships a scripted denoiser
//! for constructing shortcut-versus-grounded scenarios, a tracing decoder,
//! and executable oracles for the selection objective and its stability
//! bound.
//!
//! Independent work (Monte-Carlo trials, batch evaluation) runs on rayon
//! when the default `parallel` feature is enabled and on plain iterators
//! otherwise; results are identical either way.

pub mod decoder;
pub mod denoiser;
pub mod exec;
pub mod grounding;
pub mod sequence;
pub mod verification;

pub use decoder::{
    compare_policies, decode, select_topk, DecodePolicy, DecodeTrace, PolicyMode, TieBreak,
};
pub use denoiser::{
    make_shortcut_scenario, make_trajectory_scenario, Denoiser, DenoiserOutput, ScenarioSpec,
    ScriptedDenoiser, TrajectoryKind,
};
pub use grounding::{
    head_entropy, quantile_aggregate, ranking_score, renormalize_attention, score_candidates,
    AggregationMode, CandidateScore, GroundingConfig,
};
pub use sequence::{
    candidate_set, make_block_schedule, SequenceState, TokenId, UnmaskSchedule, Vocabulary,
};
pub use verification::{
    brute_force_select, construct_worst_case, estimator_fidelity_report, run_stability_sweep,
    run_stability_trial, StabilitySweepConfig, StabilityTrial, TrueObjectiveSpec,
};

//! The parallel unmasking loop.
//!
//! Each step: collect the block-local masked candidates, run the denoiser,
//! score every candidate, commit the top-k by ranking score, repeat until the
//! schedule is exhausted or no masks remain. The whole run is recorded in a
//! [`DecodeTrace`] whose fingerprint covers policy, schedule, scenario, and
//! seed; equal fingerprints guarantee bit-identical traces.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::denoiser::{Denoiser, OutputError, ScenarioError, ScenarioRoles};
use crate::grounding::{score_candidates, CandidateScore, GroundingConfig, GroundingError};
use crate::sequence::{
    candidate_set, CommitError, SequenceState, TokenId, UnmaskSchedule, Vocabulary,
};

pub const TRACE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Grounding(#[from] GroundingError),
    #[error(transparent)]
    Commit(#[from] CommitError),
    #[error("denoiser output violates its contract: {0}")]
    Output(#[from] OutputError),
    #[error("schedule decodes {schedule} positions but the denoiser produces {denoiser}")]
    LengthMismatch { schedule: usize, denoiser: usize },
    #[error("internal decode invariant broken: {0}")]
    Internal(String),
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace parse: {0}")]
    Parse(String),
    #[error("unsupported trace schema version {found}, expected {supported}")]
    UnsupportedSchemaVersion { found: u32, supported: u32 },
    #[error("trace is missing its {0} record")]
    MissingRecord(&'static str),
}

/// How candidates are ranked for commitment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyMode {
    /// Rank by raw confidence. Equivalent to `Visage` with alpha = 0, and
    /// implemented that way so the equivalence is structural.
    Baseline,
    /// Rank by the grounding-penalized score.
    Visage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieBreak {
    #[default]
    LowestPosition,
    HighestConfidenceThenLowestPosition,
}

/// Ranking policy: mode, grounding configuration, and tie rule.
///
/// In baseline mode `grounding.alpha` is ignored for ranking (scoring runs
/// with alpha forced to 0, so the ranking score *is* the confidence); beta,
/// delta, and the aggregation mode still shape the diagnostic entropy fields
/// recorded in traces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodePolicy {
    pub mode: PolicyMode,
    pub grounding: GroundingConfig,
    #[serde(default)]
    pub tie_break: TieBreak,
}

impl DecodePolicy {
    pub fn baseline() -> Self {
        Self {
            mode: PolicyMode::Baseline,
            grounding: GroundingConfig::default(),
            tie_break: TieBreak::default(),
        }
    }

    pub fn visage(grounding: GroundingConfig) -> Self {
        Self {
            mode: PolicyMode::Visage,
            grounding,
            tie_break: TieBreak::default(),
        }
    }

    /// The config actually used for scoring: baseline forces alpha to 0.
    pub fn effective_grounding(&self) -> GroundingConfig {
        match self.mode {
            PolicyMode::Baseline => GroundingConfig {
                alpha: 0.0,
                ..self.grounding.clone()
            },
            PolicyMode::Visage => self.grounding.clone(),
        }
    }

    /// Stable human-readable label, used in file names and metric rows.
    pub fn label(&self) -> String {
        match self.mode {
            PolicyMode::Baseline => "baseline".to_string(),
            PolicyMode::Visage => format!(
                "visage_a{}_b{}_{}",
                self.grounding.alpha,
                self.grounding.beta,
                self.grounding.aggregation.label()
            ),
        }
    }
}

/// One decode step as recorded in the trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub candidates: Vec<usize>,
    pub scores: Vec<CandidateScore>,
    pub committed: BTreeMap<usize, TokenId>,
}

/// Complete record of one decode run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeTrace {
    pub fingerprint: String,
    pub scenario_name: String,
    pub roles: ScenarioRoles,
    pub reference_level: f64,
    pub policy: DecodePolicy,
    pub schedule: UnmaskSchedule,
    pub seed: u64,
    pub steps: Vec<StepRecord>,
    pub final_response: Vec<TokenId>,
}

impl DecodeTrace {
    /// Step at which a position was committed.
    pub fn committed_step(&self, position: usize) -> Option<usize> {
        self.steps
            .iter()
            .find(|record| record.committed.contains_key(&position))
            .map(|record| record.step)
    }

    /// Re-apply the per-step commit maps from an all-mask state and return
    /// the reconstructed response; equal to `final_response` for any trace
    /// produced by [`decode`].
    pub fn replay(&self, vocabulary: &Vocabulary) -> Result<Vec<TokenId>, CommitError> {
        let mut state = SequenceState::new(0, 0, self.schedule.gen_length());
        for record in &self.steps {
            state = state.commit(vocabulary, &record.committed)?;
        }
        state.final_tokens().ok_or(CommitError::OutOfRange {
            position: 0,
            len: self.schedule.gen_length(),
        })
    }

    /// Serialize as JSON lines: one header record, one record per step, one
    /// final record. Field names are stable; see the repository README for
    /// the schema.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let header = serde_json::json!({
            "record": "header",
            "schema_version": TRACE_SCHEMA_VERSION,
            "fingerprint": self.fingerprint,
            "scenario": self.scenario_name,
            "roles": self.roles,
            "reference_level": self.reference_level,
            "policy": self.policy,
            "schedule": self.schedule,
            "seed": self.seed,
        });
        out.push_str(&header.to_string());
        out.push('\n');
        for step in &self.steps {
            let record = serde_json::json!({
                "record": "step",
                "step": step.step,
                "candidates": step.candidates,
                "scores": step.scores,
                "committed": step.committed,
            });
            out.push_str(&record.to_string());
            out.push('\n');
        }
        let footer = serde_json::json!({
            "record": "final",
            "response": self.final_response,
        });
        out.push_str(&footer.to_string());
        out.push('\n');
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, TraceError> {
        #[derive(Deserialize)]
        struct HeaderRecord {
            schema_version: u32,
            fingerprint: String,
            scenario: String,
            roles: ScenarioRoles,
            reference_level: f64,
            policy: DecodePolicy,
            schedule: UnmaskSchedule,
            seed: u64,
        }
        #[derive(Deserialize)]
        struct FinalRecord {
            response: Vec<TokenId>,
        }

        let parse = |e: &dyn std::fmt::Display| TraceError::Parse(e.to_string());
        let mut header: Option<HeaderRecord> = None;
        let mut steps = Vec::new();
        let mut final_response = None;
        for line in text.lines().filter(|line| !line.trim().is_empty()) {
            let value: serde_json::Value = serde_json::from_str(line).map_err(|e| parse(&e))?;
            match value.get("record").and_then(serde_json::Value::as_str) {
                Some("header") => {
                    let record: HeaderRecord =
                        serde_json::from_value(value).map_err(|e| parse(&e))?;
                    if record.schema_version != TRACE_SCHEMA_VERSION {
                        return Err(TraceError::UnsupportedSchemaVersion {
                            found: record.schema_version,
                            supported: TRACE_SCHEMA_VERSION,
                        });
                    }
                    header = Some(record);
                }
                Some("step") => {
                    steps.push(serde_json::from_value(value).map_err(|e| parse(&e))?);
                }
                Some("final") => {
                    let record: FinalRecord =
                        serde_json::from_value(value).map_err(|e| parse(&e))?;
                    final_response = Some(record.response);
                }
                other => {
                    return Err(TraceError::Parse(format!("unknown record type {other:?}")));
                }
            }
        }
        let header = header.ok_or(TraceError::MissingRecord("header"))?;
        Ok(DecodeTrace {
            fingerprint: header.fingerprint,
            scenario_name: header.scenario,
            roles: header.roles,
            reference_level: header.reference_level,
            policy: header.policy,
            schedule: header.schedule,
            seed: header.seed,
            steps,
            final_response: final_response.ok_or(TraceError::MissingRecord("final"))?,
        })
    }
}

/// Positions of the `min(k, |scores|)` candidates with the largest ranking
/// scores. Comparison is a total order on the raw score values with the tie
/// rule (and ultimately the position) as secondary keys, so the result does
/// not depend on input order or epsilon fuzz. Maximizing the score sum and
/// maximizing the log-score sum select the same set: the objective is
/// separable, so the exact maximizer is the top-k.
pub fn select_topk(scores: &[CandidateScore], k: usize, tie_break: TieBreak) -> BTreeSet<usize> {
    let mut order: Vec<&CandidateScore> = scores.iter().collect();
    order.sort_by(|a, b| {
        b.ranking_score
            .total_cmp(&a.ranking_score)
            .then_with(|| match tie_break {
                TieBreak::LowestPosition => a.position.cmp(&b.position),
                TieBreak::HighestConfidenceThenLowestPosition => b
                    .confidence
                    .total_cmp(&a.confidence)
                    .then(a.position.cmp(&b.position)),
            })
    });
    order
        .into_iter()
        .take(k.min(scores.len()))
        .map(|s| s.position)
        .collect()
}

/// Run the full unmasking loop and return the final response with its trace.
///
/// Deterministic given (denoiser, schedule, policy, seed): two runs with an
/// equal fingerprint produce bit-identical traces.
pub fn decode(
    denoiser: &dyn Denoiser,
    schedule: &UnmaskSchedule,
    policy: &DecodePolicy,
    seed: u64,
) -> Result<(Vec<TokenId>, DecodeTrace), DecodeError> {
    policy.grounding.validate()?;
    let shape = denoiser.shape();
    if shape.gen_length != schedule.gen_length() {
        return Err(DecodeError::LengthMismatch {
            schedule: schedule.gen_length(),
            denoiser: shape.gen_length,
        });
    }
    let vocabulary = denoiser.vocabulary().clone();
    let descriptor = denoiser.descriptor();
    let scoring = policy.effective_grounding();

    let mut state = SequenceState::new(shape.prompt_len, shape.num_image_tokens, shape.gen_length);
    let mut steps = Vec::with_capacity(schedule.steps());
    for step in 1..=schedule.steps() {
        let candidates = candidate_set(&state, schedule);
        if candidates.is_empty() {
            break;
        }
        let output = denoiser.evaluate(&state, &candidates, seed)?;
        if output.evals.len() != candidates.len()
            || !output.evals.keys().all(|p| candidates.contains(p))
        {
            return Err(DecodeError::Internal(format!(
                "denoiser returned {} evals for {} candidates at step {step}",
                output.evals.len(),
                candidates.len()
            )));
        }
        output.validate(vocabulary.size(), shape.num_heads, shape.num_image_tokens)?;
        let scores = score_candidates(&output, &scoring)?;
        let budget = schedule
            .budget(step)
            .ok_or_else(|| DecodeError::Internal(format!("no budget for step {step}")))?;
        let selected = select_topk(&scores, budget, policy.tie_break);
        if selected.len() != budget.min(candidates.len()) {
            return Err(DecodeError::Internal(format!(
                "step {step}: selected {} positions from {} candidates under budget {budget}",
                selected.len(),
                candidates.len()
            )));
        }
        let committed: BTreeMap<usize, TokenId> = scores
            .iter()
            .filter(|s| selected.contains(&s.position))
            .map(|s| (s.position, s.proposal))
            .collect();
        state = state.commit(&vocabulary, &committed)?;
        steps.push(StepRecord {
            step,
            candidates: candidates.into_iter().collect(),
            scores,
            committed,
        });
    }
    let final_response = state.final_tokens().ok_or_else(|| {
        DecodeError::Internal(format!(
            "{} masked positions remain after {} steps",
            state.mask_count(),
            schedule.steps()
        ))
    })?;
    let trace = DecodeTrace {
        fingerprint: fingerprint(policy, schedule, &descriptor.payload, seed),
        scenario_name: descriptor.name,
        roles: descriptor.roles,
        reference_level: descriptor.reference_level,
        policy: policy.clone(),
        schedule: schedule.clone(),
        seed,
        steps,
        final_response: final_response.clone(),
    };
    Ok((final_response, trace))
}

/// SHA-256 over the canonical JSON of (policy, schedule, scenario, seed).
pub fn fingerprint(
    policy: &DecodePolicy,
    schedule: &UnmaskSchedule,
    scenario_payload: &serde_json::Value,
    seed: u64,
) -> String {
    let doc = serde_json::json!({
        "policy": policy,
        "schedule": schedule,
        "scenario": scenario_payload,
        "seed": seed,
    });
    let digest = Sha256::digest(doc.to_string().as_bytes());
    let mut out = String::with_capacity(64);
    for byte in digest {
        out.push_str(&format!("{byte:02x}"));
    }
    out
}

/// Divergence between two policies decoded on identical inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyComparison {
    pub policy_a: String,
    pub policy_b: String,
    /// First step whose committed map differs; `None` when the runs agree
    /// step for step.
    pub first_divergence_step: Option<usize>,
    pub final_sequences_agree: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub fingerprints: Vec<String>,
    pub pairs: Vec<PolicyComparison>,
}

pub fn first_divergence(a: &DecodeTrace, b: &DecodeTrace) -> Option<usize> {
    let steps = a.steps.len().max(b.steps.len());
    for idx in 0..steps {
        match (a.steps.get(idx), b.steps.get(idx)) {
            (Some(sa), Some(sb)) if sa.committed == sb.committed => continue,
            (Some(sa), _) => return Some(sa.step),
            (None, Some(sb)) => return Some(sb.step),
            (None, None) => unreachable!(),
        }
    }
    None
}

/// Decode once per policy on identical inputs and report pairwise
/// commitment divergence and final-sequence agreement.
pub fn compare_policies(
    denoiser: &dyn Denoiser,
    schedule: &UnmaskSchedule,
    policies: &[DecodePolicy],
    seed: u64,
) -> Result<ComparisonReport, DecodeError> {
    assert!(policies.len() >= 2, "need at least two policies to compare");
    let mut traces = Vec::with_capacity(policies.len());
    for policy in policies {
        let (_, trace) = decode(denoiser, schedule, policy, seed)?;
        traces.push(trace);
    }
    let mut pairs = Vec::new();
    for i in 0..traces.len() {
        for j in i + 1..traces.len() {
            pairs.push(PolicyComparison {
                policy_a: policies[i].label(),
                policy_b: policies[j].label(),
                first_divergence_step: first_divergence(&traces[i], &traces[j]),
                final_sequences_agree: traces[i].final_response == traces[j].final_response,
            });
        }
    }
    Ok(ComparisonReport {
        fingerprints: traces.into_iter().map(|t| t.fingerprint).collect(),
        pairs,
    })
}

//! The model boundary: a contract that maps a sequence state to per-candidate
//! token distributions and raw cross-attention blocks, plus a scripted
//! implementation driven by scenario files.
//!
//! Scenarios make shortcut-versus-grounded situations constructible without
//! any neural network: each reachable `(step, position)` pair is covered by
//! exactly one script entry, either an explicit distribution/attention pair
//! or generator parameters (proposal, confidence, attention shape, noise
//! seed). Attention rows are *raw* nonnegative weights; renormalization over
//! image tokens happens downstream in the grounding pipeline.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grounding::{head_entropy, quantile_aggregate, renormalize_attention, GroundingConfig};
use crate::sequence::{
    make_block_schedule, ScheduleError, SequenceState, TokenId, UnmaskSchedule, Vocabulary,
    VocabularyError,
};

pub const SCENARIO_SCHEMA_VERSION: u32 = 1;

/// Default sharpness used by the scenario generators for peaked rows; at
/// N = 16 this leaves ~2e-21 mass off the target column.
pub const GENERATOR_SHARPNESS: f64 = 50.0;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("unsupported scenario schema version {found}, expected {supported}")]
    UnsupportedSchemaVersion { found: u32, supported: u32 },
    #[error("scenario has two script entries for step {step}, position {position}")]
    DuplicateEntry { step: usize, position: usize },
    #[error("no script entry for step {step}, position {position}")]
    MissingEntry { step: usize, position: usize },
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("scenario schedule: {0}")]
    Schedule(#[from] ScheduleError),
    #[error("scenario vocabulary: {0}")]
    Vocabulary(#[from] VocabularyError),
    #[error("scenario parse: {0}")]
    Parse(String),
    #[error("scenario io: {0}")]
    Io(String),
}

#[derive(Debug, Error, PartialEq)]
pub enum OutputError {
    #[error("candidate {position}: distribution has {got} entries, vocabulary has {expected}")]
    DistributionLength {
        position: usize,
        got: usize,
        expected: usize,
    },
    #[error("candidate {position}: probability for token {token} is {value}")]
    NegativeProbability {
        position: usize,
        token: usize,
        value: f64,
    },
    #[error("candidate {position}: distribution sums to {sum}, not 1 within 1e-9")]
    NotNormalized { position: usize, sum: f64 },
    #[error("candidate {position}: attention block is {got_heads}x{got_cols}, expected {heads}x{image_tokens}")]
    AttentionShape {
        position: usize,
        got_heads: usize,
        got_cols: usize,
        heads: usize,
        image_tokens: usize,
    },
    #[error("candidate {position}: attention weight at head {head}, column {column} is {value}")]
    NegativeAttention {
        position: usize,
        head: usize,
        column: usize,
        value: f64,
    },
}

/// Static dimensions of the sequences a denoiser evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceShape {
    pub prompt_len: usize,
    pub gen_length: usize,
    pub num_image_tokens: usize,
    pub num_heads: usize,
}

/// One candidate's model output: a categorical distribution over the
/// vocabulary and the raw heads-by-image-tokens cross-attention block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateEval {
    pub distribution: Vec<f64>,
    pub attention: Vec<Vec<f64>>,
}

/// Model outputs keyed by candidate position.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DenoiserOutput {
    pub evals: BTreeMap<usize, CandidateEval>,
}

impl DenoiserOutput {
    /// Check the output contract: distributions are nonnegative and sum to 1
    /// within 1e-9; attention blocks have the declared shape and nonnegative
    /// entries (rows need not sum to 1, they are pre-renormalization weights).
    pub fn validate(
        &self,
        vocab_size: usize,
        heads: usize,
        image_tokens: usize,
    ) -> Result<(), OutputError> {
        for (&position, eval) in &self.evals {
            if eval.distribution.len() != vocab_size {
                return Err(OutputError::DistributionLength {
                    position,
                    got: eval.distribution.len(),
                    expected: vocab_size,
                });
            }
            let mut sum = 0.0;
            for (token, &p) in eval.distribution.iter().enumerate() {
                if p.is_nan() || p < 0.0 {
                    return Err(OutputError::NegativeProbability {
                        position,
                        token,
                        value: p,
                    });
                }
                sum += p;
            }
            if (sum - 1.0).abs() > 1e-9 {
                return Err(OutputError::NotNormalized { position, sum });
            }
            if eval.attention.len() != heads
                || eval.attention.iter().any(|row| row.len() != image_tokens)
            {
                let got_cols = eval.attention.first().map_or(0, Vec::len);
                return Err(OutputError::AttentionShape {
                    position,
                    got_heads: eval.attention.len(),
                    got_cols,
                    heads,
                    image_tokens,
                });
            }
            for (head, row) in eval.attention.iter().enumerate() {
                for (column, &w) in row.iter().enumerate() {
                    if w.is_nan() || w < 0.0 {
                        return Err(OutputError::NegativeAttention {
                            position,
                            head,
                            column,
                            value: w,
                        });
                    }
                }
            }
        }
        Ok(())
    }
}

/// Identity and metadata a denoiser contributes to trace headers and config
/// fingerprints.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenoiserDescriptor {
    pub name: String,
    pub roles: ScenarioRoles,
    pub reference_level: f64,
    pub payload: serde_json::Value,
}

/// The model contract. Implementations must be pure: identical
/// `(state, seed)` inputs produce bit-identical outputs, so candidates may be
/// evaluated concurrently.
pub trait Denoiser: Sync {
    fn shape(&self) -> SequenceShape;
    fn vocabulary(&self) -> &Vocabulary;
    fn descriptor(&self) -> DenoiserDescriptor;
    fn evaluate(
        &self,
        state: &SequenceState,
        candidates: &BTreeSet<usize>,
        seed: u64,
    ) -> Result<DenoiserOutput, ScenarioError>;
}

// ---------------------------------------------------------------------------
// Scenario specification
// ---------------------------------------------------------------------------

/// Shape of a generated raw attention row, expressed in logit space; the row
/// is `softmax(logits + noise)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum AttentionMode {
    /// All heads concentrate on `target`: logits are `sharpness` on the
    /// target column and 0 elsewhere. Sharpness sweeps uniform (0) to a
    /// numerical delta (large).
    Peaked { target: usize, sharpness: f64 },
    /// All heads uniform over image tokens (zero logits).
    Diffuse,
    /// The first `sharp_heads` heads are peaked on `target`, the rest
    /// diffuse.
    Mixed {
        sharp_heads: usize,
        target: usize,
        sharpness: f64,
    },
}

/// What the model "says" for one `(step, position)` pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScriptEntry {
    /// Verbatim distribution and raw attention block.
    Explicit {
        distribution: Vec<f64>,
        attention: Vec<Vec<f64>>,
    },
    /// Generated: `confidence` mass on `proposal`, the remainder uniform over
    /// the rest of the vocabulary; attention rows from `attention` with
    /// Gaussian logit noise seeded by `noise_seed`.
    Generated {
        proposal: TokenId,
        confidence: f64,
        attention: AttentionMode,
        #[serde(default)]
        noise_seed: u64,
        #[serde(default)]
        noise_std: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptRecord {
    pub step: usize,
    pub position: usize,
    pub script: ScriptEntry,
}

/// Designated positions used by metrics and trajectory export. All optional;
/// a scenario without roles still decodes, it just contributes nothing to
/// shortcut-rate metrics.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioRoles {
    #[serde(default)]
    pub shortcut_position: Option<usize>,
    #[serde(default)]
    pub grounded_position: Option<usize>,
    #[serde(default)]
    pub tracked_position: Option<usize>,
}

fn default_reference_level() -> f64 {
    0.5
}

/// A complete scripted scenario: dimensions, schedule triple, roles, and one
/// script entry per reachable `(step, position)`.
///
/// `reference_level` is a synthetic stand-in for a language-prior curve and
/// is compared against the peak of the renormalized attention row of the
/// selected head; it is a simulator convention, not a model quantity, and is
/// flagged as such in exports. `ground_truth_entropy` records, per position,
/// the aggregate grounding entropy the generator built in (computed under the
/// default grounding configuration with zero noise), giving fidelity reports
/// a synthetic ground truth to compare estimators against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub schema_version: u32,
    pub name: String,
    pub vocab_size: usize,
    pub mask_id: TokenId,
    #[serde(default)]
    pub prompt_len: usize,
    pub gen_length: usize,
    pub steps: usize,
    pub block_length: usize,
    pub num_image_tokens: usize,
    pub num_heads: usize,
    #[serde(default)]
    pub roles: ScenarioRoles,
    #[serde(default = "default_reference_level")]
    pub reference_level: f64,
    #[serde(default)]
    pub ground_truth_entropy: BTreeMap<usize, f64>,
    pub entries: Vec<ScriptRecord>,
}

impl ScenarioSpec {
    pub fn schedule(&self) -> Result<UnmaskSchedule, ScheduleError> {
        make_block_schedule(self.gen_length, self.steps, self.block_length)
    }

    pub fn vocabulary(&self) -> Result<Vocabulary, VocabularyError> {
        Vocabulary::new(self.vocab_size, self.mask_id)
    }

    pub fn shape(&self) -> SequenceShape {
        SequenceShape {
            prompt_len: self.prompt_len,
            gen_length: self.gen_length,
            num_image_tokens: self.num_image_tokens,
            num_heads: self.num_heads,
        }
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.schema_version != SCENARIO_SCHEMA_VERSION {
            return Err(ScenarioError::UnsupportedSchemaVersion {
                found: self.schema_version,
                supported: SCENARIO_SCHEMA_VERSION,
            });
        }
        self.vocabulary()?;
        self.schedule()?;
        if self.num_image_tokens == 0 || self.num_heads == 0 {
            return Err(ScenarioError::Invalid(format!(
                "image tokens ({}) and heads ({}) must be positive",
                self.num_image_tokens, self.num_heads
            )));
        }
        if !(self.reference_level > 0.0 && self.reference_level < 1.0) {
            return Err(ScenarioError::Invalid(format!(
                "reference level {} outside (0, 1)",
                self.reference_level
            )));
        }
        let mut seen = BTreeSet::new();
        for record in &self.entries {
            if record.step == 0
                || record.step > self.steps
                || record.position == 0
                || record.position > self.gen_length
            {
                return Err(ScenarioError::Invalid(format!(
                    "script entry (step {}, position {}) outside steps 1..={} x positions 1..={}",
                    record.step, record.position, self.steps, self.gen_length
                )));
            }
            if !seen.insert((record.step, record.position)) {
                return Err(ScenarioError::DuplicateEntry {
                    step: record.step,
                    position: record.position,
                });
            }
            self.validate_entry(record)?;
        }
        for (&position, &entropy) in &self.ground_truth_entropy {
            if position == 0 || position > self.gen_length {
                return Err(ScenarioError::Invalid(format!(
                    "ground-truth entropy for position {position} outside 1..={}",
                    self.gen_length
                )));
            }
            if !entropy.is_finite() || entropy < 0.0 {
                return Err(ScenarioError::Invalid(format!(
                    "ground-truth entropy {entropy} at position {position} must be finite and nonnegative"
                )));
            }
        }
        for (label, role) in [
            ("shortcut", self.roles.shortcut_position),
            ("grounded", self.roles.grounded_position),
            ("tracked", self.roles.tracked_position),
        ] {
            if let Some(position) = role {
                if position == 0 || position > self.gen_length {
                    return Err(ScenarioError::Invalid(format!(
                        "{label} role position {position} outside 1..={}",
                        self.gen_length
                    )));
                }
            }
        }
        Ok(())
    }

    fn validate_entry(&self, record: &ScriptRecord) -> Result<(), ScenarioError> {
        let at = |msg: String| {
            ScenarioError::Invalid(format!(
                "entry (step {}, position {}): {msg}",
                record.step, record.position
            ))
        };
        match &record.script {
            ScriptEntry::Explicit {
                distribution,
                attention,
            } => {
                if distribution.len() != self.vocab_size {
                    return Err(at(format!(
                        "distribution has {} entries, vocabulary has {}",
                        distribution.len(),
                        self.vocab_size
                    )));
                }
                if distribution.iter().any(|p| !p.is_finite() || *p < 0.0) {
                    return Err(at("distribution has a negative or non-finite entry".into()));
                }
                let sum: f64 = distribution.iter().sum();
                if (sum - 1.0).abs() > 1e-9 {
                    return Err(at(format!("distribution sums to {sum}")));
                }
                if attention.len() != self.num_heads
                    || attention
                        .iter()
                        .any(|row| row.len() != self.num_image_tokens)
                {
                    return Err(at(format!(
                        "attention block is not {}x{}",
                        self.num_heads, self.num_image_tokens
                    )));
                }
                if attention
                    .iter()
                    .flatten()
                    .any(|w| !w.is_finite() || *w < 0.0)
                {
                    return Err(at("attention has a negative or non-finite weight".into()));
                }
            }
            ScriptEntry::Generated {
                proposal,
                confidence,
                attention,
                noise_std,
                ..
            } => {
                if (*proposal as usize) >= self.vocab_size {
                    return Err(at(format!(
                        "proposal {proposal} outside vocabulary of size {}",
                        self.vocab_size
                    )));
                }
                if !(*confidence > 0.0 && *confidence < 1.0) {
                    return Err(at(format!("confidence {confidence} outside (0, 1)")));
                }
                // The remainder is spread uniformly; the proposal must stay
                // the unique argmax.
                if *confidence <= 1.0 / self.vocab_size as f64 {
                    return Err(at(format!(
                        "confidence {confidence} not above 1/|V| = {}; proposal would not be the argmax",
                        1.0 / self.vocab_size as f64
                    )));
                }
                if !noise_std.is_finite() || *noise_std < 0.0 {
                    return Err(at(format!("noise std {noise_std} must be finite and >= 0")));
                }
                match attention {
                    AttentionMode::Diffuse => {}
                    AttentionMode::Peaked { target, sharpness } => {
                        if *target >= self.num_image_tokens {
                            return Err(at(format!(
                                "peak target {target} outside 0..{}",
                                self.num_image_tokens
                            )));
                        }
                        if !sharpness.is_finite() || *sharpness <= 0.0 {
                            return Err(at(format!(
                                "sharpness {sharpness} must be finite and > 0"
                            )));
                        }
                    }
                    AttentionMode::Mixed {
                        sharp_heads,
                        target,
                        sharpness,
                    } => {
                        if *sharp_heads > self.num_heads {
                            return Err(at(format!(
                                "sharp head count {sharp_heads} exceeds {} heads",
                                self.num_heads
                            )));
                        }
                        if *target >= self.num_image_tokens {
                            return Err(at(format!(
                                "peak target {target} outside 0..{}",
                                self.num_image_tokens
                            )));
                        }
                        if !sharpness.is_finite() || *sharpness <= 0.0 {
                            return Err(at(format!(
                                "sharpness {sharpness} must be finite and > 0"
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario specs always serialize")
    }

    /// Parse and validate a scenario document, rejecting unknown schema
    /// versions before attempting a full decode.
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        #[derive(Deserialize)]
        struct Probe {
            schema_version: u32,
        }
        let probe: Probe =
            serde_json::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        if probe.schema_version != SCENARIO_SCHEMA_VERSION {
            return Err(ScenarioError::UnsupportedSchemaVersion {
                found: probe.schema_version,
                supported: SCENARIO_SCHEMA_VERSION,
            });
        }
        let spec: ScenarioSpec =
            serde_json::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn save(&self, path: &Path) -> Result<(), ScenarioError> {
        std::fs::write(path, self.to_json())
            .map_err(|e| ScenarioError::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ScenarioError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

// ---------------------------------------------------------------------------
// Scripted denoiser
// ---------------------------------------------------------------------------

/// Deterministic denoiser backed by a [`ScenarioSpec`].
pub struct ScriptedDenoiser {
    spec: ScenarioSpec,
    vocabulary: Vocabulary,
    index: BTreeMap<(usize, usize), usize>,
}

impl fmt::Debug for ScriptedDenoiser {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ScriptedDenoiser")
            .field("scenario", &self.spec.name)
            .finish()
    }
}

impl ScriptedDenoiser {
    pub fn new(spec: ScenarioSpec) -> Result<Self, ScenarioError> {
        spec.validate()?;
        let vocabulary = spec.vocabulary()?;
        let index = spec
            .entries
            .iter()
            .enumerate()
            .map(|(i, record)| ((record.step, record.position), i))
            .collect();
        Ok(Self {
            spec,
            vocabulary,
            index,
        })
    }

    pub fn spec(&self) -> &ScenarioSpec {
        &self.spec
    }

    fn eval_entry(
        &self,
        step: usize,
        position: usize,
        seed: u64,
    ) -> Result<CandidateEval, ScenarioError> {
        let idx = self
            .index
            .get(&(step, position))
            .copied()
            .ok_or(ScenarioError::MissingEntry { step, position })?;
        match &self.spec.entries[idx].script {
            ScriptEntry::Explicit {
                distribution,
                attention,
            } => Ok(CandidateEval {
                distribution: distribution.clone(),
                attention: attention.clone(),
            }),
            ScriptEntry::Generated {
                proposal,
                confidence,
                attention,
                noise_seed,
                noise_std,
            } => Ok(CandidateEval {
                distribution: spread_distribution(self.spec.vocab_size, *proposal, *confidence),
                attention: generated_attention(
                    attention,
                    self.spec.num_heads,
                    self.spec.num_image_tokens,
                    *noise_std,
                    *noise_seed,
                    seed,
                    step,
                    position,
                ),
            }),
        }
    }
}

impl Denoiser for ScriptedDenoiser {
    fn shape(&self) -> SequenceShape {
        self.spec.shape()
    }

    fn vocabulary(&self) -> &Vocabulary {
        &self.vocabulary
    }

    fn descriptor(&self) -> DenoiserDescriptor {
        DenoiserDescriptor {
            name: self.spec.name.clone(),
            roles: self.spec.roles.clone(),
            reference_level: self.spec.reference_level,
            payload: serde_json::to_value(&self.spec).expect("scenario specs always serialize"),
        }
    }

    fn evaluate(
        &self,
        state: &SequenceState,
        candidates: &BTreeSet<usize>,
        seed: u64,
    ) -> Result<DenoiserOutput, ScenarioError> {
        debug_assert!(
            candidates.iter().all(|&p| state.is_masked(p)),
            "candidates must be masked positions"
        );
        let step = state.step();
        let mut evals = BTreeMap::new();
        for &position in candidates {
            evals.insert(position, self.eval_entry(step, position, seed)?);
        }
        Ok(DenoiserOutput { evals })
    }
}

/// `confidence` mass on the proposal, remainder uniform over the rest.
fn spread_distribution(vocab_size: usize, proposal: TokenId, confidence: f64) -> Vec<f64> {
    let rest = (1.0 - confidence) / (vocab_size - 1) as f64;
    let mut distribution = vec![rest; vocab_size];
    distribution[proposal as usize] = confidence;
    distribution
}

fn one_peak(image_tokens: usize, target: usize, sharpness: f64) -> Vec<f64> {
    let mut logits = vec![0.0; image_tokens];
    logits[target] = sharpness;
    logits
}

fn base_logits(mode: &AttentionMode, head: usize, image_tokens: usize) -> Vec<f64> {
    match mode {
        AttentionMode::Diffuse => vec![0.0; image_tokens],
        AttentionMode::Peaked { target, sharpness } => one_peak(image_tokens, *target, *sharpness),
        AttentionMode::Mixed {
            sharp_heads,
            target,
            sharpness,
        } => {
            if head < *sharp_heads {
                one_peak(image_tokens, *target, *sharpness)
            } else {
                vec![0.0; image_tokens]
            }
        }
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// splitmix64 finalizer; used to derive independent per-row noise streams.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn derive_seed(
    noise_seed: u64,
    decode_seed: u64,
    step: usize,
    position: usize,
    head: usize,
) -> u64 {
    let mut s = mix(noise_seed);
    s = mix(s ^ decode_seed);
    s = mix(s ^ (step as u64));
    s = mix(s ^ ((position as u64) << 20));
    mix(s ^ ((head as u64) << 40))
}

#[allow(clippy::too_many_arguments)]
fn generated_attention(
    mode: &AttentionMode,
    heads: usize,
    image_tokens: usize,
    noise_std: f64,
    noise_seed: u64,
    decode_seed: u64,
    step: usize,
    position: usize,
) -> Vec<Vec<f64>> {
    (0..heads)
        .map(|head| {
            let mut logits = base_logits(mode, head, image_tokens);
            if noise_std > 0.0 {
                let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(
                    noise_seed,
                    decode_seed,
                    step,
                    position,
                    head,
                ));
                let normal = Normal::new(0.0, noise_std).expect("validated noise std");
                for logit in logits.iter_mut() {
                    *logit += normal.sample(&mut rng);
                }
            }
            softmax(&logits)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Scenario generators
// ---------------------------------------------------------------------------

/// Aggregate grounding entropy a noiseless generated entry will exhibit under
/// the default grounding configuration; recorded as synthetic ground truth.
fn builtin_entropy(mode: &AttentionMode, heads: usize, image_tokens: usize) -> f64 {
    let config = GroundingConfig::default();
    let entropies: Vec<f64> = (0..heads)
        .map(|head| {
            let row = softmax(&base_logits(mode, head, image_tokens));
            let renormalized =
                renormalize_attention(&row, config.delta).expect("generated rows are nonnegative");
            head_entropy(&renormalized)
        })
        .collect();
    quantile_aggregate(&entropies, config.beta).expect("at least one head")
}

/// Two-candidate scenario: position 1 proposes with high confidence and
/// diffuse attention everywhere (the language shortcut S), position 2
/// proposes with lower confidence and `sharp_heads` concentrated heads (the
/// grounded candidate G). Single block of length 2 decoded in 2 steps.
pub fn make_shortcut_scenario(
    c_shortcut: f64,
    c_grounded: f64,
    image_tokens: usize,
    heads: usize,
    sharp_heads: usize,
) -> ScenarioSpec {
    assert!(
        0.0 < c_grounded && c_grounded < c_shortcut && c_shortcut < 1.0,
        "need 0 < c_grounded < c_shortcut < 1"
    );
    assert!(sharp_heads <= heads, "sharp head count exceeds head count");
    let vocab_size = 8;
    assert!(
        c_grounded > 1.0 / vocab_size as f64,
        "confidence too small for a unique argmax"
    );
    let shortcut_mode = AttentionMode::Diffuse;
    let grounded_mode = AttentionMode::Mixed {
        sharp_heads,
        target: image_tokens / 2,
        sharpness: GENERATOR_SHARPNESS,
    };
    let mut entries = Vec::new();
    for step in 1..=2 {
        entries.push(ScriptRecord {
            step,
            position: 1,
            script: ScriptEntry::Generated {
                proposal: 1,
                confidence: c_shortcut,
                attention: shortcut_mode.clone(),
                noise_seed: 0,
                noise_std: 0.0,
            },
        });
        entries.push(ScriptRecord {
            step,
            position: 2,
            script: ScriptEntry::Generated {
                proposal: 2,
                confidence: c_grounded,
                attention: grounded_mode.clone(),
                noise_seed: 0,
                noise_std: 0.0,
            },
        });
    }
    let ground_truth_entropy = BTreeMap::from([
        (1, builtin_entropy(&shortcut_mode, heads, image_tokens)),
        (2, builtin_entropy(&grounded_mode, heads, image_tokens)),
    ]);
    ScenarioSpec {
        schema_version: SCENARIO_SCHEMA_VERSION,
        name: format!(
            "shortcut_cs{c_shortcut}_cg{c_grounded}_n{image_tokens}_m{heads}_sh{sharp_heads}"
        ),
        vocab_size,
        mask_id: vocab_size as TokenId,
        prompt_len: 0,
        gen_length: 2,
        steps: 2,
        block_length: 2,
        num_image_tokens: image_tokens,
        num_heads: heads,
        roles: ScenarioRoles {
            shortcut_position: Some(1),
            grounded_position: Some(2),
            tracked_position: None,
        },
        reference_level: 0.5,
        ground_truth_entropy,
        entries,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryKind {
    Grounded,
    Shortcut,
}

/// Scenario tracking one position across all steps until it commits last.
///
/// Filler positions carry confidence 0.95 with fully peaked attention, so
/// both ranking policies commit them in position order and the tracked
/// position lands at the final step. For the grounded kind the tracked row
/// sharpens step by step (its renormalized peak rises above the reference
/// before commitment); for the shortcut kind it stays diffuse (peak pinned
/// near 1/N, below the reference throughout).
pub fn make_trajectory_scenario(kind: TrajectoryKind, steps: usize) -> ScenarioSpec {
    assert!(steps >= 2, "trajectory scenarios need at least 2 steps");
    let vocab_size = 8;
    let image_tokens = 16;
    let heads = 8;
    let gen_length = steps;
    let tracked = gen_length;
    let mut entries = Vec::new();
    for step in 1..=steps {
        for position in 1..gen_length {
            entries.push(ScriptRecord {
                step,
                position,
                script: ScriptEntry::Generated {
                    proposal: (position % (vocab_size - 1) + 1) as TokenId,
                    confidence: 0.95,
                    attention: AttentionMode::Peaked {
                        target: (position - 1) % image_tokens,
                        sharpness: GENERATOR_SHARPNESS,
                    },
                    noise_seed: 0,
                    noise_std: 0.0,
                },
            });
        }
        let script = match kind {
            TrajectoryKind::Grounded => ScriptEntry::Generated {
                proposal: 3,
                // Confidence climbs toward 0.6 as visual support concentrates.
                confidence: 0.3 + 0.3 * (step - 1) as f64 / (steps - 1) as f64,
                attention: AttentionMode::Peaked {
                    target: image_tokens / 2,
                    sharpness: 8.0 * step as f64 / (steps - 1) as f64,
                },
                noise_seed: 0,
                noise_std: 0.0,
            },
            TrajectoryKind::Shortcut => ScriptEntry::Generated {
                proposal: 3,
                confidence: 0.9,
                attention: AttentionMode::Diffuse,
                noise_seed: 0,
                noise_std: 0.0,
            },
        };
        entries.push(ScriptRecord {
            step,
            position: tracked,
            script,
        });
    }
    let kind_label = match kind {
        TrajectoryKind::Grounded => "grounded",
        TrajectoryKind::Shortcut => "shortcut",
    };
    ScenarioSpec {
        schema_version: SCENARIO_SCHEMA_VERSION,
        name: format!("trajectory_{kind_label}_t{steps}"),
        vocab_size,
        mask_id: vocab_size as TokenId,
        prompt_len: 0,
        gen_length,
        steps,
        block_length: gen_length,
        num_image_tokens: image_tokens,
        num_heads: heads,
        roles: ScenarioRoles {
            shortcut_position: match kind {
                TrajectoryKind::Shortcut => Some(tracked),
                TrajectoryKind::Grounded => None,
            },
            grounded_position: match kind {
                TrajectoryKind::Grounded => Some(tracked),
                TrajectoryKind::Shortcut => None,
            },
            tracked_position: Some(tracked),
        },
        reference_level: 0.5,
        ground_truth_entropy: BTreeMap::new(),
        entries,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eval_single(spec: &ScenarioSpec, step: usize, position: usize, seed: u64) -> CandidateEval {
        let denoiser = ScriptedDenoiser::new(spec.clone()).unwrap();
        let state = SequenceState::from_response(
            0,
            spec.num_image_tokens,
            vec![None; spec.gen_length],
            step,
        );
        let out = denoiser
            .evaluate(&state, &BTreeSet::from([position]), seed)
            .unwrap();
        out.evals[&position].clone()
    }

    #[test]
    fn explicit_one_hot_distribution_passes_through() {
        let mut spec = make_shortcut_scenario(0.9, 0.6, 4, 2, 2);
        let mut distribution = vec![0.0; spec.vocab_size];
        distribution[4] = 1.0;
        spec.entries[0] = ScriptRecord {
            step: 1,
            position: 1,
            script: ScriptEntry::Explicit {
                distribution: distribution.clone(),
                attention: vec![vec![0.25; 4]; 2],
            },
        };
        let eval = eval_single(&spec, 1, 1, 0);
        assert_eq!(eval.distribution, distribution);
    }

    #[test]
    fn peaked_high_sharpness_concentrates_all_mass() {
        let row = softmax(&one_peak(8, 3, 1e6));
        assert_eq!(row[3], 1.0);
        assert!(row.iter().enumerate().all(|(j, &w)| j == 3 || w == 0.0));
    }

    #[test]
    fn diffuse_rows_are_uniform_before_noise() {
        let rows = generated_attention(&AttentionMode::Diffuse, 2, 16, 0.0, 0, 0, 1, 1);
        for row in rows {
            for w in row {
                assert!((w - 1.0 / 16.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn missing_entry_is_a_coverage_error() {
        let spec = make_shortcut_scenario(0.9, 0.6, 16, 8, 8);
        let denoiser = ScriptedDenoiser::new(spec).unwrap();
        let state = SequenceState::new(0, 16, 2);
        let far_state = SequenceState::from_response(0, 16, state.response().to_vec(), 7);
        let err = denoiser
            .evaluate(&far_state, &BTreeSet::from([1]), 0)
            .unwrap_err();
        assert!(matches!(
            err,
            ScenarioError::MissingEntry {
                step: 7,
                position: 1
            }
        ));
    }

    #[test]
    fn evaluate_is_deterministic_under_noise() {
        let mut spec = make_shortcut_scenario(0.9, 0.6, 16, 8, 8);
        for record in &mut spec.entries {
            if let ScriptEntry::Generated { noise_std, .. } = &mut record.script {
                *noise_std = 0.3;
            }
        }
        let denoiser = ScriptedDenoiser::new(spec).unwrap();
        let state = SequenceState::new(0, 16, 2);
        let candidates = BTreeSet::from([1, 2]);
        let a = denoiser.evaluate(&state, &candidates, 42).unwrap();
        let b = denoiser.evaluate(&state, &candidates, 42).unwrap();
        assert_eq!(a, b);
        let c = denoiser.evaluate(&state, &candidates, 43).unwrap();
        assert_ne!(a, c, "different seeds must perturb the noise");
    }

    #[test]
    fn generated_outputs_satisfy_the_output_contract() {
        let mut spec = make_shortcut_scenario(0.9, 0.6, 16, 8, 3);
        for record in &mut spec.entries {
            if let ScriptEntry::Generated {
                noise_std,
                noise_seed,
                ..
            } = &mut record.script
            {
                *noise_std = 0.5;
                *noise_seed = 9;
            }
        }
        let denoiser = ScriptedDenoiser::new(spec).unwrap();
        let state = SequenceState::new(0, 16, 2);
        let out = denoiser
            .evaluate(&state, &BTreeSet::from([1, 2]), 7)
            .unwrap();
        out.validate(8, 8, 16).unwrap();
    }

    #[test]
    fn schema_version_gate_rejects_unknown_versions() {
        let mut spec = make_shortcut_scenario(0.9, 0.6, 16, 8, 8);
        spec.schema_version = 99;
        let text = serde_json::to_string(&spec).unwrap();
        let err = ScenarioSpec::from_json(&text).unwrap_err();
        assert!(matches!(
            err,
            ScenarioError::UnsupportedSchemaVersion { found: 99, .. }
        ));
    }

    #[test]
    fn scenario_json_round_trips() {
        let spec = make_trajectory_scenario(TrajectoryKind::Grounded, 4);
        let parsed = ScenarioSpec::from_json(&spec.to_json()).unwrap();
        assert_eq!(spec, parsed);
    }

    #[test]
    fn duplicate_entries_rejected() {
        let mut spec = make_shortcut_scenario(0.9, 0.6, 16, 8, 8);
        let dup = spec.entries[0].clone();
        spec.entries.push(dup);
        assert!(matches!(
            spec.validate(),
            Err(ScenarioError::DuplicateEntry {
                step: 1,
                position: 1
            })
        ));
    }

    #[test]
    fn shortcut_scenario_records_roles_and_ground_truth() {
        let spec = make_shortcut_scenario(0.9, 0.6, 16, 8, 8);
        spec.validate().unwrap();
        assert_eq!(spec.roles.shortcut_position, Some(1));
        assert_eq!(spec.roles.grounded_position, Some(2));
        let b_shortcut = spec.ground_truth_entropy[&1];
        let b_grounded = spec.ground_truth_entropy[&2];
        assert!((b_shortcut - 16f64.ln()).abs() < 1e-6);
        assert!(b_grounded < 1e-6);
    }
}

//! Grounding-aware candidate scoring.
//!
//! The pipeline per candidate: renormalize each head's raw attention row over
//! image tokens, take the Shannon entropy of each row, aggregate the head
//! entropies into a single robust grounding entropy (by default the
//! beta-quantile localization consensus), and fold the result into the
//! confidence as a multiplicative penalty:
//!
//! ```text
//! g = 1 / (1 + H)          grounding multiplier
//! u = c * g^alpha          linear ranking score
//! b = alpha * ln(1 + H)    discrepancy estimate, so ln u = ln c - b
//! ```
//!
//! Natural logarithms throughout; this keeps the log-space and linear-space
//! forms of the score consistent to rounding error.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::denoiser::DenoiserOutput;
use crate::sequence::TokenId;

#[derive(Debug, Error, PartialEq)]
pub enum GroundingError {
    #[error("attention weight {value} at column {index} is negative")]
    NegativeWeight { index: usize, value: f64 },
    #[error("attention row is empty")]
    EmptyRow,
    #[error("cannot aggregate an empty entropy set")]
    EmptyEntropies,
    #[error("invalid grounding config: {0}")]
    InvalidConfig(String),
    #[error("candidate {position}: distribution is empty")]
    EmptyDistribution { position: usize },
}

/// How the per-head entropies collapse into the robust grounding entropy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    /// The ceil(beta * M)-th smallest head entropy: a token counts as
    /// grounded only when that fraction of heads agree.
    #[default]
    Quantile,
    /// Smallest head entropy; a single sharp head suffices.
    Min,
    /// Arithmetic mean over heads.
    Mean,
}

impl AggregationMode {
    pub fn label(&self) -> &'static str {
        match self {
            AggregationMode::Quantile => "quantile",
            AggregationMode::Min => "min",
            AggregationMode::Mean => "mean",
        }
    }
}

/// Penalty strength, consensus quantile, and smoothing for the scoring
/// pipeline. `lambda_true` belongs to the synthetic true-objective setup used
/// by the verification oracles; it is carried here so one config describes a
/// whole experiment, and it is never consulted while scoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingConfig {
    pub alpha: f64,
    pub beta: f64,
    pub delta: f64,
    #[serde(default)]
    pub aggregation: AggregationMode,
    #[serde(default)]
    pub lambda_true: Option<f64>,
}

impl Default for GroundingConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.25,
            delta: 1e-8,
            aggregation: AggregationMode::Quantile,
            lambda_true: None,
        }
    }
}

impl GroundingConfig {
    pub fn validate(&self) -> Result<(), GroundingError> {
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return Err(GroundingError::InvalidConfig(format!(
                "alpha {} must be finite and >= 0",
                self.alpha
            )));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(GroundingError::InvalidConfig(format!(
                "beta {} outside (0, 1]",
                self.beta
            )));
        }
        if !self.delta.is_finite() || self.delta <= 0.0 {
            return Err(GroundingError::InvalidConfig(format!(
                "delta {} must be finite and > 0",
                self.delta
            )));
        }
        if let Some(lambda) = self.lambda_true {
            if !lambda.is_finite() || lambda <= 0.0 {
                return Err(GroundingError::InvalidConfig(format!(
                    "lambda {lambda} must be finite and > 0"
                )));
            }
        }
        Ok(())
    }
}

/// Everything the pipeline derives for one candidate. `head_peaks` records
/// the maximum of each renormalized row and `selected_head` the head whose
/// entropy became the aggregate (when one exists); trajectory export reads
/// both, so traces stay self-contained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub position: usize,
    pub proposal: TokenId,
    pub confidence: f64,
    pub head_entropies: Vec<f64>,
    pub head_peaks: Vec<f64>,
    pub aggregate_entropy: f64,
    pub selected_head: Option<usize>,
    pub discrepancy_estimate: f64,
    pub multiplier: f64,
    pub ranking_score: f64,
    pub aggregation: AggregationMode,
}

impl CandidateScore {
    /// Corrected log-score `ln c - b`; ranking by this equals ranking by the
    /// linear score.
    pub fn log_score(&self) -> f64 {
        self.confidence.ln() - self.discrepancy_estimate
    }

    /// Peak of the selected head's renormalized row (falls back to the
    /// overall maximum when the aggregation has no single selected head).
    pub fn selected_peak(&self) -> f64 {
        match self.selected_head {
            Some(head) => self.head_peaks[head],
            None => self
                .head_peaks
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

/// Smoothed renormalization of one raw attention row over N image tokens:
/// `out_j = (row_j + delta/N) / (sum(row) + delta)`. The output is a strictly
/// positive probability vector even for an all-zero row, which collapses to
/// uniform.
pub fn renormalize_attention(row: &[f64], delta: f64) -> Result<Vec<f64>, GroundingError> {
    if row.is_empty() {
        return Err(GroundingError::EmptyRow);
    }
    if delta.is_nan() || delta <= 0.0 {
        return Err(GroundingError::InvalidConfig(format!(
            "delta {delta} must be > 0"
        )));
    }
    let mut sum = 0.0;
    for (index, &value) in row.iter().enumerate() {
        if value.is_nan() || value < 0.0 {
            return Err(GroundingError::NegativeWeight { index, value });
        }
        sum += value;
    }
    let n = row.len() as f64;
    let fill = delta / n;
    let denom = sum + delta;
    Ok(row.iter().map(|&w| (w + fill) / denom).collect())
}

/// Shannon entropy (natural log) of a strictly positive distribution, as
/// produced by [`renormalize_attention`]. Ranges over `[0, ln N]`.
pub fn head_entropy(dist: &[f64]) -> f64 {
    dist.iter().map(|&p| -p * p.ln()).sum()
}

/// The ceil(beta * M)-th smallest element of the entropy multiset. The result
/// is always one of the inputs; beta = 1 picks the maximum and beta <= 1/M
/// the minimum. The ceiling is taken with a 1e-9 downward guard so that
/// beta * M values that are integers up to float rounding index exactly.
pub fn quantile_aggregate(entropies: &[f64], beta: f64) -> Result<f64, GroundingError> {
    Ok(entropies[quantile_index(entropies, beta)?])
}

/// 0-based index into the ascending sort order selected by the quantile.
fn quantile_rank(m: usize, beta: f64) -> Result<usize, GroundingError> {
    if m == 0 {
        return Err(GroundingError::EmptyEntropies);
    }
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(GroundingError::InvalidConfig(format!(
            "beta {beta} outside (0, 1]"
        )));
    }
    let raw = (beta * m as f64 - 1e-9).ceil();
    let index = (raw.max(1.0) as usize).min(m);
    Ok(index - 1)
}

/// Index (into the original slice) of the element the quantile selects; ties
/// in entropy resolve to the lower head index.
fn quantile_index(entropies: &[f64], beta: f64) -> Result<usize, GroundingError> {
    let rank = quantile_rank(entropies.len(), beta)?;
    let mut order: Vec<usize> = (0..entropies.len()).collect();
    order.sort_by(|&a, &b| entropies[a].total_cmp(&entropies[b]).then(a.cmp(&b)));
    Ok(order[rank])
}

/// The linear ranking score `c * (1 + H)^(-alpha)`.
///
/// `alpha = 0` and `H = 0` both return the confidence bit-exactly (IEEE pow
/// with exponent 0 or base 1 is exact).
pub fn ranking_score(confidence: f64, entropy: f64, alpha: f64) -> f64 {
    confidence * (1.0 + entropy).powf(-alpha)
}

/// The discrepancy estimate `alpha * ln(1 + H)`.
pub fn discrepancy_estimate(entropy: f64, alpha: f64) -> f64 {
    alpha * entropy.ln_1p()
}

/// Score every candidate in the output: greedy argmax proposal (ties to the
/// lowest token id), per-head renormalized entropies, aggregation, penalty.
pub fn score_candidates(
    output: &DenoiserOutput,
    config: &GroundingConfig,
) -> Result<Vec<CandidateScore>, GroundingError> {
    config.validate()?;
    let mut scores = Vec::with_capacity(output.evals.len());
    for (&position, eval) in &output.evals {
        if eval.distribution.is_empty() {
            return Err(GroundingError::EmptyDistribution { position });
        }
        let mut proposal = 0usize;
        for (token, &p) in eval.distribution.iter().enumerate() {
            if p > eval.distribution[proposal] {
                proposal = token;
            }
        }
        let confidence = eval.distribution[proposal];

        let mut head_entropies = Vec::with_capacity(eval.attention.len());
        let mut head_peaks = Vec::with_capacity(eval.attention.len());
        for row in &eval.attention {
            let renormalized = renormalize_attention(row, config.delta)?;
            head_entropies.push(head_entropy(&renormalized));
            head_peaks.push(
                renormalized
                    .iter()
                    .cloned()
                    .fold(f64::NEG_INFINITY, f64::max),
            );
        }

        let (aggregate_entropy, selected_head) = match config.aggregation {
            AggregationMode::Quantile => {
                let head = quantile_index(&head_entropies, config.beta)?;
                (head_entropies[head], Some(head))
            }
            AggregationMode::Min => {
                if head_entropies.is_empty() {
                    return Err(GroundingError::EmptyEntropies);
                }
                let mut head = 0usize;
                for (h, &e) in head_entropies.iter().enumerate() {
                    if e < head_entropies[head] {
                        head = h;
                    }
                }
                (head_entropies[head], Some(head))
            }
            AggregationMode::Mean => {
                if head_entropies.is_empty() {
                    return Err(GroundingError::EmptyEntropies);
                }
                let mean = head_entropies.iter().sum::<f64>() / head_entropies.len() as f64;
                (mean, None)
            }
        };

        scores.push(CandidateScore {
            position,
            proposal: proposal as TokenId,
            confidence,
            head_entropies,
            head_peaks,
            aggregate_entropy,
            selected_head,
            discrepancy_estimate: discrepancy_estimate(aggregate_entropy, config.alpha),
            multiplier: 1.0 / (1.0 + aggregate_entropy),
            ranking_score: ranking_score(confidence, aggregate_entropy, config.alpha),
            aggregation: config.aggregation,
        });
    }
    Ok(scores)
}

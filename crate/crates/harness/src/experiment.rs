//! Batch execution of (scenario, policy, seed) cells with shortcut metrics.
//!
//! Cells are independent and run concurrently when the `parallel` feature is
//! on; traces land in deterministic per-cell files and the metric reduction
//! is an ordered fold over cell keys, so a re-run with an identical config
//! byte-reproduces every artifact. Scenario-level failures (missing script
//! coverage, bad files) are collected per case and never abort the batch;
//! only an unusable output directory fails up front.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use visage_core::decoder::{decode, first_divergence, DecodePolicy, DecodeTrace};
use visage_core::denoiser::{ScenarioSpec, ScriptedDenoiser};
use visage_core::sequence::{make_block_schedule, UnmaskSchedule};

use crate::{io_err, HarnessError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleTriple {
    pub gen_length: usize,
    pub steps: usize,
    pub block_length: usize,
}

impl ScheduleTriple {
    pub fn build(&self) -> Result<UnmaskSchedule, HarnessError> {
        make_block_schedule(self.gen_length, self.steps, self.block_length)
            .map_err(|e| HarnessError::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScenarioSource {
    File(PathBuf),
    Inline(ScenarioSpec),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExportFormat {
    /// Per-cell decode traces as JSON lines.
    Jsonl,
    /// Metrics and divergence tables as CSV.
    Csv,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub scenarios: Vec<ScenarioSource>,
    pub policies: Vec<DecodePolicy>,
    pub schedule_override: Option<ScheduleTriple>,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub exports: Vec<ExportFormat>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.scenarios.is_empty() {
            return Err(HarnessError::Config("no scenarios given".into()));
        }
        if self.policies.is_empty() {
            return Err(HarnessError::Config("no policies given".into()));
        }
        if self.seeds.is_empty() {
            return Err(HarnessError::Config("no seeds given".into()));
        }
        let mut labels: Vec<String> = self.policies.iter().map(DecodePolicy::label).collect();
        labels.sort();
        for pair in labels.windows(2) {
            if pair[0] == pair[1] {
                return Err(HarnessError::Config(format!(
                    "duplicate policy {}",
                    pair[0]
                )));
            }
        }
        for policy in &self.policies {
            policy
                .grounding
                .validate()
                .map_err(|e| HarnessError::Config(e.to_string()))?;
        }
        if let Some(triple) = &self.schedule_override {
            triple.build()?;
        }
        Ok(())
    }
}

/// Identity of one decode cell.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellKey {
    pub scenario: String,
    pub policy: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseFailure {
    pub key: CellKey,
    pub error: String,
}

/// Per-policy shortcut metrics over the cells that carry designated roles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyMetrics {
    pub policy: String,
    /// Cells decoded under this policy.
    pub cells: usize,
    /// Cells whose scenario designates both a shortcut and a grounded
    /// position.
    pub role_cells: usize,
    /// Fraction of role cells where the shortcut position committed strictly
    /// before the grounded position.
    pub shortcut_commit_rate: Option<f64>,
    pub mean_grounded_commit_step: Option<f64>,
    /// Mean discrepancy estimate of the grounded position at its first
    /// scoring, a direct read of how permissive the penalty is.
    pub mean_grounded_discrepancy: Option<f64>,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceSummary {
    pub policy_a: String,
    pub policy_b: String,
    /// Cells present under both policies.
    pub compared_cells: usize,
    pub diverged_cells: usize,
    pub mean_first_divergence_step: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub metrics: Vec<PolicyMetrics>,
    pub divergences: Vec<DivergenceSummary>,
    pub failures: Vec<CaseFailure>,
    pub trace_files: Vec<PathBuf>,
}

/// Decoded traces keyed by cell, plus the per-case failures.
pub type CellResults = (Vec<(CellKey, DecodeTrace)>, Vec<CaseFailure>);

/// Decode every cell in memory; no filesystem access.
pub fn run_cells(config: &ExperimentConfig) -> Result<CellResults, HarnessError> {
    config.validate()?;
    let mut scenarios = Vec::new();
    let mut failures = Vec::new();
    for source in &config.scenarios {
        match source {
            ScenarioSource::Inline(spec) => scenarios.push(spec.clone()),
            ScenarioSource::File(path) => match ScenarioSpec::load(path) {
                Ok(spec) => scenarios.push(spec),
                Err(e) => failures.push(CaseFailure {
                    key: CellKey {
                        scenario: path.display().to_string(),
                        policy: "*".into(),
                        seed: 0,
                    },
                    error: e.to_string(),
                }),
            },
        }
    }
    scenarios.sort_by(|a, b| a.name.cmp(&b.name));

    struct Cell {
        scenario: ScenarioSpec,
        policy: DecodePolicy,
        seed: u64,
    }
    let mut cells = Vec::new();
    for scenario in &scenarios {
        for policy in &config.policies {
            for &seed in &config.seeds {
                cells.push(Cell {
                    scenario: scenario.clone(),
                    policy: policy.clone(),
                    seed,
                });
            }
        }
    }

    let schedule_override = config.schedule_override;
    let results = map_cells(&cells, move |cell| {
        let key = CellKey {
            scenario: cell.scenario.name.clone(),
            policy: cell.policy.label(),
            seed: cell.seed,
        };
        let run = || -> Result<DecodeTrace, String> {
            let schedule = match schedule_override {
                Some(triple) => {
                    make_block_schedule(triple.gen_length, triple.steps, triple.block_length)
                        .map_err(|e| e.to_string())?
                }
                None => cell.scenario.schedule().map_err(|e| e.to_string())?,
            };
            let denoiser =
                ScriptedDenoiser::new(cell.scenario.clone()).map_err(|e| e.to_string())?;
            let (_, trace) =
                decode(&denoiser, &schedule, &cell.policy, cell.seed).map_err(|e| e.to_string())?;
            Ok(trace)
        };
        (key, run())
    });

    let mut traces = Vec::new();
    for (key, result) in results {
        match result {
            Ok(trace) => traces.push((key, trace)),
            Err(error) => failures.push(CaseFailure { key, error }),
        }
    }
    Ok((traces, failures))
}

#[cfg(feature = "parallel")]
fn map_cells<T: Sync, U: Send, F: Fn(&T) -> U + Sync + Send>(items: &[T], f: F) -> Vec<U> {
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn map_cells<T, U, F: Fn(&T) -> U>(items: &[T], f: F) -> Vec<U> {
    items.iter().map(f).collect()
}

/// Metrics over already-decoded traces, grouped by policy label. Pure and
/// order-insensitive: traces are re-sorted by cell key before the fold, so
/// in-process results and results recomputed from persisted files agree
/// bit for bit.
pub fn compute_metrics(
    traces: &[(CellKey, DecodeTrace)],
    failures: &[CaseFailure],
) -> (Vec<PolicyMetrics>, Vec<DivergenceSummary>) {
    let mut ordered: Vec<&(CellKey, DecodeTrace)> = traces.iter().collect();
    ordered.sort_by(|a, b| a.0.cmp(&b.0));

    let mut by_policy: BTreeMap<String, Vec<&(CellKey, DecodeTrace)>> = BTreeMap::new();
    for entry in &ordered {
        by_policy
            .entry(entry.0.policy.clone())
            .or_default()
            .push(entry);
    }

    let mut metrics = Vec::new();
    for (policy, entries) in &by_policy {
        let mut role_cells = 0usize;
        let mut shortcut_first = 0usize;
        let mut grounded_steps = 0.0f64;
        let mut grounded_discrepancy = 0.0f64;
        for (_, trace) in entries {
            let (Some(shortcut), Some(grounded)) =
                (trace.roles.shortcut_position, trace.roles.grounded_position)
            else {
                continue;
            };
            let (Some(step_s), Some(step_g)) = (
                trace.committed_step(shortcut),
                trace.committed_step(grounded),
            ) else {
                continue;
            };
            role_cells += 1;
            if step_s < step_g {
                shortcut_first += 1;
            }
            grounded_steps += step_g as f64;
            if let Some(score) = trace
                .steps
                .iter()
                .flat_map(|record| record.scores.iter())
                .find(|score| score.position == grounded)
            {
                grounded_discrepancy += score.discrepancy_estimate;
            }
        }
        let failures = failures.iter().filter(|f| &f.key.policy == policy).count();
        metrics.push(PolicyMetrics {
            policy: policy.clone(),
            cells: entries.len(),
            role_cells,
            shortcut_commit_rate: (role_cells > 0)
                .then(|| shortcut_first as f64 / role_cells as f64),
            mean_grounded_commit_step: (role_cells > 0).then(|| grounded_steps / role_cells as f64),
            mean_grounded_discrepancy: (role_cells > 0)
                .then(|| grounded_discrepancy / role_cells as f64),
            failures,
        });
    }

    let policies: Vec<&String> = by_policy.keys().collect();
    let mut divergences = Vec::new();
    for i in 0..policies.len() {
        for j in i + 1..policies.len() {
            let left: BTreeMap<(&str, u64), &DecodeTrace> = by_policy[policies[i]]
                .iter()
                .map(|(key, trace)| ((key.scenario.as_str(), key.seed), trace))
                .collect();
            let mut compared = 0usize;
            let mut diverged = 0usize;
            let mut first_steps = 0.0f64;
            for (key, trace) in &by_policy[policies[j]] {
                let Some(other) = left.get(&(key.scenario.as_str(), key.seed)) else {
                    continue;
                };
                compared += 1;
                if let Some(step) = first_divergence(other, trace) {
                    diverged += 1;
                    first_steps += step as f64;
                }
            }
            divergences.push(DivergenceSummary {
                policy_a: policies[i].clone(),
                policy_b: policies[j].clone(),
                compared_cells: compared,
                diverged_cells: diverged,
                mean_first_divergence_step: (diverged > 0).then(|| first_steps / diverged as f64),
            });
        }
    }
    (metrics, divergences)
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

pub fn trace_file_name(key: &CellKey) -> String {
    format!(
        "{}__{}__s{}.jsonl",
        sanitize(&key.scenario),
        sanitize(&key.policy),
        key.seed
    )
}

/// Run the batch, persist traces and tables under `out_dir`, and return the
/// report. The output directory is probed for writability before any decode
/// runs.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport, HarnessError> {
    config.validate()?;
    fs::create_dir_all(&config.out_dir)
        .map_err(|e| io_err(&config.out_dir.display().to_string(), e))?;
    let probe = config.out_dir.join(".write_probe");
    fs::write(&probe, b"").map_err(|e| io_err(&probe.display().to_string(), e))?;
    fs::remove_file(&probe).map_err(|e| io_err(&probe.display().to_string(), e))?;

    let (traces, failures) = run_cells(config)?;
    let mut trace_files = Vec::new();
    if config.exports.contains(&ExportFormat::Jsonl) {
        for (key, trace) in &traces {
            let path = config.out_dir.join(trace_file_name(key));
            fs::write(&path, trace.to_jsonl())
                .map_err(|e| io_err(&path.display().to_string(), e))?;
            trace_files.push(path);
        }
    }

    let (metrics, divergences) = compute_metrics(&traces, &failures);
    if config.exports.contains(&ExportFormat::Csv) {
        write_metrics_csv(&config.out_dir.join("metrics.csv"), &metrics)?;
        write_divergence_csv(&config.out_dir.join("divergence.csv"), &divergences)?;
    }

    let report = ExperimentReport {
        metrics,
        divergences,
        failures,
        trace_files,
    };
    let report_path = config.out_dir.join("report.json");
    let json =
        serde_json::to_string_pretty(&report).map_err(|e| HarnessError::Internal(e.to_string()))?;
    fs::write(&report_path, json).map_err(|e| io_err(&report_path.display().to_string(), e))?;
    Ok(report)
}

/// Reload persisted traces and recompute the metrics; byte-equal to the
/// in-process result for the same cells.
pub fn metrics_from_trace_files(
    paths: &[PathBuf],
) -> Result<(Vec<PolicyMetrics>, Vec<DivergenceSummary>), HarnessError> {
    let mut traces = Vec::new();
    for path in paths {
        let text = fs::read_to_string(path).map_err(|e| io_err(&path.display().to_string(), e))?;
        let trace = DecodeTrace::from_jsonl(&text)
            .map_err(|e| HarnessError::Scenario(format!("{}: {e}", path.display())))?;
        traces.push((
            CellKey {
                scenario: trace.scenario_name.clone(),
                policy: trace.policy.label(),
                seed: trace.seed,
            },
            trace,
        ));
    }
    Ok(compute_metrics(&traces, &[]))
}

fn write_metrics_csv(path: &Path, metrics: &[PolicyMetrics]) -> Result<(), HarnessError> {
    let mut writer =
        csv::Writer::from_path(path).map_err(|e| io_err(&path.display().to_string(), e))?;
    writer
        .write_record([
            "policy",
            "cells",
            "role_cells",
            "shortcut_commit_rate",
            "mean_grounded_commit_step",
            "mean_grounded_discrepancy",
            "failures",
        ])
        .map_err(|e| io_err("metrics.csv", e))?;
    let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for row in metrics {
        writer
            .write_record([
                row.policy.clone(),
                row.cells.to_string(),
                row.role_cells.to_string(),
                fmt(row.shortcut_commit_rate),
                fmt(row.mean_grounded_commit_step),
                fmt(row.mean_grounded_discrepancy),
                row.failures.to_string(),
            ])
            .map_err(|e| io_err("metrics.csv", e))?;
    }
    writer.flush().map_err(|e| io_err("metrics.csv", e))
}

fn write_divergence_csv(
    path: &Path,
    divergences: &[DivergenceSummary],
) -> Result<(), HarnessError> {
    let mut writer =
        csv::Writer::from_path(path).map_err(|e| io_err(&path.display().to_string(), e))?;
    writer
        .write_record([
            "policy_a",
            "policy_b",
            "compared_cells",
            "diverged_cells",
            "mean_first_divergence_step",
        ])
        .map_err(|e| io_err("divergence.csv", e))?;
    for row in divergences {
        writer
            .write_record([
                row.policy_a.clone(),
                row.policy_b.clone(),
                row.compared_cells.to_string(),
                row.diverged_cells.to_string(),
                row.mean_first_divergence_step
                    .map(|x| x.to_string())
                    .unwrap_or_default(),
            ])
            .map_err(|e| io_err("divergence.csv", e))?;
    }
    writer.flush().map_err(|e| io_err("divergence.csv", e))
}

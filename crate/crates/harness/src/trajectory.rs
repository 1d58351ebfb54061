//! Per-step trajectory tables for a tracked position.
//!
//! The `peak` column is the maximum of the renormalized attention row of the
//! head the aggregation selected at that step; `peak_normalized` divides it
//! by the trajectory's own maximum. The `reference` column is the scenario's
//! synthetic language-prior constant; crossing behavior is defined against
//! the raw `peak` column, since a trajectory normalized by its own maximum
//! always ends at 1.

use std::io::Write;

use serde::{Deserialize, Serialize};

use visage_core::decoder::DecodeTrace;

use crate::{io_err, HarnessError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub step: usize,
    /// Peak of the selected head's renormalized attention row.
    pub peak: f64,
    /// Peak divided by the trajectory maximum.
    pub peak_normalized: f64,
    pub confidence: f64,
    pub aggregate_entropy: f64,
    pub committed: bool,
    pub reference: f64,
}

/// Extract the tracked position's per-step trajectory from a trace.
pub fn export_trajectory(
    trace: &DecodeTrace,
    position: usize,
) -> Result<Vec<TrajectoryRow>, HarnessError> {
    let mut rows = Vec::new();
    for record in &trace.steps {
        let Some(score) = record.scores.iter().find(|s| s.position == position) else {
            continue;
        };
        rows.push(TrajectoryRow {
            step: record.step,
            peak: score.selected_peak(),
            peak_normalized: 0.0,
            confidence: score.confidence,
            aggregate_entropy: score.aggregate_entropy,
            committed: record.committed.contains_key(&position),
            reference: trace.reference_level,
        });
    }
    if rows.is_empty() {
        return Err(HarnessError::Scenario(format!(
            "position {position} never appears in the trace's candidate sets"
        )));
    }
    let max_peak = rows
        .iter()
        .map(|r| r.peak)
        .fold(f64::NEG_INFINITY, f64::max);
    for row in &mut rows {
        row.peak_normalized = row.peak / max_peak;
    }
    Ok(rows)
}

/// Write the trajectory as CSV, preceded by comment lines stating the export
/// conventions (the reference is synthetic, not a model quantity).
pub fn write_trajectory_csv<W: Write>(
    rows: &[TrajectoryRow],
    mut writer: W,
) -> Result<(), HarnessError> {
    let io = |e: std::io::Error| io_err("trajectory csv", e);
    writeln!(
        writer,
        "# peak: max of the renormalized attention row of the selected head"
    )
    .map_err(io)?;
    writeln!(
        writer,
        "# peak_normalized: peak divided by its per-trajectory maximum"
    )
    .map_err(io)?;
    writeln!(
        writer,
        "# reference: synthetic language-prior constant (simulator convention, not a model quantity)"
    )
    .map_err(io)?;
    writeln!(
        writer,
        "step,peak,peak_normalized,confidence,aggregate_entropy,committed,reference"
    )
    .map_err(io)?;
    for row in rows {
        writeln!(
            writer,
            "{},{},{},{},{},{},{}",
            row.step,
            row.peak,
            row.peak_normalized,
            row.confidence,
            row.aggregate_entropy,
            row.committed,
            row.reference
        )
        .map_err(io)?;
    }
    Ok(())
}

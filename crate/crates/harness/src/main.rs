//! `visage` — batch experiments for grounding-aware parallel masked decoding.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use visage_core::decoder::DecodePolicy;
use visage_core::denoiser::ScenarioSpec;
use visage_core::grounding::{AggregationMode, GroundingConfig};
use visage_core::verification::{
    construct_worst_case, estimator_fidelity_report, run_stability_sweep, write_sweep_csv,
    OracleError, StabilitySweepConfig,
};

use visage_harness::experiment::{
    run_experiment, ExperimentConfig, ExportFormat, ScenarioSource, ScheduleTriple,
};
use visage_harness::scenario_gen::{generate_corpus, CorpusKind, CorpusParams};
use visage_harness::trajectory::{export_trajectory, write_trajectory_csv};
use visage_harness::HarnessError;

#[derive(Parser)]
#[command(
    name = "visage",
    about = "Grounding-aware parallel masked decoding: scenario batches, ablation sweeps, stability checks",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Baseline,
    Visage,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AggregationArg {
    Quantile,
    Min,
    Mean,
}

impl From<AggregationArg> for AggregationMode {
    fn from(value: AggregationArg) -> Self {
        match value {
            AggregationArg::Quantile => AggregationMode::Quantile,
            AggregationArg::Min => AggregationMode::Min,
            AggregationArg::Mean => AggregationMode::Mean,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ExportArg {
    Jsonl,
    Csv,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum KindArg {
    Shortcut,
    SingleSharp,
    Mixed,
    TrajectoryGrounded,
    TrajectoryShortcut,
}

impl From<KindArg> for CorpusKind {
    fn from(value: KindArg) -> Self {
        match value {
            KindArg::Shortcut => CorpusKind::Shortcut,
            KindArg::SingleSharp => CorpusKind::SingleSharp,
            KindArg::Mixed => CorpusKind::Mixed,
            KindArg::TrajectoryGrounded => CorpusKind::TrajectoryGrounded,
            KindArg::TrajectoryShortcut => CorpusKind::TrajectoryShortcut,
        }
    }
}

/// Ranking-policy flags shared by the decode-driven subcommands. Repeated
/// --mode / --alpha / --aggregation values expand into the cross product of
/// policies (baseline collapses to a single policy regardless of alpha).
#[derive(Args)]
struct PolicyFlags {
    /// Ranking mode; repeat to compare several
    #[arg(long = "mode", value_enum, num_args = 1.., default_values_t = [ModeArg::Baseline, ModeArg::Visage])]
    modes: Vec<ModeArg>,
    /// Grounding penalty exponent; repeat for a sweep
    #[arg(long = "alpha", num_args = 1.., default_values_t = [0.5])]
    alphas: Vec<f64>,
    /// Consensus quantile
    #[arg(long, default_value_t = 0.25)]
    beta: f64,
    /// Attention smoothing constant
    #[arg(long, default_value_t = 1e-8)]
    delta: f64,
    /// Head-entropy aggregation; repeat for a sweep
    #[arg(long = "aggregation", value_enum, num_args = 1.., default_values_t = [AggregationArg::Quantile])]
    aggregations: Vec<AggregationArg>,
}

impl PolicyFlags {
    fn policies(&self) -> Result<Vec<DecodePolicy>, HarnessError> {
        let mut policies: Vec<DecodePolicy> = Vec::new();
        let mut push = |policy: DecodePolicy| {
            if !policies.iter().any(|p| p.label() == policy.label()) {
                policies.push(policy);
            }
        };
        for &mode in &self.modes {
            match mode {
                ModeArg::Baseline => push(DecodePolicy::baseline()),
                ModeArg::Visage => {
                    for &alpha in &self.alphas {
                        for &aggregation in &self.aggregations {
                            push(DecodePolicy::visage(GroundingConfig {
                                alpha,
                                beta: self.beta,
                                delta: self.delta,
                                aggregation: aggregation.into(),
                                lambda_true: None,
                            }));
                        }
                    }
                }
            }
        }
        if policies.is_empty() {
            return Err(HarnessError::Config("no policies requested".into()));
        }
        Ok(policies)
    }

    fn single_config(&self) -> GroundingConfig {
        GroundingConfig {
            alpha: self.alphas.first().copied().unwrap_or(0.5),
            beta: self.beta,
            delta: self.delta,
            aggregation: self
                .aggregations
                .first()
                .copied()
                .map(AggregationMode::from)
                .unwrap_or_default(),
            lambda_true: None,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Decode scenario files under one or more policies, with traces and
    /// shortcut metrics
    Run {
        /// Scenario JSON file; repeat or pass several for a batch
        #[arg(long = "scenario", num_args = 1.., required = true)]
        scenarios: Vec<PathBuf>,
        #[command(flatten)]
        policy: PolicyFlags,
        /// Override the scenario's generation length
        #[arg(long)]
        gen_length: Option<usize>,
        /// Override the scenario's diffusion step count
        #[arg(long)]
        steps: Option<usize>,
        /// Override the scenario's block length
        #[arg(long)]
        block_length: Option<usize>,
        /// Decode seed; repeat for several
        #[arg(long = "seed", num_args = 1.., default_values_t = [0u64])]
        seeds: Vec<u64>,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
        /// Artifacts to write; repeat for several
        #[arg(long = "export", value_enum, num_args = 1.., default_values_t = [ExportArg::Jsonl, ExportArg::Csv])]
        exports: Vec<ExportArg>,
    },
    /// Generate a scenario corpus into a directory
    MakeScenarios {
        #[arg(long, value_enum)]
        kind: KindArg,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 16)]
        image_tokens: usize,
        #[arg(long, default_value_t = 8)]
        heads: usize,
        #[arg(long, default_value_t = 8)]
        trajectory_steps: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Monte-Carlo check of the selection stability bound; exports a CSV of
    /// per-trial rows
    Stability {
        #[arg(long, default_value_t = 10_000)]
        trials: usize,
        #[arg(long, default_value_t = 12)]
        max_candidates: usize,
        #[arg(long, default_value_t = 6)]
        max_k: usize,
        #[arg(long, default_value_t = 1.0)]
        epsilon_max: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// CSV output path
        #[arg(long)]
        out: PathBuf,
    },
    /// Construct and run the adversarial rank-reversal instance
    WorstCase {
        #[arg(long)]
        k: usize,
        #[arg(long)]
        epsilon: f64,
        #[arg(long)]
        gap: f64,
    },
    /// Export the per-step trajectory of a tracked position
    Trajectory {
        #[arg(long)]
        scenario: PathBuf,
        #[command(flatten)]
        policy: PolicyFlags,
        /// Tracked position (defaults to the scenario's tracked role)
        #[arg(long)]
        position: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// CSV output path (stdout when omitted)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare the discrepancy estimator against scenario ground truth
    Fidelity {
        #[arg(long = "scenario", num_args = 1.., required = true)]
        scenarios: Vec<PathBuf>,
        #[command(flatten)]
        policy: PolicyFlags,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(error) => {
            eprintln!("error: {error}");
            ExitCode::from(error.exit_code())
        }
    }
}

fn oracle_error(error: OracleError) -> HarnessError {
    match error {
        OracleError::BoundViolation { .. } => HarnessError::Internal(error.to_string()),
        OracleError::Scenario(inner) => HarnessError::Scenario(inner.to_string()),
        OracleError::Io(inner) => HarnessError::Io(inner),
        other => HarnessError::Config(other.to_string()),
    }
}

fn dispatch(command: Command) -> Result<(), HarnessError> {
    match command {
        Command::Run {
            scenarios,
            policy,
            gen_length,
            steps,
            block_length,
            seeds,
            out,
            exports,
        } => {
            let schedule_override = match (gen_length, steps, block_length) {
                (None, None, None) => None,
                (Some(gen_length), Some(steps), Some(block_length)) => Some(ScheduleTriple {
                    gen_length,
                    steps,
                    block_length,
                }),
                _ => {
                    return Err(HarnessError::Config(
                        "--gen-length, --steps, and --block-length must be given together".into(),
                    ))
                }
            };
            let config = ExperimentConfig {
                scenarios: scenarios.into_iter().map(ScenarioSource::File).collect(),
                policies: policy.policies()?,
                schedule_override,
                seeds,
                out_dir: out,
                exports: exports
                    .into_iter()
                    .map(|e| match e {
                        ExportArg::Jsonl => ExportFormat::Jsonl,
                        ExportArg::Csv => ExportFormat::Csv,
                    })
                    .collect(),
            };
            let report = run_experiment(&config)?;
            println!(
                "{:<40} {:>6} {:>10} {:>14} {:>14}",
                "policy", "cells", "role_cells", "shortcut_rate", "grounded_step"
            );
            let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
            for row in &report.metrics {
                println!(
                    "{:<40} {:>6} {:>10} {:>14} {:>14}",
                    row.policy,
                    row.cells,
                    row.role_cells,
                    fmt(row.shortcut_commit_rate),
                    fmt(row.mean_grounded_commit_step)
                );
            }
            for pair in &report.divergences {
                println!(
                    "divergence {} vs {}: {}/{} cells, first step {}",
                    pair.policy_a,
                    pair.policy_b,
                    pair.diverged_cells,
                    pair.compared_cells,
                    pair.mean_first_divergence_step
                        .map(|x| format!("{x:.2}"))
                        .unwrap_or_else(|| "-".into())
                );
            }
            if !report.failures.is_empty() {
                for failure in &report.failures {
                    eprintln!(
                        "case failure [{} / {} / seed {}]: {}",
                        failure.key.scenario, failure.key.policy, failure.key.seed, failure.error
                    );
                }
                return Err(HarnessError::Scenario(format!(
                    "{} case(s) failed",
                    report.failures.len()
                )));
            }
            Ok(())
        }
        Command::MakeScenarios {
            kind,
            count,
            seed,
            image_tokens,
            heads,
            trajectory_steps,
            out,
        } => {
            fs::create_dir_all(&out)
                .map_err(|e| HarnessError::Io(format!("{}: {e}", out.display())))?;
            let params = CorpusParams {
                image_tokens,
                heads,
                trajectory_steps,
            };
            let corpus = generate_corpus(kind.into(), count, seed, params);
            for spec in &corpus {
                let path = out.join(format!("{}.json", spec.name));
                spec.save(&path)
                    .map_err(|e| HarnessError::Io(e.to_string()))?;
            }
            println!("wrote {} scenarios to {}", corpus.len(), out.display());
            Ok(())
        }
        Command::Stability {
            trials,
            max_candidates,
            max_k,
            epsilon_max,
            seed,
            out,
        } => {
            let config = StabilitySweepConfig {
                trials,
                max_candidates,
                max_k,
                epsilon_max,
                seed,
            };
            let sweep = run_stability_sweep(&config).map_err(oracle_error)?;
            let file = fs::File::create(&out)
                .map_err(|e| HarnessError::Io(format!("{}: {e}", out.display())))?;
            write_sweep_csv(&sweep.rows, file).map_err(oracle_error)?;
            println!(
                "{} trials, zero bound violations; max loss/bound ratio {:.6}, mean loss {:.6}",
                sweep.rows.len(),
                sweep.max_loss_ratio,
                sweep.mean_loss
            );
            println!("rows written to {}", out.display());
            Ok(())
        }
        Command::WorstCase { k, epsilon, gap } => {
            let case = construct_worst_case(k, epsilon, gap).map_err(oracle_error)?;
            let trial = case.run().map_err(oracle_error)?;
            println!(
                "k={k} epsilon={epsilon} gap={gap}: loss {} bound {} ratio {:.6} swapped {}",
                trial.loss,
                trial.bound,
                trial.loss / trial.bound,
                trial.swapped
            );
            Ok(())
        }
        Command::Trajectory {
            scenario,
            policy,
            position,
            seed,
            out,
        } => {
            let spec =
                ScenarioSpec::load(&scenario).map_err(|e| HarnessError::Scenario(e.to_string()))?;
            let tracked = position.or(spec.roles.tracked_position).ok_or_else(|| {
                HarnessError::Config("scenario has no tracked position; pass --position".into())
            })?;
            let denoiser = visage_core::ScriptedDenoiser::new(spec.clone())
                .map_err(|e| HarnessError::Scenario(e.to_string()))?;
            let schedule = spec
                .schedule()
                .map_err(|e| HarnessError::Scenario(e.to_string()))?;
            let mode = policy.modes.first().copied().unwrap_or(ModeArg::Visage);
            let decode_policy = match mode {
                ModeArg::Baseline => DecodePolicy::baseline(),
                ModeArg::Visage => DecodePolicy::visage(policy.single_config()),
            };
            let (_, trace) = visage_core::decode(&denoiser, &schedule, &decode_policy, seed)
                .map_err(|e| HarnessError::Scenario(e.to_string()))?;
            let rows = export_trajectory(&trace, tracked)?;
            match out {
                Some(path) => {
                    let file = fs::File::create(&path)
                        .map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
                    write_trajectory_csv(&rows, file)?;
                    println!("wrote {} rows to {}", rows.len(), path.display());
                }
                None => {
                    let mut stdout = std::io::stdout().lock();
                    write_trajectory_csv(&rows, &mut stdout)?;
                }
            }
            Ok(())
        }
        Command::Fidelity {
            scenarios,
            policy,
            seed,
        } => {
            let mut specs = Vec::new();
            for path in &scenarios {
                specs.push(
                    ScenarioSpec::load(path).map_err(|e| HarnessError::Scenario(e.to_string()))?,
                );
            }
            let report = estimator_fidelity_report(&specs, &policy.single_config(), seed)
                .map_err(oracle_error)?;
            println!(
                "scenario,epsilon_realized,commitments_match,committed_estimated,committed_true"
            );
            let join = |v: &[usize]| {
                v.iter()
                    .map(ToString::to_string)
                    .collect::<Vec<_>>()
                    .join(";")
            };
            for record in &report.records {
                println!(
                    "{},{},{},{},{}",
                    record.scenario,
                    record.epsilon_realized,
                    record.commitments_match,
                    join(&record.committed_estimated),
                    join(&record.committed_true)
                );
            }
            Ok(())
        }
    }
}

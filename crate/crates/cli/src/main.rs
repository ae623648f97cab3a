// SPDX-License-Identifier: MIT OR Apache-2.0

//! `planlab` command-line driver.
//!
//! Exit codes: 0 on success, 1 when input validation or a check fails,
//! 2 when execution fails.

mod commands;
mod ctx;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::ctx::{Failure, Inputs, OutputArgs};

#[derive(Debug, Parser)]
#[command(
    name = "planlab",
    version,
    about = "Steering and planning experiments on decoder-only transformers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Dataset checks.
    #[command(subcommand)]
    Dataset(DatasetCmd),
    /// Steering vector estimation and evaluation.
    #[command(subcommand)]
    Steer(SteerCmd),
    /// Sample baseline or steered completions.
    Generate(GenerateArgs),
    /// Metrics over generated collections.
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Head patching and attention ablation.
    #[command(subcommand)]
    Circuit(CircuitCmd),
    /// Aggregate metric reports.
    #[command(subcommand)]
    Report(ReportCmd),
    /// Tokenization statistics.
    #[command(subcommand)]
    Tokens(TokensCmd),
    /// Built-in self-tests.
    #[command(subcommand)]
    Selftest(SelftestCmd),
    /// Planted-model utilities.
    #[command(subcommand)]
    Planted(PlantedCmd),
}

#[derive(Debug, Subcommand)]
enum DatasetCmd {
    /// Report schema and balance violations.
    Validate(ValidateArgs),
}

#[derive(Debug, Subcommand)]
enum SteerCmd {
    /// Estimate mean-difference vectors at the given sites.
    Estimate(EstimateArgs),
    /// Score every (layer, anchor) cell and keep the best vector.
    Sweep(SweepArgs),
    /// Effectiveness as a function of train-set size.
    Curve(CurveArgs),
}

#[derive(Debug, Subcommand)]
enum EvalCmd {
    /// Fraction of correct rhyme family, baseline and steered.
    Rhyme(EvalArgs),
    /// Last-word regeneration rates and chance baseline.
    Regen(RegenArgs),
    /// Correct-answer and article fractions.
    Qa(EvalArgs),
    /// Top-1 and KL divergence metrics under steering.
    Prob(ProbArgs),
}

#[derive(Debug, Subcommand)]
enum CircuitCmd {
    /// Per-head recovery of the steering logit difference.
    Patch(PatchArgs),
    /// Target share with attention to anchor positions blocked.
    Ablate(AblateArgs),
}

#[derive(Debug, Subcommand)]
enum ReportCmd {
    /// Pearson correlations between metrics.
    Correlations(CorrelationArgs),
}

#[derive(Debug, Subcommand)]
enum TokensCmd {
    /// Single-token fractions and embedding cosines per category.
    Stats(TokenStatsArgs),
}

#[derive(Debug, Subcommand)]
enum SelftestCmd {
    /// Run the pipeline on planted models and check the ground truth.
    Planted(SelftestArgs),
}

#[derive(Debug, Subcommand)]
enum PlantedCmd {
    /// Write a planted model, its vocabulary, dataset and ground truth.
    Build(PlantedBuildArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct ValidateArgs {
    /// Dataset JSON path, or `bundled:<name>`.
    #[arg(long)]
    pub dataset: String,
    #[command(flatten)]
    pub output: OutputArgs,
}

/// Pair, sites and multiplier shared by the steering commands.
#[derive(Debug, Clone, Args, Serialize)]
pub struct SiteArgs {
    /// `source->target`; defaults to every pair in the dataset.
    #[arg(long = "pair", allow_hyphen_values = true)]
    pub pairs: Vec<String>,
    /// Comma-separated layers; defaults to the middle 80%.
    #[arg(long, value_delimiter = ',')]
    pub layers: Vec<usize>,
    /// Comma-separated anchors: last_word, newline, question_mark.
    #[arg(long = "anchor", value_delimiter = ',')]
    pub anchors: Vec<String>,
    #[arg(long, default_value_t = planlab::steer::DEFAULT_MULTIPLIER)]
    pub multiplier: f32,
}

/// Sampling settings for rollouts.
#[derive(Debug, Clone, Args, Serialize)]
pub struct SamplingArgs {
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f32,
    #[arg(long, default_value_t = 24)]
    pub max_new_tokens: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct EstimateArgs {
    #[command(flatten)]
    pub inputs: Inputs,
    #[command(flatten)]
    pub site: SiteArgs,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct SweepArgs {
    #[command(flatten)]
    pub inputs: Inputs,
    #[command(flatten)]
    pub site: SiteArgs,
    #[command(flatten)]
    pub sampling: SamplingArgs,
    /// Rollouts per test prompt and cell.
    #[arg(long, default_value_t = planlab::steer::SWEEP_ROLLOUTS)]
    pub rollouts: usize,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct CurveArgs {
    #[command(flatten)]
    pub inputs: Inputs,
    #[command(flatten)]
    pub site: SiteArgs,
    #[command(flatten)]
    pub sampling: SamplingArgs,
    #[arg(long, default_value_t = planlab::steer::SWEEP_ROLLOUTS)]
    pub rollouts: usize,
    /// Comma-separated train sizes; defaults to powers of two.
    #[arg(long, value_delimiter = ',')]
    pub sizes: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub inputs: Inputs,
    /// Steering vector container; steers the vector's source category.
    #[arg(long)]
    pub vector: Option<PathBuf>,
    /// Categories to generate for; defaults to all (or the vector's source).
    #[arg(long = "category", allow_hyphen_values = true)]
    pub categories: Vec<String>,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Completions per prompt.
    #[arg(long, default_value_t = 50)]
    pub samples: usize,
    #[command(flatten)]
    pub sampling: SamplingArgs,
    /// Collection file stem; defaults to `baseline` or `steered`.
    #[arg(long)]
    pub name: Option<String>,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[command(flatten)]
    pub inputs: Inputs,
    /// Unsteered collection (JSON lines).
    #[arg(long)]
    pub baseline: PathBuf,
    /// Steered collections, one steering target each.
    #[arg(long)]
    pub steered: Vec<PathBuf>,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct RegenArgs {
    #[command(flatten)]
    pub eval: EvalArgs,
    #[arg(long, default_value_t = 1)]
    pub samples_per_line: usize,
    /// Text put in front of every regeneration prompt.
    #[arg(long, default_value = "")]
    pub prefix: String,
    #[command(flatten)]
    pub sampling: SamplingArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct ProbArgs {
    #[command(flatten)]
    pub inputs: Inputs,
    #[arg(long)]
    pub baseline: PathBuf,
    /// Steering vectors; each is scored on its source category's records.
    #[arg(long = "vector", required = true)]
    pub vectors: Vec<PathBuf>,
    #[command(flatten)]
    pub output: OutputArgs,
}

/// Logit-difference tokens and prompt selection for circuit commands.
#[derive(Debug, Clone, Args, Serialize)]
pub struct ProbeArgs {
    /// Token favoured by steering; must encode to one token.
    #[arg(long)]
    pub target_token: Option<String>,
    /// Token favoured without steering; must encode to one token.
    #[arg(long)]
    pub source_token: Option<String>,
    /// Test prompts used per category.
    #[arg(long, default_value_t = 10)]
    pub prompts: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct PatchArgs {
    #[command(flatten)]
    pub inputs: Inputs,
    #[arg(long)]
    pub vector: PathBuf,
    #[command(flatten)]
    pub probe: ProbeArgs,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct AblateArgs {
    #[command(flatten)]
    pub inputs: Inputs,
    /// Steering applied before ablating; its source category is probed.
    #[arg(long)]
    pub vector: Option<PathBuf>,
    /// Anchors whose positions are blocked.
    #[arg(long = "anchor", value_delimiter = ',', required = true)]
    pub anchors: Vec<String>,
    /// Category to probe when no vector is given.
    #[arg(long, allow_hyphen_values = true)]
    pub category: Option<String>,
    #[command(flatten)]
    pub probe: ProbeArgs,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct CorrelationArgs {
    /// JSON report files written by other commands.
    #[arg(long = "input", required = true)]
    pub inputs: Vec<PathBuf>,
    /// per_prompt or per_model.
    #[arg(long, default_value = "per_prompt")]
    pub grouping: String,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct TokenStatsArgs {
    #[command(flatten)]
    pub inputs: Inputs,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct SelftestArgs {
    /// World name, or `all`.
    #[arg(long, default_value = "synthetic")]
    pub world: String,
    /// Rollouts per test prompt.
    #[arg(long, default_value_t = 50)]
    pub samples: usize,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct PlantedBuildArgs {
    #[arg(long, default_value = "synthetic")]
    pub world: String,
    #[command(flatten)]
    pub output: OutputArgs,
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(raw) = std::env::var("PLANLAB_THREADS") else {
        return Ok(());
    };
    let n: usize = match raw.trim().parse() {
        Ok(n) if n > 0 => n,
        _ => {
            return Err(Failure::Invalid(anyhow::anyhow!(
                "PLANLAB_THREADS must be a positive integer, got {raw:?}"
            )))
        }
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Exec(e.into()))
}

fn run(cli: Cli) -> Result<(), Failure> {
    configure_threads()?;
    use commands as c;
    match cli.command {
        Command::Dataset(DatasetCmd::Validate(a)) => c::dataset_validate(a),
        Command::Steer(SteerCmd::Estimate(a)) => c::steer_estimate(a),
        Command::Steer(SteerCmd::Sweep(a)) => c::steer_sweep(a),
        Command::Steer(SteerCmd::Curve(a)) => c::steer_curve(a),
        Command::Generate(a) => c::generate(a),
        Command::Eval(EvalCmd::Rhyme(a)) => c::eval_rhyme(a),
        Command::Eval(EvalCmd::Regen(a)) => c::eval_regen(a),
        Command::Eval(EvalCmd::Qa(a)) => c::eval_qa(a),
        Command::Eval(EvalCmd::Prob(a)) => c::eval_prob(a),
        Command::Circuit(CircuitCmd::Patch(a)) => c::circuit_patch(a),
        Command::Circuit(CircuitCmd::Ablate(a)) => c::circuit_ablate(a),
        Command::Report(ReportCmd::Correlations(a)) => c::report_correlations(a),
        Command::Tokens(TokensCmd::Stats(a)) => c::tokens_stats(a),
        Command::Selftest(SelftestCmd::Planted(a)) => c::selftest_planted(a),
        Command::Planted(PlantedCmd::Build(a)) => c::planted_build(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Exec(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

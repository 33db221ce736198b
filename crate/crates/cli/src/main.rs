//! `confpref`: runs pipeline stages over an output directory.
//!
//! Exit codes: 0 success, 1 stage failure or validation violations,
//! 2 missing upstream artifact, 3 configuration changed since the recorded
//! run (pass `--force`). Failures print one JSON record on stderr.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use confpref::pipeline::{self, Overrides, PipelineConfig, ReportFormat, Stage, StageOutcome};

#[derive(Parser)]
#[command(name = "confpref", version, about = "Confidence-aware preference pipeline")]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `out_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Run seed (overrides `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Rerun even when up to date, replacing manifests from other configurations.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Svg,
}

#[derive(Subcommand)]
enum Command {
    /// Sample N responses per question.
    Sample,
    /// Semantic entropy, predictive entropy, P(True) and verbalized scores.
    Estimate,
    /// Fit the entropy regressor on the regressor split.
    TrainRegressor,
    /// Bilateral confidence for the preference split.
    Confidence,
    /// Bands, opposing statements, stance candidates and preference pairs.
    BuildPrefs,
    /// DPO on the preference pairs.
    TrainDpo,
    /// Two-round robustness episodes and calibration.
    Evaluate,
    /// Summary table or reliability diagram.
    Report {
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
    },
    /// Check artifact files for schema and invariant violations.
    Validate {
        #[arg(required = true)]
        paths: Vec<PathBuf>,
    },
}

fn fail(record: serde_json::Value, code: u8) -> ExitCode {
    eprintln!("{record}");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();

    if let Command::Validate { paths } = &cli.command {
        let mut violations = 0;
        for p in paths {
            match pipeline::validate_artifact(p) {
                Ok(vs) => {
                    for v in &vs {
                        println!(
                            "{}",
                            serde_json::json!({ "file": p.display().to_string(), "line": v.line, "rule": v.rule })
                        );
                    }
                    if vs.is_empty() {
                        println!("{}: ok", p.display());
                    }
                    violations += vs.len();
                }
                Err(e) => {
                    return fail(
                        serde_json::json!({ "error": "invalid_artifact", "file": p.display().to_string(), "message": e.to_string(), "exit_code": 1 }),
                        1,
                    )
                }
            }
        }
        if violations > 0 {
            return fail(
                serde_json::json!({ "error": "violations", "count": violations, "exit_code": 1 }),
                1,
            );
        }
        return ExitCode::SUCCESS;
    }

    let flags = Overrides {
        out_dir: cli.out.clone(),
        seed: cli.seed,
    };
    let cfg = match PipelineConfig::load(cli.config.as_deref(), std::env::vars(), &flags) {
        Ok(c) => c,
        Err(e) => {
            return fail(
                serde_json::json!({ "error": "config", "message": e.to_string(), "exit_code": 1 }),
                1,
            )
        }
    };
    let stage = match cli.command {
        Command::Sample => Stage::Sample,
        Command::Estimate => Stage::Estimate,
        Command::TrainRegressor => Stage::TrainRegressor,
        Command::Confidence => Stage::Confidence,
        Command::BuildPrefs => Stage::BuildPrefs,
        Command::TrainDpo => Stage::TrainDpo,
        Command::Evaluate => Stage::Evaluate,
        Command::Report { format: Format::Csv } => Stage::Report(ReportFormat::Csv),
        Command::Report { format: Format::Svg } => Stage::Report(ReportFormat::Svg),
        Command::Validate { .. } => unreachable!("handled above"),
    };
    match pipeline::run_stage(stage, &cfg, cli.force) {
        Ok(StageOutcome::Ran) => {
            println!("{stage}: done");
            ExitCode::SUCCESS
        }
        Ok(StageOutcome::Skipped) => {
            println!("{stage}: up to date");
            ExitCode::SUCCESS
        }
        Err(e) => fail(e.to_json(), e.exit_code() as u8),
    }
}

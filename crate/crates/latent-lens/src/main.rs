//! `latent-lens` command line: each pipeline stage as a subcommand over a
//! JSON run configuration.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use latent_lens::pipeline::{
    self, EpsilonConfig, PipelineError, RunConfig,
};

#[derive(Debug, Parser)]
#[command(
    name = "latent-lens",
    version,
    about = "Explain latent dimensions of small generative models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// Run configuration (JSON). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, overriding the configured one.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed, overriding the configured one.
    #[arg(long)]
    seed: Option<i64>,
}

impl CommonArgs {
    fn load(&self) -> Result<RunConfig, PipelineError> {
        let mut config = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(out) = &self.out {
            config.out_dir = out.clone();
        }
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        Ok(config)
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the configured model variants and write parameter files.
    Train(CommonArgs),
    /// Decode traversal grids into frames, strips, and metadata.
    Traverse(CommonArgs),
    /// Sample explanations per sequence, score certainty, apply selection.
    Explain(CommonArgs),
    /// Calibrate the display threshold from labeled sequences.
    Calibrate {
        #[command(flatten)]
        common: CommonArgs,
        /// Annotations JSONL; falls back to the configured path.
        #[arg(long)]
        annotations: Option<PathBuf>,
        /// Certainty scores JSONL; defaults to the run's certainty.jsonl.
        #[arg(long)]
        scores: Option<PathBuf>,
    },
    /// Re-apply a display threshold to persisted scores and responses.
    Select {
        #[command(flatten)]
        common: CommonArgs,
        /// Threshold; defaults to the configured epsilon (fixed form only).
        #[arg(long)]
        epsilon: Option<f64>,
    },
    /// Score selected explanations against reference annotations.
    Evaluate {
        #[command(flatten)]
        common: CommonArgs,
        /// Explanations records JSONL; defaults to the run's records.jsonl.
        #[arg(long)]
        explanations: Option<PathBuf>,
        /// Annotations JSONL; falls back to the configured path.
        #[arg(long)]
        annotations: Option<PathBuf>,
    },
    /// Render report.md from a completed run directory.
    Report(CommonArgs),
}

fn run() -> Result<(), PipelineError> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train(common) => {
            let config = common.load()?;
            let written = pipeline::cmd_train(&config)?;
            for path in written {
                println!("wrote {}", path.display());
            }
        }
        Command::Traverse(common) => {
            let config = common.load()?;
            let strips = pipeline::cmd_traverse(&config)?;
            println!("wrote {} strips under {}", strips.len(), config.out_dir.display());
        }
        Command::Explain(common) => {
            let config = common.load()?;
            let outcome = pipeline::cmd_explain(&config)?;
            println!(
                "explained {} sequences (epsilon {:.4})",
                outcome.records.len(),
                outcome.epsilon
            );
            for record in &outcome.records {
                match (&record.displayed, &record.error) {
                    (Some(text), _) => println!("  {}: {text}", record.sequence_id),
                    (None, Some(err)) => println!("  {}: error: {err}", record.sequence_id),
                    (None, None) => println!("  {}: (no selection)", record.sequence_id),
                }
            }
        }
        Command::Calibrate {
            common,
            annotations,
            scores,
        } => {
            let config = common.load()?;
            let results =
                pipeline::cmd_calibrate(&config, annotations.as_deref(), scores.as_deref())?;
            for (kind, result) in results {
                println!(
                    "{}: epsilon {:.4}, auc {:.4}, f1 {:.4}, precision {:.4}, recall {:.4}",
                    kind.display_name(),
                    result.epsilon,
                    result.auc,
                    result.f1,
                    result.precision,
                    result.recall
                );
            }
        }
        Command::Select { common, epsilon } => {
            let config = common.load()?;
            let threshold = match (epsilon, &config.epsilon) {
                (Some(value), _) => value,
                (None, EpsilonConfig::Fixed(value)) => *value,
                (None, EpsilonConfig::Calibrate { .. }) => {
                    return Err(PipelineError::Config(
                        "select needs --epsilon when the config calibrates".to_string(),
                    ))
                }
            };
            let records = pipeline::cmd_select(&config, threshold)?;
            println!("selected over {} records at epsilon {threshold:.4}", records.len());
        }
        Command::Evaluate {
            common,
            explanations,
            annotations,
        } => {
            let config = common.load()?;
            let rows =
                pipeline::cmd_evaluate(&config, explanations.as_deref(), annotations.as_deref())?;
            for row in rows {
                println!(
                    "{}/{}/{}: bleu {:.4}, rouge_l {:.4}, meteor {:.4}, embed_f1 {:.4}",
                    row.dataset, row.vae_variant, row.backend, row.bleu, row.rouge_l, row.meteor,
                    row.embed_f1
                );
            }
        }
        Command::Report(common) => {
            let config = common.load()?;
            pipeline::cmd_report(&config)?;
            println!(
                "wrote {}",
                config.out_dir.join("report.md").display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use qembed::pipeline::{demo, Pipeline, PipelineConfig, PipelineError, Stage, StageSummary, Status, Workspace};
use tracing_subscriber::EnvFilter;

/// Interpretable binary text embeddings from yes/no questions.
#[derive(Parser)]
#[command(name = "qembed", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run pipeline stages from a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        workspace: PathBuf,
        /// Override the root seed of the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Run even when recorded fingerprints no longer match.
        #[arg(long)]
        force: bool,
        /// Stage to run; repeat for several. All stages when absent.
        #[arg(long = "stage", value_parser = parse_stage)]
        stages: Vec<Stage>,
    },
    /// Run the bundled synthetic preset end to end.
    Demo {
        #[arg(long, default_value = "qembed-demo")]
        workspace: PathBuf,
        /// Answer with the synthetic-world oracle and write the exchanges here.
        #[arg(long)]
        record_transcript: Option<PathBuf>,
    },
    /// Print the default configuration.
    DefaultConfig,
}

fn parse_stage(s: &str) -> Result<Stage, String> {
    s.parse().map_err(|e: PipelineError| e.to_string())
}

fn print_summaries(summaries: &[StageSummary]) {
    for s in summaries {
        let status = match s.status {
            Status::Ran => "ran",
            Status::Skipped => "skipped",
        };
        let counts: Vec<String> = s.counts.iter().map(|(k, v)| format!("{k}={v}")).collect();
        println!("{:<16} {:<8} {:>8.2}s  {}", s.stage, status, s.seconds, counts.join(" "));
    }
}

fn run(command: Command) -> Result<(), PipelineError> {
    match command {
        Command::Run {
            config,
            workspace,
            seed,
            force,
            stages,
        } => {
            let mut cfg = PipelineConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let base = config
                .parent()
                .map(PathBuf::from)
                .unwrap_or_default();
            let mut p = Pipeline::new(cfg, base, Workspace::open(&workspace)?)?.force(force);
            let stages = if stages.is_empty() { Stage::ALL.to_vec() } else { stages };
            print_summaries(&p.run(&stages)?);
        }
        Command::Demo {
            workspace,
            record_transcript,
        } => {
            print_summaries(&demo::run_demo(&workspace, record_transcript.as_deref())?);
            println!("reports in {}", workspace.join("reports").display());
        }
        Command::DefaultConfig => print!("{}", PipelineConfig::default().to_toml()),
    }
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

//! `histdr`: stage-by-stage command line for history-aware conversational
//! dense retrieval experiments.

mod commands;
mod error;
mod workdir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use histdr::config::{EvalQuery, PipelineConfig};
use histdr::corpus::{generate_synthetic, SyntheticSpec};

use crate::commands::{AnalyzeKind, Ctx, ExportArgs, SearchArgs};
use crate::error::{CliError, CliResult};
use crate::workdir::WorkDir;

#[derive(Debug, Parser)]
#[command(name = "histdr", version, about = "History-aware conversational dense retrieval pipeline")]
struct Cli {
    /// Pipeline configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run even when upstream artifacts are stale.
    #[arg(long, global = true)]
    force: bool,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum QueryArg {
    Reformulated,
    Raw,
    FullHistory,
}

impl From<QueryArg> for EvalQuery {
    fn from(q: QueryArg) -> Self {
        match q {
            QueryArg::Reformulated => EvalQuery::Reformulated,
            QueryArg::Raw => EvalQuery::Raw,
            QueryArg::FullHistory => EvalQuery::FullHistory,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic topic-shift dataset.
    Generate {
        #[arg(long)]
        out: PathBuf,
        /// Generator settings (TOML); defaults when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Print the effective configuration with every default filled in.
    ShowConfig,
    /// Validate the collection and sessions and copy them into the work directory.
    Ingest,
    /// Encode every passage with the frozen passage encoder.
    Embed,
    /// Build the exact search index from the passage embeddings.
    Index,
    /// Pseudo relevance judgments for every historical turn.
    Prj,
    /// Context-denoised query reformulation.
    Reformulate,
    /// Mine positives and negatives into training instances.
    Mine,
    /// Train the query encoder.
    Train,
    /// Retrieve for held-out queries and write a run file.
    Search {
        /// Use the initial encoder instead of a checkpoint.
        #[arg(long)]
        untrained: bool,
        #[arg(long, conflicts_with = "untrained")]
        checkpoint: Option<PathBuf>,
        /// Run name (default: trained or untrained).
        #[arg(long)]
        name: Option<String>,
        /// Query text (default: from the configuration).
        #[arg(long, value_enum)]
        query: Option<QueryArg>,
    },
    /// Evaluate run files side by side.
    Eval {
        /// Run name or path; repeatable. Default: every run in the work directory.
        #[arg(long = "run")]
        runs: Vec<String>,
    },
    /// Emit analysis tables.
    Analyze {
        #[arg(value_enum)]
        kind: AnalyzeKind,
        #[arg(long = "run")]
        runs: Vec<String>,
        /// Seeds for the ablation table (default: from the configuration).
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Export query and passage embeddings as text.
    ExportEmbeddings {
        #[arg(long, value_delimiter = ',')]
        ids: Vec<String>,
        #[arg(long)]
        all: bool,
        #[arg(long)]
        untrained: bool,
        #[arg(long, conflicts_with = "untrained")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every stage from ingest to evaluation.
    Pipeline,
}

fn load_config(cli: &Cli) -> CliResult<PipelineConfig> {
    let cfg = match &cli.config {
        Some(p) if !p.exists() => return Err(histdr::Error::MissingArtifact(p.display().to_string()).into()),
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    Ok(match cli.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(j) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(j.max(1))
            .build_global()
            .map_err(|e| histdr::Error::Config(format!("--jobs: {e}")))?;
    }
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::Generate { out, spec } => {
            let spec: SyntheticSpec = match spec {
                Some(p) => {
                    let text = std::fs::read_to_string(p).map_err(|e| CliError::io(format!("reading {}", p.display()), e))?;
                    toml::from_str(&text).map_err(|e| histdr::Error::Config(format!("{}: {e}", p.display())))?
                }
                None => SyntheticSpec::default(),
            };
            let data = generate_synthetic(&spec, cli.seed.unwrap_or(0))?;
            data.write_to(out)?;
            println!(
                "wrote {} passages and {} sessions to {}",
                data.collection.len(),
                data.sessions.len(),
                out.display()
            );
            return Ok(());
        }
        Command::ShowConfig => {
            print!("{}", cfg.to_toml_string());
            return Ok(());
        }
        _ => {}
    }

    let work = WorkDir::open(&cfg.paths.work_dir, cli.force)?;
    let mut ctx = Ctx { cfg, work };
    match cli.command {
        Command::Generate { .. } | Command::ShowConfig => unreachable!(),
        Command::Ingest => commands::ingest(&mut ctx),
        Command::Embed => commands::embed(&mut ctx),
        Command::Index => commands::index(&mut ctx),
        Command::Prj => commands::prj(&mut ctx),
        Command::Reformulate => commands::reformulate(&mut ctx),
        Command::Mine => commands::mine(&mut ctx),
        Command::Train => commands::train_cmd(&mut ctx),
        Command::Search {
            untrained,
            checkpoint,
            name,
            query,
        } => commands::search(
            &mut ctx,
            &SearchArgs {
                untrained,
                checkpoint,
                name,
                query: query.map(Into::into),
            },
        ),
        Command::Eval { runs } => commands::eval(&mut ctx, &runs),
        Command::Analyze { kind, runs, seeds } => commands::analyze(&mut ctx, kind, &runs, &seeds),
        Command::ExportEmbeddings {
            ids,
            all,
            untrained,
            checkpoint,
            out,
        } => commands::export_embeddings(
            &mut ctx,
            &ExportArgs {
                ids,
                all,
                untrained,
                checkpoint,
                out,
            },
        ),
        Command::Pipeline => commands::pipeline(&mut ctx),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // Usage errors count as configuration errors; help and version succeed.
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

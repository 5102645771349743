use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use reagan::experiment::{load_report, render_report, run_experiment, ExperimentSpec, ReportFormat, Variant};
use reagan::graph::load_graph;
use reagan::llm::BackendKind;
use reagan::memory::PromptStrategy;
use reagan::retrieval::{embed_graph, write_sidecar};

#[derive(Parser)]
#[command(name = "reagan", version, about = "Node-as-agent graph reasoning with a frozen LLM")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment grid from a TOML config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Restrict the grid to one variant.
        #[arg(long)]
        variant: Option<Variant>,
        /// Restrict the grid to one prompt strategy.
        #[arg(long)]
        strategy: Option<PromptStrategy>,
        /// Use seeds 0..n.
        #[arg(long)]
        seeds: Option<u64>,
        #[arg(long)]
        backend: Option<BackendKind>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render the report of a finished run directory.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value = "md")]
        format: ReportFormat,
    },
    /// Precompute node embeddings into an index sidecar.
    Index {
        /// Nodes JSONL followed by edges CSV.
        #[arg(long, num_args = 2, value_names = ["NODES", "EDGES"])]
        dataset: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// TOML config whose `[embedder]` table picks the embedder; hashing by default.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Run { config, variant, strategy, seeds, backend, out } => {
            let mut spec = ExperimentSpec::load(&config)
                .with_context(|| format!("loading {}", config.display()))?;
            if let Some(v) = variant {
                spec.variants = vec![v];
            }
            if let Some(s) = strategy {
                spec.strategies = vec![s];
            }
            if let Some(n) = seeds {
                if n == 0 {
                    bail!("--seeds must be at least 1");
                }
                spec.seeds = (0..n).collect();
            }
            if let Some(b) = backend {
                spec.backend.kind = b;
            }
            if out.is_some() {
                spec.out_dir = out;
            }
            let rows = run_experiment(&spec)?;
            print!("{}", render_report(&rows, ReportFormat::Markdown)?);
            if let Some(dir) = &spec.out_dir {
                eprintln!("artifacts written to {}", dir.display());
            }
        }
        Command::Report { input, format } => {
            let rows = load_report(&input.join("report.json"))?;
            let text = render_report(&rows, format)?;
            let path = input.join(format!("report.{}", format.extension()));
            std::fs::write(&path, &text).with_context(|| format!("writing {}", path.display()))?;
            print!("{text}");
        }
        Command::Index { dataset, out, config } => {
            let graph = load_graph(&dataset[0], &dataset[1])?;
            let embedder_cfg = match config {
                Some(path) => ExperimentSpec::load(&path)?.embedder,
                None => Default::default(),
            };
            let embedder = embedder_cfg.build();
            let embeddings = embed_graph(&graph, embedder.as_ref(), 64, 4)?;
            let ids: Vec<String> = graph.nodes().iter().map(|n| n.external_id.clone()).collect();
            write_sidecar(&out, &ids, &embeddings)?;
            eprintln!("indexed {} nodes (dim {}) into {}", ids.len(), embedder.dim(), out.display());
        }
    }
    Ok(())
}

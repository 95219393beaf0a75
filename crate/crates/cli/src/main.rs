use clap::{Parser, Subcommand};
use sampo_cli::{GlobalOpts, CmdResult};
use sampo_core::Variant;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

/// Preference-optimization lab: corpus generation, training, gradient
/// checks, length audits and plot data.
#[derive(Parser)]
#[command(name = "sampo", version)]
struct Cli {
    /// Overrides the corpus seed (gen), the loss seed (train) or the
    /// instance seed (gradcheck).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Suppress normal output; errors are still printed.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic preference corpus (JSON lines).
    Gen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Warm up, train and evaluate a policy on a corpus.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Overrides the config's loss variant.
        #[arg(long)]
        variant: Option<Variant>,
    },
    /// Compare analytic gradients with finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 500)]
        trials: usize,
    },
    /// Length statistics and predicted reward bias of a corpus.
    Audit {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = sampo_core::types::DEFAULT_BETA)]
        beta: f64,
        /// Assumed mean token log-ratio.
        #[arg(long, default_value_t = 1.0)]
        mean_ratio: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Merge metric CSVs into long-format plot data plus a summary table.
    Report {
        /// Metric or eval CSVs, optionally as LABEL=PATH.
        #[arg(required = true)]
        inputs: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        summary: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let g = GlobalOpts {
        seed: cli.seed,
        threads: cli.threads,
    };
    let mut stdout: Box<dyn Write> = if cli.quiet {
        Box::new(std::io::sink())
    } else {
        Box::new(std::io::stdout())
    };
    let out = &mut *stdout;
    let result: CmdResult = match &cli.command {
        Command::Gen { config, out: path } => sampo_cli::cmd_gen(config, path, &g, out),
        Command::Train {
            config,
            corpus,
            out_dir,
            variant,
        } => sampo_cli::cmd_train(config, corpus, out_dir, *variant, &g, out),
        Command::Gradcheck { trials } => sampo_cli::cmd_gradcheck(*trials, &g, out),
        Command::Audit {
            corpus,
            beta,
            mean_ratio,
            out: path,
        } => sampo_cli::cmd_audit(corpus, *beta, *mean_ratio, path.as_deref(), out),
        Command::Report {
            inputs,
            out: path,
            summary,
        } => sampo_cli::cmd_report(inputs, path, summary.as_deref(), out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}

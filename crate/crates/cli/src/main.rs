use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;
mod error;
mod output;

use config::{Method, RunConfig};
use error::CliError;

/// Measure and reduce social bias in a toy language model at decode time.
#[derive(Debug, Parser)]
#[command(name = "fairdec", version)]
struct Cli {
    /// TOML run configuration. Flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed (overrides the config file and FAIRDEC_SEED).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Maximum worker threads.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    embeddings: Option<PathBuf>,
    /// Corpus file, one sentence per line. Repeatable.
    #[arg(long = "corpus", global = true)]
    corpora: Vec<PathBuf>,
    /// Class set: gender, religion, or a custom name.
    #[arg(long, global = true)]
    classes: Option<String>,
    /// More log output on stderr (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the synthetic toy embeddings and corpus.
    Synth,
    /// Estimate the bias subspace and rank bias-sensitive tokens.
    Subspace {
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        top_n: Option<usize>,
    },
    /// Train the toy language model's encoder.
    TrainLm {
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
    },
    /// Build the labeled context dataset for bias classifiers.
    BuildDataset,
    /// Run iterative nullspace projection on the dataset.
    TrainInlp {
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Complete a prompt, optionally with decode-time debiasing.
    Generate {
        #[arg(long)]
        prompt: String,
        #[arg(long, value_enum)]
        method: Option<Method>,
        /// Mixing weight in [0, 1], or "learned".
        #[arg(long)]
        alpha: Option<String>,
        /// Write one JSON record per generated token here.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        max_length: Option<usize>,
        #[arg(long)]
        top_k: Option<usize>,
    },
    /// Measure local bias, global bias and drift over the benchmark suite.
    Evaluate {
        #[arg(long, value_enum)]
        method: Option<Method>,
        #[arg(long)]
        alpha: Option<String>,
    },
    /// Evaluate every variant at every α of the grid.
    Sweep {
        /// Comma-separated α values.
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f64>>,
        /// Comma-separated variants.
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<String>>,
        #[arg(long)]
        global_samples: Option<usize>,
    },
}

fn apply_global_flags(cli: &Cli, cfg: &mut RunConfig) {
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(d) = &cli.output_dir {
        cfg.paths.output_dir = d.clone();
    }
    if let Some(e) = &cli.embeddings {
        cfg.paths.embeddings = Some(e.clone());
    }
    if !cli.corpora.is_empty() {
        cfg.paths.corpora = cli.corpora.clone();
    }
    if let Some(c) = &cli.classes {
        cfg.classes.name = c.clone();
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    apply_global_flags(&cli, &mut cfg);
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(CliError::Config("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| CliError::Runtime(e.into()))?;
    }
    match cli.command {
        Command::Synth => commands::synth(&cfg),
        Command::Subspace { k, top_n } => {
            if let Some(k) = k {
                cfg.subspace.k = k;
            }
            if let Some(n) = top_n {
                cfg.subspace.top_n = n;
            }
            commands::subspace(&cfg)
        }
        Command::TrainLm {
            epochs,
            learning_rate,
        } => {
            if let Some(e) = epochs {
                cfg.lm.epochs = e;
            }
            if let Some(lr) = learning_rate {
                cfg.lm.learning_rate = lr;
            }
            commands::train_lm(&cfg)
        }
        Command::BuildDataset => commands::build_dataset(&cfg),
        Command::TrainInlp { iterations } => {
            if let Some(i) = iterations {
                cfg.inlp.iterations = i;
            }
            commands::train_inlp(&cfg)
        }
        Command::Generate {
            prompt,
            method,
            alpha,
            trace,
            max_length,
            top_k,
        } => {
            if let Some(m) = method {
                cfg.debias.method = m;
            }
            if let Some(a) = alpha {
                cfg.debias.alpha = a;
            }
            if let Some(n) = max_length {
                cfg.generation.max_length = n;
            }
            if let Some(k) = top_k {
                cfg.generation.top_k = k;
            }
            commands::generate(&cfg, &prompt, trace.as_deref())
        }
        Command::Evaluate { method, alpha } => {
            if let Some(m) = method {
                cfg.debias.method = m;
            }
            if let Some(a) = alpha {
                cfg.debias.alpha = a;
            }
            commands::evaluate(&cfg)
        }
        Command::Sweep {
            grid,
            variants,
            global_samples,
        } => {
            if let Some(g) = grid {
                cfg.sweep.grid = g;
            }
            if let Some(vs) = variants {
                cfg.sweep.variants = vs
                    .iter()
                    .map(|v| v.trim().parse())
                    .collect::<fairdec::Result<_>>()?;
            }
            if let Some(n) = global_samples {
                cfg.benchmark.global_samples = n;
            }
            commands::sweep(&cfg)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .target(env_logger::Target::Stderr)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

//! Command-line front end: data preparation, concept caches, training,
//! decoding, evaluation and the chat gateway.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error. Failures print one
//! JSON line `{"error": <kind>, "message": <text>}` on stderr.

mod commands;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde_json::json;
use supportmem::{Error, SystemConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Env var naming the default config file.
pub const ENV_CONFIG: &str = "SUPPORTMEM_CONFIG";
/// Env var used for `data.prepared_dir` when the config leaves it unset.
pub const ENV_PREPARED_DIR: &str = "SUPPORTMEM_PREPARED_DIR";
/// Env var for the parent of default run directories (`runs` otherwise).
pub const ENV_RUNS_DIR: &str = "SUPPORTMEM_RUNS_DIR";

#[derive(Debug, Parser)]
#[command(name = "supportmem", version, about = "Strategy memory model for emotional support dialogue")]
pub struct Cli {
    /// JSON config file with one section per module.
    #[arg(long, global = true, env = ENV_CONFIG)]
    pub config: Option<PathBuf>,

    /// Override a config value by dotted key, e.g. `trainer.no_mem=true`. Repeatable; later wins.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load and split the corpus, build samples, emotion labels, vocabulary and concept frequencies.
    Prepare {
        /// ESConv-format JSON file (data.corpus).
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Output directory (data.prepared_dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Commonsense graph utilities.
    Concepts {
        #[command(subcommand)]
        action: ConceptsAction,
    },
    /// Train a model; writes the resolved config, metrics and checkpoints to the run directory.
    Train {
        #[arg(long)]
        run: Option<PathBuf>,
        /// One of no_strategy_loss, no_pattern_loss, no_mem, no_emo, no_kg.
        #[arg(long)]
        ablation: Option<String>,
        /// Continue from the run's last checkpoint when it exists.
        #[arg(long)]
        resume: bool,
    },
    /// Decode a split with a trained checkpoint and write decoded.json.
    Decode {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Checkpoint name under the run's checkpoints directory.
        #[arg(long, default_value = "best")]
        checkpoint: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print automatic metrics for a run's decoded output or for two aligned text files.
    Evaluate {
        #[arg(long, conflicts_with_all = ["hyp", "refs"])]
        run: Option<PathBuf>,
        /// Hypotheses, one per line.
        #[arg(long, requires = "refs")]
        hyp: Option<PathBuf>,
        /// References, one per line.
        #[arg(long = "ref", requires = "hyp")]
        refs: Option<PathBuf>,
    },
    /// Serve the chat API.
    Serve {
        /// Use this run's config and best checkpoint as defaults.
        #[arg(long)]
        run: Option<PathBuf>,
        /// gateway.checkpoint
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// gateway.prepared_dir
        #[arg(long)]
        prepared: Option<PathBuf>,
        /// gateway.host
        #[arg(long)]
        host: Option<String>,
        /// gateway.port
        #[arg(long)]
        port: Option<u16>,
    },
}

#[derive(Debug, Subcommand)]
pub enum ConceptsAction {
    /// Ingest a tab-separated assertions dump and write a JSON graph cache.
    BuildCache {
        /// Raw assertions file; defaults to concepts.graph_path.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        dump: PathBuf,
        /// concepts.lang
        #[arg(long)]
        lang: Option<String>,
    },
}

/// A failure with its exit-code class.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(msg) => Failure::Usage(msg),
            other => Failure::Runtime(other),
        }
    }
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => EXIT_USAGE,
            Failure::Runtime(_) => EXIT_RUNTIME,
        }
    }

    /// The one-line machine-readable form.
    pub fn to_json_line(&self) -> String {
        let (kind, message) = match self {
            Failure::Usage(m) => ("usage", m.clone()),
            Failure::Runtime(e) => (e.kind(), e.to_string()),
        };
        json!({ "error": kind, "message": message }).to_string()
    }
}

fn path_value(p: &Path) -> String {
    serde_json::Value::String(p.display().to_string()).to_string()
}

/// Config overrides implied by verb flags; applied before `--set` so explicit overrides win.
pub fn flag_overrides(command: &Command) -> Vec<String> {
    let mut out = Vec::new();
    match command {
        Command::Prepare { corpus, out: dir } => {
            if let Some(p) = corpus {
                out.push(format!("data.corpus={}", path_value(p)));
            }
            if let Some(p) = dir {
                out.push(format!("data.prepared_dir={}", path_value(p)));
            }
        }
        Command::Concepts {
            action: ConceptsAction::BuildCache { lang: Some(l), .. },
        } => out.push(format!("concepts.lang={}", serde_json::Value::String(l.clone()))),
        Command::Serve {
            checkpoint,
            prepared,
            host,
            port,
            ..
        } => {
            if let Some(p) = checkpoint {
                out.push(format!("gateway.checkpoint={}", path_value(p)));
            }
            if let Some(p) = prepared {
                out.push(format!("gateway.prepared_dir={}", path_value(p)));
            }
            if let Some(h) = host {
                out.push(format!("gateway.host={}", serde_json::Value::String(h.clone())));
            }
            if let Some(p) = port {
                out.push(format!("gateway.port={p}"));
            }
        }
        _ => {}
    }
    out
}

/// The run directory a command reads its defaults from, if any.
fn run_dir(command: &Command) -> Option<&Path> {
    match command {
        Command::Train { run, .. } | Command::Evaluate { run, .. } | Command::Serve { run, .. } => run.as_deref(),
        Command::Decode { run, .. } => Some(run),
        _ => None,
    }
}

/// Config precedence: `--config`, else the run's saved config, else defaults;
/// then flag overrides, then `--set`.
pub fn resolve_config(cli: &Cli) -> Result<SystemConfig, Failure> {
    let saved = run_dir(&cli.command).map(|r| r.join(commands::RUN_CONFIG)).filter(|p| p.exists());
    let base = cli.config.clone().or(saved);
    let mut overrides = flag_overrides(&cli.command);
    overrides.extend(cli.overrides.iter().cloned());
    let mut cfg = SystemConfig::resolve(base.as_deref(), &overrides)?;
    if cfg.data.prepared_dir.is_none() {
        cfg.data.prepared_dir = std::env::var_os(ENV_PREPARED_DIR).map(PathBuf::from);
    }
    Ok(cfg)
}

pub fn execute(cli: Cli) -> Result<serde_json::Value, Failure> {
    let cfg = resolve_config(&cli)?;
    commands::dispatch(cli.command, cfg)
}

/// Parses `args` (program name first), runs the command and returns the exit code.
/// Results go to stdout as JSON; errors to stderr.
pub fn dispatch<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            if !usage {
                return EXIT_OK;
            }
            let f = Failure::Usage(e.kind().to_string());
            eprintln!("{}", f.to_json_line());
            return EXIT_USAGE;
        }
    };
    match execute(cli) {
        Ok(out) => {
            println!("{out}");
            EXIT_OK
        }
        Err(f) => {
            if matches!(f, Failure::Usage(_)) {
                eprintln!("usage: supportmem [--config FILE] [--set KEY=VALUE]... <prepare|concepts|train|decode|evaluate|serve>");
            }
            eprintln!("{}", f.to_json_line());
            f.exit_code()
        }
    }
}

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mole::data::{SynthKind, SynthParams};
use mole_cli::commands::{
    cmd_eval, cmd_export, cmd_import, cmd_probe, cmd_synth, cmd_train, emit, ImportFormat, CHECKPOINT_FILE,
    CONFIG_FILE, EMBEDDINGS_FILE, PROBE_FILE,
};
use mole_cli::config::{assign, merge};
use mole_cli::{load, CliError, CliResult, Overrides, RunConfig};

/// Module-wise training by mutual information maximization.
///
/// Settings come from defaults, then the config file, then flags
/// (`--set`, then `--seed`/`--out`/`--threads`). Relative dataset paths
/// resolve against `data_root`, which defaults to $MOLE_DATA_DIR, then `data`.
#[derive(Parser)]
#[command(name = "mole", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; results are identical for any value.
    #[arg(long)]
    threads: Option<usize>,
    /// Override one config entry, e.g. `--set train.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Clone)]
struct Target {
    /// Run directory; supplies the checkpoint and config defaults.
    #[arg(long)]
    run: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Defaults to `test`; for probe, to the config's `probe.split`.
    #[arg(long)]
    split: Option<String>,
}

impl Target {
    fn split(&self) -> &str {
        self.split.as_deref().unwrap_or("test")
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train and write a run directory.
    Train {
        #[command(flatten)]
        common: Common,
        /// Run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the accuracy of a checkpoint on one split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        target: Target,
    },
    /// Information-plane estimates per layer and the processing-inequality check.
    Probe {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        target: Target,
        /// Samples drawn from the split.
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        tolerance: Option<f64>,
        /// Output file; defaults to probe.jsonl beside the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-layer representations with their two principal components.
    ExportEmbeddings {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        target: Target,
        /// Output file; defaults to embeddings.tsv beside the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Convert an upstream dataset layout into a container.
    Import {
        format: ImportFormat,
        /// Directory holding the source files.
        #[arg(long)]
        input: PathBuf,
        /// Source file name prefix (`Mutagenicity`, `cora`).
        #[arg(long)]
        prefix: String,
        /// Output file (tu-graph) or directory (planetoid-like).
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic dataset and write it in its container.
    Synth {
        #[arg(long)]
        kind: SynthKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Generator parameter, e.g. `--param samples=500`.
        #[arg(long = "param", value_name = "KEY=VALUE")]
        params: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn config_for(common: &Common, run: Option<&Path>, out: Option<PathBuf>) -> CliResult<RunConfig> {
    let path = common.config.clone().or_else(|| run.map(|r| r.join(CONFIG_FILE)));
    let overrides = Overrides {
        seed: common.seed,
        out,
        threads: common.threads,
        set: common.set.clone(),
    };
    load(path.as_deref(), &overrides)
}

fn checkpoint_of(target: &Target) -> CliResult<PathBuf> {
    match (&target.checkpoint, &target.run) {
        (Some(c), _) => Ok(c.clone()),
        (None, Some(r)) => Ok(r.join(CHECKPOINT_FILE)),
        (None, None) => Err(CliError::usage("give --checkpoint or --run")),
    }
}

fn beside(checkpoint: &Path, name: &str) -> PathBuf {
    checkpoint.parent().unwrap_or(Path::new(".")).join(name)
}

fn synth_params(kind: SynthKind, assignments: &[String]) -> CliResult<SynthParams> {
    let toml::Value::Table(mut table) = toml::Value::try_from(SynthParams::for_kind(kind)).expect("params serialize")
    else {
        unreachable!("params serialize to a table")
    };
    let mut given = toml::Table::new();
    for a in assignments {
        assign(&mut given, a)?;
    }
    merge(&mut table, given);
    serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
        let key = format!("param.{}", e.path());
        CliError::config(key, e.into_inner().to_string().lines().next().unwrap_or_default().to_string())
    })
}

fn run(cli: Cli) -> CliResult<()> {
    let stdout = &mut std::io::stdout().lock();
    match cli.command {
        Command::Train { common, out } => {
            let cfg = config_for(&common, None, out)?;
            emit(stdout, &cmd_train(&cfg)?)
        }
        Command::Eval { common, target } => {
            let cfg = config_for(&common, target.run.as_deref(), None)?;
            emit(stdout, &cmd_eval(&checkpoint_of(&target)?, &cfg, target.split())?)
        }
        Command::Probe {
            common,
            target,
            samples,
            tolerance,
            out,
        } => {
            let mut cfg = config_for(&common, target.run.as_deref(), None)?;
            if let Some(s) = &target.split {
                cfg.probe.split = s.clone();
            }
            if let Some(s) = samples {
                cfg.probe.samples = s;
            }
            if let Some(t) = tolerance {
                cfg.probe.tolerance_bits = t;
            }
            let cfg = cfg.resolve()?;
            let ckpt = checkpoint_of(&target)?;
            let out = out.unwrap_or_else(|| beside(&ckpt, PROBE_FILE));
            let dpi = cmd_probe(&ckpt, &cfg, &out)?;
            if dpi.low_n {
                eprintln!(
                    "warning: low-n probe: {} samples; estimates below {} samples are unreliable",
                    dpi.samples,
                    mole_cli::commands::LOW_N_THRESHOLD
                );
            }
            emit(stdout, &dpi)
        }
        Command::ExportEmbeddings { common, target, out } => {
            let cfg = config_for(&common, target.run.as_deref(), None)?;
            let ckpt = checkpoint_of(&target)?;
            let out = out.unwrap_or_else(|| beside(&ckpt, EMBEDDINGS_FILE));
            emit(stdout, &cmd_export(&ckpt, &cfg, target.split(), &out)?)
        }
        Command::Import {
            format,
            input,
            prefix,
            out,
        } => emit(stdout, &cmd_import(format, &input, &prefix, &out)?),
        Command::Synth {
            kind,
            seed,
            params,
            out,
        } => {
            let params = synth_params(kind, &params)?;
            emit(stdout, &cmd_synth(kind, &params, seed, &out)?)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let _ = std::io::stdout().flush();
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

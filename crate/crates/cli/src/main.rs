mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use commands::AblationMode;
use config::{RunConfig, Schema, Section};

const THREADS_ENV: &str = "DREX_THREADS";

#[derive(Parser, Debug)]
#[command(
    name = "drex",
    version,
    about = "Train and analyse two-branch image complexity regressors"
)]
struct Cli {
    /// Worker threads (default: DREX_THREADS, then the number of cores).
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct ConfigArg {
    /// JSON object of dotted config keys; flags take precedence.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CheckpointArgs {
    /// Checkpoint file, or a training output directory.
    #[arg(long, value_name = "PATH")]
    ckpt: Option<PathBuf>,
    /// Feature file to evaluate on.
    #[arg(long, value_name = "FILE")]
    features: Option<PathBuf>,
    /// Use the raw weights instead of the averaged ones.
    #[arg(long)]
    no_ema_eval: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write a checkpoint.
    Train {
        #[arg(long, value_name = "FILE")]
        features: Option<PathBuf>,
        /// Held-out set scored after training.
        #[arg(long, value_name = "FILE")]
        val: Option<PathBuf>,
        /// Output directory.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Score a feature file with a checkpoint.
    Eval {
        #[command(flatten)]
        ckpt: CheckpointArgs,
        /// Output directory, or a `.csv` path for the predictions.
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Zero branches, DINO dimensions or ResNet blocks and test the change in correlation.
    Ablate {
        #[command(flatten)]
        ckpt: CheckpointArgs,
        #[arg(long, value_enum)]
        mode: Option<AblationMode>,
        /// Output directory, or a `.csv` path.
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Permutations per test.
        #[arg(long, value_name = "N")]
        n_perm: Option<usize>,
        /// False discovery rate.
        #[arg(long)]
        alpha: Option<f64>,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Gradient-times-activation importance of the DINO dimensions.
    Importance {
        #[command(flatten)]
        ckpt: CheckpointArgs,
        /// Output directory, or a `.csv` path.
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Check a feature file against the format rules.
    ValidateFeatures {
        #[arg(value_name = "FILE", conflicts_with = "features")]
        path: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        features: Option<PathBuf>,
    },
    /// Summarize a checkpoint, with metrics when features are given.
    Report {
        #[command(flatten)]
        ckpt: CheckpointArgs,
        /// Output directory, or a `.txt` path.
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Write a synthetic train/test pair of feature files.
    Synth {
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        config: ConfigArg,
    },
}

const TRAIN: Schema = Schema {
    command: "train",
    top: &["features", "val", "out", "seed"],
    sections: &[Section::Model, Section::Train],
};
const EVAL: Schema = Schema {
    command: "eval",
    top: &["ckpt", "features", "out"],
    sections: &[Section::Model, Section::Train],
};
const ABLATE: Schema = Schema {
    command: "ablate",
    top: &["ckpt", "features", "out", "seed", "mode"],
    sections: &[Section::Model, Section::Train, Section::Analysis],
};
const IMPORTANCE: Schema = Schema {
    command: "importance",
    top: &["ckpt", "features", "out", "seed"],
    sections: &[Section::Model, Section::Train, Section::Analysis],
};
const REPORT: Schema = Schema {
    command: "report",
    top: &["ckpt", "features", "out"],
    sections: &[Section::Model, Section::Train],
};
const SYNTH: Schema = Schema {
    command: "synth",
    top: &["out", "seed"],
    sections: &[Section::Synth],
};

fn path_value(p: Option<PathBuf>) -> Result<Option<Value>> {
    p.map(|p| {
        p.into_os_string()
            .into_string()
            .map(Value::from)
            .map_err(|p| anyhow!("path {p:?} is not valid UTF-8"))
    })
    .transpose()
}

/// Defaults, then the config file, then flags.
fn resolve(
    schema: &Schema,
    config: ConfigArg,
    flags: Vec<(&str, Option<Value>)>,
) -> Result<RunConfig> {
    let mut cfg = RunConfig::new(schema);
    if let Some(path) = config.config {
        cfg.merge_file(&path)?;
    }
    for (key, value) in flags {
        cfg.set_if(key, value)?;
    }
    Ok(cfg)
}

fn checkpoint_flags(a: CheckpointArgs) -> Result<Vec<(&'static str, Option<Value>)>> {
    Ok(vec![
        ("ckpt", path_value(a.ckpt)?),
        ("features", path_value(a.features)?),
        (
            "train.eval_with_ema",
            a.no_ema_eval.then_some(Value::Bool(false)),
        ),
    ])
}

fn configure_threads(flag: Option<usize>) -> Result<()> {
    let threads = match flag {
        Some(n) => Some(n),
        None => match std::env::var(THREADS_ENV) {
            Ok(v) => Some(
                v.trim()
                    .parse()
                    .with_context(|| format!("{THREADS_ENV}={v:?} is not a thread count"))?,
            ),
            Err(_) => None,
        },
    };
    if let Some(n) = threads {
        if n == 0 {
            bail!("thread count must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    configure_threads(cli.threads)?;
    match cli.command {
        Command::Train {
            features,
            val,
            out,
            seed,
            config,
        } => {
            let cfg = resolve(
                &TRAIN,
                config,
                vec![
                    ("features", path_value(features)?),
                    ("val", path_value(val)?),
                    ("out", path_value(out)?),
                    ("seed", seed.map(Value::from)),
                ],
            )?;
            commands::train_cmd(cfg)?;
        }
        Command::Eval { ckpt, out, config } => {
            let mut flags = checkpoint_flags(ckpt)?;
            flags.push(("out", path_value(out)?));
            commands::eval_cmd(resolve(&EVAL, config, flags)?)?;
        }
        Command::Ablate {
            ckpt,
            mode,
            out,
            seed,
            n_perm,
            alpha,
            config,
        } => {
            let mut flags = checkpoint_flags(ckpt)?;
            flags.extend([
                ("mode", mode.map(serde_json::to_value).transpose()?),
                ("out", path_value(out)?),
                ("seed", seed.map(Value::from)),
                ("analysis.n_perm", n_perm.map(Value::from)),
                ("analysis.alpha", alpha.map(Value::from)),
            ]);
            commands::ablate_cmd(resolve(&ABLATE, config, flags)?)?;
        }
        Command::Importance {
            ckpt,
            out,
            seed,
            config,
        } => {
            let mut flags = checkpoint_flags(ckpt)?;
            flags.extend([("out", path_value(out)?), ("seed", seed.map(Value::from))]);
            commands::importance_cmd(resolve(&IMPORTANCE, config, flags)?)?;
        }
        Command::Report { ckpt, out, config } => {
            let mut flags = checkpoint_flags(ckpt)?;
            flags.push(("out", path_value(out)?));
            commands::report_cmd(resolve(&REPORT, config, flags)?)?;
        }
        Command::Synth { out, seed, config } => {
            let flags = vec![("out", path_value(out)?), ("seed", seed.map(Value::from))];
            commands::synth_cmd(resolve(&SYNTH, config, flags)?)?;
        }
        Command::ValidateFeatures { path, features } => {
            let path = path
                .or(features)
                .ok_or_else(|| anyhow!("`validate-features` needs a feature file"))?;
            return commands::validate_cmd(&path);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

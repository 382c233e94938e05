//! Pipeline driver: pretrain, collect, train-decoder, unlearn, eval, sweep,
//! audit-prop1. Every command is deterministic for a fixed config and seed
//! offset; artifacts land in the output directory under conventional names.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use r2f_core::config::{default_config_text, RunConfig};
use r2f_core::pipeline;
use r2f_core::unlearn::UnlearnMethod;

#[derive(Parser)]
#[command(name = "r2f", about = "Recover-to-forget unlearning laboratory", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat key-value config file; defaults apply for missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Added to every stage seed in the config.
    #[arg(long, default_value_t = 0)]
    seed_offset: u64,
    /// Output directory for checkpoints and reports.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

impl Common {
    fn load(&self) -> r2f_core::Result<RunConfig> {
        let cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        Ok(cfg.with_seed_offset(self.seed_offset))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the proxy and target models to the accuracy gate.
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Collect (adapter gradient, full gradient) pairs on the proxy.
    Collect {
        #[command(flatten)]
        common: Common,
    },
    /// Train the gradient decoder on collected pairs.
    TrainDecoder {
        #[command(flatten)]
        common: Common,
    },
    /// Apply one unlearning run and write the checkpoint plus manifest.
    Unlearn {
        #[command(flatten)]
        common: Common,
        /// r2f | full_grad | lora_single | lora_multi | grad_ascent
        #[arg(long)]
        method: Option<String>,
    },
    /// Evaluate forgetting/utility metrics between two checkpoints.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        before: PathBuf,
        #[arg(long)]
        after: PathBuf,
        /// Report name suffix.
        #[arg(long, default_value = "run")]
        tag: String,
    },
    /// Sweep one axis (rank | views | eta) across seeds and emit CSVs.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        axis: String,
    },
    /// Audit the cross-model gradient transfer bound.
    AuditProp1 {
        #[command(flatten)]
        common: Common,
    },
    /// Print the default configuration with documentation comments.
    DefaultConfig,
}

fn run() -> r2f_core::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Pretrain { common } => {
            let cfg = common.load()?;
            let (proxy, target) = pipeline::cmd_pretrain(&cfg, &common.out)?;
            eprintln!("wrote {} and {}", proxy.display(), target.display());
        }
        Command::Collect { common } => {
            let cfg = common.load()?;
            let path = pipeline::cmd_collect(&cfg, &common.out)?;
            eprintln!("wrote {}", path.display());
        }
        Command::TrainDecoder { common } => {
            let cfg = common.load()?;
            let (dec, curve) = pipeline::cmd_train_decoder(&cfg, &common.out)?;
            eprintln!("wrote {} and {}", dec.display(), curve.display());
        }
        Command::Unlearn { common, method } => {
            let cfg = common.load()?;
            let method = match method {
                Some(m) => UnlearnMethod::from_str(&m)?,
                None => cfg.unlearn.method,
            };
            let (ckpt, manifest) = pipeline::cmd_unlearn(&cfg, method, &common.out)?;
            eprintln!("wrote {} and {}", ckpt.display(), manifest.display());
        }
        Command::Eval { common, before, after, tag } => {
            let cfg = common.load()?;
            let (report, detail) = pipeline::cmd_eval(&cfg, &before, &after, &tag, &common.out)?;
            eprintln!("wrote {} and {}", report.display(), detail.display());
        }
        Command::Sweep { common, axis } => {
            let cfg = common.load()?;
            let (csv, detail) = pipeline::cmd_sweep(&cfg, &axis, &common.out)?;
            eprintln!("wrote {} and {}", csv.display(), detail.display());
        }
        Command::AuditProp1 { common } => {
            let cfg = common.load()?;
            let path = pipeline::cmd_audit_prop1(&cfg, &common.out)?;
            eprintln!("wrote {}", path.display());
        }
        Command::DefaultConfig => {
            print!("{}", default_config_text());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

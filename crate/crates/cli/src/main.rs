use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ctrg::config::RunConfig;
use ctrg::harness;
use ctrg::synth::Split;
use ctrg::{Error, Result};

#[derive(Parser)]
#[command(name = "ctrg", version, about = "Structure-observation pretraining and report generation on synthetic CT")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config field by dotted path, e.g. `--set pretrain.alpha=0.3`.
    #[arg(long = "set", value_name = "PATH=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured synthetic corpus to a directory.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage 1: structure-observation contrastive pretraining.
    Pretrain,
    /// Stage 2: train the report decoder on the frozen stage-1 encoder.
    TrainDecoder,
    /// Generate reports for a split.
    Generate {
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Generate and score reports for a split.
    Eval {
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Report-to-volume retrieval recall from the stage-1 checkpoint.
    Retrieve {
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Run an ablation grid: `components`, `alpha` or `k`.
    Ablate {
        #[arg(long, default_value = "components")]
        grid: String,
        #[arg(long, default_value = "test")]
        split: Split,
    },
}

fn parse_overrides(raw: &[String]) -> Result<Vec<(String, String)>> {
    raw.iter()
        .map(|s| {
            s.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::Config(format!("override {s:?} is not PATH=VALUE")))
        })
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    let overrides = parse_overrides(&cli.common.overrides)?;
    let cfg = RunConfig::load(cli.common.config.as_deref(), &overrides)?;
    match cli.command {
        Command::GenData { out } => {
            let path = harness::cmd_gen_data(&cfg, &out)?;
            println!("{}", path.display());
        }
        Command::Pretrain => {
            let m = harness::cmd_pretrain(&cfg)?;
            println!("stage 1 checkpoint {} ({})", m.checkpoint_sha256, harness::stage1_dir(&cfg).display());
        }
        Command::TrainDecoder => {
            let m = harness::cmd_train_decoder(&cfg)?;
            println!("stage 2 checkpoint {} ({})", m.checkpoint_sha256, harness::stage2_dir(&cfg).display());
        }
        Command::Generate { split } => {
            let path = harness::cmd_generate(&cfg, split)?;
            println!("{}", path.display());
        }
        Command::Eval { split } => {
            let r = harness::cmd_eval(&cfg, split)?;
            println!(
                "BLEU-1 {:.4}  BLEU-4 {:.4}  ROUGE-L {:.4}  CE P {:.4} R {:.4} F1 {:.4}  ({} cases)",
                r.bleu1, r.bleu4, r.rouge_l, r.ce_precision, r.ce_recall, r.ce_f1, r.cases
            );
        }
        Command::Retrieve { split } => {
            let r = harness::cmd_retrieve(&cfg, split)?;
            for (k, v) in r.ks.iter().zip(&r.values) {
                println!("recall@{k} {v:.4}");
            }
        }
        Command::Ablate { grid, split } => {
            for row in harness::cmd_ablate(&cfg, &grid, split)? {
                println!(
                    "{:<10} CE F1 {:.4}  BLEU-4 {:.4}  ROUGE-L {:.4}  recall {:?}",
                    row.variant, row.metrics.ce_f1, row.metrics.bleu4, row.metrics.rouge_l, row.recall.values
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

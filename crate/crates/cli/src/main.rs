use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use mkgr_core::experiment::{self, CommandOutput, RunConfig};

/// Structure-guided multimodal knowledge-graph reasoning.
#[derive(Parser, Debug)]
#[command(name = "mkgr", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic multimodal KG and write it as dataset files.
    Synth(Common),
    /// Train the structure encoder and export the structural table.
    TrainStructure(Common),
    /// Entity-description pretraining; writes a checkpoint.
    Pretrain(Common),
    /// Masked-tail finetuning, optionally from a checkpoint.
    Finetune(Common),
    /// Rank all entities for every evaluation query of a checkpoint.
    Evaluate(Common),
    /// Train and evaluate the fusion ablation variants.
    Ablate(Common),
    /// One-at-a-time sweep of the fusion weights.
    Sweep(Common),
    /// Report trainable and frozen parameter counts per module.
    CountParams(Common),
}

#[derive(Args, Debug)]
struct Common {
    /// TOML run configuration.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override any configuration key, e.g. `--set fusion.lambda_s_ts=0.1`.
    #[arg(short = 's', long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(short, long)]
    output_dir: Option<PathBuf>,
    /// Dataset directory; the synthetic generator is used when absent.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    structure_table: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// transe, distmult or hake.
    #[arg(long)]
    structure_kind: Option<String>,
    #[arg(long)]
    lambda_s_ts: Option<f64>,
    #[arg(long)]
    lambda_s_vs: Option<f64>,
    #[arg(long)]
    lambda_a_ts: Option<f64>,
    #[arg(long)]
    lambda_a_vs: Option<f64>,
    #[arg(long)]
    ws_ts: Option<bool>,
    #[arg(long)]
    ws_vs: Option<bool>,
    #[arg(long)]
    ac_ts: Option<bool>,
    #[arg(long)]
    ac_vs: Option<bool>,
    /// Turn every fusion pathway off.
    #[arg(long)]
    no_fusion: bool,
}

fn quoted(p: &PathBuf) -> String {
    let s = p.to_string_lossy();
    format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""))
}

impl Common {
    /// Dedicated flags become overrides applied after `--set`.
    fn overrides(&self) -> Vec<String> {
        let mut out = self.set.clone();
        let mut push = |key: &str, value: Option<String>| {
            if let Some(v) = value {
                out.push(format!("{key}={v}"));
            }
        };
        push("seed", self.seed.map(|v| v.to_string()));
        push("output_dir", self.output_dir.as_ref().map(quoted));
        push("data_dir", self.data_dir.as_ref().map(quoted));
        push("structure_table", self.structure_table.as_ref().map(quoted));
        push("checkpoint", self.checkpoint.as_ref().map(quoted));
        push("structure.kind", self.structure_kind.as_ref().map(|k| format!("\"{}\"", k.to_ascii_lowercase())));
        push("fusion.lambda_s_ts", self.lambda_s_ts.map(|v| format!("{v:?}")));
        push("fusion.lambda_s_vs", self.lambda_s_vs.map(|v| format!("{v:?}")));
        push("fusion.lambda_a_ts", self.lambda_a_ts.map(|v| format!("{v:?}")));
        push("fusion.lambda_a_vs", self.lambda_a_vs.map(|v| format!("{v:?}")));
        push("fusion.ws_ts", self.ws_ts.map(|v| v.to_string()));
        push("fusion.ws_vs", self.ws_vs.map(|v| v.to_string()));
        push("fusion.ac_ts", self.ac_ts.map(|v| v.to_string()));
        push("fusion.ac_vs", self.ac_vs.map(|v| v.to_string()));
        if self.no_fusion {
            for flag in ["ws_ts", "ws_vs", "ac_ts", "ac_vs"] {
                out.push(format!("fusion.{flag}=false"));
            }
        }
        out
    }

    fn load(&self) -> anyhow::Result<RunConfig> {
        RunConfig::load(self.config.as_deref(), &self.overrides()).context("loading configuration")
    }
}

fn run(cli: Cli) -> anyhow::Result<CommandOutput> {
    let out = match &cli.command {
        Command::Synth(c) => experiment::cmd_synth(&c.load()?)?,
        Command::TrainStructure(c) => experiment::cmd_train_structure(&c.load()?)?,
        Command::Pretrain(c) => experiment::cmd_pretrain(&c.load()?)?,
        Command::Finetune(c) => experiment::cmd_finetune(&c.load()?)?,
        Command::Evaluate(c) => experiment::cmd_evaluate(&c.load()?)?,
        Command::Ablate(c) => experiment::cmd_ablate(&c.load()?)?.output,
        Command::Sweep(c) => experiment::cmd_sweep(&c.load()?)?.output,
        Command::CountParams(c) => experiment::cmd_count_params(&c.load()?)?,
    };
    Ok(out)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(out) => {
            print!("{}", out.summary);
            if !out.summary.ends_with('\n') {
                println!();
            }
            println!("wrote {} files to {}", out.files.len(), out.dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

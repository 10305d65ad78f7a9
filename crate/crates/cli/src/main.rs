use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use flsc_core::config::ExperimentConfig;
use flsc_core::harness::{self, SweepAxis};
use flsc_core::hvt::{Preset, Task};
use flsc_core::CoreError;

#[derive(Parser, Debug)]
#[command(name = "flsc", version, about = "Federated semantic communication over simulated MIMO links")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pretrain the CSI refiner at the configured SNR.
    PretrainCsi(Common),
    /// Run federated training and write rounds.csv, checkpoints and a manifest.
    Train(Common),
    /// Evaluate a checkpoint and write metrics.json.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train and evaluate once per value of one axis; writes sweep.csv.
    Sweep {
        #[arg(long, value_enum)]
        axis: AxisArg,
        /// Comma-separated axis values, echoed verbatim in the CSV.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AxisArg {
    Snr,
    Bandwidth,
    Overlap,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TaskArg {
    Classify,
    Reconstruct,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PresetArg {
    Desk,
    Paper,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON configuration file; flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
    #[arg(long, value_enum)]
    task: Option<TaskArg>,
    #[arg(long, allow_negative_numbers = true)]
    snr_db: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    bandwidth_ratio: Option<f64>,
    #[arg(long)]
    devices: Option<usize>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    local_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, value_enum)]
    preset: Option<PresetArg>,
    #[arg(long)]
    refiner_steps: Option<usize>,
    #[arg(long)]
    refiner_checkpoint: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) if !p.exists() => {
                return Err(CoreError::MissingPrerequisite(format!("config file {}", p.display())).into())
            }
            Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => ExperimentConfig::default(),
        };
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = &self.out {
            cfg.out_dir = v.clone();
        }
        if let Some(v) = self.task {
            cfg.task = match v {
                TaskArg::Classify => Task::Classify,
                TaskArg::Reconstruct => Task::Reconstruct,
            };
        }
        if let Some(v) = self.snr_db {
            cfg.snr_db = v;
        }
        if let Some(v) = self.delta {
            cfg.delta = v;
        }
        if let Some(v) = self.bandwidth_ratio {
            cfg.bandwidth_ratio = v;
        }
        if let Some(v) = self.devices {
            cfg.devices = v;
        }
        if let Some(v) = self.rounds {
            cfg.rounds = Some(v);
        }
        if let Some(v) = self.local_epochs {
            cfg.local_epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.preset {
            cfg.preset = match v {
                PresetArg::Desk => Preset::Desk,
                PresetArg::Paper => Preset::Paper,
            };
        }
        if let Some(v) = self.refiner_steps {
            cfg.refiner_steps = v;
        }
        if let Some(v) = &self.refiner_checkpoint {
            cfg.refiner_checkpoint = Some(v.clone());
        }
        Ok(cfg)
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::PretrainCsi(common) => {
            let cfg = common.resolve()?;
            let s = harness::cmd_pretrain_csi(&cfg, common.force)?;
            println!(
                "{}: NMSE LS {:.5}, refined {:.5} (ratio {:.3})",
                s.checkpoint.display(),
                s.report.nmse_ls,
                s.report.nmse_refined,
                s.report.ratio
            );
        }
        Command::Train(common) => {
            let cfg = common.resolve()?;
            let s = harness::cmd_train(&cfg, common.force)?;
            if let Some(last) = s.records.last() {
                println!("round {}: {} {:.4}", last.round, last.metric_name, last.metric_value);
            }
            println!("wrote {} and {}", s.rounds_csv.display(), s.checkpoint.display());
        }
        Command::Eval { checkpoint, common } => {
            let cfg = common.resolve()?;
            let report = harness::cmd_eval(&checkpoint, &cfg)?;
            println!("{}", serde_json::to_string(&report)?);
        }
        Command::Sweep { axis, values, common } => {
            let cfg = common.resolve()?;
            let axis = match axis {
                AxisArg::Snr => SweepAxis::Snr,
                AxisArg::Bandwidth => SweepAxis::Bandwidth,
                AxisArg::Overlap => SweepAxis::Overlap,
            };
            let rows = harness::cmd_sweep(axis, &values, &cfg, common.force)?;
            println!("wrote {} rows to {}", rows.len(), cfg.out_dir.join(harness::SWEEP_FILE).display());
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<CoreError>() {
        Some(CoreError::Validation(_) | CoreError::Invalid { .. } | CoreError::Exists(_) | CoreError::Json(_)) => 2,
        Some(CoreError::MissingPrerequisite(_)) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

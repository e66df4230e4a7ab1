//! `clickadapt` command-line tool.

use std::fs::File;
use std::io::BufWriter;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use clickadapt::adapt::{train_base, Mode, TrainConfig};
use clickadapt::eval::{evaluate_sequence_logged, load_dataset, save_dataset, save_report, synth_dataset, write_curve_csv, SynthSpec};
use clickadapt::{AdaptConfig, Checkpoint};
use clickadapt_server::{AppState, ServerConfig};

/// JSON configuration: the adaptation fields at top level, training options
/// under `"train"`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
struct FileConfig {
    #[serde(flatten)]
    adapt: AdaptConfig,
    train: TrainConfig,
}

fn read_config(path: Option<&Path>) -> Result<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let cfg: FileConfig = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    cfg.adapt.validate()?;
    Ok(cfg)
}

#[derive(Parser)]
#[command(name = "clickadapt", version, about = "Interactive segmentation with test-time adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a base model on an images/ + masks/ directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Evaluate a checkpoint with the simulated user.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// frozen, ia, sa or ia+sa
        #[arg(long, default_value = "frozen")]
        mode: Mode,
        #[arg(long)]
        target_iou: Option<f64>,
        /// Number of seeds; seeds 0..K are used.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Optional CSV of the mean IoU@k curve.
        #[arg(long)]
        curve_csv: Option<PathBuf>,
        /// Optional JSON-lines adaptation log.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Remove the correction term from the adaptation loss.
        #[arg(long)]
        ablate_corrections: bool,
    },
    /// Write a synthetic dataset.
    Synth {
        #[arg(long)]
        spec: SynthSpec,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// Serve the HTTP session API.
    Serve {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Sessions default to no per-click adaptation.
        #[arg(long)]
        no_ia: bool,
        /// Sessions default to no sequence adaptation.
        #[arg(long)]
        no_sa: bool,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Train { data, out, seed, config } => {
            let cfg = read_config(config.as_deref())?;
            let dataset = load_dataset(&data, cfg.train.arch.input_size)?;
            log::info!("training on {} images from {}", dataset.len(), data.display());
            let trained = train_base(&dataset, &cfg.train, seed)?;
            Checkpoint::new(trained.net, Some(trained.importance)).save(&out)?;
            println!("{}", serde_json::to_string(&serde_json::json!({ "epoch_losses": trained.epoch_losses }))?);
        }
        Command::Eval {
            data,
            ckpt,
            mode,
            target_iou,
            seeds,
            report,
            config,
            curve_csv,
            log,
            ablate_corrections,
        } => {
            if seeds == 0 {
                bail!("--seeds must be at least 1");
            }
            let mut cfg = read_config(config.as_deref())?.adapt;
            if let Some(q) = target_iou {
                cfg.target_iou = q;
            }
            cfg.ablate_corrections |= ablate_corrections;
            let ckpt = Checkpoint::load(&ckpt)?;
            let dataset = load_dataset(&data, ckpt.net.arch.input_size)?;
            let seeds: Vec<u64> = (0..seeds).collect();
            let (result, adapt_log) = evaluate_sequence_logged(&dataset, &ckpt, mode, &cfg, &seeds)?;
            save_report(&result, &report)?;
            if let Some(path) = curve_csv {
                write_curve_csv(std::slice::from_ref(&result), BufWriter::new(File::create(path)?))?;
            }
            if let Some(path) = log {
                adapt_log.write_jsonl(BufWriter::new(File::create(path)?))?;
            }
            println!(
                "{}: clicks@{:.0} = {:.2} ± {:.2} over {} images, {} seeds",
                mode.as_str(),
                100.0 * cfg.target_iou,
                result.mean_clicks,
                result.std_clicks,
                result.images,
                result.seeds.len()
            );
        }
        Command::Synth { spec, n, seed, out, size } => {
            save_dataset(&synth_dataset(spec, n, size, seed)?, &out)?;
            println!("wrote {n} {spec} images to {}", out.display());
        }
        Command::Serve {
            ckpt,
            port,
            host,
            config,
            no_ia,
            no_sa,
        } => {
            let cfg = read_config(config.as_deref())?;
            let ckpt = Checkpoint::load(&ckpt)?;
            let state = AppState::new(
                &ckpt,
                ServerConfig {
                    adapt: cfg.adapt,
                    default_ia: !no_ia,
                    default_sa: !no_sa,
                    ..ServerConfig::default()
                },
            )?;
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(clickadapt_server::serve(state, SocketAddr::new(host, port)))?;
        }
    }
    Ok(())
}

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use posevid::eval::evaluate;
use posevid::harness::{
    ablate, eval_options, load_checkpoint, load_config, sample_cmd, train, GridConfig, PoseSource, RunConfig,
    THREADS_ENV,
};
use posevid::world::{generate_dataset, Dataset, DatasetConfig};

#[derive(Parser)]
#[command(
    name = "posevid",
    version,
    about = "Pose-conditioned egocentric video diffusion on a synthetic world"
)]
#[command(after_help = format!("Set {THREADS_ENV} to run ablation cells on several threads."))]
struct Cli {
    /// Config file (dataset TOML for gen-data, grid TOML for ablate, run TOML otherwise).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed of the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output location (directory or file, depending on the command).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset.
    GenData,
    /// Train a run (resumes from its checkpoint when present).
    Train,
    /// Generate one clip's future, optionally with another pose source.
    Sample {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        clip: usize,
        /// same, static, clip:<id> or file:<poses.jsonl>
        #[arg(long, default_value = "same")]
        pose_source: String,
    },
    /// Evaluate a checkpoint on the configured split.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and evaluate every cell of a grid, writing a CSV table.
    Ablate,
}

fn run_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let Some(path) = &cli.config else {
        bail!("--config <run.toml> is required")
    };
    let mut cfg = load_config(path)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn checkpoint_or_default(cfg: &RunConfig, given: &Option<PathBuf>) -> PathBuf {
    given.clone().unwrap_or_else(|| cfg.checkpoint_dir())
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match &cli.command {
        Command::GenData => {
            let cfg = match &cli.config {
                Some(p) => {
                    let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                    toml::from_str::<DatasetConfig>(&text).with_context(|| format!("parsing {}", p.display()))?
                }
                None => DatasetConfig::default(),
            };
            let Some(out) = &cli.out else {
                bail!("--out <dir> is required")
            };
            let m = generate_dataset(&cfg, cli.seed.unwrap_or(0), out)?;
            println!("wrote {} clips to {}", m.clips.len(), out.display());
        }
        Command::Train => {
            let mut cfg = run_config(&cli)?;
            if let Some(out) = &cli.out {
                cfg.out_dir = out.clone();
            }
            let ckpt = train(&cfg)?;
            println!("checkpoint {}", ckpt.display());
        }
        Command::Sample {
            checkpoint,
            clip,
            pose_source,
        } => {
            let cfg = run_config(&cli)?;
            let ckpt = checkpoint_or_default(&cfg, checkpoint);
            let source: PoseSource = pose_source.parse()?;
            let out = cli
                .out
                .clone()
                .unwrap_or_else(|| cfg.out_dir.join(format!("sample_{clip}")));
            let frames = sample_cmd(&cfg, &ckpt, *clip, &source, cfg.seed, &out)?;
            println!("wrote {} frames to {}", frames.len(), out.display());
        }
        Command::Eval { checkpoint } => {
            let cfg = run_config(&cli)?;
            let ckpt = checkpoint_or_default(&cfg, checkpoint);
            let (model, _) = load_checkpoint(&ckpt)?;
            let dataset = Dataset::open(&cfg.dataset)?;
            let report = evaluate(
                &model,
                cfg.variant,
                &dataset,
                &eval_options(&cfg, &ckpt.display().to_string()),
            )?;
            let out = cli.out.clone().unwrap_or_else(|| cfg.out_dir.join("eval.json"));
            report.write(&out)?;
            let a = report.aggregate;
            println!(
                "SSIM {:.3}  TransError {:.4}  RotError {:.3}  mIoU {:.2}  Acc% {:.2}  -> {}",
                a.ssim,
                a.trans_error,
                a.rot_error,
                a.miou,
                a.presence_accuracy,
                out.display()
            );
        }
        Command::Ablate => {
            let Some(path) = &cli.config else {
                bail!("--config <grid.toml> is required")
            };
            let mut grid = GridConfig::load(path)?;
            if let Some(s) = cli.seed {
                grid.seeds = vec![s];
            }
            let table = ablate(&grid)?;
            let out = cli
                .out
                .clone()
                .unwrap_or_else(|| grid.base.out_dir.join("ablation.csv"));
            write_file(&out, &table.to_csv())?;
            print!("{}", table.to_csv());
        }
    }
    Ok(())
}

fn write_file(path: &Path, text: &str) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

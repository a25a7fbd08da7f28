mod commands;
mod config;
mod rundir;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use sfa_core::attack::AttackVariant;

use crate::config::{overlay, RunConfig};
use crate::rundir::RunDir;

#[derive(Parser)]
#[command(name = "sfa", version, about = "Spatial-frequency adversarial attacks on a toy object detector")]
struct Cli {
    /// TOML file overlaid on the built-in defaults; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory under which a fresh run directory is created.
    #[arg(long, global = true, env = "SFA_RUN_ROOT", default_value = "runs")]
    run_root: PathBuf,
    /// Use exactly this run directory instead of a generated one.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Worker threads; defaults to the number of cores.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Run everything on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic detection dataset.
    GenData(GenDataArgs),
    /// Train the detector.
    Train(TrainArgs),
    /// Attack every scene of a split and save the adversarial images.
    Attack(AttackCmd),
    /// Clean vs adversarial mAP, stealth metrics and corruption robustness.
    Eval(EvalCmd),
    /// Run every attack variant on the same scenes and tabulate them.
    Ablate(AblateCmd),
    /// Save the wavelet sub-bands and band reconstructions of an image.
    Decompose(DecomposeArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_scenes: Option<usize>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// Training split: directory or annotation file.
    #[arg(long)]
    data: PathBuf,
    /// Validation split scored after every epoch.
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct AttackOverrides {
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Keep the targets chosen at the first iteration.
    #[arg(long)]
    freeze_targets: bool,
}

impl AttackOverrides {
    fn apply(&self, cfg: &mut RunConfig) {
        overlay!(
            cfg.attack.epsilon => self.epsilon,
            cfg.attack.iterations => self.iterations,
            cfg.attack.lr => self.lr,
            cfg.attack.weight_decay => self.weight_decay,
            cfg.attack.lambda => self.lambda,
            cfg.attack.seed => self.seed,
        );
        if self.freeze_targets {
            cfg.attack.freeze_targets = true;
        }
    }
}

#[derive(Args)]
struct AttackCmd {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Attack only the first N scenes.
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long, default_value = "full")]
    variant: AttackVariant,
    /// Continue an interrupted run in this directory.
    #[arg(long, conflicts_with = "out_dir")]
    resume: Option<PathBuf>,
    /// Scenes attacked between manifest updates.
    #[arg(long, default_value_t = 8)]
    chunk: usize,
    #[command(flatten)]
    overrides: AttackOverrides,
}

#[derive(Args)]
struct EvalCmd {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Manifest written by `attack`.
    #[arg(long)]
    manifest: PathBuf,
    /// Corruption as `name:severity`; repeatable.
    #[arg(long = "defense")]
    defenses: Vec<String>,
    /// Add all severities of a corruption (`brightness` or `spatter`); repeatable.
    #[arg(long)]
    sweep: Vec<String>,
    /// Second detector, e.g. one trained on corrupted data.
    #[arg(long)]
    defended_checkpoint: Option<PathBuf>,
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args)]
struct AblateCmd {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    limit: Option<usize>,
    #[command(flatten)]
    overrides: AttackOverrides,
}

#[derive(Args)]
struct DecomposeArgs {
    image: PathBuf,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::Train(_) => "train",
            Command::Attack(_) => "attack",
            Command::Eval(_) => "eval",
            Command::Ablate(_) => "ablate",
            Command::Decompose(_) => "decompose",
        }
    }
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    match &cli.command {
        Command::GenData(a) => {
            overlay!(
                cfg.data.seed => a.seed,
                cfg.data.n_scenes => a.n_scenes,
                cfg.data.image_size => a.image_size,
                cfg.data.k_classes => a.classes,
            );
        }
        Command::Train(a) => {
            overlay!(
                cfg.train.epochs => a.epochs,
                cfg.train.lr => a.lr,
                cfg.train.batch_size => a.batch_size,
                cfg.train.seed => a.seed,
            );
        }
        Command::Attack(a) => a.overrides.apply(&mut cfg),
        Command::Ablate(a) => a.overrides.apply(&mut cfg),
        Command::Eval(a) => {
            if !a.defenses.is_empty() {
                cfg.eval.defenses = a.defenses.clone();
            }
        }
        Command::Decompose(_) => {}
    }
    if cli.sequential {
        cfg.train.parallel = false;
    }
    Ok(cfg)
}

fn open_run_dir(cli: &Cli, cfg: &RunConfig) -> Result<RunDir> {
    if let Command::Attack(AttackCmd { resume: Some(p), .. }) = &cli.command {
        return RunDir::resume(p, cfg);
    }
    RunDir::create(&cli.run_root, cli.out_dir.as_deref(), cli.command.name(), cfg)
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let cfg = resolve_config(&cli)?;
    let dir = open_run_dir(&cli, &cfg)?;
    commands::write_invocation(&dir, &std::env::args().collect::<Vec<_>>())?;
    log::info!("run directory {}", dir.path.display());
    let parallel = !cli.sequential;
    match &cli.command {
        Command::GenData(_) => commands::gen_data(&cfg, &dir)?,
        Command::Train(a) => commands::train(&cfg, &dir, &a.data, a.val.as_deref())?,
        Command::Attack(a) => commands::attack(
            &cfg,
            &dir,
            &commands::AttackArgs {
                checkpoint: &a.checkpoint,
                data: &a.data,
                limit: a.limit,
                variant: a.variant,
                parallel,
                chunk: a.chunk,
            },
        )?,
        Command::Eval(a) => {
            let defenses = commands::parse_defenses(&cfg.eval.defenses, &a.sweep)?;
            commands::eval(
                &cfg,
                &dir,
                &commands::EvalArgs {
                    checkpoint: &a.checkpoint,
                    data: &a.data,
                    manifest: &a.manifest,
                    limit: a.limit,
                    defenses,
                    defended: a.defended_checkpoint.as_deref(),
                    parallel,
                },
            )?;
        }
        Command::Ablate(a) => {
            commands::ablate(&cfg, &dir, &a.checkpoint, &a.data, a.limit, parallel)?;
        }
        Command::Decompose(a) => commands::decompose(&dir, Path::new(&a.image))?,
    }
    println!("{}", dir.path.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

//! Command line front end: `train`, `separate`, `eval`, `ablate`, `selftest`.

mod ablate;
mod selftest;

pub use ablate::{ablation_grid, run_ablation, AblationRow, Axis};
pub use selftest::{run_selftest, CheckResult};

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::eqnet::VelocityModel;
use crate::error::{Error, Result};
use crate::pipeline::{evaluate, load_model, loss_csv, save_model, train};
use crate::sampler::{make_schedule, separate, ScheduleKind};
use crate::wav::{read_wav, write_wav};

#[derive(Debug, Parser)]
#[command(name = "flowsep", version, about = "Single-channel source separation with mixture-consistent flow matching")]
pub struct Cli {
    /// Worker threads for data generation and evaluation.
    #[arg(long, global = true, env = "FLOWSEP_THREADS", default_value_t = 1)]
    pub threads: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model on the synthetic task.
    Train(TrainArgs),
    /// Separate a mono WAV file into sources.
    Separate(SeparateArgs),
    /// Score a checkpoint on the evaluation set.
    Eval(EvalArgs),
    /// Train and score a grid of settings.
    Ablate(AblateArgs),
    /// Run the built-in invariant checks.
    Selftest(SelftestArgs),
}

/// Flags that override config-file values.
#[derive(Debug, Default, Args)]
pub struct Overrides {
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Training seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of evaluation mixtures.
    #[arg(long)]
    pub n_eval: Option<usize>,
    /// Sampling schedule: linear:N, custom5, custom5_rev or single.
    #[arg(long)]
    pub schedule: Option<ScheduleKind>,
}

impl Overrides {
    fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        if let Some(v) = self.steps {
            cfg.train.steps = v;
        }
        if let Some(v) = self.batch_size {
            cfg.train.batch_size = v;
        }
        if let Some(v) = self.lr {
            cfg.train.lr = v;
        }
        if let Some(v) = self.seed {
            cfg.train.seed = v;
        }
        if let Some(v) = self.n_eval {
            cfg.data.n_eval = v;
        }
        if let Some(v) = self.schedule {
            cfg.sample.schedule = v;
        }
        cfg.validate()
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory for `model.ckpt`, `loss.csv` and `config.toml`.
    #[arg(long, default_value = "run")]
    pub out_dir: PathBuf,
    /// Print the running loss every N steps (0 disables).
    #[arg(long, default_value_t = 100)]
    pub log_every: usize,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Args)]
pub struct SeparateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    /// Number of sources to extract.
    #[arg(long, default_value_t = 2)]
    pub sources: usize,
    /// linear:N, custom5, custom5_rev or single; defaults to the checkpoint's setting.
    #[arg(long)]
    pub schedule: Option<ScheduleKind>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
    /// Use the raw training weights instead of the EMA weights.
    #[arg(long)]
    pub no_ema: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Data, noise and sampling settings; the network comes from the checkpoint.
    #[arg(long)]
    pub config: PathBuf,
    /// Per-example CSV.
    #[arg(long, default_value = "metrics.csv")]
    pub out: PathBuf,
    #[arg(long)]
    pub no_ema: bool,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Comma-separated subset of loss, time_weighting, noise, schedule, assignment.
    #[arg(long, default_value = "", value_delimiter = ',')]
    pub axes: Vec<String>,
    #[arg(long, default_value = "ablation.csv")]
    pub out: PathBuf,
    /// Keep each run's `loss.csv` under this directory.
    #[arg(long)]
    pub runs_dir: Option<PathBuf>,
    /// Refuse grids whose estimated training time exceeds this many hours.
    #[arg(long, default_value_t = 12.0)]
    pub budget_hours: f64,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Args)]
pub struct SelftestArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Parses the process arguments, runs the command and returns the exit code.
pub fn main() -> i32 {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<i32> {
    if cli.threads == 0 {
        return Err(Error::Config("--threads must be at least 1".into()));
    }
    match cli.command {
        Command::Train(a) => cmd_train(a).map(|_| 0),
        Command::Separate(a) => cmd_separate(a).map(|_| 0),
        Command::Eval(a) => cmd_eval(a, cli.threads).map(|_| 0),
        Command::Ablate(a) => cmd_ablate(a, cli.threads).map(|_| 0),
        Command::Selftest(a) => {
            let results = run_selftest(a.seed);
            for r in &results {
                println!("{r}");
            }
            let failed = results.iter().filter(|r| !r.passed).count();
            println!("{} checks, {failed} failed", results.len());
            Ok(if failed == 0 { 0 } else { 3 })
        }
    }
}

fn load_config(path: &Path, overrides: &Overrides) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    overrides.apply(&mut cfg)?;
    Ok(cfg)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let cfg = load_config(&a.config, &a.overrides)?;
    let loss = cfg.loss.to_config()?;
    fs::create_dir_all(&a.out_dir)?;
    let mut model = VelocityModel::new(cfg.model.clone())?;
    eprintln!("training {} parameters for {} steps", model.params().num_values(), cfg.train.steps);
    let start = Instant::now();
    let (mut acc, mut n) = (0.0, 0usize);
    let log = train(&mut model, &cfg.train_setup(&loss), |s| {
        if s.loss.is_finite() {
            acc += s.loss;
            n += 1;
        }
        if a.log_every > 0 && s.step % a.log_every == 0 {
            eprintln!("step {:>6}  loss {:>9.4}  lr {:.2e}  {:.0}s", s.step, acc / n.max(1) as f64, s.lr, start.elapsed().as_secs_f64());
            (acc, n) = (0.0, 0);
        }
    })?;
    fs::write(a.out_dir.join("loss.csv"), loss_csv(&log))?;
    fs::write(a.out_dir.join("config.toml"), cfg.to_toml())?;
    save_model(&a.out_dir.join("model.ckpt"), &cfg, &model)?;
    println!("{}", a.out_dir.join("model.ckpt").display());
    Ok(())
}

fn cmd_separate(a: SeparateArgs) -> Result<()> {
    if a.sources < 2 {
        return Err(Error::Config(format!("--sources must be at least 2, got {}", a.sources)));
    }
    let (cfg, mut model) = load_model(&a.model)?;
    if a.no_ema {
        model.set_use_ema(false);
    }
    let schedule = make_schedule(a.schedule.unwrap_or(cfg.sample.schedule))?;
    let sr = cfg.model.sample_rate;
    let mixture = read_wav(&a.input, sr)?;
    let shaper = cfg.noise.shaper(&mixture.iter().map(|v| v / a.sources as f64).collect::<Vec<_>>(), sr)?;
    let est = separate(&model, &mixture, a.sources, &shaper, &schedule, a.seed)?;
    fs::create_dir_all(&a.out_dir)?;
    let stem = a.input.file_stem().and_then(|s| s.to_str()).unwrap_or("mixture");
    for (k, row) in est.rows().enumerate() {
        let path = a.out_dir.join(format!("{stem}_src{}.wav", k + 1));
        write_wav(&path, row, sr)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs, threads: usize) -> Result<()> {
    let mut cfg = load_config(&a.config, &a.overrides)?;
    let (stored, mut model) = load_model(&a.model)?;
    cfg.model = stored.model;
    model.set_use_ema(cfg.sample.use_ema && !a.no_ema);
    let schedule = cfg.schedule()?;
    let report = evaluate(&model, &cfg.eval_setup(&schedule, threads))?;
    fs::write(&a.out, report.to_csv())?;
    println!(
        "examples {}  mean SI-SDR {:.3} dB  median {:.3} dB  mixture baseline {:.3} dB",
        report.rows.len(),
        report.mean(),
        report.median(),
        report.baseline_mean()
    );
    Ok(())
}

fn cmd_ablate(a: AblateArgs, threads: usize) -> Result<()> {
    let cfg = load_config(&a.config, &a.overrides)?;
    let axes = a.axes.iter().filter(|s| !s.trim().is_empty()).map(|s| s.trim().parse()).collect::<Result<Vec<Axis>>>()?;
    let rows = run_ablation(&cfg, &axes, threads, a.budget_hours, a.runs_dir.as_deref(), |msg| eprintln!("{msg}"))?;
    fs::write(&a.out, ablate::table_csv(&rows))?;
    print!("{}", ablate::table_csv(&rows));
    Ok(())
}

//! `opc`: train, evaluate and inspect ocean plastic collector experiments.
//!
//! Settings are layered: built-in defaults (or `--preset`), then the `--config`
//! file, then `OPC_<KEY>` environment variables, then command-line flags.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use opc_core::commnet::CommMode;
use opc_core::evalkit::{self, ReportOptions};
use opc_core::policy::load_checkpoint;
use opc_core::scenario;
use opc_core::trainer::{self, Actor, EvalBudget, EvalOptions, ExperimentConfig, RunHooks};

#[derive(Parser)]
#[command(name = "opc", version, about = "Multi-agent ocean plastic collector: training and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a shared policy with PPO.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint (or random actions) on the test scenarios.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate.
        #[arg(long, required_unless_present = "random")]
        checkpoint: Option<PathBuf>,
        /// Uniform random actions instead of a policy.
        #[arg(long, conflicts_with = "checkpoint")]
        random: bool,
        /// Mean action and most likely signal instead of sampling.
        #[arg(long)]
        deterministic: bool,
        /// Total environment steps across all runs.
        #[arg(long, default_value_t = 1_000_000)]
        num_steps: u64,
        /// Fixed number of episodes per run; overrides --num-steps.
        #[arg(long)]
        episodes_per_run: Option<usize>,
        #[command(flatten)]
        report: ReportArgs,
    },
    /// Write a scenario's pebble layout and a density heatmap.
    DumpScenario {
        #[command(flatten)]
        common: Common,
        /// Noise offset along y in meters.
        #[arg(long, default_value_t = 0.0)]
        y_shift: f64,
    },
    /// Recompute an evaluation report from replay logs.
    Report {
        /// Replay log files or directories containing `*.jsonl`.
        #[arg(required = true)]
        logs: Vec<PathBuf>,
        /// Label the report as deterministic-action.
        #[arg(long)]
        deterministic: bool,
        /// Write report.csv and report.txt here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        report: ReportArgs,
    },
    /// Render vessel paths of one logged episode as SVG.
    RenderPaths {
        /// Replay log file.
        log: PathBuf,
        /// Episode index within the log.
        #[arg(long, default_value_t = 0)]
        episode: usize,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Full-size settings.
    Default,
    /// 50 m area, 60 pebbles, 2e5 steps.
    Smoke,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "default")]
    preset: Preset,
    /// Master seed (scenario seed for dump-scenario).
    #[arg(long)]
    seed: Option<u64>,
    /// Communication mode: ma (silent) or mac (signal).
    #[arg(long)]
    mode: Option<CommMode>,
    /// Total agent steps of training.
    #[arg(long)]
    max_steps: Option<f64>,
    /// Base output directory; each command writes into one run directory below it.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Run directory name (defaults to one derived from the command, mode and seed).
    #[arg(long)]
    run_id: Option<String>,
}

#[derive(Args)]
struct ReportArgs {
    /// Follow/move-away window in steps.
    #[arg(long, default_value_t = evalkit::DEFAULT_WINDOW)]
    window: usize,
    /// Distance change below which a response counts as neutral, in meters.
    #[arg(long, default_value_t = evalkit::DEFAULT_DEAD_BAND)]
    dead_band: f64,
    /// Nearby-garbage radius in meters.
    #[arg(long, default_value_t = evalkit::DEFAULT_RADIUS)]
    radius: f64,
}

impl ReportArgs {
    fn options(&self) -> ReportOptions {
        ReportOptions {
            window: self.window,
            dead_band: self.dead_band,
            radius: self.radius,
        }
    }
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match self.preset {
            Preset::Default => ExperimentConfig::default(),
            Preset::Smoke => ExperimentConfig::smoke(),
        };
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
            cfg.apply_text(&text)
                .with_context(|| format!("in config {}", path.display()))?;
        }
        cfg.apply_env(std::env::vars())?;
        if let Some(s) = self.seed {
            cfg.master_seed = s;
        }
        if let Some(m) = self.mode {
            cfg.mode = m;
        }
        if let Some(n) = self.max_steps {
            cfg.ppo.max_steps = n as u64;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn run_dir(&self, default_id: String) -> Result<PathBuf> {
        let dir = self.out.join(self.run_id.clone().unwrap_or(default_id));
        fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
        Ok(dir)
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("cannot write {}", path.display()))
}

fn cmd_train(common: &Common) -> Result<()> {
    let cfg = common.load()?;
    let dir = common.run_dir(format!("train-{}-seed{}", cfg.mode.label(), cfg.master_seed))?;
    write(&dir.join("config.txt"), cfg.to_text())?;

    let stop = Arc::new(AtomicBool::new(false));
    {
        let stop = Arc::clone(&stop);
        ctrlc::set_handler(move || {
            eprintln!("interrupt: finishing the current step and writing a final checkpoint");
            stop.store(true, Ordering::SeqCst);
        })
        .context("cannot install Ctrl-C handler")?;
    }

    eprintln!("training {} for {} steps -> {}", cfg.mode.label(), cfg.ppo.max_steps, dir.display());
    let mut print = |s: &trainer::TrainingSummary| {
        eprintln!(
            "step {:>10}  episodes {:>4}  reward {:>9.3}  length {:>7.1}  value_loss {:>9.4}  entropy {:>7.4}  signals/ep {:>8.1}",
            s.step, s.episodes, s.mean_cum_reward, s.mean_episode_length, s.value_loss, s.entropy, s.signal_count_per_episode
        )
    };
    let out = trainer::run_training(
        &cfg,
        RunHooks {
            out_dir: Some(&dir),
            stop: Some(&stop),
            on_summary: Some(&mut print),
        },
    )?;
    eprintln!(
        "{} after {} steps, {} episodes, {} updates; final checkpoint {}",
        if out.stopped { "stopped" } else { "finished" },
        out.steps,
        out.episodes,
        out.updates.len(),
        out.final_checkpoint.as_deref().unwrap_or(Path::new("-")).display()
    );
    Ok(())
}

fn cmd_eval(
    common: &Common,
    checkpoint: Option<&Path>,
    deterministic: bool,
    budget: EvalBudget,
    report: ReportOptions,
) -> Result<()> {
    let cfg = common.load()?;
    let ckpt = checkpoint
        .map(|p| load_checkpoint(p, Some(&cfg.net)).with_context(|| format!("cannot load checkpoint {}", p.display())))
        .transpose()?;
    let actor = match &ckpt {
        Some(c) => Actor::Policy(&c.params),
        None => Actor::Random,
    };
    let who = if ckpt.is_some() { "policy" } else { "random" };
    let dir = common.run_dir(format!("eval-{}-{who}-seed{}", cfg.mode.label(), cfg.master_seed))?;
    write(&dir.join("config.txt"), cfg.to_text())?;
    let opts = EvalOptions {
        budget,
        deterministic,
        seed: cfg.master_seed,
        report,
        log_dir: Some(dir.join("logs")),
        keep_logs: false,
    };
    let out = trainer::run_eval(actor, &cfg, &opts)?;
    write(&dir.join("report.csv"), out.report.to_csv())?;
    write(&dir.join("report.txt"), out.report.to_text())?;
    print!("{}", out.report.to_text());
    eprintln!("report and replay logs written to {}", dir.display());
    Ok(())
}

fn heatmap(field: &scenario::DensityField, scale: u32) -> image::GrayImage {
    let n = field.resolution as u32;
    image::GrayImage::from_fn(n * scale, n * scale, |x, y| {
        // Image rows grow downward; field rows grow with world y.
        let v = field.get((x / scale) as usize, (n - 1 - y / scale) as usize);
        image::Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8])
    })
}

fn cmd_dump_scenario(common: &Common, y_shift: f64) -> Result<()> {
    let cfg = common.load()?;
    let seed = cfg.master_seed;
    let spec = cfg.scenario.with_seed(seed, y_shift);
    let field = scenario::scenario_field(&spec);
    let pebbles = scenario::spawn_pebbles(&field, &spec)?;
    let dir = common.run_dir(format!("scenario-seed{seed}-y{y_shift}"))?;
    write(&dir.join("config.txt"), cfg.to_text())?;
    write(&dir.join("scenario.txt"), scenario::dump_scenario(&spec, &pebbles))?;
    let png = dir.join("density.png");
    heatmap(&field, 4)
        .save(&png)
        .with_context(|| format!("cannot write {}", png.display()))?;
    eprintln!("scenario {seed} (y_shift {y_shift}) written to {}", dir.display());
    Ok(())
}

fn log_files(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)
                .with_context(|| format!("cannot list {}", p.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "jsonl"))
                .collect();
            found.sort();
            files.extend(found);
        } else if p.exists() {
            files.push(p.clone());
        } else {
            bail!("no such log: {}", p.display());
        }
    }
    Ok(files)
}

fn cmd_report(logs: &[PathBuf], deterministic: bool, out: Option<&Path>, opts: ReportOptions) -> Result<()> {
    let files = log_files(logs)?;
    let runs = files
        .iter()
        .map(|f| evalkit::load_log(f))
        .collect::<opc_core::Result<Vec<_>>>()?;
    let label = if deterministic { "deterministic" } else { "stochastic" };
    let report = evalkit::build_report(&runs, label, &opts)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
        write(&dir.join("report.csv"), report.to_csv())?;
        write(&dir.join("report.txt"), report.to_text())?;
    }
    print!("{}", report.to_text());
    Ok(())
}

fn cmd_render_paths(log: &Path, episode: usize, out: &Path) -> Result<()> {
    let episodes = evalkit::load_log(log)?;
    let Some(ep) = episodes.get(episode) else {
        bail!("{} holds {} episodes; no episode {episode}", log.display(), episodes.len());
    };
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let path = out.join(format!("paths-run{:02}-ep{:03}.svg", ep.header.run, ep.header.episode));
    evalkit::write_paths(ep, &path)?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { common } => cmd_train(&common),
        Command::Eval {
            common,
            checkpoint,
            random: _,
            deterministic,
            num_steps,
            episodes_per_run,
            report,
        } => {
            let budget = match episodes_per_run {
                Some(k) => EvalBudget::EpisodesPerRun(k),
                None => EvalBudget::Steps(num_steps),
            };
            cmd_eval(&common, checkpoint.as_deref(), deterministic, budget, report.options())
        }
        Command::DumpScenario { common, y_shift } => cmd_dump_scenario(&common, y_shift),
        Command::Report {
            logs,
            deterministic,
            out,
            report,
        } => cmd_report(&logs, deterministic, out.as_deref(), report.options()),
        Command::RenderPaths { log, episode, out } => cmd_render_paths(&log, episode, &out),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

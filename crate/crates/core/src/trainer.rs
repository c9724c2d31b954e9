//! Experiment orchestration: configuration, rollout areas, the training loop and
//! evaluation runs.
//!
//! Step counts (`max_steps`, `summary_freq`, checkpoint intervals) are agent steps:
//! one environment step of a three-vessel area adds three.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::commnet::CommMode;
use crate::evalkit::{self, EpisodeHeader, EpisodeLog, EpisodeMetrics, EvalReport, ReplayLog, ReportOptions, StepRecord};
use crate::optim::{Learner, PpoConfig, Segment, Step, Transition, TrajectoryBuffer, UpdateStats, LrSchedule};
use crate::policy::{save_checkpoint, Checkpoint, NetConfig, PolicyParams};
use crate::scenario::ScenarioSpec;
use crate::seeding::{self, tags};
use crate::world::{self, AgentAction, Frame, PhysicsConfig, Termination, WorldConfig, WorldState};
use crate::{Error, Result};

/// Noise offset of the held-out scenario set, in meters.
pub const TEST_Y_SHIFT: f64 = 200.0;

/// Inclusive range of scenario seeds sharing one noise offset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedRange {
    pub first: u64,
    pub last: u64,
    pub y_shift: f64,
}

impl SeedRange {
    pub fn len(&self) -> usize {
        (self.last.saturating_sub(self.first) + 1) as usize
    }

    pub fn is_empty(&self) -> bool {
        self.last < self.first
    }

    pub fn seeds(&self) -> impl Iterator<Item = u64> {
        self.first..=self.last
    }
}

/// Draws the next episode's scenario uniformly from `range`.
pub fn seed_schedule<R: Rng>(range: &SeedRange, template: &ScenarioSpec, rng: &mut R) -> ScenarioSpec {
    template.with_seed(rng.random_range(range.first..=range.last), range.y_shift)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub mode: CommMode,
    pub train_seeds: SeedRange,
    pub test_seeds: SeedRange,
    pub num_areas: usize,
    pub agents_per_area: usize,
    pub summary_freq: u64,
    pub keep_checkpoints: usize,
    pub checkpoint_interval: u64,
    pub master_seed: u64,
    /// Scale of the extrinsic reward fed to the learner.
    pub reward_strength: f64,
    /// Template for every episode; seed and y-shift are filled in per episode.
    pub scenario: ScenarioSpec,
    pub physics: PhysicsConfig,
    pub net: NetConfig,
    pub ppo: PpoConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mode: CommMode::Silent,
            train_seeds: SeedRange {
                first: 0,
                last: 99,
                y_shift: 0.0,
            },
            test_seeds: SeedRange {
                first: 0,
                last: 9,
                y_shift: TEST_Y_SHIFT,
            },
            num_areas: 8,
            agents_per_area: 3,
            summary_freq: 10_000,
            keep_checkpoints: 5,
            checkpoint_interval: 500_000,
            master_seed: 0,
            reward_strength: 1.0,
            scenario: ScenarioSpec::default(),
            physics: PhysicsConfig::default(),
            net: NetConfig::default(),
            ppo: PpoConfig::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean `{value}` for `{key}`"))),
    }
}

/// Prefix of environment variables that override config keys, e.g. `OPC_MAX_STEPS`.
pub const ENV_PREFIX: &str = "OPC_";

impl ExperimentConfig {
    /// The scaled-down profile: 50 m area, 60 pebbles, 2e5 agent steps.
    pub fn smoke() -> Self {
        let mut c = Self::default();
        c.scenario.area_size = 50.0;
        c.scenario.pebble_count = 60;
        c.net.hidden_units = 64;
        c.ppo.learning_rate = 3e-4;
        c.ppo.max_steps = 200_000;
        c
    }

    pub fn world_config(&self) -> WorldConfig {
        WorldConfig {
            physics: self.physics,
            mode: self.mode,
            agents: self.agents_per_area,
        }
    }

    /// Applies one `key = value` setting. Canonical names and their
    /// misspelled originals (`lambd`, `communiation`) are both accepted.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().to_ascii_lowercase();
        let value = value.trim();
        let k = key.as_str();
        let p = &mut self.ppo;
        match k {
            "batch_size" => p.batch_size = parse(k, value)?,
            "buffer_size" => p.buffer_size = parse(k, value)?,
            "learning_rate" => p.learning_rate = parse(k, value)?,
            "beta" => p.beta = parse(k, value)?,
            "epsilon" => p.epsilon = parse(k, value)?,
            "lambd" | "lambda" => p.lambda = parse(k, value)?,
            "num_epoch" => p.num_epoch = parse(k, value)?,
            "gamma" => p.gamma = parse(k, value)?,
            "time_horizon" => p.time_horizon = parse(k, value)?,
            "max_steps" => p.max_steps = parse::<f64>(k, value)? as u64,
            "value_coef" => p.value_coef = parse(k, value)?,
            "normalize_advantages" => p.normalize_advantages = parse_bool(k, value)?,
            "learning_rate_schedule" => {
                p.lr_schedule = match value {
                    "linear" => LrSchedule::Linear,
                    "constant" => LrSchedule::Constant,
                    _ => return Err(Error::Config(format!("unknown learning_rate_schedule `{value}`"))),
                }
            }
            "trainer_type" => {
                if value != "ppo" {
                    return Err(Error::Config(format!("unsupported trainer_type `{value}`")));
                }
            }
            "normalize" => {
                if parse_bool(k, value)? {
                    return Err(Error::Config("running observation normalization is not supported".into()));
                }
            }
            "vis_encode_type" => {
                if value != "simple" {
                    return Err(Error::Config(format!("unsupported vis_encode_type `{value}`")));
                }
            }
            "hidden_units" => self.net.hidden_units = parse(k, value)?,
            "num_layers" => self.net.num_layers = parse(k, value)?,
            "conv1_filters" => self.net.conv1_filters = parse(k, value)?,
            "conv2_filters" => self.net.conv2_filters = parse(k, value)?,
            "strength" => self.reward_strength = parse(k, value)?,
            "keep_checkpoints" => self.keep_checkpoints = parse(k, value)?,
            "checkpoint_interval" => self.checkpoint_interval = parse::<f64>(k, value)? as u64,
            "summary_freq" => self.summary_freq = parse::<f64>(k, value)? as u64,
            "scenario_noise_z_shift_factor" | "scenario_noise_y_shift_factor" => {
                self.train_seeds.y_shift = parse::<f64>(k, value)? * TEST_Y_SHIFT
            }
            "communiation" | "communication" | "mode" => self.mode = value.parse()?,
            "seed" | "master_seed" => self.master_seed = parse(k, value)?,
            "num_areas" => self.num_areas = parse(k, value)?,
            "agents_per_area" => self.agents_per_area = parse(k, value)?,
            "train_seed_first" => self.train_seeds.first = parse(k, value)?,
            "train_seed_last" => self.train_seeds.last = parse(k, value)?,
            "train_y_shift" => self.train_seeds.y_shift = parse(k, value)?,
            "test_seed_first" => self.test_seeds.first = parse(k, value)?,
            "test_seed_last" => self.test_seeds.last = parse(k, value)?,
            "test_y_shift" => self.test_seeds.y_shift = parse(k, value)?,
            "area_size" => self.scenario.area_size = parse(k, value)?,
            "pebble_count" => self.scenario.pebble_count = parse(k, value)?,
            "comm_range" => self.scenario.comm_range = parse(k, value)?,
            "episode_max_steps" => self.scenario.max_steps = parse(k, value)?,
            "noise_octaves" => self.scenario.noise.octaves = parse(k, value)?,
            "noise_frequency" => self.scenario.noise.frequency = parse(k, value)?,
            "noise_persistence" => self.scenario.noise.persistence = parse(k, value)?,
            "field_resolution" => self.scenario.noise.resolution = parse(k, value)?,
            "dt" => self.physics.dt = parse(k, value)?,
            "linear_drag" => self.physics.linear_drag = parse(k, value)?,
            "angular_drag" => self.physics.angular_drag = parse(k, value)?,
            "move_speed" => self.physics.move_speed = parse(k, value)?,
            "rotation_speed" => self.physics.rotation_speed = parse(k, value)?,
            "collection_radius" => self.physics.collection_radius = parse(k, value)?,
            "vessel_radius" => self.physics.vessel_radius = parse(k, value)?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Applies a flat config file: one `key = value` per line, `#` comments.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", n + 1)))?;
            self.set(k, v).map_err(|e| {
                let msg = match e {
                    Error::Config(m) => m,
                    e => e.to_string(),
                };
                Error::Config(format!("line {} (`{}`): {msg}", n + 1, k.trim()))
            })?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    /// Applies `OPC_<KEY>=value` variables; other variables are ignored.
    pub fn apply_env<I: IntoIterator<Item = (String, String)>>(&mut self, vars: I) -> Result<()> {
        let mut vars: Vec<(String, String)> = vars
            .into_iter()
            .filter_map(|(k, v)| k.strip_prefix(ENV_PREFIX).map(|k| (k.to_ascii_lowercase(), v)))
            .collect();
        vars.sort();
        for (k, v) in vars {
            self.set(&k, &v)
                .map_err(|e| Error::Config(format!("{ENV_PREFIX}{}: {e}", k.to_ascii_uppercase())))?;
        }
        Ok(())
    }

    /// Canonical `key = value` rendering; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let p = &self.ppo;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("communication", self.mode.label().into());
        kv("seed", self.master_seed.to_string());
        kv("batch_size", p.batch_size.to_string());
        kv("buffer_size", p.buffer_size.to_string());
        kv("learning_rate", format!("{:?}", p.learning_rate));
        kv("beta", format!("{:?}", p.beta));
        kv("epsilon", format!("{:?}", p.epsilon));
        kv("lambd", format!("{:?}", p.lambda));
        kv("num_epoch", p.num_epoch.to_string());
        kv(
            "learning_rate_schedule",
            match p.lr_schedule {
                LrSchedule::Linear => "linear",
                LrSchedule::Constant => "constant",
            }
            .into(),
        );
        kv("gamma", format!("{:?}", p.gamma));
        kv("time_horizon", p.time_horizon.to_string());
        kv("max_steps", p.max_steps.to_string());
        kv("value_coef", format!("{:?}", p.value_coef));
        kv("normalize_advantages", p.normalize_advantages.to_string());
        kv("hidden_units", self.net.hidden_units.to_string());
        kv("num_layers", self.net.num_layers.to_string());
        kv("conv1_filters", self.net.conv1_filters.to_string());
        kv("conv2_filters", self.net.conv2_filters.to_string());
        kv("strength", format!("{:?}", self.reward_strength));
        kv("keep_checkpoints", self.keep_checkpoints.to_string());
        kv("checkpoint_interval", self.checkpoint_interval.to_string());
        kv("summary_freq", self.summary_freq.to_string());
        kv("num_areas", self.num_areas.to_string());
        kv("agents_per_area", self.agents_per_area.to_string());
        kv("train_seed_first", self.train_seeds.first.to_string());
        kv("train_seed_last", self.train_seeds.last.to_string());
        kv("train_y_shift", format!("{:?}", self.train_seeds.y_shift));
        kv("test_seed_first", self.test_seeds.first.to_string());
        kv("test_seed_last", self.test_seeds.last.to_string());
        kv("test_y_shift", format!("{:?}", self.test_seeds.y_shift));
        kv("area_size", format!("{:?}", self.scenario.area_size));
        kv("pebble_count", self.scenario.pebble_count.to_string());
        kv("comm_range", format!("{:?}", self.scenario.comm_range));
        kv("episode_max_steps", self.scenario.max_steps.to_string());
        kv("noise_octaves", self.scenario.noise.octaves.to_string());
        kv("noise_frequency", format!("{:?}", self.scenario.noise.frequency));
        kv("noise_persistence", format!("{:?}", self.scenario.noise.persistence));
        kv("field_resolution", self.scenario.noise.resolution.to_string());
        kv("dt", format!("{:?}", self.physics.dt));
        kv("linear_drag", format!("{:?}", self.physics.linear_drag));
        kv("angular_drag", format!("{:?}", self.physics.angular_drag));
        kv("move_speed", format!("{:?}", self.physics.move_speed));
        kv("rotation_speed", format!("{:?}", self.physics.rotation_speed));
        kv("collection_radius", format!("{:?}", self.physics.collection_radius));
        kv("vessel_radius", format!("{:?}", self.physics.vessel_radius));
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.train_seeds.is_empty() || self.test_seeds.is_empty() {
            return bad("seed ranges must be non-empty".into());
        }
        if self.num_areas == 0 {
            return bad("num_areas must be positive".into());
        }
        if self.agents_per_area < 2 {
            return bad("agents_per_area must be at least 2".into());
        }
        if self.summary_freq == 0 {
            return bad("summary_freq must be positive".into());
        }
        if self.net.hidden_units == 0 || self.net.conv1_filters == 0 || self.net.conv2_filters == 0 {
            return bad("network widths must be positive".into());
        }
        self.ppo.validate()?;
        self.scenario.validate()
    }
}

/// One row of the training metrics stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub step: u64,
    pub episodes: usize,
    pub mean_cum_reward: f64,
    pub mean_episode_length: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub signal_count_per_episode: f64,
}

pub const METRICS_HEADER: &str = "step,mean_cum_reward,mean_episode_length,value_loss,entropy,signal_count_per_episode";

impl TrainingSummary {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step,
            self.mean_cum_reward,
            self.mean_episode_length,
            self.value_loss,
            self.entropy,
            self.signal_count_per_episode
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct EpisodeStats {
    reward: f64,
    length: u32,
    signals: u64,
}

/// One training area: a world, its private RNG and the in-flight segments.
struct Area {
    world: WorldState,
    rng: ChaCha8Rng,
    frames: Vec<Frame>,
    obs: Vec<Vec<f32>>,
    segments: Vec<Segment>,
    reward: f64,
    signals: u64,
}

struct AreaStep {
    transitions: Vec<Transition>,
    finished: Option<EpisodeStats>,
}

fn first_observations(world: &WorldState) -> (Vec<Vec<f32>>, Vec<Frame>) {
    (0..world.agent_count())
        .map(|i| {
            let (o, f) = world::observe(world, i, None);
            (o.0, f)
        })
        .unzip()
}

impl Area {
    fn new(index: usize, cfg: &ExperimentConfig) -> Result<Self> {
        let mut rng = seeding::rng_for(seeding::derive(cfg.master_seed, tags::AREA), index as u64);
        let world = Self::fresh_world(cfg, &mut rng)?;
        let (obs, frames) = first_observations(&world);
        Ok(Self {
            segments: vec![Segment::default(); world.agent_count()],
            world,
            rng,
            frames,
            obs,
            reward: 0.0,
            signals: 0,
        })
    }

    fn fresh_world(cfg: &ExperimentConfig, rng: &mut ChaCha8Rng) -> Result<WorldState> {
        let spec = seed_schedule(&cfg.train_seeds, &cfg.scenario, rng);
        WorldState::reset(&spec, &cfg.world_config(), rng.random())
    }

    fn step(&mut self, params: &PolicyParams<f32>, cfg: &ExperimentConfig) -> Result<AreaStep> {
        let n = self.world.agent_count();
        let ppo = &cfg.ppo;
        let mut actions = Vec::with_capacity(n);
        let mut sampled = Vec::with_capacity(n);
        for i in 0..n {
            let out = params.forward(&self.obs[i])?;
            let s = out.distribution().sample(&mut self.rng);
            actions.push(s.action);
            sampled.push((s, out.value_f64()));
        }
        let outcome = self.world.step(&actions)?;
        // Hitting the step cap truncates rather than terminates: bootstrap from V.
        let terminal = outcome.done && outcome.cause != Termination::StepCap;
        for (i, (s, value)) in sampled.into_iter().enumerate() {
            let r = outcome.local_reward[i] + outcome.global_reward[i];
            self.reward += r;
            self.segments[i].push(Step {
                obs: std::mem::take(&mut self.obs[i]),
                raw_action: s.raw,
                signal: s.action.signal,
                log_prob: s.log_prob,
                reward: cfg.reward_strength * r,
                value,
                done: terminal,
            });
        }
        self.signals += self.world.signals().iter().filter(|&&b| b).count() as u64;

        let mut transitions = Vec::new();
        let next: Vec<(Vec<f32>, Frame)> = (0..n)
            .map(|i| {
                let (o, f) = world::observe(&self.world, i, Some(&self.frames[i]));
                (o.0, f)
            })
            .collect();

        if outcome.done {
            for (i, (o, _)) in next.iter().enumerate() {
                let boot = if terminal { 0.0 } else { params.forward(o)?.value_f64() };
                transitions.extend(self.segments[i].finish(boot, ppo.gamma, ppo.lambda));
            }
            let finished = EpisodeStats {
                reward: self.reward,
                length: self.world.step,
                signals: self.signals,
            };
            self.world = Self::fresh_world(cfg, &mut self.rng)?;
            (self.obs, self.frames) = first_observations(&self.world);
            self.reward = 0.0;
            self.signals = 0;
            return Ok(AreaStep {
                transitions,
                finished: Some(finished),
            });
        }

        for (i, (o, f)) in next.into_iter().enumerate() {
            if self.segments[i].len() >= ppo.time_horizon {
                let boot = params.forward(&o)?.value_f64();
                transitions.extend(self.segments[i].finish(boot, ppo.gamma, ppo.lambda));
            }
            self.obs[i] = o;
            self.frames[i] = f;
        }
        Ok(AreaStep {
            transitions,
            finished: None,
        })
    }

    /// Hands off every in-flight segment, bootstrapped from the current state.
    fn flush(&mut self, params: &PolicyParams<f32>, ppo: &PpoConfig) -> Result<Vec<Transition>> {
        let mut out = Vec::new();
        for i in 0..self.segments.len() {
            if !self.segments[i].is_empty() {
                let boot = params.forward(&self.obs[i])?.value_f64();
                out.extend(self.segments[i].finish(boot, ppo.gamma, ppo.lambda));
            }
        }
        Ok(out)
    }
}

/// Where a training run writes and how it can be interrupted.
#[derive(Default)]
pub struct RunHooks<'a> {
    pub out_dir: Option<&'a Path>,
    pub stop: Option<&'a AtomicBool>,
    pub on_summary: Option<&'a mut dyn FnMut(&TrainingSummary)>,
}

#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    pub params: PolicyParams<f32>,
    pub summaries: Vec<TrainingSummary>,
    pub updates: Vec<UpdateStats>,
    /// Agent steps collected.
    pub steps: u64,
    pub episodes: u64,
    /// Transitions consumed by updates.
    pub consumed: u64,
    /// Transitions left in the buffer at the end.
    pub residue: usize,
    pub stopped: bool,
    pub rng: ChaCha8Rng,
    pub final_checkpoint: Option<PathBuf>,
}

struct MetricsSink {
    metrics: BufWriter<File>,
    updates: BufWriter<File>,
    dir: PathBuf,
}

const UPDATES_HEADER: &str =
    "step,policy_loss,value_loss,entropy,mean_ratio,first_minibatch_ratio,clip_fraction,learning_rate";

impl MetricsSink {
    fn create(dir: &Path) -> Result<Self> {
        let io = |p: &Path| {
            let p = p.to_path_buf();
            move |e| Error::io(&p, e)
        };
        fs::create_dir_all(dir.join("checkpoints")).map_err(io(dir))?;
        let mp = dir.join("metrics.csv");
        let up = dir.join("updates.csv");
        let mut metrics = BufWriter::new(File::create(&mp).map_err(io(&mp))?);
        let mut updates = BufWriter::new(File::create(&up).map_err(io(&up))?);
        writeln!(metrics, "{METRICS_HEADER}").map_err(io(&mp))?;
        writeln!(updates, "{UPDATES_HEADER}").map_err(io(&up))?;
        Ok(Self {
            metrics,
            updates,
            dir: dir.to_path_buf(),
        })
    }

    fn summary(&mut self, s: &TrainingSummary) -> Result<()> {
        let p = self.dir.join("metrics.csv");
        writeln!(self.metrics, "{}", s.csv_row())
            .and_then(|_| self.metrics.flush())
            .map_err(|e| Error::io(&p, e))
    }

    fn update(&mut self, step: u64, u: &UpdateStats) -> Result<()> {
        let p = self.dir.join("updates.csv");
        writeln!(
            self.updates,
            "{step},{},{},{},{},{},{},{}",
            u.policy_loss, u.value_loss, u.entropy, u.mean_ratio, u.first_minibatch_ratio, u.clip_fraction, u.learning_rate
        )
        .and_then(|_| self.updates.flush())
        .map_err(|e| Error::io(&p, e))
    }

    fn checkpoint(&self, ckpt: &Checkpoint, keep: usize) -> Result<()> {
        let dir = self.dir.join("checkpoints");
        save_checkpoint(&dir.join(format!("step-{:012}.ckpt", ckpt.step)), ckpt)?;
        let mut existing: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "ckpt"))
            .collect();
        existing.sort();
        let excess = existing.len().saturating_sub(keep);
        for p in &existing[..excess] {
            fs::remove_file(p).map_err(|e| Error::io(p, e))?;
        }
        Ok(())
    }
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Initial parameters for a run: seeded from the master seed.
pub fn initial_params(cfg: &ExperimentConfig) -> PolicyParams<f32> {
    PolicyParams::init(cfg.net, &mut seeding::rng_for(cfg.master_seed, tags::INIT))
}

pub fn run_training(cfg: &ExperimentConfig, hooks: RunHooks<'_>) -> Result<TrainingOutcome> {
    cfg.validate()?;
    let RunHooks {
        out_dir,
        stop,
        mut on_summary,
    } = hooks;
    let mut sink = out_dir.map(MetricsSink::create).transpose()?;
    let mut learner = Learner::new(initial_params(cfg), cfg.ppo.adam);
    let mut rng = seeding::rng_for(cfg.master_seed, tags::SHUFFLE);
    let mut areas = (0..cfg.num_areas)
        .map(|i| Area::new(i, cfg))
        .collect::<Result<Vec<_>>>()?;
    let mut buffer = TrajectoryBuffer::new(cfg.ppo.buffer_size);

    let max_steps = cfg.ppo.max_steps;
    let mut steps = 0u64;
    let mut consumed = 0u64;
    let mut episodes = 0u64;
    let mut window: Vec<EpisodeStats> = Vec::new();
    let mut window_updates: Vec<UpdateStats> = Vec::new();
    let mut last_update: Option<UpdateStats> = None;
    let mut summaries = Vec::new();
    let mut updates = Vec::new();
    let mut next_summary = cfg.summary_freq;
    let mut next_checkpoint = if cfg.checkpoint_interval > 0 {
        cfg.checkpoint_interval
    } else {
        u64::MAX
    };
    let mut stopped = false;

    let do_update = |learner: &mut Learner,
                         buffer: &mut TrajectoryBuffer,
                         rng: &mut ChaCha8Rng,
                         steps: u64,
                         sink: &mut Option<MetricsSink>|
     -> Result<UpdateStats> {
        let progress = steps as f64 / max_steps.max(1) as f64;
        let u = learner.update(buffer, &cfg.ppo, progress, rng)?;
        if let Some(s) = sink.as_mut() {
            s.update(steps, &u)?;
        }
        Ok(u)
    };

    while steps < max_steps {
        if stop.is_some_and(|s| s.load(Ordering::Relaxed)) {
            stopped = true;
            break;
        }
        let params = &learner.params;
        let results = areas
            .par_iter_mut()
            .map(|a| a.step(params, cfg))
            .collect::<Result<Vec<_>>>()?;
        for r in results {
            steps += cfg.agents_per_area as u64;
            buffer.extend(r.transitions);
            if let Some(ep) = r.finished {
                episodes += 1;
                window.push(ep);
            }
        }
        while buffer.is_full() {
            let u = do_update(&mut learner, &mut buffer, &mut rng, steps, &mut sink)?;
            consumed += u.transitions as u64;
            window_updates.push(u);
            last_update = Some(u);
            updates.push(u);
        }
        while steps >= next_summary {
            let (vl, ent) = if window_updates.is_empty() {
                last_update.map_or((f64::NAN, f64::NAN), |u| (u.value_loss, u.entropy))
            } else {
                (
                    mean(window_updates.iter().map(|u| u.value_loss)),
                    mean(window_updates.iter().map(|u| u.entropy)),
                )
            };
            let s = TrainingSummary {
                step: next_summary,
                episodes: window.len(),
                mean_cum_reward: mean(window.iter().map(|e| e.reward)),
                mean_episode_length: mean(window.iter().map(|e| e.length as f64)),
                value_loss: vl,
                entropy: ent,
                signal_count_per_episode: mean(window.iter().map(|e| e.signals as f64)),
            };
            if let Some(sk) = sink.as_mut() {
                sk.summary(&s)?;
            }
            if let Some(cb) = on_summary.as_mut() {
                cb(&s);
            }
            summaries.push(s);
            window.clear();
            window_updates.clear();
            next_summary += cfg.summary_freq;
        }
        if steps >= next_checkpoint {
            if let Some(sk) = sink.as_ref() {
                let ck = Checkpoint {
                    params: learner.params.clone(),
                    rng: rng.clone(),
                    step: steps,
                };
                sk.checkpoint(&ck, cfg.keep_checkpoints)?;
            }
            while next_checkpoint <= steps {
                next_checkpoint = next_checkpoint.saturating_add(cfg.checkpoint_interval);
            }
        }
    }

    // Hand off partial segments so no experience is lost at the end of the run.
    if !stopped {
        for a in &mut areas {
            buffer.extend(a.flush(&learner.params, &cfg.ppo)?);
        }
        while buffer.is_full() {
            let u = do_update(&mut learner, &mut buffer, &mut rng, steps, &mut sink)?;
            consumed += u.transitions as u64;
            updates.push(u);
        }
    }

    let mut final_checkpoint = None;
    if let Some(sk) = sink.as_ref() {
        let path = sk.dir.join("final.ckpt");
        save_checkpoint(
            &path,
            &Checkpoint {
                params: learner.params.clone(),
                rng: rng.clone(),
                step: steps,
            },
        )?;
        final_checkpoint = Some(path);
    }

    Ok(TrainingOutcome {
        params: learner.params,
        summaries,
        updates,
        steps,
        episodes,
        consumed,
        residue: buffer.len(),
        stopped,
        rng,
        final_checkpoint,
    })
}

/// Who picks the actions during evaluation.
#[derive(Debug, Clone, Copy)]
pub enum Actor<'a> {
    Policy(&'a PolicyParams<f32>),
    /// Uniform thrust and turn in [-1, 1], fair-coin signal.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EvalBudget {
    /// Total environment steps, split evenly across runs; the last episode of each
    /// run is played to its end.
    Steps(u64),
    EpisodesPerRun(usize),
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub budget: EvalBudget,
    /// Mean action and argmax signal instead of sampling.
    pub deterministic: bool,
    pub seed: u64,
    pub report: ReportOptions,
    /// Writes `run-NN.jsonl` replay logs here.
    pub log_dir: Option<PathBuf>,
    /// Also return the logs in memory.
    pub keep_logs: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            budget: EvalBudget::Steps(1_000_000),
            deterministic: false,
            seed: 0,
            report: ReportOptions::default(),
            log_dir: None,
            keep_logs: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub report: EvalReport,
    pub metrics: Vec<Vec<EpisodeMetrics>>,
    pub logs: Vec<ReplayLog>,
}

fn choose(actor: Actor<'_>, obs: &[f32], deterministic: bool, rng: &mut ChaCha8Rng) -> Result<AgentAction> {
    Ok(match actor {
        Actor::Policy(p) => {
            let d = p.forward(obs)?.distribution();
            if deterministic {
                d.mode().action
            } else {
                d.sample(rng).action
            }
        }
        Actor::Random => AgentAction::new(
            rng.random_range(-1.0..=1.0),
            rng.random_range(-1.0..=1.0),
            rng.random_bool(0.5),
        ),
    })
}

fn pose(v: &world::VesselState) -> [f64; 4] {
    [v.position[0], v.position[1], v.heading[0], v.heading[1]]
}

/// Plays one episode to termination and records every step.
pub fn record_episode(
    actor: Actor<'_>,
    mut world: WorldState,
    deterministic: bool,
    rng: &mut ChaCha8Rng,
    header: EpisodeHeader,
) -> Result<EpisodeLog> {
    let mut header = header;
    header.scenario = world.spec;
    header.mode = world.config.mode;
    header.collection_radius = world.config.physics.collection_radius;
    header.pebbles = world.pebbles.clone();
    header.poses = world.vessels.iter().map(pose).collect();
    let (mut obs, mut frames) = first_observations(&world);
    let n = world.agent_count();
    let mut steps = Vec::new();
    loop {
        let actions = obs
            .iter()
            .map(|o| choose(actor, o, deterministic, rng))
            .collect::<Result<Vec<_>>>()?;
        let out = world.step(&actions)?;
        let graph = world.graph();
        let observed = (0..n)
            .map(|i| {
                let j = graph.nearest(i);
                (world.config.mode.enabled() && graph.connected(i, j)).then_some(j)
            })
            .collect();
        steps.push(StepRecord {
            t: world.step,
            poses: world.vessels.iter().map(pose).collect(),
            actions: actions
                .iter()
                .map(|a| {
                    let a = a.clamped();
                    [a.thrust, a.turn]
                })
                .collect(),
            signals: world.signals(),
            observed,
            local: out.local_reward,
            global: out.global_reward,
            events: out.collected_events,
            edges: graph.edges(),
            done: out.done,
            cause: out.cause,
        });
        if out.done {
            break;
        }
        for i in 0..n {
            let (o, f) = world::observe(&world, i, Some(&frames[i]));
            obs[i] = o.0;
            frames[i] = f;
        }
    }
    Ok(EpisodeLog { header, steps })
}

/// Rolls episodes on every test seed (one run per seed) without learning.
pub fn run_eval(actor: Actor<'_>, cfg: &ExperimentConfig, opts: &EvalOptions) -> Result<EvalOutcome> {
    cfg.validate()?;
    if let Actor::Policy(p) = actor {
        if *p.config() != cfg.net {
            return Err(Error::CheckpointShape(format!(
                "policy network {:?} does not match configured {:?}",
                p.config(),
                cfg.net
            )));
        }
    }
    if let Some(dir) = &opts.log_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let seeds: Vec<u64> = cfg.test_seeds.seeds().collect();
    let runs = seeds.len();
    let wcfg = cfg.world_config();

    let per_run = seeds
        .par_iter()
        .enumerate()
        .map(|(run, &scenario_seed)| -> Result<(Vec<EpisodeMetrics>, ReplayLog)> {
            let spec = cfg.scenario.with_seed(scenario_seed, cfg.test_seeds.y_shift);
            let mut rng = seeding::rng_for(seeding::derive(opts.seed, tags::EVAL), run as u64);
            // Spawns get their own stream so every actor sees the same episodes.
            let mut spawn_rng = seeding::rng_for(seeding::derive(opts.seed, tags::EPISODES), run as u64);
            let mut writer = match &opts.log_dir {
                Some(dir) => {
                    let p = dir.join(format!("run-{run:02}.jsonl"));
                    Some((BufWriter::new(File::create(&p).map_err(|e| Error::io(&p, e))?), p))
                }
                None => None,
            };
            let mut metrics = Vec::new();
            let mut logs = Vec::new();
            let mut taken = 0u64;
            for episode in 0.. {
                let more = match opts.budget {
                    EvalBudget::Steps(total) => taken < total.div_ceil(runs as u64),
                    EvalBudget::EpisodesPerRun(k) => episode < k,
                };
                if !more {
                    break;
                }
                let episode_seed: u64 = spawn_rng.random();
                let world = WorldState::reset(&spec, &wcfg, episode_seed)?;
                let header = EpisodeHeader {
                    run,
                    episode,
                    episode_seed,
                    scenario: spec,
                    mode: cfg.mode,
                    collection_radius: 0.0,
                    pebbles: Vec::new(),
                    poses: Vec::new(),
                };
                let log = record_episode(actor, world, opts.deterministic, &mut rng, header)?;
                taken += log.len() as u64;
                metrics.push(evalkit::episode_metrics(&log, &opts.report));
                if let Some((w, p)) = writer.as_mut() {
                    evalkit::write_episode(&mut *w, &log).map_err(|e| Error::io(p.as_path(), e))?;
                }
                if opts.keep_logs {
                    logs.push(log);
                }
            }
            if let Some((mut w, p)) = writer {
                w.flush().map_err(|e| Error::io(&p, e))?;
            }
            Ok((metrics, logs))
        })
        .collect::<Result<Vec<_>>>()?;

    let (metrics, logs): (Vec<_>, Vec<_>) = per_run.into_iter().unzip();
    let actions = if opts.deterministic { "deterministic" } else { "stochastic" };
    let report = evalkit::report_from_metrics(&metrics, cfg.mode, actions, &opts.report)?;
    Ok(EvalOutcome { report, metrics, logs })
}

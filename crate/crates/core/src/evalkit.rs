//! Replay logs and the metrics computed from them.
//!
//! A replay log is JSON lines. Each episode starts with an `episode` record followed
//! by one `step` record per environment step, in order:
//!
//! ```text
//! {"kind":"episode","run":0,"episode":0,"episode_seed":..,"scenario":{..},"mode":"mac",
//!  "collection_radius":2.0,"pebbles":[[x,y],..],"poses":[[x,y,hx,hy],..]}
//! {"kind":"step","t":1,"poses":[[x,y,hx,hy],..],"actions":[[thrust,turn],..],
//!  "signals":[..],"observed":[j|null,..],"local":[..],"global":[..],
//!  "events":[[agent,pebble],..],"edges":[[u,v],..],"done":false,"cause":"running"}
//! ```
//!
//! `t` counts steps taken, so poses in record `t` are the state after step `t`.
//! `observed[i]` is the nearest neighbour whose signal agent `i` saw after the step
//! (null when unlinked or in silent mode).

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::commnet::CommMode;
use crate::scenario::ScenarioSpec;
use crate::world::Termination;
use crate::{Error, Result};

pub const DEFAULT_WINDOW: usize = 20;
pub const DEFAULT_DEAD_BAND: f64 = 1.0;
pub const DEFAULT_RADIUS: f64 = 25.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeHeader {
    pub run: usize,
    pub episode: usize,
    pub episode_seed: u64,
    pub scenario: ScenarioSpec,
    pub mode: CommMode,
    pub collection_radius: f64,
    pub pebbles: Vec<[f64; 2]>,
    /// `[x, y, heading_x, heading_y]` per vessel.
    pub poses: Vec<[f64; 4]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: u32,
    pub poses: Vec<[f64; 4]>,
    pub actions: Vec<[f64; 2]>,
    pub signals: Vec<bool>,
    pub observed: Vec<Option<usize>>,
    pub local: Vec<f64>,
    pub global: Vec<f64>,
    pub events: Vec<(usize, usize)>,
    pub edges: Vec<(usize, usize)>,
    pub done: bool,
    pub cause: Termination,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Record {
    Episode(EpisodeHeader),
    Step(StepRecord),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeLog {
    pub header: EpisodeHeader,
    pub steps: Vec<StepRecord>,
}

impl EpisodeLog {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn agents(&self) -> usize {
        self.header.poses.len()
    }

    /// Vessel position after `t` steps (`t = 0` is the spawn).
    pub fn position(&self, agent: usize, t: usize) -> [f64; 2] {
        let p = if t == 0 {
            self.header.poses[agent]
        } else {
            self.steps[t - 1].poses[agent]
        };
        [p[0], p[1]]
    }

    /// Step at which each pebble was collected, if it was.
    pub fn collection_steps(&self) -> Vec<Option<usize>> {
        let mut at = vec![None; self.header.pebbles.len()];
        for s in &self.steps {
            for &(_, p) in &s.events {
                at[p] = Some(s.t as usize);
            }
        }
        at
    }

    /// Signal observations: one per (step, observer) with a linked nearest neighbour.
    pub fn comm_events(&self) -> Vec<CommEvent> {
        let mut out = Vec::new();
        for s in &self.steps {
            for (observer, seen) in s.observed.iter().enumerate() {
                if let Some(signaler) = *seen {
                    out.push(CommEvent {
                        step: s.t as usize,
                        signaler,
                        signal: s.signals[signaler],
                        observer,
                    });
                }
            }
        }
        out
    }
}

/// All episodes of one evaluation run.
pub type ReplayLog = Vec<EpisodeLog>;

pub fn write_episode<W: Write>(mut w: W, log: &EpisodeLog) -> std::io::Result<()> {
    serde_json::to_writer(&mut w, &Record::Episode(log.header.clone()))?;
    w.write_all(b"\n")?;
    for s in &log.steps {
        serde_json::to_writer(&mut w, &Record::Step(s.clone()))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_log<R: BufRead>(r: R) -> Result<ReplayLog> {
    let mut out: ReplayLog = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::ReplayFormat(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record =
            serde_json::from_str(&line).map_err(|e| Error::ReplayFormat(format!("line {}: {e}", n + 1)))?;
        match rec {
            Record::Episode(header) => out.push(EpisodeLog { header, steps: Vec::new() }),
            Record::Step(s) => match out.last_mut() {
                Some(ep) => ep.steps.push(s),
                None => return Err(Error::ReplayFormat(format!("line {}: step before episode header", n + 1))),
            },
        }
    }
    Ok(out)
}

pub fn save_log(path: &Path, log: &[EpisodeLog]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for ep in log {
        write_episode(&mut w, ep).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_log(path: &Path) -> Result<ReplayLog> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_log(BufReader::new(file))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CommEvent {
    pub step: usize,
    pub signaler: usize,
    pub signal: bool,
    pub observer: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Response {
    Followed,
    MovedAway,
    Neutral,
}

/// Compares observer–signaler distance at the event and `window` steps later.
pub fn classify_response(log: &EpisodeLog, event: &CommEvent, window: usize, dead_band: f64) -> Result<Response> {
    if event.step + window > log.len() {
        return Err(Error::WindowOverrun {
            step: event.step,
            window,
            len: log.len(),
        });
    }
    let dist = |t: usize| {
        let a = log.position(event.observer, t);
        let b = log.position(event.signaler, t);
        (a[0] - b[0]).hypot(a[1] - b[1])
    };
    let before = dist(event.step);
    let after = dist(event.step + window);
    Ok(if after < before - dead_band {
        Response::Followed
    } else if after > before + dead_band {
        Response::MovedAway
    } else {
        Response::Neutral
    })
}

/// Pebbles still in the water after `step` steps within `radius` of `agent`.
pub fn nearby_garbage_count(log: &EpisodeLog, agent: usize, step: usize, radius: f64) -> usize {
    let collected = log.collection_steps();
    count_nearby(log, &collected, agent, step, radius)
}

fn count_nearby(log: &EpisodeLog, collected: &[Option<usize>], agent: usize, step: usize, radius: f64) -> usize {
    let pos = log.position(agent, step);
    let r2 = radius * radius;
    log.header
        .pebbles
        .iter()
        .zip(collected)
        .filter(|(p, c)| c.is_none_or(|t| t > step) && (p[0] - pos[0]).powi(2) + (p[1] - pos[1]).powi(2) <= r2)
        .count()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReportOptions {
    pub window: usize,
    pub dead_band: f64,
    pub radius: f64,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self {
            window: DEFAULT_WINDOW,
            dead_band: DEFAULT_DEAD_BAND,
            radius: DEFAULT_RADIUS,
        }
    }
}

/// Report columns, in CSV order. Per-agent breakdowns follow these.
pub const COLUMNS: [&str; 14] = [
    "cumulative_reward",
    "episode_length",
    "local_reward",
    "global_reward",
    "signal_count",
    "followed_signal_1",
    "moved_away_signal_1",
    "neutral_signal_1",
    "followed_signal_0",
    "moved_away_signal_0",
    "neutral_signal_0",
    "skipped_events",
    "nearby_garbage_signal_1",
    "nearby_garbage_signal_0",
];

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EpisodeMetrics {
    pub cumulative_reward: f64,
    pub episode_length: f64,
    pub local_reward: f64,
    pub global_reward: f64,
    pub signal_count: f64,
    pub followed: [f64; 2],
    pub moved_away: [f64; 2],
    pub neutral: [f64; 2],
    pub skipped: f64,
    /// Mean over signal instances; NaN when there were none.
    pub nearby_garbage: [f64; 2],
    pub local_per_agent: Vec<f64>,
    pub global_per_agent: Vec<f64>,
}

impl EpisodeMetrics {
    fn row(&self) -> Vec<f64> {
        let mut v = vec![
            self.cumulative_reward,
            self.episode_length,
            self.local_reward,
            self.global_reward,
            self.signal_count,
            self.followed[1],
            self.moved_away[1],
            self.neutral[1],
            self.followed[0],
            self.moved_away[0],
            self.neutral[0],
            self.skipped,
            self.nearby_garbage[1],
            self.nearby_garbage[0],
        ];
        v.extend(&self.local_per_agent);
        v.extend(&self.global_per_agent);
        v
    }
}

pub fn episode_metrics(log: &EpisodeLog, opts: &ReportOptions) -> EpisodeMetrics {
    let n = log.agents();
    let mut m = EpisodeMetrics {
        episode_length: log.len() as f64,
        local_per_agent: vec![0.0; n],
        global_per_agent: vec![0.0; n],
        nearby_garbage: [f64::NAN; 2],
        ..EpisodeMetrics::default()
    };
    for s in &log.steps {
        for i in 0..n {
            m.local_per_agent[i] += s.local[i];
            m.global_per_agent[i] += s.global[i];
        }
    }
    m.local_reward = m.local_per_agent.iter().sum();
    m.global_reward = m.global_per_agent.iter().sum();
    m.cumulative_reward = m.local_reward + m.global_reward;

    if !log.header.mode.enabled() {
        m.nearby_garbage = [0.0; 2];
        return m;
    }

    m.signal_count = log.steps.iter().map(|s| s.signals.iter().filter(|&&b| b).count() as f64).sum();
    for ev in log.comm_events() {
        let k = usize::from(ev.signal);
        match classify_response(log, &ev, opts.window, opts.dead_band) {
            Ok(Response::Followed) => m.followed[k] += 1.0,
            Ok(Response::MovedAway) => m.moved_away[k] += 1.0,
            Ok(Response::Neutral) => m.neutral[k] += 1.0,
            Err(_) => m.skipped += 1.0,
        }
    }

    let collected = log.collection_steps();
    let mut sums = [0.0; 2];
    let mut counts = [0usize; 2];
    for s in &log.steps {
        for (i, &sig) in s.signals.iter().enumerate() {
            let k = usize::from(sig);
            sums[k] += count_nearby(log, &collected, i, s.t as usize, opts.radius) as f64;
            counts[k] += 1;
        }
    }
    for k in 0..2 {
        if counts[k] > 0 {
            m.nearby_garbage[k] = sums[k] / counts[k] as f64;
        }
    }
    m
}

/// Mean over the finite entries; NaN if there are none.
fn finite_mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = xs
        .into_iter()
        .filter(|x| x.is_finite())
        .fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Sample standard deviation (n − 1) over the finite entries; NaN below two.
fn finite_std(xs: &[f64]) -> f64 {
    let v: Vec<f64> = xs.iter().copied().filter(|x| x.is_finite()).collect();
    if v.len() < 2 {
        return f64::NAN;
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub run: usize,
    pub episodes: usize,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: CommMode,
    /// "stochastic" or "deterministic".
    pub actions: String,
    pub options: ReportOptions,
    pub columns: Vec<String>,
    pub runs: Vec<RunRow>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl EvalReport {
    fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    /// Cross-run `(mean, sample std)` of a column.
    pub fn get(&self, name: &str) -> Option<(f64, f64)> {
        self.column(name).map(|i| (self.mean[i], self.std[i]))
    }

    pub fn run_values(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.column(name)?;
        Some(self.runs.iter().map(|r| r.values[i]).collect())
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("run,episodes,{}\n", self.columns.join(","));
        let fmt = |v: &[f64]| v.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(",");
        for r in &self.runs {
            let _ = writeln!(s, "{},{},{}", r.run, r.episodes, fmt(&r.values));
        }
        let total: usize = self.runs.iter().map(|r| r.episodes).sum();
        let _ = writeln!(s, "mean,{total},{}", fmt(&self.mean));
        let _ = writeln!(s, "std,{total},{}", fmt(&self.std));
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "mode: {}   actions: {}   runs: {}   episodes: {}",
            self.mode.label(),
            self.actions,
            self.runs.len(),
            self.runs.iter().map(|r| r.episodes).sum::<usize>()
        );
        let _ = writeln!(
            s,
            "rewards are team totals per episode (local = sum over vessels of per-pebble rewards, global = sum of the shared bonus)"
        );
        let _ = writeln!(
            s,
            "follow/move-away: window {} steps, dead-band {} m; nearby garbage radius {} m",
            self.options.window, self.options.dead_band, self.options.radius
        );
        let width = self.columns.iter().map(|c| c.len()).max().unwrap_or(0);
        let _ = writeln!(s, "{:width$}  {:>14}  {:>14}", "metric", "mean", "std");
        for (i, c) in self.columns.iter().enumerate() {
            let _ = writeln!(s, "{c:width$}  {:>14.4}  {:>14.4}", self.mean[i], self.std[i]);
        }
        s
    }
}

/// Collapses per-run episode metrics: per-run means, then cross-run mean ± sample std.
pub fn report_from_metrics(
    runs: &[Vec<EpisodeMetrics>],
    mode: CommMode,
    actions: &str,
    opts: &ReportOptions,
) -> Result<EvalReport> {
    let agents = runs
        .iter()
        .flatten()
        .map(|m| m.local_per_agent.len())
        .max()
        .ok_or(Error::EmptyLog)?;
    let mut columns: Vec<String> = COLUMNS.iter().map(|c| c.to_string()).collect();
    columns.extend((0..agents).map(|i| format!("local_reward_agent_{i}")));
    columns.extend((0..agents).map(|i| format!("global_reward_agent_{i}")));

    let mut rows = Vec::new();
    for (run, eps) in runs.iter().enumerate() {
        if eps.is_empty() {
            continue;
        }
        let ep_rows: Vec<Vec<f64>> = eps.iter().map(EpisodeMetrics::row).collect();
        let values = (0..columns.len())
            .map(|c| finite_mean(ep_rows.iter().map(|r| r.get(c).copied().unwrap_or(f64::NAN))))
            .collect();
        rows.push(RunRow {
            run,
            episodes: eps.len(),
            values,
        });
    }
    let per_col = |c: usize| rows.iter().map(|r: &RunRow| r.values[c]).collect::<Vec<_>>();
    let mean = (0..columns.len()).map(|c| finite_mean(per_col(c))).collect();
    let std = (0..columns.len()).map(|c| finite_std(&per_col(c))).collect();
    Ok(EvalReport {
        mode,
        actions: actions.to_string(),
        options: *opts,
        columns,
        runs: rows,
        mean,
        std,
    })
}

/// Builds a report from run logs. The mode is taken from the first episode header.
pub fn build_report(logs: &[ReplayLog], actions: &str, opts: &ReportOptions) -> Result<EvalReport> {
    let mode = logs
        .iter()
        .flatten()
        .next()
        .map(|e| e.header.mode)
        .ok_or(Error::EmptyLog)?;
    let metrics: Vec<Vec<EpisodeMetrics>> = logs
        .iter()
        .map(|run| run.iter().map(|ep| episode_metrics(ep, opts)).collect())
        .collect();
    report_from_metrics(&metrics, mode, actions, opts)
}

const PATH_COLORS: [&str; 6] = ["#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// SVG plot of one episode: pebble layout, vessel paths, signal-1 raise points.
///
/// World coordinates are used directly with y flipped, so `points` attributes hold
/// positions in meters (three decimals).
pub fn render_paths(log: &EpisodeLog) -> String {
    let size = log.header.scenario.area_size;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {size} {size}" width="800" height="800">"#
    );
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{size}" height="{size}" fill="white" stroke="black" stroke-width="{}"/>"#, size / 400.0);
    let _ = writeln!(s, r#"<g transform="matrix(1 0 0 -1 0 {size})">"#);
    let dot = size / 300.0;
    let _ = writeln!(s, r##"<g id="pebbles" fill="#999999">"##);
    for p in &log.header.pebbles {
        let _ = writeln!(s, r#"<circle cx="{:.3}" cy="{:.3}" r="{dot:.3}"/>"#, p[0], p[1]);
    }
    let _ = writeln!(s, "</g>");
    for a in 0..log.agents() {
        let color = PATH_COLORS[a % PATH_COLORS.len()];
        let pts: Vec<String> = (0..=log.len())
            .map(|t| {
                let p = log.position(a, t);
                format!("{:.3},{:.3}", p[0], p[1])
            })
            .collect();
        let _ = writeln!(s, r#"<g id="vessel-{a}">"#);
        let [x0, y0] = log.position(a, 0);
        let _ = writeln!(s, r#"<circle class="start" cx="{x0:.3}" cy="{y0:.3}" r="{:.3}" fill="{color}"/>"#, 2.0 * dot);
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="{:.3}"/>"#,
            pts.join(" "),
            dot
        );
        for st in log.steps.iter().filter(|st| st.signals[a]) {
            let p = st.poses[a];
            let _ = writeln!(
                s,
                r#"<circle class="signal" cx="{:.3}" cy="{:.3}" r="{:.3}" fill="none" stroke="{color}"/>"#,
                p[0],
                p[1],
                1.5 * dot
            );
        }
        let _ = writeln!(s, "</g>");
    }
    let _ = writeln!(s, "</g>\n</svg>");
    s
}

pub fn write_paths(log: &EpisodeLog, path: &Path) -> Result<()> {
    std::fs::write(path, render_paths(log)).map_err(|e| Error::io(path, e))
}

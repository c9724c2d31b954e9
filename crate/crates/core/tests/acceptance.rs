//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits nonzero if
//! any fails. Tolerances are the constants below.

use std::panic::{self, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use opc_core::commnet::{self, CommMode};
use opc_core::evalkit::EpisodeLog;
use opc_core::optim::{self, PpoConfig, Sample};
use opc_core::policy::{read_checkpoint, write_checkpoint, Checkpoint, NetConfig, PolicyParams};
use opc_core::scenario::{self, ScenarioSpec};
use opc_core::trainer::{self, Actor, EvalBudget, EvalOptions, ExperimentConfig, RunHooks};
use opc_core::world::{self, VesselState, WorldConfig, WorldState, OBS_LEN, VECTOR_LEN, VISUAL_LEN};

const OBS_STATES: usize = 1000;
const REWARD_EPISODES: usize = 100;
const SCENARIO_SEEDS: u64 = 10;
const SPLIT_MIN_CELL_DIFF: f64 = 0.1;
const SCENARIO_BUDGET: Duration = Duration::from_secs(10);
const GAE_SEQUENCES: usize = 10_000;
const GAE_MAX_T: usize = 32;
const GAE_TOL: f64 = 1e-6;
const RATIO_TOL: f64 = 1e-6;
const FD_STEP: f64 = 1e-4;
const FD_REL_TOL: f64 = 1e-4;
/// Denominator floor for the relative error of gradients that are exactly zero.
const FD_REL_FLOOR: f64 = 1e-8;
const GRAD_BUDGET: Duration = Duration::from_secs(120);
const COMM_RANGE: f64 = 100.0;
const SYMMETRY_LAYOUTS: usize = 10_000;
const SMOKE_FACTOR: f64 = 2.0;
const SMOKE_EPISODES_PER_RUN: usize = 2;
const SMOKE_BUDGET: Duration = Duration::from_secs(30 * 60);
const MODE_SEEDS: u64 = 5;
const CHECKPOINT_OBS: usize = 100;

type Check = fn() -> (bool, String);

fn main() {
    let checks: [(&str, Check); 10] = [
        ("observation contract", observation_contract),
        ("reward accounting", reward_accounting),
        ("scenario determinism and split", scenario_split),
        ("GAE oracle", gae_oracle),
        ("PPO arithmetic", ppo_arithmetic),
        ("gradient correctness", gradient_check),
        ("comm semantics", comm_semantics),
        ("training smoke", training_smoke),
        ("MA vs MAC", ma_vs_mac),
        ("checkpoint round-trip", checkpoint_round_trip),
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for (name, check) in checks {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let t = Instant::now();
        let (pass, detail) = panic::catch_unwind(AssertUnwindSafe(check))
            .unwrap_or_else(|e| (false, format!("panicked: {:?}", e.downcast_ref::<String>().map(String::as_str).or(e.downcast_ref::<&str>().copied()))));
        if !pass {
            failed += 1;
        }
        println!(
            "{} {name}: {detail} [{:.1}s]",
            if pass { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

fn random_world(rng: &mut ChaCha8Rng) -> WorldState {
    let size = rng.random_range(30.0..300.0);
    let spec = ScenarioSpec {
        area_size: size,
        ..ScenarioSpec::default()
    };
    let agents = rng.random_range(2..6);
    let vessels = (0..agents)
        .map(|_| {
            let mut v = VesselState::at_rest(
                [rng.random_range(0.0..size), rng.random_range(0.0..size)],
                rng.random_range(0.0..std::f64::consts::TAU),
            );
            v.raised_signal = rng.random_bool(0.5);
            v
        })
        .collect();
    let pebbles = (0..rng.random_range(0..500))
        .map(|_| [rng.random_range(0.0..size), rng.random_range(0.0..size)])
        .collect();
    let mode = if rng.random_bool(0.5) { CommMode::Signal } else { CommMode::Silent };
    let config = WorldConfig {
        mode,
        ..WorldConfig::default()
    };
    let mut w = WorldState::from_parts(spec, config, vessels, pebbles);
    for k in 0..w.active.len() {
        w.active[k] = rng.random_bool(0.8);
    }
    w
}

fn observation_contract() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut bad = 0;
    let mut checked = 0;
    for _ in 0..OBS_STATES {
        let w = random_world(&mut rng);
        for a in 0..w.agent_count() {
            let (first, frame) = world::observe(&w, a, None);
            let (second, _) = world::observe(&w, a, Some(&frame));
            for o in [&first, &second] {
                checked += 1;
                let binary = o.visual().iter().all(|&v| v == 0.0 || v == 1.0);
                if o.vector().len() != VECTOR_LEN
                    || o.visual().len() != VISUAL_LEN
                    || o.as_slice().len() != OBS_LEN
                    || OBS_LEN != 1264
                    || !binary
                {
                    bad += 1;
                }
            }
        }
    }
    (
        bad == 0,
        format!("{checked} observations from {OBS_STATES} states, {bad} with wrong layout (vector 14, visual 1250, total 1264)"),
    )
}

/// Replays a log: local rewards are one per event, and after each event in order
/// every agent gains 0.01 × the smallest running count.
fn replay_rewards(log: &EpisodeLog) -> Result<u64, String> {
    let n = log.agents();
    let mut counts = vec![0u64; n];
    let mut pebbles = 0u64;
    let mut team_local = 0.0;
    for s in &log.steps {
        let mut local = vec![0.0; n];
        let mut global = 0.0;
        for &(a, _) in &s.events {
            counts[a] += 1;
            local[a] += 1.0;
            global += 0.01 * *counts.iter().min().unwrap() as f64;
        }
        pebbles += s.events.len() as u64;
        for i in 0..n {
            if s.local[i] != local[i] {
                return Err(format!("step {} agent {i}: local {} != {}", s.t, s.local[i], local[i]));
            }
            if s.global[i] != global {
                return Err(format!("step {} agent {i}: global {} != {}", s.t, s.global[i], global));
            }
            team_local += s.local[i];
        }
    }
    if team_local != pebbles as f64 {
        return Err(format!("team local {team_local} != {pebbles} pebbles"));
    }
    Ok(pebbles)
}

fn reward_accounting() -> (bool, String) {
    let mut cfg = ExperimentConfig::smoke();
    cfg.mode = CommMode::Signal;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut total = 0;
    let mut steps = 0;
    for e in 0..REWARD_EPISODES {
        let spec = cfg.scenario.with_seed(e as u64 % 100, 0.0);
        let w = WorldState::reset(&spec, &cfg.world_config(), e as u64).unwrap();
        let pebbles_before = w.active_pebbles();
        let header = opc_core::evalkit::EpisodeHeader {
            run: 0,
            episode: e,
            episode_seed: e as u64,
            scenario: spec,
            mode: cfg.mode,
            collection_radius: 0.0,
            pebbles: vec![],
            poses: vec![],
        };
        let log = trainer::record_episode(Actor::Random, w, false, &mut rng, header).unwrap();
        match replay_rewards(&log) {
            Ok(p) => {
                let collected = log.collection_steps().iter().filter(|c| c.is_some()).count() as u64;
                if p != collected || collected as usize > pebbles_before {
                    return (false, format!("episode {e}: {p} events vs {collected} collected"));
                }
                total += p;
                steps += log.len();
            }
            Err(msg) => return (false, format!("episode {e}: {msg}")),
        }
    }
    (
        total > 0,
        format!("{REWARD_EPISODES} random episodes, {steps} steps, {total} pebbles; local and global match the replay oracle exactly"),
    )
}

fn scenario_split() -> (bool, String) {
    let t = Instant::now();
    let mut min_diff = f64::INFINITY;
    let mut identical = true;
    for seed in 0..SCENARIO_SEEDS {
        let train = ScenarioSpec::default().with_seed(seed, 0.0);
        let test = ScenarioSpec::default().with_seed(seed, 200.0);
        let (f1, f2) = (scenario::scenario_field(&train), scenario::scenario_field(&train));
        let bits = |f: &scenario::DensityField| f.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        identical &= bits(&f1) == bits(&f2);
        let p1 = scenario::spawn_pebbles(&f1, &train).unwrap();
        let p2 = scenario::spawn_pebbles(&f2, &train).unwrap();
        identical &= p1.iter().zip(&p2).all(|(a, b)| a[0].to_bits() == b[0].to_bits() && a[1].to_bits() == b[1].to_bits());
        let g = scenario::scenario_field(&test);
        let diff = f1.values.iter().zip(&g.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        min_diff = min_diff.min(diff);
    }
    let elapsed = t.elapsed();
    (
        identical && min_diff > SPLIT_MIN_CELL_DIFF && elapsed < SCENARIO_BUDGET,
        format!(
            "seeds 0-{}: bit-identical {identical}; smallest max cell difference y_shift 0 vs 200 = {min_diff:.3} (> {SPLIT_MIN_CELL_DIFF}); {:.2}s (< {}s)",
            SCENARIO_SEEDS - 1,
            elapsed.as_secs_f64(),
            SCENARIO_BUDGET.as_secs()
        ),
    )
}

/// Â_t = Σ_k (γλ)^k δ_{t+k}, with the sum cut after the first terminal step.
fn gae_explicit(r: &[f64], v: &[f64], d: &[bool], boot: f64, g: f64, l: f64) -> Vec<f64> {
    let n = r.len();
    let next_v = |t: usize| if t + 1 < n { v[t + 1] } else { boot };
    let delta: Vec<f64> = (0..n)
        .map(|t| r[t] + if d[t] { 0.0 } else { g * next_v(t) } - v[t])
        .collect();
    (0..n)
        .map(|t| {
            let mut sum = 0.0;
            for k in 0..n - t {
                sum += (g * l).powi(k as i32) * delta[t + k];
                if d[t + k] {
                    break;
                }
            }
            sum
        })
        .collect()
}

fn gae_oracle() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for _ in 0..GAE_SEQUENCES {
        let n = rng.random_range(1..=GAE_MAX_T);
        let r: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let d: Vec<bool> = (0..n).map(|_| rng.random_bool(0.15)).collect();
        let boot = rng.random_range(-2.0..2.0);
        let g = rng.random_range(0.5..=1.0);
        let l = rng.random_range(0.0..=1.0);
        let (adv, ret) = optim::compute_gae(&r, &v, &d, boot, g, l).unwrap();
        let want = gae_explicit(&r, &v, &d, boot, g, l);
        for t in 0..n {
            worst = worst.max((adv[t] - want[t]).abs()).max((ret[t] - (want[t] + v[t])).abs());
        }
    }
    (
        worst < GAE_TOL,
        format!("{GAE_SEQUENCES} sequences (T <= {GAE_MAX_T}), max deviation from the explicit sum {worst:.2e} (< {GAE_TOL:e})"),
    )
}

fn tiny_net() -> NetConfig {
    NetConfig {
        conv1_filters: 2,
        conv2_filters: 2,
        hidden_units: 8,
        num_layers: 2,
    }
}

fn ppo_arithmetic() -> (bool, String) {
    let c1 = optim::ppo_clip_objective(0.7, 0.7, 1.3, 0.1);
    let c2 = optim::ppo_clip_objective(1.5f64.ln(), 0.0, 2.0, 0.1);
    let c3 = optim::ppo_clip_objective(0.5f64.ln(), 0.0, -1.0, 0.1);
    // 1.1·2 and 0.9·(−1) as they come out of the clip in double precision.
    let examples = c1 == 1.3 && c2 == (1.0 + 0.1) * 2.0 && c3 == (1.0 - 0.1) * -1.0;

    let mut cfg = ExperimentConfig::smoke();
    cfg.net = tiny_net();
    cfg.num_areas = 1;
    cfg.ppo.buffer_size = 512;
    cfg.ppo.batch_size = 128;
    cfg.ppo.max_steps = 512;
    let out = trainer::run_training(&cfg, RunHooks::default()).unwrap();
    let ratios: Vec<f64> = out.updates.iter().map(|u| u.first_minibatch_ratio).collect();
    let worst = ratios.iter().map(|r| (r - 1.0).abs()).fold(0.0, f64::max);
    (
        examples && !ratios.is_empty() && worst <= RATIO_TOL,
        format!(
            "clip examples r=1 -> {c1}, r=1.5 -> {c2}, r=0.5 -> {c3}; first-minibatch ratio deviation {worst:.2e} over {} update(s) (<= {RATIO_TOL:e})",
            ratios.len()
        ),
    )
}

fn gradient_check() -> (bool, String) {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let params: PolicyParams<f64> = PolicyParams::random(tiny_net(), 0.3, &mut rng);
    let obs: Vec<Vec<f64>> = (0..4)
        .map(|_| {
            (0..OBS_LEN)
                .map(|i| if i < VECTOR_LEN { rng.random_range(-1.0..1.0) } else { f64::from(u8::from(rng.random_bool(0.3))) })
                .collect()
        })
        .collect();
    let cfg = PpoConfig {
        beta: 0.05,
        epsilon: 0.2,
        ..PpoConfig::default()
    };
    // Old log-probs offset from the current ones so both clip branches appear,
    // far from the kinks.
    let offsets = [0.0, 0.5, -0.5, 0.05];
    let advantages = [1.3, -0.7, 0.9, -1.1];
    let samples: Vec<Sample<f64>> = obs
        .iter()
        .enumerate()
        .map(|(i, o)| {
            let raw = [rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)];
            let signal = i % 2 == 0;
            let lp = params.forward(o).unwrap().distribution().log_prob(raw, signal);
            Sample {
                obs: o,
                raw_action: raw,
                signal,
                log_prob_old: lp + offsets[i],
                advantage: advantages[i],
                ret: rng.random_range(-1.0..1.0),
            }
        })
        .collect();
    let (_, grad) = optim::surrogate_loss_grad(&params, &samples, &cfg).unwrap();
    let mut worst: f64 = 0.0;
    let mut worst_at = 0;
    let mut p = params.clone();
    for k in 0..params.len() {
        let orig = p.data[k];
        p.data[k] = orig + FD_STEP;
        let up = optim::surrogate_loss(&p, &samples, &cfg).unwrap().total;
        p.data[k] = orig - FD_STEP;
        let down = optim::surrogate_loss(&p, &samples, &cfg).unwrap().total;
        p.data[k] = orig;
        let fd = (up - down) / (2.0 * FD_STEP);
        let rel = (grad[k] - fd).abs() / grad[k].abs().max(fd.abs()).max(FD_REL_FLOOR);
        if rel > worst {
            worst = rel;
            worst_at = k;
        }
    }
    let name = params
        .tensor_ranges()
        .into_iter()
        .find(|(_, r)| r.contains(&worst_at))
        .map(|(n, _)| n)
        .unwrap_or_default();
    let elapsed = t.elapsed();
    (
        worst < FD_REL_TOL && elapsed < GRAD_BUDGET,
        format!(
            "{} parameters, h = {FD_STEP:e}, worst relative error {worst:.2e} at {name} (< {FD_REL_TOL:e}); {:.1}s",
            params.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn comm_semantics() -> (bool, String) {
    let at = |d: f64| vec![[0.0, 0.0], [d, 0.0]];
    let seen = |d: f64, mode| commnet::visible_signal(&commnet::build_graph(&at(d), COMM_RANGE), &[false, true], 0, mode);
    let inclusive = seen(100.0, CommMode::Signal);
    let beyond = !seen(100.0 + 1e-9, CommMode::Signal) && !seen(150.0, CommMode::Signal);
    let silent = !seen(100.0, CommMode::Silent) && !seen(5.0, CommMode::Silent);

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut asymmetric = 0;
    for _ in 0..SYMMETRY_LAYOUTS {
        let n = rng.random_range(2..8);
        let pos: Vec<[f64; 2]> = (0..n)
            .map(|_| [rng.random_range(0.0..250.0), rng.random_range(0.0..250.0)])
            .collect();
        let g = commnet::build_graph(&pos, COMM_RANGE);
        for u in 0..n {
            for v in 0..n {
                let d = (pos[u][0] - pos[v][0]).hypot(pos[u][1] - pos[v][1]);
                if g.connected(u, v) != g.connected(v, u) || (u != v && g.connected(u, v) != (d <= COMM_RANGE)) {
                    asymmetric += 1;
                }
            }
        }
    }
    (
        inclusive && beyond && silent && asymmetric == 0,
        format!(
            "100.0 m visible {inclusive}, beyond range hidden {beyond}, silent mode hidden {silent}; {asymmetric} asymmetric pairs over {SYMMETRY_LAYOUTS} layouts"
        ),
    )
}

struct SmokeRun {
    mode: CommMode,
    seed: u64,
    pebbles: f64,
    reward: f64,
    eval_signals: f64,
    train_signals_max: f64,
}

struct SmokeResults {
    runs: Vec<SmokeRun>,
    random_pebbles: f64,
    elapsed: Duration,
}

fn smoke_eval() -> EvalOptions {
    EvalOptions {
        budget: EvalBudget::EpisodesPerRun(SMOKE_EPISODES_PER_RUN),
        ..EvalOptions::default()
    }
}

/// Trains the smoke profile in both modes for every seed, once per process.
fn smoke_results() -> &'static SmokeResults {
    static CELL: OnceLock<SmokeResults> = OnceLock::new();
    CELL.get_or_init(|| {
        let t = Instant::now();
        let mut runs = Vec::new();
        for mode in [CommMode::Signal, CommMode::Silent] {
            for seed in 0..MODE_SEEDS {
                let mut cfg = ExperimentConfig::smoke();
                cfg.mode = mode;
                cfg.master_seed = seed;
                let out = trainer::run_training(&cfg, RunHooks::default()).unwrap();
                let eval = trainer::run_eval(Actor::Policy(&out.params), &cfg, &smoke_eval()).unwrap();
                runs.push(SmokeRun {
                    mode,
                    seed,
                    pebbles: eval.report.get("local_reward").unwrap().0,
                    reward: eval.report.get("cumulative_reward").unwrap().0,
                    eval_signals: eval.report.get("signal_count").unwrap().0,
                    train_signals_max: out
                        .summaries
                        .iter()
                        .map(|s| s.signal_count_per_episode)
                        .filter(|v| v.is_finite())
                        .fold(0.0, f64::max),
                });
            }
        }
        let random = trainer::run_eval(Actor::Random, &ExperimentConfig::smoke(), &smoke_eval()).unwrap();
        SmokeResults {
            runs,
            random_pebbles: random.report.get("local_reward").unwrap().0,
            elapsed: t.elapsed(),
        }
    })
}

fn training_smoke() -> (bool, String) {
    let r = smoke_results();
    let main = r.runs.iter().find(|x| x.mode == CommMode::Signal && x.seed == 0).unwrap();
    let per_run = r.elapsed / (2 * MODE_SEEDS as u32);
    let ratios: Vec<String> = r
        .runs
        .iter()
        .map(|x| format!("{}{}={:.2}", x.mode.label(), x.seed, x.pebbles / r.random_pebbles))
        .collect();
    (
        main.pebbles >= SMOKE_FACTOR * r.random_pebbles && per_run < SMOKE_BUDGET,
        format!(
            "mac seed 0: {:.2} pebbles/episode vs random {:.2} over {} eval episodes (need >= {SMOKE_FACTOR}x, got {:.2}x); {:.0}s per run; all runs' ratios: {}",
            main.pebbles,
            r.random_pebbles,
            10 * SMOKE_EPISODES_PER_RUN,
            main.pebbles / r.random_pebbles,
            per_run.as_secs_f64(),
            ratios.join(" ")
        ),
    )
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
    (m, v.sqrt())
}

fn ma_vs_mac() -> (bool, String) {
    let r = smoke_results();
    let pick = |m: CommMode| r.runs.iter().filter(move |x| x.mode == m);
    let ma: Vec<f64> = pick(CommMode::Silent).map(|x| x.reward).collect();
    let mac: Vec<f64> = pick(CommMode::Signal).map(|x| x.reward).collect();
    let ma_silent = pick(CommMode::Silent).all(|x| x.eval_signals == 0.0 && x.train_signals_max == 0.0);
    let mac_signals = pick(CommMode::Signal).all(|x| x.eval_signals > 0.0);
    let complete = ma.len() == MODE_SEEDS as usize && mac.len() == MODE_SEEDS as usize;
    let (ma_m, ma_s) = mean_std(&ma);
    let (mac_m, mac_s) = mean_std(&mac);
    (
        complete && ma_silent && mac_signals,
        format!(
            "cumulative reward MA {ma_m:.2} ± {ma_s:.2}, MAC {mac_m:.2} ± {mac_s:.2} over {MODE_SEEDS} seeds; MA signals 0: {ma_silent}; MAC signals > 0: {mac_signals}; MAC >= MA (not gating): {}",
            mac_m >= ma_m
        ),
    )
}

fn checkpoint_round_trip() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let net = NetConfig {
        hidden_units: 64,
        ..NetConfig::default()
    };
    let ck = Checkpoint {
        params: PolicyParams::init(net, &mut rng),
        rng: rng.clone(),
        step: 777,
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("policy.ckpt");
    opc_core::policy::save_checkpoint(&path, &ck).unwrap();
    let back = opc_core::policy::load_checkpoint(&path, Some(&net)).unwrap();
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, &ck).unwrap();
    let again = read_checkpoint(buf.as_slice(), Some(&net)).unwrap();
    let mut mismatches = 0;
    for _ in 0..CHECKPOINT_OBS {
        let obs: Vec<f32> = (0..OBS_LEN)
            .map(|i| if i < VECTOR_LEN { rng.random_range(-1.0..1.0) } else { f32::from(u8::from(rng.random_bool(0.1))) })
            .collect();
        let a = ck.params.forward(&obs).unwrap();
        for b in [back.params.forward(&obs).unwrap(), again.params.forward(&obs).unwrap()] {
            let bits = |h: &opc_core::policy::HeadOutput<f32>| {
                [h.mean[0], h.mean[1], h.log_std[0], h.log_std[1], h.logits[0], h.logits[1], h.value].map(f32::to_bits)
            };
            if bits(&a) != bits(&b) {
                mismatches += 1;
            }
        }
    }
    let meta = back.step == ck.step && back.rng == ck.rng;
    (
        mismatches == 0 && meta,
        format!("{CHECKPOINT_OBS} observations, {mismatches} forward outputs differ bitwise; step and RNG state restored: {meta}"),
    )
}

//! Episode dynamics for one training area.
//!
//! Vessels are unit-mass discs driven by a forward force along their heading and a
//! turning torque, integrated with semi-implicit Euler and linear drag. After the
//! integration step, pebbles inside the collection radius are picked up. Termination
//! is then checked in order: boundary, collision, step cap.

use serde::{Deserialize, Serialize};

use crate::commnet::{self, CommMode};
use crate::scenario::{self, ScenarioSpec};
use crate::{Error, Result};

pub const VECTOR_FRAME: usize = 7;
pub const GRID_SIDE: usize = 25;
pub const GRID_CELL: f64 = 2.0;
pub const VISUAL_FRAME: usize = GRID_SIDE * GRID_SIDE;
pub const STACK: usize = 2;
pub const VECTOR_LEN: usize = STACK * VECTOR_FRAME;
pub const VISUAL_LEN: usize = STACK * VISUAL_FRAME;
pub const OBS_LEN: usize = VECTOR_LEN + VISUAL_LEN;

/// Global bonus per collection event, per unit of the weakest agent's count.
pub const GLOBAL_REWARD_SCALE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicsConfig {
    pub dt: f64,
    pub mass: f64,
    pub linear_drag: f64,
    pub angular_drag: f64,
    /// Force per unit of thrust action.
    pub move_speed: f64,
    /// Torque per unit of turn action, degrees/s².
    pub rotation_speed: f64,
    pub collection_radius: f64,
    pub vessel_radius: f64,
}

impl Default for PhysicsConfig {
    fn default() -> Self {
        Self {
            dt: 0.1,
            mass: 1.0,
            linear_drag: 0.5,
            angular_drag: 0.5,
            move_speed: 2.0,
            rotation_speed: 300.0,
            collection_radius: 2.0,
            vessel_radius: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub physics: PhysicsConfig,
    pub mode: CommMode,
    pub agents: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            physics: PhysicsConfig::default(),
            mode: CommMode::Signal,
            agents: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VesselState {
    pub position: [f64; 2],
    /// Unit vector.
    pub heading: [f64; 2],
    pub linear_velocity: [f64; 2],
    pub angular_velocity: f64,
    pub collected_count: u32,
    pub raised_signal: bool,
}

impl VesselState {
    pub fn at_rest(position: [f64; 2], heading_angle: f64) -> Self {
        Self {
            position,
            heading: [heading_angle.cos(), heading_angle.sin()],
            linear_velocity: [0.0; 2],
            angular_velocity: 0.0,
            collected_count: 0,
            raised_signal: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Running,
    Boundary,
    Collision,
    StepCap,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AgentAction {
    pub thrust: f64,
    pub turn: f64,
    pub signal: bool,
}

impl AgentAction {
    pub fn new(thrust: f64, turn: f64, signal: bool) -> Self {
        Self {
            thrust,
            turn,
            signal,
        }
    }

    pub fn clamped(self) -> Self {
        Self {
            thrust: clamp_unit(self.thrust),
            turn: clamp_unit(self.turn),
            signal: self.signal,
        }
    }
}

fn clamp_unit(v: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(-1.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub local_reward: Vec<f64>,
    pub global_reward: Vec<f64>,
    /// `(agent, pebble)` pairs in pebble-index order.
    pub collected_events: Vec<(usize, usize)>,
    pub done: bool,
    pub cause: Termination,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldState {
    pub spec: ScenarioSpec,
    pub config: WorldConfig,
    pub vessels: Vec<VesselState>,
    pub pebbles: Vec<[f64; 2]>,
    pub active: Vec<bool>,
    pub step: u32,
    pub termination: Termination,
}

impl WorldState {
    /// Fresh episode: pebbles from the scenario field, randomised vessel poses.
    pub fn reset(spec: &ScenarioSpec, config: &WorldConfig, episode_seed: u64) -> Result<Self> {
        spec.validate()?;
        if config.agents < 2 {
            return Err(Error::Config("at least two agents are required".into()));
        }
        let field = scenario::scenario_field(spec);
        let pebbles = scenario::spawn_pebbles(&field, spec)?;
        let vessels = scenario::spawn_vessels(spec, episode_seed, config.agents)
            .into_iter()
            .map(|p| VesselState::at_rest(p.position, p.heading))
            .collect();
        Ok(Self::from_parts(*spec, *config, vessels, pebbles))
    }

    /// Assembles a running world from explicit vessels and pebbles.
    pub fn from_parts(
        spec: ScenarioSpec,
        config: WorldConfig,
        vessels: Vec<VesselState>,
        pebbles: Vec<[f64; 2]>,
    ) -> Self {
        let active = vec![true; pebbles.len()];
        Self {
            spec,
            config: WorldConfig {
                agents: vessels.len(),
                ..config
            },
            vessels,
            pebbles,
            active,
            step: 0,
            termination: Termination::Running,
        }
    }

    pub fn is_done(&self) -> bool {
        self.termination != Termination::Running
    }

    pub fn agent_count(&self) -> usize {
        self.vessels.len()
    }

    pub fn active_pebbles(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }

    pub fn collected_counts(&self) -> Vec<u32> {
        self.vessels.iter().map(|v| v.collected_count).collect()
    }

    pub fn positions(&self) -> Vec<[f64; 2]> {
        self.vessels.iter().map(|v| v.position).collect()
    }

    pub fn signals(&self) -> Vec<bool> {
        self.vessels.iter().map(|v| v.raised_signal).collect()
    }

    pub fn graph(&self) -> commnet::CommGraph {
        commnet::build_graph(&self.positions(), self.spec.comm_range)
    }

    /// Advances one environment step of `config.physics.dt` seconds.
    pub fn step(&mut self, actions: &[AgentAction]) -> Result<StepOutcome> {
        if self.is_done() {
            return Err(Error::SteppedTerminated);
        }
        if actions.len() != self.vessels.len() {
            return Err(Error::DimensionMismatch {
                expected: self.vessels.len(),
                actual: actions.len(),
            });
        }
        let phys = self.config.physics;
        let signalling = self.config.mode.enabled();
        let torque_scale = phys.rotation_speed.to_radians();

        for (v, a) in self.vessels.iter_mut().zip(actions) {
            let a = a.clamped();
            let force = a.thrust * phys.move_speed;
            for k in 0..2 {
                let accel = force * v.heading[k] / phys.mass - phys.linear_drag * v.linear_velocity[k];
                v.linear_velocity[k] += accel * phys.dt;
                v.position[k] += v.linear_velocity[k] * phys.dt;
            }
            let ang_accel = a.turn * torque_scale / phys.mass - phys.angular_drag * v.angular_velocity;
            v.angular_velocity += ang_accel * phys.dt;
            let (s, c) = (v.angular_velocity * phys.dt).sin_cos();
            let [hx, hy] = v.heading;
            let (nx, ny) = (hx * c - hy * s, hx * s + hy * c);
            let norm = nx.hypot(ny);
            v.heading = [nx / norm, ny / norm];
            v.raised_signal = signalling && a.signal;
        }

        let events = self.collect_pebbles();
        self.step += 1;
        self.termination = self.check_termination();

        let rewards = compute_rewards(&events, &self.collected_counts());
        Ok(StepOutcome {
            local_reward: rewards.iter().map(|r| r.0).collect(),
            global_reward: rewards.iter().map(|r| r.1).collect(),
            collected_events: events,
            done: self.is_done(),
            cause: self.termination,
        })
    }

    fn collect_pebbles(&mut self) -> Vec<(usize, usize)> {
        let r2 = self.config.physics.collection_radius.powi(2);
        let mut events = Vec::new();
        for (i, p) in self.pebbles.iter().enumerate() {
            if !self.active[i] {
                continue;
            }
            let mut winner: Option<(usize, f64)> = None;
            for (a, v) in self.vessels.iter().enumerate() {
                let d2 = (v.position[0] - p[0]).powi(2) + (v.position[1] - p[1]).powi(2);
                if d2 <= r2 && winner.is_none_or(|(_, best)| d2 < best) {
                    winner = Some((a, d2));
                }
            }
            if let Some((a, _)) = winner {
                self.active[i] = false;
                events.push((a, i));
            }
        }
        for &(a, _) in &events {
            self.vessels[a].collected_count += 1;
        }
        events
    }

    fn check_termination(&self) -> Termination {
        let size = self.spec.area_size;
        let outside = |p: [f64; 2]| p.iter().any(|&c| !(0.0..=size).contains(&c));
        if self.vessels.iter().any(|v| outside(v.position)) {
            return Termination::Boundary;
        }
        let min_gap = 2.0 * self.config.physics.vessel_radius;
        for (i, a) in self.vessels.iter().enumerate() {
            for b in &self.vessels[i + 1..] {
                let d = (a.position[0] - b.position[0]).hypot(a.position[1] - b.position[1]);
                if d < min_gap {
                    return Termination::Collision;
                }
            }
        }
        if self.step >= self.spec.max_steps {
            return Termination::StepCap;
        }
        Termination::Running
    }

    /// The single-step observation frame for `agent`.
    pub fn frame(&self, agent: usize) -> Frame {
        let size = self.spec.area_size;
        let v = &self.vessels[agent];
        let positions = self.positions();
        let graph = commnet::build_graph(&positions, self.spec.comm_range);
        let nn = graph.nearest(agent);
        let seen = commnet::visible_signal(&graph, &self.signals(), agent, self.config.mode);

        let vector = [
            (v.position[0] / size) as f32,
            (v.position[1] / size) as f32,
            v.heading[0] as f32,
            v.heading[1] as f32,
            (positions[nn][0] / size) as f32,
            (positions[nn][1] / size) as f32,
            if seen { 1.0 } else { 0.0 },
        ];

        let mut visual = vec![0.0f32; VISUAL_FRAME];
        let half = GRID_SIDE as f64 * GRID_CELL / 2.0;
        for (p, _) in self.pebbles.iter().zip(&self.active).filter(|(_, &on)| on) {
            let col = ((p[0] - v.position[0] + half) / GRID_CELL).floor();
            let row = ((p[1] - v.position[1] + half) / GRID_CELL).floor();
            if (0.0..GRID_SIDE as f64).contains(&col) && (0.0..GRID_SIDE as f64).contains(&row) {
                visual[row as usize * GRID_SIDE + col as usize] = 1.0;
            }
        }
        Frame { vector, visual }
    }
}

/// Splits collection events into per-agent `(local, global)` rewards.
///
/// `counts` are the totals after this step's collections. Events are replayed in
/// order; after each one every agent receives `0.01 × min(counts so far)`.
pub fn compute_rewards(events: &[(usize, usize)], counts: &[u32]) -> Vec<(f64, f64)> {
    let mut running: Vec<u32> = counts.to_vec();
    for &(a, _) in events {
        running[a] -= 1;
    }
    let mut local = vec![0.0; counts.len()];
    let mut global = 0.0;
    for &(a, _) in events {
        running[a] += 1;
        local[a] += 1.0;
        global += GLOBAL_REWARD_SCALE * f64::from(*running.iter().min().unwrap_or(&0));
    }
    local.into_iter().map(|l| (l, global)).collect()
}

/// One timestep's worth of observation for one agent.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub vector: [f32; VECTOR_FRAME],
    pub visual: Vec<f32>,
}

/// Two stacked frames, laid out as
/// `[vector prev (7), vector cur (7), visual prev (625), visual cur (625)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentObservation(pub Vec<f32>);

impl AgentObservation {
    pub fn stack(prev: &Frame, cur: &Frame) -> Self {
        let mut v = Vec::with_capacity(OBS_LEN);
        v.extend_from_slice(&prev.vector);
        v.extend_from_slice(&cur.vector);
        v.extend_from_slice(&prev.visual);
        v.extend_from_slice(&cur.visual);
        Self(v)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn vector(&self) -> &[f32] {
        &self.0[..VECTOR_LEN]
    }

    pub fn visual(&self) -> &[f32] {
        &self.0[VECTOR_LEN..]
    }
}

/// Builds the stacked observation; with no previous frame the current one is duplicated.
pub fn observe(world: &WorldState, agent: usize, prev: Option<&Frame>) -> (AgentObservation, Frame) {
    let cur = world.frame(agent);
    let obs = AgentObservation::stack(prev.unwrap_or(&cur), &cur);
    (obs, cur)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(size: f64) -> ScenarioSpec {
        ScenarioSpec {
            area_size: size,
            pebble_count: 0,
            ..ScenarioSpec::default()
        }
    }

    fn idle(n: usize) -> Vec<AgentAction> {
        vec![AgentAction::default(); n]
    }

    fn three_vessels() -> Vec<VesselState> {
        vec![
            VesselState::at_rest([50.0, 50.0], 0.0),
            VesselState::at_rest([100.0, 100.0], 0.0),
            VesselState::at_rest([150.0, 50.0], 0.0),
        ]
    }

    #[test]
    fn reset_is_deterministic_and_fresh() {
        let spec = ScenarioSpec::default().with_seed(3, 0.0);
        let a = WorldState::reset(&spec, &WorldConfig::default(), 7).unwrap();
        let b = WorldState::reset(&spec, &WorldConfig::default(), 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.step, 0);
        assert_eq!(a.active_pebbles(), 400);
        assert!(a.vessels.iter().all(|v| v.collected_count == 0 && !v.raised_signal));
    }

    #[test]
    fn idle_drift_and_no_reward() {
        let mut vessels = three_vessels();
        vessels[0].linear_velocity = [1.0, 0.0];
        let mut w = WorldState::from_parts(spec(200.0), WorldConfig::default(), vessels, vec![]);
        let out = w.step(&idle(3)).unwrap();
        // Drag decays the velocity before the position update.
        let v = 1.0 - 0.5 * 1.0 * 0.1;
        assert!((w.vessels[0].position[0] - (50.0 + v * 0.1)).abs() < 1e-12);
        assert_eq!(w.vessels[1].position, [100.0, 100.0]);
        assert!(out.local_reward.iter().all(|&r| r == 0.0));
        assert!(out.global_reward.iter().all(|&r| r == 0.0));
    }

    #[test]
    fn pebble_within_radius_collected() {
        let mut w = WorldState::from_parts(
            spec(200.0),
            WorldConfig::default(),
            three_vessels(),
            vec![[50.5, 50.0], [20.0, 20.0]],
        );
        let out = w.step(&idle(3)).unwrap();
        assert_eq!(out.collected_events, vec![(0, 0)]);
        assert_eq!(out.local_reward, vec![1.0, 0.0, 0.0]);
        assert_eq!(w.active, vec![false, true]);
        assert_eq!(w.vessels[0].collected_count, 1);
    }

    #[test]
    fn contested_pebble_goes_to_nearest_then_lower_index() {
        let vessels = vec![
            VesselState::at_rest([10.0, 10.0], 0.0),
            VesselState::at_rest([13.0, 10.0], 0.0),
            VesselState::at_rest([100.0, 100.0], 0.0),
        ];
        let cfg = WorldConfig {
            physics: PhysicsConfig {
                vessel_radius: 0.5,
                ..PhysicsConfig::default()
            },
            ..WorldConfig::default()
        };
        let mut w = WorldState::from_parts(spec(200.0), cfg, vessels, vec![[11.9, 10.0], [11.5, 10.0]]);
        let out = w.step(&idle(3)).unwrap();
        assert_eq!(out.collected_events, vec![(1, 0), (0, 1)]);
    }

    #[test]
    fn global_reward_weakest_link() {
        let r = compute_rewards(&[(2, 9)], &[5, 3, 8]);
        for (i, &(l, g)) in r.iter().enumerate() {
            assert_eq!(l, if i == 2 { 1.0 } else { 0.0 });
            assert!((g - 0.03).abs() < 1e-15);
        }
        assert!(compute_rewards(&[], &[1, 2, 3]).iter().all(|&(l, g)| l == 0.0 && g == 0.0));
        // Two events in one step: the weakest agent catches up mid-step.
        let r = compute_rewards(&[(1, 0), (1, 1)], &[2, 2, 4]);
        assert!((r[0].1 - (0.01 * 1.0 + 0.01 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn boundary_termination_is_absorbing() {
        let mut vessels = three_vessels();
        vessels[0].position = [199.95, 50.0];
        vessels[0].linear_velocity = [1.0, 0.0];
        let mut w = WorldState::from_parts(spec(200.0), WorldConfig::default(), vessels, vec![]);
        let out = w.step(&idle(3)).unwrap();
        assert!(out.done);
        assert_eq!(out.cause, Termination::Boundary);
        assert!(matches!(w.step(&idle(3)), Err(Error::SteppedTerminated)));
    }

    #[test]
    fn overlap_is_collision() {
        let vessels = vec![
            VesselState::at_rest([50.0, 50.0], 0.0),
            VesselState::at_rest([53.9, 50.0], 0.0),
            VesselState::at_rest([150.0, 150.0], 0.0),
        ];
        let mut w = WorldState::from_parts(spec(200.0), WorldConfig::default(), vessels, vec![]);
        assert_eq!(w.step(&idle(3)).unwrap().cause, Termination::Collision);
    }

    #[test]
    fn step_cap() {
        let s = ScenarioSpec {
            max_steps: 3,
            ..spec(200.0)
        };
        let mut w = WorldState::from_parts(s, WorldConfig::default(), three_vessels(), vec![]);
        assert!(!w.step(&idle(3)).unwrap().done);
        assert!(!w.step(&idle(3)).unwrap().done);
        assert_eq!(w.step(&idle(3)).unwrap().cause, Termination::StepCap);
    }

    #[test]
    fn silent_mode_drops_signals() {
        let cfg = WorldConfig {
            mode: CommMode::Silent,
            ..WorldConfig::default()
        };
        let mut w = WorldState::from_parts(spec(200.0), cfg, three_vessels(), vec![]);
        w.step(&vec![AgentAction::new(0.0, 0.0, true); 3]).unwrap();
        assert!(w.signals().iter().all(|&s| !s));
    }

    #[test]
    fn observation_layout() {
        let mut w = WorldState::from_parts(
            spec(200.0),
            WorldConfig::default(),
            three_vessels(),
            vec![[50.0, 50.0], [75.1, 50.0], [26.0, 26.0]],
        );
        let (obs, frame) = observe(&w, 0, None);
        assert_eq!(obs.as_slice().len(), OBS_LEN);
        assert_eq!(OBS_LEN, 1264);
        // Pebble at the vessel position lands in the centre cell.
        assert_eq!(frame.visual[12 * GRID_SIDE + 12], 1.0);
        // 75.1 is outside the 50 m window; (26, 26) is the bottom-left corner cell.
        assert_eq!(frame.visual[0], 1.0);
        assert_eq!(frame.visual.iter().sum::<f32>(), 2.0);
        assert_eq!(&frame.vector[..4], &[0.25, 0.25, 1.0, 0.0]);
        assert_eq!(&frame.vector[4..6], &[0.5, 0.5]);

        w.vessels[1].raised_signal = true;
        let (obs2, _) = observe(&w, 0, Some(&frame));
        assert_eq!(obs2.vector()[6], 0.0);
        assert_eq!(obs2.vector()[13], 1.0);
    }

    #[test]
    fn empty_window_is_blank() {
        let w = WorldState::from_parts(spec(200.0), WorldConfig::default(), three_vessels(), vec![[199.0, 1.0]]);
        assert!(w.frame(1).visual.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn action_clamping() {
        let a = AgentAction::new(3.0, -7.0, true).clamped();
        assert_eq!((a.thrust, a.turn), (1.0, -1.0));
    }
}

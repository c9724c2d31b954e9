//! Generalized advantage estimation and the PPO-Clip update.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::policy::{HeadGrad, PolicyParams, Real};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LrSchedule {
    Linear,
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PpoConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub epsilon: f64,
    pub beta: f64,
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    pub num_epoch: usize,
    pub batch_size: usize,
    pub buffer_size: usize,
    pub time_horizon: usize,
    /// Total agent steps of the run; the linear schedule reaches zero here.
    pub max_steps: u64,
    pub value_coef: f64,
    pub normalize_advantages: bool,
    pub adam: AdamConfig,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lambda: 0.95,
            epsilon: 0.1,
            beta: 0.01,
            learning_rate: 1e-5,
            lr_schedule: LrSchedule::Linear,
            num_epoch: 3,
            batch_size: 512,
            buffer_size: 10240,
            time_horizon: 128,
            max_steps: 20_000_000,
            value_coef: 0.5,
            normalize_advantages: true,
            adam: AdamConfig::default(),
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must be in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad("lambd must be in [0, 1]");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive");
        }
        if self.batch_size == 0 || self.buffer_size == 0 {
            return bad("batch_size and buffer_size must be positive");
        }
        if self.batch_size > self.buffer_size {
            return bad("batch_size must not exceed buffer_size");
        }
        if self.time_horizon == 0 {
            return bad("time_horizon must be positive");
        }
        if self.num_epoch == 0 {
            return bad("num_epoch must be positive");
        }
        if !(self.learning_rate >= 0.0) {
            return bad("learning_rate must be non-negative");
        }
        Ok(())
    }

    /// Learning rate at `progress` ∈ [0, 1] of the run.
    pub fn learning_rate_at(&self, progress: f64) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Linear => self.learning_rate * (1.0 - progress.clamp(0.0, 1.0)),
        }
    }
}

/// Advantages and returns over one trajectory segment.
///
/// `bootstrap_value` is `V` of the state following the last transition (zero when
/// that transition is terminal; `dones` also masks it).
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap_value: f64,
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if rewards.len() != values.len() || rewards.len() != dones.len() {
        return Err(Error::LengthMismatch {
            what: format!(
                "rewards {}, values {}, dones {}",
                rewards.len(),
                values.len(),
                dones.len()
            ),
        });
    }
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    let mut next_value = bootstrap_value;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        next_adv = delta + gamma * lambda * live * next_adv;
        adv[t] = next_adv;
        next_value = values[t];
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

pub fn ppo_clip_objective(log_prob_new: f64, log_prob_old: f64, advantage: f64, epsilon: f64) -> f64 {
    let r = (log_prob_new - log_prob_old).exp();
    let clipped = r.clamp(1.0 - epsilon, 1.0 + epsilon);
    (r * advantage).min(clipped * advantage)
}

pub fn value_loss(values: &[f64], returns: &[f64]) -> Result<f64> {
    if values.len() != returns.len() {
        return Err(Error::LengthMismatch {
            what: format!("values {}, returns {}", values.len(), returns.len()),
        });
    }
    if values.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = values.iter().zip(returns).map(|(v, r)| (v - r).powi(2)).sum();
    Ok(sum / values.len() as f64)
}

/// Standardises in place to zero mean and unit (population) standard deviation.
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.is_empty() {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-8);
    for a in adv.iter_mut() {
        *a = (*a - mean) / std;
    }
}

/// One processed experience, ready for the surrogate.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub obs: Vec<f32>,
    pub raw_action: [f64; 2],
    pub signal: bool,
    pub log_prob: f64,
    pub value: f64,
    pub advantage: f64,
    pub ret: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub obs: Vec<f32>,
    pub raw_action: [f64; 2],
    pub signal: bool,
    pub log_prob: f64,
    pub reward: f64,
    pub value: f64,
    pub done: bool,
}

/// One agent's in-flight trajectory since its last hand-off.
#[derive(Debug, Clone, Default)]
pub struct Segment {
    steps: Vec<Step>,
}

impl Segment {
    pub fn push(&mut self, step: Step) {
        self.steps.push(step);
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Runs GAE over the segment and empties it.
    pub fn finish(&mut self, bootstrap_value: f64, gamma: f64, lambda: f64) -> Vec<Transition> {
        let steps = std::mem::take(&mut self.steps);
        let rewards: Vec<f64> = steps.iter().map(|s| s.reward).collect();
        let values: Vec<f64> = steps.iter().map(|s| s.value).collect();
        let dones: Vec<bool> = steps.iter().map(|s| s.done).collect();
        let (adv, ret) =
            compute_gae(&rewards, &values, &dones, bootstrap_value, gamma, lambda).expect("segment columns agree");
        steps
            .into_iter()
            .zip(adv.into_iter().zip(ret))
            .map(|(s, (advantage, ret))| Transition {
                obs: s.obs,
                raw_action: s.raw_action,
                signal: s.signal,
                log_prob: s.log_prob,
                value: s.value,
                advantage,
                ret,
            })
            .collect()
    }
}

/// Completed transitions awaiting an update.
#[derive(Debug, Clone)]
pub struct TrajectoryBuffer {
    capacity: usize,
    transitions: Vec<Transition>,
}

impl TrajectoryBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            transitions: Vec::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.transitions.len() >= self.capacity
    }

    pub fn extend(&mut self, ts: impl IntoIterator<Item = Transition>) {
        self.transitions.extend(ts);
    }

    /// Removes the oldest `capacity` transitions; anything beyond stays queued.
    pub fn take_full(&mut self) -> Result<Vec<Transition>> {
        if !self.is_full() {
            return Err(Error::BufferNotFull {
                len: self.len(),
                required: self.capacity,
            });
        }
        let rest = self.transitions.split_off(self.capacity);
        Ok(std::mem::replace(&mut self.transitions, rest))
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        Self {
            config,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Descends along `grad`.
    pub fn step<T: Real>(&mut self, params: &mut [T], grad: &[T], lr: f64) {
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i].to_f64();
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            let delta = lr * m_hat / (v_hat.sqrt() + eps);
            if delta != 0.0 {
                params[i] = T::from_f64(params[i].to_f64() - delta);
            }
        }
    }
}

/// A transition viewed in the network's float type.
pub struct Sample<'a, T> {
    pub obs: &'a [T],
    pub raw_action: [f64; 2],
    pub signal: bool,
    pub log_prob_old: f64,
    pub advantage: f64,
    pub ret: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub total: f64,
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
}

/// Minibatch loss `−clip + c_v·MSE − β·entropy`, each term a batch mean.
pub fn surrogate_loss<T: Real>(params: &PolicyParams<T>, batch: &[Sample<T>], cfg: &PpoConfig) -> Result<LossParts> {
    let mut parts = LossParts::default();
    let n = batch.len() as f64;
    for s in batch {
        let out = params.forward(s.obs)?;
        let d = out.distribution();
        let lp = d.log_prob(s.raw_action, s.signal);
        let r = (lp - s.log_prob_old).exp();
        parts.policy -= ppo_clip_objective(lp, s.log_prob_old, s.advantage, cfg.epsilon) / n;
        parts.value += (out.value_f64() - s.ret).powi(2) / n;
        parts.entropy += d.entropy() / n;
        parts.mean_ratio += r / n;
    }
    parts.total = parts.policy + cfg.value_coef * parts.value - cfg.beta * parts.entropy;
    Ok(parts)
}

/// [`surrogate_loss`] and its gradient with respect to every parameter.
pub fn surrogate_loss_grad<T: Real>(
    params: &PolicyParams<T>,
    batch: &[Sample<T>],
    cfg: &PpoConfig,
) -> Result<(LossParts, Vec<T>)> {
    let n = batch.len() as f64;
    let obs: Vec<&[T]> = batch.iter().map(|s| s.obs).collect();
    let (grad, outs) = params.batch_gradient(&obs, |i, out| {
        let s = &batch[i];
        let d = out.distribution();
        let lp = d.log_prob(s.raw_action, s.signal);
        let r = (lp - s.log_prob_old).exp();
        let clipped = r.clamp(1.0 - cfg.epsilon, 1.0 + cfg.epsilon);
        // Gradient flows only through the branch the min selects; ties go unclipped.
        let d_lp = if r * s.advantage <= clipped * s.advantage {
            -r * s.advantage / n
        } else {
            0.0
        };
        let dist = d
            .log_prob_grad(s.raw_action, s.signal)
            .scaled(d_lp)
            .add(&d.entropy_grad().scaled(-cfg.beta / n));
        let dv = cfg.value_coef * 2.0 * (out.value_f64() - s.ret) / n;
        HeadGrad::from_dist(&dist, dv)
    })?;

    let mut parts = LossParts::default();
    for (s, out) in batch.iter().zip(&outs) {
        let d = out.distribution();
        let lp = d.log_prob(s.raw_action, s.signal);
        let r = (lp - s.log_prob_old).exp();
        parts.policy -= ppo_clip_objective(lp, s.log_prob_old, s.advantage, cfg.epsilon) / n;
        parts.value += (out.value_f64() - s.ret).powi(2) / n;
        parts.entropy += d.entropy() / n;
        parts.mean_ratio += r / n;
        if (r - 1.0).abs() > cfg.epsilon {
            parts.clip_fraction += 1.0 / n;
        }
    }
    parts.total = parts.policy + cfg.value_coef * parts.value - cfg.beta * parts.entropy;
    Ok((parts, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub mean_ratio: f64,
    pub first_minibatch_ratio: f64,
    pub clip_fraction: f64,
    pub learning_rate: f64,
    pub minibatches: usize,
    pub transitions: usize,
}

/// Policy parameters together with their optimiser state.
#[derive(Debug, Clone)]
pub struct Learner {
    pub params: PolicyParams<f32>,
    pub adam: Adam,
}

impl Learner {
    pub fn new(params: PolicyParams<f32>, adam: AdamConfig) -> Self {
        let adam = Adam::new(params.len(), adam);
        Self { params, adam }
    }

    /// Consumes one full buffer: `num_epoch` passes of shuffled minibatches.
    pub fn update<R: Rng>(
        &mut self,
        buffer: &mut TrajectoryBuffer,
        cfg: &PpoConfig,
        progress: f64,
        rng: &mut R,
    ) -> Result<UpdateStats> {
        let mut batch = buffer.take_full()?;
        if cfg.normalize_advantages {
            let mut adv: Vec<f64> = batch.iter().map(|t| t.advantage).collect();
            normalize_advantages(&mut adv);
            for (t, a) in batch.iter_mut().zip(adv) {
                t.advantage = a;
            }
        }
        let lr = cfg.learning_rate_at(progress);
        let mut stats = UpdateStats {
            learning_rate: lr,
            transitions: batch.len(),
            ..UpdateStats::default()
        };
        let mut order: Vec<usize> = (0..batch.len()).collect();
        for _ in 0..cfg.num_epoch {
            order.shuffle(rng);
            for idx in order.chunks(cfg.batch_size) {
                let samples: Vec<Sample<f32>> = idx
                    .iter()
                    .map(|&i| {
                        let t = &batch[i];
                        Sample {
                            obs: &t.obs,
                            raw_action: t.raw_action,
                            signal: t.signal,
                            log_prob_old: t.log_prob,
                            advantage: t.advantage,
                            ret: t.ret,
                        }
                    })
                    .collect();
                let (parts, grad) = surrogate_loss_grad(&self.params, &samples, cfg)?;
                self.adam.step(&mut self.params.data, &grad, lr);
                if stats.minibatches == 0 {
                    stats.first_minibatch_ratio = parts.mean_ratio;
                }
                stats.minibatches += 1;
                stats.policy_loss += parts.policy;
                stats.value_loss += parts.value;
                stats.entropy += parts.entropy;
                stats.mean_ratio += parts.mean_ratio;
                stats.clip_fraction += parts.clip_fraction;
            }
        }
        let k = stats.minibatches.max(1) as f64;
        stats.policy_loss /= k;
        stats.value_loss /= k;
        stats.entropy /= k;
        stats.mean_ratio /= k;
        stats.clip_fraction /= k;
        Ok(stats)
    }
}

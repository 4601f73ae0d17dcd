//! Near-RT xApp learner: decentralized actors, one centralized critic,
//! replay and lagged target networks.
//!
//! Actions travel in normalized form (`[-1, 1]^3`, the actor's tanh range)
//! and are scaled to the environment bounds only when applied.

use std::path::Path;

use ndarray::{concatenate, s, Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agentenv::{Action, ActionBounds, ObservationMode};
use crate::digest::derive_seed;
use crate::evalharness::{evaluate_controller, MetricsRow};
use crate::ricbus::{run_mission, Controller, DecisionContext, EpisodeSetup, MissionContext, MissionMode, RicError};
use crate::tinynet::{adam_step, Activation, AdamState, DenseNet, ForwardCache, NetFile, ParamGrads, TinyNetError};
use crate::worldmodel::ScenarioConfig;

pub const POLICY_FORMAT_VERSION: u32 = 1;
pub const ACTION_DIM: usize = 3;
/// Normalized action of an agent that no longer flies.
pub const HOLD_UNIT: [f64; 3] = [0.0, 0.0, -1.0];

/// Seed streams under the training seed.
const STREAM_ACTOR: u64 = 11;
const STREAM_CRITIC: u64 = 12;
const STREAM_EPISODE: u64 = 13;
/// Seed stream under the scenario seed for evaluation episodes.
pub const STREAM_EVAL: u64 = 21;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaddpgConfig {
    pub gamma: f64,
    pub tau: f64,
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub batch: usize,
    pub buffer_capacity: usize,
    pub warmup: usize,
    pub noise_start: f64,
    pub noise_end: f64,
    pub update_every: usize,
    pub episodes: usize,
    pub seed: u64,
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub eval_episodes: usize,
}

impl Default for MaddpgConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            tau: 0.005,
            lr_actor: 1e-4,
            lr_critic: 1e-3,
            batch: 128,
            buffer_capacity: 100_000,
            warmup: 1000,
            noise_start: 0.2,
            noise_end: 0.02,
            update_every: 1,
            episodes: 2000,
            seed: 0,
            actor_hidden: vec![128, 128],
            critic_hidden: vec![256, 256],
            eval_episodes: 20,
        }
    }
}

impl MaddpgConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err("rl gamma in [0, 1)".into());
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err("rl tau in (0, 1]".into());
        }
        if !(self.lr_actor > 0.0 && self.lr_critic > 0.0) {
            return Err("rl learning rates > 0".into());
        }
        if self.batch == 0 || self.batch > self.buffer_capacity {
            return Err("rl 1 <= batch <= buffer_capacity".into());
        }
        if self.update_every == 0 {
            return Err("rl update_every >= 1".into());
        }
        if !(self.noise_start >= 0.0 && self.noise_end >= 0.0) {
            return Err("rl noise sigmas >= 0".into());
        }
        if self.actor_hidden.contains(&0) || self.critic_hidden.contains(&0) {
            return Err("rl hidden widths > 0".into());
        }
        Ok(())
    }

    /// Exploration sigma for episode `ep` of `episodes`, linear in between.
    pub fn noise_sigma(&self, ep: usize) -> f64 {
        let span = self.episodes.saturating_sub(1).max(1) as f64;
        let f = (ep as f64 / span).min(1.0);
        self.noise_start + (self.noise_end - self.noise_start) * f
    }
}

#[derive(Debug, Error)]
pub enum MaddpgError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{what}: expected {expected}, got {got}")]
    Arity {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("replay holds {have} transitions, need {need}")]
    InsufficientBuffer { have: usize, need: usize },
    #[error(transparent)]
    Net(#[from] TinyNetError),
    #[error(transparent)]
    Ric(#[from] Box<RicError>),
    #[error("model file: {0}")]
    Format(String),
    #[error("model format_version {found} not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("model has {found} agents, scenario has {expected}")]
    AgentCount { found: usize, expected: usize },
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

impl From<RicError> for MaddpgError {
    fn from(e: RicError) -> Self {
        MaddpgError::Ric(Box::new(e))
    }
}

/// One joint step as seen by the learner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub obs: Vec<Vec<f64>>,
    /// Normalized actions actually applied.
    pub actions: Vec<[f64; 3]>,
    pub rewards: Vec<f64>,
    pub next_obs: Vec<Vec<f64>>,
    /// Agent is terminal after the step.
    pub dones: Vec<bool>,
    /// Agent was flying before the step.
    pub active: Vec<bool>,
}

impl Transition {
    pub fn done_all(&self) -> bool {
        self.dones.iter().all(|&d| d)
    }

    fn check(&self, n: usize, d: usize) -> Result<(), MaddpgError> {
        let arity = |what, got| {
            if got == n {
                Ok(())
            } else {
                Err(MaddpgError::Arity {
                    what,
                    expected: n,
                    got,
                })
            }
        };
        arity("observations", self.obs.len())?;
        arity("actions", self.actions.len())?;
        arity("rewards", self.rewards.len())?;
        arity("next observations", self.next_obs.len())?;
        arity("done flags", self.dones.len())?;
        arity("active flags", self.active.len())?;
        for o in self.obs.iter().chain(&self.next_obs) {
            if o.len() != d {
                return Err(MaddpgError::Arity {
                    what: "observation width",
                    expected: d,
                    got: o.len(),
                });
            }
        }
        Ok(())
    }
}

/// Fixed-capacity ring; the oldest transition is overwritten first.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    data: Vec<Transition>,
    head: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            data: Vec::new(),
            head: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, t: Transition) {
        if self.data.len() < self.capacity {
            self.data.push(t);
        } else {
            self.data[self.head] = t;
            self.head = (self.head + 1) % self.capacity;
        }
    }

    /// Stored transitions, oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.data[self.head..].iter().chain(&self.data[..self.head])
    }

    /// Uniform draws with replacement.
    pub fn sample<'a>(&'a self, rng: &mut impl Rng, batch: usize) -> Vec<&'a Transition> {
        (0..batch)
            .map(|_| &self.data[rng.random_range(0..self.data.len())])
            .collect()
    }
}

/// Minibatch in matrix form; joint vectors are agent-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub obs: Array2<f64>,
    pub actions: Array2<f64>,
    /// Team reward: mean over agents.
    pub rewards: Array1<f64>,
    pub next_obs: Array2<f64>,
    pub done_all: Array1<f64>,
    pub active: Array2<bool>,
    pub next_active: Array2<bool>,
}

impl Batch {
    pub fn from_transitions(ts: &[&Transition], n: usize, d: usize) -> Self {
        let b = ts.len();
        let mut obs = Array2::zeros((b, n * d));
        let mut next_obs = Array2::zeros((b, n * d));
        let mut actions = Array2::zeros((b, n * ACTION_DIM));
        let mut rewards = Array1::zeros(b);
        let mut done_all = Array1::zeros(b);
        let mut active = Array2::from_elem((b, n), false);
        let mut next_active = Array2::from_elem((b, n), false);
        for (r, t) in ts.iter().enumerate() {
            for i in 0..n {
                for k in 0..d {
                    obs[[r, i * d + k]] = t.obs[i][k];
                    next_obs[[r, i * d + k]] = t.next_obs[i][k];
                }
                for k in 0..ACTION_DIM {
                    actions[[r, i * ACTION_DIM + k]] = t.actions[i][k];
                }
                active[[r, i]] = t.active[i];
                next_active[[r, i]] = !t.dones[i];
            }
            rewards[r] = t.rewards.iter().sum::<f64>() / n as f64;
            done_all[r] = if t.done_all() { 1.0 } else { 0.0 };
        }
        Self {
            obs,
            actions,
            rewards,
            next_obs,
            done_all,
            active,
            next_active,
        }
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

fn build_net(input: usize, hidden: &[usize], output: usize, out_act: Activation, seed: u64) -> Result<DenseNet, TinyNetError> {
    let mut sizes = vec![input];
    sizes.extend_from_slice(hidden);
    sizes.push(output);
    let mut acts = vec![Activation::Relu; hidden.len()];
    acts.push(out_act);
    DenseNet::init(&sizes, &acts, seed)
}

/// Runs every actor on its agent's block of `joint_obs`; rows where the
/// agent is inactive get the hold action.
fn joint_policy_actions(
    actors: &[DenseNet],
    joint_obs: &Array2<f64>,
    active: &Array2<bool>,
    d: usize,
) -> Result<Array2<f64>, TinyNetError> {
    let b = joint_obs.nrows();
    let n = actors.len();
    let mut out = Array2::zeros((b, n * ACTION_DIM));
    for (i, actor) in actors.iter().enumerate() {
        let mu = actor.predict_batch(joint_obs.slice(s![.., i * d..(i + 1) * d]))?;
        for r in 0..b {
            for k in 0..ACTION_DIM {
                out[[r, i * ACTION_DIM + k]] = if active[[r, i]] { mu[[r, k]] } else { HOLD_UNIT[k] };
            }
        }
    }
    Ok(out)
}

fn critic_input(obs: &Array2<f64>, actions: &Array2<f64>) -> Array2<f64> {
    concatenate(Axis(1), &[obs.view(), actions.view()]).expect("batch rows agree")
}

#[derive(Debug, Clone)]
pub struct Trainer {
    cfg: MaddpgConfig,
    bounds: ActionBounds,
    n_agents: usize,
    obs_dim: usize,
    actors: Vec<DenseNet>,
    actor_targets: Vec<DenseNet>,
    actor_adam: Vec<AdamState>,
    critic: DenseNet,
    critic_target: DenseNet,
    critic_adam: AdamState,
    buffer: ReplayBuffer,
    rng: ChaCha8Rng,
    noise_sigma: f64,
    explore: bool,
    env_steps: u64,
    critic_losses: Vec<f64>,
}

impl Trainer {
    pub fn new(
        n_agents: usize,
        obs_dim: usize,
        bounds: ActionBounds,
        cfg: MaddpgConfig,
    ) -> Result<Self, MaddpgError> {
        cfg.validate().map_err(MaddpgError::Config)?;
        let actors = (0..n_agents)
            .map(|i| {
                build_net(
                    obs_dim,
                    &cfg.actor_hidden,
                    ACTION_DIM,
                    Activation::Tanh,
                    derive_seed(cfg.seed, STREAM_ACTOR, i as u64),
                )
            })
            .collect::<Result<Vec<_>, _>>()?;
        let critic = build_net(
            n_agents * (obs_dim + ACTION_DIM),
            &cfg.critic_hidden,
            1,
            Activation::Linear,
            derive_seed(cfg.seed, STREAM_CRITIC, 0),
        )?;
        Ok(Self {
            bounds,
            n_agents,
            obs_dim,
            actor_targets: actors.clone(),
            actor_adam: actors.iter().map(AdamState::new).collect(),
            critic_target: critic.clone(),
            critic_adam: AdamState::new(&critic),
            actors,
            critic,
            buffer: ReplayBuffer::new(cfg.buffer_capacity),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            noise_sigma: cfg.noise_start,
            explore: true,
            env_steps: 0,
            critic_losses: Vec::new(),
            cfg,
        })
    }

    pub fn config(&self) -> &MaddpgConfig {
        &self.cfg
    }

    pub fn actors(&self) -> &[DenseNet] {
        &self.actors
    }

    pub fn actors_mut(&mut self) -> &mut [DenseNet] {
        &mut self.actors
    }

    pub fn actor_targets(&self) -> &[DenseNet] {
        &self.actor_targets
    }

    pub fn critic(&self) -> &DenseNet {
        &self.critic
    }

    pub fn critic_mut(&mut self) -> &mut DenseNet {
        &mut self.critic
    }

    pub fn critic_target(&self) -> &DenseNet {
        &self.critic_target
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    pub fn critic_losses(&self) -> &[f64] {
        &self.critic_losses
    }

    pub fn set_explore(&mut self, explore: bool) {
        self.explore = explore;
    }

    pub fn set_noise_sigma(&mut self, sigma: f64) {
        self.noise_sigma = sigma;
    }

    /// Normalized joint action; inactive agents hold.
    pub fn select_actions(
        &mut self,
        obs: &[Vec<f64>],
        active: &[bool],
        explore: bool,
    ) -> Result<Vec<[f64; 3]>, MaddpgError> {
        if obs.len() != self.n_agents || active.len() != self.n_agents {
            return Err(MaddpgError::Arity {
                what: "observations",
                expected: self.n_agents,
                got: obs.len().min(active.len()),
            });
        }
        let noise = Normal::new(0.0, self.noise_sigma.max(0.0)).expect("sigma >= 0");
        let mut out = Vec::with_capacity(self.n_agents);
        for i in 0..self.n_agents {
            if !active[i] {
                out.push(HOLD_UNIT);
                continue;
            }
            let (y, _) = self.actors[i].forward(&obs[i])?;
            let mut u = [y[0], y[1], y[2]];
            if explore {
                for v in &mut u {
                    *v = (*v + noise.sample(&mut self.rng)).clamp(-1.0, 1.0);
                }
            }
            out.push(u);
        }
        Ok(out)
    }

    pub fn store(&mut self, t: Transition) -> Result<(), MaddpgError> {
        t.check(self.n_agents, self.obs_dim)?;
        self.buffer.push(t);
        Ok(())
    }

    pub fn sample_batch(&mut self, batch: usize) -> Result<Batch, MaddpgError> {
        if self.buffer.len() < batch.max(1) {
            return Err(MaddpgError::InsufficientBuffer {
                have: self.buffer.len(),
                need: batch.max(1),
            });
        }
        let picked = self.buffer.sample(&mut self.rng, batch);
        Ok(Batch::from_transitions(&picked, self.n_agents, self.obs_dim))
    }

    /// `y = r_team + gamma (1 - done_all) Q'(o', mu'(o'))`.
    pub fn td_targets(&self, batch: &Batch) -> Result<Array1<f64>, MaddpgError> {
        let next_act =
            joint_policy_actions(&self.actor_targets, &batch.next_obs, &batch.next_active, self.obs_dim)?;
        let q_next = self
            .critic_target
            .predict_batch(critic_input(&batch.next_obs, &next_act).view())?;
        let q_next = q_next.column(0);
        Ok(Array1::from_shape_fn(batch.len(), |r| {
            batch.rewards[r] + self.cfg.gamma * (1.0 - batch.done_all[r]) * q_next[r]
        }))
    }

    /// Mean squared TD error and its gradient for the online critic.
    pub fn critic_loss_grads(&self, batch: &Batch) -> Result<(f64, ParamGrads), MaddpgError> {
        let y = self.td_targets(batch)?;
        let cache = self
            .critic
            .forward_batch(critic_input(&batch.obs, &batch.actions).view())?;
        let b = batch.len() as f64;
        let diff = &cache.output().column(0) - &y;
        let loss = diff.iter().map(|v| v * v).sum::<f64>() / b;
        let dq = diff.mapv(|v| 2.0 * v / b).insert_axis(Axis(1));
        let grads = self.critic.param_gradients(&cache, dq.view())?;
        Ok((loss, grads))
    }

    /// One Adam step on the critic; returns the pre-step loss.
    pub fn critic_update(&mut self, batch: &Batch) -> Result<f64, MaddpgError> {
        let (loss, grads) = self.critic_loss_grads(batch)?;
        adam_step(&mut self.critic, &grads, &mut self.critic_adam, self.cfg.lr_critic)?;
        Ok(loss)
    }

    /// First-layer critic pre-activations on the stored joint actions. An
    /// actor update only swaps three input columns, so this product is
    /// shared by all agents in one update.
    fn critic_base(&self, batch: &Batch) -> Array2<f64> {
        let l0 = &self.critic.layers()[0];
        let mut z = critic_input(&batch.obs, &batch.actions).dot(&l0.weights.t());
        z += &l0.biases;
        z
    }

    /// Actor `i` forward pass and the critic activations with `mu_i(o_i)`
    /// substituted on rows where agent `i` is active.
    fn actor_forward(
        &self,
        batch: &Batch,
        i: usize,
        base: &Array2<f64>,
    ) -> Result<(ForwardCache, Vec<Array2<f64>>), MaddpgError> {
        let d = self.obs_dim;
        let cache_a = self.actors[i].forward_batch(batch.obs.slice(s![.., i * d..(i + 1) * d]))?;
        let mu = cache_a.output();
        let layers = self.critic.layers();
        let col = self.n_agents * d + i * ACTION_DIM;
        let w = layers[0].weights.slice(s![.., col..col + ACTION_DIM]);
        let shift = Array2::from_shape_fn((batch.len(), ACTION_DIM), |(r, k)| {
            if batch.active[[r, i]] {
                mu[[r, k]] - batch.actions[[r, i * ACTION_DIM + k]]
            } else {
                0.0
            }
        });
        let mut z = base + &shift.dot(&w.t());
        layers[0].activation.apply(&mut z);
        let mut acts = vec![z];
        for layer in &layers[1..] {
            let mut z = acts.last().expect("first layer").dot(&layer.weights.t());
            z += &layer.biases;
            layer.activation.apply(&mut z);
            acts.push(z);
        }
        Ok((cache_a, acts))
    }

    /// Mean of `Q(o, a_1..mu_i(o_i)..a_N)` over the batch.
    pub fn actor_objective(&self, batch: &Batch, i: usize) -> Result<f64, MaddpgError> {
        let (_, acts) = self.actor_forward(batch, i, &self.critic_base(batch))?;
        Ok(acts.last().expect("output layer").mean().expect("nonempty batch"))
    }

    /// Objective and its gradient with respect to actor `i` (ascent direction).
    pub fn actor_objective_grads(&self, batch: &Batch, i: usize) -> Result<(f64, ParamGrads), MaddpgError> {
        self.actor_grads_with(batch, i, &self.critic_base(batch))
    }

    fn actor_grads_with(
        &self,
        batch: &Batch,
        i: usize,
        base: &Array2<f64>,
    ) -> Result<(f64, ParamGrads), MaddpgError> {
        let (cache_a, acts) = self.actor_forward(batch, i, base)?;
        let b = batch.len();
        let layers = self.critic.layers();
        let objective = acts.last().expect("output layer").mean().expect("nonempty batch");
        let mut delta = Array2::from_elem((b, 1), 1.0 / b as f64);
        for l in (1..layers.len()).rev() {
            layers[l].activation.backprop(&mut delta, &acts[l]);
            delta = delta.dot(&layers[l].weights);
        }
        layers[0].activation.backprop(&mut delta, &acts[0]);
        let col = self.n_agents * self.obs_dim + i * ACTION_DIM;
        let mut dmu = delta.dot(&layers[0].weights.slice(s![.., col..col + ACTION_DIM]));
        for r in 0..b {
            if !batch.active[[r, i]] {
                dmu.row_mut(r).fill(0.0);
            }
        }
        let grads = self.actors[i].param_gradients(&cache_a, dmu.view())?;
        Ok((objective, grads))
    }

    /// One ascent step on actor `i` through the frozen critic; returns the
    /// pre-step objective.
    pub fn actor_update(&mut self, batch: &Batch, i: usize) -> Result<f64, MaddpgError> {
        let base = self.critic_base(batch);
        self.actor_update_with(batch, i, &base)
    }

    fn actor_update_with(&mut self, batch: &Batch, i: usize, base: &Array2<f64>) -> Result<f64, MaddpgError> {
        let (objective, mut grads) = self.actor_grads_with(batch, i, base)?;
        for (w, b) in &mut grads.layers {
            w.mapv_inplace(|v| -v);
            b.mapv_inplace(|v| -v);
        }
        adam_step(&mut self.actors[i], &grads, &mut self.actor_adam[i], self.cfg.lr_actor)?;
        Ok(objective)
    }

    pub fn soft_update_targets(&mut self) -> Result<(), MaddpgError> {
        self.critic_target.soft_update_from(&self.critic, self.cfg.tau)?;
        for (t, o) in self.actor_targets.iter_mut().zip(&self.actors) {
            t.soft_update_from(o, self.cfg.tau)?;
        }
        Ok(())
    }

    /// Critic step, then each actor, then target tracking. Returns the
    /// critic loss, or `None` while the buffer is still warming up.
    pub fn update(&mut self) -> Result<Option<f64>, MaddpgError> {
        if self.buffer.len() < self.cfg.warmup.max(self.cfg.batch) {
            return Ok(None);
        }
        let batch = self.sample_batch(self.cfg.batch)?;
        let loss = self.critic_update(&batch)?;
        let base = self.critic_base(&batch);
        for i in 0..self.n_agents {
            self.actor_update_with(&batch, i, &base)?;
        }
        self.soft_update_targets()?;
        self.critic_losses.push(loss);
        Ok(Some(loss))
    }

    pub fn to_model(&self, mode: ObservationMode) -> PolicyModel {
        PolicyModel {
            n_agents: self.n_agents,
            obs_dim: self.obs_dim,
            bounds: self.bounds,
            mode,
            actors: self.actors.clone(),
            critic: self.critic.clone(),
        }
    }
}

impl Controller for Trainer {
    fn decide(&mut self, ctx: &DecisionContext<'_>) -> Result<Vec<Action>, RicError> {
        let active: Vec<bool> = ctx.states.iter().map(|s| s.active()).collect();
        let explore = self.explore;
        let u = self
            .select_actions(ctx.observations, &active, explore)
            .map_err(|e| RicError::Policy(e.to_string()))?;
        Ok(u.into_iter().map(|u| Action::from_unit(u, &self.bounds)).collect())
    }

    fn record(&mut self, t: Transition) -> Result<(), RicError> {
        let policy = |e: MaddpgError| match e {
            MaddpgError::Net(n) => RicError::Net(n),
            other => RicError::Policy(other.to_string()),
        };
        self.store(t).map_err(policy)?;
        self.env_steps += 1;
        if self.env_steps.is_multiple_of(self.cfg.update_every as u64) {
            self.update().map_err(policy)?;
        }
        Ok(())
    }
}

/// Inference-ready policy: deterministic actors plus the critic.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyModel {
    pub n_agents: usize,
    pub obs_dim: usize,
    pub bounds: ActionBounds,
    pub mode: ObservationMode,
    pub actors: Vec<DenseNet>,
    pub critic: DenseNet,
}

impl PolicyModel {
    pub fn act(&self, obs: &[Vec<f64>], active: &[bool]) -> Result<Vec<Action>, TinyNetError> {
        obs.iter()
            .zip(active)
            .zip(&self.actors)
            .map(|((o, &a), actor)| {
                if !a {
                    return Ok(Action::HOLD);
                }
                let (y, _) = actor.forward(o)?;
                Ok(Action::from_unit([y[0], y[1], y[2]], &self.bounds))
            })
            .collect()
    }
}

impl Controller for PolicyModel {
    fn decide(&mut self, ctx: &DecisionContext<'_>) -> Result<Vec<Action>, RicError> {
        let active: Vec<bool> = ctx.states.iter().map(|s| s.active()).collect();
        Ok(self.act(ctx.observations, &active)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyFile {
    pub format_version: u32,
    pub n_agents: usize,
    pub obs_dim: usize,
    pub bounds: ActionBounds,
    pub mode: ObservationMode,
    pub actors: Vec<NetFile>,
    pub critic: NetFile,
}

pub fn model_to_json(m: &PolicyModel) -> String {
    serde_json::to_string(&PolicyFile {
        format_version: POLICY_FORMAT_VERSION,
        n_agents: m.n_agents,
        obs_dim: m.obs_dim,
        bounds: m.bounds,
        mode: m.mode,
        actors: m.actors.iter().map(DenseNet::to_file).collect(),
        critic: m.critic.to_file(),
    })
    .expect("model serializes")
}

/// Parses a policy file; `expected_agents` guards against scenario mismatch.
pub fn model_from_json(text: &str, expected_agents: Option<usize>) -> Result<PolicyModel, MaddpgError> {
    let probe: serde_json::Value =
        serde_json::from_str(text).map_err(|e| MaddpgError::Format(e.to_string()))?;
    match probe.get("format_version").and_then(|v| v.as_u64()) {
        Some(v) if v == POLICY_FORMAT_VERSION as u64 => {}
        Some(v) => {
            return Err(MaddpgError::Version {
                found: v as u32,
                expected: POLICY_FORMAT_VERSION,
            })
        }
        None => return Err(MaddpgError::Format("missing format_version".into())),
    }
    let f: PolicyFile =
        serde_json::from_value(probe).map_err(|e| MaddpgError::Format(e.to_string()))?;
    if f.actors.len() != f.n_agents {
        return Err(MaddpgError::Format("actor count differs from n_agents".into()));
    }
    if let Some(n) = expected_agents {
        if n != f.n_agents {
            return Err(MaddpgError::AgentCount {
                found: f.n_agents,
                expected: n,
            });
        }
    }
    let actors = f
        .actors
        .iter()
        .map(DenseNet::from_file)
        .collect::<Result<Vec<_>, _>>()?;
    for a in &actors {
        if a.input_dim() != f.obs_dim || a.output_dim() != ACTION_DIM {
            return Err(MaddpgError::Format("actor shape".into()));
        }
    }
    let critic = DenseNet::from_file(&f.critic)?;
    if critic.input_dim() != f.n_agents * (f.obs_dim + ACTION_DIM) || critic.output_dim() != 1 {
        return Err(MaddpgError::Format("critic shape".into()));
    }
    Ok(PolicyModel {
        n_agents: f.n_agents,
        obs_dim: f.obs_dim,
        bounds: f.bounds,
        mode: f.mode,
        actors,
        critic,
    })
}

pub fn save_model(m: &PolicyModel, path: impl AsRef<Path>) -> Result<(), MaddpgError> {
    let path = path.as_ref();
    std::fs::write(path, model_to_json(m)).map_err(|source| MaddpgError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_model(path: impl AsRef<Path>, expected_agents: Option<usize>) -> Result<PolicyModel, MaddpgError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| MaddpgError::Io {
        path: path.display().to_string(),
        source,
    })?;
    model_from_json(&text, expected_agents)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub episode_returns: Vec<f64>,
    pub critic_loss: Vec<f64>,
    pub eval_metrics: MetricsRow,
}

impl TrainingReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

/// Training-time progress callback: `(episode, team_return)`.
pub type Progress<'a> = &'a mut dyn FnMut(usize, f64);

/// Trains on `scenario` with its `rl` block, then evaluates deterministically.
pub fn train(
    scenario: &ScenarioConfig,
    mode: ObservationMode,
    mut progress: Option<Progress<'_>>,
) -> Result<(PolicyModel, TrainingReport), MaddpgError> {
    let cfg = scenario.rl.clone();
    let ctx = MissionContext::from_scenario(scenario);
    let mut trainer = Trainer::new(
        scenario.n_agents(),
        scenario.env.obs_dim(),
        scenario.env.bounds,
        cfg.clone(),
    )?;
    let mut returns = Vec::with_capacity(cfg.episodes);
    for ep in 0..cfg.episodes {
        trainer.set_noise_sigma(cfg.noise_sigma(ep));
        trainer.set_explore(true);
        let setup = EpisodeSetup::new(derive_seed(cfg.seed, STREAM_EPISODE, ep as u64), mode);
        let log = run_mission(&ctx, &setup, &mut trainer, MissionMode::Train)?;
        returns.push(log.team_return);
        if let Some(cb) = progress.as_mut() {
            cb(ep, log.team_return);
        }
    }
    let mut model = trainer.to_model(mode);
    let eval_metrics = evaluate_controller(scenario, &mut model, mode, false, cfg.eval_episodes)?.mean;
    let report = TrainingReport {
        episode_returns: returns,
        critic_loss: trainer.critic_losses().to_vec(),
        eval_metrics,
    };
    Ok((model, report))
}

/// Splits `xs` into first and last `frac` portions (at least one element each).
pub fn head_tail(xs: &[f64], frac: f64) -> (&[f64], &[f64]) {
    let k = ((xs.len() as f64 * frac).floor() as usize).max(1).min(xs.len());
    (&xs[..k], &xs[xs.len() - k..])
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

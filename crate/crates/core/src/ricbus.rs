//! Dual-timescale control plane. A discrete-event scheduler carries A1
//! publications from the rApp and E2 KPM/control traffic between the RAN,
//! the xApp and the swarm, in simulated milliseconds.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::agentenv::{
    build_observation, Action, ActionRecord, AgentState, EnvError, ObservationMode, SimWorld,
    SwarmEnv, TickFlags, TickRecord,
};
use crate::digest::derive_seed;
use crate::geom::Point3;
use crate::maddpg::Transition;
use crate::radio::RadioError;
use crate::semantics::{build_a1, close_all_gates, interpret, A1Message, SemanticsConfig, SemanticsError};
use crate::tinynet::TinyNetError;
use crate::worldmodel::{spawn_agents, ScenarioConfig, SpawnError};

pub const E2_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ClockError {
    #[error("t_a1_ms = {0} must be >= 1000")]
    A1Period(u64),
    #[error("t_e2_ms = {0} must lie in [10, 1000]")]
    E2Period(u64),
    #[error("control_deadline_ms must be > 0")]
    Deadline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClockConfig {
    pub t_a1_ms: u64,
    pub t_e2_ms: u64,
    pub inference_latency_ms: u64,
    pub control_deadline_ms: u64,
}

impl Default for ClockConfig {
    fn default() -> Self {
        Self {
            t_a1_ms: 10_000,
            t_e2_ms: 100,
            inference_latency_ms: 10,
            control_deadline_ms: 500,
        }
    }
}

impl ClockConfig {
    pub fn validate(&self) -> Result<(), ClockError> {
        if self.t_a1_ms < 1000 {
            return Err(ClockError::A1Period(self.t_a1_ms));
        }
        if !(10..=1000).contains(&self.t_e2_ms) {
            return Err(ClockError::E2Period(self.t_e2_ms));
        }
        if self.control_deadline_ms == 0 {
            return Err(ClockError::Deadline);
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum RicError {
    #[error(transparent)]
    Clock(#[from] ClockError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Spawn(#[from] SpawnError),
    #[error(transparent)]
    Semantics(#[from] SemanticsError),
    #[error(transparent)]
    Net(#[from] TinyNetError),
    #[error(transparent)]
    Radio(#[from] RadioError),
    #[error("event at {at} ms scheduled before current time {now} ms")]
    PastEvent { at: u64, now: u64 },
    #[error("training needs inference latency ({latency} ms) below the E2 period ({period} ms)")]
    TrainingLatency { latency: u64, period: u64 },
    #[error("policy: {0}")]
    Policy(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EventKind {
    A1Publish = 0,
    E2Kpm = 1,
    XappDecide = 2,
    E2Control = 3,
    EnvStep = 4,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub time_ms: u64,
    pub kind: EventKind,
    pub seq: u64,
    /// Control tick the event belongs to (0 for A1 publications).
    pub tick: u64,
}

impl Event {
    fn key(&self) -> (u64, EventKind, u64) {
        (self.time_ms, self.kind, self.seq)
    }
}

impl Ord for Event {
    fn cmp(&self, other: &Self) -> Ordering {
        // Reversed: BinaryHeap is a max-heap.
        other.key().cmp(&self.key())
    }
}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Pops in ascending `(time, priority, sequence)` order.
#[derive(Debug, Default)]
pub struct EventQueue {
    heap: BinaryHeap<Event>,
    now: u64,
    next_seq: u64,
}

impl EventQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn schedule(&mut self, time_ms: u64, kind: EventKind, tick: u64) -> Result<Event, RicError> {
        if time_ms < self.now {
            return Err(RicError::PastEvent {
                at: time_ms,
                now: self.now,
            });
        }
        let ev = Event {
            time_ms,
            kind,
            seq: self.next_seq,
            tick,
        };
        self.next_seq += 1;
        self.heap.push(ev);
        Ok(ev)
    }

    pub fn next_event(&mut self) -> Option<Event> {
        let ev = self.heap.pop()?;
        self.now = ev.time_ms;
        Some(ev)
    }

    fn only_a1_pending(&self) -> bool {
        self.heap.iter().all(|e| e.kind == EventKind::A1Publish)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct E2KpmReport {
    pub agent: usize,
    pub timestamp_ms: u64,
    pub position: Point3,
    pub serving_id: u32,
    pub sinr_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct E2ControlMessage {
    pub agent: usize,
    pub action: Action,
    pub kpm_timestamp_ms: u64,
    pub issue_timestamp_ms: u64,
}

/// Wire form of E2 records: `{version, type, ...}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum E2Message {
    Kpm(E2KpmReport),
    Control(E2ControlMessage),
}

#[derive(Debug, Error)]
pub enum WireError {
    #[error("malformed E2 payload: {0}")]
    Malformed(String),
    #[error("E2 schema version {found} not supported (expected {expected})")]
    Version { found: u64, expected: u32 },
}

pub fn serialize_e2(msg: &E2Message) -> Vec<u8> {
    let mut v = serde_json::to_value(msg).expect("E2 message serializes");
    v.as_object_mut()
        .expect("tagged enum is an object")
        .insert("version".into(), Value::from(E2_VERSION));
    serde_json::to_vec(&v).expect("E2 message serializes")
}

pub fn deserialize_e2(bytes: &[u8]) -> Result<E2Message, WireError> {
    let mut v: Value =
        serde_json::from_slice(bytes).map_err(|e| WireError::Malformed(e.to_string()))?;
    let obj = v
        .as_object_mut()
        .ok_or_else(|| WireError::Malformed("not an object".into()))?;
    let version = obj
        .remove("version")
        .and_then(|x| x.as_u64())
        .ok_or_else(|| WireError::Malformed("missing version".into()))?;
    if version != E2_VERSION as u64 {
        return Err(WireError::Version {
            found: version,
            expected: E2_VERSION,
        });
    }
    serde_json::from_value(v).map_err(|e| WireError::Malformed(e.to_string()))
}

/// What the xApp sees when deciding.
pub struct DecisionContext<'a> {
    pub t_ms: u64,
    pub observations: &'a [Vec<f64>],
    pub states: &'a [AgentState],
    pub world: &'a SimWorld,
}

/// Near-RT decision maker driven by [`run_mission`].
pub trait Controller {
    /// One action per agent; entries for inactive agents are ignored.
    fn decide(&mut self, ctx: &DecisionContext<'_>) -> Result<Vec<Action>, RicError>;

    /// Called in training mode once the next observation is known.
    fn record(&mut self, _transition: Transition) -> Result<(), RicError> {
        Ok(())
    }
}

/// Every agent hovers in place.
#[derive(Debug, Default, Clone, Copy)]
pub struct HoldController;

impl Controller for HoldController {
    fn decide(&mut self, ctx: &DecisionContext<'_>) -> Result<Vec<Action>, RicError> {
        Ok(vec![Action::HOLD; ctx.states.len()])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissionMode {
    Train,
    Eval,
}

/// Fixed configuration shared by every episode of a run.
#[derive(Debug, Clone)]
pub struct MissionContext {
    pub world: Arc<SimWorld>,
    pub semantics: SemanticsConfig,
    pub clocks: ClockConfig,
}

impl MissionContext {
    pub fn from_scenario(s: &ScenarioConfig) -> Self {
        Self {
            world: Arc::new(SimWorld::from_scenario(s)),
            semantics: s.semantics,
            clocks: s.clocks,
        }
    }
}

/// Per-episode knobs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeSetup {
    /// Seeds start positions and semantic degradation.
    pub episode_seed: u64,
    pub mode: ObservationMode,
    /// Building strikes are counted, not fatal.
    pub pass_through: bool,
    /// Stop issuing KPM ticks at this simulated time.
    pub horizon_ms: Option<u64>,
    /// Keep message summaries in the log.
    pub detailed: bool,
    /// Keep every decision-time observation in the log.
    pub record_observations: bool,
}

impl EpisodeSetup {
    pub fn new(episode_seed: u64, mode: ObservationMode) -> Self {
        Self {
            episode_seed,
            mode,
            pass_through: false,
            horizon_ms: None,
            detailed: false,
            record_observations: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LogEntry {
    Tick(TickRecord),
    A1 {
        t_ms: u64,
        digest: String,
        gates_open: usize,
    },
    Kpm(E2KpmReport),
    Control(E2ControlMessage),
}

/// Observations used at one decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationFrame {
    pub t_ms: u64,
    pub observations: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EventCounts {
    pub a1_publish: usize,
    pub e2_kpm: usize,
    pub xapp_decide: usize,
    pub e2_control: usize,
    pub env_step: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub episode_seed: u64,
    pub n_agents: usize,
    pub starts: Vec<Point3>,
    pub targets: Vec<Point3>,
    pub entries: Vec<LogEntry>,
    pub events: EventCounts,
    pub deadline_violations: usize,
    pub collision_events: usize,
    pub min_separation: Option<f64>,
    pub reached: Vec<bool>,
    pub alive: Vec<bool>,
    /// Sum over ticks of the mean per-agent reward.
    pub team_return: f64,
    pub observations: Vec<ObservationFrame>,
}

impl EpisodeLog {
    pub fn ticks(&self) -> impl Iterator<Item = &TickRecord> {
        self.entries.iter().filter_map(|e| match e {
            LogEntry::Tick(t) => Some(t),
            _ => None,
        })
    }

    /// JSON lines in processing order.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("log entry serializes"));
            out.push('\n');
        }
        out
    }
}

/// Non-RT rApp: produces the A1 map for one publication.
pub fn publish_a1(
    ctx: &MissionContext,
    mode: ObservationMode,
    seed: u64,
    t_ms: u64,
) -> Result<A1Message, SemanticsError> {
    let features = interpret(&ctx.world.map, &ctx.semantics, seed)?;
    let features = if mode.semantics {
        features
    } else {
        close_all_gates(features)
    };
    Ok(build_a1(&features, t_ms))
}

fn observe_all(
    world: &SimWorld,
    a1: &A1Message,
    states: &[AgentState],
    sinr: &[f64],
    mode: ObservationMode,
) -> Vec<Vec<f64>> {
    (0..states.len())
        .map(|i| {
            if states[i].active() {
                build_observation(world, Some(a1), states, i, sinr[i], mode)
            } else {
                vec![0.0; world.params.obs_dim()]
            }
        })
        .collect()
}

struct PendingTransition {
    obs: Vec<Vec<f64>>,
    actions: Vec<[f64; 3]>,
    rewards: Vec<f64>,
    active: Vec<bool>,
    dones: Vec<bool>,
}

/// Runs one episode through the event loop.
///
/// Per E2 tick: KPM reports, then the xApp decision on the latest A1
/// snapshot, then control delivery and the environment step at
/// `kpm_time + inference_latency_ms`.
pub fn run_mission(
    ctx: &MissionContext,
    setup: &EpisodeSetup,
    controller: &mut dyn Controller,
    mission_mode: MissionMode,
) -> Result<EpisodeLog, RicError> {
    let clocks = ctx.clocks;
    clocks.validate()?;
    if mission_mode == MissionMode::Train && clocks.inference_latency_ms >= clocks.t_e2_ms {
        return Err(RicError::TrainingLatency {
            latency: clocks.inference_latency_ms,
            period: clocks.t_e2_ms,
        });
    }
    let world = Arc::clone(&ctx.world);
    let n = world.mission.n_agents;
    let starts = spawn_agents(
        &world.mission,
        n,
        world.params.d_safe,
        derive_seed(setup.episode_seed, 1, 0),
    )?;
    let mut weights = world.params.reward;
    if !setup.mode.sinr {
        weights.w_sinr = 0.0;
    }
    let mut env = SwarmEnv::new(Arc::clone(&world), starts.clone(), weights, setup.pass_through);
    let bounds = world.params.bounds;

    let mut log = EpisodeLog {
        episode_seed: setup.episode_seed,
        n_agents: n,
        starts,
        targets: world.mission.targets.clone(),
        entries: Vec::new(),
        events: EventCounts::default(),
        deadline_violations: 0,
        collision_events: 0,
        min_separation: None,
        reached: vec![false; n],
        alive: vec![true; n],
        team_return: 0.0,
        observations: Vec::new(),
    };

    let mut queue = EventQueue::new();
    queue.schedule(0, EventKind::A1Publish, 0)?;
    queue.schedule(0, EventKind::E2Kpm, 0)?;

    let mut a1: Option<Arc<A1Message>> = None;
    let mut a1_index = 0u64;
    // Latest KPM SINR per agent, and decisions awaiting their ENV_STEP.
    let mut kpm_sinr = vec![0.0; n];
    let mut decisions: std::collections::BTreeMap<u64, (Vec<Vec<f64>>, Vec<Action>)> =
        Default::default();
    let mut pending: Option<PendingTransition> = None;

    while let Some(ev) = queue.next_event() {
        if ev.kind == EventKind::A1Publish && queue.only_a1_pending() && log.events.a1_publish > 0 {
            break;
        }
        let t = ev.time_ms;
        match ev.kind {
            EventKind::A1Publish => {
                log.events.a1_publish += 1;
                let seed = derive_seed(setup.episode_seed, 2, a1_index);
                a1_index += 1;
                let msg = publish_a1(ctx, setup.mode, seed, t)?;
                if setup.detailed {
                    log.entries.push(LogEntry::A1 {
                        t_ms: t,
                        digest: msg.digest.clone(),
                        gates_open: msg.cells.iter().filter(|c| c.gate_open).count(),
                    });
                }
                // Atomic swap: readers hold the previous Arc until they re-read.
                a1 = Some(Arc::new(msg));
                queue.schedule(t + clocks.t_a1_ms, EventKind::A1Publish, 0)?;
            }
            EventKind::E2Kpm => {
                if env.is_done() {
                    continue;
                }
                log.events.e2_kpm += 1;
                for (i, s) in env.states().iter().enumerate() {
                    let sample = world.sinr(s.position)?;
                    kpm_sinr[i] = sample.sinr_db;
                    if setup.detailed && s.active() {
                        log.entries.push(LogEntry::Kpm(E2KpmReport {
                            agent: i,
                            timestamp_ms: t,
                            position: s.position,
                            serving_id: sample.serving_id,
                            sinr_db: sample.sinr_db,
                        }));
                    }
                }
                queue.schedule(t, EventKind::XappDecide, ev.tick)?;
                let next = t + clocks.t_e2_ms;
                if setup.horizon_ms.is_none_or(|h| next < h) {
                    queue.schedule(next, EventKind::E2Kpm, ev.tick + 1)?;
                }
            }
            EventKind::XappDecide => {
                log.events.xapp_decide += 1;
                let snapshot = Arc::clone(a1.as_ref().expect("A1 published at t=0"));
                let obs = observe_all(&world, &snapshot, env.states(), &kpm_sinr, setup.mode);
                if let Some(p) = pending.take() {
                    controller.record(finish_transition(p, obs.clone()))?;
                }
                let actions = controller.decide(&DecisionContext {
                    t_ms: t,
                    observations: &obs,
                    states: env.states(),
                    world: &world,
                })?;
                if actions.len() != n {
                    return Err(EnvError::ActionCount {
                        expected: n,
                        got: actions.len(),
                    }
                    .into());
                }
                let issue = t + clocks.inference_latency_ms;
                let active = env.states().iter().filter(|s| s.active()).count();
                if clocks.inference_latency_ms > clocks.control_deadline_ms {
                    log.deadline_violations += active;
                }
                if setup.detailed {
                    for i in (0..n).filter(|&i| env.states()[i].active()) {
                        log.entries.push(LogEntry::Control(E2ControlMessage {
                            agent: i,
                            action: actions[i],
                            kpm_timestamp_ms: t,
                            issue_timestamp_ms: issue,
                        }));
                    }
                }
                if setup.record_observations {
                    log.observations.push(ObservationFrame {
                        t_ms: t,
                        observations: obs.clone(),
                    });
                }
                decisions.insert(ev.tick, (obs, actions));
                queue.schedule(issue, EventKind::E2Control, ev.tick)?;
            }
            EventKind::E2Control => {
                log.events.e2_control += 1;
                queue.schedule(t, EventKind::EnvStep, ev.tick)?;
            }
            EventKind::EnvStep => {
                let (obs, actions) = decisions.remove(&ev.tick).expect("decision precedes step");
                if env.is_done() {
                    continue;
                }
                log.events.env_step += 1;
                let out = env.step(&actions)?;
                log.collision_events += out.collision_pairs;
                if let Some(d) = out.min_separation {
                    log.min_separation = Some(log.min_separation.map_or(d, |m: f64| m.min(d)));
                }
                let mut team = 0.0;
                for (i, r) in out.agents.iter().enumerate() {
                    let s = env.states()[i];
                    team += r.reward.total;
                    log.entries.push(LogEntry::Tick(TickRecord {
                        t_ms: t,
                        agent: i,
                        x: s.position.x,
                        y: s.position.y,
                        z: s.position.z,
                        heading: s.heading,
                        sinr_db: r.sinr_db,
                        serving_id: r.serving_id,
                        action: ActionRecord {
                            dh: r.action.d_heading,
                            dz: r.action.d_alt,
                            dist: r.action.dist,
                        },
                        reward: r.reward,
                        flags: TickFlags {
                            active: r.was_active,
                            alive: s.alive,
                            reached: s.reached,
                            obstacle: r.flags.obstacle,
                            in_building: r.in_building,
                            collision: r.flags.collision,
                            out_of_area: r.flags.out_of_area,
                            clamped: r.flags.clamped,
                            truncated: r.flags.unreached_at_truncation,
                        },
                    }));
                }
                log.team_return += team / n as f64;
                if mission_mode == MissionMode::Train {
                    let p = PendingTransition {
                        obs,
                        actions: out.agents.iter().map(|r| r.action.to_unit(&bounds)).collect(),
                        rewards: out.agents.iter().map(|r| r.reward.total).collect(),
                        active: out.agents.iter().map(|r| r.was_active).collect(),
                        dones: out.agents.iter().map(|r| r.done).collect(),
                    };
                    if out.episode_done {
                        let snapshot = a1.as_ref().expect("A1 published at t=0");
                        let sinr: Vec<f64> = out.agents.iter().map(|r| r.sinr_db).collect();
                        let next = observe_all(&world, snapshot, env.states(), &sinr, setup.mode);
                        controller.record(finish_transition(p, next))?;
                    } else {
                        pending = Some(p);
                    }
                }
                if out.episode_done {
                    break;
                }
            }
        }
    }
    for (i, s) in env.states().iter().enumerate() {
        log.reached[i] = s.reached;
        log.alive[i] = s.alive;
    }
    Ok(log)
}

fn finish_transition(p: PendingTransition, next_obs: Vec<Vec<f64>>) -> Transition {
    Transition {
        obs: p.obs,
        actions: p.actions,
        rewards: p.rewards,
        next_obs,
        dones: p.dones,
        active: p.active,
    }
}

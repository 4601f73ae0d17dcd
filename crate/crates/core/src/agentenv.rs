//! Swarm environment: observations, kinematic actions, penalty-shaped
//! rewards and termination for the constrained trajectory problem.

use std::f64::consts::FRAC_PI_4;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{wrap_angle, Point3};
use crate::radio::{sinr_at, RadioError, RadioParams, RadioSite, SinrSample};
use crate::semantics::A1Message;
use crate::worldmodel::{MissionSpec, ScenarioConfig, WorldMap};

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    #[error("episode already terminated")]
    EpisodeOver,
    #[error("expected {expected} actions, got {got}")]
    ActionCount { expected: usize, got: usize },
    #[error(transparent)]
    Radio(#[from] RadioError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ActionBounds {
    pub d_heading_max: f64,
    pub d_alt_max: f64,
    pub dist_max: f64,
}

impl Default for ActionBounds {
    fn default() -> Self {
        Self {
            d_heading_max: FRAC_PI_4,
            d_alt_max: 5.0,
            dist_max: 20.0,
        }
    }
}

/// Per-tick motion command.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Action {
    pub d_heading: f64,
    pub d_alt: f64,
    pub dist: f64,
}

impl Action {
    pub const HOLD: Action = Action {
        d_heading: 0.0,
        d_alt: 0.0,
        dist: 0.0,
    };

    /// Clamps into bounds; the flag reports whether anything changed.
    pub fn clamped(self, b: &ActionBounds) -> (Action, bool) {
        let c = Action {
            d_heading: self.d_heading.clamp(-b.d_heading_max, b.d_heading_max),
            d_alt: self.d_alt.clamp(-b.d_alt_max, b.d_alt_max),
            dist: self.dist.clamp(0.0, b.dist_max),
        };
        (c, c != self)
    }

    /// Maps a `[-1, 1]^3` actor output onto the bound ranges.
    pub fn from_unit(u: [f64; 3], b: &ActionBounds) -> Action {
        Action {
            d_heading: u[0] * b.d_heading_max,
            d_alt: u[1] * b.d_alt_max,
            dist: (u[2] + 1.0) * 0.5 * b.dist_max,
        }
    }

    pub fn to_unit(self, b: &ActionBounds) -> [f64; 3] {
        [
            self.d_heading / b.d_heading_max,
            self.d_alt / b.d_alt_max,
            self.dist / b.dist_max * 2.0 - 1.0,
        ]
    }

    pub fn within(&self, b: &ActionBounds) -> bool {
        self.d_heading.abs() <= b.d_heading_max
            && self.d_alt.abs() <= b.d_alt_max
            && (0.0..=b.dist_max).contains(&self.dist)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardWeights {
    pub w_progress: f64,
    pub w_sinr: f64,
    pub w_alt: f64,
    pub c_col: f64,
    pub c_obs: f64,
    pub c_area: f64,
    pub b_reach: f64,
    pub c_unreach: f64,
    pub s_qos_db: f64,
    pub s_hi_db: f64,
    pub dist_norm: f64,
    pub d_alt_max: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            w_progress: 1.0,
            w_sinr: 0.5,
            w_alt: 0.1,
            c_col: 5.0,
            c_obs: 10.0,
            c_area: 1.0,
            b_reach: 10.0,
            c_unreach: 5.0,
            s_qos_db: 0.0,
            s_hi_db: 30.0,
            dist_norm: 20.0,
            d_alt_max: 5.0,
        }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<(), String> {
        let w = [
            self.w_progress,
            self.w_sinr,
            self.w_alt,
            self.c_col,
            self.c_obs,
            self.c_area,
            self.b_reach,
            self.c_unreach,
        ];
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err("reward weights >= 0".into());
        }
        if !(self.s_hi_db > self.s_qos_db) {
            return Err("reward s_qos_db < s_hi_db".into());
        }
        if !(self.dist_norm > 0.0 && self.d_alt_max > 0.0) {
            return Err("reward dist_norm, d_alt_max > 0".into());
        }
        Ok(())
    }
}

/// Environment settings carried in the scenario file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvParams {
    pub d_safe: f64,
    pub patch_k: usize,
    pub neighbors_m: usize,
    pub neighbor_range_m: f64,
    pub sinr_lo_db: f64,
    pub sinr_hi_db: f64,
    pub bounds: ActionBounds,
    pub reward: RewardWeights,
}

impl Default for EnvParams {
    fn default() -> Self {
        Self {
            d_safe: 10.0,
            patch_k: 5,
            neighbors_m: 3,
            neighbor_range_m: 100.0,
            sinr_lo_db: -10.0,
            sinr_hi_db: 30.0,
            bounds: ActionBounds::default(),
            reward: RewardWeights::default(),
        }
    }
}

impl EnvParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.d_safe >= 0.0) {
            return Err("env d_safe >= 0".into());
        }
        if self.patch_k < 1 || self.patch_k.is_multiple_of(2) {
            return Err("env patch_k odd and >= 1".into());
        }
        if !(self.neighbor_range_m > 0.0) {
            return Err("env neighbor_range_m > 0".into());
        }
        if !(self.sinr_hi_db > self.sinr_lo_db) {
            return Err("env sinr_lo_db < sinr_hi_db".into());
        }
        let b = &self.bounds;
        if !(b.d_heading_max > 0.0 && b.d_alt_max > 0.0 && b.dist_max > 0.0) {
            return Err("env action bounds > 0".into());
        }
        self.reward.validate()
    }

    pub fn obs_dim(&self) -> usize {
        3 + 4 + 1 + 1 + self.patch_k * self.patch_k * 4 + self.neighbors_m * 3
    }
}

/// Which inputs reach the actors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObservationMode {
    pub semantics: bool,
    pub sinr: bool,
}

impl ObservationMode {
    pub const FULL: ObservationMode = ObservationMode {
        semantics: true,
        sinr: true,
    };
}

/// Immutable world shared by environments, the rApp and the harness.
#[derive(Debug, Clone)]
pub struct SimWorld {
    pub map: WorldMap,
    pub sites: Vec<RadioSite>,
    pub radio: RadioParams,
    pub mission: MissionSpec,
    pub params: EnvParams,
}

impl SimWorld {
    pub fn from_scenario(s: &ScenarioConfig) -> Self {
        Self {
            map: s.world_map(),
            sites: s.radio.sites.clone(),
            radio: s.radio.params,
            mission: s.mission.clone(),
            params: s.env,
        }
    }

    /// SINR at `pos`; positions beyond the raster are evaluated at the
    /// nearest point inside it.
    pub fn sinr(&self, pos: Point3) -> Result<SinrSample, RadioError> {
        let ext = self.map.extent();
        let inside = |v: f64, lo: f64, hi: f64| v.clamp(lo, hi - 1e-6 * (hi - lo));
        let p = Point3::new(
            inside(pos.x, ext.x_min, ext.x_max),
            inside(pos.y, ext.y_min, ext.y_max),
            pos.z,
        );
        sinr_at(p, &self.sites, &self.map, &self.radio)
    }

    pub fn in_building(&self, p: Point3) -> bool {
        p.z <= self.map.surface_or_ground(p.x, p.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub position: Point3,
    /// Radians in `(-pi, pi]`.
    pub heading: f64,
    pub reached: bool,
    pub alive: bool,
}

impl AgentState {
    pub fn active(&self) -> bool {
        self.alive && !self.reached
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub progress: f64,
    pub sinr: f64,
    pub collision: f64,
    pub altitude: f64,
    pub area: f64,
    pub obstacle: f64,
    pub terminal: f64,
    pub total: f64,
}

impl RewardBreakdown {
    pub fn component_sum(&self) -> f64 {
        self.progress
            + self.sinr
            + self.collision
            + self.altitude
            + self.area
            + self.obstacle
            + self.terminal
    }
}

/// Events that shape the reward of one agent on one tick.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StepFlags {
    pub obstacle: bool,
    pub collision: bool,
    pub out_of_area: bool,
    pub first_reach: bool,
    pub unreached_at_truncation: bool,
    pub clamped: bool,
}

/// Penalty-shaped reward decomposition.
pub fn reward(
    prev: Point3,
    next: Point3,
    target: Point3,
    action: &Action,
    sinr_db: f64,
    flags: &StepFlags,
    w: &RewardWeights,
) -> RewardBreakdown {
    let progress = w.w_progress * (prev.distance(target) - next.distance(target)) / w.dist_norm;
    let sinr = w.w_sinr * ((sinr_db - w.s_qos_db) / (w.s_hi_db - w.s_qos_db)).clamp(-1.0, 1.0);
    let collision = if flags.collision { -w.c_col } else { 0.0 };
    let altitude = -w.w_alt * action.d_alt.abs() / w.d_alt_max;
    let area = if flags.out_of_area { -w.c_area } else { 0.0 };
    let obstacle = if flags.obstacle { -w.c_obs } else { 0.0 };
    let mut terminal = 0.0;
    if flags.first_reach {
        terminal += w.b_reach;
    }
    if flags.unreached_at_truncation {
        terminal -= w.c_unreach;
    }
    let mut r = RewardBreakdown {
        progress,
        sinr,
        collision,
        altitude,
        area,
        obstacle,
        terminal,
        total: 0.0,
    };
    r.total = r.component_sum();
    r
}

/// Kinematic update: turn, then move `dist` along the new heading and
/// change altitude. Altitude is clamped to the mission band; horizontal
/// position is not.
pub fn apply_action(
    state: &AgentState,
    action: &Action,
    z_min: f64,
    z_max: f64,
) -> (Point3, f64, bool) {
    let heading = wrap_angle(state.heading + action.d_heading);
    let raw_z = state.position.z + action.d_alt;
    let z = raw_z.clamp(z_min, z_max);
    let p = Point3::new(
        state.position.x + action.dist * heading.cos(),
        state.position.y + action.dist * heading.sin(),
        z,
    );
    (p, heading, z != raw_z)
}

fn clamp_unit(v: f64) -> f64 {
    v.clamp(-1.0, 1.0)
}

/// Body-frame horizontal components of a world displacement.
fn to_body(dx: f64, dy: f64, heading: f64) -> (f64, f64) {
    let (s, c) = heading.sin_cos();
    (c * dx + s * dy, -s * dx + c * dy)
}

/// Observation vector of agent `i`.
///
/// Layout: own position (3), body-frame unit vector to target (3),
/// normalized target distance (1), SINR (1), gate flag (1), semantic patch
/// (`K*K*4`, heading-aligned), nearest-neighbour offsets (`M*3`).
pub fn build_observation(
    world: &SimWorld,
    a1: Option<&A1Message>,
    states: &[AgentState],
    i: usize,
    sinr_db: f64,
    mode: ObservationMode,
) -> Vec<f64> {
    let prm = &world.params;
    let m = &world.mission;
    let area = &m.mission_area;
    let me = &states[i];
    let p = me.position;
    let mut obs = Vec::with_capacity(prm.obs_dim());

    obs.push(clamp_unit(2.0 * (p.x - area.x_min) / area.width() - 1.0));
    obs.push(clamp_unit(2.0 * (p.y - area.y_min) / area.height() - 1.0));
    obs.push(clamp_unit(2.0 * (p.z - m.z_min) / (m.z_max - m.z_min) - 1.0));

    let rel = m.targets[i] - p;
    let dist = rel.norm();
    if dist > 0.0 {
        let (bx, by) = to_body(rel.x, rel.y, me.heading);
        obs.extend([bx / dist, by / dist, rel.z / dist].map(clamp_unit));
    } else {
        obs.extend([0.0; 3]);
    }
    let diag = (area.width().powi(2) + area.height().powi(2) + (m.z_max - m.z_min).powi(2)).sqrt();
    obs.push((dist / diag).min(1.0));

    obs.push(if mode.sinr {
        clamp_unit(2.0 * (sinr_db - prm.sinr_lo_db) / (prm.sinr_hi_db - prm.sinr_lo_db) - 1.0)
    } else {
        0.0
    });

    let a1 = a1.filter(|_| mode.semantics);
    let gate_flag = a1
        .and_then(|msg| msg.cell_at(p.x, p.y))
        .is_some_and(|c| c.gate_open);
    obs.push(if gate_flag { 1.0 } else { 0.0 });

    let k = prm.patch_k as isize;
    let half = k / 2;
    let (s, c) = me.heading.sin_cos();
    for row in 0..k {
        for col in 0..k {
            let cell = a1.and_then(|msg| {
                let fwd = (row - half) as f64 * msg.cell_size_m;
                let left = (col - half) as f64 * msg.cell_size_m;
                msg.cell_at(p.x + fwd * c - left * s, p.y + fwd * s + left * c)
            });
            match cell {
                Some(cell) if cell.gate_open => obs.extend([
                    cell.density.clamp(0.0, 1.0),
                    (cell.mean_h / m.z_max).clamp(0.0, 1.0),
                    (cell.max_h / m.z_max).clamp(0.0, 1.0),
                    cell.occl.clamp(0.0, 1.0),
                ]),
                _ => obs.extend([0.0; 4]),
            }
        }
    }

    let mut others: Vec<(f64, usize)> = states
        .iter()
        .enumerate()
        .filter(|&(j, s)| j != i && s.active())
        .map(|(j, s)| (s.position.distance(p), j))
        .collect();
    others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    for slot in 0..prm.neighbors_m {
        match others.get(slot) {
            Some(&(_, j)) => {
                let d = states[j].position - p;
                let (bx, by) = to_body(d.x, d.y, me.heading);
                let r = prm.neighbor_range_m;
                obs.extend([bx / r, by / r, d.z / r].map(clamp_unit));
            }
            None => obs.extend([0.0; 3]),
        }
    }
    debug_assert_eq!(obs.len(), prm.obs_dim());
    obs
}

/// Outcome of one tick for one agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    /// Agent was flying (alive, not yet at target) when the tick began.
    pub was_active: bool,
    pub action: Action,
    pub reward: RewardBreakdown,
    pub flags: StepFlags,
    /// Agent position lies inside a building volume after the tick.
    pub in_building: bool,
    /// Agent is terminal after this tick (dead, reached or truncated).
    pub done: bool,
    pub serving_id: u32,
    pub sinr_db: f64,
}

/// Tick-level summary alongside the per-agent results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub agents: Vec<StepResult>,
    /// Violating pairs this tick.
    pub collision_pairs: usize,
    /// Smallest sampled separation among flying agents, if at least two.
    pub min_separation: Option<f64>,
    pub episode_done: bool,
}

#[derive(Debug, Clone)]
pub struct SwarmEnv {
    world: Arc<SimWorld>,
    weights: RewardWeights,
    states: Vec<AgentState>,
    starts: Vec<Point3>,
    steps: usize,
    done: bool,
    /// Building strikes are counted but not fatal (shortest-path baseline).
    pass_through: bool,
}

/// Fractions along each motion segment sampled for separation checks.
const SEGMENT_SAMPLES: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

impl SwarmEnv {
    /// Starts an episode; initial headings point at each agent's target.
    pub fn new(world: Arc<SimWorld>, starts: Vec<Point3>, weights: RewardWeights, pass_through: bool) -> Self {
        let states = starts
            .iter()
            .zip(&world.mission.targets)
            .map(|(&p, t)| AgentState {
                position: p,
                heading: wrap_angle((t.y - p.y).atan2(t.x - p.x)),
                reached: false,
                alive: true,
            })
            .collect();
        Self {
            world,
            weights,
            states,
            starts,
            steps: 0,
            done: false,
            pass_through,
        }
    }

    pub fn world(&self) -> &Arc<SimWorld> {
        &self.world
    }

    pub fn states(&self) -> &[AgentState] {
        &self.states
    }

    pub fn starts(&self) -> &[Point3] {
        &self.starts
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn n_agents(&self) -> usize {
        self.states.len()
    }

    /// Simultaneous move of every flying agent.
    pub fn step(&mut self, actions: &[Action]) -> Result<StepOutcome, EnvError> {
        if self.done {
            return Err(EnvError::EpisodeOver);
        }
        let n = self.states.len();
        if actions.len() != n {
            return Err(EnvError::ActionCount {
                expected: n,
                got: actions.len(),
            });
        }
        let world = Arc::clone(&self.world);
        let m = &world.mission;
        let prev: Vec<AgentState> = self.states.clone();
        let active: Vec<bool> = prev.iter().map(AgentState::active).collect();

        let mut applied = vec![Action::HOLD; n];
        let mut flags = vec![StepFlags::default(); n];
        let mut cand: Vec<Point3> = prev.iter().map(|s| s.position).collect();
        let mut heading: Vec<f64> = prev.iter().map(|s| s.heading).collect();
        for i in (0..n).filter(|&i| active[i]) {
            let (a, clamped) = actions[i].clamped(&world.params.bounds);
            let (p, h, z_clamped) = apply_action(&prev[i], &a, m.z_min, m.z_max);
            applied[i] = a;
            cand[i] = p;
            heading[i] = h;
            flags[i].clamped = clamped || z_clamped;
        }

        // (1) building strikes
        let in_building: Vec<bool> = cand.iter().map(|&p| world.in_building(p)).collect();
        for i in (0..n).filter(|&i| active[i]) {
            flags[i].obstacle = in_building[i];
            flags[i].out_of_area = !m.in_area(cand[i]);
        }

        // (2) separation along the motion segments
        let mut collision_pairs = 0;
        let mut min_sep: Option<f64> = None;
        for i in (0..n).filter(|&i| active[i]) {
            for j in (i + 1..n).filter(|&j| active[j]) {
                let d = SEGMENT_SAMPLES
                    .iter()
                    .map(|&t| {
                        prev[i]
                            .position
                            .lerp(cand[i], t)
                            .distance(prev[j].position.lerp(cand[j], t))
                    })
                    .fold(f64::INFINITY, f64::min);
                min_sep = Some(min_sep.map_or(d, |s: f64| s.min(d)));
                if d < world.params.d_safe {
                    collision_pairs += 1;
                    flags[i].collision = true;
                    flags[j].collision = true;
                }
            }
        }

        // (3) commit, reach, truncation
        self.steps += 1;
        let truncating = self.steps >= m.max_steps;
        let mut results = Vec::with_capacity(n);
        for i in 0..n {
            let mut st = prev[i];
            if active[i] {
                st.position = cand[i];
                st.heading = heading[i];
                if flags[i].obstacle && !self.pass_through {
                    st.alive = false;
                }
                if st.alive && cand[i].distance(m.targets[i]) <= m.reach_tolerance {
                    st.reached = true;
                    flags[i].first_reach = true;
                }
                if truncating && st.alive && !st.reached {
                    flags[i].unreached_at_truncation = true;
                }
            }
            let sample = world.sinr(st.position)?;
            let r = if active[i] {
                reward(
                    prev[i].position,
                    st.position,
                    m.targets[i],
                    &applied[i],
                    sample.sinr_db,
                    &flags[i],
                    &self.weights,
                )
            } else {
                RewardBreakdown::default()
            };
            self.states[i] = st;
            results.push(StepResult {
                was_active: active[i],
                action: applied[i],
                reward: r,
                flags: flags[i],
                in_building: world.in_building(st.position),
                done: !st.active() || truncating,
                serving_id: sample.serving_id,
                sinr_db: sample.sinr_db,
            });
        }
        self.done = truncating || self.states.iter().all(|s| !s.active());
        Ok(StepOutcome {
            agents: results,
            collision_pairs,
            min_separation: min_sep,
            episode_done: self.done,
        })
    }
}

/// One line of the JSON-lines episode log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickRecord {
    pub t_ms: u64,
    pub agent: usize,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub heading: f64,
    pub sinr_db: f64,
    pub serving_id: u32,
    pub action: ActionRecord,
    pub reward: RewardBreakdown,
    pub flags: TickFlags,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionRecord {
    pub dh: f64,
    pub dz: f64,
    pub dist: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TickFlags {
    pub active: bool,
    pub alive: bool,
    pub reached: bool,
    pub obstacle: bool,
    pub in_building: bool,
    pub collision: bool,
    pub out_of_area: bool,
    pub clamped: bool,
    pub truncated: bool,
}

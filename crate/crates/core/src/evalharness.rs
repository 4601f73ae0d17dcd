//! Paired evaluation of the learned policy against the baselines, mission
//! metrics, and CSV exports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::agentenv::{Action, ActionBounds, AgentState, ObservationMode};
use crate::digest::derive_seed;
use crate::geom::{wrap_angle, Point3};
use crate::maddpg::{PolicyModel, STREAM_EVAL};
use crate::ricbus::{
    run_mission, Controller, DecisionContext, EpisodeLog, EpisodeSetup, MissionContext,
    MissionMode, RicError,
};
use crate::worldmodel::ScenarioConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Full,
    ShortestPath,
    NonSemanticRl,
    NonSinrSemanticRl,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 4] = [
        BaselineKind::Full,
        BaselineKind::ShortestPath,
        BaselineKind::NonSemanticRl,
        BaselineKind::NonSinrSemanticRl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::Full => "full",
            BaselineKind::ShortestPath => "shortest_path",
            BaselineKind::NonSemanticRl => "non_semantic_rl",
            BaselineKind::NonSinrSemanticRl => "non_sinr_semantic_rl",
        }
    }

    pub fn mode(self) -> ObservationMode {
        match self {
            BaselineKind::Full | BaselineKind::ShortestPath => ObservationMode::FULL,
            BaselineKind::NonSemanticRl => ObservationMode {
                semantics: false,
                sinr: true,
            },
            BaselineKind::NonSinrSemanticRl => ObservationMode {
                semantics: true,
                sinr: false,
            },
        }
    }

    pub fn learned(self) -> bool {
        self != BaselineKind::ShortestPath
    }
}

impl std::fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BaselineKind {
    type Err = String;

    /// Accepts the full names and the short forms `shortest`, `nosem`, `nosinr`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(BaselineKind::Full),
            "shortest" | "shortest_path" => Ok(BaselineKind::ShortestPath),
            "nosem" | "non_semantic_rl" => Ok(BaselineKind::NonSemanticRl),
            "nosinr" | "non_sinr_semantic_rl" => Ok(BaselineKind::NonSinrSemanticRl),
            other => Err(format!("unknown baseline {other:?}")),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("baseline {0} needs a trained model")]
    MissingModel(BaselineKind),
    #[error("model was trained for a different observation mode than {0}")]
    ModeMismatch(BaselineKind),
    #[error(transparent)]
    Ric(#[from] RicError),
}

/// Straight-line pilot: turn toward the target, climb or sink toward its
/// altitude, never overshoot. Blind to SINR, semantics and buildings.
pub fn shortest_path_policy(state: &AgentState, target: Point3, bounds: &ActionBounds) -> Action {
    let d = target - state.position;
    let horizontal = d.horizontal_norm();
    let d_heading = if horizontal > 0.0 {
        wrap_angle(d.y.atan2(d.x) - state.heading).clamp(-bounds.d_heading_max, bounds.d_heading_max)
    } else {
        0.0
    };
    Action {
        d_heading,
        d_alt: d.z.clamp(-bounds.d_alt_max, bounds.d_alt_max),
        dist: horizontal.min(bounds.dist_max),
    }
}

#[derive(Debug, Default, Clone, Copy)]
pub struct ShortestPathController;

impl Controller for ShortestPathController {
    fn decide(&mut self, ctx: &DecisionContext<'_>) -> Result<Vec<Action>, RicError> {
        Ok(ctx
            .states
            .iter()
            .zip(&ctx.world.mission.targets)
            .map(|(s, &t)| shortest_path_policy(s, t, &ctx.world.params.bounds))
            .collect())
    }
}

/// Mission metrics for one episode, or averaged over several.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsRow {
    pub reach_rate: f64,
    /// Ticks on which some flying agent ended inside a building volume.
    pub obstacle_intersections: f64,
    pub collision_events: f64,
    pub min_separation: Option<f64>,
    pub mean_sinr_db: f64,
    pub p5_sinr_db: f64,
    /// Mean over reached agents of path length over start-to-end distance.
    pub path_length_ratio: Option<f64>,
    pub out_of_area_steps: f64,
    pub altitude_change_total: f64,
    pub deadline_violations: f64,
}

impl MetricsRow {
    /// No strikes and no separation violations.
    pub fn is_clean(&self) -> bool {
        self.obstacle_intersections == 0.0 && self.collision_events == 0.0
    }
}

/// Nearest-rank percentile of a nonempty sample.
pub fn percentile(xs: &[f64], p: f64) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
    v[rank.min(v.len()) - 1]
}

/// Metrics of one episode log.
pub fn metrics(log: &EpisodeLog) -> MetricsRow {
    let n = log.n_agents;
    let mut by_tick: BTreeMap<u64, bool> = BTreeMap::new();
    let mut sinr = Vec::new();
    let mut path = vec![0.0; n];
    let mut last = log.starts.clone();
    let mut out_of_area = 0usize;
    let mut alt_total = 0.0;
    for t in log.ticks() {
        let hit = by_tick.entry(t.t_ms).or_insert(false);
        if !t.flags.active {
            continue;
        }
        *hit |= t.flags.in_building;
        sinr.push(t.sinr_db);
        let p = Point3::new(t.x, t.y, t.z);
        path[t.agent] += last[t.agent].distance(p);
        last[t.agent] = p;
        out_of_area += t.flags.out_of_area as usize;
        alt_total += t.action.dz.abs();
    }
    let ratios: Vec<f64> = (0..n)
        .filter(|&i| log.reached[i])
        .filter_map(|i| {
            let straight = log.starts[i].distance(last[i]);
            (straight > 0.0).then(|| path[i] / straight)
        })
        .collect();
    MetricsRow {
        reach_rate: log.reached.iter().filter(|&&r| r).count() as f64 / n.max(1) as f64,
        obstacle_intersections: by_tick.values().filter(|&&h| h).count() as f64,
        collision_events: log.collision_events as f64,
        min_separation: log.min_separation,
        mean_sinr_db: if sinr.is_empty() {
            0.0
        } else {
            sinr.iter().sum::<f64>() / sinr.len() as f64
        },
        p5_sinr_db: if sinr.is_empty() { 0.0 } else { percentile(&sinr, 5.0) },
        path_length_ratio: (!ratios.is_empty())
            .then(|| ratios.iter().sum::<f64>() / ratios.len() as f64),
        out_of_area_steps: out_of_area as f64,
        altitude_change_total: alt_total,
        deadline_violations: log.deadline_violations as f64,
    }
}

/// Field-wise mean; optional fields average over the rows that have them.
pub fn mean_row(rows: &[MetricsRow]) -> MetricsRow {
    let k = rows.len().max(1) as f64;
    let avg = |f: fn(&MetricsRow) -> f64| rows.iter().map(f).sum::<f64>() / k;
    let avg_opt = |f: fn(&MetricsRow) -> Option<f64>| {
        let v: Vec<f64> = rows.iter().filter_map(f).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    MetricsRow {
        reach_rate: avg(|r| r.reach_rate),
        obstacle_intersections: avg(|r| r.obstacle_intersections),
        collision_events: avg(|r| r.collision_events),
        min_separation: avg_opt(|r| r.min_separation),
        mean_sinr_db: avg(|r| r.mean_sinr_db),
        p5_sinr_db: avg(|r| r.p5_sinr_db),
        path_length_ratio: avg_opt(|r| r.path_length_ratio),
        out_of_area_steps: avg(|r| r.out_of_area_steps),
        altitude_change_total: avg(|r| r.altitude_change_total),
        deadline_violations: avg(|r| r.deadline_violations),
    }
}

/// Seeds of the paired evaluation episodes.
pub fn eval_seeds(scenario: &ScenarioConfig, episodes: usize) -> Vec<u64> {
    (0..episodes as u64)
        .map(|e| derive_seed(scenario.seed, STREAM_EVAL, e))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub rows: Vec<MetricsRow>,
    pub mean: MetricsRow,
}

/// Deterministic rollouts of `controller` on the paired evaluation seeds.
pub fn evaluate_controller(
    scenario: &ScenarioConfig,
    controller: &mut dyn Controller,
    mode: ObservationMode,
    pass_through: bool,
    episodes: usize,
) -> Result<Evaluation, RicError> {
    let ctx = MissionContext::from_scenario(scenario);
    let mut rows = Vec::with_capacity(episodes);
    for seed in eval_seeds(scenario, episodes) {
        let mut setup = EpisodeSetup::new(seed, mode);
        setup.pass_through = pass_through;
        rows.push(metrics(&run_mission(&ctx, &setup, controller, MissionMode::Eval)?));
    }
    let mean = mean_row(&rows);
    Ok(Evaluation { rows, mean })
}

/// Episode logs for `kind` on the given seeds, under identical worlds.
pub fn run_baseline(
    kind: BaselineKind,
    scenario: &ScenarioConfig,
    model: Option<&PolicyModel>,
    seeds: &[u64],
    detailed: bool,
) -> Result<Vec<EpisodeLog>, EvalError> {
    let ctx = MissionContext::from_scenario(scenario);
    let mut owned;
    let mut shortest = ShortestPathController;
    let controller: &mut dyn Controller = if kind.learned() {
        let m = model.ok_or(EvalError::MissingModel(kind))?;
        if m.mode != kind.mode() {
            return Err(EvalError::ModeMismatch(kind));
        }
        owned = m.clone();
        &mut owned
    } else {
        &mut shortest
    };
    seeds
        .iter()
        .map(|&seed| {
            let mut setup = EpisodeSetup::new(seed, kind.mode());
            setup.pass_through = kind == BaselineKind::ShortestPath;
            setup.detailed = detailed;
            Ok(run_mission(&ctx, &setup, controller, MissionMode::Eval)?)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub kind: BaselineKind,
    /// `None` marks the per-kind mean row.
    pub seed: Option<u64>,
    pub metrics: MetricsRow,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    pub fn mean(&self, kind: BaselineKind) -> Option<&MetricsRow> {
        self.rows
            .iter()
            .find(|r| r.kind == kind && r.seed.is_none())
            .map(|r| &r.metrics)
    }

    pub fn to_csv(&self, comment: &str) -> String {
        let mut out = format!("# {comment}\n");
        out.push_str(
            "kind,seed,reach_rate,obstacle_intersections,collision_events,min_separation,\
             mean_sinr_db,p5_sinr_db,path_length_ratio,out_of_area_steps,altitude_change_total,\
             deadline_violations\n",
        );
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            let m = &r.metrics;
            let seed = r.seed.map(|s| s.to_string()).unwrap_or_else(|| "mean".into());
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                r.kind,
                seed,
                m.reach_rate,
                m.obstacle_intersections,
                m.collision_events,
                opt(m.min_separation),
                m.mean_sinr_db,
                m.p5_sinr_db,
                opt(m.path_length_ratio),
                m.out_of_area_steps,
                m.altitude_change_total,
                m.deadline_violations
            )
            .expect("write to string");
        }
        out
    }
}

/// One row per `(kind, seed)` followed by the mean row of each kind.
pub fn compare(
    scenario: &ScenarioConfig,
    kinds: &[BaselineKind],
    models: &BTreeMap<BaselineKind, PolicyModel>,
    seeds: &[u64],
) -> Result<ComparisonTable, EvalError> {
    let mut rows = Vec::new();
    let mut means = Vec::new();
    for &kind in kinds {
        let logs = run_baseline(kind, scenario, models.get(&kind), seeds, false)?;
        let per: Vec<MetricsRow> = logs.iter().map(metrics).collect();
        means.push(ComparisonRow {
            kind,
            seed: None,
            metrics: mean_row(&per),
        });
        rows.extend(per.into_iter().zip(seeds).map(|(m, &s)| ComparisonRow {
            kind,
            seed: Some(s),
            metrics: m,
        }));
    }
    rows.extend(means);
    Ok(ComparisonTable { rows })
}

/// `agent,t_ms,x,y,z,sinr_db` per tick record.
pub fn export_trajectories(log: &EpisodeLog, comment: &str) -> String {
    let mut out = format!("# {comment}\nagent,t_ms,x,y,z,sinr_db\n");
    for t in log.ticks() {
        writeln!(out, "{},{},{},{},{},{}", t.agent, t.t_ms, t.x, t.y, t.z, t.sinr_db)
            .expect("write to string");
    }
    out
}

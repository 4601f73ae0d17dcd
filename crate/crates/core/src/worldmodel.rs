//! Urban world, mission geometry and scenario files.
//!
//! The world is a building-height raster over a regular metric grid. Cell
//! `(ix, iy)` covers the half-open square
//! `[origin_x + ix*cell, origin_x + (ix+1)*cell) x [origin_y + iy*cell, ...)`.
//! Heights are stored row-major (`iy * nx + ix`).

use std::collections::BTreeSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::agentenv::{EnvParams, RewardWeights};
use crate::geom::{Box3, Point3, Rect};
use crate::maddpg::MaddpgConfig;
use crate::radio::{RadioParams, RadioSite};
use crate::ricbus::ClockConfig;
use crate::semantics::SemanticsConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read scenario {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed scenario: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("unsupported schema_version {found} (expected {expected})")]
    Version { found: String, expected: u32 },
    #[error("invalid scenario: {0}")]
    Validation(String),
}

#[derive(Debug, Error, PartialEq)]
#[error("cannot place {n} agents with separation {d_safe} m after {attempts} attempts")]
pub struct SpawnError {
    pub n: usize,
    pub d_safe: f64,
    pub attempts: usize,
}

/// Grid geometry of a height raster.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    pub cell_size: f64,
    pub origin: [f64; 2],
}

impl GridSpec {
    pub fn validate(&self) -> Result<(), String> {
        if self.nx < 1 || self.ny < 1 {
            return Err("grid nx, ny >= 1".into());
        }
        if !(self.cell_size.is_finite() && self.cell_size > 0.0) {
            return Err("grid cell_size > 0".into());
        }
        if !(self.origin[0].is_finite() && self.origin[1].is_finite()) {
            return Err("grid origin finite".into());
        }
        Ok(())
    }

    pub fn extent(&self) -> Rect {
        Rect {
            x_min: self.origin[0],
            y_min: self.origin[1],
            x_max: self.origin[0] + self.nx as f64 * self.cell_size,
            y_max: self.origin[1] + self.ny as f64 * self.cell_size,
        }
    }

    pub fn cell_center(&self, ix: usize, iy: usize) -> (f64, f64) {
        (
            self.origin[0] + (ix as f64 + 0.5) * self.cell_size,
            self.origin[1] + (iy as f64 + 0.5) * self.cell_size,
        )
    }
}

/// Axis-aligned building footprint with a flat roof.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Building {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    pub height: f64,
}

impl Building {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.x_min < self.x_max) {
            return Err("building x_min < x_max".into());
        }
        if !(self.y_min < self.y_max) {
            return Err("building y_min < y_max".into());
        }
        if !(self.height.is_finite() && self.height > 0.0) {
            return Err("building height > 0".into());
        }
        Ok(())
    }

    /// Half-open footprint membership, matching the raster cell convention.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x < self.x_max && y >= self.y_min && y < self.y_max
    }
}

/// Combined terrain + building height raster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldMap {
    pub nx: usize,
    pub ny: usize,
    pub cell_size: f64,
    pub origin: [f64; 2],
    pub height: Vec<f64>,
}

impl WorldMap {
    pub fn flat(grid: GridSpec) -> Self {
        Self {
            nx: grid.nx,
            ny: grid.ny,
            cell_size: grid.cell_size,
            origin: grid.origin,
            height: vec![0.0; grid.nx * grid.ny],
        }
    }

    pub fn grid(&self) -> GridSpec {
        GridSpec {
            nx: self.nx,
            ny: self.ny,
            cell_size: self.cell_size,
            origin: self.origin,
        }
    }

    pub fn extent(&self) -> Rect {
        self.grid().extent()
    }

    /// Cell containing `(x, y)`, or `None` outside the raster.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let fx = (x - self.origin[0]) / self.cell_size;
        let fy = (y - self.origin[1]) / self.cell_size;
        if !(fx >= 0.0 && fy >= 0.0) {
            return None;
        }
        let (ix, iy) = (fx.floor() as usize, fy.floor() as usize);
        (ix < self.nx && iy < self.ny).then_some((ix, iy))
    }

    pub fn cell_height(&self, ix: usize, iy: usize) -> f64 {
        self.height[iy * self.nx + ix]
    }

    /// Nearest-cell height lookup; `None` when `(x, y)` is outside the raster.
    pub fn height_at(&self, x: f64, y: f64) -> Option<f64> {
        self.cell_of(x, y).map(|(ix, iy)| self.cell_height(ix, iy))
    }

    /// Height used for collision tests: zero outside the raster.
    pub fn surface_or_ground(&self, x: f64, y: f64) -> f64 {
        self.height_at(x, y).unwrap_or(0.0)
    }

    pub fn max_height(&self) -> f64 {
        self.height.iter().copied().fold(0.0, f64::max)
    }

    pub fn validate(&self) -> Result<(), String> {
        self.grid().validate()?;
        if self.height.len() != self.nx * self.ny {
            return Err("height raster has nx*ny entries".into());
        }
        if self.height.iter().any(|h| !(h.is_finite() && *h >= 0.0)) {
            return Err("height values finite and >= 0".into());
        }
        Ok(())
    }
}

/// Burns buildings into a raster: each cell takes the maximum height over
/// buildings whose footprint contains the cell center, else 0.
pub fn rasterize(buildings: &[Building], grid: GridSpec) -> WorldMap {
    let mut map = WorldMap::flat(grid);
    for b in buildings {
        // Restrict to the cell-index window that can contain centers inside b.
        let lo_x = ((b.x_min - grid.origin[0]) / grid.cell_size - 0.5).ceil().max(0.0) as usize;
        let lo_y = ((b.y_min - grid.origin[1]) / grid.cell_size - 0.5).ceil().max(0.0) as usize;
        let hi_x = ((b.x_max - grid.origin[0]) / grid.cell_size + 0.5).max(0.0) as usize;
        let hi_y = ((b.y_max - grid.origin[1]) / grid.cell_size + 0.5).max(0.0) as usize;
        for iy in lo_y.min(grid.ny)..hi_y.min(grid.ny) {
            for ix in lo_x.min(grid.nx)..hi_x.min(grid.nx) {
                let (cx, cy) = grid.cell_center(ix, iy);
                if b.contains(cx, cy) {
                    let h = &mut map.height[iy * grid.nx + ix];
                    *h = h.max(b.height);
                }
            }
        }
    }
    map
}

/// Mission geometry shared by all agents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MissionSpec {
    pub n_agents: usize,
    pub start_zone: Box3,
    pub targets: Vec<Point3>,
    pub mission_area: Rect,
    pub z_min: f64,
    pub z_max: f64,
    pub reach_tolerance: f64,
    pub max_steps: usize,
}

impl MissionSpec {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.z_min < self.z_max) {
            return Err("z_min < z_max".into());
        }
        if !(self.reach_tolerance > 0.0) {
            return Err("reach_tolerance > 0".into());
        }
        if self.n_agents < 1 {
            return Err("n_agents >= 1".into());
        }
        if self.targets.len() != self.n_agents {
            return Err("targets count equals agent count".into());
        }
        if self.max_steps < 1 {
            return Err("max_steps >= 1".into());
        }
        if !self.mission_area.is_valid() {
            return Err("mission_area x_min < x_max and y_min < y_max".into());
        }
        if !self.start_zone.is_valid() {
            return Err("start_zone nonempty".into());
        }
        if !self.mission_area.contains_rect(&self.start_zone.footprint()) {
            return Err("start_zone lies inside mission_area".into());
        }
        for t in &self.targets {
            if !(t.is_finite()
                && self.mission_area.contains_xy(t.x, t.y)
                && t.z >= self.z_min
                && t.z <= self.z_max)
            {
                return Err("targets lie inside mission_area".into());
            }
        }
        Ok(())
    }

    pub fn in_area(&self, p: Point3) -> bool {
        self.mission_area.contains_xy(p.x, p.y)
    }
}

/// Samples `n` start positions in the start zone with pairwise horizontal
/// separation of at least `d_safe`.
pub fn spawn_agents(
    mission: &MissionSpec,
    n: usize,
    d_safe: f64,
    seed: u64,
) -> Result<Vec<Point3>, SpawnError> {
    const MAX_ATTEMPTS: usize = 10_000;
    let zone = mission.start_zone;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<Point3> = Vec::with_capacity(n);
    let mut attempts = 0;
    while out.len() < n {
        if attempts == MAX_ATTEMPTS {
            return Err(SpawnError {
                n,
                d_safe,
                attempts,
            });
        }
        attempts += 1;
        let x = rng.random_range(zone.min.x..zone.max.x);
        let y = rng.random_range(zone.min.y..zone.max.y);
        let z = if zone.min.z < zone.max.z {
            rng.random_range(zone.min.z..zone.max.z)
        } else {
            zone.min.z
        };
        let p = Point3::new(x, y, z.clamp(mission.z_min, mission.z_max));
        if out
            .iter()
            .all(|q| (p.x - q.x).hypot(p.y - q.y) >= d_safe)
        {
            out.push(p);
        }
    }
    Ok(out)
}

/// How the world raster is described in a scenario file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSpec {
    pub grid: GridSpec,
    #[serde(default)]
    pub buildings: Vec<Building>,
    /// Optional per-cell terrain elevation added under the buildings.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub terrain_offset: Option<Vec<f64>>,
}

impl WorldSpec {
    pub fn to_map(&self) -> WorldMap {
        let mut map = rasterize(&self.buildings, self.grid);
        if let Some(offset) = &self.terrain_offset {
            for (h, o) in map.height.iter_mut().zip(offset) {
                *h += o;
            }
        }
        map
    }

    fn validate(&self) -> Result<(), String> {
        self.grid.validate()?;
        for b in &self.buildings {
            b.validate()?;
        }
        if let Some(t) = &self.terrain_offset {
            if t.len() != self.grid.nx * self.grid.ny {
                return Err("terrain_offset has nx*ny entries".into());
            }
            if t.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err("terrain_offset values finite and >= 0".into());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RadioSpec {
    #[serde(default)]
    pub params: RadioParams,
    pub sites: Vec<RadioSite>,
}

/// QoS presets. The profile seeds the control deadline when the clocks
/// block does not set one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    UrbanAirMobility,
    EmergencyResponse,
    SmartCitySurveillance,
    #[default]
    Delivery,
    InfrastructureInspection,
    PrecisionAgriculture,
}

impl Profile {
    /// Latency budget (ms) from a KPM report to the control command.
    pub fn control_deadline_ms(self) -> u64 {
        match self {
            Profile::UrbanAirMobility => 10,
            Profile::EmergencyResponse => 20,
            Profile::SmartCitySurveillance => 30,
            Profile::Delivery => 500,
            Profile::InfrastructureInspection => 20,
            Profile::PrecisionAgriculture => 1000,
        }
    }
}

/// Fully resolved scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub profile: Profile,
    pub seed: u64,
    pub world: WorldSpec,
    pub mission: MissionSpec,
    pub radio: RadioSpec,
    #[serde(default)]
    pub semantics: SemanticsConfig,
    #[serde(default)]
    pub env: EnvParams,
    #[serde(default)]
    pub rl: MaddpgConfig,
    #[serde(default)]
    pub clocks: ClockConfig,
    /// Fields filled from defaults at load time, e.g. `"rl: defaulted"`.
    #[serde(skip)]
    pub provenance: Vec<String>,
}

impl ScenarioConfig {
    pub fn n_agents(&self) -> usize {
        self.mission.n_agents
    }

    pub fn world_map(&self) -> WorldMap {
        self.world.to_map()
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let v = |r: Result<(), String>| r.map_err(ScenarioError::Validation);
        if self.schema_version != SCHEMA_VERSION {
            return Err(ScenarioError::Version {
                found: self.schema_version.to_string(),
                expected: SCHEMA_VERSION,
            });
        }
        v(self.world.validate())?;
        v(self.mission.validate())?;
        let extent = self.world.grid.extent();
        if !extent.contains_rect(&self.mission.mission_area) {
            return Err(ScenarioError::Validation(
                "mission_area lies inside the world grid".into(),
            ));
        }
        v(self.radio.params.validate())?;
        if self.radio.sites.is_empty() {
            return Err(ScenarioError::Validation("at least one radio site".into()));
        }
        let map = self.world_map();
        let mut ids = BTreeSet::new();
        for s in &self.radio.sites {
            if !ids.insert(s.id) {
                return Err(ScenarioError::Validation(format!(
                    "radio site id {} unique",
                    s.id
                )));
            }
            v(s.validate())?;
            match map.height_at(s.position.x, s.position.y) {
                Some(h) if s.position.z > h => {}
                Some(_) => {
                    return Err(ScenarioError::Validation(format!(
                        "radio site {} above local surface",
                        s.id
                    )))
                }
                None => {
                    return Err(ScenarioError::Validation(format!(
                        "radio site {} inside world grid",
                        s.id
                    )))
                }
            }
        }
        v(self.semantics.validate())?;
        v(self.env.validate())?;
        v(self.rl.validate())?;
        self.clocks
            .validate()
            .map_err(|e| ScenarioError::Validation(e.to_string()))?;
        Ok(())
    }

    /// Lowercase hex SHA-256 over the canonical JSON of the resolved config.
    pub fn digest(&self) -> String {
        crate::digest::sha256_hex(&serde_json::to_vec(self).expect("scenario serializes"))
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }
}

const OPTIONAL_BLOCKS: [&str; 5] = ["semantics", "env", "rl", "clocks", "profile"];

/// Parses and validates a scenario from JSON text.
pub fn parse_scenario(text: &str) -> Result<ScenarioConfig, ScenarioError> {
    let raw: Value = serde_json::from_str(text)?;
    let obj = raw
        .as_object()
        .ok_or_else(|| ScenarioError::Validation("scenario is a JSON object".into()))?;
    match obj.get("schema_version") {
        None => {
            return Err(ScenarioError::Validation(
                "schema_version present".into(),
            ))
        }
        Some(Value::Number(n)) if n.as_u64() == Some(SCHEMA_VERSION as u64) => {}
        Some(other) => {
            return Err(ScenarioError::Version {
                found: other.to_string(),
                expected: SCHEMA_VERSION,
            })
        }
    }

    let mut provenance = Vec::new();
    for block in OPTIONAL_BLOCKS {
        match obj.get(block) {
            None => provenance.push(format!("{block}: defaulted")),
            Some(Value::Object(fields)) => {
                // Field-level defaults inside a present block.
                if let Some(Value::Object(defaults)) = default_block(block) {
                    for key in defaults.keys() {
                        if !fields.contains_key(key) {
                            provenance.push(format!("{block}.{key}: defaulted"));
                        }
                    }
                }
            }
            Some(_) => {}
        }
    }
    if let Some(Value::Object(radio)) = obj.get("radio") {
        if !radio.contains_key("params") {
            provenance.push("radio.params: defaulted".into());
        }
    }
    let clocks_has_deadline = obj
        .get("clocks")
        .and_then(|c| c.get("control_deadline_ms"))
        .is_some();

    let mut cfg: ScenarioConfig = serde_json::from_value(raw)?;
    if !clocks_has_deadline {
        cfg.clocks.control_deadline_ms = cfg.profile.control_deadline_ms();
    }
    cfg.provenance = provenance;
    cfg.validate()?;
    Ok(cfg)
}

fn default_block(block: &str) -> Option<Value> {
    let v = match block {
        "semantics" => serde_json::to_value(SemanticsConfig::default()),
        "env" => serde_json::to_value(EnvParams::default()),
        "rl" => serde_json::to_value(MaddpgConfig::default()),
        "clocks" => serde_json::to_value(ClockConfig::default()),
        _ => return None,
    };
    v.ok()
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<ScenarioConfig, ScenarioError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_scenario(&text)
}

pub fn save_scenario(cfg: &ScenarioConfig, path: impl AsRef<Path>) -> Result<(), ScenarioError> {
    let path = path.as_ref();
    std::fs::write(path, cfg.to_json_pretty() + "\n").map_err(|source| ScenarioError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Seeded generator for rectangular city blocks.
#[derive(Debug, Clone)]
pub struct CityGenerator {
    pub area: Rect,
    pub count: usize,
    pub side_range: (f64, f64),
    pub height_range: (f64, f64),
    /// Footprints are kept out of these rectangles (start zone, targets).
    pub keep_clear: Vec<Rect>,
    /// Minimum gap between footprints.
    pub spacing: f64,
}

impl CityGenerator {
    pub fn generate(&self, seed: u64) -> Vec<Building> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out: Vec<Building> = Vec::with_capacity(self.count);
        let mut attempts = 0;
        while out.len() < self.count && attempts < 100 * self.count.max(1) {
            attempts += 1;
            let w = rng.random_range(self.side_range.0..=self.side_range.1);
            let d = rng.random_range(self.side_range.0..=self.side_range.1);
            let x0 = rng.random_range(self.area.x_min..self.area.x_max - w);
            let y0 = rng.random_range(self.area.y_min..self.area.y_max - d);
            let h = rng.random_range(self.height_range.0..=self.height_range.1);
            // Snap to whole meters so the shipped file stays readable.
            let b = Building {
                x_min: x0.round(),
                y_min: y0.round(),
                x_max: (x0 + w).round(),
                y_max: (y0 + d).round(),
                height: h.round(),
            };
            let grown = |r: &Rect, m: f64| Rect {
                x_min: r.x_min - m,
                y_min: r.y_min - m,
                x_max: r.x_max + m,
                y_max: r.y_max + m,
            };
            let fp = Rect {
                x_min: b.x_min,
                y_min: b.y_min,
                x_max: b.x_max,
                y_max: b.y_max,
            };
            let overlaps = |a: &Rect, c: &Rect| {
                a.x_min < c.x_max && c.x_min < a.x_max && a.y_min < c.y_max && c.y_min < a.y_max
            };
            if self.keep_clear.iter().any(|k| overlaps(&fp, k)) {
                continue;
            }
            let g = grown(&fp, self.spacing);
            if out.iter().any(|o| {
                overlaps(
                    &g,
                    &Rect {
                        x_min: o.x_min,
                        y_min: o.y_min,
                        x_max: o.x_max,
                        y_max: o.y_max,
                    },
                )
            }) {
                continue;
            }
            out.push(b);
        }
        out
    }
}

/// The desk-scale city used by the shipped `scenarios/reference.json`.
pub fn reference_scenario() -> ScenarioConfig {
    let grid = GridSpec {
        nx: 200,
        ny: 200,
        cell_size: 5.0,
        origin: [0.0, 0.0],
    };
    let start_zone = Box3 {
        min: Point3::new(80.0, 80.0, 40.0),
        max: Point3::new(200.0, 200.0, 60.0),
    };
    let targets = vec![
        Point3::new(560.0, 620.0, 50.0),
        Point3::new(620.0, 560.0, 50.0),
        Point3::new(520.0, 680.0, 50.0),
        Point3::new(680.0, 520.0, 50.0),
    ];
    let mission_area = Rect {
        x_min: 50.0,
        y_min: 50.0,
        x_max: 750.0,
        y_max: 750.0,
    };
    let site_xy = [(150.0, 420.0), (420.0, 150.0), (640.0, 640.0)];
    let mut keep_clear = vec![Rect {
        x_min: 60.0,
        y_min: 60.0,
        x_max: 220.0,
        y_max: 220.0,
    }];
    for t in &targets {
        keep_clear.push(Rect {
            x_min: t.x - 50.0,
            y_min: t.y - 50.0,
            x_max: t.x + 50.0,
            y_max: t.y + 50.0,
        });
    }
    for &(x, y) in &site_xy {
        keep_clear.push(Rect {
            x_min: x - 10.0,
            y_min: y - 10.0,
            x_max: x + 10.0,
            y_max: y + 10.0,
        });
    }
    let buildings = CityGenerator {
        area: mission_area,
        count: 60,
        side_range: (20.0, 80.0),
        height_range: (20.0, 80.0),
        keep_clear,
        spacing: 15.0,
    }
    .generate(REFERENCE_CITY_SEED);
    let sites = site_xy
        .iter()
        .enumerate()
        .map(|(k, &(x, y))| RadioSite {
            id: k as u32 + 1,
            position: Point3::new(x, y, 25.0 + 2.5 * k as f64),
            tx_power_dbm: 30.0,
            antenna_gain_db: 10.0,
        })
        .collect();
    let rl = MaddpgConfig {
        actor_hidden: vec![64, 64],
        critic_hidden: vec![128, 128],
        gamma: 0.95,
        batch: 128,
        update_every: 2,
        noise_start: 0.5,
        ..MaddpgConfig::default()
    };
    // Reward the link above a 30 dB floor so that SINR shaping does not
    // outweigh progress toward the target.
    let env = EnvParams {
        sinr_hi_db: 50.0,
        reward: RewardWeights {
            s_qos_db: 30.0,
            s_hi_db: 50.0,
            ..RewardWeights::default()
        },
        ..EnvParams::default()
    };
    ScenarioConfig {
        schema_version: SCHEMA_VERSION,
        profile: Profile::Delivery,
        seed: 0,
        world: WorldSpec {
            grid,
            buildings,
            terrain_offset: None,
        },
        mission: MissionSpec {
            n_agents: 4,
            start_zone,
            targets,
            mission_area,
            z_min: 30.0,
            z_max: 120.0,
            reach_tolerance: 20.0,
            max_steps: 80,
        },
        radio: RadioSpec {
            params: RadioParams::default(),
            sites,
        },
        semantics: SemanticsConfig::default(),
        env,
        rl,
        clocks: ClockConfig::default(),
        provenance: Vec::new(),
    }
}

/// Generator seed behind the reference city layout.
pub const REFERENCE_CITY_SEED: u64 = 2024;

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(n: usize) -> GridSpec {
        GridSpec {
            nx: n,
            ny: n,
            cell_size: 10.0,
            origin: [0.0, 0.0],
        }
    }

    fn brute(buildings: &[Building], g: GridSpec) -> Vec<f64> {
        let mut out = Vec::new();
        for iy in 0..g.ny {
            for ix in 0..g.nx {
                let (cx, cy) = g.cell_center(ix, iy);
                let h = buildings
                    .iter()
                    .filter(|b| b.contains(cx, cy))
                    .map(|b| b.height)
                    .fold(0.0, f64::max);
                out.push(h);
            }
        }
        out
    }

    #[test]
    fn empty_building_list_is_flat() {
        let m = rasterize(&[], grid(8));
        assert!(m.height.iter().all(|&h| h == 0.0));
    }

    #[test]
    fn single_building_covers_exact_cells() {
        // Cell centers x in {25, 35, 45} (ix 2..4) and y in {35, 45, 55} (iy 3..5).
        let b = Building {
            x_min: 20.0,
            y_min: 30.0,
            x_max: 50.0,
            y_max: 60.0,
            height: 30.0,
        };
        let m = rasterize(&[b], grid(8));
        for iy in 0..8 {
            for ix in 0..8 {
                let want = if (2..=4).contains(&ix) && (3..=5).contains(&iy) {
                    30.0
                } else {
                    0.0
                };
                assert_eq!(m.cell_height(ix, iy), want, "cell ({ix},{iy})");
            }
        }
        assert_eq!(m.height, brute(&[b], grid(8)));
    }

    #[test]
    fn overlapping_buildings_take_max() {
        let a = Building {
            x_min: 0.0,
            y_min: 0.0,
            x_max: 40.0,
            y_max: 40.0,
            height: 30.0,
        };
        let b = Building {
            x_min: 20.0,
            y_min: 20.0,
            x_max: 60.0,
            y_max: 60.0,
            height: 50.0,
        };
        let m = rasterize(&[a, b], grid(8));
        assert_eq!(m.height, brute(&[a, b], grid(8)));
        assert_eq!(m.cell_height(2, 2), 50.0);
        assert_eq!(m.cell_height(3, 3), 50.0);
        assert_eq!(m.cell_height(1, 1), 30.0);
    }

    #[test]
    fn height_lookup_tie_rule_and_bounds() {
        let b = Building {
            x_min: 10.0,
            y_min: 0.0,
            x_max: 20.0,
            y_max: 10.0,
            height: 30.0,
        };
        let m = rasterize(&[b], grid(4));
        assert_eq!(m.height_at(15.0, 5.0), Some(30.0));
        // x = 10 belongs to [10, 20), x = 20 to [20, 30).
        assert_eq!(m.height_at(10.0, 5.0), Some(30.0));
        assert_eq!(m.height_at(20.0, 5.0), Some(0.0));
        assert_eq!(m.height_at(40.0, 5.0), None);
        assert_eq!(m.height_at(-0.001, 5.0), None);
        assert_eq!(m.height_at(f64::NAN, 5.0), None);
    }

    fn mission() -> MissionSpec {
        MissionSpec {
            n_agents: 4,
            start_zone: Box3 {
                min: Point3::new(0.0, 0.0, 50.0),
                max: Point3::new(100.0, 100.0, 60.0),
            },
            targets: vec![Point3::new(500.0, 500.0, 60.0); 4],
            mission_area: Rect {
                x_min: 0.0,
                y_min: 0.0,
                x_max: 1000.0,
                y_max: 1000.0,
            },
            z_min: 30.0,
            z_max: 120.0,
            reach_tolerance: 10.0,
            max_steps: 100,
        }
    }

    #[test]
    fn spawn_is_deterministic_and_separated() {
        let m = mission();
        let a = spawn_agents(&m, 4, 10.0, 42).unwrap();
        let b = spawn_agents(&m, 4, 10.0, 42).unwrap();
        assert_eq!(a, b);
        for i in 0..4 {
            assert!(m.start_zone.footprint().contains_xy(a[i].x, a[i].y));
            for j in i + 1..4 {
                assert!((a[i].x - a[j].x).hypot(a[i].y - a[j].y) >= 10.0);
            }
        }
        let one = spawn_agents(&m, 1, 10.0, 1).unwrap();
        assert_eq!(one.len(), 1);
        assert!(one[0].z >= 50.0 && one[0].z <= 60.0);
    }

    #[test]
    fn spawn_fails_when_zone_too_small() {
        let mut m = mission();
        m.start_zone.max.x = 5.0;
        m.start_zone.max.y = 5.0;
        let err = spawn_agents(&m, 4, 10.0, 3).unwrap_err();
        assert_eq!(err.n, 4);
    }

    #[test]
    fn mission_rejects_inverted_altitude_bounds() {
        let mut m = mission();
        m.z_min = 120.0;
        m.z_max = 60.0;
        assert_eq!(m.validate().unwrap_err(), "z_min < z_max");
    }
}

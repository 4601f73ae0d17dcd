//! Non-RT terrain interpreter (rApp).
//!
//! A degraded overhead height raster is reduced to coarse semantic cells
//! (built density, mean/max height, occlusion index). Each coarse cell gets a
//! confidence score, and cells below the gate threshold are zeroed before
//! the map is published over A1.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::Hasher;
use crate::worldmodel::WorldMap;

pub const A1_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum SemanticsError {
    #[error("noise_sigma must be >= 0, got {0}")]
    BadNoise(f64),
    #[error("dropout_frac must be in [0, 1], got {0}")]
    BadDropout(f64),
    #[error("coarse factor must be >= 1")]
    BadCoarseFactor,
    #[error("gate threshold must be in [0, 1], got {0}")]
    BadThreshold(f64),
}

/// rApp settings carried in the scenario file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SemanticsConfig {
    pub noise_sigma: f64,
    pub dropout_frac: f64,
    pub coarse_factor: usize,
    pub h_built: f64,
    pub sigma_ref: f64,
    pub gate_threshold: f64,
    pub seed: u64,
}

impl Default for SemanticsConfig {
    fn default() -> Self {
        Self {
            noise_sigma: 2.0,
            dropout_frac: 0.05,
            coarse_factor: 4,
            h_built: 5.0,
            sigma_ref: 10.0,
            gate_threshold: 0.6,
            seed: 0,
        }
    }
}

impl SemanticsConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err("semantics noise_sigma >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.dropout_frac) {
            return Err("semantics 0 <= dropout_frac <= 1".into());
        }
        if self.coarse_factor < 1 {
            return Err("semantics coarse_factor >= 1".into());
        }
        if !(self.sigma_ref > 0.0) {
            return Err("semantics sigma_ref > 0".into());
        }
        if !(0.0..=1.0).contains(&self.gate_threshold) {
            return Err("semantics gate_threshold in [0, 1]".into());
        }
        if !self.h_built.is_finite() {
            return Err("semantics h_built finite".into());
        }
        Ok(())
    }
}

/// Overhead height observation; `None` marks a dropped-out cell.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterObservation {
    pub nx: usize,
    pub ny: usize,
    pub cell_size: f64,
    pub origin: [f64; 2],
    pub height_obs: Vec<Option<f64>>,
    pub noise_sigma: f64,
    pub dropout_frac: f64,
}

/// Drops cells with probability `dropout_frac` and perturbs the rest with
/// Gaussian noise, clamped at zero.
pub fn degrade(
    map: &WorldMap,
    noise_sigma: f64,
    dropout_frac: f64,
    seed: u64,
) -> Result<RasterObservation, SemanticsError> {
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(SemanticsError::BadNoise(noise_sigma));
    }
    if !(0.0..=1.0).contains(&dropout_frac) {
        return Err(SemanticsError::BadDropout(dropout_frac));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_sigma).expect("sigma checked");
    let height_obs = map
        .height
        .iter()
        .map(|&h| {
            let u: f64 = rng.random();
            if u < dropout_frac {
                None
            } else if noise_sigma == 0.0 {
                Some(h)
            } else {
                Some((h + noise.sample(&mut rng)).max(0.0))
            }
        })
        .collect();
    Ok(RasterObservation {
        nx: map.nx,
        ny: map.ny,
        cell_size: map.cell_size,
        origin: map.origin,
        height_obs,
        noise_sigma,
        dropout_frac,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SemanticCell {
    pub density: f64,
    pub mean_height: f64,
    pub max_height: f64,
    pub occlusion: f64,
    pub confidence: f64,
    pub gate_open: bool,
    /// Every fine cell under this coarse cell was missing.
    pub all_missing: bool,
    pub missing_frac: f64,
}

impl SemanticCell {
    fn zero_features(&mut self) {
        self.density = 0.0;
        self.mean_height = 0.0;
        self.max_height = 0.0;
        self.occlusion = 0.0;
    }
}

/// Coarse semantic grid, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticFeatureMap {
    pub k: usize,
    pub nx: usize,
    pub ny: usize,
    /// Coarse cell edge length in meters.
    pub cell_size: f64,
    pub origin: [f64; 2],
    /// Fine cells added on the high edges to make the grid divisible by `k`.
    pub padding: (usize, usize),
    pub noise_sigma: f64,
    pub gate_threshold: f64,
    pub cells: Vec<SemanticCell>,
}

impl SemanticFeatureMap {
    pub fn cell(&self, cx: usize, cy: usize) -> &SemanticCell {
        &self.cells[cy * self.nx + cx]
    }

    pub fn cell_at(&self, x: f64, y: f64) -> Option<&SemanticCell> {
        let fx = (x - self.origin[0]) / self.cell_size;
        let fy = (y - self.origin[1]) / self.cell_size;
        if !(fx >= 0.0 && fy >= 0.0) {
            return None;
        }
        let (cx, cy) = (fx as usize, fy as usize);
        (cx < self.nx && cy < self.ny).then(|| self.cell(cx, cy))
    }
}

/// Swappable feature extractor; the procedural one below stands in for a
/// learned segmentation model with the same output contract.
pub trait SemanticExtractor {
    fn extract(&self, obs: &RasterObservation) -> Result<SemanticFeatureMap, SemanticsError>;
}

#[derive(Debug, Clone, Copy)]
pub struct ProceduralExtractor {
    pub k: usize,
    pub h_built: f64,
}

impl SemanticExtractor for ProceduralExtractor {
    fn extract(&self, obs: &RasterObservation) -> Result<SemanticFeatureMap, SemanticsError> {
        extract_features(obs, self.k, self.h_built)
    }
}

/// Per-coarse-cell statistics over the `k x k` fine cells it covers.
///
/// The returned map has every gate open at threshold 0 and confidence 1;
/// call [`assign_confidence`] and [`gate`] before publishing.
pub fn extract_features(
    obs: &RasterObservation,
    k: usize,
    h_built: f64,
) -> Result<SemanticFeatureMap, SemanticsError> {
    if k < 1 {
        return Err(SemanticsError::BadCoarseFactor);
    }
    let cnx = obs.nx.div_ceil(k);
    let cny = obs.ny.div_ceil(k);
    let padding = (cnx * k - obs.nx, cny * k - obs.ny);
    let mut cells = vec![SemanticCell::default(); cnx * cny];
    for cy in 0..cny {
        for cx in 0..cnx {
            let (mut n, mut missing, mut built) = (0usize, 0usize, 0usize);
            let (mut sum, mut max) = (0.0f64, 0.0f64);
            for fy in cy * k..(cy + 1) * k {
                for fx in cx * k..(cx + 1) * k {
                    // Padding cells are flat ground.
                    let h = if fx < obs.nx && fy < obs.ny {
                        obs.height_obs[fy * obs.nx + fx]
                    } else {
                        Some(0.0)
                    };
                    match h {
                        None => missing += 1,
                        Some(h) => {
                            n += 1;
                            sum += h;
                            max = max.max(h);
                            if h >= h_built {
                                built += 1;
                            }
                        }
                    }
                }
            }
            let c = &mut cells[cy * cnx + cx];
            c.missing_frac = missing as f64 / (k * k) as f64;
            c.confidence = 1.0;
            c.gate_open = true;
            if n == 0 {
                c.all_missing = true;
            } else {
                c.density = built as f64 / n as f64;
                c.mean_height = sum / n as f64;
                c.max_height = max;
            }
        }
    }
    // Occlusion: share of existing 8-neighbours taller than this cell's mean.
    let occl: Vec<f64> = (0..cny)
        .flat_map(|cy| (0..cnx).map(move |cx| (cx, cy)))
        .map(|(cx, cy)| {
            let me = &cells[cy * cnx + cx];
            if me.all_missing {
                return 0.0;
            }
            let (mut total, mut taller) = (0usize, 0usize);
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let (nx, ny) = (cx as isize + dx, cy as isize + dy);
                    if nx < 0 || ny < 0 || nx as usize >= cnx || ny as usize >= cny {
                        continue;
                    }
                    total += 1;
                    if cells[ny as usize * cnx + nx as usize].max_height > me.mean_height {
                        taller += 1;
                    }
                }
            }
            if total == 0 {
                0.0
            } else {
                taller as f64 / total as f64
            }
        })
        .collect();
    for (c, o) in cells.iter_mut().zip(occl) {
        c.occlusion = o;
    }
    Ok(SemanticFeatureMap {
        k,
        nx: cnx,
        ny: cny,
        cell_size: obs.cell_size * k as f64,
        origin: obs.origin,
        padding,
        noise_sigma: obs.noise_sigma,
        gate_threshold: 0.0,
        cells,
    })
}

/// `(1 - missing_frac) * exp(-noise_sigma / sigma_ref)`, clamped to [0, 1].
pub fn confidence(missing_frac: f64, noise_sigma: f64, sigma_ref: f64) -> f64 {
    ((1.0 - missing_frac) * (-noise_sigma / sigma_ref).exp()).clamp(0.0, 1.0)
}

pub fn assign_confidence(map: &mut SemanticFeatureMap, sigma_ref: f64) {
    let sigma = map.noise_sigma;
    for c in &mut map.cells {
        c.confidence = confidence(c.missing_frac, sigma, sigma_ref);
    }
}

/// Zeroes the features of every cell whose confidence is below `threshold`.
/// Idempotent.
pub fn gate(
    mut map: SemanticFeatureMap,
    threshold: f64,
) -> Result<SemanticFeatureMap, SemanticsError> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(SemanticsError::BadThreshold(threshold));
    }
    for c in &mut map.cells {
        c.gate_open = c.confidence >= threshold;
        if !c.gate_open {
            c.zero_features();
        }
    }
    map.gate_threshold = threshold;
    Ok(map)
}

/// Forces every gate closed, as if confidence had collapsed everywhere.
pub fn close_all_gates(mut map: SemanticFeatureMap) -> SemanticFeatureMap {
    for c in &mut map.cells {
        c.gate_open = false;
        c.zero_features();
    }
    map
}

/// Runs degrade -> extract -> confidence -> gate.
pub fn interpret(
    map: &WorldMap,
    cfg: &SemanticsConfig,
    seed: u64,
) -> Result<SemanticFeatureMap, SemanticsError> {
    let obs = degrade(map, cfg.noise_sigma, cfg.dropout_frac, seed)?;
    let extractor = ProceduralExtractor {
        k: cfg.coarse_factor,
        h_built: cfg.h_built,
    };
    let mut features = extractor.extract(&obs)?;
    assign_confidence(&mut features, cfg.sigma_ref);
    gate(features, cfg.gate_threshold)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct A1Cell {
    pub density: f64,
    pub mean_h: f64,
    pub max_h: f64,
    pub occl: f64,
    pub conf: f64,
    pub gate_open: bool,
}

/// Semantic enrichment published from the Non-RT RIC over A1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct A1Message {
    pub version: u32,
    pub timestamp_ms: u64,
    pub gate_threshold: f64,
    pub k: usize,
    pub nx: usize,
    pub ny: usize,
    pub cell_size_m: f64,
    pub origin: [f64; 2],
    pub cells: Vec<A1Cell>,
    pub digest: String,
}

impl A1Message {
    pub fn cell_at(&self, x: f64, y: f64) -> Option<&A1Cell> {
        let fx = (x - self.origin[0]) / self.cell_size_m;
        let fy = (y - self.origin[1]) / self.cell_size_m;
        if !(fx >= 0.0 && fy >= 0.0) {
            return None;
        }
        let (cx, cy) = (fx as usize, fy as usize);
        (cx < self.nx && cy < self.ny).then(|| &self.cells[cy * self.nx + cx])
    }

    /// Digest over the map content (timestamp excluded).
    pub fn content_digest(&self) -> String {
        let mut h = Hasher::new();
        h.u64(self.version as u64)
            .f64(self.gate_threshold)
            .u64(self.k as u64)
            .u64(self.nx as u64)
            .u64(self.ny as u64)
            .f64(self.cell_size_m)
            .f64(self.origin[0])
            .f64(self.origin[1]);
        for c in &self.cells {
            h.f64(c.density)
                .f64(c.mean_h)
                .f64(c.max_h)
                .f64(c.occl)
                .f64(c.conf)
                .bool(c.gate_open);
        }
        h.finish_hex()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("A1 message serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn all_gates_closed(&self) -> bool {
        self.cells.iter().all(|c| !c.gate_open)
    }
}

pub fn build_a1(features: &SemanticFeatureMap, timestamp_ms: u64) -> A1Message {
    let mut msg = A1Message {
        version: A1_VERSION,
        timestamp_ms,
        gate_threshold: features.gate_threshold,
        k: features.k,
        nx: features.nx,
        ny: features.ny,
        cell_size_m: features.cell_size,
        origin: features.origin,
        cells: features
            .cells
            .iter()
            .map(|c| A1Cell {
                density: c.density,
                mean_h: c.mean_height,
                max_h: c.max_height,
                occl: c.occlusion,
                conf: c.confidence,
                gate_open: c.gate_open,
            })
            .collect(),
        digest: String::new(),
    };
    msg.digest = msg.content_digest();
    msg
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::worldmodel::{rasterize, Building, GridSpec};

    fn grid(n: usize) -> GridSpec {
        GridSpec {
            nx: n,
            ny: n,
            cell_size: 5.0,
            origin: [0.0, 0.0],
        }
    }

    fn city() -> WorldMap {
        rasterize(
            &[
                Building { x_min: 0.0, y_min: 0.0, x_max: 20.0, y_max: 20.0, height: 30.0 },
                Building { x_min: 40.0, y_min: 20.0, x_max: 60.0, y_max: 50.0, height: 55.0 },
            ],
            grid(16),
        )
    }

    #[test]
    fn identity_degradation() {
        let m = city();
        let obs = degrade(&m, 0.0, 0.0, 1).unwrap();
        let back: Vec<f64> = obs.height_obs.iter().map(|h| h.unwrap()).collect();
        assert_eq!(back, m.height);
    }

    #[test]
    fn full_dropout_loses_everything() {
        let obs = degrade(&city(), 1.0, 1.0, 1).unwrap();
        assert!(obs.height_obs.iter().all(Option::is_none));
    }

    #[test]
    fn dropout_fraction_statistics() {
        let m = WorldMap::flat(grid(100));
        let obs = degrade(&m, 0.5, 0.3, 77).unwrap();
        let missing = obs.height_obs.iter().filter(|h| h.is_none()).count() as f64 / 1e4;
        assert!((missing - 0.3).abs() < 0.02, "missing fraction {missing}");
        assert!(obs.height_obs.iter().flatten().all(|&h| h >= 0.0));
    }

    #[test]
    fn degrade_rejects_bad_parameters() {
        let m = city();
        assert_eq!(degrade(&m, -1.0, 0.0, 0).unwrap_err(), SemanticsError::BadNoise(-1.0));
        assert_eq!(degrade(&m, 0.0, 1.5, 0).unwrap_err(), SemanticsError::BadDropout(1.5));
    }

    #[test]
    fn empty_world_features_are_zero() {
        let obs = degrade(&WorldMap::flat(grid(12)), 0.0, 0.0, 0).unwrap();
        let f = extract_features(&obs, 4, 5.0).unwrap();
        assert_eq!((f.nx, f.ny), (3, 3));
        for c in &f.cells {
            assert_eq!((c.density, c.mean_height, c.max_height, c.occlusion), (0.0, 0.0, 0.0, 0.0));
        }
    }

    #[test]
    fn fully_built_and_half_built_cells() {
        // Coarse cell (0,0) covers fine cells 0..4, i.e. 0..20 m: fully built.
        let obs = degrade(&city(), 0.0, 0.0, 0).unwrap();
        let f = extract_features(&obs, 4, 5.0).unwrap();
        let c = f.cell(0, 0);
        assert_eq!(c.density, 1.0);
        assert_eq!(c.max_height, 30.0);

        let half = rasterize(
            &[Building { x_min: 0.0, y_min: 0.0, x_max: 10.0, y_max: 20.0, height: 30.0 }],
            grid(4),
        );
        let f = extract_features(&degrade(&half, 0.0, 0.0, 0).unwrap(), 4, 5.0).unwrap();
        assert_eq!(f.cell(0, 0).density, 0.5);
        assert_eq!(f.cell(0, 0).mean_height, 15.0);
    }

    #[test]
    fn occlusion_counts_taller_neighbours() {
        let obs = degrade(&city(), 0.0, 0.0, 0).unwrap();
        let f = extract_features(&obs, 4, 5.0).unwrap();
        // Cell (1,0): flat (mean 0); neighbours (0,0) max 30, (2,0) empty,
        // (0,1) empty, (1,1) empty, (2,1) has the 55 m block -> 2 of 5.
        assert!((f.cell(1, 0).occlusion - 2.0 / 5.0).abs() < 1e-12);
        // The 30 m block's own cell: no neighbour exceeds its mean of 30 -> 0.
        assert_eq!(f.cell(0, 0).occlusion, 0.0);
    }

    #[test]
    fn padding_is_recorded() {
        let obs = degrade(&WorldMap::flat(grid(10)), 0.0, 0.0, 0).unwrap();
        let f = extract_features(&obs, 4, 5.0).unwrap();
        assert_eq!((f.nx, f.ny), (3, 3));
        assert_eq!(f.padding, (2, 2));
    }

    #[test]
    fn all_missing_cells_are_flagged_zero() {
        let obs = degrade(&city(), 0.0, 1.0, 0).unwrap();
        let f = extract_features(&obs, 4, 5.0).unwrap();
        assert!(f.cells.iter().all(|c| c.all_missing && c.density == 0.0 && c.max_height == 0.0));
    }

    #[test]
    fn confidence_worked_values() {
        assert_eq!(confidence(0.0, 0.0, 10.0), 1.0);
        assert_eq!(confidence(1.0, 3.0, 10.0), 0.0);
        assert!((confidence(0.5, 10.0, 10.0) - 0.5 * (-1.0f64).exp()).abs() < 1e-15);
        assert!((confidence(0.5, 10.0, 10.0) - 0.1839).abs() < 1e-4);
    }

    #[test]
    fn gate_behaviour() {
        let obs = degrade(&city(), 4.0, 0.1, 5).unwrap();
        let mut f = extract_features(&obs, 4, 5.0).unwrap();
        assign_confidence(&mut f, 10.0);
        let open = gate(f.clone(), 0.0).unwrap();
        assert!(open.cells.iter().all(|c| c.gate_open));
        assert_eq!(
            open.cells.iter().map(|c| c.density).collect::<Vec<_>>(),
            f.cells.iter().map(|c| c.density).collect::<Vec<_>>()
        );
        let shut = gate(f.clone(), 1.0).unwrap();
        assert!(shut.cells.iter().all(|c| !c.gate_open && c.density == 0.0 && c.max_height == 0.0));
        let once = gate(f.clone(), 0.6).unwrap();
        assert_eq!(gate(once.clone(), 0.6).unwrap(), once);
        for c in &once.cells {
            assert_eq!(c.gate_open, c.confidence >= 0.6);
        }
        assert_eq!(gate(f, 1.2).unwrap_err(), SemanticsError::BadThreshold(1.2));
    }

    #[test]
    fn a1_round_trip_and_digest() {
        let cfg = SemanticsConfig::default();
        let f = interpret(&city(), &cfg, 9).unwrap();
        let msg = build_a1(&f, 10_000);
        let back = A1Message::from_json(&msg.to_json()).unwrap();
        assert_eq!(back, msg);
        assert_eq!(build_a1(&f, 20_000).digest, msg.digest);
        let mut g = f.clone();
        g.cells[3].mean_height += 0.5;
        assert_ne!(build_a1(&g, 10_000).digest, msg.digest);
    }
}

//! Air-to-ground propagation: log-distance path loss with LoS/NLoS
//! exponents, ray-cast occlusion over the height raster and spatially
//! correlated log-normal shadowing.
//!
//! Every function here is pure; identical inputs (including seeds) give
//! bit-identical outputs.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::mix64;
use crate::geom::{Point3, Rect};
use crate::worldmodel::WorldMap;

#[derive(Debug, Error, PartialEq)]
pub enum RadioError {
    #[error("point ({x}, {y}) is outside the world grid")]
    OutOfExtent { x: f64, y: f64 },
    #[error("no radio sites configured")]
    NoSites,
    #[error("altitude {0} m outside mission altitude bounds")]
    AltitudeOutOfBounds(f64),
    #[error("resolution must be positive, got {0}")]
    BadResolution(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RadioSite {
    pub id: u32,
    /// Antenna position; `z` includes the mast height.
    pub position: Point3,
    pub tx_power_dbm: f64,
    pub antenna_gain_db: f64,
}

impl RadioSite {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.position.is_finite() && self.position.z > 0.0) {
            return Err(format!("radio site {} z > 0", self.id));
        }
        if !(self.tx_power_dbm.is_finite() && self.antenna_gain_db.is_finite()) {
            return Err(format!("radio site {} powers finite", self.id));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RadioParams {
    pub pl0_db: f64,
    pub d0_m: f64,
    pub n_los: f64,
    pub n_nlos: f64,
    pub nlos_extra_db: f64,
    pub shadow_sigma_los_db: f64,
    pub shadow_sigma_nlos_db: f64,
    pub shadow_corr_len_m: f64,
    pub noise_power_dbm: f64,
    pub fading_seed: u64,
}

impl Default for RadioParams {
    fn default() -> Self {
        Self {
            pl0_db: 30.0,
            d0_m: 1.0,
            n_los: 2.2,
            n_nlos: 3.5,
            nlos_extra_db: 20.0,
            shadow_sigma_los_db: 4.0,
            shadow_sigma_nlos_db: 6.0,
            shadow_corr_len_m: 50.0,
            noise_power_dbm: -94.0,
            fading_seed: 0,
        }
    }
}

impl RadioParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.d0_m > 0.0) {
            return Err("radio d0 > 0".into());
        }
        if !(self.n_los > 0.0 && self.n_nlos > 0.0) {
            return Err("radio path-loss exponents > 0".into());
        }
        if !(self.shadow_sigma_los_db >= 0.0 && self.shadow_sigma_nlos_db >= 0.0) {
            return Err("radio shadow sigmas >= 0".into());
        }
        if !(self.shadow_corr_len_m > 0.0) {
            return Err("radio shadow_corr_len > 0".into());
        }
        if !(self.pl0_db.is_finite()
            && self.nlos_extra_db.is_finite()
            && self.noise_power_dbm.is_finite())
        {
            return Err("radio params finite".into());
        }
        Ok(())
    }

    /// Same parameters with shadowing switched off.
    pub fn without_fading(mut self) -> Self {
        self.shadow_sigma_los_db = 0.0;
        self.shadow_sigma_nlos_db = 0.0;
        self
    }
}

/// True iff the segment `a -> b` clears the raster of every crossed cell
/// other than the two endpoint cells.
///
/// The segment is walked cell by cell (2D DDA) with its altitude
/// interpolated linearly; a crossed cell blocks when the segment's lowest
/// altitude inside it is at or below the cell height.
pub fn line_of_sight(map: &WorldMap, a: Point3, b: Point3) -> Result<bool, RadioError> {
    let ca = map
        .cell_of(a.x, a.y)
        .ok_or(RadioError::OutOfExtent { x: a.x, y: a.y })?;
    let cb = map
        .cell_of(b.x, b.y)
        .ok_or(RadioError::OutOfExtent { x: b.x, y: b.y })?;
    if ca == cb {
        return Ok(true);
    }
    let cs = map.cell_size;
    let (dx, dy, dz) = (b.x - a.x, b.y - a.y, b.z - a.z);
    let z_at = |t: f64| a.z + dz * t;

    let (mut ix, mut iy) = (ca.0 as isize, ca.1 as isize);
    let (end_x, end_y) = (cb.0 as isize, cb.1 as isize);
    let axis = |d: f64, pos: f64, origin: f64, idx: isize| -> (isize, f64, f64) {
        if d > 0.0 {
            let boundary = origin + (idx + 1) as f64 * cs;
            (1, (boundary - pos) / d, cs / d)
        } else if d < 0.0 {
            let boundary = origin + idx as f64 * cs;
            (-1, (boundary - pos) / d, -cs / d)
        } else {
            (0, f64::INFINITY, f64::INFINITY)
        }
    };
    let (step_x, mut t_max_x, t_delta_x) = axis(dx, a.x, map.origin[0], ix);
    let (step_y, mut t_max_y, t_delta_y) = axis(dy, a.y, map.origin[1], iy);

    let mut t_enter = 0.0;
    let limit = map.nx + map.ny + 4;
    for _ in 0..limit {
        let t_exit = t_max_x.min(t_max_y).min(1.0);
        let here = (ix, iy);
        if here != (ca.0 as isize, ca.1 as isize) && here != (end_x, end_y) {
            if ix < 0 || iy < 0 || ix as usize >= map.nx || iy as usize >= map.ny {
                break;
            }
            let lowest = z_at(t_enter).min(z_at(t_exit));
            if lowest <= map.cell_height(ix as usize, iy as usize) {
                return Ok(false);
            }
        }
        if here == (end_x, end_y) || t_exit >= 1.0 {
            break;
        }
        t_enter = t_exit;
        if t_max_x < t_max_y {
            ix += step_x;
            t_max_x += t_delta_x;
        } else if t_max_y < t_max_x {
            iy += step_y;
            t_max_y += t_delta_y;
        } else {
            // Exact vertex crossing: move diagonally.
            ix += step_x;
            iy += step_y;
            t_max_x += t_delta_x;
            t_max_y += t_delta_y;
        }
    }
    Ok(true)
}

/// Log-distance path loss in dB.
pub fn path_loss_db(d: f64, los: bool, p: &RadioParams) -> f64 {
    let n = if los { p.n_los } else { p.n_nlos };
    let extra = if los { 0.0 } else { p.nlos_extra_db };
    p.pl0_db + 10.0 * n * (d.max(p.d0_m) / p.d0_m).log10() + extra
}

/// Unit-variance Gaussian attached to one shadowing lattice node.
pub fn lattice_gaussian(fading_seed: u64, site_id: u32, gx: i64, gy: i64) -> f64 {
    let mut h = mix64(fading_seed ^ 0x5ad0_5eed);
    h = mix64(h ^ site_id as u64);
    h = mix64(h ^ gx as u64);
    h = mix64(h ^ gy as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(h);
    StandardNormal.sample(&mut rng)
}

/// Correlated shadowing (dB) for one site at `pos`.
///
/// Lattice spacing equals the correlation length; node values are
/// bilinearly interpolated in x-y and scaled by the LoS or NLoS sigma.
pub fn shadow_db(pos: Point3, p: &RadioParams, site_id: u32, los: bool) -> f64 {
    let sigma = if los {
        p.shadow_sigma_los_db
    } else {
        p.shadow_sigma_nlos_db
    };
    if sigma == 0.0 {
        return 0.0;
    }
    let gx = pos.x / p.shadow_corr_len_m;
    let gy = pos.y / p.shadow_corr_len_m;
    let (x0, y0) = (gx.floor(), gy.floor());
    let (fx, fy) = (gx - x0, gy - y0);
    let (x0, y0) = (x0 as i64, y0 as i64);
    let g = |ix: i64, iy: i64| lattice_gaussian(p.fading_seed, site_id, ix, iy);
    let v = g(x0, y0) * (1.0 - fx) * (1.0 - fy)
        + g(x0 + 1, y0) * fx * (1.0 - fy)
        + g(x0, y0 + 1) * (1.0 - fx) * fy
        + g(x0 + 1, y0 + 1) * fx * fy;
    sigma * v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SinrSample {
    pub serving_id: u32,
    pub sinr_db: f64,
    /// Received power per site, in site-list order.
    pub rx_powers_dbm: Vec<f64>,
}

fn dbm_to_mw(dbm: f64) -> f64 {
    10f64.powf(dbm / 10.0)
}

pub fn rx_power_dbm(
    site: &RadioSite,
    pos: Point3,
    map: &WorldMap,
    p: &RadioParams,
) -> Result<f64, RadioError> {
    let los = line_of_sight(map, site.position, pos)?;
    let d = site.position.distance(pos);
    Ok(site.tx_power_dbm + site.antenna_gain_db
        - path_loss_db(d, los, p)
        - shadow_db(pos, p, site.id, los))
}

/// Serving site and SINR at a point.
pub fn sinr_at(
    pos: Point3,
    sites: &[RadioSite],
    map: &WorldMap,
    p: &RadioParams,
) -> Result<SinrSample, RadioError> {
    if sites.is_empty() {
        return Err(RadioError::NoSites);
    }
    if map.cell_of(pos.x, pos.y).is_none() {
        return Err(RadioError::OutOfExtent { x: pos.x, y: pos.y });
    }
    let rx = sites
        .iter()
        .map(|s| rx_power_dbm(s, pos, map, p))
        .collect::<Result<Vec<_>, _>>()?;
    let mut best = 0;
    for (k, s) in sites.iter().enumerate().skip(1) {
        if rx[k] > rx[best] || (rx[k] == rx[best] && s.id < sites[best].id) {
            best = k;
        }
    }
    let interference: f64 = rx
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != best)
        .map(|(_, &r)| dbm_to_mw(r))
        .sum();
    let sinr = dbm_to_mw(rx[best]) / (interference + dbm_to_mw(p.noise_power_dbm));
    Ok(SinrSample {
        serving_id: sites[best].id,
        sinr_db: 10.0 * sinr.log10(),
        rx_powers_dbm: rx,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceCell {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub sinr_db: f64,
    pub serving_id: u32,
    pub in_obstacle: bool,
}

/// SINR sampled at cell centers over an area, row-major (`iy * nx + ix`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SinrSurface {
    pub nx: usize,
    pub ny: usize,
    pub cells: Vec<SurfaceCell>,
}

impl SinrSurface {
    pub const CSV_HEADER: &'static str = "x,y,z,sinr_db,serving_id,in_obstacle";

    pub fn to_csv(&self, comment: &str) -> String {
        let mut out = String::new();
        if !comment.is_empty() {
            writeln!(out, "# {comment}").unwrap();
        }
        writeln!(out, "{}", Self::CSV_HEADER).unwrap();
        for c in &self.cells {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                c.x, c.y, c.z, c.sinr_db, c.serving_id, c.in_obstacle as u8
            )
            .unwrap();
        }
        out
    }
}

/// Number of surface cells along one side: the area is split into
/// `round(extent / resolution)` equal cells (at least one) so cell centers
/// always fall inside the area.
pub fn surface_cells_along(extent: f64, resolution: f64) -> usize {
    ((extent / resolution).round() as usize).max(1)
}

/// SINR surface at a fixed altitude over `area`.
#[allow(clippy::too_many_arguments)]
pub fn export_sinr_surface(
    altitude: f64,
    resolution: f64,
    area: Rect,
    z_bounds: (f64, f64),
    sites: &[RadioSite],
    map: &WorldMap,
    p: &RadioParams,
) -> Result<SinrSurface, RadioError> {
    if !(altitude >= z_bounds.0 && altitude <= z_bounds.1) {
        return Err(RadioError::AltitudeOutOfBounds(altitude));
    }
    if !(resolution > 0.0 && resolution.is_finite()) {
        return Err(RadioError::BadResolution(resolution));
    }
    let nx = surface_cells_along(area.width(), resolution);
    let ny = surface_cells_along(area.height(), resolution);
    let (sx, sy) = (area.width() / nx as f64, area.height() / ny as f64);
    let mut cells = Vec::with_capacity(nx * ny);
    for iy in 0..ny {
        for ix in 0..nx {
            let pos = Point3::new(
                area.x_min + (ix as f64 + 0.5) * sx,
                area.y_min + (iy as f64 + 0.5) * sy,
                altitude,
            );
            let s = sinr_at(pos, sites, map, p)?;
            let ground = map.height_at(pos.x, pos.y).unwrap_or(0.0);
            cells.push(SurfaceCell {
                x: pos.x,
                y: pos.y,
                z: altitude,
                sinr_db: s.sinr_db,
                serving_id: s.serving_id,
                in_obstacle: altitude <= ground,
            });
        }
    }
    Ok(SinrSurface { nx, ny, cells })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::worldmodel::{rasterize, Building, GridSpec};

    fn flat(n: usize, cs: f64) -> WorldMap {
        rasterize(
            &[],
            GridSpec {
                nx: n,
                ny: n,
                cell_size: cs,
                origin: [0.0, 0.0],
            },
        )
    }

    fn site(id: u32, x: f64, y: f64) -> RadioSite {
        RadioSite {
            id,
            position: Point3::new(x, y, 25.0),
            tx_power_dbm: 30.0,
            antenna_gain_db: 10.0,
        }
    }

    #[test]
    fn los_on_empty_map() {
        let m = flat(50, 5.0);
        let a = Point3::new(10.0, 10.0, 60.0);
        let b = Point3::new(200.0, 170.0, 60.0);
        assert!(line_of_sight(&m, a, b).unwrap());
    }

    #[test]
    fn los_blocked_by_tall_cell() {
        let mut m = flat(50, 5.0);
        m.height[5 * 50 + 10] = 30.0; // cell (10, 5) spans x 50..55, y 25..30
        let a = Point3::new(2.0, 27.0, 20.0);
        let b = Point3::new(200.0, 27.0, 20.0);
        assert!(!line_of_sight(&m, a, b).unwrap());
        assert!(!line_of_sight(&m, b, a).unwrap());
        let high = Point3::new(200.0, 27.0, 31.0);
        assert!(line_of_sight(&m, Point3::new(2.0, 27.0, 31.0), high).unwrap());
    }

    #[test]
    fn los_ignores_endpoint_cells() {
        let mut m = flat(10, 5.0);
        m.height[0] = 100.0;
        assert!(line_of_sight(&m, Point3::new(1.0, 1.0, 1.0), Point3::new(40.0, 1.0, 1.0)).unwrap());
    }

    #[test]
    fn los_rejects_out_of_extent() {
        let m = flat(10, 5.0);
        let err = line_of_sight(&m, Point3::new(-1.0, 1.0, 1.0), Point3::new(4.0, 1.0, 1.0));
        assert!(matches!(err, Err(RadioError::OutOfExtent { .. })));
    }

    #[test]
    fn path_loss_worked_values() {
        let p = RadioParams {
            pl0_db: 30.0,
            d0_m: 1.0,
            n_los: 2.0,
            n_nlos: 3.5,
            nlos_extra_db: 20.0,
            ..RadioParams::default()
        };
        assert_eq!(path_loss_db(1.0, true, &p), 30.0);
        assert!((path_loss_db(100.0, true, &p) - 70.0).abs() < 1e-12);
        assert!((path_loss_db(100.0, false, &p) - 120.0).abs() < 1e-12);
        // Below the reference distance the loss is pinned at pl0.
        assert_eq!(path_loss_db(0.0, true, &p), 30.0);
    }

    #[test]
    fn shadow_zero_sigma_and_determinism() {
        let p = RadioParams::default().without_fading();
        let pos = Point3::new(123.4, 567.8, 60.0);
        assert_eq!(shadow_db(pos, &p, 1, true), 0.0);
        let q = RadioParams::default();
        assert_eq!(shadow_db(pos, &q, 1, true), shadow_db(pos, &q, 1, true));
        assert_ne!(shadow_db(pos, &q, 1, true), shadow_db(pos, &q, 2, true));
    }

    #[test]
    fn shadow_lattice_standard_deviation() {
        let p = RadioParams {
            shadow_sigma_los_db: 4.0,
            ..RadioParams::default()
        };
        let l = p.shadow_corr_len_m;
        let vals: Vec<f64> = (0..100)
            .flat_map(|i| (0..100).map(move |j| (i, j)))
            .map(|(i, j)| shadow_db(Point3::new(i as f64 * l, j as f64 * l, 50.0), &p, 3, true))
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (vals.len() - 1) as f64;
        let sd = var.sqrt();
        assert!((sd - 4.0).abs() < 0.4, "sd = {sd}");
    }

    #[test]
    fn single_site_sinr_is_snr() {
        let m = flat(40, 5.0);
        let p = RadioParams::default().without_fading();
        let s = site(1, 100.0, 100.0);
        let pos = Point3::new(150.0, 20.0, 60.0);
        let out = sinr_at(pos, &[s], &m, &p).unwrap();
        let d = s.position.distance(pos);
        let rx = 40.0 - path_loss_db(d, true, &p);
        assert!((out.sinr_db - (rx - p.noise_power_dbm)).abs() < 1e-9);
        assert_eq!(out.serving_id, 1);
    }

    #[test]
    fn equidistant_twins_pick_lower_id_and_negative_sinr() {
        let m = flat(40, 5.0);
        let p = RadioParams::default().without_fading();
        let sites = [site(7, 50.0, 100.0), site(3, 150.0, 100.0)];
        let out = sinr_at(Point3::new(100.0, 100.0, 60.0), &sites, &m, &p).unwrap();
        assert_eq!(out.serving_id, 3);
        assert!(out.sinr_db < 0.0);
        let s = dbm_to_mw(out.rx_powers_dbm[0]);
        let n = dbm_to_mw(p.noise_power_dbm);
        assert!((out.sinr_db - 10.0 * (s / (s + n)).log10()).abs() < 1e-9);
    }

    #[test]
    fn sinr_requires_sites() {
        let m = flat(4, 5.0);
        assert_eq!(
            sinr_at(Point3::new(1.0, 1.0, 1.0), &[], &m, &RadioParams::default()),
            Err(RadioError::NoSites)
        );
    }

    #[test]
    fn surface_matches_point_queries() {
        let mut m = flat(40, 5.0);
        m = rasterize(
            &[Building {
                x_min: 60.0,
                y_min: 60.0,
                x_max: 90.0,
                y_max: 90.0,
                height: 80.0,
            }],
            m.grid(),
        );
        let p = RadioParams::default();
        let sites = [site(1, 20.0, 20.0), site(2, 180.0, 150.0)];
        let area = Rect {
            x_min: 0.0,
            y_min: 0.0,
            x_max: 200.0,
            y_max: 200.0,
        };
        let surf = export_sinr_surface(60.0, 100.0, area, (30.0, 120.0), &sites, &m, &p).unwrap();
        assert_eq!((surf.nx, surf.ny), (2, 2));
        for c in &surf.cells {
            let q = sinr_at(Point3::new(c.x, c.y, c.z), &sites, &m, &p).unwrap();
            assert_eq!(q.sinr_db, c.sinr_db);
            assert_eq!(q.serving_id, c.serving_id);
        }
        let one = export_sinr_surface(60.0, 1000.0, area, (30.0, 120.0), &sites, &m, &p).unwrap();
        assert_eq!(one.cells.len(), 1);
        let inside = export_sinr_surface(60.0, 10.0, area, (30.0, 120.0), &sites, &m, &p).unwrap();
        assert!(inside.cells.iter().any(|c| c.in_obstacle));
        assert_eq!(
            export_sinr_surface(10.0, 10.0, area, (30.0, 120.0), &sites, &m, &p),
            Err(RadioError::AltitudeOutOfBounds(10.0))
        );
    }

    #[test]
    fn surface_csv_layout() {
        let surf = SinrSurface {
            nx: 1,
            ny: 1,
            cells: vec![SurfaceCell {
                x: 2.5,
                y: 2.5,
                z: 60.0,
                sinr_db: 3.25,
                serving_id: 1,
                in_obstacle: false,
            }],
        };
        assert_eq!(
            surf.to_csv(""),
            "x,y,z,sinr_db,serving_id,in_obstacle\n2.5,2.5,60,3.25,1,0\n"
        );
    }
}

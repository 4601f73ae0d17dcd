use std::sync::OnceLock;

use laesim::agentenv::{
    apply_action, build_observation, reward, Action, ActionBounds, AgentState, ObservationMode,
    RewardWeights, StepFlags,
};
use laesim::geom::Point3;
use laesim::maddpg::{ReplayBuffer, Transition};
use laesim::ricbus::{
    deserialize_e2, publish_a1, serialize_e2, E2ControlMessage, E2KpmReport, E2Message,
    MissionContext,
};
use laesim::semantics::A1Message;
use laesim::worldmodel::{rasterize, reference_scenario, Building, GridSpec};
use proptest::prelude::*;

fn reference() -> &'static (MissionContext, A1Message) {
    static CTX: OnceLock<(MissionContext, A1Message)> = OnceLock::new();
    CTX.get_or_init(|| {
        let ctx = MissionContext::from_scenario(&reference_scenario());
        let a1 = publish_a1(&ctx, ObservationMode::FULL, 5, 0).unwrap();
        (ctx, a1)
    })
}

fn point(range: std::ops::Range<f64>, z: std::ops::Range<f64>) -> impl Strategy<Value = Point3> {
    (range.clone(), range, z).prop_map(|(x, y, z)| Point3::new(x, y, z))
}

fn flags() -> impl Strategy<Value = StepFlags> {
    any::<[bool; 6]>().prop_map(|f| StepFlags {
        obstacle: f[0],
        collision: f[1],
        out_of_area: f[2],
        first_reach: f[3],
        unreached_at_truncation: f[4],
        clamped: f[5],
    })
}

fn action() -> impl Strategy<Value = Action> {
    (-2.0..2.0f64, -10.0..10.0f64, -5.0..40.0f64).prop_map(|(d_heading, d_alt, dist)| Action {
        d_heading,
        d_alt,
        dist,
    })
}

fn brute_raster(buildings: &[Building], grid: GridSpec) -> Vec<f64> {
    let mut out = Vec::with_capacity(grid.nx * grid.ny);
    for iy in 0..grid.ny {
        for ix in 0..grid.nx {
            let cx = grid.origin[0] + (ix as f64 + 0.5) * grid.cell_size;
            let cy = grid.origin[1] + (iy as f64 + 0.5) * grid.cell_size;
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

proptest! {
    #[test]
    fn reward_total_is_component_sum(
        prev in point(0.0..800.0, 0.0..150.0),
        next in point(0.0..800.0, 0.0..150.0),
        target in point(0.0..800.0, 0.0..150.0),
        a in action(),
        sinr in -60.0..80.0f64,
        f in flags(),
    ) {
        let r = reward(prev, next, target, &a, sinr, &f, &RewardWeights::default());
        prop_assert_eq!(r.total.to_bits(), r.component_sum().to_bits());
        prop_assert!(r.sinr.abs() <= 0.5);
    }

    #[test]
    fn observation_is_bounded(
        positions in prop::collection::vec(point(-100.0..900.0, 0.0..200.0), 4),
        headings in prop::collection::vec(-3.2..3.2f64, 4),
        alive in any::<[bool; 4]>(),
        i in 0usize..4,
        sinr in -80.0..90.0f64,
        semantics in any::<bool>(),
        sinr_on in any::<bool>(),
    ) {
        let (ctx, a1) = reference();
        let states: Vec<AgentState> = positions
            .iter()
            .zip(&headings)
            .zip(alive)
            .map(|((&position, &heading), alive)| AgentState { position, heading, reached: false, alive })
            .collect();
        let mode = ObservationMode { semantics, sinr: sinr_on };
        let obs = build_observation(&ctx.world, Some(a1), &states, i, sinr, mode);
        prop_assert_eq!(obs.len(), ctx.world.params.obs_dim());
        prop_assert!(obs.iter().all(|v| v.is_finite() && (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn rasterize_matches_brute_force(
        raw in prop::collection::vec((0.0..100.0f64, 0.0..100.0f64, 0.1..40.0f64, 0.1..40.0f64, 1.0..90.0f64), 0..8),
        nx in 1usize..30,
        ny in 1usize..30,
        cell in 1.0..8.0f64,
        ox in -20.0..20.0f64,
        oy in -20.0..20.0f64,
    ) {
        let buildings: Vec<Building> = raw
            .iter()
            .map(|&(x, y, w, d, height)| Building { x_min: x, y_min: y, x_max: x + w, y_max: y + d, height })
            .collect();
        let grid = GridSpec { nx, ny, cell_size: cell, origin: [ox, oy] };
        prop_assert_eq!(rasterize(&buildings, grid).height, brute_raster(&buildings, grid));
    }

    #[test]
    fn apply_action_respects_band(
        p in point(0.0..800.0, 30.0..120.0),
        heading in -3.1..3.1f64,
        a in action(),
    ) {
        let b = ActionBounds::default();
        let (a, _) = a.clamped(&b);
        let s = AgentState { position: p, heading, reached: false, alive: true };
        let (q, h, _) = apply_action(&s, &a, 30.0, 120.0);
        prop_assert!((30.0..=120.0).contains(&q.z));
        prop_assert!(h > -std::f64::consts::PI - 1e-12 && h <= std::f64::consts::PI + 1e-12);
        let horiz = ((q.x - p.x).powi(2) + (q.y - p.y).powi(2)).sqrt();
        prop_assert!((horiz - a.dist).abs() < 1e-9);
    }

    #[test]
    fn clamped_action_is_within(a in action()) {
        let b = ActionBounds::default();
        let (c, changed) = a.clamped(&b);
        prop_assert!(c.within(&b));
        prop_assert_eq!(changed, !a.within(&b));
    }

    #[test]
    fn unit_round_trip(u in prop::array::uniform3(-1.0..=1.0f64)) {
        let b = ActionBounds::default();
        let a = Action::from_unit(u, &b);
        prop_assert!(a.within(&b));
        let back = a.to_unit(&b);
        for k in 0..3 {
            prop_assert!((back[k] - u[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn replay_never_exceeds_capacity(cap in 1usize..50, pushes in 0usize..200) {
        let mut buf = ReplayBuffer::new(cap);
        for k in 0..pushes {
            buf.push(Transition {
                obs: vec![vec![k as f64]],
                actions: vec![[0.0; 3]],
                rewards: vec![k as f64],
                next_obs: vec![vec![0.0]],
                dones: vec![false],
                active: vec![true],
            });
            prop_assert!(buf.len() <= cap);
        }
        prop_assert_eq!(buf.len(), pushes.min(cap));
        let newest = buf.iter().last().map(|t| t.rewards[0]);
        prop_assert_eq!(newest, pushes.checked_sub(1).map(|k| k as f64));
    }

    #[test]
    fn e2_round_trip(
        agent in 0usize..16,
        t in any::<u32>(),
        p in point(-1e3..1e3, 0.0..200.0),
        serving in any::<u32>(),
        sinr in -100.0..100.0f64,
        a in action(),
        kpm in any::<bool>(),
    ) {
        let msg = if kpm {
            E2Message::Kpm(E2KpmReport { agent, timestamp_ms: t as u64, position: p, serving_id: serving, sinr_db: sinr })
        } else {
            E2Message::Control(E2ControlMessage { agent, action: a, kpm_timestamp_ms: t as u64, issue_timestamp_ms: t as u64 + 7 })
        };
        let bytes = serialize_e2(&msg);
        prop_assert_eq!(deserialize_e2(&bytes).unwrap(), msg);
    }
}

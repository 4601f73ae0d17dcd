//! Regenerates `scenarios/reference.json` from `reference_scenario()`.

use laesim::worldmodel::{reference_scenario, save_scenario};

fn main() {
    let path = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "scenarios/reference.json".into());
    let sc = reference_scenario();
    sc.validate().expect("reference scenario is valid");
    save_scenario(&sc, &path).expect("write scenario");
    println!("wrote {path}");
}

//! Fixed datasets shared by the benchmarks.

use votetrans::simulation::{generate_dataset, Confounding, ScenarioConfig};
use votetrans::{ModelSpec, StationRecord};

pub fn two_party(stations: usize) -> (Vec<StationRecord>, ModelSpec) {
    let mut cfg = ScenarioConfig::two_party(Confounding::Discordant, [600, 800], 17);
    cfg.stations = stations;
    let data = generate_dataset(&cfg).expect("valid preset");
    (data.records, cfg.model_spec().expect("valid preset"))
}

pub fn milan_like() -> (Vec<StationRecord>, ModelSpec) {
    let cfg = ScenarioConfig::milan_like(17);
    let data = generate_dataset(&cfg).expect("valid preset");
    (data.records, cfg.model_spec().expect("valid preset"))
}

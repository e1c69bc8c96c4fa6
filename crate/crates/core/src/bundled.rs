//! The IEEE 37-bus feeder and closed-loop scenario shipped with the crate.

use crate::error::Result;
use crate::network::Feeder;
use crate::scenario::{Scenario, ScenarioConfig};

pub const IEEE37_FEEDER_JSON: &str = include_str!("../../../data/ieee37.json");
pub const IEEE37_SCENARIO_JSON: &str = include_str!("../../../data/ieee37_scenario.json");

pub fn ieee37_feeder() -> Feeder {
    Feeder::from_json(IEEE37_FEEDER_JSON).expect("bundled feeder is valid")
}

/// Scenario config with the feeder path pointing at the bundled data file.
pub fn ieee37_config() -> ScenarioConfig {
    let mut cfg = ScenarioConfig::from_json(IEEE37_SCENARIO_JSON).expect("bundled scenario is valid");
    cfg.feeder = concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/ieee37.json").into();
    cfg
}

/// Builds a scenario on the embedded feeder; no file access.
pub fn ieee37_scenario(cfg: ScenarioConfig) -> Result<Scenario> {
    Scenario::new(cfg, ieee37_feeder())
}

//! Shared fixtures for the integration tests.
#![allow(dead_code)]

use std::sync::OnceLock;

use routeprint::harness::{build_victim, ScenarioConfig, Workbench};

/// Default config at the default seed.
pub fn default_config() -> ScenarioConfig {
    ScenarioConfig::default()
}

/// Default victim, built once per test binary.
pub fn workbench() -> &'static Workbench {
    static WB: OnceLock<Workbench> = OnceLock::new();
    WB.get_or_init(|| build_victim(&default_config()).expect("default victim builds"))
}

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

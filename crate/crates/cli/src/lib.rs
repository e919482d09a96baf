//! Orchestration behind the `atms` binary.

pub mod bench;

use std::path::Path;

use anyhow::Context;
use atms_core::sim::Scenario;

pub fn load_scenario(path: &Path) -> anyhow::Result<Scenario> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Scenario::from_json(&text).with_context(|| format!("parsing {}", path.display()))
}

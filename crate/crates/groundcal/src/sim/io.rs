//! Scenario file round-tripping.
//!
//! Scenarios serialize to versioned JSON. Numeric fields use Rust's
//! shortest-roundtrip float formatting, so `import(export(s)) == s` holds
//! bit-for-bit; timestamps travel as decimal strings.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Scenario, SimError};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ScenarioFile {
    schema_version: u32,
    #[serde(flatten)]
    scenario: Scenario,
}

/// Serializes a scenario to its JSON document.
pub fn to_json(scenario: &Scenario) -> String {
    serde_json::to_string_pretty(&ScenarioFile {
        schema_version: SCHEMA_VERSION,
        scenario: scenario.clone(),
    })
    .expect("scenario serialization cannot fail")
}

/// Parses a scenario from its JSON document.
pub fn from_json(text: &str) -> Result<Scenario, SimError> {
    // Check the version first so a mismatch is not reported as a field error.
    #[derive(Deserialize)]
    struct VersionProbe {
        schema_version: Option<u32>,
    }
    let probe: VersionProbe = serde_json::from_str(text).map_err(map_json_err)?;
    match probe.schema_version {
        Some(SCHEMA_VERSION) => {}
        Some(other) => return Err(SimError::SchemaVersionMismatch(other)),
        None => {
            return Err(SimError::MalformedField {
                line: 1,
                column: 1,
                message: "missing schema_version".to_string(),
            })
        }
    }
    let file: ScenarioFile = serde_json::from_str(text).map_err(map_json_err)?;
    Ok(file.scenario)
}

fn map_json_err(e: serde_json::Error) -> SimError {
    SimError::MalformedField {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    }
}

/// Writes a scenario file.
pub fn export_scenario(scenario: &Scenario, path: &Path) -> Result<(), SimError> {
    fs::write(path, to_json(scenario))?;
    Ok(())
}

/// Reads a scenario file.
pub fn import_scenario(path: &Path) -> Result<Scenario, SimError> {
    let text = fs::read_to_string(path)?;
    from_json(&text)
}

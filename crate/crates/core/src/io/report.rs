use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::Result;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// JSON document every CLI subcommand emits. Keys are ordered, so two runs
/// with the same inputs serialize identically apart from `timing_ms`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDoc {
    pub schema_version: u32,
    pub command: String,
    pub metadata: BTreeMap<String, Value>,
    pub payload: Value,
    pub timing_ms: Option<f64>,
}

impl ReportDoc {
    pub fn new(command: impl Into<String>) -> Self {
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            command: command.into(),
            metadata: BTreeMap::new(),
            payload: Value::Null,
            timing_ms: None,
        }
    }

    pub fn meta(mut self, key: &str, value: impl Serialize) -> Result<Self> {
        self.metadata.insert(key.to_string(), serde_json::to_value(value)?);
        Ok(self)
    }

    pub fn with_payload(mut self, payload: impl Serialize) -> Result<Self> {
        self.payload = serde_json::to_value(payload)?;
        Ok(self)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

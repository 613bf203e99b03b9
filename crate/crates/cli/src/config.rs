//! Flag and config-file merging. A config file is TOML with one table per
//! subcommand (`[fit]`, `[tune]`, ...) whose keys are the long flag names with
//! `-` replaced by `_`. Flags win over the file.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::CliError;

fn to_object<T: Serialize>(v: &T) -> Map<String, Value> {
    match serde_json::to_value(v) {
        Ok(Value::Object(m)) => m,
        _ => Map::new(),
    }
}

/// Overlays the non-empty fields of `flags` on the `[section]` table of the
/// config file.
pub fn resolve<T>(flags: &T, config: Option<&Path>, section: &str) -> Result<T, CliError>
where
    T: Serialize + DeserializeOwned + Default,
{
    let Some(path) = config else {
        return serde_json::from_value(Value::Object(to_object(flags)))
            .map_err(|e| CliError::Usage(format!("bad arguments: {e}")));
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let doc: toml::Table =
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
    let mut merged = match doc.get(section) {
        Some(v) => match serde_json::to_value(v) {
            Ok(Value::Object(m)) => m,
            _ => return Err(CliError::Usage(format!("config section [{section}] must be a table"))),
        },
        None => Map::new(),
    };
    let known = to_object(&T::default());
    if let Some(bad) = merged.keys().find(|k| !known.contains_key(*k)) {
        return Err(CliError::Usage(format!("config section [{section}] has unknown key `{bad}`")));
    }
    for (k, v) in to_object(flags) {
        if !v.is_null() {
            merged.insert(k, v);
        }
    }
    serde_json::from_value(Value::Object(merged))
        .map_err(|e| CliError::Usage(format!("config section [{section}]: {e}")))
}

/// The resolved arguments as a config file section, for the log and for
/// rerunning the command with `--config`.
pub fn echo<T: Serialize>(section: &str, args: &T) -> String {
    let mut table = toml::Table::new();
    let fields: Map<String, Value> = to_object(args).into_iter().filter(|(_, v)| !v.is_null()).collect();
    if let Ok(t) = serde_json::from_value::<toml::Table>(Value::Object(fields)) {
        table.insert(section.to_string(), toml::Value::Table(t));
    }
    toml::to_string(&table).unwrap_or_default()
}

pub fn required<T: Clone>(v: &Option<T>, flag: &str) -> Result<T, CliError> {
    v.clone().ok_or_else(|| CliError::Usage(format!("missing required option --{flag}")))
}

//! Config files and `--override` handling.
//!
//! A config is a TOML document whose tables mirror `RunConfig`. JSON is
//! accepted too so that `config_resolved.json` can be fed straight back in.
//! Overrides are `dotted.path=value` pairs where the value is a TOML literal;
//! anything that does not parse as one is taken as a bare string, so
//! `comms.bits=unquantized` works without quoting.

use std::path::Path;

use gossip_sinkhorn::config::{ConfigError, RunConfig};
use toml::{Table, Value};

pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, ConfigError> {
    let mut table = match path {
        Some(p) => read_table(p)?,
        None => Table::new(),
    };
    for raw in overrides {
        apply_override(&mut table, raw)?;
    }
    let config: RunConfig = serde_path_to_error::deserialize(Value::Table(table)).map_err(|e| {
        let path = e.path().to_string();
        let path = if path == "." { "config".to_string() } else { path };
        // the toml error repeats the location on later lines
        let reason = e.inner().to_string();
        ConfigError::new(path, reason.lines().next().unwrap_or_default().trim())
    })?;
    config.validate()?;
    Ok(config)
}

fn read_table(path: &Path) -> Result<Table, ConfigError> {
    let file = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::new(&file, e.to_string()))?;
    if path.extension().is_some_and(|e| e == "json") {
        let json: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| ConfigError::new(&file, e.to_string()))?;
        match json_to_toml(json) {
            Some(Value::Table(t)) => Ok(t),
            _ => Err(ConfigError::new(file, "top level must be an object")),
        }
    } else {
        text.parse::<Table>().map_err(|e| ConfigError::new(file, e.message().to_string()))
    }
}

/// TOML has no null; null entries are dropped so the field takes its default.
fn json_to_toml(v: serde_json::Value) -> Option<Value> {
    use serde_json::Value as J;
    Some(match v {
        J::Null => return None,
        J::Bool(b) => Value::Boolean(b),
        J::Number(n) => match n.as_i64() {
            Some(i) => Value::Integer(i),
            None => Value::Float(n.as_f64()?),
        },
        J::String(s) => Value::String(s),
        J::Array(a) => Value::Array(a.into_iter().filter_map(json_to_toml).collect()),
        J::Object(o) => Value::Table(
            o.into_iter()
                .filter_map(|(k, v)| Some((k, json_to_toml(v)?)))
                .collect(),
        ),
    })
}

fn parse_literal(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

pub fn apply_override(table: &mut Table, raw: &str) -> Result<(), ConfigError> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| ConfigError::new(raw, "override must look like dotted.path=value"))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(ConfigError::new(key, "empty path segment"));
    }
    let (last, parents) = parts.split_last().expect("split yields at least one part");
    let mut cursor = table;
    for (depth, part) in parents.iter().enumerate() {
        let entry = cursor
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        cursor = match entry {
            Value::Table(t) => t,
            _ => {
                return Err(ConfigError::new(
                    parts[..=depth].join("."),
                    "is not a section, cannot set a field inside it",
                ))
            }
        };
    }
    cursor.insert(last.to_string(), parse_literal(value.trim()));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use gossip_sinkhorn::protocol::Bits;

    #[test]
    fn literals_and_bare_strings() {
        assert_eq!(parse_literal("0"), Value::Integer(0));
        assert_eq!(parse_literal("1e-3"), Value::Float(1e-3));
        assert_eq!(parse_literal("unquantized"), Value::String("unquantized".into()));
        assert_eq!(parse_literal("[1, 2]"), Value::Array(vec![Value::Integer(1), Value::Integer(2)]));
    }

    #[test]
    fn overrides_build_nested_tables() {
        let cfg = load(None, &["comms.delta=0".into(), "comms.bits=unquantized".into(), "problem.d=8".into()]).unwrap();
        assert_eq!(cfg.comms.delta, 0.0);
        assert_eq!(cfg.comms.bits, Bits::Unquantized);
        assert_eq!(cfg.problem.d, 8);
    }

    #[test]
    fn errors_carry_field_paths() {
        let e = load(None, &["problem.epsilon=-1".into()]).unwrap_err();
        assert_eq!(e.path, "problem.epsilon");
        let e = load(None, &["comms.delta=\"big\"".into()]).unwrap_err();
        assert_eq!(e.path, "comms.delta");
        let e = load(None, &["comms.delta".into()]).unwrap_err();
        assert!(e.reason.contains("dotted.path=value"));
        let e = load(None, &["seeds=[]".into()]).unwrap_err();
        assert_eq!(e.path, "seeds");
        let e = load(None, &["problem.d=4".into(), "problem.d.x=1".into()]).unwrap_err();
        assert_eq!(e.path, "problem.d");
    }

    #[test]
    fn json_nulls_fall_back_to_defaults() {
        let v = json_to_toml(serde_json::json!({"sweep": null, "seeds": [1, 2]})).unwrap();
        let cfg: RunConfig = v.try_into().unwrap();
        assert_eq!(cfg.sweep, None);
        assert_eq!(cfg.seeds, vec![1, 2]);
    }
}

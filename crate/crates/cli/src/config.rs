//! Layered configuration: defaults, then profile, then file, then `--set`.

use std::fmt;
use std::path::Path;

use remem::config::{Config, PROFILES};
use toml::{Table, Value};

/// Bad config input that never reached the library (parse errors, unknown
/// keys, malformed overrides).
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

fn err(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

pub fn resolve(profile: Option<&str>, file: Option<&Path>, sets: &[String]) -> anyhow::Result<Config> {
    let file_table = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| err(format!("{}: {e}", path.display())))?;
            text.parse::<Table>().map_err(|e| err(format!("{}: {e}", path.display())))?
        }
        None => Table::new(),
    };
    let name = match (profile, file_table.get("profile")) {
        (Some(p), _) => p.to_string(),
        (None, Some(Value::String(p))) => p.clone(),
        (None, Some(other)) => return Err(err(format!("profile must be a string, got {other}"))),
        (None, None) => "desk".to_string(),
    };
    if !PROFILES.contains(&name.as_str()) {
        return Err(err(format!("unknown profile `{name}` (expected one of {PROFILES:?})")));
    }
    let base = Config::profile(&name)?;
    let mut tree = Value::try_from(&base).map_err(|e| err(e.to_string()))?;
    merge(&mut tree, Value::Table(file_table), "")?;
    for s in sets {
        let (key, raw) = s.split_once('=').ok_or_else(|| err(format!("override `{s}` is not KEY=VALUE")))?;
        set(&mut tree, key.trim(), parse_value(raw.trim()))?;
    }
    if let Value::Table(t) = &mut tree {
        t.insert("profile".into(), Value::String(name));
    }
    let cfg: Config = tree.try_into().map_err(|e: toml::de::Error| err(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn render(cfg: &Config) -> anyhow::Result<String> {
    toml::to_string_pretty(cfg).map_err(|e| err(e.to_string()))
}

/// TOML literal if it parses as one, otherwise a bare string.
fn parse_value(raw: &str) -> Value {
    format!("v = {raw}").parse::<Table>().ok().and_then(|mut t| t.remove("v")).unwrap_or_else(|| Value::String(raw.to_string()))
}

fn merge(into: &mut Value, from: Value, path: &str) -> anyhow::Result<()> {
    match (into, from) {
        (Value::Table(dst), Value::Table(src)) => {
            for (k, v) in src {
                let sub = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match dst.get_mut(&k) {
                    Some(slot) => merge(slot, v, &sub)?,
                    None => return Err(err(format!("unknown key `{sub}`"))),
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}

fn set(tree: &mut Value, key: &str, value: Value) -> anyhow::Result<()> {
    let mut node = tree;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = node.as_table_mut().ok_or_else(|| err(format!("`{}` is not a table", parts[..i].join("."))))?;
        node = table.get_mut(*part).ok_or_else(|| err(format!("unknown key `{key}`")))?;
    }
    *node = value;
    Ok(())
}

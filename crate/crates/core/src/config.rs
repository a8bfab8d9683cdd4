//! JSON configs with dotted-key overrides.
//!
//! Every command line config starts as a JSON value (a file or a built-in
//! default), receives flag overrides by key path, and is then deserialized.
//! Deserialization errors name the offending key.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::error::{Error, Result};

pub fn read_value(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::config(path.display().to_string(), e.to_string()))
}

pub fn to_value<T: Serialize>(v: &T) -> Result<Value> {
    Ok(serde_json::to_value(v)?)
}

/// Sets `key` (dot separated, e.g. `generator.channel_max`) in `root`,
/// creating intermediate objects.
pub fn set_key(root: &mut Value, key: &str, v: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, p) in parts.iter().enumerate() {
        if p.is_empty() {
            return Err(Error::config(key, "empty key segment"));
        }
        let obj = match cur {
            Value::Object(m) => m,
            Value::Null => {
                *cur = Value::Object(Default::default());
                cur.as_object_mut().expect("just set")
            }
            _ => return Err(Error::config(parts[..i].join("."), "not an object")),
        };
        if i + 1 == parts.len() {
            obj.insert((*p).to_string(), v);
            return Ok(());
        }
        cur = obj.entry((*p).to_string()).or_insert(Value::Null);
    }
    Ok(())
}

/// Recursively overlays `top` onto `base`; objects merge key by key, every
/// other value replaces.
pub fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, t) => *b = t,
    }
}

/// Parses a `key=value` override; the value is JSON when it parses as JSON
/// and a plain string otherwise.
pub fn parse_assignment(s: &str) -> Result<(String, Value)> {
    let (k, v) = s.split_once('=').ok_or_else(|| Error::config(s, "expected key=value"))?;
    let v = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), v))
}

/// Deserializes, reporting the key path of the first offending field.
pub fn from_value<T: DeserializeOwned>(v: Value) -> Result<T> {
    serde_path_to_error::deserialize(v).map_err(|e| {
        let path = e.path().to_string();
        let path = if path == "." { "<root>".to_string() } else { path };
        Error::config(path, e.into_inner().to_string())
    })
}

pub fn load<T: DeserializeOwned>(path: &Path) -> Result<T> {
    from_value(read_value(path)?)
}

pub fn write<T: Serialize>(v: &T, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(v)? + "\n")?;
    Ok(())
}

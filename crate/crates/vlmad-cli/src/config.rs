//! Flat dotted-key run configuration with CLI overrides.

use serde_json::Value;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use vlmad_core::{Error, Result};

#[derive(Debug, Clone, Default)]
pub struct RunConfig {
    map: BTreeMap<String, Value>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut map = BTreeMap::new();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)?;
            let parsed: BTreeMap<String, Value> = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            for (k, v) in parsed {
                if v.is_object() || v.is_array() {
                    return Err(Error::Config(format!(
                        "config key {k}: nested values not allowed, use flat dotted keys"
                    )));
                }
                map.insert(k, v);
            }
        }
        Ok(Self { map })
    }

    /// Apply a `key=value` override; the value parses as JSON when it can,
    /// otherwise it is taken as a string.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {pair:?} is not key=value")))?;
        let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
        self.map.insert(k.to_string(), value);
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: Value) {
        self.map.insert(key.to_string(), value);
    }

    pub fn contains(&self, key: &str) -> bool {
        self.map.contains_key(key)
    }

    pub fn get_str(&self, key: &str) -> Result<Option<String>> {
        match self.map.get(key) {
            None => Ok(None),
            Some(Value::String(s)) => Ok(Some(s.clone())),
            Some(other) => Err(Error::Config(format!("key {key}: expected string, got {other}"))),
        }
    }

    pub fn require_str(&self, key: &str) -> Result<String> {
        self.get_str(key)?
            .ok_or_else(|| Error::Config(format!("missing required config key: {key}")))
    }

    pub fn require_path(&self, key: &str) -> Result<PathBuf> {
        Ok(PathBuf::from(self.require_str(key)?))
    }

    pub fn get_path(&self, key: &str) -> Result<Option<PathBuf>> {
        Ok(self.get_str(key)?.map(PathBuf::from))
    }

    pub fn get_u64(&self, key: &str, default: u64) -> Result<u64> {
        match self.map.get(key) {
            None => Ok(default),
            Some(v) => v
                .as_u64()
                .ok_or_else(|| Error::Config(format!("key {key}: expected unsigned integer, got {v}"))),
        }
    }

    pub fn require_u64(&self, key: &str) -> Result<u64> {
        self.map
            .get(key)
            .ok_or_else(|| Error::Config(format!("missing required config key: {key}")))?
            .as_u64()
            .ok_or_else(|| Error::Config(format!("key {key}: expected unsigned integer")))
    }

    pub fn get_f64(&self, key: &str, default: f64) -> Result<f64> {
        match self.map.get(key) {
            None => Ok(default),
            Some(v) => v
                .as_f64()
                .ok_or_else(|| Error::Config(format!("key {key}: expected number, got {v}"))),
        }
    }

    pub fn get_bool(&self, key: &str, default: bool) -> Result<bool> {
        match self.map.get(key) {
            None => Ok(default),
            Some(Value::Bool(b)) => Ok(*b),
            Some(v) => Err(Error::Config(format!("key {key}: expected boolean, got {v}"))),
        }
    }

    /// The fully resolved configuration as one JSON object line.
    pub fn resolved(&self) -> String {
        serde_json::to_string(&self.map).unwrap_or_else(|_| "{}".into())
    }
}

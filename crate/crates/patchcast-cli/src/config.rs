//! Plain key=value run configuration with override tracking.
//!
//! Configs come from an optional file plus repeated `--set key=value`
//! flags. Every key a command reads is marked as known; leftover keys are
//! rejected so typos fail loudly. A content hash of the resolved map is
//! stamped into every output artifact.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};

#[derive(Debug, Default)]
pub struct ConfigMap {
    values: BTreeMap<String, String>,
    known: RefCell<BTreeSet<String>>,
}

impl ConfigMap {
    pub fn load(file: Option<&Path>, sets: &[String]) -> Result<Self> {
        let mut values = BTreeMap::new();
        if let Some(path) = file {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config file {}", path.display()))?;
            for (lineno, raw) in text.lines().enumerate() {
                let line = raw.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line.split_once('=').ok_or_else(|| {
                    anyhow!("{}:{}: expected key=value, got {raw:?}", path.display(), lineno + 1)
                })?;
                values.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        for s in sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| anyhow!("--set expects key=value, got {s:?}"))?;
            values.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(ConfigMap {
            values,
            known: RefCell::new(BTreeSet::new()),
        })
    }

    fn mark(&self, key: &str) {
        self.known.borrow_mut().insert(key.to_string());
    }

    /// Raw lookup; marks the key as known.
    pub fn get(&self, key: &str) -> Option<&str> {
        self.mark(key);
        self.values.get(key).map(String::as_str)
    }

    pub fn get_str(&self, key: &str, default: &str) -> String {
        self.get(key).unwrap_or(default).to_string()
    }

    pub fn require(&self, key: &str) -> Result<String> {
        self.get(key)
            .map(str::to_string)
            .ok_or_else(|| anyhow!("missing required config key {key:?}"))
    }

    pub fn get_parse<T>(&self, key: &str, default: T) -> Result<T>
    where
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        match self.get(key) {
            Some(raw) => raw
                .parse()
                .map_err(|e| anyhow!("config key {key:?}: invalid value {raw:?} ({e})")),
            None => Ok(default),
        }
    }

    /// Optional typed value (no default).
    pub fn get_parse_opt<T>(&self, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        match self.get(key) {
            Some("") | None => Ok(None),
            Some(raw) => raw
                .parse()
                .map(Some)
                .map_err(|e| anyhow!("config key {key:?}: invalid value {raw:?} ({e})")),
        }
    }

    /// Comma-separated list.
    pub fn get_list<T>(&self, key: &str, default: &[T]) -> Result<Vec<T>>
    where
        T: FromStr + Clone,
        T::Err: std::fmt::Display,
    {
        match self.get(key) {
            None => Ok(default.to_vec()),
            Some(raw) => raw
                .split(',')
                .map(|part| {
                    part.trim()
                        .parse()
                        .map_err(|e| anyhow!("config key {key:?}: invalid item {part:?} ({e})"))
                })
                .collect(),
        }
    }

    pub fn get_bool(&self, key: &str, default: bool) -> Result<bool> {
        match self.get(key) {
            None => Ok(default),
            Some("true") | Some("1") | Some("yes") => Ok(true),
            Some("false") | Some("0") | Some("no") => Ok(false),
            Some(other) => bail!("config key {key:?}: expected a boolean, got {other:?}"),
        }
    }

    /// Reject keys no command consumed.
    pub fn finish(&self) -> Result<()> {
        let known = self.known.borrow();
        let unknown: Vec<&String> = self.values.keys().filter(|k| !known.contains(*k)).collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            bail!(
                "unknown config keys: {}",
                unknown
                    .iter()
                    .map(|s| s.as_str())
                    .collect::<Vec<_>>()
                    .join(", ")
            )
        }
    }

    /// FNV-1a over the sorted resolved key=value pairs.
    pub fn content_hash(&self) -> String {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (k, v) in &self.values {
            for b in k.bytes().chain([b'='].into_iter()).chain(v.bytes()).chain([b'\n']) {
                h ^= b as u64;
                h = h.wrapping_mul(0x1000_0000_01b3);
            }
        }
        format!("{h:016x}")
    }

    pub fn resolved(&self) -> &BTreeMap<String, String> {
        &self.values
    }
}

//! Flat `key = value` configuration files and seed derivation.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{bail, Error, Result};

/// Ordered key/value settings. Later assignments win.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KvConfig {
    values: BTreeMap<String, String>,
}

impl KvConfig {
    /// Parses `key = value` lines; `#` starts a comment, blank lines are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                bail!(Config, "line {}: expected key = value, got {raw:?}", n + 1);
            };
            let k = k.trim();
            if k.is_empty() {
                bail!(Config, "line {}: empty key", n + 1);
            }
            cfg.values.insert(k.to_string(), v.trim().to_string());
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
            _ => e.into(),
        })?;
        Self::parse(&text)
    }

    /// Applies `key=value` overrides.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let Some((k, v)) = o.split_once('=') else {
                bail!(Usage, "override {o:?} is not key=value");
            };
            self.set(k.trim(), v.trim());
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) {
        self.values.insert(key.to_string(), value.to_string());
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    /// Typed lookup; `Ok(None)` when absent.
    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("cannot parse {key} = {v:?}"))),
        }
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    /// Comma-separated list.
    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        let Some(v) = self.values.get(key) else {
            return Ok(None);
        };
        v.split(',')
            .map(|s| s.trim().parse().map_err(|_| Error::Config(format!("cannot parse {key} = {v:?}"))))
            .collect::<Result<Vec<T>>>()
            .map(Some)
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.values.keys()
    }

    /// Canonical `key = value` text, sorted by key.
    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

/// Sub-seed for a named component: first 8 bytes of SHA-256 over the seed
/// and the name.
pub fn derive_seed(seed: u64, component: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(component.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_overrides() {
        let mut c = KvConfig::parse("# header\nsteps = 10 # inline\n\nlr=0.5\nsteps = 12\n").unwrap();
        assert_eq!(c.get::<usize>("steps").unwrap(), Some(12));
        c.apply_overrides(&["lr=0.25"]).unwrap();
        assert_eq!(c.get::<f64>("lr").unwrap(), Some(0.25));
        assert_eq!(c.get::<f64>("missing").unwrap(), None);
        assert!(c.get::<usize>("lr").is_err());
        assert!(c.apply_overrides(&["novalue"]).is_err());
    }

    #[test]
    fn malformed_lines_are_config_errors() {
        assert!(matches!(KvConfig::parse("just words"), Err(Error::Config(_))));
        assert!(matches!(KvConfig::parse(" = 3"), Err(Error::Config(_))));
    }

    #[test]
    fn lists_parse() {
        let c = KvConfig::parse("channels = 64, 32,16").unwrap();
        assert_eq!(c.get_list::<usize>("channels").unwrap(), Some(vec![64, 32, 16]));
    }

    #[test]
    fn derived_seeds_are_stable_and_distinct() {
        assert_eq!(derive_seed(1, "pretrain"), derive_seed(1, "pretrain"));
        assert_ne!(derive_seed(1, "pretrain"), derive_seed(1, "encoder"));
        assert_ne!(derive_seed(1, "pretrain"), derive_seed(2, "pretrain"));
    }

    #[test]
    fn text_round_trip() {
        let c = KvConfig::parse("b = 2\na = x y\n").unwrap();
        assert_eq!(KvConfig::parse(&c.to_text()).unwrap(), c);
    }
}

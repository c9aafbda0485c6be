//! Flat `section.key = value` configuration files.
//!
//! Each command declares a schema of accepted keys with optional defaults.
//! Parsing rejects unknown keys, duplicates and a missing `run.seed` before
//! any work starts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `section.key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("line {line}: key {key:?} must have the form section.key")]
    BadKey { line: usize, key: String },
    #[error("line {line}: duplicate key {key:?}")]
    Duplicate { line: usize, key: String },
    #[error("unknown key {0:?}")]
    Unknown(String),
    #[error("missing required key run.seed")]
    MissingSeed,
    #[error("missing required key {0:?}")]
    Missing(String),
    #[error("key {key:?}: cannot parse {value:?} as {expected}")]
    Value {
        key: String,
        value: String,
        expected: &'static str,
    },
}

pub type Result<T> = std::result::Result<T, ConfigError>;

/// `(key, default)`; keys without a default are optional.
pub type Schema = &'static [(&'static str, Option<&'static str>)];

pub const SEED_KEY: &str = "run.seed";

/// Keys every command accepts.
pub const COMMON: Schema = &[(SEED_KEY, None), ("run.parallel", Some("true"))];

pub const MODEL: Schema = &[
    ("model.kind", Some("VP")),
    ("model.dim", Some("2")),
    ("model.scale", Some("1")),
    ("model.metric_log_eigs", None),
    ("model.metric_generator", None),
    ("model.trace_normalized", Some("false")),
    ("model.omega_blocks", None),
    ("model.omega_generator", None),
    ("model.r_inv", None),
    ("model.omega", None),
    ("model.damped_a", None),
    ("model.damped_b", None),
    ("model.sigma_min", Some("0.01")),
    ("model.sigma_max", Some("50")),
    ("schedule.beta_min", Some("0.1")),
    ("schedule.beta_max", Some("20")),
    ("schedule.horizon", Some("1")),
];

pub const DATA: Schema = &[
    ("data.kind", Some("gaussian")),
    ("data.mean", None),
    ("data.cov", None),
    ("data.components", Some("8")),
    ("data.radius", Some("2")),
    ("data.var", Some("0.05")),
    ("data.plane_z", Some("2")),
    ("data.std", Some("0.5")),
];

/// A parsed, schema-checked configuration with defaults filled in.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

fn split_line(line: usize, raw: &str) -> Result<Option<(String, String)>> {
    let text = raw.trim();
    if text.is_empty() || text.starts_with('#') {
        return Ok(None);
    }
    let (k, v) = text.split_once('=').ok_or_else(|| ConfigError::Syntax {
        line,
        text: text.to_string(),
    })?;
    let (k, v) = (k.trim(), v.trim());
    let valid = match k.split_once('.') {
        Some((s, rest)) => {
            !s.is_empty()
                && !rest.is_empty()
                && !rest.contains('.')
                && k.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
        }
        None => false,
    };
    if !valid {
        return Err(ConfigError::BadKey {
            line,
            key: k.to_string(),
        });
    }
    if v.is_empty() {
        return Err(ConfigError::Syntax {
            line,
            text: text.to_string(),
        });
    }
    Ok(Some((k.to_string(), v.to_string())))
}

impl Config {
    /// Parses `text` against the union of `schemas`. A `seed_override`
    /// replaces `run.seed` but does not excuse its absence from the file.
    pub fn parse(text: &str, schemas: &[Schema], seed_override: Option<u64>) -> Result<Self> {
        let mut given = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            if let Some((k, v)) = split_line(i + 1, raw)? {
                if given.contains_key(&k) {
                    return Err(ConfigError::Duplicate { line: i + 1, key: k });
                }
                given.insert(k, v);
            }
        }
        let known: BTreeMap<&str, Option<&str>> = schemas.iter().flat_map(|s| s.iter().copied()).collect();
        if let Some(k) = given.keys().find(|k| !known.contains_key(k.as_str())) {
            return Err(ConfigError::Unknown(k.clone()));
        }
        if !given.contains_key(SEED_KEY) {
            return Err(ConfigError::MissingSeed);
        }
        let mut values = given;
        for (k, d) in known {
            if let Some(d) = d {
                values.entry(k.to_string()).or_insert_with(|| d.to_string());
            }
        }
        let cfg = Self { values };
        cfg.get::<u64>(SEED_KEY)?;
        let mut cfg = cfg;
        if let Some(seed) = seed_override {
            cfg.values.insert(SEED_KEY.to_string(), seed.to_string());
        }
        Ok(cfg)
    }

    pub fn seed(&self) -> u64 {
        self.values[SEED_KEY].parse().expect("validated at parse time")
    }

    pub fn has(&self, key: &str) -> bool {
        self.values.contains_key(key)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn str(&self, key: &str) -> Result<&str> {
        self.raw(key).ok_or_else(|| ConfigError::Missing(key.to_string()))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.str(key)?;
        v.parse().map_err(|_| ConfigError::Value {
            key: key.to_string(),
            value: v.to_string(),
            expected: std::any::type_name::<T>(),
        })
    }

    pub fn opt<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        if self.has(key) {
            self.get(key).map(Some)
        } else {
            Ok(None)
        }
    }

    pub fn bool(&self, key: &str) -> Result<bool> {
        match self.str(key)? {
            "true" => Ok(true),
            "false" => Ok(false),
            other => Err(ConfigError::Value {
                key: key.to_string(),
                value: other.to_string(),
                expected: "true or false",
            }),
        }
    }

    /// Comma-separated list.
    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>> {
        let v = self.str(key)?;
        v.split(',')
            .map(|s| s.trim())
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse().map_err(|_| ConfigError::Value {
                    key: key.to_string(),
                    value: v.to_string(),
                    expected: "comma-separated list",
                })
            })
            .collect()
    }

    pub fn opt_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        if self.has(key) {
            self.list(key).map(Some)
        } else {
            Ok(None)
        }
    }

    /// The effective configuration, one sorted `key = value` line each.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            writeln!(out, "{k} = {v}").expect("writing to a String");
        }
        out
    }

    /// Hex SHA-256 of [`Config::echo`].
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.echo().as_bytes()))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const S: Schema = &[("a.x", Some("1")), ("a.y", None)];

    fn parse(text: &str) -> Result<Config> {
        Config::parse(text, &[COMMON, S], None)
    }

    #[test]
    fn defaults_fill_in_and_echo_is_sorted() {
        let c = parse("run.seed = 5\n# comment\n\na.y = 2.5\n").unwrap();
        assert_eq!(c.seed(), 5);
        assert_eq!(c.get::<f64>("a.y").unwrap(), 2.5);
        assert_eq!(c.get::<u32>("a.x").unwrap(), 1);
        assert_eq!(c.echo(), "a.x = 1\na.y = 2.5\nrun.parallel = true\nrun.seed = 5\n");
        assert_eq!(c.hash().len(), 64);
    }

    #[test]
    fn rejects_bad_input() {
        assert_eq!(parse("a.x = 1"), Err(ConfigError::MissingSeed));
        assert_eq!(parse("run.seed = 1\na.z = 1"), Err(ConfigError::Unknown("a.z".into())));
        assert!(matches!(
            parse("run.seed = 1\nrun.seed = 2"),
            Err(ConfigError::Duplicate { line: 2, .. })
        ));
        assert!(matches!(
            parse("run.seed = 1\nnonsense"),
            Err(ConfigError::Syntax { line: 2, .. })
        ));
        assert!(matches!(parse("run.seed = 1\nax = 1"), Err(ConfigError::BadKey { .. })));
        assert!(matches!(
            parse("run.seed = 1\na.b.c = 1"),
            Err(ConfigError::BadKey { .. })
        ));
        assert!(matches!(parse("run.seed = -3"), Err(ConfigError::Value { .. })));
        assert!(matches!(parse("run.seed = 1\na.y ="), Err(ConfigError::Syntax { .. })));
    }

    #[test]
    fn seed_override_replaces_value() {
        let c = Config::parse("run.seed = 1", &[COMMON], Some(9)).unwrap();
        assert_eq!(c.seed(), 9);
        assert_eq!(Config::parse("", &[COMMON], Some(9)), Err(ConfigError::MissingSeed));
    }

    #[test]
    fn lists_and_bools() {
        let c = parse("run.seed = 1\na.y = 1, 2,3").unwrap();
        assert_eq!(c.list::<usize>("a.y").unwrap(), vec![1, 2, 3]);
        assert!(c.bool("run.parallel").unwrap());
        assert!(c.bool("a.y").is_err());
        assert_eq!(c.opt_list::<f64>("a.q").unwrap(), None);
    }
}

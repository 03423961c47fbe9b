//! Flat `key = value` configuration merged from a file, `--set` pairs and
//! command-line flags, in increasing precedence.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::CliError;

/// Keys that steer execution but never change results.
const RUNTIME_KEYS: [&str; 2] = ["out", "threads"];

#[derive(Debug, Default)]
pub struct Settings {
    raw: BTreeMap<String, String>,
    resolved: BTreeMap<String, String>,
}

fn normalize(key: &str) -> String {
    key.trim().replace('-', "_")
}

impl Settings {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut s = Settings::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("{}:{}: expected key = value", path.display(), n + 1)))?;
            s.raw.insert(normalize(k), v.trim().to_string());
        }
        Ok(s)
    }

    pub fn set_pair(&mut self, pair: &str) -> Result<(), CliError> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {pair:?}")))?;
        self.raw.insert(normalize(k), v.trim().to_string());
        Ok(())
    }

    pub fn set<T: Display>(&mut self, key: &str, value: Option<T>) {
        if let Some(v) = value {
            self.raw.insert(normalize(key), v.to_string());
        }
    }

    fn take_raw(&mut self, key: &str) -> Option<String> {
        self.raw.remove(key)
    }

    /// Records a value derived outside the getters, e.g. a data-dependent default.
    pub fn note(&mut self, key: &str, value: impl Display) {
        self.record(key, value.to_string());
    }

    fn record(&mut self, key: &str, value: String) {
        if !RUNTIME_KEYS.contains(&key) {
            self.resolved.insert(key.to_string(), value);
        }
    }

    fn parse<T: FromStr>(key: &str, raw: &str) -> Result<T, CliError>
    where
        T::Err: Display,
    {
        raw.parse::<T>()
            .map_err(|e| CliError::Usage(format!("invalid value {raw:?} for {key}: {e}")))
    }

    pub fn get<T: FromStr + Display>(&mut self, key: &str, default: T) -> Result<T, CliError>
    where
        T::Err: Display,
    {
        let v = match self.take_raw(key) {
            Some(raw) => Self::parse(key, &raw)?,
            None => default,
        };
        self.record(key, v.to_string());
        Ok(v)
    }

    pub fn optional<T: FromStr + Display>(&mut self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: Display,
    {
        match self.take_raw(key) {
            Some(raw) => {
                let v: T = Self::parse(key, &raw)?;
                self.record(key, v.to_string());
                Ok(Some(v))
            }
            None => Ok(None),
        }
    }

    pub fn required<T: FromStr + Display>(&mut self, key: &str) -> Result<T, CliError>
    where
        T::Err: Display,
    {
        self.optional(key)?
            .ok_or_else(|| CliError::Usage(format!("missing required setting {key}")))
    }

    /// Custom parsing; the raw text is what gets recorded.
    pub fn get_with<T>(
        &mut self,
        key: &str,
        default: &str,
        parse: impl Fn(&str) -> Result<T, String>,
    ) -> Result<T, CliError> {
        let raw = self.take_raw(key).unwrap_or_else(|| default.to_string());
        let v = parse(&raw).map_err(|e| CliError::Usage(format!("invalid value {raw:?} for {key}: {e}")))?;
        self.record(key, raw);
        Ok(v)
    }

    /// Fails on any key no command consumed.
    pub fn finish(&self, command: &str) -> Result<(), CliError> {
        match self.raw.keys().next() {
            Some(k) => Err(CliError::Usage(format!("setting {k} does not apply to {command}"))),
            None => Ok(()),
        }
    }

    pub fn resolved(&self) -> &BTreeMap<String, String> {
        &self.resolved
    }

    /// SHA-256 over the sorted `key=value` lines of every resolved setting.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.resolved {
            h.update(k.as_bytes());
            h.update(b"=");
            h.update(v.as_bytes());
            h.update(b"\n");
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

pub fn parse_list<T: FromStr>(s: &str) -> Result<Vec<T>, String>
where
    T::Err: Display,
{
    s.split(',')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(|x| x.parse::<T>().map_err(|e| format!("{x:?}: {e}")))
        .collect()
}

/// `1..7`, `1..=7` or a comma list.
pub fn parse_levels(s: &str) -> Result<Vec<i32>, String> {
    let s = s.trim();
    if let Some((a, b)) = s.split_once("..") {
        let b = b.strip_prefix('=').unwrap_or(b);
        let (a, b): (i32, i32) = (
            a.trim().parse().map_err(|e| format!("{e}"))?,
            b.trim().parse().map_err(|e| format!("{e}"))?,
        );
        if a > b {
            return Err(format!("empty range {a}..{b}"));
        }
        return Ok((a..=b).collect());
    }
    let v: Vec<i32> = parse_list(s)?;
    if v.is_empty() {
        return Err("no levels given".into());
    }
    Ok(v)
}

/// `lo,hi` or `off`.
pub fn parse_truncation(s: &str) -> Result<Option<ipweval::propensity::Truncation>, String> {
    if s.trim().eq_ignore_ascii_case("off") {
        return Ok(None);
    }
    let v: Vec<f64> = parse_list(s)?;
    match v.as_slice() {
        [lo, hi] => ipweval::propensity::Truncation::new(*lo, *hi).map(Some).map_err(|e| e.to_string()),
        _ => Err("expected lo,hi or off".into()),
    }
}

pub fn parse_bool(s: &str) -> Result<bool, String> {
    match s.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "on" => Ok(true),
        "0" | "false" | "no" | "off" => Ok(false),
        other => Err(format!("expected a boolean, got {other:?}")),
    }
}

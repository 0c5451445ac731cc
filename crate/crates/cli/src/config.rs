//! `key = value` run configuration, overridden by command-line flags.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::CliError;

pub const SEED_ENV: &str = "FEWER_SEED";

/// Parses `key = value` lines. `#` starts a comment, `[section]` headers are
/// ignored, surrounding quotes on values are stripped, and `_` in keys is
/// read as `-` so that file keys match flag names.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>, String> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() || (line.starts_with('[') && line.ends_with(']')) {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected key = value", n + 1))?;
        let key = k.trim().replace('_', "-");
        if key.is_empty() {
            return Err(format!("line {}: empty key", n + 1));
        }
        let v = v.trim();
        let v = v
            .strip_prefix('"')
            .and_then(|s| s.strip_suffix('"'))
            .unwrap_or(v);
        out.insert(key, v.to_string());
    }
    Ok(out)
}

/// A setting type that can be parsed from the file and shown in the log.
pub trait ConfigValue: FromStr<Err: Display> {
    fn show(&self) -> String;
}

macro_rules! display_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn show(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

display_value!(String, f64, usize, u64, bool);

impl ConfigValue for PathBuf {
    fn show(&self) -> String {
        self.display().to_string()
    }
}

/// Resolves each setting from flag, config file, then default, and
/// remembers the outcome for logging.
#[derive(Debug, Default)]
pub struct Settings {
    file: BTreeMap<String, String>,
    resolved: Vec<(String, String, &'static str)>,
}

impl Settings {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let file = match path {
            None => BTreeMap::new(),
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                parse_config(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
        };
        Ok(Self {
            file,
            resolved: Vec::new(),
        })
    }

    fn file_value<T: ConfigValue>(&self, key: &str) -> Result<Option<T>, CliError> {
        self.file
            .get(key)
            .map(|v| {
                v.parse()
                    .map_err(|e| CliError::Config(format!("config key {key} = {v:?}: {e}")))
            })
            .transpose()
    }

    fn record<T: ConfigValue>(&mut self, key: &str, value: &T, source: &'static str) {
        self.resolved.push((key.to_string(), value.show(), source));
    }

    pub fn get<T: ConfigValue>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T, CliError> {
        let (value, source) = match flag {
            Some(v) => (v, "flag"),
            None => match self.file_value(key)? {
                Some(v) => (v, "config"),
                None => (default, "default"),
            },
        };
        self.record(key, &value, source);
        Ok(value)
    }

    pub fn optional<T: ConfigValue>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>, CliError> {
        let found = match flag {
            Some(v) => Some((v, "flag")),
            None => self.file_value(key)?.map(|v| (v, "config")),
        };
        Ok(found.map(|(v, source)| {
            self.record(key, &v, source);
            v
        }))
    }

    pub fn required<T: ConfigValue>(&mut self, key: &str, flag: Option<T>) -> Result<T, CliError> {
        self.optional(key, flag)?
            .ok_or_else(|| CliError::Config(format!("missing required setting --{key}")))
    }

    /// Seed from flag, config file, the `FEWER_SEED` environment variable,
    /// then zero.
    pub fn seed(&mut self, flag: Option<u64>) -> Result<u64, CliError> {
        if let Some(s) = self.optional("seed", flag)? {
            return Ok(s);
        }
        if let Ok(v) = std::env::var(SEED_ENV) {
            let s: u64 = v
                .trim()
                .parse()
                .map_err(|e| CliError::Config(format!("{SEED_ENV}={v:?}: {e}")))?;
            self.record("seed", &s, "env");
            return Ok(s);
        }
        self.record("seed", &0u64, "default");
        Ok(0)
    }

    /// Logs every resolved setting and warns about unused file keys.
    pub fn log(&self, command: &str) {
        let parts: Vec<String> = self
            .resolved
            .iter()
            .map(|(k, v, s)| format!("{k}={v} ({s})"))
            .collect();
        log::info!("{command}: {}", parts.join(", "));
        for key in self.file.keys() {
            if !self.resolved.iter().any(|(k, _, _)| k == key) {
                log::warn!("config key {key} is not used by {command}");
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_lines() {
        let m = parse_config("# run\n[train]\nlr = 3e-4\nmax_epochs=20 # cap\nout = \"m.fewm\"\n\n").unwrap();
        assert_eq!(m["lr"], "3e-4");
        assert_eq!(m["max-epochs"], "20");
        assert_eq!(m["out"], "m.fewm");
        assert!(parse_config("just words").is_err());
    }

    #[test]
    fn flag_beats_file_beats_default() {
        let mut s = Settings {
            file: parse_config("lr = 0.5\nbatch = 8").unwrap(),
            resolved: Vec::new(),
        };
        assert_eq!(s.get("lr", Some(0.1), 1.0).unwrap(), 0.1);
        assert_eq!(s.get("batch", None, 16usize).unwrap(), 8);
        assert_eq!(s.get("patience", None, 5usize).unwrap(), 5);
        assert!(s.required::<String>("out", None).is_err());
        s.file.insert("bins".into(), "many".into());
        assert!(s.get("bins", None, 100usize).is_err());
    }
}

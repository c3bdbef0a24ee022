//! `key = value` run configuration files.
//!
//! Keys are the long flag names of a subcommand (`epochs`, `lr-weights`,
//! ...). Flags given on the command line win over the file; every key in
//! the file must be consumed by the command, otherwise the run is refused.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use latent_mpm::{Error, Result};

#[derive(Debug, Default)]
pub struct Settings {
    values: BTreeMap<String, (usize, String)>,
}

impl Settings {
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            let key = k.trim().replace('_', "-");
            if key.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", i + 1)));
            }
            if values
                .insert(key.clone(), (i + 1, v.trim().to_string()))
                .is_some()
            {
                return Err(Error::Config(format!(
                    "line {}: duplicate key `{key}`",
                    i + 1
                )));
            }
        }
        Ok(Settings { values })
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Settings::default()),
            Some(p) => Settings::parse(&std::fs::read_to_string(p)?),
        }
    }

    /// Flag value if given, else the file value, else `default`.
    pub fn pick<T>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        Ok(self.pick_opt(key, flag)?.unwrap_or(default))
    }

    pub fn pick_opt<T>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        let from_file = self.values.remove(key);
        if flag.is_some() {
            return Ok(flag);
        }
        match from_file {
            None => Ok(None),
            Some((line, v)) => v
                .parse()
                .map(Some)
                .map_err(|e| Error::Config(format!("line {line}: bad value for `{key}`: {e}"))),
        }
    }

    /// Fails on keys that no option consumed.
    pub fn finish(&mut self) -> Result<()> {
        match std::mem::take(&mut self.values).into_iter().next() {
            None => Ok(()),
            Some((k, (line, _))) => Err(Error::Config(format!("line {line}: unknown key `{k}`"))),
        }
    }
}

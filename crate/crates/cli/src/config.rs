//! Option resolution: command-line flag, then config file, then default.
//! Every resolved value is recorded with its origin for the startup banner.

use std::fmt::Debug;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;

pub struct Resolver {
    command: String,
    section: toml::Table,
    top: toml::Table,
    lines: Vec<String>,
}

impl Resolver {
    /// Keys are looked up in the `[<command>]` table first, then at the top
    /// level of the file.
    pub fn load(path: Option<&Path>, command: &str) -> Result<Self> {
        let mut top = match path {
            Some(p) => {
                let raw = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                raw.parse::<toml::Table>().with_context(|| format!("parsing config {}", p.display()))?
            }
            None => toml::Table::new(),
        };
        let section = match top.remove(command) {
            Some(toml::Value::Table(t)) => t,
            Some(_) => bail!("config key `{command}` must be a table"),
            None => toml::Table::new(),
        };
        Ok(Resolver { command: command.to_string(), section, top, lines: Vec::new() })
    }

    fn file_value<T: DeserializeOwned>(&self, key: &str) -> Result<Option<T>> {
        let Some(v) = self.section.get(key).or_else(|| self.top.get(key)) else { return Ok(None) };
        let parsed = v.clone().try_into().with_context(|| format!("config key `{key}` has the wrong type"))?;
        Ok(Some(parsed))
    }

    pub fn optional<T: DeserializeOwned + Debug>(
        &mut self,
        key: &str,
        flag: Option<T>,
        default: Option<T>,
    ) -> Result<Option<T>> {
        let (value, origin) = match (flag, self.file_value(key)?, default) {
            (Some(v), _, _) => (Some(v), "flag"),
            (None, Some(v), _) => (Some(v), "config"),
            (None, None, Some(v)) => (Some(v), "default"),
            (None, None, None) => (None, "unset"),
        };
        match &value {
            Some(v) => self.lines.push(format!("  {key} = {v:?} [{origin}]")),
            None => self.lines.push(format!("  {key} [{origin}]")),
        }
        Ok(value)
    }

    pub fn value<T: DeserializeOwned + Debug>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T> {
        Ok(self.optional(key, flag, Some(default))?.expect("default given"))
    }

    pub fn required<T: DeserializeOwned + Debug>(&mut self, key: &str, flag: Option<T>) -> Result<T> {
        match self.optional(key, flag, None)? {
            Some(v) => Ok(v),
            None => bail!("`{}` needs --{} (or `{key}` in the config file)", self.command, key.replace('_', "-")),
        }
    }

    pub fn banner(&self) -> String {
        format!("chatfuse {}\n{}", self.command, self.lines.join("\n"))
    }
}

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::parser::ValueSource;
use clap::{ArgMatches, Command};

/// Failure of a command, mapped onto the process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad invocation or unusable inputs (exit 1).
    Usage(String),
    /// Failure after compute started, or a check that did not hold (exit 2).
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<biasclf_core::Error> for CliError {
    fn from(e: biasclf_core::Error) -> Self {
        match e {
            biasclf_core::Error::InvalidInput(m) => CliError::Usage(m),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Keys that never enter provenance: they locate inputs and outputs of the
/// run rather than shape its results.
const NOT_PROVENANCE: [&str; 3] = ["config", "out", "threads"];

/// Resolved option values of one subcommand: defaults, overridden by the
/// config file, overridden by explicit flags.
#[derive(Clone, Debug, Default)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    pub fn resolve(cmd: &Command, m: &ArgMatches) -> CliResult<Self> {
        let known: Vec<String> = cmd
            .get_arguments()
            .map(|a| a.get_id().to_string())
            .filter(|id| id != "help" && id != "version")
            .collect();
        let file = match m.get_one::<String>("config") {
            Some(path) => read_config_file(Path::new(path))?,
            None => BTreeMap::new(),
        };
        for key in file.keys() {
            if key == "config" || !known.contains(key) {
                return Err(CliError::Usage(format!(
                    "unknown key '{key}' in config file for '{}'",
                    cmd.get_name()
                )));
            }
        }
        let mut values = BTreeMap::new();
        for id in &known {
            let from_flag = m.value_source(id) == Some(ValueSource::CommandLine);
            let value = match (from_flag, file.get(id)) {
                (false, Some(v)) => Some(v.clone()),
                _ => m.get_many::<String>(id).map(|vs| vs.cloned().collect::<Vec<_>>().join(",")),
            };
            if let Some(v) = value {
                values.insert(id.clone(), v);
            }
        }
        Ok(Settings { values })
    }

    pub fn opt(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str).filter(|v| !v.is_empty())
    }

    pub fn required(&self, key: &str) -> CliResult<&str> {
        self.opt(key).ok_or_else(|| CliError::Usage(format!("--{key} is required")))
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> CliResult<T>
    where
        T::Err: fmt::Display,
    {
        let raw = self.required(key)?;
        raw.parse().map_err(|e| CliError::Usage(format!("invalid value '{raw}' for --{key}: {e}")))
    }

    pub fn parse_opt<T: FromStr>(&self, key: &str) -> CliResult<Option<T>>
    where
        T::Err: fmt::Display,
    {
        self.opt(key).map(|_| self.parse(key)).transpose()
    }

    /// Comma-separated list value; empty when unset.
    pub fn list(&self, key: &str) -> Vec<String> {
        self.opt(key)
            .map(|v| v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect())
            .unwrap_or_default()
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(self.opt("out").unwrap_or("."))
    }

    /// The resolved configuration recorded in every output file.
    pub fn provenance(&self, subcommand: &str) -> BTreeMap<String, String> {
        let mut p: BTreeMap<String, String> = self
            .values
            .iter()
            .filter(|(k, _)| !NOT_PROVENANCE.contains(&k.as_str()))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        p.insert("subcommand".into(), subcommand.into());
        p
    }
}

/// Flat `key = value` lines; `#` starts a comment, `_` in keys reads as `-`.
pub fn read_config_file(path: &Path) -> CliResult<BTreeMap<String, String>> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config file {}: {e}", path.display())))?;
    parse_config(&text).map_err(|m| CliError::Usage(format!("{}: {m}", path.display())))
}

fn parse_config(text: &str) -> Result<BTreeMap<String, String>, String> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected key = value", i + 1))?;
        let key = k.trim().replace('_', "-");
        if out.insert(key.clone(), v.trim().to_string()).is_some() {
            return Err(format!("line {}: duplicate key '{key}'", i + 1));
        }
    }
    Ok(out)
}

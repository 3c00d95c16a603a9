use std::fmt;
use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use beamtrack::data::{read_dataset, RawDataset};
use beamtrack::Error;
use serde::Serialize;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(Error),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
            CliError::Data(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidConfig(m) => CliError::Usage(m),
            Error::Io(e) => CliError::Runtime(e.to_string()),
            other => CliError::Data(other),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Usage(format!("bad JSON: {e}"))
    }
}

pub fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Refuse to clobber an existing path unless forced.
pub fn check_output(path: &Path, force: bool) -> Result<(), CliError> {
    if path.exists() && !force {
        return Err(usage(format!("{} exists; pass --force to overwrite", path.display())));
    }
    Ok(())
}

pub fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| CliError::Runtime(format!("cannot open {}: {e}", path.display())))
}

pub fn load_dataset(path: &Path, default_beams: usize) -> Result<RawDataset, CliError> {
    Ok(read_dataset(open(path)?, default_beams)?)
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    Ok(serde_json::from_reader(open(path)?)?)
}

/// Pretty JSON with a trailing newline.
pub fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::write(path, s)?;
    Ok(())
}

pub fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> Result<T, CliError> {
    s.parse().map_err(CliError::from)
}

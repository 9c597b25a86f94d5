//! Run manifests and CSV emission.
//!
//! Every CSV starts with `#`-prefixed manifest lines followed by a header row.
//! Only the `# timestamp=` line differs between reruns with the same seed and
//! configuration.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const TIMESTAMP_KEY: &str = "timestamp";

/// Hex SHA-256 of a configuration's canonical text.
pub fn config_hash(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Provenance of one output file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    pub config_hash: String,
    /// Extra `key=value` pairs, written in order.
    pub extra: Vec<(String, String)>,
}

impl Manifest {
    pub fn new(command: &str, seed: u64, config_hash: &str) -> Self {
        Self { command: command.into(), seed, config_hash: config_hash.into(), extra: Vec::new() }
    }

    pub fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.extra.push((key.into(), value.to_string()));
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.extra.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    fn lines(&self) -> Vec<String> {
        let now = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        let mut v = vec![
            format!("# command={}", self.command),
            format!("# seed={}", self.seed),
            format!("# version={}", env!("CARGO_PKG_VERSION")),
            format!("# config_hash={}", self.config_hash),
        ];
        v.extend(self.extra.iter().map(|(k, val)| format!("# {k}={val}")));
        v.push(format!("# {TIMESTAMP_KEY}={now}"));
        v
    }

    /// Reads the leading `#` lines of a file written by [`write_csv`].
    pub fn read(path: &Path) -> Result<Self> {
        let file = fs::File::open(path)?;
        let mut m = Manifest::new("", 0, "");
        for line in BufReader::new(file).lines() {
            let line = line?;
            let Some(body) = line.strip_prefix("# ") else { break };
            let Some((k, v)) = body.split_once('=') else { continue };
            match k {
                "command" => m.command = v.into(),
                "seed" => m.seed = v.parse().map_err(|_| Error::Config(format!("bad seed in {}", path.display())))?,
                "config_hash" => m.config_hash = v.into(),
                "version" | TIMESTAMP_KEY => {}
                _ => m.extra.push((k.into(), v.into())),
            }
        }
        Ok(m)
    }
}

/// Writes the manifest, a header row and records.
pub fn write_csv<R: AsRef<[String]>>(path: &Path, manifest: &Manifest, header: &[&str], rows: &[R]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut file = fs::File::create(path)?;
    for l in manifest.lines() {
        writeln!(file, "{l}")?;
    }
    let mut w = csv::Writer::from_writer(file);
    w.write_record(header)?;
    for r in rows {
        w.write_record(r.as_ref())?;
    }
    w.flush()?;
    Ok(())
}

/// Reads the records of a file written by [`write_csv`], skipping the manifest.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
    let header = r.headers()?.iter().map(String::from).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        rows.push(rec?.iter().map(String::from).collect());
    }
    Ok((header, rows))
}

/// File contents without the timestamp line; equal across reruns.
pub fn stable_contents(path: &Path) -> Result<String> {
    let text = fs::read_to_string(path)?;
    let prefix = format!("# {TIMESTAMP_KEY}=");
    Ok(text.lines().filter(|l| !l.starts_with(&prefix)).collect::<Vec<_>>().join("\n"))
}

/// Shortest round-trip formatting of a float.
pub fn num(x: f64) -> String {
    format!("{x:?}")
}

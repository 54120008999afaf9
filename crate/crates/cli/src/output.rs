use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};
use crate::manifest::OutputRecord;

/// Where a command's results go: files in a directory, or the primary
/// document on stdout.
pub struct Sink {
    dir: Option<PathBuf>,
    written: Vec<OutputRecord>,
}

impl Sink {
    pub fn new(dir: Option<PathBuf>) -> CliResult<Self> {
        if let Some(d) = &dir {
            std::fs::create_dir_all(d).map_err(|e| CliError::io(d, e))?;
        }
        Ok(Self { dir, written: Vec::new() })
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    /// The main result; printed to stdout when there is no output directory.
    pub fn primary(&mut self, name: &str, bytes: Vec<u8>) -> CliResult<()> {
        if self.dir.is_none() {
            std::io::stdout().write_all(&bytes).map_err(|e| CliError::io("<stdout>", e))?;
            return Ok(());
        }
        self.file(name, bytes)
    }

    /// A supporting file, only written with an output directory.
    pub fn file(&mut self, name: &str, bytes: Vec<u8>) -> CliResult<()> {
        let Some(dir) = &self.dir else { return Ok(()) };
        write_atomic(&dir.join(name), &bytes)?;
        self.written.push(OutputRecord { file: name.to_owned(), sha256: sha256_hex(&bytes) });
        Ok(())
    }

    pub fn records(&self) -> &[OutputRecord] {
        &self.written
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CliError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| CliError::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| CliError::io(path, e))?;
    tmp.persist(path).map_err(|e| CliError::io(path, e.error))?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn json<T: Serialize>(value: &T) -> CliResult<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// Shortest decimal that parses back to the same value; exponent form outside
/// a readable range.
pub fn num(x: f64) -> String {
    let a = x.abs();
    if x == 0.0 || !x.is_finite() || (1e-5..1e16).contains(&a) {
        format!("{x}")
    } else {
        format!("{x:e}")
    }
}

pub fn opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

pub struct Table {
    writer: csv::Writer<Vec<u8>>,
}

impl Table {
    pub fn new<S: AsRef<str>>(header: &[S]) -> CliResult<Self> {
        let mut writer = csv::Writer::from_writer(Vec::new());
        writer.write_record(header.iter().map(|h| h.as_ref())).map_err(csv_error)?;
        Ok(Self { writer })
    }

    pub fn row<S: AsRef<str>>(&mut self, fields: &[S]) -> CliResult<()> {
        self.writer.write_record(fields.iter().map(|f| f.as_ref())).map_err(csv_error)
    }

    pub fn finish(self) -> CliResult<Vec<u8>> {
        self.writer.into_inner().map_err(|e| CliError::io("<csv>", std::io::Error::other(e.to_string())))
    }
}

fn csv_error(e: csv::Error) -> CliError {
    CliError::io("<csv>", std::io::Error::other(e.to_string()))
}

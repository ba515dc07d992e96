//! Artifact writing and the reproducibility manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::Failure;

pub const SCHEMA_VERSION: u32 = 1;

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Serialize)]
pub struct InputRecord {
    pub path: PathBuf,
    pub sha256: String,
    pub bytes: usize,
}

impl InputRecord {
    pub fn read(path: &Path) -> Result<(Self, Vec<u8>), Failure> {
        let bytes = fs::read(path).map_err(|e| Failure {
            code: 2,
            kind: "input",
            message: format!("{}: {e}", path.display()),
        })?;
        let record = InputRecord {
            path: path.to_path_buf(),
            sha256: sha256_hex(&bytes),
            bytes: bytes.len(),
        };
        Ok((record, bytes))
    }
}

#[derive(Debug, Serialize)]
pub struct OutputRecord {
    pub file: String,
    pub sha256: String,
}

/// Collects the files of one run so the manifest can list their hashes.
pub struct OutDir {
    dir: PathBuf,
    written: Vec<OutputRecord>,
}

impl OutDir {
    pub fn create(dir: &Path) -> Result<Self, Failure> {
        fs::create_dir_all(dir).map_err(|e| Failure::output(dir, e))?;
        Ok(OutDir {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), Failure> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).map_err(|e| Failure::output(&path, e))?;
        self.written.push(OutputRecord {
            file: name.to_string(),
            sha256: sha256_hex(bytes),
        });
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), Failure> {
        let mut text = serde_json::to_string_pretty(value)
            .map_err(|e| Failure::output(&self.dir.join(name), e))?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    /// Writes `manifest.json`; it must be the last file of the run.
    pub fn finish<C: Serialize>(
        mut self,
        command: &str,
        config: &C,
        seed: u64,
        input: Option<InputRecord>,
    ) -> Result<(), Failure> {
        let outputs = std::mem::take(&mut self.written);
        let manifest = Manifest {
            schema_version: SCHEMA_VERSION,
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            core_version: sepfx_core::VERSION,
            command,
            seed,
            config,
            input,
            outputs,
        };
        self.write_json("manifest.json", &manifest)
    }
}

#[derive(Serialize)]
struct Manifest<'a, C: Serialize> {
    schema_version: u32,
    tool: &'static str,
    version: &'static str,
    core_version: &'static str,
    command: &'a str,
    seed: u64,
    config: &'a C,
    input: Option<InputRecord>,
    outputs: Vec<OutputRecord>,
}

/// Long-format plot data: one row per curve point.
pub struct CurveTable {
    wtr: csv::Writer<Vec<u8>>,
}

impl CurveTable {
    pub fn new(header: &[&str]) -> Self {
        let mut wtr = csv::Writer::from_writer(Vec::new());
        wtr.write_record(header).expect("writing to memory");
        CurveTable { wtr }
    }

    pub fn row(&mut self, fields: &[String]) {
        self.wtr.write_record(fields).expect("writing to memory");
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.wtr.into_inner().expect("writing to memory")
    }
}

pub fn opt(x: Option<f64>) -> String {
    x.map_or(String::new(), |v| v.to_string())
}

//! Artifact writing: CSV tables and JSON documents with provenance.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use qhedge_core::config::RunConfig;
use qhedge_core::engine::Curve;
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const JSON_SCHEMA_VERSION: u32 = 1;

/// Loaded configuration plus what is needed to describe where results came from.
pub struct Setup {
    pub config: RunConfig,
    pub config_sha256: String,
    pub out: PathBuf,
}

impl Setup {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let bytes = fs::read(path).map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
        let text = String::from_utf8(bytes.clone()).map_err(|_| CliError::config("config is not UTF-8"))?;
        let config = RunConfig::from_toml(&text)?;
        let config_sha256 = Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect();
        let out = config.run.out_dir.clone();
        Ok(Self { config, config_sha256, out })
    }

    pub fn prepare_out(&self) -> Result<(), CliError> {
        fs::create_dir_all(&self.out)
            .map_err(|e| CliError::config(format!("cannot create output directory {}: {e}", self.out.display())))
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn provenance(&self) -> Value {
        let c = &self.config;
        let mut run = serde_json::to_value(&c.run).expect("run section serializes");
        // the output location does not influence any number
        if let Some(m) = run.as_object_mut() {
            m.remove("out_dir");
        }
        json!({
            "config_sha256": self.config_sha256,
            "seed": c.run.seed,
            "method": c.run.method.as_str(),
            "model": c.model,
            "payoff": c.payoff,
            "grid": c.grid,
            "run": run,
        })
    }

    /// Writes `{schema_version, command, version, provenance, results, generated_at}`.
    /// `generated_at` is the only field that changes between identical runs; it honours
    /// `SOURCE_DATE_EPOCH`.
    pub fn write_json(&self, name: &str, command: &str, results: impl Serialize) -> Result<(), CliError> {
        let doc = json!({
            "schema_version": JSON_SCHEMA_VERSION,
            "command": command,
            "version": env!("CARGO_PKG_VERSION"),
            "provenance": self.provenance(),
            "results": serde_json::to_value(results).map_err(|e| CliError::numerical(e.to_string()))?,
            "generated_at": generated_at(),
        });
        let mut text = serde_json::to_string_pretty(&doc).map_err(|e| CliError::numerical(e.to_string()))?;
        text.push('\n');
        fs::write(self.path(name), text).map_err(|e| CliError::io(&self.path(name), e))
    }

    pub fn create(&self, name: &str) -> Result<BufWriter<fs::File>, CliError> {
        let path = self.path(name);
        fs::File::create(&path).map(BufWriter::new).map_err(|e| CliError::io(&path, e))
    }
}

fn generated_at() -> u64 {
    std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.trim().parse().ok())
        .unwrap_or_else(|| SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()))
}

/// `axis,value,std_error` rows.
pub fn write_curve(out: &mut impl Write, axis_name: &str, curve: &Curve) -> std::io::Result<()> {
    writeln!(out, "{axis_name},value,std_error")?;
    for (a, e) in curve.axis.iter().zip(&curve.points) {
        writeln!(out, "{a:?},{:?},{:?}", e.value, e.std_error)?;
    }
    out.flush()
}

pub fn curve_json(axis_name: &str, curve: &Curve) -> Value {
    let rows: Vec<Value> = curve
        .axis
        .iter()
        .zip(&curve.points)
        .map(|(a, e)| json!({ axis_name: a, "value": e.value, "std_error": e.std_error }))
        .collect();
    json!({ "rows": rows, "notes": curve.notes })
}

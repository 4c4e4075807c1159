//! Data files, manifests and CSV tables.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use ccpf_hessian::model::Observations;
use ccpf_hessian::GridPath;
use serde::Serialize;
use serde_json::Value;

use crate::config::RunConfig;

/// Everything needed to rerun a command: pass it back with `--config`.
#[derive(Debug, Serialize)]
pub struct RunManifest<'a> {
    pub command: String,
    pub model: &'a str,
    pub config: &'a RunConfig,
    pub seed: u64,
    pub data: Option<String>,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
    pub version: String,
    pub elapsed_secs: f64,
    pub summary: Value,
}

pub fn version() -> String {
    format!("{}+{}", env!("CARGO_PKG_VERSION"), env!("CCPF_GIT_REV"))
}

pub fn timestamp() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

pub fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".manifest.json");
    PathBuf::from(name)
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let file = File::create(path).with_context(|| format!("cannot write {}", path.display()))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

/// Writes observations with the latent state at the observation times. The
/// latent path's first state is the initial condition, so row `t` holds
/// `x(t)` for `t = 1..n`.
pub fn write_data(path: &Path, obs: &Observations, latent: &GridPath) -> Result<()> {
    let d = obs.dim();
    let file = File::create(path).with_context(|| format!("cannot write {}", path.display()))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    let mut header = vec!["t".to_string()];
    header.extend((0..d).map(|j| format!("y_{j}")));
    header.extend((0..d).map(|j| format!("x_{j}")));
    w.write_record(&header)?;
    let spu = 1usize << latent.level();
    for t in 1..=obs.len() {
        let mut row = vec![t.to_string()];
        row.extend(obs.get(t - 1).iter().map(|v| v.to_string()));
        row.extend(latent.state(t * spu).iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads the `y_*` columns of a data file.
pub fn read_observations(path: &Path) -> Result<Observations> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("cannot read {}", path.display()))?;
    let header = r.headers()?.clone();
    let cols: Vec<usize> = header.iter().enumerate().filter(|(_, h)| h.starts_with("y_")).map(|(i, _)| i).collect();
    if cols.is_empty() {
        bail!("{} has no y_* columns", path.display());
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let row = cols
            .iter()
            .map(|&c| rec[c].trim().parse::<f64>().with_context(|| format!("bad value {:?} in {}", &rec[c], path.display())))
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        bail!("{} has no observations", path.display());
    }
    Ok(Observations::from_rows(&rows)?)
}

/// Model recorded in a data file's manifest, if the manifest exists.
pub fn data_model(path: &Path) -> Option<String> {
    let text = std::fs::read_to_string(manifest_path(path)).ok()?;
    let v: Value = serde_json::from_str(&text).ok()?;
    v.get("model").and_then(Value::as_str).map(str::to_string)
}

/// A CSV table with `#fit:` footer lines for regression slopes.
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
    pub fits: Vec<(String, f64)>,
}

impl Table {
    pub fn new(header: Vec<String>) -> Self {
        Table { header, rows: Vec::new(), fits: Vec::new() }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = File::create(path).with_context(|| format!("cannot write {}", path.display()))?;
        let mut w = csv::Writer::from_writer(BufWriter::new(file));
        w.write_record(&self.header)?;
        for row in &self.rows {
            w.write_record(row)?;
        }
        w.flush()?;
        let mut inner = w.into_inner().map_err(|e| anyhow::anyhow!("{}", e.error()))?;
        for (name, slope) in &self.fits {
            writeln!(inner, "#fit: {name},{slope}")?;
        }
        inner.flush()?;
        Ok(())
    }
}

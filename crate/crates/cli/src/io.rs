//! CSV and JSON artifacts.
//!
//! Numbers are written with Rust's shortest round-trip formatting, fields are
//! comma separated, lines end with `\n` and nothing is quoted (no field ever
//! contains a delimiter or quote).

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{ensure, Context, Result};
use ndarray::Array2;
use parinv::sampler::TraceRow;
use parinv::{Observation, SpaceTimeGrid};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

fn writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(BufWriter::new(file)))
}

fn reader(path: &Path) -> Result<csv::Reader<File>> {
    csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("opening {}", path.display()))
}

fn row(values: &[f64]) -> Vec<String> {
    values.iter().map(|v| v.to_string()).collect()
}

#[derive(Debug, Deserialize)]
struct DatasetRow {
    t: f64,
    x: f64,
    z: f64,
}

#[derive(Debug, Deserialize)]
struct LayoutRow {
    t: f64,
    x: f64,
}

/// Dataset with header `t,x,z`.
pub fn write_dataset(path: &Path, observations: &[Observation]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["t", "x", "z"])?;
    for o in observations {
        w.write_record(row(&[o.t, o.x, o.z]))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<Observation>> {
    let mut out = Vec::new();
    for (i, r) in reader(path)?.deserialize::<DatasetRow>().enumerate() {
        let r = r.with_context(|| format!("{} row {}", path.display(), i + 1))?;
        out.push(Observation {
            t: r.t,
            x: r.x,
            z: r.z,
        });
    }
    ensure!(!out.is_empty(), "{} holds no observations", path.display());
    Ok(out)
}

/// Observation layout with header `t,x`.
pub fn read_layout(path: &Path) -> Result<Vec<(f64, f64)>> {
    let mut out = Vec::new();
    for (i, r) in reader(path)?.deserialize::<LayoutRow>().enumerate() {
        let r = r.with_context(|| format!("{} row {}", path.display(), i + 1))?;
        out.push((r.t, r.x));
    }
    ensure!(!out.is_empty(), "{} holds no points", path.display());
    Ok(out)
}

/// Lattice in long format `t,x,value`, time-major.
pub fn write_lattice(path: &Path, grid: &SpaceTimeGrid, values: &Array2<f64>) -> Result<()> {
    ensure!(
        values.dim() == grid.lattice_shape(),
        "lattice shape {:?} does not match the grid {:?}",
        values.dim(),
        grid.lattice_shape()
    );
    let mut w = writer(path)?;
    w.write_record(["t", "x", "value"])?;
    for ((n, j), &v) in values.indexed_iter() {
        w.write_record(row(&[grid.t(n), grid.x(j), v]))?;
    }
    w.flush()?;
    Ok(())
}

/// The six traced series, in column order.
pub const SERIES: [&str; 6] = ["phi", "lambda", "D", "xi_0", "xi_1", "xi_2"];

pub fn trace_series(rows: &[TraceRow]) -> [Vec<f64>; 6] {
    let xi = |k: usize| {
        rows.iter()
            .map(|r| r.xi_head.get(k).copied().unwrap_or(f64::NAN))
            .collect()
    };
    [
        rows.iter().map(|r| r.phi).collect(),
        rows.iter().map(|r| r.lambda).collect(),
        rows.iter().map(|r| r.diffusion).collect(),
        xi(0),
        xi(1),
        xi(2),
    ]
}

pub fn write_trace(path: &Path, rows: &[TraceRow]) -> Result<()> {
    let mut w = writer(path)?;
    let mut header = vec!["iteration"];
    header.extend(SERIES);
    header.extend(["accepted", "step_size"]);
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.iteration.to_string()];
        rec.extend(row(&[r.phi, r.lambda, r.diffusion]));
        rec.extend((0..3).map(|k| r.xi_head.get(k).map_or(String::new(), f64::to_string)));
        rec.push(u8::from(r.accepted).to_string());
        rec.push(r.step_size.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Autocorrelations with header `lag,phi,lambda,D,xi_0,xi_1,xi_2`.
pub fn write_acf(path: &Path, acfs: &[Vec<f64>; 6]) -> Result<()> {
    let mut w = writer(path)?;
    let mut header = vec!["lag"];
    header.extend(SERIES);
    w.write_record(&header)?;
    let lags = acfs.iter().map(Vec::len).max().unwrap_or(0);
    for lag in 0..lags {
        let mut rec = vec![lag.to_string()];
        rec.extend(
            acfs.iter()
                .map(|a| a.get(lag).map_or(String::new(), f64::to_string)),
        );
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut w =
        BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

//! Surface files: a long-format CSV and a binary container with a JSON header.
//!
//! Binary layout: 8-byte magic, `u32` format version, `u64` header length, the JSON
//! header, then every value as little-endian `f64` in flat `(t, x, axis)` order.

use std::io::{BufRead, Read, Write};

use serde::{Deserialize, Serialize};

use super::{GridSpec, Surface};
use crate::duality::Domain;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"QHSURF\0\0";
pub const SURFACE_SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    schema_version: u32,
    grid: GridSpec,
    epsilon: f64,
    model: String,
    payoff: String,
    truncated: Vec<usize>,
}

pub fn write_surface(out: &mut impl Write, s: &Surface) -> Result<()> {
    let header = serde_json::to_vec(&Header {
        schema_version: SURFACE_SCHEMA_VERSION,
        grid: s.grid.clone(),
        epsilon: s.grid.epsilon,
        model: s.model.clone(),
        payoff: s.payoff.clone(),
        truncated: s.truncated.clone(),
    })?;
    out.write_all(MAGIC)?;
    out.write_all(&SURFACE_SCHEMA_VERSION.to_le_bytes())?;
    out.write_all(&(header.len() as u64).to_le_bytes())?;
    out.write_all(&header)?;
    let mut buf = Vec::with_capacity(s.values.len() * 8);
    for v in &s.values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_surface(input: &mut impl Read) -> Result<Surface> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a surface file".into()));
    }
    let mut word = [0u8; 4];
    input.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != SURFACE_SCHEMA_VERSION {
        return Err(Error::Format(format!("unsupported surface version {version}")));
    }
    let mut len = [0u8; 8];
    input.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    if len > 1 << 26 {
        return Err(Error::Format(format!("header length {len} is implausible")));
    }
    let mut header = vec![0u8; len];
    input.read_exact(&mut header)?;
    let header: Header = serde_json::from_slice(&header)?;
    header.grid.validate()?;
    let n = header.grid.len();
    let mut raw = vec![0u8; n * 8];
    input.read_exact(&mut raw)?;
    let values = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    let mut s = Surface::new(header.grid, values, header.model, header.payoff)?;
    if header.truncated.windows(2).any(|w| w[0] >= w[1]) || header.truncated.last().is_some_and(|&i| i >= n) {
        return Err(Error::Format("truncation list is not sorted or out of range".into()));
    }
    s.truncated = header.truncated;
    Ok(s)
}

/// Rows `t,x_1[,x_2],q|p,value`; floats use the shortest round-trip representation.
pub fn write_surface_csv(out: &mut impl Write, s: &Surface) -> Result<()> {
    let g = &s.grid;
    let mut head = String::from("t");
    for k in 0..g.dim() {
        head.push_str(&format!(",x_{}", k + 1));
    }
    writeln!(out, "{head},{},value", g.axis.label())?;
    let axis = g.axis_nodes();
    for it in 0..g.n_t {
        let t = g.t(it);
        for ix in 0..g.n_space() {
            let x = g.x_at(ix);
            let xs: String = x.iter().map(|v| format!(",{v:?}")).collect();
            for (ia, a) in axis.iter().enumerate() {
                writeln!(out, "{t:?}{xs},{a:?},{:?}", s.get(it, ix, ia))?;
            }
        }
    }
    Ok(())
}

/// Reads a CSV written by [`write_surface_csv`]; the grid is rebuilt from the node
/// coordinates and `epsilon`, which the CSV does not carry.
pub fn read_surface_csv(input: impl BufRead, epsilon: f64) -> Result<Surface> {
    let mut lines = input.lines();
    let head = lines.next().ok_or_else(|| Error::Format("empty surface csv".into()))??;
    let cols: Vec<&str> = head.trim().split(',').collect();
    if cols.len() < 4 || cols[0] != "t" || cols[cols.len() - 1] != "value" {
        return Err(Error::Format(format!("unexpected header {head:?}")));
    }
    let d = cols.len() - 3;
    let axis = match cols[cols.len() - 2] {
        "q" => Domain::Q,
        "p" => Domain::P,
        other => return Err(Error::Format(format!("unknown axis column {other:?}"))),
    };
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|f| f.trim().parse::<f64>().map_err(|e| Error::Format(format!("line {}: {e}", n + 2))))
            .collect::<Result<_>>()?;
        if row.len() != cols.len() {
            return Err(Error::Format(format!("line {} has {} fields", n + 2, row.len())));
        }
        rows.push(row);
    }
    let distinct = |c: usize| -> Vec<f64> {
        let mut v: Vec<f64> = rows.iter().map(|r| r[c]).collect();
        v.sort_by(f64::total_cmp);
        v.dedup();
        v
    };
    let ts = distinct(0);
    let xs: Vec<Vec<f64>> = (0..d).map(|k| distinct(1 + k)).collect();
    let a = distinct(d + 1);
    if ts.is_empty() || a.is_empty() || xs.iter().any(|x| x.is_empty()) {
        return Err(Error::Format("surface csv has no rows".into()));
    }
    let grid = GridSpec {
        t0: ts[0],
        horizon: ts[ts.len() - 1],
        n_t: ts.len(),
        x_min: xs.iter().map(|x| x[0]).collect(),
        x_max: xs.iter().map(|x| x[x.len() - 1]).collect(),
        n_x: xs.iter().map(|x| x.len()).collect(),
        axis,
        axis_min: a[0],
        axis_max: a[a.len() - 1],
        n_axis: a.len(),
        epsilon,
    };
    grid.validate()?;
    if rows.len() != grid.len() {
        return Err(Error::Format(format!("expected {} rows, found {}", grid.len(), rows.len())));
    }
    let values = rows.iter().map(|r| r[d + 2]).collect();
    Surface::new(grid, values, "", "")
}

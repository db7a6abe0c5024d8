//! CSV layouts for IMU, magnetometer, trajectory and solution files.
//!
//! Floats are written with Rust's shortest round-trip formatting, so a file
//! read back reproduces the in-memory values bit for bit.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::gpr::MapEstimate;
use crate::slam::BiasRow;
use crate::types::{ImuRecord, MagRecord, NavState, Quaternion};

pub const IMU_HEADER: [&str; 9] = ["t", "dq_w", "dq_x", "dq_y", "dq_z", "dv_x", "dv_y", "dv_z", "T"];
pub const MAG_HEADER: [&str; 5] = ["t", "mx", "my", "mz", "sigma"];
pub const TRUTH_HEADER: [&str; 3] = ["t", "px", "py"];
pub const TRAJECTORY_HEADER: [&str; 8] = ["t", "px", "py", "pz", "qw", "qx", "qy", "qz"];
pub const MAP_TRAIN_HEADER: [&str; 9] = ["x", "y", "z", "mx", "my", "mz", "sigma_x", "sigma_y", "sigma_z"];

/// Numeric table with its header and the 1-based file line of every row.
struct Table {
    header: Vec<String>,
    rows: Vec<(usize, Vec<f64>)>,
}

impl Table {
    fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }
}

fn parse_error(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn read_table<R: Read>(reader: R, path: &Path) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| parse_error(path, 1, e.to_string()))?
        .iter()
        .map(str::to_owned)
        .collect();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_error(path, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != header.len() {
            return Err(parse_error(
                path,
                line,
                format!("expected {} fields, found {}", header.len(), rec.len()),
            ));
        }
        let values = rec
            .iter()
            .enumerate()
            .map(|(i, s)| {
                s.parse::<f64>()
                    .map_err(|_| parse_error(path, line, format!("column `{}`: cannot parse `{s}` as a number", header[i])))
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push((line, values));
    }
    Ok(Table { header, rows })
}

fn open_table(path: &Path) -> Result<Table> {
    read_table(File::open(path)?, path)
}

fn expect_header(table: &Table, expected: &[&str], path: &Path) -> Result<()> {
    if table.header.iter().map(String::as_str).ne(expected.iter().copied()) {
        return Err(parse_error(
            path,
            1,
            format!("expected header `{}`, found `{}`", expected.join(","), table.header.join(",")),
        ));
    }
    Ok(())
}

fn write_rows<W: Write>(out: W, header: &[&str], rows: impl IntoIterator<Item = Vec<f64>>) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header)?;
    for row in rows {
        w.write_record(row.iter().map(f64::to_string))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_imu<W: Write>(records: &[ImuRecord], out: W) -> Result<()> {
    write_rows(
        out,
        &IMU_HEADER,
        records.iter().map(|r| {
            vec![r.t, r.dq.w, r.dq.x, r.dq.y, r.dq.z, r.dv.x, r.dv.y, r.dv.z, r.period]
        }),
    )
}

pub fn parse_imu<R: Read>(reader: R, path: &Path) -> Result<Vec<ImuRecord>> {
    let table = read_table(reader, path)?;
    expect_header(&table, &IMU_HEADER, path)?;
    table
        .rows
        .iter()
        .map(|(line, v)| {
            let rec = ImuRecord {
                t: v[0],
                dq: Quaternion::new(v[1], v[2], v[3], v[4]),
                dv: Vector3::new(v[5], v[6], v[7]),
                period: v[8],
            };
            rec.check().map_err(|e| parse_error(path, *line, e.to_string()))?;
            if (rec.dq.norm() - 1.0).abs() > 1e-6 {
                return Err(parse_error(path, *line, "dq is not a unit quaternion"));
            }
            Ok(ImuRecord {
                dq: rec.dq.normalize(),
                ..rec
            })
        })
        .collect()
}

pub fn read_imu(path: &Path) -> Result<Vec<ImuRecord>> {
    parse_imu(File::open(path)?, path)
}

/// Writes magnetometer records. The file layout holds one sigma per record,
/// so records with unequal per-axis sigmas are rejected.
pub fn write_mag<W: Write>(records: &[MagRecord], out: W) -> Result<()> {
    if let Some(r) = records.iter().find(|r| r.sigma.x != r.sigma.y || r.sigma.x != r.sigma.z) {
        return Err(Error::InvalidInput(format!(
            "magnetometer record at t = {} has per-axis sigmas; the file layout stores one sigma",
            r.t
        )));
    }
    write_rows(
        out,
        &MAG_HEADER,
        records.iter().map(|r| vec![r.t, r.y.x, r.y.y, r.y.z, r.sigma.x]),
    )
}

pub fn parse_mag<R: Read>(reader: R, path: &Path) -> Result<Vec<MagRecord>> {
    let table = read_table(reader, path)?;
    expect_header(&table, &MAG_HEADER, path)?;
    table
        .rows
        .iter()
        .map(|(line, v)| {
            let rec = MagRecord {
                t: v[0],
                y: Vector3::new(v[1], v[2], v[3]),
                sigma: Vector3::repeat(v[4]),
            };
            rec.check().map_err(|e| parse_error(path, *line, e.to_string()))?;
            Ok(rec)
        })
        .collect()
}

pub fn read_mag(path: &Path) -> Result<Vec<MagRecord>> {
    parse_mag(File::open(path)?, path)
}

/// Planar ground truth `t,px,py`.
pub fn write_truth<W: Write>(states: &[NavState], out: W) -> Result<()> {
    write_rows(out, &TRUTH_HEADER, states.iter().map(|s| vec![s.t, s.p.x, s.p.y]))
}

pub fn write_trajectory<W: Write>(states: &[NavState], out: W) -> Result<()> {
    write_rows(
        out,
        &TRAJECTORY_HEADER,
        states
            .iter()
            .map(|s| vec![s.t, s.p.x, s.p.y, s.p.z, s.q.w, s.q.x, s.q.y, s.q.z]),
    )
}

/// Timed positions from any CSV with `t`, `px` and `py` columns; `pz` is
/// optional and defaults to zero. Accepts both truth and trajectory files.
pub fn parse_positions<R: Read>(reader: R, path: &Path) -> Result<Vec<(f64, Vector3<f64>)>> {
    let table = read_table(reader, path)?;
    let col = |name: &str| {
        table
            .column(name)
            .ok_or_else(|| parse_error(path, 1, format!("missing column `{name}`")))
    };
    let (t, x, y) = (col("t")?, col("px")?, col("py")?);
    let z = table.column("pz");
    table
        .rows
        .iter()
        .map(|(line, v)| {
            let p = Vector3::new(v[x], v[y], z.map_or(0.0, |z| v[z]));
            if !(v[t].is_finite() && p.iter().all(|c| c.is_finite())) {
                return Err(parse_error(path, *line, "non-finite position"));
            }
            Ok((v[t], p))
        })
        .collect()
}

pub fn read_positions(path: &Path) -> Result<Vec<(f64, Vector3<f64>)>> {
    parse_positions(File::open(path)?, path)
}

pub fn write_cost_trace<W: Write>(trace: &[f64], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["iter", "cost"])?;
    for (i, c) in trace.iter().enumerate() {
        w.write_record([i.to_string(), c.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_bias_report<W: Write>(rows: &[BiasRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["sensor", "axis", "initial", "recovered", "unit"])?;
    for r in rows {
        w.write_record([
            r.sensor.to_string(),
            r.axis.to_string(),
            r.initial.to_string(),
            r.recovered.to_string(),
            r.unit.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Training locations, latent field values and their noise levels.
pub fn write_map_train<W: Write>(map: &MapEstimate, out: W) -> Result<()> {
    let values = map.train_values();
    let noise = map.noise();
    write_rows(
        out,
        &MAP_TRAIN_HEADER,
        map.train_locations().iter().enumerate().map(|(i, loc)| {
            let mut row: Vec<f64> = (0..3).map(|a| loc.get(a).copied().unwrap_or(0.0)).collect();
            row.extend((0..3).map(|a| values[(i, a)]));
            row.extend((0..3).map(|a| noise[(i, a)]));
            row
        }),
    )
}

/// Training data as written by [`write_map_train`]: locations, values and
/// noise, one row per training point.
pub struct MapTrain {
    pub locations: Vec<[f64; 3]>,
    pub values: Vec<[f64; 3]>,
    pub noise: Vec<[f64; 3]>,
}

pub fn read_map_train(path: &Path) -> Result<MapTrain> {
    let table = open_table(path)?;
    expect_header(&table, &MAP_TRAIN_HEADER, path)?;
    let mut out = MapTrain {
        locations: Vec::new(),
        values: Vec::new(),
        noise: Vec::new(),
    };
    for (line, v) in &table.rows {
        if v.iter().any(|x| !x.is_finite()) || v[6..].iter().any(|s| *s <= 0.0) {
            return Err(parse_error(path, *line, "values must be finite with positive sigmas"));
        }
        out.locations.push([v[0], v[1], v[2]]);
        out.values.push([v[3], v[4], v[5]]);
        out.noise.push([v[6], v[7], v[8]]);
    }
    if out.locations.is_empty() {
        return Err(parse_error(path, 1, "no training points"));
    }
    Ok(out)
}

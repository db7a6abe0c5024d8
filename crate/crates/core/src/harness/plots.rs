//! Plot-ready CSV series and standalone SVG overlays.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::Vector3;

use crate::error::Result;
use crate::io;
use crate::slam::Solution;
use crate::types::MagRecord;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const MARGIN: f64 = 48.0;

struct Series<'a> {
    label: &'a str,
    color: &'a str,
    dashed: bool,
    points: Vec<(f64, f64)>,
}

fn write_positions(path: &Path, times: &[f64], positions: &[Vector3<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    w.write_record(["t", "px", "py", "pz"])?;
    for (t, p) in times.iter().zip(positions) {
        w.write_record([t.to_string(), p.x.to_string(), p.y.to_string(), p.z.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Renders polylines into a fixed-size SVG. With `equal_aspect` both axes
/// share one scale so trajectories are not distorted.
fn render_svg(title: &str, series: &[Series], equal_aspect: bool) -> String {
    let all = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in all.filter(|(x, y)| x.is_finite() && y.is_finite()) {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    let pad = |a: f64, b: f64| if b - a > 0.0 { (a, b) } else { (a - 0.5, b + 0.5) };
    (x0, x1) = pad(x0, x1);
    (y0, y1) = pad(y0, y1);
    let (w, h) = (WIDTH - 2.0 * MARGIN, HEIGHT - 2.0 * MARGIN);
    let (mut sx, mut sy) = (w / (x1 - x0), h / (y1 - y0));
    if equal_aspect {
        sx = sx.min(sy);
        sy = sx;
    }
    let map = |x: f64, y: f64| (MARGIN + (x - x0) * sx, HEIGHT - MARGIN - (y - y0) * sy);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="24" font-family="sans-serif" font-size="16" text-anchor="middle">{title}</text>"#,
        WIDTH / 2.0
    );
    let (ax, ay) = map(x0, y0);
    let _ = writeln!(
        svg,
        r#"<path d="M{ax:.2},{:.2} L{ax:.2},{ay:.2} L{:.2},{ay:.2}" stroke="gray" fill="none"/>"#,
        MARGIN,
        WIDTH - MARGIN
    );
    let _ = writeln!(
        svg,
        r#"<text x="{ax:.2}" y="{:.2}" font-family="sans-serif" font-size="11">{x0:.4}</text><text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="11" text-anchor="end">{x1:.4}</text>"#,
        ay + 14.0,
        WIDTH - MARGIN,
        ay + 14.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{ay:.2}" font-family="sans-serif" font-size="11" text-anchor="end">{y0:.4}</text><text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="11" text-anchor="end">{y1:.4}</text>"#,
        ax - 4.0,
        ax - 4.0,
        map(x0, y1).1
    );
    for (i, s) in series.iter().enumerate() {
        let pts: Vec<String> = s
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| {
                let (px, py) = map(x, y);
                format!("{px:.2},{py:.2}")
            })
            .collect();
        let dash = if s.dashed { r#" stroke-dasharray="6,4""# } else { "" };
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" stroke="{}" stroke-width="1.5" fill="none"{dash}/>"#,
            pts.join(" "),
            s.color
        );
        let ly = MARGIN + 16.0 * i as f64;
        let _ = writeln!(
            svg,
            r#"<line x1="{:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{}" stroke-width="1.5"{dash}/><text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="12">{}</text>"#,
            WIDTH - MARGIN - 120.0,
            WIDTH - MARGIN - 96.0,
            s.color,
            WIDTH - MARGIN - 90.0,
            ly + 4.0,
            s.label
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Writes trajectory series (odometry only, GP-SLAM, and ground truth when
/// given), the cost trace, the field magnitude of the magnetometer records,
/// and SVG overlays of the trajectories and the cost trace. Returns the paths
/// written.
pub fn emit_plots(solution: &Solution, truth: Option<&[Vector3<f64>]>, mag: &[MagRecord], dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let times: Vec<f64> = solution.states.iter().map(|s| s.t).collect();
    let odometry: Vec<Vector3<f64>> = solution.initial_states.iter().map(|s| s.p).collect();
    let slam = solution.positions();

    let mut series = Vec::new();
    for (name, label, color, dashed, pos) in [
        ("trajectory_odometry.csv", "odometry", "#00bcd4", true, Some(&odometry[..])),
        ("trajectory_slam.csv", "GP-SLAM", "#d32f2f", false, Some(&slam[..])),
        ("trajectory_truth.csv", "truth", "#000000", false, truth),
    ] {
        let Some(pos) = pos else { continue };
        let path = dir.join(name);
        write_positions(&path, &times, pos)?;
        written.push(path);
        series.push(Series {
            label,
            color,
            dashed,
            points: pos.iter().map(|p| (p.x, p.y)).collect(),
        });
    }

    let path = dir.join("cost_trace.csv");
    io::write_cost_trace(&solution.cost_trace, BufWriter::new(File::create(&path)?))?;
    written.push(path);

    let path = dir.join("field_magnitude.csv");
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(&path)?));
    w.write_record(["t", "magnitude"])?;
    for m in mag {
        w.write_record([m.t.to_string(), m.y.norm().to_string()])?;
    }
    w.flush()?;
    written.push(path);

    let path = dir.join("trajectory.svg");
    let mut f = BufWriter::new(File::create(&path)?);
    f.write_all(render_svg("Trajectory", &series, true).as_bytes())?;
    f.flush()?;
    written.push(path);

    let cost = Series {
        label: "cost",
        color: "#1565c0",
        dashed: false,
        points: solution.cost_trace.iter().enumerate().map(|(i, c)| (i as f64, *c)).collect(),
    };
    let path = dir.join("cost_trace.svg");
    let mut f = BufWriter::new(File::create(&path)?);
    f.write_all(render_svg("Cost per iteration", &[cost], false).as_bytes())?;
    f.flush()?;
    written.push(path);
    Ok(written)
}

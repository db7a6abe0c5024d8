//! Experiment recipes: parameter studies over simulated scenarios, ingestion
//! of recorded logs, and export of solutions and plot data.

mod config;
mod plots;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use ini::Ini;
use nalgebra::DMatrix;
use rayon::prelude::*;

pub use config::{write_manifest, ExperimentConfig, SolverConfig, StudyConfig, StudyKind};
pub use plots::emit_plots;

use crate::error::{Error, Result};
use crate::gpr::MapEstimate;
use crate::io;
use crate::kernels::{Hyperparams, Kernel, KernelFamily};
use crate::simulator::{build_scenario, Scenario, ScenarioConfig};
use crate::slam::{align, evaluate, recover_biases, solve, Problem, Solution};

/// One (parameter, seed) cell of a study.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyRow {
    /// Swept value; `None` for single runs.
    pub param: Option<f64>,
    pub seed: u64,
    pub rmse_before: f64,
    pub rmse_after: f64,
    pub max_before: f64,
    pub max_after: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub param: Option<f64>,
    pub runs: usize,
    pub converged: usize,
    pub rmse_before: f64,
    pub max_before: f64,
    pub rmse_after: f64,
    pub max_after: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyResults {
    pub kind: StudyKind,
    /// Ordered by parameter (as configured), then seed.
    pub rows: Vec<StudyRow>,
}

/// Median of the finite entries; NaN when there are none.
pub fn median(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.into_iter().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn fmt_param(p: Option<f64>) -> String {
    p.map(|v| v.to_string()).unwrap_or_default()
}

impl StudyResults {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "study", "param", "seed", "rmse_before", "rmse_after", "max_before", "max_after", "iterations", "converged",
        ])?;
        for r in &self.rows {
            w.write_record([
                self.kind.to_string(),
                fmt_param(r.param),
                r.seed.to_string(),
                r.rmse_before.to_string(),
                r.rmse_after.to_string(),
                r.max_before.to_string(),
                r.max_after.to_string(),
                r.iterations.to_string(),
                r.converged.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Seed medians per parameter value, in configured order.
    pub fn summary(&self) -> Vec<SummaryRow> {
        let mut params: Vec<Option<f64>> = Vec::new();
        for r in &self.rows {
            if !params.iter().any(|p| fmt_param(*p) == fmt_param(r.param)) {
                params.push(r.param);
            }
        }
        params
            .into_iter()
            .map(|p| {
                let cell: Vec<&StudyRow> = self.rows.iter().filter(|r| fmt_param(r.param) == fmt_param(p)).collect();
                SummaryRow {
                    param: p,
                    runs: cell.len(),
                    converged: cell.iter().filter(|r| r.converged).count(),
                    rmse_before: median(cell.iter().map(|r| r.rmse_before)),
                    max_before: median(cell.iter().map(|r| r.max_before)),
                    rmse_after: median(cell.iter().map(|r| r.rmse_after)),
                    max_after: median(cell.iter().map(|r| r.max_after)),
                }
            })
            .collect()
    }

    pub fn write_summary<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["param", "runs", "converged", "rmse_before", "max_before", "rmse_after", "max_after"])?;
        for s in self.summary() {
            w.write_record([
                fmt_param(s.param),
                s.runs.to_string(),
                s.converged.to_string(),
                s.rmse_before.to_string(),
                s.max_before.to_string(),
                s.rmse_after.to_string(),
                s.max_after.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Plain-text table with a "Before SLAM" row followed by one "After SLAM"
    /// row per parameter value (RMSE and max error in metres).
    pub fn render_table(&self) -> String {
        let summary = self.summary();
        let label = self.kind.parameter_label();
        let mut rows: Vec<(String, f64, f64)> = Vec::new();
        let per_param_before = self.kind == StudyKind::OdometryNoise;
        if !per_param_before {
            rows.push((
                "Before SLAM".into(),
                median(self.rows.iter().map(|r| r.rmse_before)),
                median(self.rows.iter().map(|r| r.max_before)),
            ));
        }
        for s in &summary {
            let name = match s.param {
                Some(v) => format!("{label} = {v}"),
                None => String::new(),
            };
            if per_param_before {
                rows.push((format!("Before SLAM, {name}"), s.rmse_before, s.max_before));
            }
            let after = if name.is_empty() { "After SLAM".to_string() } else { format!("After SLAM, {name}") };
            rows.push((after, s.rmse_after, s.max_after));
        }
        let width = rows.iter().map(|r| r.0.len()).max().unwrap_or(0).max(10);
        let mut out = format!("{:width$}  {:>10}  {:>14}\n", "", "RMSE [m]", "Max Error [m]");
        for (name, rmse, max) in rows {
            out.push_str(&format!("{name:width$}  {rmse:>10.4}  {max:>14.4}\n"));
        }
        out
    }
}

/// Scenario and solver settings for one study cell.
pub fn cell_config(cfg: &ExperimentConfig, param: Option<f64>, seed_offset: u64) -> (ScenarioConfig, SolverConfig) {
    let mut sc = cfg.scenario.clone();
    let mut sv = cfg.solver.clone();
    sc.seed = sc.seed.wrapping_add(seed_offset);
    if let Some(v) = param {
        match cfg.study.kind {
            StudyKind::SigmaFSweep => {
                sc.hyper.sigma_f = v;
                sv.sigma_f = Some(v);
            }
            StudyKind::WrongSigmaF => sv.sigma_f = Some(v),
            StudyKind::LSweep => {
                sc.hyper.length_scale = v;
                sv.length_scale = Some(v);
            }
            StudyKind::WrongL => sv.length_scale = Some(v),
            StudyKind::OdometryNoise => sc.odom_sigma = v,
            StudyKind::SingleRun => {}
        }
    }
    (sc, sv)
}

fn run_cell(cfg: &ExperimentConfig, param: Option<f64>, seed_offset: u64) -> Result<StudyRow> {
    let (sc_cfg, solver) = cell_config(cfg, param, seed_offset);
    let scenario = build_scenario(&sc_cfg)?;
    let problem = solver.problem(scenario.odometry.clone(), scenario.mag.clone(), &sc_cfg)?;
    let truth = scenario.truth_positions();
    let dead_reckoned: Vec<_> = problem.prepare()?.dead_reckoned().iter().map(|s| s.p).collect();
    let before = evaluate(&dead_reckoned, &truth)?;
    let (after, iterations, converged) = match solve(&problem) {
        Ok(sol) => (evaluate(&sol.positions(), &truth)?, sol.iterations, sol.converged),
        Err(e) if e.is_input_error() => return Err(e),
        Err(_) => (
            crate::slam::ErrorMetrics {
                rmse: f64::NAN,
                max_error: f64::NAN,
            },
            0,
            false,
        ),
    };
    Ok(StudyRow {
        param,
        seed: sc_cfg.seed,
        rmse_before: before.rmse,
        rmse_after: after.rmse,
        max_before: before.max_error,
        max_after: after.max_error,
        iterations,
        converged,
    })
}

/// Runs every (parameter, seed) cell. Numerical solver failures become rows
/// with `converged = false` and NaN errors; configuration errors abort.
pub fn run_study(cfg: &ExperimentConfig) -> Result<StudyResults> {
    let params: Vec<Option<f64>> = match cfg.study.kind {
        StudyKind::SingleRun => vec![None],
        _ => cfg.study.values.iter().copied().map(Some).collect(),
    };
    let cells: Vec<(Option<f64>, u64)> = params
        .iter()
        .flat_map(|p| (0..cfg.study.seeds as u64).map(move |s| (*p, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.study.workers)
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let rows = pool.install(|| {
        cells
            .par_iter()
            .map(|(p, s)| run_cell(cfg, *p, *s))
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(StudyResults {
        kind: cfg.study.kind,
        rows,
    })
}

/// Writes `results.csv` and `summary.csv` into `dir`.
pub fn write_study(results: &StudyResults, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    results.write_csv(BufWriter::new(File::create(dir.join("results.csv"))?))?;
    results.write_summary(BufWriter::new(File::create(dir.join("summary.csv"))?))?;
    Ok(())
}

/// Writes `imu.csv`, `mag.csv`, `truth.csv` and `manifest.ini` into `dir`.
pub fn export_scenario(scenario: &Scenario, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    io::write_imu(&scenario.odometry, BufWriter::new(File::create(dir.join("imu.csv"))?))?;
    io::write_mag(&scenario.mag, BufWriter::new(File::create(dir.join("mag.csv"))?))?;
    io::write_truth(&scenario.truth_states, BufWriter::new(File::create(dir.join("truth.csv"))?))?;
    let mut manifest = BufWriter::new(File::create(dir.join("manifest.ini"))?);
    write_manifest(&scenario.config, &mut manifest)?;
    manifest.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AlignmentStats {
    pub imu_records: usize,
    pub epochs: usize,
    pub mag_records: usize,
    pub matched: usize,
    pub dropped: usize,
    pub field_nodes: usize,
}

#[derive(Debug, Clone)]
pub struct Ingested {
    pub problem: Problem,
    pub stats: AlignmentStats,
}

/// Reads IMU and magnetometer CSV logs and assembles a time-aligned problem
/// with the noise settings of `cfg`.
pub fn ingest_logs(imu_csv: &Path, mag_csv: &Path, cfg: &ExperimentConfig) -> Result<Ingested> {
    let imu = io::read_imu(imu_csv)?;
    let mag = io::read_mag(mag_csv)?;
    if imu.is_empty() {
        return Err(Error::InvalidInput(format!("{}: no IMU records", imu_csv.display())));
    }
    let alignment = align(&imu, &mag)?;
    let stats = AlignmentStats {
        imu_records: imu.len(),
        epochs: imu.len() + 1,
        mag_records: mag.len(),
        matched: alignment.matched.len(),
        dropped: alignment.dropped,
        field_nodes: alignment.node_epochs.len(),
    };
    let problem = cfg.solver.problem(imu, mag, &cfg.scenario)?;
    Ok(Ingested { problem, stats })
}

/// Writes `trajectory.csv`, `cost.csv`, `bias.csv`, `map_train.csv` and
/// `solution.ini` into `dir`.
pub fn export_solution(solution: &Solution, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    io::write_trajectory(&solution.states, BufWriter::new(File::create(dir.join("trajectory.csv"))?))?;
    io::write_cost_trace(&solution.cost_trace, BufWriter::new(File::create(dir.join("cost.csv"))?))?;
    io::write_bias_report(&recover_biases(solution), BufWriter::new(File::create(dir.join("bias.csv"))?))?;
    io::write_map_train(&solution.map, BufWriter::new(File::create(dir.join("map_train.csv"))?))?;

    let mut ini = Ini::new();
    let k = solution.map.kernel();
    ini.with_section(Some("map"))
        .set("kernel", k.family.to_string())
        .set("sigma_f", k.hyper.sigma_f.to_string())
        .set("length_scale", k.hyper.length_scale.to_string())
        .set("input_dim", k.input_dim.to_string());
    ini.with_section(Some("solve"))
        .set("converged", solution.converged.to_string())
        .set("iterations", solution.iterations.to_string())
        .set("final_cost", solution.final_cost().to_string())
        .set("rounds", solution.round_starts.len().to_string());
    let mut out = BufWriter::new(File::create(dir.join("solution.ini"))?);
    ini.write_to(&mut out)?;
    out.flush()?;
    Ok(())
}

/// Rebuilds the field map saved by [`export_solution`].
pub fn load_map(dir: &Path) -> Result<MapEstimate> {
    let path = dir.join("solution.ini");
    let ini = Ini::load_from_file(&path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let get = |key: &str| {
        ini.get_from(Some("map"), key)
            .ok_or_else(|| Error::Config(format!("{}: [map] missing `{key}`", path.display())))
    };
    let parse = |key: &str| -> Result<f64> {
        get(key)?
            .parse()
            .map_err(|_| Error::Config(format!("{}: [map] bad `{key}`", path.display())))
    };
    let family: KernelFamily = get("kernel")?.parse()?;
    let input_dim: usize = get("input_dim")?
        .parse()
        .map_err(|_| Error::Config(format!("{}: [map] bad `input_dim`", path.display())))?;
    let kernel = Kernel::new(family, Hyperparams::new(parse("sigma_f")?, parse("length_scale")?)?, input_dim)?;
    let train = io::read_map_train(&dir.join("map_train.csv"))?;
    let n = train.locations.len();
    let locs: Vec<&[f64]> = train.locations.iter().map(|p| &p[..input_dim]).collect();
    let values = DMatrix::from_fn(n, 3, |i, a| train.values[i][a]);
    let noise = DMatrix::from_fn(n, 3, |i, a| train.noise[i][a]);
    MapEstimate::new(&locs, values, kernel, noise)
}

const MAX_GRID_POINTS: usize = 1_000_000;

/// Parses a query grid `X,Y[,Z]` where each axis is either a constant `v` or
/// an inclusive range `start:end:count`. Points are ordered with X fastest.
pub fn parse_grid(spec: &str) -> Result<Vec<[f64; 3]>> {
    let axes: Vec<Vec<f64>> = spec
        .split(',')
        .map(|axis| {
            let bad = || Error::InvalidInput(format!("grid axis `{axis}`: expected `v` or `start:end:count`"));
            let parts: Vec<&str> = axis.split(':').map(str::trim).collect();
            let num = |s: &str| s.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(bad);
            match parts.as_slice() {
                [v] => Ok(vec![num(v)?]),
                [a, b, n] => {
                    let (a, b) = (num(a)?, num(b)?);
                    let n: usize = n.parse().map_err(|_| bad())?;
                    match n {
                        0 => Err(bad()),
                        1 => Ok(vec![a]),
                        _ => Ok((0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()),
                    }
                }
                _ => Err(bad()),
            }
        })
        .collect::<Result<_>>()?;
    if !(2..=3).contains(&axes.len()) {
        return Err(Error::InvalidInput(format!("grid `{spec}` needs 2 or 3 axes")));
    }
    let zs = axes.get(2).cloned().unwrap_or_else(|| vec![0.0]);
    let total = axes[0].len() * axes[1].len() * zs.len();
    if total > MAX_GRID_POINTS {
        return Err(Error::InvalidInput(format!("grid has {total} points, limit is {MAX_GRID_POINTS}")));
    }
    let mut out = Vec::with_capacity(total);
    for &z in &zs {
        for &y in &axes[1] {
            for &x in &axes[0] {
                out.push([x, y, z]);
            }
        }
    }
    Ok(out)
}

//! `magslam` command-line front end.
//!
//! Exit codes: 0 on success, 1 on input errors (bad arguments, files or
//! configuration), 2 on solver failures.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use magslam::gpr::write_map_grid;
use magslam::harness::{
    emit_plots, export_scenario, export_solution, ingest_logs, load_map, parse_grid, run_study, write_study,
    ExperimentConfig,
};
use magslam::simulator::build_scenario;
use magslam::slam::{evaluate, solve};
use magslam::{io, Error, Result};
use nalgebra::Vector3;

#[derive(Debug, Parser)]
#[command(name = "magslam", version, about = "Batch GP-SLAM with magnetic field maps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic scenario and write imu.csv, mag.csv, truth.csv and manifest.ini.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve a problem from IMU and magnetometer logs.
    Slam {
        #[arg(long)]
        imu: PathBuf,
        #[arg(long)]
        mag: PathBuf,
        /// Ground-truth positions (`t,px,py[,pz]`) for error reporting and plots.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the parameter study described by the config's [study] section.
    Study {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict the field map of a saved solution on a grid.
    PredictMap {
        /// Directory written by `slam`.
        #[arg(long)]
        solution: PathBuf,
        /// `X,Y[,Z]`, each axis a constant `v` or a range `start:end:count`.
        #[arg(long)]
        grid: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Position RMSE and maximum error of an estimate against ground truth.
    Eval {
        #[arg(long)]
        est: PathBuf,
        #[arg(long)]
        truth: PathBuf,
    },
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::load(path).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn positions(path: &Path) -> Result<Vec<Vector3<f64>>> {
    Ok(io::read_positions(path)?.into_iter().map(|(_, p)| p).collect())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { config, out } => {
            let cfg = load_config(&config)?;
            let scenario = build_scenario(&cfg.scenario)?;
            export_scenario(&scenario, &out)?;
            println!(
                "wrote {} epochs ({} magnetometer records) to {}",
                scenario.truth_states.len(),
                scenario.mag.len(),
                out.display()
            );
        }
        Command::Slam {
            imu,
            mag,
            truth,
            config,
            out,
        } => {
            let cfg = load_config(&config)?;
            let ingested = ingest_logs(&imu, &mag, &cfg)?;
            let s = ingested.stats;
            println!(
                "epochs {}  magnetometer records {}  matched {}  dropped {}  field nodes {}",
                s.epochs, s.mag_records, s.matched, s.dropped, s.field_nodes
            );
            let truth = truth.as_deref().map(positions).transpose()?;
            let solution = solve(&ingested.problem)?;
            export_solution(&solution, &out)?;
            emit_plots(&solution, truth.as_deref(), &ingested.problem.mag, &out)?;
            println!(
                "iterations {}  converged {}  final cost {}  sigma_f {}  l {}",
                solution.iterations,
                solution.converged,
                solution.final_cost(),
                solution.hypers.sigma_f,
                solution.hypers.length_scale
            );
            if let Some(truth) = truth {
                let initial: Vec<_> = solution.initial_states.iter().map(|s| s.p).collect();
                let before = evaluate(&initial, &truth)?;
                let after = evaluate(&solution.positions(), &truth)?;
                println!("before: rmse {:.6} m  max {:.6} m", before.rmse, before.max_error);
                println!("after:  rmse {:.6} m  max {:.6} m", after.rmse, after.max_error);
            }
        }
        Command::Study { config, out } => {
            let cfg = load_config(&config)?;
            let results = run_study(&cfg)?;
            write_study(&results, &out)?;
            print!("{}", results.render_table());
        }
        Command::PredictMap { solution, grid, out } => {
            let map = load_map(&solution)?;
            let grid = parse_grid(&grid)?;
            write_map_grid(&map, &grid, BufWriter::new(File::create(&out)?))?;
            println!("wrote {} grid points to {}", grid.len(), out.display());
        }
        Command::Eval { est, truth } => {
            let m = evaluate(&positions(&est)?, &positions(&truth)?)?;
            println!("rmse,max_error");
            println!("{},{}", m.rmse, m.max_error);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_input_error() { 1 } else { 2 })
        }
    }
}

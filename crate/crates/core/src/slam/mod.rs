//! Batch MAP estimation of trajectory, sensor biases and magnetic field.
//!
//! The objective is the sum of squared whitened residuals (odometry, bias
//! random walk, magnetometer, optional priors) plus the GP prior on the
//! latent field values, `mᵀK⁻¹m`, realized as the residual `L⁻¹m`. It is
//! minimized by Levenberg–Marquardt with the hyperparameters held fixed; in
//! [`HyperMode::Estimated`] the LM solve alternates with a marginal
//! likelihood fit of `(σ_f, l)` at the current trajectory.
//!
//! Two state parameterizations are supported. [`Mode::Full`] carries
//! position, velocity, orientation and both biases at every epoch.
//! [`Mode::Planar`] fixes orientation and height and estimates 2-D
//! positions plus a slowly varying odometry displacement bias.

mod lm;
mod residuals;

use std::fmt;

use nalgebra::{DMatrix, Vector2, Vector3};

pub use lm::{LmOptions, LmReport};
pub use residuals::{Estimate, Linearization, Prepared, SparseJacobian};

use crate::error::{Error, Result};
use crate::gpr::{fit_hypers, MapEstimate};
use crate::kernels::{Hyperparams, Kernel, KernelFamily};
use crate::strapdown::{check_sorted, dead_reckon, StrapdownConfig};
use crate::types::{ImuRecord, MagRecord, NavState, NoiseParams};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanarParams {
    /// Random-walk step of the displacement bias, metres per step.
    pub bias_walk_sigma: f64,
    /// Prior standard deviation of the initial displacement bias, metres.
    pub bias_prior_sigma: f64,
}

impl Default for PlanarParams {
    fn default() -> Self {
        Self {
            bias_walk_sigma: 1e-5,
            bias_prior_sigma: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mode {
    Planar(PlanarParams),
    Full,
}

/// Per-step odometry noise. Planar mode only uses `position`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OdometryNoise {
    pub position: f64,
    pub velocity: f64,
    pub attitude: f64,
}

impl Default for OdometryNoise {
    fn default() -> Self {
        Self {
            position: 5e-4,
            velocity: 1e-3,
            attitude: 1e-3,
        }
    }
}

/// Standard deviations of the prior on the first state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitialPrior {
    pub position: f64,
    pub velocity: f64,
    pub attitude: f64,
    pub gyro_bias: f64,
    pub accel_bias: f64,
}

impl Default for InitialPrior {
    fn default() -> Self {
        Self {
            position: 1e-6,
            velocity: 1e-3,
            attitude: 1e-3,
            gyro_bias: 1e-2,
            accel_bias: 1e-1,
        }
    }
}

/// Zero-mean position prior of standard deviation `radius / √weight` on
/// every epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZeroPrior {
    pub radius: f64,
    pub weight: f64,
}

impl Default for ZeroPrior {
    fn default() -> Self {
        Self {
            radius: 1.0,
            weight: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HyperMode {
    Fixed(Hyperparams),
    Estimated(Hyperparams),
}

impl HyperMode {
    pub fn initial(&self) -> Hyperparams {
        match *self {
            HyperMode::Fixed(h) | HyperMode::Estimated(h) => h,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub lm: LmOptions,
    /// Maximum number of LM / hyperparameter alternations.
    pub max_hyper_rounds: usize,
    /// Alternation stops when neither log-hyperparameter moves more than this.
    pub hyper_tol: f64,
    /// Keep `log|K|` in the objective as a function of the positions.
    pub include_logdet: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            lm: LmOptions::default(),
            max_hyper_rounds: 20,
            hyper_tol: 1e-4,
            include_logdet: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Problem {
    pub imu: Vec<ImuRecord>,
    pub mag: Vec<MagRecord>,
    pub family: KernelFamily,
    pub hyper_mode: HyperMode,
    pub mode: Mode,
    pub initial_state: NavState,
    pub initial_prior: Option<InitialPrior>,
    pub zero_prior: Option<ZeroPrior>,
    pub noise: NoiseParams,
    pub odometry: OdometryNoise,
    pub options: SolverOptions,
}

impl Problem {
    /// Planar problem with default priors and options.
    pub fn planar(imu: Vec<ImuRecord>, mag: Vec<MagRecord>, family: KernelFamily, hyper_mode: HyperMode) -> Self {
        Self {
            imu,
            mag,
            family,
            hyper_mode,
            mode: Mode::Planar(PlanarParams::default()),
            initial_state: NavState::default(),
            initial_prior: Some(InitialPrior::default()),
            zero_prior: None,
            noise: NoiseParams::default(),
            odometry: OdometryNoise::default(),
            options: SolverOptions::default(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.imu.is_empty() {
            return Err(Error::InvalidInput("at least one IMU record (two epochs) is required".into()));
        }
        for r in &self.imu {
            r.check()?;
        }
        check_sorted(self.imu.iter().map(|r| r.t))?;
        let positive = |v: f64, what: &str| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidInput(format!("{what} must be positive, got {v}")))
            }
        };
        positive(self.odometry.position, "odometry position sigma")?;
        match self.mode {
            Mode::Planar(p) => {
                positive(p.bias_walk_sigma, "bias walk sigma")?;
                positive(p.bias_prior_sigma, "bias prior sigma")?;
            }
            Mode::Full => {
                positive(self.odometry.velocity, "odometry velocity sigma")?;
                positive(self.odometry.attitude, "odometry attitude sigma")?;
                positive(self.noise.w_gyro_sigma, "gyro bias walk sigma")?;
                positive(self.noise.w_accel_sigma, "accel bias walk sigma")?;
            }
        }
        if let Some(p) = self.initial_prior {
            positive(p.position, "initial position sigma")?;
            if self.mode == Mode::Full {
                positive(p.velocity, "initial velocity sigma")?;
                positive(p.attitude, "initial attitude sigma")?;
                positive(p.gyro_bias, "initial gyro bias sigma")?;
                positive(p.accel_bias, "initial accel bias sigma")?;
            }
        }
        if let Some(z) = self.zero_prior {
            positive(z.radius, "zero prior radius")?;
            positive(z.weight, "zero prior weight")?;
        }
        self.hyper_mode.initial().validate()
    }

    /// Validates, aligns the magnetometer to IMU epochs and dead-reckons.
    pub fn prepare(&self) -> Result<Prepared> {
        self.validate()?;
        let alignment = align(&self.imu, &self.mag)?;
        let cfg = StrapdownConfig {
            gravity: self.noise.gravity,
            initial_state: self.initial_state,
        };
        let dead_reckoned = dead_reckon(&self.imu, &cfg)?;
        let displacements = dead_reckoned
            .windows(2)
            .map(|w| Vector2::new(w[1].p.x - w[0].p.x, w[1].p.y - w[0].p.y))
            .collect();
        Ok(Prepared {
            mode: self.mode,
            records: self.imu.clone(),
            displacements,
            dead_reckoned,
            alignment,
            initial_state: self.initial_state,
            initial_prior: self.initial_prior,
            zero_prior: self.zero_prior,
            gravity: self.noise.gravity,
            w_gyro_sigma: self.noise.w_gyro_sigma,
            w_accel_sigma: self.noise.w_accel_sigma,
            odometry: self.odometry,
            include_logdet: self.options.include_logdet,
        })
    }

    pub fn kernel(&self, hyper: Hyperparams) -> Result<Kernel> {
        Kernel::new(self.family, hyper, 3)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchedMag {
    /// Index into the magnetometer records.
    pub record: usize,
    pub epoch: usize,
    pub node: usize,
    pub y: Vector3<f64>,
    pub sigma: Vector3<f64>,
}

/// Assignment of magnetometer records to IMU epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    pub epoch_times: Vec<f64>,
    /// Epoch of each field node, increasing.
    pub node_epochs: Vec<usize>,
    pub matched: Vec<MatchedMag>,
    pub dropped: usize,
}

/// Matches each magnetometer record to the nearest IMU epoch, dropping
/// records further than half an integration period from every epoch.
pub fn align(imu: &[ImuRecord], mag: &[MagRecord]) -> Result<Alignment> {
    if mag.is_empty() {
        return Err(Error::NoMagnetic);
    }
    let Some(last) = imu.last() else {
        return Err(Error::InvalidInput("no IMU records".into()));
    };
    for m in mag {
        m.check()?;
    }
    check_sorted(mag.iter().map(|m| m.t))?;

    let mut epoch_times: Vec<f64> = imu.iter().map(|r| r.t).collect();
    epoch_times.push(last.t + last.period);
    let half = |e: usize| 0.5 * imu[e.min(imu.len() - 1)].period;

    let mut epoch_of = Vec::with_capacity(mag.len());
    for m in mag {
        let idx = epoch_times.partition_point(|t| *t < m.t);
        let mut best: Option<(usize, f64)> = None;
        for e in [idx.wrapping_sub(1), idx] {
            if e < epoch_times.len() {
                let dt = (epoch_times[e] - m.t).abs();
                if dt <= half(e) && best.map_or(true, |(_, b)| dt < b) {
                    best = Some((e, dt));
                }
            }
        }
        epoch_of.push(best.map(|(e, _)| e));
    }
    let dropped = epoch_of.iter().filter(|e| e.is_none()).count();
    if dropped == mag.len() {
        return Err(Error::NoOverlap { dropped });
    }

    let mut node_epochs: Vec<usize> = epoch_of.iter().flatten().copied().collect();
    node_epochs.dedup();
    let matched = epoch_of
        .iter()
        .enumerate()
        .filter_map(|(i, e)| {
            e.map(|epoch| MatchedMag {
                record: i,
                epoch,
                node: node_epochs.binary_search(&epoch).expect("node exists"),
                y: mag[i].y,
                sigma: mag[i].sigma,
            })
        })
        .collect();
    Ok(Alignment {
        epoch_times,
        node_epochs,
        matched,
        dropped,
    })
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub states: Vec<NavState>,
    /// Dead-reckoned trajectory the solver started from.
    pub initial_states: Vec<NavState>,
    /// Planar mode only: estimated odometry displacement bias per epoch.
    pub displacement_bias: Vec<Vector2<f64>>,
    pub map: MapEstimate,
    pub hypers: Hyperparams,
    /// Objective after every LM iteration, across all hyperparameter rounds.
    pub cost_trace: Vec<f64>,
    /// Index into `cost_trace` where each hyperparameter round starts.
    pub round_starts: Vec<usize>,
    pub converged: bool,
    pub iterations: usize,
    pub planar: bool,
}

impl Solution {
    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.states.iter().map(|s| s.p).collect()
    }

    pub fn final_cost(&self) -> f64 {
        *self.cost_trace.last().expect("cost trace is never empty")
    }
}

/// Evaluates the stacked residual vector and sparse Jacobian of `problem`
/// at `estimate` for fixed hyperparameters.
pub fn build_residuals(
    problem: &Problem,
    estimate: &Estimate,
    hyper: Hyperparams,
) -> Result<(nalgebra::DVector<f64>, SparseJacobian)> {
    let prep = problem.prepare()?;
    let kernel = problem.kernel(hyper)?;
    let (r, j) = prep.residuals(estimate, &kernel, true, true)?;
    Ok((r, j.expect("Jacobian requested")))
}

pub fn solve(problem: &Problem) -> Result<Solution> {
    let prep = problem.prepare()?;
    solve_prepared(&prep, problem)
}

fn run_lm(prep: &Prepared, est: Estimate, kernel: &Kernel, include_field: bool, opts: &LmOptions) -> Result<LmReport<Estimate>> {
    lm::minimize(
        est,
        |x: &Estimate, want| {
            let lin = prep.linearize(x, kernel, want, include_field)?;
            Ok(lm::Model {
                residuals: lin.residuals,
                jacobian: lin.jacobian.map(|j| j.to_dense()),
                extra: lin.logdet,
                extra_grad: lin.logdet_grad,
            })
        },
        |x, d| prep.retract(x, d),
        opts,
    )
}

fn solve_prepared(prep: &Prepared, problem: &Problem) -> Result<Solution> {
    let opts = &problem.options;
    let mut hyper = problem.hyper_mode.initial();
    let mut est = prep.initial_estimate();

    if problem.zero_prior.is_some() {
        // Pull the dead-reckoned trajectory toward the prior region before
        // the field terms are introduced.
        let kernel = problem.kernel(hyper)?;
        est = run_lm(prep, est, &kernel, false, &opts.lm)?.x;
    }

    let mut cost_trace = Vec::new();
    let mut round_starts = Vec::new();
    let mut iterations = 0;
    let mut converged;
    let mut rounds = 0;
    loop {
        rounds += 1;
        let kernel = problem.kernel(hyper)?;
        let report = run_lm(prep, est, &kernel, true, &opts.lm)?;
        round_starts.push(cost_trace.len());
        cost_trace.extend_from_slice(&report.cost_trace);
        iterations += report.iterations;
        converged = report.converged;
        est = report.x;

        let HyperMode::Estimated(_) = problem.hyper_mode else {
            break;
        };
        let (values, noise) = node_measurements(prep, &est);
        let locs = prep.node_locations(&est);
        let fit = fit_hypers(&locs, &values, &noise, &kernel)?;
        let moved = (fit.hyper.sigma_f.ln() - hyper.sigma_f.ln())
            .abs()
            .max((fit.hyper.length_scale.ln() - hyper.length_scale.ln()).abs());
        if moved < opts.hyper_tol {
            break;
        }
        if rounds >= opts.max_hyper_rounds {
            converged = false;
            break;
        }
        hyper = fit.hyper;
    }

    let kernel = problem.kernel(hyper)?;
    let (_, noise) = node_measurements(prep, &est);
    let values = DMatrix::from_fn(est.field.len(), 3, |i, a| est.field[i][a]);
    let map = MapEstimate::new(&prep.node_locations(&est), values, kernel, noise)?;
    Ok(Solution {
        states: est.states,
        initial_states: prep.dead_reckoned.clone(),
        displacement_bias: est.displacement_bias,
        map,
        hypers: hyper,
        cost_trace,
        round_starts,
        converged,
        iterations,
        planar: matches!(prep.mode, Mode::Planar(_)),
    })
}

/// Magnetometer samples per field node in the local frame, with their
/// standard deviations (combined when several records share a node).
fn node_measurements(prep: &Prepared, est: &Estimate) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = prep.field_nodes();
    let mut sum = DMatrix::<f64>::zeros(n, 3);
    let mut info = DMatrix::<f64>::zeros(n, 3);
    for m in &prep.alignment.matched {
        let y = match prep.mode {
            Mode::Planar(_) => m.y,
            Mode::Full => est.states[m.epoch].q.rotate(&m.y),
        };
        for a in 0..3 {
            let w = 1.0 / (m.sigma[a] * m.sigma[a]);
            sum[(m.node, a)] += w * y[a];
            info[(m.node, a)] += w;
        }
    }
    let values = sum.zip_map(&info, |s: f64, w: f64| s / w);
    let noise = info.map(|w: f64| 1.0 / w.sqrt());
    (values, noise)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorMetrics {
    pub rmse: f64,
    pub max_error: f64,
}

/// Position RMSE and maximum error norm over corresponding epochs.
pub fn evaluate(estimate: &[Vector3<f64>], truth: &[Vector3<f64>]) -> Result<ErrorMetrics> {
    if estimate.len() != truth.len() {
        return Err(Error::InvalidInput(format!(
            "trajectory lengths differ: {} estimated vs {} true epochs",
            estimate.len(),
            truth.len()
        )));
    }
    if estimate.is_empty() {
        return Err(Error::InvalidInput("empty trajectories".into()));
    }
    let errs: Vec<f64> = estimate.iter().zip(truth).map(|(a, b)| (a - b).norm()).collect();
    let rmse = (errs.iter().map(|e| e * e).sum::<f64>() / errs.len() as f64).sqrt();
    let max_error = errs.iter().copied().fold(0.0, f64::max);
    Ok(ErrorMetrics { rmse, max_error })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sensor {
    Gyroscope,
    Accelerometer,
}

impl fmt::Display for Sensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Sensor::Gyroscope => "gyroscope",
            Sensor::Accelerometer => "accelerometer",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiasRow {
    pub sensor: Sensor,
    pub axis: char,
    pub initial: f64,
    pub recovered: f64,
    pub unit: &'static str,
}

/// Initial versus recovered bias per sensor axis, averaged over epochs.
///
/// In planar mode the accelerometer rows carry the odometry displacement
/// bias (metres per step) and the gyroscope rows are zero.
pub fn recover_biases(solution: &Solution) -> Vec<BiasRow> {
    let mean = |v: &mut dyn Iterator<Item = Vector3<f64>>| {
        let (s, n) = v.fold((Vector3::zeros(), 0usize), |(s, n), x| (s + x, n + 1));
        if n == 0 {
            s
        } else {
            s / n as f64
        }
    };
    let (gyro0, gyro1, acc0, acc1, gyro_unit, acc_unit) = if solution.planar {
        let b = mean(&mut solution.displacement_bias.iter().map(|b| Vector3::new(b.x, b.y, 0.0)));
        (Vector3::zeros(), Vector3::zeros(), Vector3::zeros(), b, "rad/s", "m/step")
    } else {
        let first = &solution.initial_states[0];
        (
            first.b_gyro,
            mean(&mut solution.states.iter().map(|s| s.b_gyro)),
            first.b_accel,
            mean(&mut solution.states.iter().map(|s| s.b_accel)),
            "rad/s",
            "m/s^2",
        )
    };
    let mut rows = Vec::with_capacity(6);
    for (sensor, before, after, unit) in [
        (Sensor::Gyroscope, gyro0, gyro1, gyro_unit),
        (Sensor::Accelerometer, acc0, acc1, acc_unit),
    ] {
        for (i, axis) in ['x', 'y', 'z'].into_iter().enumerate() {
            rows.push(BiasRow {
                sensor,
                axis,
                initial: before[i],
                recovered: after[i],
                unit,
            });
        }
    }
    rows
}

//! Strapdown dead reckoning from `(dq, dv)` odometry increments.
//!
//! Bias compensation: `dv` is corrected by `-b_accel * T` before rotation into
//! the local frame, and `dq` is right-composed with `Exp(-b_gyro * T)`.

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::types::{check_vec, ImuRecord, NavState, Quaternion};

const MAX_GRAVITY: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StrapdownConfig {
    pub gravity: Vector3<f64>,
    pub initial_state: NavState,
}

impl Default for StrapdownConfig {
    fn default() -> Self {
        Self {
            gravity: Vector3::zeros(),
            initial_state: NavState::default(),
        }
    }
}

impl StrapdownConfig {
    pub fn validate(&self) -> Result<()> {
        check_vec(&self.gravity, "gravity")?;
        let g = self.gravity.norm();
        if g > MAX_GRAVITY {
            return Err(Error::InvalidInput(format!(
                "|gravity| = {g} m/s² outside [0, {MAX_GRAVITY}]"
            )));
        }
        self.initial_state.check_finite()
    }
}

/// Gyro-bias-corrected rotation increment.
pub fn corrected_dq(rec: &ImuRecord, b_gyro: &Vector3<f64>) -> Quaternion {
    rec.dq
        .compose(&Quaternion::exp(&(-b_gyro * rec.period)))
}

/// One step of the strapdown recursion. Biases are carried unchanged.
pub fn propagate(state: &NavState, rec: &ImuRecord, cfg: &StrapdownConfig) -> Result<NavState> {
    state.check_finite()?;
    rec.check()?;
    check_vec(&cfg.gravity, "gravity")?;

    let period = rec.period;
    let rot = state.q.to_rotmat();
    let dv = rec.dv - state.b_accel * period;
    let dv_local = rot * dv;

    Ok(NavState {
        t: state.t + period,
        p: state.p + state.v * period + dv_local * (0.5 * period) + cfg.gravity * (0.5 * period * period),
        v: state.v + dv_local + cfg.gravity * period,
        q: state.q.compose(&corrected_dq(rec, &state.b_gyro)),
        b_gyro: state.b_gyro,
        b_accel: state.b_accel,
    })
}

/// Random-walk bias step: `bias + w_sigma * draw`.
pub fn propagate_bias(bias: &Vector3<f64>, w_sigma: f64, draw: &Vector3<f64>) -> Vector3<f64> {
    bias + draw * w_sigma
}

/// Folds [`propagate`] over `records`, returning `records.len() + 1` states.
pub fn dead_reckon(records: &[ImuRecord], cfg: &StrapdownConfig) -> Result<Vec<NavState>> {
    cfg.validate()?;
    check_sorted(records.iter().map(|r| r.t))?;

    let mut states = Vec::with_capacity(records.len() + 1);
    states.push(cfg.initial_state);
    for rec in records {
        let next = propagate(states.last().unwrap(), rec, cfg)?;
        states.push(next);
    }
    Ok(states)
}

pub(crate) fn check_sorted(times: impl Iterator<Item = f64>) -> Result<()> {
    let mut previous = f64::NEG_INFINITY;
    for (index, t) in times.enumerate() {
        if t <= previous {
            return Err(Error::Unsorted { index, t, previous });
        }
        previous = t;
    }
    Ok(())
}

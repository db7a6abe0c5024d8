//! Batch SLAM with a Gaussian-process magnetic field map.
//!
//! IMU odometry increments are integrated by [`strapdown`], the field is
//! modelled by [`gpr`] with the covariance functions in [`kernels`], and
//! [`slam`] jointly estimates trajectory, biases and field values by
//! nonlinear least squares. [`simulator`] and [`harness`] generate synthetic
//! scenarios and run parameter studies.

pub mod error;
pub mod gpr;
pub mod harness;
pub mod io;
pub mod kernels;
pub mod simulator;
pub mod slam;
pub mod strapdown;
pub mod types;

pub use error::{Error, Result};
pub use kernels::{Hyperparams, Kernel, KernelFamily};
pub use types::{ImuRecord, MagRecord, NavState, NoiseParams, Quaternion};

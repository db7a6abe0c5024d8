//! Geometric primitives and dataset records shared by every module.
//!
//! Quaternions are Hamilton, scalar-first. A [`NavState`] orientation maps
//! sensor-frame vectors into the local frame, so `R(q) * v_sensor = v_local`
//! and the strapdown update right-multiplies the body increment: `q ⊗ dq`.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

pub type RotationMatrix = Matrix3<f64>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Default for Quaternion {
    fn default() -> Self {
        Self::identity()
    }
}

impl Quaternion {
    pub const fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self { w, x, y, z }
    }

    pub const fn identity() -> Self {
        Self::new(1.0, 0.0, 0.0, 0.0)
    }

    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        let n = axis.norm();
        if n == 0.0 {
            return Self::identity();
        }
        Self::exp(&(axis * (angle / n)))
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn normalize(&self) -> Self {
        let n = self.norm();
        Self::new(self.w / n, self.x / n, self.y / n, self.z / n)
    }

    pub fn conjugate(&self) -> Self {
        Self::new(self.w, -self.x, -self.y, -self.z)
    }

    pub fn vector(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    pub fn is_finite(&self) -> bool {
        self.w.is_finite() && self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    /// Raw Hamilton product without renormalization.
    pub fn mul_raw(&self, b: &Quaternion) -> Self {
        let a = self;
        Self::new(
            a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        )
    }

    /// `self ⊗ b`, renormalized.
    pub fn compose(&self, b: &Quaternion) -> Self {
        self.mul_raw(b).normalize()
    }

    pub fn to_rotmat(&self) -> RotationMatrix {
        let Quaternion { w, x, y, z } = *self;
        Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        )
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.to_rotmat() * v
    }

    /// Exponential map from a rotation vector.
    pub fn exp(phi: &Vector3<f64>) -> Self {
        let theta = phi.norm();
        let half = 0.5 * theta;
        let (w, k) = if theta < 1e-8 {
            (1.0 - theta * theta / 8.0, 0.5 - theta * theta / 48.0)
        } else {
            (half.cos(), half.sin() / theta)
        };
        Self::new(w, k * phi.x, k * phi.y, k * phi.z).normalize()
    }

    /// Logarithm map to a rotation vector with angle in `[0, π]`.
    pub fn log(&self) -> Vector3<f64> {
        let q = if self.w < 0.0 {
            Self::new(-self.w, -self.x, -self.y, -self.z)
        } else {
            *self
        };
        let v = q.vector();
        let s = v.norm();
        if s < 1e-8 {
            // atan2(s, w) / s ≈ (1 - s²/(3w²)) / w
            let w = q.w;
            return v * (2.0 / w * (1.0 - s * s / (3.0 * w * w)));
        }
        let theta = 2.0 * s.atan2(q.w);
        v * (theta / s)
    }
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Right Jacobian of SO(3): `Exp(φ + δ) ≈ Exp(φ) Exp(J_r(φ) δ)`.
pub fn right_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = skew(phi);
    let (a, b) = if theta < 1e-4 {
        let t2 = theta * theta;
        (0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0)
    } else {
        let t2 = theta * theta;
        ((1.0 - theta.cos()) / t2, (theta - theta.sin()) / (t2 * theta))
    };
    Matrix3::identity() - k * a + k * k * b
}

pub fn right_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = skew(phi);
    let c = if theta < 1e-4 {
        let t2 = theta * theta;
        1.0 / 12.0 + t2 / 720.0
    } else {
        1.0 / (theta * theta) - (1.0 + theta.cos()) / (2.0 * theta * theta.sin())
    };
    Matrix3::identity() + k * 0.5 + k * k * c
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NavState {
    pub t: f64,
    pub p: Vector3<f64>,
    pub v: Vector3<f64>,
    pub q: Quaternion,
    pub b_gyro: Vector3<f64>,
    pub b_accel: Vector3<f64>,
}

impl Default for NavState {
    fn default() -> Self {
        Self::at_rest(0.0, Vector3::zeros())
    }
}

impl NavState {
    pub fn at_rest(t: f64, p: Vector3<f64>) -> Self {
        Self {
            t,
            p,
            v: Vector3::zeros(),
            q: Quaternion::identity(),
            b_gyro: Vector3::zeros(),
            b_accel: Vector3::zeros(),
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        if !self.t.is_finite() {
            return Err(Error::NonFinite("state.t"));
        }
        check_vec(&self.p, "state.p")?;
        check_vec(&self.v, "state.v")?;
        if !self.q.is_finite() {
            return Err(Error::NonFinite("state.q"));
        }
        check_vec(&self.b_gyro, "state.b_gyro")?;
        check_vec(&self.b_accel, "state.b_accel")
    }
}

pub(crate) fn check_vec(v: &Vector3<f64>, field: &'static str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(field))
    }
}

/// One odometry increment reported by the IMU over `period` seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuRecord {
    /// Start of the integration interval.
    pub t: f64,
    pub dq: Quaternion,
    /// Velocity increment in the sensor frame, m/s.
    pub dv: Vector3<f64>,
    pub period: f64,
}

impl ImuRecord {
    pub fn check(&self) -> Result<()> {
        if !self.t.is_finite() {
            return Err(Error::NonFinite("imu.t"));
        }
        if !self.dq.is_finite() {
            return Err(Error::NonFinite("imu.dq"));
        }
        check_vec(&self.dv, "imu.dv")?;
        if !self.period.is_finite() {
            return Err(Error::NonFinite("imu.T"));
        }
        if self.period <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "integration period must be positive, got {}",
                self.period
            )));
        }
        Ok(())
    }
}

/// Tri-axial field sample in the sensor frame, arbitrary units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MagRecord {
    pub t: f64,
    pub y: Vector3<f64>,
    /// Per-axis measurement standard deviation.
    pub sigma: Vector3<f64>,
}

impl MagRecord {
    pub fn check(&self) -> Result<()> {
        if !self.t.is_finite() {
            return Err(Error::NonFinite("mag.t"));
        }
        check_vec(&self.y, "mag.y")?;
        check_vec(&self.sigma, "mag.sigma")?;
        if self.sigma.iter().any(|s| *s <= 0.0) {
            return Err(Error::InvalidInput(
                "magnetometer sigma must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseParams {
    /// Gyro bias random-walk driving noise, rad/s per √step.
    pub w_gyro_sigma: f64,
    /// Accel bias random-walk driving noise, m/s² per √step.
    pub w_accel_sigma: f64,
    pub gravity: Vector3<f64>,
}

impl Default for NoiseParams {
    fn default() -> Self {
        Self {
            w_gyro_sigma: 1e-5,
            w_accel_sigma: 1e-4,
            gravity: Vector3::zeros(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    fn unit_quat() -> impl Strategy<Value = Quaternion> {
        (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64)
            .prop_filter("non-degenerate", |(w, x, y, z)| w * w + x * x + y * y + z * z > 1e-3)
            .prop_map(|(w, x, y, z)| Quaternion::new(w, x, y, z).normalize())
    }

    #[test]
    fn identity_composition() {
        let q = Quaternion::new(0.3, -0.2, 0.9, 0.1).normalize();
        let r = Quaternion::identity().compose(&q);
        assert!((r.w - q.w).abs() < 1e-15);
        assert!((r.x - q.x).abs() < 1e-15);
        assert!((r.y - q.y).abs() < 1e-15);
        assert!((r.z - q.z).abs() < 1e-15);
    }

    #[test]
    fn inverse_composition() {
        let q = Quaternion::new(0.3, -0.2, 0.9, 0.1).normalize();
        let r = q.compose(&q.conjugate());
        assert_relative_eq!(r.w, 1.0, epsilon = 1e-15);
        assert!(r.vector().norm() < 1e-15);
    }

    #[test]
    fn quarter_turns_about_z_add() {
        let z = Vector3::z();
        let q90 = Quaternion::from_axis_angle(&z, FRAC_PI_2);
        let q180 = q90.compose(&q90);
        let expected = Quaternion::from_axis_angle(&z, 2.0 * FRAC_PI_2);
        assert_relative_eq!(q180.w, expected.w, epsilon = 1e-15);
        assert_relative_eq!(q180.z, expected.z, epsilon = 1e-15);
        let r = q180.to_rotmat();
        assert_relative_eq!(r, Matrix3::from_diagonal(&Vector3::new(-1.0, -1.0, 1.0)), epsilon = 1e-15);
    }

    #[test]
    fn identity_rotation() {
        assert_eq!(Quaternion::identity().to_rotmat(), Matrix3::identity());
    }

    #[test]
    fn log_inverts_exp() {
        for phi in [
            Vector3::new(0.1, -0.4, 0.3),
            Vector3::new(1e-9, 0.0, -2e-9),
            Vector3::new(3.0, 0.1, 0.0),
        ] {
            assert_relative_eq!(Quaternion::exp(&phi).log(), phi, epsilon = 1e-12);
        }
    }

    #[test]
    fn right_jacobian_matches_finite_differences() {
        let phi = Vector3::new(0.4, -0.7, 0.2);
        let jr = right_jacobian(&phi);
        let base = Quaternion::exp(&phi);
        let h = 1e-6;
        for c in 0..3 {
            let mut d = Vector3::zeros();
            d[c] = h;
            let plus = base.conjugate().compose(&Quaternion::exp(&(phi + d))).log();
            let minus = base.conjugate().compose(&Quaternion::exp(&(phi - d))).log();
            let col = (plus - minus) / (2.0 * h);
            assert_relative_eq!(col, jr.column(c).into_owned(), epsilon = 1e-8);
        }
        assert_relative_eq!(right_jacobian_inv(&phi) * jr, Matrix3::identity(), epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn normalize_gives_unit_norm(w in -5.0..5.0f64, x in -5.0..5.0f64, y in -5.0..5.0f64, z in -5.0..5.0f64) {
            prop_assume!(w.abs() + x.abs() + y.abs() + z.abs() > 1e-6);
            let q = Quaternion::new(w, x, y, z).normalize();
            prop_assert!((q.norm() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn rotmat_is_orthonormal(q in unit_quat()) {
            let r = q.to_rotmat();
            prop_assert!((r.transpose() * r - Matrix3::identity()).abs().max() < 1e-12);
            prop_assert!((r.determinant() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn rotmat_is_homomorphism(a in unit_quat(), b in unit_quat()) {
            let lhs = a.compose(&b).to_rotmat();
            let rhs = a.to_rotmat() * b.to_rotmat();
            prop_assert!((lhs - rhs).abs().max() < 1e-10);
        }

        #[test]
        fn rotation_preserves_norm(q in unit_quat(), x in -10.0..10.0f64, y in -10.0..10.0f64, z in -10.0..10.0f64) {
            let v = Vector3::new(x, y, z);
            prop_assert!((q.rotate(&v).norm() - v.norm()).abs() < 1e-12);
        }

        #[test]
        fn composition_is_associative(a in unit_quat(), b in unit_quat(), c in unit_quat()) {
            let l = a.compose(&b).compose(&c);
            let r = a.compose(&b.compose(&c));
            prop_assert!((l.w - r.w).abs() < 1e-12 && (l.vector() - r.vector()).norm() < 1e-12);
        }
    }
}

//! Synthetic planar scenarios: a trajectory, an exact GP draw of the field
//! along it, corrupted odometry and noisy magnetometer samples.
//!
//! Odometry is delivered as IMU records with identity rotation increments
//! and velocity increments chosen so that strapdown integration with zero
//! gravity reproduces each per-step displacement.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector, Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::kernels::{gram, Hyperparams, Kernel, KernelFamily};
use crate::slam::{HyperMode, OdometryNoise, Problem};
use crate::types::{ImuRecord, MagRecord, NavState, Quaternion};

const FIELD_STREAM: u64 = 1;
const ODOMETRY_STREAM: u64 = 2;
const MAG_STREAM: u64 = 3;

/// Sigma written into records and used for whitening when the configured
/// noise is exactly zero.
pub const SIGMA_FLOOR: f64 = 1e-6;

/// Largest number of distinct locations for an exact joint field draw.
pub const MAX_FIELD_LOCATIONS: usize = 2000;

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Exact joint draw `chol(K + jitter)·z` of a 3-component field at
/// `locations`; one row per location.
pub fn sample_field<P: AsRef<[f64]>>(locations: &[P], kernel: &Kernel, seed: u64) -> Result<DMatrix<f64>> {
    sample_field_with(locations, kernel, &mut rng(seed, FIELD_STREAM))
}

fn sample_field_with<P: AsRef<[f64]>>(
    locations: &[P],
    kernel: &Kernel,
    rng: &mut ChaCha8Rng,
) -> Result<DMatrix<f64>> {
    let n = locations.len();
    if n == 0 {
        return Ok(DMatrix::zeros(0, 3));
    }
    if n > MAX_FIELD_LOCATIONS {
        return Err(Error::InvalidInput(format!(
            "{n} field locations exceed the exact-draw limit of {MAX_FIELD_LOCATIONS}"
        )));
    }
    if kernel.is_matrix() && kernel.input_dim != 3 {
        return Err(Error::InvalidInput("field draws need a 3-D matrix kernel".into()));
    }
    if kernel.hyper.sigma_f == 0.0 {
        return Ok(DMatrix::zeros(n, 3));
    }
    let factor = gram(locations, kernel)?;
    let dim = factor.dim();
    let mut out = DMatrix::zeros(n, 3);
    if kernel.is_matrix() {
        let z = DVector::from_fn(dim, |_, _| StandardNormal.sample(rng));
        let s = &factor.chol * z;
        for i in 0..n {
            for a in 0..3 {
                out[(i, a)] = s[3 * i + a];
            }
        }
    } else {
        for a in 0..3 {
            let z = DVector::from_fn(dim, |_, _| StandardNormal.sample(rng));
            out.set_column(a, &(&factor.chol * z));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Shape {
    Rectangle { width: f64, height: f64 },
    Square { side: f64 },
    /// Archimedean spiral whose radius grows by `pitch` per turn.
    Spiral { pitch: f64 },
    /// Closed or open polyline; every segment must be a whole number of steps.
    Waypoints(Vec<[f64; 2]>),
}

fn whole_steps(len: f64, spacing: f64, what: &str) -> Result<usize> {
    let steps = (len / spacing).round();
    if steps < 1.0 || (steps * spacing - len).abs() > 1e-9 * len.max(1.0) {
        return Err(Error::InvalidInput(format!(
            "{what} of length {len} is not a whole number of {spacing} m steps"
        )));
    }
    Ok(steps as usize)
}

fn polyline(corners: &[[f64; 2]], spacing: f64) -> Result<Vec<Vector2<f64>>> {
    let mut pts = vec![Vector2::from(corners[0])];
    for w in corners.windows(2) {
        let a = Vector2::from(w[0]);
        let b = Vector2::from(w[1]);
        let len = (b - a).norm();
        let steps = whole_steps(len, spacing, "segment")?;
        let dir = (b - a) / len;
        for s in 1..steps {
            pts.push(a + dir * (s as f64 * spacing));
        }
        pts.push(b);
    }
    Ok(pts)
}

/// Planar waypoint sequence with consecutive points `spacing` apart.
///
/// Closed shapes return to their start after every loop and repeat the
/// same coordinates bit for bit on each loop.
pub fn make_trajectory(shape: &Shape, spacing: f64, loops: usize) -> Result<Vec<Vector2<f64>>> {
    if !(spacing > 0.0 && spacing.is_finite()) {
        return Err(Error::InvalidInput(format!("spacing must be positive, got {spacing}")));
    }
    if loops == 0 {
        return Err(Error::InvalidInput("loops must be at least 1".into()));
    }
    let one_loop = match shape {
        Shape::Square { side } => {
            return make_trajectory(
                &Shape::Rectangle {
                    width: *side,
                    height: *side,
                },
                spacing,
                loops,
            )
        }
        Shape::Rectangle { width, height } => {
            if !(*width > 0.0 && *height > 0.0) {
                return Err(Error::InvalidInput("rectangle sides must be positive".into()));
            }
            let (w, h) = (*width, *height);
            polyline(&[[0.0, 0.0], [w, 0.0], [w, h], [0.0, h], [0.0, 0.0]], spacing)?
        }
        Shape::Waypoints(corners) => {
            if corners.len() < 2 {
                return Err(Error::InvalidInput("need at least two waypoints".into()));
            }
            let closed = corners[0] == corners[corners.len() - 1];
            if loops > 1 && !closed {
                return Err(Error::InvalidInput("repeating an open waypoint list".into()));
            }
            polyline(corners, spacing)?
        }
        Shape::Spiral { pitch } => return spiral(*pitch, spacing, loops),
    };
    let mut pts = one_loop.clone();
    for _ in 1..loops {
        pts.extend_from_slice(&one_loop[1..]);
    }
    Ok(pts)
}

fn spiral(pitch: f64, spacing: f64, turns: usize) -> Result<Vec<Vector2<f64>>> {
    if !(pitch >= spacing) {
        return Err(Error::InvalidInput(format!(
            "spiral pitch {pitch} must be at least the spacing {spacing}"
        )));
    }
    let b = pitch / std::f64::consts::TAU;
    let at = |theta: f64| {
        let r = pitch + b * theta;
        Vector2::new(r * theta.cos(), r * theta.sin())
    };
    let end = std::f64::consts::TAU * turns as f64;
    let mut theta = 0.0;
    let mut pts = vec![at(0.0)];
    while theta < end {
        let cur = *pts.last().unwrap();
        // Chord length grows with the angle step at these radii.
        let (mut lo, mut hi) = (theta, theta + 2.0 * spacing / pitch + 1.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if (at(mid) - cur).norm() < spacing {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        theta = 0.5 * (lo + hi);
        // Snap the chord length to exactly `spacing`.
        pts.push(cur + (at(theta) - cur).normalize() * spacing);
    }
    Ok(pts)
}

/// Corrupts each step with a constant `bias` and white noise of std `sigma`.
pub fn corrupt_odometry(
    steps: &[Vector2<f64>],
    sigma: f64,
    bias: Vector2<f64>,
    seed: u64,
) -> Result<Vec<Vector2<f64>>> {
    corrupt_with(steps, sigma, bias, &mut rng(seed, ODOMETRY_STREAM))
}

fn corrupt_with(steps: &[Vector2<f64>], sigma: f64, bias: Vector2<f64>, rng: &mut ChaCha8Rng) -> Result<Vec<Vector2<f64>>> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidInput(format!("odometry sigma must be non-negative, got {sigma}")));
    }
    Ok(steps
        .iter()
        .map(|d| {
            let n = Vector2::new(StandardNormal.sample(rng), StandardNormal.sample(rng));
            d + bias + n * sigma
        })
        .collect())
}

/// Encodes planar displacements as IMU records starting from rest.
pub fn encode_displacements(displacements: &[Vector2<f64>], period: f64, t0: f64) -> Vec<ImuRecord> {
    let mut v = Vector3::zeros();
    displacements
        .iter()
        .enumerate()
        .map(|(k, d)| {
            let d3 = Vector3::new(d.x, d.y, 0.0);
            let dv = (d3 - v * period) * (2.0 / period);
            v += dv;
            ImuRecord {
                t: t0 + k as f64 * period,
                dq: Quaternion::identity(),
                dv,
                period,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub shape: Shape,
    pub spacing: f64,
    pub loops: usize,
    pub odom_sigma: f64,
    pub odom_bias: Vector2<f64>,
    pub hyper: Hyperparams,
    pub family: KernelFamily,
    pub mag_sigma: f64,
    /// Time between epochs, seconds.
    pub period: f64,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    /// The frozen study scenario: two loops of a 0.5 m square sampled every
    /// 25 cm, 0.5 mm odometry noise with a 5 mm bias on both axes.
    fn default() -> Self {
        Self {
            shape: Shape::Square { side: 0.5 },
            spacing: 0.25,
            loops: 2,
            odom_sigma: 5e-4,
            odom_bias: Vector2::new(5e-3, 5e-3),
            hyper: Hyperparams {
                sigma_f: 0.1,
                length_scale: 0.1,
            },
            family: KernelFamily::SeIndependent,
            mag_sigma: 1e-3,
            period: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub truth_states: Vec<NavState>,
    /// True field at every epoch, one row per epoch.
    pub field: DMatrix<f64>,
    pub odometry: Vec<ImuRecord>,
    pub mag: Vec<MagRecord>,
}

impl Scenario {
    pub fn truth_positions(&self) -> Vec<Vector3<f64>> {
        self.truth_states.iter().map(|s| s.p).collect()
    }

    /// Planar SLAM problem whose whitening matches the generating noise.
    pub fn problem(&self, hyper_mode: HyperMode) -> Problem {
        let mut p = Problem::planar(self.odometry.clone(), self.mag.clone(), self.config.family, hyper_mode);
        p.odometry = OdometryNoise {
            position: self.config.odom_sigma.max(SIGMA_FLOOR),
            ..OdometryNoise::default()
        };
        p
    }
}

pub fn build_scenario(cfg: &ScenarioConfig) -> Result<Scenario> {
    if !(cfg.period > 0.0 && cfg.period.is_finite()) {
        return Err(Error::InvalidInput("period must be positive".into()));
    }
    if !(cfg.mag_sigma >= 0.0 && cfg.mag_sigma.is_finite()) {
        return Err(Error::InvalidInput("magnetometer sigma must be non-negative".into()));
    }
    let path = make_trajectory(&cfg.shape, cfg.spacing, cfg.loops)?;
    let kernel = Kernel::new(cfg.family, cfg.hyper, 3)?;

    // Revisited coordinates share one draw.
    let mut unique: Vec<[f64; 3]> = Vec::new();
    let mut index_of: HashMap<(u64, u64), usize> = HashMap::new();
    let slots: Vec<usize> = path
        .iter()
        .map(|p| {
            let key = ((p.x + 0.0).to_bits(), (p.y + 0.0).to_bits());
            *index_of.entry(key).or_insert_with(|| {
                unique.push([p.x, p.y, 0.0]);
                unique.len() - 1
            })
        })
        .collect();
    let draws = sample_field_with(&unique, &kernel, &mut rng(cfg.seed, FIELD_STREAM))?;
    let field = DMatrix::from_fn(path.len(), 3, |i, a| draws[(slots[i], a)]);

    let true_steps: Vec<Vector2<f64>> = path.windows(2).map(|w| w[1] - w[0]).collect();
    let noisy = corrupt_with(&true_steps, cfg.odom_sigma, cfg.odom_bias, &mut rng(cfg.seed, ODOMETRY_STREAM))?;
    let odometry = encode_displacements(&noisy, cfg.period, 0.0);

    let exact = encode_displacements(&true_steps, cfg.period, 0.0);
    let mut truth_states = Vec::with_capacity(path.len());
    let mut v = Vector3::zeros();
    for (k, p) in path.iter().enumerate() {
        let mut s = NavState::at_rest(k as f64 * cfg.period, Vector3::new(p.x, p.y, 0.0));
        s.v = v;
        if let Some(r) = exact.get(k) {
            v += r.dv;
        }
        truth_states.push(s);
    }

    let mut mag_rng = rng(cfg.seed, MAG_STREAM);
    let sigma = cfg.mag_sigma.max(SIGMA_FLOOR);
    let mag = (0..path.len())
        .map(|k| {
            let noise = Vector3::from_fn(|_, _| StandardNormal.sample(&mut mag_rng));
            let y = Vector3::new(field[(k, 0)], field[(k, 1)], field[(k, 2)]);
            MagRecord {
                t: k as f64 * cfg.period,
                y: if cfg.mag_sigma > 0.0 { y + noise * cfg.mag_sigma } else { y },
                sigma: Vector3::repeat(sigma),
            }
        })
        .collect();

    Ok(Scenario {
        config: cfg.clone(),
        truth_states,
        field,
        odometry,
        mag,
    })
}

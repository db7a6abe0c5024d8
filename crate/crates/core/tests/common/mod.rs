//! Shared fixtures for the integration suites.
#![allow(dead_code)]

use magslam::kernels::{gram, matrix_cov, se_cov};
use magslam::simulator::{encode_displacements, sample_field};
use magslam::slam::{Estimate, InitialPrior, Mode, Prepared, Problem, ZeroPrior};
use magslam::types::{ImuRecord, MagRecord, NavState, Quaternion};
use magslam::{Hyperparams, Kernel, KernelFamily};
use nalgebra::{DMatrix, DVector, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const FAMILIES: [KernelFamily; 3] = [
    KernelFamily::SeIndependent,
    KernelFamily::CurlFree,
    KernelFamily::DivergenceFree,
];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn normal3(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    Vector3::new(normal(rng), normal(rng), normal(rng))
}

/// Relative error with a unit floor, so entries near zero are compared
/// absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// A random problem over five epochs together with a perturbed estimate
/// and the kernel to linearize with.
pub struct RandomInstance {
    pub problem: Problem,
    pub prepared: Prepared,
    pub estimate: Estimate,
    pub kernel: Kernel,
}

/// Magnetometer records at each epoch time; some epochs get a second record
/// slightly later, and one epoch may have none.
fn random_mag(rng: &mut ChaCha8Rng, times: &[f64], period: f64) -> Vec<MagRecord> {
    let skip = if rng.gen_bool(0.5) { Some(rng.gen_range(0..times.len())) } else { None };
    let mut mag = Vec::new();
    for (k, t) in times.iter().enumerate() {
        if Some(k) == skip {
            continue;
        }
        let n = if rng.gen_bool(0.3) { 2 } else { 1 };
        for i in 0..n {
            mag.push(MagRecord {
                t: t + 0.1 * period * i as f64,
                y: normal3(rng) * 0.3,
                sigma: Vector3::from_fn(|_, _| rng.gen_range(0.01..0.1)),
            });
        }
    }
    mag
}

pub fn random_instance(seed: u64, full: bool) -> RandomInstance {
    let mut rng = rng(seed);
    let epochs = 5;
    let period = rng.gen_range(0.2..1.0);
    let family = FAMILIES[rng.gen_range(0..3)];
    let hyper = Hyperparams::new(rng.gen_range(0.05..1.0), rng.gen_range(0.15..0.5)).unwrap();
    let times: Vec<f64> = (0..epochs).map(|k| 10.0 + k as f64 * period).collect();

    let (imu, mode, gravity) = if full {
        let g = Vector3::new(0.0, 0.0, -9.81);
        let mut q = Quaternion::identity();
        let mut imu = Vec::new();
        for &t in &times[..epochs - 1] {
            let axis = normal3(&mut rng);
            let dq = Quaternion::from_axis_angle(&axis, rng.gen_range(0.0..0.4));
            // Cancel gravity on average so the nodes stay within a few length scales.
            let dv = q.to_rotmat().transpose() * (-g * period) + normal3(&mut rng) * 0.3;
            imu.push(ImuRecord { t, dq, dv, period });
            q = q.compose(&dq);
        }
        (imu, Mode::Full, g)
    } else {
        let steps: Vec<Vector2<f64>> = (0..epochs - 1)
            .map(|_| Vector2::new(normal(&mut rng), normal(&mut rng)) * 0.2)
            .collect();
        (encode_displacements(&steps, period, times[0]), Mode::Planar(Default::default()), Vector3::zeros())
    };
    let mag = random_mag(&mut rng, &times, period);

    let mut problem = Problem::planar(imu, mag, family, magslam::slam::HyperMode::Fixed(hyper));
    problem.mode = mode;
    problem.noise.gravity = gravity;
    problem.initial_state = NavState::at_rest(times[0], normal3(&mut rng) * 0.1);
    problem.initial_prior = Some(InitialPrior::default());
    if rng.gen_bool(0.5) {
        problem.zero_prior = Some(ZeroPrior::default());
    }
    let prepared = problem.prepare().unwrap();
    let kernel = problem.kernel(hyper).unwrap();
    let dim = prepared.dim();
    let delta = DVector::from_fn(dim, |_, _| normal(&mut rng) * 0.05);
    let estimate = prepared.retract(&prepared.initial_estimate(), &delta);
    RandomInstance {
        problem,
        prepared,
        estimate,
        kernel,
    }
}

/// Worst relative error of the residual Jacobian and of the `log|K|`
/// gradient against central differences through `retract`. Central
/// differences at `h` and `h/2` are Richardson-combined so the `h²`
/// truncation term cancels on strongly curved instances.
pub fn jacobian_fd_error(inst: &RandomInstance, h: f64) -> (f64, f64) {
    let p = &inst.prepared;
    let lin = p.linearize(&inst.estimate, &inst.kernel, true, true).unwrap();
    let jac = lin.jacobian.unwrap().to_dense();
    let grad = lin.logdet_grad.unwrap_or_else(|| DVector::zeros(p.dim()));
    let central = |c: usize, step: f64| {
        let mut e = DVector::zeros(p.dim());
        e[c] = step;
        let plus = p.linearize(&p.retract(&inst.estimate, &e), &inst.kernel, false, true).unwrap();
        let minus = p.linearize(&p.retract(&inst.estimate, &(-&e)), &inst.kernel, false, true).unwrap();
        (
            (plus.residuals - minus.residuals) / (2.0 * step),
            (plus.logdet - minus.logdet) / (2.0 * step),
        )
    };
    let (mut worst_j, mut worst_g) = (0.0f64, 0.0f64);
    for c in 0..p.dim() {
        let (r1, g1) = central(c, h);
        let (r2, g2) = central(c, 0.5 * h);
        let fd = (r2 * 4.0 - r1) / 3.0;
        for r in 0..jac.nrows() {
            worst_j = worst_j.max(rel_err(jac[(r, c)], fd[r]));
        }
        worst_g = worst_g.max(rel_err(grad[c], (4.0 * g2 - g1) / 3.0));
    }
    (worst_j, worst_g)
}

/// Worst relative error of the NLML gradient in `(log σ_f, log l)` on a
/// random five-point instance.
pub fn nlml_fd_error(seed: u64) -> f64 {
    let mut rng = rng(seed);
    let family = FAMILIES[rng.gen_range(0..3)];
    let hyper = Hyperparams::new(rng.gen_range(0.05..2.0), rng.gen_range(0.1..1.0)).unwrap();
    let locs: Vec<[f64; 3]> = (0..5).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-0.2..0.2)]).collect();
    let values = DMatrix::from_fn(5, 3, |_, _| normal(&mut rng) * hyper.sigma_f);
    let noise = DMatrix::from_fn(5, 3, |_, _| rng.gen_range(0.01..0.2));
    let kernel = Kernel::new(family, hyper, 3).unwrap();
    let (_, grad) = magslam::gpr::nlml_grad(&locs, &values, &kernel, &noise).unwrap();
    let h = 1e-5;
    let at = |ls: f64, ll: f64| {
        let k = kernel.with_hyper(Hyperparams::new(ls.exp(), ll.exp()).unwrap());
        magslam::gpr::nlml(&locs, &values, &k, &noise).unwrap()
    };
    let (ls, ll) = (hyper.sigma_f.ln(), hyper.length_scale.ln());
    let fd = [
        (at(ls + h, ll) - at(ls - h, ll)) / (2.0 * h),
        (at(ls, ll + h) - at(ls, ll - h)) / (2.0 * h),
    ];
    rel_err(grad[0], fd[0]).max(rel_err(grad[1], fd[1]))
}

/// Mean absolute divergence, mean absolute curl component and mean absolute
/// Jacobian entry of fields drawn from `family` on a 3×3×3 grid with spacing
/// `l/20`, evaluated by central differences at the grid centre.
pub fn field_derivative_stats(family: KernelFamily, draws: u64) -> (f64, f64, f64) {
    let l = 1.0;
    let h = l / 20.0;
    let kernel = Kernel::new(family, Hyperparams::new(1.0, l).unwrap(), 3).unwrap();
    let mut locs = Vec::new();
    for i in -1..=1 {
        for j in -1..=1 {
            for k in -1..=1 {
                locs.push([i as f64 * h, j as f64 * h, k as f64 * h]);
            }
        }
    }
    let idx = |i: i32, j: i32, k: i32| ((i + 1) * 9 + (j + 1) * 3 + (k + 1)) as usize;
    let (mut div, mut curl, mut grad) = (0.0, 0.0, 0.0);
    for seed in 0..draws {
        let f = sample_field(&locs, &kernel, seed).unwrap();
        // jac[a][b] = ∂f_a/∂x_b at the centre
        let mut jac = [[0.0; 3]; 3];
        for b in 0..3 {
            let mut off = [0i32; 3];
            off[b] = 1;
            let plus = idx(off[0], off[1], off[2]);
            let minus = idx(-off[0], -off[1], -off[2]);
            for (a, row) in jac.iter_mut().enumerate() {
                row[b] = (f[(plus, a)] - f[(minus, a)]) / (2.0 * h);
            }
        }
        div += (jac[0][0] + jac[1][1] + jac[2][2]).abs();
        curl += ((jac[2][1] - jac[1][2]).abs() + (jac[0][2] - jac[2][0]).abs() + (jac[1][0] - jac[0][1]).abs()) / 3.0;
        grad += jac.iter().flatten().map(|v| v.abs()).sum::<f64>() / 9.0;
    }
    let n = draws as f64;
    (div / n, curl / n, grad / n)
}

/// Dense covariance of `locs` for `kernel` assembled entry by entry, point
/// major with three field axes per point.
pub fn dense_cov(a: &[[f64; 3]], b: &[[f64; 3]], kernel: &Kernel) -> DMatrix<f64> {
    let mut k = DMatrix::zeros(3 * a.len(), 3 * b.len());
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            let block = if kernel.is_matrix() {
                matrix_cov(x, y, kernel).unwrap()
            } else {
                DMatrix::identity(3, 3) * se_cov(x, y, &kernel.hyper).unwrap()
            };
            k.view_mut((3 * i, 3 * j), (3, 3)).copy_from(&block);
        }
    }
    k
}

/// Worst absolute deviation of `MapEstimate::predict` (mean and covariance)
/// from an LU solve of the dense system, over random queries.
pub fn predict_oracle_error(seed: u64) -> f64 {
    let mut rng = rng(seed);
    let n = rng.gen_range(2..=10);
    let family = FAMILIES[rng.gen_range(0..3)];
    let kernel = Kernel::new(family, Hyperparams::new(rng.gen_range(0.1..1.0), rng.gen_range(0.3..1.0)).unwrap(), 3).unwrap();
    let locs: Vec<[f64; 3]> = (0..n).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-0.3..0.3)]).collect();
    let values = DMatrix::from_fn(n, 3, |_, _| normal(&mut rng) * kernel.hyper.sigma_f);
    let noise = DMatrix::from_fn(n, 3, |_, _| rng.gen_range(0.05..0.2) * kernel.hyper.sigma_f);
    let map = magslam::gpr::MapEstimate::new(&locs, values.clone(), kernel.clone(), noise.clone()).unwrap();

    let mut sigma = dense_cov(&locs, &locs, &kernel);
    for i in 0..n {
        for a in 0..3 {
            sigma[(3 * i + a, 3 * i + a)] += noise[(i, a)] * noise[(i, a)];
        }
    }
    let y = DVector::from_fn(3 * n, |r, _| values[(r / 3, r % 3)]);
    let lu = sigma.lu();
    let alpha = lu.solve(&y).unwrap();
    let mut worst = 0.0f64;
    for _ in 0..5 {
        let q = [rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5), rng.gen_range(-0.3..0.3)];
        let kq = dense_cov(&locs, &[q], &kernel);
        let mean = kq.transpose() * &alpha;
        let cov = dense_cov(&[q], &[q], &kernel) - kq.transpose() * lu.solve(&kq).unwrap();
        let (pm, pc) = map.predict(&q).unwrap();
        worst = worst.max((pm - mean).amax()).max((pc - cov).amax());
    }
    worst
}

/// Absolute deviation of `GramFactor::logdet` from the sum of log
/// eigenvalues of the jittered Gram matrix.
pub fn logdet_oracle_error(seed: u64) -> f64 {
    let mut rng = rng(seed);
    let n = rng.gen_range(1..=10);
    let family = FAMILIES[rng.gen_range(0..3)];
    let kernel = Kernel::new(family, Hyperparams::new(rng.gen_range(0.1..1.0), rng.gen_range(0.3..1.0)).unwrap(), 3).unwrap();
    let locs: Vec<[f64; 3]> = (0..n).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-0.3..0.3)]).collect();
    let f = gram(&locs, &kernel).unwrap();
    let m = &f.k + DMatrix::identity(f.dim(), f.dim()) * f.jitter_used;
    let oracle: f64 = m.symmetric_eigenvalues().iter().map(|l| l.ln()).sum();
    (f.logdet - oracle).abs()
}

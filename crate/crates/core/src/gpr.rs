//! Classical GP regression of a vector field: marginal-likelihood
//! hyperparameter fitting and posterior prediction.
//!
//! Field samples are `N × D` matrices (one row per location). With the
//! SE-independent kernel each column is its own GP sharing `(σ_f, l)`; the
//! matrix kernels model all `D = n_x` columns jointly.

use std::f64::consts::PI;
use std::io::Write;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kernels::{cross_matrix, gram_matrix, GramFactor, Hyperparams, Kernel};

const LOG_SIGMA_BOUNDS: (f64, f64) = (-23.0, 14.0);
const LOG_LENGTH_BOUNDS: (f64, f64) = (-9.2, 9.2);
const MAX_LOG_STEP: f64 = 0.5;

/// Independent Gaussian blocks of the likelihood: `(Σ, y)` pairs.
struct Blocks {
    sigmas: Vec<DMatrix<f64>>,
    targets: Vec<DVector<f64>>,
    /// Which columns of the field each block covers, for the matrix layout.
    joint: bool,
}

fn check_samples<P: AsRef<[f64]>>(
    locations: &[P],
    values: &DMatrix<f64>,
    noise: &DMatrix<f64>,
    k: &Kernel,
) -> Result<()> {
    if values.nrows() != locations.len() {
        return Err(Error::InvalidInput(format!(
            "{} locations but {} value rows",
            locations.len(),
            values.nrows()
        )));
    }
    if noise.shape() != values.shape() {
        return Err(Error::InvalidInput("noise and values shapes differ".into()));
    }
    if k.is_matrix() && values.ncols() != k.input_dim {
        return Err(Error::DimensionMismatch(values.ncols(), k.input_dim));
    }
    if noise.iter().any(|s| *s < 0.0 || !s.is_finite()) {
        return Err(Error::InvalidInput("noise must be finite and non-negative".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("values"));
    }
    Ok(())
}

fn flatten_rows(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(m.len(), m.transpose().iter().copied())
}

fn build_blocks<P: AsRef<[f64]>>(
    locations: &[P],
    values: &DMatrix<f64>,
    noise: &DMatrix<f64>,
    k: &Kernel,
) -> Result<Blocks> {
    let kmat = gram_matrix(locations, k)?;
    if k.is_matrix() {
        let var = flatten_rows(noise).map(|s| s * s);
        Ok(Blocks {
            sigmas: vec![kmat + DMatrix::from_diagonal(&var)],
            targets: vec![flatten_rows(values)],
            joint: true,
        })
    } else {
        let mut sigmas = Vec::with_capacity(values.ncols());
        let mut targets = Vec::with_capacity(values.ncols());
        for a in 0..values.ncols() {
            let var = noise.column(a).map(|s| s * s);
            sigmas.push(&kmat + DMatrix::from_diagonal(&var));
            targets.push(values.column(a).into_owned());
        }
        Ok(Blocks {
            sigmas,
            targets,
            joint: false,
        })
    }
}

/// Negative log marginal likelihood
/// `½ Σ [yᵀ(K + C)⁻¹y + log|K + C| + n log 2π]` over the independent blocks.
pub fn nlml<P: AsRef<[f64]>>(
    locations: &[P],
    values: &DMatrix<f64>,
    k: &Kernel,
    noise: &DMatrix<f64>,
) -> Result<f64> {
    nlml_with_grad(locations, values, k, noise, false).map(|(v, _)| v)
}

/// NLML and its gradient with respect to `(log σ_f, log l)`.
pub fn nlml_grad<P: AsRef<[f64]>>(
    locations: &[P],
    values: &DMatrix<f64>,
    k: &Kernel,
    noise: &DMatrix<f64>,
) -> Result<(f64, [f64; 2])> {
    nlml_with_grad(locations, values, k, noise, true)
}

fn nlml_with_grad<P: AsRef<[f64]>>(
    locations: &[P],
    values: &DMatrix<f64>,
    k: &Kernel,
    noise: &DMatrix<f64>,
    want_grad: bool,
) -> Result<(f64, [f64; 2])> {
    if locations.is_empty() {
        return Err(Error::InvalidInput("nlml needs at least one sample".into()));
    }
    check_samples(locations, values, noise, k)?;
    k.hyper.validate()?;
    let blocks = build_blocks(locations, values, noise, k)?;

    let (dk_sig, dk_len) = if want_grad {
        let q = k.block_size();
        let n = locations.len() * q;
        let mut ds = DMatrix::zeros(n, n);
        let mut dl = DMatrix::zeros(n, n);
        for (i, xi) in locations.iter().enumerate() {
            for (j, xj) in locations.iter().enumerate() {
                let (a, b) = k.block_grad_log_hyper(xi.as_ref(), xj.as_ref())?;
                ds.view_mut((i * q, j * q), (q, q)).copy_from(&a);
                dl.view_mut((i * q, j * q), (q, q)).copy_from(&b);
            }
        }
        (ds, dl)
    } else {
        (DMatrix::zeros(0, 0), DMatrix::zeros(0, 0))
    };

    let mut total = 0.0;
    let mut grad = [0.0; 2];
    for (sigma, y) in blocks.sigmas.into_iter().zip(&blocks.targets) {
        let n = y.len();
        let f = GramFactor::factorize(sigma, &k.hyper)?;
        let alpha = f.solve_vec(y);
        total += 0.5 * (y.dot(&alpha) + f.logdet + n as f64 * (2.0 * PI).ln());
        if want_grad {
            // ∂/∂θ = ½ tr((Σ⁻¹ − ααᵀ) ∂K)
            let w = f.solve(&DMatrix::identity(n, n)) - &alpha * alpha.transpose();
            grad[0] += 0.5 * w.component_mul(&dk_sig).sum();
            grad[1] += 0.5 * w.component_mul(&dk_len).sum();
        }
    }
    let _ = blocks.joint;
    Ok((total, grad))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HyperFit {
    pub hyper: Hyperparams,
    pub nlml: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct FitOptions {
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            gradient_tolerance: 1e-8,
        }
    }
}

/// Local minimizer of [`nlml`] over `(log σ_f, log l)` by BFGS with an
/// Armijo backtracking line search. `init` supplies the family and the
/// starting hyperparameters.
pub fn fit_hypers<P: AsRef<[f64]>>(
    locations: &[P],
    values: &DMatrix<f64>,
    noise: &DMatrix<f64>,
    init: &Kernel,
) -> Result<HyperFit> {
    fit_hypers_with(locations, values, noise, init, FitOptions::default())
}

pub fn fit_hypers_with<P: AsRef<[f64]>>(
    locations: &[P],
    values: &DMatrix<f64>,
    noise: &DMatrix<f64>,
    init: &Kernel,
    opts: FitOptions,
) -> Result<HyperFit> {
    if locations.len() < 5 {
        return Err(Error::InvalidInput(format!(
            "hyperparameter fit needs at least 5 samples, got {}",
            locations.len()
        )));
    }
    if init.hyper.sigma_f <= 0.0 {
        return Err(Error::InvalidInput("initial sigma_f must be positive".into()));
    }
    let clamp = |u: [f64; 2]| {
        [
            u[0].clamp(LOG_SIGMA_BOUNDS.0, LOG_SIGMA_BOUNDS.1),
            u[1].clamp(LOG_LENGTH_BOUNDS.0, LOG_LENGTH_BOUNDS.1),
        ]
    };
    let kernel_at = |u: [f64; 2]| {
        init.with_hyper(Hyperparams {
            sigma_f: u[0].exp(),
            length_scale: u[1].exp(),
        })
    };
    let eval = |u: [f64; 2]| nlml_grad(locations, values, &kernel_at(u), noise);

    let mut u = clamp([init.hyper.sigma_f.ln(), init.hyper.length_scale.ln()]);
    let (mut f, mut g) = eval(u)?;
    let mut hinv = [[1.0, 0.0], [0.0, 1.0]];
    let mut converged = false;
    let mut iterations = 0;

    while iterations < opts.max_iterations {
        if g[0].hypot(g[1]) < opts.gradient_tolerance {
            converged = true;
            break;
        }
        iterations += 1;
        let mut dir = [
            -(hinv[0][0] * g[0] + hinv[0][1] * g[1]),
            -(hinv[1][0] * g[0] + hinv[1][1] * g[1]),
        ];
        let mut slope = dir[0] * g[0] + dir[1] * g[1];
        if slope >= 0.0 {
            hinv = [[1.0, 0.0], [0.0, 1.0]];
            dir = [-g[0], -g[1]];
            slope = -(g[0] * g[0] + g[1] * g[1]);
        }
        // Keep trial steps within half an e-fold so a steep start cannot
        // leap across a narrow minimum onto a flat region.
        let len = dir[0].hypot(dir[1]);
        let mut step = if len > MAX_LOG_STEP { MAX_LOG_STEP / len } else { 1.0 };

        let mut accepted = None;
        for _ in 0..60 {
            let trial = clamp([u[0] + step * dir[0], u[1] + step * dir[1]]);
            if let Ok((ft, gt)) = eval(trial) {
                if ft.is_finite() && ft <= f + 1e-4 * step * slope {
                    accepted = Some((trial, ft, gt));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((un, fnew, gn)) = accepted else {
            // No descent possible along the quasi-Newton direction.
            converged = g[0].hypot(g[1]) < 1e-5 * (1.0 + f.abs());
            break;
        };

        let s = [un[0] - u[0], un[1] - u[1]];
        let yv = [gn[0] - g[0], gn[1] - g[1]];
        let sy = s[0] * yv[0] + s[1] * yv[1];
        if sy > 1e-12 * (s[0].hypot(s[1]) * yv[0].hypot(yv[1])).max(f64::MIN_POSITIVE) {
            let rho = 1.0 / sy;
            // H ← (I − ρ s yᵀ) H (I − ρ y sᵀ) + ρ s sᵀ
            let a = [
                [1.0 - rho * s[0] * yv[0], -rho * s[0] * yv[1]],
                [-rho * s[1] * yv[0], 1.0 - rho * s[1] * yv[1]],
            ];
            let mut ah = [[0.0; 2]; 2];
            for i in 0..2 {
                for j in 0..2 {
                    ah[i][j] = a[i][0] * hinv[0][j] + a[i][1] * hinv[1][j];
                }
            }
            let mut next = [[0.0; 2]; 2];
            for i in 0..2 {
                for j in 0..2 {
                    next[i][j] = ah[i][0] * a[j][0] + ah[i][1] * a[j][1] + rho * s[i] * s[j];
                }
            }
            hinv = next;
        }
        let stalled = (f - fnew).abs() <= 1e-15 * (1.0 + f.abs());
        u = un;
        f = fnew;
        g = gn;
        if stalled {
            converged = g[0].hypot(g[1]) < 1e-5 * (1.0 + f.abs());
            break;
        }
    }
    if !converged && g[0].hypot(g[1]) < opts.gradient_tolerance {
        converged = true;
    }

    Ok(HyperFit {
        hyper: kernel_at(u).hyper,
        nlml: f,
        iterations,
        converged,
    })
}

/// Posterior field model conditioned on noisy samples.
#[derive(Debug, Clone)]
pub struct MapEstimate {
    train_locations: Vec<Vec<f64>>,
    train_values: DMatrix<f64>,
    kernel: Kernel,
    noise: DMatrix<f64>,
    factors: Vec<GramFactor>,
    alphas: Vec<DVector<f64>>,
}

impl MapEstimate {
    pub fn new<P: AsRef<[f64]>>(
        locations: &[P],
        values: DMatrix<f64>,
        kernel: Kernel,
        noise: DMatrix<f64>,
    ) -> Result<Self> {
        if locations.is_empty() {
            return Err(Error::InvalidInput("map needs at least one sample".into()));
        }
        check_samples(locations, &values, &noise, &kernel)?;
        let blocks = build_blocks(locations, &values, &noise, &kernel)?;
        let mut factors = Vec::new();
        let mut alphas = Vec::new();
        for (sigma, y) in blocks.sigmas.into_iter().zip(&blocks.targets) {
            let f = GramFactor::factorize(sigma, &kernel.hyper)?;
            alphas.push(f.solve_vec(y));
            factors.push(f);
        }
        Ok(Self {
            train_locations: locations.iter().map(|p| p.as_ref().to_vec()).collect(),
            train_values: values,
            kernel,
            noise,
            factors,
            alphas,
        })
    }

    pub fn train_locations(&self) -> &[Vec<f64>] {
        &self.train_locations
    }

    pub fn train_values(&self) -> &DMatrix<f64> {
        &self.train_values
    }

    pub fn kernel(&self) -> &Kernel {
        &self.kernel
    }

    pub fn noise(&self) -> &DMatrix<f64> {
        &self.noise
    }

    pub fn output_dim(&self) -> usize {
        self.train_values.ncols()
    }

    /// Posterior mean and covariance of the field at `query`.
    pub fn predict(&self, query: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let d = self.output_dim();
        let q = [query];
        let kstar = cross_matrix(&self.train_locations, &q, &self.kernel)?;
        let kss = gram_matrix(&q, &self.kernel)?;
        let (mean, cov) = if self.kernel.is_matrix() {
            let f = &self.factors[0];
            let mean = kstar.transpose() * &self.alphas[0];
            let v = f.solve_lower(&kstar);
            (mean, kss - v.transpose() * v)
        } else {
            let prior = kss[(0, 0)];
            let mut mean = DVector::zeros(d);
            let mut cov = DMatrix::zeros(d, d);
            for a in 0..d {
                let kcol = kstar.column(0);
                mean[a] = kcol.dot(&self.alphas[a]);
                let v = self.factors[a].solve_lower(&kstar);
                cov[(a, a)] = prior - v.norm_squared();
            }
            (mean, cov)
        };
        let sym = (&cov + cov.transpose()) * 0.5;
        Ok((mean, sym))
    }
}

/// Writes `x,y,z,mx,my,mz,var_x,var_y,var_z` rows for each grid point.
pub fn write_map_grid<W: Write>(map: &MapEstimate, grid: &[[f64; 3]], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["x", "y", "z", "mx", "my", "mz", "var_x", "var_y", "var_z"])?;
    let dim = map.kernel().input_dim;
    for p in grid {
        let query: &[f64] = if map.kernel().is_matrix() { &p[..dim] } else {
            &p[..map.train_locations()[0].len()]
        };
        let (mean, cov) = map.predict(query)?;
        let mut row: Vec<String> = p.iter().map(|v| v.to_string()).collect();
        for a in 0..3 {
            row.push(mean.get(a).copied().unwrap_or(0.0).to_string());
        }
        for a in 0..3 {
            row.push(if a < cov.nrows() { cov[(a, a)] } else { 0.0 }.to_string());
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::KernelFamily;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn se(sigma_f: f64, l: f64) -> Kernel {
        Kernel::new(KernelFamily::SeIndependent, Hyperparams::new(sigma_f, l).unwrap(), 3).unwrap()
    }

    fn random_locations(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 3]> {
        (0..n)
            .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 0.0])
            .collect()
    }

    /// Draw from the GP prior plus noise, independent of the code under test
    /// except for the covariance matrix itself.
    fn draw(rng: &mut ChaCha8Rng, locs: &[[f64; 3]], k: &Kernel, sn: f64, cols: usize) -> DMatrix<f64> {
        let kmat = gram_matrix(locs, k).unwrap();
        let n = kmat.nrows();
        let chol = (kmat + DMatrix::identity(n, n) * (sn * sn)).cholesky().unwrap();
        let mut out = DMatrix::zeros(locs.len(), cols);
        for c in 0..cols {
            let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
            let s = chol.l() * z;
            out.column_mut(c).copy_from(&s);
        }
        out
    }

    #[test]
    fn single_zero_sample_closed_form() {
        let k = se(0.1, 0.2);
        let sn = 0.05;
        let v = nlml(&[[0.0, 0.0, 0.0]], &DMatrix::zeros(1, 1), &k, &DMatrix::from_element(1, 1, sn)).unwrap();
        let expected = 0.5 * ((0.01 + sn * sn).ln() + (2.0 * PI).ln());
        assert_relative_eq!(v, expected, epsilon = 1e-14);
    }

    #[test]
    fn quadratic_term_scales_with_square() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let locs = random_locations(&mut rng, 6);
        let k = se(0.4, 0.5);
        let noise = DMatrix::from_element(6, 1, 0.05);
        let y = draw(&mut rng, &locs, &k, 0.05, 1);
        let zero = nlml(&locs, &DMatrix::zeros(6, 1), &k, &noise).unwrap();
        let q1 = nlml(&locs, &y, &k, &noise).unwrap() - zero;
        let c = 3.7;
        let qc = nlml(&locs, &(&y * c), &k, &noise).unwrap() - zero;
        assert_relative_eq!(qc, c * c * q1, max_relative = 1e-10);
        // Direct formula for the quadratic term.
        let sigma = gram_matrix(&locs, &k).unwrap() + DMatrix::identity(6, 6) * 0.0025;
        let direct = 0.5 * (y.transpose() * sigma.try_inverse().unwrap() * &y)[(0, 0)];
        assert_relative_eq!(q1, direct, max_relative = 1e-10);
    }

    #[test]
    fn true_hyperparameters_score_better_on_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let locs = random_locations(&mut rng, 12);
        let truth = se(0.5, 0.3);
        let noise = DMatrix::from_element(12, 1, 0.01);
        let (mut at_truth, mut off_sigma, mut off_length) = (0.0, 0.0, 0.0);
        for _ in 0..100 {
            let y = draw(&mut rng, &locs, &truth, 0.01, 1);
            at_truth += nlml(&locs, &y, &truth, &noise).unwrap();
            off_sigma += nlml(&locs, &y, &se(5.0, 0.3), &noise).unwrap();
            off_length += nlml(&locs, &y, &se(0.5, 3.0), &noise).unwrap();
        }
        assert!(at_truth < off_sigma);
        assert!(at_truth < off_length);
    }

    #[test]
    fn nlml_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for family in [KernelFamily::SeIndependent, KernelFamily::CurlFree, KernelFamily::DivergenceFree] {
            let locs = random_locations(&mut rng, 7)
                .into_iter()
                .map(|p| [p[0], p[1], rng.gen_range(-0.5..0.5)])
                .collect::<Vec<_>>();
            let k = Kernel::new(family, Hyperparams::new(0.3, 0.6).unwrap(), 3).unwrap();
            let y = DMatrix::from_fn(7, 3, |_, _| rng.sample::<f64, _>(StandardNormal) * 0.2);
            let noise = DMatrix::from_element(7, 3, 0.02);
            let (_, g) = nlml_grad(&locs, &y, &k, &noise).unwrap();
            let h = 1e-5;
            let at = |ds: f64, dl: f64| {
                let kk = k.with_hyper(Hyperparams {
                    sigma_f: k.hyper.sigma_f * ds.exp(),
                    length_scale: k.hyper.length_scale * dl.exp(),
                });
                nlml(&locs, &y, &kk, &noise).unwrap()
            };
            let fd = [(at(h, 0.0) - at(-h, 0.0)) / (2.0 * h), (at(0.0, h) - at(0.0, -h)) / (2.0 * h)];
            for i in 0..2 {
                assert!((g[i] - fd[i]).abs() <= 1e-4 * fd[i].abs().max(1e-8), "{family} {i}: {} vs {}", g[i], fd[i]);
            }
        }
    }

    #[test]
    fn fit_from_truth_does_not_increase_nlml() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let locs = random_locations(&mut rng, 25);
        let truth = se(0.3, 0.4);
        let noise = DMatrix::from_element(25, 3, 0.01);
        let y = draw(&mut rng, &locs, &truth, 0.01, 3);
        let start = nlml(&locs, &y, &truth, &noise).unwrap();
        let fit = fit_hypers(&locs, &y, &noise, &truth).unwrap();
        assert!(fit.nlml <= start + 1e-12);
        assert!(fit.converged);
        let (_, g) = nlml_grad(&locs, &y, &truth.with_hyper(fit.hyper), &noise).unwrap();
        assert!(g[0].hypot(g[1]) < 1e-5);
    }

    #[test]
    fn zero_field_drives_sigma_f_down() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let locs = random_locations(&mut rng, 20);
        let sn = 0.001;
        let y = DMatrix::from_fn(20, 3, |_, _| rng.sample::<f64, _>(StandardNormal) * sn);
        let noise = DMatrix::from_element(20, 3, sn);
        let fit = fit_hypers(&locs, &y, &noise, &se(0.1, 0.1)).unwrap();
        // Pure noise can still support a small amount of apparent structure.
        assert!(fit.hyper.sigma_f < sn, "sigma_f = {}", fit.hyper.sigma_f);
        let exact_zero = fit_hypers(&locs, &DMatrix::zeros(20, 3), &noise, &se(0.1, 0.1)).unwrap();
        assert!(exact_zero.hyper.sigma_f < 1e-3 * sn);
    }

    #[test]
    fn fit_needs_five_samples() {
        let locs = [[0.0; 3]; 4];
        let y = DMatrix::zeros(4, 1);
        assert!(fit_hypers(&locs, &y, &y, &se(1.0, 1.0)).is_err());
    }

    #[test]
    fn interpolates_training_points_without_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let locs = random_locations(&mut rng, 6);
        let k = se(1.0, 0.5);
        let y = draw(&mut rng, &locs, &k, 0.0, 3);
        let map = MapEstimate::new(&locs, y.clone(), k, DMatrix::zeros(6, 3)).unwrap();
        for (i, p) in locs.iter().enumerate() {
            let (mean, cov) = map.predict(p).unwrap();
            for a in 0..3 {
                assert!((mean[a] - y[(i, a)]).abs() < 1e-8);
            }
            assert!(cov.abs().max() < 1e-8);
        }
    }

    #[test]
    fn reverts_to_prior_far_away() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let locs = random_locations(&mut rng, 6);
        for family in [KernelFamily::SeIndependent, KernelFamily::DivergenceFree] {
            let k = Kernel::new(family, Hyperparams::new(0.2, 0.1).unwrap(), 3).unwrap();
            let y = DMatrix::from_element(6, 3, 0.3);
            let map = MapEstimate::new(&locs, y, k, DMatrix::from_element(6, 3, 0.01)).unwrap();
            let far = [100.0, 100.0, 0.0];
            let (mean, cov) = map.predict(&far).unwrap();
            assert!(mean.amax() < 1e-12);
            let prior = if k.is_matrix() { k.block(&far, &far).unwrap() } else {
                DMatrix::identity(3, 3) * 0.04
            };
            assert!((cov - prior).abs().max() < 1e-12);
        }
    }

    #[test]
    fn one_dimensional_posterior_matches_dense_solve() {
        // Three scalar samples on a line, solved by explicit inversion.
        let locs = [[0.0, 0.0, 0.0], [0.3, 0.0, 0.0], [0.7, 0.0, 0.0]];
        let y = DMatrix::from_column_slice(3, 1, &[0.5, -0.2, 0.1]);
        let sn = 0.1;
        let k = se(0.8, 0.4);
        let map = MapEstimate::new(&locs, y.clone(), k, DMatrix::from_element(3, 1, sn)).unwrap();
        let query = [0.45, 0.0, 0.0];

        let kf = |a: f64, b: f64| 0.64 * (-(a - b) * (a - b) / (2.0 * 0.16)).exp();
        let xs = [0.0, 0.3, 0.7];
        let mut kmat = DMatrix::from_fn(3, 3, |i, j| kf(xs[i], xs[j]));
        for i in 0..3 {
            kmat[(i, i)] += sn * sn;
        }
        let inv = kmat.try_inverse().unwrap();
        let ks = DVector::from_fn(3, |i, _| kf(xs[i], query[0]));
        let mean = (ks.transpose() * &inv * DVector::from_column_slice(y.as_slice()))[(0, 0)];
        let var = 0.64 - (ks.transpose() * &inv * &ks)[(0, 0)];

        let (m, c) = map.predict(&query).unwrap();
        assert!((m[0] - mean).abs() < 1e-10);
        assert!((c[(0, 0)] - var).abs() < 1e-10);
    }

    #[test]
    fn prediction_is_linear_and_shrinks_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let locs = random_locations(&mut rng, 8);
        let k = Kernel::new(KernelFamily::CurlFree, Hyperparams::new(0.5, 0.4).unwrap(), 3).unwrap();
        let noise = DMatrix::from_element(8, 3, 0.05);
        let y1 = DMatrix::from_fn(8, 3, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y2 = DMatrix::from_fn(8, 3, |_, _| rng.sample::<f64, _>(StandardNormal));
        let (a, b) = (0.7, -1.3);
        let m1 = MapEstimate::new(&locs, y1.clone(), k, noise.clone()).unwrap();
        let m2 = MapEstimate::new(&locs, y2.clone(), k, noise.clone()).unwrap();
        let mc = MapEstimate::new(&locs, &y1 * a + &y2 * b, k, noise).unwrap();
        for _ in 0..10 {
            let q = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 0.1];
            let (p1, c1) = m1.predict(&q).unwrap();
            let (p2, _) = m2.predict(&q).unwrap();
            let (pc, _) = mc.predict(&q).unwrap();
            assert!((pc - (p1 * a + p2 * b)).amax() < 1e-10);
            let prior = k.block(&q, &q).unwrap();
            for i in 0..3 {
                assert!(c1[(i, i)] <= prior[(i, i)] + 1e-10);
                assert!(c1[(i, i)] >= -1e-12);
            }
        }
    }
}

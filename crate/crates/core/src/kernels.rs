//! Covariance functions over sample locations.
//!
//! Three families share the pair `(sigma_f, length_scale)`:
//!
//! * `SeIndependent`: scalar squared-exponential kernel applied to each field
//!   axis as an independent GP,
//! * `CurlFree`: `(σ_f²/l²) (I − r rᵀ) exp(−‖d‖²/2l²)` with `r = d / l`,
//! * `DivergenceFree`: `(σ_f²/l²) ((n_x − 1 − ‖r‖²) I + r rᵀ) exp(−‖d‖²/2l²)`.
//!
//! The matrix families produce `n_x × n_x` blocks; joint Gram matrices are
//! ordered point-major (`index = point * n_x + component`).

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative jitter schedule, in units of `trace(K) / N`.
pub const JITTER_START: f64 = 1e-12;
pub const JITTER_MAX: f64 = 1e-4;
const JITTER_GROWTH: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hyperparams {
    pub sigma_f: f64,
    pub length_scale: f64,
}

impl Hyperparams {
    pub fn new(sigma_f: f64, length_scale: f64) -> Result<Self> {
        let h = Self {
            sigma_f,
            length_scale,
        };
        h.validate()?;
        Ok(h)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.sigma_f.is_finite() || !self.length_scale.is_finite() {
            return Err(Error::NonFinite("hyperparameters"));
        }
        if self.sigma_f < 0.0 {
            return Err(Error::InvalidInput(format!("sigma_f = {} < 0", self.sigma_f)));
        }
        if self.length_scale <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "length_scale = {} must be positive",
                self.length_scale
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum KernelFamily {
    SeIndependent,
    CurlFree,
    DivergenceFree,
}

impl fmt::Display for KernelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KernelFamily::SeIndependent => "se",
            KernelFamily::CurlFree => "curl-free",
            KernelFamily::DivergenceFree => "divergence-free",
        })
    }
}

impl FromStr for KernelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "se" | "se-independent" | "squared-exponential" => Ok(KernelFamily::SeIndependent),
            "curl-free" | "curl_free" | "curlfree" => Ok(KernelFamily::CurlFree),
            "divergence-free" | "divergence_free" | "divfree" | "div-free" => {
                Ok(KernelFamily::DivergenceFree)
            }
            other => Err(Error::Config(format!("unknown kernel family `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Kernel {
    pub family: KernelFamily,
    pub hyper: Hyperparams,
    /// Spatial dimension `n_x` of the matrix families.
    pub input_dim: usize,
}

impl Kernel {
    pub fn new(family: KernelFamily, hyper: Hyperparams, input_dim: usize) -> Result<Self> {
        if !(2..=3).contains(&input_dim) {
            return Err(Error::InvalidInput(format!(
                "input_dim must be 2 or 3, got {input_dim}"
            )));
        }
        hyper.validate()?;
        Ok(Self {
            family,
            hyper,
            input_dim,
        })
    }

    pub fn with_hyper(&self, hyper: Hyperparams) -> Self {
        Self { hyper, ..*self }
    }

    pub fn is_matrix(&self) -> bool {
        self.family != KernelFamily::SeIndependent
    }

    /// Rows per location in a Gram matrix: 1 for SE, `n_x` otherwise.
    pub fn block_size(&self) -> usize {
        if self.is_matrix() {
            self.input_dim
        } else {
            1
        }
    }

    fn check_dims(&self, x: &[f64], x2: &[f64]) -> Result<()> {
        if x.len() != x2.len() {
            return Err(Error::DimensionMismatch(x.len(), x2.len()));
        }
        if self.is_matrix() && x.len() != self.input_dim {
            return Err(Error::DimensionMismatch(x.len(), self.input_dim));
        }
        Ok(())
    }

    /// Covariance block between two locations (`1×1` for SE).
    pub fn block(&self, x: &[f64], x2: &[f64]) -> Result<DMatrix<f64>> {
        self.check_dims(x, x2)?;
        Ok(match self.family {
            KernelFamily::SeIndependent => DMatrix::from_element(1, 1, se_unchecked(x, x2, &self.hyper)),
            _ => matrix_unchecked(x, x2, self),
        })
    }

    /// Derivative of [`Kernel::block`] with respect to coordinate `c` of `x2`.
    pub fn block_grad_x2(&self, x: &[f64], x2: &[f64], c: usize) -> Result<DMatrix<f64>> {
        self.check_dims(x, x2)?;
        let l = self.hyper.length_scale;
        let l2 = l * l;
        let n = x.len();
        let d: Vec<f64> = x.iter().zip(x2).map(|(a, b)| a - b).collect();
        let e = envelope(&d, &self.hyper);
        match self.family {
            KernelFamily::SeIndependent => Ok(DMatrix::from_element(1, 1, e * d[c] / l2)),
            family => {
                let r = DVector::from_iterator(n, d.iter().map(|v| v / l));
                let rc = r[c];
                let r2 = r.norm_squared();
                let mut ec = DVector::zeros(n);
                ec[c] = 1.0;
                let sym = &ec * r.transpose() + &r * ec.transpose();
                let outer = &r * r.transpose();
                let eye = DMatrix::<f64>::identity(n, n);
                let g = match family {
                    KernelFamily::CurlFree => sym * (e / l) + (eye - outer) * (e * rc / l),
                    _ => {
                        let shape = eye.clone() * ((n as f64) - 1.0 - r2) + outer;
                        eye * (2.0 * rc * e / l) - sym * (e / l) + shape * (e * rc / l)
                    }
                };
                Ok(g / l2)
            }
        }
    }

    /// Derivatives of [`Kernel::block`] with respect to `(log σ_f, log l)`.
    pub fn block_grad_log_hyper(&self, x: &[f64], x2: &[f64]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let k = self.block(x, x2)?;
        let l = self.hyper.length_scale;
        let n = x.len();
        let d: Vec<f64> = x.iter().zip(x2).map(|(a, b)| a - b).collect();
        let r2: f64 = d.iter().map(|v| v * v).sum::<f64>() / (l * l);
        let dsig = &k * 2.0;
        let dlen = match self.family {
            KernelFamily::SeIndependent => &k * r2,
            family => {
                let e = envelope(&d, &self.hyper);
                let s = e / (l * l);
                let r = DVector::from_iterator(n, d.iter().map(|v| v / l));
                let outer = &r * r.transpose();
                let eye = DMatrix::<f64>::identity(n, n);
                let extra = match family {
                    KernelFamily::CurlFree => outer * (2.0 * s),
                    _ => (eye * r2 - outer) * (2.0 * s),
                };
                &k * (r2 - 2.0) + extra
            }
        };
        Ok((dsig, dlen))
    }
}

fn envelope(d: &[f64], h: &Hyperparams) -> f64 {
    let dist2: f64 = d.iter().map(|v| v * v).sum();
    h.sigma_f * h.sigma_f * (-dist2 / (2.0 * h.length_scale * h.length_scale)).exp()
}

fn se_unchecked(x: &[f64], x2: &[f64], h: &Hyperparams) -> f64 {
    let d: Vec<f64> = x.iter().zip(x2).map(|(a, b)| a - b).collect();
    envelope(&d, h)
}

fn matrix_unchecked(x: &[f64], x2: &[f64], k: &Kernel) -> DMatrix<f64> {
    let n = x.len();
    let l = k.hyper.length_scale;
    let d: Vec<f64> = x.iter().zip(x2).map(|(a, b)| a - b).collect();
    let e = envelope(&d, &k.hyper) / (l * l);
    let r = DVector::from_iterator(n, d.iter().map(|v| v / l));
    let outer = &r * r.transpose();
    let eye = DMatrix::<f64>::identity(n, n);
    match k.family {
        KernelFamily::CurlFree => (eye - outer) * e,
        _ => (eye * ((n as f64) - 1.0 - r.norm_squared()) + outer) * e,
    }
}

/// Squared-exponential covariance `σ_f² exp(−‖x − x2‖² / 2l²)`.
///
/// Separations beyond roughly `38 l` underflow to exactly zero.
pub fn se_cov(x: &[f64], x2: &[f64], h: &Hyperparams) -> Result<f64> {
    if x.len() != x2.len() {
        return Err(Error::DimensionMismatch(x.len(), x2.len()));
    }
    Ok(se_unchecked(x, x2, h))
}

/// `n_x × n_x` covariance block of the curl-free or divergence-free kernel.
pub fn matrix_cov(x: &[f64], x2: &[f64], k: &Kernel) -> Result<DMatrix<f64>> {
    if !k.is_matrix() {
        return Err(Error::NotMatrixKernel);
    }
    k.block(x, x2)
}

/// Unfactored Gram matrix over `locations`.
pub fn gram_matrix<P: AsRef<[f64]>>(locations: &[P], k: &Kernel) -> Result<DMatrix<f64>> {
    cross_matrix(locations, locations, k)
}

/// Cross-covariance between two location sets, `(|a|·q) × (|b|·q)`.
pub fn cross_matrix<P: AsRef<[f64]>, Q: AsRef<[f64]>>(
    a: &[P],
    b: &[Q],
    k: &Kernel,
) -> Result<DMatrix<f64>> {
    let q = k.block_size();
    let mut out = DMatrix::zeros(a.len() * q, b.len() * q);
    for (i, xa) in a.iter().enumerate() {
        for (j, xb) in b.iter().enumerate() {
            let blk = k.block(xa.as_ref(), xb.as_ref())?;
            out.view_mut((i * q, j * q), (q, q)).copy_from(&blk);
        }
    }
    Ok(out)
}

/// Cholesky factorization of a covariance matrix with its diagonal jitter.
#[derive(Debug, Clone)]
pub struct GramFactor {
    pub k: DMatrix<f64>,
    /// Lower-triangular factor of `k + jitter_used * I`.
    pub chol: DMatrix<f64>,
    pub jitter_used: f64,
    pub logdet: f64,
}

impl GramFactor {
    /// Factorizes `k`, adding jitter from `1e-12` up to `1e-4` times
    /// `trace(k)/N` when a plain factorization fails. `hyper` is only used to
    /// label the error.
    pub fn factorize(k: DMatrix<f64>, hyper: &Hyperparams) -> Result<Self> {
        let n = k.nrows();
        if n == 0 || k.ncols() != n {
            return Err(Error::InvalidInput("Gram matrix must be square and non-empty".into()));
        }
        if k.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Gram matrix"));
        }
        let mean_diag = k.trace() / n as f64;
        let scale = if mean_diag > 0.0 { mean_diag } else { 1.0 };

        if let Some(chol) = cholesky_lower(&k, scale) {
            return Ok(Self::finish(k, chol, 0.0));
        }
        let mut jitter = JITTER_START * scale;
        while jitter <= JITTER_MAX * scale * (1.0 + 1e-9) {
            let mut kj = k.clone();
            for i in 0..n {
                kj[(i, i)] += jitter;
            }
            if let Some(chol) = cholesky_lower(&kj, scale) {
                return Ok(Self::finish(k, chol, jitter));
            }
            jitter *= JITTER_GROWTH;
        }
        Err(Error::NotPsd {
            sigma_f: hyper.sigma_f,
            length_scale: hyper.length_scale,
            jitter: JITTER_MAX * scale,
        })
    }

    fn finish(k: DMatrix<f64>, chol: DMatrix<f64>, jitter_used: f64) -> Self {
        let logdet = 2.0 * chol.diagonal().iter().map(|d| d.ln()).sum::<f64>();
        Self {
            k,
            chol,
            jitter_used,
            logdet,
        }
    }

    pub fn dim(&self) -> usize {
        self.k.nrows()
    }

    /// `L⁻¹ b`.
    pub fn solve_lower(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol
            .solve_lower_triangular(b)
            .expect("Cholesky factor has a positive diagonal")
    }

    /// `(K + jitter I)⁻¹ b`.
    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let y = self.solve_lower(b);
        self.chol
            .tr_solve_lower_triangular(&y)
            .expect("Cholesky factor has a positive diagonal")
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let m = DMatrix::from_column_slice(b.len(), 1, b.as_slice());
        DVector::from_column_slice(self.solve(&m).as_slice())
    }

    /// Explicit `L⁻¹`.
    pub fn lower_inverse(&self) -> DMatrix<f64> {
        self.solve_lower(&DMatrix::identity(self.dim(), self.dim()))
    }
}

/// Plain lower Cholesky; pivots below `1e-14 * scale` count as failure.
fn cholesky_lower(a: &DMatrix<f64>, scale: f64) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    let tol = 1e-14 * scale;
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > tol) {
            return None;
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / djj;
        }
    }
    Some(l)
}

/// Assembles and factorizes the Gram matrix over `locations`.
///
/// For `SeIndependent` this is the shared `N × N` per-axis matrix; the matrix
/// families give `(N n_x) × (N n_x)`.
pub fn gram<P: AsRef<[f64]>>(locations: &[P], k: &Kernel) -> Result<GramFactor> {
    if locations.is_empty() {
        return Err(Error::InvalidInput("gram needs at least one location".into()));
    }
    k.hyper.validate()?;
    GramFactor::factorize(gram_matrix(locations, k)?, &k.hyper)
}

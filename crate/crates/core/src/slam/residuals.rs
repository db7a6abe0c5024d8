//! Whitened residual blocks of the MAP objective and their Jacobians with
//! respect to the local increment used by [`Prepared::retract`].

use nalgebra::{DMatrix, DVector, Matrix3, Vector2, Vector3};

use crate::error::{Error, Result};
use crate::kernels::{gram_matrix, GramFactor, Kernel};
use crate::strapdown::corrected_dq;
use crate::types::{right_jacobian, right_jacobian_inv, skew, NavState, Quaternion};

use super::{Alignment, InitialPrior, Mode, OdometryNoise, PlanarParams, ZeroPrior};

/// Jacobian stored row by row as `(column, value)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseJacobian {
    pub nrows: usize,
    pub ncols: usize,
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl SparseJacobian {
    fn new(nrows: usize, ncols: usize) -> Self {
        Self {
            nrows,
            ncols,
            rows: vec![Vec::new(); nrows],
        }
    }

    fn add(&mut self, row: usize, col: usize, value: f64) {
        if value != 0.0 {
            self.rows[row].push((col, value));
        }
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.nrows, self.ncols);
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, v) in row {
                out[(i, j)] += v;
            }
        }
        out
    }
}

/// Current values of every unknown except the hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    pub states: Vec<NavState>,
    /// Planar mode only: per-epoch odometry displacement bias, metres per step.
    pub displacement_bias: Vec<Vector2<f64>>,
    /// Latent field value at each field node, local frame.
    pub field: Vec<Vector3<f64>>,
}

/// A problem after time alignment, with everything the residuals need.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub(crate) mode: Mode,
    pub(crate) records: Vec<crate::types::ImuRecord>,
    /// Planar mode: dead-reckoned displacement of each step.
    pub(crate) displacements: Vec<Vector2<f64>>,
    pub(crate) dead_reckoned: Vec<NavState>,
    pub(crate) alignment: Alignment,
    pub(crate) initial_state: NavState,
    pub(crate) initial_prior: Option<InitialPrior>,
    pub(crate) zero_prior: Option<ZeroPrior>,
    pub(crate) gravity: Vector3<f64>,
    pub(crate) w_gyro_sigma: f64,
    pub(crate) w_accel_sigma: f64,
    pub(crate) odometry: OdometryNoise,
    pub(crate) include_logdet: bool,
}

/// Residuals and the non-quadratic `log|K|` part of the objective.
#[derive(Debug, Clone)]
pub struct Linearization {
    pub residuals: DVector<f64>,
    pub jacobian: Option<SparseJacobian>,
    /// `log|K|` over all field axes; zero when the term is disabled.
    pub logdet: f64,
    pub logdet_grad: Option<DVector<f64>>,
}

impl Linearization {
    pub fn cost(&self) -> f64 {
        self.residuals.norm_squared() + self.logdet
    }
}

const FULL_STRIDE: usize = 15;

impl Prepared {
    pub fn epochs(&self) -> usize {
        self.records.len() + 1
    }

    pub fn field_nodes(&self) -> usize {
        self.alignment.node_epochs.len()
    }

    pub fn alignment(&self) -> &Alignment {
        &self.alignment
    }

    pub fn dead_reckoned(&self) -> &[NavState] {
        &self.dead_reckoned
    }

    fn planar(&self) -> Option<&PlanarParams> {
        match &self.mode {
            Mode::Planar(p) => Some(p),
            Mode::Full => None,
        }
    }

    fn field_offset(&self) -> usize {
        match self.mode {
            Mode::Planar(_) => 4 * self.epochs(),
            Mode::Full => FULL_STRIDE * self.epochs(),
        }
    }

    fn field_col(&self, node: usize) -> usize {
        self.field_offset() + 3 * node
    }

    /// First column of the position increment of `epoch` and its width.
    fn position_cols(&self, epoch: usize) -> (usize, usize) {
        match self.mode {
            Mode::Planar(_) => (2 * epoch, 2),
            Mode::Full => (FULL_STRIDE * epoch, 3),
        }
    }

    /// Length of the local increment vector.
    pub fn dim(&self) -> usize {
        self.field_offset() + 3 * self.field_nodes()
    }

    /// Dead reckoning for the states, zero bias, field nodes initialized from
    /// the rotated measurements.
    pub fn initial_estimate(&self) -> Estimate {
        let states = self.dead_reckoned.clone();
        let mut sums = vec![Vector3::zeros(); self.field_nodes()];
        let mut counts = vec![0usize; self.field_nodes()];
        for m in &self.alignment.matched {
            let q = states[self.alignment.node_epochs[m.node]].q;
            let local = match self.mode {
                Mode::Planar(_) => m.y,
                Mode::Full => q.rotate(&m.y),
            };
            sums[m.node] += local;
            counts[m.node] += 1;
        }
        let field = sums
            .into_iter()
            .zip(counts)
            .map(|(s, c)| s / c as f64)
            .collect();
        let displacement_bias = match self.mode {
            Mode::Planar(_) => vec![Vector2::zeros(); self.epochs()],
            Mode::Full => Vec::new(),
        };
        Estimate {
            states,
            displacement_bias,
            field,
        }
    }

    /// Applies a local increment: additive for vectors, `q ⊗ Exp(δθ)` for
    /// orientations.
    pub fn retract(&self, est: &Estimate, delta: &DVector<f64>) -> Estimate {
        let mut out = est.clone();
        let n = self.epochs();
        match self.mode {
            Mode::Planar(_) => {
                for k in 0..n {
                    out.states[k].p.x += delta[2 * k];
                    out.states[k].p.y += delta[2 * k + 1];
                    out.displacement_bias[k].x += delta[2 * n + 2 * k];
                    out.displacement_bias[k].y += delta[2 * n + 2 * k + 1];
                }
            }
            Mode::Full => {
                for k in 0..n {
                    let d = delta.fixed_rows::<FULL_STRIDE>(FULL_STRIDE * k);
                    let s = &mut out.states[k];
                    s.p += d.fixed_rows::<3>(0);
                    s.v += d.fixed_rows::<3>(3);
                    s.q = s.q.compose(&Quaternion::exp(&d.fixed_rows::<3>(6).into_owned()));
                    s.b_gyro += d.fixed_rows::<3>(9);
                    s.b_accel += d.fixed_rows::<3>(12);
                }
            }
        }
        let off = self.field_offset();
        for (j, m) in out.field.iter_mut().enumerate() {
            *m += delta.fixed_rows::<3>(off + 3 * j);
        }
        out
    }

    fn check_estimate(&self, est: &Estimate) -> Result<()> {
        let mismatch = |block, expected, got| Err(Error::BlockMismatch { block, expected, got });
        if est.states.len() != self.epochs() {
            return mismatch("states", self.epochs(), est.states.len());
        }
        if est.field.len() != self.field_nodes() {
            return mismatch("field", self.field_nodes(), est.field.len());
        }
        let nb = if self.planar().is_some() { self.epochs() } else { 0 };
        if est.displacement_bias.len() != nb {
            return mismatch("displacement_bias", nb, est.displacement_bias.len());
        }
        Ok(())
    }

    /// GP training locations: epoch positions of the field nodes.
    pub fn node_locations(&self, est: &Estimate) -> Vec<[f64; 3]> {
        self.alignment
            .node_epochs
            .iter()
            .map(|&e| {
                let p = est.states[e].p;
                [p.x, p.y, p.z]
            })
            .collect()
    }

    /// Stacked whitened residuals, optionally with the Jacobian. With
    /// `include_field = false` the magnetometer and GP blocks are skipped.
    pub fn residuals(
        &self,
        est: &Estimate,
        kernel: &Kernel,
        with_jacobian: bool,
        include_field: bool,
    ) -> Result<(DVector<f64>, Option<SparseJacobian>)> {
        let lin = self.linearize(est, kernel, with_jacobian, include_field)?;
        Ok((lin.residuals, lin.jacobian))
    }

    /// Full objective `‖r‖² + log|K|` (the log-determinant only when enabled).
    pub fn objective(&self, est: &Estimate, kernel: &Kernel) -> Result<f64> {
        let lin = self.linearize(est, kernel, false, true)?;
        Ok(lin.cost())
    }

    /// Residuals, Jacobian and the log-determinant term with its gradient.
    pub fn linearize(
        &self,
        est: &Estimate,
        kernel: &Kernel,
        with_jacobian: bool,
        include_field: bool,
    ) -> Result<Linearization> {
        self.check_estimate(est)?;
        let mut b = Builder {
            r: Vec::new(),
            jac: Vec::new(),
            with_jacobian,
            logdet: 0.0,
            logdet_grad: if with_jacobian && include_field && self.include_logdet {
                Some(DVector::zeros(self.dim()))
            } else {
                None
            },
        };
        match self.mode {
            Mode::Planar(p) => self.planar_blocks(est, &p, &mut b),
            Mode::Full => self.full_blocks(est, &mut b),
        }
        if include_field {
            self.mag_block(est, &mut b);
            self.gp_block(est, kernel, &mut b)?;
        }
        if let Some(z) = self.zero_prior {
            let w = z.weight.sqrt() / z.radius;
            for k in 0..self.epochs() {
                let (col, width) = self.position_cols(k);
                for c in 0..width {
                    let row = b.push(w * est.states[k].p[c]);
                    b.add(row, col + c, w);
                }
            }
        }
        let r = DVector::from_vec(b.r);
        if r.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("residual"));
        }
        let jac = with_jacobian.then(|| {
            let mut j = SparseJacobian::new(r.len(), self.dim());
            for (row, entries) in b.jac.into_iter().enumerate() {
                for (c, v) in entries {
                    j.add(row, c, v);
                }
            }
            j
        });
        Ok(Linearization {
            residuals: r,
            jacobian: jac,
            logdet: b.logdet,
            logdet_grad: b.logdet_grad,
        })
    }

    fn planar_blocks(&self, est: &Estimate, p: &PlanarParams, b: &mut Builder) {
        let n = self.epochs();
        let bias_col = |k: usize| 2 * n + 2 * k;
        if let Some(prior) = &self.initial_prior {
            let s = 1.0 / prior.position;
            for c in 0..2 {
                let row = b.push((est.states[0].p[c] - self.initial_state.p[c]) * s);
                b.add(row, c, s);
            }
        }
        let sb = 1.0 / p.bias_prior_sigma;
        for c in 0..2 {
            let row = b.push(est.displacement_bias[0][c] * sb);
            b.add(row, bias_col(0) + c, sb);
        }
        let so = 1.0 / self.odometry.position;
        for k in 0..n - 1 {
            for c in 0..2 {
                let pred = self.displacements[k][c] - est.displacement_bias[k][c];
                let row = b.push((est.states[k + 1].p[c] - est.states[k].p[c] - pred) * so);
                b.add(row, 2 * (k + 1) + c, so);
                b.add(row, 2 * k + c, -so);
                b.add(row, bias_col(k) + c, so);
            }
        }
        let sw = 1.0 / p.bias_walk_sigma;
        for k in 0..n - 1 {
            for c in 0..2 {
                let row = b.push((est.displacement_bias[k + 1][c] - est.displacement_bias[k][c]) * sw);
                b.add(row, bias_col(k + 1) + c, sw);
                b.add(row, bias_col(k) + c, -sw);
            }
        }
    }

    fn full_blocks(&self, est: &Estimate, b: &mut Builder) {
        let col = |k: usize, part: usize| FULL_STRIDE * k + 3 * part;
        let eye = Matrix3::identity();
        if let Some(prior) = &self.initial_prior {
            let s0 = &est.states[0];
            let init = &self.initial_state;
            let blocks: [(Vector3<f64>, usize, f64); 4] = [
                (s0.p - init.p, 0, prior.position),
                (s0.v - init.v, 1, prior.velocity),
                (s0.b_gyro - init.b_gyro, 3, prior.gyro_bias),
                (s0.b_accel - init.b_accel, 4, prior.accel_bias),
            ];
            for (e, part, sigma) in blocks {
                let row = b.push3(&(e / sigma));
                b.block(row, col(0, part), &eye, 1.0 / sigma);
            }
            let e = init.q.conjugate().compose(&s0.q).log();
            let row = b.push3(&(e / prior.attitude));
            b.block(row, col(0, 2), &right_jacobian_inv(&e), 1.0 / prior.attitude);
        }

        let g = self.gravity;
        let od = &self.odometry;
        for (k, rec) in self.records.iter().enumerate() {
            let s = &est.states[k];
            let s1 = &est.states[k + 1];
            let t = rec.period;
            let rot = s.q.to_rotmat();
            let u = rec.dv - s.b_accel * t;

            let p_pred = s.p + s.v * t + rot * (u * (0.5 * t)) + g * (0.5 * t * t);
            let sp = 1.0 / od.position;
            let row = b.push3(&((s1.p - p_pred) * sp));
            b.block(row, col(k + 1, 0), &eye, sp);
            b.block(row, col(k, 0), &eye, -sp);
            b.block(row, col(k, 1), &eye, -t * sp);
            b.block(row, col(k, 2), &(rot * skew(&(u * (0.5 * t)))), sp);
            b.block(row, col(k, 4), &rot, 0.5 * t * t * sp);

            let v_pred = s.v + rot * u + g * t;
            let sv = 1.0 / od.velocity;
            let row = b.push3(&((s1.v - v_pred) * sv));
            b.block(row, col(k + 1, 1), &eye, sv);
            b.block(row, col(k, 1), &eye, -sv);
            b.block(row, col(k, 2), &(rot * skew(&u)), sv);
            b.block(row, col(k, 4), &rot, t * sv);

            let dq = corrected_dq(rec, &s.b_gyro);
            let pred = s.q.compose(&dq);
            let e = pred.conjugate().compose(&s1.q).log();
            let sa = 1.0 / od.attitude;
            let jinv = right_jacobian_inv(&e);
            let re_t = Quaternion::exp(&e).to_rotmat().transpose();
            let rd_t = dq.to_rotmat().transpose();
            let row = b.push3(&(e * sa));
            b.block(row, col(k + 1, 2), &jinv, sa);
            b.block(row, col(k, 2), &(jinv * re_t * rd_t), -sa);
            let jb = jinv * re_t * right_jacobian(&(-s.b_gyro * t)) * t;
            b.block(row, col(k, 3), &jb, sa);

            for (part, sigma, diff) in [
                (3, self.w_gyro_sigma, s1.b_gyro - s.b_gyro),
                (4, self.w_accel_sigma, s1.b_accel - s.b_accel),
            ] {
                let sw = 1.0 / sigma;
                let row = b.push3(&(diff * sw));
                b.block(row, col(k + 1, part), &eye, sw);
                b.block(row, col(k, part), &eye, -sw);
            }
        }
    }

    fn mag_block(&self, est: &Estimate, b: &mut Builder) {
        for m in &self.alignment.matched {
            let field = est.field[m.node];
            let fc = self.field_col(m.node);
            match self.mode {
                Mode::Planar(_) => {
                    for c in 0..3 {
                        let s = 1.0 / m.sigma[c];
                        let row = b.push((m.y[c] - field[c]) * s);
                        b.add(row, fc + c, -s);
                    }
                }
                Mode::Full => {
                    let epoch = self.alignment.node_epochs[m.node];
                    let rt = est.states[epoch].q.to_rotmat().transpose();
                    let pred = rt * field;
                    let dtheta = -skew(&pred);
                    let tc = FULL_STRIDE * epoch + 6;
                    for c in 0..3 {
                        let s = 1.0 / m.sigma[c];
                        let row = b.push((m.y[c] - pred[c]) * s);
                        for j in 0..3 {
                            b.add(row, tc + j, dtheta[(c, j)] * s);
                            b.add(row, fc + j, -rt[(c, j)] * s);
                        }
                    }
                }
            }
        }
    }

    /// `L⁻¹ m` with `K = L Lᵀ` over the node locations.
    ///
    /// For a position coordinate `x_{j,c}` the Cholesky derivative gives
    /// `∂(L⁻¹m) = −Φ(L⁻¹ ∂K L⁻ᵀ) L⁻¹m`, where `Φ` keeps the strict lower
    /// triangle and half the diagonal. `∂K` is a rank-two update built from
    /// the kernel's spatial gradient, so each column costs `O(N²)`.
    fn gp_block(&self, est: &Estimate, kernel: &Kernel, b: &mut Builder) -> Result<()> {
        let locs = self.node_locations(est);
        let n = locs.len();
        let q = kernel.block_size();
        let factor = GramFactor::factorize(gram_matrix(&locs, kernel)?, &kernel.hyper)?;
        let linv = factor.lower_inverse();
        // The SE Gram matrix is shared by three independent axes.
        let axes = if q == 1 { 3.0 } else { 1.0 };
        if self.include_logdet {
            b.logdet = axes * factor.logdet;
        }
        let pos_width = match self.mode {
            Mode::Planar(_) => 2,
            Mode::Full => 3,
        };

        // One right-hand side per independent GP: three axes sharing K for
        // SE, a single point-major vector otherwise.
        let rhs: Vec<DVector<f64>> = if q == 1 {
            (0..3)
                .map(|a| DVector::from_iterator(n, est.field.iter().map(|m| m[a])))
                .collect()
        } else {
            vec![DVector::from_iterator(3 * n, est.field.iter().flat_map(|m| m.iter().copied()))]
        };
        let whitened: Vec<DVector<f64>> = rhs.iter().map(|m| &linv * m).collect();

        let base_rows: Vec<usize> = whitened
            .iter()
            .map(|r| {
                let start = b.r.len();
                for v in r.iter() {
                    b.push(*v);
                }
                start
            })
            .collect();
        if !b.with_jacobian {
            return Ok(());
        }

        // Field columns.
        for (gp, &row0) in base_rows.iter().enumerate() {
            for i in 0..linv.nrows() {
                for jj in 0..=i {
                    let v = linv[(i, jj)];
                    let (node, axis) = if q == 1 { (jj, gp) } else { (jj / 3, jj % 3) };
                    b.add(row0 + i, self.field_col(node) + axis, v);
                }
            }
        }

        // Position columns.
        let dim = q * n;
        for j in 0..n {
            let (pcol, _) = self.position_cols(self.alignment.node_epochs[j]);
            for c in 0..pos_width {
                let mut u = DMatrix::zeros(dim, q);
                for i in 0..n {
                    if i == j {
                        continue;
                    }
                    let g = kernel.block_grad_x2(&locs[i], &locs[j], c)?;
                    u.view_mut((i * q, 0), (q, q)).copy_from(&g);
                }
                let bmat = &linv * &u;
                if let Some(grad) = b.logdet_grad.as_mut() {
                    // ∂ log|K| = tr(K⁻¹ ∂K) = 2 Σ_s (L⁻¹e_s)ᵀ(L⁻¹u_s)
                    let tr: f64 = (0..q).map(|s| linv.column(j * q + s).dot(&bmat.column(s))).sum();
                    grad[pcol + c] += 2.0 * axes * tr;
                }
                for (gp, r) in whitened.iter().enumerate() {
                    let mut dr = DVector::zeros(dim);
                    for s in 0..q {
                        let a = linv.column(j * q + s);
                        let bv = bmat.column(s);
                        let (mut sum_a, mut sum_b) = (0.0, 0.0);
                        for i in 0..dim {
                            dr[i] -= a[i] * sum_b + bv[i] * sum_a + a[i] * bv[i] * r[i];
                            sum_a += a[i] * r[i];
                            sum_b += bv[i] * r[i];
                        }
                    }
                    for i in 0..dim {
                        b.add(base_rows[gp] + i, pcol + c, dr[i]);
                    }
                }
            }
        }
        Ok(())
    }
}

struct Builder {
    r: Vec<f64>,
    jac: Vec<Vec<(usize, f64)>>,
    with_jacobian: bool,
    logdet: f64,
    logdet_grad: Option<DVector<f64>>,
}

impl Builder {
    fn push(&mut self, v: f64) -> usize {
        self.r.push(v);
        if self.with_jacobian {
            self.jac.push(Vec::new());
        }
        self.r.len() - 1
    }

    fn push3(&mut self, v: &Vector3<f64>) -> usize {
        let row = self.push(v.x);
        self.push(v.y);
        self.push(v.z);
        row
    }

    fn add(&mut self, row: usize, col: usize, v: f64) {
        if self.with_jacobian && v != 0.0 {
            self.jac[row].push((col, v));
        }
    }

    fn block(&mut self, row: usize, col: usize, m: &Matrix3<f64>, scale: f64) {
        for i in 0..3 {
            for j in 0..3 {
                self.add(row + i, col + j, m[(i, j)] * scale);
            }
        }
    }
}

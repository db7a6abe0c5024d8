//! Levenberg–Marquardt over an abstract manifold-valued parameter.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmOptions {
    pub max_iterations: usize,
    /// Stop when an accepted step changes the cost by less than this fraction.
    pub rel_cost_tol: f64,
    /// Stop when `‖Jᵀr‖∞` falls below this.
    pub grad_tol: f64,
    pub initial_lambda: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self {
            max_iterations: 2000,
            rel_cost_tol: 1e-10,
            grad_tol: 1e-8,
            initial_lambda: 1e-3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LmReport<X> {
    pub x: X,
    pub cost: f64,
    /// Cost before the first iteration followed by the cost after each one.
    pub cost_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

const LAMBDA_MAX: f64 = 1e16;

/// Objective `‖r‖² + extra` linearized at a point. `extra` is a smooth
/// scalar term that is modelled to first order only.
#[derive(Debug, Clone)]
pub struct Model {
    pub residuals: DVector<f64>,
    pub jacobian: Option<DMatrix<f64>>,
    pub extra: f64,
    pub extra_grad: Option<DVector<f64>>,
}

impl Model {
    #[cfg(test)]
    pub fn residual_only(residuals: DVector<f64>, jacobian: Option<DMatrix<f64>>) -> Self {
        Self {
            residuals,
            jacobian,
            extra: 0.0,
            extra_grad: None,
        }
    }

    fn cost(&self) -> f64 {
        self.residuals.norm_squared() + self.extra
    }
}

/// Minimizes `‖r(x)‖² + extra(x)`. `eval` linearizes with respect to the
/// local increment consumed by `retract`; the Jacobian is requested only when
/// the flag is set.
pub fn minimize<X, E, R>(x0: X, mut eval: E, retract: R, opts: &LmOptions) -> Result<LmReport<X>>
where
    X: Clone,
    E: FnMut(&X, bool) -> Result<Model>,
    R: Fn(&X, &DVector<f64>) -> X,
{
    let m0 = eval(&x0, true)?;
    let mut cost = m0.cost();
    if !cost.is_finite() {
        return Err(Error::Diverged {
            iterations: 0,
            last_cost: f64::NAN,
        });
    }
    let mut x = x0;
    let mut trace = vec![cost];
    let mut lambda = opts.initial_lambda;
    let mut nu = 2.0;
    let mut iterations = 0;
    let mut converged = false;

    // Half-gradient of the objective and Gauss–Newton Hessian of ‖r‖².
    let (mut h, mut g) = normal_equations(&m0);
    while iterations < opts.max_iterations {
        if g.amax() < opts.grad_tol {
            converged = true;
            break;
        }
        iterations += 1;

        let max_diag = h.diagonal().amax().max(f64::MIN_POSITIVE);
        let mut damped = h.clone();
        for i in 0..damped.nrows() {
            damped[(i, i)] += lambda * h[(i, i)].max(1e-12 * max_diag);
        }
        let step = damped.cholesky().map(|c| -c.solve(&g));
        let accepted = match step {
            Some(delta) if delta.iter().all(|v| v.is_finite()) => {
                let predicted = -(2.0 * delta.dot(&g) + (&h * &delta).dot(&delta));
                let trial = retract(&x, &delta);
                match eval(&trial, false) {
                    Ok(mt) => {
                        let ct = mt.cost();
                        if ct.is_finite() && ct < cost && predicted > 0.0 {
                            Some((trial, ct, (cost - ct) / predicted))
                        } else {
                            None
                        }
                    }
                    Err(Error::NotPsd { .. }) => None,
                    Err(e) => return Err(e),
                }
            }
            _ => None,
        };

        match accepted {
            Some((trial, ct, rho)) => {
                let rel = (cost - ct) / cost.abs().max(f64::MIN_POSITIVE);
                let mn = eval(&trial, true)?;
                x = trial;
                cost = ct;
                (h, g) = normal_equations(&mn);
                trace.push(cost);
                lambda *= (1.0 - (2.0 * rho - 1.0).powi(3)).max(1.0 / 3.0);
                nu = 2.0;
                if rel < opts.rel_cost_tol {
                    converged = true;
                    break;
                }
            }
            None => {
                trace.push(cost);
                lambda *= nu;
                nu *= 2.0;
                if lambda > LAMBDA_MAX {
                    // No representable descent step remains.
                    converged = true;
                    break;
                }
            }
        }
    }
    if !converged && g.amax() < opts.grad_tol {
        converged = true;
    }

    Ok(LmReport {
        x,
        cost,
        cost_trace: trace,
        iterations,
        converged,
    })
}

fn normal_equations(m: &Model) -> (DMatrix<f64>, DVector<f64>) {
    let j = m.jacobian.as_ref().expect("Jacobian requested");
    let mut g = j.tr_mul(&m.residuals);
    if let Some(eg) = &m.extra_grad {
        g += eg * 0.5;
    }
    (j.tr_mul(j), g)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &DVector<f64>, _: bool) -> Result<Model> {
        let r = DVector::from_vec(vec![10.0 * (x[1] - x[0] * x[0]), 1.0 - x[0]]);
        let j = DMatrix::from_row_slice(2, 2, &[-20.0 * x[0], 10.0, -1.0, 0.0]);
        Ok(Model::residual_only(r, Some(j)))
    }

    #[test]
    fn solves_rosenbrock() {
        let out = minimize(
            DVector::from_vec(vec![-1.2, 1.0]),
            rosenbrock,
            |x, d| x + d,
            &LmOptions::default(),
        )
        .unwrap();
        assert!(out.converged);
        assert!((out.x[0] - 1.0).abs() < 1e-6 && (out.x[1] - 1.0).abs() < 1e-6);
        assert!(out.cost_trace.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(out.cost_trace.len(), out.iterations + 1);
    }

    #[test]
    fn linear_problem_in_few_steps() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 7.0]);
        let b = DVector::from_vec(vec![1.0, -1.0, 2.0]);
        let out = minimize(
            DVector::zeros(2),
            |x: &DVector<f64>, _| Ok(Model::residual_only(&a * x - &b, Some(a.clone()))),
            |x, d| x + d,
            &LmOptions {
                rel_cost_tol: 0.0,
                ..LmOptions::default()
            },
        )
        .unwrap();
        assert!(out.converged && out.iterations < 50);
        let exact = (a.transpose() * &a).cholesky().unwrap().solve(&(a.transpose() * &b));
        assert!((out.x - exact).amax() < 1e-8);
    }

    #[test]
    fn non_finite_start_is_divergence() {
        let res = minimize(
            DVector::from_element(1, f64::NAN),
            |x: &DVector<f64>, _| Ok(Model::residual_only(x.clone(), Some(DMatrix::identity(1, 1)))),
            |x, d| x + d,
            &LmOptions::default(),
        );
        assert!(matches!(res, Err(Error::Diverged { .. })));
    }

    #[test]
    fn extra_term_is_minimized_with_residuals() {
        // (x - 1)² + (x - 3)² / 4 has its minimum at x = 1.4.
        let out = minimize(
            DVector::from_element(1, -2.0),
            |x: &DVector<f64>, _| {
                Ok(Model {
                    residuals: DVector::from_element(1, x[0] - 1.0),
                    jacobian: Some(DMatrix::identity(1, 1)),
                    extra: (x[0] - 3.0).powi(2) / 4.0,
                    extra_grad: Some(DVector::from_element(1, (x[0] - 3.0) / 2.0)),
                })
            },
            |x, d| x + d,
            &LmOptions::default(),
        )
        .unwrap();
        assert!((out.x[0] - 1.4).abs() < 1e-6);
        assert!(out.cost_trace.windows(2).all(|w| w[1] <= w[0]));
    }
}

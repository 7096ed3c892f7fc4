//! Small dense optimizers used by the M-step fits: Newton-Raphson with
//! step-halving for concave objectives with analytic derivatives, and a BFGS
//! quasi-Newton with central-difference gradients for objectives evaluated
//! through inner solves.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};

pub struct NewtonOptions {
    pub tol_grad: f64,
    pub max_iters: usize,
    pub max_halvings: usize,
    /// Label used in non-convergence errors.
    pub what: &'static str,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        NewtonOptions {
            tol_grad: 1e-10,
            max_iters: 100,
            max_halvings: 30,
            what: "newton",
        }
    }
}

pub struct NewtonResult {
    pub x: DVector<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Gradient-norm history, kept for non-convergence reports.
    pub trace: Vec<f64>,
}

impl NewtonResult {
    /// Converts a non-converged result into the corresponding error.
    pub fn require_converged(self, what: &'static str) -> Result<NewtonResult> {
        if self.converged {
            Ok(self)
        } else {
            Err(Error::NonConvergence {
                what,
                iterations: self.iterations,
                grad_norm: self.grad_norm,
                trace: self.trace,
            })
        }
    }
}

/// Maximizes a concave objective by Newton-Raphson with step-halving.
///
/// The closure returns `(value, gradient, hessian)`; the Hessian must be the
/// (negative-definite) second derivative of the objective. A Cholesky
/// factorization of its negation supplies the step; failure to factor is a
/// singular design. Running out of iterations is reported through the
/// `converged` flag rather than an error so callers can apply their own
/// policy (for instance the separation rule of logistic fits).
pub fn newton_maximize<F>(x0: DVector<f64>, f: F, opts: &NewtonOptions) -> Result<NewtonResult>
where
    F: Fn(&DVector<f64>) -> (f64, DVector<f64>, DMatrix<f64>),
{
    let mut x = x0;
    let (mut value, mut grad, mut hess) = f(&x);
    let mut trace = Vec::new();
    let mut iterations = 0;
    for iter in 0..opts.max_iters {
        iterations = iter;
        let grad_norm = grad.amax();
        trace.push(grad_norm);
        if grad_norm < opts.tol_grad {
            return Ok(NewtonResult {
                x,
                value,
                grad_norm,
                iterations: iter,
                converged: true,
                trace,
            });
        }
        let neg_hess = -&hess;
        let chol = Cholesky::new(neg_hess).ok_or_else(|| Error::SingularDesign {
            detail: format!(
                "{}: Hessian not negative definite at iteration {iter}",
                opts.what
            ),
        })?;
        let direction = chol.solve(&grad);
        if !direction.iter().all(|d| d.is_finite())
            || direction.amax() > 1e12 * (1.0 + x.amax())
        {
            return Err(Error::SingularDesign {
                detail: format!(
                    "{}: Newton step blew up at iteration {iter} (rank-deficient Hessian)",
                    opts.what
                ),
            });
        }

        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..=opts.max_halvings {
            let candidate = &x + &direction * step;
            let (v, g, h) = f(&candidate);
            // Accept rounding-level decreases so quadratic convergence can
            // run all the way into the noise floor.
            if v.is_finite() && v >= value - 1e-12 * (1.0 + value.abs()) {
                x = candidate;
                value = v;
                grad = g;
                hess = h;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            // No acceptable step: stalled at the arithmetic floor.
            let grad_norm = grad.amax();
            return Ok(NewtonResult {
                x,
                value,
                grad_norm,
                iterations: iter + 1,
                converged: grad_norm < 1e-6,
                trace,
            });
        }
    }
    let grad_norm = grad.amax();
    Ok(NewtonResult {
        x,
        value,
        grad_norm,
        iterations: iterations + 1,
        converged: grad_norm < opts.tol_grad,
        trace,
    })
}

pub struct BfgsOptions {
    pub tol_grad: f64,
    pub max_iters: usize,
    /// Relative central-difference step.
    pub fd_step: f64,
    pub what: &'static str,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        BfgsOptions {
            tol_grad: 1e-6,
            max_iters: 200,
            fd_step: 1e-5,
            what: "bfgs",
        }
    }
}

pub struct BfgsResult {
    pub x: DVector<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn fd_gradient<F: Fn(&DVector<f64>) -> f64>(f: &F, x: &DVector<f64>, rel: f64) -> DVector<f64> {
    let d = x.len();
    let mut grad = DVector::zeros(d);
    let mut probe = x.clone();
    for i in 0..d {
        let h = rel * (1.0 + x[i].abs());
        probe[i] = x[i] + h;
        let fp = f(&probe);
        probe[i] = x[i] - h;
        let fm = f(&probe);
        probe[i] = x[i];
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Maximizes an objective by BFGS with central-difference gradients and
/// Armijo backtracking. Convergence is declared on a small gradient or a
/// vanishing accepted step.
pub fn bfgs_maximize<F>(x0: DVector<f64>, f: F, opts: &BfgsOptions) -> Result<BfgsResult>
where
    F: Fn(&DVector<f64>) -> f64,
{
    let d = x0.len();
    let mut x = x0;
    let mut value = f(&x);
    if !value.is_finite() {
        return Err(Error::Domain {
            op: "bfgs_maximize",
            msg: "objective not finite at the initial point".into(),
        });
    }
    let mut grad = fd_gradient(&f, &x, opts.fd_step);
    let mut h_inv = DMatrix::<f64>::identity(d, d);
    let mut trace = Vec::new();

    for iter in 0..opts.max_iters {
        let grad_norm = grad.amax();
        trace.push(grad_norm);
        if grad_norm < opts.tol_grad {
            return Ok(BfgsResult {
                x,
                value,
                grad_norm,
                iterations: iter,
                converged: true,
            });
        }

        let mut direction = &h_inv * &grad;
        if direction.dot(&grad) <= 0.0 {
            // Curvature information went bad; restart from steepest ascent.
            h_inv = DMatrix::identity(d, d);
            direction = grad.clone();
        }

        let slope = direction.dot(&grad);
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..50 {
            let candidate = &x + &direction * step;
            let v = f(&candidate);
            if v.is_finite() && v >= value + 1e-4 * step * slope {
                accepted = Some((candidate, v));
                break;
            }
            step *= 0.5;
        }
        let Some((x_new, v_new)) = accepted else {
            // Line search exhausted: treat a tiny gradient as convergence.
            return Ok(BfgsResult {
                x,
                value,
                grad_norm,
                iterations: iter,
                converged: grad_norm < opts.tol_grad.max(1e-4),
            });
        };

        let grad_new = fd_gradient(&f, &x_new, opts.fd_step);
        let s = &x_new - &x;
        let y = &grad_new - &grad;
        // BFGS inverse update for maximization tracks -f minimization with
        // yᵀs < 0; keep the standard form on the negated pair.
        let ys = -y.dot(&s);
        if ys > 1e-12 * y.norm() * s.norm() {
            let rho = 1.0 / ys;
            let sy = &s * (-&y).transpose();
            let eye = DMatrix::identity(d, d);
            let left = &eye - &sy * rho;
            h_inv = &left * h_inv * left.transpose() + &s * s.transpose() * rho;
        }

        let step_size = s.amax();
        x = x_new;
        value = v_new;
        grad = grad_new;
        if step_size < 1e-12 {
            let grad_norm = grad.amax();
            return Ok(BfgsResult {
                x,
                value,
                grad_norm,
                iterations: iter + 1,
                converged: true,
            });
        }
    }
    let grad_norm = grad.amax();
    if grad_norm < opts.tol_grad.max(1e-4) {
        return Ok(BfgsResult {
            x,
            value,
            grad_norm,
            iterations: opts.max_iters,
            converged: true,
        });
    }
    Err(Error::NonConvergence {
        what: opts.what,
        iterations: opts.max_iters,
        grad_norm,
        trace,
    })
}

//! Quasi-Newton minimization with a monotone backtracking line search.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone)]
pub struct BfgsOptions {
    pub max_iter: usize,
    /// Stop when `max_k |dx_k| / (1 + |x_k|)` falls below this.
    pub x_rel_tol: f64,
    /// Stop when the gradient's max-norm falls below this.
    pub grad_tol: f64,
    /// Stop when the relative decrease in `f` falls below this.
    pub f_rel_tol: f64,
    /// Largest trial step in the max-norm.
    pub max_step: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            x_rel_tol: 1e-6,
            grad_tol: 1e-6,
            f_rel_tol: 1e-12,
            max_step: 5.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BfgsResult {
    pub x: DVector<f64>,
    pub f: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective value after each accepted iteration, starting with `f(x0)`.
    pub trace: Vec<f64>,
}

/// Minimize `f` starting from `x0`. `fg` returns the value and gradient, or
/// `None` when the point is outside the domain; such points are treated as
/// failed line-search trials. Accepted iterates never increase `f`.
pub fn minimize<F>(mut fg: F, x0: DVector<f64>, opts: &BfgsOptions) -> Option<BfgsResult>
where
    F: FnMut(&DVector<f64>) -> Option<(f64, DVector<f64>)>,
{
    let n = x0.len();
    let (mut f, mut g) = fg(&x0)?;
    let mut x = x0;
    let mut h = DMatrix::<f64>::identity(n, n);
    let mut trace = vec![f];
    if n == 0 {
        return Some(BfgsResult {
            x,
            f,
            iterations: 0,
            converged: true,
            trace,
        });
    }

    for iter in 1..=opts.max_iter {
        if g.amax() < opts.grad_tol {
            return Some(BfgsResult {
                x,
                f,
                iterations: iter - 1,
                converged: true,
                trace,
            });
        }
        let mut dir = -(&h * &g);
        let mut slope = g.dot(&dir);
        if !(slope < 0.0) {
            h = DMatrix::identity(n, n);
            dir = -g.clone();
            slope = g.dot(&dir);
        }
        // Keep trial steps within a sane box in parameter space.
        let len = dir.amax();
        let mut step = if len > opts.max_step { opts.max_step / len } else { 1.0 };

        let mut accepted = None;
        for _ in 0..60 {
            let xn = &x + &dir * step;
            if let Some((fnew, gnew)) = fg(&xn) {
                if fnew.is_finite() && fnew <= f + 1e-4 * step * slope {
                    accepted = Some((xn, fnew, gnew));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((xn, fnew, gnew)) = accepted else {
            // No descent possible along the quasi-Newton direction: we are
            // at a stationary point up to numerical resolution.
            return Some(BfgsResult {
                x,
                f,
                iterations: iter,
                converged: g.amax() < opts.grad_tol.sqrt(),
                trace,
            });
        };

        let s = &xn - &x;
        let y = &gnew - &g;
        let sy = s.dot(&y);
        let x_change = s
            .iter()
            .zip(xn.iter())
            .map(|(d, v)| d.abs() / (1.0 + v.abs()))
            .fold(0.0, f64::max);
        let f_change = (f - fnew).abs() / (1.0 + f.abs());
        if sy > 1e-12 * s.norm() * y.norm() {
            if iter == 1 {
                // Rescale the identity to the observed curvature before the first update.
                h *= sy / y.norm_squared();
            }
            let rho = 1.0 / sy;
            let hy = &h * &y;
            let yhy = y.dot(&hy);
            h += (&s * s.transpose()) * (rho * rho * yhy + rho)
                - (&hy * s.transpose() + &s * hy.transpose()) * rho;
        }
        x = xn;
        f = fnew;
        g = gnew;
        trace.push(f);
        if g.amax() < opts.grad_tol || (x_change < opts.x_rel_tol && f_change < opts.f_rel_tol)
        {
            return Some(BfgsResult {
                x,
                f,
                iterations: iter,
                converged: true,
                trace,
            });
        }
    }
    Some(BfgsResult {
        x,
        f,
        iterations: opts.max_iter,
        converged: false,
        trace,
    })
}

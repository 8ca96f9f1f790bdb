//! Full-batch gradient descent with Barzilai-Borwein trial steps and an Armijo
//! backtracking line search.

use serde::Serialize;

use crate::net::Params;

#[derive(Clone, Copy, Debug)]
pub struct DescentOptions {
    /// Stop once `‖g‖ ≤ rel_grad_tol · (1 + ‖g₀‖)`.
    pub rel_grad_tol: f64,
    pub max_iters: usize,
}

impl Default for DescentOptions {
    fn default() -> Self {
        Self {
            rel_grad_tol: 1e-8,
            max_iters: 50_000,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct DescentOutcome {
    #[serde(skip)]
    pub params: Params,
    pub value: f64,
    pub grad_norm: f64,
    pub initial_grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Minimizes `objective`, which returns the value and gradient at a point.
pub fn minimize<F>(mut objective: F, start: Params, opts: DescentOptions) -> DescentOutcome
where
    F: FnMut(&Params) -> (f64, Params),
{
    const ARMIJO: f64 = 1e-4;
    let mut x = start;
    let (mut fx, mut g) = objective(&x);
    let g0 = g.norm();
    let tol = opts.rel_grad_tol * (1.0 + g0);
    let mut step = 1.0 / g0.max(1.0);
    let mut iterations = 0;
    while iterations < opts.max_iters {
        let gn2 = g.norm_sq();
        if gn2.sqrt() <= tol || !fx.is_finite() {
            break;
        }
        iterations += 1;
        let mut t = step;
        let (next, f_next, g_next) = loop {
            let cand = x.plus(-t, &g);
            let (fc, gc) = objective(&cand);
            if fc <= fx - ARMIJO * t * gn2 || t < 1e-300 {
                break (cand, fc, gc);
            }
            t *= 0.5;
        };
        // Barzilai-Borwein step from the secant pair.
        let s = next.plus(-1.0, &x);
        let y = g_next.plus(-1.0, &g);
        let sy = s.dot(&y);
        step = if sy > 0.0 { s.norm_sq() / sy } else { 2.0 * t };
        if f_next == fx && s.norm() == 0.0 {
            x = next;
            fx = f_next;
            g = g_next;
            break;
        }
        x = next;
        fx = f_next;
        g = g_next;
    }
    let grad_norm = g.norm();
    DescentOutcome {
        params: x,
        value: fx,
        grad_norm,
        initial_grad_norm: g0,
        iterations,
        converged: grad_norm <= tol,
    }
}

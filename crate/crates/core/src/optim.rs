//! Quasi-Newton minimization.
//!
//! A BFGS inverse-Hessian update with a backtracking Armijo line search.
//! Non-finite objective values are treated as a barrier: the step is cut
//! until the objective is finite again.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BfgsOptions {
    pub max_iterations: usize,
    /// Converged once the largest gradient component drops below this.
    pub gradient_tolerance: f64,
    /// Converged once the objective changes by less than this (relative)
    /// over `stall_iterations` consecutive steps.
    pub f_tolerance: f64,
    pub stall_iterations: usize,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        BfgsOptions {
            max_iterations: 2000,
            gradient_tolerance: 1e-7,
            f_tolerance: 1e-13,
            stall_iterations: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BfgsOutcome {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    pub converged: bool,
    pub grad_norm: f64,
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, g| m.max(g.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimizes `f`, which returns the objective and writes its gradient.
pub fn minimize<F>(mut f: F, x0: &[f64], opts: &BfgsOptions) -> BfgsOutcome
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut g = vec![0.0; n];
    let mut fx = f(&x, &mut g);
    if !fx.is_finite() {
        return BfgsOutcome { x, f: fx, iterations: 0, converged: false, grad_norm: f64::NAN };
    }
    let mut h = identity(n);
    let mut fresh_h = true;
    let mut stall = 0;
    let mut x_new = vec![0.0; n];
    let mut g_new = vec![0.0; n];

    for iter in 0..opts.max_iterations {
        let gnorm = inf_norm(&g);
        if gnorm < opts.gradient_tolerance {
            return BfgsOutcome { x, f: fx, iterations: iter, converged: true, grad_norm: gnorm };
        }
        let mut dir: Vec<f64> = (0..n).map(|i| -dot(&h[i * n..(i + 1) * n], &g)).collect();
        let mut slope = dot(&dir, &g);
        if !(slope < 0.0) {
            h = identity(n);
            fresh_h = true;
            dir = g.iter().map(|v| -v).collect();
            slope = dot(&dir, &g);
        }

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            for i in 0..n {
                x_new[i] = x[i] + step * dir[i];
            }
            let f_new = f(&x_new, &mut g_new);
            if f_new.is_finite() && f_new <= fx + 1e-4 * step * slope {
                accepted = Some(f_new);
                break;
            }
            step *= 0.5;
        }
        let Some(f_new) = accepted else {
            if fresh_h {
                let converged = gnorm < opts.gradient_tolerance.sqrt();
                return BfgsOutcome { x, f: fx, iterations: iter, converged, grad_norm: gnorm };
            }
            h = identity(n);
            fresh_h = true;
            continue;
        };

        let s: Vec<f64> = (0..n).map(|i| x_new[i] - x[i]).collect();
        let y: Vec<f64> = (0..n).map(|i| g_new[i] - g[i]).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            if fresh_h {
                let scale = sy / dot(&y, &y);
                h.iter_mut().for_each(|v| *v *= scale);
            }
            update_inverse_hessian(&mut h, &s, &y, sy);
            fresh_h = false;
        }

        let rel = (fx - f_new).abs() / (1.0 + fx.abs());
        stall = if rel < opts.f_tolerance { stall + 1 } else { 0 };
        x.copy_from_slice(&x_new);
        g.copy_from_slice(&g_new);
        fx = f_new;
        if stall >= opts.stall_iterations {
            let gnorm = inf_norm(&g);
            return BfgsOutcome { x, f: fx, iterations: iter + 1, converged: true, grad_norm: gnorm };
        }
    }
    let gnorm = inf_norm(&g);
    BfgsOutcome { x, f: fx, iterations: opts.max_iterations, converged: gnorm < opts.gradient_tolerance, grad_norm: gnorm }
}

fn identity(n: usize) -> Vec<f64> {
    let mut h = vec![0.0; n * n];
    for i in 0..n {
        h[i * n + i] = 1.0;
    }
    h
}

// H <- (I - rho s y') H (I - rho y s') + rho s s'
fn update_inverse_hessian(h: &mut [f64], s: &[f64], y: &[f64], sy: f64) {
    let n = s.len();
    let rho = 1.0 / sy;
    let hy: Vec<f64> = (0..n).map(|i| dot(&h[i * n..(i + 1) * n], y)).collect();
    let yhy = dot(y, &hy);
    for i in 0..n {
        for j in 0..n {
            h[i * n + j] += rho * ((1.0 + rho * yhy) * s[i] * s[j] - hy[i] * s[j] - s[i] * hy[j]);
        }
    }
}

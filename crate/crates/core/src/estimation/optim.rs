//! BFGS with central-difference gradients, and a numeric Hessian.

#[derive(Debug, Clone, Copy)]
pub struct BfgsOptions {
    pub max_iterations: usize,
    /// Relative finite-difference step.
    pub gradient_step: f64,
    /// Max-norm of the gradient required for convergence.
    pub grad_tol: f64,
    /// Relative change of the objective required for convergence.
    pub rel_tol: f64,
}

#[derive(Debug, Clone)]
pub struct OptimOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn fd_step(x: f64, rel: f64) -> f64 {
    rel * x.abs().max(1.0)
}

pub fn numeric_gradient<F: Fn(&[f64]) -> f64>(f: &F, x: &[f64], rel_step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let h = fd_step(x[i], rel_step);
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Richardson-extrapolated central differences, `(4·D(h/2) − D(h)) / 3`.
pub fn refined_gradient<F: Fn(&[f64]) -> f64>(f: &F, x: &[f64], rel_step: f64) -> Vec<f64> {
    let coarse = numeric_gradient(f, x, rel_step);
    let fine = numeric_gradient(f, x, 0.5 * rel_step);
    fine.iter()
        .zip(&coarse)
        .map(|(a, b)| (4.0 * a - b) / 3.0)
        .collect()
}

/// Central second differences. Row-major `n × n`.
pub fn numeric_hessian<F: Fn(&[f64]) -> f64>(f: &F, x: &[f64], rel_step: f64) -> Vec<f64> {
    let n = x.len();
    let h: Vec<f64> = x.iter().map(|&v| fd_step(v, rel_step)).collect();
    let f0 = f(x);
    let mut p = x.to_vec();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        p[i] = x[i] + h[i];
        let up = f(&p);
        p[i] = x[i] - h[i];
        let down = f(&p);
        p[i] = x[i];
        out[i * n + i] = (up - 2.0 * f0 + down) / (h[i] * h[i]);
        for j in 0..i {
            let mut eval = |si: f64, sj: f64| {
                p[i] = x[i] + si * h[i];
                p[j] = x[j] + sj * h[j];
                let v = f(&p);
                p[i] = x[i];
                p[j] = x[j];
                v
            };
            let v = (eval(1.0, 1.0) - eval(1.0, -1.0) - eval(-1.0, 1.0) + eval(-1.0, -1.0))
                / (4.0 * h[i] * h[j]);
            out[i * n + j] = v;
            out[j * n + i] = v;
        }
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn max_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn identity(n: usize, scale: f64) -> Vec<f64> {
    let mut h = vec![0.0; n * n];
    for i in 0..n {
        h[i * n + i] = scale;
    }
    h
}

/// Minimizes `f`. Stops when the relative objective change of an accepted
/// step and the gradient max-norm are both below tolerance, when the line
/// search cannot make progress even along steepest descent (the gradient is
/// then re-estimated by extrapolation, and a gradient within 10x tolerance
/// passes if the last quasi-Newton decrement was below `rel_tol`), or after
/// `max_iterations` steps.
pub fn minimize_bfgs<F: Fn(&[f64]) -> f64>(f: &F, x0: &[f64], opts: &BfgsOptions) -> OptimOutcome {
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut fx = f(&x);
    let mut g = numeric_gradient(f, &x, opts.gradient_step);
    let mut hinv = identity(n, 1.0);
    let mut fresh = true;
    let mut decrement: Option<f64> = None;
    let mut iterations = 0;
    let mut converged = false;

    if n == 0 {
        return OptimOutcome {
            x,
            value: fx,
            grad: g,
            iterations: 0,
            converged: true,
        };
    }

    while iterations < opts.max_iterations {
        iterations += 1;

        let mut d: Vec<f64> = (0..n)
            .map(|i| -dot(&hinv[i * n..(i + 1) * n], &g))
            .collect();
        if dot(&d, &g) >= 0.0 {
            hinv = identity(n, 1.0);
            fresh = true;
            d = g.iter().map(|v| -v).collect();
        }

        let Some((x_new, f_new)) = line_search(f, &x, fx, &g, &d) else {
            if fresh {
                g = refined_gradient(f, &x, opts.gradient_step);
                let gmax = max_norm(&g);
                // No representable progress left: accept a gradient within
                // 10x tolerance when the predicted gain is below `rel_tol`.
                let flat = decrement.is_some_and(|dec| dec <= opts.rel_tol * fx.abs().max(1.0));
                converged = gmax < opts.grad_tol || (flat && gmax < 10.0 * opts.grad_tol);
                break;
            }
            decrement = Some(-0.5 * dot(&g, &d));
            hinv = identity(n, 1.0);
            fresh = true;
            continue;
        };

        let g_new = numeric_gradient(f, &x_new, opts.gradient_step);
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        let rel_change = (fx - f_new).abs() / fx.abs().max(1.0);

        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            if fresh {
                hinv = identity(n, sy / dot(&y, &y));
            }
            bfgs_update(&mut hinv, &s, &y, sy);
            fresh = false;
        }

        x = x_new;
        fx = f_new;
        g = g_new;

        if rel_change < opts.rel_tol && max_norm(&g) < opts.grad_tol {
            converged = true;
            break;
        }
    }

    OptimOutcome {
        x,
        value: fx,
        grad: g,
        iterations,
        converged,
    }
}

fn bfgs_update(hinv: &mut [f64], s: &[f64], y: &[f64], sy: f64) {
    let n = s.len();
    let rho = 1.0 / sy;
    let hy: Vec<f64> = (0..n).map(|i| dot(&hinv[i * n..(i + 1) * n], y)).collect();
    let yhy = dot(y, &hy);
    for i in 0..n {
        for j in 0..n {
            hinv[i * n + j] +=
                rho * ((1.0 + rho * yhy) * s[i] * s[j] - hy[i] * s[j] - s[i] * hy[j]);
        }
    }
}

/// Backtracking Armijo search along `d`.
fn line_search<F: Fn(&[f64]) -> f64>(
    f: &F,
    x: &[f64],
    fx: f64,
    g: &[f64],
    d: &[f64],
) -> Option<(Vec<f64>, f64)> {
    let slope = dot(g, d);
    let mut step = 1.0;
    for _ in 0..60 {
        let cand: Vec<f64> = x.iter().zip(d).map(|(a, b)| a + step * b).collect();
        let fc = f(&cand);
        if fc.is_finite() && fc <= fx + 1e-4 * step * slope && fc < fx {
            return Some((cand, fc));
        }
        step *= 0.5;
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts() -> BfgsOptions {
        BfgsOptions {
            max_iterations: 500,
            gradient_step: 1e-6,
            grad_tol: 1e-6,
            rel_tol: 1e-12,
        }
    }

    #[test]
    fn minimizes_rosenbrock() {
        let f = |x: &[f64]| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2);
        let out = minimize_bfgs(&f, &[-1.2, 1.0], &opts());
        assert!(out.converged, "{out:?}");
        assert!((out.x[0] - 1.0).abs() < 1e-4);
        assert!((out.x[1] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn quadratic_hessian_is_exact() {
        let f = |x: &[f64]| 3.0 * x[0] * x[0] + 2.0 * x[0] * x[1] + 5.0 * x[1] * x[1];
        let h = numeric_hessian(&f, &[0.3, -0.7], 1e-4);
        let expected = [6.0, 2.0, 2.0, 10.0];
        for (a, b) in h.iter().zip(expected) {
            assert!((a - b).abs() < 1e-5, "{h:?}");
        }
    }

    #[test]
    fn gradient_matches_analytic() {
        let f = |x: &[f64]| x[0].exp() + x[1].sin() * x[0];
        let g = numeric_gradient(&f, &[0.5, 1.2], 1e-6);
        assert!((g[0] - (0.5f64.exp() + 1.2f64.sin())).abs() < 1e-8);
        assert!((g[1] - 0.5 * 1.2f64.cos()).abs() < 1e-8);
    }

    #[test]
    fn refined_gradient_beats_plain_on_a_cubic() {
        let f = |x: &[f64]| x[0].powi(5);
        let exact = 5.0 * 2.0f64.powi(4);
        let plain = numeric_gradient(&f, &[2.0], 1e-2)[0];
        let refined = refined_gradient(&f, &[2.0], 1e-2)[0];
        assert!((refined - exact).abs() < 0.1 * (plain - exact).abs());
    }

    #[test]
    fn starting_at_the_minimum_stays_put() {
        let f = |x: &[f64]| (x[0] - 2.0).powi(2) + (x[1] + 1.0).powi(2);
        let out = minimize_bfgs(&f, &[2.0, -1.0], &opts());
        assert!(out.converged);
        assert!((out.x[0] - 2.0).abs() < 1e-8 && (out.x[1] + 1.0).abs() < 1e-8);
    }
}

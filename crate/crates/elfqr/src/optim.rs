//! Small self-contained numeric routines: Brent's one-dimensional minimiser,
//! a dense-vector BFGS, and adaptive Simpson quadrature.

use nalgebra::{DMatrix, DVector};

const GOLDEN: f64 = 0.381_966_011_250_105_2;

/// A single evaluation recorded by [`brent_minimize`].
#[derive(Debug, Clone, Copy)]
pub struct BrentEval {
    pub x: f64,
    pub f: f64,
}

/// Minimise `f` on `[lo, hi]` by Brent's method (parabolic interpolation with
/// golden-section fallback). Returns the minimiser, its value, and every
/// evaluation made, in order.
pub fn brent_minimize<F: FnMut(f64) -> f64>(
    mut f: F,
    lo: f64,
    hi: f64,
    tol: f64,
    max_iter: usize,
) -> (f64, f64, Vec<BrentEval>) {
    let (mut a, mut b) = if lo <= hi { (lo, hi) } else { (hi, lo) };
    let mut trace = Vec::new();
    if a == b {
        let fx = f(a);
        trace.push(BrentEval { x: a, f: fx });
        return (a, fx, trace);
    }
    let eps = f64::EPSILON.sqrt();
    let tol = tol.abs().max(1e-12);

    let mut x = a + GOLDEN * (b - a);
    let mut w = x;
    let mut v = x;
    let mut fx = f(x);
    trace.push(BrentEval { x, f: fx });
    let mut fw = fx;
    let mut fv = fx;
    let mut d = 0.0_f64;
    let mut e = 0.0_f64;

    for _ in 0..max_iter {
        let m = 0.5 * (a + b);
        let tol1 = tol * x.abs() + eps;
        let tol2 = 2.0 * tol1;
        if (x - m).abs() <= tol2 - 0.5 * (b - a) {
            break;
        }

        let mut parabolic = false;
        if e.abs() > tol1 {
            // Try a parabolic step through (v, w, x).
            let r = (x - w) * (fx - fv);
            let mut q = (x - v) * (fx - fw);
            let mut p = (x - v) * q - (x - w) * r;
            q = 2.0 * (q - r);
            if q > 0.0 {
                p = -p;
            } else {
                q = -q;
            }
            let e_old = e;
            e = d;
            if p.abs() < (0.5 * q * e_old).abs() && p > q * (a - x) && p < q * (b - x) {
                d = p / q;
                let u = x + d;
                if (u - a) < tol2 || (b - u) < tol2 {
                    d = if x < m { tol1 } else { -tol1 };
                }
                parabolic = true;
            }
        }
        if !parabolic {
            e = if x < m { b - x } else { a - x };
            d = GOLDEN * e;
        }

        let u = if d.abs() >= tol1 {
            x + d
        } else if d >= 0.0 {
            x + tol1
        } else {
            x - tol1
        };
        let fu = f(u);
        trace.push(BrentEval { x: u, f: fu });

        if fu <= fx {
            if u >= x {
                a = x;
            } else {
                b = x;
            }
            v = w;
            fv = fw;
            w = x;
            fw = fx;
            x = u;
            fx = fu;
        } else {
            if u >= x {
                b = u;
            } else {
                a = u;
            }
            if fu <= fw || w == x {
                v = w;
                fv = fw;
                w = u;
                fw = fu;
            } else if fu <= fv || v == x || v == w {
                v = u;
                fv = fu;
            }
        }
    }
    (x, fx, trace)
}

/// Result of a BFGS run.
#[derive(Debug, Clone)]
pub struct BfgsResult {
    pub x: DVector<f64>,
    pub f: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Minimise a smooth function by BFGS with a backtracking Armijo line search.
/// The gradient is taken by central differences of `f`.
pub fn bfgs_minimize<F: Fn(&DVector<f64>) -> f64>(
    f: F,
    x0: DVector<f64>,
    max_iter: usize,
    grad_tol: f64,
) -> BfgsResult {
    let n = x0.len();
    let fd_grad = |x: &DVector<f64>| -> DVector<f64> {
        let mut g = DVector::zeros(n);
        for i in 0..n {
            let h = 1e-6 * (1.0 + x[i].abs());
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            g[i] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    };

    let mut x = x0;
    let mut fx = f(&x);
    let mut g = fd_grad(&x);
    let mut h_inv = DMatrix::<f64>::identity(n, n);

    for iter in 0..max_iter {
        if !fx.is_finite() {
            return BfgsResult { x, f: fx, converged: false, iterations: iter };
        }
        if g.amax() <= grad_tol * (1.0 + fx.abs()) {
            return BfgsResult { x, f: fx, converged: true, iterations: iter };
        }
        let mut dir = -(&h_inv * &g);
        if dir.dot(&g) >= 0.0 {
            // Reset a corrupted approximation.
            h_inv = DMatrix::identity(n, n);
            dir = -g.clone();
        }

        let mut step = 1.0_f64;
        let slope = g.dot(&dir);
        let mut x_new = &x + &dir * step;
        let mut f_new = f(&x_new);
        let mut ls = 0;
        while !(f_new.is_finite() && f_new <= fx + 1e-4 * step * slope) && ls < 40 {
            step *= 0.5;
            x_new = &x + &dir * step;
            f_new = f(&x_new);
            ls += 1;
        }
        if ls == 40 {
            return BfgsResult { x, f: fx, converged: g.amax() <= 1e-4 * (1.0 + fx.abs()), iterations: iter };
        }

        let g_new = fd_grad(&x_new);
        let s = &x_new - &x;
        let yk = &g_new - &g;
        let sy = s.dot(&yk);
        if sy > 1e-12 {
            let rho = 1.0 / sy;
            // H <- (I - rho s y') H (I - rho y s') + rho s s'
            let hy = &h_inv * &yk;
            let yhy = yk.dot(&hy);
            let ss = &s * s.transpose();
            let hys = &hy * s.transpose();
            h_inv = &h_inv - (&hys + hys.transpose()) * rho + &ss * (rho * rho * yhy + rho);
        }
        x = x_new;
        fx = f_new;
        g = g_new;
    }
    BfgsResult { x, f: fx, converged: false, iterations: max_iter }
}

/// Adaptive Simpson quadrature of `f` on `[a, b]`.
pub fn adaptive_simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64, max_depth: usize) -> f64 {
    fn simpson<F: Fn(f64) -> f64>(f: &F, a: f64, fa: f64, b: f64, fb: f64) -> (f64, f64, f64) {
        let m = 0.5 * (a + b);
        let fm = f(m);
        ((b - a) / 6.0 * (fa + 4.0 * fm + fb), m, fm)
    }
    fn recurse<F: Fn(f64) -> f64>(
        f: &F,
        a: f64,
        fa: f64,
        b: f64,
        fb: f64,
        whole: f64,
        m: f64,
        fm: f64,
        tol: f64,
        depth: usize,
    ) -> f64 {
        let (left, lm, flm) = simpson(f, a, fa, m, fm);
        let (right, rm, frm) = simpson(f, m, fm, b, fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            left + right + delta / 15.0
        } else {
            recurse(f, a, fa, m, fm, left, lm, flm, 0.5 * tol, depth - 1)
                + recurse(f, m, fm, b, fb, right, rm, frm, 0.5 * tol, depth - 1)
        }
    }
    let (fa, fb) = (f(a), f(b));
    let (whole, m, fm) = simpson(f, a, fa, b, fb);
    recurse(f, a, fa, b, fb, whole, m, fm, tol, max_depth)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn brent_finds_quartic_minimum() {
        let (x, fx, trace) = brent_minimize(|x| (x - 1.3).powi(4) + 2.0, -4.0, 6.0, 1e-10, 200);
        assert!((x - 1.3).abs() < 1e-4);
        assert!((fx - 2.0).abs() < 1e-12);
        assert!(trace.len() >= 3);
    }

    #[test]
    fn brent_degenerate_bracket() {
        let (x, _, trace) = brent_minimize(|x| x * x, 2.0, 2.0, 1e-8, 100);
        assert_eq!(x, 2.0);
        assert_eq!(trace.len(), 1);
    }

    #[test]
    fn bfgs_minimises_rosenbrock() {
        let f = |v: &DVector<f64>| {
            let (a, b) = (v[0], v[1]);
            (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2)
        };
        let r = bfgs_minimize(f, DVector::from_vec(vec![-1.2, 1.0]), 500, 1e-10);
        assert!(r.converged);
        assert!((r.x[0] - 1.0).abs() < 1e-5 && (r.x[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn simpson_integrates_gaussian() {
        let f = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let v = adaptive_simpson(&f, -10.0, 10.0, 1e-12, 40);
        assert_relative_eq!(v, 1.0, max_relative = 1e-10);
    }
}

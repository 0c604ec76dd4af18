//! Small, dependency-free numerical building blocks.
//!
//! Everything here is deliberately simple and deterministic: fixed-step RK4,
//! adaptive Simpson quadrature, bisection root finding, Gauss-Legendre nodes
//! computed by Newton iteration, an ordinary least-squares line fit, and a
//! dense LU solver with partial pivoting. These serve both as production
//! plumbing for the solver crates and as independent cross-checks in tests.

/// Integrate `dy/ds = f(s, y)` from `s0` over `n_steps` fixed steps of size
/// `ds` with classical fourth-order Runge-Kutta. The state is advanced in
/// place.
pub fn rk4_integrate<F>(f: F, s0: f64, y: &mut [f64], ds: f64, n_steps: usize)
where
    F: Fn(f64, &[f64], &mut [f64]),
{
    let dim = y.len();
    let mut k1 = vec![0.0; dim];
    let mut k2 = vec![0.0; dim];
    let mut k3 = vec![0.0; dim];
    let mut k4 = vec![0.0; dim];
    let mut tmp = vec![0.0; dim];
    let mut s = s0;
    for _ in 0..n_steps {
        f(s, y, &mut k1);
        for i in 0..dim {
            tmp[i] = y[i] + 0.5 * ds * k1[i];
        }
        f(s + 0.5 * ds, &tmp, &mut k2);
        for i in 0..dim {
            tmp[i] = y[i] + 0.5 * ds * k2[i];
        }
        f(s + 0.5 * ds, &tmp, &mut k3);
        for i in 0..dim {
            tmp[i] = y[i] + ds * k3[i];
        }
        f(s + ds, &tmp, &mut k4);
        for i in 0..dim {
            y[i] += ds / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        s += ds;
    }
}

/// Adaptive Simpson quadrature of `f` over `[a, b]` to absolute tolerance
/// `tol`. Recursion depth is capped at `max_depth`; on hitting the cap the
/// current panel estimate is accepted.
pub fn adaptive_simpson<F>(f: &F, a: f64, b: f64, tol: f64, max_depth: u32) -> f64
where
    F: Fn(f64) -> f64,
{
    let fa = f(a);
    let fb = f(b);
    let m = 0.5 * (a + b);
    let fm = f(m);
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson_recurse(f, a, b, fa, fm, fb, whole, tol, max_depth)
}

#[allow(clippy::too_many_arguments)]
fn simpson_recurse<F>(
    f: &F,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64
where
    F: Fn(f64) -> f64,
{
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    simpson_recurse(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
        + simpson_recurse(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
}

/// Bisection root finding for a continuous `f` with a sign change on
/// `[lo, hi]`. Returns the midpoint of the final bracket once its width is
/// below `xtol`. Returns `None` when the endpoints do not bracket a root.
pub fn bisect<F>(f: F, mut lo: f64, mut hi: f64, xtol: f64) -> Option<f64>
where
    F: Fn(f64) -> f64,
{
    let mut flo = f(lo);
    let fhi = f(hi);
    if flo == 0.0 {
        return Some(lo);
    }
    if fhi == 0.0 {
        return Some(hi);
    }
    if flo.signum() == fhi.signum() {
        return None;
    }
    // 200 halvings take any finite bracket below any representable xtol.
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if hi - lo <= xtol {
            return Some(mid);
        }
        let fmid = f(mid);
        if fmid == 0.0 {
            return Some(mid);
        }
        if fmid.signum() == flo.signum() {
            lo = mid;
            flo = fmid;
        } else {
            hi = mid;
        }
    }
    Some(0.5 * (lo + hi))
}

/// Nodes and weights of the `n`-point Gauss-Legendre rule on `[-1, 1]`,
/// computed by Newton iteration on the Legendre polynomial from the standard
/// Chebyshev-based initial guesses. Returns `(nodes, weights)` with nodes in
/// increasing order.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "rule order must be at least 1");
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let nf = n as f64;
    for i in 0..n {
        // Initial guess: Chebyshev points, good to a few percent.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            // Evaluate P_n(x) and P_n'(x) by the three-term recurrence.
            let mut p0 = 1.0;
            let mut p1 = x;
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 1 { x } else { p1 };
            let pn1 = if n == 1 { 1.0 } else { p0 };
            dp = nf * (pn1 - x * pn) / (1.0 - x * x);
            let dx = pn / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        nodes[n - 1 - i] = x;
        weights[n - 1 - i] = 2.0 / ((1.0 - x * x) * dp * dp);
    }
    (nodes, weights)
}

/// Ordinary least-squares fit of `y ≈ intercept + slope * x`.
/// Returns `(intercept, slope, r_squared)`. Requires at least two points and
/// non-degenerate abscissae. With exactly collinear data `r_squared` is 1.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    assert_eq!(x.len(), y.len(), "mismatched sample lengths");
    let n = x.len();
    assert!(n >= 2, "need at least two samples");
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for i in 0..n {
        let dx = x[i] - mx;
        let dy = y[i] - my;
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    assert!(sxx > 0.0, "degenerate abscissae");
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    (intercept, slope, r2)
}

/// Solve the dense system `A x = b` by LU factorization with partial
/// pivoting. `a` is row-major `n x n` and is consumed as the factorization
/// workspace; `b` is overwritten with the solution. Returns `false` when a
/// pivot underflows (singular to working precision), leaving `b` unspecified.
pub fn solve_dense(a: &mut [f64], b: &mut [f64], n: usize) -> bool {
    assert_eq!(a.len(), n * n, "matrix shape mismatch");
    assert_eq!(b.len(), n, "rhs shape mismatch");
    for col in 0..n {
        let mut piv = col;
        let mut best = a[col * n + col].abs();
        for row in col + 1..n {
            let cand = a[row * n + col].abs();
            if cand > best {
                best = cand;
                piv = row;
            }
        }
        if best < 1e-300 {
            return false;
        }
        if piv != col {
            for k in 0..n {
                a.swap(col * n + k, piv * n + k);
            }
            b.swap(col, piv);
        }
        let inv = 1.0 / a[col * n + col];
        for row in col + 1..n {
            let factor = a[row * n + col] * inv;
            if factor == 0.0 {
                continue;
            }
            a[row * n + col] = 0.0;
            for k in col + 1..n {
                a[row * n + k] -= factor * a[col * n + k];
            }
            b[row] -= factor * b[col];
        }
    }
    for col in (0..n).rev() {
        let mut acc = b[col];
        for k in col + 1..n {
            acc -= a[col * n + k] * b[k];
        }
        b[col] = acc / a[col * n + col];
    }
    true
}

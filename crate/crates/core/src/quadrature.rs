//! Numerical integration on finite intervals.

use std::f64::consts::PI;

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
///
/// Exact for polynomials of degree `2n - 1`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        // Tricomi's initial guess, then Newton on P_n.
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre(n, x);
            dp = d;
            let step = p / d;
            x -= step;
            if step.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre(n, x);
        if d != 0.0 {
            dp = d;
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = x;
        nodes[n - 1 - i] = -x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// `(P_n(x), P_n'(x))` by the three-term recurrence.
fn legendre(n: usize, x: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (1.0, x);
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let k = k as f64;
        let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
    }
    let nf = n as f64;
    (p1, nf * (x * p1 - p0) / (x * x - 1.0))
}

/// `∫_a^b f` by `n`-point Gauss–Legendre.
pub fn integrate_gl(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let (nodes, weights) = gauss_legendre(n);
    let (mid, half) = ((a + b) / 2.0, (b - a) / 2.0);
    half * nodes
        .iter()
        .zip(&weights)
        .map(|(x, w)| w * f(mid + half * x))
        .sum::<f64>()
}

/// `∫_a^b f` by double-exponential (tanh-sinh) quadrature.
///
/// Tolerates integrable endpoint singularities such as `log t` at `t = 0`;
/// `f` is never evaluated at the endpoints themselves. Halves the step until
/// successive estimates agree to `tol` (relative) or the level limit is hit.
pub fn integrate_tanh_sinh(f: impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    let half = (b - a) / 2.0;
    // Evaluates at a + half*(1 + x) using the distance to the nearer endpoint to keep precision.
    let eval = |u: f64| -> f64 {
        let s = u.sinh() * PI / 2.0;
        let c = s.cosh();
        let weight = PI / 2.0 * u.cosh() / (c * c);
        // 1 - |x| = 1/(e^{|s|} cosh s)
        let gap = 1.0 / (s.abs().exp() * c);
        if gap == 0.0 || weight == 0.0 {
            return 0.0;
        }
        let t = if s < 0.0 {
            a + half * gap
        } else {
            b - half * gap
        };
        if t <= a || t >= b {
            return 0.0;
        }
        weight * f(t)
    };
    let u_max = 6.5;
    let mut h = 0.5;
    let mut sum = eval(0.0);
    let mut k = 1;
    while (k as f64) * h <= u_max {
        let u = k as f64 * h;
        sum += eval(u) + eval(-u);
        k += 1;
    }
    let mut estimate = half * h * sum;
    for _ in 0..12 {
        h /= 2.0;
        let mut k = 1;
        while (k as f64) * h <= u_max {
            let u = k as f64 * h;
            sum += eval(u) + eval(-u);
            k += 2;
        }
        let next = half * h * sum;
        if (next - estimate).abs() <= tol * next.abs().max(1e-300) {
            return next;
        }
        estimate = next;
    }
    estimate
}

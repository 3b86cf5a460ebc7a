//! Gauss–Legendre quadrature and Gaussian expectations of piecewise-smooth
//! functions, used for the offline terms of the CVA model.

use crate::sde::normal_pdf;

/// Nodes and weights of the `n`-point Gauss–Legendre rule on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        // Tricomi initial guess, then Newton on P_n
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// A Gauss–Legendre rule that can be reused across intervals.
#[derive(Clone, Debug)]
pub struct Rule {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl Rule {
    pub fn new(n: usize) -> Self {
        let (nodes, weights) = gauss_legendre(n);
        Rule { nodes, weights }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn integrate<F: FnMut(f64) -> f64>(&self, a: f64, b: f64, mut f: F) -> f64 {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        self.nodes.iter().zip(&self.weights).map(|(x, w)| w * f(mid + half * x)).sum::<f64>() * half
    }
}

/// Range of the standard normal variable covered by [`normal_expectation`].
pub const Z_MAX: f64 = 9.0;

/// Sign changes of `f` on `[-Z_MAX, Z_MAX]`, located by a grid scan and bisection.
pub fn sign_changes<F: Fn(f64) -> f64>(f: F, grid: usize) -> Vec<f64> {
    let mut roots = Vec::new();
    let step = 2.0 * Z_MAX / grid as f64;
    let mut a = -Z_MAX;
    let mut fa = f(a);
    for i in 1..=grid {
        let b = -Z_MAX + i as f64 * step;
        let fb = f(b);
        if (fa > 0.0) != (fb > 0.0) {
            let (mut lo, mut hi, flo) = (a, b, fa);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if (f(mid) > 0.0) == (flo > 0.0) {
                    lo = mid;
                } else {
                    hi = mid;
                }
                if hi - lo < 1e-15 {
                    break;
                }
            }
            roots.push(0.5 * (lo + hi));
        }
        a = b;
        fa = fb;
    }
    roots
}

/// `E[f(Z)]` for standard normal `Z`, with `f` smooth between the given
/// breakpoints. The tails beyond `±Z_MAX` are dropped.
pub fn normal_expectation<F: FnMut(f64) -> f64>(rule: &Rule, breaks: &[f64], mut f: F) -> f64 {
    let mut edges = Vec::with_capacity(breaks.len() + 2);
    edges.push(-Z_MAX);
    edges.extend(breaks.iter().copied().filter(|b| b.abs() < Z_MAX));
    edges.push(Z_MAX);
    edges.windows(2).map(|w| rule.integrate(w[0], w[1], |z| f(z) * normal_pdf(z))).sum()
}

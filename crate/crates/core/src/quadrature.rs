//! Quadrature rules shared by the kernel evaluators and the coefficient
//! integrals: Gauss–Legendre panels for frequency integrals and the
//! trapezoidal rule on the uniform time grid.

use std::f64::consts::PI;

/// Nodes and weights of the n-point Gauss–Legendre rule on [-1, 1].
#[derive(Debug, Clone)]
pub struct GaussLegendre {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussLegendre {
    /// Newton iteration on P_n from the Chebyshev initial guesses.
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "Gauss-Legendre rule needs at least one node");
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let m = n.div_ceil(2);
        for i in 0..m {
            let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 1.0;
            for _ in 0..100 {
                let (p, d) = legendre_with_derivative(n, x);
                dp = d;
                let dx = p / d;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let (_, d) = legendre_with_derivative(n, x);
            if d != 0.0 {
                dp = d;
            }
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = -x;
            nodes[n - 1 - i] = x;
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        GaussLegendre { nodes, weights }
    }

    /// Integrates `f` over [a, b].
    pub fn integrate<F: Fn(f64) -> f64>(&self, f: F, a: f64, b: f64) -> f64 {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (b + a);
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * f(mid + half * x))
            .sum::<f64>()
            * half
    }

    /// Appends the mapped nodes/weights of this rule on [a, b] to the output buffers.
    pub fn push_panel(&self, a: f64, b: f64, nodes: &mut Vec<f64>, weights: &mut Vec<f64>) {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (b + a);
        for (&x, &w) in self.nodes.iter().zip(&self.weights) {
            nodes.push(mid + half * x);
            weights.push(w * half);
        }
    }
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    if n == 0 {
        return (1.0, 0.0);
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Adaptive composite Gauss–Legendre integration of `f` over [a, b].
///
/// The interval is first cut into panels no wider than `max_panel`; each
/// panel is bisected until the rule on the panel and on its two halves agree
/// to `tol` (absolute, scaled by panel share).
pub fn adaptive_gl<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, max_panel: f64, tol: f64) -> f64 {
    let rule = GaussLegendre::new(10);
    if b <= a {
        return 0.0;
    }
    let panels = ((b - a) / max_panel).ceil().max(1.0) as usize;
    let width = (b - a) / panels as f64;
    let panel_tol = tol / panels as f64;
    (0..panels)
        .map(|k| {
            let lo = a + k as f64 * width;
            let hi = if k + 1 == panels { b } else { lo + width };
            let whole = rule.integrate(f, lo, hi);
            refine(f, &rule, lo, hi, whole, panel_tol, 0)
        })
        .sum()
}

fn refine<F: Fn(f64) -> f64>(
    f: &F,
    rule: &GaussLegendre,
    a: f64,
    b: f64,
    whole: f64,
    tol: f64,
    depth: usize,
) -> f64 {
    let mid = 0.5 * (a + b);
    let left = rule.integrate(f, a, mid);
    let right = rule.integrate(f, mid, b);
    let split = left + right;
    if (split - whole).abs() <= tol || depth >= 30 {
        return split;
    }
    refine(f, rule, a, mid, left, 0.5 * tol, depth + 1)
        + refine(f, rule, mid, b, right, 0.5 * tol, depth + 1)
}

/// Trapezoidal weight of sample `j` on a grid of `n + 1` points with step `h`.
#[inline]
pub fn trap_weight(j: usize, n: usize, h: f64) -> f64 {
    if n == 0 {
        0.0
    } else if j == 0 || j == n {
        0.5 * h
    } else {
        h
    }
}

/// Trapezoidal rule over uniformly spaced samples.
pub fn trapezoid(samples: &[f64], h: f64) -> f64 {
    match samples.len() {
        0 | 1 => 0.0,
        len => {
            let inner: f64 = samples[1..len - 1].iter().sum();
            h * (inner + 0.5 * (samples[0] + samples[len - 1]))
        }
    }
}

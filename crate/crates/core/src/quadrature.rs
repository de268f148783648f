//! Gauss–Legendre rules, fixed and adaptive.

use std::f64::consts::PI;

use crate::error::{Error, Result};

/// An n-point Gauss–Legendre rule on [-1, 1].
#[derive(Debug, Clone)]
pub struct GaussLegendre {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussLegendre {
    /// Nodes are the roots of P_n, found by Newton iteration from the
    /// Tricomi initial guess; weights from the derivative at the root.
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "Gauss-Legendre rule needs at least one node");
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let nf = n as f64;
        for i in 0..n.div_ceil(2) {
            let mut x = (PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
            let mut dp = 0.0;
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
            weights[i] = w;
            nodes[n - 1 - i] = x;
            weights[n - 1 - i] = w;
        }
        Self { nodes, weights }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Nodes and weights mapped onto [a, b].
    pub fn mapped(&self, a: f64, b: f64) -> impl Iterator<Item = (f64, f64)> + '_ {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(move |(&x, &w)| (mid + half * x, half * w))
    }

    pub fn integrate<F: FnMut(f64) -> f64>(&self, a: f64, b: f64, mut f: F) -> f64 {
        self.mapped(a, b).map(|(x, w)| w * f(x)).sum()
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
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Result of an adaptive integration.
#[derive(Debug, Clone, Copy)]
pub struct Integral {
    pub value: f64,
    pub error: f64,
}

/// Adaptive bisection driven by the difference between a panel and its two
/// halves, each integrated with a 20-point rule. `abs_tol` bounds the total
/// estimated error; `breaks` are interior points where the integrand may
/// have a kink.
pub fn adaptive<F: Fn(f64) -> f64>(
    f: F,
    a: f64,
    b: f64,
    breaks: &[f64],
    abs_tol: f64,
) -> Result<Integral> {
    let rule = GaussLegendre::new(20);
    let mut points = vec![a];
    points.extend(breaks.iter().copied().filter(|&x| x > a && x < b));
    points.push(b);
    points.sort_by(f64::total_cmp);
    points.dedup();

    let total_len = b - a;
    let mut value = 0.0;
    let mut error = 0.0;
    for w in points.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        let tol = abs_tol * (hi - lo) / total_len;
        let whole = rule.integrate(lo, hi, &f);
        let r = refine(&rule, &f, lo, hi, whole, tol, 0)?;
        value += r.value;
        error += r.error;
    }
    if error > abs_tol {
        return Err(Error::Numeric {
            what: "adaptive Gauss-Legendre".into(),
            achieved: error,
        });
    }
    Ok(Integral { value, error })
}

const MAX_DEPTH: u32 = 40;

fn refine<F: Fn(f64) -> f64>(
    rule: &GaussLegendre,
    f: &F,
    a: f64,
    b: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> Result<Integral> {
    let m = 0.5 * (a + b);
    let left = rule.integrate(a, m, f);
    let right = rule.integrate(m, b, f);
    let diff = (left + right - whole).abs();
    if diff <= tol || diff <= 4.0 * f64::EPSILON * (left.abs() + right.abs()) {
        return Ok(Integral {
            value: left + right,
            error: diff,
        });
    }
    if depth >= MAX_DEPTH {
        return Err(Error::Numeric {
            what: format!("adaptive Gauss-Legendre on [{a}, {b}]"),
            achieved: diff,
        });
    }
    let l = refine(rule, f, a, m, left, 0.5 * tol, depth + 1)?;
    let r = refine(rule, f, m, b, right, 0.5 * tol, depth + 1)?;
    Ok(Integral {
        value: l.value + r.value,
        error: l.error + r.error,
    })
}

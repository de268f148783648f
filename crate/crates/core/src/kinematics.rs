//! Binary inelastic collisions with a constant restitution coefficient,
//! angular sampling, and the sphere integrals of the cross-section.

use std::f64::consts::PI;
use std::ops::Deref;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use statrs::function::gamma::ln_gamma;

use crate::error::{contract, Error, Result};
use crate::quadrature;

const UNIT_TOL: f64 = 1e-12;

/// A velocity in R^N, N >= 2, with finite components.
#[derive(Debug, Clone, PartialEq)]
pub struct Velocity(Vec<f64>);

impl Velocity {
    pub fn new(components: Vec<f64>) -> Result<Self> {
        if components.len() < 2 {
            return Err(contract("velocity dimension must be at least 2"));
        }
        if components.iter().any(|c| !c.is_finite()) {
            return Err(contract("velocity components must be finite"));
        }
        Ok(Self(components))
    }

    pub fn zero(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for Velocity {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a)
}

/// Surface area of the unit sphere S^{k} in R^{k+1}.
pub fn sphere_area(k: usize) -> f64 {
    let h = 0.5 * (k as f64 + 1.0);
    2.0 * (h * PI.ln() - ln_gamma(h)).exp()
}

fn check_pair(v: &[f64], v_star: &[f64], sigma: &[f64], alpha: f64) -> Result<()> {
    if v.len() != v_star.len() || v.len() != sigma.len() {
        return Err(contract(format!(
            "dimension mismatch: |v| = {}, |v*| = {}, |sigma| = {}",
            v.len(),
            v_star.len(),
            sigma.len()
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(contract(format!("restitution coefficient {alpha} outside [0, 1]")));
    }
    let n = norm2(sigma).sqrt();
    if (n - 1.0).abs() > UNIT_TOL {
        return Err(contract(format!("sigma is not a unit vector (|sigma| = {n})")));
    }
    Ok(())
}

/// Post-collisional velocities `(v', v'_*)`.
pub fn post_collision(
    v: &[f64],
    v_star: &[f64],
    sigma: &[f64],
    alpha: f64,
) -> Result<(Velocity, Velocity)> {
    check_pair(v, v_star, sigma, alpha)?;
    let mut a = v.to_vec();
    let mut b = v_star.to_vec();
    collide_in_place(&mut a, &mut b, sigma, alpha);
    Ok((Velocity(a), Velocity(b)))
}

/// Unchecked in-place collision used by the particle engine. A pair with
/// zero relative velocity is left untouched.
#[inline]
pub fn collide_in_place(v: &mut [f64], v_star: &mut [f64], sigma: &[f64], alpha: f64) {
    let speed = v
        .iter()
        .zip(v_star.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    if speed == 0.0 {
        return;
    }
    let cu = 0.5 * (1.0 - alpha);
    let cs = 0.5 * (1.0 + alpha) * speed;
    for k in 0..v.len() {
        let w = v[k] + v_star[k];
        let u = v[k] - v_star[k];
        let u_new = cu * u + cs * sigma[k];
        v[k] = 0.5 * (w + u_new);
        v_star[k] = 0.5 * (w - u_new);
    }
}

/// Kinetic-energy change `|v'|^2 + |v'_*|^2 - |v|^2 - |v_*|^2` in closed form.
pub fn energy_loss(v: &[f64], v_star: &[f64], sigma: &[f64], alpha: f64) -> Result<f64> {
    check_pair(v, v_star, sigma, alpha)?;
    let u: Vec<f64> = v.iter().zip(v_star).map(|(a, b)| a - b).collect();
    let u2 = norm2(&u);
    if u2 == 0.0 {
        return Ok(0.0);
    }
    let cos = dot(&u, sigma) / u2.sqrt();
    Ok(-0.25 * (1.0 - alpha * alpha) * (1.0 - cos) * u2)
}

/// Piecewise-linear cross-section table on [-1, 1].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Table {
    xs: Vec<f64>,
    values: Vec<f64>,
}

impl Table {
    pub fn new(xs: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if xs.len() != values.len() || xs.len() < 2 {
            return Err(contract("table needs at least two (x, value) rows"));
        }
        if xs.windows(2).any(|w| w[1] <= w[0]) {
            return Err(contract("table abscissae must be strictly ascending"));
        }
        if (xs[0] + 1.0).abs() > 1e-12 || (xs[xs.len() - 1] - 1.0).abs() > 1e-12 {
            return Err(contract("table must span exactly [-1, 1]"));
        }
        if values.iter().chain(&xs).any(|v| !v.is_finite()) {
            return Err(contract("table entries must be finite"));
        }
        Ok(Self { xs, values })
    }

    /// Parse `x value` lines; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut xs = Vec::new();
        let mut values = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut fields = line.split_whitespace();
            let parse = |s: Option<&str>| -> Result<f64> {
                s.and_then(|s| s.parse().ok()).ok_or_else(|| {
                    contract(format!("cross-section table line {}: expected `x value`", lineno + 1))
                })
            };
            xs.push(parse(fields.next())?);
            values.push(parse(fields.next())?);
            if fields.next().is_some() {
                return Err(contract(format!(
                    "cross-section table line {}: trailing fields",
                    lineno + 1
                )));
            }
        }
        Self::new(xs, values)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn knots(&self) -> &[f64] {
        &self.xs
    }

    pub fn eval(&self, x: f64) -> f64 {
        let x = x.clamp(-1.0, 1.0);
        let i = self.xs.partition_point(|&k| k <= x).clamp(1, self.xs.len() - 1);
        let (x0, x1) = (self.xs[i - 1], self.xs[i]);
        let (y0, y1) = (self.values[i - 1], self.values[i]);
        y0 + (y1 - y0) * (x - x0) / (x1 - x0)
    }
}

/// Angular cross-section `b(x)`, `x = û·σ`.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CrossSection {
    Constant { b0_prime: f64 },
    /// `b0' (1 - x)^{-(N-3)/2}`, the hard-sphere kernel in dimension N.
    PowerLaw { b0_prime: f64, dim: usize },
    Tabulated(Table),
}

impl CrossSection {
    pub fn constant(b0_prime: f64) -> Self {
        Self::Constant { b0_prime }
    }

    pub fn hard_sphere(b0_prime: f64, dim: usize) -> Self {
        Self::PowerLaw { b0_prime, dim }
    }

    pub fn id(&self) -> String {
        match self {
            Self::Constant { b0_prime } => format!("constant({b0_prime})"),
            Self::PowerLaw { b0_prime, dim } => format!("power_law({b0_prime},N={dim})"),
            Self::Tabulated(t) => format!("tabulated({} knots)", t.xs.len()),
        }
    }

    fn exponent(dim: usize) -> f64 {
        -0.5 * (dim as f64 - 3.0)
    }

    pub fn eval(&self, x: f64) -> f64 {
        match self {
            Self::Constant { b0_prime } => *b0_prime,
            Self::PowerLaw { b0_prime, dim } => {
                let e = Self::exponent(*dim);
                if e == 0.0 {
                    *b0_prime
                } else {
                    b0_prime * (1.0 - x).max(0.0).powf(e)
                }
            }
            Self::Tabulated(t) => t.eval(x),
        }
    }

    /// `(b_m, b_M)`: infimum and supremum over [-1, 1]. The supremum may be
    /// infinite and the infimum zero for power laws outside dimension 3.
    pub fn bounds(&self) -> (f64, f64) {
        match self {
            Self::Constant { b0_prime } => (*b0_prime, *b0_prime),
            Self::PowerLaw { b0_prime, dim } => {
                let e = Self::exponent(*dim);
                if e == 0.0 {
                    (*b0_prime, *b0_prime)
                } else if e > 0.0 {
                    (0.0, b0_prime * 2f64.powf(e))
                } else {
                    (b0_prime * 2f64.powf(e), f64::INFINITY)
                }
            }
            Self::Tabulated(t) => t.values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |acc, &v| {
                (acc.0.min(v), acc.1.max(v))
            }),
        }
    }

    pub fn is_constant(&self) -> bool {
        let (lo, hi) = self.bounds();
        lo == hi
    }

    /// Points in [-1, 1] where `b` may have a kink.
    fn breaks(&self) -> Vec<f64> {
        match self {
            Self::Tabulated(t) => t.xs.clone(),
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KernelConstants {
    /// Sphere integral of `b`; the loss-term rate is `b0 |u|`.
    pub b0: f64,
    /// Angular momentum `(1/8) ∫ (1 - x) b(x) dσ`.
    pub b1: f64,
    /// `‖b‖_{L¹(S^{N-1})}`.
    pub b2: f64,
}

pub const KERNEL_QUAD_TOL: f64 = 1e-10;

/// Integrate `g(x)` over S^{N-1} with `x` the cosine to a fixed axis, on the
/// polar angle with the (N-2)-sphere surface factor.
pub fn sphere_integral<G: Fn(f64) -> f64>(g: G, dim: usize, x_breaks: &[f64]) -> Result<f64> {
    if dim < 2 {
        return Err(contract("dimension must be at least 2"));
    }
    let surface = sphere_area(dim - 2);
    let p = dim as i32 - 2;
    let phi_breaks: Vec<f64> = x_breaks.iter().map(|x| x.clamp(-1.0, 1.0).acos()).collect();
    let tol = KERNEL_QUAD_TOL / surface;
    let r = quadrature::adaptive(|phi| g(phi.cos()) * phi.sin().powi(p), 0.0, PI, &phi_breaks, tol)?;
    Ok(surface * r.value)
}

pub fn kernel_constants(cs: &CrossSection, dim: usize) -> Result<KernelConstants> {
    let breaks = cs.breaks();
    let b0 = sphere_integral(|x| cs.eval(x), dim, &breaks)?;
    let b1 = sphere_integral(|x| (1.0 - x) * cs.eval(x), dim, &breaks)? / 8.0;
    let b2 = sphere_integral(|x| cs.eval(x).abs(), dim, &breaks)?;
    if !(b0 > 0.0 && b1 > 0.0 && b2 > 0.0) {
        return Err(contract(format!(
            "kernel constants must be positive (b0 = {b0}, b1 = {b1}, b2 = {b2})"
        )));
    }
    Ok(KernelConstants { b0, b1, b2 })
}

/// Uniform-proposal rejection sampler for `σ` with density ∝ `b(û·σ)`.
#[derive(Debug, Clone)]
pub struct AngularSampler {
    cs: CrossSection,
    dim: usize,
    b_max: f64,
    constant: bool,
}

impl AngularSampler {
    pub fn new(cs: CrossSection, dim: usize) -> Result<Self> {
        let (b_min, b_max) = cs.bounds();
        if !(b_min > 0.0 && b_max.is_finite()) {
            return Err(contract(format!(
                "rejection sampling needs 0 < b_m <= b_M < inf, got ({b_min}, {b_max})"
            )));
        }
        let constant = b_min == b_max;
        Ok(Self { cs, dim, b_max, constant })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cross_section(&self) -> &CrossSection {
        &self.cs
    }

    /// Writes σ into `out` and returns the number of proposals drawn.
    pub fn sample_into<R: Rng + ?Sized>(&self, u_hat: &[f64], rng: &mut R, out: &mut [f64]) -> u32 {
        let mut proposals = 0;
        loop {
            proposals += 1;
            uniform_on_sphere(rng, out);
            if self.constant {
                return proposals;
            }
            let b = self.cs.eval(dot(u_hat, out));
            if rng.random::<f64>() * self.b_max < b {
                return proposals;
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, u_hat: &[f64], rng: &mut R) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.sample_into(u_hat, rng, &mut out);
        out
    }
}

pub fn sample_sigma<R: Rng + ?Sized>(cs: &CrossSection, u_hat: &[f64], rng: &mut R) -> Result<Vec<f64>> {
    Ok(AngularSampler::new(cs.clone(), u_hat.len())?.sample(u_hat, rng))
}

pub fn uniform_on_sphere<R: Rng + ?Sized>(rng: &mut R, out: &mut [f64]) {
    loop {
        let mut n2 = 0.0;
        for c in out.iter_mut() {
            *c = rng.sample(StandardNormal);
            n2 += *c * *c;
        }
        if n2 > 1e-300 {
            let inv = n2.sqrt().recip();
            out.iter_mut().for_each(|c| *c *= inv);
            return;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    NonFinite,
    Positivity,
    Monotonicity,
    Convexity,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub kind: ViolationKind,
    /// Grid index; for monotonicity the pair is `(index, index + 1)`, for
    /// convexity the stencil is centred on `index`.
    pub index: usize,
    pub x: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub cross_section: String,
    pub grid_size: usize,
    pub b_min: f64,
    pub b_max: f64,
    pub passed: bool,
    pub violations: Vec<Violation>,
}

/// Checks positivity, monotonicity and discrete convexity of `b` on a
/// uniform grid over [-1, 1].
pub fn validate_cross_section(cs: &CrossSection, grid_size: usize) -> Result<ValidationReport> {
    if grid_size < 3 {
        return Err(contract("validation grid needs at least 3 points"));
    }
    let h = 2.0 / (grid_size - 1) as f64;
    let xs: Vec<f64> = (0..grid_size).map(|i| (-1.0 + i as f64 * h).min(1.0)).collect();
    let bs: Vec<f64> = xs.iter().map(|&x| cs.eval(x)).collect();
    let scale = bs.iter().filter(|b| b.is_finite()).fold(0.0f64, |m, b| m.max(b.abs())).max(1.0);
    let tol = 1e-12 * scale;

    let mut violations = Vec::new();
    let mut push = |kind, index: usize| {
        violations.push(Violation { kind, index, x: xs[index], value: bs[index] });
    };
    for i in 0..grid_size {
        if !bs[i].is_finite() {
            push(ViolationKind::NonFinite, i);
        } else if bs[i] <= 0.0 {
            push(ViolationKind::Positivity, i);
        }
    }
    for i in 0..grid_size - 1 {
        if bs[i].is_finite() && bs[i + 1].is_finite() && bs[i + 1] < bs[i] - tol {
            push(ViolationKind::Monotonicity, i);
        }
    }
    for i in 1..grid_size - 1 {
        let (a, b, c) = (bs[i - 1], bs[i], bs[i + 1]);
        if a.is_finite() && b.is_finite() && c.is_finite() && a - 2.0 * b + c < -tol {
            push(ViolationKind::Convexity, i);
        }
    }
    let (b_min, b_max) = cs.bounds();
    Ok(ValidationReport {
        cross_section: cs.id(),
        grid_size,
        b_min,
        b_max,
        passed: violations.is_empty(),
        violations,
    })
}

/// Error for callers that need a cross-section to pass validation.
pub fn require_valid(cs: &CrossSection) -> Result<()> {
    let report = validate_cross_section(cs, 201)?;
    if report.passed {
        Ok(())
    } else {
        Err(Error::Contract(format!(
            "cross-section {} fails validation at {} grid points",
            report.cross_section,
            report.violations.len()
        )))
    }
}

//! Self-checks of the collision kinematics and the closed-form predictions.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::analytics::{self, Phi1};
use crate::error::Result;
use crate::kinematics::{
    energy_loss, kernel_constants, norm2, post_collision, uniform_on_sphere, validate_cross_section,
    CrossSection,
};
use crate::rng::stream;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    /// Achieved error, or a count for discrete checks.
    pub value: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl Check {
    fn at_most(name: impl Into<String>, value: f64, tolerance: f64) -> Self {
        Self { name: name.into(), value, tolerance, pass: value <= tolerance }
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a / b - 1.0).abs()
}

/// Worst relative errors over `samples` random collisions in dimension `dim`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CollisionErrors {
    pub momentum: f64,
    pub energy_identity: f64,
    pub elastic_energy: f64,
}

/// Random `(v, v_*, sigma, alpha)` with Gaussian velocities of random scale
/// and `alpha` uniform in [0, 1]. Momentum error is relative to `|v| + |v_*|`,
/// energy errors relative to `|v|^2 + |v_*|^2`.
pub fn collision_errors(samples: usize, dim: usize, seed: u64) -> Result<CollisionErrors> {
    let mut rng = stream(seed, &[]);
    let mut v = vec![0.0; dim];
    let mut w = vec![0.0; dim];
    let mut sigma = vec![0.0; dim];
    let mut out = CollisionErrors { momentum: 0.0, energy_identity: 0.0, elastic_energy: 0.0 };
    for _ in 0..samples {
        let scale = 10f64.powf(rng.random_range(-2.0..2.0));
        v.iter_mut().for_each(|c| *c = scale * rng.sample::<f64, _>(StandardNormal));
        w.iter_mut().for_each(|c| *c = scale * rng.sample::<f64, _>(StandardNormal));
        uniform_on_sphere(&mut rng, &mut sigma);
        let alpha: f64 = rng.random();
        let (a, b) = post_collision(&v, &w, &sigma, alpha)?;
        let e_in = norm2(&v) + norm2(&w);
        let p_scale = norm2(&v).sqrt() + norm2(&w).sqrt();
        let dp = (0..dim).map(|k| (a[k] + b[k] - v[k] - w[k]).powi(2)).sum::<f64>().sqrt();
        out.momentum = out.momentum.max(dp / p_scale);
        let de = norm2(&a) + norm2(&b) - e_in;
        let predicted = energy_loss(&v, &w, &sigma, alpha)?;
        out.energy_identity = out.energy_identity.max((de - predicted).abs() / e_in);
        let (a, b) = post_collision(&v, &w, &sigma, 1.0)?;
        out.elastic_energy = out.elastic_energy.max((norm2(&a) + norm2(&b) - e_in).abs() / e_in);
    }
    Ok(out)
}

/// Monte Carlo estimate of a Gaussian identity against its closed form.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonteCarloIdentity {
    pub name: &'static str,
    pub closed: f64,
    pub estimate: f64,
    pub stderr: f64,
}

impl MonteCarloIdentity {
    /// Deviation in standard errors.
    pub fn z(&self) -> f64 {
        (self.estimate - self.closed).abs() / self.stderr
    }
}

/// The moment identities estimated from `pairs` independent standard
/// Gaussian pairs `(v, v_*)`.
pub fn monte_carlo_identities(pairs: usize, dim: usize, seed: u64) -> Result<Vec<MonteCarloIdentity>> {
    let closed = analytics::moment_identities(dim)?;
    let mut rng = stream(seed, &[1]);
    let mut v = vec![0.0; dim];
    let mut w = vec![0.0; dim];
    let mut sum = [0.0f64; 4];
    let mut sq = [0.0f64; 4];
    for _ in 0..pairs {
        v.iter_mut().for_each(|c| *c = rng.sample(StandardNormal));
        w.iter_mut().for_each(|c| *c = rng.sample(StandardNormal));
        let v2 = norm2(&v);
        let u3 = v.iter().zip(&w).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().powf(1.5);
        for (k, x) in [v2, v2 * v2, u3, v2 * u3].into_iter().enumerate() {
            sum[k] += x;
            sq[k] += x * x;
        }
    }
    let n = pairs as f64;
    Ok(closed
        .iter()
        .enumerate()
        .map(|(k, m)| {
            let mean = sum[k] / n;
            let var = (sq[k] / n - mean * mean) * n / (n - 1.0);
            MonteCarloIdentity { name: m.name, closed: m.closed, estimate: mean, stderr: (var / n).sqrt() }
        })
        .collect())
}

/// Kinematics and analytics checks in dimension 3 with the default
/// cross-section `b = 1`. `samples` sets both the number of random
/// collisions and of Monte Carlo pairs.
pub fn run_all(samples: usize, seed: u64) -> Result<Vec<Check>> {
    let dim = 3;
    let mut checks = Vec::new();

    let ce = collision_errors(samples, dim, seed)?;
    checks.push(Check::at_most("collision momentum conservation", ce.momentum, 1e-12));
    checks.push(Check::at_most("collision energy-loss identity", ce.energy_identity, 1e-12));
    checks.push(Check::at_most("elastic energy conservation", ce.elastic_energy, 1e-12));

    let u = [1.0, -0.5, 0.25];
    let u_hat: Vec<f64> = u.iter().map(|c| c / norm2(&u).sqrt()).collect();
    let (a, b) = post_collision(&u, &[0.0; 3], &u_hat, 0.3)?;
    let head_on = (0..3).map(|k| (a[k] - u[k]).abs() + b[k].abs()).fold(0.0, f64::max);
    checks.push(Check::at_most("sigma along u leaves the pair unchanged", head_on, 1e-15));

    let cs = CrossSection::constant(1.0);
    let kc = kernel_constants(&cs, dim)?;
    checks.push(Check::at_most("b0 = 4 pi for b = 1", rel(kc.b0, 4.0 * PI), 1e-10));
    checks.push(Check::at_most("b1 = pi / 2 for b = 1", rel(kc.b1, PI / 2.0), 1e-10));
    let report = validate_cross_section(&cs, 1001)?;
    checks.push(Check::at_most("cross-section hypotheses", report.violations.len() as f64, 0.0));

    for m in analytics::moment_identities(dim)? {
        checks.push(Check::at_most(format!("{} quadrature vs closed form", m.name), m.rel_error(), 1e-8));
    }

    for m in monte_carlo_identities(samples, dim, seed)? {
        checks.push(Check::at_most(format!("{} Monte Carlo, standard errors", m.name), m.z(), 3.0));
    }

    let tb = analytics::theta_bar1(kc.b1, dim);
    let three_d = (9.0 * PI).powf(1.0 / 3.0) / (1024.0 * kc.b1 * kc.b1).powf(1.0 / 3.0);
    checks.push(Check::at_most("theta_bar1 general vs three-dimensional form", rel(tb, three_d), 1e-12));
    let rho = 1.0;
    let de = analytics::dissipation_de_maxwellian(tb, rho, kc.b1, dim);
    checks.push(Check::at_most("D_E(M_theta_bar1) = N rho^2", rel(de, dim as f64 * rho * rho), 1e-12));
    checks.push(Check::at_most(
        "theta_pred(1) = theta_bar1",
        rel(analytics::theta_pred(1.0, kc.b1, dim), tb),
        1e-12,
    ));

    let psi = analytics::Psi::new(rho, dim, kc.b1);
    checks.push(Check::at_most("Psi root bisection vs closed form", rel(psi.root()?, psi.closed_root()), 1e-10));

    let phi = Phi1::new(rho, tb, dim)?;
    checks.push(Check::at_most("phi1 normalised in L1_2", (phi.l1_2_norm() - 1.0).abs(), 1e-10));
    checks.push(Check::at_most("phi1 has zero mass", phi.mass().abs(), 1e-10));
    checks.push(Check::at_most("E(phi1) quadrature vs closed form", rel(phi.energy(), phi.energy_closed()), 1e-6));
    checks.push(Check::at_most(
        "dissipation pairing quadrature vs closed form",
        rel(phi.dissipation_pairing(kc.b1)?, phi.dissipation_pairing_closed()),
        1e-6,
    ));
    Ok(checks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass() {
        let checks = run_all(20_000, 1).unwrap();
        for c in &checks {
            assert!(c.pass, "{c:?}");
        }
    }
}

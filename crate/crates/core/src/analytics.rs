//! Closed-form and quadrature predictions for Maxwellians, the elastic-limit
//! temperature, the energy balance, and the energy eigenmode.

use std::f64::consts::PI;

use serde::Serialize;
use statrs::function::gamma::ln_gamma;

use crate::error::{contract, Error, Result};
use crate::kinematics::{norm2, sphere_area, KernelConstants};
use crate::quadrature::GaussLegendre;

/// Default node count for radial Gauss–Legendre quadrature.
pub const RADIAL_NODES: usize = 256;
/// Radial cut-off in units of `sqrt(theta)`.
pub const RADIAL_CUTOFF: f64 = 12.0;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaxwellianParams {
    pub rho: f64,
    pub u: Vec<f64>,
    pub theta: f64,
}

impl MaxwellianParams {
    pub fn new(rho: f64, u: Vec<f64>, theta: f64) -> Result<Self> {
        if !(rho > 0.0 && theta > 0.0) {
            return Err(contract(format!("Maxwellian needs rho > 0 and theta > 0 (got {rho}, {theta})")));
        }
        if u.len() < 2 {
            return Err(contract("Maxwellian dimension must be at least 2"));
        }
        Ok(Self { rho, u, theta })
    }

    /// Centred Maxwellian `M_{rho,0,theta}` in dimension `dim`.
    pub fn centred(rho: f64, theta: f64, dim: usize) -> Result<Self> {
        Self::new(rho, vec![0.0; dim], theta)
    }

    pub fn dim(&self) -> usize {
        self.u.len()
    }

    /// Density as a function of `|v - u|`.
    pub fn radial_pdf(&self, r: f64) -> f64 {
        let n = self.dim() as f64;
        self.rho * (-0.5 * n * (2.0 * PI * self.theta).ln() - r * r / (2.0 * self.theta)).exp()
    }
}

pub fn maxwellian_pdf(p: &MaxwellianParams, v: &[f64]) -> Result<f64> {
    if v.len() != p.dim() {
        return Err(contract("velocity and Maxwellian dimensions differ"));
    }
    let d2: f64 = v.iter().zip(&p.u).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(p.radial_pdf(d2.sqrt()))
}

/// `E|v|^k` under the standard Maxwellian `M_{1,0,1}` in dimension `dim`.
pub fn gaussian_moment(dim: usize, k: f64) -> f64 {
    let n = dim as f64;
    (0.5 * k * 2f64.ln() + ln_gamma(0.5 * (n + k)) - ln_gamma(0.5 * n)).exp()
}

/// `∫∫ M M_* |v - v_*|^3` for the standard Maxwellian.
pub fn relative_speed_cubed(dim: usize) -> f64 {
    2f64.powf(1.5) * gaussian_moment(dim, 3.0)
}

/// `∫∫ M M_* |v|^2 |v - v_*|^3` for the standard Maxwellian.
pub fn energy_weighted_relative_speed_cubed(dim: usize) -> f64 {
    2f64.sqrt() * (2.0 * dim as f64 + 3.0) * gaussian_moment(dim, 3.0)
}

/// Elastic-limit temperature at which bath input balances dissipation.
pub fn theta_bar1(b1: f64, dim: usize) -> f64 {
    let n = dim as f64;
    0.5 * n.powf(2.0 / 3.0) * b1.powf(-2.0 / 3.0) * gaussian_moment(dim, 3.0).powf(-2.0 / 3.0)
}

/// Temperature balancing the energy equation at `tau = rho (1 - alpha)`
/// when the profile is replaced by a Maxwellian. Independent of `rho`.
pub fn theta_pred(alpha: f64, b1: f64, dim: usize) -> f64 {
    let n = dim as f64;
    (2.0 * n / ((1.0 + alpha) * 2f64.powf(1.5) * b1 * gaussian_moment(dim, 3.0))).powf(2.0 / 3.0)
}

/// Steady temperature under Maxwellian closure for an explicit bath
/// strength `tau`: `(1 - alpha^2) D_E(M_theta) = 2 N rho tau`.
pub fn theta_for_tau(alpha: f64, tau: f64, rho: f64, b1: f64, dim: usize) -> f64 {
    let n = dim as f64;
    let k = (1.0 - alpha * alpha) * b1 * rho * rho * relative_speed_cubed(dim);
    (2.0 * n * rho * tau / k).powf(2.0 / 3.0)
}

/// `D_E(M_{rho,0,theta}) = b1 rho^2 theta^{3/2} 2^{3/2} m_3`.
pub fn dissipation_de_maxwellian(theta: f64, rho: f64, b1: f64, dim: usize) -> f64 {
    b1 * rho * rho * theta.powf(1.5) * relative_speed_cubed(dim)
}

/// Balance function `Psi(theta) = k1 - k2 theta^{3/2}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Psi {
    pub k1: f64,
    pub k2: f64,
}

impl Psi {
    pub fn new(rho: f64, dim: usize, b1: f64) -> Self {
        Self {
            k1: 2.0 * rho * rho * dim as f64,
            k2: 2f64.powf(1.5) * rho * rho * b1 * gaussian_moment(dim, 3.0),
        }
    }

    pub fn eval(&self, theta: f64) -> f64 {
        self.k1 - self.k2 * theta.powf(1.5)
    }

    pub fn closed_root(&self) -> f64 {
        (self.k1 / self.k2).powf(2.0 / 3.0)
    }

    /// Positive zero by bisection.
    pub fn root(&self) -> Result<f64> {
        let mut lo = 0.0;
        let mut hi = 1.0;
        let mut grow = 0;
        while self.eval(hi) > 0.0 {
            hi *= 2.0;
            grow += 1;
            if grow > 2000 {
                return Err(Error::Numeric {
                    what: "Psi bisection bracket".into(),
                    achieved: self.eval(hi),
                });
            }
        }
        if self.eval(lo) <= 0.0 {
            return Err(Error::Numeric {
                what: "Psi bisection bracket".into(),
                achieved: self.eval(lo),
            });
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.eval(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 1e-15 * hi {
                break;
            }
        }
        Ok(0.5 * (lo + hi))
    }
}

pub fn psi(theta: f64, rho: f64, dim: usize, b1: f64) -> f64 {
    Psi::new(rho, dim, b1).eval(theta)
}

pub fn psi_root(rho: f64, dim: usize, b1: f64) -> Result<f64> {
    Psi::new(rho, dim, b1).root()
}

/// Lower and upper bounds on the steady energy.
pub fn energy_bounds(alpha: f64, rho: f64, kc: &KernelConstants, dim: usize) -> (f64, f64) {
    let n = dim as f64;
    let upper = rho * (2.0 * n / kc.b1).powf(2.0 / 3.0);
    let lower = rho * (alpha * alpha * n * n / (2f64.sqrt() * kc.b2)).powf(2.0 / 3.0);
    (lower, upper)
}

/// First-order energy eigenvalue `-3 rho (1 - alpha) / theta_bar1`.
pub fn mu_alpha_pred(alpha: f64, rho: f64, theta_bar1: f64) -> f64 {
    -3.0 * rho * (1.0 - alpha) / theta_bar1
}

/// The alternative constant `-3 rho (1 - alpha)`, kept for comparison.
pub fn mu_alpha_alt(alpha: f64, rho: f64) -> f64 {
    -3.0 * rho * (1.0 - alpha)
}

/// Integral of a radial function over R^N by Gauss–Legendre on
/// `[0, R]` with `R = 12 sqrt(theta)`; `splits` are interior radii where the
/// integrand may have a kink.
pub fn radial_integral<F: Fn(f64) -> f64>(dim: usize, theta: f64, splits: &[f64], f: F) -> f64 {
    let rule = GaussLegendre::new(RADIAL_NODES);
    radial_integral_with(&rule, dim, theta, splits, f)
}

fn radial_integral_with<F: Fn(f64) -> f64>(
    rule: &GaussLegendre,
    dim: usize,
    theta: f64,
    splits: &[f64],
    f: F,
) -> f64 {
    let r_max = RADIAL_CUTOFF * theta.sqrt();
    let surface = sphere_area(dim - 1);
    let p = dim as i32 - 1;
    let mut pts = vec![0.0];
    pts.extend(splits.iter().copied().filter(|&s| s > 0.0 && s < r_max));
    pts.push(r_max);
    pts.windows(2)
        .map(|w| rule.integrate(w[0], w[1], |r| f(r) * r.powi(p)))
        .sum::<f64>()
        * surface
}

/// Angular mean of `|v - w|^3` over directions, for `|v| = r`, `|w| = s`.
pub fn mean_cubed_distance(dim: usize, r: f64, s: f64) -> f64 {
    if r == 0.0 || s == 0.0 {
        return (r + s).powi(3);
    }
    if dim == 3 {
        return ((r + s).powi(5) - (r - s).abs().powi(5)) / (10.0 * r * s);
    }
    let rule = angular_rule();
    let p = dim as i32 - 2;
    let (num, den) = rule
        .mapped(0.0, PI)
        .map(|(phi, w)| {
            let sw = w * phi.sin().powi(p);
            let d2 = (r * r + s * s - 2.0 * r * s * phi.cos()).max(0.0);
            (sw * d2 * d2.sqrt(), sw)
        })
        .fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
    num / den
}

fn angular_rule() -> &'static GaussLegendre {
    use std::sync::OnceLock;
    static RULE: OnceLock<GaussLegendre> = OnceLock::new();
    RULE.get_or_init(|| GaussLegendre::new(96))
}

/// A Gaussian moment identity evaluated in closed form and by quadrature.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentIdentity {
    pub name: &'static str,
    pub closed: f64,
    pub quadrature: f64,
}

impl MomentIdentity {
    pub fn rel_error(&self) -> f64 {
        (self.quadrature / self.closed - 1.0).abs()
    }
}

/// `∫M|v|^2`, `∫M|v|^4`, `∫∫MM_*|u|^3` and `∫∫MM_*|v|^2|u|^3` for the
/// standard Maxwellian in dimension `dim`.
pub fn moment_identities(dim: usize) -> Result<Vec<MomentIdentity>> {
    if dim < 2 {
        return Err(contract("dimension must be at least 2"));
    }
    let n = dim as f64;
    let p = MaxwellianParams::centred(1.0, 1.0, dim)?;
    let rule = GaussLegendre::new(128);
    let inner = |r: f64| radial_integral_with(&rule, dim, 1.0, &[], |s| p.radial_pdf(s) * mean_cubed_distance(dim, r, s));
    Ok(vec![
        MomentIdentity {
            name: "Mv2",
            closed: n,
            quadrature: radial_integral(dim, 1.0, &[], |r| p.radial_pdf(r) * r * r),
        },
        MomentIdentity {
            name: "Mv4",
            closed: n * (n + 2.0),
            quadrature: radial_integral(dim, 1.0, &[], |r| p.radial_pdf(r) * r.powi(4)),
        },
        MomentIdentity {
            name: "MMu3",
            closed: relative_speed_cubed(dim),
            quadrature: radial_integral_with(&rule, dim, 1.0, &[], |r| p.radial_pdf(r) * inner(r)),
        },
        MomentIdentity {
            name: "MMv2u3",
            closed: energy_weighted_relative_speed_cubed(dim),
            quadrature: radial_integral_with(&rule, dim, 1.0, &[], |r| p.radial_pdf(r) * r * r * inner(r)),
        },
    ])
}

/// Normalised energy eigenfunction of the elastic linearization,
/// `phi1 = c0 (|v|^2 - N theta_bar1) M_{rho,0,theta_bar1}` with
/// `‖phi1‖_{L¹_2} = 1`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Phi1 {
    pub rho: f64,
    pub theta: f64,
    pub dim: usize,
    pub c0: f64,
}

impl Phi1 {
    pub fn new(rho: f64, theta_bar1: f64, dim: usize) -> Result<Self> {
        if !(rho > 0.0 && theta_bar1 > 0.0) || dim < 2 {
            return Err(contract("phi1 needs rho > 0, theta > 0, N >= 2"));
        }
        let m = MaxwellianParams::centred(rho, theta_bar1, dim)?;
        let n = dim as f64;
        let node = (n * theta_bar1).sqrt();
        let norm = radial_integral(dim, theta_bar1, &[node], |r| {
            (r * r - n * theta_bar1).abs() * m.radial_pdf(r) * (1.0 + r * r)
        });
        if !(norm.is_finite() && norm > 0.0) {
            return Err(Error::Numeric {
                what: "phi1 normalization".into(),
                achieved: norm,
            });
        }
        Ok(Self {
            rho,
            theta: theta_bar1,
            dim,
            c0: 1.0 / norm,
        })
    }

    pub fn radial(&self, r: f64) -> f64 {
        let m = MaxwellianParams {
            rho: self.rho,
            u: vec![0.0; self.dim],
            theta: self.theta,
        };
        self.c0 * (r * r - self.dim as f64 * self.theta) * m.radial_pdf(r)
    }

    pub fn eval(&self, v: &[f64]) -> f64 {
        self.radial(norm2(v).sqrt())
    }

    /// `∫ phi1 dv`.
    pub fn mass(&self) -> f64 {
        radial_integral(self.dim, self.theta, &[], |r| self.radial(r))
    }

    /// `∫ |phi1| <v>^2 dv`.
    pub fn l1_2_norm(&self) -> f64 {
        let node = (self.dim as f64 * self.theta).sqrt();
        radial_integral(self.dim, self.theta, &[node], |r| self.radial(r).abs() * (1.0 + r * r))
    }

    /// `E(phi1) = ∫ phi1 |v|^2 dv` by quadrature.
    pub fn energy(&self) -> f64 {
        radial_integral(self.dim, self.theta, &[], |r| self.radial(r) * r * r)
    }

    pub fn energy_closed(&self) -> f64 {
        2.0 * self.dim as f64 * self.c0 * self.rho * self.theta * self.theta
    }

    /// `b1 ∫∫ F̄1 (phi1)_* |u|^3` by nested radial quadrature.
    pub fn dissipation_pairing(&self, b1: f64) -> Result<f64> {
        let m = MaxwellianParams::centred(self.rho, self.theta, self.dim)?;
        let rule = GaussLegendre::new(128);
        let v = radial_integral_with(&rule, self.dim, self.theta, &[], |r| {
            m.radial_pdf(r)
                * radial_integral_with(&rule, self.dim, self.theta, &[], |s| {
                    self.radial(s) * mean_cubed_distance(self.dim, r, s)
                })
        });
        Ok(b1 * v)
    }

    pub fn dissipation_pairing_closed(&self) -> f64 {
        1.5 * self.dim as f64 * self.c0 * self.rho * self.rho * self.theta
    }
}

/// Closed-form predictions for one parameter set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SteadyPrediction {
    pub alpha: f64,
    pub rho: f64,
    pub dim: usize,
    pub cross_section: String,
    pub kernel: KernelConstants,
    pub theta_bar1: f64,
    pub theta_pred: f64,
    pub psi_root: f64,
    pub mu_alpha: f64,
    pub mu_alpha_alt: f64,
    pub c0: f64,
    pub energy_lower: f64,
    pub energy_upper: f64,
    /// `rho N theta_pred`, the closure value of the steady energy.
    pub energy_pred: f64,
}

impl SteadyPrediction {
    pub fn new(alpha: f64, rho: f64, kc: KernelConstants, dim: usize, cross_section: &str) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(contract(format!("alpha = {alpha} outside (0, 1]")));
        }
        if !(rho > 0.0) {
            return Err(contract("rho must be positive"));
        }
        let tb = theta_bar1(kc.b1, dim);
        let tp = theta_pred(alpha, kc.b1, dim);
        let (lo, hi) = energy_bounds(alpha, rho, &kc, dim);
        Ok(Self {
            alpha,
            rho,
            dim,
            cross_section: cross_section.to_string(),
            kernel: kc,
            theta_bar1: tb,
            theta_pred: tp,
            psi_root: psi_root(rho, dim, kc.b1)?,
            mu_alpha: mu_alpha_pred(alpha, rho, tb),
            mu_alpha_alt: mu_alpha_alt(alpha, rho),
            c0: Phi1::new(rho, tb, dim)?.c0,
            energy_lower: lo,
            energy_upper: hi,
            energy_pred: rho * dim as f64 * tp,
        })
    }
}

/// JSON table of predictions over a grid of `(alpha, rho)`.
pub fn prediction_table(
    alphas: &[f64],
    rhos: &[f64],
    kc: KernelConstants,
    dim: usize,
    cross_section: &str,
) -> Result<serde_json::Value> {
    let mut rows = Vec::new();
    for &rho in rhos {
        for &alpha in alphas {
            rows.push(SteadyPrediction::new(alpha, rho, kc, dim, cross_section)?);
        }
    }
    Ok(serde_json::to_value(rows)?)
}

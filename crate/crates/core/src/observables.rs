//! Estimators over particle ensembles.
//!
//! Entropy and distance functionals work on radial histograms: the speed
//! distribution about the mean velocity is binned, and every bin is compared
//! with the exact mass the reference Maxwellian puts in the same shell. The
//! overflow shell beyond `r_max` is a bin of its own, so the coarse-grained
//! measures have equal total mass and the discrete Csiszár–Kullback–Pinsker
//! inequality holds exactly.

use std::io::Write;

use rand::Rng;
use serde::Serialize;
use statrs::function::gamma::gamma_lr;

use crate::analytics::MaxwellianParams;
use crate::dsmc::VelocityEnsemble;
use crate::error::{contract, Error, Result};
use crate::kinematics::sphere_area;

/// Largest ensemble for which the dissipation estimator visits every pair.
pub const EXHAUSTIVE_PAIR_LIMIT: usize = 4096;
pub const DEFAULT_BINS: usize = 64;
/// Default histogram range in units of `sqrt(theta)`.
pub const DEFAULT_RANGE: f64 = 8.0;

/// Polynomial moments, with `m_k = ∫ f |v|^{2k}`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentSet {
    pub rho: f64,
    pub momentum: Vec<f64>,
    /// Energy `∫ f |v|^2`.
    pub m1: f64,
    /// `∫ f |v|^3`.
    pub m3_2: f64,
    pub m2: f64,
    pub m3: f64,
    pub m4: f64,
    pub theta: f64,
    /// Set when all velocities coincide, so `theta` carries no information.
    pub degenerate: bool,
}

pub fn moments(e: &VelocityEnsemble) -> MomentSet {
    let w = e.weight();
    let (mut s1, mut s3_2, mut s2, mut s3, mut s4) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for v in e.iter() {
        let r2: f64 = v.iter().map(|c| c * c).sum();
        let r4 = r2 * r2;
        s1 += r2;
        s3_2 += r2 * r2.sqrt();
        s2 += r4;
        s3 += r4 * r2;
        s4 += r4 * r4;
    }
    let first = e.velocity(0);
    let degenerate = e.iter().all(|v| v == first);
    let m1 = w * s1;
    MomentSet {
        rho: e.rho(),
        momentum: e.momentum(),
        m1,
        m3_2: w * s3_2,
        m2: w * s2,
        m3: w * s3,
        m4: w * s4,
        theta: m1 / (e.rho() * e.dim() as f64),
        degenerate,
    }
}

/// `Σ w (v_x^2 - v_y^2)`; zero in expectation for isotropic data.
pub fn quadrupole(e: &VelocityEnsemble) -> f64 {
    e.weight() * e.iter().map(|v| v[0] * v[0] - v[1] * v[1]).sum::<f64>()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
}

#[inline]
fn cubed_distance(a: &[f64], b: &[f64]) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    d2 * d2.sqrt()
}

/// Estimates `D_E = b1 ∫∫ f f_* |v - v_*|^3` as `b1 rho^2` times the mean of
/// `|v_i - v_j|^3` over distinct pairs.
///
/// Up to [`EXHAUSTIVE_PAIR_LIMIT`] particles every pair is visited and the
/// standard error is the first-order U-statistic one, `2 sd(h_i) / sqrt(Np)`
/// with `h_i` the mean over partners of particle `i`. Larger ensembles use
/// `pair_budget` uniformly drawn pairs and report the sampling error.
pub fn dissipation_de_hat<R: Rng + ?Sized>(
    e: &VelocityEnsemble,
    b1: f64,
    pair_budget: usize,
    rng: &mut R,
) -> Result<Estimate> {
    if pair_budget == 0 {
        return Err(contract("pair_budget must be at least 1"));
    }
    let np = e.np();
    let scale = b1 * e.rho() * e.rho();
    if np <= EXHAUSTIVE_PAIR_LIMIT {
        let mut h = vec![0.0; np];
        for i in 0..np {
            let vi = e.velocity(i);
            for j in i + 1..np {
                let c = cubed_distance(vi, e.velocity(j));
                h[i] += c;
                h[j] += c;
            }
        }
        let denom = (np - 1) as f64;
        h.iter_mut().for_each(|x| *x /= denom);
        let mean = h.iter().sum::<f64>() / np as f64;
        let var = if np > 2 {
            h.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (np - 1) as f64
        } else {
            0.0
        };
        return Ok(Estimate {
            value: scale * mean,
            stderr: scale * 2.0 * (var / np as f64).sqrt(),
        });
    }
    let (mut sum, mut sum2) = (0.0, 0.0);
    for _ in 0..pair_budget {
        let i = rng.random_range(0..np);
        let mut j = rng.random_range(0..np - 1);
        if j >= i {
            j += 1;
        }
        let c = cubed_distance(e.velocity(i), e.velocity(j));
        sum += c;
        sum2 += c * c;
    }
    let n = pair_budget as f64;
    let mean = sum / n;
    let var = if pair_budget > 1 {
        ((sum2 - n * mean * mean) / (n - 1.0)).max(0.0)
    } else {
        0.0
    };
    Ok(Estimate {
        value: scale * mean,
        stderr: scale * (var / n).sqrt(),
    })
}

/// Relative defect of the steady energy balance,
/// `(1 - alpha^2) D_E / (2 N rho tau) - 1`.
pub fn stationarity_residual(de: f64, alpha: f64, tau: f64, rho: f64, dim: usize) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(contract("stationarity residual needs tau > 0"));
    }
    Ok((1.0 - alpha * alpha) * de / (2.0 * dim as f64 * rho * tau) - 1.0)
}

/// Speed histogram about a centre velocity, stored as mass per shell.
///
/// Accumulating several ensembles averages them; `samples` counts the
/// particles that went in and drives the bias floor.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RadialHistogram {
    dim: usize,
    r_max: f64,
    mass: Vec<f64>,
    overflow: f64,
    snapshots: usize,
    samples: usize,
    rho_sum: f64,
}

impl RadialHistogram {
    pub fn empty(dim: usize, bins: usize, r_max: f64) -> Result<Self> {
        if bins < 8 {
            return Err(contract(format!("histogram needs at least 8 bins, got {bins}")));
        }
        if !(r_max > 0.0 && r_max.is_finite()) {
            return Err(contract(format!("histogram range must be positive, got {r_max}")));
        }
        Ok(Self {
            dim,
            r_max,
            mass: vec![0.0; bins],
            overflow: 0.0,
            snapshots: 0,
            samples: 0,
            rho_sum: 0.0,
        })
    }

    /// Histogram of `|v - mean|`; `r_max` defaults to `8 sqrt(theta)` of the
    /// centred ensemble.
    pub fn from_ensemble(e: &VelocityEnsemble, bins: usize, r_max: Option<f64>) -> Result<Self> {
        let r_max = match r_max {
            Some(r) => r,
            None => {
                let theta = central_temperature(e);
                if theta > 0.0 { DEFAULT_RANGE * theta.sqrt() } else { 1.0 }
            }
        };
        let mut h = Self::empty(e.dim(), bins, r_max)?;
        h.add(e)?;
        Ok(h)
    }

    /// Exact shell masses of a Maxwellian, as if from infinitely many particles.
    pub fn from_maxwellian(m: &MaxwellianParams, bins: usize, r_max: f64) -> Result<Self> {
        let mut h = Self::empty(m.dim(), bins, r_max)?;
        let (mass, overflow) = maxwellian_shell_masses(m, &h.edges());
        h.mass = mass;
        h.overflow = overflow;
        h.snapshots = 1;
        h.samples = usize::MAX;
        h.rho_sum = m.rho;
        Ok(h)
    }

    /// Adds one ensemble, binned about its own mean velocity.
    pub fn add(&mut self, e: &VelocityEnsemble) -> Result<()> {
        if e.dim() != self.dim {
            return Err(contract("ensemble and histogram dimensions differ"));
        }
        let w = e.weight();
        let mean: Vec<f64> = e.momentum().iter().map(|p| p / e.rho()).collect();
        let bins = self.mass.len();
        let inv_width = bins as f64 / self.r_max;
        for v in e.iter() {
            let r = v.iter().zip(&mean).map(|(c, m)| (c - m) * (c - m)).sum::<f64>().sqrt();
            let b = (r * inv_width) as usize;
            if b < bins {
                self.mass[b] += w;
            } else {
                self.overflow += w;
            }
        }
        self.snapshots += 1;
        self.samples = self.samples.saturating_add(e.np());
        self.rho_sum += e.rho();
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if other.dim != self.dim || other.mass.len() != self.mass.len() || other.r_max != self.r_max {
            return Err(contract("histograms with different binning cannot be merged"));
        }
        self.mass.iter_mut().zip(&other.mass).for_each(|(a, b)| *a += b);
        self.overflow += other.overflow;
        self.snapshots += other.snapshots;
        self.samples = self.samples.saturating_add(other.samples);
        self.rho_sum += other.rho_sum;
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn bins(&self) -> usize {
        self.mass.len()
    }

    pub fn r_max(&self) -> f64 {
        self.r_max
    }

    pub fn snapshots(&self) -> usize {
        self.snapshots
    }

    /// Mass of the averaged distribution.
    pub fn rho(&self) -> f64 {
        if self.snapshots == 0 { 0.0 } else { self.rho_sum / self.snapshots as f64 }
    }

    pub fn edges(&self) -> Vec<f64> {
        let bins = self.mass.len();
        (0..=bins).map(|k| self.r_max * k as f64 / bins as f64).collect()
    }

    /// Averaged mass per shell.
    pub fn masses(&self) -> Vec<f64> {
        let s = self.snapshots.max(1) as f64;
        self.mass.iter().map(|m| m / s).collect()
    }

    pub fn overflow(&self) -> f64 {
        self.overflow / self.snapshots.max(1) as f64
    }

    /// Shell volumes `|S^{N-1}| (r_{k+1}^N - r_k^N) / N`.
    pub fn volumes(&self) -> Vec<f64> {
        let n = self.dim as i32;
        let area = sphere_area(self.dim - 1);
        self.edges()
            .windows(2)
            .map(|w| area * (w[1].powi(n) - w[0].powi(n)) / n as f64)
            .collect()
    }

    /// Density of `f` per shell.
    pub fn densities(&self) -> Vec<f64> {
        self.masses().iter().zip(self.volumes()).map(|(m, v)| m / v).collect()
    }

    /// Plug-in bias scale `rho * bins / Np` of the entropy estimator.
    pub fn bias_floor(&self) -> f64 {
        let per_snapshot = self.samples as f64 / self.snapshots.max(1) as f64;
        self.rho() * self.mass.len() as f64 / per_snapshot
    }

    /// True when every shell with inner radius below `r` holds mass.
    pub fn interior_filled(&self, r: f64) -> bool {
        self.edges()
            .iter()
            .zip(&self.mass)
            .take_while(|(lo, _)| **lo < r)
            .all(|(_, m)| *m > 0.0)
    }
}

/// Temperature of the ensemble about its own mean velocity.
pub fn central_temperature(e: &VelocityEnsemble) -> f64 {
    let p2: f64 = e.momentum().iter().map(|p| p * p).sum();
    (e.energy() - p2 / e.rho()) / (e.rho() * e.dim() as f64)
}

/// The local Maxwellian `M[f]` sharing mass, momentum and energy with `e`.
pub fn matched_maxwellian(e: &VelocityEnsemble) -> Result<MaxwellianParams> {
    let u = e.momentum().iter().map(|p| p / e.rho()).collect();
    MaxwellianParams::new(e.rho(), u, central_temperature(e))
}

/// Mass of `m` in each shell `[edges[k], edges[k+1])` about its mean, and
/// beyond the last edge.
pub fn maxwellian_shell_masses(m: &MaxwellianParams, edges: &[f64]) -> (Vec<f64>, f64) {
    let a = 0.5 * m.dim() as f64;
    let cdf: Vec<f64> = edges
        .iter()
        .map(|&r| if r == 0.0 { 0.0 } else { gamma_lr(a, r * r / (2.0 * m.theta)) })
        .collect();
    let mass = cdf.windows(2).map(|w| m.rho * (w[1] - w[0]).max(0.0)).collect();
    let overflow = m.rho * (1.0 - cdf.last().copied().unwrap_or(0.0)).max(0.0);
    (mass, overflow)
}

fn reference_masses(h: &RadialHistogram, m: &MaxwellianParams) -> Result<(Vec<f64>, f64)> {
    if m.dim() != h.dim {
        return Err(contract("Maxwellian and histogram dimensions differ"));
    }
    Ok(maxwellian_shell_masses(m, &h.edges()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Entropy {
    pub value: f64,
    /// Shells where `f` has mass but the Maxwellian none; left out of the sum.
    pub excluded: usize,
}

/// Coarse-grained relative entropy `Σ f_k ln(f_k / M_k) vol_k`, overflow
/// shell included; empty shells contribute zero.
pub fn relative_entropy(h: &RadialHistogram, m: &MaxwellianParams) -> Result<Entropy> {
    let (mref, oref) = reference_masses(h, m)?;
    let mut value = 0.0;
    let mut excluded = 0;
    let f = h.masses();
    for (&p, &q) in f.iter().chain([h.overflow()].iter()).zip(mref.iter().chain([oref].iter())) {
        if p == 0.0 {
            continue;
        }
        if q == 0.0 {
            excluded += 1;
            continue;
        }
        value += p * (p / q).ln();
    }
    Ok(Entropy { value, excluded })
}

/// Japanese bracket `sqrt(1 + r^2)`.
pub fn bracket(r: f64) -> f64 {
    (1.0 + r * r).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Distance {
    pub value: f64,
    /// Overflow contribution `|f - M|(r > r_max) <r_max>^q`, included in `value`.
    pub overflow_part: f64,
    /// Set when the overflow shell holds mass and `q > 0`, so `value` is
    /// only a lower bound on the weighted distance.
    pub lower_bound: bool,
}

/// `Σ |f_k - M_k| <r_k>^q vol_k` with `r_k` the shell midpoint.
pub fn weighted_l1_distance(h: &RadialHistogram, m: &MaxwellianParams, q: u32) -> Result<Distance> {
    if q > 3 {
        return Err(contract(format!("weight exponent must be 0..=3, got {q}")));
    }
    let (mref, oref) = reference_masses(h, m)?;
    let edges = h.edges();
    let qf = q as f64;
    let mut value = 0.0;
    for ((w, p), r) in edges.windows(2).zip(h.masses()).zip(mref) {
        value += (p - r).abs() * bracket(0.5 * (w[0] + w[1])).powf(qf);
    }
    let o = h.overflow();
    let overflow_part = (o - oref).abs() * bracket(h.r_max).powf(qf);
    Ok(Distance {
        value: value + overflow_part,
        overflow_part,
        lower_bound: q > 0 && (o > 0.0 || oref > 0.0),
    })
}

/// Slack `2 rho H - ||f - M||_1^2` of the Csiszár–Kullback–Pinsker inequality.
pub fn ckp_slack(rho: f64, entropy: f64, l1: f64) -> f64 {
    2.0 * rho * entropy - l1 * l1
}

/// Steady energy used in the Liapunov functional.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum EnergyReference {
    /// `rho N theta_pred(alpha)`.
    Closure,
    /// A measured long-run steady energy.
    Empirical(f64),
}

/// `H1 = H(f | M[f]) + (E - E_bar)^2`.
pub fn lyapunov_h1(entropy: f64, energy: f64, e_bar: f64) -> f64 {
    entropy + (energy - e_bar) * (energy - e_bar)
}

/// One row of an observable series.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ObservableRecord {
    pub time: f64,
    pub rho: f64,
    pub theta: f64,
    pub energy: f64,
    pub m2: f64,
    pub m3: f64,
    pub de_hat: f64,
    pub de_stderr: f64,
    pub residual: f64,
    pub h_rel: f64,
    pub ckp_slack: f64,
    pub h1: f64,
    pub l1: [f64; 4],
    pub bias_floor: f64,
    pub momentum_norm: f64,
    pub quadrupole: f64,
}

impl ObservableRecord {
    pub const CSV_HEADER: &'static str =
        "time,rho,theta,m2,m3,DE_hat,residual,H_rel,CKP_slack,H1,L1q0,L1q1,L1q2,L1q3";

    pub fn csv_row(&self) -> String {
        let mut s = format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.time,
            self.rho,
            self.theta,
            self.m2,
            self.m3,
            self.de_hat,
            self.residual,
            self.h_rel,
            self.ckp_slack,
            self.h1
        );
        for d in self.l1 {
            s.push_str(&format!(",{d}"));
        }
        s
    }

    /// Whether the entropy is far enough above the bias floor for the CKP
    /// inequality to be meaningful.
    pub fn ckp_applicable(&self) -> bool {
        self.h_rel >= 10.0 * self.bias_floor
    }
}

/// Computes an [`ObservableRecord`] from an ensemble.
#[derive(Debug, Clone)]
pub struct Observer {
    pub alpha: f64,
    pub tau: f64,
    pub b1: f64,
    pub bins: usize,
    pub pair_budget: usize,
    /// Steady energy for `H1`.
    pub e_bar: f64,
}

impl Observer {
    /// Returns the record together with the snapshot's histogram.
    pub fn observe<R: Rng + ?Sized>(
        &self,
        time: f64,
        e: &VelocityEnsemble,
        rng: &mut R,
    ) -> Result<(ObservableRecord, RadialHistogram)> {
        let ms = moments(e);
        let de = dissipation_de_hat(e, self.b1, self.pair_budget, rng)?;
        let residual = if self.tau > 0.0 {
            stationarity_residual(de.value, self.alpha, self.tau, e.rho(), e.dim())?
        } else {
            f64::NAN
        };
        let hist = RadialHistogram::from_ensemble(e, self.bins, None)?;
        let (h_rel, l1) = match matched_maxwellian(e) {
            Ok(m) => {
                let h = relative_entropy(&hist, &m)?.value;
                let mut l1 = [0.0; 4];
                for (q, d) in l1.iter_mut().enumerate() {
                    *d = weighted_l1_distance(&hist, &m, q as u32)?.value;
                }
                (h, l1)
            }
            Err(_) => (f64::NAN, [f64::NAN; 4]),
        };
        let record = ObservableRecord {
            time,
            rho: ms.rho,
            theta: ms.theta,
            energy: ms.m1,
            m2: ms.m2,
            m3: ms.m3,
            de_hat: de.value,
            de_stderr: de.stderr,
            residual,
            h_rel,
            ckp_slack: ckp_slack(ms.rho, h_rel, l1[0]),
            h1: lyapunov_h1(h_rel, ms.m1, self.e_bar),
            l1,
            bias_floor: hist.bias_floor(),
            momentum_norm: ms.momentum.iter().map(|p| p * p).sum::<f64>().sqrt(),
            quadrupole: quadrupole(e),
        };
        Ok((record, hist))
    }
}

/// Time-ordered records of one run.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ObservableSeries {
    records: Vec<ObservableRecord>,
}

impl ObservableSeries {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, r: ObservableRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if !(r.time > last.time) {
                return Err(contract(format!(
                    "series time must increase ({} after {})",
                    r.time, last.time
                )));
            }
        }
        self.records.push(r);
        Ok(())
    }

    pub fn records(&self) -> &[ObservableRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{}", ObservableRecord::CSV_HEADER)?;
        for r in &self.records {
            writeln!(w, "{}", r.csv_row())?;
        }
        Ok(())
    }
}

impl TryFrom<Vec<ObservableRecord>> for ObservableSeries {
    type Error = Error;

    fn try_from(records: Vec<ObservableRecord>) -> Result<Self> {
        let mut s = Self::new();
        for r in records {
            s.push(r)?;
        }
        Ok(s)
    }
}

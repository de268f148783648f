//! Particle solver for `∂_t f = Q_α(f, f) + τ Δ_v f`.
//!
//! Each step applies Bird's no-time-counter collision scheme with a
//! relative-speed majorant, then Gaussian heat-bath kicks (first-order
//! splitting). The ensemble carries equal weights `rho / Np`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{contract, Error, Result};
use crate::kinematics::{collide_in_place, kernel_constants, AngularSampler, CrossSection, KernelConstants};
use crate::rng::{self, tag, StreamRng};

/// Upper bound on `dt b0 rho umax`.
pub const MAX_STEP_COLLISION_PROBABILITY: f64 = 0.2;
/// Fraction of the bound used when `dt` is derived automatically.
pub const AUTO_DT_FRACTION: f64 = 0.95;
/// Steps between multiplicative decays of the majorant.
pub const UMAX_DECAY_PERIOD: u64 = 1000;
pub const UMAX_DECAY_FACTOR: f64 = 0.999;
/// Majorant raise factor after an accepted pair exceeded it.
pub const UMAX_RAISE: f64 = 1.05;

#[derive(Debug, Clone, PartialEq)]
pub struct VelocityEnsemble {
    dim: usize,
    rho: f64,
    velocities: Vec<f64>,
}

impl VelocityEnsemble {
    /// `velocities` is row-major, `dim` components per particle.
    pub fn new(dim: usize, rho: f64, velocities: Vec<f64>) -> Result<Self> {
        if dim < 2 {
            return Err(contract("dimension must be at least 2"));
        }
        if !(rho > 0.0 && rho.is_finite()) {
            return Err(contract(format!("mass must be positive, got {rho}")));
        }
        if velocities.len() % dim != 0 || velocities.len() / dim < 2 {
            return Err(contract("ensemble needs at least two particles of the given dimension"));
        }
        if let Some(i) = velocities.iter().position(|c| !c.is_finite()) {
            return Err(contract(format!("non-finite velocity component for particle {}", i / dim)));
        }
        Ok(Self { dim, rho, velocities })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn np(&self) -> usize {
        self.velocities.len() / self.dim
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn weight(&self) -> f64 {
        self.rho / self.np() as f64
    }

    pub fn velocity(&self, i: usize) -> &[f64] {
        &self.velocities[i * self.dim..(i + 1) * self.dim]
    }

    pub fn velocities(&self) -> &[f64] {
        &self.velocities
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.velocities.chunks_exact(self.dim)
    }

    pub fn momentum(&self) -> Vec<f64> {
        let w = self.weight();
        let mut p = vec![0.0; self.dim];
        for v in self.iter() {
            for (pk, vk) in p.iter_mut().zip(v) {
                *pk += vk;
            }
        }
        p.iter_mut().for_each(|c| *c *= w);
        p
    }

    /// `∫ f |v|^2`.
    pub fn energy(&self) -> f64 {
        self.weight() * self.velocities.iter().map(|c| c * c).sum::<f64>()
    }

    pub fn temperature(&self) -> f64 {
        self.energy() / (self.rho * self.dim as f64)
    }

    fn shift_to_zero_mean(&mut self) {
        let np = self.np() as f64;
        let mut mean = vec![0.0; self.dim];
        for v in self.velocities.chunks_exact(self.dim) {
            for (m, c) in mean.iter_mut().zip(v) {
                *m += c;
            }
        }
        mean.iter_mut().for_each(|m| *m /= np);
        for v in self.velocities.chunks_exact_mut(self.dim) {
            for (c, m) in v.iter_mut().zip(&mean) {
                *c -= m;
            }
        }
    }

    fn rescale_energy(&mut self, target: f64) -> Result<()> {
        let e = self.energy();
        if !(e > 0.0) {
            return Err(contract("cannot rescale a zero-energy ensemble"));
        }
        let s = (target / e).sqrt();
        self.velocities.iter_mut().for_each(|c| *c *= s);
        Ok(())
    }

    /// All velocities multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            dim: self.dim,
            rho: self.rho,
            velocities: self.velocities.iter().map(|c| c * factor).collect(),
        }
    }

    /// Applies an N x N row-major matrix to every velocity.
    pub fn transformed(&self, matrix: &[f64]) -> Self {
        let d = self.dim;
        assert_eq!(matrix.len(), d * d);
        let mut out = Vec::with_capacity(self.velocities.len());
        for v in self.iter() {
            for row in matrix.chunks_exact(d) {
                out.push(row.iter().zip(v).map(|(a, b)| a * b).sum());
            }
        }
        Self { dim: d, rho: self.rho, velocities: out }
    }

    pub(crate) fn pair_mut(&mut self, i: usize, j: usize) -> (&mut [f64], &mut [f64]) {
        debug_assert_ne!(i, j);
        let d = self.dim;
        let (lo, hi) = if i < j { (i, j) } else { (j, i) };
        let (a, b) = self.velocities.split_at_mut(hi * d);
        let first = &mut a[lo * d..lo * d + d];
        let second = &mut b[..d];
        if i < j {
            (first, second)
        } else {
            (second, first)
        }
    }
}

/// Initial-datum families.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitSpec {
    Maxwellian { theta: f64 },
    /// Uniform in the ball of the given radius.
    UniformBall { radius: f64 },
    /// Isotropic two-temperature mixture: a fraction of the particles at
    /// `theta_a`, the rest at `theta_b`.
    Bimodal { theta_a: f64, theta_b: f64, fraction: f64 },
}

impl InitSpec {
    /// `∫ f |v|^2` of the sampled law for mass `rho` in dimension `dim`.
    pub fn expected_energy(&self, rho: f64, dim: usize) -> f64 {
        let n = dim as f64;
        match *self {
            InitSpec::Maxwellian { theta } => rho * n * theta,
            InitSpec::UniformBall { radius } => rho * n * radius * radius / (n + 2.0),
            InitSpec::Bimodal { theta_a, theta_b, fraction } => {
                rho * n * (fraction * theta_a + (1.0 - fraction) * theta_b)
            }
        }
    }
}

/// Samples `np` velocities, recentres to zero mean exactly and, when
/// `target_energy` is given, rescales to that energy exactly.
pub fn init_ensemble(
    spec: InitSpec,
    dim: usize,
    rho: f64,
    target_energy: Option<f64>,
    np: usize,
    seed: u64,
) -> Result<VelocityEnsemble> {
    if np < 2 {
        return Err(contract("ensemble needs Np >= 2"));
    }
    let mut rng = rng::stream(seed, &[tag::INIT]);
    let mut v = vec![0.0; np * dim];
    match spec {
        InitSpec::Maxwellian { theta } => {
            if !(theta > 0.0) {
                return Err(contract("Maxwellian initial datum needs theta > 0"));
            }
            let s = theta.sqrt();
            v.iter_mut().for_each(|c| *c = s * rng.sample::<f64, _>(StandardNormal));
        }
        InitSpec::UniformBall { radius } => {
            if !(radius > 0.0) {
                return Err(contract("uniform-ball initial datum needs radius > 0"));
            }
            for p in v.chunks_exact_mut(dim) {
                loop {
                    p.iter_mut().for_each(|c| *c = rng.random_range(-1.0..1.0));
                    if p.iter().map(|c| c * c).sum::<f64>() <= 1.0 {
                        break;
                    }
                }
                p.iter_mut().for_each(|c| *c *= radius);
            }
        }
        InitSpec::Bimodal { theta_a, theta_b, fraction } => {
            if !(theta_a > 0.0 && theta_b > 0.0 && (0.0..=1.0).contains(&fraction)) {
                return Err(contract("bimodal initial datum needs positive temperatures and fraction in [0, 1]"));
            }
            let n_a = (fraction * np as f64).round() as usize;
            for (i, p) in v.chunks_exact_mut(dim).enumerate() {
                let s = if i < n_a { theta_a.sqrt() } else { theta_b.sqrt() };
                p.iter_mut().for_each(|c| *c = s * rng.sample::<f64, _>(StandardNormal));
            }
        }
    }
    let mut e = VelocityEnsemble::new(dim, rho, v)?;
    e.shift_to_zero_mean();
    if let Some(target) = target_energy {
        if !(target > 0.0) {
            return Err(contract("target energy must be positive"));
        }
        e.rescale_energy(target)?;
        e.shift_to_zero_mean();
    }
    Ok(e)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "mode", content = "value", rename_all = "snake_case")]
pub enum TauMode {
    Explicit(f64),
    /// `tau = rho (1 - alpha)`.
    Rescaled,
}

impl TauMode {
    pub fn resolve(self, alpha: f64, rho: f64) -> f64 {
        match self {
            TauMode::Explicit(t) => t,
            TauMode::Rescaled => rho * (1.0 - alpha),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimConfig {
    pub alpha: f64,
    pub tau_mode: TauMode,
    /// `None` derives the step from the majorant bound.
    pub dt: Option<f64>,
    pub np: usize,
    pub seed: u64,
    pub momentum_projection: bool,
    /// `None` uses `8 sqrt(2 theta_0 N)` from the initial ensemble.
    pub umax_initial: Option<f64>,
    pub snapshot_interval: u64,
    pub dim: usize,
    pub rho: f64,
    pub cross_section: CrossSection,
}

impl SimConfig {
    pub fn new(alpha: f64, np: usize, seed: u64) -> Self {
        Self {
            alpha,
            tau_mode: TauMode::Rescaled,
            dt: None,
            np,
            seed,
            momentum_projection: true,
            umax_initial: None,
            snapshot_interval: 100,
            dim: 3,
            rho: 1.0,
            cross_section: CrossSection::constant(1.0),
        }
    }

    pub fn tau(&self) -> f64 {
        self.tau_mode.resolve(self.alpha, self.rho)
    }

    /// Checks everything that does not depend on the initial ensemble.
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(contract(format!("alpha = {} outside (0, 1]", self.alpha)));
        }
        if self.np < 2 {
            return Err(contract("Np must be at least 2"));
        }
        if self.dim < 2 {
            return Err(contract("dimension must be at least 2"));
        }
        if !(self.rho > 0.0) {
            return Err(contract("rho must be positive"));
        }
        if !(self.tau() >= 0.0 && self.tau().is_finite()) {
            return Err(contract(format!("tau = {} must be finite and non-negative", self.tau())));
        }
        if let Some(dt) = self.dt {
            if !(dt > 0.0 && dt.is_finite()) {
                return Err(contract("dt must be positive"));
            }
        }
        if let Some(u) = self.umax_initial {
            if !(u > 0.0 && u.is_finite()) {
                return Err(contract("umax_initial must be positive"));
            }
        }
        if self.snapshot_interval == 0 {
            return Err(contract("snapshot_interval must be at least 1"));
        }
        Ok(())
    }

    pub fn default_umax(theta0: f64, dim: usize) -> f64 {
        8.0 * (2.0 * theta0 * dim as f64).sqrt()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Counters {
    pub candidates: u64,
    pub accepted: u64,
    pub umax_violations: u64,
}

#[derive(Debug, Clone)]
pub struct SimState {
    pub time: f64,
    pub steps: u64,
    pub ensemble: VelocityEnsemble,
    pub umax: f64,
    /// Largest relative speed among accepted candidates so far.
    pub max_accepted_speed: f64,
    pub counters: Counters,
    collision_rng: StreamRng,
    diffusion_rng: StreamRng,
    candidate_carry: f64,
}

impl SimState {
    /// Fresh state with streams split from `seed`.
    pub fn new(ensemble: VelocityEnsemble, umax: f64, seed: u64) -> Self {
        Self {
            time: 0.0,
            steps: 0,
            ensemble,
            umax,
            max_accepted_speed: 0.0,
            counters: Counters::default(),
            collision_rng: rng::stream(seed, &[tag::COLLISION]),
            diffusion_rng: rng::stream(seed, &[tag::DIFFUSION]),
            candidate_carry: 0.0,
        }
    }
}

/// Parameters derived from a validated [`SimConfig`].
#[derive(Debug, Clone)]
pub struct Engine {
    pub alpha: f64,
    pub tau: f64,
    pub dt: f64,
    pub projection: bool,
    pub snapshot_interval: u64,
    pub kernel: KernelConstants,
    sampler: AngularSampler,
    config: SimConfig,
}

impl Engine {
    pub fn new(config: &SimConfig) -> Result<Self> {
        config.validate()?;
        let kernel = kernel_constants(&config.cross_section, config.dim)?;
        let sampler = AngularSampler::new(config.cross_section.clone(), config.dim)?;
        Ok(Self {
            alpha: config.alpha,
            tau: config.tau(),
            dt: config.dt.unwrap_or(f64::NAN),
            projection: config.momentum_projection,
            snapshot_interval: config.snapshot_interval,
            kernel,
            sampler,
            config: config.clone(),
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    /// Binds the engine to an initial ensemble: resolves the majorant and
    /// the step and checks the step bound.
    pub fn start(&mut self, ensemble: VelocityEnsemble, seed: u64) -> Result<SimState> {
        if ensemble.dim() != self.config.dim {
            return Err(contract("ensemble dimension differs from config"));
        }
        if (ensemble.rho() - self.config.rho).abs() > 1e-12 * self.config.rho {
            return Err(contract("ensemble mass differs from config"));
        }
        let umax = self
            .config
            .umax_initial
            .unwrap_or_else(|| SimConfig::default_umax(ensemble.temperature(), ensemble.dim()));
        if !(umax > 0.0 && umax.is_finite()) {
            return Err(contract("initial majorant must be positive; is the ensemble degenerate?"));
        }
        let bound = self.kernel.b0 * self.config.rho * umax;
        self.dt = match self.config.dt {
            Some(dt) => dt,
            None => AUTO_DT_FRACTION * MAX_STEP_COLLISION_PROBABILITY / bound,
        };
        if self.dt * bound > MAX_STEP_COLLISION_PROBABILITY * (1.0 + 1e-12) {
            return Err(Error::Config {
                key: "dt".into(),
                message: format!(
                    "dt * b0 * rho * umax = {:.4} exceeds {MAX_STEP_COLLISION_PROBABILITY}",
                    self.dt * bound
                ),
            });
        }
        Ok(SimState::new(ensemble, umax, seed))
    }

    /// NTC collisions over one step.
    pub fn collision_substep(&self, state: &mut SimState) {
        let np = state.ensemble.np();
        let w = state.ensemble.weight();
        let expected =
            0.5 * np as f64 * (np as f64 - 1.0) * w * self.kernel.b0 * state.umax * self.dt + state.candidate_carry;
        let m = expected.floor();
        state.candidate_carry = expected - m;
        let mut sigma = vec![0.0; state.ensemble.dim()];
        let mut u_hat = vec![0.0; state.ensemble.dim()];
        for _ in 0..m as u64 {
            let i = state.collision_rng.random_range(0..np);
            let mut j = state.collision_rng.random_range(0..np - 1);
            if j >= i {
                j += 1;
            }
            let draw: f64 = state.collision_rng.random();
            self.process_candidate(state, i, j, draw, &mut u_hat, &mut sigma);
        }
    }

    /// One candidate pair with acceptance draw `draw` in [0, 1).
    fn process_candidate(
        &self,
        state: &mut SimState,
        i: usize,
        j: usize,
        draw: f64,
        u_hat: &mut [f64],
        sigma: &mut [f64],
    ) {
        state.counters.candidates += 1;
        let (vi, vj) = state.ensemble.pair_mut(i, j);
        let mut speed2 = 0.0;
        for k in 0..vi.len() {
            let d = vi[k] - vj[k];
            u_hat[k] = d;
            speed2 += d * d;
        }
        let speed = speed2.sqrt();
        if speed > state.umax {
            state.counters.umax_violations += 1;
            state.umax = UMAX_RAISE * speed;
        } else if draw * state.umax >= speed {
            return;
        }
        state.counters.accepted += 1;
        state.max_accepted_speed = state.max_accepted_speed.max(speed);
        if speed == 0.0 {
            return;
        }
        u_hat.iter_mut().for_each(|c| *c /= speed);
        self.sampler.sample_into(u_hat, &mut state.collision_rng, sigma);
        collide_in_place(vi, vj, sigma, self.alpha);
    }

    /// Collision substep, bath substep, clock and majorant upkeep.
    pub fn step(&self, state: &mut SimState) {
        self.collision_substep(state);
        diffusion_substep(state, self.tau, self.dt, self.projection);
        state.steps += 1;
        state.time = state.steps as f64 * self.dt;
        if state.steps % UMAX_DECAY_PERIOD == 0 {
            state.umax = (state.umax * UMAX_DECAY_FACTOR).max(state.max_accepted_speed);
        }
    }

    /// Steps until `t_end`, calling `recorder` on the initial state, every
    /// `snapshot_interval` steps, and on the final state.
    pub fn run<T, F: FnMut(&SimState) -> T>(&self, state: &mut SimState, t_end: f64, mut recorder: F) -> Result<Vec<T>> {
        if !(t_end > state.time) {
            return Err(contract(format!("t_end = {t_end} must exceed current time {}", state.time)));
        }
        let n_steps = ((t_end - state.time) / self.dt - 1e-9).ceil().max(1.0) as u64;
        let mut out = vec![recorder(state)];
        for s in 1..=n_steps {
            self.step(state);
            if !state.ensemble.energy().is_finite() {
                let particle = state
                    .ensemble
                    .iter()
                    .position(|v| v.iter().any(|c| !c.is_finite()))
                    .unwrap_or(0);
                return Err(Error::NonFinite { time: state.time, step: state.steps, particle });
            }
            if s % self.snapshot_interval == 0 || s == n_steps {
                out.push(recorder(state));
            }
        }
        Ok(out)
    }
}

/// Gaussian heat-bath kicks with per-component variance `2 tau dt`. With
/// `projection` the kicks are recentred so total momentum is unchanged.
pub fn diffusion_substep(state: &mut SimState, tau: f64, dt: f64, projection: bool) {
    if tau == 0.0 {
        return;
    }
    let dim = state.ensemble.dim();
    let std = (2.0 * tau * dt).sqrt();
    let rng = &mut state.diffusion_rng;
    let mut mean = [0.0; 8];
    let mut mean_vec;
    let mean: &mut [f64] = if dim <= 8 {
        &mut mean[..dim]
    } else {
        mean_vec = vec![0.0; dim];
        &mut mean_vec
    };
    for v in state.ensemble.velocities.chunks_exact_mut(dim) {
        for (c, m) in v.iter_mut().zip(mean.iter_mut()) {
            let kick = std * rng.sample::<f64, _>(StandardNormal);
            *c += kick;
            *m += kick;
        }
    }
    if projection {
        let np = state.ensemble.np() as f64;
        mean.iter_mut().for_each(|m| *m /= np);
        for v in state.ensemble.velocities.chunks_exact_mut(dim) {
            for (c, m) in v.iter_mut().zip(mean.iter()) {
                *c -= m;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytics::gaussian_moment;
    use crate::kinematics::post_collision;

    fn maxwell(np: usize, theta: f64, seed: u64) -> VelocityEnsemble {
        init_ensemble(InitSpec::Maxwellian { theta }, 3, 1.0, Some(3.0 * theta), np, seed).unwrap()
    }

    #[test]
    fn init_is_exact_and_deterministic() {
        for spec in [
            InitSpec::Maxwellian { theta: 1.0 },
            InitSpec::UniformBall { radius: 2.0 },
            InitSpec::Bimodal { theta_a: 0.1, theta_b: 2.0, fraction: 0.5 },
        ] {
            let e = init_ensemble(spec, 3, 2.0, Some(6.0), 1000, 9).unwrap();
            assert!((e.energy() - 6.0).abs() < 1e-12);
            assert!(e.momentum().iter().all(|p| p.abs() < 1e-14));
            assert_eq!(e, init_ensemble(spec, 3, 2.0, Some(6.0), 1000, 9).unwrap());
            assert_ne!(e, init_ensemble(spec, 3, 2.0, Some(6.0), 1000, 10).unwrap());
            assert!((e.weight() * e.np() as f64 - 2.0).abs() < 1e-15);
        }
        assert!(init_ensemble(InitSpec::Maxwellian { theta: 0.0 }, 3, 1.0, None, 10, 1).is_err());
        assert!(init_ensemble(InitSpec::UniformBall { radius: 0.0 }, 3, 1.0, None, 10, 1).is_err());
        assert!(init_ensemble(InitSpec::Maxwellian { theta: 1.0 }, 3, 1.0, None, 1, 1).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = SimConfig::new(0.95, 100, 1);
        assert!(c.validate().is_ok());
        c.alpha = 1.2;
        assert!(c.validate().is_err());
        c.alpha = 0.9;
        c.dt = Some(1.0);
        let mut engine = Engine::new(&c).unwrap();
        assert!(matches!(engine.start(maxwell(100, 1.0, 1), 1), Err(Error::Config { .. })));
        c.dt = None;
        let mut engine = Engine::new(&c).unwrap();
        engine.start(maxwell(100, 1.0, 1), 1).unwrap();
        assert!(engine.dt * engine.kernel.b0 * 8.0 * 6f64.sqrt() <= MAX_STEP_COLLISION_PROBABILITY);
    }

    #[test]
    fn candidate_matches_hand_collision() {
        let cfg = SimConfig::new(0.7, 2, 1);
        let engine = Engine::new(&cfg).unwrap();
        let e = VelocityEnsemble::new(3, 1.0, vec![1.0, 0.0, 0.5, -1.0, 0.2, 0.0]).unwrap();
        let mut state = SimState::new(e.clone(), 10.0, 4);
        let mut probe = state.collision_rng.clone();
        let mut u_hat = [0.0; 3];
        let mut sigma = [0.0; 3];
        // draw 0 always accepts
        engine.process_candidate(&mut state, 0, 1, 0.0, &mut u_hat, &mut sigma);
        let mut expected_sigma = [0.0; 3];
        crate::kinematics::uniform_on_sphere(&mut probe, &mut expected_sigma);
        let (a, b) = post_collision(e.velocity(0), e.velocity(1), &expected_sigma, 0.7).unwrap();
        for k in 0..3 {
            assert!((state.ensemble.velocity(0)[k] - a[k]).abs() < 1e-15);
            assert!((state.ensemble.velocity(1)[k] - b[k]).abs() < 1e-15);
        }
        assert_eq!(state.counters, Counters { candidates: 1, accepted: 1, umax_violations: 0 });

        // rejected candidate leaves the pair untouched
        let before = state.ensemble.clone();
        engine.process_candidate(&mut state, 1, 0, 0.999_999, &mut u_hat, &mut sigma);
        assert_eq!(before, state.ensemble);
        assert_eq!(state.counters.accepted, 1);

        // majorant violation: collision applied and umax raised
        state.umax = 0.1;
        let speed = {
            let (p, q) = (state.ensemble.velocity(0), state.ensemble.velocity(1));
            p.iter().zip(q).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
        };
        engine.process_candidate(&mut state, 0, 1, 0.5, &mut u_hat, &mut sigma);
        assert_eq!(state.counters.umax_violations, 1);
        assert!((state.umax - UMAX_RAISE * speed).abs() < 1e-14);
        assert_eq!(state.counters.accepted, 2);
    }

    #[test]
    fn elastic_collisions_conserve_energy_and_momentum() {
        let mut cfg = SimConfig::new(1.0, 2000, 5);
        cfg.tau_mode = TauMode::Explicit(0.0);
        let mut engine = Engine::new(&cfg).unwrap();
        let mut state = engine.start(maxwell(2000, 1.0, 5), 5).unwrap();
        let e0 = state.ensemble.energy();
        for _ in 0..200 {
            engine.step(&mut state);
        }
        assert!(state.counters.accepted > 1000);
        assert!(((state.ensemble.energy() - e0) / e0).abs() < 1e-10);
        assert!(state.ensemble.momentum().iter().all(|p| p.abs() < 1e-10));
        assert!(state.umax >= state.max_accepted_speed);
    }

    #[test]
    fn inelastic_without_bath_cools() {
        let mut cfg = SimConfig::new(0.8, 1000, 6);
        cfg.tau_mode = TauMode::Explicit(0.0);
        let mut engine = Engine::new(&cfg).unwrap();
        let mut state = engine.start(maxwell(1000, 1.0, 6), 6).unwrap();
        let mut last = state.ensemble.energy();
        for _ in 0..20 {
            for _ in 0..20 {
                engine.step(&mut state);
            }
            let e = state.ensemble.energy();
            assert!(e < last);
            last = e;
        }
    }

    #[test]
    fn diffusion_zero_tau_and_projection() {
        let e = maxwell(500, 1.0, 2);
        let mut s = SimState::new(e.clone(), 1.0, 3);
        diffusion_substep(&mut s, 0.0, 0.01, true);
        assert_eq!(s.ensemble, e);
        let p0 = s.ensemble.momentum();
        diffusion_substep(&mut s, 0.3, 0.01, true);
        assert_ne!(s.ensemble, e);
        for (a, b) in s.ensemble.momentum().iter().zip(&p0) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    /// Mean energy gain of one bath kick: `2 N rho tau dt`, times
    /// `(1 - 1/Np)` when the kicks are recentred.
    #[test]
    fn diffusion_energy_increment() {
        let (tau, dt, np, reps) = (0.5, 0.01, 50usize, 10_000usize);
        let base = maxwell(np, 1.0, 8);
        for projection in [false, true] {
            let mut s = SimState::new(base.clone(), 1.0, 21);
            let mut sum = 0.0;
            let mut sum2 = 0.0;
            for _ in 0..reps {
                s.ensemble = base.clone();
                diffusion_substep(&mut s, tau, dt, projection);
                let de = s.ensemble.energy() - base.energy();
                sum += de;
                sum2 += de * de;
            }
            let mean = sum / reps as f64;
            let se = ((sum2 / reps as f64 - mean * mean) / reps as f64).sqrt();
            let mut want = 2.0 * 3.0 * 1.0 * tau * dt;
            if projection {
                want *= 1.0 - 1.0 / np as f64;
            }
            assert!((mean - want).abs() < 3.0 * se, "projection={projection}: {mean} vs {want} (se {se})");
        }
    }

    #[test]
    fn collision_rate_matches_mean_relative_speed() {
        // Elastic, no bath: the ensemble stays Maxwellian at theta = 1.
        let np = 4000;
        let mut cfg = SimConfig::new(1.0, np, 12);
        cfg.tau_mode = TauMode::Explicit(0.0);
        let mut engine = Engine::new(&cfg).unwrap();
        let mut state = engine.start(maxwell(np, 1.0, 12), 12).unwrap();
        let t_end = 3.0;
        engine.run(&mut state, t_end, |_| ()).unwrap();
        let rate = state.counters.accepted as f64 / (np as f64 * state.time);
        let mean_speed = (2.0f64).sqrt() * gaussian_moment(3, 1.0);
        let want = 0.5 * engine.kernel.b0 * mean_speed * (np as f64 - 1.0) / np as f64;
        assert!((rate / want - 1.0).abs() < 0.02, "rate {rate} vs {want}");
        let acc = state.counters.accepted as f64 / state.counters.candidates as f64;
        assert!(acc > 0.0 && acc <= 1.0);
        assert!(state.counters.umax_violations as f64 / state.counters.candidates as f64 <= 1e-4);
    }

    #[test]
    fn run_records_initial_and_final_and_is_deterministic() {
        let cfg = SimConfig { snapshot_interval: 1_000_000, ..SimConfig::new(0.9, 300, 4) };
        let go = || {
            let mut engine = Engine::new(&cfg).unwrap();
            let mut st = engine.start(maxwell(300, 0.3, 4), 4).unwrap();
            engine.run(&mut st, 0.2, |s| (s.time, s.ensemble.energy())).unwrap()
        };
        let a = go();
        assert_eq!(a.len(), 2);
        assert_eq!(a[0].0, 0.0);
        assert!(a[1].0 >= 0.2 - 1e-12);
        assert_eq!(a, go());
    }

    #[test]
    fn non_finite_velocity_aborts() {
        let cfg = SimConfig::new(0.9, 10, 1);
        let mut engine = Engine::new(&cfg).unwrap();
        let mut st = engine.start(maxwell(10, 1.0, 1), 1).unwrap();
        st.ensemble.velocities[4] = f64::NAN;
        let err = engine.run(&mut st, 1.0, |_| ()).unwrap_err();
        assert!(matches!(err, Error::NonFinite { particle: 1, .. }));
    }

    #[test]
    fn pair_mut_orders() {
        let mut e = VelocityEnsemble::new(2, 1.0, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let (a, b) = e.pair_mut(2, 0);
        assert_eq!(a, &[4.0, 5.0]);
        assert_eq!(b, &[0.0, 1.0]);
    }
}

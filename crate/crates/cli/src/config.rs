//! `key = value` configuration files and flag overrides.
//!
//! Keys are case-insensitive and `-` may stand for `_`. Unknown keys are
//! rejected. Every error names the offending key.

use std::path::{Path, PathBuf};

use granular_core::dsmc::{InitSpec, SimConfig, TauMode, MAX_STEP_COLLISION_PROBABILITY};
use granular_core::experiments::{ExperimentKind, ExperimentSpec};
use granular_core::kinematics::{kernel_constants, require_valid, CrossSection, Table};
use granular_core::observables::EnergyReference;
use granular_core::{Error, Result};

pub const DEFAULT_OUT: &str = "runs";

/// Keys accepted in files and as overrides, with their documented defaults.
pub const KEYS: &[(&str, &str)] = &[
    ("alpha", "0.95"),
    ("np", "20000"),
    ("seed", "1"),
    ("dt", "derived from the majorant bound"),
    ("tau", "rescaled"),
    ("projection", "true"),
    ("rho", "1"),
    ("dim", "3"),
    ("umax_initial", "8 sqrt(2 theta_0 N)"),
    ("snapshot_interval", "100"),
    ("cross_section", "constant:1"),
    ("replicas", "8"),
    ("burn_in", "derived"),
    ("window", "derived"),
    ("t_end", "derived"),
    ("alphas", "0.90,0.93,0.96,0.98,0.99"),
    ("sample_every", "derived"),
    ("bins", "64"),
    ("pair_budget", "20000"),
    ("delta", "0.2 (relax), 0.5 (lyapunov)"),
    ("lambda", "1.5"),
    ("energy_reference", "closure"),
    ("init", "experiment default"),
    ("smoothing", "20"),
    ("independent_scaled_run", "true"),
    ("out", DEFAULT_OUT),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub spec: ExperimentSpec,
    pub out: PathBuf,
}

fn err(key: &str, message: impl Into<String>) -> Error {
    Error::Config { key: key.to_string(), message: message.into() }
}

fn normalize(key: &str) -> String {
    key.trim().to_ascii_lowercase().replace('-', "_")
}

fn num(key: &str, value: &str) -> Result<f64> {
    value
        .trim()
        .parse::<f64>()
        .map_err(|_| err(key, format!("expected a number, got `{value}`")))
}

fn int<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse::<T>()
        .map_err(|_| err(key, format!("expected a non-negative integer, got `{value}`")))
}

fn flag(key: &str, value: &str) -> Result<bool> {
    match value.trim().to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(err(key, format!("expected true or false, got `{value}`"))),
    }
}

fn numbers(key: &str, value: &str) -> Result<Vec<f64>> {
    value.split(',').map(|v| num(key, v)).collect()
}

fn cross_section(key: &str, value: &str, base: &Path) -> Result<CrossSection> {
    let (kind, arg) = value.split_once(':').unwrap_or((value, ""));
    match kind.trim() {
        "constant" => Ok(CrossSection::constant(if arg.is_empty() { 1.0 } else { num(key, arg)? })),
        "power_law" => Ok(CrossSection::PowerLaw {
            b0_prime: if arg.is_empty() { 1.0 } else { num(key, arg)? },
            dim: 3,
        }),
        "table" => {
            let path = base.join(arg.trim());
            Table::load(&path)
                .map(CrossSection::Tabulated)
                .map_err(|e| err(key, format!("cannot load table {}: {e}", path.display())))
        }
        other => Err(err(key, format!("unknown cross-section kind `{other}`"))),
    }
}

fn init(key: &str, value: &str) -> Result<InitSpec> {
    let (kind, arg) = value
        .split_once(':')
        .ok_or_else(|| err(key, "expected kind:parameters, e.g. maxwellian:0.3"))?;
    let p = numbers(key, arg)?;
    let want = |n: usize| {
        if p.len() == n { Ok(()) } else { Err(err(key, format!("`{kind}` takes {n} parameter(s)"))) }
    };
    match kind.trim() {
        "maxwellian" => want(1).map(|_| InitSpec::Maxwellian { theta: p[0] }),
        "uniform_ball" => want(1).map(|_| InitSpec::UniformBall { radius: p[0] }),
        "bimodal" => want(3).map(|_| InitSpec::Bimodal { theta_a: p[0], theta_b: p[1], fraction: p[2] }),
        other => Err(err(key, format!("unknown initial datum `{other}`"))),
    }
}

impl RunConfig {
    pub fn new(kind: ExperimentKind) -> Self {
        let mut spec = ExperimentSpec::new(kind, SimConfig::new(0.95, 20_000, 1));
        if matches!(kind, ExperimentKind::Relax | ExperimentKind::Scaling) {
            spec.replicas = 20;
        }
        if kind == ExperimentKind::Scaling {
            spec.base.np = 50_000;
        }
        Self { spec, out: PathBuf::from(DEFAULT_OUT) }
    }

    /// Applies one `key = value` pair. `base` resolves relative paths.
    pub fn set(&mut self, key: &str, value: &str, base: &Path) -> Result<()> {
        let k = normalize(key);
        let v = value.trim();
        let s = &mut self.spec;
        match k.as_str() {
            "alpha" => s.base.alpha = num(&k, v)?,
            "np" => s.base.np = int(&k, v)?,
            "seed" => s.base.seed = int(&k, v)?,
            "dt" => s.base.dt = Some(num(&k, v)?),
            "tau" => {
                s.base.tau_mode = if v.eq_ignore_ascii_case("rescaled") {
                    TauMode::Rescaled
                } else {
                    TauMode::Explicit(num(&k, v)?)
                }
            }
            "projection" => s.base.momentum_projection = flag(&k, v)?,
            "rho" => s.base.rho = num(&k, v)?,
            "dim" => s.base.dim = int(&k, v)?,
            "umax_initial" => s.base.umax_initial = Some(num(&k, v)?),
            "snapshot_interval" => s.base.snapshot_interval = int(&k, v)?,
            "cross_section" => s.base.cross_section = cross_section(&k, v, base)?,
            "replicas" => s.replicas = int(&k, v)?,
            "burn_in" => s.burn_in = Some(num(&k, v)?),
            "window" => s.window = Some(num(&k, v)?),
            "t_end" => s.t_end = Some(num(&k, v)?),
            "alphas" => s.alphas = numbers(&k, v)?,
            "sample_every" => s.sample_every = Some(num(&k, v)?),
            "bins" => s.bins = int(&k, v)?,
            "pair_budget" => s.pair_budget = int(&k, v)?,
            "delta" => s.delta = Some(num(&k, v)?),
            "lambda" => s.lambda = num(&k, v)?,
            "energy_reference" => {
                s.energy_reference = if v.eq_ignore_ascii_case("closure") {
                    EnergyReference::Closure
                } else {
                    EnergyReference::Empirical(num(&k, v)?)
                }
            }
            "init" => s.init = Some(init(&k, v)?),
            "smoothing" => s.smoothing = int(&k, v)?,
            "independent_scaled_run" => s.independent_scaled_run = flag(&k, v)?,
            "out" => self.out = base.join(v),
            _ => {
                let known: Vec<&str> = KEYS.iter().map(|(k, _)| *k).collect();
                return Err(err(key.trim(), format!("unknown key; accepted: {}", known.join(", "))));
            }
        }
        Ok(())
    }

    /// Parses a configuration file's text.
    pub fn parse_str(&mut self, text: &str, base: &Path) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(&format!("line {}", n + 1), format!("expected `key = value`, got `{line}`")))?;
            self.set(k, v, base)?;
        }
        Ok(())
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| err("config", format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        self.parse_str(&text, base)
    }

    /// Domain checks, each naming its key.
    pub fn validate(&self) -> Result<()> {
        let s = &self.spec;
        let c = &s.base;
        if !(c.alpha > 0.0 && c.alpha <= 1.0) {
            return Err(err("alpha", format!("{} outside (0, 1]", c.alpha)));
        }
        if c.np < 2 {
            return Err(err("np", "at least two particles are required"));
        }
        if c.dim < 2 {
            return Err(err("dim", "dimension must be at least 2"));
        }
        if !(c.rho > 0.0 && c.rho.is_finite()) {
            return Err(err("rho", "mass must be positive"));
        }
        if let TauMode::Explicit(t) = c.tau_mode {
            if !(t >= 0.0 && t.is_finite()) {
                return Err(err("tau", "bath strength must be finite and non-negative"));
            }
        }
        if let Some(dt) = c.dt {
            if !(dt > 0.0 && dt.is_finite()) {
                return Err(err("dt", "time step must be positive"));
            }
        }
        if let Some(u) = c.umax_initial {
            if !(u > 0.0 && u.is_finite()) {
                return Err(err("umax_initial", "majorant must be positive"));
            }
        }
        if c.snapshot_interval == 0 {
            return Err(err("snapshot_interval", "must be at least 1"));
        }
        require_valid(&c.cross_section).map_err(|e| err("cross_section", e.to_string()))?;
        if let (Some(dt), Some(u)) = (c.dt, c.umax_initial) {
            let kc = kernel_constants(&c.cross_section, c.dim).map_err(|e| err("cross_section", e.to_string()))?;
            let p = dt * kc.b0 * c.rho * u;
            if p > MAX_STEP_COLLISION_PROBABILITY {
                return Err(err(
                    "dt",
                    format!("dt * b0 * rho * umax = {p:.4} exceeds {MAX_STEP_COLLISION_PROBABILITY}"),
                ));
            }
        }
        s.validate()
    }
}

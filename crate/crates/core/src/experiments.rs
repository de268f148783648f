//! Scripted studies comparing particle runs with the closed-form predictions.
//!
//! Every experiment is a deterministic function of its spec: replica `r`
//! draws all of its randomness from streams split off `derive_seed(seed, [r])`,
//! and replicas are aggregated in index order whatever the scheduling.

use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::analytics::{self, MaxwellianParams, SteadyPrediction};
use crate::dsmc::{init_ensemble, Counters, Engine, InitSpec, SimConfig, TauMode, VelocityEnsemble};
use crate::error::{contract, Error, Result};
use crate::kinematics::{kernel_constants, KernelConstants};
use crate::observables::{
    bracket, maxwellian_shell_masses, EnergyReference, Estimate, ObservableRecord, ObservableSeries, Observer,
    RadialHistogram, DEFAULT_BINS, DEFAULT_RANGE,
};
use crate::rng::{derive_seed, stream, tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Steady,
    Relax,
    Sweep,
    Lyapunov,
    Scaling,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Steady => "steady",
            Self::Relax => "relax",
            Self::Sweep => "sweep",
            Self::Lyapunov => "lyapunov",
            Self::Scaling => "scaling",
        }
    }
}

/// Parameters of one study. Times left as `None` are derived from the
/// predicted relaxation time `1 / |mu_alpha|`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentSpec {
    pub kind: ExperimentKind,
    pub base: SimConfig,
    pub replicas: usize,
    pub burn_in: Option<f64>,
    /// Measurement window after burn-in.
    pub window: Option<f64>,
    pub t_end: Option<f64>,
    pub alphas: Vec<f64>,
    /// Time between recorded snapshots.
    pub sample_every: Option<f64>,
    pub bins: usize,
    pub pair_budget: usize,
    /// Relative energy offset of the initial datum (relax, lyapunov).
    pub delta: Option<f64>,
    pub lambda: f64,
    pub energy_reference: EnergyReference,
    /// Overrides the experiment's own initial datum.
    pub init: Option<InitSpec>,
    /// Snapshots per smoothing block in the Liapunov trace.
    pub smoothing: usize,
    /// Whether the scaled run of the scaling check draws from its own
    /// streams; when off it reuses the reference run's seeds.
    pub independent_scaled_run: bool,
}

impl ExperimentSpec {
    pub fn new(kind: ExperimentKind, base: SimConfig) -> Self {
        Self {
            kind,
            base,
            replicas: 8,
            burn_in: None,
            window: None,
            t_end: None,
            alphas: vec![0.90, 0.93, 0.96, 0.98, 0.99],
            sample_every: None,
            bins: DEFAULT_BINS,
            pair_budget: 20_000,
            delta: None,
            lambda: 1.5,
            energy_reference: EnergyReference::Closure,
            init: None,
            smoothing: 20,
            independent_scaled_run: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: String| Error::Config { key: key.into(), message };
        self.base.validate().map_err(|e| bad("config", e.to_string()))?;
        if self.replicas < 1 {
            return Err(bad("replicas", "at least one replica is required".into()));
        }
        for (key, v) in [("burn_in", self.burn_in), ("window", self.window), ("t_end", self.t_end)] {
            if let Some(v) = v {
                if !(v >= 0.0 && v.is_finite()) {
                    return Err(bad(key, format!("must be finite and non-negative, got {v}")));
                }
            }
        }
        if let (Some(b), Some(t)) = (self.burn_in, self.t_end) {
            if b >= t {
                return Err(bad("burn_in", format!("burn-in {b} must end before t_end {t}")));
            }
        }
        if let Some(s) = self.sample_every {
            if !(s > 0.0) {
                return Err(bad("sample_every", "must be positive".into()));
            }
        }
        if self.bins < 8 {
            return Err(bad("bins", "at least 8 bins are required".into()));
        }
        if self.pair_budget < 1 {
            return Err(bad("pair_budget", "must be at least 1".into()));
        }
        if self.smoothing < 1 {
            return Err(bad("smoothing", "must be at least 1".into()));
        }
        let rescaled = self.base.tau_mode == TauMode::Rescaled;
        match self.kind {
            ExperimentKind::Steady | ExperimentKind::Relax if !rescaled => {
                return Err(bad("tau", "this experiment needs the rescaled bath".into()));
            }
            ExperimentKind::Relax => {
                let d = self.delta.unwrap_or(DEFAULT_RELAX_DELTA);
                if !(d != 0.0 && d.abs() <= 0.2) {
                    return Err(bad("delta", format!("relaxation offset must satisfy 0 < |delta| <= 0.2, got {d}")));
                }
                if self.base.alpha >= 1.0 {
                    return Err(bad("alpha", "relaxation needs alpha < 1".into()));
                }
            }
            ExperimentKind::Sweep => {
                if self.alphas.len() < 3 {
                    return Err(bad("alphas", "a sweep needs at least three values".into()));
                }
                if let Some(a) = self.alphas.iter().find(|a| !(**a > 0.0 && **a < 1.0)) {
                    return Err(bad("alphas", format!("{a} outside (0, 1)")));
                }
                if !rescaled {
                    return Err(bad("tau", "the sweep needs the rescaled bath".into()));
                }
            }
            ExperimentKind::Lyapunov if self.base.alpha < 0.98 => {
                return Err(bad("alpha", "the Liapunov trace needs alpha >= 0.98".into()));
            }
            ExperimentKind::Scaling if !(0.5..=2.0).contains(&self.lambda) => {
                return Err(bad("lambda", format!("{} outside [0.5, 2]", self.lambda)));
            }
            _ => {}
        }
        Ok(())
    }

    fn kernel(&self) -> Result<KernelConstants> {
        kernel_constants(&self.base.cross_section, self.base.dim)
    }

    fn with_alpha(&self, alpha: f64) -> Self {
        let mut s = self.clone();
        s.base.alpha = alpha;
        s
    }
}

pub const DEFAULT_RELAX_DELTA: f64 = 0.2;
pub const DEFAULT_LYAPUNOV_DELTA: f64 = 0.5;

/// Slope fit of a log-linear or log-log relation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitResult {
    pub estimate: f64,
    pub stderr: f64,
    /// Abscissa range actually used.
    pub window: (f64, f64),
    pub points: usize,
    pub r2: f64,
}

/// Ordinary least squares `y = a + b x`; returns `(b, a, stderr(b), r2)`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> Result<(f64, f64, f64, f64)> {
    let n = x.len();
    if n < 2 || n != y.len() {
        return Err(Error::Fit(format!("need at least two paired points, got {n}")));
    }
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    if !(sxx > 0.0) {
        return Err(Error::Fit("abscissae are all equal".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let stderr = if n > 2 { (sse / (nf - 2.0) / sxx).sqrt() } else { 0.0 };
    let r2 = if syy > 0.0 { 1.0 - sse / syy } else { 1.0 };
    Ok((slope, intercept, stderr, r2))
}

/// Sample mean and its standard error.
pub fn mean_stderr(xs: &[f64]) -> Estimate {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let stderr = if xs.len() > 1 {
        (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0) / n).sqrt()
    } else {
        0.0
    };
    Estimate { value: mean, stderr }
}

/// Snapshots where the CKP inequality was checked, and how many broke it.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CkpTally {
    pub checked: usize,
    pub violations: usize,
}

impl CkpTally {
    pub fn add(&mut self, records: &[ObservableRecord]) {
        for r in records.iter().filter(|r| r.ckp_applicable()) {
            self.checked += 1;
            if r.ckp_slack < -1e-12 * r.rho * r.h_rel.abs().max(1.0) {
                self.violations += 1;
            }
        }
    }

    pub fn merge(&mut self, other: CkpTally) {
        self.checked += other.checked;
        self.violations += other.violations;
    }

    pub fn holds(&self) -> bool {
        self.violations == 0
    }
}

/// One replica's recorded series and accumulated histogram.
#[derive(Debug, Clone)]
pub struct ReplicaRun {
    pub records: Vec<ObservableRecord>,
    /// Average of snapshot histograms from the accumulation start on.
    pub hist: Option<RadialHistogram>,
    pub counters: Counters,
    pub dt: f64,
    pub final_ensemble: VelocityEnsemble,
}

impl ReplicaRun {
    pub fn series(&self) -> Result<ObservableSeries> {
        ObservableSeries::try_from(self.records.clone())
    }
}

/// Histogram accumulation: from time `start` on, with fixed binning.
#[derive(Debug, Clone, Copy)]
struct Accumulate {
    start: f64,
    bins: usize,
    r_max: f64,
}

struct ReplicaPlan<'a> {
    config: &'a SimConfig,
    init: VelocityEnsemble,
    t_end: f64,
    sample_every: f64,
    observer: &'a Observer,
    accumulate: Option<Accumulate>,
    seed: u64,
}

fn run_replica(plan: ReplicaPlan) -> Result<ReplicaRun> {
    let mut engine = Engine::new(plan.config)?;
    let mut state = engine.start(plan.init, plan.seed)?;
    engine.snapshot_interval = ((plan.sample_every / engine.dt).round() as u64).max(1);
    let mut est_rng = stream(plan.seed, &[tag::ESTIMATOR]);
    let mut hist = match plan.accumulate {
        Some(a) => Some(RadialHistogram::empty(plan.config.dim, a.bins, a.r_max)?),
        None => None,
    };
    let mut failure = None;
    let records = engine.run(&mut state, plan.t_end, |s| {
        if failure.is_some() {
            return None;
        }
        let observed = plan.observer.observe(s.time, &s.ensemble, &mut est_rng).and_then(|(rec, _)| {
            if let (Some(h), Some(a)) = (hist.as_mut(), plan.accumulate) {
                if s.time >= a.start - 1e-12 {
                    h.add(&s.ensemble)?;
                }
            }
            Ok(rec)
        });
        match observed {
            Ok(r) => Some(r),
            Err(e) => {
                failure = Some(e);
                None
            }
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(ReplicaRun {
        records: records.into_iter().flatten().collect(),
        hist,
        counters: state.counters,
        dt: engine.dt,
        final_ensemble: state.ensemble,
    })
}

fn replica_seed(root: u64, r: usize) -> u64 {
    derive_seed(root, &[r as u64])
}

fn par_replicas<T: Send, F: Fn(usize) -> Result<T> + Sync + Send>(n: usize, f: F) -> Result<Vec<T>> {
    (0..n).into_par_iter().map(f).collect()
}

/// Predicted e-folding time of the energy mode, `theta_bar1 / (3 rho (1 - alpha))`.
fn relaxation_time(alpha: f64, rho: f64, kc: &KernelConstants, dim: usize) -> f64 {
    let tb = analytics::theta_bar1(kc.b1, dim);
    1.0 / analytics::mu_alpha_pred(alpha, rho, tb).abs()
}

/// L1 distance of a replica-averaged histogram to a Maxwellian, with the
/// noise contribution estimated from the spread between replicas.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DistanceSummary {
    /// `Σ |f_k - M_k| w_k` of the pooled histogram.
    pub raw: f64,
    /// Expected raw distance of pure noise, `Σ sqrt(2/pi) se_k w_k`.
    pub noise_floor: f64,
    /// `Σ sqrt(max(0, |f_k - M_k|^2 - se_k^2)) w_k`.
    pub corrected: f64,
}

/// Weighted distance `L1_q` between the mean of per-replica histograms and `m`.
pub fn pooled_distance(hists: &[RadialHistogram], m: &MaxwellianParams, q: u32) -> Result<DistanceSummary> {
    let first = hists.first().ok_or_else(|| contract("no histograms to pool"))?;
    let edges = first.edges();
    let (mut mref, oref) = maxwellian_shell_masses(m, &edges);
    mref.push(oref);
    let mut weights: Vec<f64> = edges.windows(2).map(|w| bracket(0.5 * (w[0] + w[1])).powi(q as i32)).collect();
    weights.push(bracket(first.r_max()).powi(q as i32));
    let per: Vec<Vec<f64>> = hists
        .iter()
        .map(|h| {
            let mut v = h.masses();
            v.push(h.overflow());
            v
        })
        .collect();
    let (mut raw, mut floor, mut corrected) = (0.0, 0.0, 0.0);
    let noise_scale = (2.0 / std::f64::consts::PI).sqrt();
    for k in 0..mref.len() {
        let column: Vec<f64> = per.iter().map(|v| v[k]).collect();
        let est = mean_stderr(&column);
        let d = (est.value - mref[k]).abs();
        raw += d * weights[k];
        floor += noise_scale * est.stderr * weights[k];
        corrected += (d * d - est.stderr * est.stderr).max(0.0).sqrt() * weights[k];
    }
    Ok(DistanceSummary { raw, noise_floor: floor, corrected })
}

/// Output of the steady-state study at one `alpha`.
#[derive(Debug, Clone, Serialize)]
pub struct SteadyResult {
    pub alpha: f64,
    pub tau: f64,
    pub burn_in: f64,
    pub window: f64,
    pub dt: f64,
    pub prediction: SteadyPrediction,
    pub theta_ss: Estimate,
    /// `theta_ss / theta_pred - 1`.
    pub theta_rel_dev: f64,
    pub de_hat: Estimate,
    pub residual: Estimate,
    pub l1_2_to_bar1: DistanceSummary,
    pub l1_2_to_pred: DistanceSummary,
    /// Difference of second-half and first-half window means of theta.
    pub trend: Estimate,
    pub stationary: bool,
    /// No empty shell inside `4 sqrt(theta)`.
    pub interior_filled: bool,
    pub acceptance_ratio: f64,
    pub umax_violation_rate: f64,
    pub ckp: CkpTally,
    pub replica_theta: Vec<f64>,
    pub replica_residual: Vec<f64>,
}

/// Per-replica series alongside an experiment's summary.
#[derive(Debug, Clone)]
pub struct Outcome<T> {
    pub result: T,
    pub series: Vec<(String, ObservableSeries)>,
}

fn window_mean(records: &[ObservableRecord], from: f64, to: f64, f: impl Fn(&ObservableRecord) -> f64) -> f64 {
    let xs: Vec<f64> = records
        .iter()
        .filter(|r| r.time >= from - 1e-12 && r.time <= to + 1e-12)
        .map(f)
        .collect();
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

/// Burn-in then time-average at `spec.base.alpha`, starting from a Maxwellian
/// at the elastic-limit temperature.
pub fn steady_state(spec: &ExperimentSpec) -> Result<Outcome<SteadyResult>> {
    spec.validate()?;
    let cfg = &spec.base;
    let kc = spec.kernel()?;
    let (alpha, rho, dim) = (cfg.alpha, cfg.rho, cfg.dim);
    let prediction = SteadyPrediction::new(alpha, rho, kc, dim, &cfg.cross_section.id())?;
    let t_relax = relaxation_time(alpha, rho, &kc, dim);
    let burn_in = spec.burn_in.unwrap_or((3.0 * t_relax).max(2.0));
    let window = match (spec.window, spec.t_end) {
        (Some(w), _) => w,
        (None, Some(t)) => t - burn_in,
        (None, None) => (10.0 * t_relax).max(10.0),
    };
    if !(window > 0.0) {
        return Err(Error::Config { key: "window".into(), message: "measurement window must be positive".into() });
    }
    let t_end = burn_in + window;
    let init = spec.init.unwrap_or(InitSpec::Maxwellian { theta: prediction.theta_bar1 });
    let observer = Observer {
        alpha,
        tau: cfg.tau(),
        b1: kc.b1,
        bins: spec.bins,
        pair_budget: spec.pair_budget,
        e_bar: e_bar(spec, &prediction),
    };
    let acc = Accumulate { start: burn_in, bins: spec.bins, r_max: DEFAULT_RANGE * prediction.theta_pred.sqrt() };
    let runs = par_replicas(spec.replicas, |r| {
        let seed = replica_seed(cfg.seed, r);
        let target = rho * dim as f64 * prediction.theta_bar1;
        run_replica(ReplicaPlan {
            config: cfg,
            init: init_ensemble(init, dim, rho, Some(target), cfg.np, seed)?,
            t_end,
            sample_every: spec.sample_every.unwrap_or(0.05),
            observer: &observer,
            accumulate: Some(acc),
            seed,
        })
    })?;

    let mid = burn_in + 0.5 * window;
    let mut thetas = Vec::new();
    let mut des = Vec::new();
    let mut trends = Vec::new();
    let mut ckp = CkpTally::default();
    let mut counters = Counters::default();
    for run in &runs {
        thetas.push(window_mean(&run.records, burn_in, t_end, |r| r.theta));
        des.push(window_mean(&run.records, burn_in, t_end, |r| r.de_hat));
        trends.push(
            window_mean(&run.records, mid, t_end, |r| r.theta) - window_mean(&run.records, burn_in, mid, |r| r.theta),
        );
        ckp.add(&run.records);
        counters.candidates += run.counters.candidates;
        counters.accepted += run.counters.accepted;
        counters.umax_violations += run.counters.umax_violations;
    }
    let residual_of = |de: f64| (1.0 - alpha * alpha) * de / (2.0 * dim as f64 * rho * cfg.tau()) - 1.0;
    let replica_residual: Vec<f64> = des.iter().map(|&d| residual_of(d)).collect();
    let theta_ss = mean_stderr(&thetas);
    let trend = mean_stderr(&trends);
    let hists: Vec<RadialHistogram> = runs.iter().filter_map(|r| r.hist.clone()).collect();
    let mut pooled = hists[0].clone();
    for h in &hists[1..] {
        pooled.merge(h)?;
    }
    let m_bar1 = MaxwellianParams::centred(rho, prediction.theta_bar1, dim)?;
    let m_pred = MaxwellianParams::centred(rho, prediction.theta_pred, dim)?;
    let result = SteadyResult {
        alpha,
        tau: cfg.tau(),
        burn_in,
        window,
        dt: runs[0].dt,
        theta_rel_dev: theta_ss.value / prediction.theta_pred - 1.0,
        theta_ss,
        de_hat: mean_stderr(&des),
        residual: mean_stderr(&replica_residual),
        l1_2_to_bar1: pooled_distance(&hists, &m_bar1, 2)?,
        l1_2_to_pred: pooled_distance(&hists, &m_pred, 2)?,
        stationary: trend.value.abs() <= 2.0 * trend.stderr,
        trend,
        interior_filled: pooled.interior_filled(4.0 * theta_ss.value.sqrt()),
        acceptance_ratio: counters.accepted as f64 / counters.candidates.max(1) as f64,
        umax_violation_rate: counters.umax_violations as f64 / counters.candidates.max(1) as f64,
        ckp,
        replica_theta: thetas,
        replica_residual,
        prediction,
    };
    let series = collect_series(&format!("alpha{alpha}"), &runs)?;
    Ok(Outcome { result, series })
}

fn collect_series(prefix: &str, runs: &[ReplicaRun]) -> Result<Vec<(String, ObservableSeries)>> {
    runs.iter()
        .enumerate()
        .map(|(r, run)| Ok((format!("{prefix}_r{r:03}"), run.series()?)))
        .collect()
}

fn e_bar(spec: &ExperimentSpec, p: &SteadyPrediction) -> f64 {
    match spec.energy_reference {
        EnergyReference::Closure => p.energy_pred,
        EnergyReference::Empirical(e) => e,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepResult {
    pub points: Vec<SteadyResult>,
    /// Log-log slope of the corrected `L1_2` distance to `M_{theta_bar1}`
    /// against `1 - alpha`, over points above the noise floor.
    pub slope: Option<FitResult>,
    pub excluded_alphas: Vec<f64>,
    pub distances_decreasing: bool,
    pub theta_monotone: bool,
    pub residuals_ok: bool,
    pub theta_pred_ok: bool,
    pub slope_ok: bool,
    pub ckp: CkpTally,
    pub pass: bool,
}

/// Residual tolerance of the stationarity identity.
pub const RESIDUAL_TOLERANCE: f64 = 0.05;
/// Relative tolerance on the closure temperature, applied for `alpha >= 0.95`.
pub const THETA_PRED_TOLERANCE: f64 = 0.05;
pub const MIN_SWEEP_SLOPE: f64 = 0.4;

pub fn alpha_sweep(spec: &ExperimentSpec) -> Result<Outcome<SweepResult>> {
    spec.validate()?;
    let mut alphas = spec.alphas.clone();
    alphas.sort_by(f64::total_cmp);
    let mut points = Vec::new();
    let mut series = Vec::new();
    for &a in &alphas {
        let mut s = spec.with_alpha(a);
        s.kind = ExperimentKind::Steady;
        let out = steady_state(&s)?;
        points.push(out.result);
        series.extend(out.series);
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut excluded = Vec::new();
    for p in &points {
        let d = p.l1_2_to_bar1;
        if d.corrected > d.noise_floor {
            xs.push((1.0 - p.alpha).ln());
            ys.push(d.corrected.ln());
        } else {
            excluded.push(p.alpha);
        }
    }
    let slope = if xs.len() >= 2 {
        let (b, _, se, r2) = linear_fit(&xs, &ys)?;
        Some(FitResult {
            estimate: b,
            stderr: se,
            window: (xs.iter().cloned().fold(f64::INFINITY, f64::min).exp(), xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max).exp()),
            points: xs.len(),
            r2,
        })
    } else {
        None
    };
    let distances_decreasing = points.windows(2).all(|w| w[1].l1_2_to_bar1.corrected < w[0].l1_2_to_bar1.corrected);
    let theta_monotone = points.windows(2).all(|w| w[1].theta_ss.value < w[0].theta_ss.value)
        && points
            .iter()
            .all(|p| p.theta_ss.value > p.prediction.theta_bar1 - 2.0 * p.theta_ss.stderr);
    let residuals_ok = points.iter().all(|p| p.residual.value.abs() <= RESIDUAL_TOLERANCE);
    let theta_pred_ok = points
        .iter()
        .filter(|p| p.alpha >= 0.95)
        .all(|p| p.theta_rel_dev.abs() <= THETA_PRED_TOLERANCE);
    let slope_ok = slope.as_ref().is_some_and(|f| f.estimate >= MIN_SWEEP_SLOPE);
    let mut ckp = CkpTally::default();
    points.iter().for_each(|p| ckp.merge(p.ckp));
    let pass = distances_decreasing && theta_monotone && residuals_ok && theta_pred_ok && slope_ok && ckp.holds();
    Ok(Outcome {
        result: SweepResult {
            points,
            slope,
            excluded_alphas: excluded,
            distances_decreasing,
            theta_monotone,
            residuals_ok,
            theta_pred_ok,
            slope_ok,
            ckp,
            pass,
        },
        series,
    })
}

/// Replica-averaged trajectory of one scalar.
#[derive(Debug, Clone, Serialize)]
pub struct Trajectory {
    pub time: Vec<f64>,
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
}

fn trajectory(runs: &[ReplicaRun], f: impl Fn(&ObservableRecord) -> f64) -> Result<Trajectory> {
    let n = runs[0].records.len();
    if runs.iter().any(|r| r.records.len() != n) {
        return Err(contract("replicas recorded different numbers of snapshots"));
    }
    let mut t = Trajectory { time: Vec::with_capacity(n), mean: Vec::with_capacity(n), stderr: Vec::with_capacity(n) };
    for k in 0..n {
        let xs: Vec<f64> = runs.iter().map(|r| f(&r.records[k])).collect();
        let e = mean_stderr(&xs);
        t.time.push(runs[0].records[k].time);
        t.mean.push(e.value);
        t.stderr.push(e.stderr);
    }
    Ok(t)
}

/// Least-squares slope of `ln y` against `t` on indices `range`, with the
/// standard error taken from leave-one-replica-out refits.
fn log_slope_jackknife(
    runs: &[ReplicaRun],
    range: std::ops::Range<usize>,
    signal: &dyn Fn(&[&ReplicaRun], usize) -> f64,
) -> Result<FitResult> {
    let all: Vec<&ReplicaRun> = runs.iter().collect();
    let fit = |set: &[&ReplicaRun]| -> Result<(f64, f64)> {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for k in range.clone() {
            let s = signal(set, k);
            if s > 0.0 {
                xs.push(set[0].records[k].time);
                ys.push(s.ln());
            }
        }
        let (b, _, _, r2) = linear_fit(&xs, &ys)?;
        Ok((b, r2))
    };
    let (estimate, r2) = fit(&all)?;
    let n = runs.len();
    let stderr = if n > 2 {
        let loo: Vec<f64> = (0..n)
            .map(|skip| {
                let subset: Vec<&ReplicaRun> = all.iter().enumerate().filter(|(i, _)| *i != skip).map(|(_, r)| *r).collect();
                fit(&subset).map(|(b, _)| b)
            })
            .collect::<Result<_>>()?;
        let m = loo.iter().sum::<f64>() / n as f64;
        ((n as f64 - 1.0) / n as f64 * loo.iter().map(|b| (b - m) * (b - m)).sum::<f64>()).sqrt()
    } else {
        0.0
    };
    Ok(FitResult {
        estimate,
        stderr,
        window: (runs[0].records[range.start].time, runs[0].records[range.end - 1].time),
        points: range.len(),
        r2,
    })
}

/// Minimum number of snapshots in a fit window.
pub const MIN_FIT_SNAPSHOTS: usize = 10;
/// A fit window ends where the signal drops below this multiple of the noise.
pub const SIGNAL_TO_NOISE: f64 = 5.0;

#[derive(Debug, Clone, Serialize)]
pub struct RelaxResult {
    pub alpha: f64,
    pub delta: f64,
    pub t_end: f64,
    /// Tail average used as the steady energy.
    pub e_bar: Estimate,
    pub e_bar_closure: f64,
    /// Replica noise of the mean energy over the tail.
    pub noise: f64,
    pub mu_hat: FitResult,
    pub mu_pred: f64,
    pub mu_alt: f64,
    pub energy: Trajectory,
    pub ckp: CkpTally,
}

/// Starts at a Maxwellian with energy `E_bar (1 + delta)` and fits the
/// exponential return of the replica-mean energy.
pub fn relaxation_fit(spec: &ExperimentSpec) -> Result<Outcome<RelaxResult>> {
    spec.validate()?;
    let cfg = &spec.base;
    let kc = spec.kernel()?;
    let (alpha, rho, dim) = (cfg.alpha, cfg.rho, cfg.dim);
    let prediction = SteadyPrediction::new(alpha, rho, kc, dim, &cfg.cross_section.id())?;
    let delta = spec.delta.unwrap_or(DEFAULT_RELAX_DELTA);
    let t_relax = relaxation_time(alpha, rho, &kc, dim);
    let t_end = spec.t_end.unwrap_or(8.0 * t_relax);
    let tail_start = spec.burn_in.unwrap_or(0.75 * t_end);
    if tail_start >= t_end {
        return Err(Error::Config { key: "burn_in".into(), message: "tail must start before t_end".into() });
    }
    let e0 = prediction.energy_pred * (1.0 + delta);
    let init = spec.init.unwrap_or(InitSpec::Maxwellian { theta: e0 / (rho * dim as f64) });
    let observer = Observer {
        alpha,
        tau: cfg.tau(),
        b1: kc.b1,
        bins: spec.bins,
        pair_budget: spec.pair_budget,
        e_bar: e_bar(spec, &prediction),
    };
    let sample_every = spec.sample_every.unwrap_or(t_relax / 40.0);
    let runs = par_replicas(spec.replicas, |r| {
        let seed = replica_seed(cfg.seed, r);
        run_replica(ReplicaPlan {
            config: cfg,
            init: init_ensemble(init, dim, rho, Some(e0), cfg.np, seed)?,
            t_end,
            sample_every,
            observer: &observer,
            accumulate: None,
            seed,
        })
    })?;
    let energy = trajectory(&runs, |r| r.energy)?;
    let tail: Vec<usize> = (0..energy.time.len()).filter(|&k| energy.time[k] >= tail_start).collect();
    let replica_tail: Vec<f64> = runs
        .iter()
        .map(|run| tail.iter().map(|&k| run.records[k].energy).sum::<f64>() / tail.len() as f64)
        .collect();
    let e_hat = mean_stderr(&replica_tail);
    let noise = tail.iter().map(|&k| energy.stderr[k]).sum::<f64>() / tail.len() as f64;
    let sign = delta.signum();
    let end = (0..energy.time.len())
        .find(|&k| sign * (energy.mean[k] - e_hat.value) < SIGNAL_TO_NOISE * noise)
        .unwrap_or(energy.time.len());
    if end < MIN_FIT_SNAPSHOTS {
        return Err(Error::Fit(format!(
            "only {end} snapshots above {SIGNAL_TO_NOISE}x noise; need {MIN_FIT_SNAPSHOTS}"
        )));
    }
    let e_ref = e_hat.value;
    let mu_hat = log_slope_jackknife(&runs, 0..end, &|set, k| {
        sign * (set.iter().map(|r| r.records[k].energy).sum::<f64>() / set.len() as f64 - e_ref)
    })?;
    let mut ckp = CkpTally::default();
    runs.iter().for_each(|r| ckp.add(&r.records));
    Ok(Outcome {
        result: RelaxResult {
            alpha,
            delta,
            t_end,
            e_bar: e_hat,
            e_bar_closure: prediction.energy_pred,
            noise,
            mu_hat,
            mu_pred: prediction.mu_alpha,
            mu_alt: prediction.mu_alpha_alt,
            energy,
            ckp,
        },
        series: collect_series(&format!("alpha{alpha}"), &runs)?,
    })
}

/// Which predicted eigenvalue a fitted rate sits closer to, in log ratio.
#[derive(Debug, Clone, Serialize)]
pub struct RateArbitration {
    pub mu_hat: f64,
    pub mu_pred: f64,
    pub mu_alt: f64,
    /// `"pred"` for `-3 rho (1 - alpha) / theta_bar1`, `"alt"` for `-3 rho (1 - alpha)`.
    pub supported: &'static str,
    /// `mu_hat / mu_supported - 1`.
    pub relative_error: f64,
}

pub fn arbitrate_rate(r: &RelaxResult) -> RateArbitration {
    let lp = (r.mu_hat.estimate / r.mu_pred).ln().abs();
    let la = (r.mu_hat.estimate / r.mu_alt).ln().abs();
    let (supported, target) = if !(la < lp) { ("pred", r.mu_pred) } else { ("alt", r.mu_alt) };
    RateArbitration {
        mu_hat: r.mu_hat.estimate,
        mu_pred: r.mu_pred,
        mu_alt: r.mu_alt,
        supported,
        relative_error: r.mu_hat.estimate / target - 1.0,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LyapunovResult {
    pub alpha: f64,
    pub e_bar: f64,
    pub smoothing: usize,
    pub h1: Trajectory,
    /// Block means of the replica-mean `H1` and their standard errors.
    pub smoothed: Vec<f64>,
    pub smoothed_stderr: Vec<f64>,
    /// Largest increase between consecutive blocks, in units of its stderr.
    pub worst_increase_z: f64,
    pub monotone: bool,
    pub entropy_fit: Option<FitResult>,
    pub energy_fit: Option<FitResult>,
    /// Energy-term e-folding time over entropy-term e-folding time.
    pub timescale_ratio: Option<f64>,
    pub initial_entropy: f64,
    pub ckp: CkpTally,
}

/// Block means of `f` over consecutive groups of `size` snapshots, per replica.
fn block_means(run: &ReplicaRun, size: usize, f: impl Fn(&ObservableRecord) -> f64) -> Vec<f64> {
    run.records
        .chunks(size)
        .filter(|c| c.len() == size)
        .map(|c| c.iter().map(&f).sum::<f64>() / size as f64)
        .collect()
}

/// Initial datum of the Liapunov trace: an isotropic mixture of a cold and
/// a hot Maxwellian.
pub const LYAPUNOV_INIT: InitSpec = InitSpec::Bimodal { theta_a: 0.05, theta_b: 1.0, fraction: 0.5 };

pub fn lyapunov_trace(spec: &ExperimentSpec) -> Result<Outcome<LyapunovResult>> {
    spec.validate()?;
    let cfg = &spec.base;
    let kc = spec.kernel()?;
    let (alpha, rho, dim) = (cfg.alpha, cfg.rho, cfg.dim);
    let prediction = SteadyPrediction::new(alpha, rho, kc, dim, &cfg.cross_section.id())?;
    let e_ref = e_bar(spec, &prediction);
    let delta = spec.delta.unwrap_or(DEFAULT_LYAPUNOV_DELTA);
    let t_end = spec.t_end.unwrap_or(20.0);
    let sample_every = spec.sample_every.unwrap_or(0.01);
    let init = spec.init.unwrap_or(LYAPUNOV_INIT);
    let observer = Observer {
        alpha,
        tau: cfg.tau(),
        b1: kc.b1,
        bins: spec.bins,
        pair_budget: spec.pair_budget,
        e_bar: e_ref,
    };
    let runs = par_replicas(spec.replicas, |r| {
        let seed = replica_seed(cfg.seed, r);
        run_replica(ReplicaPlan {
            config: cfg,
            init: init_ensemble(init, dim, rho, Some(e_ref * (1.0 + delta)), cfg.np, seed)?,
            t_end,
            sample_every,
            observer: &observer,
            accumulate: None,
            seed,
        })
    })?;
    let h1 = trajectory(&runs, |r| r.h1)?;
    let size = spec.smoothing;
    let blocks: Vec<Vec<f64>> = runs.iter().map(|r| block_means(r, size, |x| x.h1)).collect();
    let n_blocks = blocks[0].len();
    let mut smoothed = Vec::with_capacity(n_blocks);
    let mut smoothed_stderr = Vec::with_capacity(n_blocks);
    for b in 0..n_blocks {
        let e = mean_stderr(&blocks.iter().map(|v| v[b]).collect::<Vec<_>>());
        smoothed.push(e.value);
        smoothed_stderr.push(e.stderr);
    }
    let mut worst = f64::NEG_INFINITY;
    let mut monotone = true;
    for b in 1..n_blocks {
        let diffs: Vec<f64> = blocks.iter().map(|v| v[b] - v[b - 1]).collect();
        let d = mean_stderr(&diffs);
        let z = if d.stderr > 0.0 { d.value / d.stderr } else if d.value > 0.0 { f64::INFINITY } else { 0.0 };
        worst = worst.max(z);
        if d.value > 2.0 * d.stderr {
            monotone = false;
        }
    }

    let entropy = trajectory(&runs, |r| r.h_rel)?;
    let floor = runs[0].records[0].bias_floor;
    let ent_end = entropy.mean.iter().position(|&h| h < 10.0 * floor).unwrap_or(entropy.mean.len());
    let entropy_fit = if ent_end >= 3 {
        log_slope_jackknife(&runs, 0..ent_end, &|set, k| {
            set.iter().map(|r| r.records[k].h_rel).sum::<f64>() / set.len() as f64
        })
        .ok()
    } else {
        None
    };
    let energy = trajectory(&runs, |r| r.energy)?;
    let en_end = (0..energy.mean.len())
        .find(|&k| (energy.mean[k] - e_ref).abs() < SIGNAL_TO_NOISE * energy.stderr[k].max(f64::MIN_POSITIVE))
        .unwrap_or(energy.mean.len());
    let energy_fit = if en_end >= MIN_FIT_SNAPSHOTS {
        log_slope_jackknife(&runs, 0..en_end, &|set, k| {
            let m = set.iter().map(|r| r.records[k].energy).sum::<f64>() / set.len() as f64;
            (m - e_ref).powi(2)
        })
        .ok()
    } else {
        None
    };
    let timescale_ratio = match (&entropy_fit, &energy_fit) {
        (Some(h), Some(e)) if h.estimate < 0.0 && e.estimate < 0.0 => Some(h.estimate / e.estimate),
        _ => None,
    };
    let mut ckp = CkpTally::default();
    runs.iter().for_each(|r| ckp.add(&r.records));
    Ok(Outcome {
        result: LyapunovResult {
            alpha,
            e_bar: e_ref,
            smoothing: size,
            h1,
            smoothed,
            smoothed_stderr,
            worst_increase_z: worst,
            monotone,
            entropy_fit,
            energy_fit,
            timescale_ratio,
            initial_entropy: entropy.mean[0],
            ckp,
        },
        series: collect_series(&format!("alpha{alpha}"), &runs)?,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ScalingResult {
    pub lambda: f64,
    pub alpha: f64,
    pub tau: f64,
    pub tau_scaled: f64,
    pub time: Vec<f64>,
    pub theta: Vec<f64>,
    /// `lambda^2 theta_g(lambda t)` on the same grid.
    pub theta_scaled_back: Vec<f64>,
    pub max_rel_deviation: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub ckp: CkpTally,
}

pub const SCALING_TOLERANCE: f64 = 0.03;

/// Runs `(tau, f0)` and `(tau / lambda^3, f0(lambda .))` and compares the
/// temperature trajectories under `theta_g(t) = lambda^{-2} theta_f(t / lambda)`.
/// The scaled run uses independent random streams.
pub fn scaling_check(spec: &ExperimentSpec) -> Result<Outcome<ScalingResult>> {
    spec.validate()?;
    let cfg = &spec.base;
    let kc = spec.kernel()?;
    let (alpha, rho, dim) = (cfg.alpha, cfg.rho, cfg.dim);
    let lambda = spec.lambda;
    let tau = cfg.tau();
    let tau_g = tau / lambda.powi(3);
    let theta_ref = if tau > 0.0 {
        analytics::theta_for_tau(alpha.min(1.0 - 1e-12), tau, rho, kc.b1, dim)
    } else {
        analytics::theta_bar1(kc.b1, dim)
    };
    let init = spec.init.unwrap_or(InitSpec::Maxwellian { theta: 0.25 * theta_ref });
    let t_end = spec.t_end.unwrap_or(3.0);
    let sample_every = spec.sample_every.unwrap_or(0.1);
    let mut cfg_g = cfg.clone();
    cfg_g.tau_mode = TauMode::Explicit(tau_g);
    cfg_g.dt = cfg.dt.map(|dt| dt * lambda);
    cfg_g.umax_initial = cfg.umax_initial.map(|u| u / lambda);
    let observer_for = |t: f64| Observer {
        alpha,
        tau: t,
        b1: kc.b1,
        bins: spec.bins,
        pair_budget: spec.pair_budget,
        e_bar: f64::NAN,
    };
    let (obs_f, obs_g) = (observer_for(tau), observer_for(tau_g));
    let pairs = par_replicas(spec.replicas, |r| {
        let seed_f = replica_seed(cfg.seed, r);
        let seed_g = if spec.independent_scaled_run {
            derive_seed(cfg.seed, &[tag::SCALED_RUN, r as u64])
        } else {
            seed_f
        };
        let e0 = Some(init.expected_energy(rho, dim));
        let f0 = init_ensemble(init, dim, rho, e0, cfg.np, seed_f)?;
        let g0 = init_ensemble(init, dim, rho, e0, cfg.np, seed_g)?.scaled(1.0 / lambda);
        let f = run_replica(ReplicaPlan {
            config: cfg,
            init: f0,
            t_end,
            sample_every,
            observer: &obs_f,
            accumulate: None,
            seed: seed_f,
        })?;
        let g = run_replica(ReplicaPlan {
            config: &cfg_g,
            init: g0,
            t_end: lambda * t_end,
            sample_every: lambda * sample_every,
            observer: &obs_g,
            accumulate: None,
            seed: seed_g,
        })?;
        Ok((f, g))
    })?;
    let (runs_f, runs_g): (Vec<ReplicaRun>, Vec<ReplicaRun>) = pairs.into_iter().unzip();
    let tf = trajectory(&runs_f, |r| r.theta)?;
    let tg = trajectory(&runs_g, |r| r.theta)?;
    // The two runs step in lockstep when dt scales with lambda; otherwise
    // interpolate the scaled run onto the reference grid.
    let mut theta_back = Vec::with_capacity(tf.time.len());
    for &t in &tf.time {
        theta_back.push(lambda * lambda * interpolate(&tg.time, &tg.mean, lambda * t));
    }
    let max_rel_deviation = tf
        .mean
        .iter()
        .zip(&theta_back)
        .map(|(a, b)| (b / a - 1.0).abs())
        .fold(0.0, f64::max);
    let mut ckp = CkpTally::default();
    runs_f.iter().chain(&runs_g).for_each(|r| ckp.add(&r.records));
    let mut series = collect_series("f", &runs_f)?;
    series.extend(collect_series("g", &runs_g)?);
    Ok(Outcome {
        result: ScalingResult {
            lambda,
            alpha,
            tau,
            tau_scaled: tau_g,
            time: tf.time,
            theta: tf.mean,
            theta_scaled_back: theta_back,
            max_rel_deviation,
            tolerance: SCALING_TOLERANCE,
            pass: max_rel_deviation <= SCALING_TOLERANCE,
            ckp,
        },
        series,
    })
}

fn interpolate(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    match xs.iter().position(|&v| v >= x - 1e-9 * x.abs().max(1.0)) {
        Some(0) => ys[0],
        Some(k) if (xs[k] - x).abs() <= 1e-9 * x.abs().max(1.0) => ys[k],
        Some(k) => {
            let w = (x - xs[k - 1]) / (xs[k] - xs[k - 1]);
            ys[k - 1] + w * (ys[k] - ys[k - 1])
        }
        None => *ys.last().unwrap_or(&f64::NAN),
    }
}

/// Summary JSON for any experiment result.
pub fn to_json<T: Serialize>(value: &T) -> Result<serde_json::Value> {
    Ok(serde_json::to_value(value)?)
}

/// Compact verdict line used by reports.
pub fn verdict_json(name: &str, pass: bool, detail: serde_json::Value) -> serde_json::Value {
    json!({ "experiment": name, "pass": pass, "detail": detail })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(kind: ExperimentKind, alpha: f64) -> ExperimentSpec {
        let mut s = ExperimentSpec::new(kind, SimConfig::new(alpha, 400, 3));
        s.replicas = 3;
        s.pair_budget = 500;
        s.bins = 16;
        s
    }

    #[test]
    fn linear_fit_exact_line() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y: Vec<f64> = x.iter().map(|v| 1.5 - 0.25 * v).collect();
        let (b, a, se, r2) = linear_fit(&x, &y).unwrap();
        assert!((b + 0.25).abs() < 1e-14 && (a - 1.5).abs() < 1e-14);
        assert!(se < 1e-14 && (r2 - 1.0).abs() < 1e-14);
        assert!(linear_fit(&[1.0], &[1.0]).is_err());
        assert!(linear_fit(&[1.0, 1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn mean_stderr_known() {
        let e = mean_stderr(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(e.value, 2.5);
        assert!((e.stderr - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_stderr(&[7.0]).stderr, 0.0);
    }

    #[test]
    fn interpolation() {
        let xs = [0.0, 1.0, 2.0];
        let ys = [0.0, 10.0, 30.0];
        assert_eq!(interpolate(&xs, &ys, 1.0), 10.0);
        assert_eq!(interpolate(&xs, &ys, 1.5), 20.0);
        assert_eq!(interpolate(&xs, &ys, -1.0), 0.0);
        assert_eq!(interpolate(&xs, &ys, 5.0), 30.0);
    }

    #[test]
    fn spec_validation() {
        let mut s = small(ExperimentKind::Relax, 0.95);
        s.delta = Some(0.3);
        assert!(matches!(s.validate(), Err(Error::Config { key, .. }) if key == "delta"));
        let mut s = small(ExperimentKind::Steady, 0.95);
        s.burn_in = Some(5.0);
        s.t_end = Some(4.0);
        assert!(s.validate().is_err());
        let mut s = small(ExperimentKind::Sweep, 0.95);
        s.alphas = vec![0.9, 0.95];
        assert!(s.validate().is_err());
        let s = small(ExperimentKind::Lyapunov, 0.9);
        assert!(s.validate().is_err());
        let mut s = small(ExperimentKind::Scaling, 0.95);
        s.lambda = 3.0;
        assert!(s.validate().is_err());
        let mut s = small(ExperimentKind::Steady, 0.95);
        s.base.tau_mode = TauMode::Explicit(0.1);
        assert!(s.validate().is_err());
    }

    #[test]
    fn steady_small_is_deterministic() {
        let mut s = small(ExperimentKind::Steady, 0.8);
        s.burn_in = Some(0.5);
        s.window = Some(0.5);
        let a = steady_state(&s).unwrap();
        let b = steady_state(&s).unwrap();
        assert_eq!(a.result.replica_theta, b.result.replica_theta);
        assert_eq!(a.series.len(), 3);
        assert!(a.result.theta_ss.value > 0.0);
        assert!(a.result.ckp.holds());
    }

    #[test]
    fn unit_lambda_with_shared_streams_is_identical() {
        let mut s = small(ExperimentKind::Scaling, 0.9);
        s.lambda = 1.0;
        s.t_end = Some(0.3);
        s.independent_scaled_run = false;
        let out = scaling_check(&s).unwrap();
        assert_eq!(out.result.theta, out.result.theta_scaled_back);
        assert_eq!(out.result.max_rel_deviation, 0.0);
        s.independent_scaled_run = true;
        let out = scaling_check(&s).unwrap();
        assert!(out.result.max_rel_deviation > 0.0);
    }

    #[test]
    fn arbitration_picks_closer_constant() {
        let fit = FitResult { estimate: -0.6, stderr: 0.01, window: (0.0, 1.0), points: 10, r2: 0.99 };
        let r = RelaxResult {
            alpha: 0.95,
            delta: 0.2,
            t_end: 1.0,
            e_bar: Estimate { value: 0.7, stderr: 0.0 },
            e_bar_closure: 0.7,
            noise: 0.0,
            mu_hat: fit,
            mu_pred: -0.67,
            mu_alt: -0.15,
            energy: Trajectory { time: vec![], mean: vec![], stderr: vec![] },
            ckp: CkpTally::default(),
        };
        let a = arbitrate_rate(&r);
        assert_eq!(a.supported, "pred");
        assert!((a.relative_error - (-0.6 / -0.67 - 1.0)).abs() < 1e-15);
    }
}

//! `granular`: particle simulation of a driven granular gas.
//!
//! Exit codes: 0 success, 1 an experiment verdict failed or a fit was
//! refused, 2 configuration, I/O or contract errors, 3 numeric faults.

mod config;
mod output;

use std::fmt::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use granular_core::analytics;
use granular_core::experiments::{
    self, arbitrate_rate, ExperimentKind, Outcome, SteadyResult, Trajectory, RESIDUAL_TOLERANCE,
    THETA_PRED_TOLERANCE,
};
use granular_core::observables::ObservableSeries;
use granular_core::validation;
use granular_core::{Error, Result};
use serde_json::{json, Value};

use config::RunConfig;
use output::RunDir;

#[derive(Parser)]
#[command(name = "granular", version, about = "Driven inelastic hard-sphere gas: DSMC runs and closed-form checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Kinematics and analytics invariant suite.
    Validate {
        #[arg(long, default_value_t = 1_000_000)]
        samples: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Also write a run directory under this path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Gaussian moment identities by quadrature and in closed form.
    Moments {
        #[arg(long = "N", default_value_t = 3)]
        n: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Steady state at one alpha.
    Steady(RunArgs),
    /// Exponential return to the steady energy.
    Relax(RunArgs),
    /// Steady states over a list of alphas.
    Sweep(RunArgs),
    /// Liapunov functional from a bimodal start.
    Lyapunov(RunArgs),
    /// Temperature trajectories under velocity rescaling.
    Scaling(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    replicas: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    np: Option<usize>,
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long = "t-end")]
    t_end: Option<f64>,
    /// `rescaled` or a bath strength.
    #[arg(long)]
    tau: Option<String>,
    #[arg(long = "no-projection")]
    no_projection: bool,
}

impl RunArgs {
    fn resolve(&self, kind: ExperimentKind) -> Result<RunConfig> {
        let mut c = RunConfig::new(kind);
        if let Some(path) = &self.config {
            c.load(path)?;
        }
        let cwd = std::path::Path::new(".");
        let overrides = [
            ("seed", self.seed.map(|v| v.to_string())),
            ("replicas", self.replicas.map(|v| v.to_string())),
            ("alpha", self.alpha.map(|v| v.to_string())),
            ("np", self.np.map(|v| v.to_string())),
            ("dt", self.dt.map(|v| v.to_string())),
            ("t_end", self.t_end.map(|v| v.to_string())),
            ("tau", self.tau.clone()),
            ("projection", self.no_projection.then(|| "false".to_string())),
        ];
        for (k, v) in overrides {
            if let Some(v) = v {
                c.set(k, &v, cwd)?;
            }
        }
        if let Some(out) = &self.out {
            c.out = out.clone();
        }
        c.validate()?;
        Ok(c)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Fit(_) => 1,
        Error::Config { .. } | Error::Contract(_) | Error::Io(_) | Error::Json(_) => 2,
        Error::Numeric { .. } | Error::NonFinite { .. } => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Returns the verdict.
fn run(command: Command) -> Result<bool> {
    match command {
        Command::Validate { samples, seed, out } => validate(samples, seed, out),
        Command::Moments { n, out } => moments(n, out),
        Command::Steady(a) => experiment(ExperimentKind::Steady, &a),
        Command::Relax(a) => experiment(ExperimentKind::Relax, &a),
        Command::Sweep(a) => experiment(ExperimentKind::Sweep, &a),
        Command::Lyapunov(a) => experiment(ExperimentKind::Lyapunov, &a),
        Command::Scaling(a) => experiment(ExperimentKind::Scaling, &a),
    }
}

fn validate(samples: usize, seed: u64, out: Option<PathBuf>) -> Result<bool> {
    let checks = validation::run_all(samples, seed)?;
    let mut csv = String::from("check,value,tolerance,pass\n");
    for c in &checks {
        println!("{:<4} {:<48} {:>12.3e} <= {:e}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.value, c.tolerance);
        writeln!(csv, "{},{},{},{}", c.name, c.value, c.tolerance, c.pass).unwrap();
    }
    let pass = checks.iter().all(|c| c.pass);
    if let Some(base) = out {
        let mut dir = RunDir::create(&base, "validate", seed)?;
        dir.write("results.csv", csv.as_bytes())?;
        dir.write_json("fit.json", &experiments::verdict_json("validate", pass, serde_json::to_value(&checks)?))?;
        dir.finish(json!({ "samples": samples }), seed)?;
    }
    Ok(pass)
}

fn moments(n: usize, out: Option<PathBuf>) -> Result<bool> {
    if n < 2 {
        return Err(Error::Config { key: "N".into(), message: "dimension must be at least 2".into() });
    }
    let rows = analytics::moment_identities(n)?;
    let mut csv = String::from("identity,closed,quadrature,rel_error\n");
    println!("N = {n}");
    println!("{:<8} {:>22} {:>22} {:>10}", "identity", "closed form", "quadrature", "rel err");
    for m in &rows {
        println!("{:<8} {:>22.15} {:>22.15} {:>10.2e}", m.name, m.closed, m.quadrature, m.rel_error());
        writeln!(csv, "{},{},{},{}", m.name, m.closed, m.quadrature, m.rel_error()).unwrap();
    }
    if let Some(base) = out {
        let mut dir = RunDir::create(&base, "moments", 0)?;
        dir.write("results.csv", csv.as_bytes())?;
        dir.write_json("fit.json", &serde_json::to_value(&rows)?)?;
        dir.finish(json!({ "N": n }), 0)?;
    }
    Ok(true)
}

struct Report {
    pass: bool,
    csv: String,
    fit: Value,
    series: Vec<(String, ObservableSeries)>,
    summary: String,
}

fn experiment(kind: ExperimentKind, args: &RunArgs) -> Result<bool> {
    let cfg = args.resolve(kind)?;
    let spec = &cfg.spec;
    let report = match kind {
        ExperimentKind::Steady => steady_report(experiments::steady_state(spec)?)?,
        ExperimentKind::Sweep => {
            let o = experiments::alpha_sweep(spec)?;
            let r = &o.result;
            let mut csv = String::from(STEADY_HEADER);
            r.points.iter().for_each(|p| steady_row(&mut csv, p));
            let slope = r.slope.as_ref().map_or("none".to_string(), |s| format!("{:.3} ± {:.3}", s.estimate, s.stderr));
            Report {
                pass: r.pass,
                summary: format!(
                    "theta monotone {}, distances decreasing {}, slope {slope}, residuals ok {}, theta_pred ok {}, CKP {}/{}",
                    r.theta_monotone, r.distances_decreasing, r.residuals_ok, r.theta_pred_ok, r.ckp.violations, r.ckp.checked
                ),
                fit: experiments::verdict_json("sweep", r.pass, experiments::to_json(r)?),
                csv,
                series: o.series,
            }
        }
        ExperimentKind::Relax => {
            let o = experiments::relaxation_fit(spec)?;
            let r = &o.result;
            let arb = arbitrate_rate(r);
            let pass = r.mu_hat.estimate < 0.0 && arb.relative_error.abs() <= 0.4 && r.ckp.holds();
            Report {
                pass,
                summary: format!(
                    "mu_hat {:.5} ± {:.5} over [{:.2}, {:.2}], supports {} ({:.5}), off by {:+.1}%",
                    r.mu_hat.estimate,
                    r.mu_hat.stderr,
                    r.mu_hat.window.0,
                    r.mu_hat.window.1,
                    arb.supported,
                    if arb.supported == "pred" { arb.mu_pred } else { arb.mu_alt },
                    100.0 * arb.relative_error
                ),
                fit: experiments::verdict_json(
                    "relax",
                    pass,
                    json!({ "result": experiments::to_json(r)?, "arbitration": experiments::to_json(&arb)? }),
                ),
                csv: trajectory_csv("energy", &r.energy),
                series: o.series,
            }
        }
        ExperimentKind::Lyapunov => {
            let o = experiments::lyapunov_trace(spec)?;
            let r = &o.result;
            let pass = r.monotone && r.timescale_ratio.is_some_and(|x| x >= 5.0) && r.ckp.holds();
            Report {
                pass,
                summary: format!(
                    "monotone {} (worst z {:.2}), timescale ratio {}",
                    r.monotone,
                    r.worst_increase_z,
                    r.timescale_ratio.map_or("none".into(), |x| format!("{x:.2}"))
                ),
                fit: experiments::verdict_json("lyapunov", pass, experiments::to_json(r)?),
                csv: trajectory_csv("h1", &r.h1),
                series: o.series,
            }
        }
        ExperimentKind::Scaling => {
            let o = experiments::scaling_check(spec)?;
            let r = &o.result;
            let pass = r.pass && r.ckp.holds();
            let mut csv = String::from("time,theta,theta_scaled_back\n");
            for k in 0..r.time.len() {
                writeln!(csv, "{},{},{}", r.time[k], r.theta[k], r.theta_scaled_back[k]).unwrap();
            }
            Report {
                pass,
                summary: format!("max relative deviation {:.4} (tolerance {})", r.max_rel_deviation, r.tolerance),
                fit: experiments::verdict_json("scaling", pass, experiments::to_json(r)?),
                csv,
                series: o.series,
            }
        }
    };

    let seed = spec.base.seed;
    let mut dir = RunDir::create(&cfg.out, kind.name(), seed)?;
    dir.write("results.csv", report.csv.as_bytes())?;
    dir.write_json("fit.json", &report.fit)?;
    for (name, s) in &report.series {
        let mut buf = Vec::new();
        s.write_csv(&mut buf)?;
        dir.write(&format!("series/{name}.csv"), &buf)?;
        dir.write_json(&format!("series/{name}.json"), &json!({ "series": name, "experiment": kind.name(), "seed": seed }))?;
    }
    let path = dir.finish(experiments::to_json(spec)?, seed)?;
    println!("{}: {}", kind.name(), report.summary);
    println!("{} -> {}", if report.pass { "PASS" } else { "FAIL" }, path.display());
    Ok(report.pass)
}

const STEADY_HEADER: &str = "alpha,tau,theta_ss,theta_ss_se,theta_pred,theta_rel_dev,DE_hat,DE_hat_se,residual,residual_se,\
L1q2_bar1,L1q2_bar1_floor,L1q2_bar1_corrected,L1q2_pred_corrected,trend,trend_se,acceptance,umax_violation_rate,ckp_checked,ckp_violations\n";

fn steady_row(csv: &mut String, r: &SteadyResult) {
    writeln!(
        csv,
        "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
        r.alpha,
        r.tau,
        r.theta_ss.value,
        r.theta_ss.stderr,
        r.prediction.theta_pred,
        r.theta_rel_dev,
        r.de_hat.value,
        r.de_hat.stderr,
        r.residual.value,
        r.residual.stderr,
        r.l1_2_to_bar1.raw,
        r.l1_2_to_bar1.noise_floor,
        r.l1_2_to_bar1.corrected,
        r.l1_2_to_pred.corrected,
        r.trend.value,
        r.trend.stderr,
        r.acceptance_ratio,
        r.umax_violation_rate,
        r.ckp.checked,
        r.ckp.violations
    )
    .unwrap();
}

/// Stationarity residual within tolerance, closure temperature within
/// tolerance for `alpha >= 0.95`, and CKP on every applicable snapshot.
fn steady_pass(r: &SteadyResult) -> bool {
    r.residual.value.abs() <= RESIDUAL_TOLERANCE
        && (r.alpha < 0.95 || r.theta_rel_dev.abs() <= THETA_PRED_TOLERANCE)
        && r.ckp.holds()
}

fn steady_report(o: Outcome<SteadyResult>) -> Result<Report> {
    let r = &o.result;
    let pass = steady_pass(r);
    let mut csv = String::from(STEADY_HEADER);
    steady_row(&mut csv, r);
    Ok(Report {
        pass,
        summary: format!(
            "theta_ss {:.6} ± {:.6} (pred {:.6}, {:+.2}%), residual {:+.4} ± {:.4}, L1_2 to M_bar1 {:.4} (floor {:.4})",
            r.theta_ss.value,
            r.theta_ss.stderr,
            r.prediction.theta_pred,
            100.0 * r.theta_rel_dev,
            r.residual.value,
            r.residual.stderr,
            r.l1_2_to_bar1.corrected,
            r.l1_2_to_bar1.noise_floor
        ),
        fit: experiments::verdict_json("steady", pass, experiments::to_json(r)?),
        csv,
        series: o.series,
    })
}

fn trajectory_csv(name: &str, t: &Trajectory) -> String {
    let mut csv = format!("time,{name}_mean,{name}_se\n");
    for k in 0..t.time.len() {
        writeln!(csv, "{},{},{}", t.time[k], t.mean[k], t.stderr[k]).unwrap();
    }
    csv
}

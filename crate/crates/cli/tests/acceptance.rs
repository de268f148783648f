//! Acceptance suite: one PASS/FAIL line per criterion at full settings.
//! Expect roughly twenty minutes on one core.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use granular_core::analytics::{self, Phi1};
use granular_core::dsmc::SimConfig;
use granular_core::experiments::{
    alpha_sweep, arbitrate_rate, lyapunov_trace, relaxation_fit, scaling_check, steady_state, CkpTally,
    ExperimentKind, ExperimentSpec, SteadyResult,
};
use granular_core::kinematics::{kernel_constants, CrossSection};
use granular_core::validation::{collision_errors, monte_carlo_identities};

const SEED: u64 = 7;
const NP: usize = 20_000;

struct Line {
    n: usize,
    pass: bool,
    text: String,
}

fn spec(kind: ExperimentKind, alpha: f64, np: usize, replicas: usize) -> ExperimentSpec {
    let mut s = ExperimentSpec::new(kind, SimConfig::new(alpha, np, SEED));
    s.replicas = replicas;
    s
}

fn rel(a: f64, b: f64) -> f64 {
    (a / b - 1.0).abs()
}

fn c1() -> Line {
    let t = Instant::now();
    let e = collision_errors(1_000_000, 3, SEED).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let pass = e.momentum <= 1e-12 && e.energy_identity <= 1e-12 && e.elastic_energy <= 1e-12 && secs < 10.0;
    Line {
        n: 1,
        pass,
        text: format!(
            "collision identities over 1e6 samples: momentum {:.1e}, energy loss {:.1e}, elastic {:.1e} ({secs:.1} s)",
            e.momentum, e.energy_identity, e.elastic_energy
        ),
    }
}

fn c2() -> Line {
    let t = Instant::now();
    let quad = analytics::moment_identities(3).unwrap();
    let mc = monte_carlo_identities(1_000_000, 3, SEED).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let worst_rel = quad.iter().map(|m| m.rel_error()).fold(0.0, f64::max);
    let worst_z = mc.iter().map(|m| m.z()).fold(0.0, f64::max);
    Line {
        n: 2,
        pass: worst_rel <= 1e-8 && worst_z <= 3.0 && secs < 30.0,
        text: format!("Gaussian identities: quadrature rel {worst_rel:.1e}, Monte Carlo worst {worst_z:.2} se ({secs:.1} s)"),
    }
}

fn c3() -> Line {
    let t = Instant::now();
    let kc = kernel_constants(&CrossSection::constant(1.0), 3).unwrap();
    let tb = analytics::theta_bar1(kc.b1, 3);
    let three_d = (9.0 * std::f64::consts::PI / (1024.0 * kc.b1 * kc.b1)).cbrt();
    let e_form = rel(tb, three_d);
    let e_de = rel(analytics::dissipation_de_maxwellian(tb, 1.0, kc.b1, 3), 3.0);
    let phi = Phi1::new(1.0, tb, 3).unwrap();
    let e_energy = rel(phi.energy(), phi.energy_closed());
    let e_pair = rel(phi.dissipation_pairing(kc.b1).unwrap(), phi.dissipation_pairing_closed());
    let secs = t.elapsed().as_secs_f64();
    Line {
        n: 3,
        pass: e_form <= 1e-12 && e_de <= 1e-12 && e_energy <= 1e-6 && e_pair <= 1e-6 && secs < 5.0,
        text: format!(
            "theta_bar1 = {tb:.6}: forms {e_form:.1e}, D_E {e_de:.1e}, phi1 energy {e_energy:.1e}, pairing {e_pair:.1e} ({secs:.2} s)"
        ),
    }
}

fn c4(points: &[&SteadyResult]) -> Line {
    let parts: Vec<String> =
        points.iter().map(|p| format!("{}: {:+.4}±{:.4}", p.alpha, p.residual.value, p.residual.stderr)).collect();
    Line {
        n: 4,
        pass: points.iter().all(|p| p.residual.value.abs() <= 0.05),
        text: format!("stationarity residual {}", parts.join(", ")),
    }
}

fn c5(sweep: &granular_core::experiments::SweepResult, extra: &SteadyResult) -> Line {
    let mut high: Vec<&SteadyResult> = sweep.points.iter().filter(|p| p.alpha >= 0.95).collect();
    high.push(extra);
    let worst = high.iter().map(|p| p.theta_rel_dev.abs()).fold(0.0, f64::max);
    let slope = sweep.slope.as_ref().map(|s| s.estimate);
    let thetas: Vec<String> = sweep.points.iter().map(|p| format!("{:.5}", p.theta_ss.value)).collect();
    let dists: Vec<String> = sweep.points.iter().map(|p| format!("{:.4}", p.l1_2_to_bar1.corrected)).collect();
    Line {
        n: 5,
        pass: worst <= 0.05
            && sweep.theta_monotone
            && sweep.distances_decreasing
            && slope.is_some_and(|s| s >= 0.4),
        text: format!(
            "theta_ss [{}], worst closure dev {:.4} (alpha >= 0.95), L1_2 [{}], slope {}",
            thetas.join(" "),
            worst,
            dists.join(" "),
            slope.map_or("none".into(), |s| format!("{s:.3}"))
        ),
    }
}

/// Relative path -> bytes of every output except the manifest.
fn outputs(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().to_string();
                if rel != "manifest.json" {
                    out.insert(rel, std::fs::read(&p).unwrap());
                }
            }
        }
    }
    out
}

fn c10() -> Line {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("small.cfg");
    std::fs::write(&cfg, "np = 400\nreplicas = 3\npair_budget = 300\nbins = 16\nburn_in = 0.5\nwindow = 1\n").unwrap();
    let cfg = cfg.to_str().unwrap();
    let scaling_cfg = tmp.path().join("scaling.cfg");
    std::fs::write(&scaling_cfg, "np = 400\nreplicas = 3\npair_budget = 300\nbins = 16\nt_end = 1\n").unwrap();
    let scaling_cfg = scaling_cfg.to_str().unwrap();
    let commands: Vec<(&str, Vec<&str>)> = vec![
        ("validate", vec!["validate", "--samples", "20000"]),
        ("moments", vec!["moments", "--N", "3"]),
        ("steady", vec!["steady", "--config", cfg, "--alpha", "0.9"]),
        ("relax", vec!["relax", "--config", cfg, "--alpha", "0.8", "--t-end", "3"]),
        ("sweep", vec!["sweep", "--config", cfg]),
        ("lyapunov", vec!["lyapunov", "--config", cfg, "--alpha", "0.99", "--t-end", "1"]),
        ("scaling", vec!["scaling", "--config", scaling_cfg]),
    ];
    let mut failures = Vec::new();
    for (name, args) in &commands {
        let mut dirs = Vec::new();
        for rep in 0..2 {
            let out: PathBuf = tmp.path().join(format!("{name}-{rep}"));
            let mut full = args.clone();
            full.extend(["--out", out.to_str().unwrap()]);
            let status = Command::new(env!("CARGO_BIN_EXE_granular")).args(&full).output().unwrap();
            if !matches!(status.status.code(), Some(0 | 1)) {
                failures.push(format!("{name} exited {:?}", status.status.code()));
            }
            let entries: Vec<PathBuf> = std::fs::read_dir(&out).unwrap().map(|e| e.unwrap().path()).collect();
            dirs.push(entries[0].clone());
        }
        let (a, b) = (outputs(&dirs[0]), outputs(&dirs[1]));
        if a.is_empty() || a != b {
            failures.push(format!("{name} outputs differ"));
        }
    }
    Line {
        n: 10,
        pass: failures.is_empty(),
        text: if failures.is_empty() {
            format!("{} subcommands re-run byte-identical", commands.len())
        } else {
            failures.join("; ")
        },
    }
}

fn main() {
    let start = Instant::now();
    let mut lines = vec![c1(), c2(), c3()];
    let mut ckp = CkpTally::default();
    let progress = |what: &str| eprintln!("[{:>6.0} s] {what}", start.elapsed().as_secs_f64());

    progress("steady states at 0.8 and 0.95");
    let s080 = steady_state(&spec(ExperimentKind::Steady, 0.8, NP, 8)).unwrap().result;
    let s095 = steady_state(&spec(ExperimentKind::Steady, 0.95, NP, 8)).unwrap().result;
    ckp.merge(s080.ckp);
    ckp.merge(s095.ckp);

    progress("alpha sweep");
    let sweep = alpha_sweep(&spec(ExperimentKind::Sweep, 0.95, NP, 8)).unwrap().result;
    ckp.merge(sweep.ckp);
    let at = |a: f64| sweep.points.iter().find(|p| p.alpha == a).unwrap();
    lines.push(c4(&[&s080, at(0.90), &s095, at(0.99)]));
    lines.push(c5(&sweep, &s095));

    progress("relaxation fits");
    let mut fits = Vec::new();
    for alpha in [0.95, 0.96, 0.98] {
        let r = relaxation_fit(&spec(ExperimentKind::Relax, alpha, NP, 20));
        match r {
            Ok(o) => {
                ckp.merge(o.result.ckp);
                fits.push(Some(o.result));
            }
            Err(e) => {
                eprintln!("relaxation at {alpha}: {e}");
                fits.push(None);
            }
        }
    }
    lines.push(match (&fits[0], &fits[1], &fits[2]) {
        (Some(a), Some(b), Some(c)) => {
            let ratio = c.mu_hat.estimate / b.mu_hat.estimate;
            let arbs: Vec<_> = [a, b, c].iter().map(|r| arbitrate_rate(r)).collect();
            let negative = [a, b, c].iter().all(|r| r.mu_hat.estimate < 0.0);
            let supported = arbs.iter().all(|x| x.relative_error.abs() <= 0.4);
            let parts: Vec<String> = arbs
                .iter()
                .zip([a, b, c])
                .map(|(x, r)| {
                    format!("{}: {:.4}±{:.4} ({}, {:+.1}%)", r.alpha, x.mu_hat, r.mu_hat.stderr, x.supported, 100.0 * x.relative_error)
                })
                .collect();
            Line {
                n: 6,
                pass: negative && supported && (ratio - 0.5).abs() <= 0.15,
                text: format!("mu_hat {}, ratio 0.98/0.96 = {ratio:.3}", parts.join(", ")),
            }
        }
        _ => Line { n: 6, pass: false, text: "a relaxation fit was refused".into() },
    });

    progress("Liapunov trace");
    let ly = lyapunov_trace(&spec(ExperimentKind::Lyapunov, 0.99, NP, 8)).unwrap().result;
    ckp.merge(ly.ckp);
    let ratio = ly.timescale_ratio;
    let ly_line = Line {
        n: 8,
        pass: ly.monotone && ratio.is_some_and(|r| r >= 5.0),
        text: format!(
            "H1 non-increasing {} (worst rise {:.2} sigma), e-folding ratio {}",
            ly.monotone,
            ly.worst_increase_z,
            ratio.map_or("none".into(), |r| format!("{r:.1}"))
        ),
    };

    progress("scaling check");
    let sc = scaling_check(&spec(ExperimentKind::Scaling, 0.95, 50_000, 20)).unwrap().result;
    ckp.merge(sc.ckp);
    let sc_line = Line {
        n: 9,
        pass: sc.pass,
        text: format!("lambda {}: max deviation {:.4} (tolerance {})", sc.lambda, sc.max_rel_deviation, sc.tolerance),
    };

    lines.push(Line {
        n: 7,
        pass: ckp.holds() && ckp.checked > 0,
        text: format!("CKP violations {} of {} applicable snapshots", ckp.violations, ckp.checked),
    });
    lines.push(ly_line);
    lines.push(sc_line);

    progress("determinism");
    lines.push(c10());
    lines.sort_by_key(|l| l.n);

    println!();
    for l in &lines {
        println!("criterion {:>2}: {}  {}", l.n, if l.pass { "PASS" } else { "FAIL" }, l.text);
    }
    let failed: Vec<usize> = lines.iter().filter(|l| !l.pass).map(|l| l.n).collect();
    println!("acceptance: {} of {} passed in {:.0} s", lines.len() - failed.len(), lines.len(), start.elapsed().as_secs_f64());
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}

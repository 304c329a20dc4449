//! Subcommand implementations: experiment runs, artifact writing, theory
//! tables and the verification suite.

use crate::config::{Config, ConfigError};
use newton_lab::linalg::UNIT_ROUNDOFF;
use newton_lab::mdsim::{self, ChainSpec, MDSystem, MdError};
use newton_lab::solver::{self, StopRule};
use newton_lab::sqrt_lab::{self, SqrtExperimentConfig, SqrtLabError};
use newton_lab::theory::{self, TheoryParams};
use newton_lab::verify::{self, Tolerances};
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

/// Failure classes mapped to process exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Invalid configuration or environment (exit 1).
    Config(String),
    /// Numerical failure during an experiment (exit 2).
    Numerical(String),
    /// One or more verification criteria failed (exit 3).
    Acceptance(usize),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Numerical(_) => 2,
            CliError::Acceptance(_) => 3,
        }
    }

    pub fn message(&self) -> String {
        match self {
            CliError::Config(m) => format!("configuration error: {m}"),
            CliError::Numerical(m) => format!("numerical failure: {m}"),
            CliError::Acceptance(n) => format!("{n} verification criteria failed"),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Config(format!("i/o: {e}"))
    }
}

impl From<SqrtLabError> for CliError {
    fn from(e: SqrtLabError) -> Self {
        match e {
            SqrtLabError::Solver(inner) => CliError::Numerical(inner.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<MdError> for CliError {
    fn from(e: MdError) -> Self {
        match &e {
            MdError::Parse { .. }
            | MdError::InvalidSystem(_)
            | MdError::DegenerateGeometry { .. } => CliError::Config(e.to_string()),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

pub struct RunOptions {
    pub config_path: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub seed: Option<u64>,
    pub overrides: Vec<String>,
}

fn load_config(options: &RunOptions, section: &str) -> Result<Config, CliError> {
    let mut config = match &options.config_path {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| {
                CliError::Config(format!("cannot read config {}: {e}", path.display()))
            })?;
            Config::parse(&text)?
        }
        None => Config::default(),
    };
    for assignment in &options.overrides {
        config.set(section, assignment)?;
    }
    Ok(config)
}

fn resolve_seed(flag: Option<u64>, config: &Config, section: &str) -> Result<u64, CliError> {
    if let Some(seed) = flag {
        return Ok(seed);
    }
    if let Some(raw) = config.get(section, "seed") {
        return raw
            .parse::<u64>()
            .map_err(|e| CliError::Config(format!("seed '{raw}': {e}")));
    }
    if let Ok(raw) = std::env::var("NEWTON_LAB_SEED") {
        return raw
            .parse::<u64>()
            .map_err(|e| CliError::Config(format!("NEWTON_LAB_SEED '{raw}': {e}")));
    }
    Ok(newton_lab::DEFAULT_SEED)
}

fn prepare_out_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir)
        .map_err(|e| CliError::Config(format!("output directory {}: {e}", dir.display())))?;
    // probe writability before producing anything
    let probe = dir.join(".write_probe");
    fs::write(&probe, b"ok").map_err(|e| {
        CliError::Config(format!(
            "output directory {} not writable: {e}",
            dir.display()
        ))
    })?;
    let _ = fs::remove_file(&probe);
    Ok(())
}

/// Write-to-temp-then-rename so a run never leaves partial artifacts.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// The perturbed square-root experiment: per-epsilon trace CSVs, a panel
/// plot script, and a summary table on stdout.
pub fn cmd_sqrt(options: &RunOptions) -> Result<(), CliError> {
    let config = load_config(options, "sqrt")?;
    let seed = resolve_seed(options.seed, &config, "sqrt")?;
    let mut experiment = SqrtExperimentConfig {
        seed,
        ..SqrtExperimentConfig::default()
    };
    if let Some(eps) = config.get_f64_list("sqrt", "epsilon")? {
        experiment.epsilons = eps;
    }
    if let Some(points) = config.get_parsed::<usize>("sqrt", "alpha_points")? {
        experiment.alpha_points = points;
    }
    if let Some(cap) = config.get_parsed::<usize>("sqrt", "max_iterations")? {
        experiment.max_iterations = cap;
    }
    experiment.validate().map_err(CliError::from)?;
    prepare_out_dir(&options.out_dir)?;

    let result = sqrt_lab::run_sqrt_experiment(&experiment)?;
    let threshold = 10.0 * UNIT_ROUNDOFF;
    let mut csv_names = Vec::new();
    println!("epsilon      cells  exact_hits  geomean_ratio  max_iters_to_stag  max_final_r/u");
    for (idx, &eps) in experiment.epsilons.iter().enumerate() {
        let name = format!("sqrt_eps_{eps:e}.csv");
        let mut buf = Vec::new();
        sqrt_lab::write_cells_csv(result.cells_for_epsilon(idx), &mut buf)?;
        write_atomic(&options.out_dir.join(&name), &buf)?;
        csv_names.push(name);

        let cells: Vec<_> = result.cells_for_epsilon(idx).collect();
        let exact_hits = cells.iter().filter(|c| c.exact_hit).count();
        let geomean = sqrt_lab::pooled_ratio_geometric_mean(cells.iter().copied(), threshold);
        let max_iters = cells
            .iter()
            .filter_map(|c| solver::iterations_to_threshold(&c.trace, threshold))
            .max();
        let max_final = cells
            .iter()
            .filter_map(|c| c.trace.final_record().relative_error)
            .fold(0.0_f64, f64::max);
        println!(
            "{:<12} {:<6} {:<11} {:<14} {:<18} {:.2}",
            format!("{eps:e}"),
            cells.len(),
            exact_hits,
            geomean.map_or_else(|| "-".into(), |g| format!("{g:.3e}")),
            max_iters.map_or_else(|| "-".into(), |i| i.to_string()),
            max_final / UNIT_ROUNDOFF,
        );
    }
    let script = sqrt_plot_script(&csv_names);
    write_atomic(&options.out_dir.join("sqrt_plot.py"), script.as_bytes())?;
    println!(
        "wrote {} CSV files and sqrt_plot.py to {}",
        csv_names.len(),
        options.out_dir.display()
    );
    Ok(())
}

/// The chain experiment: report and trajectory CSVs plus the three panel
/// plot scripts.
pub fn cmd_md(options: &RunOptions) -> Result<(), CliError> {
    let config = load_config(options, "md")?;
    let seed = resolve_seed(options.seed, &config, "md")?;
    let steps = config.get_parsed::<usize>("md", "steps")?.unwrap_or(1000);
    let sample_every = config
        .get_parsed::<usize>("md", "sample_every")?
        .unwrap_or(50);
    let max_iterations = config
        .get_parsed::<usize>("md", "max_iterations")?
        .unwrap_or(50);

    let mut system = match config.get("md", "system") {
        Some(path) => {
            // relative system paths resolve against the config file's directory
            let mut resolved = PathBuf::from(path);
            if resolved.is_relative() {
                if let Some(parent) = options.config_path.as_deref().and_then(Path::parent) {
                    resolved = parent.join(resolved);
                }
            }
            let text = fs::read_to_string(&resolved).map_err(|e| {
                CliError::Config(format!(
                    "cannot read system file {}: {e}",
                    resolved.display()
                ))
            })?;
            MDSystem::from_definition(&text, seed)?
        }
        None => MDSystem::chain(&ChainSpec {
            seed,
            ..ChainSpec::default()
        })?,
    };
    prepare_out_dir(&options.out_dir)?;

    let stop = StopRule::new(max_iterations, 0.0, 3);
    let result = mdsim::run_md(&mut system, steps, sample_every, &stop)?;

    let mut buf = Vec::new();
    mdsim::write_reports_csv(&result.reports, &mut buf)?;
    write_atomic(&options.out_dir.join("md_reports.csv"), &buf)?;
    let mut buf = Vec::new();
    mdsim::write_trajectory_csv(&result.trajectory, &mut buf)?;
    write_atomic(&options.out_dir.join("md_trajectory.csv"), &buf)?;

    for (name, script) in md_plot_scripts() {
        write_atomic(&options.out_dir.join(name), script.as_bytes())?;
    }

    let worst_violation = result
        .reports
        .iter()
        .map(|s| s.report.final_violation)
        .fold(0.0_f64, f64::max);
    let max_shoulder = result
        .reports
        .iter()
        .filter_map(|s| s.report.stagnation_index())
        .max();
    println!(
        "{} steps, {} sampled solves; worst post-solve violation {:.2}u; max stagnation index {}",
        steps,
        result.reports.len(),
        worst_violation / UNIT_ROUNDOFF,
        max_shoulder.map_or_else(|| "-".into(), |i| i.to_string()),
    );
    println!(
        "wrote md_reports.csv, md_trajectory.csv and 3 plot scripts to {}",
        options.out_dir.display()
    );
    Ok(())
}

/// Tabulate stagnation thresholds over the configured parameter grid.
pub fn cmd_bounds(options: &RunOptions) -> Result<(), CliError> {
    let config = load_config(options, "bounds")?;
    let one = vec![1.0];
    let k_list = config
        .get_f64_list("bounds", "k")?
        .unwrap_or_else(|| one.clone());
    let l_list = config
        .get_f64_list("bounds", "l")?
        .unwrap_or_else(|| one.clone());
    let m_list = config
        .get_f64_list("bounds", "m")?
        .unwrap_or_else(|| one.clone());
    let z_list = config.get_f64_list("bounds", "z_norm")?.unwrap_or(one);
    let d_list = config
        .get_f64_list("bounds", "d")?
        .unwrap_or_else(|| vec![UNIT_ROUNDOFF]);
    let e_list = config
        .get_f64_list("bounds", "e")?
        .unwrap_or_else(|| vec![0.0]);

    let mut csv =
        String::from("k,l,m,z_norm,d,e,lambda_minus,lambda_plus,estimate,sqrt_u_threshold,flag\n");
    println!(
        "{:<8} {:<8} {:<8} {:<8} {:<10} {:<10} {:<14} {:<14} {:<14} {:<14} flag",
        "k", "l", "m", "z_norm", "d", "e", "lambda_minus", "lambda_plus", "estimate", "sqrt_u"
    );
    for &k in &k_list {
        for &l in &l_list {
            for &m in &m_list {
                for &z in &z_list {
                    for &d in &d_list {
                        for &e in &e_list {
                            let params = TheoryParams::new(k, l, m, d, e, z)
                                .map_err(|err| CliError::Config(err.to_string()))?;
                            let roots = theory::stagnation_roots(&params);
                            let estimate = theory::stagnation_estimate(&params);
                            let sqrt_u = d.sqrt();
                            let (lo, hi, flag) = match &roots {
                                Ok((lo, hi)) => (format!("{lo:.6e}"), format!("{hi:.6e}"), ""),
                                Err(theory::TheoryError::NoRealRoots { .. }) => {
                                    ("-".into(), "-".into(), "no-real-roots")
                                }
                                Err(err) => {
                                    return Err(CliError::Numerical(err.to_string()));
                                }
                            };
                            let est = estimate
                                .as_ref()
                                .map(|v| format!("{v:.6e}"))
                                .unwrap_or_else(|_| "-".into());
                            println!(
                                "{:<8} {:<8} {:<8} {:<8} {:<10.2e} {:<10.2e} {:<14} {:<14} {:<14} {:<14.6e} {flag}",
                                k, l, m, z, d, e, lo, hi, est, sqrt_u
                            );
                            writeln!(
                                csv,
                                "{k},{l},{m},{z},{d},{e},{},{},{},{sqrt_u},{flag}",
                                if lo == "-" { "" } else { &lo },
                                if hi == "-" { "" } else { &hi },
                                if est == "-" { "" } else { &est },
                            )
                            .expect("string write");
                        }
                    }
                }
            }
        }
    }
    prepare_out_dir(&options.out_dir)?;
    write_atomic(&options.out_dir.join("bounds.csv"), csv.as_bytes())?;
    println!("wrote bounds.csv to {}", options.out_dir.display());
    Ok(())
}

pub struct VerifyOptions {
    pub out_dir: PathBuf,
    pub seed: Option<u64>,
    pub list: bool,
    pub overrides: Vec<String>,
}

/// Run the verification suite, printing one pass/fail line per criterion.
pub fn cmd_verify(options: &VerifyOptions) -> Result<(), CliError> {
    if options.list {
        for (id, name) in verify::CRITERION_NAMES {
            println!("criterion {id:2}: {name}");
        }
        return Ok(());
    }
    let seed = match options.seed {
        Some(s) => s,
        None => match std::env::var("NEWTON_LAB_SEED") {
            Ok(raw) => raw
                .parse::<u64>()
                .map_err(|e| CliError::Config(format!("NEWTON_LAB_SEED '{raw}': {e}")))?,
            Err(_) => newton_lab::DEFAULT_SEED,
        },
    };
    let mut tolerances = Tolerances::default();
    for assignment in &options.overrides {
        let (key, value) = assignment.split_once('=').ok_or_else(|| {
            CliError::Config(format!("--set expects key=value, got '{assignment}'"))
        })?;
        tolerances
            .set(key.trim(), value.trim())
            .map_err(CliError::Config)?;
    }
    prepare_out_dir(&options.out_dir)?;
    let reports = verify::run_all(seed, &options.out_dir, &tolerances).map_err(|e| match e {
        verify::VerifyError::Io(err) => CliError::Config(format!("i/o: {err}")),
        verify::VerifyError::Sqrt(err) => CliError::Numerical(err.to_string()),
        verify::VerifyError::Md(err) => CliError::Numerical(err.to_string()),
    })?;
    let mut failures = 0;
    for report in &reports {
        println!("{}", report.line());
        if !report.passed {
            failures += 1;
        }
    }
    if failures == 0 {
        println!("all {} criteria passed (seed {seed})", reports.len());
        Ok(())
    } else {
        Err(CliError::Acceptance(failures))
    }
}

fn sqrt_plot_script(csv_names: &[String]) -> String {
    let files = csv_names
        .iter()
        .map(|n| format!("\"{n}\""))
        .collect::<Vec<_>>()
        .join(", ");
    format!(
        r#"#!/usr/bin/env python3
"""Relative error against iteration index, one panel per epsilon.

Zero errors are exact hits of the reference square root; they cannot sit on
a log axis, so those curves are drawn discontinuous.
"""
import csv
from collections import defaultdict

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

FILES = [{files}]

fig, axes = plt.subplots(1, len(FILES), figsize=(5.5 * len(FILES), 4.5), sharey=True)
if len(FILES) == 1:
    axes = [axes]
for ax, path in zip(axes, FILES):
    series = defaultdict(list)
    label = path
    with open(path) as fh:
        for row in csv.DictReader(fh):
            label = row["epsilon"]
            if row["r_k"]:
                series[row["alpha"]].append((int(row["k"]), float(row["r_k"])))
    for points in series.values():
        points.sort()
        ks = [k for k, _ in points]
        rs = [r if r > 0.0 else float("nan") for _, r in points]
        ax.semilogy(ks, rs, color="tab:blue", alpha=0.06, linewidth=0.8)
    ax.set_title(f"epsilon = {{label}}")
    ax.set_xlabel("iteration k")
    ax.grid(True, which="both", alpha=0.2)
axes[0].set_ylabel("relative error r_k")
fig.tight_layout()
fig.savefig("sqrt_convergence.png", dpi=150)
print("wrote sqrt_convergence.png")
"#
    )
}

fn md_plot_scripts() -> Vec<(&'static str, String)> {
    let violation = r#"#!/usr/bin/env python3
"""Max relative constraint violation against quasi-Newton iteration index."""
import csv
from collections import defaultdict

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

series = defaultdict(list)
with open("md_reports.csv") as fh:
    for row in csv.DictReader(fh):
        if row["violation"]:
            series[row["step"]].append((int(row["k"]), float(row["violation"])))

fig, ax = plt.subplots(figsize=(6, 4.5))
for step, points in series.items():
    points.sort()
    ax.semilogy([k for k, _ in points], [max(v, 1e-18) for _, v in points],
                alpha=0.5, linewidth=0.9)
ax.set_xlabel("quasi-Newton iteration k")
ax.set_ylabel("max relative constraint violation")
ax.grid(True, which="both", alpha=0.2)
fig.tight_layout()
fig.savefig("md_violation.png", dpi=150)
print("wrote md_violation.png")
"#;
    let relative_error = r#"#!/usr/bin/env python3
"""Relative error of the multiplier iterates against iteration index."""
import csv
from collections import defaultdict

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

series = defaultdict(list)
with open("md_reports.csv") as fh:
    for row in csv.DictReader(fh):
        if row["r_k"]:
            series[row["step"]].append((int(row["k"]), float(row["r_k"])))

fig, ax = plt.subplots(figsize=(6, 4.5))
for step, points in series.items():
    points.sort()
    ks = [k for k, _ in points]
    rs = [r if r > 0.0 else float("nan") for _, r in points]
    ax.semilogy(ks, rs, alpha=0.5, linewidth=0.9)
ax.set_xlabel("quasi-Newton iteration k")
ax.set_ylabel("relative error r_k")
ax.grid(True, which="both", alpha=0.2)
fig.tight_layout()
fig.savefig("md_relative_error.png", dpi=150)
print("wrote md_relative_error.png")
"#;
    let ratios = r#"#!/usr/bin/env python3
"""Rate-validation ratios nu_k = r_{k+1} / (r_k |E_k|) per sampled solve."""
import csv
from collections import defaultdict

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

series = defaultdict(list)
with open("md_reports.csv") as fh:
    for row in csv.DictReader(fh):
        if row["nu_k"]:
            series[row["step"]].append((int(row["k"]), float(row["nu_k"])))

fig, ax = plt.subplots(figsize=(6, 4.5))
for step, points in series.items():
    points.sort()
    ax.semilogy([k for k, _ in points], [v for _, v in points],
                marker="o", linestyle="-", alpha=0.5, markersize=3)
ax.set_xlabel("quasi-Newton iteration k")
ax.set_ylabel("nu_k")
ax.grid(True, which="both", alpha=0.2)
fig.tight_layout()
fig.savefig("md_ratios.png", dpi=150)
print("wrote md_ratios.png")
"#;
    vec![
        ("md_plot_violation.py", violation.to_string()),
        ("md_plot_relative_error.py", relative_error.to_string()),
        ("md_plot_ratios.py", ratios.to_string()),
    ]
}

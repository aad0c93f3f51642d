use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use rip_threshold::io::{format_factor, parse_factor};
use rip_threshold::landscape::{linspace, rank1_grid, rank1_grid_in_frame, rank1_pair};
use rip_threshold::verify::{run_suite, VerifyConfig};
use rip_threshold::{
    adversarial_operator, dual_eta, epsilon_sweep, recovery_experiment, rip_monte_carlo, Error, ExperimentConfig,
    FactorMatrixF64, GdOptions, ThresholdReport, TolerancesF64,
};

mod output;

use output::{emit, json_text, sibling, write_table, Format, Metadata};

#[derive(Parser)]
#[command(name = "rip-threshold", version, about = "RIP thresholds for spurious critical points in low-rank matrix sensing")]
struct Cli {
    #[command(flatten)]
    global: Global,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Serialize, Clone)]
struct Global {
    /// Base seed for every random draw
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Output file (stdout when omitted)
    #[arg(long, global = true)]
    #[serde(skip)]
    out: Option<PathBuf>,

    /// Output format; tables default to csv, reports to json
    #[arg(long, global = true, value_enum)]
    #[serde(skip)]
    format: Option<Format>,

    /// Constant in the sample-count estimate
    #[arg(long, global = true, default_value_t = 1.0)]
    c0: f64,

    /// Relative tolerance for declaring XX^T = ZZ^T
    #[arg(long, global = true, default_value_t = 1e-12)]
    tol_coincidence: f64,

    /// Relative singular-value cutoff for numerical rank (default: max(rows, cols) * machine epsilon)
    #[arg(long, global = true)]
    tol_rank: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Threshold quantities for one point X against the ground truth Z
    Threshold {
        #[command(flatten)]
        pair: PairArgs,

        /// Write the resolved X to this file
        #[arg(long)]
        save_x: Option<PathBuf>,

        /// Write the resolved Z to this file
        #[arg(long)]
        save_z: Option<PathBuf>,
    },
    /// Adversarial operator that makes X a critical point, with checks
    Certificate {
        #[command(flatten)]
        pair: PairArgs,

        /// Monte-Carlo probes for the RIP estimate
        #[arg(long, default_value_t = 2000)]
        trials: usize,
    },
    /// Rank-one landscape of delta_foc over length ratio and angle
    Grid(GridArgs),
    /// Neighborhood bound against the sampled infimum over B_eps
    Sweep(SweepArgs),
    /// Gradient-descent recovery rates over (m, eps)
    Experiment(ExperimentArgs),
    /// Run the oracle suite; exits 2 on any failed check
    Verify(VerifyArgs),
}

#[derive(Args, Serialize, Clone)]
struct PairArgs {
    /// Matrix file for X
    #[arg(long, requires = "z", conflicts_with_all = ["rho", "phi"])]
    x: Option<PathBuf>,

    /// Matrix file for Z
    #[arg(long, requires = "x")]
    z: Option<PathBuf>,

    /// Rank-one shorthand: ||x|| / ||z||
    #[arg(long, requires = "phi")]
    rho: Option<f64>,

    /// Rank-one shorthand: angle between x and z in degrees
    #[arg(long, requires = "rho")]
    phi: Option<f64>,
}

#[derive(Args, Serialize, Clone)]
struct GridArgs {
    #[arg(long, default_value_t = 0.05)]
    rho_min: f64,
    #[arg(long, default_value_t = 2.0)]
    rho_max: f64,
    #[arg(long, default_value_t = 200)]
    rho_count: usize,
    /// Degrees
    #[arg(long, default_value_t = 0.0)]
    phi_min: f64,
    /// Degrees
    #[arg(long, default_value_t = 90.0)]
    phi_max: f64,
    #[arg(long, default_value_t = 200)]
    phi_count: usize,
    /// Ambient dimension; above 2 the pair is embedded in a random frame drawn from --seed
    #[arg(long, default_value_t = 2)]
    ambient: usize,
}

#[derive(Args, Serialize, Clone)]
struct SweepArgs {
    /// Comma-separated eps values
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9")]
    eps: Vec<f64>,

    /// Ground-truth matrix file (default: unit rank-one z in R^2)
    #[arg(long)]
    z: Option<PathBuf>,

    /// Boundary samples per eps
    #[arg(long, default_value_t = 2000)]
    samples: usize,
}

#[derive(Args, Serialize, Clone)]
struct ExperimentArgs {
    #[arg(long, default_value_t = 8)]
    n: usize,
    #[arg(long, default_value_t = 1)]
    r: usize,
    /// Comma-separated measurement counts
    #[arg(long, value_delimiter = ',', default_value = "8,16,32,64")]
    m: Vec<usize>,
    /// Comma-separated initial relative errors
    #[arg(long, value_delimiter = ',', default_value = "0.2,0.8")]
    eps: Vec<f64>,
    #[arg(long, default_value_t = 200)]
    trials: usize,
    /// Final relative Gram error counted as recovery
    #[arg(long, default_value_t = 1e-4)]
    success_threshold: f64,
    /// Gradient-norm stopping tolerance
    #[arg(long, default_value_t = GdOptions::default().tol)]
    gd_tol: f64,
    #[arg(long, default_value_t = GdOptions::default().max_iter)]
    max_iter: usize,
    /// Run trials on one thread (results are identical either way)
    #[arg(long)]
    serial: bool,
}

#[derive(Args, Serialize, Clone)]
struct VerifyArgs {
    #[arg(long, default_value_t = VerifyConfig::default().pairs)]
    pairs: usize,
    #[arg(long, default_value_t = VerifyConfig::default().probes)]
    probes: usize,
    #[arg(long, default_value_t = VerifyConfig::default().lemma_cases)]
    lemma_cases: usize,
    #[arg(long, default_value_t = VerifyConfig::default().neighborhood_samples)]
    neighborhood_samples: usize,
    #[arg(long, default_value_t = VerifyConfig::default().calculus_instances)]
    calculus_instances: usize,
}

impl Global {
    fn tolerances(&self) -> Result<TolerancesF64> {
        ensure!(self.tol_coincidence > 0.0 && self.tol_coincidence.is_finite(), "--tol-coincidence must be positive");
        if let Some(t) = self.tol_rank {
            ensure!(t > 0.0 && t.is_finite(), "--tol-rank must be positive");
        }
        ensure!(self.c0 > 0.0 && self.c0.is_finite(), "--c0 must be positive");
        Ok(TolerancesF64 { coincidence: self.tol_coincidence, rank_rtol: self.tol_rank })
    }

    fn metadata<C: Serialize>(&self, command: &'static str, args: &C) -> Result<Metadata> {
        let config = json!({ "global": self, "args": args });
        Ok(Metadata::new(command, self.seed, config))
    }

    fn out(&self) -> Option<&Path> {
        self.out.as_deref()
    }
}

fn read_factor(path: &Path) -> Result<FactorMatrixF64> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    parse_factor(&text).with_context(|| format!("in {}", path.display()))
}

impl PairArgs {
    fn resolve(&self) -> Result<(FactorMatrixF64, FactorMatrixF64)> {
        match (&self.x, &self.z, self.rho, self.phi) {
            (Some(x), Some(z), _, _) => {
                let (x, z) = (read_factor(x)?, read_factor(z)?);
                ensure!(x.n() == z.n() && x.r() == z.r(), "X is {}x{} but Z is {}x{}", x.n(), x.r(), z.n(), z.r());
                Ok((x, z))
            }
            (_, _, Some(rho), Some(phi)) => {
                ensure!(rho >= 0.0 && rho.is_finite(), "--rho must be nonnegative");
                ensure!(phi.is_finite(), "--phi must be finite");
                Ok(rank1_pair(rho, phi.to_radians()))
            }
            _ => bail!("give either --x and --z, or --rho and --phi"),
        }
    }
}

fn cmd_threshold(g: &Global, pair: &PairArgs, save_x: Option<&Path>, save_z: Option<&Path>) -> Result<()> {
    let tol = g.tolerances()?;
    let (x, z) = pair.resolve()?;
    for (path, m) in [(save_x, &x), (save_z, &z)] {
        if let Some(p) = path {
            emit(Some(p), &format_factor(m))?;
        }
    }
    let report = ThresholdReport::compute_with(&x, &z, g.c0, &tol)?;
    if report.coincident {
        eprintln!("note: XX^T = ZZ^T; delta_foc is 1 by convention");
    }
    let meta = g.metadata("threshold", pair)?;
    match g.format.unwrap_or(Format::Json) {
        Format::Json => emit(g.out(), &json_text(&json!({ "metadata": meta, "report": report }))?),
        Format::Csv => write_table(g.out(), Format::Csv, &meta, "report", &[report]),
    }
}

fn cmd_certificate(g: &Global, pair: &PairArgs, trials: usize) -> Result<()> {
    ensure!(g.format.unwrap_or(Format::Json) == Format::Json, "certificate output is JSON only");
    ensure!(trials > 0, "--trials must be positive");
    g.tolerances()?;
    let (x, z) = pair.resolve()?;
    let meta = g.metadata("certificate", &json!({ "pair": pair, "trials": trials }))?;
    let op = match adversarial_operator(&x, &z) {
        Ok(op) => op,
        Err(Error::NoCertificate) => {
            eprintln!("note: {}", Error::NoCertificate);
            let doc = json!({
                "metadata": meta,
                "outcome": "no-certificate",
                "reason": "sin(theta) = 0: delta_foc = 1",
            });
            return emit(g.out(), &json_text(&doc)?);
        }
        Err(e) => return Err(e.into()),
    };
    let record = op.certificate.record();
    let estimate = rip_monte_carlo(&op.operator, x.r(), trials, g.seed)?;
    let dual = dual_eta(&x, &z)?;
    let summary = json!({
        "gradient_norm": op.gradient_norm(&x, &z)?,
        "achieved_delta": op.achieved_delta,
        "spectral_delta": op.spectral_delta(),
        "monte_carlo_delta_hat": estimate.delta_hat,
        "monte_carlo": estimate,
        "dual_eta": dual,
        "primal_dual_gap": (record.eta - dual).abs(),
    });
    let doc = json!({ "metadata": meta, "outcome": "certified", "certificate": record, "summary": summary });
    emit(g.out(), &json_text(&doc)?)
}

fn cmd_grid(g: &Global, a: &GridArgs) -> Result<()> {
    ensure!(a.rho_count > 0 && a.phi_count > 0, "grid counts must be positive");
    ensure!(a.ambient >= 2, "--ambient must be at least 2");
    let rho = linspace(a.rho_min, a.rho_max, a.rho_count);
    let phi = linspace(a.phi_min.to_radians(), a.phi_max.to_radians(), a.phi_count);
    let grid = if a.ambient == 2 { rank1_grid(&rho, &phi)? } else { rank1_grid_in_frame(&rho, &phi, a.ambient, g.seed)? };
    let meta = g.metadata("grid", &json!({ "grid": a, "phi_unit_in_output": "radians" }))?;
    write_table(g.out(), g.format.unwrap_or(Format::Csv), &meta, "rows", &grid.rows())
}

fn cmd_sweep(g: &Global, a: &SweepArgs) -> Result<()> {
    let z = match &a.z {
        Some(p) => read_factor(p)?,
        None => FactorMatrixF64::from_column(&[1.0, 0.0])?,
    };
    let rows = epsilon_sweep(&z, &a.eps, a.samples, g.seed)?;
    let meta = g.metadata("sweep", &json!({ "sweep": a, "z": format_factor(&z) }))?;
    write_table(g.out(), g.format.unwrap_or(Format::Csv), &meta, "rows", &rows)
}

fn cmd_experiment(g: &Global, a: &ExperimentArgs) -> Result<()> {
    let cfg = ExperimentConfig {
        n: a.n,
        r: a.r,
        m_list: a.m.clone(),
        epsilon_list: a.eps.clone(),
        trials: a.trials,
        seed: g.seed,
        c0: g.c0,
        success_threshold: a.success_threshold,
        gd: GdOptions { tol: a.gd_tol, max_iter: a.max_iter, ..GdOptions::default() },
        parallel: !a.serial,
    };
    cfg.validate()?;
    let res = recovery_experiment::<f64>(&cfg)?;
    let meta = g.metadata("experiment", &res.config)?;
    match g.format.unwrap_or(Format::Csv) {
        Format::Csv => {
            let out = g.out().context("experiment CSV output needs --out (the summary goes next to it)")?;
            write_table(Some(out), Format::Csv, &meta, "records", &res.records)?;
            let summary = sibling(out, ".summary.json");
            emit(Some(&summary), &json_text(&json!({ "metadata": meta, "cells": res.cells }))?)
        }
        Format::Json => {
            emit(g.out(), &json_text(&json!({ "metadata": meta, "cells": res.cells, "records": res.records }))?)
        }
    }
}

fn cmd_verify(g: &Global, a: &VerifyArgs) -> Result<bool> {
    let cfg = VerifyConfig {
        seed: g.seed,
        pairs: a.pairs,
        probes: a.probes,
        lemma_cases: a.lemma_cases,
        neighborhood_samples: a.neighborhood_samples,
        calculus_instances: a.calculus_instances,
    };
    ensure!(cfg.pairs >= 4 && cfg.probes > 0 && cfg.lemma_cases > 0, "verify case counts are too small");
    ensure!(cfg.neighborhood_samples > 0 && cfg.calculus_instances > 0, "verify case counts must be positive");
    let checks = run_suite(&cfg)?;
    let passed = checks.iter().filter(|c| c.passed).count();
    let all = passed == checks.len();
    let meta = g.metadata("verify", &cfg)?;
    match g.format {
        Some(Format::Json) => {
            emit(g.out(), &json_text(&json!({ "metadata": meta, "passed": all, "checks": checks }))?)?;
        }
        Some(Format::Csv) => write_table(g.out(), Format::Csv, &meta, "checks", &checks)?,
        None => {
            let mut text: String = checks.iter().map(|c| c.line() + "\n").collect();
            text.push_str(&format!("verify: {passed}/{} checks passed\n", checks.len()));
            emit(g.out(), &text)?;
            if let Some(out) = g.out() {
                emit(Some(&sibling(out, ".meta.json")), &json_text(&meta)?)?;
                print!("{text}");
            }
        }
    }
    if !all {
        eprintln!("verify: {} check(s) failed", checks.len() - passed);
    }
    Ok(all)
}

fn run(cli: Cli) -> Result<ExitCode> {
    let g = &cli.global;
    match &cli.command {
        Command::Threshold { pair, save_x, save_z } => cmd_threshold(g, pair, save_x.as_deref(), save_z.as_deref())?,
        Command::Certificate { pair, trials } => cmd_certificate(g, pair, *trials)?,
        Command::Grid(a) => cmd_grid(g, a)?,
        Command::Sweep(a) => cmd_sweep(g, a)?,
        Command::Experiment(a) => cmd_experiment(g, a)?,
        Command::Verify(a) => {
            if !cmd_verify(g, a)? {
                return Ok(ExitCode::from(2));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

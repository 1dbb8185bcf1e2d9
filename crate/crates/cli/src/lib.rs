//! Command-line front end: argument resolution, the six subcommands and the
//! CSV/JSON output formats.
//!
//! CSV outputs start with a `#`-prefixed JSON echo of the resolved
//! [`ExperimentSpec`] and may end with `#`-prefixed aggregate lines. JSON
//! outputs carry the spec under `spec`. Results are independent of the
//! thread count.

pub mod spec;
pub mod verify;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufWriter, Write};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use lpgroth::analysis::{
    chevet_bracket, delocalization_fit, opnorm_estimate, stability_event, AnalysisError, StabilityConfig,
};
use lpgroth::boundary::BoundaryError;
use lpgroth::core_math::{gaussian_moment_norm, holder_conjugate, lp_norm, sample_matrix, MathError, MatrixSample};
use lpgroth::finite_solver::{
    near_optimizers, normalization, solve_lp, SolveConfig, SolveRecord, SolveResult, SolverError,
};
use lpgroth::parisi_opt::{grothendieck_limit, least_squares_slope, scaling_check, OptConfig, OptError};
use lpgroth::parisi_pde::{GridConfig, PdeError};
use lpgroth::sde_verify::SdeError;

pub use spec::{load_spec, CommandTag, ExperimentSpec, Suite};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Math(#[from] MathError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Opt(#[from] OptError),
    #[error(transparent)]
    Boundary(#[from] BoundaryError),
    #[error(transparent)]
    Pde(#[from] PdeError),
    #[error(transparent)]
    Sde(#[from] SdeError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
}

#[derive(Debug, Parser)]
#[command(name = "lpgroth", version, about = "Random l_p Grothendieck problems: finite solvers, Parisi limits and checks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve sampled instances; one CSV row per (seed, n, p).
    Solve(CommonArgs),
    /// Limiting constants for p > 2 as JSON.
    Parisi(CommonArgs),
    /// Per-n aggregates over a dimension grid plus a regression line.
    Scan(CommonArgs),
    /// Run property suites; exit code 0 iff every property passes.
    Verify {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_enum, default_value = "all")]
        suite: Suite,
    },
    /// Operator-norm estimates with their Chevet bracket.
    Opnorm {
        #[command(flatten)]
        common: CommonArgs,
        /// Target exponents (comma list).
        #[arg(long)]
        q: Option<String>,
    },
    /// Distance-restricted searches away from the near-optimizer set.
    Stability {
        #[command(flatten)]
        common: CommonArgs,
        /// Distance thresholds (comma list).
        #[arg(long)]
        delta: Option<String>,
    },
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// Exponents (comma list).
    #[arg(long)]
    pub p: Option<String>,
    /// Dimensions: comma list or `a..b` doubling grid.
    #[arg(long)]
    pub n: Option<String>,
    /// Penalties (comma list).
    #[arg(long)]
    pub t: Option<String>,
    /// Seed count `k` (seeds 0..k), half-open range `a..b`, or comma list.
    #[arg(long)]
    pub seeds: Option<String>,
    #[arg(long)]
    pub restarts: Option<usize>,
    #[arg(long)]
    pub quad_order: Option<usize>,
    #[arg(long)]
    pub grid_step: Option<f64>,
    /// Output file; standard output when absent.
    #[arg(long)]
    pub out: Option<String>,
}

struct Defaults {
    p: &'static str,
    n: &'static str,
    t: &'static str,
    seeds: &'static str,
    restarts: usize,
}

fn usage(e: String) -> CliError {
    CliError::Usage(e)
}

fn resolve(tag: CommandTag, a: &CommonArgs) -> Result<ExperimentSpec, CliError> {
    let d = match tag {
        CommandTag::Solve => Defaults { p: "2", n: "512", t: "", seeds: "1", restarts: 8 },
        CommandTag::Parisi => Defaults { p: "4", n: "", t: "1", seeds: "", restarts: 5 },
        CommandTag::Scan => Defaults { p: "4", n: "256..2048", t: "", seeds: "4", restarts: 8 },
        CommandTag::Verify => Defaults { p: "", n: "", t: "", seeds: "1", restarts: 8 },
        CommandTag::Opnorm => Defaults { p: "1.5", n: "1024", t: "", seeds: "1", restarts: 8 },
        CommandTag::Stability => Defaults { p: "1.5", n: "512", t: "", seeds: "1", restarts: 8 },
    };
    let reals = |given: &Option<String>, default: &str| -> Result<Vec<f64>, CliError> {
        match given {
            Some(s) => {
                let v = spec::parse_reals(s).map_err(usage)?;
                if v.is_empty() {
                    return Err(usage(format!("empty list {s:?}")));
                }
                Ok(v)
            }
            None => spec::parse_reals(default).map_err(usage),
        }
    };
    let p = reals(&a.p, d.p)?;
    let t = reals(&a.t, d.t)?;
    let n = match (&a.n, d.n) {
        (Some(s), _) => spec::parse_dims(s).map_err(usage)?,
        (None, "") => Vec::new(),
        (None, s) => spec::parse_dims(s).map_err(usage)?,
    };
    let seeds = match (&a.seeds, d.seeds) {
        (Some(s), _) => spec::parse_seeds(s).map_err(usage)?,
        (None, "") => Vec::new(),
        (None, s) => spec::parse_seeds(s).map_err(usage)?,
    };
    let mut grid = BTreeMap::new();
    if let Some(q) = a.quad_order {
        if q < 4 {
            return Err(usage(format!("quad-order must be at least 4, got {q}")));
        }
        grid.insert("quad_order".to_string(), q as f64);
    }
    if let Some(h) = a.grid_step {
        if !(h > 0.0 && h.is_finite()) {
            return Err(usage(format!("grid-step must be positive, got {h}")));
        }
        grid.insert("grid_step".to_string(), h);
    }
    Ok(ExperimentSpec {
        command: tag,
        p,
        n,
        t,
        seeds,
        restarts: a.restarts.unwrap_or(d.restarts),
        grid,
        q: Vec::new(),
        delta: Vec::new(),
        suite: None,
        out: a.out.clone(),
    })
}

/// Resolves the parsed arguments into a full spec.
pub fn resolve_command(cmd: &Command) -> Result<ExperimentSpec, CliError> {
    Ok(match cmd {
        Command::Solve(a) => resolve(CommandTag::Solve, a)?,
        Command::Parisi(a) => resolve(CommandTag::Parisi, a)?,
        Command::Scan(a) => resolve(CommandTag::Scan, a)?,
        Command::Verify { common, suite } => ExperimentSpec { suite: Some(*suite), ..resolve(CommandTag::Verify, common)? },
        Command::Opnorm { common, q } => {
            let q = spec::parse_reals(q.as_deref().unwrap_or("3")).map_err(usage)?;
            if q.is_empty() {
                return Err(usage("empty q list".into()));
            }
            ExperimentSpec { q, ..resolve(CommandTag::Opnorm, common)? }
        }
        Command::Stability { common, delta } => {
            let delta = spec::parse_reals(delta.as_deref().unwrap_or("0,0.25,0.5")).map_err(usage)?;
            if delta.is_empty() || delta.iter().any(|d| *d < 0.0) {
                return Err(usage("delta must be a nonempty list of nonnegative reals".into()));
            }
            ExperimentSpec { delta, ..resolve(CommandTag::Stability, common)? }
        }
    })
}

/// Final status of a run that did not fault.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    /// Some verified property failed.
    Failed,
}

/// Runs a resolved spec.
pub fn run(spec: &ExperimentSpec) -> Result<Outcome, CliError> {
    let mut out = sink(&spec.out)?;
    let outcome = match spec.command {
        CommandTag::Solve => cmd_solve(spec, &mut out)?,
        CommandTag::Parisi => cmd_parisi(spec, &mut out)?,
        CommandTag::Scan => cmd_scan(spec, &mut out)?,
        CommandTag::Verify => verify::cmd_verify(spec, &mut out)?,
        CommandTag::Opnorm => cmd_opnorm(spec, &mut out)?,
        CommandTag::Stability => cmd_stability(spec, &mut out)?,
    };
    out.flush()?;
    Ok(outcome)
}

fn sink(path: &Option<String>) -> Result<Box<dyn Write>, CliError> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout())),
    })
}

/// CSV writer after the spec header line; rows are flushed as they are
/// produced so a fault leaves every finished row in place.
fn csv_writer<'a>(spec: &ExperimentSpec, out: &'a mut dyn Write) -> Result<csv::Writer<&'a mut dyn Write>, CliError> {
    writeln!(out, "{}", spec.header_line()?)?;
    Ok(csv::Writer::from_writer(out))
}

fn footer<T: Serialize>(w: csv::Writer<&mut dyn Write>, label: &str, value: &T) -> Result<(), CliError> {
    let out = w.into_inner().map_err(|e| io::Error::other(e.to_string()))?;
    writeln!(out, "# {label} {}", serde_json::to_string(value)?)?;
    Ok(())
}

fn require_nonempty(spec: &ExperimentSpec) -> Result<(), CliError> {
    if spec.seeds.is_empty() {
        return Err(usage("empty seed list".into()));
    }
    if spec.n.is_empty() || spec.p.is_empty() {
        return Err(usage("need at least one n and one p".into()));
    }
    Ok(())
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let m = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / m;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1.0);
    (mean, var.sqrt())
}

fn solve_config(spec: &ExperimentSpec) -> SolveConfig {
    SolveConfig { restarts: spec.restarts, ..SolveConfig::default() }
}

#[derive(Serialize)]
struct SolveRow {
    seed: u64,
    n: usize,
    p: f64,
    method: String,
    value: f64,
    normalized: f64,
    upper_bound: Option<f64>,
    kkt_residual: f64,
    restarts: usize,
}

impl SolveRow {
    fn new(r: SolveRecord, normalized: f64) -> Self {
        SolveRow {
            seed: r.seed,
            n: r.n,
            p: r.p,
            method: r.method,
            value: r.value,
            normalized,
            upper_bound: r.upper_bound,
            kkt_residual: r.kkt_residual,
            restarts: r.restarts,
        }
    }
}

#[derive(Serialize)]
struct SolveAggregate {
    n: usize,
    p: f64,
    samples: usize,
    mean_value: f64,
    std_value: f64,
    mean_normalized: f64,
    std_normalized: f64,
}

fn cmd_solve(spec: &ExperimentSpec, out: &mut dyn Write) -> Result<Outcome, CliError> {
    require_nonempty(spec)?;
    if let Some(p) = spec.p.iter().find(|p| **p < 1.0) {
        return Err(usage(format!("p must be at least 1, got {p}")));
    }
    let cfg = solve_config(spec);
    let mut w = csv_writer(spec, out)?;
    let mut collected: BTreeMap<(usize, usize), Vec<(f64, f64)>> = BTreeMap::new();
    for (ni, &n) in spec.n.iter().enumerate() {
        for &seed in &spec.seeds {
            let g = sample_matrix(n, seed)?;
            for (pi, &p) in spec.p.iter().enumerate() {
                let r = solve_lp(&g, p, &cfg)?;
                let normalized = r.value / normalization(n, p)?;
                w.serialize(SolveRow::new(SolveRecord::new(&g, p, &r), normalized))?;
                w.flush()?;
                collected.entry((ni, pi)).or_default().push((r.value, normalized));
            }
        }
    }
    let aggregates: Vec<SolveAggregate> = collected
        .into_iter()
        .map(|((ni, pi), v)| {
            let (mean_value, std_value) = mean_std(&v.iter().map(|x| x.0).collect::<Vec<_>>());
            let (mean_normalized, std_normalized) = mean_std(&v.iter().map(|x| x.1).collect::<Vec<_>>());
            SolveAggregate { n: spec.n[ni], p: spec.p[pi], samples: v.len(), mean_value, std_value, mean_normalized, std_normalized }
        })
        .collect();
    footer(w, "aggregate", &aggregates)?;
    Ok(Outcome::Success)
}

fn grid_config(spec: &ExperimentSpec) -> GridConfig {
    let mut g = GridConfig::default();
    if let Some(q) = spec.grid.get("quad_order") {
        g.quad_order = *q as usize;
    }
    if let Some(h) = spec.grid.get("grid_step") {
        g.grid_step = *h;
    }
    g
}

fn cmd_parisi(spec: &ExperimentSpec, out: &mut dyn Write) -> Result<Outcome, CliError> {
    if spec.p.is_empty() || spec.t.is_empty() {
        return Err(usage("need at least one p and one t".into()));
    }
    if let Some(p) = spec.p.iter().find(|p| **p <= 2.0) {
        return Err(usage(format!("the limit formula requires p > 2, got {p}")));
    }
    if let Some(t) = spec.t.iter().find(|t| **t <= 0.0) {
        return Err(usage(format!("penalties must be positive, got {t}")));
    }
    let cfg = OptConfig { grid: grid_config(spec), restarts: spec.restarts.clamp(1, 6), ..OptConfig::default() };
    let mut results = Vec::new();
    for &p in &spec.p {
        let entry = if spec.t.len() >= 3 {
            let rep = scaling_check(p, &spec.t, &cfg)?;
            let gps: Vec<f64> = rep.records.iter().map(|r| r.constant).collect();
            json!({
                "p": p,
                "GP_p": gps.iter().sum::<f64>() / gps.len() as f64,
                "records": rep.records,
                "scaling": {
                    "spread": rep.spread,
                    "slope": rep.slope,
                    "expected_slope": rep.expected_slope,
                    "pass": rep.pass,
                },
            })
        } else {
            let records = spec.t.iter().map(|&t| grothendieck_limit(p, t, &cfg)).collect::<Result<Vec<_>, _>>()?;
            let gps: Vec<f64> = records.iter().map(|r| r.constant).collect();
            let mean = gps.iter().sum::<f64>() / gps.len() as f64;
            let spread = (gps.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                - gps.iter().cloned().fold(f64::INFINITY, f64::min))
                / mean;
            json!({ "p": p, "GP_p": mean, "records": records, "scaling": null, "spread": spread })
        };
        results.push(entry);
    }
    for e in &results {
        if let Some(recs) = e["records"].as_array() {
            for r in recs {
                if r["diagnostics"]["converged"] == json!(false) {
                    eprintln!("warning: search at p = {}, t = {} did not converge", r["p"], r["t"]);
                }
            }
        }
    }
    serde_json::to_writer_pretty(&mut *out, &json!({ "spec": spec, "results": results }))?;
    writeln!(out)?;
    Ok(Outcome::Success)
}

/// Limit of the normalized value when it is known in closed form.
pub fn known_limit(p: f64) -> Option<f64> {
    if p == 1.0 {
        Some(1.0)
    } else if p > 1.0 && p < 2.0 {
        let ps = holder_conjugate(p).ok()?;
        Some(2f64.powf(0.5 - 2.0 / p) * gaussian_moment_norm(ps).ok()?)
    } else if p == 2.0 {
        Some(std::f64::consts::SQRT_2)
    } else {
        None
    }
}

#[derive(Serialize)]
struct ScanRow {
    p: f64,
    n: usize,
    samples: usize,
    mean_value: f64,
    mean_normalized: f64,
    std_normalized: f64,
    ratio_to_limit: Option<f64>,
    mean_sup_norm: f64,
}

fn sup_norm(r: &SolveResult) -> Result<f64, CliError> {
    Ok(lp_norm(r.best.entries(), f64::INFINITY, false)?)
}

fn cmd_scan(spec: &ExperimentSpec, out: &mut dyn Write) -> Result<Outcome, CliError> {
    require_nonempty(spec)?;
    let mut distinct = spec.n.clone();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 4 {
        return Err(AnalysisError::TooFewPoints { needed: 4, got: distinct.len() }.into());
    }
    if let Some(p) = spec.p.iter().find(|p| **p < 1.0) {
        return Err(usage(format!("p must be at least 1, got {p}")));
    }
    let cfg = solve_config(spec);
    let mut w = csv_writer(spec, out)?;
    let mut regressions = Vec::new();
    for &p in &spec.p {
        let mut all = Vec::new();
        let mut logs = (Vec::new(), Vec::new());
        for &n in &spec.n {
            let mut values = Vec::new();
            let mut normalized = Vec::new();
            let mut sups = Vec::new();
            for &seed in &spec.seeds {
                let g = sample_matrix(n, seed)?;
                let r = solve_lp(&g, p, &cfg)?;
                values.push(r.value);
                normalized.push(r.value / normalization(n, p)?);
                sups.push(sup_norm(&r)?);
                all.push(r);
            }
            let (mean_normalized, std_normalized) = mean_std(&normalized);
            logs.0.push((n as f64).ln());
            logs.1.push(mean_normalized.ln());
            w.serialize(ScanRow {
                p,
                n,
                samples: values.len(),
                mean_value: mean_std(&values).0,
                mean_normalized,
                std_normalized,
                ratio_to_limit: known_limit(p).map(|l| mean_normalized / l),
                mean_sup_norm: mean_std(&sups).0,
            })?;
            w.flush()?;
        }
        let convergence_slope = least_squares_slope(&logs.0, &logs.1);
        let delocalization = if p > 2.0 { Some(delocalization_fit(&all, p)?) } else { None };
        regressions.push(json!({
            "p": p,
            "normalized_log_slope": convergence_slope,
            "delocalization": delocalization,
        }));
    }
    footer(w, "regression", &regressions)?;
    Ok(Outcome::Success)
}

#[derive(Serialize)]
struct OpnormRow {
    seed: u64,
    n: usize,
    p: f64,
    q: f64,
    estimate: f64,
    chevet_lower: f64,
    chevet_upper: f64,
}

/// Monte Carlo draws behind the Gaussian widths of the Chevet bracket.
pub const CHEVET_DRAWS: usize = 2000;

fn cmd_opnorm(spec: &ExperimentSpec, out: &mut dyn Write) -> Result<Outcome, CliError> {
    require_nonempty(spec)?;
    let mut w = csv_writer(spec, out)?;
    let mut summary = Vec::new();
    for &n in &spec.n {
        let samples: Vec<MatrixSample> = spec.seeds.iter().map(|&s| sample_matrix(n, s)).collect::<Result<_, _>>()?;
        for &p in &spec.p {
            for &q in &spec.q {
                let bracket = chevet_bracket(n, p, q, CHEVET_DRAWS, spec.seeds[0])?;
                let mut estimates = Vec::new();
                for g in &samples {
                    let estimate = opnorm_estimate(g, p, q, spec.restarts)?;
                    estimates.push(estimate);
                    w.serialize(OpnormRow {
                        seed: g.seed,
                        n,
                        p,
                        q,
                        estimate,
                        chevet_lower: bracket.lower,
                        chevet_upper: bracket.upper,
                    })?;
                    w.flush()?;
                }
                let mean = mean_std(&estimates).0;
                summary.push(json!({
                    "n": n, "p": p, "q": q, "mean_estimate": mean, "bracket": bracket,
                    "inside": mean >= 0.95 * bracket.lower && mean <= 1.05 * bracket.upper,
                }));
            }
        }
    }
    footer(w, "aggregate", &summary)?;
    Ok(Outcome::Success)
}

#[derive(Serialize)]
struct StabilityRow {
    seed: u64,
    n: usize,
    p: f64,
    delta: f64,
    unrestricted: f64,
    restricted: Option<f64>,
    runs_kept: usize,
    runs_total: usize,
    bound: f64,
    below_bound: bool,
}

fn cmd_stability(spec: &ExperimentSpec, out: &mut dyn Write) -> Result<Outcome, CliError> {
    require_nonempty(spec)?;
    if let Some(p) = spec.p.iter().find(|p| !(**p > 1.0 && **p < 2.0)) {
        return Err(usage(format!("stability needs 1 < p < 2, got {p}")));
    }
    let solve_cfg = solve_config(spec);
    let cfg = StabilityConfig { starts: spec.restarts, ..StabilityConfig::default() };
    let mut w = csv_writer(spec, out)?;
    for &n in &spec.n {
        for &seed in &spec.seeds {
            let g = sample_matrix(n, seed)?;
            for &p in &spec.p {
                let solve = solve_lp(&g, p, &solve_cfg)?;
                let set = near_optimizers(&g, p)?;
                for &delta in &spec.delta {
                    let r = stability_event(&g, p, delta, &solve, &set, &cfg)?;
                    w.serialize(StabilityRow {
                        seed,
                        n,
                        p,
                        delta,
                        unrestricted: r.unrestricted,
                        restricted: r.restricted,
                        runs_kept: r.runs_kept,
                        runs_total: r.runs_total,
                        bound: r.bound,
                        below_bound: r.below_bound,
                    })?;
                    w.flush()?;
                }
            }
        }
    }
    Ok(Outcome::Success)
}

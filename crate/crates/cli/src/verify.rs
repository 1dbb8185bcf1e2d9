//! Property suites behind `verify`. Every check is seeded and reports a
//! margin that is nonnegative exactly when it passes.

use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use serde_json::json;

use lpgroth::analysis::{
    calibrated_deficiency_constant, chevet_bracket, deficient_l2_check, distance_to_signed_basis, holder_partner,
    holder_stability_battery, opnorm_estimate,
};
use lpgroth::boundary::{boundary_value, growth_envelope, BoundaryParams};
use lpgroth::core_math::{dot, holder_conjugate, lp_norm, sample_matrix, stream_rng, LpVector};
use lpgroth::parisi_pde::{pde_residual, solve_parisi_pde, AtomicMeasure, GridConfig};
use lpgroth::sde_verify::{simulate_control, verify as sde_verify, Control, SdeConfig};

use crate::{grid_config, CliError, ExperimentSpec, Outcome, Suite};

/// Result of one named property.
#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub suite: &'static str,
    pub name: String,
    pub pass: bool,
    pub margin: f64,
}

impl Check {
    fn new(suite: &'static str, name: impl Into<String>, margin: f64) -> Self {
        Check { suite, name: name.into(), pass: margin >= 0.0, margin }
    }
}

/// Runs the selected suites. Without `--out` one line per property goes to
/// standard output; with it a JSON report is written instead.
pub fn cmd_verify(spec: &ExperimentSpec, out: &mut dyn Write) -> Result<Outcome, CliError> {
    let seed = spec.seeds.first().copied().unwrap_or(0);
    let suite = spec.suite.unwrap_or(Suite::All);
    let grid = grid_config(spec);
    let mut checks = Vec::new();
    let wants = |s: Suite| suite == Suite::All || suite == s;
    if wants(Suite::Boundary) {
        checks.extend(boundary_suite());
    }
    if wants(Suite::Appendix) {
        checks.extend(appendix_suite(seed)?);
    }
    if wants(Suite::Pde) {
        checks.extend(pde_suite(&grid, seed)?);
    }
    if wants(Suite::Chevet) {
        checks.extend(chevet_suite(seed)?);
    }
    let all_pass = checks.iter().all(|c| c.pass);
    if spec.out.is_some() {
        serde_json::to_writer_pretty(&mut *out, &json!({ "spec": spec, "checks": checks, "pass": all_pass }))?;
        writeln!(out)?;
    } else {
        for c in &checks {
            writeln!(out, "{} {}/{} margin={:.3e}", if c.pass { "PASS" } else { "FAIL" }, c.suite, c.name, c.margin)?;
        }
        writeln!(out, "{} properties, {} failed", checks.len(), checks.iter().filter(|c| !c.pass).count())?;
    }
    Ok(if all_pass { Outcome::Success } else { Outcome::Failed })
}

fn boundary_suite() -> Vec<Check> {
    let mut envelope = f64::INFINITY;
    let mut even = f64::INFINITY;
    let mut convex = f64::INFINITY;
    for &p in &[2.5, 3.0, 4.0, 6.0] {
        for &t in &[0.5, 1.0, 2.0] {
            for &lam in &[-1.0, 0.0, 0.7] {
                let prm = match BoundaryParams::new(p, t, lam) {
                    Ok(b) => b,
                    Err(_) => continue,
                };
                let f = |x: f64| boundary_value(x, &prm).unwrap_or(f64::NAN);
                for k in -40..=40 {
                    let x = 0.25 * k as f64;
                    let v = f(x);
                    envelope = envelope.min(growth_envelope(x, &prm) * (1.0 + 1e-12) + 1e-12 - v);
                    even = even.min(1e-10 * (1.0 + v.abs()) - (v - f(-x)).abs());
                    let mid = f(x + 0.1);
                    convex = convex.min(0.5 * (f(x) + f(x + 0.2)) - mid + 1e-10 * (1.0 + mid.abs()));
                }
            }
        }
    }
    vec![
        Check::new("boundary", "below_growth_envelope", nan_fails(envelope)),
        Check::new("boundary", "even", nan_fails(even)),
        Check::new("boundary", "midpoint_convex", nan_fails(convex)),
    ]
}

fn nan_fails(m: f64) -> f64 {
    if m.is_nan() {
        f64::NEG_INFINITY
    } else {
        m
    }
}

fn appendix_suite(seed: u64) -> Result<Vec<Check>, CliError> {
    let mut checks = Vec::new();
    for &n in &[4usize, 32, 256] {
        for &p in &[1.1, 1.5, 1.9] {
            let rep = holder_stability_battery(1000, n, p, seed)?;
            let margin = if rep.failures == 0 { rep.min_margin.max(0.0) } else { -(rep.failures as f64) };
            checks.push(Check::new("appendix", format!("holder_stability n={n} p={p}"), margin));
        }
    }
    let mut equality = f64::INFINITY;
    for k in 0..200u64 {
        let mut rng = stream_rng(seed, k);
        let n = rng.random_range(2..=64);
        let p = rng.random_range(1.05..1.95);
        let w: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let v = holder_partner(&w, p)?;
        let wn = lp_norm(&w, holder_conjugate(p)?, false)?;
        equality = equality.min(1e-10 * wn - (dot(&v, &w) - wn).abs());
    }
    checks.push(Check::new("appendix", "holder_equality", equality));
    for &p in &[1.1, 1.5, 1.9] {
        let c = calibrated_deficiency_constant(p)?;
        let mut margin = f64::INFINITY;
        for k in 0..300u64 {
            let mut rng = stream_rng(seed ^ 0x5eed, k);
            let n = rng.random_range(2..=32);
            let support = rng.random_range(2..=n);
            let mut x = vec![0.0; n];
            for v in x.iter_mut().take(support) {
                *v = StandardNormal.sample(&mut rng);
            }
            let x = LpVector::new(x)?.unit(p)?;
            let delta = distance_to_signed_basis(&x, p)?;
            if delta > 0.0 {
                margin = margin.min(deficient_l2_check(&x, p, delta, c)?.margin);
            }
        }
        checks.push(Check::new("appendix", format!("deficient_l2 p={p}"), margin));
    }
    Ok(checks)
}

fn pde_suite(grid: &GridConfig, seed: u64) -> Result<Vec<Check>, CliError> {
    let mut checks = Vec::new();
    let prm = BoundaryParams::new(4.0, 1.0, 0.5)?;
    let gamma = AtomicMeasure::new(0.6, &[0.2, 0.45], &[0.2, 0.9, 2.0])?;
    let probes = [(0.1, 0.0), (0.1, 0.7), (0.32, -0.4), (0.5, 0.8), (0.52, 1.5)];
    let mut fine = solve_parisi_pde(&gamma, &prm, grid)?;
    let coarse_grid = GridConfig { grid_step: 2.0 * grid.grid_step, ..*grid };
    let mut coarse = solve_parisi_pde(&gamma, &prm, &coarse_grid)?;
    let rf = pde_residual(&mut fine, &probes, None)?;
    let rc = pde_residual(&mut coarse, &probes, None)?;
    checks.push(Check::new("pde", "residual", 1e-3 - rf));
    let ratio = rc / rf;
    checks.push(Check::new("pde", format!("second_order ratio={ratio:.3}"), (ratio - 3.2).min(4.8 - ratio)));
    let doubled = GridConfig { quad_order: 2 * grid.quad_order, ..*grid };
    let v2 = solve_parisi_pde(&gamma, &prm, &doubled)?.value_at_origin;
    checks.push(Check::new("pde", "quadrature_doubling", 1e-6 - (v2 - fine.value_at_origin).abs()));

    let sde_gamma = AtomicMeasure::new(0.5, &[0.2], &[0.8, 2.0])?;
    let mut sol = solve_parisi_pde(&sde_gamma, &BoundaryParams::new(4.0, 1.0, 0.2)?, grid)?;
    let cfg = SdeConfig { steps: 64, paths: 4000, seed };
    let rec = sde_verify(&mut sol, &cfg, 1e-3)?;
    checks.push(Check::new(
        "pde",
        "sde_optimal_control",
        3.0 * rec.stderr + 1e-3 - (rec.psi_sde_mean - rec.psi_pde).abs(),
    ));
    let zero = simulate_control(&mut sol, Control::Zero, &cfg)?;
    checks.push(Check::new("pde", "sde_zero_control", sol.value_at_origin + 3.0 * zero.stderr - zero.mean));
    Ok(checks)
}

fn chevet_suite(seed: u64) -> Result<Vec<Check>, CliError> {
    let n = 256;
    let samples: Vec<_> = (0..4).map(|s| sample_matrix(n, seed + s)).collect::<Result<_, _>>()?;
    let mut checks = Vec::new();
    for &(p, q) in &[(1.5, 3.0), (1.0, 2.0), (2.0, 2.0)] {
        let b = chevet_bracket(n, p, q, crate::CHEVET_DRAWS, seed)?;
        let mut sum = 0.0;
        for g in &samples {
            sum += opnorm_estimate(g, p, q, 8)?;
        }
        let mean = sum / samples.len() as f64;
        let margin = (mean - 0.95 * b.lower).min(1.05 * b.upper - mean) / b.upper;
        checks.push(Check::new("chevet", format!("sandwich p={p} q={q}"), margin));
    }
    Ok(checks)
}

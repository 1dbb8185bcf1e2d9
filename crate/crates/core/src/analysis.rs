//! Structural diagnostics of finite-n optimizers: the localized/delocalized
//! split, distance to the near-optimizer set, stability of distance-restricted
//! maxima, delocalization exponents, operator-norm estimates with their
//! Gaussian-width brackets, and the two sphere inequalities used for
//! stability (as checkable predicates).

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::core_math::{dot, gaussian_moment_norm, holder_conjugate, lp_norm, stream_rng, LpVector, MathError, MatrixSample};
use crate::finite_solver::{
    lanczos_top_with, random_start, sphere_ascent_many, AscentConfig, NearOptimizerSet, SolveResult, SolverError,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("threshold must be positive and finite, got {0}")]
    InvalidThreshold(f64),
    #[error("exponent {0} is outside the supported range")]
    UnsupportedExponent(f64),
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Math(#[from] MathError),
}

/// Entrywise split `x = x_deloc + x_loc` at a threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    /// Entries with `|x_i| <= epsilon`.
    pub x_deloc: LpVector,
    /// Entries with `|x_i| > epsilon`.
    pub x_loc: LpVector,
    pub epsilon: f64,
}

/// Truncation level `n^{-2/(p p*)}` for `1 < p < inf`.
pub fn default_threshold(n: usize, p: f64) -> Result<f64, AnalysisError> {
    if !(p > 1.0 && p.is_finite()) {
        return Err(AnalysisError::UnsupportedExponent(p));
    }
    let ps = holder_conjugate(p)?;
    Ok((n as f64).powf(-2.0 / (p * ps)))
}

pub fn decompose(x: &LpVector, epsilon: f64) -> Result<Decomposition, AnalysisError> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(AnalysisError::InvalidThreshold(epsilon));
    }
    let (deloc, loc): (Vec<f64>, Vec<f64>) = x
        .entries()
        .iter()
        .map(|&v| if v.abs() <= epsilon { (v, 0.0) } else { (0.0, v) })
        .unzip();
    Ok(Decomposition {
        x_deloc: LpVector::new(deloc)?,
        x_loc: LpVector::new(loc)?,
        epsilon,
    })
}

/// Closest signed near-optimizer in `l_p` distance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NearestOptimizer {
    pub distance: f64,
    pub index: usize,
    pub sign: f64,
}

/// Minimum of `||x - s o_i||_p` over the `2n` signed near-optimizers (ties
/// go to the smaller index, then to `+`).
pub fn dist_to_o(x: &LpVector, set: &NearOptimizerSet) -> Result<NearestOptimizer, AnalysisError> {
    if x.dim() != set.n {
        return Err(AnalysisError::DimensionMismatch { expected: set.n, got: x.dim() });
    }
    let p = set.p;
    let xs = x.entries();
    let candidates: Vec<NearestOptimizer> = (0..set.n)
        .into_par_iter()
        .flat_map_iter(|i| {
            let o = set.base(i);
            [1.0, -1.0].into_iter().map(move |sign| {
                let sum: f64 = xs.iter().zip(o).map(|(a, b)| (a - sign * b).abs().powf(p)).sum();
                NearestOptimizer { distance: sum.powf(1.0 / p), index: i, sign }
            })
        })
        .collect();
    Ok(candidates
        .into_iter()
        .reduce(|a, b| if b.distance < a.distance { b } else { a })
        .expect("nonempty set"))
}

/// Constants of the stability bound. They exist but are not explicit, so
/// these are empirical and carry no guarantee.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityConstants {
    pub c1: f64,
    pub c2: f64,
}

impl Default for StabilityConstants {
    fn default() -> Self {
        StabilityConstants { c1: 0.1, c2: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityConfig {
    /// Random ascent starts; each must start at least `delta` from the set.
    pub starts: usize,
    pub ascent: AscentConfig,
    pub constants: StabilityConstants,
}

impl Default for StabilityConfig {
    fn default() -> Self {
        StabilityConfig {
            starts: 8,
            ascent: AscentConfig { max_iterations: 500, ..AscentConfig::default() },
            constants: StabilityConstants::default(),
        }
    }
}

/// Outcome of a distance-restricted search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub n: usize,
    pub p: f64,
    pub delta: f64,
    /// Value of the unrestricted solve.
    pub unrestricted: f64,
    /// Best value among runs that ended at least `delta` from the set.
    pub restricted: Option<f64>,
    pub runs_kept: usize,
    pub runs_total: usize,
    /// `2^{1/2-2/p} (1 - c1 delta^6) xi_{p*} n^{1/p*} + c2 n^{p/(2p*)} sqrt(log n)`.
    pub bound: f64,
    pub below_bound: bool,
}

/// Ascent from random starts, keeping only runs that end at least `delta`
/// away from the near-optimizer set. At `delta = 0` every run counts and the
/// unrestricted solve is included.
pub fn stability_event(
    g: &MatrixSample,
    p: f64,
    delta: f64,
    solve: &SolveResult,
    set: &NearOptimizerSet,
    cfg: &StabilityConfig,
) -> Result<StabilityReport, AnalysisError> {
    if !(p > 1.0 && p < 2.0) {
        return Err(AnalysisError::UnsupportedExponent(p));
    }
    if !(delta >= 0.0 && delta.is_finite()) {
        return Err(AnalysisError::InvalidThreshold(delta));
    }
    let mut starts = Vec::new();
    for r in 0..cfg.starts {
        let x = LpVector::new(random_start(g, r))?.unit(p)?;
        if dist_to_o(&x, set)?.distance >= delta {
            starts.push(x);
        }
    }
    let mut restricted: Option<f64> = None;
    let mut kept = 0;
    for r in sphere_ascent_many(g, p, &starts, &cfg.ascent)? {
        let r = match r {
            Ok(r) => r,
            Err(SolverError::Stalled(_)) => continue,
            Err(e) => return Err(e.into()),
        };
        if dist_to_o(&r.best, set)?.distance >= delta {
            kept += 1;
            restricted = Some(restricted.map_or(r.value, |v: f64| v.max(r.value)));
        }
    }
    if delta == 0.0 {
        restricted = Some(restricted.map_or(solve.value, |v| v.max(solve.value)));
    }
    let n = g.n as f64;
    let ps = holder_conjugate(p)?;
    let k = &cfg.constants;
    let bound = 2f64.powf(0.5 - 2.0 / p) * (1.0 - k.c1 * delta.powi(6)) * gaussian_moment_norm(ps)? * n.powf(1.0 / ps)
        + k.c2 * n.powf(p / (2.0 * ps)) * n.ln().sqrt();
    Ok(StabilityReport {
        n: g.n,
        p,
        delta,
        unrestricted: solve.value,
        restricted,
        runs_kept: kept,
        runs_total: cfg.starts,
        bound,
        below_bound: restricted.is_none_or(|v| v <= bound),
    })
}

/// Least-squares fit of `log ||x*||_inf` against `log n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelocalizationFit {
    pub p: f64,
    pub slope: f64,
    pub intercept: f64,
    /// `1/(p + delta) - 1/p` with `delta = p/2 - 1`.
    pub bound_exponent: f64,
    /// `slope <= bound_exponent + 0.05`.
    pub within_bound: bool,
    pub points: Vec<(usize, f64)>,
}

/// Exponent `1/(p + delta) - 1/p`, `delta = p/2 - 1`.
pub fn delocalization_exponent(p: f64) -> f64 {
    let delta = p / 2.0 - 1.0;
    1.0 / (p + delta) - 1.0 / p
}

/// Fits the decay of the largest entry of maximizers across dimensions.
pub fn delocalization_fit(results: &[SolveResult], p: f64) -> Result<DelocalizationFit, AnalysisError> {
    if !(p > 2.0 && p.is_finite()) {
        return Err(AnalysisError::UnsupportedExponent(p));
    }
    let points: Vec<(usize, f64)> = results
        .iter()
        .map(|r| (r.best.dim(), lp_norm(r.best.entries(), f64::INFINITY, false).unwrap_or(0.0)))
        .collect();
    let (slope, intercept) = fit_line(&points.iter().map(|&(n, s)| ((n as f64).ln(), s.ln())).collect::<Vec<_>>())?;
    let bound_exponent = delocalization_exponent(p);
    Ok(DelocalizationFit {
        p,
        slope,
        intercept,
        bound_exponent,
        within_bound: slope <= bound_exponent + 0.05,
        points,
    })
}

/// Ordinary least squares `y = slope x + intercept`; needs four distinct points.
fn fit_line(xy: &[(f64, f64)]) -> Result<(f64, f64), AnalysisError> {
    if xy.len() < 4 {
        return Err(AnalysisError::TooFewPoints { needed: 4, got: xy.len() });
    }
    let m = xy.len() as f64;
    let mx = xy.iter().map(|p| p.0).sum::<f64>() / m;
    let my = xy.iter().map(|p| p.1).sum::<f64>() / m;
    let sxx: f64 = xy.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = xy.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        return Err(AnalysisError::TooFewPoints { needed: 4, got: 1 });
    }
    let slope = sxy / sxx;
    Ok((slope, my - slope * mx))
}

/// Unit `l_r` vector `y` with `<w, y> = ||w||_{r*}` (the Hölder equality
/// case). `r = 1` puts a signed spike at the largest `|w_i|`, `r = inf`
/// returns `sgn(w)`.
pub fn norming_vector(w: &[f64], r: f64) -> Result<Vec<f64>, AnalysisError> {
    let rs = holder_conjugate(r)?;
    let mut y = vec![0.0; w.len()];
    let scale = lp_norm(w, f64::INFINITY, false)?;
    if scale == 0.0 {
        if !y.is_empty() {
            y[0] = 1.0;
        }
        return Ok(y);
    }
    if r == 1.0 {
        let (k, _) = w
            .iter()
            .enumerate()
            .fold((0, -1.0), |acc, (i, v)| if v.abs() > acc.1 { (i, v.abs()) } else { acc });
        y[k] = w[k].signum();
    } else if r.is_infinite() {
        y.iter_mut().zip(w).for_each(|(yi, wi)| *yi = if *wi == 0.0 { 0.0 } else { wi.signum() });
    } else {
        y.iter_mut()
            .zip(w)
            .for_each(|(yi, wi)| *yi = wi.signum() * (wi.abs() / scale).powf(rs - 1.0));
        let norm = lp_norm(&y, r, false)?;
        y.iter_mut().for_each(|v| *v /= norm);
    }
    Ok(y)
}

/// Iteration cap of one alternating run.
const OPNORM_MAX_ITERATIONS: usize = 1000;
/// Relative gain below which an alternating run stops.
const OPNORM_TOLERANCE: f64 = 1e-10;
/// First RNG stream of the operator-norm starts.
const OPNORM_STREAM_BASE: u64 = 1 << 24;

/// Lower estimate of `||G||_{p->q} = sup_{||x||_p = 1} ||G x||_q`.
///
/// `p = 1` is an exact column scan, `q = inf` an exact row scan and
/// `p = q = 2` a Lanczos estimate of the top singular value. Other
/// pairs alternate the two Hölder-equality half steps `y = J(Gx)`,
/// `x = J(G^T y)`, each of which cannot decrease `<y, G x>`, from the best
/// column and from `restarts` random starts.
pub fn opnorm_estimate(g: &MatrixSample, p: f64, q: f64, restarts: usize) -> Result<f64, AnalysisError> {
    let n = g.n;
    let qs = holder_conjugate(q)?;
    holder_conjugate(p)?;
    let column = |j: usize| -> Vec<f64> { (0..n).map(|i| g.g_at(i, j)).collect() };
    if p == 1.0 {
        return Ok((0..n).map(|j| lp_norm(&column(j), q, false).unwrap_or(0.0)).fold(0.0, f64::max));
    }
    if q.is_infinite() {
        let ps = holder_conjugate(p)?;
        return Ok((0..n)
            .map(|i| lp_norm(&g.g[i * n..(i + 1) * n], ps, false).unwrap_or(0.0))
            .fold(0.0, f64::max));
    }
    if p == 2.0 && q == 2.0 {
        // Largest singular value: Lanczos on G^T G.
        let mut tmp = vec![0.0; n];
        let (theta, _) = lanczos_top_with(
            n,
            |x, out| {
                g.g_apply(x, &mut tmp);
                g.g_apply_transpose(&tmp, out);
            },
            g.seed,
            OPNORM_STREAM_BASE - 1,
        )?;
        return Ok(theta.max(0.0).sqrt());
    }
    let best_col = (0..n)
        .map(|j| (j, lp_norm(&column(j), q, false).unwrap_or(0.0)))
        .fold((0, -1.0), |a, b| if b.1 > a.1 { b } else { a })
        .0;
    let mut starts = vec![LpVector::basis(n, best_col)?.into_entries()];
    for r in 0..restarts {
        let mut rng = stream_rng(g.seed, OPNORM_STREAM_BASE + r as u64);
        starts.push((0..n).map(|_| StandardNormal.sample(&mut rng)).collect());
    }
    let mut best: f64 = 0.0;
    let mut gx = vec![0.0; n];
    let mut gty = vec![0.0; n];
    for start in starts {
        let x = LpVector::new(start)?.unit(p)?.into_entries();
        g.g_apply(&x, &mut gx);
        let mut value = lp_norm(&gx, q, false)?;
        for _ in 0..OPNORM_MAX_ITERATIONS {
            let y = norming_vector(&gx, qs)?;
            g.g_apply_transpose(&y, &mut gty);
            let x = norming_vector(&gty, p)?;
            g.g_apply(&x, &mut gx);
            let next = lp_norm(&gx, q, false)?;
            let done = next <= value * (1.0 + OPNORM_TOLERANCE);
            value = value.max(next);
            if done {
                break;
            }
        }
        best = best.max(value);
    }
    Ok(best)
}

/// Gaussian-width bracket `[max(w_S r_T, w_T r_S), w_S r_T + w_T r_S]` of
/// the expected `p -> q` norm, with `S = B_p`, `T = B_{q*}`,
/// `r(B_r) = n^{(1/2 - 1/r)_+}` and `w(B_r) = E ||g||_{r*}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChevetBracket {
    pub lower: f64,
    pub upper: f64,
    pub width_s: f64,
    pub radius_s: f64,
    pub width_t: f64,
    pub radius_t: f64,
}

/// Euclidean radius of the unit `l_r` ball in `n` dimensions.
pub fn ball_radius(n: usize, r: f64) -> f64 {
    let e = 0.5 - if r.is_infinite() { 0.0 } else { 1.0 / r };
    (n as f64).powf(e.max(0.0))
}

/// Monte Carlo estimate of `E ||g||_s` from `draws` standard Gaussian vectors.
pub fn expected_gaussian_norm(n: usize, s: f64, draws: usize, seed: u64) -> Result<f64, AnalysisError> {
    let total: f64 = (0..draws)
        .into_par_iter()
        .map(|d| {
            let mut rng = stream_rng(seed, d as u64);
            let g: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            lp_norm(&g, s, false).unwrap_or(f64::NAN)
        })
        .collect::<Vec<f64>>()
        .iter()
        .sum();
    Ok(total / draws as f64)
}

/// Large-`n` width `E ||g||_s`: `sqrt(2 log n)` at `s = inf`, else
/// `xi_s n^{1/s}`.
pub fn asymptotic_gaussian_norm(n: usize, s: f64) -> Result<f64, AnalysisError> {
    if s.is_infinite() {
        return Ok((2.0 * (n as f64).ln()).sqrt());
    }
    Ok(gaussian_moment_norm(s)? * (n as f64).powf(1.0 / s))
}

pub fn chevet_bracket(n: usize, p: f64, q: f64, draws: usize, seed: u64) -> Result<ChevetBracket, AnalysisError> {
    let ps = holder_conjugate(p)?;
    let qs = holder_conjugate(q)?;
    let width_s = expected_gaussian_norm(n, ps, draws, seed)?;
    let width_t = if (q - ps).abs() < 1e-15 {
        width_s
    } else {
        expected_gaussian_norm(n, q, draws, seed ^ 0x5eed)?
    };
    let radius_s = ball_radius(n, p);
    let radius_t = ball_radius(n, qs);
    Ok(ChevetBracket {
        lower: (width_s * radius_t).max(width_t * radius_s),
        upper: width_s * radius_t + width_t * radius_s,
        width_s,
        radius_s,
        width_t,
        radius_t,
    })
}

/// Result of one stability inequality check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InequalityCheck {
    pub passes: bool,
    /// Right side minus left side (nonnegative when the inequality holds).
    pub margin: f64,
}

/// Unit `l_p` vector `v` with `sgn(v_i)|v_i|^p = sgn(w_i)|w_i|^{p*}/||w||_{p*}^{p*}`.
pub fn holder_partner(w: &[f64], p: f64) -> Result<Vec<f64>, AnalysisError> {
    norming_vector(w, p)
}

/// Stability constant `p^2 / (16 p*)`.
pub fn holder_stability_constant(p: f64) -> Result<f64, AnalysisError> {
    Ok(p * p / (16.0 * holder_conjugate(p)?))
}

/// Checks `<u, w> <= ||w||_{p*} (1 - (p^2/(16 p*)) ||u - v||_p^2)` for unit `u`.
pub fn holder_stability_check(u: &LpVector, w: &LpVector, p: f64) -> Result<InequalityCheck, AnalysisError> {
    if !(p > 1.0 && p <= 2.0) {
        return Err(AnalysisError::UnsupportedExponent(p));
    }
    if u.dim() != w.dim() {
        return Err(AnalysisError::DimensionMismatch { expected: u.dim(), got: w.dim() });
    }
    let un = u.norm(p, false)?;
    if (un - 1.0).abs() > 1e-9 {
        return Err(AnalysisError::Precondition(format!("||u||_p = {un}, expected 1")));
    }
    let ps = holder_conjugate(p)?;
    let wn = w.norm(ps, false)?;
    if wn == 0.0 {
        return Err(AnalysisError::Precondition("w must be nonzero".into()));
    }
    let v = holder_partner(w.entries(), p)?;
    let diff: Vec<f64> = u.entries().iter().zip(&v).map(|(a, b)| a - b).collect();
    let d = lp_norm(&diff, p, false)?;
    let rhs = wn * (1.0 - holder_stability_constant(p)? * d * d);
    let margin = rhs - dot(u.entries(), w.entries());
    Ok(InequalityCheck { passes: margin >= -1e-12 * wn, margin })
}

/// Summary of a randomized battery.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatteryReport {
    pub trials: usize,
    pub failures: usize,
    pub min_margin: f64,
}

/// Random `(u, w)` pairs: Gaussian `w`, and `u` either an independent unit
/// vector, a small perturbation of the partner `v`, or a sparse vector.
pub fn holder_stability_battery(trials: usize, n: usize, p: f64, seed: u64) -> Result<BatteryReport, AnalysisError> {
    let checks: Vec<Result<InequalityCheck, AnalysisError>> = (0..trials)
        .into_par_iter()
        .map(|k| {
            let mut rng = stream_rng(seed, k as u64);
            let w: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            let raw: Vec<f64> = match k % 3 {
                0 => (0..n).map(|_| StandardNormal.sample(&mut rng)).collect(),
                1 => {
                    let v = holder_partner(&w, p)?;
                    let eps = 10f64.powf(rng.random_range(-6.0..0.0));
                    v.iter()
                        .map(|x| {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            x + eps * z
                        })
                        .collect()
                }
                _ => {
                    let mut x = vec![0.0; n];
                    let support = rng.random_range(1..=n.min(3));
                    for _ in 0..support {
                        x[rng.random_range(0..n)] = StandardNormal.sample(&mut rng);
                    }
                    if x.iter().all(|v| *v == 0.0) {
                        x[0] = 1.0;
                    }
                    x
                }
            };
            let u = LpVector::new(raw)?.unit(p)?;
            holder_stability_check(&u, &LpVector::new(w)?, p)
        })
        .collect();
    let mut failures = 0;
    let mut min_margin = f64::INFINITY;
    for c in checks {
        let c = c?;
        if !c.passes {
            failures += 1;
        }
        min_margin = min_margin.min(c.margin);
    }
    Ok(BatteryReport { trials, failures, min_margin })
}

/// `min_i min(||x - e_i||_p, ||x + e_i||_p)`.
pub fn distance_to_signed_basis(x: &LpVector, p: f64) -> Result<f64, AnalysisError> {
    let xs = x.entries();
    let base: f64 = xs.iter().map(|v| v.abs().powf(p)).sum();
    let best = xs
        .iter()
        .map(|&v| {
            // Replace entry i by |x_i| - 1 (the nearer sign).
            base - v.abs().powf(p) + (v.abs() - 1.0).abs().powf(p)
        })
        .fold(f64::INFINITY, f64::min);
    Ok(best.max(0.0).powf(1.0 / p))
}

/// Worst ratio `(1 - ||x||_2) / delta(x)^p` along the two-coordinate family
/// `(a, b)` with `a^p + b^p = 1`, where `delta(x)` is the distance to the
/// signed basis. Flat and spread vectors sit far above this ratio.
pub fn two_coordinate_deficiency(p: f64, samples: usize) -> Result<f64, AnalysisError> {
    if !(p > 1.0 && p < 2.0) {
        return Err(AnalysisError::UnsupportedExponent(p));
    }
    let mut worst = f64::INFINITY;
    for k in 1..samples {
        let b = (k as f64 / samples as f64) * 2f64.powf(-1.0 / p);
        let a = (1.0 - b.powf(p)).powf(1.0 / p);
        let x = LpVector::new(vec![a, b])?;
        let delta = distance_to_signed_basis(&x, p)?;
        let deficit = 1.0 - (a * a + b * b).sqrt();
        if delta > 0.0 {
            worst = worst.min(deficit / delta.powf(p));
        }
    }
    Ok(worst)
}

/// Empirical constant for the deficient-`l_2` check: half the worst
/// two-coordinate ratio.
pub fn calibrated_deficiency_constant(p: f64) -> Result<f64, AnalysisError> {
    Ok(0.5 * two_coordinate_deficiency(p, 4000)?)
}

/// Checks `||x||_2 <= 1 - c delta^p` for a unit `x` at distance at least
/// `delta` from every `+-e_i`.
pub fn deficient_l2_check(x: &LpVector, p: f64, delta: f64, c: f64) -> Result<InequalityCheck, AnalysisError> {
    if !(p > 1.0 && p < 2.0) {
        return Err(AnalysisError::UnsupportedExponent(p));
    }
    let xn = x.norm(p, false)?;
    if (xn - 1.0).abs() > 1e-9 {
        return Err(AnalysisError::Precondition(format!("||x||_p = {xn}, expected 1")));
    }
    let dist = distance_to_signed_basis(x, p)?;
    if dist < delta {
        return Err(AnalysisError::Precondition(format!("distance {dist} to the signed basis is below {delta}")));
    }
    let margin = 1.0 - c * delta.powf(p) - x.norm(2.0, false)?;
    Ok(InequalityCheck { passes: margin >= -1e-12, margin })
}

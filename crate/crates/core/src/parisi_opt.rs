//! Minimization of the Parisi-type functional over atomic measures and the
//! outer maximization over the overlap `u`.
//!
//! Measures are searched in scale-free coordinates (`q / u`, `m * u`), which
//! makes every search covariant under the exact rescaling of `(u, t)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::parisi_pde::{parisi_functional, AtomicMeasure, GridConfig, PdeError};

/// Largest number of interior atoms accepted by the minimizer.
pub const MAX_ATOMS: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptError {
    #[error("exponent must satisfy 2 < p < inf, got {0}")]
    InvalidExponent(f64),
    #[error("penalty must be positive and finite, got {0}")]
    InvalidPenalty(f64),
    #[error("overlap must be positive and finite, got {0}")]
    InvalidOverlap(f64),
    #[error("at most {MAX_ATOMS} atoms are supported, got {0}")]
    TooManyAtoms(usize),
    #[error("no starting point produced a finite functional value")]
    NoFiniteStart,
    #[error("maximum over u sits at the upper end u_max = {0}; bracket too small")]
    MaximumAtBracketEdge(f64),
    #[error("need at least three penalties for the scaling check, got {0}")]
    TooFewPenalties(usize),
    #[error(transparent)]
    Pde(#[from] PdeError),
}

/// Search controls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptConfig {
    /// Discretization of the reported values.
    pub grid: GridConfig,
    /// Coarser spatial step used inside the simplex searches.
    pub search_grid_step: f64,
    /// Seeded starting points per atom count (at most six).
    pub restarts: usize,
    /// Relative improvement below which a simplex search has converged.
    pub tolerance: f64,
    /// Largest atom count tried when escalating.
    pub max_k: usize,
    /// Relative improvement below which escalation in `k` stops.
    pub escalation_tolerance: f64,
    /// Evaluation cap per simplex search.
    pub max_evaluations: usize,
    /// Relative width in `log u` at which the golden-section search stops.
    pub u_tolerance: f64,
}

impl Default for OptConfig {
    fn default() -> Self {
        OptConfig {
            grid: GridConfig::default(),
            search_grid_step: 1e-2,
            restarts: 5,
            tolerance: 1e-7,
            max_k: 3,
            escalation_tolerance: 1e-5,
            max_evaluations: 4000,
            u_tolerance: 5e-3,
        }
    }
}

impl OptConfig {
    fn search_grid(&self) -> GridConfig {
        GridConfig {
            grid_step: self.search_grid_step,
            ..self.grid
        }
    }
}

/// A minimizer of the functional at fixed `(p, t, u, k)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParisiPoint {
    pub p: f64,
    pub t: f64,
    pub u: f64,
    pub lambda: f64,
    /// Interior breakpoints `q_1 < .. < q_k`.
    pub q: Vec<f64>,
    /// Heights `m_0 <= .. <= m_k`.
    pub m: Vec<f64>,
    /// Functional value at `grid`.
    pub value: f64,
    pub grid: GridConfig,
    pub evaluations: usize,
    pub converged: bool,
}

impl ParisiPoint {
    pub fn k(&self) -> usize {
        self.q.len()
    }

    pub fn measure(&self) -> Result<AtomicMeasure, PdeError> {
        AtomicMeasure::new(self.u, &self.q, &self.m)
    }

    /// Scale-free coordinates of this point for `k` atoms.
    fn coordinates(&self) -> Vec<f64> {
        let u = self.u;
        let k = self.q.len();
        let mut theta = vec![self.lambda];
        let breaks: Vec<f64> = std::iter::once(0.0)
            .chain(self.q.iter().copied())
            .chain(std::iter::once(u))
            .collect();
        let g0 = (breaks[1] - breaks[0]).max(1e-300);
        for l in 1..=k {
            theta.push(((breaks[l + 1] - breaks[l]).max(1e-300) / g0).ln());
        }
        theta.push((self.m[0] * u).sqrt());
        for l in 1..=k {
            theta.push(((self.m[l] - self.m[l - 1]) * u).max(0.0).sqrt());
        }
        theta
    }
}

/// Decoded measure parameters from scale-free coordinates.
fn decode(theta: &[f64], k: usize, u: f64) -> (f64, Vec<f64>, Vec<f64>) {
    let lambda = theta[0];
    let logs: Vec<f64> = std::iter::once(0.0).chain(theta[1..=k].iter().copied()).collect();
    let top = logs.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let weights: Vec<f64> = logs.iter().map(|l| (l - top).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut q = Vec::with_capacity(k);
    let mut acc = 0.0;
    for w in &weights[..k] {
        acc += w / total;
        q.push(u * acc);
    }
    let mut m = Vec::with_capacity(k + 1);
    let mut scaled = theta[k + 1] * theta[k + 1];
    m.push(scaled / u);
    for l in 1..=k {
        scaled += theta[k + 1 + l] * theta[k + 1 + l];
        m.push(scaled / u);
    }
    (lambda, q, m)
}

fn functional_at(theta: &[f64], k: usize, p: f64, t: f64, u: f64, grid: &GridConfig) -> f64 {
    let (lambda, q, m) = decode(theta, k, u);
    let value = AtomicMeasure::new(u, &q, &m)
        .and_then(|g| parisi_functional(lambda, &g, p, t, grid));
    match value {
        Ok(v) if v.is_finite() => v,
        _ => f64::INFINITY,
    }
}

/// Outcome of a simplex search.
struct SimplexResult {
    x: Vec<f64>,
    f: f64,
    evaluations: usize,
    converged: bool,
}

/// Nelder-Mead with dimension-adapted coefficients. Restarts from the best
/// vertex until a fresh simplex improves the value by less than `tol`.
fn nelder_mead<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    x0: &[f64],
    steps: &[f64],
    tol: f64,
    max_evals: usize,
) -> SimplexResult {
    let n = x0.len();
    let nf = n as f64;
    let (alpha, beta, gamma, delta) = (1.0, 1.0 + 2.0 / nf, 0.75 - 0.5 / nf, 1.0 - 1.0 / nf);
    let mut evals = 0;
    let mut best_x = x0.to_vec();
    let mut best_f = f(x0);
    evals += 1;
    let mut converged = false;
    let mut scale = 1.0;
    while evals < max_evals {
        let start_f = best_f;
        let mut simplex: Vec<(Vec<f64>, f64)> = vec![(best_x.clone(), best_f)];
        for i in 0..n {
            let mut v = best_x.clone();
            v[i] += scale * steps[i];
            let fv = f(&v);
            evals += 1;
            simplex.push((v, fv));
        }
        let mut inner_converged = false;
        while evals < max_evals {
            simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
            let fb = simplex[0].1;
            let fw = simplex[n].1;
            if fw.is_finite() && (fw - fb).abs() <= tol * fb.abs().max(1e-12) {
                inner_converged = true;
                break;
            }
            let mut centroid = vec![0.0; n];
            for (v, _) in &simplex[..n] {
                for (c, vi) in centroid.iter_mut().zip(v) {
                    *c += vi / nf;
                }
            }
            let worst = simplex[n].0.clone();
            let along = |coef: f64| -> Vec<f64> {
                centroid.iter().zip(&worst).map(|(c, w)| c + coef * (c - w)).collect()
            };
            let xr = along(alpha);
            let fr = f(&xr);
            evals += 1;
            if fr < simplex[0].1 {
                let xe = along(beta);
                let fe = f(&xe);
                evals += 1;
                simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
            } else if fr < simplex[n - 1].1 {
                simplex[n] = (xr, fr);
            } else {
                let (xc, fc) = if fr < simplex[n].1 {
                    let xc = along(gamma);
                    let fc = f(&xc);
                    (xc, fc)
                } else {
                    let xc = along(-gamma);
                    let fc = f(&xc);
                    (xc, fc)
                };
                evals += 1;
                if fc < simplex[n].1.min(fr) {
                    simplex[n] = (xc, fc);
                } else {
                    let x_best = simplex[0].0.clone();
                    for (v, fv) in simplex.iter_mut().skip(1) {
                        for (vi, bi) in v.iter_mut().zip(&x_best) {
                            *vi = bi + delta * (*vi - bi);
                        }
                        *fv = f(v);
                        evals += 1;
                    }
                }
            }
        }
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        if simplex[0].1 < best_f {
            best_f = simplex[0].1;
            best_x = simplex[0].0.clone();
        }
        let improvement = start_f - best_f;
        if inner_converged && improvement <= tol * best_f.abs().max(1e-12) {
            converged = true;
            break;
        }
        scale = (scale * 0.5).max(0.05);
    }
    SimplexResult {
        x: best_x,
        f: best_f,
        evaluations: evals,
        converged,
    }
}

fn validate(p: f64, t: f64, u: f64) -> Result<(), OptError> {
    if !(p > 2.0 && p.is_finite()) {
        return Err(OptError::InvalidExponent(p));
    }
    if !(t > 0.0 && t.is_finite()) {
        return Err(OptError::InvalidPenalty(t));
    }
    if !(u > 0.0 && u.is_finite()) {
        return Err(OptError::InvalidOverlap(u));
    }
    Ok(())
}

/// Seeded starts as `(lambda, m_0 * u)`, in order of use.
const SEEDS: [(f64, f64); 6] = [(0.0, 0.5), (1.0, 0.5), (-1.0, 0.5), (0.0, 0.0), (1.0, 0.0), (-1.0, 0.0)];

fn seeded_start(k: usize, lambda: f64, m0_scaled: f64) -> Vec<f64> {
    let mut theta = vec![lambda];
    theta.extend(std::iter::repeat_n(0.0, k));
    theta.push(m0_scaled.sqrt());
    theta.extend(std::iter::repeat_n(0.5f64.sqrt(), k));
    theta
}

/// Embeds a `(k-1)`-atom point into `k` atoms by splitting its top level in
/// half with a zero height increment, so the value is unchanged.
fn nested_start(prev: &ParisiPoint) -> Vec<f64> {
    let u = prev.u;
    let mut q = prev.q.clone();
    let last = q.last().copied().unwrap_or(0.0);
    q.push(0.5 * (last + u));
    let mut m = prev.m.clone();
    m.push(*m.last().unwrap());
    ParisiPoint { q, m, ..prev.clone() }.coordinates()
}

fn simplex_steps(k: usize) -> Vec<f64> {
    let mut s = vec![0.3];
    s.extend(std::iter::repeat_n(0.7, k));
    s.push(0.4);
    s.extend(std::iter::repeat_n(0.4, k));
    s
}

/// Minimizes the functional over `k`-atom measures at fixed `(p, t, u)`.
/// `inits` are extra starting points (any atom count up to `k`; fewer atoms
/// are embedded). Seeded starts are added according to `cfg.restarts`.
pub fn minimize_parisi(
    p: f64,
    t: f64,
    u: f64,
    k: usize,
    inits: &[ParisiPoint],
    cfg: &OptConfig,
) -> Result<ParisiPoint, OptError> {
    validate(p, t, u)?;
    if k > MAX_ATOMS {
        return Err(OptError::TooManyAtoms(k));
    }
    let grid = cfg.search_grid();
    let mut starts: Vec<Vec<f64>> = Vec::new();
    for init in inits {
        let mut pt = ParisiPoint { u, ..init.clone() };
        // Rescale heights so that m * u is preserved.
        pt.m = init.m.iter().map(|m| m * init.u / u).collect();
        pt.q = init.q.iter().map(|q| q * u / init.u).collect();
        while pt.k() < k {
            let theta = nested_start(&pt);
            let (lambda, q, m) = decode(&theta, pt.k() + 1, u);
            pt = ParisiPoint { lambda, q, m, ..pt };
        }
        if pt.k() == k {
            starts.push(pt.coordinates());
        }
    }
    for &(lambda, m0) in SEEDS.iter().take(cfg.restarts.min(SEEDS.len())) {
        starts.push(seeded_start(k, lambda, m0));
    }
    if starts.is_empty() {
        starts.push(seeded_start(k, SEEDS[0].0, SEEDS[0].1));
    }
    let steps = simplex_steps(k);
    let mut best: Option<SimplexResult> = None;
    let mut total_evals = 0;
    for x0 in &starts {
        let run = nelder_mead(
            |th| functional_at(th, k, p, t, u, &grid),
            x0,
            &steps,
            cfg.tolerance,
            cfg.max_evaluations,
        );
        total_evals += run.evaluations;
        if run.f.is_finite() && best.as_ref().is_none_or(|b| run.f < b.f) {
            best = Some(run);
        }
    }
    let best = best.ok_or(OptError::NoFiniteStart)?;
    // Final values use the reporting grid; embedded warm starts compete too,
    // so adding atoms never worsens a reported value.
    let mut candidates = vec![best.x.clone()];
    candidates.extend(starts.iter().take(inits.len()).cloned());
    let mut chosen: Option<(f64, f64, Vec<f64>, Vec<f64>)> = None;
    for theta in &candidates {
        let (lambda, q, m) = decode(theta, k, u);
        let gamma = AtomicMeasure::new(u, &q, &m)?;
        let Ok(value) = parisi_functional(lambda, &gamma, p, t, &cfg.grid) else {
            continue;
        };
        total_evals += 1;
        if chosen.as_ref().is_none_or(|c| value < c.0) {
            // Report the breakpoints after merging of degenerate atoms.
            chosen = Some((value, lambda, gamma.interior().to_vec(), gamma.heights().to_vec()));
        }
    }
    let (value, lambda, q, m) = chosen.ok_or(OptError::NoFiniteStart)?;
    Ok(ParisiPoint {
        p,
        t,
        u,
        lambda,
        q,
        m,
        value,
        grid: cfg.grid,
        evaluations: total_evals,
        converged: best.converged,
    })
}

/// Result of the escalation in `k` at fixed `u`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapValue {
    pub best: ParisiPoint,
    /// Best value per tried atom count, starting at the first count tried.
    pub per_k: Vec<f64>,
    /// Atom count at which escalation stopped.
    pub stalled_at: usize,
}

/// Value at fixed `u`: minimum over `k = from_k, from_k + 1, ..` with
/// escalation stopping once an extra atom gains less than the escalation
/// tolerance. `warm` holds previous optima (any atom counts); with `fresh`
/// the seeded restarts are used at the first atom count as well.
pub fn overlap_value(
    p: f64,
    t: f64,
    u: f64,
    warm: &[ParisiPoint],
    fresh: bool,
    from_k: usize,
    cfg: &OptConfig,
) -> Result<OverlapValue, OptError> {
    let from_k = from_k.min(cfg.max_k);
    let mut per_k = Vec::new();
    let mut points: Vec<ParisiPoint> = Vec::new();
    let mut stalled_at = cfg.max_k;
    for k in from_k..=cfg.max_k {
        let mut inits: Vec<ParisiPoint> = match points.last() {
            Some(prev) => vec![prev.clone()],
            None => Vec::new(),
        };
        let exact: Vec<ParisiPoint> = warm.iter().filter(|w| w.k() == k).cloned().collect();
        if exact.is_empty() && points.is_empty() {
            // Embed the richest warm start below `k`.
            inits.extend(warm.iter().filter(|w| w.k() < k).max_by_key(|w| w.k()).cloned());
        }
        inits.extend(exact);
        // Seeded starts only at the first atom count; higher counts start
        // from the exact embedding of the previous optimum.
        let seeded = k == from_k && (fresh || inits.is_empty());
        let local = OptConfig { restarts: if seeded { cfg.restarts } else { 0 }, ..*cfg };
        let pt = minimize_parisi(p, t, u, k, &inits, &local)?;
        per_k.push(pt.value);
        let gain = points.last().map(|prev: &ParisiPoint| prev.value - pt.value);
        let value = pt.value;
        points.push(pt);
        if let Some(gain) = gain {
            if gain < cfg.escalation_tolerance * value.abs().max(1e-12) {
                stalled_at = k;
                break;
            }
        }
    }
    let best = points
        .iter()
        .min_by(|a, b| a.value.total_cmp(&b.value))
        .unwrap()
        .clone();
    Ok(OverlapValue { best, per_k, stalled_at })
}

/// Upper end of the overlap range.
pub fn overlap_bound(p: f64, t: f64) -> f64 {
    (4.0 / t).powf(2.0 / (p - 2.0))
}

/// Maximizer over `u` of the overlap value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimitValue {
    pub p: f64,
    pub t: f64,
    pub u_star: f64,
    pub value: f64,
    pub point: ParisiPoint,
    pub per_k: Vec<f64>,
    pub stalled_at: usize,
    /// `(u, value)` pairs visited by the refined search.
    pub trace: Vec<(f64, f64)>,
    pub evaluations: usize,
}

fn golden_max<F: FnMut(f64) -> Result<f64, OptError>>(
    mut f: F,
    mut a: f64,
    mut b: f64,
    tol: f64,
) -> Result<(f64, f64), OptError> {
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let mut fc = f(c)?;
    let mut fd = f(d)?;
    while b - a > tol {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d)?;
        }
    }
    Ok(if fc >= fd { (c, fc) } else { (d, fd) })
}

/// Maximizes `f` on `[a, b]` by Brent's method (parabolic steps with a
/// golden-section fallback); stops when the bracket is below `tol`.
fn brent_max<F: FnMut(f64) -> Result<f64, OptError>>(
    mut f: F,
    mut a: f64,
    mut b: f64,
    tol: f64,
) -> Result<(f64, f64), OptError> {
    let golden = 0.5 * (3.0 - 5f64.sqrt());
    let mut x = a + golden * (b - a);
    let mut fx = -f(x)?;
    let (mut w, mut v, mut fw, mut fv) = (x, x, fx, fx);
    let (mut d, mut e): (f64, f64) = (0.0, 0.0);
    loop {
        let mid = 0.5 * (a + b);
        let tol1 = 0.5 * tol;
        if (x - mid).abs() <= 2.0 * tol1 - 0.5 * (b - a) {
            return Ok((x, -fx));
        }
        let mut use_golden = true;
        if e.abs() > tol1 {
            let r = (x - w) * (fx - fv);
            let mut q = (x - v) * (fx - fw);
            let mut pp = (x - v) * q - (x - w) * r;
            q = 2.0 * (q - r);
            if q > 0.0 {
                pp = -pp;
            }
            q = q.abs();
            if pp.abs() < (0.5 * q * e).abs() && pp > q * (a - x) && pp < q * (b - x) {
                e = d;
                d = pp / q;
                let trial = x + d;
                if trial - a < 2.0 * tol1 || b - trial < 2.0 * tol1 {
                    d = if mid >= x { tol1 } else { -tol1 };
                }
                use_golden = false;
            }
        }
        if use_golden {
            e = if x >= mid { a - x } else { b - x };
            d = golden * e;
        }
        let next = if d.abs() >= tol1 { x + d } else { x + tol1.copysign(d) };
        let fnext = -f(next)?;
        if fnext <= fx {
            if next >= x {
                a = x;
            } else {
                b = x;
            }
            (v, fv, w, fw, x, fx) = (w, fw, x, fx, next, fnext);
        } else {
            if next < x {
                a = next;
            } else {
                b = next;
            }
            if fnext <= fw || w == x {
                (v, fv, w, fw) = (w, fw, next, fnext);
            } else if fnext <= fv || v == x || v == w {
                (v, fv) = (next, fnext);
            }
        }
    }
}

/// Absolute floor of the coarse search in `u` when `1e-4 u_max` lies above it.
const COARSE_U_FLOOR: f64 = 1e-2;

/// Half-width in `log u` of the refined search around the coarse maximizer.
const REFINE_HALF_WIDTH: f64 = 0.7;

/// Limit value at penalty `t`: maximum over `u` of the overlap value.
///
/// A golden-section search in `log u` over `[min(1e-4 u_max, 1e-2), u_max]` with single-level
/// measures locates the maximizer roughly. Brent's method then refines it with
/// the full escalation at the first point and warm-started continuation at the
/// stalled atom count afterwards. The maximizer is finally re-escalated from
/// `k = 0` so that the per-count values describe the reported point.
pub fn limit_value(p: f64, t: f64, cfg: &OptConfig) -> Result<LimitValue, OptError> {
    validate(p, t, 1.0)?;
    let u_max = overlap_bound(p, t);
    // The maximizer sits far below u_max as p approaches 2, where u_max grows
    // like 4^{2/(p-2)}.
    let log_lo = (1e-4f64).min(COARSE_U_FLOOR / u_max).ln();
    let coarse_cfg = OptConfig { max_k: 0, ..*cfg };
    let mut evaluations = 0;
    let (log_rs, _) = golden_max(
        |lu| {
            let r = overlap_value(p, t, u_max * lu.exp(), &[], true, 0, &coarse_cfg)?;
            evaluations += r.best.evaluations;
            Ok(r.best.value)
        },
        log_lo,
        0.0,
        5e-2,
    )?;
    if log_rs > -5e-2 {
        return Err(OptError::MaximumAtBracketEdge(u_max));
    }
    if log_rs < log_lo + 5e-2 {
        return Err(OptError::MaximumAtBracketEdge(u_max * log_lo.exp()));
    }
    let mut warm: Vec<ParisiPoint> = Vec::new();
    let mut trace = Vec::new();
    let mut best: Option<ParisiPoint> = None;
    let (lo, hi) = (log_rs - REFINE_HALF_WIDTH, (log_rs + REFINE_HALF_WIDTH).min(0.0));
    let (log_star, _) = brent_max(
        |lu| {
            let u = u_max * lu.exp();
            let from_k = warm.iter().map(|w| w.k()).max().unwrap_or(0);
            let r = overlap_value(p, t, u, &warm, warm.is_empty(), from_k, cfg)?;
            evaluations += r.best.evaluations;
            trace.push((u, r.best.value));
            warm.retain(|w| w.k() != r.best.k());
            warm.push(r.best.clone());
            let v = r.best.value;
            if best.as_ref().is_none_or(|b| v > b.value) {
                best = Some(r.best);
            }
            Ok(v)
        },
        lo,
        hi,
        cfg.u_tolerance,
    )?;
    if log_star > -1e-2 {
        return Err(OptError::MaximumAtBracketEdge(u_max));
    }
    let continued = best.unwrap();
    let u_star = continued.u;
    let full = overlap_value(p, t, u_star, std::slice::from_ref(&continued), false, 0, cfg)?;
    evaluations += full.best.evaluations;
    let point = if full.best.value <= continued.value { full.best.clone() } else { continued };
    Ok(LimitValue {
        p,
        t,
        u_star,
        value: point.value,
        point,
        per_k: full.per_k,
        stalled_at: full.stalled_at,
        trace,
        evaluations,
    })
}

/// Converts a limit value at penalty `t` into the normalized constant.
pub fn constant_from_limit(p: f64, t: f64, limit: f64) -> f64 {
    0.5 * p * (0.5 * p - 1.0).powf(2.0 / p - 1.0) * t.powf(2.0 / p) * limit.powf(1.0 - 2.0 / p)
}

/// Inverse of [`constant_from_limit`].
pub fn limit_from_constant(p: f64, t: f64, constant: f64) -> f64 {
    (1.0 - 2.0 / p) * (2.0 / (p * t)).powf(2.0 / (p - 2.0)) * constant.powf(p / (p - 2.0))
}

/// Record of the limiting constant for `p > 2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimitRecord {
    pub p: f64,
    pub t: f64,
    pub u_star: f64,
    pub lambda: f64,
    pub q: Vec<f64>,
    pub m: Vec<f64>,
    #[serde(rename = "L_p")]
    pub limit: f64,
    #[serde(rename = "GP_p")]
    pub constant: f64,
    pub diagnostics: LimitDiagnostics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimitDiagnostics {
    pub per_k: Vec<f64>,
    pub stalled_at: usize,
    pub converged: bool,
    pub evaluations: usize,
    pub trace: Vec<(f64, f64)>,
    pub grid: GridConfig,
}

/// Limiting normalized constant for `p > 2`, evaluated at penalty `t`.
pub fn grothendieck_limit(p: f64, t: f64, cfg: &OptConfig) -> Result<LimitRecord, OptError> {
    let lv = limit_value(p, t, cfg)?;
    Ok(LimitRecord {
        p,
        t,
        u_star: lv.u_star,
        lambda: lv.point.lambda,
        q: lv.point.q.clone(),
        m: lv.point.m.clone(),
        limit: lv.value,
        constant: constant_from_limit(p, t, lv.value),
        diagnostics: LimitDiagnostics {
            per_k: lv.per_k,
            stalled_at: lv.stalled_at,
            converged: lv.point.converged,
            evaluations: lv.evaluations,
            trace: lv.trace,
            grid: lv.point.grid,
        },
    })
}

/// Independence of the constant from the penalty and the power law of the
/// limit value in `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub p: f64,
    pub records: Vec<LimitRecord>,
    /// `(max - min) / mean` of the constants.
    pub spread: f64,
    pub slope: f64,
    pub expected_slope: f64,
    pub pass: bool,
}

/// Runs [`grothendieck_limit`] at each penalty; passes when the constants
/// agree within a relative spread of `1e-3` and the fitted log-log slope is within `0.02` of
/// `-2 / (p - 2)`.
pub fn scaling_check(p: f64, penalties: &[f64], cfg: &OptConfig) -> Result<ScalingReport, OptError> {
    if penalties.len() < 3 {
        return Err(OptError::TooFewPenalties(penalties.len()));
    }
    let records = penalties
        .iter()
        .map(|&t| grothendieck_limit(p, t, cfg))
        .collect::<Result<Vec<_>, _>>()?;
    let gps: Vec<f64> = records.iter().map(|r| r.constant).collect();
    let mean = gps.iter().sum::<f64>() / gps.len() as f64;
    let spread = (gps.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        - gps.iter().cloned().fold(f64::INFINITY, f64::min))
        / mean;
    let xs: Vec<f64> = penalties.iter().map(|t| t.ln()).collect();
    let ys: Vec<f64> = records.iter().map(|r| r.limit.ln()).collect();
    let slope = least_squares_slope(&xs, &ys);
    let expected_slope = -2.0 / (p - 2.0);
    Ok(ScalingReport {
        p,
        records,
        spread,
        slope,
        expected_slope,
        pass: spread <= 1e-3 && (slope - expected_slope).abs() <= 0.02,
    })
}

/// Ordinary least-squares slope of `ys` against `xs`.
pub fn least_squares_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn coordinates_round_trip() {
        let pt = ParisiPoint {
            p: 4.0,
            t: 1.0,
            u: 0.8,
            lambda: 0.3,
            q: vec![0.2, 0.5],
            m: vec![0.5, 1.0, 2.5],
            value: 0.0,
            grid: GridConfig::default(),
            evaluations: 0,
            converged: true,
        };
        let (lambda, q, m) = decode(&pt.coordinates(), 2, 0.8);
        assert_relative_eq!(lambda, 0.3);
        for (a, b) in q.iter().zip(&pt.q) {
            assert_relative_eq!(a, b, max_relative = 1e-12);
        }
        for (a, b) in m.iter().zip(&pt.m) {
            assert_relative_eq!(a, b, max_relative = 1e-12);
        }
    }

    #[test]
    fn brent_locates_smooth_maximum() {
        let mut calls = 0;
        let (x, fx) = brent_max(
            |x| {
                calls += 1;
                Ok(-(x - 0.3).powi(2) + 0.1 * (x - 0.3).powi(4) + 2.0)
            },
            -1.0,
            2.0,
            1e-6,
        )
        .unwrap();
        assert!((x - 0.3).abs() < 1e-5, "{x}");
        assert!((fx - 2.0).abs() < 1e-9);
        assert!(calls < 30, "{calls}");
    }

    #[test]
    fn minimizer_is_covariant_under_rescaling() {
        // u -> a^2 u, t -> t a^-(p-2) maps the functional to a^2 times itself.
        let (p, a) = (4.0, 1.7f64);
        let cfg = OptConfig { restarts: 2, ..OptConfig::default() };
        let base = minimize_parisi(p, 1.0, 0.3, 1, &[], &cfg).unwrap();
        let scaled = minimize_parisi(p, a.powf(-(p - 2.0)), 0.3 * a * a, 1, &[], &cfg).unwrap();
        assert_relative_eq!(scaled.value, a * a * base.value, max_relative = 1e-8);
    }

    #[test]
    fn simplex_finds_quadratic_minimum() {
        let r = nelder_mead(
            |x| (x[0] - 1.0).powi(2) + 3.0 * (x[1] + 2.0).powi(2) + 0.5 * (x[0] * x[1] + 2.0).powi(2) + 1.0,
            &[0.0, 0.0],
            &[0.5, 0.5],
            1e-12,
            5000,
        );
        assert!(r.converged);
        // Minimum of the convex quadratic, solved independently by Newton.
        let grad = |x: f64, y: f64| {
            (
                2.0 * (x - 1.0) + (x * y + 2.0) * y,
                6.0 * (y + 2.0) + (x * y + 2.0) * x,
            )
        };
        let (gx, gy) = grad(r.x[0], r.x[1]);
        assert!(gx.abs() < 1e-4 && gy.abs() < 1e-4, "{gx} {gy}");
    }

    #[test]
    fn rejects_bad_inputs() {
        let cfg = OptConfig::default();
        assert!(matches!(minimize_parisi(2.0, 1.0, 0.3, 0, &[], &cfg), Err(OptError::InvalidExponent(_))));
        assert!(matches!(minimize_parisi(4.0, 1.0, 0.3, 9, &[], &cfg), Err(OptError::TooManyAtoms(9))));
        assert!(matches!(minimize_parisi(4.0, 1.0, -0.3, 0, &[], &cfg), Err(OptError::InvalidOverlap(_))));
        assert!(matches!(scaling_check(4.0, &[1.0, 2.0], &cfg), Err(OptError::TooFewPenalties(2))));
    }

    #[test]
    fn constant_and_limit_are_inverse() {
        for &(p, t) in &[(3.0, 0.5), (4.0, 1.0), (6.0, 2.0)] {
            let l = limit_from_constant(p, t, 1.25);
            assert_relative_eq!(constant_from_limit(p, t, l), 1.25, max_relative = 1e-13);
        }
    }

    #[test]
    fn point_value_matches_functional_and_nesting_is_monotone() {
        let cfg = OptConfig { restarts: 2, ..OptConfig::default() };
        let k0 = minimize_parisi(4.0, 1.0, 0.25, 0, &[], &cfg).unwrap();
        let k1 = minimize_parisi(4.0, 1.0, 0.25, 1, std::slice::from_ref(&k0), &OptConfig { restarts: 0, ..cfg }).unwrap();
        for pt in [&k0, &k1] {
            let g = pt.measure().unwrap();
            let v = parisi_functional(pt.lambda, &g, 4.0, 1.0, &pt.grid).unwrap();
            assert!((v - pt.value).abs() < 1e-8);
            assert!(pt.m.windows(2).all(|w| w[0] <= w[1]));
            assert!(pt.q.windows(2).all(|w| w[0] < w[1]));
        }
        assert!(k1.value <= k0.value + 1e-9, "{} vs {}", k1.value, k0.value);
    }
}

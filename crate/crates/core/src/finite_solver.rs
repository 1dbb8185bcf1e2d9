//! Finite-n maximization of `<G x, x>` over the unit `l_p` sphere, plus the
//! overlap-restricted variant.
//!
//! `p = 1` is bracketed exactly by pair search and a certified bound, `p = 2`
//! is an eigenproblem, and every other exponent uses line-searched projected
//! ascent from constructed and random starts.

use matrixmultiply::dgemm;
use nalgebra::{DMatrix, SymmetricEigen};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::core_math::{dot, gaussian_moment_norm, holder_conjugate, lp_norm, stream_rng, LpVector, MathError, MatrixSample};

/// Dense eigensolves are used up to this dimension, Lanczos above it.
pub const DENSE_EIGEN_MAX: usize = 256;
/// RNG stream of the Lanczos start vector (stream 0 draws the matrix).
const LANCZOS_STREAM: u64 = 1;
/// First RNG stream of the random restarts; restart `r` uses `base + r`.
const RESTART_STREAM_BASE: u64 = 1 << 20;
/// Krylov dimension cap for Lanczos.
const LANCZOS_MAX_DIM: usize = 400;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("dimension mismatch: matrix is {matrix}, vector is {vector}")]
    DimensionMismatch { matrix: usize, vector: usize },
    #[error("exponent {0} is not supported here")]
    UnsupportedExponent(f64),
    #[error("penalty must be nonnegative and finite, got {0}")]
    InvalidPenalty(f64),
    #[error("overlap must be positive and finite, got {0}")]
    InvalidOverlap(f64),
    #[error("eigensolver did not converge (residual {0})")]
    EigenFailure(f64),
    #[error("ascent stalled: no improvement in {0} iterations")]
    Stalled(usize),
    #[error(transparent)]
    Math(#[from] MathError),
}

/// How a result was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Signed basis vectors and two-coordinate vectors, `p = 1`.
    PairSearch,
    /// Top eigenvector of the symmetrized matrix, `p = 2`.
    Eigen,
    /// Projected ascent on the `l_p` sphere.
    Ascent,
    /// Ascent on the sphere of fixed normalized `l_2` norm.
    Restricted,
}

impl Method {
    pub fn tag(&self) -> &'static str {
        match self {
            Method::PairSearch => "pair_search",
            Method::Eigen => "eigen",
            Method::Ascent => "ascent",
            Method::Restricted => "restricted",
        }
    }
}

/// Outcome of a solve.
///
/// For the sphere problems `best` has unit `l_p` norm and `value` is
/// `<G best, best>`. For [`Method::Restricted`] `best` lies on the sphere of
/// normalized squared `l_2` norm `u` and `value` is the penalized objective
/// divided by `n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveResult {
    pub best: LpVector,
    pub value: f64,
    pub upper_bound: Option<f64>,
    /// Stationarity residual (absolute). For `p = 1` it holds the certified
    /// gap `upper_bound - value`.
    pub kkt_residual: f64,
    pub method: Method,
    pub restarts_used: usize,
}

/// `n^{-1/2} <G x, x> - t ||x||_p^p`.
pub fn hamiltonian(x: &LpVector, g: &MatrixSample, t: f64, p: f64) -> Result<f64, SolverError> {
    check_dim(g, x.dim())?;
    let n = g.n as f64;
    Ok(g.quad_form(x.entries()) / n.sqrt() - t * lp_norm(x.entries(), p, false)?.powf(p))
}

fn check_dim(g: &MatrixSample, len: usize) -> Result<(), SolverError> {
    if g.n != len {
        return Err(SolverError::DimensionMismatch { matrix: g.n, vector: len });
    }
    Ok(())
}

/// Best vector found by the pair search.
#[derive(Debug, Clone, Copy, PartialEq)]
struct PairCandidate {
    value: f64,
    i: usize,
    j: usize,
    sign: f64,
    a: f64,
}

/// Maximizer over `a in [0, 1]` of `A a^2 + B (1-a)^2 + C a (1-a)`.
fn best_weight(a_coef: f64, b_coef: f64, c_coef: f64) -> (f64, f64) {
    let f = |a: f64| a_coef * a * a + b_coef * (1.0 - a) * (1.0 - a) + c_coef * a * (1.0 - a);
    let (mut best_a, mut best) = if a_coef >= b_coef { (1.0, a_coef) } else { (0.0, b_coef) };
    let curvature = a_coef + b_coef - c_coef;
    if curvature < 0.0 {
        let a = (2.0 * b_coef - c_coef) / (2.0 * curvature);
        if a > 0.0 && a < 1.0 && f(a) > best {
            best = f(a);
            best_a = a;
        }
    }
    (best_a, best)
}

/// `p = 1`: best signed basis vector or two-coordinate vector
/// `a e_i + (1 - a) s e_j`, with the certified bound
/// `max(sqrt2 max_i g_ii, max_{i<j} |gbar_ij|) / sqrt2`.
pub fn solve_p1(g: &MatrixSample) -> Result<SolveResult, SolverError> {
    let n = g.n;
    let better = |a: PairCandidate, b: PairCandidate| {
        if b.value > a.value || (b.value == a.value && (b.i, b.j) < (a.i, a.j)) {
            b
        } else {
            a
        }
    };
    let start = PairCandidate { value: f64::NEG_INFINITY, i: 0, j: 0, sign: 1.0, a: 1.0 };
    let diag: Vec<f64> = (0..n).map(|i| g.g_at(i, i)).collect();
    let (best, off_max) = (0..n)
        .into_par_iter()
        .map(|i| {
            let gii = diag[i];
            let row = g.gbar_row(i);
            let mut local = PairCandidate { value: gii, i, j: i, sign: 1.0, a: 1.0 };
            let mut off: f64 = 0.0;
            for j in i + 1..n {
                // g_ij + g_ji = sqrt2 gbar_ij; the sign of the cross term
                // that raises the value for every weight is its own sign.
                let cross = std::f64::consts::SQRT_2 * row[j];
                off = off.max(row[j].abs());
                let (a, value) = best_weight(gii, diag[j], cross.abs());
                if value > local.value {
                    let sign = if cross >= 0.0 { 1.0 } else { -1.0 };
                    local = PairCandidate { value, i, j, sign, a };
                }
            }
            (local, off)
        })
        .reduce(|| (start, 0.0), |x, y| (better(x.0, y.0), x.1.max(y.1)));
    let diag_max = diag.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let upper = (std::f64::consts::SQRT_2 * diag_max).max(off_max) * std::f64::consts::FRAC_1_SQRT_2;
    let mut x = vec![0.0; n];
    x[best.i] += best.a;
    if best.j != best.i {
        x[best.j] += best.sign * (1.0 - best.a);
    }
    let value = g.quad_form(&x);
    // Exact arithmetic would give value <= upper; allow the rounding slack.
    let upper = upper.max(value);
    Ok(SolveResult {
        best: LpVector::new(x)?,
        value,
        upper_bound: Some(upper),
        kkt_residual: upper - value,
        method: Method::PairSearch,
        restarts_used: 0,
    })
}

/// Largest eigenvalue of `gbar` and a unit eigenvector.
pub fn top_eigenpair(g: &MatrixSample) -> Result<(f64, Vec<f64>), SolverError> {
    let n = g.n;
    if n <= DENSE_EIGEN_MAX {
        let m = DMatrix::from_row_slice(n, n, &g.gbar);
        let eig = SymmetricEigen::new(m);
        let (idx, &theta) = eig
            .eigenvalues
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .ok_or(SolverError::EigenFailure(f64::NAN))?;
        let v: Vec<f64> = eig.eigenvectors.column(idx).iter().copied().collect();
        return Ok((theta, v));
    }
    lanczos_top(g)
}

fn lanczos_top(g: &MatrixSample) -> Result<(f64, Vec<f64>), SolverError> {
    lanczos_top_with(g.n, |x, out| g.gbar_apply(x, out), g.seed, LANCZOS_STREAM)
}

/// Top eigenpair of the symmetric operator `apply` on `R^n` by Lanczos with
/// full reorthogonalization, started from a Gaussian vector drawn from
/// `(seed, stream)`. The eigenvalue is a Ritz value, so it never exceeds the
/// true top eigenvalue.
pub fn lanczos_top_with<F: FnMut(&[f64], &mut [f64])>(
    n: usize,
    mut apply: F,
    seed: u64,
    stream: u64,
) -> Result<(f64, Vec<f64>), SolverError> {
    let max_dim = LANCZOS_MAX_DIM.min(n);
    let mut rng = stream_rng(seed, stream);
    let mut q: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let r = dot(&q, &q).sqrt();
    q.iter_mut().for_each(|v| *v /= r);
    let mut basis: Vec<Vec<f64>> = vec![q];
    let mut alpha: Vec<f64> = Vec::new();
    let mut beta: Vec<f64> = Vec::new();
    let mut w = vec![0.0; n];
    let mut last_residual = f64::INFINITY;
    for m in 1..=max_dim {
        let qm = &basis[m - 1];
        apply(qm, &mut w);
        alpha.push(dot(&w, qm));
        for _ in 0..2 {
            for b in &basis {
                let c = dot(&w, b);
                w.iter_mut().zip(b).for_each(|(wi, bi)| *wi -= c * bi);
            }
        }
        let b_next = dot(&w, &w).sqrt();
        let check = m == max_dim || b_next == 0.0 || (m >= 10 && m % 5 == 0);
        if check {
            let mut t = DMatrix::<f64>::zeros(m, m);
            for i in 0..m {
                t[(i, i)] = alpha[i];
                if i + 1 < m {
                    t[(i, i + 1)] = beta[i];
                    t[(i + 1, i)] = beta[i];
                }
            }
            let eig = SymmetricEigen::new(t);
            let (idx, &theta) = eig
                .eigenvalues
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap();
            let s = eig.eigenvectors.column(idx);
            last_residual = b_next * s[m - 1].abs();
            if last_residual <= 1e-11 * theta.abs().max(1.0) || b_next == 0.0 {
                let mut x = vec![0.0; n];
                for (bv, si) in basis.iter().zip(s.iter()) {
                    x.iter_mut().zip(bv).for_each(|(xi, b)| *xi += si * b);
                }
                let r = dot(&x, &x).sqrt();
                x.iter_mut().for_each(|v| *v /= r);
                return Ok((theta, x));
            }
        }
        beta.push(b_next);
        basis.push(w.iter().map(|v| v / b_next).collect());
    }
    Err(SolverError::EigenFailure(last_residual))
}

/// `p = 2`: `value = lambda_max(gbar) / sqrt2` with the top eigenvector.
pub fn solve_p2(g: &MatrixSample) -> Result<SolveResult, SolverError> {
    let (theta, v) = top_eigenpair(g)?;
    let mut gv = vec![0.0; g.n];
    g.gbar_apply(&v, &mut gv);
    let residual = gv.iter().zip(&v).map(|(a, b)| (a - theta * b).powi(2)).sum::<f64>().sqrt();
    Ok(SolveResult {
        value: g.quad_form(&v),
        best: LpVector::new(v)?,
        upper_bound: None,
        kkt_residual: residual,
        method: Method::Eigen,
        restarts_used: 0,
    })
}

/// The `2n` signed near-optimizers `+-(e_i + v_i) / ||e_i + v_i||_p`, stored
/// once per `i` (row-major `n x n`); the sign is implicit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NearOptimizerSet {
    pub p: f64,
    pub n: usize,
    /// Row `i` holds `v_i`.
    pub v_raw: Vec<f64>,
    /// Row `i` holds `(e_i + v_i) / ||e_i + v_i||_p`.
    pub vectors: Vec<f64>,
}

/// Builds `v_i(j) = sgn(gbar_ij) (|gbar_ij|^{p*} / ||gbar e_i||_{p*}^{p*})^{1/p}`
/// and the normalized near-optimizers.
pub fn near_optimizers(g: &MatrixSample, p: f64) -> Result<NearOptimizerSet, SolverError> {
    if !(p > 1.0 && p < 2.0) {
        return Err(SolverError::UnsupportedExponent(p));
    }
    let n = g.n;
    let ps = holder_conjugate(p)?;
    let mut v_raw = vec![0.0; n * n];
    let mut vectors = vec![0.0; n * n];
    v_raw
        .par_chunks_mut(n)
        .zip(vectors.par_chunks_mut(n))
        .enumerate()
        .for_each(|(i, (v, o))| {
            let row = g.gbar_row(i);
            let scale = row.iter().fold(0.0_f64, |a, b| a.max(b.abs()));
            if scale == 0.0 {
                o[i] = 1.0;
                return;
            }
            // Work relative to the largest entry to keep the powers in range.
            let total: f64 = row.iter().map(|x| (x.abs() / scale).powf(ps)).sum();
            for (vj, x) in v.iter_mut().zip(row) {
                *vj = x.signum() * ((x.abs() / scale).powf(ps) / total).powf(1.0 / p);
            }
            o.copy_from_slice(v);
            o[i] += 1.0;
            let r = lp_norm(o, p, false).unwrap_or(1.0);
            o.iter_mut().for_each(|x| *x /= r);
        });
    Ok(NearOptimizerSet { p, n, v_raw, vectors })
}

impl NearOptimizerSet {
    /// Number of signed vectors, `2n`.
    pub fn len(&self) -> usize {
        2 * self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Row `i` of the unsigned near-optimizers.
    pub fn base(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.n..(i + 1) * self.n]
    }

    pub fn v(&self, i: usize) -> &[f64] {
        &self.v_raw[i * self.n..(i + 1) * self.n]
    }

    /// Signed element `sign * base(i)`.
    pub fn element(&self, i: usize, sign: f64) -> LpVector {
        LpVector::new(self.base(i).iter().map(|x| sign * x).collect()).expect("finite entries")
    }

    /// Large-`n` approximation `w_i(j) = n^{-1/p} xi_{p*}^{-p*/p} sgn(gbar_ij) |gbar_ij|^{p*/p}`.
    pub fn lln_approximation(&self, g: &MatrixSample, i: usize) -> Result<Vec<f64>, SolverError> {
        let ps = holder_conjugate(self.p)?;
        let xi = gaussian_moment_norm(ps)?;
        let c = (self.n as f64).powf(-1.0 / self.p) * xi.powf(-ps / self.p);
        Ok(g.gbar_row(i).iter().map(|x| c * x.signum() * x.abs().powf(ps / self.p)).collect())
    }

    /// `<G o_i, o_i>` for every `i` (the same for both signs), through one
    /// dense product `O * gbar`.
    pub fn values(&self, g: &MatrixSample) -> Result<Vec<f64>, SolverError> {
        check_dim(g, self.n)?;
        let n = self.n;
        let mut prod = vec![0.0; n * n];
        // SAFETY: all three buffers are n x n row-major with the strides given.
        unsafe {
            dgemm(
                n,
                n,
                n,
                1.0,
                self.vectors.as_ptr(),
                n as isize,
                1,
                g.gbar.as_ptr(),
                n as isize,
                1,
                0.0,
                prod.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        Ok((0..n)
            .map(|i| dot(&prod[i * n..(i + 1) * n], self.base(i)) * std::f64::consts::FRAC_1_SQRT_2)
            .collect())
    }
}

/// Controls of the projected ascent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AscentConfig {
    pub max_iterations: usize,
    /// Step shrink factor on a failed trial.
    pub backtrack: f64,
    /// Stop once the stationarity residual relative to the gradient norm
    /// falls below this.
    pub tolerance: f64,
    /// First trial step. On the `l_p` sphere it is a fraction of a power
    /// step and defaults to 1; for the restricted problem it defaults to the
    /// inverse gradient scale.
    pub initial_step: Option<f64>,
}

impl Default for AscentConfig {
    fn default() -> Self {
        AscentConfig {
            max_iterations: 5000,
            backtrack: 0.5,
            tolerance: 1e-8,
            initial_step: None,
        }
    }
}

/// Local state of an ascent problem at a point.
struct Probe {
    value: f64,
    /// Ascent direction at the point.
    direction: Vec<f64>,
    residual: f64,
    relative_residual: f64,
}

trait AscentProblem {
    fn matrix(&self) -> &MatrixSample;
    /// Vector the matrix is applied to at `point`.
    fn operand(&self, point: &[f64]) -> Vec<f64>;
    /// State at `point`, given `image = gbar * operand`.
    fn probe(&self, point: &[f64], operand: &[f64], image: &[f64]) -> Probe;
    /// Moves from `point` along `d` by `eta` and maps back to the constraint set.
    fn retract(&self, point: &[f64], d: &[f64], eta: f64) -> Vec<f64>;
}

/// Probes several points with one block product.
fn probe_all<P: AscentProblem>(prob: &P, points: &[&[f64]]) -> Vec<Probe> {
    let operands: Vec<Vec<f64>> = points.iter().map(|z| prob.operand(z)).collect();
    let refs: Vec<&[f64]> = operands.iter().map(Vec::as_slice).collect();
    let images = prob.matrix().gbar_apply_block(&refs);
    points
        .iter()
        .zip(&operands)
        .zip(&images)
        .map(|((z, o), im)| prob.probe(z, o, im))
        .collect()
}

struct AscentOutcome {
    x: Vec<f64>,
    probe: Probe,
    iterations: usize,
    start_value: f64,
}

/// Trials per iteration before a run is declared converged to precision.
const MAX_BACKTRACKS: usize = 60;

/// Line-searched ascent from every start, advanced in lockstep so that each
/// round costs one block product. Per run, the step doubles after a success
/// and shrinks by `backtrack` after a failure; a run stops at the residual
/// tolerance, at the iteration cap, or when no trial step improves.
fn run_ascents<P: AscentProblem>(prob: &P, starts: Vec<Vec<f64>>, step0: f64, cfg: &AscentConfig) -> Vec<AscentOutcome> {
    struct Run {
        x: Vec<f64>,
        eta: f64,
        failures: usize,
        iterations: usize,
        done: bool,
    }
    let refs: Vec<&[f64]> = starts.iter().map(Vec::as_slice).collect();
    let mut current = probe_all(prob, &refs);
    let start_values: Vec<f64> = current.iter().map(|c| c.value).collect();
    let mut runs: Vec<Run> = starts
        .into_iter()
        .zip(&current)
        .map(|(x, c)| Run {
            x,
            eta: step0,
            failures: 0,
            iterations: 0,
            done: cfg.max_iterations == 0 || c.relative_residual <= cfg.tolerance,
        })
        .collect();
    loop {
        let active: Vec<usize> = (0..runs.len()).filter(|&i| !runs[i].done).collect();
        if active.is_empty() {
            break;
        }
        let trials: Vec<Vec<f64>> = active
            .iter()
            .map(|&i| {
                let run = &mut runs[i];
                if run.failures == 0 {
                    run.iterations += 1;
                }
                prob.retract(&run.x, &current[i].direction, run.eta)
            })
            .collect();
        let refs: Vec<&[f64]> = trials.iter().map(Vec::as_slice).collect();
        let probes = probe_all(prob, &refs);
        for ((&i, trial), probe) in active.iter().zip(trials).zip(probes) {
            let run = &mut runs[i];
            if probe.value > current[i].value {
                run.x = trial;
                run.eta *= 2.0;
                run.failures = 0;
                run.done = run.iterations >= cfg.max_iterations || probe.relative_residual <= cfg.tolerance;
                current[i] = probe;
            } else {
                run.eta *= cfg.backtrack;
                run.failures += 1;
                run.done = run.failures >= MAX_BACKTRACKS;
            }
        }
    }
    runs.into_iter()
        .zip(current)
        .zip(start_values)
        .map(|((run, probe), start_value)| AscentOutcome { x: run.x, probe, iterations: run.iterations, start_value })
        .collect()
}

/// `<G x, x>` on the unit `l_p` sphere in dual coordinates: the point is `z` with unit
/// `l_{p*}` norm and `x = sgn(z) |z|^{p*-1}` lies on the unit `l_p` sphere.
/// Stationarity reads `z ∝ gbar x`, so the direction `gbar x / ||gbar x||_{p*} - z`
/// is an ascent direction (a damped power step) and vanishes exactly at
/// stationary points.
struct DualSphereProblem<'a> {
    g: &'a MatrixSample,
    p: f64,
    conjugate: f64,
}

impl DualSphereProblem<'_> {
    fn primal(&self, z: &[f64]) -> Vec<f64> {
        z.iter().map(|v| v.signum() * v.abs().powf(self.conjugate - 1.0)).collect()
    }

    fn dual(&self, x: &[f64]) -> Vec<f64> {
        let z: Vec<f64> = x.iter().map(|v| v.signum() * v.abs().powf(self.p - 1.0)).collect();
        self.normalized(z)
    }

    fn normalized(&self, mut z: Vec<f64>) -> Vec<f64> {
        let r = lp_norm(&z, self.conjugate, false).unwrap_or(1.0);
        z.iter_mut().for_each(|v| *v /= r);
        z
    }
}

impl AscentProblem for DualSphereProblem<'_> {
    fn matrix(&self) -> &MatrixSample {
        self.g
    }

    fn operand(&self, z: &[f64]) -> Vec<f64> {
        self.primal(z)
    }

    fn probe(&self, z: &[f64], x: &[f64], gx: &[f64]) -> Probe {
        let value = dot(gx, x) * std::f64::consts::FRAC_1_SQRT_2;
        // |x|^{p-1} sgn x = z, so the sphere normal is p z.
        let scale = std::f64::consts::SQRT_2 * dot(gx, gx).sqrt();
        let c = dot(gx, z) / dot(z, z).max(f64::MIN_POSITIVE);
        let residual = std::f64::consts::SQRT_2
            * gx.iter().zip(z).map(|(a, b)| (a - c * b).powi(2)).sum::<f64>().sqrt();
        let r = lp_norm(gx, self.conjugate, false).unwrap_or(1.0).max(f64::MIN_POSITIVE);
        let direction = gx.iter().zip(z).map(|(a, b)| a / r - b).collect();
        Probe { value, direction, residual, relative_residual: residual / scale.max(f64::MIN_POSITIVE) }
    }

    fn retract(&self, z: &[f64], d: &[f64], eta: f64) -> Vec<f64> {
        self.normalized(z.iter().zip(d).map(|(a, b)| a + eta * b).collect())
    }
}

/// Power-iteration estimate of `||gbar||_2` (eight steps from a fixed start).
pub fn spectral_estimate(g: &MatrixSample) -> f64 {
    let n = g.n;
    let mut x: Vec<f64> = (0..n).map(|i| 1.0 + (i % 7) as f64 * 0.1).collect();
    let mut y = vec![0.0; n];
    let mut est = 0.0;
    for _ in 0..8 {
        let r = dot(&x, &x).sqrt();
        x.iter_mut().for_each(|v| *v /= r);
        g.gbar_apply(&x, &mut y);
        est = dot(&y, &y).sqrt();
        std::mem::swap(&mut x, &mut y);
    }
    est.max(f64::MIN_POSITIVE)
}

/// Projected ascent on `{||x||_p = 1}` from `x0` (rescaled onto the sphere).
pub fn sphere_ascent(g: &MatrixSample, p: f64, x0: &LpVector, cfg: &AscentConfig) -> Result<SolveResult, SolverError> {
    sphere_ascent_many(g, p, std::slice::from_ref(x0), cfg)?
        .pop()
        .expect("one start gives one result")
}

/// [`sphere_ascent`] from several starts at once; the runs share each pass
/// over the matrix. Results are in start order.
pub fn sphere_ascent_many(
    g: &MatrixSample,
    p: f64,
    starts: &[LpVector],
    cfg: &AscentConfig,
) -> Result<Vec<Result<SolveResult, SolverError>>, SolverError> {
    if !(p > 1.0 && p.is_finite()) {
        return Err(SolverError::UnsupportedExponent(p));
    }
    let prob = DualSphereProblem { g, p, conjugate: holder_conjugate(p)? };
    let mut points = Vec::with_capacity(starts.len());
    for x0 in starts {
        check_dim(g, x0.dim())?;
        points.push(prob.dual(x0.unit(p)?.entries()));
    }
    let outcomes = run_ascents(&prob, points, cfg.initial_step.unwrap_or(1.0), cfg);
    Ok(outcomes
        .into_iter()
        .map(|out| {
            if out.iterations >= cfg.max_iterations && out.probe.value <= out.start_value {
                return Err(SolverError::Stalled(out.iterations));
            }
            let x = LpVector::new(prob.primal(&out.x))?.unit(p)?;
            Ok(SolveResult {
                value: g.quad_form(x.entries()),
                best: x,
                upper_bound: None,
                kkt_residual: out.probe.residual,
                method: Method::Ascent,
                restarts_used: 1,
            })
        })
        .collect())
}

/// Multi-start controls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveConfig {
    /// Random starts, uniform in direction on the `l_p` sphere.
    pub restarts: usize,
    /// For `1 < p < 2`: ascent starts taken from the best near-optimizers.
    pub near_optimizer_starts: usize,
    pub ascent: AscentConfig,
}

impl Default for SolveConfig {
    fn default() -> Self {
        SolveConfig {
            restarts: 8,
            near_optimizer_starts: 16,
            ascent: AscentConfig::default(),
        }
    }
}

/// Random start for restart `r`: a Gaussian vector from its own stream.
pub fn random_start(g: &MatrixSample, r: usize) -> Vec<f64> {
    let mut rng = stream_rng(g.seed, RESTART_STREAM_BASE + r as u64);
    (0..g.n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Runs ascents from all `starts` and keeps the best (ties to the earliest).
fn best_of_ascents(
    g: &MatrixSample,
    p: f64,
    starts: Vec<Vec<f64>>,
    cfg: &AscentConfig,
) -> Result<SolveResult, SolverError> {
    let count = starts.len();
    let starts = starts.into_iter().map(LpVector::new).collect::<Result<Vec<_>, _>>()?;
    let results = sphere_ascent_many(g, p, &starts, cfg)?;
    let mut best: Option<SolveResult> = None;
    for r in results {
        let r = match r {
            Ok(r) => r,
            Err(SolverError::Stalled(_)) => continue,
            Err(e) => return Err(e),
        };
        if best.as_ref().is_none_or(|b| r.value > b.value) {
            best = Some(r);
        }
    }
    let mut best = best.ok_or(SolverError::Stalled(cfg.max_iterations))?;
    best.restarts_used = count;
    Ok(best)
}

/// Maximizes `<G x, x>` over the unit `l_p` sphere, `1 <= p < inf`.
///
/// `p = 1` and `p = 2` are solved directly. For `1 < p < 2` ascent starts
/// from the best near-optimizers and from random starts; the best
/// near-optimizer itself is always a candidate. For `p > 2` ascent starts
/// from the top eigenvector and from random starts.
pub fn solve_lp(g: &MatrixSample, p: f64, cfg: &SolveConfig) -> Result<SolveResult, SolverError> {
    if !(p >= 1.0 && p.is_finite()) {
        return Err(SolverError::UnsupportedExponent(p));
    }
    if p == 1.0 {
        return solve_p1(g);
    }
    if p == 2.0 {
        return solve_p2(g);
    }
    let mut starts: Vec<Vec<f64>> = Vec::new();
    let mut constructed: Option<(f64, Vec<f64>)> = None;
    if p < 2.0 {
        let set = near_optimizers(g, p)?;
        let values = set.values(g)?;
        let mut order: Vec<usize> = (0..g.n).collect();
        order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
        constructed = Some((values[order[0]], set.base(order[0]).to_vec()));
        for &i in order.iter().take(cfg.near_optimizer_starts) {
            starts.push(set.base(i).to_vec());
        }
    } else {
        starts.push(top_eigenpair(g)?.1);
    }
    starts.extend((0..cfg.restarts).map(|r| random_start(g, r)));
    let mut best = best_of_ascents(g, p, starts, &cfg.ascent)?;
    if let Some((value, x)) = constructed {
        if value > best.value {
            let restarts_used = best.restarts_used;
            best = SolveResult {
                best: LpVector::new(x.clone())?,
                value: g.quad_form(&x),
                upper_bound: None,
                kkt_residual: {
                    let prob = DualSphereProblem { g, p, conjugate: holder_conjugate(p)? };
                    let z = prob.dual(&x);
                    probe_all(&prob, &[&z])[0].residual
                },
                method: Method::Ascent,
                restarts_used,
            };
        }
    }
    Ok(best)
}

/// `n^{-3/2} <G x, x> - t |||x|||_p^p` on `{|||x|||_2^2 = u}`.
struct RestrictedProblem<'a> {
    g: &'a MatrixSample,
    p: f64,
    t: f64,
    radius: f64,
}

impl AscentProblem for RestrictedProblem<'_> {
    fn matrix(&self) -> &MatrixSample {
        self.g
    }

    fn operand(&self, x: &[f64]) -> Vec<f64> {
        x.to_vec()
    }

    fn probe(&self, x: &[f64], _: &[f64], gx: &[f64]) -> Probe {
        let n = self.g.n as f64;
        let quad = dot(gx, x) * std::f64::consts::FRAC_1_SQRT_2;
        let pen: f64 = x.iter().map(|v| v.abs().powf(self.p)).sum::<f64>() / n;
        let value = quad * n.powf(-1.5) - self.t * pen;
        let mut grad: Vec<f64> = gx
            .iter()
            .zip(x)
            .map(|(a, v)| std::f64::consts::SQRT_2 * a * n.powf(-1.5) - self.t * self.p * v.abs().powf(self.p - 1.0) * v.signum() / n)
            .collect();
        let scale = dot(&grad, &grad).sqrt().max(f64::MIN_POSITIVE);
        let radial = dot(&grad, x) / (self.radius * self.radius);
        grad.iter_mut().zip(x).for_each(|(gi, v)| *gi -= radial * v);
        let residual = dot(&grad, &grad).sqrt();
        Probe { value, direction: grad, residual, relative_residual: residual / scale }
    }

    fn retract(&self, x: &[f64], d: &[f64], eta: f64) -> Vec<f64> {
        let mut y: Vec<f64> = x.iter().zip(d).map(|(a, b)| a + eta * b).collect();
        let r = dot(&y, &y).sqrt() / self.radius;
        y.iter_mut().for_each(|v| *v /= r);
        y
    }
}

/// Maximizes `n^{-3/2} <G x, x> - t |||x|||_p^p` over `|||x|||_2^2 = u`
/// (normalized norms) by tangential ascent on the sphere of radius
/// `sqrt(u n)`, from the top eigenvector and `cfg.restarts` random starts.
/// The value is a lower estimate of the restricted maximum divided by `n`.
pub fn solve_restricted(g: &MatrixSample, p: f64, t: f64, u: f64, cfg: &SolveConfig) -> Result<SolveResult, SolverError> {
    if !(p > 2.0 && p.is_finite()) {
        return Err(SolverError::UnsupportedExponent(p));
    }
    if !(t >= 0.0 && t.is_finite()) {
        return Err(SolverError::InvalidPenalty(t));
    }
    if !(u > 0.0 && u.is_finite()) {
        return Err(SolverError::InvalidOverlap(u));
    }
    let n = g.n as f64;
    let radius = (u * n).sqrt();
    let prob = RestrictedProblem { g, p, t, radius };
    let mut starts = vec![top_eigenpair(g)?.1];
    starts.extend((0..cfg.restarts).map(|r| random_start(g, r)));
    let count = starts.len();
    // The objective gradient scales like n^{-1} ||gbar||; the step undoes it.
    let step = cfg.ascent.initial_step.unwrap_or_else(|| n / spectral_estimate(g) * n.sqrt());
    let starts = starts
        .into_iter()
        .map(|x0| {
            let r = dot(&x0, &x0).sqrt() / radius;
            x0.iter().map(|v| v / r).collect()
        })
        .collect();
    let runs = run_ascents(&prob, starts, step, &cfg.ascent);
    let best = runs
        .into_iter()
        .reduce(|a, b| if b.probe.value > a.probe.value { b } else { a })
        .expect("at least one start");
    Ok(SolveResult {
        value: best.probe.value,
        kkt_residual: best.probe.residual,
        best: LpVector::new(best.x)?,
        upper_bound: None,
        method: Method::Restricted,
        restarts_used: count,
    })
}

/// One CSV row of a solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveRecord {
    pub seed: u64,
    pub n: usize,
    pub p: f64,
    pub method: String,
    pub value: f64,
    pub upper_bound: Option<f64>,
    pub kkt_residual: f64,
    pub restarts: usize,
}

impl SolveRecord {
    pub fn new(g: &MatrixSample, p: f64, r: &SolveResult) -> Self {
        SolveRecord {
            seed: g.seed,
            n: g.n,
            p,
            method: r.method.tag().to_string(),
            value: r.value,
            upper_bound: r.upper_bound,
            kkt_residual: r.kkt_residual,
            restarts: r.restarts_used,
        }
    }
}

/// Normalization of the value that has a finite large-`n` limit:
/// `sqrt(2 log n)` at `p = 1`, `n^{1/p*}` for `1 < p < 2` and
/// `n^{3/2 - 2/p}` for `p >= 2`.
pub fn normalization(n: usize, p: f64) -> Result<f64, SolverError> {
    let nf = n as f64;
    if p == 1.0 {
        Ok((2.0 * nf.ln()).sqrt())
    } else if p > 1.0 && p < 2.0 {
        Ok(nf.powf(1.0 / holder_conjugate(p)?))
    } else if p >= 2.0 && p.is_finite() {
        Ok(nf.powf(1.5 - 2.0 / p))
    } else {
        Err(SolverError::UnsupportedExponent(p))
    }
}

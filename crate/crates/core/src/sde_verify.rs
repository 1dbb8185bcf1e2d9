//! Monte Carlo check of the control representation
//! `Psi(0, 0) = sup_v E[f(2 int gamma v ds + sqrt2 W(u)) - int gamma v^2 ds]`,
//! whose maximizer is the feedback `v = d_x Psi(s, X(s))`.
//!
//! Paths are simulated by Euler-Maruyama on a time grid that contains every
//! breakpoint of `gamma`. Brownian paths are built segment by segment with
//! dyadic Brownian-bridge refinement, so doubling the step count reuses the
//! same path at the coarse nodes.

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::boundary::{boundary_value, BoundaryError};
use crate::core_math::stream_rng;
use crate::parisi_pde::{LevelTable, PdeError, PdeSolution};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SdeError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("path left the safe zone: |X({s})| = {x} exceeds {limit}")]
    Escaped { s: f64, x: f64, limit: f64 },
    #[error(transparent)]
    Pde(#[from] PdeError),
    #[error(transparent)]
    Boundary(#[from] BoundaryError),
}

/// Simulation controls. `paths` counts both members of each antithetic pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SdeConfig {
    /// Nominal number of time steps over `[0, u]`; each segment between
    /// breakpoints gets a power-of-two share of at least its length's worth.
    pub steps: usize,
    pub paths: usize,
    pub seed: u64,
}

impl Default for SdeConfig {
    fn default() -> Self {
        SdeConfig { steps: 64, paths: 10_000, seed: 0 }
    }
}

impl SdeConfig {
    fn validate(&self) -> Result<(), SdeError> {
        if self.steps < 10 {
            return Err(SdeError::InvalidConfig(format!("steps must be at least 10, got {}", self.steps)));
        }
        if self.paths < 100 {
            return Err(SdeError::InvalidConfig(format!("paths must be at least 100, got {}", self.paths)));
        }
        Ok(())
    }
}

/// Control applied along the path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Control {
    /// `v = d_x Psi(s, X)`.
    Optimal,
    /// `v = 0`.
    Zero,
    /// `v = d_x Psi(s, X) + eta`; its exact value deficit is `eta^2 int gamma`.
    Shifted(f64),
}

/// Mean and standard error of the pair-averaged payoff.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
    /// Largest `|X|` reached by any path.
    pub max_excursion: f64,
}

/// The simulation time grid: every breakpoint plus a uniform power-of-two
/// subdivision of each segment.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    /// Segment endpoints `0 = q_0 < q_1 < .. < u`.
    pub knots: Vec<f64>,
    /// Dyadic depth of each segment.
    pub depths: Vec<u32>,
    /// All grid times in increasing order, ending at `u`.
    pub times: Vec<f64>,
}

impl TimeGrid {
    pub fn new(breaks: &[f64], steps: usize) -> Self {
        let u = *breaks.last().unwrap();
        let mut depths = Vec::new();
        let mut times = vec![breaks[0]];
        for w in breaks.windows(2) {
            let share = steps as f64 * (w[1] - w[0]) / u;
            let depth = share.max(1.0).log2().ceil() as u32;
            depths.push(depth);
            let pieces = 1usize << depth;
            for j in 1..=pieces {
                times.push(if j == pieces { w[1] } else { w[0] + (w[1] - w[0]) * j as f64 / pieces as f64 });
            }
        }
        TimeGrid { knots: breaks.to_vec(), depths, times }
    }

    /// `W` at every grid time for antithetic pair `pair`, with `W(0) = 0`.
    /// Knot values come from one stream and each segment's bridge from its
    /// own stream, drawn coarse level first, so refinement keeps the
    /// coarser nodes.
    fn brownian(&self, seed: u64, pair: u64) -> Vec<f64> {
        let segments = self.depths.len() as u64;
        let mut knot_rng = stream_rng(seed, pair * (segments + 1));
        let mut knot_w = vec![0.0];
        for w in self.knots.windows(2) {
            let z: f64 = StandardNormal.sample(&mut knot_rng);
            knot_w.push(knot_w.last().unwrap() + (w[1] - w[0]).sqrt() * z);
        }
        let mut out = vec![0.0];
        for (seg, w) in self.knots.windows(2).enumerate() {
            let pieces = 1usize << self.depths[seg];
            let mut vals = vec![f64::NAN; pieces + 1];
            vals[0] = knot_w[seg];
            vals[pieces] = knot_w[seg + 1];
            let mut rng = stream_rng(seed, pair * (segments + 1) + seg as u64 + 1);
            let dt = (w[1] - w[0]) / pieces as f64;
            let mut stride = pieces;
            while stride > 1 {
                let half = stride / 2;
                let sd = (dt * half as f64 / 2.0).sqrt();
                let mut left = 0;
                while left < pieces {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    vals[left + half] = 0.5 * (vals[left] + vals[left + stride]) + sd * z;
                    left += stride;
                }
                stride = half;
            }
            out.extend_from_slice(&vals[1..]);
        }
        out
    }
}

/// `d_x Psi` tables at every grid time except `u`.
fn drift_tables(sol: &mut PdeSolution, grid: &TimeGrid) -> Result<Vec<LevelTable>, SdeError> {
    let n = grid.times.len() - 1;
    let mut tables = Vec::with_capacity(n);
    for &s in &grid.times[..n] {
        tables.push(sol.slice(s)?);
    }
    Ok(tables)
}

struct PathOutcome {
    payoff: f64,
    excursion: f64,
}

fn run_path(
    sol: &PdeSolution,
    grid: &TimeGrid,
    tables: &[LevelTable],
    w: &[f64],
    sign: f64,
    control: Control,
    limit: f64,
) -> Result<PathOutcome, SdeError> {
    let mut x = 0.0_f64;
    let mut cost = 0.0;
    let mut excursion: f64 = 0.0;
    for j in 0..tables.len() {
        let s = grid.times[j];
        let ds = grid.times[j + 1] - s;
        let gamma = sol.gamma.at(s);
        let v = match control {
            Control::Zero => 0.0,
            Control::Optimal => tables[j].eval(x).1,
            Control::Shifted(eta) => tables[j].eval(x).1 + eta,
        };
        cost += gamma * v * v * ds;
        x += 2.0 * gamma * v * ds + std::f64::consts::SQRT_2 * sign * (w[j + 1] - w[j]);
        excursion = excursion.max(x.abs());
        if excursion > limit || !x.is_finite() {
            return Err(SdeError::Escaped { s: grid.times[j + 1], x, limit });
        }
    }
    Ok(PathOutcome { payoff: boundary_value(x, &sol.params)? - cost, excursion })
}

/// Pair-averaged payoffs for each control, sharing the Brownian paths.
fn simulate_controls(sol: &mut PdeSolution, controls: &[Control], cfg: &SdeConfig) -> Result<Vec<Vec<f64>>, SdeError> {
    cfg.validate()?;
    let grid = TimeGrid::new(sol.gamma.breaks(), cfg.steps);
    let tables = drift_tables(sol, &grid)?;
    let limit = 8.0 * sol.extent();
    let pairs = cfg.paths.div_ceil(2);
    let sol_ref: &PdeSolution = sol;
    let per_pair: Vec<Result<(Vec<f64>, f64), SdeError>> = (0..pairs)
        .into_par_iter()
        .map(|k| {
            let w = grid.brownian(cfg.seed, k as u64);
            let mut means = Vec::with_capacity(controls.len());
            let mut exc: f64 = 0.0;
            for &c in controls {
                let a = run_path(sol_ref, &grid, &tables, &w, 1.0, c, limit)?;
                let b = run_path(sol_ref, &grid, &tables, &w, -1.0, c, limit)?;
                exc = exc.max(a.excursion).max(b.excursion);
                means.push(0.5 * (a.payoff + b.payoff));
            }
            Ok((means, exc))
        })
        .collect();
    let mut columns = vec![Vec::with_capacity(pairs); controls.len()];
    let mut excursion: f64 = 0.0;
    for r in per_pair {
        let (means, exc) = r?;
        excursion = excursion.max(exc);
        for (col, m) in columns.iter_mut().zip(means) {
            col.push(m);
        }
    }
    columns.push(vec![excursion]);
    Ok(columns)
}

/// Sample mean and standard error, summed in index order.
fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, (var / n).sqrt())
}

/// Estimate of `E[f(X(u)) - int gamma v^2 ds]` under `control`, using the
/// measure and terminal data stored in `sol`.
pub fn simulate_control(sol: &mut PdeSolution, control: Control, cfg: &SdeConfig) -> Result<Estimate, SdeError> {
    let cols = simulate_controls(sol, &[control], cfg)?;
    let (mean, stderr) = mean_stderr(&cols[0]);
    Ok(Estimate { mean, stderr, max_excursion: cols[1][0] })
}

/// Estimate under the optimal feedback `v = d_x Psi(s, X)`.
pub fn simulate_optimal_control(sol: &mut PdeSolution, cfg: &SdeConfig) -> Result<Estimate, SdeError> {
    simulate_control(sol, Control::Optimal, cfg)
}

/// Value deficit of a shifted control relative to the optimal one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapPoint {
    pub eta: f64,
    /// Mean of optimal minus shifted payoff over common paths.
    pub gap: f64,
    pub stderr: f64,
    /// `eta^2 int_0^u gamma(s) ds`.
    pub predicted: f64,
}

/// Gaps of `v = d_x Psi + eta` for each `eta`, on common paths.
pub fn control_gap_scan(sol: &mut PdeSolution, etas: &[f64], cfg: &SdeConfig) -> Result<Vec<GapPoint>, SdeError> {
    let mut controls = vec![Control::Optimal];
    controls.extend(etas.iter().map(|&e| Control::Shifted(e)));
    let cols = simulate_controls(sol, &controls, cfg)?;
    let mass = sol.gamma.mass();
    Ok(etas
        .iter()
        .enumerate()
        .map(|(i, &eta)| {
            let diff: Vec<f64> = cols[0].iter().zip(&cols[i + 1]).map(|(a, b)| a - b).collect();
            let (gap, stderr) = mean_stderr(&diff);
            GapPoint { eta, gap, stderr, predicted: eta * eta * mass }
        })
        .collect())
}

/// JSON verification record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerificationRecord {
    pub psi_pde: f64,
    pub psi_sde_mean: f64,
    pub stderr: f64,
    pub steps: usize,
    pub paths: usize,
    pub pass: bool,
}

/// Compares the optimal-control estimate with `Psi(0, 0)`; passes within
/// `3 stderr + tolerance`.
pub fn verify(sol: &mut PdeSolution, cfg: &SdeConfig, tolerance: f64) -> Result<VerificationRecord, SdeError> {
    let est = simulate_optimal_control(sol, cfg)?;
    let psi = sol.value_at_origin;
    Ok(VerificationRecord {
        psi_pde: psi,
        psi_sde_mean: est.mean,
        stderr: est.stderr,
        steps: cfg.steps,
        paths: cfg.paths,
        pass: (est.mean - psi).abs() <= 3.0 * est.stderr + tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boundary::BoundaryParams;
    use crate::core_math::gauss_legendre;
    use crate::parisi_pde::{solve_parisi_pde, AtomicMeasure, GridConfig};
    use approx::assert_relative_eq;

    fn solved(lambda: f64, gamma: &AtomicMeasure) -> PdeSolution {
        let prm = BoundaryParams::new(4.0, 1.0, lambda).unwrap();
        solve_parisi_pde(gamma, &prm, &GridConfig::default()).unwrap()
    }

    #[test]
    fn grid_contains_breakpoints_and_refines_dyadically() {
        let g = TimeGrid::new(&[0.0, 0.1, 0.35, 0.5], 20);
        for b in [0.0, 0.1, 0.35, 0.5] {
            assert!(g.times.contains(&b));
        }
        assert!(g.times.windows(2).all(|w| w[1] > w[0]));
        let fine = TimeGrid::new(&[0.0, 0.1, 0.35, 0.5], 40);
        assert!(g.depths.iter().zip(&fine.depths).all(|(a, b)| b == &(a + 1)));
        // Coarse nodes keep their Brownian values under refinement.
        let wc = g.brownian(3, 5);
        let wf = fine.brownian(3, 5);
        for (i, t) in g.times.iter().enumerate() {
            let j = fine.times.iter().position(|s| (s - t).abs() < 1e-15).unwrap();
            assert_eq!(wc[i], wf[j]);
        }
    }

    #[test]
    fn brownian_increments_have_the_right_variance() {
        let g = TimeGrid::new(&[0.0, 0.2, 0.5], 16);
        let mut sum2 = 0.0;
        let mut end2 = 0.0;
        let reps = 4000;
        for k in 0..reps {
            let w = g.brownian(9, k);
            sum2 += (w[3] - w[2]).powi(2) / (g.times[3] - g.times[2]);
            end2 += w.last().unwrap().powi(2) / 0.5;
        }
        assert_relative_eq!(sum2 / reps as f64, 1.0, epsilon = 0.08);
        assert_relative_eq!(end2 / reps as f64, 1.0, epsilon = 0.08);
    }

    #[test]
    fn zero_measure_matches_quadrature() {
        let u = 0.4;
        let gamma = AtomicMeasure::constant(u, 0.0).unwrap();
        let mut sol = solved(0.3, &gamma);
        let est = simulate_optimal_control(&mut sol, &SdeConfig { steps: 16, paths: 4000, seed: 1 }).unwrap();
        // Composite Gauss-Legendre on each side of the kink at 0.
        let (nodes, weights) = gauss_legendre(20);
        let sigma = (2.0 * u).sqrt();
        let panels = 48;
        let width = 12.0 / panels as f64;
        let mut direct = 0.0;
        for side in [-1.0, 1.0] {
            for k in 0..panels {
                let (a, b) = (k as f64 * width, (k + 1) as f64 * width);
                for (z, w) in nodes.iter().zip(&weights) {
                    let y = 0.5 * (a + b) + 0.5 * (b - a) * z;
                    let density = (-0.5 * y * y).exp() / (2.0 * std::f64::consts::PI).sqrt();
                    direct += 0.5 * (b - a) * w * density * boundary_value(side * sigma * y, &sol.params).unwrap();
                }
            }
        }
        assert!((est.mean - direct).abs() <= 3.0 * est.stderr, "{} vs {direct} ({})", est.mean, est.stderr);
        assert!((sol.value_at_origin - direct).abs() < 1e-6);
    }

    #[test]
    fn optimal_control_matches_pde_value() {
        let gamma = AtomicMeasure::new(0.5, &[0.2], &[0.8, 2.0]).unwrap();
        let mut sol = solved(0.2, &gamma);
        let rec = verify(&mut sol, &SdeConfig { steps: 64, paths: 4000, seed: 2 }, 1e-3).unwrap();
        assert!(rec.pass, "{rec:?}");
        let zero = simulate_control(&mut sol, Control::Zero, &SdeConfig { steps: 64, paths: 4000, seed: 2 }).unwrap();
        assert!(zero.mean <= sol.value_at_origin + 3.0 * zero.stderr);
    }

    #[test]
    fn shifted_controls_lose_quadratically() {
        let gamma = AtomicMeasure::new(0.5, &[0.2], &[0.8, 2.0]).unwrap();
        let mut sol = solved(0.2, &gamma);
        let gaps = control_gap_scan(&mut sol, &[0.0, 0.1, 0.2], &SdeConfig { steps: 64, paths: 2000, seed: 4 }).unwrap();
        assert_eq!(gaps[0].gap, 0.0);
        assert!(gaps[1].gap > 0.0 && gaps[2].gap > 0.0);
        let ratio = gaps[2].gap / gaps[1].gap;
        assert!((ratio - 4.0).abs() <= 1.0, "ratio {ratio}");
        assert_relative_eq!(gaps[1].gap, gaps[1].predicted, max_relative = 0.25);
    }

    #[test]
    fn step_doubling_moves_the_estimate_less_than_its_error() {
        let gamma = AtomicMeasure::new(0.5, &[0.2], &[0.8, 2.0]).unwrap();
        let mut sol = solved(0.2, &gamma);
        let coarse = simulate_optimal_control(&mut sol, &SdeConfig { steps: 32, paths: 4000, seed: 6 }).unwrap();
        let fine = simulate_optimal_control(&mut sol, &SdeConfig { steps: 64, paths: 4000, seed: 6 }).unwrap();
        assert!((coarse.mean - fine.mean).abs() < fine.stderr, "{coarse:?} {fine:?}");
    }

    #[test]
    fn configuration_is_validated() {
        let gamma = AtomicMeasure::constant(0.3, 1.0).unwrap();
        let mut sol = solved(0.0, &gamma);
        assert!(simulate_optimal_control(&mut sol, &SdeConfig { steps: 5, paths: 1000, seed: 0 }).is_err());
        assert!(simulate_optimal_control(&mut sol, &SdeConfig { steps: 20, paths: 10, seed: 0 }).is_err());
    }
}

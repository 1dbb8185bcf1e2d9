//! Backward equation `d_s Psi = -(d_xx Psi + gamma(s) (d_x Psi)^2)` with
//! terminal data `f` at `s = u` and a piecewise-constant `gamma`.
//!
//! On each level the equation is solved exactly by the Hopf-Cole transform,
//! so only the Gaussian expectations and the spatial tables are discretized.
//! Tables hold values and slopes on a uniform half-grid (solutions are even)
//! and are interpolated by cubic Hermite polynomials.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::boundary::{boundary_value, BoundaryError, BoundaryParams, BoundaryTable};
use crate::core_math::{gauss_hermite_grid, gauss_legendre, MathError};

/// Minimal spacing between consecutive breakpoints; closer atoms are merged.
pub const SEPARATION_FLOOR: f64 = 1e-9;

/// Gaussian window half-width before any tilt correction (`exp(-z^2/2) ~ 2e-16`).
const BASE_WINDOW: f64 = 8.5;
const MAX_WINDOW: f64 = 60.0;
/// Tilted mass allowed on the outermost Gauss-Hermite nodes.
const TAIL_TOLERANCE: f64 = 1e-11;
/// Geometric refinement of the terminal panels next to the kink.
const GRADING_LEVELS: usize = 4;
/// Widest Gauss-Legendre panel, in standard deviations.
const PANEL_WIDTH: f64 = 4.0;
const GRADING_RATIO: f64 = 0.125;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PdeError {
    #[error("invalid measure: {0}")]
    InvalidMeasure(String),
    #[error("invalid grid configuration: {0}")]
    InvalidGrid(String),
    #[error("tilted Gaussian window exceeds the supported range (m = {m}, sigma = {sigma})")]
    TiltTooLarge { m: f64, sigma: f64 },
    #[error("non-finite value in level {level}")]
    NonFinite { level: usize },
    #[error("query (s = {s}, x = {x}) lies outside the safe zone")]
    OutsideGrid { s: f64, x: f64 },
    #[error("probe at s = {0} is too close to a breakpoint")]
    ProbeAtBreakpoint(f64),
    #[error(transparent)]
    Boundary(#[from] BoundaryError),
    #[error(transparent)]
    Math(#[from] MathError),
}

/// Piecewise-constant `gamma` on `[0, u]`: value `m[l]` on
/// `[breaks[l], breaks[l + 1])`, with `breaks = [0, q_1, .., q_k, u]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtomicMeasure {
    breaks: Vec<f64>,
    m: Vec<f64>,
}

impl AtomicMeasure {
    /// `q` are the interior breakpoints `q_1 < .. < q_k` in `(0, u)`, and `m`
    /// holds `m_0 <= .. <= m_k`. Levels narrower than the separation floor
    /// or with equal heights are merged.
    pub fn new(u: f64, q: &[f64], m: &[f64]) -> Result<Self, PdeError> {
        let bad = |s: &str| Err(PdeError::InvalidMeasure(s.to_string()));
        if !(u > 0.0 && u.is_finite()) {
            return bad("u must be positive and finite");
        }
        if m.len() != q.len() + 1 {
            return bad("need exactly one more height than interior breakpoint");
        }
        if m.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return bad("heights must be finite and nonnegative");
        }
        if m.windows(2).any(|w| w[1] < w[0]) {
            return bad("heights must be nondecreasing");
        }
        if q.iter().any(|v| !v.is_finite()) || q.windows(2).any(|w| w[1] < w[0]) {
            return bad("breakpoints must be finite and increasing");
        }
        if q.first().is_some_and(|&v| v < 0.0) || q.last().is_some_and(|&v| v > u) {
            return bad("breakpoints must lie in [0, u]");
        }
        // Drop degenerate levels (their span goes to a neighbour), then merge
        // neighbours of equal height.
        let rights: Vec<f64> = q.iter().copied().chain(std::iter::once(u)).collect();
        let mut levels: Vec<(f64, f64)> = Vec::new();
        let mut left = 0.0;
        for (l, &right) in rights.iter().enumerate() {
            if right - left >= SEPARATION_FLOOR {
                levels.push((right, m[l]));
                left = right;
            }
        }
        match levels.last_mut() {
            Some(last) => last.0 = u,
            None => levels.push((u, m[m.len() - 1])),
        }
        let mut breaks = vec![0.0];
        let mut heights: Vec<f64> = Vec::new();
        for (right, h) in levels {
            if heights.last() == Some(&h) {
                *breaks.last_mut().unwrap() = right;
            } else {
                breaks.push(right);
                heights.push(h);
            }
        }
        Ok(AtomicMeasure { breaks, m: heights })
    }

    /// Constant `gamma = m0` on `[0, u]`.
    pub fn constant(u: f64, m0: f64) -> Result<Self, PdeError> {
        Self::new(u, &[], &[m0])
    }

    pub fn u(&self) -> f64 {
        *self.breaks.last().unwrap()
    }

    /// Number of interior breakpoints `k`.
    pub fn k(&self) -> usize {
        self.m.len() - 1
    }

    pub fn breaks(&self) -> &[f64] {
        &self.breaks
    }

    pub fn interior(&self) -> &[f64] {
        &self.breaks[1..self.breaks.len() - 1]
    }

    pub fn heights(&self) -> &[f64] {
        &self.m
    }

    pub fn max_height(&self) -> f64 {
        *self.m.last().unwrap()
    }

    /// Level index containing `s` (right-continuous; `s = u` maps to the top).
    pub fn level_of(&self, s: f64) -> usize {
        let k = self.m.len();
        (1..k).take_while(|&l| s >= self.breaks[l]).count().min(k - 1)
    }

    /// `gamma(s)`.
    pub fn at(&self, s: f64) -> f64 {
        self.m[self.level_of(s)]
    }

    /// `int_0^u gamma(s) ds`.
    pub fn mass(&self) -> f64 {
        self.m
            .iter()
            .enumerate()
            .map(|(l, ml)| ml * (self.breaks[l + 1] - self.breaks[l]))
            .sum()
    }
}

/// `int_0^u s gamma(s) ds`.
pub fn measure_moment(gamma: &AtomicMeasure) -> f64 {
    gamma
        .m
        .iter()
        .enumerate()
        .map(|(l, ml)| 0.5 * ml * (gamma.breaks[l + 1].powi(2) - gamma.breaks[l].powi(2)))
        .sum()
}

/// Discretization controls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    /// Gauss-Hermite order on smooth levels; the terminal level uses
    /// Gauss-Legendre panels of order `quad_order / 2` split at the kink.
    pub quad_order: usize,
    /// Spatial step as a fraction of the grid half-width.
    pub grid_step: f64,
    /// Nodes of the terminal lookup table.
    pub boundary_nodes: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            quad_order: 32,
            grid_step: 2e-3,
            boundary_nodes: 4096,
        }
    }
}

impl GridConfig {
    fn validate(&self) -> Result<(), PdeError> {
        if !(self.grid_step > 0.0 && self.grid_step <= 0.5) {
            return Err(PdeError::InvalidGrid(format!("grid_step {}", self.grid_step)));
        }
        if self.boundary_nodes < 16 {
            return Err(PdeError::InvalidGrid("boundary_nodes < 16".into()));
        }
        if !(4..=512).contains(&self.quad_order) {
            return Err(PdeError::InvalidGrid(format!("quad_order {}", self.quad_order)));
        }
        Ok(())
    }

    fn panel_order(&self) -> usize {
        (self.quad_order / 2).max(4)
    }
}

/// Grid half-width for a measure: eight diffusion widths, widened by the
/// drift that the total mass of `gamma` can induce.
pub fn grid_extent(gamma: &AtomicMeasure) -> f64 {
    8.0 * (2.0 * gamma.u()).sqrt() * (1.0 + gamma.mass())
}

/// Uniform half-grid `x_i = i * step` with values and slopes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HalfGrid {
    pub step: f64,
    pub values: Vec<f64>,
    pub slopes: Vec<f64>,
}

impl HalfGrid {
    pub fn extent(&self) -> f64 {
        self.step * (self.values.len() - 1) as f64
    }

    /// Cubic Hermite interpolation at `0 <= a <= extent`.
    #[inline]
    fn hermite(&self, a: f64) -> (f64, f64) {
        let n = self.values.len() - 1;
        let pos = a / self.step;
        let i = (pos as usize).min(n - 1);
        let s = pos - i as f64;
        let h = self.step;
        let (f0, f1) = (self.values[i], self.values[i + 1]);
        let (d0, d1) = (self.slopes[i] * h, self.slopes[i + 1] * h);
        let s2 = s * s;
        let s3 = s2 * s;
        let v = (2.0 * s3 - 3.0 * s2 + 1.0) * f0
            + (s3 - 2.0 * s2 + s) * d0
            + (-2.0 * s3 + 3.0 * s2) * f1
            + (s3 - s2) * d1;
        let dv = ((6.0 * s2 - 6.0 * s) * (f0 - f1)
            + (3.0 * s2 - 4.0 * s + 1.0) * d0
            + (3.0 * s2 - 2.0 * s) * d1)
            / h;
        (v, dv)
    }
}

/// Values and slopes of `Psi(s, .)` for `x >= 0`: a uniform outer grid and,
/// when `Psi(s, .)` varies on a scale below the outer step near the origin,
/// a finer inner grid covering that zone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelTable {
    pub s: f64,
    /// Diffusion width from `s` to `u`.
    pub scale: f64,
    pub outer: HalfGrid,
    pub inner: Option<HalfGrid>,
    /// Growth exponent of the tail extrapolation.
    pub tail_exponent: f64,
}

impl LevelTable {
    pub fn extent(&self) -> f64 {
        self.outer.extent()
    }

    /// `(Psi, d_x Psi)` at `x`; even extension, power-law tail beyond the grid.
    #[inline]
    pub fn eval(&self, x: f64) -> (f64, f64) {
        let a = x.abs();
        let sign = if x < 0.0 { -1.0 } else { 1.0 };
        if let Some(inner) = &self.inner {
            if a < inner.extent() {
                let (v, d) = inner.hermite(a);
                return (v, sign * d);
            }
        }
        let xe = self.extent();
        if a >= xe {
            let n = self.outer.values.len() - 1;
            let alpha = self.tail_exponent;
            let b = (self.outer.slopes[n] / (alpha * xe.powf(alpha - 1.0))).max(0.0);
            let c = self.outer.values[n] - b * xe.powf(alpha);
            return (c + b * a.powf(alpha), sign * b * alpha * a.powf(alpha - 1.0));
        }
        let (v, d) = self.outer.hermite(a);
        (v, sign * d)
    }
}

/// Quadrature rules shared across levels.
#[derive(Debug, Clone)]
struct Rules {
    /// Standard-normal Gauss-Hermite nodes and weights.
    gh_nodes: Vec<f64>,
    gh_weights: Vec<f64>,
    /// Gauss-Legendre on `[-1, 1]` for the terminal panels.
    gl_nodes: Vec<f64>,
    gl_weights: Vec<f64>,
    /// Largest Gauss-Hermite node.
    gh_reach: f64,
}

impl Rules {
    fn new(cfg: &GridConfig) -> Result<Self, PdeError> {
        let (gh_nodes, gh_weights) = gauss_hermite_grid(cfg.quad_order)?.standard_normal();
        let (gl_nodes, gl_weights) = gauss_legendre(cfg.panel_order());
        let gh_reach = gh_nodes.iter().fold(0.0_f64, |a, z| a.max(z.abs()));
        Ok(Rules {
            gh_reach,
            gh_nodes,
            gh_weights,
            gl_nodes,
            gl_weights,
        })
    }

    /// Gaussian-weighted Gauss-Legendre nodes on `[-window, window]`, split
    /// at `kink` when it falls inside, with panels at most `PANEL_WIDTH` wide.
    fn terminal_nodes(&self, window: f64, kink: f64, out: &mut Vec<(f64, f64)>) {
        out.clear();
        let mut cuts = vec![-window];
        if kink > -window && kink < window {
            cuts.push(kink);
        }
        cuts.push(window);
        let inv_sqrt_2pi = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
        let mut push_panel = |lo: f64, hi: f64| {
            let (mid, half) = (0.5 * (lo + hi), 0.5 * (hi - lo));
            for (t, w) in self.gl_nodes.iter().zip(&self.gl_weights) {
                let z = mid + half * t;
                out.push((z, half * w * inv_sqrt_2pi * (-0.5 * z * z).exp()));
            }
        };
        for piece in cuts.windows(2) {
            let (a, b) = (piece[0], piece[1]);
            let panels = ((b - a) / PANEL_WIDTH).ceil().max(1.0) as usize;
            let width = (b - a) / panels as f64;
            for j in 0..panels {
                let lo = a + width * j as f64;
                let hi = lo + width;
                // Geometric grading towards the kink, where the terminal
                // data can be non-smooth.
                let at_kink_lo = j == 0 && a == kink;
                let at_kink_hi = j + 1 == panels && b == kink;
                if at_kink_lo || at_kink_hi {
                    let mut edges = vec![0.0];
                    edges.extend((0..GRADING_LEVELS).rev().map(|e| width * GRADING_RATIO.powi(e as i32 + 1)));
                    edges.push(width);
                    for e in edges.windows(2) {
                        if at_kink_lo {
                            push_panel(lo + e[0], lo + e[1]);
                        } else {
                            push_panel(hi - e[1], hi - e[0]);
                        }
                    }
                } else {
                    push_panel(lo, hi);
                }
            }
        }
    }
}

/// `(1/m) log sum_j w_j exp(m v_j)` and the tilted mean of `d_j`, computed
/// relative to the weighted mean so small `m` loses no precision.
/// Returns the tilted mass carried by the flagged tail nodes as third value.
#[inline]
fn tilted_average(m: f64, samples: &[(f64, f64, f64, bool)]) -> (f64, f64, f64) {
    let wsum: f64 = samples.iter().map(|s| s.0).sum();
    let mean = samples.iter().map(|s| s.0 * s.1).sum::<f64>() / wsum;
    if m == 0.0 {
        let d = samples.iter().map(|s| s.0 * s.2).sum::<f64>() / wsum;
        return (mean, d, 0.0);
    }
    let amax = samples
        .iter()
        .map(|s| m * (s.1 - mean))
        .fold(f64::NEG_INFINITY, f64::max);
    let (mut tw, mut td, mut tail) = (0.0, 0.0, 0.0);
    let value = if amax <= 30.0 {
        // Weights exp(a_j) = 1 + expm1(a_j), no rescaling needed.
        let mut excess = wsum - 1.0;
        for s in samples {
            let e1 = (m * (s.1 - mean)).exp_m1();
            excess += s.0 * e1;
            let e = s.0 * (1.0 + e1);
            tw += e;
            td += e * s.2;
            if s.3 {
                tail += e;
            }
        }
        mean + excess.ln_1p() / m
    } else {
        for s in samples {
            let e = (m * (s.1 - mean) - amax).exp() * s.0;
            tw += e;
            td += e * s.2;
            if s.3 {
                tail += e;
            }
        }
        mean + (amax + tw.ln()) / m
    };
    (value, td / tw, tail / tw)
}

/// Parisi-type solution: one table per interior breakpoint plus the
/// terminal function, and the value at the origin.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PdeSolution {
    pub gamma: AtomicMeasure,
    pub params: BoundaryParams,
    pub config: GridConfig,
    /// Tables at `q_1, .., q_k` (index `l - 1` holds `Psi(q_l, .)`).
    pub tables: Vec<LevelTable>,
    pub value_at_origin: f64,
    /// Gaussian window half-width used on each level.
    pub windows: Vec<f64>,
    /// Largest tilted mass observed on the outermost Gauss-Hermite nodes.
    pub max_tail_mass: f64,
    #[serde(skip)]
    terminal: Option<BoundaryTable>,
    #[serde(skip)]
    rules: Option<Rules>,
}

/// Source of values for a Hopf-Cole step.
enum Source<'a> {
    Terminal(&'a TerminalEval),
    Table(&'a LevelTable),
}

/// Terminal evaluator: tabulated when a table exists, exact otherwise.
enum TerminalEval {
    Table(BoundaryTable),
    Exact(BoundaryParams),
}

impl TerminalEval {
    #[inline]
    fn eval(&self, y: f64) -> (f64, f64) {
        match self {
            TerminalEval::Table(t) => t.eval(y),
            TerminalEval::Exact(prm) => {
                let v = boundary_value(y, prm).unwrap_or(f64::NAN);
                let d = crate::boundary::boundary_argmax(y, prm).unwrap_or(f64::NAN);
                (v, d)
            }
        }
    }
}

struct Stepper<'a> {
    rules: &'a Rules,
    scratch: Vec<(f64, f64, f64, bool)>,
    nodes: Vec<(f64, f64)>,
}

impl<'a> Stepper<'a> {
    fn new(rules: &'a Rules) -> Self {
        Stepper {
            rules,
            scratch: Vec::new(),
            nodes: Vec::new(),
        }
    }

    /// One Hopf-Cole step at `x` with diffusion width `sigma` and height `m`.
    fn step(&mut self, src: &Source, m: f64, sigma: f64, window: f64, x: f64) -> (f64, f64, f64) {
        self.scratch.clear();
        let kink = if sigma > 0.0 { -x / sigma } else { f64::INFINITY };
        let kink_inside = kink.abs() <= self.rules.gh_reach.max(window);
        // Panels split at the origin whenever the source may be non-smooth
        // there on the scale of the Gauss-Hermite nodes.
        let panels = match src {
            Source::Terminal(_) => window > BASE_WINDOW || kink_inside,
            Source::Table(tab) => kink_inside && tab.scale < PANEL_TRIGGER * sigma,
        };
        let eval = |y: f64| match src {
            Source::Terminal(term) => term.eval(y),
            Source::Table(tab) => tab.eval(y),
        };
        if panels {
            let mut nodes = std::mem::take(&mut self.nodes);
            self.rules.terminal_nodes(window, kink, &mut nodes);
            for &(z, w) in &nodes {
                let (v, d) = eval(x + sigma * z);
                self.scratch.push((w, v, d, false));
            }
            self.nodes = nodes;
        } else {
            let last = self.rules.gh_nodes.len() - 1;
            for (j, (z, w)) in self.rules.gh_nodes.iter().zip(&self.rules.gh_weights).enumerate() {
                let (v, d) = eval(x + sigma * z);
                self.scratch.push((*w, v, d, j == 0 || j == last));
            }
        }
        tilted_average(m, &self.scratch)
    }
}

/// Window half-width on one level such that the tilted integrand is
/// negligible beyond it for every `|x| <= reach`.
fn tilt_window(src: &Source, m: f64, sigma: f64, reach: f64) -> Result<f64, PdeError> {
    if m == 0.0 || sigma == 0.0 {
        return Ok(BASE_WINDOW);
    }
    let value = |y: f64| match src {
        Source::Terminal(term) => term.eval(y).0,
        Source::Table(tab) => tab.eval(y).0,
    };
    let f_reach = value(reach);
    let mut z = BASE_WINDOW;
    while z <= MAX_WINDOW {
        let gain = m * (value(reach + sigma * z) - f_reach);
        if -0.5 * z * z + gain <= -37.0 {
            return Ok(z);
        }
        z += 0.5;
    }
    Err(PdeError::TiltTooLarge { m, sigma })
}

fn tail_exponent(p: f64) -> f64 {
    p / (p - 1.0)
}

/// Table sources narrower than this fraction of the step width are
/// integrated with panels split at the origin.
const PANEL_TRIGGER: f64 = 0.5;
/// Inner refinement is added when `Psi(s, .)` varies on a scale below this
/// many outer steps.
const INNER_TRIGGER: f64 = 2.0;
/// Half-width of the inner zone in units of the variation scale.
const INNER_ZONE: f64 = 8.0;
/// Inner nodes per unit of the variation scale.
const INNER_RESOLUTION: f64 = 8.0;
/// Largest ratio of outer to inner step.
const INNER_MAX_REFINEMENT: f64 = 256.0;

/// Layout of one tabulated level.
struct TableSpec {
    s: f64,
    extent: f64,
    step: f64,
    /// Diffusion width between `s` and `u`, the scale on which `Psi(s, .)`
    /// can vary near the origin.
    scale: f64,
    window: f64,
    tail_exponent: f64,
}

fn tabulate(stepper: &mut Stepper, src: &Source, m: f64, sigma: f64, window: f64, step: f64, n: usize) -> (HalfGrid, f64) {
    let mut values = Vec::with_capacity(n + 1);
    let mut slopes = Vec::with_capacity(n + 1);
    let mut max_tail: f64 = 0.0;
    for i in 0..=n {
        let (v, d, tail) = stepper.step(src, m, sigma, window, step * i as f64);
        max_tail = max_tail.max(tail);
        values.push(v);
        slopes.push(if i == 0 { 0.0 } else { d });
    }
    (HalfGrid { step, values, slopes }, max_tail)
}

/// Tabulates one Hopf-Cole step from `src`; returns the table and the largest
/// tail mass seen.
fn build_table(stepper: &mut Stepper, src: &Source, m: f64, sigma: f64, spec: &TableSpec) -> (LevelTable, f64) {
    let n = (spec.extent / spec.step).round() as usize;
    let (outer, mut max_tail) = tabulate(stepper, src, m, sigma, spec.window, spec.step, n);
    let inner = if spec.scale < INNER_TRIGGER * spec.step {
        let fine = (spec.scale / INNER_RESOLUTION).max(spec.step / INNER_MAX_REFINEMENT);
        let zone = (2.0 * spec.step + INNER_ZONE * spec.scale).min(spec.extent);
        let (grid, tail) = tabulate(stepper, src, m, sigma, spec.window, fine, (zone / fine).ceil() as usize);
        max_tail = max_tail.max(tail);
        Some(grid)
    } else {
        None
    };
    let table = LevelTable { s: spec.s, scale: spec.scale, outer, inner, tail_exponent: spec.tail_exponent };
    (table, max_tail)
}

impl LevelTable {
    fn is_finite(&self) -> bool {
        std::iter::once(&self.outer)
            .chain(self.inner.as_ref())
            .all(|g| g.values.iter().chain(&g.slopes).all(|v| v.is_finite()))
    }
}

/// Solves the backward equation for `gamma` and terminal data `params`.
pub fn solve_parisi_pde(
    gamma: &AtomicMeasure,
    params: &BoundaryParams,
    cfg: &GridConfig,
) -> Result<PdeSolution, PdeError> {
    cfg.validate()?;
    let rules = Rules::new(cfg)?;
    let u = gamma.u();
    let k = gamma.k();
    let breaks = gamma.breaks();
    let heights = gamma.heights();
    let extent = grid_extent(gamma);
    let n_steps = (1.0 / cfg.grid_step).round().max(4.0) as usize;
    let step = extent / n_steps as f64;

    let sigma_top = (2.0 * (u - breaks[k])).sqrt();
    let reach = if k == 0 { 0.0 } else { extent };
    let terminal = if k == 0 {
        TerminalEval::Exact(*params)
    } else {
        let y_max = reach + sigma_top * MAX_WINDOW.min(BASE_WINDOW + 8.0 * (1.0 + heights[k]));
        TerminalEval::Table(BoundaryTable::new(*params, y_max, cfg.boundary_nodes)?)
    };

    let mut stepper = Stepper::new(&rules);
    let mut tables: Vec<LevelTable> = Vec::with_capacity(k);
    let mut max_tail: f64 = 0.0;
    let mut origin = f64::NAN;
    let mut windows = vec![BASE_WINDOW; k + 1];
    for l in (0..=k).rev() {
        let sigma = (2.0 * (breaks[l + 1] - breaks[l])).sqrt();
        let src = if l == k {
            Source::Terminal(&terminal)
        } else {
            Source::Table(tables.last().unwrap())
        };
        let window = tilt_window(&src, heights[l], sigma, if l == 0 { 0.0 } else { extent })?;
        windows[l] = window;
        if l == 0 {
            let (v, _, tail) = stepper.step(&src, heights[0], sigma, window, 0.0);
            max_tail = max_tail.max(tail);
            origin = v;
            break;
        }
        let scale = (2.0 * (u - breaks[l])).sqrt();
        let spec = TableSpec { s: breaks[l], extent, step, scale, window, tail_exponent: tail_exponent(params.p) };
        let (table, tail) = build_table(&mut stepper, &src, heights[l], sigma, &spec);
        max_tail = max_tail.max(tail);
        if !table.is_finite() {
            return Err(PdeError::NonFinite { level: l });
        }
        tables.push(table);
    }
    if !origin.is_finite() {
        return Err(PdeError::NonFinite { level: 0 });
    }
    if max_tail > TAIL_TOLERANCE {
        return Err(PdeError::TiltTooLarge {
            m: gamma.max_height(),
            sigma: (2.0 * u).sqrt(),
        });
    }
    tables.reverse();
    Ok(PdeSolution {
        gamma: gamma.clone(),
        params: *params,
        config: *cfg,
        tables,
        value_at_origin: origin,
        windows,
        max_tail_mass: max_tail,
        terminal: match terminal {
            TerminalEval::Table(t) => Some(t),
            TerminalEval::Exact(_) => None,
        },
        rules: Some(rules),
    })
}

/// `Psi(0, 0) - lambda u - int s gamma(s) ds`.
pub fn parisi_functional(
    lambda: f64,
    gamma: &AtomicMeasure,
    p: f64,
    t: f64,
    cfg: &GridConfig,
) -> Result<f64, PdeError> {
    let params = BoundaryParams::new(p, t, lambda)?;
    let sol = solve_parisi_pde(gamma, &params, cfg)?;
    Ok(sol.value_at_origin - lambda * gamma.u() - measure_moment(gamma))
}

impl PdeSolution {
    /// Rebuilds cached evaluators after deserialization.
    fn ensure_caches(&mut self) -> Result<(), PdeError> {
        if self.rules.is_none() {
            self.rules = Some(Rules::new(&self.config)?);
        }
        if self.terminal.is_none() {
            let u = self.gamma.u();
            let k = self.gamma.k();
            let sigma = (2.0 * (u - self.gamma.breaks()[k])).sqrt();
            let reach = 8.0 * grid_extent(&self.gamma);
            let y_max = reach + sigma * self.windows[k].max(BASE_WINDOW);
            self.terminal = Some(BoundaryTable::new(self.params, y_max, self.config.boundary_nodes)?);
        }
        Ok(())
    }

    /// Half-width of the stored grids.
    pub fn extent(&self) -> f64 {
        grid_extent(&self.gamma)
    }

    /// Grid step of the stored tables.
    pub fn step(&self) -> f64 {
        self.extent() / (1.0 / self.config.grid_step).round().max(4.0)
    }

    /// `(Psi(s, x), d_x Psi(s, x))` for `0 <= s <= u`, by one quadrature from
    /// the next stored table. Errors outside `|x| <= 8 * extent`.
    pub fn evaluate(&mut self, s: f64, x: f64) -> Result<(f64, f64), PdeError> {
        let u = self.gamma.u();
        if !(0.0..=u).contains(&s) || x.abs() > 8.0 * self.extent() || !x.is_finite() {
            return Err(PdeError::OutsideGrid { s, x });
        }
        self.ensure_caches()?;
        let terminal = TerminalEval::Table(self.terminal.clone().unwrap());
        if s == u {
            return Ok(terminal.eval(x));
        }
        let l = self.gamma.level_of(s);
        let next = self.gamma.breaks()[l + 1];
        let sigma = (2.0 * (next - s)).sqrt();
        let m = self.gamma.heights()[l];
        let mut stepper = Stepper::new(self.rules.as_ref().unwrap());
        let (v, d, _) = if l == self.gamma.k() {
            stepper.step(&Source::Terminal(&terminal), m, sigma, self.windows[l], x)
        } else {
            stepper.step(&Source::Table(&self.tables[l]), m, sigma, self.windows[l], x)
        };
        Ok((v, d))
    }

    /// Full table of `Psi(s, .)` and `d_x Psi(s, .)` on the stored grid.
    pub fn slice(&mut self, s: f64) -> Result<LevelTable, PdeError> {
        let u = self.gamma.u();
        if !(0.0..u).contains(&s) {
            return Err(PdeError::OutsideGrid { s, x: 0.0 });
        }
        self.ensure_caches()?;
        let terminal = TerminalEval::Table(self.terminal.clone().unwrap());
        let l = self.gamma.level_of(s);
        let next = self.gamma.breaks()[l + 1];
        let sigma = (2.0 * (next - s)).sqrt();
        let m = self.gamma.heights()[l];
        let mut stepper = Stepper::new(self.rules.as_ref().unwrap());
        let src = if l == self.gamma.k() {
            Source::Terminal(&terminal)
        } else {
            Source::Table(&self.tables[l])
        };
        let spec = TableSpec {
            s,
            extent: self.extent(),
            step: self.step(),
            scale: (2.0 * (u - s)).sqrt(),
            window: self.windows[l],
            tail_exponent: tail_exponent(self.params.p),
        };
        Ok(build_table(&mut stepper, &src, m, sigma, &spec).0)
    }

    /// Terminal data `(f(x), f'(x))` from the cached table.
    pub fn terminal_eval(&mut self, x: f64) -> Result<(f64, f64), PdeError> {
        self.ensure_caches()?;
        Ok(self.terminal.as_ref().unwrap().eval(x))
    }
}

/// Largest absolute residual of the backward equation over `probes`, by
/// centered differences of step `h` in `x` (defaults to the grid step) and
/// `h^2` in `s`. Probes must sit at least `h^2` away from every breakpoint.
pub fn pde_residual(
    sol: &mut PdeSolution,
    probes: &[(f64, f64)],
    h: Option<f64>,
) -> Result<f64, PdeError> {
    let h = h.unwrap_or_else(|| sol.step());
    let hs = h * h;
    let breaks = sol.gamma.breaks().to_vec();
    let mut worst: f64 = 0.0;
    for &(s, x) in probes {
        if breaks.iter().any(|&b| (s - b).abs() <= hs) {
            return Err(PdeError::ProbeAtBreakpoint(s));
        }
        let (c, dx) = sol.evaluate(s, x)?;
        let (xp, _) = sol.evaluate(s, x + h)?;
        let (xm, _) = sol.evaluate(s, x - h)?;
        let (sp, _) = sol.evaluate(s + hs, x)?;
        let (sm, _) = sol.evaluate(s - hs, x)?;
        let ds = (sp - sm) / (2.0 * hs);
        let dxx = (xp - 2.0 * c + xm) / (h * h);
        let dxc = (xp - xm) / (2.0 * h);
        let _ = dx;
        let r = ds + dxx + sol.gamma.at(s) * dxc * dxc;
        worst = worst.max(r.abs());
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn moment_of_two_level_measure() {
        // 1 * (0.25 - 0) / 2 + 3 * (1 - 0.25) / 2 = 1.25
        let g = AtomicMeasure::new(1.0, &[0.5], &[1.0, 3.0]).unwrap();
        assert_relative_eq!(measure_moment(&g), 1.25, max_relative = 1e-15);
        assert_relative_eq!(g.mass(), 2.0, max_relative = 1e-15);
    }

    #[test]
    fn measure_validation_and_merging() {
        assert!(AtomicMeasure::new(0.0, &[], &[1.0]).is_err());
        assert!(AtomicMeasure::new(1.0, &[0.5], &[2.0, 1.0]).is_err());
        assert!(AtomicMeasure::new(1.0, &[0.5], &[1.0]).is_err());
        assert!(AtomicMeasure::new(1.0, &[1.5], &[1.0, 2.0]).is_err());
        let merged = AtomicMeasure::new(1.0, &[0.5, 0.5 + 1e-12], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(merged.k(), 1);
        let equal = AtomicMeasure::new(1.0, &[0.3, 0.6], &[1.0, 1.0, 2.0]).unwrap();
        assert_eq!(equal.k(), 1);
        assert_eq!(equal.interior(), &[0.6]);
        assert_eq!(equal.level_of(0.0), 0);
        assert_eq!(equal.level_of(0.6), 1);
        assert_eq!(equal.level_of(1.0), 1);
    }

    #[test]
    fn vanishing_span_recovers_terminal_value() {
        let prm = BoundaryParams::new(4.0, 1.0, 0.6).unwrap();
        let g = AtomicMeasure::constant(1e-18, 1.0).unwrap();
        let sol = solve_parisi_pde(&g, &prm, &GridConfig::default()).unwrap();
        assert_relative_eq!(sol.value_at_origin, boundary_value(0.0, &prm).unwrap(), epsilon = 1e-8);
    }

    /// Independent oracle for one level: adaptive Simpson on the Gaussian
    /// integral in the original variable, split at the kink.
    fn oracle_single_level(prm: &BoundaryParams, u: f64, m: f64) -> f64 {
        let sigma = (2.0 * u).sqrt();
        let dens = |y: f64| {
            let z = y / sigma;
            (-0.5 * z * z).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
        };
        let g = |y: f64| {
            let f = boundary_value(y, prm).unwrap();
            if m == 0.0 { dens(y) * f } else { dens(y) * (m * f).exp() }
        };
        fn simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, n: usize) -> f64 {
            let h = (b - a) / n as f64;
            let mut s = f(a) + f(b);
            for i in 1..n {
                s += f(a + h * i as f64) * if i % 2 == 1 { 4.0 } else { 2.0 };
            }
            s * h / 3.0
        }
        let lim = 14.0 * sigma;
        let integral = 2.0 * simpson(&g, 0.0, lim, 200_000);
        if m == 0.0 { integral } else { integral.ln() / m }
    }

    #[test]
    fn single_level_matches_quadrature_oracle() {
        for &(lam, m) in &[(0.7, 1.5), (-0.4, 0.8), (0.0, 0.0), (0.3, 3.0)] {
            let prm = BoundaryParams::new(4.0, 1.0, lam).unwrap();
            let g = AtomicMeasure::constant(0.3, m).unwrap();
            let sol = solve_parisi_pde(&g, &prm, &GridConfig::default()).unwrap();
            let oracle = oracle_single_level(&prm, 0.3, m);
            assert!((sol.value_at_origin - oracle).abs() < 1e-9, "{lam} {m}: {} vs {oracle}", sol.value_at_origin);
        }
    }

    #[test]
    fn split_level_equals_single_level_with_equal_heights() {
        // A breakpoint between two equal heights must not change the answer.
        let prm = BoundaryParams::new(3.0, 1.0, 0.5).unwrap();
        let one = AtomicMeasure::constant(0.4, 1.2).unwrap();
        let a = solve_parisi_pde(&one, &prm, &GridConfig::default()).unwrap().value_at_origin;
        let two = AtomicMeasure::new(0.4, &[0.2], &[1.2, 1.2 + 1e-13]).unwrap();
        assert_eq!(two.k(), 1);
        let b = solve_parisi_pde(&two, &prm, &GridConfig::default()).unwrap().value_at_origin;
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }

    #[test]
    fn scaling_covariance() {
        // (u, t, q, m) -> (a^2 u, t a^{-(p-2)}, a^2 q, m / a^2) scales the
        // value at the origin by a^2.
        let p = 4.0;
        let a: f64 = 1.7;
        let g = AtomicMeasure::new(0.5, &[0.2, 0.35], &[0.3, 1.0, 2.5]).unwrap();
        let ga = AtomicMeasure::new(0.5 * a * a, &[0.2 * a * a, 0.35 * a * a], &[0.3 / (a * a), 1.0 / (a * a), 2.5 / (a * a)]).unwrap();
        let v = solve_parisi_pde(&g, &BoundaryParams::new(p, 1.0, 0.4).unwrap(), &GridConfig::default()).unwrap().value_at_origin;
        let va = solve_parisi_pde(&ga, &BoundaryParams::new(p, a.powf(-(p - 2.0)), 0.4).unwrap(), &GridConfig::default()).unwrap().value_at_origin;
        assert_relative_eq!(va, a * a * v, max_relative = 1e-9);
    }

    #[test]
    fn quadrature_order_converges() {
        let prm = BoundaryParams::new(4.0, 1.0, 0.5).unwrap();
        let g = AtomicMeasure::new(0.6, &[0.2, 0.45], &[0.2, 0.9, 2.0]).unwrap();
        let base = GridConfig::default();
        let v1 = solve_parisi_pde(&g, &prm, &base).unwrap().value_at_origin;
        let v2 = solve_parisi_pde(&g, &prm, &GridConfig { quad_order: 2 * base.quad_order, ..base }).unwrap().value_at_origin;
        assert!((v1 - v2).abs() < 1e-6, "{v1} vs {v2}");
    }

    #[test]
    fn narrow_top_level_is_resolved() {
        // A positive multiplier puts a kink at the origin; a narrow top level
        // leaves the next table sharp on a scale far below the grid step.
        let prm = BoundaryParams::new(4.0, 1.0, 0.435).unwrap();
        let base = GridConfig::default();
        for d in [1e-3, 1e-2, 3e-2] {
            let g = AtomicMeasure::new(0.548, &[0.274, 0.548 - d], &[0.11, 0.83, 0.83 + 0.05 / d]).unwrap();
            let v1 = solve_parisi_pde(&g, &prm, &base).unwrap().value_at_origin;
            let v2 = solve_parisi_pde(&g, &prm, &GridConfig { quad_order: 2 * base.quad_order, ..base })
                .unwrap()
                .value_at_origin;
            assert!((v1 - v2).abs() < 1e-7, "d = {d}: {v1} vs {v2}");
        }
    }

    #[test]
    fn residual_is_small_and_second_order() {
        let prm = BoundaryParams::new(4.0, 1.0, 0.5).unwrap();
        let g = AtomicMeasure::new(0.6, &[0.2, 0.45], &[0.2, 0.9, 2.0]).unwrap();
        let probes = [(0.1, 0.0), (0.1, 0.7), (0.32, -0.4), (0.5, 0.8), (0.52, 1.5)];
        let coarse_cfg = GridConfig { grid_step: 4e-3, ..GridConfig::default() };
        let fine_cfg = GridConfig { grid_step: 2e-3, ..GridConfig::default() };
        let mut coarse = solve_parisi_pde(&g, &prm, &coarse_cfg).unwrap();
        let mut fine = solve_parisi_pde(&g, &prm, &fine_cfg).unwrap();
        let rc = pde_residual(&mut coarse, &probes, None).unwrap();
        let rf = pde_residual(&mut fine, &probes, None).unwrap();
        assert!(rf < 1e-3, "{rf}");
        let ratio = rc / rf;
        assert!((3.2..=4.8).contains(&ratio), "{rc} {rf} {ratio}");
    }

    #[test]
    fn solution_round_trips_through_json() {
        let prm = BoundaryParams::new(4.0, 1.0, 0.5).unwrap();
        let g = AtomicMeasure::new(0.6, &[0.3], &[0.4, 1.0]).unwrap();
        let mut sol = solve_parisi_pde(&g, &prm, &GridConfig::default()).unwrap();
        let text = serde_json::to_string(&sol).unwrap();
        let mut back: PdeSolution = serde_json::from_str(&text).unwrap();
        assert_eq!(back.value_at_origin, sol.value_at_origin);
        let a = sol.evaluate(0.45, 0.3).unwrap();
        let b = back.evaluate(0.45, 0.3).unwrap();
        assert!((a.0 - b.0).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn value_is_even_in_space(x in 0.0f64..2.0, s in 0.05f64..0.55) {
            let prm = BoundaryParams::new(3.0, 1.0, 0.3).unwrap();
            let g = AtomicMeasure::new(0.6, &[0.25], &[0.5, 1.5]).unwrap();
            let mut sol = solve_parisi_pde(&g, &prm, &GridConfig::default()).unwrap();
            let (a, da) = sol.evaluate(s, x).unwrap();
            let (b, db) = sol.evaluate(s, -x).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((da + db).abs() < 1e-10);
        }

        #[test]
        fn value_dominates_zero_control(lam in -1.0f64..1.0, m0 in 0.0f64..2.0, m1 in 0.0f64..2.0) {
            // Jensen: Psi(0,0) >= E f(sqrt(2u) z), and it grows with the heights.
            let prm = BoundaryParams::new(4.0, 1.0, lam).unwrap();
            let g0 = AtomicMeasure::constant(0.5, 0.0).unwrap();
            let g = AtomicMeasure::new(0.5, &[0.25], &[m0.min(m0 + m1), m0 + m1]).unwrap();
            let base = solve_parisi_pde(&g0, &prm, &GridConfig::default()).unwrap().value_at_origin;
            let v = solve_parisi_pde(&g, &prm, &GridConfig::default()).unwrap().value_at_origin;
            prop_assert!(v >= base - 1e-12);
        }
    }
}

//! Shared numerics: exponents, Gaussian moments, norms, seeded Gaussian
//! matrices and Gauss-Hermite rules.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

/// Largest supported Gauss-Hermite order.
pub const MAX_QUAD_ORDER: usize = 512;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MathError {
    #[error("exponent must lie in [1, inf], got {0}")]
    InvalidExponent(f64),
    #[error("matrix dimension must be positive")]
    EmptyDimension,
    #[error("quadrature order must lie in 2..={MAX_QUAD_ORDER}, got {0}")]
    InvalidOrder(usize),
    #[error("normalized norm of an empty vector")]
    EmptyVector,
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("vector entries must be finite")]
    NonFinite,
    #[error("cannot normalize the zero vector")]
    ZeroVector,
}

fn check_exponent(p: f64) -> Result<(), MathError> {
    if p.is_nan() || p < 1.0 {
        Err(MathError::InvalidExponent(p))
    } else {
        Ok(())
    }
}

/// Hölder conjugate `p / (p - 1)`, with `1 <-> inf`.
pub fn holder_conjugate(p: f64) -> Result<f64, MathError> {
    check_exponent(p)?;
    Ok(if p == 1.0 {
        f64::INFINITY
    } else if p.is_infinite() {
        1.0
    } else {
        p / (p - 1.0)
    })
}

/// `(E|z|^p)^(1/p)` for a standard Gaussian `z`. Infinite at `p = inf`.
pub fn gaussian_moment_norm(p: f64) -> Result<f64, MathError> {
    check_exponent(p)?;
    if p.is_infinite() {
        return Ok(f64::INFINITY);
    }
    let ln_moment = 0.5 * p * std::f64::consts::LN_2 + ln_gamma(0.5 * (p + 1.0))
        - 0.5 * std::f64::consts::PI.ln();
    Ok((ln_moment / p).exp())
}

/// `l_p` norm of `x`. With `normalized` the sum is averaged over coordinates
/// before the root is taken, so constant vectors have norm `|c|`.
pub fn lp_norm(x: &[f64], p: f64, normalized: bool) -> Result<f64, MathError> {
    check_exponent(p)?;
    if x.is_empty() {
        return if normalized {
            Err(MathError::EmptyVector)
        } else {
            Ok(0.0)
        };
    }
    let scale = x.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if p.is_infinite() || scale == 0.0 || !scale.is_finite() {
        return Ok(scale);
    }
    let mut sum: f64 = if p == 1.0 {
        x.iter().map(|v| v.abs() / scale).sum()
    } else if p == 2.0 {
        x.iter().map(|v| (v / scale).powi(2)).sum()
    } else {
        x.iter().map(|v| (v.abs() / scale).powf(p)).sum()
    };
    if normalized {
        sum /= x.len() as f64;
    }
    Ok(scale * sum.powf(1.0 / p))
}

/// A nonempty vector of finite reals, the optimization variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LpVector {
    entries: Vec<f64>,
}

impl LpVector {
    pub fn new(entries: Vec<f64>) -> Result<Self, MathError> {
        if entries.is_empty() {
            return Err(MathError::EmptyVector);
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(MathError::NonFinite);
        }
        Ok(LpVector { entries })
    }

    /// The `i`-th standard basis vector of dimension `n`.
    pub fn basis(n: usize, i: usize) -> Result<Self, MathError> {
        if i >= n {
            return Err(MathError::LengthMismatch { expected: n, got: i + 1 });
        }
        let mut entries = vec![0.0; n];
        entries[i] = 1.0;
        Ok(LpVector { entries })
    }

    pub fn dim(&self) -> usize {
        self.entries.len()
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn into_entries(self) -> Vec<f64> {
        self.entries
    }

    pub fn norm(&self, p: f64, normalized: bool) -> Result<f64, MathError> {
        lp_norm(&self.entries, p, normalized)
    }

    /// Rescaled copy with unit `l_p` norm.
    pub fn unit(&self, p: f64) -> Result<Self, MathError> {
        let r = self.norm(p, false)?;
        if r == 0.0 {
            return Err(MathError::ZeroVector);
        }
        Ok(LpVector { entries: self.entries.iter().map(|v| v / r).collect() })
    }
}

/// Deterministic RNG for `(seed, stream)`; distinct streams never overlap.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// A dense `n x n` matrix with i.i.d. standard Gaussian entries together with
/// its symmetrization `(G + G^T) / sqrt(2)`. Both are stored row-major.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatrixSample {
    pub n: usize,
    pub seed: u64,
    pub g: Vec<f64>,
    pub gbar: Vec<f64>,
}

/// Draws the matrix for `seed`. The same `(n, seed)` always yields the same
/// entries, independent of thread count.
pub fn sample_matrix(n: usize, seed: u64) -> Result<MatrixSample, MathError> {
    if n == 0 {
        return Err(MathError::EmptyDimension);
    }
    let g: Vec<f64> = {
        let mut rng = stream_rng(seed, 0);
        (0..n * n).map(|_| StandardNormal.sample(&mut rng)).collect()
    };
    Ok(MatrixSample::from_entries(n, seed, g))
}

impl MatrixSample {
    /// Wraps explicit row-major entries.
    pub fn from_entries(n: usize, seed: u64, g: Vec<f64>) -> Self {
        assert_eq!(g.len(), n * n, "entry count must be n^2");
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let mut gbar = vec![0.0; n * n];
        // Tiled so the transposed reads stay in cache for large n.
        const TILE: usize = 64;
        for bi in (0..n).step_by(TILE) {
            for bj in (0..n).step_by(TILE) {
                for i in bi..(bi + TILE).min(n) {
                    for j in bj..(bj + TILE).min(n) {
                        gbar[i * n + j] = (g[i * n + j] + g[j * n + i]) * s;
                    }
                }
            }
        }
        MatrixSample { n, seed, g, gbar }
    }

    pub fn g_at(&self, i: usize, j: usize) -> f64 {
        self.g[i * self.n + j]
    }

    pub fn gbar_at(&self, i: usize, j: usize) -> f64 {
        self.gbar[i * self.n + j]
    }

    pub fn gbar_row(&self, i: usize) -> &[f64] {
        &self.gbar[i * self.n..(i + 1) * self.n]
    }

    /// `out = gbar * x`.
    pub fn gbar_apply(&self, x: &[f64], out: &mut [f64]) {
        let n = self.n;
        assert_eq!(x.len(), n);
        assert_eq!(out.len(), n);
        let row_dot = |(i, o): (usize, &mut f64)| {
            *o = dot(&self.gbar[i * n..(i + 1) * n], x);
        };
        if n >= 256 {
            out.par_iter_mut().enumerate().for_each(row_dot);
        } else {
            out.iter_mut().enumerate().for_each(row_dot);
        }
    }

    /// `gbar * x` for several vectors at once through a dense product; the
    /// matrix is streamed once for the whole block.
    pub fn gbar_apply_block(&self, xs: &[&[f64]]) -> Vec<Vec<f64>> {
        let n = self.n;
        let k = xs.len();
        assert!(xs.iter().all(|x| x.len() == n));
        if k <= 1 {
            return xs
                .iter()
                .map(|x| {
                    let mut y = vec![0.0; n];
                    self.gbar_apply(x, &mut y);
                    y
                })
                .collect();
        }
        let packed: Vec<f64> = xs.iter().flat_map(|x| x.iter().copied()).collect();
        let mut out = vec![0.0; n * k];
        // SAFETY: gbar is n x n row-major; packed and out hold k contiguous
        // length-n columns, matching the strides passed.
        unsafe {
            matrixmultiply::dgemm(
                n,
                n,
                k,
                1.0,
                self.gbar.as_ptr(),
                n as isize,
                1,
                packed.as_ptr(),
                1,
                n as isize,
                0.0,
                out.as_mut_ptr(),
                1,
                n as isize,
            );
        }
        out.chunks_exact(n).map(|c| c.to_vec()).collect()
    }

    /// `<G x, x>`, evaluated through the symmetric part.
    pub fn quad_form(&self, x: &[f64]) -> f64 {
        let mut y = vec![0.0; self.n];
        self.gbar_apply(x, &mut y);
        dot(&y, x) * std::f64::consts::FRAC_1_SQRT_2
    }

    /// `out = G x` (non-symmetrized).
    pub fn g_apply(&self, x: &[f64], out: &mut [f64]) {
        let n = self.n;
        for (i, o) in out.iter_mut().enumerate() {
            *o = dot(&self.g[i * n..(i + 1) * n], x);
        }
    }

    /// `out = G^T y` (non-symmetrized).
    pub fn g_apply_transpose(&self, y: &[f64], out: &mut [f64]) {
        let n = self.n;
        out.iter_mut().for_each(|o| *o = 0.0);
        for (i, &yi) in y.iter().enumerate() {
            if yi == 0.0 {
                continue;
            }
            for (o, gij) in out.iter_mut().zip(&self.g[i * n..(i + 1) * n]) {
                *o += yi * gij;
            }
        }
    }
}

/// Dot product with eight independent accumulators (vectorizes well).
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut acc = [0.0; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// Gauss-Hermite rule for the weight `exp(-x^2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussHermite {
    pub fn order(&self) -> usize {
        self.nodes.len()
    }

    /// Nodes and weights rescaled so that `sum w_i h(z_i)` approximates
    /// `E h(z)` for a standard Gaussian `z`.
    pub fn standard_normal(&self) -> (Vec<f64>, Vec<f64>) {
        let s = std::f64::consts::SQRT_2;
        let c = 1.0 / std::f64::consts::PI.sqrt();
        (
            self.nodes.iter().map(|x| s * x).collect(),
            self.weights.iter().map(|w| c * w).collect(),
        )
    }

    /// `E h(z)` for a standard Gaussian `z`.
    pub fn expectation<F: Fn(f64) -> f64>(&self, h: F) -> f64 {
        let s = std::f64::consts::SQRT_2;
        let sum: f64 = self
            .nodes
            .iter()
            .zip(&self.weights)
            .map(|(x, w)| w * h(s * x))
            .sum();
        sum / std::f64::consts::PI.sqrt()
    }
}

/// Orthonormal Hermite functions `psi_{n-1}(x), psi_n(x)` via the stable
/// three-term recurrence.
fn hermite_functions(n: usize, x: f64) -> (f64, f64) {
    let mut prev = 0.0;
    let mut cur = std::f64::consts::PI.powf(-0.25) * (-0.5 * x * x).exp();
    for k in 0..n {
        let kf = k as f64;
        let next = (2.0 / (kf + 1.0)).sqrt() * x * cur - (kf / (kf + 1.0)).sqrt() * prev;
        prev = cur;
        cur = next;
    }
    (prev, cur)
}

/// Gauss-Hermite nodes and weights of the given order: Golub-Welsch start,
/// Newton polish on the Hermite functions, weights from the derivative.
pub fn gauss_hermite_grid(order: usize) -> Result<GaussHermite, MathError> {
    if !(2..=MAX_QUAD_ORDER).contains(&order) {
        return Err(MathError::InvalidOrder(order));
    }
    let mut jacobi = DMatrix::<f64>::zeros(order, order);
    for i in 0..order - 1 {
        let b = ((i + 1) as f64 / 2.0).sqrt();
        jacobi[(i, i + 1)] = b;
        jacobi[(i + 1, i)] = b;
    }
    let mut guesses: Vec<f64> = SymmetricEigen::new(jacobi).eigenvalues.iter().copied().collect();
    guesses.sort_by(|a, b| a.total_cmp(b));

    let nf = order as f64;
    let mut nodes = Vec::with_capacity(order);
    let mut weights = Vec::with_capacity(order);
    for &x0 in &guesses {
        let mut x = x0;
        for _ in 0..8 {
            let (pm1, pn) = hermite_functions(order, x);
            // psi_n' = sqrt(2n) psi_{n-1} - x psi_n, and psi_n(x) = 0 at a root.
            let deriv = (2.0 * nf).sqrt() * pm1 - x * pn;
            if deriv == 0.0 {
                break;
            }
            let step = pn / deriv;
            x -= step;
            if step.abs() <= 1e-15 * x.abs().max(1.0) {
                break;
            }
        }
        let (pm1, _) = hermite_functions(order, x);
        // w = 1 / (n * p_{n-1}(x)^2) for the orthonormal polynomials p_k.
        let w = if pm1 == 0.0 {
            0.0
        } else {
            (-x * x).exp() / (nf * pm1 * pm1)
        };
        nodes.push(x);
        weights.push(w);
    }
    // Enforce exact antisymmetry of the nodes and symmetry of the weights.
    for i in 0..order / 2 {
        let j = order - 1 - i;
        let x = 0.5 * (nodes[j] - nodes[i]);
        let w = 0.5 * (weights[i] + weights[j]);
        nodes[i] = -x;
        nodes[j] = x;
        weights[i] = w;
        weights[j] = w;
    }
    if order % 2 == 1 {
        nodes[order / 2] = 0.0;
    }
    Ok(GaussHermite { nodes, weights })
}

/// Gauss-Legendre rule on `[-1, 1]` by Newton iteration on the Legendre
/// recurrence.
pub fn gauss_legendre(order: usize) -> (Vec<f64>, Vec<f64>) {
    let n = order;
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let nf = n as f64;
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            if n == 1 {
                p0 = 1.0;
            }
            dp = nf * (x * p1 - p0) / (x * x - 1.0);
            let step = p1 / dp;
            x -= step;
            if step.abs() < 1e-16 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    (nodes, weights)
}

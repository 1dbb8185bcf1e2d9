//! Terminal condition of the backward equation:
//! `f(x) = sup_r (r x + lambda r^2 - t |r|^p)` for `p > 2`, `t > 0`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BoundaryError {
    #[error("boundary exponent must satisfy 2 < p < inf, got {0}")]
    InvalidExponent(f64),
    #[error("penalty must be positive and finite, got {0}")]
    InvalidPenalty(f64),
    #[error("multiplier must be finite, got {0}")]
    InvalidMultiplier(f64),
    #[error("non-finite argument {0}")]
    NonFiniteArgument(f64),
    #[error("derivative undefined at x = 0 when lambda > 0 (kink)")]
    Kink,
    #[error("root search failed to converge at x = {0}")]
    NoConvergence(f64),
}

/// Parameters `(p, t, lambda)` of the terminal function.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundaryParams {
    pub p: f64,
    pub t: f64,
    pub lambda: f64,
}

impl BoundaryParams {
    pub fn new(p: f64, t: f64, lambda: f64) -> Result<Self, BoundaryError> {
        if !(p > 2.0 && p.is_finite()) {
            return Err(BoundaryError::InvalidExponent(p));
        }
        if !(t > 0.0 && t.is_finite()) {
            return Err(BoundaryError::InvalidPenalty(t));
        }
        if !lambda.is_finite() {
            return Err(BoundaryError::InvalidMultiplier(lambda));
        }
        Ok(BoundaryParams { p, t, lambda })
    }

    /// Positive maximizer at `x = 0` when `lambda > 0`, else zero.
    pub fn zero_argmax(&self) -> f64 {
        if self.lambda > 0.0 {
            (2.0 * self.lambda / (self.p * self.t)).powf(1.0 / (self.p - 2.0))
        } else {
            0.0
        }
    }

    /// Location `y(r)` at which `r` is the maximizer, for `r >= zero_argmax()`.
    fn location(&self, r: f64) -> f64 {
        self.p * self.t * r.powf(self.p - 1.0) - 2.0 * self.lambda * r
    }

    fn objective(&self, r: f64, x: f64) -> f64 {
        r * x + self.lambda * r * r - self.t * r.abs().powf(self.p)
    }
}

/// The maximizing `r` at `x`; odd in `x`. At `x = 0` with `lambda > 0` the
/// positive maximizer is returned.
pub fn boundary_argmax(x: f64, prm: &BoundaryParams) -> Result<f64, BoundaryError> {
    if !x.is_finite() {
        return Err(BoundaryError::NonFiniteArgument(x));
    }
    let a = x.abs();
    let (p, t, lam) = (prm.p, prm.t, prm.lambda);
    let r = if a == 0.0 {
        prm.zero_argmax()
    } else if lam == 0.0 {
        (a / (p * t)).powf(1.0 / (p - 1.0))
    } else {
        let h = |r: f64| a + 2.0 * lam * r - p * t * r.powf(p - 1.0);
        let dh = |r: f64| 2.0 * lam - p * t * (p - 1.0) * r.powf(p - 2.0);
        let mut lo = prm.zero_argmax();
        let mut hi = (2.0 * a / (p * t))
            .powf(1.0 / (p - 1.0))
            .max((4.0 * lam.abs() / (p * t)).powf(1.0 / (p - 2.0)))
            .max(lo)
            * (1.0 + 1e-12)
            + f64::MIN_POSITIVE;
        while h(hi) > 0.0 {
            hi *= 2.0;
        }
        let mut r = hi;
        let mut converged = false;
        for _ in 0..200 {
            let hr = h(r);
            if hr > 0.0 {
                lo = r;
            } else {
                hi = r;
            }
            let d = dh(r);
            let mut next = if d < 0.0 { r - hr / d } else { f64::NAN };
            if !(next > lo && next < hi) {
                next = 0.5 * (lo + hi);
            }
            let done = (next - r).abs() <= 1e-15 * next.abs().max(f64::MIN_POSITIVE)
                || hi - lo <= 1e-15 * hi;
            r = next;
            if done {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(BoundaryError::NoConvergence(x));
        }
        r
    };
    Ok(if x < 0.0 { -r } else { r })
}

/// `f(x)`.
pub fn boundary_value(x: f64, prm: &BoundaryParams) -> Result<f64, BoundaryError> {
    let r = boundary_argmax(x, prm)?;
    Ok(prm.objective(r, x).max(0.0))
}

/// `f'(x)`, equal to the maximizer. Undefined at `x = 0` when `lambda > 0`.
pub fn boundary_derivative(x: f64, prm: &BoundaryParams) -> Result<f64, BoundaryError> {
    if x == 0.0 && prm.lambda > 0.0 {
        return Err(BoundaryError::Kink);
    }
    boundary_argmax(x, prm)
}

/// Upper envelope for `f` used to bound tails:
/// a polynomial majorant built from the root bracket of the maximizer.
pub fn growth_envelope(x: f64, prm: &BoundaryParams) -> f64 {
    let (p, t, lam) = (prm.p, prm.t, prm.lambda.abs());
    let a = x.abs();
    (2.0 / t).powf(1.0 / (p - 1.0)) * a.powf(1.0 + 1.0 / (p - 1.0))
        + (2.0 * lam / t).powf(1.0 / (p - 2.0)) * a
        + (2.0 / t).powf(2.0 / (p - 1.0)) * lam * a.powf(2.0 / (p - 1.0))
        + (2.0 * lam / t).powf(2.0 / (p - 2.0)) * lam
}

/// Tabulated `f` on `[0, y_max]` with exact values and slopes at nodes that
/// are uniform in the maximizer `r`, interpolated by cubic Hermite in `y`.
/// Nodes concentrate where `f` bends most.
#[derive(Debug, Clone)]
pub struct BoundaryTable {
    prm: BoundaryParams,
    y: Vec<f64>,
    f: Vec<f64>,
    r: Vec<f64>,
    y_max: f64,
    /// `bucket[b]` is the last node with `y <= b / bucket_scale`.
    bucket: Vec<u32>,
    bucket_scale: f64,
}

impl BoundaryTable {
    pub fn new(prm: BoundaryParams, y_max: f64, nodes: usize) -> Result<Self, BoundaryError> {
        let nodes = nodes.max(8);
        let r_lo = prm.zero_argmax();
        let r_hi = boundary_argmax(y_max.max(1e-300), &prm)?;
        let mut y = Vec::with_capacity(nodes + 1);
        let mut f = Vec::with_capacity(nodes + 1);
        let mut r = Vec::with_capacity(nodes + 1);
        for i in 0..=nodes {
            let ri = r_lo + (r_hi - r_lo) * i as f64 / nodes as f64;
            let yi = if i == 0 { 0.0 } else { prm.location(ri).max(0.0) };
            y.push(yi);
            r.push(ri);
            f.push(prm.objective(ri, yi));
        }
        let y_max = y[nodes];
        let buckets = 2 * nodes;
        let bucket_scale = buckets as f64 / y_max;
        let mut bucket = Vec::with_capacity(buckets + 1);
        let mut i = 0;
        for b in 0..=buckets {
            let yb = b as f64 / bucket_scale;
            while i + 1 < nodes && y[i + 1] <= yb {
                i += 1;
            }
            bucket.push(i as u32);
        }
        Ok(BoundaryTable { prm, y, f, r, y_max, bucket, bucket_scale })
    }

    pub fn params(&self) -> &BoundaryParams {
        &self.prm
    }

    pub fn y_max(&self) -> f64 {
        self.y_max
    }

    /// `(f(x), f'(x))`; falls back to the exact root outside the table.
    /// At `x = 0` the right-hand slope is returned.
    pub fn eval(&self, x: f64) -> (f64, f64) {
        let a = x.abs();
        if a >= self.y_max {
            let r = boundary_argmax(a, &self.prm).unwrap_or(f64::NAN);
            let v = self.prm.objective(r, a);
            return (v, if x < 0.0 { -r } else { r });
        }
        // Largest i with y[i] <= a, searched inside its bucket.
        let b = (a * self.bucket_scale) as usize;
        let mut lo = self.bucket[b] as usize;
        let mut hi = (self.bucket[b + 1] as usize + 1).min(self.y.len() - 1);
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if self.y[mid] <= a {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let h = self.y[hi] - self.y[lo];
        let s = (a - self.y[lo]) / h;
        let (f0, f1) = (self.f[lo], self.f[hi]);
        let (d0, d1) = (self.r[lo] * h, self.r[hi] * h);
        let s2 = s * s;
        let s3 = s2 * s;
        let v = (2.0 * s3 - 3.0 * s2 + 1.0) * f0
            + (s3 - 2.0 * s2 + s) * d0
            + (-2.0 * s3 + 3.0 * s2) * f1
            + (s3 - s2) * d1;
        let dv = ((6.0 * s2 - 6.0 * s) * f0
            + (3.0 * s2 - 4.0 * s + 1.0) * d0
            + (-6.0 * s2 + 6.0 * s) * f1
            + (3.0 * s2 - 2.0 * s) * d1)
            / h;
        (v, if x < 0.0 { -dv } else { dv })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn prm(p: f64, t: f64, lambda: f64) -> BoundaryParams {
        BoundaryParams::new(p, t, lambda).unwrap()
    }

    /// Brute-force supremum over a fine grid of `r` refined by golden section.
    fn brute_sup(x: f64, b: &BoundaryParams) -> f64 {
        let obj = |r: f64| r * x + b.lambda * r * r - b.t * r.abs().powf(b.p);
        let span = 1.0 + (2.0 * x.abs() / b.t).powf(1.0 / (b.p - 1.0)) + (4.0 * b.lambda.abs() / b.t).powf(1.0 / (b.p - 2.0));
        let mut best_r = 0.0;
        let mut best = obj(0.0);
        let steps = 200_000;
        for i in 0..=steps {
            let r = -span + 2.0 * span * i as f64 / steps as f64;
            let v = obj(r);
            if v > best {
                best = v;
                best_r = r;
            }
        }
        let h = 2.0 * span / steps as f64;
        let (mut a, mut c) = (best_r - h, best_r + h);
        let g = 0.5 * (5f64.sqrt() - 1.0);
        for _ in 0..200 {
            let m1 = c - g * (c - a);
            let m2 = a + g * (c - a);
            if obj(m1) > obj(m2) {
                c = m2;
            } else {
                a = m1;
            }
        }
        best.max(obj(0.5 * (a + c)))
    }

    #[test]
    fn validation() {
        assert!(BoundaryParams::new(2.0, 1.0, 0.0).is_err());
        assert!(BoundaryParams::new(f64::INFINITY, 1.0, 0.0).is_err());
        assert!(BoundaryParams::new(3.0, 0.0, 0.0).is_err());
        assert!(BoundaryParams::new(3.0, 1.0, f64::NAN).is_err());
        assert!(boundary_value(f64::NAN, &prm(3.0, 1.0, 0.0)).is_err());
    }

    #[test]
    fn closed_form_without_multiplier() {
        for &(p, t) in &[(3.0, 1.0), (4.0, 0.5), (6.0, 2.0), (2.5, 1.3)] {
            let b = prm(p, t, 0.0);
            for &x in &[-3.0, -0.2, 1e-6, 0.7, 5.0] {
                let a: f64 = x;
                let expect = (p - 1.0) / p * (p * t).powf(-1.0 / (p - 1.0)) * a.abs().powf(p / (p - 1.0));
                assert_relative_eq!(boundary_value(x, &b).unwrap(), expect, max_relative = 1e-12);
                let slope = (p * t).powf(-1.0 / (p - 1.0)) * a.abs().powf(1.0 / (p - 1.0));
                assert_relative_eq!(boundary_derivative(x, &b).unwrap().abs(), slope, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn origin_cases() {
        let b = prm(4.0, 1.0, 0.8);
        let r0 = (2.0 * 0.8 / 4.0f64).powf(0.5);
        assert_relative_eq!(boundary_argmax(0.0, &b).unwrap(), r0, max_relative = 1e-14);
        assert_eq!(boundary_derivative(0.0, &b), Err(BoundaryError::Kink));
        let expect = 0.8 * r0 * r0 - r0.powi(4);
        assert_relative_eq!(boundary_value(0.0, &b).unwrap(), expect, max_relative = 1e-14);
        let neg = prm(4.0, 1.0, -0.8);
        assert_eq!(boundary_value(0.0, &neg).unwrap(), 0.0);
        assert_eq!(boundary_derivative(0.0, &neg).unwrap(), 0.0);
    }

    #[test]
    fn near_origin_regimes() {
        // lambda < 0: quadratic with curvature 1 / (2 |lambda|).
        let b = prm(4.0, 1.0, -0.5);
        let x = 1e-4;
        assert_relative_eq!(boundary_value(x, &b).unwrap(), x * x / 2.0, max_relative = 1e-6);
        // lambda > 0: kink of slope r0.
        let b = prm(4.0, 1.0, 0.5);
        let r0 = b.zero_argmax();
        let f0 = boundary_value(0.0, &b).unwrap();
        assert_relative_eq!((boundary_value(1e-7, &b).unwrap() - f0) / 1e-7, r0, max_relative = 1e-5);
    }

    #[test]
    fn table_matches_direct_evaluation() {
        for &(p, t, lam) in &[(4.0, 1.0, 0.7), (3.0, 0.5, -0.4), (6.0, 2.0, 0.0), (2.5, 1.0, 0.3)] {
            let b = prm(p, t, lam);
            let table = BoundaryTable::new(b, 12.0, 4096).unwrap();
            for i in 0..=400 {
                let x = -13.0 + 26.0 * i as f64 / 400.0;
                let (v, d) = table.eval(x);
                let exact = boundary_value(x, &b).unwrap();
                assert!((v - exact).abs() <= 1e-11 * (1.0 + exact.abs()), "{p} {lam} {x}: {v} vs {exact}");
                if x != 0.0 {
                    let de = boundary_derivative(x, &b).unwrap();
                    assert!((d - de).abs() <= 1e-7 * (1.0 + de.abs()), "{p} {lam} {x}: {d} vs {de}");
                }
            }
        }
    }

    proptest! {
        #[test]
        fn value_is_the_supremum(p in 2.2f64..8.0, t in 0.2f64..3.0, lam in -2.0f64..2.0, x in -4.0f64..4.0) {
            let b = prm(p, t, lam);
            let v = boundary_value(x, &b).unwrap();
            let brute = brute_sup(x, &b);
            prop_assert!(v >= brute - 1e-10 * (1.0 + brute.abs()));
            prop_assert!(v <= brute + 1e-9 * (1.0 + brute.abs()));
        }

        #[test]
        fn even_nonnegative_and_enveloped(p in 2.2f64..8.0, t in 0.2f64..3.0, lam in -2.0f64..2.0, x in -20.0f64..20.0) {
            let b = prm(p, t, lam);
            let v = boundary_value(x, &b).unwrap();
            prop_assert!(v >= 0.0);
            prop_assert!((v - boundary_value(-x, &b).unwrap()).abs() <= 1e-14 * (1.0 + v));
            prop_assert!(v <= growth_envelope(x, &b) * (1.0 + 1e-12) + 1e-12);
        }

        #[test]
        fn midpoint_convexity(p in 2.2f64..8.0, t in 0.2f64..3.0, lam in -2.0f64..2.0, a in -5.0f64..5.0, c in -5.0f64..5.0) {
            let b = prm(p, t, lam);
            let fm = boundary_value(0.5 * (a + c), &b).unwrap();
            let avg = 0.5 * (boundary_value(a, &b).unwrap() + boundary_value(c, &b).unwrap());
            prop_assert!(fm <= avg + 1e-12 * (1.0 + avg.abs()));
        }

        #[test]
        fn derivative_matches_finite_differences(p in 2.2f64..8.0, t in 0.2f64..3.0, lam in -2.0f64..2.0, x in 0.05f64..5.0, sign in prop::bool::ANY) {
            let x = if sign { x } else { -x };
            let b = prm(p, t, lam);
            let h = 1e-5;
            let fd = (boundary_value(x + h, &b).unwrap() - boundary_value(x - h, &b).unwrap()) / (2.0 * h);
            let d = boundary_derivative(x, &b).unwrap();
            prop_assert!((fd - d).abs() <= 1e-5 * (1.0 + d.abs()), "fd {} vs {}", fd, d);
        }
    }
}

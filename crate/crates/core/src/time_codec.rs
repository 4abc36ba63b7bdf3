//! Continuous time embeddings from a Bernstein polynomial basis.
//!
//! A timestamp is scaled into `[0, 1]`, expanded into the `n + 1`
//! Bernstein basis values, and mixed through a learnable `(n + 1) × d`
//! basis matrix. Any year inside the span gets an embedding, observed or not.

use crate::grad::{Param, ParamId, ParamSet, Tape, Var};
use crate::quad_store::Year;

/// Inclusive `(min, max)` year range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimeSpan {
    pub min: Year,
    pub max: Year,
}

impl TimeSpan {
    pub fn new(min: Year, max: Year) -> Self {
        assert!(min <= max, "time span min {min} > max {max}");
        Self { min, max }
    }

    pub fn contains(&self, tau: Year) -> bool {
        (self.min..=self.max).contains(&tau)
    }

    pub fn clamp(&self, tau: Year) -> Year {
        tau.clamp(self.min, self.max)
    }
}

/// Maps `tau` into `[0, 1]`; out-of-span years clamp and a degenerate span maps to 0.5.
pub fn normalize_time(tau: Year, span: TimeSpan) -> f64 {
    if span.max == span.min {
        return 0.5;
    }
    let x = (tau as f64 - span.min as f64) / (span.max as f64 - span.min as f64);
    x.clamp(0.0, 1.0)
}

/// Bernstein basis values `C(n,k) x^k (1-x)^(n-k)`, `k = 0..=n`.
#[derive(Debug, Clone, PartialEq)]
pub struct BernsteinCoeffs {
    pub alpha: Vec<f64>,
}

impl BernsteinCoeffs {
    pub fn order(&self) -> usize {
        self.alpha.len() - 1
    }
}

pub fn bernstein_basis(x: f64, n: usize) -> BernsteinCoeffs {
    BernsteinCoeffs {
        alpha: bernstein_values(x, n),
    }
}

// de Casteljau-style recurrence: every step is a convex combination, so values
// stay in [0, 1] and the sum stays at 1 up to rounding.
pub(crate) fn bernstein_values(x: f64, n: usize) -> Vec<f64> {
    let x = x.clamp(0.0, 1.0);
    let y = 1.0 - x;
    let mut b = vec![0.0; n + 1];
    b[0] = 1.0;
    for j in 1..=n {
        for k in (1..=j).rev() {
            b[k] = y * b[k] + x * b[k - 1];
        }
        b[0] *= y;
    }
    b
}

/// `d/dx b_{k,n}(x) = n (b_{k-1,n-1}(x) - b_{k,n-1}(x))`.
pub(crate) fn bernstein_derivatives(x: f64, n: usize) -> Vec<f64> {
    if n == 0 {
        return vec![0.0];
    }
    let lower = bernstein_values(x, n - 1);
    let nf = n as f64;
    (0..=n)
        .map(|k| {
            let left = if k >= 1 { lower[k - 1] } else { 0.0 };
            let right = if k < n { lower[k] } else { 0.0 };
            nf * (left - right)
        })
        .collect()
}

/// How a year is warped into `[0, 1]` before the Bernstein expansion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimeWarp {
    /// Plain min-max scaling.
    Linear,
    /// `sigmoid(w2 · tanh(w1 x + b1) + b2)` applied on top of min-max scaling.
    Mlp { hidden: usize },
}

impl TimeWarp {
    pub fn param_len(&self) -> usize {
        match self {
            TimeWarp::Linear => 0,
            TimeWarp::Mlp { hidden } => 3 * hidden + 1,
        }
    }
}

/// Time encoder: Bernstein order, year span and the learnable basis matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeCodec {
    pub order: usize,
    pub span: TimeSpan,
    pub dim: usize,
    /// Row-major `(order + 1) × dim`.
    pub basis: Param,
    pub warp: TimeWarp,
    /// Warp MLP weights, laid out `[w1 (h), b1 (h), w2 (h), b2]`; empty for linear warp.
    pub warp_params: Param,
}

impl TimeCodec {
    pub fn new(order: usize, span: TimeSpan, dim: usize, basis: Vec<f64>) -> Self {
        assert!(order >= 1, "Bernstein order must be at least 1");
        assert_eq!(basis.len(), (order + 1) * dim, "basis must be (order+1) x dim");
        Self {
            order,
            span,
            dim,
            basis: Param::new(basis),
            warp: TimeWarp::Linear,
            warp_params: Param::zeros(0),
        }
    }

    pub fn with_warp(mut self, warp: TimeWarp, params: Vec<f64>) -> Self {
        assert_eq!(params.len(), warp.param_len());
        self.warp = warp;
        self.warp_params = Param::new(params);
        self
    }

    /// Number of basis functions, `order + 1`.
    pub fn rows(&self) -> usize {
        self.order + 1
    }

    pub fn basis_row(&self, k: usize) -> &[f64] {
        &self.basis.values[k * self.dim..(k + 1) * self.dim]
    }

    /// Warped unit time of `tau`.
    pub fn unit_time(&self, tau: Year) -> f64 {
        let x = normalize_time(tau, self.span);
        match self.warp {
            TimeWarp::Linear => x,
            TimeWarp::Mlp { hidden } => {
                let p = &self.warp_params.values;
                let (w1, rest) = p.split_at(hidden);
                let (b1, rest) = rest.split_at(hidden);
                let (w2, b2) = rest.split_at(hidden);
                let z: f64 = (0..hidden)
                    .map(|i| w2[i] * (w1[i] * x + b1[i]).tanh())
                    .sum::<f64>()
                    + b2[0];
                crate::grad::scalar::sigmoid(z)
            }
        }
    }

    pub fn coefficients(&self, tau: Year) -> BernsteinCoeffs {
        bernstein_basis(self.unit_time(tau), self.order)
    }

    /// `P_τ = αᵀ X`.
    pub fn time_embedding(&self, tau: Year) -> Vec<f64> {
        let alpha = self.coefficients(tau).alpha;
        let mut out = vec![0.0; self.dim];
        for (k, a) in alpha.iter().enumerate() {
            for (o, x) in out.iter_mut().zip(self.basis_row(k)) {
                *o += a * x;
            }
        }
        out
    }

    /// Gradient of `upstream · P_τ` with respect to the basis matrix: `α ⊗ upstream`.
    pub fn basis_gradient(&self, tau: Year, upstream: &[f64]) -> Vec<f64> {
        assert_eq!(upstream.len(), self.dim);
        let alpha = self.coefficients(tau).alpha;
        alpha
            .iter()
            .flat_map(|a| upstream.iter().map(move |g| a * g))
            .collect()
    }

    /// Records `P_τ` on `tape`. `basis` must be the leaf holding the full basis matrix;
    /// `warp` the leaves `[w1, b1, w2, b2]` when the MLP warp is active.
    pub fn record_embedding(&self, tape: &mut Tape, tau: Year, basis: Var, warp: Option<[Var; 4]>) -> Var {
        let alpha = match (self.warp, warp) {
            (TimeWarp::Mlp { .. }, Some([w1, b1, w2, b2])) => {
                let x = tape.constant_scalar(normalize_time(tau, self.span));
                let h = tape.scalar_mul(x, w1);
                let h = tape.add(h, b1);
                let h = tape.tanh(h);
                let z = tape.dot(w2, h);
                let z = tape.add(z, b2);
                let u = tape.sigmoid(z);
                tape.bernstein(u, self.order)
            }
            _ => tape.constant(self.coefficients(tau).alpha),
        };
        tape.row_combine(alpha, basis)
    }

    /// Records the warp-MLP leaves for `record_embedding`, reading from `params`.
    pub fn record_warp_leaves<P: ParamSet + ?Sized>(
        &self,
        tape: &mut Tape,
        params: &P,
        id: ParamId,
    ) -> Option<[Var; 4]> {
        match self.warp {
            TimeWarp::Linear => None,
            TimeWarp::Mlp { hidden } => Some([
                tape.param(params, id, 0, hidden),
                tape.param(params, id, hidden, hidden),
                tape.param(params, id, 2 * hidden, hidden),
                tape.param(params, id, 3 * hidden, 1),
            ]),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Exact `C(n,k) p^k (q-p)^(n-k) / q^n` with integers; valid while q^n fits in u128.
    fn exact_bernstein(p: u128, q: u128, n: u32) -> Vec<f64> {
        let total = q.pow(n);
        let mut binom = 1u128;
        (0..=n)
            .map(|k| {
                if k > 0 {
                    binom = binom * u128::from(n - k + 1) / u128::from(k);
                }
                let num = binom * p.pow(k) * (q - p).pow(n - k);
                num as f64 / total as f64
            })
            .collect()
    }

    #[test]
    fn normalization_endpoints_and_midpoint() {
        let span = TimeSpan::new(1479, 2018);
        assert_eq!(normalize_time(1479, span), 0.0);
        assert_eq!(normalize_time(2018, span), 1.0);
        assert_eq!(normalize_time(5, TimeSpan::new(0, 10)), 0.5);
        assert_eq!(normalize_time(3000, span), 1.0);
        assert_eq!(normalize_time(-5, span), 0.0);
        assert_eq!(normalize_time(1931, TimeSpan::new(1931, 1931)), 0.5);
    }

    #[test]
    fn basis_small_cases() {
        assert_eq!(bernstein_basis(0.0, 4).alpha, vec![1.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(bernstein_basis(1.0, 3).alpha, vec![0.0, 0.0, 0.0, 1.0]);
        assert_eq!(bernstein_basis(0.5, 2).alpha, vec![0.25, 0.5, 0.25]);
    }

    #[test]
    fn basis_matches_exact_rationals() {
        for n in [2u32, 5, 12, 20] {
            for p in 1..10u128 {
                let exact = exact_bernstein(p, 10, n);
                let got = bernstein_basis(p as f64 / 10.0, n as usize).alpha;
                let sum: f64 = got.iter().sum();
                assert!((sum - 1.0).abs() < 1e-12, "n={n} p={p} sum={sum}");
                for (g, e) in got.iter().zip(&exact) {
                    assert!((g - e).abs() <= 1e-14 + 1e-12 * e, "n={n} p={p}: {g} vs {e}");
                }
            }
        }
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let n = 7;
        for &x in &[0.13, 0.5, 0.91] {
            let d = bernstein_derivatives(x, n);
            let h = 1e-6;
            let hi = bernstein_values(x + h, n);
            let lo = bernstein_values(x - h, n);
            for k in 0..=n {
                let fd = (hi[k] - lo[k]) / (2.0 * h);
                assert!((fd - d[k]).abs() < 1e-7, "k={k}: {fd} vs {}", d[k]);
            }
        }
    }

    #[test]
    fn identity_basis_at_span_min_returns_first_row() {
        let d = 4;
        let mut basis = vec![0.0; 16];
        for i in 0..4 {
            basis[i * d + i] = 1.0;
        }
        let codec = TimeCodec::new(3, TimeSpan::new(1900, 2000), d, basis);
        assert_eq!(codec.time_embedding(1900), vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(codec.time_embedding(2000), vec![0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn zero_basis_gives_zero_embedding() {
        let codec = TimeCodec::new(5, TimeSpan::new(0, 100), 3, vec![0.0; 18]);
        for tau in [0, 17, 63, 100] {
            assert_eq!(codec.time_embedding(tau), vec![0.0; 3]);
        }
    }

    #[test]
    fn basis_gradient_matches_finite_differences() {
        let d = 3;
        let basis: Vec<f64> = (0..(6 * d)).map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0).collect();
        let codec = TimeCodec::new(5, TimeSpan::new(1000, 2000), d, basis.clone());
        let upstream = [0.3, -1.2, 0.8];
        let tau = 1437;
        let f = |x: &[f64]| {
            let c = TimeCodec::new(5, TimeSpan::new(1000, 2000), d, x.to_vec());
            c.time_embedding(tau).iter().zip(&upstream).map(|(a, b)| a * b).sum::<f64>()
        };
        let g = codec.basis_gradient(tau, &upstream);
        let h = 1e-5;
        for i in 0..basis.len() {
            let mut hi = basis.clone();
            hi[i] += h;
            let mut lo = basis.clone();
            lo[i] -= h;
            let fd = (f(&hi) - f(&lo)) / (2.0 * h);
            let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-4);
            assert!(rel < 1e-4, "entry {i}: {} vs {fd}", g[i]);
        }
    }

    #[test]
    fn embedding_is_linear_in_basis() {
        let d = 2;
        let x1: Vec<f64> = (0..8).map(|i| i as f64 * 0.25).collect();
        let x2: Vec<f64> = (0..8).map(|i| 1.0 - i as f64 * 0.5).collect();
        let sum: Vec<f64> = x1.iter().zip(&x2).map(|(a, b)| a + b).collect();
        let span = TimeSpan::new(0, 64);
        let c1 = TimeCodec::new(3, span, d, x1);
        let c2 = TimeCodec::new(3, span, d, x2);
        let cs = TimeCodec::new(3, span, d, sum);
        for tau in [0, 16, 32, 64] {
            let a = c1.time_embedding(tau);
            let b = c2.time_embedding(tau);
            let s = cs.time_embedding(tau);
            for i in 0..d {
                assert!((a[i] + b[i] - s[i]).abs() < 1e-14);
            }
        }
    }
}

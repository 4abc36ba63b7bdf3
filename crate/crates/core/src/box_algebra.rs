//! Gumbel boxes: lattice operations, expected volumes and box probabilities.
//!
//! A box stores the location parameters of its min corners (max-Gumbel) and
//! max corners (min-Gumbel) under one shared scale `beta`. Volumes are kept in
//! log space throughout. An empty intersection is not a special value: its
//! corners are inverted and the softplus volume is close to zero.

use crate::grad::scalar::{log_softplus, logaddexp};
use crate::grad::{Tape, Var};
use thiserror::Error;

/// Euler–Mascheroni constant.
pub const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

/// Conditioning on a box whose log-volume is below this is an error.
pub const MIN_CONDITIONING_LOG_VOLUME: f64 = -700.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BoxError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("scale mismatch: {0} vs {1}")]
    ScaleMismatch(f64, f64),
    #[error("conditioning on near-empty box (log volume {0})")]
    NearEmptyConditioning(f64),
}

/// How intersections and unions combine corner locations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeetMode {
    /// `beta`-scaled log-sum-exp smoothing of max/min.
    Gumbel,
    /// Literal elementwise max/min.
    Hard,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GumbelBox {
    pub mu_min: Vec<f64>,
    pub mu_max: Vec<f64>,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VolumeResult {
    /// Natural log of the expected volume.
    pub log_volume: f64,
    pub per_dim: Option<Vec<f64>>,
}

impl VolumeResult {
    pub fn volume(&self) -> f64 {
        self.log_volume.exp()
    }
}

/// A probability-like ratio with its unclamped value kept for diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Probability {
    pub value: f64,
    pub raw: f64,
}

impl Probability {
    pub fn was_clamped(&self) -> bool {
        self.value != self.raw
    }
}

impl GumbelBox {
    pub fn new(mu_min: Vec<f64>, mu_max: Vec<f64>, beta: f64) -> Self {
        assert_eq!(mu_min.len(), mu_max.len(), "corner dimensions differ");
        assert!(beta > 0.0, "beta must be positive");
        Self { mu_min, mu_max, beta }
    }

    pub fn dim(&self) -> usize {
        self.mu_min.len()
    }

    /// Fraction of dimensions where the min corner lies above the max corner.
    pub fn inverted_fraction(&self) -> f64 {
        if self.dim() == 0 {
            return 0.0;
        }
        let n = self
            .mu_min
            .iter()
            .zip(&self.mu_max)
            .filter(|(lo, hi)| lo > hi)
            .count();
        n as f64 / self.dim() as f64
    }

    pub fn translated(&self, offset: &[f64]) -> Self {
        let shift = |v: &[f64]| v.iter().zip(offset).map(|(a, b)| a + b).collect();
        Self::new(shift(&self.mu_min), shift(&self.mu_max), self.beta)
    }

    fn check(&self, other: &Self) -> Result<(), BoxError> {
        if self.dim() != other.dim() {
            return Err(BoxError::DimensionMismatch(self.dim(), other.dim()));
        }
        if self.beta != other.beta {
            return Err(BoxError::ScaleMismatch(self.beta, other.beta));
        }
        Ok(())
    }
}

/// Smoothed max: `β · ln(e^{a/β} + e^{b/β})`.
pub fn smooth_max(a: f64, b: f64, beta: f64) -> f64 {
    beta * logaddexp(a / beta, b / beta)
}

/// Smoothed min: `-β · ln(e^{-a/β} + e^{-b/β})`.
pub fn smooth_min(a: f64, b: f64, beta: f64) -> f64 {
    -beta * logaddexp(-a / beta, -b / beta)
}

fn combine(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

/// Intersection box.
pub fn meet(a: &GumbelBox, b: &GumbelBox, mode: MeetMode) -> Result<GumbelBox, BoxError> {
    a.check(b)?;
    let beta = a.beta;
    let (lo, hi) = match mode {
        MeetMode::Hard => (
            combine(&a.mu_min, &b.mu_min, f64::max),
            combine(&a.mu_max, &b.mu_max, f64::min),
        ),
        MeetMode::Gumbel => (
            combine(&a.mu_min, &b.mu_min, |x, y| smooth_max(x, y, beta)),
            combine(&a.mu_max, &b.mu_max, |x, y| smooth_min(x, y, beta)),
        ),
    };
    Ok(GumbelBox::new(lo, hi, beta))
}

/// Smallest enclosing box.
pub fn join(a: &GumbelBox, b: &GumbelBox, mode: MeetMode) -> Result<GumbelBox, BoxError> {
    a.check(b)?;
    let beta = a.beta;
    let (lo, hi) = match mode {
        MeetMode::Hard => (
            combine(&a.mu_min, &b.mu_min, f64::min),
            combine(&a.mu_max, &b.mu_max, f64::max),
        ),
        MeetMode::Gumbel => (
            combine(&a.mu_min, &b.mu_min, |x, y| smooth_min(x, y, beta)),
            combine(&a.mu_max, &b.mu_max, |x, y| smooth_max(x, y, beta)),
        ),
    };
    Ok(GumbelBox::new(lo, hi, beta))
}

/// Log of one dimension's expected side length:
/// `ln(β · softplus((hi - lo)/β - 2γ))`.
pub fn log_side(lo: f64, hi: f64, beta: f64) -> f64 {
    beta.ln() + log_softplus((hi - lo) / beta - 2.0 * EULER_GAMMA)
}

/// Log expected volume from raw corner slices.
pub fn log_volume_of(mu_min: &[f64], mu_max: &[f64], beta: f64) -> f64 {
    mu_min
        .iter()
        .zip(mu_max)
        .map(|(&lo, &hi)| log_side(lo, hi, beta))
        .sum()
}

/// Log volume of `meet(a, b)` without materializing the meet.
pub fn log_meet_volume_of(
    a_min: &[f64],
    a_max: &[f64],
    b_min: &[f64],
    b_max: &[f64],
    beta: f64,
    mode: MeetMode,
) -> f64 {
    let mut total = 0.0;
    for i in 0..a_min.len() {
        let (lo, hi) = match mode {
            MeetMode::Hard => (a_min[i].max(b_min[i]), a_max[i].min(b_max[i])),
            MeetMode::Gumbel => (
                smooth_max(a_min[i], b_min[i], beta),
                smooth_min(a_max[i], b_max[i], beta),
            ),
        };
        total += log_side(lo, hi, beta);
    }
    total
}

pub fn expected_volume(b: &GumbelBox) -> VolumeResult {
    let per_dim: Vec<f64> = b
        .mu_min
        .iter()
        .zip(&b.mu_max)
        .map(|(&lo, &hi)| log_side(lo, hi, b.beta))
        .collect();
    VolumeResult {
        log_volume: per_dim.iter().sum(),
        per_dim: Some(per_dim),
    }
}

/// `P(a | b) = Vol(a ∧ b) / Vol(b)`, clamped to `[0, 1]`.
pub fn conditional_prob(a: &GumbelBox, b: &GumbelBox, mode: MeetMode) -> Result<Probability, BoxError> {
    a.check(b)?;
    let log_b = log_volume_of(&b.mu_min, &b.mu_max, b.beta);
    if log_b < MIN_CONDITIONING_LOG_VOLUME {
        return Err(BoxError::NearEmptyConditioning(log_b));
    }
    let log_ab = log_meet_volume_of(&a.mu_min, &a.mu_max, &b.mu_min, &b.mu_max, a.beta, mode);
    let raw = (log_ab - log_b).exp();
    Ok(Probability {
        value: raw.clamp(0.0, 1.0),
        raw,
    })
}

/// Non-normalized `P(a, b, c) = Vol(a ∧ b ∧ c)`.
pub fn joint_prob3(a: &GumbelBox, b: &GumbelBox, c: &GumbelBox, mode: MeetMode) -> Result<f64, BoxError> {
    let ab = meet(a, b, mode)?;
    let abc = meet(&ab, c, mode)?;
    Ok(expected_volume(&abc).log_volume.exp())
}

/// Tape-recorded box: the two corner vectors.
#[derive(Debug, Clone, Copy)]
pub struct BoxVars {
    pub lo: Var,
    pub hi: Var,
}

/// Differentiable counterparts of the functions above.
pub mod record {
    use super::*;

    fn smooth_max_var(t: &mut Tape, a: Var, b: Var, beta: f64) -> Var {
        let sa = t.scale(a, 1.0 / beta);
        let sb = t.scale(b, 1.0 / beta);
        let l = t.logaddexp(sa, sb);
        t.scale(l, beta)
    }

    fn smooth_min_var(t: &mut Tape, a: Var, b: Var, beta: f64) -> Var {
        let sa = t.scale(a, -1.0 / beta);
        let sb = t.scale(b, -1.0 / beta);
        let l = t.logaddexp(sa, sb);
        t.scale(l, -beta)
    }

    pub fn meet(t: &mut Tape, a: BoxVars, b: BoxVars, beta: f64, mode: MeetMode) -> BoxVars {
        match mode {
            MeetMode::Hard => BoxVars {
                lo: t.max(a.lo, b.lo),
                hi: t.min(a.hi, b.hi),
            },
            MeetMode::Gumbel => BoxVars {
                lo: smooth_max_var(t, a.lo, b.lo, beta),
                hi: smooth_min_var(t, a.hi, b.hi, beta),
            },
        }
    }

    /// Scalar log expected volume.
    pub fn log_volume(t: &mut Tape, b: BoxVars, beta: f64) -> Var {
        let width = t.sub(b.hi, b.lo);
        let z = t.scale(width, 1.0 / beta);
        let z = t.shift(z, -2.0 * EULER_GAMMA);
        let per_dim = t.log_softplus(z);
        let s = t.sum(per_dim);
        let d = t.value(b.lo).len() as f64;
        t.shift(s, d * beta.ln())
    }

    /// `ln P(a | b)`, unclamped.
    pub fn log_conditional(t: &mut Tape, a: BoxVars, b: BoxVars, beta: f64, mode: MeetMode) -> Var {
        let m = meet(t, a, b, beta, mode);
        let num = log_volume(t, m, beta);
        let den = log_volume(t, b, beta);
        t.sub(num, den)
    }
}

//! Linear time-invariant blocks: rational transfer functions in `s`, their
//! discrete (trapezoidal) realization, and a saturating PI controller.
//!
//! Coefficient lists are stored in ascending powers of `s`, so `[1.0, 2.0]`
//! is `1 + 2s`. Trailing (highest-order) zeros are trimmed on construction.

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

/// Relative magnitude below which a leading coefficient is treated as zero.
const TRIM_REL: f64 = 1e-14;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LtiError {
    #[error("denominator is identically zero")]
    ZeroDenominator,
    #[error("transfer function is improper: numerator degree {num_degree} exceeds denominator degree {den_degree}")]
    Improper { num_degree: usize, den_degree: usize },
    #[error("time step must be positive and finite, got {0}")]
    InvalidStep(f64),
    #[error("non-finite input {0} fed to LTI block")]
    NonFiniteInput(f64),
    #[error("frequency must be non-negative, got {0} rad/s")]
    NegativeFrequency(f64),
    #[error("denominator vanishes at s = j{omega}: pole on the imaginary axis")]
    PoleOnAxis { omega: f64 },
    #[error("dc gain is indeterminate (0/0)")]
    Indeterminate,
    #[error("cannot invert a transfer function with a zero numerator")]
    ZeroNumerator,
    #[error("invalid PI limits: lo {lo} > hi {hi}")]
    InvalidLimits { lo: f64, hi: f64 },
}

/// Steady-state gain of a transfer function at `s = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DcGain {
    Finite(f64),
    Infinite,
}

impl DcGain {
    pub fn finite(self) -> Option<f64> {
        match self {
            DcGain::Finite(g) => Some(g),
            DcGain::Infinite => None,
        }
    }
}

fn trim(mut c: Vec<f64>) -> Vec<f64> {
    let scale = c.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    while c.len() > 1 {
        let last = *c.last().unwrap();
        if last == 0.0 || last.abs() <= TRIM_REL * scale {
            c.pop();
        } else {
            break;
        }
    }
    if c.is_empty() {
        c.push(0.0);
    }
    c
}

fn poly_mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

fn poly_add(a: &[f64], b: &[f64]) -> Vec<f64> {
    let n = a.len().max(b.len());
    (0..n)
        .map(|i| a.get(i).copied().unwrap_or(0.0) + b.get(i).copied().unwrap_or(0.0))
        .collect()
}

fn poly_eval(c: &[f64], s: Complex64) -> Complex64 {
    c.iter()
        .rev()
        .fold(Complex64::new(0.0, 0.0), |acc, &k| acc * s + k)
}

fn is_zero_poly(c: &[f64]) -> bool {
    c.iter().all(|&v| v == 0.0)
}

/// Roots of a polynomial given in ascending order, via companion-matrix
/// eigenvalues.
pub fn poly_roots(c: &[f64]) -> Vec<Complex64> {
    let c = trim(c.to_vec());
    let n = c.len() - 1;
    if n == 0 {
        return Vec::new();
    }
    let lead = c[n];
    let mut m = DMatrix::<f64>::zeros(n, n);
    for i in 1..n {
        m[(i, i - 1)] = 1.0;
    }
    for i in 0..n {
        m[(i, n - 1)] = -c[i] / lead;
    }
    m.complex_eigenvalues().iter().copied().collect()
}

fn poly_from_roots(gain: f64, roots: &[Complex64]) -> Vec<f64> {
    let mut acc = vec![Complex64::new(gain, 0.0)];
    for r in roots {
        let mut next = vec![Complex64::new(0.0, 0.0); acc.len() + 1];
        for (i, a) in acc.iter().enumerate() {
            next[i] -= a * r;
            next[i + 1] += a;
        }
        acc = next;
    }
    acc.into_iter().map(|z| z.re).collect()
}

/// Rational transfer function `num(s) / den(s)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTransfer", into = "RawTransfer")]
pub struct RationalTransfer {
    num: Vec<f64>,
    den: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawTransfer {
    num: Vec<f64>,
    den: Vec<f64>,
}

impl TryFrom<RawTransfer> for RationalTransfer {
    type Error = LtiError;
    fn try_from(r: RawTransfer) -> Result<Self, Self::Error> {
        RationalTransfer::new(r.num, r.den)
    }
}

impl From<RationalTransfer> for RawTransfer {
    fn from(t: RationalTransfer) -> Self {
        RawTransfer { num: t.num, den: t.den }
    }
}

impl RationalTransfer {
    pub fn new(num: Vec<f64>, den: Vec<f64>) -> Result<Self, LtiError> {
        let den = trim(den);
        if is_zero_poly(&den) {
            return Err(LtiError::ZeroDenominator);
        }
        Ok(Self { num: trim(num), den })
    }

    pub fn gain(k: f64) -> Self {
        Self { num: vec![k], den: vec![1.0] }
    }

    pub fn one() -> Self {
        Self::gain(1.0)
    }

    pub fn zero() -> Self {
        Self::gain(0.0)
    }

    /// `1 / (tau s + 1)`; `tau = 0` gives the identity.
    pub fn lowpass(tau: f64) -> Self {
        Self { num: vec![1.0], den: trim(vec![1.0, tau]) }
    }

    /// `tau s / (tau s + 1)`.
    pub fn highpass(tau: f64) -> Self {
        Self { num: trim(vec![0.0, tau]), den: trim(vec![1.0, tau]) }
    }

    pub fn num(&self) -> &[f64] {
        &self.num
    }

    pub fn den(&self) -> &[f64] {
        &self.den
    }

    pub fn num_degree(&self) -> usize {
        if is_zero_poly(&self.num) {
            0
        } else {
            self.num.len() - 1
        }
    }

    pub fn den_degree(&self) -> usize {
        self.den.len() - 1
    }

    pub fn is_zero(&self) -> bool {
        is_zero_poly(&self.num)
    }

    pub fn is_proper(&self) -> bool {
        self.num_degree() <= self.den_degree()
    }

    /// Proper with a nonzero high-frequency gain, so the inverse is proper too.
    pub fn is_biproper(&self) -> bool {
        !self.is_zero() && self.num_degree() == self.den_degree()
    }

    pub fn eval(&self, s: Complex64) -> Complex64 {
        poly_eval(&self.num, s) / poly_eval(&self.den, s)
    }

    /// Frequency response at `s = j omega`.
    pub fn eval_freq(&self, omega: f64) -> Result<Complex64, LtiError> {
        if !(omega >= 0.0) {
            return Err(LtiError::NegativeFrequency(omega));
        }
        let s = Complex64::new(0.0, omega);
        let d = poly_eval(&self.den, s);
        if d.re == 0.0 && d.im == 0.0 {
            return Err(LtiError::PoleOnAxis { omega });
        }
        Ok(poly_eval(&self.num, s) / d)
    }

    pub fn dc_gain(&self) -> Result<DcGain, LtiError> {
        let n0 = self.num[0];
        let d0 = self.den[0];
        match (n0 == 0.0, d0 == 0.0) {
            (_, false) => Ok(DcGain::Finite(n0 / d0)),
            (false, true) => Ok(DcGain::Infinite),
            (true, true) => Err(LtiError::Indeterminate),
        }
    }

    /// Limit of the response as `omega -> infinity` for a proper transfer.
    pub fn high_frequency_gain(&self) -> Result<f64, LtiError> {
        if !self.is_proper() {
            return Err(LtiError::Improper {
                num_degree: self.num_degree(),
                den_degree: self.den_degree(),
            });
        }
        if self.num_degree() < self.den_degree() || self.is_zero() {
            Ok(0.0)
        } else {
            Ok(self.num[self.num.len() - 1] / self.den[self.den.len() - 1])
        }
    }

    pub fn poles(&self) -> Vec<Complex64> {
        poly_roots(&self.den)
    }

    pub fn zeros(&self) -> Vec<Complex64> {
        if self.is_zero() {
            Vec::new()
        } else {
            poly_roots(&self.num)
        }
    }

    /// All poles strictly in the open left half-plane.
    pub fn is_stable(&self) -> bool {
        self.poles().iter().all(|p| p.re < 0.0)
    }

    pub fn is_minimum_phase(&self) -> bool {
        self.zeros().iter().all(|z| z.re < 0.0)
    }

    pub fn scale(&self, k: f64) -> Self {
        Self { num: trim(self.num.iter().map(|c| c * k).collect()), den: self.den.clone() }
    }

    pub fn add(&self, other: &Self) -> Self {
        if self.den == other.den {
            return Self { num: trim(poly_add(&self.num, &other.num)), den: self.den.clone() };
        }
        let num = poly_add(&poly_mul(&self.num, &other.den), &poly_mul(&other.num, &self.den));
        Self { num: trim(num), den: trim(poly_mul(&self.den, &other.den)) }
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.add(&other.scale(-1.0))
    }

    pub fn mul(&self, other: &Self) -> Self {
        Self {
            num: trim(poly_mul(&self.num, &other.num)),
            den: trim(poly_mul(&self.den, &other.den)),
        }
    }

    pub fn recip(&self) -> Result<Self, LtiError> {
        if self.is_zero() {
            return Err(LtiError::ZeroNumerator);
        }
        Ok(Self { num: self.den.clone(), den: self.num.clone() })
    }

    /// `self / other` with pole-zero cancellation at relative tolerance `tol`.
    ///
    /// Roots are taken from each factor separately rather than from the
    /// product polynomials, which keeps repeated factors well conditioned.
    pub fn div(&self, other: &Self, tol: f64) -> Result<Self, LtiError> {
        if other.is_zero() {
            return Err(LtiError::ZeroNumerator);
        }
        if self.is_zero() {
            return Ok(Self::zero());
        }
        let lead = |c: &[f64]| c[c.len() - 1];
        let gain = lead(&self.num) * lead(&other.den) / (lead(&self.den) * lead(&other.num));
        let mut zeros = self.zeros();
        zeros.extend(poly_roots(&other.den));
        let mut poles = poly_roots(&self.den);
        poles.extend(other.zeros());
        Ok(Self::from_roots(gain, zeros, poles, tol))
    }

    /// Cancels numerator/denominator roots closer than `tol` (relative).
    pub fn minreal(&self, tol: f64) -> Self {
        if self.is_zero() {
            return Self::zero();
        }
        let lead = |c: &[f64]| c[c.len() - 1];
        let gain = lead(&self.num) / lead(&self.den);
        Self::from_roots(gain, self.zeros(), self.poles(), tol)
    }

    fn from_roots(gain: f64, mut zeros: Vec<Complex64>, poles: Vec<Complex64>, tol: f64) -> Self {
        let mut kept_poles = Vec::with_capacity(poles.len());
        for p in poles {
            let hit = zeros
                .iter()
                .position(|z| (z - p).norm() <= tol * p.norm().max(1.0));
            match hit {
                Some(i) => {
                    zeros.swap_remove(i);
                }
                None => kept_poles.push(p),
            }
        }
        let num = poly_from_roots(gain, &zeros);
        let den = poly_from_roots(1.0, &kept_poles);
        // Normalize so the constant denominator term is 1 when possible; this
        // keeps the familiar `1 + tau s` shape.
        let d0 = den[0];
        if d0.abs() > 0.0 {
            Self {
                num: trim(num.iter().map(|c| c / d0).collect()),
                den: trim(den.iter().map(|c| c / d0).collect()),
            }
        } else {
            Self { num: trim(num), den: trim(den) }
        }
    }

    /// Trapezoidal realization at step `dt`.
    pub fn realize(&self, dt: f64) -> Result<LtiBlock, LtiError> {
        LtiBlock::new(self, dt)
    }
}

impl fmt::Display for RationalTransfer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?} / {:?}", self.num, self.den)
    }
}

/// Controllable-canonical state-space block advanced with the trapezoidal
/// rule (bilinear transform).
///
/// The block tracks the input sample at the current time, so one call to
/// [`LtiBlock::step`] integrates over `[t, t + dt]` with the input varying
/// linearly from the stored sample to the new one.
#[derive(Debug, Clone)]
pub struct LtiBlock {
    n: usize,
    // Continuous realization (kept for steady-state initialization).
    a: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
    d: f64,
    // Trapezoidal update: x' = m x + w (u_prev + u).
    m: Vec<f64>,
    w: Vec<f64>,
    x: Vec<f64>,
    u_prev: f64,
    dt: f64,
}

impl LtiBlock {
    pub fn new(tf: &RationalTransfer, dt: f64) -> Result<Self, LtiError> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(LtiError::InvalidStep(dt));
        }
        if !tf.is_proper() {
            return Err(LtiError::Improper {
                num_degree: tf.num_degree(),
                den_degree: tf.den_degree(),
            });
        }
        let n = tf.den_degree();
        let lead = tf.den[n];
        let den: Vec<f64> = tf.den.iter().map(|v| v / lead).collect();
        let mut num: Vec<f64> = tf.num.iter().map(|v| v / lead).collect();
        num.resize(n + 1, 0.0);
        let d = num[n];
        let c: Vec<f64> = (0..n).map(|i| num[i] - d * den[i]).collect();

        let mut a = vec![0.0; n * n];
        for i in 0..n.saturating_sub(1) {
            a[i * n + i + 1] = 1.0;
        }
        if n > 0 {
            for j in 0..n {
                a[(n - 1) * n + j] = -den[j];
            }
        }
        let mut b = vec![0.0; n];
        if n > 0 {
            b[n - 1] = 1.0;
        }

        let (m, w) = if n == 0 {
            (Vec::new(), Vec::new())
        } else {
            let h = dt / 2.0;
            let am = DMatrix::from_row_slice(n, n, &a);
            let eye = DMatrix::<f64>::identity(n, n);
            let lhs = &eye - &am * h;
            let inv = lhs.try_inverse().ok_or(LtiError::InvalidStep(dt))?;
            let mm = &inv * (&eye + &am * h);
            let ww = &inv * nalgebra::DVector::from_column_slice(&b) * h;
            let mut m = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    m[i * n + j] = mm[(i, j)];
                }
            }
            (m, ww.iter().copied().collect())
        };

        Ok(Self { n, a, b, c, d, m, w, x: vec![0.0; n], u_prev: 0.0, dt })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn order(&self) -> usize {
        self.n
    }

    pub fn state(&self) -> &[f64] {
        &self.x
    }

    /// Output at the current time.
    pub fn output(&self) -> f64 {
        dot(&self.c, &self.x) + self.d * self.u_prev
    }

    /// Changes the input sample at the current time without advancing the
    /// state. Models a discontinuity in the input exactly at this instant.
    pub fn set_current_input(&mut self, u: f64) -> Result<f64, LtiError> {
        if !u.is_finite() {
            return Err(LtiError::NonFiniteInput(u));
        }
        self.u_prev = u;
        Ok(self.output())
    }

    /// Output the block would produce one step ahead for input `u`, without
    /// committing the step.
    pub fn peek(&self, u: f64) -> f64 {
        let mut y = self.d * u;
        for i in 0..self.n {
            let mut xi = self.w[i] * (self.u_prev + u);
            for j in 0..self.n {
                xi += self.m[i * self.n + j] * self.x[j];
            }
            y += self.c[i] * xi;
        }
        y
    }

    /// Sensitivity of the next output to the next input.
    pub fn feedthrough(&self) -> f64 {
        self.d + dot(&self.c, &self.w)
    }

    /// Advances by `dt` with input sample `u` at the new time and returns
    /// the output there.
    pub fn step(&mut self, u: f64) -> Result<f64, LtiError> {
        if !u.is_finite() {
            return Err(LtiError::NonFiniteInput(u));
        }
        if self.n > 0 {
            let s = self.u_prev + u;
            let mut next = vec![0.0; self.n];
            for (i, nx) in next.iter_mut().enumerate() {
                let mut v = self.w[i] * s;
                for j in 0..self.n {
                    v += self.m[i * self.n + j] * self.x[j];
                }
                *nx = v;
            }
            self.x = next;
        }
        self.u_prev = u;
        Ok(self.output())
    }

    /// Places the block at the equilibrium for constant input `u`. Returns
    /// `false` (leaving the state untouched) when the block has a pole at
    /// the origin and no equilibrium exists.
    pub fn settle(&mut self, u: f64) -> bool {
        if self.n == 0 {
            self.u_prev = u;
            return true;
        }
        let am = DMatrix::from_row_slice(self.n, self.n, &self.a);
        let rhs = nalgebra::DVector::from_column_slice(&self.b) * (-u);
        match am.lu().solve(&rhs) {
            Some(x) => {
                self.x = x.iter().copied().collect();
                self.u_prev = u;
                true
            }
            None => false,
        }
    }

    pub fn reset(&mut self) {
        self.x.iter_mut().for_each(|v| *v = 0.0);
        self.u_prev = 0.0;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// PI controller with optional output clamp; the integrator freezes while
/// the output is saturated and the error would drive it further out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiController {
    pub kp: f64,
    pub ki: f64,
    #[serde(default)]
    pub integ: f64,
    #[serde(default)]
    pub limits: Option<(f64, f64)>,
    #[serde(skip)]
    saturated: bool,
}

impl PiController {
    pub fn new(kp: f64, ki: f64) -> Self {
        Self { kp, ki, integ: 0.0, limits: None, saturated: false }
    }

    pub fn with_limits(mut self, lo: f64, hi: f64) -> Result<Self, LtiError> {
        if lo > hi {
            return Err(LtiError::InvalidLimits { lo, hi });
        }
        self.limits = Some((lo, hi));
        Ok(self)
    }

    pub fn is_saturated(&self) -> bool {
        self.saturated
    }

    /// Output for error `err` with the current integral, no state change.
    pub fn output(&self, err: f64) -> f64 {
        let raw = self.kp * err + self.integ;
        match self.limits {
            Some((lo, hi)) => raw.clamp(lo, hi),
            None => raw,
        }
    }

    pub fn step(&mut self, err: f64, dt: f64) -> Result<f64, LtiError> {
        if !err.is_finite() {
            return Err(LtiError::NonFiniteInput(err));
        }
        let candidate = self.integ + self.ki * err * dt;
        let raw = self.kp * err + candidate;
        let (out, sat) = match self.limits {
            Some((_, hi)) if raw > hi => (hi, true),
            Some((lo, _)) if raw < lo => (lo, true),
            _ => (raw, false),
        };
        let winding = sat && ((raw > out && err > 0.0) || (raw < out && err < 0.0));
        if !winding {
            self.integ = candidate;
        }
        self.saturated = sat;
        Ok(out)
    }

    pub fn reset(&mut self) {
        self.integ = 0.0;
        self.saturated = false;
    }
}

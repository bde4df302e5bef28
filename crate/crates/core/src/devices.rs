//! Device dynamics: synchronous machine with governor, grid-forming droop,
//! virtual synchronous generator, and grid-following inverter with PLL.
//!
//! Device parameters are per-unit on the device's own MVA rating. Angles are
//! measured in the synchronously rotating frame at nominal frequency, so a
//! speed of exactly 1 pu leaves the angle constant.

use crate::lti::{LtiBlock, LtiError, PiController, RationalTransfer};
use crate::network::DeviceInterface;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Accepted speed band, pu.
pub const SPEED_BAND: (f64, f64) = (0.9, 1.1);

/// Terminal voltage below which a PLL is considered to have lost lock, pu.
pub const PLL_LOCK_VOLTAGE: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DeviceError {
    #[error("speed {omega:.6} pu left the accepted band [0.9, 1.1]")]
    SpeedBand { omega: f64 },
    #[error("invalid device parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Lti(#[from] LtiError),
    #[error("non-finite electrical power {0}")]
    NonFinite(f64),
}

fn check_speed(omega: f64) -> Result<(), DeviceError> {
    if (SPEED_BAND.0..=SPEED_BAND.1).contains(&omega) {
        Ok(())
    } else {
        Err(DeviceError::SpeedBand { omega })
    }
}

/// Classic fourth-order Runge-Kutta step for a fixed-size state.
pub fn rk4<const N: usize>(x: &[f64; N], dt: f64, f: impl Fn(&[f64; N]) -> [f64; N]) -> [f64; N] {
    let add = |a: &[f64; N], k: &[f64; N], h: f64| -> [f64; N] {
        let mut out = *a;
        for i in 0..N {
            out[i] += h * k[i];
        }
        out
    };
    let k1 = f(x);
    let k2 = f(&add(x, &k1, dt / 2.0));
    let k3 = f(&add(x, &k2, dt / 2.0));
    let k4 = f(&add(x, &k3, dt));
    let mut out = *x;
    for i in 0..N {
        out[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    out
}

/// dq-frame quantities around a grid-following inverter.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DqSignals {
    pub v_gd: f64,
    pub v_gq: f64,
    pub i_od: f64,
    pub i_oq: f64,
    pub i_d: f64,
    pub i_q: f64,
    pub i_d_ref: f64,
    pub i_q_ref: f64,
    pub v_id_ref: f64,
    pub v_iq_ref: f64,
}

/// Instantaneous dq power with the amplitude-invariant 3/2 factor.
pub fn compute_pq(sig: &DqSignals) -> (f64, f64) {
    let p = 1.5 * (sig.v_gd * sig.i_od + sig.v_gq * sig.i_oq);
    let q = 1.5 * (sig.v_gq * sig.i_od - sig.v_gd * sig.i_oq);
    (p, q)
}

/// Per-unit phasor power `V * conj(I)`.
pub fn phasor_power(v: Complex64, i: Complex64) -> Complex64 {
    v * i.conj()
}

/// Where a device connects and how its rating maps to the system base.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Attachment {
    pub bus: usize,
    pub rating_mva: f64,
    pub s_base_mva: f64,
}

impl Attachment {
    pub fn new(bus: usize, rating_mva: f64, s_base_mva: f64) -> Result<Self, DeviceError> {
        if !(rating_mva > 0.0 && s_base_mva > 0.0) {
            return Err(DeviceError::InvalidParams("ratings must be positive".into()));
        }
        Ok(Self { bus, rating_mva, s_base_mva })
    }

    /// Device-base to system-base power factor.
    pub fn scale(&self) -> f64 {
        self.rating_mva / self.s_base_mva
    }

    /// Series reactance given on the device base, expressed on the system base.
    pub fn reactance(&self, x_device: f64) -> Complex64 {
        Complex64::new(0.0, x_device / self.scale())
    }
}

/// EMF behind `z` (system base) that delivers `s` (system base) at terminal
/// voltage `v`.
pub fn emf_behind(v: Complex64, s: Complex64, z: Complex64) -> Complex64 {
    v + z * (s / v).conj()
}

// ---------------------------------------------------------------------------
// Synchronous machine

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgParams {
    pub h_inertia: f64,
    #[serde(default)]
    pub d_mech: f64,
    /// Governor droop; `None` disables the governor.
    pub r_gov: Option<f64>,
    pub t_gov: f64,
    pub x_d_prime: f64,
}

impl SgParams {
    pub fn validate(&self) -> Result<(), DeviceError> {
        if !(self.h_inertia > 0.0) {
            return Err(DeviceError::InvalidParams("h_inertia must be positive".into()));
        }
        if self.d_mech < 0.0 {
            return Err(DeviceError::InvalidParams("d_mech must be non-negative".into()));
        }
        if let Some(r) = self.r_gov {
            if !(r > 0.0) {
                return Err(DeviceError::InvalidParams("r_gov must be positive".into()));
            }
            if !(self.t_gov > 0.0) {
                return Err(DeviceError::InvalidParams("t_gov must be positive".into()));
            }
        }
        if !(self.x_d_prime > 0.0) {
            return Err(DeviceError::InvalidParams("x_d_prime must be positive".into()));
        }
        Ok(())
    }
}

/// Classical machine: constant EMF behind transient reactance, swing
/// equation, first-order governor.
#[derive(Debug, Clone, PartialEq)]
pub struct SyncMachine {
    pub params: SgParams,
    pub at: Attachment,
    pub delta: f64,
    pub omega: f64,
    pub p_gov: f64,
    pub p_m0: f64,
    pub e_mag: f64,
}

impl SyncMachine {
    /// Equilibrium state delivering `s` (system base) at terminal voltage `v`.
    pub fn initialize(params: SgParams, at: Attachment, v: Complex64, s: Complex64) -> Result<Self, DeviceError> {
        params.validate()?;
        let e = emf_behind(v, s, at.reactance(params.x_d_prime));
        Ok(Self { params, at, delta: e.arg(), omega: 1.0, p_gov: 0.0, p_m0: s.re / at.scale(), e_mag: e.norm() })
    }

    pub fn z(&self) -> Complex64 {
        self.at.reactance(self.params.x_d_prime)
    }

    pub fn emf_at(&self, delta: f64) -> Complex64 {
        Complex64::from_polar(self.e_mag, delta)
    }

    pub fn state(&self) -> [f64; 3] {
        [self.delta, self.omega, self.p_gov]
    }

    pub fn set_state(&mut self, x: &[f64; 3]) {
        self.delta = x[0];
        self.omega = x[1];
        self.p_gov = x[2];
    }

    /// Time derivative of `[delta, omega, p_gov]` at device-base electrical
    /// power `p_e`.
    pub fn rates(&self, x: &[f64; 3], p_e: f64, omega_b: f64) -> [f64; 3] {
        let p = &self.params;
        let [_, w, pg] = *x;
        let p_m = self.p_m0 + pg;
        let dw = (p_m - p_e - p.d_mech * (w - 1.0)) / (2.0 * p.h_inertia);
        let dpg = match p.r_gov {
            Some(r) => (-(w - 1.0) / r - pg) / p.t_gov,
            None => 0.0,
        };
        [omega_b * (w - 1.0), dw, dpg]
    }

    /// Advances one step with electrical power held at `p_e` (device base).
    pub fn sg_step(&mut self, p_e: f64, dt: f64, omega_b: f64) -> Result<(f64, f64), DeviceError> {
        if !p_e.is_finite() {
            return Err(DeviceError::NonFinite(p_e));
        }
        let x = rk4(&self.state(), dt, |x| self.rates(x, p_e, omega_b));
        self.set_state(&x);
        check_speed(self.omega)?;
        Ok((self.delta, self.omega))
    }
}

// ---------------------------------------------------------------------------
// Grid-forming droop

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroopParams {
    pub k_p_droop: f64,
    pub k_d_droop: f64,
    #[serde(default = "one")]
    pub omega_ref: f64,
    /// Measurement filter time constant on the P channel; 0 disables it.
    #[serde(default)]
    pub tau: f64,
    /// Filter time constant on the Q channel; defaults to `tau`.
    #[serde(default)]
    pub tau_q: Option<f64>,
    #[serde(default = "default_x_source")]
    pub x_source: f64,
}

fn one() -> f64 {
    1.0
}

pub fn default_x_source() -> f64 {
    0.15
}

impl DroopParams {
    pub fn validate(&self) -> Result<(), DeviceError> {
        if !(self.k_p_droop > 0.0 && self.k_d_droop > 0.0) {
            return Err(DeviceError::InvalidParams("droop coefficients must be positive".into()));
        }
        if self.tau < 0.0 || self.tau_q.is_some_and(|t| t < 0.0) {
            return Err(DeviceError::InvalidParams("filter time constants must be non-negative".into()));
        }
        if !(self.x_source > 0.0) {
            return Err(DeviceError::InvalidParams("x_source must be positive".into()));
        }
        Ok(())
    }

    pub fn tau_q(&self) -> f64 {
        self.tau_q.unwrap_or(self.tau)
    }
}

/// Static gain, or a gain behind a first-order measurement filter.
#[derive(Debug, Clone)]
enum DroopLaw {
    Static(f64),
    Filtered(LtiBlock),
}

impl DroopLaw {
    fn new(k: f64, tau: f64, dt: f64) -> Result<Self, DeviceError> {
        if tau == 0.0 {
            Ok(Self::Static(k))
        } else {
            Ok(Self::Filtered(RationalTransfer::lowpass(tau).scale(k).realize(dt)?))
        }
    }

    fn peek(&self, u: f64) -> f64 {
        match self {
            Self::Static(k) => k * u,
            Self::Filtered(b) => b.peek(u),
        }
    }

    fn step(&mut self, u: f64) -> Result<f64, DeviceError> {
        match self {
            Self::Static(k) => Ok(*k * u),
            Self::Filtered(b) => Ok(b.step(u)?),
        }
    }

    fn jump(&mut self, u: f64) -> Result<f64, DeviceError> {
        match self {
            Self::Static(k) => Ok(*k * u),
            Self::Filtered(b) => Ok(b.set_current_input(u)?),
        }
    }
}

/// Grid-forming droop inverter: frequency and voltage set by filtered
/// power deviations.
#[derive(Debug, Clone)]
pub struct GfmDroop {
    pub params: DroopParams,
    pub at: Attachment,
    pub p_ref: f64,
    pub q_ref: f64,
    pub v_ref: f64,
    pub theta: f64,
    law_p: DroopLaw,
    law_q: DroopLaw,
}

impl GfmDroop {
    /// Builds a droop unit at its reference point. `p_ref`, `q_ref` are on the
    /// device base; `v_ref` is the internal source magnitude.
    pub fn new(params: DroopParams, at: Attachment, p_ref: f64, q_ref: f64, v_ref: f64, theta: f64, dt: f64) -> Result<Self, DeviceError> {
        params.validate()?;
        let law_p = DroopLaw::new(params.k_p_droop, params.tau, dt)?;
        let law_q = DroopLaw::new(params.k_d_droop, params.tau_q(), dt)?;
        Ok(Self { params, at, p_ref, q_ref, v_ref, theta, law_p, law_q })
    }

    /// Initializes from the terminal operating point (system base `s`).
    pub fn initialize(params: DroopParams, at: Attachment, v: Complex64, s: Complex64, dt: f64) -> Result<Self, DeviceError> {
        let e = emf_behind(v, s, at.reactance(params.x_source));
        let sc = at.scale();
        Self::new(params, at, s.re / sc, s.im / sc, e.norm(), e.arg(), dt)
    }

    pub fn z(&self) -> Complex64 {
        self.at.reactance(self.params.x_source)
    }

    /// `(omega, v)` the controller would command for the next sample.
    pub fn peek(&self, p: f64, q: f64) -> (f64, f64) {
        if self.params.tau == 0.0 && self.params.tau_q() == 0.0 {
            return self.eq_static(p, q);
        }
        (self.params.omega_ref - self.law_p.peek(p - self.p_ref), self.v_ref - self.law_q.peek(q - self.q_ref))
    }

    fn eq_static(&self, p: f64, q: f64) -> (f64, f64) {
        let omega = self.params.omega_ref - self.params.k_p_droop * (p - self.p_ref);
        let v = self.v_ref - self.params.k_d_droop * (q - self.q_ref);
        (omega, v)
    }

    /// Advances the measurement filters by one step with device-base `p`, `q`.
    pub fn droop_step(&mut self, p: f64, q: f64) -> Result<(f64, f64), DeviceError> {
        let dp = self.law_p.step(p - self.p_ref)?;
        let dq = self.law_q.step(q - self.q_ref)?;
        if self.params.tau == 0.0 && self.params.tau_q() == 0.0 {
            return Ok(self.eq_static(p, q));
        }
        Ok((self.params.omega_ref - dp, self.v_ref - dq))
    }

    /// Replaces the input sample at the current instant (load-step events).
    pub fn jump(&mut self, p: f64, q: f64) -> Result<(f64, f64), DeviceError> {
        let dp = self.law_p.jump(p - self.p_ref)?;
        let dq = self.law_q.jump(q - self.q_ref)?;
        Ok((self.params.omega_ref - dp, self.v_ref - dq))
    }
}

// ---------------------------------------------------------------------------
// Virtual synchronous generator

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VsgParams {
    pub j_virt: f64,
    pub d_virt: f64,
    pub k_omega: f64,
    #[serde(default)]
    pub tau: f64,
    #[serde(default = "one")]
    pub omega_0: f64,
    #[serde(default = "one")]
    pub omega_ref: f64,
    /// Replace the division by speed with division by `omega_0`.
    #[serde(default)]
    pub unit_speed_approx: bool,
    #[serde(default = "default_x_source")]
    pub x_source: f64,
}

impl VsgParams {
    pub fn validate(&self) -> Result<(), DeviceError> {
        if !(self.j_virt > 0.0) {
            return Err(DeviceError::InvalidParams("j_virt must be positive".into()));
        }
        if self.d_virt < 0.0 || self.k_omega < 0.0 || self.tau < 0.0 {
            return Err(DeviceError::InvalidParams("d_virt, k_omega and tau must be non-negative".into()));
        }
        if !(self.x_source > 0.0 && self.omega_0 > 0.0) {
            return Err(DeviceError::InvalidParams("x_source and omega_0 must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vsg {
    pub params: VsgParams,
    pub at: Attachment,
    pub theta: f64,
    pub omega: f64,
    /// Filtered frequency-regulation power, device base.
    pub x_f: f64,
    pub p_ref: f64,
    pub e_mag: f64,
}

impl Vsg {
    pub fn new(params: VsgParams, at: Attachment, p_ref: f64, e_mag: f64, theta: f64) -> Result<Self, DeviceError> {
        params.validate()?;
        let omega = params.omega_ref;
        Ok(Self { params, at, theta, omega, x_f: 0.0, p_ref, e_mag })
    }

    pub fn initialize(params: VsgParams, at: Attachment, v: Complex64, s: Complex64) -> Result<Self, DeviceError> {
        let e = emf_behind(v, s, at.reactance(params.x_source));
        Self::new(params, at, s.re / at.scale(), e.norm(), e.arg())
    }

    pub fn z(&self) -> Complex64 {
        self.at.reactance(self.params.x_source)
    }

    pub fn emf_at(&self, theta: f64) -> Complex64 {
        Complex64::from_polar(self.e_mag, theta)
    }

    pub fn state(&self) -> [f64; 3] {
        [self.theta, self.omega, self.x_f]
    }

    pub fn set_state(&mut self, x: &[f64; 3]) {
        self.theta = x[0];
        self.omega = x[1];
        self.x_f = x[2];
    }

    /// Derivative of `[theta, omega, x_f]` at device-base power `p_e`.
    pub fn rates(&self, x: &[f64; 3], p_e: f64, omega_b: f64) -> [f64; 3] {
        let p = &self.params;
        let [_, w, xf] = *x;
        let reg = p.k_omega * (p.omega_ref - w);
        let (p_m, dxf) = if p.tau > 0.0 { (self.p_ref + xf, (reg - xf) / p.tau) } else { (self.p_ref + reg, 0.0) };
        let speed = if p.unit_speed_approx { p.omega_0 } else { w };
        let dw = ((p_m - p_e) / speed - p.d_virt * (w - p.omega_0)) / p.j_virt;
        [omega_b * (w - 1.0), dw, dxf]
    }

    pub fn vsg_step(&mut self, p_e: f64, dt: f64, omega_b: f64) -> Result<(f64, f64), DeviceError> {
        if !p_e.is_finite() {
            return Err(DeviceError::NonFinite(p_e));
        }
        let x = rk4(&self.state(), dt, |x| self.rates(x, p_e, omega_b));
        self.set_state(&x);
        check_speed(self.omega)?;
        Ok((self.theta, self.omega))
    }
}

// ---------------------------------------------------------------------------
// Grid-following inverter

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GflParams {
    pub l_f: f64,
    pub kp_i: f64,
    pub ki_i: f64,
    pub kp_pll: f64,
    pub ki_pll: f64,
    pub i_max: f64,
}

impl GflParams {
    /// PLL gains for a second-order loop with natural frequency `f_n` (Hz)
    /// and damping `zeta`.
    pub fn pll_gains(f_n: f64, zeta: f64) -> (f64, f64) {
        let wn = 2.0 * std::f64::consts::PI * f_n;
        (2.0 * zeta * wn, wn * wn)
    }

    pub fn validate(&self) -> Result<(), DeviceError> {
        if !(self.l_f > 0.0 && self.i_max > 0.0) {
            return Err(DeviceError::InvalidParams("l_f and i_max must be positive".into()));
        }
        if [self.kp_i, self.ki_i, self.kp_pll, self.ki_pll].iter().any(|g| *g < 0.0) {
            return Err(DeviceError::InvalidParams("gains must be non-negative".into()));
        }
        Ok(())
    }
}

impl Default for GflParams {
    fn default() -> Self {
        let (kp_pll, ki_pll) = Self::pll_gains(20.0, 0.707);
        Self { l_f: 0.1, kp_i: 1.0, ki_i: 20.0, kp_pll, ki_pll, i_max: 1.2 }
    }
}

/// Limits a current reference to `i_max`, reporting whether it clipped.
pub fn clamp_current(i: Complex64, i_max: f64) -> (Complex64, bool) {
    let m = i.norm();
    if m > i_max {
        (i * (i_max / m), true)
    } else {
        (i, false)
    }
}

/// Inner dq current controller.
#[derive(Debug, Clone, PartialEq)]
pub struct CurrentLoop {
    pub pi_d: PiController,
    pub pi_q: PiController,
}

impl CurrentLoop {
    pub fn new(p: &GflParams) -> Self {
        Self { pi_d: PiController::new(p.kp_i, p.ki_i), pi_q: PiController::new(p.kp_i, p.ki_i) }
    }

    /// Computes the inverter voltage references and advances the PI
    /// integrals. Current references beyond `i_max` are clipped first; the
    /// returned flag reports the clip.
    pub fn gfl_current_loop_step(&mut self, p: &GflParams, sig: &DqSignals, omega: f64, dt: f64) -> Result<(f64, f64, bool), DeviceError> {
        let (iref, clipped) = clamp_current(Complex64::new(sig.i_d_ref, sig.i_q_ref), p.i_max);
        let ud = self.pi_d.step(iref.re - sig.i_d, dt)?;
        let uq = self.pi_q.step(iref.im - sig.i_q, dt)?;
        let v_id = sig.v_gd + p.l_f * (ud - omega * p.l_f * sig.i_q);
        let v_iq = sig.v_gq + p.l_f * (uq + omega * p.l_f * sig.i_d);
        Ok((v_id, v_iq, clipped))
    }
}

/// PLL phase-detection error: q-axis voltage in the estimated frame,
/// normalized by magnitude.
pub fn pll_error(v: Complex64, theta_hat: f64) -> f64 {
    let m = v.norm();
    if m == 0.0 {
        return 0.0;
    }
    (v * Complex64::from_polar(1.0, -theta_hat)).im / m
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PllState {
    /// Estimated phase relative to the nominal rotating frame, rad.
    pub theta_hat: f64,
    /// Integral of the phase error times `ki_pll`, rad/s.
    pub integ: f64,
    pub e_v: f64,
    pub lost_lock: bool,
}

impl PllState {
    /// Estimated frequency deviation from nominal, rad/s.
    pub fn d_omega(&self, p: &GflParams) -> f64 {
        p.kp_pll * self.e_v + self.integ
    }
}

/// Advances the PLL over one step with the terminal phasor `v` (in the
/// nominal frame) held constant. Returns `(theta_hat, omega_pll)` with
/// `omega_pll` in absolute rad/s.
pub fn pll_step(p: &GflParams, st: &mut PllState, v: Complex64, dt: f64, omega_b: f64) -> (f64, f64) {
    if v.norm() < PLL_LOCK_VOLTAGE {
        st.lost_lock = true;
    }
    let x = rk4(&[st.theta_hat, st.integ], dt, |x| {
        let e = pll_error(v, x[0]);
        [p.kp_pll * e + x[1], p.ki_pll * e]
    });
    st.theta_hat = x[0];
    st.integ = x[1];
    st.e_v = pll_error(v, st.theta_hat);
    (st.theta_hat, omega_b + st.d_omega(p))
}

/// Grid-following inverter in the phasor engine: PLL, outer power
/// references, literal inner current loop and filter-inductor plant.
#[derive(Debug, Clone, PartialEq)]
pub struct Gfl {
    pub params: GflParams,
    pub at: Attachment,
    pub p_ref: f64,
    pub q_ref: f64,
    /// `[theta_hat, pll integral, i_d, i_q, current integral d, current integral q]`.
    pub x: [f64; 6],
    pub saturated: bool,
    pub lost_lock: bool,
}

impl Gfl {
    pub fn initialize(params: GflParams, at: Attachment, v: Complex64, s: Complex64) -> Result<Self, DeviceError> {
        params.validate()?;
        let sc = at.scale();
        let theta = v.arg();
        let i = (s / sc / v).conj() * Complex64::from_polar(1.0, -theta);
        if i.norm() > params.i_max {
            return Err(DeviceError::InvalidParams(format!("initial current {:.3} exceeds i_max", i.norm())));
        }
        let mut x = [theta, 0.0, i.re, i.im, 0.0, 0.0];
        // Integrators hold the steady cross-coupling compensation.
        let w = 1.0;
        x[4] = -w * i.im * (1.0 - params.l_f) / params.ki_i.max(f64::MIN_POSITIVE);
        x[5] = w * i.re * (1.0 - params.l_f) / params.ki_i.max(f64::MIN_POSITIVE);
        if params.ki_i == 0.0 {
            x[4] = 0.0;
            x[5] = 0.0;
        }
        Ok(Self { params, at, p_ref: s.re / sc, q_ref: s.im / sc, x, saturated: false, lost_lock: false })
    }

    /// Current reference in the PLL frame for terminal voltage `v_dq`.
    pub fn current_ref(&self, v_dq: Complex64) -> (Complex64, bool) {
        let m = v_dq.norm().max(PLL_LOCK_VOLTAGE);
        let s = Complex64::new(self.p_ref, self.q_ref);
        let raw = if v_dq.norm() > 0.0 { (s / v_dq).conj() } else { Complex64::new(self.p_ref / m, -self.q_ref / m) };
        clamp_current(raw, self.params.i_max)
    }

    /// Output current in the network frame, system base.
    pub fn current_at(&self, x: &[f64; 6]) -> Complex64 {
        Complex64::new(x[2], x[3]) * Complex64::from_polar(self.at.scale(), x[0])
    }

    pub fn rates(&self, x: &[f64; 6], v: Complex64, omega_b: f64) -> [f64; 6] {
        let p = &self.params;
        let e = pll_error(v, x[0]);
        let dth = p.kp_pll * e + x[1];
        let w = 1.0 + dth / omega_b;
        let v_dq = v * Complex64::from_polar(1.0, -x[0]);
        let (iref, _) = self.current_ref(v_dq);
        let (id, iq) = (x[2], x[3]);
        let ed = iref.re - id;
        let eq = iref.im - iq;
        let v_id = v_dq.re + p.l_f * (p.kp_i * ed + p.ki_i * x[4] - w * p.l_f * iq);
        let v_iq = v_dq.im + p.l_f * (p.kp_i * eq + p.ki_i * x[5] + w * p.l_f * id);
        // Filter inductor in the frame rotating at w.
        let did = omega_b / p.l_f * (v_id - v_dq.re + w * p.l_f * iq);
        let diq = omega_b / p.l_f * (v_iq - v_dq.im - w * p.l_f * id);
        [dth, p.ki_pll * e, did, diq, ed, eq]
    }

    pub fn omega(&self, v: Complex64, omega_b: f64) -> f64 {
        1.0 + (self.params.kp_pll * pll_error(v, self.x[0]) + self.x[1]) / omega_b
    }

    /// Records limit and lock flags after a committed step.
    pub fn update_flags(&mut self, v: Complex64) {
        let v_dq = v * Complex64::from_polar(1.0, -self.x[0]);
        let (_, clipped) = self.current_ref(v_dq);
        self.saturated |= clipped;
        self.lost_lock |= v.norm() < PLL_LOCK_VOLTAGE;
        // Hard limit on the delivered current.
        let i = Complex64::new(self.x[2], self.x[3]);
        let (ic, over) = clamp_current(i, self.params.i_max);
        if over {
            self.x[2] = ic.re;
            self.x[3] = ic.im;
            self.saturated = true;
        }
    }
}

// ---------------------------------------------------------------------------

/// Runtime state of any standalone device.
#[derive(Debug, Clone)]
pub enum DeviceModel {
    Sg(SyncMachine),
    Droop(GfmDroop),
    Vsg(Vsg),
    Gfl(Gfl),
}

impl DeviceModel {
    pub fn attachment(&self) -> &Attachment {
        match self {
            DeviceModel::Sg(d) => &d.at,
            DeviceModel::Droop(d) => &d.at,
            DeviceModel::Vsg(d) => &d.at,
            DeviceModel::Gfl(d) => &d.at,
        }
    }
}

/// Network-side equivalent of a device in its present state.
pub fn device_interface(dev: &DeviceModel) -> DeviceInterface {
    match dev {
        DeviceModel::Sg(m) => DeviceInterface::Thevenin { bus: m.at.bus, emf: m.emf_at(m.delta), z: m.z() },
        DeviceModel::Droop(d) => {
            DeviceInterface::Thevenin { bus: d.at.bus, emf: Complex64::from_polar(d.v_ref, d.theta), z: d.z() }
        }
        DeviceModel::Vsg(v) => DeviceInterface::Thevenin { bus: v.at.bus, emf: v.emf_at(v.theta), z: v.z() },
        DeviceModel::Gfl(g) => {
            let (i, _) = clamp_current(Complex64::new(g.x[2], g.x[3]), g.params.i_max);
            DeviceInterface::Norton { bus: g.at.bus, current: i * Complex64::from_polar(g.at.scale(), g.x[0]) }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    const WB: f64 = 2.0 * std::f64::consts::PI * 60.0;

    fn at() -> Attachment {
        Attachment::new(1, 100.0, 100.0).unwrap()
    }

    #[test]
    fn raw_dq_power() {
        let s = DqSignals { v_gd: 1.0, i_od: 1.0, ..Default::default() };
        assert_eq!(compute_pq(&s), (1.5, 0.0));
        let s = DqSignals { v_gq: 1.0, i_od: 1.0, ..Default::default() };
        assert_eq!(compute_pq(&s), (0.0, 1.5));
        let s = DqSignals { v_gd: 1.0, i_oq: -1.0, ..Default::default() };
        assert_eq!(compute_pq(&s), (0.0, 1.5));
    }

    #[test]
    fn current_loop_zero_error_passes_grid_voltage() {
        let p = GflParams { kp_i: 1.0, ki_i: 0.0, ..Default::default() };
        let mut cl = CurrentLoop::new(&p);
        let sig = DqSignals { v_gd: 1.0, v_gq: 0.2, i_d: 0.4, i_q: 0.1, i_d_ref: 0.4, i_q_ref: 0.1, ..Default::default() };
        let (vd, vq, _) = cl.gfl_current_loop_step(&p, &sig, 0.0, 1e-3).unwrap();
        assert_eq!((vd, vq), (1.0, 0.2));
    }

    #[test]
    fn current_loop_proportional_term() {
        let p = GflParams { kp_i: 1.0, ki_i: 0.0, l_f: 0.1, ..Default::default() };
        let mut cl = CurrentLoop::new(&p);
        let sig = DqSignals { v_gd: 1.0, i_d: 0.0, i_d_ref: 0.1, ..Default::default() };
        let (vd, _, _) = cl.gfl_current_loop_step(&p, &sig, 0.0, 1e-3).unwrap();
        assert_abs_diff_eq!(vd - 1.0, 0.01, epsilon = 1e-15);
    }

    #[test]
    fn current_loop_clips_reference() {
        let p = GflParams::default();
        let mut cl = CurrentLoop::new(&p);
        let sig = DqSignals { v_gd: 1.0, i_d_ref: 3.0, ..Default::default() };
        let (_, _, clipped) = cl.gfl_current_loop_step(&p, &sig, 0.0, 1e-3).unwrap();
        assert!(clipped);
    }

    #[test]
    fn closed_current_loop_matches_continuous_oracle() {
        // Controller stepped discretely against an inductor plant; compared
        // with the continuous closed loop integrated by a fine RK4.
        let p = GflParams { l_f: 0.1, kp_i: 50.0, ki_i: 600.0, ..Default::default() };
        let dt = 1e-5;
        let (vg, iref) = (1.0, 0.5);
        let mut cl = CurrentLoop::new(&p);
        let mut i = 0.0;
        let n = (0.5 / dt) as usize;
        for _ in 0..n {
            let sig = DqSignals { v_gd: vg, i_d: i, i_d_ref: iref, ..Default::default() };
            let (vd, _, _) = cl.gfl_current_loop_step(&p, &sig, 0.0, dt).unwrap();
            i += dt * (vd - vg) / p.l_f;
        }
        // Oracle: di/dt = kp e + ki z, dz/dt = e.
        let mut x = [0.0, 0.0];
        let h = 1e-6;
        for _ in 0..(0.5 / h) as usize {
            x = rk4(&x, h, |x| {
                let e = iref - x[0];
                [p.kp_i * e + p.ki_i * x[1], e]
            });
        }
        assert!((i - iref).abs() < 0.02 * iref);
        assert!((i - x[0]).abs() < 1e-3, "{i} vs {}", x[0]);
    }

    #[test]
    fn pll_holds_lock() {
        let p = GflParams::default();
        let v = Complex64::from_polar(1.0, 0.3);
        let mut st = PllState { theta_hat: 0.3, ..Default::default() };
        let (th, w) = pll_step(&p, &mut st, v, 1e-3, WB);
        assert_abs_diff_eq!(th, 0.3, epsilon = 1e-15);
        assert_abs_diff_eq!(w, WB, epsilon = 1e-12);
    }

    #[test]
    fn pll_pulls_in_phase_offset() {
        let p = GflParams::default();
        let v = Complex64::from_polar(1.0, 0.1);
        let mut st = PllState::default();
        for _ in 0..2000 {
            pll_step(&p, &mut st, v, 1e-3, WB);
        }
        assert!((st.theta_hat - 0.1).abs() < 1e-6);
        assert!(st.e_v.abs() < 1e-6);
    }

    #[test]
    fn pll_converges_from_large_offsets() {
        let p = GflParams::default();
        for off in [-1.4, -0.7, 0.5, 1.5] {
            let mut st = PllState::default();
            let v = Complex64::from_polar(1.0, off);
            for _ in 0..2000 {
                pll_step(&p, &mut st, v, 1e-3, WB);
            }
            assert!((st.theta_hat - off).abs() < 1e-6, "offset {off}: {}", st.theta_hat);
        }
    }

    #[test]
    fn pll_tracks_frequency_offset() {
        let p = GflParams::default();
        let dw = 2.0 * std::f64::consts::PI * 0.5;
        let dt = 1e-4;
        let mut st = PllState::default();
        let mut t = 0.0;
        
        for _ in 0..(3.0 / dt) as usize {
            t += dt;
            let v = Complex64::from_polar(1.0, dw * t);
            pll_step(&p, &mut st, v, dt, WB);
        }
        assert!((st.integ - dw).abs() < 1e-4 * dw, "{} vs {dw}", st.integ);
    }

    #[test]
    fn pll_flags_low_voltage() {
        let p = GflParams::default();
        let mut st = PllState::default();
        pll_step(&p, &mut st, Complex64::new(0.05, 0.0), 1e-3, WB);
        assert!(st.lost_lock);
    }

    fn droop(tau: f64) -> GfmDroop {
        let p = DroopParams { k_p_droop: 0.05, k_d_droop: 0.05, omega_ref: 1.0, tau, tau_q: None, x_source: 0.15 };
        GfmDroop::new(p, at(), 0.5, 0.1, 1.0, 0.0, 1e-3).unwrap()
    }

    #[test]
    fn droop_reference_point() {
        let mut d = droop(0.0);
        assert_eq!(d.droop_step(0.5, 0.1).unwrap(), (1.0, 1.0));
        let mut d = droop(0.02);
        assert_eq!(d.droop_step(0.5, 0.1).unwrap(), (1.0, 1.0));
    }

    #[test]
    fn unfiltered_droop_is_the_static_law() {
        let mut d = droop(0.0);
        let (w, v) = d.droop_step(1.5, 0.1).unwrap();
        assert_abs_diff_eq!(w, 1.0 - 0.05, epsilon = 1e-15);
        assert_eq!(v, 1.0);
        for (p, q) in [(0.3, -0.2), (0.77, 0.41), (-1.1, 2.0)] {
            let (w, v) = d.droop_step(p, q).unwrap();
            assert_eq!(w, 1.0 - 0.05 * (p - 0.5));
            assert_eq!(v, 1.0 - 0.05 * (q - 0.1));
        }
    }

    #[test]
    fn filtered_droop_first_order_rise() {
        let tau = 0.1;
        let mut d = droop(tau);
        d.jump(1.5, 0.1).unwrap();
        let mut w = 1.0;
        for _ in 0..100 {
            w = d.droop_step(1.5, 0.1).unwrap().0;
        }
        let frac = (1.0 - w) / 0.05;
        assert!((frac - (1.0 - (-1.0f64).exp())).abs() < 1e-4, "{frac}");
    }

    fn vsg(j: f64, d: f64, k: f64, tau: f64) -> Vsg {
        let p = VsgParams { j_virt: j, d_virt: d, k_omega: k, tau, omega_0: 1.0, omega_ref: 1.0, unit_speed_approx: false, x_source: 0.15 };
        Vsg::new(p, at(), 0.6, 1.0, 0.0).unwrap()
    }

    #[test]
    fn vsg_equilibrium() {
        let mut v = vsg(8.0, 10.0, 20.0, 0.02);
        for _ in 0..100 {
            v.vsg_step(0.6, 1e-3, WB).unwrap();
        }
        assert_eq!(v.omega, 1.0);
        assert_eq!(v.theta, 0.0);
    }

    #[test]
    fn vsg_steady_state_matches_algebraic_root() {
        let (d, k, dp) = (10.0, 20.0, 0.3);
        let mut v = vsg(4.0, d, k, 0.02);
        for _ in 0..20000 {
            v.vsg_step(0.6 + dp, 1e-3, WB).unwrap();
        }
        // Root of k(1 - w) - dp = d w (w - 1) by bisection.
        let g = |w: f64| k * (1.0 - w) - dp - d * w * (w - 1.0);
        let (mut lo, mut hi) = (0.9, 1.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if g(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        assert!((v.omega - lo).abs() < 1e-9, "{} vs {lo}", v.omega);
    }

    #[test]
    fn vsg_initial_slope_scales_with_inertia() {
        let dp = 0.2;
        let slope = |j: f64| {
            let v = vsg(j, 10.0, 20.0, 0.02);
            v.rates(&v.state(), 0.6 + dp, WB)[1]
        };
        assert_abs_diff_eq!(slope(4.0), -dp / 4.0, epsilon = 1e-15);
        assert_abs_diff_eq!(slope(8.0) / slope(4.0), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn vsg_reduces_to_droop_at_low_inertia() {
        let (k, dp) = (20.0, 0.25);
        let mut v = vsg(1e-3, 0.0, k, 0.0);
        for _ in 0..5000 {
            v.vsg_step(0.6 + dp, 1e-4, WB).unwrap();
        }
        let p = DroopParams { k_p_droop: 1.0 / k, k_d_droop: 0.05, omega_ref: 1.0, tau: 0.0, tau_q: None, x_source: 0.15 };
        let mut d = GfmDroop::new(p, at(), 0.6, 0.0, 1.0, 0.0, 1e-4).unwrap();
        let (w, _) = d.droop_step(0.6 + dp, 0.0).unwrap();
        assert!((v.omega - w).abs() < 1e-6, "{} vs {w}", v.omega);
    }

    #[test]
    fn vsg_speed_band_fault() {
        let mut v = vsg(0.01, 0.0, 0.0, 0.0);
        let err = (0..1000).find_map(|_| v.vsg_step(5.0, 1e-3, WB).err()).unwrap();
        assert!(matches!(err, DeviceError::SpeedBand { .. }));
    }

    #[test]
    fn lossless_swing_pair_conserves_kinetic_energy() {
        // Two undamped VSGs exchanging power over a lossless tie; the literal
        // division by speed makes sum(J w^2 / 2) an exact invariant.
        let x_tie = 0.5;
        let (j1, j2) = (6.0, 3.0);
        let mut a = vsg(j1, 0.0, 0.0, 0.0);
        let mut b = vsg(j2, 0.0, 0.0, 0.0);
        a.p_ref = 0.0;
        b.p_ref = 0.0;
        b.theta = -0.3;
        let energy = |a: &Vsg, b: &Vsg| 0.5 * (j1 * a.omega.powi(2) + j2 * b.omega.powi(2));
        let e0 = energy(&a, &b);
        let dt = 1e-4;
        for _ in 0..(1.0 / dt) as usize {
            let x = [a.theta, a.omega, b.theta, b.omega];
            let f = |x: &[f64; 4]| {
                let p = (x[0] - x[2]).sin() / x_tie;
                let ra = a.rates(&[x[0], x[1], 0.0], p, WB);
                let rb = b.rates(&[x[2], x[3], 0.0], -p, WB);
                [ra[0], ra[1], rb[0], rb[1]]
            };
            let y = rk4(&x, dt, f);
            a.theta = y[0];
            a.omega = y[1];
            b.theta = y[2];
            b.omega = y[3];
        }
        assert!((energy(&a, &b) - e0).abs() < 1e-9, "drift {}", energy(&a, &b) - e0);
        assert!((a.omega - 1.0).abs() > 1e-4, "the pair must actually swing");
    }

    fn sg(r: Option<f64>) -> SyncMachine {
        let p = SgParams { h_inertia: 5.0, d_mech: 0.0, r_gov: r, t_gov: 0.5, x_d_prime: 0.2 };
        SyncMachine::initialize(p, at(), Complex64::new(1.0, 0.0), Complex64::new(0.7, 0.1)).unwrap()
    }

    #[test]
    fn sg_equilibrium_and_governor_droop() {
        let mut m = sg(Some(0.05));
        for _ in 0..100 {
            m.sg_step(0.7, 1e-3, WB).unwrap();
        }
        assert_eq!(m.omega, 1.0);
        // Held electrical load with the governor alone settling it: the
        // speed ramps until governor output matches, i.e. dw = -dp R.
        let mut m = sg(Some(0.05));
        let dp = 0.1;
        let mut t = 0.0;
        while t < 60.0 {
            m.sg_step(0.7 + dp, 1e-3, WB).unwrap();
            t += 1e-3;
        }
        assert!((m.omega - (1.0 - dp * 0.05)).abs() < 1e-8, "{}", m.omega);
    }

    #[test]
    fn sg_without_governor_ramps_at_swing_slope() {
        let mut m = sg(None);
        let dp = 0.1;
        let dt = 1e-3;
        m.sg_step(0.7 + dp, dt, WB).unwrap();
        let slope = (m.omega - 1.0) / dt;
        assert!((slope - (-dp / (2.0 * 5.0))).abs() < 1e-12);
    }

    #[test]
    fn interfaces() {
        let m = sg(Some(0.05));
        let DeviceInterface::Thevenin { emf, z, .. } = device_interface(&DeviceModel::Sg(m.clone())) else { panic!() };
        let i = (emf - Complex64::new(1.0, 0.0)) / z;
        let s = phasor_power(Complex64::new(1.0, 0.0), i);
        assert!((s - Complex64::new(0.7, 0.1)).norm() < 1e-12);

        let d = droop(0.02);
        let DeviceInterface::Thevenin { emf, .. } = device_interface(&DeviceModel::Droop(d)) else { panic!() };
        assert_eq!(emf, Complex64::new(1.0, 0.0));

        let g = Gfl::initialize(GflParams::default(), at(), Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0)).unwrap();
        let DeviceInterface::Norton { current, .. } = device_interface(&DeviceModel::Gfl(g)) else { panic!() };
        assert_eq!(current.norm(), 0.0);
    }

    #[test]
    fn gfl_initial_point_is_stationary() {
        let v = Complex64::from_polar(1.02, 0.2);
        let g = Gfl::initialize(GflParams::default(), at(), v, Complex64::new(0.5, 0.1)).unwrap();
        let r = g.rates(&g.x, v, WB);
        for (k, d) in r.iter().enumerate() {
            assert!(d.abs() < 1e-9, "rate {k} = {d}");
        }
        let i = g.current_at(&g.x);
        assert!((phasor_power(v, i) - Complex64::new(0.5, 0.1)).norm() < 1e-12);
    }

    #[test]
    fn gfl_current_never_exceeds_limit() {
        let v = Complex64::new(1.0, 0.0);
        let mut g = Gfl::initialize(GflParams::default(), at(), v, Complex64::new(0.5, 0.0)).unwrap();
        g.p_ref = 3.0;
        for _ in 0..500 {
            g.x = rk4(&g.x, 1e-4, |x| g.rates(x, v, WB));
            g.update_flags(v);
            let DeviceInterface::Norton { current, .. } = device_interface(&DeviceModel::Gfl(g.clone())) else { panic!() };
            assert!(current.norm() <= g.params.i_max + 1e-12);
        }
        assert!(g.saturated);
    }
}

//! Dynamic participation factors: per-device shares of an aggregate target
//! response, built from complementary low/band/high-pass filters.
//!
//! Each member `i` of a virtual power plant gets a pair
//! `Γ_i(s) = diag(φ_i(s), γ_i(s))` for the ω-P and v-Q channels, and its own
//! response is `ξ_i(s) = Γ_i(s) ξ_target(s)`. The allocation is valid when the
//! shares sum to one at every frequency.

use crate::lti::{LtiBlock, LtiError, RationalTransfer};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;
use thiserror::Error;

pub const SPEC_SCHEMA_VERSION: u32 = 1;

/// Pass threshold for the sum-to-one audit.
pub const AUDIT_TOL: f64 = 1e-9;

/// Pole-zero cancellation tolerance for quotients by the target.
pub const CANCEL_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum DvppError {
    #[error("invalid DVPP spec: {0}")]
    InvalidSpec(String),
    #[error("participation factor of `{member}` on the {channel} channel is not realizable: {reason}")]
    NonRealizable { member: String, channel: Channel, reason: String },
    #[error("series `{series}` has {found} samples, expected {expected}")]
    LengthMismatch { series: String, expected: usize, found: usize },
    #[error(transparent)]
    Lti(#[from] LtiError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    OmegaP,
    VQ,
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Channel::OmegaP => "omega-p",
            Channel::VQ => "v-q",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviceClass {
    Slow,
    Mid,
    Fast,
}

/// Pair of transfer functions, one per channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticipationFactor {
    pub phi_wp: RationalTransfer,
    pub gamma_vq: RationalTransfer,
}

impl ParticipationFactor {
    pub fn identity() -> Self {
        Self { phi_wp: RationalTransfer::one(), gamma_vq: RationalTransfer::one() }
    }

    pub fn channel(&self, c: Channel) -> &RationalTransfer {
        match c {
            Channel::OmegaP => &self.phi_wp,
            Channel::VQ => &self.gamma_vq,
        }
    }
}

/// Parametric shape of an aggregate target response on one channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TargetShape {
    /// `k (1 + tau s) / (1 + t_f s)`: inverse of a filtered droop, made
    /// biproper by a fast pole.
    Droop { k: f64, tau: f64, t_f: f64 },
    /// Linearized virtual synchronous generator:
    /// `j s / (t_f s + 1) + d + k_omega / (tau s + 1)`.
    Vsg { j: f64, d: f64, k_omega: f64, tau: f64, t_f: f64 },
    Transfer { num: Vec<f64>, den: Vec<f64> },
}

impl TargetShape {
    pub fn to_transfer(&self) -> Result<RationalTransfer, DvppError> {
        match *self {
            TargetShape::Droop { k, tau, t_f } => {
                if !(k > 0.0 && tau >= 0.0 && t_f > 0.0) {
                    return Err(DvppError::InvalidSpec("droop target needs k > 0, tau >= 0, t_f > 0".into()));
                }
                Ok(RationalTransfer::new(vec![k, k * tau], vec![1.0, t_f])?)
            }
            TargetShape::Vsg { j, d, k_omega, tau, t_f } => {
                if !(j >= 0.0 && d >= 0.0 && k_omega >= 0.0 && tau >= 0.0 && t_f > 0.0) {
                    return Err(DvppError::InvalidSpec("vsg target needs non-negative gains and t_f > 0".into()));
                }
                let inertia = RationalTransfer::new(vec![0.0, j], vec![1.0, t_f])?;
                let reg = RationalTransfer::lowpass(tau).scale(k_omega);
                Ok(inertia.add(&RationalTransfer::gain(d)).add(&reg))
            }
            TargetShape::Transfer { ref num, ref den } => Ok(RationalTransfer::new(num.clone(), den.clone())?),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSpec {
    pub p: TargetShape,
    pub q: TargetShape,
}

impl TargetSpec {
    pub fn to_factor(&self) -> Result<ParticipationFactor, DvppError> {
        Ok(ParticipationFactor { phi_wp: self.p.to_transfer()?, gamma_vq: self.q.to_transfer()? })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Member {
    pub id: String,
    pub class: DeviceClass,
    #[serde(default = "yes")]
    pub controllable: bool,
    pub capacity_mva: f64,
    /// Pre-assigned response `ξ_i(s)` of an uncontrollable member.
    #[serde(default)]
    pub fixed: Option<ParticipationFactor>,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandCorners {
    pub t_slow: f64,
    pub t_fast: f64,
}

impl Default for BandCorners {
    fn default() -> Self {
        Self { t_slow: 5.0, t_fast: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DvppSpec {
    pub schema_version: u32,
    pub name: String,
    pub rating_mva: f64,
    pub members: Vec<Member>,
    pub target: TargetSpec,
    #[serde(default)]
    pub bands_p: BandCorners,
    /// Band corners on the v-Q channel; defaults to `bands_p`.
    #[serde(default)]
    pub bands_q: Option<BandCorners>,
}

impl DvppSpec {
    pub fn from_json(text: &str) -> Result<Self, DvppError> {
        let spec: Self = serde_json::from_str(text).map_err(|e| DvppError::InvalidSpec(e.to_string()))?;
        if spec.schema_version != SPEC_SCHEMA_VERSION {
            return Err(DvppError::InvalidSpec(format!(
                "unsupported schema_version {} (expected {SPEC_SCHEMA_VERSION})",
                spec.schema_version
            )));
        }
        Ok(spec)
    }

    pub fn bands(&self, c: Channel) -> BandCorners {
        match c {
            Channel::OmegaP => self.bands_p,
            Channel::VQ => self.bands_q.unwrap_or(self.bands_p),
        }
    }

    pub fn controllable(&self) -> impl Iterator<Item = &Member> {
        self.members.iter().filter(|m| m.controllable)
    }

    pub fn validate(&self) -> Result<(), DvppError> {
        if !(self.rating_mva > 0.0) {
            return Err(DvppError::InvalidSpec("rating_mva must be positive".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for m in &self.members {
            if !seen.insert(m.id.as_str()) {
                return Err(DvppError::InvalidSpec(format!("duplicate member id `{}`", m.id)));
            }
            if !(m.capacity_mva > 0.0) {
                return Err(DvppError::InvalidSpec(format!("member `{}` needs a positive capacity", m.id)));
            }
            match (m.controllable, &m.fixed) {
                (false, None) => {
                    return Err(DvppError::InvalidSpec(format!("uncontrollable member `{}` needs a fixed response", m.id)))
                }
                (true, Some(_)) => {
                    return Err(DvppError::InvalidSpec(format!("controllable member `{}` cannot carry a fixed response", m.id)))
                }
                _ => {}
            }
        }
        for c in [Channel::OmegaP, Channel::VQ] {
            let b = self.bands(c);
            if !(b.t_fast > 0.0 && b.t_slow > b.t_fast) {
                return Err(DvppError::InvalidSpec(format!(
                    "{c} band corners need t_slow > t_fast > 0 (got {} and {})",
                    b.t_slow, b.t_fast
                )));
            }
        }
        Ok(())
    }
}

/// Complementary first-order filter triple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandFamily {
    pub lpf: RationalTransfer,
    pub bpf: RationalTransfer,
    pub hpf: RationalTransfer,
}

/// `lpf = 1/(t_slow s + 1)`, `hpf = t_fast s/(t_fast s + 1)` and the exact
/// residual `bpf = 1 - lpf - hpf`.
pub fn design_band_family(t_slow: f64, t_fast: f64) -> Result<BandFamily, DvppError> {
    if !(t_fast > 0.0 && t_slow > t_fast && t_slow.is_finite()) {
        return Err(DvppError::InvalidSpec(format!("need t_slow > t_fast > 0 (got {t_slow} and {t_fast})")));
    }
    let lpf = RationalTransfer::lowpass(t_slow);
    let hpf = RationalTransfer::highpass(t_fast);
    let bpf = RationalTransfer::new(vec![0.0, t_slow - t_fast], vec![1.0, t_slow + t_fast, t_slow * t_fast])?;
    Ok(BandFamily { lpf, bpf, hpf })
}

/// Band filter for each class present. The lowest class present keeps the
/// dc gain and the highest takes the high-frequency limit.
pub fn class_bands(present: &[DeviceClass], corners: BandCorners) -> Result<BTreeMap<DeviceClass, RationalTransfer>, DvppError> {
    use DeviceClass::*;
    let mut classes: Vec<DeviceClass> = present.to_vec();
    classes.sort();
    classes.dedup();
    let BandCorners { t_slow, t_fast } = corners;
    let fam = design_band_family(t_slow, t_fast)?;
    let mut out = BTreeMap::new();
    match classes.as_slice() {
        [] => {}
        [c] => {
            out.insert(*c, RationalTransfer::one());
        }
        [Slow, Mid, Fast] => {
            out.insert(Slow, fam.lpf);
            out.insert(Mid, fam.bpf);
            out.insert(Fast, fam.hpf);
        }
        [lo, hi] => {
            let t = match (lo, hi) {
                (Slow, Fast) => (t_slow * t_fast).sqrt(),
                (Slow, Mid) => t_slow,
                _ => t_fast,
            };
            out.insert(*lo, RationalTransfer::lowpass(t));
            out.insert(*hi, RationalTransfer::highpass(t));
        }
        _ => unreachable!("at most three classes"),
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberAllocation {
    pub id: String,
    pub class: DeviceClass,
    pub controllable: bool,
    pub capacity_mva: f64,
    /// Share `Γ_i(s)` of the aggregate.
    pub gamma: ParticipationFactor,
    /// Member response `ξ_i(s) = Γ_i(s) ξ_target(s)`.
    pub xi: ParticipationFactor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub points: usize,
    pub max_residual_p: f64,
    pub max_residual_q: f64,
    pub worst_omega_p: f64,
    pub worst_omega_q: f64,
    pub pass: bool,
}

impl AuditReport {
    pub fn max_residual(&self) -> f64 {
        self.max_residual_p.max(self.max_residual_q)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Allocation {
    pub name: String,
    pub rating_mva: f64,
    pub xi_target: ParticipationFactor,
    pub members: Vec<MemberAllocation>,
    pub audit: AuditReport,
}

impl Allocation {
    pub fn member(&self, id: &str) -> Option<&MemberAllocation> {
        self.members.iter().find(|m| m.id == id)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("allocation serializes")
    }
}

/// 61 log-spaced frequencies over [1e-3, 1e3] rad/s.
pub fn audit_grid() -> Vec<f64> {
    log_grid(1e-3, 1e3, 61)
}

pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.log10(), hi.log10());
    (0..n).map(|k| 10f64.powf(a + (b - a) * k as f64 / (n - 1) as f64)).collect()
}

fn check_realizable(tf: &RationalTransfer, member: &str, channel: Channel) -> Result<(), DvppError> {
    let fail = |reason: String| DvppError::NonRealizable { member: member.to_string(), channel, reason };
    if !tf.is_proper() {
        return Err(fail(format!("improper (numerator degree {} > denominator degree {})", tf.num_degree(), tf.den_degree())));
    }
    if !tf.is_stable() {
        return Err(fail("unstable: pole in the closed right half-plane".into()));
    }
    Ok(())
}

fn split_channel(
    spec: &DvppSpec,
    channel: Channel,
    target: &RationalTransfer,
) -> Result<Vec<(RationalTransfer, RationalTransfer)>, DvppError> {
    // Fixed members first.
    let mut gamma_fixed = RationalTransfer::zero();
    let mut xi_fixed = RationalTransfer::zero();
    let mut out: Vec<Option<(RationalTransfer, RationalTransfer)>> = vec![None; spec.members.len()];
    for (k, m) in spec.members.iter().enumerate() {
        if let Some(f) = &m.fixed {
            let xi = f.channel(channel).clone();
            check_realizable(&xi, &m.id, channel)?;
            let gamma = xi.div(target, CANCEL_TOL)?;
            check_realizable(&gamma, &m.id, channel)?;
            gamma_fixed = gamma_fixed.add(&gamma);
            xi_fixed = xi_fixed.add(&xi);
            out[k] = Some((gamma, xi));
        }
    }
    let gamma_res = RationalTransfer::one().sub(&gamma_fixed).minreal(CANCEL_TOL);
    let xi_res = target.sub(&xi_fixed).minreal(CANCEL_TOL);

    let present: Vec<DeviceClass> = spec.controllable().map(|m| m.class).collect();
    let bands = class_bands(&present, spec.bands(channel))?;
    let class_cap: BTreeMap<DeviceClass, f64> = spec.controllable().fold(BTreeMap::new(), |mut acc, m| {
        *acc.entry(m.class).or_insert(0.0) += m.capacity_mva;
        acc
    });
    for (k, m) in spec.members.iter().enumerate() {
        if !m.controllable {
            continue;
        }
        let share = m.capacity_mva / class_cap[&m.class];
        let band = bands[&m.class].scale(share);
        let gamma = band.mul(&gamma_res);
        let xi = band.mul(&xi_res);
        check_realizable(&gamma, &m.id, channel)?;
        check_realizable(&xi, &m.id, channel)?;
        out[k] = Some((gamma, xi));
    }
    Ok(out.into_iter().map(|o| o.expect("every member allocated")).collect())
}

/// Distributes the target response across members and audits the result.
///
/// Uncontrollable members keep `Γ = ξ_target⁻¹ ξ_i`; the remainder
/// `1 - Σ Γ_fixed` is split across the controllable classes with
/// complementary band filters, and within a class by capacity share. A spec
/// with no controllable member and a nonzero remainder yields a failing
/// audit rather than an error.
pub fn allocate(spec: &DvppSpec) -> Result<Allocation, DvppError> {
    spec.validate()?;
    let target = spec.target.to_factor()?;
    for c in [Channel::OmegaP, Channel::VQ] {
        let t = target.channel(c);
        check_realizable(t, "target", c)?;
        if spec.members.iter().any(|m| m.fixed.is_some()) && !t.is_minimum_phase() {
            return Err(DvppError::NonRealizable {
                member: "target".into(),
                channel: c,
                reason: "non-minimum-phase target cannot be divided out of fixed responses".into(),
            });
        }
    }
    let p = split_channel(spec, Channel::OmegaP, &target.phi_wp)?;
    let q = split_channel(spec, Channel::VQ, &target.gamma_vq)?;
    let members = spec
        .members
        .iter()
        .zip(p.into_iter().zip(q))
        .map(|(m, ((gp, xp), (gq, xq)))| MemberAllocation {
            id: m.id.clone(),
            class: m.class,
            controllable: m.controllable,
            capacity_mva: m.capacity_mva,
            gamma: ParticipationFactor { phi_wp: gp, gamma_vq: gq },
            xi: ParticipationFactor { phi_wp: xp, gamma_vq: xq },
        })
        .collect();
    let mut alloc = Allocation {
        name: spec.name.clone(),
        rating_mva: spec.rating_mva,
        xi_target: target,
        members,
        audit: AuditReport { points: 0, max_residual_p: 0.0, max_residual_q: 0.0, worst_omega_p: 0.0, worst_omega_q: 0.0, pass: false },
    };
    alloc.audit = verify_aggregation(&alloc, &audit_grid());
    Ok(alloc)
}

/// Largest deviation of `Σ φ_i(jω)` and `Σ γ_i(jω)` from one over `grid`.
pub fn verify_aggregation(alloc: &Allocation, grid: &[f64]) -> AuditReport {
    let mut rep = AuditReport { points: grid.len(), max_residual_p: 0.0, max_residual_q: 0.0, worst_omega_p: 0.0, worst_omega_q: 0.0, pass: false };
    for &w in grid {
        let s = Complex64::new(0.0, w);
        let sp: Complex64 = alloc.members.iter().map(|m| m.gamma.phi_wp.eval(s)).sum();
        let sq: Complex64 = alloc.members.iter().map(|m| m.gamma.gamma_vq.eval(s)).sum();
        let (rp, rq) = ((sp - 1.0).norm(), (sq - 1.0).norm());
        if !(rp <= rep.max_residual_p) {
            rep.max_residual_p = rp;
            rep.worst_omega_p = w;
        }
        if !(rq <= rep.max_residual_q) {
            rep.max_residual_q = rq;
            rep.worst_omega_q = w;
        }
    }
    rep.pass = !grid.is_empty() && rep.max_residual_p < AUDIT_TOL && rep.max_residual_q < AUDIT_TOL;
    rep
}

/// Frequency response of every member's shares as CSV:
/// `omega_rad_s, {id}.phi_mag, {id}.phi_deg, {id}.gamma_mag, {id}.gamma_deg, ...`.
pub fn frequency_response_csv(alloc: &Allocation, grid: &[f64]) -> String {
    let mut out = String::from("omega_rad_s");
    for m in &alloc.members {
        write!(out, ",{0}.phi_mag,{0}.phi_deg,{0}.gamma_mag,{0}.gamma_deg", m.id).unwrap();
    }
    out.push('\n');
    for &w in grid {
        let s = Complex64::new(0.0, w);
        write!(out, "{w:.8e}").unwrap();
        for m in &alloc.members {
            let p = m.gamma.phi_wp.eval(s);
            let g = m.gamma.gamma_vq.eval(s);
            write!(out, ",{:.8e},{:.8e},{:.8e},{:.8e}", p.norm(), p.arg().to_degrees(), g.norm(), g.arg().to_degrees()).unwrap();
        }
        out.push('\n');
    }
    out
}

/// Runs every member's realized `ξ_i(s)` on the channel signals.
#[derive(Debug, Clone)]
pub struct Disaggregator {
    ids: Vec<String>,
    p: Vec<LtiBlock>,
    q: Vec<LtiBlock>,
    out_p: Vec<f64>,
    out_q: Vec<f64>,
}

impl Disaggregator {
    /// `scale` converts the allocation's per-unit base to the caller's.
    pub fn new(alloc: &Allocation, dt: f64, scale: f64) -> Result<Self, DvppError> {
        let mut p = Vec::new();
        let mut q = Vec::new();
        for m in &alloc.members {
            p.push(m.xi.phi_wp.scale(scale).realize(dt)?);
            q.push(m.xi.gamma_vq.scale(scale).realize(dt)?);
        }
        let n = p.len();
        Ok(Self { ids: alloc.members.iter().map(|m| m.id.clone()).collect(), p, q, out_p: vec![0.0; n], out_q: vec![0.0; n] })
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn outputs_p(&self) -> &[f64] {
        &self.out_p
    }

    pub fn outputs_q(&self) -> &[f64] {
        &self.out_q
    }

    /// Advances by one step with channel inputs at the new time.
    pub fn step(&mut self, d_omega: f64, d_v: f64) -> Result<(), DvppError> {
        for (b, o) in self.p.iter_mut().zip(&mut self.out_p) {
            *o = b.step(d_omega)?;
        }
        for (b, o) in self.q.iter_mut().zip(&mut self.out_q) {
            *o = b.step(d_v)?;
        }
        Ok(())
    }

    /// Replaces the inputs at the current instant.
    pub fn jump(&mut self, d_omega: f64, d_v: f64) -> Result<(), DvppError> {
        for (b, o) in self.p.iter_mut().zip(&mut self.out_p) {
            *o = b.set_current_input(d_omega)?;
        }
        for (b, o) in self.q.iter_mut().zip(&mut self.out_q) {
            *o = b.set_current_input(d_v)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberSeries {
    pub id: String,
    pub dp: Vec<f64>,
    pub dq: Vec<f64>,
}

/// Per-member reference deviations for sampled channel signals, starting
/// from rest. The first sample is applied at the initial instant.
pub fn disaggregate_reference(alloc: &Allocation, d_omega: &[f64], d_v: &[f64], dt: f64) -> Result<Vec<MemberSeries>, DvppError> {
    if d_omega.len() != d_v.len() {
        return Err(DvppError::LengthMismatch { series: "d_v".into(), expected: d_omega.len(), found: d_v.len() });
    }
    let mut dis = Disaggregator::new(alloc, dt, 1.0)?;
    let mut out: Vec<MemberSeries> =
        dis.ids().iter().map(|id| MemberSeries { id: id.clone(), dp: Vec::with_capacity(d_omega.len()), dq: Vec::with_capacity(d_omega.len()) }).collect();
    for (k, (&w, &v)) in d_omega.iter().zip(d_v).enumerate() {
        if k == 0 {
            dis.jump(w, v)?;
        } else {
            dis.step(w, v)?;
        }
        for (m, s) in out.iter_mut().enumerate() {
            s.dp.push(dis.outputs_p()[m]);
            s.dq.push(dis.outputs_q()[m]);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LedgerSeries {
    pub id: String,
    pub dp: Vec<f64>,
    pub dq: Vec<f64>,
}

/// Power-deviation bookkeeping for one run: controllable members (set X),
/// fixed-response devices (set Y) and the disturbance they must cover.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DisturbanceLedger {
    pub t: Vec<f64>,
    pub controllable: Vec<LedgerSeries>,
    pub fixed: Vec<LedgerSeries>,
    pub target_p: Vec<f64>,
    pub target_q: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerReport {
    pub max_residual_p: f64,
    pub max_residual_q: f64,
    pub worst_index: usize,
    pub tol: f64,
    pub pass: bool,
}

/// Checks `Σ_X Δp + Σ_Y Δp' = Δp_target` (and the Q analogue) sample by
/// sample.
pub fn check_power_ledger(ledger: &DisturbanceLedger, tol: f64) -> Result<LedgerReport, DvppError> {
    let n = ledger.t.len();
    let check = |name: &str, v: &[f64]| {
        if v.len() == n {
            Ok(())
        } else {
            Err(DvppError::LengthMismatch { series: name.to_string(), expected: n, found: v.len() })
        }
    };
    check("target_p", &ledger.target_p)?;
    check("target_q", &ledger.target_q)?;
    for s in ledger.controllable.iter().chain(&ledger.fixed) {
        check(&format!("{}.dp", s.id), &s.dp)?;
        check(&format!("{}.dq", s.id), &s.dq)?;
    }
    let mut rep = LedgerReport { max_residual_p: 0.0, max_residual_q: 0.0, worst_index: 0, tol, pass: true };
    let mut worst = 0.0;
    for k in 0..n {
        let sp: f64 = ledger.controllable.iter().chain(&ledger.fixed).map(|s| s.dp[k]).sum();
        let sq: f64 = ledger.controllable.iter().chain(&ledger.fixed).map(|s| s.dq[k]).sum();
        let rp = (sp - ledger.target_p[k]).abs();
        let rq = (sq - ledger.target_q[k]).abs();
        rep.max_residual_p = rep.max_residual_p.max(rp);
        rep.max_residual_q = rep.max_residual_q.max(rq);
        if rp.max(rq) > worst || !rp.max(rq).is_finite() {
            worst = rp.max(rq);
            rep.worst_index = k;
        }
    }
    rep.pass = rep.max_residual_p <= tol && rep.max_residual_q <= tol;
    Ok(rep)
}

fn droop_target() -> TargetShape {
    TargetShape::Droop { k: 20.0, tau: 0.02, t_f: 0.005 }
}

fn member(id: &str, class: DeviceClass, capacity_mva: f64) -> Member {
    Member { id: id.into(), class, controllable: true, capacity_mva, fixed: None }
}

/// Hydro / battery / supercapacitor plant with a filtered-droop target.
pub fn dvpp1_spec() -> DvppSpec {
    DvppSpec {
        schema_version: SPEC_SCHEMA_VERSION,
        name: "dvpp1".into(),
        rating_mva: 250.0,
        members: vec![
            member("hydro", DeviceClass::Slow, 180.0),
            member("battery", DeviceClass::Mid, 50.0),
            member("sc", DeviceClass::Fast, 20.0),
        ],
        target: TargetSpec { p: droop_target(), q: droop_target() },
        bands_p: BandCorners::default(),
        bands_q: None,
    }
}

/// Wind / PV / vehicle-storage plant with a virtual-synchronous target.
pub fn dvpp2_spec() -> DvppSpec {
    DvppSpec {
        schema_version: SPEC_SCHEMA_VERSION,
        name: "dvpp2".into(),
        rating_mva: 60.0,
        members: vec![
            member("dfig", DeviceClass::Slow, 70.0),
            member("pv", DeviceClass::Mid, 52.0),
            member("ev", DeviceClass::Fast, 15.0),
        ],
        target: TargetSpec { p: TargetShape::Vsg { j: 16.0, d: 10.0, k_omega: 20.0, tau: 0.02, t_f: 0.01 }, q: droop_target() },
        bands_p: BandCorners::default(),
        bands_q: None,
    }
}

pub fn builtin_spec(name: &str) -> Option<DvppSpec> {
    match name {
        "dvpp1" => Some(dvpp1_spec()),
        "dvpp2" => Some(dvpp2_spec()),
        _ => None,
    }
}

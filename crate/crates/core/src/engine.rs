//! Scenario assembly, time-domain execution and metric extraction.
//!
//! Continuous devices (synchronous machines, standalone VSGs, grid-following
//! inverters) are advanced with RK4, re-solving the network at every stage.
//! Grid-forming units with discrete control laws (droop inverters and
//! virtual power plants) use bilinear blocks and a trapezoidal angle update;
//! their end-of-step angle and voltage are found by fixed-point iteration
//! against the network.

use crate::devices::{
    default_x_source, emf_behind, Attachment, DeviceError, DroopParams, GfmDroop, Gfl, GflParams, SgParams, SyncMachine, Vsg,
    VsgParams, SPEED_BAND,
};
use crate::dvpp::{self, Allocation, DisturbanceLedger, Disaggregator, DvppError, DvppSpec, LedgerSeries, TargetShape};
use crate::lti::LtiBlock;
use crate::network::{build_nine_bus, DeviceInterface, DevicePort, LoadEvent, LoadState, NetworkData, NetworkError, NetworkModel, NetworkSolver, NetworkSolution, PowerFlowOptions};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

pub const SCENARIO_SCHEMA_VERSION: u32 = 1;

/// Band around the final value used for the recovery time, Hz.
pub const RECOVERY_BAND_HZ: f64 = 0.02;
pub const ROCOF_WINDOW_S: f64 = 0.1;
pub const ROCOF_SPAN_S: f64 = 0.5;
pub const COHERENCE_DELAY_S: f64 = 2.0;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid scenario: {0}")]
    Config(String),
    #[error("invalid DVPP `{id}`: {source}")]
    Dvpp { id: String, source: DvppError },
    #[error("invalid device `{id}`: {source}")]
    DeviceConfig { id: String, source: DeviceError },
    #[error("initialization failed: {0}")]
    Init(NetworkError),
    #[error("device `{id}` faulted at t = {t:.4} s: {source}")]
    Device { id: String, t: f64, source: DeviceError },
    #[error("network solve failed at t = {t:.4} s: {source}")]
    Network { t: f64, source: NetworkError },
    #[error("control block of `{id}` faulted at t = {t:.4} s: {reason}")]
    Control { id: String, t: f64, reason: String },
    #[error("angle/voltage iteration did not converge at t = {t:.4} s (residual {residual:.3e})")]
    FixedPoint { t: f64, residual: f64 },
}

impl EngineError {
    /// Whether the error stems from the scenario definition rather than the
    /// simulation itself.
    pub fn is_config(&self) -> bool {
        matches!(self, EngineError::Config(_) | EngineError::Dvpp { .. } | EngineError::DeviceConfig { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetworkSource {
    Builtin(String),
    Inline(NetworkData),
}

impl NetworkSource {
    pub fn load(&self) -> Result<NetworkModel, EngineError> {
        match self {
            NetworkSource::Builtin(name) if name == "nine_bus" => Ok(build_nine_bus()),
            NetworkSource::Builtin(name) => Err(EngineError::Config(format!("unknown built-in network `{name}`"))),
            NetworkSource::Inline(data) => NetworkModel::from_data(data.clone()).map_err(|e| EngineError::Config(e.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ModelSpec {
    Sg(SgParams),
    Droop(DroopParams),
    Vsg(VsgParams),
    Gfl(GflParams),
    Dvpp {
        spec: DvppSpec,
        #[serde(default = "default_x_source")]
        x_source: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub id: String,
    pub bus: usize,
    pub rating_mva: f64,
    pub model: ModelSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverSettings {
    pub dt: f64,
    pub t_end: f64,
    #[serde(default = "default_fp_tol")]
    pub fixed_point_tol: f64,
    #[serde(default = "default_fp_iter")]
    pub max_fixed_point_iter: usize,
    #[serde(default)]
    pub sg_damping: DampingReference,
}

/// Speed against which synchronous-machine damping acts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DampingReference {
    /// D(ω − 1): adds to the governor droop in steady state.
    Nominal,
    /// D(ω − ω_coi) over the inertia-weighted machine speeds: damps relative
    /// swings only.
    #[default]
    Coi,
}

fn default_fp_tol() -> f64 {
    1e-12
}

fn default_fp_iter() -> usize {
    50
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self { dt: 1e-3, t_end: 30.0, fixed_point_tol: default_fp_tol(), max_fixed_point_iter: default_fp_iter(), sg_damping: DampingReference::Coi }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub schema_version: u32,
    pub name: String,
    pub network: NetworkSource,
    pub devices: Vec<Placement>,
    #[serde(default)]
    pub events: Vec<LoadEvent>,
    #[serde(default)]
    pub solver: SolverSettings,
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, EngineError> {
        let s: Self = serde_json::from_str(text).map_err(|e| EngineError::Config(e.to_string()))?;
        if s.schema_version != SCENARIO_SCHEMA_VERSION {
            return Err(EngineError::Config(format!(
                "unsupported schema_version {} (expected {SCENARIO_SCHEMA_VERSION})",
                s.schema_version
            )));
        }
        Ok(s)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        let s = &self.solver;
        if !(s.dt > 0.0 && s.dt.is_finite()) {
            return Err(EngineError::Config(format!("dt must be positive (got {})", s.dt)));
        }
        if !(s.t_end > s.dt && s.t_end.is_finite()) {
            return Err(EngineError::Config(format!("t_end must exceed dt (got {})", s.t_end)));
        }
        if !(s.fixed_point_tol > 0.0) || s.max_fixed_point_iter == 0 {
            return Err(EngineError::Config("fixed-point tolerance and iteration cap must be positive".into()));
        }
        for e in &self.events {
            if !(e.t > 0.0 && e.t < s.t_end) {
                return Err(EngineError::Config(format!("event time {} must lie inside (0, t_end)", e.t)));
            }
        }
        if self.devices.is_empty() {
            return Err(EngineError::Config("scenario has no devices".into()));
        }
        let mut ids = std::collections::BTreeSet::new();
        let mut buses = std::collections::BTreeSet::new();
        for d in &self.devices {
            if d.id.is_empty() || d.id.contains(',') || d.id.contains('.') {
                return Err(EngineError::Config(format!("device id `{}` must be non-empty without ',' or '.'", d.id)));
            }
            if !ids.insert(d.id.as_str()) {
                return Err(EngineError::Config(format!("duplicate device id `{}`", d.id)));
            }
            if !buses.insert(d.bus) {
                return Err(EngineError::Config(format!("more than one device at bus {}", d.bus)));
            }
            if !(d.rating_mva > 0.0) {
                return Err(EngineError::Config(format!("device `{}` needs a positive rating", d.id)));
            }
            if let ModelSpec::Dvpp { spec, x_source } = &d.model {
                if (spec.rating_mva - d.rating_mva).abs() > 1e-9 * d.rating_mva {
                    return Err(EngineError::Config(format!(
                        "DVPP `{}` rating {} differs from its spec rating {}",
                        d.id, d.rating_mva, spec.rating_mva
                    )));
                }
                if !(*x_source > 0.0) {
                    return Err(EngineError::Config(format!("DVPP `{}` needs a positive x_source", d.id)));
                }
            }
        }
        Ok(())
    }

    /// First load step, if any.
    pub fn first_event_time(&self) -> Option<f64> {
        self.events.iter().map(|e| e.t).min_by(f64::total_cmp)
    }
}

/// Synchronous-machine data on machine base.
fn sg(h: f64, x_d_prime: f64) -> ModelSpec {
    ModelSpec::Sg(SgParams { h_inertia: h, d_mech: 5.0, r_gov: Some(0.05), t_gov: 0.5, x_d_prime })
}

/// Default load step: +0.10 pu at bus 5, t = 1 s.
pub fn default_step() -> LoadEvent {
    LoadEvent { bus: 5, dp: 0.10, dq: 0.0, t: 1.0 }
}

/// The three canonical experiments: (1) three synchronous machines,
/// (2) machine 3 replaced by a hydro/battery/supercapacitor plant,
/// (3) additionally machine 2 replaced by a wind/PV/vehicle-storage plant.
pub fn build_experiment(n: u32) -> Result<Scenario, EngineError> {
    if !(1..=3).contains(&n) {
        return Err(EngineError::Config(format!("experiment must be 1, 2 or 3 (got {n})")));
    }
    let mut devices = vec![Placement { id: "sg1".into(), bus: 1, rating_mva: 250.0, model: sg(9.55, 0.15) }];
    if n == 3 {
        devices.push(Placement { id: "dvpp2".into(), bus: 2, rating_mva: 60.0, model: ModelSpec::Dvpp { spec: dvpp::dvpp2_spec(), x_source: 0.15 } });
    } else {
        devices.push(Placement { id: "sg2".into(), bus: 2, rating_mva: 80.0, model: sg(3.33, 0.23) });
    }
    if n == 1 {
        devices.push(Placement { id: "sg3".into(), bus: 3, rating_mva: 60.0, model: sg(2.35, 0.232) });
    } else {
        devices.push(Placement { id: "dvpp1".into(), bus: 3, rating_mva: 250.0, model: ModelSpec::Dvpp { spec: dvpp::dvpp1_spec(), x_source: 0.15 } });
    }
    Ok(Scenario {
        schema_version: SCENARIO_SCHEMA_VERSION,
        name: format!("experiment-{n}"),
        network: NetworkSource::Builtin("nine_bus".into()),
        devices,
        events: vec![default_step()],
        solver: SolverSettings::default(),
    })
}

// ---------------------------------------------------------------------------
// Output types

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceKind {
    Device,
    Member,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub id: String,
    pub kind: TraceKind,
    /// Owning plant for members.
    pub parent: Option<String>,
    pub f_hz: Vec<f64>,
    pub dp: Vec<f64>,
    pub dq: Vec<f64>,
    pub v: Vec<f64>,
}

/// Channel signals of one plant: speed and voltage deviations fed to its
/// members, with the pre-jump values at event samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelTrace {
    pub id: String,
    pub d_omega: Vec<f64>,
    pub d_v: Vec<f64>,
    /// `(sample, d_omega, d_v)` held just before an event at that sample.
    pub pre_event: Vec<(usize, f64, f64)>,
    pub allocation: Allocation,
    /// Device-to-system base factor applied to the member responses.
    pub scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlagKind {
    Saturation,
    LossOfLock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Flag {
    pub id: String,
    pub kind: FlagKind,
    pub t: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimOutput {
    pub scenario: String,
    pub dt: f64,
    pub f_nom: f64,
    pub t: Vec<f64>,
    pub traces: Vec<Trace>,
    pub events: Vec<LoadEvent>,
    pub flags: Vec<Flag>,
    pub channels: Vec<ChannelTrace>,
    pub ledger: DisturbanceLedger,
    pub max_fixed_point_iterations: usize,
    /// Inertia weights of the top-level devices, MW·s per pu speed, in
    /// trace order. Zero for units without inertia.
    pub coi_weights: Vec<f64>,
}

impl SimOutput {
    pub fn trace(&self, id: &str) -> Option<&Trace> {
        self.traces.iter().find(|t| t.id == id)
    }

    pub fn devices(&self) -> impl Iterator<Item = &Trace> {
        self.traces.iter().filter(|t| t.kind == TraceKind::Device)
    }

    pub fn members(&self) -> impl Iterator<Item = &Trace> {
        self.traces.iter().filter(|t| t.kind == TraceKind::Member)
    }

    /// Inertia-weighted mean frequency of the top-level devices. Falls back
    /// to the plain mean when no device carries inertia.
    pub fn coi_f_hz(&self) -> Vec<f64> {
        let devs: Vec<&Trace> = self.devices().collect();
        let tot: f64 = self.coi_weights.iter().sum();
        let w: Vec<f64> = if tot > 0.0 && self.coi_weights.len() == devs.len() {
            self.coi_weights.iter().map(|w| w / tot).collect()
        } else {
            vec![1.0 / devs.len() as f64; devs.len()]
        };
        (0..self.t.len()).map(|k| devs.iter().zip(&w).map(|(tr, w)| w * tr.f_hz[k]).sum()).collect()
    }

    pub fn index_at(&self, t: f64) -> usize {
        ((t / self.dt).round().max(0.0) as usize).min(self.t.len() - 1)
    }
}

/// Numeric table read back from a timeseries CSV, stored by column.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub data: Vec<Vec<f64>>,
}

impl Table {
    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.columns.iter().position(|c| c == name).map(|i| self.data[i].as_slice())
    }
}

impl SimOutput {
    /// Header of the timeseries CSV: `t`, then `{id}.f_hz`, `{id}.dp_pu`,
    /// `{id}.dq_pu`, `{id}.v_pu` per trace.
    pub fn csv_columns(&self) -> Vec<String> {
        let mut cols = vec!["t".to_string()];
        for tr in &self.traces {
            for q in ["f_hz", "dp_pu", "dq_pu", "v_pu"] {
                cols.push(format!("{}.{q}", tr.id));
            }
        }
        cols
    }

    /// Writes the timeseries. Values use the shortest exponent form that
    /// parses back to the identical `f64`.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<(), csv::Error> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(self.csv_columns())?;
        let mut row = Vec::with_capacity(1 + 4 * self.traces.len());
        for (k, t) in self.t.iter().enumerate() {
            row.clear();
            row.push(format!("{t:e}"));
            for tr in &self.traces {
                for v in [tr.f_hz[k], tr.dp[k], tr.dq[k], tr.v[k]] {
                    row.push(format!("{v:e}"));
                }
            }
            wr.write_record(&row)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("in-memory write");
        String::from_utf8(buf).expect("csv is utf-8")
    }
}

pub fn read_csv<R: std::io::Read>(r: R) -> Result<Table, EngineError> {
    let bad = |e: csv::Error| EngineError::Config(format!("timeseries CSV: {e}"));
    let mut rd = csv::Reader::from_reader(r);
    let columns: Vec<String> = rd.headers().map_err(bad)?.iter().map(str::to_string).collect();
    let mut data = vec![Vec::new(); columns.len()];
    for (line, rec) in rd.records().enumerate() {
        let rec = rec.map_err(bad)?;
        for (i, field) in rec.iter().enumerate() {
            let v: f64 = field
                .parse()
                .map_err(|_| EngineError::Config(format!("timeseries CSV row {}: `{field}` is not a number", line + 2)))?;
            data[i].push(v);
        }
    }
    Ok(Table { columns, data })
}

// ---------------------------------------------------------------------------
// Runtime units

#[derive(Debug, Clone)]
struct Plant {
    e0: f64,
    p0: f64,
    q0: f64,
    inv_p: LtiBlock,
    inv_q: LtiBlock,
    members: Disaggregator,
    member_cap: Vec<f64>,
    member_p0: Vec<f64>,
    member_q0: Vec<f64>,
    alloc: Allocation,
    scale: f64,
}

#[derive(Debug, Clone)]
enum Law {
    Droop(GfmDroop),
    Plant(Box<Plant>),
}

/// Grid-forming unit with discrete control law.
#[derive(Debug, Clone)]
struct Discrete {
    law: Law,
    bus: usize,
    z: Complex64,
    theta: f64,
    omega: f64,
    e: f64,
}

impl Discrete {
    /// `(omega, e)` commanded for the next sample at system-base `s`.
    fn peek(&self, s: Complex64) -> (f64, f64) {
        match &self.law {
            Law::Droop(d) => {
                let sc = d.at.scale();
                d.peek(s.re / sc, s.im / sc)
            }
            Law::Plant(p) => {
                let dw = p.inv_p.peek(s.re - p.p0);
                let dv = p.inv_q.peek(s.im - p.q0);
                (1.0 - dw, p.e0 - dv)
            }
        }
    }

    /// `(omega, e)` after replacing the current input sample with `s`.
    fn peek_jump(&self, s: Complex64) -> Result<(f64, f64), String> {
        let mut c = self.clone();
        c.jump(s)
    }

    fn commit(&mut self, s: Complex64) -> Result<(f64, f64), String> {
        let (w, e) = match &mut self.law {
            Law::Droop(d) => {
                let sc = d.at.scale();
                d.droop_step(s.re / sc, s.im / sc).map_err(|e| e.to_string())?
            }
            Law::Plant(p) => {
                let dw = p.inv_p.step(s.re - p.p0).map_err(|e| e.to_string())?;
                let dv = p.inv_q.step(s.im - p.q0).map_err(|e| e.to_string())?;
                p.members.step(dw, dv).map_err(|e| e.to_string())?;
                (1.0 - dw, p.e0 - dv)
            }
        };
        self.omega = w;
        self.e = e;
        Ok((w, e))
    }

    fn jump(&mut self, s: Complex64) -> Result<(f64, f64), String> {
        let (w, e) = match &mut self.law {
            Law::Droop(d) => {
                let sc = d.at.scale();
                d.jump(s.re / sc, s.im / sc).map_err(|e| e.to_string())?
            }
            Law::Plant(p) => {
                let dw = p.inv_p.set_current_input(s.re - p.p0).map_err(|e| e.to_string())?;
                let dv = p.inv_q.set_current_input(s.im - p.q0).map_err(|e| e.to_string())?;
                p.members.jump(dw, dv).map_err(|e| e.to_string())?;
                (1.0 - dw, p.e0 - dv)
            }
        };
        self.omega = w;
        self.e = e;
        Ok((w, e))
    }

    fn interface(&self, theta: f64, e: f64) -> DeviceInterface {
        DeviceInterface::Thevenin { bus: self.bus, emf: Complex64::from_polar(e, theta), z: self.z }
    }
}

#[derive(Debug, Clone)]
enum Continuous {
    Sg(SyncMachine),
    Vsg(Vsg),
    Gfl(Gfl),
}

impl Continuous {
    fn dim(&self) -> usize {
        match self {
            Continuous::Sg(_) | Continuous::Vsg(_) => 3,
            Continuous::Gfl(_) => 6,
        }
    }

    fn state(&self) -> Vec<f64> {
        match self {
            Continuous::Sg(m) => m.state().to_vec(),
            Continuous::Vsg(v) => v.state().to_vec(),
            Continuous::Gfl(g) => g.x.to_vec(),
        }
    }

    fn set_state(&mut self, x: &[f64]) {
        match self {
            Continuous::Sg(m) => m.set_state(&[x[0], x[1], x[2]]),
            Continuous::Vsg(v) => v.set_state(&[x[0], x[1], x[2]]),
            Continuous::Gfl(g) => g.x.copy_from_slice(x),
        }
    }

    fn interface(&self, x: &[f64]) -> DeviceInterface {
        match self {
            Continuous::Sg(m) => DeviceInterface::Thevenin { bus: m.at.bus, emf: m.emf_at(x[0]), z: m.z() },
            Continuous::Vsg(v) => DeviceInterface::Thevenin { bus: v.at.bus, emf: v.emf_at(x[0]), z: v.z() },
            Continuous::Gfl(g) => {
                let mut y = [0.0; 6];
                y.copy_from_slice(x);
                let (i, _) = crate::devices::clamp_current(Complex64::new(y[2], y[3]), g.params.i_max);
                DeviceInterface::Norton { bus: g.at.bus, current: i * Complex64::from_polar(g.at.scale(), y[0]) }
            }
        }
    }

    fn rates(&self, x: &[f64], s: Complex64, v: Complex64, omega_b: f64, omega_ref: f64, out: &mut [f64]) {
        match self {
            Continuous::Sg(m) => {
                let p_e = s.re / m.at.scale() - m.params.d_mech * (omega_ref - 1.0);
                let r = m.rates(&[x[0], x[1], x[2]], p_e, omega_b);
                out.copy_from_slice(&r);
            }
            Continuous::Vsg(d) => {
                let r = d.rates(&[x[0], x[1], x[2]], s.re / d.at.scale(), omega_b);
                out.copy_from_slice(&r);
            }
            Continuous::Gfl(g) => {
                let mut y = [0.0; 6];
                y.copy_from_slice(x);
                out.copy_from_slice(&g.rates(&y, v, omega_b));
            }
        }
    }

    fn omega(&self, v: Complex64, omega_b: f64) -> f64 {
        match self {
            Continuous::Sg(m) => m.omega,
            Continuous::Vsg(d) => d.omega,
            Continuous::Gfl(g) => g.omega(v, omega_b),
        }
    }

    fn set_references(&mut self, s: Complex64) {
        match self {
            Continuous::Sg(m) => m.p_m0 = s.re / m.at.scale(),
            Continuous::Vsg(d) => d.p_ref = s.re / d.at.scale(),
            Continuous::Gfl(g) => {
                g.p_ref = s.re / g.at.scale();
                g.q_ref = s.im / g.at.scale();
            }
        }
    }
}

#[derive(Debug, Clone)]
enum Slot {
    Cont(usize),
    Disc(usize),
}

struct Runner {
    ids: Vec<String>,
    slots: Vec<Slot>,
    cont: Vec<Continuous>,
    cont_offset: Vec<usize>,
    disc: Vec<Discrete>,
    solver: NetworkSolver,
    net: NetworkModel,
    omega_b: f64,
    damping: DampingReference,
}

fn speed_ok(w: f64) -> bool {
    (SPEED_BAND.0..=SPEED_BAND.1).contains(&w)
}

impl Runner {
    fn interfaces(&self, x: &[f64], disc: &[(f64, f64)]) -> Vec<DeviceInterface> {
        self.slots
            .iter()
            .map(|s| match *s {
                Slot::Cont(i) => {
                    let o = self.cont_offset[i];
                    self.cont[i].interface(&x[o..o + self.cont[i].dim()])
                }
                Slot::Disc(i) => self.disc[i].interface(disc[i].0, disc[i].1),
            })
            .collect()
    }

    fn cont_state(&self) -> Vec<f64> {
        self.cont.iter().flat_map(|c| c.state()).collect()
    }

    fn solve(&self, x: &[f64], disc: &[(f64, f64)], t: f64) -> Result<NetworkSolution, EngineError> {
        self.solver.solve(&self.interfaces(x, disc)).map_err(|source| EngineError::Network { t, source })
    }

    fn rates(&self, x: &[f64], disc: &[(f64, f64)], t: f64) -> Result<Vec<f64>, EngineError> {
        let sol = self.solve(x, disc, t)?;
        let omega_ref = match self.damping {
            DampingReference::Nominal => 1.0,
            DampingReference::Coi => {
                let (mut num, mut den) = (0.0, 0.0);
                for (i, c) in self.cont.iter().enumerate() {
                    if let Continuous::Sg(m) = c {
                        let w = 2.0 * m.params.h_inertia * m.at.scale();
                        num += w * x[self.cont_offset[i] + 1];
                        den += w;
                    }
                }
                if den > 0.0 { num / den } else { 1.0 }
            }
        };
        let mut out = vec![0.0; x.len()];
        for (k, s) in self.slots.iter().enumerate() {
            if let Slot::Cont(i) = *s {
                let o = self.cont_offset[i];
                let n = self.cont[i].dim();
                self.cont[i].rates(&x[o..o + n], sol.device_power[k], sol.terminal[k], self.omega_b, omega_ref, &mut out[o..o + n]);
            }
        }
        Ok(out)
    }

    fn disc_now(&self) -> Vec<(f64, f64)> {
        self.disc.iter().map(|d| (d.theta, d.e)).collect()
    }

    /// Discrete angles extrapolated `h` seconds ahead at the held speed.
    fn disc_ahead(&self, h: f64) -> Vec<(f64, f64)> {
        self.disc.iter().map(|d| (d.theta + self.omega_b * h * (d.omega - 1.0), d.e)).collect()
    }

    fn disc_index(&self, slot: usize) -> Option<usize> {
        match self.slots[slot] {
            Slot::Disc(i) => Some(i),
            Slot::Cont(_) => None,
        }
    }
}

/// Runs a scenario to its horizon.
pub fn run(sc: &Scenario) -> Result<SimOutput, EngineError> {
    sc.validate()?;
    let net = sc.network.load()?;
    let dt = sc.solver.dt;
    let omega_b = net.base.omega_base();
    let s_base = net.base.s_base_mva;

    // Operating point.
    let specs = net.dispatch_specs().map_err(|e| EngineError::Config(e.to_string()))?;
    let pf = crate::network::solve_power_flow(&net.y_matrix, &specs, PowerFlowOptions::default()).map_err(EngineError::Init)?;
    let dispatch_buses: std::collections::BTreeSet<usize> = net.generators.iter().map(|g| g.bus).collect();
    let placed: std::collections::BTreeSet<usize> = sc.devices.iter().map(|d| d.bus).collect();
    if dispatch_buses != placed {
        return Err(EngineError::Config(format!(
            "devices must occupy exactly the dispatched generator buses {dispatch_buses:?} (got {placed:?})"
        )));
    }
    let slack_bus = net.generators.iter().find(|g| g.slack).map(|g| g.bus);
    let mut bus_load = vec![Complex64::new(0.0, 0.0); net.n_bus()];
    for l in &net.loads {
        bus_load[l.bus - 1] += Complex64::new(l.p, l.q);
    }
    let loads = LoadState::from_operating_point(&net, &pf.voltages, sc.events.clone()).map_err(|e| EngineError::Config(e.to_string()))?;

    let mut ids = Vec::new();
    let mut slots = Vec::new();
    let mut cont = Vec::new();
    let mut disc = Vec::new();
    let mut member_owner: Vec<(usize, String)> = Vec::new();
    for d in &sc.devices {
        let i = net.index(d.bus).map_err(|e| EngineError::Config(e.to_string()))?;
        let v = pf.voltages[i];
        let s = pf.injections[i] + bus_load[i];
        let at = Attachment::new(d.bus, d.rating_mva, s_base).map_err(|source| EngineError::DeviceConfig { id: d.id.clone(), source })?;
        let cfg = |source| EngineError::DeviceConfig { id: d.id.clone(), source };
        ids.push(d.id.clone());
        match &d.model {
            ModelSpec::Sg(p) => {
                slots.push(Slot::Cont(cont.len()));
                cont.push(Continuous::Sg(SyncMachine::initialize(p.clone(), at, v, s).map_err(cfg)?));
            }
            ModelSpec::Vsg(p) => {
                slots.push(Slot::Cont(cont.len()));
                cont.push(Continuous::Vsg(Vsg::initialize(p.clone(), at, v, s).map_err(cfg)?));
            }
            ModelSpec::Gfl(p) => {
                if Some(d.bus) == slack_bus {
                    return Err(EngineError::Config(format!("grid-following device `{}` cannot sit at the slack bus", d.id)));
                }
                slots.push(Slot::Cont(cont.len()));
                cont.push(Continuous::Gfl(Gfl::initialize(p.clone(), at, v, s).map_err(cfg)?));
            }
            ModelSpec::Droop(p) => {
                let g = GfmDroop::initialize(p.clone(), at, v, s, dt).map_err(cfg)?;
                slots.push(Slot::Disc(disc.len()));
                disc.push(Discrete { bus: d.bus, z: g.z(), theta: g.theta, omega: 1.0, e: g.v_ref, law: Law::Droop(g) });
            }
            ModelSpec::Dvpp { spec, x_source } => {
                let dv = |source| EngineError::Dvpp { id: d.id.clone(), source };
                let alloc = dvpp::allocate(spec).map_err(dv)?;
                if !alloc.audit.pass {
                    return Err(EngineError::Config(format!(
                        "DVPP `{}` allocation fails the sum-to-one audit (residual {:.3e})",
                        d.id,
                        alloc.audit.max_residual()
                    )));
                }
                let scale = at.scale();
                let inverse = |tf: &crate::lti::RationalTransfer| -> Result<LtiBlock, EngineError> {
                    let inv = tf.scale(scale).recip().map_err(|e| dv(e.into()))?;
                    if !inv.is_proper() || !inv.is_stable() {
                        return Err(EngineError::Config(format!(
                            "DVPP `{}` target must be biproper and minimum-phase to act as a grid-forming law",
                            d.id
                        )));
                    }
                    inv.realize(dt).map_err(|e| dv(e.into()))
                };
                let inv_p = inverse(&alloc.xi_target.phi_wp)?;
                let inv_q = inverse(&alloc.xi_target.gamma_vq)?;
                let members = Disaggregator::new(&alloc, dt, scale).map_err(dv)?;
                let total_cap: f64 = spec.members.iter().map(|m| m.capacity_mva).sum();
                let z = at.reactance(*x_source);
                let e = emf_behind(v, s, z);
                let plant = Plant {
                    e0: e.norm(),
                    p0: s.re,
                    q0: s.im,
                    inv_p,
                    inv_q,
                    members,
                    member_cap: spec.members.iter().map(|m| m.capacity_mva / s_base).collect(),
                    member_p0: spec.members.iter().map(|m| s.re * m.capacity_mva / total_cap).collect(),
                    member_q0: spec.members.iter().map(|m| s.im * m.capacity_mva / total_cap).collect(),
                    alloc,
                    scale,
                };
                for m in &spec.members {
                    member_owner.push((disc.len(), m.id.clone()));
                }
                slots.push(Slot::Disc(disc.len()));
                disc.push(Discrete { bus: d.bus, z, theta: e.arg(), omega: 1.0, e: e.norm(), law: Law::Plant(Box::new(plant)) });
            }
        }
    }
    let mut cont_offset = Vec::new();
    let mut o = 0;
    for c in &cont {
        cont_offset.push(o);
        o += c.dim();
    }
    let ports = slots
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let bus = sc.devices[k].bus;
            match *s {
                Slot::Cont(i) => match &cont[i] {
                    Continuous::Sg(m) => DevicePort { bus, z: Some(m.z()) },
                    Continuous::Vsg(v) => DevicePort { bus, z: Some(v.z()) },
                    Continuous::Gfl(_) => DevicePort { bus, z: None },
                },
                Slot::Disc(i) => DevicePort { bus, z: Some(disc[i].z) },
            }
        })
        .collect();
    let solver = NetworkSolver::new(&net, ports, loads.base()).map_err(EngineError::Init)?;
    let mut r = Runner { ids, slots, cont, cont_offset, disc, solver, net, omega_b, damping: sc.solver.sg_damping };

    // Align references with the algebraic solution so the start is an exact
    // equilibrium of the discretized system.
    let x0 = r.cont_state();
    let sol0 = r.solve(&x0, &r.disc_now(), 0.0)?;
    for (k, s) in r.slots.clone().iter().enumerate() {
        let sk = sol0.device_power[k];
        match *s {
            Slot::Cont(i) => r.cont[i].set_references(sk),
            Slot::Disc(i) => match &mut r.disc[i].law {
                Law::Droop(d) => {
                    d.p_ref = sk.re / d.at.scale();
                    d.q_ref = sk.im / d.at.scale();
                }
                Law::Plant(p) => {
                    p.p0 = sk.re;
                    p.q0 = sk.im;
                    let tot: f64 = p.member_cap.iter().sum();
                    p.member_p0 = p.member_cap.iter().map(|c| sk.re * c / tot).collect();
                    p.member_q0 = p.member_cap.iter().map(|c| sk.im * c / tot).collect();
                }
            },
        }
    }

    let n_steps = (sc.solver.t_end / dt).round() as usize;
    let f_nom = r.net.base.f_nom_hz;
    let mut events: Vec<(usize, LoadEvent)> = loads.events().iter().map(|e| (((e.t / dt) - 1e-9).ceil() as usize, *e)).collect();
    events.sort_by_key(|e| e.0);

    // Recording buffers.
    let n_dev = r.slots.len();
    let mut rec = Recorder::new(&r, &member_owner, n_steps + 1);
    let p_init: Vec<Complex64> = sol0.device_power.clone();
    let absorbed0 = r.solver.load_power(&sol0.voltages) + r.net.network_absorbed(&sol0.voltages);
    rec.record(&r, &sol0, &p_init, absorbed0, 0.0, f_nom)?;

    let mut max_iter = 0;
    let mut next_event = 0;
    for k in 0..n_steps {
        let t = k as f64 * dt;
        let t1 = (k + 1) as f64 * dt;

        // Continuous devices, RK4 with discrete angles extrapolated.
        let x = r.cont_state();
        let stage = |r: &Runner, x: &[f64], h: f64| r.rates(x, &r.disc_ahead(h), t + h);
        let k1 = stage(&r, &x, 0.0)?;
        let x2: Vec<f64> = x.iter().zip(&k1).map(|(a, b)| a + dt / 2.0 * b).collect();
        let k2 = stage(&r, &x2, dt / 2.0)?;
        let x3: Vec<f64> = x.iter().zip(&k2).map(|(a, b)| a + dt / 2.0 * b).collect();
        let k3 = stage(&r, &x3, dt / 2.0)?;
        let x4: Vec<f64> = x.iter().zip(&k3).map(|(a, b)| a + dt * b).collect();
        let k4 = stage(&r, &x4, dt)?;
        let xn: Vec<f64> = (0..x.len()).map(|i| x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])).collect();
        for (i, c) in r.cont.iter_mut().enumerate() {
            let o = r.cont_offset[i];
            c.set_state(&xn[o..o + c.dim()]);
        }

        // Discrete units: trapezoidal angle, fixed point on (theta, e).
        let mut sol = fixed_point(&r, &xn, sc, t1, |d, s| {
            let (w, e) = d.peek(s);
            Ok((d.theta + omega_b * dt / 2.0 * (d.omega - 1.0 + w - 1.0), e))
        }, &mut max_iter)?;
        for k_dev in 0..n_dev {
            if let Some(i) = r.disc_index(k_dev) {
                let s = sol.device_power[k_dev];
                let (w, _) = r.disc[i].peek(s);
                let d = &mut r.disc[i];
                d.theta += omega_b * dt / 2.0 * (d.omega - 1.0 + w - 1.0);
                d.commit(s).map_err(|reason| EngineError::Control { id: r.ids[k_dev].clone(), t: t1, reason })?;
            }
        }

        // Load steps landing on this sample.
        let mut jumped = false;
        while next_event < events.len() && events[next_event].0 == k + 1 {
            let ev = events[next_event].1;
            r.solver.set_loads(&loads.admittances_at(ev.t)).map_err(|source| EngineError::Network { t: t1, source })?;
            next_event += 1;
            jumped = true;
        }
        if jumped {
            for (ci, d) in r.disc.iter().enumerate() {
                if let Law::Plant(p) = &d.law {
                    rec.note_pre_event(ci, k + 1, 1.0 - d.omega, p.e0 - d.e);
                }
            }
            sol = fixed_point(&r, &xn, sc, t1, |d, s| Ok((d.theta, d.peek_jump(s)?.1)), &mut max_iter)?;
            for k_dev in 0..n_dev {
                if let Some(i) = r.disc_index(k_dev) {
                    let s = sol.device_power[k_dev];
                    r.disc[i].jump(s).map_err(|reason| EngineError::Control { id: r.ids[k_dev].clone(), t: t1, reason })?;
                }
            }
        }

        // Committed state solved once more so the record is self-consistent.
        let sol_rec = r.solve(&xn, &r.disc_now(), t1)?;
        sol = sol_rec;
        for (k_dev, s) in r.slots.iter().enumerate() {
            if let Slot::Cont(i) = *s {
                if let Continuous::Gfl(g) = &mut r.cont[i] {
                    g.update_flags(sol.terminal[k_dev]);
                }
            }
        }
        // Speed band.
        for (k_dev, s) in r.slots.iter().enumerate() {
            let w = match *s {
                Slot::Cont(i) => r.cont[i].omega(sol.terminal[k_dev], omega_b),
                Slot::Disc(i) => r.disc[i].omega,
            };
            if !speed_ok(w) || !w.is_finite() {
                return Err(EngineError::Device { id: r.ids[k_dev].clone(), t: t1, source: DeviceError::SpeedBand { omega: w } });
            }
        }
        rec.record(&r, &sol, &p_init, absorbed0, t1, f_nom)?;
    }

    Ok(rec.finish(sc, dt, f_nom, max_iter))
}

/// Iterates the discrete units' `(theta, e)` against the network with the
/// continuous states fixed at `x`.
fn fixed_point(
    r: &Runner,
    x: &[f64],
    sc: &Scenario,
    t: f64,
    update: impl Fn(&Discrete, Complex64) -> Result<(f64, f64), String>,
    max_iter: &mut usize,
) -> Result<NetworkSolution, EngineError> {
    let mut cur = r.disc_now();
    if r.disc.is_empty() {
        return r.solve(x, &cur, t);
    }
    let tol = sc.solver.fixed_point_tol;
    let mut residual = f64::INFINITY;
    for it in 1..=sc.solver.max_fixed_point_iter {
        let sol = r.solve(x, &cur, t)?;
        let mut next = cur.clone();
        residual = 0.0;
        for (k, s) in r.slots.iter().enumerate() {
            if let Slot::Disc(i) = *s {
                let n = update(&r.disc[i], sol.device_power[k]).map_err(|reason| EngineError::Control { id: r.ids[k].clone(), t, reason })?;
                residual = residual.max((n.0 - cur[i].0).abs()).max((n.1 - cur[i].1).abs());
                next[i] = n;
            }
        }
        if residual < tol {
            *max_iter = (*max_iter).max(it);
            return Ok(sol);
        }
        cur = next;
    }
    Err(EngineError::FixedPoint { t, residual })
}

struct Recorder {
    t: Vec<f64>,
    traces: Vec<Trace>,
    /// (discrete index, member index) per member trace, aligned after the
    /// device traces.
    member_src: Vec<(usize, usize)>,
    parent_slot: Vec<usize>,
    channels: Vec<(usize, ChannelTrace)>,
    flags: Vec<Flag>,
    flagged: std::collections::BTreeSet<(String, u8)>,
    target_p: Vec<f64>,
    target_q: Vec<f64>,
}

impl Recorder {
    fn new(r: &Runner, owners: &[(usize, String)], cap: usize) -> Self {
        let mk = |id: &str, kind, parent: Option<String>| Trace {
            id: id.to_string(),
            kind,
            parent,
            f_hz: Vec::with_capacity(cap),
            dp: Vec::with_capacity(cap),
            dq: Vec::with_capacity(cap),
            v: Vec::with_capacity(cap),
        };
        let mut traces: Vec<Trace> = r.ids.iter().map(|id| mk(id, TraceKind::Device, None)).collect();
        let mut member_src = Vec::new();
        let mut parent_slot = Vec::new();
        let mut channels = Vec::new();
        for (k, s) in r.slots.iter().enumerate() {
            if let Slot::Disc(i) = *s {
                if let Law::Plant(p) = &r.disc[i].law {
                    let parent = &r.ids[k];
                    for (m, (_, mid)) in owners.iter().filter(|(o, _)| *o == i).enumerate() {
                        traces.push(mk(&format!("{parent}.{mid}"), TraceKind::Member, Some(parent.clone())));
                        member_src.push((i, m));
                        parent_slot.push(k);
                    }
                    channels.push((
                        i,
                        ChannelTrace {
                            id: parent.clone(),
                            d_omega: Vec::with_capacity(cap),
                            d_v: Vec::with_capacity(cap),
                            pre_event: Vec::new(),
                            allocation: p.alloc.clone(),
                            scale: p.scale,
                        },
                    ));
                }
            }
        }
        Self {
            t: Vec::with_capacity(cap),
            traces,
            member_src,
            parent_slot,
            channels,
            flags: Vec::new(),
            flagged: Default::default(),
            target_p: Vec::with_capacity(cap),
            target_q: Vec::with_capacity(cap),
        }
    }

    fn note_pre_event(&mut self, disc: usize, sample: usize, dw: f64, dv: f64) {
        for (i, c) in &mut self.channels {
            if *i == disc {
                c.pre_event.push((sample, dw, dv));
            }
        }
    }

    fn flag(&mut self, id: &str, kind: FlagKind, t: f64) {
        if self.flagged.insert((id.to_string(), kind as u8)) {
            self.flags.push(Flag { id: id.to_string(), kind, t });
        }
    }

    fn record(&mut self, r: &Runner, sol: &NetworkSolution, p_init: &[Complex64], absorbed0: Complex64, t: f64, f_nom: f64) -> Result<(), EngineError> {
        self.t.push(t);
        let n_dev = r.slots.len();
        let mut omegas = vec![0.0; n_dev];
        for (k, s) in r.slots.iter().enumerate() {
            let w = match *s {
                Slot::Cont(i) => r.cont[i].omega(sol.terminal[k], r.omega_b),
                Slot::Disc(i) => r.disc[i].omega,
            };
            omegas[k] = w;
            let ds = sol.device_power[k] - p_init[k];
            let tr = &mut self.traces[k];
            tr.f_hz.push(w * f_nom);
            tr.dp.push(ds.re);
            tr.dq.push(ds.im);
            tr.v.push(sol.terminal[k].norm());
            if !(ds.re.is_finite() && ds.im.is_finite() && w.is_finite()) {
                return Err(EngineError::Network { t, source: NetworkError::InvalidData(format!("non-finite result at device `{}`", r.ids[k])) });
            }
        }
        for (m, &(i, mi)) in self.member_src.clone().iter().enumerate() {
            let Law::Plant(p) = &r.disc[i].law else { unreachable!() };
            let k = self.parent_slot[m];
            let dp = p.members.outputs_p()[mi];
            let dq = p.members.outputs_q()[mi];
            let tr = &mut self.traces[n_dev + m];
            tr.f_hz.push(omegas[k] * f_nom);
            tr.dp.push(dp);
            tr.dq.push(dq);
            tr.v.push(sol.terminal[k].norm());
            let s = Complex64::new(p.member_p0[mi] + dp, p.member_q0[mi] + dq);
            if s.norm() > p.member_cap[mi] {
                let id = tr.id.clone();
                self.flag(&id, FlagKind::Saturation, t);
            }
        }
        for (k, s) in r.slots.iter().enumerate() {
            if let Slot::Cont(i) = *s {
                if let Continuous::Gfl(g) = &r.cont[i] {
                    if g.saturated {
                        self.flag(&r.ids[k], FlagKind::Saturation, t);
                    }
                    if g.lost_lock {
                        self.flag(&r.ids[k], FlagKind::LossOfLock, t);
                    }
                }
            }
        }
        for (i, c) in &mut self.channels {
            let d = &r.disc[*i];
            let Law::Plant(p) = &d.law else { unreachable!() };
            c.d_omega.push(1.0 - d.omega);
            c.d_v.push(p.e0 - d.e);
        }
        let absorbed = r.solver.load_power(&sol.voltages) + r.net.network_absorbed(&sol.voltages) - absorbed0;
        self.target_p.push(absorbed.re);
        self.target_q.push(absorbed.im);
        Ok(())
    }

    fn finish(self, sc: &Scenario, dt: f64, f_nom: f64, max_iter: usize) -> SimOutput {
        let mut ledger = DisturbanceLedger { t: self.t.clone(), target_p: self.target_p, target_q: self.target_q, ..Default::default() };
        let has_members: std::collections::BTreeSet<&str> = self.traces.iter().filter_map(|t| t.parent.as_deref()).collect();
        for tr in &self.traces {
            let s = LedgerSeries { id: tr.id.clone(), dp: tr.dp.clone(), dq: tr.dq.clone() };
            match tr.kind {
                TraceKind::Member => ledger.controllable.push(s),
                TraceKind::Device if !has_members.contains(tr.id.as_str()) => ledger.fixed.push(s),
                TraceKind::Device => {}
            }
        }
        SimOutput {
            scenario: sc.name.clone(),
            dt,
            f_nom,
            t: self.t,
            traces: self.traces,
            events: sc.events.clone(),
            flags: self.flags,
            channels: self.channels.into_iter().map(|(_, c)| c).collect(),
            ledger,
            max_fixed_point_iterations: max_iter,
            coi_weights: sc.devices.iter().map(inertia_weight).collect(),
        }
    }
}

// ---------------------------------------------------------------------------
// Metrics

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub nadir_hz: f64,
    pub nadir_time_s: f64,
    pub max_rocof_hz_per_s: f64,
    pub coherence_hz: f64,
    pub steady_state_dev_hz: f64,
    pub recovery_time_s: f64,
    pub relay_order: Vec<String>,
    /// Largest post-event |ΔP| per trace, system pu.
    pub peak_dp: BTreeMap<String, f64>,
    /// ΔP at the last sample per trace, system pu.
    pub final_dp: BTreeMap<String, f64>,
    /// Damping ratio of the dominant post-event oscillation, when one is
    /// visible.
    pub damping_ratio: Option<f64>,
}

/// Stored kinetic energy per unit speed: 2H·S for machines, J·S for
/// virtual inertia, zero otherwise.
pub fn inertia_weight(d: &Placement) -> f64 {
    let per_unit = match &d.model {
        ModelSpec::Sg(p) => 2.0 * p.h_inertia,
        ModelSpec::Vsg(p) => p.j_virt,
        ModelSpec::Dvpp { spec, .. } => match spec.target.p {
            TargetShape::Vsg { j, .. } => j,
            _ => 0.0,
        },
        ModelSpec::Droop(_) | ModelSpec::Gfl(_) => 0.0,
    };
    per_unit * d.rating_mva
}

/// Frequency and power metrics over the samples at or after `t_event`.
/// Frequency metrics use top-level devices only; the relay order lists
/// plant members by the time of their peak |ΔP|.
pub fn compute_metrics(out: &SimOutput, t_event: f64) -> Result<Metrics, EngineError> {
    let n = out.t.len();
    if n < 2 {
        return Err(EngineError::Config("output has fewer than two samples".into()));
    }
    let t_last = out.t[n - 1];
    if !(t_event >= out.t[0] && t_event < t_last) {
        return Err(EngineError::Config(format!("event time {t_event} must lie inside the horizon [0, {t_last})")));
    }
    let dt = out.dt;
    let k0 = ((t_event / dt) - 1e-9).ceil() as usize;
    let devs: Vec<&Trace> = out.devices().collect();

    let (mut nadir, mut nadir_t) = (f64::INFINITY, t_event);
    for tr in &devs {
        for k in k0..n {
            if tr.f_hz[k] < nadir {
                nadir = tr.f_hz[k];
                nadir_t = out.t[k];
            }
        }
    }

    let m = (ROCOF_WINDOW_S / dt).round().max(1.0) as usize;
    let w = m as f64 * dt;
    let span_end = t_event + ROCOF_SPAN_S + 1e-9 * dt;
    let coi = out.coi_f_hz();
    let mut rocof: f64 = 0.0;
    let mut k = k0;
    while k + m < n && out.t[k + m] <= span_end {
        rocof = rocof.max((coi[k + m] - coi[k]).abs() / w);
        k += 1;
    }

    let kc = ((t_event + COHERENCE_DELAY_S) / dt).floor() as usize + 1;
    let mut coherence: f64 = 0.0;
    for k in kc.min(n)..n {
        let (lo, hi) = devs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), tr| (lo.min(tr.f_hz[k]), hi.max(tr.f_hz[k])));
        coherence = coherence.max(hi - lo);
    }

    let ss = devs.iter().map(|tr| tr.f_hz[n - 1]).sum::<f64>() / devs.len() as f64 - out.f_nom;

    let mut recovery: f64 = 0.0;
    for tr in &devs {
        let fin = tr.f_hz[n - 1];
        if let Some(last) = (k0..n).rev().find(|&k| (tr.f_hz[k] - fin).abs() > RECOVERY_BAND_HZ) {
            recovery = recovery.max(out.t[(last + 1).min(n - 1)] - t_event);
        }
    }

    let mut peak_dp = BTreeMap::new();
    let mut final_dp = BTreeMap::new();
    let mut peak_time = Vec::new();
    for tr in &out.traces {
        let (mut pk, mut pt) = (0.0, t_event);
        for k in k0..n {
            if tr.dp[k].abs() > pk {
                pk = tr.dp[k].abs();
                pt = out.t[k];
            }
        }
        peak_dp.insert(tr.id.clone(), pk);
        final_dp.insert(tr.id.clone(), tr.dp[n - 1]);
        if tr.kind == TraceKind::Member {
            peak_time.push((pt, tr.id.clone()));
        }
    }
    peak_time.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
    let relay_order = peak_time.into_iter().map(|(_, id)| id).collect();

    // Dominant oscillation: the largest swing of an inertial unit against the
    // centre of inertia, or the centre of inertia itself when there is none.
    let mut swing: Option<(f64, Vec<f64>)> = None;
    for (i, tr) in devs.iter().enumerate() {
        if out.coi_weights.get(i).copied().unwrap_or(0.0) <= 0.0 {
            continue;
        }
        let x: Vec<f64> = (k0..n).map(|k| tr.f_hz[k] - coi[k]).collect();
        let amp = x.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        if amp > 1e-9 && swing.as_ref().is_none_or(|(a, _)| amp > *a) {
            swing = Some((amp, x));
        }
    }
    let x = swing.map(|(_, x)| x).unwrap_or_else(|| coi[k0..].iter().map(|f| f - coi[n - 1]).collect());
    let damping_ratio = log_decrement_damping(&x);

    Ok(Metrics {
        nadir_hz: nadir,
        nadir_time_s: nadir_t,
        max_rocof_hz_per_s: rocof,
        coherence_hz: coherence,
        steady_state_dev_hz: ss,
        recovery_time_s: recovery,
        relay_order,
        peak_dp,
        final_dp,
        damping_ratio,
    })
}

/// Damping ratio from the decay between the largest excursion and the
/// following opposite-sign overshoot (half-cycle logarithmic decrement).
/// `None` when the response has no overshoot.
pub fn log_decrement_damping(x: &[f64]) -> Option<f64> {
    let (k1, a1) = x.iter().enumerate().map(|(k, v)| (k, v.abs())).max_by(|a, b| a.1.total_cmp(&b.1))?;
    if a1 == 0.0 {
        return None;
    }
    let sign = x[k1].signum();
    let a2 = x[k1..].iter().map(|v| -sign * v).fold(0.0, f64::max);
    if a2 <= 0.0 {
        return None;
    }
    let d = (a1 / a2).ln();
    Some(d / (std::f64::consts::PI.powi(2) + d * d).sqrt())
}

/// Applies a named numeric override to a scenario, as used by parameter
/// sweeps. Returns an error when the parameter does not apply.
pub fn apply_param(sc: &mut Scenario, name: &str, value: f64) -> Result<(), EngineError> {
    if !value.is_finite() {
        return Err(EngineError::Config(format!("value for `{name}` must be finite")));
    }
    let mut touched = false;
    match name {
        "dt" => {
            sc.solver.dt = value;
            touched = true;
        }
        "step_p" => {
            for e in &mut sc.events {
                e.dp = value;
                touched = true;
            }
        }
        "j" | "d" => {
            for d in &mut sc.devices {
                match &mut d.model {
                    ModelSpec::Vsg(v) => {
                        if name == "j" {
                            v.j_virt = value;
                        } else {
                            v.d_virt = value;
                        }
                        touched = true;
                    }
                    ModelSpec::Dvpp { spec, .. } => {
                        if let TargetShape::Vsg { j, d, .. } = &mut spec.target.p {
                            if name == "j" {
                                *j = value;
                            } else {
                                *d = value;
                            }
                            touched = true;
                        }
                    }
                    _ => {}
                }
            }
        }
        "t_slow" | "t_fast" => {
            for d in &mut sc.devices {
                if let ModelSpec::Dvpp { spec, .. } = &mut d.model {
                    for b in std::iter::once(&mut spec.bands_p).chain(spec.bands_q.as_mut()) {
                        if name == "t_slow" {
                            b.t_slow = value;
                        } else {
                            b.t_fast = value;
                        }
                    }
                    touched = true;
                }
            }
        }
        _ => return Err(EngineError::Config(format!("unknown sweep parameter `{name}` (expected j, d, step_p, t_slow, t_fast or dt)"))),
    }
    if touched {
        Ok(())
    } else {
        Err(EngineError::Config(format!("parameter `{name}` does not apply to scenario `{}`", sc.name)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic(f: impl Fn(f64) -> f64, dt: f64, t_end: f64) -> SimOutput {
        let n = (t_end / dt).round() as usize + 1;
        let t: Vec<f64> = (0..n).map(|k| k as f64 * dt).collect();
        let fh: Vec<f64> = t.iter().map(|&t| f(t)).collect();
        SimOutput {
            scenario: "synthetic".into(),
            dt,
            f_nom: 60.0,
            traces: vec![Trace { id: "a".into(), kind: TraceKind::Device, parent: None, f_hz: fh, dp: vec![0.0; n], dq: vec![0.0; n], v: vec![1.0; n] }],
            t,
            events: vec![],
            flags: vec![],
            channels: vec![],
            ledger: DisturbanceLedger::default(),
            max_fixed_point_iterations: 0,
            coi_weights: vec![1.0],
        }
    }

    #[test]
    fn ramp_rocof_is_exact() {
        let out = synthetic(|t| if t < 1.0 { 60.0 } else { 60.0 - 0.1 * (t - 1.0) }, 1e-3, 5.0);
        let m = compute_metrics(&out, 1.0).unwrap();
        assert!((m.max_rocof_hz_per_s - 0.1).abs() < 1e-9);
    }

    #[test]
    fn v_shaped_nadir() {
        let out = synthetic(|t| 60.0 - 0.3 * (1.0 - (t - 3.0).abs() / 2.0).max(0.0), 1e-3, 8.0);
        let m = compute_metrics(&out, 1.0).unwrap();
        assert!((m.nadir_hz - 59.7).abs() < 1e-12);
        assert!((m.nadir_time_s - 3.0).abs() < 1e-9);
    }

    #[test]
    fn event_at_horizon_end_is_rejected() {
        let out = synthetic(|_| 60.0, 1e-3, 2.0);
        assert!(compute_metrics(&out, 2.0).is_err());
    }

    #[test]
    fn log_decrement_of_damped_sine() {
        let zeta: f64 = 0.1;
        let wn = 3.0;
        let wd = wn * (1.0 - zeta * zeta).sqrt();
        let x: Vec<f64> = (0..20000).map(|k| {
            let t = k as f64 * 1e-3;
            -(-zeta * wn * t).exp() * (wd * t).sin()
        }).collect();
        let z = log_decrement_damping(&x).unwrap();
        assert!((z - zeta).abs() < 1e-3, "{z}");
    }

    #[test]
    fn experiments_are_well_formed() {
        let e1 = build_experiment(1).unwrap();
        assert!(e1.devices.iter().all(|d| matches!(d.model, ModelSpec::Sg(_))));
        assert_eq!(e1.devices.iter().map(|d| d.rating_mva).collect::<Vec<_>>(), vec![250.0, 80.0, 60.0]);
        let e2 = build_experiment(2).unwrap();
        assert_eq!(e2.devices[2].id, "dvpp1");
        assert_eq!(e2.devices[2].rating_mva, 250.0);
        let e3 = build_experiment(3).unwrap();
        let ModelSpec::Dvpp { spec, .. } = &e3.devices[1].model else { panic!() };
        assert_eq!(e3.devices[1].rating_mva, 60.0);
        let ids: Vec<&str> = spec.members.iter().map(|m| m.id.as_str()).collect();
        assert_eq!(ids, ["dfig", "pv", "ev"]);
        assert!(build_experiment(4).is_err());
        let text = e3.to_json();
        assert_eq!(Scenario::from_json(&text).unwrap(), e3);
    }

    #[test]
    fn params_apply_or_reject() {
        let mut s = build_experiment(3).unwrap();
        apply_param(&mut s, "j", 20.0).unwrap();
        let ModelSpec::Dvpp { spec, .. } = &s.devices[1].model else { panic!() };
        assert!(matches!(spec.target.p, TargetShape::Vsg { j, .. } if j == 20.0));
        let mut s1 = build_experiment(1).unwrap();
        assert!(apply_param(&mut s1, "j", 20.0).is_err());
        assert!(apply_param(&mut s1, "bogus", 1.0).is_err());
        apply_param(&mut s1, "step_p", 0.2).unwrap();
        assert_eq!(s1.events[0].dp, 0.2);
    }
}

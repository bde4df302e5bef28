//! Static grid model: buses, branches, admittance matrix, Newton-Raphson
//! power flow, and the per-step algebraic network solution used by the
//! time-domain engine.
//!
//! All quantities are per-unit on the system base unless noted. Bus ids are
//! 1-based and contiguous; internally bus `id` lives at index `id - 1`.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

const NINE_BUS_JSON: &str = include_str!("../data/nine_bus.json");

pub const NETWORK_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("invalid network data: {0}")]
    InvalidData(String),
    #[error("network file could not be parsed: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("unknown bus id {0}")]
    UnknownBus(usize),
    #[error("power flow diverged after {iterations} iterations (max mismatch {mismatch:.3e} pu)")]
    Diverged { iterations: usize, mismatch: f64 },
    #[error("power-flow Jacobian is singular at iteration {iteration}")]
    SingularJacobian { iteration: usize },
    #[error("network matrix is singular; bus {bus} has no path to a source or shunt")]
    SingularNetwork { bus: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerUnitBase {
    pub s_base_mva: f64,
    pub v_base_kv: f64,
    pub f_nom_hz: f64,
}

impl PerUnitBase {
    /// Converts power from a device's own MVA base onto the system base.
    pub fn to_system(&self, value: f64, device_mva: f64) -> f64 {
        value * device_mva / self.s_base_mva
    }

    pub fn to_device(&self, value: f64, device_mva: f64) -> f64 {
        value * self.s_base_mva / device_mva
    }

    pub fn omega_base(&self) -> f64 {
        2.0 * std::f64::consts::PI * self.f_nom_hz
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BusKind {
    Generator,
    Load,
    Transfer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: usize,
    pub kind: BusKind,
    #[serde(default)]
    pub shunt_g: f64,
    #[serde(default)]
    pub shunt_b: f64,
}

impl Bus {
    pub fn shunt(&self) -> Complex64 {
        Complex64::new(self.shunt_g, self.shunt_b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchKind {
    Line,
    Transformer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub from: usize,
    pub to: usize,
    pub r: f64,
    pub x: f64,
    /// Total line-charging susceptance, split half at each end.
    #[serde(default)]
    pub b: f64,
    pub kind: BranchKind,
}

impl Branch {
    pub fn series_z(&self) -> Complex64 {
        Complex64::new(self.r, self.x)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Load {
    pub bus: usize,
    pub p: f64,
    pub q: f64,
}

/// Generator-bus dispatch used for initialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dispatch {
    pub bus: usize,
    #[serde(default)]
    pub slack: bool,
    #[serde(default)]
    pub p: f64,
    pub v: f64,
}

/// Serialized form of a network (the JSON network file).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkData {
    pub schema_version: u32,
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub base: PerUnitBase,
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    #[serde(default)]
    pub loads: Vec<Load>,
    #[serde(default)]
    pub generators: Vec<Dispatch>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkModel {
    pub name: String,
    pub base: PerUnitBase,
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    pub loads: Vec<Load>,
    pub generators: Vec<Dispatch>,
    pub y_matrix: DMatrix<Complex64>,
}

impl NetworkModel {
    pub fn from_data(data: NetworkData) -> Result<Self, NetworkError> {
        if data.schema_version != NETWORK_SCHEMA_VERSION {
            return Err(NetworkError::InvalidData(format!(
                "unsupported schema_version {} (expected {NETWORK_SCHEMA_VERSION})",
                data.schema_version
            )));
        }
        let b = data.base;
        if !(b.s_base_mva > 0.0 && b.v_base_kv > 0.0 && b.f_nom_hz > 0.0) {
            return Err(NetworkError::InvalidData("per-unit bases must be positive".into()));
        }
        for (i, bus) in data.buses.iter().enumerate() {
            if bus.id != i + 1 {
                return Err(NetworkError::InvalidData(format!(
                    "bus ids must be contiguous from 1; found {} at position {}",
                    bus.id,
                    i + 1
                )));
            }
        }
        let n = data.buses.len();
        let check = |id: usize| if id >= 1 && id <= n { Ok(()) } else { Err(NetworkError::UnknownBus(id)) };
        for br in &data.branches {
            check(br.from)?;
            check(br.to)?;
            if br.from == br.to {
                return Err(NetworkError::InvalidData(format!("branch {}-{} is a self loop", br.from, br.to)));
            }
            if br.series_z().norm() == 0.0 {
                return Err(NetworkError::InvalidData(format!("branch {}-{} has zero impedance", br.from, br.to)));
            }
        }
        for l in &data.loads {
            check(l.bus)?;
        }
        for g in &data.generators {
            check(g.bus)?;
        }
        if data.generators.iter().filter(|g| g.slack).count() > 1 {
            return Err(NetworkError::InvalidData("more than one slack generator".into()));
        }
        let y_matrix = build_y_matrix(n, &data.buses, &data.branches, true);
        Ok(Self {
            name: data.name,
            base: data.base,
            buses: data.buses,
            branches: data.branches,
            loads: data.loads,
            generators: data.generators,
            y_matrix,
        })
    }

    pub fn from_json(text: &str) -> Result<Self, NetworkError> {
        Self::from_data(serde_json::from_str(text)?)
    }

    pub fn to_data(&self) -> NetworkData {
        NetworkData {
            schema_version: NETWORK_SCHEMA_VERSION,
            name: self.name.clone(),
            description: String::new(),
            base: self.base,
            buses: self.buses.clone(),
            branches: self.branches.clone(),
            loads: self.loads.clone(),
            generators: self.generators.clone(),
        }
    }

    pub fn n_bus(&self) -> usize {
        self.buses.len()
    }

    pub fn index(&self, bus: usize) -> Result<usize, NetworkError> {
        if bus >= 1 && bus <= self.n_bus() {
            Ok(bus - 1)
        } else {
            Err(NetworkError::UnknownBus(bus))
        }
    }

    /// Admittance matrix of branches only (no bus shunts, no line charging).
    pub fn series_y_matrix(&self) -> DMatrix<Complex64> {
        let bare: Vec<Branch> = self.branches.iter().map(|b| Branch { b: 0.0, ..b.clone() }).collect();
        build_y_matrix(self.n_bus(), &self.buses, &bare, false)
    }

    /// Per-bus power-flow specification from the network's dispatch and
    /// nominal loads.
    pub fn dispatch_specs(&self) -> Result<Vec<BusSpec>, NetworkError> {
        let n = self.n_bus();
        let mut load = vec![Complex64::new(0.0, 0.0); n];
        for l in &self.loads {
            load[l.bus - 1] += Complex64::new(l.p, l.q);
        }
        let mut specs: Vec<BusSpec> = (0..n).map(|i| BusSpec::Pq { p: -load[i].re, q: -load[i].im }).collect();
        for g in &self.generators {
            let i = g.bus - 1;
            specs[i] = if g.slack {
                BusSpec::Slack { v: g.v, angle: 0.0 }
            } else {
                BusSpec::Pv { p: g.p - load[i].re, v: g.v }
            };
        }
        if !specs.iter().any(|s| matches!(s, BusSpec::Slack { .. })) {
            return Err(NetworkError::InvalidData("no slack generator in dispatch".into()));
        }
        Ok(specs)
    }

    /// Total complex power absorbed by the passive network (series losses
    /// minus line charging and bus shunts) at voltages `v`.
    pub fn network_absorbed(&self, v: &[Complex64]) -> Complex64 {
        let vv = DVector::from_column_slice(v);
        let i = &self.y_matrix * &vv;
        v.iter().zip(i.iter()).map(|(vk, ik)| vk * ik.conj()).sum()
    }
}

fn build_y_matrix(n: usize, buses: &[Bus], branches: &[Branch], with_shunts: bool) -> DMatrix<Complex64> {
    let mut y = DMatrix::from_element(n, n, Complex64::new(0.0, 0.0));
    for br in branches {
        let (f, t) = (br.from - 1, br.to - 1);
        let ys = br.series_z().inv();
        let half = Complex64::new(0.0, br.b / 2.0);
        y[(f, f)] += ys + half;
        y[(t, t)] += ys + half;
        y[(f, t)] -= ys;
        y[(t, f)] -= ys;
    }
    if with_shunts {
        for (i, bus) in buses.iter().enumerate() {
            y[(i, i)] += bus.shunt();
        }
    }
    y
}

/// The checked-in canonical 3-machine 9-bus network.
pub fn build_nine_bus() -> NetworkModel {
    NetworkModel::from_json(NINE_BUS_JSON).expect("bundled nine-bus data is valid")
}

pub fn nine_bus_json() -> &'static str {
    NINE_BUS_JSON
}

/// Per-bus specification for the power flow. `p`/`q` are net injections
/// (generation minus load).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BusSpec {
    Slack { v: f64, angle: f64 },
    Pv { p: f64, v: f64 },
    Pq { p: f64, q: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerFlowOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for PowerFlowOptions {
    fn default() -> Self {
        Self { tol: 1e-8, max_iter: 50 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerFlowSolution {
    pub voltages: Vec<Complex64>,
    /// Net complex injection at every bus implied by the solution.
    pub injections: Vec<Complex64>,
    pub iterations: usize,
    pub max_mismatch: f64,
}

fn injections(y: &DMatrix<Complex64>, v: &[Complex64]) -> Vec<Complex64> {
    let vv = DVector::from_column_slice(v);
    let i = y * vv;
    v.iter().zip(i.iter()).map(|(vk, ik)| vk * ik.conj()).collect()
}

/// Newton-Raphson power flow in polar coordinates from a flat start.
pub fn solve_power_flow(
    y: &DMatrix<Complex64>,
    specs: &[BusSpec],
    opts: PowerFlowOptions,
) -> Result<PowerFlowSolution, NetworkError> {
    let n = specs.len();
    if y.nrows() != n || y.ncols() != n {
        return Err(NetworkError::InvalidData(format!(
            "admittance matrix is {}x{} but {} bus specs were given",
            y.nrows(),
            y.ncols(),
            n
        )));
    }
    let mut vm = vec![1.0; n];
    let mut va = vec![0.0; n];
    for (i, s) in specs.iter().enumerate() {
        match *s {
            BusSpec::Slack { v, angle } => {
                vm[i] = v;
                va[i] = angle;
            }
            BusSpec::Pv { v, .. } => vm[i] = v,
            BusSpec::Pq { .. } => {}
        }
    }
    // Unknown ordering: angles of all non-slack buses, then magnitudes of PQ buses.
    let ang_idx: Vec<usize> = (0..n).filter(|&i| !matches!(specs[i], BusSpec::Slack { .. })).collect();
    let mag_idx: Vec<usize> = (0..n).filter(|&i| matches!(specs[i], BusSpec::Pq { .. })).collect();
    let na = ang_idx.len();
    let m = na + mag_idx.len();

    let volts = |vm: &[f64], va: &[f64]| -> Vec<Complex64> {
        vm.iter().zip(va).map(|(&m, &a)| Complex64::from_polar(m, a)).collect()
    };

    let mut iterations = 0;
    loop {
        let v = volts(&vm, &va);
        let s = injections(y, &v);
        let mut f = DVector::<f64>::zeros(m);
        for (r, &i) in ang_idx.iter().enumerate() {
            let p = match specs[i] {
                BusSpec::Pv { p, .. } | BusSpec::Pq { p, .. } => p,
                BusSpec::Slack { .. } => unreachable!(),
            };
            f[r] = s[i].re - p;
        }
        for (r, &i) in mag_idx.iter().enumerate() {
            if let BusSpec::Pq { q, .. } = specs[i] {
                f[na + r] = s[i].im - q;
            }
        }
        let mismatch = f.iter().fold(0.0_f64, |a, b| a.max(b.abs()));
        if !mismatch.is_finite() {
            return Err(NetworkError::Diverged { iterations, mismatch });
        }
        if mismatch < opts.tol {
            return Ok(PowerFlowSolution { voltages: v, injections: s, iterations, max_mismatch: mismatch });
        }
        if iterations >= opts.max_iter {
            return Err(NetworkError::Diverged { iterations, mismatch });
        }

        // dS/dVa = j diag(V) conj(diag(I) - Y diag(V))
        // dS/dVm = diag(V) conj(Y diag(V/|V|)) + conj(diag(I)) diag(V/|V|)
        let vv = DVector::from_column_slice(&v);
        let ibus = y * &vv;
        let j = Complex64::new(0.0, 1.0);
        let ds_dva = |r: usize, c: usize| -> Complex64 {
            let mut term = -y[(r, c)] * v[c];
            if r == c {
                term += ibus[r];
            }
            j * v[r] * term.conj()
        };
        let ds_dvm = |r: usize, c: usize| -> Complex64 {
            let vn = v[c] / vm[c];
            let mut term = v[r] * (y[(r, c)] * vn).conj();
            if r == c {
                term += ibus[r].conj() * vn;
            }
            term
        };
        let mut jac = DMatrix::<f64>::zeros(m, m);
        for (r, &i) in ang_idx.iter().enumerate() {
            for (c, &k) in ang_idx.iter().enumerate() {
                jac[(r, c)] = ds_dva(i, k).re;
            }
            for (c, &k) in mag_idx.iter().enumerate() {
                jac[(r, na + c)] = ds_dvm(i, k).re;
            }
        }
        for (r, &i) in mag_idx.iter().enumerate() {
            for (c, &k) in ang_idx.iter().enumerate() {
                jac[(na + r, c)] = ds_dva(i, k).im;
            }
            for (c, &k) in mag_idx.iter().enumerate() {
                jac[(na + r, na + c)] = ds_dvm(i, k).im;
            }
        }
        let dx = jac.lu().solve(&(-f)).ok_or(NetworkError::SingularJacobian { iteration: iterations })?;
        for (r, &i) in ang_idx.iter().enumerate() {
            va[i] += dx[r];
        }
        for (r, &i) in mag_idx.iter().enumerate() {
            vm[i] += dx[na + r];
        }
        iterations += 1;
    }
}

/// Power flow with every non-slack bus treated as PQ. `injections[i]` is
/// the net (P, Q) at bus `i + 1`; the slack bus is held at `1.0 ∠ 0`.
pub fn solve_pq_flow(
    net: &NetworkModel,
    injections: &[(f64, f64)],
    slack: usize,
) -> Result<PowerFlowSolution, NetworkError> {
    let si = net.index(slack)?;
    if net.buses[si].kind != BusKind::Generator {
        return Err(NetworkError::InvalidData(format!("slack bus {slack} is not a generator bus")));
    }
    if injections.len() != net.n_bus() {
        return Err(NetworkError::InvalidData("one injection per bus required".into()));
    }
    let specs: Vec<BusSpec> = injections
        .iter()
        .enumerate()
        .map(|(i, &(p, q))| if i == si { BusSpec::Slack { v: 1.0, angle: 0.0 } } else { BusSpec::Pq { p, q } })
        .collect();
    solve_power_flow(&net.y_matrix, &specs, PowerFlowOptions::default())
}

/// Load step applied as a constant-admittance delta at `t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoadEvent {
    pub bus: usize,
    pub dp: f64,
    #[serde(default)]
    pub dq: f64,
    pub t: f64,
}

impl LoadEvent {
    /// Admittance delta, evaluated at nominal (1.0 pu) voltage.
    pub fn admittance_delta(&self) -> Complex64 {
        Complex64::new(self.dp, -self.dq)
    }
}

/// Constant-impedance loads plus a time-ordered list of step events.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadState {
    base: Vec<Complex64>,
    events: Vec<LoadEvent>,
}

impl LoadState {
    pub fn new(base: Vec<Complex64>, mut events: Vec<LoadEvent>) -> Result<Self, NetworkError> {
        for e in &events {
            if e.bus == 0 || e.bus > base.len() {
                return Err(NetworkError::UnknownBus(e.bus));
            }
            if !(e.t.is_finite() && e.dp.is_finite() && e.dq.is_finite()) {
                return Err(NetworkError::InvalidData("load event values must be finite".into()));
            }
        }
        events.sort_by(|a, b| a.t.total_cmp(&b.t));
        Ok(Self { base, events })
    }

    /// Converts the network's nominal loads into admittances at the solved
    /// operating-point voltages.
    pub fn from_operating_point(
        net: &NetworkModel,
        voltages: &[Complex64],
        events: Vec<LoadEvent>,
    ) -> Result<Self, NetworkError> {
        let mut base = vec![Complex64::new(0.0, 0.0); net.n_bus()];
        for l in &net.loads {
            let i = net.index(l.bus)?;
            let vm2 = voltages[i].norm_sqr();
            base[i] += Complex64::new(l.p, -l.q) / vm2;
        }
        Self::new(base, events)
    }

    pub fn events(&self) -> &[LoadEvent] {
        &self.events
    }

    pub fn base(&self) -> &[Complex64] {
        &self.base
    }

    /// Per-bus load admittance with every event at `t_event <= t` applied.
    pub fn admittances_at(&self, t: f64) -> Vec<Complex64> {
        let mut y = self.base.clone();
        for e in self.events.iter().take_while(|e| e.t <= t) {
            y[e.bus - 1] += e.admittance_delta();
        }
        y
    }

    pub fn without_events(&self) -> Self {
        Self { base: self.base.clone(), events: Vec::new() }
    }
}

/// How a device appears to the network during one algebraic solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DeviceInterface {
    /// Internal EMF behind a series impedance (grid-forming sources and
    /// synchronous machines).
    Thevenin { bus: usize, emf: Complex64, z: Complex64 },
    /// Bounded current injection (grid-following inverters).
    Norton { bus: usize, current: Complex64 },
}

impl DeviceInterface {
    pub fn bus(&self) -> usize {
        match *self {
            DeviceInterface::Thevenin { bus, .. } | DeviceInterface::Norton { bus, .. } => bus,
        }
    }

    fn port(&self) -> DevicePort {
        match *self {
            DeviceInterface::Thevenin { bus, z, .. } => DevicePort { bus, z: Some(z) },
            DeviceInterface::Norton { bus, .. } => DevicePort { bus, z: None },
        }
    }
}

/// Connection point and (for voltage sources) internal impedance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DevicePort {
    pub bus: usize,
    pub z: Option<Complex64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSolution {
    pub voltages: Vec<Complex64>,
    /// Complex power injected by each device into its bus.
    pub device_power: Vec<Complex64>,
    /// Device terminal voltage, in device order.
    pub terminal: Vec<Complex64>,
}

/// Factorized network for repeated solves with a fixed set of device
/// impedances; refactorizes only when the load admittances change.
#[derive(Debug, Clone)]
pub struct NetworkSolver {
    y_bus: DMatrix<Complex64>,
    ports: Vec<DevicePort>,
    lu: nalgebra::LU<Complex64, nalgebra::Dyn, nalgebra::Dyn>,
    loads: Vec<Complex64>,
}

impl NetworkSolver {
    pub fn new(net: &NetworkModel, ports: Vec<DevicePort>, loads: &[Complex64]) -> Result<Self, NetworkError> {
        for p in &ports {
            net.index(p.bus)?;
        }
        let y_bus = net.y_matrix.clone();
        let lu = Self::factor(&y_bus, &ports, loads)?;
        Ok(Self { y_bus, ports, lu, loads: loads.to_vec() })
    }

    fn factor(
        y_bus: &DMatrix<Complex64>,
        ports: &[DevicePort],
        loads: &[Complex64],
    ) -> Result<nalgebra::LU<Complex64, nalgebra::Dyn, nalgebra::Dyn>, NetworkError> {
        let mut y = y_bus.clone();
        for (i, yl) in loads.iter().enumerate() {
            y[(i, i)] += yl;
        }
        for p in ports {
            if let Some(z) = p.z {
                y[(p.bus - 1, p.bus - 1)] += z.inv();
            }
        }
        let lu = y.lu();
        let u = lu.u();
        for k in 0..u.nrows() {
            if u[(k, k)].norm() <= 1e-13 {
                return Err(NetworkError::SingularNetwork { bus: k + 1 });
            }
        }
        Ok(lu)
    }

    pub fn loads(&self) -> &[Complex64] {
        &self.loads
    }

    pub fn set_loads(&mut self, loads: &[Complex64]) -> Result<(), NetworkError> {
        if loads != self.loads.as_slice() {
            self.lu = Self::factor(&self.y_bus, &self.ports, loads)?;
            self.loads = loads.to_vec();
        }
        Ok(())
    }

    /// Solves for bus voltages given each port's EMF (Thevenin) or current
    /// (Norton), in port order.
    pub fn solve(&self, sources: &[DeviceInterface]) -> Result<NetworkSolution, NetworkError> {
        let n = self.y_bus.nrows();
        let mut rhs = DVector::from_element(n, Complex64::new(0.0, 0.0));
        for src in sources {
            match *src {
                DeviceInterface::Thevenin { bus, emf, z } => rhs[bus - 1] += emf / z,
                DeviceInterface::Norton { bus, current } => rhs[bus - 1] += current,
            }
        }
        let v = self.lu.solve(&rhs).ok_or(NetworkError::SingularNetwork { bus: 1 })?;
        let voltages: Vec<Complex64> = v.iter().copied().collect();
        let mut device_power = Vec::with_capacity(sources.len());
        let mut terminal = Vec::with_capacity(sources.len());
        for src in sources {
            let vt = voltages[src.bus() - 1];
            let i = match *src {
                DeviceInterface::Thevenin { emf, z, .. } => (emf - vt) / z,
                DeviceInterface::Norton { current, .. } => current,
            };
            device_power.push(vt * i.conj());
            terminal.push(vt);
        }
        Ok(NetworkSolution { voltages, device_power, terminal })
    }

    /// Complex power drawn by the constant-admittance loads at `v`.
    pub fn load_power(&self, v: &[Complex64]) -> Complex64 {
        v.iter().zip(&self.loads).map(|(vk, yl)| vk.norm_sqr() * yl.conj()).sum()
    }
}

/// One-shot algebraic solve at time `t`: applies the events active at `t`,
/// factorizes, and solves.
pub fn network_solve_step(
    net: &NetworkModel,
    loads: &LoadState,
    devices: &[DeviceInterface],
    t: f64,
) -> Result<NetworkSolution, NetworkError> {
    let ports = devices.iter().map(|d| d.port()).collect();
    let solver = NetworkSolver::new(net, ports, &loads.admittances_at(t))?;
    solver.solve(devices)
}

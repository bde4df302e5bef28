//! Acceptance checks, one line per criterion. Runs without the libtest
//! harness so the report is always printed; exits non-zero on any failure.

use dvpp_core::cli;
use dvpp_core::dvpp::{self, BandCorners, DeviceClass, Disaggregator, DvppSpec};
use dvpp_core::engine::{self, compute_metrics, Metrics, ModelSpec, Scenario, SimOutput, TraceKind};
use dvpp_core::lti::{LtiBlock, RationalTransfer};
use dvpp_core::network::{self, BusSpec, PowerFlowOptions};
use num_complex::Complex64;
use std::collections::BTreeMap;
use std::time::Instant;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: String) -> Check {
    if cond {
        Ok(msg)
    } else {
        Err(msg)
    }
}

// Polynomial in ascending powers evaluated at s.
fn poly(c: &[f64], s: Complex64) -> Complex64 {
    c.iter().rev().fold(Complex64::new(0.0, 0.0), |acc, &a| acc * s + a)
}

fn tf_at(tf: &RationalTransfer, w: f64) -> Complex64 {
    let s = Complex64::new(0.0, w);
    poly(tf.num(), s) / poly(tf.den(), s)
}

fn tf_dc(tf: &RationalTransfer) -> f64 {
    tf.num()[0] / tf.den()[0]
}

fn tf_hf(tf: &RationalTransfer) -> f64 {
    let (n, d) = (tf.num(), tf.den());
    let dn = n.iter().rposition(|&c| c != 0.0).unwrap_or(0);
    let dd = d.iter().rposition(|&c| c != 0.0).unwrap();
    if dn < dd {
        0.0
    } else {
        n[dn] / d[dd]
    }
}

fn grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|k| 10f64.powf(lo.log10() + (hi.log10() - lo.log10()) * k as f64 / (n - 1) as f64)).collect()
}

struct Runs {
    exp: BTreeMap<u32, (Scenario, SimOutput, Metrics)>,
}

impl Runs {
    fn new() -> Self {
        let exp = (1..=3)
            .map(|n| {
                let sc = engine::build_experiment(n).unwrap();
                let out = engine::run(&sc).unwrap_or_else(|e| panic!("experiment {n}: {e}"));
                let m = compute_metrics(&out, sc.first_event_time().unwrap()).unwrap();
                (n, (sc, out, m))
            })
            .collect();
        Self { exp }
    }

    fn get(&self, n: u32) -> &(Scenario, SimOutput, Metrics) {
        &self.exp[&n]
    }
}

fn builtin_specs() -> Vec<DvppSpec> {
    vec![dvpp::dvpp1_spec(), dvpp::dvpp2_spec()]
}

fn sum_to_one() -> Check {
    let w = grid(1e-3, 1e3, 61);
    let mut worst: f64 = 0.0;
    for spec in builtin_specs() {
        let a = dvpp::allocate(&spec).map_err(|e| e.to_string())?;
        for &wk in &w {
            let sp: Complex64 = a.members.iter().map(|m| tf_at(&m.gamma.phi_wp, wk)).sum();
            let sq: Complex64 = a.members.iter().map(|m| tf_at(&m.gamma.gamma_vq, wk)).sum();
            worst = worst.max((sp - 1.0).norm()).max((sq - 1.0).norm());
        }
    }
    ensure(worst < 1e-9, format!("max |sum - 1| = {worst:.2e} over 61 points, both specs, both channels"))
}

fn band_roles() -> Check {
    let mut worst_dc: f64 = 0.0;
    let mut worst_hf: f64 = 0.0;
    let mut finite_point: f64 = 0.0;
    for spec in builtin_specs() {
        let c: BandCorners = spec.bands_p;
        let bands = dvpp::class_bands(&[DeviceClass::Slow, DeviceClass::Mid, DeviceClass::Fast], c).map_err(|e| e.to_string())?;
        let expect = [(DeviceClass::Slow, 1.0, 0.0), (DeviceClass::Mid, 0.0, 0.0), (DeviceClass::Fast, 0.0, 1.0)];
        for (cls, dc, hf) in expect {
            let b = &bands[&cls];
            worst_dc = worst_dc.max((tf_dc(b) - dc).abs());
            worst_hf = worst_hf.max((tf_hf(b) - hf).abs());
            finite_point = finite_point.max((tf_at(b, 1e3 / c.t_fast) - hf).norm());
        }
    }
    ensure(
        worst_dc < 1e-12 && worst_hf < 1e-9,
        format!("dc error {worst_dc:.1e}, s->inf error {worst_hf:.1e}; at w = 1e3/t_fast the first-order roll-off leaves {finite_point:.1e}"),
    )
}

fn equilibrium_hold() -> Check {
    let mut worst: f64 = 0.0;
    for n in 1..=3 {
        let mut sc = engine::build_experiment(n).unwrap();
        sc.events.clear();
        sc.solver.t_end = 10.0;
        let out = engine::run(&sc).map_err(|e| e.to_string())?;
        for tr in out.devices() {
            for f in &tr.f_hz {
                worst = worst.max((f / out.f_nom - 1.0).abs());
            }
        }
    }
    ensure(worst < 1e-6, format!("max |f/f_nom - 1| = {worst:.2e} pu over 10 s, experiments 1-3"))
}

fn droop_steady_state(r: &Runs) -> Check {
    let (sc, out, m) = r.get(1);
    let s_base = 100.0;
    let mut beta = 0.0;
    for d in &sc.devices {
        if let ModelSpec::Sg(p) = &d.model {
            beta += d.rating_mva / s_base / p.r_gov.unwrap();
        }
    }
    let n = out.t.len() - 1;
    let dp: f64 = out.devices().map(|t| t.dp[n]).sum();
    let oracle = -dp / beta * out.f_nom;
    let rel = (m.steady_state_dev_hz - oracle).abs() / oracle.abs();
    ensure(rel < 0.01, format!("df_ss = {:.5} Hz, oracle {:.5} Hz (dP = {dp:.5} pu), error {:.3}%", m.steady_state_dev_hz, oracle, rel * 100.0))
}

fn coherence(r: &Runs) -> Check {
    let c = r.get(1).2.coherence_hz;
    ensure(c < 0.05, format!("experiment 1 spread {c:.4} Hz after t_event + 2 s"))
}

fn banded_relay(r: &Runs) -> Check {
    let (_, out, m) = r.get(2);
    let order_ok = m.relay_order == ["dvpp1.sc", "dvpp1.battery", "dvpp1.hydro"];
    let n = out.t.len() - 1;
    let hydro = out.trace("dvpp1.hydro").unwrap().dp[n];
    let total: f64 = out.members().filter(|t| t.parent.as_deref() == Some("dvpp1")).map(|t| t.dp[n]).sum();
    let share = hydro / total;
    let sc = out.trace("dvpp1.sc").unwrap();
    let peak = m.peak_dp["dvpp1.sc"];
    let k6 = out.index_at(6.0) + 1;
    let energy: f64 = sc.dp[k6..].windows(2).map(|w| 0.5 * (w[0].abs() + w[1].abs()) * out.dt).sum();
    let ratio = energy / (peak * 1.0);
    ensure(
        order_ok && share >= 0.95 && ratio < 0.05,
        format!("order {:?}, hydro share {:.2}%, SC tail energy {:.2e} of peak x 1 s", m.relay_order, share * 100.0, ratio),
    )
}

fn nadir_improvement(r: &Runs) -> Check {
    let (m1, m2) = (&r.get(1).2, &r.get(2).2);
    ensure(
        m2.nadir_hz > m1.nadir_hz && m2.recovery_time_s < m1.recovery_time_s,
        format!("nadir {:.4} -> {:.4} Hz, recovery {:.3} -> {:.3} s", m1.nadir_hz, m2.nadir_hz, m1.recovery_time_s, m2.recovery_time_s),
    )
}

fn rocof_attenuation(r: &Runs) -> Check {
    let (m2, m3) = (&r.get(2).2, &r.get(3).2);
    let base = &r.get(3).0;
    let ModelSpec::Dvpp { spec, .. } = &base.devices.iter().find(|d| d.id == "dvpp2").unwrap().model else { unreachable!() };
    let dvpp::TargetShape::Vsg { j: j0, .. } = spec.target.p else { return Err("DVPP2 target is not VSG-shaped".into()) };
    let js = [j0 / 2.0, j0, 2.0 * j0];
    let rows = cli::sweep(base, "j", &js, None).map_err(|e| e.to_string())?;
    let rocofs: Vec<f64> = rows.iter().map(|r| r.max_rocof_hz_per_s.unwrap_or(f64::NAN)).collect();
    let decreasing = rocofs.windows(2).all(|w| w[1] < w[0]);
    ensure(
        m3.max_rocof_hz_per_s < m2.max_rocof_hz_per_s && decreasing,
        format!("ROCOF exp2 {:.4} -> exp3 {:.4} Hz/s; J {:?} -> {:.4?}", m2.max_rocof_hz_per_s, m3.max_rocof_hz_per_s, js, rocofs),
    )
}

// Single-filter response to the recorded channel input, replaying the
// pre-event sample where the plant applied a jump.
fn single_filter(tf: &RationalTransfer, u: &[f64], pre: &[(usize, f64)], dt: f64) -> Vec<f64> {
    let mut b = LtiBlock::new(tf, dt).unwrap();
    let mut y = Vec::with_capacity(u.len());
    y.push(b.set_current_input(u[0]).unwrap());
    for k in 1..u.len() {
        match pre.iter().find(|(i, _)| *i == k) {
            Some(&(_, before)) => {
                b.step(before).unwrap();
                y.push(b.set_current_input(u[k]).unwrap());
            }
            None => y.push(b.step(u[k]).unwrap()),
        }
    }
    y
}

fn aggregate_tracking(r: &Runs) -> Check {
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for n in [2, 3] {
        let out = &r.get(n).1;
        for ch in &out.channels {
            let members: Vec<_> = out.members().filter(|t| t.parent.as_deref() == Some(ch.id.as_str())).collect();
            let pre_w: Vec<(usize, f64)> = ch.pre_event.iter().map(|&(k, w, _)| (k, w)).collect();
            let pre_v: Vec<(usize, f64)> = ch.pre_event.iter().map(|&(k, _, v)| (k, v)).collect();
            let yp = single_filter(&ch.allocation.xi_target.phi_wp.scale(ch.scale), &ch.d_omega, &pre_w, out.dt);
            let yq = single_filter(&ch.allocation.xi_target.gamma_vq.scale(ch.scale), &ch.d_v, &pre_v, out.dt);
            for k in 0..out.t.len() {
                let sp: f64 = members.iter().map(|t| t.dp[k]).sum();
                let sq: f64 = members.iter().map(|t| t.dq[k]).sum();
                worst = worst.max((sp - yp[k]).abs()).max((sq - yq[k]).abs());
            }
            count += 1;
        }
    }
    ensure(count == 3 && worst < 1e-6, format!("max |sum of members - target filter| = {worst:.2e} pu over {count} plants"))
}

fn ledger_closure(r: &Runs) -> Check {
    let mut worst: f64 = 0.0;
    for n in 1..=3 {
        let rep = dvpp::check_power_ledger(&r.get(n).1.ledger, 1e-6).map_err(|e| e.to_string())?;
        if !rep.pass {
            return Err(format!("experiment {n} residual {:.2e}", rep.max_residual_p.max(rep.max_residual_q)));
        }
        worst = worst.max(rep.max_residual_p).max(rep.max_residual_q);
    }
    ensure(true, format!("max residual {worst:.2e} pu, experiments 1-3"))
}

fn q_feasibility(r: &Runs) -> Check {
    let (sc, out, _) = r.get(3);
    let s_base = 100.0;
    let mut worst_ratio: f64 = 0.0;
    for d in &sc.devices {
        if let ModelSpec::Dvpp { spec, .. } = &d.model {
            for m in &spec.members {
                let tr = out.trace(&format!("{}.{}", d.id, m.id)).unwrap();
                let peak = tr.dq.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
                worst_ratio = worst_ratio.max(peak / (m.capacity_mva / s_base));
            }
        }
    }
    // Channel separation: a voltage input must not move active power and
    // vice versa, bit for bit.
    let alloc = dvpp::allocate(&dvpp::dvpp2_spec()).unwrap();
    let mut d = Disaggregator::new(&alloc, 1e-3, 0.6).unwrap();
    let mut cross: f64 = 0.0;
    for k in 0..2000 {
        d.step(0.0, if k > 10 { 0.01 } else { 0.0 }).unwrap();
        cross = cross.max(d.outputs_p().iter().fold(0.0, |a, v| a.max(v.abs())));
    }
    let mut d = Disaggregator::new(&alloc, 1e-3, 0.6).unwrap();
    for k in 0..2000 {
        d.step(if k > 10 { 0.001 } else { 0.0 }, 0.0).unwrap();
        cross = cross.max(d.outputs_q().iter().fold(0.0, |a, v| a.max(v.abs())));
    }
    let member_flags = out.flags.iter().filter(|f| out.trace(&f.id).is_some_and(|t| t.kind == TraceKind::Member)).count();
    ensure(
        out.flags.is_empty() && worst_ratio <= 1.0 && cross == 0.0,
        format!("{} flags ({member_flags} on members), peak |dQ| {:.1}% of member capacity, cross-channel {cross:e}", out.flags.len(), worst_ratio * 100.0),
    )
}

fn numerics(r: &Runs) -> Check {
    let mut df: f64 = 0.0;
    let mut dp: f64 = 0.0;
    for n in 1..=3 {
        let (sc, _, a) = r.get(n);
        let mut fine = sc.clone();
        fine.solver.dt /= 2.0;
        let out = engine::run(&fine).map_err(|e| e.to_string())?;
        let b = compute_metrics(&out, fine.first_event_time().unwrap()).unwrap();
        for (x, y) in [
            (a.nadir_hz, b.nadir_hz),
            (a.max_rocof_hz_per_s, b.max_rocof_hz_per_s),
            (a.coherence_hz, b.coherence_hz),
            (a.steady_state_dev_hz, b.steady_state_dev_hz),
        ] {
            df = df.max((x - y).abs());
        }
        for (x, y) in [(&a.peak_dp, &b.peak_dp), (&a.final_dp, &b.final_dp)] {
            for (k, v) in x {
                dp = dp.max((v - y[k]).abs());
            }
        }
    }

    // First-order lag and band-pass step responses against closed forms.
    let dt = 1e-3;
    let (tau, ts, tf) = (0.5, 5.0, 0.05);
    let mut lp = LtiBlock::new(&RationalTransfer::lowpass(tau), dt).unwrap();
    let bp_tf = RationalTransfer::new(vec![0.0, ts - tf], vec![1.0, ts + tf, ts * tf]).unwrap();
    let mut bp = LtiBlock::new(&bp_tf, dt).unwrap();
    lp.set_current_input(1.0).unwrap();
    bp.set_current_input(1.0).unwrap();
    let mut lti_err: f64 = 0.0;
    for k in 1..=5000 {
        let t = k as f64 * dt;
        let y1 = lp.step(1.0).unwrap();
        let y2 = bp.step(1.0).unwrap();
        lti_err = lti_err.max((y1 - (1.0 - (-t / tau).exp())).abs());
        lti_err = lti_err.max((y2 - ((-t / ts).exp() - (-t / tf).exp())).abs());
    }

    // Power-flow mismatch recomputed from the solved voltages.
    let net = network::build_nine_bus();
    let specs = net.dispatch_specs().unwrap();
    let pf = network::solve_power_flow(&net.y_matrix, &specs, PowerFlowOptions::default()).map_err(|e| e.to_string())?;
    let mut mis: f64 = 0.0;
    for (i, spec) in specs.iter().enumerate() {
        let ii: Complex64 = (0..net.n_bus()).map(|j| net.y_matrix[(i, j)] * pf.voltages[j]).sum();
        let s = pf.voltages[i] * ii.conj();
        match *spec {
            BusSpec::Slack { .. } => {}
            BusSpec::Pv { p, v } => mis = mis.max((s.re - p).abs()).max((pf.voltages[i].norm() - v).abs()),
            BusSpec::Pq { p, q } => mis = mis.max((s.re - p).abs()).max((s.im - q).abs()),
        }
    }
    ensure(
        df < 1e-3 && dp < 1e-4 && lti_err < 1e-4 && mis < 1e-8,
        format!("dt/2 changes: freq {df:.1e} Hz, power {dp:.1e} pu; LTI step error {lti_err:.1e}; power-flow mismatch {mis:.1e} pu"),
    )
}

fn main() {
    let start = Instant::now();
    let runs = Runs::new();
    let checks: Vec<(&str, Box<dyn Fn() -> Check + '_>)> = vec![
        ("sum-to-one", Box::new(sum_to_one)),
        ("band roles", Box::new(band_roles)),
        ("equilibrium hold", Box::new(equilibrium_hold)),
        ("droop steady state", Box::new(|| droop_steady_state(&runs))),
        ("frequency coherence", Box::new(|| coherence(&runs))),
        ("banded relay", Box::new(|| banded_relay(&runs))),
        ("nadir improvement", Box::new(|| nadir_improvement(&runs))),
        ("ROCOF attenuation", Box::new(|| rocof_attenuation(&runs))),
        ("aggregate tracking", Box::new(|| aggregate_tracking(&runs))),
        ("ledger closure", Box::new(|| ledger_closure(&runs))),
        ("Q-channel feasibility", Box::new(|| q_feasibility(&runs))),
        ("numerics", Box::new(|| numerics(&runs))),
    ];
    let mut failed = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        let res = std::panic::catch_unwind(std::panic::AssertUnwindSafe(check)).unwrap_or_else(|_| Err("panicked".into()));
        match res {
            Ok(msg) => println!("criterion {:>2} PASS  {name}: {msg}", i + 1),
            Err(msg) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {msg}", i + 1);
            }
        }
    }
    println!("acceptance: {} of {} passed in {:.1} s", checks.len() - failed, checks.len(), start.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}

//! Time-domain scenarios on the two-bus testbed.
//!
//! Each step solves the network for the current relay state (the algebraic
//! part) and then advances the relay temperature with RK4, re-solving the
//! network inside every stage. The result is a semi-explicit index-1 DAE
//! integrated at `dt_sim`, with PMU channels decimated to `pmu_rate`.

use std::io::{Read, Write};
use std::path::Path;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{FidvrError, Result};
use crate::loadmodel::{rk4_theta, ComponentConductances, CompositeLoad, CompositeLoadSpec, ThermalRelayState};
use crate::monitor::{MeasurementRow, MeasurementSample};
use crate::netsolve::{
    power_balance, solve_with_thevenin, substation_quantities, NetworkSpec, OperatingCondition, SolverOptions,
};
use crate::SCHEMA_VERSION;

/// Plateau window relative to stall onset, seconds.
pub const PLATEAU_WINDOW: (f64, f64) = (0.5, 1.5);
/// Settling band as a fraction of the plateau rise.
pub const EPS_FRACTION: f64 = 0.02;
/// Trailing window used for the settled conductance, seconds.
pub const FINAL_WINDOW: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OscillationSpec {
    /// Fraction of `E`.
    pub amplitude: f64,
    pub frequency: f64,
    /// Exponential decay rate, 1/s.
    pub damping: f64,
    #[serde(default)]
    pub phase: f64,
}

/// Smart-thermostat command: at `tau0` seconds after stall onset the connected
/// multiplier drops from 1 to `gamma`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Actuation {
    pub tau0: f64,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub schema_version: u32,
    pub net: NetworkSpec,
    pub load: CompositeLoadSpec,
    #[serde(default = "default_t_end")]
    pub t_end: f64,
    #[serde(default = "default_dt_sim")]
    pub dt_sim: f64,
    #[serde(default = "default_pmu_rate")]
    pub pmu_rate: f64,
    #[serde(default)]
    pub oscillation: Option<OscillationSpec>,
    #[serde(default)]
    pub actuation: Option<Actuation>,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_t_end() -> f64 {
    30.0
}
fn default_dt_sim() -> f64 {
    1e-3
}
fn default_pmu_rate() -> f64 {
    60.0
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            schema_version: SCHEMA_VERSION,
            net: NetworkSpec::default(),
            load: CompositeLoadSpec::default(),
            t_end: default_t_end(),
            dt_sim: default_dt_sim(),
            pmu_rate: default_pmu_rate(),
            oscillation: None,
            actuation: None,
            noise_sigma: 0.0,
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: ScenarioConfig = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("scenario config is always representable in TOML")
    }

    /// Copy with motor-D share `f_md`, taking the difference out of the static load.
    pub fn with_f_md(&self, f_md: f64) -> Result<Self> {
        let mut cfg = self.clone();
        cfg.load.f_st = self.load.f_st - (f_md - self.load.f_md);
        cfg.load.f_md = f_md;
        if cfg.load.f_st < -1e-12 {
            return Err(FidvrError::invalid(
                "load.f_md",
                format!("f_md = {f_md} leaves no static load to absorb the change"),
            ));
        }
        cfg.load.f_st = cfg.load.f_st.max(0.0);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(FidvrError::invalid(
                "schema_version",
                format!("expected {SCHEMA_VERSION}, got {}", self.schema_version),
            ));
        }
        self.net.validate()?;
        self.load.validate()?;
        if !(self.dt_sim > 0.0) {
            return Err(FidvrError::invalid("dt_sim", "must be positive"));
        }
        if !(self.pmu_rate > 0.0) || self.pmu_rate * self.dt_sim > 1.0 + 1e-12 {
            return Err(FidvrError::invalid(
                "pmu_rate",
                "must be positive and no faster than 1/dt_sim",
            ));
        }
        let t_clear = self.net.fault.map(|f| f.t_clear()).unwrap_or(0.0);
        if !(self.t_end > t_clear) {
            return Err(FidvrError::invalid("t_end", "must be after the fault is cleared"));
        }
        if let Some(o) = &self.oscillation {
            if !(0.0..=0.1).contains(&o.amplitude) {
                return Err(FidvrError::invalid("oscillation.amplitude", "must lie in [0, 0.1]"));
            }
            if !(o.frequency >= 0.0) || !(o.damping >= 0.0) {
                return Err(FidvrError::invalid(
                    "oscillation",
                    "frequency and damping must be non-negative",
                ));
            }
        }
        if let Some(a) = &self.actuation {
            if !(a.tau0 >= 0.0) {
                return Err(FidvrError::invalid("actuation.tau0", "must be non-negative"));
            }
            if !(0.0..=1.0).contains(&a.gamma) {
                return Err(FidvrError::invalid("actuation.gamma", "must lie in [0, 1]"));
            }
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(FidvrError::invalid("noise_sigma", "must be non-negative"));
        }
        Ok(())
    }

    fn oscillation_start(&self) -> f64 {
        self.net.fault.map(|f| f.t_clear()).unwrap_or(0.0)
    }
}

/// Source magnitude at time `t`, including the post-clearing oscillation if configured.
pub fn source_voltage(config: &ScenarioConfig, t: f64) -> f64 {
    let e0 = config.net.e_source;
    let Some(osc) = config.oscillation else {
        return e0;
    };
    let t0 = config.oscillation_start();
    if t < t0 {
        return e0;
    }
    let tau = t - t0;
    let decay = if tau == 0.0 { 1.0 } else { (-osc.damping * tau).exp() };
    e0 * (1.0 + osc.amplitude * decay * (2.0 * std::f64::consts::PI * osc.frequency * tau + osc.phase).sin())
}

/// Ground-truth state at one simulation step (internal-bus quantities unless noted).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruthRow {
    pub t: f64,
    pub v_i: Complex64,
    pub v0: Complex64,
    pub i: Complex64,
    pub p: f64,
    pub q: f64,
    pub g_load: f64,
    pub b_load: f64,
    pub theta: f64,
    pub f_th: f64,
    pub gamma_c: f64,
    pub stalled: bool,
    pub fault_on: bool,
    pub components: ComponentConductances,
    pub balance_residual: f64,
}

#[derive(Debug, Clone)]
pub struct TrajectoryRecord {
    pub dt: f64,
    pub truth: Vec<TruthRow>,
    pub measurements: Vec<MeasurementSample>,
    pub stall_onset: Option<f64>,
    pub fault_clear: Option<f64>,
    pub actuation_time: Option<f64>,
    /// Internal-bus conductance just before the fault.
    pub baseline_g: f64,
    pub pre_fault_voltage: f64,
}

impl TrajectoryRecord {
    pub fn times(&self) -> Vec<f64> {
        self.truth.iter().map(|r| r.t).collect()
    }

    pub fn conductance(&self) -> Vec<f64> {
        self.truth.iter().map(|r| r.g_load).collect()
    }

    pub fn final_voltage(&self) -> f64 {
        self.truth.last().map(|r| r.v_i.norm()).unwrap_or(f64::NAN)
    }

    /// Time the relay spent between `theta1` and full disconnection, from the truth trace.
    pub fn relay_trip_duration(&self) -> Option<f64> {
        let start = self.truth.iter().find(|r| r.stalled && r.f_th < 1.0)?;
        let end = self.truth.iter().find(|r| r.stalled && r.f_th <= 0.0)?;
        Some(end.t - start.t)
    }

    pub fn actual_times(&self) -> Result<ActualTimes> {
        let onset = self
            .stall_onset
            .ok_or_else(|| FidvrError::NotFidvr("no motor stall occurred".into()))?;
        extract_actual_times(&self.times(), &self.conductance(), self.baseline_g, onset)
    }
}

fn step_of(t: f64, dt: f64) -> usize {
    (t / dt).round().max(0.0) as usize
}

/// Runs one scenario end to end.
pub fn run_scenario(config: &ScenarioConfig) -> Result<TrajectoryRecord> {
    config.validate()?;
    let dt = config.dt_sim;
    let n_end = step_of(config.t_end, dt);
    let fault_steps = config
        .net
        .fault
        .filter(|f| f.duration > 0.0)
        .map(|f| (step_of(f.t_apply, dt), step_of(f.t_clear(), dt)));
    let dwell_steps = ((config.load.t_stall_dwell / dt) - 1e-9).ceil().max(1.0) as usize;
    let opts = SolverOptions::default();
    let spec = &config.load;

    let mut relay = ThermalRelayState::running();
    let mut gamma_c = 1.0;
    let mut v = Complex64::new(config.net.e_source, 0.0);
    let mut v_prefault = v;
    let mut below = 0usize;
    let mut stall_onset = None;
    let mut actuation_time = None;
    let mut baseline_g = f64::NAN;
    let mut pre_fault_voltage = f64::NAN;
    let mut truth = Vec::with_capacity(n_end + 1);

    for n in 0..=n_end {
        let t = n as f64 * dt;
        if let (Some(act), Some(onset)) = (config.actuation, stall_onset) {
            if actuation_time.is_none() && t >= onset + act.tau0 - 1e-9 {
                gamma_c = act.gamma;
                actuation_time = Some(t);
            }
        }
        let fault_on = fault_steps.is_some_and(|(a, b)| n >= a && n < b);
        let before_fault = fault_steps.is_none_or(|(a, _)| n < a);
        let cond = OperatingCondition {
            e_source: source_voltage(config, t),
            fault_on,
        };
        // The faulted network sits on the low-voltage branch; restart from the
        // pre-fault solution when the fault clears.
        let guess = if fault_steps.is_some_and(|(_, b)| n == b) {
            v_prefault
        } else {
            v
        };
        let th = config.net.thevenin(cond)?;
        let load = CompositeLoad::new(spec, relay, gamma_c);
        let sol = solve_with_thevenin(&th, &load, guess, &opts)?;
        v = sol.v_i;
        if n == 0 && v.norm() < spec.v_stall_threshold {
            return Err(FidvrError::VoltageCollapse {
                iterations: sol.iterations,
                last_v_mag: v.norm(),
            });
        }
        if before_fault {
            v_prefault = v;
        }

        let (v0, i) = substation_quantities(v, &config.net, sol.y_load);
        let s = v * i.conj();
        let pb = power_balance(&config.net, cond, v, sol.y_load);
        let row = TruthRow {
            t,
            v_i: v,
            v0,
            i,
            p: s.re,
            q: s.im,
            g_load: sol.y_load.g_load(),
            b_load: sol.y_load.b_load(),
            theta: relay.theta,
            f_th: relay.f_th,
            gamma_c,
            stalled: relay.is_stalled(),
            fault_on,
            components: load.components(v.norm()),
            balance_residual: pb.residual,
        };
        if before_fault {
            baseline_g = row.g_load;
            pre_fault_voltage = v.norm();
        }
        truth.push(row);
        if n == n_end {
            break;
        }

        if relay.is_stalled() {
            let theta = rk4_theta(relay.theta, dt, spec.relay.t_th, |offset, th_stage| {
                let cond = OperatingCondition {
                    e_source: source_voltage(config, t + offset),
                    fault_on,
                };
                let th = config.net.thevenin(cond)?;
                let stage = CompositeLoad::new(spec, ThermalRelayState::with_theta(th_stage, &spec.relay), gamma_c);
                let sol = solve_with_thevenin(&th, &stage, v, &opts)?;
                Ok(sol.v_i.norm_sqr() * spec.g_stall_m)
            })?;
            relay = ThermalRelayState::with_theta(theta.max(0.0), &spec.relay);
        } else if spec.f_md > 0.0 {
            if v.norm() < spec.v_stall_threshold {
                below += 1;
            } else {
                below = 0;
            }
            if below >= dwell_steps {
                relay = ThermalRelayState::stalled();
                stall_onset = Some(t + dt);
                log::debug!("motor-D stalled at t = {:.3} s", t + dt);
            }
        }
    }

    let measurements = sample_pmu(config, &truth);
    Ok(TrajectoryRecord {
        dt,
        truth,
        measurements,
        stall_onset,
        fault_clear: config.net.fault.filter(|f| f.duration > 0.0).map(|f| f.t_clear()),
        actuation_time,
        baseline_g,
        pre_fault_voltage,
    })
}

fn sample_pmu(config: &ScenarioConfig, truth: &[TruthRow]) -> Vec<MeasurementSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let noise = (config.noise_sigma > 0.0).then(|| Normal::new(0.0, config.noise_sigma).expect("sigma validated"));
    let mut out = Vec::new();
    for k in 0.. {
        let t = k as f64 / config.pmu_rate;
        let n = step_of(t, config.dt_sim);
        let Some(row) = truth.get(n) else { break };
        let (mut v0, mut i) = (row.v0, row.i);
        if let Some(dist) = &noise {
            v0 = Complex64::from_polar(v0.norm() + dist.sample(&mut rng), v0.arg());
            i = Complex64::from_polar(i.norm() + dist.sample(&mut rng), i.arg());
        }
        out.push(MeasurementSample { t, v0, i });
    }
    out
}

/// Times extracted from a conductance trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActualTimes {
    pub onset: f64,
    pub baseline_g: f64,
    pub plateau_g: f64,
    pub delta_g: f64,
    pub final_g: f64,
    /// Onset to the start of the conductance decline.
    pub t1: f64,
    /// Decline start to settling at the final value.
    pub t2: f64,
    pub total: f64,
}

fn window_mean(ts: &[f64], gs: &[f64], from: f64, to: f64) -> Option<f64> {
    let (sum, n) = ts
        .iter()
        .zip(gs)
        .filter(|(t, _)| **t >= from - 1e-9 && **t <= to + 1e-9)
        .fold((0.0, 0usize), |(s, n), (_, g)| (s + g, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn first_crossing_below(ts: &[f64], gs: &[f64], start: usize, level: f64) -> Option<(usize, f64)> {
    let k = (start..gs.len()).find(|&k| gs[k] < level)?;
    if k == start {
        return Some((k, ts[k]));
    }
    let frac = (gs[k - 1] - level) / (gs[k - 1] - gs[k]);
    Some((k, ts[k - 1] + frac * (ts[k] - ts[k - 1])))
}

/// Time after which the trace stays within `band` of `target`.
fn settle_time(ts: &[f64], gs: &[f64], start: usize, target: f64, band: f64) -> Option<f64> {
    let dev = |k: usize| (gs[k] - target).abs();
    let last_out = (start..gs.len()).rev().find(|&k| dev(k) > band)?;
    if last_out + 1 >= gs.len() {
        return None;
    }
    let (d0, d1) = (dev(last_out), dev(last_out + 1));
    let frac = (d0 - band) / (d0 - d1);
    Some(ts[last_out] + frac * (ts[last_out + 1] - ts[last_out]))
}

/// Splits a conductance trace into the flat stall plateau (`t1`) and the
/// relay-driven decline (`t2`).
///
/// Levels are crossed with linear interpolation; the decline start and the
/// settling instant are back-projected from the `eps` and `2 eps` crossings so
/// a straight ramp yields its exact corner times.
pub fn extract_actual_times(ts: &[f64], gs: &[f64], baseline: f64, onset: f64) -> Result<ActualTimes> {
    if ts.len() != gs.len() || ts.is_empty() {
        return Err(FidvrError::InsufficientSamples("empty or mismatched trace".into()));
    }
    let (p0, p1) = (onset + PLATEAU_WINDOW.0, onset + PLATEAU_WINDOW.1);
    if *ts.last().unwrap() < p1 + FINAL_WINDOW {
        return Err(FidvrError::InsufficientSamples(
            "trace ends before the plateau window".into(),
        ));
    }
    let plateau = window_mean(ts, gs, p0, p1)
        .ok_or_else(|| FidvrError::InsufficientSamples("no samples in the plateau window".into()))?;
    let rise = plateau - baseline;
    if !(rise > 0.01 * baseline.abs().max(1e-9)) {
        return Err(FidvrError::NotFidvr(format!(
            "no conductance plateau above baseline (rise {rise:.4} pu)"
        )));
    }
    let eps = EPS_FRACTION * rise;

    let t_last = *ts.last().unwrap();
    let final_from = t_last - FINAL_WINDOW;
    let tail: Vec<f64> = ts
        .iter()
        .zip(gs)
        .filter(|(t, _)| **t >= final_from)
        .map(|(_, g)| *g)
        .collect();
    let final_g = tail.iter().sum::<f64>() / tail.len() as f64;
    let spread =
        tail.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - tail.iter().cloned().fold(f64::INFINITY, f64::min);
    if spread > eps {
        return Err(FidvrError::NotRecovered(format!(
            "conductance still moving at the end of the trace (spread {spread:.4} pu)"
        )));
    }

    let start = ts.partition_point(|t| *t < p0);
    let not_declining = || FidvrError::NotRecovered("conductance never leaves the plateau".into());
    let (ka, t_a) = first_crossing_below(ts, gs, start, plateau - eps).ok_or_else(not_declining)?;
    // Resume one sample early so a drop inside a single interval is still interpolated.
    let from = ka.saturating_sub(1).max(start);
    let (_, t_b) = first_crossing_below(ts, gs, from, plateau - 2.0 * eps).ok_or_else(not_declining)?;
    let decline = (2.0 * t_a - t_b).max(onset);

    let not_settled = || FidvrError::NotRecovered("conductance never settles".into());
    let t_d = settle_time(ts, gs, from, final_g, eps).ok_or_else(not_settled)?;
    let t_c = settle_time(ts, gs, from, final_g, 2.0 * eps).ok_or_else(not_settled)?;
    let end = (2.0 * t_d - t_c).max(decline);

    Ok(ActualTimes {
        onset,
        baseline_g: baseline,
        plateau_g: plateau,
        delta_g: rise,
        final_g,
        t1: decline - onset,
        t2: end - decline,
        total: end - onset,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecoveryOutcome {
    NormalRecovery,
    DelayedRecovery,
    NotRecovered,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub schema_version: u32,
    pub outcome: RecoveryOutcome,
    pub stall_onset: Option<f64>,
    pub fault_clear: Option<f64>,
    pub actuation_time: Option<f64>,
    pub baseline_g: f64,
    pub plateau_delta_g: Option<f64>,
    pub t1_actual: Option<f64>,
    pub t2_actual: Option<f64>,
    pub total_actual: Option<f64>,
    pub pre_fault_voltage: f64,
    pub final_voltage: f64,
    pub max_balance_residual: f64,
}

pub fn scenario_report(record: &TrajectoryRecord) -> ScenarioReport {
    let times = record.stall_onset.map(|_| record.actual_times());
    let (outcome, times) = match times {
        None => (RecoveryOutcome::NormalRecovery, None),
        Some(Ok(t)) => (RecoveryOutcome::DelayedRecovery, Some(t)),
        Some(Err(e)) => {
            log::warn!("time extraction failed: {e}");
            (RecoveryOutcome::NotRecovered, None)
        }
    };
    ScenarioReport {
        schema_version: SCHEMA_VERSION,
        outcome,
        stall_onset: record.stall_onset,
        fault_clear: record.fault_clear,
        actuation_time: record.actuation_time,
        baseline_g: record.baseline_g,
        plateau_delta_g: times.map(|t| t.delta_g),
        t1_actual: times.map(|t| t.t1),
        t2_actual: times.map(|t| t.t2),
        total_actual: times.map(|t| t.total),
        pre_fault_voltage: record.pre_fault_voltage,
        final_voltage: record.final_voltage(),
        max_balance_residual: record.truth.iter().map(|r| r.balance_residual).fold(0.0, f64::max),
    }
}

pub fn write_measurements_csv<W: Write>(writer: W, samples: &[MeasurementSample]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for s in samples {
        w.serialize(MeasurementRow::from(s))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_measurements_csv<R: Read>(reader: R) -> Result<Vec<MeasurementSample>> {
    measurement_stream(reader)?.collect()
}

/// Row-by-row reader for measurement CSV, checking the header up front.
pub fn measurement_stream<R: Read>(reader: R) -> Result<impl Iterator<Item = Result<MeasurementSample>>> {
    let mut r = csv::Reader::from_reader(reader);
    let expected = MeasurementRow::HEADER;
    let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
    if header != expected {
        return Err(FidvrError::invalid(
            "measurements header",
            format!("expected `{}`, got `{}`", expected.join(","), header.join(",")),
        ));
    }
    Ok(r.into_deserialize::<MeasurementRow>()
        .map(|row| Ok(MeasurementSample::from(row?))))
}

#[derive(Serialize)]
struct TruthCsvRow {
    t: f64,
    v_i_mag: f64,
    v_i_ang: f64,
    v0_mag: f64,
    v0_ang: f64,
    i_mag: f64,
    i_ang: f64,
    p: f64,
    q: f64,
    g_load: f64,
    b_load: f64,
    theta: f64,
    f_th: f64,
    gamma_c: f64,
    stalled: u8,
    g_motor_a: f64,
    g_motor_b: f64,
    g_motor_c: f64,
    g_elec: f64,
    g_static: f64,
    g_motor_d: f64,
}

pub fn write_truth_csv<W: Write>(writer: W, rows: &[TruthRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(TruthCsvRow {
            t: r.t,
            v_i_mag: r.v_i.norm(),
            v_i_ang: r.v_i.arg(),
            v0_mag: r.v0.norm(),
            v0_ang: r.v0.arg(),
            i_mag: r.i.norm(),
            i_ang: r.i.arg(),
            p: r.p,
            q: r.q,
            g_load: r.g_load,
            b_load: r.b_load,
            theta: r.theta,
            f_th: r.f_th,
            gamma_c: r.gamma_c,
            stalled: r.stalled as u8,
            g_motor_a: r.components.motor_a,
            g_motor_b: r.components.motor_b,
            g_motor_c: r.components.motor_c,
            g_elec: r.components.elec,
            g_static: r.components.static_load,
            g_motor_d: r.components.motor_d,
        })?;
    }
    w.flush()?;
    Ok(())
}

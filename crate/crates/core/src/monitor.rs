//! Measurement-side FIDVR engine.
//!
//! Works from substation phasors only. Internal-bus quantities are derived by
//! removing the feeder drop, the stall admittance is backed out of the
//! post-fault conductance using the utility's load composition, and the
//! thermal-relay timings are predicted in closed form.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{FidvrError, Result};
use crate::loadmodel::{Admittance, CompositeLoadSpec, ThermalRelayParams, V_FLOOR};
use crate::netsolve::IDEAL_BRANCH;
use crate::SCHEMA_VERSION;

/// One PMU reading at the substation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeasurementSample {
    pub t: f64,
    pub v0: Complex64,
    pub i: Complex64,
}

impl MeasurementSample {
    pub fn s(&self) -> Complex64 {
        self.v0 * self.i.conj()
    }

    pub fn p(&self) -> f64 {
        self.s().re
    }

    pub fn q(&self) -> f64 {
        self.s().im
    }

    pub fn admittance(&self) -> Result<Admittance> {
        admittance_from_sample(self.v0, self.i)
    }
}

/// Row of the measurement CSV. Angles in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasurementRow {
    pub t: f64,
    pub v0_mag: f64,
    pub v0_ang: f64,
    pub i_mag: f64,
    pub i_ang: f64,
    pub p: f64,
    pub q: f64,
    pub g: f64,
    pub b: f64,
}

impl MeasurementRow {
    pub const HEADER: [&'static str; 9] = ["t", "v0_mag", "v0_ang", "i_mag", "i_ang", "p", "q", "g", "b"];
}

impl From<&MeasurementSample> for MeasurementRow {
    fn from(s: &MeasurementSample) -> Self {
        let pw = s.s();
        let v2 = s.v0.norm_sqr();
        let (g, b) = if v2.sqrt() > V_FLOOR {
            (pw.re / v2, pw.im / v2)
        } else {
            (f64::NAN, f64::NAN)
        };
        MeasurementRow {
            t: s.t,
            v0_mag: s.v0.norm(),
            v0_ang: s.v0.arg(),
            i_mag: s.i.norm(),
            i_ang: s.i.arg(),
            p: pw.re,
            q: pw.im,
            g,
            b,
        }
    }
}

impl From<MeasurementRow> for MeasurementSample {
    fn from(r: MeasurementRow) -> Self {
        MeasurementSample {
            t: r.t,
            v0: Complex64::from_polar(r.v0_mag, r.v0_ang),
            i: Complex64::from_polar(r.i_mag, r.i_ang),
        }
    }
}

/// Load admittance seen at a bus: `g = P/|v|²`, `b = Q/|v|²`.
pub fn admittance_from_sample(v: Complex64, i: Complex64) -> Result<Admittance> {
    let v_mag = v.norm();
    if v_mag <= V_FLOOR {
        return Err(FidvrError::DegenerateVoltage { v_mag, floor: V_FLOOR });
    }
    Ok(Admittance::from_power(v * i.conj(), v_mag))
}

pub fn internal_voltage_from_measurement(v0: Complex64, i: Complex64, y_fd: Admittance) -> Result<Complex64> {
    let y = y_fd.value();
    if !(y.norm() > 0.0) || !y.norm().is_finite() {
        return Err(FidvrError::SingularNetwork("feeder admittance is zero".into()));
    }
    if y.norm() >= IDEAL_BRANCH {
        return Ok(v0);
    }
    Ok(v0 - i / y)
}

/// A sample moved to the internal load bus.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InternalSample {
    pub t: f64,
    pub v0_mag: f64,
    pub v_i: Complex64,
    pub s: Complex64,
    /// `None` when the internal voltage is below the floor.
    pub y: Option<Admittance>,
}

impl InternalSample {
    pub fn g(&self) -> Option<f64> {
        self.y.map(Admittance::g_load)
    }
}

pub fn to_internal(sample: &MeasurementSample, y_fd: Admittance) -> Result<InternalSample> {
    let v_i = internal_voltage_from_measurement(sample.v0, sample.i, y_fd)?;
    Ok(InternalSample {
        t: sample.t,
        v0_mag: sample.v0.norm(),
        v_i,
        s: v_i * sample.i.conj(),
        y: admittance_from_sample(v_i, sample.i).ok(),
    })
}

/// Load composition as supplied by the utility.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompositionInfo {
    pub f_ma: f64,
    pub f_mb: f64,
    pub f_mc: f64,
    pub f_elec: f64,
    pub f_st: f64,
    pub f_md: f64,
    pub f_st_z: f64,
    pub f_st_i: f64,
    pub f_st_p: f64,
}

impl CompositionInfo {
    pub fn f_abce(&self) -> f64 {
        self.f_ma + self.f_mb + self.f_mc + self.f_elec
    }

    /// Fraction of pre-fault power that is not motor D, evaluated at `v`
    /// relative to constant-power scaling.
    fn non_stall_share(&self, v: f64) -> f64 {
        self.f_abce() + self.f_st * (self.f_st_p + self.f_st_i * v + self.f_st_z * v * v)
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [
            ("composition.f_ma", self.f_ma),
            ("composition.f_mb", self.f_mb),
            ("composition.f_mc", self.f_mc),
            ("composition.f_elec", self.f_elec),
            ("composition.f_st", self.f_st),
            ("composition.f_md", self.f_md),
            ("composition.f_st_z", self.f_st_z),
            ("composition.f_st_i", self.f_st_i),
            ("composition.f_st_p", self.f_st_p),
        ];
        for (name, v) in parts {
            if !(0.0..=1.0).contains(&v) {
                return Err(FidvrError::invalid(name, format!("{v} is outside [0, 1]")));
            }
        }
        let sum = self.f_abce() + self.f_st + self.f_md;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(FidvrError::invalid(
                "composition",
                format!("load fractions sum to {sum}, expected 1"),
            ));
        }
        let zip = self.f_st_z + self.f_st_i + self.f_st_p;
        if (zip - 1.0).abs() > 1e-9 {
            return Err(FidvrError::invalid(
                "composition",
                format!("ZIP shares sum to {zip}, expected 1"),
            ));
        }
        Ok(())
    }
}

impl From<&CompositeLoadSpec> for CompositionInfo {
    fn from(s: &CompositeLoadSpec) -> Self {
        CompositionInfo {
            f_ma: s.f_ma,
            f_mb: s.f_mb,
            f_mc: s.f_mc,
            f_elec: s.f_elec,
            f_st: s.f_st,
            f_md: s.f_md,
            f_st_z: s.f_st_z,
            f_st_i: s.f_st_i,
            f_st_p: s.f_st_p,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectParams {
    /// Substation voltage below which a fault dip is flagged.
    pub v_dip: f64,
    /// Rise above the dip minimum that also counts as clearing.
    pub clear_jump: f64,
    pub kappa: f64,
    pub delta_abs: f64,
    pub n_hold: usize,
    pub baseline_window: f64,
    /// Time after clearing in which the rise must be confirmed.
    pub confirm_window: f64,
    pub plateau_window: (f64, f64),
    pub v_post_window: (f64, f64),
}

impl Default for DetectParams {
    fn default() -> Self {
        DetectParams {
            v_dip: 0.8,
            clear_jump: 0.2,
            kappa: 0.10,
            delta_abs: 0.02,
            n_hold: 12,
            baseline_window: 1.0,
            confirm_window: 1.0,
            plateau_window: (0.5, 1.5),
            v_post_window: (1.0, 2.0),
        }
    }
}

impl DetectParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.v_dip > 0.0) {
            return Err(FidvrError::invalid("detect.v_dip", "must be positive"));
        }
        if !(self.kappa >= 0.0 && self.delta_abs >= 0.0) {
            return Err(FidvrError::invalid("detect", "thresholds must be non-negative"));
        }
        if self.n_hold == 0 {
            return Err(FidvrError::invalid("detect.n_hold", "must be at least 1"));
        }
        if !(self.baseline_window > 0.0 && self.confirm_window > 0.0) {
            return Err(FidvrError::invalid("detect", "windows must be positive"));
        }
        for (name, (a, b)) in [
            ("detect.plateau_window", self.plateau_window),
            ("detect.v_post_window", self.v_post_window),
        ] {
            if !(0.0 <= a && a < b) {
                return Err(FidvrError::invalid(
                    name,
                    "must be an increasing pair of non-negative offsets",
                ));
            }
        }
        Ok(())
    }

    fn threshold(&self, baseline: f64) -> f64 {
        self.delta_abs.max(self.kappa * baseline)
    }
}

/// A confirmed motor stall.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StallEvent {
    pub fault_t: f64,
    /// Fault-clearing time; all post-fault windows are measured from here.
    pub onset_t: f64,
    pub detected_t: f64,
    pub baseline_g: f64,
    pub plateau_g: f64,
    pub delta_g: f64,
}

#[derive(Debug, Clone)]
enum DetectState {
    Watching,
    InDip {
        fault_t: f64,
        baseline: f64,
        v_min: f64,
    },
    Confirming {
        fault_t: f64,
        baseline: f64,
        clear_t: f64,
        held: usize,
    },
    Plateau {
        fault_t: f64,
        baseline: f64,
        clear_t: f64,
        detected_t: f64,
        sum: f64,
        n: usize,
    },
    Done,
}

/// Streaming stall detector for one substation.
#[derive(Debug, Clone)]
pub struct StallDetector {
    params: DetectParams,
    history: std::collections::VecDeque<(f64, f64)>,
    state: DetectState,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

impl StallDetector {
    pub fn new(params: DetectParams) -> Self {
        StallDetector {
            params,
            history: Default::default(),
            state: DetectState::Watching,
        }
    }

    pub fn is_done(&self) -> bool {
        matches!(self.state, DetectState::Done)
    }

    /// Feeds one sample; returns the event once its plateau window is complete.
    pub fn push(&mut self, s: &InternalSample) -> Option<StallEvent> {
        let p = self.params;
        match self.state {
            DetectState::Done => None,
            DetectState::Watching => {
                if s.v0_mag < p.v_dip {
                    let covered = self
                        .history
                        .front()
                        .is_some_and(|(t0, _)| s.t - t0 >= p.baseline_window - 1e-9);
                    if !covered {
                        log::warn!("voltage dip at t = {:.3} s without a full baseline window", s.t);
                    }
                    if self.history.is_empty() {
                        return None;
                    }
                    let mut gs: Vec<f64> = self.history.iter().map(|(_, g)| *g).collect();
                    self.state = DetectState::InDip {
                        fault_t: s.t,
                        baseline: median(&mut gs),
                        v_min: s.v0_mag,
                    };
                } else if let Some(g) = s.g() {
                    self.history.push_back((s.t, g));
                    while self
                        .history
                        .front()
                        .is_some_and(|(t0, _)| s.t - t0 > p.baseline_window + 1e-9)
                    {
                        self.history.pop_front();
                    }
                }
                None
            }
            DetectState::InDip {
                fault_t,
                baseline,
                v_min,
            } => {
                if s.v0_mag >= p.v_dip || s.v0_mag >= v_min + p.clear_jump {
                    self.state = DetectState::Confirming {
                        fault_t,
                        baseline,
                        clear_t: s.t,
                        held: 0,
                    };
                    return self.push(s);
                }
                self.state = DetectState::InDip {
                    fault_t,
                    baseline,
                    v_min: v_min.min(s.v0_mag),
                };
                None
            }
            DetectState::Confirming {
                fault_t,
                baseline,
                clear_t,
                held,
            } => {
                if s.t - clear_t > p.confirm_window + 1e-9 {
                    log::debug!("dip at t = {fault_t:.3} s recovered normally");
                    self.history.clear();
                    self.state = DetectState::Watching;
                    return None;
                }
                let above = s.g().is_some_and(|g| g - baseline > p.threshold(baseline));
                let held = if above { held + 1 } else { 0 };
                if held >= p.n_hold {
                    log::info!("motor stall confirmed at t = {:.3} s", s.t);
                    self.state = DetectState::Plateau {
                        fault_t,
                        baseline,
                        clear_t,
                        detected_t: s.t,
                        sum: 0.0,
                        n: 0,
                    };
                    return self.push_plateau(s);
                }
                self.state = DetectState::Confirming {
                    fault_t,
                    baseline,
                    clear_t,
                    held,
                };
                None
            }
            DetectState::Plateau { .. } => self.push_plateau(s),
        }
    }

    fn push_plateau(&mut self, s: &InternalSample) -> Option<StallEvent> {
        let DetectState::Plateau {
            fault_t,
            baseline,
            clear_t,
            detected_t,
            mut sum,
            mut n,
        } = self.state
        else {
            return None;
        };
        let (a, b) = self.params.plateau_window;
        let rel = s.t - clear_t;
        if rel >= a - 1e-9 && rel <= b + 1e-9 {
            if let Some(g) = s.g() {
                sum += g;
                n += 1;
            }
        }
        if rel >= b - 1e-9 && n > 0 {
            self.state = DetectState::Done;
            let plateau_g = sum / n as f64;
            return Some(StallEvent {
                fault_t,
                onset_t: clear_t,
                detected_t,
                baseline_g: baseline,
                plateau_g,
                delta_g: plateau_g - baseline,
            });
        }
        self.state = DetectState::Plateau {
            fault_t,
            baseline,
            clear_t,
            detected_t,
            sum,
            n,
        };
        None
    }
}

pub fn detect_stall(stream: &[InternalSample], params: &DetectParams) -> Option<StallEvent> {
    let mut det = StallDetector::new(*params);
    stream.iter().find_map(|s| det.push(s))
}

fn window(stream: &[InternalSample], from: f64, to: f64) -> impl Iterator<Item = &InternalSample> {
    stream.iter().filter(move |s| s.t >= from - 1e-9 && s.t < to - 1e-9)
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Mean internal-bus voltage over `[onset + 1 s, onset + 2 s)`.
pub fn post_fault_voltage(stream: &[InternalSample], onset_t: f64) -> Result<f64> {
    post_fault_voltage_in(stream, onset_t, DetectParams::default().v_post_window)
}

fn post_fault_voltage_in(stream: &[InternalSample], onset_t: f64, w: (f64, f64)) -> Result<f64> {
    let last = stream.last().map(|s| s.t).unwrap_or(f64::NEG_INFINITY);
    if last < onset_t + w.1 - 0.5 * (w.1 - w.0) {
        return Err(FidvrError::InsufficientSamples(format!(
            "need samples up to t = {:.2} s for the post-fault voltage",
            onset_t + w.1
        )));
    }
    mean(window(stream, onset_t + w.0, onset_t + w.1).map(|s| s.v_i.norm()))
        .ok_or_else(|| FidvrError::InsufficientSamples("no samples in the post-fault window".into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimateStatus {
    Ok,
    /// Slightly negative result set to zero.
    Clamped,
    CompositionMismatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StallEstimate {
    pub value: f64,
    pub status: EstimateStatus,
}

const CLAMP_TOL: f64 = 0.01;

fn classify(raw: f64) -> StallEstimate {
    if raw >= 0.0 {
        StallEstimate {
            value: raw,
            status: EstimateStatus::Ok,
        }
    } else if raw >= -CLAMP_TOL {
        log::warn!("stall estimate {raw:.4} pu clamped to zero");
        StallEstimate {
            value: 0.0,
            status: EstimateStatus::Clamped,
        }
    } else {
        log::warn!("stall estimate {raw:.4} pu is negative; composition does not match the measurements");
        StallEstimate {
            value: raw,
            status: EstimateStatus::CompositionMismatch,
        }
    }
}

/// Stall conductance (system base) left after removing the non-stalled components.
pub fn estimate_stall_conductance(
    g_post: f64,
    p_load_pre: f64,
    v_post: f64,
    comp: &CompositionInfo,
) -> Result<StallEstimate> {
    if v_post <= V_FLOOR {
        return Err(FidvrError::DegenerateVoltage {
            v_mag: v_post,
            floor: V_FLOOR,
        });
    }
    Ok(classify(
        g_post - p_load_pre / (v_post * v_post) * comp.non_stall_share(v_post),
    ))
}

/// Reactive counterpart of [`estimate_stall_conductance`].
pub fn estimate_stall_susceptance(
    b_post: f64,
    q_load_pre: f64,
    v_post: f64,
    comp: &CompositionInfo,
) -> Result<StallEstimate> {
    estimate_stall_conductance(b_post, q_load_pre, v_post, comp)
}

pub fn to_motor_base(g_stall_sys: f64, comp: &CompositionInfo, p_load_pre: f64) -> Result<f64> {
    if !(comp.f_md > 0.0) || !(p_load_pre > 0.0) {
        return Err(FidvrError::NoMotor);
    }
    Ok(g_stall_sys / (comp.f_md * p_load_pre))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TripDelay {
    Seconds(f64),
    /// Temperature settles below `theta1`.
    NoTrip,
}

impl TripDelay {
    pub fn seconds(self) -> Option<f64> {
        match self {
            TripDelay::Seconds(s) => Some(s),
            TripDelay::NoTrip => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisconnectTime {
    Seconds(f64),
    /// Mean slope of `f_th` is not negative.
    NonRecovering,
}

impl DisconnectTime {
    pub fn seconds(self) -> Option<f64> {
        match self {
            DisconnectTime::Seconds(s) => Some(s),
            DisconnectTime::NonRecovering => None,
        }
    }
}

/// Time from stall to the relay starting to trip, with the voltage held at `v_post`.
pub fn estimate_t1(v_post: f64, g_stall_m: f64, relay: &ThermalRelayParams) -> TripDelay {
    let p_th = v_post * v_post * g_stall_m;
    if p_th <= relay.theta1 {
        return TripDelay::NoTrip;
    }
    TripDelay::Seconds(-relay.t_th * (1.0 - relay.theta1 / p_th).ln())
}

/// Trip duration from the mean of the `f_th` slope at its two ends.
pub fn estimate_t2(v_pre: f64, v_post: f64, g_stall_m: f64, relay: &ThermalRelayParams) -> DisconnectTime {
    let den = (v_pre * v_pre + v_post * v_post) * g_stall_m - relay.theta1 - relay.theta2;
    if den <= 0.0 {
        return DisconnectTime::NonRecovering;
    }
    DisconnectTime::Seconds(2.0 * relay.t_th * (relay.theta2 - relay.theta1) / den)
}

/// What the utility knows about a substation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtilityData {
    pub composition: CompositionInfo,
    pub y_fd: Admittance,
    pub relay: ThermalRelayParams,
    #[serde(default)]
    pub detect: DetectParams,
}

impl UtilityData {
    pub fn from_scenario(cfg: &crate::simulate::ScenarioConfig) -> Self {
        UtilityData {
            composition: CompositionInfo::from(&cfg.load),
            y_fd: cfg.net.y_fd,
            relay: cfg.load.relay,
            detect: DetectParams::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.composition.validate()?;
        self.relay.validate()?;
        self.detect.validate()?;
        if !(self.y_fd.norm() > 0.0) {
            return Err(FidvrError::invalid("y_fd", "must be non-zero"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EstimateFlags {
    pub no_trip: bool,
    pub non_recovering: bool,
    pub clamped: bool,
    pub composition_mismatch: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryEstimate {
    pub schema_version: u32,
    pub onset_t: f64,
    pub detected_t: f64,
    pub baseline_g: f64,
    pub delta_g: f64,
    pub v_pre: f64,
    pub v_post: f64,
    pub p_pre: f64,
    pub q_pre: f64,
    pub g_post: f64,
    pub b_post: f64,
    pub g_stall_sys: f64,
    pub b_stall_sys: f64,
    pub g_stall_m: f64,
    pub t1_est: Option<f64>,
    pub t2_est: Option<f64>,
    pub total_est: Option<f64>,
    pub flags: EstimateFlags,
}

impl RecoveryEstimate {
    pub fn event(&self) -> StallEvent {
        StallEvent {
            fault_t: self.onset_t,
            onset_t: self.onset_t,
            detected_t: self.detected_t,
            baseline_g: self.baseline_g,
            plateau_g: self.baseline_g + self.delta_g,
            delta_g: self.delta_g,
        }
    }
}

/// Full measurement pipeline. `Ok(None)` means no stall was seen.
pub fn monitor_pipeline(stream: &[MeasurementSample], utility: &UtilityData) -> Result<Option<RecoveryEstimate>> {
    utility.validate()?;
    let internal = stream
        .iter()
        .map(|s| to_internal(s, utility.y_fd))
        .collect::<Result<Vec<_>>>()?;
    let Some(event) = detect_stall(&internal, &utility.detect) else {
        return Ok(None);
    };
    estimate_from_event(&internal, &event, utility).map(Some)
}

fn estimate_from_event(
    internal: &[InternalSample],
    event: &StallEvent,
    utility: &UtilityData,
) -> Result<RecoveryEstimate> {
    let d = &utility.detect;
    let pre: Vec<&InternalSample> = window(internal, event.fault_t - d.baseline_window, event.fault_t).collect();
    let v_pre = mean(pre.iter().map(|s| s.v_i.norm()))
        .ok_or_else(|| FidvrError::InsufficientSamples("no pre-fault samples".into()))?;
    let p_pre = mean(pre.iter().map(|s| s.s.re)).unwrap_or(f64::NAN);
    let q_pre = mean(pre.iter().map(|s| s.s.im)).unwrap_or(f64::NAN);

    let (w0, w1) = d.v_post_window;
    let v_post = post_fault_voltage_in(internal, event.onset_t, d.v_post_window)?;
    let post: Vec<Admittance> = window(internal, event.onset_t + w0, event.onset_t + w1)
        .filter_map(|s| s.y)
        .collect();
    let g_post = mean(post.iter().map(|y| y.g_load()))
        .ok_or_else(|| FidvrError::InsufficientSamples("no usable post-fault samples".into()))?;
    let b_post = mean(post.iter().map(|y| y.b_load())).unwrap_or(f64::NAN);

    let comp = &utility.composition;
    let g_est = estimate_stall_conductance(g_post, p_pre, v_post, comp)?;
    let b_est = estimate_stall_susceptance(b_post, q_pre, v_post, comp)?;
    let g_m = to_motor_base(g_est.value, comp, p_pre)?;

    let t1 = estimate_t1(v_post, g_m, &utility.relay);
    let t2 = estimate_t2(v_pre, v_post, g_m, &utility.relay);
    let flags = EstimateFlags {
        no_trip: t1 == TripDelay::NoTrip,
        non_recovering: t2 == DisconnectTime::NonRecovering,
        clamped: g_est.status == EstimateStatus::Clamped,
        composition_mismatch: g_est.status == EstimateStatus::CompositionMismatch,
    };
    let (t1_est, t2_est) = (t1.seconds(), t2.seconds());
    Ok(RecoveryEstimate {
        schema_version: SCHEMA_VERSION,
        onset_t: event.onset_t,
        detected_t: event.detected_t,
        baseline_g: event.baseline_g,
        delta_g: event.delta_g,
        v_pre,
        v_post,
        p_pre,
        q_pre,
        g_post,
        b_post,
        g_stall_sys: g_est.value,
        b_stall_sys: b_est.value,
        g_stall_m: g_m,
        t1_est,
        t2_est,
        total_est: t1_est.zip(t2_est).map(|(a, b)| a + b),
        flags,
    })
}

/// Streaming front end: feed samples as they arrive, get the estimate once
/// the post-fault voltage window has been seen.
#[derive(Debug, Clone)]
pub struct Monitor {
    utility: UtilityData,
    detector: StallDetector,
    buffer: Vec<InternalSample>,
    event: Option<StallEvent>,
    finished: bool,
}

impl Monitor {
    pub fn new(utility: UtilityData) -> Result<Self> {
        utility.validate()?;
        Ok(Monitor {
            detector: StallDetector::new(utility.detect),
            utility,
            buffer: Vec::new(),
            event: None,
            finished: false,
        })
    }

    pub fn push(&mut self, sample: &MeasurementSample) -> Result<Option<RecoveryEstimate>> {
        if self.finished {
            return Ok(None);
        }
        let s = to_internal(sample, self.utility.y_fd)?;
        self.buffer.push(s);
        if self.event.is_none() {
            self.event = self.detector.push(&s);
            if self.event.is_none() {
                if self.buffer.len() > 4096 && matches!(self.detector.state, DetectState::Watching) {
                    let keep_from = s.t - self.utility.detect.baseline_window - 1.0;
                    self.buffer.retain(|x| x.t >= keep_from);
                }
                return Ok(None);
            }
        }
        let event = self.event.expect("set above");
        if s.t >= event.onset_t + self.utility.detect.v_post_window.1 - 1e-9 {
            self.finished = true;
            return estimate_from_event(&self.buffer, &event, &self.utility).map(Some);
        }
        Ok(None)
    }

    /// Estimate from whatever has been buffered, for streams that end early.
    pub fn finish(&mut self) -> Result<Option<RecoveryEstimate>> {
        if self.finished {
            return Ok(None);
        }
        self.finished = true;
        match self.event {
            Some(event) => estimate_from_event(&self.buffer, &event, &self.utility).map(Some),
            None => Ok(None),
        }
    }
}

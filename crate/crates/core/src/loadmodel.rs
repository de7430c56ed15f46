//! Composite load reduced to voltage-dependent admittances.
//!
//! Motors A/B/C and the electronic load are aggregated as constant power, the
//! static load is ZIP, and motor-D (the single-phase air-conditioner stock) is
//! either a running constant-power load or, once stalled, a fixed stall
//! admittance scaled by the thermal-relay connected fraction `f_th`.
//!
//! Sign convention: [`Admittance`] stores the standard complex value `Y`, so a
//! load drawing `S = P + jQ` at voltage `V` has `Y = conj(S) / |V|^2` and
//! `Y = G - jB` with `B > 0` for inductive loads.

use std::ops::{Add, Mul};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{FidvrError, Result};

/// Constant-power branches are evaluated at `max(|V|, V_FLOOR)`.
pub const V_FLOOR: f64 = 0.05;

const FRACTION_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "GbPair", into = "GbPair")]
pub struct Admittance(pub Complex64);

/// Serialized form: load-convention conductance and susceptance.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GbPair {
    g: f64,
    b: f64,
}

impl From<GbPair> for Admittance {
    fn from(p: GbPair) -> Self {
        Admittance::from_gb(p.g, p.b)
    }
}

impl From<Admittance> for GbPair {
    fn from(y: Admittance) -> Self {
        GbPair {
            g: y.g_load(),
            b: y.b_load(),
        }
    }
}

impl Admittance {
    pub const ZERO: Admittance = Admittance(Complex64 { re: 0.0, im: 0.0 });

    pub fn new(value: Complex64) -> Self {
        Admittance(value)
    }

    /// Builds `Y = G - jB`.
    pub fn from_gb(g: f64, b: f64) -> Self {
        Admittance(Complex64::new(g, -b))
    }

    /// Admittance drawing `s` at voltage magnitude `v_mag`.
    pub fn from_power(s: Complex64, v_mag: f64) -> Self {
        Admittance(s.conj() / (v_mag * v_mag))
    }

    pub fn value(self) -> Complex64 {
        self.0
    }

    pub fn g_load(self) -> f64 {
        self.0.re
    }

    pub fn b_load(self) -> f64 {
        -self.0.im
    }

    pub fn norm(self) -> f64 {
        self.0.norm()
    }

    /// Complex power `S = |V|^2 conj(Y)` drawn at voltage phasor `v`.
    pub fn power(self, v: Complex64) -> Complex64 {
        v.norm_sqr() * self.0.conj()
    }
}

impl Add for Admittance {
    type Output = Admittance;
    fn add(self, rhs: Admittance) -> Admittance {
        Admittance(self.0 + rhs.0)
    }
}

impl Mul<f64> for Admittance {
    type Output = Admittance;
    fn mul(self, rhs: f64) -> Admittance {
        Admittance(self.0 * rhs)
    }
}

impl std::iter::Sum for Admittance {
    fn sum<I: Iterator<Item = Admittance>>(iter: I) -> Admittance {
        iter.fold(Admittance::ZERO, |a, b| a + b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThermalRelayParams {
    /// Temperature (pu) at which tripping starts.
    pub theta1: f64,
    /// Temperature (pu) at which the whole stock is tripped.
    pub theta2: f64,
    /// Relay time constant in seconds.
    pub t_th: f64,
}

impl Default for ThermalRelayParams {
    fn default() -> Self {
        ThermalRelayParams {
            theta1: 0.9,
            theta2: 1.5,
            t_th: 15.0,
        }
    }
}

impl ThermalRelayParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta1 > 0.0 && self.theta1 < self.theta2) {
            return Err(FidvrError::invalid(
                "relay.theta1",
                format!(
                    "need 0 < theta1 < theta2, got theta1={} theta2={}",
                    self.theta1, self.theta2
                ),
            ));
        }
        if !(self.t_th > 0.0) {
            return Err(FidvrError::invalid("relay.t_th", "time constant must be positive"));
        }
        Ok(())
    }

    /// Inverse of [`fth_from_theta`] on the tripping ramp.
    pub fn theta_from_fth(&self, f_th: f64) -> f64 {
        (self.theta2 - self.theta1) * (1.0 - f_th) + self.theta1
    }
}

/// Connected fraction for relay temperature `theta`: 1 below `theta1`, 0 above
/// `theta2`, linear in between.
pub fn fth_from_theta(theta: f64, params: &ThermalRelayParams) -> f64 {
    if theta <= params.theta1 {
        1.0
    } else if theta >= params.theta2 {
        0.0
    } else {
        (params.theta2 - theta) / (params.theta2 - params.theta1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotorMode {
    Running,
    Stalled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThermalRelayState {
    pub theta: f64,
    pub f_th: f64,
    pub mode: MotorMode,
}

impl ThermalRelayState {
    pub fn running() -> Self {
        ThermalRelayState {
            theta: 0.0,
            f_th: 1.0,
            mode: MotorMode::Running,
        }
    }

    /// State right at stall onset: cold relay, whole stock connected.
    pub fn stalled() -> Self {
        ThermalRelayState {
            theta: 0.0,
            f_th: 1.0,
            mode: MotorMode::Stalled,
        }
    }

    pub fn with_theta(theta: f64, params: &ThermalRelayParams) -> Self {
        ThermalRelayState {
            theta,
            f_th: fth_from_theta(theta, params),
            mode: MotorMode::Stalled,
        }
    }

    pub fn is_stalled(&self) -> bool {
        self.mode == MotorMode::Stalled
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompositeLoadSpec {
    /// Active power at 1 pu voltage (system base).
    pub p_load_nom: f64,
    pub f_ma: f64,
    pub f_mb: f64,
    pub f_mc: f64,
    pub f_elec: f64,
    pub f_st: f64,
    pub f_md: f64,
    pub f_st_z: f64,
    pub f_st_i: f64,
    pub f_st_p: f64,
    pub q_over_p_abce: f64,
    pub q_over_p_stat: f64,
    pub q_over_p_md_running: f64,
    /// Stall conductance, motor base.
    pub g_stall_m: f64,
    /// Stall susceptance, motor base.
    pub b_stall_m: f64,
    pub relay: ThermalRelayParams,
    pub v_stall_threshold: f64,
    pub t_stall_dwell: f64,
}

impl Default for CompositeLoadSpec {
    fn default() -> Self {
        CompositeLoadSpec {
            p_load_nom: 1.0,
            f_ma: 0.15,
            f_mb: 0.05,
            f_mc: 0.0,
            f_elec: 0.15,
            f_st: 0.35,
            f_md: 0.30,
            f_st_z: 0.4,
            f_st_i: 0.3,
            f_st_p: 0.3,
            q_over_p_abce: 0.25,
            q_over_p_stat: 0.25,
            q_over_p_md_running: 0.25,
            g_stall_m: 3.0,
            b_stall_m: 5.0,
            relay: ThermalRelayParams::default(),
            v_stall_threshold: 0.55,
            t_stall_dwell: 0.02,
        }
    }
}

impl CompositeLoadSpec {
    pub fn f_abce(&self) -> f64 {
        self.f_ma + self.f_mb + self.f_mc + self.f_elec
    }

    /// Aggregate constant-power share of motors A/B/C and electronics.
    pub fn p_abce(&self) -> f64 {
        self.f_abce() * self.p_load_nom
    }

    pub fn p_static(&self) -> f64 {
        self.f_st * self.p_load_nom
    }

    /// Motor-D rated power; also the motor base used for the stall admittance.
    pub fn p_motor_d(&self) -> f64 {
        self.f_md * self.p_load_nom
    }

    /// Stall admittance of the whole motor-D stock on the system base.
    pub fn stall_admittance_sys(&self) -> Admittance {
        Admittance::from_gb(self.g_stall_m, self.b_stall_m) * self.p_motor_d()
    }

    pub fn validate(&self) -> Result<()> {
        let fractions = [
            ("load.f_ma", self.f_ma),
            ("load.f_mb", self.f_mb),
            ("load.f_mc", self.f_mc),
            ("load.f_elec", self.f_elec),
            ("load.f_st", self.f_st),
            ("load.f_md", self.f_md),
            ("load.f_st_z", self.f_st_z),
            ("load.f_st_i", self.f_st_i),
            ("load.f_st_p", self.f_st_p),
        ];
        for (name, f) in fractions {
            if !(0.0..=1.0).contains(&f) {
                return Err(FidvrError::invalid(
                    name,
                    format!("fraction must lie in [0, 1], got {f}"),
                ));
            }
        }
        let sum = self.f_abce() + self.f_st + self.f_md;
        if (sum - 1.0).abs() > FRACTION_TOL {
            return Err(FidvrError::invalid(
                "load.fractions",
                format!("f_ma + f_mb + f_mc + f_elec + f_st + f_md must equal 1, got {sum}"),
            ));
        }
        let zip = self.f_st_z + self.f_st_i + self.f_st_p;
        if (zip - 1.0).abs() > FRACTION_TOL {
            return Err(FidvrError::invalid(
                "load.zip_fractions",
                format!("f_st_z + f_st_i + f_st_p must equal 1, got {zip}"),
            ));
        }
        if !(self.p_load_nom > 0.0) {
            return Err(FidvrError::invalid("load.p_load_nom", "must be positive"));
        }
        if !(self.g_stall_m > 0.0) {
            return Err(FidvrError::invalid("load.g_stall_m", "must be positive"));
        }
        if !(self.b_stall_m >= 0.0) {
            return Err(FidvrError::invalid("load.b_stall_m", "must be non-negative"));
        }
        if !(self.v_stall_threshold > 0.0) {
            return Err(FidvrError::invalid("load.v_stall_threshold", "must be positive"));
        }
        if !(self.t_stall_dwell >= 0.0) {
            return Err(FidvrError::invalid("load.t_stall_dwell", "must be non-negative"));
        }
        self.relay.validate()
    }

    fn zip_factor(&self, v: f64) -> f64 {
        self.f_st_z + self.f_st_i / v + self.f_st_p / (v * v)
    }

    fn abces_at(&self, v: f64) -> Admittance {
        let p_abce = self.p_abce() / (v * v);
        let zip = self.zip_factor(v);
        let g = p_abce + self.p_static() * zip;
        let b = self.q_over_p_abce * p_abce + self.q_over_p_stat * self.p_static() * zip;
        Admittance::from_gb(g, b)
    }
}

/// Admittance of motors A/B/C, electronics and the static ZIP load at `v_mag`.
pub fn abces_admittance(v_mag: f64, spec: &CompositeLoadSpec) -> Result<Admittance> {
    if !(v_mag > V_FLOOR) {
        return Err(FidvrError::DegenerateVoltage { v_mag, floor: V_FLOOR });
    }
    Ok(spec.abces_at(v_mag))
}

/// Motor-D admittance on the system base.
///
/// Running stock is a constant-power load at `v_mag` (frozen below [`V_FLOOR`]);
/// stalled stock is `gamma_c * f_th` times the system-base stall admittance.
pub fn motor_d_admittance(state: &ThermalRelayState, spec: &CompositeLoadSpec, gamma_c: f64, v_mag: f64) -> Admittance {
    match state.mode {
        MotorMode::Running => {
            let v = v_mag.max(V_FLOOR);
            let p = spec.p_motor_d() / (v * v);
            Admittance::from_gb(p, spec.q_over_p_md_running * p)
        }
        MotorMode::Stalled => spec.stall_admittance_sys() * (gamma_c * state.f_th),
    }
}

/// Heat input of a stalled motor (motor base); independent of `f_th`.
pub fn thermal_power(v_i: f64, spec: &CompositeLoadSpec) -> f64 {
    v_i * v_i * spec.g_stall_m
}

/// One classical RK4 step of `dθ/dt = (P_th - θ) / T_th`.
///
/// `p_th(offset, theta)` supplies the heat input at stage time `t + offset`
/// for the stage temperature, which lets callers re-solve the network inside
/// every stage.
pub(crate) fn rk4_theta<F>(theta: f64, dt: f64, t_th: f64, mut p_th: F) -> Result<f64>
where
    F: FnMut(f64, f64) -> Result<f64>,
{
    let mut rate = |offset: f64, th: f64| -> Result<f64> { Ok((p_th(offset, th)? - th) / t_th) };
    let k1 = rate(0.0, theta)?;
    let k2 = rate(0.5 * dt, theta + 0.5 * dt * k1)?;
    let k3 = rate(0.5 * dt, theta + 0.5 * dt * k2)?;
    let k4 = rate(dt, theta + dt * k3)?;
    Ok(theta + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4))
}

/// Advances the relay by `dt` with the internal voltage held at `v_i`.
/// Running motors do not heat.
pub fn relay_step(state: &ThermalRelayState, v_i: f64, dt: f64, spec: &CompositeLoadSpec) -> ThermalRelayState {
    if !state.is_stalled() {
        return *state;
    }
    let p_th = thermal_power(v_i, spec);
    let theta = rk4_theta(state.theta, dt, spec.relay.t_th, |_, _| Ok(p_th))
        .expect("constant heat input cannot fail")
        .max(0.0);
    ThermalRelayState::with_theta(theta, &spec.relay)
}

/// Per-component conductances, system base.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ComponentConductances {
    pub motor_a: f64,
    pub motor_b: f64,
    pub motor_c: f64,
    pub elec: f64,
    pub static_load: f64,
    pub motor_d: f64,
}

/// Load state as seen by the network solver.
#[derive(Debug, Clone, Copy)]
pub struct CompositeLoad<'a> {
    pub spec: &'a CompositeLoadSpec,
    pub relay: ThermalRelayState,
    /// Smart-thermostat connected multiplier; 1 without mitigation.
    pub gamma_c: f64,
}

impl<'a> CompositeLoad<'a> {
    pub fn new(spec: &'a CompositeLoadSpec, relay: ThermalRelayState, gamma_c: f64) -> Self {
        CompositeLoad { spec, relay, gamma_c }
    }

    /// Total admittance at `v_mag`, constant-power terms frozen below [`V_FLOOR`].
    pub fn admittance(&self, v_mag: f64) -> Admittance {
        self.spec.abces_at(v_mag.max(V_FLOOR)) + motor_d_admittance(&self.relay, self.spec, self.gamma_c, v_mag)
    }

    pub fn components(&self, v_mag: f64) -> ComponentConductances {
        let v = v_mag.max(V_FLOOR);
        let cp = self.spec.p_load_nom / (v * v);
        ComponentConductances {
            motor_a: self.spec.f_ma * cp,
            motor_b: self.spec.f_mb * cp,
            motor_c: self.spec.f_mc * cp,
            elec: self.spec.f_elec * cp,
            static_load: self.spec.p_static() * self.spec.zip_factor(v),
            motor_d: motor_d_admittance(&self.relay, self.spec, self.gamma_c, v_mag).g_load(),
        }
    }
}

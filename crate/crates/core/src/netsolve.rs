//! Two-bus network: source `E` behind `Y_trans`, substation bus, series feeder
//! `Y_fd`, composite load at the internal bus.
//!
//! The internal-bus voltage is the fixed point of
//! `V = E_th * Y_eff / (Y_eff + Y_load(|V|))`, where `(E_th, Y_eff)` is the
//! source reduced to the internal bus (fault shunt included while it is on).
//! The magnitude of this complex divider is the textbook `|V|` expression in
//! magnitudes; we keep the phase so that the substation phasors are consistent.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{FidvrError, Result};
use crate::loadmodel::{Admittance, CompositeLoad};

/// Series branches at or above this magnitude are treated as ideal.
pub const IDEAL_BRANCH: f64 = 1e9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultSpec {
    pub t_apply: f64,
    pub duration: f64,
    #[serde(default = "default_g_fault")]
    pub g_fault: f64,
}

fn default_g_fault() -> f64 {
    1e3
}

impl Default for FaultSpec {
    fn default() -> Self {
        FaultSpec {
            t_apply: 1.0,
            duration: 0.05,
            g_fault: default_g_fault(),
        }
    }
}

impl FaultSpec {
    pub fn t_clear(&self) -> f64 {
        self.t_apply + self.duration
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    /// Source voltage magnitude; the source angle is the reference.
    pub e_source: f64,
    pub y_trans: Admittance,
    /// Feeder series equivalent (tap transformer and compensation lumped in).
    pub y_fd: Admittance,
    #[serde(default)]
    pub fault: Option<FaultSpec>,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        let y_trans = Admittance::from_gb(1.0, 10.0);
        let y_fd = Admittance::from_gb(2.0, 20.0);
        NetworkSpec {
            e_source: unity_voltage_source(y_trans, y_fd, Complex64::new(1.0, -0.25)),
            y_trans,
            y_fd,
            fault: Some(FaultSpec::default()),
        }
    }
}

/// Source magnitude that puts the internal bus at exactly 1 pu when the load
/// draws admittance `y_load_at_unity` there.
pub fn unity_voltage_source(y_trans: Admittance, y_fd: Admittance, y_load_at_unity: Complex64) -> f64 {
    let y_eff = y_fd.0 * y_trans.0 / (y_fd.0 + y_trans.0);
    ((y_eff + y_load_at_unity) / y_eff).norm()
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.e_source > 0.0) {
            return Err(FidvrError::invalid("net.e_source", "must be positive"));
        }
        if !(self.y_trans.norm() > 0.0) {
            return Err(FidvrError::invalid("net.y_trans", "must be non-zero"));
        }
        if !(self.y_fd.norm() > 0.0) {
            return Err(FidvrError::invalid("net.y_fd", "must be non-zero"));
        }
        if let Some(f) = &self.fault {
            if !(f.duration >= 0.0) {
                return Err(FidvrError::invalid("net.fault.duration", "must be non-negative"));
            }
            if !(f.g_fault >= 0.0) {
                return Err(FidvrError::invalid("net.fault.g_fault", "must be non-negative"));
            }
        }
        Ok(())
    }

    /// Source reduced to the internal bus.
    pub fn thevenin(&self, cond: OperatingCondition) -> Result<Thevenin> {
        let (e_sub, y_src) = if cond.fault_on {
            let g_fault = self.fault.map(|f| f.g_fault).unwrap_or(0.0);
            let y = self.y_trans.0 + g_fault;
            if y.norm() == 0.0 {
                return Err(FidvrError::SingularNetwork("faulted substation has no path".into()));
            }
            (cond.e_source * self.y_trans.0 / y, Admittance(y))
        } else {
            (Complex64::new(cond.e_source, 0.0), self.y_trans)
        };
        Ok(Thevenin {
            e: e_sub,
            y: effective_admittance(self.y_fd, y_src)?,
        })
    }
}

/// Source magnitude and fault status at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatingCondition {
    pub e_source: f64,
    pub fault_on: bool,
}

impl OperatingCondition {
    pub fn steady(e_source: f64) -> Self {
        OperatingCondition {
            e_source,
            fault_on: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Thevenin {
    pub e: Complex64,
    pub y: Admittance,
}

/// Series combination `y_fd * y_trans / (y_fd + y_trans)`.
pub fn effective_admittance(y_fd: Admittance, y_trans: Admittance) -> Result<Admittance> {
    if y_fd.norm() >= IDEAL_BRANCH && y_trans.norm() < IDEAL_BRANCH {
        return Ok(Admittance(y_trans.0 * (y_fd.0 / (y_fd.0 + y_trans.0))));
    }
    let sum = y_fd.0 + y_trans.0;
    if sum.norm() == 0.0 || !sum.is_finite() {
        return Err(FidvrError::SingularNetwork("y_fd + y_trans is zero".into()));
    }
    Ok(Admittance(y_fd.0 * y_trans.0 / sum))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Relative step tolerance.
    pub tol: f64,
    pub max_iter: usize,
    pub damping: f64,
    /// Non-contracting iterations tolerated before damping is switched on.
    pub damping_after: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tol: 1e-12,
            max_iter: 200,
            damping: 0.5,
            damping_after: 20,
        }
    }
}

/// Anything that presents an admittance as a function of its terminal voltage magnitude.
pub trait VoltageDependentLoad {
    fn admittance(&self, v_mag: f64) -> Admittance;
}

impl VoltageDependentLoad for CompositeLoad<'_> {
    fn admittance(&self, v_mag: f64) -> Admittance {
        CompositeLoad::admittance(self, v_mag)
    }
}

impl<F: Fn(f64) -> Admittance> VoltageDependentLoad for F {
    fn admittance(&self, v_mag: f64) -> Admittance {
        self(v_mag)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoltageSolution {
    pub v_i: Complex64,
    pub y_load: Admittance,
    pub iterations: usize,
}

/// Picard iteration for the internal-bus voltage, starting from `v_guess`.
///
/// Starting from the previous solution keeps the iteration on the branch the
/// system is already on.
pub fn solve_internal_voltage<L: VoltageDependentLoad + ?Sized>(
    net: &NetworkSpec,
    cond: OperatingCondition,
    load: &L,
    v_guess: Complex64,
    opts: &SolverOptions,
) -> Result<VoltageSolution> {
    let th = net.thevenin(cond)?;
    solve_with_thevenin(&th, load, v_guess, opts)
}

pub fn solve_with_thevenin<L: VoltageDependentLoad + ?Sized>(
    th: &Thevenin,
    load: &L,
    v_guess: Complex64,
    opts: &SolverOptions,
) -> Result<VoltageSolution> {
    if !(v_guess.norm() > 0.0) {
        return Err(FidvrError::invalid("v_guess", "initial guess must be non-zero"));
    }
    let mut v = v_guess;
    let mut prev_step = f64::INFINITY;
    let mut non_contracting = 0usize;
    let mut damped = false;
    for it in 1..=opts.max_iter {
        let y = load.admittance(v.norm());
        if !y.0.is_finite() {
            break;
        }
        let denom = th.y.0 + y.0;
        if denom.norm() == 0.0 {
            return Err(FidvrError::SingularNetwork("Y_eff + Y_load is zero".into()));
        }
        let target = th.e * th.y.0 / denom;
        let next = if damped {
            v + (target - v) * opts.damping
        } else {
            target
        };
        let step = (target - v).norm();
        v = next;
        if !v.is_finite() {
            break;
        }
        if step <= opts.tol * v.norm() {
            let y_load = load.admittance(v.norm());
            if !y_load.0.is_finite() {
                break;
            }
            return Ok(VoltageSolution {
                v_i: v,
                y_load,
                iterations: it,
            });
        }
        if step >= prev_step {
            non_contracting += 1;
            if non_contracting >= opts.damping_after {
                damped = true;
            }
        }
        prev_step = step;
    }
    Err(FidvrError::VoltageCollapse {
        iterations: opts.max_iter,
        last_v_mag: v.norm(),
    })
}

/// Substation voltage and feeder current for a solved internal voltage.
pub fn substation_quantities(v_i: Complex64, net: &NetworkSpec, y_load: Admittance) -> (Complex64, Complex64) {
    let i = y_load.0 * v_i;
    let v0 = v_i + i / net.y_fd.0;
    (v0, i)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerBalance {
    pub s_source: Complex64,
    pub s_load: Complex64,
    pub s_fault: Complex64,
    pub s_losses: Complex64,
    /// KCL mismatch at the substation bus (current).
    pub kcl_residual: f64,
    /// `|S_source - S_load - S_fault - S_losses|`.
    pub residual: f64,
}

/// Full power bookkeeping at a solved operating point.
pub fn power_balance(net: &NetworkSpec, cond: OperatingCondition, v_i: Complex64, y_load: Admittance) -> PowerBalance {
    let (v0, i) = substation_quantities(v_i, net, y_load);
    let e = Complex64::new(cond.e_source, 0.0);
    let i_src = (e - v0) * net.y_trans.0;
    let g_fault = if cond.fault_on {
        net.fault.map(|f| f.g_fault).unwrap_or(0.0)
    } else {
        0.0
    };
    let i_fault = v0 * g_fault;
    let s_source = e * i_src.conj();
    let s_load = v_i * i.conj();
    let s_fault = v0 * i_fault.conj();
    // |I|^2 / y for a series branch carrying current I.
    let s_losses = i_src.norm_sqr() / net.y_trans.0 + i.norm_sqr() / net.y_fd.0;
    PowerBalance {
        s_source,
        s_load,
        s_fault,
        s_losses,
        kcl_residual: (i_src - i - i_fault).norm(),
        residual: (s_source - s_load - s_fault - s_losses).norm(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loadmodel::{CompositeLoadSpec, ThermalRelayState};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn lossless(y_trans_b: f64) -> NetworkSpec {
        NetworkSpec {
            e_source: 1.0,
            y_trans: Admittance::from_gb(0.0, y_trans_b),
            y_fd: Admittance::from_gb(0.0, 2e9),
            fault: None,
        }
    }

    /// Scalar power-flow residual for a constant-power load `p` behind a pure
    /// reactance `x`: |V|^4 - (E^2 - 2 Q x)|V|^2 + x^2 |S|^2 = 0 with Q = 0.
    fn bisection_constant_power(e: f64, x: f64, p: f64) -> f64 {
        let f = |v: f64| v.powi(4) - e * e * v * v + x * x * p * p;
        let (mut lo, mut hi) = (e / 2.0_f64.sqrt(), e);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn effective_admittance_examples() {
        let y = Admittance::from_gb(0.0, 10.0);
        let ideal = effective_admittance(Admittance::from_gb(0.0, 1e10), y).unwrap();
        assert!((ideal.0 - y.0).norm() < 1e-8);

        let half = effective_admittance(y, y).unwrap();
        assert!((half.0 - y.0 / 2.0).norm() < 1e-15);

        let yeff = effective_admittance(
            Admittance(Complex64::new(0.0, -20.0)),
            Admittance(Complex64::new(0.0, -10.0)),
        )
        .unwrap();
        assert_abs_diff_eq!(yeff.0.im, -20.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(yeff.0.re, 0.0, epsilon = 1e-12);

        let err = effective_admittance(
            Admittance(Complex64::new(0.0, 5.0)),
            Admittance(Complex64::new(0.0, -5.0)),
        );
        assert!(matches!(err, Err(FidvrError::SingularNetwork(_))));
    }

    #[test]
    fn open_circuit_gives_source_voltage() {
        let net = NetworkSpec::default();
        let sol = solve_internal_voltage(
            &net,
            OperatingCondition::steady(net.e_source),
            &|_| Admittance::ZERO,
            Complex64::new(1.0, 0.0),
            &SolverOptions::default(),
        )
        .unwrap();
        assert!((sol.v_i - Complex64::new(net.e_source, 0.0)).norm() < 1e-14);
        let (v0, i) = substation_quantities(sol.v_i, &net, sol.y_load);
        assert_eq!(i, Complex64::new(0.0, 0.0));
        assert!((v0 - sol.v_i).norm() < 1e-15);
    }

    #[test]
    fn resistive_divider() {
        let net = lossless(10.0);
        let sol = solve_internal_voltage(
            &net,
            OperatingCondition::steady(1.0),
            &|_| Admittance::from_gb(1.0, 0.0),
            Complex64::new(1.0, 0.0),
            &SolverOptions::default(),
        )
        .unwrap();
        assert_abs_diff_eq!(sol.v_i.norm(), 10.0 / 101.0_f64.sqrt(), epsilon = 1e-8);
    }

    #[test]
    fn constant_power_matches_bisection() {
        let net = lossless(10.0);
        let load = |v: f64| Admittance::from_gb(0.5 / (v * v), 0.0);
        let sol = solve_internal_voltage(
            &net,
            OperatingCondition::steady(1.0),
            &load,
            Complex64::new(1.0, 0.0),
            &SolverOptions::default(),
        )
        .unwrap();
        // x includes the (ideal) feeder: 1/10 + 1/(2e9).
        let oracle = bisection_constant_power(1.0, 0.1 + 0.5e-9, 0.5);
        assert!((sol.v_i.norm() - oracle).abs() < 1e-8, "{} vs {oracle}", sol.v_i.norm());
    }

    #[test]
    fn collapse_is_reported() {
        let net = lossless(1.0);
        // 5 pu constant power through x = 1 has no solution.
        let load = |v: f64| Admittance::from_gb(5.0 / (v * v), 0.0);
        let err = solve_internal_voltage(
            &net,
            OperatingCondition::steady(1.0),
            &load,
            Complex64::new(1.0, 0.0),
            &SolverOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, FidvrError::VoltageCollapse { .. }), "{err}");
    }

    #[test]
    fn ideal_feeder_substation_equals_internal() {
        let net = NetworkSpec {
            y_fd: Admittance::from_gb(0.0, 1e10),
            ..NetworkSpec::default()
        };
        let sol = solve_internal_voltage(
            &net,
            OperatingCondition::steady(1.0),
            &|_| Admittance::from_gb(1.0, 0.25),
            Complex64::new(1.0, 0.0),
            &SolverOptions::default(),
        )
        .unwrap();
        let (v0, _) = substation_quantities(sol.v_i, &net, sol.y_load);
        assert!((v0 - sol.v_i).norm() < 1e-8);
    }

    #[test]
    fn default_source_gives_unity_prefault_voltage() {
        let net = NetworkSpec::default();
        let spec = CompositeLoadSpec::default();
        let load = CompositeLoad::new(&spec, ThermalRelayState::running(), 1.0);
        let sol = solve_internal_voltage(
            &net,
            OperatingCondition::steady(net.e_source),
            &load,
            Complex64::new(1.0, 0.0),
            &SolverOptions::default(),
        )
        .unwrap();
        assert_abs_diff_eq!(sol.v_i.norm(), 1.0, epsilon = 1e-10);
    }

    #[test]
    fn fault_on_balance_and_kcl() {
        let net = NetworkSpec::default();
        let spec = CompositeLoadSpec::default();
        let load = CompositeLoad::new(&spec, ThermalRelayState::running(), 1.0);
        let cond = OperatingCondition {
            e_source: net.e_source,
            fault_on: true,
        };
        let sol =
            solve_internal_voltage(&net, cond, &load, Complex64::new(1.0, 0.0), &SolverOptions::default()).unwrap();
        assert!(sol.v_i.norm() < 0.05);
        let pb = power_balance(&net, cond, sol.v_i, sol.y_load);
        assert!(pb.kcl_residual < 1e-10, "{}", pb.kcl_residual);
        assert!(pb.residual < 1e-8, "{}", pb.residual);
    }

    fn stalled_voltage(f_md: f64) -> f64 {
        let net = NetworkSpec::default();
        let spec = CompositeLoadSpec {
            f_md,
            f_st: 0.65 - f_md,
            ..CompositeLoadSpec::default()
        };
        let load = CompositeLoad::new(&spec, ThermalRelayState::stalled(), 1.0);
        solve_internal_voltage(
            &net,
            OperatingCondition::steady(net.e_source),
            &load,
            Complex64::new(1.0, 0.0),
            &SolverOptions::default(),
        )
        .unwrap()
        .v_i
        .norm()
    }

    #[test]
    fn stall_severity_is_monotone() {
        let mut last = f64::INFINITY;
        for k in 0..=9 {
            let v = stalled_voltage(0.05 * k as f64);
            assert!(v <= last + 1e-12, "f_md={} v={v} last={last}", 0.05 * k as f64);
            last = v;
        }
    }

    proptest! {
        #[test]
        fn solved_points_balance(
            g in 0.0f64..3.0, b in 0.0f64..3.0, p_cp in 0.0f64..0.6, e in 0.9f64..1.1
        ) {
            let net = NetworkSpec::default();
            let load = move |v: f64| Admittance::from_gb(g + p_cp / (v * v), b);
            let cond = OperatingCondition::steady(e);
            let sol = solve_internal_voltage(&net, cond, &load, Complex64::new(1.0, 0.0), &SolverOptions::default()).unwrap();
            let pb = power_balance(&net, cond, sol.v_i, sol.y_load);
            prop_assert!(pb.kcl_residual < 1e-10);
            prop_assert!(pb.residual < 1e-8);
            // Magnitude form: |V|^2 = E^2 |Y_eff|^2 / |Y_eff + Y_load|^2.
            let th = net.thevenin(cond).unwrap();
            let rhs = (th.e.norm() * th.y.norm() / (th.y.0 + sol.y_load.0).norm()).powi(2);
            prop_assert!((sol.v_i.norm_sqr() - rhs).abs() < 1e-8);
        }
    }
}

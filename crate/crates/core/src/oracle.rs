//! Reference integration of the relay trip phase.
//!
//! Needs the full network (source and transmission admittance), which the
//! measurement side never has, so it lives apart from [`crate::monitor`].

use num_complex::Complex64;

use crate::error::{FidvrError, Result};
use crate::loadmodel::{CompositeLoad, CompositeLoadSpec, ThermalRelayState};
use crate::netsolve::{solve_with_thevenin, NetworkSpec, OperatingCondition, SolverOptions};

pub const ORACLE_DT: f64 = 1e-3;
const MAX_TIME: f64 = 3600.0;

/// Time for `f_th` to fall from 1 to 0 with the post-fault network re-solved
/// at every RK4 stage. `v_guess` seeds the first network solve.
pub fn integrate_fth_ode(net: &NetworkSpec, spec: &CompositeLoadSpec, v_guess: Complex64) -> Result<f64> {
    integrate_fth_ode_with(net, spec, v_guess, ORACLE_DT)
}

pub fn integrate_fth_ode_with(net: &NetworkSpec, spec: &CompositeLoadSpec, v_guess: Complex64, dt: f64) -> Result<f64> {
    let relay = spec.relay;
    let span = relay.theta2 - relay.theta1;
    let th = net.thevenin(OperatingCondition::steady(net.e_source))?;
    let opts = SolverOptions::default();
    let mut v = v_guess;
    let mut rate = |f: f64| -> Result<f64> {
        let state = ThermalRelayState::with_theta(relay.theta_from_fth(f.clamp(0.0, 1.0)), &relay);
        let load = CompositeLoad::new(spec, state, 1.0);
        let sol = solve_with_thevenin(&th, &load, v, &opts)?;
        v = sol.v_i;
        Ok((relay.theta2 - span * f - sol.v_i.norm_sqr() * spec.g_stall_m) / (relay.t_th * span))
    };

    let k0 = rate(1.0)?;
    if k0 >= 0.0 {
        return Err(FidvrError::NotRecovered("f_th does not decrease from 1".into()));
    }
    let (mut t, mut f, mut k1) = (0.0, 1.0, k0);
    while t < MAX_TIME {
        let k2 = rate(f + 0.5 * dt * k1)?;
        let k3 = rate(f + 0.5 * dt * k2)?;
        let k4 = rate(f + dt * k3)?;
        let next = f + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        if next <= 0.0 {
            return Ok(t + dt * f / (f - next));
        }
        t += dt;
        f = next;
        k1 = rate(f)?;
        if k1 > -1e-7 {
            return Err(FidvrError::NotRecovered(format!("f_th settles at {f:.4}")));
        }
    }
    Err(FidvrError::NotRecovered("f_th did not reach zero".into()))
}

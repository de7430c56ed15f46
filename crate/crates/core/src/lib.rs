//! Admittance-based laboratory for fault-induced delayed voltage recovery (FIDVR).
//!
//! The crate is organised around the measurement chain of a single load bus:
//!
//! * [`loadmodel`] - composite load reduced to voltage-dependent admittances plus
//!   the thermal relay of the single-phase (motor-D) stock.
//! * [`netsolve`] - the two-bus network (source, transmission branch, feeder) and
//!   its fixed-point voltage solution.
//! * [`simulate`] - time-domain scenarios producing PMU-style streams and ground truth.
//! * [`monitor`] - stall detection and recovery-time estimation from substation phasors.
//! * [`mitigate`] - learned linear recovery-time model and smart-thermostat planning.
//! * [`oracle`] - exact integration of the connected-fraction ODE, used as a reference.
//! * [`experiment`] - parameter sweeps that tie the pieces together.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod experiment;
pub mod loadmodel;
pub mod mitigate;
pub mod monitor;
pub mod netsolve;
pub mod oracle;
pub mod simulate;

pub use error::{FidvrError, Result};
pub use loadmodel::{Admittance, CompositeLoadSpec, ThermalRelayParams, ThermalRelayState};
pub use netsolve::{FaultSpec, NetworkSpec};

pub use num_complex::Complex64;

/// Version tag written into every configuration, report and manifest.
pub const SCHEMA_VERSION: u32 = 1;

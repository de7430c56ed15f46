#![allow(dead_code)]

use std::sync::OnceLock;

use fidvr_core::experiment::{default_f_md_values, sweep_f_md, SweepRow};
use fidvr_core::simulate::{run_scenario, ScenarioConfig, TrajectoryRecord};

pub fn default_sweep() -> &'static [SweepRow] {
    static ROWS: OnceLock<Vec<SweepRow>> = OnceLock::new();
    ROWS.get_or_init(|| sweep_f_md(&ScenarioConfig::default(), &default_f_md_values()).expect("sweep runs"))
}

pub fn config(f_md: f64) -> ScenarioConfig {
    ScenarioConfig::default().with_f_md(f_md).expect("valid f_md")
}

pub fn stall_run() -> &'static (ScenarioConfig, TrajectoryRecord) {
    static RUN: OnceLock<(ScenarioConfig, TrajectoryRecord)> = OnceLock::new();
    RUN.get_or_init(|| {
        let cfg = config(0.3);
        let rec = run_scenario(&cfg).expect("scenario runs");
        (cfg, rec)
    })
}

pub fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

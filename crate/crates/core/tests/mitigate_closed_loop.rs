mod common;

use common::{config, default_sweep, rel, stall_run};
use fidvr_core::experiment::{default_f_md_values, sweep_f_md, training_samples};
use fidvr_core::mitigate::{fit_linear_coeffs, plan_and_apply, LinearCoeffs, Weighting};
use fidvr_core::monitor::{monitor_pipeline, RecoveryEstimate, UtilityData};
use fidvr_core::simulate::{run_scenario, Actuation, ScenarioConfig};

fn local_coeffs() -> LinearCoeffs {
    fit_linear_coeffs(&training_samples(default_sweep()), Weighting::Linear).unwrap()
}

fn measured(cfg: &ScenarioConfig) -> RecoveryEstimate {
    let rec = run_scenario(cfg).unwrap();
    monitor_pipeline(&rec.measurements, &UtilityData::from_scenario(cfg))
        .unwrap()
        .expect("stall detected")
}

#[test]
fn learned_lines_fit_the_sweep() {
    let c = local_coeffs();
    let d = c.diagnostics.unwrap();
    assert_eq!(d.n, 8);
    assert!(d.r2_t1 >= 0.97 && d.r2_t2 >= 0.97, "{d:?}");
    assert!(c.alpha0 > 0.0 && c.beta0 > 0.0);
}

#[test]
fn achieved_recovery_tracks_the_target() {
    let (cfg, rec) = stall_run();
    let uncontrolled = rec.actual_times().unwrap().total;
    let est = measured(cfg);
    let coeffs = local_coeffs();
    for frac in [0.80, 0.85, 0.90] {
        for tau0 in [2.0, 3.0] {
            let t_sp = frac * uncontrolled;
            let out = plan_and_apply(&est.event(), &coeffs, t_sp, tau0, cfg).unwrap();
            assert!(out.plan.action_needed && out.plan.gamma < 1.0);
            let err = out.relative_error().expect("closed loop recovers");
            assert!(
                err.abs() < 0.05,
                "t_sp = {t_sp:.2}, tau0 = {tau0}: error {:.2}%",
                100.0 * err
            );
        }
    }
}

#[test]
fn no_action_plan_leaves_the_trajectory_alone() {
    let (cfg, rec) = stall_run();
    let est = measured(cfg);
    let out = plan_and_apply(&est.event(), &local_coeffs(), 100.0, 2.0, cfg).unwrap();
    assert_eq!(out.plan.gamma, 1.0);
    assert!(out.record.actuation_time.is_none());
    assert_eq!(out.record.truth, rec.truth);
}

#[test]
fn near_total_disconnection_recovers_right_after_actuation() {
    let (cfg, _) = stall_run();
    let tau0 = 2.0;
    let run = ScenarioConfig {
        actuation: Some(Actuation { tau0, gamma: 1e-6 }),
        ..cfg.clone()
    };
    let rec = run_scenario(&run).unwrap();
    let t = rec.actual_times().unwrap();
    assert!(t.total > tau0 && t.total < tau0 + 0.5, "{t:?}");
}

#[test]
fn same_cluster_surrogate_stays_close() {
    // Train on a transmission branch 10% stronger, test on the nominal one.
    let mut train = ScenarioConfig::default();
    train.net.y_trans = train.net.y_trans * 1.1;
    let rows = sweep_f_md(&train, &default_f_md_values()).unwrap();
    let coeffs = fit_linear_coeffs(&training_samples(&rows), Weighting::Linear).unwrap();

    let cfg = config(0.3);
    let uncontrolled = stall_run().1.actual_times().unwrap().total;
    let est = measured(&cfg);
    let t_sp = 0.85 * uncontrolled;
    let out = plan_and_apply(&est.event(), &coeffs, t_sp, 2.0, &cfg).unwrap();
    let achieved = out.achieved_total.unwrap();
    assert!(rel(achieved, t_sp) < 0.10, "{achieved} vs {t_sp}");
}

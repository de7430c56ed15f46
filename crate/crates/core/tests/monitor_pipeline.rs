mod common;

use common::{config, default_sweep, rel, stall_run};
use fidvr_core::monitor::{
    detect_stall, internal_voltage_from_measurement, monitor_pipeline, post_fault_voltage, to_internal, DetectParams,
    MeasurementSample, Monitor, UtilityData,
};
use fidvr_core::oracle::integrate_fth_ode;
use fidvr_core::simulate::{run_scenario, OscillationSpec, ScenarioConfig};

fn utility(cfg: &ScenarioConfig) -> UtilityData {
    UtilityData::from_scenario(cfg)
}

#[test]
fn internal_voltage_matches_ground_truth() {
    let (cfg, rec) = stall_run();
    for r in rec.truth.iter().step_by(37) {
        let v_i = internal_voltage_from_measurement(r.v0, r.i, cfg.net.y_fd).unwrap();
        assert!((v_i - r.v_i).norm() < 1e-10, "t = {}", r.t);
    }
}

#[test]
fn detection_is_prompt_and_plateau_rise_is_accurate() {
    let (cfg, rec) = stall_run();
    let stream: Vec<_> = rec
        .measurements
        .iter()
        .map(|m| to_internal(m, cfg.net.y_fd).unwrap())
        .collect();
    let ev = detect_stall(&stream, &DetectParams::default()).expect("stall detected");
    let clear = rec.fault_clear.unwrap();
    assert!(ev.detected_t - clear < 0.5, "{ev:?}");
    let truth = rec.actual_times().unwrap();
    assert!(
        rel(ev.delta_g, truth.delta_g) < 0.05,
        "{} vs {}",
        ev.delta_g,
        truth.delta_g
    );
}

#[test]
fn no_detection_without_motor_d() {
    let cfg = config(0.0);
    let rec = run_scenario(&cfg).unwrap();
    assert!(monitor_pipeline(&rec.measurements, &utility(&cfg)).unwrap().is_none());
}

#[test]
fn oscillations_alone_do_not_trigger() {
    for (freq, phase) in [(0.5, 0.0), (1.0, 0.0), (1.0, std::f64::consts::PI), (2.0, 1.0)] {
        let cfg = ScenarioConfig {
            oscillation: Some(OscillationSpec {
                amplitude: 0.05,
                frequency: freq,
                damping: 0.2,
                phase,
            }),
            t_end: 8.0,
            ..config(0.0)
        };
        let rec = run_scenario(&cfg).unwrap();
        let est = monitor_pipeline(&rec.measurements, &utility(&cfg)).unwrap();
        assert!(est.is_none(), "false positive at {freq} Hz, phase {phase}");
    }
}

#[test]
fn oscillations_do_not_hide_a_stall() {
    let cfg = ScenarioConfig {
        oscillation: Some(OscillationSpec {
            amplitude: 0.05,
            frequency: 1.0,
            damping: 0.2,
            phase: 0.0,
        }),
        ..config(0.3)
    };
    let rec = run_scenario(&cfg).unwrap();
    let est = monitor_pipeline(&rec.measurements, &utility(&cfg))
        .unwrap()
        .expect("stall detected");
    let truth = cfg.load.stall_admittance_sys().g_load();
    assert!(rel(est.g_stall_sys, truth) < 0.05, "{} vs {truth}", est.g_stall_sys);
}

#[test]
fn post_fault_voltage_matches_truth() {
    let (cfg, rec) = stall_run();
    let stream: Vec<_> = rec
        .measurements
        .iter()
        .map(|m| to_internal(m, cfg.net.y_fd).unwrap())
        .collect();
    let onset = rec.fault_clear.unwrap();
    let v = post_fault_voltage(&stream, onset).unwrap();
    let window: Vec<f64> = rec
        .truth
        .iter()
        .filter(|r| r.t >= onset + 1.0 && r.t < onset + 2.0)
        .map(|r| r.v_i.norm())
        .collect();
    let truth = window.iter().sum::<f64>() / window.len() as f64;
    assert!((v - truth).abs() < 1e-4, "{v} vs {truth}");
}

#[test]
fn stall_admittance_estimates_across_the_sweep() {
    for row in default_sweep() {
        let est = row.g_stall_est.expect("estimate present");
        assert!(
            rel(est, row.g_stall_true) < 0.05,
            "f_md = {}: {est} vs {}",
            row.f_md,
            row.g_stall_true
        );
    }
    let (cfg, rec) = stall_run();
    let est = monitor_pipeline(&rec.measurements, &utility(cfg)).unwrap().unwrap();
    let truth = cfg.load.stall_admittance_sys().b_load();
    assert!(rel(est.b_stall_sys, truth) < 0.05, "{} vs {truth}", est.b_stall_sys);
    assert!(!est.flags.clamped && !est.flags.composition_mismatch);
}

#[test]
fn recovery_estimates_within_ten_percent() {
    for row in default_sweep() {
        let (est, actual) = (row.total_est().unwrap(), row.total_actual().unwrap());
        assert!(rel(est, actual) < 0.10, "f_md = {}: {est} vs {actual}", row.f_md);
    }
}

#[test]
fn closed_form_t2_against_oracle() {
    let (cfg, rec) = stall_run();
    let start = rec.truth.iter().find(|r| r.stalled && r.f_th < 1.0).unwrap();
    let exact = integrate_fth_ode(&cfg.net, &cfg.load, start.v_i).unwrap();
    let sim = rec.relay_trip_duration().unwrap();
    assert!(rel(exact, sim) < 0.01, "{exact} vs {sim}");
    let extracted = rec.actual_times().unwrap().t2;
    assert!(rel(exact, extracted) < 0.01, "{exact} vs {extracted}");

    for row in default_sweep() {
        let cfg = config(row.f_md);
        let exact = integrate_fth_ode(&cfg.net, &cfg.load, fidvr_core::Complex64::new(0.8, 0.0)).unwrap();
        let approx = row.t2_est.unwrap();
        assert!(rel(approx, exact) <= 0.15, "f_md = {}: {approx} vs {exact}", row.f_md);
    }
}

#[test]
fn estimates_do_not_depend_on_the_power_base() {
    let (cfg, rec) = stall_run();
    let base = monitor_pipeline(&rec.measurements, &utility(cfg)).unwrap().unwrap();
    for k in [0.01, 0.5, 10.0] {
        let scaled: Vec<MeasurementSample> = rec
            .measurements
            .iter()
            .map(|m| MeasurementSample {
                t: m.t,
                v0: m.v0,
                i: m.i * k,
            })
            .collect();
        let mut util = utility(cfg);
        util.y_fd = util.y_fd * k;
        util.detect.delta_abs *= k;
        let est = monitor_pipeline(&scaled, &util).unwrap().unwrap();
        assert!(rel(est.t1_est.unwrap(), base.t1_est.unwrap()) < 1e-9);
        assert!(rel(est.t2_est.unwrap(), base.t2_est.unwrap()) < 1e-9);
        assert!(rel(est.g_stall_sys, k * base.g_stall_sys) < 1e-9);
        assert!(rel(est.g_stall_m, base.g_stall_m) < 1e-9);
    }
}

#[test]
fn streaming_monitor_agrees_with_batch() {
    let (cfg, rec) = stall_run();
    let batch = monitor_pipeline(&rec.measurements, &utility(cfg)).unwrap().unwrap();
    let mut live = Monitor::new(utility(cfg)).unwrap();
    let mut got = None;
    for m in &rec.measurements {
        if let Some(est) = live.push(m).unwrap() {
            got = Some((m.t, est));
            break;
        }
    }
    let (t_emit, est) = got.expect("streaming estimate");
    assert!(t_emit < rec.fault_clear.unwrap() + 2.1);
    assert_eq!(est, batch);
}

#[test]
fn light_measurement_noise_is_tolerated() {
    let cfg = ScenarioConfig {
        noise_sigma: 1e-3,
        seed: 11,
        ..config(0.3)
    };
    let rec = run_scenario(&cfg).unwrap();
    let est = monitor_pipeline(&rec.measurements, &utility(&cfg))
        .unwrap()
        .expect("stall detected");
    let truth = cfg.load.stall_admittance_sys().g_load();
    assert!(rel(est.g_stall_sys, truth) < 0.05, "{} vs {truth}", est.g_stall_sys);
}

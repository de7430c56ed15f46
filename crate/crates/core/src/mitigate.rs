//! Linear recovery-time model and smart-thermostat disconnection planning.
//!
//! Offline, `t1` and `t2` are regressed on the stall conductance rise `ΔG`.
//! Online, the connected fraction `γ` that makes `t1 + t2` hit a target is the
//! root of a quadratic in `γ`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{FidvrError, Result};
use crate::monitor::StallEvent;
use crate::simulate::{run_scenario, Actuation, ScenarioConfig, TrajectoryRecord};
use crate::SCHEMA_VERSION;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    Uniform,
    /// Weight each point by its own recovery time.
    #[default]
    Linear,
    Quadratic,
}

impl Weighting {
    fn weight(self, t: f64) -> f64 {
        match self {
            Weighting::Uniform => 1.0,
            Weighting::Linear => t,
            Weighting::Quadratic => t * t,
        }
    }
}

/// One training scenario.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingSample {
    pub delta_g: f64,
    pub t1: f64,
    pub t2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub r2_t1: f64,
    pub r2_t2: f64,
    pub n: usize,
    pub weighting: Weighting,
}

/// `t1 = alpha0 ΔG + alpha1`, `t2 = beta0 ΔG + beta1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearCoeffs {
    pub alpha0: f64,
    pub alpha1: f64,
    pub beta0: f64,
    pub beta1: f64,
    #[serde(default)]
    pub bus_id: String,
    #[serde(default)]
    pub cluster_id: String,
    pub diagnostics: Option<FitDiagnostics>,
}

impl LinearCoeffs {
    pub fn new(alpha0: f64, alpha1: f64, beta0: f64, beta1: f64) -> Self {
        LinearCoeffs {
            alpha0,
            alpha1,
            beta0,
            beta1,
            bus_id: String::new(),
            cluster_id: String::new(),
            diagnostics: None,
        }
    }

    pub fn with_ids(mut self, bus_id: impl Into<String>, cluster_id: impl Into<String>) -> Self {
        self.bus_id = bus_id.into();
        self.cluster_id = cluster_id.into();
        self
    }
}

/// Weighted straight line `y = slope x + intercept` and its weighted R².
pub fn weighted_line(xs: &[f64], ys: &[f64], ws: &[f64]) -> Result<(f64, f64, f64)> {
    let sw: f64 = ws.iter().sum();
    if !(sw > 0.0) {
        return Err(FidvrError::DegenerateFit("weights sum to zero".into()));
    }
    let xbar = xs.iter().zip(ws).map(|(x, w)| w * x).sum::<f64>() / sw;
    let ybar = ys.iter().zip(ws).map(|(y, w)| w * y).sum::<f64>() / sw;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for ((x, y), w) in xs.iter().zip(ys).zip(ws) {
        let (dx, dy) = (x - xbar, y - ybar);
        sxx += w * dx * dx;
        sxy += w * dx * dy;
        syy += w * dy * dy;
    }
    if !(sxx > 1e-300) {
        return Err(FidvrError::DegenerateFit("all ΔG values are equal".into()));
    }
    let slope = sxy / sxx;
    let intercept = ybar - slope * xbar;
    let ss_res: f64 = xs
        .iter()
        .zip(ys)
        .zip(ws)
        .map(|((x, y), w)| w * (y - slope * x - intercept).powi(2))
        .sum();
    let r2 = if syy > 0.0 { 1.0 - ss_res / syy } else { 1.0 };
    Ok((slope, intercept, r2))
}

pub fn fit_linear_coeffs(samples: &[TimingSample], weighting: Weighting) -> Result<LinearCoeffs> {
    if samples.len() < 3 {
        return Err(FidvrError::DegenerateFit(format!(
            "need at least 3 scenarios, got {}",
            samples.len()
        )));
    }
    if samples
        .iter()
        .any(|s| !(s.delta_g.is_finite() && s.t1.is_finite() && s.t2.is_finite()))
    {
        return Err(FidvrError::DegenerateFit("non-finite training sample".into()));
    }
    let xs: Vec<f64> = samples.iter().map(|s| s.delta_g).collect();
    let t1: Vec<f64> = samples.iter().map(|s| s.t1).collect();
    let t2: Vec<f64> = samples.iter().map(|s| s.t2).collect();
    let w1: Vec<f64> = t1.iter().map(|&t| weighting.weight(t)).collect();
    let w2: Vec<f64> = t2.iter().map(|&t| weighting.weight(t)).collect();
    let (alpha0, alpha1, r2_t1) = weighted_line(&xs, &t1, &w1)?;
    let (beta0, beta1, r2_t2) = weighted_line(&xs, &t2, &w2)?;
    Ok(LinearCoeffs {
        diagnostics: Some(FitDiagnostics {
            r2_t1,
            r2_t2,
            n: samples.len(),
            weighting,
        }),
        ..LinearCoeffs::new(alpha0, alpha1, beta0, beta1)
    })
}

pub fn predict_times(coeffs: &LinearCoeffs, delta_g: f64) -> (f64, f64) {
    (
        coeffs.alpha0 * delta_g + coeffs.alpha1,
        coeffs.beta0 * delta_g + coeffs.beta1,
    )
}

/// Predicted `(t1, t2)` when the connected fraction drops to `gamma` at `tau0`
/// after onset. Assumes the actuation lands inside the plateau.
pub fn predict_with_actuation(coeffs: &LinearCoeffs, g0: f64, gamma: f64, tau0: f64) -> (f64, f64) {
    let t2 = coeffs.beta0 * gamma * g0 + coeffs.beta1;
    let b = coeffs.alpha1 + coeffs.alpha0 * g0 * gamma;
    let c = coeffs.alpha0 * g0 * tau0 * (1.0 - gamma);
    let t1 = 0.5 * (b + (b * b + 4.0 * c).sqrt());
    (t1, t2)
}

/// Residual of the planning equation at `gamma`.
pub fn planning_residual(t_sp: f64, tau0: f64, g0: f64, coeffs: &LinearCoeffs, gamma: f64) -> f64 {
    let LinearCoeffs {
        alpha0: a0,
        alpha1: a1,
        beta0: b0,
        beta1: b1,
        ..
    } = *coeffs;
    (t_sp - b1 - b0 * g0 * gamma) * (t_sp - b1 - a1 - (b0 + a0) * g0 * gamma) - a0 * tau0 * g0 * (1.0 - gamma)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MitigationPlan {
    pub schema_version: u32,
    pub t_sp: f64,
    pub tau0: f64,
    pub g0: f64,
    /// Connected fraction after actuation.
    pub gamma: f64,
    pub disconnect_fraction: f64,
    pub predicted_t1: f64,
    pub predicted_t2: f64,
    pub uncontrolled_total: f64,
    /// Roots of the planning quadratic inside (0, 1) with a positive `t1`.
    pub roots: Vec<f64>,
    pub action_needed: bool,
    /// Two admissible roots; the larger was taken.
    pub ambiguous: bool,
    /// Predicted `t1` does not exceed `tau0`, so the command would land after the plateau.
    pub infeasible_timing: bool,
}

fn quadratic_roots(a: f64, b: f64, c: f64) -> Vec<f64> {
    if a.abs() < 1e-300 {
        return if b.abs() < 1e-300 { vec![] } else { vec![-c / b] };
    }
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return vec![];
    }
    let q = -0.5 * (b + b.signum() * disc.sqrt());
    if q == 0.0 {
        return vec![0.0];
    }
    let mut r = vec![q / a, c / q];
    r.sort_by(f64::total_cmp);
    r
}

pub fn solve_disconnect_fraction(t_sp: f64, tau0: f64, g0: f64, coeffs: &LinearCoeffs) -> Result<MitigationPlan> {
    if !(tau0 >= 0.0) {
        return Err(FidvrError::invalid("tau0", "must be non-negative"));
    }
    if !(g0 > 0.0) {
        return Err(FidvrError::invalid("g0", "must be positive"));
    }
    let LinearCoeffs {
        alpha0: a0,
        alpha1: a1,
        beta0: b0,
        beta1: b1,
        ..
    } = *coeffs;
    let (u1, u2) = predict_times(coeffs, g0);
    let uncontrolled = u1 + u2;
    let plan = |gamma: f64, roots: Vec<f64>, ambiguous: bool| {
        let (t1, t2) = predict_with_actuation(coeffs, g0, gamma, tau0);
        MitigationPlan {
            schema_version: SCHEMA_VERSION,
            t_sp,
            tau0,
            g0,
            gamma,
            disconnect_fraction: 1.0 - gamma,
            predicted_t1: t1,
            predicted_t2: t2,
            uncontrolled_total: uncontrolled,
            roots,
            action_needed: gamma < 1.0,
            ambiguous,
            infeasible_timing: gamma < 1.0 && t1 <= tau0,
        }
    };
    if uncontrolled <= t_sp {
        return Ok(plan(1.0, vec![], false));
    }
    if t_sp <= a1 + b1 {
        return Err(FidvrError::InfeasibleTarget(format!(
            "t_sp = {t_sp} s is below the zero-load floor {:.3} s",
            a1 + b1
        )));
    }
    let c1 = t_sp - b1;
    let c2 = t_sp - b1 - a1;
    let qa = b0 * (b0 + a0) * g0 * g0;
    let qb = -c1 * (b0 + a0) * g0 - c2 * b0 * g0 + a0 * tau0 * g0;
    let qc = c1 * c2 - a0 * tau0 * g0;
    let admissible: Vec<f64> = quadratic_roots(qa, qb, qc)
        .into_iter()
        .filter(|&g| g > 0.0 && g < 1.0 && c1 - b0 * g0 * g > 0.0)
        .collect();
    let plan = match admissible.as_slice() {
        [] => {
            return Err(FidvrError::InfeasibleTarget(format!(
                "no connected fraction in (0, 1) reaches t_sp = {t_sp} s with tau0 = {tau0} s"
            )))
        }
        [g] => plan(*g, admissible.clone(), false),
        [.., g] => {
            log::warn!("two admissible roots {admissible:?}; taking the larger");
            plan(*g, admissible.clone(), true)
        }
    };
    if plan.infeasible_timing {
        log::warn!(
            "predicted t1 = {:.2} s does not exceed tau0 = {tau0} s; the command arrives too late",
            plan.predicted_t1
        );
    }
    Ok(plan)
}

#[derive(Debug, Clone)]
pub struct ClosedLoopResult {
    pub plan: MitigationPlan,
    pub record: TrajectoryRecord,
    pub achieved_total: Option<f64>,
}

impl ClosedLoopResult {
    /// Signed error of the achieved recovery time relative to `t_sp`.
    pub fn relative_error(&self) -> Option<f64> {
        self.achieved_total.map(|t| (t - self.plan.t_sp) / self.plan.t_sp)
    }
}

/// Plans from the measured rise and re-runs the scenario with the thermostat command.
pub fn plan_and_apply(
    event: &StallEvent,
    coeffs: &LinearCoeffs,
    t_sp: f64,
    tau0: f64,
    config: &ScenarioConfig,
) -> Result<ClosedLoopResult> {
    let plan = solve_disconnect_fraction(t_sp, tau0, event.delta_g, coeffs)?;
    let mut cfg = config.clone();
    cfg.actuation = plan.action_needed.then_some(Actuation {
        tau0,
        gamma: plan.gamma,
    });
    if plan.action_needed && tau0 >= plan.uncontrolled_total {
        log::warn!("actuation at tau0 = {tau0} s comes after the predicted recovery; it will have no effect");
    }
    let record = run_scenario(&cfg)?;
    let achieved_total = match record.actual_times() {
        Ok(t) => Some(t.total),
        Err(e) => {
            log::warn!("closed-loop run: {e}");
            None
        }
    };
    Ok(ClosedLoopResult {
        plan,
        record,
        achieved_total,
    })
}

/// Coefficients keyed by bus and contingency cluster.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CoefficientStore {
    pub schema_version: u32,
    pub entries: Vec<LinearCoeffs>,
}

impl CoefficientStore {
    pub fn new() -> Self {
        CoefficientStore {
            schema_version: SCHEMA_VERSION,
            entries: Vec::new(),
        }
    }

    pub fn get(&self, bus_id: &str, cluster_id: &str) -> Option<&LinearCoeffs> {
        self.entries
            .iter()
            .find(|c| c.bus_id == bus_id && c.cluster_id == cluster_id)
    }

    /// Only entry, or the one matching both ids.
    pub fn lookup(&self, bus_id: Option<&str>, cluster_id: Option<&str>) -> Option<&LinearCoeffs> {
        match (bus_id, cluster_id) {
            (Some(b), Some(c)) => self.get(b, c),
            _ if self.entries.len() == 1 => self.entries.first(),
            _ => None,
        }
    }

    pub fn insert(&mut self, coeffs: LinearCoeffs) {
        match self
            .entries
            .iter_mut()
            .find(|c| c.bus_id == coeffs.bus_id && c.cluster_id == coeffs.cluster_id)
        {
            Some(slot) => *slot = coeffs,
            None => self.entries.push(coeffs),
        }
    }

    pub fn by_bus(&self) -> BTreeMap<&str, Vec<&LinearCoeffs>> {
        let mut out: BTreeMap<&str, Vec<&LinearCoeffs>> = BTreeMap::new();
        for c in &self.entries {
            out.entry(c.bus_id.as_str()).or_default().push(c);
        }
        out
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let store: CoefficientStore = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if store.schema_version != SCHEMA_VERSION {
            return Err(FidvrError::invalid(
                "schema_version",
                format!("expected {SCHEMA_VERSION}, got {}", store.schema_version),
            ));
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn published() -> LinearCoeffs {
        LinearCoeffs::new(39.5, 2.4, 17.5, 4.0)
    }

    #[test]
    fn predict_examples() {
        let (t1, t2) = predict_times(&published(), 0.19);
        assert!((t1 - 9.9).abs() < 0.05 && (t2 - 7.3).abs() < 0.05);
        let (t1, t2) = predict_times(&published(), 0.27);
        assert!((t1 - 13.1).abs() < 0.05 && (t2 - 8.7).abs() < 0.05);
        assert_eq!(predict_times(&published(), 0.0), (2.4, 4.0));
    }

    #[test]
    fn collinear_fit_is_exact() {
        let samples: Vec<_> = [0.07, 0.1, 0.19, 0.27]
            .iter()
            .map(|&g| TimingSample {
                delta_g: g,
                t1: 40.0 * g + 2.0,
                t2: 17.0 * g + 4.5,
            })
            .collect();
        for w in [Weighting::Uniform, Weighting::Linear, Weighting::Quadratic] {
            let c = fit_linear_coeffs(&samples, w).unwrap();
            assert_abs_diff_eq!(c.alpha0, 40.0, epsilon = 1e-10);
            assert_abs_diff_eq!(c.alpha1, 2.0, epsilon = 1e-12);
            assert_abs_diff_eq!(c.beta0, 17.0, epsilon = 1e-10);
            assert_abs_diff_eq!(c.beta1, 4.5, epsilon = 1e-12);
            assert_abs_diff_eq!(c.diagnostics.unwrap().r2_t1, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn too_few_or_equal_samples() {
        let s = TimingSample {
            delta_g: 0.1,
            t1: 6.0,
            t2: 5.0,
        };
        assert!(matches!(
            fit_linear_coeffs(&[s, s], Weighting::Linear),
            Err(FidvrError::DegenerateFit(_))
        ));
        assert!(matches!(
            fit_linear_coeffs(&[s, s, s], Weighting::Linear),
            Err(FidvrError::DegenerateFit(_))
        ));
    }

    #[test]
    fn table_iii_first_row() {
        let plan = solve_disconnect_fraction(14.0, 2.0, 0.19, &published()).unwrap();
        assert!((plan.gamma - 0.638).abs() < 1e-3, "{plan:?}");
        assert!((plan.disconnect_fraction - 0.36).abs() < 0.005);
        assert!(!plan.ambiguous && !plan.infeasible_timing);
        let plan = solve_disconnect_fraction(13.0, 3.0, 0.19, &published()).unwrap();
        assert!((plan.disconnect_fraction - 0.54).abs() < 0.005, "{plan:?}");
    }

    #[test]
    fn no_action_when_already_fast_enough() {
        let plan = solve_disconnect_fraction(18.0, 2.0, 0.19, &published()).unwrap();
        assert_eq!(plan.gamma, 1.0);
        assert!(!plan.action_needed);
        assert!((plan.uncontrolled_total - 17.2).abs() < 0.05);
    }

    #[test]
    fn unreachable_targets() {
        let err = solve_disconnect_fraction(6.0, 2.0, 0.19, &published()).unwrap_err();
        assert!(matches!(err, FidvrError::InfeasibleTarget(_)));
        let err = solve_disconnect_fraction(6.5, 6.0, 0.19, &published()).unwrap_err();
        assert!(matches!(err, FidvrError::InfeasibleTarget(_)));
    }

    #[test]
    fn store_round_trip() {
        let dir = std::env::temp_dir().join(format!("fidvr-store-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("coeffs.json");
        let mut store = CoefficientStore::new();
        store.insert(published().with_ids("135", "A"));
        store.insert(LinearCoeffs::new(1.0, 2.0, 3.0, 4.0).with_ids("135", "A"));
        store.insert(published().with_ids("120", "A"));
        assert_eq!(store.entries.len(), 2);
        store.save(&path).unwrap();
        let back = CoefficientStore::load(&path).unwrap();
        assert_eq!(back, store);
        assert_eq!(back.get("135", "A").unwrap().alpha0, 1.0);
        assert!(back.lookup(None, None).is_none());
        std::fs::remove_dir_all(dir).ok();
    }

    proptest! {
        #[test]
        fn back_substitution_hits_target(t_sp in 12.0..17.0f64, tau0 in 0.0..4.0f64, g0 in 0.15..0.25f64) {
            let c = published();
            match solve_disconnect_fraction(t_sp, tau0, g0, &c) {
                Ok(plan) if plan.action_needed => {
                    prop_assert!(planning_residual(t_sp, tau0, g0, &c, plan.gamma).abs() < 1e-9);
                    prop_assert!((plan.predicted_t1 + plan.predicted_t2 - t_sp).abs() < 1e-9);
                }
                Ok(_) | Err(FidvrError::InfeasibleTarget(_)) => {}
                Err(e) => prop_assert!(false, "{e}"),
            }
        }

        #[test]
        fn gamma_monotone(t_sp in 12.0..16.5f64, tau0 in 0.0..3.5f64, dt in 0.01..0.5f64, dtau in 0.01..0.5f64) {
            let c = published();
            let g = |t: f64, tau: f64| solve_disconnect_fraction(t, tau, 0.19, &c).ok().map(|p| p.gamma);
            if let (Some(a), Some(b)) = (g(t_sp, tau0), g(t_sp, tau0 + dtau)) {
                prop_assert!(b <= a + 1e-12);
            }
            if let (Some(a), Some(b)) = (g(t_sp, tau0), g(t_sp - dt, tau0)) {
                prop_assert!(b <= a + 1e-12);
            }
        }

        #[test]
        fn sign_change_brackets_root(t_sp in 7.4..17.1f64, tau0 in 0.0..3.0f64) {
            let c = published();
            let f0 = planning_residual(t_sp, tau0, 0.19, &c, 0.0);
            let f1 = planning_residual(t_sp, tau0, 0.19, &c, 1.0);
            prop_assert!(f1 < 0.0);
            if f0 > 0.0 {
                prop_assert!(solve_disconnect_fraction(t_sp, tau0, 0.19, &c).is_ok());
            }
        }

        #[test]
        fn uniform_matches_normal_equations(
            pts in proptest::collection::vec((0.0..0.5f64, 1.0..20.0f64), 3..12)
        ) {
            let xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
            let ys: Vec<f64> = pts.iter().map(|p| p.1).collect();
            let n = xs.len() as f64;
            let (sx, sy) = (xs.iter().sum::<f64>(), ys.iter().sum::<f64>());
            let sxx: f64 = xs.iter().map(|x| x * x).sum();
            let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| x * y).sum();
            let det = n * sxx - sx * sx;
            prop_assume!(det.abs() > 1e-6);
            let slope = (n * sxy - sx * sy) / det;
            let icpt = (sxx * sy - sx * sxy) / det;
            let (s, i, _) = weighted_line(&xs, &ys, &vec![1.0; xs.len()]).unwrap();
            prop_assert!((s - slope).abs() < 1e-6 * slope.abs().max(1.0));
            prop_assert!((i - icpt).abs() < 1e-6 * icpt.abs().max(1.0));
        }
    }
}

use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use fidvr_core::experiment::{
    read_sweep_csv, reproduce_reference_tables, sweep_f_md, training_samples, write_sweep_csv,
};
use fidvr_core::mitigate::{fit_linear_coeffs, plan_and_apply, CoefficientStore, Weighting};
use fidvr_core::monitor::{monitor_pipeline, Monitor, RecoveryEstimate, UtilityData};
use fidvr_core::simulate::{
    measurement_stream, run_scenario, scenario_report, write_measurements_csv, write_truth_csv, ScenarioConfig,
    TrajectoryRecord,
};
use fidvr_core::{FidvrError, SCHEMA_VERSION};
use serde::Serialize;

// Stdout may be a closed pipe (`| head`); losing the echo is fine.
macro_rules! say {
    ($($arg:tt)*) => {{
        let _ = writeln!(io::stdout(), $($arg)*);
    }};
}

const EXIT_VALIDATION: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

/// Fault-induced delayed voltage recovery: simulate, monitor, learn, mitigate.
#[derive(Parser)]
#[command(name = "fidvr", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write trajectory, measurements and report.
    Simulate(SimulateArgs),
    /// Sweep a scenario parameter and tabulate actual and estimated times.
    Sweep(SweepArgs),
    /// Run the stall monitor over a measurement CSV (`-` for stdin).
    Monitor(MonitorArgs),
    /// Fit linear recovery-time coefficients from a sweep table.
    Learn(LearnArgs),
    /// Plan thermostat disconnection for a target recovery time and re-run closed loop.
    Mitigate(MitigateArgs),
    /// Re-evaluate the reference estimate and shedding tables.
    Tables(TablesArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario TOML; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the measurement-noise seed from the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepParam {
    #[value(name = "f_md")]
    FMd,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "f_md")]
    param: SweepParam,
    /// Comma-separated values, e.g. `0.1,0.2,0.3`.
    #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
    values: Vec<f64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct MonitorArgs {
    /// Measurement CSV, or `-` to read stdin.
    measurements: String,
    /// Utility data TOML (composition, feeder admittance, relay).
    #[arg(long, conflicts_with = "config", required_unless_present = "config")]
    utility: Option<PathBuf>,
    /// Take utility data from a scenario TOML instead.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Also write `estimate.json` and a manifest here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum WeightingArg {
    Uniform,
    Linear,
    Quadratic,
}

impl From<WeightingArg> for Weighting {
    fn from(w: WeightingArg) -> Self {
        match w {
            WeightingArg::Uniform => Weighting::Uniform,
            WeightingArg::Linear => Weighting::Linear,
            WeightingArg::Quadratic => Weighting::Quadratic,
        }
    }
}

#[derive(Args)]
struct LearnArgs {
    #[arg(long)]
    sweep: PathBuf,
    /// Directory holding `coeffs.json`; an existing store is merged into.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "")]
    bus_id: String,
    #[arg(long, default_value = "")]
    cluster_id: String,
    #[arg(long, value_enum, default_value = "linear")]
    weighting: WeightingArg,
}

#[derive(Args)]
struct MitigateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Coefficient store written by `learn`.
    #[arg(long)]
    coeffs: PathBuf,
    #[arg(long)]
    bus_id: Option<String>,
    #[arg(long)]
    cluster_id: Option<String>,
    /// Target recovery time in seconds.
    #[arg(long)]
    tsp: f64,
    /// Actuation delay after stall onset in seconds.
    #[arg(long)]
    tau0: f64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TablesArgs {
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    config_path: Option<PathBuf>,
    seed: Option<u64>,
    output_dir: PathBuf,
    schema_version: u32,
    tool_version: &'static str,
    timestamp: String,
}

#[derive(Serialize)]
struct MonitorOutput {
    schema_version: u32,
    detected: bool,
    estimate: Option<RecoveryEstimate>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FIDVR_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let validation = e
                .chain()
                .any(|c| c.downcast_ref::<FidvrError>().is_some_and(FidvrError::is_validation) || c.is::<UsageError>());
            ExitCode::from(if validation { EXIT_VALIDATION } else { EXIT_RUNTIME })
        }
    }
}

#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Sweep(a) => sweep(a),
        Command::Monitor(a) => monitor(a),
        Command::Learn(a) => learn(a),
        Command::Mitigate(a) => mitigate(a),
        Command::Tables(a) => tables(a),
    }
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> anyhow::Result<ScenarioConfig> {
    let mut cfg = match path {
        Some(p) => ScenarioConfig::from_path(p).with_context(|| format!("loading {}", p.display()))?,
        None => ScenarioConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn prepare_out(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn create(dir: &Path, name: &str) -> anyhow::Result<BufWriter<File>> {
    let path = dir.join(name);
    let f = File::create(&path).with_context(|| format!("writing {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> anyhow::Result<()> {
    let mut w = create(dir, name)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn write_manifest(command: &str, config: Option<&Path>, seed: Option<u64>, out: &Path) -> anyhow::Result<()> {
    let manifest = RunManifest {
        command: command.to_owned(),
        config_path: config.map(Path::to_path_buf),
        seed,
        output_dir: out.to_path_buf(),
        schema_version: SCHEMA_VERSION,
        tool_version: env!("CARGO_PKG_VERSION"),
        timestamp: chrono::Utc::now().to_rfc3339(),
    };
    write_json(out, "manifest.json", &manifest)
}

fn write_record(dir: &Path, prefix: &str, record: &TrajectoryRecord) -> anyhow::Result<()> {
    let mut w = create(dir, &format!("{prefix}measurements.csv"))?;
    write_measurements_csv(&mut w, &record.measurements)?;
    w.flush()?;
    let mut w = create(dir, &format!("{prefix}truth.csv"))?;
    write_truth_csv(&mut w, &record.truth)?;
    w.flush()?;
    Ok(())
}

fn simulate(a: SimulateArgs) -> anyhow::Result<()> {
    let cfg = load_config(a.config.as_deref(), a.seed)?;
    prepare_out(&a.out)?;
    let record = run_scenario(&cfg)?;
    write_record(&a.out, "", &record)?;
    let report = scenario_report(&record);
    write_json(&a.out, "report.json", &report)?;
    fs::write(a.out.join("config.toml"), cfg.to_toml_string())?;
    write_manifest("simulate", a.config.as_deref(), Some(cfg.seed), &a.out)?;
    say!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn sweep(a: SweepArgs) -> anyhow::Result<()> {
    let SweepParam::FMd = a.param;
    if a.values.is_empty() {
        bail!(UsageError("--values must list at least one value".into()));
    }
    let cfg = load_config(a.config.as_deref(), a.seed)?;
    prepare_out(&a.out)?;
    let rows = sweep_f_md(&cfg, &a.values)?;
    let mut w = create(&a.out, "sweep.csv")?;
    write_sweep_csv(&mut w, &rows)?;
    w.flush()?;
    write_manifest("sweep", a.config.as_deref(), Some(cfg.seed), &a.out)?;
    log::info!("{} sweep rows written", rows.len());
    Ok(())
}

fn stream_estimate<R: Read>(reader: R, utility: UtilityData) -> anyhow::Result<Option<RecoveryEstimate>> {
    let mut live = Monitor::new(utility)?;
    for sample in measurement_stream(reader)? {
        if let Some(est) = live.push(&sample?)? {
            return Ok(Some(est));
        }
    }
    Ok(live.finish()?)
}

fn monitor(a: MonitorArgs) -> anyhow::Result<()> {
    let utility = match (&a.utility, &a.config) {
        (Some(p), _) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let u: UtilityData = toml::from_str(&text).map_err(FidvrError::from)?;
            u.validate()?;
            u
        }
        (None, cfg) => UtilityData::from_scenario(&load_config(cfg.as_deref(), None)?),
    };
    let estimate = if a.measurements == "-" {
        stream_estimate(io::stdin().lock(), utility)?
    } else {
        let f = File::open(&a.measurements).with_context(|| format!("opening {}", a.measurements))?;
        let samples: Vec<_> = measurement_stream(BufReader::new(f))?.collect::<Result<_, _>>()?;
        monitor_pipeline(&samples, &utility)?
    };
    let output = MonitorOutput {
        schema_version: SCHEMA_VERSION,
        detected: estimate.is_some(),
        estimate,
    };
    if let Some(out) = &a.out {
        prepare_out(out)?;
        write_json(out, "estimate.json", &output)?;
        write_manifest("monitor", a.utility.as_deref().or(a.config.as_deref()), None, out)?;
    }
    say!("{}", serde_json::to_string_pretty(&output)?);
    Ok(())
}

fn learn(a: LearnArgs) -> anyhow::Result<()> {
    let f = File::open(&a.sweep).with_context(|| format!("opening {}", a.sweep.display()))?;
    let rows = read_sweep_csv(BufReader::new(f))?;
    let coeffs = fit_linear_coeffs(&training_samples(&rows), a.weighting.into())?.with_ids(a.bus_id, a.cluster_id);
    prepare_out(&a.out)?;
    let path = a.out.join("coeffs.json");
    let mut store = if path.exists() {
        CoefficientStore::load(&path)?
    } else {
        CoefficientStore::new()
    };
    store.insert(coeffs.clone());
    store.save(&path)?;
    write_manifest("learn", Some(&a.sweep), None, &a.out)?;
    say!("{}", serde_json::to_string_pretty(&coeffs)?);
    Ok(())
}

fn mitigate(a: MitigateArgs) -> anyhow::Result<()> {
    let cfg = load_config(a.config.as_deref(), a.seed)?;
    let store = CoefficientStore::load(&a.coeffs).with_context(|| format!("loading {}", a.coeffs.display()))?;
    let Some(coeffs) = store.lookup(a.bus_id.as_deref(), a.cluster_id.as_deref()) else {
        bail!(UsageError(format!(
            "no unique coefficient entry in {} for bus {:?}, cluster {:?}",
            a.coeffs.display(),
            a.bus_id,
            a.cluster_id
        )));
    };
    prepare_out(&a.out)?;

    let uncontrolled = run_scenario(&cfg)?;
    write_json(&a.out, "uncontrolled_report.json", &scenario_report(&uncontrolled))?;
    let Some(estimate) = monitor_pipeline(&uncontrolled.measurements, &UtilityData::from_scenario(&cfg))? else {
        return Err(FidvrError::NotFidvr("no stall detected in the uncontrolled run".into()).into());
    };
    write_json(&a.out, "estimate.json", &estimate)?;

    let result = plan_and_apply(&estimate.event(), coeffs, a.tsp, a.tau0, &cfg)?;
    write_json(&a.out, "plan.json", &result.plan)?;
    write_record(&a.out, "closed_loop_", &result.record)?;
    write_json(&a.out, "report.json", &scenario_report(&result.record))?;
    write_manifest("mitigate", a.config.as_deref(), Some(cfg.seed), &a.out)?;

    match result.achieved_total {
        Some(t) => say!(
            "disconnect {:.1}% at tau0 = {} s: target {:.2} s, achieved {:.2} s",
            100.0 * result.plan.disconnect_fraction,
            a.tau0,
            a.tsp,
            t
        ),
        None => say!(
            "disconnect {:.1}%: closed loop did not recover",
            100.0 * result.plan.disconnect_fraction
        ),
    }
    Ok(())
}

fn tables(a: TablesArgs) -> anyhow::Result<()> {
    let report = reproduce_reference_tables()?;
    prepare_out(&a.out)?;
    let mut w = csv::Writer::from_writer(create(&a.out, "time_estimates.csv")?);
    for r in &report.estimates {
        w.serialize(r)?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_writer(create(&a.out, "disconnect_fractions.csv")?);
    for r in &report.shedding {
        w.serialize(r)?;
    }
    w.flush()?;
    write_json(&a.out, "tables.json", &report)?;
    write_manifest("tables", None, None, &a.out)?;

    for r in &report.estimates {
        say!(
            "{} dG={:<6} t1={:.2} (ref {:.1})  t2={:.2} (ref {:.1})",
            verdict(r.pass),
            r.delta_g,
            r.t1,
            r.t1_ref,
            r.t2,
            r.t2_ref
        );
    }
    for r in &report.shedding {
        say!(
            "{} t_sp={} tau0={}  disconnect {:.1}% (ref {:.0}%)",
            verdict(r.pass),
            r.t_sp,
            r.tau0,
            r.disconnect_pct,
            r.disconnect_pct_ref
        );
    }
    say!(
        "{}",
        if report.all_pass() {
            "all rows within tolerance"
        } else {
            "some rows out of tolerance"
        }
    );
    Ok(())
}

fn verdict(pass: bool) -> &'static str {
    if pass {
        "PASS"
    } else {
        "FAIL"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn values_split_on_commas() {
        let cli = Cli::try_parse_from(["fidvr", "sweep", "--values", "0.1,0.2", "--out", "x"]).unwrap();
        let Command::Sweep(a) = cli.command else { panic!() };
        assert_eq!(a.values, vec![0.1, 0.2]);
    }

    #[test]
    fn monitor_needs_utility_or_config() {
        assert!(Cli::try_parse_from(["fidvr", "monitor", "m.csv"]).is_err());
        assert!(Cli::try_parse_from(["fidvr", "monitor", "m.csv", "--utility", "u", "--config", "c"]).is_err());
        assert!(Cli::try_parse_from(["fidvr", "monitor", "-", "--utility", "u"]).is_ok());
    }

    #[test]
    fn validation_errors_map_to_exit_two() {
        let e: anyhow::Error = FidvrError::Invalid {
            field: "dt_sim".into(),
            reason: "must be positive".into(),
        }
        .into();
        assert!(e
            .chain()
            .any(|c| c.downcast_ref::<FidvrError>().is_some_and(FidvrError::is_validation)));
    }
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde_json::{json, Value};

use lagtraffic::assimilation::{run_filter, select_probes, MeasurementModel, ProbeSet, TruthSampling};
use lagtraffic::io::{
    load_scenario, read_trajectory_csv, write_cov_csv, write_estimate_csv, write_field_csv, write_json,
    write_spacing_csv, write_trajectory_csv, LoadedScenario, ReadOptions, RunManifest, ScenarioConfig,
    TrajectorySidecar,
};
use lagtraffic::macroscopic::{
    eulerian_fields, queue_threshold, rmse_counts, spacing_metrics, trajectory_points, true_queue_series,
    QueueSeries, Scope,
};
use lagtraffic::moments::{integrate_moments, CovScheme, DiffusionScaling, MomentConfig};
use lagtraffic::oracles::{compare_covariances, convergence_study, deviation_covariance, mc_speed_moments, ConvergenceConfig};
use lagtraffic::params::filter_dt;
use lagtraffic::relations::{mean_speed, speed_variance};
use lagtraffic::sim::simulate_ensemble;
use lagtraffic::units::kmh_to_mps;
use lagtraffic::{rng, Boundary, Error, HistoricalSample, MeanRelation, ParamDistribution, RelationTable, Scenario, SignalSpec, TrajectorySet};

/// Stochastic Lagrangian traffic simulation, moment integration and probe
/// data assimilation.
#[derive(Parser)]
#[command(name = "lagtraffic", version)]
struct Cli {
    /// Worker threads for ensembles and sweeps (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Directory searched for scenario and law files given by relative
    /// path when they are not found from the working directory.
    #[arg(long, global = true, env = "LAGTRAFFIC_CONFIG_DIR")]
    config_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate sample paths of the heterogeneous platoon.
    Simulate(SimulateArgs),
    /// Run the filter against a truth at one or more penetration rates.
    Estimate(EstimateArgs),
    /// Check the moment dynamics against Monte-Carlo oracles.
    Verify(VerifyArgs),
    /// Aggregate trajectories into density and speed fields.
    Fields(FieldsArgs),
}

#[derive(Args)]
struct SimulateArgs {
    scenario: PathBuf,
    /// Number of independent sample paths; more than one also writes their
    /// average.
    #[arg(long, default_value_t = 1)]
    ensemble: usize,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct EstimateArgs {
    scenario: PathBuf,
    /// Truth trajectories; simulated from the scenario seed when omitted.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Lane filter applied when reading the truth.
    #[arg(long)]
    lane: Option<i64>,
    /// Penetration rate, or a comma-separated sweep.
    #[arg(long, value_delimiter = ',')]
    penetration: Vec<f64>,
    #[arg(long, value_enum)]
    model: Option<ModelArg>,
    #[arg(long)]
    seed: Option<u64>,
    /// Times (s) at which to write the full covariance.
    #[arg(long, value_delimiter = ',')]
    dump_cov: Vec<f64>,
    /// Speed below which a vehicle counts as queued, km/h.
    #[arg(long, default_value_t = 5.0)]
    queue_speed_kmh: f64,
    /// Print metrics as JSON.
    #[arg(long)]
    json: bool,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Unequipped,
    Equipped,
}

#[derive(Debug, Clone, Copy, PartialEq, ValueEnum)]
enum Suite {
    Moments,
    Convergence,
    Deviation,
    All,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, value_enum, default_value = "all")]
    suite: Suite,
    /// Parameter law (SI JSON); the arterial reference law by default.
    #[arg(long)]
    law: Option<PathBuf>,
    /// Seeds per ensemble size in the convergence suite.
    #[arg(long, default_value_t = 20)]
    seeds: u64,
    /// Oracle draws in the moments suite.
    #[arg(long, default_value_t = 1_000_000)]
    draws: usize,
    /// Replications in the deviation suite.
    #[arg(long, default_value_t = 200)]
    replications: usize,
    #[arg(long)]
    json: bool,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct FieldsArgs {
    /// Trajectory CSV (`veh_id,t_s,x_m[,v_mps[,s_m]]`).
    input: PathBuf,
    /// Space bin, m.
    #[arg(long)]
    dx: f64,
    /// Time bin, s.
    #[arg(long)]
    dt: f64,
    #[arg(long)]
    lane: Option<i64>,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

enum Failure {
    Core(Error),
    Oracle(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Core(e.into())
    }
}

type CmdResult = Result<(), Failure>;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Physics { .. } | Error::Singular(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(j) = cli.jobs {
        if j == 0 {
            eprintln!("error: --jobs must be at least 1");
            return ExitCode::from(2);
        }
        rayon::ThreadPoolBuilder::new().num_threads(j).build_global().ok();
    }
    let ctx = Context {
        config_dir: cli.config_dir,
    };
    let res = match cli.command {
        Command::Simulate(a) => simulate(&ctx, a),
        Command::Estimate(a) => estimate(&ctx, a),
        Command::Verify(a) => verify(&ctx, a),
        Command::Fields(a) => fields(&ctx, a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
        Err(Failure::Oracle(msg)) => {
            eprintln!("oracle check failed:\n{msg}");
            ExitCode::from(4)
        }
    }
}

struct Context {
    config_dir: Option<PathBuf>,
}

impl Context {
    fn locate(&self, p: &Path) -> Result<PathBuf, Error> {
        if p.exists() {
            return Ok(p.to_path_buf());
        }
        if let Some(dir) = &self.config_dir {
            let q = dir.join(p);
            if p.is_relative() && q.exists() {
                return Ok(q);
            }
        }
        Err(Error::Config(format!("{} not found", p.display())))
    }

    fn scenario(&self, p: &Path) -> Result<LoadedScenario, Error> {
        let loaded = load_scenario(self.locate(p)?)?;
        for w in &loaded.warnings {
            eprintln!("warning: {}: {w}", p.display());
        }
        Ok(loaded)
    }
}

fn manifest(command: &str, config: Value, seed: u64, args: Value, outputs: Vec<PathBuf>) -> RunManifest {
    let mut m = RunManifest::new(command, config, seed);
    if let Value::Object(a) = args {
        m.args = a.into_iter().collect();
    }
    m.outputs = outputs;
    m
}

/// Manifest first, then outputs.
fn start_run(out: &Path, m: &RunManifest) -> Result<(), Error> {
    fs::create_dir_all(out)?;
    m.write(out.join(format!("{}.manifest.json", m.command)))
}

fn relation(cfg: &ScenarioConfig, sample: HistoricalSample) -> Box<dyn MeanRelation> {
    if cfg.tabulate {
        Box::new(RelationTable::new(sample))
    } else {
        Box::new(sample)
    }
}

// ---------------------------------------------------------------------------

fn simulate(ctx: &Context, a: SimulateArgs) -> CmdResult {
    let cfg = ctx.scenario(&a.scenario)?.config;
    let seed = a.seed.unwrap_or(cfg.seed);
    if a.ensemble == 0 {
        return Err(Error::Config("--ensemble must be at least 1".into()).into());
    }
    let names: Vec<PathBuf> = if a.ensemble == 1 {
        vec![a.out.join("trajectories.csv")]
    } else {
        let mut v: Vec<PathBuf> = (0..a.ensemble).map(|m| a.out.join(format!("member_{m:03}.csv"))).collect();
        v.push(a.out.join("average.csv"));
        v
    };
    let m = manifest(
        "simulate",
        cfg.to_json(),
        seed,
        json!({"scenario": a.scenario, "ensemble": a.ensemble}),
        names.clone(),
    );
    start_run(&a.out, &m)?;

    let ens = simulate_ensemble(a.ensemble, &cfg.scenario(), &cfg.distribution, seed)?;
    for (i, member) in ens.members.iter().enumerate() {
        let side = TrajectorySidecar {
            dt_s: Some(member.dt()),
            seed: Some(seed),
            scenario: Some(json!({"member": i, "config_hash": m.config_hash})),
            params: member.params().map(<[_]>::to_vec),
            ..Default::default()
        };
        write_trajectory_csv(&names[i], member, Some(&side))?;
    }
    if a.ensemble > 1 {
        write_spacing_csv(&names[a.ensemble], &ens.average)?;
    }
    let first = &ens.members[0];
    println!(
        "simulated {} path(s): {} vehicles, {:.1} s at dt = {:.4} s -> {}",
        a.ensemble,
        first.n_vehicles(),
        first.span(),
        first.dt(),
        a.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------

fn rate_key(rate: f64) -> u64 {
    (rate * 1000.0).round() as u64
}

fn estimate(ctx: &Context, a: EstimateArgs) -> CmdResult {
    let mut cfg = ctx.scenario(&a.scenario)?.config;
    let seed = a.seed.unwrap_or(cfg.seed);
    cfg.seed = seed;
    if let Some(m) = a.model {
        cfg.model = match m {
            ModelArg::Unequipped => MeasurementModel::Unequipped,
            ModelArg::Equipped => MeasurementModel::Equipped,
        };
    }
    let rates = if a.penetration.is_empty() {
        match cfg.penetration {
            Some(p) => vec![p],
            None => return Err(Error::Config("no penetration rate: pass --penetration or set it in the scenario".into()).into()),
        }
    } else {
        a.penetration.clone()
    };
    if let Some(p) = rates.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::Config(format!("penetration must lie in [0, 1], got {p}")).into());
    }
    let est_path = |r: f64| a.out.join(format!("estimate_p{r}.csv"));
    let cov_path = |r: f64, t: f64| a.out.join(format!("cov_p{r}_t{t}.csv"));
    let mut outputs: Vec<PathBuf> = rates.iter().map(|&r| est_path(r)).collect();
    for &r in &rates {
        outputs.extend(a.dump_cov.iter().map(|&t| cov_path(r, t)));
    }
    outputs.push(a.out.join("metrics.json"));
    let m = manifest(
        "estimate",
        cfg.to_json(),
        seed,
        json!({
            "scenario": a.scenario,
            "truth": a.truth,
            "lane": a.lane,
            "penetration": rates,
            "dump_cov": a.dump_cov,
            "queue_speed_kmh": a.queue_speed_kmh,
        }),
        outputs,
    );
    start_run(&a.out, &m)?;

    let scenario = cfg.scenario();
    let truth = match &a.truth {
        Some(p) => {
            let t = read_trajectory_csv(ctx.locate(p)?, &ReadOptions { dt: None, lane: a.lane })?.set;
            if t.n_vehicles() != cfg.n_vehicles {
                return Err(Error::Config(format!(
                    "truth has {} followers but the scenario has {}",
                    t.n_vehicles(),
                    cfg.n_vehicles
                ))
                .into());
            }
            t
        }
        None => simulate_ensemble(1, &scenario, &cfg.distribution, seed)?.members.remove(0),
    };
    let rel = relation(&cfg, cfg.historical_sample()?);
    let s_q = queue_threshold(rel.as_ref(), kmh_to_mps(a.queue_speed_kmh))?;
    let v_q = kmh_to_mps(a.queue_speed_kmh);

    let rows = rates
        .par_iter()
        .map(|&rate| -> Result<Value, Error> {
            let key = rate_key(rate);
            let probes = if rate == 0.0 {
                ProbeSet::none(cfg.n_vehicles)
            } else {
                select_probes(cfg.n_vehicles, rate, &mut rng::substream(seed, key))?
            };
            let mut fc = cfg.filter_config(a.dump_cov.clone());
            fc.seed = rng::child_seed(seed, key);
            fc.check_hygiene = true;
            let out = run_filter(&scenario, &truth, &probes, rel.as_ref(), &fc)?;
            write_estimate_csv(est_path(rate), &out.series)?;
            for (cov, &t) in out.series.cov_dumps.iter().zip(&a.dump_cov) {
                write_cov_csv(cov_path(rate, t), cov)?;
            }
            metrics_row(&out.series, &truth, &probes, fc.sampling, s_q, v_q, &out.hygiene)
        })
        .collect::<Result<Vec<_>, _>>()?;

    let report = json!({"model": cfg.model, "seed": seed, "rows": rows});
    write_json(a.out.join("metrics.json"), &report)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report).expect("json"));
    } else {
        println!("{:>8} {:>7} {:>9} {:>9} {:>11} {:>9}", "rate", "probes", "rmse_m", "mape_pct", "queue_rmse", "hygiene");
        for r in &rows {
            println!(
                "{:>8.3} {:>7} {:>9.3} {:>9.2} {:>11.3} {:>9}",
                r["penetration"].as_f64().unwrap_or(f64::NAN),
                r["probes"].as_u64().unwrap_or(0),
                r["rmse_m"].as_f64().unwrap_or(f64::NAN),
                r["mape_pct"].as_f64().unwrap_or(f64::NAN),
                r["queue_rmse_veh"].as_f64().unwrap_or(f64::NAN),
                if r["hygiene"]["clean"] == json!(true) { "ok" } else { "VIOLATED" }
            );
        }
    }
    Ok(())
}

fn metrics_row(
    series: &lagtraffic::moments::EstimateSeries,
    truth: &TrajectorySet,
    probes: &ProbeSet,
    sampling: TruthSampling,
    s_q: f64,
    v_q: f64,
    hygiene: &lagtraffic::assimilation::Hygiene,
) -> Result<Value, Error> {
    let all = spacing_metrics(series, truth, probes, Scope::All, sampling)?;
    let unmeasured = if probes.len() < probes.n_vehicles() {
        let u = spacing_metrics(series, truth, probes, Scope::Unmeasured, sampling)?;
        json!({"rmse_m": u.rmse_m, "mape_pct": u.mape_pct})
    } else {
        Value::Null
    };
    let queues = QueueSeries::from_estimates(series, s_q);
    let true_q = true_queue_series(truth, &queues.times, v_q, sampling);
    let est_q: Vec<f64> = queues.estimates.iter().map(|e| e.count as f64).collect();
    let true_f: Vec<f64> = true_q.iter().map(|&q| q as f64).collect();
    let k = (0..true_q.len()).max_by_key(|&k| (true_q[k], std::cmp::Reverse(k))).unwrap_or(0);
    let at = queues.estimates[k];
    Ok(json!({
        "penetration": probes.penetration(),
        "probes": probes.len(),
        "rmse_m": all.rmse_m,
        "mape_pct": all.mape_pct,
        "unmeasured": unmeasured,
        "queue_rmse_veh": rmse_counts(&est_q, &true_f)?,
        "max_true_queue": {
            "t_s": queues.times[k],
            "true_veh": true_q[k],
            "estimate_veh": at.count,
            "ci95": [at.lower, at.upper],
        },
        "hygiene": {
            "clean": hygiene.clean(),
            "max_asymmetry": hygiene.max_asymmetry,
            "psd_failures": hygiene.psd_failures,
            "trace_increases": hygiene.trace_increases,
            "psd_clips": hygiene.psd_clips,
        },
    }))
}

// ---------------------------------------------------------------------------

const SAMPLE_SIZE: usize = 10_000;
const SAMPLE_SEED: u64 = 0xacce;

struct Check {
    suite: &'static str,
    pass: bool,
    summary: String,
    detail: Value,
}

fn arterial(n: usize, horizon: f64) -> Scenario {
    Scenario::uniform(n, horizon, 36.0, Boundary::Signal(SignalSpec::arterial()))
}

fn verify(ctx: &Context, a: VerifyArgs) -> CmdResult {
    let dist = match &a.law {
        Some(p) => ParamDistribution::read_json(ctx.locate(p)?)?,
        None => ParamDistribution::signal_reference(2.0, 2.0)?,
    };
    let m = manifest(
        "verify",
        serde_json::to_value(dist).expect("law serializes"),
        SAMPLE_SEED,
        json!({
            "suite": format!("{:?}", a.suite).to_lowercase(),
            "seeds": a.seeds,
            "draws": a.draws,
            "replications": a.replications,
        }),
        vec![a.out.join("verify.json")],
    );
    start_run(&a.out, &m)?;

    let sample = dist.draw_sample(SAMPLE_SIZE, &mut rng::stream(SAMPLE_SEED))?;
    let want = |s: Suite| a.suite == s || a.suite == Suite::All;
    let mut checks = Vec::new();
    if want(Suite::Moments) {
        checks.push(verify_moments(&dist, &sample, a.draws)?);
    }
    if want(Suite::Convergence) {
        checks.push(verify_convergence(&dist, a.seeds)?);
    }
    if want(Suite::Deviation) {
        checks.push(verify_deviation(&dist, &sample, a.replications)?);
    }

    let report = json!({
        "passed": checks.iter().all(|c| c.pass),
        "checks": checks.iter().map(|c| json!({"suite": c.suite, "pass": c.pass, "summary": c.summary, "detail": c.detail})).collect::<Vec<_>>(),
    });
    write_json(a.out.join("verify.json"), &report)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report).expect("json"));
    } else {
        for c in &checks {
            println!("[{}] {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.suite, c.summary);
        }
    }
    let failed: Vec<String> = checks
        .iter()
        .filter(|c| !c.pass)
        .map(|c| format!("{}: {}", c.suite, c.summary))
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Oracle(failed.join("\n")))
    }
}

/// Within `k` standard errors, or agreement to rounding when the standard
/// error itself is rounding noise.
fn within(diff: f64, se: f64, scale: f64, k: f64) -> (bool, f64) {
    let floor = 1e-12 * scale.abs().max(1.0);
    if diff.abs() <= floor {
        return (true, 0.0);
    }
    if se > 0.0 {
        let z = diff.abs() / se;
        (z <= k, z)
    } else {
        (false, f64::INFINITY)
    }
}

fn verify_moments(dist: &ParamDistribution, sample: &HistoricalSample, draws: usize) -> Result<Check, Error> {
    let spacings = [15.0, 30.0, 60.0];
    let mc = mc_speed_moments(&spacings, dist, draws, &mut rng::stream(10))?;
    // the sample relation is itself a J-draw estimate
    let inflate = (1.0 + draws as f64 / sample.len() as f64).sqrt();
    let mut pass = true;
    let mut rows = Vec::new();
    for (s, o) in spacings.iter().zip(&mc) {
        let mean = mean_speed(*s, sample)?;
        let var = speed_variance(*s, sample)?;
        let (ok_m, z_m) = within(o.mean - mean, o.se_mean * inflate, mean, 3.0);
        let (ok_v, z_v) = within(o.variance - var, o.se_variance * inflate, var, 3.0);
        pass &= ok_m && ok_v;
        rows.push(json!({
            "spacing_m": s, "mean_speed": mean, "oracle_mean": o.mean, "z_mean": z_m,
            "speed_variance": var, "oracle_variance": o.variance, "z_variance": z_v,
        }));
    }
    let worst = rows
        .iter()
        .flat_map(|r| [r["z_mean"].as_f64().unwrap_or(0.0), r["z_variance"].as_f64().unwrap_or(0.0)])
        .fold(0.0, f64::max);
    Ok(Check {
        suite: "moments",
        pass,
        summary: format!("mean/variance relations vs {draws}-draw oracle at 15/30/60 m, worst z {worst:.2} (tol 3)"),
        detail: Value::Array(rows),
    })
}

fn verify_convergence(dist: &ParamDistribution, seeds: u64) -> Result<Check, Error> {
    let cfg = ConvergenceConfig {
        seeds: (0..seeds).collect(),
        ..Default::default()
    };
    let rep = convergence_study(&arterial(10, 60.0), dist, &cfg)?;
    let worst = rep.points.iter().map(|p| p.error).fold(0.0, f64::max);
    let (pass, summary) = if dist.is_point_mass() {
        (worst <= 1e-9, format!("point-mass law: max sup error {worst:.2e} m (tol 1e-9)"))
    } else {
        (
            (-0.65..=-0.35).contains(&rep.slope),
            format!(
                "log-log slope {:.3} (95% CI {:.3}..{:.3}), target [-0.65, -0.35]",
                rep.slope, rep.slope_ci95.0, rep.slope_ci95.1
            ),
        )
    };
    Ok(Check {
        suite: "convergence",
        pass,
        summary,
        detail: serde_json::to_value(&rep).expect("report serializes"),
    })
}

fn verify_deviation(dist: &ParamDistribution, sample: &HistoricalSample, replications: usize) -> Result<Check, Error> {
    let dt = filter_dt(sample, 1.0)?;
    let t = (60.0 / dt).round() * dt;
    let sc = arterial(3, t);
    let dev = deviation_covariance(&sc, dist, 400, replications, t, 4, Some(dt))?;
    let empirical = dev.matrix();
    let mut detail = Vec::new();
    let mut pass = false;
    let mut summary = String::new();
    for scaling in [DiffusionScaling::Alg2, DiffusionScaling::Standard] {
        let cfg = MomentConfig {
            scaling,
            scheme: CovScheme::default(),
            dump_times: vec![t],
            ..Default::default()
        };
        let series = integrate_moments(&sc, sample, &cfg)?;
        let model = &series.cov_dumps[0].p;
        let cmp = compare_covariances(model, &empirical, 0.1, 0.25);
        let ok = if dist.is_point_mass() {
            empirical.amax() <= 1e-12 && model.amax() <= 1e-12
        } else {
            cmp.passed()
        };
        let line = format!(
            "{scaling:?}: {}/{} entries within 25%, max rel err {:.2}",
            cmp.compared - cmp.failures.len(),
            cmp.compared,
            cmp.max_rel_error
        );
        if scaling == DiffusionScaling::Alg2 {
            pass = ok;
            summary = format!("N = 3, M = 400, t = {t:.2} s; {line}");
        } else {
            summary += &format!("; {line}");
        }
        detail.push(json!({
            "scaling": scaling,
            "pass": ok,
            "compared": cmp.compared,
            "max_rel_error": cmp.max_rel_error,
            "failures": cmp.failures,
            "model": (0..model.nrows()).map(|i| model.row(i).iter().copied().collect::<Vec<_>>()).collect::<Vec<_>>(),
        }));
    }
    Ok(Check {
        suite: "deviation",
        pass,
        summary,
        detail: json!({"t_s": t, "empirical": dev.cov, "models": detail}),
    })
}

// ---------------------------------------------------------------------------

fn fields(ctx: &Context, a: FieldsArgs) -> CmdResult {
    let input = ctx.locate(&a.input)?;
    let path = a.out.join("fields.csv");
    let m = manifest(
        "fields",
        json!({"input": input, "dx_m": a.dx, "dt_s": a.dt, "lane": a.lane}),
        0,
        json!({}),
        vec![path.clone()],
    );
    start_run(&a.out, &m)?;
    let traj = read_trajectory_csv(&input, &ReadOptions { dt: None, lane: a.lane })?;
    let field = eulerian_fields(&trajectory_points(&traj.set), 1.0, a.dx, a.dt)?;
    write_field_csv(&path, &field)?;
    println!(
        "{} x {} cells, max density {:.1} veh/km -> {}",
        field.t_edges.len() - 1,
        field.x_edges.len() - 1,
        field.max_density(),
        path.display()
    );
    Ok(())
}

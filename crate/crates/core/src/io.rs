//! Scenario files, trajectory CSV, estimate/field/covariance egress and run
//! manifests.
//!
//! Scenario files use the units traffic engineers quote (km/h, veh/h, m)
//! and are converted to SI on load. Trajectory CSV columns carry their
//! units in the header (`t_s`, `x_m`, `v_mps`, `s_m`); a JSON sidecar may
//! declare other source units.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::assimilation::{FilterConfig, GainForm, MeasurementModel, TruthSampling, UpdateOptions};
use crate::error::{Error, Result};
use crate::macroscopic::EulerianField;
use crate::moments::{CovMatrix, CovScheme, DiffusionScaling, EstimateSeries, InitialCov, MomentConfig};
use crate::params::{BetaMarginal, ParamDistribution};
use crate::relations::{DriverParams, HistoricalSample};
use crate::rng;
use crate::sim::{Boundary, Scenario, SignalSpec, SpacingSeries, TrajectorySet};
use crate::units::{kmh_to_mps, mps_to_kmh, vph_to_vps, vps_to_vph};

/// Code version recorded in manifests.
pub const CODE_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

// ---------------------------------------------------------------------------
// trajectories

/// Source units of a trajectory file, declared in its sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileUnits {
    /// `"m"` or `"ft"`.
    #[serde(default = "metre")]
    pub length: String,
    /// `"s"` or `"ms"`.
    #[serde(default = "second")]
    pub time: String,
}

fn metre() -> String {
    "m".into()
}

fn second() -> String {
    "s".into()
}

impl Default for FileUnits {
    fn default() -> Self {
        FileUnits {
            length: metre(),
            time: second(),
        }
    }
}

impl FileUnits {
    fn factors(&self) -> Result<(f64, f64)> {
        let l = match self.length.as_str() {
            "m" => 1.0,
            "ft" => 0.3048,
            other => return Err(Error::Schema(format!("unknown length unit {other:?}"))),
        };
        let t = match self.time.as_str() {
            "s" => 1.0,
            "ms" => 1e-3,
            other => return Err(Error::Schema(format!("unknown time unit {other:?}"))),
        };
        Ok((l, t))
    }
}

/// JSON written next to a trajectory CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrajectorySidecar {
    #[serde(default)]
    pub units: FileUnits,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<Value>,
    /// Realized parameters of vehicles `1..=N`, SI.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<Vec<DriverParams>>,
}

/// Sidecar path for a CSV: `run.csv` → `run.json`.
pub fn sidecar_path(csv: &Path) -> PathBuf {
    csv.with_extension("json")
}

#[derive(Debug, Clone, Default)]
pub struct ReadOptions {
    /// Resampling step; defaults to the median native sampling interval.
    pub dt: Option<f64>,
    /// Keep only rows whose `lane` column equals this value.
    pub lane: Option<i64>,
}

/// A trajectory file mapped onto the internal indexing.
#[derive(Debug, Clone)]
pub struct LoadedTrajectories {
    pub set: TrajectorySet,
    /// Source time of grid instant 0, s.
    pub t0: f64,
    /// Source `veh_id` of internal vehicle `n` (index 0 = leader).
    pub source_ids: Vec<String>,
}

struct Track {
    id: String,
    t: Vec<f64>,
    x: Vec<f64>,
    v: Option<Vec<f64>>,
    rows: Vec<usize>,
}

/// Read `veh_id,t_s,x_m[,v_mps[,s_m]]` (plus optional `lane`).
///
/// Vehicles are ordered front to back by position at the start of their
/// common time window, so the frontmost becomes the leader. Samples are
/// resampled onto a uniform grid by linear interpolation of positions;
/// missing speeds come from finite differences and spacings are always
/// recomputed.
pub fn read_trajectory_csv(path: impl AsRef<Path>, opts: &ReadOptions) -> Result<LoadedTrajectories> {
    let path = path.as_ref();
    let sidecar = read_sidecar(path)?;
    let (lf, tf) = sidecar.as_ref().map_or(Ok((1.0, 1.0)), |s| s.units.factors())?;

    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let missing: Vec<&str> = ["veh_id", "t_s", "x_m"].into_iter().filter(|c| col(c).is_none()).collect();
    if !missing.is_empty() {
        return Err(Error::Schema(format!(
            "{}: missing column(s) {}; expected veh_id,t_s,x_m,v_mps[,s_m]",
            path.display(),
            missing.join(", ")
        )));
    }
    let (ci, ct, cx) = (col("veh_id").unwrap(), col("t_s").unwrap(), col("x_m").unwrap());
    let cv = col("v_mps");
    let lane_col = col("lane");
    if opts.lane.is_some() && lane_col.is_none() {
        return Err(Error::Schema(format!("{}: lane filter requested but no lane column", path.display())));
    }

    let mut tracks: Vec<Track> = Vec::new();
    let mut by_id: HashMap<String, usize> = HashMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        // header is line 1
        let line = i + 2;
        let field = |c: usize| -> Result<f64> {
            let raw = rec.get(c).unwrap_or("").trim();
            raw.parse::<f64>()
                .map_err(|_| Error::Schema(format!("{}:{line}: bad number {raw:?}", path.display())))
        };
        if let (Some(want), Some(c)) = (opts.lane, lane_col) {
            let lane: i64 = rec
                .get(c)
                .unwrap_or("")
                .trim()
                .parse()
                .map_err(|_| Error::Schema(format!("{}:{line}: bad lane", path.display())))?;
            if lane != want {
                continue;
            }
        }
        let id = rec.get(ci).unwrap_or("").trim().to_string();
        let k = *by_id.entry(id.clone()).or_insert_with(|| {
            tracks.push(Track {
                id,
                t: Vec::new(),
                x: Vec::new(),
                v: cv.map(|_| Vec::new()),
                rows: Vec::new(),
            });
            tracks.len() - 1
        });
        let tr = &mut tracks[k];
        tr.t.push(field(ct)? * tf);
        tr.x.push(field(cx)? * lf);
        if let (Some(v), Some(c)) = (tr.v.as_mut(), cv) {
            v.push(field(c)? * lf / tf);
        }
        tr.rows.push(line);
    }
    if tracks.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "{}: need a leader and at least one follower, found {} vehicle(s)",
            path.display(),
            tracks.len()
        )));
    }
    for tr in &mut tracks {
        sort_track(tr, path)?;
    }

    let start = tracks.iter().map(|t| t.t[0]).fold(f64::MIN, f64::max);
    let end = tracks.iter().map(|t| *t.t.last().unwrap()).fold(f64::MAX, f64::min);
    if !(end > start) {
        return Err(Error::InsufficientData(format!(
            "{}: vehicles share no common time window",
            path.display()
        )));
    }
    let dt = match opts.dt.or(sidecar.as_ref().and_then(|s| s.dt_s)) {
        Some(dt) if dt > 0.0 => dt,
        Some(dt) => return Err(Error::config(format!("resampling step must be positive, got {dt}"))),
        None => median_interval(&tracks),
    };
    let steps = ((end - start) / dt + 1e-9).floor() as usize + 1;
    let grid: Vec<f64> = (0..steps).map(|k| start + k as f64 * dt).collect();

    // front to back at the start of the window
    let mut order: Vec<usize> = (0..tracks.len()).collect();
    let x_start: Vec<f64> = tracks.iter().map(|t| lerp(&t.t, &t.x, start)).collect();
    order.sort_by(|&a, &b| x_start[b].total_cmp(&x_start[a]));

    let mut xs = Vec::with_capacity(order.len());
    let mut vs = Vec::with_capacity(order.len());
    for &i in &order {
        let tr = &tracks[i];
        let x: Vec<f64> = grid.iter().map(|&t| lerp(&tr.t, &tr.x, t)).collect();
        let v = match &tr.v {
            Some(v) => grid.iter().map(|&t| lerp(&tr.t, v, t)).collect(),
            None => finite_difference(&x, dt),
        };
        xs.push(x);
        vs.push(v);
    }
    for n in 1..order.len() {
        for (k, &t) in grid.iter().enumerate() {
            if xs[n][k] > xs[n - 1][k] {
                let (a, b) = (&tracks[order[n - 1]], &tracks[order[n]]);
                return Err(Error::Domain(format!(
                    "{}: vehicle {:?} overlaps its leader {:?} at t = {t} s (rows {} and {})",
                    path.display(),
                    b.id,
                    a.id,
                    nearest_row(b, t),
                    nearest_row(a, t)
                )));
            }
        }
    }
    let params = sidecar.and_then(|s| s.params).filter(|p| p.len() + 1 == order.len());
    Ok(LoadedTrajectories {
        set: TrajectorySet::new(dt, xs, vs, None, params)?,
        t0: start,
        source_ids: order.iter().map(|&i| tracks[i].id.clone()).collect(),
    })
}

fn sort_track(tr: &mut Track, path: &Path) -> Result<()> {
    let mut idx: Vec<usize> = (0..tr.t.len()).collect();
    idx.sort_by(|&a, &b| tr.t[a].total_cmp(&tr.t[b]));
    let pick = |v: &[f64]| idx.iter().map(|&i| v[i]).collect::<Vec<_>>();
    tr.x = pick(&tr.x);
    tr.v = tr.v.as_ref().map(|v| pick(v));
    tr.rows = idx.iter().map(|&i| tr.rows[i]).collect();
    tr.t = pick(&tr.t);
    if let Some(w) = tr.t.windows(2).position(|w| w[1] <= w[0]) {
        return Err(Error::Domain(format!(
            "{}: vehicle {:?} has duplicate time {} s (rows {} and {})",
            path.display(),
            tr.id,
            tr.t[w],
            tr.rows[w],
            tr.rows[w + 1]
        )));
    }
    Ok(())
}

fn median_interval(tracks: &[Track]) -> f64 {
    let mut d: Vec<f64> = tracks.iter().flat_map(|t| t.t.windows(2).map(|w| w[1] - w[0])).collect();
    d.sort_by(f64::total_cmp);
    d[d.len() / 2]
}

fn nearest_row(tr: &Track, t: f64) -> usize {
    let i = tr.t.partition_point(|&s| s < t).min(tr.t.len() - 1);
    tr.rows[i]
}

fn lerp(ts: &[f64], ys: &[f64], t: f64) -> f64 {
    let i = ts.partition_point(|&s| s <= t);
    if i == 0 {
        return ys[0];
    }
    if i == ts.len() {
        return ys[ts.len() - 1];
    }
    let w = (t - ts[i - 1]) / (ts[i] - ts[i - 1]);
    ys[i - 1] + w * (ys[i] - ys[i - 1])
}

fn finite_difference(x: &[f64], dt: f64) -> Vec<f64> {
    let k = x.len();
    if k < 2 {
        return vec![0.0; k];
    }
    (0..k)
        .map(|i| {
            let (a, b) = (i.saturating_sub(1), (i + 1).min(k - 1));
            (x[b] - x[a]) / ((b - a) as f64 * dt)
        })
        .collect()
}

fn read_sidecar(csv: &Path) -> Result<Option<TrajectorySidecar>> {
    let p = sidecar_path(csv);
    if !p.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&p)?;
    Ok(Some(serde_json::from_str(&text)?))
}

/// Write `veh_id,t_s,x_m,v_mps,s_m` (vehicle 0 is the leader, its spacing
/// left empty) and, if given, the sidecar.
pub fn write_trajectory_csv(
    path: impl AsRef<Path>,
    traj: &TrajectorySet,
    sidecar: Option<&TrajectorySidecar>,
) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["veh_id", "t_s", "x_m", "v_mps", "s_m"])?;
    for n in 0..=traj.n_vehicles() {
        let (x, v, s) = (traj.positions(n), traj.speeds(n), traj.spacings(n));
        for k in 0..traj.len() {
            let sp = if n == 0 { String::new() } else { s[k].to_string() };
            w.write_record([
                n.to_string(),
                traj.time(k).to_string(),
                x[k].to_string(),
                v[k].to_string(),
                sp,
            ])?;
        }
    }
    w.flush()?;
    if let Some(sc) = sidecar {
        write_json(sidecar_path(path), sc)?;
    }
    Ok(())
}

/// Leader trajectory `t_s,x_m,v_mps` as a boundary.
pub fn read_boundary_csv(path: impl AsRef<Path>) -> Result<Boundary> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Schema(format!("{}: missing column {name}; expected t_s,x_m,v_mps", path.display())))
    };
    let (ct, cx, cv) = (col("t_s")?, col("x_m")?, col("v_mps")?);
    let (mut times, mut positions, mut speeds) = (Vec::new(), Vec::new(), Vec::new());
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let get = |c: usize| {
            rec.get(c)
                .unwrap_or("")
                .trim()
                .parse::<f64>()
                .map_err(|_| Error::Schema(format!("{}:{}: bad number", path.display(), i + 2)))
        };
        times.push(get(ct)?);
        positions.push(get(cx)?);
        speeds.push(get(cv)?);
    }
    let b = Boundary::Trajectory {
        times,
        positions,
        speeds,
    };
    b.validate()?;
    Ok(b)
}

// ---------------------------------------------------------------------------
// scenario files

/// A Beta marginal in file units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarginalSpec {
    pub lo: f64,
    pub hi: f64,
    #[serde(default = "two")]
    pub alpha: f64,
    #[serde(default = "two")]
    pub beta: f64,
}

fn two() -> f64 {
    2.0
}

/// Parameter law in file units: km/h, m, veh/h.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistributionSpec {
    pub v_f_kmh: MarginalSpec,
    pub d_m: MarginalSpec,
    pub c_vph: MarginalSpec,
}

impl DistributionSpec {
    pub fn to_si(&self) -> Result<ParamDistribution> {
        let m = |s: &MarginalSpec, f: fn(f64) -> f64| BetaMarginal::new(f(s.lo), f(s.hi), s.alpha, s.beta);
        ParamDistribution::new(m(&self.v_f_kmh, kmh_to_mps)?, m(&self.d_m, |x| x)?, m(&self.c_vph, vph_to_vps)?)
    }

    pub fn from_si(d: &ParamDistribution) -> Self {
        let m = |b: &BetaMarginal, f: fn(f64) -> f64| MarginalSpec {
            lo: f(b.lo),
            hi: f(b.hi),
            alpha: b.alpha,
            beta: b.beta,
        };
        DistributionSpec {
            v_f_kmh: m(&d.v_f, mps_to_kmh),
            d_m: m(&d.d, |x| x),
            c_vph: m(&d.c, vps_to_vph),
        }
    }
}

/// Signal timing in file units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignalFileSpec {
    pub cycle_s: f64,
    pub red_s: f64,
    pub go_speed_kmh: f64,
    pub cycles: u32,
    /// Defaults to the go speed.
    #[serde(default)]
    pub post_speed_kmh: Option<f64>,
}

impl SignalFileSpec {
    pub fn to_si(&self) -> SignalSpec {
        SignalSpec {
            cycle_s: self.cycle_s,
            red_s: self.red_s,
            go_speed: kmh_to_mps(self.go_speed_kmh),
            cycles: self.cycles,
            post_speed: kmh_to_mps(self.post_speed_kmh.unwrap_or(self.go_speed_kmh)),
        }
    }
}

/// Scenario file as written; every field but the platoon size, horizon,
/// boundary and law has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ScenarioFile {
    n_vehicles: usize,
    horizon_s: f64,
    #[serde(default = "one")]
    dn: f64,
    #[serde(default)]
    initial_spacing_m: Option<f64>,
    #[serde(default)]
    initial_spacings_m: Option<Vec<f64>>,
    #[serde(default)]
    origin_m: f64,
    #[serde(default)]
    signal: Option<SignalFileSpec>,
    #[serde(default)]
    leader_speed_kmh: Option<f64>,
    #[serde(default)]
    boundary_file: Option<PathBuf>,
    #[serde(default)]
    distribution: Option<DistributionSpec>,
    #[serde(default)]
    distribution_file: Option<PathBuf>,
    #[serde(default = "default_sample_size")]
    sample_size: usize,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    penetration: Option<f64>,
    #[serde(default)]
    model: MeasurementModel,
    #[serde(default)]
    diffusion_scaling: DiffusionScaling,
    #[serde(default)]
    cov_scheme: CovScheme,
    #[serde(default)]
    gain: GainForm,
    #[serde(default)]
    joseph: bool,
    #[serde(default)]
    truth_sampling: TruthSampling,
    #[serde(default)]
    initial_cov: InitialCov,
    #[serde(default = "yes")]
    tabulate: bool,
}

fn one() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

fn default_sample_size() -> usize {
    10_000
}

const SCENARIO_KEYS: &[&str] = &[
    "n_vehicles",
    "horizon_s",
    "dn",
    "initial_spacing_m",
    "initial_spacings_m",
    "origin_m",
    "signal",
    "leader_speed_kmh",
    "boundary_file",
    "distribution",
    "distribution_file",
    "sample_size",
    "seed",
    "penetration",
    "model",
    "diffusion_scaling",
    "cov_scheme",
    "gain",
    "joseph",
    "truth_sampling",
    "initial_cov",
    "tabulate",
];

/// A validated scenario, SI throughout.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioConfig {
    pub n_vehicles: usize,
    pub horizon_s: f64,
    pub dn: f64,
    pub initial_spacings_m: Vec<f64>,
    pub origin_m: f64,
    pub boundary: Boundary,
    pub distribution: ParamDistribution,
    /// Size `J` of the historical sample behind the mean relation.
    pub sample_size: usize,
    pub seed: u64,
    pub penetration: Option<f64>,
    pub model: MeasurementModel,
    pub diffusion_scaling: DiffusionScaling,
    pub cov_scheme: CovScheme,
    pub gain: GainForm,
    pub joseph: bool,
    pub truth_sampling: TruthSampling,
    pub initial_cov: InitialCov,
    pub tabulate: bool,
}

/// Result of loading a scenario file.
#[derive(Debug, Clone)]
pub struct LoadedScenario {
    pub config: ScenarioConfig,
    /// Unknown keys, ignored.
    pub warnings: Vec<String>,
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<LoadedScenario> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    if text.trim().is_empty() {
        return Err(Error::config(format!("{}: scenario file is empty", path.display())));
    }
    let base = path.parent().unwrap_or(Path::new("."));
    parse_scenario(&text, base)
}

/// Parse scenario JSON; relative file references resolve against `base`.
pub fn parse_scenario(text: &str, base: &Path) -> Result<LoadedScenario> {
    let value: Value = serde_json::from_str(text)?;
    let obj = value
        .as_object()
        .ok_or_else(|| Error::config("scenario must be a JSON object"))?;
    let warnings = obj
        .keys()
        .filter(|k| !SCENARIO_KEYS.contains(&k.as_str()))
        .map(|k| format!("unknown key {k:?} ignored"))
        .collect();
    let raw: ScenarioFile = serde_json::from_value(value)?;
    Ok(LoadedScenario {
        config: resolve(raw, base)?,
        warnings,
    })
}

fn resolve(f: ScenarioFile, base: &Path) -> Result<ScenarioConfig> {
    if f.n_vehicles == 0 {
        return Err(Error::config("n_vehicles must be at least 1"));
    }
    if !(f.horizon_s >= 0.0 && f.horizon_s.is_finite()) {
        return Err(Error::config(format!("horizon_s must be finite and >= 0, got {}", f.horizon_s)));
    }
    if !(f.dn > 0.0) {
        return Err(Error::config(format!("dn must be positive, got {}", f.dn)));
    }
    let spacings = match (f.initial_spacing_m, f.initial_spacings_m) {
        (Some(s), None) => vec![s; f.n_vehicles],
        (None, Some(list)) if list.len() == f.n_vehicles => list,
        (None, Some(list)) => {
            return Err(Error::config(format!(
                "initial_spacings_m has {} entries for {} vehicles",
                list.len(),
                f.n_vehicles
            )))
        }
        (Some(_), Some(_)) => return Err(Error::config("give initial_spacing_m or initial_spacings_m, not both")),
        (None, None) => return Err(Error::config("initial spacing missing")),
    };
    let boundary = match (f.signal, f.leader_speed_kmh, &f.boundary_file) {
        (Some(s), None, None) => Boundary::Signal(s.to_si()),
        (None, Some(v), None) => Boundary::Constant { speed: kmh_to_mps(v) },
        (None, None, Some(p)) => read_boundary_csv(existing(base, p)?)?,
        (None, None, None) => return Err(Error::config("no boundary: give signal, leader_speed_kmh or boundary_file")),
        _ => {
            return Err(Error::config(
                "signal, leader_speed_kmh and boundary_file are mutually exclusive",
            ))
        }
    };
    let distribution = match (&f.distribution, &f.distribution_file) {
        (Some(d), None) => d.to_si()?,
        (None, Some(p)) => ParamDistribution::read_json(existing(base, p)?)?,
        (None, None) => return Err(Error::config("no parameter law: give distribution or distribution_file")),
        (Some(_), Some(_)) => return Err(Error::config("distribution and distribution_file are mutually exclusive")),
    };
    if f.sample_size < 2 {
        return Err(Error::config("sample_size must be at least 2"));
    }
    if let Some(p) = f.penetration {
        if !(p >= 0.0 && p <= 1.0) {
            return Err(Error::config(format!("penetration must lie in [0, 1], got {p}")));
        }
    }
    let cfg = ScenarioConfig {
        n_vehicles: f.n_vehicles,
        horizon_s: f.horizon_s,
        dn: f.dn,
        initial_spacings_m: spacings,
        origin_m: f.origin_m,
        boundary,
        distribution,
        sample_size: f.sample_size,
        seed: f.seed,
        penetration: f.penetration,
        model: f.model,
        diffusion_scaling: f.diffusion_scaling,
        cov_scheme: f.cov_scheme,
        gain: f.gain,
        joseph: f.joseph,
        truth_sampling: f.truth_sampling,
        initial_cov: f.initial_cov,
        tabulate: f.tabulate,
    };
    cfg.scenario().validate()?;
    Ok(cfg)
}

fn existing(base: &Path, p: &Path) -> Result<PathBuf> {
    let full = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
    if full.exists() {
        Ok(full)
    } else {
        Err(Error::config(format!("referenced file {} does not exist", full.display())))
    }
}

impl ScenarioConfig {
    pub fn scenario(&self) -> Scenario {
        Scenario {
            horizon: self.horizon_s,
            initial_spacings: self.initial_spacings_m.clone(),
            boundary: self.boundary.clone(),
            origin: self.origin_m,
            dn: self.dn,
        }
    }

    /// The historical sample behind the mean relation; drawn from its own
    /// stream so it does not depend on how many truths were simulated.
    pub fn historical_sample(&self) -> Result<HistoricalSample> {
        self.distribution
            .draw_sample(self.sample_size, &mut rng::substream(self.seed, u64::MAX - 1))
    }

    pub fn moment_config(&self, dump_times: Vec<f64>) -> MomentConfig {
        MomentConfig {
            scaling: self.diffusion_scaling,
            scheme: self.cov_scheme,
            initial_cov: self.initial_cov,
            dump_times,
        }
    }

    pub fn filter_config(&self, dump_times: Vec<f64>) -> FilterConfig {
        FilterConfig {
            moments: self.moment_config(dump_times),
            model: self.model,
            sampling: self.truth_sampling,
            update: UpdateOptions {
                gain: self.gain,
                joseph: self.joseph,
                ..Default::default()
            },
            seed: rng::child_seed(self.seed, 1),
            tabulate: self.tabulate,
            ..Default::default()
        }
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("scenario config serializes")
    }

    /// SHA-256 of the canonical JSON of the resolved configuration.
    pub fn hash(&self) -> String {
        config_hash(&self.to_json())
    }
}

/// SHA-256 of a JSON value with object keys sorted.
pub fn config_hash(v: &Value) -> String {
    let canonical = serde_json::to_string(&canonicalize(v)).expect("json serializes");
    hex::encode(Sha256::digest(canonical.as_bytes()))
}

fn canonicalize(v: &Value) -> Value {
    match v {
        Value::Object(m) => {
            let sorted: BTreeMap<&String, Value> = m.iter().map(|(k, v)| (k, canonicalize(v))).collect();
            Value::Object(sorted.into_iter().map(|(k, v)| (k.clone(), v)).collect())
        }
        Value::Array(a) => Value::Array(a.iter().map(canonicalize).collect()),
        other => other.clone(),
    }
}

// ---------------------------------------------------------------------------
// run manifests and outputs

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: BTreeMap<String, Value>,
    pub config: Value,
    pub config_hash: String,
    pub seed: u64,
    pub code_version: String,
    /// Seconds since the Unix epoch when the run started.
    pub started_unix: u64,
    pub outputs: Vec<PathBuf>,
}

impl RunManifest {
    pub fn new(command: &str, config: Value, seed: u64) -> Self {
        let started_unix = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_secs());
        RunManifest {
            command: command.into(),
            args: BTreeMap::new(),
            config_hash: config_hash(&config),
            config,
            seed,
            code_version: CODE_VERSION.into(),
            started_unix,
            outputs: Vec::new(),
        }
    }

    /// Hash of everything except the timestamp: identical inputs give
    /// identical hashes.
    pub fn input_hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("manifest serializes");
        if let Some(m) = v.as_object_mut() {
            m.remove("started_unix");
        }
        config_hash(&v)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path, self)
    }
}

pub fn write_json<T: Serialize + ?Sized>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Averaged spacings `t_s,veh_id,s_m`, vehicles `1..=N`.
pub fn write_spacing_csv(path: impl AsRef<Path>, series: &SpacingSeries) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["t_s", "veh_id", "s_m"])?;
    for k in 0..series.len() {
        let t = (k as f64 * series.dt).to_string();
        for (i, row) in series.values.iter().enumerate() {
            w.write_record([t.clone(), (i + 1).to_string(), row[k].to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `t_s,veh_id,s_hat_m,x_hat_m,s_var_m2,x_var_m2`, one row per step and
/// vehicle.
pub fn write_estimate_csv(path: impl AsRef<Path>, series: &EstimateSeries) -> Result<()> {
    let n = series.n_vehicles;
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["t_s", "veh_id", "s_hat_m", "x_hat_m", "s_var_m2", "x_var_m2"])?;
    for st in &series.steps {
        for i in 0..n {
            w.write_record([
                st.t.to_string(),
                (i + 1).to_string(),
                st.z[i].to_string(),
                st.z[n + i].to_string(),
                st.var[i].to_string(),
                st.var[n + i].to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read back [`write_estimate_csv`] output as `(t, z, var)` per step.
pub fn read_estimate_csv(path: impl AsRef<Path>) -> Result<Vec<(f64, Vec<f64>, Vec<f64>)>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut rows: Vec<(f64, usize, [f64; 4])> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let f = |i: usize| rec.get(i).unwrap_or("").parse::<f64>().map_err(|_| Error::Schema("bad estimate row".into()));
        let veh: usize = rec.get(1).unwrap_or("").parse().map_err(|_| Error::Schema("bad veh_id".into()))?;
        rows.push((f(0)?, veh, [f(2)?, f(3)?, f(4)?, f(5)?]));
    }
    let n = rows.iter().map(|r| r.1).max().unwrap_or(0);
    let mut out = Vec::new();
    for chunk in rows.chunks(n.max(1)) {
        let mut z = vec![0.0; 2 * n];
        let mut var = vec![0.0; 2 * n];
        for (_, veh, v) in chunk {
            z[veh - 1] = v[0];
            z[n + veh - 1] = v[1];
            var[veh - 1] = v[2];
            var[n + veh - 1] = v[3];
        }
        out.push((chunk[0].0, z, var));
    }
    Ok(out)
}

/// `t_s,x_m,density_vpkm,speed_kmh` at bin centres; empty cells where a
/// bin holds no vehicle.
pub fn write_field_csv(path: impl AsRef<Path>, field: &EulerianField) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["t_s", "x_m", "density_vpkm", "speed_kmh"])?;
    let fmt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for (ti, t) in field.t_edges.windows(2).enumerate() {
        for (xi, x) in field.x_edges.windows(2).enumerate() {
            w.write_record([
                (0.5 * (t[0] + t[1])).to_string(),
                (0.5 * (x[0] + x[1])).to_string(),
                fmt(field.density[ti][xi]),
                fmt(field.speed[ti][xi]),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Dense covariance as CSV: a header of state labels (`s1..sN, x1..xN`)
/// and one row per state.
pub fn write_cov_csv(path: impl AsRef<Path>, cov: &CovMatrix) -> Result<()> {
    let dim = cov.p.nrows();
    let n = dim / 2;
    let labels: Vec<String> = (1..=n).map(|i| format!("s{i}")).chain((1..=n).map(|i| format!("x{i}"))).collect();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(&labels)?;
    for i in 0..dim {
        w.write_record((0..dim).map(|j| cov.p[(i, j)].to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_cov_csv(path: impl AsRef<Path>) -> Result<nalgebra::DMatrix<f64>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let dim = rdr.headers()?.len();
    let mut data = Vec::with_capacity(dim * dim);
    for rec in rdr.records() {
        for x in rec?.iter() {
            data.push(x.parse::<f64>().map_err(|_| Error::Schema("bad covariance entry".into()))?);
        }
    }
    if data.len() != dim * dim {
        return Err(Error::Schema(format!("covariance file is not {dim}×{dim}")));
    }
    Ok(nalgebra::DMatrix::from_row_slice(dim, dim, &data))
}

//! Sample paths of a heterogeneous platoon.
//!
//! Vehicle 0 is the boundary leader whose speed is prescribed; vehicles
//! `1..=N` each draw their own parameter tuple and follow the explicit
//! upwind recursion
//!
//! ```text
//! s_n(k+1) = s_n(k) + Δt (V_{n-1}(s_{n-1}(k)) - V_n(s_n(k)))
//! ```
//!
//! with `Δt = min_n 1/c_n` so the CFL bound holds for every driver.
//! Positions follow from `x_n = x_{n-1} - s_n`.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{sample_params, simulation_dt, ParamDistribution};
use crate::relations::DriverParams;
use crate::rng;

/// Fixed-time signal ahead of the platoon leader.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignalSpec {
    /// Cycle length, s.
    pub cycle_s: f64,
    /// Red duration at the end of each cycle, s.
    pub red_s: f64,
    /// Leader speed outside red, m/s.
    pub go_speed: f64,
    pub cycles: u32,
    /// Leader speed after the last cycle, m/s.
    pub post_speed: f64,
}

impl SignalSpec {
    /// Arterial reference timing: 120 s cycles with 70 s of red, six
    /// cycles, 60 km/h otherwise.
    pub fn arterial() -> Self {
        SignalSpec {
            cycle_s: 120.0,
            red_s: 70.0,
            go_speed: crate::units::kmh_to_mps(60.0),
            cycles: 6,
            post_speed: crate::units::kmh_to_mps(60.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.red_s > 0.0 && self.red_s < self.cycle_s && self.cycle_s.is_finite()) {
            return Err(Error::config(format!(
                "signal needs 0 < red ({}) < cycle ({})",
                self.red_s, self.cycle_s
            )));
        }
        if !(self.go_speed > 0.0 && self.go_speed.is_finite()) {
            return Err(Error::config(format!("go speed must be positive, got {}", self.go_speed)));
        }
        if !(self.post_speed >= 0.0 && self.post_speed.is_finite()) {
            return Err(Error::config(format!(
                "post-horizon speed must be nonnegative, got {}",
                self.post_speed
            )));
        }
        Ok(())
    }
}

/// Leader speed under `spec`: zero on `(j T_c - T_r, j T_c]` for
/// `j = 1..=cycles`, the go speed otherwise, and the post speed once the
/// last cycle has ended.
pub fn leader_speed(t: f64, spec: &SignalSpec) -> f64 {
    let end = spec.cycles as f64 * spec.cycle_s;
    if t > end {
        return spec.post_speed;
    }
    if t <= 0.0 {
        return spec.go_speed;
    }
    // cycle index j with t in ((j-1) T_c, j T_c]
    let j = (t / spec.cycle_s).ceil();
    if t > j * spec.cycle_s - spec.red_s {
        0.0
    } else {
        spec.go_speed
    }
}

/// Distance covered by the signal-controlled leader on `[0, t]`.
pub fn signal_distance(t: f64, spec: &SignalSpec) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    let green = spec.cycle_s - spec.red_s;
    let end = spec.cycles as f64 * spec.cycle_s;
    let within = t.min(end);
    let full = (within / spec.cycle_s).floor();
    let rest = within - full * spec.cycle_s;
    let mut d = spec.go_speed * (full * green + rest.min(green));
    if t > end {
        d += spec.post_speed * (t - end);
    }
    d
}

/// Boundary (vehicle 0) trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Boundary {
    Signal(SignalSpec),
    Constant { speed: f64 },
    /// Recorded leader trajectory, linearly interpolated; held constant
    /// past its last sample.
    Trajectory {
        times: Vec<f64>,
        positions: Vec<f64>,
        speeds: Vec<f64>,
    },
}

impl Boundary {
    pub fn validate(&self) -> Result<()> {
        match self {
            Boundary::Signal(s) => s.validate(),
            Boundary::Constant { speed } => {
                if *speed >= 0.0 && speed.is_finite() {
                    Ok(())
                } else {
                    Err(Error::config(format!("leader speed must be nonnegative, got {speed}")))
                }
            }
            Boundary::Trajectory {
                times,
                positions,
                speeds,
            } => {
                if times.len() < 2 || times.len() != positions.len() || times.len() != speeds.len() {
                    return Err(Error::config("boundary trajectory needs >= 2 aligned samples"));
                }
                if times.windows(2).any(|w| w[1] <= w[0]) {
                    return Err(Error::config("boundary trajectory times must increase"));
                }
                Ok(())
            }
        }
    }

    pub fn speed(&self, t: f64) -> f64 {
        match self {
            Boundary::Signal(s) => leader_speed(t, s),
            Boundary::Constant { speed } => *speed,
            Boundary::Trajectory { times, speeds, .. } => interp(times, speeds, t),
        }
    }

    /// Leader position at `t >= 0`. Prescribed speeds are integrated in
    /// closed form, so every time grid sees the same leader.
    pub fn position(&self, t: f64, origin: f64) -> f64 {
        match self {
            Boundary::Signal(s) => origin + signal_distance(t, s),
            Boundary::Constant { speed } => origin + speed * t.max(0.0),
            Boundary::Trajectory { times, positions, .. } => interp(times, positions, t),
        }
    }

    /// Leader positions and speeds on the grid `k Δt`, `k = 0..steps`.
    pub fn on_grid(&self, dt: f64, steps: usize, origin: f64) -> (Vec<f64>, Vec<f64>) {
        let speeds = (0..steps).map(|k| self.speed(k as f64 * dt)).collect();
        let positions = (0..steps).map(|k| self.position(k as f64 * dt, origin)).collect();
        (positions, speeds)
    }

    /// Leader displacement over `[t, t + Δt]`.
    pub fn displacement(&self, t: f64, dt: f64) -> f64 {
        self.position(t + dt, 0.0) - self.position(t, 0.0)
    }
}

fn interp(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    if x <= xs[0] {
        return ys[0];
    }
    let last = xs.len() - 1;
    if x >= xs[last] {
        return ys[last];
    }
    let i = xs.partition_point(|&v| v <= x) - 1;
    let w = (x - xs[i]) / (xs[i + 1] - xs[i]);
    ys[i] + w * (ys[i + 1] - ys[i])
}

/// Everything a platoon run needs apart from the parameter law.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    /// Horizon `T`, s.
    pub horizon: f64,
    /// Initial spacings of vehicles `1..=N`, m.
    pub initial_spacings: Vec<f64>,
    pub boundary: Boundary,
    /// Leader position at `t = 0` for prescribed-speed boundaries, m.
    pub origin: f64,
    /// Vehicle-size scaling `Δn` used by the moment dynamics.
    pub dn: f64,
}

impl Scenario {
    pub fn uniform(n: usize, horizon: f64, spacing: f64, boundary: Boundary) -> Self {
        Scenario {
            horizon,
            initial_spacings: vec![spacing; n],
            boundary,
            origin: 0.0,
            dn: 1.0,
        }
    }

    pub fn n_vehicles(&self) -> usize {
        self.initial_spacings.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.initial_spacings.is_empty() {
            return Err(Error::config("scenario needs at least one following vehicle"));
        }
        if let Some((i, s)) = self
            .initial_spacings
            .iter()
            .enumerate()
            .find(|(_, s)| !(**s > 0.0 && s.is_finite()))
        {
            return Err(Error::config(format!("initial spacing of vehicle {} is {s}", i + 1)));
        }
        if !(self.horizon >= 0.0 && self.horizon.is_finite()) {
            return Err(Error::config(format!("horizon must be nonnegative, got {}", self.horizon)));
        }
        if !(self.dn > 0.0 && self.dn.is_finite()) {
            return Err(Error::config(format!("vehicle size must be positive, got {}", self.dn)));
        }
        self.boundary.validate()
    }

    /// Number of grid samples for step `dt`: `k = 0..=floor(T/Δt)+1`.
    pub fn steps(&self, dt: f64) -> usize {
        (self.horizon / dt + 1e-9).floor() as usize + 2
    }
}

/// Per-vehicle time series on a uniform grid. Vehicle 0 is the leader; its
/// spacing entries are NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySet {
    dt: f64,
    x: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    s: Vec<Vec<f64>>,
    params: Option<Vec<DriverParams>>,
}

/// All vehicles at one grid instant; index 0 is the leader.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub t: f64,
    pub positions: Vec<f64>,
    pub speeds: Vec<f64>,
    pub spacings: Vec<f64>,
}

impl TrajectorySet {
    /// Assemble and validate. Spacings of vehicles `n >= 1` are recomputed
    /// from positions when `s` is `None`.
    pub fn new(
        dt: f64,
        x: Vec<Vec<f64>>,
        v: Vec<Vec<f64>>,
        s: Option<Vec<Vec<f64>>>,
        params: Option<Vec<DriverParams>>,
    ) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::domain(format!("time step must be positive, got {dt}")));
        }
        if x.len() < 2 || v.len() != x.len() {
            return Err(Error::domain("trajectory set needs a leader and at least one follower"));
        }
        let k = x[0].len();
        if k == 0 || x.iter().chain(v.iter()).any(|r| r.len() != k) {
            return Err(Error::domain("all trajectory arrays must have the same length"));
        }
        let s = match s {
            Some(s) => s,
            None => {
                let mut s = vec![vec![f64::NAN; k]];
                for n in 1..x.len() {
                    s.push((0..k).map(|i| x[n - 1][i] - x[n][i]).collect());
                }
                s
            }
        };
        if s.len() != x.len() || s.iter().any(|r| r.len() != k) {
            return Err(Error::domain("spacing arrays do not match positions"));
        }
        if let Some(p) = &params {
            if p.len() != x.len() - 1 {
                return Err(Error::domain("one parameter tuple per following vehicle required"));
            }
        }
        for n in 1..x.len() {
            for i in 0..k {
                if x[n][i] > x[n - 1][i] {
                    return Err(Error::domain(format!(
                        "vehicle {n} is ahead of vehicle {} at step {i}",
                        n - 1
                    )));
                }
            }
        }
        Ok(TrajectorySet { dt, x, v, s, params })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Following vehicles `N` (the leader excluded).
    pub fn n_vehicles(&self) -> usize {
        self.x.len() - 1
    }

    /// Grid samples per vehicle.
    pub fn len(&self) -> usize {
        self.x[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.dt
    }

    pub fn span(&self) -> f64 {
        self.time(self.len() - 1)
    }

    pub fn positions(&self, veh: usize) -> &[f64] {
        &self.x[veh]
    }

    pub fn speeds(&self, veh: usize) -> &[f64] {
        &self.v[veh]
    }

    pub fn spacings(&self, veh: usize) -> &[f64] {
        &self.s[veh]
    }

    pub fn params(&self) -> Option<&[DriverParams]> {
        self.params.as_deref()
    }

    /// Previous-value hold index for time `t`.
    pub fn index_at(&self, t: f64) -> usize {
        (((t / self.dt) + 1e-9).floor().max(0.0) as usize).min(self.len() - 1)
    }

    pub fn snapshot(&self, t: f64) -> Snapshot {
        let k = self.index_at(t);
        Snapshot {
            t,
            positions: self.x.iter().map(|r| r[k]).collect(),
            speeds: self.v.iter().map(|r| r[k]).collect(),
            spacings: self.s.iter().map(|r| r[k]).collect(),
        }
    }

    /// All vehicles at `t`, linearly interpolated between grid instants.
    pub fn interpolate(&self, t: f64) -> Snapshot {
        let pos = (t / self.dt).max(0.0);
        let k = (pos.floor() as usize).min(self.len() - 1);
        if k + 1 >= self.len() {
            return self.snapshot(t);
        }
        let w = pos - k as f64;
        let lerp = |r: &Vec<f64>| r[k] + w * (r[k + 1] - r[k]);
        Snapshot {
            t,
            positions: self.x.iter().map(lerp).collect(),
            speeds: self.v.iter().map(lerp).collect(),
            spacings: self.s.iter().map(lerp).collect(),
        }
    }

    /// Spacings of vehicles `1..=N` held onto the grid `k dt`, `k < steps`.
    pub fn spacing_series_on(&self, dt: f64, steps: usize) -> SpacingSeries {
        let idx: Vec<usize> = (0..steps).map(|k| self.index_at(k as f64 * dt)).collect();
        SpacingSeries {
            dt,
            values: (1..=self.n_vehicles())
                .map(|n| idx.iter().map(|&i| self.s[n][i]).collect())
                .collect(),
        }
    }
}

/// Spacings of vehicles `1..=N` on a uniform grid; `values[n-1][k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpacingSeries {
    pub dt: f64,
    pub values: Vec<Vec<f64>>,
}

impl SpacingSeries {
    pub fn len(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `sup_k max_n |a - b|` over the common prefix of both grids, which
    /// must share `dt`.
    pub fn sup_distance(&self, other: &SpacingSeries) -> f64 {
        let steps = self.len().min(other.len());
        self.values
            .iter()
            .zip(&other.values)
            .flat_map(|(a, b)| (0..steps).map(move |k| (a[k] - b[k]).abs()))
            .fold(0.0, f64::max)
    }
}

/// Draw one tuple per vehicle and simulate on the law's step `Δn / c^max`.
pub fn simulate_sample_path<R: Rng + ?Sized>(
    scenario: &Scenario,
    dist: &ParamDistribution,
    rng: &mut R,
) -> Result<TrajectorySet> {
    scenario.validate()?;
    let params: Vec<DriverParams> =
        (0..scenario.n_vehicles()).map(|_| sample_params(dist, rng)).collect();
    simulate_on_grid(scenario, &params, dist.cfl_dt(1.0))
}

/// Simulate with given per-vehicle parameters on `Δt = min_n 1/c_n`.
pub fn simulate_with_params(scenario: &Scenario, params: &[DriverParams]) -> Result<TrajectorySet> {
    let dt = simulation_dt(params, 1.0)?;
    simulate_on_grid(scenario, params, dt)
}

/// Simulate on a caller-chosen step. The step must satisfy `Δt c_n <= 1`
/// for every vehicle.
pub fn simulate_on_grid(scenario: &Scenario, params: &[DriverParams], dt: f64) -> Result<TrajectorySet> {
    scenario.validate()?;
    let n = scenario.n_vehicles();
    if params.len() != n {
        return Err(Error::config(format!("{} parameter tuples for {n} vehicles", params.len())));
    }
    for p in params {
        p.validate()?;
        if dt * p.c > 1.0 + 1e-12 {
            return Err(Error::config(format!(
                "time step {dt} s violates the CFL bound 1/c = {} s",
                1.0 / p.c
            )));
        }
    }
    let steps = scenario.steps(dt);
    let (x0, v0) = scenario.boundary.on_grid(dt, steps, scenario.origin);

    let mut x = vec![vec![0.0; steps]; n + 1];
    let mut v = vec![vec![0.0; steps]; n + 1];
    let mut s = vec![vec![0.0; steps]; n + 1];
    s[0].fill(f64::NAN);
    x[0] = x0;
    v[0] = v0;
    for i in 1..=n {
        s[i][0] = scenario.initial_spacings[i - 1];
        v[i][0] = params[i - 1].speed(s[i][0]);
        x[i][0] = x[i - 1][0] - s[i][0];
    }
    for k in 1..steps {
        // the leader enters through its exact displacement over the step
        let lead = x[0][k] - x[0][k - 1];
        for i in 1..=n {
            let up = if i == 1 { lead } else { dt * v[i - 1][k - 1] };
            let next = s[i][k - 1] + up - dt * v[i][k - 1];
            if !(next > 0.0) {
                return Err(Error::Physics {
                    step: k,
                    vehicle: i,
                    spacing: next,
                });
            }
            s[i][k] = next;
            v[i][k] = params[i - 1].speed(next);
            x[i][k] = x[i - 1][k] - next;
        }
    }
    Ok(TrajectorySet {
        dt,
        x,
        v,
        s,
        params: Some(params.to_vec()),
    })
}

/// `M` independent sample paths and their pointwise spacing average.
#[derive(Debug, Clone)]
pub struct Ensemble {
    pub members: Vec<TrajectorySet>,
    pub average: SpacingSeries,
}

/// Parameters of ensemble member `m`, drawn from its own sub-stream.
pub fn member_params(scenario: &Scenario, dist: &ParamDistribution, seed: u64, m: usize) -> Vec<DriverParams> {
    let mut r = rng::substream(seed, m as u64);
    (0..scenario.n_vehicles()).map(|_| sample_params(dist, &mut r)).collect()
}

/// All members share the law's step.
fn common_grid(scenario: &Scenario, dist: &ParamDistribution) -> (f64, usize) {
    let dt = dist.cfl_dt(1.0);
    (dt, (scenario.horizon / dt + 1e-9).floor() as usize + 1)
}

/// Simulate `m` members (in parallel) and average their spacings on the
/// shared grid.
pub fn simulate_ensemble(
    m: usize,
    scenario: &Scenario,
    dist: &ParamDistribution,
    seed: u64,
) -> Result<Ensemble> {
    if m == 0 {
        return Err(Error::config("ensemble size must be at least 1"));
    }
    scenario.validate()?;
    let all: Vec<Vec<DriverParams>> = (0..m).map(|i| member_params(scenario, dist, seed, i)).collect();
    let (dt, steps) = common_grid(scenario, dist);
    let members = all
        .par_iter()
        .map(|p| simulate_on_grid(scenario, p, dt))
        .collect::<Result<Vec<_>>>()?;
    let mut acc = vec![vec![0.0; steps]; scenario.n_vehicles()];
    for member in &members {
        add_held(&mut acc, member, dt);
    }
    Ok(Ensemble {
        members,
        average: finish_average(acc, m, dt),
    })
}

/// Ensemble average without retaining members; identical realizations to
/// [`simulate_ensemble`] for the same seed.
pub fn ensemble_average(
    m: usize,
    scenario: &Scenario,
    dist: &ParamDistribution,
    seed: u64,
) -> Result<SpacingSeries> {
    if m == 0 {
        return Err(Error::config("ensemble size must be at least 1"));
    }
    scenario.validate()?;
    let all: Vec<Vec<DriverParams>> = (0..m).map(|i| member_params(scenario, dist, seed, i)).collect();
    let (dt, steps) = common_grid(scenario, dist);
    let n = scenario.n_vehicles();
    let acc = all
        .par_iter()
        .try_fold(
            || vec![vec![0.0; steps]; n],
            |mut acc, p| {
                let member = simulate_on_grid(scenario, p, dt)?;
                add_held(&mut acc, &member, dt);
                Ok::<_, Error>(acc)
            },
        )
        .try_reduce(
            || vec![vec![0.0; steps]; n],
            |mut a, b| {
                for (ra, rb) in a.iter_mut().zip(&b) {
                    for (x, y) in ra.iter_mut().zip(rb) {
                        *x += y;
                    }
                }
                Ok(a)
            },
        )?;
    Ok(finish_average(acc, m, dt))
}

fn add_held(acc: &mut [Vec<f64>], member: &TrajectorySet, dt: f64) {
    let steps = acc[0].len();
    for k in 0..steps {
        let i = member.index_at(k as f64 * dt);
        for (n, row) in acc.iter_mut().enumerate() {
            row[k] += member.s[n + 1][i];
        }
    }
}

fn finish_average(mut acc: Vec<Vec<f64>>, m: usize, dt: f64) -> SpacingSeries {
    let inv = 1.0 / m as f64;
    for row in &mut acc {
        for x in row.iter_mut() {
            *x *= inv;
        }
    }
    SpacingSeries { dt, values: acc }
}

/// The ensemble-averaged process driven by the averaged relation
/// `(1/M) Σ_m V(s; θ_n^m)` for every vehicle, on a caller-chosen grid.
/// Members share the state, so this is a single deterministic recursion
/// once the `M x N` tuples are drawn.
pub fn averaged_relation_path(
    m: usize,
    scenario: &Scenario,
    dist: &ParamDistribution,
    seed: u64,
    dt: f64,
    steps: usize,
) -> Result<SpacingSeries> {
    if m == 0 {
        return Err(Error::config("ensemble size must be at least 1"));
    }
    scenario.validate()?;
    let n = scenario.n_vehicles();
    let all: Vec<Vec<DriverParams>> = (0..m).map(|i| member_params(scenario, dist, seed, i)).collect();
    let speed = |veh: usize, s: f64| all.iter().map(|p| p[veh].speed(s)).sum::<f64>() / m as f64;
    let mut out = vec![vec![0.0; steps]; n];
    let mut cur: Vec<f64> = scenario.initial_spacings.clone();
    let mut vel: Vec<f64> = (0..n).map(|i| speed(i, cur[i])).collect();
    for (i, row) in out.iter_mut().enumerate() {
        row[0] = cur[i];
    }
    for k in 1..steps {
        let lead = scenario.boundary.displacement((k - 1) as f64 * dt, dt) / dt;
        let mut next = cur.clone();
        for i in 0..n {
            let up = if i == 0 { lead } else { vel[i - 1] };
            next[i] = cur[i] + dt / scenario.dn * (up - vel[i]);
            if !(next[i] > 0.0) {
                return Err(Error::Physics {
                    step: k,
                    vehicle: i + 1,
                    spacing: next[i],
                });
            }
        }
        cur = next;
        vel = (0..n).map(|i| speed(i, cur[i])).collect();
        for (i, row) in out.iter_mut().enumerate() {
            row[k] = cur[i];
        }
    }
    Ok(SpacingSeries { dt, values: out })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::relations::nf_spacing;
    use crate::units::kmh_to_mps;

    fn reference_signal() -> SignalSpec {
        SignalSpec {
            cycle_s: 120.0,
            red_s: 70.0,
            go_speed: kmh_to_mps(60.0),
            cycles: 6,
            post_speed: kmh_to_mps(60.0),
        }
    }

    #[test]
    fn leader_speed_windows() {
        let spec = reference_signal();
        assert_eq!(leader_speed(30.0, &spec), kmh_to_mps(60.0));
        assert_eq!(leader_speed(100.0, &spec), 0.0);
        assert_eq!(leader_speed(120.0, &spec), 0.0);
        assert_eq!(leader_speed(50.0, &spec), kmh_to_mps(60.0));
        assert_eq!(leader_speed(50.0 + 1e-9, &spec), 0.0);
        assert_eq!(leader_speed(120.0 + 1e-9, &spec), kmh_to_mps(60.0));
        assert_eq!(leader_speed(720.0, &spec), 0.0);
        assert_eq!(leader_speed(800.0, &spec), kmh_to_mps(60.0));
        let stop_after = SignalSpec {
            post_speed: 3.0,
            ..spec
        };
        assert_eq!(leader_speed(721.0, &stop_after), 3.0);
    }

    #[test]
    fn signal_distance_integrates_speed() {
        let spec = SignalSpec {
            post_speed: 3.0,
            ..reference_signal()
        };
        let go = spec.go_speed;
        assert_eq!(signal_distance(0.0, &spec), 0.0);
        assert!((signal_distance(50.0, &spec) - 50.0 * go).abs() < 1e-9);
        assert!((signal_distance(100.0, &spec) - 50.0 * go).abs() < 1e-9);
        assert!((signal_distance(170.0, &spec) - 100.0 * go).abs() < 1e-9);
        assert!((signal_distance(730.0, &spec) - (300.0 * go + 30.0)).abs() < 1e-9);
        // midpoint-rule quadrature of the speed
        let h = 1e-3;
        let quad: f64 = (0..250_000).map(|i| h * leader_speed((i as f64 + 0.5) * h, &spec)).sum();
        assert!((quad - signal_distance(250.0, &spec)).abs() < 1e-6);
    }

    #[test]
    fn single_follower_converges_to_equilibrium() {
        let theta = DriverParams::new(kmh_to_mps(75.0), 7.0, 0.8).unwrap();
        let lead = kmh_to_mps(60.0);
        let eq = nf_spacing(lead, &theta).unwrap();
        let sc = Scenario::uniform(1, 600.0, eq + 15.0, Boundary::Constant { speed: lead });
        let traj = simulate_with_params(&sc, &[theta]).unwrap();
        let s = traj.spacings(1);
        assert!((s[s.len() - 1] - eq).abs() < 0.1);
        assert!(s.windows(2).all(|w| w[1] <= w[0] + 1e-12), "monotone approach");
    }

    #[test]
    fn stationary_solution_stays_put() {
        let theta = DriverParams::new(20.0, 7.0, 0.9).unwrap();
        let dist = ParamDistribution::point_mass(theta).unwrap();
        let lead = 12.0;
        let eq = nf_spacing(lead, &theta).unwrap();
        let sc = Scenario::uniform(5, 100.0, eq, Boundary::Constant { speed: lead });
        let traj = simulate_sample_path(&sc, &dist, &mut rng::stream(1)).unwrap();
        for n in 1..=5 {
            for &s in traj.spacings(n) {
                assert!((s - eq).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn spacing_identity_and_ordering() {
        let dist = ParamDistribution::signal_reference(2.0, 2.0).unwrap();
        let sc = Scenario::uniform(30, 300.0, 36.0, Boundary::Signal(reference_signal()));
        let traj = simulate_sample_path(&sc, &dist, &mut rng::stream(9)).unwrap();
        let vmax = kmh_to_mps(80.0);
        for n in 1..=30 {
            for k in 0..traj.len() {
                let gap = traj.positions(n - 1)[k] - traj.positions(n)[k];
                assert!((gap - traj.spacings(n)[k]).abs() < 1e-9);
                assert!(traj.speeds(n)[k] >= 0.0 && traj.speeds(n)[k] <= vmax);
            }
            for w in traj.spacings(n).windows(2) {
                assert!((w[1] - w[0]).abs() <= traj.dt() * vmax + 1e-12);
            }
        }
        assert!(traj.span() >= 300.0);
        assert!((traj.dt() - 3600.0 / 5100.0).abs() < 1e-12);
    }

    #[test]
    fn determinism() {
        let dist = ParamDistribution::signal_reference(2.0, 2.0).unwrap();
        let sc = Scenario::uniform(10, 100.0, 36.0, Boundary::Signal(reference_signal()));
        let a = simulate_sample_path(&sc, &dist, &mut rng::stream(4)).unwrap();
        let b = simulate_sample_path(&sc, &dist, &mut rng::stream(4)).unwrap();
        // the leader's spacing is NaN, so compare bit patterns
        for n in 0..=10 {
            let bits = |t: &TrajectorySet| {
                let f = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
                (f(t.positions(n)), f(t.speeds(n)), f(t.spacings(n)))
            };
            assert_eq!(bits(&a), bits(&b));
        }
        assert_eq!(a.params(), b.params());
    }

    #[test]
    fn cfl_violation_is_a_config_error() {
        let theta = DriverParams::new(20.0, 7.0, 1.0).unwrap();
        let sc = Scenario::uniform(2, 10.0, 30.0, Boundary::Constant { speed: 10.0 });
        assert!(matches!(simulate_on_grid(&sc, &[theta; 2], 1.5), Err(Error::Config(_))));
    }

    #[test]
    fn ensemble_of_one_is_the_member() {
        let dist = ParamDistribution::signal_reference(2.0, 2.0).unwrap();
        let sc = Scenario::uniform(4, 60.0, 36.0, Boundary::Signal(reference_signal()));
        let ens = simulate_ensemble(1, &sc, &dist, 17).unwrap();
        let member = &ens.members[0];
        let held = member.spacing_series_on(ens.average.dt, ens.average.len());
        assert_eq!(held, ens.average);
        let streamed = ensemble_average(1, &sc, &dist, 17).unwrap();
        assert_eq!(streamed, ens.average);
    }

    #[test]
    fn point_mass_ensemble_equals_member() {
        let theta = DriverParams::new(18.0, 7.0, 0.8).unwrap();
        let dist = ParamDistribution::point_mass(theta).unwrap();
        let sc = Scenario::uniform(4, 60.0, 36.0, Boundary::Signal(reference_signal()));
        let ens = simulate_ensemble(5, &sc, &dist, 2).unwrap();
        let one = ens.members[0].spacing_series_on(ens.average.dt, ens.average.len());
        assert!(ens.average.sup_distance(&one) < 1e-12);
    }

    #[test]
    fn streamed_average_matches_full_ensemble() {
        let dist = ParamDistribution::signal_reference(2.0, 2.0).unwrap();
        let sc = Scenario::uniform(5, 80.0, 36.0, Boundary::Signal(reference_signal()));
        let full = simulate_ensemble(7, &sc, &dist, 23).unwrap();
        let streamed = ensemble_average(7, &sc, &dist, 23).unwrap();
        assert!(full.average.sup_distance(&streamed) < 1e-12);
    }
}

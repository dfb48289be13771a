//! Eulerian fields, queue estimates and error metrics.

use serde::{Deserialize, Serialize};

use crate::assimilation::{ProbeSet, TruthSampling};
use crate::error::{Error, Result};
use crate::moments::EstimateSeries;
use crate::relations::{mean_spacing_for_speed, MeanRelation};
use crate::sim::{SpacingSeries, TrajectorySet};
use crate::units::{mps_to_kmh, spacing_to_density_vpkm};

/// Density and speed on a regular space-time grid. `None` marks cells no
/// vehicle visited.
#[derive(Debug, Clone, PartialEq)]
pub struct EulerianField {
    /// Left edges of the space bins, m.
    pub x_edges: Vec<f64>,
    /// Left edges of the time bins, s.
    pub t_edges: Vec<f64>,
    pub dx: f64,
    pub dtau: f64,
    /// `density[time][space]`, veh/km.
    pub density: Vec<Vec<Option<f64>>>,
    /// `speed[time][space]`, km/h.
    pub speed: Vec<Vec<Option<f64>>>,
}

impl EulerianField {
    pub fn max_density(&self) -> f64 {
        self.density.iter().flatten().flatten().copied().fold(0.0, f64::max)
    }

    /// Cell containing `(t, x)`, if inside the grid.
    pub fn cell(&self, t: f64, x: f64) -> Option<(usize, usize)> {
        let i = ((t - self.t_edges[0]) / self.dtau).floor();
        let j = ((x - self.x_edges[0]) / self.dx).floor();
        if i < 0.0 || j < 0.0 || i as usize >= self.t_edges.len() || j as usize >= self.x_edges.len() {
            return None;
        }
        Some((i as usize, j as usize))
    }
}

/// One vehicle observation: time, position, spacing (m), speed (m/s).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldPoint {
    pub t: f64,
    pub x: f64,
    pub s: f64,
    pub v: f64,
}

/// Bin observations: density `Δn / mean spacing`, speed the mean speed.
pub fn eulerian_fields(points: &[FieldPoint], dn: f64, dx: f64, dtau: f64) -> Result<EulerianField> {
    if !(dx > 0.0 && dtau > 0.0) {
        return Err(Error::config(format!("bin sizes must be positive, got dx = {dx}, dt = {dtau}")));
    }
    let valid = || points.iter().filter(|p| p.s.is_finite() && p.s > 0.0 && p.x.is_finite());
    let (mut x_lo, mut x_hi, mut t_lo, mut t_hi) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in valid() {
        x_lo = x_lo.min(p.x);
        x_hi = x_hi.max(p.x);
        t_lo = t_lo.min(p.t);
        t_hi = t_hi.max(p.t);
    }
    if !x_lo.is_finite() {
        return Err(Error::InsufficientData("no vehicle observations to bin".into()));
    }
    let x0 = (x_lo / dx).floor() * dx;
    let t0 = (t_lo / dtau).floor() * dtau;
    let nx = ((x_hi - x0) / dx).floor() as usize + 1;
    let nt = ((t_hi - t0) / dtau).floor() as usize + 1;
    let mut s_sum = vec![vec![0.0; nx]; nt];
    let mut v_sum = vec![vec![0.0; nx]; nt];
    let mut count = vec![vec![0usize; nx]; nt];
    for p in valid() {
        let i = (((p.t - t0) / dtau).floor() as usize).min(nt - 1);
        let j = (((p.x - x0) / dx).floor() as usize).min(nx - 1);
        s_sum[i][j] += p.s;
        v_sum[i][j] += p.v;
        count[i][j] += 1;
    }
    let density = (0..nt)
        .map(|i| {
            (0..nx)
                .map(|j| (count[i][j] > 0).then(|| dn * spacing_to_density_vpkm(s_sum[i][j] / count[i][j] as f64)))
                .collect()
        })
        .collect();
    let speed = (0..nt)
        .map(|i| {
            (0..nx)
                .map(|j| (count[i][j] > 0).then(|| mps_to_kmh(v_sum[i][j] / count[i][j] as f64)))
                .collect()
        })
        .collect();
    Ok(EulerianField {
        x_edges: (0..nx).map(|j| x0 + j as f64 * dx).collect(),
        t_edges: (0..nt).map(|i| t0 + i as f64 * dtau).collect(),
        dx,
        dtau,
        density,
        speed,
    })
}

/// Observations of vehicles `1..=N` from a trajectory set.
pub fn trajectory_points(traj: &TrajectorySet) -> Vec<FieldPoint> {
    let mut out = Vec::with_capacity(traj.n_vehicles() * traj.len());
    for veh in 1..=traj.n_vehicles() {
        let (x, s, v) = (traj.positions(veh), traj.spacings(veh), traj.speeds(veh));
        for k in 0..traj.len() {
            out.push(FieldPoint {
                t: traj.time(k),
                x: x[k],
                s: s[k],
                v: v[k],
            });
        }
    }
    out
}

/// Observations from an estimate series, speeds from the mean relation.
pub fn estimate_points(series: &EstimateSeries, relation: &dyn MeanRelation) -> Vec<FieldPoint> {
    let n = series.n_vehicles;
    let mut out = Vec::with_capacity(n * series.steps.len());
    for step in &series.steps {
        for i in 0..n {
            let s = step.z[i];
            out.push(FieldPoint {
                t: step.t,
                x: step.z[n + i],
                s,
                v: relation.mean_speed(s),
            });
        }
    }
    out
}

/// Queue count with a 95% interval, veh.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QueueEstimate {
    pub count: usize,
    pub lower: f64,
    pub upper: f64,
}

/// Spacing below which the mean relation is slower than `v_q`.
pub fn queue_threshold(relation: &dyn MeanRelation, v_q: f64) -> Result<f64> {
    mean_spacing_for_speed(relation, v_q)
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// Probability that each spacing lies below `s_q` under independent
/// Gaussian marginals.
pub fn queue_probabilities(spacings: &[f64], variances: &[f64], s_q: f64) -> Vec<f64> {
    spacings
        .iter()
        .zip(variances)
        .map(|(&s, &var)| {
            if var <= 0.0 {
                if s <= s_q {
                    1.0
                } else {
                    0.0
                }
            } else {
                normal_cdf((s_q - s) / var.sqrt())
            }
        })
        .collect()
}

/// Longest run of `flags`, as `(start, len)`; the earliest on ties.
fn longest_run(flags: impl Iterator<Item = bool>) -> (usize, usize) {
    let (mut best, mut start, mut len) = ((0, 0), 0, 0);
    for (i, f) in flags.enumerate() {
        if f {
            if len == 0 {
                start = i;
            }
            len += 1;
            if len > best.1 {
                best = (start, len);
            }
        } else {
            len = 0;
        }
    }
    best
}

const CI_TAIL: f64 = 0.025;

/// `P(longest run <= m)` for independent Bernoulli(`p_i`) flags.
fn longest_run_cdf(p: &[f64], m: usize) -> f64 {
    // probability of each trailing run length, runs beyond `m` dropped
    let mut state = vec![0.0; m + 1];
    let mut next = vec![0.0; m + 1];
    state[0] = 1.0;
    for &q in p {
        next[0] = state.iter().sum::<f64>() * (1.0 - q);
        for r in 0..m {
            next[r + 1] = state[r] * q;
        }
        std::mem::swap(&mut state, &mut next);
    }
    state.iter().sum()
}

/// Smallest `m` with `P(longest run <= m) >= level`.
fn longest_run_quantile(p: &[f64], level: f64) -> usize {
    let (mut lo, mut hi) = (0, p.len());
    while lo < hi {
        let mid = (lo + hi) / 2;
        if longest_run_cdf(p, mid) >= level {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    lo
}

/// Longest run of vehicles with queue probability above 1/2, with a 95%
/// interval from the exact distribution of the longest run of independent
/// Bernoulli(`p_n`) flags.
pub fn queue_from_probabilities(p: &[f64]) -> QueueEstimate {
    let count = longest_run(p.iter().map(|&q| q > 0.5)).1;
    let point = count as f64;
    QueueEstimate {
        count,
        lower: (longest_run_quantile(p, CI_TAIL) as f64).min(point),
        upper: (longest_run_quantile(p, 1.0 - CI_TAIL) as f64).max(point),
    }
}

/// Queue estimate from estimated spacings and their variances.
pub fn queue_estimate(spacings: &[f64], variances: &[f64], s_q: f64) -> QueueEstimate {
    queue_from_probabilities(&queue_probabilities(spacings, variances, s_q))
}

/// Longest run of vehicles at or below `v_q` in a truth snapshot; `speeds`
/// includes the leader at index 0, which is ignored.
pub fn true_queue(speeds: &[f64], v_q: f64) -> usize {
    longest_run(speeds.iter().skip(1).map(|&v| v <= v_q)).1
}

/// Queue estimates over an estimate series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueSeries {
    pub times: Vec<f64>,
    pub estimates: Vec<QueueEstimate>,
}

impl QueueSeries {
    pub fn from_estimates(series: &EstimateSeries, s_q: f64) -> Self {
        let n = series.n_vehicles;
        QueueSeries {
            times: series.steps.iter().map(|s| s.t).collect(),
            estimates: series
                .steps
                .iter()
                .map(|s| queue_estimate(&s.z[..n], &s.var[..n], s_q))
                .collect(),
        }
    }

    pub fn mean_width(&self) -> f64 {
        let w: f64 = self.estimates.iter().map(|e| e.upper - e.lower).sum();
        w / self.estimates.len().max(1) as f64
    }
}

/// True queue lengths at the estimate's instants.
pub fn true_queue_series(truth: &TrajectorySet, times: &[f64], v_q: f64, sampling: TruthSampling) -> Vec<usize> {
    times.iter().map(|&t| true_queue(&sampling.at(truth, t).speeds, v_q)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    #[default]
    All,
    Unmeasured,
}

/// Estimated spacings as a series, `values[n-1][k]`.
pub fn estimate_spacings(series: &EstimateSeries) -> SpacingSeries {
    let n = series.n_vehicles;
    SpacingSeries {
        dt: series.dt,
        values: (0..n).map(|i| series.steps.iter().map(|s| s.z[i]).collect()).collect(),
    }
}

/// Truth spacings at the estimate's instants.
pub fn truth_spacings(truth: &TrajectorySet, series: &EstimateSeries, sampling: TruthSampling) -> SpacingSeries {
    let snaps: Vec<_> = series.steps.iter().map(|s| sampling.at(truth, s.t)).collect();
    SpacingSeries {
        dt: series.dt,
        values: (1..=truth.n_vehicles()).map(|veh| snaps.iter().map(|s| s.spacings[veh]).collect()).collect(),
    }
}

fn selected<'a>(
    est: &'a SpacingSeries,
    truth: &'a SpacingSeries,
    scope: Scope,
    probes: Option<&ProbeSet>,
) -> Result<Vec<(&'a [f64], &'a [f64])>> {
    if est.values.len() != truth.values.len() || est.len() != truth.len() || est.dt != truth.dt {
        return Err(Error::domain(format!(
            "grids differ: {}×{} at Δt {} vs {}×{} at Δt {}",
            est.values.len(),
            est.len(),
            est.dt,
            truth.values.len(),
            truth.len(),
            truth.dt
        )));
    }
    let keep = |veh: usize| match (scope, probes) {
        (Scope::All, _) => Ok(true),
        (Scope::Unmeasured, Some(p)) => Ok(!p.contains(veh)),
        (Scope::Unmeasured, None) => Err(Error::config("unmeasured scope needs the probe set")),
    };
    let mut out = Vec::new();
    for (i, (a, b)) in est.values.iter().zip(&truth.values).enumerate() {
        if keep(i + 1)? {
            out.push((a.as_slice(), b.as_slice()));
        }
    }
    Ok(out)
}

/// Root mean square error over the selected vehicles and all instants.
pub fn rmse(est: &SpacingSeries, truth: &SpacingSeries, scope: Scope, probes: Option<&ProbeSet>) -> Result<f64> {
    let rows = selected(est, truth, scope, probes)?;
    let (mut sum, mut count) = (0.0, 0usize);
    for (a, b) in rows {
        for (x, y) in a.iter().zip(b) {
            sum += (x - y).powi(2);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::InsufficientData("no entries to score".into()));
    }
    Ok((sum / count as f64).sqrt())
}

/// Mean absolute percentage error, %.
pub fn mape(est: &SpacingSeries, truth: &SpacingSeries, scope: Scope, probes: Option<&ProbeSet>) -> Result<f64> {
    let rows = selected(est, truth, scope, probes)?;
    let (mut sum, mut count) = (0.0, 0usize);
    for (a, b) in rows {
        for (x, y) in a.iter().zip(b) {
            if *y == 0.0 {
                return Err(Error::domain("zero truth entry in MAPE"));
            }
            sum += ((x - y) / y).abs();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::InsufficientData("no entries to score".into()));
    }
    Ok(100.0 * sum / count as f64)
}

/// RMSE of two count series, veh.
pub fn rmse_counts(est: &[f64], truth: &[f64]) -> Result<f64> {
    if est.len() != truth.len() || est.is_empty() {
        return Err(Error::domain("count series must be nonempty and aligned"));
    }
    let sum: f64 = est.iter().zip(truth).map(|(a, b)| (a - b).powi(2)).sum();
    Ok((sum / est.len() as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rmse_m: f64,
    pub mape_pct: f64,
    pub scope: Scope,
    pub penetration: f64,
}

/// Spacing metrics of a filter run against its truth.
pub fn spacing_metrics(
    series: &EstimateSeries,
    truth: &TrajectorySet,
    probes: &ProbeSet,
    scope: Scope,
    sampling: TruthSampling,
) -> Result<Metrics> {
    let est = estimate_spacings(series);
    let tru = truth_spacings(truth, series, sampling);
    Ok(Metrics {
        rmse_m: rmse(&est, &tru, scope, Some(probes))?,
        mape_pct: mape(&est, &tru, scope, Some(probes))?,
        scope,
        penetration: probes.penetration(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(values: Vec<Vec<f64>>) -> SpacingSeries {
        SpacingSeries { dt: 1.0, values }
    }

    #[test]
    fn rmse_examples() {
        let a = series(vec![vec![10.0, 20.0], vec![5.0, 6.0]]);
        assert_eq!(rmse(&a, &a, Scope::All, None).unwrap(), 0.0);
        let b = series(vec![vec![11.0, 21.0], vec![6.0, 7.0]]);
        assert!((rmse(&b, &a, Scope::All, None).unwrap() - 1.0).abs() < 1e-12);
        let e = series(vec![vec![3.0, 4.0]]);
        let z = series(vec![vec![0.0, 0.0]]);
        assert!((rmse(&e, &z, Scope::All, None).unwrap() - 5.0 / 2f64.sqrt()).abs() < 1e-12);
        let short = series(vec![vec![1.0]]);
        assert!(rmse(&short, &z, Scope::All, None).is_err());
    }

    #[test]
    fn mape_examples() {
        let t = series(vec![vec![10.0, 20.0]]);
        assert_eq!(mape(&t, &t, Scope::All, None).unwrap(), 0.0);
        let up = series(vec![vec![11.0, 22.0]]);
        assert!((mape(&up, &t, Scope::All, None).unwrap() - 10.0).abs() < 1e-9);
        let mixed = series(vec![vec![11.0, 16.0]]);
        assert!((mape(&mixed, &t, Scope::All, None).unwrap() - 15.0).abs() < 1e-9);
    }

    #[test]
    fn unmeasured_scope_skips_probes() {
        let t = series(vec![vec![10.0], vec![10.0]]);
        let e = series(vec![vec![30.0], vec![11.0]]);
        let probes = ProbeSet::new(2, vec![1]).unwrap();
        assert!((rmse(&e, &t, Scope::Unmeasured, Some(&probes)).unwrap() - 1.0).abs() < 1e-12);
        assert!(rmse(&e, &t, Scope::Unmeasured, None).is_err());
    }

    #[test]
    fn free_flow_has_no_queue() {
        let q = queue_estimate(&[40.0; 10], &[1e-6; 10], 8.0);
        assert_eq!(q.count, 0);
        assert_eq!((q.lower, q.upper), (0.0, 0.0));
    }

    #[test]
    fn jam_block_is_exact_without_variance() {
        let mut s = vec![40.0; 12];
        for x in s.iter_mut().skip(2).take(5) {
            *x = 7.0;
        }
        let q = queue_estimate(&s, &[0.0; 12], 8.0);
        assert_eq!(q.count, 5);
        assert_eq!((q.lower, q.upper), (5.0, 5.0));
    }

    #[test]
    fn interval_brackets_point() {
        let p = [0.2, 0.6, 0.9, 0.55, 0.3, 0.0, 0.8];
        let q = queue_from_probabilities(&p);
        assert_eq!(q.count, 3);
        assert!(q.lower <= 3.0 && q.upper >= 3.0 && q.upper <= 7.0 && q.lower >= 0.0);
    }

    #[test]
    fn longest_run_distribution_matches_enumeration() {
        let p = [0.9, 0.3, 0.95, 0.99, 0.5, 0.05, 0.7, 0.8];
        let n = p.len();
        let mut pmf = vec![0.0; n + 1];
        for mask in 0u32..(1 << n) {
            let flags = (0..n).map(|i| mask >> i & 1 == 1);
            let w: f64 = (0..n).map(|i| if mask >> i & 1 == 1 { p[i] } else { 1.0 - p[i] }).product();
            pmf[longest_run(flags).1] += w;
        }
        let mut cdf = 0.0;
        for (m, w) in pmf.iter().enumerate() {
            cdf += w;
            assert!((longest_run_cdf(&p, m) - cdf).abs() < 1e-12);
        }
        let q = queue_from_probabilities(&p);
        let first = |level: f64| {
            let mut acc = 0.0;
            pmf.iter().position(|w| {
                acc += w;
                acc >= level
            })
        };
        assert_eq!(q.lower, first(0.025).unwrap() as f64);
        assert_eq!(q.upper, first(0.975).unwrap() as f64);
    }

    #[test]
    fn weak_link_widens_interval() {
        // a 0.2 gap vehicle between two solid blocks of 5
        let mut p = vec![1.0; 11];
        p[5] = 0.2;
        let q = queue_from_probabilities(&p);
        assert_eq!(q.count, 5);
        assert_eq!((q.lower, q.upper), (5.0, 11.0));
    }

    #[test]
    fn true_queue_counts_longest_run() {
        assert_eq!(true_queue(&[0.0, 0.0, 0.0, 9.0, 0.0, 0.0, 0.0, 0.0], 1.0), 4);
        assert_eq!(true_queue(&[0.0, 9.0, 9.0], 1.0), 0);
    }

    fn point(t: f64, x: f64, s: f64, v: f64) -> FieldPoint {
        FieldPoint { t, x, s, v }
    }

    #[test]
    fn uniform_platoon_density() {
        let pts: Vec<FieldPoint> = (0..50).map(|i| point(0.5, -36.0 * i as f64, 36.0, 10.0)).collect();
        let f = eulerian_fields(&pts, 1.0, 10.0, 1.0).unwrap();
        let occupied: Vec<f64> = f.density.iter().flatten().flatten().copied().collect();
        assert_eq!(occupied.len(), 50);
        assert!(occupied.iter().all(|&d| (d - 1000.0 / 36.0).abs() < 1e-9));
        assert!(f.speed.iter().flatten().flatten().all(|&v| (v - 36.0).abs() < 1e-9));
    }

    #[test]
    fn jam_density() {
        let pts: Vec<FieldPoint> = (0..20).map(|i| point(3.2, -7.0 * i as f64, 7.0, 0.0)).collect();
        let f = eulerian_fields(&pts, 1.0, 10.0, 1.0).unwrap();
        for d in f.density.iter().flatten().flatten() {
            assert!((d - 1000.0 / 7.0).abs() < 1e-9);
        }
        assert!(f.x_edges.windows(2).all(|w| w[1] > w[0]));
        assert!(f.speed.iter().flatten().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn bad_bins_rejected() {
        assert!(eulerian_fields(&[point(0.0, 0.0, 10.0, 1.0)], 1.0, 0.0, 1.0).is_err());
    }
}

//! Brute-force Monte-Carlo witnesses for the derived dynamics.
//!
//! Nothing here calls the quantities being checked: speeds use their own
//! Newell-Franklin formula, parameters come from a gamma-ratio Beta
//! sampler instead of the inverse-CDF one, and the deviation covariance is
//! built from simulated ensembles only.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{BetaMarginal, ParamDistribution};
use crate::relations::{DriverParams, MeanRelation};
use crate::rng;
use crate::sim::{averaged_relation_path, Scenario, SpacingSeries};

/// Monte-Carlo mean and variance with standard errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McMoments {
    pub n: usize,
    pub mean: f64,
    pub variance: f64,
    pub se_mean: f64,
    pub se_variance: f64,
}

impl McMoments {
    pub fn from_values(values: &[f64]) -> Result<Self> {
        let n = values.len();
        if n < 2 {
            return Err(Error::InsufficientData("need at least two draws".into()));
        }
        let nf = n as f64;
        let mean = values.iter().sum::<f64>() / nf;
        let (mut m2, mut m4) = (0.0, 0.0);
        for &v in values {
            let e = (v - mean) * (v - mean);
            m2 += e;
            m4 += e * e;
        }
        let variance = m2 / (nf - 1.0);
        let mu2 = m2 / nf;
        let mu4 = m4 / nf;
        Ok(McMoments {
            n,
            mean,
            variance,
            se_mean: (variance / nf).sqrt(),
            se_variance: ((mu4 - mu2 * mu2).max(0.0) / nf).sqrt(),
        })
    }

    /// `|mean - m| / se`, with an exact match scoring 0.
    pub fn z_mean(&self, m: f64) -> f64 {
        z_score(self.mean - m, self.se_mean)
    }

    pub fn z_variance(&self, v: f64) -> f64 {
        z_score(self.variance - v, self.se_variance)
    }
}

fn z_score(diff: f64, se: f64) -> f64 {
    if diff == 0.0 {
        0.0
    } else if se == 0.0 {
        // a degenerate oracle only agrees to rounding
        if diff.abs() <= 1e-12 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        diff.abs() / se
    }
}

fn marginal_draw<R: Rng + ?Sized>(m: &BetaMarginal, rng: &mut R) -> Result<f64> {
    if m.is_point_mass() {
        return Ok(m.lo);
    }
    let b = Beta::new(m.alpha, m.beta).map_err(|e| Error::domain(format!("beta shapes: {e}")))?;
    Ok(m.lo + m.width() * b.sample(rng))
}

/// Parameter tuples drawn with a sampler independent of
/// [`crate::params::sample_params`].
pub fn oracle_draws<R: Rng + ?Sized>(dist: &ParamDistribution, n: usize, rng: &mut R) -> Result<Vec<DriverParams>> {
    (0..n)
        .map(|_| {
            Ok(DriverParams {
                v_f: marginal_draw(&dist.v_f, rng)?,
                d: marginal_draw(&dist.d, rng)?,
                c: marginal_draw(&dist.c, rng)?,
            })
        })
        .collect()
}

/// `v_f (1 - exp(-(c/v_f)(s - d)))` clamped to `[0, v_f]`, written out
/// independently of the relations module.
fn nf_speed(s: f64, p: &DriverParams) -> f64 {
    if s <= p.d {
        return 0.0;
    }
    let v = p.v_f * (1.0 - (-(p.c / p.v_f) * (s - p.d)).exp());
    v.clamp(0.0, p.v_f)
}

/// `d - (v_f/c) ln(1 - v/v_f)`, or `None` when `v >= v_f`.
fn nf_spacing(v: f64, p: &DriverParams) -> Option<f64> {
    (v < p.v_f).then(|| p.d - (p.v_f / p.c) * (1.0 - v / p.v_f).ln())
}

/// Fresh-draw moments of `V(s, ω)` at each spacing in `spacings`, sharing
/// one set of draws.
pub fn mc_speed_moments<R: Rng + ?Sized>(
    spacings: &[f64],
    dist: &ParamDistribution,
    n_draws: usize,
    rng: &mut R,
) -> Result<Vec<McMoments>> {
    if n_draws < 1000 {
        return Err(Error::config(format!("oracle needs at least 1000 draws, got {n_draws}")));
    }
    let draws = oracle_draws(dist, n_draws, rng)?;
    spacings
        .iter()
        .map(|&s| {
            let values: Vec<f64> = draws.iter().map(|p| nf_speed(s, p)).collect();
            McMoments::from_values(&values)
        })
        .collect()
}

/// Fresh-draw moments of the pseudo-spacing `S(v, ω)` over draws with
/// `v_f > v`.
pub fn mc_pseudo_spacing<R: Rng + ?Sized>(
    v: f64,
    dist: &ParamDistribution,
    n_draws: usize,
    rng: &mut R,
) -> Result<McMoments> {
    if n_draws < 1000 {
        return Err(Error::config(format!("oracle needs at least 1000 draws, got {n_draws}")));
    }
    let draws = oracle_draws(dist, n_draws, rng)?;
    let values: Vec<f64> = draws.iter().filter_map(|p| nf_spacing(v, p)).collect();
    McMoments::from_values(&values)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceConfig {
    pub ensemble_sizes: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Tuples in the sample defining the reference mean relation.
    pub reference_draws: usize,
    pub reference_seed: u64,
    /// Step; defaults to `Δn / c_max` of the support.
    pub dt: Option<f64>,
}

impl Default for ConvergenceConfig {
    fn default() -> Self {
        ConvergenceConfig {
            ensemble_sizes: vec![10, 100, 1000],
            seeds: (0..20).collect(),
            reference_draws: 100_000,
            reference_seed: 0x5eed,
            dt: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvergencePoint {
    pub m: usize,
    pub seed: u64,
    pub error: f64,
}

/// Sup-norm distances between ensemble averages and the mean dynamics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub dt: f64,
    pub points: Vec<ConvergencePoint>,
    /// Mean error per ensemble size, ascending in `M`.
    pub mean_errors: Vec<(usize, f64)>,
    /// Least-squares slope of `ln error` on `ln M` over all points.
    pub slope: f64,
    pub slope_ci95: (f64, f64),
}

/// Mean dynamics on a fixed grid with the mean relation of `relation`.
pub fn reference_mean_path(
    scenario: &Scenario,
    relation: &dyn MeanRelation,
    dt: f64,
    steps: usize,
) -> Result<SpacingSeries> {
    let n = scenario.n_vehicles();
    let mut cur = scenario.initial_spacings.clone();
    let mut values = vec![vec![0.0; steps]; n];
    for (i, row) in values.iter_mut().enumerate() {
        row[0] = cur[i];
    }
    for k in 1..steps {
        let lead = scenario.boundary.displacement((k - 1) as f64 * dt, dt) / dt;
        let v: Vec<f64> = cur.iter().map(|&s| relation.mean_speed(s)).collect();
        for i in 0..n {
            let up = if i == 0 { lead } else { v[i - 1] };
            cur[i] += dt / scenario.dn * (up - v[i]);
            if !(cur[i] > 0.0) {
                return Err(Error::Physics {
                    step: k,
                    vehicle: i + 1,
                    spacing: cur[i],
                });
            }
        }
        for (i, row) in values.iter_mut().enumerate() {
            row[k] = cur[i];
        }
    }
    Ok(SpacingSeries { dt, values })
}

fn default_dt(scenario: &Scenario, dist: &ParamDistribution) -> f64 {
    scenario.dn / dist.c.hi
}

/// Distance between `M`-ensemble averages and the mean dynamics for every
/// `(M, seed)`, with a log-log slope fit.
pub fn convergence_study(
    scenario: &Scenario,
    dist: &ParamDistribution,
    config: &ConvergenceConfig,
) -> Result<ConvergenceReport> {
    let ms = &config.ensemble_sizes;
    if ms.len() < 3 || ms.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::config("convergence study needs >= 3 strictly increasing ensemble sizes"));
    }
    if config.seeds.is_empty() {
        return Err(Error::config("convergence study needs at least one seed"));
    }
    scenario.validate()?;
    let dt = config.dt.unwrap_or_else(|| default_dt(scenario, dist));
    let steps = (scenario.horizon / dt + 1e-9).floor() as usize + 1;
    let reference = dist.draw_sample(config.reference_draws, &mut rng::stream(config.reference_seed))?;
    let mean = reference_mean_path(scenario, &reference, dt, steps)?;

    let jobs: Vec<(usize, u64)> = ms.iter().flat_map(|&m| config.seeds.iter().map(move |&s| (m, s))).collect();
    let points = jobs
        .par_iter()
        .map(|&(m, seed)| {
            let path = averaged_relation_path(m, scenario, dist, seed, dt, steps)?;
            Ok(ConvergencePoint {
                m,
                seed,
                error: path.sup_distance(&mean),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mean_errors = ms
        .iter()
        .map(|&m| {
            let e: Vec<f64> = points.iter().filter(|p| p.m == m).map(|p| p.error).collect();
            (m, e.iter().sum::<f64>() / e.len() as f64)
        })
        .collect();
    let xy: Vec<(f64, f64)> = points
        .iter()
        .filter(|p| p.error > 0.0)
        .map(|p| ((p.m as f64).ln(), p.error.ln()))
        .collect();
    let (slope, se) = ols_slope(&xy);
    Ok(ConvergenceReport {
        dt,
        points,
        mean_errors,
        slope,
        slope_ci95: (slope - 1.96 * se, slope + 1.96 * se),
    })
}

/// Slope and its standard error; `(NaN, NaN)` with fewer than 3 points.
fn ols_slope(xy: &[(f64, f64)]) -> (f64, f64) {
    let n = xy.len();
    if n < 3 {
        return (f64::NAN, f64::NAN);
    }
    let nf = n as f64;
    let mx = xy.iter().map(|p| p.0).sum::<f64>() / nf;
    let my = xy.iter().map(|p| p.1).sum::<f64>() / nf;
    let sxx: f64 = xy.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = xy.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        return (f64::NAN, f64::NAN);
    }
    let b = sxy / sxx;
    let a = my - b * mx;
    let rss: f64 = xy.iter().map(|p| (p.1 - a - b * p.0).powi(2)).sum();
    (b, (rss / (nf - 2.0) / sxx).sqrt())
}

/// Empirical covariance of the amplified deviation `√M (s^M(t) - s̄(t))`
/// over replications; `s̄(t)` is estimated by the replication mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationReport {
    pub t: f64,
    pub m: usize,
    pub replications: usize,
    pub dt: f64,
    /// Replication mean of the spacings at `t`.
    pub mean_spacings: Vec<f64>,
    /// `2N × 2N` covariance, spacings then positions, row-major.
    pub cov: Vec<Vec<f64>>,
    /// Standard errors of the entries under a Gaussian approximation.
    pub se: Vec<Vec<f64>>,
}

impl DeviationReport {
    pub fn matrix(&self) -> DMatrix<f64> {
        let n = self.cov.len();
        DMatrix::from_fn(n, n, |i, j| self.cov[i][j])
    }

    pub fn spacing_block(&self) -> DMatrix<f64> {
        let n = self.cov.len() / 2;
        DMatrix::from_fn(n, n, |i, j| self.cov[i][j])
    }
}

pub fn deviation_covariance(
    scenario: &Scenario,
    dist: &ParamDistribution,
    m: usize,
    replications: usize,
    t: f64,
    seed: u64,
    dt: Option<f64>,
) -> Result<DeviationReport> {
    if replications < 50 {
        return Err(Error::config(format!("need at least 50 replications, got {replications}")));
    }
    if !(t >= 0.0 && t <= scenario.horizon) {
        return Err(Error::config(format!("time {t} outside [0, {}]", scenario.horizon)));
    }
    scenario.validate()?;
    let n = scenario.n_vehicles();
    let dt = dt.unwrap_or_else(|| default_dt(scenario, dist));
    let k = ((t / dt) + 1e-9).floor() as usize;
    let steps = k + 1;
    let finals = (0..replications as u64)
        .into_par_iter()
        .map(|r| {
            let path = averaged_relation_path(m, scenario, dist, rng::child_seed(seed, r), dt, steps)?;
            Ok(path.values.iter().map(|row| row[k]).collect::<Vec<f64>>())
        })
        .collect::<Result<Vec<_>>>()?;

    let rf = replications as f64;
    let mean: Vec<f64> = (0..n).map(|i| finals.iter().map(|f| f[i]).sum::<f64>() / rf).collect();
    let scale = (m as f64).sqrt();
    // spacing deviations, then position deviations δx_n = -Δn Σ_{i<=n} δs_i
    let devs: Vec<Vec<f64>> = finals
        .iter()
        .map(|f| {
            let ds: Vec<f64> = (0..n).map(|i| scale * (f[i] - mean[i])).collect();
            let mut dx = Vec::with_capacity(n);
            let mut acc = 0.0;
            for d in &ds {
                acc -= scenario.dn * d;
                dx.push(acc);
            }
            ds.into_iter().chain(dx).collect()
        })
        .collect();
    let dim = 2 * n;
    let mut cov = vec![vec![0.0; dim]; dim];
    for d in &devs {
        for i in 0..dim {
            for j in 0..dim {
                cov[i][j] += d[i] * d[j];
            }
        }
    }
    for row in cov.iter_mut() {
        for c in row.iter_mut() {
            *c /= rf - 1.0;
        }
    }
    let se = (0..dim)
        .map(|i| {
            (0..dim)
                .map(|j| ((cov[i][i] * cov[j][j] + cov[i][j] * cov[i][j]) / (rf - 1.0)).sqrt())
                .collect()
        })
        .collect();
    Ok(DeviationReport {
        t: k as f64 * dt,
        m,
        replications,
        dt,
        mean_spacings: mean,
        cov,
        se,
    })
}

/// Elementwise relative comparison of a model covariance with an
/// empirical one on entries at least `floor` times the largest empirical
/// diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovComparison {
    pub compared: usize,
    pub max_rel_error: f64,
    /// `(i, j, model, empirical)` for entries outside `tolerance`.
    pub failures: Vec<(usize, usize, f64, f64)>,
}

impl CovComparison {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.compared > 0
    }
}

pub fn compare_covariances(model: &DMatrix<f64>, empirical: &DMatrix<f64>, floor: f64, tolerance: f64) -> CovComparison {
    let max_diag = empirical.diagonal().amax();
    let mut out = CovComparison {
        compared: 0,
        max_rel_error: 0.0,
        failures: Vec::new(),
    };
    for i in 0..empirical.nrows() {
        for j in 0..empirical.ncols() {
            let e = empirical[(i, j)];
            if e.abs() < floor * max_diag {
                continue;
            }
            out.compared += 1;
            let rel = (model[(i, j)] - e).abs() / e.abs();
            out.max_rel_error = out.max_rel_error.max(rel);
            if rel > tolerance {
                out.failures.push((i, j, model[(i, j)], e));
            }
        }
    }
    out
}

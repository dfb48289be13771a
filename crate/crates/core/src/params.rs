//! Bounded-support driver-parameter laws.
//!
//! Each of `v_f`, `d`, `c` is an independent Beta variable rescaled onto a
//! closed interval. Sampling is by inverse CDF: a uniform draw is pushed
//! through a bisection inverse of the regularized incomplete beta function,
//! so results are reproducible bit-for-bit on any platform.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::relations::{DriverParams, HistoricalSample};
use crate::sim::TrajectorySet;
use crate::units::{kmh_to_mps, vph_to_vps};

/// Absolute tolerance of the Beta inverse CDF on the unit interval.
pub const BETA_INV_TOL: f64 = 1e-12;

/// A Beta(α, β) law rescaled onto `[lo, hi]`. `lo == hi` is a point mass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaMarginal {
    pub lo: f64,
    pub hi: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl BetaMarginal {
    pub fn new(lo: f64, hi: f64, alpha: f64, beta: f64) -> Result<Self> {
        let m = BetaMarginal { lo, hi, alpha, beta };
        m.validate()?;
        Ok(m)
    }

    pub fn point(value: f64) -> Result<Self> {
        BetaMarginal::new(value, value, 1.0, 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lo.is_finite() && self.hi.is_finite() && self.lo > 0.0) {
            return Err(Error::domain(format!(
                "support bounds must be finite with lo > 0, got [{}, {}]",
                self.lo, self.hi
            )));
        }
        if self.hi < self.lo {
            return Err(Error::domain(format!(
                "support upper bound {} is below lower bound {}",
                self.hi, self.lo
            )));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0 && self.beta.is_finite() && self.beta > 0.0)
        {
            return Err(Error::domain(format!(
                "beta shapes must be finite and positive, got ({}, {})",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }

    pub fn is_point_mass(&self) -> bool {
        self.hi == self.lo
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn inverse_cdf(&self, u: f64) -> f64 {
        if self.is_point_mass() {
            return self.lo;
        }
        let x = beta_inv_cdf(u, self.alpha, self.beta);
        (self.lo + self.width() * x).clamp(self.lo, self.hi)
    }

    pub fn mean(&self) -> f64 {
        self.lo + self.width() * self.alpha / (self.alpha + self.beta)
    }

    pub fn variance(&self) -> f64 {
        let (a, b) = (self.alpha, self.beta);
        self.width().powi(2) * a * b / ((a + b).powi(2) * (a + b + 1.0))
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.lo && x <= self.hi
    }
}

/// The joint parameter law: three independent [`BetaMarginal`]s.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DistributionRepr", into = "DistributionRepr")]
pub struct ParamDistribution {
    pub v_f: BetaMarginal,
    pub d: BetaMarginal,
    pub c: BetaMarginal,
}

#[derive(Serialize, Deserialize)]
struct DistributionRepr {
    v_f: BetaMarginal,
    d: BetaMarginal,
    c: BetaMarginal,
    units: String,
}

impl TryFrom<DistributionRepr> for ParamDistribution {
    type Error = Error;

    fn try_from(r: DistributionRepr) -> Result<Self> {
        if r.units != "SI" {
            return Err(Error::Schema(format!(
                "parameter distribution units must be \"SI\", got {:?}",
                r.units
            )));
        }
        ParamDistribution::new(r.v_f, r.d, r.c)
    }
}

impl From<ParamDistribution> for DistributionRepr {
    fn from(d: ParamDistribution) -> Self {
        DistributionRepr {
            v_f: d.v_f,
            d: d.d,
            c: d.c,
            units: "SI".into(),
        }
    }
}

impl ParamDistribution {
    pub fn new(v_f: BetaMarginal, d: BetaMarginal, c: BetaMarginal) -> Result<Self> {
        v_f.validate()?;
        d.validate()?;
        c.validate()?;
        Ok(ParamDistribution { v_f, d, c })
    }

    /// Signalized-arterial reference law: v_f ∈ [40, 80] km/h,
    /// d ∈ [5.88, 9.09] m, c ∈ [1100, 5100] veh/h, with common shapes.
    pub fn signal_reference(alpha: f64, beta: f64) -> Result<Self> {
        ParamDistribution::new(
            BetaMarginal::new(kmh_to_mps(40.0), kmh_to_mps(80.0), alpha, beta)?,
            BetaMarginal::new(5.88, 9.09, alpha, beta)?,
            BetaMarginal::new(vph_to_vps(1100.0), vph_to_vps(5100.0), alpha, beta)?,
        )
    }

    /// Degenerate law concentrated on one tuple.
    pub fn point_mass(theta: DriverParams) -> Result<Self> {
        ParamDistribution::new(
            BetaMarginal::point(theta.v_f)?,
            BetaMarginal::point(theta.d)?,
            BetaMarginal::point(theta.c)?,
        )
    }

    pub fn is_point_mass(&self) -> bool {
        self.v_f.is_point_mass() && self.d.is_point_mass() && self.c.is_point_mass()
    }

    /// Step `Δn / c^max` of the support; CFL-safe for every possible draw.
    pub fn cfl_dt(&self, dn: f64) -> f64 {
        dn / self.c.hi
    }

    pub fn contains(&self, p: &DriverParams) -> bool {
        self.v_f.contains(p.v_f) && self.d.contains(p.d) && self.c.contains(p.c)
    }

    pub fn inverse_cdf(&self, u: [f64; 3]) -> DriverParams {
        DriverParams {
            v_f: self.v_f.inverse_cdf(u[0]),
            d: self.d.inverse_cdf(u[1]),
            c: self.c.inverse_cdf(u[2]),
        }
    }

    /// Draw a historical sample of `j` tuples.
    pub fn draw_sample<R: Rng + ?Sized>(&self, j: usize, rng: &mut R) -> Result<HistoricalSample> {
        HistoricalSample::new((0..j).map(|_| sample_params(self, rng)).collect())
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// One driver's parameters by inverse CDF of three uniforms.
pub fn sample_params<R: Rng + ?Sized>(dist: &ParamDistribution, rng: &mut R) -> DriverParams {
    let u: [f64; 3] = [rng.random(), rng.random(), rng.random()];
    dist.inverse_cdf(u)
}

/// Largest step that satisfies the CFL bound for every driver: `min Δn / c_n`.
pub fn simulation_dt(params: &[DriverParams], dn: f64) -> Result<f64> {
    if params.is_empty() {
        return Err(Error::domain("simulation_dt needs at least one driver"));
    }
    if !(dn > 0.0) {
        return Err(Error::domain(format!("vehicle size must be positive, got {dn}")));
    }
    Ok(params.iter().map(|p| dn / p.c).fold(f64::INFINITY, f64::min))
}

/// Mean reaction-time step of the filter: `(1/J) Σ Δn / c_j`.
pub fn filter_dt(sample: &HistoricalSample, dn: f64) -> Result<f64> {
    if !(dn > 0.0) {
        return Err(Error::domain(format!("vehicle size must be positive, got {dn}")));
    }
    let t = sample.tuples();
    Ok(t.iter().map(|p| dn / p.c).sum::<f64>() / t.len() as f64)
}

// ---------------------------------------------------------------------------
// Special functions

/// `ln Γ(x)` for `x > 0` (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    let t = x + G + 0.5;
    for (i, c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Continued fraction for the incomplete beta function (modified Lentz).
fn beta_cf(x: f64, a: f64, b: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=500 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 1e-15 {
            break;
        }
    }
    h
}

/// Regularized incomplete beta function `I_x(a, b)`.
pub fn reg_inc_beta(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front =
        ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(x, a, b) / a
    } else {
        1.0 - front * beta_cf(1.0 - x, b, a) / b
    }
}

/// Inverse of `I_x(a, b)` in `x` by bisection to [`BETA_INV_TOL`].
pub fn beta_inv_cdf(u: f64, a: f64, b: f64) -> f64 {
    if u <= 0.0 {
        return 0.0;
    }
    if u >= 1.0 {
        return 1.0;
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while hi - lo > BETA_INV_TOL {
        let mid = 0.5 * (lo + hi);
        if reg_inc_beta(mid, a, b) < u {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

// ---------------------------------------------------------------------------
// Fitting from trajectories

/// Closed box of admissible parameter values used to constrain fits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SupportBox {
    pub v_f: (f64, f64),
    pub d: (f64, f64),
    pub c: (f64, f64),
}

impl SupportBox {
    fn lower(&self) -> [f64; 3] {
        [self.v_f.0, self.d.0, self.c.0]
    }

    fn upper(&self) -> [f64; 3] {
        [self.v_f.1, self.d.1, self.c.1]
    }

    pub fn validate(&self) -> Result<()> {
        for (lo, hi) in [self.v_f, self.d, self.c] {
            if !(lo > 0.0 && hi > lo && hi.is_finite()) {
                return Err(Error::domain(format!("invalid support interval [{lo}, {hi}]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    /// `|acceleration|` below which a sample counts as stationary, m/s².
    pub accel_threshold: f64,
    pub min_pairs: usize,
    pub min_vehicles: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            accel_threshold: 0.1,
            min_pairs: 10,
            min_vehicles: 5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub distribution: ParamDistribution,
    /// `(vehicle id, fitted parameters)` for every vehicle that was fitted.
    pub estimates: Vec<(usize, DriverParams)>,
    /// Vehicles with too few stationary pairs.
    pub skipped: Vec<usize>,
}

pub const SHAPE_MIN: f64 = 0.5;
pub const SHAPE_MAX: f64 = 50.0;

/// Fit per-vehicle relations to near-stationary `(spacing, speed)` pairs and
/// summarize them as a [`ParamDistribution`].
pub fn fit_params(
    traj: &TrajectorySet,
    bounds: &SupportBox,
    opts: &FitOptions,
) -> Result<FitReport> {
    bounds.validate()?;
    let dt = traj.dt();
    let mut estimates = Vec::new();
    let mut skipped = Vec::new();
    for veh in 1..=traj.n_vehicles() {
        let v = traj.speeds(veh);
        let s = traj.spacings(veh);
        let mut pairs = Vec::new();
        for k in 1..v.len().saturating_sub(1) {
            let accel = (v[k + 1] - v[k - 1]) / (2.0 * dt);
            if accel.abs() < opts.accel_threshold && s[k].is_finite() && s[k] > 0.0 {
                pairs.push((s[k], v[k]));
            }
        }
        if pairs.len() < opts.min_pairs {
            skipped.push(veh);
            continue;
        }
        estimates.push((veh, fit_relation(&pairs, bounds)));
    }
    if estimates.len() < opts.min_vehicles {
        return Err(Error::InsufficientData(format!(
            "only {} vehicles had at least {} stationary pairs (need {}); skipped {:?}",
            estimates.len(),
            opts.min_pairs,
            opts.min_vehicles,
            skipped
        )));
    }
    let pick = |f: fn(&DriverParams) -> f64| estimates.iter().map(|(_, p)| f(p)).collect::<Vec<_>>();
    let distribution = ParamDistribution::new(
        moment_match(&pick(|p| p.v_f), bounds.v_f)?,
        moment_match(&pick(|p| p.d), bounds.d)?,
        moment_match(&pick(|p| p.c), bounds.c)?,
    )?;
    Ok(FitReport {
        distribution,
        estimates,
        skipped,
    })
}

fn sse(pairs: &[(f64, f64)], p: &DriverParams) -> f64 {
    pairs.iter().map(|&(s, v)| (p.speed(s) - v).powi(2)).sum()
}

/// Least-squares fit of one relation inside `bounds`: coarse grid start,
/// then bounded Nelder-Mead in unit-box coordinates, restarted once.
fn fit_relation(pairs: &[(f64, f64)], bounds: &SupportBox) -> DriverParams {
    let lo = bounds.lower();
    let hi = bounds.upper();
    let to_params = |u: &[f64; 3]| {
        let q: Vec<f64> = (0..3).map(|i| lo[i] + u[i].clamp(0.0, 1.0) * (hi[i] - lo[i])).collect();
        DriverParams {
            v_f: q[0],
            d: q[1],
            c: q[2],
        }
    };
    let objective = |u: &[f64; 3]| sse(pairs, &to_params(u));

    let grid = [0.1, 0.3, 0.5, 0.7, 0.9];
    let mut best = [0.5; 3];
    let mut best_f = f64::INFINITY;
    for &a in &grid {
        for &b in &grid {
            for &c in &grid {
                let u = [a, b, c];
                let f = objective(&u);
                if f < best_f {
                    best_f = f;
                    best = u;
                }
            }
        }
    }
    let mut u = nelder_mead(&objective, best, 0.1, 4000);
    u = nelder_mead(&objective, u, 0.02, 4000);
    to_params(&u)
}

fn nelder_mead<F: Fn(&[f64; 3]) -> f64>(f: &F, start: [f64; 3], step: f64, max_iter: usize) -> [f64; 3] {
    let clamp = |mut x: [f64; 3]| {
        for v in &mut x {
            *v = v.clamp(0.0, 1.0);
        }
        x
    };
    let mut simplex: Vec<([f64; 3], f64)> = Vec::with_capacity(4);
    let s0 = clamp(start);
    simplex.push((s0, f(&s0)));
    for i in 0..3 {
        let mut x = s0;
        x[i] = if x[i] + step <= 1.0 { x[i] + step } else { x[i] - step };
        let x = clamp(x);
        simplex.push((x, f(&x)));
    }
    for _ in 0..max_iter {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let spread = simplex[3].1 - simplex[0].1;
        let size = (0..3)
            .map(|i| simplex.iter().map(|p| (p.0[i] - simplex[0].0[i]).abs()).fold(0.0, f64::max))
            .fold(0.0, f64::max);
        if spread.abs() <= 1e-16 * (1.0 + simplex[0].1.abs()) && size < 1e-10 {
            break;
        }
        let mut centroid = [0.0; 3];
        for p in &simplex[..3] {
            for i in 0..3 {
                centroid[i] += p.0[i] / 3.0;
            }
        }
        let worst = simplex[3];
        let along = |t: f64| {
            let mut x = [0.0; 3];
            for i in 0..3 {
                x[i] = centroid[i] + t * (worst.0[i] - centroid[i]);
            }
            clamp(x)
        };
        let xr = along(-1.0);
        let fr = f(&xr);
        if fr < simplex[0].1 {
            let xe = along(-2.0);
            let fe = f(&xe);
            simplex[3] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[2].1 {
            simplex[3] = (xr, fr);
        } else {
            let xc = if fr < worst.1 { along(-0.5) } else { along(0.5) };
            let fc = f(&xc);
            if fc < worst.1.min(fr) {
                simplex[3] = (xc, fc);
            } else {
                let best = simplex[0].0;
                for p in simplex.iter_mut().skip(1) {
                    let mut x = [0.0; 3];
                    for i in 0..3 {
                        x[i] = best[i] + 0.5 * (p.0[i] - best[i]);
                    }
                    *p = (x, f(&x));
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    simplex[0].0
}

/// Method-of-moments Beta marginal on the padded range of `values`,
/// clipped to `bounds`, shapes clipped to `[SHAPE_MIN, SHAPE_MAX]`.
fn moment_match(values: &[f64], bounds: (f64, f64)) -> Result<BetaMarginal> {
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let pad = if max > min { 0.05 * (max - min) } else { 1e-3 * min.abs().max(1e-9) };
    let lo = (min - pad).max(bounds.0);
    let hi = (max + pad).min(bounds.1);
    let (lo, hi) = if hi > lo { (lo, hi) } else { (bounds.0, bounds.1) };

    let xs: Vec<f64> = values.iter().map(|v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0)).collect();
    let n = xs.len() as f64;
    let m = (xs.iter().sum::<f64>() / n).clamp(1e-6, 1.0 - 1e-6);
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    let cap = SHAPE_MAX / m.max(1.0 - m);
    let common = if var > 0.0 { (m * (1.0 - m) / var - 1.0).min(cap) } else { cap };
    let alpha = (m * common).clamp(SHAPE_MIN, SHAPE_MAX);
    let beta = ((1.0 - m) * common).clamp(SHAPE_MIN, SHAPE_MAX);
    BetaMarginal::new(lo, hi, alpha, beta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn ln_gamma_known_values() {
        assert!((ln_gamma(1.0)).abs() < 1e-14);
        assert!((ln_gamma(5.0) - 24f64.ln()).abs() < 1e-13);
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-13);
    }

    #[test]
    fn incomplete_beta_closed_forms() {
        // I_x(1,1) = x; I_x(2,2) = 3x² - 2x³; I_x(2,5) = 1 - (1-x)^5 (1 + 5x)
        for &x in &[0.01, 0.2, 0.5, 0.77, 0.99] {
            assert!((reg_inc_beta(x, 1.0, 1.0) - x).abs() < 1e-13);
            assert!((reg_inc_beta(x, 2.0, 2.0) - (3.0 * x * x - 2.0 * x * x * x)).abs() < 1e-13);
            let exact = 1.0 - (1.0 - x).powi(5) * (1.0 + 5.0 * x);
            assert!((reg_inc_beta(x, 2.0, 5.0) - exact).abs() < 1e-13);
        }
    }

    #[test]
    fn inverse_cdf_inverts() {
        for &(a, b) in &[(2.0, 2.0), (2.0, 5.0), (0.5, 0.7), (30.0, 3.0)] {
            for &u in &[1e-6, 0.1, 0.5, 0.9, 1.0 - 1e-6] {
                let x = beta_inv_cdf(u, a, b);
                let lo = reg_inc_beta((x - 2e-12).max(0.0), a, b);
                let hi = reg_inc_beta((x + 2e-12).min(1.0), a, b);
                assert!(lo <= u + 1e-13 && u <= hi + 1e-13, "a={a} b={b} u={u}");
            }
        }
    }

    #[test]
    fn uniform_median_is_midpoint() {
        let m = BetaMarginal::new(2.0, 6.0, 1.0, 1.0).unwrap();
        assert!((m.inverse_cdf(0.5) - 4.0).abs() < 1e-11);
    }

    #[test]
    fn reference_law_draws_stay_in_support() {
        let dist = ParamDistribution::signal_reference(2.0, 2.0).unwrap();
        let mut r = rng::stream(3);
        for _ in 0..10_000 {
            let p = sample_params(&dist, &mut r);
            assert!(dist.contains(&p));
            assert!(p.v_f >= 40.0 / 3.6 && p.v_f <= 80.0 / 3.6);
            assert!(p.d >= 5.88 && p.d <= 9.09);
            assert!(p.c >= 1100.0 / 3600.0 && p.c <= 5100.0 / 3600.0);
        }
    }

    #[test]
    fn beta_2_5_sample_mean() {
        // Beta(2, 5) on [1, 2]: mean 1 + 2/7, standard error sqrt(var / n).
        let m = BetaMarginal::new(1.0, 2.0, 2.0, 5.0).unwrap();
        let mut r = rng::stream(11);
        let n = 100_000;
        let mean = (0..n)
            .map(|_| m.inverse_cdf(r.random::<f64>()) - 1.0)
            .sum::<f64>()
            / n as f64;
        let var = 2.0 * 5.0 / (49.0 * 8.0);
        let se = (var / n as f64).sqrt();
        assert!((mean - 2.0 / 7.0).abs() < 3.0 * se, "mean {mean}");
    }

    #[test]
    fn sampling_is_reproducible() {
        let dist = ParamDistribution::signal_reference(2.0, 2.0).unwrap();
        let a: Vec<_> = {
            let mut r = rng::stream(42);
            (0..50).map(|_| sample_params(&dist, &mut r)).collect()
        };
        let b: Vec<_> = {
            let mut r = rng::stream(42);
            (0..50).map(|_| sample_params(&dist, &mut r)).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn dt_rules() {
        let p = |c_vph: f64| DriverParams::new(15.0, 7.0, c_vph / 3600.0).unwrap();
        assert!((simulation_dt(&[p(3600.0)], 1.0).unwrap() - 1.0).abs() < 1e-12);
        assert!((simulation_dt(&[p(1800.0), p(3600.0)], 1.0).unwrap() - 1.0).abs() < 1e-12);
        assert!(simulation_dt(&[], 1.0).is_err());

        let sample = HistoricalSample::new(vec![p(1800.0), p(3600.0)]).unwrap();
        assert!((filter_dt(&sample, 1.0).unwrap() - 1.5).abs() < 1e-12);
        let same = HistoricalSample::new(vec![p(2400.0); 4]).unwrap();
        assert!((filter_dt(&same, 2.0).unwrap() - 3.0).abs() < 1e-12);
        assert!(filter_dt(&sample, 1.0).unwrap() >= simulation_dt(sample.tuples(), 1.0).unwrap());
    }

    #[test]
    fn worst_case_reference_step() {
        // c_max = 5100 veh/h bounds the step from below at 3600/5100 s.
        let dist = ParamDistribution::signal_reference(2.0, 2.0).unwrap();
        let mut r = rng::stream(5);
        let ps: Vec<_> = (0..1000).map(|_| sample_params(&dist, &mut r)).collect();
        let dt = simulation_dt(&ps, 1.0).unwrap();
        assert!(dt >= 3600.0 / 5100.0 - 1e-12);
        assert!((3600.0f64 / 5100.0 - 0.70588).abs() < 1e-4);
    }

    #[test]
    fn json_schema() {
        let dist = ParamDistribution::signal_reference(2.0, 3.0).unwrap();
        let v: serde_json::Value = serde_json::to_value(dist).unwrap();
        assert_eq!(v["units"], "SI");
        assert_eq!(v["d"]["lo"], 5.88);
        assert_eq!(v["c"]["beta"], 3.0);
        let back: ParamDistribution = serde_json::from_value(v).unwrap();
        assert_eq!(back, dist);
        let bad = r#"{"v_f":{"lo":1,"hi":2,"alpha":1,"beta":1},"d":{"lo":1,"hi":2,"alpha":1,"beta":1},"c":{"lo":1,"hi":2,"alpha":1,"beta":1},"units":"imperial"}"#;
        assert!(serde_json::from_str::<ParamDistribution>(bad).is_err());
    }

    #[test]
    fn invalid_marginals_rejected() {
        assert!(BetaMarginal::new(0.0, 1.0, 1.0, 1.0).is_err());
        assert!(BetaMarginal::new(2.0, 1.0, 1.0, 1.0).is_err());
        assert!(BetaMarginal::new(1.0, 2.0, 0.0, 1.0).is_err());
        assert!(BetaMarginal::new(1.0, 2.0, 1.0, f64::NAN).is_err());
    }

    #[test]
    fn moment_match_degenerate_input_is_tight_not_zero() {
        let m = moment_match(&[10.0; 8], (5.0, 20.0)).unwrap();
        assert!(m.variance() > 0.0);
        assert!(m.variance() < 1e-4);
        assert!(m.lo >= 5.0 && m.hi <= 20.0);
        assert!(m.alpha <= SHAPE_MAX && m.beta <= SHAPE_MAX);
        assert!(m.alpha >= SHAPE_MIN && m.beta >= SHAPE_MIN);
    }

    #[test]
    fn relation_fit_recovers_noiseless_curve() {
        let truth = DriverParams::new(17.0, 7.1, 0.9).unwrap();
        let pairs: Vec<(f64, f64)> = (0..40)
            .map(|k| {
                let s = 7.2 + k as f64 * 1.5;
                (s, truth.speed(s))
            })
            .collect();
        let bounds = SupportBox {
            v_f: (10.0, 25.0),
            d: (5.0, 10.0),
            c: (0.2, 1.6),
        };
        let fit = fit_relation(&pairs, &bounds);
        assert!((fit.v_f / truth.v_f - 1.0).abs() < 1e-3, "{fit:?}");
        assert!((fit.d / truth.d - 1.0).abs() < 1e-3, "{fit:?}");
        assert!((fit.c / truth.c - 1.0).abs() < 1e-3, "{fit:?}");
    }
}

//! Newell-Franklin speed-spacing relations.
//!
//! A single driver with parameters `θ = (v_f, d, c)` travels at
//!
//! ```text
//! V(s) = v_f - v_f * exp(-(c / v_f) * (s - d))
//! ```
//!
//! clamped to `[0, v_f]`. The mean relation `V̄(s) = E V(s, ω)` is approximated
//! by averaging over a fixed [`HistoricalSample`] of parameter tuples drawn once
//! up front. [`RelationTable`] tabulates the same quantities on a spacing grid
//! for long filter runs.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One driver's parameters, SI units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriverParams {
    /// Free-flow (desired) speed, m/s.
    pub v_f: f64,
    /// Minimum safety spacing, m/veh.
    pub d: f64,
    /// Wave-slope constant (inverse reaction time), veh/s.
    pub c: f64,
}

impl DriverParams {
    pub fn new(v_f: f64, d: f64, c: f64) -> Result<Self> {
        let p = DriverParams { v_f, d, c };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, x) in [("v_f", self.v_f), ("d", self.d), ("c", self.c)] {
            if !(x.is_finite() && x > 0.0) {
                return Err(Error::domain(format!(
                    "driver parameter {name} must be finite and positive, got {x}"
                )));
            }
        }
        Ok(())
    }

    /// Clamped speed at spacing `s`. No validation; callers hold valid
    /// parameters and finite spacings.
    #[inline]
    pub fn speed(&self, s: f64) -> f64 {
        if s <= self.d {
            return 0.0;
        }
        let v = -self.v_f * (-(self.c / self.v_f) * (s - self.d)).exp_m1();
        v.min(self.v_f)
    }

    /// Slope `dV/ds`; the right limit `c` at the kink `s = d`.
    #[inline]
    pub fn speed_gradient(&self, s: f64) -> f64 {
        if s < self.d {
            0.0
        } else {
            self.c * (-(self.c / self.v_f) * (s - self.d)).exp()
        }
    }

    /// Inverse relation; `None` outside `0 <= v < v_f`.
    #[inline]
    pub fn spacing(&self, v: f64) -> Option<f64> {
        if !(0.0..self.v_f).contains(&v) {
            return None;
        }
        Some(self.d - (self.v_f / self.c) * (-v / self.v_f).ln_1p())
    }
}

/// Speed of a driver with parameters `theta` at spacing `s`.
pub fn nf_speed(s: f64, theta: &DriverParams) -> Result<f64> {
    if !s.is_finite() {
        return Err(Error::domain(format!("spacing must be finite, got {s}")));
    }
    theta.validate()?;
    Ok(theta.speed(s))
}

/// Spacing at which a driver with parameters `theta` travels at speed `v`.
pub fn nf_spacing(v: f64, theta: &DriverParams) -> Result<f64> {
    theta.validate()?;
    if v < 0.0 || !v.is_finite() {
        return Err(Error::domain(format!("speed must be finite and nonnegative, got {v}")));
    }
    theta.spacing(v).ok_or_else(|| {
        Error::domain(format!(
            "speed {v} m/s is not below the free-flow speed {} m/s; inverse undefined",
            theta.v_f
        ))
    })
}

/// Mean, variance and mean-gradient of `V(s, ω)` at one spacing.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SpeedMoments {
    pub mean: f64,
    pub variance: f64,
    pub gradient: f64,
}

/// A mean speed-spacing relation together with its variance and gradient.
pub trait MeanRelation: Sync {
    fn moments(&self, s: f64) -> SpeedMoments;

    fn mean_speed(&self, s: f64) -> f64 {
        self.moments(s).mean
    }

    /// Largest free-flow speed among the underlying tuples.
    fn max_free_speed(&self) -> f64;

    /// `sup_s dV̄/ds`, the fastest kinematic wave of the mean relation.
    fn max_wave_speed(&self) -> f64;

    fn sample(&self) -> &HistoricalSample;
}

/// A fixed random sample of `J` parameter tuples.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoricalSample {
    tuples: Vec<DriverParams>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SampleRow {
    v_f_mps: f64,
    d_m: f64,
    c_vps: f64,
}

impl HistoricalSample {
    pub fn new(tuples: Vec<DriverParams>) -> Result<Self> {
        if tuples.is_empty() {
            return Err(Error::domain("historical sample must contain at least one tuple"));
        }
        for t in &tuples {
            t.validate()?;
        }
        Ok(HistoricalSample { tuples })
    }

    pub fn tuples(&self) -> &[DriverParams] {
        &self.tuples
    }

    pub fn len(&self) -> usize {
        self.tuples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tuples.is_empty()
    }

    pub fn max_c(&self) -> f64 {
        self.tuples.iter().map(|t| t.c).fold(f64::MIN, f64::max)
    }

    pub fn min_d(&self) -> f64 {
        self.tuples.iter().map(|t| t.d).fold(f64::MAX, f64::min)
    }

    pub fn max_d(&self) -> f64 {
        self.tuples.iter().map(|t| t.d).fold(f64::MIN, f64::max)
    }

    /// Single fused pass over the tuples. The variance uses the `J - 1`
    /// denominator and is reported as 0 for `J = 1`.
    pub fn moments_at(&self, s: f64) -> SpeedMoments {
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        let mut grad = 0.0;
        // Shifted accumulation keeps the variance accurate when the speeds
        // are nearly equal.
        let shift = self.tuples[0].speed(s);
        for t in &self.tuples {
            let (v, g) = if s < t.d {
                (0.0, 0.0)
            } else {
                let em1 = (-(t.c / t.v_f) * (s - t.d)).exp_m1();
                ((-t.v_f * em1).min(t.v_f), t.c * (em1 + 1.0))
            };
            let dv = v - shift;
            sum += dv;
            sum_sq += dv * dv;
            grad += g;
        }

        let j = self.tuples.len() as f64;
        let mean_shifted = sum / j;
        let variance = if self.tuples.len() > 1 {
            ((sum_sq - j * mean_shifted * mean_shifted) / (j - 1.0)).max(0.0)
        } else {
            0.0
        };
        SpeedMoments {
            mean: shift + mean_shifted,
            variance,
            gradient: grad / j,
        }
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path.as_ref())?;
        let headers = rdr.headers()?.clone();
        let expected = ["v_f_mps", "d_m", "c_vps"];
        if headers.iter().collect::<Vec<_>>() != expected {
            return Err(Error::Schema(format!(
                "historical sample header must be {}, got {}",
                expected.join(","),
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut tuples = Vec::new();
        for row in rdr.deserialize::<SampleRow>() {
            let row = row?;
            tuples.push(DriverParams::new(row.v_f_mps, row.d_m, row.c_vps)?);
        }
        HistoricalSample::new(tuples)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut wtr = csv::Writer::from_path(path.as_ref())?;
        for t in &self.tuples {
            wtr.serialize(SampleRow {
                v_f_mps: t.v_f,
                d_m: t.d,
                c_vps: t.c,
            })?;
        }
        wtr.flush()?;
        Ok(())
    }
}

impl MeanRelation for HistoricalSample {
    fn moments(&self, s: f64) -> SpeedMoments {
        self.moments_at(s)
    }

    fn max_free_speed(&self) -> f64 {
        self.tuples.iter().map(|t| t.v_f).fold(f64::MIN, f64::max)
    }

    fn max_wave_speed(&self) -> f64 {
        // Each tuple's slope is zero left of its kink and decays right of
        // it, so on a cell [a, b] the average slope is at most the sum over
        // kinks below b of c·exp(-(c/v_f)(a - d)^+). The supremum lies in
        // [min d, max d]; the bound is tight to a few percent.
        const CELLS: usize = 256;
        let (lo, hi) = (self.min_d(), self.max_d());
        if hi <= lo {
            return self.tuples.iter().map(|t| t.c).sum::<f64>() / self.len() as f64;
        }
        let w = (hi - lo) / CELLS as f64;
        let mut bound = vec![0.0; CELLS];
        for t in &self.tuples {
            let first = (((t.d - lo) / w).floor() as usize).min(CELLS - 1);
            let rate = t.c / t.v_f;
            for (k, b) in bound.iter_mut().enumerate().skip(first) {
                let a = lo + k as f64 * w;
                *b += t.c * (-rate * (a - t.d).max(0.0)).exp();
            }
        }
        bound.into_iter().fold(0.0, f64::max) / self.len() as f64
    }

    fn sample(&self) -> &HistoricalSample {
        self
    }
}

fn require_finite(s: f64) -> Result<()> {
    if s.is_finite() {
        Ok(())
    } else {
        Err(Error::domain(format!("spacing must be finite, got {s}")))
    }
}

/// Empirical mean relation `(1/J) Σ_j V_j(s)`.
pub fn mean_speed(s: f64, sample: &HistoricalSample) -> Result<f64> {
    require_finite(s)?;
    Ok(sample.moments_at(s).mean)
}

/// Sample variance of `{V_j(s)}`; needs `J >= 2`.
pub fn speed_variance(s: f64, sample: &HistoricalSample) -> Result<f64> {
    require_finite(s)?;
    if sample.len() < 2 {
        return Err(Error::domain("speed variance needs at least two tuples"));
    }
    Ok(sample.moments_at(s).variance)
}

/// Analytic `dV̄/ds`; zero in the clamp region of every tuple.
pub fn mean_speed_gradient(s: f64, sample: &HistoricalSample) -> Result<f64> {
    require_finite(s)?;
    Ok(sample.moments_at(s).gradient)
}

/// Spacing at which the mean relation reaches `target` m/s, by bisection.
pub fn mean_spacing_for_speed(relation: &dyn MeanRelation, target: f64) -> Result<f64> {
    let sample = relation.sample();
    let mut lo = sample.min_d();
    let sup = sample.tuples().iter().map(|t| t.v_f).sum::<f64>() / sample.len() as f64;
    if !(target > 0.0 && target < sup) {
        return Err(Error::config(format!(
            "speed {target} m/s is outside the range (0, {sup}) of the mean relation"
        )));
    }
    let mut hi = lo + 1.0;
    while relation.mean_speed(hi) < target {
        hi = lo + 2.0 * (hi - lo);
        if hi > 1e7 {
            return Err(Error::config(format!("mean relation never reaches {target} m/s")));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if relation.mean_speed(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-10 {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Grid-tabulated [`MeanRelation`] with linear interpolation.
///
/// The grid is fine (2 cm) up to 100 m past the largest safety distance and
/// 10 cm beyond, out to the spacing where every tuple is within `e^-30` of
/// its free-flow speed. Past the grid the asymptotic moments are returned.
#[derive(Debug, Clone)]
pub struct RelationTable {
    sample: HistoricalSample,
    knots: Vec<f64>,
    values: Vec<SpeedMoments>,
    far: SpeedMoments,
    max_free_speed: f64,
    max_wave_speed: f64,
}

impl RelationTable {
    pub const FINE_STEP: f64 = 0.02;
    pub const COARSE_STEP: f64 = 0.1;

    pub fn new(sample: HistoricalSample) -> Self {
        let min_d = sample.min_d();
        let max_d = sample.max_d();
        let reach = sample
            .tuples()
            .iter()
            .map(|t| t.v_f / t.c)
            .fold(0.0, f64::max);
        let fine_end = max_d + 100.0;
        let coarse_end = (max_d + 30.0 * reach).max(fine_end + Self::COARSE_STEP);

        let mut knots = Vec::new();
        let mut s = (min_d - 1.0).max(0.0);
        while s < fine_end {
            knots.push(s);
            s += Self::FINE_STEP;
        }
        let start = knots.len();
        let mut k = 0usize;
        loop {
            let s = fine_end + k as f64 * Self::COARSE_STEP;
            knots.push(s);
            if s >= coarse_end {
                break;
            }
            k += 1;
        }
        debug_assert!(knots.len() > start);

        let values: Vec<SpeedMoments> = knots.par_iter().map(|&s| sample.moments_at(s)).collect();
        let vf: Vec<f64> = sample.tuples().iter().map(|t| t.v_f).collect();
        let j = vf.len() as f64;
        let mean_vf = vf.iter().sum::<f64>() / j;
        let var_vf = if vf.len() > 1 {
            vf.iter().map(|v| (v - mean_vf).powi(2)).sum::<f64>() / (j - 1.0)
        } else {
            0.0
        };
        let max_wave_speed = sample.max_wave_speed();
        let max_free_speed = sample.max_free_speed();
        RelationTable {
            sample,
            knots,
            values,
            far: SpeedMoments {
                mean: mean_vf,
                variance: var_vf,
                gradient: 0.0,
            },
            max_free_speed,
            max_wave_speed,
        }
    }

    fn locate(&self, s: f64) -> usize {
        // Knots are uniform on two segments; binary search is simple and
        // fast enough.
        match self.knots.binary_search_by(|k| k.total_cmp(&s)) {
            Ok(i) => i.min(self.knots.len() - 2),
            Err(i) => i.saturating_sub(1).min(self.knots.len() - 2),
        }
    }
}

impl MeanRelation for RelationTable {
    fn moments(&self, s: f64) -> SpeedMoments {
        if s <= self.knots[0] {
            // Below every safety distance all speeds are clamped to zero.
            return self.values[0];
        }
        if s >= *self.knots.last().unwrap() {
            return self.far;
        }
        let i = self.locate(s);
        let (s0, s1) = (self.knots[i], self.knots[i + 1]);
        let w = (s - s0) / (s1 - s0);
        let (a, b) = (self.values[i], self.values[i + 1]);
        SpeedMoments {
            mean: a.mean + w * (b.mean - a.mean),
            variance: a.variance + w * (b.variance - a.variance),
            gradient: a.gradient + w * (b.gradient - a.gradient),
        }
    }

    fn max_free_speed(&self) -> f64 {
        self.max_free_speed
    }

    fn max_wave_speed(&self) -> f64 {
        self.max_wave_speed
    }

    fn sample(&self) -> &HistoricalSample {
        &self.sample
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::units::{kmh_to_mps, mps_to_kmh, vph_to_vps};

    fn example_theta() -> DriverParams {
        DriverParams::new(kmh_to_mps(60.0), 7.2, vph_to_vps(3600.0)).unwrap()
    }

    fn dispersed_sample() -> HistoricalSample {
        HistoricalSample::new(vec![
            DriverParams::new(12.0, 6.0, 0.4).unwrap(),
            DriverParams::new(16.0, 7.5, 0.9).unwrap(),
            DriverParams::new(21.0, 8.8, 1.3).unwrap(),
        ])
        .unwrap()
    }

    #[test]
    fn speed_is_zero_at_safety_distance() {
        let th = example_theta();
        assert_eq!(nf_speed(th.d, &th).unwrap(), 0.0);
        assert_eq!(nf_speed(th.d - 3.0, &th).unwrap(), 0.0);
    }

    #[test]
    fn speed_tends_to_free_flow() {
        let th = example_theta();
        assert!((nf_speed(1e6, &th).unwrap() - th.v_f).abs() < 1e-12);
    }

    #[test]
    fn hand_evaluated_speed() {
        // exponent -(3600/60 veh/km)(7.2 m) = -0.432
        let th = example_theta();
        let v = mps_to_kmh(nf_speed(14.4, &th).unwrap());
        let expected = 60.0 * (1.0 - (-0.432f64).exp());
        assert!((v - expected).abs() < 1e-9);
        assert!((v - 21.04).abs() < 0.01);
    }

    #[test]
    fn inverse_of_hand_example() {
        let th = example_theta();
        let v = nf_speed(14.4, &th).unwrap();
        assert!((nf_spacing(v, &th).unwrap() - 14.4).abs() < 1e-9);
        assert_eq!(nf_spacing(0.0, &th).unwrap(), th.d);
    }

    #[test]
    fn inverse_domain_errors() {
        let th = example_theta();
        assert!(matches!(nf_spacing(th.v_f, &th), Err(Error::Domain(_))));
        assert!(matches!(nf_spacing(-0.1, &th), Err(Error::Domain(_))));
        assert!(matches!(nf_speed(f64::NAN, &th), Err(Error::Domain(_))));
        let bad = DriverParams { v_f: 10.0, d: -1.0, c: 1.0 };
        assert!(nf_speed(5.0, &bad).is_err());
    }

    #[test]
    fn single_tuple_mean_is_the_tuple() {
        let th = example_theta();
        let sample = HistoricalSample::new(vec![th]).unwrap();
        for s in [5.0, 7.2, 9.0, 14.4, 40.0] {
            assert_eq!(mean_speed(s, &sample).unwrap(), th.speed(s));
        }
    }

    #[test]
    fn mean_bounded_by_largest_free_speed() {
        let sample = dispersed_sample();
        for s in [0.0, 7.0, 10.0, 50.0, 1e4] {
            let v = mean_speed(s, &sample).unwrap();
            assert!(v >= 0.0 && v <= 21.0);
        }
    }

    #[test]
    fn identical_tuples_have_zero_variance() {
        let th = example_theta();
        let sample = HistoricalSample::new(vec![th; 5]).unwrap();
        assert_eq!(speed_variance(20.0, &sample).unwrap(), 0.0);
        assert!(speed_variance(20.0, &HistoricalSample::new(vec![th]).unwrap()).is_err());
    }

    #[test]
    fn shared_safety_distance_gives_zero_speed_variance_at_it() {
        let sample = HistoricalSample::new(vec![
            DriverParams::new(12.0, 9.09, 0.4).unwrap(),
            DriverParams::new(20.0, 9.09, 1.2).unwrap(),
        ])
        .unwrap();
        assert_eq!(speed_variance(9.09, &sample).unwrap(), 0.0);
    }

    #[test]
    fn gradient_in_clamp_region_and_near_kink() {
        let sample = dispersed_sample();
        assert_eq!(mean_speed_gradient(5.9, &sample).unwrap(), 0.0);
        let th = example_theta();
        let single = HistoricalSample::new(vec![th]).unwrap();
        let g = mean_speed_gradient(th.d + 1e-9, &single).unwrap();
        assert!((g - th.c).abs() < 1e-9);
        // right limit at the kink itself
        assert_eq!(mean_speed_gradient(th.d, &single).unwrap(), th.c);
    }

    #[test]
    fn gradient_matches_central_difference() {
        let sample = dispersed_sample();
        let h = 1e-4;
        for s in [10.0, 15.0, 30.0, 60.0] {
            let fd = (mean_speed(s + h, &sample).unwrap() - mean_speed(s - h, &sample).unwrap())
                / (2.0 * h);
            let g = mean_speed_gradient(s, &sample).unwrap();
            assert!(((g - fd) / g).abs() < 1e-5, "s={s} g={g} fd={fd}");
        }
    }

    #[test]
    fn fused_moments_match_two_pass() {
        let sample = dispersed_sample();
        for s in [6.5, 8.0, 12.0, 25.0] {
            let speeds: Vec<f64> = sample.tuples().iter().map(|t| t.speed(s)).collect();
            let m = speeds.iter().sum::<f64>() / 3.0;
            let var = speeds.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 2.0;
            let got = sample.moments_at(s);
            assert!((got.mean - m).abs() < 1e-12);
            assert!((got.variance - var).abs() < 1e-10);
        }
    }

    #[test]
    fn max_wave_speed_dominates_grid() {
        let sample = dispersed_sample();
        let w = sample.max_wave_speed();
        for k in 0..2000 {
            let s = 5.0 + 0.01 * k as f64;
            assert!(sample.moments_at(s).gradient <= w + 1e-12);
        }
    }

    #[test]
    fn table_tracks_exact_relation() {
        let sample = dispersed_sample();
        let table = RelationTable::new(sample.clone());
        for k in 0..400 {
            let s = 4.0 + 0.37 * k as f64;
            let a = table.moments(s);
            let b = sample.moments_at(s);
            assert!((a.mean - b.mean).abs() < 1e-4, "s={s}");
            assert!((a.variance - b.variance).abs() < 1e-3, "s={s}");
        }
        let far = table.moments(1e7);
        assert!((far.mean - (12.0 + 16.0 + 21.0) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn mean_spacing_inverts_mean_relation() {
        let sample = dispersed_sample();
        let s = mean_spacing_for_speed(&sample, 3.0).unwrap();
        assert!((mean_speed(s, &sample).unwrap() - 3.0).abs() < 1e-8);
        assert!(mean_spacing_for_speed(&sample, 30.0).is_err());
    }

    #[test]
    fn sample_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sample.csv");
        let sample = dispersed_sample();
        sample.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("v_f_mps,d_m,c_vps\n"));
        assert_eq!(HistoricalSample::read_csv(&path).unwrap(), sample);
    }

    #[test]
    fn empty_sample_is_rejected() {
        assert!(HistoricalSample::new(vec![]).is_err());
    }
}

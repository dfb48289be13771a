//! Mean and covariance dynamics of the platoon.
//!
//! The state is `z = [s_1..s_N, x_1..x_N]`. The mean follows
//!
//! ```text
//! s̄ ← s̄ + (Δt/Δn) D V̄(s̄)        x̄ ← x̄ + Δt V̄(s̄)
//! ```
//!
//! where `D V = [v_0 - V_1, V_1 - V_2, ..., V_{N-1} - V_N]`. The covariance
//! follows the explicit Euler discretization of
//!
//! ```text
//! dP/dt = A P + P Aᵀ + κ B Σ Bᵀ
//! ```
//!
//! with `A = B G`, `B = [(1/Δn) D; I]` (leader column dropped, the boundary
//! is deterministic), `G = diag(dV̄/ds)` and `Σ = diag(Var V(s̄_n, ω))`.
//! `κ` is `Δt` under [`DiffusionScaling::Alg2`] and 1 under
//! [`DiffusionScaling::Standard`].

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::filter_dt;
use crate::relations::{MeanRelation, SpeedMoments};
use crate::sim::{Boundary, Scenario};

/// Mean state at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanState {
    pub t: f64,
    /// Spacings (first N) then positions (last N).
    pub z: DVector<f64>,
    /// Boundary (vehicle 0) position, carried for bookkeeping.
    pub leader_x: f64,
    pub dn: f64,
}

impl MeanState {
    /// Deterministic initial condition of a scenario.
    pub fn initial(scenario: &Scenario) -> Self {
        let n = scenario.n_vehicles();
        let leader_x = scenario.boundary.position(0.0, scenario.origin);
        let mut z = DVector::zeros(2 * n);
        let mut x = leader_x;
        for (i, &s) in scenario.initial_spacings.iter().enumerate() {
            z[i] = s;
            x -= scenario.dn * s;
            z[n + i] = x;
        }
        MeanState {
            t: 0.0,
            z,
            leader_x,
            dn: scenario.dn,
        }
    }

    pub fn n_vehicles(&self) -> usize {
        self.z.len() / 2
    }

    pub fn spacings(&self) -> &[f64] {
        &self.z.as_slice()[..self.n_vehicles()]
    }

    pub fn positions(&self) -> &[f64] {
        &self.z.as_slice()[self.n_vehicles()..]
    }

    /// Largest violation of `x_{n-1} - x_n = Δn s_n`, with `x_0` the leader.
    pub fn consistency_error(&self) -> f64 {
        let s = self.spacings();
        let x = self.positions();
        (0..s.len())
            .map(|i| {
                let up = if i == 0 { self.leader_x } else { x[i - 1] };
                (up - x[i] - self.dn * s[i]).abs()
            })
            .fold(0.0, f64::max)
    }
}

/// Covariance of the state at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct CovMatrix {
    pub t: f64,
    pub p: DMatrix<f64>,
}

impl CovMatrix {
    pub fn zeros(t: f64, n_vehicles: usize) -> Self {
        CovMatrix {
            t,
            p: DMatrix::zeros(2 * n_vehicles, 2 * n_vehicles),
        }
    }

    pub fn trace(&self) -> f64 {
        self.p.trace()
    }

    /// `max |P_ij - P_ji| / max |P_ij|`.
    pub fn asymmetry(&self) -> f64 {
        let scale = self.p.amax();
        if scale == 0.0 {
            return 0.0;
        }
        let n = self.p.nrows();
        let mut worst = 0.0f64;
        for j in 0..n {
            for i in (j + 1)..n {
                worst = worst.max((self.p[(i, j)] - self.p[(j, i)]).abs());
            }
        }
        worst / scale
    }

    /// Numerically PSD: all eigenvalues `>= -tol * trace`. Tested with a
    /// Cholesky factorization of `P + tol * trace * I`.
    pub fn is_psd(&self, tol: f64) -> bool {
        self.is_psd_at_scale(tol, self.trace())
    }

    /// PSD up to `tol · scale`; `scale` is the magnitude of the operands
    /// that produced the matrix, so cancellation noise is not flagged when
    /// the matrix itself collapses.
    pub fn is_psd_at_scale(&self, tol: f64, scale: f64) -> bool {
        let tr = self.trace();
        if tr < 0.0 {
            return false;
        }
        let scale = scale.max(tr);
        if scale == 0.0 {
            return self.p.amax() == 0.0;
        }
        cholesky_succeeds(&self.p, tol * scale)
    }
}

/// Blocked lower Cholesky of `a + shift I`; only the success flag is kept.
/// Trailing updates go through `gemm`.
fn cholesky_succeeds(a: &DMatrix<f64>, shift: f64) -> bool {
    const NB: usize = 48;
    let n = a.nrows();
    let mut l = a.clone();
    for i in 0..n {
        l[(i, i)] += shift;
    }
    for k in (0..n).step_by(NB) {
        let b = NB.min(n - k);
        for j in k..k + b {
            let d = l[(j, j)] - (k..j).map(|p| l[(j, p)] * l[(j, p)]).sum::<f64>();
            if !(d > 0.0) {
                return false;
            }
            let d = d.sqrt();
            l[(j, j)] = d;
            for i in j + 1..k + b {
                let dot: f64 = (k..j).map(|p| l[(i, p)] * l[(j, p)]).sum();
                l[(i, j)] = (l[(i, j)] - dot) / d;
            }
        }
        let m = n - k - b;
        if m == 0 {
            break;
        }
        // L21 = A21 L11⁻ᵀ, then A22 -= L21 L21ᵀ
        let l11 = l.view((k, k), (b, b)).lower_triangle();
        let mut panel_t = l.view((k + b, k), (m, b)).transpose();
        if !l11.solve_lower_triangular_mut(&mut panel_t) {
            return false;
        }
        let panel = panel_t.transpose();
        l.view_mut((k + b, k + b), (m, m)).gemm(-1.0, &panel, &panel_t, 1.0);
        l.view_mut((k + b, k), (m, b)).copy_from(&panel);
    }
    true
}

/// Discretization of the drift part of the covariance ODE.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovScheme {
    /// `P + Δt (A P + P Aᵀ)`. Loses definiteness once `Δt dV̄/ds > 1`.
    Euler,
    /// `(I + Δt A) P (I + Δt A)ᵀ`: first order like `Euler`, differs by
    /// `Δt² A P Aᵀ`, preserves definiteness and is stable whenever the mean
    /// step is.
    #[default]
    Factored,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiffusionScaling {
    /// `Δt² B Σ Bᵀ` per step, the literal filter-algorithm update.
    #[default]
    Alg2,
    /// `Δt B Σ Bᵀ` per step, the Euler-Maruyama covariance update.
    Standard,
}

/// `[v_0 - V_1, V_1 - V_2, ..., V_{N-1} - V_N]`.
pub fn apply_d(speeds: &[f64], v0: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(speeds.len());
    let mut up = v0;
    for &v in speeds {
        out.push(up - v);
        up = v;
    }
    out
}

/// Relation moments at every mean spacing.
fn moments_of(state: &MeanState, relation: &dyn MeanRelation) -> Vec<SpeedMoments> {
    state.spacings().iter().map(|&s| relation.moments(s)).collect()
}

/// Stability bound of the explicit scheme: `Δt sup V̄' <= 2 Δn`.
pub fn check_step(dt: f64, dn: f64, relation: &dyn MeanRelation) -> Result<()> {
    let w = relation.max_wave_speed();
    if !(dt > 0.0) || dt * w > 2.0 * dn {
        return Err(Error::config(format!(
            "time step {dt} s is unstable for the mean relation: sup dV/ds = {w} veh/s, Δn = {dn}"
        )));
    }
    Ok(())
}

fn mean_step_with(state: &MeanState, dt: f64, m: &[SpeedMoments], boundary: &Boundary) -> MeanState {
    let n = state.n_vehicles();
    let shift = boundary.displacement(state.t, dt);
    let v0 = shift / dt;
    let speeds: Vec<f64> = m.iter().map(|q| q.mean).collect();
    let flux = apply_d(&speeds, v0);
    let mut z = state.z.clone();
    let ratio = dt / state.dn;
    for i in 0..n {
        z[i] += ratio * flux[i];
        z[n + i] += dt * speeds[i];
    }
    MeanState {
        t: state.t + dt,
        z,
        leader_x: state.leader_x + shift,
        dn: state.dn,
    }
}

/// One explicit Euler step of the mean dynamics.
pub fn mean_step(
    state: &MeanState,
    dt: f64,
    relation: &dyn MeanRelation,
    boundary: &Boundary,
) -> Result<MeanState> {
    check_step(dt, state.dn, relation)?;
    Ok(mean_step_with(state, dt, &moments_of(state, relation), boundary))
}

/// Outcome of the PSD safeguard applied after a covariance step.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PsdRepair {
    /// Negative eigenvalues clipped to zero.
    pub clipped: usize,
}

/// `A M` for the sparse drift Jacobian: spacing row i is
/// `(g_{i-1} M_{i-1,:} - g_i M_{i,:}) / Δn`, position row i is `g_i M_{i,:}`.
fn a_times(m: &DMatrix<f64>, g: &[f64], dn: f64) -> DMatrix<f64> {
    let n = g.len();
    let mut out = DMatrix::<f64>::zeros(m.nrows(), m.ncols());
    for j in 0..m.ncols() {
        let col = m.column(j);
        let mut dst = out.column_mut(j);
        for i in 0..n {
            let mut a = -g[i] * col[i];
            if i > 0 {
                a += g[i - 1] * col[i - 1];
            }
            dst[i] = a / dn;
            dst[n + i] = g[i] * col[i];
        }
    }
    out
}

/// `M Aᵀ`, the column counterpart of [`a_times`].
fn times_a_t(m: &DMatrix<f64>, g: &[f64], dn: f64) -> DMatrix<f64> {
    let n = g.len();
    let mut out = DMatrix::<f64>::zeros(m.nrows(), m.ncols());
    for i in 0..n {
        let mut c = m.column(i) * (-g[i] / dn);
        if i > 0 {
            c.axpy(g[i - 1] / dn, &m.column(i - 1), 1.0);
        }
        out.set_column(i, &c);
        out.set_column(n + i, &(m.column(i) * g[i]));
    }
    out
}

fn cov_step_with(
    cov: &CovMatrix,
    dt: f64,
    dn: f64,
    m: &[SpeedMoments],
    scaling: DiffusionScaling,
    scheme: CovScheme,
) -> (CovMatrix, PsdRepair) {
    let n = m.len();
    let p = &cov.p;
    let g: Vec<f64> = m.iter().map(|q| q.gradient).collect();
    let var: Vec<f64> = m.iter().map(|q| q.variance).collect();

    let mut next = match scheme {
        CovScheme::Euler => {
            let ap = a_times(p, &g, dn);
            let mut next = p.clone();
            next += (&ap + ap.transpose()) * dt;
            next
        }
        CovScheme::Factored => {
            // (I + ΔtA) P (I + ΔtA)ᵀ
            let mut w = a_times(p, &g, dn);
            w *= dt;
            w += p;
            let mut next = times_a_t(&w, &g, dn);
            next *= dt;
            next += &w;
            next
        }
    };

    // B Σ Bᵀ, tridiagonal in the spacing block.
    let kappa = match scaling {
        DiffusionScaling::Alg2 => dt * dt,
        DiffusionScaling::Standard => dt,
    };
    let inv = 1.0 / dn;
    for i in 0..n {
        let prev = if i > 0 { var[i - 1] } else { 0.0 };
        next[(i, i)] += kappa * inv * inv * (var[i] + prev);
        if i > 0 {
            let off = -kappa * inv * inv * var[i - 1];
            next[(i, i - 1)] += off;
            next[(i - 1, i)] += off;
        }
        // spacing/position cross terms: (1/Δn) D Σ
        let cross_diag = -kappa * inv * var[i];
        next[(i, n + i)] += cross_diag;
        next[(n + i, i)] += cross_diag;
        if i > 0 {
            let cross_sub = kappa * inv * var[i - 1];
            next[(i, n + i - 1)] += cross_sub;
            next[(n + i - 1, i)] += cross_sub;
        }
        next[(n + i, n + i)] += kappa * var[i];
    }

    symmetrize(&mut next);
    let repair = project_psd(&mut next);
    (
        CovMatrix {
            t: cov.t + dt,
            p: next,
        },
        repair,
    )
}

/// One explicit step of the covariance ODE around `state`.
pub fn cov_step(
    cov: &CovMatrix,
    state: &MeanState,
    dt: f64,
    relation: &dyn MeanRelation,
    scaling: DiffusionScaling,
    scheme: CovScheme,
) -> Result<(CovMatrix, PsdRepair)> {
    check_step(dt, state.dn, relation)?;
    if cov.p.nrows() != state.z.len() || cov.p.ncols() != state.z.len() {
        return Err(Error::domain("covariance dimension does not match the state"));
    }
    Ok(cov_step_with(cov, dt, state.dn, &moments_of(state, relation), scaling, scheme))
}

pub(crate) fn symmetrize(p: &mut DMatrix<f64>) {
    let n = p.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            let m = 0.5 * (p[(i, j)] + p[(j, i)]);
            p[(i, j)] = m;
            p[(j, i)] = m;
        }
    }
}

/// Clip negative eigenvalues when any diagonal entry has gone negative.
pub(crate) fn project_psd(p: &mut DMatrix<f64>) -> PsdRepair {
    if (0..p.nrows()).all(|i| p[(i, i)] >= 0.0) {
        return PsdRepair::default();
    }
    let eig = SymmetricEigen::new(p.clone());
    let clipped = eig.eigenvalues.iter().filter(|&&l| l < 0.0).count();
    let vals = eig.eigenvalues.map(|l| l.max(0.0));
    let q = &eig.eigenvectors;
    *p = q * DMatrix::from_diagonal(&vals) * q.transpose();
    symmetrize(p);
    PsdRepair { clipped }
}

/// Mean + covariance propagation shared by open-loop integration and the
/// filter's prediction step.
#[derive(Clone, Copy)]
pub struct MomentModel<'a> {
    pub relation: &'a dyn MeanRelation,
    pub boundary: &'a Boundary,
    pub scaling: DiffusionScaling,
    pub scheme: CovScheme,
}

impl<'a> MomentModel<'a> {
    pub fn new(relation: &'a dyn MeanRelation, boundary: &'a Boundary, scaling: DiffusionScaling) -> Self {
        MomentModel {
            relation,
            boundary,
            scaling,
            scheme: CovScheme::default(),
        }
    }

    pub fn with_scheme(mut self, scheme: CovScheme) -> Self {
        self.scheme = scheme;
        self
    }

    pub fn predict(&self, state: &MeanState, cov: &CovMatrix, dt: f64) -> Result<(MeanState, CovMatrix, PsdRepair)> {
        check_step(dt, state.dn, self.relation)?;
        let m = moments_of(state, self.relation);
        let next = mean_step_with(state, dt, &m, self.boundary);
        let (p, repair) = cov_step_with(cov, dt, state.dn, &m, self.scaling, self.scheme);
        Ok((next, p, repair))
    }
}

/// Pin the clock to `k Δt` so boundary switches see the same instants as
/// the simulation grid.
pub(crate) fn set_time(state: &mut MeanState, cov: &mut CovMatrix, t: f64) {
    state.t = t;
    cov.t = t;
}

/// Initial covariance choice.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum InitialCov {
    /// Deterministic initial spacings.
    #[default]
    Zero,
    /// Independent spacing uncertainty with the given variance, m².
    SpacingVariance { variance: f64 },
}

impl InitialCov {
    pub fn build(&self, n: usize) -> CovMatrix {
        let mut c = CovMatrix::zeros(0.0, n);
        if let InitialCov::SpacingVariance { variance } = *self {
            for i in 0..n {
                c.p[(i, i)] = variance;
            }
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MomentConfig {
    pub scaling: DiffusionScaling,
    pub scheme: CovScheme,
    pub initial_cov: InitialCov,
    /// Times at which the full covariance is retained (nearest step).
    pub dump_times: Vec<f64>,
}

/// One emitted step of a mean/covariance trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateStep {
    pub t: f64,
    pub z: Vec<f64>,
    /// Diagonal of the covariance.
    pub var: Vec<f64>,
}

/// Time series of state estimates with the diagonal of the covariance at
/// every step and full covariances at requested times.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateSeries {
    pub dt: f64,
    pub n_vehicles: usize,
    pub steps: Vec<EstimateStep>,
    pub cov_dumps: Vec<CovMatrix>,
    pub psd_clips: usize,
}

impl EstimateSeries {
    pub(crate) fn new(dt: f64, n: usize) -> Self {
        EstimateSeries {
            dt,
            n_vehicles: n,
            steps: Vec::new(),
            cov_dumps: Vec::new(),
            psd_clips: 0,
        }
    }

    pub(crate) fn record(&mut self, state: &MeanState, cov: &CovMatrix, dump_times: &[f64]) {
        let prev_t = self.steps.last().map(|s| s.t);
        self.steps.push(EstimateStep {
            t: state.t,
            z: state.z.as_slice().to_vec(),
            var: cov.p.diagonal().as_slice().to_vec(),
        });
        // dump at the step nearest each requested time
        let half = 0.5 * self.dt;
        for &td in dump_times {
            let reached = state.t + half >= td;
            let before = prev_t.is_none_or(|p| p + half < td);
            if reached && before {
                self.cov_dumps.push(cov.clone());
            }
        }
    }

    /// Spacing of vehicle `veh` (1-based) at step `k`.
    pub fn spacing(&self, k: usize, veh: usize) -> f64 {
        self.steps[k].z[veh - 1]
    }

    pub fn position(&self, k: usize, veh: usize) -> f64 {
        self.steps[k].z[self.n_vehicles + veh - 1]
    }
}

/// Open-loop integration of the mean and covariance with `Δt = filter_dt`,
/// calling `visit` on every emitted step (including `t = 0`) together with
/// the PSD repair applied on that step.
pub fn integrate_moments_with<F>(
    scenario: &Scenario,
    relation: &dyn MeanRelation,
    config: &MomentConfig,
    mut visit: F,
) -> Result<f64>
where
    F: FnMut(&MeanState, &CovMatrix, PsdRepair),
{
    scenario.validate()?;
    let dt = filter_dt(relation.sample(), scenario.dn)?;
    check_step(dt, scenario.dn, relation)?;
    let model = MomentModel::new(relation, &scenario.boundary, config.scaling).with_scheme(config.scheme);
    let mut state = MeanState::initial(scenario);
    let mut cov = config.initial_cov.build(scenario.n_vehicles());
    visit(&state, &cov, PsdRepair::default());
    for k in 1..=update_count(scenario.horizon, dt) {
        let (s, c, repair) = model.predict(&state, &cov, dt)?;
        state = s;
        cov = c;
        set_time(&mut state, &mut cov, k as f64 * dt);
        visit(&state, &cov, repair);
    }
    Ok(dt)
}

/// Number of predict/update cycles after `t = 0`, so emitted times are
/// `k Δt` for `k = 0..=floor(T/Δt)` and never pass the horizon.
pub fn update_count(horizon: f64, dt: f64) -> usize {
    (horizon / dt + 1e-9).floor() as usize
}

/// [`integrate_moments_with`] collected into an [`EstimateSeries`].
pub fn integrate_moments(
    scenario: &Scenario,
    relation: &dyn MeanRelation,
    config: &MomentConfig,
) -> Result<EstimateSeries> {
    let dt = filter_dt(relation.sample(), scenario.dn)?;
    let mut out = EstimateSeries::new(dt, scenario.n_vehicles());
    integrate_moments_with(scenario, relation, config, |s, c, r| {
        out.record(s, c, &config.dump_times);
        out.psd_clips += r.clipped;
    })?;
    Ok(out)
}

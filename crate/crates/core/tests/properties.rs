use lagtraffic::assimilation::{measure_equipped, position_index, spacing_index, ProbeSet};
use lagtraffic::macroscopic::{rmse, Scope};
use lagtraffic::moments::{integrate_moments, MomentConfig};
use lagtraffic::params::sample_params;
use lagtraffic::rng;
use lagtraffic::sim::{simulate_sample_path, SpacingSeries};
use lagtraffic::units::kmh_to_mps;
use lagtraffic::{Boundary, ParamDistribution, Scenario, SignalSpec};
use proptest::prelude::*;

fn law() -> ParamDistribution {
    ParamDistribution::signal_reference(2.0, 2.0).unwrap()
}

fn signal(n: usize, horizon: f64, spacing: f64) -> Scenario {
    let spec = SignalSpec {
        cycles: 2,
        ..SignalSpec::arterial()
    };
    Scenario::uniform(n, horizon, spacing, Boundary::Signal(spec))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn sample_paths_keep_spacing_identity_and_speed_bounds(
        n in 1usize..12,
        spacing in 10.0f64..60.0,
        seed in any::<u64>(),
    ) {
        let sc = signal(n, 200.0, spacing);
        let traj = simulate_sample_path(&sc, &law(), &mut rng::stream(seed)).unwrap();
        let vmax = kmh_to_mps(80.0);
        for veh in 1..=n {
            for k in 0..traj.len() {
                let gap = traj.positions(veh - 1)[k] - traj.positions(veh)[k];
                prop_assert!((gap - traj.spacings(veh)[k]).abs() < 1e-9);
                prop_assert!(traj.spacings(veh)[k] > 0.0);
                let v = traj.speeds(veh)[k];
                prop_assert!((0.0..=vmax).contains(&v));
            }
        }
    }

    #[test]
    fn moment_covariance_stays_symmetric_psd(
        n in 2usize..6,
        spacing in 15.0f64..50.0,
        seed in any::<u64>(),
    ) {
        let sample = law().draw_sample(300, &mut rng::stream(seed)).unwrap();
        let sc = signal(n, 150.0, spacing);
        let cfg = MomentConfig {
            dump_times: vec![30.0, 90.0, 140.0],
            ..Default::default()
        };
        let out = integrate_moments(&sc, &sample, &cfg).unwrap();
        prop_assert_eq!(out.cov_dumps.len(), 3);
        for c in &out.cov_dumps {
            prop_assert!(c.asymmetry() <= 1e-12);
            prop_assert!(c.is_psd(1e-8));
        }
    }

    #[test]
    fn rmse_ignores_vehicle_order(
        rows in prop::collection::vec(prop::collection::vec((1.0f64..80.0, 1.0f64..80.0), 7), 2..8),
        rot in 0usize..8,
    ) {
        let split = |rows: &[Vec<(f64, f64)>]| {
            let est = SpacingSeries { dt: 1.0, values: rows.iter().map(|r| r.iter().map(|p| p.0).collect()).collect() };
            let tru = SpacingSeries { dt: 1.0, values: rows.iter().map(|r| r.iter().map(|p| p.1).collect()).collect() };
            (est, tru)
        };
        let (e, t) = split(&rows);
        let base = rmse(&e, &t, Scope::All, None).unwrap();
        let mut permuted = rows.clone();
        permuted.rotate_left(rot % rows.len());
        permuted.reverse();
        let (e2, t2) = split(&permuted);
        let other = rmse(&e2, &t2, Scope::All, None).unwrap();
        prop_assert!((base - other).abs() <= 1e-12 * base.max(1.0));
    }

    #[test]
    fn equipped_rows_are_unit_selections(
        (n, picks) in (2usize..30).prop_flat_map(|n| (Just(n), prop::collection::btree_set(1..=n, 1..=n))),
        seed in any::<u64>(),
    ) {
        let probes = ProbeSet::new(n, picks.into_iter().collect()).unwrap();
        let mut r = rng::stream(seed ^ 1);
        let params: Vec<_> = (0..n).map(|_| sample_params(&law(), &mut r)).collect();
        let sc = signal(n, 20.0, 30.0);
        let traj = lagtraffic::sim::simulate_on_grid(&sc, &params, law().cfl_dt(1.0)).unwrap();
        let snap = traj.snapshot(10.0);
        let batch = measure_equipped(&snap, &probes);
        let h = batch.h(2 * n);
        prop_assert_eq!(h.nrows(), batch.len());
        let mut seen = std::collections::BTreeSet::new();
        for i in 0..h.nrows() {
            let row = h.row(i);
            prop_assert_eq!(row.iter().filter(|&&x| x == 1.0).count(), 1);
            prop_assert_eq!(row.iter().filter(|&&x| x != 0.0).count(), 1);
            prop_assert!(seen.insert(batch.rows[i]));
        }
        for &veh in probes.indices() {
            prop_assert!(seen.contains(&spacing_index(veh)));
            prop_assert!(seen.contains(&position_index(n, veh)));
        }
        prop_assert!(batch.omega.iter().all(|&w| w == 0.0));
    }
}

#[test]
fn no_probes_no_rows() {
    let sc = signal(4, 20.0, 30.0);
    let traj = simulate_sample_path(&sc, &law(), &mut rng::stream(1)).unwrap();
    let batch = measure_equipped(&traj.snapshot(5.0), &ProbeSet::none(4));
    assert!(batch.is_empty());
}

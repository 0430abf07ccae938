use std::f64::consts::PI;

use proptest::prelude::*;
use qbm_core::bath::{tabulate_kernels, BathMode, BathSpec, Beta, SpectralDensity};
use qbm_core::coefficients::{trajectory, trajectory_with_kernels, CoefficientTrajectory, Mode, TimeGrid};
use qbm_core::dynamics::{evolve, evolve_with_substeps, GaussianMomentState};
use qbm_core::elementary::{SolverOptions, SystemParams};
use qbm_core::oracle::{oracle_series, FullPhaseSpaceModel};
use qbm_core::RunConfig;

const CONFIG: &str = r#"{
    "system": {"mass": 1.0, "omega": 1.0},
    "bath": {"spectral": {"type": "discrete", "modes": [{"coupling": 0.3, "frequency": 1.5}]}, "beta": 2.0},
    "grid": {"ds": 0.005, "t_max": 4.0, "dt_out": 0.05, "coeff_step": 0.025},
    "initial_state": {"mean_q": 0.5, "mean_p": 0.0, "sigma_qq": 0.5, "sigma_pp": 0.5, "sigma_qp": 0.0}
}"#;

#[test]
fn csv_round_trip_drives_identical_evolution() {
    let cfg = RunConfig::from_json(CONFIG).unwrap();
    let sys = cfg.system_params();
    let bath = cfg.bath_spec().unwrap();
    let grid = cfg.time_grid().unwrap();
    let traj = trajectory(&sys, &bath, cfg.mode(), &grid, cfg.grid.ds, &cfg.solver_options()).unwrap();
    let mut buf = Vec::new();
    traj.write_csv(&mut buf).unwrap();
    let back = CoefficientTrajectory::read_csv(buf.as_slice(), sys.mass, bath.hbar).unwrap();
    assert_eq!(back.rows, traj.rows);

    let gamma0 = tabulate_kernels(&bath, cfg.grid.ds, cfg.grid.ds).unwrap().gamma0();
    let init = cfg.initial_state().unwrap();
    let a = evolve(&init, &traj, &sys, gamma0, cfg.grid.dt_out).unwrap();
    let b = evolve(&init, &back, &sys, gamma0, cfg.grid.dt_out).unwrap();
    assert_eq!(a, b);
}

#[test]
fn coarse_rows_track_the_reference_at_second_order() {
    let cfg = RunConfig::from_json(CONFIG).unwrap();
    let sys = cfg.system_params();
    let bath = cfg.bath_spec().unwrap();
    let model = FullPhaseSpaceModel::new(&sys, &bath).unwrap();
    let init = cfg.initial_state().unwrap();
    let reference = oracle_series(&model, &init, 0.05, 4.0).unwrap();
    let k = tabulate_kernels(&bath, 0.005, 4.0 + 0.005).unwrap();
    let worst = |step: f64| {
        let grid = TimeGrid::new(step, 4.0).unwrap();
        let tr = trajectory_with_kernels(&sys, &bath, Some(&k), Mode::Exact, &grid, &SolverOptions::default()).unwrap();
        let s = evolve_with_substeps(&init, &tr, &sys, k.gamma0(), 0.05, 1).unwrap();
        s.states
            .iter()
            .zip(&reference.states)
            .map(|(a, b)| (a.sigma_pp - b.sigma_pp).abs())
            .fold(0.0f64, f64::max)
    };
    let (e1, e2) = (worst(0.05), worst(0.025));
    assert!(e1 < 1e-3 && e2 < e1 / 2.5, "{e1} {e2}");
}

#[test]
fn fokker_planck_mode_relaxes_to_thermal_state() {
    let (gamma0, kt) = (0.1, 5.0);
    let bath = BathSpec::new(
        SpectralDensity::OhmicExpCutoff { gamma0, cutoff: 20.0, mass: 1.0 },
        Beta::Finite(1.0 / kt),
    );
    let sys = SystemParams::renormalized(1.0, 1.5);
    let grid = TimeGrid::new(0.05, 300.0).unwrap();
    let traj = trajectory_with_kernels(&sys, &bath, None, Mode::OhmicFp, &grid, &SolverOptions::default()).unwrap();
    let init = GaussianMomentState::coherent(2.0, -1.0, 1.0, 1.5, 1.0);
    let s = evolve(&init, &traj, &sys, 0.0, 0.05).unwrap();
    let last = s.states.last().unwrap();
    assert!((last.sigma_pp - kt).abs() < 1e-9 * kt, "{last:?}");
    assert!((last.sigma_qq - kt / 2.25).abs() < 1e-9, "{last:?}");
    assert!(last.sigma_qp.abs() < 1e-9 && last.mean_q.abs() < 1e-9);
}

#[test]
fn decoupled_exact_rows_rotate_the_state() {
    let bath = BathSpec::discrete(vec![], Beta::Infinite);
    let sys = SystemParams::new(1.0, 2.0);
    let ds = PI / 2000.0;
    let grid = TimeGrid::new(ds, PI + 0.5 * ds).unwrap();
    let traj = trajectory(&sys, &bath, Mode::Exact, &grid, ds, &SolverOptions::default()).unwrap();
    let init = GaussianMomentState::new(1.0, 0.0, 0.3, 0.9, 0.2);
    let s = evolve(&init, &traj, &sys, 0.0, 500.0 * ds).unwrap();
    // period π: quarter, half, three quarters, full
    let quarter = s.states[1];
    assert!((quarter.mean_q).abs() < 1e-9 && (quarter.mean_p + 2.0).abs() < 1e-9);
    let full = s.states[4];
    for (a, b) in full.to_array().iter().zip(init.to_array()) {
        assert!((a - b).abs() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn temperature_leaves_dissipation_untouched(beta in 0.2f64..5.0, c in 0.05f64..0.4) {
        let sys = SystemParams::new(1.0, 1.0);
        let grid = TimeGrid::new(0.1, 2.0).unwrap();
        let run = |b: Beta| {
            let bath = BathSpec::discrete(vec![BathMode::new(c, 1.0, 1.3)], b);
            trajectory(&sys, &bath, Mode::Exact, &grid, 0.01, &SolverOptions::default()).unwrap()
        };
        let (hot, cold) = (run(Beta::Finite(beta)), run(Beta::Infinite));
        for (h, k) in hot.rows.iter().zip(&cold.rows) {
            let (h, k) = (h.coefficients.unwrap(), k.coefficients.unwrap());
            prop_assert_eq!(h.a.to_bits(), k.a.to_bits());
            prop_assert_eq!(h.b.to_bits(), k.b.to_bits());
            prop_assert!(h.d >= k.d - 1e-12);
        }
    }
}

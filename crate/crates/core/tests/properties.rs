use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use quakectl::control::{
    left_pseudoinverse, stabilizing_pressure, tracking_pressure, validate_gains, GainSet, ReferenceParams, StuckSign,
};
use quakectl::model::{
    elastic_force, friction_branch, mu_coefficient, plant_rhs, static_capacity, FaultModel, Mode, PlantState,
};
use quakectl::passivity::{passivity_probe, sector_margin, storage_v, storage_vp, StateBox};
use quakectl::scenario::{build_scenario, Scenario, ScenarioConfig};
use quakectl::sim::{run, ControlMode, RunSetup, SimConfig};

fn paper_gains() -> GainSet {
    GainSet { lambda_delta: 40.0, lambda_v: 346.4, lambda_xi: 5e3, mu_min: 0.25, l_delta: 0.04, l_v: 0.0, ..GainSet::default() }
}

fn grid(nx: usize, nz: usize, wells: usize) -> Scenario {
    build_scenario(&ScenarioConfig::small(nx, nz, wells), None).unwrap()
}

fn vector(n: usize, lo: f64, hi: f64) -> impl Strategy<Value = DVector<f64>> {
    prop::collection::vec(lo..hi, n).prop_map(DVector::from_vec)
}

fn symmetric_positive(m: &DMatrix<f64>) -> bool {
    (m - m.transpose()).amax() <= 1e-12 * m.amax() && m.clone().symmetric_eigenvalues().iter().all(|&e| e > 0.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sector_property_holds_in_state_box(x1 in vector(16, 0.0, 1.0), x3 in vector(16, -1.0, 1.0)) {
        let sc = grid(4, 4, 4);
        let f = sc.fault.friction();
        prop_assume!(x3.iter().all(|v| *v != 0.0));
        prop_assert!(sector_margin(&x1, &x3, f.l_delta, f.l_v, &sc.fault) >= 0.0);
    }

    #[test]
    fn mu_stays_above_floor(slip in 0.0..1e3f64) {
        let f = ScenarioConfig::default().friction;
        prop_assert!(mu_coefficient(slip, &f).unwrap() >= f.mu_min);
    }

    #[test]
    fn stuck_elements_carry_the_elastic_force(
        x1 in vector(4, 0.0, 0.5),
        x2 in vector(4, -1e-2, 1e-2),
        p in vector(1, -0.5, 0.5),
    ) {
        let sc = grid(2, 2, 1);
        let x3 = DVector::zeros(4);
        let (force, modes) = friction_branch(&x1, &x2, &x3, &p, &sc.fault).unwrap();
        let elastic = elastic_force(&x2, &x3, &sc.fault).unwrap();
        let capacity = static_capacity(&x1, &p, &sc.fault).unwrap();
        for i in 0..4 {
            if modes[i] == Mode::Stick {
                prop_assert_eq!(force[i], elastic[i]);
                prop_assert!((elastic[i] + sc.fault.f_s_star()[i]).abs() < capacity[i]);
            }
        }
    }

    #[test]
    fn built_faults_satisfy_model_invariants(
        nx in 1usize..5,
        nz in 1usize..5,
        spring in 1e-5..1e-2f64,
        reg in 1.0..1e3f64,
        alpha in 0.0..2.0f64,
    ) {
        let mut cfg = ScenarioConfig::small(nx, nz, 1);
        cfg.spring_k = spring;
        cfg.stiffness_regularization = reg;
        cfg.rayleigh_alpha = alpha;
        let sc = build_scenario(&cfg, None).unwrap();
        prop_assert!(symmetric_positive(sc.fault.mass()));
        prop_assert!(symmetric_positive(sc.fault.stiffness()));
        let h = sc.fault.viscosity();
        prop_assert!((h - h.transpose()).amax() <= 1e-12 * h.amax().max(1.0));
        prop_assert!(h.clone().symmetric_eigenvalues().iter().all(|&e| e >= -1e-12 * h.amax()));
    }

    #[test]
    fn shifted_origin_is_an_equilibrium(nx in 1usize..5, nz in 1usize..5) {
        let sc = grid(nx, nz, 1);
        let n = sc.fault.n();
        let d = plant_rhs(&PlantState::origin(n), &DVector::zeros(sc.fault.q()), 0.0, &sc.fault).unwrap();
        prop_assert_eq!(d.x1.amax(), 0.0);
        prop_assert_eq!(d.x2.amax(), 0.0);
        prop_assert!(d.x3.amax() <= 1e-12 * sc.fault.f_s_star().amax() / sc.fault.mass().amax());
    }

    #[test]
    fn tracking_without_integral_is_stabilizing(x1 in vector(16, 0.0, 1.0), x3 in vector(16, -1.0, 1.0)) {
        let sc = grid(4, 4, 4);
        for rule in [StuckSign::Zero, StuckSign::Reference] {
            let g = GainSet { lambda_xi: 0.0, stuck_sign: rule, ..paper_gains() };
            let zeros_n = DVector::zeros(16);
            let xi = DVector::from_element(4, 1.0);
            let a = tracking_pressure(&x1, &x3, &xi, &zeros_n, &g, sc.fault.c_p()).unwrap();
            let b = stabilizing_pressure(&x1, &x3, &g, sc.fault.c_p()).unwrap();
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn integral_matrix_inverts_output_matrix(entries in prop::collection::vec(-1.0..1.0f64, 18)) {
        let c_p = DMatrix::from_vec(6, 3, entries) + DMatrix::from_fn(6, 3, |i, j| if i == j { 4.0 } else { 0.0 });
        let c_t = left_pseudoinverse(&c_p).unwrap();
        prop_assert!((c_t * &c_p - DMatrix::<f64>::identity(3, 3)).amax() <= 1e-12);
    }

    #[test]
    fn reference_endpoints_are_exact(d_max in 1e-3..10.0f64, days in 1.0..1000.0f64) {
        let p = ReferenceParams { d_max, t_op: days * 86_400.0 };
        let (r0, e) = (p.eval(0.0), p.eval(p.t_op));
        prop_assert_eq!((r0.r, r0.r_dot), (0.0, 0.0));
        prop_assert_eq!((e.r, e.r_dot), (d_max, 0.0));
    }

    #[test]
    fn storage_functions_are_nonnegative(
        x1 in vector(16, 0.0, 1.0),
        x2 in vector(16, -1.0, 1.0),
        x3 in vector(16, -1.0, 1.0),
        pt in vector(4, -10.0, 10.0),
    ) {
        let sc = grid(4, 4, 4);
        prop_assert!(storage_v(&x1, &x2, &x3, &sc.fault) >= 0.0);
        prop_assert!(storage_vp(&pt, &sc.c_h).unwrap() >= 0.0);
    }
}

fn assert_run_invariants(sc: &Scenario, mode: ControlMode, v0: f64, t_end: f64, t_op: f64) {
    let gains = paper_gains().with_output_matrix(sc.fault.c_p()).unwrap();
    let cfg = SimConfig { mode, t_end, initial_slip_rate: Some(v0), max_steps: 200_000, ..SimConfig::default() };
    let reference = ReferenceParams { d_max: 0.5, t_op };
    let tr = run(&RunSetup { scenario: sc, gains: &gains, reference: &reference, observer: None, config: &cfg })
        .map_err(|f| f.error)
        .unwrap();
    for w in tr.samples.windows(2) {
        for (b, a) in w[1].x1.iter().zip(w[0].x1.iter()) {
            assert!(b >= a, "slip decreased from {a} to {b} at t = {}", w[1].t);
        }
    }
    assert!(tr.max_stuck_rate <= cfg.stick_velocity_floor, "stuck element moving at {}", tr.max_stuck_rate);
    // Only the plant mode switches at an event; the stabilizing law sees the
    // snapped slip-rate, and the tracking law's sign(x3) may flip.
    if mode != ControlMode::Track {
        assert!(tr.max_pressure_jump <= 1e-8, "pressure jumped by {} across an event", tr.max_pressure_jump);
    }
    assert!(tr.monitor.violations == 0, "{:?}", tr.monitor);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn engine_runs_keep_slip_monotone_and_modes_consistent(v0 in 1e-6..1e-2f64, wells in 1usize..3) {
        let sc = grid(2, 2, wells);
        assert_run_invariants(&sc, ControlMode::Stabilize, v0, 50.0, 100.0);
    }
}

#[test]
fn tracked_and_open_loop_runs_keep_invariants() {
    let mut cfg = ScenarioConfig::small(1, 1, 1);
    cfg.element_mass = 10.0;
    let sc = build_scenario(&cfg, None).unwrap();
    assert_run_invariants(&sc, ControlMode::Track, 0.0, 100.0, 100.0);
    assert_run_invariants(&grid(3, 3, 1), ControlMode::OpenLoop, 1e-12, 60.0, 100.0);
    assert_run_invariants(&sc, ControlMode::TrackWithActuator, 0.0, 20.0, 100.0);
}

#[test]
fn passivity_map_nonnegative_under_validated_gains() {
    let g = paper_gains();
    assert!(validate_gains(&g).passed);
    // Fully actuated: one well per element.
    let sc = build_scenario(
        &ScenarioConfig { well_kernel_radius: 1e-3, ..ScenarioConfig::small(2, 2, 4) },
        None,
    )
    .unwrap();
    let worst = passivity_probe(&sc.fault, &g, &StateBox { x1_max: 1.0, x3_max: 1.0 }, 20_000, 3).unwrap();
    assert!(worst >= 0.0, "{worst}");
}

#[test]
fn model_rejects_non_definite_mass() {
    let sc = grid(2, 2, 1);
    let mut parts = sc.fault.to_parts();
    parts.mass[(0, 0)] = -1.0;
    assert!(FaultModel::new(parts).is_err());
}

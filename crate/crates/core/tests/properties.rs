use clra::lowrank::{build_blocks, numeric_rank, u_matrix, Property};
use clra::metrics::estimation_error;
use clra::scene::{
    add_noise, generate_scene, pseudo_toa_from_tdoa, tdoa_from_scene, toa_from_scene, SceneSpec,
};
use clra::solver::{init_offsets, select_case, Assembly, Layout};
use clra::{Method, MethodSetup, TimingOffsets};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn size() -> impl Strategy<Value = (usize, usize)> {
    (5usize..=14, 5usize..=14)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn toa_matches_model((m, n) in size(), seed in any::<u64>()) {
        let sc = generate_scene(&SceneSpec::simulation(m, n), seed).unwrap();
        let t = toa_from_scene(&sc).unwrap();
        prop_assert_eq!(sc.eta[0], 0.0);
        for i in 0..m {
            for j in 0..n {
                let model = sc.distance(i, j) / sc.c + sc.eta[j] - sc.delta[i];
                prop_assert!((t.values[(i, j)] - model).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn lrp_holds_at_truth((m, n) in size(), seed in any::<u64>()) {
        let sc = generate_scene(&SceneSpec::simulation(m, n), seed).unwrap();
        let blocks = build_blocks(&toa_from_scene(&sc).unwrap(), &sc.offsets()).unwrap();
        prop_assert_eq!(numeric_rank(&blocks.parent(Property::Lrp), 1e-8).unwrap().rank, 3);
    }

    #[test]
    fn u_vanishes_without_offsets((m, n) in size(), seed in any::<u64>()) {
        let sc = generate_scene(&SceneSpec::simulation(m, n), seed).unwrap();
        let t = toa_from_scene(&sc).unwrap().values;
        let u = u_matrix(&t, &vec![0.0; m], &vec![0.0; n]);
        prop_assert_eq!(u, DMatrix::zeros(m - 1, n - 1));
    }

    #[test]
    fn pseudo_toa_has_zero_reference_row((m, n) in size(), seed in any::<u64>()) {
        let sc = generate_scene(&SceneSpec::simulation(m, n), seed).unwrap();
        let (meas, gauge) = pseudo_toa_from_tdoa(&tdoa_from_scene(&sc).unwrap(), sc.c).unwrap();
        prop_assert!(meas.values.row(0).iter().all(|v| *v == 0.0));
        let truth = gauge.truth(&sc);
        prop_assert_eq!(truth.eta[0], 0.0);
        let blocks = build_blocks(&meas, &truth).unwrap();
        prop_assert_eq!(numeric_rank(&blocks.parent(Property::Lrp), 1e-8).unwrap().rank, 3);
    }

    #[test]
    fn noise_is_seed_deterministic(seed in any::<u64>(), sigma in 1e-9f64..1e-2) {
        let sc = generate_scene(&SceneSpec::simulation(6, 6), 1).unwrap();
        let meas = toa_from_scene(&sc).unwrap();
        let a = add_noise(&meas, sigma, seed).unwrap();
        prop_assert_eq!(&a, &add_noise(&meas, sigma, seed).unwrap());
        prop_assert_ne!(&a, &meas);
    }

    #[test]
    fn error_is_a_gauge_fixed_distance((m, n) in size(), s1 in any::<u64>(), s2 in any::<u64>()) {
        let a = init_offsets(m, n, [-1.0, 1.0], s1).unwrap();
        let b = init_offsets(m, n, [-1.0, 1.0], s2).unwrap();
        prop_assert_eq!(a.eta[0], 0.0);
        prop_assert_eq!(estimation_error(&a, &a).unwrap(), 0.0);
        let ab = estimation_error(&a, &b).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(ab, estimation_error(&b, &a).unwrap());
        prop_assert!(ab <= 4.0);
    }

    #[test]
    fn layout_spans_tile_vectors((m, n) in size()) {
        let setup = MethodSetup::resolve(Method::Clra, m, n, None, None).unwrap();
        for assembly in [Assembly::Active, Assembly::AllBlocks] {
            let layout = Layout::new(m, n, &setup.weights, assembly).unwrap();
            let mut next = m + n - 1;
            for span in &layout.coefficients {
                prop_assert_eq!(span.offset, next);
                next += span.len();
            }
            prop_assert_eq!(next, layout.num_params);
            let mut next = (m - 1) * (n - 1);
            for span in &layout.constraints {
                prop_assert_eq!(span.offset, next);
                next += span.len();
            }
            prop_assert_eq!(next, layout.num_residuals);
        }
        let all = Layout::new(m, n, &setup.weights, Assembly::AllBlocks).unwrap();
        prop_assert_eq!(all.num_params, Layout::full_param_count(m, n));
        prop_assert_eq!(all.num_residuals, Layout::full_residual_count(m, n));
        prop_assert!(select_case(m, n).is_ok());
    }

    #[test]
    fn gauge_shift_is_absorbed(delta in prop::collection::vec(-1.0f64..1.0, 6), eta in prop::collection::vec(-1.0f64..1.0, 7)) {
        let g = TimingOffsets::gauge_fixed(delta.clone(), eta.clone()).unwrap();
        prop_assert_eq!(g.eta[0], 0.0);
        for (i, d) in delta.iter().enumerate() {
            prop_assert!(((d - eta[0]) - g.delta[i]).abs() < 1e-15);
        }
    }
}

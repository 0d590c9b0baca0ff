use nalgebra::DMatrix;
use proptest::prelude::*;

use plom_core::data_model::{validate_normalization, TrainingSet};
use plom_core::gaussian_reference::{mehler_kernel, mehler_series};
use plom_core::gkde::{bandwidths, GkdeModel};
use plom_core::info_metrics::{kl_divergence, normalized_mi, solve_chi, SampleSet};
use plom_core::plom::{projector, ConstraintMode};
use plom_core::rng::{derive_seed, Stream};
use plom_core::selection::{concentration, span_angle, subspace_angle};

fn gaussian(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
    let mut s = Stream::new(seed, 0, 0);
    DMatrix::from_fn(rows, cols, |_, _| s.normal())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn angle_is_symmetric(seed in 0u64..1000, m in 1usize..5) {
        let a = gaussian(30, m, seed);
        let b = gaussian(30, m, seed + 1);
        let ab = subspace_angle(&a, &b).unwrap();
        let ba = subspace_angle(&b, &a).unwrap();
        prop_assert!((ab - ba).abs() < 1e-10);
        prop_assert!((0.0..=90.0).contains(&ab));
    }

    #[test]
    fn angle_ignores_column_scale_and_order(seed in 0u64..1000, scale in 0.01f64..100.0) {
        let a = gaussian(25, 3, seed);
        let b = gaussian(25, 3, seed + 7);
        let base = subspace_angle(&a, &b).unwrap();
        let mut c = b.clone();
        c.column_mut(1).scale_mut(scale);
        c.swap_columns(0, 2);
        prop_assert!((subspace_angle(&a, &c).unwrap() - base).abs() < 1e-8);
    }

    #[test]
    fn span_angle_of_a_mixed_basis_is_zero(seed in 0u64..1000) {
        let a = gaussian(20, 3, seed);
        let mix = gaussian(3, 3, seed + 3) + DMatrix::identity(3, 3) * 3.0;
        prop_assert!(span_angle(&a, &(&a * mix)).unwrap() < 1e-5);
    }

    #[test]
    fn projector_is_a_left_inverse(seed in 0u64..1000, m in 1usize..6) {
        let g = gaussian(20, m, seed);
        let a = projector(&g).unwrap();
        prop_assert!((g.transpose() * &a - DMatrix::identity(m, m)).amax() < 1e-10);
        let p = &a * g.transpose();
        prop_assert!((&p * &p - &p).amax() < 1e-8);
    }

    #[test]
    fn normalized_training_sets_are_normalized(seed in 0u64..1000, nu in 1usize..5) {
        let x = gaussian(nu, 40, seed) * 3.0;
        let ts = TrainingSet::normalized(x).unwrap();
        prop_assert!(validate_normalization(&ts).pass);
    }

    #[test]
    fn bandwidth_ratio_is_consistent(nu in 1usize..30, n_d in 2usize..5000) {
        let bw = bandwidths(nu, n_d);
        prop_assert!(bw.s > 0.0 && bw.s_hat > 0.0 && bw.s_hat < 1.0);
        prop_assert!((bw.s_hat - bw.s * bw.ratio).abs() < 1e-12);
    }

    #[test]
    fn kl_of_a_set_with_itself_is_zero(seed in 0u64..1000, nu in 1usize..4) {
        let p = SampleSet::new(gaussian(nu, 60, seed)).unwrap();
        prop_assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn concentration_is_zero_only_at_the_training_set(seed in 0u64..1000) {
        let eta = gaussian(3, 15, seed);
        prop_assert_eq!(concentration(&[eta.clone(), eta.clone()], &eta).unwrap(), 0.0);
        let other = gaussian(3, 15, seed + 1);
        prop_assert!(concentration(&[other], &eta).unwrap() > 0.0);
    }

    #[test]
    fn chi_gives_a_normalized_mi_fixed_point(i_h in 2.0f64..6.0, gap in 0.5f64..3.0) {
        let chi = solve_chi(i_h, i_h + gap, 400, 400_000).unwrap();
        if chi.valid {
            let a = normalized_mi(i_h, 400, chi.chi).unwrap();
            let b = normalized_mi(i_h + gap, 400_000, chi.chi).unwrap();
            prop_assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn drift_is_half_the_log_density_gradient(seed in 0u64..1000) {
        let model = GkdeModel::new(TrainingSet::normalized(gaussian(2, 12, seed)).unwrap());
        let u = gaussian(2, 5, seed + 9);
        let g = model.grad_log_pdf_matrix(&u);
        for j in 0..5 {
            let y: Vec<f64> = u.column(j).iter().copied().collect();
            let b = model.drift(&y);
            for k in 0..2 {
                prop_assert!((g[(k, j)] - 2.0 * b[k]).abs() <= 1e-12 * g[(k, j)].abs().max(1.0));
            }
        }
    }

    #[test]
    fn mehler_series_converges_to_the_kernel(y in -2.0f64..2.0, x in -2.0f64..2.0, t in 0.5f64..3.0) {
        // the tail decays like e^{-At/2}, so short times need more terms
        let order = (60.0 / t) as usize + 10;
        let exact = mehler_kernel(y, x, t);
        prop_assert!((mehler_series(y, x, t, order) - exact).abs() < 1e-8 * exact.abs().max(1.0));
    }

    #[test]
    fn seeds_depend_on_master_and_label(master in any::<u64>()) {
        prop_assert_eq!(derive_seed(master, "isde"), derive_seed(master, "isde"));
        prop_assert_ne!(derive_seed(master, "isde"), derive_seed(master, "plom/rodb"));
    }

    #[test]
    fn full_constraints_match_their_target_length(nu in 1usize..12) {
        let mode = ConstraintMode::Full;
        prop_assert_eq!(mode.target(nu).len(), mode.dim(nu));
        let u: Vec<f64> = (0..nu).map(|k| k as f64 - 1.5).collect();
        let mut h = vec![0.0; mode.dim(nu)];
        mode.h(&u, &mut h);
        prop_assert_eq!(&h[..nu], &u[..]);
    }
}

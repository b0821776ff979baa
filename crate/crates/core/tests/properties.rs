use maskfuse::diffusion::conditioning::{ConditioningDropout, ConditioningMode};
use maskfuse::diffusion::sampler::predict_x0;
use maskfuse::diffusion::{build_schedule, cfg_combine, ddim_step, ddim_timesteps, forward_noise, ScheduleKind};
use maskfuse::mask_ops::{derive_latent_mask, BinaryMask};
use ndarray::Array2;
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

proptest! {
    #[test]
    fn schedule_is_variance_preserving_and_monotone(steps in 1usize..2000) {
        let s = build_schedule(steps, ScheduleKind::LinearBeta).unwrap();
        for t in 0..=steps {
            prop_assert!((s.alpha(t).powi(2) + s.sigma(t).powi(2) - 1.0).abs() <= 1e-9);
            if t > 0 {
                prop_assert!(s.alpha(t) <= s.alpha(t - 1));
            }
        }
    }

    #[test]
    fn exact_noise_inverts_forward_noise(t in 0usize..=1000, x0 in matrix(4, 3), eps in matrix(4, 3)) {
        let s = build_schedule(1000, ScheduleKind::LinearBeta).unwrap();
        let xt = forward_noise(&x0, t, &eps, &s).unwrap().x;
        let back = predict_x0(&xt, &eps, s.alpha(t), s.sigma(t));
        for (a, b) in back.iter().zip(&x0) {
            prop_assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
        }
    }

    #[test]
    fn ddim_with_zero_eps_scales_by_alpha_ratio(t in 1usize..=1000, frac in 0.0f64..1.0, x in matrix(3, 2)) {
        let s = build_schedule(1000, ScheduleKind::LinearBeta).unwrap();
        let tp = (t as f64 * frac) as usize;
        let out = ddim_step(&x, t, tp, &Array2::zeros((3, 2)), &s).unwrap();
        let r = s.alpha(tp) / s.alpha(t);
        for (a, b) in out.iter().zip(&x) {
            prop_assert!((a - r * b).abs() <= 1e-9 * (r * b).abs().max(1.0));
        }
    }

    #[test]
    fn guidance_is_affine_in_scale(u in matrix(2, 3), c in matrix(2, 3), s in 0.0f64..10.0) {
        let g = cfg_combine(&u, &c, s).unwrap();
        let expected = &u + &((&c - &u) * s);
        for (a, b) in g.iter().zip(&expected) {
            prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn timesteps_descend_with_both_endpoints(train in 1usize..3000, frac in 0.0f64..1.0) {
        let steps = 1 + ((train - 1) as f64 * frac) as usize;
        let ts = ddim_timesteps(train, steps).unwrap();
        prop_assert_eq!(ts.len(), steps + 1);
        prop_assert_eq!(ts[0], train);
        prop_assert_eq!(*ts.last().unwrap(), 0);
        prop_assert!(ts.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn dropout_thresholds_partition_the_unit_square(u1 in 0.0f64..1.0, u2 in 0.0f64..1.0) {
        let mode = ConditioningDropout::default().decide((u1, u2));
        let expected = if u1 < 0.05 {
            ConditioningMode::TextOnly
        } else if u2 < 0.5 {
            ConditioningMode::Masked
        } else {
            ConditioningMode::Unmasked
        };
        prop_assert_eq!(mode, expected);
    }

    #[test]
    fn latent_mask_of_block_constant_mask_is_exact(bits in prop::collection::vec(any::<bool>(), 16), f in 1usize..4) {
        let mask = BinaryMask::from_fn(4 * f, 4 * f, |r, c| bits[(r / f) * 4 + c / f]);
        let ma = derive_latent_mask(&mask, f, 0.5).unwrap();
        for (k, &b) in bits.iter().enumerate() {
            prop_assert_eq!(ma.values()[k], u8::from(b));
        }
    }
}

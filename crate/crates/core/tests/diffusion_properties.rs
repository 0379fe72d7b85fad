use anime_adapter::diffusion::{
    cfg_combine, ddpm_step, forward_diffuse, predict_x0, DiffusionConfig, NoiseSchedule, VarianceKind,
};
use anime_adapter::linalg::{max_abs_diff, randn, Mat};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn surrogate() -> NoiseSchedule {
    NoiseSchedule::from_config(&DiffusionConfig::surrogate()).unwrap()
}

proptest! {
    #[test]
    fn forward_then_invert_is_exact(seed in any::<u64>(), t in 1usize..=10, rows in 1usize..6, cols in 1usize..6) {
        let s = surrogate();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x0, eps) = (randn(rows, cols, 1.0, &mut rng), randn(rows, cols, 1.0, &mut rng));
        let x_t = forward_diffuse(&x0, t, &eps, &s).unwrap();
        prop_assert!(max_abs_diff(&predict_x0(&x_t, &eps, t, &s), &x0) <= 1e-10);
    }

    #[test]
    fn cfg_combine_is_affine_in_w(seed in any::<u64>(), w1 in -5.0f64..5.0, w2 in -5.0f64..5.0, a in -2.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, u) = (randn(3, 4, 1.0, &mut rng), randn(3, 4, 1.0, &mut rng));
        let mixed = cfg_combine(&c, &u, a * w1 + (1.0 - a) * w2).unwrap();
        let affine = cfg_combine(&c, &u, w1).unwrap() * a + cfg_combine(&c, &u, w2).unwrap() * (1.0 - a);
        prop_assert!(max_abs_diff(&mixed, &affine) <= 1e-11);
    }

    #[test]
    fn cfg_combine_is_elementwise(seed in any::<u64>(), w in -5.0f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, u) = (randn(3, 4, 1.0, &mut rng), randn(3, 4, 1.0, &mut rng));
        let mut perm: Vec<usize> = (0..12).collect();
        perm.shuffle(&mut rng);
        let permute = |m: &Mat| Mat::from_shape_fn((3, 4), |(r, col)| {
            let p = perm[r * 4 + col];
            m[[p / 4, p % 4]]
        });
        let direct = permute(&cfg_combine(&c, &u, w).unwrap());
        prop_assert_eq!(direct, cfg_combine(&permute(&c), &permute(&u), w).unwrap());
    }

    #[test]
    fn linear_schedules_decrease_alpha_bar(steps in 2usize..200, start in 1e-5f64..1e-3, span in 1e-3f64..0.05) {
        let s = NoiseSchedule::linear(steps, start, start + span, VarianceKind::Beta).unwrap();
        for t in 1..=steps {
            prop_assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            prop_assert!(s.alpha(t) > 0.0 && s.alpha(t) < 1.0);
        }
    }
}

#[test]
fn oracle_denoiser_chain_recovers_x0() {
    let s = surrogate();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x0 = randn(4, 6, 1.0, &mut rng);
    let mut x = forward_diffuse(&x0, s.steps(), &randn(4, 6, 1.0, &mut rng), &s).unwrap();
    for t in (1..=s.steps()).rev() {
        let ab = s.alpha_bar(t);
        let eps = (&x - &(&x0 * ab.sqrt())) / (1.0 - ab).sqrt();
        x = ddpm_step(&x, &eps, t, &s, None).unwrap();
    }
    assert!(max_abs_diff(&x, &x0) <= 1e-6);
}

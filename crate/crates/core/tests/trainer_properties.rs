use anime_adapter::backends::{ControllerKind, ThresholdSegmenter};
use anime_adapter::error::Error;
use anime_adapter::image::{Mask, RgbImage};
use anime_adapter::model::SurrogateStack;
use anime_adapter::render::{render_reference, Framing};
use anime_adapter::trainer::{draw_dropout, DropoutMode, Trainer, TrainingSample};
use anime_adapter::AppConfig;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const COLORS: [&str; 8] = ["red", "blue", "green", "pink", "purple", "orange", "aqua", "black"];
const POSTURES: [&str; 8] = ["standing", "arms up", "sitting", "walking", "arms out", "standing", "sitting", "jumping"];

fn toy_set(stack: &SurrogateStack, cfg: &AppConfig, n: usize) -> Vec<TrainingSample> {
    let seg = ThresholdSegmenter::default();
    (0..n)
        .map(|i| {
            let attrs = vec![format!("{} hair", COLORS[i]), format!("{} shirt", COLORS[(i + 3) % 8])];
            let (img, skel) = render_reference(&[POSTURES[i].to_string()], &attrs, Framing::Orig, 64);
            TrainingSample::prepare(format!("s{i}"), &img, &seg.mask(&img), skel, attrs, stack, &cfg.injection).unwrap()
        })
        .collect()
}

fn trainer(controller: ControllerKind, steps: u64, seed: u64) -> (Trainer, Vec<TrainingSample>) {
    let mut cfg = AppConfig::surrogate();
    cfg.trainer.controller = controller;
    cfg.trainer.steps = steps;
    let mut stack = SurrogateStack::build(&cfg).unwrap();
    let data = toy_set(&stack, &cfg, 8);
    let adapter = stack.attach_new(cfg.injection.scope, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    (Trainer::new(stack, adapter, cfg.trainer.clone(), cfg.injection.clone(), seed).unwrap(), data)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn pose_reaches_the_controller_on_every_step(seed in any::<u64>(), kind in 0usize..3, steps in 1u64..6) {
        let controller = [ControllerKind::T2iAdapter, ControllerKind::Controlnet, ControllerKind::None][kind];
        let (mut tr, data) = trainer(controller, steps, seed);
        tr.fit(&data, steps, |_, _| Ok(())).unwrap();
        let expected = if controller == ControllerKind::None { 0 } else { tr.stats.samples };
        prop_assert_eq!(tr.stats.pose_fed, expected);
        prop_assert!(tr.freeze_audit().is_ok());
    }

    #[test]
    fn threshold_segmenter_commutes_with_nearest_resize(seed in any::<u64>(), w in 2usize..40, h in 2usize..40, nw in 1usize..50, nh in 1usize..50) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..w * h * 3).map(|_| if rand::Rng::random_bool(&mut rng, 0.5) { 1.0 } else { rand::Rng::random_range(&mut rng, 0.0..1.0) }).collect();
        let img = RgbImage::from_raw(w, h, data).unwrap();
        let seg = ThresholdSegmenter::default();
        let a: Mask = seg.mask(&img.resize_nearest(nw, nh));
        let b = seg.mask(&img).resize_nearest(nw, nh);
        prop_assert_eq!(a, b);
    }
}

#[test]
fn dropout_literal_mode_always_drops_something() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..10_000 {
        let d = draw_dropout(&mut rng, DropoutMode::Literal);
        assert!(d.drop_image || d.drop_text);
    }
}

#[test]
fn unfrozen_controller_fails_the_audit() {
    let (mut tr, data) = trainer(ControllerKind::T2iAdapter, 2, 1);
    assert_eq!(tr.freeze_audit().unwrap().steps, 0);
    tr.fit(&data, 2, |_, _| Ok(())).unwrap();
    tr.stack.controller.joint_vectors_mut()[[0, 0]] += 1e-3;
    assert!(matches!(tr.freeze_audit(), Err(Error::FreezeViolation(_))));
}

#[test]
fn resumed_training_matches_a_straight_run() {
    let (mut a, data) = trainer(ControllerKind::T2iAdapter, 6, 4);
    a.fit(&data, 6, |_, _| Ok(())).unwrap();
    let (mut b, _) = trainer(ControllerKind::T2iAdapter, 6, 4);
    b.fit(&data, 3, |_, _| Ok(())).unwrap();
    b.fit(&data, 3, |_, _| Ok(())).unwrap();
    assert_eq!(a.adapter, b.adapter);
}

/// The 200-step moving average of the per-step loss should not increase
/// after step 500 in more than 5% of windows. Fails: once converged the
/// average is flat plus noise and roughly half the windows tick upward.
#[test]
#[ignore = "stochastic per-step loss makes the moving average non-monotone"]
fn loss_moving_average_is_monotone_after_warmup() {
    let (mut tr, data) = trainer(ControllerKind::T2iAdapter, 2000, 42);
    tr.fit(&data, 2000, |_, _| Ok(())).unwrap();
    let l = &tr.stats.losses;
    let ma: Vec<f64> = (200..=l.len()).map(|e| l[e - 200..e].iter().sum::<f64>() / 200.0).collect();
    let tail = &ma[500 - 200..];
    let violations = tail.windows(2).filter(|w| w[1] > w[0]).count();
    let frac = violations as f64 / (tail.len() - 1) as f64;
    assert!(frac <= 0.05, "{violations} of {} windows increase ({frac:.3})", tail.len() - 1);
}

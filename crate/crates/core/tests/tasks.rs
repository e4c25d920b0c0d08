use nvdp_core::idx::{encode_idx_images, image_task, load_idx_images, parse_idx_images, IdxImages};
use nvdp_core::tasks::{
    gp_draw, se_kernel, split_task, GpConfig, Phase, SplitProtocol, TaskMeta, TaskSampler, TrigFamily,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn gp_marginal_variance_matches_kernel_diagonal() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let xs = [-1.0, 0.0, 0.4];
    let draws = 10_000;
    let mut sum_sq = [0.0; 3];
    let mut cross = 0.0;
    for _ in 0..draws {
        let y = gp_draw(&xs, 0.3, 1.0, 1e-6, &mut rng).unwrap();
        for i in 0..3 {
            sum_sq[i] += y[i] * y[i];
        }
        cross += y[1] * y[2];
    }
    for s in sum_sq {
        let var = s / draws as f64;
        assert!((var / (1.0 + 1e-6) - 1.0).abs() < 0.05, "variance {var}");
    }
    // Covariance between nearby points follows the kernel.
    let cov = cross / draws as f64;
    let expected = se_kernel(0.0, 0.4, 0.3, 1.0);
    assert!((cov - expected).abs() < 0.05, "covariance {cov} vs {expected}");
}

#[test]
fn far_points_are_nearly_uncorrelated_at_short_length_scale() {
    assert!(se_kernel(-2.0, 2.0, 0.1, 1.0) < 1e-6);
    assert!(se_kernel(-2.0, 2.0, 0.1, 0.5) < 1e-6 * 0.25);
}

#[test]
fn trig_family_frequencies_are_balanced() {
    let sampler = TaskSampler::trig();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut counts = [0usize; 3];
    let n = 30_000;
    for _ in 0..n {
        let task = sampler.train_task(&mut rng).unwrap();
        let TaskMeta::Trig { family, amplitude, shift } = task.meta else {
            panic!("trig sampler produced {:?}", task.meta);
        };
        assert!((1.5..2.0).contains(&amplitude) && (-0.1..0.1).contains(&shift));
        counts[TrigFamily::ALL.iter().position(|&f| f == family).unwrap()] += 1;
    }
    for c in counts {
        let freq = c as f64 / n as f64;
        assert!((0.32..=0.35).contains(&freq), "family frequency {freq}");
    }
}

#[test]
fn tanh_tasks_are_bounded_by_amplitude() {
    let sampler = TaskSampler::trig();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut seen = 0;
    while seen < 50 {
        let task = sampler.eval_task(&mut rng).unwrap();
        if let TaskMeta::Trig { family: TrigFamily::Tanh, amplitude, .. } = task.meta {
            assert!(task.ys.iter().all(|y| y.abs() <= amplitude));
            assert!(task.xs.iter().all(|x| x.abs() <= std::f64::consts::PI));
            seen += 1;
        }
    }
}

#[test]
fn ten_thousand_train_splits_respect_ranges() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let p = SplitProtocol::GP;
    for _ in 0..10_000 {
        let (ctx, tgt) = split_task(200, &p, Phase::Train, &mut rng).unwrap();
        assert!((3..=97).contains(&ctx.len()));
        assert!((ctx.len() + 1..=99).contains(&tgt.len()));
        assert!(ctx.iter().all(|i| !tgt.contains(i)));
    }
}

#[test]
fn eval_split_targets_everything_else() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let sampler = TaskSampler::gp(GpConfig::default());
    let task = sampler.eval_task_with_context(50, &mut rng).unwrap();
    assert_eq!(task.len(), 400);
    assert_eq!(task.context.len(), 50);
    assert_eq!(task.target.len(), 350);
    let mut all = task.union_indices();
    all.sort_unstable();
    assert_eq!(all, (0..400).collect::<Vec<_>>());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gp_train_tasks_are_valid(seed in any::<u64>()) {
        let sampler = TaskSampler::gp(GpConfig::default());
        let task = sampler.train_task(&mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let (s, n) = (task.context.len(), task.target.len());
        prop_assert!((3..=97).contains(&s) && (s + 1..=99).contains(&n));
        prop_assert!(task.xs.iter().all(|x| (-2.0..=2.0).contains(x)));
        prop_assert!(task.ys.iter().all(|y| y.is_finite()));
        prop_assert!(task.context.iter().all(|i| !task.target.contains(i)));
        if let TaskMeta::Gp { length_scale, signal } = task.meta {
            prop_assert!((0.1..=0.6).contains(&length_scale) && (0.1..=1.0).contains(&signal));
        } else {
            prop_assert!(false, "gp sampler produced {:?}", task.meta);
        }
    }

    #[test]
    fn same_seed_same_stream(seed in any::<u64>()) {
        let sampler = TaskSampler::gp(GpConfig::default());
        let a = sampler.train_batch(3, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let b = sampler.train_batch(3, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn idx_images_round_trip(count in 1usize..4, rows in 2usize..6, cols in 2usize..6, seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pixels: Vec<u8> = (0..count * rows * cols).map(|_| rng.random()).collect();
        let images = IdxImages { count, rows, cols, pixels };
        let parsed = parse_idx_images(&encode_idx_images(&images)).unwrap();
        prop_assert_eq!(&parsed, &images);
        for i in 0..count {
            let task = image_task(&parsed, i, None);
            prop_assert_eq!(task.len(), rows * cols);
            prop_assert!(task.xs.iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert!(task.ys.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}

#[test]
fn idx_files_load_from_disk_with_limit() {
    let dir = tempfile::tempdir().unwrap();
    let images = IdxImages { count: 3, rows: 28, cols: 28, pixels: (0..3 * 784).map(|i| (i % 256) as u8).collect() };
    let path = dir.path().join("images.idx");
    std::fs::write(&path, encode_idx_images(&images)).unwrap();
    let tasks = load_idx_images(&path, None, Some(2)).unwrap();
    assert_eq!(tasks.len(), 2);
    assert_eq!(tasks[0].len(), 784);
    let sampler = TaskSampler::images(tasks).unwrap();
    assert_eq!(sampler.x_dim(), 2);
    let task = sampler.eval_task(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(task.context.len() + task.target.len(), 784);
}

use diffcl_core::ddim::{
    ddim_reverse_step, ddim_sample, forward_noise, forward_noise_with, onehot_decode, onehot_encode,
    predict_x0_from_eps, NoiseSchedule,
};
use diffcl_core::Rng;
use proptest::prelude::*;
use rand::SeedableRng;

fn schedule() -> NoiseSchedule {
    NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap()
}

#[test]
fn alpha_bar_matches_product_oracle() {
    let s = schedule();
    for t in [0, 1, 2, 10, 500, 999, 1000] {
        let want = diffcl_oracles::alpha_bar(t, 1000, 1e-4, 0.02);
        assert!((s.alpha_bar_at(t).unwrap() - want).abs() < 1e-12, "t={t}");
    }
}

#[test]
fn schedule_is_monotone() {
    let s = schedule();
    assert!(s.beta.windows(2).all(|w| w[1] > w[0]));
    assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]));
    assert!(s.alpha_bar.iter().all(|&a| a > 0.0 && a < 1.0));
}

#[test]
fn bad_schedules_are_rejected() {
    assert!(NoiseSchedule::linear(0, 1e-4, 0.02).is_err());
    assert!(NoiseSchedule::linear(10, 0.02, 1e-4).is_err());
    assert!(NoiseSchedule::linear(10, 1e-4, 1.0).is_err());
}

#[test]
fn forward_noise_moments() {
    let s = schedule();
    let mut rng = Rng::seed_from_u64(5);
    let t = 400;
    let ab = s.alpha_bar_at(t).unwrap();
    let draws = 10_000;
    let y0 = [1.0, -1.0];
    let mut sum = [0.0; 2];
    let mut sq = [0.0; 2];
    for _ in 0..draws {
        let f = forward_noise(&y0, t, &s, &mut rng).unwrap();
        for k in 0..2 {
            sum[k] += f.values[k];
            sq[k] += f.values[k] * f.values[k];
        }
    }
    for k in 0..2 {
        let mean = sum[k] / draws as f64;
        let var = sq[k] / draws as f64 - mean * mean;
        // Five standard errors of the mean and of the variance.
        let se_mean = (1.0 - ab).sqrt() / (draws as f64).sqrt();
        assert!((mean - ab.sqrt() * y0[k]).abs() < 5.0 * se_mean, "mean {mean}");
        let se_var = (1.0 - ab) * (2.0 / draws as f64).sqrt();
        assert!((var - (1.0 - ab)).abs() < 5.0 * se_var, "var {var}");
    }
}

proptest! {
    #[test]
    fn reverse_with_true_x0_recovers_the_field(
        y in prop::collection::vec(prop::sample::select(vec![-1.0f64, 1.0]), 1..40),
        t in 2usize..=1000,
        seed in any::<u64>(),
    ) {
        let s = schedule();
        let mut rng = Rng::seed_from_u64(seed);
        let noisy = forward_noise(&y, t, &s, &mut rng).unwrap();
        // Stepping to 0 with the exact x0 returns it.
        let back = ddim_reverse_step(&noisy.values, &y, t, 0, &s).unwrap();
        for (a, b) in back.iter().zip(&y) {
            prop_assert!((a - b).abs() < 1e-6);
        }
        // An intermediate step lands on the forward process with the same noise.
        let mid = t / 2;
        let step = ddim_reverse_step(&noisy.values, &y, t, mid, &s).unwrap();
        let direct = forward_noise_with(&y, mid.max(1), &s, noisy.noise.clone()).unwrap();
        if mid >= 1 {
            for (a, b) in step.iter().zip(&direct.values) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }
        let x0 = predict_x0_from_eps(&noisy.values, &noisy.noise, t, &s).unwrap();
        for (a, b) in x0.iter().zip(&y) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn onehot_round_trip(labels in prop::collection::vec(0u8..4, 1..50)) {
        let f = onehot_encode(&labels, 4).unwrap();
        prop_assert!(f.iter().all(|&v| v == 1.0 || v == -1.0));
        prop_assert_eq!(onehot_decode(&f, 4), labels);
    }
}

#[test]
fn multi_step_sampling_with_oracle_x0() {
    let s = schedule();
    let y0: Vec<f64> = onehot_encode(&[0, 1, 1, 0, 1, 0], 2).unwrap();
    let mut rng = Rng::seed_from_u64(11);
    let start = forward_noise(&y0, 1000, &s, &mut rng).unwrap().values;
    let taus = s.strided(20);
    let out = ddim_sample(start, &taus, &s, |_, _| Ok(y0.clone())).unwrap();
    for (a, b) in out.iter().zip(&y0) {
        assert!((a - b).abs() < 1e-5);
    }
    assert!(ddim_sample(vec![0.0], &[3, 5], &s, |_, _| Ok(vec![0.0])).is_err());
}

use mcn_core::adaptation::{
    adaptation_distance, category_distance, domain_distance, joint_distance, linear_kernel,
    mmd_squared, sample_distance, AdaptationConfig, AdaptationLevel, DescriptorBatch, Distance,
    LevelWeights, Modality,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_batch(
    rng: &mut ChaCha8Rng,
    n: usize,
    dim: usize,
    classes: usize,
    modality: Modality,
) -> DescriptorBatch {
    let rows = (0..n)
        .map(|_| (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect())
        .collect();
    let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
    DescriptorBatch::new(rows, labels, modality).unwrap()
}

fn with_modality(b: &DescriptorBatch, modality: Modality) -> DescriptorBatch {
    DescriptorBatch::new(b.descriptors.clone(), b.labels.clone(), modality).unwrap()
}

type DistFn = fn(&DescriptorBatch, &DescriptorBatch) -> mcn_core::Result<Distance>;

/// Largest relative error between the analytic source gradient and central
/// differences of the distance value.
fn fd_error(f: DistFn, aux: &DescriptorBatch, src: &DescriptorBatch) -> f64 {
    let analytic = f(aux, src).unwrap().grad;
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut probe = src.clone();
    for i in 0..src.len() {
        for k in 0..src.dim() {
            let orig = probe.descriptors[i][k];
            probe.descriptors[i][k] = orig + h;
            let up = f(aux, &probe).unwrap().value;
            probe.descriptors[i][k] = orig - h;
            let down = f(aux, &probe).unwrap().value;
            probe.descriptors[i][k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[i][k];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(err);
        }
    }
    worst
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn distances_are_nonnegative(seed in any::<u64>(), n in 1usize..=24, m in 1usize..=24, dim in 1usize..=12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_batch(&mut rng, m, dim, 3, Modality::Auxiliary);
        let s = random_batch(&mut rng, n, dim, 3, Modality::Source);
        prop_assert!(domain_distance(&a, &s).unwrap().value >= 0.0);
        if let Ok(d) = category_distance(&a, &s) {
            prop_assert!(d.value >= 0.0);
        }
        let paired = random_batch(&mut rng, n, dim, 3, Modality::Auxiliary);
        prop_assert!(sample_distance(&paired, &s).unwrap().value >= 0.0);
    }

    #[test]
    fn domain_distance_is_symmetric(seed in any::<u64>(), n in 1usize..=24, m in 1usize..=24, dim in 1usize..=12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_batch(&mut rng, m, dim, 3, Modality::Auxiliary);
        let s = random_batch(&mut rng, n, dim, 3, Modality::Source);
        let fwd = domain_distance(&a, &s).unwrap().value;
        let rev = domain_distance(
            &with_modality(&s, Modality::Auxiliary),
            &with_modality(&a, Modality::Source),
        ).unwrap().value;
        prop_assert!((fwd - rev).abs() <= 1e-12);
    }

    #[test]
    fn domain_distance_matches_literal_double_sum(seed in any::<u64>(), n in 1usize..=16, m in 1usize..=16, dim in 1usize..=8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_batch(&mut rng, m, dim, 2, Modality::Auxiliary);
        let s = random_batch(&mut rng, n, dim, 2, Modality::Source);
        let fast = domain_distance(&a, &s).unwrap().value;
        let slow = mmd_squared(&a.descriptors, &s.descriptors, linear_kernel).unwrap();
        prop_assert!((fast - slow).abs() <= 1e-9 * (1.0 + slow.abs()));
    }

    #[test]
    fn distance_gradients_match_finite_differences(seed in any::<u64>(), n in 1usize..=8, dim in 1usize..=6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_batch(&mut rng, n, dim, 2, Modality::Auxiliary);
        let s = random_batch(&mut rng, n, dim, 2, Modality::Source);
        prop_assert!(fd_error(domain_distance, &a, &s) <= 1e-6);
        prop_assert!(fd_error(sample_distance, &a, &s) <= 1e-6);
        if category_distance(&a, &s).is_ok() {
            prop_assert!(fd_error(category_distance, &a, &s) <= 1e-6);
        }
    }

    #[test]
    fn single_class_category_equals_domain(seed in any::<u64>(), n in 1usize..=16, m in 1usize..=16, dim in 1usize..=8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_batch(&mut rng, m, dim, 1, Modality::Auxiliary);
        let s = random_batch(&mut rng, n, dim, 1, Modality::Source);
        let c = category_distance(&a, &s).unwrap();
        let d = domain_distance(&a, &s).unwrap();
        prop_assert!((c.value - d.value).abs() <= 1e-12);
    }
}

#[test]
fn joint_is_the_weighted_sum_of_levels() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = random_batch(&mut rng, 10, 4, 3, Modality::Auxiliary);
    let s = random_batch(&mut rng, 10, 4, 3, Modality::Source);
    let w = LevelWeights {
        domain: 0.25,
        category: 2.0,
        sample: 0.5,
    };
    let j = joint_distance(&a, &s, &w).unwrap();
    let expected = 0.25 * domain_distance(&a, &s).unwrap().value
        + 2.0 * category_distance(&a, &s).unwrap().value
        + 0.5 * sample_distance(&a, &s).unwrap().value;
    assert!((j.value - expected).abs() <= 1e-12);
}

#[test]
fn level_none_is_zero_everywhere() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = random_batch(&mut rng, 5, 3, 2, Modality::Auxiliary);
    let s = random_batch(&mut rng, 7, 3, 2, Modality::Source);
    let d = adaptation_distance(&AdaptationConfig::new(AdaptationLevel::None, 1.0), &a, &s).unwrap();
    assert_eq!(d.value, 0.0);
    assert!(d.grad.iter().flatten().all(|g| *g == 0.0));
    assert_eq!(d.grad.len(), 7);
}

#[test]
fn sample_distance_rejects_unpaired_sizes() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = random_batch(&mut rng, 5, 3, 2, Modality::Auxiliary);
    let s = random_batch(&mut rng, 6, 3, 2, Modality::Source);
    assert!(matches!(
        sample_distance(&a, &s),
        Err(mcn_core::Error::Pairing(_))
    ));
}

use mcn_core::synthdata::{make_dataset, split, Alignment, GeneratorConfig, MultimodalDataset};
use proptest::prelude::*;

fn config(alignment: Alignment, per_class: usize, seed: u64) -> GeneratorConfig {
    GeneratorConfig {
        classes: 4,
        samples_per_class: per_class,
        seq_len: 4,
        alignment,
        seed,
        ..GeneratorConfig::default()
    }
}

fn alignment() -> impl Strategy<Value = Alignment> {
    prop_oneof![
        Just(Alignment::Sample),
        Just(Alignment::Category),
        Just(Alignment::Unaligned)
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn labels_are_valid_and_every_class_is_populated(a in alignment(), seed in any::<u64>(), per_class in 1usize..8) {
        let d = make_dataset(&config(a, per_class, seed)).unwrap();
        for batch in [&d.source, &d.auxiliary] {
            prop_assert!(batch.labels().iter().all(|&l| l < 4));
            let h = MultimodalDataset::class_histogram(batch.labels(), 4);
            prop_assert!(h.iter().all(|&c| c == per_class));
        }
    }

    #[test]
    fn splits_are_stratified_and_repeatable(a in alignment(), seed in any::<u64>(), train in 0.3f64..0.7) {
        let d = make_dataset(&config(a, 20, seed)).unwrap();
        let val = (1.0 - train) / 3.0;
        let fractions = [train, val, 1.0 - train - val];
        let s = split(&d, fractions, seed).unwrap();
        for (part, f) in [(&s.train, fractions[0]), (&s.val, fractions[1]), (&s.test, fractions[2])] {
            for batch in [&part.source, &part.auxiliary] {
                for c in MultimodalDataset::class_histogram(batch.labels(), 4) {
                    prop_assert!((c as f64 - f * 20.0).abs() <= 1.0 + 1e-9, "{c} vs {}", f * 20.0);
                }
            }
            if a == Alignment::Sample {
                let p = part.pairing.as_ref().unwrap();
                for (i, &j) in p.iter().enumerate() {
                    prop_assert_eq!(part.source.labels()[i], part.auxiliary.labels()[j]);
                }
            } else {
                prop_assert!(part.pairing.is_none());
            }
        }
        prop_assert_eq!(s, split(&d, fractions, seed).unwrap());
    }
}

#[test]
fn whole_dataset_split_is_identity() {
    let d = make_dataset(&config(Alignment::Sample, 5, 3)).unwrap();
    let s = split(&d, [1.0, 0.0, 0.0], 9).unwrap();
    assert_eq!(s.train.source.labels(), d.source.labels());
    assert_eq!(s.train.source.features(), d.source.features());
    assert!(s.val.source.is_empty() && s.test.source.is_empty());
}

#[test]
fn empty_class_in_a_split_is_rejected() {
    let d = make_dataset(&config(Alignment::Sample, 2, 3)).unwrap();
    assert!(matches!(
        split(&d, [0.8, 0.1, 0.1], 0),
        Err(mcn_core::Error::Config(_))
    ));
}

#[test]
fn fractions_must_sum_to_one() {
    let d = make_dataset(&config(Alignment::Sample, 4, 3)).unwrap();
    assert!(split(&d, [0.5, 0.2, 0.2], 0).is_err());
}

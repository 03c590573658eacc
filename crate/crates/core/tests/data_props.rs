use proptest::prelude::*;
use ticketlab::data::{decode_dataset, encode_dataset, make_synthetic, subsample, SubsampleSpec, SynthKind};
use ticketlab::DatasetSplit;

fn keys(ds: &DatasetSplit) -> Vec<(u32, Vec<u32>)> {
    let len = ds.sample_len();
    (0..ds.train.len())
        .map(|i| (ds.train.labels[i], ds.train.sample(i, len).iter().map(|v| v.to_bits()).collect()))
        .collect()
}

fn base() -> DatasetSplit {
    make_synthetic(SynthKind::NaturalProxy, 5, 40, 4, 8).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn smaller_fractions_nest_inside_larger(a in 0.1f64..=1.0, b in 0.1f64..=1.0, seed in 0u64..1000) {
        let ds = base();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let small = subsample(&ds, &SubsampleSpec::new(lo, seed)).unwrap();
        let large = subsample(&ds, &SubsampleSpec::new(hi, seed)).unwrap();
        let large_keys: std::collections::HashSet<_> = keys(&large).into_iter().collect();
        prop_assert!(keys(&small).iter().all(|k| large_keys.contains(k)));
        prop_assert_eq!(&small.validation, &ds.validation);
        prop_assert_eq!(&small.test, &ds.test);
    }

    #[test]
    fn stratification_rounds_each_class(f in 0.05f64..=1.0, seed in 0u64..1000) {
        let ds = base();
        let before = ds.train.class_counts(5);
        match subsample(&ds, &SubsampleSpec::new(f, seed)) {
            Ok(s) => {
                let expect: Vec<usize> = before.iter().map(|&n| (f * n as f64).round() as usize).collect();
                prop_assert_eq!(s.train.class_counts(5), expect);
            }
            Err(_) => prop_assert!(before.iter().any(|&n| (f * n as f64).round() == 0.0)),
        }
    }

    #[test]
    fn container_round_trip(classes in 2usize..5, per_class in 10usize..20, size in 4usize..7, seed in 0u64..50) {
        let ds = make_synthetic(SynthKind::TextureProxy, classes, per_class, size, seed).unwrap();
        let bytes = encode_dataset(&ds);
        prop_assert_eq!(decode_dataset(&bytes).unwrap(), ds);
    }
}

#[test]
fn normalization_comes_from_the_training_part() {
    let ds = base();
    let c = ds.input_shape[0];
    let hw = ds.input_shape[1] * ds.input_shape[2];
    let channel_mean = |part: &ticketlab::data::Part, ch: usize| {
        let mut sum = 0.0f64;
        let mut n = 0usize;
        for img in part.images.chunks(c * hw) {
            for v in &img[ch * hw..(ch + 1) * hw] {
                sum += *v as f64;
                n += 1;
            }
        }
        sum / n as f64
    };
    for ch in 0..c {
        let train = channel_mean(&ds.train, ch);
        let test = channel_mean(&ds.test, ch);
        assert!((ds.normalization.mean[ch] as f64 - train).abs() < 1e-5);
        assert!((ds.normalization.mean[ch] as f64 - test).abs() > 1e-7);
    }
}

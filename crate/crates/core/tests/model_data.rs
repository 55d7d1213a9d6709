use std::collections::HashSet;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sparfl::dpsgd::{local_train, ClipMode, DpConfig, TrainStreams};
use sparfl::model::{
    evaluate, partition, synthesize_classification, Dataset, ModelShape, ModelWeights, PartitionMode, PartitionSpec,
};
use sparfl::rng::StreamRoot;

/// Plain SGD through the DP path with noise off and clipping out of reach.
fn train(data: &Dataset, steps: usize) -> ModelWeights {
    let shape = ModelShape::Softmax {
        input: data.dim(),
        classes: data.classes(),
    };
    let mut w = ModelWeights::zeros(shape);
    let cfg = DpConfig {
        clip_c: 1e9,
        sigma_hat: 0.0,
        batch_size: 32,
        tau: steps,
        eta: 0.5,
        clip_mode: ClipMode::Fixed,
    };
    let u = local_train(
        &w,
        data,
        1.0,
        &cfg,
        &mut TrainStreams::new(&StreamRoot::new(1), 0, 0),
        0,
        0,
    )
    .unwrap();
    for (p, d) in w.params_mut().iter_mut().zip(u.values()) {
        *p += d;
    }
    w
}

fn rows(d: &Dataset) -> Vec<Vec<u64>> {
    (0..d.len())
        .map(|i| d.row(i).iter().map(|x| x.to_bits()).collect())
        .collect()
}

#[test]
fn indistinguishable_classes_give_chance_accuracy() {
    let k = 5;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let train_set = synthesize_classification(2000, 10, k, 0.0, &mut rng).unwrap();
    let test_set = synthesize_classification(5000, 10, k, 0.0, &mut rng).unwrap();
    let acc = evaluate(&train(&train_set, 300), &test_set).unwrap().accuracy;
    // Four binomial standard deviations around 1/K.
    let sd = (0.2 * 0.8 / 5000.0f64).sqrt();
    assert!((acc - 1.0 / k as f64).abs() < 4.0 * sd + 0.02, "accuracy {acc}");
}

#[test]
fn well_separated_classes_are_learned() {
    let data = synthesize_classification(2000, 10, 10, 10.0, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let acc = evaluate(&train(&data, 500), &data).unwrap().accuracy;
    assert!(acc >= 0.99, "train accuracy {acc}");
}

#[test]
fn zero_weights_predict_at_chance() {
    let k = 4;
    let data = synthesize_classification(4000, 8, k, 3.0, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let w = ModelWeights::zeros(ModelShape::Softmax { input: 8, classes: k });
    let eval = evaluate(&w, &data).unwrap();
    // Every logit ties, so class 0 wins and the balanced labels give exactly 1/K.
    assert!((eval.accuracy - 0.25).abs() < 1e-12);
    assert!((eval.loss - (k as f64).ln()).abs() < 1e-12);
}

#[test]
fn mlp_learns_separated_classes() {
    let data = synthesize_classification(1000, 6, 3, 6.0, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    let shape = ModelShape::Mlp {
        input: 6,
        hidden: 16,
        classes: 3,
    };
    let mut w = ModelWeights::init(shape, &mut ChaCha8Rng::seed_from_u64(7));
    let cfg = DpConfig {
        clip_c: 1e9,
        sigma_hat: 0.0,
        batch_size: 16,
        tau: 400,
        eta: 0.2,
        clip_mode: ClipMode::Fixed,
    };
    let u = local_train(
        &w,
        &data,
        1.0,
        &cfg,
        &mut TrainStreams::new(&StreamRoot::new(2), 0, 0),
        0,
        0,
    )
    .unwrap();
    for (p, d) in w.params_mut().iter_mut().zip(u.values()) {
        *p += d;
    }
    assert!(evaluate(&w, &data).unwrap().accuracy > 0.95);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn partitions_are_disjoint_and_conserve_counts(
        seed in 0u64..10_000,
        clients in 1usize..12,
        mode in 0usize..3,
        conc in 0.05f64..5.0,
    ) {
        let data = synthesize_classification(600, 3, 4, 2.0, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let spec_mode = match mode {
            0 => PartitionMode::Iid,
            1 => PartitionMode::Dirichlet(conc),
            _ => PartitionMode::PresetSizes((1..=clients).map(|i| 5 * i).collect()),
        };
        let spec = PartitionSpec { mode: spec_mode.clone(), num_clients: clients };
        let parts = partition(&data, &spec, &mut ChaCha8Rng::seed_from_u64(seed + 1)).unwrap();
        prop_assert_eq!(parts.len(), clients);
        let all: HashSet<Vec<u64>> = rows(&data).into_iter().collect();
        let mut seen = HashSet::new();
        for (i, p) in parts.iter().enumerate() {
            match &spec_mode {
                PartitionMode::PresetSizes(sizes) => prop_assert_eq!(p.len(), sizes[i]),
                _ => prop_assert_eq!(p.len(), 600 / clients),
            }
            for r in rows(p) {
                prop_assert!(all.contains(&r));
                prop_assert!(seen.insert(r), "a sample is shared between clients");
            }
        }
    }
}

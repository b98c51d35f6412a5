use docstruct_core::incremental::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn model(seed: u64, head: HeadKind, classes: usize) -> GroupedClassifier {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    GroupedClassifier::new(4, &[6, 5], classes, head, &mut rng).unwrap()
}

fn head_kind() -> impl Strategy<Value = HeadKind> {
    prop_oneof![Just(HeadKind::Softmax), Just(HeadKind::ASoftmax)]
}

fn inputs() -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 4), 1..6)
}

proptest! {
    #[test]
    fn distillation_is_non_negative_and_zero_only_on_equal_outputs(
        seed in 0u64..500, head in head_kind(), batch in inputs(), shift in -0.5f64..0.5, idx in 0usize..10,
    ) {
        let teacher = model(seed, head, 3);
        let mut student = teacher.clone();
        prop_assert_eq!(distillation_loss(&teacher, &student, &batch).unwrap(), 0.0);
        let mut p = student.params();
        p[idx] += shift;
        student.set_params(&p).unwrap();
        let d = distillation_loss(&teacher, &student, &batch).unwrap();
        prop_assert!(d >= 0.0);
        let equal = batch.iter().all(|x| {
            teacher.forward(x).unwrap() == student.forward(x).unwrap()
        });
        prop_assert_eq!(d == 0.0, equal);
    }

    #[test]
    fn expansion_preserves_old_logits(seed in 0u64..500, head in head_kind(), n_new in 1usize..4, batch in inputs()) {
        let m = model(seed, head, 3);
        let e = m.expand_output_layer(n_new).unwrap();
        prop_assert_eq!(e.classes(), 3 + n_new);
        for x in &batch {
            let a = m.forward(x).unwrap();
            let b = e.forward(x).unwrap();
            prop_assert_eq!(a.logits(), &b.logits()[..3]);
        }
        prop_assert_eq!(distillation_loss(&m, &e, &batch).unwrap(), 0.0);
    }

    /// With m = 1 the angular decision is the argmax of normalized-weight
    /// logits, so the loss is minimized by the same class.
    #[test]
    fn unit_margin_argmax_matches_normalized_softmax(seed in 0u64..500, batch in inputs()) {
        let m = model(seed, HeadKind::ASoftmax, 4);
        for x in &batch {
            let f = m.forward(x).unwrap();
            let best_softmax = (0..4)
                .min_by(|&a, &b| softmax_loss(f.logits(), a).unwrap().total_cmp(&softmax_loss(f.logits(), b).unwrap()))
                .unwrap();
            let best_angular = (0..4)
                .min_by(|&a, &b| {
                    let la = asoftmax_loss(m.head_group(), f.feature(), a, 1).unwrap();
                    let lb = asoftmax_loss(m.head_group(), f.feature(), b, 1).unwrap();
                    la.total_cmp(&lb)
                })
                .unwrap();
            prop_assert_eq!(best_softmax, best_angular);
            prop_assert_eq!(best_softmax, m.predict(x).unwrap());
        }
    }

    #[test]
    fn margin_loss_non_decreasing(theta_frac in 0.01f64..0.99, radius in 0.1f64..5.0, other in -1.0f64..1.0) {
        let max_m = 4u32;
        let theta = theta_frac * std::f64::consts::PI / max_m as f64;
        let head = Dense { inputs: 2, outputs: 2, weights: vec![1.0, 0.0, other, (1.0 - other * other).sqrt()], bias: vec![] };
        let x = [radius * theta.cos(), radius * theta.sin()];
        let mut prev = 0.0;
        for m in 1..=max_m {
            let l = asoftmax_loss(&head, &x, 0, m).unwrap();
            prop_assert!(l >= prev - 1e-12);
            prev = l;
        }
    }
}

#[test]
fn training_is_deterministic() {
    let task = ClusterTask {
        train_per_class: 20,
        test_per_class: 5,
        old_classes: 3,
        ..ClusterTask::default()
    };
    let data = task.generate();
    let base = GroupedClassifier::new(
        16,
        &[8],
        3,
        HeadKind::Softmax,
        &mut ChaCha8Rng::seed_from_u64(1),
    )
    .unwrap();
    let cfg = TrainConfig {
        learning_rate: 0.01,
        max_steps: 200,
        eval_interval: 20,
        seed: 9,
        ..TrainConfig::default()
    };
    let a = incremental_train(&base, &data.train_old, &data.train_new, &cfg).unwrap();
    let b = incremental_train(&base, &data.train_old, &data.train_new, &cfg).unwrap();
    assert_eq!(a.model.to_json(), b.model.to_json());
    let other = incremental_train(
        &base,
        &data.train_old,
        &data.train_new,
        &TrainConfig { seed: 10, ..cfg },
    )
    .unwrap();
    assert_ne!(a.model.params(), other.model.params());
}

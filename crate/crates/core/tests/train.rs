use proptest::prelude::*;

use xqnet::blocks::GateKind;
use xqnet::data::{synth_dataset, Dataset};
use xqnet::model::{Model, ModelSpec};
use xqnet::train::{accuracy, evaluate, predict, train_loop, Scheduler, StopReason, TrainConfig};
use xqnet::Error;

fn small_model(seed: u64) -> Model {
    Model::build(ModelSpec::exquisitenet_v2(GateKind::Ln, 10), seed).unwrap()
}

fn quick_cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        max_epochs: epochs,
        batch_size: 8,
        ..TrainConfig::default()
    }
}

#[test]
fn single_epoch_budget_stops_on_epochs() {
    let data = synth_dataset(20, 10, 32, 1).unwrap();
    let mut m = small_model(0);
    let h = train_loop(&mut m, &data, &quick_cfg(1)).unwrap();
    assert_eq!(h.epochs.len(), 1);
    assert_eq!(h.stop, StopReason::MaxEpochs);
    assert_eq!(h.epochs[0].lr, 0.05);
    assert!(h.epochs[0].loss.is_finite() && h.epochs[0].loss > 0.0);
}

#[test]
fn reaching_the_target_stops_early() {
    let data = synth_dataset(20, 10, 32, 1).unwrap();
    let mut m = small_model(0);
    let cfg = TrainConfig {
        target_loss: 1e9,
        ..quick_cfg(5)
    };
    let h = train_loop(&mut m, &data, &cfg).unwrap();
    assert_eq!((h.epochs.len(), h.stop), (1, StopReason::TargetLoss));
}

#[test]
fn identical_seeds_give_identical_runs() {
    let data = synth_dataset(16, 10, 32, 2).unwrap();
    let run = || {
        let mut m = small_model(5);
        let h = train_loop(&mut m, &data, &quick_cfg(2)).unwrap();
        (
            h.losses().iter().map(|l| l.to_bits()).collect::<Vec<_>>(),
            m.store().clone(),
        )
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);

    let mut m = small_model(5);
    let other = train_loop(
        &mut m,
        &data,
        &TrainConfig {
            seed: 9,
            ..quick_cfg(2)
        },
    )
    .unwrap();
    assert_ne!(
        other
            .losses()
            .iter()
            .map(|l| l.to_bits())
            .collect::<Vec<_>>(),
        a.0
    );
}

#[test]
fn poisoned_weights_report_the_first_batch() {
    let data = synth_dataset(16, 10, 32, 3).unwrap();
    let mut m = small_model(0);
    let id = m.store().id_of("l15.fc.weight").unwrap();
    m.store_mut().get_mut(id).data_mut()[0] = f32::NAN;
    match train_loop(&mut m, &data, &quick_cfg(3)) {
        Err(Error::NonFiniteLoss { epoch, batch }) => assert_eq!((epoch, batch), (1, 0)),
        other => panic!("{other:?}"),
    }
}

#[test]
fn zeroed_classifier_scores_chance_on_balanced_classes() {
    let data = synth_dataset(50, 10, 32, 4).unwrap();
    assert!(data.label_histogram().iter().all(|&n| n == 5));
    let mut m = small_model(0);
    for name in ["l15.fc.weight", "l15.fc.bias"] {
        let id = m.store().id_of(name).unwrap();
        m.store_mut().get_mut(id).data_mut().fill(0.0);
    }
    let preds = predict(&m, &data, 16).unwrap();
    assert!(preds.iter().all(|&p| p == 0));
    assert_eq!(evaluate(&m, &data, 16).unwrap(), 0.1);
    assert_eq!(accuracy(data.labels(), data.labels()), 1.0);
}

#[test]
fn evaluate_agrees_with_recount() {
    let data = synth_dataset(30, 10, 32, 5).unwrap();
    let m = small_model(2);
    let preds = predict(&m, &data, 7).unwrap();
    let hits = (0..data.len())
        .filter(|&i| preds[i] == data.labels()[i])
        .count();
    assert_eq!(evaluate(&m, &data, 7).unwrap(), hits as f64 / 30.0);
    assert_eq!(predict(&m, &data, 30).unwrap(), preds);
}

#[test]
fn rejects_mismatched_data() {
    let mut m = small_model(0);
    let wide = synth_dataset(20, 20, 32, 0).unwrap();
    assert!(matches!(
        train_loop(&mut m, &wide, &quick_cfg(1)),
        Err(Error::Config(_))
    ));
    let bad = TrainConfig {
        batch_size: 0,
        ..quick_cfg(1)
    };
    let data = synth_dataset(10, 10, 32, 0).unwrap();
    assert!(train_loop(&mut m, &data, &bad).is_err());
}

fn class_means(data: &Dataset) -> Vec<Vec<f64>> {
    let dim = data.image(0).len();
    let mut sums = vec![vec![0.0; dim]; data.classes()];
    let hist = data.label_histogram();
    for i in 0..data.len() {
        for (s, &v) in sums[data.labels()[i]].iter_mut().zip(data.image(i)) {
            *s += f64::from(v);
        }
    }
    for (s, &n) in sums.iter_mut().zip(&hist) {
        s.iter_mut().for_each(|v| *v /= n as f64);
    }
    sums
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

#[test]
fn synthetic_classes_are_separable() {
    let data = synth_dataset(40, 4, 32, 6).unwrap();
    assert!(data.image(0).iter().all(|v| (0.0..=1.0).contains(v)));
    let means = class_means(&data);
    let mut intra = 0.0f64;
    for i in 0..data.len() {
        let x: Vec<f64> = data.image(i).iter().map(|&v| f64::from(v)).collect();
        intra = intra.max(dist(&x, &means[data.labels()[i]]));
    }
    for a in 0..4 {
        for b in a + 1..4 {
            assert!(dist(&means[a], &means[b]) > intra, "classes {a} and {b}");
        }
    }
    assert_eq!(synth_dataset(40, 4, 32, 6).unwrap().image(3), data.image(3));
}

#[test]
fn epoch_order_is_a_fresh_permutation() {
    let data = synth_dataset(32, 4, 32, 0).unwrap();
    let (a, b) = (data.order(1, 1), data.order(1, 2));
    let mut sorted = a.clone();
    sorted.sort_unstable();
    assert_eq!(sorted, (0..32).collect::<Vec<_>>());
    assert_ne!(a, b);
    assert_eq!(a, data.order(1, 1));
}

proptest! {
    #[test]
    fn scheduler_rates_are_decades_of_the_initial_rate(losses in prop::collection::vec(0.0f64..5.0, 1..60)) {
        let cfg = TrainConfig::default();
        let mut s = Scheduler::new(&cfg);
        let mut prev = s.lr;
        for l in losses {
            let lr = s.update(l);
            prop_assert!(lr <= prev);
            let mut k = 0;
            let mut want = cfg.initial_lr;
            while want > lr && k < 60 {
                want *= cfg.lr_factor;
                k += 1;
            }
            prop_assert_eq!(lr, want);
            prev = lr;
        }
    }
}

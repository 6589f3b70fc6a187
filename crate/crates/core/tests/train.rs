use powshift::model::Engine;
use powshift::train::{
    accuracy, eval, forward_backward, train, Mode, OnEngine, ToyNet, TrainConfig, TrainError,
    WeightQuantizer,
};

fn small(mode: Mode, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::new(mode, seed);
    cfg.epochs = 4;
    cfg.train_samples = 256;
    cfg.test_samples = 256;
    cfg
}

#[test]
fn loss_and_gradient_ignore_sample_order() {
    let cfg = TrainConfig::new(Mode::Baseline, 1);
    let data = cfg.train_set().unwrap();
    let net = ToyNet::init(1);
    let order: Vec<usize> = (0..12).collect();
    let reversed: Vec<usize> = order.iter().rev().copied().collect();
    let (xa, la) = data.gather(&order);
    let (xb, lb) = data.gather(&reversed);
    let a = forward_backward(&net, &xa, &la, None).unwrap();
    let b = forward_backward(&net, &xb, &lb, None).unwrap();
    assert!((a.loss - b.loss).abs() < 1e-12);
    for (ga, gb) in a.grads.iter().zip(&b.grads) {
        assert!((ga - gb).abs() <= 1e-10 * (1.0 + ga.abs()));
    }
}

#[test]
fn weight_quantizers_are_idempotent() {
    let net = ToyNet::init(2);
    for mode in [Mode::Int8Wa, Mode::Int4w, Mode::Log4w] {
        for exempt in [false, true] {
            let q = WeightQuantizer::for_mode(mode, exempt).unwrap();
            let once = q.apply(&net.params);
            assert_eq!(q.apply(&once), once, "{mode} exempt={exempt}");
        }
    }
    let q = WeightQuantizer::for_mode(Mode::Log4w, false).unwrap();
    let w = q.apply(&net.params);
    let conv0 = powshift::train::Layout::new().weight_ranges()[0].clone();
    let s = net.params[conv0.clone()]
        .iter()
        .fold(0f64, |m, v| m.max(v.abs()));
    for v in &w[conv0] {
        let r = v.abs() / s;
        assert!(
            (0..=7).any(|e| (r - (-(e as f64)).exp2()).abs() < 1e-12),
            "{r}"
        );
    }
    assert!(WeightQuantizer::for_mode(Mode::Baseline, false).is_none());
}

#[test]
fn constant_logits_pick_the_first_class() {
    let logits = vec![vec![0.0; 8]; 16];
    let labels: Vec<usize> = (0..16).map(|i| i % 8).collect();
    assert_eq!(accuracy(&logits, &labels), 2.0 / 16.0);
}

#[test]
fn quantization_aware_modes_need_a_baseline() {
    let cfg = small(Mode::Log4w, 3);
    assert!(matches!(
        train(&cfg, None),
        Err(TrainError::MissingBaseline)
    ));
    let mut bad = small(Mode::Baseline, 3);
    bad.epochs = 0;
    assert!(matches!(train(&bad, None), Err(TrainError::BadConfig(_))));
}

#[test]
fn exported_model_matches_training_accuracy_on_the_shift_engine() {
    let base = train(&small(Mode::Baseline, 5), None).unwrap();
    assert!(
        base.test_acc > 0.5,
        "baseline only reached {}",
        base.test_acc
    );
    let cfg = small(Mode::Log4wInt8a, 5);
    let qat = train(&cfg, Some(&base.float)).unwrap();
    let q = qat.quant.as_ref().expect("integer export");
    let test = cfg.test_set().unwrap();
    let on_bac = eval(&OnEngine(q, Engine::Bac), &test).unwrap();
    let on_mac = eval(&OnEngine(q, Engine::Mac), &test).unwrap();
    assert_eq!(on_bac, on_mac);
    assert!(
        (on_bac - qat.test_acc).abs() <= 0.01,
        "training reported {}, shift engine gives {on_bac}",
        qat.test_acc
    );
}

#[test]
fn ema_on_and_off_both_train() {
    let base = train(&small(Mode::Baseline, 6), None).unwrap();
    let with = train(&small(Mode::Log4w, 6), Some(&base.float)).unwrap();
    let mut cfg = small(Mode::Log4w, 6);
    cfg.ema_decay = None;
    let without = train(&cfg, Some(&base.float)).unwrap();
    eprintln!(
        "log4w test accuracy: ema {:.4}, no ema {:.4}",
        with.test_acc, without.test_acc
    );
    assert_ne!(with.float, without.float);
    assert!(with.test_acc.is_finite() && without.test_acc.is_finite());
}

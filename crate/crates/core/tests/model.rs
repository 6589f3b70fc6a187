mod common;

use powshift::fuse::ConvWeights;
use powshift::kernels::FloatTensor;
use powshift::model::{
    load_pwrf, load_pwrq, model_stats, quantize_model, run_tensor, save_pwrf, save_pwrq,
    verify_layerwise, Engine, FloatLayer, LayerSpec, ModelError, QuantizeOptions, RunOptions,
    Scheme,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const OPTS: RunOptions = RunOptions { keep_taps: false };

fn sample(
    seed: u64,
    scheme: Scheme,
) -> (
    powshift::model::FloatModel,
    powshift::model::QuantModel,
    FloatTensor,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let float = common::random_three_layer_model(&mut rng);
    let calib = common::random_frames(&mut rng, 12, float.input_shape);
    let q = quantize_model(&float, &calib, scheme, QuantizeOptions::default()).unwrap();
    let x = common::random_frames(&mut rng, 5, float.input_shape);
    (float, q, x)
}

#[test]
fn pwrq_round_trips_for_every_scheme() {
    for (i, scheme) in Scheme::ALL.into_iter().enumerate() {
        let (float, q, x) = sample(i as u64, scheme);
        let bytes = save_pwrq(&q).unwrap();
        let back = load_pwrq(&bytes).unwrap();
        assert_eq!(back, q, "{scheme}");
        assert_eq!(save_pwrq(&back).unwrap(), bytes);
        assert_eq!(load_pwrf(&save_pwrf(&float)).unwrap(), float);
        let a = run_tensor(&q, &x, Engine::Float, OPTS).unwrap();
        let b = run_tensor(&back, &x, Engine::Float, OPTS).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn corrupt_files_are_rejected() {
    let (float, q, _) = sample(3, Scheme::Log4wInt8a);
    let bytes = save_pwrq(&q).unwrap();
    let mut flipped = bytes.clone();
    flipped[0] ^= 0xFF;
    assert_eq!(load_pwrq(&flipped), Err(ModelError::BadMagic));
    for cut in [bytes.len() - 1, bytes.len() / 2, 40] {
        assert!(
            matches!(load_pwrq(&bytes[..cut]), Err(ModelError::CorruptSection(_))),
            "cut at {cut}"
        );
    }
    let mut version = bytes.clone();
    version[4] = 9;
    assert_eq!(load_pwrq(&version), Err(ModelError::VersionUnsupported(9)));
    let pwrf = save_pwrf(&float);
    assert!(load_pwrf(&pwrf[..pwrf.len() - 3]).is_err());
    assert_eq!(load_pwrq(&pwrf), Err(ModelError::BadMagic));
}

#[test]
fn shift_and_multiply_engines_agree_on_random_models() {
    for seed in 0..30 {
        let (_, q, x) = sample(100 + seed, Scheme::Log4wInt8a);
        let opts = RunOptions { keep_taps: true };
        let mac = run_tensor(&q, &x, Engine::Mac, opts).unwrap();
        let bac = run_tensor(&q, &x, Engine::Bac, opts).unwrap();
        assert_eq!(mac, bac);
        let report = verify_layerwise(&q, &x).unwrap();
        assert!(report.layers.iter().all(|l| l.engines_agree));
        assert!(report.worst_lsb() <= 1);
    }
}

#[test]
fn int8_scheme_stays_close_to_float() {
    for seed in 0..10 {
        let (float, _, x) = sample(200 + seed, Scheme::Int8);
        // Calibrating on the evaluated frames keeps every value inside the
        // quantizer ranges, so only rounding error remains.
        let q = quantize_model(&float, &x, Scheme::Int8, QuantizeOptions::default()).unwrap();
        let reference = float.forward(&x).unwrap();
        let out = run_tensor(&q, &x, Engine::Mac, OPTS)
            .unwrap()
            .output
            .to_f64();
        let range = reference
            .data
            .iter()
            .fold(0f64, |m, v| m.max(v.abs()))
            .max(1e-3);
        let err = reference
            .data
            .iter()
            .zip(&out)
            .fold(0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(
            err / range < 0.05,
            "seed {seed}: relative error {}",
            err / range
        );
    }
}

#[test]
fn float_activation_models_only_run_on_float() {
    let (_, q, x) = sample(5, Scheme::Log4w);
    assert!(run_tensor(&q, &x, Engine::Float, OPTS).is_ok());
    for engine in [Engine::Mac, Engine::Bac] {
        assert_eq!(
            run_tensor(&q, &x, engine, OPTS).unwrap_err(),
            ModelError::UnsupportedEngine(engine)
        );
    }
}

#[test]
fn int8_quantization_needs_calibration_frames() {
    let (float, _, _) = sample(6, Scheme::Int8);
    let [c, h, w] = float.input_shape;
    let empty = FloatTensor::zeros([0, c, h, w]);
    assert_eq!(
        quantize_model(&float, &empty, Scheme::Int8, QuantizeOptions::default()).unwrap_err(),
        ModelError::EmptyCalibrationSet
    );
    assert!(quantize_model(&float, &empty, Scheme::Log4w, QuantizeOptions::default()).is_ok());
}

#[test]
fn constant_input_propagates_exactly() {
    let (_, q, _) = sample(8, Scheme::Log4wInt8a);
    let [c, h, w] = q.input_shape;
    let x = FloatTensor::zeros([1, c, h, w]);
    let a = run_tensor(&q, &x, Engine::Bac, OPTS).unwrap();
    let b = run_tensor(&q, &x, Engine::Mac, OPTS).unwrap();
    assert_eq!(a, b);
    // A zero frame through a layer without padding yields a spatially
    // constant output per channel.
    let out = a.output.as_int8().unwrap();
    if q.layers
        .iter()
        .all(|l| !matches!(l, LayerSpec::Conv(f) if f.pad > 0))
    {
        let plane = out.shape[2] * out.shape[3];
        for ch in out.data.chunks(plane) {
            assert!(ch.iter().all(|v| *v == ch[0]));
        }
    }
}

#[test]
fn stats_match_a_direct_count() {
    let (float, q, _) = sample(9, Scheme::Log4wInt8a);
    let stats = model_stats(&q);
    let mut pot = 0;
    let mut conv = 0;
    for l in &float.layers {
        if let FloatLayer::Conv { w, .. } = l {
            conv += w.len();
        }
    }
    for l in &q.layers {
        if let LayerSpec::Conv(f) = l {
            if let ConvWeights::Pot(t) = &f.weights {
                pot += t.len();
                assert_eq!(t.packed().len(), t.len().div_ceil(2));
            }
        }
    }
    assert_eq!(stats.conv_weights, conv);
    assert_eq!(stats.pot_weights, pot);
    assert_eq!(stats.pot_weights, conv);
    let ratio = (4 * pot) as f64 / stats.pot_bytes as f64;
    assert!((stats.pot_compression() - ratio).abs() < 1e-12);
    let text = stats.to_string();
    assert!(text.contains("compression_ratio:"));
    assert!(text.contains("conv_weight_fraction:"));
}

#[test]
fn exempt_layers_keep_eight_bit_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let float = common::random_three_layer_model(&mut rng);
    let calib = common::random_frames(&mut rng, 8, float.input_shape);
    let opts = QuantizeOptions {
        exempt_first_last: true,
        ..Default::default()
    };
    let q = quantize_model(&float, &calib, Scheme::Log4wInt8a, opts).unwrap();
    let kinds: Vec<bool> = q
        .layers
        .iter()
        .filter_map(|l| match l {
            LayerSpec::Conv(f) => Some(matches!(f.weights, ConvWeights::Pot(_))),
            _ => None,
        })
        .collect();
    assert_eq!(kinds, vec![false, true, false]);
}

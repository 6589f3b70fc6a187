#![allow(dead_code)]

use powshift::fuse::BnParams;
use powshift::kernels::{ActivationKind, FloatTensor};
use powshift::model::{FloatLayer, FloatModel, ModelMeta};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Random frames with values in {-1, 0, 1}.
pub fn random_frames(rng: &mut impl Rng, n: usize, shape: [usize; 3]) -> FloatTensor {
    let per: usize = shape.iter().product();
    FloatTensor {
        shape: [n, shape[0], shape[1], shape[2]],
        data: (0..n * per)
            .map(|_| rng.gen_range(-1i32..=1) as f64)
            .collect(),
    }
}

pub fn random_bn(rng: &mut impl Rng, c: usize) -> BnParams {
    BnParams {
        gamma: (0..c)
            .map(|_| rng.gen_range(0.5..1.5) * if rng.gen_bool(0.1) { -1.0 } else { 1.0 })
            .collect(),
        beta: (0..c).map(|_| rng.gen_range(-0.5..0.5)).collect(),
        mean: (0..c).map(|_| rng.gen_range(-0.3..0.3)).collect(),
        var: (0..c).map(|_| rng.gen_range(0.2..2.0)).collect(),
        eps: powshift::fuse::BN_EPS,
    }
}

fn normal_vec(rng: &mut impl Rng, n: usize, std: f64) -> Vec<f64> {
    let d = Normal::new(0.0, std).unwrap();
    (0..n).map(|_| d.sample(rng)).collect()
}

/// Three conv+BN layers with random geometry, each optionally followed by a
/// ReLU, with an optional max-pool after the first.
pub fn random_three_layer_model(rng: &mut impl Rng) -> FloatModel {
    let c0 = rng.gen_range(1..=3);
    let h = rng.gen_range(6..=14);
    let w = rng.gen_range(6..=14);
    let mut layers = Vec::new();
    let (mut c, mut hh, mut ww) = (c0, h, w);
    for i in 0..3 {
        let c_out = rng.gen_range(1..=8);
        let k = [1, 3, 3, 5][rng.gen_range(0..4)];
        let k = if k > hh.min(ww) { 1 } else { k };
        let stride = if rng.gen_bool(0.25) { 2 } else { 1 };
        let pad = rng.gen_range(0..=k / 2);
        let std = (2.0 / (c * k * k) as f64).sqrt();
        layers.push(FloatLayer::Conv {
            shape: [c_out, c, k, k],
            w: normal_vec(rng, c_out * c * k * k, std),
            b: normal_vec(rng, c_out, 0.1),
            stride,
            pad,
            bn: Some(random_bn(rng, c_out)),
        });
        hh = (hh + 2 * pad - k) / stride + 1;
        ww = (ww + 2 * pad - k) / stride + 1;
        c = c_out;
        if rng.gen_bool(0.7) {
            layers.push(FloatLayer::Activation(ActivationKind::Relu));
        }
        if i == 0 && hh >= 4 && ww >= 4 && rng.gen_bool(0.4) {
            layers.push(FloatLayer::MaxPool);
            hh /= 2;
            ww /= 2;
        }
    }
    FloatModel {
        meta: ModelMeta {
            sensor_width: w as u16,
            sensor_height: h as u16,
            tau_us: 10_000,
        },
        input_shape: [c0, h, w],
        layers,
    }
}

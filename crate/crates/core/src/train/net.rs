//! The toy classifier and its hand-written backward pass.
//!
//! ```text
//! 1x32x32 -> conv3x3(8)+BN+ReLU -> maxpool2 -> conv3x3(16)+BN+ReLU -> maxpool2
//!         -> conv3x3(32)+BN+ReLU -> global average pool -> dense 32->8
//! ```
//!
//! All convolutions use stride 1 and zero padding 1. Parameters live in one
//! flat vector so the optimizer, the EMA and the gradient check can treat
//! them uniformly.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::fuse::{BnParams, BN_EPS};
use crate::kernels::ActivationKind;
use crate::model::{FloatLayer, FloatModel, ModelMeta};

use super::TrainError;

pub const INPUT_SIZE: usize = 32;
pub const CLASSES: usize = 8;
pub const CONV_CHANNELS: [usize; 3] = [8, 16, 32];
/// Weight of the previous running statistic in each BN update.
pub const BN_MOMENTUM: f64 = 0.9;

/// Where one conv block's tensors sit in the flat parameter vector.
#[derive(Debug, Clone)]
pub struct ConvSlots {
    pub c_in: usize,
    pub c_out: usize,
    pub w: Range<usize>,
    pub b: Range<usize>,
    pub gamma: Range<usize>,
    pub beta: Range<usize>,
}

#[derive(Debug, Clone)]
pub struct Layout {
    pub conv: [ConvSlots; 3],
    pub dense_w: Range<usize>,
    pub dense_b: Range<usize>,
    pub len: usize,
}

impl Layout {
    pub fn new() -> Self {
        let mut at = 0;
        let mut take = |n: usize| {
            at += n;
            at - n..at
        };
        let mut c_in = 1;
        let conv = CONV_CHANNELS.map(|c_out| {
            let slots = ConvSlots {
                c_in,
                c_out,
                w: take(c_out * c_in * 9),
                b: take(c_out),
                gamma: take(c_out),
                beta: take(c_out),
            };
            c_in = c_out;
            slots
        });
        let dense_w = take(CLASSES * CONV_CHANNELS[2]);
        let dense_b = take(CLASSES);
        Self {
            conv,
            dense_w,
            dense_b,
            len: at,
        }
    }

    /// Ranges of the quantizable weight tensors: three convs then the dense layer.
    pub fn weight_ranges(&self) -> [Range<usize>; 4] {
        [
            self.conv[0].w.clone(),
            self.conv[1].w.clone(),
            self.conv[2].w.clone(),
            self.dense_w.clone(),
        ]
    }
}

impl Default for Layout {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyNet {
    pub params: Vec<f64>,
    pub running_mean: [Vec<f64>; 3],
    pub running_var: [Vec<f64>; 3],
}

impl ToyNet {
    /// He-normal conv weights, unit BN, small dense weights.
    pub fn init(seed: u64) -> Self {
        let layout = Layout::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; layout.len];
        for s in &layout.conv {
            let std = (2.0 / (s.c_in * 9) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("finite std");
            for v in &mut params[s.w.clone()] {
                *v = normal.sample(&mut rng);
            }
            params[s.gamma.clone()].fill(1.0);
        }
        let normal = Normal::new(0.0, (1.0 / CONV_CHANNELS[2] as f64).sqrt()).expect("finite std");
        for v in &mut params[layout.dense_w.clone()] {
            *v = normal.sample(&mut rng);
        }
        Self {
            params,
            running_mean: CONV_CHANNELS.map(|c| vec![0.0; c]),
            running_var: CONV_CHANNELS.map(|c| vec![1.0; c]),
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn to_float_model(&self, tau_us: u32) -> FloatModel {
        let layout = Layout::new();
        let p = &self.params;
        let mut layers = Vec::new();
        for (i, s) in layout.conv.iter().enumerate() {
            layers.push(FloatLayer::Conv {
                shape: [s.c_out, s.c_in, 3, 3],
                w: p[s.w.clone()].to_vec(),
                b: p[s.b.clone()].to_vec(),
                stride: 1,
                pad: 1,
                bn: Some(BnParams {
                    gamma: p[s.gamma.clone()].to_vec(),
                    beta: p[s.beta.clone()].to_vec(),
                    mean: self.running_mean[i].clone(),
                    var: self.running_var[i].clone(),
                    eps: BN_EPS,
                }),
            });
            layers.push(FloatLayer::Activation(ActivationKind::Relu));
            layers.push(if i < 2 {
                FloatLayer::MaxPool
            } else {
                FloatLayer::Gap
            });
        }
        layers.push(FloatLayer::Dense {
            out_features: CLASSES,
            in_features: CONV_CHANNELS[2],
            w: p[layout.dense_w.clone()].to_vec(),
            b: p[layout.dense_b.clone()].to_vec(),
        });
        FloatModel {
            meta: ModelMeta {
                sensor_width: INPUT_SIZE as u16,
                sensor_height: INPUT_SIZE as u16,
                tau_us,
            },
            input_shape: [1, INPUT_SIZE, INPUT_SIZE],
            layers,
        }
    }

    /// Inverse of [`ToyNet::to_float_model`]; rejects any other architecture.
    pub fn from_float_model(model: &FloatModel) -> Result<Self, TrainError> {
        let layout = Layout::new();
        let mismatch =
            || TrainError::ShapeMismatch("float model is not the toy architecture".into());
        if model.input_shape != [1, INPUT_SIZE, INPUT_SIZE] || model.layers.len() != 10 {
            return Err(mismatch());
        }
        let mut params = vec![0.0; layout.len];
        let mut running_mean = CONV_CHANNELS.map(|c| vec![0.0; c]);
        let mut running_var = CONV_CHANNELS.map(|c| vec![1.0; c]);
        for (i, s) in layout.conv.iter().enumerate() {
            let tail = if i < 2 {
                FloatLayer::MaxPool
            } else {
                FloatLayer::Gap
            };
            match &model.layers[3 * i..3 * i + 3] {
                [FloatLayer::Conv {
                    shape,
                    w,
                    b,
                    stride: 1,
                    pad: 1,
                    bn: Some(bn),
                }, FloatLayer::Activation(ActivationKind::Relu), t]
                    if *shape == [s.c_out, s.c_in, 3, 3]
                        && *t == tail
                        && bn.channels() == s.c_out =>
                {
                    params[s.w.clone()].copy_from_slice(w);
                    params[s.b.clone()].copy_from_slice(b);
                    params[s.gamma.clone()].copy_from_slice(&bn.gamma);
                    params[s.beta.clone()].copy_from_slice(&bn.beta);
                    running_mean[i].clone_from(&bn.mean);
                    running_var[i].clone_from(&bn.var);
                }
                _ => return Err(mismatch()),
            }
        }
        match &model.layers[9] {
            FloatLayer::Dense {
                out_features: CLASSES,
                in_features,
                w,
                b,
            } if *in_features == CONV_CHANNELS[2] => {
                params[layout.dense_w.clone()].copy_from_slice(w);
                params[layout.dense_b.clone()].copy_from_slice(b);
            }
            _ => return Err(mismatch()),
        }
        Ok(Self {
            params,
            running_mean,
            running_var,
        })
    }
}

/// Batch statistics observed by a training-mode forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: [Vec<f64>; 3],
    pub var: [Vec<f64>; 3],
}

/// Outcome of one training-mode pass over a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub loss: f64,
    /// Gradient with respect to the parameters the forward pass used.
    pub grads: Vec<f64>,
    pub correct: usize,
    pub stats: BatchStats,
}

struct BlockCache {
    input: Vec<f64>,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    bn_out: Vec<f64>,
    pool_idx: Vec<usize>,
    h: usize,
}

/// Stride-1, pad-1 3x3 cross-correlation over `[n, c_in, h, h]`.
fn conv3x3(
    x: &[f64],
    n: usize,
    c_in: usize,
    h: usize,
    w: &[f64],
    b: &[f64],
    c_out: usize,
) -> Vec<f64> {
    let plane = h * h;
    let mut out = vec![0.0; n * c_out * plane];
    for ni in 0..n {
        for co in 0..c_out {
            let o = &mut out[(ni * c_out + co) * plane..][..plane];
            o.fill(b[co]);
            for ci in 0..c_in {
                let xp = &x[(ni * c_in + ci) * plane..][..plane];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let wv = w[((co * c_in + ci) * 3 + ky) * 3 + kx];
                        let (x_lo, x_hi) = (1usize.saturating_sub(kx), (h + 1 - kx).min(h));
                        for oy in 1usize.saturating_sub(ky)..(h + 1 - ky).min(h) {
                            let iy = oy + ky - 1;
                            let orow = &mut o[oy * h + x_lo..oy * h + x_hi];
                            let xrow = &xp[iy * h + x_lo + kx - 1..iy * h + x_hi + kx - 1];
                            for (ov, xv) in orow.iter_mut().zip(xrow) {
                                *ov += wv * xv;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of [`conv3x3`] for weights, bias and (optionally) input.
fn conv3x3_backward(
    x: &[f64],
    dout: &[f64],
    n: usize,
    c_in: usize,
    h: usize,
    w: &[f64],
    c_out: usize,
    need_dx: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let plane = h * h;
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; c_out];
    let mut dx = if need_dx { vec![0.0; x.len()] } else { vec![] };
    for ni in 0..n {
        for co in 0..c_out {
            let d = &dout[(ni * c_out + co) * plane..][..plane];
            db[co] += d.iter().sum::<f64>();
            for ci in 0..c_in {
                let xoff = (ni * c_in + ci) * plane;
                for ky in 0..3 {
                    for kx in 0..3 {
                        let wi = ((co * c_in + ci) * 3 + ky) * 3 + kx;
                        let (x_lo, x_hi) = (1usize.saturating_sub(kx), (h + 1 - kx).min(h));
                        let mut acc = 0.0;
                        for oy in 1usize.saturating_sub(ky)..(h + 1 - ky).min(h) {
                            let iy = oy + ky - 1;
                            let drow = &d[oy * h + x_lo..oy * h + x_hi];
                            let xs = xoff + iy * h + x_lo + kx - 1;
                            let xrow = &x[xs..xs + drow.len()];
                            acc += drow.iter().zip(xrow).map(|(a, b)| a * b).sum::<f64>();
                            if need_dx {
                                let wv = w[wi];
                                for (dxv, dv) in dx[xs..xs + drow.len()].iter_mut().zip(drow) {
                                    *dxv += wv * dv;
                                }
                            }
                        }
                        dw[wi] += acc;
                    }
                }
            }
        }
    }
    (dw, db, dx)
}

fn maxpool_forward(x: &[f64], nc: usize, h: usize) -> (Vec<f64>, Vec<usize>) {
    let oh = h / 2;
    let mut out = Vec::with_capacity(nc * oh * oh);
    let mut idx = Vec::with_capacity(nc * oh * oh);
    for p in 0..nc {
        let base = p * h * h;
        for oy in 0..oh {
            for ox in 0..oh {
                let mut best = base + 2 * oy * h + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * h + 2 * ox + dx;
                    if x[i] > x[best] {
                        best = i;
                    }
                }
                out.push(x[best]);
                idx.push(best);
            }
        }
    }
    (out, idx)
}

/// Channel-wise BN. With `running` set the stored statistics are used;
/// otherwise batch statistics are computed and returned.
fn batch_norm(
    z: &[f64],
    n: usize,
    c: usize,
    plane: usize,
    gamma: &[f64],
    beta: &[f64],
    running: Option<(&[f64], &[f64])>,
) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let m = (n * plane) as f64;
    let (mean, var) = match running {
        Some((mean, var)) => (mean.to_vec(), var.to_vec()),
        None => {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ci in 0..c {
                let vals = || (0..n).flat_map(|ni| z[(ni * c + ci) * plane..][..plane].iter());
                let mu = vals().sum::<f64>() / m;
                mean[ci] = mu;
                var[ci] = vals().map(|v| (v - mu) * (v - mu)).sum::<f64>() / m;
            }
            (mean, var)
        }
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut xhat = vec![0.0; z.len()];
    let mut y = vec![0.0; z.len()];
    for (i, (&zv, (xh, yv))) in z.iter().zip(xhat.iter_mut().zip(y.iter_mut())).enumerate() {
        let ci = (i / plane) % c;
        *xh = (zv - mean[ci]) * inv_std[ci];
        *yv = gamma[ci] * *xh + beta[ci];
    }
    (y, xhat, inv_std, mean, var)
}

/// Forward pass with explicit parameters. Returns logits `[n, CLASSES]`
/// and, in training mode, caches and batch statistics.
fn forward_impl(
    params: &[f64],
    net: &ToyNet,
    x: &[f64],
    n: usize,
    train: bool,
) -> (Vec<f64>, Vec<BlockCache>, Vec<f64>, BatchStats) {
    let layout = Layout::new();
    let mut cur = x.to_vec();
    let mut h = INPUT_SIZE;
    let mut caches = Vec::with_capacity(3);
    let mut stats = BatchStats {
        mean: Default::default(),
        var: Default::default(),
    };
    for (i, s) in layout.conv.iter().enumerate() {
        let z = conv3x3(
            &cur,
            n,
            s.c_in,
            h,
            &params[s.w.clone()],
            &params[s.b.clone()],
            s.c_out,
        );
        let running = (!train).then(|| {
            (
                net.running_mean[i].as_slice(),
                net.running_var[i].as_slice(),
            )
        });
        let (bn_out, xhat, inv_std, mean, var) = batch_norm(
            &z,
            n,
            s.c_out,
            h * h,
            &params[s.gamma.clone()],
            &params[s.beta.clone()],
            running,
        );
        stats.mean[i] = mean;
        stats.var[i] = var;
        let act: Vec<f64> = bn_out.iter().map(|v| v.max(0.0)).collect();
        let input = std::mem::take(&mut cur);
        let (next, pool_idx) = if i < 2 {
            maxpool_forward(&act, n * s.c_out, h)
        } else {
            (act, vec![])
        };
        caches.push(BlockCache {
            input,
            xhat,
            inv_std,
            bn_out,
            pool_idx,
            h,
        });
        cur = next;
        if i < 2 {
            h /= 2;
        }
    }
    let c = CONV_CHANNELS[2];
    let plane = h * h;
    let pooled: Vec<f64> = cur
        .chunks(plane)
        .map(|p| p.iter().sum::<f64>() / plane as f64)
        .collect();
    let wd = &params[layout.dense_w.clone()];
    let bd = &params[layout.dense_b.clone()];
    let mut logits = vec![0.0; n * CLASSES];
    for ni in 0..n {
        let g = &pooled[ni * c..][..c];
        for k in 0..CLASSES {
            logits[ni * CLASSES + k] = bd[k]
                + wd[k * c..][..c]
                    .iter()
                    .zip(g)
                    .map(|(a, b)| a * b)
                    .sum::<f64>();
        }
    }
    (logits, caches, pooled, stats)
}

/// Inference-mode logits (running BN statistics), one row per sample.
pub fn forward_eval(params: &[f64], net: &ToyNet, x: &[f64], n: usize) -> Vec<Vec<f64>> {
    let (logits, ..) = forward_impl(params, net, x, n, false);
    logits.chunks(CLASSES).map(<[f64]>::to_vec).collect()
}

/// Mean softmax cross-entropy and its gradient with respect to `params`,
/// using batch statistics for BN.
pub fn loss_and_grad(
    params: &[f64],
    net: &ToyNet,
    x: &[f64],
    labels: &[usize],
) -> Result<StepResult, TrainError> {
    let n = labels.len();
    let layout = Layout::new();
    let (logits, caches, pooled, stats) = forward_impl(params, net, x, n, true);

    let mut loss = 0.0;
    let mut correct = 0;
    let mut dlogits = vec![0.0; n * CLASSES];
    for (ni, &label) in labels.iter().enumerate() {
        let row = &logits[ni * CLASSES..][..CLASSES];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        loss += sum.ln() + max - row[label];
        if crate::model::argmax(row) == label {
            correct += 1;
        }
        for k in 0..CLASSES {
            let p = (row[k] - max).exp() / sum;
            dlogits[ni * CLASSES + k] = (p - if k == label { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    loss /= n as f64;
    if !loss.is_finite() {
        return Err(TrainError::NonFiniteLoss);
    }

    let mut grads = vec![0.0; params.len()];
    let c = CONV_CHANNELS[2];
    let wd = &params[layout.dense_w.clone()];
    let mut dpooled = vec![0.0; n * c];
    for ni in 0..n {
        for k in 0..CLASSES {
            let d = dlogits[ni * CLASSES + k];
            grads[layout.dense_b.start + k] += d;
            for j in 0..c {
                grads[layout.dense_w.start + k * c + j] += d * pooled[ni * c + j];
                dpooled[ni * c + j] += d * wd[k * c + j];
            }
        }
    }

    let last = &caches[2];
    let plane = last.h * last.h;
    let mut dact: Vec<f64> = dpooled
        .iter()
        .flat_map(|&d| std::iter::repeat_n(d / plane as f64, plane))
        .collect();

    for i in (0..3).rev() {
        let s = &layout.conv[i];
        let cache = &caches[i];
        let plane = cache.h * cache.h;
        let mut dbn = vec![0.0; n * s.c_out * plane];
        if i < 2 {
            for (&d, &src) in dact.iter().zip(&cache.pool_idx) {
                dbn[src] += d;
            }
        } else {
            dbn = dact;
        }
        for (d, &y) in dbn.iter_mut().zip(&cache.bn_out) {
            if y <= 0.0 {
                *d = 0.0;
            }
        }
        let gamma = &params[s.gamma.clone()];
        let m = (n * plane) as f64;
        let mut dz = vec![0.0; dbn.len()];
        for ci in 0..s.c_out {
            let idx = || {
                (0..n).flat_map(move |ni| {
                    (ni * s.c_out + ci) * plane..(ni * s.c_out + ci + 1) * plane
                })
            };
            let mut sum_d = 0.0;
            let mut sum_dx = 0.0;
            for j in idx() {
                sum_d += dbn[j];
                sum_dx += dbn[j] * cache.xhat[j];
            }
            grads[s.gamma.start + ci] = sum_dx;
            grads[s.beta.start + ci] = sum_d;
            let k = gamma[ci] * cache.inv_std[ci] / m;
            for j in idx() {
                dz[j] = k * (m * dbn[j] - sum_d - cache.xhat[j] * sum_dx);
            }
        }
        let (dw, db, dx) = conv3x3_backward(
            &cache.input,
            &dz,
            n,
            s.c_in,
            cache.h,
            &params[s.w.clone()],
            s.c_out,
            i > 0,
        );
        grads[s.w.clone()].copy_from_slice(&dw);
        grads[s.b.clone()].copy_from_slice(&db);
        dact = dx;
    }

    Ok(StepResult {
        loss,
        grads,
        correct,
        stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::FloatTensor;

    #[test]
    fn layout_counts() {
        let l = Layout::new();
        assert_eq!(l.len, 72 + 24 + 1152 + 48 + 4608 + 96 + 256 + 8);
        assert_eq!(ToyNet::init(0).param_count(), l.len);
    }

    #[test]
    fn conv_matches_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let x: Vec<f64> = (0..2 * 3 * 36).map(|_| normal.sample(&mut rng)).collect();
        let w: Vec<f64> = (0..4 * 3 * 9).map(|_| normal.sample(&mut rng)).collect();
        let b = vec![0.5, -0.25, 0.0, 1.0];
        let ours = conv3x3(&x, 2, 3, 6, &w, &b, 4);
        let t = FloatTensor::new([2, 3, 6, 6], x).unwrap();
        let theirs = crate::kernels::conv2d_float(&t, &w, [4, 3, 3, 3], &b, 1, 1).unwrap();
        for (a, b) in ours.iter().zip(&theirs.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn eval_forward_matches_float_model() {
        let mut net = ToyNet::init(9);
        net.running_mean[1] = vec![0.1; 16];
        net.running_var[2] = vec![2.0; 32];
        let x: Vec<f64> = (0..2 * 1024)
            .map(|i| ((i as f64 * 0.37).sin() * 3.0).round().clamp(-1.0, 1.0))
            .collect();
        let ours = forward_eval(&net.params, &net, &x, 2);
        let fm = net.to_float_model(10_000);
        let t = FloatTensor::new([2, 1, 32, 32], x).unwrap();
        let theirs = fm.forward(&t).unwrap();
        for (a, b) in ours.concat().iter().zip(&theirs.data) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
        assert_eq!(ToyNet::from_float_model(&fm).unwrap(), net);
    }
}

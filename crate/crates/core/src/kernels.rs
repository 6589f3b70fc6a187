//! Tensors and convolution engines.
//!
//! Three convolutions share one loop nest: a double-precision reference, an
//! integer multiply-accumulate kernel and an integer shift-accumulate kernel
//! for power-of-two weights. All tensors are NCHW, row-major. Integer work
//! is split across output planes with rayon; results do not depend on the
//! split because integer addition is exact.
//!
//! Zero padding in the quantized domain means `x_q = z_x`, which contributes
//! nothing to `sum (x_q - z_x) * w`, so padded taps are skipped outright.

use std::ops::AddAssign;

use rayon::prelude::*;
use thiserror::Error;

use crate::fuse::{fxp_apply, fxp_apply_wide, fxp_encode, FixedPointMultiplier, FusedQuantLayer};
use crate::quantize::{AffineParams, PotTensor, QMAX, QMIN};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("accumulator overflow")]
    Overflow,
    #[error("integer weight {0} outside [-128, 128]")]
    WeightRange(i32),
    #[error("rescale factor {0} not representable")]
    BadRescale(f64),
}

/// Largest `k * k * C_in` whose sum always fits a 32-bit accumulator:
/// each term is at most `255 * 128 < 2^15`.
pub const I32_ACC_TERMS: usize = 1 << 16;

/// Shape `[N, C, H, W]`.
pub type Shape = [usize; 4];

fn numel(shape: Shape) -> usize {
    shape.iter().product()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FloatTensor {
    pub shape: Shape,
    pub data: Vec<f64>,
}

impl FloatTensor {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self, KernelError> {
        if numel(shape) != data.len() {
            return Err(KernelError::ShapeMismatch(format!(
                "{shape:?} vs {} values",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self {
            shape,
            data: vec![0.0; numel(shape)],
        }
    }

    pub fn quantize(&self, q: AffineParams) -> Int8Tensor {
        Int8Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| q.quantize(v)).collect(),
            q,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Int8Tensor {
    pub shape: Shape,
    pub data: Vec<i8>,
    pub q: AffineParams,
}

impl Int8Tensor {
    pub fn new(shape: Shape, data: Vec<i8>, q: AffineParams) -> Result<Self, KernelError> {
        if numel(shape) != data.len() {
            return Err(KernelError::ShapeMismatch(format!(
                "{shape:?} vs {} values",
                data.len()
            )));
        }
        Ok(Self { shape, data, q })
    }

    pub fn dequantize(&self) -> FloatTensor {
        FloatTensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| self.q.dequantize(v)).collect(),
        }
    }
}

/// 32-bit accumulators; one count is `s_x * unit_w` in real terms.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccTensor {
    pub shape: Shape,
    pub data: Vec<i32>,
}

/// Geometry of a 2D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn new(
        input: Shape,
        weights: Shape,
        stride: usize,
        pad: usize,
    ) -> Result<Self, KernelError> {
        let [n, c_in, h, w] = input;
        let [c_out, wc_in, kh, kw] = weights;
        if wc_in != c_in || kh != kw || kh == 0 || stride == 0 {
            return Err(KernelError::ShapeMismatch(format!(
                "input {input:?}, weights {weights:?}, stride {stride}"
            )));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(KernelError::ShapeMismatch(format!(
                "kernel {kh} larger than padded input {h}x{w}"
            )));
        }
        Ok(Self {
            n,
            c_in,
            h,
            w,
            c_out,
            k: kh,
            stride,
            pad,
        })
    }

    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_shape(&self) -> Shape {
        [self.n, self.c_out, self.out_h(), self.out_w()]
    }

    /// Number of terms summed per output element.
    pub fn terms(&self) -> usize {
        self.k * self.k * self.c_in
    }

    /// Multiply-accumulates (or shift-accumulates) for the whole layer.
    pub fn ops(&self) -> usize {
        self.n * self.c_out * self.out_h() * self.out_w() * self.terms()
    }
}

/// Shared loop nest. `term(x, w)` combines one input value with one weight.
///
/// For each output plane, each weight tap walks the valid part of the
/// output grid, so padded positions are never visited.
fn conv_driver<X, W, A, F>(input: &[X], weights: &[W], g: &ConvGeometry, term: F) -> Vec<A>
where
    X: Copy + Sync,
    W: Copy + Sync,
    A: Copy + Default + Send + AddAssign,
    F: Fn(X, W) -> A + Sync,
{
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    let mut out = vec![A::default(); g.n * g.c_out * plane];
    if plane == 0 {
        return out;
    }
    let kk = g.k * g.k;
    out.par_chunks_mut(plane)
        .enumerate()
        .for_each(|(idx, dst)| {
            let (b, co) = (idx / g.c_out, idx % g.c_out);
            for ci in 0..g.c_in {
                let src = &input[(b * g.c_in + ci) * g.h * g.w..][..g.h * g.w];
                let wrow = &weights[(co * g.c_in + ci) * kk..][..kk];
                for ky in 0..g.k {
                    for kx in 0..g.k {
                        let wv = wrow[ky * g.k + kx];
                        for oy in 0..oh {
                            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                            if iy < 0 || iy >= g.h as isize {
                                continue;
                            }
                            let srow = &src[iy as usize * g.w..][..g.w];
                            let drow = &mut dst[oy * ow..][..ow];
                            // valid ox: 0 <= ox*stride + kx - pad < w
                            let lo = (g.pad.saturating_sub(kx)).div_ceil(g.stride);
                            let hi_excl = if g.w + g.pad > kx {
                                ((g.w + g.pad - kx - 1) / g.stride + 1).min(ow)
                            } else {
                                0
                            };
                            if hi_excl <= lo {
                                continue;
                            }
                            if g.stride == 1 {
                                let off = lo + kx - g.pad;
                                for (d, &x) in drow[lo..hi_excl].iter_mut().zip(&srow[off..]) {
                                    *d += term(x, wv);
                                }
                            } else {
                                for ox in lo..hi_excl {
                                    let ix = ox * g.stride + kx - g.pad;
                                    drow[ox] += term(srow[ix], wv);
                                }
                            }
                        }
                    }
                }
            }
        });
    out
}

/// Double-precision cross-correlation with zero padding.
pub fn conv2d_float(
    x: &FloatTensor,
    w: &[f64],
    w_shape: Shape,
    b: &[f64],
    stride: usize,
    pad: usize,
) -> Result<FloatTensor, KernelError> {
    let g = ConvGeometry::new(x.shape, w_shape, stride, pad)?;
    if numel(w_shape) != w.len() || b.len() != g.c_out {
        return Err(KernelError::ShapeMismatch(format!(
            "weights {w_shape:?} with {} values, {} biases",
            w.len(),
            b.len()
        )));
    }
    let mut data = conv_driver(&x.data, w, &g, |xv: f64, wv: f64| xv * wv);
    let plane = g.out_h() * g.out_w();
    for (i, v) in data.iter_mut().enumerate() {
        *v += b[(i / plane) % g.c_out];
    }
    Ok(FloatTensor {
        shape: g.out_shape(),
        data,
    })
}

fn centered(x: &Int8Tensor, z_x: i8) -> Vec<i32> {
    x.data.iter().map(|&v| v as i32 - z_x as i32).collect()
}

fn narrow(acc: Vec<i64>) -> Result<Vec<i32>, KernelError> {
    acc.into_iter()
        .map(|v| i32::try_from(v).map_err(|_| KernelError::Overflow))
        .collect()
}

/// Integer multiply-accumulate: `acc = sum (x_q - z_x) * q_w`.
///
/// Accumulates in 32 bits when `k*k*C_in <= 2^16` (provably safe), and in
/// 64 bits otherwise, failing with `Overflow` if a result leaves `i32`.
pub fn conv2d_int_mac(
    x: &Int8Tensor,
    q_w: &[i32],
    w_shape: Shape,
    z_x: i8,
    stride: usize,
    pad: usize,
) -> Result<AccTensor, KernelError> {
    let g = ConvGeometry::new(x.shape, w_shape, stride, pad)?;
    if numel(w_shape) != q_w.len() {
        return Err(KernelError::ShapeMismatch(format!(
            "weights {w_shape:?} with {} values",
            q_w.len()
        )));
    }
    if let Some(&bad) = q_w.iter().find(|w| w.abs() > 128) {
        return Err(KernelError::WeightRange(bad));
    }
    let xc = centered(x, z_x);
    let data = if g.terms() <= I32_ACC_TERMS {
        conv_driver(&xc, q_w, &g, |xv: i32, wv: i32| xv * wv)
    } else {
        narrow(conv_driver(&xc, q_w, &g, |xv: i32, wv: i32| {
            (xv * wv) as i64
        }))?
    };
    Ok(AccTensor {
        shape: g.out_shape(),
        data,
    })
}

/// Shift-and-sign form of one PoT code, applied without multiplication.
#[derive(Debug, Clone, Copy)]
struct ShiftWeight {
    shift: u32,
    // 0 for positive, -1 for negative
    neg_mask: i32,
}

#[inline(always)]
fn shift_term(x: i32, w: ShiftWeight) -> i32 {
    ((x << w.shift) ^ w.neg_mask) - w.neg_mask
}

/// Integer shift-accumulate: `acc = sum sign * ((x_q - z_x) << (7 - e))`.
///
/// Bit-for-bit equal to [`conv2d_int_mac`] with weights `sign * 2^(7-e)`.
pub fn conv2d_int_bac(
    x: &Int8Tensor,
    pot: &PotTensor,
    z_x: i8,
    stride: usize,
    pad: usize,
) -> Result<AccTensor, KernelError> {
    let g = ConvGeometry::new(x.shape, pot.shape(), stride, pad)?;
    let ws: Vec<ShiftWeight> = pot
        .codes()
        .into_iter()
        .map(|c| ShiftWeight {
            shift: c.shift(),
            neg_mask: if c.is_negative() { -1 } else { 0 },
        })
        .collect();
    let xc = centered(x, z_x);
    let data = if g.terms() <= I32_ACC_TERMS {
        conv_driver(&xc, &ws, &g, shift_term)
    } else {
        narrow(conv_driver(&xc, &ws, &g, |xv: i32, wv: ShiftWeight| {
            shift_term(xv, wv) as i64
        }))?
    };
    Ok(AccTensor {
        shape: g.out_shape(),
        data,
    })
}

/// `y_q = clamp(fxp(acc, M_c) + bias_q_c + z_y, -128, 127)` per channel.
pub fn requantize(acc: &AccTensor, layer: &FusedQuantLayer) -> Result<Int8Tensor, KernelError> {
    let [_, c, h, w] = acc.shape;
    if c != layer.requant.len() || c != layer.bias_q.len() {
        return Err(KernelError::ShapeMismatch(format!(
            "{c} accumulator channels, {} multipliers",
            layer.requant.len()
        )));
    }
    let plane = h * w;
    let z = layer.out_q.zero_point as i64;
    let data = acc
        .data
        .iter()
        .enumerate()
        .map(|(i, &a)| {
            let ch = (i / plane.max(1)) % c;
            let v = fxp_apply(a, layer.requant[ch]) as i64 + layer.bias_q[ch] as i64 + z;
            v.clamp(QMIN as i64, QMAX as i64) as i8
        })
        .collect();
    Ok(Int8Tensor {
        shape: acc.shape,
        data,
        q: layer.out_q,
    })
}

/// Element-wise activation functions realised as lookup tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ActivationKind {
    Identity,
    Relu,
    Silu,
}

impl ActivationKind {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            ActivationKind::Identity => x,
            ActivationKind::Relu => x.max(0.0),
            ActivationKind::Silu => x / (1.0 + (-x).exp()),
        }
    }

    pub fn id(self) -> u8 {
        match self {
            ActivationKind::Identity => 0,
            ActivationKind::Relu => 1,
            ActivationKind::Silu => 2,
        }
    }

    pub fn from_id(id: u8) -> Option<Self> {
        match id {
            0 => Some(ActivationKind::Identity),
            1 => Some(ActivationKind::Relu),
            2 => Some(ActivationKind::Silu),
            _ => None,
        }
    }
}

/// 256-entry table indexed by `x_q + 128`.
pub fn build_lut(f: impl Fn(f64) -> f64, in_q: AffineParams, out_q: AffineParams) -> [i8; 256] {
    let mut table = [0i8; 256];
    for (i, slot) in table.iter_mut().enumerate() {
        let q = (i as i32 - 128) as i8;
        *slot = out_q.quantize(f(in_q.dequantize(q)));
    }
    table
}

pub fn activation_lut(x: &Int8Tensor, table: &[i8; 256], out_q: AffineParams) -> Int8Tensor {
    Int8Tensor {
        shape: x.shape,
        data: x
            .data
            .iter()
            .map(|&v| table[(v as i32 + 128) as usize])
            .collect(),
        q: out_q,
    }
}

/// 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
pub fn maxpool2<T: Copy + PartialOrd>(data: &[T], shape: Shape) -> (Vec<T>, Shape) {
    let [n, c, h, w] = shape;
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in data.chunks(h * w).take(n * c) {
        for oy in 0..oh {
            for ox in 0..ow {
                let at = |y: usize, x: usize| plane[(2 * oy + y) * w + 2 * ox + x];
                let mut m = at(0, 0);
                for v in [at(0, 1), at(1, 0), at(1, 1)] {
                    if v > m {
                        m = v;
                    }
                }
                out.push(m);
            }
        }
    }
    (out, [n, c, oh, ow])
}

pub fn maxpool2_int8(x: &Int8Tensor) -> Int8Tensor {
    let (data, shape) = maxpool2(&x.data, x.shape);
    Int8Tensor {
        shape,
        data,
        q: x.q,
    }
}

/// Fractional bits kept while summing the two rescaled addends.
const ADD_FRAC_BITS: u32 = 20;

/// Residual add: `y_q = clamp(round((DQ(a) + DQ(b)) / s_out) + z_out)` using
/// one fixed-point multiplier per input and a single final rounding.
pub fn add_requant(
    a: &Int8Tensor,
    b: &Int8Tensor,
    out_q: AffineParams,
) -> Result<Int8Tensor, KernelError> {
    if a.shape != b.shape {
        return Err(KernelError::ShapeMismatch(format!(
            "add of {:?} and {:?}",
            a.shape, b.shape
        )));
    }
    let enc = |s: f64| {
        let f = s / out_q.scale;
        fxp_encode(f).map_err(|_| KernelError::BadRescale(f))
    };
    let (ma, mb): (FixedPointMultiplier, FixedPointMultiplier) = (enc(a.q.scale)?, enc(b.q.scale)?);
    let (za, zb) = (a.q.zero_point as i64, b.q.zero_point as i64);
    let z = out_q.zero_point as i64;
    let half = 1i64 << (ADD_FRAC_BITS - 1);
    let data = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| {
            let ta = fxp_apply_wide((x as i64 - za) << ADD_FRAC_BITS, ma);
            let tb = fxp_apply_wide((y as i64 - zb) << ADD_FRAC_BITS, mb);
            let s = ta + tb;
            let r = if s >= 0 {
                (s + half) >> ADD_FRAC_BITS
            } else {
                -((-s + half) >> ADD_FRAC_BITS)
            };
            (r + z).clamp(QMIN as i64, QMAX as i64) as i8
        })
        .collect();
    Ok(Int8Tensor {
        shape: a.shape,
        data,
        q: out_q,
    })
}

/// Global average pool in the quantized domain, same quantization in and
/// out: `z + round_half_away(sum(x_q - z) / (H*W))`.
pub fn global_avg_pool_int8(x: &Int8Tensor) -> Int8Tensor {
    let [n, c, h, w] = x.shape;
    let d = (h * w) as i64;
    let z = x.q.zero_point as i64;
    let data = x
        .data
        .chunks(h * w)
        .take(n * c)
        .map(|plane| {
            let s: i64 = plane.iter().map(|&v| v as i64 - z).sum();
            let r = if s >= 0 {
                (2 * s + d) / (2 * d)
            } else {
                -((-2 * s + d) / (2 * d))
            };
            (r + z).clamp(QMIN as i64, QMAX as i64) as i8
        })
        .collect();
    Int8Tensor {
        shape: [n, c, 1, 1],
        data,
        q: x.q,
    }
}

pub fn global_avg_pool_float(x: &FloatTensor) -> FloatTensor {
    let [n, c, h, w] = x.shape;
    let data = x
        .data
        .chunks(h * w)
        .take(n * c)
        .map(|p| p.iter().sum::<f64>() / (h * w) as f64)
        .collect();
    FloatTensor {
        shape: [n, c, 1, 1],
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fuse::{BnParams, ConvWeights};
    use crate::quantize::PotCode;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn q(scale: f64, z: i8) -> AffineParams {
        AffineParams::new(scale, z).unwrap()
    }

    #[test]
    fn float_conv_examples() {
        let x = FloatTensor::new([1, 1, 1, 1], vec![2.0]).unwrap();
        let y = conv2d_float(&x, &[3.0], [1, 1, 1, 1], &[0.0], 1, 0).unwrap();
        assert_eq!(y.data, vec![6.0]);

        let x = FloatTensor::new([1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let y = conv2d_float(&x, &[1.0; 9], [1, 1, 3, 3], &[0.0], 1, 0).unwrap();
        assert_eq!((y.shape, y.data), ([1, 1, 1, 1], vec![9.0]));

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data: Vec<f64> = (0..2 * 3 * 5 * 4).map(|_| rng.gen()).collect();
        let x = FloatTensor::new([2, 3, 5, 4], data.clone()).unwrap();
        let mut eye = vec![0.0; 9];
        for c in 0..3 {
            eye[c * 3 + c] = 1.0;
        }
        let y = conv2d_float(&x, &eye, [3, 3, 1, 1], &[0.0; 3], 1, 0).unwrap();
        assert_eq!(y.data, data);
    }

    /// Direct six-loop convolution with explicit padding checks.
    fn naive_conv(
        x: &[f64],
        xs: Shape,
        w: &[f64],
        ws: Shape,
        stride: usize,
        pad: usize,
    ) -> Vec<f64> {
        let [n, ci, h, wd] = xs;
        let [co, _, k, _] = ws;
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let mut out = vec![0.0; n * co * oh * ow];
        for b in 0..n {
            for o in 0..co {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut s = 0.0;
                        for c in 0..ci {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (y * stride + ky) as isize - pad as isize;
                                    let ix = (xx * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd
                                    {
                                        s += x[((b * ci + c) * h + iy as usize) * wd + ix as usize]
                                            * w[((o * ci + c) * k + ky) * k + kx];
                                    }
                                }
                            }
                        }
                        out[((b * co + o) * oh + y) * ow + xx] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn driver_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let k = rng.gen_range(1..=4);
            let stride = rng.gen_range(1..=3);
            let pad = rng.gen_range(0..=2);
            let h = rng.gen_range(k.max(1)..9);
            let w = rng.gen_range(k.max(1)..9);
            let xs = [rng.gen_range(1..3), rng.gen_range(1..4), h, w];
            let ws = [rng.gen_range(1..4), xs[1], k, k];
            let x: Vec<f64> = (0..numel(xs)).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let wv: Vec<f64> = (0..numel(ws)).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let got = conv2d_float(
                &FloatTensor::new(xs, x.clone()).unwrap(),
                &wv,
                ws,
                &vec![0.0; ws[0]],
                stride,
                pad,
            )
            .unwrap();
            let want = naive_conv(&x, xs, &wv, ws, stride, pad);
            assert_eq!(got.data.len(), want.len());
            for (a, b) in got.data.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_term_mac_and_bac() {
        let x = Int8Tensor::new([1, 1, 1, 1], vec![5], q(1.0, 0)).unwrap();
        let acc = conv2d_int_mac(
            &x,
            &[PotCode::new(false, 3).int_weight()],
            [1, 1, 1, 1],
            0,
            1,
            0,
        )
        .unwrap();
        assert_eq!(acc.data, vec![80]);
        let pot = PotTensor::from_codes([1, 1, 1, 1], &[PotCode::new(true, 3)], 1.0).unwrap();
        assert_eq!(conv2d_int_bac(&x, &pot, 0, 1, 0).unwrap().data, vec![-80]);
        let pot = PotTensor::from_codes([1, 1, 1, 1], &[PotCode::new(true, 7)], 1.0).unwrap();
        assert_eq!(conv2d_int_bac(&x, &pot, 0, 1, 0).unwrap().data, vec![-5]);
    }

    #[test]
    fn zero_point_input_gives_zero_acc() {
        let x = Int8Tensor::new([1, 2, 4, 4], vec![-7; 32], q(0.1, -7)).unwrap();
        let pot = PotTensor::from_codes([3, 2, 3, 3], &[PotCode::new(false, 0); 54], 1.0).unwrap();
        assert!(conv2d_int_bac(&x, &pot, -7, 1, 1)
            .unwrap()
            .data
            .iter()
            .all(|&v| v == 0));
        assert!(
            conv2d_int_mac(&x, &pot.int_weights(), [3, 2, 3, 3], -7, 1, 1)
                .unwrap()
                .data
                .iter()
                .all(|&v| v == 0)
        );
    }

    #[test]
    fn mac_matches_scaled_float_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let xs = [
                1,
                rng.gen_range(1..5),
                rng.gen_range(3..8),
                rng.gen_range(3..8),
            ];
            let ws = [rng.gen_range(1..5), xs[1], 3, 3];
            let xq = q(rng.gen_range(0.01..0.1), rng.gen_range(-20..20));
            let x = Int8Tensor::new(xs, (0..numel(xs)).map(|_| rng.gen()).collect(), xq).unwrap();
            let codes: Vec<PotCode> = (0..numel(ws))
                .map(|_| PotCode::from_bits(rng.gen_range(0..16)))
                .collect();
            let s_w = rng.gen_range(0.1..2.0);
            let pot = PotTensor::from_codes(ws, &codes, s_w).unwrap();
            let acc = conv2d_int_mac(&x, &pot.int_weights(), ws, xq.zero_point, 1, 1).unwrap();
            let wf = crate::quantize::dequantize_pot(&pot);
            let yf = conv2d_float(&x.dequantize(), &wf, ws, &vec![0.0; ws[0]], 1, 1).unwrap();
            let unit = xq.scale * s_w / 128.0;
            for (a, f) in acc.data.iter().zip(&yf.data) {
                assert_eq!(*a as f64, (f / unit).round());
            }
        }
    }

    #[test]
    fn accumulator_bound_boundary() {
        // 2^16 maximal terms still fit 32 bits
        let c_in = I32_ACC_TERMS;
        let x = Int8Tensor::new([1, c_in, 1, 1], vec![127; c_in], q(1.0, -128)).unwrap();
        let w = vec![128; c_in];
        let acc = conv2d_int_mac(&x, &w, [1, c_in, 1, 1], -128, 1, 0).unwrap();
        assert_eq!(acc.data[0] as i64, 255 * 128 * c_in as i64);
        let pot = PotTensor::from_codes([1, c_in, 1, 1], &vec![PotCode::new(false, 0); c_in], 1.0)
            .unwrap();
        assert_eq!(conv2d_int_bac(&x, &pot, -128, 1, 0).unwrap(), acc);

        // beyond the bound the 64-bit path reports overflow
        let c_in = 70_000;
        let x = Int8Tensor::new([1, c_in, 1, 1], vec![127; c_in], q(1.0, -128)).unwrap();
        assert_eq!(
            conv2d_int_mac(&x, &vec![128; c_in], [1, c_in, 1, 1], -128, 1, 0),
            Err(KernelError::Overflow)
        );
        let pot = PotTensor::from_codes([1, c_in, 1, 1], &vec![PotCode::new(false, 0); c_in], 1.0)
            .unwrap();
        assert_eq!(
            conv2d_int_bac(&x, &pot, -128, 1, 0),
            Err(KernelError::Overflow)
        );

        // just past the bound but in range: 64-bit path, exact
        let c_in = I32_ACC_TERMS + 1;
        let x = Int8Tensor::new([1, c_in, 1, 1], vec![127; c_in], q(1.0, -128)).unwrap();
        let acc = conv2d_int_mac(&x, &vec![128; c_in], [1, c_in, 1, 1], -128, 1, 0).unwrap();
        assert_eq!(acc.data[0] as i64, 255 * 128 * c_in as i64);
    }

    #[test]
    fn weight_range_checked() {
        let x = Int8Tensor::new([1, 1, 1, 1], vec![1], q(1.0, 0)).unwrap();
        assert_eq!(
            conv2d_int_mac(&x, &[129], [1, 1, 1, 1], 0, 1, 0),
            Err(KernelError::WeightRange(129))
        );
    }

    fn unit_layer(requant: FixedPointMultiplier, bias_q: i32, z_y: i8) -> FusedQuantLayer {
        let pot = PotTensor::from_codes([1, 1, 1, 1], &[PotCode::new(false, 0)], 1.0).unwrap();
        let mut l = FusedQuantLayer::new(
            ConvWeights::Pot(pot),
            vec![1.0],
            vec![0.0],
            q(1.0, 0),
            q(1.0, z_y),
            1,
            0,
        )
        .unwrap();
        l.requant = vec![requant];
        l.bias_q = vec![bias_q];
        l
    }

    #[test]
    fn requantize_examples() {
        let eighth = fxp_encode(0.125).unwrap();
        let acc = AccTensor {
            shape: [1, 1, 1, 3],
            data: vec![64, 1 << 24, -(1 << 24)],
        };
        let y = requantize(&acc, &unit_layer(eighth, 0, 0)).unwrap();
        assert_eq!(y.data, vec![8, 127, -128]);
        let y = requantize(&acc, &unit_layer(FixedPointMultiplier::ZERO, 5, -3)).unwrap();
        assert_eq!(y.data, vec![2, 2, 2]);
    }

    #[test]
    fn lut_examples() {
        let p = q(0.05, 0);
        let t = build_lut(|x| x, p, p);
        for i in 0..256 {
            assert_eq!(t[i] as i32, i as i32 - 128);
        }
        let t = build_lut(|x| x.max(0.0), p, p);
        for i in 0..256 {
            assert_eq!(t[i] as i32, (i as i32 - 128).max(0));
        }
        let (pin, pout) = (q(0.04, -10), q(0.03, -100));
        let t = build_lut(|x| ActivationKind::Silu.apply(x), pin, pout);
        for i in 0..256usize {
            let xr = 0.04 * ((i as f64 - 128.0) + 10.0);
            let yr = xr / (1.0 + (-xr).exp());
            let want = ((yr / 0.03).round() - 100.0).clamp(-128.0, 127.0) as i8;
            assert_eq!(t[i], want);
        }
        let x = Int8Tensor::new([1, 1, 1, 2], vec![-128, 127], pin).unwrap();
        let y = activation_lut(&x, &t, pout);
        assert_eq!(y.data, vec![t[0], t[255]]);
    }

    #[test]
    fn pooling() {
        let x = Int8Tensor::new([1, 1, 2, 2], vec![1, 2, 3, 4], q(1.0, 0)).unwrap();
        assert_eq!(maxpool2_int8(&x).data, vec![4]);
        let x = Int8Tensor::new([1, 1, 3, 3], (0..9).collect(), q(1.0, 0)).unwrap();
        let y = maxpool2_int8(&x);
        assert_eq!((y.shape, y.data), ([1, 1, 1, 1], vec![4]));

        let x = Int8Tensor::new([1, 2, 1, 2], vec![3, 4, -3, -4], q(0.5, 1)).unwrap();
        // (2+3)/2 = 2.5 -> 3 ; (-4-5)/2 = -4.5 -> -5
        assert_eq!(global_avg_pool_int8(&x).data, vec![4, -4]);
    }

    #[test]
    fn add_examples() {
        let p = q(0.1, 3);
        let x = Int8Tensor::new([1, 1, 2, 2], vec![-128, 0, 50, 127], p).unwrap();
        let zeros = Int8Tensor::new([1, 1, 2, 2], vec![3; 4], p).unwrap();
        let y = add_requant(&x, &zeros, p).unwrap();
        for (a, b) in y.data.iter().zip(&x.data) {
            assert!((*a as i32 - *b as i32).abs() <= 1);
        }
        let other = Int8Tensor::new([1, 1, 1, 4], vec![0; 4], p).unwrap();
        assert!(add_requant(&x, &other, p).is_err());
    }

    #[test]
    fn add_matches_double_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..200 {
            let qa = q(rng.gen_range(0.01..0.2), rng.gen_range(-30..30));
            let qb = q(rng.gen_range(0.01..0.2), rng.gen_range(-30..30));
            let qo = q(rng.gen_range(0.02..0.3), rng.gen_range(-30..30));
            let a =
                Int8Tensor::new([1, 1, 4, 4], (0..16).map(|_| rng.gen()).collect(), qa).unwrap();
            let b =
                Int8Tensor::new([1, 1, 4, 4], (0..16).map(|_| rng.gen()).collect(), qb).unwrap();
            let y = add_requant(&a, &b, qo).unwrap();
            for i in 0..16 {
                let want = qo.quantize(qa.dequantize(a.data[i]) + qb.dequantize(b.data[i]));
                assert!((y.data[i] as i32 - want as i32).abs() <= 1);
            }
        }
    }

    #[test]
    fn bac_equals_mac_with_bn_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ws = [4, 3, 3, 3];
        let codes: Vec<PotCode> = (0..108)
            .map(|_| PotCode::from_bits(rng.gen_range(0..16)))
            .collect();
        let pot = PotTensor::from_codes(ws, &codes, 0.7).unwrap();
        let xq = q(0.02, 5);
        let x = Int8Tensor::new([2, 3, 6, 6], (0..216).map(|_| rng.gen()).collect(), xq).unwrap();
        let layer = crate::fuse::fuse_conv_bn_pot(
            pot.clone(),
            &[0.1, 0.2, -0.3, 0.0],
            &BnParams::identity(4),
            xq,
            q(0.05, -2),
            2,
            1,
        )
        .unwrap();
        let bac = conv2d_int_bac(&x, &pot, xq.zero_point, 2, 1).unwrap();
        let mac = conv2d_int_mac(&x, &pot.int_weights(), ws, xq.zero_point, 2, 1).unwrap();
        assert_eq!(bac, mac);
        assert_eq!(
            requantize(&bac, &layer).unwrap(),
            requantize(&mac, &layer).unwrap()
        );
    }
}

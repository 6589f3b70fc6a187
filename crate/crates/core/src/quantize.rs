//! Weight and activation quantizers.
//!
//! Activations use 8-bit affine quantization `x ~ s * (q - z)` with
//! parameters taken from calibration data. Convolution weights use a 4-bit
//! power-of-two code: one sign bit (bit 3) and a 3-bit exponent `e`
//! (bits 0..3) decoding to `sign * s_w * 2^-e`, with one scale `s_w` per
//! layer. There is no zero code; the smallest magnitude is `s_w / 128`.
//!
//! All rounding is half away from zero (`f64::round`).

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuantError {
    #[error("calibration set is empty")]
    EmptyCalibrationSet,
    #[error("percentile {0} outside (50, 100]")]
    BadPercentile(f64),
    #[error("scale must be positive and finite, got {0}")]
    BadScale(f64),
    #[error("shape {shape:?} does not hold {len} values")]
    ShapeMismatch { shape: [usize; 4], len: usize },
}

pub const QMIN: i32 = -128;
pub const QMAX: i32 = 127;

/// Scale and zero point of an 8-bit affine quantizer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineParams {
    pub scale: f64,
    pub zero_point: i8,
}

impl AffineParams {
    pub fn new(scale: f64, zero_point: i8) -> Result<Self, QuantError> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(QuantError::BadScale(scale));
        }
        Ok(Self { scale, zero_point })
    }

    /// Unit scale, zero offset. Placeholder for float-activation models.
    pub const fn identity() -> Self {
        Self {
            scale: 1.0,
            zero_point: 0,
        }
    }

    pub fn quantize(&self, x: f64) -> i8 {
        let q = (x / self.scale).round() + self.zero_point as f64;
        q.clamp(QMIN as f64, QMAX as f64) as i8
    }

    pub fn dequantize(&self, q: i8) -> f64 {
        self.scale * (q as i32 - self.zero_point as i32) as f64
    }

    /// Real interval covered by the 256 codes.
    pub fn range(&self) -> (f64, f64) {
        (self.dequantize(i8::MIN), self.dequantize(i8::MAX))
    }
}

pub fn quantize_affine(x: &[f64], q: &AffineParams) -> Vec<i8> {
    x.iter().map(|&v| q.quantize(v)).collect()
}

pub fn dequantize_affine(x: &[i8], q: &AffineParams) -> Vec<f64> {
    x.iter().map(|&v| q.dequantize(v)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CalibrationMode {
    MinMax,
    /// Clip to the `(100 - p)` and `p` percentiles of the pooled values.
    Percentile(f64),
}

/// Running calibration statistics. Shards can be merged in any order.
#[derive(Debug, Clone, Default)]
pub struct CalibrationStats {
    count: usize,
    min: f64,
    max: f64,
    // kept only for percentile mode
    values: Option<Vec<f64>>,
}

impl CalibrationStats {
    pub fn new(mode: CalibrationMode) -> Self {
        Self {
            count: 0,
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
            values: matches!(mode, CalibrationMode::Percentile(_)).then(Vec::new),
        }
    }

    pub fn observe(&mut self, sample: &[f64]) {
        for &v in sample {
            self.min = self.min.min(v);
            self.max = self.max.max(v);
        }
        self.count += sample.len();
        if let Some(values) = &mut self.values {
            values.extend_from_slice(sample);
        }
    }

    pub fn merge(&mut self, other: CalibrationStats) {
        self.count += other.count;
        self.min = self.min.min(other.min);
        self.max = self.max.max(other.max);
        match (&mut self.values, other.values) {
            (Some(a), Some(b)) => a.extend(b),
            (None, Some(b)) => self.values = Some(b),
            _ => {}
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn finish(self, mode: CalibrationMode) -> Result<AffineParams, QuantError> {
        if self.count == 0 {
            return Err(QuantError::EmptyCalibrationSet);
        }
        let (lo, hi) = match mode {
            CalibrationMode::MinMax => (self.min, self.max),
            CalibrationMode::Percentile(p) => {
                if !(p > 50.0 && p <= 100.0) {
                    return Err(QuantError::BadPercentile(p));
                }
                let mut values = self.values.unwrap_or_default();
                values.sort_by(f64::total_cmp);
                (
                    percentile_sorted(&values, 100.0 - p),
                    percentile_sorted(&values, p),
                )
            }
        };
        Ok(affine_from_range(lo, hi))
    }
}

/// Linear interpolation between order statistics at rank `q/100 * (n-1)`.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let rank = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Affine parameters mapping `[lo, hi]` onto the int8 codes.
///
/// The interval is widened to contain 0 so that real zero has an exact code.
/// A zero-width interval falls back to `s = 1`.
pub fn affine_from_range(lo: f64, hi: f64) -> AffineParams {
    let lo = lo.min(0.0);
    let hi = hi.max(0.0);
    if hi - lo <= 0.0 {
        let z = (-lo).round().clamp(QMIN as f64, QMAX as f64) as i8;
        return AffineParams {
            scale: 1.0,
            zero_point: z,
        };
    }
    let scale = (hi - lo) / 255.0;
    let z = (-128.0 - lo / scale)
        .round()
        .clamp(QMIN as f64, QMAX as f64) as i8;
    AffineParams {
        scale,
        zero_point: z,
    }
}

pub fn calibrate_affine<'a, I>(
    samples: I,
    mode: CalibrationMode,
) -> Result<AffineParams, QuantError>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut stats = CalibrationStats::new(mode);
    for s in samples {
        stats.observe(s);
    }
    stats.finish(mode)
}

/// One 4-bit power-of-two weight code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PotCode(u8);

impl PotCode {
    pub const MAX_EXP: u8 = 7;
    const SIGN_BIT: u8 = 0b1000;

    pub fn new(negative: bool, exp: u8) -> Self {
        assert!(exp <= Self::MAX_EXP);
        Self(if negative { Self::SIGN_BIT | exp } else { exp })
    }

    pub fn from_bits(bits: u8) -> Self {
        Self(bits & 0x0f)
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn is_negative(self) -> bool {
        self.0 & Self::SIGN_BIT != 0
    }

    pub fn exp(self) -> u8 {
        self.0 & 0b0111
    }

    /// `sign * 2^-e`.
    pub fn value(self) -> f64 {
        let m = (-(self.exp() as f64)).exp2();
        if self.is_negative() {
            -m
        } else {
            m
        }
    }

    /// Integer weight `sign * 2^(7 - e)`, the value in units of `2^-7`.
    pub fn int_weight(self) -> i32 {
        let m = 1i32 << (Self::MAX_EXP - self.exp());
        if self.is_negative() {
            -m
        } else {
            m
        }
    }

    /// Left shift applied to an activation in the shift-accumulate kernel.
    pub fn shift(self) -> u32 {
        (Self::MAX_EXP - self.exp()) as u32
    }

    pub fn quantize(w: f64, s_w: f64) -> Self {
        let floor = s_w * (-10.0f64).exp2();
        let mag = w.abs().max(floor);
        let e = (-(mag / s_w).log2())
            .round()
            .clamp(0.0, Self::MAX_EXP as f64) as u8;
        Self::new(w < 0.0, e)
    }
}

/// Two codes per byte, the even index in the low nibble. An odd count leaves
/// the high nibble of the last byte zero.
pub fn pack_nibbles(codes: &[u8]) -> Vec<u8> {
    codes
        .chunks(2)
        .map(|pair| (pair[0] & 0x0f) | pair.get(1).map_or(0, |hi| (hi & 0x0f) << 4))
        .collect()
}

pub fn unpack_nibbles(bytes: &[u8], n: usize) -> Vec<u8> {
    (0..n)
        .map(|i| {
            let b = bytes[i / 2];
            if i % 2 == 0 {
                b & 0x0f
            } else {
                b >> 4
            }
        })
        .collect()
}

/// Layer-wise PoT scale: `max |w|`, or 1 for an all-zero layer.
pub fn pot_scale(w: &[f64]) -> f64 {
    let m = w.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

/// Nibble-packed PoT weights of shape `(C_out, C_in, k, k)` plus the layer scale.
#[derive(Debug, Clone, PartialEq)]
pub struct PotTensor {
    shape: [usize; 4],
    packed: Vec<u8>,
    scale: f64,
}

impl PotTensor {
    pub fn from_codes(
        shape: [usize; 4],
        codes: &[PotCode],
        scale: f64,
    ) -> Result<Self, QuantError> {
        check_shape(shape, codes.len())?;
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(QuantError::BadScale(scale));
        }
        let bits: Vec<u8> = codes.iter().map(|c| c.bits()).collect();
        Ok(Self {
            shape,
            packed: pack_nibbles(&bits),
            scale,
        })
    }

    pub fn from_packed(shape: [usize; 4], packed: Vec<u8>, scale: f64) -> Result<Self, QuantError> {
        let n = shape.iter().product::<usize>();
        if packed.len() != n.div_ceil(2) {
            return Err(QuantError::ShapeMismatch {
                shape,
                len: packed.len() * 2,
            });
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(QuantError::BadScale(scale));
        }
        Ok(Self {
            shape,
            packed,
            scale,
        })
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn packed(&self) -> &[u8] {
        &self.packed
    }

    pub fn codes(&self) -> Vec<PotCode> {
        unpack_nibbles(&self.packed, self.len())
            .into_iter()
            .map(PotCode::from_bits)
            .collect()
    }

    pub fn code(&self, i: usize) -> PotCode {
        let b = self.packed[i / 2];
        PotCode::from_bits(if i.is_multiple_of(2) { b } else { b >> 4 })
    }

    pub fn int_weights(&self) -> Vec<i32> {
        self.codes().into_iter().map(PotCode::int_weight).collect()
    }
}

fn check_shape(shape: [usize; 4], len: usize) -> Result<(), QuantError> {
    if shape.iter().product::<usize>() != len {
        return Err(QuantError::ShapeMismatch { shape, len });
    }
    Ok(())
}

pub fn quantize_pot(w: &[f64], shape: [usize; 4], s_w: f64) -> Result<PotTensor, QuantError> {
    let codes: Vec<PotCode> = w.iter().map(|&v| PotCode::quantize(v, s_w)).collect();
    PotTensor::from_codes(shape, &codes, s_w)
}

pub fn dequantize_pot(t: &PotTensor) -> Vec<f64> {
    t.codes().into_iter().map(|c| c.value() * t.scale).collect()
}

/// Round-trips weights through the PoT codebook with a layer-wise scale.
pub fn fake_quant_pot(w: &[f64]) -> Vec<f64> {
    let s = pot_scale(w);
    w.iter()
        .map(|&v| PotCode::quantize(v, s).value() * s)
        .collect()
}

/// Symmetric uniform integer weights `q * step` with `|q| <= 2^(bits-1) - 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct UniformTensor {
    pub shape: [usize; 4],
    pub values: Vec<i8>,
    pub step: f64,
    pub bits: u8,
}

impl UniformTensor {
    pub fn dequantize(&self) -> Vec<f64> {
        self.values.iter().map(|&q| q as f64 * self.step).collect()
    }
}

pub fn quantize_uniform(
    w: &[f64],
    shape: [usize; 4],
    s_w: f64,
    bits: u8,
) -> Result<UniformTensor, QuantError> {
    check_shape(shape, w.len())?;
    if !(s_w > 0.0 && s_w.is_finite()) {
        return Err(QuantError::BadScale(s_w));
    }
    let qmax = ((1i32 << (bits - 1)) - 1) as f64;
    let values = w
        .iter()
        .map(|&v| (v * qmax / s_w).round().clamp(-qmax, qmax) as i8)
        .collect();
    Ok(UniformTensor {
        shape,
        values,
        step: s_w / qmax,
        bits,
    })
}

/// Uniform symmetric INT4: `q = clamp(round(7 w / s_w), -7, 7)`.
pub fn quantize_uniform_int4(
    w: &[f64],
    shape: [usize; 4],
    s_w: f64,
) -> Result<UniformTensor, QuantError> {
    quantize_uniform(w, shape, s_w, 4)
}

pub fn fake_quant_uniform(w: &[f64], bits: u8) -> Vec<f64> {
    let s = pot_scale(w);
    let qmax = ((1i32 << (bits - 1)) - 1) as f64;
    w.iter()
        .map(|&v| (v * qmax / s).round().clamp(-qmax, qmax) * s / qmax)
        .collect()
}

/// Straight-through estimator with clipping: gradients pass where
/// `lo <= x <= hi` and vanish elsewhere.
pub fn ste_backward(grad_out: &[f64], x: &[f64], lo: f64, hi: f64) -> Vec<f64> {
    assert!(lo < hi);
    grad_out
        .iter()
        .zip(x)
        .map(|(&g, &v)| if (lo..=hi).contains(&v) { g } else { 0.0 })
        .collect()
}

//! Conv + batch-norm fusion.
//!
//! Two routes are provided. [`fuse_conv_bn_float`] folds the BN affine map
//! into float weights and bias. [`fuse_conv_bn_pot`] leaves the
//! power-of-two weight codes untouched and moves the per-channel BN gain
//! into the requantization multiplier, giving one fixed-point multiplier
//! per output channel:
//!
//! ```text
//! y_q[c] = clamp(fxp(acc[c], M_c) + round(B_c / s_y) + z_y)
//! M_c    = (gamma_c / phi_c) * s_x * s_w * 2^-7 / s_y
//! B_c    = beta_c + gamma_c * (b_c - mu_c) / phi_c
//! phi_c  = sqrt(var_c + eps)
//! ```
//!
//! `acc[c]` is the shift-accumulate sum `sum sign * ((x_q - z_x) << (7 - e))`,
//! so the `2^-7` that turns the left shift into the weight value lives in
//! `M_c`.

use thiserror::Error;

use crate::quantize::{AffineParams, PotTensor, UniformTensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FuseError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("multiplier {0} outside the fixed-point range")]
    OutOfRange(f64),
    #[error("bias {value} of channel {channel} does not fit in 32 bits")]
    BiasOverflow { channel: usize, value: f64 },
}

/// Per-channel batch-norm statistics and affine parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct BnParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub eps: f64,
}

pub const BN_EPS: f64 = 1e-5;

impl BnParams {
    /// BN that maps every channel through unchanged (`var = 1 - eps`).
    pub fn identity(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            mean: vec![0.0; channels],
            var: vec![1.0 - BN_EPS; channels],
            eps: BN_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn phi(&self, c: usize) -> f64 {
        (self.var[c] + self.eps).sqrt()
    }

    /// `gamma / phi` for channel `c`.
    pub fn gain(&self, c: usize) -> f64 {
        self.gamma[c] / self.phi(c)
    }

    /// Folded bias `beta + gamma (b - mu) / phi`.
    pub fn folded_bias(&self, c: usize, b: f64) -> f64 {
        self.beta[c] + self.gain(c) * (b - self.mean[c])
    }

    pub fn apply(&self, c: usize, y: f64) -> f64 {
        self.gain(c) * (y - self.mean[c]) + self.beta[c]
    }

    fn check(&self, channels: usize) -> Result<(), FuseError> {
        let n = self.gamma.len();
        if n != channels || self.beta.len() != n || self.mean.len() != n || self.var.len() != n {
            return Err(FuseError::ShapeMismatch(format!(
                "BN has {n} channels, conv has {channels}"
            )));
        }
        Ok(())
    }
}

/// Folds BN into float conv weights (`C_out` leading) and bias.
pub fn fuse_conv_bn_float(
    w: &[f64],
    b: &[f64],
    bn: &BnParams,
) -> Result<(Vec<f64>, Vec<f64>), FuseError> {
    let c_out = b.len();
    bn.check(c_out)?;
    if c_out == 0 || !w.len().is_multiple_of(c_out) {
        return Err(FuseError::ShapeMismatch(format!(
            "{} weights for {c_out} output channels",
            w.len()
        )));
    }
    let per = w.len() / c_out;
    let mut wf = Vec::with_capacity(w.len());
    for (c, row) in w.chunks(per).enumerate() {
        let g = bn.gain(c);
        wf.extend(row.iter().map(|v| g * v));
    }
    let bf = b
        .iter()
        .enumerate()
        .map(|(c, &bc)| bn.folded_bias(c, bc))
        .collect();
    Ok((wf, bf))
}

/// Integer multiplier `m / 2^shift` approximating a real factor.
///
/// For nonzero factors with `|M| >= 2^-32`, `2^30 <= |m| < 2^31`. Smaller
/// factors use the maximal shift of 62 and lose normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct FixedPointMultiplier {
    pub m: i32,
    pub shift: u8,
}

pub const MAX_SHIFT: u8 = 62;

impl FixedPointMultiplier {
    pub const ZERO: Self = Self { m: 0, shift: 0 };

    pub fn to_f64(self) -> f64 {
        self.m as f64 * (-(self.shift as f64)).exp2()
    }

    pub fn is_zero(self) -> bool {
        self.m == 0
    }
}

pub fn fxp_encode(factor: f64) -> Result<FixedPointMultiplier, FuseError> {
    if !factor.is_finite() || factor.abs() >= 2f64.powi(31) {
        return Err(FuseError::OutOfRange(factor));
    }
    if factor == 0.0 {
        return Ok(FixedPointMultiplier::ZERO);
    }
    let mut shift = 30 - factor.abs().log2().floor() as i32;
    // log2 can land one off near powers of two
    loop {
        let m = (factor * 2f64.powi(shift)).round().abs();
        if m >= 2f64.powi(31) {
            shift -= 1;
        } else if m < 2f64.powi(30) && shift < MAX_SHIFT as i32 {
            shift += 1;
        } else {
            break;
        }
    }
    let shift = shift.min(MAX_SHIFT as i32);
    if shift < 0 {
        return Err(FuseError::OutOfRange(factor));
    }
    let m = (factor * 2f64.powi(shift)).round() as i64;
    if m == 0 {
        return Ok(FixedPointMultiplier::ZERO);
    }
    Ok(FixedPointMultiplier {
        m: m as i32,
        shift: shift as u8,
    })
}

/// `round_half_away(value * m / 2^shift)` in 128-bit arithmetic.
pub fn fxp_apply_wide(value: i64, fm: FixedPointMultiplier) -> i64 {
    let p = value as i128 * fm.m as i128;
    if fm.shift == 0 {
        return p as i64;
    }
    let half = 1i128 << (fm.shift - 1);
    let r = if p >= 0 {
        (p + half) >> fm.shift
    } else {
        -((-p + half) >> fm.shift)
    };
    r as i64
}

/// Applies the multiplier to a 32-bit accumulator, saturating to `i32`.
pub fn fxp_apply(acc: i32, fm: FixedPointMultiplier) -> i32 {
    fxp_apply_wide(acc as i64, fm).clamp(i32::MIN as i64, i32::MAX as i64) as i32
}

/// Integer weights of a quantized conv layer.
#[derive(Debug, Clone, PartialEq)]
pub enum ConvWeights {
    Pot(PotTensor),
    Uniform(UniformTensor),
}

impl ConvWeights {
    pub fn shape(&self) -> [usize; 4] {
        match self {
            ConvWeights::Pot(t) => t.shape(),
            ConvWeights::Uniform(t) => t.shape,
        }
    }

    /// Real value of one accumulator count.
    pub fn unit(&self) -> f64 {
        match self {
            ConvWeights::Pot(t) => t.scale() / 128.0,
            ConvWeights::Uniform(t) => t.step,
        }
    }

    /// Integer weights in accumulator units.
    pub fn int_weights(&self) -> Vec<i32> {
        match self {
            ConvWeights::Pot(t) => t.int_weights(),
            ConvWeights::Uniform(t) => t.values.iter().map(|&v| v as i32).collect(),
        }
    }

    pub fn dequantize(&self) -> Vec<f64> {
        let unit = self.unit();
        self.int_weights()
            .into_iter()
            .map(|q| q as f64 * unit)
            .collect()
    }
}

/// A quantized conv (or dense) layer ready for integer execution.
///
/// `gain` and `bias` keep the real per-channel BN factor and folded bias so
/// the float reference path can run without the fixed-point rounding.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedQuantLayer {
    pub weights: ConvWeights,
    pub stride: usize,
    pub pad: usize,
    pub in_q: AffineParams,
    pub out_q: AffineParams,
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
    pub requant: Vec<FixedPointMultiplier>,
    pub bias_q: Vec<i32>,
}

impl FusedQuantLayer {
    /// Derives the integer requantization data from real per-channel gain
    /// and bias.
    pub fn new(
        weights: ConvWeights,
        gain: Vec<f64>,
        bias: Vec<f64>,
        in_q: AffineParams,
        out_q: AffineParams,
        stride: usize,
        pad: usize,
    ) -> Result<Self, FuseError> {
        let c_out = weights.shape()[0];
        if gain.len() != c_out || bias.len() != c_out {
            return Err(FuseError::ShapeMismatch(format!(
                "{} gains / {} biases for {c_out} channels",
                gain.len(),
                bias.len()
            )));
        }
        let unit = weights.unit();
        let requant = gain
            .iter()
            .map(|g| fxp_encode(g * in_q.scale * unit / out_q.scale))
            .collect::<Result<Vec<_>, _>>()?;
        let bias_q = bias
            .iter()
            .enumerate()
            .map(|(channel, b)| {
                let v = (b / out_q.scale).round();
                if v.abs() > i32::MAX as f64 {
                    Err(FuseError::BiasOverflow { channel, value: v })
                } else {
                    Ok(v as i32)
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            weights,
            stride,
            pad,
            in_q,
            out_q,
            gain,
            bias,
            requant,
            bias_q,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weights.shape()[2]
    }

    /// Effective float weights `gain_c * w` and bias, i.e. the float fusion
    /// of the dequantized layer.
    pub fn effective_float(&self) -> (Vec<f64>, Vec<f64>) {
        let w = self.weights.dequantize();
        let per = w.len() / self.out_channels();
        let wf = w
            .chunks(per)
            .zip(&self.gain)
            .flat_map(|(row, g)| row.iter().map(move |v| g * v))
            .collect();
        (wf, self.bias.clone())
    }
}

/// PoT-preserving fusion: weight codes are kept as-is and the BN gain moves
/// into the per-channel requantization multiplier.
pub fn fuse_conv_bn_pot(
    weights: PotTensor,
    b: &[f64],
    bn: &BnParams,
    in_q: AffineParams,
    out_q: AffineParams,
    stride: usize,
    pad: usize,
) -> Result<FusedQuantLayer, FuseError> {
    let c_out = weights.shape()[0];
    if b.len() != c_out {
        return Err(FuseError::ShapeMismatch(format!(
            "{} biases for {c_out} channels",
            b.len()
        )));
    }
    bn.check(c_out)?;
    let gain = (0..c_out).map(|c| bn.gain(c)).collect();
    let bias = (0..c_out).map(|c| bn.folded_bias(c, b[c])).collect();
    FusedQuantLayer::new(
        ConvWeights::Pot(weights),
        gain,
        bias,
        in_q,
        out_q,
        stride,
        pad,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantize::{quantize_pot, PotCode};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_bn_is_a_no_op() {
        let w = vec![0.5, -1.0, 2.0, 0.25];
        let b = vec![0.1, -0.2];
        let (wf, bf) = fuse_conv_bn_float(&w, &b, &BnParams::identity(2)).unwrap();
        for (x, y) in wf.iter().zip(&w) {
            assert!((x - y).abs() < 1e-15);
        }
        for (x, y) in bf.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn substituted_bn() {
        // gamma=2, beta=1, mu=3, phi=2: weights unchanged, bias becomes b - 2
        let bn = BnParams {
            gamma: vec![2.0],
            beta: vec![1.0],
            mean: vec![3.0],
            var: vec![4.0 - BN_EPS],
            eps: BN_EPS,
        };
        let (wf, bf) = fuse_conv_bn_float(&[0.7, -0.3], &[5.0], &bn).unwrap();
        assert!((wf[0] - 0.7).abs() < 1e-12 && (wf[1] + 0.3).abs() < 1e-12);
        assert!((bf[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn shape_errors() {
        assert!(matches!(
            fuse_conv_bn_float(&[1.0; 4], &[0.0; 2], &BnParams::identity(3)),
            Err(FuseError::ShapeMismatch(_))
        ));
        assert!(matches!(
            fuse_conv_bn_float(&[1.0; 5], &[0.0; 2], &BnParams::identity(2)),
            Err(FuseError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn fxp_examples() {
        assert_eq!(
            fxp_encode(0.125).unwrap(),
            FixedPointMultiplier {
                m: 1 << 30,
                shift: 33
            }
        );
        assert_eq!(
            fxp_encode(-0.125).unwrap(),
            FixedPointMultiplier {
                m: -(1 << 30),
                shift: 33
            }
        );
        assert_eq!(
            fxp_encode(1.0).unwrap(),
            FixedPointMultiplier {
                m: 1 << 30,
                shift: 30
            }
        );
        assert_eq!(fxp_encode(0.0).unwrap(), FixedPointMultiplier::ZERO);
        assert!(fxp_encode(2f64.powi(31)).is_err());
        assert!(fxp_encode(f64::NAN).is_err());

        let fm = fxp_encode(0.125).unwrap();
        assert_eq!(fxp_apply(64, fm), 8);
        assert_eq!(fxp_apply(0, fm), 0);
        assert_eq!(fxp_apply(-12, fm), -2); // -1.5 rounds away from zero
        assert_eq!(fxp_apply(12, fm), 2);
    }

    #[test]
    fn fxp_normalization_and_precision() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20_000 {
            let e: f64 = rng.gen_range(-30.0..30.0);
            let sign = if rng.gen::<bool>() { -1.0 } else { 1.0 };
            let factor = sign * e.exp2() * rng.gen_range(1.0..2.0);
            if factor.abs() >= 2f64.powi(30) {
                continue;
            }
            let fm = fxp_encode(factor).unwrap();
            let m = (fm.m as i64).abs();
            assert!((1 << 30..1 << 31).contains(&m), "{factor} -> {fm:?}");
            let rel = (fm.to_f64() - factor).abs() / factor.abs();
            assert!(rel <= 2f64.powi(-30), "{factor}: rel {rel}");
        }
        // powers of two at the edges of a binade
        for k in -30..30 {
            let fm = fxp_encode(2f64.powi(k)).unwrap();
            assert_eq!(fm.m, 1 << 30);
            assert_eq!(fm.to_f64(), 2f64.powi(k));
        }
    }

    #[test]
    fn tiny_multipliers_use_max_shift() {
        let fm = fxp_encode(2f64.powi(-40)).unwrap();
        assert_eq!(fm.shift, MAX_SHIFT);
        assert_eq!(fm.m, 1 << 22);
        assert_eq!(fxp_encode(1e-30).unwrap(), FixedPointMultiplier::ZERO);
    }

    #[test]
    fn fxp_apply_against_double_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..1_000_000 {
            let acc: i32 = rng.gen_range(-(1 << 24)..=(1 << 24));
            let factor: f64 = rng.gen_range(-1.0..1.0) * rng.gen_range(-20.0f64..4.0).exp2();
            let fm = fxp_encode(factor).unwrap();
            let reference = (factor * acc as f64).round();
            let got = fxp_apply(acc, fm) as f64;
            assert!((got - reference).abs() <= 1.0, "acc {acc} M {factor}");
        }
    }

    #[test]
    fn pot_fusion_keeps_codes() {
        let w = [0.5, -0.25, 0.125, 1.0, -0.3, 0.01, 0.7, -0.9];
        let pot = quantize_pot(&w, [2, 1, 2, 2], 1.0).unwrap();
        let before = pot.packed().to_vec();
        let bn = BnParams {
            gamma: vec![1.5, 0.0],
            beta: vec![0.2, -0.4],
            mean: vec![0.1, 0.3],
            var: vec![0.8, 1.2],
            eps: BN_EPS,
        };
        let one = AffineParams::new(1.0, 0).unwrap();
        let layer = fuse_conv_bn_pot(pot, &[0.0, 0.5], &bn, one, one, 1, 0).unwrap();
        match &layer.weights {
            ConvWeights::Pot(p) => assert_eq!(p.packed(), &before[..]),
            _ => unreachable!(),
        }
        // gamma = 0 gives a dead channel
        assert_eq!(layer.requant[1], FixedPointMultiplier::ZERO);
        assert_eq!(layer.bias_q[1], (-0.4f64).round() as i32);
    }

    #[test]
    fn identity_bn_collapses_multipliers() {
        let pot = PotTensor::from_codes([3, 1, 1, 1], &[PotCode::new(false, 0); 3], 1.0).unwrap();
        let one = AffineParams::new(1.0, 0).unwrap();
        let layer = fuse_conv_bn_pot(
            pot,
            &[1.4, -2.5, 0.2],
            &BnParams::identity(3),
            one,
            one,
            1,
            0,
        )
        .unwrap();
        for fm in &layer.requant {
            let rel = (fm.to_f64() - 2f64.powi(-7)).abs() / 2f64.powi(-7);
            assert!(rel < 1e-9, "{fm:?}");
        }
        assert_eq!(layer.bias_q, vec![1, -3, 0]);
    }

    #[test]
    fn pot_fusion_reproduces_float_fusion() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w: Vec<f64> = (0..4 * 3 * 9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let bn = BnParams {
            gamma: (0..4).map(|_| rng.gen_range(0.5..2.0)).collect(),
            beta: (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            mean: (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            var: (0..4).map(|_| rng.gen_range(0.1..2.0)).collect(),
            eps: BN_EPS,
        };
        let s = crate::quantize::pot_scale(&w);
        let pot = quantize_pot(&w, [4, 3, 3, 3], s).unwrap();
        let wq = crate::quantize::dequantize_pot(&pot);
        let (wf, bf) = fuse_conv_bn_float(&wq, &b, &bn).unwrap();
        let q = AffineParams::new(0.05, 3).unwrap();
        let layer = fuse_conv_bn_pot(pot, &b, &bn, q, q, 1, 1).unwrap();
        let (lw, lb) = layer.effective_float();
        for (x, y) in lw.iter().zip(&wf) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in lb.iter().zip(&bf) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

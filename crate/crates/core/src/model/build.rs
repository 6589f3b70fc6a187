use std::fmt;
use std::str::FromStr;

use crate::fuse::{fuse_conv_bn_float, BnParams, ConvWeights, FusedQuantLayer};
use crate::kernels::{ActivationKind, FloatTensor};
use crate::quantize::{
    calibrate_affine, pot_scale, quantize_pot, quantize_uniform, AffineParams, CalibrationMode,
};

use super::exec::{layer_reference, Tensor};
use super::{ActivationMode, FloatLayer, FloatModel, LayerSpec, ModelError, QuantModel};

/// Weight and activation quantization scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scheme {
    /// 8-bit uniform weights (BN folded first) and int8 activations.
    Int8,
    /// 4-bit uniform weights, float activations.
    Int4w,
    /// 4-bit power-of-two weights, float activations.
    Log4w,
    /// 4-bit power-of-two weights and int8 activations.
    Log4wInt8a,
}

impl Scheme {
    pub const ALL: [Scheme; 4] = [
        Scheme::Int8,
        Scheme::Int4w,
        Scheme::Log4w,
        Scheme::Log4wInt8a,
    ];

    pub fn id(self) -> u8 {
        match self {
            Scheme::Int8 => 0,
            Scheme::Int4w => 1,
            Scheme::Log4w => 2,
            Scheme::Log4wInt8a => 3,
        }
    }

    pub fn from_id(id: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.id() == id)
    }

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Int8 => "int8",
            Scheme::Int4w => "int4w",
            Scheme::Log4w => "log4w",
            Scheme::Log4wInt8a => "log4w_int8a",
        }
    }

    pub fn activations(self) -> ActivationMode {
        match self {
            Scheme::Int8 | Scheme::Log4wInt8a => ActivationMode::Int8,
            Scheme::Int4w | Scheme::Log4w => ActivationMode::Float,
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

impl FromStr for Scheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown scheme {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantizeOptions {
    /// Keep the first and last weight layers at 8-bit uniform weights.
    pub exempt_first_last: bool,
    pub calibration: CalibrationMode,
}

impl Default for QuantizeOptions {
    fn default() -> Self {
        Self {
            exempt_first_last: false,
            calibration: CalibrationMode::MinMax,
        }
    }
}

fn uniform_weights(w: &[f64], shape: [usize; 4], bits: u8) -> Result<ConvWeights, ModelError> {
    Ok(ConvWeights::Uniform(quantize_uniform(
        w,
        shape,
        pot_scale(w),
        bits,
    )?))
}

/// Quantized weights plus the real per-channel gain and bias that go with them.
///
/// `int8` folds BN into the float weights before quantizing. The 4-bit
/// schemes quantize the raw weights, as seen during quantization-aware
/// training, and carry the BN gain per channel.
fn quantize_weights(
    scheme: Scheme,
    exempt: bool,
    shape: [usize; 4],
    w: &[f64],
    b: &[f64],
    bn: Option<&BnParams>,
) -> Result<(ConvWeights, Vec<f64>, Vec<f64>), ModelError> {
    let c_out = shape[0];
    let bits = match scheme {
        Scheme::Int4w if !exempt => 4,
        _ => 8,
    };
    if scheme == Scheme::Int8 {
        let (wf, bf) = match bn {
            Some(bn) => fuse_conv_bn_float(w, b, bn)?,
            None => (w.to_vec(), b.to_vec()),
        };
        return Ok((uniform_weights(&wf, shape, bits)?, vec![1.0; c_out], bf));
    }
    let weights = if matches!(scheme, Scheme::Log4w | Scheme::Log4wInt8a) && !exempt {
        ConvWeights::Pot(quantize_pot(w, shape, pot_scale(w))?)
    } else {
        uniform_weights(w, shape, bits)?
    };
    let (gain, bias) = match bn {
        Some(bn) => (
            (0..c_out).map(|c| bn.gain(c)).collect(),
            (0..c_out).map(|c| bn.folded_bias(c, b[c])).collect(),
        ),
        None => (vec![1.0; c_out], b.to_vec()),
    };
    Ok((weights, gain, bias))
}

fn calibrate(values: &[f64], mode: CalibrationMode) -> Result<AffineParams, ModelError> {
    Ok(calibrate_affine(std::iter::once(values), mode)?)
}

/// Converts a float model into a quantized one.
///
/// Activation ranges are calibrated layer by layer: each weight layer's
/// output range is measured on the reference outputs produced from the
/// already-quantized previous layers. A ReLU directly after a weight layer
/// shares its quantizer, so the ReLU table is exact.
pub fn quantize_model(
    float: &FloatModel,
    calib: &FloatTensor,
    scheme: Scheme,
    opts: QuantizeOptions,
) -> Result<QuantModel, ModelError> {
    let activations = scheme.activations();
    let int8 = activations == ActivationMode::Int8;
    let n = calib.shape[0];
    if int8 && (n == 0 || calib.data.is_empty()) {
        return Err(ModelError::EmptyCalibrationSet);
    }
    if n > 0 {
        let [_, c, h, w] = calib.shape;
        if [c, h, w] != float.input_shape {
            return Err(ModelError::ShapeMismatch(format!(
                "calibration frames {:?}, model expects {:?}",
                [c, h, w],
                float.input_shape
            )));
        }
    }
    let weight_layers: Vec<usize> = float
        .layers
        .iter()
        .enumerate()
        .filter(|(_, l)| matches!(l, FloatLayer::Conv { .. } | FloatLayer::Dense { .. }))
        .map(|(i, _)| i)
        .collect();
    let is_exempt = |i: usize| {
        opts.exempt_first_last
            && (weight_layers.first() == Some(&i) || weight_layers.last() == Some(&i))
    };

    let input_q = if int8 {
        calibrate(&calib.data, opts.calibration)?
    } else {
        AffineParams::identity()
    };
    let mut cur = if int8 {
        Tensor::Int8(calib.quantize(input_q))
    } else {
        Tensor::Float(calib.clone())
    };
    let mut prev_q = input_q;
    let mut layers = Vec::with_capacity(float.layers.len());
    let mut relu_fused = false;

    for (i, layer) in float.layers.iter().enumerate() {
        let next_is_relu = matches!(
            float.layers.get(i + 1),
            Some(FloatLayer::Activation(ActivationKind::Relu))
        );
        let spec = match layer {
            FloatLayer::Conv {
                shape,
                w,
                b,
                stride,
                pad,
                bn,
            } => {
                let (weights, gain, bias) =
                    quantize_weights(scheme, is_exempt(i), *shape, w, b, bn.as_ref())?;
                let make = |out_q| {
                    FusedQuantLayer::new(
                        weights.clone(),
                        gain.clone(),
                        bias.clone(),
                        prev_q,
                        out_q,
                        *stride,
                        *pad,
                    )
                    .map(LayerSpec::Conv)
                };
                weight_layer(make, &cur, int8, next_is_relu, opts.calibration)?
            }
            FloatLayer::Dense {
                out_features,
                in_features,
                w,
                b,
            } => {
                let shape = [*out_features, *in_features, 1, 1];
                let (weights, gain, bias) =
                    quantize_weights(scheme, is_exempt(i), shape, w, b, None)?;
                let make = |out_q| {
                    FusedQuantLayer::new(
                        weights.clone(),
                        gain.clone(),
                        bias.clone(),
                        prev_q,
                        out_q,
                        1,
                        0,
                    )
                    .map(LayerSpec::Dense)
                };
                weight_layer(make, &cur, int8, next_is_relu, opts.calibration)?
            }
            FloatLayer::Activation(kind) => {
                let out_q = if !int8 || (relu_fused && *kind == ActivationKind::Relu) {
                    prev_q
                } else {
                    let probe = LayerSpec::Activation {
                        kind: *kind,
                        in_q: prev_q,
                        out_q: AffineParams::identity(),
                    };
                    let y = layer_reference(&probe, &float_view(&cur), None)?;
                    calibrate(&y.to_f64(), opts.calibration)?
                };
                LayerSpec::Activation {
                    kind: *kind,
                    in_q: prev_q,
                    out_q,
                }
            }
            FloatLayer::MaxPool => LayerSpec::MaxPool { q: prev_q },
            FloatLayer::Gap => LayerSpec::Gap { q: prev_q },
        };
        relu_fused = next_is_relu && matches!(spec, LayerSpec::Conv(_) | LayerSpec::Dense(_));
        if n > 0 {
            cur = layer_reference(&spec, &cur, None)?;
        }
        prev_q = spec.out_q();
        layers.push(spec);
    }

    let model = QuantModel {
        meta: float.meta,
        scheme,
        activations,
        input_shape: float.input_shape,
        input_q,
        layers,
    };
    model.validate()?;
    Ok(model)
}

fn float_view(t: &Tensor) -> Tensor {
    match t {
        Tensor::Int8(q) => Tensor::Float(q.dequantize()),
        Tensor::Float(_) => t.clone(),
    }
}

/// Builds a weight layer, calibrating its output quantizer on the reference
/// pre-activation (post-ReLU when a ReLU follows).
fn weight_layer(
    make: impl Fn(AffineParams) -> Result<LayerSpec, crate::fuse::FuseError>,
    cur: &Tensor,
    int8: bool,
    next_is_relu: bool,
    mode: CalibrationMode,
) -> Result<LayerSpec, ModelError> {
    if !int8 {
        return Ok(make(AffineParams::identity())?);
    }
    let probe = make(AffineParams::identity())?;
    let y = layer_reference(&probe, &float_view(cur), None)?.to_f64();
    let y: Vec<f64> = if next_is_relu {
        y.into_iter().map(|v| v.max(0.0)).collect()
    } else {
        y
    };
    Ok(make(calibrate(&y, mode)?)?)
}

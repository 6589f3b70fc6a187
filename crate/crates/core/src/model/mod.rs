//! Quantized and float model containers and the sequential executor.
//!
//! A model is a flat list of layers; residual connections are expressed
//! with an `Add` layer that names an earlier layer's output. Quantized
//! models (`PWRQ`) run on three engines: a double-precision fake-quant
//! reference, integer multiply-accumulate and integer shift-accumulate.
//! Float models (`PWRF`) hold the trained weights with unfused BN.

mod build;
mod exec;
mod float;
mod io;
mod pwrf;
mod pwrq;
mod stats;

pub use build::{quantize_model, QuantizeOptions, Scheme};
pub use exec::{
    argmax, frame_tensor, frames_tensor, layer_reference, run, run_tensor, verify_layerwise,
    Engine, LayerDeviation, RunOptions, RunOutput, Tensor, VerifyReport,
};
pub use float::{FloatLayer, FloatModel};
pub use pwrf::{load_pwrf, save_pwrf, PWRF_MAGIC};
pub use pwrq::{load_pwrq, save_pwrq, PWRQ_MAGIC};
pub use stats::{model_stats, LayerStats, ModelStats};

use thiserror::Error;

use crate::fuse::{ConvWeights, FuseError, FusedQuantLayer};
use crate::kernels::{ActivationKind, KernelError};
use crate::quantize::{AffineParams, QuantError};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported format version {0}")]
    VersionUnsupported(u32),
    #[error("corrupt section at byte offset {0}")]
    CorruptSection(usize),
    #[error("validation failed: {0}")]
    ValidationFailed(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("calibration set is empty")]
    EmptyCalibrationSet,
    #[error("unsupported layer: {0}")]
    UnsupportedLayer(String),
    #[error("engine {0:?} cannot run a model with float activations")]
    UnsupportedEngine(Engine),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Fuse(#[from] FuseError),
    #[error(transparent)]
    Quant(#[from] QuantError),
}

impl ModelError {
    /// True for accumulator overflow raised by a kernel.
    pub fn is_overflow(&self) -> bool {
        matches!(self, ModelError::Kernel(KernelError::Overflow))
    }
}

/// On-disk layer kind tags shared by both containers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u16)]
pub enum LayerKind {
    ConvPot = 0,
    ConvInt8 = 1,
    MaxPool = 2,
    Add = 3,
    Activation = 4,
    Gap = 5,
    Dense = 6,
}

impl LayerKind {
    pub fn from_u16(v: u16) -> Option<Self> {
        Some(match v {
            0 => LayerKind::ConvPot,
            1 => LayerKind::ConvInt8,
            2 => LayerKind::MaxPool,
            3 => LayerKind::Add,
            4 => LayerKind::Activation,
            5 => LayerKind::Gap,
            6 => LayerKind::Dense,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::ConvPot => "conv_pot",
            LayerKind::ConvInt8 => "conv_int8",
            LayerKind::MaxPool => "maxpool",
            LayerKind::Add => "add",
            LayerKind::Activation => "activation",
            LayerKind::Gap => "gap",
            LayerKind::Dense => "dense",
        }
    }
}

/// Sensor and windowing metadata carried by both containers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelMeta {
    pub sensor_width: u16,
    pub sensor_height: u16,
    pub tau_us: u32,
}

/// Whether inter-layer activations are int8 or stay in double precision.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActivationMode {
    Int8,
    /// Weight-only quantization, runnable on the float engine only.
    Float,
}

/// One layer of a quantized model.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Conv(FusedQuantLayer),
    /// Fully connected layer stored as a 1x1 convolution over `[N, C, 1, 1]`.
    Dense(FusedQuantLayer),
    MaxPool {
        q: AffineParams,
    },
    Activation {
        kind: ActivationKind,
        in_q: AffineParams,
        out_q: AffineParams,
    },
    Gap {
        q: AffineParams,
    },
    /// Adds the previous output to the output of layer `tap` (`-1` = model input).
    Add {
        tap: i32,
        in_q: AffineParams,
        tap_q: AffineParams,
        out_q: AffineParams,
    },
}

impl LayerSpec {
    pub fn kind(&self) -> LayerKind {
        match self {
            LayerSpec::Conv(l) => match l.weights {
                ConvWeights::Pot(_) => LayerKind::ConvPot,
                ConvWeights::Uniform(_) => LayerKind::ConvInt8,
            },
            LayerSpec::Dense(_) => LayerKind::Dense,
            LayerSpec::MaxPool { .. } => LayerKind::MaxPool,
            LayerSpec::Activation { .. } => LayerKind::Activation,
            LayerSpec::Gap { .. } => LayerKind::Gap,
            LayerSpec::Add { .. } => LayerKind::Add,
        }
    }

    pub fn in_q(&self) -> AffineParams {
        match self {
            LayerSpec::Conv(l) | LayerSpec::Dense(l) => l.in_q,
            LayerSpec::MaxPool { q } | LayerSpec::Gap { q } => *q,
            LayerSpec::Activation { in_q, .. } | LayerSpec::Add { in_q, .. } => *in_q,
        }
    }

    pub fn out_q(&self) -> AffineParams {
        match self {
            LayerSpec::Conv(l) | LayerSpec::Dense(l) => l.out_q,
            LayerSpec::MaxPool { q } | LayerSpec::Gap { q } => *q,
            LayerSpec::Activation { out_q, .. } | LayerSpec::Add { out_q, .. } => *out_q,
        }
    }

    /// Output `(C, H, W)` for an input of `(C, H, W)`.
    pub fn out_chw(&self, input: [usize; 3]) -> Result<[usize; 3], ModelError> {
        let [c, h, w] = input;
        match self {
            LayerSpec::Conv(l) => {
                let [co, ci, k, _] = l.weights.shape();
                if ci != c || h + 2 * l.pad < k || w + 2 * l.pad < k || l.stride == 0 {
                    return Err(ModelError::ShapeMismatch(format!(
                        "conv {:?} on input {input:?}",
                        l.weights.shape()
                    )));
                }
                Ok([
                    co,
                    (h + 2 * l.pad - k) / l.stride + 1,
                    (w + 2 * l.pad - k) / l.stride + 1,
                ])
            }
            LayerSpec::Dense(l) => {
                let [co, ci, k, _] = l.weights.shape();
                if ci != c || h != 1 || w != 1 || k != 1 {
                    return Err(ModelError::ShapeMismatch(format!(
                        "dense {:?} on input {input:?}",
                        l.weights.shape()
                    )));
                }
                Ok([co, 1, 1])
            }
            LayerSpec::MaxPool { .. } => Ok([c, h / 2, w / 2]),
            LayerSpec::Gap { .. } => Ok([c, 1, 1]),
            LayerSpec::Activation { .. } | LayerSpec::Add { .. } => Ok(input),
        }
    }
}

/// A quantized network: input quantizer plus a sequential layer list.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantModel {
    pub meta: ModelMeta,
    pub scheme: Scheme,
    pub activations: ActivationMode,
    /// `(C, H, W)` of one input frame.
    pub input_shape: [usize; 3],
    pub input_q: AffineParams,
    pub layers: Vec<LayerSpec>,
}

/// Worst case `k*k*C_in` that still fits an `i32` result
/// (`terms * 255 * 128 <= i32::MAX`).
const MAX_ACC_TERMS: usize = (i32::MAX as usize) / (255 * 128);

impl QuantModel {
    /// `(C, H, W)` after every layer.
    pub fn shapes(&self) -> Result<Vec<[usize; 3]>, ModelError> {
        let mut cur = self.input_shape;
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            if let LayerSpec::Add { tap, .. } = layer {
                let tap_shape = self.tap_shape(*tap, i, &out)?;
                if tap_shape != cur {
                    return Err(ModelError::ShapeMismatch(format!(
                        "add at layer {i}: {cur:?} vs tap {tap_shape:?}"
                    )));
                }
            }
            cur = layer.out_chw(cur)?;
            out.push(cur);
        }
        Ok(out)
    }

    fn tap_shape(
        &self,
        tap: i32,
        at: usize,
        shapes: &[[usize; 3]],
    ) -> Result<[usize; 3], ModelError> {
        if tap == -1 {
            Ok(self.input_shape)
        } else if tap >= 0 && (tap as usize) < at {
            Ok(shapes[tap as usize])
        } else {
            Err(ModelError::ValidationFailed(format!(
                "add at layer {at} references layer {tap}"
            )))
        }
    }

    pub fn output_shape(&self) -> Result<[usize; 3], ModelError> {
        Ok(self.shapes()?.last().copied().unwrap_or(self.input_shape))
    }

    /// Structural checks: shape chain, quantization chain, accumulator
    /// bound and per-channel payload lengths.
    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: String| Err(ModelError::ValidationFailed(m));
        if self.layers.is_empty() {
            return fail("model has no layers".into());
        }
        self.shapes()
            .map_err(|e| ModelError::ValidationFailed(e.to_string()))?;
        let mut prev_q = self.input_q;
        for (i, layer) in self.layers.iter().enumerate() {
            if self.activations == ActivationMode::Int8 && layer.in_q() != prev_q {
                return fail(format!("layer {i}: input quantization does not chain"));
            }
            match layer {
                LayerSpec::Conv(l) | LayerSpec::Dense(l) => {
                    let c_out = l.out_channels();
                    if l.requant.len() != c_out
                        || l.bias_q.len() != c_out
                        || l.gain.len() != c_out
                        || l.bias.len() != c_out
                    {
                        return fail(format!("layer {i}: per-channel payload length"));
                    }
                    let [_, ci, k, k2] = l.weights.shape();
                    if k != k2 {
                        return fail(format!("layer {i}: non-square kernel"));
                    }
                    if ci * k * k > MAX_ACC_TERMS {
                        return fail(format!(
                            "layer {i}: {} terms exceed accumulator",
                            ci * k * k
                        ));
                    }
                    if let ConvWeights::Uniform(u) = &l.weights {
                        if u.values.contains(&i8::MIN) {
                            return fail(format!("layer {i}: weight -128 outside symmetric range"));
                        }
                    }
                }
                LayerSpec::MaxPool { .. } | LayerSpec::Gap { .. } => {}
                LayerSpec::Activation { .. } => {}
                LayerSpec::Add { tap, tap_q, .. } => {
                    let tq = if *tap == -1 {
                        self.input_q
                    } else {
                        self.layers[*tap as usize].out_q()
                    };
                    if self.activations == ActivationMode::Int8 && tq != *tap_q {
                        return fail(format!("layer {i}: tap quantization does not chain"));
                    }
                }
            }
            prev_q = layer.out_q();
        }
        Ok(())
    }

    pub fn is_integer_executable(&self) -> bool {
        self.activations == ActivationMode::Int8
    }
}

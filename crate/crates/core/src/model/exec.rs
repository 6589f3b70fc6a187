use std::str::FromStr;

use crate::event_io::EventFrame;
use crate::fuse::{ConvWeights, FusedQuantLayer};
use crate::kernels::{
    activation_lut, add_requant, build_lut, conv2d_float, conv2d_int_bac, conv2d_int_mac,
    global_avg_pool_float, global_avg_pool_int8, maxpool2, maxpool2_int8, requantize, FloatTensor,
    Int8Tensor,
};

use super::{ActivationMode, LayerSpec, ModelError, QuantModel};

/// Which arithmetic executes the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Engine {
    /// Double precision with fake quantization at layer boundaries.
    Float,
    /// Integer multiply-accumulate.
    Mac,
    /// Integer shift-accumulate for power-of-two layers.
    Bac,
}

impl Engine {
    pub fn name(self) -> &'static str {
        match self {
            Engine::Float => "float",
            Engine::Mac => "mac",
            Engine::Bac => "bac",
        }
    }
}

impl FromStr for Engine {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "float" => Ok(Engine::Float),
            "mac" => Ok(Engine::Mac),
            "bac" => Ok(Engine::Bac),
            other => Err(format!("unknown engine {other:?}")),
        }
    }
}

/// A layer output: int8 on quantized paths, f64 for weight-only models.
#[derive(Debug, Clone, PartialEq)]
pub enum Tensor {
    Int8(Int8Tensor),
    Float(FloatTensor),
}

impl Tensor {
    pub fn shape(&self) -> [usize; 4] {
        match self {
            Tensor::Int8(t) => t.shape,
            Tensor::Float(t) => t.shape,
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            Tensor::Int8(t) => t.dequantize().data,
            Tensor::Float(t) => t.data.clone(),
        }
    }

    pub fn as_int8(&self) -> Option<&Int8Tensor> {
        match self {
            Tensor::Int8(t) => Some(t),
            Tensor::Float(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    /// Keep every layer's output. Outputs referenced by `Add` layers are kept
    /// regardless.
    pub keep_taps: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            keep_taps: cfg!(debug_assertions),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub output: Tensor,
    /// `taps[i]` is the output of layer `i` when kept.
    pub taps: Vec<Option<Tensor>>,
}

impl RunOutput {
    /// Dequantized output, one row per batch item.
    pub fn logits(&self) -> Vec<Vec<f64>> {
        let n = self.output.shape()[0];
        let v = self.output.to_f64();
        let per = v.len() / n.max(1);
        v.chunks(per.max(1)).map(<[f64]>::to_vec).collect()
    }

    /// Arg-max per batch item; ties go to the lowest class index.
    pub fn predictions(&self) -> Vec<usize> {
        self.logits().iter().map(|row| argmax(row)).collect()
    }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// `[1, 1, H, W]` tensor of frame values.
pub fn frame_tensor(frame: &EventFrame) -> FloatTensor {
    frames_tensor(std::slice::from_ref(frame))
}

/// Stacks frames of equal geometry into `[N, 1, H, W]`.
pub fn frames_tensor(frames: &[EventFrame]) -> FloatTensor {
    let (h, w) = frames
        .first()
        .map_or((0, 0), |f| (f.height() as usize, f.width() as usize));
    let data = frames
        .iter()
        .flat_map(|f| f.values().iter().map(|&v| v as f64))
        .collect();
    FloatTensor {
        shape: [frames.len(), 1, h, w],
        data,
    }
}

pub fn run(
    model: &QuantModel,
    frame: &EventFrame,
    engine: Engine,
) -> Result<RunOutput, ModelError> {
    run_tensor(model, &frame_tensor(frame), engine, RunOptions::default())
}

fn check_input(model: &QuantModel, x: &FloatTensor) -> Result<(), ModelError> {
    let [_, c, h, w] = x.shape;
    if [c, h, w] != model.input_shape {
        return Err(ModelError::ShapeMismatch(format!(
            "input {:?}, model expects {:?}",
            [c, h, w],
            model.input_shape
        )));
    }
    Ok(())
}

fn quantized_input(model: &QuantModel, x: &FloatTensor) -> Tensor {
    match model.activations {
        ActivationMode::Int8 => Tensor::Int8(x.quantize(model.input_q)),
        ActivationMode::Float => Tensor::Float(x.clone()),
    }
}

fn referenced_taps(model: &QuantModel) -> Vec<bool> {
    let mut keep = vec![false; model.layers.len()];
    for layer in &model.layers {
        if let LayerSpec::Add { tap, .. } = layer {
            if *tap >= 0 {
                keep[*tap as usize] = true;
            }
        }
    }
    keep
}

/// Runs a batch `[N, C, H, W]` through the model on one engine.
pub fn run_tensor(
    model: &QuantModel,
    x: &FloatTensor,
    engine: Engine,
    opts: RunOptions,
) -> Result<RunOutput, ModelError> {
    check_input(model, x)?;
    if engine != Engine::Float && model.activations == ActivationMode::Float {
        return Err(ModelError::UnsupportedEngine(engine));
    }
    let needed = referenced_taps(model);
    let input = quantized_input(model, x);
    let mut taps: Vec<Option<Tensor>> = Vec::with_capacity(model.layers.len());
    let mut cur = input.clone();
    for (i, layer) in model.layers.iter().enumerate() {
        let tap = match layer {
            LayerSpec::Add { tap: -1, .. } => Some(&input),
            LayerSpec::Add { tap, .. } => taps[*tap as usize].as_ref(),
            _ => None,
        };
        let next = match engine {
            Engine::Float => layer_reference(layer, &cur, tap)?,
            Engine::Mac | Engine::Bac => {
                let xi = cur.as_int8().expect("integer engines carry int8 tensors");
                let ti = tap.and_then(Tensor::as_int8);
                Tensor::Int8(layer_integer(layer, xi, ti, engine)?)
            }
        };
        taps.push((opts.keep_taps || needed[i]).then(|| next.clone()));
        cur = next;
    }
    Ok(RunOutput { output: cur, taps })
}

fn layer_integer(
    layer: &LayerSpec,
    x: &Int8Tensor,
    tap: Option<&Int8Tensor>,
    engine: Engine,
) -> Result<Int8Tensor, ModelError> {
    Ok(match layer {
        LayerSpec::Conv(l) => conv_integer(l, x, engine)?,
        LayerSpec::Dense(l) => {
            let [n, c, h, w] = x.shape;
            let flat = Int8Tensor {
                shape: [n, c * h * w, 1, 1],
                data: x.data.clone(),
                q: x.q,
            };
            conv_integer(l, &flat, engine)?
        }
        LayerSpec::MaxPool { .. } => maxpool2_int8(x),
        LayerSpec::Gap { .. } => global_avg_pool_int8(x),
        LayerSpec::Activation { kind, in_q, out_q } => {
            let table = build_lut(|v| kind.apply(v), *in_q, *out_q);
            activation_lut(x, &table, *out_q)
        }
        LayerSpec::Add { out_q, .. } => {
            let t = tap.ok_or_else(|| ModelError::ValidationFailed("missing add tap".into()))?;
            add_requant(x, t, *out_q)?
        }
    })
}

fn conv_integer(
    l: &FusedQuantLayer,
    x: &Int8Tensor,
    engine: Engine,
) -> Result<Int8Tensor, ModelError> {
    let z = l.in_q.zero_point;
    let acc = match (&l.weights, engine) {
        (ConvWeights::Pot(p), Engine::Bac) => conv2d_int_bac(x, p, z, l.stride, l.pad)?,
        (w, _) => conv2d_int_mac(x, &w.int_weights(), w.shape(), z, l.stride, l.pad)?,
    };
    Ok(requantize(&acc, l)?)
}

/// Double-precision fake-quant execution of a single layer.
///
/// Conv layers compute `quantize(gain_c * (DQ(x) * DQ(w)) + B_c)` without any
/// fixed-point arithmetic. For weight-only models the quantize/dequantize
/// steps are skipped.
pub fn layer_reference(
    layer: &LayerSpec,
    x: &Tensor,
    tap: Option<&Tensor>,
) -> Result<Tensor, ModelError> {
    let int8 = matches!(x, Tensor::Int8(_));
    let xf = match x {
        Tensor::Int8(t) => t.dequantize(),
        Tensor::Float(t) => t.clone(),
    };
    let out_q = layer.out_q();
    let y = match layer {
        LayerSpec::Conv(l) => conv_reference(l, &xf)?,
        LayerSpec::Dense(l) => {
            let [n, c, h, w] = xf.shape;
            let flat = FloatTensor {
                shape: [n, c * h * w, 1, 1],
                data: xf.data,
            };
            conv_reference(l, &flat)?
        }
        LayerSpec::MaxPool { .. } => {
            let (data, shape) = maxpool2(&xf.data, xf.shape);
            FloatTensor { shape, data }
        }
        LayerSpec::Gap { .. } => global_avg_pool_float(&xf),
        LayerSpec::Activation { kind, .. } => FloatTensor {
            shape: xf.shape,
            data: xf.data.iter().map(|&v| kind.apply(v)).collect(),
        },
        LayerSpec::Add { .. } => {
            let t = tap.ok_or_else(|| ModelError::ValidationFailed("missing add tap".into()))?;
            let tf = t.to_f64();
            if t.shape() != xf.shape {
                return Err(ModelError::ShapeMismatch("add operands".into()));
            }
            FloatTensor {
                shape: xf.shape,
                data: xf.data.iter().zip(&tf).map(|(a, b)| a + b).collect(),
            }
        }
    };
    Ok(if int8 {
        Tensor::Int8(y.quantize(out_q))
    } else {
        Tensor::Float(y)
    })
}

fn conv_reference(l: &FusedQuantLayer, x: &FloatTensor) -> Result<FloatTensor, ModelError> {
    let shape = l.weights.shape();
    let w = l.weights.dequantize();
    let mut y = conv2d_float(x, &w, shape, &vec![0.0; shape[0]], l.stride, l.pad)?;
    let [_, c, h, wd] = y.shape;
    let plane = h * wd;
    for (i, v) in y.data.iter_mut().enumerate() {
        let ch = (i / plane) % c;
        *v = l.gain[ch] * *v + l.bias[ch];
    }
    Ok(y)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerDeviation {
    pub index: usize,
    pub kind: &'static str,
    /// MAC and BAC produced identical bytes.
    pub engines_agree: bool,
    /// Largest `|bac - reference|` in output LSBs, reference fed the same input.
    pub max_lsb: i32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub layers: Vec<LayerDeviation>,
}

impl VerifyReport {
    pub fn worst_lsb(&self) -> i32 {
        self.layers.iter().map(|l| l.max_lsb).max().unwrap_or(0)
    }

    /// First layer breaking bitwise MAC/BAC agreement or the LSB tolerance.
    pub fn first_failure(&self, tolerance: i32) -> Option<usize> {
        self.layers
            .iter()
            .find(|l| !l.engines_agree || l.max_lsb > tolerance)
            .map(|l| l.index)
    }

    pub fn merge(&mut self, other: VerifyReport) {
        if self.layers.is_empty() {
            *self = other;
            return;
        }
        for (a, b) in self.layers.iter_mut().zip(other.layers) {
            a.engines_agree &= b.engines_agree;
            a.max_lsb = a.max_lsb.max(b.max_lsb);
        }
    }
}

/// Compares MAC against BAC bit for bit at every layer, and BAC against the
/// float reference evaluated layer by layer on BAC's own inputs.
pub fn verify_layerwise(model: &QuantModel, x: &FloatTensor) -> Result<VerifyReport, ModelError> {
    if model.activations != ActivationMode::Int8 {
        return Err(ModelError::UnsupportedEngine(Engine::Bac));
    }
    let opts = RunOptions { keep_taps: true };
    let bac = run_tensor(model, x, Engine::Bac, opts)?;
    let mac = run_tensor(model, x, Engine::Mac, opts)?;
    let input = quantized_input(model, x);
    let mut layers = Vec::with_capacity(model.layers.len());
    for (i, layer) in model.layers.iter().enumerate() {
        let out_bac = bac.taps[i].as_ref().expect("taps kept");
        let prev = if i == 0 {
            &input
        } else {
            bac.taps[i - 1].as_ref().expect("taps kept")
        };
        let tap = match layer {
            LayerSpec::Add { tap: -1, .. } => Some(&input),
            LayerSpec::Add { tap, .. } => bac.taps[*tap as usize].as_ref(),
            _ => None,
        };
        let reference = layer_reference(layer, prev, tap)?;
        let (a, b) = (out_bac.as_int8().unwrap(), reference.as_int8().unwrap());
        let max_lsb = a
            .data
            .iter()
            .zip(&b.data)
            .map(|(p, q)| (*p as i32 - *q as i32).abs())
            .max()
            .unwrap_or(0);
        layers.push(LayerDeviation {
            index: i,
            kind: layer.kind().name(),
            engines_agree: mac.taps[i] == bac.taps[i],
            max_lsb,
        });
    }
    Ok(VerifyReport { layers })
}

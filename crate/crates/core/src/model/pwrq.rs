//! `PWRQ` quantized container.
//!
//! ```text
//! "PWRQ" u32 version u32 layer_count
//! u16 sensor_w u16 sensor_h u32 tau_us u8 scheme u8 activation_mode
//! u16 in_c u16 in_h u16 in_w, f64 in_scale i8 in_zero
//! per layer: u16 kind u32 payload_len payload
//!   geometry: u16 in_c in_h in_w, u16 out_c out_h out_w, u8 k u8 stride u8 pad
//!   quant:    f64 in_scale i8 in_zero, f64 out_scale i8 out_zero
//!   conv_pot / conv_int8 / dense:
//!       [dense: u8 weight format, 0 = pot, 1 = uniform]
//!       u32 c_out, per channel: f64 gain f64 bias i32 m u8 shift i32 bias_q
//!       pot weights:     u16 shape[4] f64 s_w u32 n, ceil(n/2) packed bytes
//!       uniform weights: u16 shape[4] f64 step u8 bits u32 n, n bytes (i8)
//!   activation: u8 function id
//!   add:        i32 tap, f64 tap_scale i8 tap_zero
//!   maxpool, gap: nothing beyond geometry and quant
//! ```
//! Power-of-two codes are nibble-packed, low nibble first.

use crate::fuse::{ConvWeights, FixedPointMultiplier, FusedQuantLayer};
use crate::kernels::ActivationKind;
use crate::quantize::{AffineParams, PotTensor, UniformTensor};

use super::io::{Reader, Writer};
use super::{
    ActivationMode, LayerKind, LayerSpec, ModelError, ModelMeta, QuantModel, Scheme, FORMAT_VERSION,
};

pub const PWRQ_MAGIC: &[u8; 4] = b"PWRQ";

/// Bytes written for the weight tensor of a conv layer, header included.
pub(crate) fn weight_section_len(w: &ConvWeights) -> usize {
    match w {
        ConvWeights::Pot(t) => 8 + 8 + 4 + t.packed().len(),
        ConvWeights::Uniform(t) => 8 + 8 + 1 + 4 + t.values.len(),
    }
}

fn write_weights(p: &mut Writer, w: &ConvWeights) {
    match w {
        ConvWeights::Pot(t) => {
            p.dims(&t.shape());
            p.f64(t.scale());
            p.u32(t.len() as u32);
            p.bytes(t.packed());
        }
        ConvWeights::Uniform(t) => {
            p.dims(&t.shape);
            p.f64(t.step);
            p.u8(t.bits);
            p.u32(t.values.len() as u32);
            p.bytes(&t.values.iter().map(|&v| v as u8).collect::<Vec<_>>());
        }
    }
}

fn read_weights(p: &mut Reader, pot: bool) -> Result<ConvWeights, ModelError> {
    let at = p.pos();
    let shape = p.dims::<4>()?;
    let scale = p.f64()?;
    if pot {
        let n = p.u32()? as usize;
        if n != shape.iter().product::<usize>() {
            return Err(ModelError::CorruptSection(at));
        }
        let packed = p.take(n.div_ceil(2))?.to_vec();
        let t = PotTensor::from_packed(shape, packed, scale)
            .map_err(|_| ModelError::CorruptSection(at))?;
        Ok(ConvWeights::Pot(t))
    } else {
        let bits = p.u8()?;
        let n = p.u32()? as usize;
        if n != shape.iter().product::<usize>() || !(2..=8).contains(&bits) {
            return Err(ModelError::CorruptSection(at));
        }
        let values = p.take(n)?.iter().map(|&b| b as i8).collect();
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(ModelError::CorruptSection(at));
        }
        Ok(ConvWeights::Uniform(UniformTensor {
            shape,
            values,
            step: scale,
            bits,
        }))
    }
}

fn write_fused(p: &mut Writer, l: &FusedQuantLayer) {
    p.u32(l.out_channels() as u32);
    for c in 0..l.out_channels() {
        p.f64(l.gain[c]);
        p.f64(l.bias[c]);
        p.i32(l.requant[c].m);
        p.u8(l.requant[c].shift);
        p.i32(l.bias_q[c]);
    }
    write_weights(p, &l.weights);
}

struct Geometry {
    k: usize,
    stride: usize,
    pad: usize,
}

fn read_fused(
    p: &mut Reader,
    pot: bool,
    g: &Geometry,
    in_q: AffineParams,
    out_q: AffineParams,
) -> Result<FusedQuantLayer, ModelError> {
    let at = p.pos();
    let c_out = p.u32()? as usize;
    let (mut gain, mut bias, mut requant, mut bias_q) = (vec![], vec![], vec![], vec![]);
    for _ in 0..c_out {
        gain.push(p.f64()?);
        bias.push(p.f64()?);
        let m = p.i32()?;
        let shift = p.u8()?;
        if shift > crate::fuse::MAX_SHIFT {
            return Err(ModelError::CorruptSection(at));
        }
        requant.push(FixedPointMultiplier { m, shift });
        bias_q.push(p.i32()?);
    }
    let weights = read_weights(p, pot)?;
    if weights.shape()[0] != c_out || weights.shape()[2] != g.k {
        return Err(ModelError::CorruptSection(at));
    }
    Ok(FusedQuantLayer {
        weights,
        stride: g.stride,
        pad: g.pad,
        in_q,
        out_q,
        gain,
        bias,
        requant,
        bias_q,
    })
}

pub fn save_pwrq(model: &QuantModel) -> Result<Vec<u8>, ModelError> {
    model.validate()?;
    let shapes = model.shapes()?;
    let mut out = Writer::default();
    out.bytes(PWRQ_MAGIC);
    out.u32(FORMAT_VERSION);
    out.u32(model.layers.len() as u32);
    out.u16(model.meta.sensor_width);
    out.u16(model.meta.sensor_height);
    out.u32(model.meta.tau_us);
    out.u8(model.scheme.id());
    out.u8(match model.activations {
        ActivationMode::Int8 => 0,
        ActivationMode::Float => 1,
    });
    out.dims(&model.input_shape);
    out.affine(model.input_q);

    let mut in_shape = model.input_shape;
    for (layer, out_shape) in model.layers.iter().zip(&shapes) {
        let mut p = Writer::default();
        p.dims(&in_shape);
        p.dims(out_shape);
        let (k, stride, pad) = match layer {
            LayerSpec::Conv(l) | LayerSpec::Dense(l) => (l.kernel(), l.stride, l.pad),
            LayerSpec::MaxPool { .. } => (2, 2, 0),
            _ => (0, 0, 0),
        };
        p.u8(k as u8);
        p.u8(stride as u8);
        p.u8(pad as u8);
        p.affine(layer.in_q());
        p.affine(layer.out_q());
        match layer {
            LayerSpec::Conv(l) => write_fused(&mut p, l),
            LayerSpec::Dense(l) => {
                p.u8(match l.weights {
                    ConvWeights::Pot(_) => 0,
                    ConvWeights::Uniform(_) => 1,
                });
                write_fused(&mut p, l);
            }
            LayerSpec::Activation { kind, .. } => p.u8(kind.id()),
            LayerSpec::Add { tap, tap_q, .. } => {
                p.i32(*tap);
                p.affine(*tap_q);
            }
            LayerSpec::MaxPool { .. } | LayerSpec::Gap { .. } => {}
        }
        out.section(layer.kind() as u16, p);
        in_shape = *out_shape;
    }
    Ok(out.buf)
}

pub fn load_pwrq(bytes: &[u8]) -> Result<QuantModel, ModelError> {
    if bytes.len() < 4 || &bytes[..4] != PWRQ_MAGIC {
        return Err(ModelError::BadMagic);
    }
    let mut r = Reader::new(bytes);
    r.take(4)?;
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(ModelError::VersionUnsupported(version));
    }
    let count = r.u32()? as usize;
    let meta = ModelMeta {
        sensor_width: r.u16()?,
        sensor_height: r.u16()?,
        tau_us: r.u32()?,
    };
    let at = r.pos();
    let scheme = Scheme::from_id(r.u8()?).ok_or(ModelError::CorruptSection(at))?;
    let activations = match r.u8()? {
        0 => ActivationMode::Int8,
        1 => ActivationMode::Float,
        _ => return Err(ModelError::CorruptSection(at + 1)),
    };
    let input_shape = r.dims::<3>()?;
    let input_q = r.affine()?;

    let mut layers = Vec::with_capacity(count.min(1024));
    let mut declared = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let (kind, mut p) = r.section()?;
        let at = p.pos();
        let in_shape = p.dims::<3>()?;
        let out_shape = p.dims::<3>()?;
        let g = Geometry {
            k: p.u8()? as usize,
            stride: p.u8()? as usize,
            pad: p.u8()? as usize,
        };
        let in_q = p.affine()?;
        let out_q = p.affine()?;
        let layer = match LayerKind::from_u16(kind) {
            Some(LayerKind::ConvPot) => LayerSpec::Conv(read_fused(&mut p, true, &g, in_q, out_q)?),
            Some(LayerKind::ConvInt8) => {
                LayerSpec::Conv(read_fused(&mut p, false, &g, in_q, out_q)?)
            }
            Some(LayerKind::Dense) => {
                let pot = match p.u8()? {
                    0 => true,
                    1 => false,
                    _ => return Err(ModelError::CorruptSection(at)),
                };
                LayerSpec::Dense(read_fused(&mut p, pot, &g, in_q, out_q)?)
            }
            Some(LayerKind::Activation) => LayerSpec::Activation {
                kind: ActivationKind::from_id(p.u8()?).ok_or(ModelError::CorruptSection(at))?,
                in_q,
                out_q,
            },
            Some(LayerKind::Add) => LayerSpec::Add {
                tap: p.i32()?,
                tap_q: p.affine()?,
                in_q,
                out_q,
            },
            Some(LayerKind::MaxPool) | Some(LayerKind::Gap) => {
                if in_q != out_q {
                    return Err(ModelError::ValidationFailed(format!(
                        "{} layer changes quantization",
                        LayerKind::from_u16(kind).unwrap().name()
                    )));
                }
                if kind == LayerKind::MaxPool as u16 {
                    LayerSpec::MaxPool { q: in_q }
                } else {
                    LayerSpec::Gap { q: in_q }
                }
            }
            None => return Err(ModelError::UnsupportedLayer(format!("PWRQ kind {kind}"))),
        };
        if !p.at_end() {
            return Err(p.corrupt());
        }
        layers.push(layer);
        declared.push((in_shape, out_shape));
    }
    if !r.at_end() {
        return Err(r.corrupt());
    }
    let model = QuantModel {
        meta,
        scheme,
        activations,
        input_shape,
        input_q,
        layers,
    };
    model.validate()?;
    let shapes = model.shapes()?;
    let mut expect_in = input_shape;
    for (i, ((din, dout), s)) in declared.iter().zip(&shapes).enumerate() {
        if *din != expect_in || dout != s {
            return Err(ModelError::ValidationFailed(format!(
                "layer {i}: declared geometry disagrees with computed shapes"
            )));
        }
        expect_in = *s;
    }
    Ok(model)
}

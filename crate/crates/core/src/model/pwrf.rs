//! `PWRF` float container.
//!
//! ```text
//! "PWRF" u32 version u32 layer_count
//! u16 sensor_w u16 sensor_h u32 tau_us u16 in_c u16 in_h u16 in_w
//! per layer: u16 kind u32 payload_len payload
//!   conv (0):       u16 c_out c_in k k, u8 stride, u8 pad, f64 w[n], f64 b[c_out],
//!                   u8 has_bn [f64 eps, f64 gamma[c], beta[c], mean[c], var[c]]
//!   maxpool (2), gap (5): empty
//!   activation (4): u8 function id
//!   dense (6):      u16 out u16 in, f64 w[out*in], f64 b[out]
//! ```
//! All values little-endian; weights are IEEE-754 binary64.

use crate::fuse::BnParams;
use crate::kernels::ActivationKind;

use super::io::{Reader, Writer};
use super::{FloatLayer, FloatModel, LayerKind, ModelError, ModelMeta, FORMAT_VERSION};

pub const PWRF_MAGIC: &[u8; 4] = b"PWRF";

pub fn save_pwrf(model: &FloatModel) -> Vec<u8> {
    let mut out = Writer::default();
    out.bytes(PWRF_MAGIC);
    out.u32(FORMAT_VERSION);
    out.u32(model.layers.len() as u32);
    out.u16(model.meta.sensor_width);
    out.u16(model.meta.sensor_height);
    out.u32(model.meta.tau_us);
    out.dims(&model.input_shape);
    for layer in &model.layers {
        let mut p = Writer::default();
        let kind = match layer {
            FloatLayer::Conv {
                shape,
                w,
                b,
                stride,
                pad,
                bn,
            } => {
                p.dims(shape);
                p.u8(*stride as u8);
                p.u8(*pad as u8);
                p.f64s(w);
                p.f64s(b);
                match bn {
                    Some(bn) => {
                        p.u8(1);
                        p.f64(bn.eps);
                        p.f64s(&bn.gamma);
                        p.f64s(&bn.beta);
                        p.f64s(&bn.mean);
                        p.f64s(&bn.var);
                    }
                    None => p.u8(0),
                }
                LayerKind::ConvPot
            }
            FloatLayer::Activation(kind) => {
                p.u8(kind.id());
                LayerKind::Activation
            }
            FloatLayer::MaxPool => LayerKind::MaxPool,
            FloatLayer::Gap => LayerKind::Gap,
            FloatLayer::Dense {
                out_features,
                in_features,
                w,
                b,
            } => {
                p.dims(&[*out_features, *in_features]);
                p.f64s(w);
                p.f64s(b);
                LayerKind::Dense
            }
        };
        out.section(kind as u16, p);
    }
    out.buf
}

pub fn load_pwrf(bytes: &[u8]) -> Result<FloatModel, ModelError> {
    if bytes.len() < 4 || &bytes[..4] != PWRF_MAGIC {
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
    let input_shape = r.dims::<3>()?;
    let mut layers = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let (kind, mut p) = r.section()?;
        let at = p.pos();
        let layer = match LayerKind::from_u16(kind) {
            Some(LayerKind::ConvPot) => {
                let shape = p.dims::<4>()?;
                let stride = p.u8()? as usize;
                let pad = p.u8()? as usize;
                let w = p.f64s(shape.iter().product())?;
                let b = p.f64s(shape[0])?;
                let bn = match p.u8()? {
                    0 => None,
                    1 => {
                        let eps = p.f64()?;
                        let c = shape[0];
                        Some(BnParams {
                            eps,
                            gamma: p.f64s(c)?,
                            beta: p.f64s(c)?,
                            mean: p.f64s(c)?,
                            var: p.f64s(c)?,
                        })
                    }
                    _ => return Err(ModelError::CorruptSection(at)),
                };
                FloatLayer::Conv {
                    shape,
                    w,
                    b,
                    stride,
                    pad,
                    bn,
                }
            }
            Some(LayerKind::Activation) => FloatLayer::Activation(
                ActivationKind::from_id(p.u8()?).ok_or(ModelError::CorruptSection(at))?,
            ),
            Some(LayerKind::MaxPool) => FloatLayer::MaxPool,
            Some(LayerKind::Gap) => FloatLayer::Gap,
            Some(LayerKind::Dense) => {
                let [out_features, in_features] = p.dims::<2>()?;
                FloatLayer::Dense {
                    out_features,
                    in_features,
                    w: p.f64s(out_features * in_features)?,
                    b: p.f64s(out_features)?,
                }
            }
            _ => return Err(ModelError::UnsupportedLayer(format!("PWRF kind {kind}"))),
        };
        if !p.at_end() {
            return Err(p.corrupt());
        }
        layers.push(layer);
    }
    if !r.at_end() {
        return Err(r.corrupt());
    }
    Ok(FloatModel {
        meta,
        input_shape,
        layers,
    })
}

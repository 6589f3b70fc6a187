use crate::fuse::BnParams;
use crate::kernels::{conv2d_float, global_avg_pool_float, maxpool2, ActivationKind, FloatTensor};

use super::{ModelError, ModelMeta};

/// One layer of a float model. BN stays unfused here; it is folded only
/// when quantizing.
#[derive(Debug, Clone, PartialEq)]
pub enum FloatLayer {
    Conv {
        /// `(C_out, C_in, k, k)`
        shape: [usize; 4],
        w: Vec<f64>,
        b: Vec<f64>,
        stride: usize,
        pad: usize,
        bn: Option<BnParams>,
    },
    Activation(ActivationKind),
    MaxPool,
    Gap,
    Dense {
        out_features: usize,
        in_features: usize,
        w: Vec<f64>,
        b: Vec<f64>,
    },
}

impl FloatLayer {
    pub fn param_count(&self) -> usize {
        match self {
            FloatLayer::Conv { w, b, bn, .. } => {
                w.len() + b.len() + bn.as_ref().map_or(0, |bn| 2 * bn.channels())
            }
            FloatLayer::Dense { w, b, .. } => w.len() + b.len(),
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FloatModel {
    pub meta: ModelMeta,
    /// `(C, H, W)` of one input frame.
    pub input_shape: [usize; 3],
    pub layers: Vec<FloatLayer>,
}

impl FloatModel {
    /// Inference-mode forward pass (BN uses running statistics).
    pub fn forward(&self, x: &FloatTensor) -> Result<FloatTensor, ModelError> {
        let [_, c, h, w] = x.shape;
        if [c, h, w] != self.input_shape {
            return Err(ModelError::ShapeMismatch(format!(
                "input {:?}, model expects {:?}",
                [c, h, w],
                self.input_shape
            )));
        }
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = forward_layer(layer, &cur)?;
        }
        Ok(cur)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(FloatLayer::param_count).sum()
    }
}

pub(crate) fn forward_layer(
    layer: &FloatLayer,
    x: &FloatTensor,
) -> Result<FloatTensor, ModelError> {
    Ok(match layer {
        FloatLayer::Conv {
            shape,
            w,
            b,
            stride,
            pad,
            bn,
        } => {
            let mut y = conv2d_float(x, w, *shape, b, *stride, *pad)?;
            if let Some(bn) = bn {
                let [_, c, h, w] = y.shape;
                for (i, v) in y.data.iter_mut().enumerate() {
                    *v = bn.apply((i / (h * w)) % c, *v);
                }
            }
            y
        }
        FloatLayer::Activation(kind) => FloatTensor {
            shape: x.shape,
            data: x.data.iter().map(|&v| kind.apply(v)).collect(),
        },
        FloatLayer::MaxPool => {
            let (data, shape) = maxpool2(&x.data, x.shape);
            FloatTensor { shape, data }
        }
        FloatLayer::Gap => global_avg_pool_float(x),
        FloatLayer::Dense {
            out_features,
            in_features,
            w,
            b,
        } => {
            let [n, c, h, wd] = x.shape;
            if c * h * wd != *in_features {
                return Err(ModelError::ShapeMismatch(format!(
                    "dense expects {in_features} features, got {:?}",
                    x.shape
                )));
            }
            let flat = FloatTensor {
                shape: [n, *in_features, 1, 1],
                data: x.data.clone(),
            };
            conv2d_float(&flat, w, [*out_features, *in_features, 1, 1], b, 1, 0)?
        }
    })
}

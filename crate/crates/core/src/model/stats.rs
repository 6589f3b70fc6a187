use std::fmt;

use crate::fuse::ConvWeights;

use super::pwrq::weight_section_len;
use super::{LayerSpec, QuantModel};

#[derive(Debug, Clone, PartialEq)]
pub struct LayerStats {
    pub index: usize,
    pub kind: &'static str,
    pub weights: usize,
    /// Serialized weight tensor bytes, header included.
    pub weight_bytes: usize,
    /// Per-channel gain and bias values.
    pub channel_params: usize,
}

impl LayerStats {
    /// Size relative to a 4-byte float per weight.
    pub fn compression(&self) -> f64 {
        4.0 * self.weights as f64 / self.weight_bytes as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelStats {
    pub scheme: &'static str,
    pub layers: Vec<LayerStats>,
    pub conv_weights: usize,
    pub dense_params: usize,
    pub channel_params: usize,
    /// Weights held by power-of-two conv layers.
    pub pot_weights: usize,
    pub pot_bytes: usize,
}

impl ModelStats {
    pub fn total_params(&self) -> usize {
        self.conv_weights + self.dense_params + self.channel_params
    }

    pub fn conv_weight_fraction(&self) -> f64 {
        self.conv_weights as f64 / self.total_params().max(1) as f64
    }

    /// Float bytes (4 per weight) over packed bytes across power-of-two
    /// conv layers. Zero when the model has none.
    pub fn pot_compression(&self) -> f64 {
        if self.pot_bytes == 0 {
            0.0
        } else {
            4.0 * self.pot_weights as f64 / self.pot_bytes as f64
        }
    }
}

pub fn model_stats(model: &QuantModel) -> ModelStats {
    let mut stats = ModelStats {
        scheme: model.scheme.name(),
        layers: vec![],
        conv_weights: 0,
        dense_params: 0,
        channel_params: 0,
        pot_weights: 0,
        pot_bytes: 0,
    };
    for (index, layer) in model.layers.iter().enumerate() {
        let l = match layer {
            LayerSpec::Conv(l) | LayerSpec::Dense(l) => l,
            _ => continue,
        };
        let weights = l.weights.shape().iter().product();
        let weight_bytes = weight_section_len(&l.weights);
        let channel_params = 2 * l.out_channels();
        match layer {
            LayerSpec::Conv(_) => {
                stats.conv_weights += weights;
                stats.channel_params += channel_params;
                if let ConvWeights::Pot(_) = l.weights {
                    stats.pot_weights += weights;
                    stats.pot_bytes += weight_bytes;
                }
            }
            _ => stats.dense_params += weights + l.out_channels(),
        }
        stats.layers.push(LayerStats {
            index,
            kind: layer.kind().name(),
            weights,
            weight_bytes,
            channel_params,
        });
    }
    stats
}

impl fmt::Display for ModelStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "scheme: {}", self.scheme)?;
        writeln!(f, "layer,kind,weights,weight_bytes,float_bytes,ratio")?;
        for l in &self.layers {
            writeln!(
                f,
                "{},{},{},{},{},{:.4}",
                l.index,
                l.kind,
                l.weights,
                l.weight_bytes,
                4 * l.weights,
                l.compression()
            )?;
        }
        writeln!(f, "params_total: {}", self.total_params())?;
        writeln!(f, "params_conv_weights: {}", self.conv_weights)?;
        writeln!(f, "params_channel: {}", self.channel_params)?;
        writeln!(f, "params_dense: {}", self.dense_params)?;
        writeln!(
            f,
            "conv_weight_fraction: {:.6}",
            self.conv_weight_fraction()
        )?;
        writeln!(f, "pot_weights: {}", self.pot_weights)?;
        writeln!(f, "pot_packed_bytes: {}", self.pot_bytes)?;
        writeln!(f, "pot_float_bytes: {}", 4 * self.pot_weights)?;
        write!(f, "compression_ratio: {:.6}", self.pot_compression())
    }
}

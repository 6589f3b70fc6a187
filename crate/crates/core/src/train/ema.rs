use super::{TrainError, WeightQuantizer};

/// Exponential moving average of the master parameters.
///
/// `shadow` stays in full precision. When a quantizer is attached,
/// `quantized` holds the quantized view of the shadow and is refreshed after
/// every update; that view is what gets evaluated.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaModel {
    pub shadow: Vec<f64>,
    pub decay: f64,
    quantizer: Option<WeightQuantizer>,
    quantized: Vec<f64>,
}

impl EmaModel {
    pub fn new(
        initial: Vec<f64>,
        decay: f64,
        quantizer: Option<WeightQuantizer>,
    ) -> Result<Self, TrainError> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(TrainError::BadConfig(format!(
                "EMA decay {decay} outside [0, 1]"
            )));
        }
        let mut ema = Self {
            quantized: initial.clone(),
            shadow: initial,
            decay,
            quantizer,
        };
        ema.requantize();
        Ok(ema)
    }

    fn requantize(&mut self) {
        self.quantized = match &self.quantizer {
            Some(q) => q.apply(&self.shadow),
            None => self.shadow.clone(),
        };
    }

    /// Parameters used for evaluation.
    pub fn view(&self) -> &[f64] {
        &self.quantized
    }
}

/// `shadow <- decay * shadow + (1 - decay) * params`, then re-quantize.
pub fn ema_update(ema: &mut EmaModel, params: &[f64], decay: f64) -> Result<(), TrainError> {
    if params.len() != ema.shadow.len() {
        return Err(TrainError::ShapeMismatch(format!(
            "{} parameters, shadow holds {}",
            params.len(),
            ema.shadow.len()
        )));
    }
    for (s, &p) in ema.shadow.iter_mut().zip(params) {
        *s = decay * *s + (1.0 - decay) * p;
    }
    ema.decay = decay;
    ema.requantize();
    Ok(())
}

//! Desk-scale quantization-aware training on the synthetic moving-bar task.
//!
//! The baseline trains a small float network from scratch. Every QAT mode
//! starts from the trained baseline, runs the forward pass with
//! fake-quantized weights, passes gradients straight through to the
//! full-precision master weights and keeps an EMA shadow whose quantized
//! view is what gets evaluated and exported.

mod data;
mod ema;
mod net;

pub use data::{
    accuracy, eval, moving_bar_dataset, moving_bar_frame, Classifier, Dataset, OnEngine,
};
pub use ema::{ema_update, EmaModel};
pub use net::{
    forward_eval, loss_and_grad, BatchStats, Layout, StepResult, ToyNet, BN_MOMENTUM, CLASSES,
    CONV_CHANNELS, INPUT_SIZE,
};

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::event_io::{EventError, SynthConfig};
use crate::model::{
    quantize_model, Engine, FloatModel, ModelError, QuantModel, QuantizeOptions, Scheme,
};
use crate::quantize::{fake_quant_pot, fake_quant_uniform, pot_scale, ste_backward};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("loss became non-finite")]
    NonFiniteLoss,
    #[error("quantization-aware modes need a trained baseline model")]
    MissingBaseline,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("bad configuration: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Event(#[from] EventError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Baseline,
    Int8Wa,
    Int4w,
    Log4w,
    Log4wInt8a,
}

impl Mode {
    pub const ALL: [Mode; 5] = [
        Mode::Baseline,
        Mode::Int8Wa,
        Mode::Int4w,
        Mode::Log4w,
        Mode::Log4wInt8a,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Int8Wa => "int8_wa",
            Mode::Int4w => "int4w",
            Mode::Log4w => "log4w",
            Mode::Log4wInt8a => "log4w_int8a",
        }
    }

    /// Export scheme; `None` for the float baseline.
    pub fn scheme(self) -> Option<Scheme> {
        match self {
            Mode::Baseline => None,
            Mode::Int8Wa => Some(Scheme::Int8),
            Mode::Int4w => Some(Scheme::Int4w),
            Mode::Log4w => Some(Scheme::Log4w),
            Mode::Log4wInt8a => Some(Scheme::Log4wInt8a),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown mode {s:?}"))
    }
}

/// Fake quantizer for one weight tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerQuant {
    Pot,
    Uniform(u8),
}

impl LayerQuant {
    pub fn apply(self, w: &[f64]) -> Vec<f64> {
        match self {
            LayerQuant::Pot => fake_quant_pot(w),
            LayerQuant::Uniform(bits) => fake_quant_uniform(w, bits),
        }
    }
}

/// Fake quantizers for the three conv weight tensors and the dense weights.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WeightQuantizer {
    pub layers: [LayerQuant; 4],
}

impl WeightQuantizer {
    pub fn for_mode(mode: Mode, exempt_first_last: bool) -> Option<Self> {
        let q = match mode {
            Mode::Baseline => return None,
            Mode::Int8Wa => LayerQuant::Uniform(8),
            Mode::Int4w => LayerQuant::Uniform(4),
            Mode::Log4w | Mode::Log4wInt8a => LayerQuant::Pot,
        };
        let mut layers = [q; 4];
        if exempt_first_last {
            layers[0] = LayerQuant::Uniform(8);
            layers[3] = LayerQuant::Uniform(8);
        }
        Some(Self { layers })
    }

    /// Copy of `params` with every weight tensor replaced by its quantized value.
    pub fn apply(&self, params: &[f64]) -> Vec<f64> {
        let mut out = params.to_vec();
        for (range, q) in Layout::new().weight_ranges().into_iter().zip(self.layers) {
            let w = q.apply(&params[range.clone()]);
            out[range].copy_from_slice(&w);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LrSchedule {
    /// `initial * gamma^k` where `k` counts milestones strictly before the
    /// (1-based) epoch.
    Step {
        initial: f64,
        milestones: Vec<usize>,
        gamma: f64,
    },
    /// Linear interpolation from `start` (first epoch) to `end` (last epoch).
    Linear { start: f64, end: f64 },
}

impl LrSchedule {
    pub fn lr(&self, epoch: usize, epochs: usize) -> f64 {
        match self {
            LrSchedule::Step {
                initial,
                milestones,
                gamma,
            } => initial * gamma.powi(milestones.iter().filter(|&&m| m < epoch).count() as i32),
            LrSchedule::Linear { start, end } => {
                if epochs <= 1 {
                    *start
                } else {
                    let f = (epoch - 1) as f64 / (epochs - 1) as f64;
                    start + (end - start) * f
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    pub epochs: usize,
    pub schedule: LrSchedule,
    pub momentum: f64,
    /// EMA decay; `None` disables the EMA shadow.
    pub ema_decay: Option<f64>,
    pub seed: u64,
    pub exempt_first_last: bool,
    pub batch_size: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    /// Frames used to calibrate activation ranges at export.
    pub calib_samples: usize,
    pub tau_us: u32,
    pub synth: SynthConfig,
}

pub const DEFAULT_SEED: u64 = 7;

impl TrainConfig {
    /// Defaults for `mode`: 20 epochs; the baseline decays its learning rate
    /// linearly, QAT modes start at 1e-4 and drop by 10x after epochs 5, 8
    /// and 15. The baseline has no EMA.
    pub fn new(mode: Mode, seed: u64) -> Self {
        let (schedule, ema_decay) = match mode {
            Mode::Baseline => (
                LrSchedule::Linear {
                    start: 0.05,
                    end: 1e-3,
                },
                None,
            ),
            _ => (
                LrSchedule::Step {
                    initial: 1e-4,
                    milestones: vec![5, 8, 15],
                    gamma: 0.1,
                },
                Some(0.999),
            ),
        };
        Self {
            mode,
            epochs: 20,
            schedule,
            momentum: 0.9,
            ema_decay,
            seed,
            exempt_first_last: false,
            batch_size: 16,
            train_samples: 512,
            test_samples: 256,
            calib_samples: 64,
            tau_us: 10_000,
            synth: SynthConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::BadConfig(m.into()));
        if self.epochs == 0
            || self.batch_size == 0
            || self.train_samples == 0
            || self.test_samples == 0
        {
            return bad("epochs, batch size and sample counts must be positive");
        }
        if self.tau_us == 0 {
            return bad("window length must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if let Some(d) = self.ema_decay {
            if !(d > 0.0 && d < 1.0) {
                return bad("EMA decay must lie in (0, 1)");
            }
        }
        for epoch in 1..=self.epochs {
            let lr = self.schedule.lr(epoch, self.epochs);
            if !(lr > 0.0 && lr.is_finite()) {
                return bad("learning rate must stay positive");
            }
        }
        Ok(())
    }

    /// Stream seeds of the training split start here; the test split starts
    /// `2^19` later.
    fn data_seed(&self) -> u64 {
        self.seed.wrapping_mul(1 << 20)
    }

    pub fn train_set(&self) -> Result<Dataset, TrainError> {
        moving_bar_dataset(
            self.train_samples,
            self.data_seed(),
            &self.synth,
            self.tau_us,
        )
    }

    pub fn test_set(&self) -> Result<Dataset, TrainError> {
        moving_bar_dataset(
            self.test_samples,
            self.data_seed().wrapping_add(1 << 19),
            &self.synth,
            self.tau_us,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mode: Mode,
    pub train_acc: f64,
    pub test_acc: f64,
    pub loss: f64,
}

pub const METRICS_HEADER: &str = "epoch,mode,train_acc,test_acc,loss";

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{:.9}\n",
            r.epoch, r.mode, r.train_acc, r.test_acc, r.loss
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub mode: Mode,
    /// Master weights (the EMA shadow when enabled) with BN unfused.
    pub float: FloatModel,
    /// Exported quantized model for QAT modes.
    pub quant: Option<QuantModel>,
    pub metrics: Vec<EpochMetrics>,
    /// Test accuracy of the final model as evaluated during training.
    pub test_acc: f64,
}

/// Loss and gradient with respect to the master parameters.
///
/// The forward pass sees quantized weights; weight gradients pass straight
/// through inside `[-s_w, s_w]`, which covers every weight since `s_w` is
/// the layer maximum.
pub fn forward_backward(
    net: &ToyNet,
    x: &[f64],
    labels: &[usize],
    quantizer: Option<&WeightQuantizer>,
) -> Result<StepResult, TrainError> {
    let Some(q) = quantizer else {
        return loss_and_grad(&net.params, net, x, labels);
    };
    let mut step = loss_and_grad(&q.apply(&net.params), net, x, labels)?;
    for range in Layout::new().weight_ranges() {
        let w = &net.params[range.clone()];
        let s = pot_scale(w);
        let g = ste_backward(&step.grads[range.clone()], w, -s, s);
        step.grads[range].copy_from_slice(&g);
    }
    Ok(step)
}

fn update_running(net: &mut ToyNet, stats: &BatchStats) {
    for i in 0..3 {
        for (r, b) in net.running_mean[i].iter_mut().zip(&stats.mean[i]) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
        }
        for (r, b) in net.running_var[i].iter_mut().zip(&stats.var[i]) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
        }
    }
}

fn with_params(net: &ToyNet, params: &[f64]) -> ToyNet {
    ToyNet {
        params: params.to_vec(),
        running_mean: net.running_mean.clone(),
        running_var: net.running_var.clone(),
    }
}

/// Exports master weights to a quantized model for `scheme`.
pub fn export_quant(
    float: &FloatModel,
    calib: &Dataset,
    calib_samples: usize,
    scheme: Scheme,
    exempt_first_last: bool,
) -> Result<QuantModel, TrainError> {
    let opts = QuantizeOptions {
        exempt_first_last,
        ..QuantizeOptions::default()
    };
    Ok(quantize_model(
        float,
        &calib.head(calib_samples),
        scheme,
        opts,
    )?)
}

/// Trains one mode. QAT modes require `baseline`.
pub fn train(cfg: &TrainConfig, baseline: Option<&FloatModel>) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let quantizer = WeightQuantizer::for_mode(cfg.mode, cfg.exempt_first_last);
    let mut net = match (cfg.mode, baseline) {
        (Mode::Baseline, _) => ToyNet::init(cfg.seed),
        (_, Some(b)) => ToyNet::from_float_model(b)?,
        (_, None) => return Err(TrainError::MissingBaseline),
    };
    let train_set = cfg.train_set()?;
    let test_set = cfg.test_set()?;
    let mut ema = match cfg.ema_decay {
        Some(d) if cfg.mode != Mode::Baseline => {
            Some(EmaModel::new(net.params.clone(), d, quantizer.clone())?)
        }
        _ => None,
    };
    let mut velocity = vec![0.0; net.params.len()];
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut last_test = 0.0;
    let mut quant = None;

    for epoch in 1..=cfg.epochs {
        let lr = cfg.schedule.lr(epoch, cfg.epochs);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(
            cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
        );
        order.shuffle(&mut rng);

        let (mut loss_sum, mut correct) = (0.0, 0);
        for batch in order.chunks(cfg.batch_size) {
            let (x, labels) = train_set.gather(batch);
            let step = forward_backward(&net, &x, &labels, quantizer.as_ref())?;
            loss_sum += step.loss * batch.len() as f64;
            correct += step.correct;
            update_running(&mut net, &step.stats);
            for ((p, v), g) in net.params.iter_mut().zip(&mut velocity).zip(&step.grads) {
                *v = cfg.momentum * *v + g;
                *p -= lr * *v;
            }
            if let Some(e) = ema.as_mut() {
                let decay = e.decay;
                ema_update(e, &net.params, decay)?;
            }
        }

        let master = ema.as_ref().map_or(&net.params, |e| &e.shadow);
        let float = with_params(&net, master).to_float_model(cfg.tau_us);
        last_test = match cfg.mode.scheme() {
            None => eval(&net, &test_set)?,
            Some(scheme) if scheme.activations() == crate::model::ActivationMode::Int8 => {
                let q = export_quant(
                    &float,
                    &train_set,
                    cfg.calib_samples,
                    scheme,
                    cfg.exempt_first_last,
                )?;
                let acc = eval(&OnEngine(&q, Engine::Float), &test_set)?;
                quant = Some(q);
                acc
            }
            Some(_) => {
                let view = match (&ema, &quantizer) {
                    (Some(e), _) => e.view().to_vec(),
                    (None, Some(q)) => q.apply(&net.params),
                    (None, None) => net.params.clone(),
                };
                eval(&with_params(&net, &view), &test_set)?
            }
        };
        metrics.push(EpochMetrics {
            epoch,
            mode: cfg.mode,
            train_acc: correct as f64 / train_set.len() as f64,
            test_acc: last_test,
            loss: loss_sum / train_set.len() as f64,
        });
    }

    let master = ema.as_ref().map_or(&net.params, |e| &e.shadow);
    let float = with_params(&net, master).to_float_model(cfg.tau_us);
    if let (Some(scheme), None) = (cfg.mode.scheme(), &quant) {
        quant = Some(export_quant(
            &float,
            &train_set,
            cfg.calib_samples,
            scheme,
            cfg.exempt_first_last,
        )?);
    }
    Ok(TrainOutcome {
        mode: cfg.mode,
        float,
        quant,
        metrics,
        test_acc: last_test,
    })
}

use crate::event_io::{gen_synthetic_bar, window_iter, EventFrame, SynthConfig};
use crate::kernels::FloatTensor;
use crate::model::{argmax, run_tensor, Engine, FloatModel, QuantModel, RunOptions};

use super::net::{forward_eval, ToyNet, CLASSES, INPUT_SIZE};
use super::TrainError;

/// Labelled event frames stored as one `[N, 1, H, W]` block.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub frames: FloatTensor,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn sample_len(&self) -> usize {
        let [_, c, h, w] = self.frames.shape;
        c * h * w
    }

    /// Flat pixels and labels for the given sample indices.
    pub fn gather(&self, indices: &[usize]) -> (Vec<f64>, Vec<usize>) {
        let per = self.sample_len();
        let mut x = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            x.extend_from_slice(&self.frames.data[i * per..][..per]);
        }
        (x, indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// The first `n` samples as a tensor.
    pub fn head(&self, n: usize) -> FloatTensor {
        let n = n.min(self.len());
        let [_, c, h, w] = self.frames.shape;
        FloatTensor {
            shape: [n, c, h, w],
            data: self.frames.data[..n * self.sample_len()].to_vec(),
        }
    }
}

/// First window of a synthetic moving-bar stream; an all-zero frame if the
/// stream happens to be empty.
pub fn moving_bar_frame(
    direction: u8,
    seed: u64,
    cfg: &SynthConfig,
    tau_us: u32,
) -> Result<EventFrame, TrainError> {
    let (stream, _) = gen_synthetic_bar(direction, seed, cfg)?;
    Ok(window_iter(&stream, tau_us)
        .next()
        .unwrap_or_else(|| EventFrame::zeros(cfg.width, cfg.height)))
}

/// `count` samples cycling through the eight directions. Sample `i` uses
/// stream seed `base_seed + i`.
pub fn moving_bar_dataset(
    count: usize,
    base_seed: u64,
    cfg: &SynthConfig,
    tau_us: u32,
) -> Result<Dataset, TrainError> {
    if cfg.width as usize != INPUT_SIZE || cfg.height as usize != INPUT_SIZE {
        return Err(TrainError::BadConfig(format!(
            "sensor must be {INPUT_SIZE}x{INPUT_SIZE} for the toy network"
        )));
    }
    let mut data = Vec::with_capacity(count * INPUT_SIZE * INPUT_SIZE);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let label = i % CLASSES;
        let frame = moving_bar_frame(label as u8, base_seed.wrapping_add(i as u64), cfg, tau_us)?;
        data.extend(frame.values().iter().map(|&v| v as f64));
        labels.push(label);
    }
    Ok(Dataset {
        frames: FloatTensor {
            shape: [count, 1, INPUT_SIZE, INPUT_SIZE],
            data,
        },
        labels,
    })
}

/// Anything that maps a batch of frames to per-class scores.
pub trait Classifier {
    fn logits(&self, x: &FloatTensor) -> Result<Vec<Vec<f64>>, TrainError>;
}

impl Classifier for ToyNet {
    fn logits(&self, x: &FloatTensor) -> Result<Vec<Vec<f64>>, TrainError> {
        Ok(forward_eval(&self.params, self, &x.data, x.shape[0]))
    }
}

impl Classifier for FloatModel {
    fn logits(&self, x: &FloatTensor) -> Result<Vec<Vec<f64>>, TrainError> {
        let y = self.forward(x)?;
        let per = y.data.len() / x.shape[0].max(1);
        Ok(y.data.chunks(per.max(1)).map(<[f64]>::to_vec).collect())
    }
}

/// A quantized model bound to one execution engine.
pub struct OnEngine<'a>(pub &'a QuantModel, pub Engine);

impl Classifier for OnEngine<'_> {
    fn logits(&self, x: &FloatTensor) -> Result<Vec<Vec<f64>>, TrainError> {
        let opts = RunOptions { keep_taps: false };
        Ok(run_tensor(self.0, x, self.1, opts)?.logits())
    }
}

/// Fraction of samples whose arg-max logit (lowest index on ties) equals the label.
pub fn accuracy(logits: &[Vec<f64>], labels: &[usize]) -> f64 {
    let hits = logits
        .iter()
        .zip(labels)
        .filter(|(row, &label)| argmax(row) == label)
        .count();
    hits as f64 / labels.len() as f64
}

const EVAL_CHUNK: usize = 64;

pub fn eval(model: &impl Classifier, data: &Dataset) -> Result<f64, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut logits = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (x, _) = data.gather(chunk);
        let [_, c, h, w] = data.frames.shape;
        let t = FloatTensor {
            shape: [chunk.len(), c, h, w],
            data: x,
        };
        logits.extend(model.logits(&t)?);
    }
    Ok(accuracy(&logits, &data.labels))
}

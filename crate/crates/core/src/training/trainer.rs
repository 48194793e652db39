use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::Task;
use super::loss::inverse_frequency_weights;
use super::metrics::{multi_label_metrics, single_label_metrics, EpochMetrics};
use super::synth::Dataset;
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::event::{stack_events, FrameTensor};
use crate::model::{attribute_targets, batch_loss, forward_sample, Labels, ModelParams, SampleView};
use crate::tensor::Mat;

/// A sample with its events already stacked for the model.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample {
    pub id: String,
    pub labels: Vec<usize>,
    pub events: FrameTensor,
    pub rgb: FrameTensor,
}

impl PreparedSample {
    pub fn view(&self) -> SampleView<'_> {
        SampleView {
            events: &self.events,
            rgb: &self.rgb,
        }
    }

    pub fn flipped(&self) -> Self {
        Self {
            id: self.id.clone(),
            labels: self.labels.clone(),
            events: self.events.flipped_horizontal(),
            rgb: self.rgb.flipped_horizontal(),
        }
    }
}

pub fn prepare(dataset: &Dataset, event_bins: usize) -> Result<Vec<PreparedSample>> {
    let g = &dataset.geometry;
    dataset
        .samples
        .iter()
        .map(|s| {
            if s.events.width() != g.sensor_width || s.events.height() != g.sensor_height {
                return Err(Error::shape(format!("sample `{}` has a different sensor size", s.id)));
            }
            if s.rgb.width() != g.sensor_width as usize || s.rgb.height() != g.sensor_height as usize {
                return Err(Error::shape(format!("sample `{}` RGB frames have a different size", s.id)));
            }
            if s.labels.iter().any(|&l| l >= g.num_classes) {
                return Err(Error::invalid(format!("sample `{}` has a label outside 0..{}", s.id, g.num_classes)));
            }
            Ok(PreparedSample {
                id: s.id.clone(),
                labels: s.labels.clone(),
                events: stack_events(&s.events, event_bins, g.t_start, g.t_end)?,
                rgb: s.rgb.clone(),
            })
        })
        .collect()
}

/// Configured attribute weights, or inverse frequency over `data`.
pub fn attribute_weights(params: &ModelParams, data: &[PreparedSample]) -> Option<Vec<f64>> {
    let spec = params.spec();
    if spec.train.task != Task::MultiLabel {
        return None;
    }
    spec.train.attribute_weights.clone().or_else(|| {
        let labels: Vec<&Labels> = data.iter().map(|s| s.labels.as_slice()).collect();
        Some(inverse_frequency_weights(&attribute_targets(&labels, spec.geometry.num_classes)))
    })
}

/// Per-sample outputs of an evaluation pass.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub loss: f64,
    /// `[N, classes]`.
    pub logits: Mat,
    /// `[N, F]` pre-classifier embeddings.
    pub embeddings: Mat,
}

pub fn evaluate(params: &ModelParams, data: &[PreparedSample], weights: Option<&[f64]>) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::invalid("no samples to evaluate"));
    }
    let mut loss = 0.0;
    let mut logit_rows = Vec::with_capacity(data.len());
    let mut embed_rows = Vec::with_capacity(data.len());
    for s in data {
        let mut tape = Tape::new();
        let vars = params.leaves(&mut tape);
        let (l, traces) = batch_loss(&mut tape, params, &vars, &[s.view()], &[&s.labels], weights)?;
        loss += tape.value(l).data()[0];
        logit_rows.push(tape.value(traces[0].logits).row(0).to_vec());
        embed_rows.push(tape.value(traces[0].pooled).row(0).to_vec());
    }
    Ok(Evaluation {
        loss: loss / data.len() as f64,
        logits: Mat::from_rows(&logit_rows),
        embeddings: Mat::from_rows(&embed_rows),
    })
}

/// Metrics of `params` on `data`, tagged with the ablation variant.
pub fn evaluate_metrics(params: &ModelParams, data: &[PreparedSample], weights: Option<&[f64]>, epoch: usize) -> Result<EpochMetrics> {
    let ev = evaluate(params, data, weights)?;
    let variant = params.spec().train.ablation.tag();
    match params.spec().train.task {
        Task::SingleLabel => {
            let labels: Vec<usize> = data.iter().map(|s| s.labels[0]).collect();
            single_label_metrics(epoch, ev.loss, &ev.logits, &labels, &variant)
        }
        Task::MultiLabel => {
            let m = params.spec().geometry.num_classes;
            let truth: Vec<Vec<bool>> = data
                .iter()
                .map(|s| (0..m).map(|j| s.labels.contains(&j)).collect())
                .collect();
            multi_label_metrics(epoch, ev.loss, &ev.logits, &truth, &variant)
        }
    }
}

/// Epoch RNG: a function of the seed and epoch only, so resumed runs
/// replay the same shuffles and flips.
fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

/// One SGD pass over `data` in a seeded order.
pub fn train_epoch(params: &mut ModelParams, data: &[PreparedSample], weights: Option<&[f64]>, epoch: usize) -> Result<()> {
    let cfg = params.spec().train.clone();
    let mut rng = epoch_rng(cfg.seed, epoch);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    for batch in order.chunks(cfg.batch_size) {
        let owned: Vec<PreparedSample> = batch
            .iter()
            .map(|&i| {
                if cfg.hflip && rng.gen_bool(0.5) {
                    data[i].flipped()
                } else {
                    data[i].clone()
                }
            })
            .collect();
        let views: Vec<SampleView<'_>> = owned.iter().map(PreparedSample::view).collect();
        let labels: Vec<&Labels> = owned.iter().map(|s| s.labels.as_slice()).collect();
        let mut tape = Tape::new();
        let vars = params.leaves(&mut tape);
        let (loss, _) = batch_loss(&mut tape, params, &vars, &views, &labels, weights)?;
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::Numerical(format!("loss is {value} in epoch {epoch}")));
        }
        let grads = tape.backward(loss);
        let g: Vec<Mat> = vars
            .iter()
            .zip(params.tensors())
            .map(|(v, m)| grads.get(*v, m.shape()))
            .collect();
        params.sgd_step(&g, cfg.learning_rate)?;
    }
    Ok(())
}

/// Trains epochs `start_epoch + 1 ..= cfg.epochs`. After each epoch the
/// model is evaluated on `data` and `on_epoch` sees the metrics and params.
pub fn train<F>(params: &mut ModelParams, data: &[PreparedSample], start_epoch: usize, mut on_epoch: F) -> Result<Vec<EpochMetrics>>
where
    F: FnMut(&EpochMetrics, &ModelParams) -> Result<()>,
{
    if data.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    let weights = attribute_weights(params, data);
    let epochs = params.spec().train.epochs;
    let mut history = Vec::new();
    for epoch in start_epoch + 1..=epochs {
        train_epoch(params, data, weights.as_deref(), epoch)?;
        let m = evaluate_metrics(params, data, weights.as_deref(), epoch)?;
        if !m.loss.is_finite() {
            return Err(Error::Numerical(format!("evaluation loss is {} after epoch {epoch}", m.loss)));
        }
        on_epoch(&m, params)?;
        history.push(m);
    }
    Ok(history)
}

/// One sample on its own tape; returns the pooled embedding and logits.
pub fn forward_values(params: &ModelParams, sample: &PreparedSample) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut tape = Tape::new();
    let vars = params.leaves(&mut tape);
    let t = forward_sample(&mut tape, params.spec(), params.layout(), &vars, sample.view())?;
    Ok((tape.value(t.pooled).row(0).to_vec(), tape.value(t.logits).row(0).to_vec()))
}

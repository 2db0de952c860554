use std::fmt::Write as _;

use super::metrics::{argmax, MetricsReport};
use super::optim::{adam_step, AdamConfig, AdamState};
use crate::autodiff::{softmax_rows, Tape};
use crate::data::{batch_iterator, Sample};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

const EVAL_BATCH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    CategoricalCrossEntropy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub adam: AdamConfig,
    pub loss: LossKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 16,
            max_epochs: 40,
            adam: AdamConfig::default(),
            loss: LossKind::CategoricalCrossEntropy,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("bad learning rate {}", self.learning_rate)));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch_size and max_epochs must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EpochCurve {
    pub records: Vec<EpochRecord>,
}

impl EpochCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,train_acc,val_loss,val_acc\n");
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                r.epoch, r.train_loss, r.train_acc, r.val_loss, r.val_acc
            );
        }
        s
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }
}

fn stack_batch(samples: &[Sample], idx: &[usize]) -> Result<(Tensor, Vec<usize>)> {
    let pixels: Vec<&Tensor> = idx.iter().map(|&i| &samples[i].pixels).collect();
    let labels = idx.iter().map(|&i| samples[i].label).collect();
    Ok((Tensor::stack(&pixels)?, labels))
}

pub fn train(model: &mut Model, train: &[Sample], val: &[Sample], cfg: &TrainConfig) -> Result<EpochCurve> {
    train_with_progress(model, train, val, cfg, |_| {})
}

/// Runs `cfg.max_epochs` epochs of minibatch Adam on `train`, evaluating on
/// `val` after each epoch. Frozen parameters are never touched.
pub fn train_with_progress(
    model: &mut Model,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<EpochCurve> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config("training and validation sets must be non-empty".into()));
    }
    let trainable = model.trainable_indices();
    let mut state = AdamState::new();
    let mut curve = EpochCurve::default();
    let order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (b, batch) in batch_iterator(&order, cfg.batch_size, cfg.seed, epoch)?.iter().enumerate() {
            let (x, labels) = stack_batch(train, batch)?;
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, true);
            let logits = model.forward_with(&mut tape, &x, &bound)?.logits;
            let loss = tape.softmax_cross_entropy(&logits, &labels)?;
            let value = loss.values()[0];
            if !value.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: b + 1,
                    loss: value,
                });
            }
            loss_sum += value * batch.len() as f64;
            let k = model.num_classes();
            correct += logits
                .values()
                .chunks_exact(k)
                .zip(&labels)
                .filter(|(row, &y)| argmax(row) == y)
                .count();

            if trainable.is_empty() {
                continue;
            }
            let grads = tape.backward(&loss)?;
            let grads: Vec<Tensor> = trainable
                .iter()
                .map(|&i| {
                    grads
                        .get(&bound[i])
                        .cloned()
                        .ok_or_else(|| Error::Graph(format!("no gradient for parameter {i}")))
                })
                .collect::<Result<_>>()?;
            drop(tape);
            drop(bound);
            let mut params: Vec<Tensor> = trainable
                .iter()
                .map(|&i| model.parameters()[i].value.detach())
                .collect();
            adam_step(&mut params, &grads, &mut state, cfg.learning_rate, &cfg.adam)?;
            for (&i, p) in trainable.iter().zip(params) {
                model.set_parameter(i, p)?;
            }
        }
        let report = evaluate(model, val)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            train_acc: correct as f64 / train.len() as f64,
            val_loss: report.loss.unwrap_or(f64::NAN),
            val_acc: report.accuracy,
        };
        on_epoch(&record);
        curve.records.push(record);
    }
    Ok(curve)
}

/// Softmax probabilities for a batch of images, one row per sample.
pub fn predict_proba(model: &Model, x: &Tensor) -> Result<Vec<Vec<f64>>> {
    let logits = model.forward(x)?;
    let k = model.num_classes();
    let labels = vec![0; x.shape().batch];
    let (probs, _) = softmax_rows(logits.values(), k, &labels);
    Ok(probs.chunks_exact(k).map(<[f64]>::to_vec).collect())
}

/// Argmax predictions, metrics, and mean cross-entropy over `samples`.
pub fn evaluate(model: &Model, samples: &[Sample]) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::Value("cannot evaluate zero samples".into()));
    }
    let k = model.num_classes();
    let mut truth = Vec::with_capacity(samples.len());
    let mut predicted = Vec::with_capacity(samples.len());
    let mut loss_sum = 0.0;
    let idx: Vec<usize> = (0..samples.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, labels) = stack_batch(samples, chunk)?;
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Value(format!("label {bad} out of range for {k} classes")));
        }
        let logits = model.forward(&x)?;
        let (_, loss) = softmax_rows(logits.values(), k, &labels);
        loss_sum += loss * chunk.len() as f64;
        predicted.extend(logits.values().chunks_exact(k).map(argmax));
        truth.extend(labels);
    }
    let mut report = MetricsReport::from_predictions(&truth, &predicted, k)?;
    report.loss = Some(loss_sum / samples.len() as f64);
    Ok(report)
}

//! Joint optimization of the classifier and the confusion heads.

use crate::data::{LabeledDataset, Task, TrainView};
use crate::diff::{Graph, ParamSet};
use crate::error::{Error, Result};
use crate::model::{prediction_from_probs, Model};
use crate::morph::{dice, Mask};
use crate::objective::{self, combined_loss, LambdaSchedule, RegularizerKind, DEFAULT_TRACE_WEIGHT};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    /// Seed of the minibatch order.
    #[serde(default)]
    pub seed: u64,
    pub regularizer: RegularizerKind,
    pub lambda: LambdaSchedule,
    /// Constant weight of the trace penalty.
    #[serde(default = "default_trace_weight")]
    pub trace_weight: f64,
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_adam_eps() -> f64 {
    1e-8
}

fn default_trace_weight() -> f64 {
    DEFAULT_TRACE_WEIGHT
}

impl TrainConfig {
    pub fn new(epochs: usize, batch_size: usize, learning_rate: f64, seed: u64, regularizer: RegularizerKind, lambda: LambdaSchedule) -> Self {
        TrainConfig {
            epochs,
            batch_size,
            learning_rate,
            beta1: default_beta1(),
            beta2: default_beta2(),
            adam_eps: default_adam_eps(),
            seed,
            regularizer,
            lambda,
            trace_weight: DEFAULT_TRACE_WEIGHT,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config("train.learning_rate", "must be positive"));
        }
        for (key, b) in [("train.beta1", self.beta1), ("train.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(key, "must lie in [0, 1)"));
            }
        }
        if !(self.adam_eps.is_finite() && self.adam_eps > 0.0) {
            return Err(Error::config("train.adam_eps", "must be positive"));
        }
        if !(self.trace_weight.is_finite() && self.trace_weight >= 0.0) {
            return Err(Error::config("train.trace_weight", "must be non-negative"));
        }
        self.lambda.validate()
    }

    /// Weight of the penalty during `epoch`.
    pub fn lambda_at(&self, epoch: usize) -> f64 {
        match self.regularizer {
            RegularizerKind::None => 0.0,
            RegularizerKind::Trace => self.trace_weight,
            RegularizerKind::Entropy | RegularizerKind::Info => self.lambda.lambda_at(epoch),
        }
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        Adam { lr, beta1, beta2, eps, t: 0, m: zeros.clone(), v: zeros }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// Applies one update from the accumulated gradients.
    pub fn step(&mut self, params: &mut ParamSet) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grad = p.grad.data();
            let value = p.value.data_mut();
            for k in 0..value.len() {
                let g = grad[k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g * g;
                value[k] -= self.lr * (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Metrics of one completed epoch. Evaluation fields are filled by the hook.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lambda: f64,
    pub train_loss: f64,
    pub train_nll: f64,
    pub penalty: f64,
    pub train_metric: Option<f64>,
    pub test_metric: Option<f64>,
    pub entropy: Option<f64>,
    /// Mean column TV between each annotator's learned and generating confusion.
    pub recovery_tv: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Evaluation of the untrained model.
    pub initial: Option<EpochRecord>,
    pub records: Vec<EpochRecord>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl TrainReport {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    /// Epoch with the highest test metric, earliest on ties.
    pub fn best(&self) -> Option<&EpochRecord> {
        self.records.iter().filter(|r| r.test_metric.is_some()).fold(None, |best: Option<&EpochRecord>, r| match best {
            Some(b) if b.test_metric >= r.test_metric => Some(b),
            _ => Some(r),
        })
    }

    /// One row per epoch.
    pub fn to_csv(&self) -> String {
        let tv_cols = self.records.iter().map(|r| r.recovery_tv.len()).max().unwrap_or(0);
        let mut out = String::from("epoch,lambda,train_loss,train_nll,penalty,train_metric,test_metric,entropy");
        for r in 0..tv_cols {
            let _ = write!(out, ",recovery_tv_{r}");
        }
        out.push('\n');
        for r in &self.records {
            let _ = write!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.epoch,
                r.lambda,
                r.train_loss,
                r.train_nll,
                r.penalty,
                opt(r.train_metric),
                opt(r.test_metric),
                opt(r.entropy)
            );
            for k in 0..tv_cols {
                let _ = write!(out, ",{}", opt(r.recovery_tv.get(k).copied()));
            }
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Called with the model after every epoch (and once before training with
/// epoch `0` and no losses); fills the evaluation fields of the record.
pub type EvalHook<'h> = dyn FnMut(&Model, &mut EpochRecord) -> Result<()> + 'h;

/// Runs `config.epochs` epochs of minibatch Adam on the combined loss.
pub fn train(config: &TrainConfig, mut model: Model, view: &TrainView, hook: &mut EvalHook) -> Result<(Model, TrainReport)> {
    config.validate()?;
    check_compatible(&model, view)?;
    let mut adam = Adam::new(model.params(), config.learning_rate, config.beta1, config.beta2, config.adam_eps);
    let mut report = TrainReport::default();
    let mut initial = EpochRecord::default();
    hook(&model, &mut initial)?;
    report.initial = Some(initial);
    for epoch in 0..config.epochs {
        let lambda = config.lambda_at(epoch);
        let (mut loss_sum, mut nll_sum, mut pen_sum, mut batches) = (0.0, 0.0, 0.0, 0usize);
        for (b, batch) in view.batches(config.batch_size, config.seed, epoch).enumerate() {
            let mut g = Graph::new();
            let x = g.constant(batch.inputs);
            let f = model.forward(&mut g, x)?;
            let loss = combined_loss(&mut g, &f, &batch.labels, lambda, config.regularizer)?;
            let total = g.value(loss.total).item()?;
            if !total.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b, lambda });
            }
            loss_sum += total;
            nll_sum += g.value(loss.nll).item()?;
            pen_sum += loss.penalty.map_or(Ok(0.0), |p| g.value(p).item())?;
            batches += 1;
            model.params_mut().zero_grad();
            g.backward_into(loss.total, model.params_mut())?;
            adam.step(model.params_mut());
        }
        let n = batches.max(1) as f64;
        let mut record = EpochRecord {
            epoch: epoch + 1,
            lambda,
            train_loss: loss_sum / n,
            train_nll: nll_sum / n,
            penalty: pen_sum / n,
            ..EpochRecord::default()
        };
        hook(&model, &mut record)?;
        log::info!(
            "epoch {} lambda {:.4e} loss {:.5} test {}",
            record.epoch,
            lambda,
            record.train_loss,
            opt(record.test_metric)
        );
        report.records.push(record);
    }
    Ok((model, report))
}

/// Standard cross-entropy training of the classifier alone on the first
/// annotator's labels, `mean -ln(softmax(z)[y] + ε)`.
pub fn train_cross_entropy(config: &TrainConfig, mut model: Model, view: &TrainView) -> Result<(Model, TrainReport)> {
    config.validate()?;
    check_compatible(&model, view)?;
    let mut adam = Adam::new(model.params(), config.learning_rate, config.beta1, config.beta2, config.adam_eps);
    let mut report = TrainReport::default();
    for epoch in 0..config.epochs {
        let (mut sum, mut batches) = (0.0, 0usize);
        for (b, batch) in view.batches(config.batch_size, config.seed, epoch).enumerate() {
            let mut g = Graph::new();
            let x = g.constant(batch.inputs);
            let p = model.classifier_forward(&mut g, x)?;
            let loss = objective::nll(&mut g, p, &batch.labels[0])?;
            let value = g.value(loss).item()?;
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b, lambda: 0.0 });
            }
            sum += value;
            batches += 1;
            model.params_mut().zero_grad();
            g.backward_into(loss, model.params_mut())?;
            adam.step(model.params_mut());
        }
        let mean = sum / batches.max(1) as f64;
        report.records.push(EpochRecord { epoch: epoch + 1, train_loss: mean, train_nll: mean, ..EpochRecord::default() });
    }
    Ok((model, report))
}

fn check_compatible(model: &Model, view: &TrainView) -> Result<()> {
    if view.is_empty() {
        return Err(Error::Usage("empty training set".into()));
    }
    if view.annotator_count() == 0 {
        return Err(Error::Usage("training needs at least one annotator".into()));
    }
    if model.annotators() != view.annotator_count() {
        return Err(Error::Dimension(format!(
            "model has {} confusion heads, data has {} annotators",
            model.annotators(),
            view.annotator_count()
        )));
    }
    if model.classes() != view.classes() || (model.spec().height, model.spec().width) != (view.height(), view.width()) {
        return Err(Error::Dimension("model and data disagree on classes or image extents".into()));
    }
    if model.is_pixelwise() != (view.task() == Task::Segmentation) {
        return Err(Error::Usage("model output granularity does not match the task".into()));
    }
    Ok(())
}

/// Test-set performance: accuracy, or DICE of the foreground (class 1)
/// averaged over images; plus mean prediction entropy.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub metric: f64,
    pub entropy: f64,
    pub info: f64,
    /// Predicted class per sample, or per pixel for segmentation.
    pub predictions: Vec<usize>,
    /// Maximum class probability per row.
    pub max_probs: Vec<f64>,
}

/// Evaluates against clean labels in chunks of `batch_size` images.
pub fn evaluate(model: &Model, data: &LabeledDataset, batch_size: usize) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::Usage("evaluation on an empty set".into()));
    }
    let per = data.labels_per_sample();
    let mut predictions = Vec::with_capacity(data.len() * per);
    let mut max_probs = Vec::with_capacity(data.len() * per);
    let (mut entropy, mut info) = (0.0, 0.0);
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let mut g = Graph::new();
        let x = g.constant(data.input_batch(chunk));
        let p = model.classifier_forward(&mut g, x)?;
        let probs = g.value(p).clone();
        let c = probs.shape()[1];
        for row in probs.data().chunks_exact(c) {
            info += objective::info(row);
            max_probs.push(row.iter().copied().fold(f64::NEG_INFINITY, f64::max));
        }
        let pred = prediction_from_probs(probs);
        entropy += pred.entropy * pred.classes.len() as f64;
        predictions.extend(pred.classes);
    }
    let rows = predictions.len() as f64;
    let metric = match data.task() {
        Task::Classification => {
            predictions.iter().zip(data.clean_labels()).filter(|(p, y)| p == y).count() as f64 / rows
        }
        Task::Segmentation => {
            let (h, w) = (data.height(), data.width());
            let to_mask = |s: &[usize]| Mask::new(h, w, s.iter().map(|&v| u8::from(v == 1)).collect());
            let mut total = 0.0;
            for (p, y) in predictions.chunks_exact(per).zip(data.clean_labels().chunks_exact(per)) {
                total += dice(&to_mask(p)?, &to_mask(y)?);
            }
            total / data.len() as f64
        }
    };
    Ok(Evaluation { metric, entropy: entropy / rows, info: info / rows, predictions, max_probs })
}

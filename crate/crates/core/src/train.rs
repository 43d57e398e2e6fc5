//! SGD training with a loss-plateau learning-rate schedule, and evaluation.

use std::fmt;
use std::time::Instant;

use crate::autodiff::{Graph, Tape};
use crate::data::{mix, Dataset};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::ops::{loss::argmax_rows, Mode};
use crate::params::{GradStore, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub lr_factor: f64,
    /// Epochs without strict improvement before the rate is multiplied by
    /// `lr_factor`.
    pub patience: usize,
    pub max_epochs: usize,
    /// Training stops once an epoch's mean per-image loss is below this.
    pub target_loss: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            initial_lr: 0.05,
            lr_factor: 0.1,
            patience: 5,
            max_epochs: 150,
            target_loss: 0.01,
            batch_size: 50,
            seed: 0,
            momentum: 0.0,
        }
    }
}

impl TrainConfig {
    /// Defaults with the CIFAR-10 batch size of 64.
    pub fn cifar10() -> Self {
        TrainConfig {
            batch_size: 64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return bad(format!(
                "learning rate {} must be positive",
                self.initial_lr
            ));
        }
        if !(self.lr_factor > 0.0 && self.lr_factor <= 1.0) {
            return bad(format!("lr factor {} outside (0, 1]", self.lr_factor));
        }
        if self.patience == 0 || self.max_epochs == 0 || self.batch_size == 0 {
            return bad("patience, max epochs and batch size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        Ok(())
    }
}

/// Reduce-on-plateau state. An epoch improves only when its loss is
/// strictly below the best so far.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scheduler {
    pub best_loss: f64,
    pub epochs_since_improvement: usize,
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
}

impl Scheduler {
    pub fn new(cfg: &TrainConfig) -> Self {
        Scheduler {
            best_loss: f64::INFINITY,
            epochs_since_improvement: 0,
            lr: cfg.initial_lr,
            factor: cfg.lr_factor,
            patience: cfg.patience,
        }
    }

    /// Feeds one epoch's loss and returns the rate for the next epoch.
    pub fn update(&mut self, epoch_loss: f64) -> f64 {
        if epoch_loss < self.best_loss {
            self.best_loss = epoch_loss;
            self.epochs_since_improvement = 0;
        } else {
            self.epochs_since_improvement += 1;
            if self.epochs_since_improvement >= self.patience {
                self.lr *= self.factor;
                self.epochs_since_improvement = 0;
            }
        }
        self.lr
    }
}

/// Stochastic gradient descent, `v <- m*v + g; theta <- theta - lr*v`.
/// With `m = 0` this is the plain update.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    velocity: Option<GradStore<f32>>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Sgd {
            momentum,
            velocity: None,
        }
    }

    /// Updates every trainable entry of `params`; buffers are left alone.
    pub fn step(
        &mut self,
        params: &mut ParamStore<f32>,
        grads: &GradStore<f32>,
        lr: f64,
    ) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        if let Some((id, g)) = grads
            .iter()
            .find(|(id, g)| g.shape() != params.get(*id).shape())
        {
            return Err(Error::Contract(format!(
                "gradient {} for parameter `{}` {}",
                g.shape(),
                params.entry(id).name,
                params.get(id).shape()
            )));
        }
        let lr = lr as f32;
        let m = self.momentum as f32;
        if m != 0.0 && self.velocity.is_none() {
            self.velocity = Some(GradStore::zeros_like(params));
        }
        for (id, g) in grads.iter() {
            if !params.entry(id).trainable {
                continue;
            }
            let theta = params.get_mut(id).data_mut();
            match self.velocity.as_mut().filter(|_| m != 0.0) {
                Some(vs) => {
                    let v = vs.get_mut(id).data_mut();
                    for ((t, v), &g) in theta.iter_mut().zip(v).zip(g.data()) {
                        *v = m * *v + g;
                        *t -= lr * *v;
                    }
                }
                None => {
                    for (t, &g) in theta.iter_mut().zip(g.data()) {
                        *t -= lr * g;
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    /// Epoch loss fell below the target.
    TargetLoss,
    /// The epoch budget ran out.
    MaxEpochs,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StopReason::TargetLoss => "target",
            StopReason::MaxEpochs => "epochs",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean per-image training loss.
    pub loss: f64,
    /// Rate used during this epoch.
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub stop: StopReason,
}

impl History {
    pub const CSV_HEADER: &'static str = "epoch,loss,lr,seconds";

    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for e in &self.epochs {
            s.push_str(&format!(
                "{},{},{},{:.3}\n",
                e.epoch, e.loss, e.lr, e.seconds
            ));
        }
        s
    }
}

/// One optimization step on a batch; returns the batch's mean loss.
pub fn train_step(
    model: &mut Model,
    sgd: &mut Sgd,
    grads: &mut GradStore<f32>,
    images: Tensor<f32>,
    labels: &[usize],
    lr: f64,
    seed: u64,
) -> Result<f64> {
    grads.zero();
    let (loss, updates) = {
        let mut tape = Tape::new(model.store(), Mode::Train, seed);
        let x = tape.input(images);
        let logits = model.forward_graph(&mut tape, &x)?;
        let loss = tape.softmax_cross_entropy(&logits, labels)?;
        let value = f64::from(tape.value(&loss).data()[0]);
        if !value.is_finite() {
            return Ok(value);
        }
        tape.backward(loss, grads)?;
        (value, tape.take_stat_updates())
    };
    model.store_mut().apply_stat_updates(&updates);
    sgd.step(model.store_mut(), grads, lr)?;
    Ok(loss)
}

pub fn train_loop(model: &mut Model, data: &Dataset, cfg: &TrainConfig) -> Result<History> {
    train_loop_with(model, data, cfg, |_| {})
}

/// [`train_loop`] calling `on_epoch` after every epoch.
pub fn train_loop_with(
    model: &mut Model,
    data: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<History> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if data.classes() > model.num_classes() {
        return Err(Error::Config(format!(
            "dataset has {} classes, model outputs {}",
            data.classes(),
            model.num_classes()
        )));
    }
    model.check_input(data.image_shape())?;

    let mut sched = Scheduler::new(cfg);
    let mut sgd = Sgd::new(cfg.momentum);
    let mut grads = GradStore::zeros_like(model.store());
    let mut epochs = Vec::new();
    for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        let lr = sched.lr;
        let order = data.order(cfg.seed, epoch);
        let mut total = 0.0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let (images, labels) = data.batch(idx);
            let seed = mix(cfg.seed, ((epoch as u64) << 32) | b as u64);
            let loss = train_step(model, &mut sgd, &mut grads, images, &labels, lr, seed)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            total += loss * idx.len() as f64;
        }
        let rec = EpochRecord {
            epoch,
            loss: total / data.len() as f64,
            lr,
            seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&rec);
        epochs.push(rec);
        if let Some(stop) = stop_check(epoch, rec.loss, cfg) {
            return Ok(History { epochs, stop });
        }
        sched.update(rec.loss);
    }
    unreachable!("stop_check fires at max_epochs")
}

/// Whether training ends after `epoch` (1-based) finished with `epoch_loss`.
/// Reaching the target wins when both conditions hold.
pub fn stop_check(epoch: usize, epoch_loss: f64, cfg: &TrainConfig) -> Option<StopReason> {
    if epoch_loss < cfg.target_loss {
        Some(StopReason::TargetLoss)
    } else if epoch >= cfg.max_epochs {
        Some(StopReason::MaxEpochs)
    } else {
        None
    }
}

/// Inference-mode predictions, ties broken towards the lowest class.
pub fn predict(model: &Model, data: &Dataset, batch_size: usize) -> Result<Vec<usize>> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::with_capacity(data.len());
    for chunk in idx.chunks(batch_size.max(1)) {
        let (images, _) = data.batch(chunk);
        out.extend(argmax_rows(&model.infer(&images)?));
    }
    Ok(out)
}

/// Fraction of samples whose prediction equals the label.
pub fn evaluate(model: &Model, data: &Dataset, batch_size: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    Ok(accuracy(&predict(model, data, batch_size)?, data.labels()))
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    let hits = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    hits as f64 / labels.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn defaults() {
        let c = TrainConfig::default();
        assert_eq!((c.initial_lr, c.lr_factor, c.patience), (0.05, 0.1, 5));
        assert_eq!((c.max_epochs, c.target_loss, c.batch_size), (150, 0.01, 50));
        assert_eq!(c.momentum, 0.0);
        assert_eq!(TrainConfig::cifar10().batch_size, 64);
    }

    #[test]
    fn plateau_hand_trace() {
        let mut s = Scheduler::new(&TrainConfig::default());
        let lrs: Vec<f64> = [1.0, 0.9, 0.91, 0.92, 0.93, 0.94, 0.95]
            .iter()
            .map(|&l| s.update(l))
            .collect();
        assert_eq!(&lrs[..6], &[0.05; 6]);
        assert_eq!(lrs[6], 0.05 * 0.1);
    }

    #[test]
    fn equal_loss_is_not_improvement() {
        let mut s = Scheduler::new(&TrainConfig::default());
        s.update(0.5);
        for _ in 0..5 {
            s.update(0.5);
        }
        assert_eq!(s.lr, 0.05 * 0.1);
    }

    fn one_param(v: f32) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.add_trainable("t", Tensor::full(Shape::scalar(), v));
        s.add_buffer("b", Tensor::full(Shape::scalar(), 7.0));
        s
    }

    #[test]
    fn sgd_arithmetic() {
        let mut p = one_param(1.0);
        let mut g = GradStore::zeros_like(&p);
        let id = p.id_of("t").unwrap();
        g.accumulate(id, &Tensor::scalar(1.0)).unwrap();
        g.accumulate(p.id_of("b").unwrap(), &Tensor::scalar(1.0))
            .unwrap();
        Sgd::new(0.0).step(&mut p, &g, 0.05).unwrap();
        assert_eq!(p.get(id).data()[0], 0.95);
        assert_eq!(p.get(p.id_of("b").unwrap()).data()[0], 7.0);

        let mut p = one_param(0.0);
        let mut sgd = Sgd::new(0.9);
        sgd.step(&mut p, &g, 0.1).unwrap();
        sgd.step(&mut p, &g, 0.1).unwrap();
        assert!((p.get(id).data()[0] + 0.29).abs() < 1e-7);

        let mut p = one_param(3.0);
        let zero = GradStore::zeros_like(&p);
        Sgd::new(0.0).step(&mut p, &zero, 0.1).unwrap();
        assert_eq!(p.get(id).data()[0], 3.0);
    }

    #[test]
    fn sgd_rejects_mismatched_grads() {
        let mut p = one_param(0.0);
        let mut other = ParamStore::new();
        other.add_trainable("t", Tensor::zeros(Shape::vector(2)));
        other.add_buffer("b", Tensor::zeros(Shape::scalar()));
        let g = GradStore::zeros_like(&other);
        assert!(matches!(
            Sgd::new(0.0).step(&mut p, &g, 0.1),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn history_csv() {
        let h = History {
            epochs: vec![EpochRecord {
                epoch: 1,
                loss: 0.5,
                lr: 0.05,
                seconds: 1.25,
            }],
            stop: StopReason::MaxEpochs,
        };
        assert_eq!(h.to_csv(), "epoch,loss,lr,seconds\n1,0.5,0.05,1.250\n");
        assert_eq!(h.stop.to_string(), "epochs");
    }

    #[test]
    fn accuracy_recount() {
        assert_eq!(accuracy(&[0, 1, 2, 2], &[0, 1, 1, 2]), 0.75);
    }
}

//! Loss, gradients, SGD with momentum under a warm-up + cosine schedule,
//! finite-difference gradient checking and the toy training loop.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{logits_graph, ModelConfig, ModelParams, Sample};
use crate::numerics::{Rng, Tensor};
use crate::tape::Tape;

/// Gradients in the order of [`ModelParams::named`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    pub tensors: Vec<Tensor>,
}

impl ParamGrads {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Self {
            tensors: params.named().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors.iter().fold(0.0, |m, t| m.max(t.max_abs()))
    }
}

/// Mean cross-entropy of `logits` rows and its gradient with respect to the
/// logits.
pub fn loss(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let mut tape = Tape::new();
    let z = tape.leaf(logits.clone());
    let l = tape.cross_entropy(z, labels)?;
    let value = tape.value(l).data()[0];
    let mut grads = tape.backward(l, 1.0)?;
    Ok((value, grads.take(z).expect("logits receive a gradient")))
}

/// Loss of one sample and `upstream * d(loss)/d(params)`.
pub fn sample_gradients(
    config: &ModelConfig,
    params: &ModelParams,
    sample: &Sample,
    upstream: f64,
) -> Result<(f64, ParamGrads)> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let logits = logits_graph(&mut tape, config, &vars, sample)?;
    let loss = tape.cross_entropy(logits, &[sample.label])?;
    let value = tape.value(loss).data()[0];
    let mut grads = tape.backward(loss, upstream)?;
    let tensors = vars
        .vars()
        .into_iter()
        .map(|v| grads.take(v).unwrap_or_else(|| Tensor::zeros(tape.value(v).shape())))
        .collect();
    Ok((value, ParamGrads { tensors }))
}

/// Mean loss over `batch` and its exact gradient. Per-sample gradients may be
/// computed in parallel; they are summed in batch order.
pub fn backward(config: &ModelConfig, params: &ModelParams, batch: &[Sample]) -> Result<(f64, ParamGrads)> {
    config.validate()?;
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let share = 1.0 / batch.len() as f64;
    let parts: Vec<(f64, ParamGrads)> = batch
        .par_iter()
        .map(|s| sample_gradients(config, params, s, share))
        .collect::<Result<_>>()?;
    let mut total = ParamGrads::zeros_like(params);
    let mut loss = 0.0;
    for (l, g) in &parts {
        loss += l * share;
        for (acc, t) in total.tensors.iter_mut().zip(&g.tensors) {
            acc.axpy(1.0, t)?;
        }
    }
    Ok((loss, total))
}

/// Mean loss over `batch` from a forward pass only.
pub fn batch_loss(config: &ModelConfig, params: &ModelParams, batch: &[Sample]) -> Result<f64> {
    let out = crate::model::forward(config, params, batch)?;
    let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
    Ok(loss(&out.logits, &labels)?.0)
}

/// Linear warm-up from 0 to `base_lr`, then cosine decay to 0 at
/// `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl Schedule {
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * step as f64 / self.warmup_steps as f64;
        }
        let decay = self.total_steps.saturating_sub(self.warmup_steps);
        if decay == 0 {
            return if step >= self.total_steps { 0.0 } else { self.base_lr };
        }
        let progress = ((step - self.warmup_steps) as f64 / decay as f64).min(1.0);
        0.5 * self.base_lr * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub velocity: Vec<Tensor>,
    pub step: usize,
    pub schedule: Schedule,
    pub momentum: f64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams, schedule: Schedule, momentum: f64) -> Self {
        Self {
            velocity: ParamGrads::zeros_like(params).tensors,
            step: 0,
            schedule,
            momentum,
        }
    }

    /// `v <- momentum * v + g; p <- p - lr(t) * v`. Returns the learning
    /// rate used.
    pub fn sgd_step(&mut self, params: &mut ModelParams, grads: &ParamGrads) -> Result<f64> {
        let lr = self.schedule.lr(self.step);
        for ((p, v), g) in params
            .tensors_mut()
            .into_iter()
            .zip(&mut self.velocity)
            .zip(&grads.tensors)
        {
            if v.len() != g.len() || p.len() != g.len() {
                return Err(Error::shape("sgd_step", p.shape(), g.shape()));
            }
            for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vv = self.momentum * *vv + gv;
                *pv -= lr * *vv;
            }
        }
        self.step += 1;
        Ok(lr)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub epsilon: f64,
    pub threshold: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().fold(0.0, |m, e| m.max(e.max_rel_error))
    }

    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.max_rel_error < self.threshold)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("parameter,max_rel_error,max_abs_error,pass\n");
        for e in &self.entries {
            let _ = writeln!(
                out,
                "{},{:e},{:e},{}",
                e.name,
                e.max_rel_error,
                e.max_abs_error,
                e.max_rel_error < self.threshold
            );
        }
        out
    }
}

/// Floor on the relative-error denominator, so entries whose true gradient
/// is zero are judged by absolute error against this scale.
pub const GRADCHECK_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, GRADCHECK_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRADCHECK_FLOOR)
}

/// Central-difference check of every parameter element.
///
/// Uses the fourth-order stencil
/// `(-f(x+2e) + 8 f(x+e) - 8 f(x-e) + f(x-2e)) / 12e`. The two-point form
/// carries an `O(e^2)` truncation error near `1e-9` at `e = 1e-4`, which
/// exceeds a `1e-4` relative tolerance on entries whose gradient is ~`1e-6`.
pub fn gradcheck(
    config: &ModelConfig,
    params: &ModelParams,
    batch: &[Sample],
    epsilon: f64,
    threshold: f64,
) -> Result<GradCheckReport> {
    gradcheck_with(config, params, batch, epsilon, threshold, |_| {})
}

/// [`gradcheck`] with a hook that may alter the analytic gradients before
/// comparison.
pub fn gradcheck_with(
    config: &ModelConfig,
    params: &ModelParams,
    batch: &[Sample],
    epsilon: f64,
    threshold: f64,
    tamper: impl Fn(&mut ParamGrads),
) -> Result<GradCheckReport> {
    let (_, mut analytic) = backward(config, params, batch)?;
    tamper(&mut analytic);
    let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
    let mut entries = Vec::with_capacity(names.len());
    for (t, name) in names.into_iter().enumerate() {
        let a = &analytic.tensors[t];
        let errors: Vec<(f64, f64)> = (0..a.len())
            .into_par_iter()
            .map(|i| {
                let shifted = |delta: f64| -> Result<f64> {
                    let mut p = params.clone();
                    p.tensors_mut()[t].data_mut()[i] += delta;
                    batch_loss(config, &p, batch)
                };
                let numeric = (8.0 * (shifted(epsilon)? - shifted(-epsilon)?)
                    - (shifted(2.0 * epsilon)? - shifted(-2.0 * epsilon)?))
                    / (12.0 * epsilon);
                let av = a.data()[i];
                Ok((relative_error(av, numeric), (av - numeric).abs()))
            })
            .collect::<Result<_>>()?;
        let (rel, abs) = errors
            .iter()
            .fold((0.0f64, 0.0f64), |(r, b), &(x, y)| (r.max(x), b.max(y)));
        entries.push(GradCheckEntry {
            name,
            max_rel_error: rel,
            max_abs_error: abs,
        });
    }
    Ok(GradCheckReport {
        entries,
        epsilon,
        threshold,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub warmup_fraction: f64,
    pub init_std: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            base_lr: 0.05,
            momentum: 0.9,
            warmup_fraction: 0.1,
            init_std: 0.02,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub accuracy: f64,
    pub lr: f64,
}

pub fn metrics_csv(trace: &[EpochMetrics]) -> String {
    let mut out = String::from("epoch,split,loss,accuracy,lr\n");
    for m in trace {
        let _ = writeln!(out, "{},{},{},{},{}", m.epoch, m.split.name(), m.loss, m.accuracy, m.lr);
    }
    out
}

/// Mean loss and accuracy over `samples`.
pub fn evaluate(config: &ModelConfig, params: &ModelParams, samples: &[Sample]) -> Result<(f64, f64)> {
    let chunks: Vec<(f64, usize)> = samples
        .par_chunks(64)
        .map(|chunk| -> Result<(f64, usize)> {
            let out = crate::model::forward(config, params, chunk)?;
            let labels: Vec<usize> = chunk.iter().map(|s| s.label).collect();
            let (l, _) = loss(&out.logits, &labels)?;
            let correct = out.predictions().iter().zip(&labels).filter(|(p, y)| p == y).count();
            Ok((l * chunk.len() as f64, correct))
        })
        .collect::<Result<_>>()?;
    let n = samples.len() as f64;
    let loss_sum: f64 = chunks.iter().map(|c| c.0).sum();
    let correct: usize = chunks.iter().map(|c| c.1).sum();
    Ok((loss_sum / n, correct as f64 / n))
}

pub struct TrainOutcome {
    pub params: ModelParams,
    pub trace: Vec<EpochMetrics>,
}

/// Trains from a fresh initialization. Deterministic in `seed`: parameter
/// init and per-epoch shuffles come from one seeded stream and batch
/// gradients are reduced in a fixed order.
pub fn train_toy(
    model: &ModelConfig,
    train: &TrainConfig,
    train_set: &[Sample],
    test_set: &[Sample],
    seed: u64,
) -> Result<TrainOutcome> {
    model.validate()?;
    if train_set.is_empty() || train.batch_size == 0 || train.epochs == 0 {
        return Err(Error::Config(
            "training needs samples, a positive batch size and epochs".into(),
        ));
    }
    let mut rng = Rng::new(seed);
    let mut params = ModelParams::init(model, train.init_std, &mut rng.fork())?;
    let mut order_rng = rng.fork();

    let per_epoch = train_set.len().div_ceil(train.batch_size);
    let total = per_epoch * train.epochs;
    let schedule = Schedule {
        base_lr: train.base_lr,
        warmup_steps: (train.warmup_fraction * total as f64).round() as usize,
        total_steps: total,
    };
    let mut opt = OptimizerState::new(&params, schedule, train.momentum);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut trace = Vec::with_capacity(2 * train.epochs);

    for epoch in 1..=train.epochs {
        order_rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for idx in order.chunks(train.batch_size) {
            let batch: Vec<Sample> = idx.iter().map(|&i| train_set[i].clone()).collect();
            let (l, grads) = backward(model, &params, &batch)?;
            loss_sum += l * batch.len() as f64;
            lr = opt.sgd_step(&mut params, &grads)?;
        }
        let (_, train_acc) = evaluate(model, &params, train_set)?;
        trace.push(EpochMetrics {
            epoch,
            split: Split::Train,
            loss: loss_sum / train_set.len() as f64,
            accuracy: train_acc,
            lr,
        });
        if !test_set.is_empty() {
            let (test_loss, test_acc) = evaluate(model, &params, test_set)?;
            trace.push(EpochMetrics {
                epoch,
                split: Split::Test,
                loss: test_loss,
                accuracy: test_acc,
                lr,
            });
        }
    }
    Ok(TrainOutcome { params, trace })
}

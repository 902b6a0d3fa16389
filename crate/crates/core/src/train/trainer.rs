use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{compute_metrics, stratified_split, Metrics, Split, TrainError};
use crate::autodiff::Graph;
use crate::dataset::fmt_real;
use crate::earliness::{take_prefix_capped, EarlinessReport, PrefixSpec};
use crate::features::MtsSample;
use crate::model::{sample_tensor, MdtConfig, MdtModel};
use crate::tensor::Tensor;

/// Optimiser and protocol settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a validation macro-F1 improvement before stopping.
    pub patience: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub train_frac: f64,
    pub val_frac: f64,
    /// Inverse-frequency class weights in the loss; uniform when off.
    pub class_weighting: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 32,
            max_epochs: 100,
            patience: 10,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            train_frac: 0.7,
            val_frac: 0.15,
            class_weighting: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let ok = self.lr >= 0.0
            && self.lr.is_finite()
            && self.batch_size > 0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.adam_eps > 0.0
            && self.train_frac > 0.0
            && self.val_frac >= 0.0
            && self.train_frac + self.val_frac <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(TrainError::Invalid(format!(
                "invalid training settings: {self:?}"
            )))
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub(crate) struct Adam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub(crate) fn new(params: &[Tensor], lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Adam {
            m: zeros(),
            v: zeros(),
            t: 0,
            lr,
            beta1,
            beta2,
            eps,
        }
    }

    pub(crate) fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            let it = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut());
            for (((p, &g), m), v) in it {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Sorted distinct labels.
pub fn class_list(samples: &[MtsSample]) -> Vec<String> {
    samples
        .iter()
        .map(|s| s.label.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

/// Prefixes of a dataset turned into model inputs.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub classes: Vec<String>,
    pub ids: Vec<String>,
    pub xs: Vec<Tensor>,
    pub ys: Vec<usize>,
    pub reports: Vec<EarlinessReport>,
}

impl PreparedData {
    /// Cuts every sample per `spec`, never keeping more than `max_len` rows.
    /// With `classes = None` the class list is derived from the labels.
    pub fn new(
        samples: &[MtsSample],
        spec: PrefixSpec,
        max_len: usize,
        classes: Option<&[String]>,
    ) -> Result<Self, TrainError> {
        let classes = classes.map_or_else(|| class_list(samples), <[String]>::to_vec);
        let mut data = PreparedData {
            classes,
            ids: Vec::with_capacity(samples.len()),
            xs: Vec::with_capacity(samples.len()),
            ys: Vec::with_capacity(samples.len()),
            reports: Vec::with_capacity(samples.len()),
        };
        for s in samples {
            if s.is_empty() {
                return Err(TrainError::Invalid(format!(
                    "sample {} has no rows",
                    s.flow_id
                )));
            }
            let y = data
                .classes
                .iter()
                .position(|c| *c == s.label)
                .ok_or_else(|| TrainError::UnknownLabel(s.label.clone()))?;
            let (p, report) = take_prefix_capped(s, spec, max_len);
            data.ids.push(s.flow_id.clone());
            data.xs.push(sample_tensor(&p));
            data.ys.push(y);
            data.reports.push(report);
        }
        Ok(data)
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    /// Feature width, or `None` for an empty set.
    pub fn d(&self) -> Option<usize> {
        self.xs.first().map(Tensor::cols)
    }

    pub fn split(&self, tc: &TrainConfig, seed: u64) -> Split {
        stratified_split(&self.ys, self.n_classes(), tc.train_frac, tc.val_frac, seed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Class-weighted mean cross-entropy over the training partition after
    /// the epoch's updates, without dropout.
    pub loss: f64,
    pub val_macro_f1: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation macro F1.
    pub model: MdtModel,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

/// `w_c = N / (C n_c)` over the training partition.
pub fn class_weights(
    data: &PreparedData,
    train: &[usize],
    weighted: bool,
) -> Result<Vec<f64>, TrainError> {
    let c = data.n_classes();
    let mut counts = vec![0usize; c];
    for &i in train {
        counts[data.ys[i]] += 1;
    }
    if let Some(missing) = counts.iter().position(|&n| n == 0) {
        return Err(TrainError::ClassMissing(data.classes[missing].clone()));
    }
    let n = train.len() as f64;
    Ok(counts
        .iter()
        .map(|&k| {
            if weighted {
                n / (c as f64 * k as f64)
            } else {
                1.0
            }
        })
        .collect())
}

fn check_fit(config: &MdtConfig, data: &PreparedData) -> Result<(), TrainError> {
    if config.n_classes != data.n_classes() {
        return Err(TrainError::Invalid(format!(
            "model has {} classes, data has {}",
            config.n_classes,
            data.n_classes()
        )));
    }
    if let Some(d) = data.d() {
        if d != config.d_in {
            return Err(TrainError::Invalid(format!(
                "model expects d_in {}, data has {d}",
                config.d_in
            )));
        }
    }
    Ok(())
}

pub fn predict_all(
    model: &MdtModel,
    data: &PreparedData,
    idx: &[usize],
) -> Result<Vec<usize>, TrainError> {
    idx.par_iter()
        .map(|&i| Ok(model.predict(&data.xs[i])?))
        .collect()
}

pub fn evaluate(
    model: &MdtModel,
    data: &PreparedData,
    idx: &[usize],
) -> Result<Metrics, TrainError> {
    let pred = predict_all(model, data, idx)?;
    let truth: Vec<usize> = idx.iter().map(|&i| data.ys[i]).collect();
    compute_metrics(&pred, &truth, data.n_classes())
}

/// Class-weighted mean cross-entropy of `model` over `idx`, dropout off.
pub fn weighted_loss(
    model: &MdtModel,
    data: &PreparedData,
    idx: &[usize],
    weights: &[f64],
) -> Result<f64, TrainError> {
    let terms: Vec<(f64, f64)> = idx
        .par_iter()
        .map(|&i| -> Result<_, TrainError> {
            let (logits, _) = model.forward(&data.xs[i], None)?;
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let log_z = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            let w = weights[data.ys[i]];
            Ok((w * (log_z - logits[data.ys[i]]), w))
        })
        .collect::<Result<_, _>>()?;
    let (num, den) = terms
        .iter()
        .fold((0.0, 0.0), |(n, d), (a, b)| (n + a, d + b));
    Ok(if den > 0.0 { num / den } else { 0.0 })
}

/// Mini-batch Adam on class-weighted cross-entropy with early stopping on
/// validation macro F1.
///
/// Samples of a batch are differentiated in parallel; their gradients are
/// summed in batch order so results do not depend on the thread count.
pub fn train(
    mut model: MdtModel,
    data: &PreparedData,
    split: &Split,
    tc: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome, TrainError> {
    tc.validate()?;
    check_fit(model.config(), data)?;
    if split.val.is_empty() {
        return Err(TrainError::EmptySplit("validation"));
    }
    let weights = class_weights(data, &split.train, tc.class_weighting)?;
    let mut adam = Adam::new(model.params(), tc.lr, tc.beta1, tc.beta2, tc.adam_eps);
    let mut order = split.train.clone();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));

    let mut history = Vec::new();
    let mut best = (f64::NEG_INFINITY, 0usize, model.params().to_vec());
    let mut stale = 0;
    for epoch in 1..=tc.max_epochs {
        order.shuffle(&mut shuffle_rng);
        for batch in order.chunks(tc.batch_size) {
            let batch_weight: f64 = batch.iter().map(|&i| weights[data.ys[i]]).sum();
            let per_sample: Vec<Vec<Tensor>> = batch
                .par_iter()
                .map(|&i| -> Result<_, TrainError> {
                    let y = data.ys[i];
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream(((epoch as u64) << 32) | i as u64);
                    let mut g = Graph::new();
                    let f = model.build(&mut g, &data.xs[i], None, Some(&mut rng))?;
                    let nll = g.cross_entropy(f.logits, &[y], &weights)?;
                    let mut grads = g.backward_scaled(nll, weights[y] / batch_weight)?;
                    Ok(f.params
                        .iter()
                        .zip(model.params())
                        .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
                        .collect())
                })
                .collect::<Result<_, _>>()?;
            let mut total: Vec<Tensor> = model
                .params()
                .iter()
                .map(|p| Tensor::zeros(p.shape()))
                .collect();
            for grads in &per_sample {
                for (t, g) in total.iter_mut().zip(grads) {
                    t.accumulate(g);
                }
            }
            adam.step(model.params_mut(), &total);
        }
        let val_f1 = evaluate(&model, data, &split.val)?.macro_f1;
        let loss = weighted_loss(&model, data, &split.train, &weights)?;
        history.push(EpochRecord {
            epoch,
            loss,
            val_macro_f1: val_f1,
        });
        if val_f1 > best.0 {
            best = (val_f1, epoch, model.params().to_vec());
            stale = 0;
        } else {
            stale += 1;
            if stale >= tc.patience {
                break;
            }
        }
    }
    let (_, best_epoch, params) = best;
    model.params_mut().clone_from_slice(&params);
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
    })
}

pub fn write_history(history: &[EpochRecord], path: impl AsRef<Path>) -> Result<(), TrainError> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)?;
    w.write_record(["epoch", "loss", "val_macro_f1"])?;
    for h in history {
        w.write_record([
            h.epoch.to_string(),
            fmt_real(h.loss),
            fmt_real(h.val_macro_f1),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Everything produced by one prepare, split, train and test run.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub data: PreparedData,
    pub split: Split,
    pub outcome: TrainOutcome,
    pub test: Metrics,
}

/// Trains a fresh model on prefixes of `samples` and scores it on the
/// held-out test partition. Model weights, split and dropout all derive
/// from `seed`.
pub fn run_experiment(
    samples: &[MtsSample],
    spec: PrefixSpec,
    config: &MdtConfig,
    tc: &TrainConfig,
    seed: u64,
) -> Result<Experiment, TrainError> {
    let data = PreparedData::new(samples, spec, config.max_len, None)?;
    let split = data.split(tc, seed);
    if split.test.is_empty() {
        return Err(TrainError::EmptySplit("test"));
    }
    let model = MdtModel::new(config.clone(), seed)?;
    let outcome = train(model, &data, &split, tc, seed)?;
    let test = evaluate(&outcome.model, &data, &split.test)?;
    Ok(Experiment {
        data,
        split,
        outcome,
        test,
    })
}

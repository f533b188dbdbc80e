//! Mini-batch SGD, the elastic weight consolidation penalty, diagonal
//! Fisher estimation, and the sequential multi-task driver.
//!
//! Task `i > 1` starts from the previous task's best parameters and is
//! trained on its split's cross-entropy plus
//! `sum_j (lambda / 2) * F_j * (theta_j - theta*_j)^2`, where `theta*` and `F`
//! come from task `i - 1` only.
//!
//! The penalty enters each SGD step in closed (proximal) form:
//!
//! ```text
//! theta <- (theta - lr * g_ce + lr * lambda * F * theta*) / (1 + lr * lambda * F)
//! ```
//!
//! which is the minimizer of the linearized step plus the exact quadratic.
//! An explicit gradient step on the penalty diverges once
//! `lr * lambda * F_j > 2`, which large `lambda` reaches easily. With
//! `lambda = 0` the update reduces bitwise to plain SGD.

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featurizer::{EncodedDataset, FeatureVector, PAD_INDEX};
use crate::metrics::{confusion, report, MetricsReport};
use crate::model::{Mode, ModelState};
use crate::partition::{validate_sequence, SplitPlan};
use crate::scalar::Scalar;
use crate::seeded_rng;

const TRAIN_STREAM: u64 = 0x7_0000;
const FISHER_STREAM: u64 = 0xF_0000;
const EVAL_CHUNK: usize = 512;

/// Anchor for the quadratic penalty: previous optimum, its Fisher diagonal,
/// and the penalty strength.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct EwcAnchor<T> {
    theta_star: Vec<T>,
    fisher: Vec<T>,
    lambda: T,
}

impl<T: Scalar> EwcAnchor<T> {
    pub fn new(theta_star: Vec<T>, fisher: Vec<T>, lambda: T) -> Result<Self> {
        if theta_star.len() != fisher.len() {
            return Err(Error::LengthMismatch {
                expected: theta_star.len(),
                actual: fisher.len(),
            });
        }
        if !(lambda >= T::zero()) {
            return Err(Error::InvalidArgument(format!(
                "lambda must be >= 0, got {lambda}"
            )));
        }
        if fisher.iter().any(|&f| !(f >= T::zero())) {
            return Err(Error::InvalidArgument("Fisher entries must be >= 0".into()));
        }
        Ok(Self {
            theta_star,
            fisher,
            lambda,
        })
    }

    pub fn theta_star(&self) -> &[T] {
        &self.theta_star
    }

    pub fn fisher(&self) -> &[T] {
        &self.fisher
    }

    pub fn lambda(&self) -> T {
        self.lambda
    }

    pub fn with_lambda(mut self, lambda: T) -> Result<Self> {
        if !(lambda >= T::zero()) {
            return Err(Error::InvalidArgument(format!(
                "lambda must be >= 0, got {lambda}"
            )));
        }
        self.lambda = lambda;
        Ok(self)
    }

    fn check(&self, theta: &[T]) -> Result<()> {
        if theta.len() != self.theta_star.len() {
            return Err(Error::LengthMismatch {
                expected: self.theta_star.len(),
                actual: theta.len(),
            });
        }
        Ok(())
    }
}

/// Penalty value and gradient at `theta`.
pub fn ewc_penalty<T: Scalar>(theta: &[T], anchor: &EwcAnchor<T>) -> Result<(T, Vec<T>)> {
    anchor.check(theta)?;
    let half = T::lit(0.5);
    let mut value = T::zero();
    let mut grad = Vec::with_capacity(theta.len());
    for ((&t, &s), &f) in theta.iter().zip(&anchor.theta_star).zip(&anchor.fisher) {
        let d = t - s;
        value = value + half * anchor.lambda * f * d * d;
        grad.push(anchor.lambda * f * d);
    }
    Ok((value, grad))
}

/// `sum_j F_j * (theta_j - theta*_j)^2`, ignoring lambda.
pub fn fisher_weighted_drift<T: Scalar>(theta: &[T], anchor: &EwcAnchor<T>) -> Result<T> {
    anchor.check(theta)?;
    Ok(theta
        .iter()
        .zip(&anchor.theta_star)
        .zip(&anchor.fisher)
        .map(|((&t, &s), &f)| f * (t - s) * (t - s))
        .sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lambda: f64,
    pub fisher_sample_cap: usize,
    pub seed: u64,
    /// Class reported as positive in validation metrics.
    pub positive_class: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            learning_rate: 0.1,
            lambda: 1000.0,
            fisher_sample_cap: 1000,
            seed: 0,
            positive_class: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.fisher_sample_cap == 0 {
            return Err(Error::Config(
                "epochs, batch_size and fisher_sample_cap must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based task index within the sequence.
    pub task: usize,
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_macro_f1: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_positive_f1: Option<f64>,
}

/// One training task: a subset of an encoded dataset.
#[derive(Debug, Clone, Copy)]
pub struct Task<'a> {
    /// 0-based position in the sequence; selects the RNG stream.
    pub index: usize,
    pub data: &'a EncodedDataset,
    pub indices: &'a [usize],
}

#[derive(Debug, Clone)]
pub struct TaskOutcome<T> {
    pub best: ModelState<T>,
    pub best_epoch: usize,
    pub best_val_macro_f1: f64,
    pub history: Vec<EpochRecord>,
}

fn gather(data: &EncodedDataset, idx: &[usize]) -> (Vec<FeatureVector>, Vec<usize>) {
    (
        idx.iter().map(|&i| data.features[i].clone()).collect(),
        idx.iter().map(|&i| data.labels[i]).collect(),
    )
}

fn check_indices(data: &EncodedDataset, idx: &[usize]) -> Result<()> {
    if let Some(&bad) = idx.iter().find(|&&i| i >= data.len()) {
        return Err(Error::InvalidArgument(format!(
            "index {bad} out of range for {} examples",
            data.len()
        )));
    }
    Ok(())
}

/// Eval-mode predictions for every example in `data`.
pub fn predict_all<T: Scalar>(m: &ModelState<T>, data: &EncodedDataset) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.features.chunks(EVAL_CHUNK) {
        out.extend(m.predict(chunk)?);
    }
    Ok(out)
}

pub fn evaluate<T: Scalar>(
    m: &ModelState<T>,
    data: &EncodedDataset,
    positive_class: Option<usize>,
) -> Result<MetricsReport<f64>> {
    let preds = predict_all(m, data)?;
    let cm = confusion(&data.labels, &preds, data.num_classes)?;
    Ok(report(&cm, positive_class))
}

/// Empirical Fisher diagonal: mean of squared log-likelihood gradients over
/// at most `cap` examples drawn uniformly from `indices`, dropout disabled.
pub fn fisher_diagonal<T: Scalar>(
    m: &ModelState<T>,
    data: &EncodedDataset,
    indices: &[usize],
    cap: usize,
    seed: u64,
) -> Result<Vec<T>> {
    if indices.is_empty() {
        return Err(Error::EmptyDataset);
    }
    check_indices(data, indices)?;
    let chosen: Vec<usize> = if indices.len() > cap {
        let mut rng = seeded_rng(seed, FISHER_STREAM);
        let mut picks: Vec<usize> = index::sample(&mut rng, indices.len(), cap).into_vec();
        picks.sort_unstable();
        picks.into_iter().map(|j| indices[j]).collect()
    } else {
        indices.to_vec()
    };

    let n = m.n_params();
    let d_emb = m.dims().d_emb;
    let tail_start = m.dims().vocab * d_emb;
    let mut fisher = vec![T::zero(); n];
    let mut grad = vec![T::zero(); n];
    let mut rows: Vec<usize> = Vec::new();
    for &i in &chosen {
        let ex = std::slice::from_ref(&data.features[i]);
        let fwd = m.forward(ex, Mode::Eval)?;
        m.backward_into(&fwd.cache, ex, &[data.labels[i]], &mut grad)?;

        // Only the example's embedding rows and the dense tail are non-zero.
        rows.clear();
        rows.extend(
            data.features[i]
                .indices()
                .iter()
                .filter(|&&t| t != PAD_INDEX)
                .map(|&t| t as usize),
        );
        rows.sort_unstable();
        rows.dedup();
        let touched = rows
            .iter()
            .flat_map(|&r| r * d_emb..(r + 1) * d_emb)
            .chain(tail_start..n);
        for j in touched {
            fisher[j] = fisher[j] + grad[j] * grad[j];
            grad[j] = T::zero();
        }
    }
    let count = T::from_count(chosen.len());
    for f in &mut fisher {
        *f = *f / count;
    }
    Ok(fisher)
}

/// Train on one task from `model`, returning the epoch snapshot with the best
/// validation macro-F1 (earliest on ties).
pub fn train_task<T: Scalar>(
    model: ModelState<T>,
    task: Task<'_>,
    val: &EncodedDataset,
    cfg: &TrainConfig,
    anchor: Option<&EwcAnchor<T>>,
) -> Result<TaskOutcome<T>> {
    cfg.validate()?;
    if task.indices.is_empty() {
        return Err(Error::InvalidArgument("training split is empty".into()));
    }
    if val.is_empty() {
        return Err(Error::InvalidArgument("validation set is empty".into()));
    }
    check_indices(task.data, task.indices)?;
    if let Some(a) = anchor {
        a.check(model.params())?;
    }

    let lr = T::lit(cfg.learning_rate);
    // Per-coordinate proximal factors: lr * lambda * F_j.
    let prox: Option<Vec<T>> =
        anchor.map(|a| a.fisher.iter().map(|&f| lr * a.lambda * f).collect());

    let mut model = model;
    let mut rng = seeded_rng(cfg.seed, TRAIN_STREAM + task.index as u64);
    let mut order = task.indices.to_vec();
    let mut grad = vec![T::zero(); model.n_params()];
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(ModelState<T>, usize, f64)> = None;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (features, labels) = gather(task.data, chunk);
            let fwd = model.forward(&features, Mode::Train(&mut rng))?;
            let mut loss = model.loss(&fwd, &labels)?;
            if let Some(a) = anchor {
                loss = loss + ewc_penalty(model.params(), a)?.0;
            }
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b + 1,
                    loss: loss.to_f64_lossy(),
                });
            }
            grad.fill(T::zero());
            model.backward_into(&fwd.cache, &features, &labels, &mut grad)?;

            let theta = model.params_mut();
            match (anchor, &prox) {
                (Some(a), Some(prox)) => {
                    for j in 0..theta.len() {
                        let step = theta[j] - lr * grad[j];
                        theta[j] = (step + prox[j] * a.theta_star[j]) / (T::one() + prox[j]);
                    }
                }
                _ => {
                    for (t, &g) in theta.iter_mut().zip(&grad) {
                        *t = *t - lr * g;
                    }
                }
            }
            loss_sum += loss.to_f64_lossy();
            batches += 1;
        }

        let metrics = evaluate(&model, val, cfg.positive_class)?;
        history.push(EpochRecord {
            task: task.index + 1,
            epoch,
            train_loss: loss_sum / batches as f64,
            val_macro_f1: metrics.macro_f1,
            val_positive_f1: metrics.positive.map(|p| p.f1),
        });
        if best
            .as_ref()
            .is_none_or(|(_, _, f1)| metrics.macro_f1 > *f1)
        {
            best = Some((model.clone(), epoch, metrics.macro_f1));
        }
    }

    let (best, best_epoch, best_val_macro_f1) = best.expect("epochs >= 1");
    Ok(TaskOutcome {
        best,
        best_epoch,
        best_val_macro_f1,
        history,
    })
}

#[derive(Debug, Clone)]
pub struct SequentialOutcome<T> {
    /// Best model of the last task.
    pub model: ModelState<T>,
    pub best_val_macro_f1: f64,
    /// One anchor per task: its best parameters and Fisher diagonal.
    pub anchors: Vec<EwcAnchor<T>>,
    pub history: Vec<EpochRecord>,
}

/// Validate `plan`, then train over its splits in order.
pub fn sequential_train<T: Scalar, P: Scalar>(
    m0: ModelState<T>,
    plan: &SplitPlan<P>,
    data: &EncodedDataset,
    val: &EncodedDataset,
    cfg: &TrainConfig,
) -> Result<SequentialOutcome<T>> {
    let report = validate_sequence(plan);
    if !report.passed() {
        return Err(Error::InvalidPlan(
            report
                .violations
                .iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join("; "),
        ));
    }
    if plan.n_examples != data.len() {
        return Err(Error::LengthMismatch {
            expected: data.len(),
            actual: plan.n_examples,
        });
    }
    train_sequence(m0, &plan.splits, data, val, cfg)
}

/// Train over `tasks` in order without checking their KL ordering. Task `i`
/// warm-starts from task `i - 1`'s best model and is anchored to it.
pub fn train_sequence<T: Scalar>(
    m0: ModelState<T>,
    tasks: &[Vec<usize>],
    data: &EncodedDataset,
    val: &EncodedDataset,
    cfg: &TrainConfig,
) -> Result<SequentialOutcome<T>> {
    if tasks.is_empty() {
        return Err(Error::InvalidArgument("no tasks to train".into()));
    }
    let tag = |task: usize| {
        move |e: Error| Error::Task {
            task: task + 1,
            source: Box::new(e),
        }
    };
    let lambda = T::lit(cfg.lambda);
    let mut model = m0;
    let mut anchors: Vec<EwcAnchor<T>> = Vec::with_capacity(tasks.len());
    let mut history = Vec::new();
    let mut best_val = 0.0;
    for (i, indices) in tasks.iter().enumerate() {
        let task = Task {
            index: i,
            data,
            indices,
        };
        let out = train_task(model, task, val, cfg, anchors.last()).map_err(tag(i))?;
        history.extend(out.history);
        let fisher = fisher_diagonal(
            &out.best,
            data,
            indices,
            cfg.fisher_sample_cap,
            cfg.seed.wrapping_add(i as u64),
        )
        .map_err(tag(i))?;
        anchors.push(EwcAnchor::new(out.best.params().to_vec(), fisher, lambda)?);
        best_val = out.best_val_macro_f1;
        model = out.best;
    }
    Ok(SequentialOutcome {
        model,
        best_val_macro_f1: best_val,
        anchors,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Dims;

    #[test]
    fn penalty_examples() {
        let a = EwcAnchor::new(vec![0.0, 1.0], vec![1.0, 3.0], 2.0).unwrap();
        let (v, g) = ewc_penalty(&[1.0, 0.0], &a).unwrap();
        assert_eq!(v, 4.0);
        assert_eq!(g, vec![2.0, -6.0]);

        let (v, g) = ewc_penalty(&[0.0, 1.0], &a).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.iter().all(|&x| x == 0.0));

        let off = a.clone().with_lambda(0.0).unwrap();
        assert_eq!(ewc_penalty(&[5.0, -3.0], &off).unwrap().0, 0.0);

        assert!(ewc_penalty(&[1.0], &a).is_err());
    }

    #[test]
    fn anchor_validation() {
        assert!(EwcAnchor::new(vec![0.0], vec![1.0, 2.0], 1.0).is_err());
        assert!(EwcAnchor::new(vec![0.0], vec![-1.0], 1.0).is_err());
        assert!(EwcAnchor::new(vec![0.0], vec![1.0], -1.0).is_err());
    }

    fn toy() -> EncodedDataset {
        // Token 2 marks class 0, token 3 marks class 1.
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for i in 0..40 {
            let y = i % 2;
            let marker = 2 + y as u32;
            features.push(FeatureVector(vec![marker, 4 + (i % 3) as u32, 0, 0]));
            labels.push(y);
        }
        EncodedDataset {
            features,
            labels,
            num_classes: 2,
        }
    }

    #[test]
    fn fisher_is_mean_of_squared_gradients() {
        let data = toy();
        let m = ModelState::<f64>::init(4, Dims::new(8, 3, 4, 1).unwrap());
        let f = fisher_diagonal(&m, &data, &[0, 1], 100, 0).unwrap();
        let g0 = m
            .log_likelihood_grad(&data.features[0], data.labels[0])
            .unwrap();
        let g1 = m
            .log_likelihood_grad(&data.features[1], data.labels[1])
            .unwrap();
        for j in 0..f.len() {
            let expected = (g0[j] * g0[j] + g1[j] * g1[j]) / 2.0;
            assert!((f[j] - expected).abs() <= 1e-15 * (1.0 + expected));
        }
        assert!(f.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn fisher_subsamples_to_cap_deterministically() {
        let data = toy();
        let m = ModelState::<f64>::init(4, Dims::new(8, 3, 4, 1).unwrap());
        let idx: Vec<usize> = (0..40).collect();
        let a = fisher_diagonal(&m, &data, &idx, 5, 9).unwrap();
        assert_eq!(a, fisher_diagonal(&m, &data, &idx, 5, 9).unwrap());
        assert!(fisher_diagonal(&m, &data, &[], 5, 9).is_err());
    }

    #[test]
    fn saturated_example_has_near_zero_fisher() {
        let data = toy();
        let mut m = ModelState::<f64>::init(4, Dims::new(8, 3, 4, 1).unwrap());
        m.output_bias_mut()[0] = 60.0;
        let f = fisher_diagonal(&m, &data, &[1], 10, 0).unwrap();
        assert!(f.iter().all(|&x| x < 1e-40));
    }

    #[test]
    fn history_has_one_record_per_epoch() {
        let data = toy();
        let cfg = TrainConfig {
            epochs: 4,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let m = ModelState::<f64>::init(1, Dims::new(8, 4, 6, 1).unwrap());
        let idx: Vec<usize> = (0..40).collect();
        let task = Task {
            index: 0,
            data: &data,
            indices: &idx,
        };
        let out = train_task(m, task, &data, &cfg, None).unwrap();
        assert_eq!(out.history.len(), 4);
        assert!(out
            .history
            .iter()
            .all(|r| r.task == 1 && r.train_loss.is_finite()));
        let best = out
            .history
            .iter()
            .map(|r| r.val_macro_f1)
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(out.best_val_macro_f1, best);
        let first_best = out
            .history
            .iter()
            .position(|r| r.val_macro_f1 == best)
            .unwrap();
        assert_eq!(out.best_epoch, first_best + 1);
    }

    #[test]
    fn divergence_is_reported() {
        let data = toy();
        let cfg = TrainConfig {
            epochs: 50,
            batch_size: 4,
            learning_rate: 1e300,
            ..TrainConfig::default()
        };
        let m = ModelState::<f64>::init(1, Dims::new(8, 4, 6, 1).unwrap());
        let idx: Vec<usize> = (0..40).collect();
        let task = Task {
            index: 0,
            data: &data,
            indices: &idx,
        };
        match train_task(m, task, &data, &cfg, None) {
            Err(Error::NonFiniteLoss { epoch, batch, .. }) => assert!(epoch >= 1 && batch >= 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            lambda: -1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}

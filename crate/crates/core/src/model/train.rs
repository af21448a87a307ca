use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphdata::PropagationEvent;
use crate::model::{BiGcnModel, ModelGrads};
use crate::numkernel::Matrix;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Consecutive non-improving epochs tolerated before stopping.
    pub patience: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Fraction of events held out for validation.
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            patience: 10,
            learning_rate: 1e-3,
            batch_size: 16,
            validation_fraction: 0.2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "epochs and batch_size must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config(format!(
                "validation_fraction must lie in [0, 1), got {}",
                self.validation_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub validation_loss: Option<f64>,
    pub validation_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainReport {
    pub fn best(&self) -> &EpochLog {
        &self.epochs[self.best_epoch]
    }
}

/// Seeded shuffle into (train, validation) index sets.
pub fn split_train_validation(
    n: usize,
    validation_fraction: f64,
    seed: u64,
) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = (validation_fraction * n as f64).round() as usize;
    let val = idx[..n_val].to_vec();
    let train = idx[n_val..].to_vec();
    (train, val)
}

/// Seeded k-fold partition; returns `(train, test)` indices per fold.
pub fn kfold_splits(n: usize, k: usize, seed: u64) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if k < 2 || k > n {
        return Err(Error::Config(format!(
            "cannot make {k} folds from {n} events"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok((0..k)
        .map(|f| {
            let test: Vec<usize> = idx.iter().copied().skip(f).step_by(k).collect();
            let train: Vec<usize> = idx
                .iter()
                .enumerate()
                .filter(|(i, _)| i % k != f)
                .map(|(_, &v)| v)
                .collect();
            (train, test)
        })
        .collect())
}

struct Adam<T> {
    lr: T,
    beta1: T,
    beta2: T,
    eps: T,
    step: i32,
    m: Vec<Matrix<T>>,
    v: Vec<Matrix<T>>,
}

impl<T: Scalar> Adam<T> {
    fn new(lr: f64, shapes: &[(usize, usize)]) -> Self {
        Self {
            lr: T::of(lr),
            beta1: T::of(0.9),
            beta2: T::of(0.999),
            eps: T::of(1e-8),
            step: 0,
            m: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
        }
    }

    fn update(&mut self, model: &mut BiGcnModel<T>, grads: &ModelGrads<T>) {
        self.step += 1;
        let bc1 = T::one() - self.beta1.powi(self.step);
        let bc2 = T::one() - self.beta2.powi(self.step);
        for (i, name) in model.tensor_names().into_iter().enumerate() {
            let param = model.tensor_mut(name).expect("listed tensor exists");
            let g = grads.tensors[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, p) in param.data_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (T::one() - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (T::one() - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

fn evaluate<T: Scalar>(model: &BiGcnModel<T>, events: &[&PropagationEvent]) -> Result<(f64, f64)> {
    let mut loss = 0.0;
    let mut correct = 0usize;
    for e in events {
        let logits = model.logits(e)?;
        loss += super::cross_entropy(&logits, e.label()).0.to_f64_lossy();
        correct += usize::from(super::argmax(&logits) == e.label());
    }
    let n = events.len().max(1) as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Minimises mean cross-entropy with Adam over shuffled minibatches.
///
/// Early stopping watches validation loss (training loss when `validation`
/// is empty); on stop, the best epoch's parameters are restored.
pub fn train<T: Scalar>(
    model: &mut BiGcnModel<T>,
    training: &[PropagationEvent],
    validation: &[PropagationEvent],
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    let mut classes: Vec<usize> = training.iter().map(PropagationEvent::label).collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::Config(format!(
            "training split must contain at least 2 classes, found {}",
            classes.len()
        )));
    }
    if let Some(bad) = training
        .iter()
        .chain(validation)
        .find(|e| e.label() >= model.num_classes())
    {
        return Err(Error::Config(format!(
            "event {} has label {} but the model has {} classes",
            bad.event_id(),
            bad.label(),
            model.num_classes()
        )));
    }

    let shapes: Vec<(usize, usize)> = model
        .tensor_names()
        .into_iter()
        .map(|n| model.tensor(n).expect("listed tensor exists").shape())
        .collect();
    let mut adam = Adam::new(config.learning_rate, &shapes);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..training.len()).collect();

    let mut epochs = Vec::new();
    let mut best: Option<(f64, usize, BiGcnModel<T>)> = None;
    let mut bad_epochs = 0usize;
    let mut stopped_early = false;
    let val_refs: Vec<&PropagationEvent> = validation.iter().collect();
    let train_refs: Vec<&PropagationEvent> = training.iter().collect();

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let mut acc: Option<ModelGrads<T>> = None;
            for &i in batch {
                let (_, g) = model.loss_and_grads(&training[i])?;
                match acc.as_mut() {
                    Some(a) => a.add_assign(&g)?,
                    None => acc = Some(g),
                }
            }
            let mut g = acc.expect("non-empty batch");
            g.scale(T::of(1.0 / batch.len() as f64));
            adam.update(model, &g);
        }

        let (train_loss, train_accuracy) = evaluate(model, &train_refs)?;
        let (validation_loss, validation_accuracy) = if val_refs.is_empty() {
            (None, None)
        } else {
            let (l, a) = evaluate(model, &val_refs)?;
            (Some(l), Some(a))
        };
        epochs.push(EpochLog {
            epoch,
            train_loss,
            train_accuracy,
            validation_loss,
            validation_accuracy,
        });

        let monitored = validation_loss.unwrap_or(train_loss);
        match &best {
            Some((best_loss, _, _)) if monitored >= *best_loss => {
                bad_epochs += 1;
                if bad_epochs > config.patience {
                    stopped_early = true;
                    break;
                }
            }
            _ => {
                best = Some((monitored, epoch, model.clone()));
                bad_epochs = 0;
            }
        }
    }

    let (_, best_epoch, best_model) = best.expect("at least one epoch ran");
    *model = best_model;
    Ok(TrainReport {
        epochs,
        best_epoch,
        stopped_early,
    })
}

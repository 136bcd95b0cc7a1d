//! Adam, the mini-batch training loop, and split evaluation.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bagsynth::BagRecord;
use crate::countnet::{BagPredictor, CountingNetwork};
use crate::diffcore::{cross_entropy, ParameterSet, Tape};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Bags per optimizer step.
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Reshuffle the training bags every epoch.
    pub shuffle: bool,
    /// Stop after this many epochs without a new best validation loss.
    /// Serialized as 0 when disabled.
    #[serde(with = "patience_serde")]
    pub patience: Option<usize>,
}

mod patience_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(p: &Option<usize>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(p.unwrap_or(0) as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<usize>, D::Error> {
        let n = usize::deserialize(d)?;
        Ok((n > 0).then_some(n))
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            batch_size: 64,
            max_epochs: 200,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            shuffle: true,
            patience: Some(50),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if self.batch_size < 1 {
            return bad("batch_size must be at least 1".into());
        }
        if self.max_epochs < 1 {
            return bad("max_epochs must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!(
                "betas must lie in [0, 1), got {} and {}",
                self.beta1, self.beta2
            ));
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return bad(format!("eps must be positive, got {}", self.eps));
        }
        if self.patience == Some(0) {
            return bad("patience must be at least 1 when set".into());
        }
        Ok(())
    }
}

/// Bias-corrected Adam over every tensor of a [`ParameterSet`].
#[derive(Clone, Debug)]
pub struct Adam {
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    pub fn new(
        params: &ParameterSet,
        learning_rate: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    ) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .ids()
            .map(|id| vec![0.0; params.value(id).len()])
            .collect();
        Self {
            learning_rate,
            beta1,
            beta2,
            eps,
            first: zeros.clone(),
            second: zeros,
            step: 0,
        }
    }

    pub fn from_config(params: &ParameterSet, config: &TrainConfig) -> Self {
        Self::new(
            params,
            config.learning_rate,
            config.beta1,
            config.beta2,
            config.eps,
        )
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update from the gradients currently held in `params`.
    pub fn step(&mut self, params: &mut ParameterSet) -> Result<()> {
        if params.len() != self.first.len()
            || params
                .ids()
                .any(|id| params.value(id).len() != self.first[id.index()].len())
        {
            return Err(Error::ShapeMismatch {
                context: "optimizer state".into(),
                expected: self.first.iter().map(Vec::len).collect(),
                actual: params.ids().map(|id| params.value(id).len()).collect(),
            });
        }
        self.step += 1;
        let t = self.step as i32;
        let correct1 = 1.0 - self.beta1.powi(t);
        let correct2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let grad = params.grad(id).data().to_vec();
            let (m, v) = (&mut self.first[id.index()], &mut self.second[id.index()]);
            let values = params.value_mut(id).data_mut();
            for k in 0..values.len() {
                let g = grad[k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g * g;
                let m_hat = m[k] / correct1;
                let v_hat = v[k] / correct2;
                values[k] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_instance_acc: f64,
    /// Wall-clock time of the epoch; the only non-deterministic field.
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch number (1-based) with the lowest validation loss, first on ties.
    pub best_epoch: usize,
    pub optimizer_steps: u64,
}

impl TrainHistory {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs.iter().find(|r| r.epoch == self.best_epoch)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitEvaluation {
    pub mean_loss: f64,
    pub instance_accuracy: f64,
    pub bag_accuracy: f64,
}

/// Mean bag loss, instance accuracy and bag accuracy. Bags are evaluated in
/// parallel and reduced in bag order.
pub fn evaluate_split<M: BagPredictor>(model: &M, bags: &[BagRecord]) -> Result<SplitEvaluation> {
    if bags.is_empty() {
        return Err(Error::InvalidConfig(
            "cannot evaluate an empty split".into(),
        ));
    }
    let per_bag = bags
        .par_iter()
        .map(|bag| {
            let out = model.forward_bag(bag)?;
            let loss = cross_entropy(&bag.majority_one_hot(), &out.bag_log_distribution)?;
            let labels = out.instance_labels();
            let correct = labels
                .iter()
                .zip(&bag.hidden_labels)
                .filter(|(a, b)| a == b)
                .count();
            Ok((
                loss,
                correct,
                bag.len(),
                out.bag_argmax() == bag.majority_class,
            ))
        })
        .collect::<Result<Vec<_>>>()?;

    let (mut loss, mut correct, mut total, mut bags_right) = (0.0, 0usize, 0usize, 0usize);
    for (l, c, n, ok) in per_bag {
        loss += l;
        correct += c;
        total += n;
        bags_right += usize::from(ok);
    }
    Ok(SplitEvaluation {
        mean_loss: loss / bags.len() as f64,
        instance_accuracy: correct as f64 / total as f64,
        bag_accuracy: bags_right as f64 / bags.len() as f64,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Progress {
    Improved,
    Stalled,
    /// Patience ran out; stop training.
    Exhausted,
}

/// Tracks the best validation loss. Only a strict decrease counts as an
/// improvement, so the earliest of equal minima is kept.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: Option<usize>,
    best: f64,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: Option<usize>) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            since_best: 0,
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn observe(&mut self, loss: f64) -> Progress {
        if loss < self.best {
            self.best = loss;
            self.since_best = 0;
            return Progress::Improved;
        }
        self.since_best += 1;
        if self.patience.is_some_and(|p| self.since_best >= p) {
            Progress::Exhausted
        } else {
            Progress::Stalled
        }
    }
}

/// [`train_with_observer`] without an observer.
pub fn train(
    model: CountingNetwork,
    train_bags: &[BagRecord],
    val_bags: &[BagRecord],
    config: &TrainConfig,
) -> Result<(CountingNetwork, TrainHistory)> {
    train_with_observer(model, train_bags, val_bags, config, |_| Ok(()))
}

/// Mini-batch training with best-validation-loss checkpoint selection.
///
/// Each batch loss is the mean bag loss over the batch, followed by one Adam
/// step. Returns the parameters from the best epoch. `observer` sees every
/// epoch record as soon as it is complete.
pub fn train_with_observer<F>(
    mut model: CountingNetwork,
    train_bags: &[BagRecord],
    val_bags: &[BagRecord],
    config: &TrainConfig,
    mut observer: F,
) -> Result<(CountingNetwork, TrainHistory)>
where
    F: FnMut(&EpochRecord) -> Result<()>,
{
    config.validate()?;
    if train_bags.is_empty() || val_bags.is_empty() {
        return Err(Error::InvalidConfig(
            "training and validation splits must be non-empty".into(),
        ));
    }
    let mut adam = Adam::from_config(model.params(), config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..train_bags.len()).collect();

    let mut history = TrainHistory::default();
    let mut best: Option<ParameterSet> = None;
    let mut stopper = EarlyStopping::new(config.patience);

    for epoch in 1..=config.max_epochs {
        let started = Instant::now();
        if config.shuffle {
            order.shuffle(&mut rng);
        }
        let mut loss_sum = 0.0;
        for (batch, chunk) in order.chunks(config.batch_size).enumerate() {
            let mut tape = Tape::new();
            let losses = chunk
                .iter()
                .map(|&i| model.bag_loss(&mut tape, &train_bags[i]))
                .collect::<Result<Vec<_>>>()?;
            let batch_loss = tape.mean(&losses)?;
            let value = tape.value(batch_loss).item().unwrap_or(f64::NAN);
            if !value.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: batch + 1,
                    loss: value,
                });
            }
            loss_sum += value * chunk.len() as f64;
            tape.backward(batch_loss, model.params_mut())?;
            drop(tape);
            adam.step(model.params_mut())?;
        }

        let val = evaluate_split(&model, val_bags)?;
        if !val.mean_loss.is_finite() {
            return Err(Error::Divergence {
                epoch,
                batch: 0,
                loss: val.mean_loss,
            });
        }
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train_bags.len() as f64,
            val_loss: val.mean_loss,
            val_instance_acc: val.instance_accuracy,
            seconds: started.elapsed().as_secs_f64(),
        };
        observer(&record)?;
        history.epochs.push(record);

        match stopper.observe(val.mean_loss) {
            Progress::Improved => {
                best = Some(model.params().clone());
                history.best_epoch = epoch;
            }
            Progress::Stalled => {}
            Progress::Exhausted => break,
        }
    }
    history.optimizer_steps = adam.steps();

    let params = best.expect("first epoch always improves");
    let best_model = CountingNetwork::from_parts(
        model.architecture().clone(),
        params,
        model.variant(),
        model.instance_temperature(),
        model.bag_temperature(),
    )?;
    Ok((best_model, history))
}

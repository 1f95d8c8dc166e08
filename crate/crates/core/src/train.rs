//! Adam, early stopping and the epoch loop.

use std::time::Instant;

use hme_autodiff::{ParamStore, Tape};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HmeError, Result};
use crate::eval::entity_f1;
use crate::model::Tagger;
use crate::tokenize::TokenizedSentence;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatienceUnit {
    /// Epochs without dev improvement.
    #[default]
    Epochs,
    /// Optimizer steps without dev improvement, checked at epoch ends.
    Steps,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub patience: usize,
    pub patience_unit: PatienceUnit,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Learning-rate multiplier applied after every evaluation without
    /// improvement.
    pub lr_decay: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            patience: 15,
            patience_unit: PatienceUnit::Epochs,
            batch_size: 32,
            max_epochs: 100,
            clip_norm: Some(5.0),
            lr_decay: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(HmeError::Config(m.to_string()));
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("eps must be positive");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("batch_size and max_epochs must be positive");
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return bad("clip_norm must be positive");
        }
        if self.lr_decay.is_some_and(|d| !(d > 0.0 && d <= 1.0)) {
            return bad("lr_decay must lie in (0, 1]");
        }
        Ok(())
    }
}

/// Adam with bias-corrected moments.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn from_config(config: &TrainConfig) -> Self {
        Self::new(config.learning_rate, config.beta1, config.beta2, config.eps)
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update to every parameter holding a gradient. Fails
    /// without touching anything if a gradient is not finite.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        for (_, name, t) in params.iter() {
            if let Some(g) = t.grad() {
                if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                    return Err(HmeError::Numerical(format!(
                        "gradient of parameter {name} is {} at element {i}",
                        g[i]
                    )));
                }
            }
        }
        if self.m.len() < params.len() {
            for (id, _, t) in params.iter().skip(self.m.len()) {
                debug_assert_eq!(id.index(), self.m.len());
                self.m.push(vec![0.0; t.len()]);
                self.v.push(vec![0.0; t.len()]);
            }
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let t = params.get_mut(id);
            let Some(g) = t.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            for (k, p) in t.data_mut().iter_mut().enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let mhat = m[k] / c1;
                let vhat = v[k] / c2;
                *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decision {
    Improved,
    Wait,
    Stop,
}

/// Tracks the best score; a score counts as better only if strictly greater.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<f64>,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: None,
            since_best: 0,
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    /// Records `score` after `elapsed` units (epochs or steps) of training.
    pub fn observe(&mut self, score: f64, elapsed: usize) -> Decision {
        if self.best.is_none_or(|b| score > b) {
            self.best = Some(score);
            self.since_best = 0;
            return Decision::Improved;
        }
        self.since_best += elapsed;
        if self.since_best >= self.patience {
            Decision::Stop
        } else {
            Decision::Wait
        }
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: u64,
    pub learning_rate: f64,
    /// Mean per-sentence negative log-likelihood over the epoch.
    pub train_nll: f64,
    pub dev_precision: f64,
    pub dev_recall: f64,
    pub dev_f1: f64,
    pub best_dev_f1: f64,
    pub improved: bool,
    pub elapsed_secs: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_dev_f1: f64,
    pub stopped_early: bool,
}

/// Trains `tagger` in place and leaves it holding the parameters of the
/// epoch with the best dev F1. `on_epoch` sees each record as it is made.
pub fn train<F>(
    tagger: &mut Tagger,
    train_set: &[TokenizedSentence],
    dev_set: &[TokenizedSentence],
    config: &TrainConfig,
    seed: u64,
    mut on_epoch: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&EpochRecord) -> Result<()>,
{
    config.validate()?;
    let train_set: Vec<&TokenizedSentence> = train_set.iter().filter(|s| !s.is_empty()).collect();
    if train_set.is_empty() || dev_set.iter().all(|s| s.is_empty()) {
        return Err(HmeError::Invalid("training and dev sets must be non-empty".into()));
    }
    let dev_gold = dev_set
        .iter()
        .map(|s| {
            s.labels
                .clone()
                .ok_or_else(|| HmeError::Invalid("dev sentences must be labeled".into()))
        })
        .collect::<Result<Vec<_>>>()?;
    let start = Instant::now();
    let mut adam = Adam::from_config(config);
    let mut stopper = EarlyStopping::new(config.patience);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5851_f42d_4c95_7f2d);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut best = (tagger.params.clone(), 0usize, 0.0f64);
    let mut records = Vec::new();
    let mut stopped_early = false;

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let steps_before = adam.steps();
        let mut total_nll = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&TokenizedSentence> = chunk.iter().map(|&i| train_set[i]).collect();
            let mut tape = Tape::new(seed);
            tape.set_train(true);
            tape.set_step(adam.steps());
            tagger.params.zero_grad();
            let loss = tagger.loss(&mut tape, &batch);
            let loss = match loss {
                Err(e) if e.is_numerical() => return Err(HmeError::Diverged { epoch, loss: f64::NAN }),
                other => other?,
            };
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(HmeError::Diverged { epoch, loss: value });
            }
            total_nll += value * batch.len() as f64;
            tape.backward(loss, &mut tagger.params)?;
            if let Some(max) = config.clip_norm {
                tagger.params.clip_grad_norm(max);
            }
            adam.step(&mut tagger.params)?;
        }

        let pred = tagger.predict(dev_set, config.batch_size)?;
        let report = entity_f1(&dev_gold, &pred)?;
        let steps = (adam.steps() - steps_before) as usize;
        let units = match config.patience_unit {
            PatienceUnit::Epochs => 1,
            PatienceUnit::Steps => steps,
        };
        let decision = stopper.observe(report.f1(), units);
        if decision == Decision::Improved {
            best = (tagger.params.clone(), epoch, report.f1());
        } else if let Some(decay) = config.lr_decay {
            adam.lr *= decay;
        }
        let record = EpochRecord {
            epoch,
            steps: adam.steps(),
            learning_rate: adam.lr,
            train_nll: total_nll / train_set.len() as f64,
            dev_precision: report.precision(),
            dev_recall: report.recall(),
            dev_f1: report.f1(),
            best_dev_f1: best.2,
            improved: decision == Decision::Improved,
            elapsed_secs: start.elapsed().as_secs_f64(),
        };
        on_epoch(&record)?;
        records.push(record);
        if decision == Decision::Stop {
            stopped_early = true;
            break;
        }
    }
    let (params, best_epoch, best_dev_f1) = best;
    tagger.params = params;
    Ok(TrainOutcome {
        records,
        best_epoch,
        best_dev_f1,
        stopped_early,
    })
}

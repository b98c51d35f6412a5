//! Momentum-SGD training: plain supervised training of a base model and the
//! distillation-regularized incremental update of a model copy.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::loss::{
    distillation_loss, distillation_loss_grad, multitask_loss, task_loss, task_loss_grad, Margin,
    MultiTaskTerms,
};
use super::model::{GroupedClassifier, ModelError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("feedback set is empty")]
    EmptyFeedback,
    #[error("training set is empty")]
    EmptyData,
}

/// One feature vector with its 0-based class index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub features: Vec<f64>,
    pub label: usize,
}

impl LabeledSample {
    pub fn new(features: Vec<f64>, label: usize) -> Self {
        Self { features, label }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Share of each batch drawn from the feedback set.
    pub new_data_rate: f64,
    /// Weight of the distillation term.
    pub alpha: f64,
    /// Weight of the classification term in the multi-task combination.
    pub lambda: f64,
    /// Evaluations without held-out improvement before stopping.
    pub patience: usize,
    /// Steps between held-out evaluations.
    pub eval_interval: usize,
    pub max_steps: usize,
    /// Fraction of each data set held out for early stopping.
    pub holdout_fraction: f64,
    /// Upper bound on the original-data pool used for distillation.
    pub replay_cap: Option<usize>,
    /// Angular margin for a-softmax heads; ignored by softmax heads.
    pub margin: u32,
    /// Margin blend at step 0, decayed as `start / (1 + decay·step)` down to
    /// `margin_blend_min`. Held-out loss always uses `margin_blend_min`.
    pub margin_blend_start: f64,
    pub margin_blend_decay: f64,
    pub margin_blend_min: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            learning_rate: 0.001,
            momentum: 0.9,
            new_data_rate: 0.25,
            alpha: 1.0,
            lambda: 1.0,
            patience: 10,
            eval_interval: 50,
            max_steps: 20_000,
            holdout_fraction: 0.1,
            replay_cap: None,
            margin: 4,
            margin_blend_start: 0.0,
            margin_blend_decay: 0.0,
            margin_blend_min: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.batch_size < 1 {
            return bad("batch_size must be at least 1");
        }
        if !(self.new_data_rate > 0.0 && self.new_data_rate <= 1.0) {
            return bad("new_data_rate must be in (0, 1]");
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be finite and non-negative");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be finite and non-negative");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return bad("holdout_fraction must be in [0, 1)");
        }
        if self.eval_interval < 1 {
            return bad("eval_interval must be at least 1");
        }
        if self.margin < 1 {
            return bad("margin must be at least 1");
        }
        let blends = [
            self.margin_blend_start,
            self.margin_blend_decay,
            self.margin_blend_min,
        ];
        if !blends.iter().all(|b| *b >= 0.0 && b.is_finite()) {
            return bad("margin blend settings must be finite and non-negative");
        }
        Ok(())
    }

    fn margin_at(&self, step: usize) -> Margin {
        let decayed = self.margin_blend_start / (1.0 + self.margin_blend_decay * step as f64);
        Margin {
            m: self.margin,
            blend: decayed.max(self.margin_blend_min),
        }
    }

    fn holdout_margin(&self) -> Margin {
        Margin {
            m: self.margin,
            blend: self.margin_blend_min,
        }
    }

    /// Batch split into (new, old) item counts.
    fn batch_split(&self, has_old: bool) -> (usize, usize) {
        if !has_old {
            return (self.batch_size, 0);
        }
        let new = ((self.batch_size as f64 * self.new_data_rate).round() as usize)
            .clamp(1, self.batch_size);
        (new, self.batch_size - new)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub holdout_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    pub best_step: usize,
    pub best_holdout_loss: f64,
    pub stopped_early: bool,
    pub history: Vec<EvalPoint>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: GroupedClassifier,
    pub report: TrainReport,
}

// Independent RNG streams so that changing one data set never shifts the
// random draws made for another.
const STREAM_SAMPLING: u64 = 0;
const STREAM_SPLIT_NEW: u64 = 1;
const STREAM_SPLIT_OLD: u64 = 2;
const STREAM_REPLAY: u64 = 3;

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Deterministic (train, holdout) split. The training part is never empty;
/// when the set is too small to hold anything out, the whole set is used for
/// both.
fn split<T: Clone>(items: &[T], fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<T>, Vec<T>) {
    let mut idx: Vec<usize> = (0..items.len()).collect();
    idx.shuffle(rng);
    let n_hold = ((items.len() as f64) * fraction).floor() as usize;
    if n_hold == 0 || n_hold >= items.len() {
        return (items.to_vec(), items.to_vec());
    }
    let hold = idx[..n_hold].iter().map(|&i| items[i].clone()).collect();
    let train = idx[n_hold..].iter().map(|&i| items[i].clone()).collect();
    (train, hold)
}

fn draw<'a, T>(items: &'a [T], n: usize, rng: &mut ChaCha8Rng) -> Vec<&'a T> {
    if items.is_empty() {
        return Vec::new();
    }
    (0..n)
        .map(|_| &items[rng.gen_range(0..items.len())])
        .collect()
}

fn check_dims(model: &GroupedClassifier, data: &[LabeledSample]) -> Result<(), TrainError> {
    for s in data {
        if s.features.len() != model.input_dim() {
            return Err(ModelError::DimensionMismatch {
                expected: model.input_dim(),
                got: s.features.len(),
            }
            .into());
        }
    }
    Ok(())
}

/// The combined objective on one batch: the classification term (weighted
/// through the multi-task combiner) on the new items plus `alpha` times the
/// distillation term on the old items.
#[derive(Debug, Clone, Copy)]
pub struct Objective<'a> {
    pub teacher: Option<&'a GroupedClassifier>,
    pub alpha: f64,
    pub lambda: f64,
    pub margin: Margin,
}

impl Objective<'_> {
    /// Early-stopping criterion: the objective itself plus the labelled task
    /// loss on held-out original items. The objective alone cannot see old
    /// items drifting into a new class, since distillation only constrains
    /// old-class outputs.
    pub fn holdout_loss(
        &self,
        student: &GroupedClassifier,
        new: &[&LabeledSample],
        old: &[&LabeledSample],
    ) -> Result<f64, ModelError> {
        let mut total = self.loss(student, new, old)?;
        if !old.is_empty() {
            let mut ce = 0.0;
            for s in old {
                ce += task_loss(student, &s.features, s.label, self.margin)?;
            }
            total += self.lambda * ce / old.len() as f64;
        }
        Ok(total)
    }

    pub fn loss(
        &self,
        student: &GroupedClassifier,
        new: &[&LabeledSample],
        old: &[&LabeledSample],
    ) -> Result<f64, ModelError> {
        let mut total = 0.0;
        if !new.is_empty() {
            let mut ce = 0.0;
            for s in new {
                ce += task_loss(student, &s.features, s.label, self.margin)?;
            }
            let terms = MultiTaskTerms::new(ce / new.len() as f64, 0.0, 1)?;
            total += multitask_loss(&terms, self.lambda);
        }
        if let (Some(t), false) = (self.teacher, old.is_empty()) {
            if self.alpha > 0.0 {
                let xs: Vec<Vec<f64>> = old.iter().map(|s| s.features.clone()).collect();
                total += self.alpha * distillation_loss(t, student, &xs)?;
            }
        }
        Ok(total)
    }

    /// Loss and flat parameter gradient.
    pub fn loss_grad(
        &self,
        student: &GroupedClassifier,
        new: &[&LabeledSample],
        old: &[&LabeledSample],
    ) -> Result<(f64, Vec<f64>), ModelError> {
        let mut grads = student.zero_gradients();
        let mut total = 0.0;
        if !new.is_empty() {
            let w = self.lambda / new.len() as f64;
            let mut ce = 0.0;
            for s in new {
                ce += task_loss_grad(student, &s.features, s.label, self.margin, w, &mut grads)?;
            }
            let terms = MultiTaskTerms::new(ce / new.len() as f64, 0.0, 1)?;
            total += multitask_loss(&terms, self.lambda);
        }
        if let (Some(t), false) = (self.teacher, old.is_empty()) {
            if self.alpha > 0.0 {
                let xs: Vec<Vec<f64>> = old.iter().map(|s| s.features.clone()).collect();
                total +=
                    self.alpha * distillation_loss_grad(t, student, &xs, self.alpha, &mut grads)?;
            }
        }
        Ok((total, grads.flat()))
    }
}

struct Pools<'a> {
    new_train: &'a [LabeledSample],
    new_hold: &'a [LabeledSample],
    old_train: &'a [LabeledSample],
    old_hold: &'a [LabeledSample],
}

fn run(
    mut student: GroupedClassifier,
    objective: &Objective,
    pools: &Pools,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    let (n_new, n_old) =
        cfg.batch_split(!pools.old_train.is_empty() && objective.teacher.is_some());
    let mut sampler = rng(cfg.seed, STREAM_SAMPLING);
    let hold_new: Vec<&LabeledSample> = pools.new_hold.iter().collect();
    let hold_old: Vec<&LabeledSample> = pools.old_hold.iter().collect();
    let holdout = |m: &GroupedClassifier| objective.holdout_loss(m, &hold_new, &hold_old);

    let mut params = student.params();
    let mut velocity = vec![0.0; params.len()];
    let mut best_loss = holdout(&student)?;
    let mut best_params = params.clone();
    let mut best_step = 0;
    let mut history = vec![EvalPoint {
        step: 0,
        holdout_loss: best_loss,
    }];
    let mut since_best = 0;
    let mut steps = 0;
    let mut stopped_early = false;

    while steps < cfg.max_steps {
        let new = draw(pools.new_train, n_new, &mut sampler);
        let old = draw(pools.old_train, n_old, &mut sampler);
        let step_objective = Objective {
            margin: cfg.margin_at(steps),
            ..*objective
        };
        let (_, grad) = step_objective.loss_grad(&student, &new, &old)?;
        for ((p, v), g) in params.iter_mut().zip(velocity.iter_mut()).zip(&grad) {
            *v = cfg.momentum * *v - cfg.learning_rate * g;
            *p += *v;
        }
        student.set_params(&params)?;
        student.renormalize_head();
        params = student.params();
        steps += 1;

        if steps % cfg.eval_interval == 0 || steps == cfg.max_steps {
            let loss = holdout(&student)?;
            history.push(EvalPoint {
                step: steps,
                holdout_loss: loss,
            });
            if loss < best_loss {
                best_loss = loss;
                best_params.clone_from(&params);
                best_step = steps;
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.patience {
                    stopped_early = true;
                    break;
                }
            }
        }
    }
    student.set_params(&best_params)?;
    Ok(TrainOutcome {
        model: student,
        report: TrainReport {
            steps,
            best_step,
            best_holdout_loss: best_loss,
            stopped_early,
            history,
        },
    })
}

fn classes_needed(sets: &[&[LabeledSample]]) -> usize {
    sets.iter()
        .flat_map(|s| s.iter().map(|x| x.label + 1))
        .max()
        .unwrap_or(0)
}

/// Trains `init` on `data` alone (every batch is drawn from `data`).
pub fn train_supervised(
    init: &GroupedClassifier,
    data: &[LabeledSample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(TrainError::EmptyData);
    }
    check_dims(init, data)?;
    if classes_needed(&[data]) > init.classes() {
        let label = data.iter().map(|s| s.label).max().unwrap_or(0);
        return Err(ModelError::LabelOutOfRange {
            label,
            classes: init.classes(),
        }
        .into());
    }
    let (train, hold) = split(
        data,
        cfg.holdout_fraction,
        &mut rng(cfg.seed, STREAM_SPLIT_NEW),
    );
    let objective = Objective {
        teacher: None,
        alpha: 0.0,
        lambda: cfg.lambda,
        margin: cfg.holdout_margin(),
    };
    let pools = Pools {
        new_train: &train,
        new_hold: &hold,
        old_train: &[],
        old_hold: &[],
    };
    run(init.clone(), &objective, &pools, cfg)
}

/// Updates a copy of `base` on the feedback set `feedback` while distilling
/// against `base` on samples from the original set `original`.
///
/// If `feedback` carries labels beyond the base model's classes, the copy's
/// output layer is expanded first. `base` is never modified. Labels of
/// `original` are not used; its items only feed the distillation term.
pub fn incremental_train(
    base: &GroupedClassifier,
    original: &[LabeledSample],
    feedback: &[LabeledSample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if feedback.is_empty() {
        return Err(TrainError::EmptyFeedback);
    }
    check_dims(base, feedback)?;
    check_dims(base, original)?;
    if cfg.new_data_rate >= 1.0 && cfg.alpha > 0.0 {
        log::warn!("new_data_rate = 1 leaves no original items per batch; the distillation term is always 0");
    }

    let needed = classes_needed(&[feedback]);
    let student = if needed > base.classes() {
        base.expand_output_layer(needed - base.classes())?
    } else {
        base.clone()
    };

    let mut pool: Vec<LabeledSample> = original.to_vec();
    if let Some(cap) = cfg.replay_cap {
        if pool.len() > cap {
            pool.shuffle(&mut rng(cfg.seed, STREAM_REPLAY));
            pool.truncate(cap);
        }
    }
    let (new_train, new_hold) = split(
        feedback,
        cfg.holdout_fraction,
        &mut rng(cfg.seed, STREAM_SPLIT_NEW),
    );
    let (old_train, old_hold) = if pool.is_empty() {
        (Vec::new(), Vec::new())
    } else {
        split(
            &pool,
            cfg.holdout_fraction,
            &mut rng(cfg.seed, STREAM_SPLIT_OLD),
        )
    };
    let distill = cfg.new_data_rate < 1.0 && cfg.alpha > 0.0;
    let objective = Objective {
        teacher: Some(base),
        alpha: cfg.alpha,
        lambda: cfg.lambda,
        margin: cfg.holdout_margin(),
    };
    let empty: Vec<LabeledSample> = Vec::new();
    let pools = Pools {
        new_train: &new_train,
        new_hold: &new_hold,
        old_train: if distill { &old_train } else { &empty },
        old_hold: if distill { &old_hold } else { &empty },
    };
    run(student, &objective, &pools, cfg)
}

/// Plain fine-tuning of a copy of `base` on `feedback` (no distillation).
pub fn fine_tune(
    base: &GroupedClassifier,
    feedback: &[LabeledSample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    let cfg = TrainConfig {
        alpha: 0.0,
        new_data_rate: 1.0,
        ..cfg.clone()
    };
    incremental_train(base, &[], feedback, &cfg)
}

/// Share of `data` whose label is not the model's top prediction.
pub fn top1_error(model: &GroupedClassifier, data: &[LabeledSample]) -> Result<f64, ModelError> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut wrong = 0usize;
    for s in data {
        if model.predict(&s.features)? != s.label {
            wrong += 1;
        }
    }
    Ok(wrong as f64 / data.len() as f64)
}
